"""The generated fixtures on disk match what the generator produces today."""

from build_fixtures import build_all


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_fixtures_are_current(tmp_path, fixtures_dir):
    build_all(tmp_path)
    for sub in ("e2e", "stats", "eval"):
        fresh, committed = _tree(tmp_path / sub), _tree(fixtures_dir / sub)
        assert fresh.keys() == committed.keys(), sub
        stale = [name for name in fresh if fresh[name] != committed[name]]
        assert not stale, f"regenerate fixtures: {stale}"
