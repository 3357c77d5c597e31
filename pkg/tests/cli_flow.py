"""The hermetic end-to-end flow over the bundled e2e fixtures, driven through the CLI."""

from __future__ import annotations

from pathlib import Path

from sgengine.cli import main

OUTPUTS = ("run.jsonl", "run.jsonl.diagnostics.jsonl", "report.json", "responses.jsonl",
           "stats.json", "eval.json")


def run_flow(e2e: Path, out: Path) -> dict[str, bytes]:
    """run -> stats -> eval; returns every output file's bytes."""
    out.mkdir(parents=True, exist_ok=True)
    run = out / "run.jsonl"
    codes = [
        main(["run", "--graphs", str(e2e / "graphs.jsonl"),
              "--config", str(e2e / "pipeline.json"),
              "--proposals", str(e2e / "proposals.jsonl"),
              "--captions", str(e2e / "captions.jsonl"),
              "--teacher", str(e2e / "teacher.json"),
              "--editor", str(e2e / "editor.json"),
              "--judges", str(e2e / "judge_a.json"), str(e2e / "judge_b.json"),
              "--out", str(run), "--report", str(out / "report.json"),
              "--responses", str(out / "responses.jsonl")]),
        main(["stats", "--graphs", str(run), "--out", str(out / "stats.json")]),
        main(["eval", "--pred", str(run), "--gt", str(e2e / "gt.jsonl"),
              "--classes", str(e2e / "objects.txt"), str(e2e / "predicates.txt"),
              "--out", str(out / "eval.json")]),
    ]
    if codes != [0, 0, 0]:
        raise RuntimeError(f"CLI exit codes {codes}")
    return {name: (out / name).read_bytes() for name in OUTPUTS}
