"""Default thresholds and decoding parameters used across the toolkit."""

from .core import MAX_RELATIONS_PER_SUBJECT

REGION_VALIDATION_IOU = 0.5
PROPOSAL_NMS_IOU = 0.6
MERGE_IOU = 0.5
SIMILARITY_THRESHOLD = 0.3
RELATION_CAP = MAX_RELATIONS_PER_SUBJECT
RECALL_K = 20
MATCH_IOU = 0.5

GENERATION_TEMPERATURE = 0.2
GENERATION_TOP_P = 1.0
JUDGE_TEMPERATURE = 0.0

MIN_SUBJECTS = 5
DEPTH_MARGIN = 10
