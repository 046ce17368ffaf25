# src/utils/config.py
"""
Central config for quick changes.
"""

NUM_CLASSES = 19                # full anatomical label set, 0 = background
DESK_NUM_CLASSES = 8            # synthetic desk-scale trees

FEATURE_WIDTH = 128             # intermediate fusion features
NUM_POINTS = 6000               # M, points per backbone pass
NUM_IMPLICIT_POINTS = 2000      # fresh off-sample points for the implicit head
BALL_RADIUS = 0.1               # r, point-to-graph ball query
MAX_BALL_POINTS = 24            # ball query cap
PROPAGATION_K = 3               # k for graph-to-point and implicit propagation
IDW_EPSILON = 1e-9              # zero-distance guard, normalized space
FUSION_LAYERS = 3               # l
GAT_LAYERS = 11
GAT_HEADS = 4
QUERY_CHUNK = 16384             # implicit queries per chunk

SPLIT_RATIOS = (0.7, 0.1, 0.2)  # train / val / test

VOLUME_FORMAT_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1
