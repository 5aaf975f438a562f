#!/usr/bin/env python3
"""
Configuration and constants for the retinal vessel map leakage audit.
"""

# Group labels as they appear in manifests; the first is the positive class
GROUP_LABELS = ('Black', 'White')
POSITIVE_GROUP = 'Black'

# Partition ratios (train, validation, test)
DEFAULT_RATIOS = (0.5, 0.2, 0.3)
REPRO_RATIOS = (0.6, 0.2, 0.2)

# Ablation ladder: lower PIV thresholds plus the two band sets
LADDER_THRESHOLDS = (0, 50, 100, 150, 200, 210, 220, 230, 240, 250, 256)
LOW_BAND = {'lower': 0, 'upper': 10}
MID_BAND = {'lower': 75, 'upper': 150}

# Thresholds used for the segmented-pixel count analysis
PIXEL_COUNT_THRESHOLDS = (0, 50, 200)

CLAHE_DEFAULTS = {
    'tiles': (8, 8),
    'clip_limit': 0.01,
}

# Group-independent covariate priors (pooled mean, SD) for synthetic cohorts
COVARIATE_PRIORS = {
    'bw_g': (1042.0, 315.0),
    'ga_wk': (27.7, 2.2),
    'pma_wk': (34.8, 3.2),
}
# Below this PMA - GA gap a drawn PMA is pushed up to GA + gap
MIN_PMA_GAP_WK = 0.5

# AUC-PR band around prevalence considered "chance"
CHANCE_BAND = 0.05

LOGGING_CONFIG = {
    'format': '%(asctime)s - %(levelname)s - %(message)s',
    'level': 'INFO',
}

PLOT_CONFIG = {
    'figsize': (5, 4),
    'dpi': 100,
    'svg_hashsalt': 'rvm-audit',
}
