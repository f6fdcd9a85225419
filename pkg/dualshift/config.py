"""dualshift configuration constants"""

APP_NAME = "dualshift"
VERSION = "0.1.0"

# Shift-label spatial branch
DEFAULT_DELTA_Y = 3
DEFAULT_EPSILON = 8 / 255
DEFAULT_BETA = 0.5
DEFAULT_PGD_STEPS = 30

# Ensemble gallery
DEFAULT_GALLERY_SIZE = 5

# Colour branch
DEFAULT_COLOR_SAMPLES = 1000  # N, images per class fed to the colour objective
DEFAULT_LAMBDA = 1.0

PSO_SWARM_SIZE = 50
PSO_ITERATIONS = 50
PSO_INERTIA = 0.729
PSO_COGNITIVE = 1.494
PSO_SOCIAL = 1.494
PSO_BOUND = 0.25  # pixel units, per RGB channel
PSO_VELOCITY_FRACTION = 0.5  # velocity clamp as a fraction of the bound
COLOR_EVAL_BATCH = 4096  # images per forward pass when scoring a swarm

# Noise-constraint thresholds (not published, picked for 32x32 images)
TAU_PSNR = 28.0
TAU_SSIM = 0.92
TAU_PERCEPTUAL = 0.04

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 8
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

# Defenses
JPEG_QUALITY = 10
GRAY_WEIGHTS = (0.299, 0.587, 0.114)
AT_EPSILON = 8 / 255
AT_STEPS = 7

# Training presets
DESK_TRAIN = {"epochs": 20, "batch_size": 128, "lr": 0.01, "momentum": 0.9, "weight_decay": 5e-4}
PAPER_TRAIN = {"epochs": 80, "batch_size": 128, "lr": 0.1, "momentum": 0.9, "weight_decay": 5e-4}

# On-disk formats
FORMAT_VERSION = 1
SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"
RAW_SIDECAR_NAME = "images.f32"
RAW_MAGIC = b"DSHT"
RECORD_NAME = "generation_record.json"
PROVENANCE_NAME = "provenance.json"
CELLS_NAME = "cells.csv"
AGGREGATE_NAME = "aggregate.json"
CHART_NAME = "accuracy.svg"

# Environment overrides (paths and seeds only)
ENV_WORK_DIR = "DUALSHIFT_WORK_DIR"
ENV_DATA_DIR = "DUALSHIFT_DATA_DIR"
ENV_SEED = "DUALSHIFT_SEED"
