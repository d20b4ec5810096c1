"""Constants for the skinseg package."""

from typing import Final

# Pixel intensities
MAXVAL: Final = 255
GRAY_WEIGHTS: Final = (0.299, 0.587, 0.114)  # BT.601 luma
MAX_SIDE: Final = 256

# Bayesian classifier
DEFAULT_BINS: Final = 32
DEFAULT_PRIORS: Final = (0.5, 0.5)
DEFAULT_THRESHOLD: Final = 0.5

# Network architecture
DESK_LEVELS: Final = 3
DEFAULT_BASE_CHANNELS: Final = 16

# Training
DEFAULT_EPOCHS: Final = 200
DEFAULT_LR: Final = 1e-3
DEFAULT_BATCH_SIZE: Final = 4
DEFAULT_LOSS_WEIGHTS: Final = (1.0, 1.0)
DEFAULT_SEED: Final = 17
ADAM_BETAS: Final = (0.9, 0.999)
ADAM_EPS: Final = 1e-8
PROB_CLAMP: Final = 1e-7
DICE_SMOOTH: Final = 1.0

# Evaluation
PR_STEPS: Final = 256
WILCOXON_MIN_N: Final = 5
WILCOXON_EXACT_MAX_N: Final = 12
OVERLAY_DIM: Final = 0.5

# Dataset split proportional to 1750 / 250 / 2000 images
SPLIT_FRACTIONS: Final = (0.4375, 0.0625, 0.5)

# Artifact files
HIST_MAGIC: Final = b"BCH1"
WEIGHTS_MAGIC: Final = b"SKNW"
WEIGHTS_VERSION: Final = 1
MANIFEST_NAME: Final = "manifest.json"

# Model cache
MODEL_CACHE_SIZE: Final = 16

# reproduce-desk defaults (desk scale)
DESK_SAMPLES: Final = 40
DESK_SIZE: Final = 64
DESK_EPOCHS: Final = 30
DESK_ARCH: Final = "levels=2,base=8,inception=false,dense=false"
