"""Constants for the MedFormer package."""

# Tensor core
NORM_CHANNELS_PER_GROUP = 8
NORM_EPS = 1e-5
GELU_COEFF = 0.044715  # tanh approximation: 0.5x(1 + tanh(sqrt(2/pi)(x + c x^3)))
GRAD_CHECK_EPS = 1e-5
GRAD_CHECK_FLOOR = 1e-6

# Attention
DEFAULT_KERNEL_SIZE = 3
DEFAULT_SEMANTIC_HW = (4, 4)
FFN_EXPANSION = 4
ATTENTION_VARIANTS = ("bmha", "linear")
REDUCTION_MODES = ("strided", "pool")
PADDING_MODES = ("zeros", "circular")

# Fusion
DEFAULT_FUSION_BLOCKS = 2
DEFAULT_FUSION_HEADS = 4

# Model
STEM_BLOCKS = 2
MIN_INPUT_DIVISOR = 16
AUX_SCALE = 4
DEFAULT_AUX_LOSS_WEIGHT = 0.5

# Losses and metrics
CE_LOG_CLAMP = 1e-12
DICE_SMOOTH = 1e-5
PROB_SUM_TOLERANCE = 1e-4
HD_PERCENTILE = 95.0
METRIC_COLUMNS = ("case_id", "class", "dsc", "hd95")

# Preprocessing
STD_CLAMP = 1e-8
AUGMENT_PROBABILITY = 0.5
ROTATION_RANGE_DEG = 30.0
SCALE_RANGE = (0.85, 1.25)
BRIGHTNESS_RANGE = 0.1
CONTRAST_RANGE = (0.9, 1.1)
NOISE_SIGMA_MAX = 0.05

# Optimizer
DEFAULT_LR = 1e-3
DEFAULT_BETAS = (0.9, 0.999)
DEFAULT_ADAM_EPS = 1e-8
DEFAULT_WEIGHT_DECAY = 1e-2
DEFAULT_LR_DECAY_FACTOR = 30.0  # lr0 / lr_final over a full run
DEFAULT_GRAD_CLIP = 1.0

# File formats
MFT_MAGIC = b"MFT1"
CHECKPOINT_MAGIC = b"MFCKPT1"
MANIFEST_NAME = "manifest.json"
CASES_DIR = "cases"
IMAGE_SUFFIX = "_img.mft"
LABEL_SUFFIX = "_lbl.mft"
RUN_MANIFEST_NAME = "manifest.json"
RUN_METRICS_NAME = "metrics.csv"
CHECKPOINT_DIR = "checkpoints"
LAST_CHECKPOINT_NAME = "last.ckpt"

# CLI exit codes
EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
