BOS_TOKEN = "<BOS>"
EOS_TOKEN = "<EOS>"
BOS_ID = 0
EOS_ID = 1

# Published MECFormer configuration.
PUBLISHED_LAYERS = 2
PUBLISHED_HEADS = 8
PUBLISHED_GAMMA = 5.0
PUBLISHED_BETA = 5.0
PUBLISHED_VOCAB_SIZE = 18
PUBLISHED_EPOCHS = 200
PUBLISHED_PATIENCE = 5

# Desk-scale defaults.
DEFAULT_D_F = 64
DEFAULT_D_MODEL = 64
DEFAULT_MAX_LANDMARKS = 64
DEFAULT_PINV_ITERATIONS = 6
DEFAULT_MAX_DECODE_LEN = 8
DEFAULT_LAYER_NORM_EPS = 1e-5
DEFAULT_SPLIT_FRACTIONS = (0.60, 0.15, 0.25)

LOOKAHEAD_K = 5
LOOKAHEAD_ALPHA = 0.5
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

FEATURE_EXTRACTOR_DIMS = {
    "desk": 64,
    "ctranspath": 768,
    "uni": 1024,
}

PROJECTION_KINDS = ("ecn", "p1", "pt")
TRAINING_SETTINGS = ("joint_task", "joint", "individual")
OPTIMIZER_KINDS = ("radam_lookahead", "adam")

BAG_MAGIC = b"MECB"
BAG_FORMAT_VERSION = 1
CHECKPOINT_MAGIC = b"MECK"
CHECKPOINT_FORMAT_VERSION = 1
