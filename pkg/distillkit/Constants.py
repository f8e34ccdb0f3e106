FEATURE_MAGIC = b"FTR1"
EMBEDDING_MAGIC = b"EMB1"
CHECKPOINT_MAGIC = b"NET1"
N_MELS = 80
EMBEDDING_DIM = 256
DEFAULT_FRAME_SHIFT_S = 0.01
NORM_EPSILON = 1e-12
STD_FLOOR = 1e-8
BYTES_PER_MB = 1024 * 1024
