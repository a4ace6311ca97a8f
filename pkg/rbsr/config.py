VERSION = "rbsr 0.1.0"

# resample
BICUBIC_A = -0.5
SCALE = 4

# kernel estimation
KERNEL_SIZE = 13
KERNEL_LAMBDA = 1e-4
KERNEL_PATCH_HR = 192
KERNEL_GRID = (4, 4)
DIRECT_SOLVE_MAX_KSIZE = 21
SOLVER_TOL = 1e-10
SOLVER_MAX_ITER = 2000
RENDER_MAGNIFY = 8
RENDER_SEPARATOR = 2

# nn
CHECKPOINT_MAGIC = b"RBSRW1"
GRADCHECK_EPSILON = 1e-4
GRADCHECK_SAMPLES = 200

# losses
PROB_CLAMP = 1e-7
LOSS_WEIGHTS = (1.0, 3.0, 1.0)

# metrics
PSNR_INF = float("inf")
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5

# trainer
LOG_HEADER = ["epoch", "lr", "l1", "perc", "adv_g", "adv_d", "total", "seconds"]
LOOKALIKE_LR = 1e-4
LOOKALIKE_DECAY_EVERY = 800
SR_LR = 1e-3
SR_DECAY_EVERY = 1000
DECAY_FACTOR = 0.1
BATCH = 16
CROP = 128

# architecture sizes
LOOKALIKE_BLOCKS = 8
SR_BLOCKS = 16
E2E_BLOCKS = 24
CHANNELS = 64
