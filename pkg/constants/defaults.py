"""
Default values shared by every stage of the mapping pipeline.

Anything that is a tunable threshold or a fixed on-disk name lives here so the
config layer, the CLI and the tests all read the same numbers.
"""

# Renderer
NEAR_PLANE = 0.05
COV2D_DILATION = 0.3
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
TRANSMITTANCE_MIN = 1e-4
TILE_SIZE = 16
DEPTH_EPS = 1e-8
BACKGROUND = (0.0, 0.0, 0.0)

# Spherical harmonics
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199

# Map initialisation
INIT_OPACITY = 0.1
INIT_KNN = 3

# Adam learning rates per parameter group
LR_MU_INIT = 1.6e-4
LR_MU_FINAL = 1.6e-6
LR_Q = 1e-3
LR_LOG_S = 5e-3
LR_ALPHA_LOGIT = 5e-2
LR_SH = 2.5e-3
LR_FEAT = 2.5e-3
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15

# Loss weights
LAMBDA_RGB = 1.0
LAMBDA_FEAT = 1.0
LAMBDA_DEPTH = 0.05
LAMBDA_SKY = 0.1
INV_DEPTH_EPS = 1e-6

# Densification
DENSIFY_GRAD_THRESHOLD = 2e-4
DENSIFY_SCALE_SPLIT = 0.1
DENSIFY_PRUNE_OPACITY = 0.005
DENSIFY_INTERVAL = 100
DENSIFY_OPACITY_RESET_INTERVAL = 3000
DENSIFY_FROM_STEP = 500
DENSIFY_UNTIL_STEP = 3000
DENSIFY_MAX_GAUSSIANS = 60000
RESET_OPACITY = 0.05
SPLIT_SCALE_DIVISOR = 1.6

# Stage lengths
DISTILL_STEPS = 4000
ENV_STEPS = 4000
LOG_EVERY = 50

# Feature residual mining
MINING_DELTA1 = 0.3
MINING_DELTA2 = 100.0
MINING_DELTA3 = 0.7
MINING_DELTA4 = 10.0
MINING_REFERENCE_AREA = 110.0 * 180.0

# Evaluation
CHAMFER_OPACITY_THRESHOLD = 0.5
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_INF_SENTINEL = float("inf")

# Synthetic world
SYNTH_IMAGE_HEIGHT = 128
SYNTH_IMAGE_WIDTH = 192
SYNTH_FEAT_HEIGHT = 64
SYNTH_FEAT_WIDTH = 96
SYNTH_FEAT_DIM = 8
SYNTH_TRAVERSALS = 10
SYNTH_FRAMES_PER_TRAVERSAL = 100
SYNTH_FEATURE_NOISE = 0.05
SYNTH_BRIGHTNESS_JITTER = 0.05
SYNTH_POSE_JITTER_T = 0.02
SYNTH_POSE_JITTER_R_DEG = 0.5
SKY_OPACITY_THRESHOLD = 0.05
GT_MASK_THRESHOLD = 0.5

# On-disk layout
FEATURE_MAGIC = b"F32F"
MANIFEST_NAME = "manifest.json"
SEED_POINTS_NAME = "seed_points.ply"
GT_DIR_NAME = "gt"
SURFACE_POINTS_NAME = "surface_points.ply"
INITIAL_MAP_NAME = "stage1_initial_map.ply"
DISTILLED_MAP_NAME = "stage2_distilled_map.ply"
FINAL_MAP_NAME = "stage3_environment_map.ply"
RESIDUAL_DIR_NAME = "residuals"
MASK_DIR_NAME = "masks"
RENDER_DIR_NAME = "renders"
REPORT_DIR_NAME = "reports"
PCA_MODEL_NAME = "pca_model.npz"
RESOLVED_CONFIG_NAME = "config.resolved"
LOG_FILE_NAME = "gaussian_mapping.log"
ENV_PREFIX = "GMAP_"
