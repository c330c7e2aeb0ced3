"""
Configuration settings for the 4D scene engine.
"""
import os
from dotenv import load_dotenv

load_dotenv()

# Logging Configuration
LOG_DIR = os.getenv("LOG_DIR", "")  # Empty = console (stderr) only, no log file
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")

# CPU Parallelism Configuration
THREAD_COUNT = int(os.getenv("THREAD_COUNT", "0"))  # 0 = use all available CPU threads
PARALLEL_PROCESSING = os.getenv("PARALLEL_PROCESSING", "true").lower() == "true"

# Reconstruction Configuration
LIFT_STRIDE = int(os.getenv("LIFT_STRIDE", "1"))  # Keep every n-th pixel in both directions
KEEP_RATIO = float(os.getenv("KEEP_RATIO", "1.0"))  # Random fraction of lifted points kept per frame
VOXEL_SIZE = float(os.getenv("VOXEL_SIZE", "0.1"))  # Meters, used before alignment

# Alignment Configuration
ALIGN_MAX_ITERATIONS = int(os.getenv("ALIGN_MAX_ITERATIONS", "50"))
ALIGN_REL_TOLERANCE = float(os.getenv("ALIGN_REL_TOLERANCE", "1e-6"))
ALIGN_ABS_TOLERANCE = 1e-12  # m^2, error below this counts as exact
ALIGN_MAX_CORRESPONDENCE_DISTANCE = float(os.getenv("ALIGN_MAX_CORRESPONDENCE_DISTANCE", "1.0"))  # Meters
ALIGN_MIN_CORRESPONDENCES = int(os.getenv("ALIGN_MIN_CORRESPONDENCES", "100"))
ALIGN_EXCLUDE_DYNAMIC = os.getenv("ALIGN_EXCLUDE_DYNAMIC", "true").lower() == "true"
ALIGN_METRIC = os.getenv("ALIGN_METRIC", "point_to_plane")  # or point_to_point
ALIGN_NORMAL_NEIGHBORS = 10  # Points per PCA neighborhood (normals and match candidates)
ALIGN_MAX_CURVATURE = 0.02  # Smallest eigenvalue share; above it a neighborhood is not planar
ALIGN_NORMAL_MAX_ANGLE_DEG = 30.0  # Largest angle between matched normals
ALIGN_BACKTRACK_STEPS = 4  # Step halvings tried before declaring no descent
ALIGN_STEP_TOLERANCE = 1e-8  # rad / m, a smaller step counts as stationary

# Rendering Configuration
ZNEAR = float(os.getenv("ZNEAR", "0.05"))  # Meters
SPLAT_RADIUS = int(os.getenv("SPLAT_RADIUS", "0"))  # 0 = one pixel per point
MAX_SPLAT_RADIUS = 3
CLIP_LENGTH = int(os.getenv("CLIP_LENGTH", "8"))  # Frames per training clip (4 conditions + 4 targets)

# Evaluation Configuration
PSNR_CAP_DB = 99.0
SSIM_SIGMA = 1.5
SSIM_MIN_SIDE = 11

# On-disk Formats
DEPTH_SCALE = 1000.0  # 16-bit PNG units per meter (millimeters)
MAX_DEPTH_MM = 65535  # Largest storable depth (65.535 m)
CLOUD_MAGIC = b"STG4"
CLOUD_VERSION = 1
CLOUD_FILENAME = "cloud.stg4"
SCENE_FILENAME = "scene.json"
MANIFEST_FILENAME = "manifest.json"
ALIGNMENT_FILENAME = "alignment.json"
