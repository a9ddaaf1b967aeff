# config.py

# =========================
# Output formats
# =========================
FORMAT_TAG = "# format: subjet/1"
CLOSURE_FORMAT_TAG = "# format: subjet-closure/1"
SIGNIFICANT_DIGITS = 17
FLOAT_FMT = "%.17g"

# =========================
# Exit codes
# =========================
EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_NOT_CONVERGED = 2
EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_INTERNAL = 5

EXIT_CODES = {
    EXIT_OK: "accepted subsonic solution / all checks passed",
    EXIT_CHECK_FAILED: "an invariant check failed",
    EXIT_NOT_CONVERGED: "solver did not converge or no accepted subsonic solution",
    EXIT_CONFIG: "configuration or bracket error",
    EXIT_IO: "output could not be written",
    EXIT_INTERNAL: "unexpected internal error",
}

CONFIG_ENV_VAR = "SUBJET_CONFIG"

# =========================
# Gas closure
# =========================
DEFAULT_GAMMA = 1.4
DEFAULT_EPSILON = 0.1
EPSILON_MAX = 0.25

TABLE_NODES = 2048  # uniform z-grid over [-Q, 2Q]; 0 and Q are always nodes
HEIGHT_PANELS = 512  # Gauss panels for the streamline map on [0, Hbar]
GAUSS_POINTS = 10
BAND_GAUSS_POINTS = 12  # quadrature across the truncation band

EXTENSION_BLEND_FRACTION = 0.1  # blend width relative to Hbar
DENSITY_RTOL = 1e-12
DENSITY_MAX_ITER = 100
SONIC_MARGIN = 1e-12
FLUX_RTOL = 1e-12
ENDPOINT_SLOPE_TOL = 1e-6
PROFILE_SAMPLES = 513

KAPPA_BAR = 1.0  # threshold for the P*||rho'|| diagnostic, never a hard gate

# =========================
# Presets
# =========================
PROFILE_PRESETS = ["uniform", "linear-velocity", "smooth-shear"]
NOZZLE_PRESETS = ["mirrored-exponential", "strip"]

DEFAULT_HBAR = 1.5
DEFAULT_NOZZLE_K = 1.0
DEFAULT_PBAR = 10.0
SHEAR_DENSITY_AMPLITUDE = 0.1
SHEAR_VELOCITY_AMPLITUDE = 1.0

# =========================
# Geometry
# =========================
DEFAULT_MESH_H = 0.1
DEFAULT_S_EXPONENT = 0.75
K_MU_FRACTION = 0.05
K_MU_MARGIN = 1e-6
MIN_MESH_ANGLE_DEG = 20.0
B_MU_TOL = 1e-8
THETA_OUTLET_TOL = 1e-6
H_TILDE_FLOOR = 1e-3
H_TILDE_START = 0.9
BVP_TOL = 1e-9
BVP_MAX_NODES = 20000

# =========================
# Solver
# =========================
QUADRATURE_ORDER = 2
LBFGS_HISTORY = 10
MAX_ITERATIONS = 3000
ARMIJO_C1 = 1e-4
BACKTRACK_FACTOR = 0.5
MAX_BACKTRACKS = 40
GRAD_TOL = 1e-7  # on the lumped nodal residual, relative to Q
ENERGY_RTOL = 1e-13  # energy differences below this are roundoff
TOL_Q_REL = 1e-8
DELTA_CHI_CELLS = 2.0  # default smoothing width = DELTA_CHI_CELLS * h * Lambda
EL_THRESHOLD = 1e-2
FB_SAMPLE_FRACTION = 0.25  # scan spacing relative to h
FB_OFFSET_FRACTION = 0.75  # fluid-side offset for one-sided gradients
DOWNSTREAM_WINDOW = 0.2
MAX_PRINCIPLE_SLACK = 1e-6  # relative to Q, on top of tol_Q
OUTLET_ROW_CELLS = (2.0, 3.0)  # depths below x2 = 1 of the two gap lines, in cells

# =========================
# Jet fitting
# =========================
FIT_GAP_CELLS = 2.0
FIT_WIDTH_REL = 1e-3
FIT_MAX_PROBES = 30
FIT_MAX_EXPANSIONS = 8
FIT_BRACKET = (0.3, 0.95)  # fractions of sqrt(tc(Q))
CONTINUATION_PSI_TOL = 1e-4
CONTINUATION_LAMBDA_TOL = 1e-3
DEFAULT_SCHEDULE = [(5.0, 5.0), (8.0, 6.0), (12.0, 8.0)]
UPSTREAM_PROBE_OFFSET = 2.0
CRITICAL_WIDTH_REL = 0.05  # bracket width relative to P_*
DOWNSTREAM_SAMPLES = 201

# =========================
# Check battery
# =========================
CHECK_GRID = 50
CHECK_TRUNCATION_SAMPLES = 10_000
CHECK_RANDOM_FIELDS = 10
CHECK_FD_STEP = 1e-6
DEFAULT_SEED = 7
