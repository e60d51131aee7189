import os


def _setting(name, default, cast=float):
    """Read TND_<name> from the environment, falling back to `default`."""
    value = os.environ.get(f"TND_{name}")
    return default if value is None else cast(value)


# Batch normalization; the running statistics use an exponential moving average.
BN_MOMENTUM = _setting("BN_MOMENTUM", 0.1)
BN_EPS = _setting("BN_EPS", 1e-5)

CHECKPOINT_VERSION = _setting("CHECKPOINT_VERSION", 1, int)

GRADCHECK_STEP = _setting("GRADCHECK_STEP", 1e-5)
GRADCHECK_TOL = _setting("GRADCHECK_TOL", 1e-4)

# Prior probability used to initialize the objectness bias of every head.
OBJECTNESS_PRIOR = _setting("OBJECTNESS_PRIOR", 0.01)

# Highest-confidence candidates considered by NMS, and detections kept per image.
NMS_MAX_CANDIDATES = _setting("NMS_MAX_CANDIDATES", 3000, int)
MAX_DETECTIONS = _setting("MAX_DETECTIONS", 300, int)
