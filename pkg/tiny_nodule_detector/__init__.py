from enum import Enum

__version__ = "0.1.0"


class Profile(str, Enum):
    """Named model scales"""

    DESK = "desk"  # laptop-CPU scale used for training and acceptance runs
    PAPER_640 = "paper-640"  # full-size widths, used for symbolic shape traces


class LayerKind(str, Enum):
    """Layer kinds understood by the static architecture analyzer"""

    CONV = "conv"
    POOL = "pool"
    UPSAMPLE = "upsample"


class Activation(str, Enum):
    SILU = "silu"
    LEAKY_RELU = "leaky_relu"
    IDENTITY = "identity"


class AttentionFusion(str, Enum):
    """How position and channel attention outputs are combined"""

    SUM = "sum"
    SEQUENTIAL = "sequential"  # channel attention applied to the position attention output


class Variant(str, Enum):
    """Module ablation variants of the detector"""

    FULL = "full"
    NO_TODB = "no-todb"
    NO_ERD = "no-erd"
    NO_PCAM = "no-pcam"
    BASELINE = "baseline"  # none of the three modules
