"""Non-intrusive reduced-order modeling toolkit.

Compress time-dependent snapshot data into a low-dimensional latent space
(orthogonal basis or autoencoder), learn the latent dynamics (neural ODE,
kernel interpolation, or mode decomposition), and reconstruct and score
full-field forecasts at arbitrary temporal resolution.
"""

from .errors import NiromError
from .snapstore import FieldLayout, ScalingParams, SnapshotSet
from .pod import FieldBasisSet, LatentTrajectory, PODBasis, TruncationRule
from .synthgen import GeneratedData, GeneratorSpec

__version__ = "0.1.0"

__all__ = [
    "FieldBasisSet",
    "FieldLayout",
    "GeneratedData",
    "GeneratorSpec",
    "LatentTrajectory",
    "NiromError",
    "PODBasis",
    "ScalingParams",
    "SnapshotSet",
    "TruncationRule",
    "__version__",
]
