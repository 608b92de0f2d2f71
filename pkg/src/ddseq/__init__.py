"""ddseq: discrete-diffusion sequence modeling at desk scale.

A numpy/scipy toolkit for absorbing and uniform discrete diffusion over
token sequences (amino-acid alphabet by default): forward corruption,
reweighted cross-entropy training of a bidirectional transformer denoiser,
iterative mask-predict sampling with infilling, discrete classifier
guidance, and classifier-free guidance, together with exact enumeration
oracles that verify the probabilistic kernels.
"""

from .process import NoisedSequence, TokenSequence, corrupt, forward_kernel, marginal, posterior_step
from .schedule import MixtureConstants, NoiseSchedule, Stationary, linear_schedule, mixture_constants
from .vocab import AMINO_ACIDS, Vocab, build_vocab

__all__ = [
    "AMINO_ACIDS",
    "MixtureConstants",
    "NoiseSchedule",
    "NoisedSequence",
    "Stationary",
    "TokenSequence",
    "Vocab",
    "build_vocab",
    "corrupt",
    "forward_kernel",
    "linear_schedule",
    "marginal",
    "mixture_constants",
    "posterior_step",
]

__version__ = "0.1.0"
