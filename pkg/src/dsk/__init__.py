"""Unpaired statistical downscaling on the 1D Kuramoto-Sivashinsky system.

Pipeline: generate high/low fidelity snapshot datasets, fit an entropic
transport map that debiases the low-fidelity distribution, train a diffusion
denoiser on the high-fidelity data, then draw constraint-conditioned
reverse-SDE samples and evaluate distributional metrics against the
high-fidelity reference.
"""

__version__ = "0.1.0"


class NumericalError(RuntimeError):
    """Raised when a solver or sampler produces non-finite state."""
