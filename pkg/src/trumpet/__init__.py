"""Injective flow generative models with exact left inverses.

Layers, two-phase training, stochastic log-det estimation, projected-gradient
MAP solvers and latent-space posterior sampling, all checkable against
brute-force oracles at small scale.
"""

from trumpet._threads import apply_thread_cap

apply_thread_cap()

import jax  # noqa: E402

# Oracles run in float64 next to float32 model parameters.
jax.config.update("jax_enable_x64", True)

from trumpet.substrate import (  # noqa: E402
    as_tensor,
    exact_jacobian,
    fft2,
    finite_difference_jacobian,
    ifft2,
    rng_key,
    svd_small,
)
from trumpet.model import (  # noqa: E402
    TrumpetModel,
    TrumpetSpec,
    build,
    generate,
    left_inverse,
    nll_bound,
    nll_exact,
    project,
)

__version__ = "0.1.0"

__all__ = [
    "TrumpetModel",
    "TrumpetSpec",
    "as_tensor",
    "build",
    "exact_jacobian",
    "fft2",
    "finite_difference_jacobian",
    "generate",
    "ifft2",
    "left_inverse",
    "nll_bound",
    "nll_exact",
    "project",
    "rng_key",
    "svd_small",
]
