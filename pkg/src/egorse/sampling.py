"""Space-filling designs."""

import numpy as np
from scipy.stats import qmc


def latin_hypercube(n, lower, upper, rng):
    """Draw an ``n``-point Latin hypercube inside the box ``[lower, upper]``.

    ``rng`` must be a :class:`numpy.random.Generator`; the draw is fully
    determined by its state.
    """
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    if lower.shape != upper.shape:
        raise ValueError("lower and upper bounds differ in shape")
    if n < 1:
        raise ValueError(f"need at least one sample, got n={n}")
    sampler = qmc.LatinHypercube(d=lower.size, seed=rng)
    return lower + sampler.random(n) * (upper - lower)
