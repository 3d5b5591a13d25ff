"""Dense kernels: Cholesky with jitter escalation, shrinkage, softmax, normal draws.

Vectors and matrices are plain float64 numpy arrays. Normal variates come from
``numpy.random.Generator`` (PCG64 bit generator, Ziggurat normal sampler), so a
fixed seed reproduces every draw bit-for-bit.
"""

import numpy as np

from .errors import DomainError, FactorizationFailure, ShapeError

JITTER_START = 1e-10
JITTER_GROWTH = 10.0
JITTER_STEPS = 6


def _as_square(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {a.shape}")
    return a


def _factor(a):
    """LAPACK Cholesky of the lower triangle; None when ``a`` is not positive definite."""
    if not np.all(np.isfinite(a)):
        return None
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        return None


def cholesky_jittered(a):
    """Factor ``a`` and report the jitter that was needed (0.0 when none).

    The plain factorization is tried first. On a non-positive pivot,
    ``jitter * I`` is added, starting at 1e-10 and growing tenfold, for at most
    six escalations.
    """
    a = _as_square(a)
    low = _factor(a)
    if low is not None:
        return low, 0.0
    eye = np.eye(a.shape[0])
    jitter = JITTER_START
    for _ in range(JITTER_STEPS):
        low = _factor(a + jitter * eye)
        if low is not None:
            return low, jitter
        jitter *= JITTER_GROWTH
    raise FactorizationFailure(
        f"matrix is not positive definite even with jitter {jitter / JITTER_GROWTH:g}"
    )


def cholesky(a):
    """Lower-triangular ``L`` with ``L @ L.T == a`` (plus jitter if required)."""
    return cholesky_jittered(a)[0]


def shrink(s, alpha):
    """Blend a covariance toward the identity: ``(1 - alpha) * s + alpha * I``."""
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"shrinkage alpha must lie in [0, 1], got {alpha}")
    s = _as_square(s)
    return (1.0 - alpha) * s + alpha * np.eye(s.shape[0])


def symmetrize(a):
    return 0.5 * (a + a.T)


def stable_softmax(logits, axis=-1):
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0:
        raise ShapeError("softmax of an empty vector")
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def make_rng(seed):
    return np.random.default_rng(seed)


def sample_standard_normal(d, rng):
    if d < 1:
        raise DomainError(f"dimension must be >= 1, got {d}")
    return rng.standard_normal(d)
