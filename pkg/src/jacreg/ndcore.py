"""Dense array helpers, seeded randomness and the brute-force spectral oracle.

Arrays are plain :class:`numpy.ndarray`; random streams are
:class:`numpy.random.Generator` instances created through :func:`make_rng`.
"""

import numpy as np

from jacreg.errors import ConvergenceError

DTYPES = {"f32": np.float32, "f64": np.float64}


def resolve_dtype(precision):
    if isinstance(precision, str):
        try:
            return np.dtype(DTYPES[precision])
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}, expected f32 or f64") from None
    return np.dtype(precision)


def make_rng(seed, offset=0):
    """Independent PCG64 stream for ``seed``; ``offset`` derives sibling streams."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, int(offset)])


def check_finite(x, what="array"):
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{what} contains NaN or Inf")
    return x


def sample_unit_rows(rng, rows, dim, dtype=np.float64):
    """Draw ``rows`` i.i.d. points uniformly from the unit sphere in R^dim."""
    if dim < 1:
        raise ValueError(f"invalid dimension {dim}, need dim >= 1")
    if rows < 1:
        raise ValueError(f"invalid row count {rows}, need rows >= 1")
    v = rng.standard_normal((rows, dim))
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    # a Gaussian row of exact zeros has probability zero, but guard the division
    norms[norms == 0] = 1.0
    return (v / norms).astype(dtype, copy=False)


def max_singular_value_dense(m, tol=1e-10, max_iter=10_000, stall_window=50, seed=0):
    """Largest singular value of a dense matrix by power iteration on m^T m.

    Starts from the normalized all-ones vector. Iteration stops once the
    estimate changed by less than ``tol * sigma`` and the singular-pair
    residual ``||m v - sigma u||`` is below ``tol * sigma``. If the residual
    stops improving for ``stall_window`` iterations (near-degenerate top
    singular values), the search restarts once from a random vector; after
    that, a stable estimate is accepted even when the vectors keep rotating.

    Returns ``(sigma, u, v)`` with unit ``u`` (left) and ``v`` (right).
    Raises :class:`ConvergenceError` after ``max_iter`` iterations.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a rank-2 matrix, got shape {m.shape}")
    check_finite(m, "matrix")
    if tol <= 0:
        raise ValueError("tol must be positive")
    n_rows, n_cols = m.shape
    if not np.any(m):
        u = np.zeros(n_rows)
        v = np.zeros(n_cols)
        u[0] = v[0] = 1.0
        return 0.0, u, v
    # work on a unit-scale copy so tiny or huge entries neither underflow nor overflow
    scale = float(np.abs(m).max())
    m = m / scale

    rng = np.random.default_rng(seed)
    v = np.full(n_cols, 1.0 / np.sqrt(n_cols))
    restarted = False
    sigma = 0.0
    u = None
    best_res = np.inf
    since_best = 0
    stable = 0
    for _ in range(max_iter):
        mv = m @ v
        if u is not None:
            res = np.linalg.norm(mv - sigma * u)
            delta = abs(sigma - prev_sigma)
            if delta < tol * sigma:
                stable += 1
                if res <= tol * sigma:
                    return sigma * scale, u, v
            else:
                stable = 0
            if res < 0.5 * best_res:
                best_res, since_best = res, 0
            else:
                since_best += 1
            if since_best >= stall_window:
                if not restarted:
                    restarted = True
                    v = rng.standard_normal(n_cols)
                    v /= np.linalg.norm(v)
                    u, best_res, since_best, stable = None, np.inf, 0, 0
                    continue
                if stable >= stall_window:
                    # degenerate top singular values: value converged, vectors may rotate
                    return sigma * scale, u, v
        norm_mv = np.linalg.norm(mv)
        if norm_mv == 0.0:
            # start vector in the null space
            if restarted:
                raise ConvergenceError("power iteration collapsed to the null space", sigma * scale)
            restarted = True
            v = rng.standard_normal(n_cols)
            v /= np.linalg.norm(v)
            u = None
            continue
        u = mv / norm_mv
        w = m.T @ u
        prev_sigma = sigma
        # u^T m v_new == ||m^T u|| with v_new = m^T u / ||m^T u||
        sigma = float(np.linalg.norm(w))
        v = w / sigma
    raise ConvergenceError(f"no convergence within {max_iter} iterations", sigma * scale)
