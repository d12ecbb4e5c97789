"""Dense matrix kernels backing the optimizers.

Everything here works on 2D float64 numpy arrays. The SVD is a one-sided
Jacobi implementation meant as a small-matrix oracle (inputs capped at
512x512); the optimizer hot path never calls it. `newton_schulz` is the
quintic iteration used by Muon-style optimizers to approximately
orthogonalize a momentum matrix without an SVD.
"""

import math
from dataclasses import dataclass

import numpy as np

# Quintic iteration coefficients from the reference Muon release. They are
# tuned for a steep slope at zero, so the iteration lands on singular values
# in roughly [0.5, 1.5] rather than exactly 1.
NS_COEFFS = (3.4445, -4.7750, 2.0315)
NS_DEFAULT_ITERS = 5

# Oracle-only SVD: sweep budget and the relative off-diagonal threshold
# (applied to squared column norms, i.e. |a_p . a_q| <= tol * ||m||_F^2).
SVD_MAX_SWEEPS = 60
SVD_OFF_TOL = 1e-14
SVD_SIZE_CAP = 512

# Singular directions below this fraction of sigma_max are dropped from the
# U V^T product; the nearest semi-orthogonal matrix is not unique there.
ORTHO_RANK_TOL = 1e-12


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(ValueError):
    """An input or intermediate contained NaN or Inf."""


class ZeroMatrixError(ValueError):
    """Orthogonalization of the all-zero matrix is undefined."""


class ConvergenceError(RuntimeError):
    """An iterative routine exhausted its iteration budget."""


def ensure_matrix(m, name: str = "matrix") -> np.ndarray:
    """Validate and return `m` as a 2D float64 array with finite entries."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2D, got shape {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeError(f"{name} must have positive dimensions, got {a.shape}")
    if not np.isfinite(a).all():
        raise NonFiniteError(f"{name} contains non-finite entries")
    return a


def matmul(a, b) -> np.ndarray:
    """Matrix product with an explicit shape check."""
    a = ensure_matrix(a, "left operand")
    b = ensure_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}: "
            f"inner dimensions {a.shape[1]} and {b.shape[0]} differ"
        )
    return a @ b


def frobenius_norm(m) -> float:
    """Square root of the sum of squared entries."""
    a = np.asarray(m, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))


@dataclass
class SvdResult:
    """Thin SVD m = u @ diag(sigma) @ vt with r = min(rows, cols).

    sigma is non-increasing and non-negative; u (rows x r) and vt (r x cols)
    have orthonormal columns / rows.
    """

    u: np.ndarray
    sigma: np.ndarray
    vt: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.vt


def _complete_column(u: np.ndarray, col: int) -> None:
    """Fill u[:, col] with a unit vector orthogonal to all other columns.

    Used for singular directions whose column norm vanished; tries canonical
    basis vectors in order so the completion is deterministic.
    """
    rows = u.shape[0]
    for k in range(rows):
        cand = np.zeros(rows)
        cand[k] = 1.0
        cand -= u @ (u.T @ cand)
        norm = np.linalg.norm(cand)
        if norm > 0.5:
            u[:, col] = cand / norm
            return
    raise ConvergenceError("could not complete an orthonormal basis column")


def svd(m, max_sweeps: int = SVD_MAX_SWEEPS) -> SvdResult:
    """One-sided Jacobi SVD for small dense matrices.

    Rotates column pairs until all pairwise dot products fall below
    SVD_OFF_TOL * ||m||_F^2, then reads singular values off the column
    norms. Raises ConvergenceError if `max_sweeps` sweeps do not suffice.
    """
    a = ensure_matrix(m)
    rows, cols = a.shape
    if rows > SVD_SIZE_CAP or cols > SVD_SIZE_CAP:
        raise ShapeError(
            f"svd oracle supports at most {SVD_SIZE_CAP}x{SVD_SIZE_CAP}, got {a.shape}"
        )
    if rows < cols:
        wide = svd(a.T, max_sweeps)
        return SvdResult(u=wide.vt.T, sigma=wide.sigma, vt=wide.u.T)

    work = a.copy()
    v = np.eye(cols)
    fro2 = float(np.sum(a * a))
    tol = SVD_OFF_TOL * fro2

    if fro2 > 0.0:
        converged = False
        for _ in range(max_sweeps):
            rotated = False
            for p in range(cols - 1):
                for q in range(p + 1, cols):
                    ap = work[:, p]
                    aq = work[:, q]
                    gamma = float(ap @ aq)
                    if abs(gamma) <= tol:
                        continue
                    rotated = True
                    alpha = float(ap @ ap)
                    beta = float(aq @ aq)
                    theta = 0.5 * math.atan2(2.0 * gamma, alpha - beta)
                    c = math.cos(theta)
                    s = math.sin(theta)
                    rot_p = c * ap + s * aq
                    rot_q = -s * ap + c * aq
                    work[:, p] = rot_p
                    work[:, q] = rot_q
                    vp = c * v[:, p] + s * v[:, q]
                    vq = -s * v[:, p] + c * v[:, q]
                    v[:, p] = vp
                    v[:, q] = vq
            if not rotated:
                converged = True
                break
        if not converged:
            raise ConvergenceError(
                f"Jacobi SVD did not converge within {max_sweeps} sweeps"
            )

    norms = np.linalg.norm(work, axis=0)
    order = np.argsort(-norms, kind="stable")
    sigma = norms[order]
    vt = v[:, order].T

    u = np.zeros((rows, cols))
    cutoff = 1e-13 * sigma[0] if sigma[0] > 0 else 0.0
    degenerate = []
    for idx, j in enumerate(order):
        if norms[j] > cutoff:
            u[:, idx] = work[:, j] / norms[j]
        else:
            degenerate.append(idx)
    for idx in degenerate:
        _complete_column(u, idx)

    return SvdResult(u=u, sigma=sigma, vt=vt)


def ortho_oracle(m) -> np.ndarray:
    """Nearest semi-orthogonal matrix in Frobenius norm, via the SVD.

    Singular directions with sigma <= ORTHO_RANK_TOL * sigma_max are dropped;
    their contribution to U V^T is taken as zero.
    """
    a = ensure_matrix(m)
    if not a.any():
        raise ZeroMatrixError("orthogonalization of the zero matrix is undefined")
    res = svd(a)
    keep = res.sigma > ORTHO_RANK_TOL * res.sigma[0]
    return res.u[:, keep] @ res.vt[keep, :]


def newton_schulz(m, iters: int = NS_DEFAULT_ITERS) -> np.ndarray:
    """Approximate orthogonalization by the quintic Newton-Schulz iteration.

    The input is scaled by its Frobenius norm so every singular value starts
    in (0, 1]; tall inputs are transposed so the Gram matrix stays at the
    smaller dimension. Output singular values land near 1 (typically within
    [0.5, 1.5] for well-conditioned inputs) rather than exactly 1.
    """
    a = ensure_matrix(m)
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    norm = frobenius_norm(a)
    if norm == 0.0:
        raise ZeroMatrixError("orthogonalization of the zero matrix is undefined")
    x = a / norm
    transposed = x.shape[0] > x.shape[1]
    if transposed:
        x = x.T
    ca, cb, cc = NS_COEFFS
    for _ in range(iters):
        g = x @ x.T
        x = ca * x + (cb * g + cc * (g @ g)) @ x
        if not np.isfinite(x).all():
            raise NonFiniteError("Newton-Schulz iterate became non-finite")
    return x.T if transposed else x


NS_CHECK_SHAPES = ((4, 4), (16, 8), (8, 16), (64, 64))
NS_CHECK_CONDITION = 10.0


def _orthonormal(rng, rows: int, cols: int) -> np.ndarray:
    """Random matrix with orthonormal columns (QR of a Gaussian draw)."""
    q, r = np.linalg.qr(rng.normal(size=(rows, cols)))
    return q * np.where(np.diag(r) < 0.0, -1.0, 1.0)


def _rand_cond_matrix(rng, rows: int, cols: int, cond: float) -> np.ndarray:
    """A random matrix with singular values log-spaced in [1/cond, 1]."""
    r = min(rows, cols)
    u = _orthonormal(rng, rows, r)
    v = _orthonormal(rng, cols, r)
    sigma = np.geomspace(1.0, 1.0 / cond, r)
    return (u * sigma) @ v.T


def ns_check_report(per_shape: int = 25, seed: int = 1234) -> dict:
    """Worst-case Newton-Schulz errors over a seeded matrix ensemble.

    Measures, against the SVD oracle: relative Frobenius error, the range
    of output singular values, scale invariance (input x 3), and sign
    equivariance (input negated). Keys ending in `_ok` give the verdicts
    at the documented tolerances.
    """
    rng = np.random.default_rng(seed)
    max_rel = 0.0
    sigma_lo, sigma_hi = np.inf, 0.0
    max_scale = 0.0
    max_sign = 0.0
    for rows, cols in NS_CHECK_SHAPES:
        for _ in range(per_shape):
            m = _rand_cond_matrix(rng, rows, cols, NS_CHECK_CONDITION)
            o = newton_schulz(m)
            ref = ortho_oracle(m)
            max_rel = max(max_rel,
                          frobenius_norm(o - ref) / frobenius_norm(ref))
            sigma = svd(o).sigma
            sigma_lo = min(sigma_lo, float(sigma.min()))
            sigma_hi = max(sigma_hi, float(sigma.max()))
            denom = frobenius_norm(o)
            max_scale = max(max_scale,
                            frobenius_norm(newton_schulz(3.0 * m) - o) / denom)
            max_sign = max(max_sign,
                           frobenius_norm(newton_schulz(-m) + o) / denom)
    return {
        "matrices": per_shape * len(NS_CHECK_SHAPES),
        "max_rel_fro_error": max_rel,
        "min_singular_value": sigma_lo,
        "max_singular_value": sigma_hi,
        "max_scale_invariance_error": max_scale,
        "max_sign_equivariance_error": max_sign,
        "rel_fro_error_ok": max_rel <= 0.35,
        "singular_range_ok": 0.5 <= sigma_lo and sigma_hi <= 1.5,
        "scale_invariance_ok": max_scale <= 1e-8,
        "sign_equivariance_ok": max_sign <= 1e-8,
    }
