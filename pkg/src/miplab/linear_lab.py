"""Population-level linear surrogate of two-pass inference.

Model: o ~ (0, Sigma_o), a = Theta o + eta with eta ~ N(0, eta^2 I),
z ~ N(0, Sigma_z) independent, w = c1 a + c2 z.  Linear predictors
a_hat = B o + C w are fitted by ridge regression with the penalty on B
(:func:`ridge_B`) or on C (:func:`ridge_C`).  The two fits compose into
Phi = B2 + c1 C2 B1 (:func:`compose_two_pass`), whose diagonal in the
isotropic case gives per-direction shrinkage factors.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import ndmath as nd


@dataclass(frozen=True)
class LinearSurrogateSpec:
    theta: np.ndarray
    sigma_o: np.ndarray
    sigma_z: np.ndarray
    eta: float = 0.0
    c1: float = 0.9
    c2: float = 0.1
    lambda1: float = 0.0
    lambda2: float = 0.0

    def __post_init__(self):
        d = self.theta.shape[0]
        for name in ("theta", "sigma_o", "sigma_z"):
            M = getattr(self, name)
            if M.shape != (d, d):
                raise ValueError(f"{name} must be {d}x{d}, got {M.shape}")
        for name in ("sigma_o", "sigma_z"):
            M = getattr(self, name)
            if not np.allclose(M, M.T) or np.linalg.eigvalsh(M).min() <= 0:
                raise ValueError(f"{name} must be symmetric positive definite")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("ridge strengths must be >= 0")
        if self.eta < 0:
            raise ValueError("eta is a standard deviation and must be >= 0")

    @property
    def d(self):
        return self.theta.shape[0]


def isotropic_spec(s, eta=0.0, c1=0.9, c2=0.1, lambda1=0.0, lambda2=0.0):
    """Theta = diag(s), Sigma_o = Sigma_z = I."""
    s = np.asarray(s, dtype=np.float64)
    eye = np.eye(len(s))
    return LinearSurrogateSpec(np.diag(s), eye, eye.copy(), eta, c1, c2, lambda1, lambda2)


def random_spec(rng, d=6, isotropic=False):
    """A well-conditioned random spec (used by tests and sweeps)."""
    eta = rng.uniform(0.1, 1.0)
    c1 = rng.uniform(0.5, 1.0)
    c2 = rng.uniform(0.3, 1.0)
    lam1 = rng.uniform(0.01, 1.0)
    lam2 = rng.uniform(0.01, 1.0)
    if isotropic:
        return isotropic_spec(np.sort(rng.uniform(0.1, 3.0, d)), eta, c1, c2, lam1, lam2)

    def spd():
        Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        return Q @ np.diag(rng.uniform(0.5, 2.0, d)) @ Q.T

    U, _ = np.linalg.qr(rng.standard_normal((d, d)))
    V, _ = np.linalg.qr(rng.standard_normal((d, d)))
    theta = U @ np.diag(rng.uniform(0.3, 2.0, d)) @ V.T
    so, sz = spd(), spd()
    return LinearSurrogateSpec(theta, (so + so.T) / 2, (sz + sz.T) / 2, eta, c1, c2, lam1, lam2)


@dataclass
class Moments:
    S11: np.ndarray
    S12: np.ndarray
    S21: np.ndarray
    S22: np.ndarray
    Sa1: np.ndarray
    Sa2: np.ndarray


def moments(spec):
    """Exact second-moment blocks of (o, w) and their cross moments with a."""
    T, So = spec.theta, spec.sigma_o
    signal = T @ So @ T.T + spec.eta**2 * np.eye(spec.d)
    S12 = spec.c1 * So @ T.T
    return Moments(
        S11=So.copy(),
        S12=S12,
        S21=S12.T.copy(),
        S22=spec.c1**2 * signal + spec.c2**2 * spec.sigma_z,
        Sa1=T @ So,
        Sa2=spec.c1 * signal,
    )


def sample_moments(spec, n, rng):
    """Monte-Carlo estimates of the same blocks from n joint draws."""
    d = spec.d
    Lo = np.linalg.cholesky(spec.sigma_o)
    Lz = np.linalg.cholesky(spec.sigma_z)
    o = rng.standard_normal((n, d)) @ Lo.T
    a = o @ spec.theta.T + spec.eta * rng.standard_normal((n, d))
    z = rng.standard_normal((n, d)) @ Lz.T
    w = spec.c1 * a + spec.c2 * z
    m = lambda x, y: x.T @ y / n  # noqa: E731
    return Moments(m(o, o), m(o, w), m(w, o), m(w, w), m(a, o), m(a, w))


@dataclass
class RidgeSolution:
    B: np.ndarray
    C: np.ndarray
    shrinkage: np.ndarray = None  # B_ii / s_i when Theta is diagonal

    def residuals(self, spec, penalty):
        """Frobenius residuals of both normal equations."""
        M = moments(spec)
        lam1 = spec.lambda1 if penalty == "B" else 0.0
        lam2 = spec.lambda2 if penalty == "C" else 0.0
        eye = np.eye(spec.d)
        r1 = self.B @ (M.S11 + lam1 * eye) + self.C @ M.S21 - M.Sa1
        r2 = self.B @ M.S12 + self.C @ (M.S22 + lam2 * eye) - M.Sa2
        return float(np.linalg.norm(r1)), float(np.linalg.norm(r2))


def _diag_shrinkage(spec, B):
    T = spec.theta
    if np.count_nonzero(T - np.diag(np.diag(T))):
        return None
    return np.diag(B) / np.diag(T)


def _right_solve(X, A):
    """X A^{-1} through the transposed system A^T Y^T = X^T."""
    return nd.solve(A.T, X.T).T


def ridge_B(spec):
    """Penalty lambda1 on B, by block elimination through Sigma21^{-1}.

    B = (Sa1 S21^{-1} S22 - Sa2) [(S11 + lam I) S21^{-1} S22 - S12]^{-1}
    C = (Sa1 - B (S11 + lam I)) S21^{-1}

    Raises :class:`~miplab.ndmath.IllConditionedError` when Sigma21 is
    singular (e.g. c1 = 0 or rank-deficient Theta).
    """
    M = moments(spec)
    lam = spec.lambda1
    S11l = M.S11 + lam * np.eye(spec.d)
    S21inv_S22 = nd.solve(M.S21, M.S22)
    term_i = M.Sa1 @ S21inv_S22 - M.Sa2
    term_ii = S11l @ S21inv_S22 - M.S12
    B = _right_solve(term_i, term_ii)
    C = _right_solve(M.Sa1 - B @ S11l, M.S21)
    return RidgeSolution(B, C, _diag_shrinkage(spec, B))


def ridge_C(spec):
    """Penalty lambda2 on C, by block elimination through Sigma11^{-1}.

    C = (Sa2 - Sa1 S11^{-1} S12) (S22 + lam I - S21 S11^{-1} S12)^{-1}
    B = (Sa1 - C S21) S11^{-1}
    """
    M = moments(spec)
    lam = spec.lambda2
    S11inv_S12 = nd.solve(M.S11, M.S12)
    term_i = M.Sa2 - M.Sa1 @ S11inv_S12
    term_ii = M.S22 + lam * np.eye(spec.d) - M.S21 @ S11inv_S12
    C = _right_solve(term_i, term_ii)
    B = _right_solve(M.Sa1 - C @ M.S21, M.S11)
    return RidgeSolution(B, C, _diag_shrinkage(spec, B))


def ridge_B_isotropic(s, eta, c1, c2, lam):
    """Diagonal closed form for Theta = diag(s), Sigma_o = Sigma_z = I."""
    s = np.asarray(s, dtype=np.float64)
    den = lam * c1**2 * s**2 + (1 + lam) * (c1**2 * eta**2 + c2**2)
    B = c2**2 * s / den
    C = (1.0 - (1 + lam) * c2**2 / den) / c1
    return RidgeSolution(np.diag(B), np.diag(C), c2**2 / den)


def ridge_C_isotropic(s, eta, c1, c2, lam):
    s = np.asarray(s, dtype=np.float64)
    den = c1**2 * eta**2 + c2**2 + lam
    B = (c2**2 + lam) * s / den
    C = np.full_like(s, c1 * eta**2 / den)
    return RidgeSolution(np.diag(B), np.diag(C), (c2**2 + lam) / den * np.ones_like(s))


@dataclass
class TwoPass:
    phi: np.ndarray
    shrinkage: np.ndarray  # Phi_ii / s_i, or None for non-diagonal Theta


def compose_two_pass(sol1, sol2, c1, theta=None):
    """a0 = B1 o; a = B2 o + c1 C2 a0, so Phi = B2 + c1 C2 B1."""
    if sol1.B.shape != sol2.B.shape or sol2.C.shape[1] != sol1.B.shape[0]:
        raise ValueError("solution dimensions disagree")
    phi = sol2.B + c1 * sol2.C @ sol1.B
    shrink = None
    if theta is not None and not np.count_nonzero(theta - np.diag(np.diag(theta))):
        shrink = np.diag(phi) / np.diag(theta)
    return TwoPass(phi, shrink)


def two_pass_isotropic_shrinkage(s, eta, c1, c2, lam1, lam2):
    """Phi_ii / s_i in closed form."""
    s = np.asarray(s, dtype=np.float64)
    inner = c1**2 * eta**2 * c2**2 / (lam1 * c1**2 * s**2 + (1 + lam1) * (c1**2 * eta**2 + c2**2))
    return (c2**2 + lam2 + inner) / (c1**2 * eta**2 + c2**2 + lam2)


def objective(spec, B, C, penalty):
    """Population loss E||B o + C w - a||^2 + lambda ||penalized block||_F^2."""
    M = moments(spec)
    d = spec.d
    saa = spec.theta @ spec.sigma_o @ spec.theta.T + spec.eta**2 * np.eye(d)
    psi = np.hstack([B, C])
    SX = np.block([[M.S11, M.S12], [M.S21, M.S22]])
    SaX = np.hstack([M.Sa1, M.Sa2])
    val = np.trace(saa) - 2 * np.trace(psi @ SaX.T) + np.trace(psi @ SX @ psi.T)
    lam = spec.lambda1 if penalty == "B" else spec.lambda2
    block = B if penalty == "B" else C
    return float(val + lam * np.sum(block**2))


class OracleDidNotConverge(RuntimeError):
    pass


def gd_oracle(spec, penalty, tol=1e-10, max_iter=1_000_000):
    """Minimize the population ridge objective by full-gradient descent.

    Nesterov-accelerated gradient descent with step 1/L on the exact
    moments; stops when the Frobenius gradient norm is <= ``tol``.  Uses no
    linear solves, so it is independent of the closed forms.
    """
    if penalty not in ("B", "C"):
        raise ValueError("penalty must be 'B' or 'C'")
    M = moments(spec)
    d = spec.d
    SX = np.block([[M.S11, M.S12], [M.S21, M.S22]])
    reg = np.zeros(2 * d)
    if penalty == "B":
        reg[:d] = spec.lambda1
    else:
        reg[d:] = spec.lambda2
    H = SX + np.diag(reg)
    SaX = np.hstack([M.Sa1, M.Sa2])
    ev = np.linalg.eigvalsh(H)
    L, mu = 2 * ev[-1], 2 * max(ev[0], 0.0)
    q = mu / L
    momentum = (1 - np.sqrt(q)) / (1 + np.sqrt(q)) if q > 0 else None
    psi = np.zeros((d, 2 * d))
    y = psi.copy()
    for it in range(1, max_iter + 1):
        g = 2 * (y @ H - SaX)
        new = y - g / L
        beta = momentum if momentum is not None else (it - 1) / (it + 2)
        y = new + beta * (new - psi)
        psi = new
        if it % 50 == 0:
            gn = np.linalg.norm(2 * (psi @ H - SaX))
            if gn <= tol:
                return psi[:, :d].copy(), psi[:, d:].copy()
            if not np.isfinite(gn):
                break
    raise OracleDidNotConverge(f"gradient norm still above {tol} after {max_iter} iterations")


def shrinkage_sweep(s_grid, eta, c1, c2, lam1, lam2):
    """Rows of (s_i, rho_i, Phi_ii/s_i, B_ii, exact flag) for the isotropic case."""
    spec = isotropic_spec(s_grid, eta, c1, c2, lam1, lam2)
    sol_b = ridge_B_isotropic(s_grid, eta, c1, c2, lam1)
    sol_c = ridge_C_isotropic(s_grid, eta, c1, c2, lam2)
    tp = compose_two_pass(sol_b, sol_c, c1, spec.theta)
    rows = []
    for i, s in enumerate(np.asarray(s_grid, dtype=np.float64)):
        b = float(sol_b.B[i, i])
        rows.append({
            "s": float(s),
            "rho": float(sol_b.shrinkage[i]),
            "phi_shrink": float(tp.shrinkage[i]),
            "B_ii": b,
            "B_equals_theta": int(abs(b - s) <= 1e-12 * max(1.0, abs(s))),
        })
    return rows


def with_lambda(spec, lambda1=None, lambda2=None):
    return replace(
        spec,
        lambda1=spec.lambda1 if lambda1 is None else lambda1,
        lambda2=spec.lambda2 if lambda2 is None else lambda2,
    )
