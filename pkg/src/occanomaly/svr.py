"""Epsilon-insensitive RBF support vector regression for pseudo-to-metric depth.

The dual is solved in the stacked form used by LIBSVM: ``beta = [a; a*]`` with
signs ``z = [+1; -1]``, minimizing ``0.5 beta' Q beta + p' beta`` subject to
``z' beta = 0`` and ``0 <= beta <= C``, where ``Q = (z z') * K`` and
``p = [eps - y; eps + y]``. Working pairs are picked with second-order
information (Fan, Chen and Lin, 2005).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

_TAU = 1e-12


class DegenerateInputError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (final KKT gap {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class SvrHyper:
    c_reg: float = 100.0
    epsilon: float = 0.1
    gamma: float | None = None  # None: 1 / (2 * var(pseudo))
    tol: float = 1e-5
    max_iter: int = 200_000


@dataclass(eq=False)
class SvrModel:
    support_inputs: np.ndarray
    dual_coeffs: np.ndarray
    bias: float
    gamma: float
    epsilon: float
    c_reg: float
    n_iter: int = 0
    kkt_gap: float = 0.0
    objective_trace: list = field(default_factory=list, repr=False)

    def predict(self, x, chunk: int = 65536) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        flat = x.ravel()
        out = np.empty_like(flat)
        sv, coef = self.support_inputs, self.dual_coeffs
        for start in range(0, flat.size, chunk):
            block = flat[start:start + chunk]
            if sv.size:
                k = np.exp(-self.gamma * (block[:, None] - sv[None, :]) ** 2)
                out[start:start + chunk] = k @ coef + self.bias
            else:
                out[start:start + chunk] = self.bias
        return out.reshape(x.shape)


def rbf_kernel(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    return np.exp(-gamma * (a[:, None] - b[None, :]) ** 2)


def _objective(beta, grad, p):
    # f = 0.5 b'Qb + p'b = 0.5 b'(G + p)
    return 0.5 * float(beta @ (grad + p))


def fit_svr(pseudo, metric, hyper: SvrHyper = SvrHyper(), track_objective: bool = False) -> SvrModel:
    """Fit ``metric ~ g(pseudo)``.

    Raises DegenerateInputError for fewer than two distinct inputs and
    ConvergenceError when the iteration cap is hit.
    """
    x = np.asarray(pseudo, dtype=np.float64).ravel()
    y = np.asarray(metric, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValueError("pseudo and metric arrays differ in length")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("training pairs must be finite")
    if x.size < 2 or np.unique(x).size < 2:
        raise DegenerateInputError("need at least two distinct pseudo-depth values")
    if hyper.c_reg <= 0 or hyper.epsilon <= 0 or (hyper.gamma is not None and hyper.gamma <= 0):
        raise ValueError("SVR hyperparameters must be positive")

    gamma = hyper.gamma if hyper.gamma is not None else 1.0 / (2.0 * float(np.var(x)))
    C = float(hyper.c_reg)
    n = x.size
    Kmat = rbf_kernel(x, x, gamma)
    z = np.concatenate([np.ones(n), -np.ones(n)])
    p = np.concatenate([hyper.epsilon - y, hyper.epsilon + y])
    diag = np.ones(2 * n)  # RBF: K(x, x) = 1
    beta = np.zeros(2 * n)
    grad = p.copy()
    trace = [0.0] if track_objective else []

    def q_col(t):
        # column t of Q over all 2n variables
        kc = Kmat[:, t % n]
        return z[t] * z * np.concatenate([kc, kc])

    it = 0
    gap = np.inf
    while True:
        up = ((z > 0) & (beta < C)) | ((z < 0) & (beta > 0))
        low = ((z > 0) & (beta > 0)) | ((z < 0) & (beta < C))
        minus_zg = -z * grad
        cand_up = np.where(up, minus_zg, -np.inf)
        i = int(np.argmax(cand_up))
        g_max = cand_up[i]
        g_min = np.min(np.where(low, minus_zg, np.inf))
        gap = g_max - g_min
        if gap < hyper.tol:
            break
        if it >= hyper.max_iter:
            raise ConvergenceError(f"SVR did not converge in {hyper.max_iter} iterations", gap)

        Qi = q_col(i)
        b_it = g_max - minus_zg
        a_it = diag[i] + diag - 2.0 * z[i] * z * Qi
        a_it = np.where(a_it > 0, a_it, _TAU)
        score = np.where(low & (b_it > 0), -(b_it ** 2) / a_it, np.inf)
        j = int(np.argmin(score))
        Qj = q_col(j)

        old_i, old_j = beta[i], beta[j]
        if z[i] != z[j]:
            quad = max(diag[i] + diag[j] + 2.0 * Qi[j], _TAU)
            delta = (-grad[i] - grad[j]) / quad
            diff = old_i - old_j
            bi, bj = old_i + delta, old_j + delta
            if diff > 0:
                if bj < 0:
                    bj, bi = 0.0, diff
            elif bi < 0:
                bi, bj = 0.0, -diff
            if diff > 0:
                if bi > C:
                    bi, bj = C, C - diff
            elif bj > C:
                bj, bi = C, C + diff
        else:
            quad = max(diag[i] + diag[j] - 2.0 * Qi[j], _TAU)
            delta = (grad[i] - grad[j]) / quad
            total = old_i + old_j
            bi, bj = old_i - delta, old_j + delta
            if total > C:
                if bi > C:
                    bi, bj = C, total - C
            elif bj < 0:
                bj, bi = 0.0, total
            if total > C:
                if bj > C:
                    bj, bi = C, total - C
            elif bi < 0:
                bi, bj = 0.0, total
        beta[i], beta[j] = bi, bj
        grad += Qi * (bi - old_i) + Qj * (bj - old_j)
        it += 1
        if track_objective:
            trace.append(_objective(beta, grad, p))

    # bias from free variables, midpoint of the feasible interval otherwise
    zg = z * grad
    free = (beta > 0) & (beta < C)
    if np.any(free):
        rho = float(np.mean(zg[free]))
    else:
        upper = zg[((z < 0) & (beta >= C)) | ((z > 0) & (beta <= 0))]
        lower = zg[((z > 0) & (beta >= C)) | ((z < 0) & (beta <= 0))]
        rho = 0.5 * (float(np.min(upper, initial=np.inf)) + float(np.max(lower, initial=-np.inf)))
        if not np.isfinite(rho):
            rho = float(np.mean(zg))
    coef = beta[:n] - beta[n:]
    keep = coef != 0
    logger.debug("SVR converged in %d iterations, %d support vectors", it, int(keep.sum()))
    return SvrModel(
        support_inputs=x[keep].copy(),
        dual_coeffs=coef[keep].copy(),
        bias=-rho,
        gamma=gamma,
        epsilon=float(hyper.epsilon),
        c_reg=C,
        n_iter=it,
        kkt_gap=float(gap),
        objective_trace=trace,
    )
