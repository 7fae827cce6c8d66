"""Parametric level-set shapes and the alternating concentration/shape inversion."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .born import MeasurementSetup, apply_operator
from .grid import Grid

__all__ = [
    "PaLSParams",
    "ReconConfig",
    "ReconResult",
    "wendland",
    "wendland_prime",
    "heaviside",
    "dirac",
    "level_set",
    "shape",
    "shape_jacobian",
    "design_matrix",
    "solve_concentrations",
    "residual",
    "jacobian",
    "lm_step",
    "reconstruct",
    "metrics",
    "initial_params",
    "random_params",
    "perturbation_bounds",
    "write_trace",
]

log = logging.getLogger(__name__)


def wendland(t):
    """Compactly supported C2 radial function ``(1 - t)_+^4 (4 t + 1)``."""
    t = np.asarray(t, dtype=float)
    s = np.clip(1.0 - t, 0.0, None)
    return s ** 4 * (4.0 * t + 1.0)


def wendland_prime(t):
    t = np.asarray(t, dtype=float)
    s = np.clip(1.0 - t, 0.0, None)
    return -20.0 * t * s ** 3


def heaviside(t, eps):
    """Smoothed Heaviside: 0 below ``-eps``, 1 above ``eps``, sine ramp between."""
    t = np.asarray(t, dtype=float)
    x = np.clip(t / eps, -1.0, 1.0)
    ramp = 0.5 * (1.0 + x + np.sin(np.pi * x) / np.pi)
    # exact 0 and 1 outside the ramp (sin(pi) is not exactly zero in floating point)
    return np.where(x <= -1.0, 0.0, np.where(x >= 1.0, 1.0, ramp))


def dirac(t, eps):
    """Derivative of :func:`heaviside`; zero for ``|t| >= eps``."""
    t = np.asarray(t, dtype=float)
    out = (1.0 + np.cos(np.pi * t / eps)) / (2.0 * eps)
    return np.where(np.abs(t) < eps, out, 0.0)


@dataclass
class PaLSParams:
    """Level-set basis parameters plus the shape hyperparameters.

    The flat parameter vector is ``[alpha, beta, chi_x, chi_y, chi_z]``.
    """

    alpha: np.ndarray
    beta: np.ndarray
    chi: np.ndarray                 # (n_p, 3)
    tau: float = 0.1
    eps_h: float = 0.05
    nu_norm: float = 1e-3

    def __post_init__(self):
        self.alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        self.beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        self.chi = np.atleast_2d(np.asarray(self.chi, dtype=float))
        n = self.alpha.size
        if self.beta.size != n or self.chi.shape != (n, 3):
            raise ValueError("alpha, beta and chi must describe the same number of basis functions")
        if np.any(self.beta <= 0):
            raise ValueError("widths beta must be positive")
        if not self.nu_norm > 0 or not self.eps_h > 0:
            raise ValueError("nu_norm and eps_h must be positive")

    @property
    def n_p(self) -> int:
        return self.alpha.size

    @property
    def size(self) -> int:
        return 5 * self.n_p

    def vector(self) -> np.ndarray:
        return np.concatenate([self.alpha, self.beta, self.chi[:, 0], self.chi[:, 1], self.chi[:, 2]])

    def with_vector(self, p) -> "PaLSParams":
        p = np.asarray(p, dtype=float)
        n = self.n_p
        if p.size != 5 * n:
            raise ValueError(f"expected {5 * n} parameters, got {p.size}")
        chi = np.column_stack([p[2 * n:3 * n], p[3 * n:4 * n], p[4 * n:]])
        return replace(self, alpha=p[:n].copy(), beta=p[n:2 * n].copy(), chi=chi)


def _points(where):
    return where.coordinates() if isinstance(where, Grid) else np.asarray(where, dtype=float)


def _distances(p: PaLSParams, pts):
    diff = pts[:, None, :] - p.chi[None, :, :]          # (N, n_p, 3)
    d = np.sqrt(np.einsum("nkj,nkj->nk", diff, diff) + p.nu_norm ** 2)
    return diff, d


def level_set(p: PaLSParams, where) -> np.ndarray:
    """``phi(r) = sum_k alpha_k psi(beta_k |r - chi_k|_*)`` at grid vertices (or points)."""
    _, d = _distances(p, _points(where))
    return wendland(d * p.beta) @ p.alpha


def shape(p: PaLSParams, where) -> np.ndarray:
    """Smoothed indicator ``H_eps(phi - tau)``."""
    return heaviside(level_set(p, where) - p.tau, p.eps_h)


def shape_jacobian(p: PaLSParams, where) -> np.ndarray:
    """``d mu / d p`` with columns ``[alpha | beta | chi_x | chi_y | chi_z]``."""
    diff, d = _distances(p, _points(where))
    t = d * p.beta
    psi, dpsi = wendland(t), wendland_prime(t)
    dl = dirac(psi @ p.alpha - p.tau, p.eps_h)[:, None]
    Ja = dl * psi
    Jb = dl * p.alpha * dpsi * d
    g = -(dl * p.alpha * p.beta * dpsi / d)[:, :, None] * diff      # (N, n_p, 3)
    return np.hstack([Ja, Jb, g[:, :, 0], g[:, :, 1], g[:, :, 2]])


def design_matrix(op, mu, setup: MeasurementSetup) -> np.ndarray:
    """Columns ``E_l H mu``, shape ``(M, n_species)``."""
    Hmu = apply_operator(op, mu)
    return setup.extinction_rows() * Hmu[:, None]


def solve_concentrations(op, mu, W, y, setup: MeasurementSetup, rcond=1e-12):
    """``c = (W D)^+ (W y)`` by SVD-based least squares.

    Returns ``(c, degenerate)``; ``degenerate`` flags a rank-deficient ``W D``
    (for instance an empty shape), in which case the minimum-norm solution is
    returned.
    """
    W = np.broadcast_to(np.asarray(W, dtype=float), np.shape(y))
    A = W[:, None] * design_matrix(op, mu, setup)
    c, _, rank, sv = np.linalg.lstsq(A, W * y, rcond=rcond)
    return c, bool(rank < A.shape[1])


def residual(op, mu, c, W, y, setup: MeasurementSetup) -> np.ndarray:
    """``W (y - D(p) c)``."""
    return W * (y - design_matrix(op, mu, setup) @ c)


def jacobian(op, dmu, c, W, setup: MeasurementSetup) -> np.ndarray:
    """``d eps / d p = -W Ebar H dmu/dp`` with ``Ebar = sum_l c_l E_l``."""
    HJ = apply_operator(op, dmu)
    return -(W * (setup.extinction_rows() @ c))[:, None] * HJ


def lm_step(J, eps, nu) -> np.ndarray:
    """Damped Gauss-Newton step ``(J^T J + nu I) dp = -J^T eps``.

    Solved as the least-squares problem ``[J; sqrt(nu) I] dp ~ [-eps; 0]``;
    ``nu = 0`` gives the (minimum-norm) Gauss-Newton step.
    """
    if nu < 0 or not np.isfinite(nu):
        raise ValueError(f"damping must be a finite nonnegative number, got {nu}")
    J = np.asarray(J, dtype=float)
    n = J.shape[1]
    A = np.vstack([J, np.sqrt(nu) * np.eye(n)])
    rhs = np.concatenate([-np.asarray(eps, dtype=float), np.zeros(n)])
    return np.linalg.lstsq(A, rhs, rcond=None)[0]


def metrics(mu_true, mu_hat, threshold: float = 0.5):
    """Relative L2 error and Dice overlap after binarizing at ``threshold``.

    Returns ``(l2_rel, dice, both_empty)``; two empty shapes score Dice 1.
    """
    mu_true = np.asarray(mu_true, dtype=float)
    mu_hat = np.asarray(mu_hat, dtype=float)
    if mu_true.shape != mu_hat.shape:
        raise ValueError("shapes must have equal length")
    nt = np.linalg.norm(mu_true)
    l2 = np.linalg.norm(mu_true - mu_hat) / nt if nt > 0 else float(np.linalg.norm(mu_hat))
    a, b = mu_true >= threshold, mu_hat >= threshold
    denom = a.sum() + b.sum()
    if denom == 0:
        return float(l2), 1.0, True
    return float(l2), float(2.0 * np.sum(a & b) / denom), False


@dataclass
class ReconConfig:
    gamma: float = 1.2              # discrepancy factor
    max_outer: int = 30
    max_inner: int = 5
    max_retries: int = 8
    nu0: float = 1e-2               # initial damping relative to ||J||_2^2
    stagnation_tol: float = 1e-6
    stagnation_window: int = 3
    projected: bool = True          # re-solve c inside LM trials (variable projection)
    smoothing_start: float = 1.0    # initial Heaviside width as a multiple of p.eps_h
    smoothing_rate: float = 0.5     # per-outer-iteration shrink factor towards p.eps_h

    def __post_init__(self):
        if not self.gamma > 1:
            raise ValueError("gamma must exceed 1")
        if self.smoothing_start < 1 or not 0 < self.smoothing_rate < 1:
            raise ValueError("smoothing_start must be >= 1 and smoothing_rate in (0, 1)")
        if self.max_outer < 1 or self.max_inner < 1 or self.max_retries < 0:
            raise ValueError("iteration limits must be positive")


@dataclass
class ReconResult:
    params: PaLSParams
    c: np.ndarray
    mu: np.ndarray
    resnorm: float
    converged: bool
    reason: str
    trace: list = field(default_factory=list)


def reconstruct(y, op, setup: MeasurementSetup, W, p0: PaLSParams, where,
                config: ReconConfig | None = None, noise_norm: float = 0.0,
                mu_true=None, c_fixed=None) -> ReconResult:
    """Alternate concentration solves with Levenberg-Marquardt shape updates.

    ``noise_norm`` is the weighted noise level ``|W eta|``; iterations stop once
    ``|eps| <= gamma * noise_norm``.  ``c_fixed`` skips the concentration
    update (concentrations known).  Accepted steps always lower ``|eps|``.

    With ``config.projected`` the inner steps use the variable-projection
    Jacobian and re-solve ``c`` for each trial shape, so shape volume and
    concentration scale move together instead of zig-zagging.

    ``config.smoothing_start > 1`` runs a continuation in the Heaviside width:
    the first outer iterations use a wider ramp (a smoother misfit, so the
    large early steps do not hinge on single-vertex flips), shrinking by
    ``smoothing_rate`` per outer iteration down to ``p0.eps_h``.  Stopping
    tests apply only at the final width, and the residual may rise when the
    width changes; within one width accepted residuals never increase.
    """
    cfg = config or ReconConfig()
    y = np.asarray(y, dtype=float)
    W = np.broadcast_to(np.asarray(W, dtype=float), y.shape)
    pts = _points(where)
    p = p0
    target = max(cfg.gamma * noise_norm, 1e-12 * np.linalg.norm(W * y))
    trace = []

    def dice(mu):
        return metrics(mu_true, mu)[1] if mu_true is not None else np.nan

    def conc(mu):
        if c_fixed is not None:
            return np.asarray(c_fixed, dtype=float), False
        return solve_concentrations(op, mu, W, y, setup)

    project = cfg.projected and c_fixed is None
    eps_final = p0.eps_h
    width = eps_final * cfg.smoothing_start
    p = replace(p, eps_h=width)
    mu = shape(p, pts)
    c, _ = conc(mu)
    res = np.linalg.norm(residual(op, mu, c, W, y, setup))
    nu = None
    history = [res]
    reason, converged = "max_outer", False
    for outer in range(cfg.max_outer):
        if p.eps_h != width:
            p = replace(p, eps_h=width)
            mu = shape(p, pts)
            history = []
        final = width <= eps_final
        c, degenerate = conc(mu)
        res = np.linalg.norm(residual(op, mu, c, W, y, setup))
        trace.append(dict(outer_iter=outer, inner_iter=0, resnorm=res, nu=nu if nu else 0.0,
                          accepted=True, dice_vs_truth=dice(mu)))
        if final and res <= target:
            reason, converged = "discrepancy", True
            break
        if degenerate and c_fixed is None:
            reason = "degenerate"
            break
        stalled = False
        for inner in range(1, cfg.max_inner + 1):
            eps = residual(op, mu, c, W, y, setup)
            J = jacobian(op, shape_jacobian(p, pts), c, W, setup)
            if project:
                # Kaufman's variable-projection Jacobian: remove the part that
                # a concentration update would absorb
                Q, _ = np.linalg.qr(W[:, None] * design_matrix(op, mu, setup))
                J = J - Q @ (Q.T @ J)
            if nu is None:
                nu = cfg.nu0 * max(np.linalg.norm(J, 2) ** 2, np.finfo(float).tiny)
            for _ in range(cfg.max_retries + 1):
                dp = lm_step(J, eps, nu)
                try:
                    cand = p.with_vector(p.vector() + dp)
                except ValueError:          # step left the admissible set (beta <= 0)
                    cand = None
                if cand is not None:
                    mu_c = shape(cand, pts)
                    c_c = conc(mu_c)[0] if project else c
                    r_c = np.linalg.norm(residual(op, mu_c, c_c, W, y, setup))
                    ok = r_c < res
                else:
                    ok, r_c = False, np.inf
                trace.append(dict(outer_iter=outer, inner_iter=inner, resnorm=r_c if ok else res,
                                  nu=nu, accepted=ok, dice_vs_truth=dice(mu_c) if ok else np.nan))
                if ok:
                    p, mu, res, c = cand, mu_c, r_c, c_c
                    nu /= 10.0
                    break
                nu *= 10.0
            else:
                stalled = True
                break
            if final and res <= target:
                break
        history.append(res)
        width = max(eps_final, width * cfg.smoothing_rate)
        if stalled and final:
            reason = "no_descent"
            break
        w = cfg.stagnation_window
        if final and len(history) > w:
            old = history[-1 - w]
            if abs(old - res) <= cfg.stagnation_tol * max(old, np.finfo(float).tiny):
                reason = "stagnation"
                break
    else:
        c, _ = conc(mu)
        res = np.linalg.norm(residual(op, mu, c, W, y, setup))
        if res <= target:
            reason, converged = "discrepancy", True
    if reason in ("no_descent", "stagnation", "max_outer", "degenerate"):
        c, _ = conc(mu)
        res = np.linalg.norm(residual(op, mu, c, W, y, setup))
        converged = converged or res <= target
    return ReconResult(p, c, mu, float(res), converged, reason, trace)


def initial_params(grid: Grid, n_p: int = 5, alpha: float | None = None, beta: float | None = None,
                   tau: float = 0.1, eps_h: float = 0.05, rng=None, jitter: float = 0.0) -> PaLSParams:
    """Centers on a coarse lattice in the middle of the slab.

    The defaults ``alpha = 5 tau`` and ``beta = 1`` give each basis function a
    small blob (radius about 0.4 length units); wide initial supports merge
    into one slab-filling shape from which the inversion cannot recover.
    ``jitter`` perturbs the centers for randomized starts.
    """
    rng = np.random.default_rng(rng)
    nx = int(np.ceil(n_p ** (1 / 2)))
    ny = int(np.ceil(n_p / nx))
    xs = (np.arange(nx) - (nx - 1) / 2) * (grid.Lx / max(nx, 1))
    ys = (np.arange(ny) - (ny - 1) / 2) * (grid.Ly / max(ny, 1))
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    chi = np.column_stack([X.ravel(), Y.ravel(), np.full(X.size, grid.Lz / 2)])[:n_p]
    chi = chi + jitter * rng.standard_normal(chi.shape)
    a = np.full(n_p, 5.0 * tau if alpha is None else alpha)
    b = np.full(n_p, 1.0 if beta is None else beta)
    return PaLSParams(a, b, chi, tau, eps_h, 1e-3 * min(grid.spacing))


def random_params(grid: Grid, n_p: int, rng=None, tau: float = 0.1, eps_h: float = 0.05,
                  center=None, spread: float = 0.5, alpha=(0.5, 1.0), beta=(0.5, 0.9)) -> PaLSParams:
    """Random basis functions clustered around ``center`` (default: slab middle)."""
    rng = np.random.default_rng(rng)
    c = np.array([0.0, 0.0, grid.Lz / 2] if center is None else center, dtype=float)
    chi = c + spread * rng.uniform(-1, 1, (n_p, 3))
    return PaLSParams(rng.uniform(*alpha, n_p), rng.uniform(*beta, n_p), chi, tau, eps_h,
                      1e-3 * min(grid.spacing))


def _eta(nu, smin, smax):
    s = np.sqrt(nu)
    if smin <= s <= smax and nu > 0:
        return 1.0 / (2.0 * s)
    return max(smin / (nu + smin ** 2) if smin > 0 else 0.0, smax / (nu + smax ** 2))


def perturbation_bounds(H, Hhat, mu, y, dmu, nu, dp_bar=None) -> dict:
    """Measured gaps between exact and compressed models against their bounds.

    All inputs are in the rescaled form (``H <- W Ebar H``, ``y <- W y``).
    ``eps_bar = |H - Hhat|_2 / |H|_2`` is measured.  The objective and gradient
    bounds are reported both at first order and with their exact second-order
    terms (``*_rigorous``), which are the ones that always hold.
    """
    H = np.asarray(H, dtype=float)
    Hhat = np.asarray(Hhat, dtype=float)
    E = H - Hhat
    nH = np.linalg.norm(H, 2)
    nE = np.linalg.norm(E, 2)
    eb = nE / nH
    nmu = np.linalg.norm(mu)
    ndmu = np.linalg.norm(dmu, 2)
    r, rh = y - H @ mu, y - Hhat @ mu
    f, fh = r @ r, rh @ rh
    g = -dmu.T @ (H.T @ r)
    gh = -dmu.T @ (Hhat.T @ rh)
    J, Jb = -H @ dmu, -Hhat @ dmu
    EJ = J - Jb
    eps = rh
    dp = lm_step(J, eps, nu)
    dpb = lm_step(Jb, eps, nu) if dp_bar is None else dp_bar
    sv = np.linalg.svd(J, compute_uv=False)
    smax, smin = sv[0], sv[-1]
    nEJ = np.linalg.norm(EJ, 2)
    prop = (_eta(nu, smin, smax) * np.linalg.norm(dpb) + np.linalg.norm(eps) / (nu + smin ** 2)) * nEJ
    gap_g = np.linalg.norm(g - gh)
    tau_g = gap_g / np.linalg.norm(gh) if np.linalg.norm(gh) > 0 else np.inf
    cos = g @ gh / (np.linalg.norm(g) * np.linalg.norm(gh))
    out = dict(
        eps_bar=eb,
        f_gap=abs(f - fh),
        f_bound=2 * eb * np.linalg.norm(rh) * nH * nmu,
        f_bound_rigorous=2 * eb * np.linalg.norm(rh) * nH * nmu + (eb * nH * nmu) ** 2,
        grad_gap=gap_g,
        grad_bound=eb * ndmu * nH * (nmu * nH + np.linalg.norm(rh)),
        grad_bound_rigorous=eb * ndmu * nH * (nmu * nH + np.linalg.norm(rh)) + 2 * eb ** 2 * nH ** 2 * nmu * ndmu,
        step_gap=np.linalg.norm(dp - dpb),
        step_bound=prop,
        tau_g=tau_g,
        cos_theta=cos,
        cos_bound=(1 - tau_g ** 2) / np.sqrt(1 + tau_g ** 2) if np.isfinite(tau_g) else -np.inf,
        eta=_eta(nu, smin, smax),
        sigma_min=smin,
        sigma_max=smax,
    )
    out["ok"] = bool(out["f_gap"] <= out["f_bound_rigorous"] * (1 + 1e-10)
                     and out["grad_gap"] <= out["grad_bound_rigorous"] * (1 + 1e-10)
                     and out["step_gap"] <= out["step_bound"] * (1 + 1e-10)
                     and (tau_g >= 1 or cos >= out["cos_bound"] - 1e-12))
    return out


TRACE_COLUMNS = ["outer_iter", "inner_iter", "resnorm", "nu", "accepted", "dice_vs_truth"]


def write_trace(path, trace) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS)
        w.writeheader()
        for row in trace:
            w.writerow({
                "outer_iter": row["outer_iter"], "inner_iter": row["inner_iter"],
                "resnorm": f"{row['resnorm']:.10e}", "nu": f"{row['nu']:.6e}",
                "accepted": int(bool(row["accepted"])),
                "dice_vs_truth": "" if np.isnan(row["dice_vs_truth"]) else f"{row['dice_vs_truth']:.6f}",
            })
    return path
