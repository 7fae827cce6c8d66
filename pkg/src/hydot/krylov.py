"""Recycled augmented GMRES for the wavelength family ``(K + s_j M + s'_j R) x_j = b``.

The family is first rescaled by the lumped mass, ``M^{-1/2}``, so that ``M``
becomes the identity and every system reads ``(K + s_j I + s'_j R) x = b``.
A single Arnoldi basis of ``K`` then serves all ``s_j`` (shift invariance), its
harmonic Ritz vectors give a deflation pair ``K U = C``, and that pair is cheaply
re-targeted at each system before running deflated GMRES on it.
"""
from __future__ import annotations

import csv
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

__all__ = [
    "ArnoldiData",
    "DeflationBasis",
    "ShiftedDeflation",
    "MultishiftResult",
    "GMRESResult",
    "SolverConfig",
    "FamilyResult",
    "ConvergenceError",
    "arnoldi",
    "multishift_gmres",
    "harmonic_ritz",
    "build_deflation_basis",
    "update_deflation",
    "augmented_gmres",
    "solve_family",
    "write_telemetry",
]

log = logging.getLogger(__name__)

_EPS = np.finfo(float).eps


class ConvergenceError(RuntimeError):
    """A solve did not reach its tolerance within the restart budget."""

    def __init__(self, msg, index=None, relres=None):
        super().__init__(msg)
        self.index = index
        self.relres = relres


def _as_matvec(A):
    if callable(A):
        return A
    return lambda v: A @ v


def _orthogonalize(V, w, j, C=None, Ct=None, Cy=None):
    """Two passes of classical Gram-Schmidt against ``V[:, :j]`` (and ``C``).

    Returns the orthogonalized vector, the coefficients on ``V`` and on ``C``.
    """
    h = np.zeros(j)
    f = None
    for _ in range(2):
        if Ct is not None:
            fi = Ct(w)
            w = w - Cy(fi)
            f = fi if f is None else f + fi
        if j:
            hi = V[:, :j].T @ w
            w = w - V[:, :j] @ hi
            h += hi
    return w, h, f


@dataclass
class ArnoldiData:
    """``K V[:, :n] = V T`` with ``V`` of shape ``(N, n+1)`` and ``T`` ``(n+1, n)``."""

    V: np.ndarray
    T: np.ndarray
    beta: float
    breakdown: bool = False

    @property
    def n(self) -> int:
        return self.T.shape[1]


def arnoldi(A, v0, n, breakdown_tol=1e-12, stop=None) -> ArnoldiData:
    """``n`` Arnoldi steps with full re-orthogonalization.

    ``stop(T_bar)`` may end the iteration early; a zero subdiagonal (relative to
    ``breakdown_tol * ||T||``) ends it with ``breakdown=True``.
    """
    matvec = _as_matvec(A)
    v0 = np.asarray(v0, dtype=float)
    N = v0.size
    beta = float(np.linalg.norm(v0))
    if beta == 0:
        raise ValueError("starting vector is zero")
    n = min(int(n), N)
    V = np.zeros((N, n + 1))
    T = np.zeros((n + 1, n))
    V[:, 0] = v0 / beta
    scale = 0.0
    for j in range(n):
        w, h, _ = _orthogonalize(V, matvec(V[:, j]), j + 1)
        T[: j + 1, j] = h
        hn = float(np.linalg.norm(w))
        T[j + 1, j] = hn
        scale = max(scale, float(np.linalg.norm(T[: j + 2, j])))
        if hn <= breakdown_tol * scale:
            T[j + 1, j] = 0.0
            return ArnoldiData(V[:, : j + 2], T[: j + 2, : j + 1], beta, breakdown=True)
        V[:, j + 1] = w / hn
        if stop is not None and stop(T[: j + 2, : j + 1]):
            return ArnoldiData(V[:, : j + 2], T[: j + 2, : j + 1], beta)
    return ArnoldiData(V, T, beta)


class _ShiftedGivens:
    """Incremental QR of ``T_bar + s [I; 0]`` for many shifts at once."""

    def __init__(self, shifts, beta, nmax):
        self.s = np.asarray(shifts, dtype=float)
        ns = self.s.size
        self.R = np.zeros((ns, nmax, nmax))
        self.cs = np.zeros((ns, nmax))
        self.sn = np.zeros((ns, nmax))
        self.g = np.zeros((ns, nmax + 1))
        self.g[:, 0] = beta
        self.j = 0

    def push(self, col):
        """Add column ``col`` (length j+2) of ``T_bar``; return residual norms."""
        j = self.j
        c = np.tile(col[: j + 2], (self.s.size, 1))
        c[:, j] += self.s
        for i in range(j):
            a, b = c[:, i].copy(), c[:, i + 1].copy()
            c[:, i] = self.cs[:, i] * a + self.sn[:, i] * b
            c[:, i + 1] = -self.sn[:, i] * a + self.cs[:, i] * b
        a, b = c[:, j], c[:, j + 1]
        r = np.hypot(a, b)
        safe = np.where(r == 0, 1.0, r)
        cs = np.where(r == 0, 1.0, a / safe)
        sn = np.where(r == 0, 0.0, b / safe)
        self.cs[:, j], self.sn[:, j] = cs, sn
        c[:, j] = r
        self.R[:, : j + 1, j] = c[:, : j + 1]
        self.g[:, j + 1] = -sn * self.g[:, j]
        self.g[:, j] = cs * self.g[:, j]
        self.j += 1
        return np.abs(self.g[:, j + 1])

    def solve(self, idx):
        j = self.j
        R = self.R[idx, :j, :j]
        g = self.g[idx, :j]
        return la.solve_triangular(R, g, check_finite=False)


@dataclass
class MultishiftResult:
    X: np.ndarray               # (N, n_shifts)
    residuals: np.ndarray       # ||b - (K + s I) x|| per shift
    arnoldi: ArnoldiData
    converged: np.ndarray
    exact: bool = False

    @property
    def matvecs(self) -> int:
        return self.arnoldi.n


def multishift_gmres(K, b, sigmas, n=80, tol=1e-8) -> MultishiftResult:
    """One Arnoldi basis of ``K`` shared by every ``(K + s I) x = b``.

    Stops early once every shift reaches ``tol`` (relative) or on breakdown.
    A single cycle is run; shifts that have not converged keep their best
    ``n``-step iterate, which the augmented phase then refines.
    """
    b = np.asarray(b, dtype=float)
    sigmas = np.atleast_1d(np.asarray(sigmas, dtype=float))
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0:
        raise ValueError("right-hand side is zero")
    n = min(int(n), b.size)
    giv = _ShiftedGivens(sigmas, bnorm, n)
    state = {"res": np.full(sigmas.size, bnorm)}

    def stop(Tb):
        state["res"] = giv.push(Tb[:, -1])
        return bool(np.all(state["res"] <= tol * bnorm))

    arn = arnoldi(K, b, n, stop=stop)
    if giv.j < arn.n:
        # breakdown step: stop() was not called for the final column
        state["res"] = giv.push(arn.T[:, -1])
    X = np.empty((b.size, sigmas.size))
    Vn = arn.V[:, : arn.n]
    for i in range(sigmas.size):
        X[:, i] = Vn @ giv.solve(i)
    res = state["res"]
    return MultishiftResult(X, res, arn, res <= tol * bnorm, exact=arn.breakdown)


def harmonic_ritz(arn: ArnoldiData, k: int):
    """Smallest-magnitude harmonic Ritz pairs: ``T_bar^T T_bar z = theta T^T z``.

    Returns ``(Z, theta, regularized)`` with unit-norm columns of ``Z``.  A
    numerically singular ``T`` is shifted by ``eps * ||T||`` and flagged.
    """
    n = arn.n
    if not 0 <= k <= n:
        raise ValueError(f"need 0 <= k <= n, got k={k}, n={n}")
    if k == 0:
        return np.zeros((n, 0)), np.zeros(0), False
    Tb = arn.T
    Tn = Tb[:n, :n]
    A = Tb.T @ Tb
    B = Tn.T.copy()
    regularized = False
    if np.linalg.cond(B) > 1.0 / (1e3 * _EPS):
        B = B + _EPS * np.linalg.norm(B, 2) * np.eye(n)
        regularized = True
    theta, Z = la.eig(A, B)
    finite = np.isfinite(theta)
    theta, Z = theta[finite], Z[:, finite]
    order = np.argsort(np.abs(theta), kind="stable")[:k]
    theta, Z = theta[order], Z[:, order]
    if np.max(np.abs(theta.imag), initial=0) > 1e-8 * np.max(np.abs(theta), initial=1):
        warnings.warn("complex harmonic Ritz values; keeping real parts", RuntimeWarning)
    theta = theta.real
    Z = Z.real
    Z = Z / np.linalg.norm(Z, axis=0)
    return Z, theta, regularized


@dataclass
class DeflationBasis:
    """``K U = C`` with orthonormal ``C`` plus shift-independent Gram blocks."""

    U: np.ndarray
    C: np.ndarray
    RU: np.ndarray
    theta: np.ndarray
    UtC: np.ndarray = field(init=False)
    CtRU: np.ndarray = field(init=False)
    RUtU: np.ndarray = field(init=False)
    UtU: np.ndarray = field(init=False)
    RUtRU: np.ndarray = field(init=False)

    def __post_init__(self):
        self.UtC = self.U.T @ self.C
        self.CtRU = self.C.T @ self.RU
        self.RUtU = self.RU.T @ self.U
        self.UtU = self.U.T @ self.U
        self.RUtRU = self.RU.T @ self.RU

    @property
    def k(self) -> int:
        return self.U.shape[1]

    def gram(self, s, sp_):
        """``C'^T C'`` for ``C' = C + s U + sp_ R U`` from the cached blocks."""
        UtC, CtRU, RUtU = self.UtC, self.CtRU, self.RUtU
        G = (
            np.eye(self.k)
            + s * (UtC.T + UtC)
            + sp_ * (CtRU + CtRU.T)
            + s * sp_ * (RUtU + RUtU.T)
            + s * s * self.UtU
            + sp_ * sp_ * self.RUtRU
        )
        return 0.5 * (G + G.T)


def build_deflation_basis(arn: ArnoldiData, Z, theta, R=None, rank_tol=1e-10) -> DeflationBasis:
    """Harmonic Ritz vectors ``U = V_n Z`` and ``C = K U = V_{n+1} T_bar Z``, then
    ``C = qr(C)``, ``U <- U Y^{-1}`` (triangular solve, no explicit inverse).
    Columns with a negligible ``Y`` diagonal are dropped with a warning.
    """
    n = arn.n
    U0 = arn.V[:, :n] @ Z
    C0 = arn.V @ (arn.T @ Z)
    C, Y = np.linalg.qr(C0)
    d = np.abs(np.diag(Y))
    keep = d > rank_tol * max(d.max(initial=0.0), _EPS)
    if not np.all(keep):
        nk = int(np.argmin(keep)) if not keep[0] else int(np.argmax(~keep))
        warnings.warn(f"deflation basis rank deficient; k reduced to {nk}", RuntimeWarning)
        Z, theta = Z[:, :nk], theta[:nk]
        U0, C0 = U0[:, :nk], C0[:, :nk]
        C, Y = np.linalg.qr(C0)
    U = la.solve_triangular(Y, U0.T, trans="T", lower=False).T if Y.size else U0
    RU = np.zeros_like(U) if R is None else _as_matvec(R)(U) if U.size else np.zeros_like(U)
    return DeflationBasis(U=U, C=C, RU=np.asarray(RU), theta=np.asarray(theta))


@dataclass
class ShiftedDeflation:
    """``A_j U_j = C_j`` for one shift pair, with ``C_j = Cb F_C^{-1}``, ``U_j = U F_U^{-1}``.

    Neither ``C_j`` nor ``U_j`` is formed; products go through triangular solves.
    """

    Cb: np.ndarray
    U: np.ndarray
    FC: np.ndarray | None
    FU: np.ndarray
    fallback: bool = False

    @property
    def k(self) -> int:
        return self.U.shape[1]

    def Ct(self, v):
        w = self.Cb.T @ v
        if self.FC is not None:
            w = la.solve_triangular(self.FC, w, trans="T", check_finite=False)
        return w

    def Cy(self, y):
        if self.FC is not None:
            y = la.solve_triangular(self.FC, y, check_finite=False)
        return self.Cb @ y

    def Uy(self, y):
        return self.U @ la.solve_triangular(self.FU, y, check_finite=False)

    @property
    def C(self) -> np.ndarray:
        if self.FC is None:
            return self.Cb
        return la.solve_triangular(self.FC, self.Cb.T, trans="T").T

    @property
    def Uj(self) -> np.ndarray:
        return la.solve_triangular(self.FU, self.U.T, trans="T").T


def update_deflation(basis: DeflationBasis, sigma, sigma_prime, orth_tol=1e-8, force_qr=False):
    """Re-target ``(U, C)`` at ``K + sigma I + sigma_prime R``.

    ``C' = C + sigma U + sigma_prime R U`` has Gram matrix assembled from the
    cached ``k x k`` blocks; its Cholesky factor ``F`` gives ``C_j = C' F^{-1}``.
    If the Cholesky fails, or ``F`` is too ill-conditioned to keep ``C_j``
    orthonormal to ``orth_tol``, an explicit thin QR of ``C'`` is used instead.
    """
    Cp = basis.C + sigma * basis.U + sigma_prime * basis.RU
    if basis.k == 0:
        return ShiftedDeflation(Cp, basis.U, None, np.zeros((0, 0)))
    if not force_qr:
        try:
            F = la.cholesky(basis.gram(sigma, sigma_prime), lower=False)
            d = np.abs(np.diag(F))
            if (d.max() / d.min()) ** 2 * _EPS * basis.k <= orth_tol:
                return ShiftedDeflation(Cp, basis.U, F, F)
        except la.LinAlgError:
            pass
    Q, Y = np.linalg.qr(Cp)
    return ShiftedDeflation(Q, basis.U, None, Y, fallback=True)


@dataclass
class GMRESResult:
    x: np.ndarray
    iters: int
    matvecs: int
    relres: float
    converged: bool
    history: list = field(default_factory=list)
    restarts: int = 0


def augmented_gmres(A, b, deflation: ShiftedDeflation | None = None, x0=None, m=50,
                    tol=1e-8, max_restarts=50, precond=None) -> GMRESResult:
    """Deflated, augmented, restarted GMRES.

    Each cycle: ``x <- x + U_j C_j^T r`` (residual becomes ``(I - C_j C_j^T) r``),
    then ``m - k`` Arnoldi steps with ``(I - C_j C_j^T) A P`` and the small
    least-squares problem ``[I F; 0 T_bar] [y1; y2] ~ [0; beta e1]``, solved by
    ``y2 = argmin ||beta e1 - T_bar y2||`` and ``y1 = -F y2``.

    ``precond`` is an optional right preconditioner given as a diagonal vector.
    ``history`` holds the relative residual after every inner step.
    """
    matvec = _as_matvec(A)
    b = np.asarray(b, dtype=float)
    N = b.size
    x = np.zeros(N) if x0 is None else np.array(x0, dtype=float, copy=True)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0:
        return GMRESResult(np.zeros(N), 0, 0, 0.0, True)
    k = 0 if deflation is None else deflation.k
    inner = m - k
    if inner < 1:
        raise ValueError(f"restart length m={m} must exceed deflation size k={k}")
    P = (lambda v: v) if precond is None else (lambda v: precond * v)
    Ct = Cy = None
    if k:
        Ct, Cy = deflation.Ct, deflation.Cy

    iters = matvecs = 0
    history: list[float] = []
    relres = np.inf
    for cycle in range(max_restarts + 1):
        r = b - matvec(x)
        matvecs += 1
        if k:
            z = Ct(r)
            x = x + deflation.Uy(z)
            r = r - Cy(z)
            r = r - Cy(Ct(r))
        beta = float(np.linalg.norm(r))
        relres = beta / bnorm
        if not history:
            history.append(relres)
        if relres <= tol:
            return GMRESResult(x, iters, matvecs, relres, True, history, cycle)
        V = np.zeros((N, inner + 1))
        Tb = np.zeros((inner + 1, inner))
        F = np.zeros((k, inner))
        V[:, 0] = r / beta
        giv = _ShiftedGivens([0.0], beta, inner)
        j = 0
        for j in range(inner):
            w = matvec(P(V[:, j]))
            matvecs += 1
            iters += 1
            w, h, f = _orthogonalize(V, w, j + 1, Ct=Ct, Cy=Cy)
            Tb[: j + 1, j] = h
            if k:
                F[:, j] = f
            hn = float(np.linalg.norm(w))
            Tb[j + 1, j] = hn
            res = float(giv.push(Tb[: j + 2, j])[0])
            relres = res / bnorm
            history.append(relres)
            if hn <= 1e-14 * np.linalg.norm(Tb[: j + 2, j]) or relres <= tol:
                break
            V[:, j + 1] = w / hn
        nj = giv.j
        y2 = giv.solve(0)
        x = x + P(V[:, :nj] @ y2)
        if k:
            x = x + deflation.Uy(-F[:, :nj] @ y2)
        if relres <= tol:
            r = b - matvec(x)
            matvecs += 1
            relres = float(np.linalg.norm(r)) / bnorm
            if relres <= tol * 10:
                return GMRESResult(x, iters, matvecs, relres, True, history, cycle)
    return GMRESResult(x, iters, matvecs, relres, False, history, max_restarts)


@dataclass
class SolverConfig:
    n: int = 80                 # Arnoldi steps for the shared basis
    k: int = 10                 # deflation vectors
    m: int = 50                 # restart length (inner steps = m - k)
    tol: float = 1e-8
    max_restarts: int = 50
    center_shift: bool = True
    jacobi: bool = False        # diagonal right preconditioner, same for every system
    threads: int = 1
    strict: bool = True         # raise ConvergenceError on failure

    def __post_init__(self):
        if self.n < 1 or self.k < 0 or self.m <= self.k or not self.tol > 0:
            raise ValueError(f"invalid solver config {self}")


@dataclass
class SystemStats:
    sigma: float
    sigma_prime: float
    iters: int
    matvecs: int
    relres: float
    converged: bool
    fallback_qr: bool = False
    phase1_relres: float = np.nan


@dataclass
class FamilyResult:
    X: np.ndarray                     # (n_systems, N), original variables
    stats: list[SystemStats]
    phase1_matvecs: int
    k_used: int
    sigma_bar_prime: float

    @property
    def total_iters(self) -> int:
        return sum(s.iters for s in self.stats)

    @property
    def total_matvecs(self) -> int:
        return self.phase1_matvecs + sum(s.matvecs for s in self.stats)


def _scaled(A, s):
    S = sp.diags(s)
    return (S @ A @ S).tocsr()


def solve_family(K, M, R, b, sigma, sigma_prime, config: SolverConfig | None = None) -> FamilyResult:
    """Solve ``(K + sigma_j M + sigma_prime_j R) x_j = b`` for every ``j``.

    ``M`` must be the lumped (diagonal) mass.  Residual tolerances refer to the
    mass-scaled systems that are actually iterated on.
    """
    cfg = config or SolverConfig()
    sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
    sigma_prime = np.atleast_1d(np.asarray(sigma_prime, dtype=float))
    if sigma.shape != sigma_prime.shape:
        raise ValueError("sigma and sigma_prime must have equal length")
    b = np.asarray(b, dtype=float)
    N = b.size
    if K.shape != (N, N) or M.shape != (N, N) or R.shape != (N, N):
        raise ValueError("matrix dimensions do not match right-hand side")
    d = M.diagonal() if sp.issparse(M) else np.diag(M)
    if np.any(d <= 0):
        raise ValueError("lumped mass diagonal must be positive")
    s = 1.0 / np.sqrt(d)
    Kh, Rh, bh = _scaled(sp.csr_matrix(K), s), _scaled(sp.csr_matrix(R), s), s * b

    sbar = 0.0
    spc = sigma_prime
    if cfg.center_shift:
        from .optics import center_shift_transform

        sbar, spc = center_shift_transform(sigma_prime)
        Kh = (Kh + sbar * Rh).tocsr()

    nsys = sigma.size
    if not np.any(bh):
        stats = [SystemStats(a, c, 0, 0, 0.0, True) for a, c in zip(sigma, sigma_prime)]
        return FamilyResult(np.zeros((nsys, N)), stats, 0, 0, sbar)

    ms = multishift_gmres(Kh, bh, sigma, n=cfg.n, tol=cfg.tol)
    k = min(cfg.k, ms.arnoldi.n)
    basis = None
    if k > 0:
        Z, theta, _ = harmonic_ritz(ms.arnoldi, k)
        basis = build_deflation_basis(ms.arnoldi, Z, theta, Rh)
        k = basis.k
    I = sp.identity(N, format="csr")

    def one(j):
        Aj = (Kh + sigma[j] * I + spc[j] * Rh).tocsr()
        precond = None
        if cfg.jacobi:
            precond = 1.0 / Aj.diagonal()
        defl = update_deflation(basis, sigma[j], spc[j]) if basis is not None else None
        x0 = ms.X[:, j]
        r0 = np.linalg.norm(bh - Aj @ x0) / np.linalg.norm(bh)
        res = augmented_gmres(Aj, bh, defl, x0=x0, m=cfg.m, tol=cfg.tol,
                              max_restarts=cfg.max_restarts, precond=precond)
        st = SystemStats(float(sigma[j]), float(sigma_prime[j]), res.iters, res.matvecs + 1,
                         res.relres, res.converged,
                         bool(defl.fallback) if defl is not None else False, float(r0))
        return s * res.x, st

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            out = list(pool.map(one, range(nsys)))
    else:
        out = [one(j) for j in range(nsys)]
    X = np.vstack([o[0] for o in out])
    stats = [o[1] for o in out]
    bad = [j for j, st in enumerate(stats) if not st.converged]
    if bad and cfg.strict:
        j = bad[0]
        raise ConvergenceError(
            f"system {j} (sigma={sigma[j]:.4g}) stalled at relres {stats[j].relres:.3e}",
            index=j, relres=stats[j].relres,
        )
    return FamilyResult(X, stats, ms.matvecs, k, sbar)


def write_telemetry(path, wavelengths, result: FamilyResult | list, append=False) -> Path:
    """CSV: ``wavelength_nm, sigma, sigma_prime, iters, matvecs, final_relres``."""
    path = Path(path)
    stats = result.stats if isinstance(result, FamilyResult) else list(result)
    new = not (append and path.exists())
    with path.open("a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["wavelength_nm", "sigma", "sigma_prime", "iters", "matvecs", "final_relres"])
        for lam, st in zip(wavelengths, stats):
            w.writerow([f"{lam:g}", f"{st.sigma:.10g}", f"{st.sigma_prime:.10g}",
                        st.iters, st.matvecs, f"{st.relres:.6e}"])
    return path
