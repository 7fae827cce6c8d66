"""Low-rank compression of the Born operator.

Leaf blocks (one source, all its detectors and wavelengths) are compressed by
adaptive randomized SVD or partially pivoted ACA, then merged pairwise up a
geometric bisection tree of the source positions.
"""
from __future__ import annotations

import logging
import struct
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse.linalg import aslinearoperator

__all__ = [
    "LowRankFactor",
    "FlopCounter",
    "ClusterNode",
    "randsvd",
    "aca_full",
    "aca_partial",
    "agglomerate",
    "recompress",
    "build_cluster_tree",
    "tolerance_schedule",
    "recursive_lowrank",
    "lr_matvec",
    "lr_rmatvec",
    "write_factor",
    "read_factor",
]

log = logging.getLogger(__name__)

_EPS = np.finfo(float).eps


class FlopCounter:
    """Per-category flop totals plus a per-operation tally.

    Every dense kernel issued by this module goes through :meth:`add`, so the
    category totals partition the tally exactly.
    """

    def __init__(self):
        self.by_category = defaultdict(float)
        self.tally = defaultdict(float)
        self.calls = defaultdict(int)

    def add(self, category: str, op: str, flops: float):
        self.by_category[category] += flops
        self.tally[op] += flops
        self.calls[op] += 1

    @property
    def total(self) -> float:
        return float(sum(self.tally.values()))

    def report(self) -> dict:
        return {"categories": dict(self.by_category), "ops": dict(self.tally), "total": self.total}


def _mm(A, B, counter=None, cat="other"):
    if counter is not None:
        counter.add(cat, "matmul", 2.0 * A.shape[0] * A.shape[1] * B.shape[-1])
    return A @ B


def _qr(A, counter=None, cat="other"):
    m, n = A.shape
    if counter is not None:
        counter.add(cat, "qr", 2.0 * m * n * n - 2.0 * n ** 3 / 3 if m >= n else 2.0 * n * m * m)
    return np.linalg.qr(A)


def _svd(A, counter=None, cat="other"):
    m, n = A.shape
    if counter is not None:
        counter.add(cat, "svd", 14.0 * max(m, n) * min(m, n) ** 2 + 8.0 * min(m, n) ** 3)
    return np.linalg.svd(A, full_matrices=False)


@dataclass
class LowRankFactor:
    """``A ~ U V^T``; ``U`` has orthonormal columns unless ``orthonormal`` is false.

    With ``perm`` set, row ``i`` of ``U V^T`` is row ``perm[i]`` of the target.
    """

    U: np.ndarray
    V: np.ndarray
    tol: float = 0.0
    method: str = "dense"
    perm: np.ndarray | None = None
    orthonormal: bool = True
    flagged: bool = False
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.U = np.asarray(self.U, dtype=float)
        self.V = np.asarray(self.V, dtype=float)
        if self.U.ndim != 2 or self.V.ndim != 2 or self.U.shape[1] != self.V.shape[1]:
            raise ValueError(f"incompatible factor shapes {self.U.shape}, {self.V.shape}")
        if self.perm is not None:
            self.perm = np.asarray(self.perm, dtype=np.int64)
            if self.perm.size != self.U.shape[0]:
                raise ValueError("permutation length must equal the row count")

    @property
    def shape(self) -> tuple[int, int]:
        return self.U.shape[0], self.V.shape[0]

    @property
    def rank(self) -> int:
        return self.U.shape[1]

    def matvec(self, x):
        return lr_matvec(self, x)

    def rmatvec(self, y):
        return lr_rmatvec(self, y)

    def to_dense(self, canonical: bool = True) -> np.ndarray:
        A = self.U @ self.V.T
        if canonical and self.perm is not None:
            out = np.empty_like(A)
            out[self.perm] = A
            return out
        return A

    def orthonormalize(self, counter=None, cat="agg") -> "LowRankFactor":
        if self.orthonormal or self.rank == 0:
            return self
        Q, R = _qr(self.U, counter, cat)
        return LowRankFactor(Q, _mm(self.V, R.T, counter, cat), self.tol, self.method,
                             self.perm, True, self.flagged, dict(self.info))


def lr_matvec(f: LowRankFactor, x):
    """``U (V^T x)`` in canonical row order; ``x`` may be a vector or a block of columns."""
    x = np.asarray(x, dtype=float)
    if x.shape[0] != f.V.shape[0]:
        raise ValueError(f"operand has {x.shape[0]} rows, factor has {f.V.shape[0]} columns")
    y = f.U @ (f.V.T @ x)
    if f.perm is not None:
        out = np.empty_like(y)
        out[f.perm] = y
        return out
    return y


def lr_rmatvec(f: LowRankFactor, y):
    """``V (U^T y)`` with ``y`` given in canonical row order."""
    y = np.asarray(y, dtype=float)
    if y.shape[0] != f.U.shape[0]:
        raise ValueError(f"operand has {y.shape[0]} rows, factor has {f.U.shape[0]} rows")
    if f.perm is not None:
        y = y[f.perm]
    return f.V @ (f.U.T @ y)


def _operator(A):
    if isinstance(A, np.ndarray):
        return A
    return aslinearoperator(A)


def _apply(A, X, counter, cat, adjoint=False):
    if isinstance(A, np.ndarray):
        return _mm(A.T, X, counter, cat) if adjoint else _mm(A, X, counter, cat)
    if counter is not None:
        m, n = A.shape
        counter.add(cat, "operator", 2.0 * m * n * X.shape[1])
    return A.rmatmat(X) if adjoint else A.matmat(X)


def randsvd(A, eps=1e-6, p=20, k=10, r0=10, rng=None, counter=None, cat="leaf") -> LowRankFactor:
    """Adaptive randomized SVD with a Gaussian error probe.

    For a trial rank ``r`` the range of ``A Omega_1`` (``r + p`` columns) is
    accepted when the probe ``|(I - QQ^T) A Omega_2|_F / sqrt(k)`` is at most
    ``eps/2`` times the matching estimate of ``|A|_F``; otherwise ``r`` doubles.
    The small SVD is then truncated with a Frobenius tail below ``eps/2``.
    """
    A = _operator(A)
    m, n = A.shape
    rng = np.random.default_rng(rng)
    mn = min(m, n)
    if mn == 0:
        return LowRankFactor(np.zeros((m, 0)), np.zeros((n, 0)), eps, "randsvd")
    r = max(1, min(r0, mn))
    while True:
        ell = min(r + p, mn)
        Y = _apply(A, rng.standard_normal((n, ell)), counter, cat)
        ynorm = np.linalg.norm(Y) / np.sqrt(ell)
        if ynorm == 0:
            return LowRankFactor(np.zeros((m, 0)), np.zeros((n, 0)), eps, "randsvd",
                                 info={"probe": 0.0, "trial_rank": ell})
        Q, _ = _qr(Y, counter, cat)
        Z = _apply(A, rng.standard_normal((n, k)), counter, cat)
        Z = Z - _mm(Q, _mm(Q.T, Z, counter, cat), counter, cat)
        probe = np.linalg.norm(Z) / np.sqrt(k)
        accepted = probe <= 0.5 * eps * ynorm
        if accepted or ell == mn:
            break
        r *= 2
    Bt = _apply(A, Q, counter, cat, adjoint=True)           # (Q^T A)^T, n x ell
    if Bt.shape[0] > Bt.shape[1]:
        # wide SVD via QR of the tall transpose: Q^T A = R^T Qb^T
        Qb, Rb = _qr(Bt, counter, cat)
        W, S, Xt = _svd(Rb.T, counter, cat)
        Zt = _mm(Qb, Xt.T, counter, cat).T
    else:
        W, S, Zt = _svd(Bt.T, counter, cat)
    tail = np.sqrt(np.cumsum((S ** 2)[::-1])[::-1])         # tail[i] = |S[i:]|
    total = tail[0] if S.size else 0.0
    keep = int(np.sum(tail > 0.5 * eps * total)) if total > 0 else 0
    U = _mm(Q, W[:, :keep], counter, cat)
    V = Zt[:keep].T * S[:keep]
    # a full-rank result means the block did not compress at this tolerance
    return LowRankFactor(U, V, eps, "randsvd", flagged=keep >= mn,
                         info={"probe": float(probe), "trial_rank": ell, "accepted": bool(accepted)})


def aca_full(A, eps=1e-12, max_rank=None) -> LowRankFactor:
    """Cross approximation with full pivoting on a materialized block.

    Stops at an exactly zero pivot (exact rank reached) or once
    ``|R_k|_F <= eps |A|_F``.  ``info['steps']`` counts the rank-one updates.
    """
    R = np.array(A, dtype=float, copy=True)
    m, n = R.shape
    max_rank = min(m, n) if max_rank is None else max_rank
    anorm = np.linalg.norm(R)
    us, vs = [], []
    while len(us) < max_rank and anorm > 0:
        i, j = np.unravel_index(np.argmax(np.abs(R)), R.shape)
        piv = R[i, j]
        if piv == 0:
            break
        u = R[:, j].copy()
        v = R[i, :] / piv
        R -= np.outer(u, v)
        us.append(u)
        vs.append(v)
        if np.linalg.norm(R) <= eps * anorm:
            break
    U = np.column_stack(us) if us else np.zeros((m, 0))
    V = np.column_stack(vs) if vs else np.zeros((n, 0))
    return LowRankFactor(U, V, eps, "aca_full", orthonormal=False,
                         info={"steps": len(us), "residual": float(np.linalg.norm(R))})


def aca_partial(get_row, get_col, shape, eps=1e-6, max_rank=None) -> LowRankFactor:
    """Partially pivoted ACA from single-row/column access.

    The next pivot row is the largest entry of the latest column among rows
    not yet used; rows whose residual vanishes are skipped.  Stops when
    ``|u_k| |v_k| <= eps |S_k|_F`` with ``S_k`` tracked by the running sum.
    """
    m, n = shape
    max_rank = min(m, n) if max_rank is None else max_rank
    us, vs = [], []
    used = np.zeros(m, dtype=bool)
    s2 = 0.0
    i = 0
    flagged = False
    while len(us) < max_rank:
        used[i] = True
        row = np.array(get_row(i), dtype=float)
        for u, v in zip(us, vs):
            row -= u[i] * v
        j = int(np.argmax(np.abs(row)))
        if abs(row[j]) <= 16 * _EPS * np.sqrt(max(s2, 0.0)):
            # rounding-level residual: this row is already reproduced exactly
            free = np.flatnonzero(~used)
            if free.size == 0:
                flagged = True
                break
            i = int(free[0])
            continue
        v = row / row[j]
        u = np.array(get_col(j), dtype=float)
        for uu, vv in zip(us, vs):
            u -= vv[j] * uu
        nu, nv = np.linalg.norm(u), np.linalg.norm(v)
        cross = sum((u @ uu) * (v @ vv) for uu, vv in zip(us, vs))
        s2 = s2 + (nu * nv) ** 2 + 2.0 * cross
        us.append(u)
        vs.append(v)
        if nu * nv <= eps * np.sqrt(max(s2, 0.0)):
            break
        cand = np.abs(u)
        cand[used] = -1.0
        if np.all(used):
            break
        i = int(np.argmax(cand))
        if cand[i] <= 0:
            i = int(np.flatnonzero(~used)[0])
    U = np.column_stack(us) if us else np.zeros((m, 0))
    V = np.column_stack(vs) if vs else np.zeros((n, 0))
    return LowRankFactor(U, V, eps, "aca_partial", orthonormal=False, flagged=flagged,
                         info={"steps": len(us)})


def recompress(f: LowRankFactor, eps=None, rank=None, counter=None, cat="agg") -> LowRankFactor:
    """Thin QR of both factors, SVD of the ``r x r`` core, truncation.

    ``rank`` keeps that many singular values; otherwise the Frobenius tail is
    kept below ``eps`` relative (default: drop only numerically zero terms).
    """
    if f.rank == 0:
        return f
    Qu, Ru = _qr(f.U, counter, cat)
    Qv, Rv = _qr(f.V, counter, cat)
    W, S, Zt = _svd(_mm(Ru, Rv.T, counter, cat), counter, cat)
    if rank is None:
        eps = 1e-14 if eps is None else eps
        tail = np.sqrt(np.cumsum((S ** 2)[::-1])[::-1])
        rank = int(np.sum(tail > eps * tail[0])) if S.size and tail[0] > 0 else 0
    rank = min(rank, S.size)
    U = _mm(Qu, W[:, :rank], counter, cat)
    V = _mm(Qv, Zt[:rank].T, counter, cat) * S[:rank]
    return LowRankFactor(U, V, f.tol if eps is None else eps, f.method, f.perm, True, f.flagged,
                         dict(f.info))


def agglomerate(f1: LowRankFactor, f2: LowRankFactor, eps=1e-6, rng=None, counter=None,
                **kw) -> LowRankFactor:
    """Merge factors of two row blocks sharing the column space.

    ``[V1 V2]^T ~ U_V W^T`` by randomized SVD, then ``U = blkdiag(U1, U2) U_V``.
    """
    if f1.V.shape[0] != f2.V.shape[0]:
        raise ValueError(f"column dimensions differ: {f1.V.shape[0]} vs {f2.V.shape[0]}")
    f1 = f1.orthonormalize(counter)
    f2 = f2.orthonormalize(counter)
    r1 = f1.rank
    Vs = np.hstack([f1.V, f2.V])
    kw.setdefault("r0", max(r1 + f2.rank, 1))   # merged rank never exceeds r1 + r2
    inner = randsvd(Vs.T, eps, rng=rng, counter=counter, cat="agg", **kw)
    Uv = inner.U
    U = np.vstack([_mm(f1.U, Uv[:r1], counter, "agg"), _mm(f2.U, Uv[r1:], counter, "agg")])
    perm = None
    if f1.perm is not None or f2.perm is not None:
        p1 = f1.perm if f1.perm is not None else np.arange(f1.shape[0])
        p2 = f2.perm if f2.perm is not None else np.arange(f2.shape[0]) + f1.shape[0]
        perm = np.concatenate([p1, p2])
    return LowRankFactor(U, inner.V, eps, "agglomerate", perm, True, f1.flagged or f2.flagged,
                         {"ranks": (f1.rank, f2.rank)})


@dataclass
class ClusterNode:
    """Node of the bisection tree: source indices and bounding box."""

    indices: list
    lo: np.ndarray
    hi: np.ndarray
    children: list = field(default_factory=list)
    level: int = 0

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def leaves(self):
        if self.is_leaf:
            yield self
        else:
            for c in self.children:
                yield from c.leaves()

    def order(self) -> list:
        """Source indices in leaf-traversal order."""
        return [i for leaf in self.leaves() for i in leaf.indices]

    @property
    def depth(self) -> int:
        return 0 if self.is_leaf else 1 + max(c.depth for c in self.children)

    def nested(self):
        """Index structure as nested lists, e.g. ``[[0, 1], [[2, 3], [4]]]``."""
        if self.is_leaf:
            return list(self.indices)
        return [c.nested() for c in self.children]

    def expanded(self) -> "ClusterNode":
        """Copy in which every two-source leaf gets two singleton children."""
        kids = [c.expanded() for c in self.children]
        if self.is_leaf and len(self.indices) == 2:
            kids = [ClusterNode([i], self.lo, self.hi, [], self.level + 1) for i in self.indices]
        return ClusterNode(list(self.indices), self.lo, self.hi, kids, self.level)


def build_cluster_tree(points, box=None, leaf_size: int = 2) -> ClusterNode:
    """Geometric bisection of ``points`` (``(n, d)``) inside ``box = (lo, hi)``.

    The box is halved across its widest extent (first axis on ties), points on
    the split plane go to the lower half, and sets larger than ``leaf_size``
    are split again.  Empty halves are skipped without adding a level.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[0] < 1:
        raise ValueError("need at least one point")
    if box is None:
        lo, hi = pts.min(axis=0), pts.max(axis=0)
    else:
        lo, hi = (np.asarray(b, dtype=float) for b in box)
        pts = pts[:, : lo.size]
    if np.any(pts < lo - 1e-12) or np.any(pts > hi + 1e-12):
        raise ValueError("points must lie inside the box")

    def split(idx, lo, hi, level, tries=0):
        node = ClusterNode(list(idx), lo.copy(), hi.copy(), [], level)
        if len(idx) <= leaf_size:
            return node
        j = int(np.argmax(hi - lo))
        if hi[j] - lo[j] <= 0 or tries > 64:
            # coincident points: fall back to halving the index list
            h = len(idx) // 2
            node.children = [split(idx[:h], lo, hi, level + 1), split(idx[h:], lo, hi, level + 1)]
            return node
        g = 0.5 * (lo[j] + hi[j])
        left = [i for i in idx if pts[i, j] <= g]
        right = [i for i in idx if pts[i, j] > g]
        hl, lr = hi.copy(), lo.copy()
        hl[j] = g
        lr[j] = g
        if not left:
            return split(idx, lr, hi, level, tries + 1)
        if not right:
            return split(idx, lo, hl, level, tries + 1)
        node.children = [split(left, lo, hl, level + 1), split(right, lr, hi, level + 1)]
        return node

    return split(list(range(pts.shape[0])), lo, hi, 0)


def tolerance_schedule(eps_d: float, L: int, N_r: int) -> float:
    """Per-stage tolerance ``eps_d / (2^{L/2} (L + 1) sqrt(N_r))``."""
    if not eps_d > 0 or L < 0 or N_r < 1:
        raise ValueError("need eps_d > 0, L >= 0 and N_r >= 1")
    return eps_d / (2.0 ** (L / 2) * (L + 1) * np.sqrt(N_r))


def _leaf(block, method, eps, rng, counter, r0=10):
    if method == "randsvd":
        return randsvd(block, eps, r0=r0, rng=rng, counter=counter, cat="leaf")
    if method == "aca_partial":
        if counter is not None:
            counter.add("leaf", "materialize", float(block.size))
        f = aca_partial(lambda i: block[i], lambda j: block[:, j], block.shape, eps)
        return f.orthonormalize(counter, "leaf")
    raise ValueError(f"unknown leaf method {method!r}")


def recursive_lowrank(tree: ClusterNode, eps_d: float, provider, block_rows: int | None = None,
                      method: str = "randsvd", seed: int = 0, threads: int = 1,
                      counter: FlopCounter | None = None, final_recompress: bool = True,
                      schedule: bool = True, r0: int = 10):
    """Global factor of the stacked source blocks ``provider(s)``.

    Leaves are compressed independently (optionally in a thread pool), then
    merged bottom-up.  With ``schedule`` the stage tolerance comes from
    :func:`tolerance_schedule` applied to ``eps_d / 2`` and a final recompression
    truncates at ``eps_d / 2``.  Returns ``(factor, levels)``: ``levels`` lists
    one dict per internal node with its level, rank and child ranks.
    """
    tree = tree.expanded()
    L = tree.depth
    order = tree.order()
    first = provider(order[0])
    B, N = first.shape
    block_rows = block_rows or B
    M = block_rows * len(order)
    eps = tolerance_schedule(eps_d / 2, L, min(M, N)) if schedule else eps_d
    ss = np.random.SeedSequence(seed)
    child_seeds = {s: np.random.default_rng([seed, s]) for s in order}

    hint = {"r0": r0}

    def leaf(s):
        blk = first if s == order[0] else provider(s)
        if blk.shape != (block_rows, N):
            raise ValueError(f"source {s}: block shape {blk.shape} != {(block_rows, N)}")
        f = _leaf(blk, method, eps, child_seeds[s], counter, hint["r0"])
        f.perm = np.arange(s * block_rows, (s + 1) * block_rows)
        return s, f

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            leaves = dict(pool.map(leaf, order))
    else:
        leaves = {}
        for s in order:
            # neighbouring sources have similar ranks: start the next leaf there
            leaves[s] = leaf(s)[1]
            hint["r0"] = max(leaves[s].rank, 1)

    levels = []
    agg_rng = np.random.default_rng(ss.spawn(1)[0])

    def merge(node, path="root"):
        if node.is_leaf:
            fs = [leaves[s] for s in node.indices]
        else:
            fs = [merge(c, f"{path}/{k}") for k, c in enumerate(node.children)]
        f = fs[0]
        for g in fs[1:]:
            try:
                f = agglomerate(f, g, eps, rng=agg_rng, counter=counter)
            except Exception as exc:
                raise RuntimeError(f"agglomeration failed at {path}: {exc}") from exc
        if len(fs) > 1:
            levels.append({"level": node.level, "rank": f.rank,
                           "child_ranks": tuple(x.rank for x in fs), "path": path})
        return f

    F = merge(tree)
    F.method = f"recursive-{method}"
    if final_recompress and schedule:
        F = recompress(F, eps_d / 2, counter=counter)
    F.tol = eps_d
    F.info.update(stage_tol=eps, levels=L)
    return F, levels


def level_table(levels, leaf_ranks=None):
    """Aggregate per-level ranks and ``delta = r_l / (2 r_{l+1})`` (mean child rank)."""
    out = {}
    for row in levels:
        d = out.setdefault(row["level"], {"nodes": 0, "rank": 0, "child_rank": 0, "max_delta": 0.0})
        d["nodes"] += 1
        d["rank"] += row["rank"]
        d["child_rank"] += sum(row["child_ranks"])
        denom = sum(row["child_ranks"])
        d["max_delta"] = max(d["max_delta"], row["rank"] / denom if denom else 0.0)
    for d in out.values():
        d["delta"] = d["rank"] / d["child_rank"] if d["child_rank"] else 0.0
    return dict(sorted(out.items()))


_MAGIC = b"HYDOTLR1"
_TAG = 32


def write_factor(path, f: LowRankFactor, eps_d: float | None = None) -> Path:
    """Little-endian file: magic, ``M N r`` (int64), ``eps_d`` (f64), 32-byte method
    tag, permutation length and entries (int64), then ``U`` and ``V`` row-major f64."""
    path = Path(path)
    M, N = f.shape
    perm = np.arange(M, dtype="<i8") if f.perm is None else f.perm.astype("<i8")
    tag = f.method.encode("ascii")[:_TAG].ljust(_TAG, b"\0")
    with path.open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<qqqd", M, N, f.rank, f.tol if eps_d is None else eps_d))
        fh.write(tag)
        fh.write(struct.pack("<q", perm.size))
        fh.write(perm.tobytes())
        fh.write(np.ascontiguousarray(f.U, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(f.V, dtype="<f8").tobytes())
    return path


def read_factor(path) -> LowRankFactor:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a factor file")
    off = 8
    M, N, r, eps = struct.unpack_from("<qqqd", raw, off)
    off += 32
    tag = raw[off: off + _TAG].rstrip(b"\0").decode("ascii")
    off += _TAG
    (plen,) = struct.unpack_from("<q", raw, off)
    off += 8
    perm = np.frombuffer(raw, "<i8", plen, off).copy()
    off += 8 * plen
    U = np.frombuffer(raw, "<f8", M * r, off).reshape(M, r).copy()
    off += 8 * M * r
    V = np.frombuffer(raw, "<f8", N * r, off).reshape(N, r).copy()
    ident = plen == M and np.array_equal(perm, np.arange(M))
    return LowRankFactor(U, V, eps, tag, None if ident else perm)
