"""Block-diagonal SDP data structure, embedded interior-point solver,
and SDPA sparse-format import/export.

Standard form handled here:

    (P)  min  <C, X> + c_free . u
         s.t. <A_j, X> + F_j . u = b_j   (j = 1..m),
              X  block-diagonal PSD (negative block dims are diagonal/LP
              blocks), u free scalar vector,
    (D)  max  b . y
         s.t. A*(y) + S = C, S block PSD;  F^T y = c_free.

The free block (nfree > 0) extends the plain standard form; the moment /
SOS hierarchy needs it because polynomial coefficients are sign-free and
splitting them into LP pairs leaves the dual with an empty interior.
Problems without free variables behave exactly as the plain form.

Solver: primal-dual path following with the HKM search direction and a
Mehrotra predictor-corrector.  The Schur complement is assembled and
Cholesky-factored densely per connected group of constraints (groups
that share no matrix block decouple); constraints touching only free
variables join the free-variable saddle system.  Everything is
deterministic given identical inputs.

SDPA ".dat-s" export encodes this problem so the file's dual pair
matches ours with the objective negated: F_0 := -C, F_i := A_i, c := b.
An external solver run on the file reports -(our optimum); the optimal
matrices coincide.  Free variables are exported as split LP pairs
(u = u+ - u-) in one extra diagonal block.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

__all__ = [
    "SDPProblem",
    "SDPSolution",
    "SDPBuilder",
    "SDPError",
    "SchurFailureError",
    "solve",
    "export_sdpa",
    "parse_sdpa",
]


class SDPError(ValueError):
    pass


class SchurFailureError(SDPError):
    """Numerical failure while factoring the Schur complement."""


@dataclass
class SDPProblem:
    """Sparse block SDP in the standard form documented in this module.

    Constraint coefficients are stored as parallel COO arrays over the
    upper triangle (i <= j); an entry (blk, i, j, v) with i < j stands
    for the symmetric pair, so <A, X> counts it twice.
    """

    blocks: tuple                  # int per block; negative = diagonal block
    b: np.ndarray                  # (m,)
    C: tuple                       # dense (d,d) per PSD block, (d,) per diag
    con: np.ndarray                # entry -> constraint index
    blk: np.ndarray                # entry -> block index
    ii: np.ndarray                 # entry -> row (0-based, ii <= jj)
    jj: np.ndarray
    vv: np.ndarray
    nfree: int = 0
    F: object = None               # scipy.sparse (m, nfree) or None
    c_free: np.ndarray = None
    meta: dict = field(default_factory=dict)

    @property
    def m(self):
        return len(self.b)

    def __post_init__(self):
        self.blocks = tuple(int(d) for d in self.blocks)
        self.b = np.asarray(self.b, dtype=float)
        for arr in ("con", "blk", "ii", "jj"):
            setattr(self, arr, np.asarray(getattr(self, arr), dtype=np.int64))
        self.vv = np.asarray(self.vv, dtype=float)
        if not (len(self.con) == len(self.blk) == len(self.ii) == len(self.jj)
                == len(self.vv)):
            raise SDPError("ragged constraint entry arrays")
        if len(self.con) and (self.con.min() < 0 or self.con.max() >= self.m):
            raise SDPError("constraint index out of range")
        for e in range(len(self.con)):
            d = abs(self.blocks[self.blk[e]])
            if not (0 <= self.ii[e] <= self.jj[e] < d):
                raise SDPError(f"entry {e}: bad indices for block dim {d}")
            if self.blocks[self.blk[e]] < 0 and self.ii[e] != self.jj[e]:
                raise SDPError(f"entry {e}: off-diagonal entry in diagonal block")
        if len(self.C) != len(self.blocks):
            raise SDPError("objective needs one block matrix per block")
        C = []
        for d, Cb in zip(self.blocks, self.C):
            Cb = np.asarray(Cb, dtype=float)
            if d > 0:
                if Cb.shape != (d, d):
                    raise SDPError(f"objective block shape {Cb.shape} != ({d},{d})")
                if not np.allclose(Cb, Cb.T, atol=0, rtol=0):
                    raise SDPError("objective block not symmetric")
            else:
                if Cb.shape != (-d,):
                    raise SDPError("diagonal objective block has wrong length")
            C.append(Cb)
        self.C = tuple(C)
        if self.nfree:
            self.F = sp.csr_matrix(self.F)
            if self.F.shape != (self.m, self.nfree):
                raise SDPError(f"F has shape {self.F.shape}, expected "
                               f"({self.m}, {self.nfree})")
            self.c_free = np.asarray(self.c_free, dtype=float)
            if self.c_free.shape != (self.nfree,):
                raise SDPError("c_free has wrong length")
        else:
            self.F = None
            self.c_free = np.zeros(0)


@dataclass
class SDPSolution:
    status: str                    # optimal | near_optimal | infeasible |
    #                                unbounded | max_iter | schur_failure
    X_blocks: list
    y: np.ndarray
    S_blocks: list
    primal_obj: float
    dual_obj: float
    iterations: int
    free: np.ndarray = None        # values of the free variables
    rel_gap: float = np.inf
    primal_res: float = np.inf
    dual_res: float = np.inf

    def min_block_eig(self):
        """Smallest eigenvalue over all primal/dual blocks (Cholesky-backed
        iterates stay PSD up to round-off; floor is checked in tests)."""
        vals = []
        for M in list(self.X_blocks) + list(self.S_blocks):
            M = np.asarray(M)
            if M.ndim == 1:
                vals.append(M.min() if M.size else 0.0)
            elif M.size:
                vals.append(float(np.linalg.eigvalsh(M).min()))
        return min(vals) if vals else 0.0


class SDPBuilder:
    """Incremental assembly helper used by the hierarchy builders."""

    def __init__(self):
        self._blocks = []
        self._C = []
        self._b = []
        self._entries = []          # (con, blk, i, j, v)
        self._free_entries = []     # (con, col, v)
        self._cfree = []
        self.meta = {}

    def add_psd_block(self, dim):
        self._blocks.append(int(dim))
        self._C.append(np.zeros((dim, dim)))
        return len(self._blocks) - 1

    def add_diag_block(self, dim):
        self._blocks.append(-int(dim))
        self._C.append(np.zeros(dim))
        return len(self._blocks) - 1

    def add_free(self, n=1, cost=None):
        base = len(self._cfree)
        self._cfree.extend([0.0] * n)
        if cost is not None:
            for k, c in enumerate(np.atleast_1d(cost)):
                self._cfree[base + k] = float(c)
        return base

    def set_free_cost(self, col, cost):
        self._cfree[col] = float(cost)

    def new_constraint(self, rhs=0.0):
        self._b.append(float(rhs))
        return len(self._b) - 1

    def set_rhs(self, con, rhs):
        self._b[con] = float(rhs)

    def add_entry(self, con, blk, i, j, v):
        if v != 0.0:
            if i > j:
                i, j = j, i
            self._entries.append((con, blk, i, j, float(v)))

    def add_free_entry(self, con, col, v):
        if v != 0.0:
            self._free_entries.append((con, col, float(v)))

    def set_objective_entry(self, blk, i, j, v):
        Cb = self._C[blk]
        if Cb.ndim == 1:
            Cb[i] = v
        else:
            Cb[i, j] = v
            Cb[j, i] = v

    def build(self):
        m = len(self._b)
        nfree = len(self._cfree)
        if self._entries:
            ent = sorted(self._entries)
            # merge duplicate coordinates
            merged = []
            for e in ent:
                if merged and merged[-1][:4] == e[:4]:
                    prev = merged.pop()
                    merged.append(prev[:4] + (prev[4] + e[4],))
                else:
                    merged.append(e)
            merged = [e for e in merged if e[4] != 0.0]
            con, blk, ii, jj, vv = (np.array(x) for x in zip(*merged)) if merged \
                else (np.zeros(0, dtype=np.int64),) * 4 + (np.zeros(0),)
        else:
            con = blk = ii = jj = np.zeros(0, dtype=np.int64)
            vv = np.zeros(0)
        F = None
        if nfree:
            if self._free_entries:
                r, c, v = zip(*self._free_entries)
            else:
                r, c, v = (), (), ()
            F = sp.csr_matrix((v, (r, c)), shape=(m, nfree))
            F.sum_duplicates()
        return SDPProblem(
            blocks=tuple(self._blocks), b=np.array(self._b, dtype=float),
            C=tuple(self._C), con=con, blk=blk, ii=ii, jj=jj, vv=vv,
            nfree=nfree, F=F, c_free=np.array(self._cfree, dtype=float),
            meta=dict(self.meta))


# ---------------------------------------------------------------------------
# solver internals
# ---------------------------------------------------------------------------

class _BlockData:
    """Per-block constraint data prepared for the solver."""

    def __init__(self, dim, diag, rows, Afull, C):
        self.dim = dim
        self.diag = diag            # True for diagonal/LP block
        self.rows = rows            # global constraint indices touching it
        self.Afull = Afull          # csr: (len(rows), dim*dim) full-symmetric
        #                             vectorized entries (diag: (len(rows), dim))
        self.C = C


def _prepare_blocks(p):
    nb = len(p.blocks)
    per = [[] for _ in range(nb)]
    for e in range(len(p.con)):
        per[p.blk[e]].append(e)
    out = []
    for bidx, (d, es) in enumerate(zip(p.blocks, (per[i] for i in range(nb)))):
        diag = d < 0
        d = abs(d)
        es = np.array(es, dtype=np.int64)
        if len(es) == 0:
            rows = np.zeros(0, dtype=np.int64)
            Afull = sp.csr_matrix((0, d if diag else d * d))
            out.append(_BlockData(d, diag, rows, Afull, p.C[bidx]))
            continue
        cons = p.con[es]
        rows = np.unique(cons)
        rmap = {r: k for k, r in enumerate(rows)}
        rloc = np.array([rmap[c] for c in cons])
        if diag:
            cols = p.ii[es]
            vals = p.vv[es]
            Afull = sp.csr_matrix((vals, (rloc, cols)), shape=(len(rows), d))
        else:
            i_, j_, v_ = p.ii[es], p.jj[es], p.vv[es]
            rr = np.concatenate([rloc, rloc[i_ != j_]])
            cc = np.concatenate([i_ * d + j_, (j_ * d + i_)[i_ != j_]])
            vv = np.concatenate([v_, v_[i_ != j_]])
            Afull = sp.csr_matrix((vv, (rr, cc)), shape=(len(rows), d * d))
        Afull.sum_duplicates()
        out.append(_BlockData(d, diag, rows, Afull, p.C[bidx]))
    return out


def _detect_groups(p, blocks):
    """Partition constraints into groups sharing matrix blocks.

    Returns (groups, pure_free_rows): groups is a list of (row array,
    block index list); rows touching no block form the saddle rows.
    """
    m = p.m
    parent = np.arange(m + len(blocks))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a, c):
        ra, rc = find(a), find(c)
        if ra != rc:
            parent[rc] = ra

    touched = np.zeros(m, dtype=bool)
    for k, bd in enumerate(blocks):
        node = m + k
        for r in bd.rows:
            union(node, r)
            touched[r] = True
    roots = {}
    for r in range(m):
        if touched[r]:
            roots.setdefault(find(r), []).append(r)
    groups = []
    for root, rows in sorted(roots.items()):
        rows = np.array(sorted(rows), dtype=np.int64)
        blks = [k for k, bd in enumerate(blocks)
                if len(bd.rows) and find(m + k) == root]
        groups.append((rows, blks))
    pure_free = np.array([r for r in range(m) if not touched[r]],
                         dtype=np.int64)
    return groups, pure_free


def _sym(M):
    return 0.5 * (M + M.transpose(0, 2, 1)) if M.ndim == 3 else 0.5 * (M + M.T)


def _max_step(M, dM, diag):
    """Largest alpha with M + alpha*dM staying in the cone (1.0 cap)."""
    if diag:
        neg = dM < 0
        if not np.any(neg):
            return 1.0
        return min(1.0, float(np.min(-M[neg] / dM[neg])))
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        return 0.0
    W = sla.solve_triangular(L, dM, lower=True)
    W = sla.solve_triangular(L, W.T, lower=True)
    lam = np.linalg.eigvalsh(_sym(W)).min()
    if lam >= 0:
        return 1.0
    return min(1.0, -1.0 / lam)


_CHUNK = 256


def solve(p, tol=1e-7, max_iter=200, verbose=False):
    """Primal-dual HKM interior-point solve of an SDPProblem.

    Returns an SDPSolution; status "optimal" certifies relative duality
    gap and feasibility residuals below tol.  Deterministic.
    """
    blocks = _prepare_blocks(p)
    groups, pure_free = _detect_groups(p, blocks)
    m, nf = p.m, p.nfree
    F = p.F if nf else sp.csr_matrix((m, 0))
    cf = p.c_free if nf else np.zeros(0)
    b = p.b

    # pure-free rows must involve free variables (or be void 0 = 0 rows)
    if len(pure_free):
        if nf == 0 and np.any(b[pure_free] != 0):
            return SDPSolution("infeasible", [], np.zeros(m), [],
                               np.inf, -np.inf, 0, np.zeros(0))
    F0 = F[pure_free] if len(pure_free) else sp.csr_matrix((0, nf))
    keep_zero = None
    if len(pure_free):
        void = np.array((np.abs(F0).sum(axis=1)).ravel() == 0).ravel()
        if np.any(void & (np.abs(b[pure_free]) > 0)):
            return SDPSolution("infeasible", [], np.zeros(m), [], np.inf,
                               -np.inf, 0, np.zeros(0))
        keep_zero = ~void
        pure_free = pure_free[keep_zero]
        F0 = F[pure_free]
    n0 = len(pure_free)

    # row scaling (equilibration) over [A | F]
    rnorm = np.zeros(m)
    for bd in blocks:
        if len(bd.rows):
            rnorm[bd.rows] += np.array(bd.Afull.multiply(bd.Afull)
                                       .sum(axis=1)).ravel()
    if nf:
        rnorm += np.array(F.multiply(F).sum(axis=1)).ravel()
    rnorm = np.sqrt(rnorm)
    dscale = 1.0 / np.where(rnorm > 0, rnorm, 1.0)
    b = b * dscale
    D = sp.diags(dscale)
    F = (D @ F).tocsr() if nf else F
    for bd in blocks:
        if len(bd.rows):
            bd.Afull = sp.diags(dscale[bd.rows]) @ bd.Afull

    # pure-free rows can be linearly dependent (for the hierarchy, the
    # top-degree occupation moments are genuinely non-unique): keep a
    # maximal independent subset via pivoted QR; redundant rows with a
    # consistent right-hand side are implied by the kept ones.
    if n0:
        F0d = F[pure_free].toarray()
        _, R, piv = sla.qr(F0d.T, mode="economic", pivoting=True)
        diag = np.abs(np.diag(R))
        if diag.size and diag[0] > 0:
            rank = int(np.sum(diag > max(F0d.shape) * np.finfo(float).eps
                              * diag[0]))
        else:
            rank = 0
        pure_free = pure_free[np.sort(piv[:rank])]
        n0 = rank
    F0 = F[pure_free] if n0 else sp.csr_matrix((0, nf))

    # static per-group pieces of F
    Fg_csr = [F[rows] for rows, _ in groups] if nf else []
    gcols = [np.unique(Fg.tocoo().col) if Fg.nnz else np.zeros(0, dtype=int)
             for Fg in Fg_csr]
    Fg_dense = [Fg[:, cols].toarray() if len(cols) else None
                for Fg, cols in zip(Fg_csr, gcols)]

    norm_b = 1.0 + np.linalg.norm(b)
    norm_C = 1.0 + np.sqrt(sum(float((bd.C ** 2).sum()) for bd in blocks)
                           + float(cf @ cf))

    # starting point
    entry_scale = max((float(np.max(np.abs(bd.Afull.data)))
                       for bd in blocks if bd.Afull.nnz), default=1.0)
    tau_p = 10.0 * max(1.0, np.max(np.abs(b)) if m else 1.0)
    tau_d = 10.0 * max(1.0, entry_scale,
                       max((float(np.max(np.abs(bd.C))) for bd in blocks
                            if bd.C.size), default=1.0))
    X = [np.full(bd.dim, tau_p) if bd.diag else tau_p * np.eye(bd.dim)
         for bd in blocks]
    S = [np.full(bd.dim, tau_d) if bd.diag else tau_d * np.eye(bd.dim)
         for bd in blocks]
    y = np.zeros(m)
    u = np.zeros(nf)

    ncone = sum(bd.dim for bd in blocks)
    best = None

    def A_of(mats):
        out = np.zeros(m)
        for bd, Mb in zip(blocks, mats):
            if len(bd.rows):
                out[bd.rows] += bd.Afull @ (Mb if bd.diag else Mb.ravel())
        return out

    def Astar(yv):
        out = []
        for bd in blocks:
            if len(bd.rows):
                v = bd.Afull.T @ yv[bd.rows]
                out.append(v if bd.diag else v.reshape(bd.dim, bd.dim))
            else:
                out.append(np.zeros(bd.dim) if bd.diag
                           else np.zeros((bd.dim, bd.dim)))
        return out

    status = "max_iter"
    it = 0
    for it in range(1, max_iter + 1):
        # residuals and merit quantities
        rp = b - A_of(X) - (F @ u if nf else 0.0)
        Ast = Astar(y)
        Rd = [bd.C - As - Sb for bd, As, Sb in zip(blocks, Ast, S)]
        rf = cf - (F.T @ y) if nf else np.zeros(0)
        gap = sum(float(np.vdot(Xb, Sb)) for Xb, Sb in zip(X, S))
        mu = gap / max(ncone, 1)
        pobj = sum(float(np.vdot(bd.C, Xb)) for bd, Xb in zip(blocks, X)) \
            + float(cf @ u)
        dobj = float(b @ y)
        relgap = abs(pobj - dobj) / (1 + abs(pobj) + abs(dobj))
        cgap = gap / (1 + abs(pobj) + abs(dobj))
        pres = np.linalg.norm(rp) / norm_b
        dres = np.sqrt(sum(float((R ** 2).sum()) for R in Rd)
                       + float(rf @ rf)) / norm_C
        merit = max(relgap, cgap, pres, dres)
        if best is None or merit < best[0]:
            if best is None or merit < 0.98 * best[0]:
                last_improve = it
            best = (merit, [Xb.copy() for Xb in X], y.copy(),
                    [Sb.copy() for Sb in S], pobj, dobj, u.copy(), it,
                    relgap, pres, dres)
        if it - last_improve >= 15:
            # no meaningful progress; the best iterate is what we get
            break
        if verbose:
            print(f"  it {it:3d}  pobj {pobj: .9e}  dobj {dobj: .9e}  "
                  f"gap {relgap:.2e} cgap {cgap:.2e} pres {pres:.2e} dres {dres:.2e}")
        if merit <= tol:
            status = "optimal"
            break
        # divergence heuristics (hierarchy problems are feasible by
        # construction; these catch hand-made pathological inputs)
        if dobj > 1e8 * norm_b * tau_p and dres <= 1e-6:
            status = "infeasible"
            break
        if pobj < -1e8 * norm_C * tau_p and pres <= 1e-6:
            status = "unbounded"
            break
        if not np.isfinite(merit) or mu > 1e16:
            status = "schur_failure"
            break

        # factorizations of the current iterate
        Sinv, Xc = [], []
        chol_ok = True
        for bd, Sb in zip(blocks, S):
            if bd.diag:
                Sinv.append(1.0 / Sb)
            else:
                try:
                    Lc = np.linalg.cholesky(Sb)
                except np.linalg.LinAlgError:
                    chol_ok = False
                    break
                Sinv.append(sla.cho_solve((Lc, True), np.eye(bd.dim)))
        if not chol_ok:
            status = "schur_failure"
            break

        # Schur complement per group
        Hs = []
        for rows, blks in groups:
            Hg = np.zeros((len(rows), len(rows)))
            lmap = {r: k for k, r in enumerate(rows)}
            for bi in blks:
                bd = blocks[bi]
                loc = np.array([lmap[r] for r in bd.rows])
                if bd.diag:
                    w = X[bi] * Sinv[bi]
                    Aw = bd.Afull.multiply(w)          # (nr, d)
                    Hb = (Aw @ bd.Afull.T).toarray()
                    Hg[np.ix_(loc, loc)] += Hb
                else:
                    d = bd.dim
                    nr = len(bd.rows)
                    for lo in range(0, nr, _CHUNK):
                        hi = min(nr, lo + _CHUNK)
                        Ad = np.asarray(bd.Afull[lo:hi].todense()) \
                            .reshape(hi - lo, d, d)
                        K = Sinv[bi][None, :, :] @ Ad @ X[bi][None, :, :]
                        K = _sym(K)
                        Hb = bd.Afull @ K.reshape(hi - lo, d * d).T
                        Hg[np.ix_(loc, loc[lo:hi])] += Hb
            Hs.append(Hg)

        def factor_group(Hg):
            base = np.max(np.abs(np.diag(Hg))) if Hg.size else 1.0
            lam = 1e-14 * max(base, 1.0)
            for attempt in range(4):
                try:
                    return sla.cho_factor(Hg + lam * np.eye(len(Hg)),
                                          lower=True, check_finite=False)
                except np.linalg.LinAlgError:
                    lam *= 1e3
            warnings.warn("rank-deficient Schur group; least-squares fallback")
            return None

        chols = []
        for Hg in Hs:
            c = factor_group(Hg)
            chols.append((c, Hg))

        def group_solve(k, R):
            c, Hg = chols[k]
            if c is not None:
                return sla.cho_solve(c, R, check_finite=False)
            return np.linalg.lstsq(Hg, R, rcond=None)[0]

        # free-variable saddle preparation:   [K  F0^T] [du ]   [q]
        #                                     [F0  0  ] [dy0] = [r0]
        # with K = sum_g Fg^T Hg^{-1} Fg over positive groups (dense
        # solves restricted to the columns each group touches).
        if nf:
            K = np.zeros((nf, nf))
            HinvFg = []
            for k in range(len(groups)):
                cols = gcols[k]
                if len(cols) == 0:
                    HinvFg.append(None)
                    continue
                Z = group_solve(k, Fg_dense[k])
                HinvFg.append(Z)
                K[np.ix_(cols, cols)] += Fg_csr[k][:, cols].T @ Z
            K = 0.5 * (K + K.T)
            F0d = F0.toarray() if n0 else np.zeros((0, nf))
            Ksad = np.block([[K, F0d.T], [F0d, np.zeros((n0, n0))]]) \
                if n0 else K
            sad_lu = None
            if Ksad.size:
                with warnings.catch_warnings():
                    warnings.simplefilter("error", sla.LinAlgWarning)
                    try:
                        sad_lu = sla.lu_factor(Ksad, check_finite=False)
                    except (np.linalg.LinAlgError, sla.LinAlgWarning):
                        sad_lu = None
                if sad_lu is not None and not np.all(np.isfinite(sad_lu[0])):
                    sad_lu = None

        def newton_once(rhs1, rhs2):
            dy = np.zeros(m)
            if nf:
                q = -rhs2.copy()
                tg = []
                for k, (rows, _) in enumerate(groups):
                    t = group_solve(k, rhs1[rows])
                    tg.append(t)
                    q += Fg_csr[k].T @ t
                rhs_s = np.concatenate([q, rhs1[pure_free]]) if n0 else q
                if sad_lu is not None:
                    sol = sla.lu_solve(sad_lu, rhs_s, check_finite=False)
                else:
                    sol = np.linalg.lstsq(Ksad, rhs_s, rcond=None)[0] \
                        if Ksad.size else rhs_s
                du = sol[:nf]
                if n0:
                    # saddle was symmetrized with z = -dy0
                    dy[pure_free] = -sol[nf:]
                for k, (rows, _) in enumerate(groups):
                    cols = gcols[k]
                    dy[rows] = tg[k] - (HinvFg[k] @ du[cols]
                                        if len(cols) else 0.0)
            else:
                du = np.zeros(0)
                for k, (rows, _) in enumerate(groups):
                    dy[rows] = group_solve(k, rhs1[rows])
            return dy, du

        def kkt_residual(dy, du, rhs1, rhs2):
            r1 = rhs1.copy()
            for k, (rows, _) in enumerate(groups):
                r1[rows] -= Hs[k] @ dy[rows]
            if nf:
                r1 -= F @ du
                r2 = rhs2 - F.T @ dy
            else:
                r2 = rhs2
            return r1, r2

        def solve_newton(rhs1, rhs2, refine=4):
            """[H F; F^T 0] (with pure-free rows) -> (dy, du), with
            iterative refinement against the exact augmented system;
            keeps the best iterate if refinement stops contracting."""
            dy, du = newton_once(rhs1, rhs2)
            scale0 = np.linalg.norm(rhs1) + np.linalg.norm(rhs2) + 1e-300
            best_res, best = np.inf, (dy, du)
            for sweep in range(refine):
                if not (np.all(np.isfinite(dy)) and np.all(np.isfinite(du))):
                    break
                r1, r2 = kkt_residual(dy, du, rhs1, rhs2)
                res = np.linalg.norm(r1) + np.linalg.norm(r2)
                if verbose and verbose > 2:
                    print(f"        refine {sweep}: res {res / scale0:.2e}")
                if res < best_res:
                    best_res, best = res, (dy, du)
                if res <= 1e-13 * scale0 or res > 0.5 * best_res * 1e3:
                    break
                ddy, ddu = newton_once(r1, r2)
                if not (np.all(np.isfinite(ddy)) and np.all(np.isfinite(ddu))):
                    break
                dy = dy + ddy
                du = du + ddu
            r1, r2 = kkt_residual(dy, du, rhs1, rhs2)
            res = np.linalg.norm(r1) + np.linalg.norm(r2)
            if res < best_res:
                best_res, best = res, (dy, du)
            return best

        def direction(nu, extraX=None):
            """HKM direction toward X S = nu I (+ Mehrotra correction)."""
            rhs1 = rp.copy()
            for bi, bd in enumerate(blocks):
                if not len(bd.rows):
                    continue
                if bd.diag:
                    Z = nu * Sinv[bi] - X[bi] \
                        - X[bi] * Rd[bi] * Sinv[bi]
                    if extraX is not None:
                        Z -= extraX[bi] * Sinv[bi]
                    rhs1[bd.rows] -= bd.Afull @ Z
                else:
                    Z = nu * Sinv[bi] - X[bi] \
                        - _sym(X[bi] @ Rd[bi] @ Sinv[bi])
                    if extraX is not None:
                        Z -= _sym(extraX[bi] @ Sinv[bi])
                    rhs1[bd.rows] -= bd.Afull @ Z.ravel()
            dy, du = solve_newton(rhs1, rf)
            dAst = Astar(dy)
            dS = [R - dA for R, dA in zip(Rd, dAst)]
            dX = []
            for bi, bd in enumerate(blocks):
                if bd.diag:
                    Z = nu * Sinv[bi] - X[bi] - X[bi] * dS[bi] * Sinv[bi]
                    if extraX is not None:
                        Z -= extraX[bi] * Sinv[bi]
                else:
                    Z = nu * Sinv[bi] - X[bi] - _sym(X[bi] @ dS[bi] @ Sinv[bi])
                    if extraX is not None:
                        Z -= _sym(extraX[bi] @ Sinv[bi])
                dX.append(Z)
            return dX, dy, dS, du

        # predictor
        dXa, dya, dSa, dua = direction(0.0)
        if not (np.all(np.isfinite(dya)) and np.all(np.isfinite(dua))
                and all(np.all(np.isfinite(Z)) for Z in dXa)):
            status = "schur_failure"
            break
        ap = min((_max_step(Xb, dXb, bd.diag)
                  for Xb, dXb, bd in zip(X, dXa, blocks)), default=1.0)
        ad = min((_max_step(Sb, dSb, bd.diag)
                  for Sb, dSb, bd in zip(S, dSa, blocks)), default=1.0)
        ap, ad = 0.98 * ap, 0.98 * ad
        gap_aff = sum(float(np.vdot(Xb + ap * dXb, Sb + ad * dSb))
                      for Xb, dXb, Sb, dSb in zip(X, dXa, S, dSa))
        sigma = min(1.0, max(1e-8, (max(gap_aff, 0.0) / max(gap, 1e-300)) ** 3))
        if max(pres, dres) > 10.0 * cgap:
            # feasibility lags complementarity: keep centering
            sigma = max(sigma, 0.5)
        nu = sigma * mu

        # corrector with Mehrotra second-order term dXa @ dSa
        extraX = [dXb * dSb if bd.diag else dXb @ dSb
                  for bd, dXb, dSb in zip(blocks, dXa, dSa)]
        dX, dy, dS, du = direction(nu, extraX=extraX)
        if not (np.all(np.isfinite(dy)) and np.all(np.isfinite(du))
                and all(np.all(np.isfinite(Z)) for Z in dX)):
            dX, dy, dS, du = dXa, dya, dSa, dua
        ap = min((_max_step(Xb, dXb, bd.diag)
                  for Xb, dXb, bd in zip(X, dX, blocks)), default=1.0)
        ad = min((_max_step(Sb, dSb, bd.diag)
                  for Sb, dSb, bd in zip(S, dS, blocks)), default=1.0)
        ap, ad = min(1.0, 0.98 * ap), min(1.0, 0.98 * ad)
        if verbose and verbose > 1:
            dres_vec = A_of(dX) + (F @ du if nf else 0.0) - rp
            seg = np.zeros(m)
            for rows, _ in groups:
                seg[rows] = 1
            seg[pure_free] = 2
            print(f"      sigma {sigma:.2e} ap {ap:.3f} ad {ad:.3f} "
                  f"dir_res {np.linalg.norm(dres_vec) / norm_b:.2e} "
                  f"(grp {np.linalg.norm(dres_vec[seg == 1]):.1e} "
                  f"pf {np.linalg.norm(dres_vec[seg == 2]):.1e} "
                  f"drop {np.linalg.norm(dres_vec[seg == 0]):.1e}) "
                  f"sad_lu={'ok' if (not nf or sad_lu is not None) else 'FALLBACK'}")

        # defensive step: residuals must not blow up relative to the
        # current iterate (directions can be inexact in the endgame).
        # rp and Rd are linear in the step lengths, so candidate
        # residual norms reduce to precomputed quadratic scalars.
        q = A_of(dX) + (F @ du if nf else 0.0)
        p_aa = float(rp @ rp)
        p_ab = float(rp @ q)
        p_bb = float(q @ q)
        dAst = Astar(dy)
        d_aa = sum(float(np.vdot(R, R)) for R in Rd)
        d_ab = sum(float(np.vdot(R, G + dSb))
                   for R, G, dSb in zip(Rd, dAst, dS))
        d_bb = sum(float(np.vdot(G + dSb, G + dSb))
                   for G, dSb in zip(dAst, dS))
        if nf:
            Fty = F.T @ dy
            d_aa += float(rf @ rf)
            d_ab += float(rf @ Fty)
            d_bb += float(Fty @ Fty)

        def cand_feas(a_p, a_d):
            pr = np.sqrt(max(p_aa - 2 * a_p * p_ab + a_p * a_p * p_bb, 0.0)) \
                / norm_b
            dr = np.sqrt(max(d_aa - 2 * a_d * d_ab + a_d * a_d * d_bb, 0.0)) \
                / norm_C
            return pr, dr

        feas_now = max(pres, dres)
        for _ in range(8):
            pres_c, dres_c = cand_feas(ap, ad)
            if max(pres_c, dres_c) <= max(10.0 * feas_now, 0.1 * tol):
                break
            ap *= 0.5
            ad *= 0.5
        X = [Xb + ap * dXb for Xb, dXb in zip(X, dX)]
        S = [Sb + ad * dSb for Sb, dSb in zip(S, dS)]
        y = y + ad * dy
        u = u + ap * du

    merit, Xb_, yb_, Sb_, pobj_, dobj_, ub_, itb_, relgap_, pres_, dres_ = best
    if status in ("max_iter", "schur_failure") and merit <= 1e3 * tol:
        # endgame linear algebra gave out after reaching a certified
        # near-solution; report the best iterate honestly
        status = "near_optimal"
    if status == "optimal":
        Xb_, yb_, Sb_, pobj_, dobj_, ub_ = X, y, S, pobj, dobj, u
        itb_, relgap_, pres_, dres_ = it, relgap, pres, dres
    # unscale dual variables (rows were equilibrated)
    y_out = yb_ * dscale
    return SDPSolution(status=status, X_blocks=Xb_, y=y_out, S_blocks=Sb_,
                       primal_obj=pobj_, dual_obj=dobj_, iterations=itb_,
                       free=ub_, rel_gap=relgap_, primal_res=pres_,
                       dual_res=dres_)


# ---------------------------------------------------------------------------
# SDPA sparse format
# ---------------------------------------------------------------------------

def _fmt(v):
    return "%.16e" % v


def export_sdpa(p):
    """Serialize to SDPA sparse ".dat-s" text (byte-deterministic).

    Encoding: F_0 := -C, F_i := A_i, c := b; free variables become one
    extra diagonal block of split pairs.  See the module docstring for
    the sign convention.
    """
    lines = []
    blocks = list(p.blocks)
    nfree = p.nfree
    if nfree:
        blocks.append(-2 * nfree)
    lines.append(str(p.m))
    lines.append(str(len(blocks)))
    lines.append(" ".join(str(d) for d in blocks))
    lines.append(" ".join(_fmt(v) for v in p.b))

    ents = []
    # objective (matno 0): -C
    for bidx, Cb in enumerate(p.C):
        Cb = np.asarray(Cb)
        if Cb.ndim == 1:
            for i, v in enumerate(Cb):
                if v != 0.0:
                    ents.append((0, bidx + 1, i + 1, i + 1, -v))
        else:
            for i in range(Cb.shape[0]):
                for j in range(i, Cb.shape[1]):
                    if Cb[i, j] != 0.0:
                        ents.append((0, bidx + 1, i + 1, j + 1, -Cb[i, j]))
    if nfree:
        fb = len(blocks)
        for k, v in enumerate(p.c_free):
            if v != 0.0:
                ents.append((0, fb, k + 1, k + 1, -v))
                ents.append((0, fb, nfree + k + 1, nfree + k + 1, v))
    # constraints
    order = np.lexsort((p.jj, p.ii, p.blk, p.con))
    for e in order:
        ents.append((int(p.con[e]) + 1, int(p.blk[e]) + 1,
                     int(p.ii[e]) + 1, int(p.jj[e]) + 1, float(p.vv[e])))
    if nfree:
        fb = len(blocks)
        Fc = p.F.tocoo()
        fo = np.lexsort((Fc.col, Fc.row))
        for k in fo:
            r, c, v = int(Fc.row[k]), int(Fc.col[k]), float(Fc.data[k])
            if v != 0.0:
                ents.append((r + 1, fb, c + 1, c + 1, v))
                ents.append((r + 1, fb, nfree + c + 1, nfree + c + 1, -v))
    ents.sort(key=lambda t: (t[0], t[1], t[2], t[3]))
    for mat, blk, i, j, v in ents:
        lines.append(f"{mat} {blk} {i} {j} {_fmt(v)}")
    return "\n".join(lines) + "\n"


def parse_sdpa(text):
    """Parse SDPA sparse ".dat-s" content (inverse of export on problems
    without free variables).  Comment lines starting with " or * are
    tolerated."""
    raw = text.splitlines()
    lines = []
    for ln_no, ln in enumerate(raw, start=1):
        s = ln.strip()
        if not s or s.startswith('"') or s.startswith("*"):
            continue
        lines.append((ln_no, s))
    if len(lines) < 4:
        raise SDPError("truncated SDPA file: need m, nblocks, block "
                       "structure and the b vector")

    def ints(s, ln_no, what):
        s = s.replace(",", " ").replace("{", " ").replace("}", " ") \
            .replace("(", " ").replace(")", " ")
        try:
            return [int(float(tok)) for tok in s.split()]
        except ValueError:
            raise SDPError(f"line {ln_no}: malformed {what}: {s!r}") from None

    ln_no, s = lines[0]
    m = ints(s, ln_no, "constraint count")[0]
    ln_no, s = lines[1]
    nblocks = ints(s, ln_no, "block count")[0]
    ln_no, s = lines[2]
    bstruct = ints(s, ln_no, "block structure")
    if len(bstruct) != nblocks:
        raise SDPError(f"line {ln_no}: expected {nblocks} block sizes, "
                       f"got {len(bstruct)}")
    ln_no, s = lines[3]
    s = s.replace(",", " ").replace("{", " ").replace("}", " ")
    try:
        b = np.array([float(tok) for tok in s.split()])
    except ValueError:
        raise SDPError(f"line {ln_no}: malformed b vector") from None
    if len(b) != m:
        raise SDPError(f"line {ln_no}: expected {m} entries in b, got {len(b)}")

    C = [np.zeros((d, d)) if d > 0 else np.zeros(-d) for d in bstruct]
    con, blk, ii, jj, vv = [], [], [], [], []
    for ln_no, s in lines[4:]:
        toks = s.replace(",", " ").split()
        if len(toks) != 5:
            raise SDPError(f"line {ln_no}: expected 'matno blkno i j value'")
        try:
            mat, bl, i, j = (int(float(t)) for t in toks[:4])
            v = float(toks[4])
        except ValueError:
            raise SDPError(f"line {ln_no}: malformed entry") from None
        if not (0 <= mat <= m):
            raise SDPError(f"line {ln_no}: matrix number {mat} out of range")
        if not (1 <= bl <= nblocks):
            raise SDPError(f"line {ln_no}: block number {bl} out of range")
        d = abs(bstruct[bl - 1])
        if i > j:
            i, j = j, i
        if not (1 <= i <= j <= d):
            raise SDPError(f"line {ln_no}: indices ({i},{j}) out of range "
                           f"for block dim {d}")
        if bstruct[bl - 1] < 0 and i != j:
            raise SDPError(f"line {ln_no}: off-diagonal entry in diagonal block")
        if mat == 0:
            Cb = C[bl - 1]
            if Cb.ndim == 1:
                Cb[i - 1] = -v
            else:
                Cb[i - 1, j - 1] = -v
                Cb[j - 1, i - 1] = -v
        else:
            con.append(mat - 1)
            blk.append(bl - 1)
            ii.append(i - 1)
            jj.append(j - 1)
            vv.append(v)
    return SDPProblem(blocks=tuple(bstruct), b=b, C=tuple(C),
                      con=np.array(con, dtype=np.int64),
                      blk=np.array(blk, dtype=np.int64),
                      ii=np.array(ii, dtype=np.int64),
                      jj=np.array(jj, dtype=np.int64),
                      vv=np.array(vv))
