"""Order-k truncations of the ROA measure LP and its SOS dual, as
explicit SDPs, plus certificate extraction.

Outer approximation, SOS side (decision variables: coefficients of
v(t,x), w(x) of degree <= 2k plus one Gram matrix per SOS multiplier):

    -Lv          = p + q0 * t(T-t) + sum_i q_i g_i^X      on [0,T] x X
    w - v(0,.) - 1 = p0 + sum_i q0_i g_i^X                on X
    v(T,.)       = pT + sum_j qT_j g_j^XT                 on X_T
    w            = s0 + sum_i s0_i g_i^X                  on X
    minimize     w . h       (h = Lebesgue moments of the state box)

Outer approximation, moment side (variables: truncated moment vectors of
the average occupation measure on [0,T] x X, the initial measure and its
slack on X, and the terminal measure on X_T):

    maximize mass(mu0)
    s.t.  Liouville equation on all test monomials t^b x^a, deg <= 2k,
          mu0 + mu0_hat = lambda (moment-wise against the box moments),
          moment and localizing matrices of every measure PSD.

Both sides are assembled independently and are exact SDP duals of each
other under the conventions fixed here; the per-order duality gap is a
test, not an assumption.  Multiplier degrees obey deg(q_i g_i) <= 2k;
when deg f > 1 the flow identity carries coefficients up to degree
2k + deg f - 1 whose right-hand side is zero (equivalently, moments of
the occupation measure up to that degree enter only the Liouville
rows).  Coordinates are affinely mapped so every box becomes [-1,1]^n
before assembly; certificates and objectives are mapped back.

The inner approximation applies the same machinery to the complement:
Lv <= 0 on [0,T] x X, v(T,.) >= 0 on X minus the target ball,
v(t,.) >= 0 on every box face (imposed in the face's quotient
coordinates, which is equivalent to a free-sign multiplier on the face
polynomial), and the inner set is { x : v(0,x) < 0 }.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import is_tangency_certified
from .poly import NEG_INF, Poly, grlex_key, mono_mul, monomials_upto
from .sdp import SDPBuilder

__all__ = [
    "MomentBasis",
    "Certificate",
    "HierarchyError",
    "CertificateError",
    "lebesgue_box_moments",
    "build_outer_sos",
    "build_outer_moment",
    "build_inner_sos",
    "extract_certificate",
]

FEAS_SLACK = 1e-6      # post-solve certificate feasibility slack


class HierarchyError(ValueError):
    pass


class CertificateError(RuntimeError):
    pass


class MomentBasis:
    """Bijection between monomials of degree <= max_deg and 0..N-1,
    graded-lexicographic."""

    def __init__(self, nvars, max_deg):
        self.nvars = nvars
        self.max_deg = max_deg
        self.monos = monomials_upto(nvars, max_deg)
        self.index = {m: i for i, m in enumerate(self.monos)}
        assert len(self.monos) == math.comb(nvars + max_deg, max_deg)

    def __len__(self):
        return len(self.monos)

    def idx(self, mono):
        return self.index[tuple(mono)]


def lebesgue_box_moments(box, max_deg):
    """Moments of the Lebesgue measure of a box, per MomentBasis order:
    h_a = prod_i (b_i^(a_i+1) - a_i^(a_i+1)) / (a_i + 1)."""
    box = [(float(a), float(b)) for a, b in box]
    for a, b in box:
        if not a < b:
            raise HierarchyError(f"degenerate box interval [{a}, {b}]")
    basis = MomentBasis(len(box), max_deg)
    h = np.empty(len(basis))
    for i, m in enumerate(basis.monos):
        v = 1.0
        for (a, b), e in zip(box, m):
            v *= (b ** (e + 1) - a ** (e + 1)) / (e + 1)
        h[i] = v
    return h


# ---------------------------------------------------------------------------
# scaled assembly context
# ---------------------------------------------------------------------------

def _normalize(p):
    if not p.terms:
        return p
    c = max(abs(v) for v in p.terms.values())
    return p.scale(1.0 / c)


class _Context:
    """System mapped onto the box [-1,1]^n, shared by all builders."""

    def __init__(self, sys, k, time_scale):
        if k < 1:
            raise HierarchyError("order k must be >= 1")
        if "t" in sys.var_names:
            raise HierarchyError("state variable named 't' collides with time")
        if sys.equalities and not is_tangency_certified(sys):
            raise HierarchyError(
                "equality constraints present but tangency certification "
                "failed; the manifold is not flow-invariant")
        self.sys = sys
        self.k = k
        self.time_scale = bool(time_scale)
        self.names = sys.var_names
        self.tx_names = ("t",) + self.names
        n = sys.n
        self.mid = np.array([(a + b) / 2 for a, b in sys.X.box])
        self.rad = np.array([(b - a) / 2 for a, b in sys.X.box])
        self.jacobian = float(np.prod(self.rad))
        self.T_eff = 1.0 if self.time_scale else sys.T

        to_scaled = {nm: float(m) + float(r) * Poly.variable(nm, self.names)
                     for nm, m, r in zip(self.names, self.mid, self.rad)}

        def scale_poly(p):
            return p.substitute(to_scaled, target_vars=self.names)

        f = [scale_poly(fi).scale(1.0 / r)
             for fi, r in zip(sys.f, self.rad)]
        if self.time_scale:
            f = [fi.scale(sys.T) for fi in f]
        self.f = f
        df = max((fi.degree() for fi in f if not fi.is_zero()), default=0)
        self.deg_f = int(df) if df != NEG_INF else 0
        if 2 * k < self.deg_f + 1:
            raise HierarchyError(
                f"order k={k} too small: 2k must be at least deg(f)+1 = "
                f"{self.deg_f + 1}")

        # constraint lists in scaled coordinates, normalized
        one = Poly.constant(1.0, self.names)
        self.gX = []
        for nm in self.names:
            u = Poly.variable(nm, self.names)
            self.gX.append(one - u * u)
        self.gX += [_normalize(scale_poly(g)) for g in sys.X.extra_ineqs]
        self.gXT = [_normalize(scale_poly(g)) for g in sys.X_T.extra_ineqs]
        for i, (a, b) in enumerate(sys.X_T.box):
            u = Poly.variable(self.names[i], self.names)
            lo = (a - self.mid[i]) / self.rad[i]
            hi = (b - self.mid[i]) / self.rad[i]
            self.gXT.append(_normalize((u - lo) * (hi - u)))
        for g in self.gX + self.gXT:
            if g.degree() > 2 * k:
                raise HierarchyError(
                    f"order k={k} too small to fit a multiplier for a "
                    f"constraint of degree {g.degree()}")

        t = Poly.variable("t", self.tx_names)
        self.time_loc = t * (self.T_eff - t)

        # bases
        self.D1 = max(2 * k, 2 * k - 1 + self.deg_f)
        self.rows_tx = MomentBasis(n + 1, self.D1)     # flow identity rows
        self.vbasis = MomentBasis(n + 1, 2 * k)        # v(t,x) coefficients
        self.xbasis = MomentBasis(n, 2 * k)            # x-identity rows / w
        self.h = lebesgue_box_moments([(-1.0, 1.0)] * n, 2 * k)

        # f lifted to (t,x); t exponent prepended
        self.f_tx_terms = [{(0,) + m: c for m, c in fi.terms.items()}
                           for fi in self.f]

    def half(self, g_deg):
        """Gram half-degree for a multiplier of weight degree g_deg
        under deg(multiplier * weight) <= 2k."""
        return (2 * self.k - g_deg) // 2

    def lie_of_basis(self, mono_tx):
        """Terms of L(t^b x^a) as a dict over (t,x) exponent tuples."""
        b = mono_tx[0]
        alpha = mono_tx[1:]
        out = {}
        if b > 0:
            m = (b - 1,) + alpha
            out[m] = out.get(m, 0.0) + float(b)
        for i, ai in enumerate(alpha):
            if ai == 0:
                continue
            base = list(mono_tx)
            base[1 + i] -= 1
            for mf, cf in self.f_tx_terms[i].items():
                m = mono_mul(tuple(base), mf)
                out[m] = out.get(m, 0.0) + ai * cf
        return out

    def meta(self, side, mode, v_col0, w_col0):
        return {
            "kind": "roa_hierarchy",
            "side": side, "mode": mode, "k": self.k,
            "T": self.sys.T, "time_scale": self.time_scale,
            "var_names": list(self.names),
            "box": [list(iv) for iv in self.sys.X.box],
            "scale_mid": self.mid.tolist(), "scale_rad": self.rad.tolist(),
            "jacobian": self.jacobian,
            "v_basis": [list(m) for m in self.vbasis.monos],
            "w_basis": [list(m) for m in self.xbasis.monos],
            "v_col0": v_col0, "w_col0": w_col0,
        }


def _lift_tx(g):
    """x-polynomial -> same polynomial over (t, x)."""
    return {(0,) + m: c for m, c in g.terms.items()}


def _add_gram(bld, row_of, basis_monos, weight_terms, sign=+1.0):
    """One SOS multiplier: Gram block whose products, multiplied by the
    weight polynomial, land on identity/moment rows."""
    blk = bld.add_psd_block(len(basis_monos))
    for a in range(len(basis_monos)):
        for bb in range(a, len(basis_monos)):
            mab = mono_mul(basis_monos[a], basis_monos[bb])
            for mw, cw in weight_terms.items():
                bld.add_entry(row_of[mono_mul(mab, mw)], blk, a, bb, sign * cw)
    return blk


# ---------------------------------------------------------------------------
# SOS-side builders
# ---------------------------------------------------------------------------

def _sos_common(bld, ctx, rows_g1):
    """Flow rows (-Lv SOS on [0,T] x X) shared by outer and inner."""
    one_tx = {(0,) * (ctx.sys.n + 1): 1.0}
    _add_gram(bld, rows_g1, MomentBasis(ctx.sys.n + 1, ctx.k).monos, one_tx)
    _add_gram(bld, rows_g1, MomentBasis(ctx.sys.n + 1, ctx.half(2)).monos,
              ctx.time_loc.terms)
    for g in ctx.gX:
        _add_gram(bld, rows_g1,
                  MomentBasis(ctx.sys.n + 1, ctx.half(int(g.degree()))).monos,
                  _lift_tx(g))


def _x_identity_rows(bld, ctx):
    return {m: bld.new_constraint(0.0) for m in ctx.xbasis.monos}


def _sos_init_mass_groups(bld, ctx, v_col0, w_col0):
    """Rows for  w - v(0,.) - 1  SOS on X  and  w  SOS on X."""
    n = ctx.sys.n
    one_x = {(0,) * n: 1.0}
    # group: w - v(0,.) - 1
    rows = _x_identity_rows(bld, ctx)
    bld.set_rhs(rows[(0,) * n], -1.0)
    _add_gram(bld, rows, MomentBasis(n, ctx.k).monos, one_x)
    for g in ctx.gX:
        _add_gram(bld, rows, MomentBasis(n, ctx.half(int(g.degree()))).monos,
                  g.terms)
    for j, m in enumerate(ctx.vbasis.monos):
        if m[0] == 0:
            bld.add_free_entry(rows[m[1:]], v_col0 + j, 1.0)
    for j, m in enumerate(ctx.xbasis.monos):
        bld.add_free_entry(rows[m], w_col0 + j, -1.0)
    # group: w SOS on X
    rows = _x_identity_rows(bld, ctx)
    _add_gram(bld, rows, MomentBasis(n, ctx.k).monos, one_x)
    for g in ctx.gX:
        _add_gram(bld, rows, MomentBasis(n, ctx.half(int(g.degree()))).monos,
                  g.terms)
    for j, m in enumerate(ctx.xbasis.monos):
        bld.add_free_entry(rows[m], w_col0 + j, -1.0)


def _new_sos_skeleton(ctx):
    """Builder with v/w free columns, flow rows, objective w.h."""
    bld = SDPBuilder()
    v_col0 = bld.add_free(len(ctx.vbasis))
    w_col0 = bld.add_free(len(ctx.xbasis), cost=ctx.h)
    rows_g1 = {m: bld.new_constraint(0.0) for m in ctx.rows_tx.monos}
    _sos_common(bld, ctx, rows_g1)
    for j, m in enumerate(ctx.vbasis.monos):
        for mL, cL in ctx.lie_of_basis(m).items():
            bld.add_free_entry(rows_g1[mL], v_col0 + j, cL)
    return bld, v_col0, w_col0


def build_outer_sos(sys, k, time_scale=False):
    """SOS side of the order-k outer approximation (see module docstring)."""
    ctx = _Context(sys, k, time_scale)
    bld, v_col0, w_col0 = _new_sos_skeleton(ctx)
    n = ctx.sys.n
    # terminal group: v(T,.) = pT + sum qT_j g_j^XT
    rows = _x_identity_rows(bld, ctx)
    _add_gram(bld, rows, MomentBasis(n, ctx.k).monos, {(0,) * n: 1.0})
    for g in ctx.gXT:
        _add_gram(bld, rows, MomentBasis(n, ctx.half(int(g.degree()))).monos,
                  g.terms)
    for j, m in enumerate(ctx.vbasis.monos):
        bld.add_free_entry(rows[m[1:]], v_col0 + j,
                           -(ctx.T_eff ** m[0]))
    _sos_init_mass_groups(bld, ctx, v_col0, w_col0)
    bld.meta = ctx.meta("sos", "outer", v_col0, w_col0)
    return bld.build()


def build_inner_sos(sys, k, time_scale=False):
    """SOS program certifying an inner approximation via the complement.

    Requires a box-only X and a single-inequality (ball) target; the
    resulting inner set is { x : v(0,x) < 0 }.
    """
    ctx = _Context(sys, k, time_scale)
    if sys.X.extra_ineqs:
        raise HierarchyError(
            "inner mode supports box-only state sets (general semialgebraic "
            "boundaries are out of scope)")
    if len(sys.X_T.extra_ineqs) != 1:
        raise HierarchyError(
            "inner mode needs X_T described by a single ball inequality")
    bld, v_col0, w_col0 = _new_sos_skeleton(ctx)
    n = ctx.sys.n

    # v(T,.) >= 0 on X \ X_T:  v(T,.) = pT + qc*(-g_T) + sum qT_j g_j^X
    rows = _x_identity_rows(bld, ctx)
    _add_gram(bld, rows, MomentBasis(n, ctx.k).monos, {(0,) * n: 1.0})
    neg_ball = -ctx.gXT[0]
    _add_gram(bld, rows,
              MomentBasis(n, ctx.half(int(neg_ball.degree()))).monos,
              neg_ball.terms)
    for g in ctx.gX:
        _add_gram(bld, rows, MomentBasis(n, ctx.half(int(g.degree()))).monos,
                  g.terms)
    for j, m in enumerate(ctx.vbasis.monos):
        bld.add_free_entry(rows[m[1:]], v_col0 + j, -(ctx.T_eff ** m[0]))

    # v(t,.) >= 0 on [0,T] x each box face, in face quotient coordinates
    for i in range(n):
        for side in (-1.0, +1.0):
            face_tx = MomentBasis(n, 2 * ctx.k)   # (t, x without x_i)
            rows = {m: bld.new_constraint(0.0) for m in face_tx.monos}
            one = {(0,) * n: 1.0}
            _add_gram(bld, rows, MomentBasis(n, ctx.k).monos, one)
            tloc = {}
            for mt, ct in ctx.time_loc.terms.items():
                tloc[(mt[0],) + (0,) * (n - 1)] = ct
            _add_gram(bld, rows, MomentBasis(n, ctx.half(2)).monos, tloc)
            for jj in range(n):
                if jj == i:
                    continue
                # 1 - u_jj^2 restricted to the face, over (t, x\{i})
                pos = 1 + (jj if jj < i else jj - 1)
                g_terms = {(0,) * n: 1.0}
                e = [0] * n
                e[pos] = 2
                g_terms[tuple(e)] = -1.0
                _add_gram(bld, rows, MomentBasis(n, ctx.half(2)).monos,
                          g_terms)
            for j, m in enumerate(ctx.vbasis.monos):
                ai = m[1 + i]
                face_mono = (m[0],) + m[1:1 + i] + m[2 + i:]
                bld.add_free_entry(rows[face_mono], v_col0 + j,
                                   -(side ** ai))

    _sos_init_mass_groups(bld, ctx, v_col0, w_col0)
    bld.meta = ctx.meta("sos", "inner", v_col0, w_col0)
    return bld.build()


# ---------------------------------------------------------------------------
# moment-side builder
# ---------------------------------------------------------------------------

def _measure_blocks(bld, row_of, nvars, k_order, weights, lift=None):
    """Moment matrix (weight 1) and localizing matrices of one measure.

    Entries are negated so the solver's dual slack equals the moment /
    localizing matrix itself.
    """
    half = lambda d: (2 * k_order - d) // 2
    one = {(0,) * nvars: 1.0} if lift is None else lift({(0,) * nvars: 1.0})
    basis = MomentBasis(nvars, k_order).monos
    _add_gram(bld, row_of, basis, one, sign=-1.0)
    for g_terms, g_deg in weights:
        basis = MomentBasis(nvars, half(g_deg)).monos
        _add_gram(bld, row_of, basis, g_terms, sign=-1.0)


def build_outer_moment(sys, k, time_scale=False):
    """Moment side of the order-k outer approximation: truncated moments
    of the occupation, initial, slack and terminal measures (see module
    docstring).  The optimal value is the solver's dual objective."""
    ctx = _Context(sys, k, time_scale)
    n = ctx.sys.n
    bld = SDPBuilder()

    # rows = moments (the solver's dual vector carries the moment values)
    rows_mu = {m: bld.new_constraint(0.0) for m in ctx.rows_tx.monos}
    rows_mu0 = {m: bld.new_constraint(0.0) for m in ctx.xbasis.monos}
    rows_hat = {m: bld.new_constraint(0.0) for m in ctx.xbasis.monos}
    rows_muT = {m: bld.new_constraint(0.0) for m in ctx.xbasis.monos}
    # objective: maximize the mass of mu0
    bld.set_rhs(rows_mu0[(0,) * n], 1.0)

    mu_weights = [(ctx.time_loc.terms, 2)]
    mu_weights += [(_lift_tx(g), int(g.degree())) for g in ctx.gX]
    _measure_blocks(bld, rows_mu, n + 1, ctx.k, mu_weights)
    x_weights = [(g.terms, int(g.degree())) for g in ctx.gX]
    _measure_blocks(bld, rows_mu0, n, ctx.k, x_weights)
    _measure_blocks(bld, rows_hat, n, ctx.k, x_weights)
    xt_weights = [(g.terms, int(g.degree())) for g in ctx.gXT]
    _measure_blocks(bld, rows_muT, n, ctx.k, xt_weights)

    # free columns: Liouville test monomials (drive v) and slack rows (w)
    v_col0 = bld.add_free(len(ctx.vbasis))
    w_col0 = bld.add_free(len(ctx.xbasis), cost=ctx.h)
    for j, m in enumerate(ctx.vbasis.monos):
        col = v_col0 + j
        bld.add_free_entry(rows_muT[m[1:]], col, ctx.T_eff ** m[0])
        if m[0] == 0:
            bld.add_free_entry(rows_mu0[m[1:]], col, -1.0)
        for mL, cL in ctx.lie_of_basis(m).items():
            bld.add_free_entry(rows_mu[mL], col, -cL)
    for j, m in enumerate(ctx.xbasis.monos):
        col = w_col0 + j
        bld.add_free_entry(rows_mu0[m], col, 1.0)
        bld.add_free_entry(rows_hat[m], col, 1.0)

    bld.meta = ctx.meta("moment", "outer", v_col0, w_col0)
    return bld.build()


# ---------------------------------------------------------------------------
# certificate extraction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Certificate:
    """Solved hierarchy certificate, mapped back to original coordinates.

    ``objective`` is d*_k (sos side) or p*_k (moment side) in original
    state units; membership of the induced ROA approximation is decided
    by the sign of v(0, .) alone.
    """

    k: int
    mode: str              # outer | inner
    side: str              # sos | moment
    v: Poly                # over ("t", state variables)
    w: Poly                # over state variables
    objective: float
    status: str
    feasibility_margin: float = 0.0

    def v0(self):
        names = self.v.var_names[1:]
        return self.v.substitute({"t": 0.0}, target_vars=names)


def extract_certificate(sol, problem, check_samples=512):
    """Read (v, w) off a solved hierarchy SDP and map them back.

    Works for both sides: the SOS side carries the coefficients as its
    free primal variables; for the moment side the same free block holds
    the Lagrange multipliers of the Liouville/slack rows, which are
    exactly (v, w).  Raises CertificateError for infeasible/unbounded
    or otherwise failed solves, and when the solved pair violates the
    feasibility spot-check beyond the 1e-6 slack.
    """
    meta = problem.meta
    if meta.get("kind") != "roa_hierarchy":
        raise CertificateError("problem was not built by the hierarchy module")
    if sol.status not in ("optimal", "near_optimal"):
        raise CertificateError(
            f"cannot extract a certificate from a solve with status "
            f"{sol.status!r}")
    names = tuple(meta["var_names"])
    tx_names = ("t",) + names
    u = sol.free
    v_col0, w_col0 = meta["v_col0"], meta["w_col0"]
    v_scaled = Poly(
        {tuple(m): u[v_col0 + j] for j, m in enumerate(meta["v_basis"])},
        tx_names)
    w_scaled = Poly(
        {tuple(m): u[w_col0 + j] for j, m in enumerate(meta["w_basis"])},
        names)

    mid = np.array(meta["scale_mid"])
    rad = np.array(meta["scale_rad"])
    unscale_x = {nm: (Poly.variable(nm, tx_names) - float(m)) * (1.0 / float(r))
                 for nm, m, r in zip(names, mid, rad)}
    sub_v = dict(unscale_x)
    if meta["time_scale"]:
        sub_v["t"] = Poly.variable("t", tx_names) * (1.0 / meta["T"])
    v = v_scaled.substitute(sub_v, target_vars=tx_names)
    unscale_x_only = {nm: (Poly.variable(nm, names) - float(m)) * (1.0 / float(r))
                      for nm, m, r in zip(names, mid, rad)}
    w = w_scaled.substitute(unscale_x_only, target_vars=names)

    objective = (sol.primal_obj if meta["side"] == "sos" else sol.dual_obj) \
        * meta["jacobian"]

    # feasibility spot check: w >= v(0,.) + 1 - tau and w >= -tau on X
    rng = np.random.default_rng(20240812)
    box = meta["box"]
    lo = np.array([a for a, _ in box])
    hi = np.array([b for _, b in box])
    pts = lo + (hi - lo) * rng.random((check_samples, len(box)))
    cert = Certificate(k=meta["k"], mode=meta["mode"], side=meta["side"],
                       v=v, w=w, objective=float(objective),
                       status=sol.status)
    wv = w.evaluate_many(pts)
    v0v = cert.v0().evaluate_many(pts)
    margin = float(min(np.min(wv - v0v - 1.0), np.min(wv)))
    if margin < -FEAS_SLACK:
        raise CertificateError(
            f"solved certificate violates the sampled feasibility check "
            f"(margin {margin:.3e} < -{FEAS_SLACK:g})")
    return Certificate(k=cert.k, mode=cert.mode, side=cert.side, v=v, w=w,
                       objective=cert.objective, status=cert.status,
                       feasibility_margin=margin)
