"""Ground-truth side: adaptive ODE integration, the simulation-based
ROA membership oracle, and Monte Carlo cross-validation of certificates.

The integrator is an embedded Dormand-Prince 5(4) pair with PI step
control and cubic Hermite dense output.  Trajectories may be clipped at
the state box: leaving X at any time disqualifies an initial condition
(strict admissible-trajectory semantics; the exit time is localized by
bisection on the dense output).

For recast systems the oracle integrates the original trigonometric
dynamics and maps states through the recast map, so numerical drift off
the circle manifold is never misread as instability.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .poly import Poly

__all__ = [
    "Trajectory",
    "OracleResult",
    "ValidationReport",
    "VerifyError",
    "integrate",
    "poly_field",
    "roa_oracle",
    "cross_validate",
]


class VerifyError(RuntimeError):
    pass


# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
# b5 - b4: local error estimator weights
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200,
               22 / 525, -1 / 40])


def poly_field(polys):
    """Compile a polynomial vector field into a fast numeric callable."""
    n = len(polys[0].var_names)
    Es, cs, comp = [], [], []
    for k, p in enumerate(polys):
        if p.terms:
            E, c = p.exponent_matrix()
            Es.append(E)
            cs.append(c)
            comp.append(np.full(len(c), k))
    if not Es:
        return lambda x: np.zeros(len(polys))
    E = np.vstack(Es)
    c = np.concatenate(cs)
    comp = np.concatenate(comp)
    ncomp = len(polys)

    def f(x):
        mono = np.prod(np.asarray(x)[None, :] ** E, axis=1)
        return np.bincount(comp, weights=c * mono, minlength=ncomp)

    return f


@dataclass
class Trajectory:
    times: np.ndarray               # increasing, times[0] = 0
    states: np.ndarray              # (steps, n)
    derivs: np.ndarray              # f at the stored states
    exit_reason: str                # completed | left_X | step_failure
    n_steps: int = 0
    n_rejected: int = 0

    def at(self, t):
        """Cubic Hermite dense evaluation at time t (within the stored span)."""
        ts = self.times
        if t <= ts[0]:
            return self.states[0].copy()
        if t >= ts[-1]:
            return self.states[-1].copy()
        k = int(np.searchsorted(ts, t, side="right") - 1)
        return _hermite(ts[k], ts[k + 1], self.states[k], self.states[k + 1],
                        self.derivs[k], self.derivs[k + 1], t)


def _hermite(t0, t1, y0, y1, f0, f1, t):
    h = t1 - t0
    if h <= 0:
        return y0.copy()
    s = (t - t0) / h
    h00 = (1 + 2 * s) * (1 - s) ** 2
    h10 = s * (1 - s) ** 2
    h01 = s * s * (3 - 2 * s)
    h11 = s * s * (s - 1)
    return h00 * y0 + h10 * h * f0 + h01 * y1 + h11 * h * f1


def integrate(f, x0, T, rtol=1e-9, atol=1e-12, inside=None, max_steps=1_000_000):
    """Adaptive RK5(4) integration of xdot = f(x) over [0, T].

    ``f`` is a callable or a sequence of Poly components.  When
    ``inside`` (a state predicate) is given, integration halts with
    exit_reason "left_X" at the first exit, with the crossing time
    localized to 1e-9 by bisection on the dense output.
    """
    if not callable(f):
        f = poly_field(list(f))
    x0 = np.asarray(x0, dtype=float)
    if not np.all(np.isfinite(x0)):
        raise VerifyError("non-finite initial state")
    if T <= 0:
        raise VerifyError("horizon T must be positive")

    times = [0.0]
    states = [x0.copy()]
    k1 = f(x0)
    derivs = [k1.copy()]

    if inside is not None and not inside(x0):
        return Trajectory(np.array(times), np.array(states),
                          np.array(derivs), "left_X")

    # initial step heuristic
    sc = atol + rtol * np.abs(x0)
    d0 = np.sqrt(np.mean((x0 / sc) ** 2))
    d1 = np.sqrt(np.mean((k1 / sc) ** 2))
    h = 0.01 * d0 / d1 if d0 > 1e-5 and d1 > 1e-5 else 1e-6
    h = min(h, T)

    t = 0.0
    y = x0.copy()
    err_prev = 1.0
    n_acc = n_rej = 0
    K = np.zeros((7, len(x0)))
    for _ in range(max_steps):
        if t >= T:
            break
        h = min(h, T - t)
        if h < 1e-14 * max(1.0, abs(t)):
            return Trajectory(np.array(times), np.array(states),
                              np.array(derivs), "step_failure",
                              n_steps=n_acc, n_rejected=n_rej)
        K[0] = k1
        for s in range(1, 7):
            K[s] = f(y + h * (_A[s] @ K[:s]))
        y_new = y + h * (_B5 @ K)
        err_vec = h * (_E @ K)
        sc = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        err = np.sqrt(np.mean((err_vec / sc) ** 2))
        if err <= 1.0 or h <= 1e-13 * max(1.0, abs(t)):
            t_new = t + h
            f_new = K[6]            # FSAL stage equals f(y_new)
            if inside is not None and not inside(y_new):
                tc = _bisect_exit(t, t_new, y, y_new, k1, f_new, inside)
                yc = _hermite(t, t_new, y, y_new, k1, f_new, tc)
                times.append(tc)
                states.append(yc)
                derivs.append(f(yc))
                return Trajectory(np.array(times), np.array(states),
                                  np.array(derivs), "left_X",
                                  n_steps=n_acc + 1, n_rejected=n_rej)
            times.append(t_new)
            states.append(y_new)
            derivs.append(f_new.copy())
            t, y, k1 = t_new, y_new, f_new
            n_acc += 1
            fac = 0.9 * err ** -0.14 * err_prev ** 0.08 if err > 0 else 5.0
            h *= min(5.0, max(0.2, fac))
            err_prev = max(err, 1e-10)
        else:
            n_rej += 1
            h *= max(0.2, 0.9 * err ** -0.2)
    else:
        return Trajectory(np.array(times), np.array(states),
                          np.array(derivs), "step_failure",
                          n_steps=n_acc, n_rejected=n_rej)
    return Trajectory(np.array(times), np.array(states), np.array(derivs),
                      "completed", n_steps=n_acc, n_rejected=n_rej)


def _bisect_exit(t0, t1, y0, y1, f0, f1, inside, tol=1e-9):
    """First crossing out of the admissible set, on the Hermite segment."""
    lo, hi = t0, t1
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if inside(_hermite(t0, t1, y0, y1, f0, f1, mid)):
            lo = mid
        else:
            hi = mid
    return hi


# ---------------------------------------------------------------------------
# membership oracle
# ---------------------------------------------------------------------------

@dataclass
class OracleResult:
    status: str                  # in_roa | not_in_roa | error
    reason: str | None = None    # left_X | missed_target | step_failure
    trajectory: Trajectory | None = None

    @property
    def in_roa(self):
        return self.status == "in_roa"


def _set_margin(S, x):
    """Smallest slack of x w.r.t. the box and inequalities of S."""
    m = np.inf
    for xi, (a, b) in zip(x, S.box):
        m = min(m, xi - a, b - xi)
    for g in S.extra_ineqs:
        m = min(m, g.evaluate(x))
    return m


def roa_oracle(sys, x0, rtol=1e-9, atol=1e-12, target_margin=-1e-9):
    """Simulation decision: does x0 reach X_T at time T without leaving X?

    For recast systems x0 is a recast-space point on the manifold; the
    original trigonometric dynamics are integrated and every admissibility
    check is mapped through the recast map.
    """
    x0 = np.asarray(x0, dtype=float)
    tmap = sys.trig_map
    if tmap is not None and tmap.source is not None:
        for g in sys.equalities:
            if abs(g.evaluate(x0)) > 1e-8:
                raise VerifyError("initial point is off the recast manifold")

        def to_recast(z):
            th = np.array([z[tmap.source.var_names.index(a)]
                           for a in tmap.angles])
            other = np.array([z[tmap.source.var_names.index(nm)]
                              for nm, _ in tmap.passthrough])
            return tmap.map_point(th, other)

        z0 = tmap.original_state(x0)
        f = tmap.source.eval_rhs
        inside = lambda z: _set_margin(sys.X, to_recast(z)) >= -1e-12
        traj = integrate(f, z0, sys.T, rtol=rtol, atol=atol, inside=inside)
        terminal = to_recast(traj.states[-1])
    else:
        f = poly_field(list(sys.f))
        inside = lambda z: _set_margin(sys.X, z) >= -1e-12
        traj = integrate(f, x0, sys.T, rtol=rtol, atol=atol, inside=inside)
        terminal = traj.states[-1]

    if traj.exit_reason == "step_failure":
        return OracleResult("error", "step_failure", traj)
    if traj.exit_reason == "left_X":
        return OracleResult("not_in_roa", "left_X", traj)
    if _set_margin(sys.X_T, terminal) >= target_margin:
        return OracleResult("in_roa", None, traj)
    return OracleResult("not_in_roa", "missed_target", traj)


# ---------------------------------------------------------------------------
# Monte Carlo cross-validation
# ---------------------------------------------------------------------------

@dataclass
class ValidationReport:
    n_samples: int
    n_usable_outer: int
    n_usable_inner: int
    n_in_roa: int
    n_not_in_roa: int
    n_oracle_error: int
    outer_violations: int
    inner_violations: int
    outer_violation_rate: float
    inner_violation_rate: float
    seed: int
    band: float
    witnesses: list = field(default_factory=list)
    note: str = ("strict admissible-trajectory semantics: leaving X before "
                 "time T disqualifies the initial condition")

    def to_dict(self):
        d = dict(self.__dict__)
        d["witnesses"] = [dict(w) for w in self.witnesses]
        return d


def sample_states(sys, n, rng):
    """Uniform samples: in (theta, omega) for recast systems (mapped onto
    the manifold), uniform in the box otherwise."""
    tmap = sys.trig_map
    if tmap is not None:
        na = len(tmap.angles)
        theta = rng.uniform(-np.pi, np.pi, size=(n, na))
        lo = np.array([sys.X.box[idx][0] for _, idx in tmap.passthrough])
        hi = np.array([sys.X.box[idx][1] for _, idx in tmap.passthrough])
        other = lo + (hi - lo) * rng.random((n, len(lo)))
        return np.array([tmap.map_point(theta[i], other[i]) for i in range(n)])
    return sys.X.sample_box(rng, n)


def cross_validate(outer, inner, sys, n_samples=500, seed=0, band=1e-3,
                   rtol=1e-9):
    """Count certificate violations against the simulation oracle.

    Type (a): oracle says in-ROA but the outer approximation excludes the
    point.  Type (b): the inner approximation includes the point but the
    oracle says not-in-ROA.  Points with |v0| inside the boundary band
    are excluded from the respective count.
    """
    if n_samples < 1:
        raise VerifyError("need at least one sample")
    rng = np.random.default_rng(seed)
    pts = sample_states(sys, n_samples, rng)
    v_out = outer.v0.evaluate_many(pts) if outer is not None else None
    v_in = inner.v0.evaluate_many(pts) if inner is not None else None

    usable_outer = usable_inner = 0
    n_in = n_out = n_err = 0
    viol_a = viol_b = 0
    witnesses = []
    for i in range(n_samples):
        res = roa_oracle(sys, pts[i], rtol=rtol)
        if res.status == "error":
            n_err += 1
            continue
        in_roa = res.in_roa
        n_in += in_roa
        n_out += not in_roa
        if v_out is not None and abs(v_out[i]) > band:
            usable_outer += 1
            if in_roa and v_out[i] < 0:
                viol_a += 1
                witnesses.append({"kind": "outer", "point": pts[i].tolist(),
                                  "v0": float(v_out[i])})
        if v_in is not None and abs(v_in[i]) > band:
            usable_inner += 1
            if v_in[i] < 0 and not in_roa:
                viol_b += 1
                witnesses.append({"kind": "inner", "point": pts[i].tolist(),
                                  "v0": float(v_in[i]),
                                  "reason": res.reason})
    if (outer is not None and usable_outer == 0) or \
       (inner is not None and usable_inner == 0):
        raise VerifyError("no usable samples left after band exclusion")
    return ValidationReport(
        n_samples=n_samples,
        n_usable_outer=usable_outer, n_usable_inner=usable_inner,
        n_in_roa=n_in, n_not_in_roa=n_out, n_oracle_error=n_err,
        outer_violations=viol_a, inner_violations=viol_b,
        outer_violation_rate=viol_a / max(usable_outer, 1),
        inner_violation_rate=viol_b / max(usable_inner, 1),
        seed=seed, band=band, witnesses=witnesses)
