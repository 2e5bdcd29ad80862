"""Polynomial differential-algebraic systems on semialgebraic sets.

Provides the state-set / target-set containers, the sin-cos recasting
that turns trigonometric ODEs into polynomial DAEs (s = sin(a),
c = 1 - cos(a), with the circle equality s^2 + c^2 - 2c = 0 per angle),
the tangency certification that justifies dropping those equalities in
the relaxation, and equilibrium shifting.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .poly import Poly, PolyError, parse_poly

__all__ = [
    "SemiAlgSet",
    "TrigODE",
    "TrigMap",
    "DynSystem",
    "DynamicsError",
    "sin_name",
    "cos_name",
    "recast_trig",
    "check_tangency",
    "is_tangency_certified",
    "shift_to_origin",
    "ball_target",
]

TANGENCY_TOL = 1e-12


class DynamicsError(ValueError):
    pass


def sin_name(angle):
    return f"sin_{angle}"


def cos_name(angle):
    return f"cos_{angle}"


@dataclass(frozen=True)
class SemiAlgSet:
    """Box-plus-inequalities description { x : box, g_i(x) >= 0, h_j(x) = 0 }."""

    box: tuple                      # ((lo, hi), ...) per variable
    extra_ineqs: tuple = ()         # Poly >= 0
    equalities: tuple = ()          # Poly == 0

    def __post_init__(self):
        box = tuple((float(a), float(b)) for a, b in self.box)
        object.__setattr__(self, "box", box)
        object.__setattr__(self, "extra_ineqs", tuple(self.extra_ineqs))
        object.__setattr__(self, "equalities", tuple(self.equalities))
        for a, b in box:
            if not a < b:
                raise DynamicsError(f"degenerate box interval [{a}, {b}]")

    @property
    def nvars(self):
        return len(self.box)

    def face_polys(self, var_names):
        """Box faces as inequalities (x_i - a_i)(b_i - x_i) >= 0."""
        out = []
        for i, (a, b) in enumerate(self.box):
            x = Poly.variable(var_names[i], var_names)
            out.append((x - a) * (b - x))
        return out

    def contains(self, x, tol=0.0):
        x = np.asarray(x, dtype=float)
        for xi, (a, b) in zip(x, self.box):
            if xi < a - tol or xi > b + tol:
                return False
        for g in self.extra_ineqs:
            if g.evaluate(x) < -tol:
                return False
        for h in self.equalities:
            if abs(h.evaluate(x)) > max(tol, 1e-8):
                return False
        return True

    def sample_box(self, rng, n):
        lo = np.array([a for a, _ in self.box])
        hi = np.array([b for _, b in self.box])
        return lo + (hi - lo) * rng.random((n, len(self.box)))

    def volume_box(self):
        return float(np.prod([b - a for a, b in self.box]))


def ball_target(var_names, box, eps, center=None):
    """Target set: eps-ball (single inequality) intersected with the box."""
    n = len(var_names)
    if center is None:
        center = [0.0] * n
    ball = Poly.constant(eps * eps, var_names)
    for name, c in zip(var_names, center):
        d = Poly.variable(name, var_names) - float(c)
        ball = ball - d * d
    return SemiAlgSet(box=box, extra_ineqs=(ball,))


@dataclass(frozen=True)
class TrigODE:
    """ODE whose right-hand sides are polynomial in the states and in
    sin(a), cos(a) of designated angle states.

    The right-hand sides live over the extended variable tuple
    ``var_names + (sin_a, cos_a, ...)`` for each angle ``a`` (in order);
    bare angle variables must not appear polynomially.
    """

    var_names: tuple
    rhs: tuple
    angle_vars: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "var_names", tuple(self.var_names))
        object.__setattr__(self, "rhs", tuple(self.rhs))
        object.__setattr__(self, "angle_vars", tuple(self.angle_vars))
        if len(self.rhs) != len(self.var_names):
            raise DynamicsError("one right-hand side required per state")
        for a in self.angle_vars:
            if a not in self.var_names:
                raise DynamicsError(
                    f"angle {a!r} lacks a state row (no paired angular velocity)")
        ext = self.ext_vars()
        for name, p in zip(self.var_names, self.rhs):
            if p.var_names != ext:
                raise DynamicsError(
                    f"rhs of {name!r} must live over {ext}, got {p.var_names}")
            for a in self.angle_vars:
                ai = ext.index(a)
                if any(m[ai] for m in p.terms):
                    raise DynamicsError(
                        f"bare angle {a!r} appears polynomially in the rhs of "
                        f"{name!r}; only sin/cos of an angle are allowed")

    def ext_vars(self):
        ext = list(self.var_names)
        for a in self.angle_vars:
            ext += [sin_name(a), cos_name(a)]
        return tuple(ext)

    @classmethod
    def from_strings(cls, var_names, rhs_texts, angle_vars=()):
        ext = list(var_names)
        for a in angle_vars:
            ext += [sin_name(a), cos_name(a)]
        rhs = tuple(parse_poly(s, ext) for s in rhs_texts)
        return cls(tuple(var_names), rhs, tuple(angle_vars))

    def eval_rhs(self, x):
        """Numeric right-hand side at a state vector (angles in radians)."""
        x = np.asarray(x, dtype=float)
        ext = list(x)
        for a in self.angle_vars:
            th = x[self.var_names.index(a)]
            ext += [np.sin(th), np.cos(th)]
        ext = np.asarray(ext)
        return np.array([p.evaluate(ext) for p in self.rhs])


@dataclass(frozen=True)
class TrigMap:
    """Record of a recasting: which angle maps to which (s, c) pair."""

    angles: tuple                   # angle names, original order
    s_index: tuple                  # recast-state index of s per angle
    c_index: tuple
    passthrough: tuple              # ((name, recast index), ...) non-angle states
    source: TrigODE | None = None   # the (shifted) trigonometric ODE

    def n_recast(self):
        return 2 * len(self.angles) + len(self.passthrough)

    def map_point(self, theta, other):
        """(angles, remaining states) -> recast state vector (on-manifold)."""
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        other = np.atleast_1d(np.asarray(other, dtype=float)) if len(self.passthrough) \
            else np.zeros(0)
        if len(theta) != len(self.angles):
            raise DynamicsError(f"expected {len(self.angles)} angles")
        if len(other) != len(self.passthrough):
            raise DynamicsError(f"expected {len(self.passthrough)} non-angle states")
        x = np.zeros(self.n_recast())
        for th, si, ci in zip(theta, self.s_index, self.c_index):
            x[si] = np.sin(th)
            x[ci] = 1.0 - np.cos(th)
        for (name, idx), val in zip(self.passthrough, other):
            x[idx] = val
        return x

    def invert_point(self, x):
        """Recast state -> (angles, remaining states); assumes on-manifold."""
        x = np.asarray(x, dtype=float)
        theta = np.array([np.arctan2(x[si], 1.0 - x[ci])
                          for si, ci in zip(self.s_index, self.c_index)])
        other = np.array([x[idx] for _, idx in self.passthrough])
        return theta, other

    def original_state(self, x):
        """Recast state -> state vector of the source ODE (its variable order)."""
        if self.source is None:
            raise DynamicsError("no source ODE recorded in trig_map")
        theta, other = self.invert_point(x)
        out = np.zeros(len(self.source.var_names))
        for a, th in zip(self.angles, theta):
            out[self.source.var_names.index(a)] = th
        for (name, _), val in zip(self.passthrough, other):
            out[self.source.var_names.index(name)] = val
        return out


@dataclass(frozen=True)
class DynSystem:
    """Polynomial DAE  xdot = f(x), g0(x) = 0  on X over [0, T], target X_T."""

    var_names: tuple
    f: tuple
    X: SemiAlgSet
    X_T: SemiAlgSet
    T: float
    trig_map: TrigMap | None = None

    def __post_init__(self):
        object.__setattr__(self, "var_names", tuple(self.var_names))
        object.__setattr__(self, "f", tuple(self.f))
        object.__setattr__(self, "T", float(self.T))
        n = len(self.var_names)
        if len(self.f) != n:
            raise DynamicsError("f must have one component per state")
        for fi in self.f:
            if fi.var_names != self.var_names:
                raise DynamicsError(
                    f"f component over {fi.var_names}, expected {self.var_names}")
        if self.X.nvars != n or self.X_T.nvars != n:
            raise DynamicsError("state-set dimension mismatch")
        if self.T <= 0:
            raise DynamicsError("horizon T must be positive")
        self._check_target_in_X()

    @property
    def n(self):
        return len(self.var_names)

    @property
    def equalities(self):
        return self.X.equalities

    def eval_f(self, x):
        x = np.asarray(x, dtype=float)
        return np.array([fi.evaluate(x) for fi in self.f])

    def _check_target_in_X(self, n_samples=256):
        """Sampling check that X_T (box-and-inequality part) sits inside X."""
        rng = np.random.default_rng(20240811)
        pts = self.X_T.sample_box(rng, n_samples)
        keep = np.ones(len(pts), dtype=bool)
        for g in self.X_T.extra_ineqs:
            keep &= g.evaluate_many(pts) >= 0
        for p in pts[keep]:
            ok = all(a - 1e-12 <= xi <= b + 1e-12
                     for xi, (a, b) in zip(p, self.X.box))
            ok = ok and all(g.evaluate(p) >= -1e-9 for g in self.X.extra_ineqs)
            if not ok:
                raise DynamicsError("target set X_T is not contained in X "
                                    "(sampled witness found)")


def recast_trig(ode, bounds=None, T=8.0, eps=0.1, omega_max=None):
    """Recast a trigonometric ODE into a polynomial DAE system.

    Each angle a becomes the pair (s_a, c_a) = (sin a, 1 - cos a) with
    dynamics  sdot = (1 - c) * adot,  cdot = s * adot  and the appended
    equality s^2 + c^2 - 2c = 0.  Other state equations get sin -> s,
    cos -> 1 - c substituted and expanded.

    ``bounds`` supplies box intervals for non-angle states by name
    (``omega_max`` is a shorthand giving every non-angle state the box
    [-omega_max, omega_max]); recast pairs default to s in [-1, 1],
    c in [0, 2].  The target set is the eps-ball at the origin.
    """
    bounds = dict(bounds or {})
    if omega_max is not None:
        for name in ode.var_names:
            if name not in ode.angle_vars:
                bounds.setdefault(name, (-float(omega_max), float(omega_max)))

    new_vars = []
    s_idx, c_idx, passthrough = [], [], []
    box = []
    for name in ode.var_names:
        if name in ode.angle_vars:
            s_idx.append(len(new_vars))
            new_vars.append(f"s_{name}")
            box.append((-1.0, 1.0))
            c_idx.append(len(new_vars))
            new_vars.append(f"c_{name}")
            box.append((0.0, 2.0))
        else:
            if name not in bounds:
                raise DynamicsError(f"no box interval given for state {name!r}")
            passthrough.append((name, len(new_vars)))
            new_vars.append(name)
            box.append(tuple(bounds[name]))
    new_vars = tuple(new_vars)

    # substitution of the extended (state, sin, cos) variables into recast vars
    assign = {}
    for name in ode.var_names:
        if name in ode.angle_vars:
            # bare angles never occur (validated); map to 0 to keep substitute total
            assign[name] = Poly.zero(new_vars)
            assign[sin_name(name)] = Poly.variable(f"s_{name}", new_vars)
            assign[cos_name(name)] = 1.0 - Poly.variable(f"c_{name}", new_vars)
        else:
            assign[name] = Poly.variable(name, new_vars)

    def recast_poly(p):
        return p.substitute(assign, target_vars=new_vars)

    f = []
    equalities = []
    for name, rhs in zip(ode.var_names, ode.rhs):
        if name in ode.angle_vars:
            h = recast_poly(rhs)          # the angle's velocity expression
            s = Poly.variable(f"s_{name}", new_vars)
            c = Poly.variable(f"c_{name}", new_vars)
            f.append((1.0 - c) * h)       # sdot
            f.append(s * h)               # cdot
            equalities.append(s * s + c * c - 2.0 * c)
        else:
            f.append(recast_poly(rhs))

    X = SemiAlgSet(box=tuple(box), equalities=tuple(equalities))
    X_T = ball_target(new_vars, tuple(box), eps)
    tmap = TrigMap(
        angles=tuple(ode.angle_vars),
        s_index=tuple(s_idx), c_index=tuple(c_idx),
        passthrough=tuple(passthrough),
        source=ode,
    ) if ode.angle_vars else None
    return DynSystem(var_names=new_vars, f=tuple(f), X=X, X_T=X_T, T=T,
                     trig_map=tmap)


def check_tangency(sys):
    """Residual polynomials (grad g0) . f, one per equality constraint.

    The equalities can be dropped from the relaxation only when every
    residual is identically zero (all coefficients below 1e-12).
    """
    if not sys.equalities:
        raise DynamicsError("system has no equality constraints")
    out = []
    for g in sys.equalities:
        r = Poly.zero(sys.var_names)
        for i, fi in enumerate(sys.f):
            r = r + g.differentiate(i) * fi
        out.append(r)
    return out


def is_tangency_certified(sys, tol=TANGENCY_TOL):
    if not sys.equalities:
        return True
    for r in check_tangency(sys):
        if r.terms and max(abs(c) for c in r.terms.values()) > tol:
            return False
    return True


def shift_to_origin(sys, x_eq, tol=1e-8):
    """Change coordinates y = x - x_eq; requires f(x_eq) ~ 0.

    The trig_map is dropped: shifted recast coordinates are no longer
    the image of the sin/cos map.
    """
    x_eq = np.asarray(x_eq, dtype=float)
    if len(x_eq) != sys.n:
        raise DynamicsError("equilibrium vector dimension mismatch")
    r = sys.eval_f(x_eq)
    if np.max(np.abs(r)) > tol:
        raise DynamicsError(
            f"x_eq is not an equilibrium at tolerance {tol:g} "
            f"(max |f_i| = {np.max(np.abs(r)):.3e})")
    assign = {name: Poly.variable(name, sys.var_names) + float(v)
              for name, v in zip(sys.var_names, x_eq)}

    def shift_poly(p):
        return p.substitute(assign, target_vars=sys.var_names)

    def shift_set(S):
        return SemiAlgSet(
            box=tuple((a - v, b - v) for (a, b), v in zip(S.box, x_eq)),
            extra_ineqs=tuple(shift_poly(g) for g in S.extra_ineqs),
            equalities=tuple(shift_poly(h) for h in S.equalities),
        )

    return DynSystem(
        var_names=sys.var_names,
        f=tuple(shift_poly(fi) for fi in sys.f),
        X=shift_set(sys.X), X_T=shift_set(sys.X_T), T=sys.T,
        trig_map=None,
    )
