"""Swing-equation front end.

Builds classical machine dynamics

    thdot_k = om_k
    omdot_k = -lam_k om_k + (P_k^mec - P_k^elec(th)) / M_k

with electrical power
    P_k^elec = G_kk |V_k|^2
             + sum_l |V_k||V_l| ( B_kl sin(th_k - th_l) + G_kl cos(th_k - th_l) ),

solves the equilibrium condition P^mec = P^elec by damped Newton,
shifts the equilibrium to the origin and hands the trig-expanded system
to the sin/cos recaster.  Self-conductance G_kk is taken as the sum of
the conductances of the lines incident to bus k (zero for the shipped
benchmark).  The reference bus phase is fixed to zero and its dynamics
are eliminated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import DynSystem, TrigODE, cos_name, is_tangency_certified, \
    recast_trig, sin_name
from .poly import Poly

__all__ = [
    "Bus",
    "Line",
    "PowerNetwork",
    "PowerError",
    "JacobianSingularError",
    "NoConvergenceError",
    "swing_rhs",
    "electrical_power",
    "swing_energy",
    "solve_equilibrium",
    "swing_trig_ode",
    "build_recast_system",
    "chiang3bus",
]


class PowerError(ValueError):
    pass


class JacobianSingularError(PowerError):
    pass


class NoConvergenceError(PowerError):
    pass


@dataclass(frozen=True)
class Bus:
    id: str
    M: float = 1.0          # inertia constant
    damping: float = 0.0    # lambda
    P_mec: float = 0.0      # mechanical power (pu)
    Vmag: float = 1.0       # voltage magnitude (pu)


@dataclass(frozen=True)
class Line:
    from_bus: str
    to_bus: str
    G: float = 0.0
    B: float = 0.0


@dataclass(frozen=True)
class PowerNetwork:
    buses: tuple
    lines: tuple
    ref_bus: str

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "lines", tuple(self.lines))
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise PowerError("duplicate bus ids")
        if self.ref_bus not in ids:
            raise PowerError(f"reference bus {self.ref_bus!r} not among buses")
        seen = set()
        adj = {i: set() for i in ids}
        for ln in self.lines:
            if ln.from_bus == ln.to_bus:
                raise PowerError(f"self-line at bus {ln.from_bus!r}")
            if ln.from_bus not in ids or ln.to_bus not in ids:
                raise PowerError("line endpoint not among buses")
            key = frozenset((ln.from_bus, ln.to_bus))
            if key in seen:
                raise PowerError(f"duplicate line between {sorted(key)}")
            seen.add(key)
            adj[ln.from_bus].add(ln.to_bus)
            adj[ln.to_bus].add(ln.from_bus)
        # connectivity
        stack, visited = [ids[0]], {ids[0]}
        while stack:
            for nb in adj[stack.pop()]:
                if nb not in visited:
                    visited.add(nb)
                    stack.append(nb)
        if visited != set(ids):
            raise PowerError("network graph is not connected")
        for b in self.buses:
            if b.Vmag <= 0:
                raise PowerError(f"bus {b.id!r} has non-positive voltage magnitude")
            if b.id != self.ref_bus and b.M <= 0:
                raise PowerError(f"machine {b.id!r} has non-positive inertia")

    def machines(self):
        """Non-reference buses, in declaration order."""
        return tuple(b for b in self.buses if b.id != self.ref_bus)

    def bus(self, bus_id):
        for b in self.buses:
            if b.id == bus_id:
                return b
        raise PowerError(f"no bus {bus_id!r}")

    def couplings(self, bus_id):
        """(other_id, |v_k||v_l|*B, |v_k||v_l|*G) for each incident line."""
        vk = self.bus(bus_id).Vmag
        out = []
        for ln in self.lines:
            if ln.from_bus == bus_id:
                other = ln.to_bus
            elif ln.to_bus == bus_id:
                other = ln.from_bus
            else:
                continue
            vl = self.bus(other).Vmag
            out.append((other, vk * vl * ln.B, vk * vl * ln.G))
        return out

    def self_conductance(self, bus_id):
        return sum(ln.G for ln in self.lines
                   if bus_id in (ln.from_bus, ln.to_bus))


def _theta_by_id(net, theta):
    machines = net.machines()
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if len(theta) != len(machines):
        raise PowerError(
            f"expected {len(machines)} machine angles, got {len(theta)}")
    th = {net.ref_bus: 0.0}
    for b, v in zip(machines, theta):
        th[b.id] = v
    return th


def electrical_power(net, theta):
    """P_k^elec per non-reference machine; reference phase fixed to 0."""
    th = _theta_by_id(net, theta)
    out = []
    for b in net.machines():
        p = net.self_conductance(b.id) * b.Vmag ** 2
        for other, vvB, vvG in net.couplings(b.id):
            d = th[b.id] - th[other]
            p += vvB * np.sin(d) + vvG * np.cos(d)
        out.append(p)
    return np.array(out)


def swing_rhs(net, theta, omega):
    """(theta_dot, omega_dot) of the machine swing equations."""
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    machines = net.machines()
    if len(omega) != len(machines):
        raise PowerError(
            f"expected {len(machines)} machine speeds, got {len(omega)}")
    pe = electrical_power(net, theta)
    om_dot = np.array([
        -b.damping * w + (b.P_mec - p) / b.M
        for b, w, p in zip(machines, omega, pe)])
    return omega.copy(), om_dot


def swing_energy(net, theta, omega):
    """Energy function sum M w^2/2 - sum P th - sum VV B cos(th_k - th_l).

    Conserved along trajectories for lossless (G = 0), undamped
    (lambda = 0) networks; pair sum runs over lines, reference included.
    """
    th = _theta_by_id(net, theta)
    machines = net.machines()
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    e = sum(0.5 * b.M * w ** 2 for b, w in zip(machines, omega))
    e -= sum(b.P_mec * th[b.id] for b in machines)
    for ln in net.lines:
        vv = net.bus(ln.from_bus).Vmag * net.bus(ln.to_bus).Vmag
        e -= vv * ln.B * np.cos(th[ln.from_bus] - th[ln.to_bus])
    return e


def _equilibrium_jacobian(net, theta):
    """d(P^mec - P^elec)/dtheta over machine angles."""
    th = _theta_by_id(net, theta)
    machines = net.machines()
    idx = {b.id: i for i, b in enumerate(machines)}
    m = len(machines)
    J = np.zeros((m, m))
    for b in machines:
        k = idx[b.id]
        for other, vvB, vvG in net.couplings(b.id):
            d = th[b.id] - th[other]
            dPd = vvB * np.cos(d) - vvG * np.sin(d)
            J[k, k] -= dPd
            if other != net.ref_bus:
                J[k, idx[other]] += dPd
    return J


def solve_equilibrium(net, guess=None, tol=1e-10, max_iter=50):
    """Newton iteration on P^mec - P^elec(theta); reference bus fixed at 0.

    Full steps with up to 10 fallback halvings when the residual does
    not decrease.  Raises JacobianSingularError / NoConvergenceError.
    """
    machines = net.machines()
    m = len(machines)
    theta = np.zeros(m) if guess is None else \
        np.atleast_1d(np.asarray(guess, dtype=float)).copy()
    if len(theta) != m:
        raise PowerError(f"guess has length {len(theta)}, expected {m}")
    P = np.array([b.P_mec for b in machines])

    r = P - electrical_power(net, theta)
    for _ in range(max_iter):
        if np.max(np.abs(r)) <= tol:
            return theta
        J = _equilibrium_jacobian(net, theta)
        try:
            step = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            raise JacobianSingularError(
                "singular Jacobian in equilibrium Newton iteration") from None
        if not np.all(np.isfinite(step)):
            raise JacobianSingularError(
                "non-finite Newton step (ill-conditioned Jacobian)")
        scale = 1.0
        best = None
        for _ in range(11):
            cand = theta + scale * step
            rc = P - electrical_power(net, cand)
            if best is None or np.max(np.abs(rc)) < np.max(np.abs(best[1])):
                best = (cand, rc)
            if np.max(np.abs(rc)) < np.max(np.abs(r)):
                break
            scale *= 0.5
        theta, r = best
    if np.max(np.abs(r)) <= tol:
        return theta
    raise NoConvergenceError(
        f"equilibrium Newton did not converge in {max_iter} iterations "
        f"(residual {np.max(np.abs(r)):.3e})")


def swing_trig_ode(net, theta_eq=None):
    """Symbolic swing ODE as a TrigODE over (th_1.., om_1..), shifted so
    the given equilibrium sits at the origin.

    Angle differences are pre-expanded via angle-sum identities, so every
    trigonometric occurrence is sin/cos of a bare (shifted) machine angle.
    """
    machines = net.machines()
    m = len(machines)
    if theta_eq is None:
        theta_eq = np.zeros(m)
    theta_eq = np.atleast_1d(np.asarray(theta_eq, dtype=float))
    th_names = tuple(f"th{i + 1}" for i in range(m))
    om_names = tuple(f"om{i + 1}" for i in range(m))
    var_names = th_names + om_names
    ext = list(var_names)
    for a in th_names:
        ext += [sin_name(a), cos_name(a)]
    ext = tuple(ext)

    def S(i):
        return Poly.variable(sin_name(th_names[i]), ext)

    def C(i):
        return Poly.variable(cos_name(th_names[i]), ext)

    one = Poly.constant(1.0, ext)
    idx = {b.id: i for i, b in enumerate(machines)}

    def sincos_pair(k, other):
        """sin/cos of (th_k - th_other) in shifted coordinates."""
        if other == net.ref_bus:
            delta = theta_eq[k]
            sin_part = float(np.cos(delta)) * S(k) + float(np.sin(delta)) * C(k)
            cos_part = float(np.cos(delta)) * C(k) - float(np.sin(delta)) * S(k)
            return sin_part, cos_part
        l = idx[other]
        delta = theta_eq[k] - theta_eq[l]
        sd = S(k) * C(l) - C(k) * S(l)          # sin(a - b)
        cd = C(k) * C(l) + S(k) * S(l)          # cos(a - b)
        sin_part = float(np.cos(delta)) * sd + float(np.sin(delta)) * cd
        cos_part = float(np.cos(delta)) * cd - float(np.sin(delta)) * sd
        return sin_part, cos_part

    rhs = []
    for i in range(m):
        rhs.append(Poly.variable(om_names[i], ext))        # thdot = om
    for b in machines:
        k = idx[b.id]
        p_elec = Poly.constant(net.self_conductance(b.id) * b.Vmag ** 2, ext)
        for other, vvB, vvG in net.couplings(b.id):
            sin_part, cos_part = sincos_pair(k, other)
            p_elec = p_elec + vvB * sin_part + vvG * cos_part
        om = Poly.variable(om_names[k], ext)
        rhs.append(om * (-b.damping) + (one * b.P_mec - p_elec) * (1.0 / b.M))
    return TrigODE(var_names=var_names, rhs=tuple(rhs), angle_vars=th_names)


def build_recast_system(net, omega_max, T=8.0, eps=0.1, guess=None):
    """Equilibrium -> shift -> sin/cos recast, ready for the hierarchy.

    Returns a DynSystem with states (s_k, c_k) per machine angle plus
    om_k, box s in [-1,1], c in [0,2], om in [-omega_max, omega_max],
    target the eps-ball at the (shifted) equilibrium, tangency certified.
    """
    theta_eq = solve_equilibrium(net, guess=guess)
    ode = swing_trig_ode(net, theta_eq=theta_eq)
    sys = recast_trig(ode, omega_max=omega_max, T=T, eps=eps)
    if not is_tangency_certified(sys):
        raise PowerError("recast system failed tangency certification")
    f0 = sys.eval_f(np.zeros(sys.n))
    if np.max(np.abs(f0)) > 1e-8:
        raise PowerError(
            f"shifted equilibrium is not at the origin (max |f(0)| = "
            f"{np.max(np.abs(f0)):.3e})")
    return sys


def chiang3bus(omega_max=1.0, T=8.0, eps=0.1):
    """Three-machine cycle benchmark (two machines against a reference).

    The machine ODE is
        omdot_1 = -sin(th1) - 0.5 sin(th1 - th2) - 0.4 om1
        omdot_2 = -0.5 sin(th2) - 0.5 sin(th2 - th1) - 0.5 om2 + 0.05
    with a stable equilibrium near (0.02, 0.06).  Returns the network and
    the pre-built shifted recast system (box choices are ours, not part
    of the benchmark data).
    """
    net = PowerNetwork(
        buses=(
            Bus(id="1", M=1.0, damping=0.4, P_mec=0.0, Vmag=1.0),
            Bus(id="2", M=1.0, damping=0.5, P_mec=0.05, Vmag=1.0),
            Bus(id="3", M=1.0, damping=0.0, P_mec=0.0, Vmag=1.0),
        ),
        lines=(
            Line(from_bus="1", to_bus="3", G=0.0, B=1.0),
            Line(from_bus="1", to_bus="2", G=0.0, B=0.5),
            Line(from_bus="2", to_bus="3", G=0.0, B=0.5),
        ),
        ref_bus="3",
    )
    return net, build_recast_system(net, omega_max=omega_max, T=T, eps=eps)
