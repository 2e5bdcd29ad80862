"""Sparse multivariate polynomials over named real variables.

Canonical representation: a map from exponent tuples to nonzero float
coefficients, plus an ordered tuple of variable names.  Term order is
graded lexicographic (grlex) throughout; the same order drives the
deterministic printer and the moment indexing used by the SDP layer.
"""

from __future__ import annotations

import re
from itertools import combinations_with_replacement

import numpy as np

__all__ = [
    "Poly",
    "PolyError",
    "ParseError",
    "NEG_INF",
    "grlex_key",
    "mono_mul",
    "mono_deg",
    "monomials_upto",
    "parse_poly",
    "lie_derivative",
]

# Degree of the zero polynomial.  A distinct sentinel, never -1.
NEG_INF = float("-inf")


class PolyError(ValueError):
    pass


class ParseError(PolyError):
    def __init__(self, msg, pos):
        super().__init__(f"{msg} (at position {pos})")
        self.pos = pos


def mono_deg(m):
    return sum(m)


def grlex_key(m):
    """Sort key realizing graded lexicographic order (ascending).

    Lower total degree first; within a degree, lexicographically larger
    exponent tuples (x1-major) come first, matching the usual moment
    basis enumeration 1, x1, x2, x1^2, x1*x2, x2^2, ...
    """
    return (sum(m), tuple(-e for e in m))


def mono_mul(a, b):
    return tuple(x + y for x, y in zip(a, b))


def monomials_upto(nvars, max_deg):
    """All exponent tuples with total degree <= max_deg, in grlex order."""
    out = [(0,) * nvars]
    for d in range(1, max_deg + 1):
        block = []
        for combo in combinations_with_replacement(range(nvars), d):
            e = [0] * nvars
            for i in combo:
                e[i] += 1
            block.append(tuple(e))
        block.sort(key=grlex_key)
        out.extend(block)
    return out


class Poly:
    """Immutable sparse polynomial with real coefficients.

    ``terms`` maps exponent tuples (length == len(var_names)) to nonzero
    coefficients; zero coefficients are never stored, so equality of the
    term maps is equality of polynomials.
    """

    __slots__ = ("terms", "var_names")

    def __init__(self, terms, var_names, _clean=True):
        var_names = tuple(var_names)
        if _clean:
            clean = {}
            for m, c in terms.items():
                m = tuple(m)
                if len(m) != len(var_names):
                    raise PolyError(
                        f"exponent tuple {m} does not match {len(var_names)} variables")
                if any(e < 0 or int(e) != e for e in m):
                    raise PolyError(f"exponents must be non-negative integers: {m}")
                m = tuple(int(e) for e in m)
                c = float(c)
                if c != 0.0:
                    clean[m] = clean.get(m, 0.0) + c
            terms = {m: c for m, c in clean.items() if c != 0.0}
        object.__setattr__(self, "terms", terms)
        object.__setattr__(self, "var_names", var_names)

    def __setattr__(self, *a):
        raise AttributeError("Poly is immutable")

    # -- constructors ------------------------------------------------------

    @classmethod
    def zero(cls, var_names):
        return cls({}, var_names, _clean=False)

    @classmethod
    def constant(cls, c, var_names):
        c = float(c)
        n = len(tuple(var_names))
        if c == 0.0:
            return cls.zero(var_names)
        return cls({(0,) * n: c}, var_names, _clean=False)

    @classmethod
    def variable(cls, name, var_names):
        var_names = tuple(var_names)
        try:
            i = var_names.index(name)
        except ValueError:
            raise PolyError(f"unknown variable {name!r}") from None
        e = [0] * len(var_names)
        e[i] = 1
        return cls({tuple(e): 1.0}, var_names, _clean=False)

    # -- basic queries -----------------------------------------------------

    @property
    def nvars(self):
        return len(self.var_names)

    def degree(self):
        """Total degree; NEG_INF for the zero polynomial."""
        if not self.terms:
            return NEG_INF
        return max(sum(m) for m in self.terms)

    def is_zero(self):
        return not self.terms

    def coefficient(self, mono):
        return self.terms.get(tuple(mono), 0.0)

    def __eq__(self, other):
        if not isinstance(other, Poly):
            return NotImplemented
        return self.var_names == other.var_names and self.terms == other.terms

    def __ne__(self, other):
        eq = self.__eq__(other)
        return NotImplemented if eq is NotImplemented else not eq

    def __bool__(self):
        return bool(self.terms)

    # -- arithmetic --------------------------------------------------------

    def _check_vars(self, other):
        if self.var_names != other.var_names:
            raise PolyError(
                f"variable mismatch: {self.var_names} vs {other.var_names}")

    def _coerce(self, other):
        if isinstance(other, Poly):
            self._check_vars(other)
            return other
        if isinstance(other, (int, float)):
            return Poly.constant(other, self.var_names)
        return None

    def __add__(self, other):
        other = self._coerce(other)
        if other is None:
            return NotImplemented
        res = dict(self.terms)
        for m, c in other.terms.items():
            s = res.get(m, 0.0) + c
            if s == 0.0:
                res.pop(m, None)
            else:
                res[m] = s
        return Poly(res, self.var_names, _clean=False)

    __radd__ = __add__

    def __neg__(self):
        return Poly({m: -c for m, c in self.terms.items()}, self.var_names,
                    _clean=False)

    def __sub__(self, other):
        other = self._coerce(other)
        if other is None:
            return NotImplemented
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.scale(other)
        if not isinstance(other, Poly):
            return NotImplemented
        self._check_vars(other)
        res = {}
        for m1, c1 in self.terms.items():
            for m2, c2 in other.terms.items():
                m = mono_mul(m1, m2)
                s = res.get(m, 0.0) + c1 * c2
                res[m] = s
        res = {m: c for m, c in res.items() if c != 0.0}
        return Poly(res, self.var_names, _clean=False)

    __rmul__ = __mul__

    def scale(self, a):
        a = float(a)
        if a == 0.0:
            return Poly.zero(self.var_names)
        return Poly({m: a * c for m, c in self.terms.items()}, self.var_names,
                    _clean=False)

    def __pow__(self, n):
        if int(n) != n or n < 0:
            raise PolyError(f"exponent must be a non-negative integer, got {n}")
        n = int(n)
        result = Poly.constant(1.0, self.var_names)
        base = self
        while n:
            if n & 1:
                result = result * base
            base = base * base if n > 1 else base
            n >>= 1
        return result

    # -- calculus ----------------------------------------------------------

    def differentiate(self, var_index):
        if not 0 <= var_index < self.nvars:
            raise PolyError(f"variable index {var_index} out of range")
        res = {}
        for m, c in self.terms.items():
            e = m[var_index]
            if e == 0:
                continue
            dm = list(m)
            dm[var_index] = e - 1
            dm = tuple(dm)
            res[dm] = res.get(dm, 0.0) + c * e
        res = {m: c for m, c in res.items() if c != 0.0}
        return Poly(res, self.var_names, _clean=False)

    # -- evaluation --------------------------------------------------------

    def evaluate(self, point):
        point = tuple(point)
        if len(point) != self.nvars:
            raise PolyError(
                f"point has dimension {len(point)}, expected {self.nvars}")
        total = 0.0
        for m, c in self.terms.items():
            v = c
            for x, e in zip(point, m):
                if e:
                    v *= x ** e
            total += v
        return total

    def __call__(self, point):
        return self.evaluate(point)

    def evaluate_many(self, points):
        """Vectorized evaluation at an (N, nvars) array of points."""
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            points = points[None, :]
        if points.shape[1] != self.nvars:
            raise PolyError(
                f"points have dimension {points.shape[1]}, expected {self.nvars}")
        if not self.terms:
            return np.zeros(points.shape[0])
        E, coef = self.exponent_matrix()
        out = np.zeros(points.shape[0])
        chunk = max(1, 2_000_000 // max(1, len(coef) * self.nvars))
        for lo in range(0, points.shape[0], chunk):
            p = points[lo:lo + chunk]
            mono = np.prod(p[:, None, :] ** E[None, :, :], axis=2)
            out[lo:lo + chunk] = mono @ coef
        return out

    def exponent_matrix(self):
        """(terms x nvars) int array and matching coefficient vector, grlex order."""
        monos = sorted(self.terms, key=grlex_key)
        E = np.array(monos, dtype=np.int64).reshape(len(monos), self.nvars)
        coef = np.array([self.terms[m] for m in monos])
        return E, coef

    # -- substitution ------------------------------------------------------

    def substitute(self, assignments, target_vars=None):
        """Compose: replace variables by polynomials or constants.

        ``assignments`` maps variable names to Poly (over a common target
        variable set) or numeric constants.  Unassigned variables map to
        themselves and must exist in the target variable set.
        """
        for name in assignments:
            if name not in self.var_names:
                raise PolyError(f"unknown variable in assignments: {name!r}")
        if target_vars is None:
            target_vars = None
            for v in assignments.values():
                if isinstance(v, Poly):
                    if target_vars is not None and v.var_names != target_vars:
                        raise PolyError("replacement polynomials disagree on "
                                        "the target variable set")
                    target_vars = v.var_names
            if target_vars is None:
                target_vars = self.var_names
        target_vars = tuple(target_vars)

        repl = []
        for name in self.var_names:
            v = assignments.get(name)
            if v is None:
                repl.append(Poly.variable(name, target_vars))
            elif isinstance(v, Poly):
                if v.var_names != target_vars:
                    raise PolyError("replacement polynomials disagree on "
                                    "the target variable set")
                repl.append(v)
            else:
                repl.append(Poly.constant(v, target_vars))

        # cache powers of each replacement
        pow_cache = [{0: Poly.constant(1.0, target_vars)} for _ in repl]

        def rpow(i, e):
            cache = pow_cache[i]
            if e not in cache:
                cache[e] = rpow(i, e - 1) * repl[i]
            return cache[e]

        total = Poly.zero(target_vars)
        for m, c in self.terms.items():
            term = Poly.constant(c, target_vars)
            for i, e in enumerate(m):
                if e:
                    term = term * rpow(i, e)
            total = total + term
        return total

    # -- printing ----------------------------------------------------------

    def to_text(self, digits=None):
        """Deterministic printer, grlex-descending terms.

        With digits=None coefficients use the shortest round-tripping
        float representation so parse(to_text(p)) == p exactly; pass e.g.
        digits=12 for fixed "%.12g" display output.
        """
        if not self.terms:
            return "0"
        monos = sorted(self.terms, key=grlex_key, reverse=True)
        parts = []
        for i, m in enumerate(monos):
            c = self.terms[m]
            mono_txt = "*".join(
                f"{n}^{e}" if e > 1 else n
                for n, e in zip(self.var_names, m) if e > 0)
            ac = abs(c)
            txt = (f"%.{digits}g" % ac) if digits else repr(ac)
            if mono_txt:
                body = mono_txt if txt in ("1.0", "1") else f"{txt}*{mono_txt}"
            else:
                body = txt
            if i == 0:
                parts.append(body if c >= 0 else f"-{body}")
            else:
                parts.append(f"+ {body}" if c >= 0 else f"- {body}")
        return " ".join(parts)

    def __str__(self):
        return self.to_text()

    def __repr__(self):
        return f"Poly({self.to_text()!r}, vars={self.var_names})"


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(r"""
    (?P<num>\d+\.\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?|\d+(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>[-+*^()])
  | (?P<ws>\s+)
""", re.VERBOSE)


def _tokenize(text):
    pos = 0
    tokens = []
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", pos)
        if m.lastgroup != "ws":
            tokens.append((m.lastgroup, m.group(), pos))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    """Recursive descent over: expr := ['+'|'-'] term (('+'|'-') term)*,
    term := factor ('*' factor)*, factor := atom ['^' uint],
    atom := number | name | '(' expr ')'.  No implicit multiplication."""

    def __init__(self, text, var_names):
        self.tokens = _tokenize(text)
        self.i = 0
        self.var_names = tuple(var_names)

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        t = self.tokens[self.i]
        self.i += 1
        return t

    def expr(self):
        kind, val, pos = self.peek()
        neg = False
        if kind == "op" and val in "+-":
            self.take()
            neg = val == "-"
        p = self.term()
        if neg:
            p = -p
        while True:
            kind, val, pos = self.peek()
            if kind == "op" and val in "+-":
                self.take()
                q = self.term()
                p = p - q if val == "-" else p + q
            else:
                return p

    def term(self):
        p = self.factor()
        while True:
            kind, val, pos = self.peek()
            if kind == "op" and val == "*":
                self.take()
                p = p * self.factor()
            elif kind in ("num", "name") or (kind == "op" and val == "("):
                raise ParseError("implicit multiplication is not allowed", pos)
            else:
                return p

    def factor(self):
        p = self.atom()
        kind, val, pos = self.peek()
        if kind == "op" and val == "^":
            self.take()
            kind, val, pos = self.peek()
            if kind == "op" and val == "-":
                raise ParseError("negative exponent", pos)
            if kind != "num":
                raise ParseError("expected integer exponent", pos)
            self.take()
            if any(ch in val for ch in ".eE"):
                raise ParseError(f"exponent must be a non-negative integer, got {val}", pos)
            p = p ** int(val)
        return p

    def atom(self):
        kind, val, pos = self.take()
        if kind == "num":
            return Poly.constant(float(val), self.var_names)
        if kind == "name":
            if val not in self.var_names:
                raise ParseError(f"unknown identifier {val!r}", pos)
            return Poly.variable(val, self.var_names)
        if kind == "op" and val == "(":
            p = self.expr()
            kind, val, pos = self.take()
            if not (kind == "op" and val == ")"):
                raise ParseError("expected ')'", pos)
            return p
        raise ParseError(f"unexpected token {val!r}" if val else "unexpected end of input", pos)


def parse_poly(text, var_names):
    """Parse a polynomial expression (+ - * ^, parentheses, real literals)."""
    parser = _Parser(text, var_names)
    p = parser.expr()
    kind, val, pos = parser.peek()
    if kind != "end":
        raise ParseError(f"unexpected token {val!r}", pos)
    return p


# ---------------------------------------------------------------------------
# Lie derivative
# ---------------------------------------------------------------------------

def lie_derivative(v, f, time_var="t"):
    """dv/dt + grad_x v . f for v over (t, x) and vector field f over x.

    v's variable set must contain ``time_var``; the remaining variables
    must match the (common) variable set of the components of f, in
    order.  Returns a polynomial over v's variables.
    """
    if time_var not in v.var_names:
        raise PolyError(f"time variable {time_var!r} not among {v.var_names}")
    t_idx = v.var_names.index(time_var)
    state_names = tuple(n for n in v.var_names if n != time_var)
    if len(f) != len(state_names):
        raise PolyError(
            f"vector field has {len(f)} components, state has {len(state_names)}")
    out = v.differentiate(t_idx)
    for name, fi in zip(state_names, f):
        if fi.var_names != state_names:
            if not set(fi.var_names) <= set(state_names):
                raise PolyError(
                    f"field component variables {fi.var_names} != {state_names}")
            fi = fi.substitute({}, target_vars=state_names)
        fi_tx = fi.substitute({}, target_vars=v.var_names)
        out = out + v.differentiate(v.var_names.index(name)) * fi_tx
    return out
