"""Forward-mode Taylor jets over numpy arrays.

Jet1 carries one directional derivative; Jet2 carries two directions plus the
mixed second derivative, which is exactly what the adjoint of a force Jacobian
contraction needs. Arithmetic supports the operations used by the cloth force
kernels: +, -, *, /, sqrt, atan2, dot, cross.
"""

from __future__ import annotations

import numpy as np


class Jet1:
    __slots__ = ("v", "d")

    def __init__(self, v, d):
        self.v = np.asarray(v, dtype=float)
        self.d = np.asarray(d, dtype=float)

    @staticmethod
    def lift(v):
        v = np.asarray(v, dtype=float)
        return Jet1(v, np.zeros_like(v))

    def __add__(self, o):
        o = o if isinstance(o, Jet1) else Jet1.lift(o)
        return Jet1(self.v + o.v, self.d + o.d)

    __radd__ = __add__

    def __neg__(self):
        return Jet1(-self.v, -self.d)

    def __sub__(self, o):
        o = o if isinstance(o, Jet1) else Jet1.lift(o)
        return Jet1(self.v - o.v, self.d - o.d)

    def __rsub__(self, o):
        return Jet1.lift(o) - self

    def __mul__(self, o):
        o = o if isinstance(o, Jet1) else Jet1.lift(o)
        return Jet1(self.v * o.v, self.v * o.d + self.d * o.v)

    __rmul__ = __mul__

    def __truediv__(self, o):
        o = o if isinstance(o, Jet1) else Jet1.lift(o)
        inv = 1.0 / o.v
        return Jet1(self.v * inv, (self.d - self.v * inv * o.d) * inv)

    def sqrt(self):
        s = np.sqrt(self.v)
        return Jet1(s, 0.5 * self.d / s)


def jet1_atan2(y: Jet1, x: Jet1) -> Jet1:
    r2 = x.v * x.v + y.v * y.v
    return Jet1(np.arctan2(y.v, x.v), (x.v * y.d - y.v * x.d) / r2)


class Jet2:
    """Second-order jet: value, two directional derivatives, mixed term d12."""

    __slots__ = ("v", "d1", "d2", "d12")

    def __init__(self, v, d1, d2, d12):
        self.v = np.asarray(v, dtype=float)
        self.d1 = np.asarray(d1, dtype=float)
        self.d2 = np.asarray(d2, dtype=float)
        self.d12 = np.asarray(d12, dtype=float)

    @staticmethod
    def lift(v):
        v = np.asarray(v, dtype=float)
        z = np.zeros_like(v)
        return Jet2(v, z, z, z)

    def __add__(self, o):
        o = o if isinstance(o, Jet2) else Jet2.lift(o)
        return Jet2(self.v + o.v, self.d1 + o.d1, self.d2 + o.d2, self.d12 + o.d12)

    __radd__ = __add__

    def __neg__(self):
        return Jet2(-self.v, -self.d1, -self.d2, -self.d12)

    def __sub__(self, o):
        o = o if isinstance(o, Jet2) else Jet2.lift(o)
        return Jet2(self.v - o.v, self.d1 - o.d1, self.d2 - o.d2, self.d12 - o.d12)

    def __rsub__(self, o):
        return Jet2.lift(o) - self

    def __mul__(self, o):
        o = o if isinstance(o, Jet2) else Jet2.lift(o)
        return Jet2(self.v * o.v,
                    self.v * o.d1 + self.d1 * o.v,
                    self.v * o.d2 + self.d2 * o.v,
                    self.v * o.d12 + self.d1 * o.d2 + self.d2 * o.d1 + self.d12 * o.v)

    __rmul__ = __mul__

    def reciprocal(self):
        r = 1.0 / self.v
        r2 = r * r
        return Jet2(r, -self.d1 * r2, -self.d2 * r2,
                    (2.0 * self.d1 * self.d2 * r - self.d12) * r2)

    def __truediv__(self, o):
        o = o if isinstance(o, Jet2) else Jet2.lift(o)
        return self * o.reciprocal()

    def __rtruediv__(self, o):
        return Jet2.lift(o) * self.reciprocal()

    def sqrt(self):
        s = np.sqrt(self.v)
        inv = 0.5 / s
        return Jet2(s, self.d1 * inv, self.d2 * inv,
                    self.d12 * inv - self.d1 * self.d2 * inv / (2.0 * self.v))


def jet2_atan2(y: Jet2, x: Jet2) -> Jet2:
    r2 = x.v * x.v + y.v * y.v
    num1 = x.v * y.d1 - y.v * x.d1
    num2 = x.v * y.d2 - y.v * x.d2
    # d2 of (num1 / r2) with num1 = x y1 - y x1:
    dnum12 = x.d2 * y.d1 + x.v * y.d12 - y.d2 * x.d1 - y.v * x.d12
    dr2_2 = 2.0 * (x.v * x.d2 + y.v * y.d2)
    return Jet2(np.arctan2(y.v, x.v), num1 / r2, num2 / r2,
                (dnum12 * r2 - num1 * dr2_2) / (r2 * r2))


# Vector helpers: vectors are represented as length-3 lists of jets (each jet
# holding an array over elements), so cross/dot stay elementwise-vectorized.

def vdot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


def vcross(a, b):
    return [a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0]]


def vsub(a, b):
    return [a[0] - b[0], a[1] - b[1], a[2] - b[2]]


def vscale(s, a):
    return [s * a[0], s * a[1], s * a[2]]


def vnorm(a):
    return vdot(a, a).sqrt()
