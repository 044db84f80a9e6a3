"""A small reverse-mode differentiation tape over a closed set of primitives.

Values are numpy arrays; every primitive acts on whole batches of rows so
a full-graph forward pass records only a few dozen nodes.  The tape is a
straight-line program: nodes are appended in evaluation order, which is
also a topological order, and :meth:`Tape.replay` can re-execute it with
different leaf values (this is what :func:`grad_check` relies on).

Example
-------
>>> tape = Tape()
>>> v = tape.leaf("v", [1.0, 2.0])
>>> loss = tape.record("weighted_sum", [v * v], weights=np.ones(2))
>>> tape.backward(loss)["v"]
array([2., 4.])
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import geometry as geo
from ._validation import ARTANH_MAX

__all__ = ["GradCheckReport", "Node", "PRIMITIVES", "Tape", "grad_check"]

_TINY = 1e-15
# below this arcosh argument the distance gradients use their limit
_Z_GUARD = 1e-12


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _radial_vjp(g, x, factor, dfactor_dr_times_r):
    """Backward of ``y = phi(r) * x / r`` written as ``y = c(r) * x``.

    ``factor`` is ``c(r)`` and ``dfactor_dr_times_r`` is ``r * c'(r)``,
    so that ``dy/dx = c I + (r c'(r)) xhat xhat^T``.
    """
    r = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    xhat = x / np.maximum(r, _TINY)
    proj = np.sum(xhat * g, axis=-1, keepdims=True)
    return factor * g + dfactor_dr_times_r * proj * xhat


# -- primitive forward/backward pairs --------------------------------------


def _exp_o_fwd(v, *, k):
    return geo.exp_o_kernel(v, k)


def _exp_o_vjp(g, out, v, *, k):
    s = np.sqrt(k)
    r = np.sqrt(np.sum(v * v, axis=-1, keepdims=True))
    safe = np.maximum(r, _TINY)
    th = np.tanh(safe / s)
    clipped = s * th > geo.max_norm(k)
    phi = np.where(clipped, geo.max_norm(k), s * th)
    dphi = np.where(clipped, 0.0, 1.0 - th * th)
    factor = np.where(r > _TINY, phi / safe, 1.0)
    # r c'(r) = phi'(r) - phi(r)/r
    rdc = np.where(r > _TINY, dphi - phi / safe, 0.0)
    return (_radial_vjp(g, v, factor, rdc),)


def _log_o_fwd(y, *, k):
    return geo.log_o_kernel(y, k)


def _log_o_vjp(g, out, y, *, k):
    s = np.sqrt(k)
    r = np.sqrt(np.sum(y * y, axis=-1, keepdims=True))
    safe = np.maximum(r, _TINY)
    t = safe / s
    clamped = t >= ARTANH_MAX
    tc = np.minimum(t, ARTANH_MAX)
    phi = s * np.arctanh(tc)
    dphi = np.where(clamped, 0.0, 1.0 / (1.0 - tc * tc))
    factor = np.where(r > _TINY, phi / safe, 1.0)
    rdc = np.where(r > _TINY, dphi - phi / safe, 0.0)
    return (_radial_vjp(g, y, factor, rdc),)


def _mobius_scalar_fwd(y, *, a, k):
    return geo.mobius_scalar_kernel(a, y, k)


def _mobius_scalar_vjp(g, out, y, *, a, k):
    s = np.sqrt(k)
    r = np.sqrt(np.sum(y * y, axis=-1, keepdims=True))
    safe = np.maximum(r, _TINY)
    t = safe / s
    tc = np.minimum(t, ARTANH_MAX)
    th = np.tanh(a * np.arctanh(tc))
    phi = s * th
    flat = (t >= ARTANH_MAX) | (phi > geo.max_norm(k))
    phi = np.minimum(phi, geo.max_norm(k))
    dphi = np.where(flat, 0.0, a * (1.0 - th * th) / (1.0 - tc * tc))
    factor = np.where(r > _TINY, phi / safe, a)
    rdc = np.where(r > _TINY, dphi - phi / safe, 0.0)
    return (_radial_vjp(g, y, factor, rdc),)


def _conformal_fwd(x, *, k):
    return geo.conformal_factor_kernel(x, k)[..., None]


def _conformal_vjp(g, out, x, *, k):
    return (g * out * out / k * x,)


def _dist_parts(x, y, k):
    diff = x - y
    q = np.sum(diff * diff, axis=-1)
    ax = k - np.sum(x * x, axis=-1)
    ay = k - np.sum(y * y, axis=-1)
    z = 2.0 * k * q / (ax * ay)
    c = (4.0 * k / (ax * ay))[..., None]
    dzdx = c * (diff + (q / ax)[..., None] * x)
    dzdy = c * (-diff + (q / ay)[..., None] * y)
    return z, dzdx, dzdy


def _dist_fwd(x, y, *, k):
    return geo.dist_kernel(x, y, k)


def _dist_vjp(g, out, x, y, *, k):
    z, dzdx, dzdy = _dist_parts(x, y, k)
    ok = z >= _Z_GUARD
    zs = np.where(ok, z, 1.0)
    dd = np.where(ok, np.sqrt(k) / np.sqrt(zs * zs + 2.0 * zs), 0.0)
    w = (g * dd)[..., None]
    return w * dzdx, w * dzdy


def _sqdist_fwd(x, y, *, k):
    return geo.sqdist_kernel(x, y, k)


def _sqdist_vjp(g, out, x, y, *, k):
    z, dzdx, dzdy = _dist_parts(x, y, k)
    ok = z >= _Z_GUARD
    zs = np.where(ok, z, 1.0)
    d = np.sqrt(k) * geo.arcosh1p(zs)
    # limit of 2 d dd/dz as z -> 0 is 2k
    dd2 = np.where(ok, 2.0 * d * np.sqrt(k) / np.sqrt(zs * zs + 2.0 * zs), 2.0 * k)
    w = (g * dd2)[..., None]
    return w * dzdx, w * dzdy


def _sigmoid_fwd(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _sigmoid_vjp(g, out, x):
    return (g * out * (1.0 - out),)


def _mul_fwd(a, b):
    return a * b


def _mul_vjp(g, out, a, b):
    return _unbroadcast(g * b, np.shape(a)), _unbroadcast(g * a, np.shape(b))


def _div_fwd(a, b):
    return a / b


def _div_vjp(g, out, a, b):
    ga = g / b
    return _unbroadcast(ga, np.shape(a)), _unbroadcast(-ga * out, np.shape(b))


def _sum_fwd(*xs):
    total = xs[0]
    for x in xs[1:]:
        total = total + x
    return total


def _sum_vjp(g, out, *xs):
    return tuple(_unbroadcast(g, np.shape(x)) for x in xs)


def _weighted_sum_fwd(x, *, weights):
    return weights @ x


def _weighted_sum_vjp(g, out, x, *, weights):
    if np.ndim(weights) == 1:
        return (np.multiply.outer(weights, g),)
    return (weights.T @ g,)


def _matvec_fwd(x, w):
    return x @ w.T


def _matvec_vjp(g, out, x, w):
    return g @ w, g.T @ x


def _norm_fwd(x):
    return np.sqrt(np.sum(x * x, axis=-1, keepdims=True))


def _norm_vjp(g, out, x):
    return (g * x / np.where(out > 0, out, 1.0),)


def _hinge_fwd(x):
    return np.maximum(x, 0.0)


def _hinge_vjp(g, out, x):
    # subgradient 0 at the kink
    return (g * (x > 0),)


def _gather_fwd(x, *, index):
    return x[index]


def _gather_vjp(g, out, x, *, index):
    grad = np.zeros_like(x)
    np.add.at(grad, index, g)
    return (grad,)


PRIMITIVES = {
    "exp_o": (_exp_o_fwd, _exp_o_vjp),
    "log_o": (_log_o_fwd, _log_o_vjp),
    "mobius_scalar": (_mobius_scalar_fwd, _mobius_scalar_vjp),
    "conformal_factor": (_conformal_fwd, _conformal_vjp),
    "dist": (_dist_fwd, _dist_vjp),
    "sqdist": (_sqdist_fwd, _sqdist_vjp),
    "sigmoid": (_sigmoid_fwd, _sigmoid_vjp),
    "mul": (_mul_fwd, _mul_vjp),
    "div": (_div_fwd, _div_vjp),
    "sum": (_sum_fwd, _sum_vjp),
    "weighted_sum": (_weighted_sum_fwd, _weighted_sum_vjp),
    "matvec": (_matvec_fwd, _matvec_vjp),
    "norm": (_norm_fwd, _norm_vjp),
    "hinge": (_hinge_fwd, _hinge_vjp),
    "gather": (_gather_fwd, _gather_vjp),
}


# -- tape ------------------------------------------------------------------


class Node:
    """Handle to a recorded value."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape._values[self.index]

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        entry = self.tape._entries[self.index]
        return f"Node({entry.op}, index={self.index}, shape={self.shape})"

    def __add__(self, other):
        return self.tape.record("sum", [self, other])

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.record("sum", [self, -other])

    def __rsub__(self, other):
        return self.tape.record("sum", [-self, other])

    def __neg__(self):
        return self.tape.record("mul", [self, -1.0])

    def __mul__(self, other):
        return self.tape.record("mul", [self, other])

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self.tape.record("div", [self, other])

    def __rtruediv__(self, other):
        return self.tape.record("div", [other, self])


@dataclass
class _Entry:
    op: str  # primitive name, "leaf" or "const"
    inputs: tuple = ()
    attrs: dict = field(default_factory=dict)
    name: str | None = None


class Tape:
    """Append-only record of a computation.

    Parameters
    ----------
    dtype : numpy dtype, default float64
        Every recorded value is cast to this dtype.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._entries: list[_Entry] = []
        self._values: list[np.ndarray] = []
        self._leaves: dict[str, int] = {}

    def __len__(self):
        return len(self._entries)

    def _append(self, entry: _Entry, value) -> Node:
        self._entries.append(entry)
        self._values.append(np.asarray(value, dtype=self.dtype))
        return Node(self, len(self._entries) - 1)

    def leaf(self, name: str, value) -> Node:
        """Register a differentiable input under a unique name."""
        if name in self._leaves:
            raise ValueError(f"duplicate leaf name {name!r}")
        node = self._append(_Entry("leaf", name=name), np.array(value, dtype=self.dtype))
        self._leaves[name] = node.index
        return node

    def const(self, value) -> Node:
        return self._append(_Entry("const"), value)

    @property
    def leaves(self) -> dict[str, Node]:
        return {name: Node(self, i) for name, i in self._leaves.items()}

    def _as_node(self, x) -> Node:
        if isinstance(x, Node):
            if x.tape is not self:
                raise ValueError("node belongs to a different tape")
            return x
        return self.const(x)

    def record(self, primitive: str, inputs, **attrs) -> Node:
        """Evaluate ``primitive`` on ``inputs`` and append it to the tape.

        ``gyromidpoint`` is accepted as well; it expands into its
        constituent primitives (see :meth:`gyromidpoint`).
        """
        if primitive == "gyromidpoint":
            return self.gyromidpoint(*inputs, **attrs)
        if primitive not in PRIMITIVES:
            raise ValueError(f"unknown primitive {primitive!r}")
        nodes = [self._as_node(x) for x in inputs]
        fwd, _ = PRIMITIVES[primitive]
        value = fwd(*(n.value for n in nodes), **attrs)
        return self._append(_Entry(primitive, tuple(n.index for n in nodes), attrs), value)

    def gyromidpoint(self, points, weights=None, *, k: float = 1.0) -> Node:
        """Gyromidpoints of ``points`` grouped by a non-negative weight matrix.

        ``weights`` has shape ``(m, n)`` (dense or sparse) and row ``i``
        holds the weights of the points averaged into midpoint ``i``; a
        1-D weight vector yields a single midpoint.
        """
        points = self._as_node(points)
        n = points.shape[0]
        if weights is None:
            weights = np.ones(n)
        lam = self.record("conformal_factor", [points], k=k)
        num = self.record("weighted_sum", [lam * points], weights=weights)
        den = self.record("weighted_sum", [lam - 1.0], weights=weights)
        return self.record("mobius_scalar", [num / den], a=0.5, k=k)

    def backward(self, output: Node) -> dict[str, np.ndarray]:
        """Gradients of a scalar ``output`` with respect to every leaf."""
        if output.tape is not self:
            raise ValueError("output belongs to a different tape")
        if output.value.size != 1:
            raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
        grads: list[np.ndarray | None] = [None] * (output.index + 1)
        grads[output.index] = np.ones_like(output.value)
        for i in range(output.index, -1, -1):
            g = grads[i]
            entry = self._entries[i]
            if g is None or entry.op in ("leaf", "const"):
                continue
            _, vjp = PRIMITIVES[entry.op]
            ins = [self._values[j] for j in entry.inputs]
            for j, gj in zip(entry.inputs, vjp(g, self._values[i], *ins, **entry.attrs)):
                if self._entries[j].op == "const":
                    continue
                gj = np.asarray(gj, dtype=self.dtype)
                grads[j] = gj if grads[j] is None else grads[j] + gj
        out = {}
        for name, i in self._leaves.items():
            g = grads[i] if i < len(grads) else None
            out[name] = np.zeros_like(self._values[i]) if g is None else g
        return out

    def replay(self, overrides: dict | None = None, dtype=None) -> list[np.ndarray]:
        """Re-run the recorded program, optionally with new leaf values."""
        overrides = overrides or {}
        dtype = self.dtype if dtype is None else np.dtype(dtype)
        values: list[np.ndarray] = []
        for entry, old in zip(self._entries, self._values):
            if entry.op == "leaf":
                v = overrides.get(entry.name, old)
            elif entry.op == "const":
                v = old
            else:
                fwd, _ = PRIMITIVES[entry.op]
                v = fwd(*(values[j] for j in entry.inputs), **entry.attrs)
            values.append(np.asarray(v, dtype=dtype))
        return values

    def hinge_margin(self, values: list[np.ndarray] | None = None) -> float:
        """Smallest ``|x|`` over all hinge inputs (``inf`` without hinges)."""
        values = self._values if values is None else values
        best = np.inf
        for entry in self._entries:
            if entry.op == "hinge":
                x = values[entry.inputs[0]]
                if x.size:
                    best = min(best, float(np.min(np.abs(x))))
        return best


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    worst_leaf: str | None
    worst_index: tuple | None
    n_checked: int
    hinge_margin: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        where = "" if self.worst_leaf is None else f" at {self.worst_leaf}{list(self.worst_index)}"
        return (
            f"grad-check {status}: max relative error {self.max_rel_err:.3e}"
            f" (tol {self.tol:.0e}){where} over {self.n_checked} coordinates"
        )


def grad_check(
    tape: Tape,
    output: Node,
    h: float = 1e-6,
    tol: float = 1e-4,
    floor: float = 1e-5,
) -> GradCheckReport:
    """Compare reverse-mode gradients against central differences.

    The finite-difference reference always replays the tape in float64,
    whatever dtype the tape itself uses.  The relative error of one
    coordinate is ``|ad - fd| / max(|ad|, |fd|, floor)``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    grads = tape.backward(output)
    base = {name: np.array(node.value, dtype=np.float64) for name, node in tape.leaves.items()}
    worst, worst_leaf, worst_index, count = 0.0, None, None, 0
    for name, theta in base.items():
        ad = np.asarray(grads[name], dtype=np.float64)
        for idx in np.ndindex(theta.shape):
            plus, minus = theta.copy(), theta.copy()
            plus[idx] += h
            minus[idx] -= h
            fp = tape.replay({**base, name: plus}, dtype=np.float64)[output.index]
            fm = tape.replay({**base, name: minus}, dtype=np.float64)[output.index]
            fd = float(np.sum(fp) - np.sum(fm)) / (2.0 * h)
            a = float(ad[idx])
            err = abs(a - fd) / max(abs(a), abs(fd), floor)
            count += 1
            if err > worst or worst_leaf is None:
                worst, worst_leaf, worst_index = err, name, idx
    margin = tape.hinge_margin(tape.replay(base, dtype=np.float64))
    return GradCheckReport(worst, tol, worst_leaf, worst_index, count, margin)
