"""Dense numpy kernels with reverse-mode gradients.

Every op takes :class:`Var` inputs and returns a :class:`Var` whose
``_backward`` closure pushes the upstream gradient into its parents.  The op
set is deliberately small: it covers what the gait network needs and
nothing else.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

LEAKY_SLOPE = 0.01


class Var:
    """A tensor node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Var(shape={self.shape}, dtype={self.dtype}{tag})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Run reverse accumulation from this node.

        ``grad`` defaults to ones, so calling it on a scalar loss seeds 1.
        """
        if grad is None:
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # Leaf: accumulate into the user-visible slot.
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg

    # Operator sugar; all routed through the functional ops below.
    def __add__(self, other):
        return add(self, as_var(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_var(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_var(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, as_var(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, as_var(other, self.dtype))

    def __neg__(self):
        return neg(self)


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_var(x, dtype=None) -> Var:
    if isinstance(x, Var):
        return x
    return Var(np.asarray(x, dtype=dtype))


def _node(data, parents, backward):
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Var(data, True, parents, backward)
    return Var(data)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural plumbing
# ---------------------------------------------------------------------------

def add(a: Var, b: Var) -> Var:
    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), backward)


def neg(a: Var) -> Var:
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a: Var, b: Var) -> Var:
    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), backward)


def div(a: Var, b: Var) -> Var:
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _node(out, (a, b), backward)


def add_n(vars_: Sequence[Var]) -> Var:
    out = vars_[0].data
    for v in vars_[1:]:
        out = out + v.data

    def backward(g):
        return tuple(_unbroadcast(g, v.shape) for v in vars_)

    return _node(out, vars_, backward)


def sum(a: Var, axis=None, keepdims=False) -> Var:  # noqa: A001 - mirrors numpy
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), backward)


def mean(a: Var, axis=None, keepdims=False) -> Var:
    axes = range(a.ndim) if axis is None else np.atleast_1d(axis)
    count = int(np.prod([a.shape[i] for i in axes]))
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reduce_max(a: Var, axis: int, keepdims=False) -> Var:
    """Max along one axis; the gradient goes to the first maximal index."""
    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(idx, axis), g, axis)
        return (ga,)

    return _node(out, (a,), backward)


def maximum_n(vars_: Sequence[Var]) -> Var:
    """Elementwise max across same-shape tensors, first operand wins ties."""
    stacked = np.stack([v.data for v in vars_])
    idx = np.argmax(stacked, axis=0)
    out = np.take_along_axis(stacked, idx[None], 0)[0]

    def backward(g):
        return tuple(np.where(idx == i, g, 0.0).astype(g.dtype) for i in range(len(vars_)))

    return _node(out, vars_, backward)


def reshape(a: Var, shape) -> Var:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Var, axes) -> Var:
    inv = np.argsort(axes)
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def broadcast_to(a: Var, shape) -> Var:
    return _node(np.broadcast_to(a.data, shape), (a,), lambda g: (_unbroadcast(g, a.shape),))


def concat(vars_: Sequence[Var], axis: int) -> Var:
    out = np.concatenate([v.data for v in vars_], axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in vars_])

    def backward(g):
        sl = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[axis] = slice(lo, hi)
            parts.append(g[tuple(sl)])
        return tuple(parts)

    return _node(out, vars_, backward)


def take_along(a: Var, idx: np.ndarray, axis: int) -> Var:
    """Hard gather; indices are constants for differentiation."""
    out = np.take_along_axis(a.data, idx, axis)

    def backward(g):
        ga = np.zeros_like(a.data)
        # Duplicate indices must accumulate, so no put_along_axis here.
        full = np.indices(idx.shape, sparse=True)
        full = list(np.broadcast_arrays(*full))
        full[axis] = idx
        np.add.at(ga, tuple(full), g)
        return (ga,)

    return _node(out, (a,), backward)


def einsum(spec: str, a: Var, b: Var) -> Var:
    """Two-operand einsum.

    Every index of one operand must appear in the other operand or in the
    output, which holds for all the contractions used here.
    """
    ins, out_s = spec.split("->")
    sa, sb = ins.split(",")
    for s, other in ((sa, sb + out_s), (sb, sa + out_s)):
        missing = set(s) - set(other)
        if missing:
            raise ValueError(f"einsum index {sorted(missing)} summed without partner in {spec!r}")
    out = np.einsum(spec, a.data, b.data, optimize=True)

    def backward(g):
        ga = np.einsum(f"{out_s},{sb}->{sa}", g, b.data, optimize=True) if a.requires_grad else None
        gb = np.einsum(f"{out_s},{sa}->{sb}", g, a.data, optimize=True) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), backward)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def linear(x: Var, w: Var, b: Var | None = None) -> Var:
    """``y = x @ w (+ b)`` over the trailing axis."""
    cin, cout = w.shape
    if x.shape[-1] != cin:
        raise ValueError(f"linear: input last axis {x.shape[-1]} != weight rows {cin}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, cin)
    out = x2 @ w.data
    if b is not None:
        if b.shape != (cout,):
            raise ValueError(f"linear: bias shape {b.shape} != ({cout},)")
        out = out + b.data
    out = out.reshape(*lead, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, backward)


def conv2d(x: Var, w: Var, b: Var, pad: int = 1, stride: int = 1) -> Var:
    """2D cross-correlation, NCHW in and out.

    Internally channels-last im2col followed by one matmul.
    """
    if x.ndim != 4:
        raise ValueError(f"conv2d: expected rank-4 input, got shape {x.shape}")
    B, cin, H, W = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ValueError(f"conv2d: channel axis mismatch, input has {cin}, weight expects {wcin}")
    if b.shape != (cout,):
        raise ValueError(f"conv2d: bias axis mismatch, {b.shape} vs ({cout},)")
    if pad < 0 or stride < 1:
        raise ValueError("conv2d: pad must be >= 0 and stride >= 1")
    if H + 2 * pad < kh:
        raise ValueError(f"conv2d: height axis {H} too small for kernel {kh} with pad {pad}")
    if W + 2 * pad < kw:
        raise ValueError(f"conv2d: width axis {W} too small for kernel {kw} with pad {pad}")
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    xl = x.data.transpose(0, 2, 3, 1)
    xp = np.pad(xl, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = np.empty((B, Ho, Wo, kh, kw, cin), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :]
    cols = cols.reshape(B * Ho * Wo, kh * kw * cin)
    wmat = w.data.transpose(2, 3, 1, 0).reshape(kh * kw * cin, cout)
    out = (cols @ wmat + b.data).reshape(B, Ho, Wo, cout).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (cols.T @ g2).reshape(kh, kw, cin, cout).transpose(3, 2, 0, 1) if w.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(B, Ho, Wo, kh, kw, cin)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, pad:pad + H, pad:pad + W, :].transpose(0, 3, 1, 2)
        return gx, gw, gb

    return _node(out, (x, w, b), backward)


def max_pool2d(x: Var, k: int = 2, s: int = 2) -> Var:
    if k != 2 or s != 2:
        raise ValueError("max_pool2d: only kernel 2, stride 2 is supported")
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"max_pool2d: odd spatial extent {H}x{W}")
    blocks = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(B, C, H // 2, W // 2, 4)
    idx = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], -1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], -1)
        gb = gb.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(B, C, H, W),)

    return _node(out, (x,), backward)


def _shift_stack(xd, pad):
    """Zero-padded taps along the last axis: result[..., t, n] = x[..., n+t-pad]."""
    N = xd.shape[-1]
    xp = np.pad(xd, [(0, 0)] * (xd.ndim - 1) + [(pad, pad)])
    return np.stack([xp[..., t:t + N] for t in range(2 * pad + 1)], axis=-2)


def _unshift(gtaps, pad):
    N = gtaps.shape[-1]
    gxp = np.zeros(gtaps.shape[:-2] + (N + 2 * pad,), dtype=gtaps.dtype)
    for t in range(2 * pad + 1):
        gxp[..., t:t + N] += gtaps[..., t, :]
    return gxp[..., pad:pad + N]


def conv1d_temporal(x: Var, w: Var, b: Var, pad: int = 1) -> Var:
    """Length-preserving temporal conv over the last (frame) axis.

    ``x`` is ``[B, K, Cin, N]``; the kernel is shared across the part axis.
    """
    B, K, cin, N = x.shape
    cout, wcin, taps = w.shape
    if N < 1:
        raise ValueError("conv1d_temporal: empty frame axis")
    if wcin != cin:
        raise ValueError(f"conv1d_temporal: channel axis mismatch {cin} vs {wcin}")
    if taps != 2 * pad + 1:
        raise ValueError(f"conv1d_temporal: kernel size {taps} incompatible with pad {pad}")
    xs = _shift_stack(x.data, pad)  # B,K,Cin,T,N
    out = np.einsum("bkctn,oct->bkon", xs, w.data, optimize=True) + b.data[:, None]

    def backward(g):
        gw = np.einsum("bkon,bkctn->oct", g, xs, optimize=True) if w.requires_grad else None
        gb = g.sum(axis=(0, 1, 3)) if b.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = _unshift(np.einsum("bkon,oct->bkctn", g, w.data, optimize=True), pad)
        return gx, gw, gb

    return _node(out, (x, w, b), backward)


def dwconv1d_temporal(x: Var, w: Var, pad: int = 1) -> Var:
    """Depth-wise temporal conv: one 3-tap kernel per channel, ``x`` is [B,K,C,N]."""
    B, K, C, N = x.shape
    if w.shape[0] != C:
        raise ValueError(f"dwconv1d_temporal: channel count mismatch {C} vs {w.shape[0]}")
    if w.shape[1] != 2 * pad + 1:
        raise ValueError("dwconv1d_temporal: kernel size incompatible with pad")
    xs = _shift_stack(x.data, pad)  # B,K,C,T,N
    out = np.einsum("bkctn,ct->bkcn", xs, w.data, optimize=True)

    def backward(g):
        gw = np.einsum("bkcn,bkctn->ct", g, xs, optimize=True) if w.requires_grad else None
        gx = _unshift(g[..., None, :] * w.data[:, :, None], pad) if x.requires_grad else None
        return gx, gw

    return _node(out, (x, w), backward)


def softmax(x: Var, axis: int = -1) -> Var:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), backward)


def layer_norm(x: Var, gamma: Var, beta: Var, eps: float = 1e-5) -> Var:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gbeta = g.sum(axis=lead) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return _node(out, (x, gamma, beta), backward)


def leaky_relu(x: Var, slope: float = LEAKY_SLOPE) -> Var:
    pos = x.data > 0
    out = np.where(pos, x.data, x.data * slope)
    return _node(out, (x,), lambda g: (np.where(pos, g, g * slope),))


def relu(x: Var) -> Var:
    pos = x.data > 0
    return _node(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (np.where(pos, g, 0).astype(g.dtype),))


def sigmoid(x: Var) -> Var:
    # Split by sign so exp never overflows.
    xd = x.data
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype)
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),))


def activation(x: Var, kind: str) -> Var:
    try:
        fn = {"leaky_relu": leaky_relu, "relu": relu, "sigmoid": sigmoid}[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# parameters and gradient checking
# ---------------------------------------------------------------------------

class ParamSet:
    """Ordered name -> leaf :class:`Var` map."""

    def __init__(self):
        self._vars: dict[str, Var] = {}

    def add(self, name: str, value, requires_grad: bool = True) -> Var:
        if name in self._vars:
            raise KeyError(f"duplicate parameter {name!r}")
        v = Var(np.asarray(value), requires_grad=requires_grad, name=name)
        self._vars[name] = v
        return v

    def __getitem__(self, name) -> Var:
        return self._vars[name]

    def __contains__(self, name):
        return name in self._vars

    def __iter__(self):
        return iter(self._vars)

    def __len__(self):
        return len(self._vars)

    def items(self):
        return self._vars.items()

    def names(self):
        return list(self._vars)

    def trainable(self):
        return [(n, v) for n, v in self._vars.items() if v.requires_grad]

    def zero_grad(self):
        for v in self._vars.values():
            v.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {n: (v.grad if v.grad is not None else np.zeros_like(v.data))
                for n, v in self._vars.items() if v.requires_grad}

    def astype(self, dtype) -> "ParamSet":
        out = ParamSet()
        for n, v in self._vars.items():
            out.add(n, v.data.astype(dtype), v.requires_grad)
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: v.data for n, v in self._vars.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        missing = set(self._vars) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for n, v in self._vars.items():
            arr = np.asarray(state[n])
            if arr.shape != v.shape:
                raise ValueError(f"parameter {n!r}: shape {arr.shape} != {v.shape}")
            v.data = arr.astype(v.dtype, copy=True)

    def num_elements(self) -> int:
        return int(np.sum([v.data.size for v in self._vars.values()]))


@dataclass
class GradCheckReport:
    max_error: float
    per_param: dict[str, float] = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)
    retried: int = 0

    @property
    def ok(self):
        return not self.failures


def grad_check_report(fn: Callable[[], Var], params: ParamSet, eps: float = 1e-6,
                      max_entries: int | None = None, seed: int = 0,
                      names: Iterable[str] | None = None, tol: float = 1e-7) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``fn`` must rebuild the scalar loss from ``params`` on each call.
    Errors are ``|analytic - numeric| / max(1, |numeric|)``.  With
    ``max_entries`` only that many randomly chosen coordinates per tensor
    are perturbed.  Frozen parameters report 0.  Coordinates whose error
    exceeds ``tol`` are re-measured with steps ``eps/10`` and ``eps/100``.
    """
    rng = np.random.default_rng(seed)
    params.zero_grad()
    loss = fn()
    report = GradCheckReport(0.0)
    if not np.isfinite(loss.data).all():
        report.max_error = float("inf")
        report.failures.append("<loss>: non-finite value")
        return report
    loss.backward()
    base = float(loss.data)
    selected = list(params) if names is None else list(names)
    for name in selected:
        v = params[name]
        if not v.requires_grad:
            report.per_param[name] = 0.0
            continue
        analytic = v.grad if v.grad is not None else np.zeros_like(v.data)
        flat = v.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            coords = rng.choice(flat.size, size=max_entries, replace=False)
        worst = 0.0
        for c in coords:
            err = None
            # An error that shrinks with the step (or vanishes on one side) means
            # a kink (relu, max, argmax switch) lies within the step; the
            # smallest error over the ladder and over the central / one-sided
            # quotients is kept.
            for step in (eps, eps / 10, eps / 100):
                quotients = _differences(fn, flat, c, step, base)
                if quotients is None:
                    report.failures.append(f"{name}[{c}]: non-finite loss under perturbation")
                    err = float("inf")
                    break
                a = analytic.reshape(-1)[c]
                e = min(abs(a - q) / max(1.0, abs(q)) for q in quotients)
                err = e if err is None else min(err, e)
                if err <= tol:
                    break
                report.retried += 1
            worst = max(worst, float(err))
            if not np.isfinite(worst):
                break
        report.per_param[name] = worst
        report.max_error = max(report.max_error, worst)
    return report


def _differences(fn, flat, c, step, base):
    """(central, forward, backward) difference quotients, or None if non-finite."""
    orig = flat[c]
    flat[c] = orig + step
    fp = float(fn().data)
    flat[c] = orig - step
    fm = float(fn().data)
    flat[c] = orig
    if not (np.isfinite(fp) and np.isfinite(fm)):
        return None
    return (fp - fm) / (2 * step), (fp - base) / step, (base - fm) / step


def grad_check(fn: Callable[[], Var], params: ParamSet, eps: float = 1e-6, **kwargs) -> float:
    """Max relative gradient error over ``params`` (inf when the loss is non-finite)."""
    return grad_check_report(fn, params, eps, **kwargs).max_error
