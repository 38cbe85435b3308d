"""Minimal reverse-mode automatic differentiation over dense channel-major
3D tensors.

Tensors wrap float64 numpy arrays shaped (channels, nz, ny, nx); scalar
results of reductions are 0-d arrays. Ops record themselves on a Tape when
one is supplied and any input requires gradients; backward() replays the
tape once in reverse order, accumulating gradients into .grad buffers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product
from typing import Callable, Sequence

import numpy as np

# When True, every op output is checked for NaN/Inf (slow; for debugging).
_DEBUG_NANCHECK = False


def set_debug_nancheck(flag: bool):
    global _DEBUG_NANCHECK
    _DEBUG_NANCHECK = bool(flag)


class Tensor:
    """A float64 array plus gradient bookkeeping."""

    __slots__ = ("value", "requires_grad", "grad")

    def __init__(self, value, requires_grad: bool = False):
        arr = np.asarray(value, dtype=np.float64)
        if requires_grad and not arr.flags.writeable:
            arr = arr.copy()
        self.value = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def channels(self) -> int:
        return self.value.shape[0] if self.value.ndim == 4 else 1

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.value.shape[-3:]
        return (nx, ny, nz)

    def detach(self) -> "Tensor":
        return Tensor(self.value, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"


@dataclass
class _TapeOp:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of ops for one forward pass.

    backward() may be called once per recording; call reset() to reuse.
    """

    def __init__(self):
        self._ops: list[_TapeOp] = []
        self._consumed = False
        self.visit_counts: list[int] = []

    def __len__(self):
        return len(self._ops)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward_fn):
        if self._consumed:
            raise RuntimeError("tape already consumed by backward(); reset() before reuse")
        self._ops.append(_TapeOp(out, tuple(inputs), backward_fn))
        self.visit_counts.append(0)

    def reset(self):
        self._ops.clear()
        self.visit_counts.clear()
        self._consumed = False

    def backward(self, out: Tensor) -> dict[int, np.ndarray]:
        """Accumulate d(out)/d(leaf) for every requires_grad leaf reachable
        from out; fills .grad on those tensors and returns {id: grad}."""
        if self._consumed:
            raise RuntimeError("tape already consumed by backward(); reset() before reuse")
        if out.value.size != 1:
            raise ValueError(f"backward needs a scalar output, got shape {out.value.shape}")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(out): np.ones_like(out.value)}
        produced = {id(op.out) for op in self._ops}
        leaves: dict[int, Tensor] = {}
        for i in range(len(self._ops) - 1, -1, -1):
            op = self._ops[i]
            self.visit_counts[i] += 1
            g_out = grads.pop(id(op.out), None)
            if g_out is None:
                continue
            if _DEBUG_NANCHECK and not np.all(np.isfinite(g_out)):
                raise FloatingPointError("non-finite gradient encountered during backward")
            in_grads = op.backward(g_out)
            for t, g in zip(op.inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                if key not in produced:
                    leaves[key] = t
        for key, t in leaves.items():
            t.grad = grads[key]
        return grads


def backward(tape: Tape, out: Tensor) -> dict[int, np.ndarray]:
    """Run reverse-mode accumulation from a scalar output node."""
    return tape.backward(out)


# ---------------------------------------------------------------------------
# op plumbing
# ---------------------------------------------------------------------------


def _make(tape: Tape | None, value: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    if _DEBUG_NANCHECK and not np.all(np.isfinite(value)):
        raise FloatingPointError("non-finite value produced by an op")
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs)
    if needs:
        tape.record(out, inputs, backward_fn)
    return out


def _same_shape(a: Tensor, b: Tensor, what: str):
    if a.value.shape != b.value.shape:
        raise ValueError(f"{what}: shape mismatch {a.value.shape} vs {b.value.shape}")


# ---------------------------------------------------------------------------
# elementwise and scalar ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    _same_shape(a, b, "add")
    return _make(tape, a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(tape, a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    _same_shape(a, b, "mul")
    av, bv = a.value, b.value
    return _make(tape, av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Elementwise a/b; b may have a single channel broadcast over a's."""
    av, bv = a.value, b.value
    if av.shape != bv.shape:
        if not (av.ndim == bv.ndim == 4 and bv.shape[0] == 1 and av.shape[1:] == bv.shape[1:]):
            raise ValueError(f"div: shape mismatch {av.shape} vs {bv.shape}")
    out = av / bv

    def bw(g):
        ga = g / bv
        gb = -g * out / bv
        if bv.shape != av.shape:
            gb = gb.sum(axis=0, keepdims=True)
        return (ga, gb)

    return _make(tape, out, (a, b), bw)


def elementwise(a: Tensor, b: Tensor, kind: str, tape: Tape | None = None) -> Tensor:
    """Named dispatch for the binary elementwise ops."""
    if kind == "mul":
        return mul(a, b, tape)
    if kind == "add":
        return add(a, b, tape)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def scale(a: Tensor, c: float, tape: Tape | None = None) -> Tensor:
    c = float(c)
    return _make(tape, a.value * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float, tape: Tape | None = None) -> Tensor:
    return _make(tape, a.value + float(c), (a,), lambda g: (g,))


def neg(a: Tensor, tape: Tape | None = None) -> Tensor:
    return _make(tape, -a.value, (a,), lambda g: (-g,))


def square(a: Tensor, tape: Tape | None = None) -> Tensor:
    av = a.value
    return _make(tape, av * av, (a,), lambda g: (2.0 * av * g,))


def exp(a: Tensor, tape: Tape | None = None) -> Tensor:
    out = np.exp(a.value)
    return _make(tape, out, (a,), lambda g: (g * out,))


def sqrt(a: Tensor, tape: Tape | None = None) -> Tensor:
    out = np.sqrt(a.value)

    def bw(g):
        ga = np.zeros_like(g)
        np.divide(0.5 * g, out, out=ga, where=out > 0)
        return (ga,)

    return _make(tape, out, (a,), bw)


def absolute(a: Tensor, tape: Tape | None = None) -> Tensor:
    av = a.value
    return _make(tape, np.abs(av), (a,), lambda g: (g * np.sign(av),))


def maximum_scalar(a: Tensor, c: float, tape: Tape | None = None) -> Tensor:
    """Clamp below at c; subgradient 0 where the clamp is active."""
    c = float(c)
    av = a.value
    return _make(tape, np.maximum(av, c), (a,), lambda g: (g * (av > c),))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def sum_all(a: Tensor, tape: Tape | None = None) -> Tensor:
    shape = a.value.shape
    return _make(tape, np.sum(a.value), (a,), lambda g: (np.full(shape, float(g)),))


def mean_all(a: Tensor, tape: Tape | None = None) -> Tensor:
    shape = a.value.shape
    n = a.value.size
    return _make(tape, np.mean(a.value), (a,), lambda g: (np.full(shape, float(g) / n),))


def channel_sum(a: Tensor, tape: Tape | None = None) -> Tensor:
    """Sum over the channel axis, keeping a 1-channel result."""
    ch = a.value.shape[0]
    out = a.value.sum(axis=0, keepdims=True)
    return _make(tape, out, (a,), lambda g: (np.broadcast_to(g, (ch,) + g.shape[1:]).copy(),))


def concat_channels(parts: Sequence[Tensor], tape: Tape | None = None) -> Tensor:
    counts = [p.value.shape[0] for p in parts]
    base = parts[0].value.shape[1:]
    for p in parts[1:]:
        if p.value.shape[1:] != base:
            raise ValueError(
                f"concat_channels: spatial dims differ, {p.value.shape[1:]} vs {base}"
            )
    out = np.concatenate([p.value for p in parts], axis=0)
    bounds = np.cumsum([0] + counts)

    def bw(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(counts)))

    return _make(tape, out, tuple(parts), bw)


def slice_channels(a: Tensor, start: int, stop: int, tape: Tape | None = None) -> Tensor:
    shape = a.value.shape
    out = a.value[start:stop].copy()

    def bw(g):
        ga = np.zeros(shape)
        ga[start:stop] = g
        return (ga,)

    return _make(tape, out, (a,), bw)


def shifted_crop(a: Tensor, offsets, out_dims, tape: Tape | None = None) -> Tensor:
    """Spatial window a[:, oz:oz+dz, oy:oy+dy, ox:ox+dx] as a new tensor.

    offsets and out_dims are (z, y, x) index tuples.
    """
    oz, oy, ox = offsets
    dz, dy, dx = out_dims
    shape = a.value.shape
    out = a.value[:, oz : oz + dz, oy : oy + dy, ox : ox + dx].copy()

    def bw(g):
        ga = np.zeros(shape)
        ga[:, oz : oz + dz, oy : oy + dy, ox : ox + dx] = g
        return (ga,)

    return _make(tape, out, (a,), bw)


def pad_edge(a: Tensor, m: int, tape: Tape | None = None) -> Tensor:
    """Replicate-pad all spatial axes by m voxels."""
    out = np.pad(a.value, ((0, 0), (m, m), (m, m), (m, m)), mode="edge")

    def bw(g):
        ga = g
        for axis in (1, 2, 3):
            lead = [slice(None)] * 4
            edge = [slice(None)] * 4
            lead[axis] = slice(0, m)
            edge[axis] = slice(m, m + 1)
            head = ga[tuple(lead)].sum(axis=axis, keepdims=True)
            lead[axis] = slice(ga.shape[axis] - m, ga.shape[axis])
            tail = ga[tuple(lead)].sum(axis=axis, keepdims=True)
            keep = [slice(None)] * 4
            keep[axis] = slice(m, ga.shape[axis] - m)
            ga = ga[tuple(keep)].copy()
            first = [slice(None)] * 4
            first[axis] = slice(0, 1)
            last = [slice(None)] * 4
            last[axis] = slice(ga.shape[axis] - 1, ga.shape[axis])
            ga[tuple(first)] += head
            ga[tuple(last)] += tail
        return (ga,)

    return _make(tape, out, (a,), bw)


def _sliding_sum_valid(arr: np.ndarray, axis: int, width: int) -> np.ndarray:
    n = arr.shape[axis]
    sl = [slice(None)] * arr.ndim
    sl[axis] = slice(0, n - width + 1)
    out = arr[tuple(sl)].copy()
    for d in range(1, width):
        sl[axis] = slice(d, n - width + 1 + d)
        out += arr[tuple(sl)]
    return out


def box_mean_valid(a: Tensor, radius: int, tape: Tape | None = None) -> Tensor:
    """Mean over the (2r+1)^3 neighborhood, valid mode (spatial dims shrink
    by 2r per axis)."""
    width = 2 * radius + 1
    inv = 1.0 / width**3
    out = a.value
    for axis in (1, 2, 3):
        out = _sliding_sum_valid(out, axis, width)
    out = out * inv

    def bw(g):
        ga = g * inv
        pad = [(0, 0)] * 4
        for axis in (1, 2, 3):
            pad[axis] = (width - 1, width - 1)
        ga = np.pad(ga, pad)
        for axis in (1, 2, 3):
            ga = _sliding_sum_valid(ga, axis, width)
        return (ga,)

    return _make(tape, out, (a,), bw)


# ---------------------------------------------------------------------------
# network primitives
# ---------------------------------------------------------------------------


def conv3d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, tape: Tape | None = None) -> Tensor:
    """Zero-padded "same" 3D cross-correlation.

    w: (out_ch, in_ch, k, k, k) with odd k; b: (out_ch,).
    Stride-2 output dims are ceil(n/2) per axis.
    """
    wv, bv, xv = w.value, b.value, x.value
    out_ch, in_ch, k = wv.shape[0], wv.shape[1], wv.shape[2]
    if wv.shape[2:] != (k, k, k) or k % 2 == 0:
        raise ValueError(f"kernel must be cubic with odd size, got {wv.shape[2:]}")
    if xv.shape[0] != in_ch:
        raise ValueError(f"conv3d: input has {xv.shape[0]} channels, kernel expects {in_ch}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    p = k // 2
    D, H, W = xv.shape[1:]
    Do, Ho, Wo = ((n + stride - 1) // stride for n in (D, H, W))
    xpad = np.pad(xv, ((0, 0), (p, p), (p, p), (p, p)))

    def _view(arr, a, bb, c):
        return arr[
            :,
            a : a + stride * (Do - 1) + 1 : stride,
            bb : bb + stride * (Ho - 1) + 1 : stride,
            c : c + stride * (Wo - 1) + 1 : stride,
        ]

    out = np.empty((out_ch, Do, Ho, Wo))
    out[:] = bv[:, None, None, None]
    for a, bb, c in product(range(k), repeat=3):
        out += np.tensordot(wv[:, :, a, bb, c], _view(xpad, a, bb, c), axes=([1], [0]))

    def bw(g):
        gb = g.sum(axis=(1, 2, 3))
        gw = np.empty_like(wv)
        gxpad = np.zeros_like(xpad)
        for a, bb, c in product(range(k), repeat=3):
            gw[:, :, a, bb, c] = np.tensordot(g, _view(xpad, a, bb, c), axes=([1, 2, 3], [1, 2, 3]))
            _view(gxpad, a, bb, c)[...] += np.tensordot(wv[:, :, a, bb, c], g, axes=([0], [0]))
        gx = gxpad[:, p : p + D, p : p + H, p : p + W]
        return (gx, gw, gb)

    return _make(tape, out, (x, w, b), bw)


def upsample_nearest2x(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Replicate every voxel into a 2x2x2 block; spatial dims double."""
    out = x.value.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)

    def bw(g):
        C, D, H, W = g.shape
        return (g.reshape(C, D // 2, 2, H // 2, 2, W // 2, 2).sum(axis=(2, 4, 6)),)

    return _make(tape, out, (x,), bw)


def leaky_relu(x: Tensor, slope: float = 0.2, tape: Tape | None = None) -> Tensor:
    xv = x.value
    mask = xv >= 0
    out = np.where(mask, xv, slope * xv)
    return _make(tape, out, (x,), lambda g: (g * np.where(mask, 1.0, slope),))


def sigmoid(x: Tensor, tape: Tape | None = None) -> Tensor:
    xv = x.value
    out = np.empty_like(xv)
    pos = xv >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
    ex = np.exp(xv[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(tape, out, (x,), lambda g: (g * out * (1.0 - out),))


def activation(x: Tensor, kind: str, tape: Tape | None = None) -> Tensor:
    """Named dispatch: "leaky_relu" (slope 0.2) or "sigmoid"."""
    if kind == "leaky_relu":
        return leaky_relu(x, 0.2, tape)
    if kind == "sigmoid":
        return sigmoid(x, tape)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


@dataclass
class FdEntry:
    param: int
    index: int
    analytic: float
    numeric: float
    rel_err: float
    ok: bool


@dataclass
class FdReport:
    entries: list[FdEntry] = field(default_factory=list)

    @property
    def pass_fraction(self) -> float:
        if not self.entries:
            return 1.0
        return sum(e.ok for e in self.entries) / len(self.entries)

    @property
    def all_ok(self) -> bool:
        return all(e.ok for e in self.entries)

    @property
    def max_rel_err(self) -> float:
        return max((e.rel_err for e in self.entries), default=0.0)


def finite_difference_check(
    f: Callable[[Tape | None], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-4,
    rtol: float = 1e-3,
    atol: float = 1e-10,
    sample: int | None = None,
    rng: np.random.Generator | None = None,
) -> FdReport:
    """Compare analytic gradients of the scalar f against central finite
    differences, per sampled parameter entry.

    f(tape) must rebuild the computation from the current param values.
    When sample is given, at most that many entries are probed per param.
    """
    tape = Tape()
    out = f(tape)
    tape.backward(out)
    analytic = [np.zeros_like(p.value) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.grad = None

    report = FdReport()
    for pi, p in enumerate(params):
        flat = p.value.reshape(-1)
        idxs = np.arange(flat.size)
        if sample is not None and flat.size > sample:
            r = rng if rng is not None else np.random.default_rng(0)
            idxs = r.choice(flat.size, size=sample, replace=False)
        for idx in idxs:
            orig = flat[idx]
            flat[idx] = orig + h
            f_plus = float(f(None).value)
            flat[idx] = orig - h
            f_minus = float(f(None).value)
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            an = float(analytic[pi].reshape(-1)[idx])
            denom = max(abs(an), abs(numeric))
            err = abs(an - numeric)
            ok = err <= rtol * denom + atol
            report.entries.append(
                FdEntry(pi, int(idx), an, numeric, err / denom if denom > 0 else 0.0, ok)
            )
    return report
