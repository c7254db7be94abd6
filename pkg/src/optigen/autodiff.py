"""Reverse-mode gradient engine over a fixed computation graph.

The graph covers exactly the operations the models need: dense layers,
elementwise activations, phase encoding, orthonormal FFT propagation,
complex modulation, intensity detection, and scalar losses.  Graphs are
built once per (model, batch size) and executed per batch; node values are
cached on the nodes.

Complex convention: for a real-valued loss L of a complex intermediate u,
the engine propagates g = dL/d(conj u) in the Wirtinger sense, i.e.
dL/dRe(u) = 2 Re(g) and dL/dIm(u) = 2 Im(g).  Under this convention the
backward of the orthonormal fft2 is ifft2 applied to the upstream gradient
(and vice versa), a Hadamard product by a constant mask backpropagates
through the conjugated mask, and |u|^2 backpropagates as u * g.  The
finite-difference suite in gradient_check is the normative definition of
all sign and factor choices.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DimensionError, GraphStateError, NumericalError
from .rng import RngStream

__all__ = ["Parameter", "Node", "Graph", "adamw_step", "gradient_check", "bilinear_shift"]

TWO_PI = 2.0 * np.pi
LEAKY_SLOPE = 0.01


class Parameter:
    """Learnable tensor with its gradient and AdamW accumulators."""

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.data = np.ascontiguousarray(data)
        self.grad = np.zeros_like(self.data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0

    def zero_grad(self):
        self.grad[...] = 0.0

    def astype(self, dtype) -> "Parameter":
        """Cast data and optimizer state in place; gradient is reset."""
        self.data = self.data.astype(dtype)
        self.grad = np.zeros_like(self.data)
        self.m = self.m.astype(dtype)
        self.v = self.v.astype(dtype)
        return self

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


class Node:
    """One graph entry: op kind, input nodes, cached forward value."""

    __slots__ = ("idx", "op", "inputs", "ctx", "value", "grad", "needs_grad", "param", "name")

    def __init__(self, idx, op, inputs, ctx, needs_grad, param=None, name=None):
        self.idx = idx
        self.op = op
        self.inputs = inputs
        self.ctx = ctx
        self.value = None
        self.grad = None
        self.needs_grad = needs_grad
        self.param = param
        self.name = name


def _sigmoid(x):
    # stable single-pass form: sigmoid(x) = (1 + tanh(x/2)) / 2
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Graph:
    """Static computation graph; build once, execute per batch.

    precision selects the compute dtype of field-sized complex tensors
    ('f64' -> complex128, 'f32' -> complex64).  Real dense arithmetic runs
    in the dtype of the parameters.
    """

    def __init__(self, precision: str = "f64"):
        if precision not in ("f32", "f64"):
            raise ValueError(f"precision must be 'f32' or 'f64', got {precision!r}")
        self.precision = precision
        self.real_dtype = np.float64 if precision == "f64" else np.float32
        self.complex_dtype = np.complex128 if precision == "f64" else np.complex64
        self.nodes: list[Node] = []
        self.inputs: dict[str, Node] = {}
        self._params: dict[int, Parameter] = {}
        self._fresh_forward = False

    # -- construction ------------------------------------------------------

    def _add(self, op, inputs=(), ctx=None, needs_grad=None, param=None, name=None) -> Node:
        if needs_grad is None:
            needs_grad = any(i.needs_grad for i in inputs)
        node = Node(len(self.nodes), op, tuple(inputs), ctx or {}, needs_grad, param, name)
        self.nodes.append(node)
        return node

    def input(self, name: str) -> Node:
        node = self._add("input", needs_grad=False, name=name)
        self.inputs[name] = node
        return node

    def constant(self, value: np.ndarray) -> Node:
        node = self._add("const", needs_grad=False)
        node.value = np.asarray(value)
        return node

    def parameter(self, param: Parameter) -> Node:
        node = self._add("param", needs_grad=True, param=param, name=param.name)
        self._params[node.idx] = param
        return node

    def fc(self, x: Node, w: Node, b: Node) -> Node:
        return self._add("fc", (x, w, b))

    def act(self, x: Node, kind: str) -> Node:
        if kind not in ("leaky_relu", "tanh", "sigmoid", "silu"):
            raise ValueError(f"unknown activation {kind!r}")
        return self._add("act", (x,), {"kind": kind})

    def phase_encode(self, z: Node) -> Node:
        return self._add("phase_encode", (z,))

    def reshape(self, x: Node, shape: tuple) -> Node:
        return self._add("reshape", (x,), {"shape": tuple(shape)})

    def concat(self, a: Node, b: Node) -> Node:
        return self._add("concat", (a, b))

    def embed(self, table: Node, labels: Node) -> Node:
        return self._add("embed", (table, labels))

    def complex_from_phase(self, phi: Node) -> Node:
        return self._add("complex_from_phase", (phi,))

    def fft2(self, u: Node) -> Node:
        return self._add("fft2", (u,))

    def ifft2(self, u: Node) -> Node:
        return self._add("ifft2", (u,))

    def hadamard(self, u: Node, mask: np.ndarray) -> Node:
        return self._add("hadamard", (u,), {"mask": np.asarray(mask)})

    def modulate_height(self, u: Node, h: Node, phase_coef: float) -> Node:
        return self._add("modulate_height", (u, h), {"coef": float(phase_coef)})

    def shift_bilinear(self, h: Node, dx: float = 0.0, dy: float = 0.0) -> Node:
        return self._add("shift_bilinear", (h,), {"dx": float(dx), "dy": float(dy)})

    def quantize_st(self, x: Node, bits: int, cycle: float) -> Node:
        return self._add("quantize_st", (x,), {"bits": int(bits), "cycle": float(cycle)})

    def sqmag(self, u: Node) -> Node:
        return self._add("sqmag", (u,))

    def crop(self, x: Node, region) -> Node:
        return self._add("crop", (x,), {"region": region})

    def replicate_embed(self, phi: Node, rep: int, grid_n: int) -> Node:
        return self._add("replicate_embed", (phi,), {"rep": int(rep), "grid_n": int(grid_n)})

    def normalize_max(self, x: Node) -> Node:
        return self._add("normalize_max", (x,))

    def affine_scalar(self, x: Node, a: Node, b: Node) -> Node:
        return self._add("affine_scalar", (x, a, b))

    def mse(self, pred: Node, target: Node) -> Node:
        return self._add("mse", (pred, target))

    def softmax_xent(self, logits: Node, labels: Node) -> Node:
        return self._add("softmax_xent", (logits, labels))

    def bce_logits(self, logits: Node, targets: Node) -> Node:
        return self._add("bce_logits", (logits, targets))

    def power_mean(self, intensity: Node) -> Node:
        return self._add("power_mean", (intensity,))

    def scale(self, x: Node, k: float) -> Node:
        return self._add("scale", (x,), {"k": float(k)})

    def add(self, a: Node, b: Node) -> Node:
        return self._add("add", (a, b))

    def eff_penalty(self, eta: Node, target: float, weight: float, symmetric=False) -> Node:
        return self._add(
            "eff_penalty", (eta,),
            {"target": float(target), "weight": float(weight), "symmetric": bool(symmetric)},
        )

    @property
    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    # -- execution ----------------------------------------------------------

    def forward(self, feeds: dict[str, np.ndarray]) -> None:
        for name, node in self.inputs.items():
            if name not in feeds:
                raise KeyError(f"missing feed for input {name!r}")
            node.value = np.asarray(feeds[name])
        unknown = set(feeds) - set(self.inputs)
        if unknown:
            raise KeyError(f"feeds for unknown inputs: {sorted(unknown)}")
        for node in self.nodes:
            if node.op == "input" or node.op == "const":
                continue
            if node.op == "param":
                node.value = node.param.data
                continue
            node.value = _FORWARD[node.op](self, node, *[i.value for i in node.inputs])
            node.grad = None
        self._fresh_forward = True

    def backward(self, loss: Node) -> None:
        if not self._fresh_forward:
            raise GraphStateError("backward requires a fresh forward pass")
        if loss.value is None or np.ndim(loss.value) != 0:
            raise GraphStateError("backward seed must be a computed scalar node")
        self._fresh_forward = False
        for node in self.nodes:
            node.grad = None
        loss.grad = np.asarray(1.0, dtype=np.float64)
        for node in reversed(self.nodes[: loss.idx + 1]):
            if node.grad is None or not node.needs_grad:
                continue
            if node.op == "param":
                node.param.grad += node.grad.astype(node.param.grad.dtype, copy=False)
                continue
            if node.op in ("input", "const"):
                continue
            in_grads = _BACKWARD[node.op](self, node, node.grad, *[i.value for i in node.inputs])
            for inp, g in zip(node.inputs, in_grads):
                if g is None or not inp.needs_grad:
                    continue
                if inp.grad is None:
                    # backward functions return fresh arrays (or the upstream
                    # gradient itself, which is never mutated), so no copy
                    inp.grad = g if isinstance(g, np.ndarray) else np.asarray(g)
                else:
                    inp.grad = inp.grad + g


# ---------------------------------------------------------------------------
# op implementations


def _shift2d(arr: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Zero-padded integer shift of the last two axes by (dx rows, dy cols)."""
    out = np.zeros_like(arr)
    n0, n1 = arr.shape[-2], arr.shape[-1]
    r0s, r0e = max(dx, 0), min(n0 + dx, n0)
    c0s, c0e = max(dy, 0), min(n1 + dy, n1)
    if r0s >= r0e or c0s >= c0e:
        return out
    out[..., r0s:r0e, c0s:c0e] = arr[..., r0s - dx : r0e - dx, c0s - dy : c0e - dy]
    return out


def bilinear_shift(arr: np.ndarray, dx: float, dy: float) -> np.ndarray:
    ix, iy = math.floor(dx), math.floor(dy)
    fx, fy = dx - ix, dy - iy
    out = (1 - fx) * (1 - fy) * _shift2d(arr, ix, iy)
    if fx:
        out += fx * (1 - fy) * _shift2d(arr, ix + 1, iy)
    if fy:
        out += (1 - fx) * fy * _shift2d(arr, ix, iy + 1)
    if fx and fy:
        out += fx * fy * _shift2d(arr, ix + 1, iy + 1)
    return out


def _fw_fc(graph, node, x, w, b):
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"fc: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    return x @ w + b


def _bw_fc(graph, node, g, x, w, b):
    return g @ w.T, x.T @ g, g.sum(axis=0)


def _fw_act(graph, node, x):
    kind = node.ctx["kind"]
    if kind == "leaky_relu":
        return np.where(x > 0, x, LEAKY_SLOPE * x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "sigmoid":
        return _sigmoid(x)
    s = _sigmoid(x)
    node.ctx["saved"] = s
    return x * s  # silu


def _bw_act(graph, node, g, x):
    kind = node.ctx["kind"]
    if kind == "leaky_relu":
        return (g * np.where(x > 0, 1.0, LEAKY_SLOPE),)
    if kind == "tanh":
        return (g * (1.0 - node.value**2),)
    if kind == "sigmoid":
        return (g * node.value * (1.0 - node.value),)
    s = node.ctx["saved"]
    return (g * (s * (1.0 + x * (1.0 - s))),)


def _fw_phase_encode(graph, node, z):
    return TWO_PI * _sigmoid(z)


def _bw_phase_encode(graph, node, g, z):
    s = node.value / TWO_PI
    return (g * TWO_PI * s * (1.0 - s),)


def _fw_reshape(graph, node, x):
    return x.reshape(node.ctx["shape"])


def _bw_reshape(graph, node, g, x):
    return (g.reshape(x.shape),)


def _fw_concat(graph, node, a, b):
    return np.concatenate([a, b], axis=1)


def _bw_concat(graph, node, g, a, b):
    k = a.shape[1]
    return g[:, :k], g[:, k:]


def _fw_embed(graph, node, table, labels):
    return table[labels.astype(np.int64)]


def _bw_embed(graph, node, g, table, labels):
    gt = np.zeros_like(table)
    np.add.at(gt, labels.astype(np.int64), g)
    return gt, None


def _fw_complex_from_phase(graph, node, phi):
    phi = phi.astype(graph.real_dtype, copy=False)
    return (np.cos(phi) + 1j * np.sin(phi)).astype(graph.complex_dtype, copy=False)


def _bw_complex_from_phase(graph, node, g, phi):
    return ((2.0 * np.imag(np.conj(node.value) * g)).astype(np.float64, copy=False),)


def _fw_fft2(graph, node, u):
    from . import optics

    return optics.fft2(u)


def _bw_fft2(graph, node, g, u):
    from . import optics

    return (optics.ifft2(g),)


def _fw_ifft2(graph, node, u):
    from . import optics

    return optics.ifft2(u)


def _bw_ifft2(graph, node, g, u):
    from . import optics

    return (optics.fft2(g),)


def _fw_hadamard(graph, node, u):
    mask = node.ctx["mask"]
    if mask.shape != u.shape[-mask.ndim :]:
        raise DimensionError(f"hadamard: mask {mask.shape} vs operand {u.shape}")
    if "cast_mask" not in node.ctx:
        cast = mask.astype(graph.complex_dtype, copy=False)
        node.ctx["cast_mask"] = cast
        node.ctx["conj_mask"] = np.conj(cast)
    return u * node.ctx["cast_mask"]


def _bw_hadamard(graph, node, g, u):
    return (node.ctx["conj_mask"] * g,)


def _fw_modulate_height(graph, node, u, h):
    h_eff = h - np.floor(h)
    phase = (node.ctx["coef"] * h_eff).astype(graph.real_dtype, copy=False)
    mask = (np.cos(phase) + 1j * np.sin(phase)).astype(graph.complex_dtype, copy=False)
    node.ctx["saved_mask"] = mask
    return u * mask


def _bw_modulate_height(graph, node, g, u, h):
    mask = node.ctx["saved_mask"]
    gu = np.conj(mask) * g
    out = node.value
    # Im(conj(out) * g) without complex temporaries
    gphase = out.real * g.imag
    gphase -= out.imag * g.real
    if gphase.ndim > h.ndim:  # broadcast over leading batch axes
        gphase = gphase.sum(axis=tuple(range(gphase.ndim - h.ndim)))
    return gu, (2.0 * node.ctx["coef"]) * gphase.astype(np.float64, copy=False)


def _fw_shift_bilinear(graph, node, h):
    return bilinear_shift(h, node.ctx["dx"], node.ctx["dy"])


def _bw_shift_bilinear(graph, node, g, h):
    return (bilinear_shift(g, -node.ctx["dx"], -node.ctx["dy"]),)


def _fw_quantize_st(graph, node, x):
    levels = 2 ** node.ctx["bits"]
    step = node.ctx["cycle"] / levels
    return (np.rint(x / step) % levels) * step


def _bw_quantize_st(graph, node, g, x):
    return (g,)  # straight-through


def _fw_sqmag(graph, node, u):
    return (u.real**2 + u.imag**2).astype(graph.real_dtype, copy=False)


def _bw_sqmag(graph, node, g, u):
    return (u * g,)


def _fw_crop(graph, node, x):
    r = node.ctx["region"]
    return x[..., r.row0 : r.row1, r.col0 : r.col1]


def _bw_crop(graph, node, g, x):
    r = node.ctx["region"]
    gx = np.zeros_like(x)
    gx[..., r.row0 : r.row1, r.col0 : r.col1] = g
    return (gx,)


def _fw_replicate_embed(graph, node, phi):
    rep, grid_n = node.ctx["rep"], node.ctx["grid_n"]
    b, s, _ = phi.shape
    side = s * rep
    o = (grid_n - side) // 2
    node.ctx["offset"] = o
    out = np.zeros((b, grid_n, grid_n), dtype=phi.dtype)
    out[:, o : o + side, o : o + side] = np.repeat(np.repeat(phi, rep, axis=1), rep, axis=2)
    return out


def _bw_replicate_embed(graph, node, g, phi):
    rep = node.ctx["rep"]
    o = node.ctx["offset"]
    b, s, _ = phi.shape
    side = s * rep
    block = g[:, o : o + side, o : o + side]
    return (block.reshape(b, s, rep, s, rep).sum(axis=(2, 4)),)


def _fw_normalize_max(graph, node, x):
    axes = tuple(range(1, x.ndim))
    m = x.max(axis=axes, keepdims=True)
    node.ctx["denom"] = m + 1e-12
    return x / node.ctx["denom"]


def _bw_normalize_max(graph, node, g, x):
    denom = node.ctx["denom"]
    axes = tuple(range(1, x.ndim))
    gx = g / denom
    # subtract the max-path term at each image's argmax location
    flat = x.reshape(x.shape[0], -1)
    arg = flat.argmax(axis=1)
    corr = (g * node.value).sum(axis=axes) / denom.reshape(x.shape[0])
    gx_flat = gx.reshape(x.shape[0], -1)
    gx_flat[np.arange(x.shape[0]), arg] -= corr
    return (gx_flat.reshape(x.shape),)


def _fw_affine_scalar(graph, node, x, a, b):
    return a * x + b


def _bw_affine_scalar(graph, node, g, x, a, b):
    return a * g, np.asarray((g * x).sum()), np.asarray(g.sum())


def _fw_mse(graph, node, pred, target):
    if pred.shape != target.shape:
        raise DimensionError(f"mse: {pred.shape} vs {target.shape}")
    diff = pred - target
    node.ctx["diff"] = diff
    return np.asarray((diff * diff).mean(), dtype=np.float64)


def _bw_mse(graph, node, g, pred, target):
    scale = 2.0 * float(g) / node.ctx["diff"].size
    gp = scale * node.ctx["diff"]
    return gp, -gp


def _fw_softmax_xent(graph, node, logits, labels):
    labels = labels.astype(np.int64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    expv = np.exp(shifted)
    probs = expv / expv.sum(axis=1, keepdims=True)
    node.ctx["probs"] = probs
    n = logits.shape[0]
    logp = shifted[np.arange(n), labels] - np.log(expv.sum(axis=1))
    return np.asarray(-logp.mean(), dtype=np.float64)


def _bw_softmax_xent(graph, node, g, logits, labels):
    labels = labels.astype(np.int64)
    n = logits.shape[0]
    gl = node.ctx["probs"].copy()
    gl[np.arange(n), labels] -= 1.0
    return (float(g) / n) * gl, None


def _fw_bce_logits(graph, node, logits, targets):
    # mean of softplus(x) - x*t, computed stably
    x = logits
    loss = np.maximum(x, 0) - x * targets + np.log1p(np.exp(-np.abs(x)))
    return np.asarray(loss.mean(), dtype=np.float64)


def _bw_bce_logits(graph, node, g, logits, targets):
    return (float(g) / logits.size) * (_sigmoid(logits) - targets), None


def _fw_power_mean(graph, node, intensity):
    axes = tuple(range(1, intensity.ndim))
    return np.asarray(intensity.sum(axis=axes).mean(), dtype=np.float64)


def _bw_power_mean(graph, node, g, intensity):
    return (np.full_like(intensity, float(g) / intensity.shape[0]),)


def _fw_scale(graph, node, x):
    return node.ctx["k"] * x


def _bw_scale(graph, node, g, x):
    return (node.ctx["k"] * g,)


def _fw_add(graph, node, a, b):
    return a + b


def _bw_add(graph, node, g, a, b):
    return g, g


def _fw_eff_penalty(graph, node, eta):
    t, w = node.ctx["target"], node.ctx["weight"]
    short = max(0.0, t - float(eta))
    over = max(0.0, float(eta) - t) if node.ctx["symmetric"] else 0.0
    return np.asarray(w * (short * short + over * over), dtype=np.float64)


def _bw_eff_penalty(graph, node, g, eta):
    t, w = node.ctx["target"], node.ctx["weight"]
    short = max(0.0, t - float(eta))
    over = max(0.0, float(eta) - t) if node.ctx["symmetric"] else 0.0
    return (np.asarray(float(g) * w * (-2.0 * short + 2.0 * over)),)


_FORWARD = {
    "fc": _fw_fc,
    "act": _fw_act,
    "phase_encode": _fw_phase_encode,
    "reshape": _fw_reshape,
    "concat": _fw_concat,
    "embed": _fw_embed,
    "complex_from_phase": _fw_complex_from_phase,
    "fft2": _fw_fft2,
    "ifft2": _fw_ifft2,
    "hadamard": _fw_hadamard,
    "modulate_height": _fw_modulate_height,
    "shift_bilinear": _fw_shift_bilinear,
    "quantize_st": _fw_quantize_st,
    "sqmag": _fw_sqmag,
    "crop": _fw_crop,
    "replicate_embed": _fw_replicate_embed,
    "normalize_max": _fw_normalize_max,
    "affine_scalar": _fw_affine_scalar,
    "mse": _fw_mse,
    "softmax_xent": _fw_softmax_xent,
    "bce_logits": _fw_bce_logits,
    "power_mean": _fw_power_mean,
    "scale": _fw_scale,
    "add": _fw_add,
    "eff_penalty": _fw_eff_penalty,
}

_BACKWARD = {
    "fc": _bw_fc,
    "act": _bw_act,
    "phase_encode": _bw_phase_encode,
    "reshape": _bw_reshape,
    "concat": _bw_concat,
    "embed": _bw_embed,
    "complex_from_phase": _bw_complex_from_phase,
    "fft2": _bw_fft2,
    "ifft2": _bw_ifft2,
    "hadamard": _bw_hadamard,
    "modulate_height": _bw_modulate_height,
    "shift_bilinear": _bw_shift_bilinear,
    "quantize_st": _bw_quantize_st,
    "sqmag": _bw_sqmag,
    "crop": _bw_crop,
    "replicate_embed": _bw_replicate_embed,
    "normalize_max": _bw_normalize_max,
    "affine_scalar": _bw_affine_scalar,
    "mse": _bw_mse,
    "softmax_xent": _bw_softmax_xent,
    "bce_logits": _bw_bce_logits,
    "power_mean": _bw_power_mean,
    "scale": _bw_scale,
    "add": _bw_add,
    "eff_penalty": _bw_eff_penalty,
}


# ---------------------------------------------------------------------------
# optimizer


def adamw_step(
    params: list[Parameter],
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 1e-4,
) -> None:
    """One AdamW update with decoupled weight decay on every parameter."""
    for p in params:
        if not np.isfinite(p.grad).all():
            raise NumericalError(f"non-finite gradient on parameter {p.name!r}")
        p.step += 1
        g = p.grad
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * (g * g)
        denom = np.sqrt(p.v / (1.0 - beta2**p.step))
        denom += eps
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= (lr / (1.0 - beta1**p.step)) * p.m / denom


# ---------------------------------------------------------------------------
# finite-difference verification


def gradient_check(
    graph: Graph,
    feeds: dict[str, np.ndarray],
    loss: Node,
    params: list[Parameter] | None = None,
    step: float = 1e-6,
    coords_per_param: int = 32,
    rng: RngStream | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples at least ``coords_per_param`` coordinates per parameter (all of
    them for small tensors).  Requires an f64 graph; f32 roundoff would
    drown the comparison.
    """
    if graph.precision != "f64":
        raise ValueError("gradient_check requires an f64 graph")
    rng = rng or RngStream("gradient-check", 0)
    if params is None:
        params = graph.parameters

    for p in params:
        p.zero_grad()
    graph.forward(feeds)
    graph.backward(loss)
    analytic = {p.name: p.grad.copy() for p in params}

    def loss_value() -> float:
        graph.forward(feeds)
        return float(loss.value)

    base = abs(loss_value())
    # below this, a central difference is indistinguishable from roundoff
    noise = 16.0 * np.finfo(np.float64).eps * max(1.0, base) / step

    worst = 0.0
    for p in params:
        size = p.data.size
        k = min(coords_per_param, size)
        idxs = np.arange(size) if size <= coords_per_param else rng.integers(0, size, k)
        flat = p.data.reshape(-1)
        ga = analytic[p.name].reshape(-1)
        gmax = float(np.max(np.abs(ga))) if size else 0.0
        floor = max(1e-4 * gmax, noise)
        for i in np.unique(np.asarray(idxs)):
            keep = flat[i]
            flat[i] = keep + step
            lp = loss_value()
            flat[i] = keep - step
            lm = loss_value()
            flat[i] = keep
            fd = (lp - lm) / (2.0 * step)
            if abs(fd) < noise and abs(ga[i]) < noise:
                continue
            denom = max(abs(fd), abs(ga[i]), floor)
            worst = max(worst, abs(fd - ga[i]) / denom)
    # restore cached values for the unperturbed point
    graph.forward(feeds)
    return worst
