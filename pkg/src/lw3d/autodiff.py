"""Reverse-mode gradients for the operator set and a small SGD trainer.

Gradients are computed per operator (each backward function is usable and
testable on its own) and chained over a ``ModuleGraph`` in reverse
topological order.  Batch norm runs with frozen statistics: scale and
shift learn, mean and variance stay at their initial values.
"""

from __future__ import annotations

import dataclasses
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import ops, tensor
from .graph import ModuleGraph, parameterized_layers
from .ops import BatchNormParams, Conv3DSpec, MacCounter, PoolSpec
from .tensor import Shape5, Tensor5D


# ---------------------------------------------------------------------------
# per-operator backward functions
# ---------------------------------------------------------------------------

def conv3d_backward(
    x: Tensor5D, spec: Conv3DSpec, weights: np.ndarray, gout: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Input and weight gradients of the bias-free convolution."""
    out_shape = spec.output_shape(x.shape)
    w = np.asarray(weights, dtype=np.float64)
    g = np.asarray(gout, dtype=np.float64).reshape(out_shape)
    xp = ops._pad_input(x.data.astype(np.float64), spec.padding)
    cg = spec.in_channels // spec.groups
    og = spec.out_channels // spec.groups
    out_dims = (out_shape.t, out_shape.h, out_shape.w)
    L = out_shape.t * out_shape.h * out_shape.w
    kt, kh, kw = spec.kernel
    gxp = np.zeros_like(xp)
    gw = np.empty_like(w)
    for gi in range(spec.groups):
        cs, os_ = slice(gi * cg, (gi + 1) * cg), slice(gi * og, (gi + 1) * og)
        cols = ops._im2col(xp[:, cs], spec.kernel, out_dims, spec.stride)
        gmat = g[:, os_].reshape(x.n, og, L)
        gw[os_] = np.einsum("nol,nkl->ok", gmat, cols).reshape(og, cg, kt, kh, kw)
        gcols = np.einsum("ok,nol->nkl", w[os_].reshape(og, -1), gmat)
        gcols = gcols.reshape(x.n, cg, kt * kh * kw, *out_dims)
        k = 0
        for dt in range(kt):
            for dh in range(kh):
                for dw in range(kw):
                    ops._offset_view(gxp[:, cs], (dt, dh, dw), out_dims, spec.stride)[
                        ...
                    ] += gcols[:, :, k]
                    k += 1
    gx = _unpad(gxp, spec.padding)
    return gx, gw


def _unpad(xp: np.ndarray, padding) -> np.ndarray:
    pt, ph, pw = padding
    n, c, t, h, w = xp.shape
    return xp[:, :, pt : t - pt or None, ph : h - ph or None, pw : w - pw or None]


def pool3d_backward(x: Tensor5D, spec: PoolSpec, gout: np.ndarray) -> np.ndarray:
    """Max pooling routes each window's gradient to the first maximal element
    in layout order; average pooling spreads it over the full kernel volume."""
    out_shape = spec.output_shape(x.shape)
    g = np.asarray(gout, dtype=np.float64).reshape(out_shape)
    out_dims = (out_shape.t, out_shape.h, out_shape.w)
    kt, kh, kw = spec.kernel
    kvol = kt * kh * kw
    if spec.kind == "avg":
        xp_shape = ops._pad_input(x.data, spec.padding).shape
        gxp = np.zeros(xp_shape, dtype=np.float64)
        share = g / kvol
        for dt in range(kt):
            for dh in range(kh):
                for dw in range(kw):
                    ops._offset_view(gxp, (dt, dh, dw), out_dims, spec.stride)[...] += share
        return _unpad(gxp, spec.padding)
    xp = ops._pad_input(x.data.astype(np.float64), spec.padding, value=-np.inf)
    best = np.full(out_shape, -np.inf, dtype=np.float64)
    best_k = np.zeros(out_shape, dtype=np.int32)
    offsets = [
        (dt, dh, dw) for dt in range(kt) for dh in range(kh) for dw in range(kw)
    ]
    for k, off in enumerate(offsets):
        view = ops._offset_view(xp, off, out_dims, spec.stride)
        mask = view > best
        best[mask] = view[mask]
        best_k[mask] = k
    gxp = np.zeros_like(xp)
    for k, off in enumerate(offsets):
        ops._offset_view(gxp, off, out_dims, spec.stride)[...] += g * (best_k == k)
    return _unpad(gxp, spec.padding)


def relu_backward(x: Tensor5D, gout: np.ndarray) -> np.ndarray:
    return np.asarray(gout, dtype=np.float64) * (x.data > 0)


def batchnorm_backward(
    x: Tensor5D, p: BatchNormParams, gout: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients with frozen mean/variance: input, gamma, beta."""
    g = np.asarray(gout, dtype=np.float64).reshape(x.data.shape)
    inv = 1.0 / np.sqrt(p.var + p.eps)
    xhat = (x.data.astype(np.float64) - p.mean.reshape(1, -1, 1, 1, 1)) * inv.reshape(
        1, -1, 1, 1, 1
    )
    gx = g * (p.gamma * inv).reshape(1, -1, 1, 1, 1)
    ggamma = (g * xhat).sum(axis=(0, 2, 3, 4))
    gbeta = g.sum(axis=(0, 2, 3, 4))
    return gx, ggamma, gbeta


def channel_shuffle_backward(gout: np.ndarray, groups: int, channels: int) -> np.ndarray:
    """Transpose of the shuffle permutation: shuffle with c/groups groups."""
    g = Tensor5D(np.asarray(gout, dtype=np.float32))
    return ops.channel_shuffle(g, channels // groups).data.astype(np.float64)


def softmax_backward(y: Tensor5D, gout: np.ndarray) -> np.ndarray:
    g = np.asarray(gout, dtype=np.float64).reshape(y.data.shape)
    yd = y.data.astype(np.float64)
    dot = (g * yd).sum(axis=1, keepdims=True)
    return yd * (g - dot)


def softmax_xent(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Fused softmax + cross-entropy on one logit vector: loss and gradient."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    grad = p.copy()
    grad[label] -= 1.0
    return float(-math.log(max(p[label], 1e-300))), grad


# ---------------------------------------------------------------------------
# parameters and the graph executor
# ---------------------------------------------------------------------------

@dataclass
class Parameter:
    """Value, gradient and momentum buffers; always shape-identical."""

    value: np.ndarray
    grad: np.ndarray
    momentum: np.ndarray

    @classmethod
    def of(cls, value: np.ndarray) -> "Parameter":
        v = np.asarray(value, dtype=np.float32)
        return cls(v, np.zeros(v.shape, np.float64), np.zeros(v.shape, np.float64))


@dataclass
class BnState:
    gamma: Parameter
    beta: Parameter
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    def params(self) -> BatchNormParams:
        return BatchNormParams(
            self.gamma.value, self.beta.value, self.mean, self.var, self.eps
        )


@dataclass
class NetworkParams:
    conv: dict[str, Parameter] = field(default_factory=dict)
    bn: dict[str, BnState] = field(default_factory=dict)

    def parameters(self) -> list[Parameter]:
        out = list(self.conv.values())
        for s in self.bn.values():
            out.extend([s.gamma, s.beta])
        return out


def init_params(g: ModuleGraph, seed: int = 0) -> NetworkParams:
    rng = np.random.default_rng(seed)
    p = NetworkParams()
    for layer in parameterized_layers(g):
        if layer.kind == "conv":
            p.conv[layer.id] = Parameter.of(ops.glorot_uniform(layer.params, rng))
        else:
            c = layer.params
            p.bn[layer.id] = BnState(
                Parameter.of(np.ones(c)), Parameter.of(np.zeros(c)),
                np.zeros(c, np.float32), np.ones(c, np.float32),
            )
    return p


def save_weights(path, g: ModuleGraph, p: NetworkParams) -> None:
    """Concatenated tensor records, one per parameterized layer in manifest
    order; bn layers store (gamma, beta, mean, var) stacked on the first axis."""
    with open(path, "wb") as f:
        for layer in parameterized_layers(g):
            if layer.kind == "conv":
                rec = tensor.from_array(p.conv[layer.id].value)
            else:
                s = p.bn[layer.id]
                rec = tensor.from_array(
                    np.stack(
                        [s.gamma.value, s.beta.value, s.mean, s.var]
                    ).reshape(4, layer.params, 1, 1, 1)
                )
            f.write(tensor.MAGIC)
            f.write(bytes([tensor.FORMAT_VERSION]))
            f.write(struct.pack("<5Q", *rec.shape))
            f.write(np.ascontiguousarray(rec.data, dtype="<f4").tobytes())


def load_weights(path, g: ModuleGraph) -> NetworkParams:
    """Read a weight file back, validating every record against the graph;
    errors name the first offending layer."""
    p = NetworkParams()
    with open(path, "rb") as f:
        for layer in parameterized_layers(g):
            head = f.read(5)
            if len(head) < 5 or head[:4] != tensor.MAGIC:
                raise ValueError(f"weight file ends before layer {layer.id!r}")
            dims = struct.unpack("<5Q", f.read(40))
            count = int(np.prod([int(d) for d in dims], dtype=np.int64))
            buf = f.read(4 * count)
            if len(buf) != 4 * count:
                raise ValueError(f"truncated weight record for layer {layer.id!r}")
            data = np.frombuffer(buf, dtype="<f4").reshape(dims).astype(np.float32)
            if layer.kind == "conv":
                if tuple(dims) != layer.params.weight_shape:
                    raise ValueError(
                        f"layer {layer.id!r}: weight record {tuple(dims)} "
                        f"!= expected {layer.params.weight_shape}"
                    )
                p.conv[layer.id] = Parameter.of(data)
            else:
                if tuple(dims) != (4, layer.params, 1, 1, 1):
                    raise ValueError(
                        f"layer {layer.id!r}: bn record {tuple(dims)} "
                        f"!= expected {(4, layer.params, 1, 1, 1)}"
                    )
                rows = data.reshape(4, layer.params)
                p.bn[layer.id] = BnState(
                    Parameter.of(rows[0]), Parameter.of(rows[1]),
                    rows[2].copy(), rows[3].copy(),
                )
        if f.read(1):
            raise ValueError("weight file has trailing records beyond the manifest")
    return p


def _resolve(acts: dict[str, Tensor5D], g: ModuleGraph, ref: str) -> Tensor5D:
    base = ref.split(":")[0]
    x = acts[base]
    if ":" in ref:
        sizes = g.layer(base).params.sizes
        k = int(ref.split(":")[1])
        return tensor.split_channels(x, list(sizes))[k]
    return x


def calibrate_init(g: ModuleGraph, p: NetworkParams, x: Tensor5D) -> None:
    """Data-driven rescale of a freshly initialized network.

    Glorot-initialized activations shrink as depth grows, leaving the
    classifier with vanishing logits.  One probe pass rescales each
    convolution's weights to unit output deviation and points each
    batch-norm layer's frozen statistics at the empirical moments of its
    input, so both activations and gradients stay at usable scale.
    Run once right after ``init_params``; statistics stay fixed afterwards."""
    forward(g, p, x, calibrate=True)


def forward(
    g: ModuleGraph,
    p: NetworkParams,
    x: Tensor5D,
    counter: MacCounter | None = None,
    calibrate: bool = False,
) -> dict[str, Tensor5D]:
    """Run the graph, returning every layer's activation keyed by id."""
    acts: dict[str, Tensor5D] = {}
    for layer in g.layers:
        if layer.kind == "input":
            acts[layer.id] = x
            continue
        a = _resolve(acts, g, layer.inputs[0])
        if layer.kind == "conv":
            y = ops.conv3d_lowered(
                a, layer.params, p.conv[layer.id].value, counter, layer.id
            )
            if calibrate:
                s = float(y.data.std())
                if s > 1e-8:
                    par = p.conv[layer.id]
                    par.value = (par.value / s).astype(np.float32)
                    y = Tensor5D(y.data / np.float32(s))
            acts[layer.id] = y
        elif layer.kind == "pool":
            acts[layer.id] = ops.pool3d(a, layer.params)
        elif layer.kind == "bn":
            st = p.bn[layer.id]
            if calibrate:
                d = a.data.astype(np.float64)
                st.mean = d.mean(axis=(0, 2, 3, 4)).astype(np.float32)
                # floor keeps 1/sqrt(var) from amplifying noise channels
                st.var = np.maximum(d.var(axis=(0, 2, 3, 4)), 1e-2).astype(np.float32)
            acts[layer.id] = ops.batchnorm_infer(a, st.params())
        elif layer.kind == "relu":
            acts[layer.id] = tensor.relu(a)
        elif layer.kind == "shuffle":
            acts[layer.id] = ops.channel_shuffle(a, layer.params)
        elif layer.kind == "split":
            acts[layer.id] = a  # slices materialized on demand
        elif layer.kind == "concat":
            acts[layer.id] = tensor.concat_channels(
                [_resolve(acts, g, r) for r in layer.inputs]
            )
        elif layer.kind == "softmax":
            acts[layer.id] = ops.softmax_channels(a)
        else:
            raise ValueError(f"unknown layer kind {layer.kind!r}")
    return acts


def predict_scores(g: ModuleGraph, acts: dict[str, Tensor5D]) -> np.ndarray:
    """Per-clip class scores: softmax output averaged over remaining sites."""
    y = acts[g.output_id].data.astype(np.float64)
    return y.mean(axis=(2, 3, 4))


def backward(
    g: ModuleGraph,
    p: NetworkParams,
    acts: dict[str, Tensor5D],
    labels: np.ndarray,
) -> float:
    """Cross-entropy loss of the averaged softmax scores; accumulates
    parameter gradients in place and returns the mean loss.

    The loss gradient is seeded directly at the classifier logits in fused
    log-sum-exp form: differentiating through the stored float32 softmax
    activation underflows to an exact zero gradient once the softmax
    saturates, which would strand training with no way back."""
    labels = np.asarray(labels)
    out_layer = g.layer(g.output_id)
    if out_layer.kind != "softmax":
        raise ValueError("graph must end in a softmax layer")
    logits_ref = out_layer.inputs[0]
    z = _resolve(acts, g, logits_ref).data.astype(np.float64)
    n, nc = z.shape[:2]
    sites = z.shape[2] * z.shape[3] * z.shape[4]
    zz = z.reshape(n, nc, sites)
    logsm = zz - zz.max(axis=1, keepdims=True)
    logsm -= np.log(np.exp(logsm).sum(axis=1, keepdims=True))  # log softmax
    ly = logsm[np.arange(n), labels]  # (n, sites) log p(label) per site
    m = ly.max(axis=1, keepdims=True)
    sexp = np.exp(ly - m).sum(axis=1, keepdims=True)
    # loss_i = -log(mean_site p(label)); r = each site's share of that mean
    loss = float(-(m[:, 0] + np.log(sexp[:, 0]) - math.log(sites)).mean())
    r = np.exp(ly - m) / sexp  # (n, sites), rows sum to 1
    gz = np.exp(logsm) * r[:, None, :]
    gz[np.arange(n), labels] -= r
    seed = (gz / n).reshape(z.shape)
    grads: dict[str, np.ndarray] = {}

    def add_to(ref: str, val: np.ndarray):
        base = ref.split(":")[0]
        src = acts[base]
        if base not in grads:
            grads[base] = np.zeros(tuple(src.shape), dtype=np.float64)
        if ":" in ref:
            sizes = g.layer(base).params.sizes
            k = int(ref.split(":")[1])
            start = sum(sizes[:k])
            grads[base][:, start : start + sizes[k]] += val
        else:
            grads[base] += val

    add_to(logits_ref, seed)
    for layer in reversed(g.layers):
        if layer.kind == "input" or layer.id not in grads:
            continue
        gout = grads.pop(layer.id)
        a = _resolve(acts, g, layer.inputs[0])
        if layer.kind == "conv":
            gx, gw = conv3d_backward(a, layer.params, p.conv[layer.id].value, gout)
            p.conv[layer.id].grad += gw
            add_to(layer.inputs[0], gx)
        elif layer.kind == "pool":
            add_to(layer.inputs[0], pool3d_backward(a, layer.params, gout))
        elif layer.kind == "bn":
            st = p.bn[layer.id]
            gx, ggamma, gbeta = batchnorm_backward(a, st.params(), gout)
            st.gamma.grad += ggamma
            st.beta.grad += gbeta
            add_to(layer.inputs[0], gx)
        elif layer.kind == "relu":
            add_to(layer.inputs[0], relu_backward(a, gout))
        elif layer.kind == "shuffle":
            add_to(layer.inputs[0], channel_shuffle_backward(gout, layer.params, a.c))
        elif layer.kind == "split":
            add_to(layer.inputs[0], gout)
        elif layer.kind == "concat":
            start = 0
            for ref in layer.inputs:
                c = _resolve(acts, g, ref).c
                add_to(ref, gout[:, start : start + c])
                start += c
        elif layer.kind == "softmax":
            add_to(layer.inputs[0], softmax_backward(acts[layer.id], gout))
    return loss


# ---------------------------------------------------------------------------
# SGD with momentum and plateau decay
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    lr_decay_factor: float = 10.0
    batch_size: int = 4
    epochs: int = 50
    plateau_patience: int = 5
    min_improvement: float = 1e-3
    # gradient norms vary over orders of magnitude between the stem and the
    # classifier; clipping each tensor's gradient keeps one lr usable for all
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.lr_decay_factor <= 1:
            raise ValueError("decay factor must exceed 1")
        if self.grad_clip <= 0:
            raise ValueError("gradient clip must be positive")


def sgd_step(params: list[Parameter], cfg: TrainConfig) -> None:
    """v <- m*v + clip(g); w <- w - lr*v; gradients zeroed."""
    for p in params:
        norm = float(np.linalg.norm(p.grad))
        if norm > cfg.grad_clip:
            p.grad *= cfg.grad_clip / norm
        p.momentum *= cfg.momentum
        p.momentum += p.grad
        p.value = (p.value.astype(np.float64) - cfg.learning_rate * p.momentum).astype(
            np.float32
        )
        p.grad[...] = 0.0


def train_toy(
    g: ModuleGraph,
    dataset: list[tuple[Tensor5D, int]],
    cfg: TrainConfig,
    seed: int = 0,
    params: NetworkParams | None = None,
) -> tuple[list[dict], NetworkParams]:
    """Train on an in-memory dataset; the learning rate divides by the decay
    factor whenever the epoch loss fails to improve by ``min_improvement``
    for ``plateau_patience`` consecutive epochs."""
    if not dataset:
        raise ValueError("empty dataset")
    if g.num_classes is not None:
        for _, label in dataset:
            if not 0 <= label < g.num_classes:
                raise ValueError(f"label {label} out of range")
    cfg = dataclasses.replace(cfg)
    rng = np.random.default_rng(seed)
    if params is None:
        params = init_params(g, seed)
        # probe must span the whole dataset (e.g. every class), otherwise the
        # calibrated scales only hold on the directions the probe exercises
        take = np.linspace(0, len(dataset) - 1, min(len(dataset), 16)).astype(int)
        calibrate_init(
            g,
            params,
            Tensor5D(np.concatenate([dataset[i][0].data for i in take], axis=0)),
        )
    plist = params.parameters()
    history: list[dict] = []
    best = math.inf
    stale = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        losses, hits = [], 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb = Tensor5D(np.concatenate([dataset[i][0].data for i in idx], axis=0))
            yb = np.array([dataset[i][1] for i in idx])
            acts = forward(g, params, xb)
            loss = backward(g, params, acts, yb)
            hits += int((predict_scores(g, acts).argmax(axis=1) == yb).sum())
            losses.append(loss * len(idx))
            sgd_step(plist, cfg)
        epoch_loss = sum(losses) / len(dataset)
        acc = hits / len(dataset)
        history.append(
            {"epoch": epoch, "loss": epoch_loss, "accuracy": acc, "lr": cfg.learning_rate}
        )
        if epoch_loss < best - cfg.min_improvement:
            best = epoch_loss
            stale = 0
        else:
            stale += 1
            if stale >= cfg.plateau_patience:
                cfg.learning_rate /= cfg.lr_decay_factor
                stale = 0
    return history, params
