"""Minimal dense/convolutional network engine.

Supports traced forward passes, per-neuron ablation, cross-entropy loss and
reverse-mode gradients with respect to both parameters and inputs.  Everything
is plain numpy: weights are stored as float32, reductions are accumulated in
float64.

A "neuron" is a dense post-activation unit or a conv output channel.  The
activation summary of a conv channel is the spatial mean of its post-activation
map.  Softmax, pooling and flatten layers are not countable.  Ablating a neuron
zeroes its full post-activation output (all spatial positions for channels).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

__all__ = [
    "EngineError",
    "LayerSpec",
    "NetworkModel",
    "NeuronId",
    "dense",
    "conv2d",
    "relu",
    "maxpool2d",
    "flatten",
    "softmax",
    "countable_layers",
    "neuron_count",
    "neuron_ids",
    "init_weights",
    "forward",
    "forward_batch",
    "predict_batch",
    "loss",
    "example_losses",
    "gradients",
    "batch_gradients",
    "input_gradients",
    "logit_combination_input_grads",
    "sgd_step",
]

PROB_FLOOR = 1e-12


class EngineError(ValueError):
    """Raised on shape mismatches, invalid masks or non-finite values."""


class NeuronId(NamedTuple):
    layer_index: int
    unit_index: int


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a feed-forward network.

    ``kind`` is one of dense, conv2d, relu, maxpool2d, flatten, softmax.
    Only the fields relevant to the kind are set.
    """

    kind: str
    in_dim: int = 0
    out_dim: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel_h: int = 0
    kernel_w: int = 0
    stride: int = 1
    padding: int = 0
    window: int = 0

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        for name in (
            "in_dim",
            "out_dim",
            "in_channels",
            "out_channels",
            "kernel_h",
            "kernel_w",
            "window",
        ):
            v = getattr(self, name)
            if v:
                d[name] = v
        if self.kind in ("conv2d", "maxpool2d"):
            d["stride"] = self.stride
        if self.kind == "conv2d":
            d["padding"] = self.padding
        return d

    @staticmethod
    def from_dict(d: dict) -> "LayerSpec":
        known = {
            "kind",
            "in_dim",
            "out_dim",
            "in_channels",
            "out_channels",
            "kernel_h",
            "kernel_w",
            "stride",
            "padding",
            "window",
        }
        extra = set(d) - known
        if extra:
            raise EngineError(f"unknown layer fields: {sorted(extra)}")
        return LayerSpec(**d)


def dense(in_dim: int, out_dim: int) -> LayerSpec:
    return LayerSpec("dense", in_dim=in_dim, out_dim=out_dim)


def conv2d(
    in_channels: int,
    out_channels: int,
    kernel_h: int,
    kernel_w: int,
    stride: int = 1,
    padding: int = 0,
) -> LayerSpec:
    return LayerSpec(
        "conv2d",
        in_channels=in_channels,
        out_channels=out_channels,
        kernel_h=kernel_h,
        kernel_w=kernel_w,
        stride=stride,
        padding=padding,
    )


def relu() -> LayerSpec:
    return LayerSpec("relu")


def maxpool2d(window: int, stride: int = 0) -> LayerSpec:
    return LayerSpec("maxpool2d", window=window, stride=stride or window)


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def softmax() -> LayerSpec:
    return LayerSpec("softmax")


@dataclass
class NetworkModel:
    """Layered architecture plus weights.

    ``weights[i]`` holds the parameter arrays of ``layers[i]`` (empty dict for
    parameter-free layers).  Dense layers store ``W`` with shape
    (in_dim, out_dim) and ``b`` with shape (out_dim,); conv layers store ``W``
    with shape (out_ch, in_ch, kh, kw) and ``b`` with shape (out_ch,).
    """

    input_shape: tuple[int, ...]
    layers: list[LayerSpec]
    weights: list[dict[str, np.ndarray]]
    class_count: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if len(self.weights) != len(self.layers):
            raise EngineError(
                f"got {len(self.weights)} weight entries for {len(self.layers)} layers"
            )
        if not self.layers or self.layers[-1].kind != "softmax":
            raise EngineError("last layer must be softmax")
        shapes = layer_output_shapes(self.input_shape, self.layers)
        if shapes[-1] != (self.class_count,):
            raise EngineError(
                f"softmax output shape {shapes[-1]} does not match "
                f"class_count={self.class_count}"
            )

    def copy(self) -> "NetworkModel":
        return NetworkModel(
            input_shape=self.input_shape,
            layers=list(self.layers),
            weights=[{k: v.copy() for k, v in w.items()} for w in self.weights],
            class_count=self.class_count,
            metadata=dict(self.metadata),
        )


def layer_output_shapes(
    input_shape: Sequence[int], layers: Sequence[LayerSpec]
) -> list[tuple[int, ...]]:
    """Propagate the input shape through the layer stack, validating
    compatibility.  Returns one output shape per layer."""
    shape = tuple(int(s) for s in input_shape)
    out: list[tuple[int, ...]] = []
    for i, spec in enumerate(layers):
        if spec.kind == "dense":
            if shape != (spec.in_dim,):
                raise EngineError(
                    f"layer {i} (dense): expected input ({spec.in_dim},), got {shape}"
                )
            shape = (spec.out_dim,)
        elif spec.kind == "conv2d":
            if len(shape) != 3 or shape[0] != spec.in_channels:
                raise EngineError(
                    f"layer {i} (conv2d): expected input (C={spec.in_channels}, H, W), "
                    f"got {shape}"
                )
            _, h, w = shape
            oh = (h + 2 * spec.padding - spec.kernel_h) // spec.stride + 1
            ow = (w + 2 * spec.padding - spec.kernel_w) // spec.stride + 1
            if oh <= 0 or ow <= 0:
                raise EngineError(f"layer {i} (conv2d): kernel larger than input")
            shape = (spec.out_channels, oh, ow)
        elif spec.kind == "relu":
            pass
        elif spec.kind == "maxpool2d":
            if len(shape) != 3:
                raise EngineError(f"layer {i} (maxpool2d): expected (C, H, W), got {shape}")
            c, h, w = shape
            s = spec.stride or spec.window
            oh = (h - spec.window) // s + 1
            ow = (w - spec.window) // s + 1
            if oh <= 0 or ow <= 0:
                raise EngineError(f"layer {i} (maxpool2d): window larger than input")
            shape = (c, oh, ow)
        elif spec.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif spec.kind == "softmax":
            if len(shape) != 1:
                raise EngineError(f"layer {i} (softmax): expected flat input, got {shape}")
        else:
            raise EngineError(f"layer {i}: unknown kind {spec.kind!r}")
        out.append(shape)
    return out


def countable_layers(model: NetworkModel) -> list[tuple[int, int]]:
    """(layer_index, unit_count) for every dense/conv layer."""
    out = []
    for i, spec in enumerate(model.layers):
        if spec.kind == "dense":
            out.append((i, spec.out_dim))
        elif spec.kind == "conv2d":
            out.append((i, spec.out_channels))
    return out


def neuron_count(model: NetworkModel) -> int:
    return sum(n for _, n in countable_layers(model))


def neuron_ids(model: NetworkModel) -> list[NeuronId]:
    return [
        NeuronId(i, u) for i, n in countable_layers(model) for u in range(n)
    ]


def init_weights(
    input_shape: Sequence[int], layers: Sequence[LayerSpec], seed: int
) -> list[dict[str, np.ndarray]]:
    """Glorot-uniform initialization, deterministic given the seed."""
    layer_output_shapes(input_shape, layers)  # validate compatibility up front
    rng = np.random.default_rng(seed)
    weights: list[dict[str, np.ndarray]] = []
    for spec in layers:
        if spec.kind == "dense":
            limit = np.sqrt(6.0 / (spec.in_dim + spec.out_dim))
            weights.append(
                {
                    "W": rng.uniform(-limit, limit, (spec.in_dim, spec.out_dim)).astype(
                        np.float32
                    ),
                    "b": np.zeros(spec.out_dim, dtype=np.float32),
                }
            )
        elif spec.kind == "conv2d":
            fan_in = spec.in_channels * spec.kernel_h * spec.kernel_w
            fan_out = spec.out_channels * spec.kernel_h * spec.kernel_w
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(
                {
                    "W": rng.uniform(
                        -limit,
                        limit,
                        (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w),
                    ).astype(np.float32),
                    "b": np.zeros(spec.out_channels, dtype=np.float32),
                }
            )
        else:
            weights.append({})
    return weights


# ---------------------------------------------------------------------------
# ablation masks


def _keep_vectors(
    model: NetworkModel, mask: Iterable[NeuronId] | None
) -> dict[int, np.ndarray] | None:
    """Convert a set of disabled NeuronIds into per-layer keep vectors."""
    if not mask:
        return None
    counts = dict(countable_layers(model))
    keep: dict[int, np.ndarray] = {}
    for nid in mask:
        li, ui = int(nid[0]), int(nid[1])
        if li not in counts:
            raise EngineError(f"layer {li} is not a countable layer")
        if not 0 <= ui < counts[li]:
            raise EngineError(f"unit {ui} out of range for layer {li} ({counts[li]} units)")
        if li not in keep:
            keep[li] = np.ones(counts[li], dtype=np.float32)
        keep[li][ui] = 0.0
    return keep


# ---------------------------------------------------------------------------
# forward


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """x: (B, C, H, W) -> cols (B, oh*ow, C*kh*kw), plus (oh, ow)."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    b, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (B, C, oh, ow, kh, kw)
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b, oh * ow, c * kh * kw)
    return np.ascontiguousarray(cols), oh, ow


def _col2im(
    dcols: np.ndarray,
    x_shape: tuple[int, ...],
    kh: int,
    kw: int,
    stride: int,
    padding: int,
) -> np.ndarray:
    """Adjoint of _im2col.  dcols: (B, oh*ow, C*kh*kw) -> (B, C, H, W)."""
    b, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    dx = np.zeros((b, c, hp, wp), dtype=dcols.dtype)
    d = dcols.reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += d[
                :, :, :, :, i, j
            ]
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    return dx


def _plan(model: NetworkModel) -> list[tuple[str, int, bool]]:
    """Group layers into executable blocks: (kind, layer_index, fused_relu).

    A relu immediately after a dense/conv layer is fused into that layer's
    block so the post-activation hook (trace + ablation) lands in one place.
    """
    blocks = []
    i = 0
    n = len(model.layers)
    while i < n:
        kind = model.layers[i].kind
        if kind in ("dense", "conv2d"):
            fused = i + 1 < n and model.layers[i + 1].kind == "relu"
            blocks.append((kind, i, fused))
            i += 2 if fused else 1
        else:
            blocks.append((kind, i, False))
            i += 1
    return blocks


def _forward_impl(
    model: NetworkModel,
    x: np.ndarray,
    keep: dict[int, np.ndarray] | None,
    need_cache: bool,
    need_summaries: bool,
    check_finite: bool = False,
):
    """Batched forward pass.

    x: (B, *input_shape) float32.
    keep: optional dict layer_index -> keep mask, shape (units,) or (B, units).
    Returns (probs, logits, summaries, caches) where summaries maps countable
    layer index to (B, units) post-activation summaries and caches holds the
    per-block tensors needed for the backward pass.
    """
    # compute in float64: batched and per-example evaluations of the same
    # input must agree to ~1e-15 for the attribution axioms to hold at 1e-9
    a = np.asarray(x, dtype=np.float64)
    summaries: dict[int, np.ndarray] = {}
    caches: list[tuple] = []
    logits = None
    for kind, li, fused in _plan(model):
        if kind == "dense":
            w = model.weights[li]
            z = a @ w["W"] + w["b"]
            h = np.maximum(z, 0.0) if fused else z
            k = keep.get(li) if keep else None
            if k is not None:
                h = h * k
            if need_cache:
                caches.append(("dense", li, fused, a, z, k))
            if need_summaries:
                summaries[li] = h
            a = h
        elif kind == "conv2d":
            spec = model.layers[li]
            w = model.weights[li]
            cols, oh, ow = _im2col(a, spec.kernel_h, spec.kernel_w, spec.stride, spec.padding)
            wmat = w["W"].reshape(spec.out_channels, -1)
            z = cols @ wmat.T + w["b"]  # (B, oh*ow, out_ch)
            z = z.transpose(0, 2, 1).reshape(a.shape[0], spec.out_channels, oh, ow)
            h = np.maximum(z, 0.0) if fused else z
            k = keep.get(li) if keep else None
            if k is not None:
                h = h * np.asarray(k)[..., None, None]
            if need_cache:
                caches.append(("conv2d", li, fused, a.shape, cols, z, k))
            if need_summaries:
                summaries[li] = h.mean(axis=(2, 3))
            a = h
        elif kind == "relu":
            if need_cache:
                caches.append(("relu", li, False, a))
            a = np.maximum(a, 0.0)
        elif kind == "maxpool2d":
            spec = model.layers[li]
            s = spec.stride or spec.window
            win = np.lib.stride_tricks.sliding_window_view(
                a, (spec.window, spec.window), axis=(2, 3)
            )[:, :, ::s, ::s]
            out = win.max(axis=(4, 5))
            if need_cache:
                caches.append(("maxpool2d", li, False, a.shape, win, out))
            a = out
        elif kind == "flatten":
            if need_cache:
                caches.append(("flatten", li, False, a.shape))
            a = a.reshape(a.shape[0], -1)
        elif kind == "softmax":
            logits = a
            shifted = a - a.max(axis=1, keepdims=True)
            e = np.exp(shifted, dtype=np.float64)
            a = e / e.sum(axis=1, keepdims=True)
            if need_cache:
                caches.append(("softmax", li, False, None))
        if check_finite and not np.all(np.isfinite(a)):
            raise EngineError(f"non-finite values after layer {li} ({kind})")
    return a, logits, summaries, caches


def _backward_impl(
    model: NetworkModel, caches: list[tuple], dlogits: np.ndarray
):
    """Reverse-mode pass from a gradient at the logits (softmax input).

    Returns (param_grads, dx) where param_grads is a per-layer list of dicts
    (empty for parameter-free layers) and dx has the batch input's shape.
    Gradients are accumulated in float64.
    """
    grads: list[dict[str, np.ndarray]] = [{} for _ in model.layers]
    d = dlogits.astype(np.float64)
    for entry in reversed(caches):
        kind, li = entry[0], entry[1]
        if kind == "softmax":
            continue  # caller supplies the gradient at the logits directly
        if kind == "dense":
            _, _, fused, a_in, z, k = entry
            if k is not None:
                d = d * k
            if fused:
                d = d * (z > 0)
            grads[li] = {
                "W": a_in.astype(np.float64).T @ d,
                "b": d.sum(axis=0),
            }
            d = d @ model.weights[li]["W"].astype(np.float64).T
        elif kind == "conv2d":
            _, _, fused, x_shape, cols, z, k = entry
            spec = model.layers[li]
            if k is not None:
                d = d * np.asarray(k, dtype=np.float64)[..., None, None]
            if fused:
                d = d * (z > 0)
            b = d.shape[0]
            dz = d.reshape(b, spec.out_channels, -1).transpose(0, 2, 1)  # (B, L, out_ch)
            wmat = model.weights[li]["W"].reshape(spec.out_channels, -1).astype(np.float64)
            dwmat = np.einsum("blo,blk->ok", dz, cols.astype(np.float64))
            grads[li] = {
                "W": dwmat.reshape(model.weights[li]["W"].shape),
                "b": dz.sum(axis=(0, 1)),
            }
            dcols = dz @ wmat  # (B, L, C*kh*kw)
            d = _col2im(
                dcols, x_shape, spec.kernel_h, spec.kernel_w, spec.stride, spec.padding
            )
        elif kind == "relu":
            a_in = entry[3]
            d = d * (a_in > 0)
        elif kind == "maxpool2d":
            _, _, _, x_shape, win, out = entry
            spec = model.layers[li]
            s = spec.stride or spec.window
            bsz, c, oh, ow = out.shape
            dx = np.zeros(x_shape, dtype=np.float64)
            is_max = win == out[..., None, None]
            # split ties evenly so the adjoint matches the forward max exactly
            share = d[..., None, None] * is_max / is_max.sum(axis=(4, 5), keepdims=True)
            for i in range(spec.window):
                for j in range(spec.window):
                    dx[:, :, i : i + oh * s : s, j : j + ow * s : s] += share[..., i, j]
            d = dx
        elif kind == "flatten":
            d = d.reshape(entry[3])
    return grads, d


# ---------------------------------------------------------------------------
# public API


def _check_input(model: NetworkModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if x.shape == model.input_shape:
        return x
    if len(model.input_shape) == 1 and x.size == model.input_shape[0]:
        return x.reshape(model.input_shape)
    raise EngineError(
        f"input shape {x.shape} does not match model input {model.input_shape}"
    )


def forward(
    model: NetworkModel,
    x: np.ndarray,
    mask: Iterable[NeuronId] | None = None,
) -> tuple[np.ndarray, dict[NeuronId, float]]:
    """Single-example forward pass with activation trace.

    Returns (probabilities, trace) where the trace holds one scalar summary per
    countable neuron; masked neurons report 0.
    """
    x = _check_input(model, x)
    keep = _keep_vectors(model, mask)
    probs, _, summaries, _ = _forward_impl(
        model, x[None], keep, need_cache=False, need_summaries=True, check_finite=True
    )
    trace = {
        NeuronId(li, u): float(summaries[li][0, u])
        for li, n in countable_layers(model)
        for u in range(n)
    }
    return probs[0], trace


def forward_batch(
    model: NetworkModel,
    xs: np.ndarray,
    mask: Iterable[NeuronId] | None = None,
) -> np.ndarray:
    """Probabilities for a batch of inputs, shape (B, class_count)."""
    xs = np.asarray(xs, dtype=np.float32)
    if xs.shape[1:] != model.input_shape:
        raise EngineError(
            f"batch shape {xs.shape[1:]} does not match model input {model.input_shape}"
        )
    keep = _keep_vectors(model, mask)
    probs, _, _, _ = _forward_impl(model, xs, keep, False, False)
    return probs


def predict_batch(model: NetworkModel, xs: np.ndarray) -> np.ndarray:
    return forward_batch(model, xs).argmax(axis=1)


def batch_summaries(
    model: NetworkModel, xs: np.ndarray
) -> dict[int, np.ndarray]:
    """Per-countable-layer activation summaries for a batch of inputs."""
    xs = np.asarray(xs, dtype=np.float32)
    _, _, summaries, _ = _forward_impl(model, xs, None, False, True)
    return summaries


def example_losses(
    model: NetworkModel,
    xs: np.ndarray,
    labels: np.ndarray,
    keep: dict[int, np.ndarray] | None = None,
) -> np.ndarray:
    """Per-example cross-entropy, float64, probabilities floored at 1e-12.

    ``keep`` may carry per-row masks (shape (B, units)) which makes this the
    workhorse for batched coalition evaluation.
    """
    xs = np.asarray(xs, dtype=np.float32)
    labels = np.asarray(labels)
    probs, _, _, _ = _forward_impl(model, xs, keep, False, False)
    p = probs[np.arange(len(labels)), labels].astype(np.float64)
    return -np.log(np.maximum(p, PROB_FLOOR))


def loss(
    model: NetworkModel,
    inputs: np.ndarray,
    labels: Sequence[int],
    mask: Iterable[NeuronId] | None = None,
) -> float:
    """Mean cross-entropy over the batch; always finite and >= 0."""
    inputs = np.asarray(inputs, dtype=np.float32)
    labels = np.asarray(labels)
    if inputs.ndim == len(model.input_shape):
        inputs = inputs[None]
        labels = np.atleast_1d(labels)
    if len(inputs) == 0:
        raise EngineError("empty batch")
    if labels.min() < 0 or labels.max() >= model.class_count:
        raise EngineError(f"labels must lie in [0, {model.class_count})")
    keep = _keep_vectors(model, mask)
    return float(example_losses(model, inputs, labels, keep).mean())


def _loss_backward(
    model: NetworkModel, xs: np.ndarray, labels: np.ndarray
):
    probs, _, _, caches = _forward_impl(model, xs, None, True, False)
    onehot = np.zeros_like(probs, dtype=np.float64)
    onehot[np.arange(len(labels)), labels] = 1.0
    # d(mean CE)/dlogits; the 1e-12 floor only binds when p underflows, where
    # the clamp makes the loss locally constant -- zero those rows' gradients
    p = probs[np.arange(len(labels)), labels]
    scale = (p > PROB_FLOOR).astype(np.float64) / len(labels)
    dlogits = (probs.astype(np.float64) - onehot) * scale[:, None]
    return _backward_impl(model, caches, dlogits)


def gradients(
    model: NetworkModel, x: np.ndarray, label: int
) -> tuple[list[dict[str, np.ndarray]], np.ndarray]:
    """Gradients of the cross-entropy loss for a single example.

    Returns (param_grads, input_grad); input_grad has the input's shape.
    """
    x = _check_input(model, x)
    grads, dx = _loss_backward(model, x[None], np.array([int(label)]))
    for li, g in enumerate(grads):
        for name, arr in g.items():
            if not np.all(np.isfinite(arr)):
                raise EngineError(f"non-finite gradient for {name} in layer {li}")
    return grads, dx[0]


def batch_gradients(
    model: NetworkModel, xs: np.ndarray, labels: Sequence[int]
) -> list[dict[str, np.ndarray]]:
    """Parameter gradients of the mean loss over a batch."""
    xs = np.asarray(xs, dtype=np.float32)
    grads, _ = _loss_backward(model, xs, np.asarray(labels))
    return grads


def input_gradients(
    model: NetworkModel, xs: np.ndarray, labels: Sequence[int]
) -> np.ndarray:
    """Per-example input gradient of that example's own loss (batched)."""
    xs = np.asarray(xs, dtype=np.float32)
    labels = np.asarray(labels)
    probs, _, _, caches = _forward_impl(model, xs, None, True, False)
    onehot = np.zeros_like(probs, dtype=np.float64)
    onehot[np.arange(len(labels)), labels] = 1.0
    p = probs[np.arange(len(labels)), labels]
    keep_row = (p > PROB_FLOOR).astype(np.float64)
    dlogits = (probs.astype(np.float64) - onehot) * keep_row[:, None]
    _, dx = _backward_impl(model, caches, dlogits)
    return dx


def logit_combination_input_grads(
    model: NetworkModel, xs: np.ndarray, coeffs: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Input gradients of ``coeffs . logits`` per example.

    coeffs: (class_count,) applied to every row, or (B, class_count).
    Returns (values, grads): the scalar combination and its input gradient for
    each row.  Used by the robustness estimator on the logit margin.
    """
    xs = np.asarray(xs, dtype=np.float32)
    coeffs = np.asarray(coeffs, dtype=np.float64)
    _, logits, _, caches = _forward_impl(model, xs, None, True, False)
    if coeffs.ndim == 1:
        coeffs = np.broadcast_to(coeffs, logits.shape)
    values = (logits.astype(np.float64) * coeffs).sum(axis=1)
    _, dx = _backward_impl(model, caches, coeffs)
    return values, dx


def sgd_step(
    model: NetworkModel,
    batch: np.ndarray,
    labels: Sequence[int],
    learning_rate: float,
) -> NetworkModel:
    """One SGD update on the mean batch loss; returns a new model."""
    if learning_rate <= 0:
        raise EngineError("learning_rate must be > 0")
    grads = batch_gradients(model, batch, labels)
    new = model.copy()
    for li, g in enumerate(grads):
        for name, darr in g.items():
            if not np.all(np.isfinite(darr)):
                raise EngineError(f"non-finite update for {name} in layer {li}")
            upd = new.weights[li][name].astype(np.float64) - learning_rate * darr
            new.weights[li][name] = upd.astype(np.float32)
    return new
