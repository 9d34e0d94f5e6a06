"""Persistent model/dataset formats, miniature model zoo and defect planting.

Model files are a JSON manifest plus a sibling ``.bin`` blob of little-endian
float32 values (layer order as in the manifest; dense layout = weights then
biases, conv layout = [out_ch][in_ch][kh][kw] then biases).  Save -> load ->
save round-trips are byte-identical.
"""

from __future__ import annotations

import csv
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import engine
from .engine import LayerSpec, NetworkModel

__all__ = [
    "StoreError",
    "Dataset",
    "DefectSpec",
    "save_model",
    "load_model",
    "load_dataset",
    "synthetic_blobs",
    "digits_dataset",
    "save_dataset_csv",
    "save_dataset_idx",
    "pollute_dataset",
    "train_model",
    "mlp_arch",
    "convnet_arch",
    "well_trained_regime",
    "underfit_regime",
    "overfit_regime",
]

MANIFEST_VERSION = 1
IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049


class StoreError(ValueError):
    """Raised on malformed files, bad specs or validation failures."""


# ---------------------------------------------------------------------------
# model persistence


def _param_order(spec: LayerSpec) -> list[str]:
    return ["W", "b"] if spec.kind in ("dense", "conv2d") else []


def save_model(model: NetworkModel, path: str | Path) -> None:
    """Write ``path`` (JSON manifest) and ``path``-with-``.bin``-suffix blob."""
    path = Path(path)
    blob_path = path.with_suffix(".bin")
    entries = []
    offset = 0
    chunks = []
    for li, spec in enumerate(model.layers):
        arrays = []
        for name in _param_order(spec):
            arr = np.ascontiguousarray(model.weights[li][name], dtype="<f4")
            raw = arr.tobytes()
            arrays.append(
                {
                    "name": name,
                    "shape": list(arr.shape),
                    "offset": offset,
                    "length": arr.size,
                }
            )
            chunks.append(raw)
            offset += arr.size
        entries.append({"layer": li, "arrays": arrays})
    manifest = {
        "format_version": MANIFEST_VERSION,
        "input_shape": list(model.input_shape),
        "class_count": model.class_count,
        "layers": [spec.to_dict() for spec in model.layers],
        "weights": entries,
        "weights_file": blob_path.name,
        "metadata": model.metadata,
    }
    _atomic_write_bytes(blob_path, b"".join(chunks))
    _atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_model(path: str | Path) -> NetworkModel:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise StoreError(f"cannot read manifest {path}: {exc}") from exc
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise StoreError(
            f"unsupported manifest version {manifest.get('format_version')!r}"
        )
    try:
        layers = [LayerSpec.from_dict(d) for d in manifest["layers"]]
    except engine.EngineError as exc:
        raise StoreError(str(exc)) from exc
    blob_path = path.parent / manifest["weights_file"]
    try:
        blob = np.fromfile(blob_path, dtype="<f4")
    except OSError as exc:
        raise StoreError(f"cannot read weight blob {blob_path}: {exc}") from exc

    weights: list[dict[str, np.ndarray]] = [{} for _ in layers]
    for entry in manifest["weights"]:
        li = entry["layer"]
        spec = layers[li]
        for arr in entry["arrays"]:
            shape = tuple(arr["shape"])
            expected = _expected_shape(spec, arr["name"], li)
            if shape != expected:
                raise StoreError(
                    f"layer {li} ({spec.kind}): array {arr['name']} has shape "
                    f"{shape}, expected {expected} "
                    f"({int(np.prod(expected))} values)"
                )
            lo, n = arr["offset"], arr["length"]
            if n != int(np.prod(shape)):
                raise StoreError(
                    f"layer {li} ({spec.kind}): array {arr['name']} declares "
                    f"{n} values for shape {shape}"
                )
            if lo + n > blob.size:
                raise StoreError(
                    f"weight blob truncated: layer {li} ({spec.kind}) array "
                    f"{arr['name']} needs values up to {lo + n}, blob has {blob.size}"
                )
            weights[li][arr["name"]] = blob[lo : lo + n].reshape(shape).copy()
    try:
        model = NetworkModel(
            input_shape=tuple(manifest["input_shape"]),
            layers=layers,
            weights=weights,
            class_count=manifest["class_count"],
            metadata=manifest.get("metadata", {}),
        )
    except engine.EngineError as exc:
        raise StoreError(str(exc)) from exc
    return model


def _expected_shape(spec: LayerSpec, name: str, li: int) -> tuple[int, ...]:
    if spec.kind == "dense":
        return (spec.in_dim, spec.out_dim) if name == "W" else (spec.out_dim,)
    if spec.kind == "conv2d":
        if name == "W":
            return (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w)
        return (spec.out_channels,)
    raise StoreError(f"layer {li} ({spec.kind}) should not carry parameters")


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    """Inputs normalized to [0, 1] with per-example train/test split tags."""

    name: str
    inputs: np.ndarray  # (N, *shape) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    is_train: np.ndarray  # (N,) bool

    def __post_init__(self) -> None:
        self.inputs = np.asarray(self.inputs, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.is_train = np.asarray(self.is_train, dtype=bool)
        n = len(self.inputs)
        if len(self.labels) != n or len(self.is_train) != n:
            raise StoreError("inputs, labels and split tags must have equal length")
        if n and (self.inputs.min() < 0.0 or self.inputs.max() > 1.0):
            raise StoreError("input values must lie in [0, 1]")

    @property
    def train_inputs(self) -> np.ndarray:
        return self.inputs[self.is_train]

    @property
    def train_labels(self) -> np.ndarray:
        return self.labels[self.is_train]

    @property
    def test_inputs(self) -> np.ndarray:
        return self.inputs[~self.is_train]

    @property
    def test_labels(self) -> np.ndarray:
        return self.labels[~self.is_train]

    def copy(self) -> "Dataset":
        return Dataset(
            self.name, self.inputs.copy(), self.labels.copy(), self.is_train.copy()
        )


def _default_split(n: int) -> np.ndarray:
    """Deterministic 80/20 split: every fifth example is a test example."""
    is_train = np.ones(n, dtype=bool)
    is_train[4::5] = False
    return is_train


def load_dataset(path: str | Path, format: str, **kwargs) -> Dataset:
    """Load a dataset; format is csv_digits, idx_images or synthetic_blobs."""
    if format == "csv_digits":
        return _load_csv_digits(Path(path))
    if format == "idx_images":
        return _load_idx(Path(path))
    if format == "synthetic_blobs":
        return synthetic_blobs(**kwargs)
    raise StoreError(f"unknown dataset format {format!r}")


def _load_csv_digits(path: Path) -> Dataset:
    """One example per row: label first, then pixel values on a 0-255 scale."""
    rows = []
    labels = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                values = [int(v) for v in row]
            except ValueError as exc:
                raise StoreError(f"{path}:{lineno}: non-integer field: {exc}") from exc
            label, pixels = values[0], values[1:]
            if not pixels:
                raise StoreError(f"{path}:{lineno}: row has no pixel values")
            for px in pixels:
                if not 0 <= px <= 255:
                    raise StoreError(
                        f"{path}:{lineno}: pixel value {px} out of range [0, 255]"
                    )
            rows.append(pixels)
            labels.append(label)
    if not rows:
        raise StoreError(f"{path}: empty dataset")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise StoreError(f"{path}: inconsistent row widths {sorted(widths)}")
    pixels = np.array(rows, dtype=np.float32) / 255.0
    side = int(round(len(rows[0]) ** 0.5))
    if side * side == len(rows[0]):
        pixels = pixels.reshape(-1, 1, side, side)
    return Dataset(path.stem, pixels, np.array(labels), _default_split(len(rows)))


def save_dataset_csv(data: Dataset, path: str | Path) -> None:
    """Inverse of the csv_digits loader (pixels quantized to 0-255)."""
    flat = np.clip(np.rint(data.inputs.reshape(len(data.inputs), -1) * 255), 0, 255)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for label, row in zip(data.labels, flat.astype(int)):
            writer.writerow([int(label), *row.tolist()])


def _read_idx_header(raw: bytes, expect_magic: int, path: Path) -> tuple[int, tuple]:
    if len(raw) < 4:
        raise StoreError(f"{path}: truncated IDX header")
    magic = struct.unpack(">i", raw[:4])[0]
    if magic != expect_magic:
        raise StoreError(
            f"{path}: bad IDX magic {magic}, expected {expect_magic}"
        )
    ndim = 3 if expect_magic == IDX_IMAGE_MAGIC else 1
    dims = struct.unpack(f">{ndim}i", raw[4 : 4 + 4 * ndim])
    return 4 + 4 * ndim, dims


def _load_idx(images_path: Path) -> Dataset:
    """Classic big-endian IDX image/label pair.

    The labels file is located by replacing ``images`` with ``labels`` in the
    file name.
    """
    labels_path = images_path.with_name(images_path.name.replace("images", "labels"))
    if labels_path == images_path or not labels_path.exists():
        raise StoreError(f"cannot find labels file for {images_path}")
    raw = images_path.read_bytes()
    off, (n, h, w) = _read_idx_header(raw, IDX_IMAGE_MAGIC, images_path)
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=off)
    if pixels.size != n * h * w:
        raise StoreError(f"{images_path}: expected {n * h * w} pixels, got {pixels.size}")
    raw_l = labels_path.read_bytes()
    off_l, (nl,) = _read_idx_header(raw_l, IDX_LABEL_MAGIC, labels_path)
    labels = np.frombuffer(raw_l, dtype=np.uint8, offset=off_l)
    if labels.size != nl or nl != n:
        raise StoreError(f"{labels_path}: label count {labels.size} != image count {n}")
    inputs = (pixels.astype(np.float32) / 255.0).reshape(n, 1, h, w)
    return Dataset(images_path.stem, inputs, labels.astype(np.int64), _default_split(n))


def save_dataset_idx(data: Dataset, images_path: str | Path) -> None:
    images_path = Path(images_path)
    labels_path = images_path.with_name(images_path.name.replace("images", "labels"))
    if labels_path == images_path:
        raise StoreError("images path must contain 'images' to derive the labels path")
    imgs = np.clip(np.rint(np.squeeze(data.inputs, axis=1) * 255), 0, 255).astype(np.uint8)
    n, h, w = imgs.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">4i", IDX_IMAGE_MAGIC, n, h, w))
        fh.write(imgs.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">2i", IDX_LABEL_MAGIC, n))
        fh.write(data.labels.astype(np.uint8).tobytes())


def synthetic_blobs(
    n: int = 200, classes: int = 2, dim: int = 4, seed: int = 0, spread: float = 0.08
) -> Dataset:
    """Gaussian blobs in [0, 1]^dim, labels balanced across classes."""
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.2, 0.8, (classes, dim))
    labels = np.arange(n) % classes
    points = centers[labels] + rng.normal(0.0, spread, (n, dim))
    points = np.clip(points, 0.0, 1.0).astype(np.float32)
    return Dataset(f"blobs{classes}", points, labels, _default_split(n))


def digits_dataset() -> Dataset:
    """8x8 grayscale digit images (10 classes, ~1800 examples), values in [0, 1]."""
    from sklearn.datasets import load_digits

    raw = load_digits()
    inputs = (raw.images.astype(np.float32) / 16.0).reshape(-1, 1, 8, 8)
    return Dataset("digits8x8", inputs, raw.target.astype(np.int64), _default_split(len(inputs)))


# ---------------------------------------------------------------------------
# defect planting


@dataclass
class DefectSpec:
    """Pollution patch parameters or a training-regime descriptor."""

    kind: str  # polluted | underfit | overfit | well_trained
    alpha_fraction: float = 0.1
    patch_min: int = 1
    patch_max: int = 6
    target_class: int = 1
    epoch_count: int = 30
    batch_size: int = 32
    learning_rate: float = 0.1
    train_fraction: float = 1.0  # share of the train split actually used

    def __post_init__(self) -> None:
        if self.kind not in ("polluted", "underfit", "overfit", "well_trained"):
            raise StoreError(f"unknown defect kind {self.kind!r}")
        if self.kind == "polluted" and not 0.0 < self.alpha_fraction <= 1.0:
            raise StoreError("alpha_fraction must lie in (0, 1]")
        if self.patch_min > self.patch_max:
            raise StoreError("patch_min must be <= patch_max")
        if not 0.0 < self.train_fraction <= 1.0:
            raise StoreError("train_fraction must lie in (0, 1]")


def well_trained_regime(**kw) -> DefectSpec:
    return DefectSpec(kind="well_trained", **{"epoch_count": 30, "batch_size": 32, **kw})


def underfit_regime(**kw) -> DefectSpec:
    return DefectSpec(kind="underfit", **{"epoch_count": 1, "batch_size": 512, **kw})


def overfit_regime(**kw) -> DefectSpec:
    return DefectSpec(
        kind="overfit",
        **{"epoch_count": 250, "batch_size": 16, "train_fraction": 0.08, **kw},
    )


def pollute_dataset(data: Dataset, spec: DefectSpec, seed: int) -> Dataset:
    """Stamp white patches of random size at random locations on round(alpha *
    n_train) uniformly chosen train examples and relabel them to the target
    class.  Deterministic given the seed."""
    if spec.kind != "polluted":
        raise StoreError("pollute_dataset requires a spec with kind='polluted'")
    if data.inputs.ndim < 3:
        raise StoreError("pollution requires image-shaped inputs (.., H, W)")
    h, w = data.inputs.shape[-2], data.inputs.shape[-1]
    if spec.patch_max > min(h, w):
        raise StoreError(
            f"patch_max {spec.patch_max} exceeds image size {h}x{w}"
        )
    out = data.copy()
    train_idx = np.flatnonzero(data.is_train)
    n_pick = int(round(spec.alpha_fraction * len(train_idx)))
    if n_pick == 0:
        return out
    rng = np.random.default_rng(seed)
    picked = rng.choice(train_idx, size=n_pick, replace=False)
    for idx in picked:
        ph = int(rng.integers(spec.patch_min, spec.patch_max + 1))
        pw = int(rng.integers(spec.patch_min, spec.patch_max + 1))
        top = int(rng.integers(0, h - ph + 1))
        left = int(rng.integers(0, w - pw + 1))
        out.inputs[idx, ..., top : top + ph, left : left + pw] = 1.0
        out.labels[idx] = spec.target_class
    return out


# ---------------------------------------------------------------------------
# miniature model zoo


def mlp_arch(input_shape: Sequence[int] = (1, 8, 8), hidden: int = 32, classes: int = 10):
    in_dim = int(np.prod(input_shape))
    return [
        engine.flatten(),
        engine.dense(in_dim, hidden),
        engine.relu(),
        engine.dense(hidden, classes),
        engine.softmax(),
    ]


def convnet_arch(input_shape: Sequence[int] = (1, 8, 8), classes: int = 10):
    """LeNet-style miniature: two conv/pool stages then a dense head."""
    c, h, w = input_shape
    return [
        engine.conv2d(c, 8, 3, 3, padding=1),
        engine.relu(),
        engine.maxpool2d(2),
        engine.conv2d(8, 16, 3, 3, padding=1),
        engine.relu(),
        engine.maxpool2d(2),
        engine.flatten(),
        engine.dense(16 * (h // 4) * (w // 4), hidden_dim := 32),
        engine.relu(),
        engine.dense(hidden_dim, classes),
        engine.softmax(),
    ]


def train_model(
    data: Dataset,
    arch: Sequence[LayerSpec],
    regime: DefectSpec,
    seed: int,
    input_shape: Sequence[int] | None = None,
) -> NetworkModel:
    """Train an architecture under a regime; deterministic given the seed.

    For kind='polluted' the training split is polluted first (patch parameters
    from the regime spec, pollution seed derived from the training seed).
    Records final train/test accuracy in the model metadata.
    """
    if input_shape is None:
        input_shape = data.inputs.shape[1:]
    class_count = int(data.labels.max()) + 1
    if regime.kind == "polluted":
        data = pollute_dataset(data, regime, seed=seed + 1)
    model = NetworkModel(
        input_shape=tuple(input_shape),
        layers=list(arch),
        weights=engine.init_weights(input_shape, arch, seed),
        class_count=class_count,
    )
    xs, ys = data.train_inputs, data.train_labels
    if regime.train_fraction < 1.0:
        keep = max(regime.batch_size, int(round(regime.train_fraction * len(xs))))
        xs, ys = xs[:keep], ys[:keep]
    rng = np.random.default_rng(seed + 17)
    for epoch in range(regime.epoch_count):
        order = rng.permutation(len(xs))
        for lo in range(0, len(xs), regime.batch_size):
            sel = order[lo : lo + regime.batch_size]
            model = engine.sgd_step(model, xs[sel], ys[sel], regime.learning_rate)
        ep_loss = engine.loss(model, xs[:512], ys[:512])
        if not np.isfinite(ep_loss) or ep_loss > 1e3:
            raise StoreError(f"training diverged at epoch {epoch} (loss={ep_loss})")
    train_acc = float(
        (engine.predict_batch(model, xs) == ys).mean()
    ) if len(xs) else 0.0
    test_acc = float(
        (engine.predict_batch(model, data.test_inputs) == data.test_labels).mean()
    ) if len(data.test_inputs) else 0.0
    model.metadata = {
        "regime": regime.kind,
        "epochs": regime.epoch_count,
        "batch_size": regime.batch_size,
        "learning_rate": regime.learning_rate,
        "seed": seed,
        "train_accuracy": round(train_acc, 6),
        "test_accuracy": round(test_acc, 6),
        "dataset": data.name,
    }
    return model
