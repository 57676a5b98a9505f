"""Segmentation model: convolutional feature extractor, per-class linear
classifiers, and a single auxiliary head.

Logits follow the per-pixel affine rule ``z(i, c) = f(i) . w(c) + b(c)``.
:func:`decompose` splits the bias-free part of each logit into the sums of
positive and negative feature/weight products; gradient flows only through
the selected elements, and products exactly at zero contribute to neither
side.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numcore as nc
from .numcore import Tensor

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class Backbone:
    """Stack of stride-1, same-padding conv layers with relu between them.

    No activation after the last layer, so features carry both signs.
    """

    kernels: list[Tensor]  # each (kh, kw, cin, cout)
    biases: list[Tensor]  # each (cout,)

    @property
    def feature_dim(self) -> int:
        return self.kernels[-1].shape[3]

    @property
    def in_channels(self) -> int:
        return self.kernels[0].shape[2]

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            out.append((f"conv{i}.kernel", k))
            out.append((f"conv{i}.bias", b))
        return out


@dataclass
class ClassifierBank:
    """One (weight row, bias) pair per class, ordered by class id."""

    class_ids: tuple[int, ...]
    weights: Tensor  # (num_classes, d)
    biases: Tensor  # (num_classes,)

    def __post_init__(self):
        if len(self.class_ids) != self.weights.shape[0] or len(self.class_ids) != self.biases.shape[0]:
            raise ValueError("classifier bank rows must match the class-id list")

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)

    def index_of(self, class_id: int) -> int:
        return self.class_ids.index(class_id)


@dataclass
class AuxClassifier:
    """Single head trained to mark every current-step pixel as a negative."""

    weight: Tensor  # (1, d)
    bias: Tensor  # (1,)


@dataclass
class ModelState:
    backbone: Backbone
    bank: ClassifierBank
    aux: AuxClassifier
    step: int

    def parameters(self) -> list[tuple[str, Tensor]]:
        return self.backbone.parameters() + [
            ("bank.weights", self.bank.weights),
            ("bank.biases", self.bank.biases),
            ("aux.weight", self.aux.weight),
            ("aux.bias", self.aux.bias),
        ]

    def zero_grads(self) -> None:
        for _, p in self.parameters():
            p.zero_grad()

    def frozen_copy(self) -> "ModelState":
        """Deep value copy with gradients disabled, for distillation targets."""
        return _copy_state(self, requires_grad=False)

    def trainable_copy(self) -> "ModelState":
        return _copy_state(self, requires_grad=True)


@dataclass
class DecomposedLogits:
    """Logits split into positive/negative reasoning scores plus the bias.

    ``z`` is reassembled as ``z_plus + z_minus + bias`` so the decomposition
    identity is exact by construction.
    """

    z: Tensor  # (HW, C), includes bias
    z_plus: Tensor  # (HW, C), >= 0, bias-free
    z_minus: Tensor  # (HW, C), <= 0, bias-free
    bias: Tensor  # (C,)


def _copy_tensor(t: Tensor, requires_grad: bool) -> Tensor:
    return Tensor(t.data.copy(), requires_grad=requires_grad)


def _copy_state(state: ModelState, requires_grad: bool) -> ModelState:
    backbone = Backbone(
        kernels=[_copy_tensor(k, requires_grad) for k in state.backbone.kernels],
        biases=[_copy_tensor(b, requires_grad) for b in state.backbone.biases],
    )
    bank = ClassifierBank(
        class_ids=state.bank.class_ids,
        weights=_copy_tensor(state.bank.weights, requires_grad),
        biases=_copy_tensor(state.bank.biases, requires_grad),
    )
    aux = AuxClassifier(
        weight=_copy_tensor(state.aux.weight, requires_grad),
        bias=_copy_tensor(state.aux.bias, requires_grad),
    )
    return ModelState(backbone=backbone, bank=bank, aux=aux, step=state.step)


def init_backbone(
    rng: np.random.Generator,
    channels: tuple[int, ...] = (16, 16),
    in_channels: int = 3,
    kernel_size: int = 3,
) -> Backbone:
    """Fan-in-scaled uniform kernels, zero biases."""
    kernels, biases = [], []
    cin = in_channels
    for cout in channels:
        fan_in = kernel_size * kernel_size * cin
        bound = np.sqrt(6.0 / fan_in)
        k = rng.uniform(-bound, bound, size=(kernel_size, kernel_size, cin, cout))
        kernels.append(Tensor(k, requires_grad=True))
        biases.append(Tensor(np.zeros(cout), requires_grad=True))
        cin = cout
    return Backbone(kernels=kernels, biases=biases)


def forward_features(backbone: Backbone, image) -> Tensor:
    """Dense per-pixel features, flattened to (H*W, d)."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.data.ndim != 3 or x.shape[2] != backbone.in_channels:
        raise nc.ShapeMismatchError("forward_features", x.shape, ("H", "W", backbone.in_channels))
    h, w = x.shape[0], x.shape[1]
    last = len(backbone.kernels) - 1
    for i, (k, b) in enumerate(zip(backbone.kernels, backbone.biases)):
        x = nc.conv2d(x, k, b)
        if i != last:
            x = nc.relu(x)
    return nc.reshape(x, (h * w, backbone.feature_dim))


def logits(f: Tensor, bank: ClassifierBank) -> Tensor:
    """Per-pixel class logits: dot product with each class weight plus its bias."""
    if bank.num_classes == 0:
        raise ValueError("classifier bank is empty")
    return nc.linear(f, bank.weights, bank.biases)


def decompose(
    f: Tensor, bank: ClassifierBank, head_range: tuple[int, int] | None = None
) -> DecomposedLogits:
    """Split logits into positive/negative reasoning scores; bias kept separate.

    ``head_range`` restricts the decomposition to a contiguous block of
    classifier heads (e.g. only the old classes); gradient still reaches the
    full weight matrix through the row slice.
    """
    if bank.num_classes == 0:
        raise ValueError("classifier bank is empty")
    if head_range is None:
        weights, biases = bank.weights, bank.biases
    else:
        start, stop = head_range
        weights = nc.slice_rows(bank.weights, start, stop)
        biases = nc.slice_rows(bank.biases, start, stop)
    products = nc.pairwise_products(f, weights)  # (HW, C, d)
    z_plus = nc.tsum(nc.select_positive(products), axis=2)
    z_minus = nc.tsum(nc.select_negative(products), axis=2)
    z = nc.add_bias(nc.add(z_plus, z_minus), biases)
    return DecomposedLogits(z=z, z_plus=z_plus, z_minus=z_minus, bias=biases)


def aux_logit(f: Tensor, aux: AuxClassifier) -> Tensor:
    """Auxiliary-head logit (HW, 1) on detached features.

    Detaching enforces the contract that the feature extractor receives no
    gradient from the auxiliary objective.
    """
    return nc.linear(f.detach(), aux.weight, aux.bias)


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest + little-endian float64 blob


def save_checkpoint(state: ModelState, path_prefix: str | Path) -> tuple[Path, Path]:
    """Write <prefix>.json and <prefix>.bin; parameters concatenate in manifest order."""
    prefix = Path(path_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    blob = bytearray()
    for name, tensor in state.parameters():
        arr = np.ascontiguousarray(tensor.data, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape)})
        blob.extend(arr.tobytes())
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "step": state.step,
        "class_ids": list(state.bank.class_ids),
        "arrays": entries,
    }
    json_path = prefix.with_suffix(".json")
    bin_path = prefix.with_suffix(".bin")
    with open(json_path, "w", encoding="ascii") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(bin_path, "wb") as fh:
        fh.write(bytes(blob))
    return json_path, bin_path


def load_checkpoint(path_prefix: str | Path, requires_grad: bool = True) -> ModelState:
    prefix = Path(path_prefix)
    with open(prefix.with_suffix(".json"), "r", encoding="ascii") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format: {manifest.get('format_version')}")
    raw = np.fromfile(prefix.with_suffix(".bin"), dtype="<f8")

    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arrays[entry["name"]] = raw[offset : offset + count].reshape(shape)
        offset += count
    if offset != raw.size:
        raise ValueError("checkpoint blob length does not match its manifest")

    kernels, biases = [], []
    i = 0
    while f"conv{i}.kernel" in arrays:
        kernels.append(Tensor(arrays[f"conv{i}.kernel"], requires_grad=requires_grad))
        biases.append(Tensor(arrays[f"conv{i}.bias"], requires_grad=requires_grad))
        i += 1
    bank = ClassifierBank(
        class_ids=tuple(int(c) for c in manifest["class_ids"]),
        weights=Tensor(arrays["bank.weights"], requires_grad=requires_grad),
        biases=Tensor(arrays["bank.biases"], requires_grad=requires_grad),
    )
    aux = AuxClassifier(
        weight=Tensor(arrays["aux.weight"], requires_grad=requires_grad),
        bias=Tensor(arrays["aux.bias"], requires_grad=requires_grad),
    )
    return ModelState(
        backbone=Backbone(kernels=kernels, biases=biases),
        bank=bank,
        aux=aux,
        step=int(manifest["step"]),
    )
