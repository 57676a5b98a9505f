"""Deterministic synthetic shapes dataset and incremental-scenario splitting.

Every class is rendered as a fixed (shape, color) pair on a textured gray
background, with hard edges so the label masks are pixel-exact. Generation is
a pure function of the seed: the same seed always yields byte-identical
pools. Class coverage is guaranteed by construction (sample ``i`` of a pool
always contains class ``i mod K + 1``).
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

BACKGROUND_ID = 0
UNKNOWN_ID = 0  # unknown is merged with background at train time
MAX_CLASSES = 12  # hue spacing below 30 degrees stops being distinguishable

_SHAPES = ("square", "disc", "triangle", "ring")


@dataclass(frozen=True)
class SegSample:
    """One image plus its ground-truth class-id mask."""

    id: int
    image: np.ndarray  # (H, W, 3) float64 in [0, 1]
    labels: np.ndarray  # (H, W) int64 in {0..K}

    def class_histogram(self) -> dict[int, int]:
        ids, counts = np.unique(self.labels, return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts)}


@dataclass(frozen=True)
class ScenarioPlan:
    """Ordered partition of the object classes into incremental steps."""

    class_schedule: tuple[tuple[int, ...], ...]
    setting: str  # "disjoint" or "overlapped"

    def __post_init__(self):
        if self.setting not in ("disjoint", "overlapped"):
            raise ValueError(f"unknown setting {self.setting!r}")
        seen: set[int] = set()
        for t, group in enumerate(self.class_schedule):
            if len(group) < 1:
                raise ValueError(f"step {t + 1} has an empty class set")
            if seen & set(group):
                raise ValueError("class schedule sets must be pairwise disjoint")
            seen.update(group)

    @classmethod
    def from_notation(cls, notation: str, num_classes: int, setting: str) -> "ScenarioPlan":
        """Build a plan from 'Nb-Nn' notation over classes 1..num_classes."""
        try:
            base, novel = (int(p) for p in notation.split("-"))
        except ValueError as exc:
            raise ValueError(f"scenario notation must be 'Nb-Nn', got {notation!r}") from exc
        if base < 1 or novel < 0 or base > num_classes:
            raise ValueError(f"invalid scenario {notation!r} for {num_classes} classes")
        remaining = num_classes - base
        if remaining == 0:
            schedule = [tuple(range(1, base + 1))]
        else:
            if novel < 1 or remaining % novel != 0:
                raise ValueError(
                    f"scenario {notation!r} does not partition {num_classes} classes evenly"
                )
            schedule = [tuple(range(1, base + 1))]
            nxt = base + 1
            while nxt <= num_classes:
                schedule.append(tuple(range(nxt, nxt + novel)))
                nxt += novel
        return cls(class_schedule=tuple(schedule), setting=setting)

    @property
    def num_steps(self) -> int:
        return len(self.class_schedule)

    @property
    def all_classes(self) -> tuple[int, ...]:
        return tuple(c for group in self.class_schedule for c in group)

    def classes_at(self, t: int) -> tuple[int, ...]:
        self._check_step(t)
        return self.class_schedule[t - 1]

    def seen_classes(self, t: int) -> tuple[int, ...]:
        """All classes scheduled up to and including step t, in schedule order."""
        self._check_step(t)
        return tuple(c for group in self.class_schedule[:t] for c in group)

    def old_classes(self, t: int) -> tuple[int, ...]:
        self._check_step(t)
        return tuple(c for group in self.class_schedule[: t - 1] for c in group)

    def future_classes(self, t: int) -> tuple[int, ...]:
        self._check_step(t)
        return tuple(c for group in self.class_schedule[t:] for c in group)

    def _check_step(self, t: int) -> None:
        if not 1 <= t <= self.num_steps:
            raise ValueError(f"step {t} outside 1..{self.num_steps}")


@dataclass(frozen=True)
class StepDataset:
    """Training samples for one incremental step, labels remapped to C_t + unknown."""

    step: int
    samples: tuple[SegSample, ...]
    classes: tuple[int, ...]
    unknown_id: int = UNKNOWN_ID


def class_color(k: int, num_classes: int) -> tuple[float, float, float]:
    """Fixed saturated hue for class k, evenly spaced around the wheel."""
    hue = (k - 1) / num_classes
    return colorsys.hsv_to_rgb(hue, 0.85, 0.9)


def class_shape(k: int) -> str:
    return _SHAPES[(k - 1) % len(_SHAPES)]


def _shape_mask(shape: str, h: int, w: int, cy: int, cx: int, r: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    if shape == "square":
        return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    if shape == "disc":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if shape == "triangle":
        dy = yy - (cy - r)
        return (dy >= 0) & (dy <= 2 * r) & (np.abs(xx - cx) * 2 <= dy)
    if shape == "ring":
        rr = (yy - cy) ** 2 + (xx - cx) ** 2
        inner = max(1, int(round(0.55 * r)))
        return (rr <= r * r) & (rr > inner * inner)
    raise ValueError(f"unknown shape {shape!r}")


def _render_sample(
    sample_id: int,
    rng: np.random.Generator,
    num_classes: int,
    h: int,
    w: int,
) -> SegSample:
    base = rng.uniform(0.15, 0.45)
    image = np.clip(base + rng.uniform(-0.08, 0.08, size=(h, w, 3)), 0.0, 1.0)
    labels = np.zeros((h, w), dtype=np.int64)

    primary = sample_id % num_classes + 1
    n_extra = int(rng.integers(0, 3))  # 1..3 instances total
    others = [c for c in range(1, num_classes + 1) if c != primary]
    extras = list(rng.choice(others, size=n_extra, replace=False)) if n_extra else []
    wanted = [primary] + [int(c) for c in extras]

    r_max = min(h, w) // 4
    occupied = np.zeros((h, w), dtype=bool)
    for idx, k in enumerate(wanted):
        tries = 200 if idx == 0 else 40
        for _ in range(tries):
            r = int(rng.integers(3, r_max + 1))
            cy = int(rng.integers(r, h - r))
            cx = int(rng.integers(r, w - r))
            mask = _shape_mask(class_shape(k), h, w, cy, cx, r)
            if not (mask & occupied).any():
                image[mask] = class_color(k, num_classes)
                labels[mask] = k
                occupied |= mask
                break
        else:
            if idx == 0:  # pragma: no cover - canvas is empty on the first try
                raise RuntimeError("could not place the primary instance")
            # extras are best-effort; skip if the canvas is too crowded

    image.setflags(write=False)
    labels.setflags(write=False)
    return SegSample(id=sample_id, image=image, labels=labels)


def generate(
    seed: int,
    n_train: int,
    n_val: int,
    num_classes: int,
    height: int = 32,
    width: int = 32,
) -> tuple[tuple[SegSample, ...], tuple[SegSample, ...]]:
    """Generate (train, validation) pools of labeled shape images.

    Requires num_classes >= 2, height/width >= 16, and pool sizes >= the
    class count so round-robin coverage can hold.
    """
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if num_classes > MAX_CLASSES:
        raise ValueError(
            f"{num_classes} classes exceed the {MAX_CLASSES} distinguishable (shape, color) pairs"
        )
    if height < 16 or width < 16:
        raise ValueError("image extents must be at least 16")
    if n_train < num_classes or n_val < num_classes:
        raise ValueError("pool sizes must be at least the class count for full coverage")

    train_rng = np.random.default_rng([seed, 0])
    val_rng = np.random.default_rng([seed, 1])
    train = tuple(
        _render_sample(i, train_rng, num_classes, height, width) for i in range(n_train)
    )
    val = tuple(_render_sample(i, val_rng, num_classes, height, width) for i in range(n_val))
    return train, val


def build_step(pool: Sequence[SegSample], plan: ScenarioPlan, t: int) -> StepDataset:
    """Select and relabel the training images for step t under the plan's setting.

    Overlapped keeps every image with at least one pixel of a current class;
    disjoint additionally drops images containing pixels of future classes.
    Labels outside C_t (background, old, leaked future) become the unknown id.
    """
    current = set(plan.classes_at(t))
    future = set(plan.future_classes(t))

    kept: list[SegSample] = []
    for sample in pool:
        present = set(int(c) for c in np.unique(sample.labels)) - {BACKGROUND_ID}
        if not (present & current):
            continue
        if plan.setting == "disjoint" and (present & future):
            continue
        labels = np.where(np.isin(sample.labels, sorted(current)), sample.labels, UNKNOWN_ID)
        labels.setflags(write=False)
        kept.append(SegSample(id=sample.id, image=sample.image, labels=labels))

    if not kept:
        raise ValueError(f"step {t} under the {plan.setting} setting selects no images")
    return StepDataset(step=t, samples=tuple(kept), classes=plan.classes_at(t))


# ---------------------------------------------------------------------------
# on-disk export


def _write_ppm(path: Path, image: np.ndarray) -> None:
    h, w, _ = image.shape
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _write_pgm(path: Path, labels: np.ndarray) -> None:
    h, w = labels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(labels.astype(np.uint8).tobytes())


def export_pool(directory: str | Path, pool: Iterable[SegSample]) -> Path:
    """Write a pool as PPM/PGM pairs plus a JSON manifest; returns the directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = []
    for sample in pool:
        stem = f"sample_{sample.id:05d}"
        _write_ppm(directory / f"{stem}.ppm", sample.image)
        _write_pgm(directory / f"{stem}.pgm", sample.labels)
        manifest.append({"id": sample.id, "histogram": sample.class_histogram()})
    with open(directory / "manifest.json", "w", encoding="ascii") as fh:
        json.dump({"samples": manifest}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return directory
