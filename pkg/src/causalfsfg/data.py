"""Datasets, class splits, episodic sampling and augmentation.

Images are stored channel-first as float32 arrays in [0, 1].  All randomness
goes through ``numpy.random.Generator`` objects owned by the caller.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F


class ConfigurationError(ValueError):
    pass


class SamplingError(ValueError):
    pass


# standard benchmark class splits: (total, train, val, test).
BENCHMARK_SPLITS = {
    "cub": (200, 130, 20, 50),
    "cars": (196, 130, 17, 49),
    "dogs": (120, 70, 20, 30),
}


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray  # (n, C, H, W) float32
    labels: np.ndarray  # (n,) int64
    name: str = "dataset"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ConfigurationError(f"images must be (n, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ConfigurationError("images and labels differ in length")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @cached_property
    def class_index(self) -> dict[int, np.ndarray]:
        order = np.argsort(self.labels, kind="stable")
        classes, starts = np.unique(self.labels[order], return_index=True)
        groups = np.split(order, starts[1:])
        return {int(c): g for c, g in zip(classes, groups)}

    @property
    def classes(self) -> list[int]:
        return sorted(self.class_index)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()

    def check_episode_capacity(self, k_max: int, u_max: int) -> None:
        for c, idx in self.class_index.items():
            if len(idx) < k_max + u_max:
                raise SamplingError(
                    f"class {c} has {len(idx)} samples, episodes need {k_max + u_max}"
                )

    def subset(self, classes) -> "Dataset":
        keep = np.isin(self.labels, sorted(classes))
        return Dataset(self.images[keep], self.labels[keep], self.name, dict(self.meta))


@dataclass(frozen=True)
class ClassSplit:
    train: frozenset
    val: frozenset
    test: frozenset

    def __post_init__(self):
        if self.train & self.val or self.train & self.test or self.val & self.test:
            raise ConfigurationError("class splits overlap")

    def __getitem__(self, name: str) -> frozenset:
        return {"train": self.train, "val": self.val, "test": self.test}[name]


@dataclass(frozen=True, eq=False)
class Episode:
    """One N-way K-shot task.  Support and query are ordered slot-major."""

    support: torch.Tensor  # (N*K, C, H, W)
    support_labels: torch.Tensor  # (N*K,) class slots
    query: torch.Tensor  # (N*U, C, H, W)
    query_labels: torch.Tensor  # (N*U,)
    origin_classes: tuple[int, ...]
    support_indices: np.ndarray  # dataset indices, (N*K,)
    query_indices: np.ndarray  # (N*U,)
    n_way: int
    k_shot: int
    n_query: int

    def indices(self) -> np.ndarray:
        return np.concatenate([self.support_indices, self.query_indices])


def split_classes(all_class_ids, counts, seed: int) -> ClassSplit:
    """Randomly partition class ids into disjoint train/val/test sets."""
    ids = sorted(int(c) for c in all_class_ids)
    n_train, n_val, n_test = (int(c) for c in counts)
    if min(n_train, n_val, n_test) < 0:
        raise ConfigurationError(f"negative split counts {counts}")
    if n_train + n_val + n_test > len(ids):
        raise ConfigurationError(
            f"split {counts} needs {n_train + n_val + n_test} classes, only {len(ids)} available"
        )
    perm = np.random.default_rng(seed).permutation(len(ids))
    chosen = [ids[i] for i in perm]
    return ClassSplit(
        train=frozenset(chosen[:n_train]),
        val=frozenset(chosen[n_train:n_train + n_val]),
        test=frozenset(chosen[n_train + n_val:n_train + n_val + n_test]),
    )


def sample_episode_indices(dataset: Dataset, classes, n_way: int, k_shot: int, n_query: int,
                           rng: np.random.Generator):
    """Two-stage draw: N classes, then K+U samples per class, all without replacement.

    Returns (origin_classes, support_idx, query_idx).
    """
    pool = sorted(int(c) for c in classes)
    if n_way < 1 or k_shot < 1 or n_query < 0:
        raise SamplingError(f"bad episode shape N={n_way} K={k_shot} U={n_query}")
    if n_way > len(pool):
        raise SamplingError(f"{n_way}-way episode from only {len(pool)} classes")
    picked = rng.choice(len(pool), size=n_way, replace=False)
    origin = tuple(pool[i] for i in picked)
    support, query = [], []
    for c in origin:
        members = dataset.class_index.get(c)
        if members is None or len(members) < k_shot + n_query:
            have = 0 if members is None else len(members)
            raise SamplingError(f"class {c} has {have} samples, need {k_shot + n_query}")
        draw = members[rng.choice(len(members), size=k_shot + n_query, replace=False)]
        support.append(draw[:k_shot])
        query.append(draw[k_shot:])
    return origin, np.concatenate(support), np.concatenate(query)


def sample_episode(dataset: Dataset, classes, n_way: int, k_shot: int, n_query: int,
                   rng: np.random.Generator, augment_mode: str | None = None,
                   augment_config: "AugmentConfig | None" = None,
                   dtype=torch.float32) -> Episode:
    origin, s_idx, q_idx = sample_episode_indices(dataset, classes, n_way, k_shot, n_query, rng)
    s_img = dataset.images[s_idx]
    q_img = dataset.images[q_idx]
    if augment_mode is not None:
        cfg = augment_config or AugmentConfig()
        s_img = np.stack([augment(im, augment_mode, rng, cfg) for im in s_img])
        q_img = np.stack([augment(im, augment_mode, rng, cfg) for im in q_img])
    slots = torch.arange(n_way)
    return Episode(
        support=torch.as_tensor(s_img, dtype=dtype),
        support_labels=slots.repeat_interleave(k_shot),
        query=torch.as_tensor(q_img, dtype=dtype),
        query_labels=slots.repeat_interleave(n_query),
        origin_classes=origin,
        support_indices=s_idx,
        query_indices=q_idx,
        n_way=n_way,
        k_shot=k_shot,
        n_query=n_query,
    )


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    crop_scale: tuple[float, float] = (0.6, 1.0)
    flip_prob: float = 0.5
    jitter: float = 0.4  # brightness/contrast/saturation factors in [1 - j, 1 + j]
    test_crop: float = 7 / 8


def _resize(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if img.shape[1:] == tuple(size):
        return img
    t = torch.from_numpy(np.ascontiguousarray(img))[None]
    return F.interpolate(t, size=size, mode="bilinear", align_corners=False)[0].numpy()


def _gray(img: np.ndarray) -> np.ndarray:
    if img.shape[0] != 3:
        return img.mean(axis=0, keepdims=True)
    w = np.array([0.299, 0.587, 0.114], dtype=img.dtype)[:, None, None]
    return (img * w).sum(axis=0, keepdims=True)


def augment(image: np.ndarray, mode: str, rng: np.random.Generator,
            config: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Train: random resized crop, horizontal flip, color jitter.  Test: center crop."""
    c, h, w = image.shape
    if mode == "test":
        ch, cw = max(1, round(h * config.test_crop)), max(1, round(w * config.test_crop))
        top, left = (h - ch) // 2, (w - cw) // 2
        out = _resize(image[:, top:top + ch, left:left + cw], (h, w))
        return np.clip(out, 0.0, 1.0).astype(image.dtype, copy=False)
    if mode != "train":
        raise ValueError(f"unknown augmentation mode {mode!r}")

    lo, hi = config.crop_scale
    side = math.sqrt(rng.uniform(lo, hi))
    ch, cw = max(1, round(h * side)), max(1, round(w * side))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    out = _resize(image[:, top:top + ch, left:left + cw], (h, w))
    if rng.random() < config.flip_prob:
        out = out[:, :, ::-1]
    if config.jitter > 0:
        j = config.jitter
        b, k, s = rng.uniform(1 - j, 1 + j, size=3)
        out = out * b
        out = (out - _gray(out).mean()) * k + _gray(out).mean()
        g = _gray(out)
        out = g + (out - g) * s
    return np.ascontiguousarray(np.clip(out, 0.0, 1.0), dtype=image.dtype)


# ---------------------------------------------------------------------------
# synthetic fine-grained data


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 32
    samples_per_class: int = 30
    image_size: int = 32
    seed: int = 0
    # shared coarse structure
    body_color: tuple[float, float, float] = (0.55, 0.45, 0.3)
    # fine class signal
    texture_amplitude: float = 0.16
    freq_range: tuple[float, float] = (2.0, 5.0)  # stripe cycles across the body width
    mark_amplitude: float = 0.18
    # per-sample nuisance
    pose_jitter: float = 0.12
    scale_range: tuple[float, float] = (0.8, 1.15)
    background_range: tuple[float, float] = (0.05, 0.95)
    color_noise: float = 0.12
    pixel_noise: float = 0.04


def _class_params(spec: SyntheticSpec, rng: np.random.Generator) -> list[dict]:
    params = []
    for _ in range(spec.n_classes):
        params.append({
            "theta": rng.uniform(0, np.pi),
            "freq": rng.uniform(*spec.freq_range),
            "mark_pos": rng.uniform(-0.5, 0.5, size=2),
            "mark_color": rng.normal(0.0, 1.0, size=3),
            "tint": rng.normal(0.0, 0.03, size=3),
        })
    return params


def _render(spec: SyntheticSpec, cls: dict, rng: np.random.Generator) -> np.ndarray:
    s = spec.image_size
    yy, xx = np.meshgrid(np.arange(s) + 0.5, np.arange(s) + 0.5, indexing="ij")
    yy, xx = yy / s - 0.5, xx / s - 0.5

    bg_a, bg_b = rng.uniform(*spec.background_range, size=(2, 3))
    ramp_dir = rng.uniform(0, 2 * np.pi)
    ramp = 0.5 + (np.cos(ramp_dir) * xx + np.sin(ramp_dir) * yy)
    img = bg_a[:, None, None] * (1 - ramp) + bg_b[:, None, None] * ramp

    cy, cx = rng.uniform(-spec.pose_jitter, spec.pose_jitter, size=2)
    scale = rng.uniform(*spec.scale_range)
    rot = rng.uniform(-0.35, 0.35)
    ry, rx = 0.24 * scale, 0.34 * scale
    dy, dx = yy - cy, xx - cx
    u = np.cos(rot) * dx + np.sin(rot) * dy  # body frame
    v = -np.sin(rot) * dx + np.cos(rot) * dy
    body = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0

    color = np.asarray(spec.body_color) + cls["tint"] + rng.normal(0, spec.color_noise, size=3)
    theta = cls["theta"] + rng.normal(0, 0.08)
    freq = cls["freq"] * rng.uniform(0.95, 1.05)
    phase = rng.uniform(0, 2 * np.pi)
    stripes = np.sin(2 * np.pi * freq * (np.cos(theta) * u + np.sin(theta) * v) / (2 * rx) + phase)
    texture = color[:, None, None] * (1 + spec.texture_amplitude * 2 * stripes)

    mu, mv = cls["mark_pos"] * np.array([rx, ry])
    mark = np.exp(-((u - mu) ** 2 + (v - mv) ** 2) / (2 * (0.06 * scale) ** 2))
    texture = texture + spec.mark_amplitude * cls["mark_color"][:, None, None] * mark

    img = np.where(body[None], texture, img)
    img = img + rng.normal(0, spec.pixel_noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_synthetic_dataset(spec: SyntheticSpec) -> Dataset:
    """Procedural fine-grained dataset.

    Every class is the same textured ellipse ("superclass") on a random
    background; classes differ only in stripe orientation/frequency, a faint
    tint and a small colored mark.  Pose, scale, background and color noise
    vary per sample and dominate the class signal in pixel space.
    """
    if spec.n_classes < 2:
        raise ConfigurationError("need at least 2 classes")
    if spec.image_size < 16:
        raise ConfigurationError("image_size must be >= 16")
    if spec.samples_per_class < 1:
        raise ConfigurationError("samples_per_class must be >= 1")
    rng = np.random.default_rng(spec.seed)
    classes = _class_params(spec, rng)
    images = np.empty((spec.n_classes * spec.samples_per_class, 3, spec.image_size, spec.image_size),
                      dtype=np.float32)
    labels = np.repeat(np.arange(spec.n_classes, dtype=np.int64), spec.samples_per_class)
    for i, c in enumerate(labels):
        images[i] = _render(spec, classes[c], rng)
    return Dataset(images, labels, name="synthetic", meta={"generator": asdict(spec)})


def load_image_folder(root, image_size: int, name: str | None = None) -> Dataset:
    """Directory-per-class layout; class ids follow sorted directory names."""
    from PIL import Image

    root = Path(root)
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise ConfigurationError(f"no class directories under {root}")
    images, labels = [], []
    for cid, d in enumerate(class_dirs):
        for f in sorted(d.iterdir()):
            if not f.is_file():
                continue
            with Image.open(f) as im:
                im = im.convert("RGB").resize((image_size, image_size), Image.BILINEAR)
                images.append(np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 255.0)
            labels.append(cid)
    return Dataset(np.stack(images), np.asarray(labels, dtype=np.int64), name=name or root.name,
                   meta={"class_names": [d.name for d in class_dirs], "root": str(root)})


def write_manifest(dataset: Dataset, path) -> dict:
    manifest = {
        "name": dataset.name,
        "image_shape": list(dataset.image_shape),
        "n_samples": len(dataset),
        "classes": dataset.classes,
        "samples_per_class": {str(c): int(len(i)) for c, i in dataset.class_index.items()},
        "meta": dataset.meta,
        "sha256": dataset.content_hash(),
    }
    Path(path).write_text(json.dumps(manifest, indent=2, default=_jsonable))
    return manifest


def _jsonable(o):
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    if isinstance(o, (np.ndarray, tuple)):
        return list(o)
    raise TypeError(f"not serializable: {type(o)}")
