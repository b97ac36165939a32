"""Datasets, deterministic episode sampling, and the synthetic benchmark.

Episodes are addressed, not streamed: `sample_episode(dataset, spec, i)`
is a pure function of (dataset, spec.seed, i), so any episode can be
regenerated in isolation and two processes always agree on episode i.
Support and query sets are disjoint by construction and labels are
episode-relative (0..n_way-1), class-major.

The synthetic benchmark has one source domain (20 classes of colored,
textured shape composites) and four target domains at graded shift. The
target domains share one set of base classes and images; each applies a
cumulative corruption (near: recolor, mid: + frame displacement, far:
+ interference field and grayscale, farthest: + inversion and contrast
collapse), so a fixed pixel-space nearest-centroid baseline degrades
strictly from near to farthest.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as _rng
from .errors import CapacityError, ContractError, DimensionError

DOMAINS = ("source", "near", "mid", "far", "farthest")
TARGET_DOMAINS = DOMAINS[1:]

IMAGE_SIZE = 32
_SOURCE_CLASSES = 20
_TARGET_CLASSES = 10
_IMAGES_PER_CLASS = 80


@dataclass
class Dataset:
    name: str
    images: np.ndarray  # [n, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [n] int64
    class_names: list
    domain_tags: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DimensionError(f"dataset images must be [n, C, H, W], got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DimensionError("dataset labels do not align with images")
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        self._class_index = [np.flatnonzero(self.labels == c) for c in range(len(self.class_names))]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def class_indices(self, c: int) -> np.ndarray:
        return self._class_index[c]

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.name.encode())
        h.update(str(self.images.shape).encode())
        h.update(self.images.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int = 5
    n_shot: int = 5
    n_query: int = 15
    seed: int = 0


@dataclass
class Episode:
    support_images: np.ndarray
    support_labels: np.ndarray
    query_images: np.ndarray
    query_labels: np.ndarray
    class_ids: np.ndarray
    index: int
    fingerprint: str


def sample_episode(dataset: Dataset, spec: EpisodeSpec, index: int) -> Episode:
    """Episode `index` of the stream named by (dataset, spec.seed)."""
    if spec.n_way > dataset.n_classes:
        raise CapacityError(
            f"{dataset.name}: {spec.n_way}-way episode needs {spec.n_way} classes, "
            f"dataset has {dataset.n_classes}"
        )
    gen = _rng.stream("episode", spec.seed, int(index))
    class_ids = np.sort(gen.choice(dataset.n_classes, size=spec.n_way, replace=False))
    need = spec.n_shot + spec.n_query
    sup_parts, qry_parts = [], []
    for c in class_ids:
        pool = dataset.class_indices(int(c))
        if pool.shape[0] < need:
            raise CapacityError(
                f"{dataset.name}: class {dataset.class_names[int(c)]} has {pool.shape[0]} "
                f"images, episode needs {need}"
            )
        picked = gen.choice(pool, size=need, replace=False)
        sup_parts.append(picked[: spec.n_shot])
        qry_parts.append(picked[spec.n_shot :])
    sup_idx = np.concatenate(sup_parts)
    qry_idx = np.concatenate(qry_parts)
    h = hashlib.sha256()
    h.update(dataset.fingerprint.encode())
    h.update(f"{spec.n_way},{spec.n_shot},{spec.n_query},{spec.seed},{index}".encode())
    h.update(class_ids.astype(np.int64).tobytes())
    h.update(sup_idx.astype(np.int64).tobytes())
    h.update(qry_idx.astype(np.int64).tobytes())
    return Episode(
        support_images=dataset.images[sup_idx],
        support_labels=np.repeat(np.arange(spec.n_way, dtype=np.int64), spec.n_shot),
        query_images=dataset.images[qry_idx],
        query_labels=np.repeat(np.arange(spec.n_way, dtype=np.int64), spec.n_query),
        class_ids=class_ids,
        index=int(index),
        fingerprint=h.hexdigest()[:16],
    )


# -- image geometry -----------------------------------------------------------


def _bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize the trailing two axes of [..., h, w] with bilinear sampling."""

    def grid(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1.0)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (pos - lo).astype(np.float32)

    ylo, yhi, yf = grid(img.shape[-2], out_h)
    xlo, xhi, xf = grid(img.shape[-1], out_w)
    top_rows = np.take(img, ylo, axis=-2)
    bot_rows = np.take(img, yhi, axis=-2)
    top = np.take(top_rows, xlo, axis=-1) * (1.0 - xf) + np.take(top_rows, xhi, axis=-1) * xf
    bot = np.take(bot_rows, xlo, axis=-1) * (1.0 - xf) + np.take(bot_rows, xhi, axis=-1) * xf
    return (top * (1.0 - yf[:, None]) + bot * yf[:, None]).astype(np.float32)


def center_crop_resize(img: np.ndarray, size: int) -> np.ndarray:
    """Crop the largest centered square of [C, H, W], then resize to size x size.

    A square input already at the target size passes through bit-identical.
    """
    if img.ndim != 3:
        raise DimensionError(f"center_crop_resize expects [C, H, W], got {img.shape}")
    c, h, w = img.shape
    if h == w == size:
        return np.asarray(img, dtype=np.float32)
    side = min(h, w)
    top = (h - side) // 2
    left = (w - side) // 2
    crop = img[:, top : top + side, left : left + side]
    if side == size:
        return np.ascontiguousarray(crop, dtype=np.float32)
    return np.ascontiguousarray(_bilinear_resize(np.asarray(crop, np.float32), size, size))


# -- NetPBM (P6) image files ---------------------------------------------------


def save_ppm(path, img: np.ndarray) -> None:
    """Write a [3, H, W] float image in [0, 1] as binary PPM (P6, maxval 255)."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise DimensionError(f"save_ppm expects [3, H, W], got {img.shape}")
    data = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape[1], data.shape[2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.transpose(1, 2, 0).tobytes())


def load_ppm(path) -> np.ndarray:
    """Read a binary PPM (P6) into [3, H, W] float32 in [0, 1]."""
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(b"P6"):
        raise ValueError(f"{path}: not a P6 PPM file")
    # header tokens: magic, width, height, maxval; '#' starts a comment
    tokens = []
    pos = 2
    while len(tokens) < 3 and pos < len(raw):
        ch = raw[pos : pos + 1]
        if ch == b"#":
            pos = raw.index(b"\n", pos) + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(raw) and not raw[end : end + 1].isspace():
                end += 1
            tokens.append(raw[pos:end])
            pos = end
    if len(tokens) < 3:
        raise ValueError(f"{path}: truncated PPM header")
    w, h, maxval = (int(t) for t in tokens)
    if maxval <= 0 or maxval > 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    pixels = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    if pixels.size != w * h * 3:
        raise ValueError(f"{path}: pixel data truncated")
    img = pixels.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / float(maxval)
    return img


def export_image_folder(dataset: Dataset, root) -> int:
    """Write dataset as root/<class_name>/img_NNNN.ppm. Returns file count."""
    root = Path(root)
    count = 0
    for c, cname in enumerate(dataset.class_names):
        cdir = root / cname
        cdir.mkdir(parents=True, exist_ok=True)
        for j, idx in enumerate(dataset.class_indices(c)):
            save_ppm(cdir / f"img_{j:04d}.ppm", dataset.images[idx])
            count += 1
    return count


def load_image_folder(root, size: int = IMAGE_SIZE, name: str | None = None) -> Dataset:
    """Read root/<class>/*.ppm into a Dataset; classes sorted by folder name."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise ValueError(f"dataset root {root} has no class directories")
    images, labels, class_names = [], [], []
    for c, cdir in enumerate(class_dirs):
        files = sorted(cdir.glob("*.ppm"))
        if not files:
            raise CapacityError(f"class directory {cdir} has no .ppm files")
        class_names.append(cdir.name)
        for fp in files:
            images.append(center_crop_resize(load_ppm(fp), size))
            labels.append(c)
    return Dataset(
        name=name or root.name,
        images=np.stack(images),
        labels=np.asarray(labels, dtype=np.int64),
        class_names=class_names,
        domain_tags=frozenset({"folder"}),
    )


# -- synthetic benchmark --------------------------------------------------------


def _coord_grids():
    yy, xx = np.meshgrid(np.arange(IMAGE_SIZE, dtype=np.float32),
                         np.arange(IMAGE_SIZE, dtype=np.float32), indexing="ij")
    return yy, xx


_SHAPES = ("disc", "ring", "square", "frame", "diamond", "cross")


def _shape_mask(kind: str, cy: float, cx: float, s: float) -> np.ndarray:
    yy, xx = _coord_grids()
    dy, dx = yy - cy, xx - cx
    if kind == "disc":
        return (dy * dy + dx * dx) <= s * s
    if kind == "ring":
        r = np.sqrt(dy * dy + dx * dx)
        return np.abs(r - 0.78 * s) <= 0.3 * s
    if kind == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) <= 0.82 * s
    if kind == "frame":
        m = np.maximum(np.abs(dy), np.abs(dx))
        return (m <= 0.9 * s) & (m >= 0.5 * s)
    if kind == "diamond":
        return (np.abs(dy) + np.abs(dx)) <= 1.15 * s
    if kind == "cross":
        return ((np.abs(dx) <= 0.34 * s) & (np.abs(dy) <= 1.1 * s)) | (
            (np.abs(dy) <= 0.34 * s) & (np.abs(dx) <= 1.1 * s)
        )
    raise ContractError(f"unknown shape kind {kind!r}")


def _class_params(gen: np.random.Generator) -> dict:
    return {
        "kind": _SHAPES[int(gen.integers(len(_SHAPES)))],
        "size": float(gen.uniform(8.0, 12.0)),
        "fg": gen.uniform(0.55, 1.0, size=3).astype(np.float32),
        "fg_lum": float(gen.uniform(0.6, 1.0)),
        "bg": gen.uniform(0.05, 0.3, size=3).astype(np.float32),
        "tex_freq": float(gen.uniform(2.0, 7.0)),
        "tex_axis": int(gen.integers(2)),
        "tex_amp": float(gen.uniform(0.06, 0.16)),
    }


def _render_base(params: dict, gen: np.random.Generator) -> np.ndarray:
    yy, xx = _coord_grids()
    cy = 15.5 + float(gen.uniform(-3.5, 3.5))
    cx = 15.5 + float(gen.uniform(-3.5, 3.5))
    s = params["size"] + float(gen.uniform(-1.2, 1.2))
    phase = float(gen.uniform(0.0, 2.0 * np.pi))
    coord = yy if params["tex_axis"] == 0 else xx
    tex = params["tex_amp"] * np.cos(2.0 * np.pi * params["tex_freq"] * coord / IMAGE_SIZE + phase)
    bg_scale = float(gen.uniform(0.85, 1.15))
    fg_scale = params["fg_lum"] * float(gen.uniform(0.85, 1.15))
    img = params["bg"][:, None, None] * bg_scale + tex[None, :, :]
    mask = _shape_mask(params["kind"], cy, cx, s)
    img = np.where(mask[None, :, :], params["fg"][:, None, None] * fg_scale, img)
    img = img + gen.normal(0.0, 0.03, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


_RECOLOR = np.array(
    [[0.55, 0.45, 0.0], [0.0, 0.55, 0.45], [0.45, 0.0, 0.55]], dtype=np.float32
)
_GRAY = np.array([0.299, 0.587, 0.114], dtype=np.float32)


def _texture_field(seed: int):
    """Fixed texture-scrambling interference for the mid/far/farthest chain.

    One gating field and tint color per dataset seed, shared by every image
    in the domain: the shift is systematic, so adaptation on a support set
    can actually learn it, rather than pure per-image noise.
    """
    gen = _rng.stream("dataset", seed, "mid-field")
    yy, xx = _coord_grids()
    fy = float(gen.uniform(2.0, 6.0))
    fx = float(gen.uniform(2.0, 6.0))
    phase = float(gen.uniform(0.0, 2.0 * np.pi))
    field = 0.5 + 0.5 * np.cos(2.0 * np.pi * (fy * yy + fx * xx) / IMAGE_SIZE + phase)
    tint = gen.uniform(0.25, 0.75, size=3).astype(np.float32)
    return field.astype(np.float32), tint


def _corrupt(img: np.ndarray, domain: str, effects, gen: np.random.Generator) -> np.ndarray:
    """Apply the cumulative corruption chain up to `domain`."""
    out = img
    if domain in ("near", "mid", "far", "farthest"):
        out = np.einsum("cd,dhw->chw", _RECOLOR, out)
        out = out + gen.normal(0.0, 0.03, size=out.shape)
    if domain in ("mid", "far", "farthest"):
        # displace the frame well past the renderer's own +-3.5 px jitter,
        # wrapping at the borders so pixel statistics stay intact
        dy = int(gen.integers(6, 13)) * (1 if gen.random() < 0.5 else -1)
        dx = int(gen.integers(6, 13)) * (1 if gen.random() < 0.5 else -1)
        out = np.roll(out, (dy, dx), axis=(1, 2))
        # tint-colored occluding bars: the occluder family (color, geometry)
        # is a fixed domain property, the placement is per image
        _, tint = effects
        h, w = out.shape[1:]
        for _ in range(2):
            x0 = int(gen.integers(0, w - 3))
            out[:, :, x0 : x0 + 3] = tint[:, None, None]
            y0 = int(gen.integers(0, h - 3))
            out[:, y0 : y0 + 3, :] = tint[:, None, None]
        out = out + gen.normal(0.0, 0.035, size=out.shape)
    if domain in ("far", "farthest"):
        field, tint = effects
        gate = 0.65 * field[None, :, :]
        out = out * (1.0 - gate) + tint[:, None, None] * gate
        lum = np.einsum("c,chw->hw", _GRAY, np.clip(out, 0.0, 1.0))
        out = np.repeat(lum[None, :, :], 3, axis=0)
    if domain == "farthest":
        out = 1.0 - out
        out = 0.5 + (out - 0.5) * 0.4
        out = out + gen.normal(0.0, 0.1, size=out.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def synthetic_domain(domain: str, seed: int) -> Dataset:
    """One domain of the synthetic benchmark, fully determined by (domain, seed)."""
    if domain not in DOMAINS:
        raise ContractError(f"unknown domain {domain!r}, expected one of {DOMAINS}")
    if domain == "source":
        n_classes, class_key = _SOURCE_CLASSES, "source-classes"
    else:
        # all targets share base classes and base images; only the corruption differs
        n_classes, class_key = _TARGET_CLASSES, "target-classes"
    effects = None if domain == "source" else _texture_field(seed)
    images, labels, class_names = [], [], []
    for c in range(n_classes):
        params = _class_params(_rng.stream("dataset", seed, class_key, c))
        class_names.append(f"{domain}_c{c:02d}")
        for i in range(_IMAGES_PER_CLASS):
            base = _render_base(params, _rng.stream("dataset", seed, class_key, "img", c, i))
            if domain == "source":
                img = base
            else:
                img = _corrupt(base, domain, effects, _rng.stream("dataset", seed, domain, "corrupt", c, i))
            images.append(img)
            labels.append(c)
    tags = {"synthetic"}
    if domain in ("source", "near", "mid"):
        tags.add("color")
    if domain in ("far", "farthest"):
        # the fixed interference field breaks left/right symmetry
        tags.add("oriented")
    return Dataset(
        name=f"synthetic-{domain}",
        images=np.stack(images),
        labels=np.asarray(labels, dtype=np.int64),
        class_names=class_names,
        domain_tags=frozenset(tags),
    )


def generate_synthetic_domains(base_seed: int) -> list:
    """All five benchmark domains for one seed, source first."""
    return [synthetic_domain(d, base_seed) for d in DOMAINS]


def two_class_task(seed: int) -> Dataset:
    """A 2-way task that is linearly separable in raw pixel space."""
    images, labels = [], []
    for c in range(2):
        base = np.array([0.75, 0.3, 0.25] if c == 0 else [0.25, 0.3, 0.75], dtype=np.float32)
        for i in range(_IMAGES_PER_CLASS):
            gen = _rng.stream("dataset", seed, "twoclass", c, i)
            img = np.broadcast_to(base[:, None, None], (3, IMAGE_SIZE, IMAGE_SIZE)).copy()
            img = img + gen.normal(0.0, 0.08, size=img.shape)
            images.append(np.clip(img, 0.0, 1.0).astype(np.float32))
            labels.append(c)
    return Dataset(
        name="synthetic-twoclass",
        images=np.stack(images),
        labels=np.asarray(labels, dtype=np.int64),
        class_names=["twoclass_c00", "twoclass_c01"],
        domain_tags=frozenset({"synthetic", "color", "sanity"}),
    )


def nearest_centroid_accuracy(dataset: Dataset, spec: EpisodeSpec, n_episodes: int) -> float:
    """Raw-pixel nearest-centroid accuracy over seeded episodes.

    This is the fixed reference baseline that the target domains are
    engineered to degrade monotonically.
    """
    correct = total = 0
    for i in range(n_episodes):
        ep = sample_episode(dataset, spec, i)
        sup = ep.support_images.reshape(spec.n_way, spec.n_shot, -1)
        centroids = sup.mean(axis=1)
        qry = ep.query_images.reshape(ep.query_images.shape[0], -1)
        d2 = ((qry[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        pred = d2.argmin(axis=1)
        correct += int((pred == ep.query_labels).sum())
        total += ep.query_labels.shape[0]
    return correct / total
