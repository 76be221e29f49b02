"""Source data generation, CIFAR-10 binary ingestion, corruptions, streams."""

import os
from dataclasses import dataclass

import numpy as np

CORRUPTION_KINDS = (
    "gaussian_noise", "shot_noise", "impulse_noise", "defocus_blur",
    "brightness", "contrast", "pixelate", "saturate",
)

# default continual-stream ordering (noise -> blur -> photometric -> digital)
DEFAULT_ORDER = CORRUPTION_KINDS

_SEVERITY = {
    "gaussian_noise": (0.04, 0.06, 0.08, 0.09, 0.10),   # additive sigma
    "shot_noise": (60, 25, 12, 5, 3),                   # photon count
    "impulse_noise": (0.01, 0.02, 0.03, 0.05, 0.07),    # salt/pepper fraction
    "defocus_blur": (0.5, 1.0, 1.5, 2.0, 2.5),          # gaussian kernel sigma
    "contrast": (0.75, 0.5, 0.4, 0.3, 0.15),            # scale about the mean
    "brightness": (0.05, 0.1, 0.15, 0.2, 0.3),          # additive offset
    "pixelate": (0.6, 0.5, 0.4, 0.3, 0.25),             # downscale factor
    "saturate": (0.1, 0.2, 0.3, 0.4, 0.5),              # overshoot past gray
}


@dataclass
class LabeledImage:
    pixels: np.ndarray  # [3,32,32] in [0,1]
    label: int


@dataclass
class CorruptionSpec:
    kind: str
    severity: int = 5
    seed: int = 0

    def validate(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption {self.kind!r}")
        if not 1 <= self.severity <= 5:
            raise ValueError(f"severity must be in [1,5], got {self.severity}")


@dataclass
class StreamPlan:
    domains: list                      # [(label, CorruptionSpec|None, count)]
    shuffle: str = "sequential"        # sequential | mixed
    batch_size: int = 16
    seed: int = 0


# ------------------------------------------------------------ source task

_SHAPES = ("disk", "square", "cross", "stripes", "checker")
# low / high hue band (r,g,b) templates per shape class
_HUES = ((0.85, 0.25, 0.2), (0.2, 0.45, 0.9))


def _shape_mask(shape, cy, cx, r, yy, xx):
    if shape == "disk":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2
    if shape == "square":
        return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    if shape == "cross":
        band = max(1.0, r / 2.5)
        return (((np.abs(yy - cy) <= band) & (np.abs(xx - cx) <= r))
                | ((np.abs(xx - cx) <= band) & (np.abs(yy - cy) <= r)))
    if shape == "stripes":
        inside = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
        return inside & ((np.floor((xx - cx) / max(2.0, r / 2)) % 2) == 0)
    # checker
    inside = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    cell = max(2.0, r / 2)
    return inside & (((np.floor((xx - cx) / cell) + np.floor((yy - cy) / cell)) % 2) == 0)


def generate_source(n, num_classes=10, seed=0, size=32):
    """Procedural RGB images: class = (shape, hue band), class-balanced."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if num_classes > len(_SHAPES) * len(_HUES):
        raise ValueError(f"at most {len(_SHAPES) * len(_HUES)} classes supported")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = []
    for i in range(n):
        label = i % num_classes
        shape = _SHAPES[label % len(_SHAPES)]
        hue = np.array(_HUES[label // len(_SHAPES)])
        bg = rng.uniform(0.35, 0.55)
        img = np.full((3, size, size), bg)
        img += rng.normal(0.0, 0.03, size=(3, size, size))
        cy = rng.uniform(10, size - 10)
        cx = rng.uniform(10, size - 10)
        r = rng.uniform(5.0, 9.0)
        mask = _shape_mask(shape, cy, cx, r, yy, xx)
        strength = rng.uniform(0.75, 1.0)
        img[:, mask] = (bg + strength * (hue[:, None] - bg))
        img += rng.normal(0.0, 0.01, size=(3, size, size))
        out.append(LabeledImage(np.clip(img, 0.0, 1.0), label))
    return out


# -------------------------------------------------------- CIFAR-10 binary

RECORD_BYTES = 3073  # 1 label byte + 3*1024 pixels


def load_cifar10(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) % RECORD_BYTES:
        raise ValueError(f"{path}: length {len(blob)} is not a multiple of {RECORD_BYTES}")
    images = []
    for off in range(0, len(blob), RECORD_BYTES):
        label = blob[off]
        if label > 9:
            raise ValueError(f"{path}: invalid label byte {label} at offset {off}")
        pix = np.frombuffer(blob, dtype=np.uint8,
                            count=3072, offset=off + 1).reshape(3, 32, 32)
        images.append(LabeledImage(pix.astype(np.float64) / 255.0, int(label)))
    return images


def save_cifar10(images, path):
    with open(path, "wb") as fh:
        for img in images:
            fh.write(bytes([img.label]))
            fh.write(np.round(img.pixels * 255.0).astype(np.uint8).tobytes())


# ------------------------------------------------------------- corruptions

def _gaussian_kernel1d(sigma):
    radius = max(1, int(np.ceil(3 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _blur(img, sigma):
    k = _gaussian_kernel1d(sigma)
    r = len(k) // 2
    padded = np.pad(img, ((0, 0), (r, r), (0, 0)), mode="edge")
    tmp = np.zeros_like(img)
    for i, w in enumerate(k):
        tmp += w * padded[:, i:i + img.shape[1], :]
    padded = np.pad(tmp, ((0, 0), (0, 0), (r, r)), mode="edge")
    out = np.zeros_like(img)
    for i, w in enumerate(k):
        out += w * padded[:, :, i:i + img.shape[2]]
    return out


def corrupt(img, spec):
    """Severity-indexed pixel transform; label is never touched."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    x = img.pixels
    level = _SEVERITY[spec.kind][spec.severity - 1]
    if spec.kind == "gaussian_noise":
        x = x + rng.normal(0.0, level, size=x.shape)
    elif spec.kind == "shot_noise":
        x = rng.poisson(np.clip(x, 0, 1) * level) / float(level)
    elif spec.kind == "impulse_noise":
        u = rng.random(x.shape)
        x = np.where(u < level / 2, 0.0, np.where(u > 1 - level / 2, 1.0, x))
    elif spec.kind == "defocus_blur":
        x = _blur(x, level)
    elif spec.kind == "contrast":
        mean = x.mean(axis=(1, 2), keepdims=True)
        x = (x - mean) * level + mean
    elif spec.kind == "brightness":
        x = x + level
    elif spec.kind == "pixelate":
        size = x.shape[1]
        small = max(1, int(round(size * level)))
        # center-aligned nearest neighbor: a floor mapping would shift the
        # image at non-integer factors and break severity monotonicity
        srcidx = np.minimum(((np.arange(small) + 0.5) * size / small).astype(int),
                            size - 1)
        idx = np.minimum(((np.arange(size) + 0.5) * small / size).astype(int),
                         small - 1)
        shrunk = x[:, srcidx][:, :, srcidx]
        x = shrunk[:, idx][:, :, idx]
    elif spec.kind == "saturate":
        gray = x.mean(axis=0, keepdims=True)
        x = gray + (1.0 + level) * (x - gray)
    return LabeledImage(np.clip(x, 0.0, 1.0), img.label)


# ------------------------------------------------------------------ stream

def build_stream(plan, data, prep=None):
    """Yield (batch [N,3,32,32], labels [N], domain label) per the plan.

    data: clean LabeledImage pool sampled deterministically per domain.
    prep: optional (mean, std) channel standardization applied to batches.
    """
    if not plan.domains:
        raise ValueError("empty stream plan")
    rng = np.random.default_rng(plan.seed)
    batches = []
    for label, spec, count in plan.domains:
        idx = rng.choice(len(data), size=count, replace=count > len(data))
        imgs = []
        for j, i in enumerate(idx):
            img = data[int(i)]
            if spec is not None:
                dspec = CorruptionSpec(spec.kind, spec.severity,
                                       seed=spec.seed * 1_000_003 + j)
                img = corrupt(img, dspec)
            imgs.append(img)
        for start in range(0, count - plan.batch_size + 1, plan.batch_size):
            chunk = imgs[start:start + plan.batch_size]
            xb = np.stack([im.pixels for im in chunk])
            yb = np.array([im.label for im in chunk], dtype=np.int64)
            batches.append((xb, yb, label))
    if plan.shuffle == "mixed":
        order = rng.permutation(len(batches))
        batches = [batches[i] for i in order]
    elif plan.shuffle != "sequential":
        raise ValueError(f"unknown shuffle mode {plan.shuffle!r}")
    for xb, yb, label in batches:
        if prep is not None:
            mean, std = prep
            xb = (xb - mean[None, :, None, None]) / std[None, :, None, None]
        yield xb, yb, label


def images_labels(dataset):
    return (np.stack([img.pixels for img in dataset]),
            np.array([img.label for img in dataset], dtype=np.int64))
