"""Synthetic multi-domain segmentation data and its on-disk layout.

Each sample is a ``(image, mask)`` pair: ``image`` is ``[C, H, W]`` float32,
``mask`` is ``[1, H, W]`` float32 holding exactly 0 and 1.

Geometry and appearance draw from two separate child streams of the
caller's ``Rng``. Two domains generated from the same seed and shape family
therefore share their masks exactly while their images differ, which is how
the multi-modal (CT-like vs PET-like) surrogate keeps the segmentation
target fixed across nodes.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DatasetIOError, FormatError, GenerationError, UsageError
from .tensor import Rng, load_tensor, save_tensor

APPEARANCES = ("bright_fg", "blurred_hot_fg", "multichannel")
SHAPE_FAMILIES = ("ellipse_pair", "irregular_blob")

_DEFAULT_INTENSITIES = {
    "bright_fg": [[0.2, 0.8]],
    "blurred_hot_fg": [[0.1, 1.0]],
    "multichannel": [[0.35, 0.5], [0.3, 0.9], [0.6, 0.3]],
}
_DEFAULT_NOISE = {"bright_fg": 0.05, "blurred_hot_fg": 0.1, "multichannel": 0.05}
MAX_PLACEMENT_TRIES = 100


@dataclass
class DomainSpec:
    name: str
    appearance: str = "bright_fg"
    shape_family: str = "ellipse_pair"
    noise_std: float | None = None
    intensities: list | None = None  # per channel [background, foreground]
    image_size: int = 64
    blur_sigma: float = 1.5
    fg_fraction: list = field(default_factory=lambda: [0.01, 0.35])

    def __post_init__(self):
        if self.appearance not in APPEARANCES:
            raise ConfigError(f"unknown appearance {self.appearance!r}; expected one of {APPEARANCES}")
        if self.shape_family not in SHAPE_FAMILIES:
            raise ConfigError(
                f"unknown shape_family {self.shape_family!r}; expected one of {SHAPE_FAMILIES}")
        if self.noise_std is None:
            self.noise_std = _DEFAULT_NOISE[self.appearance]
        if self.intensities is None:
            self.intensities = [list(p) for p in _DEFAULT_INTENSITIES[self.appearance]]
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")
        want = 3 if self.appearance == "multichannel" else 1
        if len(self.intensities) != want or any(len(p) != 2 for p in self.intensities):
            raise ConfigError(f"{self.appearance} needs {want} [background, foreground] pair(s)")
        if not isinstance(self.image_size, int) or self.image_size < 8:
            raise ConfigError(f"image_size must be an integer >= 8, got {self.image_size!r}")
        lo, hi = self.fg_fraction
        if not 0 <= lo < hi <= 1:
            raise ConfigError(f"fg_fraction must satisfy 0 <= lo < hi <= 1, got {self.fg_fraction}")

    @property
    def channels(self):
        return len(self.intensities)

    def check_depth(self, depth):
        if self.image_size % 2 ** depth:
            raise ConfigError(
                f"image_size {self.image_size} is not divisible by 2**depth = {2 ** depth}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown domain spec key(s): {sorted(extra)}")
        if "name" not in d:
            raise ConfigError("domain spec needs a 'name'")
        return cls(**d)


@dataclass
class Sample:
    image: np.ndarray
    mask: np.ndarray


@dataclass
class Dataset:
    domain: str
    samples: list
    split: str = "train"
    spec: dict | None = None

    def __len__(self):
        return len(self.samples)

    def images(self, idx=None):
        idx = range(len(self.samples)) if idx is None else idx
        return np.stack([self.samples[i].image for i in idx])

    def masks(self, idx=None):
        idx = range(len(self.samples)) if idx is None else idx
        return np.stack([self.samples[i].mask for i in idx])

    @property
    def image_shape(self):
        return list(self.samples[0].image.shape)

    def subset(self, idx, split):
        return Dataset(self.domain, [self.samples[i] for i in idx], split, self.spec)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        if (self.domain, self.split, len(self)) != (other.domain, other.split, len(other)):
            return False
        return all(
            a.image.dtype == b.image.dtype and a.image.shape == b.image.shape
            and a.image.tobytes() == b.image.tobytes() and a.mask.tobytes() == b.mask.tobytes()
            for a, b in zip(self.samples, other.samples))


# --- geometry ----------------------------------------------------------------


def _grid(size):
    c = np.arange(size) + 0.5
    return np.meshgrid(c, c, indexing="ij")


def _ellipse(yy, xx, cy, cx, ry, rx, angle):
    ca, sa = math.cos(angle), math.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = ca * dx + sa * dy
    v = -sa * dx + ca * dy
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _ellipse_pair(rng: Rng, size):
    """Kidney surrogate: one or two elongated ellipses, one per image half."""
    yy, xx = _grid(size)
    count = 2 if rng.uniform1() < 0.8 else 1
    sides = [0, 1] if count == 2 else [rng.below(2)]
    mask = np.zeros((size, size), dtype=bool)
    for side in sides:
        ry = rng.uniform1(0.10, 0.17) * size
        rx = rng.uniform1(0.05, 0.10) * size
        angle = rng.uniform1(-0.5, 0.5)
        reach = max(ry, rx)
        cy = rng.uniform1(reach + 1, size - reach - 1)
        half = size / 2
        lo = side * half + rx + 1
        hi = (side + 1) * half - rx - 1
        cx = rng.uniform1(lo, max(hi, lo + 1e-6))
        mask |= _ellipse(yy, xx, cy, cx, ry, rx, angle)
    return mask


def _irregular_blob(rng: Rng, size):
    """Lesion surrogate: star-shaped blob with a few random angular harmonics."""
    yy, xx = _grid(size)
    count = 2 if rng.uniform1() < 0.3 else 1
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(count):
        r0 = rng.uniform1(0.08, 0.17) * size
        amps = rng.uniform(3, 0.0, 0.18)
        phases = rng.uniform(3, 0.0, 2 * math.pi)
        reach = r0 * (1 + amps.sum())
        cy = rng.uniform1(reach + 1, max(size - reach - 1, reach + 1 + 1e-6))
        cx = rng.uniform1(reach + 1, max(size - reach - 1, reach + 1 + 1e-6))
        dy, dx = yy - cy, xx - cx
        theta = np.arctan2(dy, dx)
        radius = r0 * (1 + sum(a * np.cos((k + 2) * theta + p)
                               for k, (a, p) in enumerate(zip(amps, phases))))
        mask |= dy * dy + dx * dx <= radius * radius
    return mask


_FAMILIES = {"ellipse_pair": _ellipse_pair, "irregular_blob": _irregular_blob}


def _geometry(spec: DomainSpec, rng: Rng):
    lo, hi = spec.fg_fraction
    for _ in range(MAX_PLACEMENT_TRIES):
        mask = _FAMILIES[spec.shape_family](rng, spec.image_size)
        if lo <= mask.mean() <= hi:
            return mask
    raise GenerationError(
        f"{spec.name}: no {spec.shape_family} placement with foreground fraction in "
        f"[{lo}, {hi}] after {MAX_PLACEMENT_TRIES} tries")


def _appearance(spec: DomainSpec, mask, rng: Rng):
    m = mask.astype(np.float64)
    if spec.appearance == "blurred_hot_fg":
        m = gaussian_filter(m, spec.blur_sigma, mode="constant")
    chans = []
    for bg, fg in spec.intensities:
        img = bg + (fg - bg) * m
        if spec.noise_std > 0:
            img = img + spec.noise_std * rng.standard_normal(img.size).reshape(img.shape)
        chans.append(img)
    return np.stack(chans).astype(np.float32)


def generate(spec: DomainSpec, n: int, rng: Rng, split="train") -> Dataset:
    if n < 1:
        raise UsageError(f"need at least one sample, got n={n}")
    geo = Rng(rng.next_u64())
    look = Rng(rng.next_u64())
    samples = []
    for _ in range(n):
        mask = _geometry(spec, geo)
        samples.append(Sample(_appearance(spec, mask, look), mask[None].astype(np.float32)))
    return Dataset(spec.name, samples, split, spec.to_dict())


def split(dataset: Dataset, train_n: int, test_n: int, rng: Rng):
    """Disjoint random train/test subsets; each keeps the original sample order."""
    if train_n < 0 or test_n < 0 or train_n + test_n > len(dataset):
        raise UsageError(
            f"cannot take {train_n} train + {test_n} test samples from {len(dataset)}")
    order = rng.permutation(len(dataset))
    return (dataset.subset(sorted(order[:train_n]), "train"),
            dataset.subset(sorted(order[train_n:train_n + test_n]), "test"))


# --- persistence -------------------------------------------------------------


def save(dataset: Dataset, directory) -> None:
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(dataset.samples):
            save_tensor(s.image, d / f"img_{i}.fdt1")
            save_tensor(s.mask, d / f"msk_{i}.fdt1")
        manifest = {
            "domain": dataset.domain,
            "split": dataset.split,
            "n": len(dataset),
            "image_shape": dataset.image_shape,
            "spec": dataset.spec or {},
        }
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise DatasetIOError(f"cannot write dataset to {d}: {e}", path=str(d)) from e


def load(directory) -> Dataset:
    d = Path(directory)
    mpath = d / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text())
    except OSError as e:
        raise DatasetIOError(f"cannot read {mpath}: {e}", path=str(mpath)) from e
    except json.JSONDecodeError as e:
        raise FormatError(f"{mpath}: invalid JSON ({e})") from e
    for key in ("domain", "split", "n", "image_shape"):
        if key not in manifest:
            raise FormatError(f"{mpath}: missing key {key!r}")
    n = manifest["n"]
    present = len(list(d.glob("img_*.fdt1")))
    if present != n:
        raise FormatError(f"{mpath}: manifest lists n={n} samples but {present} image files exist")
    samples = []
    for i in range(n):
        pair = []
        for prefix in ("img", "msk"):
            p = d / f"{prefix}_{i}.fdt1"
            try:
                pair.append(load_tensor(p))
            except OSError as e:
                raise DatasetIOError(f"cannot read {p}: {e}", path=str(p)) from e
            except FormatError as e:
                raise FormatError(f"{p}: {e}") from e
        img, msk = pair
        if list(img.shape) != list(manifest["image_shape"]):
            raise FormatError(f"{d / f'img_{i}.fdt1'}: shape {list(img.shape)} does not match "
                              f"manifest image_shape {manifest['image_shape']}")
        if msk.shape != (1,) + img.shape[1:]:
            raise FormatError(f"{d / f'msk_{i}.fdt1'}: mask shape {msk.shape} does not match image")
        samples.append(Sample(img, msk))
    return Dataset(manifest["domain"], samples, manifest["split"], manifest.get("spec"))
