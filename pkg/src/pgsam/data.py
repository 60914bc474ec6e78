"""Slices, masks, expert reports, preprocessing and the synthetic phantom generator."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .exceptions import ConfigurationError, DatasetIndexError, ValidationError

IMAGE_SIZE = 224
SEQUENCES = ("T1", "T1C", "T2", "ADC")
LATERALITIES = ("left", "right")
SUBREGIONS = ("anterior", "posterior", "superficial", "deep", "none")
SPLITS = ("train", "val", "test")
DEFAULT_SPLIT_RATIOS = (0.7, 0.1, 0.2)
SLICE_THRESHOLD = 25
# Phantom reports size lesions in mm; one pixel is one mm.
MM_PER_PIXEL = 1.0

REPORT_TEMPLATE = (
    "This is an MRI image with a lesion located in the {pos} parotid gland, "
    "with size of {size} mm."
)
FIXED_TEMPLATES = {
    "photo": "A photo of a parotid gland.",
    "presence": "There is a parotid gland in this MRI image.",
    "background": "An image containing the parotid gland, with the rest being background.",
}
PROMPT_MODES = ("none", "photo", "presence", "background", "expert")


@dataclass
class MultiSequenceSlice:
    channels: np.ndarray
    available: np.ndarray
    slice_id: str = ""
    site_id: str = "site1"

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float32)
        if self.channels.ndim != 3:
            raise ValidationError(f"channels must be [c, H, W], got shape {self.channels.shape}")
        self.available = np.asarray(self.available, dtype=bool).reshape(-1)
        if self.available.shape[0] != self.channels.shape[0]:
            raise ValidationError("one availability flag per channel is required")
        if not np.all(np.isfinite(self.channels)):
            raise ValidationError(f"slice {self.slice_id!r} has non-finite intensities")
        if self.channels.min(initial=0.0) < 0.0 or self.channels.max(initial=0.0) > 1.0:
            raise ValidationError(f"slice {self.slice_id!r} intensities outside [0, 1]")
        if np.any(self.channels[~self.available] != 0):
            raise ValidationError("unavailable channels must be zero-filled")

    @property
    def shape(self) -> tuple[int, int]:
        return self.channels.shape[1], self.channels.shape[2]


@dataclass
class LesionMask:
    pixels: np.ndarray

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        if pixels.ndim != 2:
            raise ValidationError(f"mask must be 2D, got shape {pixels.shape}")
        if not np.isin(pixels, (0, 1)).all():
            raise ValidationError("mask values must be in {0, 1}")
        self.pixels = pixels.astype(np.uint8)

    @property
    def lesion_pixel_count(self) -> int:
        return int(self.pixels.sum())


@dataclass
class ExpertReport:
    laterality: str
    subregion: str
    size_mm: tuple[float, float, float]
    rendered_text: str = ""

    def __post_init__(self):
        if self.laterality not in LATERALITIES:
            raise ValidationError(f"unknown laterality {self.laterality!r}")
        if self.subregion not in SUBREGIONS:
            raise ValidationError(f"unknown subregion {self.subregion!r}")
        self.size_mm = tuple(float(s) for s in self.size_mm)
        if len(self.size_mm) != 3 or min(self.size_mm) <= 0:
            raise ValidationError(f"size_mm must be three positive values, got {self.size_mm}")
        if not self.rendered_text:
            self.rendered_text = render_report(self)

    def to_json(self) -> dict:
        return {
            "laterality": self.laterality,
            "subregion": self.subregion,
            "size_mm": list(self.size_mm),
            "text": self.rendered_text,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "ExpertReport":
        return cls(
            laterality=payload["laterality"],
            subregion=payload["subregion"],
            size_mm=tuple(payload["size_mm"]),
            rendered_text=payload.get("text", ""),
        )


def _format_mm(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else f"{value:g}"


def render_report(report: ExpertReport) -> str:
    pos = report.laterality if report.subregion == "none" else f"{report.laterality} {report.subregion}"
    size = "×".join(_format_mm(v) for v in report.size_mm)
    return REPORT_TEMPLATE.format(pos=pos, size=size)


def prompt_text(mode: str, report: ExpertReport | None = None) -> str | None:
    """Text fed to the prompt generator for one of the prompt-ablation modes.

    ``"none"`` returns None (the text pathway sees a zero embedding), the fixed
    modes return their template verbatim and ``"expert"`` renders ``report``.
    """
    if mode == "none":
        return None
    if mode in FIXED_TEMPLATES:
        return FIXED_TEMPLATES[mode]
    if mode == "expert":
        if report is None:
            raise ValidationError("expert prompt mode requires a report")
        return report.rendered_text or render_report(report)
    raise ValidationError(f"unknown prompt mode {mode!r}; expected one of {PROMPT_MODES}")


# ---------------------------------------------------------------- preprocessing


def filter_slices(masks: Sequence[LesionMask], threshold: int = SLICE_THRESHOLD) -> list[int]:
    if threshold < 0:
        raise ValidationError("threshold must be non-negative")
    return [i for i, m in enumerate(masks) if m.lesion_pixel_count > threshold]


def resize_bilinear(raw: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    """Half-pixel-centred bilinear resize (no antialiasing)."""
    t = torch.as_tensor(np.asarray(raw, dtype=np.float64))[None, None]
    if t.shape[-2:] == (size, size):
        return t[0, 0].numpy().copy()
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return out[0, 0].numpy()


def minmax_normalize(x: np.ndarray) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def preprocess_slice(raw: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.size == 0:
        raise ValidationError(f"expected a non-empty 2D array, got shape {raw.shape}")
    if not np.all(np.isfinite(raw)):
        raise ValidationError("slice contains non-finite values")
    return minmax_normalize(resize_bilinear(raw, size)).astype(np.float32)


def preprocess_mask(raw: np.ndarray, size: int = IMAGE_SIZE) -> LesionMask:
    raw = np.asarray(raw)
    if raw.shape == (size, size):
        return LesionMask((raw > 0).astype(np.uint8))
    img = Image.fromarray((raw > 0).astype(np.uint8) * 255)
    return LesionMask((np.asarray(img.resize((size, size), Image.NEAREST)) > 0).astype(np.uint8))


def augment_transform(rng_seed: int) -> tuple[int, bool]:
    """Quarter-turn count and horizontal-flip flag selected by ``rng_seed``."""
    rng = np.random.default_rng(rng_seed)
    return int(rng.integers(4)), bool(rng.integers(2))


def apply_transform(arr: np.ndarray, k: int, flip: bool) -> np.ndarray:
    out = np.rot90(arr, k=k, axes=(-2, -1))
    if flip:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def augment(
    slice_: MultiSequenceSlice, mask: LesionMask, rng_seed: int
) -> tuple[MultiSequenceSlice, LesionMask]:
    k, flip = augment_transform(rng_seed)
    channels = apply_transform(slice_.channels, k, flip)
    pixels = apply_transform(mask.pixels, k, flip)
    return (
        MultiSequenceSlice(channels, slice_.available.copy(), slice_.slice_id, slice_.site_id),
        LesionMask(pixels),
    )


# --------------------------------------------------------------------- phantoms


@dataclass
class PhantomConfig:
    """Parameters of the synthetic head-and-neck phantom.

    ``per_channel_contrast`` holds one ``(lesion intensity offset, noise std)``
    pair per sequence. ``missing_channel_prob`` zero-fills (and flags) each
    channel independently, mimicking incomplete acquisitions.
    """

    image_size: int = IMAGE_SIZE
    lesion_radius_range: tuple[float, float] = (8.0, 14.0)
    lesion_laterality_prior: float = 0.5
    per_channel_contrast: tuple[tuple[float, float], ...] = (
        (-0.22, 0.04),
        (0.28, 0.05),
        (0.32, 0.05),
        (0.18, 0.06),
    )
    count: int = 10
    seed: int = 0
    site_id: str = "site1"
    tissue_intensity: float = 0.35
    gland_intensity: float = 0.55
    missing_channel_prob: float = 0.0

    def __post_init__(self):
        lo, hi = self.lesion_radius_range
        if not 0 < lo <= hi:
            raise ConfigurationError(f"lesion_radius_range must be positive and ordered, got {self.lesion_radius_range}")
        for name in ("lesion_laterality_prior", "missing_channel_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {p}")
        if self.count < 0:
            raise ConfigurationError("count must be non-negative")
        if len(self.per_channel_contrast) < 1:
            raise ConfigurationError("at least one channel is required")
        gland = self.gland_geometry()
        if hi > min(gland.semi_axes) - 2:
            raise ConfigurationError(
                f"lesion radius {hi} does not fit inside gland with semi-axes {gland.semi_axes}"
            )

    @property
    def n_channels(self) -> int:
        return len(self.per_channel_contrast)

    def gland_geometry(self) -> "GlandGeometry":
        s = self.image_size
        return GlandGeometry(
            left_center=(0.27 * s, 0.48 * s),
            right_center=(0.73 * s, 0.48 * s),
            semi_axes=(0.13 * s, 0.17 * s),
        )


@dataclass(frozen=True)
class GlandGeometry:
    """Gland ellipse centres as (x, y) pixels and shared semi-axes (a_x, a_y).

    Laterality refers to the image side (x < W/2 is "left"). Anterior is up
    (smaller y), superficial is away from the midline.
    """

    left_center: tuple[float, float]
    right_center: tuple[float, float]
    semi_axes: tuple[float, float]

    def center(self, laterality: str) -> tuple[float, float]:
        return self.left_center if laterality == "left" else self.right_center


def _ellipse(h: int, w: int, cx: float, cy: float, ax: float, ay: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1.0


def _disk(h: int, w: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r


def describe_lesion(mask: np.ndarray, geometry: GlandGeometry, image_size: int) -> ExpertReport:
    """Derive the structured report from a rasterised lesion mask."""
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        raise ValidationError("cannot describe an empty lesion mask")
    cx, cy = xs.mean(), ys.mean()
    laterality = "left" if cx < image_size / 2 else "right"
    gx, gy = geometry.center(laterality)
    # Positive dx points away from the midline.
    dx = (gx - cx) if laterality == "left" else (cx - gx)
    dy = cy - gy
    ax, ay = geometry.semi_axes
    rx, ry = dx / ax, dy / ay
    if max(abs(rx), abs(ry)) < 0.15:
        subregion = "none"
    elif abs(ry) >= abs(rx):
        subregion = "posterior" if ry > 0 else "anterior"
    else:
        subregion = "superficial" if rx > 0 else "deep"
    width = (xs.max() - xs.min() + 1) * MM_PER_PIXEL
    height = (ys.max() - ys.min() + 1) * MM_PER_PIXEL
    depth = round(math.sqrt(xs.size / math.pi) * 2) * MM_PER_PIXEL
    return ExpertReport(laterality, subregion, (float(width), float(height), float(max(depth, 1.0))))


_SUBREGION_OFFSETS = {
    "anterior": (0.0, -1.0),
    "posterior": (0.0, 1.0),
    "superficial": (1.0, 0.0),
    "deep": (-1.0, 0.0),
    "none": (0.0, 0.0),
}


def _place_lesion(rng: np.random.Generator, cfg: PhantomConfig, geometry: GlandGeometry):
    laterality = "left" if rng.random() < cfg.lesion_laterality_prior else "right"
    subregion = SUBREGIONS[int(rng.integers(len(SUBREGIONS)))]
    radius = float(rng.uniform(*cfg.lesion_radius_range))
    gx, gy = geometry.center(laterality)
    ax, ay = geometry.semi_axes
    ux, uy = _SUBREGION_OFFSETS[subregion]
    lateral_sign = -1.0 if laterality == "left" else 1.0
    # Keep the whole disk inside the gland ellipse along the offset axis.
    reach = (ax if ux else ay) - radius - 1.0
    frac = float(rng.uniform(0.45, 0.85)) if subregion != "none" else 0.0
    jitter = rng.uniform(-0.05, 0.05, size=2) * np.array([ax, ay])
    if subregion == "none":
        jitter *= 0.5
    cx = gx + lateral_sign * ux * frac * reach + (jitter[0] if not ux else 0.0)
    cy = gy + uy * frac * reach + (jitter[1] if not uy else 0.0)
    return cx, cy, radius


def generate_phantom(cfg: PhantomConfig, index: int, rng: np.random.Generator):
    cx, cy, radius = _place_lesion(rng, cfg, cfg.gland_geometry())
    return draw_phantom(cfg, (cx, cy), radius, rng, index)


def draw_phantom(
    cfg: PhantomConfig,
    lesion_center: tuple[float, float],
    radius: float,
    rng: np.random.Generator,
    index: int = 0,
):
    """Rasterise one phantom with a disk lesion at ``lesion_center`` (x, y)."""
    s = cfg.image_size
    geometry = cfg.gland_geometry()
    head = _ellipse(s, s, s / 2, s / 2, 0.44 * s, 0.47 * s)
    ax, ay = geometry.semi_axes
    glands = _ellipse(s, s, *geometry.left_center, ax, ay) | _ellipse(s, s, *geometry.right_center, ax, ay)
    lesion = _disk(s, s, lesion_center[0], lesion_center[1], radius)
    if not lesion.any():
        raise ConfigurationError("lesion disk does not cover any pixel")
    # Anatomy intensities wobble per sample so normalisation is not trivially constant.
    tissue = cfg.tissue_intensity + rng.uniform(-0.05, 0.05)
    gland_level = cfg.gland_intensity + rng.uniform(-0.05, 0.05)
    channels = np.zeros((cfg.n_channels, s, s), dtype=np.float64)
    available = np.ones(cfg.n_channels, dtype=bool)
    yy, xx = np.mgrid[0:s, 0:s]
    for c, (offset, noise_std) in enumerate(cfg.per_channel_contrast):
        img = np.zeros((s, s))
        shading = 0.05 * np.sin(2 * np.pi * (xx / s + c * 0.13)) * np.cos(2 * np.pi * yy / s)
        img[head] = tissue + 0.05 * c
        img[glands] = gland_level - 0.04 * c
        img[lesion] += offset
        img[head] += shading[head]
        img += rng.normal(0.0, noise_std, size=(s, s)) * head
        img = np.clip(img, 0.0, 1.0)
        if rng.random() < cfg.missing_channel_prob:
            available[c] = False
            continue
        channels[c] = minmax_normalize(img)
    mask = LesionMask(lesion.astype(np.uint8))
    report = describe_lesion(mask.pixels, geometry, s)
    slice_ = MultiSequenceSlice(
        channels.astype(np.float32), available, f"{cfg.site_id}_{index:05d}", cfg.site_id
    )
    return slice_, mask, report


def generate_phantoms(config: PhantomConfig) -> list[tuple[MultiSequenceSlice, LesionMask, ExpertReport]]:
    rng = np.random.default_rng(config.seed)
    return [generate_phantom(config, i, rng) for i in range(config.count)]


SITE_PRESETS = {
    "site1": {},
    "site2": {
        "tissue_intensity": 0.30,
        "gland_intensity": 0.60,
        "per_channel_contrast": ((-0.18, 0.06), (0.24, 0.07), (0.28, 0.06), (0.15, 0.08)),
    },
    "site3": {
        "tissue_intensity": 0.40,
        "gland_intensity": 0.52,
        "lesion_radius_range": (8.0, 16.0),
        "per_channel_contrast": ((-0.20, 0.05), (0.30, 0.06), (0.26, 0.07), (0.20, 0.05)),
    },
}


def site_config(site_id: str, count: int, seed: int, **overrides) -> PhantomConfig:
    if site_id not in SITE_PRESETS:
        raise ConfigurationError(f"unknown site preset {site_id!r}")
    params = dict(SITE_PRESETS[site_id])
    params.update(overrides)
    return PhantomConfig(count=count, seed=seed, site_id=site_id, **params)


# ------------------------------------------------------------------ on-disk I/O

CHANNELS_MAGIC = b"MSEQ"
CHANNELS_VERSION = 1
_HEADER = struct.Struct("<4sHHII")


def write_channels(path: str | Path, channels: np.ndarray) -> None:
    """Write ``[c, H, W]`` float32 data behind the 16-byte MSEQ header."""
    arr = np.asarray(channels, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[None]
    c, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CHANNELS_MAGIC, CHANNELS_VERSION, c, h, w))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_channels(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValidationError(f"{path}: truncated header")
    magic, version, c, h, w = _HEADER.unpack_from(data)
    if magic != CHANNELS_MAGIC:
        raise ValidationError(f"{path}: bad magic {magic!r}")
    if version != CHANNELS_VERSION:
        raise ValidationError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 4 * c * h * w
    if len(data) != expected:
        raise ValidationError(f"{path}: expected {expected} bytes, found {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(c, h, w).astype(np.float32)


def write_mask(path: str | Path, mask: LesionMask) -> None:
    Image.fromarray(mask.pixels * 255).save(path)


def read_mask(path: str | Path) -> LesionMask:
    arr = np.asarray(Image.open(path).convert("L"))
    return LesionMask((arr > 127).astype(np.uint8))


@dataclass(frozen=True)
class DatasetEntry:
    slice_id: str
    slice_path: Path
    mask_path: Path
    report_path: Path | None
    split: str

    def load(self) -> tuple[MultiSequenceSlice, LesionMask, ExpertReport | None]:
        channels = read_channels(self.slice_path)
        meta_path = self.slice_path.parent / "meta.json"
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        available = np.asarray(meta.get("available", channels.reshape(len(channels), -1).any(axis=1)))
        slice_ = MultiSequenceSlice(channels, available, self.slice_id, meta.get("site_id", "site1"))
        mask = read_mask(self.mask_path)
        report = None
        if self.report_path is not None:
            report = ExpertReport.from_json(json.loads(self.report_path.read_text()))
        return slice_, mask, report


@dataclass(frozen=True)
class DatasetIndex:
    entries: tuple[DatasetEntry, ...] = ()
    seed: int = 0
    root: Path | None = None

    def split(self, name: str) -> list[DatasetEntry]:
        return [e for e in self.entries if e.split == name]

    def counts(self) -> dict[str, int]:
        return {s: len(self.split(s)) for s in SPLITS}

    def __len__(self) -> int:
        return len(self.entries)

    def fingerprint(self) -> str:
        import hashlib

        digest = hashlib.sha256()
        for e in sorted(self.entries, key=lambda e: (e.split, e.slice_id)):
            digest.update(f"{e.split}/{e.slice_id}".encode())
            for p in (e.slice_path, e.mask_path, e.report_path):
                if p is not None:
                    digest.update(p.read_bytes())
        return digest.hexdigest()[:16]


def split_counts(n: int, ratios: Sequence[float] = DEFAULT_SPLIT_RATIOS) -> tuple[int, int, int]:
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def assign_splits(n: int, seed: int, ratios: Sequence[float] = DEFAULT_SPLIT_RATIOS) -> list[str]:
    """Seeded per-sample split assignment with the given train/val/test ratios."""
    n_train, n_val, _ = split_counts(n, ratios)
    order = np.random.default_rng(seed).permutation(n)
    tags = [""] * n
    for rank, idx in enumerate(order):
        tags[idx] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
    return tags


def export_samples(
    root: str | Path,
    samples: Iterable[tuple[MultiSequenceSlice, LesionMask, ExpertReport | None]],
    splits: Sequence[str] | None = None,
    seed: int = 0,
    ratios: Sequence[float] = DEFAULT_SPLIT_RATIOS,
) -> DatasetIndex:
    samples = list(samples)
    if splits is None:
        splits = assign_splits(len(samples), seed, ratios)
    root = Path(root)
    for (slice_, mask, report), split in zip(samples, splits):
        if split not in SPLITS:
            raise ValidationError(f"unknown split {split!r}")
        d = root / split / slice_.slice_id
        d.mkdir(parents=True, exist_ok=True)
        write_channels(d / "channels.bin", slice_.channels)
        write_mask(d / "mask.png", mask)
        meta = {"site_id": slice_.site_id, "available": slice_.available.tolist()}
        (d / "meta.json").write_text(json.dumps(meta))
        if report is not None:
            (d / "report.json").write_text(json.dumps(report.to_json(), ensure_ascii=False))
    return load_dataset(root, require_reports=False, seed=seed)


def load_dataset(root: str | Path, require_reports: bool = True, seed: int = 0) -> DatasetIndex:
    root = Path(root)
    entries = []
    missing = []
    if not root.exists():
        return DatasetIndex((), seed, root)
    for split in SPLITS:
        split_dir = root / split
        if not split_dir.is_dir():
            continue
        for d in sorted(p for p in split_dir.iterdir() if p.is_dir()):
            slice_path, mask_path, report_path = d / "channels.bin", d / "mask.png", d / "report.json"
            if not slice_path.exists():
                continue
            problems = []
            if not mask_path.exists():
                problems.append("mask")
            if not report_path.exists():
                if require_reports:
                    problems.append("report")
                report_path = None
            if problems:
                missing.append(f"{d.name} (missing {', '.join(problems)})")
                continue
            entries.append(DatasetEntry(d.name, slice_path, mask_path, report_path, split))
    if missing:
        raise DatasetIndexError("incomplete slices: " + "; ".join(missing))
    ids = [e.slice_id for e in entries]
    if len(set(ids)) != len(ids):
        raise DatasetIndexError("slice ids must be unique across splits")
    return DatasetIndex(tuple(entries), seed, root)


@dataclass
class SampleBatch:
    """Stacked arrays for a list of samples."""

    channels: np.ndarray
    available: np.ndarray
    masks: np.ndarray
    reports: list = field(default_factory=list)
    slice_ids: list = field(default_factory=list)
    site_ids: list = field(default_factory=list)


def stack_samples(samples) -> SampleBatch:
    samples = list(samples)
    if not samples:
        return SampleBatch(
            np.zeros((0, len(SEQUENCES), IMAGE_SIZE, IMAGE_SIZE), np.float32),
            np.zeros((0, len(SEQUENCES)), bool),
            np.zeros((0, IMAGE_SIZE, IMAGE_SIZE), np.uint8),
        )
    return SampleBatch(
        channels=np.stack([s.channels for s, _, _ in samples]),
        available=np.stack([s.available for s, _, _ in samples]),
        masks=np.stack([m.pixels for _, m, _ in samples]),
        reports=[r for _, _, r in samples],
        slice_ids=[s.slice_id for s, _, _ in samples],
        site_ids=[s.site_id for s, _, _ in samples],
    )
