"""Image/mask loading, synthetic shape datasets and manifest splitting."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .losses import SegmentationBatch, label_space
from .nn import resize_bilinear_array, resize_nearest_array

MANIFEST_NAME = "manifest.tsv"
SHAPES = ("disk", "rect", "annulus")


class DataError(Exception):
    pass


class DecodeError(DataError):
    """File missing or not a decodable image."""


class ExtentMismatchError(DataError):
    """Image and mask sizes differ."""


class LabelRangeError(DataError):
    """Mask holds a label outside the class range."""


@dataclass
class DatasetManifest:
    records: list[tuple[Path, Path]]
    ratios: tuple[float, ...] | None = None
    random_state: int | None = None

    def __len__(self) -> int:
        return len(self.records)

    @classmethod
    def read(cls, path: "str | Path") -> "DatasetManifest":
        """Read ``image<TAB>mask`` lines; relative paths resolve against the manifest directory."""
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        if not path.is_file():
            raise DataError(f"manifest not found: {path}")
        records = []
        for n, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{n}: expected image<TAB>mask, got {line!r}")
            records.append(tuple(p if p.is_absolute() else path.parent / p for p in map(Path, parts)))
        return cls(records)

    def write(self, path: "str | Path") -> None:
        path = Path(path)
        lines = []
        for img, msk in self.records:
            lines.append("\t".join(_relative(p, path.parent) for p in (img, msk)))
        path.write_text("\n".join(lines) + "\n")


def _relative(p: Path, base: Path) -> str:
    try:
        return str(Path(p).resolve().relative_to(base.resolve()))
    except ValueError:
        return str(p)


def split(
    manifest: DatasetManifest,
    ratios: tuple[float, ...] = (0.8, 0.1, 0.1),
    random_state: int = 0,
) -> tuple[DatasetManifest, ...]:
    """Shuffle and partition; sizes are floor(ratio * n) with the remainder going to the first part."""
    n = len(manifest)
    if n == 0:
        raise DataError("cannot split an empty manifest")
    if any(r < 0 for r in ratios) or not np.isclose(sum(ratios), 1.0):
        raise ValueError(f"ratios must be nonnegative and sum to 1, got {ratios}")
    sizes = [int(np.floor(r * n + 1e-9)) for r in ratios]
    sizes[0] += n - sum(sizes)
    order = np.random.default_rng(random_state).permutation(n)
    out, lo = [], 0
    for s in sizes:
        out.append(DatasetManifest([manifest.records[i] for i in order[lo:lo + s]], tuple(ratios), random_state))
        lo += s
    return tuple(out)


def _open(path: Path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
        return img
    except FileNotFoundError:
        raise DecodeError(f"no such file: {path}") from None
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from None


def read_image(path: "str | Path") -> np.ndarray:
    """C x H x W float32 in [0, 1]; grayscale gives C = 1, everything else is read as RGB."""
    img = _open(Path(path))
    if img.mode not in ("L", "RGB"):
        img = img.convert("L" if img.mode in ("1", "LA", "I", "I;16", "F") else "RGB")
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1).copy()


def read_mask(path: "str | Path") -> np.ndarray:
    img = _open(Path(path))
    if img.mode not in ("L", "P", "I", "I;16"):
        raise DecodeError(f"{path}: mask must be single-channel integer, got mode {img.mode}")
    return np.asarray(img).astype(np.int64)


def write_mask(path: "str | Path", mask: np.ndarray) -> None:
    if mask.min() < 0 or mask.max() > 255:
        raise ValueError("mask labels must fit in 8 bits")
    Image.fromarray(mask.astype(np.uint8), mode="L").save(path)


def write_image(path: "str | Path", image: np.ndarray) -> None:
    """Save a C x H x W image in [0, 1] as 8-bit PNG."""
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)).save(path)


def load_sample(
    image_path: "str | Path",
    mask_path: "str | Path",
    resolution: int | tuple[int, int],
    class_count: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Image resized bilinearly to the target, mask resized by nearest neighbour."""
    oh, ow = (resolution, resolution) if isinstance(resolution, int) else resolution
    image, mask = read_image(image_path), read_mask(mask_path)
    if image.shape[1:] != mask.shape:
        raise ExtentMismatchError(f"{image_path} is {image.shape[1:]} but {mask_path} is {mask.shape}")
    if class_count is not None and mask.size and mask.max() >= label_space(class_count):
        raise LabelRangeError(f"{mask_path}: label {mask.max()} >= class count {label_space(class_count)}")
    return resize_bilinear_array(image, oh, ow).astype(np.float32), resize_nearest_array(mask, oh, ow)


def load_dataset(
    manifest: DatasetManifest, resolution: int | tuple[int, int], class_count: int
) -> SegmentationBatch:
    if len(manifest) == 0:
        raise DataError("manifest has no records")
    pairs = [load_sample(i, m, resolution, class_count) for i, m in manifest.records]
    chans = {p[0].shape[0] for p in pairs}
    if len(chans) != 1:
        raise DataError(f"images mix channel counts {sorted(chans)}")
    return SegmentationBatch(np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]), class_count)


# -- synthetic shapes ----------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    count: int = 8
    resolution: int = 128
    shapes: tuple[str, ...] = SHAPES
    class_count: int = 3
    noise: float = 0.05
    seed: int = 0
    channels: int = 1
    max_shapes: int = 3

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.resolution < 32 or self.resolution % 32:
            raise ValueError(f"resolution must be a positive multiple of 32, got {self.resolution}")
        unknown = set(self.shapes) - set(SHAPES)
        if unknown or not self.shapes:
            raise ValueError(f"unknown shapes {sorted(unknown)}; choose from {SHAPES}")
        if self.class_count < 1 or label_space(self.class_count) > 256:
            raise ValueError(f"class_count out of range: {self.class_count}")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")


def _grid(res: int):
    yy, xx = np.mgrid[0:res, 0:res]
    return yy + 0.5, xx + 0.5


def disk_mask(res: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = _grid(res)
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def annulus_mask(res: int, cy: float, cx: float, r_in: float, r_out: float) -> np.ndarray:
    yy, xx = _grid(res)
    d2 = (yy - cy) ** 2 + (xx - cx) ** 2
    return (d2 <= r_out * r_out) & (d2 >= r_in * r_in)


def rect_mask(res: int, y0: float, x0: float, y1: float, x1: float) -> np.ndarray:
    yy, xx = _grid(res)
    return (yy >= y0) & (yy < y1) & (xx >= x0) & (xx < x1)


def _random_shape(kind: str, res: int, rng: np.random.Generator) -> np.ndarray:
    lo, hi = res * 0.08, res * 0.25
    if kind == "rect":
        h, w = rng.uniform(2 * lo, 2 * hi, size=2)
        y0, x0 = rng.uniform(0, res - h), rng.uniform(0, res - w)
        return rect_mask(res, y0, x0, y0 + h, x0 + w)
    r = rng.uniform(lo, hi)
    cy, cx = rng.uniform(r, res - r, size=2)
    if kind == "disk":
        return disk_mask(res, cy, cx, r)
    return annulus_mask(res, cy, cx, r * rng.uniform(0.4, 0.7), r)


def render_sample(spec: SyntheticSpec, index: int) -> tuple[np.ndarray, np.ndarray]:
    """One (C x H x W image in [0, 1], H x W label mask) pair; class intensities are fixed per class."""
    rng = np.random.default_rng([spec.seed, index])
    res = spec.resolution
    n_labels = label_space(spec.class_count)
    mask = np.zeros((res, res), dtype=np.int64)
    n_shapes = int(rng.integers(1, spec.max_shapes + 1))
    for j in range(n_shapes):
        # the first shape cycles through classes so every class appears somewhere
        label = 1 + (index % (n_labels - 1)) if j == 0 else int(rng.integers(1, n_labels))
        kind = spec.shapes[int(rng.integers(len(spec.shapes)))]
        mask[_random_shape(kind, res, rng)] = label
    levels = np.linspace(0.15, 0.85, n_labels)
    tints = np.linspace(0.8, 1.2, spec.channels)[:, None, None] if spec.channels > 1 else np.ones((1, 1, 1))
    image = levels[mask][None] * tints + rng.normal(0.0, spec.noise, size=(spec.channels, res, res))
    return np.clip(image, 0.0, 1.0).astype(np.float32), mask


def generate_synthetic(spec: SyntheticSpec, out_dir: "str | Path") -> DatasetManifest:
    """Write ``images/NNNN.png``, ``masks/NNNN.png`` and ``manifest.tsv`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(spec.count):
        image, mask = render_sample(spec, i)
        ip, mp = out / "images" / f"{i:04d}.png", out / "masks" / f"{i:04d}.png"
        write_image(ip, image)
        write_mask(mp, mask)
        records.append((ip, mp))
    manifest = DatasetManifest(records)
    manifest.write(out / MANIFEST_NAME)
    return manifest


def synthetic_batch(spec: SyntheticSpec) -> SegmentationBatch:
    """In-memory version of the synthetic set (no 8-bit quantization)."""
    pairs = [render_sample(spec, i) for i in range(spec.count)]
    return SegmentationBatch(np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]), spec.class_count)
