"""Stereo sample I/O: PFM and KITTI disparity maps, images, crops and
synthetic random-dot stereograms."""

from __future__ import annotations

import logging
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import DataError

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".ppm", ".bmp", ".tif", ".tiff")


@dataclass
class StereoSample:
    left: np.ndarray
    right: np.ndarray
    gt_disparity: Optional[np.ndarray] = None
    valid_mask: Optional[np.ndarray] = None
    name: str = ""

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise DataError(f"left {self.left.shape} and right {self.right.shape} images differ in shape")
        if self.gt_disparity is not None and self.valid_mask is None:
            self.valid_mask = np.isfinite(self.gt_disparity)

    @property
    def shape(self) -> tuple[int, int]:
        return self.left.shape[:2]


class PFMError(DataError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


# PFM


def _read_header_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    end = buf.find(b"\n", pos)
    if end < 0:
        raise PFMError("unterminated header line", pos)
    return buf[pos:end].strip(), end + 1


def parse_pfm(buf: bytes) -> tuple[np.ndarray, float]:
    """Decode PFM bytes into a top-down float32 array and the header scale."""
    kind, pos = _read_header_token(buf, 0)
    if kind not in (b"Pf", b"PF"):
        raise PFMError(f"bad magic {kind!r}, expected 'Pf' or 'PF'", 0)
    channels = 3 if kind == b"PF" else 1
    dims_at = pos
    dims, pos = _read_header_token(buf, pos)
    m = re.fullmatch(rb"(\d+)\s+(\d+)", dims)
    if not m:
        raise PFMError(f"bad dimensions line {dims!r}", dims_at)
    width, height = int(m.group(1)), int(m.group(2))
    scale_at = pos
    scale_tok, pos = _read_header_token(buf, pos)
    try:
        scale = float(scale_tok)
    except ValueError:
        raise PFMError(f"bad scale {scale_tok!r}", scale_at) from None
    if scale == 0:
        raise PFMError("scale must be non-zero", scale_at)
    dtype = "<f4" if scale < 0 else ">f4"
    count = width * height * channels
    payload = buf[pos:]
    if len(payload) < 4 * count:
        raise PFMError(f"truncated payload: need {4 * count} bytes, found {len(payload)}", pos)
    data = np.frombuffer(payload, dtype=dtype, count=count)
    shape = (height, width, 3) if channels == 3 else (height, width)
    # PFM rows run bottom-to-top
    return np.flipud(data.reshape(shape)).astype(np.float32), scale


def load_pfm(path) -> tuple[np.ndarray, float]:
    return parse_pfm(Path(path).read_bytes())


def write_pfm(path, data: np.ndarray, scale: float = 1.0, little_endian: bool = True) -> None:
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 3 and data.shape[2] == 3:
        kind = b"PF"
    elif data.ndim == 2:
        kind = b"Pf"
    else:
        raise ValueError(f"PFM stores (H, W) or (H, W, 3) arrays, got {data.shape}")
    scale = -abs(scale) if little_endian else abs(scale)
    h, w = data.shape[:2]
    raster = np.flipud(data).astype("<f4" if little_endian else ">f4")
    with open(path, "wb") as f:
        f.write(kind + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(f"{scale:g}\n".encode())
        f.write(raster.tobytes())


# KITTI 16-bit disparity PNG


def decode_kitti_disparity(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    raw = np.asarray(raw)
    return raw.astype(np.float64) / 256.0, raw > 0


def load_kitti_disparity(path) -> tuple[np.ndarray, np.ndarray]:
    """Disparity in px (``raw / 256``) and validity mask (``raw > 0``)."""
    with Image.open(path) as im:
        if im.mode not in ("I;16", "I;16B", "I;16L", "I"):
            raise DataError(f"{path}: expected a 16-bit single-channel PNG, got mode {im.mode}")
        raw = np.array(im)
    if raw.dtype != np.uint16:
        if raw.min() < 0 or raw.max() > 65535:
            raise DataError(f"{path}: values out of 16-bit range")
        raw = raw.astype(np.uint16)
    return decode_kitti_disparity(raw)


def write_kitti_disparity(path, disparity: np.ndarray, valid: Optional[np.ndarray] = None) -> None:
    disp = np.asarray(disparity, dtype=np.float64)
    raw = np.clip(np.round(disp * 256.0), 1, 65535).astype(np.uint16)
    if valid is None:
        valid = np.isfinite(disp)
    raw[~np.asarray(valid, bool)] = 0
    Image.fromarray(raw).save(path)


# images


def load_image(path) -> np.ndarray:
    """Image as float32 in [0, 1]: ``(H, W)`` grayscale or ``(H, W, 3)``."""
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK") else "L")
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return arr


def write_image(path, img: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_disparity(path) -> tuple[np.ndarray, np.ndarray]:
    """Disparity map and validity mask from a ``.pfm`` or KITTI ``.png``."""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        data, _ = load_pfm(path)
        if data.ndim != 2:
            raise DataError(f"{path}: disparity PFM must be single-channel")
        valid = np.isfinite(data)
        return np.where(valid, data, 0.0).astype(np.float64), valid
    return load_kitti_disparity(path)


# cropping / resampling


def random_crop(sample: StereoSample, width: int = 256, height: int = 128, rng=None) -> StereoSample:
    """Crop the same window from every map of ``sample``."""
    h, w = sample.shape
    if h < height or w < width:
        raise DataError(
            f"sample {sample.name!r} is {w}x{h}, smaller than the {width}x{height} crop; "
            "pad the images or use a smaller crop"
        )
    rng = rng if rng is not None else np.random.default_rng()
    y = int(rng.integers(0, h - height + 1))
    x = int(rng.integers(0, w - width + 1))
    win = (slice(y, y + height), slice(x, x + width))

    def cut(a):
        return None if a is None else a[win]

    return StereoSample(cut(sample.left), cut(sample.right), cut(sample.gt_disparity), cut(sample.valid_mask), sample.name)


def downsample_sample(sample: StereoSample, factor: int = 4) -> StereoSample:
    """Shrink a sample by ``factor``: bilinear images, nearest-neighbour disparity / factor."""

    def resize_image(a):
        h, w = a.shape[:2]
        size = (max(1, w // factor), max(1, h // factor))
        if a.ndim == 2:
            return np.asarray(Image.fromarray(a.astype(np.float32), mode="F").resize(size, Image.BILINEAR))
        chans = [resize_image(a[..., c]) for c in range(a.shape[2])]
        return np.stack(chans, axis=-1)

    gt = mask = None
    if sample.gt_disparity is not None:
        h, w = sample.shape
        ys = np.arange(h // factor) * factor + factor // 2
        xs = np.arange(w // factor) * factor + factor // 2
        gt = sample.gt_disparity[np.ix_(ys, xs)] / factor
        mask = sample.valid_mask[np.ix_(ys, xs)]
    return StereoSample(resize_image(sample.left), resize_image(sample.right), gt, mask, sample.name)


# synthetic random-dot stereograms

DOMAIN_SHIFTS = ("none", "invert_contrast", "add_noise", "texture_swap")
SHAPE_KINDS = ("rectangle", "ellipse")
# Gaussian blur (px) of the white noise behind the texture_swap texture
TEXTURE_SWAP_SIGMA = 3.0


@dataclass
class SynthParams:
    """Random-dot stereogram generator settings.

    Disparities are integers in ``[0, max_disparity - 1]``. The background
    takes the smallest disparity of the scene and each shape a distinct
    larger one, so nearer layers occlude farther ones.
    """

    width: int = 64
    height: int = 32
    max_disparity: int = 16
    dot_density: float = 0.5
    min_shapes: int = 1
    max_shapes: int = 4
    shape_kinds: tuple[str, ...] = SHAPE_KINDS
    noise_stddev: float = 0.0
    domain_shift: str = "none"
    # extra noise stddev used by the add_noise shift
    shift_noise_stddev: float = 0.2

    def __post_init__(self):
        self.shape_kinds = tuple(self.shape_kinds)
        if not 0 < self.max_disparity < self.width:
            raise ValueError(f"max_disparity must be in (0, width), got {self.max_disparity}")
        if not 0 < self.dot_density <= 1:
            raise ValueError(f"dot_density must be in (0, 1], got {self.dot_density}")
        if self.noise_stddev < 0:
            raise ValueError("noise_stddev must be >= 0")
        if self.domain_shift not in DOMAIN_SHIFTS:
            raise ValueError(f"unknown domain shift {self.domain_shift!r}")
        if not 0 <= self.min_shapes <= self.max_shapes:
            raise ValueError("need 0 <= min_shapes <= max_shapes")
        if self.max_shapes + 1 > self.max_disparity:
            raise ValueError("not enough distinct disparities for the requested shapes")
        if not set(self.shape_kinds) <= set(SHAPE_KINDS) or not self.shape_kinds:
            raise ValueError(f"shape kinds must be a non-empty subset of {SHAPE_KINDS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape_kinds"] = list(self.shape_kinds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthParams":
        return cls(**d)


def _texture(shape, p: SynthParams, rng: np.random.Generator) -> np.ndarray:
    h, w = shape
    if p.domain_shift == "texture_swap":
        # smooth low-frequency grey levels instead of sparse high-frequency dots
        x = gaussian_filter(rng.random((h, w)), TEXTURE_SWAP_SIGMA)
        x = (x - x.min()) / max(x.max() - x.min(), 1e-12)
        return np.round(x * 255.0) / 255.0
    dots = rng.random((h, w)) < p.dot_density
    values = rng.integers(64, 256, size=(h, w)) / 255.0
    return np.where(dots, values, 0.0)


def _disparity_layout(p: SynthParams, rng: np.random.Generator) -> np.ndarray:
    h, w = p.height, p.width
    n_shapes = int(rng.integers(p.min_shapes, p.max_shapes + 1))
    levels = np.sort(rng.choice(p.max_disparity, size=n_shapes + 1, replace=False))
    disp = np.full((h, w), levels[0], dtype=np.float64)
    yy, xx = np.mgrid[0:h, 0:w]
    for level in levels[1:]:
        kind = p.shape_kinds[int(rng.integers(len(p.shape_kinds)))]
        sh = int(rng.integers(max(2, h // 6), max(3, h // 2) + 1))
        sw = int(rng.integers(max(2, w // 6), max(3, w // 2) + 1))
        y0 = int(rng.integers(0, h - sh + 1))
        x0 = int(rng.integers(0, w - sw + 1))
        if kind == "rectangle":
            inside = (yy >= y0) & (yy < y0 + sh) & (xx >= x0) & (xx < x0 + sw)
        else:
            cy, cx = y0 + (sh - 1) / 2, x0 + (sw - 1) / 2
            inside = ((yy - cy) / (sh / 2)) ** 2 + ((xx - cx) / (sw / 2)) ** 2 <= 1.0
        disp[inside] = level
    return disp


def synth_stereogram(p: SynthParams, rng: Optional[np.random.Generator] = None, name: str = "") -> StereoSample:
    """Generate a random-dot stereo pair with exact ground-truth disparity.

    The right view is the left view forward-warped by the disparity with a
    z-buffer (larger disparity wins). Right pixels nobody maps to receive
    fresh texture; left pixels that leave the image or are hidden in the
    right view are marked invalid.
    """
    rng = rng if rng is not None else np.random.default_rng()
    h, w = p.height, p.width
    gt = _disparity_layout(p, rng)
    left = _texture((h, w), p, rng)
    right = _texture((h, w), p, rng)
    owner = np.full((h, w), -1, dtype=np.int64)
    ys, xs = np.mgrid[0:h, 0:w]
    target = xs - gt.astype(np.int64)
    for level in np.unique(gt):
        sel = (gt == level) & (target >= 0)
        right[ys[sel], target[sel]] = left[sel]
        owner[ys[sel], target[sel]] = xs[sel]
    valid = np.zeros((h, w), dtype=bool)
    inb = target >= 0
    valid[inb] = owner[ys[inb], target[inb]] == xs[inb]

    if p.noise_stddev > 0:
        left = left + rng.normal(0.0, p.noise_stddev, left.shape)
        right = right + rng.normal(0.0, p.noise_stddev, right.shape)
    left, right = apply_domain_shift(left, right, p, rng)
    return StereoSample(left.astype(np.float32), right.astype(np.float32), gt, valid, name)


def apply_domain_shift(left, right, p: SynthParams, rng):
    """Photometric shifts applied after generation (texture_swap acts earlier)."""
    if p.domain_shift == "invert_contrast":
        return 1.0 - left, 1.0 - right
    if p.domain_shift == "add_noise":
        return (
            left + rng.normal(0.0, p.shift_noise_stddev, left.shape),
            right + rng.normal(0.0, p.shift_noise_stddev, right.shape),
        )
    return left, right


def synth_dataset(p: SynthParams, count: int, seed: int) -> list[StereoSample]:
    children = np.random.SeedSequence(seed).spawn(count)
    return [synth_stereogram(p, np.random.default_rng(c), name=f"{i:06d}") for i, c in enumerate(children)]


# on-disk datasets

DATASET_KINDS = ("sceneflow_pfm", "kitti_png", "synthetic")


@dataclass
class DatasetSpec:
    kind: str = "synthetic"
    root: Optional[str] = None
    split: str = "train"
    synth: Optional[dict] = None
    count: int = 500
    seed: int = 0
    # Middlebury-style downsampling factor applied at load time
    downsample: int = 1

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise DataError(f"unknown dataset kind {self.kind!r}")
        if self.split not in ("train", "val", "test"):
            raise DataError(f"unknown split {self.split!r}")
        if self.kind != "synthetic":
            if self.root is None or not Path(self.root).is_dir():
                raise DataError(f"dataset root {self.root!r} does not exist")


# directory name candidates for (left, right, disparity)
_LAYOUTS = (
    ("left", "right", "disparity"),
    ("image_2", "image_3", "disp_occ_0"),
    ("image_2", "image_3", "disp_noc_0"),
)


def _stems(directory: Path, suffixes) -> dict[str, Path]:
    return {f.stem: f for f in sorted(directory.iterdir()) if f.suffix.lower() in suffixes}


def find_pairs(root) -> list[tuple[str, Path, Path, Optional[Path]]]:
    """Match ``left/right/disparity`` files by filename stem under ``root``.

    Recognizes the plain ``left/ right/ disparity/`` layout written by
    ``synth`` and the KITTI ``image_2/ image_3/ disp_occ_0/`` layout.
    """
    root = Path(root)
    for lname, rname, dname in _LAYOUTS:
        ldir, rdir, ddir = root / lname, root / rname, root / dname
        if not (ldir.is_dir() and rdir.is_dir()):
            continue
        lefts = _stems(ldir, IMAGE_SUFFIXES)
        rights = _stems(rdir, IMAGE_SUFFIXES)
        disps = _stems(ddir, (".pfm", ".png")) if ddir.is_dir() else {}
        out = []
        for stem, lp in lefts.items():
            if stem not in rights:
                logger.warning("no right image for %s", lp)
                continue
            out.append((stem, lp, rights[stem], disps.get(stem)))
        return out
    raise DataError(f"{root}: no left/right image directories found")


def load_sample(stem, left_path, right_path, disp_path=None) -> StereoSample:
    gt = mask = None
    if disp_path is not None:
        gt, mask = load_disparity(disp_path)
    return StereoSample(load_image(left_path), load_image(right_path), gt, mask, stem)


def load_dataset(spec: DatasetSpec) -> list[StereoSample]:
    if spec.kind == "synthetic":
        params = SynthParams.from_dict(spec.synth or {})
        samples = synth_dataset(params, spec.count, spec.seed)
    else:
        root = Path(spec.root)
        if (root / spec.split).is_dir():
            root = root / spec.split
        samples = [load_sample(*entry) for entry in find_pairs(root)]
    if spec.downsample > 1:
        samples = [downsample_sample(s, spec.downsample) for s in samples]
    if not samples:
        raise DataError(f"dataset {spec.kind} at {spec.root!r} ({spec.split}) is empty")
    return samples


def write_sample(out_dir, sample: StereoSample) -> None:
    """Write a sample in the ``left/ right/ disparity/`` PNG + PFM layout.

    Invalid ground-truth pixels are stored as +inf in the PFM.
    """
    out = Path(out_dir)
    for sub in ("left", "right", "disparity"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    write_image(out / "left" / f"{sample.name}.png", sample.left)
    write_image(out / "right" / f"{sample.name}.png", sample.right)
    if sample.gt_disparity is not None:
        disp = np.where(sample.valid_mask, sample.gt_disparity, np.inf)
        write_pfm(out / "disparity" / f"{sample.name}.pfm", disp)
