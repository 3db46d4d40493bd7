"""Raster I/O, tiling/stitching, downsampling, augmentation, and synthetic
dataset generation.

File formats are binary PPM (P6) for RGB images and PGM (P5) for masks,
maxval 255, which round-trip bit-exactly with no external dependencies.
A dataset directory holds images/*.ppm, masks/*.pgm (plus images_t2/*.ppm
for change detection) and newline-separated id manifests train.txt /
val.txt / test.txt.
"""

from __future__ import annotations

import dataclasses
import math
from pathlib import Path

import numpy as np

from .errors import DataError

MASK_FG = 255


# ---------------------------------------------------------------------------
# PPM / PGM


def _read_header(buf, path):
    # magic, width, height, maxval separated by whitespace; '#' comments
    fields = []
    pos = 0
    while len(fields) < 4:
        if pos >= len(buf):
            raise DataError(f"{path}: truncated header")
        ch = buf[pos:pos + 1]
        if ch == b"#":
            nl = buf.find(b"\n", pos)
            pos = len(buf) if nl < 0 else nl + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(buf) and not buf[end:end + 1].isspace():
                end += 1
            fields.append(buf[pos:end])
            pos = end
    return fields, pos + 1  # single whitespace byte after maxval


def read_raster(path):
    """Load a P6 (returns [H, W, 3] uint8) or P5 (returns [H, W] uint8) file."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    buf = path.read_bytes()
    fields, offset = _read_header(buf, path)
    magic = fields[0]
    if magic not in (b"P5", b"P6"):
        raise DataError(f"{path}: bad magic {magic!r} (expected P5 or P6)")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise DataError(f"{path}: non-numeric header fields {fields[1:]}") from None
    if maxval != 255:
        raise DataError(f"{path}: maxval must be 255, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    payload = buf[offset:offset + need]
    if len(payload) != need:
        raise DataError(f"{path}: truncated payload ({len(payload)} of {need} bytes)")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def write_raster(grid, path):
    """Write uint8 [H, W] as P5 or [H, W, 3] as P6."""
    grid = np.asarray(grid, dtype=np.uint8)
    if grid.ndim == 3 and grid.shape[2] == 3:
        magic = b"P6"
    elif grid.ndim == 2:
        magic = b"P5"
    else:
        raise DataError(f"write_raster: unsupported grid shape {grid.shape}")
    h, w = grid.shape[0], grid.shape[1]
    header = magic + f"\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + grid.tobytes())


def read_mask(path, strict=True):
    """Load a P5 mask; strict mode rejects any value outside {0, 255}."""
    grid = read_raster(path)
    if grid.ndim != 2:
        raise DataError(f"{path}: mask must be single-channel P5")
    if strict and not np.isin(grid, (0, MASK_FG)).all():
        bad = sorted(set(np.unique(grid)) - {0, MASK_FG})
        raise DataError(f"{path}: mask contains values outside {{0, 255}}: {bad}")
    return grid


# ---------------------------------------------------------------------------
# tiling


@dataclasses.dataclass
class TileSpec:
    patch_size: int
    overlap: int
    offsets: list  # (row, col) tile origins


def _axis_offsets(extent, patch, stride):
    offs = list(range(0, extent - patch + 1, stride))
    last = extent - patch
    if offs[-1] != last:
        offs.append(last)
    return offs


def plan_tiles(h, w, patch, overlap):
    """Offsets of overlapping patch x patch tiles covering every pixel.

    Stride is patch - overlap; the final offset on each axis is clamped to
    extent - patch so coverage stays complete when the stride does not
    divide evenly.
    """
    if patch > h or patch > w:
        raise DataError(f"plan_tiles: patch {patch} exceeds extents {h}x{w}")
    if not 0 <= overlap < patch:
        raise DataError(f"plan_tiles: overlap must be in [0, patch), got {overlap}")
    stride = patch - overlap
    rows = _axis_offsets(h, patch, stride)
    cols = _axis_offsets(w, patch, stride)
    return TileSpec(patch, overlap, [(r, c) for r in rows for c in cols])


def stitch(tiles, h, w):
    """Average overlapping logit tiles back into one [h, w] grid.

    ``tiles`` is a list of ((row, col), grid) pairs from a plan_tiles cover.
    """
    acc = np.zeros((h, w), dtype=np.float64)
    cnt = np.zeros((h, w), dtype=np.int64)
    for (r, c), grid in tiles:
        grid = np.asarray(grid)
        th, tw = grid.shape
        acc[r:r + th, c:c + tw] += grid
        cnt[r:r + th, c:c + tw] += 1
    if (cnt == 0).any():
        n = int((cnt == 0).sum())
        raise DataError(f"stitch: {n} pixels not covered by any tile")
    return acc / cnt


# ---------------------------------------------------------------------------
# downsampling


def downsample_raster(grid, ratio, is_mask=False):
    """Box-reduce by an integer ratio.

    Images use the box mean with round-half-up; masks use a majority vote
    with ties resolved to foreground (keeps thin structures alive).
    """
    if ratio == 1:
        return grid.copy()
    if ratio not in (2, 4):
        raise DataError(f"downsample_raster: ratio must be 1, 2 or 4, got {ratio}")
    h, w = grid.shape[0], grid.shape[1]
    if h % ratio or w % ratio:
        raise DataError(f"downsample_raster: extents {h}x{w} not divisible by {ratio}")
    cells = ratio * ratio
    if is_mask:
        fg = (grid == MASK_FG).reshape(h // ratio, ratio, w // ratio, ratio)
        votes = fg.sum(axis=(1, 3))
        return np.where(2 * votes >= cells, MASK_FG, 0).astype(np.uint8)
    shaped = grid.reshape((h // ratio, ratio, w // ratio, ratio) + grid.shape[2:])
    total = shaped.sum(axis=(1, 3), dtype=np.int64)
    return ((total + cells // 2) // cells).astype(np.uint8)


# ---------------------------------------------------------------------------
# samples and augmentation


@dataclasses.dataclass
class RasterSample:
    id: str
    image: np.ndarray  # [H, W, 3] uint8
    mask: np.ndarray  # [H, W] uint8, values in {0, 255}
    image_t2: np.ndarray = None  # second epoch for change detection


def apply_transforms(sample, flip=False, transpose=False, swap=False):
    """Apply the given geometric transforms identically to image(s) and mask.

    flip mirrors columns (horizontal flip); transpose exchanges the two
    spatial axes; swap exchanges the two epochs of a change-detection pair.
    """

    def geo(arr):
        if arr is None:
            return None
        if flip:
            arr = arr[:, ::-1]
        if transpose:
            arr = arr.swapaxes(0, 1)
        return np.ascontiguousarray(arr)

    img, img2 = sample.image, sample.image_t2
    if swap and img2 is not None:
        img, img2 = img2, img
    return RasterSample(sample.id, geo(img), geo(sample.mask), geo(img2))


def augment(sample, seed, task="segmentation"):
    """Independent p=0.5 flip and transpose; change detection also swaps
    the two epochs with p=0.5. Deterministic given the seed."""
    rng = np.random.default_rng(seed)
    flip = rng.random() < 0.5
    transpose = rng.random() < 0.5
    swap = task == "change_detection" and rng.random() < 0.5
    return apply_transforms(sample, flip, transpose, swap)


# ---------------------------------------------------------------------------
# synthetic datasets

_STRIP_ANGLES = (0, 45, 90, 135)
_FG_FRACTION = (0.02, 0.40)
_BG_MEAN, _BG_STD = 96.0, 14.0
_STRIP_MEAN, _STRIP_STD = 180.0, 14.0


def _strip_mask(h, w, angle, origin, width):
    """Boolean cover of one full-span strip at the given angle."""
    ii, jj = np.mgrid[0:h, 0:w]
    if angle == 0:
        return (ii >= origin) & (ii < origin + width)
    if angle == 90:
        return (jj >= origin) & (jj < origin + width)
    if angle == 45:
        return np.abs((ii - jj) - origin) <= width - 1
    if angle == 135:
        return np.abs((ii + jj) - origin) <= width - 1
    raise ValueError(f"unsupported strip angle {angle}")


def _draw_strips(rng, h, w, angles, n_strips):
    strips = []
    for _ in range(n_strips):
        angle = int(angles[rng.integers(len(angles))])
        width = int(rng.integers(2, 5))
        if angle == 0:
            origin = int(rng.integers(0, max(1, h - width)))
        elif angle == 90:
            origin = int(rng.integers(0, max(1, w - width)))
        elif angle == 45:
            origin = int(rng.integers(-(h - 1) + width, w - width))
        else:
            origin = int(rng.integers(width, h + w - 1 - width))
        strips.append((angle, origin, width))
    return strips


def _render(rng, h, w, strips, dash_keep):
    """Gray-textured background with brighter strip bands; returns
    (uint8 RGB image, boolean strip cover)."""
    base = rng.normal(_BG_MEAN, _BG_STD, size=(h, w))
    cover = np.zeros((h, w), dtype=bool)
    painted = np.zeros((h, w), dtype=bool)
    for angle, origin, width in strips:
        m = _strip_mask(h, w, angle, origin, width)
        cover |= m
        if dash_keep < 1.0:
            m = m & (rng.random((h, w)) < dash_keep)
        painted |= m
    lum = np.where(painted, rng.normal(_STRIP_MEAN, _STRIP_STD, size=(h, w)), base)
    img = np.clip(lum[..., None] + rng.normal(0.0, 4.0, size=(h, w, 3)), 0, 255)
    return img.astype(np.uint8), cover


def _fraction_ok(mask):
    frac = mask.mean()
    return _FG_FRACTION[0] <= frac <= _FG_FRACTION[1]


def synth_segmentation(n, h, w, seed, angles=_STRIP_ANGLES, dash_keep=1.0,
                       id_prefix="seg"):
    """Oriented-strip segmentation set: 2-5 full-span strips per image on a
    Gaussian background, mask = strip cover. Rejection keeps the foreground
    fraction inside [0.02, 0.40]. Bit-identical for a fixed seed."""
    samples = []
    root = np.random.SeedSequence(seed)
    for i in range(n):
        seq = np.random.SeedSequence(entropy=root.entropy, spawn_key=(i,))
        rng = np.random.default_rng(seq)
        for _ in range(64):
            strips = _draw_strips(rng, h, w, angles, int(rng.integers(2, 6)))
            img, cover = _render(rng, h, w, strips, dash_keep)
            if _fraction_ok(cover):
                break
        else:
            raise DataError(f"synth_segmentation: rejection failed for sample {i}")
        mask = np.where(cover, MASK_FG, 0).astype(np.uint8)
        samples.append(RasterSample(f"{id_prefix}_{i:05d}", img, mask))
    return samples


def synth_change(n, h, w, seed, angles=_STRIP_ANGLES, dash_keep=1.0,
                 id_prefix="cd"):
    """Change pairs: both epochs share the background texture and a common
    strip subset; mask = symmetric difference of the two strip covers."""
    samples = []
    root = np.random.SeedSequence(seed)
    for i in range(n):
        seq = np.random.SeedSequence(entropy=root.entropy, spawn_key=(i,))
        rng = np.random.default_rng(seq)
        for _ in range(64):
            strips = _draw_strips(rng, h, w, angles, int(rng.integers(3, 6)))
            roles = rng.integers(0, 3, size=len(strips))  # 0 both, 1 t1-only, 2 t2-only
            if not ((roles == 1).any() or (roles == 2).any()):
                roles[0] = 1
            s1 = [s for s, r in zip(strips, roles) if r in (0, 1)]
            s2 = [s for s, r in zip(strips, roles) if r in (0, 2)]
            # render both epochs from one saved state so the background
            # texture and any shared strips come out pixel-identical
            state = rng.bit_generator.state
            img1, cover1 = _render(rng, h, w, s1, dash_keep)
            rng.bit_generator.state = state
            img2, cover2 = _render(rng, h, w, s2, dash_keep)
            change = cover1 ^ cover2
            if _fraction_ok(change):
                break
        else:
            raise DataError(f"synth_change: rejection failed for sample {i}")
        mask = np.where(change, MASK_FG, 0).astype(np.uint8)
        samples.append(RasterSample(f"{id_prefix}_{i:05d}", img1, mask, image_t2=img2))
    return samples


# ---------------------------------------------------------------------------
# dataset directory layout


def write_dataset(samples, root, splits=(0.7, 0.15, 0.15)):
    """Write samples under root in the standard layout with split manifests."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(exist_ok=True)
    is_cd = samples and samples[0].image_t2 is not None
    if is_cd:
        (root / "images_t2").mkdir(exist_ok=True)
    for s in samples:
        write_raster(s.image, root / "images" / f"{s.id}.ppm")
        write_raster(s.mask, root / "masks" / f"{s.id}.pgm")
        if is_cd:
            write_raster(s.image_t2, root / "images_t2" / f"{s.id}.ppm")
    ids = [s.id for s in samples]
    n_train = int(round(len(ids) * splits[0]))
    n_val = int(round(len(ids) * splits[1]))
    manifest = {
        "train.txt": ids[:n_train],
        "val.txt": ids[n_train:n_train + n_val],
        "test.txt": ids[n_train + n_val:],
    }
    for name, chunk in manifest.items():
        (root / name).write_text("".join(f"{i}\n" for i in chunk), encoding="utf-8")


def load_split(root, split, task="segmentation", strict_masks=True):
    """Read the samples listed in a split manifest."""
    root = Path(root)
    manifest = root / f"{split}.txt"
    if not manifest.exists():
        raise DataError(f"{manifest}: missing split manifest")
    ids = [line.strip() for line in manifest.read_text(encoding="utf-8").splitlines()
           if line.strip()]
    samples = []
    for sid in ids:
        img_path = root / "images" / f"{sid}.ppm"
        mask_path = root / "masks" / f"{sid}.pgm"
        try:
            img = read_raster(img_path)
            mask = read_mask(mask_path, strict=strict_masks)
            img2 = None
            if task == "change_detection":
                img2 = read_raster(root / "images_t2" / f"{sid}.ppm")
        except DataError as e:
            raise DataError(f"sample '{sid}': {e}") from None
        if img.shape[:2] != mask.shape:
            raise DataError(f"sample '{sid}': image {img.shape[:2]} vs mask {mask.shape}")
        samples.append(RasterSample(sid, img, mask, image_t2=img2))
    return samples
