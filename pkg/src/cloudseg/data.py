"""Synthetic cloud scenes, raster IO, and non-overlapping patch handling.

Scene synthesis runs on a counter-based SplitMix64 generator (constants
0x9E3779B97F4A7C15, 0xBF58476D1CE4E5B9, 0x94D049BB133111EB) so fixtures are
bit-identical across platforms. Rasters use a minimal single-band binary
format (magic "CTFR", float32 little-endian row-major); masks are 8-bit
binary PGM (P5, values 0/255). A JSON manifest ties the per-band files and
the mask together.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

RASTER_MAGIC = b"CTFR"
_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


class PortableRng:
    """Deterministic uniform floats in [0, 1) from SplitMix64 as a counter hash."""

    def __init__(self, seed: int):
        self._seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self._counter = 0

    def uniforms(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        z = (self._seed + idx * _GOLDEN) & _M64
        z = ((z ^ (z >> np.uint64(30))) * _MIX1) & _M64
        z = ((z ^ (z >> np.uint64(27))) * _MIX2) & _M64
        z = z ^ (z >> np.uint64(31))
        return ((z >> np.uint64(11)).astype(np.float64)) * (2.0 ** -53)


@dataclass
class Scene:
    """Multi-band image in [0,1] with a binary cloud mask."""

    bands: np.ndarray  # (B, H, W) float32
    mask: np.ndarray   # (H, W) uint8 in {0, 1}
    id: str

    def __post_init__(self):
        if self.bands.ndim != 3 or self.mask.ndim != 2:
            raise ValueError(f"scene arrays misshaped: bands {self.bands.shape}, mask {self.mask.shape}")
        if self.bands.shape[1:] != self.mask.shape:
            raise ValueError(f"bands {self.bands.shape[1:]} and mask {self.mask.shape} disagree")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError("scene mask contains non-binary values")


@dataclass
class Patch:
    scene_id: str
    row: int
    col: int
    bands: np.ndarray
    mask: np.ndarray


@dataclass
class PatchSet:
    patches: list[Patch]
    patch_size: int
    scene_shape: tuple[int, int]
    padded_shape: tuple[int, int]


# -- synthesis ---------------------------------------------------------------


def _value_noise(rng: PortableRng, size: int, cells: int) -> np.ndarray:
    """Bilinearly interpolated random grid, values in [0, 1)."""
    grid = rng.uniforms((cells + 1) * (cells + 1)).reshape(cells + 1, cells + 1)
    coords = np.arange(size) * (cells / size)
    i0 = np.floor(coords).astype(int)
    t = coords - i0
    i1 = np.minimum(i0 + 1, cells)
    rows = grid[i0][:, i1] * t[None, :] + grid[i0][:, i0] * (1 - t[None, :])
    upper = grid[i1][:, i1] * t[None, :] + grid[i1][:, i0] * (1 - t[None, :])
    return rows * (1 - t[:, None]) + upper * t[:, None]


def _fractal_noise(rng: PortableRng, size: int, base_cells: int, octaves: int = 3) -> np.ndarray:
    total = np.zeros((size, size))
    amp, norm = 1.0, 0.0
    cells = base_cells
    for _ in range(octaves):
        cells = min(cells, size)
        total += amp * _value_noise(rng, size, cells)
        norm += amp
        amp *= 0.5
        cells *= 2
    return total / norm


def synth_scene(seed: int, size: int = 384, bands: int = 4, cloud_density: float = 0.4,
                texture_level: float = 0.5, scene_id: str | None = None) -> Scene:
    """Deterministic scene: smooth background + band-correlated clutter + bright
    soft-edged cloud blobs whose support is the mask."""
    if not 0.0 <= cloud_density <= 1.0:
        raise ValueError(f"cloud_density must lie in [0, 1], got {cloud_density}")
    rng = PortableRng(seed)

    shade = _fractal_noise(rng, size, 4)                     # shared illumination
    texture = _fractal_noise(rng, size, max(4, size // 8), octaves=2)
    band_stack = []
    for b in range(bands):
        tint = 0.15 + 0.5 * rng.uniforms(1)[0]
        jitter = _value_noise(rng, size, max(2, size // 16))
        band = 0.18 + 0.30 * shade * tint + texture_level * 0.22 * (0.6 * texture + 0.4 * jitter)
        band_stack.append(band)

    field = _fractal_noise(rng, size, 4)
    if cloud_density <= 0.0:
        mask = np.zeros((size, size), dtype=np.uint8)
        alpha = np.zeros((size, size))
    elif cloud_density >= 1.0:
        mask = np.ones((size, size), dtype=np.uint8)
        alpha = np.ones((size, size))
    else:
        thr = float(np.quantile(field, 1.0 - cloud_density))
        mask = (field >= thr).astype(np.uint8)
        soft = np.clip((field - thr) / 0.08 + 0.35, 0.0, 1.0)
        alpha = np.where(mask, np.maximum(soft, 0.6), np.clip(soft - 0.35, 0.0, 0.12))

    out = np.stack([np.clip(b + 0.55 * alpha, 0.0, 1.0) for b in band_stack])
    return Scene(bands=out.astype(np.float32), mask=mask,
                 id=scene_id if scene_id is not None else f"synth-{seed}")


# -- cropping / stitching ----------------------------------------------------


def _pad_to_multiple(arr: np.ndarray, multiple: int) -> np.ndarray:
    """Reflect-pad the trailing two axes up to the next multiple (bottom/right)."""
    pads = []
    for axis in (arr.ndim - 2, arr.ndim - 1):
        size = arr.shape[axis]
        target = ((size + multiple - 1) // multiple) * multiple
        pads.append(target - size)
    for axis, pad in zip((arr.ndim - 2, arr.ndim - 1), pads):
        while pad > 0:
            step = min(pad, arr.shape[axis] - 1)
            width = [(0, 0)] * arr.ndim
            if step == 0:
                width[axis] = (0, pad)
                arr = np.pad(arr, width, mode="edge")
                break
            width[axis] = (0, step)
            arr = np.pad(arr, width, mode="reflect")
            pad -= step
    return arr


def crop(scene: Scene, patch_size: int) -> PatchSet:
    """Tile the (padded) scene into non-overlapping patches."""
    if patch_size % 16:
        raise ValueError(f"patch_size must be divisible by 16, got {patch_size}")
    bands = _pad_to_multiple(scene.bands, patch_size)
    mask = _pad_to_multiple(scene.mask, patch_size)
    ph, pw = bands.shape[1:]
    patches = []
    for r in range(0, ph, patch_size):
        for c in range(0, pw, patch_size):
            patches.append(Patch(scene.id, r // patch_size, c // patch_size,
                                 bands[:, r:r + patch_size, c:c + patch_size].copy(),
                                 mask[r:r + patch_size, c:c + patch_size].copy()))
    return PatchSet(patches, patch_size, scene.mask.shape, (ph, pw))


def stitch(patchset: PatchSet, predictions: list[np.ndarray]) -> np.ndarray:
    """Inverse of :func:`crop`: reassemble predictions and trim the padding."""
    if len(predictions) != len(patchset.patches):
        raise ValueError(f"{len(predictions)} predictions for {len(patchset.patches)} patches")
    ph, pw = patchset.padded_shape
    s = patchset.patch_size
    full = np.zeros((ph, pw), dtype=np.asarray(predictions[0]).dtype)
    for patch, pred in zip(patchset.patches, predictions):
        pred = np.asarray(pred)
        if pred.shape != (s, s):
            raise ValueError(f"prediction shape {pred.shape} != patch {s}x{s}")
        full[patch.row * s:(patch.row + 1) * s, patch.col * s:(patch.col + 1) * s] = pred
    h, w = patchset.scene_shape
    return full[:h, :w]


# -- raster / mask IO --------------------------------------------------------


def write_raster(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError(f"raster must be 2-D, got {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(RASTER_MAGIC)
        fh.write(struct.pack("<BII", 0, arr.shape[0], arr.shape[1]))
        fh.write(arr.astype("<f4").tobytes())


def read_raster(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != RASTER_MAGIC:
            raise ValueError(f"{path}: not a raster file (bad magic)")
        tag, h, w = struct.unpack("<BII", fh.read(9))
        if tag != 0:
            raise ValueError(f"{path}: unknown raster dtype tag {tag}")
        data = np.frombuffer(fh.read(4 * h * w), dtype="<f4")
        if data.size != h * w:
            raise ValueError(f"{path}: truncated raster payload")
    return data.reshape(h, w).astype(np.float32)


def write_mask_pgm(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask must be binary {0, 1}")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{mask.shape[1]} {mask.shape[0]}\n255\n".encode("ascii"))
        fh.write((mask.astype(np.uint8) * 255).tobytes())


def read_mask_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM file")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: expected maxval 255, got {maxval}")
    data = np.frombuffer(blob[pos + 1: pos + 1 + w * h], dtype=np.uint8)
    if data.size != w * h:
        raise ValueError(f"{path}: truncated PGM payload")
    values = set(np.unique(data).tolist())
    if not values <= {0, 255}:
        raise ValueError(f"{path}: mask values must be 0 or 255, found {sorted(values)[:5]}")
    return (data.reshape(h, w) > 0).astype(np.uint8)


def write_overlay_ppm(path, rgb: np.ndarray) -> None:
    """3-channel byte image (H, W, 3) as binary PPM."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


# -- manifests ---------------------------------------------------------------


def save_scene(scene: Scene, directory) -> Path:
    """Write band rasters, mask and manifest into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    band_files = []
    for i, band in enumerate(scene.bands):
        name = f"band_{i:02d}.ctfr"
        write_raster(directory / name, band)
        band_files.append(name)
    write_mask_pgm(directory / "mask.pgm", scene.mask)
    manifest = {"id": scene.id, "band_files": band_files, "mask_file": "mask.pgm",
                "normalization": "given",
                "band_ranges": [[0.0, 1.0] for _ in band_files]}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_scene(manifest_path) -> Scene:
    """Read a scene manifest; band values are normalised into [0, 1]."""
    manifest_path = Path(manifest_path)
    spec = json.loads(manifest_path.read_text())
    base = manifest_path.parent
    for key in ("id", "band_files", "mask_file"):
        if key not in spec:
            raise ValueError(f"{manifest_path}: manifest missing '{key}'")
    bands = []
    shape = None
    for name in spec["band_files"]:
        path = base / name
        if not path.exists():
            raise FileNotFoundError(f"{manifest_path}: band file missing: {path}")
        band = read_raster(path)
        if shape is None:
            shape = band.shape
        elif band.shape != shape:
            raise ValueError(f"{manifest_path}: band '{name}' shape {band.shape} != {shape}")
        bands.append(band)
    mask = read_mask_pgm(base / spec["mask_file"])
    if mask.shape != shape:
        raise ValueError(f"{manifest_path}: mask shape {mask.shape} != bands {shape}")

    mode = spec.get("normalization", "minmax")
    ranges = spec.get("band_ranges")
    norm = []
    for i, band in enumerate(bands):
        if mode == "given":
            lo, hi = ranges[i]
        elif mode == "minmax":
            lo, hi = float(band.min()), float(band.max())
        else:
            raise ValueError(f"{manifest_path}: unknown normalization '{mode}'")
        span = hi - lo
        norm.append(np.zeros_like(band) if span == 0 else np.clip((band - lo) / span, 0.0, 1.0))
    return Scene(bands=np.stack(norm).astype(np.float32), mask=mask, id=spec["id"])
