"""Synthetic degradation generators and the on-disk paired dataset format.

Every generator is a pure function of ``(clean, params, seed)``. Images are
float arrays of shape ``(H, W, 3)`` in ``[0, 1]``; noise is added in continuous
space and quantization to 8 bits happens once, when pairs are written.
"""

from __future__ import annotations

import json
import math
import warnings
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

TASKS = ("denoise", "derain", "dehaze", "deblur", "lowlight")
STANDARD_SIGMAS = (15, 25, 50)


class NonStandardNoiseWarning(UserWarning):
    """Noise level outside the benchmark set {15, 25, 50}."""


@dataclass
class CleanImage:
    pixels: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        self.pixels = check_image(self.pixels)
        h, w = self.pixels.shape[:2]
        if h % 8 or w % 8:
            raise ValueError(f"clean image {h}x{w} is not a multiple of 8 in both dimensions")


@dataclass
class DegradedPair:
    clean: CleanImage
    degraded: np.ndarray
    task: str
    params: dict = field(default_factory=dict)


@dataclass
class DatasetManifest:
    root: Path
    entries: list
    seed: int
    counts: dict

    def pairs(self):
        """Yield ``(id, task, clean, degraded)`` with images re-read at 8-bit fidelity."""
        for e in self.entries:
            yield e["id"], e["task"], read_png(e["clean_path"]), read_png(e["degraded_path"])


def check_image(pixels) -> np.ndarray:
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 1:
        raise ValueError("image values must be finite and within [0, 1]")
    return arr


def _as_clean(clean) -> CleanImage:
    return clean if isinstance(clean, CleanImage) else CleanImage(clean)


def _rng(seed, source_id: str = "") -> np.random.Generator:
    # crc32 keeps per-image streams stable across processes (str hash is salted)
    return np.random.default_rng([int(seed), zlib.crc32(source_id.encode())])


def gen_noise(clean, sigma: float, seed: int = 0) -> DegradedPair:
    clean = _as_clean(clean)
    params = {"sigma": sigma}
    if sigma not in STANDARD_SIGMAS and sigma != 0:
        warnings.warn(f"sigma={sigma} is outside {STANDARD_SIGMAS}", NonStandardNoiseWarning, stacklevel=2)
        params["nonstandard"] = True
    noise = _rng(seed, clean.source_id).standard_normal(clean.pixels.shape) * (sigma / 255.0)
    degraded = np.clip(clean.pixels + noise, 0.0, 1.0)
    return DegradedPair(clean, degraded, "denoise", params)


def line_kernel(length: int, angle: float) -> np.ndarray:
    """Normalized linear motion kernel of ``length`` taps oriented at ``angle`` degrees.

    Taps are bilinearly splatted onto an odd-sized square grid.
    """
    length = int(length)
    if length < 1:
        raise ValueError("kernel length must be >= 1")
    size = length if length % 2 else length + 1
    kernel = np.zeros((size, size))
    c = size // 2
    theta = math.radians(angle)
    for t in np.linspace(-(length - 1) / 2, (length - 1) / 2, length):
        x = c + t * math.cos(theta)
        y = c - t * math.sin(theta)
        x0, y0 = math.floor(x), math.floor(y)
        fx, fy = x - x0, y - y0
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dx, wx in ((0, 1 - fx), (1, fx)):
                yy, xx = y0 + dy, x0 + dx
                if wy * wx > 0 and 0 <= yy < size and 0 <= xx < size:
                    kernel[yy, xx] += wy * wx
    return kernel / kernel.sum()


def rain_layer(shape, density: float, angle: float, seed: int = 0, source_id: str = "",
               length: int = 15, brightness: float = 0.8) -> np.ndarray:
    """Non-negative streak layer of shape ``(H, W)``: thresholded noise smeared along ``angle``."""
    if not 0.0 <= density <= 1.0:
        raise ValueError("density must lie in [0, 1]")
    h, w = shape[:2]
    if density == 0:
        return np.zeros((h, w))
    rng = _rng(seed, source_id)
    # at most 5% of pixels seed a streak
    seeds = (rng.random((h, w)) < 0.05 * density).astype(np.float64)
    seeds *= rng.uniform(0.5, 1.0, size=(h, w))
    streaks = ndimage.convolve(seeds, line_kernel(length, angle) * length, mode="wrap")
    return np.clip(streaks * brightness, 0.0, None)


def gen_rain(clean, density: float, angle: float = 70.0, seed: int = 0) -> DegradedPair:
    clean = _as_clean(clean)
    layer = rain_layer(clean.pixels.shape, density, angle, seed, clean.source_id)
    degraded = np.clip(clean.pixels + layer[..., None], 0.0, 1.0)
    return DegradedPair(clean, degraded, "derain", {"density": density, "angle": angle})


def gen_haze(clean, transmission: float, airlight: float = 1.0) -> DegradedPair:
    clean = _as_clean(clean)
    if not 0.0 <= transmission <= 1.0:
        raise ValueError("transmission must lie in [0, 1]")
    if not 0.0 <= airlight <= 1.0:
        raise ValueError("airlight must lie in [0, 1]")
    degraded = clean.pixels * transmission + airlight * (1.0 - transmission)
    return DegradedPair(clean, np.clip(degraded, 0.0, 1.0), "dehaze",
                        {"transmission": transmission, "airlight": airlight})


def gen_blur(clean, length: int, angle: float = 0.0) -> DegradedPair:
    clean = _as_clean(clean)
    kernel = line_kernel(length, angle)
    if kernel.shape == (1, 1):
        degraded = clean.pixels.copy()
    else:
        degraded = np.stack(
            [ndimage.convolve(clean.pixels[..., ch], kernel, mode="reflect") for ch in range(3)], axis=-1)
    return DegradedPair(clean, np.clip(degraded, 0.0, 1.0), "deblur", {"length": int(length), "angle": angle})


def gen_lowlight(clean, gamma: float, scale: float) -> DegradedPair:
    clean = _as_clean(clean)
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    if not 0.0 < scale <= 1.0:
        raise ValueError("scale must lie in (0, 1]")
    degraded = np.clip(scale * clean.pixels ** gamma, 0.0, 1.0)
    return DegradedPair(clean, degraded, "lowlight", {"gamma": gamma, "scale": scale})


def synth_clean(size, seed: int = 0, source_id: str = "") -> CleanImage:
    """Procedural clean image: smooth gradients, flat shapes and one textured region."""
    h, w = (size, size) if isinstance(size, int) else size
    rng = _rng(seed, "clean/" + source_id)
    yy, xx = np.mgrid[0:h, 0:w] / np.array([h, w])[:, None, None]
    img = np.empty((h, w, 3))
    for ch in range(3):
        a, b, c = rng.uniform(-0.4, 0.4, 3)
        img[..., ch] = 0.5 + a * xx + b * yy + 0.1 * np.sin(2 * np.pi * (c * 3 * xx + rng.uniform()))
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(0.1, 0.3) * min(h, w)
        colour = rng.uniform(0.1, 0.9, 3)
        if rng.random() < 0.5:
            mask = (yy * h - cy) ** 2 + (xx * w - cx) ** 2 < r ** 2
        else:
            mask = (abs(yy * h - cy) < r) & (abs(xx * w - cx) < r * rng.uniform(0.5, 1.5))
        img[mask] = colour
    # stripes on one quadrant so the router has something to find
    y0, x0 = rng.integers(0, h // 2), rng.integers(0, w // 2)
    period = rng.uniform(3, 6)
    stripes = 0.5 + 0.25 * np.sign(np.sin(2 * np.pi * (xx * w + yy * h) / period))
    img[y0:y0 + h // 2, x0:x0 + w // 2] *= stripes[y0:y0 + h // 2, x0:x0 + w // 2, None] + 0.25
    return CleanImage(np.clip(img, 0.0, 1.0), source_id)


def sample_degradation(clean: CleanImage, task: str, seed: int, index: int = 0) -> DegradedPair:
    """Apply ``task`` with parameters drawn deterministically from ``(seed, source_id)``."""
    rng = _rng(seed, "params/" + clean.source_id)
    if task == "denoise":
        return gen_noise(clean, STANDARD_SIGMAS[index % 3], seed)
    if task == "derain":
        return gen_rain(clean, float(rng.uniform(0.4, 0.8)), float(rng.uniform(60, 120)), seed)
    if task == "dehaze":
        return gen_haze(clean, float(rng.uniform(0.4, 0.7)), float(rng.uniform(0.7, 1.0)))
    if task == "deblur":
        return gen_blur(clean, int(rng.choice([5, 7, 9])), float(rng.uniform(0, 180)))
    if task == "lowlight":
        return gen_lowlight(clean, float(rng.uniform(1.5, 2.5)), float(rng.uniform(0.3, 0.6)))
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


def counts_from_weights(weights: dict, total: int) -> dict:
    """Split ``total`` items over tasks proportionally (largest-remainder rounding)."""
    if total < 0 or any(v < 0 for v in weights.values()):
        raise ValueError("counts and weights must be non-negative")
    norm = sum(weights.values())
    if norm <= 0:
        raise ValueError("weights must not all be zero")
    raw = {t: total * v / norm for t, v in weights.items()}
    counts = {t: int(math.floor(x)) for t, x in raw.items()}
    leftover = total - sum(counts.values())
    order = sorted(raw, key=lambda t: (-(raw[t] - counts[t]), list(raw).index(t)))
    for t in order[:leftover]:
        counts[t] += 1
    return counts


def quantize(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, pixels) -> None:
    path = Path(path)
    arr = pixels if pixels.dtype == np.uint8 else quantize(pixels)
    mode = "L" if arr.ndim == 2 else "RGB"
    try:
        Image.fromarray(arr, mode=mode).save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"failed to write {path}: {exc}") from exc


def read_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise OSError(f"failed to read {path}: {exc}") from exc


def build_dataset(root, counts: dict | None = None, size=64, seed: int = 0, *,
                  weights: dict | None = None, total: int | None = None,
                  workers: int = 1, prefix: str = "") -> DatasetManifest:
    """Generate paired PNGs under ``root`` and write ``manifest.jsonl``.

    Pass either explicit per-task ``counts`` or ``weights`` plus ``total`` (the
    rebalanced mix used when extending a model to new tasks).
    """
    if counts is None:
        if weights is None or total is None:
            raise ValueError("pass counts, or weights together with total")
        counts = counts_from_weights(weights, total)
    for task, n in counts.items():
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}")
        if n < 0:
            raise ValueError(f"negative count for {task!r}")

    root = Path(root)
    for sub in ("clean", "degraded"):
        (root / sub).mkdir(parents=True, exist_ok=True)

    jobs = [(task, i, f"{prefix}{task}_{i:04d}") for task, n in counts.items() for i in range(n)]

    def make(job):
        task, i, sid = job
        pair = sample_degradation(synth_clean(size, seed, sid), task, seed, i)
        write_png(root / "clean" / f"{sid}.png", pair.clean.pixels)
        write_png(root / "degraded" / f"{sid}.png", pair.degraded)
        return {"id": sid, "task": task, "params": pair.params}

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            records = list(pool.map(make, jobs))
    else:
        records = [make(j) for j in jobs]

    manifest_path = root / "manifest.jsonl"
    try:
        with open(manifest_path, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        with open(root / "dataset.json", "w") as fh:
            json.dump({"seed": seed, "size": size, "counts": counts}, fh, indent=2, sort_keys=True)
    except OSError as exc:
        raise OSError(f"failed to write {manifest_path}: {exc}") from exc
    return load_manifest(root)


def load_manifest(root) -> DatasetManifest:
    root = Path(root)
    path = root / "manifest.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    entries = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            rec["clean_path"] = root / "clean" / f"{rec['id']}.png"
            rec["degraded_path"] = root / "degraded" / f"{rec['id']}.png"
            entries.append(rec)
    meta = root / "dataset.json"
    seed, counts = 0, {}
    if meta.exists():
        info = json.loads(meta.read_text())
        seed = info.get("seed", 0)
    for e in entries:
        counts[e["task"]] = counts.get(e["task"], 0) + 1
    return DatasetManifest(root, entries, seed, counts)
