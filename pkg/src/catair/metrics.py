"""PSNR / SSIM and manifest-level evaluation."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage

from ._validation import to_numpy, to_tensor
from .degrade import DatasetManifest, load_manifest


def psnr(a, b) -> float:
    """``10 log10(1 / MSE)`` on ``[0, 1]`` images; ``inf`` for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def ssim(a, b, sigma=1.5, k1=0.01, k2=0.03) -> float:
    """Gaussian-window SSIM (11x11, sigma 1.5), per channel then averaged.

    Borders within the window radius are excluded from the mean.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    c1, c2 = k1 ** 2, k2 ** 2
    truncate = 3.5
    radius = int(truncate * sigma + 0.5)
    blur = lambda x: ndimage.gaussian_filter(x, sigma, truncate=truncate)
    scores = []
    for ch in range(a.shape[-1]):
        x, y = a[..., ch], b[..., ch]
        mx, my = blur(x), blur(y)
        vx = blur(x * x) - mx * mx
        vy = blur(y * y) - my * my
        cov = blur(x * y) - mx * my
        s = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
        crop = s[radius:-radius or None, radius:-radius or None]
        scores.append(crop.mean() if crop.size else s.mean())
    return float(np.mean(scores))


@dataclass
class TaskScore:
    psnr_mean: float
    ssim_mean: float
    count: int
    degraded_psnr_mean: float = float("nan")


@dataclass
class EvalResult:
    tasks: dict = field(default_factory=dict)

    @property
    def psnr_mean(self):
        return float(np.mean([t.psnr_mean for t in self.tasks.values()]))

    @property
    def ssim_mean(self):
        return float(np.mean([t.ssim_mean for t in self.tasks.values()]))

    def to_dict(self):
        out = {name: vars(score) for name, score in self.tasks.items()}
        return {"tasks": out, "psnr_mean": self.psnr_mean, "ssim_mean": self.ssim_mean}

    def to_json(self, **kw):
        return json.dumps(_finite_or_str(self.to_dict()), **kw)


def _finite_or_str(obj):
    if isinstance(obj, dict):
        return {k: _finite_or_str(v) for k, v in obj.items()}
    if isinstance(obj, float) and not math.isfinite(obj):
        return "inf" if obj > 0 else ("-inf" if obj < 0 else "nan")
    return obj


@torch.no_grad()
def restore(model, degraded, gamma=None):
    """Run inference on one ``(H, W, 3)`` image; returns the clamped float32 result."""
    model.eval()
    out = model(to_tensor(np.asarray(degraded, np.float32)[None]), gamma=gamma, mode="infer")
    return np.clip(to_numpy(out.restored)[0], 0.0, 1.0)


def evaluate(model, data, gamma=None) -> EvalResult:
    """Per-task mean PSNR/SSIM of ``model`` restorations against the clean images."""
    if isinstance(data, str) or hasattr(data, "joinpath"):
        data = load_manifest(data)
    if isinstance(data, DatasetManifest):
        items = [(task, deg, clean) for _, task, clean, deg in data.pairs()]
    else:
        items = list(data)
    if not items:
        raise ValueError("cannot evaluate an empty manifest")
    acc = defaultdict(lambda: ([], [], []))
    for task, deg, clean in items:
        restored = restore(model, deg, gamma)
        p, s, d = acc[task]
        p.append(psnr(restored, clean))
        s.append(ssim(restored, clean))
        d.append(psnr(deg, clean))
    result = EvalResult()
    for task, (p, s, d) in acc.items():
        result.tasks[task] = TaskScore(float(np.mean(p)), float(np.mean(s)), len(p), float(np.mean(d)))
    return result
