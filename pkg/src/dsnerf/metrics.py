"""Masked image metrics: PSNR and SSIM restricted to a projected bounding box."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
from scipy.ndimage import correlate1d
from scipy.spatial import ConvexHull, QhullError

from .errors import InvalidInputError
from .mesh import AABB, PosedMesh, mesh_aabb
from .render import Camera

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def projected_bbox_mask(camera: Camera, posed: PosedMesh | AABB) -> np.ndarray:
    """Pixels whose centre lies in the convex hull of the projected 3D box corners.

    A box straddling the camera plane has an unbounded projection, so the
    whole image is returned; a box fully behind the camera gives an empty mask.
    """
    box = posed if isinstance(posed, AABB) else mesh_aabb(posed)
    xy, z = camera.project(box.corners)
    shape = (camera.height, camera.width)
    if np.all(z <= 0):
        warnings.warn("bounding box is behind the camera", RuntimeWarning, stacklevel=2)
        return np.zeros(shape, dtype=bool)
    if np.any(z <= 0):
        return np.ones(shape, dtype=bool)
    centres = camera.pixel_grid() + 0.5
    try:
        hull = ConvexHull(xy)
    except QhullError:
        return np.zeros(shape, dtype=bool)
    eq = hull.equations
    inside = np.all(centres @ eq[:, :2].T + eq[:, 2] <= 1e-9, axis=1)
    return inside.reshape(shape)


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr_masked(a, b, mask) -> float:
    """``10 log10(1 / MSE)`` over masked pixels of images in [0, 1]; identical images give inf."""
    a, b = _check_pair(a, b)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape[:2]:
        raise InvalidInputError("mask does not match the image size")
    if not mask.any():
        raise InvalidInputError("empty evaluation mask")
    mse = float(np.mean((a[mask] - b[mask]) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter(img, g):
    # separable Gaussian; only windows fully inside the image are used later
    out = correlate1d(img, g, axis=0, mode="constant")
    return correlate1d(out, g, axis=1, mode="constant")


def ssim_map(a, b) -> np.ndarray:
    """Per-pixel SSIM (H, W), averaged over channels; NaN where the window leaves the image."""
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    H, W = a.shape[:2]
    if H < SSIM_WINDOW or W < SSIM_WINDOW:
        raise InvalidInputError("image smaller than the SSIM window")
    g = gaussian_window()
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter(x, g), _filter(y, g)
        sxx = _filter(x * x, g) - mx * mx
        syy = _filter(y * y, g) - my * my
        sxy = _filter(x * y, g) - mx * my
        num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
        den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
        vals.append(num / den)
    out = np.mean(vals, axis=0)
    r = SSIM_WINDOW // 2
    valid = np.zeros((H, W), dtype=bool)
    valid[r : H - r, r : W - r] = True
    return np.where(valid, out, np.nan)


def ssim(a, b, mask=None) -> float:
    """Mean SSIM over full windows whose centre lies in ``mask``."""
    m = ssim_map(a, b)
    valid = ~np.isnan(m)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != m.shape:
            raise InvalidInputError("mask does not match the image size")
        valid &= mask
    if not valid.any():
        raise InvalidInputError("no SSIM window is centred inside the mask")
    return float(np.clip(m[valid].mean(), -1.0, 1.0))


@dataclass
class EvalEntry:
    name: str
    psnr: float
    ssim: float
    coverage: float

    def to_json(self) -> dict:
        return {"name": self.name, "psnr": _encode(self.psnr), "ssim": self.ssim, "coverage": self.coverage}


def _encode(x: float):
    return "inf" if math.isinf(x) else x


@dataclass
class EvalReport:
    entries: list[EvalEntry] = field(default_factory=list)

    def add(self, name: str, pred, target, mask) -> EvalEntry:
        e = EvalEntry(name, psnr_masked(pred, target, mask), ssim(pred, target, mask), float(np.mean(mask)))
        self.entries.append(e)
        return e

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([e.psnr for e in self.entries])) if self.entries else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([e.ssim for e in self.entries])) if self.entries else math.nan

    def to_json(self) -> dict:
        return {
            "version": 1,
            "entries": [e.to_json() for e in self.entries],
            "aggregate": {
                "psnr": _encode(self.mean_psnr),
                "ssim": self.mean_ssim,
                "coverage": float(np.mean([e.coverage for e in self.entries])) if self.entries else 0.0,
                "count": len(self.entries),
            },
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1)


def report_schema() -> dict:
    return json.loads(resources.files("dsnerf").joinpath("schemas/eval_report.schema.json").read_text())
