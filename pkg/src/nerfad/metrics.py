"""Image quality and lip-sync metrics: PSNR, SSIM, LMD over a lip subset, AU accuracy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class MetricError(ValueError):
    pass


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    lmd: float
    au_acc: float
    n_frames: int

    def __post_init__(self):
        if self.ssim > 1.0 + 1e-12 or self.lmd < 0 or not 0.0 <= self.au_acc <= 1.0:
            raise MetricError(f"metric values out of range: {self}")


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = _pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(peak * peak / mse), PSNR_CAP))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # (H, W) -> (H-k+1, W-k+1) weighted window sums
    return np.einsum("ijkl,kl->ij", sliding_window_view(x, w.shape), w)


def ssim(a, b, data_range: float = 1.0) -> float:
    """Single-scale SSIM averaged over valid window positions and channels.

    Images are (H, W) or (H, W, C).
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.ndim != 3:
        raise MetricError("expected (H, W) or (H, W, C) images")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise MetricError(f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    w = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, w), _filter_valid(y, w)
        sxx = _filter_valid(x * x, w) - mx * mx
        syy = _filter_valid(y * y, w) - my * my
        sxy = _filter_valid(x * y, w) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def lmd(pred, gt, subset=None) -> float:
    """Mean Euclidean distance (pixels) between corresponding landmarks of the subset."""
    pred, gt = _pair(pred, gt)
    if pred.ndim < 2 or pred.shape[-1] != 2:
        raise MetricError("landmarks must be (..., N, 2)")
    if subset is not None:
        subset = np.asarray(subset, dtype=int)
        pred, gt = pred[..., subset, :], gt[..., subset, :]
    return float(np.mean(np.linalg.norm(pred - gt, axis=-1)))


def au_acc(pred, gt, threshold: float = 0.5) -> float:
    """Fraction of (frame, AU) pairs whose thresholded prediction matches the label."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise MetricError(f"AU shape mismatch: {pred.shape} vs {gt.shape}")
    return float(np.mean((pred >= threshold) == (gt >= threshold)))


# ---- lip landmark detector -------------------------------------------------

MOUTH_LEVEL = 0.5


def unmix(image, base, lip, cavity, tol: float = 0.04) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel least-squares fractions of lip and cavity colour over ``base``.

    Solves ``p = base + a*(lip-base) + c*(cavity-base)`` and clips to [0, 1].
    Pixels the three colours cannot explain (background, eyes) are faded out
    by their residual, reaching zero at ``tol``.
    """
    image = np.asarray(image, dtype=np.float64)
    base = np.asarray(base, dtype=np.float64)
    m = np.stack([np.asarray(lip) - base, np.asarray(cavity) - base], axis=1)  # (3, 2)
    coef = (image - base) @ np.linalg.pinv(m).T
    resid = np.linalg.norm(image - base - coef @ m.T, axis=-1)
    gate = np.clip(1.0 - resid / tol, 0.0, 1.0)
    return np.clip(coef[..., 0], 0.0, 1.0) * gate, np.clip(coef[..., 1], 0.0, 1.0) * gate


def _moments(weight: np.ndarray):
    total = weight.sum()
    if total <= 1e-9:
        return None
    h, w = weight.shape
    ys, xs = np.mgrid[0:h, 0:w] + 0.5
    cx = (weight * xs).sum() / total
    cy = (weight * ys).sum() / total
    sx = np.sqrt(max((weight * (xs - cx) ** 2).sum() / total, 0.0))
    sy = np.sqrt(max((weight * (ys - cy) ** 2).sum() / total, 0.0))
    return cx, cy, 2.0 * sx, 2.0 * sy


def detect_lip_landmarks(image, base, lip, cavity, n_outer: int) -> np.ndarray:
    """Fit ellipses to the mouth region of an (H, W, 3) image.

    The outer ring samples an ellipse fitted to lip+cavity at angles
    ``2*pi*k/n_outer``; four inner points sample the cavity ellipse at 0, 90,
    180 and 270 degrees.  A uniformly filled ellipse has variance a^2/4 along
    its axis, hence the factor 2 on the standard deviations.  A pixel counts
    as mouth (or cavity) when its unmixed fraction reaches ``MOUTH_LEVEL``.  Returns
    (n_outer + 4, 2) pixel coordinates.
    """
    a_lip, a_cav = unmix(image, base, lip, cavity)
    # binarise so faint speckle in rendered images cannot inflate the moments
    mouth = (a_lip + a_cav >= MOUTH_LEVEL).astype(np.float64)
    a_cav = (a_cav >= MOUTH_LEVEL).astype(np.float64)
    outer = _moments(mouth)
    h, w = a_lip.shape
    if outer is None:
        outer = (w / 2.0, h / 2.0, 0.0, 0.0)
    inner = _moments(a_cav)
    if inner is None:
        inner = (outer[0], outer[1], 0.0, 0.0)

    def ring(params, angles):
        cx, cy, ax, ay = params
        return np.stack([cx + ax * np.cos(angles), cy - ay * np.sin(angles)], axis=-1)

    outer_pts = ring(outer, 2.0 * np.pi * np.arange(n_outer) / n_outer)
    inner_pts = ring(inner, np.array([0.0, 0.5, 1.0, 1.5]) * np.pi)
    return np.concatenate([outer_pts, inner_pts])


def evaluate_frames(rendered, truth, pred_landmarks, gt_landmarks, pred_au, gt_au,
                    subset=None) -> tuple[list[dict], MetricReport]:
    """Per-frame metric rows plus the aggregate report."""
    if len(rendered) != len(truth):
        raise MetricError(f"frame count mismatch: {len(rendered)} vs {len(truth)}")
    rows = []
    for i in range(len(rendered)):
        rows.append({
            "frame": i,
            "psnr": psnr(rendered[i], truth[i]),
            "ssim": ssim(rendered[i], truth[i]),
            "lmd": lmd(pred_landmarks[i], gt_landmarks[i], subset),
            "au_acc": au_acc(pred_au[i], gt_au[i]),
        })
    n = len(rows)
    if n == 0:
        return rows, MetricReport(PSNR_CAP, 1.0, 0.0, 1.0, 0)
    report = MetricReport(
        psnr=float(np.mean([r["psnr"] for r in rows])),
        ssim=float(np.mean([r["ssim"] for r in rows])),
        lmd=float(np.mean([r["lmd"] for r in rows])),
        au_acc=au_acc(pred_au, gt_au),
        n_frames=n,
    )
    return rows, report
