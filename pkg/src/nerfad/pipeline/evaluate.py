"""Metric evaluation of rendered frames against the dataset."""

from __future__ import annotations

import csv
import io
import re
from pathlib import Path

import numpy as np

from .. import autodiff as ad
from .. import metrics
from ..synthdata import Dataset, crop, load_dataset, load_png
from .config import RunConfig
from .train import disentangle_nets_from, out_paths, require_checkpoint

FRAME_RE = re.compile(r"frame_(\d+)\.png$")


class EvaluationError(ValueError):
    pass


def lip_landmarks(dataset: Dataset, image: np.ndarray, frame: int) -> np.ndarray:
    """Detected lip landmarks (lip subset order) of an (H, W, 3) image of ``frame``."""
    ident = dataset.manifest["identities"][int(dataset.identity[frame])]
    pal = dataset.manifest["palette"]
    n_outer = len(dataset.lip_subset) - 4
    return metrics.detect_lip_landmarks(image, ident["albedo"], pal["lip"], pal["cavity"], n_outer)


def classify(dnets, dataset: Dataset, images: np.ndarray, frames) -> np.ndarray:
    """AU probabilities of the frozen classifier on the face crops of ``images``."""
    crops = np.stack([crop(img, dataset.crop_rects[f]) for img, f in zip(images, frames)])
    with ad.no_grad():
        return dnets.classifier(crops).data


def evaluate_images(dnets, dataset: Dataset, rendered: np.ndarray, frames) -> tuple[list[dict], metrics.MetricReport]:
    """Metrics of renders against ground truth.

    Lip landmarks come from the same detector on both sides; AU Acc compares
    the classifier's thresholded outputs on rendered and ground-truth crops.
    """
    frames = [int(f) for f in frames]
    if len(rendered) != len(frames):
        raise EvaluationError(f"frame count mismatch: {len(rendered)} renders for {len(frames)} frames")
    truth = dataset.images[frames]
    pred_lm = np.array([lip_landmarks(dataset, img, f) for img, f in zip(rendered, frames)])
    gt_lm = np.array([lip_landmarks(dataset, img, f) for img, f in zip(truth, frames)])
    pred_au = classify(dnets, dataset, rendered, frames)
    gt_au = (classify(dnets, dataset, truth, frames) >= 0.5).astype(np.float64)
    rows, report = metrics.evaluate_frames(rendered, truth, pred_lm, gt_lm, pred_au, gt_au)
    for r, f in zip(rows, frames):
        r["frame"] = f
    return rows, report


def format_metrics_csv(rows: list[dict], report: metrics.MetricReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ["psnr", "ssim", "lmd", "au_acc"]
    w.writerow(["frame"] + cols)
    for r in rows:
        w.writerow([r["frame"]] + [repr(float(r[c])) for c in cols])
    w.writerow(["mean"] + [repr(float(getattr(report, c))) for c in cols])
    return buf.getvalue()


def read_rendered(directory) -> tuple[list[int], np.ndarray]:
    directory = Path(directory)
    if not directory.is_dir():
        raise EvaluationError(f"no rendered frames directory at {directory}")
    found = sorted((int(m.group(1)), p) for p in directory.iterdir() if (m := FRAME_RE.search(p.name)))
    frames = [f for f, _ in found]
    images = np.array([load_png(p) for _, p in found])
    return frames, images


def evaluate(cfg: RunConfig, rendered_dir=None, frames=None) -> metrics.MetricReport:
    """Evaluate PNG renders; writes ``<out>/metrics.csv`` (per-frame rows plus a mean row)."""
    ds = load_dataset(cfg.data.path)
    dnets = disentangle_nets_from(require_checkpoint(cfg, "eval", "disentangle"))
    rendered_dir = Path(rendered_dir) if rendered_dir is not None else out_paths(cfg)["render"]
    found, images = read_rendered(rendered_dir)
    if frames is not None:
        frames = [int(f) for f in frames]
        if sorted(frames) != found:
            raise EvaluationError(f"frame count mismatch: {len(found)} rendered frames, {len(frames)} requested")
    frames = found
    if any(f >= len(ds) for f in frames):
        raise EvaluationError("rendered frame index beyond the dataset")
    rows, report = evaluate_images(dnets, ds, images, frames)
    out = out_paths(cfg)["metrics"]
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(format_metrics_csv(rows, report))
    return report
