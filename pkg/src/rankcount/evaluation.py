"""Patch-grid inference, counting metrics and ranking diagnostics."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .probe import ProbeModel
from .ranking import RankModel, batched_forward
from .synth import RenderedImage
from .validation import as_image_array, check_images


def patch_bounds(n: int, k: int) -> list[tuple[int, int]]:
    """[floor(i*n/k), floor((i+1)*n/k)) for i in 0..k-1."""
    return [((i * n) // k, ((i + 1) * n) // k) for i in range(k)]


def split_patches(image, k: int) -> list[RenderedImage]:
    """Cut an image into a k x k grid, row-major. Patch sizes differ by at
    most one pixel along each axis."""
    px = as_image_array(image)
    h, w = px.shape[:2]
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > h or k > w:
        raise ValueError(f"k={k} exceeds the image dimensions {h}x{w}")
    sid = image.source_id if isinstance(image, RenderedImage) else ""
    out = []
    for i, (r0, r1) in enumerate(patch_bounds(h, k)):
        for j, (c0, c1) in enumerate(patch_bounds(w, k)):
            out.append(RenderedImage(px[r0:r1, c0:c1], f"{sid}[{i},{j}]"))
    return out


def infer_image(probe: ProbeModel, image, k: int = 1) -> float:
    """Sum of clamped per-patch counts; each patch is resized to the model
    input size on its own."""
    patches = split_patches(image, k)
    x = check_images(patches, probe.input_size, resize=True)
    return float(np.maximum(probe.raw_counts(x), 0.0).sum())


@dataclass
class MetricsReport:
    """``mse`` is the root of the mean squared error (crowd-counting usage)."""

    mae: float
    mse: float
    n_images: int
    patch_k: int
    per_image: list = field(default_factory=list)
    model_digests: dict = field(default_factory=dict)
    config: Optional[dict] = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"{'id':<24}{'predicted':>12}{'truth':>10}{'error':>12}"]
        for r in self.per_image:
            lines.append(f"{r['id']:<24}{r['predicted']:>12.3f}{r['truth']:>10d}{r['error']:>12.3f}")
        lines.append(f"patch_k={self.patch_k}  n={self.n_images}  MAE={self.mae:.4f}  MSE={self.mse:.4f}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n")
        path.with_suffix(".txt").write_text(self.to_text())
        return path


def metrics_from_predictions(preds, truths, ids=None, patch_k: int = 1, **extra) -> MetricsReport:
    preds = np.asarray(preds, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if preds.shape != truths.shape or preds.ndim != 1 or len(preds) == 0:
        raise ValueError("need equal-length, non-empty prediction and truth vectors")
    err = preds - truths
    ids = ids if ids is not None else [str(i) for i in range(len(preds))]
    per_image = [
        {"id": str(i), "predicted": float(p), "truth": int(t), "error": float(e)}
        for i, p, t, e in zip(ids, preds, truths, err)
    ]
    return MetricsReport(
        mae=float(np.mean(np.abs(err))),
        mse=float(np.sqrt(np.mean(err ** 2))),
        n_images=len(preds),
        patch_k=patch_k,
        per_image=per_image,
        **extra,
    )


def _ids(labeled, ids):
    if ids is not None:
        return list(ids)
    return [im.source_id if isinstance(im, RenderedImage) and im.source_id else str(i)
            for i, (im, _) in enumerate(labeled)]


def evaluate(probe: ProbeModel, labeled: Sequence, k: int = 1, ids=None, **extra) -> MetricsReport:
    """``labeled``: sequence of (image, truth_count)."""
    labeled = list(labeled)
    if not labeled:
        raise ValueError("nothing to evaluate")
    preds = [infer_image(probe, im, k) for im, _ in labeled]
    return metrics_from_predictions(preds, [t for _, t in labeled], _ids(labeled, ids), k, **extra)


@dataclass
class SweepTable:
    reports: list

    def to_text(self) -> str:
        lines = [f"{'patch':>6}{'MAE':>12}{'MSE':>12}"]
        for r in self.reports:
            lines.append(f"{r.patch_k:>6d}{r.mae:>12.4f}{r.mse:>12.4f}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        rows = [{"patch_k": r.patch_k, "mae": r.mae, "mse": r.mse, "n_images": r.n_images}
                for r in self.reports]
        return json.dumps(rows, indent=2)

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n")
        path.with_suffix(".txt").write_text(self.to_text())
        return path


def patch_sweep(probe: ProbeModel, labeled, ks: Sequence[int] = (1, 2, 3, 4), ids=None) -> SweepTable:
    labeled = list(labeled)
    return SweepTable([evaluate(probe, labeled, k, ids) for k in ks])


# ---------------------------------------------------------------------------
# ranking diagnostics


@dataclass
class RankDiagnostics:
    spearman: Optional[float]
    pairwise_accuracy: Optional[float]
    feature_export_path: Optional[str] = None


def ranking_agreement(proxies, truths):
    """(Spearman correlation, pairwise ordering accuracy).

    Pairwise accuracy runs over pairs with strictly different truths; tied
    proxies score one half. Either value is None when undefined.
    """
    p = np.asarray(proxies, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if len(p) < 2 or len(p) != len(t):
        raise ValueError("need at least two (proxy, truth) pairs of equal length")
    rho = None
    if np.ptp(t) > 0 and np.ptp(p) > 0:
        rho = float(stats.spearmanr(p, t).statistic)
    dt = np.sign(t[:, None] - t[None, :])
    dp = np.sign(p[:, None] - p[None, :])
    mask = np.triu(dt != 0, 1)
    acc = None
    if mask.any():
        agree = (dt[mask] == dp[mask]) + 0.5 * (dp[mask] == 0)
        acc = float(agree.mean())
    return rho, acc


def rank_diagnostics(model: RankModel, labeled: Sequence, export_path=None, ids=None) -> RankDiagnostics:
    """Order agreement of proxy counts with true counts, plus an optional CSV
    of ``id,truth,c_proxy,f1..fD`` for external embedding."""
    labeled = list(labeled)
    x = check_images([im for im, _ in labeled], model.input_size, resize=True)
    model.eval()
    feats = batched_forward(model.encoder, x)
    proxies = model.decoder(feats).detach().numpy().astype(np.float64)
    truths = [t for _, t in labeled]
    rho, acc = ranking_agreement(proxies, truths)
    out = None
    if export_path is not None:
        out = Path(export_path)
        out.parent.mkdir(parents=True, exist_ok=True)
        f = feats.numpy()
        with open(out, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["id", "truth", "c_proxy"] + [f"f{j + 1}" for j in range(f.shape[1])])
            for i, t, c, row in zip(_ids(labeled, ids), truths, proxies, f):
                wr.writerow([i, t, repr(float(c))] + [repr(float(v)) for v in row])
        out = str(out)
    return RankDiagnostics(rho, acc, out)
