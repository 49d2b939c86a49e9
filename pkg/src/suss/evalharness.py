"""Dataset manifests and the evaluation statistics used to judge a metric.

Triplet manifests are CSV with columns ``ref,p0,p1,h``; MOS manifests use
``ref,dist,mos,category,level``. Paths are resolved relative to the manifest.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imaging import rgb_to_ycbcr

log = logging.getLogger(__name__)

KL_BINS = 50
KL_EPS = 1e-9


class ManifestError(ValueError):
    """Raised for malformed manifest rows; the message names the row."""


class ManifestFileError(ManifestError):
    """A strict-mode manifest row points at a file that does not exist."""


@dataclass(frozen=True)
class TripletRecord:
    ref_path: Path
    p0_path: Path
    p1_path: Path
    h: float
    row: int


@dataclass(frozen=True)
class MosRecord:
    ref_path: Path
    dist_path: Path
    mos: float
    category: str
    distortion_level: int | None
    row: int


class Manifest(list):
    """Validated records; ``skipped`` counts rows dropped in lenient mode."""

    skipped: int = 0


def _read_rows(path, required):
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise ManifestError(f"{path}: missing column(s) {missing}")
        # header is row 1
        for i, row in enumerate(reader, start=2):
            yield i, row


def _resolve(base: Path, value: str) -> Path:
    p = Path(value.strip())
    return p if p.is_absolute() else base / p


def _collect(records, strict: bool, path) -> Manifest:
    out = Manifest()
    for rec, paths in records:
        absent = [str(p) for p in paths if not p.exists()]
        if absent:
            if strict:
                raise ManifestFileError(f"{path} row {rec.row}: missing file(s) {absent}")
            out.skipped += 1
            log.warning("row %d: skipping, missing file(s) %s", rec.row, absent)
            continue
        out.append(rec)
    return out


def load_triplet_manifest(path, strict: bool = True, check_files: bool = True) -> Manifest:
    base = Path(path).parent
    records = []
    for row_no, row in _read_rows(path, ("ref", "p0", "p1", "h")):
        try:
            h = float(row["h"])
        except (TypeError, ValueError):
            raise ManifestError(f"{path} row {row_no}: cannot parse h={row['h']!r}") from None
        if not 0.0 <= h <= 1.0:
            raise ManifestError(f"{path} row {row_no}: h={h} outside [0, 1]")
        rec = TripletRecord(_resolve(base, row["ref"]), _resolve(base, row["p0"]), _resolve(base, row["p1"]), h, row_no)
        records.append((rec, (rec.ref_path, rec.p0_path, rec.p1_path) if check_files else ()))
    return _collect(records, strict, path)


def load_mos_manifest(path, strict: bool = True, check_files: bool = True) -> Manifest:
    base = Path(path).parent
    records = []
    for row_no, row in _read_rows(path, ("ref", "dist", "mos", "category")):
        try:
            mos = float(row["mos"])
        except (TypeError, ValueError):
            raise ManifestError(f"{path} row {row_no}: cannot parse mos={row['mos']!r}") from None
        if not math.isfinite(mos):
            raise ManifestError(f"{path} row {row_no}: mos must be finite")
        level = (row.get("level") or "").strip()
        try:
            level = int(level) if level else None
        except ValueError:
            raise ManifestError(f"{path} row {row_no}: cannot parse level={level!r}") from None
        rec = MosRecord(_resolve(base, row["ref"]), _resolve(base, row["dist"]), mos, row["category"].strip(), level, row_no)
        records.append((rec, (rec.ref_path, rec.dist_path) if check_files else ()))
    return _collect(records, strict, path)


# -- 2AFC -----------------------------------------------------------------


def twoafc_score(choices, h) -> float:
    """Vote-weighted 2AFC agreement.

    A choice of 1 earns ``h``, a choice of 0 earns ``1 - h`` and a tie (0.5)
    earns 0.5.
    """
    c = np.asarray(choices, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if c.shape != h.shape:
        raise ValueError(f"length mismatch: {c.shape} choices vs {h.shape} judgments")
    if c.size == 0:
        raise ValueError("no triplets to score")
    per = np.where(c == 1.0, h, np.where(c == 0.0, 1.0 - h, 0.5))
    return float(per.mean())


def twoafc_majority(choices, h) -> float:
    """Agreement with the hard majority vote; split votes and ties earn 0.5."""
    c = np.asarray(choices, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if c.shape != h.shape:
        raise ValueError(f"length mismatch: {c.shape} choices vs {h.shape} judgments")
    if c.size == 0:
        raise ValueError("no triplets to score")
    maj = np.where(h > 0.5, 1.0, np.where(h < 0.5, 0.0, 0.5))
    per = np.where((c == 0.5) | (maj == 0.5), 0.5, (c == maj).astype(np.float64))
    return float(per.mean())


# -- correlations ---------------------------------------------------------


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D and of equal length")
    if x.size < 2:
        raise ValueError("need at least 2 observations")
    return x, y


def pearson(x, y) -> float:
    x, y = _pair(x, y)
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(xc @ xc), math.sqrt(yc @ yc)
    if sx == 0 or sy == 0:
        raise ValueError("zero variance")
    return float(np.clip((xc @ yc) / (sx * sy), -1.0, 1.0))


def average_ranks(x) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    x, y = _pair(x, y)
    return pearson(average_ranks(x), average_ranks(y))


def kendall(x, y) -> float:
    """Kendall tau-b, by direct pair counting."""
    x, y = _pair(x, y)
    dx = np.sign(x[:, None] - x[None, :])
    dy = np.sign(y[:, None] - y[None, :])
    iu = np.triu_indices(len(x), k=1)
    dx, dy = dx[iu], dy[iu]
    s = float(np.sum(dx * dy))
    nx, ny = float(np.count_nonzero(dx)), float(np.count_nonzero(dy))
    if nx == 0 or ny == 0:
        raise ValueError("zero variance")
    return s / math.sqrt(nx * ny)


# -- calibration ----------------------------------------------------------


def _histograms(scores_by_category: dict, bins: int = KL_BINS, eps: float = KL_EPS):
    """Smoothed, normalised histograms on a shared min-max scale.

    Returns ``(per_category, aggregate)``.
    """
    if len(scores_by_category) < 2:
        raise ValueError("need at least 2 categories")
    arrays = {k: np.asarray(v, dtype=np.float64).ravel() for k, v in scores_by_category.items()}
    if any(a.size == 0 for a in arrays.values()):
        raise ValueError("every category needs at least one score")
    pooled = np.concatenate(list(arrays.values()))
    lo, hi = pooled.min(), pooled.max()
    if not hi > lo:
        raise ValueError("all scores identical; min-max normalisation is degenerate")

    def hist(a):
        u = (a - lo) / (hi - lo)
        idx = np.minimum((u * bins).astype(np.int64), bins - 1)
        p = np.bincount(idx, minlength=bins).astype(np.float64)
        p = p / p.sum() + eps
        return p / p.sum()

    return {k: hist(a) for k, a in arrays.items()}, hist(pooled)


def kl_divergence(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return float(np.sum(p * np.log(p / q)))


def kl_calibration(scores_by_category: dict, bins: int = KL_BINS, eps: float = KL_EPS) -> dict:
    """``KL(D_category || D_pooled)`` per category on 50 shared bins."""
    hists, agg = _histograms(scores_by_category, bins, eps)
    return {k: kl_divergence(p, agg) for k, p in hists.items()}


def pairwise_kl(scores_by_category: dict, bins: int = KL_BINS, eps: float = KL_EPS) -> dict:
    """``KL(D_a || D_b)`` for every ordered pair of categories, same binning."""
    hists, _ = _histograms(scores_by_category, bins, eps)
    return {(a, b): kl_divergence(hists[a], hists[b]) for a, b in itertools.permutations(hists, 2)}


def auc_separation(scores_high, scores_low) -> float:
    """Probability a high-MOS score beats a low-MOS score, ties counting half."""
    a = np.asarray(scores_high, dtype=np.float64).ravel()
    b = np.asarray(scores_low, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("both groups must be nonempty")
    ra = average_ranks(np.concatenate([a, b]))[: a.size]
    u = ra.sum() - a.size * (a.size + 1) / 2.0
    return float(u / (a.size * b.size))


# -- baselines ------------------------------------------------------------


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio with peak 1; identical inputs give ``inf``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    return math.inf if mse == 0 else -10.0 * math.log10(mse)


def _luma(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 3:
        return rgb_to_ycbcr(img)[0][..., 0]
    if img.ndim == 3 and img.shape[2] == 1:
        return img[..., 0]
    return img


def ssim(a, b, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Gaussian-window SSIM on luminance (11x11 window, sigma 1.5, peak 1).

    Local statistics use population covariances; the mean is taken over the
    interior where the window fits entirely.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    x, y = _luma(a), _luma(b)

    def filt(z):
        return ndimage.gaussian_filter(z, sigma, mode="reflect", truncate=3.5)

    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx * mx
    vy = filt(y * y) - my * my
    cxy = filt(x * y) - mx * my
    c1, c2 = k1**2, k2**2
    smap = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
    pad = 5
    return float(smap[pad:-pad, pad:-pad].mean())


# -- reports --------------------------------------------------------------


def quintile_groups(mos, scores):
    """Scores of the top and bottom MOS quintiles (at least one row each)."""
    mos = np.asarray(mos, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(mos, kind="mergesort")
    k = max(1, len(mos) // 5)
    return scores[order[-k:]], scores[order[:k]]


def mos_report(scores, mos, categories, orientation: int = 1) -> dict:
    """Correlations with MOS, per-category KL and top/bottom-quintile AUC.

    ``orientation`` is +1 for similarity scores and -1 for distances, so every
    statistic reads "higher is better aligned".
    """
    s = orientation * np.asarray(scores, dtype=np.float64)
    mos = np.asarray(mos, dtype=np.float64)
    report: dict = {"n": int(len(s)), "orientation": orientation, "degenerate": []}
    for name, fn in (("plcc", pearson), ("srcc", spearman), ("krcc", kendall)):
        try:
            report[name] = fn(s, mos)
        except ValueError as exc:
            report[name] = None
            report["degenerate"].append(f"{name}: {exc}")
    by_cat: dict = {}
    for c, v in zip(categories, s):
        by_cat.setdefault(c, []).append(v)
    try:
        report["kl"] = kl_calibration(by_cat) if len(by_cat) >= 2 else {c: 0.0 for c in by_cat}
    except ValueError as exc:
        report["kl"] = None
        report["degenerate"].append(f"kl: {exc}")
    if len(s) >= 2:
        hi, lo = quintile_groups(mos, s)
        report["auc"] = auc_separation(hi, lo)
    else:
        report["auc"] = None
    return report
