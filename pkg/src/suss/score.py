"""Weighted component log-likelihood score, its maps, gradients and weights."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import supn
from .imaging import COMPONENT_SCALES, COMPONENTS, check_image, decompose, decompose_adjoint

# base-model weights reported with the method, in this package's component order
PAPER_BASE_WEIGHTS = (8.3633e-6, 4.1081e-8, 6.3725e-5, 6.0119e-6)


class ResolutionError(ValueError):
    """Raised when an image does not match the resolution the params were fitted at."""


@dataclass(frozen=True, eq=False)
class ComponentWeights:
    log_w: np.ndarray

    def __post_init__(self):
        lw = np.asarray(self.log_w, dtype=np.float64).reshape(-1)
        if lw.shape != (4,) or not np.all(np.isfinite(lw)):
            raise ValueError("ComponentWeights needs 4 finite log-weights")
        object.__setattr__(self, "log_w", lw)

    @classmethod
    def from_weights(cls, w) -> "ComponentWeights":
        w = np.asarray(w, dtype=np.float64)
        if np.any(w <= 0):
            raise ValueError("weights must be positive")
        return cls(np.log(w))

    @classmethod
    def uniform(cls) -> "ComponentWeights":
        return cls(np.zeros(4))

    @classmethod
    def paper_base(cls) -> "ComponentWeights":
        return cls.from_weights(PAPER_BASE_WEIGHTS)

    @property
    def w(self) -> np.ndarray:
        return np.exp(self.log_w)

    def to_json(self) -> dict:
        return {"log_w": [float(v) for v in self.log_w], "component_order": list(COMPONENTS)}

    @classmethod
    def from_json(cls, obj) -> "ComponentWeights":
        if isinstance(obj, (str, Path)):
            obj = json.loads(Path(obj).read_text())
        order = obj.get("component_order", list(COMPONENTS))
        if list(order) != list(COMPONENTS):
            raise ValueError(f"component_order must be {list(COMPONENTS)}, got {order}")
        return cls(np.asarray(obj["log_w"], dtype=np.float64))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))


@dataclass(frozen=True)
class ScoreBreakdown:
    total: float
    per_component: tuple
    per_component_weighted: tuple

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "per_component": dict(zip(COMPONENTS, self.per_component)),
            "per_component_weighted": dict(zip(COMPONENTS, self.per_component_weighted)),
        }


def _check_resolution(params4, img):
    img = check_image(img)
    h, w = params4[0].height, params4[0].width
    if img.shape[:2] != (h, w):
        raise ResolutionError(
            f"candidate is {img.shape[1]}x{img.shape[0]} but params were fitted at {w}x{h}"
        )
    return img


def breakdown(logps, weights: ComponentWeights) -> ScoreBreakdown:
    logps = [float(v) for v in logps]
    weighted = [float(wc * lp) for wc, lp in zip(weights.w, logps)]
    return ScoreBreakdown(total=math.fsum(weighted), per_component=tuple(logps), per_component_weighted=tuple(weighted))


def component_logprobs(params4, y_img) -> list[float]:
    y_img = _check_resolution(params4, y_img)
    return [supn.log_prob(p, c) for p, c in zip(params4, decompose(y_img))]


def suss(params4, y_img, weights: ComponentWeights) -> ScoreBreakdown:
    """Score ``y_img`` under the four Gaussians fitted around a reference.

    Higher means more similar.
    """
    return breakdown(component_logprobs(params4, y_img), weights)


def max_score(params4, weights: ComponentWeights) -> float:
    """The score attained when every residual vanishes (the global maximum)."""
    vals = [p.log_diag.sum() - 0.5 * p.size * supn.LOG_2PI for p in params4]
    return math.fsum(float(w * v) for w, v in zip(weights.w, vals))


def suss_symmetric(params_a, params_b, img_a, img_b, weights: ComponentWeights) -> float:
    """Average of the two directional scores, ``SUSS(A, B)`` and ``SUSS(B, A)``."""
    ab = suss(params_a, img_b, weights).total
    ba = suss(params_b, img_a, weights).total
    return 0.5 * (ab + ba)


def asymmetry_report(forward, backward):
    """Mean absolute difference and Pearson/Spearman agreement of two score directions."""
    from .evalharness import pearson, spearman

    f = np.asarray(forward, dtype=np.float64)
    b = np.asarray(backward, dtype=np.float64)
    if f.shape != b.shape or f.size < 2:
        raise ValueError("need at least 2 pairs scored in both directions")
    return float(np.mean(np.abs(f - b))), pearson(f, b), spearman(f, b)


# -- maps -----------------------------------------------------------------


def whitened_residuals(params4, y_img) -> list[np.ndarray]:
    y_img = _check_resolution(params4, y_img)
    return [supn.whiten(p, c) for p, c in zip(params4, decompose(y_img))]


def suss_map(params4, y_img, weights: ComponentWeights) -> np.ndarray:
    """Per-pixel evidence map at full resolution, shape (H, W).

    Squared whitened residuals are summed over channels, replicated up to
    full resolution and divided by the squared scale factor, so that
    ``sum(map**2) == sum_c w_c * ||s_c||**2``.
    """
    acc = None
    for wc, s, scale in zip(weights.w, whitened_residuals(params4, y_img), COMPONENT_SCALES):
        e = (s**2).sum(axis=-1)
        if scale > 1:
            e = np.repeat(np.repeat(e, scale, axis=0), scale, axis=1) / scale**2
        acc = wc * e if acc is None else acc + wc * e
    return np.sqrt(acc)


def map_to_display(m: np.ndarray) -> np.ndarray:
    """Per-image min-max normalisation to [0, 1] for saving as PNG."""
    lo, hi = float(m.min()), float(m.max())
    if hi <= lo:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


# -- gradients and reconstruction -----------------------------------------


def grad_suss_wrt_candidate(params4, y_img, weights: ComponentWeights) -> np.ndarray:
    """Gradient of the score with respect to the candidate's RGB pixels."""
    y_img = _check_resolution(params4, y_img)
    grads = [wc * supn.grad_logprob_obs(p, c) for wc, p, c in zip(weights.w, params4, decompose(y_img))]
    return decompose_adjoint(grads)


class Reconstruction(NamedTuple):
    image: np.ndarray
    score: float
    trajectory: list


def reconstruct(params4, init, weights: ComponentWeights, steps: int = 300, lr: float = 0.01,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> Reconstruction:
    """Projected Adam ascent on the score over pixel values.

    Pixels are clipped to [0, 1] after every step. Returns the best iterate and
    the best-so-far score after each step (first entry is the initial score).
    """
    x = np.clip(_check_resolution(params4, init), 0.0, 1.0)
    best_x, best = x, suss(params4, x, weights).total
    traj = [best]
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    for t in range(1, steps + 1):
        g = grad_suss_wrt_candidate(params4, x, weights)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        step = lr * (m / (1 - beta1**t)) / (np.sqrt(v / (1 - beta2**t)) + eps)
        x = np.clip(x + step, 0.0, 1.0)
        val = suss(params4, x, weights).total
        if val > best:
            best, best_x = val, x
        traj.append(best)
    return Reconstruction(best_x, best, traj)


# -- weight learning ------------------------------------------------------


def _softplus(z):
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def bce(log_w, delta, h) -> np.ndarray:
    """Mean binary cross-entropy of ``sigmoid(delta @ w)`` against soft targets ``h``.

    ``log_w`` may be a single vector (4,) or a stack (G, 4); ``delta`` is the
    per-triplet component log-prob difference ``logp(Y1) - logp(Y0)``.
    """
    z = delta @ np.exp(np.asarray(log_w)).T
    h = np.asarray(h) if z.ndim == 1 else np.asarray(h)[:, None]
    return (_softplus(z) - h * z).mean(axis=0)


def _bce_grad(log_w, delta, h):
    w = np.exp(log_w)
    z = delta @ w
    return (delta * (_sigmoid(z) - h)[:, None]).mean(axis=0) * w


class WeightFit(NamedTuple):
    weights: ComponentWeights
    grid_bce: float
    refined_bce: float
    grid_log10_w: tuple


def fit_weights(logp_y1, logp_y0, h, grid=tuple(range(-9, -2)), steps: int = 2000, lr: float = 1e-2,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> WeightFit:
    """Learn component weights from 2AFC judgments.

    Stage one scans every 4-tuple of ``log10 w`` on ``grid``; stage two runs
    Adam on the natural log-weights from the best grid point, keeping the best
    iterate.
    """
    y1 = np.asarray(logp_y1, dtype=np.float64)
    y0 = np.asarray(logp_y0, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64).reshape(-1)
    if y1.ndim != 2 or y1.shape[1] != 4 or y1.shape != y0.shape or len(h) != len(y1):
        raise ValueError("expected (n, 4) log-prob arrays and n judgments")
    if len(h) == 0:
        raise ValueError("cannot fit weights on an empty dataset")
    if np.any((h < 0) | (h > 1)):
        raise ValueError("judgments must lie in [0, 1]")
    delta = y1 - y0

    g = np.asarray(grid, dtype=np.float64)
    mesh = np.stack(np.meshgrid(g, g, g, g, indexing="ij"), axis=-1).reshape(-1, 4)
    losses = bce(mesh * math.log(10.0), delta, h)
    i = int(np.argmin(losses))
    grid_best = float(losses[i])
    lw = mesh[i] * math.log(10.0)

    best_lw, best_loss = lw.copy(), grid_best
    m = np.zeros(4)
    v = np.zeros(4)
    for t in range(1, steps + 1):
        gr = _bce_grad(lw, delta, h)
        m = beta1 * m + (1 - beta1) * gr
        v = beta2 * v + (1 - beta2) * gr * gr
        lw = lw - lr * (m / (1 - beta1**t)) / (np.sqrt(v / (1 - beta2**t)) + eps)
        loss = float(bce(lw, delta, h))
        if loss < best_loss:
            best_loss, best_lw = loss, lw.copy()
    return WeightFit(ComponentWeights(best_lw), grid_best, best_loss, tuple(mesh[i]))


def predict_choices(logp_y1, logp_y0, weights: ComponentWeights) -> np.ndarray:
    """2AFC decision per triplet: 1 if Y1 scores higher, 0 if Y0 does, 0.5 on ties."""
    s1 = np.asarray(logp_y1) @ weights.w
    s0 = np.asarray(logp_y0) @ weights.w
    return np.where(s1 > s0, 1.0, np.where(s1 < s0, 0.0, 0.5))
