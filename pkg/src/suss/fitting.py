"""Per-image self-supervised fitting of the component Gaussians.

The objective is the level-weighted negative log-likelihood of an image's
augmentations, ``sum_b w_l(b) * -log p(T(X)_b)`` with ``w_l = 1 / (l + 1)``,
optionally plus a monotone level-ranking hinge and an L2 penalty on the
off-diagonal entries. Parameters are optimised directly with Adam.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import augment
from .imaging import COMPONENTS, decompose
from .supn import SupnParams, log_prob, offset_set, valid_mask, weighted_param_grads, zero_params

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-3
# window per component: 8x8 for full and half scale, 5x5 at quarter scale
COMPONENT_WINDOWS = (8, 8, 5, 5)
COMPONENT_CHANNELS = (1, 1, 1, 2)


class FitError(RuntimeError):
    """Raised when the optimisation produces a non-finite objective."""


@dataclass(frozen=True)
class FitConfig:
    steps: int = 400
    lr_mu: float = 1e-3
    lr_logdiag: float = 1e-2
    lr_offdiag: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    weight_decay_offdiag: float = 1e-3
    freeze_mu: bool = True
    rank_margin: float = 1.0
    rank_weight: float = 0.0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if min(self.lr_mu, self.lr_logdiag, self.lr_offdiag) <= 0:
            raise ValueError("learning rates must be > 0")
        if self.rank_weight < 0:
            raise ValueError("rank_weight must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("Adam needs 0 <= beta < 1 and eps > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown FitConfig keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "FitConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FitTrace:
    objective: list = field(default_factory=list)
    level_logprob: dict = field(default_factory=dict)
    best_step: int = 0
    restarts: int = 0

    def to_dict(self) -> dict:
        return {
            "objective": [float(v) for v in self.objective],
            "level_logprob": {str(k): float(v) for k, v in self.level_logprob.items()},
            "best_step": self.best_step,
            "restarts": self.restarts,
        }


class Batch(NamedTuple):
    """Augmented copies of one component with their augmentation levels."""

    components: np.ndarray  # (B, H, W, C)
    levels: np.ndarray  # (B,)


def make_batch(components, levels) -> Batch:
    comps = np.asarray(components, dtype=np.float64)
    if comps.ndim == 3:
        comps = comps[None]
    return Batch(comps, np.asarray(levels, dtype=np.int64).reshape(-1))


def level_weights(levels) -> np.ndarray:
    return 1.0 / (np.asarray(levels, dtype=np.float64) + 1.0)


# -- initialisation -------------------------------------------------------


def init_params(component, layout, probe=None, component_id: str = "") -> SupnParams:
    """Mean at the component, no couplings, constant log-diagonal.

    The log-diagonal is ``-log(max(sigma, 1e-3))`` where ``sigma`` is the
    standard deviation of ``probe - component`` pooled over a probe batch.
    Without a probe the floor is used.
    """
    component = np.asarray(component, dtype=np.float64)
    if component.ndim != 3 or component.size == 0:
        raise ValueError(f"degenerate component of shape {component.shape}")
    if probe is None:
        sigma = 0.0
    else:
        probe = np.asarray(probe, dtype=np.float64)
        sigma = float(np.std(probe - component))
    log_diag = -math.log(max(sigma, SIGMA_FLOOR))
    return zero_params(layout, component, log_diag, component=component_id)


# -- objectives -----------------------------------------------------------


def supn_nll(params: SupnParams, batch: Batch) -> float:
    """Level-weighted negative log-likelihood of a batch."""
    lps = log_prob(params, batch.components)
    return float(np.dot(level_weights(batch.levels), -lps))


def level_means(lps: np.ndarray, levels: np.ndarray, n_levels: int = augment.N_LEVELS):
    """Mean log-prob per level; levels absent from the batch are NaN."""
    means = np.full(n_levels, np.nan)
    for lv in range(n_levels):
        sel = levels == lv
        if sel.any():
            means[lv] = lps[sel].mean()
    return means


def ranking_loss_r(mean_logp_by_level, margin: float) -> float:
    """Hinge penalty for log-probs that fail to fall by ``margin`` per level."""
    m = np.asarray(mean_logp_by_level, dtype=np.float64)
    if m.shape != (augment.N_LEVELS,) or not np.all(np.isfinite(m)):
        raise ValueError("ranking_loss_r needs 5 finite per-level values")
    return float(np.maximum(0.0, margin + m[1:] - m[:-1]).sum())


def ranking_loss_r_grad(mean_logp_by_level, margin: float) -> np.ndarray:
    m = np.asarray(mean_logp_by_level, dtype=np.float64)
    active = (margin + m[1:] - m[:-1]) > 0
    g = np.zeros_like(m)
    g[1:] += active
    g[:-1] -= active
    return g


def _pearson_parts(x, h):
    x = np.asarray(x, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if x.shape != h.shape or x.ndim != 1 or x.size < 3:
        raise ValueError("need at least 3 (logp, human score) pairs of equal length")
    hc = h - h.mean()
    if not np.any(hc):
        raise ValueError("human scores have zero variance")
    xc = x - x.mean()
    return xc, hc, np.sqrt(xc @ xc), np.sqrt(hc @ hc)


def ranking_loss_rh(logps, human_scores) -> float:
    """``1 - pearson(logps, human_scores)``."""
    xc, hc, nx, nh = _pearson_parts(logps, human_scores)
    if nx == 0:
        raise ValueError("log-probs have zero variance")
    return float(1.0 - (xc @ hc) / (nx * nh))


def ranking_loss_rh_grad(logps, human_scores) -> np.ndarray:
    """Gradient of :func:`ranking_loss_rh` with respect to ``logps``."""
    xc, hc, nx, nh = _pearson_parts(logps, human_scores)
    if nx == 0:
        raise ValueError("log-probs have zero variance")
    rho = (xc @ hc) / (nx * nh)
    # d rho / d x; the centring projection drops out because hc and xc are centred
    return -(hc / (nx * nh) - rho * xc / nx**2)


def objective_and_grads(params: SupnParams, batch: Batch, config: FitConfig, mask=None):
    """Full fitting objective and its gradient for every parameter plane."""
    w = level_weights(batch.levels)
    counts = np.bincount(batch.levels, minlength=augment.N_LEVELS).astype(np.float64)
    use_rank = config.rank_weight > 0 and np.all(counts[: augment.N_LEVELS] > 0)
    rank_value = 0.0

    def coef(lps):
        nonlocal rank_value
        c = w.copy()
        if use_rank:
            means = level_means(lps, batch.levels)
            rank_value = ranking_loss_r(means, config.rank_margin)
            g = ranking_loss_r_grad(means, config.rank_margin)
            c -= config.rank_weight * g[batch.levels] / counts[batch.levels]
        # grads below are of sum_b coef_b * logp_b; the objective negates it
        return c

    lps, g = weighted_param_grads(params, batch.components, coef)
    obj = float(np.dot(w, -lps)) + config.rank_weight * rank_value
    wd = config.weight_decay_offdiag
    off = params.off_diag if mask is None else params.off_diag * mask[..., None, None]
    obj += wd * float(np.sum(off**2))
    g_off = -g.off_diag + 2 * wd * off
    if mask is not None:
        g_off *= mask[..., None, None]
    g_intra = None
    if params.intra is not None:
        obj += wd * float(np.sum(params.intra**2))
        g_intra = -g.intra + 2 * wd * params.intra
    grads = {"mu": -g.mu, "log_diag": -g.log_diag, "off_diag": g_off, "intra": g_intra}
    return obj, lps, grads


# -- optimiser ------------------------------------------------------------


class Adam:
    """Plain Adam over a dict of named arrays with per-name learning rates."""

    def __init__(self, lrs: dict, beta1=0.9, beta2=0.99, eps=1e-8):
        self.lrs = dict(lrs)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, values: dict, grads: dict) -> dict:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        out = dict(values)
        for name, lr in self.lrs.items():
            g = grads.get(name)
            if g is None:
                continue
            m = self.m.get(name, 0.0) * b1 + (1 - b1) * g
            v = self.v.get(name, 0.0) * b2 + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            out[name] = values[name] - lr * mhat / (np.sqrt(vhat) + self.eps)
        return out


def _planes(params: SupnParams) -> dict:
    return {"mu": params.mu, "log_diag": params.log_diag, "off_diag": params.off_diag, "intra": params.intra}


def fit_supn(component, batch: Batch, config: FitConfig | None = None, layout=None, init=None, component_id=""):
    """Fit one component's Gaussian to its augmentation batch.

    Parameters
    ----------
    component : ndarray (H, W, C)
        The unaugmented component; the mean starts here.
    batch : Batch
        Augmented copies and their levels.
    config : FitConfig
    layout : NeighborhoodLayout, optional
        Defaults to an 8x8 window with the component's channel count.
    init : SupnParams, optional
        Starting point; otherwise :func:`init_params` with ``batch`` as probe.

    Returns
    -------
    (SupnParams, FitTrace)
        The best iterate seen and the per-step objective trace.
    """
    config = config or FitConfig()
    component = np.asarray(component, dtype=np.float64)
    if len(batch.components) == 0:
        raise ValueError("cannot fit on an empty batch")
    if batch.components.shape[1:] != component.shape:
        raise ValueError(f"batch items {batch.components.shape[1:]} do not match component {component.shape}")
    if layout is None:
        layout = offset_set(8, channels=component.shape[2])
    if init is None:
        init = init_params(component, layout, probe=batch.components, component_id=component_id)
    mask = valid_mask(init.layout, init.height, init.width)

    lrs = {"log_diag": config.lr_logdiag, "off_diag": config.lr_offdiag}
    if init.intra is not None:
        lrs["intra"] = config.lr_offdiag
    if not config.freeze_mu:
        lrs["mu"] = config.lr_mu

    trace = FitTrace()
    obj0 = None
    restarted = False
    scale = 1.0
    while True:
        opt = Adam({k: v * scale for k, v in lrs.items()}, config.beta1, config.beta2, config.eps)
        params = init
        best = (math.inf, init, -1)
        trace.objective = []
        diverged = False
        for step in range(config.steps + 1):
            obj, _, grads = objective_and_grads(params, batch, config, mask)
            if not math.isfinite(obj):
                raise FitError(
                    f"non-finite objective at step {step} (component {component_id or '?'}, "
                    f"lr scale {scale}); last finite best {best[0]:.6g}"
                )
            if obj0 is None:
                obj0 = obj
            if obj < best[0]:
                best = (obj, params, step)
            if step == config.steps:
                break
            trace.objective.append(obj)
            if obj > obj0 + 9.0 * abs(obj0) and not restarted:
                diverged = True
                break
            try:
                params = params.with_arrays(**opt.step(_planes(params), grads))
            except ValueError as exc:
                raise FitError(f"update at step {step} left non-finite parameters ({exc})") from exc
        if diverged:
            log.warning("objective diverged; halving learning rates and restarting from init")
            restarted = True
            trace.restarts += 1
            scale *= 0.5
            continue
        break

    best_params = best[1]
    trace.best_step = best[2]
    lps = log_prob(best_params, batch.components)
    means = level_means(lps, batch.levels)
    trace.level_logprob = {lv: means[lv] for lv in range(len(means)) if np.isfinite(means[lv])}
    return best_params, trace


# -- whole-image orchestration -------------------------------------------


def component_layouts():
    return [offset_set(w, channels=c) for w, c in zip(COMPONENT_WINDOWS, COMPONENT_CHANNELS)]


def component_batches(img, seed: int, geometric_plan=None, color_plan=None):
    """Augmentation batches per component: geometric for Y scales, colour for CbCr."""
    geometric_plan = geometric_plan or augment.DEFAULT_GEOMETRIC_PLAN
    color_plan = color_plan or augment.DEFAULT_COLOR_PLAN
    geo = augment.generate_batch(img, geometric_plan, seed)
    col = augment.generate_batch(img, color_plan, seed)
    geo_dec = [decompose(a.image) for a in geo]
    col_dec = [decompose(a.image) for a in col]
    geo_levels = [a.level for a in geo]
    col_levels = [a.level for a in col]
    batches = []
    for ci in range(3):
        batches.append(make_batch(np.stack([d[ci] for d in geo_dec]), geo_levels))
    batches.append(make_batch(np.stack([d[3] for d in col_dec]), col_levels))
    return batches


def fit_component(args):
    """Picklable single-component fit, used by process pools."""
    component, batch, config, layout, name = args
    return fit_supn(component, batch, config, layout=layout, component_id=name)


def fit_decomposition(img, plans=None, config: FitConfig | None = None, seed: int = 0, workers: int = 1):
    """Fit all four component Gaussians of one image.

    Returns ``(params4, traces4)`` in component order.
    """
    config = config or FitConfig()
    plans = plans or (None, None)
    dec = decompose(img)
    batches = component_batches(img, seed, *plans)
    jobs = [(dec[i], batches[i], config, lay, COMPONENTS[i]) for i, lay in enumerate(component_layouts())]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(fit_component, jobs))
    else:
        results = [fit_component(j) for j in jobs]
    return [r[0] for r in results], [r[1] for r in results]


def heldout_level_logprobs(params4, img, seeds, geometric_plan=None, color_plan=None):
    """Mean held-out log-prob per component and level, shape (4, 5).

    Each seed draws a fresh augmentation batch; Y components are scored on
    geometric augmentations and the chroma component on colour ones.
    """
    totals = np.zeros((4, augment.N_LEVELS))
    counts = np.zeros((4, augment.N_LEVELS))
    for seed in seeds:
        batches = component_batches(img, seed, geometric_plan, color_plan)
        for ci, (p, b) in enumerate(zip(params4, batches)):
            lps = log_prob(p, b.components)
            np.add.at(totals[ci], b.levels, lps)
            np.add.at(counts[ci], b.levels, 1)
    with np.errstate(invalid="ignore"):
        return totals / counts

