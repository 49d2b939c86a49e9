"""Perceptually calibrated augmentations at five intensity levels.

Geometric families resample the image bilinearly with reflect padding; colour
families act in CIELAB. Level 3 is the just-noticeable-difference band.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imaging import check_image, lab_to_rgb, rgb_to_lab

N_LEVELS = 5


class Family(str, enum.Enum):
    TRANSLATION = "translation"
    ROTATION = "rotation"
    SCALING = "scaling"
    ELASTIC = "elastic"
    PERSPECTIVE = "perspective"
    BRIGHTNESS = "brightness"
    CONTRAST = "contrast"
    SATURATION = "saturation"
    HUE = "hue"

    @classmethod
    def parse(cls, name) -> "Family":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).lower())
        except ValueError:
            raise ValueError(f"unknown augmentation family {name!r}") from None

    @property
    def is_geometric(self) -> bool:
        return self in GEOMETRIC_FAMILIES


GEOMETRIC_FAMILIES = (
    Family.TRANSLATION,
    Family.ROTATION,
    Family.SCALING,
    Family.ELASTIC,
    Family.PERSPECTIVE,
)
COLOR_FAMILIES = (Family.BRIGHTNESS, Family.CONTRAST, Family.SATURATION, Family.HUE)
ALL_FAMILIES = GEOMETRIC_FAMILIES + COLOR_FAMILIES

# (lo, hi) magnitude per level. Translation is a fraction of image size,
# rotation is in degrees, scaling is a zoom factor.
LEVEL_RANGES = {
    Family.TRANSLATION: [(0.008, 0.01), (0.01, 0.03), (0.03, 0.05), (0.05, 0.07), (0.07, 0.10)],
    Family.ROTATION: [(0.01, 0.5), (0.5, 1.4), (1.4, 2.3), (2.3, 3.2), (3.2, 4.2)],
    Family.SCALING: [(1.001, 1.005), (1.005, 1.01), (1.01, 1.02), (1.02, 1.03), (1.03, 1.04)],
    Family.BRIGHTNESS: [(0.001, 0.002), (0.002, 0.005), (0.005, 0.008), (0.008, 0.015), (0.015, 0.03)],
    # level 2 is not monotone in the source table; kept verbatim
    Family.CONTRAST: [(0.002, 0.004), (0.004, 0.008), (0.001, 0.0015), (0.015, 0.02), (0.025, 0.035)],
    Family.SATURATION: [(0.0002, 0.0005), (0.0005, 0.001), (0.001, 0.015), (0.015, 0.02), (0.025, 0.035)],
    Family.HUE: [(0.01, 0.02), (0.02, 0.03), (0.03, 0.04), (0.04, 0.05), (0.05, 0.06)],
}
ELASTIC_LEVELS = [(1.0, 0.5), (5.0, 1.0), (10.0, 2.0), (15.0, 3.0), (20.0, 4.0)]
PERSPECTIVE_LEVELS = [0.05, 0.10, 0.15, 0.20, 0.25]


@dataclass(frozen=True)
class AugmentationSpec:
    family: Family
    level: int
    params: dict
    seed: int

    def to_json(self) -> dict:
        return {"family": self.family.value, "level": self.level, "params": self.params, "seed": self.seed}


def _sign(rng) -> int:
    return 1 if rng.random() < 0.5 else -1


def sample_spec(family, level: int, rng_seed) -> AugmentationSpec:
    """Draw the parameters of one augmentation uniformly from its level range."""
    family = Family.parse(family)
    if not 0 <= level < N_LEVELS:
        raise ValueError(f"level must be in 0..{N_LEVELS - 1}, got {level}")
    rng = np.random.default_rng(rng_seed)
    if family is Family.ELASTIC:
        alpha, sigma = ELASTIC_LEVELS[level]
        params = {"alpha": alpha, "sigma": sigma, "noise_seed": int(rng.integers(2**31))}
    elif family is Family.PERSPECTIVE:
        d = PERSPECTIVE_LEVELS[level]
        params = {"max_jitter": d, "jitter": rng.uniform(-d, d, size=(4, 2)).tolist()}
    else:
        lo, hi = LEVEL_RANGES[family][level]
        m = float(rng.uniform(lo, hi))
        if family is Family.TRANSLATION:
            params = {"fraction": m, "angle": float(rng.uniform(0.0, 2 * np.pi))}
        elif family is Family.ROTATION:
            params = {"degrees": m, "sign": _sign(rng)}
        elif family is Family.SCALING:
            params = {"factor": m, "sign": _sign(rng)}
        elif family is Family.HUE:
            params = {"radians": m, "sign": _sign(rng)}
        else:
            params = {"magnitude": m, "sign": _sign(rng)}
    seed = int(rng_seed) if np.isscalar(rng_seed) else 0
    return AugmentationSpec(family=family, level=level, params=params, seed=seed)


# -- geometric ------------------------------------------------------------


def _fit_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 homography mapping the four ``src`` points onto ``dst``."""
    a = []
    b = []
    for (x, y), (u, v) in zip(src, dst):
        a.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        a.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b.extend([u, v])
    h = np.linalg.solve(np.array(a, dtype=np.float64), np.array(b, dtype=np.float64))
    return np.append(h, 1.0).reshape(3, 3)


def source_coordinates(spec: AugmentationSpec, height: int, width: int) -> np.ndarray:
    """Where each output pixel samples the input: array (2, H, W) of (row, col)."""
    rows, cols = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    p = spec.params
    fam = spec.family
    if fam is Family.TRANSLATION:
        ty = p["fraction"] * height * np.sin(p["angle"])
        tx = p["fraction"] * width * np.cos(p["angle"])
        return np.stack([rows - ty, cols - tx])
    if fam is Family.ROTATION:
        theta = np.deg2rad(p["degrees"]) * p["sign"]
        c, s = np.cos(theta), np.sin(theta)
        dy, dx = rows - cy, cols - cx
        return np.stack([cy + c * dy - s * dx, cx + s * dy + c * dx])
    if fam is Family.SCALING:
        scale = p["factor"] ** p["sign"]
        return np.stack([cy + (rows - cy) / scale, cx + (cols - cx) / scale])
    if fam is Family.ELASTIC:
        rng = np.random.default_rng(p["noise_seed"])
        u = rng.uniform(-1.0, 1.0, size=(2, height, width))
        disp = np.stack(
            [ndimage.gaussian_filter(f, p["sigma"], mode="reflect", truncate=4.0) for f in u]
        )
        return np.stack([rows, cols]) + p["alpha"] * disp
    if fam is Family.PERSPECTIVE:
        corners = np.array([[0, 0], [width - 1, 0], [0, height - 1], [width - 1, height - 1]], dtype=np.float64)
        jitter = np.asarray(p["jitter"]) * np.array([width, height])
        # output corners are the jittered ones; map output -> input
        hmat = _fit_homography(corners + jitter, corners)
        pts = np.stack([cols.ravel(), rows.ravel(), np.ones(rows.size)])
        q = hmat @ pts
        sx = (q[0] / q[2]).reshape(height, width)
        sy = (q[1] / q[2]).reshape(height, width)
        return np.stack([sy, sx])
    raise ValueError(f"{fam.value} is not a geometric family")


def warp(img: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Bilinear resampling of every channel at ``coords`` with reflect padding."""
    return np.stack(
        [ndimage.map_coordinates(img[..., ch], coords, order=1, mode="reflect") for ch in range(img.shape[2])],
        axis=-1,
    )


def apply_geometric(img: np.ndarray, spec: AugmentationSpec) -> np.ndarray:
    if not spec.family.is_geometric:
        raise ValueError(f"{spec.family.value} is not a geometric family")
    img = np.asarray(img, dtype=np.float64)
    coords = source_coordinates(spec, img.shape[0], img.shape[1])
    return warp(img, coords)


# -- colour ---------------------------------------------------------------


def apply_color(img: np.ndarray, spec: AugmentationSpec) -> np.ndarray:
    """Brightness, contrast, saturation or hue change applied in CIELAB."""
    if spec.family not in COLOR_FAMILIES:
        raise ValueError(f"{spec.family.value} is not a colour family")
    lab = rgb_to_lab(img)
    p = spec.params
    L, ab = lab[..., 0], lab[..., 1:]
    if spec.family is Family.BRIGHTNESS:
        L = L + 100.0 * p["magnitude"] * p["sign"]
    elif spec.family is Family.CONTRAST:
        mean = L.mean()
        L = mean + (1.0 + p["magnitude"] * p["sign"]) * (L - mean)
    elif spec.family is Family.SATURATION:
        ab = (1.0 + p["magnitude"] * p["sign"]) * ab
    else:
        theta = p["radians"] * p["sign"]
        c, s = np.cos(theta), np.sin(theta)
        ab = np.stack([c * ab[..., 0] - s * ab[..., 1], s * ab[..., 0] + c * ab[..., 1]], axis=-1)
    return lab_to_rgb(np.concatenate([L[..., None], ab], axis=-1))


def apply(img: np.ndarray, spec: AugmentationSpec) -> np.ndarray:
    if spec.family.is_geometric:
        return apply_geometric(img, spec)
    return apply_color(img, spec)


# -- plans ----------------------------------------------------------------


@dataclass(frozen=True)
class PlanEntry:
    family: Family
    levels: tuple[int, ...] = tuple(range(N_LEVELS))
    count: int = 1


@dataclass(frozen=True)
class AugmentationPlan:
    entries: tuple[PlanEntry, ...] = field(default=())

    @classmethod
    def for_families(cls, families, levels=tuple(range(N_LEVELS)), count=1) -> "AugmentationPlan":
        return cls(tuple(PlanEntry(Family.parse(f), tuple(levels), count) for f in families))

    @classmethod
    def from_json(cls, obj) -> "AugmentationPlan":
        """Build a plan from ``[{"family": ..., "levels": [...], "count": n}, ...]``."""
        if isinstance(obj, (str, Path)):
            obj = json.loads(Path(obj).read_text())
        entries = []
        for i, item in enumerate(obj):
            try:
                fam = Family.parse(item["family"])
                levels = tuple(int(lv) for lv in item.get("levels", range(N_LEVELS)))
                count = int(item.get("count", 1))
            except (KeyError, TypeError) as exc:
                raise ValueError(f"plan entry {i}: {exc}") from exc
            if any(not 0 <= lv < N_LEVELS for lv in levels) or count < 1:
                raise ValueError(f"plan entry {i}: levels must lie in 0..4 and count >= 1")
            entries.append(PlanEntry(fam, levels, count))
        return cls(tuple(entries))

    def to_json(self) -> list:
        return [{"family": e.family.value, "levels": list(e.levels), "count": e.count} for e in self.entries]

    def __len__(self) -> int:
        return sum(len(e.levels) * e.count for e in self.entries)


DEFAULT_GEOMETRIC_PLAN = AugmentationPlan.for_families(GEOMETRIC_FAMILIES)
DEFAULT_COLOR_PLAN = AugmentationPlan.for_families(COLOR_FAMILIES)


def derive_seed(seed: int, family: Family, level: int, draw: int = 0) -> int:
    ss = np.random.SeedSequence([int(seed), ALL_FAMILIES.index(family), int(level), int(draw)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass(frozen=True)
class Augmented:
    image: np.ndarray
    spec: AugmentationSpec

    @property
    def family(self) -> Family:
        return self.spec.family

    @property
    def level(self) -> int:
        return self.spec.level


def generate_batch(img: np.ndarray, plan: AugmentationPlan, seed: int) -> list[Augmented]:
    """One transformed image per (family, level, draw) in ``plan``, reproducible from ``seed``."""
    img = check_image(img)
    out = []
    for entry in plan.entries:
        for level in entry.levels:
            for draw in range(entry.count):
                spec = sample_spec(entry.family, level, derive_seed(seed, entry.family, level, draw))
                out.append(Augmented(apply(img, spec), spec))
    return out
