"""Sparse-Cholesky-precision Gaussians on a pixel lattice.

A component with ``H x W`` pixels and ``C`` channels carries ``n = H*W*C``
variables, ordered raster-scan with channels innermost (Cb before Cr). The
precision is ``L L^T`` where ``L`` is lower triangular: its diagonal is
``exp(log_diag)`` and its off-diagonal entries couple each pixel ``p`` (row)
to the earlier pixels ``p - delta`` (column) for every causal offset
``delta``. Two-channel layouts add one intra-pixel entry, row Cr, column Cb.

Everything here works on the stored planes directly; no dense matrix is built
except by :func:`dense_materialize`, which exists for testing.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)
DENSE_LIMIT = 4096

SUPN_MAGIC = b"SUPN"
SUPN_VERSION = 1


class ShapeError(ValueError):
    """Raised when an observation does not match the parameter planes."""


class SupnFormatError(ValueError):
    """Raised when a SUPN container cannot be decoded."""


@dataclass(frozen=True)
class NeighborhoodLayout:
    window: int
    channels: int = 1
    offsets: tuple[tuple[int, int], ...] = field(default=())

    @property
    def half_width(self) -> int:
        return self.window // 2

    @property
    def intra_pixel_couplings(self) -> int:
        return 1 if self.channels == 2 else 0

    def __len__(self) -> int:
        return len(self.offsets)


def offset_set(window: int, channels: int = 1) -> NeighborhoodLayout:
    """Causal lattice offsets ``(dy, dx)`` for a ``window x window`` stencil.

    The neighbour of pixel ``(y, x)`` at offset ``(dy, dx)`` is
    ``(y - dy, x - dx)``, which always precedes it in raster order.

    >>> len(offset_set(5)), len(offset_set(8)), len(offset_set(1))
    (12, 40, 0)
    """
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    if channels not in (1, 2):
        raise ValueError(f"channels must be 1 or 2, got {channels}")
    hw = window // 2
    offsets = [(0, dx) for dx in range(1, hw + 1)]
    offsets += [(dy, dx) for dy in range(1, hw + 1) for dx in range(-hw, hw + 1)]
    return NeighborhoodLayout(window=window, channels=channels, offsets=tuple(offsets))


def _slices(dy: int, dx: int, h: int, w: int):
    """Anchor-pixel and neighbour-pixel slices for one offset.

    Empty when the offset never fits inside the image.
    """
    # stops are clamped so oversized offsets give empty slices instead of wrapping
    anchor = (slice(dy, h), slice(max(dx, 0), max(w + min(dx, 0), 0)))
    neigh = (slice(0, max(h - dy, 0)), slice(max(-dx, 0), max(w - max(dx, 0), 0)))
    return anchor, neigh


def valid_mask(layout: NeighborhoodLayout, height: int, width: int) -> np.ndarray:
    """Boolean ``(K, H, W)`` mask of anchors whose neighbour is in bounds."""
    mask = np.zeros((len(layout), height, width), dtype=bool)
    for k, (dy, dx) in enumerate(layout.offsets):
        a, _ = _slices(dy, dx, height, width)
        mask[k][a] = True
    return mask


@dataclass(frozen=True, eq=False)
class SupnParams:
    """Parameters of one component's Gaussian.

    Attributes
    ----------
    mu, log_diag : ndarray, shape (H, W, C)
    off_diag : ndarray, shape (K, H, W, C, C)
        ``off_diag[k, y, x, a, b]`` is ``L[(y, x, a), (y - dy_k, x - dx_k, b)]``.
        Entries whose neighbour falls outside the image are ignored.
    intra : ndarray, shape (H, W), or None
        ``L[(y, x, Cr), (y, x, Cb)]``; present only for two-channel layouts.
    """

    layout: NeighborhoodLayout
    mu: np.ndarray
    log_diag: np.ndarray
    off_diag: np.ndarray
    intra: np.ndarray | None = None
    component: str = ""

    def __post_init__(self):
        h, w, c = self.mu.shape
        if c != self.layout.channels:
            raise ShapeError(f"mu has {c} channels, layout expects {self.layout.channels}")
        if self.log_diag.shape != self.mu.shape:
            raise ShapeError(f"log_diag shape {self.log_diag.shape} != mu shape {self.mu.shape}")
        expected = (len(self.layout), h, w, c, c)
        if self.off_diag.shape != expected:
            raise ShapeError(f"off_diag shape {self.off_diag.shape} != {expected}")
        if c == 2 and (self.intra is None or self.intra.shape != (h, w)):
            raise ShapeError("two-channel params need an (H, W) intra-pixel plane")
        if c == 1 and self.intra is not None:
            raise ShapeError("single-channel params cannot carry an intra-pixel plane")
        for name in ("mu", "log_diag", "off_diag", "intra"):
            arr = getattr(self, name)
            if arr is not None and not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")

    @property
    def height(self) -> int:
        return self.mu.shape[0]

    @property
    def width(self) -> int:
        return self.mu.shape[1]

    @property
    def channels(self) -> int:
        return self.mu.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.mu.shape

    @property
    def size(self) -> int:
        return self.mu.size

    @property
    def diag(self) -> np.ndarray:
        return np.exp(self.log_diag)

    def with_arrays(self, **kwargs) -> "SupnParams":
        return replace(self, **kwargs)

    def astype(self, dtype) -> "SupnParams":
        return replace(
            self,
            mu=self.mu.astype(dtype),
            log_diag=self.log_diag.astype(dtype),
            off_diag=self.off_diag.astype(dtype),
            intra=None if self.intra is None else self.intra.astype(dtype),
        )


def zero_params(layout: NeighborhoodLayout, mu: np.ndarray, log_diag=0.0, component="") -> SupnParams:
    """Parameters with the given mean, constant log-diagonal and no couplings."""
    mu = np.asarray(mu, dtype=np.float64)
    h, w, c = mu.shape
    return SupnParams(
        layout=layout,
        mu=mu.copy(),
        log_diag=np.broadcast_to(np.asarray(log_diag, dtype=np.float64), mu.shape).copy(),
        off_diag=np.zeros((len(layout), h, w, c, c)),
        intra=np.zeros((h, w)) if c == 2 else None,
        component=component,
    )


def random_params(layout: NeighborhoodLayout, height: int, width: int, rng, scale=0.3) -> SupnParams:
    """Random well-conditioned parameters, for tests and demos."""
    c = layout.channels
    shape = (height, width, c)
    return SupnParams(
        layout=layout,
        mu=rng.uniform(0, 1, shape),
        log_diag=rng.uniform(-0.3, 0.3, shape),
        off_diag=rng.normal(0, scale, (len(layout), height, width, c, c)),
        intra=rng.normal(0, scale, (height, width)) if c == 2 else None,
    )


# -- core linear maps -----------------------------------------------------


def _as_batch(params: SupnParams, y) -> tuple[np.ndarray, bool]:
    y = np.asarray(y, dtype=np.float64)
    if y.shape == params.shape:
        return y[None], True
    if y.ndim == 4 and y.shape[1:] == params.shape:
        return y, False
    raise ShapeError(f"observation shape {y.shape} does not match params shape {params.shape}")


def _apply_lt(params: SupnParams, r: np.ndarray) -> np.ndarray:
    """``L^T r`` for a batch ``r`` of shape (B, H, W, C)."""
    h, w = params.height, params.width
    s = params.diag * r
    for k, (dy, dx) in enumerate(params.layout.offsets):
        a, n = _slices(dy, dx, h, w)
        blk = params.off_diag[k][a]
        # s[p - delta, b] += sum_a L[(p, a), (p - delta, b)] r[p, a]
        s[:, n[0], n[1]] += np.einsum("bhwa,hwac->bhwc", r[:, a[0], a[1]], blk)
    if params.intra is not None:
        s[..., 0] += params.intra * r[..., 1]
    return s


def _apply_l(params: SupnParams, v: np.ndarray) -> np.ndarray:
    """``L v`` for a batch ``v`` of shape (B, H, W, C)."""
    h, w = params.height, params.width
    out = params.diag * v
    for k, (dy, dx) in enumerate(params.layout.offsets):
        a, n = _slices(dy, dx, h, w)
        blk = params.off_diag[k][a]
        out[:, a[0], a[1]] += np.einsum("hwac,bhwc->bhwa", blk, v[:, n[0], n[1]])
    if params.intra is not None:
        out[..., 1] += params.intra * v[..., 0]
    return out


def apply_l(params: SupnParams, v) -> np.ndarray:
    vb, single = _as_batch(params, v)
    out = _apply_l(params, vb)
    return out[0] if single else out


def whiten(params: SupnParams, y) -> np.ndarray:
    """Whitened residual ``s = L^T (y - mu)``.

    ``y`` may be a single plane ``(H, W, C)`` or a batch ``(B, H, W, C)``.
    """
    yb, single = _as_batch(params, y)
    s = _apply_lt(params, yb - params.mu)
    return s[0] if single else s


def log_prob(params: SupnParams, y):
    """Gaussian log-density of ``y``; a scalar, or one value per batch item."""
    yb, single = _as_batch(params, y)
    if not np.all(np.isfinite(yb)):
        raise ValueError("observation contains non-finite values")
    s = _apply_lt(params, yb - params.mu)
    n = params.size
    const = params.log_diag.sum() - 0.5 * n * LOG_2PI
    lp = const - 0.5 * np.einsum("bhwc,bhwc->b", s, s)
    return float(lp[0]) if single else lp


class ParamGrads(NamedTuple):
    mu: np.ndarray
    log_diag: np.ndarray
    off_diag: np.ndarray
    intra: np.ndarray | None


def weighted_param_grads(params: SupnParams, y: np.ndarray, coef: np.ndarray):
    """Gradient of ``sum_b coef[b] * log_prob(params, y[b])``.

    ``coef`` may be a callable mapping the batch log-probs to coefficients.
    Returns ``(log_probs, ParamGrads)``. Shares one whitening pass between the
    density and all parameter classes.
    """
    yb, _ = _as_batch(params, y)
    h, w = params.height, params.width
    d = params.diag
    r = yb - params.mu
    s = _apply_lt(params, r)
    n = params.size
    lp = params.log_diag.sum() - 0.5 * n * LOG_2PI - 0.5 * np.einsum("bhwc,bhwc->b", s, s)
    if callable(coef):
        coef = coef(lp)
    coef = np.asarray(coef, dtype=np.float64)

    cs = np.tensordot(coef, s, axes=1)  # sum_b c_b s_b
    g_mu = _apply_l(params, cs[None])[0]
    g_ld = coef.sum() - d * np.einsum("b,bhwc,bhwc->hwc", coef, s, r)
    g_off = np.zeros_like(params.off_diag)
    cr = coef[:, None, None, None] * r
    for k, (dy, dx) in enumerate(params.layout.offsets):
        a, nb = _slices(dy, dx, h, w)
        g_off[k][a] = -np.einsum("bhwa,bhwc->hwac", cr[:, a[0], a[1]], s[:, nb[0], nb[1]])
    g_intra = None
    if params.intra is not None:
        g_intra = -np.einsum("bhw,bhw->hw", cr[..., 1], s[..., 0])
    return lp, ParamGrads(g_mu, g_ld, g_off, g_intra)


def grad_logprob_params(params: SupnParams, y) -> ParamGrads:
    """Closed-form gradient of :func:`log_prob` with respect to every parameter.

    ``d/d mu = L L^T r``, ``d/d log_diag_i = 1 - s_i r_i d_i`` and
    ``d/d L_ij = -s_j r_i`` for each stored coupling, with ``r = y - mu`` and
    ``s = L^T r``. Off-diagonal gradients at out-of-bounds anchors are zero.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape != params.shape:
        raise ShapeError(f"observation shape {y.shape} does not match params shape {params.shape}")
    _, g = weighted_param_grads(params, y[None], np.ones(1))
    return g


def grad_logprob_obs(params: SupnParams, y) -> np.ndarray:
    """``d log_prob / d y = -L L^T (y - mu)``."""
    yb, single = _as_batch(params, y)
    g = -_apply_l(params, _apply_lt(params, yb - params.mu))
    return g[0] if single else g


# -- sampling -------------------------------------------------------------


def _coupling_coo(params: SupnParams):
    """Flat (row, col, value) triplets of every stored off-diagonal entry."""
    h, w, c = params.shape
    idx = np.arange(h * w * c).reshape(h, w, c)
    rows, cols, vals = [], [], []
    for k, (dy, dx) in enumerate(params.layout.offsets):
        a, nb = _slices(dy, dx, h, w)
        ri = np.broadcast_to(idx[a][..., :, None], params.off_diag[k][a].shape)
        ci = np.broadcast_to(idx[nb][..., None, :], params.off_diag[k][a].shape)
        rows.append(ri.ravel())
        cols.append(ci.ravel())
        vals.append(params.off_diag[k][a].ravel())
    if params.intra is not None:
        rows.append(idx[..., 1].ravel())
        cols.append(idx[..., 0].ravel())
        vals.append(params.intra.ravel())
    if not rows:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, np.zeros(0)
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


def _solve_lt(params: SupnParams, z: np.ndarray) -> np.ndarray:
    """Solve ``L^T x = z`` for ``z`` of shape (n, S) by back-substitution.

    Column ``j`` of ``L`` holds the couplings from later variables into ``j``,
    so variables are resolved in reverse order.
    """
    rows, cols, vals = _coupling_coo(params)
    order = np.argsort(cols, kind="stable")
    rows, cols, vals = rows[order], cols[order], vals[order]
    n = params.size
    ptr = np.searchsorted(cols, np.arange(n + 1))
    d = params.diag.ravel()
    x = np.empty_like(z)
    for j in range(n - 1, -1, -1):
        lo, hi = ptr[j], ptr[j + 1]
        acc = z[j]
        if hi > lo:
            acc = acc - vals[lo:hi] @ x[rows[lo:hi]]
        x[j] = acc / d[j]
    return x


def sample(params: SupnParams, rng_seed, count: int | None = None) -> np.ndarray:
    """Exact draw(s) from ``N(mu, (L L^T)^-1)``.

    Returns one plane, or ``count`` planes stacked along a leading axis.
    """
    rng = np.random.default_rng(rng_seed)
    m = 1 if count is None else count
    z = rng.standard_normal((params.size, m))
    x = _solve_lt(params, z).T.reshape((m,) + params.shape) + params.mu
    return x[0] if count is None else x


class RankedSamples(NamedTuple):
    lowest: np.ndarray
    median: np.ndarray
    highest: np.ndarray
    log_probs: tuple[float, float, float]


def sample_ranked(params: SupnParams, count: int, rng_seed) -> RankedSamples:
    """Draw ``count`` samples and keep the least, median and most probable."""
    if count < 3:
        raise ValueError(f"count must be >= 3, got {count}")
    xs = sample(params, rng_seed, count=count)
    lps = log_prob(params, xs)
    order = np.argsort(lps, kind="stable")
    lo, med, hi = order[0], order[count // 2], order[-1]
    return RankedSamples(xs[lo], xs[med], xs[hi], (float(lps[lo]), float(lps[med]), float(lps[hi])))


# -- dense oracle ---------------------------------------------------------


def dense_materialize(params: SupnParams) -> np.ndarray:
    """Explicit ``n x n`` lower-triangular factor, built entry by entry."""
    h, w, c = params.shape
    n = h * w * c
    if n > DENSE_LIMIT:
        raise ValueError(f"dense_materialize is capped at {DENSE_LIMIT} variables, got {n}")

    def var(y, x, ch):
        return (y * w + x) * c + ch

    L = np.zeros((n, n))
    for y in range(h):
        for x in range(w):
            for ch in range(c):
                L[var(y, x, ch), var(y, x, ch)] = math.exp(params.log_diag[y, x, ch])
            for k, (dy, dx) in enumerate(params.layout.offsets):
                ny, nx = y - dy, x - dx
                if not (0 <= ny < h and 0 <= nx < w):
                    continue
                for a in range(c):
                    for b in range(c):
                        L[var(y, x, a), var(ny, nx, b)] = params.off_diag[k, y, x, a, b]
            if c == 2:
                L[var(y, x, 1), var(y, x, 0)] = params.intra[y, x]
    return L


# -- container IO ---------------------------------------------------------


def _plane_order(layout: NeighborhoodLayout) -> list[str]:
    names = ["mu", "log_diag"] + [f"off_diag[{dy},{dx}]" for dy, dx in layout.offsets]
    if layout.channels == 2:
        names.append("intra")
    return names


def encode_supn(params: SupnParams) -> bytes:
    header = {
        "component_id": params.component,
        "width": params.width,
        "height": params.height,
        "channels": params.channels,
        "window": params.layout.window,
        "offsets": [list(o) for o in params.layout.offsets],
        "plane_order": _plane_order(params.layout),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    arrays = [params.mu, params.log_diag] + list(params.off_diag)
    if params.intra is not None:
        arrays.append(params.intra)
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)
    return SUPN_MAGIC + struct.pack("<II", SUPN_VERSION, len(hbytes)) + hbytes + payload


def decode_supn(data: bytes) -> SupnParams:
    if len(data) < 12:
        raise SupnFormatError("truncated payload: container shorter than its fixed preamble")
    if data[:4] != SUPN_MAGIC:
        raise SupnFormatError(f"bad magic: expected {SUPN_MAGIC!r}, found {data[:4]!r}")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != SUPN_VERSION:
        raise SupnFormatError(f"version mismatch: container is v{version}, reader supports v{SUPN_VERSION}")
    if len(data) < 12 + hlen:
        raise SupnFormatError("truncated payload: header extends past end of data")
    try:
        header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
        h, w, c = int(header["height"]), int(header["width"]), int(header["channels"])
        window = int(header["window"])
        offsets = tuple((int(dy), int(dx)) for dy, dx in header["offsets"])
    except (ValueError, KeyError, TypeError) as exc:
        raise SupnFormatError(f"malformed header: {exc}") from exc
    layout = offset_set(window, channels=c)
    if layout.offsets != offsets:
        raise SupnFormatError("header offset list does not match the layout for its window")
    if header.get("plane_order") != _plane_order(layout):
        raise SupnFormatError("header plane order is not recognised")
    k = len(offsets)
    counts = [h * w * c, h * w * c] + [h * w * c * c] * k + ([h * w] if c == 2 else [])
    payload = data[12 + hlen :]
    expected = 4 * sum(counts)
    if len(payload) % 4:
        raise SupnFormatError(
            f"truncated payload: {len(payload)} bytes is not a whole number of float32 values "
            f"(header declares {expected})"
        )
    if len(payload) != expected:
        raise SupnFormatError(
            f"size mismatch: header declares {w}x{h}x{c} ({expected} payload bytes), "
            f"payload holds {len(payload)} bytes"
        )
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    parts = np.split(flat, np.cumsum(counts)[:-1])
    return SupnParams(
        layout=layout,
        mu=parts[0].reshape(h, w, c),
        log_diag=parts[1].reshape(h, w, c),
        off_diag=np.stack([p.reshape(h, w, c, c) for p in parts[2 : 2 + k]])
        if k
        else np.zeros((0, h, w, c, c)),
        intra=parts[2 + k].reshape(h, w) if c == 2 else None,
        component=str(header.get("component_id", "")),
    )


def save_supn(params: SupnParams, path) -> None:
    Path(path).write_bytes(encode_supn(params))


def load_supn(path) -> SupnParams:
    return decode_supn(Path(path).read_bytes())


def to_storage_precision(params: SupnParams) -> SupnParams:
    """Round every plane through float32, the container's storage type."""
    return params.astype(np.float32).astype(np.float64)
