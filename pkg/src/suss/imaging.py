"""Image IO, colour conversions and the four-component perceptual decomposition.

Images are ``(H, W, 3)`` float64 arrays in ``[0, 1]``. Planes are ``(H, W, C)``
arrays with ``C`` equal to 1 (luminance) or 2 (interleaved Cb, Cr).
"""

from __future__ import annotations

from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image

COMPONENTS = ("y_full", "y_half", "y_quarter", "cbcr_quarter")
COMPONENT_SCALES = (1, 2, 4, 4)

# full-range BT.601 (JPEG) matrix; rows Y, Cb, Cr
YCBCR_MATRIX = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ]
)
YCBCR_OFFSET = np.array([0.0, 0.5, 0.5])
_YCBCR_INVERSE = np.linalg.inv(YCBCR_MATRIX)

# sRGB (linear) -> XYZ, D65
_RGB_TO_XYZ = np.array(
    [
        [0.412453, 0.357580, 0.180423],
        [0.212671, 0.715160, 0.072169],
        [0.019334, 0.119193, 0.950227],
    ]
)
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)
_D65_WHITE = _RGB_TO_XYZ @ np.ones(3)


class ImageError(ValueError):
    """Raised for images that violate dimension or value constraints."""


class ImageDecodeError(OSError):
    """Raised when an image file cannot be read or decoded."""


class Decomposition(NamedTuple):
    """The four perceptual components, always in this order."""

    y_full: np.ndarray
    y_half: np.ndarray
    y_quarter: np.ndarray
    cbcr_quarter: np.ndarray


def check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ImageError(f"expected an (H, W, 3) image, got shape {img.shape}")
    h, w = img.shape[:2]
    if h < 8 or w < 8 or h % 4 or w % 4:
        raise ImageError(
            f"image is {w}x{h}; width and height must be >= 8 and divisible by 4"
        )
    if not np.all(np.isfinite(img)):
        raise ImageError("image contains non-finite values")
    return img


def center_crop_to_multiple(img: np.ndarray, multiple: int = 4) -> np.ndarray:
    h, w = img.shape[:2]
    nh, nw = h - h % multiple, w - w % multiple
    top, left = (h - nh) // 2, (w - nw) // 2
    return img[top : top + nh, left : left + nw]


# -- colour ---------------------------------------------------------------


def rgb_to_ycbcr(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Full-range BT.601 conversion.

    Returns the luminance plane ``(H, W, 1)`` and the interleaved chroma
    plane ``(H, W, 2)``, with Cb and Cr centred at 0.5.
    """
    ycc = np.asarray(img, dtype=np.float64) @ YCBCR_MATRIX.T + YCBCR_OFFSET
    return ycc[..., :1], ycc[..., 1:]


def ycbcr_to_rgb(y: np.ndarray, cbcr: np.ndarray) -> np.ndarray:
    ycc = np.concatenate([y, cbcr], axis=-1) - YCBCR_OFFSET
    return ycc @ _YCBCR_INVERSE.T


def _srgb_to_linear(c):
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(c):
    c = np.clip(c, 0.0, None)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1 / 2.4) - 0.055)


def _lab_f(t):
    delta = 6.0 / 29.0
    return np.where(t > delta**3, np.cbrt(t), t / (3 * delta**2) + 4.0 / 29.0)


def _lab_finv(t):
    delta = 6.0 / 29.0
    return np.where(t > delta, t**3, 3 * delta**2 * (t - 4.0 / 29.0))


def rgb_to_lab(img: np.ndarray) -> np.ndarray:
    """sRGB in ``[0, 1]`` to CIELAB (D65). Returns an ``(H, W, 3)`` array."""
    xyz = _srgb_to_linear(np.asarray(img, dtype=np.float64)) @ _RGB_TO_XYZ.T
    f = _lab_f(xyz / _D65_WHITE)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def lab_to_rgb(lab: np.ndarray) -> np.ndarray:
    """CIELAB (D65) back to sRGB; out-of-gamut values are clipped to [0, 1]."""
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    xyz = _lab_finv(np.stack([fx, fy, fz], axis=-1)) * _D65_WHITE
    rgb = _linear_to_srgb(xyz @ _XYZ_TO_RGB.T)
    return np.clip(rgb, 0.0, 1.0)


# -- pyramid --------------------------------------------------------------


def downsample2x(p: np.ndarray) -> np.ndarray:
    """2x2 non-overlapping average pooling over the first two axes."""
    h, w = p.shape[:2]
    if h % 2 or w % 2:
        raise ImageError(f"downsample2x needs even dimensions, got {w}x{h}")
    return 0.25 * (p[0::2, 0::2] + p[1::2, 0::2] + p[0::2, 1::2] + p[1::2, 1::2])


def downsample2x_adjoint(g: np.ndarray) -> np.ndarray:
    return 0.25 * np.repeat(np.repeat(g, 2, axis=0), 2, axis=1)


def decompose(img: np.ndarray) -> Decomposition:
    """Split an RGB image into ``[y_full, y_half, y_quarter, cbcr_quarter]``.

    The map is affine: the only constant term is the 0.5 chroma offset, so
    ``decompose(x) - decompose(0)`` is linear with adjoint
    :func:`decompose_adjoint`.
    """
    img = check_image(img)
    y, cbcr = rgb_to_ycbcr(img)
    y_half = downsample2x(y)
    return Decomposition(
        y_full=y,
        y_half=y_half,
        y_quarter=downsample2x(y_half),
        cbcr_quarter=downsample2x(downsample2x(cbcr)),
    )


def decompose_adjoint(grads) -> np.ndarray:
    """Transpose of the linear part of :func:`decompose`.

    ``grads`` holds one array per component, shaped like a decomposition.
    Returns an ``(H, W, 3)`` array.
    """
    g_full, g_half, g_quarter, g_cbcr = (np.asarray(g, dtype=np.float64) for g in grads)
    h, w = g_full.shape[:2]
    expected = [(h, w, 1), (h // 2, w // 2, 1), (h // 4, w // 4, 1), (h // 4, w // 4, 2)]
    got = [g_full.shape, g_half.shape, g_quarter.shape, g_cbcr.shape]
    if got != expected or h % 4 or w % 4:
        raise ImageError(f"gradient shapes {got} do not match a decomposition {expected}")
    gy = g_full + downsample2x_adjoint(g_half + downsample2x_adjoint(g_quarter))
    gc = downsample2x_adjoint(downsample2x_adjoint(g_cbcr))
    return np.concatenate([gy, gc], axis=-1) @ YCBCR_MATRIX


# -- file IO --------------------------------------------------------------


def _read_ppm(data: bytes) -> np.ndarray:
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageDecodeError("truncated PPM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise ImageDecodeError(f"unsupported PPM magic {tokens[0]!r}; only binary P6 is read")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageDecodeError("malformed PPM header") from exc
    if maxval != 255:
        raise ImageDecodeError(f"unsupported PPM bit depth (maxval {maxval}); only 8-bit is read")
    pos += 1  # single whitespace after maxval
    payload = data[pos : pos + w * h * 3]
    if len(payload) != w * h * 3:
        raise ImageDecodeError(
            f"truncated PPM payload: expected {w * h * 3} bytes, found {len(payload)}"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)


def _read_png(path: Path, data: bytes) -> np.ndarray:
    if len(data) < 33 or data[12:16] != b"IHDR":
        raise ImageDecodeError(f"{path}: truncated PNG header")
    bit_depth = data[24]
    if bit_depth > 8:
        raise ImageDecodeError(f"{path}: unsupported PNG bit depth {bit_depth}; only 8-bit is read")
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, SyntaxError, ValueError) as exc:
        raise ImageDecodeError(f"{path}: cannot decode PNG ({exc})") from exc
    return arr


def load_image_bytes(path) -> np.ndarray:
    """Read a PNG or binary PPM file as an ``(H, W, 3)`` uint8 array."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ImageDecodeError(f"{path}: {exc.strerror or exc}") from exc
    if data.startswith(b"\x89PNG\r\n\x1a\n"):
        return _read_png(path, data)
    if data[:2] in (b"P6", b"P3", b"P5"):
        return _read_ppm(data)
    raise ImageDecodeError(f"{path}: not a PNG or PPM file")


def load_image(path) -> np.ndarray:
    """Load an 8-bit PNG/PPM image mapped to ``[0, 1]`` by ``v / 255``."""
    return load_image_bytes(path).astype(np.float64) / 255.0


def to_bytes(img: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(img) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def save_image(img: np.ndarray, path) -> None:
    """Write an RGB image in ``[0, 1]`` as 8-bit PNG (round half up, clipped)."""
    arr = to_bytes(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(Path(path), format="PNG")


def write_ppm(arr: np.ndarray, path) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    h, w = arr.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + arr.tobytes())

