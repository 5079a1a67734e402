"""Sampling masks, synthetic coil maps, and the Fourier measurement operators.

Conventions fixed here and relied on everywhere else:

* The 2-D DFT is orthonormal (``norm="ortho"`` both directions), so the
  measurement operator A satisfies ||A^H A|| <= 1 and the regularization
  weight keeps one scale across image sizes.
* k-space is centered: the DC coefficient sits at ``(h//2, w//2)``, matching
  the mask geometry. ``fft2c``/``ifft2c`` are exact adjoints/inverses of
  each other.
* Multi-channel arrays are ``(H, W, C)`` with coils on the last axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ParameterError

SINGLE = "single"
MULTI = "multi"

# fraction of min(H, W) used as the std of the variable-density law
_VD_SIGMA_FRAC = 0.15
# fully sampled center block is ceil(0.04*H) x ceil(0.04*W)
_VD_CENTER_FRAC = 0.04


def fft2c(x, axes=(0, 1)):
    """Centered orthonormal 2-D DFT over ``axes``."""
    return np.fft.fftshift(
        np.fft.fft2(np.fft.ifftshift(x, axes=axes), axes=axes, norm="ortho"), axes=axes
    )


def ifft2c(y, axes=(0, 1)):
    """Inverse (= adjoint) of :func:`fft2c`."""
    return np.fft.fftshift(
        np.fft.ifft2(np.fft.ifftshift(y, axes=axes), axes=axes, norm="ortho"), axes=axes
    )


def center_block_slices(h, w, kh, kw):
    """Slices of the centered ``kh x kw`` block on an ``h x w`` grid."""
    r0 = h // 2 - kh // 2
    c0 = w // 2 - kw // 2
    return slice(r0, r0 + kh), slice(c0, c0 + kw)


@dataclass
class SamplingMask:
    """Boolean Cartesian k-space mask (True = location acquired)."""

    mask: np.ndarray
    acceleration: float
    seed: int

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 2:
            raise DimensionError(f"mask must be 2-D, got {self.mask.ndim}-D")

    @property
    def shape(self):
        return self.mask.shape

    @property
    def fraction_sampled(self) -> float:
        return float(self.mask.mean())


def make_vd_mask(h, w, acceleration, seed, per_line=False) -> SamplingMask:
    """Variable-density random Cartesian mask with a fully sampled center.

    Inclusion weight falls off as ``exp(-d^2 / (2*(0.15*min(h,w))^2))`` with
    ``d`` the distance from the k-space center. Exactly ``round(h*w/R)``
    locations are sampled (weighted sampling without replacement via Gumbel
    top-k), so the sampled fraction always sits within rounding of ``1/R``.
    The centered ``ceil(0.04h) x ceil(0.04w)`` block is always included.

    ``per_line=True`` samples whole readout rows instead of individual
    locations, with the same 1-D density law over rows.
    """
    if acceleration < 1:
        raise ParameterError(f"acceleration must be >= 1, got {acceleration}")
    if h < 16 or w < 16:
        raise ParameterError(f"grid must be at least 16x16, got {h}x{w}")

    rng = np.random.default_rng(seed)
    mask = np.zeros((h, w), dtype=bool)

    if per_line:
        n_target = round(h / acceleration)
        rows = np.arange(h)
        logw = -((rows - h // 2) ** 2) / (2.0 * (_VD_SIGMA_FRAC * h) ** 2)
        kh = math.ceil(_VD_CENTER_FRAC * h)
        rsl, _ = center_block_slices(h, w, kh, 1)
        center = np.zeros(h, dtype=bool)
        center[rsl] = True
        chosen = _gumbel_topk(logw, center, n_target, rng)
        mask[chosen, :] = True
    else:
        n_target = round(h * w / acceleration)
        ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        d2 = (ii - h // 2) ** 2.0 + (jj - w // 2) ** 2.0
        logw = (-d2 / (2.0 * (_VD_SIGMA_FRAC * min(h, w)) ** 2)).ravel()
        rsl, csl = center_block_slices(h, w, math.ceil(_VD_CENTER_FRAC * h), math.ceil(_VD_CENTER_FRAC * w))
        center = np.zeros((h, w), dtype=bool)
        center[rsl, csl] = True
        chosen = _gumbel_topk(logw, center.ravel(), n_target, rng)
        mask.ravel()[chosen] = True

    return SamplingMask(mask=mask, acceleration=float(acceleration), seed=int(seed))


def _gumbel_topk(logw, forced, n_target, rng):
    """Indices of ``n_target`` entries: all of ``forced`` plus a weighted
    without-replacement draw from the rest (Gumbel top-k on ``logw``)."""
    n = logw.size
    n_forced = int(forced.sum())
    if n_target >= n:
        return np.arange(n)
    if n_target < n_forced:
        raise ParameterError(
            f"acceleration too high: target {n_target} samples cannot cover the "
            f"{n_forced}-sample fully sampled center"
        )
    keys = logw + rng.gumbel(size=n)
    keys[forced] = np.inf
    # argpartition gives an unordered top-k deterministically for fixed input
    return np.argpartition(keys, n - n_target)[n - n_target:]


def make_lowpass_mask(h, w, kh, kw) -> SamplingMask:
    """Mask that keeps exactly the centered ``kh x kw`` k-space block."""
    if kh > h or kw > w or kh < 1 or kw < 1:
        raise ParameterError(f"block {kh}x{kw} does not fit in grid {h}x{w}")
    mask = np.zeros((h, w), dtype=bool)
    rsl, csl = center_block_slices(h, w, kh, kw)
    mask[rsl, csl] = True
    return SamplingMask(mask=mask, acceleration=h * w / (kh * kw), seed=0)


@dataclass
class CoilMaps:
    """Per-coil complex sensitivity maps, shape ``(H, W, C)``.

    Invariant: the sum over coils of ``|s_i(p)|^2`` is 1 at every pixel.
    """

    maps: np.ndarray

    def __post_init__(self):
        self.maps = np.asarray(self.maps)
        if self.maps.ndim != 3:
            raise DimensionError(f"coil maps must be (H, W, C), got shape {self.maps.shape}")

    @property
    def ncoils(self) -> int:
        return self.maps.shape[2]

    @property
    def shape(self):
        return self.maps.shape[:2]


def make_synthetic_coils(h, w, ncoils, seed) -> CoilMaps:
    """Smooth synthetic coil sensitivities normalized to unit sum-of-squares.

    Magnitudes are Gaussian bumps (width ``0.5*min(h,w)``) centered at evenly
    spaced points on an ellipse near the image border; each coil carries a
    smooth linear phase drawn from ``seed``. Stands in for measured maps,
    which are inputs to this package rather than something it estimates.
    """
    if ncoils < 1:
        raise ParameterError(f"ncoils must be >= 1, got {ncoils}")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    width = 0.5 * min(h, w)
    maps = np.empty((h, w, ncoils), dtype=np.complex128)
    for i in range(ncoils):
        theta = 2.0 * np.pi * i / ncoils
        cy = (h - 1) / 2.0 * (1.0 + 0.9 * np.sin(theta))
        cx = (w - 1) / 2.0 * (1.0 + 0.9 * np.cos(theta))
        mag = np.exp(-(((yy - cy) ** 2) + ((xx - cx) ** 2)) / (2.0 * width**2))
        slope = rng.uniform(-0.5, 0.5, size=2)
        phase = 2.0 * np.pi * (slope[0] * yy / h + slope[1] * xx / w) + rng.uniform(-np.pi, np.pi)
        maps[:, :, i] = mag * np.exp(1j * phase)
    sos = np.sqrt((np.abs(maps) ** 2).sum(axis=2))
    maps /= sos[:, :, None]
    return CoilMaps(maps=maps)


@dataclass
class ForwardModel:
    """Measurement operator A = (mask o DFT), optionally coil-weighted.

    ``kind`` is ``"single"`` (A = S F) or ``"multi"`` (A_i = S F diag(s_i)
    per coil). ``noise_sigma`` is a default per-component k-space noise std
    for :func:`simulate_measurement`.
    """

    kind: str
    mask: SamplingMask
    coils: CoilMaps | None = None
    noise_sigma: float = 0.0
    _workspace: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in (SINGLE, MULTI):
            raise ParameterError(f"kind must be '{SINGLE}' or '{MULTI}', got {self.kind!r}")
        if self.noise_sigma < 0:
            raise ParameterError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.kind == MULTI:
            if self.coils is None:
                raise ParameterError("multi-channel model requires coil maps")
            if self.coils.shape != self.mask.shape:
                raise DimensionError(
                    f"coil maps {self.coils.shape} do not match mask {self.mask.shape}"
                )
        elif self.coils is not None:
            raise ParameterError("single-channel model must not carry coil maps")

    @classmethod
    def single_channel(cls, mask, noise_sigma=0.0):
        return cls(kind=SINGLE, mask=mask, noise_sigma=noise_sigma)

    @classmethod
    def multi_channel(cls, mask, coils, noise_sigma=0.0):
        return cls(kind=MULTI, mask=mask, coils=coils, noise_sigma=noise_sigma)

    @property
    def image_shape(self):
        return self.mask.shape

    @property
    def data_shape(self):
        if self.kind == SINGLE:
            return self.mask.shape
        return self.mask.shape + (self.coils.ncoils,)


def _check_image(model, x):
    x = np.asarray(x)
    if x.shape != model.image_shape:
        raise DimensionError(f"image shape {x.shape} does not match model {model.image_shape}")
    if not np.iscomplexobj(x):
        x = x.astype(np.complex128)
    return x


def _coils_like(model, dtype):
    maps = model.coils.maps
    if maps.dtype != dtype:
        maps = maps.astype(dtype)
    return maps


def forward(model: ForwardModel, x):
    """Apply A: masked centered DFT of ``x`` (per coil-weighted copy if
    multi-channel). Off-mask entries are zero; the full grid is returned."""
    x = _check_image(model, x)
    m = model.mask.mask
    if model.kind == SINGLE:
        return fft2c(x) * m
    cx = _coils_like(model, x.dtype) * x[:, :, None]
    return fft2c(cx, axes=(0, 1)) * m[:, :, None]


def adjoint(model: ForwardModel, y):
    """Apply A^H, the exact adjoint of :func:`forward` under the standard
    complex inner product. ``adjoint(forward(.))`` is the zero-filled recon."""
    y = np.asarray(y)
    if y.shape != model.data_shape:
        raise DimensionError(f"data shape {y.shape} does not match model {model.data_shape}")
    if not np.iscomplexobj(y):
        y = y.astype(np.complex128)
    m = model.mask.mask
    if model.kind == SINGLE:
        return ifft2c(y * m)
    im = ifft2c(y * m[:, :, None], axes=(0, 1))
    return (np.conj(_coils_like(model, y.dtype)) * im).sum(axis=2)


def normal(model: ForwardModel, x):
    """A^H A as one call; literally the composition, so it matches
    ``adjoint(forward(x))`` bit for bit."""
    return adjoint(model, forward(model, x))


def simulate_measurement(model: ForwardModel, x_true, noise_sigma=None, seed=0):
    """b = A x_true + n, with complex white Gaussian noise (per-component
    std ``noise_sigma``) added on acquired k-space locations only."""
    sigma = model.noise_sigma if noise_sigma is None else noise_sigma
    if sigma < 0:
        raise ParameterError(f"noise_sigma must be >= 0, got {sigma}")
    b = forward(model, x_true)
    if sigma > 0:
        rng = np.random.default_rng(seed)
        noise = sigma * (
            rng.standard_normal(b.shape) + 1j * rng.standard_normal(b.shape)
        )
        m = model.mask.mask if model.kind == SINGLE else model.mask.mask[:, :, None]
        b = b + noise.astype(b.dtype) * m
    return b
