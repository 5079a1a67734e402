"""Image-quality metrics."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, ParameterError

# a perfect reconstruction would be +inf dB; report this sentinel instead
PSNR_CAP_DB = 300.0


def psnr(recon, target) -> float:
    """Peak signal-to-noise ratio in dB: 20*log10(peak / rmse).

    The peak is max|target| of the individual image and the RMSE is taken
    on the complex residual magnitude, so the value is invariant to pixel
    permutations and to a global phase rotation of both images. A perfect
    match returns the 300 dB cap.
    """
    recon = np.asarray(recon)
    target = np.asarray(target)
    if recon.shape != target.shape:
        raise DimensionError(f"shapes differ: {recon.shape} vs {target.shape}")
    peak = float(np.abs(target).max())
    if peak == 0.0:
        raise ParameterError("PSNR is undefined for an identically zero target")
    rmse = float(np.sqrt(np.mean(np.abs(recon - target) ** 2)))
    if rmse == 0.0:
        return PSNR_CAP_DB
    return min(20.0 * np.log10(peak / rmse), PSNR_CAP_DB)


def summarize(values) -> dict:
    """mean/std (population)/min/max of a PSNR list."""
    arr = np.asarray(values, dtype=float)
    return {
        "mean": float(arr.mean()),
        "std": float(arr.std()),
        "min": float(arr.min()),
        "max": float(arr.max()),
    }
