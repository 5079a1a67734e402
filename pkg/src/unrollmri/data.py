"""Synthetic phantom generation and on-disk datasets.

A dataset is a directory of MTF tensors (targets, one shared coil-map file)
plus a plain-text manifest. Masks are not stored: each sample carries a mask
seed and masks are regenerated on load, with train/val and test seeds drawn
from disjoint streams so test-time sampling patterns never occur in
training.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ParameterError
from .operators import CoilMaps, make_synthetic_coils
from .rng import child_seed
from .tensors import tensor_load, tensor_save

SPLITS = ("train", "val", "test")


@dataclass
class PhantomSpec:
    """Knobs for the random piecewise-constant ellipse phantoms."""

    h: int = 64
    w: int = 64
    n_ellipses: tuple = (4, 10)
    texture_amp: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.n_ellipses, int):
            self.n_ellipses = (self.n_ellipses, self.n_ellipses)
        lo, hi = self.n_ellipses
        if lo < 0 or hi < lo:
            raise ParameterError(f"bad ellipse count range {self.n_ellipses}")
        if self.texture_amp < 0:
            raise ParameterError(f"texture_amp must be >= 0, got {self.texture_amp}")


def _smooth_field(h, w, rng, cutoff_frac=0.08):
    """Zero-mean smooth random field in [-1, 1], via Gaussian low-pass of
    white noise in the Fourier domain."""
    noise = rng.standard_normal((h, w))
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    lp = np.exp(-(fy**2 + fx**2) / (2.0 * cutoff_frac**2))
    sm = np.real(np.fft.ifft2(np.fft.fft2(noise) * lp))
    peak = np.abs(sm).max()
    return sm / peak if peak > 0 else sm


def make_phantom(spec: PhantomSpec) -> np.ndarray:
    """Random overlapping ellipses with piecewise-constant magnitudes, a
    low-amplitude smooth texture inside the support, and smooth phase.
    Magnitudes lie in [0, 1]; deterministic in ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.h, spec.w
    yy, xx = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    mag = np.zeros((h, w))
    count = int(rng.integers(spec.n_ellipses[0], spec.n_ellipses[1] + 1))
    for _ in range(count):
        cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
        ay = rng.uniform(0.08, 0.3) * h
        ax = rng.uniform(0.08, 0.3) * w
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        ry = dy * np.cos(theta) + dx * np.sin(theta)
        rx = -dy * np.sin(theta) + dx * np.cos(theta)
        inside = (ry / ay) ** 2 + (rx / ax) ** 2 <= 1.0
        mag[inside] += rng.uniform(0.2, 0.6)
    peak = mag.max()
    if peak > 1.0:
        mag /= peak
    support = mag > 0
    if spec.texture_amp > 0:
        mag = mag + spec.texture_amp * _smooth_field(h, w, rng) * support
    mag = np.clip(mag, 0.0, 1.0)
    phase = 0.5 * np.pi * _smooth_field(h, w, rng, cutoff_frac=0.04)
    return (mag * np.exp(1j * phase)).astype(np.complex128)


@dataclass
class SampleRecord:
    """Manifest row: where a sample's tensors live and its random streams."""

    sample_id: int
    split: str
    target_path: str
    coils_path: str | None
    mask_seed: int
    noise_seed: int


@dataclass
class LoadedSample:
    sample_id: int
    target: np.ndarray
    coils: CoilMaps | None
    mask_seed: int
    noise_seed: int


@dataclass
class DatasetBundle:
    """A dataset directory pulled into memory."""

    root: str
    h: int
    w: int
    accel: float
    ncoils: int
    seed: int
    records: list = field(default_factory=list)
    _tensors: dict = field(default_factory=dict, repr=False)

    def split(self, name) -> list[LoadedSample]:
        if name not in SPLITS:
            raise ParameterError(f"unknown split {name!r}")
        out = []
        for rec in self.records:
            if rec.split != name:
                continue
            coils = None
            if rec.coils_path is not None:
                coils = CoilMaps(self._tensors[rec.coils_path])
            out.append(
                LoadedSample(
                    sample_id=rec.sample_id,
                    target=self._tensors[rec.target_path],
                    coils=coils,
                    mask_seed=rec.mask_seed,
                    noise_seed=rec.noise_seed,
                )
            )
        return out


def make_dataset(
    out_dir,
    n_train,
    n_val,
    n_test,
    spec: PhantomSpec,
    accel,
    coils,
    seed,
) -> DatasetBundle:
    """Generate phantoms + coil maps, write them as MTF files, and write the
    manifest. ``coils=0`` builds a single-channel dataset. Mask/noise seeds
    for the test split come from streams disjoint from train/val."""
    for name, n in (("n_train", n_train), ("n_val", n_val), ("n_test", n_test)):
        if n < 0:
            raise ParameterError(f"{name} must be >= 0, got {n}")
    os.makedirs(os.path.join(out_dir, "targets"), exist_ok=True)

    coils_path = None
    if coils > 0:
        coil_maps = make_synthetic_coils(spec.h, spec.w, coils, child_seed(seed, "coils"))
        coils_path = "coils.mtf"
        tensor_save(coil_maps.maps, os.path.join(out_dir, coils_path))

    records = []
    sid = 0
    for split, count in zip(SPLITS, (n_train, n_val, n_test)):
        for _ in range(count):
            target = make_phantom(
                PhantomSpec(
                    h=spec.h,
                    w=spec.w,
                    n_ellipses=spec.n_ellipses,
                    texture_amp=spec.texture_amp,
                    seed=child_seed(seed, "phantom", sid),
                )
            )
            rel = f"targets/s{sid:05d}.mtf"
            tensor_save(target, os.path.join(out_dir, rel))
            records.append(
                SampleRecord(
                    sample_id=sid,
                    split=split,
                    target_path=rel,
                    coils_path=coils_path,
                    mask_seed=child_seed(seed, "mask", split, sid),
                    noise_seed=child_seed(seed, "noise", split, sid),
                )
            )
            sid += 1

    lines = [
        "# phantom dataset manifest",
        "version=1",
        f"h={spec.h}",
        f"w={spec.w}",
        f"accel={accel!r}",
        f"coils={coils}",
        f"seed={seed}",
    ]
    for split in SPLITS:
        lines.append(f"[{split}]")
        for rec in records:
            if rec.split != split:
                continue
            coils_field = rec.coils_path if rec.coils_path is not None else "-"
            lines.append(
                f"{rec.sample_id} {rec.target_path} {coils_field} {rec.mask_seed} {rec.noise_seed}"
            )
    with open(os.path.join(out_dir, "manifest.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")
    return load_dataset(out_dir)


def load_dataset(root) -> DatasetBundle:
    """Parse a manifest and load every referenced tensor."""
    path = os.path.join(root, "manifest.txt")
    header = {}
    records = []
    current_split = None
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                current_split = line[1:-1]
                if current_split not in SPLITS:
                    raise FormatError(f"unknown split section {line!r} on line {lineno}", offset=0)
                continue
            if "=" in line and current_split is None:
                key, val = line.split("=", 1)
                header[key.strip()] = val.strip()
                continue
            parts = line.split()
            if len(parts) != 5 or current_split is None:
                raise FormatError(f"malformed manifest line {lineno}: {line!r}", offset=0)
            records.append(
                SampleRecord(
                    sample_id=int(parts[0]),
                    split=current_split,
                    target_path=parts[1],
                    coils_path=None if parts[2] == "-" else parts[2],
                    mask_seed=int(parts[3]),
                    noise_seed=int(parts[4]),
                )
            )
    bundle = DatasetBundle(
        root=root,
        h=int(header["h"]),
        w=int(header["w"]),
        accel=float(header["accel"]),
        ncoils=int(header["coils"]),
        seed=int(header["seed"]),
        records=records,
    )
    for rec in records:
        for rel in (rec.target_path, rec.coils_path):
            if rel is not None and rel not in bundle._tensors:
                bundle._tensors[rel] = tensor_load(os.path.join(root, rel))
    return bundle
