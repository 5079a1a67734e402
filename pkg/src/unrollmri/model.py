"""The K-iteration unrolled reconstruction network.

The recursion alternates a data-consistency solve with the residual CNN
denoiser, starting from a zero denoiser output:

    z_0 = 0
    x_n = DC(z_{n-1})          n = 1..K   (CG solve, or one SD step)
    z_n = D(x_n)               n = 1..K-1

so a K-iteration model runs K data-consistency solves and K-1 denoiser
applications, and the loss is taken on x_K. One denoiser parameter set is
shared across all iterations ("ws"), or each iteration owns its set ("ns").
The regularization weight softplus(theta_lambda) is shared across
iterations in every variant.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .dc import DEFAULT_CG, CgConfig, DcMonitor, dc_backward, dc_layer, sd_backward, sd_step
from .denoiser import (
    DenoiserParams,
    count_params,
    denoiser_backward,
    denoiser_forward,
    init_denoiser_params,
    softplus,
)
from .errors import CacheMismatchError, DimensionError, ParameterError
from .operators import ForwardModel
from .rng import child_seed

DC_CG = "cg"
DC_SD = "sd"
TRAIN_END_TO_END = "et"
TRAIN_PRETRAINED = "pd"
SHARING_SHARED = "ws"
SHARING_NONE = "ns"


@dataclass(frozen=True)
class VariantSpec:
    """One point in the framework taxonomy: DC solver x training x sharing.

    Pre-trained denoisers are distinct per iteration, so "pd" forces "ns".
    """

    dc_mode: str = DC_CG
    training_mode: str = TRAIN_END_TO_END
    sharing: str = SHARING_SHARED

    def __post_init__(self):
        if self.dc_mode not in (DC_CG, DC_SD):
            raise ParameterError(f"dc_mode must be 'cg' or 'sd', got {self.dc_mode!r}")
        if self.training_mode not in (TRAIN_END_TO_END, TRAIN_PRETRAINED):
            raise ParameterError(f"training_mode must be 'et' or 'pd', got {self.training_mode!r}")
        if self.sharing not in (SHARING_SHARED, SHARING_NONE):
            raise ParameterError(f"sharing must be 'ws' or 'ns', got {self.sharing!r}")
        if self.training_mode == TRAIN_PRETRAINED and self.sharing != SHARING_NONE:
            raise ParameterError("pre-trained denoisers imply no sharing (pd -> ns)")

    @property
    def name(self) -> str:
        return f"{self.dc_mode}-{self.training_mode}-{self.sharing}".upper()


@dataclass
class UnrolledModel:
    """K unrolled iterations plus their parameters and solver config."""

    K: int
    variant: VariantSpec
    params: list[DenoiserParams]
    cg_cfg: CgConfig = DEFAULT_CG
    sd_alpha: float = 1.0

    def __post_init__(self):
        if self.K < 1:
            raise ParameterError(f"K must be >= 1, got {self.K}")
        expected = 1 if self.variant.sharing == SHARING_SHARED else self.K
        if len(self.params) != expected:
            raise ParameterError(
                f"{self.variant.sharing} model with K={self.K} needs {expected} "
                f"parameter set(s), got {len(self.params)}"
            )

    @property
    def dtype(self):
        return self.params[0].dtype

    @property
    def lam(self) -> float:
        return softplus(self.params[0].theta_lambda)

    def params_for_iter(self, n: int) -> DenoiserParams:
        """Denoiser parameters used to compute z_n (n >= 1); indices past the
        last set (K overrides at inference) clamp to the last set."""
        if self.variant.sharing == SHARING_SHARED:
            return self.params[0]
        return self.params[min(n, len(self.params) - 1)]

    def trainable(self) -> dict:
        """Named trainable arrays: kernels and BN scale/shift per layer (per
        iteration when not sharing), theta_lambda, and the SD step size in
        SD mode. BN running statistics are not trained."""
        out = {}
        if self.variant.sharing == SHARING_SHARED:
            sets = [("", self.params[0])]
        else:
            sets = [(f"iter{k}.", p) for k, p in enumerate(self.params)]
        for prefix, p in sets:
            for i, layer in enumerate(p.layers):
                out[f"{prefix}layer{i}.kernels"] = layer.kernels
                out[f"{prefix}layer{i}.bn_gamma"] = layer.bn_gamma
                out[f"{prefix}layer{i}.bn_beta"] = layer.bn_beta
        out["theta_lambda"] = np.asarray(self.params[0].theta_lambda, dtype=self.dtype)
        if self.variant.dc_mode == DC_SD:
            out["sd_alpha"] = np.asarray(self.sd_alpha, dtype=self.dtype)
        return out

    def apply_trainable(self, values: dict) -> None:
        """Write updated arrays back into the parameter structures.

        theta_lambda stays shared: its value is mirrored into every
        parameter set of a no-sharing model.
        """
        if self.variant.sharing == SHARING_SHARED:
            sets = [("", self.params[0])]
        else:
            sets = [(f"iter{k}.", p) for k, p in enumerate(self.params)]
        for prefix, p in sets:
            for i, layer in enumerate(p.layers):
                layer.kernels = np.asarray(values[f"{prefix}layer{i}.kernels"], dtype=self.dtype)
                layer.bn_gamma = np.asarray(values[f"{prefix}layer{i}.bn_gamma"], dtype=self.dtype)
                layer.bn_beta = np.asarray(values[f"{prefix}layer{i}.bn_beta"], dtype=self.dtype)
        theta = float(values["theta_lambda"])
        for p in self.params:
            p.theta_lambda = theta
        if self.variant.dc_mode == DC_SD:
            self.sd_alpha = float(values["sd_alpha"])


def build_model(
    K,
    variant: VariantSpec | None = None,
    layers=3,
    filters=16,
    seed=0,
    dtype=np.float64,
    lam_init=0.05,
    cg_cfg: CgConfig = DEFAULT_CG,
    sd_alpha=1.0,
) -> UnrolledModel:
    """Construct a model with freshly initialized denoiser parameters."""
    variant = variant or VariantSpec()
    n_sets = 1 if variant.sharing == SHARING_SHARED else K
    params = [
        init_denoiser_params(layers, filters, seed=child_seed(seed, "init", k), dtype=dtype,
                             lam_init=lam_init)
        for k in range(n_sets)
    ]
    return UnrolledModel(K=K, variant=variant, params=params, cg_cfg=cg_cfg, sd_alpha=sd_alpha)


def count_model_params(model: UnrolledModel) -> int:
    """Total scalar count over all parameter sets (K x the per-set count
    for a no-sharing model)."""
    return sum(count_params(p) for p in model.params)


def untie(model: UnrolledModel) -> UnrolledModel:
    """A no-sharing clone of a weight-shared model with identical initial
    weights in every iteration (useful for comparing the two regimes)."""
    if model.variant.sharing != SHARING_SHARED:
        raise ParameterError("untie expects a weight-shared model")
    return UnrolledModel(
        K=model.K,
        variant=replace(model.variant, sharing=SHARING_NONE),
        params=[model.params[0].copy() for _ in range(model.K)],
        cg_cfg=model.cg_cfg,
        sd_alpha=model.sd_alpha,
    )


@dataclass
class ModelCaches:
    """Everything the reverse sweep needs from one forward pass."""

    model: UnrolledModel = field(repr=False)
    fm: ForwardModel = field(repr=False)
    b: np.ndarray = field(repr=False)
    lam: float = 0.0
    x_list: list = field(default_factory=list, repr=False)
    z_list: list = field(default_factory=list, repr=False)
    den_caches: list = field(default_factory=list, repr=False)


def _complex_dtype(real_dtype):
    return np.complex64 if np.dtype(real_dtype) == np.float32 else np.complex128


def _run_unrolled(model, fm, b, mode, n_iters, collect_caches, trace, dc_monitor):
    b = np.asarray(b)
    if b.shape != fm.data_shape:
        raise DimensionError(f"measurement shape {b.shape} does not match model {fm.data_shape}")
    cdtype = _complex_dtype(model.dtype)
    b = b.astype(cdtype, copy=False)
    lam = model.lam
    use_cg = model.variant.dc_mode == DC_CG

    z = np.zeros(fm.image_shape, dtype=cdtype)
    caches = ModelCaches(model=model, fm=fm, b=b, lam=lam) if collect_caches else None
    if collect_caches:
        caches.z_list.append(z)
    trace_out = [] if trace else None

    x = None
    for n in range(1, n_iters + 1):
        if use_cg:
            x = dc_layer(z, fm, b, lam, model.cg_cfg, monitor=dc_monitor).x
        else:
            x = sd_step(z, fm, b, model.sd_alpha)
        if collect_caches:
            caches.x_list.append(x)
        if n < n_iters:
            z, den_cache = denoiser_forward(x, model.params_for_iter(n), mode)
            if collect_caches:
                caches.den_caches.append(den_cache)
                caches.z_list.append(z)
            if trace:
                trace_out.append((x, z - x, z))
        elif trace:
            # final iterate: evaluate the denoiser once more (inference
            # statistics, outside the recursion) so the trace has one
            # (x, noise estimate, z) triple per iteration
            z_extra, _ = denoiser_forward(x, model.params_for_iter(n), "infer")
            trace_out.append((x, z_extra - x, z_extra))
    return x, caches, trace_out


def model_forward(model, fm, b, mode="train", trace=False, dc_monitor: DcMonitor | None = None):
    """Run the unrolled recursion; returns (x_K, caches, trace).

    ``caches`` is what :func:`model_backward` consumes (None in infer mode);
    ``trace`` is a list of K (x_n, noise_estimate, z_n) triples when
    requested, else None.
    """
    collect = mode == "train"
    return _run_unrolled(model, fm, b, mode, model.K, collect, trace, dc_monitor)


def model_backward(grad_xK, caches: ModelCaches, model: UnrolledModel, fm: ForwardModel):
    """Reverse sweep through all DC layers and denoiser applications.

    Returns gradients keyed like ``model.trainable()``. Shared weights
    accumulate contributions from every iteration; theta_lambda accumulates
    across all DC layers (chain rule through the softplus); in SD mode the
    step size takes the regularizer weight's place.
    """
    if caches is None or caches.model is not model or caches.fm is not fm:
        raise CacheMismatchError("caches do not belong to this model/forward pass")
    K = len(caches.x_list)
    lam = caches.lam
    use_cg = model.variant.dc_mode == DC_CG
    shared = model.variant.sharing == SHARING_SHARED

    grads = {k: np.zeros_like(v) for k, v in model.trainable().items()}
    grad_lam = 0.0
    grad_alpha = 0.0
    g = np.asarray(grad_xK).astype(_complex_dtype(model.dtype), copy=False)

    for n in range(K, 0, -1):
        z_prev = caches.z_list[n - 1]
        x_n = caches.x_list[n - 1]
        if use_cg:
            g, glam = dc_backward(g, x_n, z_prev, fm, lam, model.cg_cfg)
            grad_lam += glam
        else:
            g, galpha = sd_backward(g, z_prev, fm, caches.b, model.sd_alpha)
            grad_alpha += galpha
        if n >= 2:
            prefix = "" if shared else f"iter{n - 1}."
            g, den_grads = denoiser_backward(g, caches.den_caches[n - 2], model.params_for_iter(n - 1))
            for key, val in den_grads.items():
                grads[prefix + key] += val

    if use_cg:
        # d lam / d theta = sigmoid(theta)
        theta = model.params[0].theta_lambda
        grads["theta_lambda"] = np.asarray(
            grad_lam / (1.0 + np.exp(-theta)), dtype=model.dtype
        )
    else:
        grads["sd_alpha"] = np.asarray(grad_alpha, dtype=model.dtype)
    return grads


def loss_mse(x, t) -> float:
    """Squared error summed over pixels, |.|^2 on the complex residual."""
    x = np.asarray(x)
    t = np.asarray(t)
    if x.shape != t.shape:
        raise DimensionError(f"shapes differ: {x.shape} vs {t.shape}")
    r = (x - t).ravel()
    return float(np.real(np.vdot(r, r)))


def loss_mse_grad(x, t):
    """Gradient of :func:`loss_mse` w.r.t. x: 2(x - t), real and imaginary
    parts treated as independent real variables."""
    if np.asarray(x).shape != np.asarray(t).shape:
        raise DimensionError(f"shapes differ: {np.asarray(x).shape} vs {np.asarray(t).shape}")
    return 2.0 * (np.asarray(x) - np.asarray(t))


def reconstruct(model, fm, b, K_override=None, trace=False):
    """Inference-mode reconstruction (BN running statistics, no caches).

    The iteration count may differ from the one used in training; a
    no-sharing model clamps extra iterations to its last denoiser. Returns
    the reconstruction, or ``(x, trace)`` when ``trace`` is requested.
    """
    n_iters = model.K if K_override is None else int(K_override)
    if n_iters < 1:
        raise ParameterError(f"iteration count must be >= 1, got {n_iters}")
    x, _, trace_out = _run_unrolled(model, fm, b, "infer", n_iters, False, trace, None)
    if trace:
        return x, trace_out
    return x


__all__ = [
    "DC_CG",
    "DC_SD",
    "ModelCaches",
    "SHARING_NONE",
    "SHARING_SHARED",
    "TRAIN_END_TO_END",
    "TRAIN_PRETRAINED",
    "UnrolledModel",
    "VariantSpec",
    "build_model",
    "count_model_params",
    "loss_mse",
    "loss_mse_grad",
    "model_backward",
    "model_forward",
    "reconstruct",
    "untie",
]
