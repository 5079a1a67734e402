"""End-to-end training, denoiser pretraining, and checkpoint I/O.

Training is deterministic given the seed: every sample keeps one sampling
mask and one noise realization (from seeds stored in the dataset manifest)
across all epochs, and shuffling/init draw from named substreams. Training
runs in two stages: a short stage first trains the one-iteration model
(which exercises only the data-consistency weight), then the full
K-iteration model continues from those weights. Fresh denoisers start as
the identity map, so the unrolled recursion is stable from the first step.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field

import numpy as np

from .adam import AdamState, adam_step
from .data import DatasetBundle, LoadedSample
from .dc import CgConfig, DcMonitor
from .denoiser import ConvLayerParams, DenoiserParams, denoiser_backward, denoiser_forward, init_denoiser_params, softplus_inv
from .errors import FormatError, ParameterError
from .metrics import psnr
from .model import (
    SHARING_SHARED,
    UnrolledModel,
    VariantSpec,
    loss_mse,
    loss_mse_grad,
    model_backward,
    model_forward,
    reconstruct,
)
from .operators import ForwardModel, make_lowpass_mask, make_vd_mask, simulate_measurement
from .rng import child_seed, substream
from .tensors import tensor_load, tensor_save

# pretraining noise schedule (per-component k-space/image std), ascending
DEFAULT_PD_LEVELS = (0.02, 0.04, 0.06, 0.08, 0.10, 0.13, 0.15, 0.17, 0.20, 0.25)


@dataclass
class PreparedSample:
    """A dataset sample with its measurement operator and data realized."""

    sample_id: int
    target: np.ndarray
    fm: ForwardModel
    b: np.ndarray


def prepare_samples(
    samples: list[LoadedSample],
    accel,
    noise_sigma,
    dtype=np.float64,
    lowpass=None,
) -> list[PreparedSample]:
    """Realize masks and measurements for a list of loaded samples.

    Each sample's mask comes from its own stored seed (variable-density at
    ``accel``, or the centered ``lowpass=(kh, kw)`` block for the
    super-resolution setting) and its noise from its stored noise seed, so
    repeated calls give identical data.
    """
    cdtype = np.complex64 if np.dtype(dtype) == np.float32 else np.complex128
    out = []
    for s in samples:
        h, w = s.target.shape
        if lowpass is not None:
            mask = make_lowpass_mask(h, w, lowpass[0], lowpass[1])
        else:
            mask = make_vd_mask(h, w, accel, s.mask_seed)
        if s.coils is not None:
            fm = ForwardModel.multi_channel(mask, s.coils, noise_sigma=noise_sigma)
        else:
            fm = ForwardModel.single_channel(mask, noise_sigma=noise_sigma)
        target = s.target.astype(cdtype, copy=False)
        b = simulate_measurement(fm, target, noise_sigma, seed=s.noise_seed).astype(cdtype)
        out.append(PreparedSample(sample_id=s.sample_id, target=target, fm=fm, b=b))
    return out


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    val_psnr: float


@dataclass
class TrainResult:
    model: UnrolledModel
    metrics: list = field(default_factory=list)
    diverged: bool = False
    dc_monitor: DcMonitor | None = None


def _val_psnr(model, val_prepared) -> float:
    if not val_prepared:
        return float("nan")
    return float(
        np.mean([psnr(reconstruct(model, s.fm, s.b), s.target) for s in val_prepared])
    )


def _snapshot(model) -> dict:
    return {k: np.array(v, copy=True) for k, v in model.trainable().items()}


def train(
    model: UnrolledModel,
    data: DatasetBundle,
    *,
    epochs,
    batch_size,
    lr,
    seed,
    accel=None,
    noise_sigma=0.01,
    stage1_epochs=None,
    monitor_dc=False,
) -> TrainResult:
    """Train ``model`` end to end on the dataset's train split.

    ``epochs`` is the total count across both stages; by default up to two
    of them are spent on the one-iteration warm-up stage (skipped when the
    model already has K=1). Gradients are summed over each batch and applied
    with Adam. Per-epoch rows carry the mean per-sample training loss and
    the validation PSNR of inference-mode reconstructions.

    If the loss goes non-finite, training aborts and the parameters roll
    back to the last finite epoch (``diverged=True`` in the result).
    """
    if epochs < 0:
        raise ParameterError(f"epochs must be >= 0, got {epochs}")
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    accel = data.accel if accel is None else accel

    train_prepared = prepare_samples(data.split("train"), accel, noise_sigma, model.dtype)
    val_prepared = prepare_samples(data.split("val"), accel, noise_sigma, model.dtype)
    if not train_prepared:
        raise ParameterError("training split is empty")

    if stage1_epochs is None:
        stage1_epochs = 0 if model.K == 1 else min(2, max(0, epochs - 1))
    stage1_epochs = min(stage1_epochs, epochs)
    stage2_epochs = epochs - stage1_epochs

    monitor = DcMonitor() if monitor_dc else None
    result = TrainResult(model=model, dc_monitor=monitor)
    last_good = _snapshot(model)
    epoch_counter = 0

    stages = []
    if stage1_epochs > 0:
        warmup = UnrolledModel(
            K=1,
            variant=model.variant,
            params=[model.params[0]],
            cg_cfg=model.cg_cfg,
            sd_alpha=model.sd_alpha,
        )
        stages.append((warmup, stage1_epochs, 1))
    if stage2_epochs > 0:
        stages.append((model, stage2_epochs, 2))

    for stage_model, n_epochs, stage_idx in stages:
        adam = AdamState.init(stage_model.trainable(), lr=lr)
        for epoch in range(n_epochs):
            order = substream(seed, "shuffle", stage_idx, epoch).permutation(len(train_prepared))
            epoch_loss = 0.0
            for start in range(0, len(order), batch_size):
                batch = order[start:start + batch_size]
                total_grads = None
                for idx in batch:
                    s = train_prepared[idx]
                    x, caches, _ = model_forward(
                        stage_model, s.fm, s.b, mode="train", dc_monitor=monitor
                    )
                    epoch_loss += loss_mse(x, s.target)
                    grads = model_backward(loss_mse_grad(x, s.target), caches, stage_model, s.fm)
                    if total_grads is None:
                        total_grads = grads
                    else:
                        for key in total_grads:
                            total_grads[key] = total_grads[key] + grads[key]
                new_values, adam = adam_step(stage_model.trainable(), total_grads, adam)
                stage_model.apply_trainable(new_values)
            if not np.isfinite(epoch_loss):
                model.apply_trainable(last_good)
                result.diverged = True
                return result
            model.sd_alpha = stage_model.sd_alpha
            epoch_counter += 1
            result.metrics.append(
                EpochMetrics(
                    epoch=epoch_counter,
                    loss=epoch_loss / len(train_prepared),
                    val_psnr=_val_psnr(stage_model, val_prepared),
                )
            )
            last_good = _snapshot(model)
    return result


def _denoiser_trainable(p: DenoiserParams) -> dict:
    out = {}
    for i, layer in enumerate(p.layers):
        out[f"layer{i}.kernels"] = layer.kernels
        out[f"layer{i}.bn_gamma"] = layer.bn_gamma
        out[f"layer{i}.bn_beta"] = layer.bn_beta
    return out


def _denoiser_apply(p: DenoiserParams, values: dict) -> None:
    for i, layer in enumerate(p.layers):
        layer.kernels = values[f"layer{i}.kernels"]
        layer.bn_gamma = values[f"layer{i}.bn_gamma"]
        layer.bn_beta = values[f"layer{i}.bn_beta"]


def pretrain_denoisers(
    noise_levels,
    data: DatasetBundle,
    *,
    epochs,
    batch_size,
    lr,
    seed,
    layers=3,
    filters=16,
    dtype=np.float64,
) -> list[DenoiserParams]:
    """Train one Gaussian denoiser per noise level (for the pre-trained
    variant): inputs are targets plus complex white noise with per-component
    std sigma_i, the objective is squared error against the clean target.
    Returns parameter sets aligned with ``noise_levels``."""
    levels = [float(s) for s in noise_levels]
    if any(s < 0 for s in levels):
        raise ParameterError(f"noise levels must be >= 0, got {levels}")
    cdtype = np.complex64 if np.dtype(dtype) == np.float32 else np.complex128
    targets = [s.target.astype(cdtype, copy=False) for s in data.split("train")]
    if not targets:
        raise ParameterError("training split is empty")

    out = []
    for li, sigma in enumerate(levels):
        params = init_denoiser_params(
            layers, filters, seed=child_seed(seed, "pd_init", li), dtype=dtype
        )
        adam = AdamState.init(_denoiser_trainable(params), lr=lr)
        for epoch in range(epochs):
            order = substream(seed, "pd_shuffle", li, epoch).permutation(len(targets))
            for start in range(0, len(order), batch_size):
                total = None
                for idx in order[start:start + batch_size]:
                    t = targets[idx]
                    rng = substream(seed, "pd_noise", li, epoch, int(idx))
                    noise = sigma * (
                        rng.standard_normal(t.shape) + 1j * rng.standard_normal(t.shape)
                    )
                    z, cache = denoiser_forward(t + noise.astype(cdtype), params, "train")
                    _, grads = denoiser_backward(loss_mse_grad(z, t), cache, params)
                    if total is None:
                        total = grads
                    else:
                        for key in total:
                            total[key] = total[key] + grads[key]
                values, adam = adam_step(_denoiser_trainable(params), total, adam)
                _denoiser_apply(params, values)
        out.append(params)
    return out


def pd_deployment_schedule(levels, n_slots) -> list[float]:
    """Map an ascending pretraining schedule onto ``n_slots`` denoiser slots
    in strictly descending noise order (evenly spaced across the schedule
    when the counts differ)."""
    desc = sorted(levels, reverse=True)
    if n_slots <= 0:
        return []
    if n_slots == 1:
        return [desc[0]]
    idx = np.round(np.linspace(0, len(desc) - 1, n_slots)).astype(int)
    return [desc[i] for i in idx]


def build_pd_model(
    denoisers_by_level: dict,
    K,
    lam,
    cg_cfg: CgConfig = CgConfig(),
) -> UnrolledModel:
    """Assemble the pre-trained-denoiser variant: iteration n (n=1..K-1)
    uses the denoiser for the n-th level of the descending schedule; slot 0
    is never invoked (the recursion starts from a zero denoiser output) and
    holds a copy of the first deployed set."""
    levels = sorted(denoisers_by_level)
    schedule = pd_deployment_schedule(levels, max(K - 1, 1))
    sets = [denoisers_by_level[s].copy() for s in schedule]
    params = [sets[0].copy()] + sets
    params = params[:K] if K > 1 else [sets[0]]
    model = UnrolledModel(
        K=K,
        variant=VariantSpec(dc_mode="cg", training_mode="pd", sharing="ns"),
        params=params,
        cg_cfg=cg_cfg,
    )
    theta = softplus_inv(lam)
    for p in model.params:
        p.theta_lambda = theta
    return model


def tune_pd_lambda(model: UnrolledModel, val_prepared, grid=(0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0)) -> float:
    """Pick the regularization weight for a pre-trained-denoiser model by
    validation PSNR over a small grid; sets it on the model and returns it."""
    best_lam, best_score = None, -np.inf
    for lam in grid:
        theta = softplus_inv(lam)
        for p in model.params:
            p.theta_lambda = theta
        score = _val_psnr(model, val_prepared)
        if score > best_score:
            best_lam, best_score = lam, score
    theta = softplus_inv(best_lam)
    for p in model.params:
        p.theta_lambda = theta
    return best_lam


# ---------------------------------------------------------------------------
# checkpoints: a directory of MTF tensors + manifest.txt + scalars.txt

_DTYPE_NAMES = {
    np.dtype(np.float64): "real64",
    np.dtype(np.float32): "real32",
    np.dtype(np.complex128): "complex64pair",
    np.dtype(np.complex64): "complex32pair",
}


def _checkpoint_entries(model: UnrolledModel) -> dict:
    entries = {}
    if model.variant.sharing == SHARING_SHARED:
        sets = [("", model.params[0])]
    else:
        sets = [(f"iter{k}.", p) for k, p in enumerate(model.params)]
    for prefix, p in sets:
        for i, layer in enumerate(p.layers):
            entries[f"{prefix}layer{i}.kernels"] = layer.kernels
            entries[f"{prefix}layer{i}.bn_gamma"] = layer.bn_gamma
            entries[f"{prefix}layer{i}.bn_beta"] = layer.bn_beta
            entries[f"{prefix}layer{i}.bn_running_mean"] = layer.bn_running_mean
            entries[f"{prefix}layer{i}.bn_running_var"] = layer.bn_running_var
    return entries


def save_checkpoint(ckpt_dir, model: UnrolledModel, adam_state: AdamState | None = None) -> None:
    """Write all parameter tensors (one MTF file each, listed in
    manifest.txt) plus scalars.txt with theta_lambda and optimizer state."""
    os.makedirs(ckpt_dir, exist_ok=True)
    entries = _checkpoint_entries(model)
    scalars = {
        "version": 1,
        "K": model.K,
        "dc_mode": model.variant.dc_mode,
        "training_mode": model.variant.training_mode,
        "sharing": model.variant.sharing,
        "cg_tol": repr(model.cg_cfg.tol),
        "cg_iters": model.cg_cfg.max_iters,
        "precision": "f32" if np.dtype(model.dtype) == np.float32 else "f64",
        "theta_lambda": repr(float(model.params[0].theta_lambda)),
        "sd_alpha": repr(float(model.sd_alpha)),
    }
    if adam_state is not None:
        scalars.update(
            {
                "adam.step": adam_state.step,
                "adam.lr": repr(adam_state.lr),
                "adam.beta1": repr(adam_state.beta1),
                "adam.beta2": repr(adam_state.beta2),
                "adam.eps": repr(adam_state.eps),
                "adam.skipped": adam_state.skipped,
            }
        )
        for kind, tree in (("m", adam_state.m), ("v", adam_state.v)):
            for key, arr in tree.items():
                if arr.ndim == 0:
                    scalars[f"adam.{kind}.{key}"] = repr(float(arr))
                else:
                    entries[f"adam.{kind}.{key}"] = arr

    manifest_lines = []
    for name in sorted(entries):
        arr = entries[name]
        tensor_save(arr, os.path.join(ckpt_dir, f"{name}.mtf"))
        dims = " ".join(str(d) for d in arr.shape)
        manifest_lines.append(f"{name} {_DTYPE_NAMES[arr.dtype]} {dims}")
    with open(os.path.join(ckpt_dir, "manifest.txt"), "w") as f:
        f.write("\n".join(manifest_lines) + "\n")
    with open(os.path.join(ckpt_dir, "scalars.txt"), "w") as f:
        for key in sorted(scalars):
            f.write(f"{key}={scalars[key]}\n")


def load_checkpoint(ckpt_dir):
    """Rebuild (model, adam_state_or_None) from :func:`save_checkpoint`."""
    scalars = {}
    with open(os.path.join(ckpt_dir, "scalars.txt")) as f:
        for line in f:
            line = line.strip()
            if line:
                key, val = line.split("=", 1)
                scalars[key] = val
    tensors = {}
    with open(os.path.join(ckpt_dir, "manifest.txt")) as f:
        for line in f:
            if line.strip():
                name = line.split()[0]
                tensors[name] = tensor_load(os.path.join(ckpt_dir, f"{name}.mtf"))

    sharing = scalars["sharing"]
    K = int(scalars["K"])
    n_sets = 1 if sharing == SHARING_SHARED else K
    theta = float(scalars["theta_lambda"])
    dtype = np.float32 if scalars["precision"] == "f32" else np.float64

    params = []
    for k in range(n_sets):
        prefix = "" if sharing == SHARING_SHARED else f"iter{k}."
        layers = []
        i = 0
        while f"{prefix}layer{i}.kernels" in tensors:
            layers.append(
                ConvLayerParams(
                    kernels=tensors[f"{prefix}layer{i}.kernels"],
                    bn_gamma=tensors[f"{prefix}layer{i}.bn_gamma"],
                    bn_beta=tensors[f"{prefix}layer{i}.bn_beta"],
                    bn_running_mean=tensors[f"{prefix}layer{i}.bn_running_mean"],
                    bn_running_var=tensors[f"{prefix}layer{i}.bn_running_var"],
                )
            )
            i += 1
        if not layers:
            raise FormatError(f"checkpoint has no layers for parameter set {k}", offset=0)
        params.append(DenoiserParams(layers=layers, theta_lambda=theta))

    model = UnrolledModel(
        K=K,
        variant=VariantSpec(
            dc_mode=scalars["dc_mode"],
            training_mode=scalars["training_mode"],
            sharing=sharing,
        ),
        params=params,
        cg_cfg=CgConfig(tol=float(scalars["cg_tol"]), max_iters=int(scalars["cg_iters"])),
        sd_alpha=float(scalars["sd_alpha"]),
    )

    adam_state = None
    if "adam.step" in scalars:
        trainable = model.trainable()
        m, v = {}, {}
        for key, ref in trainable.items():
            for kind, tree in (("m", m), ("v", v)):
                name = f"adam.{kind}.{key}"
                if name in tensors:
                    tree[key] = tensors[name]
                else:
                    tree[key] = np.asarray(float(scalars[name]), dtype=dtype)
        adam_state = AdamState(
            lr=float(scalars["adam.lr"]),
            beta1=float(scalars["adam.beta1"]),
            beta2=float(scalars["adam.beta2"]),
            eps=float(scalars["adam.eps"]),
            step=int(scalars["adam.step"]),
            skipped=int(scalars["adam.skipped"]),
            m=m,
            v=v,
        )
    return model, adam_state


def checkpoint_digest(ckpt_dir) -> str:
    """SHA-256 over every file in the checkpoint (sorted), for bit-exact
    reproducibility comparisons."""
    h = hashlib.sha256()
    for name in sorted(os.listdir(ckpt_dir)):
        path = os.path.join(ckpt_dir, name)
        h.update(name.encode())
        with open(path, "rb") as f:
            h.update(f.read())
    return h.hexdigest()
