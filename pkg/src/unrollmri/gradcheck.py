"""Central finite-difference verification of every hand-written gradient.

Each suite perturbs one scalar degree of freedom at a time (real and
imaginary parts separately for complex inputs), compares the analytic
gradient against (f(p+h) - f(p-h)) / 2h, and reports the worst relative
error. These are the same rows the ``gradcheck`` CLI command prints and the
acceptance suite asserts on.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from .dc import GRADCHECK_CG, dc_backward_lambda, dc_backward_z, dc_layer, sd_backward, sd_step
from .denoiser import (
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    denoiser_backward,
    denoiser_forward,
    init_denoiser_params,
    relu,
    relu_backward,
)
from .model import (
    VariantSpec,
    build_model,
    loss_mse,
    loss_mse_grad,
    model_backward,
    model_forward,
)
from .operators import ForwardModel, make_synthetic_coils, make_vd_mask, simulate_measurement
from .rng import substream


@dataclass(frozen=True)
class GradCheckRow:
    component: str
    param: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def _rel_err(analytic, numerical) -> float:
    return abs(analytic - numerical) / max(abs(analytic) + abs(numerical), 1e-8)


def _fd_array(f, arr, analytic, h_base):
    """Worst relative error over every entry of ``arr`` (in place)."""
    worst = 0.0
    is_complex = np.iscomplexobj(arr)
    flat = arr.reshape(-1)
    gflat = np.asarray(analytic).reshape(-1)
    perturbs = (1.0, 1j) if is_complex else (1.0,)
    for i in range(flat.size):
        for unit in perturbs:
            h = h_base * max(1.0, abs(flat[i]))
            orig = flat[i]
            flat[i] = orig + unit * h
            fp = f()
            flat[i] = orig - unit * h
            fm = f()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            ana = gflat[i].real if unit == 1.0 else gflat[i].imag
            worst = max(worst, _rel_err(ana, num))
    return worst


def _random_complex(rng, shape, scale=1.0):
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def _weighted_sum(weights, y) -> float:
    """Scalar probe loss Re<weights, y> (works for real and complex y)."""
    return float(np.real(np.vdot(weights, y)))


def _check_conv(rows):
    rng = substream(20240901, "conv")
    x = rng.standard_normal((5, 5, 2))
    k = rng.standard_normal((3, 3, 2, 3)) * 0.5
    w = rng.standard_normal((5, 5, 3))
    grad_x, grad_k = conv2d_backward(w, x, k)
    err_k = _fd_array(lambda: _weighted_sum(w, conv2d_forward(x, k)), k, grad_k, 1e-6)
    err_x = _fd_array(lambda: _weighted_sum(w, conv2d_forward(x, k)), x, grad_x, 1e-6)
    rows.append(GradCheckRow("conv2d", "kernels", err_k, 1e-6))
    rows.append(GradCheckRow("conv2d", "input", err_x, 1e-6))


def _check_batchnorm(rows):
    rng = substream(20240901, "bn")
    x = rng.standard_normal((4, 5, 3)) * 2.0
    gamma = rng.uniform(0.5, 1.5, 3)
    beta = rng.standard_normal(3)
    w = rng.standard_normal((4, 5, 3))

    def f():
        y, _ = batchnorm_forward(x, gamma, beta, "train")
        return _weighted_sum(w, y)

    _, cache = batchnorm_forward(x, gamma, beta, "train")
    grad_x, grad_gamma, grad_beta = batchnorm_backward(w, cache)
    rows.append(GradCheckRow("batchnorm", "input", _fd_array(f, x, grad_x, 1e-6), 1e-5))
    rows.append(GradCheckRow("batchnorm", "gamma", _fd_array(f, gamma, grad_gamma, 1e-6), 1e-5))
    rows.append(GradCheckRow("batchnorm", "beta", _fd_array(f, beta, grad_beta, 1e-6), 1e-5))


def _check_relu(rows):
    rng = substream(20240901, "relu")
    # keep activations away from the kink so central differences are exact
    x = rng.uniform(0.1, 2.0, (4, 4, 2)) * rng.choice([-1.0, 1.0], (4, 4, 2))
    w = rng.standard_normal((4, 4, 2))
    grad_x = relu_backward(w, x)
    err = _fd_array(lambda: _weighted_sum(w, relu(x)), x, grad_x, 1e-6)
    rows.append(GradCheckRow("relu", "input", err, 1e-6))


def _check_denoiser(rows):
    rng = substream(20240901, "denoiser")
    params = init_denoiser_params(3, 4, seed=11, zero_last=False)
    x = _random_complex(rng, (8, 8))
    c = _random_complex(rng, (8, 8))

    def f():
        z, _ = denoiser_forward(x, params, "train")
        return _weighted_sum(c, z)

    _, cache = denoiser_forward(x, params, "train")
    grad_x, grads = denoiser_backward(c, cache, params)
    worst_param = 0.0
    for i, layer in enumerate(params.layers):
        worst_param = max(worst_param, _fd_array(f, layer.kernels, grads[f"layer{i}.kernels"], 1e-6))
        worst_param = max(worst_param, _fd_array(f, layer.bn_gamma, grads[f"layer{i}.bn_gamma"], 1e-6))
        worst_param = max(worst_param, _fd_array(f, layer.bn_beta, grads[f"layer{i}.bn_beta"], 1e-6))
    rows.append(GradCheckRow("denoiser", "all_params", worst_param, 1e-4))
    rows.append(GradCheckRow("denoiser", "input", _fd_array(f, x, grad_x, 1e-6), 1e-4))


def _dc_instance(rng, multi=True):
    mask = make_vd_mask(16, 16, 2.0, seed=3)
    mask.mask = mask.mask[4:12, 4:12]  # 8x8 sub-grid keeps the test small
    if multi:
        coils = make_synthetic_coils(8, 8, 2, seed=5)
        fm = ForwardModel.multi_channel(
            type(mask)(mask.mask[:8, :8], mask.acceleration, mask.seed), coils
        )
    else:
        fm = ForwardModel.single_channel(type(mask)(mask.mask[:8, :8], mask.acceleration, mask.seed))
    x_true = _random_complex(rng, (8, 8), 0.5)
    b = simulate_measurement(fm, x_true, 0.05, seed=7)
    z = _random_complex(rng, (8, 8), 0.5)
    c = _random_complex(rng, (8, 8))
    return fm, b, z, c


def _check_dc(rows):
    rng = substream(20240901, "dc")
    lam = 0.3
    for label, multi in (("multi", True), ("single", False)):
        fm, b, z, c = _dc_instance(rng, multi)

        def f_z():
            return _weighted_sum(c, dc_layer(z, fm, b, lam, GRADCHECK_CG).x)

        grad_z = dc_backward_z(c, fm, lam, GRADCHECK_CG)
        rows.append(GradCheckRow(f"dc_{label}", "z", _fd_array(f_z, z, grad_z, 1e-5), 1e-5))

        x_out = dc_layer(z, fm, b, lam, GRADCHECK_CG).x
        grad_lam = dc_backward_lambda(c, x_out, z, fm, GRADCHECK_CG, lam=lam)
        h = 1e-6
        fp = _weighted_sum(c, dc_layer(z, fm, b, lam + h, GRADCHECK_CG).x)
        fm_val = _weighted_sum(c, dc_layer(z, fm, b, lam - h, GRADCHECK_CG).x)
        num = (fp - fm_val) / (2 * h)
        rows.append(GradCheckRow(f"dc_{label}", "lambda", _rel_err(grad_lam, num), 1e-5))


def _check_sd(rows):
    rng = substream(20240901, "sd")
    fm, b, z, c = _dc_instance(rng, multi=True)
    alpha = 0.8

    def f_z():
        return _weighted_sum(c, sd_step(z, fm, b, alpha))

    grad_z, grad_alpha = sd_backward(c, z, fm, b, alpha)
    rows.append(GradCheckRow("sd_step", "z", _fd_array(f_z, z, grad_z, 1e-6), 1e-5))
    h = 1e-6
    num = (
        _weighted_sum(c, sd_step(z, fm, b, alpha + h))
        - _weighted_sum(c, sd_step(z, fm, b, alpha - h))
    ) / (2 * h)
    rows.append(GradCheckRow("sd_step", "alpha", _rel_err(grad_alpha, num), 1e-5))


def _check_model(rows, multi, dc_mode="cg"):
    rng = substream(20240901, "model", dc_mode, int(multi))
    mask = make_vd_mask(16, 16, 2.0, seed=21)
    mask.mask = mask.mask[:8, :8]
    if multi:
        fm = ForwardModel.multi_channel(mask, make_synthetic_coils(8, 8, 2, seed=23))
    else:
        fm = ForwardModel.single_channel(mask)
    x_true = _random_complex(rng, (8, 8), 0.5)
    b = simulate_measurement(fm, x_true, 0.05, seed=29)
    target = _random_complex(rng, (8, 8), 0.5)

    model = build_model(
        K=2,
        variant=VariantSpec(dc_mode, "et", "ws"),
        layers=3,
        filters=4,
        seed=31,
        cg_cfg=GRADCHECK_CG,
    )
    # non-degenerate final layer so every parameter has a live gradient
    model.params[0].layers[-1].kernels = (
        substream(20240901, "lastk", dc_mode).standard_normal(
            model.params[0].layers[-1].kernels.shape
        )
        * 0.2
    )

    def f():
        x, _, _ = model_forward(model, fm, b, mode="train")
        return loss_mse(x, target)

    x, caches, _ = model_forward(model, fm, b, mode="train")
    grads = model_backward(loss_mse_grad(x, target), caches, model, fm)

    worst = 0.0
    trainable = model.trainable()
    for key, arr in trainable.items():
        if arr.ndim > 0:
            # trainable() hands back the live arrays, so in-place FD works
            worst = max(worst, _fd_array(f, arr, grads[key], 1e-5))
            continue
        # scalar parameters (theta_lambda / sd_alpha) go through apply_trainable
        theta0 = float(arr)
        h = 1e-5 * max(1.0, abs(theta0))

        def eval_at(v, key=key, theta0=theta0):
            vals = model.trainable()
            vals[key] = np.asarray(v)
            model.apply_trainable(vals)
            out = f()
            vals[key] = np.asarray(theta0)
            model.apply_trainable(vals)
            return out

        num = (eval_at(theta0 + h) - eval_at(theta0 - h)) / (2 * h)
        worst = max(worst, _rel_err(float(grads[key]), num))

    label = f"model_k2_{'multi' if multi else 'single'}_{dc_mode}"
    rows.append(GradCheckRow(label, "all_params", worst, 1e-4))


def _check_loss(rows):
    rng = substream(20240901, "loss")
    x = _random_complex(rng, (6, 6))
    t = _random_complex(rng, (6, 6))
    grad = loss_mse_grad(x, t)
    err = _fd_array(lambda: loss_mse(x, t), x, grad, 1e-7)
    rows.append(GradCheckRow("loss_mse", "input", err, 1e-8))


@functools.lru_cache(maxsize=None)
def run_gradcheck() -> tuple[GradCheckRow, ...]:
    """Run every finite-difference suite (64-bit); results are cached for
    the process since they are deterministic."""
    rows: list[GradCheckRow] = []
    _check_conv(rows)
    _check_batchnorm(rows)
    _check_relu(rows)
    _check_denoiser(rows)
    _check_dc(rows)
    _check_sd(rows)
    _check_loss(rows)
    _check_model(rows, multi=False, dc_mode="cg")
    _check_model(rows, multi=True, dc_mode="cg")
    _check_model(rows, multi=True, dc_mode="sd")
    return tuple(rows)


def gradcheck_csv(rows) -> str:
    lines = ["component,param,max_rel_err,pass"]
    for r in rows:
        lines.append(f"{r.component},{r.param},{r.max_rel_err:.3e},{str(r.passed).lower()}")
    return "\n".join(lines) + "\n"
