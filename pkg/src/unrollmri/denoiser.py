"""Residual CNN denoiser with hand-written forward and backward passes.

The network estimates the noise/alias content of a complex image: the input
is split into (real, imag) channels, pushed through N blocks of
conv(3x3, no bias) -> batchnorm -> ReLU (the last block has no ReLU so the
estimate keeps its negative part), and the result is added back to the
input. With the final conv kernels and BN shift at zero the whole map is
exactly the identity, which is also how fresh parameters are initialized so
unrolled training starts from a stable point.

All layers operate on single images (H, W, C); batch-norm statistics are
taken over the spatial axes of each invocation and folded into shared
running statistics used at inference.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CacheMismatchError, DimensionError, ParameterError
from .tensors import channels_to_complex, complex_to_channels

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


@dataclass
class ConvLayerParams:
    """One conv+BN block: 3x3 kernels (kh, kw, cin, cout) and BN vectors."""

    kernels: np.ndarray
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    bn_running_mean: np.ndarray
    bn_running_var: np.ndarray

    @property
    def cin(self) -> int:
        return self.kernels.shape[2]

    @property
    def cout(self) -> int:
        return self.kernels.shape[3]


@dataclass
class DenoiserParams:
    """Full parameter set: conv/BN layers plus the regularization weight.

    ``theta_lambda`` is the unconstrained parameter; the positive weight
    used by the data-consistency layer is softplus(theta_lambda).
    """

    layers: list[ConvLayerParams]
    theta_lambda: float

    @property
    def dtype(self):
        return self.layers[0].kernels.dtype

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(
            layers=[
                ConvLayerParams(
                    kernels=l.kernels.copy(),
                    bn_gamma=l.bn_gamma.copy(),
                    bn_beta=l.bn_beta.copy(),
                    bn_running_mean=l.bn_running_mean.copy(),
                    bn_running_var=l.bn_running_var.copy(),
                )
                for l in self.layers
            ],
            theta_lambda=self.theta_lambda,
        )


def softplus(t):
    return float(np.logaddexp(0.0, t))


def softplus_inv(lam):
    if lam <= 0:
        raise ParameterError(f"softplus is positive; got target {lam}")
    return float(lam + np.log1p(-np.exp(-lam)))


def init_denoiser_params(
    n_layers,
    n_filters,
    seed,
    dtype=np.float64,
    in_channels=2,
    out_channels=2,
    lam_init=0.05,
    zero_last=True,
) -> DenoiserParams:
    """Fresh parameters: He-style kernel init with std sqrt(2/(9*cin)),
    BN at (gamma=1, beta=0, mean=0, var=1). The final conv layer starts at
    zero (``zero_last``) so the denoiser begins as the identity map."""
    if n_layers < 1:
        raise ParameterError(f"n_layers must be >= 1, got {n_layers}")
    rng = np.random.default_rng(seed)
    layers = []
    for i in range(n_layers):
        cin = in_channels if i == 0 else n_filters
        cout = out_channels if i == n_layers - 1 else n_filters
        if zero_last and i == n_layers - 1:
            k = np.zeros((3, 3, cin, cout))
        else:
            k = rng.standard_normal((3, 3, cin, cout)) * np.sqrt(2.0 / (9.0 * cin))
        layers.append(
            ConvLayerParams(
                kernels=k.astype(dtype),
                bn_gamma=np.ones(cout, dtype=dtype),
                bn_beta=np.zeros(cout, dtype=dtype),
                bn_running_mean=np.zeros(cout, dtype=dtype),
                bn_running_var=np.ones(cout, dtype=dtype),
            )
        )
    return DenoiserParams(layers=layers, theta_lambda=softplus_inv(lam_init))


def count_params(p: DenoiserParams) -> int:
    """Scalar count per the usual bookkeeping convention for this kind of
    network: conv kernels plus all four BN vectors (beta, gamma, mean, var)
    per layer, plus the regularization weight. The optimizer itself only
    updates kernels, gamma, beta, and theta_lambda; running statistics are
    counted but not trained."""
    total = 1  # the regularization weight
    for layer in p.layers:
        total += layer.kernels.size + 4 * layer.cout
    return total


def _im2col(x, kh, kw):
    h, w, cin = x.shape
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(0, 1))
    # (H, W, Cin, kh, kw) -> (H*W, kh*kw*Cin), matching the kernel layout
    return windows.transpose(0, 1, 3, 4, 2).reshape(h * w, kh * kw * cin)


def _check_conv_shapes(x, kernels):
    x = np.asarray(x)
    if x.ndim != 3:
        raise DimensionError(f"conv input must be (H, W, C), got shape {x.shape}")
    if x.shape[2] != kernels.shape[2]:
        raise DimensionError(
            f"input has {x.shape[2]} channels, kernels expect {kernels.shape[2]}"
        )
    return x


def conv2d_forward(x, kernels):
    """Same-size 3x3 convolution with zero padding 1 and no bias term
    (the following batch norm's shift plays that role).

    ``x`` is (H, W, Cin); kernels are (3, 3, Cin, Cout).
    """
    x = _check_conv_shapes(x, kernels)
    kh, kw, cin, cout = kernels.shape
    h, w = x.shape[:2]
    cols = _im2col(x, kh, kw)
    return (cols @ kernels.reshape(kh * kw * cin, cout)).reshape(h, w, cout)


def conv2d_backward(grad_y, x, kernels):
    """Gradients of :func:`conv2d_forward` w.r.t. the input and kernels."""
    x = _check_conv_shapes(x, kernels)
    kh, kw, cin, cout = kernels.shape
    h, w = x.shape[:2]
    g2 = np.asarray(grad_y).reshape(h * w, cout)
    grad_k = (_im2col(x, kh, kw).T @ g2).reshape(kh, kw, cin, cout)
    gcols = (g2 @ kernels.reshape(kh * kw * cin, cout).T).reshape(h, w, kh, kw, cin)
    grad_xp = np.zeros((h + 2, w + 2, cin), dtype=g2.dtype)
    for dy in range(kh):
        for dx in range(kw):
            grad_xp[dy:dy + h, dx:dx + w, :] += gcols[:, :, dy, dx, :]
    return grad_xp[1:h + 1, 1:w + 1, :], grad_k


def batchnorm_forward(
    x,
    gamma,
    beta,
    mode,
    running_mean=None,
    running_var=None,
    momentum=BN_MOMENTUM,
    eps=BN_EPS,
):
    """Per-channel batch normalization over the spatial axes.

    ``mode="train"`` standardizes by this invocation's statistics and, when
    running buffers are supplied, folds them in with ``momentum``;
    ``mode="infer"`` standardizes by the running statistics. Returns
    (y, cache); the cache is None in infer mode. A zero-variance channel is
    kept finite by ``eps``.
    """
    x = np.asarray(x)
    if x.shape[-1] != gamma.shape[0]:
        raise DimensionError(f"input has {x.shape[-1]} channels, gamma has {gamma.shape[0]}")
    axes = tuple(range(x.ndim - 1))
    if mode == "train":
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if running_mean is not None:
            running_mean *= momentum
            running_mean += (1.0 - momentum) * mean
            running_var *= momentum
            running_var += (1.0 - momentum) * var
        invstd = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean) * invstd
        y = gamma * xhat + beta
        m = int(np.prod(x.shape[:-1]))
        return y, (xhat, invstd, gamma, m)
    if mode == "infer":
        if running_mean is None or running_var is None:
            raise ParameterError("infer mode requires running statistics")
        y = gamma * (x - running_mean) / np.sqrt(running_var + eps) + beta
        return y, None
    raise ParameterError(f"mode must be 'train' or 'infer', got {mode!r}")


def batchnorm_backward(grad_y, cache):
    """Backward of train-mode :func:`batchnorm_forward`, propagating through
    the batch statistics."""
    xhat, invstd, gamma, m = cache
    axes = tuple(range(grad_y.ndim - 1))
    grad_beta = grad_y.sum(axis=axes)
    grad_gamma = (grad_y * xhat).sum(axis=axes)
    gxhat = grad_y * gamma
    grad_x = (invstd / m) * (m * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes))
    return grad_x, grad_gamma, grad_beta


def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad_y, x):
    """Subgradient 0 at exactly 0: mask is indicator(x > 0)."""
    return grad_y * (x > 0)


@dataclass
class DenoiserCache:
    """Activations saved by a train-mode forward pass for the backward."""

    params: DenoiserParams = field(repr=False)
    layers: list = field(repr=False)
    input_shape: tuple = ()


def denoiser_forward(x, params: DenoiserParams, mode="train"):
    """z = x + N(x): residual noise estimate added back to the input.

    ``x`` is a 2-D complex image. Returns (z, cache); cache is None in
    infer mode. Train mode mutates only the BN running statistics.
    """
    x = np.asarray(x)
    h = complex_to_channels(x)
    layer_caches = []
    n = len(params.layers)
    for i, layer in enumerate(params.layers):
        conv_in = h
        h = conv2d_forward(h, layer.kernels)
        h, bn_cache = batchnorm_forward(
            h,
            layer.bn_gamma,
            layer.bn_beta,
            mode,
            running_mean=layer.bn_running_mean,
            running_var=layer.bn_running_var,
        )
        if i < n - 1:
            pre_relu = h
            h = relu(h)
        else:
            pre_relu = None
        layer_caches.append((conv_in, bn_cache, pre_relu))
    z = x + channels_to_complex(h)
    if mode != "train":
        return z, None
    return z, DenoiserCache(params=params, layers=layer_caches, input_shape=x.shape)


def denoiser_backward(grad_z, cache: DenoiserCache, params: DenoiserParams):
    """Exact reverse-mode gradients for :func:`denoiser_forward`.

    Returns (grad_x, grads) where ``grads`` maps "layer{i}.kernels",
    "layer{i}.bn_gamma", "layer{i}.bn_beta" to arrays. ``grad_x`` includes
    the identity contribution of the residual skip.
    """
    if cache is None or cache.params is not params:
        raise CacheMismatchError(
            "backward needs the cache from a train-mode forward with these parameters"
        )
    grad_z = np.asarray(grad_z)
    if grad_z.shape != cache.input_shape:
        raise DimensionError(
            f"grad shape {grad_z.shape} does not match forward input {cache.input_shape}"
        )
    gh = complex_to_channels(grad_z)
    grads = {}
    for i in range(len(params.layers) - 1, -1, -1):
        conv_in, bn_cache, pre_relu = cache.layers[i]
        if pre_relu is not None:
            gh = relu_backward(gh, pre_relu)
        gh, ggamma, gbeta = batchnorm_backward(gh, bn_cache)
        gh, gk = conv2d_backward(gh, conv_in, params.layers[i].kernels)
        grads[f"layer{i}.kernels"] = gk
        grads[f"layer{i}.bn_gamma"] = ggamma
        grads[f"layer{i}.bn_beta"] = gbeta
    grad_x = grad_z + channels_to_complex(gh)
    return grad_x, grads
