"""Data-consistency layer: CG solve of (A^H A + lam I) x = A^H b + lam z,
the analytic single-channel shortcut, and gradient propagation through it.

Gradient conventions: real and imaginary parts are independent real
variables, complex gradient arrays hold dC/d(re) + 1j*dC/d(im), and every
scalar gradient takes the real part of the complex inner product.

The backward pass re-runs CG on the incoming gradient instead of storing any
CG intermediates: with Q = A^H A + lam I the layer output is
x = Q^{-1}(A^H b + lam z), so the Jacobian w.r.t. z is lam * Q^{-1} (note
the lam factor) and d x / d lam = Q^{-1}(z - x).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DimensionError,
    NotPositiveDefiniteError,
    NumericError,
    ParameterError,
)
from .operators import MULTI, SINGLE, ForwardModel, adjoint, fft2c, forward, ifft2c


@dataclass(frozen=True)
class CgConfig:
    """Relative-residual threshold and iteration cap for one CG solve."""

    tol: float = 1e-8
    max_iters: int = 50

    def __post_init__(self):
        if not self.tol > 0:
            raise ParameterError(f"tol must be > 0, got {self.tol}")
        if self.max_iters < 1:
            raise ParameterError(f"max_iters must be >= 1, got {self.max_iters}")


DEFAULT_CG = CgConfig()
# gradient checks solve essentially to machine precision
GRADCHECK_CG = CgConfig(tol=1e-12, max_iters=200)


@dataclass
class DcOutput:
    """Result of one data-consistency solve."""

    x: np.ndarray
    iters_used: int
    final_relres: float
    converged: bool


def _real_vdot(a, b) -> float:
    return float(np.real(np.vdot(a, b)))


def cg_solve(apply_q, rhs, x0=None, cfg: CgConfig = DEFAULT_CG) -> DcOutput:
    """Conjugate gradients for a self-adjoint positive-definite ``apply_q``.

    Stops when ||Q x - rhs|| / ||rhs|| <= ``cfg.tol`` or after
    ``cfg.max_iters`` iterations (flagged via ``converged=False``).
    """
    rhs = np.asarray(rhs)
    if not np.isfinite(rhs).all():
        raise NumericError("non-finite values in CG right-hand side")
    rhs_norm = float(np.linalg.norm(rhs))
    if rhs_norm == 0.0:
        return DcOutput(np.zeros_like(rhs), 0, 0.0, True)

    if x0 is None:
        x = np.zeros_like(rhs)
        r = rhs.copy()
    else:
        x = np.array(x0, copy=True)
        if x.shape != rhs.shape:
            raise DimensionError(f"x0 shape {x.shape} does not match rhs {rhs.shape}")
        r = rhs - apply_q(x)

    relres = float(np.linalg.norm(r)) / rhs_norm
    if relres <= cfg.tol:
        return DcOutput(x, 0, relres, True)

    p = r.copy()
    rtr = _real_vdot(r, r)
    for it in range(1, cfg.max_iters + 1):
        qp = apply_q(p)
        pqp = _real_vdot(p, qp)
        if pqp <= 0.0:
            raise NotPositiveDefiniteError(
                f"p^H Q p = {pqp:g} <= 0 at CG iteration {it}; operator is not PD"
            )
        alpha = rtr / pqp
        x += alpha * p
        r -= alpha * qp
        rtr_new = _real_vdot(r, r)
        relres = np.sqrt(rtr_new) / rhs_norm
        if relres <= cfg.tol:
            return DcOutput(x, it, float(relres), True)
        p = r + (rtr_new / rtr) * p
        rtr = rtr_new
    return DcOutput(x, cfg.max_iters, float(relres), False)


class _ShiftedSolver:
    """A^H A in the unshifted FFT domain, with pre-shifted mask and coils.

    CG applies the normal operator many times per solve; moving the
    fftshift pair out of the loop roughly halves the cost. Results are
    mapped back to the centered convention at the boundary.
    """

    def __init__(self, model: ForwardModel, dtype):
        self.mask = np.fft.ifftshift(model.mask.mask)
        if model.kind == MULTI:
            maps = model.coils.maps.astype(dtype, copy=False)
            self.coils = np.ascontiguousarray(
                np.fft.ifftshift(maps.transpose(2, 0, 1), axes=(1, 2))
            )
            self.coils_conj = np.conj(self.coils)
        else:
            self.coils = None

    def normal(self, xs):
        if self.coils is None:
            return np.fft.ifft2(self.mask * np.fft.fft2(xs, norm="ortho"), norm="ortho")
        cx = self.coils * xs[None, :, :]
        k = np.fft.fft2(cx, axes=(1, 2), norm="ortho")
        k *= self.mask[None, :, :]
        im = np.fft.ifft2(k, axes=(1, 2), norm="ortho")
        return (self.coils_conj * im).sum(axis=0)


def _solver_for(model: ForwardModel, dtype) -> _ShiftedSolver:
    key = np.dtype(dtype).str
    ws = model._workspace.get(key)
    if ws is None:
        ws = _ShiftedSolver(model, dtype)
        model._workspace[key] = ws
    return ws


def _solve_regularized(model, rhs, lam, cfg, x0=None, force_cg=False) -> DcOutput:
    """Solve (A^H A + lam I) x = rhs; analytic in k-space for the
    single-channel Cartesian model, CG otherwise."""
    if model.kind == SINGLE and not force_cg:
        m = model.mask.mask
        x = ifft2c(fft2c(rhs) / (m + lam))
        return DcOutput(x, 0, 0.0, True)
    ws = _solver_for(model, rhs.dtype)

    def q(v):
        return ws.normal(v) + lam * v

    x0s = None if x0 is None else np.fft.ifftshift(x0)
    res = cg_solve(q, np.fft.ifftshift(rhs), x0=x0s, cfg=cfg)
    return DcOutput(np.fft.fftshift(res.x), res.iters_used, res.final_relres, res.converged)


def dc_objective(model, b, lam, z, x) -> float:
    """The quadratic the DC layer minimizes: ||Ax - b||^2 + lam ||x - z||^2."""
    r = forward(model, x) - b
    return _real_vdot(r, r) + lam * _real_vdot(x - z, x - z)


class DcMonitor:
    """Records the DC objective at the warm start and at the output of every
    data-consistency solve (used to verify CG never increases it)."""

    def __init__(self):
        self.records: list[tuple[float, float]] = []

    def record(self, start: float, end: float):
        self.records.append((start, end))

    def max_relative_increase(self) -> float:
        if not self.records:
            return 0.0
        return max((e - s) / max(abs(s), 1e-300) for s, e in self.records)


def dc_layer(
    z,
    model: ForwardModel,
    b,
    lam,
    cfg: CgConfig = DEFAULT_CG,
    force_cg=False,
    monitor: DcMonitor | None = None,
) -> DcOutput:
    """x = (A^H A + lam I)^{-1} (A^H b + lam z).

    Dispatches to the analytic k-space solution for single-channel Cartesian
    models (unless ``force_cg``), otherwise runs CG warm-started at ``z``.
    """
    if lam <= 0:
        raise ParameterError(f"lam must be > 0, got {lam}")
    z = np.asarray(z)
    if z.shape != model.image_shape:
        raise DimensionError(f"z shape {z.shape} does not match model {model.image_shape}")
    if model.kind == SINGLE and not force_cg:
        out = DcOutput(dc_analytic(z, b, model.mask, lam), 0, 0.0, True)
    else:
        rhs = adjoint(model, b) + lam * z
        out = _solve_regularized(model, rhs, lam, cfg, x0=z, force_cg=force_cg)
    if monitor is not None:
        monitor.record(dc_objective(model, b, lam, z, z), dc_objective(model, b, lam, z, out.x))
    return out


def dc_analytic(z, b, mask, lam):
    """Closed-form DC for single-channel Cartesian sampling.

    In k-space: (b[m] + lam*z^[m]) / (1 + lam) on acquired locations,
    z^[m] elsewhere; returned in the image domain.
    """
    if lam <= 0:
        raise ParameterError(f"lam must be > 0, got {lam}")
    m = mask.mask if hasattr(mask, "mask") else np.asarray(mask, dtype=bool)
    z = np.asarray(z)
    b = np.asarray(b)
    if z.shape != m.shape or b.shape != m.shape:
        raise DimensionError(
            f"shape mismatch: z {z.shape}, b {b.shape}, mask {m.shape}"
        )
    zk = fft2c(z)
    xk = np.where(m, (b + lam * zk) / (1.0 + lam), zk)
    return ifft2c(xk)


def dc_backward_z(grad_x, model, lam, cfg: CgConfig = DEFAULT_CG, force_cg=False):
    """grad_z = lam * (A^H A + lam I)^{-1} grad_x (the DC layer's Jacobian
    w.r.t. its warm-start input is lam * Q^{-1}; Q is self-adjoint)."""
    grad_x = np.asarray(grad_x)
    out = _solve_regularized(model, grad_x, lam, cfg, force_cg=force_cg)
    return lam * out.x


def dc_backward_lambda(grad_x, x_out, z, model, cfg: CgConfig = DEFAULT_CG, lam=None, force_cg=False) -> float:
    """Scalar gradient of the loss w.r.t. lam through one DC layer:
    Re< grad_x, Q^{-1}(z - x_out) >."""
    if lam is None or lam <= 0:
        raise ParameterError(f"lam must be > 0, got {lam}")
    u = _solve_regularized(model, np.asarray(z) - np.asarray(x_out), lam, cfg, force_cg=force_cg)
    return _real_vdot(grad_x, u.x)


def dc_backward(grad_x, x_out, z, model, lam, cfg: CgConfig = DEFAULT_CG, force_cg=False):
    """Fused backward for one DC layer: (grad_z, grad_lam) with one solve.

    Uses u = Q^{-1} grad_x for both: grad_z = lam*u and, since Q^{-1} is
    self-adjoint, grad_lam = Re<grad_x, Q^{-1}(z - x)> = Re<u, z - x>.
    """
    u = _solve_regularized(model, np.asarray(grad_x), lam, cfg, force_cg=force_cg).x
    grad_z = lam * u
    grad_lam = _real_vdot(u, np.asarray(z) - np.asarray(x_out))
    return grad_z, grad_lam


def sd_step(z, model: ForwardModel, b, alpha):
    """One steepest-descent step on the data term: z - alpha * A^H (A z - b).

    The proximal-gradient baseline's replacement for the CG data-consistency
    solve. Any 0 < alpha < 2 decreases ||Ax - b||^2 under the orthonormal
    DFT, where ||A^H A|| <= 1.
    """
    if alpha <= 0:
        raise ParameterError(f"alpha must be > 0, got {alpha}")
    z = np.asarray(z)
    return z - alpha * adjoint(model, forward(model, z) - b)


def sd_backward(grad_x, z, model: ForwardModel, b, alpha):
    """Backward of :func:`sd_step`: grad_z = (I - alpha A^H A) grad_x and
    grad_alpha = -Re< grad_x, A^H(A z - b) >."""
    grad_x = np.asarray(grad_x)
    resid_img = adjoint(model, forward(model, z) - b)
    grad_z = grad_x - alpha * adjoint(model, forward(model, grad_x))
    grad_alpha = -_real_vdot(grad_x, resid_img)
    return grad_z, grad_alpha
