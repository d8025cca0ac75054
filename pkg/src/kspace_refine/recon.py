"""Reconstructors: zero-filled, classical ISTA and unrolled ISTA with analytic gradients.

The unrolled model has one ``(rho, theta)`` pair per phase.  Phase ``k`` computes::

    r_k = x_{k-1} - rho_k * E^H (E x_{k-1} - y)
    x_k = Psi^T soft(Psi r_k, theta_k)

with ``E`` the masked centred FFT and ``Psi`` an orthonormal Haar transform
(or the identity).  ``unrolled_backward`` is exact reverse mode through that
recursion.

Gradients of real losses with respect to complex arrays use the convention
``g = dL/dRe(x) + 1j * dL/dIm(x)``, so ``dL = Re(vdot(g, dx))``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Literal, Protocol

import numpy as np

from .errors import (
    DimensionError,
    FormatError,
    InternalError,
    InvalidInputError,
    InvalidTapeError,
    NumericError,
)
from .fourier import _fft2c, _ifft2c, as_image, as_mask, fft2c, ifft2c

__all__ = [
    "ReconConfig",
    "UnrolledParams",
    "ForwardTape",
    "Reconstructor",
    "ZeroFilled",
    "ClassicalISTA",
    "UnrolledISTA",
    "zero_filled",
    "soft_threshold",
    "haar_forward",
    "haar_inverse",
    "ista_objective",
    "ista_classical",
    "unrolled_forward",
    "unrolled_backward",
    "save_params",
    "load_params",
    "params_to_bytes",
    "params_from_bytes",
]

_SQRT_HALF = np.sqrt(0.5)
_OBJECTIVE_SLACK = 1e-9


@dataclass(frozen=True)
class ReconConfig:
    reg_weight: float = 1e-3
    num_iters: int = 50
    transform: Literal["identity", "haar"] = "haar"
    levels: int = 2
    step_size: float = 1.0

    def __post_init__(self):
        if self.reg_weight < 0:
            raise InvalidInputError("reg_weight must be non-negative")
        if self.num_iters < 1:
            raise InvalidInputError("num_iters must be positive")
        if self.transform not in ("identity", "haar"):
            raise InvalidInputError(f"unknown transform {self.transform!r}")
        if self.transform == "haar" and self.levels < 1:
            raise InvalidInputError("haar levels must be positive")
        if not 0 < self.step_size <= 1.0:
            raise InvalidInputError("step_size must lie in (0, 1]")


@dataclass
class UnrolledParams:
    rho: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        self.rho = np.array(self.rho, dtype=np.float64).reshape(-1)
        self.theta = np.array(self.theta, dtype=np.float64).reshape(-1)
        if self.rho.shape != self.theta.shape or self.rho.size < 1:
            raise InvalidInputError("rho and theta must be equal-length, non-empty")
        if not (np.all(np.isfinite(self.rho)) and np.all(np.isfinite(self.theta))):
            raise InvalidInputError("parameters must be finite")
        if np.any(self.theta < 0):
            raise InvalidInputError("thresholds must be non-negative")

    @classmethod
    def init(cls, phases: int = 9, rho: float = 1.0, theta: float = 0.01) -> UnrolledParams:
        return cls(np.full(phases, rho), np.full(phases, theta))

    @classmethod
    def from_array(cls, arr) -> UnrolledParams:
        a = np.asarray(arr, dtype=np.float64)
        return cls(a[:, 0], a[:, 1])

    @property
    def phases(self) -> int:
        return self.rho.size

    def as_array(self) -> np.ndarray:
        """``(K, 2)`` array with columns ``(rho, theta)``."""
        return np.stack([self.rho, self.theta], axis=1)

    def copy(self) -> UnrolledParams:
        return UnrolledParams(self.rho.copy(), self.theta.copy())

    def __eq__(self, other):
        if not isinstance(other, UnrolledParams):
            return NotImplemented
        return np.array_equal(self.rho, other.rho) and np.array_equal(self.theta, other.theta)


# -- operators -----------------------------------------------------------------


def zero_filled(y, omega) -> np.ndarray:
    k = as_image(y, "k-space")
    m = as_mask(omega, k.shape)
    return ifft2c(np.where(m, k, 0))


def soft_threshold(v, theta):
    """Complex soft threshold: shrink the modulus by ``theta``, keep the phase."""
    if np.any(np.asarray(theta) < 0):
        raise InvalidInputError("threshold must be non-negative")
    v = np.asarray(v)
    mag = np.abs(v)
    scale = np.maximum(mag - theta, 0.0) / np.where(mag > 0, mag, 1.0)
    out = v * scale
    if out.ndim == 0:
        return out.item()
    return out


def _check_haar_shape(shape, levels):
    f = 2**levels
    if shape[0] % f or shape[1] % f:
        raise DimensionError(f"shape {shape} not divisible by 2**{levels}")


def haar_forward(img, levels: int = 1) -> np.ndarray:
    """Orthonormal multilevel 2-D Haar transform in the usual nested layout.

    The approximation block ends up in the top-left ``H/2**L x W/2**L`` corner.
    """
    x = np.array(img, dtype=np.complex128)
    _check_haar_shape(x.shape, levels)
    h, w = x.shape
    for _ in range(levels):
        blk = x[:h, :w]
        blk = np.concatenate([blk[0::2] + blk[1::2], blk[0::2] - blk[1::2]], axis=0) * _SQRT_HALF
        blk = np.concatenate([blk[:, 0::2] + blk[:, 1::2], blk[:, 0::2] - blk[:, 1::2]], axis=1) * _SQRT_HALF
        x[:h, :w] = blk
        h //= 2
        w //= 2
    return x


def haar_inverse(coef, levels: int = 1) -> np.ndarray:
    x = np.array(coef, dtype=np.complex128)
    _check_haar_shape(x.shape, levels)
    h, w = x.shape[0] >> (levels - 1), x.shape[1] >> (levels - 1)
    for _ in range(levels):
        blk = x[:h, :w]
        hh, hw = h // 2, w // 2
        out = np.empty_like(blk)
        out[:, 0::2] = (blk[:, :hw] + blk[:, hw:]) * _SQRT_HALF
        out[:, 1::2] = (blk[:, :hw] - blk[:, hw:]) * _SQRT_HALF
        blk = out.copy()
        out[0::2] = (blk[:hh] + blk[hh:]) * _SQRT_HALF
        out[1::2] = (blk[:hh] - blk[hh:]) * _SQRT_HALF
        x[:h, :w] = out
        h *= 2
        w *= 2
    return x


def _psi(x, cfg: ReconConfig):
    return haar_forward(x, cfg.levels) if cfg.transform == "haar" else x


def _psi_t(c, cfg: ReconConfig):
    return haar_inverse(c, cfg.levels) if cfg.transform == "haar" else c


def _gram(x, mask):
    """E^H E x for the masked centred FFT."""
    return _ifft2c(np.where(mask, _fft2c(x), 0))


# -- classical ISTA --------------------------------------------------------------


def ista_objective(x, y, omega, cfg: ReconConfig) -> float:
    """0.5 ||Omega (y - F x)||^2 + reg_weight * ||Psi x||_1."""
    m = as_mask(omega)
    resid = np.where(m, np.asarray(y) - fft2c(x), 0)
    return 0.5 * float(np.vdot(resid, resid).real) + cfg.reg_weight * float(np.abs(_psi(x, cfg)).sum())


def ista_classical(y, omega, cfg: ReconConfig = ReconConfig(), return_history: bool = False):
    """Proximal gradient descent on the l1-regularised least-squares objective.

    Starts from the zero-filled image.  Raises :class:`InternalError` if the
    objective ever increases, which for ``step_size <= 1`` can only come from
    a broken operator.
    """
    k = as_image(y, "k-space")
    m = as_mask(omega, k.shape)
    if cfg.transform == "haar":
        _check_haar_shape(k.shape, cfg.levels)
    k = np.where(m, k, 0)
    aty = ifft2c(k)
    x = aty
    thresh = cfg.step_size * cfg.reg_weight
    history = [ista_objective(x, k, m, cfg)]
    for it in range(cfg.num_iters):
        r = x - cfg.step_size * (_gram(x, m) - aty)
        x = _psi_t(soft_threshold(_psi(r, cfg), thresh), cfg)
        obj = ista_objective(x, k, m, cfg)
        if obj > history[-1] + _OBJECTIVE_SLACK:
            raise InternalError(
                f"ISTA objective increased at iteration {it + 1}: {history[-1]!r} -> {obj!r}"
            )
        history.append(obj)
    return (x, history) if return_history else x


# -- unrolled ISTA ---------------------------------------------------------------


@dataclass
class ForwardTape:
    params: UnrolledParams
    cfg: ReconConfig
    mask: np.ndarray
    inputs: list = field(default_factory=list)  # x_{k-1}
    grads: list = field(default_factory=list)  # E^H(E x_{k-1} - y)
    coefs: list = field(default_factory=list)  # Psi r_k
    output: np.ndarray | None = None


def unrolled_forward(y, omega, params: UnrolledParams, cfg: ReconConfig = ReconConfig()):
    k = as_image(y, "k-space")
    m = as_mask(omega, k.shape)
    if cfg.transform == "haar":
        _check_haar_shape(k.shape, cfg.levels)
    aty = ifft2c(np.where(m, k, 0))
    x = aty
    tape = ForwardTape(params.copy(), cfg, m)
    for i in range(params.phases):
        with np.errstate(over="ignore", invalid="ignore"):
            g = _gram(x, m) - aty
            z = _psi(x - params.rho[i] * g, cfg)
            x_next = _psi_t(soft_threshold(z, params.theta[i]), cfg)
        if not np.all(np.isfinite(x_next)):
            raise NumericError(f"non-finite values in unrolled phase {i + 1}")
        tape.inputs.append(x)
        tape.grads.append(g)
        tape.coefs.append(z)
        x = x_next
    tape.output = x
    return x, tape


def unrolled_backward(tape: ForwardTape, loss_grad) -> np.ndarray:
    """Gradient of a scalar loss with respect to ``(rho, theta)``; shape ``(K, 2)``.

    At the soft-threshold kink ``|z| == theta`` the zero side is used.
    """
    p = tape.params
    n = p.phases
    if not (len(tape.inputs) == len(tape.grads) == len(tape.coefs) == n) or tape.output is None:
        raise InvalidTapeError("tape does not match its parameters")
    gx = np.asarray(loss_grad, dtype=np.complex128)
    if gx.shape != tape.output.shape:
        raise InvalidTapeError(f"loss gradient shape {gx.shape} != output shape {tape.output.shape}")
    cfg = tape.cfg
    out = np.zeros((n, 2))
    for i in reversed(range(n)):
        theta = p.theta[i]
        z = tape.coefs[i]
        gu = _psi(gx, cfg)
        mag = np.abs(z)
        active = mag > theta
        safe = np.where(active, mag, 1.0)
        unit = np.where(active, z / safe, 0)
        out[i, 1] = -float(np.sum((np.conj(gu) * unit).real))
        proj = (np.conj(gu) * unit).real
        gz = np.where(active, gu * (1 - theta / safe) + (theta / safe) * proj * unit, 0)
        gr = _psi_t(gz, cfg)
        out[i, 0] = -float(np.vdot(gr, tape.grads[i]).real)
        gx = gr - p.rho[i] * _gram(gr, tape.mask)
    return out


# -- reconstructor objects -------------------------------------------------------


class Reconstructor(Protocol):
    def reconstruct(self, y, omega) -> np.ndarray: ...


class ZeroFilled:
    def reconstruct(self, y, omega):
        return zero_filled(y, omega)


@dataclass
class ClassicalISTA:
    cfg: ReconConfig = ReconConfig()

    def reconstruct(self, y, omega):
        return ista_classical(y, omega, self.cfg)


@dataclass
class UnrolledISTA:
    params: UnrolledParams
    cfg: ReconConfig = ReconConfig()

    def reconstruct(self, y, omega):
        return unrolled_forward(y, omega, self.params, self.cfg)[0]

    def clone(self) -> UnrolledISTA:
        return UnrolledISTA(self.params.copy(), self.cfg)

    def serialize(self) -> bytes:
        return params_to_bytes(self.params)


# -- checkpoint format -----------------------------------------------------------

_MAGIC = b"KRFP"
_VERSION = 1


def params_to_bytes(params: UnrolledParams) -> bytes:
    head = _MAGIC + struct.pack("<HI", _VERSION, params.phases)
    return head + params.as_array().astype("<f8").tobytes()


def params_from_bytes(blob: bytes) -> UnrolledParams:
    if len(blob) < 10:
        raise FormatError("truncated checkpoint header", offset=len(blob))
    if blob[:4] != _MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    version, k = struct.unpack_from("<HI", blob, 4)
    if version != _VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    expected = 10 + 16 * k
    if len(blob) != expected:
        raise FormatError(f"checkpoint length {len(blob)} != expected {expected}", offset=min(len(blob), expected))
    arr = np.frombuffer(blob, dtype="<f8", offset=10).reshape(k, 2)
    try:
        return UnrolledParams.from_array(arr)
    except InvalidInputError as exc:
        raise FormatError(f"invalid parameter values: {exc}", offset=10) from exc


def save_params(path, params: UnrolledParams) -> None:
    from .data import atomic_write

    atomic_write(path, params_to_bytes(params))


def load_params(path) -> UnrolledParams:
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read())
