"""Self-supervised loss, Adam, and the per-stage training loop.

The loss for one sample with target k-space ``t`` on mask ``Omega`` and input
subset ``Lambda``::

    x   = f(Lambda * t, Lambda)
    L   = mean_{Omega} |F x - t|^2 + gamma * mean_{Lambda} |F x - t|^2

Means run over kept points only.  Ground truth never enters this path; the
supervised objective exists for upper-bound experiments and takes its
fully sampled k-space from the caller.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from ._parallel import ordered_map
from .data import TrainSample
from .errors import InvalidInputError, MaskViolationError, NumericError
from .fourier import _fft2c, _ifft2c
from .masks import LambdaSpec, derive_seed, gen_lambda
from .recon import ReconConfig, UnrolledParams, unrolled_backward, unrolled_forward

__all__ = [
    "TrainConfig",
    "LossTape",
    "AdamState",
    "EpochRecord",
    "StageReport",
    "SelfSupervisedObjective",
    "SupervisedObjective",
    "selfsup_loss",
    "supervised_loss",
    "loss_gradient",
    "adam_step",
    "train_stage",
]

IMPROVEMENT_TOL = 1e-7
BETA1, BETA2, EPS = 0.9, 0.999, 1e-8


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.01
    lr: float = 0.001
    batch_size: int = 4
    epochs_per_stage: int = 20
    patience_epochs: int = 10
    lr_reduce_factor: float = 0.5
    lr_plateau_patience: int = 5
    master_seed: int = 0
    lambda_ratio: float = 0.5
    lambda_band: int = 4
    fixed_lambda: bool = False

    def __post_init__(self):
        if self.gamma < 0:
            raise InvalidInputError("gamma must be non-negative")
        if self.lr <= 0:
            raise InvalidInputError("lr must be positive")
        if not 0 < self.lr_reduce_factor < 1:
            raise InvalidInputError("lr_reduce_factor must lie in (0, 1)")
        for name in ("batch_size", "epochs_per_stage", "patience_epochs", "lr_plateau_patience"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be positive")
        if self.master_seed < 0:
            raise InvalidInputError("master_seed must be non-negative")


@dataclass
class LossTape:
    forward: object
    grad_output: np.ndarray


def _masked_mse(pred_k, target_k, mask):
    """Mean squared modulus over kept points and its gradient w.r.t. the image."""
    diff = np.where(mask, pred_k - target_k, 0)
    n = int(mask.sum())
    value = float(np.vdot(diff, diff).real) / n
    return value, _ifft2c(diff) * (2.0 / n)


def selfsup_loss(sample: TrainSample, lambda_mask, params: UnrolledParams, cfg: TrainConfig,
                 recon_cfg: ReconConfig = ReconConfig()):
    lam = np.asarray(lambda_mask, dtype=bool)
    if lam.shape != sample.omega.shape or np.any(lam & ~sample.omega):
        raise MaskViolationError(f"sample {sample.subject_id}: lambda mask is not a subset of omega")
    y_in = np.where(lam, sample.target_k, 0)
    x, tape = unrolled_forward(y_in, lam, params, recon_cfg)
    pred = _fft2c(x)
    main, g_main = _masked_mse(pred, sample.target_k, sample.scored)
    cons, g_cons = _masked_mse(pred, sample.target_k, lam)
    loss = main + cfg.gamma * cons
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss for sample {sample.subject_id}")
    return loss, LossTape(tape, g_main + cfg.gamma * g_cons)


def supervised_loss(full_k, sample: TrainSample, params: UnrolledParams, recon_cfg: ReconConfig = ReconConfig()):
    """MSE over the whole grid against fully sampled k-space; input is the acquired data."""
    x, tape = unrolled_forward(sample.target_k, sample.omega, params, recon_cfg)
    full = np.ones(sample.omega.shape, dtype=bool)
    loss, g = _masked_mse(_fft2c(x), np.asarray(full_k), full)
    return loss, LossTape(tape, g)


def loss_gradient(tape: LossTape) -> np.ndarray:
    return unrolled_backward(tape.forward, tape.grad_output)


# -- optimiser -----------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, shape) -> AdamState:
        return cls(np.zeros(shape), np.zeros(shape))


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float, names=None):
    """One Adam update on a float array. Returns ``(new_params, new_state)``."""
    g = np.asarray(grads, dtype=np.float64)
    p = np.asarray(params, dtype=np.float64)
    if g.shape != p.shape or state.m.shape != p.shape:
        raise InvalidInputError(f"shape mismatch: params {p.shape}, grads {g.shape}, state {state.m.shape}")
    bad = np.flatnonzero(~np.isfinite(g.reshape(-1)))
    if bad.size:
        idx = int(bad[0])
        label = names[idx] if names is not None else f"index {idx}"
        raise NumericError(f"non-finite gradient for parameter {label}")
    t = state.t + 1
    m = BETA1 * state.m + (1 - BETA1) * g
    v = BETA2 * state.v + (1 - BETA2) * g * g
    m_hat = m / (1 - BETA1**t)
    v_hat = v / (1 - BETA2**t)
    return p - lr * m_hat / (np.sqrt(v_hat) + EPS), AdamState(m, v, t)


def _param_names(k):
    return [f"{n}[{i}]" for i in range(k) for n in ("rho", "theta")]


# -- objectives ------------------------------------------------------------------------


class SelfSupervisedObjective:
    """Per-sample self-supervised loss with Lambda drawn from seeds.

    Training draws a fresh Lambda per (stage, epoch, sample) unless
    ``cfg.fixed_lambda``; validation always uses one fixed Lambda per sample.
    """

    def __init__(self, cfg: TrainConfig, recon_cfg: ReconConfig = ReconConfig(), stage: int = 0):
        self.cfg = cfg
        self.recon_cfg = recon_cfg
        self.stage = stage

    def _lambda(self, sample, seed):
        spec = LambdaSpec(self.cfg.lambda_ratio, self.cfg.lambda_band, seed)
        return gen_lambda(sample.omega, spec)

    def train_lambda(self, sample, epoch, index):
        if self.cfg.fixed_lambda:
            seed = derive_seed(self.cfg.master_seed, index, 2)
        else:
            seed = derive_seed(self.cfg.master_seed, self.stage, epoch, index, 1)
        return self._lambda(sample, seed)

    def __call__(self, sample, params, epoch, index):
        lam = self.train_lambda(sample, epoch, index)
        loss, tape = selfsup_loss(sample, lam, params, self.cfg, self.recon_cfg)
        return loss, loss_gradient(tape)

    def validate(self, samples, params) -> float:
        losses = ordered_map(
            lambda item: selfsup_loss(
                item[1], self._lambda(item[1], derive_seed(self.cfg.master_seed, item[0], 3)),
                params, self.cfg, self.recon_cfg)[0],
            list(enumerate(samples)),
        )
        return float(np.mean(losses))


class SupervisedObjective:
    """Fully supervised loss for upper-bound comparisons; ``truth_k`` maps subject id to full k-space."""

    def __init__(self, truth_k: dict, recon_cfg: ReconConfig = ReconConfig()):
        self.truth_k = truth_k
        self.recon_cfg = recon_cfg

    def __call__(self, sample, params, epoch, index):
        loss, tape = supervised_loss(self.truth_k[sample.subject_id], sample, params, self.recon_cfg)
        return loss, loss_gradient(tape)

    def validate(self, samples, params) -> float:
        return float(np.mean([
            supervised_loss(self.truth_k[s.subject_id], s, params, self.recon_cfg)[0] for s in samples
        ]))


# -- reports ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class StageReport:
    stage: int
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    stop_reason: str = "max-epochs"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for r in self.records:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.lr)])
        return buf.getvalue()

    def to_log(self) -> str:
        lines = [f"stage {self.stage}"]
        lines += [
            f"epoch {r.epoch} train_loss {r.train_loss!r} val_loss {r.val_loss!r} lr {r.lr!r}"
            for r in self.records
        ]
        lines.append(f"best_epoch {self.best_epoch} best_val_loss {self.best_val_loss!r} stop {self.stop_reason}")
        return "\n".join(lines) + "\n"


# -- stage loop ------------------------------------------------------------------------


def train_stage(dataset, params: UnrolledParams, cfg: TrainConfig, val_set=None, *,
                recon_cfg: ReconConfig = ReconConfig(), stage: int = 0,
                objective=None, validate=None):
    """Train for at most ``cfg.epochs_per_stage`` epochs with plateau LR decay and early stopping.

    ``objective(sample, params, epoch, index) -> (loss, grad)`` defaults to the
    self-supervised loss.  ``validate(params) -> float`` defaults to the
    objective's validation loss on ``val_set`` (or on ``dataset`` when no
    validation set is given).  Returns the parameters of the best validation
    epoch and a :class:`StageReport`.
    """
    dataset = list(dataset)
    if not dataset:
        raise InvalidInputError("training dataset is empty")
    if objective is None:
        objective = SelfSupervisedObjective(cfg, recon_cfg, stage)
    if validate is None:
        held_out = list(val_set) if val_set else dataset
        validate = lambda p: objective.validate(held_out, p)  # noqa: E731

    names = _param_names(params.phases)
    current = params.copy()
    state = AdamState.zeros((params.phases, 2))
    lr = cfg.lr
    report = StageReport(stage)
    best = current.copy()
    since_improvement = 0
    since_lr_change = 0

    for epoch in range(1, cfg.epochs_per_stage + 1):
        order = np.random.default_rng(derive_seed(cfg.master_seed, stage, epoch, 0)).permutation(len(dataset))
        losses = []
        try:
            for start in range(0, len(order), cfg.batch_size):
                batch = [int(i) for i in order[start:start + cfg.batch_size]]
                snapshot = current
                results = ordered_map(lambda i: objective(dataset[i], snapshot, epoch, i), batch)
                grad = np.zeros((params.phases, 2))
                for loss, g in results:
                    losses.append(loss)
                    grad = grad + g
                grad = grad / len(batch)
                new, state = adam_step(current.as_array(), grad, state, lr, names)
                new[:, 1] = np.maximum(new[:, 1], 0.0)
                current = UnrolledParams.from_array(new)
            val = float(validate(current))
        except NumericError as exc:
            raise NumericError(f"stage {stage} epoch {epoch}: {exc}") from exc
        train_loss = float(np.mean(losses))
        if not (math.isfinite(train_loss) and math.isfinite(val)):
            raise NumericError(f"stage {stage} epoch {epoch}: non-finite loss (train {train_loss}, val {val})")
        report.records.append(EpochRecord(epoch, train_loss, val, lr))

        if val < report.best_val_loss:
            improved = val < report.best_val_loss - IMPROVEMENT_TOL
            report.best_val_loss = val
            report.best_epoch = epoch
            best = current.copy()
        else:
            improved = False
        if improved:
            since_improvement = 0
            since_lr_change = 0
        else:
            since_improvement += 1
            since_lr_change += 1
            if since_improvement >= cfg.patience_epochs:
                report.stop_reason = "early-stop"
                break
            if since_lr_change >= cfg.lr_plateau_patience:
                lr *= cfg.lr_reduce_factor
                since_lr_change = 0
    return best, report
