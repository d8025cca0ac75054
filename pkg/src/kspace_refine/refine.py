"""Stage-by-stage training with iterative refinement of the training targets.

Stage 0 trains on the acquired data.  Every later stage pushes the acquired
k-space of each subject through the previous stage's best model, restores the
acquired points, restricts the result to ``Omega_sim | Omega`` (``Omega_sim``
from a bank of simulated masks) and trains on that.  Only
:class:`~kspace_refine.data.TrainSample` objects flow through here.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._parallel import ordered_map
from .data import (
    KIND_KSPACE,
    ManifestEntry,
    TrainSample,
    atomic_write,
    read_manifest,
    read_tensor,
    sha256_file,
    write_manifest,
    write_tensor,
)
from .errors import InvalidInputError, KspaceRefineError, NumericError
from .fourier import data_consistency, fft2c
from .masks import MaskSpec, derive_seed, gen_mask_bank
from .recon import ReconConfig, UnrolledISTA, UnrolledParams, save_params
from .train import StageReport, TrainConfig, train_stage

__all__ = [
    "RefineConfig",
    "RefineState",
    "RefinementError",
    "refine_dataset",
    "check_preservation",
    "run_refinement",
    "audit_run",
]


class RefinementError(KspaceRefineError):
    """A stage failed; ``state`` holds everything up to the last completed stage."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


@dataclass(frozen=True)
class RefineConfig:
    num_stages: int = 15
    mask_bank_size: int = 4
    keep_acquired: bool = True
    warm_start: bool = True
    pure_simulated: bool = False
    score_acquired_only: bool = False
    train: TrainConfig = TrainConfig()

    def __post_init__(self):
        if self.num_stages < 1:
            raise InvalidInputError("num_stages must be >= 1")
        if self.mask_bank_size < 1:
            raise InvalidInputError("mask_bank_size must be >= 1")


@dataclass
class RefineState:
    stage_index: int = 0
    current_dataset: list = field(default_factory=list)
    best_params_per_stage: list = field(default_factory=list)
    metrics_history: list = field(default_factory=list)
    best_stage: int = 0


def refine_dataset(model, original, stage: int, bank, *, keep_acquired: bool = True,
                   pure_simulated: bool = False, score_acquired_only: bool = False) -> list[TrainSample]:
    """Refined copies of ``original`` for training stage ``stage``.

    Sample ``i`` gets bank mask ``(i + stage) % len(bank)``.  With
    ``score_acquired_only`` the refined sample's ``loss_mask`` is its original
    acquisition mask, so filled-in points only ever serve as network input.
    """
    if not bank:
        raise InvalidInputError("mask bank is empty")

    def one(item):
        i, s = item
        try:
            k_hat = fft2c(model.reconstruct(s.target_k, s.omega))
        except Exception as exc:
            raise RefinementError(f"model failed on subject {s.subject_id}: {exc}") from exc
        if keep_acquired:
            k_hat = data_consistency(k_hat, s.target_k, s.omega)
        sim = np.asarray(bank[(i + stage) % len(bank)], dtype=bool)
        mask = sim if pure_simulated else sim | s.omega
        scored = (s.omega & mask) if score_acquired_only else None
        return TrainSample(np.where(mask, k_hat, 0), mask, s.subject_id, scored)

    return ordered_map(one, list(enumerate(original)))


def check_preservation(original, refined) -> None:
    """Raise unless every refined target equals the acquired data on the acquired mask."""
    for o, r in zip(original, refined, strict=True):
        if o.subject_id != r.subject_id or not np.array_equal(r.target_k[o.omega], o.target_k[o.omega]):
            raise RefinementError(f"acquired data of subject {o.subject_id} was modified")


def _stage_dir(run_dir, stage):
    return Path(run_dir) / f"stage_{stage + 1}"


def _write_stage(run_dir, stage, params, report: StageReport, dataset, refined: bool):
    d = _stage_dir(run_dir, stage)
    d.mkdir(parents=True, exist_ok=True)
    save_params(d / "params.krfp", params)
    atomic_write(d / "stage.csv", report.to_csv().encode())
    atomic_write(d / "stage.log", report.to_log().encode())
    if refined:
        entries = []
        for s in dataset:
            rel = f"refined/{s.subject_id}.ksp.krt"
            write_tensor(d / rel, s.target_k, KIND_KSPACE)
            write_tensor(d / f"refined/{s.subject_id}.mask.krt", s.omega)
            entries.append(ManifestEntry(s.subject_id, rel, sha256_file(d / rel), "train"))
        write_manifest(d / "refined_manifest.tsv", entries)


def run_refinement(original, cfg: RefineConfig, val_set=None, *, mask_spec: MaskSpec,
                   recon_cfg: ReconConfig = ReconConfig(), init_params: UnrolledParams | None = None,
                   run_dir=None):
    """Run ``cfg.num_stages`` training stages; return ``(best_params, RefineState)``.

    The validation set is refined alongside the training set with the same
    model, so each stage validates on data of the kind it trains on.  The
    returned parameters come from the stage with the lowest best validation loss.
    """
    original = list(original)
    val_original = list(val_set) if val_set else []
    if not original:
        raise InvalidInputError("training dataset is empty")
    h, w = original[0].target_k.shape
    if (mask_spec.height, mask_spec.width) != (h, w):
        mask_spec = replace(mask_spec, height=h, width=w)
    init = init_params.copy() if init_params is not None else UnrolledParams.init()
    bank = gen_mask_bank(mask_spec, cfg.mask_bank_size, derive_seed(cfg.train.master_seed, 11))
    state = RefineState(current_dataset=original)
    params = init
    train_set, val = original, val_original
    for stage in range(cfg.num_stages):
        try:
            if stage > 0:
                model = UnrolledISTA(state.best_params_per_stage[-1], recon_cfg)
                opts = dict(keep_acquired=cfg.keep_acquired, pure_simulated=cfg.pure_simulated,
                            score_acquired_only=cfg.score_acquired_only)
                train_set = refine_dataset(model, original, stage, bank, **opts)
                if cfg.keep_acquired and not cfg.pure_simulated:
                    check_preservation(original, train_set)
                if val_original:
                    val = refine_dataset(model, val_original, stage, bank, **opts)
            start = params if cfg.warm_start else init
            best, report = train_stage(train_set, start, cfg.train, val, recon_cfg=recon_cfg, stage=stage)
        except (KspaceRefineError, NumericError) as exc:
            raise RefinementError(f"stage {stage + 1} failed: {exc}", state) from exc
        state.stage_index = stage + 1
        state.current_dataset = train_set
        state.best_params_per_stage.append(best)
        state.metrics_history.append(report)
        if report.best_val_loss < state.metrics_history[state.best_stage].best_val_loss:
            state.best_stage = stage
        params = best
        if run_dir is not None:
            _write_stage(run_dir, stage, best, report, train_set, refined=stage > 0)
    return state.best_params_per_stage[state.best_stage].copy(), state


def audit_run(run_dir, original) -> int:
    """Offline check of a run directory: hashes and acquired-data preservation.

    Returns the number of refined stages audited.
    """
    by_id = {s.subject_id: s for s in original}
    audited = 0
    for manifest in sorted(Path(run_dir).glob("stage_*/refined_manifest.tsv")):
        root = manifest.parent
        for e in read_manifest(manifest):
            if sha256_file(root / e.path) != e.sha256:
                raise RefinementError(f"hash mismatch for {root / e.path}")
            k = read_tensor(root / e.path)
            o = by_id[e.subject_id]
            if not np.array_equal(k[o.omega], o.target_k[o.omega]):
                raise RefinementError(f"acquired data of {e.subject_id} modified in {root.name}")
        audited += 1
    return audited


def dataset_digest(samples) -> str:
    """SHA-256 over all targets and masks, for quick equality checks."""
    h = hashlib.sha256()
    for s in samples:
        h.update(s.subject_id.encode())
        h.update(s.target_k.tobytes())
        h.update(s.omega.tobytes())
    return h.hexdigest()
