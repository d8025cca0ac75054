"""Flat ``key = value`` run configuration with ``#`` comments."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .data import PhantomSpec
from .errors import ConfigError, KspaceRefineError
from .masks import MaskSpec, derive_seed
from .recon import ReconConfig, UnrolledParams
from .refine import RefineConfig
from .train import TrainConfig

_SEED_MASK = (1 << 63) - 1


@dataclass
class RunConfig:
    experiment: str = "run"
    run_dir: str = "runs/default"
    data_dir: str = "data"
    seed: int = 0
    # phantoms and acquisition
    height: int = 64
    width: int = 64
    phantom: str = "random-ellipses"
    ellipse_count: int = 6
    noise_sigma: float = 0.0
    n_train: int = 20
    n_val: int = 5
    n_test: int = 10
    acceleration: int = 4
    acs_lines: int = 8
    mask_kind: str = "random-line"
    # self-supervision subset
    lambda_ratio: float = 0.5
    lambda_band: int = 4
    fixed_lambda: bool = False
    # reconstructors
    phases: int = 9
    init_rho: float = 1.0
    init_theta: float = 0.01
    transform: str = "haar"
    haar_levels: int = 2
    reg_weight: float = 1e-3
    ista_iters: int = 50
    step_size: float = 1.0
    # training
    gamma: float = 0.01
    lr: float = 0.001
    batch_size: int = 4
    epochs_per_stage: int = 20
    patience_epochs: int = 10
    lr_reduce_factor: float = 0.5
    lr_plateau_patience: int = 5
    # refinement
    num_stages: int = 15
    mask_bank_size: int = 4
    keep_acquired: bool = True
    warm_start: bool = True
    pure_simulated: bool = False
    score_acquired_only: bool = False
    # export
    error_scale: float = 5.0

    base_dir: str = dataclasses.field(default=".", repr=False)

    # -- derived objects --------------------------------------------------------

    def path(self, value) -> Path:
        p = Path(value)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def run_path(self) -> Path:
        return self.path(self.run_dir)

    @property
    def data_path(self) -> Path:
        return self.path(self.data_dir)

    def _seed(self, tag: int) -> int:
        return derive_seed(self.seed, tag) & _SEED_MASK

    def phantom_spec(self) -> PhantomSpec:
        return PhantomSpec(self.height, self.width, self.phantom, self.ellipse_count,
                           self.noise_sigma, self._seed(1))

    def mask_spec(self) -> MaskSpec:
        return MaskSpec(self.height, self.width, self.acceleration, self.acs_lines,
                        self.mask_kind, self._seed(2))

    def recon_config(self) -> ReconConfig:
        return ReconConfig(self.reg_weight, self.ista_iters, self.transform, self.haar_levels, self.step_size)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.gamma, self.lr, self.batch_size, self.epochs_per_stage,
                           self.patience_epochs, self.lr_reduce_factor, self.lr_plateau_patience,
                           self._seed(3), self.lambda_ratio, self.lambda_band, self.fixed_lambda)

    def refine_config(self) -> RefineConfig:
        return RefineConfig(self.num_stages, self.mask_bank_size, self.keep_acquired,
                            self.warm_start, self.pure_simulated, self.score_acquired_only,
                            self.train_config())

    def init_params(self) -> UnrolledParams:
        return UnrolledParams.init(self.phases, self.init_rho, self.init_theta)

    def validate(self) -> RunConfig:
        """Build every derived object once so invalid values surface as ConfigError."""
        try:
            self.phantom_spec()
            self.mask_spec()
            self.recon_config()
            self.refine_config()
            self.init_params()
        except KspaceRefineError as exc:
            raise ConfigError(str(exc)) from exc
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ConfigError("n_train, n_val and n_test must be positive")
        if self.error_scale <= 0:
            raise ConfigError("error_scale must be positive")
        return self


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig) if f.name != "base_dir"}


def _convert(key, raw: str):
    kind = _FIELDS[key].type
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {raw!r}") from None
    return raw


def parse_config(text: str, base_dir=".", overrides=None) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        values[key] = _convert(key, raw)
    for key, value in (overrides or {}).items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = value
    return RunConfig(base_dir=str(base_dir), **values).validate()


def load_config(path, overrides=None) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), path.parent, overrides)


def dump_config(cfg: RunConfig) -> str:
    out = []
    for name in _FIELDS:
        v = getattr(cfg, name)
        out.append(f"{name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(out) + "\n"
