"""Run configuration: JSON schema, defaults and validation."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .calibration import ESTIMATORS, HalfCauchy, InverseGamma
from .emulator import EmulatorConfig
from .gp_core import DEFAULT_NUGGET, SubsampleSpec


class ConfigError(ValueError):
    """Invalid run configuration."""


@dataclass(frozen=True)
class BasisConfig:
    min_var_frac: float = 0.95
    p: int | None = None
    rsvd: dict | None = None  # {"oversample": int, "power_iters": int}


@dataclass(frozen=True)
class LengthscaleConfig:
    method: str = "blhs"
    d_est: int | None = None  # None: sized from the ensemble
    m_est: int | None = None
    r_est: int = 25


@dataclass(frozen=True)
class CalibrationConfig:
    m_c: int = 50
    n_samples: int = 1500
    n_burn: int = 500
    thin: int = 1
    S_sub: int = 100
    prior_sigma2: dict = field(default_factory=lambda: {"ig": {"alpha": 1.0, "beta": 0.001}})
    discrepancy: str | dict = "none"  # "none" | "linear" | {"basis_file": path}
    nugget_mode: str = "estimate"
    refit_every: int = 1
    estimator: str = "pseudo_marginal"


@dataclass(frozen=True)
class RunConfig:
    basis: BasisConfig = field(default_factory=BasisConfig)
    lengthscale: LengthscaleConfig = field(default_factory=LengthscaleConfig)
    nugget: float = DEFAULT_NUGGET
    emulator: dict = field(default_factory=lambda: {"m": 50})
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    map: dict = field(default_factory=lambda: {"restarts": 7})
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @property
    def m(self) -> int:
        return int(self.emulator["m"])

    @property
    def restarts(self) -> int:
        return int(self.map["restarts"])

    def emulator_config(self, workers: int = 1) -> EmulatorConfig:
        b, ls = self.basis, self.lengthscale
        size = ls.d_est if ls.method == "blhs" else ls.m_est
        rsvd = b.rsvd or {}
        return EmulatorConfig(
            min_var_frac=b.min_var_frac,
            p=b.p,
            rsvd=b.rsvd is not None,
            oversample=int(rsvd.get("oversample", 10)),
            power_iters=int(rsvd.get("power_iters", 2)),
            subsample=SubsampleSpec(ls.method, size, ls.r_est),
            nugget=self.nugget,
            seed=self.seed,
            workers=workers,
        )

    def sigma2_prior(self):
        (kind, params), = self.calibration.prior_sigma2.items()
        if kind == "ig":
            return InverseGamma(float(params.get("alpha", 1.0)), float(params.get("beta", 0.001)))
        return HalfCauchy(float(params.get("scale", 0.5)))


def _build(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    known = set(cls.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _positive_int(value, name):
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ConfigError(f"{name} must be a positive integer, got {value!r}")


def validate(cfg: RunConfig) -> RunConfig:
    b = cfg.basis
    if b.p is None:
        if not isinstance(b.min_var_frac, (int, float)) or not 0.0 < b.min_var_frac <= 1.0:
            raise ConfigError("basis.min_var_frac must be in (0, 1]")
    else:
        _positive_int(b.p, "basis.p")
    if b.rsvd is not None:
        if b.p is None:
            raise ConfigError("basis.rsvd requires a fixed basis.p")
        if set(b.rsvd) - {"oversample", "power_iters"}:
            raise ConfigError("basis.rsvd accepts only oversample and power_iters")
        _positive_int(b.rsvd.get("oversample", 10), "basis.rsvd.oversample")
        if int(b.rsvd.get("power_iters", 2)) < 0:
            raise ConfigError("basis.rsvd.power_iters must be >= 0")
    ls = cfg.lengthscale
    if ls.method not in ("blhs", "stratified"):
        raise ConfigError("lengthscale.method must be 'blhs' or 'stratified'")
    _positive_int(ls.r_est, "lengthscale.r_est")
    for name in ("d_est", "m_est"):
        if getattr(ls, name) is not None:
            _positive_int(getattr(ls, name), f"lengthscale.{name}")
    if ls.method == "blhs" and ls.d_est is not None and ls.d_est < 2:
        raise ConfigError("lengthscale.d_est must be >= 2")
    if not isinstance(cfg.nugget, (int, float)) or not 0.0 < cfg.nugget < 1.0:
        raise ConfigError("nugget must be in (0, 1)")
    if set(cfg.emulator) != {"m"}:
        raise ConfigError("emulator accepts exactly one key, m")
    _positive_int(cfg.emulator["m"], "emulator.m")
    c = cfg.calibration
    for name in ("m_c", "n_samples", "thin", "S_sub", "refit_every"):
        _positive_int(getattr(c, name), f"calibration.{name}")
    if isinstance(c.n_burn, bool) or not isinstance(c.n_burn, int) or not 0 <= c.n_burn < c.n_samples:
        raise ConfigError("calibration.n_burn must satisfy 0 <= n_burn < n_samples")
    if c.S_sub > c.n_samples - c.n_burn:
        raise ConfigError("calibration.S_sub exceeds the number of post burn-in samples")
    if not isinstance(c.prior_sigma2, dict) or len(c.prior_sigma2) != 1:
        raise ConfigError("calibration.prior_sigma2 must be {'ig': {...}} or {'half_cauchy': {...}}")
    (kind, params), = c.prior_sigma2.items()
    allowed = {"ig": {"alpha", "beta"}, "half_cauchy": {"scale"}}
    if kind not in allowed or not isinstance(params, dict) or set(params) - allowed[kind]:
        raise ConfigError(f"bad calibration.prior_sigma2 entry {kind!r}")
    if any(not isinstance(v, (int, float)) or v <= 0 for v in params.values()):
        raise ConfigError("prior parameters must be positive")
    d = c.discrepancy
    if not (d in ("none", "linear") or (isinstance(d, dict) and set(d) == {"basis_file"})):
        raise ConfigError("calibration.discrepancy must be 'none', 'linear' or {'basis_file': path}")
    if c.nugget_mode not in ("estimate", "fixed"):
        raise ConfigError("calibration.nugget_mode must be 'estimate' or 'fixed'")
    if c.estimator not in ESTIMATORS:
        raise ConfigError(f"calibration.estimator must be one of {ESTIMATORS}")
    _positive_int(cfg.map.get("restarts"), "map.restarts")
    if set(cfg.map) != {"restarts"}:
        raise ConfigError("map accepts exactly one key, restarts")
    if isinstance(cfg.seed, bool) or not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    return cfg


def from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(data) - set(RunConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    defaults = RunConfig()
    cfg = RunConfig(
        basis=_build(BasisConfig, data.get("basis"), "basis"),
        lengthscale=_build(LengthscaleConfig, data.get("lengthscale"), "lengthscale"),
        nugget=data.get("nugget", defaults.nugget),
        emulator={**defaults.emulator, **(data.get("emulator") or {})},
        calibration=_build(CalibrationConfig, data.get("calibration"), "calibration"),
        map={**defaults.map, **(data.get("map") or {})},
        seed=data.get("seed", defaults.seed),
    )
    return validate(cfg)


def load(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return from_dict(data)
