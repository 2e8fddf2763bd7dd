"""Run configuration: JSON with strict schema checks.

Defaults reproduce the baseline estimator configuration.  Grade-dependent
ZUPT settings left as ``null`` follow the selected IMU grade.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .ambiguity.aperture import ApertureTable
from .cdgnss import NoiseModelParams
from .ins import ImuParams
from .integrity import IntegrityParams, ReseedCriteria
from .montecarlo import MonteCarloSpec
from .sqrt_update import AmbiguityParams
from .vdc import VdcParams


class ConfigError(ValueError):
    """Invalid or unreadable-as-schema configuration."""


@dataclass(frozen=True)
class CdgnssConfig:
    cn0_threshold_dbhz: float = 40.0
    phase_lock_threshold: float = 0.8
    elevation_mask_deg: float = 10.0
    p_f: float = 0.001
    sigma_rho: float = 1.5
    sigma_phi: float = 0.006
    gamma: float = 1.5
    window: int = 10
    p_f_psi: float = 1e-15


@dataclass(frozen=True)
class ImuConfig:
    grade: str = "industrial"
    ou_form: str = "exact"


@dataclass(frozen=True)
class NhcConfig:
    sigma_y: float = 0.1
    sigma_z: float = 0.2
    P0: float = 0.0
    P1: float = 0.0


@dataclass(frozen=True)
class ZuptConfig:
    sigma_x: float = 0.05
    sigma_y: float = 0.01
    sigma_z: float = 0.01
    gamma_a: float = 0.8
    gamma_g: float | None = None
    n: int | None = None
    p_f: float | None = None


@dataclass(frozen=True)
class ReseedConfig:
    max_eps_per_n: float = 1.0
    max_psi_ratio: float = 0.5
    min_n: int = 10
    min_time_since_reset: float = 2.0


@dataclass(frozen=True)
class FeatureConfig:
    multi_antenna: bool = True
    nhc: bool = True
    zupt: bool = True
    outlier_rejection: bool = True
    reseed: bool = True
    false_fix_detection: bool = True
    linearization: str = "ukf"
    signals: tuple[str, ...] | None = None


@dataclass(frozen=True)
class MonteCarloConfig:
    yaw_sigmas_deg: tuple[float, ...] = (0.5, 2.0, 8.0, 15.0, 30.0, 60.0, 90.0)
    pitch_roll_sigma_deg: float = 2.0
    trials: int = 10_000
    methods: tuple[str, ...] = ("ukf", "ekf", "unconstrained")
    p_f: float = 0.01
    position_sigma: float = 0.02
    chunk: int = 1000


# ablation flag -> (section, key, value)
ABLATION_FLAGS = {
    "no-zupt": ("features", "zupt", False),
    "no-nhc": ("features", "nhc", False),
    "no-outlier-rejection": ("features", "outlier_rejection", False),
    "no-reseed": ("features", "reseed", False),
    "no-false-fix-detection": ("features", "false_fix_detection", False),
    "single-antenna": ("features", "multi_antenna", False),
    "ekf-linearization": ("features", "linearization", "ekf"),
}


@dataclass(frozen=True)
class RunConfig:
    cdgnss: CdgnssConfig = field(default_factory=CdgnssConfig)
    imu: ImuConfig = field(default_factory=ImuConfig)
    nhc: NhcConfig = field(default_factory=NhcConfig)
    zupt: ZuptConfig = field(default_factory=ZuptConfig)
    reseed: ReseedConfig = field(default_factory=ReseedConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    montecarlo: MonteCarloConfig = field(default_factory=MonteCarloConfig)
    aperture_table: str | None = None

    def __post_init__(self):
        try:
            self.integrity_params(load_table=False)
            self.imu_params()
            self.montecarlo_spec()
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        c = self.cdgnss
        if not (0 < c.p_f < 1 and 0 < c.p_f_psi < 1):
            raise ConfigError("failure-rate targets must lie in (0, 1)")
        if c.window < 1:
            raise ConfigError("window must be at least 1")

    # -- construction -----------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a JSON object")
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in d:
                continue
            val = d[f.name]
            if f.name == "aperture_table":
                if val is not None and not isinstance(val, str):
                    raise ConfigError("aperture_table must be a path or null")
                kwargs[f.name] = val
                continue
            kwargs[f.name] = _section(f.default_factory, val, f.name)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown configuration keys {sorted(unknown)}")
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        """Read JSON; ``OSError`` propagates, schema problems raise ConfigError."""
        with open(path) as fh:
            text = fh.read()
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def with_flags(self, flags) -> RunConfig:
        cfg = self
        for flag in flags:
            if flag not in ABLATION_FLAGS:
                raise ConfigError(f"unknown ablation flag {flag!r}")
            section, key, value = ABLATION_FLAGS[flag]
            sub = dataclasses.replace(getattr(cfg, section), **{key: value})
            cfg = dataclasses.replace(cfg, **{section: sub})
        return cfg

    # -- derived parameter objects -----------------------------------------

    def imu_params(self, dt: float | None = None) -> ImuParams:
        kw = {"ou_form": self.imu.ou_form}
        if dt is not None:
            kw["dt"] = dt
        return ImuParams.preset(self.imu.grade, **kw)

    def noise_params(self) -> NoiseModelParams:
        return NoiseModelParams(self.cdgnss.sigma_rho, self.cdgnss.sigma_phi)

    def vdc_params(self) -> VdcParams:
        z = self.zupt
        over = {k: v for k, v in (("gamma_g", z.gamma_g), ("n_zupt", z.n), ("p_f_zupt", z.p_f))
                if v is not None}
        return VdcParams.preset(
            self.imu.grade,
            P0=self.nhc.P0, P1=self.nhc.P1,
            sigma_nhc_y=self.nhc.sigma_y, sigma_nhc_z=self.nhc.sigma_z,
            sigma_zupt=(z.sigma_x, z.sigma_y, z.sigma_z), gamma_a=z.gamma_a, **over,
        )

    def montecarlo_spec(self, seed: int = 0) -> MonteCarloSpec:
        m = self.montecarlo
        return MonteCarloSpec(
            yaw_sigmas_deg=m.yaw_sigmas_deg, pitch_roll_sigma_deg=m.pitch_roll_sigma_deg,
            trials=m.trials, methods=m.methods, p_f=m.p_f, position_sigma=m.position_sigma,
            seed=seed, chunk=m.chunk, noise=self.noise_params(),
        )

    def integrity_params(self, load_table: bool = True) -> IntegrityParams:
        c, f = self.cdgnss, self.features
        table = None
        if load_table and self.aperture_table:
            table = ApertureTable.read_csv(self.aperture_table)
        return IntegrityParams(
            ambiguity=AmbiguityParams(p_f=c.p_f, table=table),
            vdc=self.vdc_params(),
            gamma=c.gamma,
            window=c.window,
            p_f_psi=c.p_f_psi,
            reseed=ReseedCriteria(**dataclasses.asdict(self.reseed)),
            linearization=f.linearization,
            outlier_rejection=f.outlier_rejection,
            false_fix_detection=f.false_fix_detection,
            reseed_enabled=f.reseed,
            nhc=f.nhc,
            zupt=f.zupt,
        )


_TYPES = {"float": (int, float), "int": (int,), "bool": (bool,), "str": (str,)}


def _section(factory, val, name: str):
    if not isinstance(val, dict):
        raise ConfigError(f"section {name!r} must be an object")
    fields = {f.name: f for f in dataclasses.fields(factory)}
    unknown = set(val) - set(fields)
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    out = {}
    for key, v in val.items():
        ann = str(fields[key].type)
        if v is None:
            if "None" not in ann:
                raise ConfigError(f"{name}.{key} may not be null")
            out[key] = None
            continue
        if ann.startswith("tuple[str"):
            if not isinstance(v, list) or not all(isinstance(s, str) for s in v):
                raise ConfigError(f"{name}.{key} must be a list of strings")
            out[key] = tuple(v)
            continue
        if ann.startswith("tuple[float"):
            if not isinstance(v, list) or not all(
                isinstance(s, (int, float)) and not isinstance(s, bool) for s in v
            ):
                raise ConfigError(f"{name}.{key} must be a list of numbers")
            out[key] = tuple(float(s) for s in v)
            continue
        base = ann.split(" | ")[0]
        ok = _TYPES.get(base, (object,))
        if isinstance(v, bool) and base != "bool" or not isinstance(v, ok):
            raise ConfigError(f"{name}.{key} must be of type {base}")
        out[key] = float(v) if base == "float" else v
    return factory(**out)
