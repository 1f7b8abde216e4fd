"""
Run configuration.

Precedence, lowest first: dataclass defaults, JSON config file, environment
(SATCITY_SEED, SATCITY_THREADS, SATCITY_DETERMINISTIC, SATCITY_LOG_LEVEL),
--set section.key=value overrides, dedicated command-line flags.
"""
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from typing import Optional, Tuple

from .errors import ConfigError
from .metrics import D_TAU
from .optimizer import FitConfig
from .sat_camera import (SAT_ALTITUDE, SAT_DEPRESSION, SAT_FOV_DEG, SAT_GSD, SAT_HEADINGS, SAT_HEIGHT,
                         SAT_OVERLAP, SAT_WIDTH)
from .synth import CityParams, MvsSamplingProfile
from .texture import TextureConfig

logger = logging.getLogger(__name__)

EXTRACT_METHODS = ("height", "mc", "naive128", "naive256")

# values quoted for the reference setup; checked by reference_defaults_report
REFERENCE_DEFAULTS = {
    "fit.grid_res": 256,
    "fit.k": 80.0,
    "fit.lr": 0.01,
    "fit.steps": 2000,
    "fit.lambda_lap": 0.5,
    "fit.lambda_nrm": 0.01,
    "fit.res": 1024,
    "extract.tiles": 2,
    "extract.mc_res": 128,
    "eval.d_tau": 0.036,
    "texture.refine.iterations": 2,
    "simulate.fov_deg": 22.42,
    "simulate.altitude": 2000.0,
    "simulate.overlap": 0.6,
}


@dataclass
class ExtractConfig:
    method: str = "height"
    mc_res: int = 128
    height_res: int = 512
    tiles: int = 2
    overlap: float = 0.1
    seam_policy: str = "snap"
    weld_tol: float = 1e-6
    # world units; None lets snap close seams of any height
    snap_tol: Optional[float] = None

    def validate(self):
        if self.method not in EXTRACT_METHODS:
            raise ConfigError(f"extract.method must be one of {EXTRACT_METHODS}, got {self.method!r}")
        if self.seam_policy not in ("weld", "snap"):
            raise ConfigError(f"extract.seam_policy must be weld or snap, got {self.seam_policy!r}")
        if self.tiles < 1:
            raise ConfigError("extract.tiles must be >= 1")
        if self.snap_tol is not None and not (isinstance(self.snap_tol, (int, float)) and self.snap_tol >= 0):
            raise ConfigError(f"extract.snap_tol must be a number >= 0 or null, got {self.snap_tol!r}")


@dataclass
class EvalConfig:
    d_tau: float = D_TAU
    n_samples: int = 200000
    border: int = 0


@dataclass
class SimulateConfig:
    city: CityParams = field(default_factory=CityParams)
    sampling: MvsSamplingProfile = field(default_factory=MvsSamplingProfile)
    altitude: float = SAT_ALTITUDE
    fov_deg: float = SAT_FOV_DEG
    gsd: float = SAT_GSD
    overlap: float = SAT_OVERLAP
    width: int = SAT_WIDTH
    height: int = SAT_HEIGHT
    depression_deg: float = SAT_DEPRESSION
    headings: Tuple[float, ...] = SAT_HEADINGS
    gt_samples: int = 200000
    test_views: bool = True
    test_width: int = 480
    test_height: int = 270


@dataclass
class RunConfig:
    fit: FitConfig = field(default_factory=FitConfig)
    extract: ExtractConfig = field(default_factory=ExtractConfig)
    texture: TextureConfig = field(default_factory=TextureConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    seed: int = 0
    threads: int = 1
    deterministic: bool = False
    log_level: str = "INFO"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_json(cls, json_data):
        cfg = cls()
        apply_overrides(cfg, json_data, "config")
        return cfg

    def validate(self):
        try:
            self.fit.validate()
            self.texture.refine.validate()
            self.simulate.city.validate()
            self.simulate.sampling.validate()
        except ValueError as e:
            raise ConfigError(str(e))
        self.extract.validate()
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        return self

    def propagate(self):
        """Copy the global thread count and seed into the fit config."""
        self.fit.threads = self.threads
        self.fit.seed = self.seed
        return self

    def reference_defaults_report(self):
        """
        Compare configured values against the reference setup.

        Returns:
            dict mapping dotted key -> {"value", "expected", "ok"}
        """
        report = {}
        for key, expected in REFERENCE_DEFAULTS.items():
            value = get_value(self, key)
            report[key] = {"value": value, "expected": expected, "ok": value == expected}
        return report


def _coerce(current, value, path):
    if is_dataclass(current):
        raise ConfigError(f"{path} is a section, not a value")
    if isinstance(current, bool):
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return bool(value)
    try:
        if isinstance(current, int):
            return int(value)
        if isinstance(current, float):
            return float(value)
        if isinstance(current, tuple):
            return tuple(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{path}: cannot convert {value!r} to {type(current).__name__}")
    return value


def apply_overrides(target, data, source, prefix=""):
    """
    Recursively merge a dict into a (nested) config dataclass.

    Raises:
        ConfigError on unknown keys or values of the wrong type
    """
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: section {prefix or '<root>'} must be an object")
    names = {f.name for f in fields(target)}
    for key, value in data.items():
        path = f"{prefix}{key}"
        if key not in names:
            raise ConfigError(f"{source}: unknown key {path!r}")
        current = getattr(target, key)
        if is_dataclass(current):
            apply_overrides(current, value, source, prefix=f"{path}.")
        else:
            setattr(target, key, _coerce(current, value, path))


def get_value(cfg, dotted):
    obj = cfg
    for part in dotted.split("."):
        obj = getattr(obj, part)
    return obj


def set_value(cfg, dotted, raw):
    """Apply one --set override; the value is parsed as JSON when possible."""
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    data = value
    for part in reversed(dotted.split(".")):
        data = {part: data}
    apply_overrides(cfg, data, "--set")


def load_config(path=None, overrides=(), env=None):
    """
    Build a RunConfig from defaults, an optional JSON file, the environment
    and --set overrides.

    Args:
        path: JSON config file or None
        overrides: Iterable of "section.key=value" strings
        env: Mapping used instead of os.environ (tests)

    Returns:
        RunConfig
    """
    cfg = RunConfig()
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path, "r") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})")
        apply_overrides(cfg, data, path)
        logger.debug(f"Loaded config from {path}")

    env = os.environ if env is None else env
    for name, key in (("SATCITY_SEED", "seed"), ("SATCITY_THREADS", "threads"),
                      ("SATCITY_DETERMINISTIC", "deterministic"), ("SATCITY_LOG_LEVEL", "log_level")):
        if env.get(name):
            setattr(cfg, key, _coerce(getattr(cfg, key), env[name], name))

    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, raw = item.split("=", 1)
        set_value(cfg, key.strip(), raw.strip())
    return cfg
