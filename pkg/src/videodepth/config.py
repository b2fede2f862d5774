"""Sectioned ``key = value`` run configuration.

Grammar: ``[section]`` headers, ``key = value`` lines, ``#`` comments. Every
key has a default below; unknown sections or keys are rejected by name. Values
are parsed to the type of their default.
"""

from __future__ import annotations

import configparser
import copy
import math
from pathlib import Path
from typing import Any, Mapping, Optional

from . import codec, edm
from .metrics import DEPTH_CAPS, EvalConfig
from .net import SPATIAL, TEMPORAL, NetConfig
from .train import LengthLaw, StageConfig, validate_pipeline

DEFAULTS: dict[str, dict[str, Any]] = {
    "run": {"seed": 0, "threads": 1},
    "edm": {
        "steps": 5,
        "sigma_max": 700.0,
        "sigma_min": 0.002,
        "rho": 7.0,
        "pmean": 0.7,
        "pstd": 1.6,
        "cfg_scale": 1.0,
    },
    "codec": {"block": 8, "keep": 16},
    "net": {"channels": 64, "spatial_blocks": 4, "temporal_blocks": 2, "embed_dim": 8},
    "data": {
        "height": 32,
        "width": 32,
        "realistic_count": 512,
        "realistic_min_length": 16,
        "realistic_max_length": 64,
        "synthetic_count": 256,
        "synthetic_length": 48,
        "label_noise": 0.5,
        "eval_count": 16,
        "eval_length": 24,
        "long_count": 4,
        "long_length": 100,
    },
    "stage1": {"iterations": 1000, "batch_size": 4, "lr": 1e-3, "min_length": 1, "max_length": 8},
    "stage2": {"iterations": 2000, "batch_size": 4, "lr": 1e-3, "min_length": 1, "max_length": 32},
    "stage3": {"iterations": 1500, "batch_size": 4, "lr": 1e-3, "min_length": 12, "max_length": 12},
    "infer": {"window": 32, "overlap": 7, "variant": "full"},
    "eval": {"dataset": "synthetic", "crop_top": 0, "crop_bottom": 0, "crop_left": 0, "crop_right": 0, "valid_min": 1e-3},
    "paths": {"data": "data", "runs": "runs", "cache": ""},
}

STAGE_STYLES = {1: "realistic", 2: "realistic", 3: "synthetic"}
STAGE_TAGS = {1: frozenset({SPATIAL, TEMPORAL}), 2: frozenset({TEMPORAL}), 3: frozenset({SPATIAL})}


class ConfigError(ValueError):
    pass


def _parse(section: str, key: str, raw: str, default: Any) -> Any:
    try:
        if isinstance(default, bool):
            return {"true": True, "false": False, "1": True, "0": False}[raw.strip().lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except (ValueError, KeyError):
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw.strip()


class Config:
    def __init__(self, values: Optional[Mapping[str, Mapping[str, Any]]] = None):
        self.values = copy.deepcopy(DEFAULTS)
        for section, kv in (values or {}).items():
            for key, v in kv.items():
                self.set(section, key, v)

    @classmethod
    def load(cls, path=None, overrides: Optional[Mapping[str, Any]] = None) -> "Config":
        """Defaults, then ``path`` (if any), then ``overrides`` given as ``{"section.key": value}``."""
        cfg = cls()
        if path is not None:
            cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
            cp.optionxform = str
            try:
                with open(path) as f:
                    cp.read_file(f)
            except configparser.Error as e:
                raise ConfigError(f"{path}: {e}") from None
            for section in cp.sections():
                for key, raw in cp.items(section):
                    cfg.set(section, key, raw)
        for dotted, v in (overrides or {}).items():
            section, key = dotted.split(".", 1)
            cfg.set(section, key, v)
        cfg.validate()
        return cfg

    def set(self, section: str, key: str, value: Any) -> None:
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in DEFAULTS[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        default = DEFAULTS[section][key]
        self.values[section][key] = _parse(section, key, value, default) if isinstance(value, str) else type(default)(value)

    def __getitem__(self, dotted: str) -> Any:
        section, key = dotted.split(".", 1)
        return self.values[section][key]

    def dump(self) -> str:
        out = []
        for section, kv in self.values.items():
            out.append(f"[{section}]")
            out += [f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}" for k, v in kv.items()]
            out.append("")
        return "\n".join(out)

    def echo(self, directory) -> Path:
        """Write the effective configuration into ``directory/config.ini``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        p = d / "config.ini"
        p.write_text(self.dump())
        return p

    # ------------------------------------------------------------ typed views

    def validate(self) -> None:
        try:
            self.schedule()
            self.noise_distribution()
            self.codec()
            self.net()
            validate_pipeline(self.stages())
            self.eval_config()
        except (ValueError, edm.DomainError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from None
        if self["run.threads"] < 1:
            raise ConfigError("run.threads must be >= 1")
        if self["edm.cfg_scale"] < 1:
            raise ConfigError("edm.cfg_scale must be >= 1")
        if not 0 <= self["infer.overlap"] < self["infer.window"]:
            raise ConfigError("infer.overlap must satisfy 0 <= overlap < window")
        if self["infer.variant"] not in ("baseline", "init", "full"):
            raise ConfigError(f"infer.variant must be baseline, init or full, not {self['infer.variant']!r}")
        if self["data.height"] % self["codec.block"] or self["data.width"] % self["codec.block"]:
            raise ConfigError("data.height and data.width must be multiples of codec.block")

    def schedule(self, steps: Optional[int] = None) -> edm.SigmaSchedule:
        e = self.values["edm"]
        return edm.make_schedule(steps or e["steps"], e["sigma_max"], e["sigma_min"], e["rho"])

    def noise_distribution(self) -> edm.NoiseLevelDistribution:
        if not self["edm.pstd"] > 0:
            raise ConfigError("edm.pstd must be positive")
        return edm.NoiseLevelDistribution(self["edm.pmean"], self["edm.pstd"])

    def guidance(self) -> Optional[float]:
        s = self["edm.cfg_scale"]
        return None if s == 1.0 else s

    def codec(self) -> codec.CodecConfig:
        return codec.CodecConfig(self["codec.block"], self["codec.keep"])

    def net(self) -> NetConfig:
        n = self.values["net"]
        lat = codec.latent_channels(3, self.codec())
        return NetConfig(n["channels"], n["spatial_blocks"], n["temporal_blocks"], n["embed_dim"], lat, lat)

    def stages(self) -> list[StageConfig]:
        out = []
        for i in (1, 2, 3):
            s = self.values[f"stage{i}"]
            out.append(
                StageConfig(i, STAGE_STYLES[i], LengthLaw(s["min_length"], s["max_length"]), STAGE_TAGS[i],
                            s["iterations"], s["batch_size"], s["lr"])
            )
        return out

    def eval_config(self) -> EvalConfig:
        e = self.values["eval"]
        ds = e["dataset"]
        if ds != "none" and ds not in DEPTH_CAPS:
            raise ConfigError(f"eval.dataset must be one of {sorted(DEPTH_CAPS)} or none, not {ds!r}")
        cap = math.inf if ds == "none" else DEPTH_CAPS[ds]
        return EvalConfig(cap, (e["crop_top"], e["crop_bottom"], e["crop_left"], e["crop_right"]), e["valid_min"])
