"""Run configuration: one JSON document covering the whole pipeline.

Schema (all keys optional, unknown keys rejected)::

    {
      "seed": 0,
      "out": "runs/exp",                 # output root for artifacts
      "corpus": "runs/exp/corpus",       # corpus directory (gen writes it)
      "gen":   { ... GenConfig fields ... },
      "model": { ... StreamHyper fields ... },
      "train": { ... TrainConfig fields ... },
      "eval":  { "metric": "cosine", "altitude": "all",
                 "distractors": true, "clothing": "all", "rrf_k": 60 }
    }

Environment overrides use the AGVP_ prefix with ``__`` as the section
separator and JSON-parsed values, e.g. ``AGVP_SEED=3``,
``AGVP_GEN__NUM_IDENTITIES=12``, ``AGVP_EVAL__METRIC='"euclidean"'``.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Optional, Union

from .core import Platform
from .datagen import DEFAULT_ALTITUDE_NOISE, AltitudeNoise, GenConfig
from .trainer import StreamHyper, TrainConfig

ENV_PREFIX = "AGVP_"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalSettings:
    metric: str = "cosine"
    altitude: Union[str, int] = "all"
    distractors: bool = True
    clothing: str = "all"
    rrf_k: int = 60


@dataclass
class RunConfig:
    seed: int = 0
    out: Path = Path("runs/default")
    corpus: Optional[Path] = None
    gen: GenConfig = field(default_factory=GenConfig)
    hyper: StreamHyper = field(default_factory=StreamHyper)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    effective: dict = field(default_factory=dict)

    @property
    def corpus_dir(self) -> Path:
        return self.corpus if self.corpus is not None else self.out / "corpus"


def _reject_unknown(section: str, payload: Mapping[str, Any],
                    allowed: set[str]) -> None:
    unknown = sorted(set(payload) - allowed)
    if unknown:
        where = section or "top level"
        raise ConfigError(f"unknown config key(s) at {where}: "
                          + ", ".join(unknown))


def _dataclass_from(section: str, cls, payload: Mapping[str, Any],
                    convert: Optional[dict] = None):
    names = {f.name for f in fields(cls)}
    _reject_unknown(section, payload, names)
    kwargs = dict(payload)
    for key, fn in (convert or {}).items():
        if key in kwargs:
            kwargs[key] = fn(kwargs[key])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {section} config: {e}") from None


def _parse_gen(payload: Mapping[str, Any], seed: int) -> GenConfig:
    def platforms(values):
        return tuple(Platform(v) for v in values)

    def altitudes(values):
        return tuple(int(v) for v in values)

    def noise(mapping):
        out = dict(DEFAULT_ALTITUDE_NOISE)
        for alt, triple in mapping.items():
            out[int(alt)] = AltitudeNoise(*[float(x) for x in triple])
        return out

    payload = dict(payload)
    payload.setdefault("seed", seed)
    return _dataclass_from("gen", GenConfig, payload, {
        "ground_platforms": platforms,
        "altitudes": altitudes,
        "altitude_noise": noise,
    })


def _parse_eval(payload: Mapping[str, Any]) -> EvalSettings:
    def altitude(v):
        return v if v == "all" else int(v)

    return _dataclass_from("eval", EvalSettings, payload,
                           {"altitude": altitude})


TOP_LEVEL_KEYS = {"seed", "out", "corpus", "gen", "model", "train", "eval"}


def apply_env_overrides(doc: dict, env: Mapping[str, str]) -> dict:
    """Fold AGVP_* variables into the config document."""
    out = json.loads(json.dumps(doc))  # deep copy
    for name in sorted(env):
        if not name.startswith(ENV_PREFIX):
            continue
        path = name[len(ENV_PREFIX):].lower().split("__")
        raw = env[name]
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{name}: {part} is not a config section")
        node[path[-1]] = value
    return out


def build_run_config(doc: Mapping[str, Any],
                     cli_overrides: Optional[Mapping[str, Any]] = None
                     ) -> RunConfig:
    doc = dict(doc)
    for key, value in (cli_overrides or {}).items():
        if value is not None:
            doc[key] = value
    _reject_unknown("", doc, TOP_LEVEL_KEYS)
    seed = int(doc.get("seed", 0))
    gen = _parse_gen(doc.get("gen", {}), seed)
    hyper = _dataclass_from("model", StreamHyper, doc.get("model", {}),
                            {"na_channels": tuple})
    train_payload = dict(doc.get("train", {}))
    train_payload.setdefault("seed", seed)
    train = _dataclass_from("train", TrainConfig, train_payload)
    settings = _parse_eval(doc.get("eval", {}))
    cfg = RunConfig(
        seed=seed,
        out=Path(doc.get("out", "runs/default")),
        corpus=Path(doc["corpus"]) if "corpus" in doc and doc["corpus"] else None,
        gen=gen, hyper=hyper, train=train, eval=settings)
    cfg.effective = effective_doc(cfg)
    return cfg


def load_run_config(path: Optional[Union[str, Path]] = None,
                    env: Optional[Mapping[str, str]] = None,
                    cli_overrides: Optional[Mapping[str, Any]] = None
                    ) -> RunConfig:
    doc: dict = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path}: invalid JSON ({e.msg})") \
                from None
        if not isinstance(doc, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
    doc = apply_env_overrides(doc, env if env is not None else os.environ)
    return build_run_config(doc, cli_overrides)


def effective_doc(cfg: RunConfig) -> dict:
    """JSON-ready echo of the full effective configuration."""
    gen = {f.name: getattr(cfg.gen, f.name) for f in fields(GenConfig)}
    gen["ground_platforms"] = [p.value for p in cfg.gen.ground_platforms]
    gen["altitudes"] = list(cfg.gen.altitudes)
    gen["altitude_noise"] = {
        str(alt): [n.downscale, n.blur_px, n.noise_sigma]
        for alt, n in sorted(cfg.gen.altitude_noise.items())}
    model = {f.name: getattr(cfg.hyper, f.name) for f in fields(StreamHyper)}
    model["na_channels"] = list(cfg.hyper.na_channels)
    train = {f.name: getattr(cfg.train, f.name) for f in fields(TrainConfig)}
    ev = {f.name: getattr(cfg.eval, f.name) for f in fields(EvalSettings)}
    return {
        "seed": cfg.seed,
        "out": str(cfg.out),
        "corpus": str(cfg.corpus_dir),
        "gen": gen,
        "model": model,
        "train": train,
        "eval": ev,
    }
