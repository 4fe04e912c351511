"""Run configuration: a nested defaults tree merged with a JSON file and
dotted-path command-line overrides. Unknown keys are rejected; every run can
print the hash of its fully resolved tree."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import MISSING, asdict, fields

from .corpus import GenConfig
from .model import ModelConfig
from .training import StageConfig
from .vocab import Vocabs, build_vocabs


class UsageError(Exception):
    """Bad command-line input: unknown keys, malformed overrides."""


def _stage_defaults() -> dict:
    base = {
        f.name: f.default
        for f in fields(StageConfig)
        if f.name != "stage" and f.default is not MISSING
    }
    base.pop("steps", None)
    base.pop("peak_lr", None)
    base.pop("warmup", None)
    stages = {
        "pretrain": {"steps": 2000, "peak_lr": 3e-4, "warmup": 100},
        "sft1": {"steps": 700, "peak_lr": 3e-4, "warmup": 50},
        "sft2": {"steps": 1400, "peak_lr": 5e-5, "warmup": 50},
        "baseline": {"steps": 4100, "peak_lr": 3e-4, "warmup": 100},
    }
    return {name: {**base, **extra} for name, extra in stages.items()}


def default_config() -> dict:
    gen = asdict(GenConfig())
    gen["task_mix"] = dict(gen["task_mix"])
    model = asdict(ModelConfig())
    for k in ("text_vocab_size", "audio_vocab_size", "n_words", "n_fillers"):
        model.pop(k)
    return {
        "vocab": {"n_words": 18, "n_fillers": 7},
        "model": model,
        "gen": gen,
        "train": _stage_defaults(),
        "engine": {"frame_ms": 250.0},
        "eval": {"turn_window": 40, "barge_window": 25, "batch_size": 64},
    }


def _merge(base: dict, override: dict, path: str = "") -> None:
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise UsageError(f"unknown config key '{here}'")
        if isinstance(base[key], dict) and key != "task_mix":
            if not isinstance(value, dict):
                raise UsageError(f"config key '{here}' expects a section")
            _merge(base[key], value, here)
        else:
            base[key] = value


def _parse_override(expr: str) -> tuple[list[str], object]:
    if "=" not in expr:
        raise UsageError(f"override '{expr}' must look like section.key=value")
    key, _, raw = expr.partition("=")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def load_config(path: str | None = None, overrides: list[str] | None = None) -> dict:
    cfg = default_config()
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            _merge(cfg, json.load(fh))
    for expr in overrides or []:
        keys, value = _parse_override(expr)
        node: dict = cfg
        for k in keys[:-1]:
            if k not in node or not isinstance(node[k], dict):
                raise UsageError(f"unknown config key '{'.'.join(keys)}'")
            node = node[k]
        if keys[-1] not in node and not (len(keys) >= 2 and keys[-2] == "task_mix"):
            raise UsageError(f"unknown config key '{'.'.join(keys)}'")
        node[keys[-1]] = value
    return cfg


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def vocabs_from(cfg: dict) -> Vocabs:
    return build_vocabs(cfg["vocab"]["n_words"], cfg["vocab"]["n_fillers"])


def model_config_from(cfg: dict) -> ModelConfig:
    vocabs = vocabs_from(cfg)
    return ModelConfig(
        text_vocab_size=len(vocabs.text),
        audio_vocab_size=len(vocabs.audio),
        n_words=cfg["vocab"]["n_words"],
        n_fillers=cfg["vocab"]["n_fillers"],
        **cfg["model"],
    )


def gen_config_from(cfg: dict) -> GenConfig:
    raw = copy.deepcopy(cfg["gen"])
    for f in fields(GenConfig):
        if isinstance(f.default, tuple) and f.name in raw:
            raw[f.name] = tuple(raw[f.name])
    return GenConfig(**raw)


def stage_config_from(cfg: dict, stage: str) -> StageConfig:
    if stage not in cfg["train"]:
        raise UsageError(f"unknown training stage '{stage}'")
    return StageConfig(stage=stage, **cfg["train"][stage])
