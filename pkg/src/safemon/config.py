"""Pipeline configuration: JSON schema, defaults, validation, digest."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass

from .assess import ThresholdSpec
from .component import TrainConfig
from .perturb import EpsilonGrid, kind_from_config, scaled_levels
from .runtime import DriftScenario, SafetyModeConfig


class ConfigError(ValueError):
    pass


def default_config() -> dict:
    return {
        "seed": 20240817,
        "corpus": {
            "kind": "synthetic",
            "counts": [72, 75, 45, 66, 63, 45, 45],
        },
        "factors": [
            {"name": "haze", "haze_color": [0.8, 0.8, 0.8],
             "levels": list(scaled_levels(0.8))},
            {"name": "blur", "sigma_max": 3.0,
             "levels": list(scaled_levels(0.6))},
        ],
        "component": {
            "provider": "builtin",
            "train": {"learning_rate": 0.01, "momentum": 0.9,
                      "batch_size": 32, "epochs": 30, "init": "he"},
        },
        "thresholds": {"values": [0.70, 0.40],
                       "level_names": ["normal", "limited", "stop"]},
        "split": {"train_fraction": 0.8},
        "monitor": {
            "train": {"learning_rate": 0.01, "momentum": 0.9,
                      "batch_size": 32, "epochs": 8, "init": "he"},
        },
        "cv_folds": 5,
        "runtime": {
            "modes": {"3": "normal", "2": "limited", "1": "stop"},
            "debounce": {"window": 3, "quorum": 3},
            "scenario": {
                "seed": 7,
                "frames": 60,
                "segments": [
                    {"from": 0, "to": 30, "assignment": {"haze": 0.0, "blur": 0.0},
                     "interpolate": False},
                    {"from": 30, "to": 60, "assignment": {"haze": 0.8, "blur": 0.0},
                     "interpolate": False},
                ],
            },
        },
    }


def config_digest(raw: dict) -> str:
    canon = json.dumps(raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _train_config(block: dict, seed: int) -> TrainConfig:
    return TrainConfig(
        learning_rate=float(block.get("learning_rate", 0.01)),
        momentum=float(block.get("momentum", 0.9)),
        batch_size=int(block.get("batch_size", 32)),
        epochs=int(block.get("epochs", 20)),
        seed=seed,
        init=block.get("init", "he"),
    )


@dataclass
class PipelineConfig:
    """Validated view over the raw config dict. The digest is computed over
    the raw dict (seed included), so any effective change invalidates
    downstream artifacts."""

    raw: dict

    def __post_init__(self):
        try:
            self._validate()
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid config: {exc}") from exc

    def _validate(self):
        raw = self.raw
        self.seed = int(raw["seed"])
        corpus = raw["corpus"]
        if corpus["kind"] not in ("synthetic", "manifest", "packed"):
            raise ConfigError(f"unknown corpus kind {corpus['kind']!r}")
        if corpus["kind"] != "synthetic" and "path" not in corpus:
            raise ConfigError("manifest/packed corpus requires a path")
        self.corpus = corpus
        factors = raw["factors"]
        if not factors:
            raise ConfigError("at least one factor is required")
        self.kinds = [kind_from_config(f) for f in factors]
        self.grids = [EpsilonGrid(f["name"], tuple(f["levels"])) for f in factors]
        comp = raw["component"]
        if comp["provider"] not in ("builtin", "external"):
            raise ConfigError(f"unknown provider {comp['provider']!r}")
        if comp["provider"] == "external" and not comp.get("command"):
            raise ConfigError("external provider requires a command")
        self.component = comp
        thr = raw["thresholds"]
        self.thresholds = ThresholdSpec(tuple(thr["values"]), tuple(thr["level_names"]))
        self.train_fraction = float(raw["split"]["train_fraction"])
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie in (0, 1)")
        self.cv_folds = int(raw.get("cv_folds", 5))
        if self.cv_folds < 2:
            raise ConfigError("cv_folds must be at least 2")
        rt = raw["runtime"]
        self.mode_config = SafetyModeConfig(
            level_to_mode={int(k): v for k, v in rt["modes"].items()},
            window=int(rt["debounce"]["window"]),
            quorum=int(rt["debounce"]["quorum"]),
        )
        if self.mode_config.m != self.thresholds.m:
            raise ConfigError("runtime modes must cover exactly the threshold levels")
        self.scenario = DriftScenario.from_dict(rt["scenario"])
        factor_names = {g.factor_name for g in self.grids}
        for seg in self.scenario.segments:
            unknown = set(seg.assignment) - factor_names
            if unknown:
                raise ConfigError(f"scenario references unknown factors {sorted(unknown)}")

    @property
    def digest(self) -> str:
        return config_digest(self.raw)

    def component_train_config(self, seed: int) -> TrainConfig:
        return _train_config(self.component.get("train", {}), seed)

    def monitor_train_config(self, seed: int) -> TrainConfig:
        return _train_config(self.raw["monitor"].get("train", {}), seed)


def load_config(path: str | None = None, seed: int | None = None) -> PipelineConfig:
    raw = default_config()
    if path is not None:
        with open(path, encoding="utf-8") as f:
            user = json.load(f)
        merged = copy.deepcopy(raw)
        merged.update(user)  # top-level keys replace defaults wholesale
        raw = merged
    if seed is not None:
        raw["seed"] = int(seed)
    return PipelineConfig(raw)
