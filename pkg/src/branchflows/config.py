"""One JSON document describing a whole run.

Sections: ``hazards`` (split and deletion hazards), ``base`` (OU process and
token flow), ``latent``, ``model`` (architecture, optimiser, loss weights and
training budget), ``sampler`` and ``data``. Missing keys take defaults;
unknown sections are rejected.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from .base_process import DFMSpec, OUSpec
from .conditional_path import Processes
from .data import ToyDatasetSpec
from .hazard import HazardSpec
from .latent import LatentConfig
from .model import ModelConfig
from .objective import LossWeights
from .sampler import StepSchedule

SECTIONS = ("hazards", "base", "latent", "model", "sampler", "data")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainBudget:
    """Stop when either limit is reached; 0 disables a limit."""

    max_elements: int = 100_000
    max_seconds: float = 1800.0
    n_train: int = 0


@dataclass(frozen=True)
class SamplerConfig:
    schedule: StepSchedule = StepSchedule("cosine", 200)
    n_samples: int = 100
    init: tuple[int, ...] = (1,)

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.schedule.kind, "n_steps": self.schedule.n_steps, "n_samples": self.n_samples,
                "init": list(self.init)}


@dataclass(frozen=True)
class RunConfig:
    split_hazard: HazardSpec = HazardSpec.uniform()
    del_hazard: HazardSpec = HazardSpec.uniform()
    ou: OUSpec = OUSpec()
    dfm_f1: HazardSpec = HazardSpec.uniform()
    dfm_f2: HazardSpec = HazardSpec.uniform()
    omega_u: float = 0.0
    latent: LatentConfig = LatentConfig()
    model: ModelConfig = ModelConfig()
    weights: LossWeights = LossWeights()
    budget: TrainBudget = TrainBudget()
    sampler: SamplerConfig = SamplerConfig()
    data: ToyDatasetSpec = ToyDatasetSpec()
    extra: dict[str, Any] = field(default_factory=dict, compare=False)

    @property
    def dfm(self) -> DFMSpec:
        return DFMSpec(self.dfm_f1, self.dfm_f2, self.omega_u, self.data.K)

    @property
    def processes(self) -> Processes:
        return Processes(self.split_hazard, self.del_hazard, self.ou, self.dfm)

    def with_steps(self, steps: int) -> "RunConfig":
        return replace(self, model=replace(self.model, steps=steps))

    def with_schedule(self, kind: str | None = None, n_steps: int | None = None) -> "RunConfig":
        sch = self.sampler.schedule
        sch = StepSchedule(kind or sch.kind, n_steps or sch.n_steps)
        return replace(self, sampler=replace(self.sampler, schedule=sch))

    def to_dict(self) -> dict[str, Any]:
        w = self.weights
        model = self.model.to_dict()
        model["loss"] = {"continuous": w.continuous, "discrete": w.discrete, "time_weight": w.time_weight,
                         "max_time_weight": w.max_time_weight}
        model["budget"] = {"max_elements": self.budget.max_elements, "max_seconds": self.budget.max_seconds,
                           "n_train": self.budget.n_train}
        return {
            "hazards": {"split": self.split_hazard.to_dict(), "delete": self.del_hazard.to_dict()},
            "base": {"ou": self.ou.to_dict(),
                     "dfm": {"F1": self.dfm_f1.to_dict(), "F2": self.dfm_f2.to_dict(), "omega_u": self.omega_u}},
            "latent": self.latent.to_dict(),
            "model": model,
            "sampler": self.sampler.to_dict(),
            "data": self.data.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "RunConfig":
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(obj) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            hz = obj.get("hazards", {})
            base = obj.get("base", {})
            dfm = base.get("dfm", {})
            data = ToyDatasetSpec.from_dict(obj.get("data", {}))
            model_d = dict(obj.get("model", {}))
            loss = model_d.pop("loss", {})
            budget = model_d.pop("budget", {})
            model_d.setdefault("d", data.d)
            model_d.setdefault("K", data.K)
            model = ModelConfig.from_dict(model_d)
            if model.d != data.d or model.K != data.K:
                raise ConfigError(f"model (d={model.d}, K={model.K}) does not match data (d={data.d}, K={data.K})")
            split = HazardSpec.from_dict(hz.get("split", {"kind": "uniform"}))
            weights = LossWeights(float(loss.get("continuous", 1.0)), float(loss.get("discrete", 1.0)),
                                  loss.get("time_weight", "constant"), split,
                                  float(loss.get("max_time_weight", 100.0)))
            sm = obj.get("sampler", {})
            sampler = SamplerConfig(StepSchedule(sm.get("kind", "cosine"), int(sm.get("n_steps", 200))),
                                    int(sm.get("n_samples", 100)), tuple(int(x) for x in sm.get("init", [1])))
            if sampler.schedule.kind not in ("uniform", "cosine") or sampler.schedule.n_steps < 2:
                raise ConfigError("sampler needs kind uniform|cosine and n_steps >= 2")
            return cls(
                split_hazard=split,
                del_hazard=HazardSpec.from_dict(hz.get("delete", {"kind": "uniform"})),
                ou=OUSpec.from_dict(base.get("ou", {})),
                dfm_f1=HazardSpec.from_dict(dfm.get("F1", {"kind": "uniform"})),
                dfm_f2=HazardSpec.from_dict(dfm.get("F2", {"kind": "uniform"})),
                omega_u=float(dfm.get("omega_u", 0.0)),
                latent=LatentConfig.from_dict(obj.get("latent", {})),
                model=model,
                weights=weights,
                budget=TrainBudget(int(budget.get("max_elements", 100_000)),
                                   float(budget.get("max_seconds", 1800.0)), int(budget.get("n_train", 0))),
                sampler=sampler,
                data=data,
            )
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError, AttributeError) as exc:
            raise ConfigError(f"malformed config: {exc}") from None

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(obj)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_json(Path(path).read_text())
