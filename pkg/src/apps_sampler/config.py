"""Experiment configuration files (YAML).

Schema (every key optional)::

    model:       ToyModelSpec fields, e.g. {kind: markov, vocab: 2}
    prompt:      list of tokens fed before sampling
    run:         RunConfig fields; ``proposal`` is a nested mapping
    potential:
      rollout:   RolloutConfig fields
      head:      path to a trained value head (JSON), for apf_mode learned
    repetitions: number of seeded repetitions (seed + repetition index)
    workers:     worker processes for repetitions
    oracle_check: compare completions with the exact target when enumerable
    output_dir:  where artifacts are written
    study:       study-specific settings (see ``harness``)
"""

import os
from dataclasses import dataclass, field

import yaml

from .engine import RunConfig
from .exceptions import ConfigurationError
from .lm import ToyModelSpec
from .potentials import RolloutConfig
from .validation import check_positive

TOP_LEVEL_KEYS = {"model", "prompt", "run", "potential", "repetitions", "workers", "oracle_check", "output_dir", "study"}


@dataclass
class ExperimentConfig:
    model: ToyModelSpec = field(default_factory=ToyModelSpec)
    run: RunConfig = field(default_factory=RunConfig)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    head_path: str | None = None
    prompt: tuple = ()
    repetitions: int = 1
    workers: int = 1
    oracle_check: bool = False
    output_dir: str = "apps-out"
    study: dict = field(default_factory=dict)

    def __post_init__(self):
        check_positive(self.repetitions, "repetitions", integer=True)
        check_positive(self.workers, "workers", integer=True)
        self.model.validate()
        if self.run.apf_mode == "learned" and self.head_path is None:
            raise ConfigurationError("apf_mode learned needs potential.head")
        if self.head_path is not None and not os.path.isfile(self.head_path):
            raise ConfigurationError(f"value head file not found: {self.head_path}")

    @classmethod
    def from_dict(cls, d, base_dir="."):
        d = dict(d or {})
        unknown = set(d) - TOP_LEVEL_KEYS
        if unknown:
            raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
        pot = dict(d.get("potential") or {})
        extra = set(pot) - {"rollout", "head"}
        if extra:
            raise ConfigurationError(f"unknown potential settings: {sorted(extra)}")
        head = pot.get("head")
        if head is not None and not os.path.isabs(head):
            head = os.path.join(base_dir, head)
        try:
            return cls(
                model=ToyModelSpec.from_dict(d.get("model") or {}),
                run=RunConfig.from_dict(d.get("run") or {}),
                rollout=RolloutConfig(**(pot.get("rollout") or {})),
                head_path=head,
                prompt=tuple(int(t) for t in d.get("prompt") or ()),
                repetitions=d.get("repetitions", 1),
                workers=d.get("workers", 1),
                oracle_check=bool(d.get("oracle_check", False)),
                output_dir=str(d.get("output_dir", "apps-out")),
                study=dict(d.get("study") or {}),
            )
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc

    @classmethod
    def from_file(cls, path):
        if not os.path.isfile(path):
            raise ConfigurationError(f"config file not found: {path}")
        with open(path) as fh:
            try:
                data = yaml.safe_load(fh)
            except yaml.YAMLError as exc:
                raise ConfigurationError(f"cannot parse {path}: {exc}") from exc
        if data is not None and not isinstance(data, dict):
            raise ConfigurationError("config file must hold a mapping")
        return cls.from_dict(data, os.path.dirname(os.path.abspath(path)))

    def to_dict(self):
        rollout = {
            "n_rollouts": self.rollout.n_rollouts,
            "horizon": self.rollout.horizon,
            "ambiguity_filter": self.rollout.ambiguity_filter,
            "gap_threshold": self.rollout.gap_threshold,
        }
        if self.rollout.proposal is not None:
            rollout["proposal"] = vars(self.rollout.proposal).copy()
        pot = {"rollout": rollout}
        if self.head_path is not None:
            pot["head"] = self.head_path
        return {
            "model": self.model.to_dict(),
            "prompt": list(self.prompt),
            "run": self.run.to_dict(),
            "potential": pot,
            "repetitions": self.repetitions,
            "workers": self.workers,
            "oracle_check": self.oracle_check,
            "output_dir": self.output_dir,
            "study": dict(self.study),
        }

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=True)
