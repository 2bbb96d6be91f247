"""Run configuration: one YAML or JSON document with a section per stage.

Every random stream is derived from ``master_seed`` and the stage name, so
section documents carry no ``seed`` keys of their own.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from vbiopsy.diagnoser import AugmentConfig, DiagnoserConfig
from vbiopsy.evaluate import AVERAGES
from vbiopsy.localizer import PriorConfig
from vbiopsy.oracle import EndpointConfig, StubNoiseConfig
from vbiopsy.phantom import PhantomConfig
from vbiopsy.preprocess import PreprocessConfig

SECTIONS = ("phantom", "preprocess", "oracle", "localizer", "diagnoser", "eval")


class ConfigError(ValueError):
    pass


def stage_seed(master_seed, name):
    """Named per-stage stream: independent of every other stage's seed."""
    ss = np.random.SeedSequence([int(master_seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass
class OracleSection:
    kind: str = "stub"
    jitter_std: float = 1.0
    miss_prob: float = 0.2
    false_pos_prob: float = 0.0
    url: str = EndpointConfig.url
    retries: int = 2
    timeout: float = 30.0

    def __post_init__(self):
        if self.kind not in ("stub", "remote"):
            raise ValueError("kind must be 'stub' or 'remote'")
        if self.retries < 0 or self.timeout <= 0:
            raise ValueError("retries must be >= 0 and timeout > 0")
        StubNoiseConfig(self.jitter_std, self.miss_prob, self.false_pos_prob)

    def stub(self, seed):
        return StubNoiseConfig(self.jitter_std, self.miss_prob, self.false_pos_prob, seed)

    def endpoint(self):
        return EndpointConfig(self.url, self.retries, self.timeout)


@dataclass
class EvalSection:
    k_folds: int = 5
    average: str = "macro"
    saliency_cases: int = 4
    jobs: int = 1

    def __post_init__(self):
        if self.k_folds < 2:
            raise ValueError("k_folds must be >= 2")
        if self.average not in AVERAGES:
            raise ValueError(f"average must be one of {AVERAGES}")
        if self.saliency_cases < 0 or self.jobs < 1:
            raise ValueError("saliency_cases must be >= 0 and jobs >= 1")


# Defaults for the phantom workflow.  The learning rate is the recipe's value
# scaled up for a small from-scratch model trained for at most 60 epochs.  A
# wider last stage gives the channel gate more channels to choose between.
PHANTOM_DEFAULTS = {
    "preprocess": {"brain_threshold_quantile": 0.73},
    "diagnoser": {"lr": 3e-3, "epochs": 60, "channels": [8, 32]},
}


def _build(cls, section, doc, skip=("seed",)):
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{section}: expected a mapping, got {type(doc).__name__}")
    known = {f.name for f in fields(cls)} - set(skip)
    for key in doc:
        if key not in known:
            hint = " (seeds derive from master_seed)" if key == "seed" else ""
            raise ConfigError(f"{section}.{key}: unknown key{hint}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


@dataclass
class RunConfig:
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    oracle: OracleSection = field(default_factory=OracleSection)
    localizer: PriorConfig = field(default_factory=PriorConfig)
    diagnoser: DiagnoserConfig = field(default_factory=DiagnoserConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    master_seed: int = 0
    output_root: str = "runs/default"
    source: str = "<defaults>"

    @classmethod
    def from_dict(cls, doc, source="<dict>"):
        doc = dict(doc or {})
        allowed = set(SECTIONS) | {"augment", "master_seed", "output_root"}
        for key in doc:
            if key not in allowed:
                raise ConfigError(f"{key}: unknown top-level key (expected one of {sorted(allowed)})")
        merged = {}
        for sec in SECTIONS + ("augment",):
            base = dict(PHANTOM_DEFAULTS.get(sec, {}))
            given = doc.get(sec) or {}
            if not isinstance(given, dict):
                raise ConfigError(f"{sec}: expected a mapping")
            base.update(given)
            merged[sec] = base
        try:
            master = int(doc.get("master_seed", 0))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"master_seed: {exc}") from exc
        if "class_signatures" in merged["phantom"]:
            merged["phantom"]["class_signatures"] = tuple(merged["phantom"]["class_signatures"])
        return cls(
            phantom=_build(PhantomConfig, "phantom", merged["phantom"]),
            preprocess=_build(PreprocessConfig, "preprocess", merged["preprocess"]),
            oracle=_build(OracleSection, "oracle", merged["oracle"], skip=()),
            localizer=_build(PriorConfig, "localizer", merged["localizer"]),
            diagnoser=_build(DiagnoserConfig, "diagnoser", merged["diagnoser"]),
            augment=_build(AugmentConfig, "augment", merged["augment"]),
            eval=_build(EvalSection, "eval", merged["eval"], skip=()),
            master_seed=master,
            output_root=str(doc.get("output_root", "runs/default")),
            source=source,
        ).seeded()

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            doc = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
        except (ValueError, yaml.YAMLError) as exc:
            raise ConfigError(f"{path}: parse error: {exc}") from exc
        return cls.from_dict(doc, str(path))

    def seeded(self):
        """Push stage seeds derived from ``master_seed`` into each section."""
        m = self.master_seed
        self.phantom.seed = stage_seed(m, "phantom")
        self.localizer.seed = stage_seed(m, "localizer")
        self.diagnoser.seed = stage_seed(m, "diagnoser")
        self.augment.seed = stage_seed(m, "augment")
        return self

    def oracle_seed(self, case_index):
        return stage_seed(stage_seed(self.master_seed, "oracle"), str(case_index))

    def fold_seed(self):
        return stage_seed(self.master_seed, "folds")

    def with_seed(self, seed):
        doc = self.to_dict()
        doc["master_seed"] = int(seed)
        return RunConfig.from_dict(doc, self.source)

    def to_dict(self):
        def strip(d):
            d = dict(d)
            d.pop("seed", None)
            return d

        return {
            "phantom": strip(self.phantom.to_dict()),
            "preprocess": self.preprocess.to_dict(),
            "oracle": dict(vars(self.oracle)),
            "localizer": strip(self.localizer.to_dict()),
            "diagnoser": strip(self.diagnoser.to_dict()),
            "augment": strip(self.augment.to_dict()),
            "eval": dict(vars(self.eval)),
            "master_seed": self.master_seed,
            "output_root": self.output_root,
        }

    def echo(self):
        """Deterministic text form, written into every output directory."""
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"
