"""Run configuration: a versioned JSON document plus named presets.

A config file is a JSON object whose top-level sections mirror the
dataclasses below. Unknown keys are rejected so typos surface as
configuration errors rather than silently ignored settings. A file may name
a ``preset``; its own keys are then merged over the preset.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field, fields

from .errors import ParameterError
from .gda import GdaConfig
from .surrogate import FAMILIES
from .synth import RISK_FORMS, DgpConfig

SCHEMA_VERSION = 1
EXTRA_TYPES = ("safety", "budget", "fairness", "linear", "ratio")


def _build(cls, doc, section):
    if doc is None:
        return cls()
    if not isinstance(doc, dict):
        raise ParameterError(f"section {section!r} must be an object")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ParameterError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")
    try:
        return cls(**doc)
    except TypeError as exc:
        raise ParameterError(f"invalid {section!r} section: {exc}") from exc


@dataclass
class DataSettings:
    source: str = "synthetic"
    dgp: dict = field(default_factory=dict)
    constraint_aux: bool = False
    aux_feature_scale: float | None = None
    risk_form: str = "affine"
    csv_path: str | None = None
    schema: dict | None = None
    delimiter: str = ","

    def dgp_config(self) -> DgpConfig:
        try:
            return DgpConfig(**self.dgp).validate()
        except TypeError as exc:
            raise ParameterError(f"invalid dgp block: {exc}") from exc

    def validate(self):
        if self.source not in ("synthetic", "csv"):
            raise ParameterError("data.source must be 'synthetic' or 'csv'")
        if self.source == "csv" and not self.csv_path:
            raise ParameterError("data.csv_path is required for a csv source")
        if self.source == "synthetic":
            self.dgp_config()
        if self.risk_form not in RISK_FORMS:
            raise ParameterError(f"data.risk_form must be one of {RISK_FORMS}")


@dataclass
class NuisanceSettings:
    estimator: str = "aiptw"
    l2: float = 1e-4
    max_iters: int = 20000
    tol: float = 1e-6
    hidden_size: int = 50
    epochs: int = 150
    lr: float = 1e-3
    batch_size: int = 64
    clip: float = 1e-3

    def validate(self):
        if self.estimator not in ("aiptw", "iptw"):
            raise ParameterError("nuisance.estimator must be 'aiptw' or 'iptw'")
        if not 0 < self.clip < 0.5:
            raise ParameterError("nuisance.clip must lie in (0, 0.5)")
        if self.hidden_size < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ParameterError("nuisance sizes must be positive")


@dataclass
class SurrogateSettings:
    family: str = "mlp"
    hidden_size: int = 50
    depth: int = 5
    n_trees: int = 3
    tau: float = 0.1
    threshold: float = 0.5
    hard_routing: bool = True

    def validate(self):
        if self.family not in FAMILIES:
            raise ParameterError(f"surrogate.family must be one of {FAMILIES}")
        if self.hidden_size < 1 or self.depth < 1 or self.n_trees < 1 or self.tau <= 0:
            raise ParameterError("surrogate sizes must be positive")
        if not 0 < self.threshold < 1:
            raise ParameterError("surrogate.threshold must lie in (0, 1)")


@dataclass
class ExtraConstraintSettings:
    """One additional constraint read from an auxiliary column.

    * ``safety``: selected mean of ``column`` at most ``limit``;
    * ``budget``: total of ``column`` over the selection at most ``limit * n``;
    * ``fairness``: selected mean of ``column`` within ``target +- tol``;
    * ``linear``/``ratio``: raw ``a + direction * sum(column * s)`` (ratio divides by ``sum(s)``).
    """

    type: str
    column: str
    limit: float | None = None
    target: float | None = None
    tol: float | None = None
    a: float | None = None
    direction: float = 1.0
    name: str | None = None

    def validate(self):
        if self.type not in EXTRA_TYPES:
            raise ParameterError(f"constraint type must be one of {EXTRA_TYPES}, got {self.type!r}")
        need = {"safety": ("limit",), "budget": ("limit",), "fairness": ("target", "tol"),
                "linear": ("a",), "ratio": ("a",)}[self.type]
        for key in need:
            if getattr(self, key) is None:
                raise ParameterError(f"{self.type} constraint needs {key!r}")


@dataclass
class ConstraintSettings:
    size_c: float = 0.5
    alpha: float = 0.02
    extra: list = field(default_factory=list)

    def validate(self):
        if not 0 < self.size_c < 1:
            raise ParameterError("constraints.size_c must lie in (0, 1)")
        if not 0 <= self.alpha < 0.5:
            raise ParameterError("constraints.alpha must lie in [0, 0.5)")
        for e in self.extra:
            e.validate()


@dataclass
class ExperimentSettings:
    splits: int = 1
    test_fraction: float = 0.5
    resample_data: bool = True
    cv_folds: int = 5
    cv_grid: dict | None = None
    c_values: list | None = None
    alpha_values: list | None = None
    overlap_reference_alpha: float = 0.02
    parallelism: int | None = None
    seed: int = 0

    def validate(self):
        if self.splits < 1:
            raise ParameterError("experiment.splits must be >= 1")
        if not 0 < self.test_fraction < 1:
            raise ParameterError("experiment.test_fraction must lie in (0, 1)")
        if self.cv_folds < 2:
            raise ParameterError("experiment.cv_folds must be >= 2")
        if self.cv_grid is not None:
            bad = set(self.cv_grid) - {"beta", "hidden_size", "depth"}
            if bad:
                raise ParameterError(f"unknown cv_grid axes: {sorted(bad)}")
            if any(not isinstance(v, list) or not v for v in self.cv_grid.values()):
                raise ParameterError("cv_grid axes must be non-empty lists")
        for c in self.c_values or []:
            if not 0 < c < 1:
                raise ParameterError("experiment.c_values must lie in (0, 1)")
        for a in self.alpha_values or []:
            if not 0 <= a < 0.5:
                raise ParameterError("experiment.alpha_values must lie in [0, 0.5)")
        if self.parallelism is not None and self.parallelism < 1:
            raise ParameterError("experiment.parallelism must be >= 1")

    def workers(self) -> int:
        return self.parallelism or os.cpu_count() or 1


@dataclass
class TypeISettings:
    instances: int = 100
    bootstrap_iters: int = 10000
    significance: float = 0.05
    c_values: list = field(default_factory=lambda: [0.4, 0.6, 0.8])
    test_fraction: float = 0.5

    def validate(self):
        if self.instances < 1:
            raise ParameterError("typei.instances must be >= 1")
        if self.bootstrap_iters < 100:
            raise ParameterError("typei.bootstrap_iters must be >= 100")
        if not 0 < self.significance <= 1:
            raise ParameterError("typei.significance must lie in (0, 1]")
        if not self.c_values or any(not 0 < c < 1 for c in self.c_values):
            raise ParameterError("typei.c_values must be a non-empty list in (0, 1)")


@dataclass
class RunConfig:
    version: int = SCHEMA_VERSION
    preset: str | None = None
    data: DataSettings = field(default_factory=DataSettings)
    nuisance: NuisanceSettings = field(default_factory=NuisanceSettings)
    surrogate: SurrogateSettings = field(default_factory=SurrogateSettings)
    constraints: ConstraintSettings = field(default_factory=ConstraintSettings)
    gda: GdaConfig = field(default_factory=GdaConfig)
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)
    typei: TypeISettings = field(default_factory=TypeISettings)
    output_dir: str = "out"

    def validate(self) -> "RunConfig":
        if self.version != SCHEMA_VERSION:
            raise ParameterError(f"unsupported config version {self.version}; expected {SCHEMA_VERSION}")
        for part in (self.data, self.nuisance, self.surrogate, self.constraints, self.experiment, self.typei):
            part.validate()
        self.gda.validate()
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ParameterError("config must be a JSON object")
        doc = copy.deepcopy(doc)
        preset = doc.get("preset")
        if preset is not None:
            doc = merge(preset_dict(preset), doc)
        top = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - top)
        if unknown:
            raise ParameterError(f"unknown top-level key(s): {', '.join(unknown)}")
        cons = doc.get("constraints") or {}
        if "extra" in cons:
            cons = dict(cons)
            cons["extra"] = [_build(ExtraConstraintSettings, e, "constraints.extra") for e in cons["extra"]]
        return cls(
            version=doc.get("version", SCHEMA_VERSION),
            preset=preset,
            data=_build(DataSettings, doc.get("data"), "data"),
            nuisance=_build(NuisanceSettings, doc.get("nuisance"), "nuisance"),
            surrogate=_build(SurrogateSettings, doc.get("surrogate"), "surrogate"),
            constraints=_build(ConstraintSettings, cons, "constraints"),
            gda=_build(GdaConfig, doc.get("gda"), "gda"),
            experiment=_build(ExperimentSettings, doc.get("experiment"), "experiment"),
            typei=_build(TypeISettings, doc.get("typei"), "typei"),
            output_dir=doc.get("output_dir", "out"),
        ).validate()


def merge(base: dict, override: dict) -> dict:
    """Recursive dict merge; lists and scalars in ``override`` replace ``base``."""
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path, preset: str | None = None) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParameterError(f"{path}: invalid JSON ({exc})") from exc
    if preset is not None:
        if not isinstance(doc, dict):
            raise ParameterError("config must be a JSON object")
        doc = dict(doc, preset=preset)
    return RunConfig.from_dict(doc)


# ---------------------------------------------------------------------------
# presets

# Step size and iteration budget tuned for single-core desk runs; see README.
_FAST_GDA = {"eta": 2.0, "zeta": 0.5, "beta": 1e-4, "t_max": 1000}

_CONFOUNDED = {
    "data": {"source": "synthetic", "dgp": {"omega_tilde": 5.0, "n": 5000, "variant": "continuous"}},
    "surrogate": {"family": "mlp", "hidden_size": 50},
    "constraints": {"size_c": 0.5, "alpha": 0.02},
    "gda": dict(_FAST_GDA),
    "experiment": {"splits": 100, "test_fraction": 0.5, "cv_grid": None},
}

PRESETS = {
    "paper-synthetic-confounded": _CONFOUNDED,
    "appendix-E4": merge(_CONFOUNDED, {
        "data": {"constraint_aux": True, "risk_form": "shifted"},
        "surrogate": {"hidden_size": 20},
        "gda": {"t_max": 5000},
        "constraints": {"extra": [
            {"type": "safety", "column": "risk", "limit": 0.05},
            {"type": "budget", "column": "cost", "limit": 0.5},
            {"type": "fairness", "column": "sensitive", "target": 0.5, "tol": 0.01},
        ]},
    }),
    "appendix-F": merge(_CONFOUNDED, {
        "data": {"dgp": {"variant": "binary_subgroup"}},
        "constraints": {"size_c": 0.6, "alpha": 0.0},
        "gda": {"beta": 1e-5},
        "experiment": {"c_values": [0.6, 0.7, 0.8]},
    }),
    "appendix-G": merge(_CONFOUNDED, {
        "data": {"dgp": {"variant": "null"}},
        # overlap rows would always drop the highest-variance units, which the
        # subsampling null cannot mimic
        "constraints": {"alpha": 0.0},
        "typei": {"instances": 100, "bootstrap_iters": 10000, "significance": 0.05,
                  "c_values": [0.4, 0.6, 0.8], "test_fraction": 0.5},
    }),
}


def preset_dict(name: str) -> dict:
    if name not in PRESETS:
        raise ParameterError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}")
    return copy.deepcopy(PRESETS[name])


def preset_config(name: str, **overrides) -> RunConfig:
    """Preset merged with keyword section overrides, e.g. ``experiment={"splits": 3}``."""
    return RunConfig.from_dict(merge({"preset": name}, overrides))
