"""Flat ``key = value`` run configuration with dotted namespaces.

Example file::

    # Dshift, our method
    scenario.kind = Dshift
    method = ours-laftr
    train.epochs = 60
    run.seeds = 0, 1, 2, 3, 4

Values are parsed as int, float, bool (true/false) or comma-separated lists;
anything else stays a string.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from typing import Any, Dict, List, Mapping, Tuple

from .errors import ConfigError
from .factorworld import SCENARIO_KINDS
from .selftrain import CONSISTENCY_DOMAINS, TrainConfig

# method -> (fairness loss, consistency loss, domain adversary)
METHODS: Dict[str, Tuple[str, str, bool]] = {
    "base": ("none", "none", False),
    "laftr": ("laftr", "none", False),
    "cfair": ("cfair", "none", False),
    "laftr+dann": ("laftr", "none", True),
    "cfair+dann": ("cfair", "none", True),
    "laftr+fixmatch": ("laftr", "standard", False),
    "cfair+fixmatch": ("cfair", "standard", False),
    "ours-laftr": ("laftr", "fair", False),
    "ours-cfair": ("cfair", "fair", False),
}
SOURCE_ONLY = ("base", "laftr", "cfair")


def _parse_value(text: str) -> Any:
    text = text.strip()
    if "," in text:
        return [_parse_value(t) for t in text.split(",") if t.strip()]
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_config_text(text: str, origin: str = "<config>") -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = _parse_value(value)
    return out


def load_config_file(path) -> Dict[str, Any]:
    try:
        with open(path) as fh:
            return parse_config_text(fh.read(), str(path))
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from exc


def _as_list(v) -> list:
    if isinstance(v, (list, tuple)):
        return list(v)
    if v == "" or v is None:
        return []
    return [v]


@dataclass
class RunConfig:
    """Every knob of one experiment cell.  Field ``a_b`` is config key ``a.b``."""

    scenario_kind: str = "Dshift"
    scenario_num_nuisance_values: int = 8
    scenario_extra_nuisance: List[int] = field(default_factory=lambda: [])
    emitter_seed: int = 0
    emitter_noise_scale: float = 1.0
    emitter_feature_dim: int = 16
    emitter_separability: float = 1.5
    emitter_nuisance_scale: float = 3.0
    sample_seed: int = 0
    sample_n_train: int = 4000
    sample_n_val: int = 1000
    sample_n_test: int = 1000
    method: str = "ours-laftr"
    net_encoder: List[int] = field(default_factory=lambda: [64, 64])
    net_adversary_hidden: List[int] = field(default_factory=lambda: [64])
    net_reversal: float = 1.0
    optim_lr: float = 0.05
    optim_momentum: float = 0.9
    optim_batch_size: int = 128
    optim_unlabeled_batch_size: int = 256
    train_epochs: int = 60
    train_warmup: int = 5
    train_tau: float = 0.95
    train_w_fair: float = 1.0
    train_w_cons: float = 1.0
    train_w_dann: float = 1.0
    train_denominator: str = "group"
    transform_kind: str = "nuisance"
    transform_factors: List[str] = field(default_factory=lambda: ["D"])
    transform_fraction: float = 0.5
    transform_protected: List[int] = field(default_factory=lambda: [])
    ablation_no_teacher_update: bool = False
    ablation_uniform_group_weights: bool = False
    ablation_consistency_domain: str = "both"
    eval_selection: str = "auto"
    eval_consistency_trials: int = 5
    run_seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])

    @staticmethod
    def key_of(field_name: str) -> str:
        return field_name.replace("_", ".", 1) if field_name != "method" else field_name

    @classmethod
    def keys(cls) -> Dict[str, str]:
        return {cls.key_of(f.name): f.name for f in fields(cls)}

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any]) -> "RunConfig":
        keys = cls.keys()
        kwargs = {}
        defaults = cls()
        for key, value in mapping.items():
            if key == "sample.n":
                key = "sample.n_train"
            if key not in keys:
                raise ConfigError("unknown config key", key=key)
            name = keys[key]
            default = getattr(defaults, name)
            try:
                if isinstance(default, bool):
                    if not isinstance(value, bool):
                        raise TypeError
                    kwargs[name] = value
                elif isinstance(default, list):
                    elem = type(default[0]) if default else int
                    if name == "transform_factors":
                        elem = str
                    kwargs[name] = [elem(v) for v in _as_list(value)]
                elif isinstance(default, float):
                    kwargs[name] = float(value)
                elif isinstance(default, int):
                    if isinstance(value, float) and not value.is_integer():
                        raise TypeError
                    kwargs[name] = int(value)
                else:
                    kwargs[name] = str(value)
            except (TypeError, ValueError):
                raise ConfigError(f"bad value {value!r}", key=key) from None
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path, overrides: Mapping[str, Any] | None = None) -> "RunConfig":
        mapping = load_config_file(path)
        mapping.update(overrides or {})
        return cls.from_mapping(mapping)

    def replace(self, **changes) -> "RunConfig":
        data = self.to_mapping()
        for k, v in changes.items():
            data[self.key_of(k) if "." not in k else k] = v
        return RunConfig.from_mapping(data)

    def validate(self) -> None:
        if self.scenario_kind not in SCENARIO_KINDS or self.scenario_kind == "Custom":
            raise ConfigError(f"unsupported scenario {self.scenario_kind!r}", key="scenario.kind")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {sorted(METHODS)}", key="method")
        if self.transform_kind not in ("nuisance", "corruption"):
            raise ConfigError(f"unknown transform {self.transform_kind!r}", key="transform.kind")
        if self.eval_selection not in ("auto", "source", "target"):
            raise ConfigError(f"unknown selection split {self.eval_selection!r}", key="eval.selection")
        if self.ablation_consistency_domain not in CONSISTENCY_DOMAINS:
            raise ConfigError("expected both|source|target", key="ablation.consistency_domain")
        if self.train_epochs < 1:
            raise ConfigError("need at least one epoch", key="train.epochs")
        if self.optim_lr <= 0:
            raise ConfigError("learning rate must be positive", key="optim.lr")
        if not 0 <= self.optim_momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)", key="optim.momentum")
        if not self.run_seeds:
            raise ConfigError("need at least one seed", key="run.seeds")
        for key, n in (("sample.n_train", self.sample_n_train), ("sample.n_val", self.sample_n_val), ("sample.n_test", self.sample_n_test)):
            if n < 1:
                raise ConfigError("must be positive", key=key)
        self.train_config()

    def to_mapping(self) -> Dict[str, Any]:
        return {self.key_of(f.name): getattr(self, f.name) for f in fields(self)}

    def to_text(self) -> str:
        def fmt(v):
            if isinstance(v, list):
                return ", ".join(fmt(x) for x in v) if v else ""
            if isinstance(v, bool):
                return "true" if v else "false"
            if isinstance(v, float):
                return repr(v)
            return str(v)

        return "".join(f"{k} = {fmt(v)}\n" for k, v in sorted(self.to_mapping().items()))

    def hash(self, seed: int | None = None) -> str:
        text = self.to_text() + (f"seed = {seed}\n" if seed is not None else "")
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    @property
    def source_only(self) -> bool:
        return self.method in SOURCE_ONLY

    @property
    def selection_split(self) -> str:
        if self.eval_selection != "auto":
            return self.eval_selection
        return "source" if self.source_only else "target"

    def train_config(self) -> TrainConfig:
        fairness, consistency, dann = METHODS[self.method]
        return TrainConfig(
            fairness=fairness,
            consistency=consistency,
            dann=dann,
            w_fair=self.train_w_fair if fairness != "none" else 0.0,
            w_cons=self.train_w_cons if consistency != "none" else 0.0,
            w_dann=self.train_w_dann if dann else 0.0,
            tau=self.train_tau,
            warmup=self.train_warmup,
            batch_size=self.optim_batch_size,
            unlabeled_batch_size=self.optim_unlabeled_batch_size,
            denominator=self.train_denominator,
            freeze_teacher=self.ablation_no_teacher_update,
            uniform_group_weights=self.ablation_uniform_group_weights,
            consistency_domain=self.ablation_consistency_domain,
        )
