"""INI run configuration with strict key checking.

Sections and keys::

    [model]  variant stem widths blocks parts embed_dim num_classes
             fusion_location fusion_mechanism use_m_co use_m_di
             double_merge se_reduction
    [train]  batch base_lr weight_decay momentum milestones total_steps
             triplet_weight softmax_weight margin seed max_rotation
             flip_prob train_sequences
    [data]   num_ids seqs_per_id frames torso_width limb_length
             swing_amplitude stride_frequency phase mode conditions
    [eval]   gallery_conditions probe_conditions gallery_sequences
             probe_sequences exclude_same_sequence

Lists are comma separated.  ``num_classes = auto`` takes the number of
training identities.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field

from .data.synth import SynthSpec
from .fusion import FusionSpec
from .model import ModelConfig, config_to_dict
from .retrieval import Protocol
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _strs(s: str) -> tuple:
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _ints(s: str) -> tuple:
    return tuple(int(x) for x in _strs(s))


def _floats(s: str) -> tuple:
    return tuple(float(x) for x in _strs(s))


def _range(s: str) -> tuple:
    v = _floats(s)
    if len(v) != 2:
        raise ValueError(f"expected 'low, high', got {s!r}")
    return v


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


MODEL_KEYS = {
    "variant": str, "stem": int, "widths": _ints, "blocks": _ints, "parts": int, "embed_dim": int,
    "num_classes": str, "fusion_location": str, "fusion_mechanism": str, "use_m_co": _bool,
    "use_m_di": _bool, "double_merge": _bool, "se_reduction": int,
}
TRAIN_KEYS = {
    "batch": _ints, "base_lr": float, "weight_decay": float, "momentum": float, "milestones": _ints,
    "total_steps": int, "triplet_weight": float, "softmax_weight": float, "margin": float, "seed": int,
    "max_rotation": float, "flip_prob": float, "train_sequences": _strs,
}
DATA_KEYS = {
    "num_ids": int, "seqs_per_id": int, "frames": int, "torso_width": _range, "limb_length": _range,
    "swing_amplitude": _range, "stride_frequency": _range, "phase": _range, "mode": str, "conditions": _strs,
}
EVAL_KEYS = {
    "gallery_conditions": _strs, "probe_conditions": _strs, "gallery_sequences": _strs,
    "probe_sequences": _strs, "exclude_same_sequence": _bool,
}
SECTIONS = {"model": MODEL_KEYS, "train": TRAIN_KEYS, "data": DATA_KEYS, "eval": EVAL_KEYS}


@dataclass
class RunConfig:
    model: dict = field(default_factory=dict)  # ModelConfig fields, num_classes possibly "auto"
    train: TrainConfig = field(default_factory=TrainConfig)
    train_sequences: tuple = ()
    data: SynthSpec = field(default_factory=SynthSpec)
    protocol: Protocol = field(default_factory=Protocol)

    def model_config(self, num_classes: int | None = None) -> ModelConfig:
        d = dict(self.model)
        loc, mech = d.pop("fusion_location", None), d.pop("fusion_mechanism", None)
        if (loc is None) != (mech is None):
            raise ConfigError("fusion_location and fusion_mechanism must be given together")
        if loc is not None:
            d["fusion"] = FusionSpec(loc, mech)
        nc = d.pop("num_classes", "auto")
        if nc == "auto":
            if num_classes is None:
                raise ConfigError("num_classes = auto needs a dataset")
            nc = num_classes
        d["num_classes"] = int(nc)
        return ModelConfig(**d)

    def resolved_model(self, num_classes: int | None = None) -> dict:
        """Every [model] key with defaults filled in."""
        mc = self.model_config(num_classes if num_classes is not None else 1)
        d = config_to_dict(mc)
        fusion = d.pop("fusion")
        d["fusion_location"] = fusion["location"] if fusion else None
        d["fusion_mechanism"] = fusion["mechanism"] if fusion else None
        if num_classes is None and self.model.get("num_classes", "auto") == "auto":
            d["num_classes"] = "auto"
        return {k: d[k] for k in MODEL_KEYS if d.get(k) is not None}

    def to_ini(self, num_classes: int | None = None) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp["model"] = {k: _fmt(v) for k, v in self.resolved_model(num_classes).items()}
        t = dataclasses.asdict(self.train)
        cp["train"] = {k: _fmt(t[k]) for k in TRAIN_KEYS if k in t}
        cp["train"]["train_sequences"] = _fmt(self.train_sequences)
        d = dataclasses.asdict(self.data)
        cp["data"] = {k: _fmt(d[k]) for k in DATA_KEYS}
        p = dataclasses.asdict(self.protocol)
        cp["eval"] = {k: _fmt(p[k]) for k in EVAL_KEYS}
        lines = []
        for section in cp.sections():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in cp[section].items())
            lines.append("")
        return "\n".join(lines)


def parse_run_config(text: str, source: str = "<string>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, strict=True)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from None
    values = {}
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        schema = SECTIONS[section]
        values[section] = {}
        for key, raw in cp[section].items():
            if key not in schema:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]; allowed: {', '.join(schema)}")
            try:
                values[section][key] = schema[key](raw)
            except ValueError as e:
                raise ConfigError(f"{source}: [{section}] {key}: {e}") from None
    try:
        model = {"num_classes": "auto", **values.get("model", {})}
        if model["num_classes"] != "auto":
            model["num_classes"] = int(model["num_classes"])
        train_vals = dict(values.get("train", {}))
        train_sequences = train_vals.pop("train_sequences", ())
        run = RunConfig(
            model=model,
            train=TrainConfig(**train_vals),
            train_sequences=train_sequences,
            data=SynthSpec(**values.get("data", {})).validate(),
            protocol=Protocol(**values.get("eval", {})),
        )
        run.model_config(num_classes=1)  # validates the model section early
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{source}: {e}") from None
    return run


def load_run_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_run_config(text, str(path))
