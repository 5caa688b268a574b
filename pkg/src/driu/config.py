"""Flat ``key = value`` run configuration with a closed schema.

Every key maps to exactly one command-line flag (``base_lr`` -> ``--base-lr``);
a flag given on the command line wins over the same key in the file.
"""
from dataclasses import dataclass
from fractions import Fraction

from .errors import ConfigError
from .net import NetConfig
from .trainer import TrainConfig


def _bool(text):
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text):
    return tuple(float(t) for t in str(text).split(",") if t.strip())


def _ints(text):
    return tuple(int(t) for t in str(text).split(",") if t.strip())


def _average(text):
    v = str(text).strip().lower()
    if v not in ("pooled", "image"):
        raise ValueError(f"expected 'pooled' or 'image', got {text!r}")
    return v


def _opt_int(text):
    return None if str(text).strip().lower() in ("", "none") else int(text)


def _opt_float(text):
    return None if str(text).strip().lower() in ("", "none") else float(text)


@dataclass(frozen=True)
class Key:
    name: str
    parse: callable
    section: str
    help: str

    @property
    def flag(self):
        return "--" + self.name.replace("_", "-")


SCHEMA = {k.name: k for k in (
    Key("stage_channels", _ints, "net", "channels of the five base stages before scaling"),
    Key("convs_per_stage", _ints, "net", "3x3 convolutions in each of the five stages"),
    Key("side_channels", int, "net", "K, channels per specialized side layer"),
    Key("width_scale", Fraction, "net", "divide every stage width by this factor"),
    Key("base_lr", float, "train", "initial learning rate"),
    Key("momentum", float, "train", "SGD momentum coefficient"),
    Key("iterations", int, "train", "number of single-image SGD iterations"),
    Key("decay_factor", float, "train", "learning-rate multiplier applied at each decay step"),
    Key("decay_interval", _opt_int, "train", "decay every N iterations ('none' = use milestones)"),
    Key("decay_milestones", _floats, "train", "fractions of the run at which to decay"),
    Key("augment", _bool, "train", "rotate/scale training images on the fly"),
    Key("rotations", _floats, "train", "base rotation angles in degrees"),
    Key("rotation_jitter", float, "train", "extra uniform rotation in +/- degrees"),
    Key("scales", _floats, "train", "scale factors to draw from"),
    Key("seed", int, "train", "seed for initialization, sampling order and augmentation"),
    Key("clip_norm", _opt_float, "train", "clip the global gradient L2 norm to this value ('none' = off)"),
    Key("log_every", int, "train", "print a progress line every N iterations (0 = never)"),
    Key("fov", _bool, "eval", "restrict evaluation to the field-of-view mask when present"),
    Key("pr_average", _average, "eval",
        "'pooled' sums pixel counts over the test set; 'image' averages per-image P/R"),
)}


def parse_config_text(text, source="<config>"):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return validate(values, source)


def validate(raw, source="<config>"):
    out = {}
    for key, value in raw.items():
        if key not in SCHEMA:
            raise ConfigError(f"{source}: unknown key {key!r}")
        try:
            out[key] = SCHEMA[key].parse(value)
        except (TypeError, ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"{source}: bad value for {key!r}: {exc}") from None
    return out


def load_config(path):
    with open(path) as fh:
        return parse_config_text(fh.read(), str(path))


def merge(file_values, overrides):
    merged = dict(file_values)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return merged


def _section(values, name):
    return {k: v for k, v in values.items() if SCHEMA[k].section == name}


def net_config(values):
    return NetConfig(**_section(values, "net"))


def train_config(values):
    return TrainConfig(**_section(values, "train"))


def eval_flags(values):
    return {"use_fov": values.get("fov", True), "average": values.get("pr_average", "pooled")}
