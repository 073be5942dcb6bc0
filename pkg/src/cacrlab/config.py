"""INI experiment configuration: schema, validation, hashing and object builders.

Sections use dotted names for nesting (``[data.augment]``).  Every key has a
declared type and default; unknown sections or keys raise ``ConfigError``.
"""

import configparser
import hashlib
import json
import os
from dataclasses import dataclass

from .data import AugmentationSpec, ImbalanceRule, SyntheticSpec, generate, subsample_imbalanced
from .encoder import MlpSpec
from .errors import ConfigError
from .evaluation import ProbeConfig
from .losses import CostKind, GradFlow, LossSpec, Temperatures, WeightPolarity
from .rng import make_rng
from .trainer import TrainConfig


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text):
    return None if text.strip().lower() in ("", "none", "default") else float(text)


def _int_list(text):
    return tuple(int(v) for v in text.replace(",", " ").split())


def _schedule(text):
    """``"155:0.1, 170:0.1"`` (epoch:factor pairs) or empty for the default."""
    if text.strip().lower() in ("", "none", "default"):
        return None
    pairs = []
    for item in text.split(","):
        epoch, factor = item.split(":")
        pairs.append((int(epoch), float(factor)))
    return tuple(pairs)


def _str(text):
    return text.strip()


# section -> key -> (parser, default)
SCHEMA = {
    "experiment": {
        "seed": (int, 0),
        "output_dir": (_str, "runs"),
    },
    "data": {
        "layout": (_str, "circle"),
        "n_classes": (int, 4),
        "dim": (int, 2),
        "radius": (float, 3.0),
        "samples_per_class": (int, 500),
        "within_class_std": (float, 1.0),
        "probe_samples_per_class": (int, 250),
    },
    "data.augment": {
        "noise_std": (float, 0.1),
        "rotation_max_angle": (float, 0.0),
        "scale_jitter": (float, 0.0),
    },
    "data.imbalance": {
        "kind": (_str, "balanced"),
        "rho": (float, 0.1),
    },
    "encoder": {
        "layer_widths": (_int_list, (2, 64, 64, 16)),
        "activation": (_str, "relu"),
    },
    "train": {
        "loss": (_str, "cacr"),
        "t_pos": (float, 1.0),
        "t_neg": (float, 2.0),
        "tau": (float, 0.2),
        "cost": (_str, "sq_euclidean"),
        "cost_t_rbf": (float, 1.0),
        "t_rbf": (float, 2.0),
        "margin": (float, 0.0),
        "align_exponent": (float, 2.0),
        "pos_sign": (int, 1),
        "neg_sign": (int, -1),
        "through_pos_weights": (_bool, False),
        "through_neg_weights": (_bool, True),
        "mode": (_str, "simclr"),
        "M": (int, 64),
        "K": (int, 4),
        "epochs": (int, 200),
        "lr": (_opt_float, None),
        "lr_schedule": (_schedule, None),
        "sgd_momentum": (float, 0.9),
        "weight_decay": (float, 1e-4),
        "queue_size": (int, 1024),
        "ema": (float, 0.99),
        "val_fraction": (float, 0.2),
        "record_timing": (_bool, False),
    },
    "eval": {
        "epochs": (int, 500),
        "lr": (float, 1.0),
        "l2_reg": (float, 1e-4),
        "batch_size": (int, 0),
        "knn_k": (int, 5),
    },
}

# keys a sweep grid may vary, as "section.key"
SWEEPABLE = ("train.t_pos", "train.t_neg", "train.K", "train.M", "train.loss",
             "data.imbalance.kind", "data.imbalance.rho")


def _new_parser():
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    cp.optionxform = str  # keep "M" and "K" as written
    return cp


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved configuration: ``values[section][key]`` with every default filled in."""

    values: dict
    source: str = ""

    def __getitem__(self, section):
        return self.values[section]

    @property
    def seed(self):
        return self.values["experiment"]["seed"]

    @property
    def output_dir(self):
        return self.values["experiment"]["output_dir"]

    def canonical(self):
        """JSON-ready dict of everything that affects results (``output_dir`` excluded)."""
        out = {}
        for section, vals in self.values.items():
            out[section] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vals.items()
                            if (section, k) != ("experiment", "output_dir")}
            if section == "train" and vals["lr_schedule"] is not None:
                out[section]["lr_schedule"] = [list(p) for p in vals["lr_schedule"]]
        return out

    @property
    def hash(self):
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def with_overrides(self, overrides):
        """Copy with ``{"section.key": value}`` replaced (values already typed or as text)."""
        values = {s: dict(v) for s, v in self.values.items()}
        for dotted, value in overrides.items():
            section, key = _split_key(dotted)
            if isinstance(value, str):
                value = _parse_value(section, key, value)
            values[section][key] = value
        cfg = ExperimentConfig(values, self.source)
        validate(cfg)
        return cfg

    def to_ini(self):
        lines = []
        for section, vals in self.values.items():
            lines.append(f"[{section}]")
            for k, v in vals.items():
                lines.append(f"{k} = {_format_value(section, k, v)}")
            lines.append("")
        return "\n".join(lines)


def _format_value(section, key, v):
    if v is None:
        return ""
    if (section, key) == ("train", "lr_schedule"):
        return ", ".join(f"{e}:{f!r}" for e, f in v)
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _split_key(dotted):
    section, _, key = dotted.rpartition(".")
    if section not in SCHEMA or key not in SCHEMA[section]:
        raise ConfigError(f"unknown configuration key {dotted!r}")
    return section, key


def _parse_value(section, key, text):
    parser = SCHEMA[section][key][0]
    try:
        return parser(text)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {text!r} ({exc})") from None


def parse_config_text(text, source="<string>"):
    cp = _new_parser()
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, text_value in cp.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            values[section][key] = _parse_value(section, key, text_value)
    cfg = ExperimentConfig(values, source)
    validate(cfg)
    return cfg


def load_config(path):
    """Read and validate an INI file.  A missing file raises ``FileNotFoundError``."""
    path = os.fspath(path)
    with open(path) as fh:
        text = fh.read()
    return parse_config_text(text, source=path)


def default_config():
    return parse_config_text("", source="<defaults>")


def validate(cfg):
    """Build every component once so invalid values surface as ``ConfigError``."""
    try:
        synthetic_spec(cfg)
        augmentation_spec(cfg)
        imbalance_rule(cfg)
        mlp_spec(cfg)
        train_config(cfg)
        probe_config(cfg)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    if cfg["encoder"]["layer_widths"][0] != cfg["data"]["dim"]:
        raise ConfigError("encoder input width must equal data dim")
    if cfg["eval"]["knn_k"] < 1:
        raise ConfigError("knn_k must be positive")


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def synthetic_spec(cfg, samples_per_class=None):
    d = cfg["data"]
    n = d["samples_per_class"] if samples_per_class is None else samples_per_class
    if d["layout"] == "circle":
        return SyntheticSpec.on_circle(d["n_classes"], d["dim"], d["radius"], n, d["within_class_std"])
    if d["layout"] == "simplex":
        return SyntheticSpec.on_simplex(d["n_classes"], d["dim"], d["radius"], n, d["within_class_std"])
    raise ValueError(f"unknown data layout {d['layout']!r}")


def augmentation_spec(cfg):
    a = cfg["data.augment"]
    return AugmentationSpec(a["noise_std"], a["rotation_max_angle"], a["scale_jitter"])


def imbalance_rule(cfg):
    r = cfg["data.imbalance"]
    return ImbalanceRule(r["kind"], r["rho"])


def mlp_spec(cfg):
    e = cfg["encoder"]
    return MlpSpec(e["layer_widths"], e["activation"])


def loss_spec(cfg):
    t = cfg["train"]
    if t["cost"] == "rbf":
        cost = CostKind.rbf(t["cost_t_rbf"])
    else:
        cost = CostKind(t["cost"])
    return LossSpec(
        name=t["loss"],
        temps=Temperatures(t["t_pos"], t["t_neg"], t["tau"]),
        cost=cost,
        polarity=WeightPolarity(t["pos_sign"], t["neg_sign"]),
        flow=GradFlow(t["through_pos_weights"], t["through_neg_weights"]),
        margin=t["margin"],
        t_rbf=t["t_rbf"],
        align_exponent=t["align_exponent"],
    )


def train_config(cfg):
    t = cfg["train"]
    return TrainConfig(
        loss=loss_spec(cfg), M=t["M"], K=t["K"], epochs=t["epochs"], lr=t["lr"],
        lr_schedule=t["lr_schedule"], sgd_momentum=t["sgd_momentum"], weight_decay=t["weight_decay"],
        mode=t["mode"], queue_size=t["queue_size"], ema=t["ema"], seed=cfg.seed,
        val_fraction=t["val_fraction"], record_timing=t["record_timing"],
    )


def probe_config(cfg):
    e = cfg["eval"]
    return ProbeConfig(e["epochs"], e["lr"], e["l2_reg"], e["batch_size"])


def training_dataset(cfg):
    """Generated data (stream ``data``), then the imbalance rule (stream ``imbalance``)."""
    ds = generate(synthetic_spec(cfg), make_rng(cfg.seed, "data"))
    return subsample_imbalanced(ds, imbalance_rule(cfg), make_rng(cfg.seed, "imbalance"))


def probe_datasets(cfg):
    """Fresh balanced train/test sets for the linear and k-NN probes."""
    spec = synthetic_spec(cfg, cfg["data"]["probe_samples_per_class"])
    return (generate(spec, make_rng(cfg.seed, "probe_train")),
            generate(spec, make_rng(cfg.seed, "probe_test")))


# ---------------------------------------------------------------------------
# sweep grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Grid:
    """Cartesian product of ``axes`` (ordered ``(dotted_key, values)``) times ``seeds``."""

    axes: tuple
    seeds: tuple

    def points(self):
        combos = [{}]
        for key, vals in self.axes:
            combos = [dict(c, **{key: v}) for c in combos for v in vals]
        return combos


def load_grid(path, base_seed=0):
    """``[grid]`` section with comma-separated value lists per sweepable key,
    plus an optional ``seeds`` list (defaults to the config seed)."""
    path = os.fspath(path)
    with open(path) as fh:
        text = fh.read()
    cp = _new_parser()
    try:
        cp.read_string(text, source=path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if cp.sections() != ["grid"]:
        raise ConfigError(f"{path}: expected exactly one [grid] section")
    axes, seeds = [], (base_seed,)
    for key, raw in cp.items("grid"):
        items = [v.strip() for v in raw.split(",") if v.strip()]
        if not items:
            raise ConfigError(f"{path}: empty value list for {key!r}")
        if key == "seeds":
            try:
                seeds = tuple(int(v) for v in items)
            except ValueError:
                raise ConfigError(f"{path}: seeds must be integers") from None
            continue
        if key not in SWEEPABLE:
            raise ConfigError(f"{path}: {key!r} is not sweepable; choose from {SWEEPABLE}")
        section, k = _split_key(key)
        axes.append((key, tuple(_parse_value(section, k, v) for v in items)))
    return Grid(tuple(axes), seeds)
