"""Plain-text configuration: ``key = value`` lines grouped by ``[section]``.

A dotted key like ``lka.d`` outside any section is equivalent to ``d`` inside
``[lka]``.  ``#`` starts a comment.  Every key is checked against the schema;
unknown keys and ill-typed values are reported by name.
"""

from __future__ import annotations

from .network import NetConfig
from .tensor import ValidationError
from .training import TrainSettings

# name -> (type tag, default).  None defaults mean "absent", resolved downstream
# (for instance rank-dependent training defaults).
SCHEMA: dict[str, tuple[str, object]] = {
    "net.rank": ("int", 3),
    "net.in_channels": ("int", 1),
    "net.num_classes": ("int", 2),
    "net.base_channels": ("int", 16),
    "net.skip_count": ("int?", None),
    "lka.K": ("int", 21),
    "lka.d": ("int", 3),
    "lka.deformable": ("bool", True),
    "lka.deform3d_kernel": ("int", 3),
    "train.epochs": ("int", 10),
    "train.batch_size": ("int?", None),
    "train.lr": ("float?", None),
    "train.momentum": ("float", 0.9),
    "train.weight_decay": ("float?", None),
    "train.dice_weight": ("float", 0.6),
    "train.ce_weight": ("float", 0.4),
    "train.early_stop_dice": ("float?", None),
    "train.seed": ("int", 0),
    "synth.n": ("int", 64),
    "synth.dims": ("dims?", None),
    "synth.noise_sigma": ("float", 0.1),
    "resume.epoch": ("int", 0),
}

_SECTIONS = ("net", "lka", "train", "synth", "resume")


def _parse_value(key: str, tag: str, raw: str):
    base = tag.rstrip("?")
    try:
        if base == "int":
            return int(raw, 10)
        if base == "float":
            return float(raw)
        if base == "bool":
            if raw in ("true", "false"):
                return raw == "true"
            raise ValueError
        if base == "dims":
            dims = tuple(int(part.strip(), 10) for part in raw.split(","))
            if not dims:
                raise ValueError
            return dims
    except ValueError:
        pass
    raise ValidationError(f"config key {key!r}: expected {base}, got {raw!r}")


def config_parse(text: str) -> dict[str, object]:
    """Parse config text into a flat dotted-key map with defaults filled in."""
    values: dict[str, object] = {k: default for k, (_, default) in SCHEMA.items()}
    section = ""
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SECTIONS:
                raise ValidationError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ValidationError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if "." not in key:
            if not section:
                raise ValidationError(
                    f"line {lineno}: key {key!r} appears before any [section]"
                )
            key = f"{section}.{key}"
        if key not in SCHEMA:
            raise ValidationError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _parse_value(key, SCHEMA[key][0], raw)
    return values


def config_from_file(path) -> dict[str, object]:
    with open(path, "r", encoding="utf-8") as f:
        return config_parse(f.read())


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def config_dump(values: dict[str, object]) -> str:
    """Render a value map back to canonical config text (stable ordering)."""
    lines = []
    for section in _SECTIONS:
        keys = [k for k in SCHEMA if k.startswith(section + ".")]
        present = [k for k in keys if values.get(k) is not None]
        if not present:
            continue
        lines.append(f"[{section}]")
        for key in present:
            lines.append(f"{key.split('.', 1)[1]} = {_format_value(values[key])}")
        lines.append("")
    return "\n".join(lines)


def net_config_from(values: dict[str, object]) -> NetConfig:
    return NetConfig(
        rank=values["net.rank"],
        in_channels=values["net.in_channels"],
        num_classes=values["net.num_classes"],
        base_channels=values["net.base_channels"],
        K=values["lka.K"],
        d=values["lka.d"],
        deformable=values["lka.deformable"],
        deform3d_kernel=values["lka.deform3d_kernel"],
        skip_count=values["net.skip_count"],
    )


def train_settings_from(values: dict[str, object]) -> TrainSettings:
    return TrainSettings(
        epochs=values["train.epochs"],
        batch_size=values["train.batch_size"],
        lr=values["train.lr"],
        momentum=values["train.momentum"],
        weight_decay=values["train.weight_decay"],
        dice_weight=values["train.dice_weight"],
        ce_weight=values["train.ce_weight"],
        early_stop_dice=values["train.early_stop_dice"],
        seed=values["train.seed"],
    )


def synth_dims(values: dict[str, object]) -> tuple[int, ...]:
    dims = values["synth.dims"]
    if dims is None:
        dims = (32, 32, 16) if values["net.rank"] == 3 else (64, 64)
    if len(dims) != values["net.rank"]:
        raise ValidationError(
            f"synth.dims {dims} does not match net.rank {values['net.rank']}"
        )
    return dims
