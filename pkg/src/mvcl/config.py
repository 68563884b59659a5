"""Flat ``key = value`` run configuration.

The file is INI-style without sections (a ``[run]`` header is optional);
``#`` starts a comment. Unknown keys are rejected. Every command writes
the fully resolved configuration next to its outputs so the run can be
repeated with ``--config <snapshot>``.

Key schema (type, default):

=================  ==========  =====================================
seed               int         0
preset             str         full  (full | tiny | reduced)
planes             int list    1,2,3,4,5,6,7,8,9
out_size           int         224
mode               str         cmc_inclusive  (or as_written)
tau                float       0.07
base_lr            float       0.1
momentum           float       0.9
weight_decay       float       1e-4
epochs             int         240
decay_epochs       int list    120,160,200
decay_factor       float       0.1
batch_size         int         64
log_every          int         1
checkpoint_every   int         0  (epochs; 0 = final only)
dataset_mode       str         lidc  (lidc | lndb | tianchi | synthetic)
crop_kind          str         fixed_nodule  (or diameter_plus_margin)
crop_fixed_mm      float       64
crop_margin_mm     float       20
hu_lo, hu_hi       float       -1000, 400
test_fraction      float       0.2
fraction           float       1.0
head_epochs        int         100
head_lr            float       0.01
head_batch_size    int         32
finetune_epochs    int         20
finetune_lr        float       0.01
diagnostic_lesions int         100
threads            int         0  (0 = library default)
n_per_class        int         100
side               int         32
manifest, views, checkpoint, out   path   (empty = unset)
=================  ==========  =====================================
"""
from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError


def _ints(text):
    if isinstance(text, (list, tuple)):
        return tuple(int(t) for t in text)
    return tuple(int(t) for t in str(text).replace(" ", "").split(",") if t)


@dataclass
class RunConfig:
    seed: int = 0
    preset: str = "full"
    planes: tuple = (1, 2, 3, 4, 5, 6, 7, 8, 9)
    out_size: int = 224
    mode: str = "cmc_inclusive"
    tau: float = 0.07
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 240
    decay_epochs: tuple = (120, 160, 200)
    decay_factor: float = 0.1
    batch_size: int = 64
    log_every: int = 1
    checkpoint_every: int = 0
    dataset_mode: str = "lidc"
    crop_kind: str = "fixed_nodule"
    crop_fixed_mm: float = 64.0
    crop_margin_mm: float = 20.0
    hu_lo: float = -1000.0
    hu_hi: float = 400.0
    test_fraction: float = 0.2
    fraction: float = 1.0
    head_epochs: int = 100
    head_lr: float = 0.01
    head_batch_size: int = 32
    finetune_epochs: int = 20
    finetune_lr: float = 0.01
    diagnostic_lesions: int = 100
    threads: int = 0
    n_per_class: int = 100
    side: int = 32
    manifest: str = ""
    views: str = ""
    checkpoint: str = ""
    out: str = "runs"

    def update(self, values: dict, base_dir: Path = None):
        types = {f.name: f.type for f in fields(self)}
        for key, raw in values.items():
            key = key.strip().replace("-", "_")
            if key not in types:
                raise ConfigError(f"unknown configuration key {key!r}")
            default = getattr(type(self), key, None)
            try:
                if isinstance(default, tuple):
                    val = _ints(raw)
                elif isinstance(default, bool):
                    val = str(raw).lower() in ("1", "true", "yes")
                elif isinstance(default, int):
                    val = int(raw)
                elif isinstance(default, float):
                    val = float(raw)
                else:
                    val = str(raw).strip()
                    if key in ("manifest", "views", "checkpoint", "out") and val and base_dir is not None:
                        val = str((base_dir / val).resolve()) if not Path(val).is_absolute() else val
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc
            setattr(self, key, val)
        return self

    def resolve_paths(self):
        for key in ("manifest", "views", "checkpoint", "out"):
            val = getattr(self, key)
            if val:
                setattr(self, key, str(Path(val).resolve()))
        return self

    def to_text(self) -> str:
        lines = ["# resolved run configuration", "[run]"]
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, tuple):
                val = ",".join(str(v) for v in val)
            lines.append(f"{f.name} = {val}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_text())
        return path


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    if not re.search(r"^\s*\[", text, flags=re.MULTILINE):
        text = "[run]\n" + text
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    extra = [s for s in parser.sections() if s != "run"]
    if extra:
        raise ConfigError(f"{path}: unexpected sections {extra}; the schema is flat")
    return dict(parser["run"]) if parser.has_section("run") else {}


def load_config(path=None, overrides=None) -> RunConfig:
    cfg = RunConfig()
    if path:
        cfg.update(read_config_file(path), base_dir=Path(path).resolve().parent)
    if overrides:
        cfg.update(overrides)
    return cfg.resolve_paths()
