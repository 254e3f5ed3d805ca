"""TOML run configuration.

A run file has up to four tables, each optional::

    [model]    # FlagDiTConfig fields, plus `preset` (tiny, S, B, L, XL, 5B, 7B)
    [train]    # TrainConfig fields
    [sampler]  # SamplerConfig fields
    [data]     # SyntheticSpec fields

Unknown tables or keys are rejected with the line they appear on.  Grid
geometry (`channels`, `train_height`, `train_width`, `train_frames`) is
taken from the dataset and may not be set by hand.  :func:`default_toml`
renders every default.
"""

from __future__ import annotations

import re
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import SyntheticSpec
from .model import PRESETS, FlagDiTConfig, preset
from .sampler import SamplerConfig
from .train import TrainConfig

_DERIVED = ("channels", "train_height", "train_width", "train_frames")


class RunConfigError(ValueError):
    pass


def _keys(cls) -> set[str]:
    return {f.name for f in fields(cls)}


_SECTIONS = {
    "model": (_keys(FlagDiTConfig) - set(_DERIVED)) | {"preset"},
    "train": _keys(TrainConfig),
    "sampler": _keys(SamplerConfig),
    "data": _keys(SyntheticSpec),
}


@dataclass
class RunConfig:
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)

    def model_config(self) -> FlagDiTConfig:
        """Model config with geometry filled in from the dataset."""
        opts = dict(self.model)
        name = opts.pop("preset", "tiny")
        if self.data.kind == "gauss2d":
            geom = dict(channels=2, train_height=1, train_width=1, train_frames=1)
            opts.setdefault("patch_size", 1)
        else:
            s = self.data.size
            geom = dict(channels=1, train_height=s, train_width=s, train_frames=1)
        cfg = preset(name, **opts, **geom)
        cfg.train_layout()  # raises on patch-size mismatch
        return cfg


def _locate(text: str) -> dict[tuple[str, str | None], int]:
    """Line numbers of table headers and top-level keys inside each table."""
    where: dict[tuple[str, str | None], int] = {}
    table = None
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if m := re.match(r"\[\s*([^\]]+?)\s*\]", s):
            table = m.group(1).strip().strip('"')
            where.setdefault((table, None), no)
        elif m := re.match(r"""([A-Za-z0-9_\-]+|"[^"]*")\s*=""", s):
            where.setdefault((table or "", m.group(1).strip('"')), no)
    return where


def parse_run_config(text: str, source: str = "<string>") -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise RunConfigError(f"{source}: {exc}") from None
    where = _locate(text)

    def at(table, key=None):
        no = where.get((table, key)) or where.get((table, None))
        return f"{source}:{no}" if no else source

    for table, body in raw.items():
        if table not in _SECTIONS:
            if not isinstance(body, dict):
                raise RunConfigError(f"{at('', table)}: key {table!r} must live inside a table")
            raise RunConfigError(
                f"{at(table)}: unknown table [{table}]; expected one of {sorted(_SECTIONS)}")
        for key in body:
            if key not in _SECTIONS[table]:
                hint = " (derived from [data])" if key in _DERIVED else ""
                raise RunConfigError(f"{at(table, key)}: unknown key {key!r} in [{table}]{hint}")

    model = dict(raw.get("model", {}))
    if "preset" in model and model["preset"] not in PRESETS:
        raise RunConfigError(f"{at('model', 'preset')}: unknown preset {model['preset']!r}")
    try:
        train = TrainConfig(**raw.get("train", {}))
    except (TypeError, ValueError) as exc:
        raise RunConfigError(f"{at('train')}: {exc}") from None
    try:
        sampler = SamplerConfig(**raw.get("sampler", {}))
    except (TypeError, ValueError) as exc:
        raise RunConfigError(f"{at('sampler')}: {exc}") from None
    try:
        data = SyntheticSpec(**raw.get("data", {}))
    except (TypeError, ValueError) as exc:
        raise RunConfigError(f"{at('data')}: {exc}") from None
    run = RunConfig(model, train, sampler, data)
    try:
        run.model_config()
    except (TypeError, ValueError) as exc:
        raise RunConfigError(f"{at('model')}: {exc}") from None
    return run


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise RunConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_run_config(text, str(path))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return f'"{v}"'
    if isinstance(v, (tuple, list)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return repr(v)


def default_toml() -> str:
    """Every configurable key with its default value."""
    base = asdict(FlagDiTConfig())
    out = ["[model]", 'preset = "tiny"']
    out += [f"{k} = {_fmt(v)}" for k, v in base.items()
            if k not in _DERIVED and k not in ("layers", "heads", "hidden")]
    for name, obj in (("train", TrainConfig()), ("sampler", SamplerConfig()),
                      ("data", SyntheticSpec())):
        out += ["", f"[{name}]"]
        for k, v in asdict(obj).items():
            if v is None:
                out.append(f"# {k} = (unset)")
            else:
                out.append(f"{k} = {_fmt(v)}")
    return "\n".join(out) + "\n"
