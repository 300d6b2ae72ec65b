"""TOML configuration: one file with nested sections, overridable by dotted command-line flags.

Sections: [data], [masks], [model] (+ [model.nab]), [discriminator], [extractor],
[train] (+ [train.loss_weights], [train.ats]) and [eval]. Unknown keys are rejected.
"""

from __future__ import annotations

import difflib
import types
import typing
from pathlib import Path
from typing import Any

import tomli
import tomli_w
from pydantic import BaseModel, ConfigDict, Field
from pydantic import ValidationError as PydanticValidationError

from arbinpaint.adversarial import DiscriminatorConfig, ExtractorConfig
from arbinpaint.dataset import CropPolicy, SplitSpec
from arbinpaint.errors import ConfigError
from arbinpaint.evaluation import EvalConfig
from arbinpaint.generator import GeneratorConfig
from arbinpaint.maskgen import MaskSpec
from arbinpaint.training import TrainConfig
from utils.log_util import logger


def _default_splits() -> list[SplitSpec]:
    # 1024x1024 sources; only the 16:9 split keeps one full axis
    return [
        SplitSpec(name="1:1", target_h=512, target_w=512, crop_policy=CropPolicy.CENTER),
        SplitSpec(name="3:4", target_h=384, target_w=512, crop_policy=CropPolicy.CENTER),
        SplitSpec(name="4:3", target_h=512, target_w=384, crop_policy=CropPolicy.CENTER),
        SplitSpec(name="16:9", target_h=1024, target_w=576),
    ]


class DataConfig(BaseModel):
    train_manifest: Path | None = None
    split_sources: Path | None = None
    split_dir: Path = Path("data/splits")
    splits: list[SplitSpec] = Field(default_factory=_default_splits)
    split_mask_seed: int = 0
    mask_dir: Path = Path("data/masks")
    mask_count: int = Field(default=1000, ge=1)
    mask_height: int = Field(default=512, ge=8)
    mask_width: int = Field(default=512, ge=8)

    model_config = ConfigDict(extra="forbid")


class Config(BaseModel):
    data: DataConfig = Field(default_factory=DataConfig)
    masks: MaskSpec = Field(default_factory=MaskSpec)
    model: GeneratorConfig = Field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = Field(default_factory=DiscriminatorConfig)
    extractor: ExtractorConfig = Field(default_factory=ExtractorConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    model_config = ConfigDict(extra="forbid")


def _model_class(annotation: Any) -> type[BaseModel] | None:
    if isinstance(annotation, type) and issubclass(annotation, BaseModel):
        return annotation
    if isinstance(annotation, types.UnionType) or typing.get_origin(annotation) is typing.Union:
        for arg in typing.get_args(annotation):
            found = _model_class(arg)
            if found is not None:
                return found
    return None


def check_keys(data: dict[str, Any], model: type[BaseModel] = Config, prefix: str = "") -> None:
    """Raises ConfigError for the first key `model` does not define, suggesting the closest valid key."""
    fields = model.model_fields
    for key, value in data.items():
        dotted = f"{prefix}{key}"
        if key not in fields:
            close = difflib.get_close_matches(key, list(fields), n=1)
            hint = f"; did you mean {prefix}{close[0]}?" if close else ""
            raise ConfigError(f"unknown config key {dotted}{hint}")
        sub = _model_class(fields[key].annotation)
        if sub is not None and isinstance(value, dict):
            check_keys(value, sub, f"{dotted}.")


def parse_value(raw: str) -> Any:
    """TOML scalar or array literal, falling back to the raw string."""
    try:
        return tomli.loads(f"value = {raw}")["value"]
    except tomli.TOMLDecodeError:
        return raw


def parse_overrides(args: list[str]) -> dict[str, Any]:
    """['--train.epochs', '1', '--model.alpha=0'] -> nested dict."""
    tree: dict[str, Any] = {}
    i = 0
    while i < len(args):
        token = args[i]
        if not token.startswith("--") or "." not in token.split("=", 1)[0]:
            raise ConfigError(f"unrecognized argument {token}; overrides look like --section.key value")
        if "=" in token:
            key, raw = token[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(args):
                raise ConfigError(f"override {token} has no value")
            key, raw = token[2:], args[i + 1]
            i += 2
        node = tree
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key} conflicts with another override")
        node[leaf] = parse_value(raw)
    return tree


def split_overrides(argv: list[str]) -> tuple[list[str], list[str]]:
    """Separates dotted --section.key overrides from the rest of argv, wherever they appear."""
    rest: list[str] = []
    overrides: list[str] = []
    i = 0
    while i < len(argv):
        token = argv[i]
        if token.startswith("--") and "." in token.split("=", 1)[0]:
            take = 1 if "=" in token or i + 1 >= len(argv) else 2
            overrides += argv[i : i + take]
            i += take
        else:
            rest.append(token)
            i += 1
    return rest, overrides


def _merge(base: dict[str, Any], over: dict[str, Any]) -> dict[str, Any]:
    out = dict(base)
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_toml(path: str | Path) -> dict[str, Any]:
    with open(path, "rb") as f:
        try:
            return tomli.load(f)
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"{path} is not valid TOML: {e}") from e


def build_config(data: dict[str, Any]) -> Config:
    check_keys(data)
    try:
        return Config.model_validate(data)
    except PydanticValidationError as e:
        problems = "; ".join(f"{'.'.join(map(str, err['loc']))}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"invalid config: {problems}") from e


def parse_config(
    path: str | Path | None = None, overrides: list[str] | dict[str, Any] | None = None, echo: bool = True
) -> Config:
    """Defaults, then the file, then command-line overrides."""
    data = load_toml(path) if path is not None else {}
    if overrides:
        over = parse_overrides(overrides) if isinstance(overrides, list) else overrides
        data = _merge(data, over)
    cfg = build_config(data)
    if echo:
        logger.info(f"Resolved config:\n{dump_config(cfg)}")
    return cfg


def _drop_none(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _drop_none(v) for k, v in value.items() if v is not None}
    if isinstance(value, list):
        return [_drop_none(v) for v in value]
    return value


def dump_config(cfg: Config) -> str:
    return tomli_w.dumps(_drop_none(cfg.model_dump(mode="json")))


def save_config(cfg: Config, path: str | Path) -> None:
    Path(path).write_text(dump_config(cfg))
