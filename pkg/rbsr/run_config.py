"""
Run configuration: INI text with the sections below, parsed strictly. Every key is optional;
defaults are the full-scale training values, or a coherent shrunken set with `desk_scale`.

    [generator]      n_res_blocks, channels
    [sr]             n_res_blocks, channels
    [e2e]            n_res_blocks, channels
    [discriminator]  base_channels, n_stages, dense_width, input_size
    [schedule]       look-alike schedule: phase1_epochs, phase2_epochs, lr0, decay_every,
                     decay_factor, batch, crop, checkpoint_every, copying
    [sr_schedule]    SR and end-to-end schedule, same keys
    [loss]           alpha, beta, gamma, tap_block
    [paths]          manifests, checkpoints and output_dir, relative to the config file
    [run]            seed, deterministic, threads
"""

import logging
import os
import typing

import annotated_types
import iniconfig
import pydantic

from . import config
from .losses import LossWeights
from .models import DiscriminatorConfig, GeneratorConfig, SRConfig
from .trainer import TrainSchedule
from .utils import RbsrException, config_hash

logger = logging.getLogger("rbsr.run_config")


class ConfigException(RbsrException):
    def __init__(self, message: str, lineno: typing.Optional[int] = None, path: typing.Optional[str] = None):
        self.lineno = lineno
        location = f"{path or '<config>'}:{lineno}: " if lineno else ""
        super().__init__(f"{location}{message}")


class _Section(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True, extra="forbid")


class ScheduleSection(_Section):
    phase1_epochs: typing.Annotated[int, annotated_types.Ge(0)] = 1000
    phase2_epochs: typing.Annotated[int, annotated_types.Ge(0)] = 3000
    lr0: typing.Annotated[float, annotated_types.Gt(0)] = config.LOOKALIKE_LR
    decay_every: typing.Annotated[int, annotated_types.Ge(1)] = config.LOOKALIKE_DECAY_EVERY
    decay_factor: typing.Annotated[float, annotated_types.Gt(0)] = config.DECAY_FACTOR
    batch: typing.Annotated[int, annotated_types.Ge(1)] = config.BATCH
    crop: typing.Annotated[int, annotated_types.Ge(1)] = config.CROP
    checkpoint_every: typing.Annotated[int, annotated_types.Ge(0)] = 0
    copying: bool = True


class LossSection(LossWeights):
    tap_block: typing.Optional[typing.Annotated[int, annotated_types.Ge(1)]] = None

    @property
    def weights(self) -> LossWeights:
        return LossWeights(alpha=self.alpha, beta=self.beta, gamma=self.gamma)


class PathsSection(_Section):
    sr_manifest: typing.Optional[str] = None
    lookalike_manifest: typing.Optional[str] = None
    e2e_manifest: typing.Optional[str] = None
    sr_checkpoint: typing.Optional[str] = None
    lookalike_checkpoint: typing.Optional[str] = None
    e2e_checkpoint: typing.Optional[str] = None
    output_dir: str = "runs"


class RunSection(_Section):
    seed: int = 0
    deterministic: bool = False
    threads: typing.Annotated[int, annotated_types.Ge(1)] = 1


SECTIONS: typing.Dict[str, typing.Type[pydantic.BaseModel]] = {
    "generator": GeneratorConfig,
    "sr": SRConfig,
    "e2e": SRConfig,
    "discriminator": DiscriminatorConfig,
    "schedule": ScheduleSection,
    "sr_schedule": ScheduleSection,
    "loss": LossSection,
    "paths": PathsSection,
    "run": RunSection,
}

FULL_SCALE: typing.Dict[str, typing.Dict[str, typing.Any]] = {
    "e2e": dict(n_res_blocks=config.E2E_BLOCKS),
    "sr_schedule": dict(
        phase1_epochs=4000, phase2_epochs=0, lr0=config.SR_LR, decay_every=config.SR_DECAY_EVERY
    ),
}

# every decay period keeps its share of the run; crops and widths shrink for CPU training
DESK_SCALE: typing.Dict[str, typing.Dict[str, typing.Any]] = {
    "generator": dict(n_res_blocks=1, channels=8),
    "sr": dict(n_res_blocks=2, channels=8),
    "e2e": dict(n_res_blocks=3, channels=8),
    "discriminator": dict(base_channels=8, n_stages=2, dense_width=32, input_size=32),
    "schedule": dict(phase1_epochs=30, phase2_epochs=90, decay_every=24, batch=4, crop=32),
    "sr_schedule": dict(
        phase1_epochs=200, phase2_epochs=0, lr0=config.SR_LR, decay_every=50, batch=4, crop=32
    ),
}


class RunConfig(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True, extra="forbid")

    generator: GeneratorConfig = GeneratorConfig()
    sr: SRConfig = SRConfig()
    e2e: SRConfig = SRConfig(**FULL_SCALE["e2e"])
    discriminator: DiscriminatorConfig = DiscriminatorConfig()
    schedule: ScheduleSection = ScheduleSection()
    sr_schedule: ScheduleSection = ScheduleSection(**FULL_SCALE["sr_schedule"])
    loss: LossSection = LossSection()
    paths: PathsSection = PathsSection()
    run: RunSection = RunSection()
    source: typing.Optional[str] = None
    text_hash: str = ""
    paths_lineno: typing.Optional[int] = None

    def lookalike_schedule(self, seed: typing.Optional[int] = None) -> TrainSchedule:
        return TrainSchedule(
            **self.schedule.model_dump(),
            seed=self.run.seed if seed is None else seed,
            weights=self.loss.weights,
            config_hash=self.text_hash,
        )

    def sr_train_schedule(self, seed: typing.Optional[int] = None) -> TrainSchedule:
        return TrainSchedule(
            **self.sr_schedule.model_dump(),
            seed=self.run.seed if seed is None else seed,
            weights=self.loss.weights,
            config_hash=self.text_hash,
        )

    def require_path(self, name: str) -> str:
        """
        Raises:
            ConfigException: if `paths.<name>` is not set.
        """
        value = getattr(self.paths, name)
        if not value:
            raise ConfigException(f"missing required path [paths] {name}", self.paths_lineno or 1, self.source)
        return value


def _defaults(section: str, desk_scale: bool, base: str) -> typing.Dict[str, typing.Any]:
    values = dict(FULL_SCALE.get(section, {}))
    if desk_scale:
        values.update(DESK_SCALE.get(section, {}))
    if section == "paths":
        values["output_dir"] = os.path.join(base, PathsSection().output_dir)
    return values


def parse_config(text: str, path: typing.Optional[str] = None, desk_scale: bool = False) -> RunConfig:
    """
    Parse run-configuration text. Paths in [paths] are resolved against the directory of `path`
    (the working directory when `path` is None).

    Raises:
        ConfigException: on syntax errors, unknown sections or keys and invalid values, with the line number.
    """
    try:
        ini = iniconfig.IniConfig(path or "<config>", data=text)
    except iniconfig.ParseError as e:
        raise ConfigException(e.msg, e.lineno + 1, path) from e
    base = os.path.dirname(os.path.abspath(path)) if path else os.getcwd()

    values: typing.Dict[str, typing.Any] = {}
    for section in ini:
        model = SECTIONS.get(section.name)
        if model is None:
            raise ConfigException(f"unknown section [{section.name}]", ini.lineof(section.name), path)
        given = {}
        for key, raw in section.items():
            if key not in model.model_fields:
                raise ConfigException(f"unknown key {key!r} in [{section.name}]", section.lineof(key), path)
            given[key] = os.path.normpath(os.path.join(base, raw)) if section.name == "paths" else raw
        try:
            values[section.name] = model(**{**_defaults(section.name, desk_scale, base), **given})
        except pydantic.ValidationError as e:
            error = e.errors()[0]
            key = error["loc"][0] if error["loc"] else None
            lineno = section.lineof(key) if key in given else ini.lineof(section.name)
            raise ConfigException(f"[{section.name}] {key}: {error['msg']}", lineno, path) from e
    for name, model in SECTIONS.items():
        if name not in values:
            values[name] = model(**_defaults(name, desk_scale, base))

    run_config = RunConfig(
        **values, source=path, text_hash=config_hash(text), paths_lineno=ini.lineof("paths") if "paths" in ini else None
    )
    logger.debug(f"Parsed run config {path or '<text>'} (hash {run_config.text_hash}, desk_scale={desk_scale})")
    return run_config


def load_config(path: typing.Optional[str], desk_scale: bool = False) -> RunConfig:
    if path is None:
        return parse_config("", None, desk_scale)
    try:
        with open(path, encoding="utf-8") as file:
            text = file.read()
    except OSError as e:
        raise ConfigException(f"cannot read config {path}: {e}") from e
    return parse_config(text, path, desk_scale)
