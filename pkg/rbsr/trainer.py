"""
This module contains the training data pipeline and the three training procedures.

One epoch is `max(1, len(dataset) // batch)` iterations. Every procedure writes a CSV log with
one row per epoch and atomic checkpoints into its output directory.
"""

import csv
import dataclasses
import enum
import logging
import os
import time
import typing

import annotated_types
import numpy as np
import pydantic
import tqdm

from . import config, imageio, losses
from .models import ModelConfigException, ModelGraph
from .nn import checkpoint
from .nn.optim import Adam, AdamConfig
from .utils import RbsrException

logger = logging.getLogger("rbsr.trainer")


class ManifestException(RbsrException):
    pass


class PairGeometryException(RbsrException):
    pass


class MissingCheckpointException(RbsrException):
    pass


class EntryKind(str, enum.Enum):
    REAL_PAIR = "real_pair"
    SYNTHETIC_PAIR = "synthetic_pair"
    IDENTITY_BICUBIC = "identity_bicubic"


class ManifestEntry(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True, extra="forbid")

    kind: EntryKind
    input_path: str
    target_path: str

    @pydantic.model_validator(mode="after")
    def identity_is_same_file(self):
        if self.kind == EntryKind.IDENTITY_BICUBIC and self.input_path != self.target_path:
            raise ValueError("identity_bicubic entries need input_path == target_path")
        return self


def read_manifest(path: str) -> typing.List[ManifestEntry]:
    """
    Read a tab-separated `kind\\tinput_path\\ttarget_path` manifest. Relative paths are resolved
    against the manifest's directory; blank lines and `#` comments are skipped.

    Raises:
        ManifestException: with the line number of the first bad line.
    """
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path, encoding="utf-8") as file:
        for lineno, line in enumerate(file, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ManifestException(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}")
            kind, input_path, target_path = fields
            try:
                entries.append(
                    ManifestEntry(
                        kind=kind,
                        input_path=os.path.normpath(os.path.join(base, input_path)),
                        target_path=os.path.normpath(os.path.join(base, target_path)),
                    )
                )
            except pydantic.ValidationError as e:
                raise ManifestException(f"{path}:{lineno}: {e.errors()[0]['msg']}") from e
    logger.debug(f"Read {len(entries)} manifest entries from {path}")
    return entries


def write_manifest(path: str, entries: typing.Sequence[ManifestEntry]):
    base = os.path.dirname(os.path.abspath(path))
    os.makedirs(base, exist_ok=True)
    with open(path, "w", encoding="utf-8") as file:
        for entry in entries:
            file.write(
                f"{entry.kind.value}\t{os.path.relpath(entry.input_path, base)}\t"
                f"{os.path.relpath(entry.target_path, base)}\n"
            )


class TrainSchedule(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True, extra="forbid")

    phase1_epochs: typing.Annotated[int, annotated_types.Ge(0)] = 1000
    phase2_epochs: typing.Annotated[int, annotated_types.Ge(0)] = 3000
    lr0: typing.Annotated[float, annotated_types.Gt(0)] = config.LOOKALIKE_LR
    decay_every: typing.Annotated[int, annotated_types.Ge(1)] = config.LOOKALIKE_DECAY_EVERY
    decay_factor: typing.Annotated[float, annotated_types.Gt(0)] = config.DECAY_FACTOR
    batch: typing.Annotated[int, annotated_types.Ge(1)] = config.BATCH
    crop: typing.Annotated[int, annotated_types.Ge(1)] = config.CROP
    seed: int = 0
    weights: losses.LossWeights = losses.LossWeights()
    checkpoint_every: typing.Annotated[int, annotated_types.Ge(0)] = 0
    copying: bool = True
    config_hash: str = ""

    @classmethod
    def for_sr(cls, **kwargs) -> "TrainSchedule":
        values = dict(phase1_epochs=4000, phase2_epochs=0, lr0=config.SR_LR, decay_every=config.SR_DECAY_EVERY)
        values.update(kwargs)
        return cls(**values)

    @property
    def total_epochs(self) -> int:
        return self.phase1_epochs + self.phase2_epochs


def lr_at_epoch(epoch: int, schedule: TrainSchedule) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return schedule.lr0 * schedule.decay_factor ** (epoch // schedule.decay_every)


@dataclasses.dataclass
class PairDataset:
    """
    Decoded (input, target) tensors of a manifest. Targets are either the input size
    (look-alike pairs) or exactly four times it (SR pairs); one dataset holds one ratio.
    """

    entries: typing.List[ManifestEntry]
    pairs: typing.List[typing.Tuple[np.ndarray, np.ndarray]]

    def __post_init__(self):
        if len(self.entries) != len(self.pairs):
            raise ManifestException("entries and pairs differ in length")
        ratios = {self._ratio(entry, pair) for entry, pair in zip(self.entries, self.pairs)}
        if len(ratios) > 1:
            raise PairGeometryException(f"manifest mixes target/input ratios {sorted(ratios)}")
        self.ratio = ratios.pop() if ratios else 1

    @staticmethod
    def _ratio(entry: ManifestEntry, pair: typing.Tuple[np.ndarray, np.ndarray]) -> int:
        inp, tgt = pair
        if inp.shape[0] != tgt.shape[0]:
            raise PairGeometryException(f"{entry.input_path}: channel count differs from target")
        for ratio in (1, config.SCALE):
            if tgt.shape[1:] == (ratio * inp.shape[1], ratio * inp.shape[2]):
                return ratio
        raise PairGeometryException(
            f"{entry.input_path}: target {tgt.shape[1:]} is neither 1x nor {config.SCALE}x input {inp.shape[1:]}"
        )

    @classmethod
    def load(cls, entries: typing.Sequence[ManifestEntry]) -> "PairDataset":
        cache: typing.Dict[str, np.ndarray] = {}

        def read(path: str) -> np.ndarray:
            if path not in cache:
                cache[path] = imageio.read_image(path)
            return cache[path]

        return cls(list(entries), [(read(e.input_path), read(e.target_path)) for e in entries])

    def __len__(self) -> int:
        return len(self.entries)

    def subset(self, keep: typing.Callable[[ManifestEntry], bool]) -> "PairDataset":
        chosen = [i for i, entry in enumerate(self.entries) if keep(entry)]
        return PairDataset([self.entries[i] for i in chosen], [self.pairs[i] for i in chosen])


def sample_batch(
    dataset: typing.Union[PairDataset, typing.Sequence[ManifestEntry]],
    crop: int,
    batch: int,
    rng: np.random.Generator,
) -> typing.Tuple[np.ndarray, np.ndarray, typing.List[EntryKind]]:
    """
    Draw `batch` entries uniformly with replacement and one random crop per entry. The target crop
    covers the same area as the input crop (scaled by the dataset ratio).

    Raises:
        PairGeometryException: if a drawn input is smaller than `crop`.
    """
    if not isinstance(dataset, PairDataset):
        dataset = PairDataset.load(dataset)
    if len(dataset) == 0:
        raise ManifestException("cannot sample from an empty manifest")
    r = dataset.ratio
    inputs, targets, kinds = [], [], []
    for index in rng.integers(len(dataset), size=batch):
        inp, tgt = dataset.pairs[index]
        _, h, w = inp.shape
        if h < crop or w < crop:
            raise PairGeometryException(f"{dataset.entries[index].input_path}: {h}x{w} smaller than crop {crop}")
        y, x = int(rng.integers(h - crop + 1)), int(rng.integers(w - crop + 1))
        inputs.append(inp[:, y : y + crop, x : x + crop])
        targets.append(tgt[:, r * y : r * (y + crop), r * x : r * (x + crop)])
        kinds.append(dataset.entries[index].kind)
    return np.stack(inputs), np.stack(targets), kinds


def iterations_per_epoch(dataset_size: int, batch: int) -> int:
    return max(1, dataset_size // batch)


def load_checkpoint_into(model: ModelGraph, path: str) -> ModelGraph:
    """
    Raises:
        MissingCheckpointException: if `path` does not exist.
    """
    if not os.path.isfile(path):
        raise MissingCheckpointException(f"checkpoint not found: {path}")
    model.load_state(checkpoint.checkpoint_read(path))
    logger.info(f"Loaded {model.role} weights from {path}")
    return model


class TrainingLog:
    """
    CSV log, one row per epoch, flushed after each row.

    A non-empty `config_hash` is also written to a `.sha256` file next to the log.
    """

    def __init__(self, path: str, config_hash: str = ""):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        self.path = path
        self.rows: typing.List[typing.Dict[str, float]] = []
        self._file = open(path, "w", newline="", encoding="utf-8")
        self._writer = csv.DictWriter(self._file, fieldnames=config.LOG_HEADER)
        self._writer.writeheader()
        self.hash_path = None
        if config_hash:
            self.hash_path = os.path.splitext(path)[0] + ".sha256"
            with open(self.hash_path, "w", encoding="utf-8") as file:
                file.write(f"{config_hash}  run-config\n")
            logger.info(f"Run config {config_hash} recorded in {self.hash_path}")

    def append(self, **row: float):
        full = {key: row.get(key, 0.0) for key in config.LOG_HEADER}
        self.rows.append(full)
        self._writer.writerow({k: (v if k == "epoch" else f"{v:.8g}") for k, v in full.items()})
        self._file.flush()

    def close(self):
        self._file.close()


@dataclasses.dataclass
class TrainResult:
    model: ModelGraph
    checkpoint_path: str
    log_path: str
    rows: typing.List[typing.Dict[str, float]]
    discriminator: typing.Optional[ModelGraph] = None


def _l1_step(model: ModelGraph, optimizer: Adam, x: np.ndarray, y: np.ndarray, lr: float) -> float:
    model.zero_grad()
    pred, trace = model.forward(x)
    value, dpred = losses.l1_loss(pred, y)
    model.backward(trace, dpred)
    optimizer.step(lr)
    return value


def discriminator_step(
    discriminator: ModelGraph, optimizer: Adam, real: np.ndarray, fake: np.ndarray, lr: float
) -> losses.AdversarialLosses:
    """
    One discriminator update on a batch of real (bicubic) and fake (generated) crops.
    """
    discriminator.zero_grad()
    d_real, real_trace = discriminator.forward(real)
    d_fake, fake_trace = discriminator.forward(fake)
    adv = losses.adversarial_losses(d_real, d_fake)
    discriminator.backward(real_trace, adv.grad_d_real)
    discriminator.backward(fake_trace, adv.grad_d_fake)
    optimizer.step(lr)
    return adv


def discriminator_accuracy(discriminator: ModelGraph, real: np.ndarray, fake: np.ndarray) -> float:
    d_real, _ = discriminator.forward(real)
    d_fake, _ = discriminator.forward(fake)
    correct = np.count_nonzero(d_real > 0.5) + np.count_nonzero(d_fake < 0.5)
    return correct / (d_real.size + d_fake.size)


def _checkpoint(model: ModelGraph, path: str):
    checkpoint.checkpoint_write(model.params.values(), path)


def _fit_l1(
    model: ModelGraph, dataset: PairDataset, schedule: TrainSchedule, out_dir: str, name: str
) -> TrainResult:
    if len(dataset) == 0:
        raise ManifestException(f"{name}: empty training manifest")
    if dataset.ratio != config.SCALE:
        raise PairGeometryException(f"{name}: targets must be {config.SCALE}x the inputs")
    optimizer = Adam(model.parameters(), AdamConfig(lr=schedule.lr0))
    rng = np.random.default_rng(schedule.seed)
    iterations = iterations_per_epoch(len(dataset), schedule.batch)
    log = TrainingLog(os.path.join(out_dir, f"{name}_log.csv"), schedule.config_hash)
    logger.info(f"Training {name}: {schedule.total_epochs} epochs x {iterations} iterations, batch {schedule.batch}")
    try:
        for epoch in tqdm.tqdm(range(schedule.total_epochs), desc=name, disable=None):
            lr = lr_at_epoch(epoch, schedule)
            start = time.perf_counter()
            l1 = np.mean(
                [
                    _l1_step(model, optimizer, *sample_batch(dataset, schedule.crop, schedule.batch, rng)[:2], lr)
                    for _ in range(iterations)
                ]
            )
            log.append(epoch=epoch, lr=lr, l1=l1, total=l1, seconds=time.perf_counter() - start)
            if schedule.checkpoint_every and (epoch + 1) % schedule.checkpoint_every == 0:
                _checkpoint(model, os.path.join(out_dir, f"{name}_epoch{epoch + 1}.ckpt"))
    finally:
        log.close()
    path = os.path.join(out_dir, f"{name}.ckpt")
    _checkpoint(model, path)
    return TrainResult(model, path, log.path, log.rows)


def train_sr(model: ModelGraph, dataset: PairDataset, schedule: TrainSchedule, out_dir: str) -> TrainResult:
    """
    Single-phase L1 training of the SR generator on bicubic LR/HR pairs for `schedule.total_epochs`.
    """
    return _fit_l1(model, dataset, schedule, out_dir, "sr")


def train_e2e_baseline(model: ModelGraph, dataset: PairDataset, schedule: TrainSchedule, out_dir: str) -> TrainResult:
    return _fit_l1(model, dataset, schedule, out_dir, "e2e")


def train_lookalike(
    generator: ModelGraph,
    discriminator: ModelGraph,
    extractor: losses.FeatureExtractor,
    dataset: PairDataset,
    schedule: TrainSchedule,
    out_dir: str,
) -> TrainResult:
    """
    Two-phase look-alike training.

    Phase 1 trains the generator with the L1 loss alone. Phase 2 alternates one discriminator
    update and one generator update per batch, the generator minimizing the weighted sum of
    L1, bicubic perceptual and adversarial losses. The discriminator's real samples are the
    identity_bicubic targets of the manifest. With `schedule.copying` off, identity entries are
    excluded from the generator's training pairs.

    Raises:
        ManifestException: if the manifest has no identity_bicubic entries.
        FrozenExtractorException: if the extractor weights change.
    """
    if dataset.ratio != 1:
        raise PairGeometryException("look-alike pairs must have input and target of equal size")
    real_pool = dataset.subset(lambda e: e.kind == EntryKind.IDENTITY_BICUBIC)
    if len(real_pool) == 0:
        raise ManifestException("look-alike manifest has no identity_bicubic entries for the discriminator")
    pairs = dataset if schedule.copying else dataset.subset(lambda e: e.kind != EntryKind.IDENTITY_BICUBIC)
    if len(pairs) == 0:
        raise ManifestException("no training pairs left after removing identity entries")
    if schedule.phase2_epochs:
        first_input, _ = real_pool.pairs[0]
        try:
            discriminator.forward(np.zeros((1, first_input.shape[0], schedule.crop, schedule.crop), dtype=np.float32))
        except RbsrException as e:
            raise ModelConfigException(f"discriminator does not accept {schedule.crop}x{schedule.crop} crops: {e}") from e

    optimizer_g = Adam(generator.parameters(), AdamConfig(lr=schedule.lr0))
    optimizer_d = Adam(discriminator.parameters(), AdamConfig(lr=schedule.lr0))
    rng = np.random.default_rng(schedule.seed)
    iterations = iterations_per_epoch(len(pairs), schedule.batch)
    w = schedule.weights
    log = TrainingLog(os.path.join(out_dir, "lookalike_log.csv"), schedule.config_hash)
    logger.info(
        f"Training look-alike generator: {schedule.phase1_epochs}+{schedule.phase2_epochs} epochs x "
        f"{iterations} iterations, copying={'on' if schedule.copying else 'off'}, {len(real_pool)} real images"
    )
    try:
        for epoch in tqdm.tqdm(range(schedule.total_epochs), desc="lookalike", disable=None):
            lr = lr_at_epoch(epoch, schedule)
            start = time.perf_counter()
            totals = np.zeros(5)  # l1, perc, adv_g, adv_d, total
            for _ in range(iterations):
                x, y, _ = sample_batch(pairs, schedule.crop, schedule.batch, rng)
                if epoch < schedule.phase1_epochs:
                    l1 = _l1_step(generator, optimizer_g, x, y, lr)
                    totals += (l1, 0.0, 0.0, 0.0, w.alpha * l1)
                    continue
                real, _, _ = sample_batch(real_pool, schedule.crop, schedule.batch, rng)
                fake, _ = generator.forward(x)
                adv = discriminator_step(discriminator, optimizer_d, real, fake, lr)

                generator.zero_grad()
                pred, trace = generator.forward(x)
                l1, d_l1 = losses.l1_loss(pred, y)
                perc, d_perc = losses.bicubic_perceptual_loss(pred, y, extractor)
                d_out, d_trace = discriminator.forward(pred)
                adv_g, d_adv = losses.generator_loss(d_out)
                d_adv_pred = discriminator.backward(d_trace, w.gamma * d_adv, param_grads=False)
                generator.backward(trace, w.alpha * d_l1 + w.beta * d_perc + d_adv_pred)
                optimizer_g.step(lr)
                totals += (l1, perc, adv_g, adv.loss_d, losses.total_loss(l1, perc, adv_g, w))
            extractor.verify()
            l1, perc, adv_g, adv_d, total = totals / iterations
            log.append(
                epoch=epoch, lr=lr, l1=l1, perc=perc, adv_g=adv_g, adv_d=adv_d, total=total,
                seconds=time.perf_counter() - start,
            )
            if schedule.checkpoint_every and (epoch + 1) % schedule.checkpoint_every == 0:
                _checkpoint(generator, os.path.join(out_dir, f"lookalike_epoch{epoch + 1}.ckpt"))
                _checkpoint(discriminator, os.path.join(out_dir, f"discriminator_epoch{epoch + 1}.ckpt"))
    finally:
        log.close()
    path = os.path.join(out_dir, "lookalike.ckpt")
    _checkpoint(generator, path)
    _checkpoint(discriminator, os.path.join(out_dir, "discriminator.ckpt"))
    return TrainResult(generator, path, log.path, log.rows, discriminator)
