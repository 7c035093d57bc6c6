"""He initialisation, patch sampling, RMSprop with momentum and the epoch loop."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .network import Network, backward, flat_grads
from .tensor import PRELU_INIT, ConvKernelBank

log = logging.getLogger(__name__)

SAMPLING_POLICIES = ("uniform_valid", "class_balanced")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    subepochs_per_epoch: int = 20
    samples_per_subepoch: int = 1000
    batch_size: int = 5
    initial_lr: float = 0.001
    momentum: float = 0.6
    lr_halving_period: int = 5
    lr_halving_start_epoch: int = 10
    rmsprop_decay: float = 0.9
    rmsprop_epsilon: float = 1e-6
    patch_size: int = 27
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "subepochs_per_epoch", "samples_per_subepoch", "batch_size",
                     "lr_halving_period", "lr_halving_start_epoch", "patch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if not 0 < self.rmsprop_decay < 1:
            raise ValueError("rmsprop_decay must be in (0, 1)")
        if self.initial_lr < 0 or self.rmsprop_epsilon <= 0:
            raise ValueError("initial_lr must be >= 0 and rmsprop_epsilon > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ValueError(f"unknown train config keys: {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def steps_per_subepoch(self) -> int:
        return math.ceil(self.samples_per_subepoch / self.batch_size)


@dataclass
class SamplerConfig:
    policy: str = "uniform_valid"
    patch_size: int = 27

    def __post_init__(self):
        if self.policy not in SAMPLING_POLICIES:
            raise ValueError(f"unknown sampling policy {self.policy!r}")
        if self.patch_size < 1:
            raise ValueError("patch_size must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ValueError(f"unknown sampler config keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class Subject:
    id: str
    modalities: list[np.ndarray]
    labels: np.ndarray | None = None
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)


def fan_in(bank: ConvKernelBank) -> int:
    return bank.kernel_size ** 3 * bank.in_channels


def he_init(bank: ConvKernelBank, seed: int | np.random.Generator = 0) -> ConvKernelBank:
    """Gaussian weights with std sqrt(2 / fan_in); zero biases; slopes at 0.25. In place."""
    rng = np.random.default_rng(seed)
    std = math.sqrt(2.0 / fan_in(bank))
    bank.weights[...] = rng.standard_normal(bank.weights.shape) * std
    bank.bias[...] = 0
    if bank.slopes is not None:
        bank.slopes[...] = PRELU_INIT
    return bank


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """Learning rate in effect during ``epoch`` (1-based); halvings apply at epoch start."""
    if epoch < 1:
        raise ValueError("epochs are 1-based")
    if epoch < config.lr_halving_start_epoch:
        return config.initial_lr
    halvings = (epoch - config.lr_halving_start_epoch) // config.lr_halving_period + 1
    return config.initial_lr * 2.0 ** -halvings


@dataclass
class OptimizerState:
    r: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    epoch: int = 1
    lr: float = 0.0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray], lr=0.0) -> "OptimizerState":
        return cls({k: np.zeros_like(a) for k, a in params.items()},
                   {k: np.zeros_like(a) for k, a in params.items()}, 1, lr)


def rmsprop_step(state: OptimizerState, params, grads, lr, decay=0.9, epsilon=1e-6, momentum=0.6):
    """One in-place update::

        r <- decay*r + (1-decay)*g^2
        v <- momentum*v + lr*g/sqrt(r + epsilon)
        theta <- theta - v
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name}; step aborted")
    for name, theta in params.items():
        g = grads[name]
        r, v = state.r[name], state.v[name]
        r *= decay
        r += (1 - decay) * g * g
        v *= momentum
        v += lr * g / np.sqrt(r + epsilon)
        theta -= v
    state.lr = lr


class PatchSampler:
    """Draws aligned multi-modal patches and their central label cores."""

    def __init__(self, dataset: Sequence[Subject], config: SamplerConfig, depth=9, num_classes=None):
        if not dataset:
            raise ValueError("dataset is empty")
        self.config = config
        p = config.patch_size
        self.core = p - 2 * depth
        if self.core < 1:
            raise ValueError(f"patch size {p} too small for {depth} valid conv layers")
        self.subjects = [self._prepare(s) for s in dataset]
        if num_classes is None:
            num_classes = int(max(s[1].max() for s in self.subjects)) + 1
        self.num_classes = num_classes
        self.warnings: list[str] = []
        self._class_centers = [self._centers_by_class(s[1]) for s in self.subjects]

    def _prepare(self, subject: Subject):
        if subject.labels is None:
            raise ValueError(f"subject {subject.id} has no labels")
        p = self.config.patch_size
        vols = list(subject.modalities) + [subject.labels]
        shape = vols[0].shape
        if any(v.shape != shape for v in vols):
            raise ValueError(f"subject {subject.id}: modalities and labels differ in shape")
        pad = [((p - n) // 2, p - n - (p - n) // 2) if n < p else (0, 0) for n in shape]
        if any(a or b for a, b in pad):
            vols = [np.pad(v, pad, mode="symmetric") for v in vols]
        return vols[:-1], vols[-1], subject.id

    def _centers_by_class(self, labels):
        h = self.config.patch_size // 2
        p = self.config.patch_size
        region = labels[tuple(slice(h, n - p + h + 1) for n in labels.shape)]
        return [np.flatnonzero(region == c) for c in range(self.num_classes)], region.shape

    def _uniform_center(self, rng, idx):
        p = self.config.patch_size
        shape = self.subjects[idx][1].shape
        return tuple(int(rng.integers(0, n - p + 1)) + p // 2 for n in shape)

    def draw_center(self, rng, idx):
        if self.config.policy == "uniform_valid":
            return self._uniform_center(rng, idx)
        per_class, region_shape = self._class_centers[idx]
        c = int(rng.integers(self.num_classes))
        voxels = per_class[c]
        if voxels.size == 0:
            msg = f"subject {self.subjects[idx][2]}: class {c} has no valid centers; using uniform_valid"
            if msg not in self.warnings:
                self.warnings.append(msg)
                log.warning(msg)
            return self._uniform_center(rng, idx)
        flat = int(voxels[rng.integers(voxels.size)])
        h = self.config.patch_size // 2
        return tuple(int(i) + h for i in np.unravel_index(flat, region_shape))

    def sample(self, count: int, rng: np.random.Generator):
        """Returns (per-modality patches (count,1,P,P,P), label cores (count,c,c,c), centers)."""
        p, h, core = self.config.patch_size, self.config.patch_size // 2, self.core
        n_mod = len(self.subjects[0][0])
        patches = [np.empty((count, 1, p, p, p), dtype=self.subjects[0][0][0].dtype)
                   for _ in range(n_mod)]
        cores = np.empty((count, core, core, core), dtype=np.int64)
        centers = []
        lo = (p - core) // 2
        for i in range(count):
            idx = int(rng.integers(len(self.subjects)))
            c = self.draw_center(rng, idx)
            mods, labels, _ = self.subjects[idx]
            sl = tuple(slice(ci - h, ci - h + p) for ci in c)
            for m in range(n_mod):
                patches[m][i, 0] = mods[m][sl]
            cores[i] = labels[sl][lo:lo + core, lo:lo + core, lo:lo + core]
            centers.append((idx, c))
        return patches, cores, centers


def sample_subvolumes(dataset, count, config: SamplerConfig, seed=0, depth=9, num_classes=None):
    """Functional form of :class:`PatchSampler`; returns ``(patches, label_cores)``."""
    sampler = PatchSampler(dataset, config, depth, num_classes)
    patches, cores, _ = sampler.sample(count, np.random.default_rng(seed))
    return patches, cores


@dataclass
class TrainResult:
    log: list[dict] = field(default_factory=list)
    state: OptimizerState | None = None
    steps: int = 0
    sampler_warnings: list[str] = field(default_factory=list)


def _validation_dsc(net, subjects, num_classes):
    from .inference import segment_volume
    from .metrics import dsc

    scores = []
    for s in subjects:
        labels, _ = segment_volume(net, s.modalities)
        scores.append([dsc(s.labels == c, labels == c) for c in range(1, num_classes)])
    per_class = np.mean(scores, axis=0)
    return [float(x) for x in per_class]


def train(
    net: Network,
    dataset: Sequence[Subject],
    config: TrainConfig,
    sampler_config: SamplerConfig | None = None,
    validation: Sequence[Subject] | None = None,
    out_dir=None,
    on_record: Callable[[dict], None] | None = None,
    modalities: Sequence[str] | None = None,
) -> TrainResult:
    """Epochs x subepochs of patch sampling and RMSprop updates on ``net`` (in place).

    Each subepoch appends ``{epoch, subepoch, mean_loss, lr, wall_ms}`` to the log;
    with ``validation`` each epoch also appends ``{epoch, val_dsc, val_mean_dsc}``.
    With ``out_dir`` a checkpoint is written after every epoch.
    """
    if sampler_config is None:
        sampler_config = SamplerConfig(patch_size=config.patch_size)
    elif sampler_config.patch_size != config.patch_size:
        raise ValueError("sampler and train config disagree on patch_size")
    rng = np.random.default_rng(config.seed)
    sampler = PatchSampler(dataset, sampler_config, net.depth, net.spec.num_classes)
    params = net.parameters()
    state = OptimizerState.zeros_like(params)
    result = TrainResult(state=state)

    def emit(record):
        result.log.append(record)
        if on_record is not None:
            on_record(record)

    batch = 0
    for epoch in range(1, config.epochs + 1):
        lr = lr_at_epoch(config, epoch)
        state.epoch, state.lr = epoch, lr
        for sub in range(1, config.subepochs_per_epoch + 1):
            t0 = time.perf_counter()
            patches, cores, _ = sampler.sample(config.samples_per_subepoch, rng)
            losses = []
            for start in range(0, config.samples_per_subepoch, config.batch_size):
                stop = start + config.batch_size
                inputs = [p[start:stop] for p in patches]
                loss, grads = backward(net, inputs, cores[start:stop], mode="train",
                                       seed=int(rng.integers(2 ** 63)))
                if not math.isfinite(loss):
                    raise TrainingError(f"non-finite loss at batch {batch}")
                rmsprop_step(state, params, flat_grads(grads), lr, config.rmsprop_decay,
                             config.rmsprop_epsilon, config.momentum)
                losses.append(loss)
                batch += 1
            emit({
                "epoch": epoch,
                "subepoch": sub,
                "mean_loss": float(np.mean(losses)),
                "lr": lr,
                "wall_ms": round((time.perf_counter() - t0) * 1000, 3),
            })
        if validation:
            per_class = _validation_dsc(net, validation, net.spec.num_classes)
            emit({"epoch": epoch, "val_dsc": per_class, "val_mean_dsc": float(np.mean(per_class))})
        if out_dir is not None:
            from .fileio import save_checkpoint

            save_checkpoint(f"{out_dir}/epoch_{epoch:03d}", net, state=state, epoch=epoch,
                            rng_state=rng.bit_generator.state, modalities=modalities)
    result.steps = batch
    result.sampler_warnings = sampler.warnings
    return result
