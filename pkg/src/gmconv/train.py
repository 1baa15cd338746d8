"""Minibatch SGD training, evaluation, and run configuration.

The recipe is classical heavy-ball momentum with step-decayed learning
rate: v <- momentum * v + g, theta <- theta - lr * v. Weight decay is
added to the gradient of convolution and dense weights only; sigma
values, sigma-predictor weights, and biases are left undecayed so the
receptive-field parameters follow the loss alone.

Determinism contract: one generator is seeded from config.seed and owns
model initialization, epoch shuffling, and augmentation draws, in that
order. Its state is stored in every checkpoint, so a resumed run
consumes exactly the stream a straight-through run would have.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .checkpoint import Checkpoint, checkpoint_from_model, restore_model, save_checkpoint
from .data import DATASET_IDS, DatasetSource, augment_batch, load_dataset
from .masks import clamp_sigma
from .models import (
    ConvPolicy,
    Model,
    apply_policy,
    build_model,
    spec_to_json,
)
from .tensor import GradTape, Tensor, softmax_cross_entropy

AUGMENT_MODES = ("none", "cifar-standard")


class ConfigError(ValueError):
    """A run configuration that cannot be executed as written."""


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run depends on, JSON-serializable.

    `train_subset`/`test_subset` cap the split sizes (0 keeps every
    record of a file dataset); for the synthetic dataset they are the
    generated sample counts. Milestones are 1-based epoch numbers; an
    epoch equal to a milestone already runs at the decayed rate.
    """

    model: str = "resnet20-slim"
    num_classes: int = 10
    width: float = 0.5
    policy: ConvPolicy = ConvPolicy()
    dataset: str = "cifar10-bin"
    data_root: str = ""
    normalization: tuple[tuple[float, ...], tuple[float, ...]] | None = None
    train_subset: int = 5000
    test_subset: int = 1000
    image_shape: tuple[int, int, int] = (3, 32, 32)
    augment: str = "none"
    epochs: int = 20
    batch_size: int = 128
    lr: float = 0.1
    milestones: tuple[int, ...] = ()
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self) -> None:
        if self.dataset not in DATASET_IDS:
            raise ConfigError(f"unknown dataset {self.dataset!r}, expected one of {DATASET_IDS}")
        if self.augment not in AUGMENT_MODES:
            raise ConfigError(f"augment must be one of {AUGMENT_MODES}, got {self.augment!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.lr_decay <= 0:
            raise ConfigError("lr_decay must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.width <= 0:
            raise ConfigError("width must be > 0")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.train_subset < 0 or self.test_subset < 0:
            raise ConfigError("subset sizes must be >= 0")
        if self.dataset == "synthetic" and (self.train_subset < 1 or self.test_subset < 1):
            raise ConfigError("synthetic dataset needs positive subset sizes")
        ms = self.milestones
        if any(ms[i] >= ms[i + 1] for i in range(len(ms) - 1)):
            raise ConfigError(f"milestones must be strictly increasing, got {ms}")
        if any(m < 1 or m >= self.epochs for m in ms):
            raise ConfigError(f"milestones must lie in [1, epochs), got {ms}")


_CONFIG_KEYS = (
    "model",
    "num_classes",
    "width",
    "policy",
    "dataset",
    "data_root",
    "normalization",
    "train_subset",
    "test_subset",
    "image_shape",
    "augment",
    "epochs",
    "batch_size",
    "lr",
    "milestones",
    "lr_decay",
    "momentum",
    "weight_decay",
    "seed",
)
_POLICY_KEYS = ("stem_mode", "body_mode", "sigma_init", "pattern")


def config_to_json(config: TrainConfig) -> str:
    d = {k: getattr(config, k) for k in _CONFIG_KEYS}
    d["policy"] = {k: getattr(config.policy, k) for k in _POLICY_KEYS}
    d["milestones"] = list(config.milestones)
    d["image_shape"] = list(config.image_shape)
    if config.normalization is not None:
        d["normalization"] = [list(config.normalization[0]), list(config.normalization[1])]
    return json.dumps(d, indent=2, sort_keys=True)


def config_from_json(text: str) -> TrainConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from err
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - set(_CONFIG_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}; known keys are {sorted(_CONFIG_KEYS)}")

    kwargs = dict(raw)
    if "policy" in kwargs:
        pol = kwargs["policy"]
        if not isinstance(pol, dict):
            raise ConfigError("policy must be a JSON object")
        bad = sorted(set(pol) - set(_POLICY_KEYS))
        if bad:
            raise ConfigError(f"unknown policy keys {bad}; known keys are {list(_POLICY_KEYS)}")
        kwargs["policy"] = ConvPolicy(**pol)
    if "milestones" in kwargs:
        kwargs["milestones"] = tuple(int(m) for m in kwargs["milestones"])
    if "image_shape" in kwargs:
        shape = tuple(int(s) for s in kwargs["image_shape"])
        if len(shape) != 3:
            raise ConfigError(f"image_shape must have 3 entries, got {list(shape)}")
        kwargs["image_shape"] = shape
    if kwargs.get("normalization") is not None:
        norm = kwargs["normalization"]
        if not (isinstance(norm, (list, tuple)) and len(norm) == 2):
            raise ConfigError("normalization must be [mean_per_channel, std_per_channel]")
        kwargs["normalization"] = (
            tuple(float(v) for v in norm[0]),
            tuple(float(v) for v in norm[1]),
        )
    return TrainConfig(**kwargs)


def load_config(path: str) -> TrainConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    return config_from_json(text)


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    train_loss: float
    test_acc: float
    sigmas: tuple[float, ...] = ()


def metrics_to_csv(history: list[EpochMetrics]) -> str:
    """CSV with one row per epoch: epoch, train_loss, test_acc, then the
    clamped sigma of every static masked layer in network order."""
    n_sigma = len(history[0].sigmas) if history else 0
    header = ["epoch", "train_loss", "test_acc"] + [f"sigma_{i}" for i in range(n_sigma)]
    lines = [",".join(header)]
    for m in history:
        row = [str(m.epoch), "%.17g" % m.train_loss, "%.17g" % m.test_acc]
        row += ["%.17g" % s for s in m.sigmas]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def effective_lr(config: TrainConfig, epoch: int) -> float:
    """Step-decayed rate for a 1-based epoch number."""
    passed = sum(1 for m in config.milestones if m <= epoch)
    return config.lr * config.lr_decay**passed


# ---------------------------------------------------------------------------
# data plumbing


def split_source(config: TrainConfig, split: str) -> DatasetSource:
    count = config.train_subset if split == "train" else config.test_subset
    if config.dataset == "synthetic":
        return DatasetSource(
            "synthetic",
            split=split,
            normalization=config.normalization,
            num_samples=count,
            num_classes=config.num_classes,
            image_shape=config.image_shape,
            seed=config.seed,
        )
    return DatasetSource(
        config.dataset,
        root=config.data_root,
        split=split,
        normalization=config.normalization,
        subset=count,
    )


def _check_compat(config: TrainConfig, spec, images: np.ndarray, labels: np.ndarray) -> None:
    if images.shape[1:] != spec.input_shape:
        raise ConfigError(
            f"dataset images have shape {tuple(images.shape[1:])} but model "
            f"{spec.name!r} expects {spec.input_shape}"
        )
    if labels.size and int(labels.max()) >= config.num_classes:
        raise ConfigError(
            f"labels reach {int(labels.max())} but the head has {config.num_classes} classes"
        )


# ---------------------------------------------------------------------------
# optimization


def sgd_step(
    params: list[tuple[str, Tensor]],
    momentum_buffers: dict[str, np.ndarray],
    decay_names: set[str],
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """One heavy-ball update over every parameter, in place."""
    for name, t in params:
        g = t.grad
        if g is None:
            g = np.zeros_like(t.data)
        if weight_decay and name in decay_names:
            g = g + weight_decay * t.data
        buf = momentum_buffers[name]
        buf *= momentum
        buf += g
        t.data -= lr * buf


def build_run_model(config: TrainConfig, rng: np.random.Generator) -> Model:
    spec = build_model(config.model, config.num_classes, config.width)
    spec = apply_policy(spec, config.policy)
    return Model(spec, rng)


def train(
    config: TrainConfig,
    out_dir: str | None = None,
    resume: Checkpoint | None = None,
) -> tuple[list[EpochMetrics], Checkpoint]:
    """Run the full recipe; returns per-epoch metrics and the final state.

    With `out_dir`, metrics.csv and last.ckpt are rewritten after every
    epoch. With `resume`, training continues from the checkpoint's epoch
    and generator state; the config must build the same spec.
    """
    rng = np.random.default_rng(config.seed)
    model = build_run_model(config, rng)

    train_images, train_labels = load_dataset(split_source(config, "train"))
    test_images, test_labels = load_dataset(split_source(config, "test"))
    _check_compat(config, model.spec, train_images, train_labels)
    _check_compat(config, model.spec, test_images, test_labels)

    params = model.named_parameters()
    momentum_buffers = {n: np.zeros_like(t.data) for n, t in params}
    start_epoch = 0
    if resume is not None:
        if spec_to_json(resume.spec) != spec_to_json(model.spec):
            raise ConfigError("checkpoint spec does not match the configured model")
        named = dict(params)
        for name, arr in resume.params.items():
            named[name].data[...] = arr
        for name, arr in resume.momentum.items():
            momentum_buffers[name][...] = arr
        rng.bit_generator.state = resume.rng_state
        start_epoch = resume.epoch
        if start_epoch >= config.epochs:
            raise ConfigError(
                f"checkpoint is already at epoch {start_epoch} of {config.epochs}"
            )

    decay_names = model.decay_parameter_names()
    sigma_items = model.static_sigma_items()
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    history: list[EpochMetrics] = []
    n = len(train_images)
    last_finite = float("nan")
    for epoch in range(start_epoch + 1, config.epochs + 1):
        lr = effective_lr(config, epoch)
        perm = rng.permutation(n)
        loss_sum = 0.0
        for batch_index, start in enumerate(range(0, n, config.batch_size)):
            idx = perm[start : start + config.batch_size]
            batch = train_images[idx]
            if config.augment != "none":
                batch = augment_batch(batch, config.augment, rng)
            tape = GradTape()
            logits = model.forward(Tensor(batch), tape)
            loss = softmax_cross_entropy(logits, train_labels[idx], tape)
            if not np.isfinite(loss.data):
                if out_dir:
                    crash = checkpoint_from_model(
                        model, momentum_buffers, epoch - 1, rng.bit_generator.state
                    )
                    save_checkpoint(crash, os.path.join(out_dir, "crash.ckpt"))
                raise FloatingPointError(
                    f"training diverged: loss {float(loss.data)!r} at epoch {epoch}, "
                    f"batch {batch_index} (lr={lr:g}, last finite loss {last_finite:g})"
                )
            last_finite = float(loss.data)
            tape.backward(loss)
            sgd_step(params, momentum_buffers, decay_names, lr, config.momentum, config.weight_decay)
            loss_sum += float(loss.data) * len(idx)

        sigmas = []
        for _, t in sigma_items:
            raw = float(t.data)
            if not np.isfinite(raw):
                raise FloatingPointError(f"sigma diverged to {raw!r} at epoch {epoch}")
            sigmas.append(float(clamp_sigma(raw)))
        metrics = EpochMetrics(
            epoch=epoch,
            train_loss=loss_sum / n,
            test_acc=evaluate_model(model, test_images, test_labels),
            sigmas=tuple(sigmas),
        )
        history.append(metrics)
        if out_dir:
            ckpt = checkpoint_from_model(model, momentum_buffers, epoch, rng.bit_generator.state)
            save_checkpoint(ckpt, os.path.join(out_dir, "last.ckpt"))
            with open(os.path.join(out_dir, "metrics.csv"), "w", encoding="utf-8") as fh:
                fh.write(metrics_to_csv(history))

    final = checkpoint_from_model(
        model, momentum_buffers, config.epochs, rng.bit_generator.state
    )
    return history, final


# ---------------------------------------------------------------------------
# evaluation


def evaluate_model(
    model: Model, images: np.ndarray, labels: np.ndarray, batch_size: int = 256
) -> float:
    """Top-1 accuracy over the whole array, batched, tape-free."""
    if len(images) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    head = model.spec.num_classes
    if int(labels.min()) < 0 or int(labels.max()) >= head:
        raise ValueError(
            f"labels span [{int(labels.min())}, {int(labels.max())}] but the "
            f"head has {head} classes"
        )
    correct = 0
    for start in range(0, len(images), batch_size):
        pred = model.predict(Tensor(images[start : start + batch_size]))
        correct += int(np.sum(pred == labels[start : start + batch_size]))
    return correct / len(images)


def evaluate(ckpt: Checkpoint, src: DatasetSource) -> float:
    """Accuracy of a checkpointed model on a dataset split."""
    model = restore_model(ckpt)
    images, labels = load_dataset(src)
    return evaluate_model(model, images, labels)
