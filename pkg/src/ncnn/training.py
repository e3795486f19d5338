"""
Optimizers, learning-rate schedules, the fold training loop and the
one-hyperparameter-at-a-time sweep.

Each fold trains a freshly initialized model, evaluates the held-out subjects
after every epoch and keeps the parameters of the epoch with the lowest test
loss. Kept parameters are rounded to float32 so the in-memory best model is
exactly what a checkpoint file stores.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .data import AugmentationConfig, FoldPlan, augment_training_set, resize_samples
from .errors import ConfigurationError, ContractError, DimensionError, TrainingError
from .labels import LABEL_MODES, one_hot, target_distribution
from .metrics import PredictionRecord, classification_metrics
from .model import Checkpoint, ModelConfig, build_model
from .rng import derive_seed, substream

logger = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "adagrad", "rmsprop", "sgd")
SCHEDULERS = ("none", "step", "exponential", "cosine_annealing")

RMSPROP_RHO = 0.9
ADAM_BETAS = (0.9, 0.999)
EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 100
    batch_size: int = 16
    optimizer: str = "rmsprop"
    scheduler: str = "none"
    label_mode: str = "hard"
    epsilon: float = 0.0
    seed: int = 0
    step_size: Optional[int] = None  # defaults to epochs // 3
    step_gamma: float = 0.1
    exp_gamma: float = 0.97
    eta_min: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("learning_rate must be > 0, epochs and batch_size >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"optimizer {self.optimizer!r} not in {OPTIMIZERS}")
        if self.scheduler not in SCHEDULERS:
            raise ConfigurationError(f"scheduler {self.scheduler!r} not in {SCHEDULERS}")
        if self.label_mode not in LABEL_MODES:
            raise ConfigurationError(f"label_mode {self.label_mode!r} not in {LABEL_MODES}")
        if not 0.0 <= self.epsilon < 1.0:
            raise ConfigurationError(f"epsilon {self.epsilon} outside [0, 1)")

    def replace(self, **changes) -> "TrainConfig":
        return replace(self, **changes)

    def as_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "original": TrainConfig(),
    "tuned": TrainConfig(epochs=120, label_mode="lsr", epsilon=0.3, scheduler="cosine_annealing"),
}


# ---------------------------------------------------------------------------
# optimizers


def optimizer_step(params: dict, grads: dict, state: dict, kind: str, lr: float) -> dict:
    """Update ``params`` in place and return the (mutated) optimizer state.

    ``state`` starts as an empty dict; per-parameter accumulators are created
    on first use.
    """
    if kind not in OPTIMIZERS:
        raise ContractError(f"unknown optimizer {kind!r}")
    if kind == "adam":
        state["t"] = state.get("t", 0) + 1
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if kind == "sgd":
            p -= lr * g
        elif kind == "rmsprop":
            a = state.setdefault(name, np.zeros_like(p))
            a *= RMSPROP_RHO
            a += (1.0 - RMSPROP_RHO) * g * g
            p -= lr * g / (np.sqrt(a) + EPS)
        elif kind == "adagrad":
            a = state.setdefault(name, np.zeros_like(p))
            a += g * g
            p -= lr * g / (np.sqrt(a) + EPS)
        else:
            b1, b2 = ADAM_BETAS
            m, v = state.setdefault(name, (np.zeros_like(p), np.zeros_like(p)))
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            t = state["t"]
            m_hat = m / (1.0 - b1**t)
            v_hat = v / (1.0 - b2**t)
            p -= lr * m_hat / (np.sqrt(v_hat) + EPS)
    return state


def scheduler_lr(kind: str, base_lr: float, epoch: int, total_epochs: int, step_size=None, gamma=None, eta_min=0.0) -> float:
    """Learning rate for ``epoch`` (0-based) out of ``total_epochs``."""
    if not 0 <= epoch <= total_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {total_epochs}]")
    if kind == "none":
        return base_lr
    if kind == "step":
        size = step_size or max(1, total_epochs // 3)
        return base_lr * (0.1 if gamma is None else gamma) ** (epoch // size)
    if kind == "exponential":
        return base_lr * (0.97 if gamma is None else gamma) ** epoch
    if kind == "cosine_annealing":
        if epoch == total_epochs:
            return eta_min
        return eta_min + (base_lr - eta_min) * (1.0 + math.cos(math.pi * epoch / total_epochs)) / 2.0
    raise ContractError(f"unknown scheduler {kind!r}")


def _lr_for(config: TrainConfig, epoch: int) -> float:
    gamma = {"step": config.step_gamma, "exponential": config.exp_gamma}.get(config.scheduler)
    return scheduler_lr(config.scheduler, config.learning_rate, epoch, config.epochs, config.step_size, gamma, config.eta_min)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class FoldResult:
    fold: int
    checkpoint: Checkpoint
    history: list  # one dict per epoch: fold, epoch, train_loss, test_loss, lr
    records: list  # PredictionRecord for every test sample, from the kept checkpoint

    @property
    def best_test_loss(self) -> float:
        return self.checkpoint.test_loss


def _stack(samples):
    return np.stack([s.image for s in samples]) if samples else np.zeros((0,))


def _eval_loss(model, images, targets, batch_size=64) -> float:
    total = 0.0
    for i in range(0, len(images), batch_size):
        probs = T.softmax(model.forward(images[i:i + batch_size]))
        total += T.cross_entropy_soft(probs, targets[i:i + batch_size]).item() * len(probs.values)
    return total / len(images)


def prediction_records(model, samples, fold=0) -> list:
    probs = model.predict_batch(_stack(samples))
    return [PredictionRecord(float(p[1]), s.hard_label, fold, s.subject_id, s.key) for p, s in zip(probs, samples)]


def train_fold(train_samples, test_samples, model_config: ModelConfig, config: TrainConfig,
               augment_config: Optional[AugmentationConfig] = None, fold: int = 0, metadata=None) -> FoldResult:
    augment_config = AugmentationConfig() if augment_config is None else augment_config
    if config.label_mode == "nfcs_soft":
        train_samples = [s for s in train_samples if s.nfcs is not None]
    if not train_samples:
        raise ConfigurationError(f"fold {fold}: no training samples for label mode {config.label_mode}")
    if not test_samples:
        raise ConfigurationError(f"fold {fold}: empty test set")

    train_set = augment_training_set(train_samples, augment_config, derive_seed(config.seed, "augment"))
    x_train = _stack(train_set)
    y_train = np.stack([target_distribution(s.hard_label, s.nfcs, config.label_mode, config.epsilon) for s in train_set])
    x_test = _stack(test_samples)
    y_test = np.stack([one_hot(s.hard_label) for s in test_samples])

    model = build_model(model_config, derive_seed(config.seed, "init", fold))
    rng = substream(config.seed, "batches", fold)
    state: dict = {}
    history = []
    best = None
    meta = {"fold": fold, "seed": config.seed, "label_mode": config.label_mode, "epsilon": config.epsilon}
    meta.update(metadata or {})
    n = len(x_train)
    for epoch in range(config.epochs):
        lr = _lr_for(config, epoch)
        order = rng.permutation(n)
        running = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            model.zero_grad()
            with T.Tape() as tape:
                probs = T.softmax(model.forward(x_train[idx], training=True, rng=rng))
                loss = T.cross_entropy_soft(probs, y_train[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"fold {fold}: non-finite training loss at epoch {epoch + 1}, batch starting {start}")
            tape.backward(loss)
            optimizer_step(
                {k: p.values for k, p in model.params.items()},
                {k: p.grad for k, p in model.params.items()},
                state, config.optimizer, lr,
            )
            running += value * len(idx)
        test_loss = _eval_loss(model, x_test, y_test)
        if not math.isfinite(test_loss):
            raise TrainingError(f"fold {fold}: non-finite test loss at epoch {epoch + 1}")
        history.append({"fold": fold, "epoch": epoch + 1, "train_loss": running / n, "test_loss": test_loss, "lr": lr})
        if best is None or test_loss < best.test_loss:
            stored = {k: v.astype(np.float32).astype(np.float64) for k, v in model.state().items()}
            best = Checkpoint(model_config, stored, epoch + 1, test_loss, dict(meta))
        logger.debug("fold %d epoch %d train %.4f test %.4f", fold, epoch + 1, running / n, test_loss)

    records = prediction_records(best.build(), test_samples, fold)
    return FoldResult(fold, best, history, records)


def _run_fold(args):
    samples, plan, fold, model_config, config, augment_config, metadata = args
    train_samples, test_samples = plan.split(samples, fold)
    return train_fold(train_samples, test_samples, model_config, config, augment_config, fold, metadata)


def train(samples, plan: FoldPlan, model_config: ModelConfig, config: TrainConfig,
          augment_config: Optional[AugmentationConfig] = None, parallel: int = 1, metadata=None) -> list:
    """Train every fold of ``plan``; returns one :class:`FoldResult` per fold, in order."""
    jobs = [(samples, plan, f, model_config, config, augment_config, metadata) for f in range(plan.fold_count)]
    if parallel <= 1:
        return [_run_fold(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=parallel) as pool:
        return list(pool.map(_run_fold, jobs))


def mean_f1(results) -> float:
    return float(np.mean([classification_metrics(r.records).f1 for r in results]))


# ---------------------------------------------------------------------------
# sweep

SWEEPABLE = ("image_size", "optimizer", "epochs", "label_smoothing", "scheduler")


def parse_candidate(hyperparameter: str, text):
    """Turn a command-line candidate into its typed value."""
    if hyperparameter not in SWEEPABLE:
        raise ContractError(f"unknown hyperparameter {hyperparameter!r}; expected one of {SWEEPABLE}")
    if not isinstance(text, str):
        return text
    text = text.strip()
    if hyperparameter in ("image_size", "epochs"):
        return int(text.lower().split("x")[0])
    if hyperparameter == "label_smoothing":
        return "nfcs" if text.lower() in ("nfcs", "nfcs_soft") else float(text)
    return text.lower()


def baseline_value(hyperparameter: str, model_config: ModelConfig, config: TrainConfig):
    if hyperparameter == "image_size":
        return model_config.input_size
    if hyperparameter == "label_smoothing":
        if config.label_mode == "nfcs_soft":
            return "nfcs"
        return config.epsilon if config.label_mode == "lsr" else 0.0
    return getattr(config, hyperparameter)


def apply_candidate(hyperparameter: str, value, model_config: ModelConfig, config: TrainConfig):
    if hyperparameter == "image_size":
        return model_config.replace(input_size=int(value)), config
    if hyperparameter == "label_smoothing":
        if value == "nfcs":
            return model_config, config.replace(label_mode="nfcs_soft", epsilon=0.0)
        value = float(value)
        return model_config, config.replace(label_mode="lsr" if value > 0 else "hard", epsilon=value)
    if hyperparameter == "epochs":
        return model_config, config.replace(epochs=int(value))
    return model_config, config.replace(**{hyperparameter: value})


@dataclass
class SweepRow:
    candidate: object
    mean_f1: float
    delta_f1: float
    per_fold_f1: list
    selected: bool = False


@dataclass
class SweepResult:
    hyperparameter: str
    baseline_value: object
    baseline_f1: float
    rows: list
    selected_value: object
    results: dict = field(default_factory=dict, repr=False)  # repr(candidate) -> list[FoldResult]

    def table(self) -> list:
        return [
            {"candidate": r.candidate, "f1": r.mean_f1, "delta_f1": r.delta_f1, "selected": r.selected}
            for r in self.rows
        ]


def sweep(samples, plan: FoldPlan, model_config: ModelConfig, base_config: TrainConfig, hyperparameter: str,
          candidates, augment_config: Optional[AugmentationConfig] = None, parallel: int = 1,
          on_result=None) -> SweepResult:
    """Vary one hyperparameter with everything else held at the baseline.

    The baseline is trained once and reused for any candidate equal to it. The
    selected value is the best candidate by mean fold F1, but only if it beats
    the baseline; ties go to the baseline. ``on_result(candidate, results)`` is
    called after each training run.
    """
    candidates = [parse_candidate(hyperparameter, c) for c in candidates]
    if not candidates:
        raise ContractError("sweep needs at least one candidate")
    base_value = baseline_value(hyperparameter, model_config, base_config)
    runs = {}

    def run(value):
        key = repr(value)
        if key not in runs:
            mc, tc = apply_candidate(hyperparameter, value, model_config, base_config)
            data = resize_samples(samples, mc.input_size) if mc.input_size != model_config.input_size else samples
            logger.info("sweep %s=%r", hyperparameter, value)
            runs[key] = train(data, plan, mc, tc, augment_config, parallel, {"sweep": hyperparameter, "candidate": value})
            if on_result:
                on_result(value, runs[key])
        return runs[key]

    base_f1s = [classification_metrics(r.records).f1 for r in run(base_value)]
    base_f1 = float(np.mean(base_f1s))
    rows = []
    for value in candidates:
        f1s = [classification_metrics(r.records).f1 for r in run(value)]
        mean = float(np.mean(f1s))
        rows.append(SweepRow(value, mean, 0.0 if repr(value) == repr(base_value) else mean - base_f1, f1s))
    best = max(rows, key=lambda r: r.mean_f1)
    selected = best.candidate if best.mean_f1 > base_f1 else base_value
    for r in rows:
        r.selected = repr(r.candidate) == repr(selected)
    return SweepResult(hyperparameter, base_value, base_f1, rows, selected, runs)
