"""Adversarial contrastive pretraining, fine-tuning, metrics and the fixed-sigma grid."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .augment import (
    AugmentBounds,
    AugmentParams,
    NoiseBundle,
    faithfulness_proxy,
    fixed_sigma_view,
    leaves_forward,
)
from .autodiff import Tape, Tensor
from .contrastive import CollapsedEmbeddingError, EmbeddingBatch, nt_xent
from .data import Dataset, batches, label_subsample
from .encoder import Encoder, EncoderConfig, cross_entropy, read_checkpoint, write_checkpoint

log = logging.getLogger(__name__)

MODES = ("leaves", "fixed-sigma", "supervised")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    batch_size: int = 32
    pretrain_epochs: int = 20
    finetune_epochs: int = 50
    lr_encoder: float = 1e-3
    lr_leaves: float = 1e-3
    lr_finetune: float = 1e-3
    tau: float = 0.05
    eta: float = 0.05
    m: int = 6
    k_max: int = 5
    label_fraction: float = 0.1
    mode: str = "leaves"
    sigma: float = 0.03
    probe_only: bool = False
    finetune_batch_size: int = 8

    def __post_init__(self):
        if min(self.lr_encoder, self.lr_leaves, self.lr_finetune) <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2")
        if not 0 < self.label_fraction <= 1:
            raise ValueError("label fraction must lie in (0, 1]")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    def bounds(self) -> AugmentBounds:
        return AugmentBounds(eta=self.eta, k_max=self.k_max, m=self.m)


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params) -> "OptimizerState":
        return cls([np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params])


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: OptimizerState, lr: float) -> list[Tensor]:
    """Bias-corrected Adam update, in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state differ in length")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ValueError(f"shape mismatch at parameter {i}: {p.shape} vs grad {g.shape}")
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        p.data = p.data - lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
    return params


def _grads(params: list[Tensor]) -> list[np.ndarray]:
    return [np.zeros(p.shape) if p.grad is None else p.grad for p in params]


def _zero(params):
    for p in params:
        p.grad = None


# ------------------------------------------------------------------ run log


@dataclass
class RunLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    def add_step(self, record: dict):
        if self.steps and record["step"] <= self.steps[-1]["step"]:
            raise ValueError("step index must increase")
        self.steps.append(record)

    def add_epoch(self, record: dict):
        self.epochs.append(record)

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            for rec in self.steps:
                fh.write(json.dumps({"kind": "step", **rec}, sort_keys=True) + "\n")
            for rec in self.epochs:
                fh.write(json.dumps({"kind": "epoch", **rec}, sort_keys=True) + "\n")

    TRAJECTORY_COLUMNS = ("step", "sigma_j", "sigma_s", "sigma_m", "segments", "gmm_mean", "gmm_scale")

    def write_trajectories(self, path):
        with open(path, "w") as fh:
            fh.write(",".join(self.TRAJECTORY_COLUMNS) + "\n")
            for rec in self.steps:
                fh.write(",".join(repr(rec[c]) for c in self.TRAJECTORY_COLUMNS) + "\n")


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, last_record: dict | None):
        super().__init__(f"{message}; last record: {json.dumps(last_record, sort_keys=True)}")
        self.last_record = last_record


# --------------------------------------------------------------- pretraining


def noise_seed(seed: int, step: int, view: int) -> int:
    return int(np.random.SeedSequence([seed, step, view]).generate_state(1)[0])


def contrastive_loss(encoder: Encoder, x: Tensor, views: tuple, tau: float) -> Tensor:
    """NT-Xent of two batches of views (each (B, C, L)) through encoder + projection."""
    va, vb = views
    b = x.shape[0]
    z = encoder.project(encoder.forward(ad.concat([va, vb], axis=0), train=True))
    order = np.stack([np.arange(b), np.arange(b) + b], axis=1).reshape(-1)
    return nt_xent(EmbeddingBatch(ad.take(z, order, axis=0), tau))


def leaves_loss(encoder, params: AugmentParams, x: Tensor, noises: tuple[NoiseBundle, NoiseBundle], tau: float):
    views = (leaves_forward(x, params, noises[0]), leaves_forward(x, params, noises[1]))
    return contrastive_loss(encoder, x, views, tau), views


def adversarial_step(encoder: Encoder, params: AugmentParams, x: Tensor, noises, tau: float,
                     enc_state: OptimizerState | None, aug_state: OptimizerState | None,
                     lr_encoder: float, lr_leaves: float):
    """One simultaneous min-max step from a single backward pass.

    The encoder descends the loss; the augmentation parameters ascend it by
    receiving the negated gradient. Passing ``None`` for a state freezes that player.
    """
    enc_params = encoder.encoder_tensors() + encoder.projection_tensors()
    aug_params = params.tensors()
    _zero(enc_params + aug_params)
    with Tape() as tape:
        loss, views = leaves_loss(encoder, params, x, noises, tau)
        tape.backward(loss)
    if aug_state is not None:
        adam_step(aug_params, [-g for g in _grads(aug_params)], aug_state, lr_leaves)
    if enc_state is not None:
        adam_step(enc_params, _grads(enc_params), enc_state, lr_encoder)
    _zero(enc_params + aug_params)
    return loss.item(), views


def _step_record(loss, params: AugmentParams | None, x, view) -> dict:
    eff = params.effective() if params is not None else {}
    faith = faithfulness_proxy(x, view)
    rec = {"loss": loss}
    for key in ("sigma_j", "sigma_s", "sigma_m", "segments", "gmm_mean", "gmm_scale"):
        rec[key] = eff.get(key)
    rec["rmse"] = float(np.mean(faith["rmse"]))
    rec["pearson"] = float(np.mean(faith["pearson"]))
    return rec


def pretrain_adversarial(data: Dataset, config: TrainConfig, encoder: Encoder | None = None,
                         params: AugmentParams | None = None):
    """Contrastive pretraining. Returns (encoder, augment params, run log).

    ``mode="leaves"`` learns the augmentation parameters adversarially;
    ``mode="fixed-sigma"`` uses non-learned views at ``config.sigma``.
    """
    if len(data) < 2:
        raise ValueError("pretraining needs at least 2 samples")
    encoder = encoder or Encoder(_encoder_config(data), seed=config.seed)
    params = params or AugmentParams.init(config.bounds())
    bounds = params.bounds
    enc_params = encoder.encoder_tensors() + encoder.projection_tensors()
    enc_state = OptimizerState.for_params(enc_params)
    aug_state = OptimizerState.for_params(params.tensors())
    runlog = RunLog()
    batch_size = min(config.batch_size, len(data))
    step = 0
    for epoch in range(config.pretrain_epochs):
        losses = []
        for x, _ in batches(data, batch_size, config.seed, epoch, drop_last=True):
            noises = tuple(NoiseBundle.draw(noise_seed(config.seed, step, v), x.shape, bounds) for v in (0, 1))
            last = runlog.steps[-1] if runlog.steps else None
            try:
                loss, record = _pretrain_step(encoder, params, x, noises, config, enc_params, enc_state, aug_state)
            except (ad.NumericDomainError, CollapsedEmbeddingError) as err:
                raise TrainingDiverged(f"non-finite values at step {step}: {err}", last) from None
            record = {"step": step, "epoch": epoch, **record}
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at step {step}", last)
            try:
                encoder.check_finite()
            except FloatingPointError as err:
                raise TrainingDiverged(str(err), last) from None
            runlog.add_step(record)
            losses.append(loss)
            step += 1
        runlog.add_epoch({"epoch": epoch, "mean_loss": float(np.mean(losses)) if losses else None})
        log.info("pretrain epoch %d loss %.4f", epoch, runlog.epochs[-1]["mean_loss"] or float("nan"))
    return encoder, params, runlog


def _pretrain_step(encoder, params, x, noises, config, enc_params, enc_state, aug_state):
    if config.mode == "leaves":
        loss, views = adversarial_step(encoder, params, x, noises, config.tau, enc_state, aug_state,
                                       config.lr_encoder, config.lr_leaves)
        return loss, _step_record(loss, params, x.data, views[0].data)
    views = tuple(Tensor(fixed_sigma_view(x, config.sigma, nb, config.k_max)) for nb in noises)
    _zero(enc_params)
    with Tape() as tape:
        loss_t = contrastive_loss(encoder, x, views, config.tau)
        tape.backward(loss_t)
    adam_step(enc_params, _grads(enc_params), enc_state, config.lr_encoder)
    _zero(enc_params)
    return loss_t.item(), _step_record(loss_t.item(), None, x.data, views[0].data)


def _encoder_config(data: Dataset) -> EncoderConfig:
    return EncoderConfig(channels_in=data.channels, num_classes=data.classes)


# ----------------------------------------------------------------- finetune


def predict_logits(encoder: Encoder, ds: Dataset, batch_size: int = 64) -> np.ndarray:
    out = []
    for x, _ in batches(ds, batch_size, seed=0, drop_last=False, shuffle=False):
        out.append(encoder.probe(encoder.forward(x, train=False)).data)
    return np.concatenate(out) if out else np.zeros((0, encoder.config.num_classes))


def finetune(encoder: Encoder, train: Dataset, test: Dataset, config: TrainConfig):
    """Cross-entropy training on a stratified label subset; metrics on ``test`` only.

    Full fine-tuning by default; ``config.probe_only`` freezes the encoder.
    """
    labelled = label_subsample(train, config.label_fraction, seed=config.seed)
    if np.unique(labelled.labels).size < 2:
        raise ValueError("fine-tuning needs at least two classes among the labelled samples")
    trainable = encoder.probe_tensors()
    if not config.probe_only:
        trainable = encoder.encoder_tensors() + trainable
    state = OptimizerState.for_params(trainable)
    bs = max(2, min(config.finetune_batch_size, len(labelled)))
    for epoch in range(config.finetune_epochs):
        for x, y in batches(labelled, bs, config.seed + 1, epoch, drop_last=False):
            _zero(trainable)
            with Tape() as tape:
                # a frozen encoder runs with its stored statistics
                h = encoder.forward(x, train=not config.probe_only)
                if config.probe_only:
                    h = h.detach()
                loss = cross_entropy(encoder.probe(h), y)
                tape.backward(loss)
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(f"non-finite fine-tune loss in epoch {epoch}", None)
            adam_step(trainable, _grads(trainable), state, config.lr_finetune)
            _zero(trainable)
        encoder.check_finite()
    metrics = evaluate(predict_logits(encoder, test), test.labels, encoder.config.num_classes)
    metrics["n_labelled"] = len(labelled)
    metrics["n_test"] = len(test)
    return encoder, metrics


def supervised_baseline(train: Dataset, test: Dataset, config: TrainConfig):
    encoder = Encoder(_encoder_config(train), seed=config.seed)
    return finetune(encoder, train, test, config)


# ------------------------------------------------------------------ metrics

BINARY_METRICS = ("sensitivity", "specificity", "auc")


def evaluate(logits, labels, classes: int | None = None, metrics=None) -> dict:
    """Accuracy and macro-F1 always; sensitivity, specificity and AUC for two classes."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    classes = classes or logits.shape[1]
    binary = classes == 2
    wanted = metrics or (("accuracy", "macro_f1") + (BINARY_METRICS if binary else ()))
    bad = [m for m in wanted if m in BINARY_METRICS and not binary]
    if bad:
        raise ValueError(f"{bad} need binary labels, got {classes} classes")
    pred = np.argmax(logits, axis=1)
    out = {}
    if "accuracy" in wanted:
        out["accuracy"] = float(np.mean(pred == labels)) if labels.size else float("nan")
    if "macro_f1" in wanted:
        out["macro_f1"] = macro_f1(labels, pred)
    if binary:
        tp = int(np.sum((pred == 1) & (labels == 1)))
        fn = int(np.sum((pred == 0) & (labels == 1)))
        tn = int(np.sum((pred == 0) & (labels == 0)))
        fp = int(np.sum((pred == 1) & (labels == 0)))
        if "sensitivity" in wanted:
            out["sensitivity"] = tp / (tp + fn) if tp + fn else float("nan")
        if "specificity" in wanted:
            out["specificity"] = tn / (tn + fp) if tn + fp else float("nan")
        if "auc" in wanted:
            # the logit margin orders samples exactly as p(class 1) does, without rounding ties
            out["auc"] = auc(labels, logits[:, 1] - logits[:, 0])
    return out


def macro_f1(labels, pred) -> float:
    labels, pred = np.asarray(labels), np.asarray(pred)
    scores = []
    for c in np.union1d(labels, pred):
        tp = np.sum((pred == c) & (labels == c))
        fp = np.sum((pred == c) & (labels != c))
        fn = np.sum((pred != c) & (labels == c))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores)) if scores else float("nan")


def auc(labels, scores) -> float:
    """Mann-Whitney rank statistic; tied scores share their average rank."""
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


# --------------------------------------------------------------------- grid

DEFAULT_SIGMAS = (0.01, 0.02, 0.03, 0.04, 0.05)
GRID_HEADER = "sigma,accuracy,macro_f1"


def baseline_grid(train: Dataset, test: Dataset, config: TrainConfig, sigmas=DEFAULT_SIGMAS) -> list[dict]:
    """Fixed-intensity contrastive pretraining + fine-tuning, one row per sigma."""
    sigmas = list(sigmas)
    if not sigmas:
        raise ValueError("empty sigma list")
    rows = []
    for sigma in sigmas:
        cfg = _replace(config, mode="fixed-sigma", sigma=float(sigma))
        encoder, _, _ = pretrain_adversarial(train, cfg)
        _, metrics = finetune(encoder, train, test, cfg)
        rows.append({"sigma": float(sigma), "accuracy": metrics["accuracy"], "macro_f1": metrics["macro_f1"]})
        log.info("grid sigma=%.2f acc=%.4f f1=%.4f", sigma, metrics["accuracy"], metrics["macro_f1"])
    return rows


def _replace(config: TrainConfig, **changes) -> TrainConfig:
    return TrainConfig(**{**asdict(config), **changes})


def write_grid_csv(path, rows: list[dict]):
    with open(path, "w") as fh:
        fh.write(GRID_HEADER + "\n")
        for r in rows:
            fh.write(f"{round(r['sigma'], 10)!r},{r['accuracy']!r},{r['macro_f1']!r}\n")


def table_cell(accuracy: float, macro_f1: float) -> str:
    """Accuracy in percent and macro-F1 as a fraction, e.g. ``78.8/0.775``."""
    return f"{100 * accuracy:.1f}/{macro_f1:.3f}"


# -------------------------------------------------------------- checkpoints


def save_encoder(path, encoder: Encoder):
    meta = {"kind": "encoder", "config": json.dumps(asdict(encoder.config), sort_keys=True)}
    write_checkpoint(path, encoder.state(), meta)


def load_encoder(path) -> Encoder:
    arrays, meta = read_checkpoint(path)
    if meta.get("kind") != "encoder":
        raise ValueError(f"{path} is not an encoder checkpoint")
    cfg = json.loads(meta["config"])
    cfg["widths"], cfg["strides"] = tuple(cfg["widths"]), tuple(cfg["strides"])
    encoder = Encoder(EncoderConfig(**cfg))
    encoder.load_state(arrays)
    return encoder


def save_augment(path, params: AugmentParams):
    meta = {"kind": "augment", "bounds": json.dumps(asdict(params.bounds), sort_keys=True)}
    write_checkpoint(path, {k: t.data for k, t in params.named_tensors().items()}, meta)


def load_augment(path) -> AugmentParams:
    arrays, meta = read_checkpoint(path)
    if meta.get("kind") != "augment":
        raise ValueError(f"{path} is not an augmentation checkpoint")
    return AugmentParams.from_arrays(arrays, AugmentBounds(**json.loads(meta["bounds"])))
