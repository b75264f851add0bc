"""Training loop: teacher forcing, masked cross entropy, Adam/Adamax.

The learning rate ramps linearly from base_lr to peak_lr over the first
warmup_fraction of all steps, then stays constant. Early stopping watches
validation loss with strict-improvement comparison and restores the best
weights on every exit path. One run seed drives shuffling and augmentation,
so a repeated run reproduces its loss history bit for bit.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .errors import EmptySplit, LengthMismatch, NonFinite, ShapeMismatch, ValidationError
from .textpipe import PAD_ID, TokenSequence
from .transformer import CaptionModel
from .vision import FeatureMap, Image, TinyCnnParams, TINYCNN, augment_hflip, tinycnn_rows

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    batch_size: int = 64
    base_lr: float = 1e-5
    peak_lr: float = 1e-4
    warmup_fraction: float = 0.1
    max_epochs: int = 30
    patience: int = 5
    seed: int = 42
    optimizer_kind: str = "adamax"
    hflip_prob: float = 0.5

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValidationError("batch_size/max_epochs/patience must be >= 1")
        if not (0.0 < self.base_lr <= self.peak_lr):
            raise ValidationError(
                f"need 0 < base_lr <= peak_lr, got {self.base_lr}, {self.peak_lr}")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ValidationError(f"warmup_fraction {self.warmup_fraction} outside [0, 1]")
        if self.optimizer_kind not in ("adam", "adamax"):
            raise ValidationError(f"unknown optimizer {self.optimizer_kind!r}")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValidationError(f"hflip_prob {self.hflip_prob} outside [0, 1]")

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        try:
            return cls(**payload)
        except TypeError as exc:
            raise ValidationError(f"bad train config: {exc}") from None


@dataclass
class OptimizerState:
    kind: str
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def cross_entropy_masked(logits: nm.Tensor, targets: TokenSequence,
                         ) -> tuple[nm.Tensor, nm.Tensor]:
    """(per-position losses, mean over non-pad positions).

    Pad positions contribute exactly zero. Rows are softmaxed internally, so
    logits arrive unnormalized.
    """
    ids = np.asarray(targets.ids, dtype=np.int64)
    if logits.data.ndim != 2 or logits.shape[0] != ids.size:
        raise LengthMismatch(
            f"logits rows {logits.shape} vs {ids.size} target positions")
    mask = (ids != PAD_ID).astype(logits.data.dtype)
    n_active = float(mask.sum())
    if n_active == 0:
        raise LengthMismatch("all target positions are padding")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - logsumexp
    rows = np.arange(ids.size)
    per_pos_values = -log_probs[rows, ids] * mask

    def bwd(g):
        probs = np.exp(log_probs)
        onehot = np.zeros_like(probs)
        onehot[rows, ids] = 1.0
        return ((probs - onehot) * (g * mask)[:, None],)

    per_pos = nm.record_op(per_pos_values, (logits,), bwd)
    mean = nm.scale(nm.reduce_sum(per_pos), 1.0 / n_active)
    return per_pos, mean


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup from base_lr to peak_lr, then constant peak_lr."""
    if step < 0 or total_steps < 1:
        raise ValidationError(f"bad schedule query step={step} total={total_steps}")
    if cfg.warmup_fraction == 0.0:
        return cfg.peak_lr
    warmup_steps = max(1, round(cfg.warmup_fraction * total_steps))
    if step >= warmup_steps:
        return cfg.peak_lr
    return cfg.base_lr + (cfg.peak_lr - cfg.base_lr) * (step / warmup_steps)


def optimizer_step(params: dict[str, nm.Tensor], grads: dict[str, np.ndarray],
                   state: OptimizerState, lr: float) -> None:
    """One Adam or Adamax update in place. Missing grads mean zero."""
    state.step += 1
    t = state.step
    b1, b2 = ADAM_BETA1, ADAM_BETA2
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"grad shape {g.shape} for param {name!r} {p.data.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m += (1 - b1) * (g - m)
        if state.kind == "adam":
            v += (1 - b2) * (g * g - v)
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        elif state.kind == "adamax":
            np.maximum(b2 * v, np.abs(g), out=v)
            p.data = p.data - (lr / (1 - b1 ** t)) * m / (v + ADAM_EPS)
        else:
            raise ValidationError(f"unknown optimizer {state.kind!r}")


class EarlyStopper:
    """Strict-improvement patience counter.

    Training stops once the gap since the best epoch exceeds patience, so
    patience=2 tolerates two stale epochs and stops on the third.
    """

    def __init__(self, patience: int):
        self.patience = patience
        self.best_val = float("inf")
        self.best_epoch = -1

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record one epoch; returns True when training should stop."""
        if val_loss < self.best_val:
            self.best_val = val_loss
            self.best_epoch = epoch
        return (epoch - self.best_epoch) > self.patience


# ---------------------------------------------------------------------------
# trainable captioners


@dataclass
class Example:
    image_id: str
    caption: TokenSequence
    features: list[FeatureMap] | None = None
    image: Image | None = None

    def __post_init__(self):
        if (self.features is None) == (self.image is None):
            raise ValidationError(f"example {self.image_id!r} needs features xor an image")


@dataclass
class Dataset:
    train: list[Example]
    val: list[Example]


class FeatureCaptioner:
    """CaptionModel driven by precomputed feature vectors."""

    def __init__(self, model: CaptionModel):
        self.model = model

    @property
    def config(self):
        return self.model.config

    def parameters(self) -> dict[str, nm.Tensor]:
        return self.model.parameters()

    def memory(self, example: Example) -> nm.Tensor:
        if example.features is None:
            raise ValidationError(f"example {example.image_id!r} has no features")
        return self.model.encode(example.features)

    def sequence_logits(self, memory: nm.Tensor, ids: list[int]) -> nm.Tensor:
        return self.model.sequence_logits(memory, ids)

    def next_token_logits(self, ids: list[int], memory) -> np.ndarray:
        return self.model.next_token_logits(ids, memory)


class TinyCnnCaptioner(FeatureCaptioner):
    """CaptionModel fed by the trainable CNN; gradients reach both parts."""

    def __init__(self, model: CaptionModel, cnn: TinyCnnParams):
        if TINYCNN not in model.config.sources:
            raise ValidationError("model config lacks a tinycnn source")
        if model.config.sources[TINYCNN] != cnn.d_model:
            raise ValidationError(
                f"cnn emits {cnn.d_model}, model expects {model.config.sources[TINYCNN]}")
        super().__init__(model)
        self.cnn = cnn

    def parameters(self) -> dict[str, nm.Tensor]:
        params = dict(self.model.parameters())
        params.update(self.cnn.parameters())
        return params

    def memory(self, example: Example) -> nm.Tensor:
        if example.image is None:
            return super().memory(example)
        rows = tinycnn_rows(example.image, self.cnn)
        return self.model.encode_rows([self.model.project_source(TINYCNN, rows)])


# ---------------------------------------------------------------------------
# fit


def _snapshot(params: dict[str, nm.Tensor]) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in params.items()}


def _restore(params: dict[str, nm.Tensor], snap: dict[str, np.ndarray]) -> None:
    for name, p in params.items():
        p.data = snap[name].copy()


def _example_loss(captioner: FeatureCaptioner, example: Example,
                  flip: bool) -> tuple[nm.Tensor, int]:
    ex = example
    if flip and ex.image is not None:
        ex = Example(image_id=ex.image_id, caption=ex.caption,
                     image=augment_hflip(ex.image))
    content = ex.caption.content()
    if len(content) < 2:
        raise ValidationError(f"caption for {ex.image_id!r} is too short to teacher-force")
    dec_in = content[:-1]
    dec_tgt = content[1:]
    memory = captioner.memory(ex)
    logits = captioner.sequence_logits(memory, dec_in)
    _, mean = cross_entropy_masked(logits, TokenSequence(ids=dec_tgt))
    return mean, len(dec_tgt)


def fit(captioner: FeatureCaptioner, dataset: Dataset, cfg: TrainConfig) -> list[dict]:
    """Train in place; returns per-epoch history records."""
    if not dataset.train or not dataset.val:
        raise EmptySplit("both train and validation splits must be non-empty")
    params = captioner.parameters()
    state = OptimizerState(kind=cfg.optimizer_kind)
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = (len(dataset.train) + cfg.batch_size - 1) // cfg.batch_size
    total_steps = steps_per_epoch * cfg.max_epochs
    stopper = EarlyStopper(cfg.patience)
    best_weights = _snapshot(params)
    history: list[dict] = []
    global_step = 0

    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(dataset.train))
        flips = rng.random(len(dataset.train)) < cfg.hflip_prob
        epoch_loss = 0.0
        last_lr = lr_at(global_step, total_steps, cfg)
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            for p in params.values():
                p.zero_grad()
            batch_loss = 0.0
            for pos in batch:
                example = dataset.train[int(pos)]
                try:
                    with nm.GradTape() as tape:
                        mean, _ = _example_loss(captioner, example, bool(flips[pos]))
                        scaled = nm.scale(mean, 1.0 / len(batch))
                    nm.backward(scaled, tape)
                except NonFinite as exc:
                    raise NonFinite(
                        f"non-finite loss at epoch {epoch}, step {global_step} "
                        f"(image {example.image_id!r}): {exc}") from exc
                batch_loss += float(mean.data)
            epoch_loss += batch_loss
            last_lr = lr_at(global_step, total_steps, cfg)
            grads = {name: p.grad for name, p in params.items() if p.grad is not None}
            optimizer_step(params, grads, state, last_lr)
            global_step += 1
        train_loss = epoch_loss / len(dataset.train)
        val_loss = evaluate_loss(captioner, dataset.val)
        history.append({"epoch": epoch, "train_loss": round(float(train_loss), 8),
                        "val_loss": round(float(val_loss), 8), "lr": last_lr})
        improved = val_loss < stopper.best_val
        stop = stopper.update(epoch, val_loss)
        if improved:
            best_weights = _snapshot(params)
        log.info("epoch %d train %.4f val %.4f lr %.2e", epoch, train_loss, val_loss, last_lr)
        if stop:
            log.info("early stop after epoch %d; best epoch %d", epoch, stopper.best_epoch)
            break
    _restore(params, best_weights)
    return history


def evaluate_loss(captioner: FeatureCaptioner, examples: list[Example]) -> float:
    """Mean teacher-forced loss without gradients or augmentation."""
    if not examples:
        raise EmptySplit("no examples to evaluate")
    total = 0.0
    for example in examples:
        mean, _ = _example_loss(captioner, example, flip=False)
        total += float(mean.data)
    return total / len(examples)


def history_to_json(history: list[dict], timestamp: str | None = None) -> str:
    payload = {"epochs": history}
    if timestamp is not None:
        payload["generated_at"] = timestamp
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"
