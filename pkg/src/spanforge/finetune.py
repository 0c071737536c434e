"""Full fine-tuning and LoRA fine-tuning of the span heads' encoder."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import numerics as nx
from .dataset import align_answer
from .encoder import SPAN_HEADS, Batch, encode_batch, qa_loss, span_logits, span_valid_mask
from .errors import ConfigError, DimensionError, InputError
from .numerics import Tape, Tensor
from .tokenizer import encode_pair

LORA_TARGETS = ("query", "value")
RANK_SWEEP = (2, 4, 8, 16, 32)


@dataclass
class FinetuneConfig:
    mode: str = "sft"
    lr: float = 3e-5
    batch_size: int = 48
    max_epochs: int = 3
    weight_decay: float = 0.01
    lora_rank: int = 8
    lora_dropout: float = 0.1
    lambda_reg: float = 1e-4
    early_stop_patience: int = 1
    seed: int = 0
    max_steps: int = 0  # 0 means no step cap

    def validate(self) -> "FinetuneConfig":
        if self.mode not in ("sft", "lora"):
            raise ConfigError(f"mode must be sft or lora, got {self.mode!r}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be positive")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be non-negative")
        if not np.isfinite(self.lambda_reg) or self.lambda_reg < 0:
            raise ConfigError(f"lambda_reg must be finite and non-negative, got {self.lambda_reg}")
        if self.mode == "lora":
            if self.lora_rank < 1:
                raise ConfigError("lora_rank must be positive")
            if not 0.0 <= self.lora_dropout < 1.0:
                raise ConfigError("lora_dropout must lie in [0, 1)")
        return self

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ---------------------------------------------------------------------- LoRA

class LoraAdapter:
    """Low-rank update ``B @ A.T`` for one frozen projection ``W`` (d x k); ``A`` is k x r, ``B`` is d x r."""

    def __init__(self, target: str, A: Tensor, B: Tensor, dropout_p: float = 0.1):
        if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
            raise DimensionError(f"adapter factors disagree: A {A.shape}, B {B.shape}")
        self.target = target
        self.A = A
        self.B = B
        self.dropout_p = dropout_p

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    def tensors(self) -> list:
        return [self.A, self.B]

    def delta_weight(self) -> Tensor:
        return nx.matmul(self.B, nx.transpose(self.A))

    def delta(self, x: Tensor, training=False, rng=None) -> Tensor:
        """``dropout(x) @ B @ A.T``; only the adapter branch sees dropout."""
        xin = nx.dropout(x, self.dropout_p, rng, training)
        return nx.matmul(nx.matmul(xin, self.B), nx.transpose(self.A))


def inject_lora(weights, config: FinetuneConfig, seed=None) -> dict:
    """Freeze the encoder and attach one adapter per (layer, query/value) projection.

    ``A`` starts normal(0, 0.02) and ``B`` starts at zero, so the adapted model
    initially computes exactly what the base computes. Span heads stay trainable.
    """
    config.validate()
    if config.mode != "lora":
        raise ConfigError("inject_lora requires mode == 'lora'")
    rng = nx.make_rng(np.random.SeedSequence([config.seed if seed is None else seed, 3]))
    adapters = {}
    for l in range(weights.config.layers):
        for target in LORA_TARGETS:
            name = f"layers.{l}.attention.{target}"
            d, k = weights[f"{name}.weight"].shape
            r = config.lora_rank
            if r >= min(d, k):
                raise ConfigError(f"lora rank {r} must be smaller than min(d, k) = {min(d, k)}")
            A = Tensor(rng.normal(0.0, 0.02, size=(k, r)), requires_grad=True, name=f"{name}.lora_A")
            B = Tensor(np.zeros((d, r)), requires_grad=True, name=f"{name}.lora_B")
            adapters[name] = LoraAdapter(name, A, B, config.lora_dropout)
    weights.set_trainable(lambda name: name in SPAN_HEADS)
    return adapters


def effective_weight(W: Tensor, adapter: LoraAdapter) -> Tensor:
    delta = adapter.delta_weight()
    if delta.shape != W.shape:
        raise DimensionError(f"adapter update {delta.shape} does not match weight {W.shape}")
    return W + delta


def lora_regularizer(adapters, lam: float) -> Tensor:
    """``lam * sum ||B A^T||_F^2`` over all adapters."""
    if lam < 0:
        raise ConfigError("regularization weight must be non-negative")
    adapters = list(adapters.values()) if isinstance(adapters, dict) else list(adapters)
    total = None
    for ad in adapters:
        term = nx.lowrank_frobenius_sq(ad.A, ad.B)
        total = term if total is None else total + term
    if total is None:
        return Tensor(0.0)
    return nx.scale(total, lam)


# ----------------------------------------------------------------- features

@dataclass(frozen=True)
class Feature:
    window: object
    start: int
    end: int
    example_index: int


def build_features(examples, vocab, max_len: int = 384, stride: int = 128) -> list:
    feats = []
    for i, ex in enumerate(examples):
        for w in encode_pair(ex.question, ex.context, vocab, max_len, stride):
            s, e = align_answer(ex, w)
            feats.append(Feature(w, s, e, i))
    return feats


def _batch_arrays(feats):
    windows = [f.window for f in feats]
    return (Batch.from_windows(windows), span_valid_mask(windows),
            np.array([f.start for f in feats]), np.array([f.end for f in feats]))


def _run_epoch(feats, weights, adapters, state, config, rng, params, steps_left=None):
    if not feats:
        raise InputError("empty training set")
    order = rng.permutation(len(feats))
    total, steps = 0.0, 0
    lam = config.lambda_reg if adapters else 0.0
    for b0 in range(0, len(order), config.batch_size):
        if steps_left is not None and steps >= steps_left:
            break
        chunk = [feats[i] for i in order[b0:b0 + config.batch_size]]
        batch, valid, s, e = _batch_arrays(chunk)
        with Tape() as tape:
            H = encode_batch(batch, weights, adapters, training=True, rng=rng)
            ps, pe = span_logits(H, weights, valid)
            loss = qa_loss(ps, pe, s, e)
            if adapters and lam > 0:
                loss = loss + lora_regularizer(adapters, lam)
        grads = tape.backward(loss, params)
        nx.adamw_step(params, [grads[p] for p in params], state)
        total += loss.item()
        steps += 1
    return total / len(feats), steps


def _lora_params(weights, adapters):
    return [t for ad in adapters.values() for t in ad.tensors()] + [weights[n] for n in SPAN_HEADS]


def make_optimizer(params, config: FinetuneConfig) -> nx.AdamWState:
    return nx.AdamWState.for_params(params, lr=config.lr, weight_decay=config.weight_decay)


def sft_epoch(feats, weights, state, config: FinetuneConfig, rng, steps_left=None):
    """One pass of full fine-tuning; returns (mean per-window loss, optimizer steps taken)."""
    if config.mode != "sft":
        raise ConfigError("sft_epoch requires mode == 'sft'")
    weights.set_trainable(lambda name: True)
    params = [weights[n] for n in weights.qa_names()]
    return _run_epoch(feats, weights, None, state, config, rng, params, steps_left)


def lora_epoch(feats, weights, adapters, state, config: FinetuneConfig, rng, steps_left=None):
    """One pass updating only adapters and span heads; returns (mean per-window loss, steps)."""
    if config.mode != "lora":
        raise ConfigError("lora_epoch requires mode == 'lora'")
    return _run_epoch(feats, weights, adapters, state, config, rng, _lora_params(weights, adapters), steps_left)


def eval_loss(feats, weights, adapters=None, batch_size=48) -> float:
    if not feats:
        return float("nan")
    total = 0.0
    for b0 in range(0, len(feats), batch_size):
        batch, valid, s, e = _batch_arrays(feats[b0:b0 + batch_size])
        ps, pe = span_logits(encode_batch(batch, weights, adapters), weights, valid)
        total += qa_loss(ps, pe, s, e).item()
    return total / len(feats)


# ------------------------------------------------------------ early stopping

@dataclass(frozen=True)
class EarlyStop:
    stop: bool
    best_epoch: int  # 1-based
    stop_epoch: int | None = None


def early_stop(val_losses, patience: int) -> EarlyStop:
    """Stop once ``patience`` consecutive epochs fail to beat the best loss so far."""
    if not val_losses:
        raise InputError("early stopping needs at least one recorded epoch")
    best, best_epoch, stale = float("inf"), 0, 0
    for epoch, loss in enumerate(val_losses, start=1):
        if loss < best:
            best, best_epoch, stale = loss, epoch, 0
        else:
            stale += 1
            if patience > 0 and stale >= patience:
                return EarlyStop(True, best_epoch, epoch)
    return EarlyStop(False, best_epoch)


# ------------------------------------------------------------ training loop

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    steps: int
    seconds: float = 0.0


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False
    steps: int = 0


def train(model, train_examples, config: FinetuneConfig, val_examples=None, on_epoch=None) -> TrainResult:
    """Run up to ``max_epochs`` (or ``max_steps``) of sft or lora training on ``model`` in place.

    Validation loss drives early stopping; the best epoch's parameters are
    restored at the end. Without validation examples the training set is used.
    """
    config.validate()
    train_feats = build_features(train_examples, model.vocab, model.max_len, model.stride)
    if not train_feats:
        raise InputError("empty training set")
    val_feats = (build_features(val_examples, model.vocab, model.max_len, model.stride)
                 if val_examples else train_feats)
    weights = model.weights
    if config.mode == "lora":
        if model.adapters is None:
            model.adapters = inject_lora(weights, config)
        params = _lora_params(weights, model.adapters)
    else:
        model.adapters = None
        weights.set_trainable(lambda name: True)
        params = [weights[n] for n in weights.qa_names()]
    state = make_optimizer(params, config)
    rng = nx.make_rng(np.random.SeedSequence([config.seed, 4]))

    result = TrainResult()
    best_loss, snapshot = float("inf"), None
    val_history = []
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        left = config.max_steps - result.steps if config.max_steps else None
        if left is not None and left <= 0:
            break
        loss, steps = _run_epoch(train_feats, weights, model.adapters, state, config, rng, params, left)
        result.steps += steps
        val = eval_loss(val_feats, weights, model.adapters, config.batch_size)
        val_history.append(val)
        rec = EpochRecord(epoch, loss, val, result.steps, time.perf_counter() - t0)
        result.history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        if val < best_loss:
            best_loss = val
            snapshot = [p.data.copy() for p in params]
        decision = early_stop(val_history, config.early_stop_patience)
        result.best_epoch = decision.best_epoch
        if decision.stop:
            result.stopped_early = True
            break
    if snapshot is not None:
        for p, data in zip(params, snapshot):
            p.data[...] = data
    return result


# ------------------------------------------------------- parameter accounting

@dataclass(frozen=True)
class EncoderGeometry:
    layers: int = 12
    hidden: int = 768
    ffn: int = 3072
    vocab_size: int = 119547  # multilingual cased BERT vocabulary
    max_positions: int = 512
    segment_types: int = 2
    targets: tuple = LORA_TARGETS

    @classmethod
    def from_config(cls, cfg, targets=LORA_TARGETS) -> "EncoderGeometry":
        return cls(cfg.layers, cfg.hidden, cfg.ffn, cfg.vocab_size, cfg.max_positions, cfg.segment_types,
                   tuple(targets))

    def qa_model_params(self) -> int:
        """Embeddings + encoder layers + span heads (pretraining heads excluded)."""
        d, f = self.hidden, self.ffn
        emb = (self.vocab_size + self.max_positions + self.segment_types) * d + 2 * d
        layer = 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d) + 2 * d
        return emb + self.layers * layer + 2 * d


@dataclass(frozen=True)
class ParamCount:
    trainable: int
    total: int
    reduction_percent: float


def trainable_param_count(config: FinetuneConfig, geometry: EncoderGeometry) -> ParamCount:
    total = geometry.qa_model_params()
    if config.mode == "sft":
        return ParamCount(total, total, 0.0)
    r, d = config.lora_rank, geometry.hidden
    adapters = geometry.layers * len(geometry.targets) * r * (d + d)
    trainable = adapters + 2 * d
    return ParamCount(trainable, total, 100.0 * (1.0 - trainable / total))
