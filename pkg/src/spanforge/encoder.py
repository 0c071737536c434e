"""Miniature post-norm bidirectional transformer with MLM, NSP and span heads."""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, fields

import numpy as np

from . import numerics as nx
from .errors import ConfigError, InputError
from .numerics import Tape, Tensor
from .tokenizer import MASK_ID, SPECIALS, EncodedWindow, pack_sentence_pair

N_SPECIAL = len(SPECIALS)
PROJECTIONS = ("query", "key", "value", "output")


@dataclass
class EncoderConfig:
    vocab_size: int = 256
    layers: int = 2
    heads: int = 2
    hidden: int = 32
    ffn: int = 64
    max_positions: int = 384
    segment_types: int = 2
    mask_prob: float = 0.15
    masking_mode: str = "dynamic"
    nsp_weight: float = 1.0
    layer_norm_eps: float = 1e-12
    init_std: float = 0.02

    def validate(self) -> "EncoderConfig":
        for name in ("vocab_size", "layers", "heads", "hidden", "ffn", "max_positions"):
            if getattr(self, name) < 1:
                raise ConfigError(f"encoder.{name} must be positive")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden size {self.hidden} is not divisible by {self.heads} heads")
        if self.segment_types != 2:
            raise ConfigError("segment_types must be 2")
        if not 0.0 < self.mask_prob < 1.0:
            raise ConfigError(f"mask_prob must lie in (0, 1), got {self.mask_prob}")
        if self.masking_mode not in ("static", "dynamic"):
            raise ConfigError(f"masking_mode must be static or dynamic, got {self.masking_mode!r}")
        if self.vocab_size <= N_SPECIAL:
            raise ConfigError("vocab_size must exceed the number of special tokens")
        return self

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def param_shapes(cfg: EncoderConfig) -> dict:
    d, f, V = cfg.hidden, cfg.ffn, cfg.vocab_size
    shapes = {
        "embeddings.token": (V, d),
        "embeddings.position": (cfg.max_positions, d),
        "embeddings.segment": (cfg.segment_types, d),
        "embeddings.norm.gamma": (d,),
        "embeddings.norm.beta": (d,),
    }
    for l in range(cfg.layers):
        p = f"layers.{l}"
        for proj in PROJECTIONS:
            shapes[f"{p}.attention.{proj}.weight"] = (d, d)
            shapes[f"{p}.attention.{proj}.bias"] = (d,)
        shapes[f"{p}.attention.norm.gamma"] = (d,)
        shapes[f"{p}.attention.norm.beta"] = (d,)
        shapes[f"{p}.ffn.in.weight"] = (d, f)
        shapes[f"{p}.ffn.in.bias"] = (f,)
        shapes[f"{p}.ffn.out.weight"] = (f, d)
        shapes[f"{p}.ffn.out.bias"] = (d,)
        shapes[f"{p}.ffn.norm.gamma"] = (d,)
        shapes[f"{p}.ffn.norm.beta"] = (d,)
    shapes.update({
        "mlm.transform.weight": (d, d),
        "mlm.transform.bias": (d,),
        "mlm.norm.gamma": (d,),
        "mlm.norm.beta": (d,),
        "mlm.decoder.weight": (d, V),
        "mlm.decoder.bias": (V,),
        "nsp.weight": (d, 2),
        "nsp.bias": (2,),
        "span.start": (d,),
        "span.end": (d,),
    })
    return shapes


PRETRAIN_HEADS = ("mlm.", "nsp.")
SPAN_HEADS = ("span.start", "span.end")


class EncoderWeights:
    """Named parameter tensors of one encoder instance."""

    def __init__(self, config: EncoderConfig, params: dict):
        self.config = config
        expected = param_shapes(config)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ConfigError(f"weights do not match config: missing {missing[:4]}, unexpected {extra[:4]}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ConfigError(f"{name} has shape {params[name].shape}, expected {shape}")
        self.params = {name: params[name] for name in expected}

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def names(self):
        return list(self.params)

    def trainable(self) -> list:
        return [t for t in self.params.values() if t.requires_grad]

    def set_trainable(self, predicate):
        for name, t in self.params.items():
            t.requires_grad = bool(predicate(name))

    def copy(self) -> "EncoderWeights":
        out = {}
        for name, t in self.params.items():
            out[name] = Tensor(t.data.copy(), requires_grad=t.requires_grad, name=name, dtype=t.data.dtype)
        return EncoderWeights(self.config, out)

    def digest(self, names=None) -> str:
        h = hashlib.sha256()
        for name in names or self.params:
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def qa_names(self):
        return [n for n in self.params if not n.startswith(PRETRAIN_HEADS)]


def _truncated_normal(rng, shape, std):
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def init_weights(config: EncoderConfig, seed=0) -> EncoderWeights:
    config.validate()
    rng = nx.make_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gamma"):
            data = np.ones(shape)
        elif name.endswith((".beta", ".bias")):
            data = np.zeros(shape)
        else:
            data = _truncated_normal(rng, shape, config.init_std)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return EncoderWeights(config, params)


# -------------------------------------------------------------------- batching

@dataclass
class Batch:
    token_ids: np.ndarray
    segment_ids: np.ndarray
    attention_mask: np.ndarray

    @classmethod
    def from_windows(cls, windows) -> "Batch":
        if isinstance(windows, EncodedWindow):
            windows = [windows]
        return cls(
            np.array([w.token_ids for w in windows], dtype=np.int64),
            np.array([w.segment_ids for w in windows], dtype=np.int64),
            np.array([w.attention_mask for w in windows], dtype=bool),
        )


def span_valid_mask(windows) -> np.ndarray:
    """Valid answer positions per window: the context tokens plus position 0 (no-answer slot)."""
    if isinstance(windows, EncodedWindow):
        windows = [windows]
    mask = np.zeros((len(windows), windows[0].length), dtype=bool)
    for i, w in enumerate(windows):
        mask[i, 0] = True
        mask[i, w.context_start:w.context_start + w.n_context] = True
    return mask


# ---------------------------------------------------------------------- forward

def _linear(x, weights, name, adapters=None, training=False, rng=None):
    out = nx.matmul(x, weights[f"{name}.weight"]) + weights[f"{name}.bias"]
    if adapters and name in adapters:
        out = out + adapters[name].delta(x, training=training, rng=rng)
    return out


def _split_heads(x, B, L, h, dh, key=False):
    x = nx.reshape(x, (B, L, h, dh))
    return nx.transpose(x, (0, 2, 3, 1) if key else (0, 2, 1, 3))


def encode_batch(batch: Batch, weights: EncoderWeights, adapters=None, training=False, rng=None,
                 token_ids=None) -> Tensor:
    """Contextual embeddings ``H`` of shape (B, L, d); ``token_ids`` overrides the batch ids (MLM corruption)."""
    cfg = weights.config
    ids = batch.token_ids if token_ids is None else token_ids
    B, L = ids.shape
    if L > cfg.max_positions:
        raise InputError(f"sequence length {L} exceeds max_positions {cfg.max_positions}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise InputError(f"token id outside vocabulary of size {cfg.vocab_size}")
    if batch.segment_ids.max() >= cfg.segment_types:
        raise InputError("segment id out of range")
    d, h = cfg.hidden, cfg.heads
    dh = d // h
    eps = cfg.layer_norm_eps

    x = nx.embedding(weights["embeddings.token"], ids)
    x = x + nx.embedding(weights["embeddings.position"], np.arange(L))
    x = x + nx.embedding(weights["embeddings.segment"], batch.segment_ids)
    x = nx.layer_norm(x, weights["embeddings.norm.gamma"], weights["embeddings.norm.beta"], eps)

    key_mask = batch.attention_mask[:, None, None, :]
    inv_sqrt = 1.0 / np.sqrt(dh)
    for l in range(cfg.layers):
        p = f"layers.{l}.attention"
        q = _split_heads(_linear(x, weights, f"{p}.query", adapters, training, rng), B, L, h, dh)
        k = _split_heads(_linear(x, weights, f"{p}.key", adapters, training, rng), B, L, h, dh, key=True)
        v = _split_heads(_linear(x, weights, f"{p}.value", adapters, training, rng), B, L, h, dh)
        scores = nx.scale(nx.matmul(q, k), inv_sqrt)
        probs = nx.softmax_rows(scores, key_mask)
        ctx = nx.reshape(nx.transpose(nx.matmul(probs, v), (0, 2, 1, 3)), (B, L, d))
        attn = _linear(ctx, weights, f"{p}.output", adapters, training, rng)
        x = nx.layer_norm(x + attn, weights[f"{p}.norm.gamma"], weights[f"{p}.norm.beta"], eps)

        f = f"layers.{l}.ffn"
        hdn = nx.gelu(_linear(x, weights, f"{f}.in", adapters, training, rng))
        x = nx.layer_norm(x + _linear(hdn, weights, f"{f}.out", adapters, training, rng),
                          weights[f"{f}.norm.gamma"], weights[f"{f}.norm.beta"], eps)
    return x


def encode(window, weights: EncoderWeights, adapters=None, training=False, rng=None) -> Tensor:
    """``H`` (L x d) for one window, or (B x L x d) for a list of windows."""
    single = isinstance(window, EncodedWindow)
    H = encode_batch(Batch.from_windows(window), weights, adapters, training, rng)
    return H[0] if single else H


# ------------------------------------------------------------------ span heads

def span_logits(H: Tensor, weights: EncoderWeights, valid=None):
    """Start/end probability rows; positions outside ``valid`` get probability exactly 0."""
    ps = nx.softmax_rows(nx.matmul(H, weights["span.start"]), valid)
    pe = nx.softmax_rows(nx.matmul(H, weights["span.end"]), valid)
    return ps, pe


def qa_loss(p_start: Tensor, p_end: Tensor, s_star, e_star) -> Tensor:
    """``-log P_s[s*] - log P_e[e*]``, summed over the batch when given rows of probabilities."""
    n = p_start.shape[-1]
    for name, idx, p in (("s_star", s_star, p_start), ("e_star", e_star, p_end)):
        idx = np.asarray(idx)
        if np.any(idx < 0) or np.any(idx >= n):
            raise IndexError(f"{name}={idx} outside [0, {n})")
        rows = np.arange(idx.size).reshape(idx.shape) if idx.ndim else ()
        picked = p.data[(rows, idx)] if idx.ndim else p.data[int(idx)]
        if np.any(picked == 0.0):
            raise IndexError(f"{name}={idx} points at a masked position")
    total = nx.nll_pick(p_start, s_star) + nx.nll_pick(p_end, e_star)
    return nx.sum_all(total) if total.ndim else total


# ---------------------------------------------------------------- pretraining

@dataclass
class MaskedBatch:
    input_ids: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    targets: np.ndarray


def maskable_positions(batch: Batch) -> np.ndarray:
    return batch.attention_mask & (batch.token_ids >= N_SPECIAL)


def _mask_row(ids, maskable, p_m, rng, vocab_size):
    cand = np.flatnonzero(maskable)
    if cand.size == 0:
        return ids, cand
    chosen = cand[rng.random(cand.size) < p_m]
    if chosen.size == 0:
        chosen = cand[[rng.integers(cand.size)]]
    out = ids.copy()
    roll = rng.random(chosen.size)
    randoms = rng.integers(N_SPECIAL, vocab_size, size=chosen.size)
    out[chosen[roll < 0.8]] = MASK_ID
    swap = (roll >= 0.8) & (roll < 0.9)
    out[chosen[swap]] = randoms[swap]
    return out, chosen


def apply_masking(batch: Batch, p_m: float, rngs, vocab_size: int) -> MaskedBatch:
    """Pick masked positions per row (at least one) and apply the 80/10/10 corruption."""
    if not 0.0 < p_m < 1.0:
        raise ConfigError(f"mask probability must lie in (0, 1), got {p_m}")
    maskable = maskable_positions(batch)
    if not maskable.any():
        raise InputError("batch has no maskable tokens")
    if isinstance(rngs, np.random.Generator):
        rngs = [rngs] * len(batch.token_ids)
    ids = batch.token_ids.copy()
    rows, cols = [], []
    for i, rng in enumerate(rngs):
        ids[i], chosen = _mask_row(batch.token_ids[i], maskable[i], p_m, rng, vocab_size)
        rows.extend([i] * chosen.size)
        cols.extend(chosen.tolist())
    rows = np.array(rows, dtype=np.int64)
    cols = np.array(cols, dtype=np.int64)
    return MaskedBatch(ids, rows, cols, batch.token_ids[rows, cols])


class Masker:
    """Static masking fixes each example's mask by (seed, key); dynamic masking redraws every call."""

    def __init__(self, mode: str, p_m: float, seed: int, vocab_size: int):
        if mode not in ("static", "dynamic"):
            raise ConfigError(f"masking mode must be static or dynamic, got {mode!r}")
        self.mode, self.p_m, self.seed, self.vocab_size = mode, p_m, seed, vocab_size
        self.rng = nx.make_rng(np.random.SeedSequence([seed, 1]))

    def __call__(self, batch: Batch, keys) -> MaskedBatch:
        if self.mode == "static":
            rngs = [nx.make_rng(np.random.SeedSequence([self.seed, 0, int(k)])) for k in keys]
        else:
            rngs = self.rng
        return apply_masking(batch, self.p_m, rngs, self.vocab_size)


def mlm_loss_from_hidden(H: Tensor, masked: MaskedBatch, weights: EncoderWeights) -> Tensor:
    eps = weights.config.layer_norm_eps
    sel = H[masked.rows, masked.cols]
    t = nx.gelu(nx.matmul(sel, weights["mlm.transform.weight"]) + weights["mlm.transform.bias"])
    t = nx.layer_norm(t, weights["mlm.norm.gamma"], weights["mlm.norm.beta"], eps)
    logits = nx.matmul(t, weights["mlm.decoder.weight"]) + weights["mlm.decoder.bias"]
    logp = nx.log_softmax_rows(logits)
    picked = logp[np.arange(len(masked.targets)), masked.targets]
    return nx.neg(nx.mean_all(picked))


def mlm_loss(windows, weights: EncoderWeights, p_m: float, rng, masked: MaskedBatch | None = None) -> Tensor:
    """Mean negative log-likelihood of the original tokens at the masked positions."""
    batch = Batch.from_windows(windows)
    if masked is None:
        masked = apply_masking(batch, p_m, nx.make_rng(rng), weights.config.vocab_size)
    H = encode_batch(batch, weights, token_ids=masked.input_ids)
    return mlm_loss_from_hidden(H, masked, weights)


def _check_labels(labels):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or not np.isin(labels, (0, 1)).all():
        raise InputError(f"next-sentence labels must be 0 or 1, got {labels.tolist()}")
    return labels


def nsp_loss_from_hidden(H: Tensor, labels, weights: EncoderWeights) -> Tensor:
    labels = _check_labels(labels)
    cls = H[:, 0, :]
    logits = nx.matmul(cls, weights["nsp.weight"]) + weights["nsp.bias"]
    logp = nx.log_softmax_rows(logits)
    # -y log P(1) - (1 - y) log(1 - P(1)) == -log p[y] with a 2-way softmax
    return nx.neg(nx.mean_all(logp[np.arange(len(labels)), labels]))


def nsp_loss(windows, labels, weights: EncoderWeights) -> Tensor:
    labels = _check_labels(labels)
    H = encode_batch(Batch.from_windows(windows), weights)
    return nsp_loss_from_hidden(H, labels, weights)


@dataclass
class PretrainLosses:
    mlm: float
    nsp: float
    total: float


def pretrain_loss(batch: Batch, masked: MaskedBatch, labels, weights: EncoderWeights, nsp_weight=1.0):
    H = encode_batch(batch, weights, token_ids=masked.input_ids)
    l_mlm = mlm_loss_from_hidden(H, masked, weights)
    l_nsp = nsp_loss_from_hidden(H, labels, weights)
    if nsp_weight == 0:
        return l_mlm, l_nsp, l_mlm
    total = l_mlm + (l_nsp if nsp_weight == 1 else nx.scale(l_nsp, nsp_weight))
    return l_mlm, l_nsp, total


def pretrain_step(windows, labels, weights: EncoderWeights, state: nx.AdamWState, masker: Masker,
                  keys=None) -> PretrainLosses:
    """One AdamW step on L_MLM + nsp_weight * L_NSP over every trainable weight."""
    batch = Batch.from_windows(windows)
    keys = range(len(windows)) if keys is None else keys
    masked = masker(batch, keys)
    params = weights.trainable()
    with Tape() as tape:
        l_mlm, l_nsp, total = pretrain_loss(batch, masked, labels, weights, weights.config.nsp_weight)
    grads = tape.backward(total, params)
    nx.adamw_step(params, [grads[p] for p in params], state)
    return PretrainLosses(l_mlm.item(), l_nsp.item(), total.item())


def split_sentences(text: str) -> list[str]:
    parts = re.split(r"(?<=[।॥?!.])\s+", text.strip())
    return [p for p in parts if p.strip()]


def build_nsp_pairs(contexts, vocab, max_len: int, seed=0):
    """Adjacent sentences of one context are positives; a sentence from another context is the negative."""
    rng = nx.make_rng(seed)
    docs = [split_sentences(c) for c in contexts]
    pool = [(i, s) for i, sents in enumerate(docs) for s in sents]
    windows, labels = [], []
    for i, sents in enumerate(docs):
        for a, b in zip(sents, sents[1:]):
            if rng.random() < 0.5 or len(docs) < 2:
                windows.append(pack_sentence_pair(a, b, vocab, max_len))
                labels.append(1)
                continue
            j, other = pool[rng.integers(len(pool))]
            while j == i:
                j, other = pool[rng.integers(len(pool))]
            windows.append(pack_sentence_pair(a, other, vocab, max_len))
            labels.append(0)
    if not windows:
        raise InputError("pretraining corpus needs at least one context with two sentences")
    return windows, labels


def pretrain(weights: EncoderWeights, windows, labels, steps: int, batch_size: int = 16, lr: float = 1e-3,
             weight_decay: float = 0.01, seed: int = 0, log=None) -> list[PretrainLosses]:
    weights.set_trainable(lambda name: True)
    params = weights.trainable()
    state = nx.AdamWState.for_params(params, lr=lr, weight_decay=weight_decay)
    cfg = weights.config
    masker = Masker(cfg.masking_mode, cfg.mask_prob, seed, cfg.vocab_size)
    order_rng = nx.make_rng(np.random.SeedSequence([seed, 2]))
    history = []
    order = []
    for step in range(steps):
        if len(order) < batch_size:
            order.extend(order_rng.permutation(len(windows)).tolist())
        idx, order = order[:batch_size], order[batch_size:]
        losses = pretrain_step([windows[i] for i in idx], [labels[i] for i in idx], weights, state, masker, keys=idx)
        history.append(losses)
        if log is not None:
            log(step + 1, losses)
    return history
