"""A tokenizer + encoder (+ optional adapters) bundle and its checkpoint round trip."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .encoder import SPAN_HEADS, EncoderConfig, EncoderWeights, encode_batch, span_logits, span_valid_mask, Batch
from .errors import IntegrityError
from .finetune import LoraAdapter
from .numerics import Tensor
from .tokenizer import Vocabulary, encode_pair


@dataclass
class QAModel:
    weights: EncoderWeights
    vocab: Vocabulary
    max_len: int = 384
    stride: int = 128
    adapters: dict | None = None

    @property
    def config(self) -> EncoderConfig:
        return self.weights.config

    def windows(self, question: str, context: str):
        return encode_pair(question, context, self.vocab, self.max_len, self.stride)

    def span_probabilities(self, windows, batch_size: int = 64):
        """Per-window (P_s, P_e) float arrays, adapters applied, dropout off."""
        out = []
        for b0 in range(0, len(windows), batch_size):
            chunk = windows[b0:b0 + batch_size]
            H = encode_batch(Batch.from_windows(chunk), self.weights, self.adapters)
            ps, pe = span_logits(H, self.weights, span_valid_mask(chunk))
            out.extend(zip(ps.data, pe.data))
        return out

    # ---------------------------------------------------------- persistence

    def _meta(self, kind):
        return {"kind": kind, "encoder": self.config.to_dict(), "vocab": self.vocab.pieces,
                "max_len": self.max_len, "stride": self.stride}

    def save(self, path) -> str:
        """Write every encoder tensor; returns the file's sha256."""
        tensors = {name: t.data for name, t in self.weights.params.items()}
        return checkpoint.save(path, tensors, self._meta("full"))

    def save_adapter(self, path, base_sha256: str) -> str:
        """Write only adapter factors and span heads, bound to the base checkpoint's hash."""
        if not self.adapters:
            raise IntegrityError("model has no adapters to save")
        tensors = {}
        for name, ad in self.adapters.items():
            tensors[f"{name}.lora_A"] = ad.A.data
            tensors[f"{name}.lora_B"] = ad.B.data
        for name in SPAN_HEADS:
            tensors[name] = self.weights[name].data
        first = next(iter(self.adapters.values()))
        meta = {"kind": "lora", "base_sha256": base_sha256, "rank": first.rank,
                "dropout": first.dropout_p, "targets": list(self.adapters)}
        return checkpoint.save(path, tensors, meta)


def _weights_from(meta, tensors) -> EncoderWeights:
    try:
        cfg = EncoderConfig(**meta["encoder"]).validate()
        params = {n: Tensor(a, requires_grad=True, name=n) for n, a in tensors.items()}
        return EncoderWeights(cfg, params)
    except (KeyError, TypeError, ValueError) as exc:
        raise IntegrityError(f"checkpoint does not describe a valid encoder: {exc}") from exc


def load_model(path, adapter_path=None) -> QAModel:
    meta, tensors = checkpoint.load(path)
    if meta.get("kind") != "full":
        raise IntegrityError(f"{path} is not a full model checkpoint (kind={meta.get('kind')!r})")
    model = QAModel(_weights_from(meta, tensors), Vocabulary(meta["vocab"]), meta["max_len"], meta["stride"])
    if adapter_path is not None:
        attach_adapter(model, adapter_path, checkpoint.file_sha256(path))
    return model


def attach_adapter(model: QAModel, adapter_path, base_sha256: str) -> QAModel:
    meta, tensors = checkpoint.load(adapter_path)
    if meta.get("kind") != "lora":
        raise IntegrityError(f"{adapter_path} is not an adapter checkpoint")
    if meta.get("base_sha256") != base_sha256:
        raise IntegrityError("adapter was trained against a different base checkpoint (hash mismatch)")
    adapters = {}
    for name in meta["targets"]:
        try:
            A, B = tensors[f"{name}.lora_A"], tensors[f"{name}.lora_B"]
        except KeyError as exc:
            raise IntegrityError(f"adapter checkpoint is missing {exc}") from exc
        W = model.weights.params.get(f"{name}.weight")
        if W is None or W.shape != (B.shape[0], A.shape[0]):
            raise IntegrityError(f"adapter {name} does not fit the base model")
        adapters[name] = LoraAdapter(name, Tensor(A, requires_grad=True, name=f"{name}.lora_A"),
                                     Tensor(B, requires_grad=True, name=f"{name}.lora_B"), meta["dropout"])
    for name in SPAN_HEADS:
        model.weights[name].data[...] = np.asarray(tensors[name])
    model.weights.set_trainable(lambda n: n in SPAN_HEADS)
    model.adapters = adapters
    return model
