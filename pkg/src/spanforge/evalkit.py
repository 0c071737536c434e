"""Span decoding and the token-F1 / BLEU / ROUGE-L metrics, reported per subdomain."""
from __future__ import annotations

import csv
import io
import json
import math
import string
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .dataset import SUBDOMAINS
from .errors import InputError
from .tokenizer import DANDA, DOUBLE_DANDA, decode, normalize

_PUNCT = str.maketrans({c: " " for c in string.punctuation + DANDA + DOUBLE_DANDA})
NO_ANSWER = "<no-answer>"


def metric_tokens(text: str) -> list[str]:
    return normalize(text).translate(_PUNCT).split()


# ------------------------------------------------------------------ metrics

def token_f1(prediction: str, gold: str) -> float:
    pred, ref = metric_tokens(prediction), metric_tokens(gold)
    if not pred and not ref:
        return 100.0
    if not pred or not ref:
        return 0.0
    overlap = sum((Counter(pred) & Counter(ref)).values())
    if overlap == 0:
        return 0.0
    p, r = overlap / len(pred), overlap / len(ref)
    return 200.0 * p * r / (p + r)


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(prediction: str, gold: str, max_order: int = 4) -> float:
    """Sentence BLEU-4, clipped precisions, add-one smoothing for orders >= 2 with no matches."""
    pred, ref = metric_tokens(prediction), metric_tokens(gold)
    if not pred:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_order + 1):
        cand, refs = _ngrams(pred, n), _ngrams(ref, n)
        matches = sum(min(c, refs[g]) for g, c in cand.items())
        total = sum(cand.values())
        if matches == 0:
            if n == 1:
                return 0.0
            matches, total = matches + 1, total + 1
        log_sum += math.log(matches / total) / max_order
    bp = math.exp(1.0 - len(ref) / len(pred)) if len(pred) < len(ref) else 1.0
    return 100.0 * bp * math.exp(log_sum)


def lcs_length(a, b) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(prediction: str, gold: str) -> float:
    pred, ref = metric_tokens(prediction), metric_tokens(gold)
    if not pred and not ref:
        return 100.0
    if not pred or not ref:
        return 0.0
    ell = lcs_length(pred, ref)
    if ell == 0:
        return 0.0
    p, r = ell / len(pred), ell / len(ref)
    return 100.0 * 2 * p * r / (p + r)


# ----------------------------------------------------------------- decoding

@dataclass
class Candidate:
    window: int
    start: int
    end: int
    score: float


@dataclass
class Prediction:
    example_id: str
    text: str
    window: int
    start: int
    end: int
    score: float
    null_score: float
    n_best: list = field(default_factory=list)

    @property
    def is_empty(self) -> bool:
        return self.start == 0 and self.end == 0


def _window_candidates(ls, le, lo, hi, max_answer_tokens, n_best, w):
    if hi <= lo:
        return []
    s_idx = np.arange(lo, hi)
    scores = ls[lo:hi, None] + le[None, lo:hi]
    diff = s_idx[None, :] - s_idx[:, None]  # e - s
    valid = (diff >= 0) & (diff < max_answer_tokens)
    scores = np.where(valid, scores, -np.inf)
    flat = scores.ravel()
    k = min(n_best, int(valid.sum()))
    # stable sort on -score keeps row-major order (smaller s, then smaller e) among ties
    top = np.argsort(-flat, kind="stable")[:k]
    n = hi - lo
    return [Candidate(w, lo + int(i // n), lo + int(i % n), float(flat[i])) for i in top if np.isfinite(flat[i])]


def decode_spans(probs, windows, vocab, max_answer_tokens: int = 50, n_best: int = 20,
                 example_id: str = "") -> Prediction:
    """Best (window, s, e) by log P_s[s] + log P_e[e] over every window's context tokens.

    Returns the empty prediction when that best score is below the no-answer
    score log P_s[0] + log P_e[0] of every window.
    """
    if not windows:
        raise InputError("decode_spans needs at least one window")
    best, null_min, pool = None, math.inf, []
    with np.errstate(divide="ignore"):
        for w, ((ps, pe), win) in enumerate(zip(probs, windows)):
            ls = np.log(np.asarray(ps, dtype=np.float64))
            le = np.log(np.asarray(pe, dtype=np.float64))
            null_min = min(null_min, ls[0] + le[0])
            cands = _window_candidates(ls, le, win.context_start, win.context_start + win.n_context,
                                       max_answer_tokens, n_best, w)
            pool.extend(cands)
            if cands and (best is None or cands[0].score > best.score):
                best = cands[0]
    pool.sort(key=lambda c: (-c.score, c.window, c.start, c.end))
    if best is None or best.score < null_min:
        return Prediction(example_id, "", 0, 0, 0, float(null_min), float(null_min), pool[:n_best])
    win = windows[best.window]
    text = decode(win.token_ids[best.start:best.end + 1], vocab)
    return Prediction(example_id, text, best.window, best.start, best.end, best.score, float(null_min),
                      pool[:n_best])


# ----------------------------------------------------------------- reporting

@dataclass
class EvalConfig:
    max_answer_tokens: int = 50
    n_best: int = 20
    model_tag: str = "model"


@dataclass
class ReportRow:
    subdomain: str
    model: str
    f1: float
    bleu: float
    rougeL: float
    n: int = 0


@dataclass
class DomainReport:
    rows: list

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["subdomain", "model", "f1", "bleu", "rougeL"])
        for r in self.rows:
            w.writerow([r.subdomain, r.model, f"{r.f1:.6f}", f"{r.bleu:.6f}", f"{r.rougeL:.6f}"])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"rows": [{"subdomain": r.subdomain, "model": r.model, "f1": round(r.f1, 6),
                          "bleu": round(r.bleu, 6), "rougeL": round(r.rougeL, 6), "n": r.n}
                         for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=1)

    def to_table(self) -> str:
        lines = [f"{'subdomain':<15}{'model':<14}{'F1':>9}{'BLEU':>9}{'RougeL':>9}{'n':>6}"]
        for r in self.rows:
            lines.append(f"{r.subdomain:<15}{r.model:<14}{r.f1:>9.3f}{r.bleu:>9.3f}{r.rougeL:>9.3f}{r.n:>6}")
        return "\n".join(lines)

    def row(self, subdomain) -> ReportRow:
        return next(r for r in self.rows if r.subdomain == subdomain)


def score_triplet(prediction: str, gold: str):
    return token_f1(prediction, gold), bleu(prediction, gold), rouge_l(prediction, gold)


def build_report(subdomains, scores, model_tag: str) -> DomainReport:
    """Per-subdomain means plus a pooled ``merged`` row; ``scores`` holds (f1, bleu, rougeL) per example."""
    rows = []
    scores = np.asarray(scores, dtype=np.float64).reshape(-1, 3)
    subs = np.asarray(subdomains)
    for sub in SUBDOMAINS:
        sel = scores[subs == sub]
        if len(sel):
            m = sel.mean(axis=0)
            rows.append(ReportRow(sub, model_tag, *m.tolist(), n=len(sel)))
    if len(scores):
        m = scores.mean(axis=0)
        rows.append(ReportRow("merged", model_tag, *m.tolist(), n=len(scores)))
    return DomainReport(rows)


def predict(model, question: str, context: str, config: EvalConfig | None = None, example_id="") -> Prediction:
    config = config or EvalConfig()
    windows = model.windows(question, context)
    probs = model.span_probabilities(windows)
    return decode_spans(probs, windows, model.vocab, config.max_answer_tokens, config.n_best, example_id)


def evaluate(model, examples, config: EvalConfig | None = None):
    """Score every example and aggregate; returns (DomainReport, predictions)."""
    config = config or EvalConfig()
    examples = list(examples)
    if not examples:
        raise InputError("cannot evaluate an empty split")
    preds, scores = [], []
    for ex in examples:
        p = predict(model, ex.question, ex.context, config, ex.id)
        preds.append(p)
        scores.append(score_triplet(p.text, ex.answer_text))
    return build_report([ex.subdomain for ex in examples], scores, config.model_tag), preds
