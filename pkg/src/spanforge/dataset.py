"""QA dataset schema, validation, answer alignment, splitting, augmentation ingestion and QC."""
from __future__ import annotations

import json
import math
import string
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataValidationError, InputError
from .tokenizer import DANDA, DOUBLE_DANDA, normalize

SUBDOMAINS = (
    "temples", "kunds", "ashrams", "museums", "travel",
    "ganga_aarti", "cruise", "food_court", "public_toilet", "general",
)
PROVENANCES = ("manual", "generated")

# common Hindi function words ignored when comparing questions
STOP_WORDS = frozenset(
    "है में का की के क्या हैं को से पर और भी तो ही".split()
)


@dataclass(frozen=True)
class QAExample:
    id: str
    context_id: str
    subdomain: str
    context: str
    question: str
    answer_text: str
    answer_char_start: int
    provenance: str = "manual"

    @property
    def answer_char_end(self) -> int:
        return self.answer_char_start + len(self.answer_text)


def validate_example(ex: QAExample) -> list[str]:
    problems = []
    if ex.subdomain not in SUBDOMAINS:
        problems.append(f"unknown subdomain {ex.subdomain!r}")
    if ex.provenance not in PROVENANCES:
        problems.append(f"unknown provenance {ex.provenance!r}")
    if not isinstance(ex.answer_char_start, int) or ex.answer_char_start < 0:
        problems.append(f"answer_char_start must be a non-negative int, got {ex.answer_char_start!r}")
    else:
        span = ex.context[ex.answer_char_start:ex.answer_char_end]
        if normalize(span) != normalize(ex.answer_text):
            problems.append(f"context[{ex.answer_char_start}:{ex.answer_char_end}] is {span!r}, not the answer text")
    return problems


def count_cells(examples) -> dict:
    counts = Counter((ex.subdomain, ex.provenance) for ex in examples)
    return {f"{s}/{p}": counts.get((s, p), 0) for s in SUBDOMAINS for p in PROVENANCES}


@dataclass
class Dataset:
    examples: list = field(default_factory=list)
    manifest: dict | None = None

    def __len__(self):
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, i):
        return self.examples[i]

    def ids(self):
        return [ex.id for ex in self.examples]

    def contexts(self) -> dict:
        out = {}
        for ex in self.examples:
            out.setdefault(ex.context_id, (ex.subdomain, ex.context))
        return out

    def to_json(self) -> dict:
        groups = {}
        for ex in self.examples:
            g = groups.setdefault(ex.context_id, {"id": ex.context_id, "subdomain": ex.subdomain,
                                                  "context": ex.context, "qas": []})
            g["qas"].append({"qid": ex.id, "question": ex.question, "answer_text": ex.answer_text,
                             "answer_char_start": ex.answer_char_start, "provenance": ex.provenance})
        return {"version": 1, "manifest": count_cells(self.examples), "data": list(groups.values())}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), ensure_ascii=False, indent=1) + "\n", encoding="utf-8")


def parse(obj, strict: bool = False) -> Dataset:
    """Build a Dataset from the JSON object form, validating every example."""
    if not isinstance(obj, dict) or obj.get("version") != 1 or not isinstance(obj.get("data"), list):
        raise DataValidationError("dataset must be an object with version 1 and a data array")
    examples, failures = [], []
    for group in obj["data"]:
        try:
            cid, sub, ctx = group["id"], group["subdomain"], group["context"]
            qas = group["qas"]
        except (KeyError, TypeError) as exc:
            raise DataValidationError(f"malformed context entry: missing {exc}") from exc
        for qa in qas:
            try:
                ex = QAExample(id=str(qa["qid"]), context_id=str(cid), subdomain=sub, context=ctx,
                               question=qa["question"], answer_text=qa["answer_text"],
                               answer_char_start=qa["answer_char_start"],
                               provenance=qa.get("provenance", "manual"))
            except (KeyError, TypeError) as exc:
                problems, ex = [f"missing field {exc}"], None
            else:
                problems = validate_example(ex)
            if problems:
                qid = qa.get("qid", "?") if isinstance(qa, dict) else "?"
                failures.append((qid, "; ".join(problems)))
                if strict:
                    raise DataValidationError(f"example {qid}: {failures[-1][1]}", failures)
                continue
            examples.append(ex)
    if failures:
        listed = ", ".join(str(q) for q, _ in failures[:20])
        raise DataValidationError(f"{len(failures)} invalid example(s): {listed}", failures)
    ds = Dataset(examples, obj.get("manifest"))
    if ds.manifest is not None:
        recount = count_cells(examples)
        diff = {k: (v, recount.get(k, 0)) for k, v in ds.manifest.items() if recount.get(k, 0) != v}
        if diff:
            raise DataValidationError(f"manifest counts disagree with the data: {diff}")
    return ds


def load(path, strict: bool = False) -> Dataset:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataValidationError(f"{path}: not valid JSON ({exc})") from exc
    return parse(obj, strict=strict)


# ----------------------------------------------------------------- alignment

def align_answer(example: QAExample, window) -> tuple[int, int]:
    """Window positions of the first and last token covering the gold answer, or (0, 0) if not fully inside."""
    a, b = example.answer_char_start, example.answer_char_end
    if b <= a or window.n_context == 0:
        return 0, 0
    pos = list(window.context_positions)
    offs = [window.offsets[p] for p in pos]
    if offs[0][0] > a or offs[-1][1] < b:
        return 0, 0
    s = next(p for p, (_, e) in zip(pos, offs) if e > a)
    e = next(p for p, (st, _) in zip(reversed(pos), reversed(offs)) if st < b)
    if e < s:
        return 0, 0
    return s, e


# ---------------------------------------------------------------------- split

def split(dataset: Dataset, train_fraction: float = 0.8, seed: int = 0):
    """Per-subdomain shuffle and floor(fraction * n) prefix into train."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    if len(dataset) == 0:
        raise InputError("cannot split an empty dataset")
    rng = np.random.Generator(np.random.PCG64(seed))
    by_sub = defaultdict(list)
    for ex in dataset:
        by_sub[ex.subdomain].append(ex)
    train, test = [], []
    for sub in SUBDOMAINS:
        group = by_sub.get(sub, [])
        if not group:
            continue
        order = rng.permutation(len(group))
        cut = math.floor(train_fraction * len(group))
        train.extend(group[i] for i in order[:cut])
        test.extend(group[i] for i in order[cut:])
    return Dataset(train), Dataset(test)


# -------------------------------------------------------------- augmentation

@dataclass
class Rejection:
    question: str
    reason: str


def ingest_generated(raw_pairs, base: Dataset):
    """Attach externally generated (context_id, question, answer) pairs to their contexts.

    The normalized answer is located at its first exact occurrence in the context;
    pairs whose answer does not occur are rejected. Returns (candidate dataset, rejections).
    """
    contexts = base.contexts()
    taken = set(base.ids())
    examples = list(base.examples)
    rejected = []
    for n, pair in enumerate(raw_pairs):
        cid = str(pair.get("context_id", ""))
        question = normalize(pair.get("question", ""))
        answer = normalize(pair.get("answer_text", ""))
        if cid not in contexts:
            rejected.append(Rejection(question, f"unknown context id {cid!r}"))
            continue
        sub, ctx = contexts[cid]
        if not answer or not question:
            rejected.append(Rejection(question, "empty question or answer"))
            continue
        start = ctx.find(answer)
        if start < 0:
            rejected.append(Rejection(question, "answer text not found in context"))
            continue
        qid = str(pair.get("qid") or f"{cid}-gen{n}")
        while qid in taken:
            qid += "'"
        taken.add(qid)
        examples.append(QAExample(qid, cid, sub, ctx, question, answer, start, "generated"))
    return Dataset(examples), rejected


# ---------------------------------------------------------------------- dedup

_STRIP = str.maketrans({c: " " for c in string.punctuation + DANDA + DOUBLE_DANDA})


def question_key(question: str) -> str:
    words = normalize(question).casefold().translate(_STRIP).split()
    return " ".join(w for w in words if w not in STOP_WORDS)


def char_ngrams(text: str, n: int = 3) -> Counter:
    if len(text) < n:
        return Counter([text]) if text else Counter()
    return Counter(text[i:i + n] for i in range(len(text) - n + 1))


def question_similarity(a: str, b: str) -> float:
    """Cosine similarity of character 3-gram count vectors after stop-word removal."""
    ka, kb = question_key(a), question_key(b)
    if ka == kb:
        return 1.0
    ga, gb = char_ngrams(ka), char_ngrams(kb)
    if not ga or not gb:
        return 0.0
    dot = sum(c * gb[g] for g, c in ga.items())
    na = math.sqrt(sum(c * c for c in ga.values()))
    nb = math.sqrt(sum(c * c for c in gb.values()))
    return dot / (na * nb)


@dataclass(frozen=True)
class Removal:
    kept_id: str
    dropped_id: str
    score: float


def dedup(dataset: Dataset, similarity_threshold: float = 0.85):
    """Drop near-duplicate questions that share a context.

    Within each context, manual questions are considered before generated ones
    and earlier ones before later ones; a question is dropped when it scores at
    least ``similarity_threshold`` against one already kept.
    """
    if not 0.0 < similarity_threshold <= 1.0:
        raise ConfigError(f"similarity threshold must lie in (0, 1], got {similarity_threshold}")
    rank = {p: i for i, p in enumerate(PROVENANCES)}
    groups = defaultdict(list)
    for pos, ex in enumerate(dataset):
        groups[ex.context_id].append((rank.get(ex.provenance, len(rank)), pos, ex))
    dropped, removals = set(), []
    for members in groups.values():
        kept = []
        for _, pos, ex in sorted(members, key=lambda m: (m[0], m[1])):
            best = None
            for other in kept:
                score = question_similarity(other.question, ex.question)
                if score >= similarity_threshold and (best is None or score > best[1]):
                    best = (other, score)
            if best is None:
                kept.append(ex)
            else:
                dropped.add(pos)
                removals.append(Removal(best[0].id, ex.id, best[1]))
    keep = [ex for pos, ex in enumerate(dataset) if pos not in dropped]
    return Dataset(keep), removals


# ---------------------------------------------------------------------- kappa

def cohen_kappa(labels_a, labels_b) -> float:
    labels_a, labels_b = list(labels_a), list(labels_b)
    if len(labels_a) != len(labels_b):
        raise InputError(f"label vectors differ in length: {len(labels_a)} vs {len(labels_b)}")
    n = len(labels_a)
    if n == 0:
        raise InputError("kappa needs at least one labelled item")
    p_o = sum(x == y for x, y in zip(labels_a, labels_b)) / n
    ca, cb = Counter(labels_a), Counter(labels_b)
    p_e = sum(ca[k] * cb[k] for k in ca) / (n * n)
    if p_e == 1.0:
        return 1.0 if p_o == 1.0 else 0.0
    return (p_o - p_e) / (1.0 - p_e)


# --------------------------------------------------------------------- report

@dataclass
class SubdomainReport:
    counts: dict  # (subdomain, provenance) -> int

    def row(self, subdomain):
        return tuple(self.counts[(subdomain, p)] for p in PROVENANCES)

    @property
    def totals(self) -> dict:
        return {p: sum(self.counts[(s, p)] for s in SUBDOMAINS) for p in PROVENANCES}

    @property
    def grand_total(self) -> int:
        return sum(self.counts.values())

    def to_table(self) -> str:
        lines = [f"{'subdomain':<15}{'manual':>9}{'generated':>11}"]
        for s in SUBDOMAINS:
            m, g = self.row(s)
            lines.append(f"{s:<15}{m:>9}{g:>11}")
        t = self.totals
        lines.append(f"{'total':<15}{t['manual']:>9}{t['generated']:>11}")
        return "\n".join(lines)


def subdomain_report(dataset: Dataset) -> SubdomainReport:
    counts = {(s, p): 0 for s in SUBDOMAINS for p in PROVENANCES}
    for ex in dataset:
        counts[(ex.subdomain, ex.provenance)] += 1
    return SubdomainReport(counts)
