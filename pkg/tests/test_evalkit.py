import csv
import io
import json

import numpy as np
import pytest

from spanforge import dataset as dsm
from spanforge import encoder as enc
from spanforge import evalkit as ev
from spanforge import tokenizer as tk
from spanforge.errors import InputError
from spanforge.model import QAModel

from _support import (LETTERS_VOCAB, brute_decode, decode_case, metric_pairs, random_window, ref_bleu, ref_f1,
                      ref_rouge_l, toy_dataset, toy_encoder_config, toy_vocab)


# ------------------------------------------------------------------ metrics

def test_metric_hand_cases():
    assert ev.token_f1("घाट गंगा", "घाट नाव आरती") == pytest.approx(40.0, abs=1e-12)
    assert ev.rouge_l("a b c", "a x c") == pytest.approx(200 / 3, abs=1e-12)
    assert round(ev.rouge_l("a b c", "a x c"), 2) == 66.67
    assert ev.token_f1("गंगा आरती", "गंगा आरती") == 100.0
    assert ev.token_f1("घाट", "नाव") == 0.0
    assert ev.token_f1("", "") == 100.0 and ev.token_f1("", "घाट") == 0.0
    assert ev.bleu("a b c d e", "a b c d e") == pytest.approx(100.0)
    assert ev.bleu("", "a b") == 0.0
    assert ev.rouge_l("", "a") == 0.0 and ev.rouge_l("", "") == 100.0


def test_metrics_ignore_punctuation_and_danda():
    assert ev.metric_tokens("घाट, गंगा। नाव?") == ["घाट", "गंगा", "नाव"]
    assert ev.token_f1("घाट।", "घाट") == 100.0


def test_metrics_match_brute_force():
    rng = np.random.default_rng(2024)
    for pred, gold in metric_pairs(rng, 300):
        assert ev.token_f1(pred, gold) == pytest.approx(ref_f1(pred, gold), abs=1e-9)
        assert ev.bleu(pred, gold) == pytest.approx(ref_bleu(pred, gold), abs=1e-9)
        assert ev.rouge_l(pred, gold) == pytest.approx(ref_rouge_l(pred, gold), abs=1e-9)


def test_bleu_smoothing_and_brevity():
    # unigrams 2/2, bigram 1/1, tri/4-grams have no candidates: (0+1)/(0+1) each; bp = exp(1 - 3/2)
    assert ev.bleu("a b", "a b c") == pytest.approx(100 * np.exp(1 - 1.5), abs=1e-9)
    # "b a" vs "a b": unigrams 2/2, bigram 0/1 smoothed to 1/2, higher orders (0+1)/(0+1)
    assert ev.bleu("b a", "a b") == pytest.approx(100 * 0.5 ** 0.25, abs=1e-9)


def test_lcs():
    assert ev.lcs_length(list("abcbdab"), list("bdcaba")) == 4
    assert ev.lcs_length([], list("ab")) == 0


# ----------------------------------------------------------------- decoding

def _onehot(L, i):
    p = np.zeros(L)
    p[i] = 1.0
    return p


def test_decode_point_mass():
    rng = np.random.default_rng(0)
    w = random_window(rng, 20, len(LETTERS_VOCAB), n_question=3, n_context=8)
    s, e = w.context_start + 2, w.context_start + 4
    pred = ev.decode_spans([(_onehot(20, s), _onehot(20, e))], [w], LETTERS_VOCAB)
    assert (pred.window, pred.start, pred.end) == (0, s, e)
    assert pred.text == tk.decode(w.token_ids[s:e + 1], LETTERS_VOCAB)
    empty = ev.decode_spans([(_onehot(20, 0), _onehot(20, 0))] * 2, [w, w], LETTERS_VOCAB)
    assert empty.is_empty and empty.text == ""


def test_decode_needs_windows():
    with pytest.raises(InputError):
        ev.decode_spans([], [], LETTERS_VOCAB)


def test_decode_matches_exhaustive_enumeration():
    rng = np.random.default_rng(7)
    for _ in range(150):
        probs, wins, max_tok = decode_case(rng)
        pred = ev.decode_spans(probs, wins, LETTERS_VOCAB, max_answer_tokens=max_tok)
        best, null_min = brute_decode(probs, wins, max_tok)
        assert pred.null_score == pytest.approx(null_min, abs=1e-9)
        if best is None:
            assert pred.is_empty and pred.text == ""
        else:
            assert (pred.window, pred.start, pred.end) == best[1:]
            assert pred.score == pytest.approx(best[0], abs=1e-9)


def test_n_best_is_sorted_and_bounded():
    rng = np.random.default_rng(1)
    probs, wins, _ = decode_case(rng)
    pred = ev.decode_spans(probs, wins, LETTERS_VOCAB, max_answer_tokens=5, n_best=7)
    scores = [c.score for c in pred.n_best]
    assert len(scores) <= 7 and scores == sorted(scores, reverse=True)
    assert all(0 <= c.end - c.start < 5 for c in pred.n_best)


# --------------------------------------------------------------- reporting

class _GoldModel:
    """Puts all probability on the aligned gold span (or on [CLS] when ``empty``)."""

    def __init__(self, examples, vocab, empty=False):
        self.gold = {(ex.question, ex.context): ex for ex in examples}
        self.vocab, self.empty = vocab, empty

    def windows(self, question, context):
        self._ex = self.gold[(question, context)]
        return tk.encode_pair(question, context, self.vocab, 128, 32)

    def span_probabilities(self, windows):
        out = []
        for w in windows:
            s, e = (0, 0) if self.empty else dsm.align_answer(self._ex, w)
            out.append((_onehot(w.length, s), _onehot(w.length, e)))
        return out


@pytest.fixture(scope="module")
def toy():
    ds = toy_dataset()
    return list(ds), toy_vocab(ds)


def test_gold_model_scores_100(toy):
    examples, vocab = toy
    report, preds = ev.evaluate(_GoldModel(examples, vocab), examples)
    for row in report.rows:
        assert (row.f1, row.bleu, row.rougeL) == (100.0, 100.0, 100.0)
    assert report.row("merged").n == len(examples)


def test_empty_model_scores_zero(toy):
    examples, vocab = toy
    report, preds = ev.evaluate(_GoldModel(examples, vocab, empty=True), examples)
    assert all(p.text == "" for p in preds)
    assert all(row.f1 == 0.0 for row in report.rows)


def test_report_rows_and_merged_mean():
    subs = ["temples", "kunds", "temples", "general"]
    scores = [(100, 50, 80), (0, 0, 0), (50, 25, 40), (10, 20, 30)]
    report = ev.build_report(subs, scores, "toy")
    assert [r.subdomain for r in report.rows] == ["temples", "kunds", "general", "merged"]
    assert (report.row("temples").f1, report.row("temples").n) == (75.0, 2)
    assert report.row("merged").rougeL == pytest.approx(37.5)


def test_csv_and_json_agree():
    rng = np.random.default_rng(5)
    subs = list(rng.choice(dsm.SUBDOMAINS[:4], size=30))
    report = ev.build_report(subs, rng.uniform(0, 100, size=(30, 3)), "lora-r8")
    rows = list(csv.DictReader(io.StringIO(report.to_csv())))
    js = json.loads(report.to_json())["rows"]
    assert len(rows) == len(js) == len(report.rows)
    for c, j in zip(rows, js):
        assert c["subdomain"] == j["subdomain"] and c["model"] == j["model"] == "lora-r8"
        for key in ("f1", "bleu", "rougeL"):
            assert float(c[key]) == pytest.approx(j[key], abs=1e-6)
    assert report.to_table().splitlines()[0].split() == ["subdomain", "model", "F1", "BLEU", "RougeL", "n"]


def test_evaluate_real_model_smoke(toy):
    examples, vocab = toy
    model = QAModel(enc.init_weights(toy_encoder_config(len(vocab)), 0), vocab, 128, 32)
    report, preds = ev.evaluate(model, examples[:4], ev.EvalConfig(model_tag="base"))
    assert len(preds) == 4 and report.row("merged").n == 4
    for p in preds:
        assert p.is_empty or p.end - p.start < 50
    with pytest.raises(InputError):
        ev.evaluate(model, [])
