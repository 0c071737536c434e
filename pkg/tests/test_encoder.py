import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spanforge import dataset as dsm
from spanforge import encoder as enc
from spanforge import numerics as nx
from spanforge import tokenizer as tk
from spanforge.errors import ConfigError, InputError
from spanforge.numerics import Tensor, precision

from _gradcases import LOSS_CASES
from _support import PARAPHRASES, gradcheck, random_window, toy_dataset, toy_vocab


def _cfg(**kw):
    base = dict(vocab_size=20, layers=1, heads=2, hidden=8, ffn=12, max_positions=32)
    base.update(kw)
    return enc.EncoderConfig(**base)


def _windows(n, L=16, V=20, seed=0, **kw):
    rng = np.random.default_rng(seed)
    return [random_window(rng, L, V, **kw) for _ in range(n)]


# ------------------------------------------------------------------ config

def test_config_validation():
    with pytest.raises(ConfigError):
        _cfg(hidden=6, heads=4).validate()
    with pytest.raises(ConfigError):
        _cfg(masking_mode="sometimes").validate()
    with pytest.raises(ConfigError):
        _cfg(mask_prob=1.0).validate()


def test_init_follows_the_recipe():
    w = enc.init_weights(_cfg(hidden=32, ffn=64, vocab_size=200), seed=3)
    tok = w["embeddings.token"].data
    assert np.abs(tok).max() <= 2 * 0.02 + 1e-7  # truncated at two standard deviations
    assert abs(tok.std() - 0.02 * 0.88) < 0.002  # std of a 2-sigma truncated normal is ~0.88 sigma
    assert np.all(w["layers.0.attention.norm.gamma"].data == 1.0)
    assert np.all(w["layers.0.ffn.in.bias"].data == 0.0)
    assert w["span.start"].shape == (32,) and w["span.end"].shape == (32,)
    assert enc.init_weights(_cfg(), 3).digest() == enc.init_weights(_cfg(), 3).digest()


# ----------------------------------------------------------------- forward

def test_constant_embeddings_give_identical_rows():
    w = enc.init_weights(_cfg(), 0)
    for name, t in w.params.items():
        t.data[...] = 1.0 if name.endswith("gamma") else 0.0
    H = enc.encode(_windows(1)[0], w).data
    np.testing.assert_array_equal(H, np.broadcast_to(H[0], H.shape))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 16))
def test_pad_content_never_leaks(seed):
    rng = np.random.default_rng(seed)
    w = enc.init_weights(_cfg(), seed)
    win = random_window(rng, 16, 20, n_pad=int(rng.integers(1, 6)))
    real = sum(win.attention_mask)
    ids = np.array(win.token_ids)
    ids[real:] = rng.integers(0, 20, size=16 - real)
    batch = enc.Batch.from_windows(win)
    H1 = enc.encode_batch(batch, w).data
    H2 = enc.encode_batch(batch, w, token_ids=ids[None]).data
    np.testing.assert_array_equal(H1[0, :real], H2[0, :real])


def _ln(x, g, b, eps=1e-12):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def test_single_head_matches_hand_computation():
    cfg = _cfg(layers=1, heads=1, hidden=4, ffn=6, vocab_size=10, max_positions=8)
    with precision(np.float64):
        w = enc.init_weights(cfg, 0)
        rng = np.random.default_rng(11)
        for t in w.params.values():
            t.data[...] = rng.normal(scale=0.5, size=t.shape)
        win = random_window(np.random.default_rng(2), 8, 10, n_question=2, n_context=2)
        H = enc.encode(win, w).data
    P = {n: t.data for n, t in w.params.items()}
    ids, segs = np.array(win.token_ids), np.array(win.segment_ids)
    mask = np.array(win.attention_mask, bool)
    x = P["embeddings.token"][ids] + P["embeddings.position"][:8] + P["embeddings.segment"][segs]
    x = _ln(x, P["embeddings.norm.gamma"], P["embeddings.norm.beta"])
    a = "layers.0.attention."
    q = x @ P[a + "query.weight"] + P[a + "query.bias"]
    k = x @ P[a + "key.weight"] + P[a + "key.bias"]
    v = x @ P[a + "value.weight"] + P[a + "value.bias"]
    out = np.zeros_like(x)
    for i in range(8):  # one query row at a time, softmax over real keys only
        s = np.array([q[i] @ k[j] / 2.0 if mask[j] else -np.inf for j in range(8)])
        p = np.exp(s - s.max())
        p /= p.sum()
        out[i] = sum(p[j] * v[j] for j in range(8))
    attn = out @ P[a + "output.weight"] + P[a + "output.bias"]
    x = _ln(x + attn, P[a + "norm.gamma"], P[a + "norm.beta"])
    f = "layers.0.ffn."
    hdn = x @ P[f + "in.weight"] + P[f + "in.bias"]
    hdn = 0.5 * hdn * (1 + np.tanh(math.sqrt(2 / math.pi) * (hdn + 0.044715 * hdn ** 3)))
    x = _ln(x + hdn @ P[f + "out.weight"] + P[f + "out.bias"], P[f + "norm.gamma"], P[f + "norm.beta"])
    np.testing.assert_allclose(H, x, rtol=1e-10, atol=1e-10)


def test_encode_input_errors():
    w = enc.init_weights(_cfg(max_positions=8), 0)
    with pytest.raises(InputError):
        enc.encode(_windows(1, L=16)[0], w)
    win = _windows(1, L=8, V=40)[0]
    with pytest.raises(InputError):
        enc.encode(win, w)


# -------------------------------------------------------------- span heads

def test_zero_span_vectors_give_uniform_over_valid():
    w = enc.init_weights(_cfg(), 0)
    w["span.start"].data[...] = 0.0
    w["span.end"].data[...] = 0.0
    wins = _windows(3)
    valid = enc.span_valid_mask(wins)
    ps, pe = enc.span_logits(enc.encode(wins, w), w, valid)
    for row, v in zip(ps.data, valid):
        np.testing.assert_allclose(row[v], 1.0 / v.sum(), rtol=1e-6)
        assert np.all(row[~v] == 0.0)
    np.testing.assert_array_equal(ps.data, pe.data)


def test_span_softmax_by_hand():
    with precision(np.float64):
        H = Tensor(np.array([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]]))
        w = enc.init_weights(_cfg(hidden=2, heads=1), 0)
        w["span.start"].data[...] = [0.5, -1.0]
        ps, _ = enc.span_logits(H, w)
    z = np.array([0.5, -2.0, -0.5])
    np.testing.assert_allclose(ps.data, np.exp(z) / np.exp(z).sum(), rtol=1e-12)


def test_support_restriction_two_points():
    w = enc.init_weights(_cfg(), 0)
    rng = np.random.default_rng(0)
    w["span.start"].data[...] = rng.normal(size=8)
    win = _windows(1, n_question=3, n_context=5)[0]
    valid = np.zeros((1, 16), bool)
    valid[0, [0, win.context_start + 2]] = True
    ps, _ = enc.span_logits(enc.encode([win], w), w, valid)
    assert np.count_nonzero(ps.data) == 2
    assert ps.data.sum() == pytest.approx(1.0, abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 16))
def test_span_distributions_are_normalized(seed):
    rng = np.random.default_rng(seed)
    w = enc.init_weights(_cfg(), seed)
    w["span.start"].data[...] = rng.normal(size=8) * 3
    w["span.end"].data[...] = rng.normal(size=8) * 3
    wins = _windows(2, seed=seed)
    valid = enc.span_valid_mask(wins)
    ps, pe = enc.span_logits(enc.encode(wins, w), w, valid)
    for p in (ps.data, pe.data):
        np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)
        assert np.all(p[~valid] < 1e-12)


def test_qa_loss_closed_forms():
    n = 5
    uniform = Tensor(np.full(n, 1.0 / n))
    assert enc.qa_loss(uniform, uniform, 1, 3).item() == pytest.approx(2 * math.log(n), rel=1e-6)
    onehot = Tensor(np.eye(n)[2])
    assert enc.qa_loss(onehot, onehot, 2, 2).item() == 0.0
    with pytest.raises(IndexError):
        enc.qa_loss(uniform, uniform, n, 0)
    with pytest.raises(IndexError):
        enc.qa_loss(onehot, onehot, 1, 2)  # masked (zero-probability) target


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=8), st.data())
def test_qa_loss_nonnegative(logits, data):
    with precision(np.float64):
        p = nx.softmax_rows(Tensor(np.array(logits)))
        s = data.draw(st.integers(0, len(logits) - 1))
        assert enc.qa_loss(p, p, s, s).item() >= 0.0


# ---------------------------------------------------------------- pretraining

def test_uniform_mlm_head_gives_log_v():
    V = 20
    w = enc.init_weights(_cfg(vocab_size=V), 0)
    w["mlm.decoder.weight"].data[...] = 0.0
    loss = enc.mlm_loss(_windows(4, V=V), w, 0.3, 0).item()
    assert loss == pytest.approx(math.log(V), rel=1e-6)


def test_certain_mlm_head_gives_zero():
    V = 20
    w = enc.init_weights(_cfg(vocab_size=V), 0)
    wins = _windows(3, V=V)
    target = 7
    # every ordinary token becomes ``target``, so the right answer is always the same id
    wins = [replace(win, token_ids=tuple(target if i >= len(tk.SPECIALS) else i for i in win.token_ids))
            for win in wins]
    w["mlm.decoder.weight"].data[...] = 0.0
    w["mlm.decoder.bias"].data[...] = -1e4
    w["mlm.decoder.bias"].data[target] = 0.0
    assert enc.mlm_loss(wins, w, 0.3, 0).item() == pytest.approx(0.0, abs=1e-6)


def test_nsp_closed_forms():
    w = enc.init_weights(_cfg(), 0)
    wins = _windows(4)
    w["nsp.weight"].data[...] = 0.0  # P = 0.5 for every pair
    assert enc.nsp_loss(wins, [0, 1, 1, 0], w).item() == pytest.approx(math.log(2), rel=1e-6)
    w["nsp.bias"].data[...] = [-1e4, 0.0]
    assert enc.nsp_loss(wins, [1, 1, 1, 1], w).item() == pytest.approx(0.0, abs=1e-6)
    with pytest.raises(InputError):
        enc.nsp_loss(wins, [0, 1, 2, 0], w)


def test_masking_rules():
    wins = _windows(64, L=32, V=50)
    batch = enc.Batch.from_windows(wins)
    m = enc.apply_masking(batch, 0.15, nx.make_rng(0), 50)
    maskable = enc.maskable_positions(batch)
    assert np.all(maskable[m.rows, m.cols])
    assert set(range(64)) <= set(m.rows.tolist())  # at least one per row
    np.testing.assert_array_equal(m.targets, batch.token_ids[m.rows, m.cols])
    untouched = np.ones_like(maskable)
    untouched[m.rows, m.cols] = False
    np.testing.assert_array_equal(m.input_ids[untouched], batch.token_ids[untouched])
    # 80/10/10 split, checked loosely on a large draw
    big = enc.Batch.from_windows(_windows(400, L=32, V=50, seed=1))
    mb = enc.apply_masking(big, 0.5, nx.make_rng(1), 50)
    now = mb.input_ids[mb.rows, mb.cols]
    frac_mask = np.mean(now == tk.MASK_ID)
    frac_keep = np.mean(now == mb.targets)
    assert abs(frac_mask - 0.8) < 0.02 and 0.08 < frac_keep < 0.14


def test_masking_needs_maskable_tokens():
    win = random_window(np.random.default_rng(0), 8, 20, n_question=1, n_context=1)
    ids = np.array(win.token_ids)
    ids[ids >= 5] = tk.MASK_ID
    batch = enc.Batch(ids[None], np.array([win.segment_ids]), np.array([win.attention_mask], bool))
    with pytest.raises(InputError):
        enc.apply_masking(batch, 0.15, nx.make_rng(0), 20)


def test_static_masks_repeat_and_dynamic_masks_move():
    wins = _windows(8, L=32, V=50)
    batch = enc.Batch.from_windows(wins)
    keys = list(range(8))
    static = enc.Masker("static", 0.15, 4, 50)
    a, b = static(batch, keys), static(batch, keys)
    np.testing.assert_array_equal(a.input_ids, b.input_ids)
    changed = 0
    for seed in range(20):
        dyn = enc.Masker("dynamic", 0.15, seed, 50)
        x, y = dyn(batch, keys), dyn(batch, keys)
        changed += not (np.array_equal(x.rows, y.rows) and np.array_equal(x.cols, y.cols))
    assert changed == 20


def test_roberta_mode_total_is_mlm():
    w = enc.init_weights(_cfg(nsp_weight=0.0), 0)
    batch = enc.Batch.from_windows(_windows(3))
    masked = enc.apply_masking(batch, 0.2, nx.make_rng(0), 20)
    l_mlm, _, total = enc.pretrain_loss(batch, masked, [0, 1, 0], w, nsp_weight=0.0)
    assert total.item() == l_mlm.item()


@pytest.mark.parametrize("builder", LOSS_CASES, ids=lambda b: b.__name__)
def test_loss_gradients_on_d8_single_layer(builder):
    with precision(np.float64):
        for seed in range(200, 203):
            f, tensors = builder(seed)
            assert gradcheck(f, tensors, seed=seed) <= 1e-4


def _pretrain_corpus():
    # toy contexts with their questions appended, plus the paraphrase fixture context: 50 sentences
    ds = toy_dataset()
    docs = {}
    for ex in ds:
        docs.setdefault(ex.context_id, [ex.context]).append(ex.question)
    docs = [" ".join(v) for v in docs.values()] + [dsm.load(PARAPHRASES)[0].context]
    assert sum(len(enc.split_sentences(d)) for d in docs) == 50
    return ds, docs


def test_bert_mode_pretraining_halves_the_loss():
    ds, docs = _pretrain_corpus()
    vocab = toy_vocab(ds)
    wins, labels = enc.build_nsp_pairs(docs, vocab, 64, seed=0)
    cfg = enc.EncoderConfig(vocab_size=len(vocab), layers=2, heads=2, hidden=32, ffn=64, max_positions=64,
                            masking_mode="static")
    w = enc.init_weights(cfg, 0)
    hist = enc.pretrain(w, wins, labels, 200, batch_size=16, lr=5e-3, seed=0)
    tail = np.mean([h.total for h in hist[-20:]])
    assert tail <= 0.5 * hist[0].total


def test_nsp_pairs_are_labelled_consistently():
    ds, docs = _pretrain_corpus()
    vocab = toy_vocab(ds)
    wins, labels = enc.build_nsp_pairs(docs, vocab, 64, seed=1)
    assert set(labels) == {0, 1}
    assert all(w.segment_ids[0] == 0 for w in wins)
    assert enc.build_nsp_pairs(docs, vocab, 64, seed=1)[1] == labels
