from dataclasses import replace

import numpy as np
import pytest

from xlingdef.model import (AssembledInput, EOS_ID, ModelConfig, ModelParams,
                            PAD_ID, SEP_ID, Vocab, assemble_decoder_input,
                            assemble_encoder_input, decode_logits, encode,
                            encode_packed, generate, generate_batch, pack,
                            token_logits_packed)
from xlingdef.numcore import (AdamState, Graph, Tensor, adam_step, backward,
                              ops)
from xlingdef.toylang import CorpusConfig, ToyLanguage, generate_corpus

TINY = ModelConfig(vocab_size=40, n_langs=2, d_model=32, n_heads=4,
                   n_enc_layers=1, n_dec_layers=1, ffn_dim=48, max_len=64,
                   n_task_tokens=4)


def _params(cfg=TINY, seed=0):
    return ModelParams(cfg, np.random.default_rng(seed))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, n_langs=2, d_model=30, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, n_langs=2, n_task_tokens=0)


def test_vocab_layout():
    langs = [ToyLanguage("aa", 5), ToyLanguage("bb", 5)]
    v = Vocab(langs)
    assert len(v) == 14
    assert v.decode([0, 1, 2, 3]) == ["<pad>", "<bos>", "<eos>", "<sep>"]
    assert v.index["aa_k000"] == 4 and v.index["bb_k000"] == 9
    assert v.lang_of_id(4) == "aa" and v.lang_of_id(9) == "bb"
    assert v.lang_of_id(2) is None
    assert v.lang_rows == {"aa": 0, "bb": 1}
    with pytest.raises(KeyError):
        v.encode(["cc_k000"])


def test_assembly_lengths():
    direct = assemble_encoder_input([7], [8, 9, 10, 11, 12], 0, TINY, False)
    assert direct.length == 8  # LANG + W + SEP + 5 context
    assert direct.n_task == 0
    with pytest.raises(ValueError):
        direct.task_span
    prompted = assemble_encoder_input([7, 8], [9, 10, 11, 12, 13, 14], 0,
                                      TINY, True)
    assert prompted.length == 1 + 4 + 2 + 1 + 6
    assert prompted.task_span == (1, 4)
    assert prompted.lang_pos == 0
    empty_ctx = assemble_encoder_input([7], [], 0, TINY, True)
    assert empty_ctx.length == 1 + 4 + 1 + 1
    assert list(empty_ctx.token_ids) == [7, SEP_ID]


def test_assembly_truncation():
    long_ctx = list(range(4, 4 + 100))
    inp = assemble_encoder_input([7], long_ctx, 0, TINY, True)
    assert inp.truncated
    assert inp.length == TINY.max_len
    # context is cut from the right: the first kept ids are the early ones
    assert list(inp.token_ids[:3]) == [7, SEP_ID, 4]


def test_encode_shape_and_determinism():
    mp = _params()
    inp = assemble_encoder_input([7], [8, 9, 10], 0, TINY, True)
    h1 = encode(mp, inp)
    h2 = encode(mp, inp)
    assert h1.shape == (inp.length, TINY.d_model)
    assert np.array_equal(h1.data, h2.data)


def test_encode_position_sensitivity():
    mp = _params()
    a = assemble_encoder_input([7], [8, 9, 10], 0, TINY, True)
    b = assemble_encoder_input([7], [9, 8, 10], 0, TINY, True)
    assert not np.allclose(encode(mp, a).data, encode(mp, b).data)


def test_packed_matches_single_despite_padding():
    # padding shorter rows in a batch must not change any example's states
    mp = _params()
    inps = [assemble_encoder_input([7], [8, 9, 10, 11, 12], 0, TINY, True),
            assemble_encoder_input([13], [14], 1, TINY, True)]
    h = encode_packed(mp, pack(inps))
    for k, inp in enumerate(inps):
        solo = encode(mp, inp)
        assert np.allclose(h.data[k, :inp.length], solo.data, atol=1e-10)


def test_decode_logits_shape_and_causality():
    mp = _params()
    enc_inp = assemble_encoder_input([7], [8, 9], 0, TINY, True)
    h = encode(mp, enc_inp)
    dec = assemble_decoder_input([20, 21, 22, 23], 0, TINY, True)
    logits = decode_logits(mp, h, enc_inp, dec)
    assert logits.shape == (dec.length, TINY.vocab_size)
    # altering a later token leaves earlier positions untouched
    tampered = assemble_decoder_input([20, 21, 30, 31], 0, TINY, True)
    logits2 = decode_logits(mp, encode(mp, enc_inp), enc_inp, tampered)
    k = dec.n_task + 2  # position of token 21; later slots differ
    assert np.allclose(logits.data[:k + 1], logits2.data[:k + 1], atol=1e-12)
    assert not np.allclose(logits.data[k + 2:], logits2.data[k + 2:])


def test_prompt_gradient_flow():
    mp = _params()
    enc_inp = assemble_encoder_input([7], [8, 9], 0, TINY, True)
    dec_inp = assemble_decoder_input([20, 21], 0, TINY, True)
    targets = np.array([20, 21, EOS_ID])
    with Graph() as g:
        h = encode_packed(mp, pack([enc_inp]))
        logits = token_logits_packed(mp, h, pack([enc_inp]), pack([dec_inp]))
        flat = ops.reshape(logits, (len(dec_inp.token_ids), TINY.vocab_size))
        loss = ops.cross_entropy(flat, targets, pad_index=PAD_ID)
        backward(loss, g)
    assert mp.params["task_prompt"].grad is not None
    assert np.any(mp.params["task_prompt"].grad != 0.0)
    assert np.any(mp.params["lang_prompt"].grad != 0.0)

    mp2 = _params()
    enc_d = assemble_encoder_input([7], [8, 9], 0, TINY, False)
    dec_d = assemble_decoder_input([20, 21], 0, TINY, False)
    with Graph() as g:
        h = encode_packed(mp2, pack([enc_d]))
        logits = token_logits_packed(mp2, h, pack([enc_d]), pack([dec_d]))
        flat = ops.reshape(logits, (len(dec_d.token_ids), TINY.vocab_size))
        backward(ops.cross_entropy(flat, targets, pad_index=PAD_ID), g)
    assert mp2.params["task_prompt"].grad is None  # prompts never touched


def test_generate_deterministic_and_lang_check():
    corpus = generate_corpus(CorpusConfig(n_concepts=50, train=60, valid=20,
                                          test=20, n_context_templates=4,
                                          seed=5))
    vocab = Vocab(corpus.languages)
    cfg = ModelConfig(vocab_size=len(vocab), n_langs=3, d_model=32, n_heads=4,
                      n_enc_layers=1, n_dec_layers=1, ffn_dim=48, max_len=64,
                      n_task_tokens=4)
    mp = ModelParams(cfg, np.random.default_rng(1))
    ex = corpus.examples["aa"]["train"][0]
    out1 = generate(mp, vocab, ex.word, ex.context, "aa", "aa", 8)
    out2 = generate(mp, vocab, ex.word, ex.context, "aa", "aa", 8)
    assert out1 == out2
    out_cross = generate(mp, vocab, ex.word, ex.context, "aa", "bb", 8)
    assert isinstance(out_cross, list)
    with pytest.raises(KeyError):
        generate(mp, vocab, ex.word, ex.context, "aa", "zz", 8)


def test_generate_batch_matches_single():
    corpus = generate_corpus(CorpusConfig(n_concepts=50, train=60, valid=20,
                                          test=20, n_context_templates=4,
                                          seed=5))
    vocab = Vocab(corpus.languages)
    cfg = ModelConfig(vocab_size=len(vocab), n_langs=3, d_model=32, n_heads=4,
                      n_enc_layers=1, n_dec_layers=1, ffn_dim=48, max_len=64,
                      n_task_tokens=4)
    mp = ModelParams(cfg, np.random.default_rng(2))
    exs = corpus.examples["aa"]["train"][:3]
    enc_inputs = [assemble_encoder_input(vocab.encode(e.word),
                                         vocab.encode(e.context), 0, cfg, True)
                  for e in exs]
    outs = generate_batch(mp, enc_inputs, [1, 1, 1], 8)
    for e, got in zip(exs, outs):
        solo = generate(mp, vocab, e.word, e.context, "aa", "bb", 8)
        assert vocab.decode(got) == solo


def test_overfit_single_example():
    # teacher-forced loss on one memorized example drops below 0.01
    mp = _params()
    enc_inp = assemble_encoder_input([7, 8], [9, 10, 11], 0, TINY, True)
    dec_inp = assemble_decoder_input([20, 21, 22], 0, TINY, True)
    targets = np.array([20, 21, 22, EOS_ID])
    enc_b, dec_b = pack([enc_inp]), pack([dec_inp])
    opt = AdamState(lr=1e-2)
    loss_val = None
    for _ in range(300):
        with Graph() as g:
            h = encode_packed(mp, enc_b)
            logits = token_logits_packed(mp, h, enc_b, dec_b)
            flat = ops.reshape(logits, (len(dec_inp.token_ids), TINY.vocab_size))
            loss = ops.cross_entropy(flat, targets, pad_index=PAD_ID)
            backward(loss, g)
        loss_val = loss.item()
        if loss_val < 0.005:
            break
        grads = {n: t.grad for n, t in mp.params.items() if t.grad is not None}
        adam_step(mp.params, grads, opt)
        for t in mp.params.values():
            t.zero_grad()
    assert loss_val < 0.01, loss_val


def test_checkpoint_sidecar_roundtrip(tmp_path):
    mp = _params()
    mp.save(tmp_path / "m", ["aa", "bb"], {"note": 1})
    loaded, meta = ModelParams.load(tmp_path / "m")
    assert meta["languages"] == ["aa", "bb"] and meta["note"] == 1
    assert loaded.config == TINY
    for n, t in mp.params.items():
        assert np.array_equal(loaded.params[n].data, t.data)


def test_trainable_subsets():
    mp = _params()
    assert set(mp.trainable("prompt_only")) == {"task_prompt"}
    assert set(mp.trainable("full")) == set(mp.params)
    with pytest.raises(ValueError):
        mp.trainable("other")


def test_dropout_active_only_with_generator():
    cfg = replace(TINY, dropout=0.3)
    mp = ModelParams(cfg, np.random.default_rng(0))
    inp = pack([assemble_encoder_input([7], [8, 9, 10], 0, cfg, True)])
    plain1 = encode_packed(mp, inp)
    plain2 = encode_packed(mp, inp)
    # no generator -> evaluation path, deterministic
    assert np.array_equal(plain1.data, plain2.data)
    rng = np.random.default_rng(5)
    dropped = encode_packed(mp, inp, drop_rng=rng)
    assert not np.allclose(dropped.data, plain1.data)
    # same generator state -> same masks
    again = encode_packed(mp, inp, drop_rng=np.random.default_rng(5))
    assert np.array_equal(dropped.data, again.data)


def test_dropout_zero_rate_ignores_generator():
    mp = _params()  # TINY has dropout 0.0
    inp = pack([assemble_encoder_input([7], [8, 9], 0, TINY, True)])
    a = encode_packed(mp, inp)
    b = encode_packed(mp, inp, drop_rng=np.random.default_rng(3))
    assert np.array_equal(a.data, b.data)
