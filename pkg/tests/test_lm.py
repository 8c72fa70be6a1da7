import numpy as np
import numpy.testing as npt
import pytest

from storygen import autodiff as ad
from storygen.autodiff import Tensor
from storygen.lm import (BOS_ID, EOS_ID, PAD_ID, FrozenLm, LmConfig,
                         validate_token_sequence)

TOY = LmConfig(vocab_size=11, embed_dim=16, n_layers=2, n_heads=2, max_positions=32)


@pytest.fixture(scope="module")
def toy_lm():
    return FrozenLm.init(TOY, seed=7).freeze()


def test_config_validation():
    with pytest.raises(ValueError):
        LmConfig(vocab_size=10, embed_dim=10, n_heads=4)
    for name in ("small", "medium", "large", "xl"):
        cfg = LmConfig.preset(name)
        assert cfg.embed_dim % cfg.n_heads == 0


def test_token_sequence_invariants():
    validate_token_sequence([BOS_ID, 5, EOS_ID, PAD_ID, PAD_ID], 11)
    with pytest.raises(ValueError):
        validate_token_sequence([PAD_ID, 5], 11)        # PAD before non-PAD
    with pytest.raises(ValueError):
        validate_token_sequence([EOS_ID, 5, EOS_ID], 11)  # two EOS
    with pytest.raises(ValueError):
        validate_token_sequence([11], 11)                # out of range


def test_embed_tokens_deterministic_and_length(toy_lm):
    a = toy_lm.embed_tokens([4, 4, 9])
    b = toy_lm.embed_tokens([4, 4, 9])
    npt.assert_array_equal(a.data, b.data)
    assert a.shape == (3, TOY.embed_dim)
    # same token at different positions differs only by the position row
    npt.assert_array_equal(a.data[0] - a.data[0], np.zeros(TOY.embed_dim))
    assert not np.array_equal(a.data[0], a.data[1])


def test_embed_pad_matches_direct_lookup(toy_lm):
    out = toy_lm.embed_tokens([PAD_ID, PAD_ID]).data
    wte = toy_lm.params["wte"].data
    wpe = toy_lm.params["wpe"].data
    npt.assert_array_equal(out[0], wte[PAD_ID] + wpe[0])
    npt.assert_array_equal(out[1], wte[PAD_ID] + wpe[1])


def test_embed_rejects_bad_id(toy_lm):
    with pytest.raises(ValueError):
        toy_lm.embed_tokens([TOY.vocab_size])


def test_forward_row_counts(toy_lm):
    x = toy_lm.embed_tokens([1, 2, 3, 4])
    out = toy_lm.forward(x)
    assert out.logits.shape == (4, TOY.vocab_size)
    assert out.final_hidden.shape == (4, TOY.embed_dim)


def test_forward_rejects_too_long(toy_lm):
    too_long = Tensor(np.zeros((TOY.max_positions + 1, TOY.embed_dim)))
    with pytest.raises(ValueError) as exc:
        toy_lm.forward(too_long)
    assert str(TOY.max_positions) in str(exc.value)


def test_causality_bit_identical_per_position(toy_lm):
    rng = np.random.default_rng(11)
    base = rng.normal(size=(6, TOY.embed_dim)).astype(np.float32)
    with ad.no_grad():
        ref = toy_lm.forward(Tensor(base)).logits.data
        for tpos in range(5):
            perturbed = base.copy()
            perturbed[tpos + 1] += rng.normal(size=TOY.embed_dim).astype(np.float32)
            got = toy_lm.forward(Tensor(perturbed)).logits.data
            npt.assert_array_equal(got[: tpos + 1], ref[: tpos + 1])
            assert not np.array_equal(got[tpos + 1], ref[tpos + 1])


def test_gradient_reaches_prefix_but_not_frozen_weights(toy_lm):
    rng = np.random.default_rng(3)
    prefix = Tensor(rng.normal(0, 0.5, size=(2, TOY.embed_dim)).astype(np.float32),
                    requires_grad=True)

    def loss():
        x = ad.concat_rows([prefix, toy_lm.embed_tokens([5, 6], position_offset=2)])
        out = toy_lm.forward(x)
        return ad.sum_all(ad.take_per_row(toy_lm.log_probs(out.logits), np.array([5, 6, 7, 8])))

    ad.backward(loss())
    assert prefix.grad is not None and np.abs(prefix.grad).max() > 0
    assert all(p.grad is None for p in toy_lm.params.values())
    prefix.zero_grad()

    res = ad.grad_check(loss, {"prefix": prefix}, step=1e-3, max_coords_per_param=10)
    assert res.max_rel_error < 1e-4, res


def test_log_probs_uniform_and_shift_invariance(toy_lm):
    logits = Tensor(np.zeros((2, TOY.vocab_size), dtype=np.float32))
    lp = toy_lm.log_probs(logits).data
    npt.assert_allclose(lp, np.full_like(lp, -np.log(TOY.vocab_size)), atol=1e-6)

    rng = np.random.default_rng(5)
    raw = rng.normal(size=(3, TOY.vocab_size)).astype(np.float32)
    a = toy_lm.log_probs(Tensor(raw)).data
    b = toy_lm.log_probs(Tensor(raw + 7.5)).data
    npt.assert_allclose(a, b, atol=1e-6)
    npt.assert_allclose(np.exp(a).sum(axis=-1), np.ones(3), atol=1e-6)


def test_perplexity_uniform_lm_equals_vocab_size():
    cfg = LmConfig(vocab_size=13, embed_dim=8, n_layers=1, n_heads=2, max_positions=16)
    lm = FrozenLm.init(cfg, seed=0)
    lm.params["wte"].data[:] = 0.0  # zero embeddings + tied head -> uniform logits
    lm.freeze()
    assert lm.perplexity([BOS_ID, 4, 5, 6]) == pytest.approx(13.0, rel=1e-5)


def test_perplexity_of_own_greedy_continuation_is_near_one():
    cfg = LmConfig(vocab_size=9, embed_dim=16, n_layers=1, n_heads=2, max_positions=24)
    lm = FrozenLm.init(cfg, seed=2)
    lm.params["wte"].data *= 60.0  # sharpen the tied head to near-determinism
    lm.freeze()
    seq = [BOS_ID]
    with ad.no_grad():
        for _ in range(6):
            out = lm.forward(lm.embed_tokens(seq))
            seq.append(int(np.argmax(out.logits.data[-1])))
    assert lm.perplexity(seq) < 1.05


def test_perplexity_matches_per_position_oracle(toy_lm):
    seq = [BOS_ID, 5, 8, 3, 9, EOS_ID]
    got = toy_lm.perplexity(seq)
    with ad.no_grad():
        logits = toy_lm.forward(toy_lm.embed_tokens(seq)).logits.data.astype(np.float64)
    nll = 0.0
    for pos in range(len(seq) - 1):
        row = logits[pos]
        lse = np.log(np.sum(np.exp(row - row.max()))) + row.max()
        nll -= row[seq[pos + 1]] - lse
    expect = np.exp(nll / (len(seq) - 1))
    assert got == pytest.approx(expect, abs=1e-5)


def test_perplexity_rejects_short(toy_lm):
    with pytest.raises(ValueError):
        toy_lm.perplexity([BOS_ID])


def test_save_load_roundtrip(tmp_path, toy_lm):
    path = tmp_path / "lm.ntc"
    toy_lm.save(path)
    loaded = FrozenLm.load(path)
    assert loaded.frozen
    assert loaded.config == TOY
    assert loaded.checksum() == toy_lm.checksum()
