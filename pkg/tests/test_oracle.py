import numpy as np
import pytest

from csvd import (
    DecodeConfig,
    EmbeddingTable,
    decode_step,
    dense_logits,
    external_mass,
    synth_vocab,
    tv_distance,
)

from conftest import unit_queries


def test_two_token_softmax():
    table = EmbeddingTable(weights=np.eye(2), bias=np.zeros(2))
    result = dense_logits(table, np.array([3.0, 1.0]))
    assert np.array_equal(result.logits, np.array([3.0, 1.0]))
    sigma = 1.0 / (1.0 + np.exp(-2.0))
    assert result.probs == pytest.approx([sigma, 1.0 - sigma], rel=1e-15)
    assert result.topk(1).tolist() == [0]


def test_bias_shift_invariance():
    table = synth_vocab(100, 8, 4, 0.2, 6)
    shifted = EmbeddingTable(weights=table.weights, bias=table.bias + 5.0)
    h = unit_queries(1, 8, 0)[0]
    a = dense_logits(table, h)
    b = dense_logits(shifted, h)
    assert np.allclose(a.probs, b.probs, rtol=0, atol=1e-12)
    assert np.array_equal(a.order, b.order)


def test_probs_normalized():
    table = synth_vocab(512, 16, 8, 0.3, 7)
    for h in unit_queries(5, 16, 1):
        result = dense_logits(table, h)
        assert abs(result.probs.sum() - 1.0) <= 1e-12


def test_topk_order_ties_break_by_id():
    table = EmbeddingTable(weights=np.zeros((4, 2)), bias=np.array([1.0, 2.0, 2.0, 0.0]))
    result = dense_logits(table, np.zeros(2))
    assert result.order.tolist() == [1, 2, 0, 3]


def test_dim_mismatch():
    table = synth_vocab(10, 4, 2, 0.1, 0)
    with pytest.raises(ValueError):
        dense_logits(table, np.zeros(5))


def test_tv_uniform_example():
    table = EmbeddingTable(weights=np.zeros((3, 2)), bias=np.zeros(3))
    full = dense_logits(table, np.zeros(2))
    result = tv_distance(full, np.array([0, 1]))
    assert result.tv == pytest.approx(1.0 / 3.0, rel=1e-15)
    assert result.residual_ratio == pytest.approx(1.0 / 3.0, rel=1e-15)


def test_tv_full_vocab_is_zero():
    table = synth_vocab(50, 4, 2, 0.3, 8)
    full = dense_logits(table, unit_queries(1, 4, 2)[0])
    result = tv_distance(full, np.arange(50))
    assert result.tv == 0.0
    assert result.residual_ratio == 0.0


def test_tv_empty_sub_rejected():
    table = synth_vocab(5, 4, 2, 0.3, 8)
    full = dense_logits(table, np.zeros(4))
    with pytest.raises(ValueError):
        tv_distance(full, np.array([], dtype=np.int64))


def test_tv_identity_random_instances():
    rng = np.random.default_rng(9)
    for _ in range(50):
        V = int(rng.integers(3, 400))
        table = EmbeddingTable(
            weights=np.zeros((V, 1)), bias=rng.normal(0, 3, size=V)
        )
        full = dense_logits(table, np.zeros(1))
        sub = rng.permutation(V)[: int(rng.integers(1, V))]
        result = tv_distance(full, sub)
        assert abs(result.tv - result.residual_ratio) <= 1e-9 * max(1.0, result.tv)


def test_external_mass_examples():
    table = EmbeddingTable(weights=np.zeros((3, 2)), bias=np.zeros(3))
    full = dense_logits(table, np.zeros(2))
    assert external_mass(full, np.arange(3)) == 0.0
    assert external_mass(full, np.array([0, 1])) == pytest.approx(1.0 / 3.0, rel=1e-15)


def test_argmax_agreement_with_certified_decode(medium_table, medium_index):
    cfg = DecodeConfig(k=1, targets=("topk",))
    for h in unit_queries(40, 32, 15):
        outcome = decode_step(medium_table, medium_index, h, cfg)
        dense = dense_logits(medium_table, h)
        best = outcome.token_ids[np.argmax(outcome.logits)]
        assert best == dense.topk(1)[0]
