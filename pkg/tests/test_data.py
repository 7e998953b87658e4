import numpy as np
import pytest

from bljust.data import (
    GeneratorSpec,
    SequencePool,
    corpus_token_error_rate,
    edit_distance,
    generate,
    generate_eval,
    greedy_ctc_decode,
    load_pool,
    save_pool,
    token_error_rate,
)
from bljust.engine import TrainConfig, evaluate_ter, train_supervised
from bljust.losses import ctc_feasible
from bljust.model import EncoderConfig

SMALL = GeneratorSpec(labeled_count=40, unlabeled_count=60, valid_count=10, test_count=10, seed=5)


def test_noiseless_frames_are_prototypes_and_decode_exactly():
    spec = GeneratorSpec(noise_sigma=0.0, frames_per_symbol=(1, 1), labeled_count=30, unlabeled_count=0, seed=2)
    lab, _ = generate(spec)
    protos = spec.prototypes()
    for x, y in zip(lab.frames, lab.labels):
        np.testing.assert_array_equal(x, protos[y])
        # nearest prototype per frame recovers the label exactly
        d = ((x[:, None, :] - protos[None, 1:, :]) ** 2).sum(-1)
        assert [int(i) + 1 for i in d.argmin(1)] == y


def test_same_seed_is_bitwise_identical():
    a, ua = generate(SMALL)
    b, ub = generate(SMALL)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.frames + ua.frames, b.frames + ub.frames))
    assert a.labels == b.labels
    assert ua.labels is None


def test_different_seed_differs():
    a, _ = generate(SMALL)
    b, _ = generate(GeneratorSpec(labeled_count=40, unlabeled_count=60, seed=6))
    assert a.frames[0].tobytes() != b.frames[0].tobytes()


def test_labels_are_feasible_and_in_range():
    lab, _ = generate(SMALL)
    for x, y in zip(lab.frames, lab.labels):
        assert ctc_feasible(y, x.shape[0])
        assert 2 <= len(y) <= 8
        assert all(1 <= s <= SMALL.vocab_size for s in y)


def test_pools_are_disjoint():
    lab, unl = generate(SMALL)
    val, test = generate_eval(SMALL)
    keys = [f.tobytes() for pool in (lab, unl, val, test) for f in pool.frames]
    assert len(keys) == len(set(keys))


def test_spec_validation():
    with pytest.raises(ValueError):
        GeneratorSpec(vocab_size=1)
    with pytest.raises(ValueError):
        GeneratorSpec(frames_per_symbol=(0, 2))
    with pytest.raises(ValueError):
        GeneratorSpec(noise_sigma=-0.1)


def test_prototypes_distinct_with_blank_row():
    p = GeneratorSpec().prototypes()
    assert p.shape == (6, 8) and not p[0].any()
    d = np.sqrt(((p[1:, None] - p[None, 1:]) ** 2).sum(-1)) + np.eye(5)
    assert d.min() > 0


# -- decoding and scoring -------------------------------------------------------------


def _frames(symbols, classes=4):
    lp = np.full((len(symbols), classes), -5.0)
    lp[np.arange(len(symbols)), symbols] = -0.01
    return lp


def test_decode_collapses_then_strips():
    assert greedy_ctc_decode(_frames([1, 1, 0, 2])) == [1, 2]
    assert greedy_ctc_decode(_frames([0, 0, 0])) == []
    assert greedy_ctc_decode(_frames([1, 0, 1])) == [1, 1]


def test_decode_seeded_six_frames():
    lp = np.random.default_rng(17).normal(size=(6, 4))
    # per-frame argmax is [0, 1, 3, 1, 0, 0]: drop the leading blank, keep 1, 3, 1
    assert lp.argmax(1).tolist() == [0, 1, 3, 1, 0, 0]
    assert greedy_ctc_decode(lp) == [1, 3, 1]


def test_decode_respects_length():
    assert greedy_ctc_decode(_frames([1, 2, 3]), length=2) == [1, 2]


def test_token_error_rate_examples():
    assert token_error_rate([1, 2, 3], [1, 2, 3]) == 0.0
    assert token_error_rate([2], [1, 2]) == 0.5
    assert token_error_rate([], [1, 2, 3]) == 1.0
    assert token_error_rate([1], []) == 1.0
    assert edit_distance("kitten", "sitting") == 3


def test_corpus_rate_weights_by_reference_length():
    assert corpus_token_error_rate([[1], [1, 2, 3, 4]], [[2], [1, 2, 3, 4]]) == pytest.approx(1 / 5)


def test_pool_roundtrip(tmp_path):
    lab, unl = generate(SMALL)
    for pool, name in ((lab, "lab.bin"), (unl, "unl.bin")):
        save_pool(tmp_path / name, pool)
        back = load_pool(tmp_path / name)
        assert back.labels == pool.labels
        assert all(a.tobytes() == b.tobytes() for a, b in zip(back.frames, pool.frames))
    assert (tmp_path / "lab.bin").read_bytes()[:8] == b"BLJPOOL1"


def test_pool_batches():
    pool = SequencePool([np.ones((3, 2)), np.ones((5, 2))], [[1], [1, 2]])
    x, lengths = pool.padded([0, 1])
    assert x.shape == (2, 5, 2) and lengths == [3, 5]
    assert not x[0, 3:].any()
    assert list(pool.minibatches(1)) == [[0], [1]]


def test_supervised_reaches_ten_percent_within_fifty_epochs():
    spec = GeneratorSpec(unlabeled_count=0)
    lab, _ = generate(spec)
    _, test = generate_eval(spec)
    model = EncoderConfig(feature_dim=spec.feature_dim, vocab_size=spec.vocab_size)
    params, _, _ = train_supervised(model, lab, TrainConfig(alpha=5e-4, beta=5e-4, epochs=50, seed=0))
    assert evaluate_ter(params, test, model) < 0.10
