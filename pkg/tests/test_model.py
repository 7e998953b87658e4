from pathlib import Path

import numpy as np
import pytest

from bljust import autodiff as ad
from bljust.autodiff import Graph
from bljust.losses import ContrastiveBatch, LabeledBatch, ctc_loss, infonce_loss, sample_contrastive_pairs
from bljust.model import (
    EncoderConfig,
    ParameterPartition,
    bind,
    classify,
    encode,
    init_params,
    load_checkpoint,
    predict_log_probs,
    save_checkpoint,
)

from oracles import central_difference, rel_err

GOLDEN = Path(__file__).parent / "data" / "encode_golden.npy"
CFG = EncoderConfig(feature_dim=3, hidden_dim=4, context_dim=5, num_layers=2, vocab_size=3, prediction_offsets=(1, 2))


def _context(params, x, cfg=CFG):
    g = Graph()
    theta, _ = bind(g, params)
    return encode(theta, g.constant(x), cfg).value


def test_zero_everything_gives_zero_context():
    params = init_params(CFG, np.random.default_rng(0))
    zeros = ParameterPartition({k: np.zeros_like(v) for k, v in params.theta.items()}, params.phi)
    assert not _context(zeros, np.zeros((2, 4, 3))).any()


def test_encode_is_causal():
    rng = np.random.default_rng(1)
    params = init_params(CFG, rng)
    x = rng.normal(size=(2, 6, 3))
    base = _context(params, x)
    for t in range(6):
        y = x.copy()
        y[:, t:] += rng.normal(size=y[:, t:].shape)
        out = _context(params, y)
        np.testing.assert_array_equal(out[:, :t], base[:, :t])
        if t < 6:
            assert not np.array_equal(out[:, t], base[:, t])


def test_encode_golden_snapshot():
    rng = np.random.default_rng(20240611)
    params = init_params(CFG, rng)
    x = rng.normal(size=(2, 5, 3))
    out = _context(params, x)
    if not GOLDEN.exists():  # first run pins the snapshot
        GOLDEN.parent.mkdir(exist_ok=True)
        np.save(GOLDEN, out)
    np.testing.assert_allclose(out, np.load(GOLDEN), rtol=0, atol=1e-12)


def test_encode_rejects_bad_dims():
    params = init_params(CFG, np.random.default_rng(0))
    with pytest.raises(ad.ShapeError):
        _context(params, np.zeros((2, 4, 7)))


def test_zero_head_gives_uniform_log_probs():
    rng = np.random.default_rng(2)
    params = init_params(CFG, rng)
    params.phi = {k: np.zeros_like(v) for k, v in params.phi.items()}
    lp = predict_log_probs(params, rng.normal(size=(2, 4, 3)), CFG)
    np.testing.assert_allclose(lp, -np.log(4.0), atol=1e-15)


def test_rows_normalize():
    rng = np.random.default_rng(3)
    params = init_params(CFG, rng)
    lp = predict_log_probs(params, rng.normal(size=(3, 7, 3)) * 3, CFG)
    np.testing.assert_allclose(np.exp(lp).sum(-1), 1.0, atol=1e-8)


def test_classify_rejects_bad_context():
    params = init_params(CFG, np.random.default_rng(0))
    g = Graph()
    _, phi = bind(g, params)
    with pytest.raises(ad.ShapeError):
        classify(phi, g.constant(np.zeros((1, 2, 3))), CFG)


def _toy_labeled(rng):
    x = rng.normal(size=(2, 5, 3))
    return LabeledBatch(x, [[1, 2], [3]], [5, 3])


def _ctc_of(params, batch):
    g = Graph()
    theta, phi = bind(g, params)
    loss = ctc_loss(classify(phi, encode(theta, g.constant(batch.inputs), CFG), CFG), batch)
    return loss, g


def test_end_to_end_ctc_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    params = init_params(CFG, rng)
    batch = _toy_labeled(rng)
    loss, g = _ctc_of(params, batch)
    grads = g.backward(loss)
    for group in ("theta", "phi"):
        for name, value in getattr(params, group).items():

            def f(v, name=name, group=group):
                p = params.copy()
                getattr(p, group)[name] = v
                return float(_ctc_of(p, batch)[0].value)

            fd = central_difference(f, value)
            assert rel_err(grads[name], fd) < 1e-4, name


def test_partition_closure():
    rng = np.random.default_rng(5)
    params = init_params(CFG, rng)
    loss, g = _ctc_of(params, _toy_labeled(rng))
    grads = g.backward(loss)
    assert set(grads) == params.names()
    assert set(params.phi) == {"cls.W", "cls.b"}
    # heads are unreachable from CTC
    assert not grads["nce.head1"].any() and not grads["nce.head2"].any()

    g = Graph()
    theta, phi = bind(g, params)
    x = rng.normal(size=(2, 6, 3))
    batch = ContrastiveBatch(x, [6, 6], [1, 2], 2)
    pairs = sample_contrastive_pairs([6, 6], [1, 2], 2, rng)
    ctx = encode(theta, g.constant(x), CFG)
    nce = infonce_loss(ctx, x, {p: theta[f"nce.head{p}"] for p in (1, 2)}, batch, pairs=pairs)
    grads = g.backward(nce)
    for name in params.phi:
        assert not grads[name].any()
    assert any(grads[name].any() for name in params.theta)


def test_partition_rejects_overlap():
    with pytest.raises(ValueError):
        ParameterPartition({"a": np.zeros(1)}, {"a": np.zeros(1)})


def test_init_is_seeded_and_bounded():
    a = init_params(CFG, np.random.default_rng(9))
    b = init_params(CFG, np.random.default_rng(9))
    assert a.equal(b)
    assert np.abs(a.theta["rnn0.W_x"]).max() <= 1 / np.sqrt(3)
    assert np.abs(a.phi["cls.W"]).max() <= 1 / np.sqrt(5)


def test_checkpoint_roundtrip(tmp_path):
    params = init_params(CFG, np.random.default_rng(6))
    path = tmp_path / "ckpt.bin"
    save_checkpoint(path, params, {"epoch": 3})
    loaded, meta = load_checkpoint(path)
    assert loaded.equal(params)
    assert meta == {"epoch": 3}
    raw = path.read_bytes()
    assert raw[:8] == b"BLJCKPT1"


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"nope" * 10)
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(feature_dim=0)
    with pytest.raises(ValueError):
        EncoderConfig(feature_dim=2, prediction_offsets=(0,))
