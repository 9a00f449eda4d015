"""Encoder behavior: shapes, determinism, padding, attention recording."""

import numpy as np
import pytest

from smat import autodiff as ad
from smat.model import (
    PAD_ID,
    AttentionInternals,
    HeadRecord,
    MiniTransformer,
    ModelConfig,
    head_saliency_logits,
    task_loss,
)
from conftest import fd_gradients, rel_err, tiny_config, tiny_model


def test_config_validates_dimensions():
    with pytest.raises(ValueError):
        tiny_config(model_dim=10)  # not heads_per_layer * head_dim
    with pytest.raises(ValueError):
        tiny_config(task="ranking")


def test_config_round_trips_through_dict():
    cfg = tiny_config()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_output_shapes():
    model = tiny_model()
    out = model.forward([3, 4, 5])
    assert out.shape == (2,)
    reg = tiny_model(task="regression", num_classes=1)
    assert reg.forward([3, 4, 5]).shape == ()


def test_forward_is_deterministic():
    model = tiny_model()
    a = model.forward([2, 3, 4, 5]).data
    b = model.forward([2, 3, 4, 5]).data
    assert np.array_equal(a, b)


def test_record_flag_does_not_change_output():
    model = tiny_model()
    plain = model.forward([2, 3, 4]).data
    recorded, internals = model.forward([2, 3, 4], record=True)
    assert np.array_equal(plain, recorded.data)
    assert internals.seq_len == 3
    assert len(internals.heads) == model.config.total_heads


def test_trailing_padding_is_ignored():
    model = tiny_model()
    short = model.forward([2, 3, 4]).data
    padded = model.forward([2, 3, 4, PAD_ID, PAD_ID]).data
    assert np.array_equal(short, padded)


def test_input_validation():
    model = tiny_model()
    with pytest.raises(ValueError):
        model.forward([2, PAD_ID, 3])  # interior padding
    with pytest.raises(ValueError):
        model.forward([PAD_ID, PAD_ID])  # nothing left
    with pytest.raises(ValueError):
        model.forward([])
    with pytest.raises(ValueError):
        model.forward([2, 99])  # out of vocabulary
    with pytest.raises(ValueError):
        model.forward([2] * 7)  # longer than max_len


def test_attention_rows_are_distributions():
    model = tiny_model(seed=3)
    _, internals = model.forward([2, 3, 4, 5], record=True)
    for head in internals.heads:
        att = head.attention.data
        assert att.shape == (4, 4)
        assert np.all(att >= 0)
        assert np.allclose(att.sum(axis=1), 1.0, atol=1e-6)


def test_equal_embeddings_give_uniform_attention():
    """One layer, one head, identical token vectors: every score row is flat."""
    model = tiny_model(num_layers=1, heads_per_layer=1, model_dim=4, head_dim=4, ffn_dim=8)
    with ad.no_grad():
        tok = model.params["embed.tok"].data
        tok[:] = tok[2]  # every token now shares one embedding row
        model.params["embed.pos"].data[:] = 0.0
    _, internals = model.forward([2, 3, 4], record=True)
    att = internals.heads[0].attention.data
    assert np.allclose(att, 1.0 / 3.0, atol=1e-6)


def test_head_count_and_order():
    model = tiny_model()
    _, internals = model.forward([2, 3], record=True)
    layout = [(h.layer, h.head) for h in internals.heads]
    assert layout == [(0, 0), (0, 1), (1, 0), (1, 1)]


# ---------------------------------------------------------------------------
# head saliency logits


def brute_force_head_logits(head: HeadRecord) -> np.ndarray:
    """Double loop over (query, key) positions; the oracle for s^h."""
    q = head.queries.data
    k = head.keys.data
    length, dim = q.shape
    scores = np.zeros((length, length))
    for i in range(length):
        for j in range(length):
            scores[i, j] = float(q[i] @ k[j]) / np.sqrt(dim)
    return scores.mean(axis=0)


def test_head_saliency_matches_brute_force():
    model = tiny_model(seed=9, num_layers=2, heads_per_layer=4, model_dim=16, head_dim=4)
    _, internals = model.forward([2, 3, 4, 5, 6], record=True)
    logits = head_saliency_logits(internals)
    assert len(logits) == 8
    for head, got in zip(internals.heads, logits):
        want = brute_force_head_logits(head)
        assert rel_err(got.data, want) < 1e-5


def test_head_saliency_single_token():
    model = tiny_model(seed=1)
    _, internals = model.forward([4], record=True)
    logits = head_saliency_logits(internals)
    for head, got in zip(internals.heads, logits):
        q = head.queries.data[0]
        k = head.keys.data[0]
        want = float(q @ k) / np.sqrt(q.size)
        assert got.shape == (1,)
        assert abs(float(got.data[0]) - want) < 1e-6


def test_head_saliency_identical_queries():
    """If all query rows coincide, the mean over rows is any single row."""
    length, dim = 3, 4
    rng = np.random.default_rng(5)
    q_row = rng.normal(size=dim)
    q = ad.constant(np.tile(q_row, (length, 1)), dtype=np.float64)
    k = ad.constant(rng.normal(size=(length, dim)), dtype=np.float64)
    scores = ad.mul(ad.matmul(q, ad.transpose(k)),
                    ad.constant(np.asarray(1.0 / np.sqrt(dim))))
    att = ad.softmax(scores, axis=-1)
    head = HeadRecord(layer=0, head=0, queries=q, keys=k, scores=scores, attention=att)
    internals = AttentionInternals(seq_len=length, heads=[head])
    (got,) = head_saliency_logits(internals)
    want = (np.tile(q_row, (length, 1)) @ k.data.T)[0] / np.sqrt(dim)
    assert np.allclose(got.data, want, atol=1e-12)


# ---------------------------------------------------------------------------
# end-to-end gradients


def test_model_loss_gradients_match_finite_differences():
    """Whole-model gradient check at 10 seeded points, relative error < 1e-3."""
    ids = [2, 3, 4, 5]
    label = 1
    for seed in range(10):
        model = tiny_model(seed=seed, num_layers=2, heads_per_layer=2,
                           model_dim=8, head_dim=4, ffn_dim=16)
        names = model.param_names()
        loss = task_loss(model, ids, label)
        grads = {n: g.data for n, g in zip(names, ad.backward(loss, model.param_list()))}

        baseline = model.clone_param_data()
        for name in names:
            base = baseline[name]
            stride = max(1, base.size // 6)  # probe a spread of coordinates
            for i in range(0, base.size, stride):
                h = 1e-5
                for sign, out in ((1.0, "up"), (-1.0, "down")):
                    probe = {k: v.copy() for k, v in baseline.items()}
                    probe[name].reshape(-1)[i] += sign * h
                    model.load_param_data(probe)
                    with ad.no_grad():
                        val = task_loss(model, ids, label).item()
                    if out == "up":
                        up = val
                    else:
                        down = val
                fd = (up - down) / (2.0 * h)
                got = float(grads[name].reshape(-1)[i])
                assert abs(got - fd) <= 1e-3 * max(abs(fd), 1.0), (
                    f"seed {seed} {name}[{i}]: {got} vs {fd}")
            model.load_param_data(baseline)


def test_scalar_mix_is_shift_invariant():
    model = tiny_model(seed=2)
    ids = [3, 4, 5]
    before = model.forward(ids).data.copy()
    with ad.no_grad():
        model.params["mix.scalars"].data += 3.7
    after = model.forward(ids).data
    assert np.allclose(before, after, atol=1e-5)


def test_predict_argmax_and_tie_break():
    model = tiny_model()
    with ad.no_grad():
        model.params["head.weight"].data[:] = 0.0
        model.params["head.bias"].data[:] = np.array([0.2, 0.9], dtype=model.dtype)
    assert model.predict([2, 3]) == 1
    with ad.no_grad():
        model.params["head.bias"].data[:] = np.array([0.5, 0.5], dtype=model.dtype)
    assert model.predict([2, 3]) == 0  # ties go to the lowest class index


def test_regression_predict_returns_float():
    model = tiny_model(task="regression", num_classes=1)
    out = model.predict([2, 3, 4])
    assert isinstance(out, float)


def test_freeze_blocks_writes():
    model = tiny_model()
    model.freeze()
    assert not any(p.requires_grad for p in model.param_list())
    with pytest.raises(ValueError):
        model.params["head.bias"].data[:] = 1.0


def test_clone_and_load_round_trip():
    model = tiny_model(seed=4)
    snapshot = model.clone_param_data()
    other = tiny_model(seed=5)
    other.load_param_data(snapshot)
    for name in model.param_names():
        assert np.array_equal(model.params[name].data, other.params[name].data)


def test_param_override_does_not_touch_committed_weights():
    model = tiny_model(seed=6)
    ids = [2, 3, 4]
    committed = model.forward(ids).data.copy()
    shifted = {
        name: ad.Tensor(p.data + 0.01, name=name)
        for name, p in model.params.items()
    }
    overridden = model.forward(ids, params=shifted).data
    assert not np.array_equal(committed, overridden)
    assert np.array_equal(model.forward(ids).data, committed)
