import math

import numpy as np
import pytest

from vladistill import autodiff as ad
from vladistill import model as M
from vladistill import scenario as sc


@pytest.fixture(scope="module")
def data():
    return sc.build_dataset(10, seed=0)


@pytest.fixture(scope="module")
def net():
    return M.VLAModel.create(0)


def test_parameter_budget(net):
    assert net.num_parameters() < M.MAX_PARAMS
    big = dict(net.params)
    big["decoder.extra"] = ad.Tensor(np.zeros((1300, 1000), np.float32))
    with pytest.raises(ValueError):
        M.VLAModel(big)


def test_vocab_layout():
    assert M.VOCAB == 263
    assert (M.X_OFFSET, M.Y_OFFSET, M.INSTR_OFFSET) == (0, 128, 256)
    w = np.random.default_rng(1).uniform(-30, 30, (6, 2))
    tok = M.trajectory_tokens(w)
    assert np.all(tok[0::2] < 128) and np.all((tok[1::2] >= 128) & (tok[1::2] < 256))
    np.testing.assert_allclose(M.tokens_to_waypoints(tok), sc.dequantize(sc.quantize(w)[0]))


def test_encoder_shapes_and_determinism(net, data):
    v = data.train[3].views
    a = M.encode_views(v, net.params).data
    b = M.encode_views(v, net.params).data
    assert a.shape == (1, 48, 64)
    assert a.tobytes() == b.tobytes()
    z = M.encode_views(np.zeros_like(v), net.params).data
    assert np.linalg.norm(a - z) > 0
    with pytest.raises(ValueError):
        M.encode_views(np.zeros((3, 8, 8)), net.params)


def test_views_not_interchangeable(net):
    scene = sc.straight_scene(obstacles=[(8.0, 5.0, 1.0)])
    v = sc.render_views(scene, 0)
    a = M.encode_views(v, net.params).data
    b = M.encode_views(v[[1, 0, 2]], net.params).data
    assert np.abs(a - b).max() > 1e-4


def test_untrained_nll_near_uniform(net, data):
    b = M.Batch.from_samples(data.train[:16])
    with ad.no_grad():
        out = M.forward_teacher_forced(net, b)
        loss = M.nll_loss(out, b.targets).item()
    assert abs(loss - math.log(M.VOCAB)) < 0.5


def test_nll_definition_and_uniform():
    logits = ad.Tensor(np.zeros((2, 12, M.VOCAB), np.float32))
    out = M.ForwardOutput(logits, logits, (5, 17))
    tg = np.zeros((2, 12), np.int64)
    assert math.isclose(M.nll_loss(out, tg).item(), math.log(M.VOCAB), rel_tol=1e-6)
    hot = np.full((2, 12, M.VOCAB), -50.0, np.float32)
    hot[..., 0] = 50.0
    assert M.nll_loss(M.ForwardOutput(logits, ad.Tensor(hot), (5, 17)), tg).item() < 1e-6
    with pytest.raises(ValueError):
        M.nll_loss(out, np.zeros((2, 11), np.int64))


def test_sequence_layout(net, data):
    b = M.Batch.from_samples(data.train[:2])
    with ad.no_grad():
        s = M.forward_teacher_forced(net, b)
        f = M.forward_teacher_forced(net, b, future=True)
        c = M.forward_teacher_forced(net, b, future=True, coarse_tokens=b.targets)
    assert s.trajectory_span == (51, 63)
    assert f.trajectory_span == (51 + 1 + 6 * 49, 51 + 1 + 6 * 49 + 12)
    assert c.trajectory_span[0] == f.trajectory_span[1] + 1
    for o in (s, f, c):
        assert o.hidden.shape == (2, 12, 64) and o.logits.shape == (2, 12, M.VOCAB)
    with pytest.raises(ValueError):
        M.forward_teacher_forced(net, b, targets=b.targets[:, :10])


def test_dropout_zero_ignores_stream(net, data):
    b = M.Batch.from_samples(data.train[:2])
    with ad.no_grad():
        a = M.forward_teacher_forced(net, b, dropout_p=0.0, stream=ad.RngStream("x", 1)).logits.data
        c = M.forward_teacher_forced(net, b, dropout_p=0.0, stream=ad.RngStream("y", 2)).logits.data
        d = M.forward_teacher_forced(net, b, dropout_p=0.3, stream=ad.RngStream("y", 2)).logits.data
    assert a.tobytes() == c.tobytes()
    assert np.abs(a - d).max() > 0


def test_batch_duplication(net, data):
    s = data.train[:3]
    with ad.no_grad():
        one = M.forward_teacher_forced(net, M.Batch.from_samples(s)).logits.data
        two = M.forward_teacher_forced(net, M.Batch.from_samples(s + s)).logits.data
    np.testing.assert_allclose(two[:3], one, atol=1e-5)
    np.testing.assert_allclose(two[3:], one, atol=1e-5)


def test_causality(net, data):
    b = M.Batch.from_samples(data.train[:2])
    tg = b.targets.copy()
    with ad.no_grad():
        base = M.forward_teacher_forced(net, b, tg).logits.data
        for j in (0, 5, 11):
            t2 = tg.copy()
            t2[:, j] = (t2[:, j] + 17) % 128 + (j % 2) * 128
            pert = M.forward_teacher_forced(net, b, t2).logits.data
            # input row j+1 carries target j, so rows <= j are untouched
            np.testing.assert_array_equal(pert[:, : j + 1], base[:, : j + 1])
            if j < 11:
                assert np.abs(pert[:, j + 1 :] - base[:, j + 1 :]).max() > 0


def test_prefix_visibility(net, data):
    b = M.Batch.from_samples(data.train[:2])
    with ad.Tape():
        vis = ad.Tensor(M.encode_views(b.views, net.params).data, requires_grad=True)
        loss = M.nll_loss(M.forward_teacher_forced(net, b, visual=vis), b.targets)
        ad.backward(loss)
    assert np.abs(vis.grad).max() > 0


def test_generate_self_consistent(net, data):
    b = M.Batch.from_samples(data.train[:4])
    tok, out = M.generate(net, b)
    tok2, out2 = M.generate(net, b)
    assert tok.tobytes() == tok2.tobytes()
    assert np.all(tok[:, 0::2] < 128) and np.all((tok[:, 1::2] >= 128) & (tok[:, 1::2] < 256))
    with ad.no_grad():
        tf = M.forward_teacher_forced(net, b, tok)
    np.testing.assert_allclose(tf.logits.data, out.logits.data, atol=1e-5)
    np.testing.assert_allclose(tf.hidden.data, out.hidden.data, atol=1e-5)
    w = M.tokens_to_waypoints(tok[0])
    assert np.all(np.abs(w) <= sc.RANGE)


def test_generate_teacher_paths_match_teacher_forcing(net, data):
    b = M.Batch.from_samples(data.train[:2])
    ctok, _ = M.generate(net, b, future=True)
    ftok, fout = M.generate(net, b, future=True, coarse_tokens=ctok)
    with ad.no_grad():
        tf = M.forward_teacher_forced(net, b, ftok, future=True, coarse_tokens=ctok)
    np.testing.assert_allclose(tf.logits.data, fout.logits.data, atol=1e-5)


def test_lm_head_np_bitwise(net):
    h = np.random.default_rng(0).normal(size=(3, 12, 64)).astype(np.float32)
    a = M.lm_head(net.params, ad.Tensor(h)).data
    assert a.tobytes() == M.lm_head_np(net.params, h).tobytes()


def test_overfit_one_sample(data):
    net = M.VLAModel.create(3)
    b = M.Batch.from_samples(data.train[7:8])
    state = ad.AdamState()
    for _ in range(150):
        with ad.Tape():
            loss = M.nll_loss(M.forward_teacher_forced(net, b), b.targets)
            ad.backward(loss)
        grads = {k: v.grad for k, v in net.params.items()}
        ad.clip_grad_norm(grads, 1.0)
        ad.adam_step(net.params, grads, state, 3e-3)
        ad.zero_grads(net.params.values())
    tok, _ = M.generate(net, b)
    np.testing.assert_array_equal(tok, b.targets)
