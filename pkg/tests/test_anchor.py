import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vladistill import anchor as A
from vladistill import autodiff as ad
from vladistill import model as M
from vladistill import scenario as sc


@pytest.fixture(scope="module")
def setup():
    ds = sc.build_dataset(10, seed=4)
    net = M.VLAModel.create(1)
    batch = M.Batch.from_samples(ds.train[:4])
    anchor = A.make_self_anchor_teacher(net)
    z_v = anchor.encode(batch.views)
    ctx = A.anchor_context(net.params, batch)
    return net, batch, anchor, z_v, ctx


def random_params(seed: int, scale: float) -> dict:
    base = A.init_anchorformer(M.VLAModel.create(0).params, seed)
    rng = np.random.default_rng(seed)
    return {k: ad.Tensor((v.data + scale * rng.standard_normal(v.shape)).astype(np.float32)) for k, v in base.items()}


def test_layer_is_copy_of_final_decoder_block(setup):
    net = setup[0]
    p = A.init_anchorformer(net.params, 0)
    last = f"decoder.block{M.DEC_BLOCKS - 1}."
    copied = {k[len(last):]: v for k, v in net.params.items() if k.startswith(last)}
    assert len(copied) == sum(k.startswith("anchorformer.layer.") for k in p)
    for k, v in copied.items():
        assert p[f"anchorformer.layer.{k}"].data.tobytes() == v.data.tobytes()
    assert p["anchorformer.queries"].shape == (A.N_QUERIES, M.D_MODEL)
    assert p["anchorformer.scorer.w"].shape == (M.D_MODEL, 1)


def test_zero_scorer_gives_half(setup):
    net, _, _, z_v, ctx = setup
    p = A.init_anchorformer(net.params, 0)
    p["anchorformer.scorer.w"].data[:] = 0
    p["anchorformer.scorer.b"].data[:] = 3.0  # a constant offset is removed by centering
    w = A.anchor_forward(z_v, *ctx, p).data
    assert w.shape == (4, 48)
    np.testing.assert_array_equal(w, np.float32(0.5))


def test_closed_form_sigmoid():
    w = A.anchor_weights_from_scores(ad.Tensor(np.array([[2.0, -2.0]], np.float32))).data[0]
    np.testing.assert_allclose(w, [1 / (1 + math.exp(-1)), 1 / (1 + math.exp(1))], atol=1e-6)
    np.testing.assert_allclose(w, [0.7311, 0.2689], atol=1e-4)


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 30.0))
def test_weight_properties_random_params(setup, seed, scale):
    _, _, _, z_v, ctx = setup
    p = random_params(seed, scale)
    s = A.anchor_scores(z_v, *ctx, p).data
    w = A.anchor_weights_from_scores(ad.Tensor(s)).data
    assert np.all((w > 0) & (w < 1))
    assert np.abs(s.astype(np.float64).mean(axis=1)).max() <= 1e-6 * max(1.0, np.abs(s).max())
    for srow, wrow in zip(s, w):
        order = np.argsort(srow, kind="stable")
        assert np.all(np.diff(wrow[order]) >= 0)
        # distinct weights keep the exact score ordering
        if len(np.unique(wrow)) == len(wrow):
            np.testing.assert_array_equal(np.argsort(wrow, kind="stable"), order)


def test_weights_depend_on_trajectory(setup):
    net, batch, anchor, z_v, (z_p, z_s, z_w) = setup
    p = random_params(11, 0.3)
    w = A.anchor_forward(z_v, z_p, z_s, z_w, p).data
    swapped = ad.Tensor(z_w.data[[1, 0, 2, 3]])
    w2 = A.anchor_forward(z_v, z_p, z_s, swapped, p).data
    assert np.abs(w - w2)[:2].max() > 0


def test_width_mismatch(setup):
    _, _, _, z_v, (z_p, z_s, z_w) = setup
    p = A.init_anchorformer(setup[0].params, 0)
    with pytest.raises(ValueError):
        A.anchor_forward(z_v, ad.Tensor(np.zeros((4, 1, 32), np.float32)), z_s, z_w, p)


def test_loss_examples():
    z = ad.Tensor(np.random.default_rng(0).standard_normal((2, 48, 64)).astype(np.float32))
    w = np.full((2, 48), 0.3, np.float32)
    assert A.visual_distill_loss(z, ad.Tensor(z.data.copy()), w).item() == 0.0
    tea = ad.Tensor(np.zeros((1, 1, 4), np.float32))
    stu = ad.Tensor(np.array([[[1.0, 1.0, 1.0, 1.0]]], np.float32))
    assert A.visual_distill_loss(tea, stu, np.array([[0.5]], np.float32)).item() == pytest.approx(2.0)
    other = ad.Tensor(z.data + 0.1)
    l1 = A.visual_distill_loss(z, other, w).item()
    l2 = A.visual_distill_loss(z, other, 2 * w).item()
    assert l2 == pytest.approx(2 * l1, rel=1e-6)
    assert l1 > 0
    with pytest.raises(ValueError):
        A.visual_distill_loss(z, other, np.ones((2, 47), np.float32))


def test_gradient_routing(setup):
    net, batch, anchor, z_v, ctx = setup
    p = A.init_anchorformer(net.params, 0)
    for t in p.values():
        t.requires_grad = True
    student = net.copy()
    student.params["encoder.patch.w"].data += 0.05
    with ad.Tape():
        z_stu = M.encode_views(batch.views, student.params)
        w = A.anchor_forward(z_v, *ctx, p)
        loss = A.visual_distill_loss(z_v, z_stu, w)
        ad.backward(loss)
    assert z_v.grad is None
    assert np.abs(student.params["encoder.patch.w"].grad).max() > 0
    assert np.abs(p["anchorformer.scorer.w"].grad).max() > 0
    assert np.abs(p["anchorformer.queries"].grad).max() > 0
    assert all(v.grad is None for v in anchor.params.values())


def test_self_anchor_copy(setup):
    net, batch, _, _, _ = setup
    student = net.copy()
    anchor = A.make_self_anchor_teacher(student)
    for k, v in student.encoder_params().items():
        assert anchor.params[k].data.tobytes() == v.data.tobytes()
        assert not anchor.params[k].requires_grad
    z_tea = anchor.encode(batch.views)
    with ad.no_grad():
        z_stu = M.encode_views(batch.views, student.params)
    w = np.random.default_rng(1).random((4, 48)).astype(np.float32)
    assert A.visual_distill_loss(z_tea, z_stu, w).item() == 0.0
    student.params["encoder.patch.w"].data += 0.01
    student.sft_steps = 1
    with ad.no_grad():
        assert np.abs(M.encode_views(batch.views, student.params).data - z_tea.data).max() > 0
    assert anchor.encode(batch.views).data.tobytes() == z_tea.data.tobytes()
    anchor.check_frozen()
    with pytest.raises(A.AnchorError):
        A.make_self_anchor_teacher(student)
    anchor.params["encoder.patch.w"].data[0, 0] += 1
    with pytest.raises(A.AnchorError):
        anchor.check_frozen()


def test_weight_map_dump(tmp_path):
    w = np.linspace(0.1, 0.9, 96).reshape(2, 48)
    path = A.dump_weight_map(tmp_path / "w.csv", ["a:0", "b:1"], w)
    rows = list(csv.DictReader(path.open()))
    assert len(rows) == 96
    assert rows[0] == {"sample_id": "a:0", "view": "0", "token_row": "0", "token_col": "0", "weight": repr(0.1)}
    last = rows[-1]
    assert (last["view"], last["token_row"], last["token_col"]) == ("2", "3", "3")
    assert float(last["weight"]) == pytest.approx(0.9)
