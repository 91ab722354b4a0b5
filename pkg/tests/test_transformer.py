"""Query decoding, mask construction, and the training objective."""

import numpy as np
import pytest

from dgfnet.autodiff import Tensor, backward, ops
from dgfnet.autodiff.gradcheck import finite_diff_check
from dgfnet.dsp import Spectrogram, StftParams
from dgfnet.errors import ContractError
from dgfnet.transformer import (
    AVDecoderLayer,
    MaskMap,
    MotionLayer,
    MultiHeadAttention,
    QueryTransformer,
    apply_mask,
    ground_truth_mask,
    separation_loss,
    sinusoidal_grid_encoding,
    visual_naming,
)


def _mag(bins: np.ndarray) -> Spectrogram:
    return Spectrogram(bins=bins, kind="magnitude", freq_axis="linear",
                       params=StftParams(window_len=254, hop=64, sample_rate=11025))


def _small_xf(rng, n_classes=3, positional_encoding=False) -> QueryTransformer:
    return QueryTransformer(
        n_classes=n_classes, c_q=8, c_o=6, c_m=5, c_a=7, c_final=4,
        heads=2, layers=2, rng=rng, ffn_ratio=2,
        positional_encoding=positional_encoding,
    )


def test_visual_naming_touches_one_column():
    rng = np.random.default_rng(0)
    q = Tensor(rng.standard_normal((8, 4)))
    f = Tensor(rng.standard_normal(8))
    out = visual_naming(q, f, 2)
    assert np.array_equal(out.data[:, 0], q.data[:, 0])
    assert np.array_equal(out.data[:, 1], q.data[:, 1])
    assert np.array_equal(out.data[:, 3], q.data[:, 3])
    assert np.allclose(out.data[:, 2], q.data[:, 2] + f.data)


def test_visual_naming_rejects_bad_ids_and_shapes():
    rng = np.random.default_rng(1)
    q = Tensor(rng.standard_normal((8, 4)))
    with pytest.raises(ContractError):
        visual_naming(q, Tensor(rng.standard_normal(8)), 4)
    with pytest.raises(ContractError):
        visual_naming(q, Tensor(rng.standard_normal(8)), -1)
    with pytest.raises(ContractError):
        visual_naming(q, Tensor(rng.standard_normal(7)), 0)


def test_named_queries_batched_matches_single():
    rng = np.random.default_rng(2)
    xf = _small_xf(rng)
    f_o = Tensor(rng.standard_normal((3, 6)))
    cids = np.array([0, 2, 1])
    named = xf.named_queries(f_o, cids)
    assert named.shape == (3, 3, 8)
    proj = xf.obj_proj(f_o).data
    base = xf.queries.data.T
    for b, cid in enumerate(cids):
        for n in range(3):
            want = base[n] + (proj[b] if n == cid else 0.0)
            assert np.allclose(named.data[b, n], want)
    with pytest.raises(ContractError):
        xf.named_queries(f_o, np.array([0, 3, 1]))


def test_attention_weights_are_a_distribution():
    rng = np.random.default_rng(3)
    att = MultiHeadAttention(8, 2, rng)
    q = Tensor(rng.standard_normal((2, 5, 8)))
    k = Tensor(rng.standard_normal((2, 7, 8)))
    cap = {}
    out = att(q, k, k, capture=cap)
    assert out.shape == (2, 5, 8)
    w = cap["weights"]
    assert w.shape == (2, 2, 5, 7)
    assert np.allclose(w.sum(axis=-1), 1.0)
    assert w.min() >= 0.0


def test_attention_head_divisibility():
    rng = np.random.default_rng(4)
    with pytest.raises(ContractError):
        MultiHeadAttention(10, 4, rng)


def test_motion_layer_is_permutation_invariant_over_tokens():
    rng = np.random.default_rng(5)
    layer = MotionLayer(c_q=8, c_m=5, heads=2, ffn_hidden=16, rng=rng)
    q = Tensor(rng.standard_normal((2, 3, 8)))
    motion = rng.standard_normal((2, 6, 5))
    out = layer(q, Tensor(motion))
    perm = rng.permutation(6)
    out_p = layer(q, Tensor(motion[:, perm]))
    assert np.allclose(out.data, out_p.data, atol=1e-10)


def test_decoder_layer_bypass_leaves_tokens_untouched():
    rng = np.random.default_rng(6)
    layer = AVDecoderLayer(c_q=8, heads=2, ffn_hidden=16, rng=rng)
    q = Tensor(rng.standard_normal((1, 3, 8)))
    tokens = Tensor(rng.standard_normal((1, 10, 8)))
    q_out, t_out = layer(q, tokens, bypass_self_attention=True)
    assert t_out is tokens
    q_full, t_full = layer(q, tokens, bypass_self_attention=False)
    assert not np.array_equal(t_full.data, tokens.data)
    assert not np.array_equal(q_out.data, q_full.data)


def test_decode_is_permutation_invariant_without_positions():
    rng = np.random.default_rng(7)
    xf = _small_xf(rng)
    f_o = Tensor(rng.standard_normal((2, 6)))
    cids = np.array([0, 1])
    motion = Tensor(rng.standard_normal((2, 4, 5)))
    f_d = rng.standard_normal((2, 7, 2, 3))
    q0 = xf.named_queries(f_o, cids)
    a = xf.decode(q0, Tensor(f_d), motion)
    # spatial transpose reorders the flattened token set without touching values
    swapped = np.transpose(f_d, (0, 1, 3, 2)).reshape(2, 7, 2, 3)
    b = xf.decode(q0, Tensor(swapped), motion)
    assert np.allclose(a.data, b.data, atol=1e-9)


def test_decode_breaks_permutation_invariance_with_positions():
    rng = np.random.default_rng(8)
    xf = QueryTransformer(
        n_classes=3, c_q=8, c_o=6, c_m=5, c_a=8, c_final=4,
        heads=2, layers=2, rng=rng, ffn_ratio=2, positional_encoding=True,
    )
    f_o = Tensor(rng.standard_normal((2, 6)))
    cids = np.array([0, 1])
    motion = Tensor(rng.standard_normal((2, 4, 5)))
    f_d = rng.standard_normal((2, 8, 2, 3))
    q0 = xf.named_queries(f_o, cids)
    a = xf.decode(q0, Tensor(f_d), motion)
    swapped = np.transpose(f_d, (0, 1, 3, 2)).reshape(2, 8, 2, 3)
    b = xf.decode(q0, Tensor(swapped), motion)
    assert not np.allclose(a.data, b.data, atol=1e-6)


def test_positional_encoding_shape_and_validation():
    enc = sinusoidal_grid_encoding(8, 3, 4)
    assert enc.shape == (8, 3, 4)
    flat = enc.reshape(8, -1)
    # all grid positions carry distinct codes
    assert len({tuple(np.round(flat[:, i], 9)) for i in range(12)}) == 12
    with pytest.raises(ContractError):
        sinusoidal_grid_encoding(6, 3, 4)


def test_mask_logits_shapes_and_agreement():
    rng = np.random.default_rng(9)
    xf = _small_xf(rng)
    m_e = Tensor(rng.standard_normal((2, 3, 4)))
    f_a = Tensor(rng.standard_normal((2, 4, 5, 6)))
    logits = xf.mask_logits(m_e, f_a)
    assert logits.shape == (2, 3, 5, 6)
    want = np.einsum("bnc,bcft->bnft", m_e.data, f_a.data)
    assert np.allclose(logits.data, want)
    with pytest.raises(ContractError):
        xf.mask_logits(Tensor(rng.standard_normal((2, 3, 5))), f_a)


def test_select_class_picks_rows():
    rng = np.random.default_rng(10)
    logits = Tensor(rng.standard_normal((3, 4, 5, 6)))
    cids = np.array([2, 0, 3])
    out = QueryTransformer.select_class(logits, cids)
    assert out.shape == (3, 5, 6)
    for b, cid in enumerate(cids):
        assert np.allclose(out.data[b], logits.data[b, cid])


def test_end_to_end_query_gradients():
    rng = np.random.default_rng(11)
    xf = _small_xf(rng)
    f_o = Tensor(rng.standard_normal((2, 6)))
    motion = Tensor(rng.standard_normal((2, 4, 5)))
    f_d = Tensor(rng.standard_normal((2, 7, 2, 3)))
    f_a = Tensor(rng.standard_normal((2, 4, 4, 6)))
    cids = np.array([0, 2])
    target = rng.uniform(size=(2, 4, 6))

    def loss():
        q0 = xf.named_queries(f_o, cids)
        a_e = xf.decode(q0, f_d, motion)
        logits = xf.mask_logits(xf.mask_embeddings(a_e), f_a)
        pred = ops.sigmoid(QueryTransformer.select_class(logits, cids))
        return ops.mean_abs_error(pred, Tensor(target))

    check = np.random.default_rng(12)
    for name in ("queries", "obj_proj.weight", "motion.kv_proj.weight",
                 "layer0.cross.wq.weight", "mlp_out.weight"):
        p = dict(xf.named_parameters())[name]
        err = finite_diff_check(loss, p, rng=check)
        assert err < 1e-4, f"{name}: {err}"


def test_ground_truth_mask_ratio_floor_cap():
    mix = _mag(np.array([[2.0, 1e-12, 4.0], [0.5, 8.0, 1e-9]]))
    src = _mag(np.array([[1.0, 1.0, 6.0], [0.25, 2.0, 1.0]]))
    m = ground_truth_mask(src, mix, floor=1e-8, cap=1.0)
    assert m.kind == "ground-truth"
    want = np.array([[0.5, 0.0, 1.0], [0.5, 0.25, 0.0]])
    assert np.allclose(m.array(), want)
    m2 = ground_truth_mask(src, mix, floor=1e-8, cap=2.0)
    assert m2.array()[0, 2] == pytest.approx(1.5)


def test_ground_truth_mask_self_ratio_is_one():
    rng = np.random.default_rng(13)
    mix = _mag(rng.uniform(0.5, 3.0, size=(6, 7)))
    m = ground_truth_mask(mix, mix, floor=1e-8).array()
    assert np.allclose(m, 1.0)


def test_ground_truth_mask_validation():
    mix = _mag(np.ones((3, 3)))
    with pytest.raises(ContractError):
        ground_truth_mask(_mag(np.ones((3, 4))), mix)
    with pytest.raises(ContractError):
        ground_truth_mask(mix, mix, floor=0.0)


def test_mask_map_kind_validation():
    with pytest.raises(ContractError):
        MaskMap(np.ones((2, 2)), "estimated")


def test_apply_mask_scales_magnitudes():
    rng = np.random.default_rng(14)
    mag = rng.uniform(0.1, 2.0, size=(5, 6))
    mix = _mag(mag)
    mv = rng.uniform(size=(5, 6))
    out = apply_mask(mix, MaskMap(mv, "predicted"))
    assert np.allclose(out.magnitude(), mag * mv)
    with pytest.raises(ContractError):
        apply_mask(mix, MaskMap(np.ones((5, 5)), "predicted"))


def test_separation_loss_matches_manual_sum():
    rng = np.random.default_rng(15)
    preds = [Tensor(rng.uniform(size=(2, 4, 4))) for _ in range(2)]
    gts = [rng.uniform(size=(2, 4, 4)) for _ in range(2)]
    loss = separation_loss(preds, gts)
    want = sum(np.mean(np.abs(p.data - g)) for p, g in zip(preds, gts))
    assert loss.data == pytest.approx(want, rel=1e-12)
    loss_sum = separation_loss(preds, gts, reduction="sum")
    want_sum = sum(np.sum(np.abs(p.data - g)) for p, g in zip(preds, gts))
    assert loss_sum.data == pytest.approx(want_sum, rel=1e-12)


def test_separation_loss_grad_only_through_predictions():
    rng = np.random.default_rng(16)
    pred = Tensor(rng.uniform(size=(3, 3)), requires_grad=True)
    gt = Tensor(rng.uniform(size=(3, 3)), requires_grad=True)
    loss = separation_loss([pred], [gt])
    backward(loss)
    assert pred.grad is not None
    assert gt.grad is None
    signs = np.sign(pred.data - gt.data)
    assert np.allclose(pred.grad, signs / 9.0)


def test_separation_loss_accepts_mask_maps():
    rng = np.random.default_rng(17)
    pv = rng.uniform(size=(4, 4))
    gv = rng.uniform(size=(4, 4))
    loss = separation_loss([MaskMap(Tensor(pv), "predicted")],
                           [MaskMap(gv, "ground-truth")])
    assert loss.data == pytest.approx(np.mean(np.abs(pv - gv)))


def test_separation_loss_validation():
    p = [Tensor(np.ones((2, 2)))]
    with pytest.raises(ContractError):
        separation_loss(p, [])
    with pytest.raises(ContractError):
        separation_loss([], [])
    with pytest.raises(ContractError):
        separation_loss(p, [np.ones((2, 3))])
