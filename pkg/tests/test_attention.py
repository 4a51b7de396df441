import numpy as np
import pytest

from tdmfew import attention as at
from tdmfew import numeric as nm
from tdmfew import scores as sc
from tdmfew.attention import FcBlock, TdmConfig
from tdmfew.checks import oracle_apply_query, oracle_apply_support
from tdmfew.numeric import Rng, ShapeError


def make_block(width=6, seed=0):
    return FcBlock(width, Rng(seed))


def zero_head(block):
    """Force the block's output to exactly 1 everywhere."""
    block.w2.data = np.zeros_like(block.w2.data)
    block.b2.data = np.zeros_like(block.b2.data)
    return block


CFG = TdmConfig()


def test_fc_forward_zeroed_second_linear_outputs_exactly_one():
    block = zero_head(make_block())
    scores = nm.constant(Rng(1).uniform(0, 5, (4, 6)))
    out = at.fc_forward(block, scores, "eval", None, CFG)
    assert (out.data == 1.0).all()


def test_fc_forward_eval_output_strictly_inside_open_interval():
    block = make_block(seed=2)
    scores = nm.constant(Rng(3).uniform(0, 50, (8, 6)))
    out = at.fc_forward(block, scores, "eval", None, CFG)
    assert (out.data > 0.0).all() and (out.data < 2.0).all()


def test_fc_forward_train_is_clamped_and_reproducible():
    block = make_block(seed=4)
    scores = nm.constant(Rng(5).uniform(0, 3, (5, 6)))
    a = at.fc_forward(block, scores, "train", Rng(9), CFG)
    bn_state = block.bn.running_mean.copy()
    b = at.fc_forward(block, scores, "train", Rng(9), CFG)
    assert (a.data == b.data).all()
    assert (a.data >= 0.0).all() and (a.data <= 2.0).all()
    assert not (bn_state == np.zeros_like(bn_state)).all()  # train updated stats


def test_fc_forward_width_mismatch_fails():
    with pytest.raises(ShapeError):
        at.fc_forward(make_block(width=6), nm.constant(np.zeros((2, 5))), "eval", None, CFG)


def test_fc_forward_train_requires_rng():
    with pytest.raises(ValueError):
        at.fc_forward(make_block(), nm.constant(np.zeros((2, 6))), "train", None, CFG)


# ---------------------------------------------------------------------------
# sam


def sam_inputs(seed=0, n=3, c=6):
    protos = nm.constant(Rng(seed).normal(1.0, (n, c, 3, 3)))
    return protos, FcBlock(c, Rng(seed + 1)), FcBlock(c, Rng(seed + 2))


def test_sam_alpha_one_selects_intra_vector_bitwise():
    protos, bi, bo = sam_inputs()
    cfg = TdmConfig(alpha=1.0)
    got = at.sam(protos, bi, bo, cfg, "eval", None)
    want = at.fc_forward(bi, sc.intra_scores(protos), "eval", None, cfg)
    assert (got.data == want.data).all()


def test_sam_alpha_zero_selects_inter_vector_bitwise():
    protos, bi, bo = sam_inputs(seed=5)
    cfg = TdmConfig(alpha=0.0)
    got = at.sam(protos, bi, bo, cfg, "eval", None)
    want = at.fc_forward(bo, sc.inter_scores(protos), "eval", None, cfg)
    assert (got.data == want.data).all()


def test_sam_alpha_half_is_elementwise_mean():
    protos, bi, bo = sam_inputs(seed=6)
    cfg = TdmConfig(alpha=0.5)
    got = at.sam(protos, bi, bo, cfg, "eval", None)
    wi = at.fc_forward(bi, sc.intra_scores(protos), "eval", None, cfg)
    wo = at.fc_forward(bo, sc.inter_scores(protos), "eval", None, cfg)
    assert (got.data == (wi.data + wo.data) / 2.0).all()


def test_sam_single_class_fails_naming_inter():
    protos = nm.constant(np.zeros((1, 6, 2, 2)))
    with pytest.raises(ShapeError, match="inter"):
        at.sam(protos, make_block(), make_block(seed=1), CFG, "eval", None)


# ---------------------------------------------------------------------------
# qam


def test_qam_constant_map_equals_fc_of_zero_scores():
    c = 6
    block = make_block(seed=7)
    fmap = nm.constant(np.full((c, 4, 4), 2.5))
    got = at.qam(fmap, block, "eval", None, CFG)
    want = at.fc_forward(block, nm.constant(np.zeros(c)), "eval", None, CFG)
    assert (got.data == want.data).all()


def test_qam_identical_queries_get_identical_weights():
    block = make_block(seed=8)
    fmap = Rng(9).normal(1.0, (6, 3, 3))
    batch = nm.constant(np.stack([fmap, fmap]))
    out = at.qam(batch, block, "eval", None, CFG)
    assert (out.data[0] == out.data[1]).all()


def test_qam_matches_hand_composition():
    block = make_block(seed=10)
    fmap = nm.constant(Rng(11).normal(1.0, (6, 4, 3)))
    got = at.qam(fmap, block, "eval", None, CFG)
    want = at.fc_forward(block, sc.intra_scores(fmap), "eval", None, CFG)
    assert np.abs(got.data - want.data).max() < 1e-15


# ---------------------------------------------------------------------------
# task weight composition


def test_compose_beta_one_returns_support_bitwise():
    w_s = nm.constant(Rng(12).uniform(0, 2, (3, 6)))
    w_q = nm.constant(Rng(13).uniform(0, 2, 6))
    out = at.compose_task_weights(w_s, w_q, beta=1.0)
    assert (out.data == w_s.data).all()


def test_compose_beta_zero_all_classes_share_query_vector():
    w_s = nm.constant(Rng(14).uniform(0, 2, (3, 6)))
    w_q = nm.constant(Rng(15).uniform(0, 2, 6))
    out = at.compose_task_weights(w_s, w_q, beta=0.0)
    assert out.shape == (3, 6)
    for i in range(3):
        assert (out.data[i] == w_q.data).all()


def test_compose_both_disabled_is_exact_ones():
    out = at.compose_task_weights(None, None, beta=0.5, n_way=4, channels=6)
    assert (out.data == 1.0).all() and out.shape == (4, 6)


def test_compose_disabled_sides_act_as_ones():
    w_s = nm.constant(Rng(16).uniform(0, 2, (3, 6)))
    w_q = nm.constant(Rng(17).uniform(0, 2, 6))
    only_s = at.compose_task_weights(w_s, None, beta=0.25)
    assert np.allclose(only_s.data, 0.25 * w_s.data + 0.75, atol=1e-15)
    only_q = at.compose_task_weights(None, w_q, beta=0.25, n_way=3)
    assert np.allclose(only_q.data, 0.25 + 0.75 * w_q.data, atol=1e-15)


def test_compose_batched_queries_gives_per_query_grid():
    w_s = nm.constant(Rng(18).uniform(0, 2, (3, 6)))
    w_q = nm.constant(Rng(19).uniform(0, 2, (5, 6)))
    out = at.compose_task_weights(w_s, w_q, beta=0.5)
    assert out.shape == (5, 3, 6)
    assert np.allclose(out.data[2, 1],
                       0.5 * w_s.data[1] + 0.5 * w_q.data[2], atol=1e-15)


# ---------------------------------------------------------------------------
# weight application


def test_apply_to_support_ones_is_bitwise_identity():
    maps = nm.constant(Rng(20).normal(1.0, (3, 2, 6, 2, 2)))
    out = at.apply_to_support(maps, nm.constant(np.ones((3, 6))))
    assert (out.data == maps.data).all()


def test_apply_to_support_doubles_with_twos():
    maps = nm.constant(Rng(21).normal(1.0, (2, 2, 4, 2, 2)))
    out = at.apply_to_support(maps, nm.constant(np.full((2, 4), 2.0)))
    assert (out.data == 2.0 * maps.data).all()


def test_apply_to_support_matches_loop_oracle():
    maps = Rng(22).normal(1.0, (3, 2, 5, 3, 2))
    weights = Rng(23).uniform(0, 2, (3, 5))
    got = at.apply_to_support(nm.constant(maps), nm.constant(weights)).data
    assert np.abs(got - oracle_apply_support(maps, weights)).max() < 1e-12


def test_apply_to_query_identical_weights_give_identical_copies():
    fmap = nm.constant(Rng(24).normal(1.0, (4, 2, 2)))
    weights = nm.constant(np.tile(Rng(25).uniform(0, 2, 4), (3, 1)))
    out = at.apply_to_query(fmap, weights)
    assert out.shape == (3, 4, 2, 2)
    assert (out.data[0] == out.data[1]).all() and (out.data[1] == out.data[2]).all()


def test_apply_to_query_zero_weights_zero_the_copy():
    fmap = nm.constant(Rng(26).normal(1.0, (4, 2, 2)))
    weights = np.ones((2, 4))
    weights[0] = 0.0
    out = at.apply_to_query(fmap, nm.constant(weights))
    assert (out.data[0] == 0.0).all()
    assert (out.data[1] == fmap.data).all()


def test_apply_to_query_matches_loop_oracle():
    fmap = Rng(27).normal(1.0, (5, 3, 4))
    weights = Rng(28).uniform(0, 2, (4, 5))
    got = at.apply_to_query(nm.constant(fmap), nm.constant(weights)).data
    assert np.abs(got - oracle_apply_query(fmap, weights)).max() < 1e-12


def test_weight_application_linearity():
    rng = Rng(29)
    f1, f2 = rng.normal(1.0, (2, 3, 4, 2, 2)), rng.normal(1.0, (2, 3, 4, 2, 2))
    w = nm.constant(rng.uniform(0, 2, (2, 4)))
    combined = at.apply_to_support(nm.constant(f1 + f2), w).data
    separate = (at.apply_to_support(nm.constant(f1), w).data
                + at.apply_to_support(nm.constant(f2), w).data)
    assert np.abs(combined - separate).max() < 1e-12


# ---------------------------------------------------------------------------
# iam


def test_iam_identity_when_block_forced_to_one():
    block = zero_head(make_block(seed=30))
    x = nm.constant(Rng(31).normal(1.0, (4, 6, 3, 3)))
    out = at.iam_forward(block, x, "eval", None, CFG)
    assert (out.data == x.data).all()


def test_iam_eval_is_instance_independent():
    block = make_block(seed=32)
    maps = Rng(33).normal(1.0, (2, 6, 3, 3))
    batch_out = at.iam_forward(block, nm.constant(maps), "eval", None, CFG)
    for b in range(2):
        solo = at.iam_forward(block, nm.constant(maps[b][None]), "eval", None, CFG)
        # equality up to BLAS kernel selection, which varies with batch size
        assert np.abs(solo.data[0] - batch_out.data[b]).max() < 1e-12


def test_iam_matches_compositional_oracle():
    block = make_block(seed=34)
    x = nm.constant(Rng(35).normal(1.0, (3, 6, 2, 4)))
    got = at.iam_forward(block, x, "eval", None, CFG)
    w = at.fc_forward(block, sc.intra_scores(x), "eval", None, CFG)
    want = x.data * w.data[:, :, None, None]
    assert np.abs(got.data - want).max() < 1e-12


def test_iam_width_mismatch_fails():
    with pytest.raises(ShapeError, match="width"):
        at.iam_forward(make_block(width=6), nm.constant(np.zeros((2, 5, 2, 2))),
                       "eval", None, CFG)


# ---------------------------------------------------------------------------
# weight ranges and gradient flow


def test_weight_range_eval_open_train_closed():
    rng = Rng(36)
    block = FcBlock(6, rng)
    block.w2.data *= 50.0  # push the head towards saturation
    scores = nm.constant(rng.uniform(0, 10, (16, 6)))
    w_eval = at.fc_forward(block, scores, "eval", None, CFG)
    assert (w_eval.data > 0.0).all() and (w_eval.data < 2.0).all()
    w_train = at.fc_forward(block, scores, "train", rng.child(1), CFG)
    assert (w_train.data >= 0.0).all() and (w_train.data <= 2.0).all()


def test_every_fc_parameter_gets_gradient_from_episode_loss():
    from tdmfew.checks import micro_episode, micro_model
    model = micro_model(seed=3)
    result = model.forward_episode(micro_episode(seed=3), "eval")
    result.loss.backward()
    for name, tensor in model.named_parameters():
        if name.startswith(("b_intra", "b_inter", "b_q", "iam")):
            assert tensor.grad is not None, name
            assert np.abs(tensor.grad).max() > 0.0, f"zero gradient for {name}"


def test_dump_weights_csv(tmp_path):
    rng = Rng(37)
    path = tmp_path / "weights.csv"
    at.dump_weights_csv(path, 3, rng.uniform(0, 2, (2, 4)), rng.uniform(0, 2, (2, 4)),
                        rng.uniform(0, 2, (2, 4)), rng.uniform(0, 2, 4),
                        rng.uniform(0, 2, (2, 4)))
    rows = path.read_text().strip().split("\n")
    assert rows[0].startswith("episode,class,channel")
    assert len(rows) == 1 + 2 * 4
