import numpy as np
import pytest
import torch

from duadet.troln import (
    LocalizedProposal,
    TrolnConfig,
    TrolnNet,
    affinity_pool,
    affinity_weights,
    cell_for_point,
    centerness_target,
    dense_targets,
    discriminator_loss,
    load_troln,
    oln_loss,
    plain_l1_loss,
    proposal_iou_targets,
    save_troln,
    troln_infer,
    troln_loss,
    weighted_l1_loss,
)


# ---------------------------------------------------------------------------
# centerness
# ---------------------------------------------------------------------------

def test_centerness_center_is_one():
    assert centerness_target(5.0, 5.0, (0, 0, 10, 10)) == pytest.approx(1.0)


def test_centerness_edge_is_zero():
    assert centerness_target(0.0, 5.0, (0, 0, 10, 10)) == 0.0
    assert centerness_target(5.0, 10.0, (0, 0, 10, 10)) == 0.0


def test_centerness_quarter_position():
    """Point at (1, 2) inside (0,0,4,4): l=1, r=3, t=2, b=2 -> sqrt(1/3)."""
    value = centerness_target(1.0, 2.0, (0, 0, 4, 4))
    assert value == pytest.approx(np.sqrt(1.0 / 3.0))
    assert value == pytest.approx(0.5774, abs=1e-4)


def test_centerness_outside_raises():
    with pytest.raises(ValueError, match="outside"):
        centerness_target(11.0, 5.0, (0, 0, 10, 10))


def test_centerness_bounded():
    rng = np.random.default_rng(0)
    for _ in range(100):
        x1, y1 = rng.uniform(0, 10, 2)
        w, h = rng.uniform(1, 10, 2)
        px = rng.uniform(x1, x1 + w)
        py = rng.uniform(y1, y1 + h)
        v = centerness_target(px, py, (x1, y1, x1 + w, y1 + h))
        assert 0.0 <= v <= 1.0


def test_dense_targets_smallest_box_wins():
    gt = np.array([[0.0, 0.0, 64.0, 64.0], [24.0, 24.0, 40.0, 40.0]])
    cells, cent, offs = dense_targets(gt, feat_hw=(8, 8), stride=8)
    assert len(cells) == 64  # every cell center inside the big box
    # the center cell (row 4, col 4) has its center at (36, 36): inside both,
    # must get the small box; offsets are (l, t, r, b) / stride
    idx = [i for i, (r, c) in enumerate(cells) if (r, c) == (4, 4)][0]
    np.testing.assert_allclose(offs[idx], [(36 - 24) / 8, (36 - 24) / 8, (40 - 36) / 8, (40 - 36) / 8])
    assert cent[idx] == pytest.approx(centerness_target(36, 36, gt[1]))


# ---------------------------------------------------------------------------
# discriminator + affinity
# ---------------------------------------------------------------------------

def test_discriminator_loss_half_is_ln2():
    m = torch.full((5, 5), 0.5)
    assert float(discriminator_loss(m, 1.0)) == pytest.approx(np.log(2.0))
    assert float(discriminator_loss(m, 0.0)) == pytest.approx(np.log(2.0))


def test_discriminator_loss_perfect_prediction_near_zero():
    m = torch.full((4, 4), 1.0)
    assert float(discriminator_loss(m, 1.0)) <= 1e-5
    assert float(discriminator_loss(1.0 - m, 0.0)) <= 1e-5


def test_discriminator_loss_scalar_oracle():
    rng = np.random.default_rng(7)
    m = rng.uniform(0.01, 0.99, size=(3, 4))
    for d in (0.0, 1.0):
        got = float(discriminator_loss(torch.from_numpy(m), d))
        want = np.mean([-d * np.log(v) - (1 - d) * np.log(1 - v) for v in m.ravel()])
        assert got == pytest.approx(want, rel=1e-9)


def test_affinity_pool_constant_map():
    m = np.full((6, 6), 0.7)
    assert affinity_pool(m, (0.4, 1.2, 5.1, 4.9)) == pytest.approx(0.7)


def test_affinity_pool_one_hot_full_box():
    """One hot cell pooled over the whole map: every sampled bin is nearest
    to exactly one cell, so the mean is hits / bins."""
    m = np.zeros((7, 7))
    m[3, 3] = 1.0
    got = affinity_pool(m, (0.0, 0.0, 7.0, 7.0), pooled_size=7)
    assert got == pytest.approx(1.0 / 49.0)


def test_affinity_pool_single_cell_box():
    m = np.arange(12, dtype=np.float64).reshape(3, 4) / 12.0
    # box exactly covering cell (row 1, col 2): x in [2,3), y in [1,2)
    assert affinity_pool(m, (2.0, 1.0, 3.0, 2.0)) == pytest.approx(m[1, 2])


def test_affinity_weights_tau1_reads_cell_tau2_pools():
    m = np.zeros((8, 8))
    m[2, 2] = 0.9
    tau1, tau2 = affinity_weights(m, cell=(2, 2), proposal_box=(0, 0, 64, 64), stride=8)
    assert tau1 == pytest.approx(0.9)
    # the 7x7 sampling grid over the 8-cell box lands on cell (2, 2) exactly
    # once, so the pooled mean is one hit out of 49 samples
    assert tau2 == pytest.approx(0.9 / 49.0)
    with pytest.raises(ValueError, match="outside affinity map"):
        affinity_weights(m, cell=(9, 0), proposal_box=(0, 0, 8, 8), stride=8)


def test_cell_for_point_clamps():
    assert cell_for_point(4.0, 12.0, (8, 8), stride=8) == (1, 0)
    assert cell_for_point(1000.0, -5.0, (8, 8), stride=8) == (0, 7)


# ---------------------------------------------------------------------------
# weighted losses
# ---------------------------------------------------------------------------

def test_weighted_l1_tau_zero_equals_plain():
    pred = torch.tensor([0.2, 0.8, 0.5])
    target = torch.tensor([0.0, 1.0, 0.5])
    tau = torch.zeros(3)
    assert float(weighted_l1_loss(pred, target, tau)) == pytest.approx(
        float(plain_l1_loss(pred, target))
    )


def test_weighted_l1_tau_one_doubles():
    pred = torch.tensor([0.2, 0.8, 0.5])
    target = torch.tensor([0.0, 1.0, 0.4])
    tau = torch.ones(3)
    assert float(weighted_l1_loss(pred, target, tau)) == pytest.approx(
        2.0 * float(plain_l1_loss(pred, target))
    )


def test_weighted_l1_scalar_oracle():
    rng = np.random.default_rng(3)
    pred = rng.normal(size=6)
    target = rng.normal(size=6)
    tau = rng.uniform(0, 1, size=6)
    got = float(
        weighted_l1_loss(torch.from_numpy(pred), torch.from_numpy(target), torch.from_numpy(tau))
    )
    want = np.mean([(tau[i] + 1.0) * abs(pred[i] - target[i]) for i in range(6)])
    assert got == pytest.approx(want, rel=1e-12)


def test_weighted_l1_empty_is_zero():
    z = torch.zeros(0)
    assert float(weighted_l1_loss(z, z, z)) == 0.0
    assert float(plain_l1_loss(z, z)) == 0.0


def test_weighted_l1_does_not_backprop_through_tau():
    pred = torch.tensor([0.5], requires_grad=True)
    tau = torch.tensor([0.3], requires_grad=True)
    weighted_l1_loss(pred, torch.tensor([0.0]), tau).backward()
    assert tau.grad is None or float(tau.grad.abs().sum()) == 0.0
    assert float(pred.grad.abs().sum()) > 0.0


def _random_loss_inputs(seed: int, n: int = 5):
    rng = np.random.default_rng(seed)
    t = lambda *shape: torch.from_numpy(rng.normal(size=shape))
    u = lambda *shape: torch.from_numpy(rng.uniform(0, 1, size=shape))
    return dict(
        cent_pred=u(n), cent_target=u(n), tau1=u(n),
        rpn_reg_pred=t(n, 4), rpn_reg_target=t(n, 4),
        iou_pred=u(n), iou_target=u(n), tau2=u(n),
        rcnn_reg_pred=t(n, 4), rcnn_reg_target=t(n, 4),
    )


def test_troln_loss_parts_sum():
    kw = _random_loss_inputs(0)
    l_dis = torch.tensor(0.37)
    total, parts = troln_loss(l_dis=l_dis, **kw)
    assert set(parts) == {"cent", "rpn_reg", "iou", "rcnn_reg", "dis", "loc"}
    assert parts["loc"] == pytest.approx(
        parts["cent"] + parts["rpn_reg"] + parts["iou"] + parts["rcnn_reg"]
    )
    assert float(total) == pytest.approx(parts["loc"] + parts["dis"])


def test_troln_loss_tau_zero_reduces_to_unweighted():
    """With both affinity weights identically zero the localization part must
    equal the unweighted loss bit for bit."""
    kw = _random_loss_inputs(1)
    kw["tau1"] = torch.zeros_like(kw["tau1"])
    kw["tau2"] = torch.zeros_like(kw["tau2"])
    l_dis = torch.tensor(0.11, dtype=torch.float64)
    total, _ = troln_loss(l_dis=l_dis, **kw)
    unweighted = oln_loss(
        kw["cent_pred"], kw["cent_target"],
        kw["rpn_reg_pred"], kw["rpn_reg_target"],
        kw["iou_pred"], kw["iou_target"],
        kw["rcnn_reg_pred"], kw["rcnn_reg_target"],
    )
    assert float(total - l_dis) == float(unweighted)


def test_troln_loss_tau_one_doubles_weighted_terms():
    kw = _random_loss_inputs(2)
    kw["tau1"] = torch.ones_like(kw["tau1"])
    kw["tau2"] = torch.ones_like(kw["tau2"])
    zero = torch.tensor(0.0, dtype=torch.float64)
    _, parts = troln_loss(l_dis=zero, **kw)
    assert parts["cent"] == pytest.approx(
        2.0 * float(plain_l1_loss(kw["cent_pred"], kw["cent_target"]))
    )
    assert parts["iou"] == pytest.approx(
        2.0 * float(plain_l1_loss(kw["iou_pred"], kw["iou_target"]))
    )


# ---------------------------------------------------------------------------
# targets for the roi head
# ---------------------------------------------------------------------------

def test_proposal_iou_targets_threshold_and_values():
    gt = np.array([[0.0, 0.0, 10.0, 10.0]])
    proposals = np.array(
        [[0.0, 0.0, 10.0, 10.0], [0.0, 0.0, 5.0, 10.0], [40.0, 40.0, 50.0, 50.0]]
    )
    pos, ious, deltas = proposal_iou_targets(proposals, gt, pos_iou=0.3)
    assert pos.tolist() == [0, 1]
    np.testing.assert_allclose(ious, [1.0, 0.5])
    np.testing.assert_allclose(deltas[0], 0.0, atol=1e-12)


def test_proposal_iou_targets_empty():
    pos, ious, deltas = proposal_iou_targets(np.zeros((0, 4)), np.zeros((0, 4)))
    assert len(pos) == 0 and len(ious) == 0 and deltas.shape == (0, 4)


# ---------------------------------------------------------------------------
# network end to end
# ---------------------------------------------------------------------------

def test_troln_infer_schema_and_ranges():
    torch.manual_seed(0)
    net = TrolnNet(TrolnConfig())
    net.eval()
    # an untrained offset head predicts ~zero-size boxes that all get culled;
    # bias it so decoded boxes are big enough to survive the min-size filter
    with torch.no_grad():
        net.dense_reg_head.bias.fill_(1.5)
    image = np.random.default_rng(0).random((64, 64, 3))
    props = troln_infer(net, image)
    assert len(props) >= 1
    for p in props:
        assert isinstance(p, LocalizedProposal)
        assert 0.0 <= p.c <= 1.0 and 0.0 <= p.b <= 1.0
        assert 0.0 <= p.tau1 <= 1.0 and 0.0 <= p.tau2 <= 1.0
        assert p.box.shape == (4,)
        assert p.box[2] > p.box[0] and p.box[3] > p.box[1]
        d = p.to_dict()
        assert set(d) == {"box", "c", "b", "tau1", "tau2"}


def test_troln_save_load_round_trip(tmp_path):
    torch.manual_seed(1)
    net = TrolnNet(TrolnConfig())
    net.eval()
    with torch.no_grad():
        net.dense_reg_head.bias.fill_(1.5)
    save_troln(net, tmp_path / "troln.pt")
    back = load_troln(tmp_path / "troln.pt")
    image = np.random.default_rng(2).random((64, 64, 3))
    a = troln_infer(net, image)
    b = troln_infer(back, image)
    assert len(a) == len(b)
    for pa, pb in zip(a, b):
        np.testing.assert_array_equal(pa.box, pb.box)
        assert pa.c == pb.c and pa.b == pb.b
        assert pa.tau1 == pb.tau1 and pa.tau2 == pb.tau2
