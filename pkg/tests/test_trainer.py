import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from userstate.backbones import BundleSpec, ModelBundle
from userstate.core_data import LabeledSet, PairedSet, TrainConfig, TrainingData, UnlabeledPool
from userstate.trainer import (
    NonFiniteLossError, Pools, StepBatches, combined_loss, combined_step, distill_mask, distill_pool,
    make_optimizer, modality_loss, supervised_loss, train, unlabeled_loss,
)

SHAPE_A, SHAPE_F = (30, 50, 1), (30, 68, 3)


class LogProbModel(torch.nn.Module):
    """Treats its (N, 4) input as log-probabilities; a scale parameter keeps autograd alive."""

    def __init__(self):
        super().__init__()
        self.scale = torch.nn.Parameter(torch.tensor(1.0, dtype=torch.float64))

    def logits(self, x):
        return self.scale * torch.as_tensor(x, dtype=torch.float64)


def identity(x, rng):
    return x


def rows(*dists):
    return np.log(np.array(dists, dtype=np.float64))


def test_supervised_one_hot_gives_zero():
    x = rows([1 - 3e-12, 1e-12, 1e-12, 1e-12])
    assert supervised_loss(LogProbModel(), x, [0], weak=None).item() < 1e-10


def test_supervised_uniform_gives_ln4():
    x = rows(*[[0.25] * 4] * 3)
    loss = supervised_loss(LogProbModel(), x, [0, 1, 3], weak=None).item()
    assert abs(loss - 1.3863) < 1e-4
    assert abs(loss - math.log(4)) < 1e-6


def test_supervised_is_batch_mean():
    d1, d2 = [0.7, 0.1, 0.1, 0.1], [0.2, 0.5, 0.2, 0.1]
    l1, l2 = -math.log(d1[2]), -math.log(d2[1])
    loss = supervised_loss(LogProbModel(), rows(d1, d2), [2, 1], weak=None).item()
    assert abs(loss - (l1 + l2) / 2) < 1e-6


def test_unlabeled_all_below_threshold():
    model = LogProbModel()
    u = rows([0.5, 0.2, 0.2, 0.1], [0.25] * 4)
    loss, acc = unlabeled_loss(model, u, 0.95, weak=identity, strong=identity)
    assert loss.item() == 0.0 and acc == 0.0
    loss.backward()
    assert model.scale.grad.item() == 0.0


def test_unlabeled_matching_strong_view_contributes_zero():
    u = rows([0.97, 0.01, 0.01, 0.01])
    strong = lambda x, rng: rows([1 - 3e-12, 1e-12, 1e-12, 1e-12])
    loss, acc = unlabeled_loss(LogProbModel(), u, 0.95, weak=identity, strong=strong)
    assert loss.item() < 1e-10 and acc == 1.0


def test_unlabeled_divides_by_full_batch():
    u = rows([0.97, 0.01, 0.01, 0.01], [0.4, 0.3, 0.2, 0.1], [0.25] * 4)
    strong_views = rows([0.5, 0.3, 0.1, 0.1], [0.1, 0.1, 0.1, 0.7], [0.1, 0.1, 0.1, 0.7])
    loss, acc = unlabeled_loss(LogProbModel(), u, 0.95, weak=identity, strong=lambda x, rng: strong_views)
    assert abs(loss.item() - (-math.log(0.5)) / 3) < 1e-6
    assert abs(loss.item() - 0.2310) < 1e-4
    assert acc == pytest.approx(1 / 3)


def test_pseudo_labels_are_detached():
    model = LogProbModel()
    u = rows([0.97, 0.01, 0.01, 0.01])
    strong_views = rows([0.6, 0.2, 0.1, 0.1])
    loss, _ = unlabeled_loss(model, u, 0.95, weak=identity, strong=lambda x, rng: strong_views)
    loss.backward()
    # gradient only through the strong branch: d/ds of -log softmax(s * z)[0]
    z = torch.tensor(strong_views[0])
    s = torch.tensor(1.0, dtype=torch.float64, requires_grad=True)
    ref = -torch.log_softmax(s * z, 0)[0]
    ref.backward()
    assert model.scale.grad.item() == pytest.approx(s.grad.item(), abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.3, 0.98), st.floats(0.3, 0.98))
def test_mask_monotone_in_tau(seed, t1, t2):
    lo, hi = sorted((t1, t2))
    p = np.random.default_rng(seed).dirichlet(np.full(4, 0.3), size=64)
    u = np.log(np.clip(p, 1e-300, None))
    model = LogProbModel()
    _, a_lo = unlabeled_loss(model, u, lo, weak=identity, strong=identity)
    _, a_hi = unlabeled_loss(model, u, hi, weak=identity, strong=identity)
    assert a_hi <= a_lo


def test_distill_examples():
    probs = np.array([[0.90, 0.05, 0.03, 0.02], [0.01, 0.01, 0.01, 0.97], [0.25] * 4])
    assert distill_mask(probs, 0.95).tolist() == [True, False, False]


def test_distill_strict_threshold():
    tau = 0.9
    t2 = tau ** 3
    probs = np.array([[t2, 1 - t2, 0, 0], [np.nextafter(t2, 1), 1 - np.nextafter(t2, 1), 0, 0]])
    assert distill_mask(probs, tau).tolist() == [False, True]


def test_distill_pool_subset_and_predicate():
    bundle = ModelBundle(BundleSpec.toy(SHAPE_A, SHAPE_F), seed=0)
    items = np.random.default_rng(0).normal(size=(200,) + SHAPE_A).astype(np.float32) * 3
    pool = UnlabeledPool(items, "audio")
    dp = distill_pool(bundle.audio, pool, tau=0.6, epoch=4)
    assert dp.source_epoch == 4
    assert set(dp.items.tolist()) <= set(range(200))
    bundle.audio.eval()
    with torch.no_grad():
        p = torch.softmax(bundle.audio.logits(torch.from_numpy(items)), -1).numpy()
    expected = np.flatnonzero((p.max(1) > 0.6 ** 3) & (p.argmax(1) < 3))
    assert np.array_equal(dp.items, expected)


def _paired_data(n=24, seed=0):
    rng = np.random.default_rng(seed)
    xa = rng.normal(size=(n,) + SHAPE_A).astype(np.float32)
    xf = rng.random((n,) + SHAPE_F).astype(np.float32)
    y = np.arange(n) % 4
    return xa, xf, y


def _batches(seed=0):
    xa, xf, y = _paired_data(12, seed)
    return StepBatches(xa, y, xf, y, xa, xf, y)


def test_beta1_zero_equals_supervised():
    bundle = ModelBundle(BundleSpec.toy(SHAPE_A, SHAPE_F), seed=0)
    xa, _, y = _paired_data(12)
    pool = UnlabeledPool(xa, "audio")
    ml = modality_loss(bundle.audio, xa, y, pool, None, 0, 10, 0.0, 0.95, 12, np.random.default_rng(0))
    ref = supervised_loss(bundle.audio, xa, y, np.random.default_rng(0))
    assert ml.total.item() == ref.item()
    assert ml.pool_id is None


def test_pool_switch_at_k():
    bundle = ModelBundle(BundleSpec.toy(SHAPE_A, SHAPE_F), seed=0)
    xa, _, y = _paired_data(12)
    raw = UnlabeledPool(xa, "audio", pool_id="raw")
    distilled = raw.subset(np.arange(4), pool_id="distilled")
    k = 10
    ids = [modality_loss(bundle.audio, xa, y, raw, distilled, e, k, 1.0, 0.95, 12,
                         np.random.default_rng(0)).pool_id for e in (k - 1, k)]
    assert ids == ["raw", "distilled"]


def test_modality_loss_arithmetic():
    ls, lu, beta1 = 0.5, 0.25, 1.0
    assert ls + beta1 * lu == 0.75


def test_combined_weights():
    cfg = TrainConfig()
    la, lf, lc = 1.0, 2.0, 3.0
    assert cfg.beta2 * (la + lf) + cfg.beta3 * lc == 15.0


def test_breakdown_identities():
    bundle = ModelBundle(BundleSpec.toy(SHAPE_A, SHAPE_F), seed=0)
    pool_a = UnlabeledPool(_paired_data(30, 1)[0], "audio")
    pool_f = UnlabeledPool(_paired_data(30, 1)[1], "face")
    cfg = TrainConfig(unlabeled_factor=2, fixmatch_threshold=0.3)
    total, bd = combined_loss(bundle, _batches(), Pools(pool_a, pool_f), cfg, 0, np.random.default_rng(0))
    assert bd.loss_audio == pytest.approx(bd.supervised_audio + cfg.beta1 * bd.unlabeled_audio, rel=1e-6)
    assert bd.loss_face == pytest.approx(bd.supervised_face + cfg.beta1 * bd.unlabeled_face, rel=1e-6)
    assert bd.total == pytest.approx(cfg.beta2 * (bd.loss_audio + bd.loss_face) + cfg.beta3 * bd.loss_fusion, rel=1e-6)
    assert all(v >= 0 for v in (bd.loss_audio, bd.loss_face, bd.loss_fusion))


@pytest.mark.parametrize("c", [0.5, 2.0, 3.0])
def test_beta3_linearity(c):
    bundle = ModelBundle(BundleSpec.toy(SHAPE_A, SHAPE_F), seed=0)
    base = TrainConfig(beta1=0.0)
    scaled = TrainConfig(beta1=0.0, beta3=base.beta3 * c)
    _, b0 = combined_loss(bundle, _batches(), Pools(), base, 0, np.random.default_rng(0))
    _, b1 = combined_loss(bundle, _batches(), Pools(), scaled, 0, np.random.default_rng(0))
    assert b1.loss_fusion == b0.loss_fusion
    contrib0 = b0.total - base.beta2 * (b0.loss_audio + b0.loss_face)
    contrib1 = b1.total - base.beta2 * (b1.loss_audio + b1.loss_face)
    assert contrib1 == pytest.approx(c * contrib0, rel=1e-6)


def test_beta2_zero_leaves_audio_head_without_gradient():
    bundle = ModelBundle(BundleSpec.toy(SHAPE_A, SHAPE_F), seed=0)
    cfg = TrainConfig(beta1=0.0, beta2=0.0)
    total, _ = combined_loss(bundle, _batches(), Pools(), cfg, 0, np.random.default_rng(0))
    total.backward()
    # the audio classifier layer feeds no fusion path
    assert torch.all(bundle.audio.fc.weight.grad == 0)
    assert torch.all(bundle.face.fc.weight.grad == 0)
    assert bundle.audio.stem.weight.grad.abs().sum() > 0


def test_non_finite_step_rolls_back():
    bundle = ModelBundle(BundleSpec.toy(SHAPE_A, SHAPE_F), seed=0)
    b = _batches()
    b.audio_x = b.audio_x.copy()
    b.audio_x[0, 0, 0, 0] = np.nan
    before = {k: v.clone() for k, v in bundle.state_dict().items()}
    cfg = TrainConfig(beta1=0.0)
    with pytest.raises(NonFiniteLossError):
        combined_step(bundle, b, Pools(), cfg, make_optimizer(bundle, cfg), 0, np.random.default_rng(0))
    after = bundle.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)


def _training_data(n=24):
    xa, xf, y = _paired_data(n)
    return TrainingData(LabeledSet(xa, y), LabeledSet(xf, y), PairedSet(xa, xf, y),
                        UnlabeledPool(_paired_data(40, 2)[0], "audio"),
                        UnlabeledPool(_paired_data(40, 2)[1], "face"))


def test_zero_epochs_returns_initial_bundle():
    bundle = ModelBundle(BundleSpec.toy(SHAPE_A, SHAPE_F), seed=0)
    before = {k: v.clone() for k, v in bundle.state_dict().items()}
    res = train(bundle, _training_data(), TrainConfig(total_epochs=0, distill_start=0))
    assert res.log == []
    assert all(torch.equal(before[k], v) for k, v in res.bundle.state_dict().items())


def test_training_is_deterministic_and_logs_distillation(tmp_path):
    cfg = TrainConfig(total_epochs=3, distill_start=1, unlabeled_factor=1, fixmatch_threshold=0.5)
    data = _training_data()
    val = PairedSet(*_paired_data(8, 9))
    runs = []
    for _ in range(2):
        bundle = ModelBundle(BundleSpec.toy(SHAPE_A, SHAPE_F), seed=0)
        runs.append(train(bundle, data, cfg, val=val, log_path=tmp_path / "log.jsonl"))
    assert runs[0].log == runs[1].log
    assert len(runs[0].log) == 3
    assert "distilled_audio" not in runs[0].log[0] and "distilled_audio" in runs[0].log[1]
    assert len((tmp_path / "log.jsonl").read_text().splitlines()) == 3
    assert runs[0].best_epoch in (0, 1, 2)


def test_optimizer_settings():
    bundle = ModelBundle(BundleSpec.toy(SHAPE_A, SHAPE_F), seed=0)
    opt = make_optimizer(bundle, TrainConfig())
    g = opt.param_groups
    assert g[0]["nesterov"] and g[0]["momentum"] == 0.9 and g[0]["lr"] == 0.03
    assert g[0]["weight_decay"] == 5e-4 and g[1]["weight_decay"] == 0.0


def test_unlabeled_passes_leave_running_stats_untouched():
    net = ModelBundle(BundleSpec.toy(), seed=0).audio.train()
    u = np.random.default_rng(0).random((6,) + SHAPE_A).astype(np.float32)
    before = {k: v.clone() for k, v in net.state_dict().items() if "running" in k}
    loss, _ = unlabeled_loss(net, u, 0.3, rng=np.random.default_rng(1))
    after = net.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)
    assert all(m.momentum == 0.1 for m in net.modules() if isinstance(m, torch.nn.BatchNorm2d))
    supervised_loss(net, u, [0] * 6, weak=None)
    assert any(not torch.equal(before[k], net.state_dict()[k]) for k in before)


def test_recalibrate_bn_uses_clean_labeled_statistics():
    from userstate.trainer import recalibrate_bn
    bundle = ModelBundle(BundleSpec.toy(), seed=0).eval()
    rng = np.random.default_rng(3)
    xa = rng.random((10,) + SHAPE_A).astype(np.float32)
    xf = rng.random((10,) + SHAPE_F).astype(np.float32)
    y = np.arange(10) % 4
    empty = UnlabeledPool(np.zeros((0,) + SHAPE_A), "audio"), UnlabeledPool(np.zeros((0,) + SHAPE_F), "face")
    data = TrainingData(LabeledSet(xa, y), LabeledSet(xf, y), PairedSet(xa, xf, y), *empty)
    recalibrate_bn(bundle, data)
    assert not bundle.training
    bn = bundle.audio.groups[0][0].bn1
    with torch.no_grad():
        stem = bundle.audio.stem(torch.from_numpy(xa).permute(0, 3, 1, 2))
    # audio passes twice (own set + fusion) over identical inputs: same cumulative mean
    assert torch.allclose(bn.running_mean, stem.mean(dim=(0, 2, 3)), atol=1e-6)
    assert bn.momentum == 0.1
