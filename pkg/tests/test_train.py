import numpy as np
import pytest

from poddet.config import TrainConfig
from poddet.data import generate_shapes_dataset
from poddet.detector import PriorConfig
from poddet.errors import NumericalError, ValidationError
from poddet.models import FullDetector
from poddet.nets import count_parameters
from poddet.pod import Energy, FixedRank
from poddet.train import build_reduced, evaluate_map, finetune, train_baseline


@pytest.fixture(scope="module")
def tiny():
    return generate_shapes_dataset(6, 3, seed=1)


def test_overfit_single_image():
    train, _ = generate_shapes_dataset(1, 1, seed=0)
    full = FullDetector.build(3, seed=0)
    hist = train_baseline(full, train, TrainConfig(epochs=200))
    assert hist["loss"][-1] < 0.05 * hist["loss"][0]


def test_zero_lr_keeps_loss(tiny):
    full = FullDetector.build(3, seed=0)
    before = [p.data.copy() for p in full.parameters()]
    hist = train_baseline(full, tiny[0], TrainConfig(epochs=3, lr=0.0, batch_size=4))
    assert hist["loss"][0] == pytest.approx(hist["loss"][2], rel=1e-12)
    assert all(np.array_equal(a, p.data) for a, p in zip(before, full.parameters()))


def test_two_epoch_run_reproducible(tiny):
    runs = []
    for _ in range(2):
        full = FullDetector.build(3, seed=0)
        hist = train_baseline(full, tiny[0], TrainConfig(epochs=2, batch_size=4), seed=7)
        runs.append((hist["loss"], b"".join(p.data.tobytes() for p in full.parameters())))
    assert runs[0] == runs[1]


def test_epochs_must_be_positive(tiny):
    with pytest.raises(ValidationError):
        train_baseline(FullDetector.build(3), tiny[0], TrainConfig(epochs=0))


def test_nan_loss_restores_checkpoint(tiny):
    full = FullDetector.build(3, seed=0)
    full.basenet.parameters()[0].data[0, 0, 0, 0] = np.nan
    saved = [p.data.copy() for p in full.parameters()]
    with pytest.raises(NumericalError) as exc:
        train_baseline(full, tiny[0], TrainConfig(epochs=1, batch_size=4))
    assert exc.value.checkpoint is full
    for a, p in zip(saved, full.parameters()):
        np.testing.assert_array_equal(a, p.data)


@pytest.fixture(scope="module")
def reduced_pair(tiny):
    full = FullDetector.build(3, seed=0)
    red, basis = build_reduced(full, tiny[0], 6, FixedRank(4), PriorConfig())
    return full, red, basis


def test_finetune_keeps_projection_and_frozen_pre(tiny, reduced_pair):
    full, red, _ = reduced_pair
    psi = red.proj_weight.data.tobytes()
    pre = [p.data.copy() for p in red.pre_model.parameters()]
    heads = [p.data.copy() for p in red.predictor.parameters()]
    hist = finetune(red, tiny[0], TrainConfig(epochs=5, batch_size=4), freeze_pre=True)
    assert red.proj_weight.data.tobytes() == psi
    assert all(np.array_equal(a, p.data) for a, p in zip(pre, red.pre_model.parameters()))
    assert any(not np.array_equal(a, p.data) for a, p in zip(heads, red.predictor.parameters()))
    assert len(hist["epoch_times_s"]) == 5


def test_finetune_unfrozen_updates_pre_but_not_full(tiny):
    full = FullDetector.build(3, seed=0)
    red, _ = build_reduced(full, tiny[0], 6, FixedRank(4), PriorConfig())
    psi = red.proj_weight.data.tobytes()
    pre = [p.data.copy() for p in red.pre_model.parameters()]
    base = [p.data.copy() for p in full.basenet.parameters()]
    finetune(red, tiny[0], TrainConfig(epochs=1, batch_size=4), freeze_pre=False)
    assert red.proj_weight.data.tobytes() == psi
    assert any(not np.array_equal(a, p.data) for a, p in zip(pre, red.pre_model.parameters()))
    assert all(np.array_equal(a, p.data) for a, p in zip(base, full.basenet.parameters()))


def test_energy_on_rank_one_data():
    train, _ = generate_shapes_dataset(1, 1, seed=0)
    item = train.items[0]
    from poddet.data import Dataset, Item
    copies = Dataset([Item(f"c{i}", item.image, item.truth) for i in range(5)])
    red, basis = build_reduced(FullDetector.build(3), copies, 6, Energy(0.99), PriorConfig())
    assert red.rank == 1


def test_full_rank_projection_lossless(tiny, reduced_pair):
    full, _, _ = reduced_pair
    red, basis = build_reduced(full, tiny[0], 6, FixedRank(6), PriorConfig())
    x_l = red.pre_model(tiny[0].images()).data.reshape(6, -1)
    z = red.project(red.pre_model(tiny[0].images())).data
    np.testing.assert_allclose(z @ red.proj_weight.data, x_l, atol=1e-8 * np.abs(x_l).max())


def test_reduced_has_fewer_trainable_parameters(reduced_pair):
    full, red, _ = reduced_pair
    assert count_parameters(red) < count_parameters(full)


def test_warm_start_copies_tap_head(tiny):
    full = FullDetector.build(3, seed=0)
    red, _ = build_reduced(full, tiny[0], 6, FixedRank(4), PriorConfig(), warm_start=True)
    for a, b in zip(red.predictor.conv_head.parameters(), full.heads[0].parameters()):
        assert np.array_equal(a.data, b.data) and a is not b
    with pytest.raises(ValidationError):
        build_reduced(full, tiny[0], 5, FixedRank(4), PriorConfig(), warm_start=True)


def test_evaluate_map_shape(tiny, reduced_pair):
    _, red, _ = reduced_pair
    res, dets = evaluate_map(red, tiny[1])
    assert len(dets) == 3 and len(res["ap"]) == 3 and 0.0 <= res["map"] <= 1.0


def test_finetune_overfits_single_image():
    train, _ = generate_shapes_dataset(1, 1, seed=0)
    red, _ = build_reduced(FullDetector.build(3, seed=0), train, 6, FixedRank(1), PriorConfig())
    # random (untrained) pre-model features, so the pre-model trains too
    hist = finetune(red, train, TrainConfig(epochs=200), freeze_pre=False)
    assert hist["loss"][-1] < 0.05 * hist["loss"][0]


def test_report_ratio_one_for_identical_models():
    from poddet.train import RunReport, make_report
    full = FullDetector.build(3, seed=0)
    hist = {"epoch_times_s": [1.0, 1.0]}
    ev = {"map": 0.5, "ap": [0.5, 0.5, 0.5]}
    rep = make_report(full, full, hist, hist, ev, ev)
    assert rep.compression_ratio == 1.0 and rep.speedup_ratio == 1.0
    assert RunReport.from_dict(rep.to_dict()) == rep
