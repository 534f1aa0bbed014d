"""Tests for the training loop, split handling, schedules and metrics."""

import numpy as np
import pytest

import semloc.training as training
from semloc.scenario import desk_scenario, generate_dataset
from semloc.training import Metrics, SplitPlan, TrainConfig, lambda3_schedule


@pytest.fixture(scope="module")
def small_dataset():
    return generate_dataset(desk_scenario(), n_scenes=12, seed=3)


def small_cfg(**kw):
    base = dict(epochs=2, batch_size=8, conv_channels=[2, 4],
                mlp_widths=[16], seed=0)
    base.update(kw)
    return TrainConfig(**base)


# ----------------------------------------------------------------------
# schedule
# ----------------------------------------------------------------------

def test_lambda3_schedule_pinned_values():
    assert lambda3_schedule(0.0) == 0.0
    # [DERIVED] 2/(1+e^-1) - 1 at kappa = 0.1
    assert abs(lambda3_schedule(0.1) - 0.46211715726000974) < 1e-12
    assert abs(lambda3_schedule(1.0) - (2.0 / (1.0 + np.exp(-10.0)) - 1.0)) < 1e-15


def test_lambda3_schedule_monotone_and_bounded():
    ks = np.linspace(0, 1, 101)
    vals = np.array([lambda3_schedule(k) for k in ks])
    assert np.all(np.diff(vals) > 0)
    assert vals[0] == 0.0 and vals[-1] < 1.0
    with pytest.raises(ValueError):
        lambda3_schedule(1.5)


# ----------------------------------------------------------------------
# splits
# ----------------------------------------------------------------------

def test_default_split_is_5_2_5():
    s = SplitPlan.default(12)
    assert (s.source_scenes, s.val_scenes, s.target_scenes) == \
        (range(0, 5), range(5, 7), range(7, 12))
    s40 = SplitPlan.default(40)
    assert (len(s40.source_scenes), len(s40.val_scenes),
            len(s40.target_scenes)) == (17, 6, 17)


def test_split_validation_rejects_overlap_and_overflow():
    with pytest.raises(ValueError):
        SplitPlan(range(0, 5), range(4, 7), range(7, 12)).validate(12)
    with pytest.raises(ValueError):
        SplitPlan(range(0, 5), range(5, 7), range(7, 13)).validate(12)
    SplitPlan(range(0, 5), range(5, 7), range(7, 12)).validate(12)


# ----------------------------------------------------------------------
# config
# ----------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(method="nope")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)


def test_method_default_weights():
    assert TrainConfig(method="dcnn").main_weights() == (1.0, 0.0)
    assert TrainConfig(method="pcp-only").main_weights() == (0.0, 1.0)
    assert TrainConfig(method="mda-unweighted").main_weights() == (0.5, 0.5)
    assert TrainConfig(method="mda").main_weights() == (0.7, 0.3)
    assert TrainConfig(method="mda", lambda1=0.9,
                       lambda2=0.1).main_weights() == (0.9, 0.1)


# ----------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------

def test_metrics_rmse_oracle():
    from semloc.engine import Tensor

    class M:  # minimal model stub: constant offset, always predicts class 0
        def forward(self, x, train):
            n = len(x)
            coords = np.tile([3.0, 4.0, 0.0], (n, 1))
            probs = np.tile([0.8, 0.1, 0.1], (n, 1))
            return type("O", (), {"coords": Tensor(coords),
                                  "probs": Tensor(probs)})()

    dom = training.DomainData(
        inputs=np.zeros((5, 1, 2, 2)),
        coords=np.zeros((5, 3)),
        labels=np.zeros(5, dtype=np.uint8),
        is_source=False)
    m = training.evaluate_arrays(M(), dom)
    # every error is the 3-4-5 hypotenuse
    assert abs(m.rmse - 5.0) < 1e-12
    assert m.accuracy == 1.0
    assert m.quantiles[0.5] == 5.0
    np.testing.assert_allclose(m.errors, 5.0)


# ----------------------------------------------------------------------
# training behavior (small real runs)
# ----------------------------------------------------------------------

def test_train_is_deterministic(small_dataset):
    split = SplitPlan.default(12)
    logs = []
    for _ in range(2):
        res = training.train(small_dataset, split, small_cfg())
        logs.append(res.log_csv)
    assert logs[0] == logs[1]


def test_log_csv_header_and_rows(small_dataset):
    split = SplitPlan.default(12)
    res = training.train(small_dataset, split, small_cfg())
    lines = res.log_csv.strip().split("\n")
    assert lines[0] == ("step,L_CR,L_PCP,L_loc,L_global,L_WR,"
                        "w1,w2,lambda3,lambda4,total")
    step_rows = [l for l in lines[1:] if not l.startswith("epoch")]
    epoch_rows = [l for l in lines[1:] if l.startswith("epoch")]
    assert len(epoch_rows) == 2
    assert all(len(r.split(",")) == 11 for r in step_rows)
    # first step has kappa=0, so lambda3 must be exactly 0
    assert float(step_rows[0].split(",")[8]) == 0.0


def test_mda_lambda2_zero_kt_zero_matches_dcnn(small_dataset):
    """MDA degenerates to the plain regression baseline when the class and
    alignment terms are switched off."""
    split = SplitPlan.default(12)
    a = training.train(small_dataset, split,
                       small_cfg(method="dcnn", lambda3_max=0.0))
    b = training.train(small_dataset, split,
                       small_cfg(method="mda", lambda1=1.0, lambda2=0.0,
                                 lambda3_max=0.0))
    col = lambda log: [r.split(",")[1] for r in log.strip().split("\n")[1:]
                       if not r.startswith("epoch")]
    assert col(a.log_csv) == col(b.log_csv)


def test_target_labels_never_reach_losses(small_dataset):
    dom = training.DomainData(inputs=np.zeros((4, 1, 2, 2)),
                              coords=np.zeros((4, 3)),
                              labels=np.zeros(4, dtype=np.uint8),
                              is_source=False)
    with pytest.raises(AssertionError):
        training._supervised_batch(dom, np.array([0, 1]))


def test_hda_returns_uncertainty_and_moves_it(small_dataset):
    split = SplitPlan.default(12)
    res = training.train(small_dataset, split, small_cfg(method="hda"))
    assert res.uncertainty is not None
    s1 = float(res.uncertainty.s1.data)
    s2 = float(res.uncertainty.s2.data)
    assert s1 != 0.0 and s2 != 0.0  # both log-variances were trained


def test_best_state_tracks_val(small_dataset):
    split = SplitPlan.default(12)
    res = training.train(small_dataset, split, small_cfg(epochs=3))
    assert 0 <= res.best_epoch <= 2
    iso = [l for l in res.log_csv.strip().split("\n") if l.startswith("epoch")]
    rmses = [float(l.split(",")[3]) for l in iso]
    assert abs(res.best_val_score - min(rmses)) < 1e-9


def test_ablation_rows_and_csv(small_dataset):
    split = SplitPlan.default(12)
    grid = (("cr-only", dict(method="dcnn", lambda3_max=0.0)),
            ("mda", dict(method="mda")))
    rows = training.run_ablation(small_dataset, split, small_cfg(epochs=1),
                                 grid=grid, seeds=(0,))
    assert [r["name"] for r in rows] == ["cr-only", "mda"]
    assert rows[0]["loc_gain_pct"] == ""   # the baseline has no gain column
    assert rows[1]["loc_gain_pct"] != ""
    csv = training.ablation_csv(rows)
    assert csv.startswith("name,rmse_mean,rmse_std,acc_mean,acc_std,"
                          "loc_gain_pct,acc_gain_pct\n")
    assert len(csv.strip().split("\n")) == 3
