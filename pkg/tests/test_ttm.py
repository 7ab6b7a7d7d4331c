import math

import numpy as np
import pytest

from ttmatch.core import EmbeddingTable, FlatDataset, Group, ValidationError
from ttmatch.scorer import AdapterParams, TrainConfig
from ttmatch.synth import SynthConfig, flatten, generate
from ttmatch.ttm import (
    MODE_PERCENTILE,
    CapacityError,
    ThresholdSchedule,
    TtmConfig,
    adapter_score_fn,
    calibrate_tau,
    global_matching,
    induce_matching,
    run_global_ttm,
    run_simple_match,
    run_ttm,
    schedule_value,
    select_pseudolabels,
    store_score_fn,
)

SMALL = SynthConfig(n_groups=40, dim=16, noise=2.0, seed=3)


def small_setup():
    dataset, table = generate(SMALL)
    return dataset, table, AdapterParams.identity(SMALL.dim)


def test_schedule_linear_decay_endpoints():
    sched = ThresholdSchedule("linear-decay", 2.0, 0.0, 10)
    assert schedule_value(sched, 1) == 2.0
    assert schedule_value(sched, 10) == 0.0
    assert schedule_value(sched, 4) == pytest.approx(2.0 - 3 * 2.0 / 9)


def test_schedule_cosine_midpoint():
    sched = ThresholdSchedule("cosine-decay", 2.0, 0.0, 3)
    assert schedule_value(sched, 2) == pytest.approx(1.0)
    assert schedule_value(sched, 1) == pytest.approx(2.0)
    assert schedule_value(sched, 3) == pytest.approx(0.0)


def test_schedule_constant_and_single_iteration():
    assert schedule_value(ThresholdSchedule("constant", 1.5, 1.5, 4), 3) == 1.5
    assert schedule_value(ThresholdSchedule("linear-decay", 1.5, 0.0, 1), 1) == 1.5


def test_schedule_validation():
    with pytest.raises(ValidationError, match="unknown schedule kind"):
        ThresholdSchedule("exp", 1.0, 0.0, 5)
    with pytest.raises(ValidationError, match="decay"):
        ThresholdSchedule("linear-decay", 0.0, 1.0, 5)
    with pytest.raises(ValidationError, match="ascending"):
        ThresholdSchedule("linear-ascend", 1.0, 0.0, 5)
    with pytest.raises(ValidationError, match="\\[0, 1\\]"):
        ThresholdSchedule("linear-decay", 1.5, 0.0, 5, mode=MODE_PERCENTILE)
    with pytest.raises(ValidationError, match="outside"):
        schedule_value(ThresholdSchedule("constant", 1.0, 1.0, 5), 6)


def test_induce_matching_hand_cases():
    table = EmbeddingTable(
        2, {"i0": np.eye(2)[0], "i1": np.eye(2)[1], "c0": np.eye(2)[0], "c1": np.eye(2)[1]}
    )
    group = Group("g", ("i0", "i1"), ("c0", "c1"), (0, 1))
    assert induce_matching(AdapterParams.identity(2), group, table) == (0, 1)


def test_select_thresholds_and_oracle():
    dataset, table, params = small_setup()
    labels_all, frag_all = select_pseudolabels(params, dataset, 0.0, False, table)
    assert len(labels_all) == len(dataset.groups)  # margins are nonnegative
    assert frag_all["selection_fraction"] == 1.0
    assert 0.0 <= frag_all["pseudo_label_precision"] <= 1.0

    tau_mid = frag_all["mean_margin"]
    labels_mid, frag_mid = select_pseudolabels(params, dataset, tau_mid, False, table)
    assert 0 < len(labels_mid) < len(dataset.groups)

    labels_oracle, frag_oracle = select_pseudolabels(params, dataset, tau_mid, True, table)
    oracle_ids = {g.id for g, _ in labels_oracle}
    assert oracle_ids <= {g.id for g, _ in labels_mid}
    for group, assignment in labels_oracle:
        assert assignment == group.ground_truth
    if labels_oracle:
        assert frag_oracle["pseudo_label_precision"] == 1.0


def test_selection_nesting():
    dataset, table, params = small_setup()
    _, frag = select_pseudolabels(params, dataset, 0.0, False, table)
    rng = np.random.default_rng(0)
    for _ in range(20):
        lo, hi = sorted(rng.uniform(0, 3 * frag["mean_margin"], size=2))
        picked_hi = {g.id for g, _ in select_pseudolabels(params, dataset, hi, False, table)[0]}
        picked_lo = {g.id for g, _ in select_pseudolabels(params, dataset, lo, False, table)[0]}
        assert picked_hi <= picked_lo


def test_empty_selection_reports_absent_precision():
    dataset, table, params = small_setup()
    labels, frag = select_pseudolabels(params, dataset, math.inf, False, table)
    assert labels == []
    assert frag["pseudo_label_precision"] is None


def test_calibrate_tau_fraction():
    dataset, table, params = small_setup()
    tau = calibrate_tau(params, dataset, table, 0.25)
    labels, _ = select_pseudolabels(params, dataset, tau, False, table)
    assert abs(len(labels) - 0.25 * len(dataset.groups)) <= 1
    with pytest.raises(ValidationError):
        calibrate_tau(params, dataset, table, 0.0)


def test_run_simple_match_reports():
    dataset, table, params = small_setup()
    result = run_simple_match(dataset, adapter_score_fn(params, table))
    assert set(result) >= {"group_score", "group_match", "individual_match"}
    assert result["group_match"] >= result["group_score"]


def test_simple_match_constant_store():
    groups = tuple(
        Group(f"g{i}", (f"g{i}_a",), (f"g{i}_b", f"g{i}_c")[:2], (0,))
        for i in range(3)
    )
    from ttmatch.core import GroupedDataset, GroupShape

    dataset = GroupedDataset(groups, GroupShape(1, 2))
    store = {g.id: np.array([[0.2, 0.9]]) for g in dataset.groups}
    result = run_simple_match(dataset, store_score_fn(store))
    assert result["group_score"] == 0.0
    assert result["group_match"] == 0.0


def test_simple_match_overfit_transfer():
    dataset, table, params = small_setup()
    plain = run_simple_match(dataset, adapter_score_fn(params, table))
    checked = run_simple_match(
        dataset, adapter_score_fn(params, table), overfit_check=True
    )
    assert checked["overfit_group_score"] == plain["group_match"]


def test_run_ttm_infinite_threshold_is_noop():
    dataset, table, params = small_setup()
    config = TtmConfig(
        schedule=ThresholdSchedule("constant", math.inf, math.inf, 3),
        train=TrainConfig(epochs=1, batch_size=8, seed=0),
        seed=0,
    )
    final_params, report = run_ttm(dataset, table, config)
    assert np.array_equal(final_params.image_map, params.image_map)
    assert np.array_equal(final_params.caption_map, params.caption_map)
    assert all(s.selected_count == 0 for s in report.iterations)
    assert report.final["group_match"] == report.baseline["group_match"]
    assert len(report.iterations) == 3


def test_run_ttm_smoke_and_reproducible():
    dataset, table, params = small_setup()
    tau = calibrate_tau(params, dataset, table, 0.2)
    config = TtmConfig(
        schedule=ThresholdSchedule("linear-decay", tau, 0.0, 3),
        train=TrainConfig(epochs=2, batch_size=8, learning_rate=1e-3, seed=0),
        seed=0,
    )
    params_a, report_a = run_ttm(dataset, table, config)
    params_b, report_b = run_ttm(dataset, table, config)
    assert report_a == report_b  # wall clock excluded from equality
    assert np.array_equal(params_a.image_map, params_b.image_map)
    assert [s.iteration for s in report_a.iterations] == [1, 2, 3]
    assert report_a.config["schedule"]["tau_start"] == tau


def test_run_ttm_requires_absolute_schedule():
    dataset, table, _ = small_setup()
    config = TtmConfig(
        schedule=ThresholdSchedule("linear-decay", 0.5, 0.0, 2, mode=MODE_PERCENTILE),
        train=TrainConfig(epochs=1),
    )
    with pytest.raises(ValidationError, match="absolute"):
        run_ttm(dataset, table, config)


def test_run_ttm_requires_ground_truth():
    dataset, table, _ = small_setup()
    from ttmatch.core import GroupedDataset

    stripped = GroupedDataset(
        tuple(
            Group(g.id, g.image_ids, g.caption_ids, None) for g in dataset.groups
        ),
        dataset.shape,
    )
    config = TtmConfig(
        schedule=ThresholdSchedule("constant", 1.0, 1.0, 1),
        train=TrainConfig(epochs=1),
    )
    with pytest.raises(ValidationError, match="ground truth"):
        run_ttm(stripped, table, config)


def test_global_matching_block_diagonal():
    dataset, table, params = small_setup()
    flat = flatten(dataset)
    n_images = len(flat.image_ids)
    n_captions = len(flat.caption_ids)
    m, k = dataset.shape.rows, dataset.shape.cols
    scores = np.full((n_images, n_captions), -1e3)
    per_group = []
    for gi, group in enumerate(dataset.groups):
        block = np.asarray(
            adapter_score_fn(params, table)(group), dtype=np.float64
        )
        scores[gi * m : (gi + 1) * m, gi * k : (gi + 1) * k] = block
        per_group.append(induce_matching(params, group, table))
    mapping, accuracy = global_matching(flat, scores=scores)
    for gi, group in enumerate(dataset.groups):
        for i, img in enumerate(group.image_ids):
            assert mapping[img] == group.caption_ids[per_group[gi][i]]
    assert accuracy is not None


def test_global_matching_single_pair():
    flat = FlatDataset(("i",), ("c",), {"i": "c"})
    mapping, accuracy = global_matching(flat, scores=np.array([[0.5]]))
    assert mapping == {"i": "c"}
    assert accuracy == 1.0


def test_global_matching_argument_validation():
    flat = FlatDataset(("i",), ("c", "d"))
    with pytest.raises(ValidationError, match="scores or params"):
        global_matching(flat)
    with pytest.raises(ValidationError, match="shape mismatch"):
        global_matching(flat, scores=np.zeros((2, 2)))


def test_global_capacity_error():
    flat = FlatDataset(
        tuple(f"i{n}" for n in range(10_000)),
        tuple(f"c{n}" for n in range(10_000)),
    )
    table = EmbeddingTable(2, {})
    with pytest.raises(CapacityError, match="budget"):
        run_global_ttm(
            flat,
            table,
            TtmConfig(
                schedule=ThresholdSchedule(
                    "linear-decay", 0.5, 0.0, 1, mode=MODE_PERCENTILE
                ),
                train=TrainConfig(epochs=1),
                global_mode=True,
            ),
        )


def test_global_percentile_selection_counts():
    cfg = SynthConfig(n_groups=10, dim=16, noise=1.0, seed=5)
    dataset, table = generate(cfg)
    flat = flatten(dataset)
    config = TtmConfig(
        schedule=ThresholdSchedule("constant", 0.5, 0.5, 1, mode=MODE_PERCENTILE),
        train=TrainConfig(epochs=1, batch_size=10, learning_rate=1e-4, seed=0),
        global_mode=True,
        seed=0,
    )
    _, report = run_global_ttm(flat, table, config)
    stats = report.iterations[0]
    assert stats.selected_count == len(flat.image_ids) // 2
    assert stats.group_score is None and stats.group_match is None
    assert stats.assignment_accuracy is not None

    config_all = TtmConfig(
        schedule=ThresholdSchedule("constant", 0.0, 0.0, 1, mode=MODE_PERCENTILE),
        train=TrainConfig(epochs=1, batch_size=10, learning_rate=1e-4, seed=0),
        global_mode=True,
        seed=0,
    )
    _, report_all = run_global_ttm(flat, table, config_all)
    assert report_all.iterations[0].selected_count == len(flat.image_ids)


def test_global_requires_percentile_schedule():
    dataset, table, _ = small_setup()
    flat = flatten(dataset)
    config = TtmConfig(
        schedule=ThresholdSchedule("linear-decay", 1.0, 0.0, 2),
        train=TrainConfig(epochs=1),
        global_mode=True,
    )
    with pytest.raises(ValidationError, match="percentile"):
        run_global_ttm(flat, table, config)
