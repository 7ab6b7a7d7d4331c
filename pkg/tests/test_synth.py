import numpy as np
import pytest

from ttmatch.core import GroupShape, ValidationError
from ttmatch.metrics import closed_form_random_group_match, closed_form_random_group_score
from ttmatch.scorer import AdapterParams
from ttmatch.synth import SynthConfig, calibrate_noise, flatten, generate, raw_group_score
from ttmatch.ttm import _grouped_metrics, _score_all, _stack_dataset


def metrics_for(config):
    dataset, table = generate(config)
    stacks = _stack_dataset(dataset, table)
    scores = _score_all(AdapterParams.identity(config.dim), stacks)
    return _grouped_metrics(scores, stacks)


def test_generate_shapes_and_ids():
    config = SynthConfig(n_groups=5, shape=GroupShape(2, 3), dim=8, seed=1)
    dataset, table = generate(config)
    assert len(dataset.groups) == 5
    assert dataset.shape == GroupShape(2, 3)
    ids = set()
    for g in dataset.groups:
        assert g.ground_truth == (0, 1)
        ids.update(g.image_ids)
        ids.update(g.caption_ids)
    assert len(ids) == 5 * 5
    assert all(i in table for i in ids)
    norms = [np.linalg.norm(table.vector(i)) for i in ids]
    assert np.allclose(norms, 1.0)


def test_generate_deterministic():
    config = SynthConfig(n_groups=6, dim=8, seed=9)
    d1, t1 = generate(config)
    d2, t2 = generate(config)
    assert d1 == d2
    for key in t1.rows:
        assert np.array_equal(t1.vector(key), t2.vector(key))


def test_generate_seeds_differ():
    t1 = generate(SynthConfig(n_groups=2, dim=8, seed=0))[1]
    t2 = generate(SynthConfig(n_groups=2, dim=8, seed=1))[1]
    assert not np.array_equal(t1.vector("g00000_i0"), t2.vector("g00000_i0"))


def test_noiseless_case_is_perfect():
    config = SynthConfig(n_groups=50, dim=64, anchor_weight=0.0, noise=0.0, seed=2)
    assert metrics_for(config)["group_score"] == 100.0


def test_huge_noise_approaches_random_guessing():
    config = SynthConfig(n_groups=10_000, dim=16, noise=100.0, seed=4)
    result = metrics_for(config)
    n = config.n_groups
    for key, closed in (
        ("group_score", closed_form_random_group_score(GroupShape(2, 2))[1]),
        ("group_match", closed_form_random_group_match(GroupShape(2, 2))[1]),
    ):
        estimate = result[key] / 100.0
        stderr = np.sqrt(closed * (1 - closed) / n)
        assert abs(estimate - closed) <= 3 * stderr, (key, estimate, closed)


def test_difficulty_monotone_in_noise():
    means = []
    for noise in (0.2, 0.6, 1.0, 1.4):
        scores = [
            raw_group_score(SynthConfig(n_groups=150, dim=32, noise=noise, seed=s))
            for s in range(4)
        ]
        means.append(np.mean(scores))
    assert all(a >= b for a, b in zip(means, means[1:]))


def test_anchor_confusability():
    def mean_margin(anchor_weight):
        vals = []
        for seed in range(4):
            config = SynthConfig(
                n_groups=150, dim=32, anchor_weight=anchor_weight, noise=1.0, seed=seed
            )
            dataset, table = generate(config)
            stacks = _stack_dataset(dataset, table)
            scores = _score_all(AdapterParams.identity(config.dim), stacks)
            from ttmatch.ttm import _margins_and_best

            vals.append(float(_margins_and_best(scores)[0].mean()))
        return np.mean(vals)

    assert mean_margin(4.0) < mean_margin(0.5)


def test_flatten_counts_and_truth():
    dataset, _ = generate(SynthConfig(n_groups=3, shape=GroupShape(2, 4), dim=8, seed=0))
    flat = flatten(dataset)
    assert len(flat.image_ids) == 6
    assert len(flat.caption_ids) == 12
    for group in dataset.groups:
        for i, img in enumerate(group.image_ids):
            assert flat.ground_truth[img] == group.caption_ids[group.ground_truth[i]]


def test_flatten_duplicate_ids_rejected():
    from ttmatch.core import Group, GroupedDataset

    g = Group("g", ("i0",), ("c0", "c1"), (0,))
    dataset = GroupedDataset((g, g), GroupShape(1, 2))
    with pytest.raises(ValidationError, match="duplicate id"):
        flatten(dataset)


def test_config_validation():
    with pytest.raises(ValidationError):
        SynthConfig(n_groups=0)
    with pytest.raises(ValidationError):
        SynthConfig(signal=0.0)
    with pytest.raises(ValidationError):
        SynthConfig(noise=-1.0)
    with pytest.raises(ValidationError):
        SynthConfig(dim=8, concept_rank=9)


def test_calibrate_noise_lands_in_band():
    config = SynthConfig(n_groups=200, dim=32, seed=0)
    noise = calibrate_noise(config, low=10.0, high=30.0)
    score = raw_group_score(
        SynthConfig(n_groups=200, dim=32, noise=noise, seed=0)
    )
    assert 10.0 <= score <= 30.0
