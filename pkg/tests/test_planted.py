import json

import numpy as np
import pytest

from dynskip.network import SkipMask
from dynskip.pipeline import SearchConfig
from dynskip.planted import (
    OracleResult,
    PlantedSpec,
    SpecError,
    contribution_ratios,
    gen_dataset,
    gen_pretrained,
    linear_probe_accuracy,
    n_subsets,
    oracle_best_skip_set,
)
from dynskip.network import SkippableNetwork


def test_same_seed_same_splits(tiny_spec, tiny_bench):
    _, splits = tiny_bench
    again = gen_dataset(tiny_spec)
    for a, b in zip((splits.train, splits.val, splits.test), (again.train, again.val, again.test)):
        assert a.X.tobytes() == b.X.tobytes()
        assert a.y.tobytes() == b.y.tobytes()


def test_different_seed_different_splits(tiny_spec):
    other = PlantedSpec(**{**tiny_spec.to_dict(), "seed": tiny_spec.seed + 1})
    assert gen_dataset(other).train.X.tobytes() != gen_dataset(tiny_spec).train.X.tobytes()


def test_class_balance_and_sizes(tiny_spec, tiny_bench):
    _, splits = tiny_bench
    for data, size in ((splits.train, tiny_spec.train_size), (splits.val, tiny_spec.val_size),
                       (splits.test, tiny_spec.test_size)):
        assert len(data) == size
        counts = np.bincount(data.y, minlength=tiny_spec.classes)
        assert counts.max() - counts.min() <= 1


def test_planted_blocks_are_near_identity(tiny_spec, tiny_bench):
    net, splits = tiny_bench
    ratios = contribution_ratios(net, splits.val.X[:100])
    essential = np.mean([ratios[i] for i in tiny_spec.essential])
    for i in tiny_spec.redundant:
        assert ratios[i] <= 0.05 * essential


def test_essential_blocks_hit_target_ratio(tiny_spec, tiny_bench):
    net, splits = tiny_bench
    ratios = contribution_ratios(net, splits.test.X)
    np.testing.assert_allclose(ratios[tiny_spec.essential], tiny_spec.essential_ratio, rtol=0.05)


def test_natural_block_scale_is_kept_without_target():
    spec = PlantedSpec(n=3, redundant=[1], d=16, d_ff=64, h_adapt=2, h_skip=4, classes=3, input_dim=6,
                       essential_ratio=None, margin=0.5, train_size=128, val_size=64, test_size=64, seed=2)
    splits = gen_dataset(spec)
    ratios = contribution_ratios(gen_pretrained(spec, splits), splits.val.X)
    assert ratios[0] > 0.7 and ratios[2] > 0.7


def test_all_blocks_frozen_and_adapters_zero(tiny_bench):
    net, _ = tiny_bench
    for name, p in net.named_parameters():
        assert p.frozen == name.startswith("blocks."), name
        if name.endswith("w_out"):
            assert not p.values.any()


def test_task_needs_depth(tiny_bench):
    net, splits = tiny_bench
    from dynskip.pipeline import evaluate
    assert linear_probe_accuracy(splits) < evaluate(net, splits.test)["accuracy"]


def test_essential_blocks_matter(tiny_spec, tiny_bench):
    """Zero-shot: dropping an essential block costs far more loss than dropping a planted one."""
    from dynskip.pipeline import evaluate

    net, splits = tiny_bench
    base = evaluate(net, splits.test)["loss"]
    cost = {i: evaluate(net, splits.test, SkipMask([i], net.n))["loss"] - base for i in range(net.n)}
    planted = max(abs(cost[i]) for i in tiny_spec.redundant)
    essential = min(cost[i] for i in tiny_spec.essential)
    assert essential > 0.02
    assert essential > 100 * planted


def test_no_planted_blocks_is_allowed():
    spec = PlantedSpec(n=3, redundant=[], d=16, d_ff=64, h_adapt=2, h_skip=4, classes=3, input_dim=6,
                       train_size=128, val_size=64, test_size=64, seed=1)
    assert gen_pretrained(spec).n == 3


@pytest.mark.parametrize(
    "bad, field",
    [
        ({"redundant": [1, 1]}, "redundant"),
        ({"redundant": [9]}, "redundant"),
        ({"n": 2, "redundant": [0, 1]}, "redundant"),
        ({"noise_scale": 0.2}, "noise_scale"),
        ({"essential_ratio": 0.0}, "essential_ratio"),
        ({"d": "wide"}, "spec.d"),
        ({"colour": 3}, "colour"),
    ],
)
def test_spec_validation_names_field(bad, field):
    with pytest.raises(SpecError, match=field):
        PlantedSpec.from_dict(bad)


def test_spec_file_round_trip(tmp_path, tiny_spec):
    path = tmp_path / "s.json"
    path.write_text(json.dumps(tiny_spec.to_dict()))
    assert PlantedSpec.load(path) == tiny_spec


def test_malformed_spec_file(tmp_path):
    path = tmp_path / "s.json"
    path.write_text("{not json")
    with pytest.raises(SpecError):
        PlantedSpec.load(path)


def test_oracle_m0_single_entry(tiny_bench):
    net, splits = tiny_bench
    res = oracle_best_skip_set(net, splits.train, splits.val, m=0, budget=5)
    assert res.ranking == [SkipMask.empty(net.n)]


def test_oracle_ranking_is_sorted_permutation(tiny_bench, tmp_path):
    net, splits = tiny_bench
    res = oracle_best_skip_set(net, splits.train, splits.val, m=2, budget=20)
    assert len(res.ranking) == n_subsets(4, 2) == len(set(res.ranking))
    assert res.losses == sorted(res.losses)
    res.write_csv(tmp_path / "o.csv")
    back = OracleResult.read_csv(tmp_path / "o.csv", 4)
    assert back == res
    assert (tmp_path / "o.csv").read_text().splitlines()[0] == "subset,loss,accuracy"


def test_oracle_rejects_large_n():
    net = SkippableNetwork.init(input_dim=2, n=13, d=4, d_ff=8, h_adapt=1, h_skip=2, classes=2, seed=0)
    with pytest.raises(ValueError, match="n <= 12"):
        oracle_best_skip_set(net, None, None, m=2)


def test_oracle_finds_planted_block_first(tiny_spec, tiny_bench):
    net, splits = tiny_bench
    cfg = SearchConfig(n=4, m=1, batch_size=32)
    res = oracle_best_skip_set(net, splits.train, splits.val, m=1, budget=40, cfg=cfg)
    assert res.best == SkipMask(tiny_spec.redundant, 4)


def test_planted_monotonicity():
    """Skipping any planted block alone costs no more than skipping any essential block alone."""
    spec = PlantedSpec(n=5, redundant=[0, 3], d=16, d_ff=64, h_adapt=2, h_skip=4, classes=3, input_dim=6,
                       train_size=256, val_size=256, test_size=64, seed=4)
    splits = gen_dataset(spec)
    net = gen_pretrained(spec, splits)
    res = oracle_best_skip_set(net, splits.train, splits.val, m=1, budget=40, cfg=SearchConfig(n=5, m=1))
    loss = {mask.sorted()[0]: value for mask, value in zip(res.ranking, res.losses)}
    assert max(loss[i] for i in spec.redundant) <= min(loss[i] for i in spec.essential)
