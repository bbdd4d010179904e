import json

import numpy as np
import pytest

from robustcast.dataio import Dataset, FeatureDescriptor, split_sequential
from robustcast.exceptions import CapacityError, ConfigError, DomainError
from robustcast.missingness import MissingPattern
from robustcast.models import Architecture, init_params
from robustcast.partition import (
    FixedPartition,
    FixedSubset,
    Partition,
    PartitionConfig,
    TreeNode,
    UncertaintySet,
    UncertaintySubset,
    bounds_table,
    enumerate_patterns,
    fixed_partition,
    learn_partition,
    load_artifact,
    locate,
    partition_from_json,
    partition_to_json,
    predict_deployed,
    predict_deployed_rows,
    predict_fixed_rows,
    rel_gap,
    route_fixed,
    save_artifact,
)
from robustcast.training import TrainConfig, train_nominal


def toy_dataset(n_features_signal, n=600, seed=0, noise=0.05, weights=None, corr=0.7):
    """Cross-correlated maskable features (they can substitute for each other,
    like adjacent plants) with decreasing signal weights, plus a bias."""
    rng = np.random.default_rng(seed)
    k = n_features_signal
    weights = np.asarray(weights if weights is not None else np.linspace(1.0, 0.4, k))
    common = rng.uniform(0, 1, n)
    latent = corr * common[:, None] + (1 - corr) * rng.uniform(0, 1, (n, k))
    X = np.column_stack([latent, np.ones(n)])
    y = latent @ weights + noise * rng.normal(size=n)
    descriptors = tuple(
        [FeatureDescriptor(kind="measurement", plant=j, lag=0) for j in range(k)]
        + [FeatureDescriptor(kind="bias")]
    )
    return Dataset(X=X, y=y, descriptors=descriptors, maskable=tuple(range(k)),
                   horizon=1, max_lag=0, obs_periods=np.arange(n))


def quick_cfg(seed=0, iters=2000, lr=3e-2, patience=60):
    # near-full-batch and a generous budget: under-converged fits distort the
    # subset bounds and can stall or misdirect the splitting loop
    return TrainConfig(learning_rate=lr, max_iters=iters, patience=patience,
                       batch_size=512, seed=seed)


class TestEnumeratePatterns:
    def test_full_budget_three_features(self):
        uset = UncertaintySet(n_features=4, maskable=(0, 1, 2), budget=3)
        assert len(enumerate_patterns(uset)) == 8

    def test_zero_budget(self):
        uset = UncertaintySet(n_features=4, maskable=(0, 1, 2), budget=0)
        patterns = enumerate_patterns(uset)
        assert len(patterns) == 1
        assert patterns[0].popcount() == 0

    def test_binomial_sum(self):
        uset = UncertaintySet(n_features=5, maskable=(0, 1, 2, 3), budget=2)
        assert len(enumerate_patterns(uset)) == 1 + 4 + 6

    def test_lexicographic_order(self):
        uset = UncertaintySet(n_features=2, maskable=(0, 1), budget=2)
        bits = [tuple(p.bits) for p in enumerate_patterns(uset)]
        assert bits == [(0, 0), (0, 1), (1, 0), (1, 1)]

    def test_capacity_guard(self):
        uset = UncertaintySet(n_features=25, maskable=tuple(range(21)), budget=2)
        with pytest.raises(CapacityError):
            enumerate_patterns(uset)


def manual_partition(n_features=3):
    """The worked routing example: root splits on feature 0, the missing
    branch splits on feature 1, leaving leaves U1, U3, U4."""
    maskable = (0, 1, 2)
    uset = UncertaintySet(n_features=n_features, maskable=maskable, budget=3)
    arch = Architecture(input_dim=n_features)
    params = init_params(arch, "lr", False, seed=0, maskable=maskable)

    def subset(sid, fixed, opt_bits, free):
        return UncertaintySubset(
            subset_id=sid,
            fixed=fixed,
            opt_pattern=MissingPattern(bits=np.array(opt_bits, dtype=np.uint8)),
            free=free,
            params_opt=params,
            params_adv=params,
            lower_bound=0.1,
            upper_bound=0.2,
        )

    subsets = {
        0: subset(0, {}, [0, 0, 0], (0, 1, 2)),
        1: subset(1, {0: 0}, [0, 0, 0], (1, 2)),
        2: subset(2, {0: 1}, [1, 0, 0], (1, 2)),
        3: subset(3, {0: 1, 1: 0}, [1, 0, 0], (2,)),
        4: subset(4, {0: 1, 1: 1}, [1, 1, 0], (2,)),
    }
    root = TreeNode(subset_id=0, feature=0,
                    available=TreeNode(subset_id=1),
                    missing=TreeNode(subset_id=2, feature=1,
                                     available=TreeNode(subset_id=3),
                                     missing=TreeNode(subset_id=4)))
    return Partition(uncertainty=uset, config=PartitionConfig(max_subsets=3, epsilon=0.0),
                     root=root, subsets=subsets, leaf_ids=[1, 3, 4])


class TestLocate:
    def test_worked_routing_example(self):
        part = manual_partition()
        assert locate(part, MissingPattern(bits=np.array([1, 0, 1]))) == 3
        assert locate(part, MissingPattern(bits=np.array([1, 1, 0]))) == 4
        assert locate(part, MissingPattern(bits=np.array([0, 1, 1]))) == 1

    def test_zero_pattern_goes_to_all_available_path(self):
        part = manual_partition()
        assert locate(part, MissingPattern.zeros(3)) == 1

    def test_every_admissible_pattern_routes_to_exactly_one_leaf(self):
        part = manual_partition()
        for pattern in enumerate_patterns(part.uncertainty):
            hits = []
            for leaf in part.leaves():
                if all(pattern.bits[j] == bit for j, bit in leaf.fixed.items()):
                    hits.append(leaf.subset_id)
            assert hits == [locate(part, pattern)]


class TestRelGap:
    def test_plain_ratio(self):
        assert rel_gap(0.1, 0.3) == pytest.approx(2.0)

    def test_zero_lower_bound_guard(self):
        assert rel_gap(0.0, 1.0) == pytest.approx(1e12)


class TestLearnPartition:
    def test_single_subset_is_plain_robust_model(self):
        ds = toy_dataset(3, seed=1)
        train, val, _ = split_sequential(ds, 0.6, 0.25)
        uset = UncertaintySet(n_features=4, maskable=(0, 1, 2), budget=3)
        part = learn_partition(train, val, uset, PartitionConfig(max_subsets=1, epsilon=0.0),
                               quick_cfg(seed=2), Architecture(input_dim=4, bias_index=3),
                               "lr", False)
        assert part.leaf_ids == [0]
        assert part.subsets[0].free == (0, 1, 2)
        assert part.root.is_leaf

    def test_retraining_recovery_with_full_enumeration(self):
        # Budget 3 over 3 features, enough subsets, epsilon 0: the tree must
        # exhaust into 8 singleton leaves whose optimistic patterns are
        # exactly the 8 admissible patterns.
        ds = toy_dataset(3, seed=3, noise=0.05)
        train, val, _ = split_sequential(ds, 0.6, 0.25)
        uset = UncertaintySet(n_features=4, maskable=(0, 1, 2), budget=3)
        part = learn_partition(train, val, uset, PartitionConfig(max_subsets=8, epsilon=0.0),
                               quick_cfg(seed=4),
                               Architecture(input_dim=4, bias_index=3), "lr", False)
        assert len(part.leaf_ids) == 8
        leaves = part.leaves()
        assert all(leaf.free == () for leaf in leaves)
        opt_keys = {leaf.opt_pattern.key() for leaf in leaves}
        expected = {pat.key() for pat in enumerate_patterns(uset)}
        assert opt_keys == expected

    def test_child_bookkeeping_after_split(self):
        ds = toy_dataset(3, seed=5)
        train, val, _ = split_sequential(ds, 0.6, 0.25)
        uset = UncertaintySet(n_features=4, maskable=(0, 1, 2), budget=3)
        part = learn_partition(train, val, uset, PartitionConfig(max_subsets=2, epsilon=0.0),
                               quick_cfg(seed=6), Architecture(input_dim=4, bias_index=3),
                               "lr", False)
        root = part.subsets[0]
        j_star = root.split_feature
        avail, miss = part.subsets[1], part.subsets[2]
        assert avail.fixed[j_star] == 0
        assert miss.fixed[j_star] == 1
        assert avail.opt_pattern.bits[j_star] == 0
        assert miss.opt_pattern.bits[j_star] == 1
        assert avail.opt_pattern.same(root.opt_pattern)
        assert j_star not in avail.free and j_star not in miss.free

    def test_bound_inheritance_equalities(self):
        ds = toy_dataset(4, seed=7)
        train, val, _ = split_sequential(ds, 0.6, 0.25)
        uset = UncertaintySet(n_features=5, maskable=(0, 1, 2, 3), budget=4)
        part = learn_partition(train, val, uset, PartitionConfig(max_subsets=5, epsilon=0.0),
                               quick_cfg(seed=8), Architecture(input_dim=5, bias_index=4),
                               "lr", False)
        for subset in part.subsets.values():
            if subset.parent_id is None:
                continue
            parent = part.subsets[subset.parent_id]
            if subset.lb_inherited:
                assert subset.lower_bound == parent.lower_bound
                assert subset.params_opt is parent.params_opt or np.array_equal(
                    subset.params_opt.arrays["w"], parent.params_opt.arrays["w"]
                )
            if subset.ub_inherited:
                assert subset.upper_bound == parent.upper_bound

    def test_leaf_count_bounded_and_epsilon_stop(self):
        ds = toy_dataset(3, seed=9)
        train, val, _ = split_sequential(ds, 0.6, 0.25)
        uset = UncertaintySet(n_features=4, maskable=(0, 1, 2), budget=3)
        huge_eps = 1e6
        part = learn_partition(train, val, uset, PartitionConfig(max_subsets=6, epsilon=huge_eps),
                               quick_cfg(seed=10), Architecture(input_dim=4, bias_index=3),
                               "lr", False)
        assert part.leaf_ids == [0]  # epsilon satisfied immediately
        part2 = learn_partition(train, val, uset, PartitionConfig(max_subsets=3, epsilon=0.0),
                                quick_cfg(seed=10), Architecture(input_dim=4, bias_index=3),
                                "lr", False)
        assert len(part2.leaf_ids) <= 3

    def test_exhaustive_routing_six_features(self):
        ds = toy_dataset(6, seed=11, n=500)
        train, val, _ = split_sequential(ds, 0.6, 0.25)
        uset = UncertaintySet(n_features=7, maskable=tuple(range(6)), budget=3)
        part = learn_partition(train, val, uset, PartitionConfig(max_subsets=5, epsilon=0.0),
                               quick_cfg(seed=12),
                               Architecture(input_dim=7, bias_index=6), "lr", False)
        patterns = enumerate_patterns(uset)
        assert len(patterns) == 42
        leaf_set = set(part.leaf_ids)
        for pattern in patterns:
            assert locate(part, pattern) in leaf_set

    def test_singleton_leaves_have_tiny_relgap(self):
        # Scoped to singletons whose adversarial side was actually trained
        # (available children): there the trainer has no freedom, so the two
        # bounds must agree to training noise. Missing-child singletons keep
        # the inherited upper bound, which reflects the parent's wider set.
        ds = toy_dataset(3, seed=13, noise=0.3)
        train, val, _ = split_sequential(ds, 0.6, 0.25)
        uset = UncertaintySet(n_features=4, maskable=(0, 1, 2), budget=3)
        part = learn_partition(train, val, uset, PartitionConfig(max_subsets=8, epsilon=0.0),
                               quick_cfg(seed=14, iters=4000, lr=1e-2, patience=100),
                               Architecture(input_dim=4, bias_index=3), "lr", False)
        checked = 0
        for leaf in part.leaves():
            if leaf.free == () and not leaf.ub_inherited:
                assert abs(leaf.relgap) <= 0.01
                checked += 1
        assert checked >= 1


class TestPredictDeployed:
    def test_optimistic_params_used_on_exact_match(self):
        part = manual_partition()
        # give leaf 1 distinguishable parameter sets
        leaf = part.subsets[1]
        opt = leaf.params_opt.copy()
        opt.arrays["w"] = np.array([1.0, 1.0, 1.0])
        adv = leaf.params_opt.copy()
        adv.arrays["w"] = np.array([-1.0, -1.0, -1.0])
        leaf.params_opt = opt
        leaf.params_adv = adv
        x = np.array([1.0, 1.0, 1.0])
        zero = MissingPattern.zeros(3)
        assert predict_deployed(part, x, zero) == pytest.approx(3.0)
        off_opt = MissingPattern(bits=np.array([0, 1, 0]))
        assert predict_deployed(part, x, off_opt) == pytest.approx(-2.0)

    def test_budget_violating_pattern_still_routes(self):
        part = manual_partition()
        heavy = MissingPattern(bits=np.array([1, 1, 1]))
        assert locate(part, heavy) == 4

    def test_rows_match_single(self):
        part = manual_partition()
        rng = np.random.default_rng(3)
        X = rng.uniform(0, 1, (6, 3))
        patterns = [MissingPattern(bits=(rng.random(3) < 0.5).astype(np.uint8)) for _ in range(6)]
        batched = predict_deployed_rows(part, X, patterns)
        for i in range(6):
            assert batched[i] == pytest.approx(predict_deployed(part, X[i], patterns[i]))


class TestFixedPartition:
    def test_subset_count_is_budget_plus_one(self):
        ds = toy_dataset(3, seed=15)
        train, val, _ = split_sequential(ds, 0.6, 0.25)
        uset = UncertaintySet(n_features=4, maskable=(0, 1, 2), budget=3)
        fixed = fixed_partition(train, val, uset, quick_cfg(seed=16, iters=200, patience=25),
                                Architecture(input_dim=4, bias_index=3), "lr", False)
        assert len(fixed.subsets) == 4
        assert [s.count for s in fixed.subsets] == [0, 1, 2, 3]

    def test_routing_by_missing_count(self):
        ds = toy_dataset(3, seed=17)
        train, val, _ = split_sequential(ds, 0.6, 0.25)
        uset = UncertaintySet(n_features=4, maskable=(0, 1, 2), budget=2)
        fixed = fixed_partition(train, val, uset, quick_cfg(seed=18, iters=150, patience=25),
                                Architecture(input_dim=4, bias_index=3), "lr", False)
        assert route_fixed(fixed, MissingPattern.zeros(4)) == 0
        assert route_fixed(fixed, MissingPattern.from_missing(4, [0, 2])) == 2
        # deployment pattern beyond the training budget clamps to the last subset
        assert route_fixed(fixed, MissingPattern.from_missing(4, [0, 1, 2])) == 2

    def test_zero_budget_is_nominal_training(self):
        ds = toy_dataset(2, seed=19)
        train, val, _ = split_sequential(ds, 0.6, 0.25)
        uset = UncertaintySet(n_features=3, maskable=(0, 1), budget=0)
        cfg = quick_cfg(seed=20, iters=150, patience=25)
        fixed = fixed_partition(train, val, uset, cfg, Architecture(input_dim=3, bias_index=2),
                                "lr", False)
        assert len(fixed.subsets) == 1
        from robustcast._util import derive_seed
        from dataclasses import replace
        nominal = train_nominal(train, val, MissingPattern.zeros(3),
                                replace(cfg, seed=derive_seed(cfg.seed, "fixed", 0)),
                                Architecture(input_dim=3, bias_index=2), "lr", False)
        np.testing.assert_array_equal(fixed.subsets[0].params.arrays["w"],
                                      nominal.params.arrays["w"])


class TestSerialization:
    def test_learned_partition_roundtrip(self, tmp_path):
        ds = toy_dataset(3, seed=21)
        train, val, _ = split_sequential(ds, 0.6, 0.25)
        uset = UncertaintySet(n_features=4, maskable=(0, 1, 2), budget=3)
        part = learn_partition(train, val, uset, PartitionConfig(max_subsets=3, epsilon=0.0),
                               quick_cfg(seed=22, iters=150, patience=25),
                               Architecture(input_dim=4, bias_index=3), "lr", True)
        path = tmp_path / "partition.json"
        save_artifact(part, path)
        back = load_artifact(path)
        assert isinstance(back, Partition)
        assert back.leaf_ids == part.leaf_ids
        rng = np.random.default_rng(1)
        for _ in range(10):
            x = rng.uniform(0, 1, 4)
            pat = MissingPattern(bits=np.append((rng.random(3) < 0.5).astype(np.uint8), 0))
            assert predict_deployed(back, x, pat) == pytest.approx(predict_deployed(part, x, pat))
        # byte-identical re-serialization
        a = json.dumps(partition_to_json(part))
        b = json.dumps(partition_to_json(partition_from_json(json.loads(a))))
        assert a == b

    def test_fixed_partition_roundtrip(self, tmp_path):
        ds = toy_dataset(2, seed=23)
        train, val, _ = split_sequential(ds, 0.6, 0.25)
        uset = UncertaintySet(n_features=3, maskable=(0, 1), budget=2)
        fixed = fixed_partition(train, val, uset, quick_cfg(seed=24, iters=150, patience=25),
                                Architecture(input_dim=3, bias_index=2), "lr", False)
        path = tmp_path / "fixed.json"
        save_artifact(fixed, path)
        back = load_artifact(path)
        assert isinstance(back, FixedPartition)
        rng = np.random.default_rng(2)
        X = rng.uniform(0, 1, (5, 3))
        patterns = [MissingPattern.from_missing(3, [0]) for _ in range(5)]
        np.testing.assert_allclose(predict_fixed_rows(back, X, patterns),
                                   predict_fixed_rows(fixed, X, patterns))

    def test_bounds_table_shape(self):
        part = manual_partition()
        table = bounds_table(part)
        lines = table.strip().split("\n")
        assert lines[0] == "subset,split_feature,UB,LB,relgap_pct"
        assert len(lines) == 6  # header + 5 subsets


class TestValidation:
    def test_uncertainty_set_budget_range(self):
        with pytest.raises(DomainError):
            UncertaintySet(n_features=4, maskable=(0, 1), budget=3)

    def test_partition_config(self):
        with pytest.raises(ConfigError):
            PartitionConfig(max_subsets=0)
        with pytest.raises(ConfigError):
            PartitionConfig(epsilon=-1.0)
