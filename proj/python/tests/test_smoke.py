import itertools
import math

import pytest

import cib

SMALL = """
name = "py"
seeds = [0]
[task]
n_train = 96
n_eval = 32
[cib]
epochs = 1
"""


def test_oracles():
    assert cib.gaussian_mi_oracle(0.8, 1) == pytest.approx(0.510826, abs=1e-6)
    assert cib.discrete_mi_oracle([[0.5, 0.0], [0.0, 0.5]]) == pytest.approx(math.log(2), abs=1e-12)


def test_upper_bounds_sit_above_the_oracle():
    oracle = cib.gaussian_mi_oracle(0.5, 2)
    for name in ("club", "l1out"):
        assert cib.upper_bound_estimate(name, 0.5, dim=2, n=4000, seed=1) >= oracle - 0.05
    with pytest.raises(ValueError):
        cib.upper_bound_estimate("nwj", 0.5)


def test_consensus_score_against_enumeration():
    groups = [[True, True, False, True], [True, False, True]]
    for m in (1, 2, 3):
        expected = 0.0
        for g in groups:
            subsets = list(itertools.combinations(g, m))
            expected += sum(all(s) for s in subsets) / len(subsets)
        assert cib.consensus_score(groups, m) == pytest.approx(expected / len(groups), abs=1e-15)


def test_flips():
    assert cib.flips([1, 2, 3], [1, 4, 3]) == pytest.approx(1 / 3)
    assert cib.flips([3, 2], [2, 2], "cv") == 0.5
    with pytest.raises(ValueError):
        cib.flips([1], [1, 2])


def test_bound_ordering_holds():
    r = cib.verify_bound_ordering(7)
    assert r["all_hold"]
    assert set(r["checks"]) == {"full", "sum_only", "repr_only", "sum_plus_skl"}


def test_config_and_data():
    assert len(cib.default_beta_grid()) == 9
    assert cib.config_hash(SMALL) == cib.config_hash(SMALL)
    assert cib.canonical_config(SMALL)["task"]["n_train"] == 96
    with pytest.raises(cib.ConfigError):
        cib.config_hash("[cib]\nbeta = -1.0\n")
    train = cib.generate_split(SMALL, 0, "train")
    assert len(train) == 96
    assert {"x_v", "x_l", "y", "meta"} <= set(train[0])


def test_run_is_deterministic(tmp_path):
    a = cib.run_experiment(SMALL, str(tmp_path / "a"))
    b = cib.run_experiment(SMALL, str(tmp_path / "b"), write_files=False)
    assert a == b
    assert (tmp_path / "a" / "results.jsonl").read_bytes().count(b"\n") == 1
