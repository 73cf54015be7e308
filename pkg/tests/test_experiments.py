from dataclasses import replace

import pytest

from caspl.errors import ConfigError, ContractError
from caspl.experiments import (
    DEPTH_COLUMNS, ExperimentConfig, depth_levels, equal_vlp, read_csv, summarize,
    validate_csv, write_csv,
)


def test_summarize_uses_sample_std():
    mean, std = summarize([1.0, 2.0, 3.0])
    assert mean == 2.0 and std == pytest.approx(1.0)
    assert summarize([5.0]) == (5.0, 0.0)


def test_depth_levels_round_half_up():
    assert depth_levels(6) == (1, 2, 3, 5, 6)
    assert depth_levels(12) == (1, 4, 6, 9, 12)


def test_csv_round_trip_and_validation(tmp_path):
    rows = [{"phase1_depth": a, "phase2_depth": b, "n_seeds": 2, "hm_mean": 50.0 + a,
             "hm_std": 0.5} for a in (1, 2) for b in (1, 2)]
    path = write_csv(tmp_path / "g.csv", DEPTH_COLUMNS, rows)
    assert read_csv(path)[0]["hm_mean"] == "51.0000"
    assert len(validate_csv(path, "depth-grid", expected_rows=4)) == 4
    with pytest.raises(ContractError, match="rows"):
        validate_csv(path, "depth-grid", expected_rows=25)
    with pytest.raises(ContractError, match="header"):
        validate_csv(path, "length")
    rows[0]["hm_mean"] = 140.0
    with pytest.raises(ContractError, match="out of range"):
        validate_csv(write_csv(tmp_path / "bad.csv", DEPTH_COLUMNS, rows), "depth-grid")


def test_config_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig(seeds=())
    with pytest.raises(ConfigError):
        ExperimentConfig(variants=("CoOp",))
    with pytest.raises(ConfigError):
        ExperimentConfig(shots=5)


def test_equal_vlp_is_independent_deep_only():
    with pytest.raises(ConfigError, match="IndependentDeep"):
        equal_vlp(ExperimentConfig(ablation_variant="TextShallow", seeds=(0,)))
    cfg = ExperimentConfig(seeds=(0,))
    with pytest.raises(ConfigError, match="even"):
        equal_vlp(replace(cfg, kd=replace(cfg.kd, length=3)))
