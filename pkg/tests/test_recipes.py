import json
import statistics

import pytest

from quantbench.errors import ConfigError
from quantbench.recipes import RECIPES, ExperimentSpec, ResultTable, run_observation

SMALL_IMAGES = {"n_per_class": 30, "epochs": 1}
SMALL_BLOBS = {"n_per_class": 40, "epochs": 2}
SMALL_MPQ = {"steps": 15}

SHAPES = {
    # recipe: (sweep, configs)
    "obs1": ([3, 8], {"asymmetric", "symmetric"}),
    "obs2": ([3], {"per_channel", "per_tensor"}),
    "obs3": ([2, 8], {"quantize_all", "high_precision_add", "unquantized_skip"}),
    "obs4": ([4.0], {"all_layers_in_average", "first_last_8bit_excluded"}),
    "obs5": ([3.0], {"any_integer", "set_2_4_8"}),
    "obs6": ([4], {"uniform", "max_featuremap"}),
    "obs7": ([4.0], {"ground_truth", "pseudolabels"}),
    "obs8": ([2, 8], None),
}


def small_spec(recipe, seeds=(0,), **kw):
    sweep, _ = SHAPES[recipe]
    task = SMALL_BLOBS if recipe in ("obs4", "obs5", "obs7") else SMALL_IMAGES
    return ExperimentSpec(recipe, list(seeds), sweep=sweep, task=task, mpq=SMALL_MPQ, **kw)


@pytest.mark.parametrize("recipe", sorted(SHAPES))
def test_recipe_table_shape(recipe):
    res = run_observation(small_spec(recipe))
    sweep, configs = SHAPES[recipe]
    got = {r["config"] for r in res.table.rows}
    if configs is not None:
        assert got == configs
    assert len(res.table.rows) == len(got) * len(sweep)
    assert {r["value"] for r in res.table.rows} == set(sweep)
    assert set(res.cards) == got
    for r in res.table.rows:
        assert 0.0 <= r["accuracy"] <= 1.0 and r["seed"] == 0


def test_obs4_reports_both_averages_and_sizes():
    res = run_observation(small_spec("obs4"))
    for col in ("Model Size (MB)", "Weight Bits", "Weight Bits excl. first/last", "Total Feat Map (MB)",
                "Max Feat Map (MB)"):
        assert col in res.table.columns


def test_identical_seeds_give_byte_identical_outputs(tmp_path):
    for name in ("a", "b"):
        run_observation(small_spec("obs7", seeds=(0, 1)), tmp_path / name)
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "obs7_summary.csv" in files and "obs7_ground_truth.card.txt" in files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_parallel_matches_sequential():
    seq = run_observation(small_spec("obs2", seeds=(0, 1)))
    par = run_observation(small_spec("obs2", seeds=(0, 1), parallel=True))
    assert seq.table.to_csv() == par.table.to_csv()


def test_summary_mean_and_sample_std():
    rows = [{"seed": s, "config": "c", "sweep": "bits", "value": 4, "accuracy": a}
            for s, a in enumerate([0.5, 0.75, 0.875])]
    rows.append({"seed": 0, "config": "d", "sweep": "bits", "value": 4, "accuracy": 0.25})
    summary = ResultTable("obs1", rows).summary()
    assert summary.lookup("c", 4) == statistics.mean([0.5, 0.75, 0.875])
    assert summary.lookup("c", 4, "accuracy_std") == pytest.approx(statistics.stdev([0.5, 0.75, 0.875]), rel=1e-15)
    assert summary.lookup("c", 4, "seeds") == 3
    assert summary.lookup("d", 4, "accuracy_std") == 0.0
    with pytest.raises(KeyError):
        summary.lookup("e", 4)


def test_tables_round_trip_floats_exactly():
    rows = [{"seed": 0, "config": "c", "sweep": "bits", "value": 3, "accuracy": 0.1 + 0.2}]
    t = ResultTable("obs1", rows)
    assert t.to_csv().splitlines()[1].endswith(repr(0.1 + 0.2))
    assert json.loads(t.to_json())["rows"][0]["accuracy"] == 0.1 + 0.2


def test_spec_validation():
    with pytest.raises(ConfigError):
        ExperimentSpec("obs9")
    with pytest.raises(ConfigError):
        ExperimentSpec("obs1", seeds=[])
    assert sorted(RECIPES) == [f"obs{i}" for i in range(1, 9)]
