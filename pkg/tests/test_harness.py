import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cmc import cli, harness
from cmc.config import RunConfig

TINY = RunConfig(episodes=3, episode_length=4, minibatch=4, buffer_capacity=64)


def test_metrics_header_is_pinned(tmp_path):
    harness.run_single(TINY, 0, tmp_path)
    lines = (tmp_path / "metrics_seed0.csv").read_text().splitlines()
    assert lines[0] == "# cmc-metrics v1 smoothing_window=100"
    assert lines[1] == "episode,return_ext,success,mb_fraction,mean_e_prd,mean_LP,mean_r_int,steps,return_smoothed"
    assert len(lines) == 2 + 3
    info = json.loads((tmp_path / "run_seed0.json").read_text())
    assert info["cpu_seconds"] > 0 and info["env_steps"] > 0


def test_single_seed_aggregate_equals_the_run(tmp_path):
    summaries, failures = harness.run_experiment(TINY, [1], tmp_path)
    assert not failures
    rows = [ln.split(",") for ln in (tmp_path / "aggregate.csv").read_text().splitlines()[2:]]
    run = summaries[0].rows
    for agg, r in zip(rows, run):
        assert float(agg[2]) == r["return_ext"] and float(agg[3]) == 0.0
    assert json.loads((tmp_path / "config.json").read_text()) == TINY.to_dict()


def test_failing_seed_does_not_stop_the_others(tmp_path, monkeypatch):
    real = harness.run_single

    def flaky(cfg, seed, out_dir=None, progress_every=0):
        if seed == 1:
            raise RuntimeError("boom")
        return real(cfg, seed, out_dir, progress_every)

    monkeypatch.setattr(harness, "run_single", flaky)
    summaries, failures = harness.run_experiment(TINY, [0, 1, 2], tmp_path)
    assert [s.seed for s in summaries] == [0, 2]
    assert failures[0]["seed"] == 1 and "boom" in failures[0]["message"]
    assert json.loads((tmp_path / "failures.json").read_text())[0]["seed"] == 1


def test_parallel_seeds_match_sequential(tmp_path):
    harness.run_experiment(TINY, [0, 1], tmp_path / "seq")
    harness.run_experiment(TINY, [0, 1], tmp_path / "par", workers=2)
    for s in (0, 1):
        name = f"metrics_seed{s}.csv"
        assert (tmp_path / "seq" / name).read_bytes() == (tmp_path / "par" / name).read_bytes()


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=30), st.integers(1, 10))
def test_smoothing_is_a_trailing_mean(values, window):
    out = harness.smooth(values, window)
    for i, v in enumerate(out):
        ref = np.mean(values[max(0, i - window + 1):i + 1])
        assert v == pytest.approx(ref, abs=1e-9)


def test_normalization_and_degenerate_range():
    np.testing.assert_array_equal(harness.normalize_curve([2.0, 4.0, 3.0]), [0.0, 1.0, 0.5])
    np.testing.assert_array_equal(harness.normalize_curve([3.0, 3.0]), [0.0, 0.0])
    curve = harness.model_error_curve([[{"mean_e_prd": v} for v in (4.0, 2.0, 0.0)],
                                       [{"mean_e_prd": v} for v in (1.0, 1.0, 1.0)]])
    np.testing.assert_array_equal(curve, [0.5, 0.25, 0.0])
    assert harness.early_late_drop(np.linspace(1, 0, 10)) == pytest.approx(1.0)


def test_report_rejects_missing_column(tmp_path):
    (tmp_path / "metrics_seed0.csv").write_text("episode,return_ext\n0,1\n")
    with pytest.raises(ValueError, match="mean_e_prd"):
        harness.model_error_report(tmp_path)


def test_ordering_follows_medians():
    table = {"a": {"median": 0.1}, "b": {"median": 0.5}, "c": {"median": 0.5}}
    assert harness.ordering(table) == ["b", "c", "a"]


def test_fmt_is_exact():
    for x in (0.1, 1 / 3, 1e-300, -2.5):
        assert float(harness.fmt(x)) == x
    assert harness.fmt(math.nan) == "nan" and harness.fmt(3) == "3"


def test_ablation_table_matches_recomputation(tmp_path):
    cells = (("cacla", False), ("cacla", True))
    table = harness.ablation_matrix(TINY, [0], tmp_path, final_window=2, cells=cells)
    lines = (tmp_path / "ablation.csv").read_text().splitlines()[2:]
    for line in lines:
        name, median, _, n, rank = line.split(",")
        rows = harness.read_metrics(tmp_path / name / "metrics_seed0.csv")
        assert float(median) == harness.final_return(rows, 2) == table[name]["median"]
        assert int(rank) == harness.ordering(table).index(name) + 1


def test_cli_run_and_report(tmp_path, capsys):
    out = tmp_path / "run"
    code = cli.main(["run", "--seed", "0", "--episodes", "2", "--out-dir", str(out), "--episode-length=3",
                     "--minibatch=4", "--progress-every", "0"])
    assert code == 0
    assert json.loads(capsys.readouterr().out)["runs"][0]["seed"] == 0
    assert cli.main(["report", str(out)]) == 0
    assert (out / "model_error.csv").exists()


@pytest.mark.parametrize("argv,key", [
    (["run", "--out-dir", "x", "--seed", "1", "--seeds", "1,2"], "seed"),
    (["run", "--out-dir", "x", "--horizon", "0"], "horizon"),
    (["run", "--out-dir", "x", "--nonsense=1"], "nonsense"),
    (["run", "--out-dir", "x", "--plan-rate=0.1", "--plan-rate=0.2"], "plan_rate"),
])
def test_cli_errors_are_json(argv, key, capsys):
    assert cli.main(argv) != 0
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["key"] == key


def test_cli_unknown_subcommand(capsys):
    assert cli.main(["fly"]) != 0
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"] == "CliError"


def test_aggregate_matches_brute_force(tmp_path):
    summaries, _ = harness.run_experiment(TINY, [0, 1, 2], tmp_path)
    lines = (tmp_path / "aggregate.csv").read_text().splitlines()
    cols = lines[1].split(",")
    runs = [harness.read_metrics(tmp_path / f"metrics_seed{s}.csv") for s in (0, 1, 2)]
    for i, line in enumerate(lines[2:]):
        row = dict(zip(cols, map(float, line.split(","))))
        for key in harness.AGGREGATE_FIELDS:
            vals = [r[i][key] for r in runs]
            mean = sum(vals) / 3
            std = (sum((v - mean) ** 2 for v in vals) / 3) ** 0.5
            assert abs(row[f"{key}_mean"] - mean) < 1e-12 and abs(row[f"{key}_std"] - std) < 1e-12


def test_normalization_hand_examples():
    np.testing.assert_allclose(harness.normalize_curve([5.0, 4.0, 2.0, 1.0]), [1.0, 0.75, 0.25, 0.0])
    np.testing.assert_allclose(harness.normalize_curve([3.0, 7.0, 5.0, 11.0, 3.0]),
                               [0.0, 0.5, 0.25, 1.0, 0.0], atol=1e-15)
