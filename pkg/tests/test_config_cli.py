import csv

import numpy as np
import pytest

from hybridpolicy import experiments as X
from hybridpolicy.cli import main
from hybridpolicy.config import ExperimentConfig, load_config, parse_config
from hybridpolicy.nn_core import ConfigError
from hybridpolicy.plotting import PlotError, plot_csv

TINY = """\
# small enough to train in a second
n_episodes = 12
train_steps = 30
batch_size = 16
k_diff = 4
planner_width = 8
planner_ffn = 8
refiner_width = 16
refiner_depth = 2
geo_width = 8
d_emb = 3
eval_episodes = 8
tau = 0.05
ema_decay = 0.9
"""


def read_rows(path):
    lines = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def test_parse_config_types_and_comments():
    cfg = parse_config("seed = 3  # trailing\n\nlatch = false\ntau = 0.8\nstrategy = no_tf\n")
    assert (cfg.seed, cfg.latch, cfg.tau, cfg.strategy) == (3, False, 0.8, "no_tf")


@pytest.mark.parametrize("text, match", [
    ("bogus = 1", "unknown key"),
    ("seed = 1\nseed = 2", "duplicate"),
    ("seed = one", "bad value"),
    ("seed 1", "key = value"),
    ("tau = 1.5", "tau"),
    ("strategy = sometimes", "strategy"),
    ("n_bins = 1", "n_bins"),
])
def test_parse_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_hash_ignores_eval_keys():
    base = ExperimentConfig()
    assert base.hash() == base.with_updates(eval_episodes=7, m_factor=1).hash()
    assert base.hash() != base.with_updates(n_bins=8).hash()
    assert base.data_hash() == base.with_updates(n_bins=8).data_hash()
    assert base.data_hash() != base.with_updates(n_episodes=9).data_hash()
    assert parse_config(base.dumps()) == base
    with pytest.raises(ConfigError):
        base.with_updates(colour="red")
    assert load_config(None) == base


def test_binomial_interval():
    lo, hi = X.binomial_interval(100, 200)
    assert lo == pytest.approx(0.4314, abs=1e-4) and hi == pytest.approx(0.5686, abs=1e-4)
    assert X.binomial_interval(0, 10)[0] == 0.0
    assert X.binomial_interval(10, 10)[1] == pytest.approx(1.0)


def test_monolithic_width_matches_parameter_count():
    cfg = ExperimentConfig()
    w = X.monolithic_width(cfg)
    hier = (X.build_models(cfg).planner.store.num_params()
            + X.build_models(cfg).refiner.store.num_params())
    mono = X.build_models(cfg, "monolithic").refiner.store.num_params()
    assert mono >= hier
    smaller = X.RefinerModel(X.refiner_config(cfg, "monolithic", w - 8)).store.num_params()
    assert smaller < hier


@pytest.fixture()
def workdir(tmp_path):
    (tmp_path / "tiny.cfg").write_text(TINY)
    return tmp_path


def run(workdir, *args):
    return main([*args, "--config", str(workdir / "tiny.cfg"), "--out", str(workdir / "out")])


def test_cli_end_to_end(workdir, capsys):
    out = workdir / "out"
    assert run(workdir, "train") == 2
    assert "gen-data" in capsys.readouterr().err
    assert run(workdir, "gen-data") == 0
    first = (out / "dataset.bin").read_bytes()
    assert run(workdir, "gen-data") == 0
    assert (out / "dataset.bin").read_bytes() == first

    assert run(workdir, "train") == 0
    metrics = (out / "hierarchical" / "metrics.csv").read_text()
    rows = read_rows(out / "hierarchical" / "metrics.csv")
    sources = [r["source"] for r in rows]
    assert sum(a != b for a, b in zip(sources, sources[1:])) == 1
    assert run(workdir, "train") == 0
    assert (out / "hierarchical" / "metrics.csv").read_text() == metrics

    assert run(workdir, "train", "--mode", "monolithic") == 0
    mono = read_rows(out / "monolithic" / "metrics.csv")
    assert {r["acc_ema"] for r in mono} == {"0.0"}

    assert run(workdir, "eval") == 0
    ev = read_rows(out / "hierarchical" / "eval.csv")[0]
    assert 0 <= float(ev["success"]) <= 1 and ev["episodes"] == "8"
    assert len(list((out / "hierarchical" / "traces").glob("episode_*.csv"))) == 8
    first_eval = (out / "hierarchical" / "eval.csv").read_text()
    assert run(workdir, "eval") == 0
    assert (out / "hierarchical" / "eval.csv").read_text() == first_eval

    assert run(workdir, "eval", "--mode", "expert") == 0
    assert float(read_rows(out / "expert" / "eval.csv")[0]["success"]) == 1.0

    assert run(workdir, "eval", "--mode", "monolithic", "--runtime", "sync") == 0

    svgs = {}
    assert run(workdir, "plot", str(out / "hierarchical" / "metrics.csv")) == 0
    for p in sorted(out.glob("metrics_loss_*.svg")):
        svgs[p.name] = p.read_bytes()
    assert set(svgs) == {"metrics_loss_linear.svg", "metrics_loss_log.svg"}
    assert b"config_hash=" in svgs["metrics_loss_linear.svg"]
    assert run(workdir, "plot", str(out / "hierarchical" / "metrics.csv")) == 0
    for name, data in svgs.items():
        assert (out / name).read_bytes() == data


def test_eval_rejects_hash_mismatch(workdir, capsys):
    assert run(workdir, "gen-data") == 0
    assert run(workdir, "train") == 0
    (workdir / "tiny.cfg").write_text(TINY + "lr = 0.002\n")
    assert run(workdir, "eval") == 2
    assert "config hash" in capsys.readouterr().err
    assert run(workdir, "eval", "--force") == 0


def test_train_rejects_dataset_from_other_config(workdir, capsys):
    assert run(workdir, "gen-data") == 0
    (workdir / "tiny.cfg").write_text(TINY.replace("n_episodes = 12", "n_episodes = 13"))
    assert run(workdir, "train") == 2
    assert "dataset" in capsys.readouterr().err


def test_sweeps_and_latency_model(workdir):
    out = workdir / "out"
    assert run(workdir, "gen-data") == 0
    assert run(workdir, "sweep-bins", "--values", "2,4") == 0
    rows = read_rows(out / "sweep_bins.csv")
    assert [r["n_bins"] for r in rows] == ["2", "4"]
    assert all(0 <= float(r["success"]) <= 1 and r["episodes"] == "8" for r in rows)
    assert (out / "sweep_bins.svg").exists()

    assert run(workdir, "sweep-horizon", "--values", "3") == 2
    assert run(workdir, "sweep-horizon", "--values", "1,2") == 0
    rows = read_rows(out / "sweep_horizon.csv")
    assert [float(r["closed_form_ms"]) for r in rows] == [152.0, 122.0]

    assert run(workdir, "sweep-strategy", "--values", "pure_tf,no_tf") == 0
    rows = read_rows(out / "sweep_strategy.csv")
    assert [r["strategy"] for r in rows] == ["pure_tf", "no_tf"]

    assert run(workdir, "latency-model") == 0
    rows = read_rows(out / "latency_model.csv")
    assert all(abs(float(r["residual_ms"])) <= 0.5 for r in rows)


def test_sweep_horizon_m1_matches_sync(workdir):
    assert run(workdir, "gen-data") == 0
    cfg = load_config(workdir / "tiny.cfg")
    data = X.training_set(cfg, X.training_episodes(cfg, workdir / "out" / "dataset.bin"))
    models = X.train(cfg, data)
    a = X.evaluate(models, cfg, m=1, mode="async")
    b = X.evaluate(models, cfg, m=1, mode="sync")
    assert all(x.same_as(y) for x, y in zip(a.traces, b.traces))


def test_untrained_policy_is_no_better_than_chance():
    cfg = parse_config(TINY).with_updates(eval_layout="symmetric", eval_episodes=40)
    models = X.build_models(cfg)
    res = X.evaluate(models, cfg)
    assert res.rate <= 1 / cfg.num_targets


def test_plot_errors(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    with pytest.raises(PlotError):
        plot_csv(empty, tmp_path)
    header_only = tmp_path / "h.csv"
    header_only.write_text("# config_hash=x\nstep,l_plan,l_diff,l_total,acc_ema,source\n")
    with pytest.raises(PlotError):
        plot_csv(header_only, tmp_path)
    ragged = tmp_path / "r.csv"
    ragged.write_text("n_bins,success,ci_low,ci_high\n2,0.5,0.4\n")
    with pytest.raises(PlotError):
        plot_csv(ragged, tmp_path)
    assert not list(tmp_path.glob("*.svg"))
    assert main(["plot", str(empty), "--out", str(tmp_path)]) == 2


def test_cli_rejects_unknown_config_key(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("widht = 3\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "unknown key" in capsys.readouterr().err
