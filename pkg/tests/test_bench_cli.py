import json

import numpy as np
import pytest
from conftest import random_store

from dpe.bench import (AblationRow, SizeRow, rows_to_csv, run_ablation, size_table, summarize_ablation,
                       sweep_ensemble_size, sweep_sensitivity)
from dpe.cli import main
from dpe.config import TrainConfig
from dpe.ensemble import load_model, train_ensemble
from dpe.metrics import evaluate
from dpe.store import load_store

CFG = TrainConfig(n_members=3, epochs=3, batch_size=16, learning_rate=1e-2, ips_weight=10.0)


@pytest.fixture(scope="module")
def stores():
    g = np.random.default_rng(2)
    return random_store(g, n=60, dim=4, k=2, n_groups=4), random_store(g, n=40, dim=4, k=2, n_groups=4)


def test_size_one_has_zero_delta(stores):
    rows = sweep_ensemble_size(*stores, CFG, [1])
    assert len(rows) == 1 and rows[0].delta == 0.0


def test_size_sweep_prefix_equals_retraining(stores):
    train, test = stores
    rows = sweep_ensemble_size(train, test, CFG, [1, 2, 3])
    direct = evaluate(train_ensemble(train, CFG, n_members=2), test)
    assert rows[1].worst_group_accuracy == direct.worst_group_accuracy
    assert rows[1].delta == pytest.approx((rows[1].worst_group_accuracy - rows[0].worst_group_accuracy)
                                          / rows[0].worst_group_accuracy * 100)


@pytest.mark.parametrize("sizes", [[], [0, 1], [2, 1], [1, 1]])
def test_bad_sizes(stores, sizes):
    with pytest.raises(ValueError):
        sweep_ensemble_size(*stores, CFG, sizes)


def test_size_table_needs_enough_members(stores):
    model = train_ensemble(stores[0], CFG, n_members=2)
    with pytest.raises(ValueError, match="members"):
        size_table(model, stores[1], [1, 3])


def test_sensitivity_single_point_matches_direct(stores):
    train, test = stores
    rows = sweep_sensitivity(train, test, CFG, [10.0], [1e4])
    direct = evaluate(train_ensemble(train, TrainConfig(**{**CFG.__dict__, "inv_temperature": 10.0,
                                                           "ips_weight": 1e4})), test)
    assert len(rows) == 1 and rows[0].worst_group_accuracy == direct.worst_group_accuracy


def test_sensitivity_grid_order_and_determinism(stores):
    a = sweep_sensitivity(*stores, CFG, [10.0, 40.0], [1e4])
    b = sweep_sensitivity(*stores, CFG, [10.0, 40.0], [1e4])
    assert [(r.inv_temperature, r.ips_weight) for r in a] == [(10.0, 1e4), (40.0, 1e4)]
    assert a == b


def test_ablation_rows_and_single_member_neutrality(stores):
    rows = run_ablation(*stores, CFG, seeds=[0], sizes=[1])
    assert [r.arm for r in rows] == ["none", "sampling_only", "sampling_plus_ips"]
    by_arm = {r.arm: r.worst_group_accuracy for r in rows}
    # with one member the penalty is inactive, so only the sampling differs
    assert by_arm["sampling_only"] == by_arm["sampling_plus_ips"]
    summary = summarize_ablation(rows)
    assert summary[("none", 1)] == by_arm["none"]


def test_rows_to_csv():
    text = rows_to_csv([SizeRow(1, 0.5, 0.6, 0.7, 0.0)])
    assert text.splitlines() == ["n_members,worst_group_accuracy,balanced_accuracy,overall_accuracy,delta",
                                 "1,0.5,0.6,0.7,0.0"]
    assert rows_to_csv([AblationRow("none", 0, 1, 0.1, 0.2, 0.3, 0.0)]).startswith("arm,seed,")
    with pytest.raises(ValueError):
        rows_to_csv([])


# -- command line ---------------------------------------------------------

@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out-dir", str(d), "--seed", "7", "--n-train", "120,60", "--n-test", "20"]) == 0
    return d


def test_synth_writes_stores_and_manifest(synth_dir, tmp_path):
    assert (synth_dir / "train.dpef").is_file() and (synth_dir / "test.dpef").is_file()
    manifest = json.loads((synth_dir / "manifest.json").read_text())
    assert manifest["command"] == "synth" and manifest["synth_spec"]["seed"] == 7
    again = tmp_path / "again"
    main(["synth", "--out-dir", str(again), "--seed", "7", "--n-train", "120,60", "--n-test", "20"])
    assert (again / "train.dpef").read_bytes() == (synth_dir / "train.dpef").read_bytes()


def test_synth_invalid_proportions_exit_2(tmp_path, capsys):
    assert main(["synth", "--out-dir", str(tmp_path), "--proportions", "0.5,0.1,0.1"]) == 2
    assert "--proportions" in capsys.readouterr().err


def _train(synth_dir, out, *extra):
    return main(["train", "--features", str(synth_dir / "train.dpef"), "--out", str(out), "--preset", "synthetic",
                 "--epochs", "5", "--n-members", "2", *extra])


def test_train_eval_replay(synth_dir, tmp_path, capsys):
    model = tmp_path / "m.dpem"
    assert _train(synth_dir, model) == 0
    assert "member=1 final_loss=" in capsys.readouterr().out
    assert (tmp_path / "m.dpem.manifest.json").is_file()
    assert main(["eval", "--model", str(model), "--test-features", str(synth_dir / "test.dpef"),
                 "--out", str(tmp_path / "report")]) == 0
    text = (tmp_path / "report.txt").read_text()
    direct = evaluate(load_model(model), load_store(synth_dir / "test.dpef"))
    assert direct.to_text() == text
    assert direct.worst_group_accuracy <= direct.overall_accuracy


def test_train_twice_bit_identical(synth_dir, tmp_path):
    _train(synth_dir, tmp_path / "a.dpem")
    _train(synth_dir, tmp_path / "b.dpem")
    assert (tmp_path / "a.dpem").read_bytes() == (tmp_path / "b.dpem").read_bytes()


def test_single_member_ignores_ips_weight(synth_dir, tmp_path):
    _train(synth_dir, tmp_path / "a.dpem", "--n-members", "1", "--ips-weight", "1e5")
    _train(synth_dir, tmp_path / "b.dpem", "--n-members", "1", "--ips-weight", "0")
    a, b = load_model(tmp_path / "a.dpem"), load_model(tmp_path / "b.dpem")
    assert a.members[0] == b.members[0]


def test_config_file_and_flag_precedence(tmp_path, capsys):
    cfg = tmp_path / "c.kv"
    cfg.write_text("n_members = 4\nseed = 3\n")
    assert main(["train", "--config", str(cfg), "--seed", "9", "--print-config"]) == 0
    out = capsys.readouterr().out
    assert "n_members=4" in out and "seed=9" in out


@pytest.mark.parametrize("argv", [["train", "--epochs", "x"], ["train", "--sampling", "bogus"],
                                  ["train", "--features", "/nonexistent.dpef", "--out", "m"],
                                  ["train", "--n-members", "0", "--print-config"], ["frobnicate"]])
def test_invalid_flags_exit_2(argv, capsys):
    try:
        code = main(argv)
    except SystemExit as exc:
        code = exc.code
    assert code == 2


def test_eval_without_groups_warns(tmp_path, capsys, stores):
    from dpe.store import FeatureStore, save_store
    train, _ = stores
    plain = FeatureStore(train.features, train.labels)
    save_store(plain, tmp_path / "plain.dpef")
    save_store(train, tmp_path / "tr.dpef")
    main(["train", "--features", str(tmp_path / "tr.dpef"), "--out", str(tmp_path / "m.dpem"), "--epochs", "2",
          "--n-members", "1"])
    capsys.readouterr()
    assert main(["eval", "--model", str(tmp_path / "m.dpem"), "--test-features", str(tmp_path / "plain.dpef")]) == 0
    assert "over classes" in capsys.readouterr().err


def test_eval_dim_mismatch_exit_1(synth_dir, tmp_path, stores):
    from dpe.store import save_store
    _train(synth_dir, tmp_path / "m.dpem")
    save_store(stores[1], tmp_path / "other.dpef")
    assert main(["eval", "--model", str(tmp_path / "m.dpem"), "--test-features", str(tmp_path / "other.dpef")]) == 1


def test_ablate_records_seeds(synth_dir, tmp_path, capsys):
    out = tmp_path / "abl"
    assert main(["ablate", "--features", str(synth_dir / "train.dpef"), "--test-features",
                 str(synth_dir / "test.dpef"), "--out-dir", str(out), "--preset", "synthetic", "--epochs", "2",
                 "--n-seeds", "2", "--sizes", "1,2", "--seed", "5"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seeds"] == [5, 6]
    lines = (out / "ablation.csv").read_text().splitlines()
    assert len(lines) == 1 + 3 * 2 * 2
    assert "linear_probe" in (out / "summary.csv").read_text()


def test_sizes_and_sensitivity_commands(synth_dir, tmp_path, capsys):
    common = ["--features", str(synth_dir / "train.dpef"), "--test-features", str(synth_dir / "test.dpef"),
              "--preset", "synthetic", "--epochs", "2"]
    assert main(["sizes", *common, "--out-dir", str(tmp_path / "s"), "--sizes", "1,2"]) == 0
    assert (tmp_path / "s" / "sizes.csv").read_text().count("\n") == 3
    assert main(["sensitivity", *common, "--out-dir", str(tmp_path / "g"), "--n-members", "2",
                 "--inv-temperatures", "10,20", "--ips-weights", "1e4"]) == 0
    assert "wga_range=" in capsys.readouterr().out


def test_inspect(synth_dir, tmp_path, capsys):
    _train(synth_dir, tmp_path / "m.dpem")
    capsys.readouterr()
    assert main(["inspect", "--model", str(tmp_path / "m.dpem"), "--features", str(synth_dir / "test.dpef"),
                 "--member", "1", "--class", "0", "--top-k", "3", "--similarity"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "rank,index,distance,label,group" and len(out) == 1 + 3 + 1 + 2
    assert out[5].split(",")[0] == "1.000000"
    assert main(["inspect", "--model", str(tmp_path / "m.dpem"), "--member", "5"]) == 2
