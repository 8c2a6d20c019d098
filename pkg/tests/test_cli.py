import csv
import json

import numpy as np
import pytest

from mbseq.cli import main
from mbseq.config import ConfigError, RunConfig

TINY = ["--users", "40", "--items", "50", "--dim", "8", "--layers", "1", "--epochs", "2"]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --- configuration -------------------------------------------------------------

def test_unknown_key_rejected(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"epochz": 3}))
    with pytest.raises(ConfigError, match="epochz"):
        RunConfig.load(tmp_path / "c.json")


@pytest.mark.parametrize("doc", [{"dim": "32"}, {"strict_negatives": 1}, {"topk": []},
                                 {"threads": 0}, {"lr": True}])
def test_bad_values_rejected(doc):
    with pytest.raises(ConfigError):
        RunConfig.from_mapping(doc)


def test_flags_override_file(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"dim": 16, "tau": 0.2}))
    cfg = RunConfig.load(tmp_path / "c.json", {"dim": 8, "tau": None})
    assert (cfg.dim, cfg.tau) == (8, 0.2)


def test_ints_accepted_for_float_keys():
    assert RunConfig.from_mapping({"granularity": 3600}).granularity == 3600


def test_json_round_trip():
    cfg = RunConfig(topk=(1, 3), schedule="cyclic")
    assert RunConfig.from_mapping(json.loads(cfg.to_json())) == cfg


def test_invalid_model_setting_is_config_error():
    with pytest.raises(ConfigError):
        RunConfig(dim=6, heads=4).model(5, 5, 2, 1)


# --- exit codes --------------------------------------------------------------------

def test_cli_unknown_config_key_exits_2(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"bogus": 1}))
    assert main(["gradlab", "--config", str(tmp_path / "c.json"), "--out-dir", str(tmp_path)]) == 2
    assert "bogus" in capsys.readouterr().err


def test_cli_unreadable_config_exits_2(tmp_path):
    (tmp_path / "c.json").write_text("{not json")
    assert main(["synth", "--config", str(tmp_path / "c.json")]) == 2


def test_cli_missing_data_exits_2(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nope.csv"), "--out-dir", str(tmp_path)]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cli_divergence_exits_3(tmp_path, capsys):
    code = main(["train", *TINY, "--lr", "1e300", "--clip-norm", "0", "--no-eval",
                 "--out-dir", str(tmp_path)])
    assert code == 3
    assert "diverged" in capsys.readouterr().err


def test_cli_gradcheck_passes():
    assert main(["gradcheck", "--seed", "7"]) == 0


def test_cli_gradcheck_fails_at_impossible_tolerance(capsys):
    assert main(["gradcheck", "--tol", "1e-15"]) != 0
    assert "FAIL" in capsys.readouterr().out


# --- subcommands -------------------------------------------------------------------

def test_synth_is_deterministic(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    flags = ["--users", "200", "--items", "100", "--behaviors", "4", "--seed", "1"]
    assert main(["synth", *flags, "--out", str(a)]) == 0
    assert main(["synth", *flags, "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert a.with_suffix(".json").read_bytes() == b.with_suffix(".json").read_bytes()
    assert json.loads(a.with_suffix(".config.json").read_text())["seed"] == 1


def test_train_then_eval(tmp_path, capsys):
    data = tmp_path / "ev.csv"
    assert main(["synth", *TINY, "--out", str(data)]) == 0
    run = tmp_path / "run"
    assert main(["train", *TINY, "--data", str(data), "--out-dir", str(run)]) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    for name in ("config.json", "checkpoint.json", "epochs.csv", "attention_user.csv",
                 "metrics.json", "loss.png", "attention.png"):
        assert (run / name).stat().st_size > 0
    assert len(read_csv(run / "epochs.csv")) == 2
    attn = read_csv(run / "attention_user.csv")
    assert {r["slot"] for r in attn} == {"2", "3"}

    ev = tmp_path / "ev_out"
    assert main(["eval", "--checkpoint", str(run / "checkpoint.json"), "--data", str(data),
                 "--out-dir", str(ev)]) == 0
    again = json.loads(capsys.readouterr().out)
    assert again["HR@10"] == summary["HR@10"]
    assert (ev / "metrics.csv").exists()


def test_eval_shape_mismatch_exits_2(tmp_path):
    run = tmp_path / "run"
    assert main(["train", *TINY, "--no-eval", "--no-plots", "--out-dir", str(run)]) == 0
    assert main(["eval", "--checkpoint", str(run / "checkpoint.json"), "--items", "60"]) == 2


def test_ablate_wo_cl(tmp_path, capsys):
    out = tmp_path / "abl"
    assert main(["ablate", *TINY, "--variant", "wo_cl", "--variant", "full",
                 "--out-dir", str(out)]) == 0
    rows = {r["variant"]: r for r in read_csv(out / "ablation.csv")}
    assert float(rows["wo_cl"]["cl_long"]) == 0.0 and float(rows["wo_cl"]["cl_short"]) == 0.0
    assert float(rows["full"]["cl_long"]) > 0.0
    assert (out / "ablation.png").exists()
    assert "wo_cl" in capsys.readouterr().out


def test_ablate_bad_variant_exits_2(tmp_path):
    assert main(["ablate", *TINY, "--variant", "drop:9", "--out-dir", str(tmp_path)]) == 2


def test_gradlab_outputs(tmp_path):
    assert main(["gradlab", "--taus", "0.1", "0.5", "--points", "11", "--out-dir", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "grad_curve.csv")
    assert len(rows) == 22
    r = next(r for r in rows if float(r["tau"]) == 0.1 and float(r["x"]) == 0.0)
    assert float(r["c"]) == pytest.approx(1.0)
    turns = {float(r["tau"]): float(r["x_star"]) for r in read_csv(tmp_path / "turning_points.csv")}
    assert turns[0.1] == pytest.approx((np.sqrt(0.1 ** 2 + 4) - 0.1) / 2, rel=1e-9)
    assert (tmp_path / "grad_curves.png").exists()


def test_gradlab_rejects_bad_temperature(tmp_path):
    assert main(["gradlab", "--taus", "0", "--out-dir", str(tmp_path)]) == 2
