"""Run-layer checks: config files, checkpoints, training loop artifacts,
resume semantics, and the command-line surface."""

import dataclasses
import os

import numpy as np
import pytest

import refgame.checkpoint as ck
import refgame.cli as cli
import refgame.config as cfgmod
import refgame.train as train


def micro_cfg(out, **kw):
    base = dict(n_attributes=2, values_per_attribute=3, feature_dim=8,
                instance_noise=0.1, world_seed=0, vocab_size=6, max_len=3,
                distractors=3, batch_size=8, embed_dim=6, hidden_dim=10,
                estimator="st-gs", lr=1e-3, lm_epochs=10, max_updates=30,
                eval_interval=10, eval_rounds=40, success_threshold=2.0,
                patience=100, seed=1, out=str(out))
    base.update(kw)
    return cfgmod.RunConfig(**base).validate()


def read(path):
    with open(path) as f:
        return f.read()


# ---------------------------------------------------------------------------
# config files


def test_config_round_trip(tmp_path):
    cfg = micro_cfg(tmp_path / "run", temperature=2.5, kl_weight=0.25)
    path = tmp_path / "config.txt"
    cfgmod.save_config(cfg, path)
    again = cfgmod.load_config(path)
    assert again == cfg


def test_overrides_beat_file_and_none_is_skipped(tmp_path):
    cfg = micro_cfg(tmp_path / "run")
    path = tmp_path / "config.txt"
    cfgmod.save_config(cfg, path)
    got = cfgmod.load_config(path, {"seed": 9, "lr": None})
    assert got.seed == 9
    assert got.lr == cfg.lr


def test_config_parse_errors_carry_line_numbers():
    with pytest.raises(ValueError, match="line 2"):
        cfgmod.parse_config_text("seed = 1\nvocab_size = banana\n")
    with pytest.raises(ValueError, match="unknown"):
        cfgmod.parse_config_text("no_such_field = 1\n")


def test_config_validation():
    with pytest.raises(ValueError, match="estimator"):
        micro_cfg("x", estimator="bogus")
    with pytest.raises(ValueError, match="lm_fraction"):
        micro_cfg("x", lm_fraction=1.5)
    with pytest.raises(ValueError, match="positive"):
        micro_cfg("x", vocab_size=0)
    with pytest.raises(ValueError, match="decode"):
        micro_cfg("x", decode="beam")


# ---------------------------------------------------------------------------
# checkpoint files


def test_checkpoint_round_trip(tmp_path):
    cfg = micro_cfg(tmp_path)
    path = tmp_path / "checkpoint.txt"
    scalars = {"update": 7, "best_success": 0.625, "adam_s.t": 3}
    arrays = {"param/w": np.array([[0.1, -2.5e-7], [np.pi, 4.0]]),
              "adam_s.m/w": np.zeros(3)}
    ck.save_checkpoint(path, cfg, scalars, arrays)
    cfg2, scalars2, arrays2 = ck.load_checkpoint(path)
    assert cfg2 == cfg
    assert scalars2["update"] == 7
    assert scalars2["best_success"] == 0.625
    assert scalars2["rng_scheme"] == "counter"
    for name, arr in arrays.items():
        assert np.array_equal(arrays2[name], arr)


def test_checkpoint_version_mismatch(tmp_path):
    path = tmp_path / "checkpoint.txt"
    path.write_text("something else\n")
    with pytest.raises(ValueError, match="version"):
        ck.load_checkpoint(path)


def test_checkpoint_array_size_mismatch(tmp_path):
    cfg = micro_cfg(tmp_path)
    path = tmp_path / "checkpoint.txt"
    ck.save_checkpoint(path, cfg, {}, {"x": np.zeros((2, 2))})
    text = read(path).replace("[array x 2 2]", "[array x 2 3]")
    path.write_text(text)
    with pytest.raises(ValueError, match="array x"):
        ck.load_checkpoint(path)


# ---------------------------------------------------------------------------
# training loop artifacts


def checkpoint_without_out(path):
    return [ln for ln in read(path).splitlines() if not ln.startswith("out = ")]


def test_rerun_is_bit_identical(tmp_path):
    outs = []
    for name in ("a", "b"):
        cfg = micro_cfg(tmp_path / name)
        res = train.run_train(cfg)
        assert not res["failed"]
        outs.append(cfg.out)
    a, b = outs
    assert read(f"{a}/metrics.csv") == read(f"{b}/metrics.csv")
    assert read(f"{a}/report.txt") == read(f"{b}/report.txt")
    assert read(f"{a}/messages.log") == read(f"{b}/messages.log")
    assert (checkpoint_without_out(f"{a}/checkpoint.txt")
            == checkpoint_without_out(f"{b}/checkpoint.txt"))


def test_reinforce_rerun_is_bit_identical(tmp_path):
    outs = []
    for name in ("a", "b"):
        cfg = micro_cfg(tmp_path / name, estimator="reinforce", max_updates=20)
        res = train.run_train(cfg)
        assert not res["failed"]
        outs.append(cfg.out)
    a, b = outs
    assert read(f"{a}/metrics.csv") == read(f"{b}/metrics.csv")
    assert (checkpoint_without_out(f"{a}/checkpoint.txt")
            == checkpoint_without_out(f"{b}/checkpoint.txt"))


def test_resume_matches_uninterrupted_run(tmp_path):
    full = micro_cfg(tmp_path / "full", max_updates=40)
    train.run_train(full)

    part = micro_cfg(tmp_path / "part", max_updates=20)
    train.run_train(part)
    extended = dataclasses.replace(part, max_updates=40)
    res = train.run_train(extended, resume=True)
    assert not res["failed"]
    assert res["update"] == 40

    assert read(f"{full.out}/metrics.csv") == read(f"{part.out}/metrics.csv")
    assert (checkpoint_without_out(f"{full.out}/checkpoint.txt")
            == checkpoint_without_out(f"{part.out}/checkpoint.txt"))


def test_resume_rejects_architecture_change(tmp_path):
    cfg = micro_cfg(tmp_path, max_updates=10)
    train.run_train(cfg)
    changed = dataclasses.replace(cfg, hidden_dim=12, max_updates=20)
    with pytest.raises(ValueError, match="hidden_dim"):
        train.run_train(changed, resume=True)


def test_nan_abort_preserves_last_checkpoint(tmp_path):
    cfg = micro_cfg(tmp_path, max_updates=20)
    train.run_train(cfg)
    path = os.path.join(cfg.out, "checkpoint.txt")
    ckpt_cfg, scalars, arrays = ck.load_checkpoint(path)
    name = sorted(a for a in arrays if a.startswith("param/sender"))[0]
    arrays[name].reshape(-1)[0] = np.nan
    ck.save_checkpoint(path, ckpt_cfg, scalars, arrays)
    poisoned = read(path)

    extended = dataclasses.replace(cfg, max_updates=40)
    res = train.run_train(extended, resume=True)
    assert res["failed"]
    assert res["stop"] == "nan"
    assert "non-finite" in res["error"]
    assert read(path) == poisoned


def test_beta_zero_grounding_matches_plain_training(tmp_path):
    plain = micro_cfg(tmp_path / "plain")
    train.run_train(plain)
    ground = micro_cfg(tmp_path / "ground", grounding="indirect", kl_weight=0.0)
    res = train.run_ground_train(ground)
    assert not res["failed"]
    assert "lm_train_perplexity" in res

    rows_p = read(f"{plain.out}/metrics.csv").splitlines()
    rows_g = read(f"{ground.out}/metrics.csv").splitlines()
    assert len(rows_p) == len(rows_g)
    for lp, lg in zip(rows_p, rows_g):
        # all columns but the language-model perplexity must coincide
        assert lp.split(",")[:7] == lg.split(",")[:7]
    last = rows_g[-1].split(",")
    assert last[7] != ""


def test_lr_sweep_writes_summary(tmp_path):
    cfg = micro_cfg(tmp_path, max_updates=10, eval_interval=5)
    res = train.run_lr_sweep(cfg)
    lines = read(os.path.join(cfg.out, "sweep.csv")).splitlines()
    assert lines[0] == "lr,updates,stop,success_sample,failed"
    assert len(lines) == 1 + len(train.LR_SWEEP_GRID)
    for lr in train.LR_SWEEP_GRID:
        assert os.path.isfile(os.path.join(cfg.out, f"lr_{lr:g}", "metrics.csv"))
    assert len(res["rows"]) == len(train.LR_SWEEP_GRID)


# ---------------------------------------------------------------------------
# command line


def write_cli_config(tmp_path, **kw):
    cfg = micro_cfg(tmp_path / "run", **kw)
    path = tmp_path / "config.txt"
    cfgmod.save_config(cfg, path)
    return cfg, str(path)


def test_cli_train_eval_analyze_probe(tmp_path, capsys):
    cfg, path = write_cli_config(tmp_path)
    assert cli.main(["train", "--config", path]) == 0
    out = capsys.readouterr().out
    assert "update = 30" in out
    assert os.path.isfile(os.path.join(cfg.out, "metrics.csv"))

    # offline commands take the architecture from the checkpoint echo
    assert cli.main(["eval", "--out", cfg.out]) == 0
    assert "success_sample" in capsys.readouterr().out

    assert cli.main(["analyze", "--out", cfg.out]) == 0
    capsys.readouterr()
    assert os.path.isfile(os.path.join(cfg.out, "analysis.txt"))

    assert cli.main(["probe-pseudograd", "--out", cfg.out, "--probes", "2"]) == 0
    assert "acute_fraction" in capsys.readouterr().out
    assert os.path.isfile(os.path.join(cfg.out, "probes.csv"))


def test_cli_missing_checkpoint_is_a_usage_error(tmp_path, capsys):
    code = cli.main(["eval", "--out", str(tmp_path / "nowhere")])
    assert code == 2
    assert "checkpoint" in capsys.readouterr().err


def test_cli_bad_config_value_is_a_usage_error(tmp_path, capsys):
    _, path = write_cli_config(tmp_path)
    # argparse rejects values outside the declared choices on its own
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--config", path, "--estimator", "bogus"])
    assert exc.value.code == 2
    assert "estimator" in capsys.readouterr().err
    # values argparse accepts but validation rejects share the exit code
    code = cli.main(["train", "--config", path, "--lr", "0"])
    assert code == 2
    assert "lr" in capsys.readouterr().err


def test_cli_flags_override_config_file(tmp_path, capsys):
    cfg, path = write_cli_config(tmp_path, max_updates=10)
    other = str(tmp_path / "other")
    assert cli.main(["train", "--config", path, "--seed", "2",
                     "--out", other]) == 0
    capsys.readouterr()
    echoed = train.checkpoint_config(other)
    assert echoed.seed == 2
    assert echoed.out == other


def test_cli_gradcheck_smoke(capsys):
    assert cli.main(["gradcheck", "--trials", "1"]) == 0
    out = capsys.readouterr().out
    assert "all passed" in out or "ok" in out
