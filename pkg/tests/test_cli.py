"""End-to-end command line tests: artifacts, config echoes, error JSON."""

import hashlib
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from stealthflip import cli
from stealthflip import sweep as sweep_mod
from stealthflip.config import ExperimentConfig, config_from_overrides, load_config
from stealthflip.data import save_dataset
from stealthflip.errors import ConfigError, InputError
from stealthflip.metrics import AttackReport

# small budgets so a full command finishes in seconds
pytestmark = pytest.mark.filterwarnings("ignore:victim training accuracy")

FAST = {
    "epochs": "2",
    "m": "16",
    "max_iters": "25",
    "init_steps": "10",
    "stop_threshold": "1e-9",
}


def fast_flags(out_dir, **extra):
    merged = dict(FAST, out_dir=str(out_dir), **extra)
    flags = []
    for key, value in merged.items():
        flags += ["--" + key.replace("_", "-"), str(value)]
    return flags


def sha256_file(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


@pytest.fixture(scope="module")
def attack_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("attack_run")
    assert cli.main(["attack"] + fast_flags(out)) == 0
    return out


class TestConfigFile:
    def test_echo_roundtrip_preserves_floats(self):
        cfg = ExperimentConfig(lr_noise=3e-7, eps=0.123456789012345)
        from stealthflip.config import parse_config_text

        again = parse_config_text(cfg.to_text())
        assert again == cfg

    def test_unknown_file_key_listed(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("eps = 0.04\nbogus = 1\nworse = 2\n")
        with pytest.raises(ConfigError) as err:
            load_config(path)
        assert err.value.keys == ["bogus", "worse"]

    def test_unknown_override_key_listed(self):
        with pytest.raises(ConfigError) as err:
            config_from_overrides({"nope": "1"})
        assert err.value.keys == ["nope"]

    def test_wrong_type_listed(self):
        with pytest.raises(ConfigError) as err:
            config_from_overrides({"eps": "fast"})
        assert err.value.keys == ["eps"]

    def test_invalid_values_listed(self):
        with pytest.raises(ConfigError) as err:
            ExperimentConfig(mode="sideways", m=0)
        assert err.value.keys == ["m", "mode"]

    def test_flags_override_file(self, tmp_path):
        path = tmp_path / "base.cfg"
        path.write_text("eps = 0.02\ntarget = 3\n")
        cfg = load_config(path, {"target": "7"})
        assert cfg.eps == 0.02 and cfg.target == 7

    def test_shipped_default_config_matches_dataclass(self):
        root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
        cfg = load_config(os.path.join(root, "configs", "default.cfg"))
        assert cfg == ExperimentConfig()

    def test_shipped_solver_schedule(self):
        root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
        cfg = load_config(os.path.join(root, "configs", "default.cfg"))
        assert cfg.eps == 0.04
        assert cfg.kappa == 0.01
        assert cfg.lr_noise == 1e-5
        assert cfg.lr_flow == 1e-5
        assert cfg.lr_bits == 1e-4
        assert cfg.rho_init == 1e-4
        assert cfg.stop_threshold == 1e-4
        assert cfg.max_iters == 3000
        assert cfg.inner_steps == 5
        assert cfg.init_steps == 500 and cfg.init_lr == 0.01


class TestAttackArtifacts:
    def test_all_artifacts_written(self, attack_dir):
        for name in ("victim.ckpt", "trigger.bin", "flips.json", "trace.csv",
                     "report.json", "config_echo.cfg", "convergence.png",
                     "trigger_panel.png"):
            assert (attack_dir / name).exists(), name

    def test_provenance_is_content_hash(self, attack_dir):
        rep = AttackReport.from_json((attack_dir / "report.json").read_text())
        prov = rep.provenance
        for stem, fname in (("checkpoint", "victim.ckpt"),
                            ("trigger", "trigger.bin"),
                            ("flip_list", "flips.json"),
                            ("trace", "trace.csv")):
            assert prov[f"{stem}_file"] == fname
            assert prov[f"{stem}_sha256"] == sha256_file(attack_dir / fname)

    def test_echo_parses_and_carries_overrides(self, attack_dir):
        cfg = load_config(attack_dir / "config_echo.cfg")
        assert cfg.m == 16
        assert cfg.max_iters == 25
        assert cfg.seed >= 0
        assert cfg.out_dir == str(attack_dir)

    def test_eval_reproduces_report_exactly(self, attack_dir):
        echo = str(attack_dir / "config_echo.cfg")
        assert cli.main(["eval", "--config", echo]) == 0
        attack_text = (attack_dir / "report.json").read_text()
        eval_text = (attack_dir / "report_eval.json").read_text()
        assert attack_text == eval_text

    def test_rerun_of_echo_is_bit_identical(self, attack_dir):
        before = {name: (attack_dir / name).read_bytes()
                  for name in ("report.json", "trigger.bin", "flips.json",
                               "trace.csv", "victim.ckpt")}
        echo = str(attack_dir / "config_echo.cfg")
        assert cli.main(["attack", "--config", echo]) == 0
        for name, blob in before.items():
            assert (attack_dir / name).read_bytes() == blob, name

    def test_defend_writes_report(self, attack_dir):
        echo = str(attack_dir / "config_echo.cfg")
        assert cli.main(["defend", "--config", echo,
                         "--defense", "average2"]) == 0
        rep = AttackReport.from_json(
            (attack_dir / "report_defense_average2.json").read_text())
        assert rep.details["defense"] == "average2"
        assert 0.0 <= rep.asr <= 100.0

    def test_render_writes_image_files(self, attack_dir):
        echo = str(attack_dir / "config_echo.cfg")
        assert cli.main(["render", "--config", echo, "--count", "3"]) == 0
        render = attack_dir / "render"
        names = sorted(p.name for p in render.iterdir())
        assert names == ["clean_000.png", "clean_001.png", "clean_002.png",
                         "panel.png", "triggered_000.png", "triggered_001.png",
                         "triggered_002.png"]


class TestSweep:
    def test_length_one_sweep_equals_single_attack(self, tmp_path):
        cfg = config_from_overrides(dict(FAST, out_dir=str(tmp_path)))
        splits = sweep_mod.load_splits(cfg)
        model, _ = sweep_mod.load_victim(cfg, splits)
        single = sweep_mod.run_attack(cfg, model, splits).report
        reports, notes = sweep_mod.sweep("gamma", [cfg.gamma], cfg,
                                  model=model, splits=splits)
        assert notes == [""]
        assert reports[0].metrics_dict() == single.metrics_dict()

    def test_infeasible_value_skipped_with_note(self, tmp_path):
        cfg = config_from_overrides(dict(FAST, out_dir=str(tmp_path)))
        splits = sweep_mod.load_splits(cfg)
        model, _ = sweep_mod.load_victim(cfg, splits)
        reports, notes = sweep_mod.sweep("M", [16, 10 ** 6], cfg,
                                  model=model, splits=splits)
        assert reports[0] is not None and reports[1] is None
        assert "pool" in notes[1]

    def test_unknown_parameter_rejected(self, tmp_path):
        cfg = config_from_overrides(dict(FAST, out_dir=str(tmp_path)))
        with pytest.raises(InputError):
            sweep_mod.sweep("alpha", [1], cfg)

    def test_cli_sweep_writes_csv_and_plot(self, tmp_path, capsys):
        code = cli.main(["sweep"] + fast_flags(tmp_path)
                        + ["--param", "eps", "--values", "0.02,-1"])
        assert code == 0
        csv_path = tmp_path / "sweep_eps.csv"
        lines = csv_path.read_text().strip().splitlines()
        assert lines[0].startswith("eps,")
        assert len(lines) == 3
        assert "skipped" in lines[2]
        assert (tmp_path / "sweep_eps.png").exists()
        assert "1 skipped" in capsys.readouterr().out


class TestTrivialRuns:
    def test_zero_weight_zero_budget_leaves_model_alone(self, tmp_path):
        out = tmp_path / "trivial"
        assert cli.main(["attack"] + fast_flags(out, gamma="0", b="0")) == 0
        rep = AttackReport.from_json((out / "report.json").read_text())
        assert rep.n_flip == 0
        assert rep.pa_ta == rep.ta

    def test_negative_seed_resolves_to_concrete(self, tmp_path):
        out = tmp_path / "seeded"
        assert cli.main(["train"] + fast_flags(out, seed="-1")) == 0
        cfg = load_config(out / "config_echo.cfg")
        assert cfg.seed >= 0

    def test_train_then_attack_from_checkpoint_bundle(self, tmp_path,
                                                      tiny_splits):
        bundle = tmp_path / "bundle"
        bundle.mkdir()
        save_dataset(tiny_splits.attacker, bundle / "attacker.bin")
        save_dataset(tiny_splits.test, bundle / "test.bin")
        train_dir = tmp_path / "victim"
        assert cli.main(["train"] + fast_flags(train_dir)) == 0
        out = tmp_path / "from_ckpt"
        code = cli.main(["attack"] + fast_flags(
            out, victim=str(train_dir / "victim.ckpt"), dataset=str(bundle)))
        assert code == 0
        rep = AttackReport.from_json((out / "report.json").read_text())
        assert rep.provenance["checkpoint_sha256"] == sha256_file(
            train_dir / "victim.ckpt")


class TestErrorReporting:
    def test_unknown_config_key_is_json_with_keys(self, tmp_path, capsys):
        path = tmp_path / "bad.cfg"
        path.write_text("verbosity = 3\n")
        code = cli.main(["train", "--config", str(path)])
        assert code == 2
        err = json.loads(capsys.readouterr().err)
        assert err["error"]["type"] == "ConfigError"
        assert err["error"]["keys"] == ["verbosity"]

    def test_missing_artifacts_are_json(self, tmp_path, capsys):
        code = cli.main(["eval"] + fast_flags(tmp_path / "nowhere"))
        assert code == 4
        err = json.loads(capsys.readouterr().err)
        assert err["error"]["type"] == "InputError"

    def test_invalid_value_exit_code(self, tmp_path, capsys):
        code = cli.main(["attack"] + fast_flags(tmp_path, eps="-3"))
        assert code == 2
        err = json.loads(capsys.readouterr().err)
        assert err["error"]["keys"] == ["eps"]

    def test_bad_sweep_param_rejected_by_parser(self, tmp_path):
        with pytest.raises(SystemExit):
            cli.main(["sweep"] + fast_flags(tmp_path)
                     + ["--param", "alpha", "--values", "1"])

    def test_module_entry_point_runs(self):
        proc = subprocess.run(
            [sys.executable, "-m", "stealthflip.cli", "attack", "--help"],
            capture_output=True, text=True)
        assert proc.returncode == 0
        assert "--stop-threshold" in proc.stdout
