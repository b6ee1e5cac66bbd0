import json
import shutil

import pytest

from mixnet import __version__
from mixnet.cli import build_parser, main
from mixnet.training import build_collapse_reference, build_model, load_checkpoint, checkpoint_bytes, ModelConfig

SMALL = {
    "seed": 7,
    "synth": {"dim": 6, "n_train": 6, "n_cv": 2, "n_test": 2, "frames_per_utterance": 40},
    "model": {"variant": "mixnet4", "hidden_width": 16, "hidden_layers": 2, "aux_width": 8,
              "aux_layers": 1, "band": 2, "lowrank_dim": 8},
    "train": {"epochs": 1, "aux_epochs": 1},
}


def write_config(tmp_path, cfg=SMALL, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def run(capsys, *argv):
    code = main(list(argv))
    err = capsys.readouterr().err
    return code, err


def pipeline(capsys, config, out):
    for cmd in ("synth", "pretrain-aux", "train"):
        assert run(capsys, cmd, "--config", config, "--out-dir", str(out)) == (0, "")
    ckpt = str(out / "model.ckpt")
    assert run(capsys, "eval", "--config", config, "--out-dir", str(out), "--checkpoint", ckpt)[0] == 0
    assert run(capsys, "analyze", "--config", config, "--out-dir", str(out), "--checkpoint", ckpt,
               "--utterances", "0")[0] == 0
    assert run(capsys, "params", "--config", config, "--out-dir", str(out))[0] == 0


class TestHelp:
    def test_documents_exit_codes_and_env(self, capsys):
        with pytest.raises(SystemExit):
            main(["train", "--help"])
        out = capsys.readouterr().out
        for code in ("0  success", "2  invalid", "3  missing", "4  training diverged", "5  gradient"):
            assert code in out
        assert "MIXNET_SEED" in out

    def test_every_flag_has_help(self):
        parser = build_parser()
        subparsers = next(a for a in parser._actions if a.choices and "train" in a.choices).choices
        for name, sub in subparsers.items():
            for action in sub._actions:
                assert action.help, (name, action.dest)


class TestPipeline:
    def test_end_to_end_reproducible(self, tmp_path, capsys):
        config = write_config(tmp_path)
        a, b = tmp_path / "a", tmp_path / "first"
        pipeline(capsys, config, a)
        shutil.copytree(a, b)
        pipeline(capsys, config, a)
        files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
        assert len(files) >= 12
        for rel in files:
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel

        report = json.loads((a / "train_report.json").read_text())
        assert report["tool_version"] == __version__ and report["seed"] == 7
        assert len(report["config_hash"]) == 64
        assert report["config"]["model"]["hidden_width"] == 16
        for name in ("eval_test.json", "analysis_layer1.json", "params_report.json", "aux_report.json"):
            r = json.loads((a / name).read_text())
            assert r["config_hash"] == report["config_hash"] and r["tool_version"] == __version__
        header = (a / "scatter_layer1.csv").read_text().splitlines()[0]
        assert header == "x,y,broad_label,subclass_label"

    def test_checkpoint_save_load_save(self, tmp_path, capsys):
        config = write_config(tmp_path)
        out = tmp_path / "o"
        for cmd in ("synth", "train"):
            assert run(capsys, cmd, "--config", config, "--out-dir", str(out))[0] == 0
        raw = (out / "model.ckpt").read_bytes()
        model, manifest = load_checkpoint(out / "model.ckpt")
        assert checkpoint_bytes(model, manifest["extra"]) == raw
        assert manifest["extra"]["seed"] == 7


class TestErrors:
    def test_unknown_key(self, tmp_path, capsys):
        cfg = json.loads(json.dumps(SMALL))
        cfg["train"]["momentum"] = 0.9
        code, err = run(capsys, "params", "--config", write_config(tmp_path, cfg))
        assert code == 2
        assert json.loads(err)["error"] == "ConfigError"

    def test_unknown_section(self, tmp_path, capsys):
        code, _ = run(capsys, "params", "--config", write_config(tmp_path, {"optim": {}}))
        assert code == 2

    def test_bad_value(self, tmp_path, capsys):
        code, err = run(capsys, "params", "--set", "model.variant=mixnet9", "--out-dir", str(tmp_path))
        assert code == 2 and "mixnet9" in json.loads(err)["message"]

    def test_missing_files(self, tmp_path, capsys):
        assert run(capsys, "params", "--config", str(tmp_path / "none.json"))[0] == 3
        code, err = run(capsys, "train", "--config", write_config(tmp_path), "--out-dir", str(tmp_path / "x"))
        assert code == 3 and "synth" in json.loads(err)["message"]
        code, _ = run(capsys, "eval", "--checkpoint", str(tmp_path / "m.ckpt"), "--out-dir", str(tmp_path))
        assert code == 3

    def test_divergence(self, tmp_path, capsys):
        config = write_config(tmp_path)
        out = str(tmp_path / "d")
        assert run(capsys, "synth", "--config", config, "--out-dir", out)[0] == 0
        code, err = run(capsys, "train", "--config", config, "--out-dir", out,
                        "--set", "train.learning_rate=1e200", "--set", "model.variant=baseline")
        assert code == 4
        assert "epoch 1" in json.loads(err)["message"]

    def test_gradcheck_failure_code(self, tmp_path, capsys):
        code, err = run(capsys, "gradcheck", "--variant", "baseline", "--tolerance", "0",
                        "--out-dir", str(tmp_path))
        assert code == 5 and json.loads(err)["exit_code"] == 5


class TestCommands:
    def test_gradcheck_all_variants(self, tmp_path, capsys):
        assert run(capsys, "gradcheck", "--out-dir", str(tmp_path)) == (0, "")
        report = json.loads((tmp_path / "gradcheck_report.json").read_text())
        assert report["passed"] and report["worst_error"] < 1e-6
        assert set(report["variants"]) == {"baseline", "eigen_dmoe", "mixnet1", "mixnet2", "mixnet3", "mixnet4"}

    def test_params_single_expert_config(self, tmp_path, capsys):
        argv = ["params", "--out-dir", str(tmp_path), "--set", "model.variant=mixnet2",
                "--set", "model.n_gate_classes=1", "--set", "model.n_output_experts=1"]
        assert run(capsys, *argv)[0] == 0
        report = json.loads((tmp_path / "params_report.json").read_text())
        cfg = ModelConfig.preset("mixnet2", n_gate_classes=1, n_output_experts=1)
        assert report["params"] == report["collapse_reference_params"] == build_collapse_reference(cfg).param_count
        assert report["all_variants"]["baseline"]["params"] == build_model(ModelConfig.preset("baseline")).param_count

    def test_seed_env_override(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("MIXNET_SEED", "123")
        assert run(capsys, "params", "--out-dir", str(tmp_path))[0] == 0
        assert json.loads((tmp_path / "params_report.json").read_text())["seed"] == 123

    def test_set_overrides_file(self, tmp_path, capsys):
        config = write_config(tmp_path)
        assert run(capsys, "params", "--config", config, "--set", "model.hidden_width=20",
                   "--out-dir", str(tmp_path))[0] == 0
        report = json.loads((tmp_path / "params_report.json").read_text())
        assert report["config"]["model"]["hidden_width"] == 20

    def test_threads_flag(self, tmp_path, capsys):
        config = write_config(tmp_path)
        out = tmp_path / "t"
        assert run(capsys, "synth", "--config", config, "--out-dir", str(out))[0] == 0
        assert run(capsys, "train", "--config", config, "--out-dir", str(out), "--threads", "2")[0] == 0
        shutil.rmtree(out)
