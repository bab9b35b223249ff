from __future__ import annotations

import json

import pytest

from flywheel_rl.cli import EXIT_CONFIG, EXIT_STAGE, main
from flywheel_rl.config import DEFAULTS, ExperimentConfig, parse_config, parse_overrides
from flywheel_rl.errors import ConfigError, FileFormatError
from flywheel_rl.envworld import load_specs


def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("")
    assert parse_config(p, environ={}) == ExperimentConfig()
    assert parse_config(None, environ={}) == ExperimentConfig()


def test_precedence_cli_over_env_over_file(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("seed: 3\nppo:\n  learning_rate: 0.001\n  n_envs: 16\ndistill:\n  head_hidden: [32]\n")
    cfg = parse_config(p, environ={})
    assert (cfg.seed, cfg.ppo.learning_rate, cfg.ppo.n_envs, cfg.distill.head_hidden) == (3, 1e-3, 16, (32,))
    env = {"FLYWHEEL_SEED": "5", "FLYWHEEL_PPO__LEARNING_RATE": "2e-3", "FLYWHEEL_PURE_PYTHON": "1"}
    cfg = parse_config(p, environ=env)
    assert (cfg.seed, cfg.ppo.learning_rate) == (5, 2e-3)
    cfg = parse_config(p, parse_overrides(["seed=9", "ppo.learning_rate=5e-4"]), environ=env)
    assert (cfg.seed, cfg.ppo.learning_rate, cfg.ppo.n_envs) == (9, 5e-4, 16)


def test_json_config(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"flywheel": {"batch_size_K": 4}}))
    assert parse_config(p, environ={}).flywheel_config().batch_size_K == 4


@pytest.mark.parametrize("text", ["ppo:\n  gama: 0.9\n", "pppo:\n  gamma_bc: 1\n"])
def test_unknown_keys_are_named(tmp_path, text):
    p = tmp_path / "c.yaml"
    p.write_text(text)
    with pytest.raises(ConfigError) as err:
        parse_config(p, environ={})
    assert err.value.key in ("ppo.gama", "pppo")


def test_unknown_override_and_bad_values():
    with pytest.raises(ConfigError) as err:
        parse_config(None, {"ppo.gama": "1"}, environ={})
    assert err.value.key == "ppo.gama"
    with pytest.raises(ConfigError):
        parse_config(None, {"ppo.n_envs": "many"}, environ={})
    with pytest.raises(ConfigError):
        parse_config(None, {"ppo.epsilon_clip": "2.0"}, environ={})
    with pytest.raises(ConfigError):
        parse_overrides(["no_equals_sign"])


def test_defaults_cover_every_section():
    assert {k.split(".")[0] for k in DEFAULTS if "." in k} == {"env", "expert", "ppo", "distill", "flywheel", "eval"}


def _cli(tmp_path, *argv):
    return main([*argv, "--out-dir", str(tmp_path), "--run-name", argv[0]])


def test_gen_envs_is_byte_identical(tmp_path):
    assert main(["gen-envs", "--count", "20", "--seed", "1", "--out-dir", str(tmp_path), "--run-name", "a"]) == 0
    assert main(["gen-envs", "--count", "20", "--seed", "1", "--out-dir", str(tmp_path), "--run-name", "b"]) == 0
    a, b = (tmp_path / "a" / "envs.jsonl").read_bytes(), (tmp_path / "b" / "envs.jsonl").read_bytes()
    assert a == b and len(a.splitlines()) == 20
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["files"][0]["path"] == "envs.jsonl" and len(manifest["files"][0]["sha256"]) == 64
    assert (tmp_path / "a" / "config.yaml").exists()


def test_config_error_line(tmp_path, capsys):
    code = main(["gen-envs", "--set", "ppo.gama=0.5", "--out-dir", str(tmp_path)])
    assert code == EXIT_CONFIG
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "ConfigError" and err["key"] == "ppo.gama"


def test_stage_error_has_file_and_line(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"env_id": "x"}\n')
    with pytest.raises(FileFormatError, match="bad.jsonl:1"):
        load_specs(bad)
    code = main(["collect-demos", "--envs", str(bad), "--out-dir", str(tmp_path)])
    assert code == EXIT_STAGE
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "FileFormatError" and "bad.jsonl:1" in err["message"]


def test_small_pipeline(tmp_path, capsys):
    out = ["--out-dir", str(tmp_path)]
    assert main(["gen-envs", "--trivial", "--run-name", "g", *out]) == 0
    specs = str(tmp_path / "g" / "envs.jsonl")
    assert main(["collect-demos", "--envs", specs, "--n", "2", "--run-name", "d", *out]) == 0
    assert main(["train-rl", "--envs", specs, "--demos", str(tmp_path / "d" / "demos"), "--budget", "480",
                 "--set", "ppo.n_envs=8", "--set", "ppo.n_steps=30", "--set", "ppo.n_epochs=1",
                 "--run-name", "t", *out]) == 0
    ckpt = tmp_path / "t" / "policy.bin"
    assert ckpt.exists() and (tmp_path / "t" / "metrics.csv").exists()
    for mode in ("standard", "disturbance", "multi_object"):
        assert main(["eval", "--policy", str(ckpt), "--envs", specs, "--mode", mode, "--rollouts", "2",
                     "--run-name", f"e-{mode}", *out]) == 0
    capsys.readouterr()
    header = (tmp_path / "e-standard" / "eval.csv").read_text().splitlines()[0]
    assert header == "policy_id,mode,env_id,rollouts,successes,success_rate"
    assert (tmp_path / "e-multi_object" / "eval.csv").read_text().startswith("env_id,k,placed")
