import json
import os

import pytest

from sacf.errors import InputError, MissingArtifactError
from sacf.pipeline import EvalMode
from sacf.settings import RunConfig, deep_merge, load_run_config


@pytest.fixture(autouse=True)
def isolated(tmp_path, monkeypatch):
    # no stray .env or SACF_* variables from the developer's shell
    monkeypatch.chdir(tmp_path)
    for key in [k for k in os.environ if k.startswith("SACF_")]:
        monkeypatch.delenv(key)


def write_config(tmp_path, payload) -> str:
    path = tmp_path / "run.json"
    path.write_text(json.dumps(payload))
    return str(path)


def test_defaults():
    cfg = load_run_config()
    assert cfg.tau is None
    assert cfg.modes == list(EvalMode)
    assert cfg.paths.model_file("gate").as_posix() == "runs/models/gate.json"
    assert cfg.gen.seed == cfg.expert.seed == cfg.gate.seed == 0


def test_environment_sets_values(monkeypatch):
    monkeypatch.setenv("SACF_SEED", "11")
    monkeypatch.setenv("SACF_GEN__N_FRAMES", "50")
    cfg = RunConfig()
    assert cfg.seed == 11
    assert cfg.gen.n_frames == 50
    assert cfg.gen.seed == 11


def test_config_file_beats_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("SACF_TAU", "0.9")
    cfg = load_run_config(write_config(tmp_path, {"tau": 0.3}))
    assert cfg.tau == 0.3


def test_flags_beat_config_file(tmp_path):
    path = write_config(tmp_path, {"seed": 4, "gen": {"n_frames": 20}})
    cfg = load_run_config(path, {"seed": 9, "threads": None, "gen": {"n_frames": 30}})
    assert cfg.seed == 9
    assert cfg.threads == 1
    assert cfg.gen.n_frames == 30


def test_explicit_sub_seed_is_kept(tmp_path):
    cfg = load_run_config(write_config(tmp_path, {"seed": 3, "gate": {"seed": 8}}))
    assert cfg.gate.seed == 8
    assert cfg.expert.seed == 3


def test_invalid_values_report_location(tmp_path):
    with pytest.raises(InputError, match="gen.n_frames"):
        load_run_config(write_config(tmp_path, {"gen": {"n_frames": 0}}))
    with pytest.raises(InputError, match="tau"):
        load_run_config(overrides={"tau": 1.5})
    with pytest.raises(InputError):
        load_run_config(write_config(tmp_path, {"unknown": 1}))


def test_bad_config_files(tmp_path):
    with pytest.raises(MissingArtifactError):
        load_run_config(tmp_path / "absent.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(InputError, match="invalid JSON"):
        load_run_config(tmp_path / "bad.json")
    (tmp_path / "list.json").write_text("[1, 2]")
    with pytest.raises(InputError, match="JSON object"):
        load_run_config(tmp_path / "list.json")


def test_deep_merge_keeps_siblings():
    merged = deep_merge({"gen": {"n_frames": 5, "seed": 1}, "tau": 0.5}, {"gen": {"seed": 2}})
    assert merged == {"gen": {"n_frames": 5, "seed": 2}, "tau": 0.5}
