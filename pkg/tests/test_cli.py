import json
import subprocess
import sys

import pytest

from tokenreg.cli import build_parser, main
from tokenreg.config import ConfigFileError, RunConfig, load_config, parse_config
from tokenreg.evalkit import EvalReport
from tokenreg.trainer import read_trace
from tokenreg.volume import DisplacementField, VolumeGeometry, read_volume, write_volume

SMALL_TOML = """
[model]
dims = [16, 16, 16]
base_channels = 2
d_model = 32
heads = 2
stack_depth = 1
cascade_steps = 2

[train]
steps = 4
lr = 0.001
deterministic = true

[loss]
lam = 0.02
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "run.toml").write_text(SMALL_TOML)
    code = main(["gen-data", "--out", str(root / "data"), "--size", "16,16,16", "--count", "2", "--seed", "7",
                 "--max-disp", "2", "--smooth", "3"])
    assert code == 0
    return root


def test_config_parsing_and_overrides(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text(SMALL_TOML)
    cfg = load_config(path)
    assert cfg.model.d_model == 32 and cfg.model.dims == (16, 16, 16)
    assert cfg.train.lam == 0.02 == cfg.loss.lam
    assert cfg.with_overrides("train", steps=9).train.steps == 9
    assert parse_config({}) == RunConfig()
    assert load_config(_write(tmp_path, cfg.to_toml())) == cfg


def _write(tmp_path, text):
    path = tmp_path / "x.toml"
    path.write_text(text)
    return path


@pytest.mark.parametrize(
    "doc, where",
    [
        ({"model": {"depth": 3}}, "model.depth: unknown key"),
        ({"extras": {}}, "extras: unknown section"),
        ({"train": {"lam": 0.1}}, "train.lam: unknown key"),
        ({"train": {"lr": "fast"}}, "train.lr: expected a number"),
        ({"train": {"lr": -1.0}}, "train.lr:"),
        ({"model": {"dims": [32, 32]}}, "model.dims: expected three integers"),
        ({"model": {"dims": [32, 32, 12]}}, "model.dims:"),
        ({"synth": {"max_disp": 9.0}}, "synth.max_disp:"),
        ({"model": {"causal_mask": 1}}, "model.causal_mask: expected a boolean"),
    ],
)
def test_config_errors_name_the_field(doc, where):
    with pytest.raises(ConfigFileError) as info:
        parse_config(doc)
    assert str(info.value).startswith(where)


def test_help_documents_flags(capsys):
    for cmd, flags in {
        "gen-data": ["--out", "--size", "--count", "--seed", "--max-disp", "--smooth"],
        "train": ["--config", "--data", "--out", "--phase", "--resume"],
        "register": ["--ckpt", "--moving", "--fixed", "--out-field", "--out-warped"],
        "evaluate": ["--field", "--moving-seg", "--fixed-seg", "--report"],
        "gradcheck": ["--eps", "--tol", "--seed"],
    }.items():
        assert main([cmd, "--help"]) == 0
        text = capsys.readouterr().out
        assert all(flag in text for flag in flags)


def test_unknown_flag_exits_2():
    assert main(["gen-data", "--out", "x", "--bogus"]) == 2
    assert main(["nonsense"]) == 2


def test_gen_data_bad_size(tmp_path, capsys):
    code = main(["gen-data", "--out", str(tmp_path / "d"), "--size", "30,32,32", "--count", "1", "--seed", "7"])
    assert code == 2
    assert "divisible by 8" in capsys.readouterr().err


def test_gen_data_counts_and_repeatability(tmp_path):
    args = ["gen-data", "--size", "16,16,16", "--count", "2", "--seed", "7", "--max-disp", "2", "--smooth", "3"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert len(files) == 11
    assert all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)


def test_pipeline(workspace, capsys):
    root = workspace
    ckpt = root / "m.ckpt"
    assert main(["train", "--config", str(root / "run.toml"), "--data", str(root / "data"), "--out", str(ckpt)]) == 0
    out = capsys.readouterr().out
    assert "[model]" in out and "lam = 0.02" in out  # effective config echoed
    trace = read_trace(str(ckpt) + ".trace")
    assert [r.step for r in trace] == [0, 1, 2, 3]

    field = root / "phi.vol"
    warped = root / "warped.vol"
    data = root / "data"
    assert main(["register", "--ckpt", str(ckpt), "--moving", str(data / "pair0_moving.vol"),
                 "--fixed", str(data / "pair0_fixed.vol"), "--out-field", str(field),
                 "--out-warped", str(warped)]) == 0
    assert read_volume(field, DisplacementField).geometry.dims == (16, 16, 16)
    assert warped.exists()

    report = root / "report.json"
    assert main(["evaluate", "--field", str(field), "--moving-seg", str(data / "pair0_movingseg.vol"),
                 "--fixed-seg", str(data / "pair0_fixedseg.vol"), "--report", str(report)]) == 0
    EvalReport.from_json(report.read_text())


def test_resume_starts_at_saved_step(workspace):
    root = workspace
    base = ["train", "--config", str(root / "run.toml"), "--data", str(root / "data")]
    assert main(base + ["--out", str(root / "r.ckpt"), "--steps", "2"]) == 0
    assert main(base + ["--out", str(root / "r2.ckpt"), "--steps", "2", "--resume", str(root / "r.ckpt")]) == 0
    assert read_trace(str(root / "r2.ckpt") + ".trace")[0].step == 2


def test_cascade_phase_ordering(workspace):
    root = workspace
    base = ["train", "--config", str(root / "run.toml"), "--data", str(root / "data")]
    assert main(base + ["--out", str(root / "c2.ckpt"), "--phase", "cascade_step_2"]) == 2
    assert main(base + ["--out", str(root / "c1.ckpt"), "--phase", "cascade_step_1"]) == 0
    assert main(base + ["--out", str(root / "c2.ckpt"), "--phase", "cascade_step_2",
                        "--init", str(root / "c1.ckpt")]) == 0


def test_evaluate_ground_truth_and_identity(workspace, capsys):
    data = workspace / "data"
    assert main(["evaluate", "--field", str(data / "pair1_gtfield.vol"), "--moving-seg",
                 str(data / "pair1_movingseg.vol"), "--fixed-seg", str(data / "pair1_fixedseg.vol")]) == 0
    assert json.loads(capsys.readouterr().out)["mean_dice"] >= 0.95
    zero = workspace / "zero.vol"
    write_volume(DisplacementField.zeros(VolumeGeometry((16, 16, 16))), zero)
    seg = str(data / "pair1_fixedseg.vol")
    assert main(["evaluate", "--field", str(zero), "--moving-seg", seg, "--fixed-seg", seg]) == 0
    assert json.loads(capsys.readouterr().out)["mean_dice"] == 1.0


def test_usage_failures(workspace, tmp_path):
    data = workspace / "data"
    assert main(["register", "--ckpt", str(tmp_path / "missing.ckpt"), "--moving", str(data / "pair0_moving.vol"),
                 "--fixed", str(data / "pair0_fixed.vol"), "--out-field", str(tmp_path / "f.vol")]) == 2
    other = tmp_path / "other"
    assert main(["gen-data", "--out", str(other), "--size", "8,8,8", "--count", "1", "--seed", "1",
                 "--max-disp", "1", "--smooth", "2"]) == 0
    assert main(["evaluate", "--field", str(data / "pair0_gtfield.vol"), "--moving-seg",
                 str(other / "pair0_movingseg.vol"), "--fixed-seg", str(data / "pair0_fixedseg.vol")]) == 2
    assert main(["train", "--config", str(workspace / "run.toml"), "--data", str(data), "--out",
                 str(tmp_path / "m.ckpt")]) == 0
    assert main(["register", "--ckpt", str(tmp_path / "m.ckpt"), "--moving", str(other / "pair0_moving.vol"),
                 "--fixed", str(other / "pair0_fixed.vol"), "--out-field", str(tmp_path / "f.vol")]) == 2


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--trials", "2", "--seed", "1"]) == 0
    first = capsys.readouterr().out
    assert main(["gradcheck", "--trials", "2", "--seed", "1"]) == 0
    assert capsys.readouterr().out == first
    assert main(["gradcheck", "--trials", "1", "--tol", "1e-12"]) == 1


def test_env_threads(monkeypatch):
    monkeypatch.setenv("REG_THREADS", "zero")
    assert main(["inspect"]) == 2


def test_inspect_lists_stages(capsys):
    assert main(["inspect"]) == 0
    out = capsys.readouterr().out
    assert "S4.field\t(3, 32, 32, 32)" in out and "tokens\t(64, 256)" in out


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "tokenreg.cli", "gradcheck", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "--tol" in proc.stdout
    assert build_parser().prog == "tokenreg"
