import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from resdistill import cli, nn
from resdistill import tensor as T

TINY_CONFIG = """\
model.channels = 4, 8
model.embed_dim = 8
data.num_ids = 4
data.per_id = 6
data.base_res = 16
data.eval_num_ids = 6
data.eval_per_id = 3
train.batch_size = 8
train.teacher_resolution = 16
train.student_resolution = 8
train.epochs = 1
ladder.resolutions = 16, 8
ladder.regimes = scratch, kt
ladder.teacher_epochs = 1
ladder.epochs_scratch = 1
ladder.epochs_kt = 2
eval.num_gallery_ids = 3
"""


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY_CONFIG)
    return p


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_train_teacher_then_student_then_evaluate(tmp_path, config, capsys):
    out = tmp_path / "t"
    code, stdout, _ = run(capsys, "train-teacher", "--config", config, "--output", out)
    assert code == 0 and "teacher_16.rdt" in stdout
    ckpt = out / "teacher_16.rdt"
    assert ckpt.read_bytes()[:4] == b"RDT1"
    assert (out / "teacher_16_log.csv").read_text().splitlines()[1].endswith(",NA")

    sdir = tmp_path / "s"
    code, _, _ = run(capsys, "train-student", "--config", config, "--output", sdir, "--teacher", ckpt)
    assert code == 0
    assert (sdir / "kd_kt_8.rdt").exists()

    edir = tmp_path / "e"
    code, stdout, _ = run(capsys, "evaluate", "--config", config, "--output", edir,
                          "--checkpoint", sdir / "kd_kt_8.rdt", "--resolution", 8)
    assert code == 0
    assert stdout.startswith("protocol,resolution,regime,target,threshold,value")
    for name in ("metrics.csv", "kd_kt_8_det.csv", "kd_kt_8_openset.csv", "kd_kt_8_cmc.csv",
                 "det.svg", "cmc.svg"):
        assert (edir / name).exists(), name
    assert (edir / "kd_kt_8_det.csv").read_text().startswith("far,tar\n")
    assert (edir / "kd_kt_8_openset.csv").read_text().startswith("fpir,tpir\n")
    assert (edir / "kd_kt_8_cmc.csv").read_text().startswith("rank,rate\n1,")

    first = (edir / "metrics.csv").read_bytes()
    code, _, _ = run(capsys, "evaluate", "--config", config, "--output", edir, "--force",
                     "--checkpoint", sdir / "kd_kt_8.rdt", "--resolution", 8)
    assert code == 0 and (edir / "metrics.csv").read_bytes() == first

    code, _, _ = run(capsys, "extract", "--config", config, "--output", tmp_path / "x",
                     "--checkpoint", ckpt)
    lines = (tmp_path / "x" / "embeddings_16.csv").read_text().splitlines()
    assert lines[0] == "index,identity," + ",".join(f"e{i}" for i in range(8))
    assert len(lines) == 1 + 6 * 3


def test_ladder_outputs_and_determinism(tmp_path, config, capsys):
    outputs = []
    for name in ("a", "b"):
        code, _, _ = run(capsys, "ladder", "--config", config, "--output", tmp_path / name)
        assert code == 0
        outputs.append(tmp_path / name)
    a, b = outputs
    csvs = sorted(p.relative_to(a) for p in a.rglob("*.csv"))
    assert Path("table1.csv") in csvs and Path("table7.csv") in csvs and Path("cost.csv") in csvs
    assert Path("seed0/curves/kt_8_det.csv") in csvs
    for rel in csvs:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
    for name in ("teacher_16", "scratch_8", "kt_8"):
        assert (a / "seed0" / f"{name}.rdt").read_bytes() == (b / "seed0" / f"{name}.rdt").read_bytes()
    assert len((a / "seed0" / "kt_8_log.csv").read_text().splitlines()) == 3
    table1 = (a / "table1.csv").read_text().splitlines()
    assert {line.split(",")[2] for line in table1[1:]} == {"teacher", "scratch", "kt"}
    assert all(line.startswith("open_set_dir,") for line in table1[1:])
    assert "open_set_dir" not in (a / "table7.csv").read_text()
    cost_lines = (a / "cost.csv").read_text().splitlines()
    assert [line.split(",")[0] for line in cost_lines[1:]] == ["16", "8"]
    assert all(line.endswith(",NA") for line in cost_lines[1:])
    assert (a / "det.svg").read_text().startswith("<svg")

    # report rebuilds the same tables from the seed directories
    before = (a / "table1.csv").read_bytes()
    code, _, _ = run(capsys, "report", "--config", config, "--output", a)
    assert code == 0 and (a / "table1.csv").read_bytes() == before


def test_lock_requires_force(tmp_path, config, capsys):
    out = tmp_path / "c"
    assert run(capsys, "cost", "--config", config, "--output", out, "--repeats", 3)[0] == 0
    code, _, err = run(capsys, "cost", "--config", config, "--output", out)
    assert code == 2
    assert err.startswith("resdistill: error: occupied: ") and err.count("\n") == 1
    assert run(capsys, "cost", "--config", config, "--output", out, "--force", "--repeats", 3)[0] == 0
    assert (out / "run.lock").read_text().split() == ["cost"]


def test_different_config_is_refused(tmp_path, config, capsys):
    out = tmp_path / "c"
    assert run(capsys, "cost", "--config", config, "--output", out, "--repeats", 3)[0] == 0
    code, _, err = run(capsys, "gradcheck", "--config", config, "--output", out, "--seed", 4)
    assert code == 2 and "different config" in err


def test_config_error_line(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("train.alpha = -1\n")
    code, _, err = run(capsys, "cost", "--config", bad, "--output", tmp_path / "o")
    assert code == 2
    assert err.startswith("resdistill: error: config: ") and "bad.cfg:1" in err
    assert not (tmp_path / "o").exists()


def test_bad_checkpoint_errors(tmp_path, config, capsys):
    junk = tmp_path / "junk.rdt"
    junk.write_bytes(b"NOPE" + bytes(8))
    code, _, err = run(capsys, "evaluate", "--config", config, "--output", tmp_path / "o",
                       "--checkpoint", junk)
    assert code == 2 and err.startswith("resdistill: error: checkpoint: ")

    other = nn.build(nn.ModelConfig.from_lists([4, 6], embed_dim=8), 4, seed=0)
    path = tmp_path / "other.rdt"
    nn.save(other, path)
    code, _, err = run(capsys, "evaluate", "--config", config, "--output", tmp_path / "o2",
                       "--checkpoint", path)
    assert code == 2 and "error: shape" in err


def test_missing_manifest(tmp_path, capsys):
    cfgp = tmp_path / "m.cfg"
    cfgp.write_text(f"data.source = manifest\ndata.manifest = {tmp_path / 'nope.csv'}\n")
    code, _, err = run(capsys, "train-teacher", "--config", cfgp, "--output", tmp_path / "o")
    assert code == 2 and err.startswith("resdistill: error: data: ")


def test_gradcheck_command(tmp_path, capsys):
    code, stdout, _ = run(capsys, "gradcheck", "--output", tmp_path / "g")
    assert code == 0
    assert "network_combined" in stdout and "FAIL" not in stdout
    rows = (tmp_path / "g" / "gradcheck.csv").read_text().splitlines()
    assert rows[0] == "case,max_rel_error" and len(rows) == 17


def test_gradcheck_failure_exit_code(tmp_path, capsys, monkeypatch):
    monkeypatch.setattr(cli.gradsuite, "run", lambda seed=0: {"conv2d": 1e-7, "relu": 0.5})
    code, stdout, err = run(capsys, "gradcheck", "--output", tmp_path / "g")
    assert code == 1 and "relu" in err and "FAIL" in stdout


def test_atomic_write_leaves_no_partial_file(tmp_path):
    target = tmp_path / "x.csv"
    target.write_text("old\n")

    class Boom:
        def encode(self):
            raise RuntimeError("boom")

    with pytest.raises(Exception):
        cli.write_atomic(target, Boom())
    assert target.read_text() == "old\n"
    assert [p.name for p in tmp_path.iterdir()] == ["x.csv"]


def test_console_script_runs(tmp_path, config):
    env = dict(os.environ, RD_LOG="quiet")
    proc = subprocess.run([sys.executable, "-m", "resdistill.cli", "cost", "--config", str(config),
                           "--output", str(tmp_path / "c"), "--repeats", "3"],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.startswith("resolution,macc,param_bytes,activation_bytes,wall_ms\n16,")
    bad = subprocess.run([sys.executable, "-m", "resdistill.cli", "cost", "--output", str(tmp_path / "d")],
                         capture_output=True, text=True, env=dict(os.environ, RD_LOG="loud"))
    assert bad.returncode == 2 and bad.stderr.startswith("resdistill: error: config: RD_LOG")
