import json
import subprocess
import sys

import numpy as np
import pytest

from tp3m import cli
from tp3m import synthgen as sg
from tp3m.config import ConfigError, build_config, flat_items, read_config_file
from tp3m.match2d import read_matches

TINY = ["--set", "model.d1=4", "--set", "model.d2=8", "--set", "model.d3=8", "--set", "train.edge_steps=1"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    root = tmp_path_factory.mktemp("chain")
    assert run("synth", "--out", root / "data", "--count", 2, "--seed", 1, "--set", "synth.height=32",
               "--set", "synth.width=32") == 0
    assert run("train", "--data", root / "data", "--ckpt", root / "run" / "model.ckpt", "--epochs", 1, *TINY) == 0
    return root


# config ------------------------------------------------------------------------

def test_config_precedence(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("# comment\ncascade.theta3 = 0.3\ntrain.lr=0.01\n")
    cfg = build_config(read_config_file(f), {"train.lr": "0.5"})
    assert cfg.cascade.theta3 == 0.3 and cfg.train.lr == 0.5
    assert build_config().cascade.theta3 == 0.2


def test_config_unknown_and_invalid():
    with pytest.raises(ConfigError, match="unknown"):
        build_config(overrides={"cascade.nope": "1"})
    with pytest.raises(ConfigError):
        build_config(overrides={"cascade.n3": "many"})
    with pytest.raises(ConfigError):
        build_config(overrides={"window.window": "4"})


def test_help_lists_every_key(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["match", "--help"])
    assert e.value.code == 0
    out = capsys.readouterr().out
    for key, _ in flat_items():
        assert key in out


# synth -------------------------------------------------------------------------

def test_synth_deterministic_and_planar_meta(tmp_path):
    for name in ("a", "b"):
        assert run("synth", "--out", tmp_path / name, "--count", 1, "--seed", 1) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    meta = json.loads((tmp_path / "a" / "scene_0000" / "meta.json").read_text())
    assert meta["homography"] is not None
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert [e["id"] for e in manifest["samples"]] == ["scene_0000"]


def test_synth_invalid_spec(tmp_path, capsys):
    assert run("synth", "--out", tmp_path, "--count", 1, "--set", "synth.height=30") == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("tp3m: error:")


# train -------------------------------------------------------------------------

def test_train_missing_data_usage(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["train", "--ckpt", "x.ckpt"])
    assert e.value.code != 0
    assert "usage" in capsys.readouterr().err


def test_train_missing_dataset(tmp_path):
    assert run("train", "--data", tmp_path / "nope", "--ckpt", tmp_path / "m.ckpt") == 1


def test_train_outputs(chain):
    assert (chain / "run" / "model.ckpt").is_file()
    lines = (chain / "run" / "loss_curve.tsv").read_text().splitlines()
    assert len(lines) == 1 and len(lines[0].split("\t")) == 5


def test_train_resume_shape_mismatch(chain, tmp_path, capsys):
    code = run("train", "--data", chain / "data", "--ckpt", tmp_path / "m.ckpt", "--epochs", 2,
               "--resume", chain / "run" / "model.ckpt", "--set", "model.d1=8", "--set", "model.d2=8",
               "--set", "model.d3=8")
    assert code == 1
    assert "shape mismatch" in capsys.readouterr().err


def test_train_resume_continues(chain, tmp_path):
    full = tmp_path / "full"
    assert run("train", "--data", chain / "data", "--ckpt", full / "model.ckpt", "--epochs", 2, *TINY) == 0
    split = tmp_path / "split"
    assert run("train", "--data", chain / "data", "--ckpt", split / "model.ckpt", "--epochs", 1, *TINY) == 0
    assert run("train", "--data", chain / "data", "--ckpt", split / "model.ckpt", "--epochs", 2,
               "--resume", split / "model.ckpt", *TINY) == 0
    assert (full / "loss_curve.tsv").read_bytes() == (split / "loss_curve.tsv").read_bytes()


# match -------------------------------------------------------------------------

def test_match_self_identity_and_mode(chain, tmp_path):
    a = chain / "data" / "scene_0000" / "a.pgm"
    out = tmp_path / "self.tsv"
    assert run("match", "--src", a, "--dst", a, "--ckpt", chain / "run" / "model.ckpt", "--out", out) == 0
    ms = read_matches(out)
    assert ms.meta["mode"] == "2d-only"
    assert len(ms) > 0
    assert np.mean(np.linalg.norm(ms.src - ms.dst, axis=1) < 1.0) >= 0.95


def test_match_with_reference(chain, tmp_path):
    d = chain / "data" / "scene_0000"
    out = tmp_path / "m.tsv"
    assert run("match", "--src", d / "a.pgm", "--dst", d / "b.pgm", "--ref", d / "c.pgm",
               "--ckpt", chain / "run" / "model.ckpt", "--out", out) == 0
    assert read_matches(out).meta["mode"] in ("pseudo-3d", "pseudo-3d-fallback")


def test_match_rejects_bad_size(chain, tmp_path, capsys):
    img = tmp_path / "odd.pgm"
    sg.write_pgm(img, np.zeros((30, 32)))
    assert run("match", "--src", img, "--dst", img, "--ckpt", chain / "run" / "model.ckpt",
               "--out", tmp_path / "x.tsv") == 1
    assert "divisible by 8" in capsys.readouterr().err


def test_match_rejects_bad_checkpoint(chain, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    a = chain / "data" / "scene_0000" / "a.pgm"
    assert run("match", "--src", a, "--dst", a, "--ckpt", bad, "--out", tmp_path / "x.tsv") == 1


# eval --------------------------------------------------------------------------

def write_gt_matches(data, out):
    out.mkdir()
    for e in json.loads((data / "manifest.json").read_text())["samples"]:
        s = sg.load_sample(data / e["id"])
        lines = ["# tp3m-matches v1 status=ok"] + ["\t".join(repr(float(v)) for v in r) + "\t1.0\tcoarse"
                                                    for r in s.gt_ab]
        (out / f"{e['id']}.tsv").write_text("\n".join(lines) + "\n")


def test_eval_perfect_matches(chain, tmp_path):
    write_gt_matches(chain / "data", tmp_path / "m")
    assert run("eval", "--data", chain / "data", "--matches-dir", tmp_path / "m", "--task", "homography",
               "--out", tmp_path / "rep") == 0
    summary = json.loads((tmp_path / "rep" / "summary.json").read_text())["summary"]
    for k in ("auc@1px", "auc@3px", "auc@5px"):
        assert summary[k] == pytest.approx(1.0, abs=1e-6)


def test_eval_empty_match_file_is_failure(chain, tmp_path):
    write_gt_matches(chain / "data", tmp_path / "m")
    (tmp_path / "m" / "scene_0001.tsv").write_text("# tp3m-matches v1 status=failed_small_overlap\n")
    assert run("eval", "--data", chain / "data", "--matches-dir", tmp_path / "m", "--task", "homography",
               "--out", tmp_path / "rep") == 0
    report = (tmp_path / "rep" / "report.txt").read_text()
    assert "scene_0001\tcorner_error\tinf" in report


def test_eval_missing_files_listed(chain, tmp_path, capsys):
    (tmp_path / "m").mkdir()
    assert run("eval", "--data", chain / "data", "--matches-dir", tmp_path / "m", "--task", "pose",
               "--out", tmp_path / "rep") == 1
    err = capsys.readouterr().err
    assert "scene_0000" in err and "scene_0001" in err


def test_eval_rerun_identical(chain, tmp_path):
    assert run("match", "--data", chain / "data", "--ckpt", chain / "run" / "model.ckpt",
               "--out-dir", tmp_path / "m") == 0
    for name in ("r1", "r2"):
        assert run("eval", "--data", chain / "data", "--matches-dir", tmp_path / "m", "--task", "homography",
                   "--out", tmp_path / name) == 0
    for f in ("report.txt", "summary.json"):
        assert (tmp_path / "r1" / f).read_bytes() == (tmp_path / "r2" / f).read_bytes()


# extract -----------------------------------------------------------------------

def test_extract_edge_and_attention(chain, tmp_path):
    d = chain / "data" / "scene_0000"
    assert run("extract", "--image", d / "a.pgm", "--ckpt", chain / "run" / "model.ckpt", "--out", tmp_path,
               "--pair", d / "b.pgm", "--attention", "self3:1", "--attention", "cross3_ab") == 0
    edge = sg.read_pgm(tmp_path / "edge.pgm")
    assert edge.shape == (32, 32)
    assert (tmp_path / "attn_self3_h1.bin").is_file() and (tmp_path / "attn_cross3_ab_h0.bin").is_file()
    assert run("extract", "--image", d / "a.pgm", "--ckpt", chain / "run" / "model.ckpt", "--out", tmp_path,
               "--attention", "nope") == 1


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "tp3m.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "synth" in r.stdout
