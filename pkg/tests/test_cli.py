import os
import re
import shutil
import time

import numpy as np
import pytest

from aco import cli
from aco import formats as fm
from aco.config import Config, load
from aco.pretrain import init_params

TINY = """\
# small enough for a few seconds per stage
inverse_episodes = 4
corpus_episodes = 4
bc_episodes = 10
episode_length = 12
inverse_epochs = 2
epochs = 1
batch_size = 16
sample_size = 16
dict_capacity = 64
bc_epochs = 2
probe_epochs = 2
eval_frames = 9
"""

ERROR_LINE = re.compile(r"^error code=[a-z_]+ detail=[^\n]*$")
METRIC_LINE = re.compile(r"^step=\d+ key=\S+ value=\S+$")


def run(*argv) -> int:
    return cli.main([str(a) for a in argv])


def error_code(capsys) -> str:
    err = capsys.readouterr().err.strip()
    assert ERROR_LINE.match(err), err
    return err.split()[1].split("=", 1)[1]


@pytest.fixture(scope="module")
def tiny_cfg(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.txt"
    p.write_text(TINY)
    return p


@pytest.fixture(scope="module")
def labelled_run(tmp_path_factory, tiny_cfg):
    out = tmp_path_factory.mktemp("run")
    for stage in ("gen-data", "train-inverse", "label"):
        assert run(stage, "--config", tiny_cfg, "--out", out) == 0
    return out


def copy_run(src, dst):
    shutil.copytree(src, dst)
    return dst


def test_metrics_lines_well_formed(labelled_run):
    lines = (labelled_run / "metrics.txt").read_text().splitlines()
    assert lines and all(METRIC_LINE.match(l) for l in lines)
    assert any("train-inverse.flow.test_l1" in l for l in lines)


def test_pseudo_labels_pair_with_frames(labelled_run):
    pack = fm.read_frames(labelled_run / "corpus.acof")
    lab = fm.read_labels(labelled_run / "corpus_pseudo.acol")
    assert lab.episode_ids.tolist() == pack.episode_ids.tolist()
    assert lab.time_index.tolist() == pack.time_index.tolist()
    assert set(lab.sources.tolist()) == {fm.PSEUDO}


def test_pretrain_none_holds_initial_tensors(labelled_run, tmp_path):
    out = copy_run(labelled_run, tmp_path / "r")
    assert run("pretrain", "--mode", "none", "--seed", 5, "--out", out) == 0
    ck = fm.read_checkpoint(out / "pretrain_none_s5.acow")
    want = init_params(load(out / "config.txt"), 5, "none")
    assert list(ck.tensors) == list(want)
    for k, t in want.items():
        np.testing.assert_array_equal(ck.tensors[k], t.data.astype(np.float32))
    assert ck.provenance["mode"] == "none" and ck.provenance["seed"] == 5


def test_corrupted_magic(labelled_run, tmp_path, capsys):
    out = copy_run(labelled_run, tmp_path / "r")
    raw = (out / "corpus.acof").read_bytes()
    (out / "corpus.acof").write_bytes(b"JUNK" + raw[4:])
    assert run("pretrain", "--mode", "aco", "--out", out) != 0
    assert error_code(capsys) == "bad_magic"


def test_bad_version_in_checkpoint(labelled_run, tmp_path, capsys):
    out = copy_run(labelled_run, tmp_path / "r")
    raw = bytearray((out / "inverse.acow").read_bytes())
    raw[4] = 9
    (out / "inverse.acow").write_bytes(bytes(raw))
    assert run("label", "--out", out) != 0
    assert error_code(capsys) == "bad_version"


def test_missing_input(tmp_path, capsys):
    assert run("train-inverse", "--out", tmp_path / "empty") != 0
    assert error_code(capsys) == "missing_input"
    assert run("pretrain", "--config", tmp_path / "nope.txt", "--out", tmp_path / "x") != 0
    assert error_code(capsys) == "missing_input"


def test_unknown_config_key(tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text("epsilonn = 0.1\n")
    assert run("gen-data", "--config", bad, "--out", tmp_path / "r") != 0
    assert error_code(capsys) == "unknown_key"


@pytest.mark.parametrize("key, value", [("epsilon", 0.1), ("kappa_max", 1.0)])
def test_coupled_key_drift_refused(labelled_run, tmp_path, capsys, key, value):
    out = copy_run(labelled_run, tmp_path / "r")
    drift = tmp_path / "drift.txt"
    drift.write_text(f"{key} = {value}\n")
    for stage in (["label"], ["pretrain", "--mode", "aco"], ["bc"]):
        assert run(*stage, "--config", drift, "--out", out) != 0
        assert error_code(capsys) == "config_mismatch"


def test_foreign_checkpoint_refused(labelled_run, tmp_path, tiny_cfg, capsys):
    # a second run with a different action threshold; its predictor must not
    # label this run's corpus
    other = tmp_path / "other"
    cfg = tmp_path / "other.txt"
    cfg.write_text(TINY + "epsilon = 0.1\n")
    assert run("gen-data", "--config", cfg, "--out", other) == 0
    assert run("train-inverse", "--out", other) == 0
    out = copy_run(labelled_run, tmp_path / "r")
    shutil.copy(other / "inverse.acow", out / "inverse.acow")
    assert run("label", "--out", out) != 0
    assert error_code(capsys) == "config_mismatch"


def test_uncoupled_override_allowed(labelled_run, tmp_path):
    out = copy_run(labelled_run, tmp_path / "r")
    tweak = tmp_path / "tweak.txt"
    tweak.write_text("bc_epochs = 1\n")
    assert run("pretrain", "--mode", "none", "--out", out) == 0
    assert run("bc", "--fractions", "1", "--config", tweak, "--out", out) == 0


def test_seed_must_fit_u64(tmp_path, capsys):
    assert run("gen-data", "--seed", 2**64, "--out", tmp_path) != 0
    assert error_code(capsys) == "usage"


def test_full_pipeline_and_report(labelled_run, tmp_path, capsys):
    out = copy_run(labelled_run, tmp_path / "r")
    for seed in (0, 1, 2):
        assert run("pretrain", "--mode", "aco", "--seed", seed, "--out", out) == 0
        assert run("pretrain", "--mode", "none", "--seed", seed, "--out", out) == 0
        assert run("bc", "--fractions", "0.5,1", "--seed", seed, "--out", out) == 0
    assert run("probe", "--out", out) == 0
    assert run("embed", "--out", out) == 0
    capsys.readouterr()
    assert run("report", "--out", out) == 0
    text = capsys.readouterr().out
    assert text == (out / "report.txt").read_text()
    # same table again: stable ordering
    assert run("report", "--out", out) == 0
    assert capsys.readouterr().out == text
    block = text.split("# bc success_rate\n")[1].split("\n\n")[0].splitlines()
    assert block[0] == "mode\t0.5\t1"
    assert [l.split("\t")[0] for l in block[1:]] == ["aco", "none"]
    # population std over the three seeds
    rows = [r for r in cli._read_results(out / "results.tsv")
            if r[:3] == ("bc", "aco", "1") and r[4] == "mae"]
    vals = [float(r[5]) for r in rows]
    assert len(vals) == 3
    cell = [l for l in text.split("# bc mae\n")[1].splitlines() if l.startswith("aco")][0]
    assert cell.split("\t")[2] == f"{np.mean(vals):.4f}±{np.std(vals, ddof=0):.4f}"
    emb = (out / "embed_aco_s0.tsv").read_text().splitlines()
    assert emb[0] == "pc1\tpc2\taction\tbucket" and len(emb) == 1 + 9


def test_report_single_run_has_zero_std():
    text = cli.render_report([("bc", "aco", "0.1", "0", "success_rate", "0.5")])
    assert text.splitlines()[1:3] == ["mode\t0.1", "aco\t0.5000±0.0000"]


def test_report_without_runs(tmp_path, capsys):
    assert run("report", "--out", tmp_path) != 0
    assert error_code(capsys) == "no_runs"


def test_gradcheck_command(tmp_path):
    assert run("gradcheck", "--points", 3, "--out", tmp_path) == 0
    lines = (tmp_path / "metrics.txt").read_text().splitlines()
    assert all(METRIC_LINE.match(l) and "gradcheck." in l for l in lines)
    assert all(float(l.rsplit("=", 1)[1]) < 1e-4 for l in lines)


def test_config_file_round_trip(tmp_path):
    cfg = Config().with_(epsilon=0.07, loss_form="infonce", enable_crop_flip=True)
    p = tmp_path / "c.txt"
    p.write_text(cfg.render())
    assert load(p) == cfg


def test_identical_runs_are_byte_identical(tmp_path, tiny_cfg):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        for stage in (["gen-data"], ["train-inverse"], ["label"], ["pretrain", "--mode", "aco"],
                      ["bc", "--fractions", "1"]):
            assert run(*stage, "--config", tiny_cfg, "--seed", 3, "--out", out) == 0
        outs.append(out)
    names = sorted(os.listdir(outs[0]))
    assert names == sorted(os.listdir(outs[1]))
    for n in names:
        assert (outs[0] / n).read_bytes() == (outs[1] / n).read_bytes(), n


def test_desk_profile_pipeline_completes(tmp_path):
    out = tmp_path / "desk"
    t0 = time.perf_counter()
    for stage in (["gen-data"], ["train-inverse"], ["label"], ["pretrain", "--mode", "aco"], ["bc"]):
        assert run(*stage, "--out", out) == 0
    assert time.perf_counter() - t0 < 1800
    assert load(out / "config.txt") == Config()
    rows = cli._read_results(out / "results.tsv")
    assert {r[2] for r in rows if r[0] == "bc"} == {"0.1", "0.2", "0.4", "1"}
