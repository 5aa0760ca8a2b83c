import os
import subprocess
import sys

import numpy as np
import pytest

from sfpp.cli import build_parser, error_line, main
from sfpp.config import (ConfigError, RunConfig, dump_config, keys, load_config, parse_config_text)
from sfpp.evaluation import read_summary
from sfpp.synth import load_sequence
from sfpp.tracker import ModelPredictor, PostprocConfig, track_sequence, write_results_csv
from sfpp.train import load_checkpoint, model_from_checkpoint

TINY_INI = """\
# tiny desk world for fast end-to-end runs
[run]
train_sequences = 3
test_sequences = 2
sequence_length = 6

[model]
template_size = 32
search_size = 64
backbone_channels = 4, 4, 8, 8
head_channels = 8
head_tower_depth = 1

[world]
frame_size = 128
min_size = 20
max_size = 40

[train]
total_epochs = 2
warmup_epochs = 1
pairs_per_epoch = 8
batch_size = 4
"""


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ini = root / "tiny.ini"
    ini.write_text(TINY_INI)
    assert main(["synth", "--config", str(ini), "--out", str(root / "train")]) == 0
    assert main(["synth", "--config", str(ini), "--out", str(root / "test"), "--split", "test"]) == 0
    assert main(["train", "--config", str(ini), "--out", str(root / "ckpt" / "model.sfpp"),
                 "--data", str(root / "train")]) == 0
    return root, ini


def _err(capsys):
    return capsys.readouterr().err.strip().splitlines()[-1]


# ------------------------------------------------------------------ config

def test_defaults_and_roundtrip():
    cfg = RunConfig()
    assert cfg.postproc.penalty_k == 0.04 and cfg.run.seed == 0
    back = parse_config_text(dump_config(cfg))
    assert keys(back) == keys(cfg)


def test_unknown_key_reports_line():
    with pytest.raises(ConfigError) as err:
        parse_config_text("[model]\n\n# comment\nsearch_size = 128\nbogus = 3\n")
    assert err.value.line == 5 and "bogus" in str(err.value)
    with pytest.raises(ConfigError) as err:
        parse_config_text("[nosuch]\n")
    assert err.value.line == 1
    with pytest.raises(ConfigError) as err:
        parse_config_text("[train]\nseed = 4\n")  # driven by run.seed
    assert err.value.line == 2


def test_bad_values_rejected():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config_text("[train]\nbase_lr = fast\n")
    with pytest.raises(ConfigError):
        parse_config_text("[run]\nseed\n")
    with pytest.raises(ValueError):
        load_config(None, {"postproc.window_influence": "2"}, env={})


def test_override_precedence(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[run]\nseed = 3\n[postproc]\npenalty_k = 0.5\n")
    cfg = load_config(str(ini), {"postproc.penalty_k": "0.1"}, env={})
    assert cfg.run.seed == 3 and cfg.postproc.penalty_k == 0.1
    cfg = load_config(str(ini), {"run.seed": "4"}, env={"SFPP_SEED": "9"})
    assert cfg.run.seed == 9
    assert cfg.resolved().train.seed == 9


def test_help_lists_every_key(capsys):
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices
    assert set(sub) == {"synth", "train", "track", "eval", "gradcheck", "ablate"}
    for name, sp in sub.items():
        text = sp.format_help()
        for sec, key, val in keys(RunConfig()):
            assert f"--{sec}.{key}" in text, (name, sec, key)
        assert "(default: 0.04)" in text


def test_module_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "sfpp", "track", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "--postproc.window_influence" in out.stdout


# -------------------------------------------------------------- exit codes

def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as err:
        main(["track"])
    assert err.value.code == 2


def test_bad_config_exit_code(tmp_path, capsys):
    ini = tmp_path / "bad.ini"
    ini.write_text("[model]\nwidth = 3\n")
    assert main(["gradcheck", "--config", str(ini)]) == 3
    line = _err(capsys)
    assert line.startswith("sfpp-error category=bad_config exit=3 ") and "line 2" in line


def test_missing_file_exit_code(tmp_path, capsys):
    assert main(["track", "--checkpoint", str(tmp_path / "nope"), "--sequences", str(tmp_path),
                 "--out", str(tmp_path / "o")]) == 4
    assert "category=missing_file" in _err(capsys)
    assert main(["gradcheck", "--config", str(tmp_path / "none.ini")]) == 4


def test_bad_checkpoint_exit_code(tiny, tmp_path, capsys):
    root, ini = tiny
    bad = tmp_path / "bad.sfpp"
    bad.write_bytes(b"NOPE" + bytes(20))
    assert main(["track", "--config", str(ini), "--checkpoint", str(bad), "--sequences", str(root / "test"),
                 "--out", str(tmp_path / "o")]) == 6
    line = _err(capsys)
    assert "category=bad_checkpoint" in line and "bad magic" in line


def test_diverged_exit_code(tiny, tmp_path, capsys):
    root, ini = tiny
    code = main(["train", "--config", str(ini), "--out", str(tmp_path / "m.sfpp"), "--data", str(root / "train"),
                 "--train.base_lr", "1e9", "--train.warmup_epochs", "0", "--train.warmup_start_lr", "1e9"])
    assert code == 5
    line = _err(capsys)
    assert "category=diverged" in line and "diverged_step" in line


def test_error_line_is_single_line():
    line = error_line("bad_input", 6, 'two\nlines "quoted"')
    assert "\n" not in line and line == "sfpp-error category=bad_input exit=6 message=\"two lines 'quoted'\""


# ------------------------------------------------------------- end to end

def test_synth_outputs(tiny):
    root, _ = tiny
    assert sorted(os.listdir(root / "train")) == ["resolved_config.ini", "scale_ratio_stats.csv",
                                                  "seq_000", "seq_001", "seq_002"]
    seq = load_sequence(str(root / "train" / "seq_000"))
    assert len(seq) == 6 and seq.frames[0].shape == (3, 128, 128)
    resolved = (root / "train" / "resolved_config.ini").read_text()
    assert "template_size = 32" in resolved and "sequence_length = 6" in resolved


def test_train_outputs(tiny):
    root, _ = tiny
    ck = load_checkpoint(str(root / "ckpt" / "model.sfpp"))
    assert ck.step == 4 and ck.config["model"]["search_size"] == 64
    log = (root / "ckpt" / "loss_log.csv").read_text().splitlines()
    assert log[0] == "step,lr,total,cls,quality,reg,n_pos" and len(log) == 5


def test_train_is_byte_deterministic(tiny, tmp_path):
    root, ini = tiny
    for k in range(2):
        assert main(["train", "--config", str(ini), "--out", str(tmp_path / f"r{k}" / "m.sfpp"),
                     "--data", str(root / "train")]) == 0
    a = (tmp_path / "r0" / "m.sfpp").read_bytes()
    assert a == (tmp_path / "r1" / "m.sfpp").read_bytes()
    assert a == (root / "ckpt" / "model.sfpp").read_bytes()
    assert (tmp_path / "r0" / "loss_log.csv").read_bytes() == (root / "ckpt" / "loss_log.csv").read_bytes()


def test_seed_env_changes_training(tiny, tmp_path, monkeypatch):
    root, ini = tiny
    monkeypatch.setenv("SFPP_SEED", "5")
    assert main(["train", "--config", str(ini), "--out", str(tmp_path / "m.sfpp"),
                 "--data", str(root / "train")]) == 0
    assert (tmp_path / "m.sfpp").read_bytes() != (root / "ckpt" / "model.sfpp").read_bytes()
    assert "seed = 5" in (tmp_path / "resolved_config.ini").read_text()


def _track(root, ini, out, *extra):
    return main(["track", "--config", str(ini), "--checkpoint", str(root / "ckpt" / "model.sfpp"),
                 "--sequences", str(root / "test"), "--out", str(out), *extra])


def test_track_matches_library_and_jobs(tiny, tmp_path):
    root, ini = tiny
    assert _track(root, ini, tmp_path / "serial") == 0
    assert _track(root, ini, tmp_path / "par", "--jobs", "2") == 0
    model = model_from_checkpoint(load_checkpoint(str(root / "ckpt" / "model.sfpp")))
    for name in ("seq_000", "seq_001"):
        got = (tmp_path / "serial" / name / "results.csv").read_bytes()
        assert got == (tmp_path / "par" / name / "results.csv").read_bytes()
        res = track_sequence(ModelPredictor(model), load_sequence(str(root / "test" / name)), PostprocConfig())
        ref = tmp_path / f"{name}.csv"
        write_results_csv(str(ref), res)
        assert got == ref.read_bytes()


def test_disabled_postproc_selects_raw_argmax(tiny, tmp_path):
    root, ini = tiny
    out = tmp_path / "raw"
    assert _track(root, ini, out, "--dump-maps", "--postproc.penalty_k", "0",
                  "--postproc.window_influence", "0") == 0
    rows = (out / "seq_000" / "results.csv").read_text().splitlines()[2:]
    for row in rows:
        f, *_, top, r, c = row.split(",")
        scores = np.loadtxt(out / "seq_000" / "maps" / f"score_{int(f):05d}.csv", delimiter=",")
        # the dump is rounded to 6 decimals, so compare values rather than indices
        assert scores[int(r), int(c)] == pytest.approx(scores.max(), abs=1e-6)
        assert float(top) == pytest.approx(scores.max(), abs=1e-6)
    assert (out / "seq_000" / "maps" / "score_00001.pgm").read_bytes()[:2] == b"P5"
    # a second run is byte-identical
    assert _track(root, ini, tmp_path / "raw2", "--postproc.penalty_k", "0",
                  "--postproc.window_influence", "0") == 0
    assert ((tmp_path / "raw2" / "seq_000" / "results.csv").read_bytes()
            == (out / "seq_000" / "results.csv").read_bytes())


def test_eval_perfect_and_tracked(tiny, tmp_path):
    root, ini = tiny
    # results built from ground truth score AO = 1
    perfect = tmp_path / "perfect"
    for name in ("seq_000", "seq_001"):
        (perfect / name).mkdir(parents=True)
        gt = (root / "test" / name / "groundtruth.csv").read_text().splitlines()
        rows = ["frame,x0,y0,x1,y1,max_score,sel_row,sel_col"] + [g + ",1.000000,-1,-1" for g in gt]
        (perfect / name / "results.csv").write_text("\n".join(rows) + "\n")
    assert main(["eval", "--results", str(perfect), "--groundtruth", str(root / "test"),
                 "--out", str(tmp_path / "e1")]) == 0
    s = read_summary(str(tmp_path / "e1" / "summary.txt"))
    assert s["AO"] == "1.000000" and s["failures"] == "0" and s["sequences"] == "2"
    assert (tmp_path / "e1" / "per_sequence.csv").read_text().startswith("sequence,AO,")

    assert _track(root, ini, tmp_path / "trk") == 0
    assert main(["eval", "--results", str(tmp_path / "trk"), "--groundtruth", str(root / "test"),
                 "--out", str(tmp_path / "e2")]) == 0
    s = read_summary(str(tmp_path / "e2" / "summary.txt"))
    assert 0 <= float(s["AO"]) <= 1 and int(s["frames"]) == 10


def test_eval_length_mismatch(tiny, tmp_path, capsys):
    root, _ = tiny
    r = tmp_path / "results.csv"
    r.write_text("frame,x0,y0,x1,y1,max_score,sel_row,sel_col\n0,1,1,5,5,1,-1,-1\n")
    assert main(["eval", "--results", str(r), "--groundtruth", str(root / "test" / "seq_000"),
                 "--out", str(tmp_path / "e")]) == 6
    assert "category=bad_input" in _err(capsys)


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--run.grad_instances", "3"]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert out[-1].startswith("pass max_rel_err=")
    assert any(line.startswith("objective_pss: pass") for line in out)


def test_ablate_command(tiny, tmp_path):
    _, ini = tiny
    out = tmp_path / "abl"
    assert main(["ablate", "--config", str(ini), "--out", str(out), "--variants", "pixel_pss,anchor_maxout"]) == 0
    names = set(os.listdir(out))
    assert {"ablation.csv", "summary.txt", "pixel_pss_score_hist.csv", "anchor_maxout_score_hist.csv",
            "anchor_maxout_iou_pred_gt.csv", "anchor_maxout_iou_anchor_gt.csv", "resolved_config.ini"} <= names
    table = (out / "ablation.csv").read_text().splitlines()
    assert table[0].startswith("variant,AO,SR@0.5") and len(table) == 3
    s = read_summary(str(out / "summary.txt"))
    assert "anchor_maxout.mean_iou_pred_anchor" in s
