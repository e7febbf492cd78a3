import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from gazeattn.cli import main
from gazeattn.config import parse_config
from gazeattn.decode import run_decode
from gazeattn.kv_store import load_tensors

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

DECODE = """
frames = 2
height = 12
width = 12
block_t = 1
block_h = 6
block_w = 6
d = 16
layers = 1
heads = 2
top_k = 2
context_tokens = 2
text_length = 3
decode_steps = 4
needles = 2
seed = 5
"""

TRAIN = """
frames = 1
height = 6
width = 6
block_t = 1
block_h = 3
block_w = 3
d = 8
context_tokens = 2
train_steps = 6
batch_size = 2
lr = 10.0
eval_every = 2
holdout = 10
"""


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_verify_passes(capsys):
    assert main(["verify"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "all suites passed" in out


def test_verify_detects_injected_fault(capsys):
    assert main(["verify", "--inject-fault", "tie-break"]) != 0
    assert "FAIL" in capsys.readouterr().out
    # the fault does not leak into later runs
    assert main(["verify"]) == 0


def test_decode_outputs_and_repeatability(tmp_path):
    conf = write(tmp_path, "d.conf", DECODE)
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["decode", "--config", conf, "--heatmap-steps", "0,3", "--out", str(out)]) == 0
        runs.append(out)
    files = sorted(p.name for p in runs[0].iterdir())
    assert files == ["effective_config.conf", "heatmap_step0000.pgm", "heatmap_step0003.pgm",
                     "routing_trace.csv", "transfer.csv"]
    for f in files:
        assert (runs[0] / f).read_bytes() == (runs[1] / f).read_bytes()
    trace = (runs[0] / "routing_trace.csv").read_text().splitlines()
    assert trace[0] == "step,layer,head,selected_region_ids,max_score"
    assert len(trace) == 1 + 4 * 2
    assert all(len(row.split(",")[3].split()) == 2 for row in trace[1:])
    pgm = (runs[0] / "heatmap_step0000.pgm").read_text().split("\n")
    assert pgm[:3] == ["P2", "24 12", "255"]
    assert parse_config((runs[0] / "effective_config.conf").read_text()) == parse_config(DECODE)


def test_gaze_heatmap_is_sparse():
    res = run_decode(parse_config(DECODE), [0, 1, 2, 3])
    for img in res.heatmaps.values():
        for t in range(2):
            frame = img[:, t * 12 : (t + 1) * 12]
            assert np.count_nonzero(frame) <= 2 * 36


def test_full_selection_heatmap_matches_dense():
    base = parse_config(DECODE)
    G = 2 * 4
    gaze = run_decode(base.replace(top_k=G), [1, 3])
    dense = run_decode(base.replace(attention="dense"), [1, 3])
    for step in (1, 3):
        gi, gw = gaze.weights[step]
        di, dw = dense.weights[step]
        gmap = dict(zip(gi.tolist(), gw))
        assert set(gmap) == set(di.tolist())
        assert np.allclose([gmap[i] for i in di.tolist()], dw, rtol=1e-12, atol=1e-15)
        assert np.abs(gaze.heatmaps[step].astype(int) - dense.heatmaps[step]).max() <= 1


def test_reset_residency_charges_every_step():
    cfg = parse_config(DECODE).replace(needles=1, noise=0.0)
    keep = run_decode(cfg)
    reset = run_decode(cfg.replace(residency="reset-per-step"))
    per_region = 36 * 16 * 4 * 2
    for hk, hr in zip(keep.heads, reset.heads):
        assert hk.tier.total_bytes_transferred == 2 * per_region
        assert hr.tier.total_bytes_transferred == 4 * hk.tier.total_bytes_transferred


def test_cost_command(tmp_path, capsys):
    out = tmp_path / "cost"
    rc = main(["cost", "--dense", str(CONFIGS / "cost_dense.conf"), "--gaze", str(CONFIGS / "cost_gaze.conf"),
               "--out", str(out)])
    assert rc == 0
    printed = capsys.readouterr().out
    assert printed == (out / "cost_report.txt").read_text()
    assert "752/4608 = 16.3%" in printed
    assert (out / "cost_report.csv").read_text().startswith("row,")


def test_train_command(tmp_path, capsys):
    conf = write(tmp_path, "t.conf", TRAIN)
    out = tmp_path / "train"
    assert main(["train", "--config", conf, "--out", str(out)]) == 0
    assert "hit rate" in capsys.readouterr().out
    log = (out / "train_log.csv").read_text().splitlines()
    assert len(log) == 7
    params = load_tensors(out / "params.bin")
    assert set(params) == {"query", "key", "value", "context"}
    assert params["query"].shape == (8, 8) and params["context"].shape == (2, 8)


def test_train_no_schedule(tmp_path):
    conf = write(tmp_path, "t.conf", TRAIN)
    out = tmp_path / "ns"
    assert main(["train", "--config", conf, "--no-schedule", "--out", str(out)]) == 0
    ratios = {row.split(",")[1] for row in (out / "train_log.csv").read_text().splitlines()[1:]}
    assert ratios == {"0.1"}


def test_train_zero_steps(tmp_path):
    conf = write(tmp_path, "z.conf", TRAIN.replace("train_steps = 6", "train_steps = 0"))
    out = tmp_path / "z"
    assert main(["train", "--config", conf, "--out", str(out)]) == 0
    assert (out / "train_log.csv").read_text() == "step,ratio,K,loss,hit_rate\n"


def test_train_divergence_exit_code(tmp_path, capsys):
    conf = write(tmp_path, "x.conf", TRAIN.replace("lr = 10.0", "lr = 1e300"))
    assert main(["train", "--config", conf, "--out", str(tmp_path / "x")]) == 2
    assert "diverged" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["decode", "--config", "/nonexistent/x.conf", "--out", "OUT"],
    ["train", "--config", "BAD", "--out", "OUT"],
])
def test_config_errors_exit_2(tmp_path, capsys, argv):
    bad = write(tmp_path, "bad.conf", "nonsense_key = 1\n")
    argv = [a.replace("BAD", bad).replace("OUT", str(tmp_path / "o")) for a in argv]
    assert main(argv) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_module_entry_help():
    proc = subprocess.run([sys.executable, "-m", "gazeattn.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "decode" in proc.stdout and "top_k" in proc.stdout
    assert "inject-fault" not in proc.stdout
