"""Command-line behavior: config parsing, exit codes, artifacts on disk."""

import json

import numpy as np
import pytest

from evocount import cli as C
from evocount import eocd as E
from evocount import tensor as T
from evocount.cli import main


TINY = """\
# two counting classes, toy sizes
method = full
bench.classes = 2
bench.train = 3
bench.val = 2
bench.test = 2
bench.image = 32
bench.seed = 99
train.epochs = 2
train.batch_size = 4
train.k_total = 6
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return p


def _run(*argv):
    return main([str(a) for a in argv])


# ---------------------------------------------------------------------------
# config file parsing

def test_parse_ignores_comments_and_blanks():
    got = C.parse_config_text("# c\n\n a = 1 \nb=two # not a comment\n")
    assert got == {"a": "1", "b": "two # not a comment"}


def test_parse_duplicate_key():
    with pytest.raises(C.ConfigError, match="duplicate"):
        C.parse_config_text("a=1\na=2\n")


def test_parse_missing_equals():
    with pytest.raises(C.ConfigError):
        C.parse_config_text("just a line\n")


def test_unknown_key_rejected(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text(TINY + "bench.widht = 3\n")
    out = tmp_path / "o"
    assert _run("gen-data", "--config", p, "--out", out) == 2


@pytest.mark.parametrize("extra", [
    "train.lam = 1.5",           # outside [0, 1]
    "bench.image = 30",          # not divisible by 4
    "bench.image = 16",          # below the minimum
    "method = sideways",
    "seed = -1",
    "bench.classes = 9",
])
def test_invalid_values_exit_2(tmp_path, extra):
    base = "\n".join(l for l in TINY.splitlines()
                     if l.split("=")[0].strip() != extra.split("=")[0].strip())
    p = tmp_path / "bad.cfg"
    p.write_text(base + "\n" + extra + "\n")
    assert _run("gen-data", "--config", p, "--out", tmp_path / "o") == 2


def test_unknown_profile_rejected(tiny_cfg, tmp_path):
    with pytest.raises(SystemExit):
        # argparse enforces the profile choice list itself
        _run("gen-data", "--config", tiny_cfg, "--out", tmp_path / "o",
             "--profile", "warehouse")


def test_missing_out_parent_rejected(tiny_cfg, tmp_path):
    rc = _run("gen-data", "--config", tiny_cfg,
              "--out", tmp_path / "no" / "such" / "deep")
    assert rc == 2


# ---------------------------------------------------------------------------
# gen-data

def test_gen_data_tree_and_manifest(tiny_cfg, tmp_path):
    out = tmp_path / "data"
    assert _run("gen-data", "--config", tiny_cfg, "--out", out) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["command"] == "gen-data"
    assert len(man["config_hash"]) == 16
    for rel in man["artifacts"]:
        assert (out / rel).is_file()
    assert (out / "stage_2" / "test" / "index.txt").is_file()


def test_gen_data_rerun_bitwise(tiny_cfg, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _run("gen-data", "--config", tiny_cfg, "--out", a) == 0
    assert _run("gen-data", "--config", tiny_cfg, "--out", b) == 0
    man = json.loads((a / "manifest.json").read_text())
    for rel in man["artifacts"] + ["manifest.json"]:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


# ---------------------------------------------------------------------------
# train

def test_train_full_writes_stage_artifacts(tiny_cfg, tmp_path):
    out = tmp_path / "run"
    assert _run("train", "--config", tiny_cfg, "--out", out) == 0
    for t in (1, 2):
        assert (out / f"checkpoint_stage{t}.eocm1").is_file()
        hist = (out / f"history_stage{t}.csv").read_text().splitlines()
        assert hist[0].split(",")[0] == "epoch"
        assert len(hist) == 1 + 2  # header + epochs
        snap = json.loads((out / f"bank_stage{t}.json").read_text())
        # the bank keeps exemplars for every seen class, background included
        assert set(snap) == {str(c) for c in range(t + 1)}
    stage, arrays = E.read_checkpoint(out / "checkpoint_stage2.eocm1")
    assert stage == 2
    assert "head.w" in arrays


def test_train_ft_writes_no_bank(tiny_cfg, tmp_path):
    cfg = tmp_path / "ft.cfg"
    cfg.write_text(TINY.replace("method = full", "method = ft"))
    out = tmp_path / "run"
    assert _run("train", "--config", cfg, "--out", out) == 0
    assert not list(out.glob("bank_*.json"))
    assert (out / "checkpoint_stage2.eocm1").is_file()


def test_train_rerun_checkpoint_bitwise(tiny_cfg, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _run("train", "--config", tiny_cfg, "--out", a) == 0
    assert _run("train", "--config", tiny_cfg, "--out", b) == 0
    name = "checkpoint_stage2.eocm1"
    assert (a / name).read_bytes() == (b / name).read_bytes()


def test_train_seed_flag_changes_weights(tiny_cfg, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _run("train", "--config", tiny_cfg, "--out", a) == 0
    assert _run("train", "--config", tiny_cfg, "--out", b, "--seed", 7) == 0
    name = "checkpoint_stage2.eocm1"
    assert (a / name).read_bytes() != (b / name).read_bytes()


# ---------------------------------------------------------------------------
# eval and export-maps against trained artifacts

@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("trained")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    data = root / "data"
    run = root / "run"
    assert _run("gen-data", "--config", cfg, "--out", data) == 0
    assert _run("train", "--config", cfg, "--out", run) == 0
    return root, data, run


def test_eval_outputs(trained, tmp_path):
    root, data, run = trained
    out = tmp_path / "eval"
    rc = _run("eval", "--ckpt", run / "checkpoint_stage2.eocm1",
              "--data", data, "--out", out)
    assert rc == 0
    doc = json.loads((out / "report.json").read_text())
    assert doc["stage"] == 2
    assert sorted(r["class_id"] for r in doc["per_class"]) == [0, 1, 2]
    pairs = (out / "pairs.csv").read_text().splitlines()
    assert pairs[0] == "stage,class_id,Z,Zhat"
    assert len(pairs) > 1


def test_eval_stage_beyond_dataset(trained, tmp_path):
    root, data, run = trained
    shallow_cfg = tmp_path / "one.cfg"
    shallow_cfg.write_text(TINY.replace("bench.classes = 2",
                                        "bench.classes = 1"))
    shallow = tmp_path / "shallow"
    assert _run("gen-data", "--config", shallow_cfg, "--out", shallow) == 0
    rc = _run("eval", "--ckpt", run / "checkpoint_stage2.eocm1",
              "--data", shallow, "--out", tmp_path / "o")
    assert rc == 3


def test_eval_joint_model_single_report(tiny_cfg, tmp_path):
    cfg = tmp_path / "joint.cfg"
    cfg.write_text(TINY.replace("method = full", "method = joint"))
    data, run, out = tmp_path / "data", tmp_path / "run", tmp_path / "eval"
    assert _run("gen-data", "--config", cfg, "--out", data) == 0
    assert _run("train", "--config", cfg, "--out", run) == 0
    ckpts = sorted(run.glob("checkpoint_stage*.eocm1"))
    assert len(ckpts) == 1  # joint trains once over everything
    rc = _run("eval", "--ckpt", ckpts[0], "--data", data, "--out", out)
    assert rc == 0
    doc = json.loads((out / "report.json").read_text())
    assert doc["stage"] == 2


def test_eval_corrupt_checkpoint(trained, tmp_path):
    root, data, run = trained
    bad = tmp_path / "bad.eocm1"
    bad.write_bytes(b"XXXXX" + bytes(16))
    rc = _run("eval", "--ckpt", bad, "--data", data, "--out", tmp_path / "o")
    assert rc == 3


def test_export_maps_outputs(trained, tmp_path):
    root, data, run = trained
    out = tmp_path / "maps"
    rc = _run("export-maps", "--ckpt", run / "checkpoint_stage2.eocm1",
              "--data", data, "--out", out, "s1/val/0", "s2/test/1")
    assert rc == 0
    preds = (out / "predictions.txt").read_text().splitlines()
    assert len(preds) == 2
    for line in preds:
        sid, c, count = line.split(",")
        tag = sid.replace("/", "_")
        den = E.read_tensor(out / f"density_{tag}.eocd1")
        assert den.ndim == 2
        assert float(count) == pytest.approx(den.sum(), abs=1e-9)
        mask = E.read_tensor(out / f"mask_{tag}.eocd1")
        assert mask.shape == den.shape
        assert np.all((mask > 0.0) & (mask < 1.0))
    raw = (out / "density_s1_val_0.eocd1").read_bytes()
    assert raw[:5] == b"EOCD1"


def test_export_maps_background_prediction(trained, tmp_path):
    root, data, run = trained
    stage, arrays = E.read_checkpoint(run / "checkpoint_stage2.eocm1")
    # zeroing the classifier ties every logit; ties resolve to class 0
    arrays["classifier.w"][:] = 0.0
    arrays["classifier.b"][:] = 0.0
    forged = tmp_path / "bg.eocm1"
    E.write_checkpoint(forged, stage, arrays)
    out = tmp_path / "maps"
    rc = _run("export-maps", "--ckpt", forged, "--data", data, "--out", out,
              "s1/test/0")
    assert rc == 0
    line = (out / "predictions.txt").read_text().splitlines()[0]
    sid, c, count = line.split(",")
    assert int(c) == 0
    den = E.read_tensor(out / "density_s1_test_0.eocd1")
    assert float(count) == pytest.approx(den.sum(), abs=1e-9)


def test_export_maps_bad_id(trained, tmp_path):
    root, data, run = trained
    rc = _run("export-maps", "--ckpt", run / "checkpoint_stage2.eocm1",
              "--data", data, "--out", tmp_path / "o", "s1/val/999")
    assert rc == 3
    rc = _run("export-maps", "--ckpt", run / "checkpoint_stage2.eocm1",
              "--data", data, "--out", tmp_path / "o2", "nonsense")
    assert rc == 3


# ---------------------------------------------------------------------------
# grad-check

def test_grad_check_passes_and_lists_ops(capsys):
    assert main(["grad-check"]) == 0
    lines = capsys.readouterr().out.splitlines()
    names = [l.split()[0] for l in lines if l and not l.startswith("all ")]
    from evocount import gradcheck as GC
    expected = [n for n, _ in GC.OP_CHECKS] + ["full-model"]
    assert names == expected
    assert len(set(names)) == len(names)


def test_grad_check_catches_biased_backward(monkeypatch, capsys):
    def biased_relu(x):
        data = np.maximum(x.data, 0.0)
        out = T._result(data, (x,))
        if out.requires_grad:
            mask = x.data > 0.0
            def bwd(g):
                x._accumulate(g * mask * 1.02)
            out._backward = bwd
        return out

    monkeypatch.setattr(T, "relu", biased_relu)
    assert main(["grad-check"]) == 3
    out = capsys.readouterr().out
    relu_rows = [l for l in out.splitlines() if l.startswith("relu ")]
    assert len(relu_rows) == 1 and "FAIL" in relu_rows[0]


def test_grad_check_catches_wrong_conv_gradient(monkeypatch, capsys):
    orig = T.conv2d

    def biased_conv(*args, **kw):
        out = orig(*args, **kw)
        inner = out._backward
        if inner is not None:
            out._backward = lambda g: inner(g * 1.02)
        return out

    monkeypatch.setattr(T, "conv2d", biased_conv)
    assert main(["grad-check"]) == 3
    out = capsys.readouterr().out
    conv_rows = [l for l in out.splitlines() if l.startswith("conv2d ")]
    assert len(conv_rows) == 1 and "FAIL" in conv_rows[0]


# ---------------------------------------------------------------------------
# memory-sweep

def test_memory_sweep_rows(tiny_cfg, tmp_path):
    out = tmp_path / "sweep"
    rc = _run("memory-sweep", "--config", tiny_cfg, "--out", out,
              "--sizes", "3,5")
    assert rc == 0
    rows = (out / "memory_sweep.csv").read_text().splitlines()
    assert rows[0] == "k_total,seed,final_mae,final_mse"
    assert len(rows) == 3
    ks = [int(r.split(",")[0]) for r in rows[1:]]
    assert ks == [3, 5]
    for r in rows[1:]:
        _, seed, mae, mse = r.split(",")
        assert int(seed) == 0
        assert float(mse) >= float(mae) - 1e-12


def test_memory_sweep_empty_sizes(tiny_cfg, tmp_path):
    rc = _run("memory-sweep", "--config", tiny_cfg, "--out", tmp_path / "o",
              "--sizes", "")
    assert rc == 2
