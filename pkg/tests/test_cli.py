import json
import os
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

import oracles
from gwcosal import io
from gwcosal.cli import main
from gwcosal.experiments import write_corpus
from gwcosal.metrics import image_ap, image_auc, image_f_adaptive
from gwcosal.net import NetConfig, init_params

SMALL_NET = {
    "profile": "desk",
    "k": 5,
    "input_size": [16, 32],
    "semantic_widths": [4] * 13,
    "group_branch_width": 4,
    "single_branch_width": 4,
}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    return write_corpus(tmp_path_factory.mktemp("corpus"), n_groups=3, max_iters=5, net=SMALL_NET)


def _run(*argv):
    return main([str(a) for a in argv])


# ------------------------------------------------------------- group


def test_group_train_mode(corpus, tmp_path):
    out = tmp_path / "g.json"
    assert _run("group", "--mode", "train", "--images", corpus / "images", "--k", 5, "--out", out) == 0
    doc = json.loads(out.read_text())
    assert doc["k"] == 5 and len(doc["groups"]) == 15
    for g in doc["groups"]:
        assert len(g["members"]) == 5 and g["members"][0] == g["anchor"]


def test_group_eval_mode_is_deterministic(corpus, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for out in (a, b):
        assert _run("group", "--mode", "eval", "--images", corpus / "images", "--seed", 7, "--out", out) == 0
    assert a.read_bytes() == b.read_bytes()
    groups = json.loads(a.read_text())["groups"]
    # three declared groups of exactly five images each
    assert [g["source"] for g in groups] == ["g00", "g01", "g02"]
    assert all(sorted(g["members"]) == [f"{g['source']}/i{i}" for i in range(5)] for g in groups)


def test_group_flat_corpus_of_five(tmp_path):
    for i in range(5):
        Image.fromarray(np.full((8, 8, 3), 40 * i, np.uint8)).save(tmp_path / f"p{i}.png")
    assert _run("group", "--mode", "eval", "--images", tmp_path, "--out", tmp_path / "e.json") == 0
    assert len(json.loads((tmp_path / "e.json").read_text())["groups"]) == 1
    assert _run("group", "--mode", "train", "--images", tmp_path, "--out", tmp_path / "t.json") == 0
    assert len(json.loads((tmp_path / "t.json").read_text())["groups"]) == 5


def test_group_too_few_images(tmp_path, capsys):
    for i in range(3):
        Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(tmp_path / f"p{i}.png")
    assert _run("group", "--images", tmp_path, "--out", tmp_path / "g.json") == 2
    assert "at least k=5" in capsys.readouterr().err


# ------------------------------------------------------------- train


def test_train_zero_iters_writes_initial_weights(corpus, tmp_path):
    out = tmp_path / "w.gwcs"
    assert _run("train", "--config", corpus / "run.json", "--groups", corpus / "groups.json", "--out", out, "--max-iters", 0) == 0
    cfg = io.RunConfig.load(corpus / "run.json").net
    assert out.read_bytes() == io.encode_weights(init_params(cfg, 0), cfg)


def test_train_is_byte_deterministic_and_logs(corpus, tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / f"{name}.gwcs"
        args = ["train", "--config", corpus / "run.json", "--groups", corpus / "groups.json", "--out", out, "--log", tmp_path / f"{name}.txt"]
        assert _run(*args) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    lines = (tmp_path / "a.txt").read_text().splitlines()
    assert len(lines) == 5 and all(l.startswith(f"iter {i + 1} loss ") for i, l in enumerate(lines))
    assert "iter 5 loss" in capsys.readouterr().out


def test_train_snapshots(corpus, tmp_path):
    cfg = json.loads((corpus / "run.json").read_text())
    cfg["train"]["snapshot_every"] = 2
    cfg["paths"] = {"images": str(corpus / "images"), "masks": str(corpus / "masks")}
    (tmp_path / "run.json").write_text(json.dumps(cfg))
    out = tmp_path / "w.gwcs"
    assert _run("train", "--config", tmp_path / "run.json", "--groups", corpus / "groups.json", "--out", out) == 0
    assert sorted(p.name for p in tmp_path.glob("w.gwcs.iter*")) == ["w.gwcs.iter2.gwcs", "w.gwcs.iter4.gwcs"]


def test_train_resume_from_weights(corpus, tmp_path):
    first = tmp_path / "first.gwcs"
    _run("train", "--config", corpus / "run.json", "--groups", corpus / "groups.json", "--out", first, "--max-iters", 0)
    out = tmp_path / "w.gwcs"
    assert _run("train", "--config", corpus / "run.json", "--groups", corpus / "groups.json", "--out", out, "--init-weights", first, "--max-iters", 0) == 0
    assert out.read_bytes() == first.read_bytes()


def test_train_divergence_exit_code(corpus, tmp_path):
    cfg = json.loads((corpus / "run.json").read_text())
    cfg["train"]["lr"] = 1e12
    cfg["train"]["max_iters"] = 20
    cfg["paths"] = {"images": str(corpus / "images"), "masks": str(corpus / "masks")}
    (tmp_path / "run.json").write_text(json.dumps(cfg))
    with np.errstate(all="ignore"):
        assert _run("train", "--config", tmp_path / "run.json", "--groups", corpus / "groups.json", "--out", tmp_path / "w.gwcs") == 3
    assert not (tmp_path / "w.gwcs").exists()


@pytest.mark.parametrize("bad", ['{"net": {"k": "five"}}', "not json"])
def test_train_bad_config(corpus, tmp_path, bad):
    (tmp_path / "run.json").write_text(bad)
    assert _run("train", "--config", tmp_path / "run.json", "--groups", corpus / "groups.json", "--out", tmp_path / "w.gwcs") == 2


def test_train_group_size_mismatch(corpus, tmp_path):
    (tmp_path / "g.json").write_text(json.dumps({"k": 3, "groups": [{"members": ["g00/i0", "g00/i1", "g00/i2"]}]}))
    assert _run("train", "--config", corpus / "run.json", "--groups", tmp_path / "g.json", "--out", tmp_path / "w.gwcs") == 2


# ------------------------------------------------------------- infer


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("w") / "w.gwcs"
    assert _run("train", "--config", corpus / "run.json", "--groups", corpus / "groups.json", "--out", out) == 0
    return out


def test_infer_identical_images_identical_pngs(corpus, trained, tmp_path):
    img = corpus / "images" / "g00" / "i0.png"
    assert _run("infer", "--weights", trained, "--images", *[img] * 5, "--out-dir", tmp_path) == 0
    files = sorted(tmp_path.glob("*.png"))
    assert len(files) == 5
    assert len({f.read_bytes() for f in files}) == 1


def test_infer_is_deterministic(corpus, trained, tmp_path):
    imgs = sorted((corpus / "images" / "g01").glob("*.png"))
    for d in ("a", "b"):
        assert _run("infer", "--weights", trained, "--images", *imgs, "--out-dir", tmp_path / d) == 0
    for f in (tmp_path / "a").glob("*.png"):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    assert sorted(f.stem for f in (tmp_path / "a").glob("*.png")) == [f"i{i}" for i in range(5)]


def test_infer_output_size_matches_network_input(corpus, tmp_path):
    cfg = NetConfig.desk()
    io.save_weights(init_params(cfg, 0), cfg, tmp_path / "desk.gwcs")
    imgs = sorted((corpus / "images" / "g00").glob("*.png"))
    assert _run("infer", "--weights", tmp_path / "desk.gwcs", "--images", *imgs, "--out-dir", tmp_path / "o") == 0
    with Image.open(tmp_path / "o" / "i0.png") as im:
        assert im.size == (256, 128) and im.mode == "L"


def test_infer_wrong_count(corpus, trained, tmp_path, capsys):
    assert _run("infer", "--weights", trained, "--images", corpus / "images" / "g00" / "i0.png", "--out-dir", tmp_path) == 2
    assert "exactly k=5" in capsys.readouterr().err


def test_infer_corrupt_weights(corpus, trained, tmp_path):
    bad = tmp_path / "bad.gwcs"
    bad.write_bytes(trained.read_bytes()[:100])
    imgs = sorted((corpus / "images" / "g00").glob("*.png"))
    assert _run("infer", "--weights", bad, "--images", *imgs, "--out-dir", tmp_path / "o") == 2
    assert not (tmp_path / "o").exists()


# ------------------------------------------------------------- eval


def _write_maps(directory, maps):
    directory.mkdir(parents=True, exist_ok=True)
    for name, m in maps.items():
        Image.fromarray(m.astype(np.uint8), mode="L").save(directory / f"{name}.png")


def test_eval_perfect_and_inverted(corpus, tmp_path):
    gt = corpus / "masks" / "g00"
    assert _run("eval", "--pred", gt, "--gt", gt, "--out", tmp_path / "r.json", "--pr-csv", tmp_path / "pr.csv") == 0
    r = json.loads((tmp_path / "r.json").read_text())
    assert (r["mF"], r["AUC"], r["AP"], r["MAE"]) == (1.0, 1.0, 1.0, 0.0)
    assert (tmp_path / "pr.csv").read_text().startswith("threshold,precision,recall\n")
    inverted = {p.stem: 255 - io.read_gray(p) for p in gt.glob("*.png")}
    _write_maps(tmp_path / "inv", inverted)
    assert _run("eval", "--pred", tmp_path / "inv", "--gt", gt, "--out", tmp_path / "r2.json") == 0
    assert json.loads((tmp_path / "r2.json").read_text())["AUC"] == 0.0


def test_eval_matches_oracle(tmp_path):
    rng = np.random.default_rng(11)
    preds, gts, pairs = {}, {}, []
    for i in range(6):
        sal, gt = oracles.random_pair(rng)
        preds[f"x{i}"] = np.round(sal * 255)
        gts[f"x{i}"] = gt * 255
        pairs.append((np.round(sal * 255) / 255, gt))
    _write_maps(tmp_path / "p", preds)
    _write_maps(tmp_path / "g", gts)
    assert _run("eval", "--pred", tmp_path / "p", "--gt", tmp_path / "g", "--out", tmp_path / "r.json") == 0
    r = json.loads((tmp_path / "r.json").read_text())
    assert r["AUC"] == pytest.approx(np.mean([oracles.auc(s, g) for s, g in pairs]), abs=1e-12)
    assert r["AP"] == pytest.approx(np.mean([oracles.ap(s, g) for s, g in pairs]), abs=1e-12)
    assert r["mF"] == pytest.approx(np.mean([oracles.f_adaptive(s, g) for s, g in pairs]), abs=1e-12)
    assert r["MAE"] == pytest.approx(np.mean([oracles.mae(s, g) for s, g in pairs]), abs=1e-12)


def test_eval_id_mismatch_listed(tmp_path, capsys):
    _write_maps(tmp_path / "p", {"a": np.zeros((4, 4)), "b": np.zeros((4, 4))})
    _write_maps(tmp_path / "g", {"a": np.zeros((4, 4)), "c": np.zeros((4, 4))})
    assert _run("eval", "--pred", tmp_path / "p", "--gt", tmp_path / "g", "--out", tmp_path / "r.json") == 2
    err = capsys.readouterr().err
    assert "prediction without ground truth: b" in err and "ground truth without prediction: c" in err
    assert not (tmp_path / "r.json").exists()


# ------------------------------------------------------------- gradcheck and entry points


def test_gradcheck_command(capsys):
    assert _run("gradcheck", "--seeds", 1) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 7


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as info:
        main(["train"])
    assert info.value.code == 2


def test_module_entry_point_and_thread_cap(tmp_path):
    cmd = [sys.executable, "-m", "gwcosal", "group", "--images", tmp_path, "--out", tmp_path / "g.json"]
    proc = subprocess.run(cmd, capture_output=True, text=True, env={**os.environ, "GWCOSAL_THREADS": "1"})
    assert proc.returncode == 2 and "at least k=5" in proc.stderr
