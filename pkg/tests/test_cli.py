from __future__ import annotations

import csv
import io
import json

import numpy as np
import pytest

from meshlets.cli import EVAL_HEADER, main
from meshlets.io import load_mesh, load_points, save_mesh
from meshlets.shapes import icosphere


def _run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_make_pc(tmp_path, capsys):
    a, b = tmp_path / "a.ply", tmp_path / "b.ply"
    code, out, _ = _run(capsys, "make-pc", "builtin:icosphere3", "--setting", "S1", "--seed", "4",
                        "--out", str(a), "--json")
    assert code == 0
    assert json.loads(out)["points"] == 64
    assert len(load_points(a)) == 64
    _run(capsys, "make-pc", "builtin:icosphere3", "--seed", "4", "--out", str(b))
    assert a.read_bytes() == b.read_bytes()


def test_missing_input_exit_3(tmp_path, capsys):
    code, _, err = _run(capsys, "make-pc", str(tmp_path / "none.obj"), "--out", str(tmp_path / "x.ply"))
    assert code == 3 and "none.obj" in err


def test_usage_errors_exit_2(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        main(["make-pc"])
    assert e.value.code == 2
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"epochs": 1, "no_such_key": 3}))
    code, _, err = _run(capsys, "train", "x.mlc", "--config", str(cfg), "--out", str(tmp_path / "m.vae"))
    assert code == 2 and "no_such_key" in err
    code, _, err = _run(capsys, "make-pc", "builtin:teapot", "--out", str(tmp_path / "x.ply"))
    assert code == 2


def test_corpus_train_fit_patch(tmp_path, capsys):
    corpus = tmp_path / "c.mlc"
    code, out, _ = _run(capsys, "build-corpus", "--synthetic", "300", "--grid-size", "5",
                        "--spacing", "0.05", "--out", str(corpus), "--json")
    assert code == 0 and json.loads(out)["meshlets"] == 300
    model = tmp_path / "m.vae"
    code, out, _ = _run(capsys, "train", str(corpus), "--epochs", "3", "--lr", "1e-3",
                        "--out", str(model), "--json")
    lines = [json.loads(s) for s in out.splitlines()]
    assert code == 0 and model.exists()
    assert [r["event"] for r in lines] == ["epoch"] * 3 + ["train"]
    assert set(lines[0]) == {"event", "epoch", "loss", "seconds"}
    # a small noisy plane patch
    rng = np.random.default_rng(0)
    pts = np.c_[rng.uniform(-0.1, 0.1, (80, 2)), rng.normal(0, 0.005, 80)]
    pfile = tmp_path / "p.ply"
    from meshlets.io import save_points
    save_points(pts, pfile)
    code, out, _ = _run(capsys, "fit-patch", str(model), str(pfile), "--spacing", "0.05",
                        "--out", str(tmp_path / "fit.ply"), "--json", "--steps", "20")
    assert code == 0
    assert load_points(tmp_path / "fit.ply").points.shape == (25, 3)


def test_train_toy_12_dim(tmp_path, capsys):
    from meshlets.meshlet import write_mlc
    rng = np.random.default_rng(0)
    write_mlc(tmp_path / "toy.mlc", rng.normal(size=(40, 2, 2, 3)), np.ones((40, 2, 2), bool))
    code, _, _ = _run(capsys, "train", str(tmp_path / "toy.mlc"), "--epochs", "2",
                      "--out", str(tmp_path / "toy.vae"))
    from meshlets.vae import load_checkpoint
    assert code == 0 and load_checkpoint(tmp_path / "toy.vae").input_dim == 12


def _read_csv(text):
    return list(csv.reader(io.StringIO(text)))


def test_evaluate(tmp_path, capsys):
    m = icosphere(3)
    save_mesh(m, tmp_path / "gt.ply")
    shifted = tmp_path / "s.ply"
    save_mesh(m.with_vertices(m.vertices + [0.25, 0, 0]), shifted)
    code, out, _ = _run(capsys, "evaluate", str(tmp_path / "gt.ply"), str(tmp_path / "gt.ply"))
    rows = _read_csv(out)
    assert code == 0 and rows[0] == EVAL_HEADER
    assert rows[1][2:4] == ["0.000", "0.000"]
    assert [r[0] for r in rows[-2:]] == ["mean", "median"]
    code, out, _ = _run(capsys, "evaluate", str(tmp_path / "gt.ply"), str(shifted),
                        "--out", str(tmp_path / "e.csv"), "--latex", str(tmp_path / "e.tex"))
    rows = _read_csv((tmp_path / "e.csv").read_text())
    assert float(rows[1][3]) == pytest.approx(25.0, abs=5e-4)
    assert r"\begin{tabular}" in (tmp_path / "e.tex").read_text()
    _, out2, _ = _run(capsys, "evaluate", str(shifted), str(tmp_path / "gt.ply"))
    assert _read_csv(out2)[1][2:4] == rows[1][2:4]
    code, _, _ = _run(capsys, "evaluate", str(tmp_path / "gt.ply"), str(tmp_path / "missing.ply"))
    assert code == 3


def test_evaluate_directory(tmp_path, capsys):
    gt = tmp_path / "gt"
    rec = tmp_path / "rec"
    gt.mkdir()
    rec.mkdir()
    for i, name in enumerate(["a", "b"]):
        m = icosphere(2)
        save_mesh(m, gt / f"{name}.ply")
        save_mesh(m.with_vertices(m.vertices * (1 + 0.1 * (i + 1))), rec / f"{name}.ply")
        (rec / f"{name}.ply.json").write_text(json.dumps({"runtime_s": 2.0 * (i + 1), "setting": "S2"}))
    code, out, _ = _run(capsys, "evaluate", str(gt), str(rec))
    rows = _read_csv(out)
    assert code == 0 and [r[0] for r in rows[1:]] == ["a", "b", "mean", "median"]
    assert rows[1][1] == "S2" and rows[3][4] == "3.000"
    assert float(rows[1][3]) == pytest.approx(10.0, abs=1e-3)


def test_reconstruct_one_outer_loop(tmp_path, capsys, desk_prior):
    from meshlets.datasets import NoiseSetting, make_pointcloud, sphere_samples
    from meshlets.io import save_points
    from meshlets.vae import save_checkpoint
    pc = make_pointcloud(sphere_samples(2000), NoiseSetting(1.0, 0.015, seed=0))
    save_points(pc, tmp_path / "pc.ply")
    save_checkpoint(desk_prior.model, tmp_path / "m.vae")
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"spacing": 0.05, "inner_iterations": 2}))
    ck = tmp_path / "ck"
    code, out, err = _run(capsys, "reconstruct", str(tmp_path / "pc.ply"), "--model",
                          str(tmp_path / "m.vae"), "--config", str(cfg), "--max-outer", "1",
                          "--checkpoint-dir", str(ck), "--out", str(tmp_path / "r.ply"), "--json")
    assert code == 0, err
    events = [json.loads(s)["event"] for s in out.splitlines()]
    assert events[0] == "init" and "outer" in events and events[-1] == "reconstruct"
    assert load_mesh(tmp_path / "r.ply").n_vertices > 100
    assert (ck / "mesh_001.ply").exists() and (ck / "meshlets_001.mlc").exists()
    header = (ck / "metrics.csv").read_text().splitlines()[0]
    assert header == "iteration,cpc,cm,hausdorff_gt"
    meta = json.loads((tmp_path / "r.ply.json").read_text())
    assert meta["outer"] == 1 and meta["runtime_s"] > 0
