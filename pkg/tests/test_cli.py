import json
import subprocess
import sys

import numpy as np
import pytest

from morphface import io
from morphface.cli import main, resolve_options, UsageError
from morphface.model import ModelParams, synthesize_shape
from morphface.synthetic import random_basis, random_params
from morphface.texture import texture_from_image

from oracles import parse_obj


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


@pytest.fixture
def toy_file(workdir, toy_basis):
    io.save_basis(toy_basis, workdir / "toy.mmb")
    return workdir / "toy.mmb"


@pytest.fixture
def fit_file(workdir):
    basis = random_basis(200, 6, 4, n_landmarks=20, seed=3)
    io.save_basis(basis, workdir / "fit.mmb")
    return io.load_basis(workdir / "fit.mmb"), workdir / "fit.mmb"


def eyes(path, pts, size=None):
    doc = {"scheme": "EYES_ONLY", "points": np.asarray(pts, dtype=float).tolist()}
    if size:
        doc["image_size"] = list(size)
    path.write_text(json.dumps(doc))
    return str(path)


def params_file(path, params):
    io.save_params(params, path)
    return str(path)


# ---------------------------------------------------------------------------
# synth

def test_synth_zero_coefficients_is_mean(toy_file, toy_basis, capsys):
    assert main(["synth", "--basis", str(toy_file), "--out", "mean.obj"]) == 0
    verts, _, faces = parse_obj(open("mean.obj").read())
    mean32 = io.load_basis(toy_file).mean_shape.reshape(-1, 3)
    assert np.array_equal(verts, mean32) and np.array_equal(faces, toy_basis.triangles)
    assert f"vertices {toy_basis.vertex_count} triangles {len(toy_basis.triangles)}" in capsys.readouterr().out


def test_synth_random_matches_in_process(toy_file):
    basis = io.load_basis(toy_file)
    rng = np.random.default_rng(0)
    ids, exps = rng.normal(size=basis.n_id), rng.normal(size=basis.n_exp)
    args = ["synth", "--basis", str(toy_file), "--out", "r.ply",
            "--id-coeffs=" + ",".join(map(str, ids.tolist())), "--exp-coeffs=" + ",".join(map(str, exps.tolist()))]
    assert main(args) == 0
    got = io.load_mesh("r.ply").vertices
    want = synthesize_shape(basis, ids, exps).vertices
    assert np.array_equal(got, want.astype(np.float32).astype(np.float64))


def test_synth_count_mismatch_is_usage_error(toy_file, toy_basis, capsys):
    assert main(["synth", "--basis", str(toy_file), "--out", "x.obj", "--id-coeffs", "1,2"]) == 1
    assert f"K_id = {toy_basis.n_id}" in capsys.readouterr().err
    assert not (toy_file.parent / "x.obj").exists()


def test_unknown_flag_and_missing_required_are_usage_errors(toy_file):
    assert main(["synth", "--basis", str(toy_file), "--bogus", "1"]) == 1
    assert main(["synth", "--basis", str(toy_file)]) == 1
    assert main([]) == 1


# ---------------------------------------------------------------------------
# fit

def _observed(basis, seed, workdir):
    truth = random_params(basis, np.random.default_rng(seed), n_nonzero=5)
    params_file(workdir / "truth.json", truth)
    assert main(["project", "--basis", "fit.mmb", "--params", "truth.json", "--out", "lm.json"]) == 0
    return io.load_points(workdir / "lm.json")


def test_fit_recovers_landmarks(fit_file, workdir):
    basis, _ = fit_file
    obs = _observed(basis, 11, workdir)
    assert main(["fit", "--basis", "fit.mmb", "--landmarks", "lm.json", "--out-params", "p.json"]) == 0
    doc = json.loads((workdir / "p.json").read_text())
    assert {"final_cost", "iterations", "converged", "reprojection_rmse", "params"} <= set(doc)
    fitted = io.load_params(workdir / "p.json")
    from morphface.model import landmark_positions

    rmse = np.sqrt(np.mean(np.sum((landmark_positions(basis, fitted) - obs) ** 2, axis=1)))
    diag = np.linalg.norm(obs.max(axis=0) - obs.min(axis=0))
    assert rmse < 1e-6 * diag


def test_meta_joint_is_byte_deterministic(fit_file, workdir):
    basis, _ = fit_file
    _observed(basis, 12, workdir)
    args = ["fit", "--basis", "fit.mmb", "--landmarks", "lm.json", "--meta-joint", "--seed", "5"]
    assert main(args + ["--out-params", "a.json"]) == 0
    assert main(args + ["--out-params", "b.json"]) == 0
    a, b = (workdir / "a.json").read_bytes(), (workdir / "b.json").read_bytes()
    assert a == b
    trace = json.loads(a)["branch_trace"]
    assert trace and set(trace) <= {"VDC", "WPDC"}


def test_fit_empty_landmarks_is_data_error(fit_file, workdir):
    (workdir / "empty.json").write_text("")
    assert main(["fit", "--basis", "fit.mmb", "--landmarks", "empty.json", "--out-params", "p.json"]) == 2
    (workdir / "empty.json").write_text('{"points": []}')
    assert main(["fit", "--basis", "fit.mmb", "--landmarks", "empty.json", "--out-params", "p.json"]) == 2
    assert not (workdir / "p.json").exists()


def test_fit_strict_non_convergence_exits_3(fit_file, workdir):
    basis, _ = fit_file
    _observed(basis, 13, workdir)
    args = ["fit", "--basis", "fit.mmb", "--landmarks", "lm.json", "--out-params", "p.json",
            "--max-iterations", "1"]
    assert main(args + ["--strict"]) == 3
    assert not (workdir / "p.json").exists()
    assert main(args) == 0
    assert json.loads((workdir / "p.json").read_text())["converged"] is False


# ---------------------------------------------------------------------------
# align

def test_align_identity(workdir, capsys):
    eyes(workdir / "a.json", [[40, 50], [60, 50]], (100, 100))
    assert main(["align", "--unaligned-landmarks", "a.json", "--aligned-landmarks", "a.json"]) == 0
    assert json.loads(capsys.readouterr().out) == {"r": 0.0, "tx": 0.0, "ty": 0.0}


def test_align_thirty_degrees(workdir, capsys):
    c = np.array([49.5, 49.5])
    aligned = np.array([[30.0, 40.0], [70.0, 44.0]])
    t = np.deg2rad(30)
    rot = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    eyes(workdir / "al.json", aligned, (100, 100))
    eyes(workdir / "un.json", (aligned - c) @ rot.T + c)
    assert main(["align", "--unaligned-landmarks", "un.json", "--aligned-landmarks", "al.json"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert abs(out["r"] - 30.0) <= 1e-6 and abs(out["tx"]) <= 1e-6 and abs(out["ty"]) <= 1e-6


def test_align_warps_image(workdir):
    eyes(workdir / "a.json", [[40, 50], [60, 50]])
    eyes(workdir / "b.json", [[40, 50], [60, 50]])
    img = np.random.default_rng(0).uniform(size=(32, 48, 3))
    io.save_image(img, workdir / "in.png")
    assert main(["align", "--unaligned-landmarks", "a.json", "--aligned-landmarks", "b.json",
                 "--image", "in.png", "--out", "out.png"]) == 0
    assert np.array_equal(io.load_image(workdir / "out.png"), io.load_image(workdir / "in.png"))


def test_align_missing_file_names_path(workdir, capsys):
    eyes(workdir / "a.json", [[40, 50], [60, 50]])
    assert main(["align", "--unaligned-landmarks", "nope.json", "--aligned-landmarks", "a.json"]) == 2
    assert "nope.json" in capsys.readouterr().err


def test_align_degenerate_eyes(workdir):
    eyes(workdir / "a.json", [[40, 50], [40, 50]])
    eyes(workdir / "b.json", [[40, 50], [60, 50]])
    assert main(["align", "--unaligned-landmarks", "a.json", "--aligned-landmarks", "b.json"]) == 2


# ---------------------------------------------------------------------------
# texture

def _pose(basis, yaw_deg):
    return ModelParams(scale=1.5, rotation=(0.0, np.deg2rad(yaw_deg), 0.0), translation_2d=(128, 128),
                       id_coeffs=np.zeros(basis.n_id), exp_coeffs=np.zeros(basis.n_exp))


def _texture_args(res=64):
    return ["texture", "--basis", "toy.mmb", "--params", "p.json", "--image", "img.png",
            "--out-mesh", "face.obj", "--out-atlas", "face.png", "--resolution", str(res)]


def test_texture_constant_gray(toy_file, workdir):
    basis = io.load_basis(toy_file)
    params_file(workdir / "p.json", _pose(basis, 20))
    io.save_image(np.full((256, 256), 0.6), workdir / "img.png")
    assert main(_texture_args()) == 0
    atlas = io.load_image(workdir / "face.png")
    gray = io.quantize(0.6) / 255.0
    covered = np.any(atlas > 0, axis=-1)
    assert covered.sum() > 0.2 * covered.size
    assert np.all(atlas[covered] == gray)
    assert "map_Kd face.png" in (workdir / "face.mtl").read_text()
    assert (workdir / "face.obj").read_text().startswith("mtllib face.mtl")


def test_texture_profile_fills_from_mirror(toy_file, workdir):
    basis = io.load_basis(toy_file)
    p = _pose(basis, 60)
    params_file(workdir / "p.json", p)
    yy, xx = np.mgrid[0:256, 0:256] / 255.0
    io.save_image(np.stack([xx, yy, 0.5 + 0.5 * np.sin(20 * xx)], axis=-1), workdir / "img.png")
    assert main(_texture_args()) == 0
    # the written atlas is the in-process pipeline's atlas
    mesh, atlas, valid = texture_from_image(basis, io.load_params(workdir / "p.json"),
                                            io.load_image(workdir / "img.png"), 64)
    assert np.array_equal(io.load_image(workdir / "face.png"), io.quantize(atlas.image) / 255.0)
    m = basis.mirror_map
    from_mirror = ~valid & valid[m]
    assert from_mirror.sum() > 0.1 * len(valid)
    assert np.array_equal(mesh.colors[from_mirror], mesh.colors[m[from_mirror]])


def test_texture_bad_resolution_is_usage_error(toy_file, workdir):
    params_file(workdir / "p.json", _pose(io.load_basis(toy_file), 0))
    io.save_image(np.full((64, 64), 0.5), workdir / "img.png")
    assert main(_texture_args(res=100)) == 1
    assert not (workdir / "face.obj").exists()


def test_texture_without_uv_is_data_error(workdir, capsys):
    basis = random_basis(30, 2, 1, n_landmarks=5, seed=0)
    io.save_basis(basis, workdir / "toy.mmb")
    params_file(workdir / "p.json", _pose(basis, 0))
    io.save_image(np.full((64, 64), 0.5), workdir / "img.png")
    assert main(_texture_args()) == 2
    assert "make-basis" in capsys.readouterr().err
    assert not (workdir / "face.obj").exists()


# ---------------------------------------------------------------------------
# metrics and stats

def test_metrics_identical_pairs(workdir):
    rng = np.random.default_rng(0)
    for k in range(3):
        io.save_image(rng.uniform(size=(48, 48)), workdir / f"x{k}.png")
    (workdir / "pairs.csv").write_text("image_a,image_b\n" + "".join(f"x{k}.png,x{k}.png\n" for k in range(3)))
    assert main(["metrics", "--pairs", "pairs.csv", "--out", "m.csv", "--workers", "2"]) == 0
    lines = (workdir / "m.csv").read_text().splitlines()
    assert lines[0] == "image_a,image_b,ssim,ms_ssim,fsim"
    assert [l.split(",")[:2] for l in lines[1:]] == [[f"x{k}.png"] * 2 for k in range(3)]
    for line in lines[1:]:
        assert all(abs(float(v) - 1.0) <= 1e-9 for v in line.split(",")[2:])


def test_metrics_row_error_and_strict(workdir, capsys):
    io.save_image(np.zeros((32, 32)), workdir / "a.png")
    (workdir / "pairs.csv").write_text("a.png,a.png\na.png,missing.png\n")
    assert main(["metrics", "--pairs", "pairs.csv", "--out", "m.csv", "--workers", "1"]) == 0
    rows = (workdir / "m.csv").read_text().splitlines()
    assert rows[2] == "a.png,missing.png,nan,nan,nan"
    assert "missing.png" in capsys.readouterr().err
    (workdir / "m.csv").unlink()
    assert main(["metrics", "--pairs", "pairs.csv", "--out", "m.csv", "--strict"]) == 2
    assert not (workdir / "m.csv").exists()


def test_stats_square(workdir, unit_square):
    io.export_mesh(unit_square, workdir / "sq.ply")
    assert main(["stats", "--mesh", "sq.ply", "--samples", "4", "--out", "s.csv"]) == 0
    lines = (workdir / "s.csv").read_text().splitlines()
    assert lines == ["mesh,triangles,avg_triangle_area,seed", "sq.ply,2,0.5,0"]


def test_stats_is_byte_deterministic(toy_file, workdir):
    args = ["stats", "--mesh", "toy.mmb", "--seed", "7"]
    assert main(args + ["--out", "a.csv"]) == 0
    assert main(args + ["--out", "b.csv"]) == 0
    assert (workdir / "a.csv").read_bytes() == (workdir / "b.csv").read_bytes()


def test_stats_too_many_samples(workdir, unit_square):
    io.export_mesh(unit_square, workdir / "sq.ply")
    assert main(["stats", "--mesh", "sq.ply", "--out", "s.csv"]) == 2
    assert not (workdir / "s.csv").exists()


# ---------------------------------------------------------------------------
# config files

def test_flags_override_config(workdir, unit_square):
    io.export_mesh(unit_square, workdir / "sq.ply")
    (workdir / "cfg.json").write_text(json.dumps({"mesh": "sq.ply", "samples": 2, "seed": 9, "out": "c.csv"}))
    assert main(["stats", "--config", "cfg.json"]) == 0
    assert (workdir / "c.csv").read_text().splitlines()[1] == "sq.ply,2,0.5,9"
    assert main(["stats", "--config", "cfg.json", "--seed", "1", "--samples", "4"]) == 0
    assert (workdir / "c.csv").read_text().splitlines()[1] == "sq.ply,2,0.5,1"


def test_resolve_options_precedence(workdir):
    (workdir / "cfg.json").write_text(json.dumps({"samples": 7, "seed": 3}))
    opts = resolve_options("stats", {"config": "cfg.json", "seed": 5, "mesh": ["m"], "out": "o"})
    assert (opts.samples, opts.seed, opts.mesh) == (7, 5, ["m"])
    (workdir / "bad.json").write_text(json.dumps({"sample": 7}))
    with pytest.raises(UsageError):
        resolve_options("stats", {"config": "bad.json", "mesh": ["m"], "out": "o"})


def test_module_entry_point(workdir, toy_file):
    proc = subprocess.run([sys.executable, "-m", "morphface", "synth", "--basis", "toy.mmb", "--out", "m.obj"],
                          capture_output=True, text=True, cwd=workdir)
    assert proc.returncode == 0 and proc.stdout.startswith("vertices")
    proc = subprocess.run([sys.executable, "-m", "morphface", "texture", "--basis", "toy.mmb"],
                          capture_output=True, text=True, cwd=workdir)
    assert proc.returncode == 1
