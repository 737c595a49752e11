"""Bindings must be numerically invisible: identical to the core library
and the command-line tool on the same input bytes."""
import json
import subprocess
import sys

import numpy as np
import pytest

import uft
import uft_bindings as ub
from uft import heads, losses, matching, tensorio, water
from uft.errors import DataError
from uft.rng import Stream, derive_seed


def run_cli(*argv):
    proc = subprocess.run(
        [sys.executable, "-m", "uft.cli", *argv], capture_output=True, text=True
    )
    assert proc.returncode == 0, proc.stderr
    return proc.stdout


def test_version_matches_core():
    assert ub.__version__ == uft.__version__


# ----------------------------------------------------------------- synth


def test_synthesize_matches_cli_bytes(tmp_path):
    stream = Stream(77, 0)
    img = np.asarray(stream.uniform(0.0, 1.0, (24, 20, 3)), dtype=np.float32)
    depth = np.asarray(stream.uniform(0.0, 3.0, (24, 20)), dtype=np.float32)
    indir = tmp_path / "frames"
    indir.mkdir()
    tensorio.atomic_write_bytes(str(indir / "f.ppm"), tensorio.ppm_bytes(img.astype(np.float64)))
    tensorio.atomic_write_bytes(str(indir / "f.depth.uft"), tensorio.tensor_bytes(depth))
    out = tmp_path / "out"
    run_cli("synth", "--input", str(indir), "--out", str(out), "--seed", "5")

    prov = json.loads((out / "f.json").read_text())
    # the tool quantized the image to 8 bits on the way in; feed the
    # binding the same post-quantization pixels
    quantized = tensorio.ppm_from_bytes((indir / "f.ppm").read_bytes()).astype(np.float32)
    result = ub.synthesize_underwater(
        quantized,
        depth,
        prov["params"]["beta"],
        prov["params"]["b"],
        prov["params"]["kd"],
        water_depth=prov["scene"]["water_depth"],
        surface_irradiance=prov["scene"]["surface_irradiance"],
        max_scene_depth=prov["scene"]["max_scene_depth"],
        noise_sigma=prov["scene"]["noise_sigma"],
        seed=derive_seed(prov["frame_seed"], 1),
    )
    assert result.dtype == np.float32 and result.shape == img.shape
    cli_bytes = (out / "f.underwater.ppm").read_bytes()
    assert tensorio.ppm_bytes(result.astype(np.float64)) == cli_bytes


def test_synthesize_round_trip_preserves_shape_and_dtype():
    img = np.full((8, 10, 3), 0.25, dtype=np.float32)
    depth = np.zeros((8, 10), dtype=np.float32)
    out = ub.synthesize_underwater(img, depth, [0.5] * 3, [0.1] * 3, [0.2] * 3, noise_sigma=0.0)
    assert out.dtype == np.float32
    assert out.shape == img.shape
    # zero range with noise off is the identity
    assert np.array_equal(out, img)


# ---------------------------------------------------------------- lp loss


def test_lp_loss_matches_cli(tmp_path):
    stream = Stream(13, 2)
    teacher = np.asarray(stream.normal((3, 4, 65)), dtype=np.float32)
    student = np.asarray(stream.normal((3, 4, 65)), dtype=np.float32)
    tp, sp = tmp_path / "t.uft", tmp_path / "s.uft"
    tensorio.atomic_write_bytes(str(tp), tensorio.tensor_bytes(teacher))
    tensorio.atomic_write_bytes(str(sp), tensorio.tensor_bytes(student))
    prefix = tmp_path / "r"
    run_cli("losses", "--teacher", str(tp), "--student", str(sp),
            "--out-prefix", str(prefix), "--pkt-weight", "0.5")

    value, grad, parts = ub.lp_loss(teacher, student, pkt_weight=0.5)
    doc = json.loads((tmp_path / "r.json").read_text())
    assert value == pytest.approx(doc["lp"], rel=1e-12, abs=1e-15)
    assert parts["kl"] == pytest.approx(doc["kl"], rel=1e-12, abs=1e-15)
    assert parts["pkt"] == pytest.approx(doc["pkt"], rel=1e-12, abs=1e-15)
    cli_grad = tensorio.tensor_from_bytes((tmp_path / "r.grad.uft").read_bytes())
    assert grad.dtype == np.float32
    assert np.array_equal(grad, cli_grad)


def test_lp_loss_matches_core_library():
    stream = Stream(14, 2)
    teacher = np.asarray(stream.normal((2, 2, 65)), dtype=np.float32)
    student = np.asarray(stream.normal((2, 2, 65)), dtype=np.float32)
    value, grad, _ = ub.lp_loss(teacher, student, pkt_weight=1.25)
    ref = losses.lp_loss(
        teacher.astype(np.float64), student.astype(np.float64),
        losses.LossWeights(pkt_weight=1.25),
    )
    assert value == ref.value
    assert np.array_equal(grad, ref.grad.astype(np.float32))


# ------------------------------------------------------------ descriptor


def aligned_fixture(n=4, dim=64, seed=9):
    stream = Stream(seed, 1)
    da = np.asarray(stream.normal((n, dim)), dtype=np.float32)
    db = np.asarray(stream.normal((n, dim)), dtype=np.float32)
    mask = np.ones((n, n), dtype=bool)
    return da, db, mask


def test_ld_loss_matches_core_library():
    da, db, mask = aligned_fixture()
    value, ga, gb = ub.ld_loss_grad(da, db, mask, margin_p=2.0, margin_q=10.0)

    origin = (0.0, 0.0)
    ms = tuple(
        matching.Match(i, i, origin, origin, origin, tuple(j for j in range(4) if j != i))
        for i in range(4)
    )
    ref = matching.ld_loss_grad(
        matching.CorrespondenceSet(ms, threshold=0.0),
        matching.MatchMargins(p=2.0, q=10.0),
        da.astype(np.float64),
        db.astype(np.float64),
    )
    assert value == ref.value
    assert np.array_equal(ga, ref.grad_a.astype(np.float32))
    assert np.array_equal(gb, ref.grad_b.astype(np.float32))


def test_ld_loss_ignores_mask_diagonal():
    da, db, mask = aligned_fixture(n=3)
    with_diag = ub.ld_loss_grad(da, db, mask, margin_p=2.0, margin_q=10.0)
    off = mask.copy()
    np.fill_diagonal(off, False)
    without = ub.ld_loss_grad(da, db, off, margin_p=2.0, margin_q=10.0)
    assert with_diag[0] == without[0]


# ------------------------------------------------------------- binarize


def test_binarize_matches_core():
    stream = Stream(4, 4)
    raw = np.asarray(stream.normal((5, 32)), dtype=np.float32) * 1.5
    signs, mask = ub.binarize_ste(raw)
    ref_signs, ref_mask = heads.binarize_ste(raw.astype(np.float64))
    assert np.array_equal(signs, ref_signs.astype(np.float32))
    assert np.array_equal(mask, ref_mask.astype(np.float32))
    zero = ub.binarize_ste(np.zeros((1, 2), dtype=np.float32))
    assert np.all(zero[0] == 1.0) and np.all(zero[1] == 1.0)


# ------------------------------------------------------------- matching


def test_nn_match_matches_cli(tmp_path):
    rng = np.random.default_rng(51)
    pa = rng.integers(0, 256, size=(7, 32), dtype=np.uint8)
    pb = rng.integers(0, 256, size=(6, 32), dtype=np.uint8)
    fa, fb = tmp_path / "a.desc", tmp_path / "b.desc"
    tensorio.write_descriptor_records(str(fa), pa)
    tensorio.write_descriptor_records(str(fb), pb)
    out = tmp_path / "m.csv"
    run_cli("match", "--desc-a", str(fa), "--desc-b", str(fb), "--out", str(out))

    result = ub.nn_match(pa, pb)
    assert result.dtype == np.int32 and result.ndim == 2 and result.shape[1] == 3
    lines = out.read_text().splitlines()[1:]
    cli_rows = [tuple(int(v) for v in ln.split(",")) for ln in lines]
    assert [tuple(r) for r in result.tolist()] == cli_rows


def test_nn_match_accepts_float_descriptors():
    stream = Stream(6, 6)
    ra = np.asarray(stream.normal((5, 64)), dtype=np.float32)
    rb = np.asarray(stream.normal((4, 64)), dtype=np.float32)
    got = ub.nn_match(ra, rb)
    want = matching.nn_match(
        heads.pack_descriptor_bits(ra.astype(np.float64)),
        heads.pack_descriptor_bits(rb.astype(np.float64)),
    )
    assert [tuple(r) for r in got.tolist()] == want


# ------------------------------------------------------------ rejection


def test_empty_arrays_rejected():
    empty_img = np.zeros((0, 4, 3), dtype=np.float32)
    with pytest.raises(DataError, match="empty"):
        ub.synthesize_underwater(empty_img, np.zeros((0, 4), np.float32),
                                 [0.5] * 3, [0.1] * 3, [0.2] * 3)
    with pytest.raises(DataError, match="empty"):
        ub.lp_loss(np.zeros((0, 1, 65), np.float32), np.zeros((0, 1, 65), np.float32))
    with pytest.raises(DataError, match="empty"):
        ub.binarize_ste(np.zeros((0,), np.float32))
    with pytest.raises(DataError, match="empty"):
        ub.nn_match(np.zeros((0, 32), np.uint8), np.zeros((2, 32), np.uint8))


def test_wrong_dtype_rejected():
    img64 = np.zeros((4, 4, 3))
    with pytest.raises(DataError, match="float32"):
        ub.synthesize_underwater(img64, np.zeros((4, 4), np.float32),
                                 [0.5] * 3, [0.1] * 3, [0.2] * 3)
    with pytest.raises(DataError, match="float32"):
        ub.binarize_ste(np.zeros((2, 2)))
    da, db, mask = aligned_fixture(n=2)
    with pytest.raises(DataError, match="bool or uint8"):
        ub.ld_loss_grad(da, db, mask.astype(np.int64))


def test_non_contiguous_rejected():
    arr = np.zeros((6, 8), dtype=np.float32).T
    with pytest.raises(DataError, match="contiguous"):
        ub.binarize_ste(arr)


def test_shape_mismatches_rejected():
    da, db, mask = aligned_fixture(n=3)
    with pytest.raises(DataError, match="differ"):
        ub.ld_loss_grad(da, db[:2], mask)
    with pytest.raises(DataError, match="nonmatch"):
        ub.ld_loss_grad(da, db, mask[:2])
    with pytest.raises(DataError, match="rank"):
        ub.lp_loss(np.zeros((2, 65), np.float32), np.zeros((2, 65), np.float32))


def test_buffer_protocol_ingest():
    raw = np.asarray(Stream(2, 2).normal((3, 8)), dtype=np.float32)
    view = memoryview(raw.tobytes()).cast("f", (3, 8))
    signs, _ = ub.binarize_ste(view)
    assert np.array_equal(signs, ub.binarize_ste(raw)[0])
