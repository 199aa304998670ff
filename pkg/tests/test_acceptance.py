"""Acceptance gate: one test, and one PASS/FAIL summary line, per criterion.

The desk-scale run (gendata -> train -> eval through the CLI) is shared by
the desk-scale, CBIR, determinism and persistence checks. Run only the fast
criteria with ``pytest -m "not slow" tests/test_acceptance.py``.
"""

import math
import re
import time
from pathlib import Path

import numpy as np
import pytest

import landseg.data as D
from landseg import cbir, cli
from landseg.checkpoint import Checkpoint, CheckpointError, dumps, load_checkpoint, loads, save_checkpoint
from landseg.data import (decode_mask, encode_height, encode_image, encode_mask, generate_tile,
                          load_split)
from landseg.gradcheck import LAYER_OPS, run_suite
from landseg.metrics import class_assign, dice_coefficient, macro_dice, pixel_accuracy
from landseg.optim import AdamState, adam_step
from landseg.train import evaluate, fit
from landseg.unet import UNetConfig, build_unet, forward

from conftest import record_acceptance

DESK = dict(n=640, size=64, seed=7, split=0.8)
TARGET_DICE, TARGET_ACC = 0.6962, 0.9053


def cli_ok(*argv):
    code = cli.main([str(a) for a in argv])
    assert code == 0, f"landseg {' '.join(map(str, argv))} exited {code}"


def desk_pipeline(root: Path) -> dict:
    """gendata -> train -> eval with the default (desk-scale) configuration."""
    start = time.perf_counter()
    cli_ok("gendata", "--n", DESK["n"], "--size", DESK["size"], "--seed", DESK["seed"],
           "--split", DESK["split"], "--out", root / "data")
    cli_ok("train", "--data", root / "data", "--out", root / "run", "--seed", 0, "--deterministic")
    return dict(root=root, seconds=time.perf_counter() - start)


def read_report(capsys, *argv) -> dict:
    capsys.readouterr()
    cli_ok(*argv)
    out = capsys.readouterr().out
    return {k: float(v) for k, v in re.findall(r"(\S+) = ([0-9.]+)", out)} | {"_text": out}


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    return desk_pipeline(tmp_path_factory.mktemp("desk"))


# -- 1 -----------------------------------------------------------------------


def test_gradient_check_suite():
    start = time.perf_counter()
    reports = run_suite(seed=0)
    seconds = time.perf_counter() - start
    names = [r.name for r in reports]
    covered = names[: len(LAYER_OPS)] == list(LAYER_OPS) and names[-1].startswith("unet_depth1")
    layer_ok = all(r.passed and r.tolerance == 1e-4 for r in reports[:-1])
    model_ok = reports[-1].passed and reports[-1].tolerance == 1e-3
    worst = max(reports, key=lambda r: r.max_error)
    ok = covered and layer_ok and model_ok and seconds < 120
    record_acceptance("gradient-check suite", ok,
                      f"{len(reports)} checks, worst {worst.name} {worst.max_error:.2e}, {seconds:.1f}s (< 120s)")
    for r in reports:
        print(r.line())
    assert ok


# -- 2 -----------------------------------------------------------------------


def brute_dice(pred, true, c):
    tp = fp = fn = 0
    h, w = pred.shape
    for i in range(h):
        for j in range(w):
            p, t = pred[i, j] == c, true[i, j] == c
            tp += p and t
            fp += p and not t
            fn += t and not p
    return 1.0 if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)


def brute_accuracy(pred, true):
    h, w = pred.shape
    return sum(pred[i, j] == true[i, j] for i in range(h) for j in range(w)) / (h * w)


def test_metric_oracles():
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(1000):
        k = int(rng.integers(2, 5))
        p, t = rng.integers(0, k, (16, 16)), rng.integers(0, k, (16, 16))
        mismatches += pixel_accuracy(p, t) != brute_accuracy(p, t)
        mismatches += sum(dice_coefficient(p, t, c) != brute_dice(p, t, c) for c in range(4))
    m = rng.integers(0, 4, (16, 16))
    identical = all(dice_coefficient(m, m, c) == 1.0 for c in range(4))
    disjoint = dice_coefficient(np.zeros((16, 16), int), np.ones((16, 16), int), 1) == 0.0
    ok = mismatches == 0 and identical and disjoint
    record_acceptance("metric oracles", ok,
                      f"1000 pairs, {mismatches} mismatches; identical->1.0 {identical}; disjoint->0.0 {disjoint}")
    assert ok


# -- 3 -----------------------------------------------------------------------


def test_adam_oracle():
    params = {"theta": np.array([1.0])}
    state = AdamState.for_params(params, alpha=0.1)
    theta, m, v = 1.0, 0.0, 0.0
    worst = 0.0
    for t in range(1, 101):
        g = 2.0 * theta
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta -= 0.1 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
        adam_step(params, {"theta": 2.0 * params["theta"]}, state)
        worst = max(worst, abs(params["theta"][0] - theta))
    ok = worst <= 1e-12 and state.t == 100
    record_acceptance("Adam oracle", ok, f"max |diff| over 100 steps {worst:.1e} (<= 1e-12)")
    assert ok


# -- 4 -----------------------------------------------------------------------


def test_overfit_smoke(capsys, tmp_path):
    start = time.perf_counter()
    tiles = [generate_tile(500 + i, 32) for i in range(8)]
    x = np.stack([t.model_input() for t in tiles])
    y = np.stack([t.mask for t in tiles])
    model = build_unet(UNetConfig(2, 8, 4, 4, 0.07, True, 32), seed=0)
    state = AdamState.for_params(model.params)
    # train the full 500-step overfit budget, noting when eval-mode train Dice first reaches 0.95
    first_hit, dice = None, 0.0
    while state.t < 500:
        fit(model, state, x, y, steps=25, batch_size=8, seed=0, epoch_offset=state.t)
        dice = evaluate(model, x, y).macro_dice
        if first_hit is None and dice >= 0.95:
            first_hit = state.t
    seconds = time.perf_counter() - start

    # the overfit checkpoint, used through the CLI, reproduces a training tile's mask
    save_checkpoint(tmp_path / "overfit.ckpt", Checkpoint(model, state))
    (tmp_path / "t.png").write_bytes(encode_image(tiles[0].landform))
    (tmp_path / "h.png").write_bytes(encode_height(tiles[0].height))
    cli_ok("segment", "--checkpoint", tmp_path / "overfit.ckpt", "--input", tmp_path / "t.png",
           "--height", tmp_path / "h.png", "--out", tmp_path / "seg")
    seg = decode_mask(tmp_path / "seg_mask.png")
    seg_dice = macro_dice(seg, tiles[0].mask, 4)

    ok = first_hit is not None and dice >= 0.95 and seconds < 600 and seg_dice >= 0.95
    record_acceptance("overfit smoke", ok,
                      f"train macro Dice >= 0.95 first at step {first_hit} (<= 500), {dice:.4f} at step "
                      f"{state.t}, {seconds:.0f}s (< 600); CLI segment of a training tile Dice {seg_dice:.4f}")
    assert ok


# -- 5 -----------------------------------------------------------------------


@pytest.mark.slow
def test_desk_scale(desk, capsys):
    root = desk["root"]
    ck = root / "run" / "best.ckpt"
    rep = read_report(capsys, "eval", "--checkpoint", ck, "--data", root / "data", "--split", "val")
    _, x_tr, _ = load_split(root / "data", "train")
    _, x_val, _ = load_split(root / "data", "val")
    dice, acc = rep["macro_dice"], rep["pixel_accuracy"]
    ok = (len(x_tr) == 512 and len(x_val) == 128 and dice >= TARGET_DICE and acc >= TARGET_ACC
          and desk["seconds"] < 45 * 60)
    record_acceptance("desk-scale analogue", ok,
                      f"val macro Dice {dice:.4f} (>= {TARGET_DICE}), val accuracy {acc:.4f} (>= {TARGET_ACC}), "
                      f"gendata+train {desk['seconds'] / 60:.1f} min (< 45)")
    print(rep["_text"])
    assert ok


# -- 6 -----------------------------------------------------------------------


@pytest.mark.slow
def test_cbir(desk, tmp_path):
    root = desk["root"]
    model = load_checkpoint(root / "run" / "best.ckpt").model
    ids, x, y = load_split(root / "data", "val")
    ids, x, y = ids[:100], x[:100], y[:100]
    cli_ok("index", "--checkpoint", root / "run" / "best.ckpt", "--data", root / "data",
           "--split", "val", "--limit", 100, "--out", tmp_path / "val.idx")
    index = cbir.load_index(tmp_path / "val.idx")
    names = [f"{i:05d}" for i in ids]
    images = dict(zip(names, x))
    self_hits = sum(cbir.query(index, model, img, 1)[0] == (n, 0) for n, img in images.items())
    majority = {n: int(np.bincount(m.ravel(), minlength=4).argmax()) for n, m in zip(names, y)}
    precision = cbir.majority_class_precision(index, model, images, majority, k=5)
    cbir.save_index(tmp_path / "copy.idx", cbir.load_index(tmp_path / "val.idx"))
    byte_exact = (tmp_path / "copy.idx").read_bytes() == (tmp_path / "val.idx").read_bytes()
    ok = len(index) == 100 and self_hits == 100 and precision >= 0.8 and byte_exact
    record_acceptance("CBIR", ok,
                      f"self-retrieval {self_hits}/100 at rank 1 distance 0; majority-class precision@5 "
                      f"{precision:.3f} (>= 0.8); save/load byte-exact {byte_exact}")
    assert ok


# -- 7 -----------------------------------------------------------------------


@pytest.mark.slow
def test_determinism(desk, tmp_path, capsys):
    second = desk_pipeline(tmp_path)
    a, b = desk["root"], second["root"]
    same_data = all((a / "data" / p.relative_to(b / "data")).read_bytes() == p.read_bytes()
                    for p in (b / "data").rglob("*") if p.is_file())
    same_log = (a / "run" / "metrics.csv").read_bytes() == (b / "run" / "metrics.csv").read_bytes()
    same_ckpt = all((a / "run" / n).read_bytes() == (b / "run" / n).read_bytes()
                    for n in ("final.ckpt", "best.ckpt"))
    ev = [read_report(capsys, "eval", "--checkpoint", r / "run" / "final.ckpt", "--data", r / "data")["_text"]
          for r in (a, b)]
    ok = same_data and same_log and same_ckpt and ev[0] == ev[1]
    record_acceptance("determinism", ok,
                      f"two desk-scale gendata->train->eval runs: dataset identical {same_data}, "
                      f"metrics log identical {same_log}, checkpoints bit-identical {same_ckpt}, "
                      f"eval output identical {ev[0] == ev[1]}")
    assert ok


# -- 8 -----------------------------------------------------------------------


@pytest.mark.slow
def test_persistence(desk, tmp_path, monkeypatch):
    root = desk["root"]
    path = root / "run" / "final.ckpt"
    raw = path.read_bytes()
    ck = loads(raw)
    resaved = dumps(ck) == raw
    x = load_split(root / "data", "val")[1][:4]
    a, _ = forward(load_checkpoint(path).model, x, "eval")
    b, _ = forward(loads(dumps(ck)).model, x, "eval")
    same_output = np.array_equal(a, b)

    masks = [class_assign(a)[i] for i in range(len(a))] + [generate_tile(i, 64).mask for i in range(20)]
    masks_exact = all(np.array_equal(decode_mask(encode_mask(m)), m) for m in masks)

    corrupt = {
        "truncated": raw[:-100],
        "bit flip": raw[:500] + bytes([raw[500] ^ 1]) + raw[501:],
        "bad magic": b"X" + raw[1:],
        "bad version": raw[:8] + b"\x07" + raw[9:],
        "empty": b"",
    }
    rejected = 0
    for data in corrupt.values():
        try:
            loads(data)
        except CheckpointError:
            rejected += 1

    # a save that fails mid-way leaves the previous file untouched
    def failing_replace(src, dst):
        raise OSError("simulated disk full")

    target = tmp_path / "keep.ckpt"
    target.write_bytes(raw)
    monkeypatch.setattr(D.os, "replace", failing_replace)
    try:
        save_checkpoint(target, ck)
        failed_cleanly = False
    except OSError:
        failed_cleanly = target.read_bytes() == raw and not list(tmp_path.glob(".*.tmp"))
    monkeypatch.undo()

    ok = resaved and same_output and masks_exact and rejected == len(corrupt) and failed_cleanly
    record_acceptance("persistence", ok,
                      f"checkpoint save/load/save byte-identical {resaved}, outputs identical {same_output}; "
                      f"{len(masks)} mask round trips exact {masks_exact}; corrupt files rejected "
                      f"{rejected}/{len(corrupt)}; failed save keeps prior file {failed_cleanly}")
    assert ok
