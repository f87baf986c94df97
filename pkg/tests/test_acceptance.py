"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The lines are printed as each test finishes and collected again in the pytest
terminal summary (see conftest.py), so ``pytest tests/test_acceptance.py``
shows them without ``-s``.
"""

import contextlib
import dataclasses
import itertools
import time

import numpy as np
import pytest

from scantraj import autolabel, dmd, metrics, stmap, synth, traj
from scantraj.autolabel import LabeledDataset
from scantraj.cli import data_path, load_pipeline_config, run_pipeline
from scantraj.dmd import RankRule
from scantraj.resunet import (DecoderBlock, EncoderBlock, NetConfig, ResUNetPlus, loss_and_grads,
                              train)
from scantraj.resunet.layers import (BatchNorm, Context, Conv, ConvTranspose, ReLU,
                                     softmax_cross_entropy)
from scantraj.resunet.train import inverse_frequency_weights, to_input
from scantraj.synth import BackgroundSpec, SceneSpec, SpeedProfile, VehicleSpec
from scantraj.traj import CalibrationTable, WorldTrajectory

import metric_oracles as oracle
from dmd_oracles import dense_operator_eigs, matched_error, synthetic_modes
from gradcheck import check_layer, eval_buffers, numeric_grad, perturbed_params, rel_err

RESULTS: list[str] = []


@contextlib.contextmanager
def criterion(number: int, title: str, budget_s: float | None = None):
    """Time the block and record one PASS/FAIL line; failures still propagate."""
    start = time.perf_counter()
    notes: list[str] = []
    try:
        yield notes
        elapsed = time.perf_counter() - start
        if budget_s is not None:
            assert elapsed < budget_s, f"took {elapsed:.1f} s, budget {budget_s:g} s"
        status = "PASS"
    except BaseException as exc:
        status = "FAIL"
        notes.append(str(exc).splitlines()[0] if str(exc) else type(exc).__name__)
        raise
    finally:
        elapsed = time.perf_counter() - start
        line = f"[{status}] criterion {number}: {title} ({elapsed:.1f} s)"
        if notes:
            line += " | " + "; ".join(notes)
        RESULTS.append(line)
        print(line)


# 1 ------------------------------------------------------------------------

def test_c1_dmd_matches_dense_pseudoinverse_operator():
    with criterion(1, "DMD eigenvalues equal dense X'X^+ eigenvalues", 10.0) as notes:
        rng = np.random.default_rng(101)
        worst = 0.0
        for _ in range(100):
            n = int(rng.integers(1, 13))
            m = int(rng.integers(2, 11))
            snap = dmd.make_snapshots(rng.standard_normal((n, m)))
            r = min(n, m - 1)
            assert np.linalg.matrix_rank(snap.prior) == r
            modes = dmd.compute_dmd(snap, RankRule.fixed(r))
            ref = dense_operator_eigs(snap.prior, snap.posterior, r)
            worst = max(worst, matched_error(modes.eigenvalues, ref))
        notes.append(f"worst |dlambda| {worst:.2e}")
        assert worst < 1e-8


# 2 ------------------------------------------------------------------------

def test_c2_stationary_mode_recovery():
    with criterion(2, "only background modes are stationary; plate recovered") as notes:
        cal = CalibrationTable.linear(96, 2.0, 10.0)
        spec = SceneSpec(96, 400, vehicles=(
            VehicleSpec(2.0, SpeedProfile("constant", 60.0), 12.0),
            VehicleSpec(20.0, SpeedProfile("constant", 48.0), 12.0, (60, 200, 230))),
            background=BackgroundSpec("striped"))
        image, gt = synth.generate(spec, cal)
        assert len(traj.extract_strands(gt.truth_mask, 1)) == 2
        modes = dmd.fit_dmd(stmap.to_gray(image).values)
        split = dmd.split_background(modes)
        dist = np.abs(np.log(modes.eigenvalues))
        plate_col = gt.background_plate[:, 0]
        # a mode is "background" when its shape is the static plate profile
        cos = np.abs(plate_col @ modes.modes) / (np.linalg.norm(plate_col)
                                                 * np.linalg.norm(modes.modes, axis=0))
        background = {int(i) for i in np.flatnonzero(cos > 0.99)}
        stationary = set(split.background_mode_indices)
        frac = float(np.mean(np.abs(split.background - gt.background_plate) <= 0.05))
        moving = np.delete(dist, list(stationary))
        notes.append(f"stationary {sorted(stationary)} background {sorted(background)} "
                     f"min moving |log l| {moving.min():.3f} plate within 0.05 on {frac:.1%}")
        assert background and stationary == background
        assert all(dist[i] <= 1e-2 for i in stationary)
        assert frac >= 0.95


# 3 ------------------------------------------------------------------------

def test_c3_exact_reconstruction():
    with criterion(3, "rank-k data reconstructed at rank k") as notes:
        rng = np.random.default_rng(303)
        worst = 0.0
        for n, m, k in [(10, 12, 3), (20, 30, 5), (6, 8, 6), (40, 9, 8), (64, 50, 10), (3, 20, 3)]:
            assert k <= min(n, m - 1)
            data, _ = synthetic_modes(rng, n, m, k)
            recon = dmd.reconstruct(dmd.fit_dmd(data, RankRule.fixed(k)))
            worst = max(worst, float(np.linalg.norm(recon - data) / np.linalg.norm(data)))
        notes.append(f"worst relative error {worst:.2e}")
        assert worst < 1e-6


# 4 ------------------------------------------------------------------------

def _decoder_errors(rng):
    dec = DecoderBlock("d", 1, 2, (2, 3))
    P = perturbed_params(dec, rng)
    skip = rng.standard_normal((2, 2, 4, 4))
    deeper = [rng.standard_normal((2, 3, 2, 2))]
    bottom = rng.standard_normal((2, 6, 1, 1))
    out, cache = dec.forward(P, skip, deeper, bottom, Context(True))
    R = rng.standard_normal(out.shape)

    def f():
        return float(np.sum(dec.forward(P, skip, deeper, bottom, Context(True))[0] * R))

    G = {}
    dskip, ddeeper, dbottom = dec.backward(P, G, cache, R)
    errors = {"skip": rel_err(dskip, numeric_grad(f, skip)),
              "deeper": rel_err(ddeeper[0], numeric_grad(f, deeper[0])),
              "bottom": rel_err(dbottom, numeric_grad(f, bottom))}
    errors.update({k: rel_err(G[k], numeric_grad(f, p)) for k, p in P.items()})
    return errors


def _batchnorm_eval_errors(rng):
    bn = BatchNorm("bn", 3)
    P = perturbed_params(bn, rng)
    buf = eval_buffers(bn, rng)
    x = rng.standard_normal((2, 3, 4, 4))
    R = rng.standard_normal(x.shape)
    _, cache = bn.forward(P, x, Context(False, buf))
    G = {}
    dx = bn.backward(P, G, cache, R)

    def f():
        return float(np.sum(bn.forward(P, x, Context(False, buf))[0] * R))

    errors = {"input": rel_err(dx, numeric_grad(f, x))}
    errors.update({k: rel_err(G[k], numeric_grad(f, p)) for k, p in P.items()})
    return errors


def _loss_errors(rng):
    logits = rng.standard_normal((2, 2, 4, 4))
    t = rng.integers(0, 2, (2, 4, 4))
    w = (0.7, 2.5)
    _, g = softmax_cross_entropy(logits, t, w)
    return {"logits": rel_err(g, numeric_grad(lambda: softmax_cross_entropy(logits, t, w)[0],
                                               logits))}


def _network_errors(rng, probes=4):
    # 8x8 input keeps the bottom bridge at 2x2 so its batch norms see more than two
    # values per channel; the per-layer checks above already cover 4x4 tensors
    cfg = NetConfig(levels=2, channels=(2, 3), input_tile=8, dtype="float64")
    model = ResUNetPlus(cfg)
    net = model.init_params(1)
    for k, v in net.params.items():
        net.params[k] = v + rng.normal(0.0, 0.3, v.shape)
    x = rng.standard_normal((3, 3, 8, 8))
    t = rng.integers(0, 2, (3, 8, 8))
    _, grads, dx = loss_and_grads(model, net, x, t, (1.0, 2.0), update_stats=False)

    def f():
        return loss_and_grads(model, net, x, t, (1.0, 2.0), update_stats=False)[0]

    def probe(analytic, arr):
        entries = sorted({tuple(int(rng.integers(0, s)) for s in arr.shape) for _ in range(probes)})
        sel = tuple(np.array(entries).T)
        return rel_err(analytic[sel], numeric_grad(f, arr, entries)[sel])

    errors = {"input": probe(dx, x)}
    errors.update({k: probe(grads[k], p) for k, p in net.params.items()})
    return errors


def test_c4_gradient_checks():
    with criterion(4, "finite-difference gradient checks on every layer", 60.0) as notes:
        rng = np.random.default_rng(404)
        single = {
            "conv3x3": (Conv("c", 3, 3, 3), 3), "conv3x3_s2": (Conv("c", 3, 3, 3, stride=2), 3),
            "conv1x1": (Conv("c", 3, 2, 1), 3),
            "conv1x1_s2_nobias": (Conv("c", 3, 3, 1, stride=2, bias=False), 3),
            "convT_x2": (ConvTranspose("t", 3, 2, 2), 3), "convT_x4": (ConvTranspose("t", 3, 2, 4), 3),
            "batchnorm_train": (BatchNorm("bn", 3), 3), "relu": (ReLU(), 3),
            "encoder": (EncoderBlock("e", 3, 3), 3), "encoder_widen": (EncoderBlock("e", 2, 3), 2),
            "encoder_s2": (EncoderBlock("e", 3, 3, stride=2), 3),
        }
        errors = {}
        for label, (layer, cin) in single.items():
            P = perturbed_params(layer, rng)
            x = rng.standard_normal((2, cin, 4, 4))
            errors[label] = max(check_layer(layer, P, x, rng).values())
        errors["batchnorm_eval"] = max(_batchnorm_eval_errors(rng).values())
        errors["decoder"] = max(_decoder_errors(rng).values())
        errors["weighted_softmax_ce"] = max(_loss_errors(rng).values())
        errors["full_network"] = max(_network_errors(rng).values())
        worst = max(errors, key=errors.get)
        notes.append(f"{len(errors)} checks, worst {worst} {errors[worst]:.2e}")
        assert errors[worst] < 1e-6, errors


# 5 ------------------------------------------------------------------------

def test_c5_overfit_single_pair():
    with criterion(5, "toy network overfits one pair within 200 steps", 120.0) as notes:
        spec, cal = synth.load_scene(data_path("benchmark_scene.json"))
        image, gt = synth.generate(spec, cal)
        tile = image.pixels[32:96, 200:264].copy()
        mask = gt.truth_mask.labels[32:96, 200:264].copy()
        assert 0 < mask.mean() < 1
        cfg = NetConfig(batch_size=1)
        model = ResUNetPlus(cfg)
        net = model.init_params(0)
        weights = inverse_frequency_weights([mask])
        x = to_input(tile[None], cfg.in_channels, cfg.dtype)
        y = mask[None].astype(np.intp)
        initial = loss_and_grads(model, net, x, y, weights, update_stats=False)[0]
        result = train(net, cfg, LabeledDataset([tile], [mask], ["train"], tile=64), steps=200)
        final = loss_and_grads(model, result.net, x, y, weights, update_stats=False)[0]
        notes.append(f"loss {initial:.4f} -> {final:.2e} ({final / initial:.2%})")
        assert final < 0.1 * initial


# 6 ------------------------------------------------------------------------

def test_c6_synthetic_benchmark(tmp_path):
    with criterion(6, "10-vehicle benchmark: val mIoU, TPR and FPR", 15 * 60.0) as notes:
        config = load_pipeline_config("benchmark-pipeline")
        spec, _ = synth.load_scene(config["paths"]["scene"])
        assert len(spec.vehicles) == 10 and spec.shadows and spec.noise_sigma > 0
        report = run_pipeline(config, tmp_path)
        val_iou = report["history"][-1]["val_iou"]
        tr = report["traj"]
        notes.append(f"val mIoU {val_iou:.3f} TP {tr['tp']} FP {tr['fp']} FN {tr['fn']} "
                     f"TPR {tr['tpr']:.2f} FPR {tr['fpr']:.2f}")
        assert tr["mae_threshold_ft"] == 15.0
        assert val_iou >= 0.85
        assert tr["tpr"] >= 0.9 and tr["fpr"] <= 0.1


# 7 ------------------------------------------------------------------------

def _check_pair(p, t):
    score = metrics.segmentation_score(p, t)
    ref = oracle.accuracy_iou(p.tolist(), t.tolist())
    for key, value in ref.items():
        assert getattr(score, key) == value, (key, p.tolist(), t.tolist())
    for tol in (None, 1.0, 1.5, 2.5):
        use = metrics.default_bf_tolerance(p.shape) if tol is None else tol
        assert metrics.bf_score(p, t, tol) == oracle.bf(p.tolist(), t.tolist(), use)


def _mae_cases():
    t = np.arange(0.0, 5.0, 0.5)
    truth = WorldTrajectory(1, t, 12.0 * t)
    yield WorldTrajectory(2, t, 12.0 * t + 3.25), truth, 3.25
    yield WorldTrajectory(2, t, 12.0 * t - 3.25), truth, 3.25
    # alternating +-2 offset: mean |e| is exactly 2
    yield WorldTrajectory(2, t, 12.0 * t + np.where(np.arange(len(t)) % 2, 2.0, -2.0)), truth, 2.0
    # ramp offset 0, 1, ..., 9 -> 4.5
    yield WorldTrajectory(2, t, 12.0 * t + np.arange(len(t))), truth, 4.5
    # only the overlapping half contributes
    yield WorldTrajectory(2, t[5:], 12.0 * t[5:] + 8.0), truth, 8.0


def test_c7_metric_oracles():
    with criterion(7, "segmentation metrics equal brute force; MAE closed forms") as notes:
        exhaustive = 0
        for h, w in [(r, c) for r in range(1, 7) for c in range(1, 7) if r * c <= 6]:
            for bits in itertools.product((0, 1), repeat=2 * h * w):
                a = np.array(bits, dtype=np.uint8).reshape(2, h, w)
                _check_pair(a[0], a[1])
                exhaustive += 1
        rng = np.random.default_rng(707)
        sampled = 0
        for h in range(1, 7):
            for w in range(1, 7):
                for density in (0.2, 0.5, 0.8):
                    for _ in range(12):
                        p = (rng.random((h, w)) < density).astype(np.uint8)
                        t = (rng.random((h, w)) < density).astype(np.uint8)
                        _check_pair(p, t)
                        sampled += 1
        for detected, truth, want in _mae_cases():
            assert metrics.trajectory_mae(detected, truth) == want
        notes.append(f"{exhaustive} exhaustive pairs (<= 6 cells), {sampled} sampled up to 6x6")


# 8 ------------------------------------------------------------------------

def test_c8_noise_free_recovery():
    with criterion(8, "noise-free truth mask gives generator trajectories") as notes:
        spec, cal = synth.load_scene(data_path("benchmark_scene.json"))
        spec = dataclasses.replace(spec, noise_sigma=0.0, shadows=(),
                                   background=dataclasses.replace(spec.background,
                                                                  texture_sigma=0.0))
        _, gt = synth.generate(spec, cal)
        strands, pix, world = traj.mask_to_trajectories(gt.truth_mask, cal, 1)
        assert len(strands) == gt.vehicle_count == len(spec.vehicles)
        report = metrics.match_trajectories(world, gt.truth_trajectories)
        assert report.tp == gt.vehicle_count
        by_id = {p.strand_id: (p, w) for p, w in zip(pix, world)}
        worst_px = worst_ft = 0.0
        for det_id, truth_id, _ in report.pairs:
            p, w = by_id[det_id]
            i = [t.strand_id for t in gt.truth_trajectories].index(truth_id)
            truth, rows = gt.truth_trajectories[i], gt.front_rows[i]
            frames = np.rint(truth.times * cal.frame_rate).astype(int)
            got = dict(p.samples)
            # the strand outlives its truth samples while the tail is still in view;
            # there the front has left and the lower boundary sits on the last row
            assert set(frames.tolist()) <= set(got)
            assert all(got[f] == spec.n - 1 for f in set(got) - set(frames.tolist()))
            worst_px = max(worst_px, max(abs(got[f] - r) for f, r in zip(frames, rows)))
            di, ti = metrics.align(w, truth)
            assert len(di) == len(truth.times)
            worst_ft = max(worst_ft, float(np.max(np.abs(w.positions[di] - truth.positions[ti]))))
        notes.append(f"worst {worst_px:.3f} px, {worst_ft:.2f} ft (cell {cal.max_cell_ft:.3f} ft)")
        assert worst_px <= 1.0
        assert worst_ft <= cal.max_cell_ft


# 9 ------------------------------------------------------------------------

def _run_once(tmp):
    spec, cal = synth.load_scene(data_path("benchmark_scene.json"))
    image, gt = synth.generate(spec, cal)
    stmap.save_stmap(image, tmp / "map.stm")
    ds = autolabel.assemble_dataset([image], [gt.truth_mask], tile=32,
                                    augment=stmap.AugmentSpec.default(), seed=9)
    autolabel.save_dataset(ds, tmp / "dataset")
    cfg = NetConfig(levels=2, channels=(4, 8), input_tile=32, max_epochs=2, seed=9)
    result = train(ResUNetPlus(cfg).init_params(9), cfg, ds)
    files = sorted(p for p in tmp.rglob("*") if p.is_file())
    return {str(p.relative_to(tmp)): p.read_bytes() for p in files}, repr(result.history)


def test_c9_determinism(tmp_path):
    with criterion(9, "byte-identical STMaps, datasets and loss histories") as notes:
        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        files_a, hist_a = _run_once(tmp_path / "a")
        files_b, hist_b = _run_once(tmp_path / "b")
        notes.append(f"{len(files_a)} files compared")
        assert files_a.keys() == files_b.keys()
        assert all(files_a[k] == files_b[k] for k in files_a)
        assert hist_a == hist_b


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
