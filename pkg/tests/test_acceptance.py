"""One test per acceptance criterion; each records a PASS/FAIL line that the
terminal summary prints at the end of the run."""

import math
import os
import time

import numpy as np

from _gradients import CHECKS
from _support import chair, noisy, random_window, single_object_proposals, sofa, viewing_pose
from semslam.association import LandmarkRegistry, association_weights
from semslam.crf import INFEASIBLE, select, total_energy
from semslam.geometry import CuboidModel
from semslam.world_sim import NoiseConfig


def test_gradient_suite(acceptance):
    t0 = time.perf_counter()
    worst = {}
    for kind, check in CHECKS.items():
        rng = np.random.default_rng(2024)
        worst[kind] = max(check(rng) for _ in range(100))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-5 and elapsed < 5.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.2f} s"
    acceptance("gradient suite: rel err < 1e-5 on 5 x 100 configs, < 5 s", ok, detail)
    assert ok, detail


def test_crf_oracle_suite(acceptance):
    exact = 0
    honest = True
    feasible = True
    for seed in range(100):
        w, _ = random_window(np.random.default_rng(seed), n_frames=3, max_objects=3, max_proposals=4)
        _, e_min = select(w, method="enumerate")
        a, e_icm = select(w, method="icm")
        evaluated = total_energy(w, a)
        exact += abs(e_icm - e_min) <= 1e-9
        honest &= e_icm >= evaluated - 1e-9
        binary = a.to_binary(w)
        feasible &= evaluated < INFEASIBLE and all(np.asarray(v).sum() <= 1 for row in binary for v in row)
    ok = exact >= 90 and honest and feasible
    detail = f"ICM exact {exact}/100, energy consistent {honest}, all feasible {feasible}"
    acceptance("CRF oracle: ICM optimal >= 90%, never under-reports, feasible", ok, detail)
    assert ok, detail


def _random_landmark(rng, label):
    xy = rng.uniform(-4, 4, 2)
    if label == "sofa":
        return sofa(xy, rng.uniform(-math.pi, math.pi))
    m = chair(xy)
    return m if label == "chair" else CuboidModel(m.center, (0.9, 0.1, 2.0), 0.0, "door").moved([xy[0], xy[1], 1.0])


def test_association_oracle_suite(acceptance):
    agree = gate_violations = 0
    labels = ["chair", "sofa", "door"]
    for case in range(100):
        rng = np.random.default_rng(10_000 + case)
        reg = LandmarkRegistry()
        for _ in range(int(rng.integers(0, 11))):
            reg.create(_random_landmark(rng, labels[rng.integers(3)]), 0)
        meas = _random_landmark(rng, labels[rng.integers(3)])
        p0, pc, sigma = rng.uniform(0.05, 1.0), rng.uniform(0.05, 1.0), rng.uniform(0.2, 1.5)
        aw = association_weights(meas, reg, None, p0, pc, sigma)
        # brute force over every landmark, label gate included
        scores = []
        for lm in reg:
            gate = 1.0 if lm.label == meas.label else 0.0
            d2 = float(np.sum((lm.center - meas.center) ** 2))
            scores.append(gate * p0 * pc * math.exp(-d2 / (2 * sigma**2)))
        best = None
        if scores and max(scores) > 0:
            best = list(reg)[int(np.argmax(scores))].id
        agree += aw.argmax() == best
        matching = {lm.id for lm in reg if lm.label == meas.label}
        gate_violations += set(aw.ids) != matching
    ok = agree == 100 and gate_violations == 0
    detail = f"argmax agreement {agree}/100, label gate violations {gate_violations}"
    acceptance("association oracle: argmax = brute force 100%, 0 gate violations", ok, detail)
    assert ok, detail


def test_geometry_round_trip(acceptance):
    exact_errors, noisy_errors = [], []
    missing = 0
    for k in range(200):
        rng = np.random.default_rng(k)
        xy = rng.uniform(-3, 3, 2)
        model = chair(xy)
        pose = viewing_pose(xy, rng, r_max=4.0)
        props = single_object_proposals(model, pose, NoiseConfig.noiseless(k), t=k)
        if not props:
            missing += 1
        else:
            exact_errors.append(np.linalg.norm(props[0].center - model.center))
        props = single_object_proposals(model, pose, noisy(k), t=k)
        noisy_errors.append(np.linalg.norm(props[0].center - model.center) if props else np.inf)
    worst = max(exact_errors) if exact_errors else np.inf
    median = float(np.median(noisy_errors))
    ok = missing == 0 and worst < 1e-6 and median < 0.05
    detail = f"noiseless max {worst:.1e} m ({missing} missed), 2-px median {100 * median:.2f} cm over 200"
    acceptance("geometry round trip: noiseless < 1e-6 m, noisy median < 5 cm", ok, detail)
    assert ok, detail


def test_end_to_end_loop(acceptance, packaged_run):
    rep = packaged_run["report"]
    ate, dr = rep["ate_rmse"], rep["ate_rmse_dead_reckoning"]
    ok = ate <= 0.5 * dr and packaged_run["elapsed"] < 30.0 and rep["frames"] == 200
    detail = f"ATE {ate:.4f} m vs dead reckoning {dr:.4f} m; {packaged_run['elapsed']:.1f} s"
    acceptance("end-to-end loop: ATE <= 50% of dead reckoning, run < 30 s", ok, detail)
    assert ok, detail


def test_zero_noise_end_to_end(acceptance, zero_noise_run):
    rep = zero_noise_run["report"]
    errors = [lm["error"] for lm in rep["landmarks"]]
    unmatched = sum(e is None for e in errors)
    worst = max((e for e in errors if e is not None), default=np.inf)
    ok = rep["ate_rmse"] < 1e-6 and errors and unmatched == 0 and worst < 1e-6
    detail = f"ATE {rep['ate_rmse']:.1e} m, worst landmark {worst:.1e} m over {len(errors)} ({rep['frames']} frames)"
    acceptance("zero noise: ATE < 1e-6 m and every landmark < 1e-6 m", ok, detail)
    assert ok, detail


def test_determinism(acceptance, short_runs):
    a, b = short_runs["full_a"]["dir"], short_runs["full_b"]["dir"]
    names = ["estimated.tum", "map.json", "report.json"]
    same = {n: open(os.path.join(a, n), "rb").read() == open(os.path.join(b, n), "rb").read() for n in names}
    ok = all(same.values())
    detail = ", ".join(f"{n} {'identical' if v else 'DIFFERS'}" for n, v in same.items())
    acceptance("determinism: identical config and seed give identical files", ok, detail)
    assert ok, detail
