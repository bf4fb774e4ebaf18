import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _support import INTR, chair, make_proposal, naive_energy, random_window
from semslam.crf import (
    INFEASIBLE,
    Assignment,
    CrfFrame,
    CrfObject,
    CrfWindow,
    Transition,
    _icm,
    _Tables,
    beta,
    build_window,
    class_code,
    encode_sequence,
    high_order,
    initial_assignment,
    pairwise,
    select,
    total_energy,
    unary,
)
from semslam.geometry import BBox2D, Pose
from semslam.scenario import camera_pose
from semslam.world_sim import Detection, Frame, NoiseConfig, World, simulate_frame


def _frame(dets):
    return Frame(0, dets, [], [], Pose.identity(), np.zeros((0, 3)))


# -- semantic sequences -----------------------------------------------------


def test_encode_examples():
    assert encode_sequence(_frame([])) == ()
    assert encode_sequence(_frame([Detection(BBox2D(5, 5, 9, 9), "chair", 1.0)])) == ("000001",)
    right = Detection(BBox2D(50, 10, 60, 20), "sofa", 1.0)
    left = Detection(BBox2D(10, 10, 20, 20), "chair", 1.0)
    assert encode_sequence(_frame([right, left])) == ("000001", "000010")


def test_class_codes_are_six_bits_and_unique():
    codes = {class_code(x) for x in ("chair", "sofa", "door", "person", "lamp")}
    assert len(codes) == 5 and all(len(c) == 6 and set(c) <= {"0", "1"} for c in codes)


def test_beta_examples():
    c, s, d = class_code("chair"), class_code("sofa"), class_code("door")
    assert beta([c, s], [s, c]) == 1.0
    assert beta([c], [s]) == 0.0
    assert beta([c, c, s], [c, s, d]) == 0.5
    assert beta([], []) == 1.0


seqs = st.lists(st.sampled_from(["000001", "000010", "000011", "000100"]), max_size=6)


@settings(max_examples=100, deadline=None)
@given(seqs, seqs)
def test_beta_symmetric_bounded(a, b):
    v = beta(a, b)
    assert v == beta(b, a)
    assert 0.0 <= v <= 1.0
    assert beta(a, a) == 1.0


# -- unary --------------------------------------------------------------------


def _stub_proposal(score, centroid, box):
    p = make_proposal(chair((3.0, 0.0)), camera_pose([0, 0, 1.0], 0, 0.15).inverse(), score)
    return p.__class__(p.model, p.cam_from_ground, 0, "chair", score, np.asarray(centroid, float), 1.0, False, box)


def test_unary_examples():
    box = BBox2D(0, 0, 30, 40)  # diagonal 50
    assert unary(_stub_proposal(0.5, (15, 20), box), 1.0, box) == pytest.approx(-0.5)
    assert unary(_stub_proposal(0.9, (15 + 30, 20 + 40), box), 1.0, box) == 0.0
    assert unary(_stub_proposal(0.0, (15, 20), box), 1.0, box) == 0.0
    assert unary(_stub_proposal(0.8, (15 + 15, 20 + 20), box), 0.5, box) == pytest.approx(0.5 * -0.8 * 0.5)


# -- pairwise -----------------------------------------------------------------


def _two_frame(beta_, shared, shift_fraction=0.0):
    pose = camera_pose([0, 0, 1.0], 0, 0.15)
    cfw = pose.inverse()
    prev = make_proposal(chair((3.0, 0.0)), cfw, 0.8)
    b = prev.bbox
    dx = shift_fraction * b.width
    cur = make_proposal(chair((3.0, 0.0)), cfw, 0.8, bbox=BBox2D(b.x_min + dx, b.y_min, b.x_max + dx, b.y_max))
    frames = [
        CrfFrame(0, [CrfObject(0, "chair", 1.0, prev.bbox, [prev])]),
        CrfFrame(1, [CrfObject(0, "chair", 1.0, cur.bbox, [cur])]),
    ]
    return CrfWindow(frames, [Transition(Pose.identity(), beta_, shared, {0: 0})], INTR)


def test_pairwise_static_identical_is_zero():
    w = _two_frame(0.0, 1.0)
    binary = Assignment([[0], [0]]).to_binary(w)
    assert pairwise(w, 1, binary) == pytest.approx(0.0, abs=1e-12)


def test_pairwise_vanishes_when_beta_is_one():
    w = _two_frame(1.0, 1.0, 0.25)
    assert pairwise(w, 1, Assignment([[0], [0]]).to_binary(w)) > 0
    u = sum(unary(o.proposals[0], o.alpha, o.bbox) for f in w.frames for o in f.objects)
    assert total_energy(w, Assignment([[0], [0]])) == pytest.approx(u)


def test_pairwise_known_iou():
    # equal boxes shifted by a quarter width overlap with IOU 0.75 / 1.25 = 0.6
    w = _two_frame(0.0, 1.0, 0.25)
    binary = Assignment([[0], [0]]).to_binary(w)
    assert pairwise(w, 1, binary) == pytest.approx(0.4, abs=1e-9)
    u = sum(unary(o.proposals[0], o.alpha, o.bbox) for f in w.frames for o in f.objects)
    assert total_energy(w, Assignment([[0], [0]])) == pytest.approx(u + 0.4, abs=1e-9)


# -- high order and totals --------------------------------------------------------


def _window_with(n_frames, n_props):
    pose = camera_pose([0, 0, 1.0], 0, 0.15)
    props = [make_proposal(chair((3.0, 0.1 * i)), pose.inverse(), 0.5) for i in range(n_props)]
    frames = [CrfFrame(k, [CrfObject(0, "chair", 1.0, props[0].bbox, props)]) for k in range(n_frames)]
    trs = [Transition(Pose.identity(), 0.0, 0.5, {0: 0}) for _ in range(n_frames - 1)]
    return CrfWindow(frames, trs, INTR)


def test_high_order_examples():
    w = _window_with(3, 2)
    one_each = [[np.array([1, 0])], [np.array([0, 1])], [np.array([1, 0])]]
    assert high_order(w, one_each, 0) == 0.0
    double = [[np.array([1, 1])], [np.array([0, 0])], [np.array([0, 0])]]
    assert high_order(w, double, 0) == INFEASIBLE
    assert total_energy(w, double) == INFEASIBLE
    none = [[np.array([0, 0])]] * 3
    assert high_order(w, none, 0) == 0.0


def test_total_energy_simple_cases():
    w = _window_with(1, 1)
    assert total_energy(w, Assignment.empty(w)) == 0.0
    o = w.frames[0].objects[0]
    assert total_energy(w, Assignment([[0]])) == pytest.approx(unary(o.proposals[0], o.alpha, o.bbox))


@pytest.mark.parametrize("seed", range(10))
def test_total_energy_matches_naive_sum(seed):
    w, poses = random_window(np.random.default_rng(seed))
    rng = np.random.default_rng(1000 + seed)
    choices = [[None if rng.uniform() < 0.2 else int(rng.integers(len(o.proposals))) for o in f.objects] for f in w.frames]
    assert total_energy(w, Assignment(choices)) == pytest.approx(naive_energy(w, poses, choices), abs=1e-9)


# -- selection ---------------------------------------------------------------------


def test_single_negative_unary_selected():
    w = _window_with(1, 1)
    a, e = select(w)
    assert a.choices == [[0]] and e < 0


def _brute_force(w):
    options = [[None] + list(range(len(o.proposals))) for f in w.frames for o in f.objects]
    best = None
    for combo in itertools.product(*options):
        it = iter(combo)
        choices = [[next(it) for _ in f.objects] for f in w.frames]
        e = total_energy(w, Assignment(choices))
        if best is None or e < best - 1e-12:
            best = e
    return best


@pytest.mark.parametrize("seed", range(8))
def test_enumeration_equals_brute_force(seed):
    w, _ = random_window(np.random.default_rng(50 + seed), n_frames=2, max_objects=2, max_proposals=3)
    _, e = select(w, method="enumerate")
    assert e == pytest.approx(_brute_force(w), abs=1e-9)


@pytest.mark.parametrize("seed", range(10))
def test_icm_never_worse_than_initialisation(seed):
    w, _ = random_window(np.random.default_rng(seed))
    tables = _Tables(w)
    start = tables.energy(tables.top)
    idx, e = _icm(tables, 50)
    assert e <= start + 1e-12
    assert e == pytest.approx(tables.energy(idx))


@pytest.mark.parametrize("method", ["enumerate", "icm", "auto"])
def test_select_returns_feasible(method):
    for seed in range(10):
        w, _ = random_window(np.random.default_rng(seed))
        a, e = select(w, method=method)
        binary = a.to_binary(w)
        assert all(np.asarray(vec).sum() <= 1 for row in binary for vec in row)
        assert e < INFEASIBLE
        assert total_energy(w, a) == pytest.approx(e, abs=1e-9)


def test_select_unknown_method():
    w = _window_with(1, 1)
    with pytest.raises(ValueError):
        select(w, method="annealing")


def test_build_window_from_simulated_frames():
    from semslam.proposals import DEFAULT_DATABASE, frame_proposals
    from _support import camera_plane

    world = World([chair((3.0, 0.5)), chair((3.5, -0.8))])
    poses = [camera_pose([0.05 * k, 0, 1.0], 0.0, 0.15) for k in range(3)]
    frames = [simulate_frame(world, p, INTR, NoiseConfig(seed=2), k) for k, p in enumerate(poses)]
    props = [frame_proposals(f, camera_plane(p), INTR, DEFAULT_DATABASE) for f, p in zip(frames, poses)]
    w = build_window(frames, props, poses, INTR)
    assert w.N == 3
    for tr in w.transitions:
        assert tr.beta == 1.0  # same two chairs every frame
        assert sorted(tr.matches.items()) == [(0, 0), (1, 1)]
    a, _ = select(w)
    assert all(c is not None for row in a.choices for c in row)
    assert initial_assignment(w).choices == [[0, 0]] * 3


def test_window_validation():
    with pytest.raises(ValueError):
        CrfWindow([], [], INTR)
    with pytest.raises(ValueError):
        CrfWindow([CrfFrame(0, []), CrfFrame(1, [])], [], INTR)
