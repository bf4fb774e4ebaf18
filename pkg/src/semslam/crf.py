"""Proposal selection over a short window of frames with a multi-level CRF.

Every detection (object) in a frame owns a list of 3D proposals; a labelling
activates at most one of them. The energy is::

    sum_t sum_j alpha_j * unary(x_j^t)
  + sum_t s_t * (1 - beta_t) * pairwise(x^{t-1}, x^t)
  + (1 - beta_star) * high_order(x)

``high_order`` is 0 for feasible labellings and the :data:`INFEASIBLE`
sentinel otherwise.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import BBox2D, CameraIntrinsics, GeometryError, Pose, iou, project_model_bbox
from .proposals import Proposal3D
from .world_sim import Frame, tracks_in_box

INFEASIBLE = 1e18
MATCH_IOU = 0.2
DEFAULT_WINDOW = 5

CLASS_CODES = {
    "chair": "000001",
    "sofa": "000010",
    "door": "000011",
    "person": "000100",
}


def class_code(label: str) -> str:
    code = CLASS_CODES.get(label)
    if code is None:
        used = {int(c, 2) for c in CLASS_CODES.values()}
        free = next(k for k in range(1, 64) if k not in used)
        code = CLASS_CODES[label] = format(free, "06b")
    return code


def encode_sequence(frame: Frame) -> Tuple[str, ...]:
    """Class codes of the frame's detections in raster order of the box
    top-left corner (row first, then column)."""
    order = sorted(
        range(len(frame.detections)),
        key=lambda i: (frame.detections[i].bbox.y_min, frame.detections[i].bbox.x_min, i),
    )
    return tuple(class_code(frame.detections[i].label) for i in order)


def beta(a: Sequence[str], b: Sequence[str]) -> float:
    """Multiset Jaccard ratio of two semantic sequences; 1 for two empties."""
    ca, cb = Counter(a), Counter(b)
    union = sum((ca | cb).values())
    if union == 0:
        return 1.0
    return sum((ca & cb).values()) / union


def window_beta(current: Sequence[str], window: Sequence[Sequence[str]]) -> float:
    """Ratio of ``current`` against the multiset union of a window of sequences."""
    pooled = Counter()
    for seq in window:
        pooled |= Counter(seq)
    return beta(current, list(pooled.elements()))


def unary(p: Proposal3D, alpha: float, bbox: Optional[BBox2D] = None) -> float:
    """``alpha * -s * (1 - d)``, with ``d`` the centroid offset from the box
    centre normalised by the box diagonal and clamped to [0, 1]."""
    box = bbox if bbox is not None else p.bbox
    d = float(np.linalg.norm(np.asarray(p.centroid_px) - box.center)) / box.diagonal
    d = min(max(d, 0.0), 1.0)
    return alpha * (-p.score * (1.0 - d))


# -- window ------------------------------------------------------------------


@dataclass
class CrfObject:
    det_index: int
    label: str
    alpha: float
    bbox: BBox2D
    proposals: List[Proposal3D]
    tracks: frozenset = frozenset()


@dataclass
class CrfFrame:
    index: int
    objects: List[CrfObject]
    sequence: Tuple[str, ...] = ()


@dataclass
class Transition:
    """Link between frame ``k-1`` and ``k`` of a window."""

    H: Pose  # cur_from_prev
    beta: float
    shared: float
    matches: Dict[int, int] = field(default_factory=dict)  # cur object -> prev object

    @property
    def coefficient(self):
        return self.shared * (1.0 - self.beta)


@dataclass
class CrfWindow:
    frames: List[CrfFrame]
    transitions: List[Transition]
    intr: CameraIntrinsics
    beta_star: float = 1.0

    def __post_init__(self):
        if len(self.frames) < 1:
            raise ValueError("window needs at least one frame")
        if len(self.transitions) != len(self.frames) - 1:
            raise ValueError("need one transition per consecutive frame pair")

    @property
    def N(self):
        return len(self.frames)

    def variables(self):
        return [(t, j) for t, f in enumerate(self.frames) for j in range(len(f.objects))]


@dataclass
class Assignment:
    """Selected proposal index (or ``None``) per frame and object."""

    choices: List[List[Optional[int]]]

    def to_binary(self, window: CrfWindow):
        out = []
        for f, row in zip(window.frames, self.choices):
            out.append([
                np.array([1 if i == c else 0 for i in range(len(o.proposals))], dtype=int)
                for o, c in zip(f.objects, row)
            ])
        return out

    @classmethod
    def empty(cls, window: CrfWindow):
        return cls([[None] * len(f.objects) for f in window.frames])


def _tracks_in(frame: Frame, box: BBox2D):
    return tracks_in_box(frame, box)


def warp_bbox(p: Proposal3D, H: Pose, intr: CameraIntrinsics) -> Optional[BBox2D]:
    """Box of a previous-frame proposal re-projected into the current frame."""
    try:
        return project_model_bbox(p.model, H @ p.cam_from_ground, intr).bbox
    except GeometryError:
        return None


def match_objects(prev: CrfFrame, cur: CrfFrame, H: Pose, intr) -> Dict[int, int]:
    """Greedy same-class matching on warped box IOU (>= :data:`MATCH_IOU`)."""
    cands = []
    for m, po in enumerate(prev.objects):
        ref = warp_bbox(po.proposals[0], H, intr) if po.proposals else po.bbox
        if ref is None:
            continue
        for j, co in enumerate(cur.objects):
            if co.label != po.label:
                continue
            v = iou(ref, co.bbox)
            if v >= MATCH_IOU:
                cands.append((-v, j, m))
    cands.sort()
    out, used_prev = {}, set()
    for _, j, m in cands:
        if j in out or m in used_prev:
            continue
        out[j] = m
        used_prev.add(m)
    return out


def shared_ratio(prev: CrfFrame, cur: CrfFrame, matches: Dict[int, int]) -> float:
    shared = total = 0
    for j, m in matches.items():
        a, b = cur.objects[j].tracks, prev.objects[m].tracks
        shared += len(a & b)
        total += len(a | b)
    return shared / total if total else 0.0


def build_window(frames: Sequence[Frame], proposals: Sequence[Dict[int, List[Proposal3D]]], poses: Sequence[Pose], intr: CameraIntrinsics) -> CrfWindow:
    """Assemble a window from frames, their per-detection proposals and the
    current ``world_from_cam`` estimates."""
    cframes = []
    for f, props in zip(frames, proposals):
        objs = [
            CrfObject(i, f.detections[i].label, f.detections[i].score, f.detections[i].bbox, list(props[i]), _tracks_in(f, f.detections[i].bbox))
            for i in sorted(props)
        ]
        cframes.append(CrfFrame(f.index, objs, encode_sequence(f)))
    transitions = []
    for k in range(1, len(cframes)):
        H = poses[k].inverse() @ poses[k - 1]
        matches = match_objects(cframes[k - 1], cframes[k], H, intr)
        transitions.append(
            Transition(H, beta(cframes[k - 1].sequence, cframes[k].sequence), shared_ratio(cframes[k - 1], cframes[k], matches), matches)
        )
    b_star = window_beta(cframes[-1].sequence, [f.sequence for f in cframes])
    return CrfWindow(cframes, transitions, intr, b_star)


# -- energy ------------------------------------------------------------------


def _active(vec):
    idx = np.flatnonzero(np.asarray(vec))
    return [int(i) for i in idx]


def high_order(window: CrfWindow, binary, j: Optional[int] = None) -> float:
    """0 if every frame activates at most one proposal per object (restricted
    to object ``j`` when given), else :data:`INFEASIBLE`."""
    for row in binary:
        objs = range(len(row)) if j is None else ([j] if j < len(row) else [])
        for jj in objs:
            if np.asarray(row[jj]).sum() > 1:
                return INFEASIBLE
    return 0.0


def pairwise(window: CrfWindow, k: int, binary) -> float:
    """Unscaled pairwise term between frames ``k-1`` and ``k``."""
    tr = window.transitions[k - 1]
    prev, cur = window.frames[k - 1], window.frames[k]
    total = 0.0
    for j, m in tr.matches.items():
        for i in _active(binary[k][j]):
            for n in _active(binary[k - 1][m]):
                warped = warp_bbox(prev.objects[m].proposals[n], tr.H, window.intr)
                overlap = 0.0 if warped is None else iou(cur.objects[j].proposals[i].bbox, warped)
                total += 1.0 - overlap
    return total


def total_energy(window: CrfWindow, assign) -> float:
    """Energy of an :class:`Assignment` or a nested binary labelling."""
    binary = assign.to_binary(window) if isinstance(assign, Assignment) else assign
    if high_order(window, binary) >= INFEASIBLE:
        return INFEASIBLE
    e = 0.0
    for f, row in zip(window.frames, binary):
        for o, vec in zip(f.objects, row):
            for i in _active(vec):
                e += unary(o.proposals[i], o.alpha, o.bbox)
    for k in range(1, window.N):
        c = window.transitions[k - 1].coefficient
        if c != 0.0:
            e += c * pairwise(window, k, binary)
    return e


# -- inference ---------------------------------------------------------------


class _Tables:
    """Energy of a window as lookup tables; option ``len(proposals)`` = none."""

    def __init__(self, window: CrfWindow):
        self.vars = window.variables()
        self.pos = {v: n for n, v in enumerate(self.vars)}
        self.unary = []
        self.top = []
        for t, j in self.vars:
            o = window.frames[t].objects[j]
            u = [unary(p, o.alpha, o.bbox) for p in o.proposals] + [0.0]
            self.unary.append(np.array(u))
            n = len(o.proposals)
            self.top.append(max(range(n), key=lambda i: (o.proposals[i].score, -i)) if n else n)
        self.pairs = []  # (var_cur, var_prev, table[i_cur, i_prev])
        for k in range(1, window.N):
            tr = window.transitions[k - 1]
            if tr.coefficient == 0.0:
                continue
            prev, cur = window.frames[k - 1], window.frames[k]
            for j, m in sorted(tr.matches.items()):
                pc, pp = cur.objects[j].proposals, prev.objects[m].proposals
                warped = [warp_bbox(p, tr.H, window.intr) for p in pp]
                T = np.zeros((len(pc) + 1, len(pp) + 1))
                for a, p in enumerate(pc):
                    for b, w in enumerate(warped):
                        T[a, b] = tr.coefficient * (1.0 - (0.0 if w is None else iou(p.bbox, w)))
                self.pairs.append((self.pos[(k, j)], self.pos[(k - 1, m)], T))
        self.neighbors = [[] for _ in self.vars]
        for a, b, T in self.pairs:
            self.neighbors[a].append((b, T))
            self.neighbors[b].append((a, T.T))

    def sizes(self):
        return [len(u) for u in self.unary]

    def energy(self, idx):
        e = sum(u[i] for u, i in zip(self.unary, idx))
        for a, b, T in self.pairs:
            e += T[idx[a], idx[b]]
        return float(e)

    def local(self, v, idx):
        e = self.unary[v].copy()
        for w, T in self.neighbors[v]:
            e += T[:, idx[w]]
        return e


def _to_assignment(window, tables, idx):
    choices = [[None] * len(f.objects) for f in window.frames]
    for (t, j), i in zip(tables.vars, idx):
        n = len(window.frames[t].objects[j].proposals)
        choices[t][j] = None if i == n else int(i)
    return Assignment(choices)


def _enumerate(tables):
    sizes = tables.sizes()
    if not sizes:
        return (), 0.0
    grid = np.indices(sizes).reshape(len(sizes), -1).T  # lexicographic order
    e = np.zeros(len(grid))
    for v, u in enumerate(tables.unary):
        e += u[grid[:, v]]
    for a, b, T in tables.pairs:
        e += T[grid[:, a], grid[:, b]]
    best = int(np.argmin(e))  # first minimum in lexicographic order
    return tuple(int(i) for i in grid[best]), float(e[best])


def _icm(tables, max_sweeps):
    idx = list(tables.top)
    current = tables.energy(idx)
    for _ in range(max_sweeps):
        changed = False
        for v in range(len(idx)):
            loc = tables.local(v, idx)
            best = int(np.argmin(loc))
            if loc[best] < loc[idx[v]]:
                idx[v] = best
                changed = True
        if not changed:
            break
        current = tables.energy(idx)
    return tuple(idx), current


def select(window: CrfWindow, method: str = "auto", max_enumeration: int = 10_000, max_sweeps: int = 50):
    """Minimum-energy feasible labelling.

    Exhaustive enumeration when the search space has at most
    ``max_enumeration`` labellings (``method="auto"``), otherwise iterated
    conditional modes from the top-scored initialisation. Returns
    ``(Assignment, energy)``.
    """
    tables = _Tables(window)
    n = int(np.prod(tables.sizes(), dtype=float)) if tables.vars else 1
    if method == "enumerate" or (method == "auto" and n <= max_enumeration):
        idx, e = _enumerate(tables)
    elif method in ("icm", "auto"):
        idx, e = _icm(tables, max_sweeps)
    else:
        raise ValueError(f"unknown method {method!r}")
    return _to_assignment(window, tables, idx), e


def initial_assignment(window: CrfWindow) -> Assignment:
    """Every object takes its top-scored proposal."""
    return Assignment([[0 if o.proposals else None for o in f.objects] for f in window.frames])
