"""Box geometry, detections, linear assignment and non-maximum suppression."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import math

import numpy as np


@dataclass(frozen=True)
class Box2D:
    """Axis-aligned pixel box given by its top-left and bottom-right corners."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {self.as_tuple()}")

    def as_tuple(self):
        return (self.x1, self.y1, self.x2, self.y2)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=np.float64)

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def center(self):
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def clip(self, width: float, height: float) -> "Box2D":
        return Box2D(
            min(max(self.x1, 0.0), width),
            min(max(self.y1, 0.0), height),
            min(max(self.x2, 0.0), width),
            min(max(self.y2, 0.0), height),
        )

    def normalized(self, width: float, height: float) -> np.ndarray:
        """Corners scaled to [0, 1] after clipping to the image: (xl, yl, xr, yr)."""
        b = np.array(self.as_tuple(), dtype=np.float64)
        b[[0, 2]] = np.clip(b[[0, 2]], 0.0, width) / width
        b[[1, 3]] = np.clip(b[[1, 3]], 0.0, height) / height
        return b


@dataclass(frozen=True)
class CameraMeta:
    camera: int
    width: int
    height: int
    fps: float = 15.0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"camera {self.camera}: image size must be positive")


@dataclass(eq=False)
class Detection:
    """One candidate box in one view at one frame.

    ``identity`` is only populated by the simulator (ground-truth linkage) and
    is never read by tracking or association.
    """

    video_id: str
    frame: int
    camera: int
    box: Box2D
    score: float
    embedding: Optional[np.ndarray] = None
    track_id: Optional[int] = None
    identity: Optional[int] = None
    provenance: Optional[str] = None

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    def with_(self, **changes) -> "Detection":
        return replace(self, **changes)

    @property
    def key(self):
        """Value identity of the underlying detector output."""
        return (self.video_id, self.frame, self.camera, self.box.as_tuple(), self.score)


@dataclass(frozen=True)
class AssignmentResult:
    row_indices: np.ndarray
    col_indices: np.ndarray
    total_cost: float

    def __len__(self):
        return len(self.row_indices)

    def pairs(self):
        return list(zip(self.row_indices.tolist(), self.col_indices.tolist()))


def iou(a: Box2D, b: Box2D) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between box arrays of shape (n, 4) and (m, 4)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def boxes_array(dets: Sequence[Detection]) -> np.ndarray:
    if not dets:
        return np.zeros((0, 4))
    return np.array([d.box.as_tuple() for d in dets], dtype=np.float64)


def nms_indices(boxes, scores, thresh: float) -> list[int]:
    """Greedy score-descending NMS; equal scores keep the lower input index first."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    overlaps = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(order), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= overlaps[i] > thresh
    return keep


def nms(dets: Sequence[Detection], thresh: float) -> list[Detection]:
    if not dets:
        return []
    frames = {(d.video_id, d.frame, d.camera) for d in dets}
    if len(frames) > 1:
        raise ValueError("nms expects detections from a single (frame, camera)")
    keep = nms_indices(boxes_array(dets), [d.score for d in dets], thresh)
    return [dets[i] for i in keep]


def _solve_square(cost: np.ndarray):
    # Shortest augmenting path (Jonker-Volgenant style) with dual potentials.
    # Rows are inserted in index order; ties in the Dijkstra frontier resolve to
    # the lowest column index, which makes the result deterministic.
    n = cost.shape[0]
    u = np.zeros(n)
    v = np.zeros(n)
    col4row = np.full(n, -1, dtype=np.int64)
    row4col = np.full(n, -1, dtype=np.int64)
    arange = np.arange(n)
    for cur_row in range(n):
        shortest = np.full(n, np.inf)
        path = np.full(n, -1, dtype=np.int64)
        in_rows = np.zeros(n, dtype=bool)
        in_cols = np.zeros(n, dtype=bool)
        min_val = 0.0
        i = cur_row
        sink = -1
        while sink < 0:
            in_rows[i] = True
            reduced = min_val + cost[i] - u[i] - v
            better = ~in_cols & (reduced < shortest)
            path[better] = i
            shortest[better] = reduced[better]
            frontier = np.where(in_cols, np.inf, shortest)
            j = int(np.argmin(frontier))
            min_val = frontier[j]
            in_cols[j] = True
            if row4col[j] < 0:
                sink = j
            else:
                i = int(row4col[j])
        u[cur_row] += min_val
        others = in_rows & (arange != cur_row)
        u[others] += min_val - shortest[col4row[others]]
        v[in_cols] -= min_val - shortest[in_cols]
        j = sink
        while True:
            i = int(path[j])
            row4col[j] = i
            col4row[i], j = j, int(col4row[i])
            if i == cur_row:
                break
    return col4row


def _solve_small(cost):
    # Same algorithm as _solve_square on plain lists, for r <= c rectangles;
    # much faster than the vectorized version for small matrices.
    nr = len(cost)
    n = len(cost[0])
    inf = math.inf
    u = [0.0] * nr
    v = [0.0] * n
    col4row = [-1] * nr
    row4col = [-1] * n
    for cur_row in range(nr):
        shortest = [inf] * n
        path = [-1] * n
        in_cols = [False] * n
        visited_rows = []
        min_val = 0.0
        i = cur_row
        sink = -1
        remaining = list(range(n))
        while sink < 0:
            visited_rows.append(i)
            row = cost[i]
            ui = u[i]
            best = inf
            best_j = -1
            for j in remaining:
                r = min_val + row[j] - ui - v[j]
                if r < shortest[j]:
                    path[j] = i
                    shortest[j] = r
                if shortest[j] < best:
                    best = shortest[j]
                    best_j = j
            min_val = best
            remaining.remove(best_j)
            in_cols[best_j] = True
            if row4col[best_j] < 0:
                sink = best_j
            else:
                i = row4col[best_j]
        u[cur_row] += min_val
        for i in visited_rows:
            if i != cur_row:
                u[i] += min_val - shortest[col4row[i]]
        for j in range(n):
            if in_cols[j]:
                v[j] -= min_val - shortest[j]
        j = sink
        while True:
            i = path[j]
            row4col[j] = i
            col4row[i], j = j, col4row[i]
            if i == cur_row:
                break
    return col4row


_SMALL_N = 48


def hungarian(cost) -> AssignmentResult:
    """Minimum-cost assignment of ``min(r, c)`` pairs for an r x c cost matrix.

    Small problems run a list-based solver directly on the r <= c
    orientation (transposing when needed). Larger rectangular inputs are
    padded to square with constant sentinel rows or columns, and pairs that
    land on padding are dropped.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    r, c = cost.shape
    if r == 0 or c == 0:
        empty = np.zeros(0, dtype=np.int64)
        return AssignmentResult(empty, empty.copy(), 0.0)
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains NaN or Inf")
    n = max(r, c)
    if n <= _SMALL_N:
        if r <= c:
            rows = np.arange(r, dtype=np.int64)
            cols = np.array(_solve_small(cost.tolist()), dtype=np.int64)
        else:
            cols = np.arange(c, dtype=np.int64)
            rows = np.array(_solve_small(cost.T.tolist()), dtype=np.int64)
            order = np.argsort(rows)
            rows, cols = rows[order], cols[order]
        return AssignmentResult(rows, cols, float(cost[rows, cols].sum()))
    if r != c:
        sentinel = float(np.abs(cost).max()) + 1.0
        square = np.full((n, n), sentinel)
        square[:r, :c] = cost
    else:
        square = cost
    col4row = _solve_square(square)
    rows = np.arange(r, dtype=np.int64)
    cols = col4row[:r]
    ok = cols < c
    rows, cols = rows[ok], cols[ok]
    return AssignmentResult(rows, cols, float(cost[rows, cols].sum()))


__all__ = [
    "AssignmentResult",
    "Box2D",
    "CameraMeta",
    "Detection",
    "boxes_array",
    "hungarian",
    "iou",
    "iou_matrix",
    "nms",
    "nms_indices",
]
