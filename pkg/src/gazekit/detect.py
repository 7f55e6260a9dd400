"""Gaze-directed detection filtering over an anchor-free feature grid.

The grid is a dense per-cell prediction map with channel layout
``[obj, cls_0..cls_{C-1}, dx, dy, w, h]``: an objectness logit, class logits,
box-center offsets inside the cell (already squashed to [0, 1)) and box size
in pixels. A gaze point selects a (2k+1)-square neighborhood of cells, and
decoding plus NMS run only there. The result is provably identical to running
the full grid and keeping boxes whose source cell lies in the region.
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np

from .dataio import load_tensors, save_tensors
from .errors import ConfigError, DataError


@dataclasses.dataclass
class FeatureGrid:
    """Dense cell predictions: data has shape (5 + n_classes, height, width)."""

    data: np.ndarray
    stride: int

    def __post_init__(self):
        self.data = np.asarray(self.data, np.float32)
        if self.data.ndim != 3 or self.data.shape[0] < 6:
            raise DataError(f"grid needs shape (5+C, H, W) with C >= 1, got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise DataError("grid contains non-finite values")
        if self.stride < 1:
            raise DataError(f"grid stride must be positive, got {self.stride}")
        dx, dy = self.data[-4], self.data[-3]
        if (dx < 0).any() or (dx >= 1).any() or (dy < 0).any() or (dy >= 1).any():
            raise DataError("grid dx/dy offsets must lie in [0, 1)")
        if (self.data[-2] <= 0).any() or (self.data[-1] <= 0).any():
            raise DataError("grid box sizes must be positive")

    @property
    def n_classes(self) -> int:
        return self.data.shape[0] - 5

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def total_cells(self) -> int:
        return self.height * self.width


def save_grid(grid: FeatureGrid, path) -> None:
    save_tensors(path, {"grid": grid.data, "stride": np.array([grid.stride], np.float32)})


def load_grid(path) -> FeatureGrid:
    tensors = load_tensors(path)
    if "grid" not in tensors or "stride" not in tensors:
        raise DataError(f"{path}: expected tensors 'grid' and 'stride'")
    return FeatureGrid(data=tensors["grid"], stride=int(tensors["stride"][0]))


@dataclasses.dataclass
class GridRegion:
    center: tuple
    k: int
    cells: list  # (i, j) pairs, row-major


@dataclasses.dataclass
class DetectionBox:
    x: float  # center, pixels
    y: float
    w: float
    h: float
    class_id: int
    score: float
    source_cell: tuple

    def to_json(self) -> str:
        return json.dumps(
            {
                "x": round(self.x, 4),
                "y": round(self.y, 4),
                "w": round(self.w, 4),
                "h": round(self.h, 4),
                "class_id": self.class_id,
                "score": round(self.score, 6),
                "cell": list(self.source_cell),
            }
        )


def gaze_to_cell(gaze, grid: FeatureGrid):
    """Pixel gaze point -> (i, j) cell. Out-of-image points clamp with a flag."""
    x, y = float(gaze[0]), float(gaze[1])
    j = int(np.floor(x / grid.stride))
    i = int(np.floor(y / grid.stride))
    clamped = not (0 <= j < grid.width and 0 <= i < grid.height)
    j = min(max(j, 0), grid.width - 1)
    i = min(max(i, 0), grid.height - 1)
    return (i, j), clamped


def region_cells(center, k: int, grid: FeatureGrid) -> GridRegion:
    """Square neighborhood of radius k around the center, clipped to bounds."""
    if k < 0:
        raise ConfigError(f"region radius must be >= 0, got {k}")
    ci, cj = center
    cells = [
        (i, j)
        for i in range(max(ci - k, 0), min(ci + k, grid.height - 1) + 1)
        for j in range(max(cj - k, 0), min(cj + k, grid.width - 1) + 1)
    ]
    return GridRegion(center=(ci, cj), k=k, cells=cells)


def _sigmoid(v: float) -> float:
    return float(1.0 / (1.0 + np.exp(-np.float64(v))))


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def decode_cell(grid: FeatureGrid, i: int, j: int):
    """Best-class box for one cell (argmax class, score = obj * class prob)."""
    rec = grid.data[:, i, j]
    obj = _sigmoid(rec[0])
    probs = _softmax(rec[1 : 1 + grid.n_classes])
    cid = int(probs.argmax())
    score = obj * float(probs[cid])
    dx, dy, w, h = (float(v) for v in rec[-4:])
    return DetectionBox(
        x=(j + dx) * grid.stride,
        y=(i + dy) * grid.stride,
        w=w,
        h=h,
        class_id=cid,
        score=score,
        source_cell=(i, j),
    )


def decode_region(grid: FeatureGrid, region: GridRegion, score_threshold: float):
    """Decode only the region's cells; keep boxes scoring >= threshold."""
    if not 0.0 < score_threshold < 1.0:
        raise ConfigError(f"score threshold must be in (0,1), got {score_threshold}")
    boxes = []
    for i, j in region.cells:
        box = decode_cell(grid, i, j)
        if box.score >= score_threshold:
            boxes.append(box)
    return boxes


def box_iou(a: DetectionBox, b: DetectionBox) -> float:
    ax0, ax1 = a.x - a.w / 2, a.x + a.w / 2
    ay0, ay1 = a.y - a.h / 2, a.y + a.h / 2
    bx0, bx1 = b.x - b.w / 2, b.x + b.w / 2
    by0, by1 = b.y - b.h / 2, b.y + b.h / 2
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def _nms_order(box: DetectionBox):
    i, j = box.source_cell
    return (-box.score, box.class_id, i, j)


def nms(boxes, iou_threshold: float):
    """Greedy class-wise suppression, deterministic under input reordering.

    Candidates are ranked by descending score with ties broken by lower class
    id, then lower row-major cell index; a survivor suppresses same-class
    boxes whose IoU with it exceeds the threshold.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ConfigError(f"IoU threshold must be in (0,1], got {iou_threshold}")
    pending = sorted(boxes, key=_nms_order)
    survivors = []
    while pending:
        best = pending.pop(0)
        survivors.append(best)
        pending = [
            b
            for b in pending
            if b.class_id != best.class_id or box_iou(best, b) <= iou_threshold
        ]
    return survivors


@dataclasses.dataclass
class DetectResult:
    boxes: list
    cells_examined: int
    total_cells: int
    gaze_cell: tuple
    gaze_clamped: bool


def detect_at_gaze(
    grid: FeatureGrid,
    gaze,
    k: int = 2,
    score_threshold: float = 0.5,
    iou_threshold: float = 0.5,
) -> DetectResult:
    """Decode + NMS restricted to the gaze neighborhood."""
    cell, clamped = gaze_to_cell(gaze, grid)
    region = region_cells(cell, k, grid)
    boxes = nms(decode_region(grid, region, score_threshold), iou_threshold)
    return DetectResult(
        boxes=boxes,
        cells_examined=len(region.cells),
        total_cells=grid.total_cells,
        gaze_cell=cell,
        gaze_clamped=clamped,
    )


def resolve_edit_region(
    grid: FeatureGrid,
    gaze,
    k: int = 2,
    score_threshold: float = 0.5,
    iou_threshold: float = 0.5,
):
    """The single box the user is looking at: top NMS survivor, or None."""
    result = detect_at_gaze(grid, gaze, k, score_threshold, iou_threshold)
    if not result.boxes:
        return None
    return min(result.boxes, key=_nms_order)
