"""Pinhole camera geometry, 3D boxes, rotated BEV IoU, and NMS.

Camera frame: X right, Y down, Z forward (optical axis). Bird's-eye-view
rectangles live in the (X, Z) ground plane; yaw rotates the box's length
axis from +X toward +Z. Pitch and roll are carried on boxes but ignored by
the BEV footprint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "CameraIntrinsics",
    "Box3D",
    "BehindCameraError",
    "normalize_angle",
    "project",
    "unproject",
    "bev_corners",
    "polygon_area",
    "clip_polygon",
    "bev_iou",
    "nms",
    "DetectionMaps",
    "decode_detections",
]


class BehindCameraError(ValueError):
    """A point with Z <= 0 cannot be projected."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_dict(cls, d):
        return cls(fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"])


def normalize_angle(a):
    """Wrap an angle to (-pi, pi]."""
    a = math.remainder(float(a), 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    return a


@dataclass(eq=False)
class Box3D:
    """Oriented 3D box in camera coordinates.

    center is (X, Y, Z) meters, dims is (length, width, height) meters;
    angles are radians, normalized to (-pi, pi] on construction.
    """

    center: np.ndarray
    dims: np.ndarray
    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0
    class_id: int = 0
    score: float = 1.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.dims = np.asarray(self.dims, dtype=np.float64)
        if self.center.shape != (3,) or self.dims.shape != (3,):
            raise ValueError("Box3D center and dims must be 3-vectors")
        self.yaw = normalize_angle(self.yaw)
        self.pitch = normalize_angle(self.pitch)
        self.roll = normalize_angle(self.roll)

    def to_dict(self, class_names=None):
        name = class_names[self.class_id] if class_names else self.class_id
        return {
            "class": name,
            "center": [float(v) for v in self.center],
            "dims": [float(v) for v in self.dims],
            "yaw": float(self.yaw),
            "pitch": float(self.pitch),
            "roll": float(self.roll),
        }


def project(point, intrinsics):
    """Pinhole projection of a camera-frame point to pixel (u, v)."""
    x, y, z = (float(v) for v in point)
    if z <= 0:
        raise BehindCameraError(f"cannot project point with Z={z}")
    return (intrinsics.fx * x / z + intrinsics.cx, intrinsics.fy * y / z + intrinsics.cy)


def unproject(u, v, z, intrinsics):
    """Invert `project` for a pixel (u, v) at depth z along the optical axis."""
    x = (u - intrinsics.cx) * z / intrinsics.fx
    y = (v - intrinsics.cy) * z / intrinsics.fy
    return np.array([x, y, z], dtype=np.float64)


def rotation_matrix(yaw, pitch, roll):
    """World-from-box rotation: roll about Z, then pitch about X, then yaw about Y."""
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    return ry @ rx @ rz


def box_corners_3d(box):
    """All 8 corners of the oriented box, camera frame, (8, 3)."""
    l, w, h = box.dims
    sx = np.array([1, 1, 1, 1, -1, -1, -1, -1]) * (l / 2)
    sy = np.array([1, 1, -1, -1, 1, 1, -1, -1]) * (h / 2)
    sz = np.array([1, -1, 1, -1, 1, -1, 1, -1]) * (w / 2)
    local = np.stack([sx, sy, sz], axis=1)
    rot = rotation_matrix(box.yaw, box.pitch, box.roll)
    return local @ rot.T + box.center


def bev_corners(box):
    """Ground-plane footprint corners (4, 2) in (X, Z), counter-clockwise."""
    l, w = float(box.dims[0]), float(box.dims[1])
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    local = np.array(
        [[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]], dtype=np.float64
    )
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([box.center[0], box.center[2]])


def polygon_area(pts):
    """Shoelace area (absolute) of a 2D polygon given as (N, 2)."""
    pts = np.asarray(pts, dtype=np.float64)
    if len(pts) < 3:
        return 0.0
    x, z = pts[:, 0], pts[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(z, -1)) - np.dot(z, np.roll(x, -1))))


def clip_polygon(subject, clip):
    """Sutherland-Hodgman clip of `subject` against convex CCW `clip`."""
    output = [np.asarray(p, dtype=np.float64) for p in subject]
    clip = np.asarray(clip, dtype=np.float64)
    n = len(clip)
    for i in range(n):
        if not output:
            return []
        a, b = clip[i], clip[(i + 1) % n]
        edge = b - a
        inputs = output
        output = []
        prev = inputs[-1]
        prev_in = edge[0] * (prev[1] - a[1]) - edge[1] * (prev[0] - a[0]) >= 0
        for cur in inputs:
            cur_in = edge[0] * (cur[1] - a[1]) - edge[1] * (cur[0] - a[0]) >= 0
            if cur_in != prev_in:
                # segment crosses the clip edge
                d = cur - prev
                denom = edge[0] * d[1] - edge[1] * d[0]
                t = (edge[0] * (a[1] - prev[1]) - edge[1] * (a[0] - prev[0])) / denom
                output.append(prev + t * d)
            if cur_in:
                output.append(cur)
            prev, prev_in = cur, cur_in
    return output


def bev_iou(a, b):
    """IoU of two yaw-rotated ground-plane rectangles, in [0, 1]."""
    area_a = float(a.dims[0] * a.dims[1])
    area_b = float(b.dims[0] * b.dims[1])
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    inter = polygon_area(clip_polygon(bev_corners(a), bev_corners(b)))
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def nms(boxes, iou_thresh=0.3):
    """Greedy per-class non-maximum suppression on BEV IoU.

    Keeps the highest-score box, drops same-class boxes overlapping it with
    IoU > iou_thresh, repeats. Ties break by (score desc, class asc, X asc,
    Z asc).
    """
    remaining = sorted(
        boxes, key=lambda b: (-b.score, b.class_id, float(b.center[0]), float(b.center[2]))
    )
    kept = []
    while remaining:
        top = remaining.pop(0)
        kept.append(top)
        remaining = [
            b
            for b in remaining
            if b.class_id != top.class_id or bev_iou(top, b) <= iou_thresh
        ]
    return kept


@dataclass
class DetectionMaps:
    """Single-image dense detection maps (numpy, channel-first grids)."""

    class_logits: np.ndarray  # (K, H, W)
    centerness: np.ndarray  # (H, W)
    offset: np.ndarray  # (2, H, W): (du, dv) pixels
    depth_raw: np.ndarray  # (H, W): log depth
    dims_raw: np.ndarray  # (3, H, W): log (l, w, h)
    rot: np.ndarray  # (3, H, W): yaw, pitch, roll
    dir_logits: np.ndarray  # (2, H, W)


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def decode_detections(maps, intrinsics, stride, score_thresh=0.3):
    """Turn dense maps into Box3D detections (no NMS).

    Per location: score = sigmoid(best class logit) * sigmoid(centerness);
    the projected center is the cell center plus the 2D offset, depth and
    dims are exp-decoded, and yaw gains pi when the direction class is 1.
    """
    cls = np.asarray(maps.class_logits, dtype=np.float64)
    k, gh, gw = cls.shape
    best = cls.argmax(axis=0)
    best_logit = np.take_along_axis(cls, best[None], axis=0)[0]
    score = _sigmoid(best_logit) * _sigmoid(np.asarray(maps.centerness, dtype=np.float64))
    boxes = []
    for gy, gx in np.argwhere(score > score_thresh):
        u = (gx + 0.5) * stride + float(maps.offset[0, gy, gx])
        v = (gy + 0.5) * stride + float(maps.offset[1, gy, gx])
        z = math.exp(float(maps.depth_raw[gy, gx]))
        center = unproject(u, v, z, intrinsics)
        dims = np.exp(np.asarray(maps.dims_raw[:, gy, gx], dtype=np.float64))
        yaw, pitch, roll = (float(a) for a in maps.rot[:, gy, gx])
        if maps.dir_logits[1, gy, gx] > maps.dir_logits[0, gy, gx]:
            yaw += math.pi
        boxes.append(
            Box3D(
                center=center,
                dims=dims,
                yaw=yaw,
                pitch=pitch,
                roll=roll,
                class_id=int(best[gy, gx]),
                score=float(score[gy, gx]),
            )
        )
    return boxes
