"""Multi-task scene understanding with task-prompted window attention.

A self-contained numpy stack: an autodiff tensor core, a windowed-attention
backbone that carries per-task prompt tokens, dense spatial/channel prompt
decoding, task heads for semantic segmentation, monocular depth, and
monocular 3D vehicle detection, plus a synthetic scene generator, metrics,
and a deterministic trainer.
"""

from .tensor import Tensor, no_grad, precision
from .optim import AdamState, adam_step
from .geometry import Box3D, CameraIntrinsics, bev_iou, nms
from .metrics import EvalReport

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "no_grad",
    "precision",
    "AdamState",
    "adam_step",
    "Box3D",
    "CameraIntrinsics",
    "bev_iou",
    "nms",
    "EvalReport",
    "__version__",
]
