"""Domain types and box geometry shared by every other module."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence as SequenceT

import numpy as np


class Encoding(str, enum.Enum):
    """Coordinate regime of a bounding box."""

    PIXEL = "pixel"
    NORMALIZED = "normalized"


@enum.unique
class ModalityLabel(enum.IntEnum):
    """Imaging modality of a frame. IntEnum gives a total order for serialization."""

    RGB = 0
    NIR = 1

    def flipped(self) -> "ModalityLabel":
        return ModalityLabel.NIR if self is ModalityLabel.RGB else ModalityLabel.RGB

    @staticmethod
    def parse(token: str) -> "ModalityLabel":
        try:
            return ModalityLabel[token.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown modality label {token!r}") from None


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box stored as top-left corner plus size.

    Center-size is a derived view of the same storage, never a second format.
    """

    x: float
    y: float
    w: float
    h: float
    encoding: Encoding = Encoding.PIXEL

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ValueError(f"box size must be non-negative, got w={self.w}, h={self.h}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def cx(self) -> float:
        return self.x + self.w / 2

    @property
    def cy(self) -> float:
        return self.y + self.h / 2

    @property
    def center(self) -> tuple[float, float]:
        return self.cx, self.cy

    @property
    def area(self) -> float:
        return self.w * self.h

    def is_degenerate(self) -> bool:
        return self.w <= 0 or self.h <= 0

    @staticmethod
    def from_center(cx: float, cy: float, w: float, h: float,
                    encoding: Encoding = Encoding.PIXEL) -> "BoundingBox":
        return BoundingBox(cx - w / 2, cy - h / 2, w, h, encoding)

    def as_xywh(self) -> tuple[float, float, float, float]:
        return self.x, self.y, self.w, self.h

    def translated(self, dx: float, dy: float) -> "BoundingBox":
        return replace(self, x=self.x + dx, y=self.y + dy)

    def scaled(self, s: float) -> "BoundingBox":
        if s <= 0:
            raise ValueError(f"scale must be positive, got {s}")
        return replace(self, x=self.x * s, y=self.y * s, w=self.w * s, h=self.h * s)

    def clamp_normalized(self) -> "BoundingBox":
        """Clamp a normalized box into the unit square. Clamping is always this explicit call."""
        if self.encoding is not Encoding.NORMALIZED:
            raise ValueError("clamp_normalized applies to normalized boxes only")
        x1 = min(max(self.x, 0.0), 1.0)
        y1 = min(max(self.y, 0.0), 1.0)
        x2 = min(max(self.x2, 0.0), 1.0)
        y2 = min(max(self.y2, 0.0), 1.0)
        return BoundingBox(x1, y1, max(x2 - x1, 0.0), max(y2 - y1, 0.0), Encoding.NORMALIZED)

    def intersects_image(self, height: int, width: int) -> bool:
        """True when the box overlaps the pixel rectangle [0,width)x[0,height)."""
        return self.x < width and self.y < height and self.x2 > 0 and self.y2 > 0


def _check_same_encoding(a: BoundingBox, b: BoundingBox) -> None:
    if a.encoding is not b.encoding:
        raise ValueError(f"encoding mismatch: {a.encoding.value} vs {b.encoding.value}")


def intersection_area(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    return max(iw, 0.0) * max(ih, 0.0)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two same-encoding boxes, in [0, 1]."""
    _check_same_encoding(a, b)
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


# Running count of degenerate boxes routed through the giou fallback. Early-training
# predictions can legally be zero-area; they must never crash the loss path.
_degenerate_giou_count = 0


def degenerate_giou_count() -> int:
    return _degenerate_giou_count


def reset_degenerate_giou_count() -> None:
    global _degenerate_giou_count
    _degenerate_giou_count = 0


def giou_flagged(a: BoundingBox, b: BoundingBox) -> tuple[float, bool]:
    """Generalized IoU plus a flag marking the zero-area fallback.

    giou = iou - (hull - union) / hull, where hull is the tightest box enclosing
    both inputs. A zero-area input is treated as a point: its iou contribution is
    0 and only the hull penalty remains.
    """
    global _degenerate_giou_count
    _check_same_encoding(a, b)
    hull_w = max(a.x2, b.x2) - min(a.x, b.x)
    hull_h = max(a.y2, b.y2) - min(a.y, b.y)
    hull = hull_w * hull_h
    degenerate = a.is_degenerate() or b.is_degenerate()
    if degenerate:
        _degenerate_giou_count += 1
        union = a.area + b.area  # the degenerate side contributes nothing
        if hull <= 0:
            return 0.0, True
        return -(hull - union) / hull, True
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    value = inter / union - (hull - union) / hull
    return value, False


def giou(a: BoundingBox, b: BoundingBox) -> float:
    """Generalized IoU in (-1, 1]. Zero-area inputs fall back to the hull penalty."""
    value, _ = giou_flagged(a, b)
    return value


def center_distance(a: BoundingBox, b: BoundingBox,
                    normalized_by: BoundingBox | None = None) -> float:
    """Euclidean distance between box centers.

    With ``normalized_by`` the per-axis offsets are divided by that box's width
    and height before taking the norm (size-normalized center error).
    """
    _check_same_encoding(a, b)
    dx = a.cx - b.cx
    dy = a.cy - b.cy
    if normalized_by is not None:
        if normalized_by.w <= 0 or normalized_by.h <= 0:
            raise ValueError("normalizer box must have positive width and height")
        dx /= normalized_by.w
        dy /= normalized_by.h
    return float(np.hypot(dx, dy))


@dataclass
class Frame:
    """One video frame with its annotations.

    image is H x W x 3 float in [0, 1]; gt_box, when present, is in pixel
    coordinates of this frame.
    """

    image: np.ndarray
    modality: ModalityLabel
    index: int
    gt_box: BoundingBox | None = None
    visible: bool = True
    attributes: set[str] = field(default_factory=set)

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass
class Sequence:
    """Ordered frames of one video, validated at construction."""

    frames: list[Frame]
    name: str = "sequence"

    def __post_init__(self):
        problems = []
        if not self.frames:
            problems.append("sequence has no frames")
        else:
            first = self.frames[0]
            if first.gt_box is None:
                problems.append("frame 0 must carry a ground-truth box")
            if not first.visible:
                problems.append("frame 0 must be visible")
            for prev, cur in zip(self.frames, self.frames[1:]):
                if cur.index <= prev.index:
                    problems.append(
                        f"frame indices must increase strictly ({prev.index} -> {cur.index})")
                    break
            for f in self.frames:
                if f.gt_box is not None and not f.gt_box.intersects_image(f.height, f.width):
                    problems.append(f"frame {f.index}: gt box outside image bounds")
        if problems:
            raise ValueError("invalid sequence: " + "; ".join(problems))

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    @property
    def modality_schedule(self) -> list[int]:
        """Indices i > 0 where the modality differs from frame i-1."""
        return [i for i in range(1, len(self.frames))
                if self.frames[i].modality is not self.frames[i - 1].modality]

    @property
    def attributes(self) -> set[str]:
        tags: set[str] = set()
        for f in self.frames:
            tags |= f.attributes
        return tags


def format_box_line(box: BoundingBox) -> str:
    """One 'x,y,w,h' line (pixel convention); repr keeps the round trip exact."""
    return ",".join(repr(float(v)) for v in box.as_xywh())


def parse_box_line(line: str, lineno: int | None = None) -> BoundingBox:
    parts = line.strip().split(",")
    where = f" at line {lineno}" if lineno is not None else ""
    if len(parts) != 4:
        raise ValueError(f"expected 4 comma-separated values{where}, got {line.strip()!r}")
    try:
        x, y, w, h = (float(p) for p in parts)
    except ValueError:
        raise ValueError(f"malformed box line{where}: {line.strip()!r}") from None
    return BoundingBox(x, y, w, h, Encoding.PIXEL)


def save_boxes(path: str | Path, boxes: Iterable[BoundingBox]) -> None:
    lines = [format_box_line(b) + "\n" for b in boxes]
    Path(path).write_text("".join(lines), encoding="utf-8")


def load_boxes(path: str | Path) -> list[BoundingBox]:
    text = Path(path).read_text(encoding="utf-8")
    return [parse_box_line(line, lineno=i + 1)
            for i, line in enumerate(text.splitlines()) if line.strip()]


def boxes_to_array(boxes: SequenceT[BoundingBox]) -> np.ndarray:
    """Stack boxes into an (N, 4) float64 x,y,w,h array."""
    return np.array([b.as_xywh() for b in boxes], dtype=np.float64).reshape(-1, 4)
