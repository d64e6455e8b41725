"""Multi-modal prototype container and the reliability-gated update state machine.

The engine is independent of any learned model: it consumes per-frame
(category, reliability) events and decides when each dynamic sample slot is
refreshed. decide_update is a pure function; apply_update and tick return new
state records so an event stream can be replayed and audited. The decision log
is an append-only journal shared by successive state snapshots of one sequence.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable

import cv2
import numpy as np

from .core import BoundingBox, Frame, ModalityLabel

RELIABILITY_GATE = 0.5  # updates are applied only when reliability >= this


@dataclass(frozen=True)
class CropConfig:
    """Square-crop geometry: side = context_factor * sqrt(box area), resized to out_size."""

    context_factor: float = 2.0
    out_size: int = 128

    def __post_init__(self):
        if self.context_factor <= 0 or self.out_size <= 0:
            raise ValueError("context_factor and out_size must be positive")


class UpdateTrigger(str, enum.Enum):
    NONE = "NONE"
    MODALITY_SWITCH = "MODALITY_SWITCH"
    PERIODIC = "PERIODIC"


@dataclass(frozen=True)
class UpdatePolicy:
    """Which triggers are live, and whether the two dynamic slots are collapsed into one.

    The benchmark variants map onto this: full = both triggers + two slots,
    one-sample ("os") = both triggers + single slot, temporal-only ("tv") =
    periodic trigger only, modality-only ("mv") = switch trigger only.
    """

    allow_switch: bool = True
    allow_periodic: bool = True
    single_slot: bool = False

    @staticmethod
    def from_variant(variant: str) -> "UpdatePolicy":
        table = {
            "full": UpdatePolicy(),
            "os": UpdatePolicy(single_slot=True),
            "tv": UpdatePolicy(allow_switch=False),
            "mv": UpdatePolicy(allow_periodic=False),
        }
        try:
            return table[variant.lower()]
        except KeyError:
            raise ValueError(f"unknown variant {variant!r}, expected one of {sorted(table)}") from None


@dataclass(frozen=True)
class PrototypeSample:
    """One square template crop plus provenance."""

    image: np.ndarray  # T x T x 3 float in [0, 1]
    source_frame_index: int
    source_modality: ModalityLabel
    source_box: BoundingBox  # in source-frame pixel coordinates
    inherited: bool = False  # True while the slot still holds the frame-0 crop


@dataclass(frozen=True)
class MultiModalPrototype:
    """The fixed frame-0 sample plus one dynamic sample per modality."""

    fixed: PrototypeSample
    dynamic_rgb: PrototypeSample
    dynamic_nir: PrototypeSample

    def slot(self, category: ModalityLabel) -> PrototypeSample:
        return self.dynamic_rgb if category is ModalityLabel.RGB else self.dynamic_nir

    def samples(self) -> tuple[PrototypeSample, PrototypeSample, PrototypeSample]:
        return self.fixed, self.dynamic_rgb, self.dynamic_nir


@dataclass(frozen=True)
class UpdateDecision:
    frame_index: int
    predicted_category: ModalityLabel
    reliability: float
    trigger: UpdateTrigger
    applied: bool


@dataclass(frozen=True)
class PrototypeState:
    """State-machine record for one tracked sequence."""

    last_category: ModalityLabel
    frames_since_update: int = 0
    update_interval: int = 50
    policy: UpdatePolicy = UpdatePolicy()
    decision_log: list[UpdateDecision] = field(default_factory=list)

    def __post_init__(self):
        if self.update_interval <= 0:
            raise ValueError("update_interval must be positive")
        if self.frames_since_update < 0:
            raise ValueError("frames_since_update must be non-negative")


@dataclass(frozen=True)
class CropResult:
    """Crop pixels plus the geometry needed to map coordinates back."""

    image: np.ndarray
    x0: float
    y0: float
    side: float


def crop_square(image: np.ndarray, cx: float, cy: float, side: float,
                out_size: int, pad_value: float | np.ndarray) -> CropResult:
    """Cut a square window centered at (cx, cy), padding outside pixels with pad_value,
    then resize bilinearly to out_size x out_size."""
    h, w = image.shape[:2]
    side_px = max(int(round(side)), 2)
    x1 = int(round(cx - side_px / 2.0))
    y1 = int(round(cy - side_px / 2.0))
    x2, y2 = x1 + side_px, y1 + side_px

    patch = np.empty((side_px, side_px, image.shape[2]), dtype=np.float32)
    patch[:] = pad_value
    sx1, sy1 = max(x1, 0), max(y1, 0)
    sx2, sy2 = min(x2, w), min(y2, h)
    if sx2 > sx1 and sy2 > sy1:
        patch[sy1 - y1:sy2 - y1, sx1 - x1:sx2 - x1] = image[sy1:sy2, sx1:sx2]
    if side_px != out_size:
        patch = cv2.resize(patch, (out_size, out_size), interpolation=cv2.INTER_LINEAR)
    return CropResult(image=patch, x0=float(x1), y0=float(y1), side=float(side_px))


def extract_sample(frame: Frame, box: BoundingBox, crop_cfg: CropConfig,
                   category: ModalityLabel | None = None) -> PrototypeSample:
    """Crop a context-padded square template around box from frame.

    category overrides the provenance modality (at inference the predicted
    category is recorded, not the unknown true label).
    """
    if box.is_degenerate():
        raise ValueError("cannot extract a sample from a degenerate box")
    if frame.image.size == 0:
        raise ValueError("frame image is empty")
    cx, cy = box.center
    if not (0 <= cx < frame.width and 0 <= cy < frame.height):
        raise ValueError(
            f"box center ({cx:.1f}, {cy:.1f}) outside image {frame.width}x{frame.height}")
    side = crop_cfg.context_factor * float(np.sqrt(box.w * box.h))
    crop = crop_square(frame.image, cx, cy, side, crop_cfg.out_size,
                       pad_value=float(frame.image.mean()))
    return PrototypeSample(
        image=crop.image,
        source_frame_index=frame.index,
        source_modality=category if category is not None else frame.modality,
        source_box=box,
        inherited=False,
    )


def init_prototype(first_frame: Frame, init_box: BoundingBox | None,
                   crop_cfg: CropConfig, update_interval: int = 50,
                   policy: UpdatePolicy = UpdatePolicy(),
                   ) -> tuple[MultiModalPrototype, PrototypeState]:
    """Build the prototype from frame 0: both dynamic slots start as copies of the
    fixed sample, flagged inherited until their first real update."""
    box = init_box if init_box is not None else first_frame.gt_box
    if box is None:
        raise ValueError("an init box is required (frame 0 gt box or explicit argument)")
    if box.is_degenerate():
        raise ValueError("init box must be non-degenerate")
    fixed = extract_sample(first_frame, box, crop_cfg)
    inherit = replace(fixed, inherited=True)
    prototype = MultiModalPrototype(fixed=fixed, dynamic_rgb=inherit, dynamic_nir=inherit)
    state = PrototypeState(
        last_category=first_frame.modality,
        frames_since_update=0,
        update_interval=update_interval,
        policy=policy,
        decision_log=[],
    )
    return prototype, state


def decide_update(state: PrototypeState, category: ModalityLabel, reliability: float,
                  frame_index: int = -1) -> UpdateDecision:
    """Pure trigger logic: a category flip beats the periodic refresh; the
    reliability gate decides whether the triggered update is actually applied."""
    if not 0.0 <= reliability <= 1.0:
        raise ValueError(f"reliability must be in [0, 1], got {reliability}")
    if state.policy.allow_switch and category is not state.last_category:
        trigger = UpdateTrigger.MODALITY_SWITCH
    elif state.policy.allow_periodic and state.frames_since_update >= state.update_interval:
        trigger = UpdateTrigger.PERIODIC
    else:
        trigger = UpdateTrigger.NONE
    applied = trigger is not UpdateTrigger.NONE and reliability >= RELIABILITY_GATE
    return UpdateDecision(
        frame_index=frame_index,
        predicted_category=category,
        reliability=reliability,
        trigger=trigger,
        applied=applied,
    )


def apply_update(prototype: MultiModalPrototype, state: PrototypeState,
                 decision: UpdateDecision, new_sample: PrototypeSample,
                 ) -> tuple[MultiModalPrototype, PrototypeState]:
    """Replace the decided category's slot (both slots in single-slot mode),
    move the category marker, reset the counter, and journal the decision."""
    if not decision.applied:
        raise ValueError("apply_update called with an unapplied decision")
    if new_sample.source_modality is not decision.predicted_category:
        raise ValueError(
            f"sample modality {new_sample.source_modality.name} does not match "
            f"decided category {decision.predicted_category.name}")
    if state.policy.single_slot:
        prototype = replace(prototype, dynamic_rgb=new_sample, dynamic_nir=new_sample)
    elif decision.predicted_category is ModalityLabel.RGB:
        prototype = replace(prototype, dynamic_rgb=new_sample)
    else:
        prototype = replace(prototype, dynamic_nir=new_sample)
    state.decision_log.append(decision)
    state = replace(state, last_category=decision.predicted_category, frames_since_update=0)
    return prototype, state


def record_decision(state: PrototypeState, decision: UpdateDecision) -> PrototypeState:
    """Journal a decision that did not result in an update."""
    if decision.applied:
        raise ValueError("applied decisions are journaled by apply_update")
    state.decision_log.append(decision)
    return state


def tick(state: PrototypeState) -> PrototypeState:
    """Advance the frame counter; the driver calls this once per processed frame,
    after decide/apply (and once right after initialization)."""
    return replace(state, frames_since_update=state.frames_since_update + 1)


def process_event(prototype: MultiModalPrototype, state: PrototypeState,
                  category: ModalityLabel, reliability: float, frame_index: int,
                  sample_fn: Callable[[UpdateDecision], PrototypeSample] | None = None,
                  ) -> tuple[MultiModalPrototype, PrototypeState, UpdateDecision]:
    """Drive one frame through decide -> apply/record -> tick.

    sample_fn supplies the new sample only when the decision is applied; passing
    None downgrades applied decisions to journal-only (used when no pixels are
    available, e.g. pure event replay).
    """
    decision = decide_update(state, category, reliability, frame_index=frame_index)
    if decision.applied and sample_fn is not None:
        prototype, state = apply_update(prototype, state, decision, sample_fn(decision))
    elif decision.applied:
        # event-only replay: keep the state transition, skip the pixel swap
        state.decision_log.append(decision)
        state = replace(state, last_category=category, frames_since_update=0)
    else:
        state = record_decision(state, decision)
    state = tick(state)
    return prototype, state, decision


def format_decision_line(d: UpdateDecision) -> str:
    return (f"{d.frame_index},{d.predicted_category.name},{d.reliability!r},"
            f"{d.trigger.value},{int(d.applied)}")


def parse_decision_line(line: str, lineno: int | None = None) -> UpdateDecision:
    where = f" at line {lineno}" if lineno is not None else ""
    parts = line.strip().split(",")
    if len(parts) != 5:
        raise ValueError(f"expected 5 fields{where}, got {line.strip()!r}")
    try:
        return UpdateDecision(
            frame_index=int(parts[0]),
            predicted_category=ModalityLabel.parse(parts[1]),
            reliability=float(parts[2]),
            trigger=UpdateTrigger(parts[3]),
            applied=bool(int(parts[4])),
        )
    except (ValueError, KeyError) as exc:
        raise ValueError(f"malformed decision line{where}: {line.strip()!r} ({exc})") from None


def save_decision_log(path: str | Path, log: Iterable[UpdateDecision]) -> None:
    Path(path).write_text("".join(format_decision_line(d) + "\n" for d in log),
                          encoding="utf-8")


def load_decision_log(path: str | Path) -> list[UpdateDecision]:
    text = Path(path).read_text(encoding="utf-8")
    return [parse_decision_line(line, lineno=i + 1)
            for i, line in enumerate(text.splitlines()) if line.strip()]
