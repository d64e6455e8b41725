"""Losses, tuple sampling, and the two-stage training procedure.

Stage 1 fits the localization path (patch embedding, encoder, box head) with a
weighted GIoU + L1 loss; the two score heads stay frozen. Stage 2 freezes the
localization path and fits the score heads with binary cross-entropy on frames
that may or may not contain the target.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence as SequenceT

import numpy as np
import torch

from .core import BoundingBox, Encoding, Frame, ModalityLabel, Sequence, giou
from .proto import CropConfig, MultiModalPrototype, PrototypeSample, crop_square, extract_sample
from .model import NonFiniteError, ProtoTrackNet, image_to_tensor

PROB_EPS = 1e-7  # log-term clamp for the cross-entropy losses


class EmptySequenceError(ValueError):
    """Raised when a sequence has no usable (visible, annotated) frame."""


class TrainingDivergedError(RuntimeError):
    """Raised after restoring the last good weights when a loss went non-finite."""


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 2.0  # weight of the (1 - giou) term
    beta: float = 5.0   # weight of the mean-L1 term

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("loss weights must be positive")


def loc_loss(b_gt: BoundingBox, b_pred: BoundingBox, weights: LossWeights = LossWeights()
             ) -> float:
    """Reference localization loss on a single normalized box pair:
    alpha * (1 - giou) + beta * mean|coordinate difference|."""
    if b_gt.encoding is not Encoding.NORMALIZED or b_pred.encoding is not Encoding.NORMALIZED:
        raise ValueError("loc_loss expects normalized boxes")
    if b_gt.is_degenerate():
        raise ValueError("ground-truth box is degenerate (data bug)")
    l_iou = 1.0 - giou(b_gt, b_pred)
    diffs = [abs(a - b) for a, b in zip(b_gt.as_xywh(), b_pred.as_xywh())]
    l_1 = sum(diffs) / 4.0
    return weights.alpha * l_iou + weights.beta * l_1


def giou_batch(gt: torch.Tensor, pred: torch.Tensor) -> torch.Tensor:
    """Differentiable generalized IoU for (N, 4) x,y,w,h boxes.

    Degenerate predictions degrade continuously to the hull-penalty-only value;
    ground truth is assumed non-degenerate.
    """
    gx1, gy1, gw, gh = gt.unbind(-1)
    px1, py1, pw, ph = pred.unbind(-1)
    gx2, gy2 = gx1 + gw, gy1 + gh
    px2, py2 = px1 + pw, py1 + ph
    iw = (torch.minimum(gx2, px2) - torch.maximum(gx1, px1)).clamp(min=0)
    ih = (torch.minimum(gy2, py2) - torch.maximum(gy1, py1)).clamp(min=0)
    inter = iw * ih
    union = gw * gh + pw * ph - inter
    hull = ((torch.maximum(gx2, px2) - torch.minimum(gx1, px1))
            * (torch.maximum(gy2, py2) - torch.minimum(gy1, py1)))
    eps = torch.finfo(gt.dtype).tiny
    return inter / union.clamp(min=eps) - (hull - union) / hull.clamp(min=eps)


def loc_loss_batch(gt: torch.Tensor, pred: torch.Tensor,
                   weights: LossWeights = LossWeights(),
                   mask: torch.Tensor | None = None) -> dict[str, torch.Tensor]:
    """Batched localization loss; mask selects the rows that carry a target."""
    if mask is not None:
        if not bool(mask.any()):
            zero = pred.sum() * 0.0
            return {"loss": zero, "loss_iou": zero, "loss_l1": zero}
        gt, pred = gt[mask], pred[mask]
    l_iou = (1.0 - giou_batch(gt, pred)).mean()
    l_1 = (gt - pred).abs().mean()
    return {"loss": weights.alpha * l_iou + weights.beta * l_1,
            "loss_iou": l_iou, "loss_l1": l_1}


def _bce(y: float, p: float) -> float:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability outside [0, 1]: {p}")
    if y not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {y}")
    p = min(max(p, PROB_EPS), 1.0 - PROB_EPS)
    return -(y * math.log(p) + (1 - y) * math.log(1 - p))


def head_loss(y_pc: float, p_pc: float, y_pe: float, p_pe: float) -> float:
    """Sum of the two heads' binary cross-entropies (positive convention)."""
    return _bce(y_pc, p_pc) + _bce(y_pe, p_pe)


def bce_batch(target: torch.Tensor, prob: torch.Tensor) -> torch.Tensor:
    prob = prob.clamp(PROB_EPS, 1.0 - PROB_EPS)
    return -(target * prob.log() + (1 - target) * (1 - prob).log()).mean()


@dataclass
class TrainingTuple:
    """One training example: a search crop plus its prototype and labels."""

    search_image: np.ndarray
    prototype: MultiModalPrototype
    gt_box_norm: BoundingBox | None
    contains_target: bool
    modality: ModalityLabel
    sequence_name: str
    frame_indices: dict[str, int]

    def __post_init__(self):
        if self.contains_target and self.gt_box_norm is None:
            raise ValueError("positive tuple without a ground-truth box")
        if not self.contains_target and self.gt_box_norm is not None:
            raise ValueError("negative tuple must not carry a ground-truth box")


def _usable_frames(sequence: Sequence) -> list[Frame]:
    return [f for f in sequence
            if f.visible and f.gt_box is not None and not f.gt_box.is_degenerate()]


def _pick(rng: np.random.Generator, frames: list[Frame]) -> Frame:
    return frames[int(rng.integers(len(frames)))]


def sample_prototype(sequence: Sequence, rng: np.random.Generator,
                     template_crop: CropConfig,
                     cache: dict | None = None) -> tuple[MultiModalPrototype, dict[str, int]]:
    """Random prototype: a fixed sample from any visible frame plus one random
    visible frame per modality; a missing modality falls back to the fixed sample.

    cache, when given, memoizes ground-truth template crops per (sequence, frame);
    they are deterministic, and trainers draw the same frames over and over.
    """
    usable = _usable_frames(sequence)
    if not usable:
        raise EmptySequenceError(f"sequence {sequence.name} has no usable frames")

    def gt_sample(frame: Frame) -> PrototypeSample:
        if cache is None:
            return extract_sample(frame, frame.gt_box, template_crop)
        key = (sequence.name, frame.index)
        if key not in cache:
            cache[key] = extract_sample(frame, frame.gt_box, template_crop)
        return cache[key]

    fixed_frame = _pick(rng, usable)
    fixed = gt_sample(fixed_frame)
    indices = {"fixed": fixed_frame.index}
    slots: dict[str, PrototypeSample] = {}
    for key, modality in (("dyn_rgb", ModalityLabel.RGB), ("dyn_nir", ModalityLabel.NIR)):
        candidates = [f for f in usable if f.modality is modality]
        if candidates:
            frame = _pick(rng, candidates)
            slots[key] = gt_sample(frame)
            indices[key] = frame.index
        else:
            slots[key] = replace(fixed, inherited=True)
            indices[key] = fixed_frame.index
    prototype = MultiModalPrototype(fixed=fixed, dynamic_rgb=slots["dyn_rgb"],
                                    dynamic_nir=slots["dyn_nir"])
    return prototype, indices


def _search_crop_at(frame: Frame, center: tuple[float, float], side: float,
                    search_crop: CropConfig):
    return crop_square(frame.image, center[0], center[1], side, search_crop.out_size,
                       pad_value=float(frame.image.mean()))


def _positive_search(frame: Frame, rng: np.random.Generator, search_crop: CropConfig,
                     center_jitter: float,
                     scale_jitter: float = 0.0) -> tuple[np.ndarray, BoundingBox]:
    gt = frame.gt_box
    side = search_crop.context_factor * float(np.sqrt(gt.w * gt.h))
    if scale_jitter:
        side *= float(2.0 ** rng.uniform(-scale_jitter, scale_jitter))
    jx = float(rng.uniform(-center_jitter, center_jitter)) * side
    jy = float(rng.uniform(-center_jitter, center_jitter)) * side
    crop = _search_crop_at(frame, (gt.cx + jx, gt.cy + jy), side, search_crop)
    box = BoundingBox((gt.x - crop.x0) / crop.side, (gt.y - crop.y0) / crop.side,
                      gt.w / crop.side, gt.h / crop.side, Encoding.NORMALIZED)
    return crop.image, box.clamp_normalized()


def sample_stage1(sequence: Sequence, rng: np.random.Generator,
                  search_crop: CropConfig, template_crop: CropConfig,
                  center_jitter: float = 0.12,
                  scale_jitter: float = 0.0,
                  cache: dict | None = None) -> TrainingTuple:
    """Stage-1 tuple: the search region always contains the target."""
    prototype, indices = sample_prototype(sequence, rng, template_crop, cache)
    usable = _usable_frames(sequence)
    frame = _pick(rng, usable)
    image, box = _positive_search(frame, rng, search_crop, center_jitter, scale_jitter)
    indices["search"] = frame.index
    return TrainingTuple(
        search_image=image, prototype=prototype, gt_box_norm=box,
        contains_target=True, modality=frame.modality,
        sequence_name=sequence.name, frame_indices=indices)


def sample_stage2(sequence: Sequence, rng: np.random.Generator,
                  search_crop: CropConfig, template_crop: CropConfig,
                  p_negative: float = 0.5, center_jitter: float = 0.12,
                  scale_jitter: float = 0.0,
                  displacement: float = 1.5,
                  cache: dict | None = None) -> TrainingTuple:
    """Stage-2 tuple: with probability p_negative the search region misses the
    target, either a crop from an occluded frame or one displaced far from it."""
    prototype, indices = sample_prototype(sequence, rng, template_crop, cache)
    usable = _usable_frames(sequence)
    if float(rng.random()) >= p_negative:
        frame = _pick(rng, usable)
        image, box = _positive_search(frame, rng, search_crop, center_jitter,
                                      scale_jitter)
        indices["search"] = frame.index
        return TrainingTuple(
            search_image=image, prototype=prototype, gt_box_norm=box,
            contains_target=True, modality=frame.modality,
            sequence_name=sequence.name, frame_indices=indices)

    hidden = [f for f in sequence if not f.visible and f.gt_box is not None]
    if hidden and float(rng.random()) < 0.5:
        frame = _pick(rng, hidden)
        gt = frame.gt_box
        side = search_crop.context_factor * float(np.sqrt(max(gt.w * gt.h, 4.0)))
        crop = _search_crop_at(frame, (gt.cx, gt.cy), side, search_crop)
    else:
        frame = _pick(rng, usable)
        gt = frame.gt_box
        side = search_crop.context_factor * float(np.sqrt(gt.w * gt.h))
        angle = float(rng.uniform(0.0, 2.0 * np.pi))
        radius = side * (displacement + float(rng.uniform(0.0, 0.5)))
        center = (gt.cx + radius * np.cos(angle), gt.cy + radius * np.sin(angle))
        crop = _search_crop_at(frame, center, side, search_crop)
    indices["search"] = frame.index
    return TrainingTuple(
        search_image=crop.image, prototype=prototype, gt_box_norm=None,
        contains_target=False, modality=frame.modality,
        sequence_name=sequence.name, frame_indices=indices)


@dataclass(frozen=True)
class ScheduleConfig:
    """Learning schedule for the two stages."""

    stage1_epochs: int = 4
    stage2_epochs: int = 50
    steps_per_epoch: int = 50
    batch_size: int = 16
    stage1_base_lr: float = 1e-3    # nominal rate of the pretraining the stage mimics
    stage1_lr_scale: float = 0.1    # fine-tuning runs at a tenth of that
    stage2_lr: float = 1e-4
    stage2_decay_epoch: int = 40
    stage2_decay_factor: float = 10.0
    p_negative: float = 0.5
    center_jitter: float = 0.12  # search-center wobble as a fraction of the crop side
    scale_jitter: float = 0.25   # crop side multiplied by 2**uniform(+/- this)

    def __post_init__(self):
        if min(self.stage1_epochs, self.stage2_epochs, self.steps_per_epoch,
               self.batch_size) < 1:
            raise ValueError("epochs, steps and batch size must be >= 1")
        if not 1 <= self.stage2_decay_epoch < self.stage2_epochs:
            raise ValueError("stage2_decay_epoch must satisfy 1 <= decay < stage2_epochs")
        if not 0.0 <= self.p_negative <= 1.0:
            raise ValueError("p_negative must lie in [0, 1]")

    def stage1_lr(self) -> float:
        return self.stage1_base_lr * self.stage1_lr_scale

    def stage2_lr_at_epoch(self, epoch: int) -> float:
        """1-based epoch; the rate drops by the decay factor after decay_epoch."""
        if epoch < 1:
            raise ValueError("epochs are 1-based")
        if epoch > self.stage2_decay_epoch:
            return self.stage2_lr / self.stage2_decay_factor
        return self.stage2_lr


@dataclass
class TrainResult:
    records: list[dict]
    last_epoch: int
    final_loss: float
    optimizer_arrays: dict[str, np.ndarray]


LogFn = Callable[[dict], None]


class JsonlLogger:
    """Writes one JSON object per training step; doubles as an in-memory record."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = self.path.open("a", encoding="utf-8")
        else:
            self._fh = None

    def __call__(self, record: dict) -> None:
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def collate(tuples: SequenceT[TrainingTuple], dtype: torch.dtype = torch.float32) -> dict:
    search = torch.cat([image_to_tensor(t.search_image, dtype) for t in tuples])
    fixed = torch.cat([image_to_tensor(t.prototype.fixed.image, dtype) for t in tuples])
    dyn_rgb = torch.cat([image_to_tensor(t.prototype.dynamic_rgb.image, dtype)
                         for t in tuples])
    dyn_nir = torch.cat([image_to_tensor(t.prototype.dynamic_nir.image, dtype)
                         for t in tuples])
    boxes = torch.zeros(len(tuples), 4, dtype=dtype)
    mask = torch.zeros(len(tuples), dtype=torch.bool)
    for i, t in enumerate(tuples):
        if t.gt_box_norm is not None:
            boxes[i] = torch.tensor(t.gt_box_norm.as_xywh(), dtype=dtype)
            mask[i] = True
    y_pe = torch.tensor([float(t.contains_target) for t in tuples], dtype=dtype)
    y_pc = torch.tensor([float(t.modality is ModalityLabel.NIR) for t in tuples],
                        dtype=dtype)
    return {"search": search, "fixed": fixed, "dyn_rgb": dyn_rgb, "dyn_nir": dyn_nir,
            "boxes": boxes, "mask": mask, "y_pe": y_pe, "y_pc": y_pc}


def _epoch_rng(seed: int, stage: int, epoch: int) -> np.random.Generator:
    # one stream per (seed, stage, epoch): resuming at an epoch boundary replays exactly
    return np.random.default_rng(np.random.SeedSequence([seed, stage, epoch]))


def _optimizer_arrays(opt: torch.optim.Adam, names: list[str]) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    params = opt.param_groups[0]["params"]
    for name, p in zip(names, params):
        state = opt.state.get(p, {})
        if not state:
            continue
        arrays[f"opt:{name}:step"] = np.asarray(float(state["step"]))
        arrays[f"opt:{name}:exp_avg"] = state["exp_avg"].detach().cpu().numpy()
        arrays[f"opt:{name}:exp_avg_sq"] = state["exp_avg_sq"].detach().cpu().numpy()
    return arrays


def _load_optimizer_arrays(opt: torch.optim.Adam, names: list[str],
                           arrays: dict[str, np.ndarray]) -> None:
    params = opt.param_groups[0]["params"]
    for name, p in zip(names, params):
        key = f"opt:{name}:step"
        if key not in arrays:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(arrays[key])),
            "exp_avg": torch.from_numpy(arrays[f"opt:{name}:exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(arrays[f"opt:{name}:exp_avg_sq"].copy()),
        }


def _run_stage(model: ProtoTrackNet, sequences: list[Sequence], schedule: ScheduleConfig,
               seed: int, stage: int, trained_names: list[str],
               step_fn, lr_fn, log: LogFn | None,
               start_epoch: int, epochs: int,
               resume_arrays: dict[str, np.ndarray] | None,
               epoch_callback=None) -> TrainResult:
    usable = [s for s in sequences if _usable_frames(s)]
    if not usable:
        raise EmptySequenceError("no sequence with usable frames")
    name_set = set(trained_names)
    frozen = [(n, p) for n, p in model.named_parameters() if n not in name_set]
    trained = [(n, p) for n, p in model.named_parameters() if n in name_set]
    for _, p in frozen:
        p.requires_grad_(False)
    opt = torch.optim.Adam([p for _, p in trained], lr=lr_fn(max(start_epoch, 1)))
    if resume_arrays:
        _load_optimizer_arrays(opt, [n for n, _ in trained], resume_arrays)
    last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}
    records: list[dict] = []
    final_loss = float("nan")
    try:
        for epoch in range(start_epoch, epochs + 1):
            lr = lr_fn(epoch)
            for group in opt.param_groups:
                group["lr"] = lr
            rng = _epoch_rng(seed, stage, epoch)
            for i in range(schedule.steps_per_epoch):
                step = (epoch - 1) * schedule.steps_per_epoch + i + 1
                seqs = [usable[int(rng.integers(len(usable)))]
                        for _ in range(schedule.batch_size)]
                try:
                    loss, parts = step_fn(opt, seqs, rng)
                except NonFiniteError as exc:
                    model.load_state_dict(last_good)
                    raise TrainingDivergedError(
                        f"stage {stage} step {step}: {exc}") from exc
                if not math.isfinite(loss):
                    model.load_state_dict(last_good)
                    raise TrainingDivergedError(
                        f"non-finite loss at stage {stage} step {step}")
                final_loss = loss
                record = {"step": step, "stage": stage, "epoch": epoch,
                          "loss": round(loss, 8), "lr": lr}
                record.update({k: round(v, 8) for k, v in parts.items()})
                records.append(record)
                if log is not None:
                    log(record)
            last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}
            if epoch_callback is not None:
                epoch_callback(epoch, _optimizer_arrays(opt, [n for n, _ in trained]))
    finally:
        for _, p in frozen:
            p.requires_grad_(True)
    return TrainResult(records=records, last_epoch=epochs, final_loss=final_loss,
                       optimizer_arrays=_optimizer_arrays(opt, [n for n, _ in trained]))


def train_stage1(model: ProtoTrackNet, sequences: list[Sequence],
                 schedule: ScheduleConfig, seed: int = 0,
                 weights: LossWeights = LossWeights(), log: LogFn | None = None,
                 start_epoch: int = 1,
                 resume_arrays: dict[str, np.ndarray] | None = None,
                 epoch_callback=None) -> TrainResult:
    """Fit the localization path; the score heads do not move."""
    cfg = model.config
    groups = model.parameter_groups()
    template_cache: dict = {}

    def step_fn(opt, seqs, rng):
        tuples = [sample_stage1(s, rng, cfg.search_crop(), cfg.template_crop(),
                                center_jitter=schedule.center_jitter,
                                scale_jitter=schedule.scale_jitter,
                                cache=template_cache)
                  for s in seqs]
        batch = collate(tuples, next(model.parameters()).dtype)
        out = model(batch["search"], batch["fixed"], batch["dyn_rgb"], batch["dyn_nir"])
        losses = loc_loss_batch(batch["boxes"], out["box"], weights, batch["mask"])
        opt.zero_grad()
        losses["loss"].backward()
        opt.step()
        return float(losses["loss"].detach()), {
            "loss_iou": float(losses["loss_iou"].detach()),
            "loss_l1": float(losses["loss_l1"].detach())}

    return _run_stage(model, sequences, schedule, seed, stage=1,
                      trained_names=groups["backbone"], step_fn=step_fn,
                      lr_fn=lambda _epoch: schedule.stage1_lr(), log=log,
                      start_epoch=start_epoch, epochs=schedule.stage1_epochs,
                      resume_arrays=resume_arrays, epoch_callback=epoch_callback)


def train_stage2(model: ProtoTrackNet, sequences: list[Sequence],
                 schedule: ScheduleConfig, seed: int = 0, log: LogFn | None = None,
                 start_epoch: int = 1,
                 resume_arrays: dict[str, np.ndarray] | None = None,
                 epoch_callback=None) -> TrainResult:
    """Fit the score heads on mixed positive/negative search regions; the
    localization path does not move. The rate decays by the configured factor
    after the decay epoch."""
    cfg = model.config
    groups = model.parameter_groups()
    template_cache: dict = {}

    def step_fn(opt, seqs, rng):
        tuples = [sample_stage2(s, rng, cfg.search_crop(), cfg.template_crop(),
                                p_negative=schedule.p_negative,
                                center_jitter=schedule.center_jitter,
                                scale_jitter=schedule.scale_jitter,
                                cache=template_cache) for s in seqs]
        batch = collate(tuples, next(model.parameters()).dtype)
        out = model(batch["search"], batch["fixed"], batch["dyn_rgb"], batch["dyn_nir"])
        loss_pc = bce_batch(batch["y_pc"], out["nir_prob"])
        loss_pe = bce_batch(batch["y_pe"], out["reliability"])
        loss = loss_pc + loss_pe
        opt.zero_grad()
        loss.backward()
        opt.step()
        return float(loss.detach()), {"loss_pc": float(loss_pc.detach()),
                                      "loss_pe": float(loss_pe.detach())}

    return _run_stage(model, sequences, schedule, seed, stage=2,
                      trained_names=groups["score_heads"], step_fn=step_fn,
                      lr_fn=schedule.stage2_lr_at_epoch, log=log,
                      start_epoch=start_epoch, epochs=schedule.stage2_epochs,
                      resume_arrays=resume_arrays, epoch_callback=epoch_callback)
