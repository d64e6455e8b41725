"""Tracking metrics, attribute breakdowns, and the variant / update-interval
ablation runners.

Conventions (documented because benchmark toolkits disagree on them):
precision counts frames with center error <= threshold over 0..50 px and reports
the 20 px value; normalized precision divides the per-axis error by the ground
truth size, reports the exact area under the step curve over [0, 0.5]; success
curves use strict "overlap > threshold" at the 21-point grid while the reported
score is the exact area under the step curve, i.e. the mean overlap. Each metric
is computed per sequence and averaged over sequences.
"""

from __future__ import annotations

import csv
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import BoundingBox, ModalityLabel, Sequence, boxes_to_array
from .proto import UpdateDecision, UpdatePolicy, init_prototype, tick
from .model import ProtoTrackNet, TrackOutput, track_step

PR_THRESHOLDS = np.arange(0, 51, dtype=np.float64)          # pixels
PR_REPRESENTATIVE_PX = 20.0
NPR_RANGE = 0.5
NPR_THRESHOLDS = np.linspace(0.0, NPR_RANGE, 51)
SR_THRESHOLDS = np.linspace(0.0, 1.0, 21)

VARIANTS = ("full", "os", "tv", "mv")


@dataclass
class TrackRecord:
    """Per-sequence tracker output; all per-frame lists share the sequence length."""

    name: str
    boxes: list[BoundingBox]
    reliability: list[float]
    nir_prob: list[float]
    decisions: list[UpdateDecision] = field(default_factory=list)
    frame_times: list[float] = field(default_factory=list)  # seconds, frames 1..N-1
    errors: list[str] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.boxes)
        if len(self.reliability) != n or len(self.nir_prob) != n:
            raise ValueError(f"record {self.name}: per-frame lists disagree in length")

    @property
    def applied_updates(self) -> int:
        return sum(1 for d in self.decisions if d.applied)

    def median_frame_time(self) -> float:
        return float(np.median(self.frame_times)) if self.frame_times else float("nan")


def run_tracker(model: ProtoTrackNet, sequence: Sequence, interval: int = 50,
                policy: UpdatePolicy = UpdatePolicy()) -> TrackRecord:
    """Track one sequence from its frame-0 annotation; wall time is measured
    around the model-plus-engine work only, never file I/O."""
    first = sequence.frames[0]
    init_box = first.gt_box
    prototype, state = init_prototype(first, init_box, model.config.template_crop(),
                                      update_interval=interval, policy=policy)
    state = tick(state)  # frame 0 is a processed frame
    boxes = [init_box]
    reliability = [1.0]
    nir_prob = [1.0 if first.modality is ModalityLabel.NIR else 0.0]
    times: list[float] = []
    errors: list[str] = []
    prev = init_box
    was_train = model.training
    model.eval()
    try:
        for frame in sequence.frames[1:]:
            t0 = time.perf_counter()
            out, prototype, state = track_step(model, prototype, state, frame, prev)
            times.append(time.perf_counter() - t0)
            boxes.append(out.box_pixels)
            reliability.append(out.reliability)
            nir_prob.append(out.nir_prob)
            if out.error:
                errors.append(out.error)
            prev = out.box_pixels
    finally:
        if was_train:
            model.train()
    return TrackRecord(name=sequence.name, boxes=boxes, reliability=reliability,
                       nir_prob=nir_prob, decisions=list(state.decision_log),
                       frame_times=times, errors=errors)


def _paired_errors(record_boxes: list[BoundingBox], sequence: Sequence,
                   exclude_invisible: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-frame center error (px), size-normalized center error and overlap,
    over frames that carry a ground-truth box."""
    if len(record_boxes) != len(sequence):
        raise ValueError(f"{sequence.name}: {len(record_boxes)} predictions for "
                         f"{len(sequence)} frames")
    dists, ndists, ious = [], [], []
    from .core import center_distance, iou as box_iou
    for pred, frame in zip(record_boxes, sequence.frames):
        gt = frame.gt_box
        if gt is None or gt.is_degenerate():
            continue
        if exclude_invisible and not frame.visible:
            continue
        dists.append(center_distance(pred, gt))
        ndists.append(center_distance(pred, gt, normalized_by=gt))
        ious.append(box_iou(pred, gt))
    return (np.asarray(dists, dtype=np.float64),
            np.asarray(ndists, dtype=np.float64),
            np.asarray(ious, dtype=np.float64))


@dataclass
class Curve:
    thresholds: np.ndarray
    values: np.ndarray
    representative: float


def _mean_curve(curves: list[Curve]) -> Curve:
    values = np.mean([c.values for c in curves], axis=0)
    rep = float(np.mean([c.representative for c in curves]))
    return Curve(thresholds=curves[0].thresholds, values=values, representative=rep)


def pr_curve_for_errors(dists: np.ndarray) -> Curve:
    values = np.array([(dists <= t).mean() for t in PR_THRESHOLDS])
    rep = float((dists <= PR_REPRESENTATIVE_PX).mean())
    return Curve(PR_THRESHOLDS, values, rep)


def npr_curve_for_errors(ndists: np.ndarray) -> Curve:
    values = np.array([(ndists <= t).mean() for t in NPR_THRESHOLDS])
    # exact integral of the empirical step curve over [0, NPR_RANGE]
    rep = float(np.mean(1.0 - np.minimum(ndists, NPR_RANGE) / NPR_RANGE))
    return Curve(NPR_THRESHOLDS, values, rep)


def sr_curve_for_overlaps(ious: np.ndarray) -> Curve:
    values = np.array([(ious > t).mean() for t in SR_THRESHOLDS])
    # exact integral of the strict success step curve over [0, 1] = mean overlap
    rep = float(np.mean(ious))
    return Curve(SR_THRESHOLDS, values, rep)


def _check_alignment(records: list[TrackRecord], sequences: list[Sequence]) -> None:
    if len(records) != len(sequences):
        raise ValueError(f"{len(records)} records for {len(sequences)} sequences")
    for r, s in zip(records, sequences):
        if len(r.boxes) != len(s):
            raise ValueError(f"{s.name}: {len(r.boxes)} predictions for {len(s)} frames")


def pr_score(records: list[TrackRecord], sequences: list[Sequence],
             exclude_invisible: bool = False) -> Curve:
    """Center-error precision averaged per sequence; representative value at 20 px."""
    _check_alignment(records, sequences)
    curves = [pr_curve_for_errors(
        _paired_errors(r.boxes, s, exclude_invisible)[0])
        for r, s in zip(records, sequences)]
    return _mean_curve(curves)


def npr_score(records: list[TrackRecord], sequences: list[Sequence],
              exclude_invisible: bool = False) -> Curve:
    """Size-normalized precision; representative value is the AUC over [0, 0.5]."""
    _check_alignment(records, sequences)
    curves = [npr_curve_for_errors(
        _paired_errors(r.boxes, s, exclude_invisible)[1])
        for r, s in zip(records, sequences)]
    return _mean_curve(curves)


def sr_score(records: list[TrackRecord], sequences: list[Sequence],
             exclude_invisible: bool = False) -> Curve:
    """Overlap success; representative value is the AUC (mean overlap)."""
    _check_alignment(records, sequences)
    curves = [sr_curve_for_overlaps(
        _paired_errors(r.boxes, s, exclude_invisible)[2])
        for r, s in zip(records, sequences)]
    return _mean_curve(curves)


@dataclass
class AttributeCell:
    pr: float
    npr: float
    sr: float
    sequences: int


@dataclass
class MetricReport:
    pr: float
    npr: float
    sr: float
    fps: float
    variant: str = "full"
    interval: int = 50
    applied_updates: int = 0
    curves: dict[str, Curve] = field(default_factory=dict)
    per_attribute: dict[str, AttributeCell] = field(default_factory=dict)
    per_sequence: dict[str, dict] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("pr", "npr", "sr"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} out of [0, 1]: {v}")

    def summary_row(self) -> dict:
        return {"variant": self.variant, "interval": self.interval,
                "PR": round(self.pr, 6), "NPR": round(self.npr, 6),
                "SR": round(self.sr, 6), "FPS": round(self.fps, 3),
                "applied_updates": self.applied_updates}


def attribute_breakdown(records: list[TrackRecord], sequences: list[Sequence],
                        exclude_invisible: bool = False) -> dict[str, AttributeCell]:
    """Per-tag metric cells; a sequence contributes to every tag it carries and
    the ALL cell aggregates every sequence. Absent tags yield no cell at all."""
    _check_alignment(records, sequences)
    per_seq = []
    for r, s in zip(records, sequences):
        d, nd, io = _paired_errors(r.boxes, s, exclude_invisible)
        per_seq.append((pr_curve_for_errors(d).representative,
                        npr_curve_for_errors(nd).representative,
                        sr_curve_for_overlaps(io).representative))
    cells: dict[str, AttributeCell] = {}
    from .data import AttributeTag
    for tag in AttributeTag.names():
        rows = [m for m, s in zip(per_seq, sequences) if tag in s.attributes]
        if rows:
            arr = np.asarray(rows)
            cells[tag] = AttributeCell(*(float(x) for x in arr.mean(axis=0)),
                                       sequences=len(rows))
    arr = np.asarray(per_seq)
    cells["ALL"] = AttributeCell(*(float(x) for x in arr.mean(axis=0)),
                                 sequences=len(per_seq))
    return cells


def _worker_count() -> int:
    env = os.environ.get("PROTOTRACK_NUM_WORKERS", "")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        return 1


def track_dataset(model: ProtoTrackNet, sequences: list[Sequence], interval: int,
                  policy: UpdatePolicy) -> list[TrackRecord]:
    workers = min(_worker_count(), len(sequences))
    if workers <= 1:
        return [run_tracker(model, s, interval, policy) for s in sequences]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: run_tracker(model, s, interval, policy), sequences))


def report_from_records(records: list[TrackRecord], sequences: list[Sequence],
                        variant: str = "full", interval: int = 50,
                        exclude_invisible: bool = False) -> MetricReport:
    pr = pr_score(records, sequences, exclude_invisible)
    npr = npr_score(records, sequences, exclude_invisible)
    sr = sr_score(records, sequences, exclude_invisible)
    medians = [r.median_frame_time() for r in records if r.frame_times]
    fps = float(1.0 / np.median(medians)) if medians else float("nan")
    per_sequence = {}
    for r, s in zip(records, sequences):
        d, nd, io = _paired_errors(r.boxes, s, exclude_invisible)
        per_sequence[s.name] = {
            "pr": pr_curve_for_errors(d).representative,
            "npr": npr_curve_for_errors(nd).representative,
            "sr": sr_curve_for_overlaps(io).representative,
            "applied_updates": r.applied_updates,
            "errors": len(r.errors),
        }
    return MetricReport(
        pr=pr.representative, npr=npr.representative, sr=sr.representative, fps=fps,
        variant=variant, interval=interval,
        applied_updates=sum(r.applied_updates for r in records),
        curves={"pr": pr, "npr": npr, "sr": sr},
        per_attribute=attribute_breakdown(records, sequences, exclude_invisible),
        per_sequence=per_sequence)


def run_benchmark(model: ProtoTrackNet, sequences: list[Sequence],
                  variant: str = "full", interval: int = 50,
                  exclude_invisible: bool = False) -> MetricReport:
    """Track every sequence under the variant's update policy and report metrics."""
    policy = UpdatePolicy.from_variant(variant)
    records = track_dataset(model, sequences, interval, policy)
    return report_from_records(records, sequences, variant=variant, interval=interval,
                               exclude_invisible=exclude_invisible)


def run_variant_ablation(model: ProtoTrackNet, sequences: list[Sequence],
                         interval: int = 50) -> dict[str, MetricReport]:
    return {v: run_benchmark(model, sequences, variant=v, interval=interval)
            for v in VARIANTS}


def run_interval_ablation(model: ProtoTrackNet, sequences: list[Sequence],
                          intervals: tuple[int, ...] = (25, 50, 100, 200, 500),
                          variant: str = "full") -> list[MetricReport]:
    return [run_benchmark(model, sequences, variant=variant, interval=k)
            for k in intervals]


def save_report(report: MetricReport, out_dir: str | Path, stem: str = "report") -> None:
    """Write the human-readable report plus machine-readable CSVs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"variant={report.variant} interval={report.interval}",
             f"PR@{PR_REPRESENTATIVE_PX:g}px = {report.pr:.4f}",
             f"NPR-AUC      = {report.npr:.4f}",
             f"SR-AUC       = {report.sr:.4f}",
             f"FPS (median) = {report.fps:.2f}",
             f"applied updates = {report.applied_updates}",
             "", "per-sequence:"]
    for name, row in sorted(report.per_sequence.items()):
        lines.append(f"  {name}: PR {row['pr']:.4f}  NPR {row['npr']:.4f}  "
                     f"SR {row['sr']:.4f}  updates {row['applied_updates']}")
    (out_dir / f"{stem}.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_summary_csv(out_dir / f"{stem}.csv", [report])
    with (out_dir / f"{stem}_attributes.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["attribute", "PR", "NPR", "SR", "sequences"])
        for tag, cell in report.per_attribute.items():
            writer.writerow([tag, f"{cell.pr:.6f}", f"{cell.npr:.6f}",
                             f"{cell.sr:.6f}", cell.sequences])


def write_summary_csv(path: str | Path, reports: list[MetricReport]) -> None:
    rows = [r.summary_row() for r in reports]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def plot_curves(report: MetricReport, out_dir: str | Path) -> None:
    """Success and precision curve images."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    specs = [("pr", "center error threshold [px]", "precision",
              f"PR@20px = {report.pr:.3f}"),
             ("npr", "normalized center error threshold", "normalized precision",
              f"NPR-AUC = {report.npr:.3f}"),
             ("sr", "overlap threshold", "success rate", f"SR-AUC = {report.sr:.3f}")]
    for key, xlabel, ylabel, label in specs:
        curve = report.curves[key]
        fig, ax = plt.subplots(figsize=(4.5, 3.4))
        ax.plot(curve.thresholds, curve.values, label=label)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.set_ylim(0, 1.02)
        ax.grid(alpha=0.3)
        ax.legend(loc="lower right" if key != "sr" else "upper right")
        fig.tight_layout()
        fig.savefig(out_dir / f"curve_{key}.png", dpi=110)
        plt.close(fig)


def plot_update_timeline(record: TrackRecord, sequence: Sequence,
                         path: str | Path) -> None:
    """Timeline of the update machine over one sequence: reliability trace,
    modality bands, and markers where updates were applied."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(7.0, 2.8))
    n = len(sequence)
    modal = np.array([1 if f.modality is ModalityLabel.NIR else 0
                      for f in sequence.frames])
    ax.fill_between(np.arange(n), 0, 1, where=modal == 1, color="0.85", step="post",
                    label="NIR frames")
    ax.plot(np.arange(n), record.reliability, lw=1.0, color="tab:blue",
            label="reliability")
    ax.axhline(0.5, color="tab:red", lw=0.8, ls="--")
    applied = [d for d in record.decisions if d.applied]
    for kind, color in (("MODALITY_SWITCH", "tab:green"), ("PERIODIC", "tab:orange")):
        xs = [d.frame_index for d in applied if d.trigger.value == kind]
        if xs:
            ax.scatter(xs, [1.03] * len(xs), marker="v", s=18, color=color,
                       label=f"{kind.lower()} update", clip_on=False)
    ax.set_xlim(0, n - 1)
    ax.set_ylim(0, 1.08)
    ax.set_xlabel("frame")
    ax.set_ylabel("reliability")
    ax.legend(loc="lower left", fontsize=7, ncol=2)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110)
    plt.close(fig)


def records_from_files(pred_dir: str | Path, sequences: list[Sequence]) -> list[TrackRecord]:
    """Rebuild records from the files cmd_track writes; fails naming any missing
    sequence."""
    from .core import load_boxes
    from .proto import load_decision_log
    pred_dir = Path(pred_dir)
    records = []
    for seq in sequences:
        box_path = pred_dir / "predictions" / f"{seq.name}.txt"
        if not box_path.is_file():
            raise ValueError(f"missing prediction file for sequence {seq.name}: {box_path}")
        boxes = load_boxes(box_path)
        score_path = pred_dir / "scores" / f"{seq.name}.txt"
        reliability = [1.0] * len(boxes)
        nir_prob = [0.0] * len(boxes)
        if score_path.is_file():
            rows = [l.split(",") for l in
                    score_path.read_text(encoding="utf-8").splitlines() if l.strip()]
            reliability = [float(r[1]) for r in rows]
            nir_prob = [float(r[2]) for r in rows]
        decisions = []
        dec_path = pred_dir / "decisions" / f"{seq.name}.txt"
        if dec_path.is_file():
            decisions = load_decision_log(dec_path)
        times: list[float] = []
        t_path = pred_dir / "timing" / f"{seq.name}.txt"
        if t_path.is_file():
            times = [float(l) for l in
                     t_path.read_text(encoding="utf-8").splitlines() if l.strip()]
        records.append(TrackRecord(name=seq.name, boxes=boxes, reliability=reliability,
                                   nir_prob=nir_prob, decisions=decisions,
                                   frame_times=times))
    return records
