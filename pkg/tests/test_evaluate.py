import math

import numpy as np
import pytest
import torch

from prototrack.core import BoundingBox, Frame, ModalityLabel, Sequence
from prototrack.data import SynthSpec, generate_sequence
from prototrack.evaluate import (MetricReport, TrackRecord, attribute_breakdown,
                                 npr_curve_for_errors, npr_score, pr_curve_for_errors,
                                 pr_score, report_from_records, run_benchmark,
                                 run_interval_ablation, run_tracker,
                                 run_variant_ablation, save_report,
                                 sr_curve_for_overlaps, sr_score, write_summary_csv)
from prototrack.model import ScoreHead, build_model
from prototrack.proto import UpdatePolicy

from conftest import make_frame
from oracles import box_iou_xywh, counting_npr_auc, counting_pr, counting_sr

RGB, NIR = ModalityLabel.RGB, ModalityLabel.NIR


def simple_sequence(gt_boxes, name="seq", size=200, modalities=None, visible=None):
    frames = []
    for i, b in enumerate(gt_boxes):
        image = np.zeros((size, size, 3), dtype=np.float32)
        frames.append(Frame(
            image=image,
            modality=(modalities[i] if modalities else RGB),
            index=i, gt_box=b,
            visible=visible[i] if visible else True))
    return Sequence(frames=frames, name=name)


def record_for(seq, boxes, times=None):
    n = len(seq)
    return TrackRecord(name=seq.name, boxes=boxes, reliability=[1.0] * n,
                       nir_prob=[0.0] * n, frame_times=times or [])


class TestPrScore:
    def test_perfect_everywhere(self):
        gts = [BoundingBox(10 + i, 10, 8, 8) for i in range(5)]
        seq = simple_sequence(gts)
        curve = pr_score([record_for(seq, gts)], [seq])
        assert np.all(curve.values == 1.0)
        assert curve.representative == 1.0

    def test_step_at_25px(self):
        gts = [BoundingBox(50, 50, 10, 10) for _ in range(4)]
        seq = simple_sequence(gts)
        preds = [b.translated(25, 0) for b in gts]
        curve = pr_score([record_for(seq, preds)], [seq])
        t = list(curve.thresholds)
        assert curve.values[t.index(20)] == 0.0
        assert curve.values[t.index(30)] == 1.0
        assert curve.representative == 0.0

    def test_half_at_20px(self):
        gts = [BoundingBox(50, 50, 10, 10), BoundingBox(60, 60, 10, 10)]
        seq = simple_sequence(gts)
        preds = [gts[0].translated(10, 0), gts[1].translated(30, 0)]
        curve = pr_score([record_for(seq, preds)], [seq])
        assert curve.representative == 0.5

    def test_length_mismatch(self):
        gts = [BoundingBox(10, 10, 8, 8)] * 3
        seq = simple_sequence(gts)
        short = TrackRecord(name=seq.name, boxes=gts[:2], reliability=[1.0] * 2,
                            nir_prob=[0.0] * 2)
        with pytest.raises(ValueError, match="predictions for"):
            pr_score([short], [seq])

    def test_monotone_nondecreasing(self):
        rng = np.random.default_rng(0)
        gts = [BoundingBox(*rng.uniform(20, 120, 2), 10, 10) for _ in range(30)]
        seq = simple_sequence(gts)
        preds = [b.translated(*rng.normal(0, 15, 2)) for b in gts]
        curve = pr_score([record_for(seq, preds)], [seq])
        assert np.all(np.diff(curve.values) >= 0)


class TestNprScore:
    def test_perfect(self):
        gts = [BoundingBox(10, 10, 8, 8)] * 3
        seq = simple_sequence(gts)
        assert npr_score([record_for(seq, gts)], [seq]).representative == 1.0

    def test_scale_invariance(self):
        rng = np.random.default_rng(1)
        gts = [BoundingBox(float(x), float(y), 12.0, 9.0)
               for x, y in rng.uniform(30, 100, (10, 2))]
        preds = [b.translated(*rng.normal(0, 4, 2)) for b in gts]
        seq1 = simple_sequence(gts, size=200)
        curve1 = npr_score([record_for(seq1, preds)], [seq1])
        seq3 = simple_sequence([b.scaled(3) for b in gts], size=600)
        curve3 = npr_score([record_for(seq3, [b.scaled(3) for b in preds])], [seq3])
        assert np.allclose(curve1.values, curve3.values)
        assert curve1.representative == pytest.approx(curve3.representative, abs=1e-12)

    def test_single_frame_quarter_error_gives_half_auc(self):
        gt = BoundingBox(100, 100, 8, 8)
        seq = simple_sequence([gt])
        pred = gt.translated(0.25 * 8, 0)  # normalized error exactly 0.25
        curve = npr_score([record_for(seq, [pred])], [seq])
        assert curve.representative == pytest.approx(0.5, abs=1e-12)


class TestSrScore:
    def test_perfect_is_exactly_one(self):
        gts = [BoundingBox(10, 10, 8, 8)] * 4
        seq = simple_sequence(gts)
        curve = sr_score([record_for(seq, gts)], [seq])
        assert curve.representative == 1.0

    def test_all_zero_overlap_strict_convention(self):
        gts = [BoundingBox(10, 10, 8, 8)] * 4
        seq = simple_sequence(gts, size=400)
        preds = [BoundingBox(200, 200, 8, 8)] * 4
        curve = sr_score([record_for(seq, preds)], [seq])
        assert np.all(curve.values == 0.0)  # 0 > 0 is false at t = 0
        assert curve.representative == 0.0

    def test_constant_half_overlap(self):
        # exact dyadic arithmetic: inter 16, union 32 -> iou = 0.5 exactly
        gt = BoundingBox(100, 100, 6, 4)
        pred = BoundingBox(102, 100, 6, 4)
        seq = simple_sequence([gt] * 3)
        curve = sr_score([record_for(seq, [pred] * 3)], [seq])
        ious = box_iou_xywh(gt.as_xywh(), pred.as_xywh())
        assert ious == 0.5
        below = curve.thresholds < 0.5
        assert np.all(curve.values[below] == 1.0)
        assert np.all(curve.values[~below] == 0.0)
        assert curve.representative == pytest.approx(0.5, abs=1e-12)

    def test_monotone_nonincreasing(self):
        rng = np.random.default_rng(2)
        gts = [BoundingBox(*rng.uniform(20, 120, 2), 14, 11) for _ in range(30)]
        seq = simple_sequence(gts)
        preds = [b.translated(*rng.normal(0, 6, 2)) for b in gts]
        curve = sr_score([record_for(seq, preds)], [seq])
        assert np.all(np.diff(curve.values) <= 0)


class TestCountingOracle:
    def test_curves_match_counting_reimplementation(self):
        rng = np.random.default_rng(3)
        records, seqs = [], []
        for s in range(12):
            n = int(rng.integers(3, 12))
            gts = [BoundingBox(*rng.uniform(30, 120, 2),
                               *rng.uniform(6, 20, 2)) for _ in range(n)]
            seq = simple_sequence(gts, name=f"s{s}")
            preds = [b.translated(*rng.normal(0, 12, 2)) for b in gts]
            seqs.append(seq)
            records.append(record_for(seq, preds))
        pr = pr_score(records, seqs)
        npr = npr_score(records, seqs)
        sr = sr_score(records, seqs)
        pr_ref, sr_ref, npr_rep_ref, sr_rep_ref = [], [], [], []
        from prototrack.core import center_distance, iou
        for rec, seq in zip(records, seqs):
            dists = np.array([center_distance(p, f.gt_box)
                              for p, f in zip(rec.boxes, seq.frames)])
            ndists = np.array([center_distance(p, f.gt_box, normalized_by=f.gt_box)
                               for p, f in zip(rec.boxes, seq.frames)])
            ious = np.array([iou(p, f.gt_box)
                             for p, f in zip(rec.boxes, seq.frames)])
            pr_ref.append(counting_pr(dists, pr.thresholds))
            sr_ref.append(counting_sr(ious, sr.thresholds))
            npr_rep_ref.append(counting_npr_auc(ndists))
            sr_rep_ref.append(float(np.mean(ious)))
        assert np.allclose(pr.values, np.mean(pr_ref, axis=0), atol=1e-9)
        assert np.allclose(sr.values, np.mean(sr_ref, axis=0), atol=1e-9)
        assert npr.representative == pytest.approx(np.mean(npr_rep_ref), abs=1e-9)
        assert sr.representative == pytest.approx(np.mean(sr_rep_ref), abs=1e-9)


class TestAttributeBreakdown:
    def _tagged_sequence(self, tags, name, offset):
        gts = [BoundingBox(40 + offset, 40, 10, 10) for _ in range(4)]
        seq = simple_sequence(gts, name=name)
        seq.frames[0].attributes |= set(tags)
        return seq, record_for(seq, [b.translated(offset, 0) for b in gts])

    def test_single_tag_equals_all(self):
        seq, rec = self._tagged_sequence({"MA"}, "only", 5)
        cells = attribute_breakdown([rec], [seq])
        assert cells["MA"].sr == cells["ALL"].sr
        assert cells["MA"].sequences == 1

    def test_disjoint_partition_weighted_aggregate(self):
        seq1, rec1 = self._tagged_sequence({"MA"}, "a", 0)
        seq2, rec2 = self._tagged_sequence({"FO"}, "b", 4)
        seq3, rec3 = self._tagged_sequence({"FO"}, "c", 9)
        cells = attribute_breakdown([rec1, rec2, rec3], [seq1, seq2, seq3])
        expected_all = (cells["MA"].sr * 1 + cells["FO"].sr * 2) / 3
        assert cells["ALL"].sr == pytest.approx(expected_all, abs=1e-12)

    def test_absent_tag_missing_not_zero(self):
        seq, rec = self._tagged_sequence({"MA"}, "only", 0)
        cells = attribute_breakdown([rec], [seq])
        assert "MB" not in cells


class TestTrackRecord:
    def test_length_validation(self):
        with pytest.raises(ValueError, match="length"):
            TrackRecord(name="x", boxes=[BoundingBox(0, 0, 1, 1)] * 3,
                        reliability=[1.0] * 2, nir_prob=[0.0] * 3)

    def test_report_score_range_validation(self):
        with pytest.raises(ValueError):
            MetricReport(pr=1.2, npr=0.5, sr=0.5, fps=10.0)


def constant_model(tiny_config, reliability_bias=50.0, nir_bias=-50.0):
    model = build_model(tiny_config).eval()
    for head, bias in ((model.reliability_head, reliability_bias),
                       (model.modality_head, nir_bias)):
        for p in head.parameters():
            torch.nn.init.zeros_(p)
        with torch.no_grad():
            head.layers[-1].bias.fill_(bias)
    return model


@pytest.fixture(scope="module")
def never_switch_sequence():
    return generate_sequence(SynthSpec(num_frames=60, image_size=96, seed=40,
                                       name="steady"))


class TestBenchmarkRunners:
    def test_mv_on_never_switching_sequence_zero_updates(self, tiny_config,
                                                         never_switch_sequence):
        model = constant_model(tiny_config)
        record = run_tracker(model, never_switch_sequence, interval=10,
                             policy=UpdatePolicy.from_variant("mv"))
        assert record.applied_updates == 0

    def test_tv_periodic_counter_trace(self, tiny_config):
        spec = SynthSpec(num_frames=201, image_size=96, seed=41, name="tv200")
        seq = generate_sequence(spec)  # 200 processed frames after init
        model = constant_model(tiny_config)
        record = run_tracker(model, seq, interval=50,
                             policy=UpdatePolicy.from_variant("tv"))
        applied = [d for d in record.decisions if d.applied]
        assert [d.frame_index for d in applied] == [50, 100, 150, 200]
        assert record.applied_updates == 4

    def test_interval_monotone_applied_counts(self, tiny_config, never_switch_sequence):
        model = constant_model(tiny_config)
        counts = []
        for k in (5, 10, 20, 59):
            record = run_tracker(model, never_switch_sequence, interval=k)
            counts.append(record.applied_updates)
        assert counts == sorted(counts, reverse=True)
        assert counts[0] > counts[-1]

    def test_report_from_tracking(self, tiny_config, never_switch_sequence):
        model = constant_model(tiny_config)
        report = run_benchmark(model, [never_switch_sequence], variant="full",
                               interval=20)
        assert 0 <= report.sr <= 1 and 0 <= report.pr <= 1
        assert report.fps > 0
        assert report.applied_updates >= 1
        assert set(report.per_sequence) == {"steady"}

    def test_variant_ablation_has_four_rows(self, tiny_config, never_switch_sequence,
                                            tmp_path):
        model = constant_model(tiny_config)
        reports = run_variant_ablation(model, [never_switch_sequence], interval=25)
        assert set(reports) == {"full", "os", "tv", "mv"}
        write_summary_csv(tmp_path / "variants.csv",
                          [reports[v] for v in ("full", "os", "tv", "mv")])
        lines = (tmp_path / "variants.csv").read_text().splitlines()
        assert len(lines) == 5  # header + 4 rows

    def test_interval_ablation_rows(self, tiny_config, never_switch_sequence):
        model = constant_model(tiny_config)
        reports = run_interval_ablation(model, [never_switch_sequence],
                                        intervals=(10, 30))
        assert [r.interval for r in reports] == [10, 30]
        assert reports[0].applied_updates >= reports[1].applied_updates

    def test_save_report_files(self, tiny_config, never_switch_sequence, tmp_path):
        model = constant_model(tiny_config)
        report = run_benchmark(model, [never_switch_sequence], interval=30)
        save_report(report, tmp_path)
        assert (tmp_path / "report.txt").is_file()
        assert (tmp_path / "report.csv").is_file()
        text = (tmp_path / "report_attributes.csv").read_text()
        assert "ALL" in text


class TestExclusionFlag:
    def test_invisible_frames_flag(self):
        gts = [BoundingBox(50, 50, 10, 10) for _ in range(4)]
        seq = simple_sequence(gts, visible=[True, True, False, False])
        # miss exactly on the two invisible frames
        preds = [gts[0], gts[1], gts[2].translated(100, 0), gts[3].translated(100, 0)]
        rec = record_for(seq, preds)
        assert sr_score([rec], [seq]).representative == pytest.approx(0.5)
        assert sr_score([rec], [seq],
                        exclude_invisible=True).representative == pytest.approx(1.0)
