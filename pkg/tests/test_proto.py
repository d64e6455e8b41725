import numpy as np
import pytest

from prototrack.core import BoundingBox, ModalityLabel
from prototrack.proto import (CropConfig, PrototypeState, UpdatePolicy, UpdateTrigger,
                              apply_update, decide_update, extract_sample, init_prototype,
                              load_decision_log, process_event, record_decision,
                              save_decision_log, tick)

from conftest import make_frame
from oracles import replay_reference

RGB, NIR = ModalityLabel.RGB, ModalityLabel.NIR
CROP = CropConfig(context_factor=2.0, out_size=32)


def fresh_state(category=RGB, interval=50, policy=UpdatePolicy(), since=0):
    return PrototypeState(last_category=category, frames_since_update=since,
                          update_interval=interval, policy=policy)


def make_sample(frame, category=None):
    return extract_sample(frame, frame.gt_box, CROP, category=category)


class TestInit:
    def test_rgb_first_frame(self):
        frame = make_frame(0, modality=RGB)
        proto, state = init_prototype(frame, frame.gt_box, CROP)
        assert state.last_category is RGB
        assert state.frames_since_update == 0
        assert np.array_equal(proto.fixed.image, proto.dynamic_rgb.image)
        assert np.array_equal(proto.fixed.image, proto.dynamic_nir.image)
        assert not proto.fixed.inherited
        assert proto.dynamic_rgb.inherited and proto.dynamic_nir.inherited

    def test_nir_first_frame(self):
        frame = make_frame(0, modality=NIR)
        _, state = init_prototype(frame, frame.gt_box, CROP)
        assert state.last_category is NIR

    def test_degenerate_init_box(self):
        frame = make_frame(0)
        with pytest.raises(ValueError, match="degenerate"):
            init_prototype(frame, BoundingBox(4, 4, 0, 8), CROP)

    def test_box_center_outside_image(self):
        frame = make_frame(0, size=32)
        with pytest.raises(ValueError, match="outside"):
            init_prototype(frame, BoundingBox(100, 100, 8, 8), CROP)


class TestDecide:
    def test_switch_trigger_applied(self):
        d = decide_update(fresh_state(RGB, since=3), NIR, 0.8)
        assert d.trigger is UpdateTrigger.MODALITY_SWITCH and d.applied

    def test_switch_trigger_gated(self):
        d = decide_update(fresh_state(RGB), NIR, 0.3)
        assert d.trigger is UpdateTrigger.MODALITY_SWITCH and not d.applied

    def test_periodic_trigger(self):
        d = decide_update(fresh_state(RGB, since=50), RGB, 0.9)
        assert d.trigger is UpdateTrigger.PERIODIC and d.applied

    def test_below_interval(self):
        d = decide_update(fresh_state(RGB, since=49), RGB, 0.9)
        assert d.trigger is UpdateTrigger.NONE and not d.applied

    def test_gate_is_inclusive_at_half(self):
        d = decide_update(fresh_state(RGB), NIR, 0.5)
        assert d.applied

    def test_pure_no_state_mutation(self):
        state = fresh_state(RGB, since=7)
        decide_update(state, NIR, 1.0)
        assert state.frames_since_update == 7
        assert state.last_category is RGB
        assert state.decision_log == []

    def test_reliability_domain(self):
        with pytest.raises(ValueError):
            decide_update(fresh_state(), RGB, 1.5)


class TestApply:
    def _init(self, modality=RGB):
        frame = make_frame(0, modality=modality)
        return frame, *init_prototype(frame, frame.gt_box, CROP)

    def test_switch_to_nir_updates_only_nir_slot(self):
        frame, proto, state = self._init(RGB)
        nir_frame = make_frame(5, modality=NIR, fill=0.9)
        decision = decide_update(state, NIR, 0.8, frame_index=5)
        proto2, state2 = apply_update(proto, state, decision, make_sample(nir_frame))
        assert proto2.dynamic_rgb is proto.dynamic_rgb  # untouched slot
        assert not np.array_equal(proto2.dynamic_nir.image, proto.dynamic_nir.image)
        assert proto2.fixed is proto.fixed
        assert state2.last_category is NIR
        assert state2.frames_since_update == 0
        assert state2.decision_log[-1] is decision

    def test_two_periodic_rgb_updates_leave_nir_alone(self):
        frame, proto, state = self._init(RGB)
        original_nir = proto.dynamic_nir
        for idx in (60, 120):
            state = fresh_state(RGB, since=60)
            state.decision_log.extend([])
            decision = decide_update(state, RGB, 0.9, frame_index=idx)
            sample = make_sample(make_frame(idx, modality=RGB, fill=idx / 200))
            proto, state = apply_update(proto, state, decision, sample)
        assert proto.dynamic_nir is original_nir

    def test_single_slot_mode_mirrors_both(self):
        frame = make_frame(0, modality=RGB)
        proto, state = init_prototype(frame, frame.gt_box, CROP,
                                      policy=UpdatePolicy(single_slot=True))
        decision = decide_update(state, NIR, 0.9, frame_index=3)
        sample = make_sample(make_frame(3, modality=NIR, fill=0.8))
        proto2, _ = apply_update(proto, state, decision, sample)
        assert proto2.dynamic_rgb is sample and proto2.dynamic_nir is sample

    def test_unapplied_decision_rejected(self):
        frame, proto, state = self._init()
        decision = decide_update(state, RGB, 0.9)  # NONE trigger
        with pytest.raises(ValueError, match="unapplied"):
            apply_update(proto, state, decision, make_sample(frame))

    def test_modality_mismatch_rejected(self):
        frame, proto, state = self._init(RGB)
        decision = decide_update(state, NIR, 0.9)
        wrong = make_sample(make_frame(1, modality=NIR), category=RGB)
        with pytest.raises(ValueError, match="does not match"):
            apply_update(proto, state, decision, wrong)

    def test_fixed_sample_immutable_over_events(self):
        frame, proto, state = self._init(RGB)
        state = tick(state)
        fixed_bytes = proto.fixed.image.tobytes()
        rng = np.random.default_rng(3)
        for i in range(1, 300):
            category = RGB if rng.random() < 0.5 else NIR
            sample_fn = lambda d: make_sample(
                make_frame(i, modality=d.predicted_category, fill=float(rng.random())),
                category=d.predicted_category)
            proto, state, _ = process_event(proto, state, category,
                                            float(rng.random()), i, sample_fn)
        assert proto.fixed.image.tobytes() == fixed_bytes


class TestTick:
    def test_increments(self):
        assert tick(fresh_state(since=0)).frames_since_update == 1
        assert tick(fresh_state(since=49)).frames_since_update == 50

    def test_reset_then_increment(self):
        frame = make_frame(0)
        proto, state = init_prototype(frame, frame.gt_box, CROP)
        state = tick(state)
        decision = decide_update(fresh_state(RGB, since=50), RGB, 1.0, frame_index=1)
        _, state = apply_update(proto, state, decision, make_sample(frame))
        assert state.frames_since_update == 0
        assert tick(state).frames_since_update == 1


class TestExtract:
    def test_no_padding_when_inside(self):
        rng = np.random.default_rng(0)
        image = rng.random((64, 64, 3)).astype(np.float32)
        frame = make_frame(0)
        frame.image = image
        box = BoundingBox.from_center(32, 32, 16, 16)
        sample = extract_sample(frame, box, CropConfig(2.0, 32))
        # side = 2 * sqrt(16*16) = 32, centered: crop is image[16:48, 16:48]
        assert np.allclose(sample.image, image[16:48, 16:48], atol=1e-6)

    def test_corner_padding_uses_image_mean(self):
        rng = np.random.default_rng(1)
        image = rng.random((64, 64, 3)).astype(np.float32)
        frame = make_frame(0)
        frame.image = image
        box = BoundingBox.from_center(2, 2, 16, 16)
        sample = extract_sample(frame, box, CropConfig(2.0, 32))
        assert sample.image[0, 0] == pytest.approx(image.mean(), abs=1e-6)

    def test_output_shape_contract(self):
        frame = make_frame(0, size=100)
        for out_size in (16, 128):
            sample = extract_sample(frame, frame.gt_box, CropConfig(2.0, out_size))
            assert sample.image.shape == (out_size, out_size, 3)

    def test_center_outside_errors(self):
        frame = make_frame(0, size=32)
        with pytest.raises(ValueError, match="outside"):
            extract_sample(frame, BoundingBox(40, 40, 8, 8), CropConfig(2.0, 16))


def run_engine(initial_category, interval, events, policy=UpdatePolicy()):
    """Event-only replay through the real engine."""
    state = PrototypeState(last_category=initial_category, update_interval=interval,
                           policy=policy)
    state = tick(state)  # frame 0 (initialization) counts as processed
    proto = None
    for i, (category, reliability) in enumerate(events, start=1):
        proto, state, _ = process_event(proto, state, category, reliability, i,
                                        sample_fn=None)
    return [(d.frame_index, int(d.predicted_category), d.reliability,
             d.trigger.value, d.applied) for d in state.decision_log]


class TestReplayEquivalence:
    def test_matches_reference_on_random_traces(self):
        rng = np.random.default_rng(123)
        for trial in range(20):
            interval = int(rng.integers(1, 60))
            start = RGB if rng.random() < 0.5 else NIR
            events = [(RGB if rng.random() < 0.5 else NIR,
                       float(np.round(rng.random(), 3)))
                      for _ in range(500)]
            got = run_engine(start, interval, events)
            want = replay_reference(int(start), interval,
                                    [(int(c), e) for c, e in events])
            assert got == want

    def test_variant_policies_match_reference(self):
        rng = np.random.default_rng(7)
        for allow_switch, allow_periodic in ((False, True), (True, False)):
            policy = UpdatePolicy(allow_switch=allow_switch,
                                  allow_periodic=allow_periodic)
            events = [(RGB if rng.random() < 0.5 else NIR, float(rng.random()))
                      for _ in range(400)]
            got = run_engine(RGB, 20, events, policy)
            want = replay_reference(int(RGB), 20, [(int(c), e) for c, e in events],
                                    allow_switch=allow_switch,
                                    allow_periodic=allow_periodic)
            assert got == want

    def test_gate_soundness(self):
        rng = np.random.default_rng(5)
        events = [(RGB if rng.random() < 0.5 else NIR, float(rng.random()))
                  for _ in range(2000)]
        log = run_engine(RGB, 10, events)
        assert all(not applied or reliability >= 0.5
                   for _, _, reliability, _, applied in log)
        assert all(trigger != "NONE" or not applied
                   for *_, trigger, applied in log)

    def test_liveness_alternating(self):
        events = [(NIR if i % 2 == 0 else RGB, 1.0) for i in range(100)]
        log = run_engine(RGB, 50, events)
        assert all(applied for *_, applied in log)
        assert all(trigger == "MODALITY_SWITCH" for *_, trigger, applied in log)

    def test_liveness_constant_category(self):
        for interval in (1, 3, 50):
            events = [(RGB, 1.0) for _ in range(200)]
            log = run_engine(RGB, interval, events)
            applied_at = [f for f, *_, applied in log if applied]
            assert applied_at == list(range(interval, 201, interval))

    def test_unreliable_frames_never_update(self):
        events = [(NIR, 0.49) for _ in range(120)]
        log = run_engine(RGB, 50, events)
        assert not any(applied for *_, applied in log)
        # the switch keeps being requested because S never moved
        assert all(trigger == "MODALITY_SWITCH" for *_, trigger, _ in log)


class TestDecisionLogIO:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(11)
        state = PrototypeState(last_category=RGB, update_interval=5)
        state = tick(state)
        proto = None
        for i in range(1, 40):
            proto, state, _ = process_event(
                proto, state, RGB if rng.random() < 0.5 else NIR,
                float(rng.random()), i, sample_fn=None)
        path = tmp_path / "decisions.txt"
        save_decision_log(path, state.decision_log)
        loaded = load_decision_log(path)
        assert loaded == list(state.decision_log)

    def test_malformed_line_reports_position(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("1,RGB,0.5,NONE,0\n2,RGB,xx,NONE,0\n")
        with pytest.raises(ValueError, match="line 2"):
            load_decision_log(path)

    def test_record_decision_rejects_applied(self):
        state = fresh_state()
        d = decide_update(fresh_state(RGB, since=60), RGB, 0.9, frame_index=1)
        with pytest.raises(ValueError):
            record_decision(state, d)
