"""Synthetic cross-modal sequence generation and dataset-directory I/O.

Generated worlds are desk-scale stand-ins for a real RGB/NIR surveillance
benchmark: a textured target (optionally shadowed by a similar distractor)
moves over a textured background while the imaging modality flips at scheduled
frames. Everything is deterministic in the spec's seed, down to the stored
8-bit pixels.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import cv2
import numpy as np

from .core import (BoundingBox, Encoding, Frame, ModalityLabel, Sequence,
                   format_box_line, parse_box_line)


@enum.unique
class AttributeTag(str, enum.Enum):
    """The 11 challenge attributes sequences can carry."""

    SV = "SV"    # scale variation
    BC = "BC"    # background clutter
    ARC = "ARC"  # aspect ratio change
    SO = "SO"    # similar object
    FM = "FM"    # fast motion
    IPR = "IPR"  # in-plane rotation
    OV = "OV"    # out of view
    PO = "PO"    # partial occlusion
    MA = "MA"    # modality adaptation
    FO = "FO"    # full occlusion
    MB = "MB"    # motion blur

    @staticmethod
    def names() -> list[str]:
        return [t.value for t in AttributeTag]


@dataclass(frozen=True)
class OcclusionEvent:
    start: int
    length: int

    @property
    def stop(self) -> int:
        return self.start + self.length


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for one synthetic sequence."""

    num_frames: int = 120
    image_size: int = 96
    target_shape: str = "ellipse"  # or "rect"
    target_size: tuple[float, float] = (18.0, 14.0)
    nir_inverted: bool = True  # night-mode look: bright and dark swap under NIR
    texture_seed: int = 0
    velocity: tuple[float, float] = (1.2, 0.8)
    jitter: float = 0.0            # per-frame uniform wobble added to the center
    switch_indices: tuple[int, ...] = ()
    start_modality: ModalityLabel = ModalityLabel.RGB
    occlusions: tuple[OcclusionEvent, ...] = ()
    attributes: tuple[str, ...] = ()  # extra sequence-level tags to inject
    seed: int = 0
    name: str = "synth"
    # appearance dynamics: hue phase drift, stripe-direction rotation (radians
    # per frame), and slow size oscillation
    hue_drift: float = 0.0
    texture_rotation: float = 0.0
    size_period: int = 0           # 0 disables the oscillation
    size_amplitude: float = 0.0
    distractor: bool = False
    distractor_hue_offset: float = 0.18
    distractor_orbit: float = 1.25  # orbit radius as a multiple of the target size
    ma_window: int = 3             # frames after a switch tagged MA and overexposed
    ma_flash: float = 0.5          # peak overexposure right after a switch
    nir_noise: float = 0.015

    def validate(self) -> list[str]:
        problems = []
        if self.num_frames < 1:
            problems.append("num_frames must be >= 1")
        if self.image_size < 16:
            problems.append("image_size must be >= 16")
        if self.target_shape not in ("ellipse", "rect"):
            problems.append(f"unknown target_shape {self.target_shape!r}")
        if min(self.target_size) <= 1:
            problems.append("target_size sides must exceed 1 pixel")
        if max(self.target_size) >= self.image_size / 2:
            problems.append("target must fit inside half the image")
        if list(self.switch_indices) != sorted(set(self.switch_indices)):
            problems.append("switch_indices must be strictly increasing")
        if any(i <= 0 or i >= self.num_frames for i in self.switch_indices):
            problems.append("switch_indices must lie in (0, num_frames)")
        if any(o.length < 1 or o.start < 1 for o in self.occlusions):
            problems.append("occlusions need start >= 1 and length >= 1")
        spans = sorted((o.start, o.stop) for o in self.occlusions)
        if any(a2 > b1 for (_, a2), (b1, _) in zip(spans, spans[1:])):
            problems.append("occlusions must not overlap")
        if any(o.stop > self.num_frames for o in self.occlusions):
            problems.append("occlusions must end within the sequence")
        bad = [t for t in self.attributes if t not in AttributeTag.names()]
        if bad:
            problems.append(f"unknown attribute tags {bad}")
        if self.size_period < 0 or not 0 <= self.size_amplitude < 0.9:
            problems.append("size oscillation out of range")
        if self.jitter < 0 or self.nir_noise < 0 or self.ma_window < 0:
            problems.append("jitter, nir_noise and ma_window must be non-negative")
        return problems

    def checked(self) -> "SynthSpec":
        problems = self.validate()
        if problems:
            raise ValueError("invalid synth spec: " + "; ".join(problems))
        return self


def _palette(phase: float) -> np.ndarray:
    """Smooth cyclic palette: phase in [0, 1) -> saturated RGB color."""
    offsets = np.array([0.0, 1.0 / 3.0, 2.0 / 3.0])
    return 0.52 + 0.45 * np.cos(2 * np.pi * (phase + offsets))


def _value_noise(rng: np.random.Generator, size: int, cells: int, channels: int) -> np.ndarray:
    coarse = rng.random((cells, cells, channels)).astype(np.float32)
    return cv2.resize(coarse, (size, size), interpolation=cv2.INTER_LINEAR).reshape(
        size, size, channels)


def _object_mask(shape: str, xs: np.ndarray, ys: np.ndarray,
                 cx: float, cy: float, rx: float, ry: float) -> np.ndarray:
    if shape == "ellipse":
        return ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0
    return (np.abs(xs - cx) <= rx) & (np.abs(ys - cy) <= ry)


def _stripe_texture(xs: np.ndarray, ys: np.ndarray, cx: float, cy: float,
                    freq: tuple[float, float], phase: float) -> np.ndarray:
    wave = np.sin(2 * np.pi * ((xs - cx) * freq[0] + (ys - cy) * freq[1]) + phase)
    return (0.5 + 0.5 * wave).astype(np.float32)


@dataclass
class _Trajectory:
    centers: np.ndarray  # (N, 2)
    radii: np.ndarray    # (N, 2) half-sizes


def _simulate_motion(spec: SynthSpec, rng: np.random.Generator,
                     start: tuple[float, float], velocity: tuple[float, float],
                     ) -> _Trajectory:
    """Constant velocity plus jitter, reflecting off walls; radii follow the
    configured slow oscillation (x and y in anti-phase, so aspect ratio changes)."""
    size = spec.image_size
    rx0, ry0 = spec.target_size[0] / 2.0, spec.target_size[1] / 2.0
    centers = np.empty((spec.num_frames, 2), dtype=np.float64)
    radii = np.empty((spec.num_frames, 2), dtype=np.float64)
    cx, cy = start
    vx, vy = velocity
    for t in range(spec.num_frames):
        if spec.size_period:
            s = np.sin(2 * np.pi * t / spec.size_period)
            rx = rx0 * (1 + spec.size_amplitude * s)
            ry = ry0 * (1 - spec.size_amplitude * s)
        else:
            rx, ry = rx0, ry0
        margin_x, margin_y = rx + 1.5, ry + 1.5
        centers[t] = (cx, cy)
        radii[t] = (rx, ry)
        jx = rng.uniform(-spec.jitter, spec.jitter) if spec.jitter else 0.0
        jy = rng.uniform(-spec.jitter, spec.jitter) if spec.jitter else 0.0
        cx, cy = cx + vx + jx, cy + vy + jy
        if cx < margin_x:
            cx, vx = 2 * margin_x - cx, -vx
        if cx > size - margin_x:
            cx, vx = 2 * (size - margin_x) - cx, -vx
        if cy < margin_y:
            cy, vy = 2 * margin_y - cy, -vy
        if cy > size - margin_y:
            cy, vy = 2 * (size - margin_y) - cy, -vy
    return _Trajectory(centers=centers, radii=radii)


def _modality_for_frame(spec: SynthSpec, index: int) -> ModalityLabel:
    flips = sum(1 for s in spec.switch_indices if index >= s)
    return spec.start_modality if flips % 2 == 0 else spec.start_modality.flipped()


def render_modality(base_frame: np.ndarray, modality: ModalityLabel,
                    rng: np.random.Generator | None = None,
                    noise: float = 0.015, inverted: bool = True) -> np.ndarray:
    """Map a colored base rendering to the requested modality.

    RGB passes through. NIR projects to luminance, replicates it across the
    three channels, remaps the global intensity (by default inverting it, the
    night-mode look where reflective surfaces flip) and, when an rng is
    supplied, adds independent per-channel sensor noise. Geometry is untouched,
    so boxes transfer between renderings unchanged.
    """
    if modality is ModalityLabel.RGB:
        return base_frame.astype(np.float32).copy()
    lum = (0.299 * base_frame[..., 0] + 0.587 * base_frame[..., 1]
           + 0.114 * base_frame[..., 2])
    lum = np.power(np.clip(lum, 0.0, 1.0), 0.8)
    remapped = 0.93 - 0.78 * lum if inverted else 0.08 + 0.88 * lum
    image = np.repeat(remapped[..., None], 3, axis=2).astype(np.float32)
    if rng is not None and noise > 0:
        image = image + rng.normal(0.0, noise, image.shape).astype(np.float32)
    return np.clip(image, 0.0, 1.0)


def _quantize(image: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid the on-disk format stores, keeping round trips exact."""
    return (np.rint(np.clip(image, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def generate_sequence(spec: SynthSpec) -> Sequence:
    """Render one synthetic sequence; byte-identical for identical specs."""
    spec = spec.checked()
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, spec.texture_seed]))
    size = spec.image_size
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float32)
    ys += 0.5
    xs += 0.5

    background = 0.25 + 0.3 * _value_noise(rng, size, cells=6, channels=3)

    # per-sequence appearances: stripe spatial frequency and starting direction
    # are random, and the two objects' directions are kept at least 50 degrees
    # apart so a matching template is the only reliable identity cue
    target_f = 1.0 / float(rng.uniform(4.5, 8.0))
    distractor_f = 1.0 / float(rng.uniform(4.5, 8.0))
    target_dir = float(rng.uniform(0.0, np.pi))
    distractor_dir = target_dir + float(rng.uniform(np.deg2rad(50), np.deg2rad(130)))
    target_phase = float(rng.uniform(0.0, 2.0 * np.pi))
    distractor_phase = float(rng.uniform(0.0, 2.0 * np.pi))
    base_hue = rng.uniform(0.0, 1.0)
    hue_gap = spec.distractor_hue_offset * (1.0 if rng.random() < 0.5 else -1.0)

    def _freq(f, direction, t):
        angle = direction + spec.texture_rotation * t
        return (f * float(np.cos(angle)), f * float(np.sin(angle)))

    margin = max(spec.target_size) / 2 + 2
    start = (rng.uniform(margin, size - margin), rng.uniform(margin, size - margin))
    motion_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1]))
    target = _simulate_motion(spec, motion_rng, start, spec.velocity)
    distractor = None
    if spec.distractor:
        # the distractor orbits the target so both usually share the search region
        # and only appearance can tell them apart
        d_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 2]))
        theta0 = d_rng.uniform(0.0, 2.0 * np.pi)
        t_idx = np.arange(spec.num_frames)
        theta = theta0 + 2.0 * np.pi * t_idx / 83.0
        radius = (spec.distractor_orbit * max(spec.target_size)
                  * (1.0 + 0.25 * np.sin(2.0 * np.pi * t_idx / 97.0)))
        centers = target.centers + np.stack(
            [radius * np.cos(theta), radius * np.sin(theta)], axis=1)
        centers = np.clip(centers, margin, size - margin)
        distractor = _Trajectory(centers=centers, radii=target.radii.copy())

    occluded = np.zeros(spec.num_frames, dtype=bool)
    for event in spec.occlusions:
        occluded[event.start:event.stop] = True

    noise_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 3]))
    frames: list[Frame] = []
    for t in range(spec.num_frames):
        modality = _modality_for_frame(spec, t)
        hue = (base_hue + spec.hue_drift * t) % 1.0
        image = background.copy()

        if distractor is not None and not occluded[t]:
            dcx, dcy = distractor.centers[t]
            drx, dry = distractor.radii[t]
            dmask = _object_mask(spec.target_shape, xs, ys, dcx, dcy, drx, dry)
            dtex = _stripe_texture(xs, ys, dcx, dcy,
                                   _freq(distractor_f, distractor_dir, t),
                                   phase=distractor_phase)
            dcolor = _palette((hue + hue_gap) % 1.0)
            image[dmask] = (dcolor[None, :] * (0.35 + 0.65 * dtex[dmask, None]))

        cx, cy = target.centers[t]
        rx, ry = target.radii[t]
        if not occluded[t]:
            mask = _object_mask(spec.target_shape, xs, ys, cx, cy, rx, ry)
            tex = _stripe_texture(xs, ys, cx, cy, _freq(target_f, target_dir, t),
                                  phase=target_phase)
            color = _palette(hue)
            image[mask] = (color[None, :] * (0.35 + 0.65 * tex[mask, None]))

        attributes: set[str] = set()
        noise = spec.nir_noise
        fade = 0.0
        for s in spec.switch_indices:
            if s <= t < s + spec.ma_window:
                attributes.add(AttributeTag.MA.value)
                fade = 1.0 - (t - s) / max(spec.ma_window, 1)
                noise = spec.nir_noise * (1.0 + 1.5 * fade)
        if occluded[t]:
            attributes.add(AttributeTag.FO.value)

        rendered = render_modality(image, modality, rng=noise_rng, noise=noise,
                                   inverted=spec.nir_inverted)
        if fade > 0.0:
            # imaging adaptation: a decaying sensor-domain overexposure after the
            # switch; RGB keeps a warm tint so channel statistics stay modal
            if modality is ModalityLabel.RGB:
                flash = spec.ma_flash * fade * np.array([1.0, 0.88, 0.72],
                                                        dtype=np.float32)
            else:
                flash = np.float32(spec.ma_flash * fade * 0.8667)
            rendered = np.clip(rendered + flash, 0.0, 1.0)
        gt = BoundingBox(cx - rx, cy - ry, 2 * rx, 2 * ry, Encoding.PIXEL)
        frames.append(Frame(
            image=_quantize(rendered),
            modality=modality,
            index=t,
            gt_box=gt,
            visible=not occluded[t],
            attributes=attributes,
        ))

    seq_tags = set(spec.attributes)
    if spec.switch_indices:
        seq_tags.add(AttributeTag.MA.value)
    if spec.occlusions:
        seq_tags.add(AttributeTag.FO.value)
    if spec.distractor:
        seq_tags.add(AttributeTag.SO.value)
    if spec.size_period and spec.size_amplitude > 0:
        seq_tags.add(AttributeTag.SV.value)
        seq_tags.add(AttributeTag.ARC.value)
    if spec.texture_rotation:
        seq_tags.add(AttributeTag.IPR.value)
    frames[0].attributes |= seq_tags
    return Sequence(frames=frames, name=spec.name)


def _to_uint8_bgr(image: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)[..., ::-1]


def write_sequence(sequence: Sequence, root: str | Path) -> Path:
    """Store a sequence in the on-disk layout:
    <name>/img/%06d.png, groundtruth.txt, modality.txt, visible.txt, attributes.txt."""
    seq_dir = Path(root) / sequence.name
    img_dir = seq_dir / "img"
    img_dir.mkdir(parents=True, exist_ok=True)
    gt_lines, modality_lines, visible_lines = [], [], []
    for i, frame in enumerate(sequence.frames):
        ok = cv2.imwrite(str(img_dir / f"{i:06d}.png"), _to_uint8_bgr(frame.image))
        if not ok:
            raise IOError(f"failed to write frame {i} of {sequence.name}")
        if frame.gt_box is None:
            raise ValueError(f"frame {i} of {sequence.name} has no gt box to store")
        gt_lines.append(format_box_line(frame.gt_box) + "\n")
        modality_lines.append(frame.modality.name + "\n")
        visible_lines.append(f"{int(frame.visible)}\n")
    (seq_dir / "groundtruth.txt").write_text("".join(gt_lines), encoding="utf-8")
    (seq_dir / "modality.txt").write_text("".join(modality_lines), encoding="utf-8")
    (seq_dir / "visible.txt").write_text("".join(visible_lines), encoding="utf-8")
    tags = sorted(sequence.attributes)
    (seq_dir / "attributes.txt").write_text(",".join(tags) + "\n", encoding="utf-8")
    return seq_dir


def load_cmotb_sequence(directory: str | Path) -> Sequence:
    """Load one sequence from the on-disk layout, validating every per-frame file."""
    seq_dir = Path(directory)
    img_dir = seq_dir / "img"
    if not img_dir.is_dir():
        raise ValueError(f"{seq_dir}: missing img/ directory")
    image_paths = sorted(img_dir.glob("*.png"))
    if not image_paths:
        raise ValueError(f"{seq_dir}: no frames in img/")

    gt_path = seq_dir / "groundtruth.txt"
    if not gt_path.is_file():
        raise ValueError(f"{seq_dir}: missing groundtruth.txt")
    gt_lines = [l for l in gt_path.read_text(encoding="utf-8").splitlines() if l.strip()]
    if len(gt_lines) != len(image_paths):
        raise ValueError(f"{seq_dir}: groundtruth.txt has {len(gt_lines)} lines "
                         f"but img/ holds {len(image_paths)} frames")

    modality_path = seq_dir / "modality.txt"
    if not modality_path.is_file():
        raise ValueError(f"{seq_dir}: missing modality.txt (per-frame labels are required)")
    modality_lines = [l for l in modality_path.read_text(encoding="utf-8").splitlines()
                      if l.strip()]
    if len(modality_lines) != len(image_paths):
        raise ValueError(f"{seq_dir}: modality.txt has {len(modality_lines)} lines "
                         f"but img/ holds {len(image_paths)} frames")

    visible_path = seq_dir / "visible.txt"
    if visible_path.is_file():
        visible_lines = [l for l in visible_path.read_text(encoding="utf-8").splitlines()
                         if l.strip()]
        if len(visible_lines) != len(image_paths):
            raise ValueError(f"{seq_dir}: visible.txt has {len(visible_lines)} lines "
                             f"but img/ holds {len(image_paths)} frames")
        try:
            visible = [bool(int(l.strip())) for l in visible_lines]
        except ValueError:
            raise ValueError(f"{seq_dir}: visible.txt must hold 0/1 per line") from None
    else:
        visible = [True] * len(image_paths)

    tags: set[str] = set()
    attr_path = seq_dir / "attributes.txt"
    if attr_path.is_file():
        text = attr_path.read_text(encoding="utf-8").strip()
        if text:
            tags = {t.strip() for t in text.split(",") if t.strip()}
            bad = sorted(t for t in tags if t not in AttributeTag.names())
            if bad:
                raise ValueError(f"{seq_dir}: unknown attribute tags {bad}")

    frames = []
    for i, img_path in enumerate(image_paths):
        bgr = cv2.imread(str(img_path), cv2.IMREAD_COLOR)
        if bgr is None:
            raise ValueError(f"{seq_dir}: unreadable image {img_path.name}")
        image = (bgr[..., ::-1].astype(np.float32) / 255.0)
        frames.append(Frame(
            image=image,
            modality=ModalityLabel.parse(modality_lines[i]),
            index=i,
            gt_box=parse_box_line(gt_lines[i], lineno=i + 1),
            visible=visible[i],
            attributes=set(),
        ))
    frames[0].attributes |= tags
    return Sequence(frames=frames, name=seq_dir.name)


def load_dataset(root: str | Path) -> list[Sequence]:
    """Load every sequence directory under root (sorted by name)."""
    root = Path(root)
    seq_dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "img").is_dir())
    if not seq_dirs:
        raise ValueError(f"no sequence directories under {root}")
    return [load_cmotb_sequence(p) for p in seq_dirs]


def write_manifest(root: str | Path, sequences: list[Sequence],
                   specs: list[SynthSpec] | None = None) -> Path:
    entries = []
    for i, seq in enumerate(sequences):
        entry = {
            "name": seq.name,
            "num_frames": len(seq),
            "attributes": sorted(seq.attributes),
            "modality_switches": seq.modality_schedule,
        }
        if specs is not None:
            entry["spec"] = _spec_to_jsonable(specs[i])
        entries.append(entry)
    path = Path(root) / "manifest.json"
    path.write_text(json.dumps({"sequences": entries}, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return path


def _spec_to_jsonable(spec: SynthSpec) -> dict:
    raw = asdict(spec)
    raw["start_modality"] = spec.start_modality.name
    raw["occlusions"] = [[o.start, o.length] for o in spec.occlusions]
    return raw


def synth_spec_from_dict(data: dict, where: str = "synth spec") -> SynthSpec:
    """Build a spec from plain config values, rejecting unknown keys."""
    import dataclasses
    allowed = {f.name for f in dataclasses.fields(SynthSpec)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ValueError(f"{where}: unknown keys {unknown}")
    coerced = dict(data)
    if "start_modality" in coerced and isinstance(coerced["start_modality"], str):
        coerced["start_modality"] = ModalityLabel.parse(coerced["start_modality"])
    if "occlusions" in coerced:
        coerced["occlusions"] = tuple(
            o if isinstance(o, OcclusionEvent) else OcclusionEvent(int(o[0]), int(o[1]))
            for o in coerced["occlusions"])
    for key in ("target_size", "velocity", "switch_indices", "attributes"):
        if key in coerced and isinstance(coerced[key], list):
            coerced[key] = tuple(coerced[key])
    return SynthSpec(**coerced).checked()


def make_benchmark_specs(count: int, seed: int, base: dict | None = None,
                         dwell: tuple[int, int] = (35, 70),
                         occlusion_rate: float = 0.5,
                         switch_washout: int = 3,
                         name_prefix: str = "seq") -> list[SynthSpec]:
    """Derive a family of per-sequence specs: randomized motion, a switch
    schedule drawn from the dwell range, a short washout occlusion at each
    switch (the imaging adaptation blinds the sensor for a few frames), and
    occasional mid-dwell occlusions, all deterministic in the seed."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if not 1 <= dwell[0] <= dwell[1]:
        raise ValueError("dwell range must satisfy 1 <= lo <= hi")
    specs = []
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 7000 + i]))
        kwargs = dict(base or {})
        num_frames = int(kwargs.get("num_frames", 120))
        switches: list[int] = []
        t = int(rng.integers(dwell[0], dwell[1] + 1))
        while t < num_frames - 5:
            switches.append(t)
            t += int(rng.integers(dwell[0], dwell[1] + 1))
        speed = float(rng.uniform(0.7, 1.5))
        angle = float(rng.uniform(0.0, 2.0 * np.pi))
        events: list[OcclusionEvent] = []
        if switch_washout > 0:
            events += [OcclusionEvent(s, switch_washout) for s in switches
                       if s + switch_washout < num_frames]
        if occlusion_rate > 0 and rng.random() < occlusion_rate and num_frames > 40:
            start = int(rng.integers(num_frames // 3, num_frames - 20))
            candidate = OcclusionEvent(start, int(rng.integers(5, 11)))
            if all(candidate.stop <= e.start or e.stop <= candidate.start
                   for e in events):
                events.append(candidate)
        occlusions = tuple(sorted(events, key=lambda e: e.start))
        kwargs.setdefault("image_size", 96)
        kwargs.setdefault("target_shape", "ellipse" if i % 2 == 0 else "rect")
        kwargs.update(
            num_frames=num_frames,
            velocity=(speed * float(np.cos(angle)), speed * float(np.sin(angle))),
            switch_indices=tuple(switches),
            occlusions=occlusions,
            start_modality=ModalityLabel.RGB if i % 3 else ModalityLabel.NIR,
            texture_seed=i,
            seed=seed * 100003 + i,
            name=f"{name_prefix}{i:03d}",
        )
        specs.append(synth_spec_from_dict(kwargs, where=f"sequence {i}"))
    return specs
