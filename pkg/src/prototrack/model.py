"""One-stream tracking network: shared patch embedding for search and prototype
crops, joint transformer encoding, a corner-map box head, and two sigmoid MLP
heads scoring tracking reliability and frame modality."""

from __future__ import annotations

import io
import zipfile
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence as SequenceT

import numpy as np
import torch
import torch.nn as nn
import yaml

from .core import BoundingBox, Encoding, Frame, ModalityLabel
from .proto import (CropConfig, MultiModalPrototype, PrototypeState, UpdateDecision,
                    crop_square, extract_sample, process_event)

SEGMENTS = ("search", "fixed", "dyn_rgb", "dyn_nir")


class NonFiniteError(ValueError):
    """Non-finite values reached the encoder (bad input or diverged weights)."""


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 16
    embed_dim: int = 192
    depth: int = 4
    num_heads: int = 3
    mlp_ratio: float = 4.0
    template_size: int = 128
    search_size: int = 320
    box_head_hidden: int = 128
    score_head_hidden: int = 64
    score_pool: str = "search"  # "search" or "all": which tokens feed the score heads
    template_factor: float = 2.0
    search_factor: float = 5.0
    # per-frame relative size-change clamp at tracking time; the raw head output
    # feeds back into the next search crop, and unclamped scale errors compound
    size_change_limit: float = 0.2
    seed: int = 0

    def __post_init__(self):
        problems = []
        for name in ("patch_size", "embed_dim", "depth", "num_heads", "template_size",
                     "search_size", "box_head_hidden", "score_head_hidden"):
            if getattr(self, name) <= 0:
                problems.append(f"{name} must be positive")
        if self.template_size % self.patch_size:
            problems.append("patch_size must divide template_size")
        if self.search_size % self.patch_size:
            problems.append("patch_size must divide search_size")
        if self.embed_dim % self.num_heads:
            problems.append("num_heads must divide embed_dim")
        if self.score_pool not in ("search", "all"):
            problems.append("score_pool must be 'search' or 'all'")
        if problems:
            raise ValueError("invalid model config: " + "; ".join(problems))

    @property
    def search_grid(self) -> int:
        return self.search_size // self.patch_size

    @property
    def template_grid(self) -> int:
        return self.template_size // self.patch_size

    @property
    def search_tokens(self) -> int:
        return self.search_grid ** 2

    @property
    def template_tokens(self) -> int:
        return self.template_grid ** 2

    @property
    def total_tokens(self) -> int:
        return self.search_tokens + 3 * self.template_tokens

    def template_crop(self) -> CropConfig:
        return CropConfig(self.template_factor, self.template_size)

    def search_crop(self) -> CropConfig:
        return CropConfig(self.search_factor, self.search_size)


@dataclass
class TokenBatch:
    """Concatenated per-segment tokens; order is fixed [search; fixed; dyn_rgb; dyn_nir]."""

    tokens: torch.Tensor  # (B, N, D)
    segment_slices: dict[str, slice]
    grids: dict[str, int]

    def segment(self, name: str) -> torch.Tensor:
        return self.tokens[:, self.segment_slices[name]]

    @property
    def segment_ids(self) -> np.ndarray:
        ids = np.empty(self.tokens.shape[1], dtype=np.int64)
        for i, name in enumerate(SEGMENTS):
            ids[self.segment_slices[name]] = i
        return ids


@dataclass
class TrackOutput:
    """Per-frame tracker output. box is normalized to the search crop; box_pixels
    is the same box mapped back into full-image coordinates."""

    box: BoundingBox
    box_pixels: BoundingBox
    reliability: float
    nir_prob: float
    degenerate: bool = False
    error: str | None = None
    raw: dict = field(default_factory=dict)

    @property
    def predicted_category(self) -> ModalityLabel:
        return ModalityLabel.NIR if self.nir_prob >= 0.5 else ModalityLabel.RGB


class EncoderBlock(nn.Module):
    """Pre-norm attention + MLP block. No trailing norm, so zeroed output
    projections make the block an exact identity."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, num_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.norm1(x)
        x = x + self.attn(y, y, y, need_weights=False)[0]
        x = x + self.mlp(self.norm2(x))
        return x


class BoxHead(nn.Module):
    """Two corner probability maps over the search grid; the box is the ordered
    pair of soft-argmax locations, so coordinates stay in [0, 1] and w, h >= 0."""

    def __init__(self, dim: int, hidden: int, grid: int):
        super().__init__()
        self.grid = grid
        self.norm = nn.LayerNorm(dim)
        self.proj = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, 2))
        coords = (torch.arange(grid, dtype=torch.float32) + 0.5) / grid
        self.register_buffer("cell_x", coords.repeat(grid))          # column-major x per token
        self.register_buffer("cell_y", coords.repeat_interleave(grid))  # row y per token

    def forward(self, search_tokens: torch.Tensor) -> dict[str, torch.Tensor]:
        return self.forward_logits(self.proj(self.norm(search_tokens)))

    def forward_logits(self, logits: torch.Tensor) -> dict[str, torch.Tensor]:
        probs = torch.softmax(logits, dim=1)  # (B, N, 2)
        xs = (probs * self.cell_x.to(probs.dtype)[None, :, None]).sum(dim=1)  # (B, 2)
        ys = (probs * self.cell_y.to(probs.dtype)[None, :, None]).sum(dim=1)
        x1 = torch.minimum(xs[:, 0], xs[:, 1])
        x2 = torch.maximum(xs[:, 0], xs[:, 1])
        y1 = torch.minimum(ys[:, 0], ys[:, 1])
        y2 = torch.maximum(ys[:, 0], ys[:, 1])
        box = torch.stack([x1, y1, x2 - x1, y2 - y1], dim=1)
        return {"box": box, "tl_map": probs[:, :, 0], "br_map": probs[:, :, 1],
                "logits": logits}


class ScoreHead(nn.Module):
    """Three perceptron layers followed by a sigmoid; shared shape for the
    reliability and modality heads."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.layers = nn.Sequential(
            nn.Linear(dim, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, 1),
        )

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.layers(pooled)).squeeze(-1)


class ProtoTrackNet(nn.Module):
    """Joint encoder over [search; fixed; dynamic RGB; dynamic NIR] token segments."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.patch_proj = nn.Conv2d(3, d, kernel_size=config.patch_size,
                                    stride=config.patch_size)
        # learned position tables, one per segment, so the three prototype slots stay
        # distinguishable even when their pixels coincide (they do at initialization)
        self.pos_embed = nn.ParameterDict({
            "search": nn.Parameter(torch.zeros(1, config.search_tokens, d)),
            "fixed": nn.Parameter(torch.zeros(1, config.template_tokens, d)),
            "dyn_rgb": nn.Parameter(torch.zeros(1, config.template_tokens, d)),
            "dyn_nir": nn.Parameter(torch.zeros(1, config.template_tokens, d)),
        })
        self.blocks = nn.ModuleList(
            EncoderBlock(d, config.num_heads, config.mlp_ratio) for _ in range(config.depth))
        self.box_head = BoxHead(d, config.box_head_hidden, config.search_grid)
        self.reliability_head = ScoreHead(d, config.score_head_hidden)
        self.modality_head = ScoreHead(d, config.score_head_hidden)
        self._init_weights()

    def _init_weights(self) -> None:
        for p in self.pos_embed.values():
            nn.init.trunc_normal_(p, std=0.02)
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Conv2d)):
                nn.init.trunc_normal_(m.weight, std=0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    def parameter_groups(self) -> dict[str, list[str]]:
        """Named-parameter split used by the two training stages."""
        score = [n for n, _ in self.named_parameters()
                 if n.startswith(("reliability_head", "modality_head"))]
        backbone = [n for n, _ in self.named_parameters() if n not in set(score)]
        return {"backbone": backbone, "score_heads": score}

    def patch_embed(self, images: torch.Tensor, segment: str) -> torch.Tensor:
        """Split an image batch into patch tokens and add the segment's position table.

        images: (B, 3, side, side) with side divisible by patch_size.
        """
        if segment not in SEGMENTS:
            raise ValueError(f"unknown segment {segment!r}")
        side = images.shape[-1]
        if side % self.config.patch_size or images.shape[-2] != side:
            raise ValueError(f"image side {images.shape[-2:]} not divisible by "
                             f"patch size {self.config.patch_size}")
        x = self.patch_proj(images)                 # (B, D, g, g)
        x = x.flatten(2).transpose(1, 2)            # (B, g*g, D) row-major
        pos = self.pos_embed[segment]
        if pos.shape[1] != x.shape[1]:
            raise ValueError(f"segment {segment} expects {pos.shape[1]} tokens, "
                             f"got {x.shape[1]}")
        return x + pos.to(x.dtype)

    def assemble(self, search: torch.Tensor, fixed: torch.Tensor,
                 dyn_rgb: torch.Tensor, dyn_nir: torch.Tensor) -> TokenBatch:
        """Concatenate segment tokens along the token dimension in the fixed order."""
        parts = {"search": search, "fixed": fixed, "dyn_rgb": dyn_rgb, "dyn_nir": dyn_nir}
        dim = search.shape[-1]
        offset = 0
        slices, grids = {}, {}
        for name, t in parts.items():
            if t.shape[1] == 0:
                raise ValueError(f"segment {name} is empty")
            if t.shape[-1] != dim:
                raise ValueError(f"segment {name} dim {t.shape[-1]} != {dim}")
            g = int(round(t.shape[1] ** 0.5))
            if g * g != t.shape[1]:
                raise ValueError(f"segment {name} token count {t.shape[1]} is not square")
            slices[name] = slice(offset, offset + t.shape[1])
            grids[name] = g
            offset += t.shape[1]
        tokens = torch.cat([parts[n] for n in SEGMENTS], dim=1)
        return TokenBatch(tokens=tokens, segment_slices=slices, grids=grids)

    def encode(self, batch: TokenBatch) -> TokenBatch:
        """Run the joint transformer; shape-preserving and finite-in/finite-out."""
        x = batch.tokens
        if not torch.isfinite(x).all():
            raise NonFiniteError("non-finite values in encoder input")
        for block in self.blocks:
            x = block(x)
        return TokenBatch(tokens=x, segment_slices=batch.segment_slices, grids=batch.grids)

    def _pooled(self, encoded: TokenBatch) -> torch.Tensor:
        if self.config.score_pool == "all":
            return encoded.tokens.mean(dim=1)
        return encoded.segment("search").mean(dim=1)

    def forward(self, search: torch.Tensor, fixed: torch.Tensor,
                dyn_rgb: torch.Tensor, dyn_nir: torch.Tensor) -> dict[str, torch.Tensor]:
        batch = self.assemble(
            self.patch_embed(search, "search"),
            self.patch_embed(fixed, "fixed"),
            self.patch_embed(dyn_rgb, "dyn_rgb"),
            self.patch_embed(dyn_nir, "dyn_nir"),
        )
        encoded = self.encode(batch)
        out = self.box_head(encoded.segment("search"))
        pooled = self._pooled(encoded)
        out["reliability"] = self.reliability_head(pooled)
        out["nir_prob"] = self.modality_head(pooled)
        return out


def build_model(config: ModelConfig) -> ProtoTrackNet:
    """Construct a net with weights drawn deterministically from config.seed."""
    torch.manual_seed(config.seed)
    return ProtoTrackNet(config)


def image_to_tensor(image: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """H x W x 3 float array in [0,1] -> (1, 3, H, W) tensor."""
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))[None]).to(dtype)


def prototype_tensors(prototype: MultiModalPrototype,
                      dtype: torch.dtype = torch.float32) -> tuple[torch.Tensor, ...]:
    return tuple(image_to_tensor(s.image, dtype) for s in prototype.samples())


def run_on_crops(model: ProtoTrackNet, search_image: np.ndarray,
                 prototype: MultiModalPrototype) -> dict[str, torch.Tensor]:
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        return model(image_to_tensor(search_image, dtype),
                     *prototype_tensors(prototype, dtype))


MIN_BOX_SIDE = 2.0  # pixels; keeps the next search crop and sample extraction valid


def clamp_to_image(box: BoundingBox, height: int, width: int) -> BoundingBox:
    """Clamp a pixel box into the image, preserving a minimal side."""
    w = min(max(box.w, MIN_BOX_SIDE), width)
    h = min(max(box.h, MIN_BOX_SIDE), height)
    x = min(max(box.x, 0.0), width - w)
    y = min(max(box.y, 0.0), height - h)
    return BoundingBox(x, y, w, h, Encoding.PIXEL)


def track_step(model: ProtoTrackNet, prototype: MultiModalPrototype,
               state: PrototypeState, frame: Frame, prev_box: BoundingBox,
               ) -> tuple[TrackOutput, MultiModalPrototype, PrototypeState]:
    """Process one frame: localize inside the search crop around prev_box, score
    reliability and modality, then drive the prototype update machine.

    Any per-frame failure is captured in the output record and prev_box is
    carried forward; a long sequence never dies on one bad frame.
    """
    cfg = model.config
    try:
        side = cfg.search_factor * float(np.sqrt(prev_box.w * prev_box.h))
        crop = crop_square(frame.image, prev_box.cx, prev_box.cy, side,
                           cfg.search_size, pad_value=float(frame.image.mean()))
        out = run_on_crops(model, crop.image, prototype)
        bx, by, bw, bh = (float(v) for v in out["box"][0])
        box_norm = BoundingBox(bx, by, bw, bh, Encoding.NORMALIZED)
        w_px, h_px = bw * crop.side, bh * crop.side
        if cfg.size_change_limit > 0:
            lo, hi = 1 - cfg.size_change_limit, 1 + cfg.size_change_limit
            w_px = min(max(w_px, prev_box.w * lo), prev_box.w * hi)
            h_px = min(max(h_px, prev_box.h * lo), prev_box.h * hi)
        cx = crop.x0 + (bx + bw / 2) * crop.side
        cy = crop.y0 + (by + bh / 2) * crop.side
        box_pixels = clamp_to_image(
            BoundingBox.from_center(cx, cy, w_px, h_px, Encoding.PIXEL),
            frame.height, frame.width)
        reliability = float(out["reliability"][0])
        nir_prob = float(out["nir_prob"][0])
        category = ModalityLabel.NIR if nir_prob >= 0.5 else ModalityLabel.RGB
        prototype, state, _ = process_event(
            prototype, state, category, reliability, frame.index,
            sample_fn=lambda decision: extract_sample(
                frame, box_pixels, cfg.template_crop(), category=decision.predicted_category))
        result = TrackOutput(
            box=box_norm, box_pixels=box_pixels, reliability=reliability,
            nir_prob=nir_prob, degenerate=box_norm.is_degenerate(),
            raw={"tl_map": out["tl_map"][0].numpy(), "br_map": out["br_map"][0].numpy()})
        return result, prototype, state
    except Exception as exc:  # noqa: BLE001 - contract: record and continue
        from .proto import tick
        state = tick(state)
        result = TrackOutput(
            box=BoundingBox(0, 0, 0, 0, Encoding.NORMALIZED),
            box_pixels=prev_box, reliability=0.0, nir_prob=0.0, degenerate=True,
            error=f"frame {frame.index}: {type(exc).__name__}: {exc}")
        return result, prototype, state


def parameter_hash(model: nn.Module, names: SequenceT[str] | None = None) -> str:
    """Order-stable SHA-256 over the selected parameter tensors (all by default)."""
    import hashlib
    digest = hashlib.sha256()
    wanted = set(names) if names is not None else None
    for name, p in sorted(model.state_dict().items()):
        if wanted is not None and name not in wanted:
            continue
        digest.update(name.encode())
        digest.update(p.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def save_checkpoint(path: str | Path, model: ProtoTrackNet,
                    train_state: dict | None = None) -> None:
    """Write a single zip archive: human-readable config + named weight arrays
    (+ optional optimizer/progress arrays for resuming)."""
    arrays = {name: p.detach().cpu().numpy() for name, p in model.state_dict().items()}
    weights_buf = io.BytesIO()
    np.savez(weights_buf, **arrays)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr("config.yaml", yaml.safe_dump(asdict(model.config), sort_keys=True))
        zf.writestr("weights.npz", weights_buf.getvalue())
        if train_state is not None:
            state_buf = io.BytesIO()
            np.savez(state_buf, **{k: np.asarray(v) for k, v in train_state.items()})
            zf.writestr("trainstate.npz", state_buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[ProtoTrackNet, dict]:
    """Rebuild the model from an archive; every expected tensor name and shape is
    validated and mismatches fail loudly."""
    path = Path(path)
    with zipfile.ZipFile(path) as zf:
        config = ModelConfig(**yaml.safe_load(zf.read("config.yaml")))
        with np.load(io.BytesIO(zf.read("weights.npz"))) as npz:
            arrays = {k: npz[k] for k in npz.files}
        train_state: dict = {}
        if "trainstate.npz" in zf.namelist():
            with np.load(io.BytesIO(zf.read("trainstate.npz"))) as npz:
                train_state = {k: npz[k] for k in npz.files}
    model = build_model(config)
    expected = {name: tuple(p.shape) for name, p in model.state_dict().items()}
    problems = []
    for name in sorted(set(expected) - set(arrays)):
        problems.append(f"missing tensor {name}")
    for name in sorted(set(arrays) - set(expected)):
        problems.append(f"unexpected tensor {name}")
    for name in sorted(set(arrays) & set(expected)):
        if tuple(arrays[name].shape) != expected[name]:
            problems.append(f"shape mismatch for {name}: "
                            f"{tuple(arrays[name].shape)} != {expected[name]}")
    if problems:
        raise ValueError(f"checkpoint {path} invalid: " + "; ".join(problems))
    model.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    return model, train_state
