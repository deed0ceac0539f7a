"""The promptable segmentation model: one image encoder (adapter-tunable), a
frozen prompt encoder, three structurally identical mask decoders, and a
feature-fusion head.

Decoders consume a cached image embedding plus prompt tokens, so the encoder
runs once per image and every refinement round costs only a decoder pass. The
automatic decoder interprets negative prompts as patch removals, the prompted
decoder segments road inside positively prompted patches, and the high-recall
decoder is prompt-free. Nothing in the architecture hard-codes the patch
tiling; the locality of prompt influence is learned from the training labels.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .grid import NEGATIVE, POSITIVE, PointPrompt

CHECKPOINT_FORMAT_VERSION = 1

_PIXEL_MEAN = 0.5
_PIXEL_STD = 0.25

# sin/cos periods in pixels: two interleaved octave ladders covering road
# widths up to whole-scene extents, including the default patch period and
# its harmonics. 16 periods x (sin, cos) x (h, w) = 64 features.
_PE_PERIODS = (
    4.0, 6.0, 8.0, 12.0, 16.0, 24.0, 32.0, 48.0,
    64.0, 96.0, 128.0, 192.0, 256.0, 384.0, 512.0, 768.0,
)


@dataclass(frozen=True)
class BackboneSpec:
    variant: str = "toy"
    adapter_rank: int = 8
    adapter_scale: float = 32.0
    embed_dim: int = 64
    # foundation-only dims; defaults follow the ViT-B configuration
    vit_depth: int = 12
    vit_dim: int = 768
    vit_heads: int = 12
    vit_patch: int = 16
    native_size: int = 1024

    def __post_init__(self):
        if self.variant not in ("toy", "foundation"):
            raise ValueError(f"variant must be 'toy' or 'foundation', got {self.variant!r}")
        if self.adapter_rank < 1:
            raise ValueError("adapter_rank must be >= 1")


@dataclass
class ImageEmbedding:
    """Cached encoder output for one image plus its original dimensions."""

    features: torch.Tensor  # [1, C, Hg, Wg]
    height: int
    width: int


class PositionalEncoder(nn.Module):
    """Sine/cosine ladder over absolute pixel coordinates.

    The raw ladder is the encoding (no projection), so the dot product of two
    encodings is a sum of cosines of coordinate offsets: a position-matched
    kernel that query/key maps can reshape but do not need to rediscover.
    """

    def __init__(self, dim: int, periods=_PE_PERIODS):
        super().__init__()
        self.periods = tuple(periods)
        if dim != 4 * len(self.periods):
            raise ValueError(f"embed dim {dim} != 4 * {len(self.periods)} ladder features")
        inv = torch.tensor([2.0 * math.pi / p for p in self.periods])
        self.register_buffer("inv_periods", inv)

    def forward(self, h: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        ang_h = h[..., None] * self.inv_periods
        ang_w = w[..., None] * self.inv_periods
        return torch.cat(
            [torch.sin(ang_h), torch.cos(ang_h), torch.sin(ang_w), torch.cos(ang_w)], dim=-1
        )

    def grid(self, grid_h: int, grid_w: int, height: int, width: int) -> torch.Tensor:
        """Encodings for cell centers of a grid covering a height x width image."""
        device = self.inv_periods.device
        hs = (torch.arange(grid_h, device=device, dtype=torch.float32) + 0.5) * (height / grid_h) - 0.5
        ws = (torch.arange(grid_w, device=device, dtype=torch.float32) + 0.5) * (width / grid_w) - 0.5
        hh, ww = torch.meshgrid(hs, ws, indexing="ij")
        return self.forward(hh, ww)  # [Hg, Wg, C]


class PromptEncoder(nn.Module):
    """Point prompts become tokens: per-polarity embedding + positional
    encoding. All parameters are frozen; decoders learn to interpret them."""

    def __init__(self, dim: int, pe: PositionalEncoder):
        super().__init__()
        self.pe = pe
        self.polarity = nn.Embedding(2, dim)
        self.no_prompt = nn.Parameter(torch.randn(dim))
        for p in self.parameters(recurse=False):
            p.requires_grad_(False)
        self.polarity.weight.requires_grad_(False)

    def encode(self, points: list[PointPrompt], height: int, width: int) -> torch.Tensor:
        """One token per point; an empty list yields the single no-prompt token."""
        if not points:
            return self.no_prompt[None, :]
        for p in points:
            if not (0 <= p.h < height and 0 <= p.w < width):
                raise ValueError(
                    f"point (h={p.h}, w={p.w}) outside image bounds {height}x{width}"
                )
        device = self.no_prompt.device
        hs = torch.tensor([float(p.h) for p in points], device=device)
        ws = torch.tensor([float(p.w) for p in points], device=device)
        pol = torch.tensor(
            [0 if p.polarity == POSITIVE else 1 for p in points], device=device
        )
        return self.polarity(pol) + self.pe(hs, ws)

    def tokens_with_sink(self, points: list[PointPrompt], height: int, width: int) -> torch.Tensor:
        """Token stack the decoders consume: the no-prompt token is always
        present so unprompted cells have something neutral to attend to."""
        sink = self.no_prompt[None, :]
        if not points:
            return sink
        return torch.cat([sink, self.encode(points, height, width)], dim=0)


def _norm_act(channels: int) -> list[nn.Module]:
    return [nn.GroupNorm(math.gcd(channels, 8), channels), nn.GELU()]


class ToyEncoder(nn.Module):
    """A few strided conv stages plus one attention block; stride 8 output."""

    stride = 8

    def __init__(self, dim: int, pe: PositionalEncoder):
        super().__init__()
        self.pe = pe
        self.convs = nn.Sequential(
            nn.Conv2d(3, 32, 3, stride=2, padding=1), *_norm_act(32),
            nn.Conv2d(32, 48, 3, stride=2, padding=1), *_norm_act(48),
            nn.Conv2d(48, dim, 3, stride=2, padding=1), *_norm_act(dim),
            nn.Conv2d(dim, dim, 3, padding=1), *_norm_act(dim),
        )
        self.ln_attn = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, num_heads=4, batch_first=True)
        self.ln_mlp = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, _, h, w = x.shape
        feats = self.convs(x)
        gh, gw = feats.shape[-2:]
        tokens = feats.flatten(2).transpose(1, 2)  # [B, Hg*Wg, C]
        pos = self.pe.grid(gh, gw, h, w).flatten(0, 1)[None]
        q = self.ln_attn(tokens) + pos
        attended, _ = self.attn(q, q, self.ln_attn(tokens))
        tokens = tokens + attended
        tokens = tokens + self.mlp(self.ln_mlp(tokens))
        return tokens.transpose(1, 2).reshape(b, -1, gh, gw)


class LoRALinear(nn.Module):
    """Linear layer with a frozen base and a trainable low-rank update."""

    def __init__(self, base: nn.Linear, rank: int, scale: float):
        super().__init__()
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.down = nn.Linear(base.in_features, rank, bias=False)
        self.up = nn.Linear(rank, base.out_features, bias=False)
        nn.init.normal_(self.down.weight, std=1.0 / rank)
        nn.init.zeros_(self.up.weight)
        self.scaling = scale / rank

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scaling * self.up(self.down(x))


class _VitBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn_qkv = nn.Linear(dim, 3 * dim)
        self.attn_proj = nn.Linear(dim, dim)
        self.heads = heads
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        qkv = self.attn_qkv(self.norm1(x)).reshape(b, n, 3, self.heads, c // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attended = F.scaled_dot_product_attention(q, k, v)
        attended = attended.transpose(1, 2).reshape(b, n, c)
        x = x + self.attn_proj(attended)
        return x + self.mlp(self.norm2(x))


class VitEncoder(nn.Module):
    """Plain ViT backbone with low-rank adapters on the attention projections.

    The base weights freeze at construction; only adapters train. Pretrained
    weights load via ``load_base_weights`` from a state dict with matching
    shapes (patch embedding, blocks, neck).
    """

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.stride = spec.vit_patch
        self.native_size = spec.native_size
        dim = spec.vit_dim
        self.patch_embed = nn.Conv2d(3, dim, spec.vit_patch, stride=spec.vit_patch)
        side = spec.native_size // spec.vit_patch
        self.pos_embed = nn.Parameter(torch.zeros(1, side, side, dim))
        self.blocks = nn.ModuleList(_VitBlock(dim, spec.vit_heads) for _ in range(spec.vit_depth))
        self.neck = nn.Sequential(
            nn.Conv2d(dim, spec.embed_dim, 1, bias=False),
            nn.GroupNorm(math.gcd(spec.embed_dim, 8), spec.embed_dim),
            nn.Conv2d(spec.embed_dim, spec.embed_dim, 3, padding=1, bias=False),
            nn.GroupNorm(math.gcd(spec.embed_dim, 8), spec.embed_dim),
        )
        for p in self.parameters():
            p.requires_grad_(False)
        for block in self.blocks:
            block.attn_qkv = LoRALinear(block.attn_qkv, spec.adapter_rank, spec.adapter_scale)
            block.attn_proj = LoRALinear(block.attn_proj, spec.adapter_rank, spec.adapter_scale)

    def adapter_parameters(self):
        for name, p in self.named_parameters():
            if ".down." in name or ".up." in name:
                yield p

    def load_base_weights(self, state_dict: dict):
        missing, unexpected = self.load_state_dict(state_dict, strict=False)
        return missing, unexpected

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = self.patch_embed(x).permute(0, 2, 3, 1)  # [B, Hg, Wg, C]
        gh, gw = feats.shape[1:3]
        pos = self.pos_embed
        if pos.shape[1] != gh or pos.shape[2] != gw:
            pos = F.interpolate(
                pos.permute(0, 3, 1, 2), size=(gh, gw), mode="bilinear", align_corners=False
            ).permute(0, 2, 3, 1)
        feats = feats + pos
        b = feats.shape[0]
        tokens = feats.reshape(b, gh * gw, -1)
        for block in self.blocks:
            tokens = block(tokens)
        feats = tokens.reshape(b, gh, gw, -1).permute(0, 3, 1, 2)
        return self.neck(feats)


class PromptGateBlock(nn.Module):
    """Image cells accumulate unnormalized affinity evidence from the prompt
    tokens, then mix channel-wise.

    Per cell the gate is logsumexp over token scores minus the no-prompt
    token's score: zero with no prompts and monotone in matched prompts, so
    extra prompts only add evidence instead of diluting a softmax. Query and
    key maps start tied, making initial scores the positional matched filter
    pe(cell)·pe(token); training shapes that proximity kernel into the
    patch-membership gate the labels demand.
    """

    n_gates = 2

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.ln_q = nn.LayerNorm(dim)
        self.wq = nn.Linear(dim, self.n_gates * dim)
        self.wk = nn.Linear(dim, self.n_gates * dim)
        with torch.no_grad():
            self.wk.weight.copy_(self.wq.weight)
        self.scale = 1.0 / math.sqrt(dim)
        self.message = nn.Sequential(
            nn.Linear(self.n_gates, 32), nn.GELU(), nn.Linear(32, dim)
        )
        nn.init.zeros_(self.message[-1].weight)
        nn.init.zeros_(self.message[-1].bias)
        self.ln_m = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, cells, pos, tokens, pad_mask):
        b, n, _ = cells.shape
        t = tokens.shape[1]
        q = self.wq(self.ln_q(cells) + pos).view(b, n, self.n_gates, self.dim) * self.scale
        k = self.wk(tokens).view(b, t, self.n_gates, self.dim)
        scores = torch.einsum("bngc,btgc->bngt", q, k)  # token 0 is the sink
        if pad_mask is not None:
            scores = scores.masked_fill(pad_mask[:, None, None, :], float("-inf"))
        gates = torch.logsumexp(scores, dim=-1) - scores[..., 0]  # [B, N, gates]
        cells = cells + self.message(gates)
        return cells + self.mlp(self.ln_m(cells))


class MaskDecoder(nn.Module):
    """Prompt-gated decoding followed by a learned upsampling head. Returns
    full-resolution logits plus the pre-head feature grid that the fusion
    module consumes."""

    feat_channels = 12

    def __init__(self, dim: int, pe: PositionalEncoder, blocks: int = 2):
        super().__init__()
        self.pe = pe
        self.blocks = nn.ModuleList(PromptGateBlock(dim) for _ in range(blocks))
        f1, f2 = 24, self.feat_channels
        # coordinates reach the conv head through a gated injection so the
        # head can snap soft attention gating to exact patch boundaries
        # without position patterns swamping early feature learning
        self.pos_gate = nn.Parameter(torch.tensor(0.1))
        self.up = nn.Sequential(
            nn.ConvTranspose2d(dim, f1, 2, stride=2), *_norm_act(f1),
            nn.Conv2d(f1, f1, 3, padding=1), *_norm_act(f1),
            nn.ConvTranspose2d(f1, f2, 2, stride=2), *_norm_act(f2),
            nn.Conv2d(f2, f2, 3, padding=1), *_norm_act(f2),
        )
        self.head = nn.Conv2d(f2, 1, 1)

    def forward(
        self, features: torch.Tensor, tokens: torch.Tensor, pad_mask, out_size
    ) -> tuple[torch.Tensor, torch.Tensor]:
        b, c, gh, gw = features.shape
        cells = features.flatten(2).transpose(1, 2)
        pos = self.pe.grid(gh, gw, out_size[0], out_size[1]).flatten(0, 1)[None]
        for block in self.blocks:
            cells = block(cells, pos, tokens, pad_mask)
        cells = cells + self.pos_gate * pos
        grid = cells.transpose(1, 2).reshape(b, c, gh, gw)
        feat = self.up(grid)
        logits = F.interpolate(self.head(feat), size=out_size, mode="bilinear", align_corners=False)
        return logits[:, 0], feat


class FusionHead(nn.Module):
    """Two 3x3 convs over the concatenated decoder features -> fused logits."""

    def __init__(self, feat_channels: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(2 * feat_channels, 16, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(16, 1, 3, padding=1),
        )

    def forward(self, feat_a, feat_p, out_size) -> torch.Tensor:
        if feat_a.shape != feat_p.shape:
            raise ValueError(f"feature shape mismatch: {tuple(feat_a.shape)} vs {tuple(feat_p.shape)}")
        fused = self.net(torch.cat([feat_a, feat_p], dim=1))
        return F.interpolate(fused, size=out_size, mode="bilinear", align_corners=False)[:, 0]


class PromptableRoadModel(nn.Module):
    """Encoder-once promptable road segmenter with three decoders + fusion."""

    def __init__(self, backbone: BackboneSpec = BackboneSpec()):
        super().__init__()
        self.backbone = backbone
        dim = backbone.embed_dim
        self.pe = PositionalEncoder(dim)
        if backbone.variant == "toy":
            self.encoder: nn.Module = ToyEncoder(dim, self.pe)
        else:
            self.encoder = VitEncoder(backbone)
        self.prompt_encoder = PromptEncoder(dim, self.pe)
        self.decoder_auto = MaskDecoder(dim, self.pe)
        self.decoder_prompted = MaskDecoder(dim, self.pe)
        self.decoder_highrecall = MaskDecoder(dim, self.pe)
        self.fusion = FusionHead(MaskDecoder.feat_channels)
        self.encode_calls = 0  # encoder-once bookkeeping

    # ----- parameter partition -------------------------------------------------

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        """Split trainables per the fine-tuning recipe: automatic + high-recall
        decoders in the slow group; prompted decoder, fusion head, and encoder
        adapters in the fast group."""
        slow = [
            p
            for m in (self.decoder_auto, self.decoder_highrecall)
            for p in m.parameters()
            if p.requires_grad
        ]
        fast = [
            p
            for m in (self.decoder_prompted, self.fusion)
            for p in m.parameters()
            if p.requires_grad
        ]
        if self.backbone.variant == "toy":
            fast.extend(p for p in self.encoder.parameters() if p.requires_grad)
        else:
            fast.extend(self.encoder.adapter_parameters())
        return {"decoders_auto_hr": slow, "prompted_fusion_adapters": fast}

    def frozen_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if not p.requires_grad]

    # ----- image path ----------------------------------------------------------

    @staticmethod
    def _prepare(image: np.ndarray) -> torch.Tensor:
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"expected an HxWx3 raster, got shape {image.shape}")
        array = np.ascontiguousarray(image)
        if not array.flags.writeable:
            array = array.copy()
        x = torch.from_numpy(array).float() / 255.0
        x = (x - _PIXEL_MEAN) / _PIXEL_STD
        return x.permute(2, 0, 1)[None]

    def encode_batch(self, images: torch.Tensor) -> torch.Tensor:
        """Training-path encoder forward on an already normalized batch."""
        self.encode_calls += 1
        return self.encoder(images)

    @torch.no_grad()
    def encode_image(self, image: np.ndarray) -> ImageEmbedding:
        """Run the encoder exactly once for an image and cache the result."""
        height, width = image.shape[:2]
        x = self._prepare(image)
        if self.backbone.variant == "foundation":
            size = self.backbone.native_size
            x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
        self.encode_calls += 1
        features = self.encoder(x)
        return ImageEmbedding(features=features, height=height, width=width)

    # ----- prompt + decode path --------------------------------------------------

    def encode_prompts(self, points: list[PointPrompt], height: int, width: int) -> torch.Tensor:
        return self.prompt_encoder.encode(points, height, width)

    def _decode(self, decoder, emb: ImageEmbedding, points: list[PointPrompt]):
        tokens = self.prompt_encoder.tokens_with_sink(points, emb.height, emb.width)[None]
        return decoder(emb.features, tokens, None, (emb.height, emb.width))

    @torch.no_grad()
    def decode_auto(self, emb: ImageEmbedding, negatives: list[PointPrompt]):
        """Automatic road logits; negative prompts remove their patches."""
        if any(p.polarity != NEGATIVE for p in negatives):
            raise ValueError("decode_auto accepts only negative-polarity prompts")
        logits, feat = self._decode(self.decoder_auto, emb, list(negatives))
        return logits[0], feat

    @torch.no_grad()
    def decode_prompted(self, emb: ImageEmbedding, positives: list[PointPrompt]):
        """Road logits restricted to positively prompted patches."""
        if any(p.polarity != POSITIVE for p in positives):
            raise ValueError("decode_prompted accepts only positive-polarity prompts")
        logits, feat = self._decode(self.decoder_prompted, emb, list(positives))
        return logits[0], feat

    @torch.no_grad()
    def decode_highrecall(self, emb: ImageEmbedding) -> torch.Tensor:
        logits, _ = self._decode(self.decoder_highrecall, emb, [])
        return logits[0]

    def fuse(self, feat_a: torch.Tensor, feat_p: torch.Tensor, out_size) -> torch.Tensor:
        return self.fusion(feat_a, feat_p, out_size)[0]

    # ----- batched training forward ----------------------------------------------

    def forward_training(
        self, images: torch.Tensor, positives: list[list[PointPrompt]], negatives: list[list[PointPrompt]]
    ) -> dict[str, torch.Tensor]:
        """Forward over all heads with per-image prompt lists (padded tokens)."""
        b, _, h, w = images.shape
        features = self.encode_batch(images)
        out_size = (h, w)

        def stack_tokens(per_image: list[list[PointPrompt]]):
            toks = [self.prompt_encoder.tokens_with_sink(pts, h, w) for pts in per_image]
            t_max = max(t.shape[0] for t in toks)
            stacked = torch.zeros(b, t_max, toks[0].shape[1], device=images.device)
            pad = torch.ones(b, t_max, dtype=torch.bool, device=images.device)
            for i, t in enumerate(toks):
                stacked[i, : t.shape[0]] = t
                pad[i, : t.shape[0]] = False
            return stacked, pad

        neg_tokens, neg_pad = stack_tokens(negatives)
        pos_tokens, pos_pad = stack_tokens(positives)
        sink_tokens, sink_pad = stack_tokens([[] for _ in range(b)])

        o_a, feat_a = self.decoder_auto(features, neg_tokens, neg_pad, out_size)
        o_p, feat_p = self.decoder_prompted(features, pos_tokens, pos_pad, out_size)
        o_hr, _ = self.decoder_highrecall(features, sink_tokens, sink_pad, out_size)
        o_m = self.fusion(feat_a, feat_p, out_size)
        return {"o_a": o_a, "o_p": o_p, "o_hr": o_hr, "o_m": o_m}


def build_model(backbone: BackboneSpec = BackboneSpec(), seed: int = 0) -> PromptableRoadModel:
    """Construct a model with reproducible initialization."""
    torch.manual_seed(seed)
    return PromptableRoadModel(backbone)


def save_checkpoint(
    path: str | Path,
    model: PromptableRoadModel,
    patch_size: tuple[int, int],
    extra: dict | None = None,
):
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "backbone": asdict(model.backbone),
        "patch_size": tuple(patch_size),
        "state_dict": model.state_dict(),
    }
    if extra:
        payload["extra"] = extra
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[PromptableRoadModel, tuple[int, int], dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version: {version}")
    model = PromptableRoadModel(BackboneSpec(**payload["backbone"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, tuple(payload["patch_size"]), payload.get("extra", {})
