"""Detection-transformer network for one-dimensional (time axis) events.

A strided conv backbone turns the log-mel input into a C x T x F map, a
1x1 projection brings it to the attention width, and an encoder/decoder
stack over the flattened T*F positions decodes N event slots plus one
clip-level audio slot in parallel. Positional information varies along
time only; every frequency row shares the same encoding, and both the
positional encoding and the learned query embeddings are re-added at the
input of every attention layer rather than only at the first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .geometry import ValidationError


@dataclass(frozen=True)
class BackboneStage:
    channels: int
    stride_t: int = 2
    stride_f: int = 2


DEFAULT_BACKBONE = (
    BackboneStage(32),
    BackboneStage(64),
    BackboneStage(128),
    BackboneStage(256),
)


@dataclass(frozen=True)
class ModelConfig:
    n_classes: int
    d_model: int = 128
    n_heads: int = 8
    n_encoder_blocks: int = 3
    n_decoder_blocks: int = 3
    ffn_width: int = 512
    n_queries: int = 10
    dropout: float = 0.1
    backbone: Tuple[BackboneStage, ...] = DEFAULT_BACKBONE
    boundary_head_layers: int = 1  # 1 = affine + squash, 3 = small MLP

    def __post_init__(self) -> None:
        if self.n_classes < 1 or self.n_queries < 1:
            raise ValidationError("need at least one class and one query")
        if self.d_model % self.n_heads != 0:
            raise ValidationError("d_model must be divisible by n_heads")
        if self.d_model % 2 != 0:
            raise ValidationError("d_model must be even for the positional encoding")
        if self.n_encoder_blocks < 1 or self.n_decoder_blocks < 1:
            raise ValidationError("need at least one encoder and decoder block")
        if self.boundary_head_layers not in (1, 3):
            raise ValidationError("boundary head has 1 or 3 layers")
        object.__setattr__(self, "backbone", tuple(self.backbone))

    @property
    def time_stride(self) -> int:
        out = 1
        for s in self.backbone:
            out *= s.stride_t
        return out

    def to_dict(self) -> dict:
        return {
            "n_classes": self.n_classes,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "n_encoder_blocks": self.n_encoder_blocks,
            "n_decoder_blocks": self.n_decoder_blocks,
            "ffn_width": self.ffn_width,
            "n_queries": self.n_queries,
            "dropout": self.dropout,
            "backbone": [[s.channels, s.stride_t, s.stride_f] for s in self.backbone],
            "boundary_head_layers": self.boundary_head_layers,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["backbone"] = tuple(BackboneStage(*s) for s in d["backbone"])
        return cls(**d)


def positional_encoding(
    n_time: int,
    n_freq: int,
    d_model: int,
    dtype: torch.dtype = torch.float32,
    device: Optional[torch.device] = None,
) -> torch.Tensor:
    """Sinusoidal encoding over the time axis, shape (n_time, n_freq, d_model).

    Even dims carry sin(t / 10000^(2i/d)), odd dims the matching cosine;
    the frequency axis is broadcast, so every row along it is identical.
    """
    if d_model % 2 != 0:
        raise ValidationError("positional encoding needs an even width")
    t = torch.arange(n_time, dtype=dtype, device=device)
    i2 = torch.arange(0, d_model, 2, dtype=dtype, device=device)
    angles = t[:, None] / torch.pow(
        torch.tensor(10000.0, dtype=dtype, device=device), i2 / d_model
    )
    enc = torch.zeros(n_time, d_model, dtype=dtype, device=device)
    enc[:, 0::2] = torch.sin(angles)
    enc[:, 1::2] = torch.cos(angles)
    return enc[:, None, :].expand(n_time, n_freq, d_model)


class ChannelNorm(nn.Module):
    """LayerNorm over the channel axis of a (B, C, T, F) map.

    Normalizing each position independently keeps padded columns from
    influencing real ones, unlike batch or group statistics.
    """

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mean = x.mean(dim=1, keepdim=True)
        var = x.var(dim=1, keepdim=True, unbiased=False)
        x = (x - mean) / torch.sqrt(var + self.eps)
        return x * self.weight[None, :, None, None] + self.bias[None, :, None, None]


class ConvBackbone(nn.Module):
    """Strided 3x3 conv stack; each stage halves (configurably) both axes."""

    def __init__(self, stages: Sequence[BackboneStage]):
        super().__init__()
        convs, norms = [], []
        in_ch = 1
        for stage in stages:
            convs.append(
                nn.Conv2d(
                    in_ch,
                    stage.channels,
                    kernel_size=3,
                    stride=(stage.stride_t, stage.stride_f),
                    padding=1,
                )
            )
            norms.append(ChannelNorm(stage.channels))
            in_ch = stage.channels
        self.convs = nn.ModuleList(convs)
        self.norms = nn.ModuleList(norms)
        self.strides_t = [s.stride_t for s in stages]
        self.out_channels = in_ch

    def forward(
        self, x: torch.Tensor, pad_mask: Optional[torch.Tensor] = None
    ) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        """(B, 1, T0, F0) -> (B, C, T, F) with T = ceil(T0 / time stride).

        The padding mask is subsampled in step with each stage so it stays
        aligned with the time axis.
        """
        for conv, norm, stride_t in zip(self.convs, self.norms, self.strides_t):
            x = F.relu(norm(conv(x)))
            if pad_mask is not None:
                pad_mask = pad_mask[:, ::stride_t]
        return x, pad_mask


class EncoderBlock(nn.Module):
    def __init__(self, d_model: int, n_heads: int, ffn_width: int, dropout: float):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(
            d_model, n_heads, dropout=dropout, batch_first=True
        )
        self.linear1 = nn.Linear(d_model, ffn_width)
        self.linear2 = nn.Linear(ffn_width, d_model)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.dropout = nn.Dropout(dropout)
        self.dropout1 = nn.Dropout(dropout)
        self.dropout2 = nn.Dropout(dropout)

    def forward(
        self,
        x: torch.Tensor,
        pos: torch.Tensor,
        key_padding_mask: Optional[torch.Tensor] = None,
        need_weights: bool = False,
    ):
        q = k = x + pos
        attn_out, attn_weights = self.self_attn(
            q, k, x, key_padding_mask=key_padding_mask, need_weights=need_weights
        )
        x = self.norm1(x + self.dropout1(attn_out))
        ff = self.linear2(self.dropout(F.relu(self.linear1(x))))
        x = self.norm2(x + self.dropout2(ff))
        return x, attn_weights


class DecoderBlock(nn.Module):
    def __init__(self, d_model: int, n_heads: int, ffn_width: int, dropout: float):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(
            d_model, n_heads, dropout=dropout, batch_first=True
        )
        self.cross_attn = nn.MultiheadAttention(
            d_model, n_heads, dropout=dropout, batch_first=True
        )
        self.linear1 = nn.Linear(d_model, ffn_width)
        self.linear2 = nn.Linear(ffn_width, d_model)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.norm3 = nn.LayerNorm(d_model)
        self.dropout = nn.Dropout(dropout)
        self.dropout1 = nn.Dropout(dropout)
        self.dropout2 = nn.Dropout(dropout)
        self.dropout3 = nn.Dropout(dropout)

    def forward(
        self,
        x: torch.Tensor,
        query_pos: torch.Tensor,
        memory: torch.Tensor,
        memory_pos: torch.Tensor,
        memory_key_padding_mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        q = k = x + query_pos
        attn_out, _ = self.self_attn(q, k, x)
        x = self.norm1(x + self.dropout1(attn_out))
        attn_out, _ = self.cross_attn(
            x + query_pos,
            memory + memory_pos,
            memory,
            key_padding_mask=memory_key_padding_mask,
        )
        x = self.norm2(x + self.dropout2(attn_out))
        ff = self.linear2(self.dropout(F.relu(self.linear1(x))))
        x = self.norm3(x + self.dropout3(ff))
        return x


class BoundaryHead(nn.Module):
    """Maps a slot state to (center, duration), squashed into [0, 1]^2."""

    def __init__(self, d_model: int, n_layers: int):
        super().__init__()
        if n_layers == 1:
            self.net = nn.Linear(d_model, 2)
        else:
            self.net = nn.Sequential(
                nn.Linear(d_model, d_model),
                nn.ReLU(),
                nn.Linear(d_model, d_model),
                nn.ReLU(),
                nn.Linear(d_model, 2),
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(x))


@dataclass
class ModelOutput:
    """Stacked per-block predictions for a batch.

    boundaries: (M, B, N, 2) in [0, 1]; class_probs: (M, B, N, K+1) softmax
    rows; tag_probs: (B, K) sigmoid outputs from the final audio slot;
    hidden: (M, B, N+1, d) decoder states.
    """

    boundaries: torch.Tensor
    class_probs: torch.Tensor
    tag_probs: torch.Tensor
    hidden: torch.Tensor

    @property
    def n_blocks(self) -> int:
        return self.boundaries.shape[0]

    @property
    def batch_size(self) -> int:
        return self.boundaries.shape[1]


class SoundEventTransformer(nn.Module):
    """Backbone + encoder/decoder + prediction heads.

    Forward maps a padded spectrogram batch to per-block boundary and class
    distributions for the N event slots and one tag vector from the audio
    slot of the final block.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = ConvBackbone(cfg.backbone)
        self.input_proj = nn.Conv2d(self.backbone.out_channels, cfg.d_model, 1)
        self.query_embed = nn.Embedding(cfg.n_queries + 1, cfg.d_model)
        self.encoder = nn.ModuleList(
            EncoderBlock(cfg.d_model, cfg.n_heads, cfg.ffn_width, cfg.dropout)
            for _ in range(cfg.n_encoder_blocks)
        )
        self.decoder = nn.ModuleList(
            DecoderBlock(cfg.d_model, cfg.n_heads, cfg.ffn_width, cfg.dropout)
            for _ in range(cfg.n_decoder_blocks)
        )
        self.class_head = nn.Linear(cfg.d_model, cfg.n_classes + 1)
        self.boundary_head = BoundaryHead(cfg.d_model, cfg.boundary_head_layers)
        self.tag_head = nn.Linear(cfg.d_model, cfg.n_classes)
        self._init_parameters()

    def _init_parameters(self) -> None:
        for name, p in self.named_parameters():
            # query embeddings keep their unit-normal init so slots separate
            if p.dim() > 1 and not name.startswith("query_embed"):
                nn.init.xavier_uniform_(p)
        # boundary output starts at the clip middle with half-clip duration
        final = self.boundary_head.net
        if isinstance(final, nn.Sequential):
            final = final[-1]
        nn.init.zeros_(final.bias)

    def forward(
        self, specs: torch.Tensor, pad_mask: Optional[torch.Tensor] = None
    ) -> ModelOutput:
        if specs.dim() != 3:
            raise ValidationError("expected a (batch, time, mels) input")
        fmap, mask_t = self.backbone(specs.unsqueeze(1), pad_mask)
        z0 = self.input_proj(fmap)  # (B, d, T, F)
        b, d, t, f = z0.shape
        pos = positional_encoding(t, f, d, dtype=z0.dtype, device=z0.device)
        pos = pos.reshape(t * f, d).unsqueeze(0)
        src = z0.flatten(2).transpose(1, 2)  # (B, T*F, d), frequency fastest
        mask_flat = None
        if mask_t is not None:
            mask_flat = mask_t[:, :, None].expand(b, t, f).reshape(b, t * f)

        memory = src
        for block in self.encoder:
            memory, _ = block(memory, pos, key_padding_mask=mask_flat)

        query_pos = self.query_embed.weight.unsqueeze(0).expand(b, -1, -1)
        x = torch.zeros_like(query_pos)
        states = []
        for block in self.decoder:
            x = block(x, query_pos, memory, pos, memory_key_padding_mask=mask_flat)
            states.append(x)
        hidden = torch.stack(states)  # (M, B, N+1, d)

        n = self.cfg.n_queries
        event_states = hidden[:, :, :n, :]
        boundaries = self.boundary_head(event_states)
        class_probs = torch.softmax(self.class_head(event_states), dim=-1)
        tag_probs = torch.sigmoid(self.tag_head(hidden[-1, :, n, :]))
        return ModelOutput(
            boundaries=boundaries,
            class_probs=class_probs,
            tag_probs=tag_probs,
            hidden=hidden,
        )
