import logging
import math
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from app.core.config import ModelConfig, settings
from app.core.errors import InvalidInputError, ShapeMismatchError
from app.models.schemas import MelSpectrogram

logger = logging.getLogger(__name__)

MIN_REFERENCE_FRAMES = 8


def sinusoid_table(n_position: int, d_hid: int) -> torch.Tensor:
    position = torch.arange(n_position, dtype=torch.float64).unsqueeze(1)
    div = torch.pow(10000.0, 2 * (torch.arange(d_hid) // 2).double() / d_hid)
    table = position / div
    table[:, 0::2] = torch.sin(table[:, 0::2])
    table[:, 1::2] = torch.cos(table[:, 1::2])
    return table.float()


class SALN(nn.Module):
    def __init__(self, d_style: int, d_hidden: int, eps: float = 1e-5):
        super().__init__()
        self.d_hidden = d_hidden
        self.eps = eps
        self.affine = nn.Linear(d_style, 2 * d_hidden)
        nn.init.xavier_uniform_(self.affine.weight)
        # start from gain 1, bias 0
        with torch.no_grad():
            self.affine.bias[:d_hidden].fill_(1.0)
            self.affine.bias[d_hidden:].zero_()

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        mean = x.mean(dim=-1, keepdim=True)
        var = x.var(dim=-1, keepdim=True, unbiased=False)
        return (x - mean) / torch.sqrt(var + self.eps)

    def gain_bias(self, s: torch.Tensor):
        gain, bias = torch.split(self.affine(s), self.d_hidden, dim=-1)
        return gain.unsqueeze(1), bias.unsqueeze(1)

    def forward(self, x: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.d_hidden:
            raise ShapeMismatchError(f"SALN expects {self.d_hidden} features, got {x.shape[-1]}")
        gain, bias = self.gain_bias(s)
        return gain * self.normalize(x) + bias


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_head: int, dropout: float = 0.1):
        super().__init__()
        if d_model % n_head:
            raise InvalidInputError(f"d_model {d_model} is not divisible by {n_head} heads")
        self.n_head = n_head
        self.d_k = d_model // n_head
        self.w_qs = nn.Linear(d_model, d_model)
        # a key bias only shifts every logit of a query by the same amount
        self.w_ks = nn.Linear(d_model, d_model, bias=False)
        self.w_vs = nn.Linear(d_model, d_model)
        self.fc = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, key_padding_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        b, length, _ = x.shape
        q = self.w_qs(x).view(b, length, self.n_head, self.d_k).transpose(1, 2)
        k = self.w_ks(x).view(b, length, self.n_head, self.d_k).transpose(1, 2)
        v = self.w_vs(x).view(b, length, self.n_head, self.d_k).transpose(1, 2)

        attn = torch.matmul(q, k.transpose(-1, -2)) / math.sqrt(self.d_k)
        if key_padding_mask is not None:
            attn = attn.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(attn, dim=-1)
        out = torch.matmul(attn, v).transpose(1, 2).reshape(b, length, -1)
        return self.dropout(self.fc(out))


class ConvFeedForward(nn.Module):
    def __init__(self, d_in: int, d_inner: int, kernel_size: int, dropout: float = 0.1):
        super().__init__()
        self.w_1 = nn.Conv1d(d_in, d_inner, kernel_size, padding=(kernel_size - 1) // 2)
        self.w_2 = nn.Conv1d(d_inner, d_in, 1)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.w_2(F.relu(self.w_1(x.transpose(1, 2))))
        return self.dropout(out.transpose(1, 2))


class FFTBlock(nn.Module):
    # self-attention and conv feed-forward, each followed by residual + SALN
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.slf_attn = MultiHeadAttention(cfg.d_hidden, cfg.n_heads, cfg.dropout)
        self.attn_norm = SALN(cfg.d_style, cfg.d_hidden)
        self.pos_ffn = ConvFeedForward(cfg.d_hidden, cfg.ffn_inner, cfg.ffn_kernel, cfg.dropout)
        self.ffn_norm = SALN(cfg.d_style, cfg.d_hidden)

    def forward(self, x: torch.Tensor, s: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        x = self.attn_norm(x + self.slf_attn(x, mask), s)
        if mask is not None:
            x = x.masked_fill(mask.unsqueeze(-1), 0.0)
        x = self.ffn_norm(x + self.pos_ffn(x), s)
        if mask is not None:
            x = x.masked_fill(mask.unsqueeze(-1), 0.0)
        return x


class FFTStack(nn.Module):
    def __init__(self, cfg: ModelConfig, n_layers: int):
        super().__init__()
        self.register_buffer("position_enc", sinusoid_table(cfg.max_positions, cfg.d_hidden), persistent=False)
        self.layers = nn.ModuleList([FFTBlock(cfg) for _ in range(n_layers)])

    def forward(self, x: torch.Tensor, s: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        length = x.shape[1]
        if length > self.position_enc.shape[0]:
            raise InvalidInputError(f"sequence of {length} exceeds max_positions {self.position_enc.shape[0]}")
        x = x + self.position_enc[:length].to(x.dtype).unsqueeze(0)
        for layer in self.layers:
            x = layer(x, s, mask)
        return x


class TextEncoder(nn.Module):
    def __init__(self, n_symbols: int, cfg: ModelConfig):
        super().__init__()
        self.n_symbols = n_symbols
        self.embedding = nn.Embedding(n_symbols, cfg.d_hidden)
        self.stack = FFTStack(cfg, cfg.text_layers)

    def forward(self, phonemes: torch.Tensor, s: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        if phonemes.numel() and (int(phonemes.min()) < 0 or int(phonemes.max()) >= self.n_symbols):
            raise InvalidInputError(f"phoneme ids must lie in [0, {self.n_symbols})")
        return self.stack(self.embedding(phonemes), s, mask)


class MelStyleEncoder(nn.Module):
    """Variable-length mel to a fixed style vector.

    Spectral 1x1 convolutions, residual self-attention, masked temporal
    average pooling and a linear map to d_style.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        layers = []
        in_ch = cfg.n_mels
        for _ in range(cfg.style_conv_layers):
            layers += [nn.Conv1d(in_ch, cfg.d_hidden, 1), nn.Mish(), nn.Dropout(cfg.dropout)]
            in_ch = cfg.d_hidden
        self.spectral = nn.Sequential(*layers)
        self.attn = nn.ModuleList(
            [MultiHeadAttention(cfg.d_hidden, cfg.n_heads, cfg.dropout) for _ in range(cfg.style_attn_layers)]
        )
        self.attn_norms = nn.ModuleList([nn.LayerNorm(cfg.d_hidden) for _ in range(cfg.style_attn_layers)])
        self.fc = nn.Linear(cfg.d_hidden, cfg.d_style)

    def forward(self, mel: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        # mel: [B, T, n_mels]; mask marks padded frames
        x = self.spectral(mel.transpose(1, 2)).transpose(1, 2)
        for attn, norm in zip(self.attn, self.attn_norms):
            x = norm(x + attn(x, mask))
        if mask is None:
            pooled = x.mean(dim=1)
        else:
            keep = (~mask).unsqueeze(-1).to(x.dtype)
            pooled = (x * keep).sum(dim=1) / keep.sum(dim=1).clamp(min=1.0)
        return self.fc(pooled)


def trim_trailing_floor(values: np.ndarray, log_floor: float = settings.audio.log_floor) -> np.ndarray:
    """Drop trailing frames that sit entirely at the log floor."""
    floor = np.log(log_floor)
    live = np.flatnonzero(np.any(values > floor + 1e-4, axis=0))
    if live.size == 0:
        return values[:, :0]
    return values[:, : live[-1] + 1]


def encode_style(reference: MelSpectrogram, encoder: MelStyleEncoder) -> torch.Tensor:
    values = trim_trailing_floor(np.asarray(reference.values))
    if values.shape[1] < MIN_REFERENCE_FRAMES:
        raise InvalidInputError(
            f"reference must have at least {MIN_REFERENCE_FRAMES} non-silent frames, got {values.shape[1]}"
        )
    dtype = next(encoder.parameters()).dtype
    x = torch.as_tensor(np.ascontiguousarray(values.T), dtype=dtype).unsqueeze(0)
    return encoder(x)[0]


def saln(x: torch.Tensor, s: torch.Tensor, layer: SALN) -> torch.Tensor:
    if x.dim() != 2:
        raise ShapeMismatchError(f"expected an [L x d_h] matrix, got shape {tuple(x.shape)}")
    return layer(x.unsqueeze(0), s.unsqueeze(0))[0]


def encode_text(phonemes: Sequence[int], s: torch.Tensor, encoder: TextEncoder) -> torch.Tensor:
    if len(phonemes) == 0:
        raise InvalidInputError("phoneme sequence is empty")
    ids = torch.as_tensor(list(phonemes), dtype=torch.long).unsqueeze(0)
    return encoder(ids, s.unsqueeze(0))[0]
