import logging
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from app.core.config import ModelConfig
from app.core.errors import ShapeMismatchError

logger = logging.getLogger(__name__)


def _groups(channels: int) -> int:
    return math.gcd(8, channels)


class SinusoidalPosEmb(nn.Module):
    def __init__(self, dim: int, scale: float = 1000.0):
        super().__init__()
        self.dim = dim
        self.scale = scale

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / (half - 1))
        angles = self.scale * t[:, None] * freqs[None, :]
        return torch.cat([angles.sin(), angles.cos()], dim=-1)


class Block(nn.Module):
    def __init__(self, dim: int, dim_out: int):
        super().__init__()
        self.conv = nn.Conv2d(dim, dim_out, 3, padding=1)
        self.norm = nn.GroupNorm(_groups(dim_out), dim_out)
        self.act = nn.Mish()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.norm(self.conv(x)))


class ResnetBlock(nn.Module):
    def __init__(self, dim: int, dim_out: int, time_emb_dim: int):
        super().__init__()
        self.mlp = nn.Sequential(nn.Mish(), nn.Linear(time_emb_dim, dim_out))
        self.block1 = Block(dim, dim_out)
        self.block2 = Block(dim_out, dim_out)
        self.res_conv = nn.Conv2d(dim, dim_out, 1) if dim != dim_out else nn.Identity()

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        h = self.block1(x)
        h = h + self.mlp(t_emb)[:, :, None, None]
        h = self.block2(h)
        return h + self.res_conv(x)


class ScoreUNet(nn.Module):
    """U-Net over four stacked channels: x_t, mu, projected style and projected X_F."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        n_mels = cfg.n_mels
        base = cfg.unet_base
        self.n_mels = n_mels
        self.n_down = len(cfg.unet_mults) - 1

        self.style_proj = nn.Linear(cfg.d_style, n_mels)
        self.formant_proj = nn.Conv1d(n_mels, n_mels, 1)

        self.time_pos_emb = SinusoidalPosEmb(cfg.time_emb_dim)
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_emb_dim, cfg.time_emb_dim * 4),
            nn.Mish(),
            nn.Linear(cfg.time_emb_dim * 4, cfg.time_emb_dim),
        )

        dims = [4] + [base * m for m in cfg.unet_mults]
        in_out = list(zip(dims[:-1], dims[1:]))
        self.downs = nn.ModuleList()
        for idx, (dim_in, dim_out) in enumerate(in_out):
            is_last = idx >= len(in_out) - 1
            self.downs.append(
                nn.ModuleList(
                    [
                        ResnetBlock(dim_in, dim_out, cfg.time_emb_dim),
                        ResnetBlock(dim_out, dim_out, cfg.time_emb_dim),
                        nn.Conv2d(dim_out, dim_out, 3, stride=2, padding=1) if not is_last else nn.Identity(),
                    ]
                )
            )

        mid = dims[-1]
        self.mid_block1 = ResnetBlock(mid, mid, cfg.time_emb_dim)
        self.mid_block2 = ResnetBlock(mid, mid, cfg.time_emb_dim)

        self.ups = nn.ModuleList()
        for dim_in, dim_out in reversed(in_out[1:]):
            self.ups.append(
                nn.ModuleList(
                    [
                        ResnetBlock(dim_out * 2, dim_in, cfg.time_emb_dim),
                        ResnetBlock(dim_in, dim_in, cfg.time_emb_dim),
                        nn.ConvTranspose2d(dim_in, dim_in, 4, stride=2, padding=1),
                    ]
                )
            )

        self.final_block = Block(base * cfg.unet_mults[0], base * cfg.unet_mults[0])
        self.final_conv = nn.Conv2d(base * cfg.unet_mults[0], 1, 1)

    def forward(self, x: torch.Tensor, mu: torch.Tensor, style: torch.Tensor, formant: torch.Tensor,
                t: torch.Tensor) -> torch.Tensor:
        # x, mu, formant: [B x D x T]; style: [B x d_s]; t: [B]
        if x.shape != mu.shape or x.shape != formant.shape:
            raise ShapeMismatchError(
                f"x_t {tuple(x.shape)}, mu {tuple(mu.shape)} and X_F {tuple(formant.shape)} must match"
            )
        if x.shape[1] != self.n_mels:
            raise ShapeMismatchError(f"expected {self.n_mels} mel bins, got {x.shape[1]}")

        b, d, length = x.shape
        s = self.style_proj(style)[:, :, None].expand(b, d, length)
        xf = self.formant_proj(formant)
        h = torch.stack([x, mu, s, xf], dim=1)

        # both axes must survive n_down halvings
        factor = 2**self.n_down
        pad_d, pad_t = (-d) % factor, (-length) % factor
        h = F.pad(h, (0, pad_t, 0, pad_d))

        t_emb = self.time_mlp(self.time_pos_emb(t))

        hiddens = []
        for resnet1, resnet2, downsample in self.downs:
            h = resnet2(resnet1(h, t_emb), t_emb)
            hiddens.append(h)
            h = downsample(h)

        h = self.mid_block2(self.mid_block1(h, t_emb), t_emb)

        for resnet1, resnet2, upsample in self.ups:
            h = torch.cat([h, hiddens.pop()], dim=1)
            h = resnet2(resnet1(h, t_emb), t_emb)
            h = upsample(h)

        out = self.final_conv(self.final_block(h))
        return out[:, 0, :d, :length]


def estimate_score(x: torch.Tensor, t: float, mu: torch.Tensor, style: torch.Tensor, formant: torch.Tensor,
                   net: ScoreUNet) -> torch.Tensor:
    t_vec = torch.full((1,), float(t), dtype=x.dtype, device=x.device)
    return net(x.unsqueeze(0), mu.unsqueeze(0), style.unsqueeze(0), formant.unsqueeze(0), t_vec)[0]
