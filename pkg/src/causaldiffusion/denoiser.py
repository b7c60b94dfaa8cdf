"""The noise prediction network.

Every scalar of the (time x feature) grid is lifted to ``embed_dim`` channels
and processed by residual blocks of transformer encoder cells whose attention
is Relational Self-Attention (RSA): a relational kernel between L2-normalized
queries and convolved keys, applied to convolved values.
"""

from __future__ import annotations

import logging
import math

import torch
from torch import nn

from causaldiffusion.config import ConfigurationError

logger = logging.getLogger("causaldiffusion")


class NumericError(ArithmeticError):
    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


def l2norm(x, dim, eps=1e-12):
    return x / x.norm(dim=dim, keepdim=True).clamp_min(eps)


class TimeSeriesAttention(nn.Module):
    """RSA over the (T, F) grid of a (B, T, F, C) tensor.

    Per head, with q, k, v of shape (c, N) over the N = T * F grid positions:

        kernel[i, j] = sum_c q[c, i] * H1(k)[c, j]
        out[c, i]    = sum_j H2(v)[c, j] * kernel[i, j]

    The forward pass uses the associativity of these two contractions and
    never builds the N x N kernel; ``reference_rsa`` builds it explicitly.
    """

    def __init__(self, d_in, d_out, num_heads=8, kernel_size=(3, 7)):
        super().__init__()
        if d_out % num_heads:
            raise ConfigurationError(
                f"d_out {d_out} is not divisible by {num_heads} heads"
            )
        self.d_out = d_out
        self.num_heads = num_heads
        self.projection_linear = nn.Sequential(
            nn.Linear(d_in, 3 * d_out, bias=False),
            nn.SiLU(),
            nn.Linear(3 * d_out, 3 * d_out, bias=False),
        )
        padding = (kernel_size[0] // 2, kernel_size[1] // 2)
        # groups=num_heads gives every head its own channel-preserving conv
        self.H1 = nn.Conv2d(
            d_out, d_out, kernel_size, padding=padding, groups=num_heads
        )
        self.H2 = nn.Conv2d(
            d_out, d_out, kernel_size, padding=padding, groups=num_heads
        )

    def split_heads(self, x):
        b, _, t, f = x.shape
        return x.reshape(b, self.num_heads, self.d_out // self.num_heads, t, f)

    def project(self, x):
        """Projected, head-split and normalized q, k, v as (B, C, T, F)"""
        b, t, f, _ = x.shape
        x_proj = self.projection_linear(x).permute(0, 3, 1, 2)
        q, k, v = torch.split(x_proj, self.d_out, dim=1)
        q, k, v = (
            l2norm(self.split_heads(y), dim=2).reshape(b, self.d_out, t, f)
            for y in (q, k, v)
        )
        return q, k, v

    def forward(self, x):
        b, t, f, _ = x.shape
        q, k, v = self.project(x)
        heads = self.num_heads
        q = q.reshape(b, heads, -1, t * f)
        k_rel = self.H1(k).reshape(b, heads, -1, t * f)
        v_app = self.H2(v).reshape(b, heads, -1, t * f)

        context = torch.einsum("bhcj,bhdj->bhcd", v_app, k_rel)
        feature = torch.einsum("bhcd,bhdi->bhci", context, q)
        return feature.reshape(b, self.d_out, t, f).permute(0, 2, 3, 1)


def reference_rsa(attention, x):
    """Explicit-kernel RSA, loop by loop. Only meant for tiny shapes."""
    b, t, f, _ = x.shape
    q, k, v = attention.project(x)
    k_rel = attention.H1(k)
    v_app = attention.H2(v)
    dh = attention.d_out // attention.num_heads
    n = t * f
    out = torch.zeros(b, attention.d_out, n, dtype=x.dtype)

    for bi in range(b):
        for h in range(attention.num_heads):
            chans = slice(h * dh, (h + 1) * dh)
            qh = q[bi, chans].reshape(dh, n)
            kh = k_rel[bi, chans].reshape(dh, n)
            vh = v_app[bi, chans].reshape(dh, n)
            kernel = torch.zeros(n, n, dtype=x.dtype)
            for i in range(n):
                for j in range(n):
                    kernel[i, j] = (qh[:, i] * kh[:, j]).sum()
            for c in range(dh):
                for i in range(n):
                    out[bi, h * dh + c, i] = (vh[c, :] * kernel[i, :]).sum()

    return out.reshape(b, attention.d_out, t, f).permute(0, 2, 3, 1)


class FeedForwardMixer(nn.Module):
    """Per-position two layer network, the simple stand-in for RSA"""

    def __init__(self, d_in, d_out):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d_in, d_out), nn.SiLU(), nn.Linear(d_out, d_out)
        )

    def forward(self, x):
        return self.net(x)


class TransformerEncoderCell(nn.Module):
    def __init__(
        self,
        embed_dim,
        num_heads,
        kernel_size,
        ff_dim,
        dropout=0.1,
        backbone="rsa",
    ):
        super().__init__()
        if backbone == "rsa":
            self.attention = TimeSeriesAttention(
                embed_dim, embed_dim, num_heads, kernel_size
            )
        else:
            self.attention = FeedForwardMixer(embed_dim, embed_dim)
        self.ff_layer = nn.Sequential(
            nn.Linear(embed_dim, ff_dim), nn.ReLU(), nn.Linear(ff_dim, embed_dim)
        )
        self.dropout = nn.Dropout(dropout)
        # One norm for both sublayers.
        self.layer_norm = nn.LayerNorm(embed_dim)

    def forward(self, x):
        attn_out = self.attention(x)
        x = self.layer_norm(x + self.dropout(attn_out))
        ff_out = self.ff_layer(x)
        x = self.layer_norm(x + self.dropout(ff_out))
        return x


class TransformerEncoder(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.layers = nn.ModuleList(
            [
                TransformerEncoderCell(
                    config.embed_dim,
                    config.num_heads,
                    tuple(config.kernel_size),
                    config.ff_dim,
                    config.dropout,
                    config.backbone,
                )
                for _ in range(config.encoder_cells)
            ]
        )
        self.final_norm = nn.LayerNorm(config.embed_dim)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return self.final_norm(x)


def init_weights(module):
    if isinstance(module, (nn.Linear, nn.Conv2d)):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.Embedding):
        nn.init.trunc_normal_(module.weight, std=0.02)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


class Denoiser(nn.Module):
    """f_theta(z_k, mask, k): predicts the noise in every (t, f) position.

    Residual topology: each block is a TransformerEncoder whose output is
    added back to the block input and also summed into a skip accumulator;
    the head reads the accumulated skips.
    """

    def __init__(self, config):
        super().__init__()
        config.validate()
        self.config = config
        e = config.embed_dim
        self.value_projection = nn.Linear(1, e)
        self.time_embedding = nn.Embedding(config.max_len, e)
        self.feature_embedding = nn.Embedding(config.num_features, e)
        self.step_embedding = nn.Embedding(config.diffusion_steps + 1, e)
        self.mask_embedding = nn.Embedding(2, e)
        self.blocks = nn.ModuleList(
            [TransformerEncoder(config) for _ in range(config.residual_layers)]
        )
        self.output_projection = nn.Linear(e, 1)
        self.apply(init_weights)
        logger.info(
            f"Denoiser ({config.backbone}) with {count_parameters(self)} parameters."
        )

    def embed_inputs(self, z, mask, k):
        b, t, f = z.shape
        if mask.shape != z.shape:
            raise ValueError(f"Mask shape {tuple(mask.shape)} != {tuple(z.shape)}")
        if t > self.config.max_len or f != self.config.num_features:
            raise ValueError(
                f"Input grid {t}x{f} does not fit max_len {self.config.max_len} "
                f"and {self.config.num_features} features"
            )
        k = torch.as_tensor(k, device=z.device).long().reshape(-1).expand(b)
        if k.min() < 0 or k.max() > self.config.diffusion_steps:
            raise IndexError(f"Diffusion step outside [0, {self.config.diffusion_steps}]")

        device = z.device
        x = self.value_projection(z.unsqueeze(-1))
        x = x + self.time_embedding(torch.arange(t, device=device))[None, :, None]
        x = x + self.feature_embedding(torch.arange(f, device=device))[None, None]
        x = x + self.step_embedding(k)[:, None, None]
        x = x + self.mask_embedding(mask.long())
        return x

    def forward(self, z, mask, k):
        x = self.embed_inputs(z, mask, k)
        skip = torch.zeros_like(x)
        for layer, block in enumerate(self.blocks):
            out = block(x)
            if not torch.isfinite(out).all():
                raise NumericError(
                    f"Non-finite activations in residual block {layer}", layer=layer
                )
            x = x + out
            skip = skip + out
        skip = skip / math.sqrt(len(self.blocks))
        return self.output_projection(skip).squeeze(-1)


def count_parameters(model):
    return sum(p.numel() for p in model.parameters())


def make_optimizer(model, lr):
    return torch.optim.Adam(model.parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8)


def adam_step(optimizer):
    """One Adam update; refuses non-finite gradients.

    Global-norm clipping is the caller's job.
    """
    for group in optimizer.param_groups:
        for param in group["params"]:
            if param.grad is not None and not torch.isfinite(param.grad).all():
                raise NumericError("Non-finite gradient, update rejected")
    optimizer.step()
