"""Noise-prediction network with hookable self- and cross-attention.

Every :class:`AttentionLayer` consults the owning denoiser's attention
control.  In ``capture`` mode it records its Q/K/V per visited timestep into
an :class:`AttentionTrace`; in ``inject`` mode it replaces K/V with a style
trace and blends the query with a content trace::

    Q_blend = gamma * Q_content + (1 - gamma) * Q_current
    out     = softmax(Q_blend K_style^T / sqrt(d)) V_style
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .conditioning import D_COND
from .errors import ConfigurationError, InjectionError, ParameterError, ShapeError

MODES = ("normal", "capture", "inject")


def attention(Q, K, V, mask=None):
    """softmax(Q K^T / sqrt(d)) V over the last two axes.

    Accepts tensors or arrays; arrays come back as arrays.  ``mask`` marks
    valid keys with True and broadcasts against the (..., n, m) logits.
    """
    as_numpy = not isinstance(Q, torch.Tensor)
    if as_numpy:
        Q, K, V = (torch.as_tensor(np.asarray(a, dtype=np.float64)) for a in (Q, K, V))
    d = Q.shape[-1]
    if K.shape[-1] != d:
        raise ShapeError(f"query width {d} != key width {K.shape[-1]}")
    if K.shape[-2] != V.shape[-2]:
        raise ShapeError(f"{K.shape[-2]} keys but {V.shape[-2]} values")
    logits = Q @ K.transpose(-1, -2) / math.sqrt(d)
    if mask is not None:
        logits = logits.masked_fill(~mask, float("-inf"))
    out = torch.softmax(logits, dim=-1) @ V
    return out.numpy() if as_numpy else out


class AttentionTrace:
    """(layer_id, timestep) -> {"Q", "K", "V", ...} captured during a run."""

    def __init__(self, run_tag: str = "content"):
        self.run_tag = run_tag
        self.entries: dict[tuple[str, int], dict[str, torch.Tensor]] = {}

    def record(self, layer_id: str, t: int, **arrays):
        key = (layer_id, int(t))
        if key in self.entries:
            raise ConfigurationError(f"trace already holds an entry for layer {layer_id!r} at t={t}")
        self.entries[key] = {k: v.detach().clone() for k, v in arrays.items()}

    def get(self, layer_id: str, t: int) -> dict[str, torch.Tensor]:
        try:
            return self.entries[(layer_id, int(t))]
        except KeyError:
            raise InjectionError(layer_id, t) from None

    def __contains__(self, key):
        return (key[0], int(key[1])) in self.entries

    def __len__(self):
        return len(self.entries)

    def layers(self) -> set[str]:
        return {k[0] for k in self.entries}

    def timesteps(self) -> set[int]:
        return {k[1] for k in self.entries}

    def covers(self, layers, timesteps) -> bool:
        return all((l, int(t)) in self.entries for l in layers for t in timesteps)


@dataclass
class AttentionMode:
    mode: str = "normal"
    blend_gamma: float = 0.5
    content_trace: AttentionTrace | None = None
    style_trace: AttentionTrace | None = None
    target_layers: set | None = None
    timesteps: set | None = None  # inject only within this subset; None = all
    record: AttentionTrace | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown attention mode {self.mode!r}")
        if not 0.0 <= float(self.blend_gamma) <= 1.0:
            raise ConfigurationError("blend_gamma must lie in [0, 1]")
        if self.mode == "inject" and (self.content_trace is None or self.style_trace is None):
            raise ConfigurationError("inject mode needs both content and style traces")
        if self.target_layers is not None:
            self.target_layers = set(self.target_layers)


@dataclass
class DenoiserConfig:
    latent_channels: int = 4
    widths: tuple = (32, 64, 128)
    d_cond: int = D_COND
    heads: int = 1
    time_dim: int = 64
    groups: int = 8

    def to_dict(self) -> dict:
        return {
            "latent_channels": self.latent_channels,
            "widths": list(self.widths),
            "d_cond": self.d_cond,
            "heads": self.heads,
            "time_dim": self.time_dim,
            "groups": self.groups,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        d["widths"] = tuple(d.get("widths", (32, 64, 128)))
        return cls(**d)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class _AttentionControl:
    """Per-denoiser mutable state read by every attention layer."""

    def __init__(self):
        self.mode = AttentionMode()
        self.trace: AttentionTrace | None = None
        self.t: int | None = None


class AttentionLayer(nn.Module):
    """Single attention block with residual output.

    Self-attention projects K/V from the same feature map as Q; cross
    attention projects them from the conditioning sequence.
    """

    def __init__(self, layer_id: str, channels: int, kind: str, d_cond: int, heads: int = 1, groups: int = 8):
        super().__init__()
        if kind not in ("self", "cross"):
            raise ConfigurationError(f"attention kind must be self or cross, got {kind!r}")
        if channels % heads:
            raise ConfigurationError("channels must be divisible by heads")
        self.layer_id = layer_id
        self.kind = kind
        self.d = channels
        self.heads = heads
        self.norm = nn.GroupNorm(min(groups, channels), channels)
        ctx_dim = channels if kind == "self" else d_cond
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(ctx_dim, channels, bias=False)
        self.to_v = nn.Linear(ctx_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)
        self._control: _AttentionControl | None = None

    def projection(self, name: str) -> nn.Module:
        return getattr(self, {"Q": "to_q", "K": "to_k", "V": "to_v"}[name])

    def _split(self, x):
        if self.heads == 1:
            return x
        b, n, _ = x.shape
        return x.reshape(b, n, self.heads, self.d // self.heads).transpose(1, 2)

    def _merge(self, x):
        if self.heads == 1:
            return x
        b, h, n, dh = x.shape
        return x.transpose(1, 2).reshape(b, n, h * dh)

    def forward(self, x, context=None, context_mask=None):
        b, c, hh, ww = x.shape
        phi = self.norm(x).flatten(2).transpose(1, 2)  # (B, n, C)
        psi = phi if self.kind == "self" else context
        q, k, v = self.to_q(phi), self.to_k(psi), self.to_v(psi)
        mask = None
        if self.kind == "cross" and context_mask is not None:
            mask = context_mask[:, None, :]
            if self.heads > 1:
                mask = mask[:, None]

        ctl = self._control
        mode = ctl.mode if ctl is not None else None
        targeted = mode is not None and mode.target_layers is not None and self.layer_id in mode.target_layers
        if mode is not None and mode.mode == "capture" and targeted:
            ctl.trace.record(self.layer_id, ctl.t, Q=q, K=k, V=v)
        elif mode is not None and mode.mode == "inject" and targeted and (
            mode.timesteps is None or ctl.t in mode.timesteps
        ):
            q_c = mode.content_trace.get(self.layer_id, ctl.t)["Q"]
            style = mode.style_trace.get(self.layer_id, ctl.t)
            if q_c.shape != q.shape:
                raise ShapeError(f"content query {tuple(q_c.shape)} does not match current {tuple(q.shape)}")
            q_stylized = q
            q = blend_queries(q_c, q_stylized, mode.blend_gamma)
            k, v = style["K"], style["V"]
            if mode.record is not None:
                mode.record.record(self.layer_id, ctl.t, Q=q, Q_stylized=q_stylized, K=k, V=v)
            if self.kind == "cross":
                mask = None

        out = self._merge(attention(self._split(q), self._split(k), self._split(v), mask))
        out = self.to_out(out)
        return x + out.transpose(1, 2).reshape(b, c, hh, ww)


def blend_queries(q_content, q_stylized, gamma: float):
    """``gamma * q_content + (1 - gamma) * q_stylized``; exact at both endpoints."""
    if tuple(q_content.shape) != tuple(q_stylized.shape):
        raise ShapeError(f"query shapes differ: {tuple(q_content.shape)} vs {tuple(q_stylized.shape)}")
    gamma = float(gamma)
    if not 0.0 <= gamma <= 1.0:
        raise ParameterError("gamma must lie in [0, 1]")
    if gamma == 1.0:
        return q_content.clone() if isinstance(q_content, torch.Tensor) else np.array(q_content, copy=True)
    if gamma == 0.0:
        return q_stylized.clone() if isinstance(q_stylized, torch.Tensor) else np.array(q_stylized, copy=True)
    return gamma * q_content + (1.0 - gamma) * q_stylized


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, time_dim: int, groups: int = 8):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(time_dim, cout)
        self.norm2 = nn.GroupNorm(min(groups, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Denoiser(nn.Module):
    """Three-level encoder/decoder predicting the added noise.

    Levels 2 and 3 (the two coarsest) each carry one self-attention and one
    cross-attention block.
    """

    def __init__(self, config: DenoiserConfig | None = None):
        super().__init__()
        cfg = config or DenoiserConfig()
        self.config = cfg
        w1, w2, w3 = cfg.widths
        td, g = cfg.time_dim, cfg.groups
        self.time_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))
        self.conv_in = nn.Conv2d(cfg.latent_channels, w1, 3, padding=1)
        self.down1 = ResBlock(w1, w1, td, g)
        self.pool1 = nn.Conv2d(w1, w1, 3, stride=2, padding=1)
        self.down2 = ResBlock(w1, w2, td, g)
        self.pool2 = nn.Conv2d(w2, w2, 3, stride=2, padding=1)
        self.mid = ResBlock(w2, w3, td, g)
        self.attn = nn.ModuleList([
            AttentionLayer("level2.self", w2, "self", cfg.d_cond, cfg.heads, g),
            AttentionLayer("level2.cross", w2, "cross", cfg.d_cond, cfg.heads, g),
            AttentionLayer("level3.self", w3, "self", cfg.d_cond, cfg.heads, g),
            AttentionLayer("level3.cross", w3, "cross", cfg.d_cond, cfg.heads, g),
        ])
        self.up2 = ResBlock(w3 + w2, w2, td, g)
        self.up1 = ResBlock(w2 + w1, w1, td, g)
        self.norm_out = nn.GroupNorm(min(g, w1), w1)
        self.conv_out = nn.Conv2d(w1, cfg.latent_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

        self.control = _AttentionControl()
        for layer in self.attn:
            layer._control = self.control

    # -- attention bookkeeping

    @property
    def attention_layers(self) -> dict[str, AttentionLayer]:
        return {layer.layer_id: layer for layer in self.attn}

    @property
    def self_attention_ids(self) -> list[str]:
        return [l.layer_id for l in self.attn if l.kind == "self"]

    def set_attention_mode(self, mode: AttentionMode, trace: AttentionTrace | None = None):
        known = set(self.attention_layers)
        if mode.target_layers is None:
            mode.target_layers = set(self.self_attention_ids)
        else:
            unknown = set(mode.target_layers) - known
            if unknown:
                raise ConfigurationError(f"unknown attention layer ids: {sorted(unknown)}")
        if mode.mode == "capture":
            trace = trace if trace is not None else AttentionTrace()
            self.control.trace = trace
        else:
            self.control.trace = None
        if mode.mode == "inject":
            layers = mode.target_layers
            for tr, name in ((mode.content_trace, "content"), (mode.style_trace, "style")):
                missing = set(layers) - tr.layers()
                if missing:
                    raise ConfigurationError(f"{name} trace lacks layers {sorted(missing)}")
        self.control.mode = mode
        return self.control.trace

    @property
    def attention_mode(self) -> AttentionMode:
        return self.control.mode

    # -- forward

    def _timesteps(self, t, batch: int) -> torch.Tensor:
        if isinstance(t, torch.Tensor) and t.ndim > 0:
            if t.shape[0] != batch:
                raise ShapeError("one timestep per batch element required")
            return t.long()
        return torch.full((batch,), int(t), dtype=torch.long)

    def forward(self, z_t, t, cond=None, cond_mask=None):
        cfg = self.config
        if z_t.ndim != 4 or z_t.shape[1] != cfg.latent_channels:
            raise ShapeError(f"expected (B, {cfg.latent_channels}, h, w) latents, got {tuple(z_t.shape)}")
        if z_t.shape[2] % 4 or z_t.shape[3] % 4:
            raise ShapeError("latent height and width must be divisible by 4")
        b = z_t.shape[0]
        steps = self._timesteps(t, b)
        if self.control.mode.mode != "normal":
            if not torch.all(steps == steps[0]):
                raise ParameterError("capture/inject runs need one shared timestep per call")
            self.control.t = int(steps[0])
        dtype = self.conv_in.weight.dtype
        if cond is None:
            cond = torch.zeros(b, 1, cfg.d_cond, dtype=dtype)
            cond_mask = None
        if cond.ndim != 3 or cond.shape[-1] != cfg.d_cond:
            raise ShapeError(f"conditioning must be (B, s, {cfg.d_cond}), got {tuple(cond.shape)}")
        if cond.shape[0] == 1 and b > 1:
            cond = cond.expand(b, -1, -1)
            if cond_mask is not None:
                cond_mask = cond_mask.expand(b, -1)
        cond = cond.to(dtype)

        temb = self.time_mlp(timestep_embedding(steps, cfg.time_dim).to(dtype))
        h1 = self.down1(self.conv_in(z_t.to(dtype)), temb)
        h2 = self.down2(self.pool1(h1), temb)
        h2 = self.attn[0](h2)
        h2 = self.attn[1](h2, cond, cond_mask)
        h3 = self.mid(self.pool2(h2), temb)
        h3 = self.attn[2](h3)
        h3 = self.attn[3](h3, cond, cond_mask)
        u = F.interpolate(h3, scale_factor=2, mode="nearest")
        u = self.up2(torch.cat([u, h2], dim=1), temb)
        u = F.interpolate(u, scale_factor=2, mode="nearest")
        u = self.up1(torch.cat([u, h1], dim=1), temb)
        return self.conv_out(F.silu(self.norm_out(u)))

    def predict_noise(self, z_t, t, cond=None, cond_mask=None):
        return self(z_t, t, cond, cond_mask)


def set_attention_mode(denoiser: Denoiser, mode: AttentionMode, trace: AttentionTrace | None = None):
    return denoiser.set_attention_mode(mode, trace)


def predict_noise(denoiser: Denoiser, z_t, t, cond=None, cond_mask=None):
    return denoiser.predict_noise(z_t, t, cond, cond_mask)
