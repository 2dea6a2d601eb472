"""Conditional noise-prediction network and checkpoint container.

A small 3D conv encoder-decoder with skip connections predicts the injected
noise from the noisy volume, the timestep, and the low-dose conditioning
volume (concatenated as a second input channel).  The timestep enters as a
sinusoidal embedding of t/T through a two-layer MLP, then as a per-channel
bias in every resolution block.  The final conv is zero-initialized so the
untrained network predicts zero noise.

Checkpoint container "MDCK" (little-endian):
  magic "MDCK" | u32 tensor count
  per tensor: u16 name length | name utf-8 | u8 rank | u32 dims... | f32 payload
  trailer: u32 json length | json bytes (config snapshot, step count, rng digest)
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError, FormatError

MAGIC_CHECKPOINT = b"MDCK"
MAX_PARAMETERS = 1_000_000


@dataclass(frozen=True)
class DenoiserConfig:
    base_channels: int = 16
    channel_mults: tuple[int, ...] = (1, 2, 4)
    time_embed_dim: int = 64
    in_channels: int = 2
    out_channels: int = 1
    norm_groups: int = 8
    num_timesteps: int = 1000

    def __post_init__(self):
        if len(self.channel_mults) < 2:
            raise ConfigError("denoiser needs at least 2 resolution levels")
        if self.time_embed_dim % 2 != 0:
            raise ConfigError("time_embed_dim must be even")

    @property
    def levels(self) -> int:
        return len(self.channel_mults)

    def validate_patch(self, patch_size: int) -> None:
        factor = 2 ** (self.levels - 1)
        if patch_size % factor != 0 or patch_size // factor < 1:
            raise ConfigError(
                f"patch edge {patch_size} must be divisible by {factor} "
                f"for {self.levels} resolution levels"
            )

    def as_dict(self) -> dict:
        return {
            "base_channels": self.base_channels,
            "channel_mults": list(self.channel_mults),
            "time_embed_dim": self.time_embed_dim,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "norm_groups": self.norm_groups,
            "num_timesteps": self.num_timesteps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        d["channel_mults"] = tuple(d["channel_mults"])
        return cls(**d)


def sinusoidal_embedding(t_frac: torch.Tensor, dim: int, num_timesteps: int) -> torch.Tensor:
    """Sin/cos features of t/T, log-spaced angular frequencies 1..num_timesteps.

    Capping the fastest component at ~1 radian per unit timestep keeps the
    embedding locally smooth while still separating adjacent steps.
    """
    half = dim // 2
    freqs = torch.exp(
        torch.linspace(
            0.0, math.log(float(max(num_timesteps, 2))), half,
            dtype=t_frac.dtype, device=t_frac.device,
        )
    )
    args = t_frac[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class _ResBlock(nn.Module):
    """Two convs with group norm; timestep embedding enters as a channel bias."""

    def __init__(self, c_in: int, c_out: int, time_dim: int, groups: int):
        super().__init__()
        g = min(groups, c_out)
        self.conv1 = nn.Conv3d(c_in, c_out, 3, padding=1)
        self.norm1 = nn.GroupNorm(g, c_out)
        self.conv2 = nn.Conv3d(c_out, c_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(g, c_out)
        self.time_proj = nn.Linear(time_dim, c_out)
        self.act = nn.SiLU()

    def forward(self, x, temb):
        h = self.act(self.norm1(self.conv1(x)))
        h = h + self.time_proj(temb)[:, :, None, None, None]
        return self.act(self.norm2(self.conv2(h)))


class ConditionalDenoiser(nn.Module):
    """eps(x_t, t | y) with y concatenated on the channel axis."""

    def __init__(self, config: DenoiserConfig | None = None):
        super().__init__()
        self.config = config or DenoiserConfig()
        cfg = self.config
        chans = [cfg.base_channels * m for m in cfg.channel_mults]
        tdim = cfg.time_embed_dim

        self.time_mlp = nn.Sequential(
            nn.Linear(tdim, tdim), nn.SiLU(), nn.Linear(tdim, tdim)
        )
        self.encoders = nn.ModuleList()
        c_prev = cfg.in_channels
        for c in chans:
            self.encoders.append(_ResBlock(c_prev, c, tdim, cfg.norm_groups))
            c_prev = c
        self.decoders = nn.ModuleList()
        for c in reversed(chans[:-1]):
            self.decoders.append(_ResBlock(c_prev + c, c, tdim, cfg.norm_groups))
            c_prev = c
        self.out_conv = nn.Conv3d(c_prev, cfg.out_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)
        self.down = nn.AvgPool3d(2)
        self.up = nn.Upsample(scale_factor=2, mode="nearest")

        n_params = sum(p.numel() for p in self.parameters())
        if n_params >= MAX_PARAMETERS:
            raise ConfigError(f"parameter count {n_params} exceeds budget {MAX_PARAMETERS}")

    def forward(self, x_t: torch.Tensor, t, y: torch.Tensor) -> torch.Tensor:
        if x_t.shape != y.shape:
            raise ValueError(f"x_t shape {tuple(x_t.shape)} != y shape {tuple(y.shape)}")
        if not (torch.isfinite(x_t).all() and torch.isfinite(y).all()):
            raise ValueError("denoiser inputs must be finite")
        if not torch.is_tensor(t):
            t = torch.tensor([int(t)] * x_t.shape[0], device=x_t.device)
        if ((t < 1) | (t > self.config.num_timesteps)).any():
            raise ValueError(f"timesteps must lie in [1, {self.config.num_timesteps}]")

        t_frac = t.to(x_t.dtype) / self.config.num_timesteps
        temb = self.time_mlp(
            sinusoidal_embedding(t_frac, self.config.time_embed_dim, self.config.num_timesteps)
        )

        h = torch.cat([x_t, y], dim=1)
        skips = []
        for i, block in enumerate(self.encoders):
            if i > 0:
                h = self.down(h)
            h = block(h, temb)
            skips.append(h)
        for block, skip in zip(self.decoders, reversed(skips[:-1])):
            h = block(torch.cat([self.up(h), skip], dim=1), temb)
        return self.out_conv(h)


def gradients(model: nn.Module, loss_fn) -> dict[str, torch.Tensor]:
    """Gradient of a scalar loss closure w.r.t. every named parameter."""
    loss = loss_fn(model)
    if not torch.isfinite(loss):
        raise ValueError(f"loss is non-finite: {loss.item()}")
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return {
        n: (g if g is not None else torch.zeros_like(p))
        for n, p, g in zip(names, params, grads)
    }


@dataclass(frozen=True)
class Checkpoint:
    params: dict[str, np.ndarray] = field(repr=False)
    config: dict = field(repr=False)
    step_count: int = 0
    rng_digest: str = ""

    def __post_init__(self):
        for name, arr in self.params.items():
            if not np.isfinite(arr).all():
                raise ValueError(f"checkpoint parameter {name!r} has non-finite values")


def checkpoint_from_model(model: ConditionalDenoiser, config: dict, step_count: int,
                          rng_digest: str = "") -> Checkpoint:
    params = {
        name: tensor.detach().cpu().numpy().astype(np.float32)
        for name, tensor in model.state_dict().items()
    }
    return Checkpoint(params=params, config=config, step_count=step_count, rng_digest=rng_digest)


def model_from_checkpoint(ckpt: Checkpoint) -> ConditionalDenoiser:
    cfg = DenoiserConfig.from_dict(ckpt.config["denoiser"])
    model = ConditionalDenoiser(cfg)
    state = {name: torch.from_numpy(arr.copy()) for name, arr in ckpt.params.items()}
    model.load_state_dict(state)
    return model


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    out = bytearray(MAGIC_CHECKPOINT)
    out += struct.pack("<I", len(ckpt.params))
    for name, arr in ckpt.params.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        out += struct.pack("<H", len(encoded))
        out += encoded
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes(order="C")
    trailer = json.dumps(
        {"config": ckpt.config, "step_count": ckpt.step_count, "rng_digest": ckpt.rng_digest},
        sort_keys=True,
    ).encode("utf-8")
    out += struct.pack("<I", len(trailer))
    out += trailer
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path, expected_config: dict | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != MAGIC_CHECKPOINT:
        raise FormatError(f"{path}: bad checkpoint magic")
    (count,) = struct.unpack_from("<I", raw, 4)
    offset = 8
    params: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            name = raw[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", raw, offset)
            offset += 1
            shape = struct.unpack_from(f"<{rank}I", raw, offset)
            offset += 4 * rank
            n_elem = int(np.prod(shape)) if rank else 1
            payload = raw[offset : offset + 4 * n_elem]
            if len(payload) != 4 * n_elem:
                raise FormatError(f"{path}: truncated tensor payload for {name!r}")
            offset += 4 * n_elem
            if name in params:
                raise FormatError(f"{path}: duplicate tensor name {name!r}")
            params[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
        (json_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        trailer = raw[offset : offset + json_len]
        if len(trailer) != json_len:
            raise FormatError(f"{path}: truncated config trailer")
        meta = json.loads(trailer.decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed checkpoint ({exc})") from exc
    for name, arr in params.items():
        if not np.isfinite(arr).all():
            raise FormatError(f"{path}: parameter {name!r} has non-finite values")
    ckpt = Checkpoint(
        params=params,
        config=meta["config"],
        step_count=meta["step_count"],
        rng_digest=meta.get("rng_digest", ""),
    )
    if expected_config is not None:
        check_config_compatible(ckpt.config, expected_config)
    return ckpt


_COMPAT_KEYS = (
    ("schedule", "T"),
    ("schedule", "beta_start"),
    ("schedule", "beta_end"),
    ("train", "anchor_doses"),
    ("train", "patch_size"),
)


def check_config_compatible(ckpt_config: dict, expected: dict) -> None:
    """Schedule, anchor set, and patch size must match the loading run."""
    for section, key in _COMPAT_KEYS:
        have = ckpt_config.get(section, {}).get(key)
        want = expected.get(section, {}).get(key)
        if want is not None and have != want:
            raise ConfigError(
                f"checkpoint {section}.{key}={have!r} incompatible with configured {want!r}"
            )


def rng_digest(generator: torch.Generator) -> str:
    return hashlib.sha256(generator.get_state().numpy().tobytes()).hexdigest()
