"""Hierarchical windowed-attention encoder/decoder mapping two kV views to a CT volume.

Token grids are kept channel-last, ``(B, H, W, C)``, where ``H`` runs along
the detector ``u`` axis (A-P for the first view) and ``W`` along S-I.  The
output volume is ``(B, D, H*q, W*q)`` in (R-L, A-P, S-I) order.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from kv2ct.errors import ConfigError, ShapeError


@dataclass(frozen=True)
class ModelConfig:
    input_hw: tuple = (80, 80)
    in_channels: int = 2
    patch_size: int = 2
    embed_dim: int = 48
    encoder_depths: tuple = (2, 2)
    decoder_depths: tuple = (2, 2)
    # int, or one entry per resolution level (level k has dim embed_dim * 2**k)
    num_heads: int | tuple = 4
    window_size: int = 5
    mlp_ratio: float = 4.0
    out_depth: int = 32
    # int, or (along H, along W) for non-square voxel heads
    out_patch: int | tuple = 1
    abs_pos_embed: bool = True
    model_tag: str = "primary"

    def __post_init__(self):
        for name in ("input_hw", "encoder_depths", "decoder_depths"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if isinstance(self.num_heads, (list, tuple)):
            object.__setattr__(self, "num_heads", tuple(int(h) for h in self.num_heads))
        if isinstance(self.out_patch, (list, tuple)):
            object.__setattr__(self, "out_patch", tuple(int(q) for q in self.out_patch))
        self.validate()

    @property
    def levels(self):
        return len(self.encoder_depths)

    @property
    def grid(self):
        return (self.input_hw[0] // self.patch_size, self.input_hw[1] // self.patch_size)

    @property
    def out_patch_hw(self):
        q = self.out_patch
        return q if isinstance(q, tuple) else (q, q)

    @property
    def output_dims(self):
        g, (qh, qw) = self.grid, self.out_patch_hw
        return (self.out_depth, g[0] * qh, g[1] * qw)

    def heads(self, level):
        if isinstance(self.num_heads, tuple):
            return self.num_heads[level]
        return self.num_heads

    def dim(self, level):
        return self.embed_dim * 2 ** level

    def hidden(self, level):
        return int(self.mlp_ratio * self.dim(level))

    def validate(self):
        p, w = self.patch_size, self.window_size
        if len(self.input_hw) != 2 or any(n % p for n in self.input_hw):
            raise ConfigError(f"input_hw {self.input_hw} is not divisible by patch size {p}")
        if len(self.encoder_depths) != len(self.decoder_depths):
            raise ConfigError("encoder and decoder need the same number of stages (merge/unmerge symmetry)")
        if isinstance(self.num_heads, tuple) and len(self.num_heads) < self.levels + 1:
            raise ConfigError(f"num_heads needs {self.levels + 1} entries, one per resolution level")
        for level in range(self.levels + 1):
            g = [n // 2 ** level for n in self.grid]
            if any(n * 2 ** level != m for n, m in zip(g, self.grid)):
                raise ConfigError(f"token grid {self.grid} cannot be halved {level} times")
            if any(n % w for n in g):
                raise ConfigError(f"token grid {tuple(g)} at level {level} is not divisible by window {w}")
            if self.dim(level) % self.heads(level):
                raise ConfigError(f"dim {self.dim(level)} is not divisible by {self.heads(level)} heads")
        # out_depth 0 is a placeholder resolved from the crop region before building
        if min(self.out_patch_hw) < 1 or self.out_depth < 0:
            raise ConfigError("out_patch must be positive and out_depth non-negative")
        if self.embed_dim % 2:
            raise ConfigError("embed_dim must be even for unmerging")

    def param_count(self):
        """Number of learnable scalars implied by this configuration."""
        d, p, c_in = self.embed_dim, self.patch_size, self.in_channels
        q2d = self.out_patch_hw[0] * self.out_patch_hw[1] * self.out_depth
        n = c_in * p * p * d + d
        if self.abs_pos_embed:
            n += self.grid[0] * self.grid[1] * d

        def block(level):
            c, h = self.dim(level), self.hidden(level)
            return 4 * c + (3 * c * c + 3 * c) + (c * c + c) + (c * h + h) + (h * c + c)

        for level, depth in enumerate(self.encoder_depths):
            c = self.dim(level)
            n += depth * block(level) + (4 * c * 2 * c + 2 * c)
        for j, depth in enumerate(self.decoder_depths):
            level = self.levels - j
            c = self.dim(level)
            n += depth * block(level) + (c * 2 * c + 2 * c)
        return n + d * q2d + q2d

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


def window_partition(x, w):
    """(B, H, W, C) -> (B * nW, w*w, C) with windows in row-major order."""
    b, h, wd, c = x.shape
    x = x.reshape(b, h // w, w, wd // w, w, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, w * w, c)


def window_merge(xw, w, b, h, wd):
    c = xw.shape[-1]
    x = xw.reshape(b, h // w, wd // w, w, w, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h, wd, c)


def attention(q, k, v):
    """softmax(q k^T / sqrt(d_k)) v over the last two axes."""
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    return scores.softmax(dim=-1) @ v


def w_mha(x, qkv_weight, qkv_bias, proj_weight, proj_bias, window, heads):
    """Multi-head self-attention restricted to non-overlapping ``window`` x ``window`` tiles."""
    b, h, wd, c = x.shape
    if c % heads:
        raise ConfigError(f"token dim {c} is not divisible by {heads} heads")
    if h % window or wd % window:
        raise ShapeError(f"token grid {(h, wd)} is not divisible by window {window}")
    xw = window_partition(x, window)
    n, t, _ = xw.shape
    qkv = F.linear(xw, qkv_weight, qkv_bias).reshape(n, t, 3, heads, c // heads).permute(2, 0, 3, 1, 4)
    out = attention(qkv[0], qkv[1], qkv[2]).transpose(1, 2).reshape(n, t, c)
    out = F.linear(out, proj_weight, proj_bias)
    return window_merge(out, window, b, h, wd)


class WindowAttention(nn.Module):
    def __init__(self, dim, heads, window):
        super().__init__()
        self.heads = heads
        self.window = window
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        return w_mha(x, self.qkv.weight, self.qkv.bias, self.proj.weight, self.proj.bias,
                     self.window, self.heads)


class Block(nn.Module):
    """Pre-norm transformer block with windowed attention."""

    def __init__(self, dim, heads, window, hidden):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class PatchMerge(nn.Module):
    """Concatenate 2x2 neighbouring tokens (4C) and reduce to 2C."""

    def __init__(self, dim):
        super().__init__()
        self.reduction = nn.Linear(4 * dim, 2 * dim)

    def forward(self, x):
        b, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ConfigError(f"cannot merge an odd token grid {(h, w)}")
        x = torch.cat([x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]], dim=-1)
        return self.reduction(x)


class PatchUnmerge(nn.Module):
    """Expand each C-dim token into a 2x2 block of C/2-dim tokens (inverse layout of PatchMerge)."""

    def __init__(self, dim):
        super().__init__()
        self.expand = nn.Linear(dim, 2 * dim)

    def forward(self, x):
        b, h, w, c = x.shape
        x = self.expand(x).reshape(b, h, w, 2, 2, c // 2)  # (col offset, row offset)
        return x.permute(0, 1, 4, 2, 3, 5).reshape(b, 2 * h, 2 * w, c // 2)


class Stage(nn.Module):
    def __init__(self, depth, dim, heads, window, hidden, resample):
        super().__init__()
        self.blocks = nn.ModuleList([Block(dim, heads, window, hidden) for _ in range(depth)])
        self.resample = resample

    def forward(self, x):
        for blk in self.blocks:
            x = blk(x)
        return self.resample(x)


class Kv2CTNet(nn.Module):
    """Patch embedding, encoder stages with merging, decoder stages with unmerging, voxel head."""

    def __init__(self, cfg):
        super().__init__()
        if cfg.out_depth < 1:
            raise ConfigError("out_depth is unresolved (0); derive it from the crop region first")
        self.cfg = cfg
        d, p = cfg.embed_dim, cfg.patch_size
        self.patch_embed = nn.Conv2d(cfg.in_channels, d, kernel_size=p, stride=p)
        if cfg.abs_pos_embed:
            self.pos_embed = nn.Parameter(torch.zeros(1, *cfg.grid, d))
        else:
            self.register_parameter("pos_embed", None)
        w = cfg.window_size
        self.encoder = nn.ModuleList(
            Stage(depth, cfg.dim(k), cfg.heads(k), w, cfg.hidden(k), PatchMerge(cfg.dim(k)))
            for k, depth in enumerate(cfg.encoder_depths))
        self.decoder = nn.ModuleList(
            Stage(depth, cfg.dim(cfg.levels - j), cfg.heads(cfg.levels - j), w,
                  cfg.hidden(cfg.levels - j), PatchUnmerge(cfg.dim(cfg.levels - j)))
            for j, depth in enumerate(cfg.decoder_depths))
        qh, qw = cfg.out_patch_hw
        self.head = nn.Linear(d, qh * qw * cfg.out_depth)
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Conv2d)):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        if self.pos_embed is not None:
            nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def embed(self, x):
        if tuple(x.shape[-2:]) != self.cfg.input_hw or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"input {tuple(x.shape[1:])} does not match "
                             f"({self.cfg.in_channels}, *{self.cfg.input_hw})")
        t = self.patch_embed(x).permute(0, 2, 3, 1)
        if self.pos_embed is not None:
            t = t + self.pos_embed
        return t

    def features(self, x):
        t = self.embed(x)
        for stage in self.encoder:
            t = stage(t)
        for stage in self.decoder:
            t = stage(t)
        return t

    def forward(self, x):
        """(B, C, H, W) kV stack -> (B, D, H/p*q, W/p*q) volume in normalised units."""
        t = self.features(x)
        b, gh, gw, _ = t.shape
        (qh, qw), dd = self.cfg.out_patch_hw, self.cfg.out_depth
        y = self.head(t).reshape(b, gh, gw, qh, qw, dd)
        return y.permute(0, 5, 1, 3, 2, 4).reshape(b, dd, gh * qh, gw * qw)


def build_model(cfg, seed=0, dtype=torch.float32):
    """Instantiate and initialise a network deterministically from ``seed``."""
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        net = Kv2CTNet(cfg)
    finally:
        torch.random.set_rng_state(gen_state)
    return net.to(dtype)


@dataclass(frozen=True)
class Normalization:
    """Affine maps: HU <-> network units and kV line integral -> network input."""

    hu_low: float = -1024.0
    hu_high: float = 3071.0
    kv_scale: float = 1.0

    def hu_to_unit(self, hu):
        return 2.0 * (hu - self.hu_low) / (self.hu_high - self.hu_low) - 1.0

    def unit_to_hu(self, u):
        return (u + 1.0) * 0.5 * (self.hu_high - self.hu_low) + self.hu_low

    @property
    def hu_per_unit(self):
        return 0.5 * (self.hu_high - self.hu_low)


def save_checkpoint(net, path, normalization=Normalization(), extra=None):
    """Write ``model.json`` (config + tensor manifest) and ``model.bin`` (float32 LE)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    state = net.state_dict()
    manifest = []
    with open(path / "model.bin", "wb") as fh:
        for name, t in state.items():
            arr = t.detach().cpu().numpy().astype("<f4")
            manifest.append({"name": name, "shape": list(arr.shape)})
            fh.write(arr.tobytes(order="C"))
    doc = {"config": net.cfg.to_dict(), "normalization": asdict(normalization),
           "tensors": manifest, "dtype": "f32le"}
    if extra:
        doc.update(extra)
    (path / "model.json").write_text(json.dumps(doc, indent=1))
    return path


def load_checkpoint(path):
    """Return ``(net, normalization, doc)`` from a checkpoint directory."""
    path = Path(path)
    doc = json.loads((path / "model.json").read_text())
    cfg = ModelConfig.from_dict(doc["config"])
    net = Kv2CTNet(cfg)
    flat = np.fromfile(path / "model.bin", dtype="<f4")
    state, offset = {}, 0
    for entry in doc["tensors"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        state[entry["name"]] = torch.from_numpy(flat[offset:offset + n].reshape(entry["shape"]).copy())
        offset += n
    if offset != flat.size:
        raise ShapeError(f"{path}: tensor manifest covers {offset} values, file has {flat.size}")
    net.load_state_dict(state)
    return net, Normalization(**doc.get("normalization", {})), doc
