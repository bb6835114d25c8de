"""Segmentation networks shared by teacher and student.

Both variants map a (B, 1, p, p, p) patch to (B, 2, p, p, p) logits:

* ``conv_unet`` -- a compact 3D U-Net, cheap enough for CPU training.
* ``windowed_attention_unet`` -- a Swin-style U-Net: (shifted) window
  self-attention blocks, patch merging on the way down, transposed
  convolutions plus skip connections on the way up.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

VARIANTS = ("conv_unet", "windowed_attention_unet")


@dataclass(frozen=True)
class NetworkConfig:
    variant: str = "conv_unet"
    patch_size: int = 32
    base_channels: int = 8
    depth: int = 2
    window_size: int = 4  # attention variant only
    num_heads: int = 2  # attention variant only; doubled at each stage
    # average every kernel over its 8 axis flips (makes the conv variant flip-equivariant)
    symmetric_kernels: bool = False
    in_channels: int = 1
    num_classes: int = 2

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.depth < 1 or self.base_channels < 1:
            raise ValueError("depth and base_channels must be positive")
        if self.patch_size % (2 ** self.depth):
            raise ValueError(f"patch size {self.patch_size} not divisible by 2^depth = {2 ** self.depth}")
        if self.variant == "windowed_attention_unet":
            for stage in range(self.depth + 1):
                res = self.patch_size // 2 ** stage
                if res % self.window_size:
                    raise ValueError(f"stage {stage} resolution {res} not divisible by window {self.window_size}")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


@dataclass
class Prediction:
    probabilities: np.ndarray  # (2, p, p, p)

    @property
    def vessel(self) -> np.ndarray:
        return self.probabilities[1]


# ---------------------------------------------------------------------------
# conv U-Net


def _symmetrize(w: torch.Tensor) -> torch.Tensor:
    acc = w
    for dims in ((2,), (3,), (4,), (2, 3), (2, 4), (3, 4), (2, 3, 4)):
        acc = acc + torch.flip(w, dims)
    return acc / 8.0


class SymConv3d(nn.Conv3d):
    def forward(self, x):
        return self._conv_forward(x, _symmetrize(self.weight), self.bias)


class SymConvTranspose3d(nn.ConvTranspose3d):
    def forward(self, x):
        return F.conv_transpose3d(x, _symmetrize(self.weight), self.bias, self.stride, self.padding,
                                  self.output_padding, self.groups, self.dilation)


class DoubleConv(nn.Module):
    def __init__(self, c_in, c_out, conv=nn.Conv3d):
        super().__init__()
        self.block = nn.Sequential(
            conv(c_in, c_out, 3, padding=1),
            nn.InstanceNorm3d(c_out, affine=True),
            nn.LeakyReLU(0.01, inplace=True),
            conv(c_out, c_out, 3, padding=1),
            nn.InstanceNorm3d(c_out, affine=True),
            nn.LeakyReLU(0.01, inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class ConvUNet3d(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        conv = SymConv3d if cfg.symmetric_kernels else nn.Conv3d
        up = SymConvTranspose3d if cfg.symmetric_kernels else nn.ConvTranspose3d
        widths = [cfg.base_channels * 2 ** i for i in range(cfg.depth + 1)]
        self.encoders = nn.ModuleList()
        c_prev = cfg.in_channels
        for w in widths[:-1]:
            self.encoders.append(DoubleConv(c_prev, w, conv))
            c_prev = w
        self.bottleneck = DoubleConv(widths[-2], widths[-1], conv)
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for lvl in reversed(range(cfg.depth)):
            self.ups.append(up(widths[lvl + 1], widths[lvl], 2, stride=2))
            self.decoders.append(DoubleConv(2 * widths[lvl], widths[lvl], conv))
        self.head = conv(widths[0], cfg.num_classes, 1)

    def forward(self, x):
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = F.max_pool3d(x, 2)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.ups, self.decoders, reversed(skips)):
            x = dec(torch.cat([up(x), skip], dim=1))
        return self.head(x)


# ---------------------------------------------------------------------------
# windowed attention U-Net


def _window_partition(x, w):
    b, d, h, wd, c = x.shape
    x = x.view(b, d // w, w, h // w, w, wd // w, w, c)
    return x.permute(0, 1, 3, 5, 2, 4, 6, 7).reshape(-1, w ** 3, c)


def _window_reverse(windows, w, b, d, h, wd):
    c = windows.shape[-1]
    x = windows.view(b, d // w, h // w, wd // w, w, w, w, c)
    return x.permute(0, 1, 4, 2, 5, 3, 6, 7).reshape(b, d, h, wd, c)


def _shift_attention_mask(res, w, shift):
    """Additive mask keeping cyclically shifted windows from mixing distant regions."""
    img = torch.zeros(1, res, res, res, 1)
    cnt = 0
    spans = (slice(0, -w), slice(-w, -shift), slice(-shift, None))
    for sd in spans:
        for sh in spans:
            for sw in spans:
                img[:, sd, sh, sw, :] = cnt
                cnt += 1
    ids = _window_partition(img, w).squeeze(-1)
    diff = ids.unsqueeze(1) - ids.unsqueeze(2)
    return torch.zeros_like(diff).masked_fill(diff != 0, float("-inf"))


class WindowAttentionBlock(nn.Module):
    def __init__(self, dim, heads, res, window, shift):
        super().__init__()
        self.window = min(window, res)
        self.shift = shift if res > self.window else 0
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))
        n = self.window ** 3
        self.rel_bias = nn.Parameter(torch.zeros(heads, n, n))
        if self.shift:
            self.register_buffer("attn_mask", _shift_attention_mask(res, self.window, self.shift), persistent=False)
        else:
            self.attn_mask = None

    def forward(self, x):
        b, d, h, wd, c = x.shape
        shortcut = x
        x = self.norm1(x)
        if self.shift:
            x = torch.roll(x, shifts=(-self.shift,) * 3, dims=(1, 2, 3))
        win = _window_partition(x, self.window)  # (B*nW, n, C)
        bw, n, _ = win.shape
        qkv = self.qkv(win).view(bw, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * (c // self.heads) ** -0.5 + self.rel_bias
        if self.attn_mask is not None:
            nw = self.attn_mask.shape[0]
            attn = attn.view(bw // nw, nw, self.heads, n, n) + self.attn_mask[None, :, None]
            attn = attn.view(bw, self.heads, n, n)
        out = (attn.softmax(-1) @ v).transpose(1, 2).reshape(bw, n, c)
        out = _window_reverse(self.proj(out), self.window, b, d, h, wd)
        if self.shift:
            out = torch.roll(out, shifts=(self.shift,) * 3, dims=(1, 2, 3))
        x = shortcut + out
        return x + self.mlp(self.norm2(x))


class SwinStage(nn.Module):
    def __init__(self, dim, heads, res, window):
        super().__init__()
        self.blocks = nn.ModuleList([
            WindowAttentionBlock(dim, heads, res, window, 0),
            WindowAttentionBlock(dim, heads, res, window, window // 2),
        ])

    def forward(self, x):
        for blk in self.blocks:
            x = blk(x)
        return x


class PatchMerging(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.norm = nn.LayerNorm(8 * dim)
        self.reduce = nn.Linear(8 * dim, 2 * dim, bias=False)

    def forward(self, x):
        b, d, h, w, c = x.shape
        x = x.view(b, d // 2, 2, h // 2, 2, w // 2, 2, c).permute(0, 1, 3, 5, 2, 4, 6, 7)
        return self.reduce(self.norm(x.reshape(b, d // 2, h // 2, w // 2, 8 * c)))


class WindowedAttentionUNet3d(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        c0, p = cfg.base_channels, cfg.patch_size
        dims = [c0 * 2 ** s for s in range(cfg.depth + 1)]
        heads = [cfg.num_heads * 2 ** s for s in range(cfg.depth + 1)]
        for d, hd in zip(dims, heads):
            if d % hd:
                raise ValueError(f"channel width {d} not divisible by {hd} heads")
        self.embed = nn.Conv3d(cfg.in_channels, c0, 3, padding=1)
        self.enc = nn.ModuleList([SwinStage(dims[s], heads[s], p // 2 ** s, cfg.window_size)
                                  for s in range(cfg.depth + 1)])
        self.merge = nn.ModuleList([PatchMerging(dims[s]) for s in range(cfg.depth)])
        self.up = nn.ModuleList()
        self.fuse = nn.ModuleList()
        self.dec = nn.ModuleList()
        for s in reversed(range(cfg.depth)):
            self.up.append(nn.ConvTranspose3d(dims[s + 1], dims[s], 2, stride=2))
            self.fuse.append(nn.Linear(2 * dims[s], dims[s]))
            self.dec.append(SwinStage(dims[s], heads[s], p // 2 ** s, cfg.window_size))
        self.norm = nn.LayerNorm(c0)
        self.head = nn.Linear(c0, cfg.num_classes)

    def forward(self, x):
        x = self.embed(x).permute(0, 2, 3, 4, 1)  # channels last
        skips = []
        for s, stage in enumerate(self.enc):
            x = stage(x)
            if s < len(self.merge):
                skips.append(x)
                x = self.merge[s](x)
        for up, fuse, stage, skip in zip(self.up, self.fuse, self.dec, reversed(skips)):
            x = up(x.permute(0, 4, 1, 2, 3)).permute(0, 2, 3, 4, 1)
            x = stage(fuse(torch.cat([x, skip], dim=-1)))
        return self.head(self.norm(x)).permute(0, 4, 1, 2, 3)


# ---------------------------------------------------------------------------
# contract


def build_network(config: NetworkConfig, seed: int = 0) -> nn.Module:
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if config.variant == "conv_unet":
            net = ConvUNet3d(config)
        else:
            net = WindowedAttentionUNet3d(config)
    net.config = config
    return net


def probabilities(net: nn.Module, x: torch.Tensor) -> torch.Tensor:
    """Softmax class probabilities for a (B, 1, p, p, p) batch, differentiable."""
    return torch.softmax(net(x), dim=1)


def forward(net: nn.Module, patch_image: np.ndarray) -> Prediction:
    """Inference on one (p, p, p) patch; no gradients, eval mode."""
    arr = np.asarray(patch_image, dtype=np.float32)
    cfg = getattr(net, "config", None)
    if arr.ndim != 3 or (cfg is not None and arr.shape != (cfg.patch_size,) * 3):
        expected = (cfg.patch_size,) * 3 if cfg is not None else "3D"
        raise ValueError(f"patch shape {arr.shape} does not match {expected}")
    was_training = net.training
    net.eval()
    with torch.no_grad():
        probs = probabilities(net, torch.from_numpy(arr)[None, None])[0]
    net.train(was_training)
    return Prediction(probs.numpy())


def snapshot_parameters(net: nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in net.state_dict().items()}


def load_parameters(net: nn.Module, params: dict[str, torch.Tensor]) -> None:
    own = net.state_dict()
    if set(own) != set(params):
        missing = sorted(set(own) ^ set(params))[:5]
        raise ValueError(f"parameter names differ (e.g. {missing})")
    for k, v in params.items():
        if tuple(own[k].shape) != tuple(v.shape):
            raise ValueError(f"shape mismatch for {k}: {tuple(own[k].shape)} vs {tuple(v.shape)}")
    net.load_state_dict({k: v.clone() for k, v in params.items()})


# ---------------------------------------------------------------------------
# checkpoint container
#
# layout: b"VSEGCKPT" | uint64 LE header length | JSON header | raw tensor bytes
# header = {"meta": {...}, "tensors": {name: {"dtype", "shape", "offset", "nbytes"}}}
# offsets are relative to the first byte after the header; data is little-endian.

MAGIC = b"VSEGCKPT"


def save_tensors(path, tensors: dict, meta: dict | None = None) -> None:
    entries, blobs, offset = {}, [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        arr = np.ascontiguousarray(arr)
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        entries[name] = {"dtype": arr.dtype.name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "tensors": entries}).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)
    tmp.replace(path)


def load_tensors(path) -> tuple[dict[str, torch.Tensor], dict]:
    with open(path, "rb") as f:
        if f.read(8) != MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen))
        blob = f.read()
    tensors = {}
    for name, e in header["tensors"].items():
        arr = np.frombuffer(blob, dtype=np.dtype(e["dtype"]).newbyteorder("<"),
                            count=int(np.prod(e["shape"], dtype=np.int64)), offset=e["offset"])
        tensors[name] = torch.from_numpy(arr.reshape(e["shape"]).astype(np.dtype(e["dtype"])))
    return tensors, header["meta"]


def save_network(net: nn.Module, path, extra_meta: dict | None = None) -> None:
    meta = {"network": net.config.to_json(), **(extra_meta or {})}
    save_tensors(path, snapshot_parameters(net), meta)


def load_network(path) -> tuple[nn.Module, dict]:
    tensors, meta = load_tensors(path)
    net = build_network(NetworkConfig.from_json(meta["network"]))
    load_parameters(net, tensors)
    return net, meta


def clone_network(net: nn.Module) -> nn.Module:
    return copy.deepcopy(net)
