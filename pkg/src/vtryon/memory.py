"""Stage II: key/value memory over past frames and the memory read block."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ArchConfig
from .core import ShapeError
from .tryon import conv_block


@dataclass(frozen=True)
class KeyValueMaps:
    key: torch.Tensor    # (B, C_k, H', W')
    value: torch.Tensor  # (B, C_v, H', W')
    skips: tuple = ()

    def __post_init__(self):
        if self.key.shape[-2:] != self.value.shape[-2:] or self.key.shape[0] != self.value.shape[0]:
            raise ShapeError(f"key {tuple(self.key.shape)} and value {tuple(self.value.shape)} differ")


@dataclass(frozen=True)
class MemoryStore:
    """Append-only stack of past key/value maps, (B, C, T, H', W')."""

    keys: torch.Tensor | None = None
    values: torch.Tensor | None = None
    cap: int = 0  # 0 = unbounded; otherwise FIFO eviction beyond ``cap`` frames

    @property
    def size(self) -> int:
        return 0 if self.keys is None else self.keys.shape[2]

    def entry(self, t: int) -> tuple[torch.Tensor, torch.Tensor]:
        return self.keys[:, :, t], self.values[:, :, t]


def memory_write(store: MemoryStore, kv: KeyValueMaps) -> MemoryStore:
    k, v = kv.key.unsqueeze(2), kv.value.unsqueeze(2)
    if store.keys is None:
        return MemoryStore(k, v, store.cap)
    if store.keys.shape[-2:] != k.shape[-2:] or store.keys.shape[:2] != k.shape[:2] \
            or store.values.shape[:2] != v.shape[:2]:
        raise ShapeError(f"memory holds {tuple(store.keys.shape)}, cannot append key {tuple(kv.key.shape)}")
    keys = torch.cat([store.keys, k], 2)
    values = torch.cat([store.values, v], 2)
    if store.cap and keys.shape[2] > store.cap:
        keys, values = keys[:, :, -store.cap:], values[:, :, -store.cap:]
    return MemoryStore(keys, values, store.cap)


def attention_weights(query_key, mem_keys):
    """Softmax over all T*H'*W' memory locations of exp(k_i . k_j).

    query_key (B, C_k, H, W), mem_keys (B, C_k, T, H, W) -> (B, H*W, T*H*W).
    Max-subtraction inside softmax keeps exp from overflowing.
    """
    B, Ck = query_key.shape[:2]
    q = query_key.reshape(B, Ck, -1).transpose(1, 2)
    m = mem_keys.reshape(B, Ck, -1)
    return torch.softmax(torch.bmm(q, m), dim=2)


def memory_read(current: KeyValueMaps, store: MemoryStore):
    """y_i = [v_i^C, sum_j w_ij v_j^M] for every current location i."""
    if store.size == 0:
        raise ValueError("memory_read needs at least one frame in memory")
    if store.keys.shape[-2:] != current.key.shape[-2:]:
        raise ShapeError(f"memory spatial size {tuple(store.keys.shape[-2:])} does not match "
                         f"current {tuple(current.key.shape[-2:])}")
    B, Cv, H, W = current.value.shape
    w = attention_weights(current.key, store.keys)
    mv = store.values.reshape(B, store.values.shape[1], -1)
    retrieved = torch.bmm(mv, w.transpose(1, 2)).reshape(B, -1, H, W)
    return torch.cat([current.value, retrieved], 1)


class KVEncoder(nn.Module):
    """Stride-4 encoder; output channels split into key then value."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        w = arch.kv_width
        self.size = (arch.height, arch.width)
        self.key_channels = arch.key_channels
        self.value_channels = arch.value_channels
        self.s1 = conv_block(3, w // 4)
        self.s2 = conv_block(w // 4, w // 2, stride=2)
        self.s4 = conv_block(w // 2, w, stride=2)
        self.out = nn.Conv2d(w, arch.key_channels + arch.value_channels, 3, padding=1)

    def forward(self, x):
        if tuple(x.shape[-2:]) != self.size:
            raise ShapeError(f"expected input of size {self.size}, got {tuple(x.shape[-2:])}")
        f1 = self.s1(x)
        f2 = self.s2(f1)
        f4 = self.out(self.s4(f2))
        return f4, (f1, f2)


class RefineDecoder(nn.Module):
    """Decode memory read output back to full resolution.

    Predicts a residual on top of the input frame; the last layer starts at
    zero so an untrained decoder returns its input unchanged.
    """

    def __init__(self, arch: ArchConfig):
        super().__init__()
        w = arch.kv_width
        self.compress = conv_block(2 * arch.value_channels, w)
        self.up2 = conv_block(w + w // 2, w // 2)
        self.up1 = conv_block(w // 2 + w // 4, w // 4)
        self.head = nn.Conv2d(w // 4, 3, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, y, skips, frame):
        f1, f2 = skips
        x = self.compress(y)
        x = self.up2(torch.cat([F.interpolate(x, size=f2.shape[-2:], mode="nearest"), f2], 1))
        x = self.up1(torch.cat([F.interpolate(x, size=f1.shape[-2:], mode="nearest"), f1], 1))
        return (frame + self.head(x)).clamp(0, 1)


class RefineNetworks(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        self.kv_encoder = KVEncoder(arch)
        self.refine_decoder = RefineDecoder(arch)


def encode_kv(net: RefineNetworks, frame) -> KeyValueMaps:
    feats, skips = net.kv_encoder(frame)
    ck = net.kv_encoder.key_channels
    return KeyValueMaps(feats[:, :ck], feats[:, ck:], skips)


def refine_frame(net: RefineNetworks, current_frame, store: MemoryStore, kv: KeyValueMaps | None = None):
    kv = encode_kv(net, current_frame) if kv is None else kv
    y = memory_read(kv, store)
    return net.refine_decoder(y, kv.skips, current_frame)


def refine_clip(net: RefineNetworks, frames, cap: int = 0, return_sizes: bool = False):
    """Refine stage-I frames in order with a causal memory.

    Frame 0 writes its own key/value before reading (self-memory). Every
    later frame t reads from frames 0..t-1. The stage-I input's key/value,
    not the refined output's, is what gets written.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("refine_clip needs at least one frame")
    store = MemoryStore(cap=cap)
    out, sizes = [], []
    for t, frame in enumerate(frames):
        kv = encode_kv(net, frame)
        if t == 0:
            store = memory_write(store, kv)
        sizes.append(store.size)
        out.append(refine_frame(net, frame, store, kv))
        if t > 0:
            store = memory_write(store, kv)
    return (out, sizes) if return_sizes else out
