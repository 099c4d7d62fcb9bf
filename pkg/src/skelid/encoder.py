"""Two-stream spatio-temporal GCN encoder over skeleton graphs.

Each stream stacks blocks of (spatial graph convolution, ReLU, width-9
stride-2 temporal convolution, bias, ReLU), halving the time axis per
block, then pools the final feature map into one vector per segment with
an L3 reduction.  Joints and bones streams are concatenated.  Gradients
are chained by hand in fixed reverse order; ``forward_batch`` returns the
cache that ``backward`` requires.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import AdjacencySet, Segment, Topology, build_adjacency, derive_bones
from .ops import (
    ParamTensor,
    Tensor,
    contract,
    conv_temporal,
    conv_temporal_backward,
    l3_pool,
    l3_pool_backward,
    load_tensors,
    relu,
    save_tensors,
)

DEFAULT_CHANNELS = (4, 16, 32, 64, 128, 256)
INPUT_CHANNELS = 4  # (x, y, z, c)


@dataclass
class GcnBlock:
    """One spatio-temporal block: three spatial weights, kernel, bias."""

    w0: ParamTensor
    w1: ParamTensor
    w2: ParamTensor
    kernel: ParamTensor
    bias: ParamTensor

    def __post_init__(self):
        if not (self.w0.value.shape == self.w1.value.shape == self.w2.value.shape):
            raise ValueError("spatial weights must share one shape")
        c_out, c_in = self.w0.value.shape
        if self.kernel.value.shape != (c_out, c_out, 9):
            raise ValueError("temporal kernel must be (C_out, C_out, 9)")
        if self.bias.value.shape != (c_out,):
            raise ValueError("bias must be (C_out,)")

    @property
    def spatial_weights(self) -> tuple[ParamTensor, ParamTensor, ParamTensor]:
        return (self.w0, self.w1, self.w2)

    @property
    def params(self) -> list[ParamTensor]:
        return [self.w0, self.w1, self.w2, self.kernel, self.bias]

    @classmethod
    def create(cls, c_in: int, c_out: int, rng: np.random.Generator, tag: str) -> "GcnBlock":
        def uniform(shape, fan_in):
            limit = np.sqrt(6.0 / fan_in)
            return rng.uniform(-limit, limit, size=shape)

        w = [
            ParamTensor(f"{tag}/w{k}", uniform((c_out, c_in), 3 * c_in)) for k in range(3)
        ]
        kernel = ParamTensor(f"{tag}/kernel", uniform((c_out, c_out, 9), 9 * c_out))
        bias = ParamTensor(f"{tag}/bias", np.zeros(c_out))
        return cls(w[0], w[1], w[2], kernel, bias)


def spatial_gcn(f: Tensor, block: GcnBlock, adj: AdjacencySet, activate: bool = True) -> Tensor:
    """Sum over the three routes of W_k (f A_k), optionally through ReLU.

    f is (C_in, T, J) or batched (N, C_in, T, J).
    """
    single = f.ndim == 3
    fb = f[None] if single else f
    if fb.shape[3] != adj.joint_count:
        raise ValueError(f"{fb.shape[3]} nodes, adjacency has {adj.joint_count}")
    if fb.shape[1] != block.w0.value.shape[1]:
        raise ValueError(f"{fb.shape[1]} channels, block expects {block.w0.value.shape[1]}")
    out = None
    for w, a in zip(block.spatial_weights, (adj.a0, adj.a1, adj.a2)):
        fa = contract("nctw,wv->nctv", fb, a)
        term = contract("oc,nctv->notv", w.value, fa)
        out = term if out is None else out + term
    if activate:
        out = relu(out)
    return out[0] if single else out


@dataclass
class _BlockCache:
    fa: list[Tensor]
    s_pre: Tensor
    s: Tensor
    y_pre: Tensor


def _block_forward(fb: Tensor, block: GcnBlock, adj: AdjacencySet) -> tuple[Tensor, _BlockCache]:
    fa = [contract("nctw,wv->nctv", fb, a) for a in (adj.a0, adj.a1, adj.a2)]
    s_pre = sum(contract("oc,nctv->notv", w.value, f) for w, f in zip(block.spatial_weights, fa))
    s = relu(s_pre)
    y_pre = conv_temporal(s, block.kernel.value) + block.bias.value[None, :, None, None]
    return relu(y_pre), _BlockCache(fa=fa, s_pre=s_pre, s=s, y_pre=y_pre)


def _block_backward(dy: Tensor, block: GcnBlock, adj: AdjacencySet, cache: _BlockCache) -> Tensor:
    dy_pre = dy * (cache.y_pre > 0)
    block.bias.grad += dy_pre.sum(axis=(0, 2, 3))
    ds, dk = conv_temporal_backward(dy_pre, cache.s, block.kernel.value)
    block.kernel.grad += dk
    ds_pre = ds * (cache.s_pre > 0)
    df = np.zeros_like(cache.fa[0])
    for w, fa, a in zip(block.spatial_weights, cache.fa, (adj.a0, adj.a1, adj.a2)):
        w.grad += contract("notv,nctv->oc", ds_pre, fa)
        dfa = contract("oc,notv->nctv", w.value, ds_pre)
        df += contract("nctv,wv->nctw", dfa, a)
    return df


def block_forward(f: Tensor, block: GcnBlock, adj: AdjacencySet) -> Tensor:
    """One full block: spatial aggregation, ReLU, temporal conv, bias, ReLU."""
    single = f.ndim == 3
    fb = f[None] if single else f
    out, _ = _block_forward(fb, block, adj)
    return out[0] if single else out


@dataclass
class StreamEncoder:
    """A stack of GCN blocks over one graph stream plus the L3 head."""

    blocks: list[GcnBlock]
    adjacency: AdjacencySet

    def __post_init__(self):
        if not self.blocks:
            raise ValueError("at least one block required")
        if self.blocks[0].w0.value.shape[1] != INPUT_CHANNELS:
            raise ValueError(f"first block must take {INPUT_CHANNELS} input channels")
        for prev, nxt in zip(self.blocks, self.blocks[1:]):
            if nxt.w0.value.shape[1] != prev.w0.value.shape[0]:
                raise ValueError("block channel chain is broken")

    @property
    def channels(self) -> tuple[int, ...]:
        chain = [self.blocks[0].w0.value.shape[1]]
        chain += [b.w0.value.shape[0] for b in self.blocks]
        return tuple(chain)

    @property
    def out_dim(self) -> int:
        return self.blocks[-1].w0.value.shape[0]

    @property
    def params(self) -> list[ParamTensor]:
        return [p for b in self.blocks for p in b.params]

    @classmethod
    def create(
        cls,
        adj: AdjacencySet,
        rng: np.random.Generator,
        channels: Sequence[int] = DEFAULT_CHANNELS,
        tag: str = "stream",
    ) -> "StreamEncoder":
        if len(channels) < 2:
            raise ValueError("need at least input and output channel counts")
        if channels[0] != INPUT_CHANNELS:
            raise ValueError(f"channel chain must start at {INPUT_CHANNELS}")
        blocks = [
            GcnBlock.create(c_in, c_out, rng, f"{tag}/block{i}")
            for i, (c_in, c_out) in enumerate(zip(channels, channels[1:]))
        ]
        return cls(blocks=blocks, adjacency=adj)

    def forward(self, x: Tensor) -> tuple[Tensor, list]:
        """Batched (N, 4, T, J) input to (N, out_dim) descriptors plus cache."""
        if x.ndim != 4:
            raise ValueError("expected (N, C, T, J)")
        caches = []
        h = x
        for block in self.blocks:
            h, cache = _block_forward(h, block, self.adjacency)
            caches.append(cache)
        flat = h.reshape(h.shape[0], h.shape[1], -1)
        desc = l3_pool(flat)
        caches.append((h.shape, flat))
        return desc, caches

    def backward(self, ddesc: Tensor, caches: list) -> None:
        if not caches:
            raise ValueError("backward needs the cache from forward")
        final_shape, flat = caches[-1]
        dy = l3_pool_backward(ddesc, flat).reshape(final_shape)
        for block, cache in zip(reversed(self.blocks), reversed(caches[:-1])):
            dy = _block_backward(dy, block, self.adjacency, cache)


def segment_to_tensors(seg: Segment, topo: Topology) -> tuple[Tensor, Tensor]:
    """Joints and bones tensors of shape (4, K, J) for one segment."""
    joints = np.ascontiguousarray(seg.frames.transpose(2, 0, 1))
    bones = np.ascontiguousarray(derive_bones(seg.frames, topo).transpose(2, 0, 1))
    return joints, bones


@dataclass
class TwoStreamEncoder:
    joints_stream: StreamEncoder
    bones_stream: StreamEncoder
    topology: Topology

    def __post_init__(self):
        if self.joints_stream.adjacency.joint_count != self.bones_stream.adjacency.joint_count:
            raise ValueError("streams must share the graph size")
        if self.joints_stream.channels != self.bones_stream.channels:
            raise ValueError("streams must share the channel chain")

    @property
    def descriptor_dim(self) -> int:
        return self.joints_stream.out_dim + self.bones_stream.out_dim

    @property
    def params(self) -> list[ParamTensor]:
        return self.joints_stream.params + self.bones_stream.params

    @classmethod
    def create(
        cls,
        topo: Topology,
        channels: Sequence[int] = DEFAULT_CHANNELS,
        seed: int = 0,
    ) -> "TwoStreamEncoder":
        adj = build_adjacency(topo)
        rng = np.random.default_rng([seed, 0xE2C0DE])
        joints = StreamEncoder.create(adj, rng, channels, tag="joints")
        bones = StreamEncoder.create(adj, rng, channels, tag="bones")
        return cls(joints_stream=joints, bones_stream=bones, topology=topo)

    def forward_batch(self, joints: Tensor, bones: Tensor) -> tuple[Tensor, tuple]:
        dj, cj = self.joints_stream.forward(joints)
        db, cb = self.bones_stream.forward(bones)
        return np.concatenate([dj, db], axis=1), (cj, cb)

    def backward(self, ddesc: Tensor, cache: tuple) -> None:
        if cache is None:
            raise ValueError("backward needs the cache from forward_batch")
        cj, cb = cache
        half = self.joints_stream.out_dim
        self.joints_stream.backward(ddesc[:, :half], cj)
        self.bones_stream.backward(ddesc[:, half:], cb)

    def zero_grads(self) -> None:
        for p in self.params:
            p.zero_grad()


def encode_segment(seg: Segment, enc: TwoStreamEncoder) -> Tensor:
    """One segment to one concatenated descriptor (joints then bones)."""
    return encode_segments([seg], enc)[0]


def encode_segments(segs: Sequence[Segment], enc: TwoStreamEncoder, batch_size: int = 64) -> Tensor:
    """Stack of descriptors, one row per segment, in segment order."""
    if not segs:
        return np.zeros((0, enc.descriptor_dim))
    out = []
    for lo in range(0, len(segs), batch_size):
        chunk = segs[lo : lo + batch_size]
        pairs = [segment_to_tensors(s, enc.topology) for s in chunk]
        joints = np.stack([p[0] for p in pairs])
        bones = np.stack([p[1] for p in pairs])
        desc, _ = enc.forward_batch(joints, bones)
        out.append(desc)
    desc = np.concatenate(out, axis=0)
    if not np.isfinite(desc).all():
        raise ValueError("non-finite descriptor")
    return desc


def save_encoder(enc: TwoStreamEncoder, path: str | Path, extra_meta: dict | None = None):
    tensors = {p.name: p.value for p in enc.params}
    meta = {
        "kind": "two-stream-gcn",
        "channels": list(enc.joints_stream.channels),
        "topology": {
            "joint_count": enc.topology.joint_count,
            "root": enc.topology.root,
            "edges": [[p, c] for p, c in enc.topology.edges],
        },
    }
    if extra_meta:
        meta.update(extra_meta)
    save_tensors(path, tensors, meta=meta)


def load_encoder(path: str | Path) -> tuple[TwoStreamEncoder, dict]:
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "two-stream-gcn":
        raise ValueError(f"{path}: not an encoder checkpoint")
    topo = Topology(
        joint_count=int(meta["topology"]["joint_count"]),
        root=int(meta["topology"]["root"]),
        edges=tuple((int(p), int(c)) for p, c in meta["topology"]["edges"]),
    )
    channels = list(meta["channels"])
    enc = TwoStreamEncoder.create(topo, channels=channels, seed=0)
    for p in enc.params:
        if p.name not in tensors:
            raise ValueError(f"{path}: missing tensor {p.name!r}")
        if tensors[p.name].shape != p.value.shape:
            raise ValueError(f"{path}: shape mismatch for {p.name!r}")
        p.value[...] = tensors[p.name]
        p.velocity.fill(0.0)
        p.grad.fill(0.0)
    return enc, meta
