"""Triplet-loss training of the two-stream encoder on segment batches.

Batches are drawn by a P-identities times Q-segments sampler, triplets are
mined batch-hard (hardest positive, hardest negative per anchor), and the
mean hinge loss is pushed back through the encoder by hand.  Given the
same seed, segments and config, two runs produce bit-identical parameters.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .data import Segment, Topology
from .encoder import DEFAULT_CHANNELS, TwoStreamEncoder, segment_to_tensors
from .ops import OptimConfig, Tensor, schedule_lr, sgd_nesterov_step


def cosine_distance(x: Tensor, y: Tensor) -> float:
    """1 - cos(x, y), in [0, 2]; defined as 1 when either vector is zero."""
    nx = float(np.linalg.norm(x))
    ny = float(np.linalg.norm(y))
    if nx == 0.0 or ny == 0.0:
        return 1.0
    d = 1.0 - float(np.dot(x, y)) / (nx * ny)
    return min(2.0, max(0.0, d))


def pairwise_distances(x: Tensor, y: Tensor) -> Tensor:
    """Cosine distance matrix between rows of x and rows of y."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    nx = np.linalg.norm(x, axis=1, keepdims=True)
    ny = np.linalg.norm(y, axis=1, keepdims=True)
    ux = np.divide(x, nx, out=np.zeros_like(x), where=nx > 0)
    uy = np.divide(y, ny, out=np.zeros_like(y), where=ny > 0)
    d = 1.0 - ux @ uy.T
    # zero rows carry no direction: force the defined fallback of 1
    d[(nx == 0).ravel(), :] = 1.0
    d[:, (ny == 0).ravel()] = 1.0
    return np.clip(d, 0.0, 2.0)


def triplet_loss(a: Tensor, p: Tensor, n: Tensor, margin: float) -> float:
    """max(0, d(a, p) - d(a, n) + margin) with cosine distance."""
    if margin <= 0:
        raise ValueError("margin must be positive")
    return max(0.0, cosine_distance(a, p) - cosine_distance(a, n) + margin)


class Triplet(NamedTuple):
    anchor: int
    positive: int
    negative: int


def mine_triplets(
    descriptors: Tensor, person_ids: Sequence[str], dist: Tensor | None = None
) -> list[Triplet]:
    """Batch-hard mining: per anchor the farthest positive and nearest negative.

    Ties break toward the lowest batch index.  A batch containing a single
    identity has no negatives and is rejected.
    """
    labels = np.asarray(person_ids)
    if len(labels) != len(descriptors):
        raise ValueError("one label per descriptor required")
    if len(set(person_ids)) < 2:
        raise ValueError("triplet mining needs at least two identities in the batch")
    if dist is None:
        dist = pairwise_distances(descriptors, descriptors)
    triplets = []
    for i in range(len(labels)):
        same = labels == labels[i]
        pos_idx = np.flatnonzero(same)
        pos_idx = pos_idx[pos_idx != i]
        if pos_idx.size == 0:
            continue
        neg_idx = np.flatnonzero(~same)
        hardest_pos = pos_idx[np.argmax(dist[i, pos_idx])]
        hardest_neg = neg_idx[np.argmin(dist[i, neg_idx])]
        triplets.append(Triplet(i, int(hardest_pos), int(hardest_neg)))
    return triplets


def batch_loss_and_grad(
    descriptors: Tensor, person_ids: Sequence[str], margin: float
) -> tuple[float, Tensor]:
    """Mean batch-hard triplet loss and its gradient w.r.t. the descriptors."""
    if margin <= 0:
        raise ValueError("margin must be positive")
    x = np.asarray(descriptors, dtype=np.float64)
    dist = pairwise_distances(x, x)
    triplets = mine_triplets(x, person_ids, dist=dist)
    if not triplets:
        return 0.0, np.zeros_like(x)
    norms = np.linalg.norm(x, axis=1)
    units = np.divide(x, norms[:, None], out=np.zeros_like(x), where=norms[:, None] > 0)
    cos = units @ units.T

    grad = np.zeros_like(x)

    def add_ddist(i: int, j: int, scale: float):
        # d(i, j) = 1 - cos; zero-norm rows have constant distance
        if norms[i] > 0 and norms[j] > 0:
            grad[i] -= scale * (units[j] - cos[i, j] * units[i]) / norms[i]
            grad[j] -= scale * (units[i] - cos[i, j] * units[j]) / norms[j]

    total = 0.0
    w = 1.0 / len(triplets)
    for a, p, n in triplets:
        hinge = dist[a, p] - dist[a, n] + margin
        if hinge > 0:
            total += hinge
            add_ddist(a, p, w)
            add_ddist(a, n, -w)
    return total * w, grad


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    margin: float = 0.3
    p_identities: int = 8
    q_segments: int = 4
    seed: int = 0
    optim: OptimConfig = field(default_factory=OptimConfig)
    channels: tuple[int, ...] = DEFAULT_CHANNELS

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.p_identities < 2 or self.q_segments < 2:
            raise ValueError("need P >= 2 and Q >= 2 so triplets exist")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "margin": self.margin,
            "p_identities": self.p_identities,
            "q_segments": self.q_segments,
            "seed": self.seed,
            "channels": list(self.channels),
            "learning_rate": self.optim.learning_rate,
            "momentum": self.optim.momentum,
            "decay_factor": self.optim.decay_factor,
            "decay_every": self.optim.decay_every,
            "nesterov": self.optim.nesterov,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {
            "epochs", "margin", "p_identities", "q_segments", "seed", "channels",
            "learning_rate", "momentum", "decay_factor", "decay_every", "nesterov",
        }
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        optim_keys = {"learning_rate", "momentum", "decay_factor", "decay_every", "nesterov"}
        optim = OptimConfig(**{k: obj[k] for k in optim_keys if k in obj})
        rest = {k: obj[k] for k in obj if k not in optim_keys}
        if "channels" in rest:
            rest["channels"] = tuple(int(c) for c in rest["channels"])
        return cls(optim=optim, **rest)


class EpochStats(NamedTuple):
    epoch: int
    mean_loss: float
    lr: float


class _BatchSampler:
    """Seeded P x Q batches: P identity chunks of Q segment indices each."""

    def __init__(self, person_ids: Sequence[str], p: int, q: int):
        self.p = p
        self.q = q
        self.by_person: dict[str, list[int]] = {}
        for idx, pid in enumerate(person_ids):
            self.by_person.setdefault(pid, []).append(idx)
        eligible = sum(1 for v in self.by_person.values() if len(v) >= q)
        if eligible < p:
            raise ValueError(
                f"sampler needs {p} identities with at least {q} segments, found {eligible}"
            )

    def epoch_batches(self, rng: np.random.Generator) -> list[list[int]]:
        queues: dict[str, list[list[int]]] = {}
        for pid, idx in self.by_person.items():
            order = rng.permutation(len(idx))
            shuffled = [idx[i] for i in order]
            n_chunks = max(1, -(-len(shuffled) // self.q))
            padded = shuffled * -(-(self.q * n_chunks) // len(shuffled))
            queues[pid] = [
                padded[c * self.q : (c + 1) * self.q] for c in range(n_chunks)
            ]
        pids = list(self.by_person)
        batches = []
        while True:
            avail = [pid for pid in pids if queues[pid]]
            if len(avail) < 2:
                # a lone identity cannot form triplets; its leftovers wait
                # for the next epoch's reshuffle
                break
            take = min(self.p, len(avail))
            chosen = rng.choice(len(avail), size=take, replace=False)
            batch = []
            for ci in sorted(chosen):
                batch.extend(queues[avail[ci]].pop(0))
            batches.append(batch)
        return batches


def train(
    segments: Sequence[Segment],
    topo: Topology,
    cfg: TrainConfig,
    log=None,
) -> tuple[TwoStreamEncoder, list[EpochStats]]:
    """Train a fresh encoder on the given segments; returns it plus history."""
    if not segments:
        raise ValueError("no training segments")
    enc = TwoStreamEncoder.create(topo, channels=cfg.channels, seed=cfg.seed)
    person_ids = [s.person_id for s in segments]
    sampler = _BatchSampler(person_ids, cfg.p_identities, cfg.q_segments)

    pairs = [segment_to_tensors(s, topo) for s in segments]
    joints_all = np.stack([p[0] for p in pairs])
    bones_all = np.stack([p[1] for p in pairs])
    labels = np.asarray(person_ids)

    rng = np.random.default_rng([cfg.seed, 0x5A123])
    history: list[EpochStats] = []
    for epoch in range(cfg.epochs):
        lr = schedule_lr(cfg.optim, epoch)
        losses = []
        for batch in sampler.epoch_batches(rng):
            desc, cache = enc.forward_batch(joints_all[batch], bones_all[batch])
            loss, ddesc = batch_loss_and_grad(desc, labels[batch], cfg.margin)
            enc.zero_grads()
            enc.backward(ddesc, cache)
            sgd_nesterov_step(enc.params, cfg.optim, lr=lr)
            losses.append(loss)
        mean_loss = float(np.mean(losses)) if losses else 0.0
        if not np.isfinite(mean_loss):
            raise ArithmeticError(f"epoch {epoch}: loss is not finite")
        history.append(EpochStats(epoch, mean_loss, lr))
        if log is not None:
            log(f"epoch {epoch:3d}  loss {mean_loss:.6f}  lr {lr:.6g}")
    return enc, history


def write_loss_history(history: Sequence[EpochStats], path: str | Path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss", "lr"])
        for row in history:
            writer.writerow([row.epoch, repr(float(row.mean_loss)), repr(float(row.lr))])


def read_loss_history(path: str | Path) -> list[EpochStats]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            EpochStats(int(r["epoch"]), float(r["mean_loss"]), float(r["lr"]))
            for r in reader
        ]
