"""Skeleton sequences, graph topology, bone features, and segmentation.

Dataset files are JSON Lines, one video per line:

    {"video_id": "...", "person_id": "...", "camera_id": "...",
     "clothes_id": "...", "frames": [[[x, y, z, c], ...], ...]}

Topology files are a single JSON object with ``joint_count``, ``root`` and
``edges`` as ``[parent, child]`` pairs forming a tree.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, NamedTuple

import numpy as np


class ParseError(ValueError):
    """A dataset line is not valid JSON or not a valid record."""


class SchemaError(ValueError):
    """A record violates the dataset schema (joint count, ranges, shapes)."""


class Joint(NamedTuple):
    x: float
    y: float
    z: float
    c: float


@dataclass(frozen=True)
class Topology:
    """Tree connectivity of the skeleton: ``edges`` are (parent, child) pairs."""

    joint_count: int
    root: int
    edges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        j = self.joint_count
        if j < 1:
            raise ValueError("joint_count must be positive")
        if not 0 <= self.root < j:
            raise ValueError("root index out of range")
        parents = {}
        for p, c in self.edges:
            if not (0 <= p < j and 0 <= c < j):
                raise ValueError(f"edge ({p}, {c}) out of range for {j} joints")
            if c in parents:
                raise ValueError(f"joint {c} has more than one parent")
            parents[c] = p
        if self.root in parents:
            raise ValueError("root must not have a parent")
        # tree check: every non-root joint reachable from the root
        children = {i: [] for i in range(j)}
        for p, c in self.edges:
            children[p].append(c)
        seen = set()
        stack = [self.root]
        while stack:
            node = stack.pop()
            if node in seen:
                raise ValueError("topology contains a cycle")
            seen.add(node)
            stack.extend(children[node])
        if len(seen) != j:
            raise ValueError("topology is disconnected")

    @property
    def parents(self) -> np.ndarray:
        """Parent index per joint, -1 at the root."""
        par = np.full(self.joint_count, -1, dtype=np.int64)
        for p, c in self.edges:
            par[c] = p
        par.flags.writeable = False
        return par


# BlazePose-style 33-joint body layout, reduced to a spanning tree rooted at
# the left hip.  Indices follow the usual landmark order (0 nose .. 32 right
# foot index); the shoulder-to-nose link connects the head to the torso.
DEFAULT_TOPOLOGY = Topology(
    joint_count=33,
    root=23,
    edges=(
        # torso
        (23, 24), (23, 11), (24, 12),
        # left arm and hand
        (11, 13), (13, 15), (15, 17), (15, 19), (15, 21),
        # right arm and hand
        (12, 14), (14, 16), (16, 18), (16, 20), (16, 22),
        # left leg and foot
        (23, 25), (25, 27), (27, 29), (29, 31),
        # right leg and foot
        (24, 26), (26, 28), (28, 30), (30, 32),
        # head, hung off the left shoulder
        (11, 0),
        (0, 1), (1, 2), (2, 3), (3, 7),
        (0, 4), (4, 5), (5, 6), (6, 8),
        (0, 9), (9, 10),
    ),
)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


def _check_frames(frames: np.ndarray, what: str):
    if frames.ndim != 3 or frames.shape[2] != 4:
        raise SchemaError(f"{what}: frames must have shape (T, J, 4)")
    if frames.shape[0] < 1:
        raise SchemaError(f"{what}: at least one frame required")
    if not np.isfinite(frames).all():
        raise SchemaError(f"{what}: non-finite coordinate")
    conf = frames[:, :, 3]
    if (conf < 0.0).any() or (conf > 1.0).any():
        raise SchemaError(f"{what}: confidence outside [0, 1]")


@dataclass(frozen=True)
class SkeletonSequence:
    """One video's skeletons: frames is a (T, J, 4) array of (x, y, z, c)."""

    video_id: str
    person_id: str
    camera_id: str
    clothes_id: str
    frames: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "frames", _frozen(self.frames))
        _check_frames(self.frames, f"video {self.video_id!r}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def joint_count(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class Segment:
    """A fixed-length window of a video, labels copied from the source."""

    video_id: str
    start: int
    person_id: str
    camera_id: str
    clothes_id: str
    frames: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "frames", _frozen(self.frames))
        _check_frames(self.frames, f"segment {self.segment_id!r}")

    @property
    def segment_id(self) -> str:
        return f"{self.video_id}#{self.start:05d}"

    @property
    def length(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class AdjacencySet:
    """Incoming (a0), outgoing (a1), and self-loop (a2) matrices.

    Entry [w, v] is the weight node v places on node w, so features
    propagate by right multiplication (f @ A) and each nonzero column sums
    to 1.  a0 carries parent-to-child flow (column v reads from v's
    parent), a1 child-to-parent flow (column v averages v's children),
    and a2 is the identity.
    """

    a0: np.ndarray
    a1: np.ndarray
    a2: np.ndarray

    def __post_init__(self):
        for name in ("a0", "a1", "a2"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))

    @property
    def joint_count(self) -> int:
        return self.a0.shape[0]

    def stacked(self) -> np.ndarray:
        return np.stack([self.a0, self.a1, self.a2])


def build_adjacency(topo: Topology) -> AdjacencySet:
    """Build the three spatial adjacency matrices for a topology."""
    j = topo.joint_count
    a0 = np.zeros((j, j))
    a1 = np.zeros((j, j))
    for p, c in topo.edges:
        a0[p, c] = 1.0
        a1[c, p] = 1.0
    for a in (a0, a1):
        sums = a.sum(axis=0, keepdims=True)
        np.divide(a, sums, out=a, where=sums > 0)
    return AdjacencySet(a0=a0, a1=a1, a2=np.eye(j))


def derive_bones(frames: np.ndarray, topo: Topology) -> np.ndarray:
    """Bone features for one frame (J, 4) or a stack of frames (T, J, 4).

    The bone at a child index is child joint minus parent joint with
    confidence max(child, parent); the root's bone is (0, 0, 0, root c).
    """
    single = frames.ndim == 2
    f = frames[None] if single else frames
    if f.shape[1] != topo.joint_count:
        raise SchemaError("frame joint count does not match topology")
    parents = topo.parents.copy()
    parents[topo.root] = topo.root  # self-reference makes the root bone zero
    bones = np.empty_like(f)
    bones[:, :, :3] = f[:, :, :3] - f[:, parents, :3]
    bones[:, :, 3] = np.maximum(f[:, :, 3], f[:, parents, 3])
    return bones[0] if single else bones


def segment_video(seq: SkeletonSequence, k: int = 50, stride: int = 25) -> list[Segment]:
    """Cut a video into K-frame windows every ``stride`` frames.

    A final window at T-K is added when the stride grid undershoots the end;
    videos shorter than K yield one segment padded by cyclic repetition.
    """
    if k <= 0 or not 0 < stride <= k:
        raise ValueError("require k > 0 and 0 < stride <= k")
    t = seq.num_frames
    if t == 0:
        raise ValueError("empty sequence")

    def make(start: int, frames: np.ndarray) -> Segment:
        return Segment(
            video_id=seq.video_id,
            start=start,
            person_id=seq.person_id,
            camera_id=seq.camera_id,
            clothes_id=seq.clothes_id,
            frames=frames,
        )

    if t < k:
        idx = np.arange(k) % t
        return [make(0, seq.frames[idx])]
    starts = list(range(0, t - k + 1, stride))
    if t > k and (t - k) % stride != 0:
        starts.append(t - k)
    return [make(s, seq.frames[s : s + k]) for s in starts]


def _sequence_from_record(rec: dict, line_no: int, topo: Topology | None) -> SkeletonSequence:
    for key in ("video_id", "person_id", "camera_id", "clothes_id", "frames"):
        if key not in rec:
            raise SchemaError(f"line {line_no}: missing key {key!r}")
    try:
        frames = np.asarray(rec["frames"], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"line {line_no}: frames are not a rectangular numeric array: {exc}")
    if frames.ndim != 3 or frames.shape[2] != 4:
        raise SchemaError(f"line {line_no}: frames must be T x J x 4")
    if topo is not None and frames.shape[1] != topo.joint_count:
        raise SchemaError(
            f"line {line_no}: {frames.shape[1]} joints, topology declares {topo.joint_count}"
        )
    try:
        return SkeletonSequence(
            video_id=str(rec["video_id"]),
            person_id=str(rec["person_id"]),
            camera_id=str(rec["camera_id"]),
            clothes_id=str(rec["clothes_id"]),
            frames=frames,
        )
    except SchemaError as exc:
        raise SchemaError(f"line {line_no}: {exc}")


def center_on_root(seq: SkeletonSequence, topo: Topology) -> SkeletonSequence:
    """Subtract the root joint position from every joint, per frame."""
    frames = seq.frames.copy()
    frames[:, :, :3] -= frames[:, topo.root : topo.root + 1, :3]
    return SkeletonSequence(
        video_id=seq.video_id,
        person_id=seq.person_id,
        camera_id=seq.camera_id,
        clothes_id=seq.clothes_id,
        frames=frames,
    )


def parse_dataset(
    stream: IO[bytes] | IO[str] | bytes | str,
    topo: Topology | None = None,
    center: bool = False,
) -> list[SkeletonSequence]:
    """Parse a JSON Lines dataset; joint counts are checked against ``topo``."""
    if isinstance(stream, bytes):
        text = stream.decode("utf-8")
    elif isinstance(stream, str):
        text = stream
    else:
        text = stream.read()
        if isinstance(text, bytes):
            text = text.decode("utf-8")
    sequences = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"line {line_no}: {exc}")
        if not isinstance(rec, dict):
            raise ParseError(f"line {line_no}: record is not an object")
        seq = _sequence_from_record(rec, line_no, topo)
        if center:
            if topo is None:
                raise ValueError("center=True requires a topology")
            seq = center_on_root(seq, topo)
        sequences.append(seq)
    return sequences


def serialize_dataset(sequences: Iterable[SkeletonSequence]) -> str:
    lines = []
    for seq in sequences:
        rec = {
            "video_id": seq.video_id,
            "person_id": seq.person_id,
            "camera_id": seq.camera_id,
            "clothes_id": seq.clothes_id,
            "frames": seq.frames.tolist(),
        }
        lines.append(json.dumps(rec))
    return "\n".join(lines) + ("\n" if lines else "")


def load_dataset(path: str | Path, topo: Topology | None = None, center: bool = False):
    with open(path, "rb") as fh:
        return parse_dataset(fh, topo=topo, center=center)


def write_dataset(sequences: Iterable[SkeletonSequence], path: str | Path):
    Path(path).write_text(serialize_dataset(sequences), encoding="utf-8")


def load_topology(path: str | Path) -> Topology:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    for key in ("joint_count", "root", "edges"):
        if key not in obj:
            raise SchemaError(f"topology file missing key {key!r}")
    return Topology(
        joint_count=int(obj["joint_count"]),
        root=int(obj["root"]),
        edges=tuple((int(p), int(c)) for p, c in obj["edges"]),
    )


def save_topology(topo: Topology, path: str | Path):
    obj = {
        "joint_count": topo.joint_count,
        "root": topo.root,
        "edges": [[p, c] for p, c in topo.edges],
    }
    Path(path).write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")
