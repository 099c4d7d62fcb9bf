"""Seeded synthetic gait generator.

Each identity is a fixed skeleton (per-limb segment lengths) driven by
sinusoidal joint swings at an identity-specific frequency, with
contralateral phase structure (left leg with right arm, and vice versa).
Clothes and camera ids are attached as labels only; the joint
trajectories never read them, so retrieval quality cannot depend on
clothes by construction.

Identity parameters sit on coarse grids with small jitter: frequencies
step by 0.06 Hz over id % 12 and amplitude scales by 0.06 over id // 12,
which keeps any two of the first 72 ids separated by at least 0.03 in one
of the two coordinates.  Beyond that range separation relies on the
random draws alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DEFAULT_TOPOLOGY, SkeletonSequence, Topology

FPS = 16.0

LEFT_ARM = frozenset({13, 15, 17, 19, 21})
RIGHT_ARM = frozenset({14, 16, 18, 20, 22})
LEFT_LEG = frozenset({25, 27, 29, 31})
RIGHT_LEG = frozenset({26, 28, 30, 32})
TORSO = frozenset({11, 12, 24})

GROUP_PHASE = {
    "left_leg": 0.0,
    "right_leg": np.pi,
    "left_arm": np.pi,
    "right_arm": 0.0,
    "torso": 0.0,
    "head": 0.0,
}
GROUP_AMPLITUDE = {
    "left_leg": 0.55,
    "right_leg": 0.55,
    "left_arm": 0.45,
    "right_arm": 0.45,
    "torso": 0.04,
    "head": 0.03,
}
DEPTH_DECAY = 0.75
DEPTH_PHASE_LAG = 0.4

# rest offset of each joint from its parent: x lateral, y up, z forward
_REST = {
    24: (0.30, 0.00, 0.00),
    11: (0.00, 0.55, 0.00),
    12: (0.00, 0.55, 0.00),
    13: (-0.06, -0.28, 0.00),
    14: (0.06, -0.28, 0.00),
    15: (0.00, -0.26, 0.00),
    16: (0.00, -0.26, 0.00),
    17: (-0.03, -0.07, 0.02),
    19: (0.00, -0.08, 0.03),
    21: (0.03, -0.06, 0.02),
    18: (0.03, -0.07, 0.02),
    20: (0.00, -0.08, 0.03),
    22: (-0.03, -0.06, 0.02),
    25: (0.00, -0.45, 0.00),
    26: (0.00, -0.45, 0.00),
    27: (0.00, -0.42, 0.00),
    28: (0.00, -0.42, 0.00),
    29: (0.00, -0.06, -0.05),
    30: (0.00, -0.06, -0.05),
    31: (0.00, 0.02, 0.15),
    32: (0.00, 0.02, 0.15),
    0: (0.15, 0.25, 0.08),
    1: (-0.03, 0.02, 0.00),
    2: (-0.02, 0.00, 0.00),
    3: (-0.02, 0.00, 0.00),
    7: (-0.03, -0.02, -0.02),
    4: (0.03, 0.02, 0.00),
    5: (0.02, 0.00, 0.00),
    6: (0.02, 0.00, 0.00),
    8: (0.03, -0.02, -0.02),
    9: (-0.02, -0.04, 0.02),
    10: (0.02, -0.04, 0.02),
}


def _group_of(child: int) -> str:
    if child in LEFT_ARM:
        return "left_arm"
    if child in RIGHT_ARM:
        return "right_arm"
    if child in LEFT_LEG:
        return "left_leg"
    if child in RIGHT_LEG:
        return "right_leg"
    if child in TORSO:
        return "torso"
    return "head"


def _edge_depths(topo: Topology) -> dict[int, int]:
    """Chain position of each edge within its limb group, keyed by child."""
    parents = topo.parents
    depths = {}
    for _, child in topo.edges:
        group = _group_of(child)
        d, node = 0, child
        while True:
            p = parents[node]
            if p < 0 or _group_of(p) != group:
                break
            d += 1
            node = p
        depths[child] = d
    return depths


@dataclass(frozen=True)
class GaitIdentity:
    """Fixed skeleton proportions plus the gait oscillation parameters.

    rest_offsets maps child joint -> (3,) offset from its parent at rest;
    amplitudes and phases map child joint -> swing angle (radians) and
    phase of the edge ending at that joint.
    """

    identity_id: int
    frequency: float
    rest_offsets: dict[int, np.ndarray]
    amplitudes: dict[int, float]
    phases: dict[int, float]

    def __post_init__(self):
        if not self.frequency > 0:
            raise ValueError("frequency must be positive")
        for child, off in self.rest_offsets.items():
            if not np.linalg.norm(off) > 0:
                raise ValueError(f"zero-length limb at joint {child}")

    @property
    def mean_limb_length(self) -> float:
        return float(
            np.mean([np.linalg.norm(v) for v in self.rest_offsets.values()])
        )


def generate_identity(
    seed: int, identity_id: int, topo: Topology = DEFAULT_TOPOLOGY
) -> GaitIdentity:
    rng = np.random.default_rng([seed, identity_id, 0x1DE])
    frequency = 0.7 + 0.06 * (identity_id % 12) + rng.uniform(-0.015, 0.015)
    amp_scale = 0.85 + 0.06 * ((identity_id // 12) % 6) + rng.uniform(-0.015, 0.015)
    group_scale = {
        g: rng.uniform(0.85, 1.2)
        for g in ("left_arm", "right_arm", "left_leg", "right_leg", "torso", "head")
    }
    group_dev = {g: rng.uniform(-0.25, 0.25) for g in GROUP_PHASE}
    depths = _edge_depths(topo)
    rest, amps, phases = {}, {}, {}
    for _, child in topo.edges:
        g = _group_of(child)
        rest[child] = np.array(_REST[child]) * group_scale[g]
        amps[child] = GROUP_AMPLITUDE[g] * amp_scale * DEPTH_DECAY ** depths[child]
        phases[child] = GROUP_PHASE[g] + group_dev[g] + DEPTH_PHASE_LAG * depths[child]
    return GaitIdentity(
        identity_id=identity_id,
        frequency=frequency,
        rest_offsets=rest,
        amplitudes=amps,
        phases=phases,
    )


def _children_of(topo: Topology) -> dict[int, list[int]]:
    out: dict[int, list[int]] = {j: [] for j in range(topo.joint_count)}
    for p, c in topo.edges:
        out[p].append(c)
    return out


def generate_video(
    identity: GaitIdentity,
    clothes_id: str,
    camera_id: str,
    num_frames: int,
    noise_level: float,
    seed: int,
    video_id: str | None = None,
    topo: Topology = DEFAULT_TOPOLOGY,
) -> SkeletonSequence:
    """Render one video of an identity walking in place on a treadmill.

    The random stream is seeded from (seed, identity) only: clothes_id and
    camera_id are attached to the output as labels and never influence the
    trajectories.  Distinct seeds change the phase origin and the jitter,
    nothing else.
    """
    if num_frames < 1:
        raise ValueError("num_frames must be at least 1")
    rng = np.random.default_rng([seed, identity.identity_id, 0x51D])
    t0 = rng.uniform(0.0, 1.0 / identity.frequency)
    jitter = rng.standard_normal((num_frames, topo.joint_count, 3))
    conf_noise = rng.standard_normal((num_frames, topo.joint_count))

    t = np.arange(num_frames) / FPS + t0
    omega = 2.0 * np.pi * identity.frequency
    pos = np.zeros((num_frames, topo.joint_count, 3))
    children = _children_of(topo)
    stack = [topo.root]
    while stack:
        parent = stack.pop()
        for child in children[parent]:
            theta = identity.amplitudes[child] * np.sin(
                omega * t + identity.phases[child]
            )
            u = identity.rest_offsets[child]
            cos, sin = np.cos(theta), np.sin(theta)
            # swing about the lateral axis: y and z rotate, x is carried
            offset = np.stack(
                [
                    np.full(num_frames, u[0]),
                    u[1] * cos - u[2] * sin,
                    u[1] * sin + u[2] * cos,
                ],
                axis=1,
            )
            pos[:, child] = pos[:, parent] + offset
            stack.append(child)

    ref = identity.mean_limb_length
    frames = np.empty((num_frames, topo.joint_count, 4))
    frames[:, :, :3] = pos + noise_level * ref * jitter
    frames[:, :, 3] = np.clip(1.0 - noise_level * np.abs(conf_noise), 0.0, 1.0)
    if video_id is None:
        video_id = f"p{identity.identity_id:03d}_{clothes_id}_s{seed}"
    return SkeletonSequence(
        video_id=video_id,
        person_id=f"p{identity.identity_id:03d}",
        camera_id=camera_id,
        clothes_id=clothes_id,
        frames=frames,
    )


def generate_dataset(
    seed: int,
    num_identities: int = 10,
    clothes_per_identity: int = 2,
    videos_per_clothes: int = 4,
    min_frames: int = 60,
    max_frames: int = 160,
    noise_level: float = 0.02,
    num_cameras: int = 2,
    topo: Topology = DEFAULT_TOPOLOGY,
) -> list[SkeletonSequence]:
    """Full grid of identities x clothes x videos with varied lengths."""
    if num_identities < 1 or clothes_per_identity < 1 or videos_per_clothes < 1:
        raise ValueError("all counts must be at least 1")
    if not 1 <= min_frames <= max_frames:
        raise ValueError("need 1 <= min_frames <= max_frames")
    length_rng = np.random.default_rng([seed, 0x7E4])
    videos = []
    for pid in range(num_identities):
        identity = generate_identity(seed, pid, topo)
        for ci in range(clothes_per_identity):
            for vi in range(videos_per_clothes):
                num_frames = int(length_rng.integers(min_frames, max_frames + 1))
                video_seed = seed * 1_000_003 + pid * 1009 + ci * 101 + vi
                videos.append(
                    generate_video(
                        identity,
                        clothes_id=f"c{ci}",
                        camera_id=f"cam{vi % num_cameras}",
                        num_frames=num_frames,
                        noise_level=noise_level,
                        seed=video_seed,
                        video_id=f"p{pid:03d}_c{ci}_v{vi}",
                        topo=topo,
                    )
                )
    return videos


def benchmark_split(
    videos: list[SkeletonSequence], videos_per_clothes: int = 4
) -> tuple[list[SkeletonSequence], list[SkeletonSequence], list[SkeletonSequence]]:
    """Per (person, clothes) block: all but the last two train, then one
    query and one gallery video."""
    if videos_per_clothes < 3:
        raise ValueError("need at least 3 videos per clothes for a split")
    groups: dict[tuple[str, str], list[SkeletonSequence]] = {}
    for v in videos:
        groups.setdefault((v.person_id, v.clothes_id), []).append(v)
    train, query, gallery = [], [], []
    for key in sorted(groups):
        block = groups[key]
        if len(block) != videos_per_clothes:
            raise ValueError(f"group {key} has {len(block)} videos, expected {videos_per_clothes}")
        train.extend(block[:-2])
        query.append(block[-2])
        gallery.append(block[-1])
    return train, query, gallery
