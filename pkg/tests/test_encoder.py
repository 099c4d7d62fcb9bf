import numpy as np
import pytest

from skelid.data import DEFAULT_TOPOLOGY, AdjacencySet, Segment, Topology, build_adjacency
from skelid.encoder import (
    DEFAULT_CHANNELS,
    GcnBlock,
    StreamEncoder,
    TwoStreamEncoder,
    block_forward,
    encode_segment,
    encode_segments,
    load_encoder,
    save_encoder,
    segment_to_tensors,
    spatial_gcn,
)
from skelid.ops import ParamTensor, grad_check

CHAIN2 = Topology(joint_count=2, root=0, edges=((0, 1),))
CHAIN3 = Topology(joint_count=3, root=0, edges=((0, 1), (1, 2)))


def make_block(c_in, c_out, seed=0):
    return GcnBlock.create(c_in, c_out, np.random.default_rng(seed), "t")


def zero_block(c_in, c_out):
    z = lambda name, shape: ParamTensor(name, np.zeros(shape))
    return GcnBlock(
        z("w0", (c_out, c_in)),
        z("w1", (c_out, c_in)),
        z("w2", (c_out, c_in)),
        z("k", (c_out, c_out, 9)),
        z("b", (c_out,)),
    )


def make_segment(t=50, j=33, seed=0, **labels):
    rng = np.random.default_rng(seed)
    frames = rng.normal(size=(t, j, 4))
    frames[:, :, 3] = rng.uniform(0, 1, size=(t, j))
    ids = dict(video_id="v", person_id="p", camera_id="c", clothes_id="k")
    ids.update(labels)
    return Segment(start=0, frames=frames, **ids)


class TestSpatialGcn:
    def test_identity_route(self):
        adj = AdjacencySet(a0=np.zeros((4, 4)), a1=np.zeros((4, 4)), a2=np.eye(4))
        block = zero_block(3, 3)
        block.w2.value[:] = np.eye(3)
        f = np.random.default_rng(1).normal(size=(3, 5, 4))
        out = spatial_gcn(f, block, adj, activate=False)
        np.testing.assert_allclose(out, f)

    def test_one_step_message_pass(self):
        adj = build_adjacency(CHAIN2)
        block = zero_block(1, 1)
        block.w0.value[:] = 1.0
        f = np.array([[[1.0, 0.0]]])  # node0 carries 1, node1 carries 0
        out = spatial_gcn(f, block, adj, activate=False)
        np.testing.assert_array_equal(out, [[[0.0, 1.0]]])

    def test_zero_input(self):
        adj = build_adjacency(CHAIN3)
        out = spatial_gcn(np.zeros((4, 6, 3)), make_block(4, 8), adj, activate=False)
        np.testing.assert_array_equal(out, np.zeros((8, 6, 3)))

    def test_relu_applied_by_default(self):
        adj = AdjacencySet(a0=np.zeros((2, 2)), a1=np.zeros((2, 2)), a2=np.eye(2))
        block = zero_block(1, 1)
        block.w2.value[:] = 1.0
        f = np.array([[[-3.0, 2.0]]])
        np.testing.assert_array_equal(spatial_gcn(f, block, adj), [[[0.0, 2.0]]])

    def test_node_count_checked(self):
        adj = build_adjacency(CHAIN3)
        with pytest.raises(ValueError):
            spatial_gcn(np.zeros((4, 6, 5)), make_block(4, 8), adj)


class TestBlockForward:
    def test_first_block_shape(self):
        adj = build_adjacency(DEFAULT_TOPOLOGY)
        out = block_forward(np.ones((4, 50, 33)), make_block(4, 16), adj)
        assert out.shape == (16, 25, 33)

    def test_last_block_shape(self):
        adj = build_adjacency(DEFAULT_TOPOLOGY)
        out = block_forward(np.ones((128, 3, 33)), make_block(128, 256), adj)
        assert out.shape == (256, 1, 33)

    def test_zero_weights(self):
        adj = build_adjacency(CHAIN3)
        out = block_forward(np.ones((4, 10, 3)), zero_block(4, 8), adj)
        np.testing.assert_array_equal(out, np.zeros((8, 5, 3)))


class TestStreamEncoder:
    def test_dimension_chain(self):
        enc = TwoStreamEncoder.create(DEFAULT_TOPOLOGY, seed=1)
        stream = enc.joints_stream
        assert stream.channels == (4, 16, 32, 64, 128, 256)
        h = np.random.default_rng(0).normal(size=(1, 4, 50, 33))
        expected = [(16, 25), (32, 12), (64, 6), (128, 3), (256, 1)]
        from skelid.encoder import _block_forward

        for block, (c, t) in zip(stream.blocks, expected):
            h, _ = _block_forward(h, block, stream.adjacency)
            assert h.shape == (1, c, t, 33)
        desc, _ = stream.forward(np.random.default_rng(0).normal(size=(1, 4, 50, 33)))
        assert desc.shape == (1, 256)

    def test_zero_input_zero_descriptor(self):
        enc = TwoStreamEncoder.create(DEFAULT_TOPOLOGY, channels=(4, 8, 16), seed=0)
        desc, _ = enc.joints_stream.forward(np.zeros((2, 4, 8, 33)))
        np.testing.assert_array_equal(desc, np.zeros((2, 16)))

    def test_deterministic(self):
        seg = make_segment(seed=3)
        enc = TwoStreamEncoder.create(DEFAULT_TOPOLOGY, seed=5)
        d1 = encode_segment(seg, enc)
        d2 = encode_segment(seg, enc)
        np.testing.assert_array_equal(d1, d2)

    def test_create_is_seeded(self):
        e1 = TwoStreamEncoder.create(DEFAULT_TOPOLOGY, channels=(4, 8), seed=9)
        e2 = TwoStreamEncoder.create(DEFAULT_TOPOLOGY, channels=(4, 8), seed=9)
        for p, q in zip(e1.params, e2.params):
            np.testing.assert_array_equal(p.value, q.value)
        e3 = TwoStreamEncoder.create(DEFAULT_TOPOLOGY, channels=(4, 8), seed=10)
        assert any((p.value != q.value).any() for p, q in zip(e1.params, e3.params))

    def test_rejects_broken_chain(self):
        adj = build_adjacency(CHAIN3)
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            StreamEncoder(
                blocks=[GcnBlock.create(4, 8, rng, "a"), GcnBlock.create(16, 32, rng, "b")],
                adjacency=adj,
            )

    def test_rejects_wrong_input_channels(self):
        adj = build_adjacency(CHAIN3)
        with pytest.raises(ValueError):
            StreamEncoder.create(adj, np.random.default_rng(0), channels=(3, 8))

    def test_no_learned_adjacency(self):
        enc = TwoStreamEncoder.create(DEFAULT_TOPOLOGY, seed=0)
        assert len(enc.params) == 2 * 5 * 5  # 2 streams, 5 blocks, 5 tensors each
        for p in enc.params:
            assert p.name.rsplit("/", 1)[1] in {"w0", "w1", "w2", "kernel", "bias"}
        assert not enc.joints_stream.adjacency.a0.flags.writeable


class TestEncodeSegment:
    def test_descriptor_length_and_finite(self):
        enc = TwoStreamEncoder.create(DEFAULT_TOPOLOGY, channels=(4, 8, 16), seed=2)
        desc = encode_segment(make_segment(seed=1), enc)
        assert desc.shape == (32,)
        assert np.isfinite(desc).all()

    def test_full_model_is_512(self):
        enc = TwoStreamEncoder.create(DEFAULT_TOPOLOGY, seed=2)
        desc = encode_segment(make_segment(seed=1), enc)
        assert desc.shape == (512,)

    def test_joints_then_bones_order(self):
        enc = TwoStreamEncoder.create(DEFAULT_TOPOLOGY, channels=(4, 8), seed=4)
        seg = make_segment(seed=6)
        joints, bones = segment_to_tensors(seg, enc.topology)
        dj, _ = enc.joints_stream.forward(joints[None])
        db, _ = enc.bones_stream.forward(bones[None])
        np.testing.assert_array_equal(encode_segment(seg, enc), np.concatenate([dj[0], db[0]]))

    def test_batch_permutation(self):
        enc = TwoStreamEncoder.create(DEFAULT_TOPOLOGY, channels=(4, 8), seed=4)
        a, b = make_segment(seed=1), make_segment(seed=2)
        fwd = encode_segments([a, b], enc)
        rev = encode_segments([b, a], enc)
        np.testing.assert_array_equal(fwd, rev[::-1])

    def test_batching_invariant(self):
        enc = TwoStreamEncoder.create(DEFAULT_TOPOLOGY, channels=(4, 8), seed=4)
        segs = [make_segment(seed=i) for i in range(5)]
        full = encode_segments(segs, enc, batch_size=64)
        split = encode_segments(segs, enc, batch_size=2)
        np.testing.assert_allclose(full, split, rtol=0, atol=0)

    def test_empty_batch(self):
        enc = TwoStreamEncoder.create(DEFAULT_TOPOLOGY, channels=(4, 8), seed=4)
        assert encode_segments([], enc).shape == (0, 16)


class TestBackward:
    def small_encoder(self, seed=0):
        return TwoStreamEncoder.create(CHAIN3, channels=(4, 3, 5), seed=seed)

    def random_inputs(self, n=2, t=4, j=3, seed=1):
        rng = np.random.default_rng(seed)
        return rng.normal(size=(n, 4, t, j)), rng.normal(size=(n, 4, t, j))

    def test_zero_upstream_zero_grads(self):
        enc = self.small_encoder()
        joints, bones = self.random_inputs()
        desc, cache = enc.forward_batch(joints, bones)
        enc.zero_grads()
        enc.backward(np.zeros_like(desc), cache)
        for p in enc.params:
            np.testing.assert_array_equal(p.grad, np.zeros_like(p.grad))

    def test_backward_without_cache(self):
        enc = self.small_encoder()
        with pytest.raises(ValueError):
            enc.backward(np.zeros((2, 10)), None)

    def test_streams_disjoint(self):
        enc = self.small_encoder()
        joints, bones = self.random_inputs(seed=2)
        _, bones2 = self.random_inputs(seed=3)
        rng = np.random.default_rng(4)
        ddesc = rng.normal(size=(2, enc.descriptor_dim))

        def joint_grads(bone_input):
            enc.zero_grads()
            _, cache = enc.forward_batch(joints, bone_input)
            enc.backward(ddesc, cache)
            return [p.grad.copy() for p in enc.joints_stream.params]

        for g1, g2 in zip(joint_grads(bones), joint_grads(bones2)):
            np.testing.assert_array_equal(g1, g2)

    def test_grad_check_small(self):
        enc = self.small_encoder(seed=6)
        joints, bones = self.random_inputs(seed=7)
        r = np.random.default_rng(8).normal(size=(2, enc.descriptor_dim))

        def forward_only():
            desc, _ = enc.forward_batch(joints, bones)
            return float(np.sum(desc * r))

        def loss_and_grad():
            desc, cache = enc.forward_batch(joints, bones)
            enc.zero_grads()
            enc.backward(r, cache)
            return float(np.sum(desc * r))

        err = grad_check(loss_and_grad, enc.params, forward=forward_only)
        assert err < 1e-6


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        enc = TwoStreamEncoder.create(DEFAULT_TOPOLOGY, channels=(4, 8, 16), seed=3)
        seg = make_segment(seed=5)
        before = encode_segment(seg, enc)
        path = tmp_path / "enc.ckpt"
        save_encoder(enc, path, extra_meta={"seed": 3})
        loaded, meta = load_encoder(path)
        assert meta["seed"] == 3
        assert meta["channels"] == [4, 8, 16]
        np.testing.assert_array_equal(encode_segment(seg, loaded), before)

    def test_byte_identical_saves(self, tmp_path):
        enc = TwoStreamEncoder.create(DEFAULT_TOPOLOGY, channels=(4, 8), seed=3)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_encoder(enc, p1)
        save_encoder(enc, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_rejects_other_tensor_files(self, tmp_path):
        from skelid.ops import save_tensors

        path = tmp_path / "x.bin"
        save_tensors(path, {"a": np.ones(3)}, meta={"kind": "other"})
        with pytest.raises(ValueError):
            load_encoder(path)
