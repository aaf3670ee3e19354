import numpy as np
import pytest

from seqpool import tensorcore as tc
from seqpool.dataio import features_from_bytes, features_to_bytes
from seqpool.encoder import EncoderParams, augment, encode_frame, encode_passthrough, mirror
from seqpool.errors import DimensionError, DomainError, FormatError
from seqpool.tensorcore import RngStream

from helpers import check_gradients


def small_encoder(seed=0, h=8, w=6, d1=4):
    return EncoderParams.init(RngStream(seed), h, w, d1=d1, channels=(3, 2))


def test_zero_frame_zero_params():
    params = small_encoder()
    params = EncoderParams({k: np.zeros_like(v) for k, v in params.arrays.items()}, params.input_hw)
    out = encode_frame(np.zeros((8, 6, 5)), params)
    np.testing.assert_array_equal(out.value, np.zeros(4))


def test_output_dimension_default():
    params = EncoderParams.init(RngStream(1))
    assert params.out_dim == 128 and params.input_hw == (48, 64)
    assert encode_frame(np.zeros((48, 64, 5)), params).shape == (128,)


def test_channel_count_checked():
    with pytest.raises(FormatError):
        encode_frame(np.zeros((8, 6, 3)), small_encoder())


def test_frame_size_checked():
    with pytest.raises(DimensionError):
        encode_frame(np.zeros((12, 6, 5)), small_encoder())


def test_deterministic_inference(rng):
    params = small_encoder()
    frame = rng.uniform(size=(8, 6, 5))
    a = encode_frame(frame, params, RngStream(1), training=False).value
    b = encode_frame(frame, params, RngStream(2), training=False).value
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("seed", range(3))
def test_gradient_all_blocks(seed):
    r = np.random.default_rng(seed)
    frame = np.concatenate([r.uniform(size=(8, 6, 3)), r.uniform(-1, 1, size=(8, 6, 2))], axis=-1)
    params = small_encoder(seed)
    check_gradients(lambda n: tc.total(tc.square(encode_frame(frame, None, nodes=n))), params.arrays)


def test_checkpoint_roundtrip(tmp_path):
    params = small_encoder(3)
    params.save(tmp_path / "e.sqen")
    back = EncoderParams.load(tmp_path / "e.sqen")
    assert back.input_hw == params.input_hw
    assert list(back.arrays) == list(params.arrays)
    assert back.to_bytes() == params.to_bytes()
    with pytest.raises(FormatError):
        EncoderParams.from_bytes(params.to_bytes()[:-5])


class TestPassthrough:
    def test_identity(self):
        np.testing.assert_array_equal(encode_passthrough([1.0, 2.0, 3.0], 3).value, [1.0, 2.0, 3.0])

    def test_wrong_dimension(self):
        with pytest.raises(DimensionError):
            encode_passthrough([1.0, 2.0, 3.0, 4.0], 3)

    def test_file_roundtrip(self, rng):
        f = rng.normal(size=(5, 3))
        back = features_from_bytes(features_to_bytes(encode_passthrough(f, 3).value))
        assert back.tobytes() == f.tobytes()


class TestAugment:
    def test_full_crop_no_mirror_is_identity(self, rng):
        frames = rng.uniform(size=(3, 8, 6, 5))
        out, flipped = augment(frames, RngStream(0), (8, 6), 0.0)
        assert not flipped
        np.testing.assert_array_equal(out, frames)

    def test_mirror_involution(self, rng):
        frame = rng.uniform(size=(8, 6, 5))
        np.testing.assert_array_equal(mirror(mirror(frame)), frame)

    def test_mirror_negates_flow_x_only(self, rng):
        frame = rng.uniform(-1, 1, size=(4, 6, 5))
        m = mirror(frame)
        np.testing.assert_array_equal(m[:, ::-1, 3], -frame[..., 3])
        np.testing.assert_array_equal(m[:, ::-1, 4], frame[..., 4])
        np.testing.assert_array_equal(m[:, ::-1, :3], frame[..., :3])

    def test_same_draw_for_all_frames(self, rng):
        frame = rng.uniform(size=(8, 6, 5))
        frames = np.stack([frame] * 4)
        out, _ = augment(frames, RngStream(9), (5, 4), 0.5)
        for t in range(1, 4):
            np.testing.assert_array_equal(out[t], out[0])

    def test_crop_within_frame(self, rng):
        frame = rng.uniform(size=(8, 6, 5))
        out, flipped = augment(frame, RngStream(4), (5, 4), 0.5)
        if flipped:
            out = mirror(out)
        hits = [(i, j) for i in range(4) for j in range(3) if np.array_equal(frame[i:i + 5, j:j + 4], out)]
        assert len(hits) == 1

    def test_mirror_frequency(self):
        frame = np.zeros((4, 4, 5))
        rng = RngStream(2024)
        flips = sum(augment(frame, rng, (4, 4), 0.5)[1] for _ in range(10_000))
        assert abs(flips / 10_000 - 0.5) < 0.02

    def test_crop_too_large(self):
        with pytest.raises(DomainError):
            augment(np.zeros((4, 4, 5)), RngStream(0), (5, 4))
