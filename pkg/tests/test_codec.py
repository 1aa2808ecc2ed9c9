import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from sonardiff.codec import ImageGrid, LatentGrid, SpaceToDepthCodec, decode, encode, load_png, save_png
from sonardiff.errors import ConfigurationError, ShapeError, ValidationError


def test_shape_law_32x32():
    z = encode(ImageGrid(np.zeros((32, 32))))
    assert z.shape == (16, 16, 4)
    assert z.source_shape == (32, 32, 1)


def test_zero_image_maps_to_constant_latent():
    z = encode(ImageGrid(np.zeros((16, 16, 1))))
    assert np.all(z.values == -1.0)


def test_random_image_round_trip_machine_precision(rng):
    x = ImageGrid(rng.random((16, 16, 1)))
    back = decode(encode(x))
    assert np.max(np.abs(back.pixels - x.pixels)) <= 1e-15


def test_rng_grid_round_trip_is_bit_exact(rng):
    x = ImageGrid(rng.random((32, 32, 1)))
    assert np.array_equal(decode(encode(x)).pixels, x.pixels)


def test_8bit_round_trip_is_bit_exact(tmp_path):
    levels = (np.arange(32 * 32) % 256).reshape(32, 32).astype(np.uint8)
    path = save_png(tmp_path / "ramp.png", levels / 255.0)
    img = load_png(path)
    back = decode(encode(img))
    assert np.array_equal(back.pixels, img.pixels)
    save_png(tmp_path / "again.png", back)
    assert (tmp_path / "again.png").read_bytes() == path.read_bytes()


def test_hand_rearrangement_2x2():
    # one 2x2 block -> a single latent pixel with 4 channels in raster order
    px = np.tile(np.array([[0.0, 0.25], [0.5, 1.0]]), (4, 4))
    z = SpaceToDepthCodec().encode_array(px[:, :, None])
    np.testing.assert_array_equal(z[0, 0], [-1.0, -0.5, 0.0, 1.0])
    assert z.shape == (4, 4, 4)


def test_decode_clamps_out_of_range_latents():
    z = LatentGrid(np.full((4, 4, 4), 3.0), (8, 8, 1))
    assert np.all(decode(z).pixels == 1.0)
    z = LatentGrid(np.full((4, 4, 4), -7.0), (8, 8, 1))
    assert np.all(decode(z).pixels == 0.0)


def test_indivisible_size_is_configuration_error():
    with pytest.raises(ConfigurationError):
        SpaceToDepthCodec(block=3).encode(ImageGrid(np.zeros((16, 16))))


def test_inconsistent_latent_metadata_is_shape_error():
    with pytest.raises(ShapeError):
        decode(LatentGrid(np.zeros((4, 4, 4)), (16, 16, 1)))


@pytest.mark.parametrize("bad", [np.full((8, 8), 1.5), np.full((8, 8), -0.1), np.full((8, 8), np.nan)])
def test_image_values_validated(bad):
    with pytest.raises(ValidationError):
        ImageGrid(bad)


@pytest.mark.parametrize("shape", [(4, 8), (8, 8, 2), (8,)])
def test_image_shape_validated(shape):
    with pytest.raises(ShapeError):
        ImageGrid(np.zeros(shape))


def test_latent_rejects_non_finite():
    with pytest.raises(ValidationError):
        LatentGrid(np.full((4, 4, 4), np.inf), (8, 8, 1))


def test_rgb_codec_channels():
    codec = SpaceToDepthCodec(block=2, channels=3)
    z = codec.encode(ImageGrid(np.zeros((8, 8, 3))))
    assert z.shape == (4, 4, 12)


def test_tensor_helpers_round_trip(rng):
    codec = SpaceToDepthCodec()
    imgs = [ImageGrid(rng.random((16, 16))) for _ in range(3)]
    t = codec.images_to_tensor(imgs, dtype=torch.float64)
    assert t.shape == (3, 4, 8, 8)
    back = codec.tensor_to_images(t)
    for a, b in zip(imgs, back):
        np.testing.assert_allclose(b, a.pixels, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.sampled_from([(8, 8, 1), (16, 8, 1), (8, 16, 3)]),
              elements=st.floats(0.0, 1.0, allow_nan=False)))
def test_round_trip_property(px):
    codec = SpaceToDepthCodec(channels=px.shape[-1])
    img = ImageGrid(px)
    z = codec.encode(img)
    h, w, c = px.shape
    assert z.shape == (h // 2, w // 2, c * 4)
    assert z.values.size == px.size
    np.testing.assert_allclose(codec.decode(z).pixels, px, rtol=0, atol=2e-16)


@settings(max_examples=40, deadline=None)
@given(arrays(np.uint8, (8, 8)))
def test_quantized_round_trip_property(levels):
    img = ImageGrid(levels / 255.0, dynamic_range=255.0)
    assert np.array_equal(decode(encode(img)).pixels, img.pixels)
