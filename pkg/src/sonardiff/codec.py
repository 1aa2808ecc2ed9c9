"""Image <-> latent codec.

The default codec is exact: a space-to-depth rearrangement with block size
``b`` followed by the affine map ``[0, 1] -> [-1, 1]``.  An image of shape
``(H, W, C)`` becomes a latent of shape ``(H/b, W/b, C*b*b)``.

Decoding inverts the map to machine precision.  Latents remember the
dynamic range of their source image, and for quantized sources (8-bit
PNGs) decoding snaps back onto the ``k / 255`` grid, so those round trips
are bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ConfigurationError, ShapeError, ValidationError


@dataclass(frozen=True)
class ImageGrid:
    """H x W x C pixels in [0, 1].

    ``dynamic_range`` records the provenance scale (255 for 8-bit sources) and
    is what PSNR/SSIM use as ``MAX``/``L`` when pixels are rescaled back.
    """

    pixels: np.ndarray
    dynamic_range: float = 1.0

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3:
            raise ShapeError(f"image must be H x W x C, got shape {px.shape}")
        h, w, c = px.shape
        if h < 8 or w < 8 or c not in (1, 3):
            raise ShapeError(f"image must have H, W >= 8 and C in {{1, 3}}, got {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValidationError("pixel values must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self):
        return self.pixels.shape


@dataclass(frozen=True)
class LatentGrid:
    values: np.ndarray
    source_shape: tuple
    dynamic_range: float = 1.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise ShapeError(f"latent must be h x w x c, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("latent contains non-finite values")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "source_shape", tuple(int(s) for s in self.source_shape))

    @property
    def shape(self):
        return self.values.shape


class SpaceToDepthCodec:
    """Exact invertible codec; see module docstring."""

    def __init__(self, block: int = 2, channels: int = 1):
        if block < 1:
            raise ConfigurationError("block size must be positive")
        if channels not in (1, 3):
            raise ConfigurationError("channels must be 1 or 3")
        self.block = int(block)
        self.channels = int(channels)

    @property
    def latent_channels(self) -> int:
        return self.channels * self.block ** 2

    def latent_shape(self, image_shape):
        h, w, c = image_shape
        b = self.block
        if h % b or w % b:
            raise ConfigurationError(f"image size {h}x{w} is not divisible by block {b}")
        return h // b, w // b, c * b * b

    def config(self) -> dict:
        return {"kind": "space_to_depth", "block": self.block, "channels": self.channels}

    # array-level transforms, leading batch dims allowed

    def encode_array(self, px: np.ndarray) -> np.ndarray:
        px = np.asarray(px, dtype=np.float64)
        *lead, h, w, c = px.shape
        if c != self.channels:
            raise ShapeError(f"codec expects {self.channels} channels, got {c}")
        hh, ww, cc = self.latent_shape((h, w, c))
        b = self.block
        z = px.reshape(*lead, hh, b, ww, b, c)
        n = len(lead)
        z = np.moveaxis(z, n + 1, n + 2)  # (..., hh, ww, b, b, c)
        z = z.reshape(*lead, hh, ww, cc)
        return 2.0 * z - 1.0

    def decode_array(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        *lead, hh, ww, cc = z.shape
        b = self.block
        if cc != self.latent_channels:
            raise ShapeError(f"latent has {cc} channels, codec expects {self.latent_channels}")
        n = len(lead)
        x = z.reshape(*lead, hh, ww, b, b, self.channels)
        x = np.moveaxis(x, n + 2, n + 1)  # (..., hh, b, ww, b, c)
        x = x.reshape(*lead, hh * b, ww * b, self.channels)
        return np.clip((x + 1.0) / 2.0, 0.0, 1.0)

    def encode(self, img) -> LatentGrid:
        if not isinstance(img, ImageGrid):
            img = ImageGrid(img)
        return LatentGrid(self.encode_array(img.pixels), img.shape, img.dynamic_range)

    def decode(self, z) -> ImageGrid:
        if isinstance(z, LatentGrid):
            expected = self.latent_shape(z.source_shape)
            if expected != z.shape:
                raise ShapeError(f"latent shape {z.shape} does not match source shape {z.source_shape}")
            px = self.decode_array(z.values)
            L = float(z.dynamic_range)
            if L > 1.0:
                # quantized provenance: snap back onto the k / L grid
                px = np.round(px * L) / L
            return ImageGrid(px, L)
        return ImageGrid(self.decode_array(np.asarray(z, dtype=np.float64)))

    # torch helpers: batches of images (N, H, W, C) <-> latents (N, c, h, w)

    def images_to_tensor(self, images, dtype=torch.float32) -> torch.Tensor:
        z = self.encode_array(np.stack([getattr(im, "pixels", im) for im in images]))
        return torch.as_tensor(np.moveaxis(z, -1, 1).copy(), dtype=dtype)

    def tensor_to_images(self, z: torch.Tensor) -> np.ndarray:
        arr = z.detach().to(torch.float64).cpu().numpy()
        return self.decode_array(np.moveaxis(arr, 1, -1))


def encode(img, codec: SpaceToDepthCodec | None = None) -> LatentGrid:
    return (codec or SpaceToDepthCodec()).encode(img)


def decode(z, codec: SpaceToDepthCodec | None = None) -> ImageGrid:
    return (codec or SpaceToDepthCodec()).decode(z)


def load_png(path, channels: int | None = None) -> ImageGrid:
    with Image.open(path) as im:
        if channels == 1 or (channels is None and im.mode in ("L", "I", "I;16", "1")):
            im = im.convert("L")
        else:
            im = im.convert("RGB")
        px = np.asarray(im, dtype=np.float64) / 255.0
    return ImageGrid(px, dynamic_range=255.0)


def to_uint8(px: np.ndarray) -> np.ndarray:
    return np.round(np.clip(px, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path, img) -> Path:
    px = img.pixels if isinstance(img, ImageGrid) else np.asarray(img)
    if px.ndim == 3 and px.shape[-1] == 1:
        px = px[:, :, 0]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(px)).save(path, format="PNG")
    return path


def save_grid(path, images, ncols: int | None = None, pad: int = 2) -> Path:
    """Tile equally sized images into one PNG."""
    imgs = [np.asarray(getattr(im, "pixels", im)) for im in images]
    imgs = [im if im.ndim == 3 else im[:, :, None] for im in imgs]
    n = len(imgs)
    ncols = ncols or int(np.ceil(np.sqrt(n)))
    nrows = int(np.ceil(n / ncols))
    h, w, c = imgs[0].shape
    canvas = np.ones((nrows * (h + pad) + pad, ncols * (w + pad) + pad, c))
    for k, im in enumerate(imgs):
        r, q = divmod(k, ncols)
        y, x = pad + r * (h + pad), pad + q * (w + pad)
        canvas[y:y + h, x:x + w] = im
    return save_png(path, canvas)
