"""Frozen linear image <-> latent codec standing in for the VAE.

Encoding is a 2x2 average pool per channel, a fixed 3 -> 4 channel mixing
matrix with orthonormal columns, and an affine normalization; decoding is the
exact inverse followed by nearest-neighbor upsampling and a [0, 1] clamp.
Because the maps are linear, decode(encode(x)) equals blockwise averaging of x
and encode(decode(z)) is exact on the codec's range.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .numerics import NumericsError, Rng, require_finite

IMAGE_SHAPE = (3, 16, 16)
LATENT_SHAPE = (4, 8, 8)


@dataclass
class LatentCodec:
    mix: np.ndarray  # [4, 3], orthonormal columns
    offset: np.ndarray  # [4]
    scale: np.ndarray  # [4]

    def weight_arrays(self) -> dict[str, np.ndarray]:
        return {"codec.mix": self.mix, "codec.offset": self.offset, "codec.scale": self.scale}


def make_mixing_matrix(rng: Rng) -> np.ndarray:
    """Seeded random 4x3 matrix with orthonormal columns (QR of a Gaussian)."""
    q, r = np.linalg.qr(rng.normal((4, 4), dtype=np.float64))
    q = q * np.sign(np.diag(r))  # fix sign convention so the result is seed-stable
    return q[:, :3].astype(np.float32)


def init_codec(rng: Rng) -> LatentCodec:
    """Codec with identity normalization; calibrate_codec sets the affine part."""
    return LatentCodec(
        mix=make_mixing_matrix(rng),
        offset=np.zeros(4, dtype=np.float32),
        scale=np.ones(4, dtype=np.float32),
    )


def calibrate_codec(codec: LatentCodec, probe_images: np.ndarray) -> LatentCodec:
    """Set offset/scale so latents are roughly zero mean, unit variance on the corpus."""
    mixed = np.stack([_mix_pool(codec, img) for img in probe_images])
    offset = mixed.mean(axis=(0, 2, 3)).astype(np.float32)
    scale = np.maximum(mixed.std(axis=(0, 2, 3)), 1e-3).astype(np.float32)
    return LatentCodec(mix=codec.mix, offset=offset, scale=scale)


def _avg_pool2(x: np.ndarray) -> np.ndarray:
    C, H, W = x.shape
    return x.reshape(C, H // 2, 2, W // 2, 2).mean(axis=(2, 4))


def _mix_pool(codec: LatentCodec, image: np.ndarray) -> np.ndarray:
    pooled = _avg_pool2(image)  # [3, 8, 8]
    return np.einsum("oc,chw->ohw", codec.mix, pooled)


def encode_image(codec: LatentCodec, image: np.ndarray) -> np.ndarray:
    """[3, 16, 16] image in [0, 1] -> [4, 8, 8] latent."""
    if image.shape != IMAGE_SHAPE:
        raise NumericsError(f"image shape {image.shape} != {IMAGE_SHAPE}")
    mixed = _mix_pool(codec, image)
    z = (mixed - codec.offset[:, None, None]) / codec.scale[:, None, None]
    return require_finite(z.astype(image.dtype, copy=False), "latent")


def decode_latent(codec: LatentCodec, z: np.ndarray) -> np.ndarray:
    """[4, 8, 8] latent -> [3, 16, 16] image, clamped to [0, 1]."""
    if z.shape != LATENT_SHAPE:
        raise NumericsError(f"latent shape {z.shape} != {LATENT_SHAPE}")
    require_finite(z, "latent")
    mixed = z * codec.scale[:, None, None] + codec.offset[:, None, None]
    pooled = np.einsum("oc,ohw->chw", codec.mix, mixed)  # pinv of orthonormal columns
    image = pooled.repeat(2, axis=1).repeat(2, axis=2)
    return np.clip(image, 0.0, 1.0).astype(z.dtype, copy=False)


MAGIC_IMG = b"IMG1"


def save_image(path, image: np.ndarray) -> None:
    """Raw image file: magic, u32 width, u32 height, interleaved RGB f32 LE."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise NumericsError(f"expected [3, H, W] image, got {image.shape}")
    _, h, w = image.shape
    pixels = np.transpose(image, (1, 2, 0)).astype("<f4")  # row-major RGB
    with open(path, "wb") as fh:
        fh.write(MAGIC_IMG)
        fh.write(struct.pack("<II", w, h))
        fh.write(pixels.tobytes())


def load_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC_IMG:
            raise ValueError("bad magic, expected IMG1")
        w, h = struct.unpack("<II", fh.read(8))
        pixels = np.frombuffer(fh.read(12 * w * h), dtype="<f4").reshape(h, w, 3)
    return np.ascontiguousarray(np.transpose(pixels, (2, 0, 1)))


def export_png(path, image: np.ndarray, upscale: int = 8) -> None:
    """PNG export for human inspection; never used as an input path."""
    from PIL import Image as PILImage

    arr = np.clip(np.transpose(image, (1, 2, 0)) * 255.0, 0, 255).astype(np.uint8)
    arr = arr.repeat(upscale, axis=0).repeat(upscale, axis=1)
    PILImage.fromarray(arr, mode="RGB").save(path)
