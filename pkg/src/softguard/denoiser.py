"""Frozen conditional noise predictor standing in for the diffusion U-Net.

Three 3x3 conv layers (4 -> 16 -> 16 -> 4) on the 4x8x8 latent. A learned
timestep embedding and a linear projection of the pooled prompt hidden states
are added per-channel after the first conv, so prompt conditioning (and hence
the soft prompt) always has a gradient path into the image branch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import NumericsError, Rng, require_finite

LATENT_SHAPE = (4, 8, 8)
HIDDEN_CHANNELS = 16

_OFFSETS = [(di, dj) for di in range(3) for dj in range(3)]


def _im2col(x: np.ndarray) -> np.ndarray:
    """[B, C, H, W] -> [B, C*9, H*W] patch matrix for 3x3 conv with pad 1."""
    B, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    patches = np.empty((B, C, 9, H * W), dtype=x.dtype)
    for k, (di, dj) in enumerate(_OFFSETS):
        patches[:, :, k, :] = xp[:, :, di : di + H, dj : dj + W].reshape(B, C, H * W)
    return patches.reshape(B, C * 9, H * W)


def _col2im(dcols: np.ndarray, C: int, H: int, W: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patch gradients back to the input grid."""
    B = dcols.shape[0]
    dxp = np.zeros((B, C, H + 2, W + 2), dtype=dcols.dtype)
    dpatches = dcols.reshape(B, C, 9, H * W)
    for k, (di, dj) in enumerate(_OFFSETS):
        dxp[:, :, di : di + H, dj : dj + W] += dpatches[:, :, k, :].reshape(B, C, H, W)
    return dxp[:, :, 1 : 1 + H, 1 : 1 + W]


def conv3x3_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray):
    B, C, H, W = x.shape
    cols = _im2col(x)
    kflat = kernel.reshape(kernel.shape[0], -1)
    out = np.einsum("ok,bkp->bop", kflat, cols) + bias[None, :, None]
    return out.reshape(B, kernel.shape[0], H, W), cols


def conv3x3_backward(dout: np.ndarray, cols: np.ndarray, kernel: np.ndarray, need_dx: bool):
    B, O, H, W = dout.shape
    dflat = dout.reshape(B, O, H * W)
    kflat = kernel.reshape(O, -1)
    dkernel = np.einsum("bop,bkp->ok", dflat, cols).reshape(kernel.shape)
    dbias = dflat.sum(axis=(0, 2))
    dx = None
    if need_dx:
        dcols = np.einsum("ok,bop->bkp", kflat, dflat)
        dx = _col2im(dcols, kernel.shape[1], H, W)
    return dx, dkernel, dbias


@dataclass
class Denoiser:
    """Conv weights, timestep embedding table, and the conditioning projection."""

    k1: np.ndarray  # [16, 4, 3, 3]
    b1: np.ndarray  # [16]
    k2: np.ndarray  # [16, 16, 3, 3]
    b2: np.ndarray  # [16]
    k3: np.ndarray  # [4, 16, 3, 3]
    b3: np.ndarray  # [4]
    temb: np.ndarray  # [T, 16]
    cond_w: np.ndarray  # [16, N]

    @property
    def T(self) -> int:
        return self.temb.shape[0]

    @property
    def n_cond(self) -> int:
        return self.cond_w.shape[1]

    def weight_arrays(self) -> dict[str, np.ndarray]:
        return {
            "den.k1": self.k1,
            "den.b1": self.b1,
            "den.k2": self.k2,
            "den.b2": self.b2,
            "den.k3": self.k3,
            "den.b3": self.b3,
            "den.temb": self.temb,
            "den.cond_w": self.cond_w,
        }

    def astype(self, dtype) -> "Denoiser":
        return Denoiser(
            **{k.split(".", 1)[1]: v.astype(dtype) for k, v in self.weight_arrays().items()}
        )


def init_denoiser(rng: Rng, T: int, n_cond: int, hidden: int = HIDDEN_CHANNELS) -> Denoiser:
    c_in = LATENT_SHAPE[0]
    return Denoiser(
        k1=rng.normal((hidden, c_in, 3, 3)) / np.float32(np.sqrt(c_in * 9)),
        b1=np.zeros(hidden, dtype=np.float32),
        k2=rng.normal((hidden, hidden, 3, 3)) / np.float32(np.sqrt(hidden * 9)),
        b2=np.zeros(hidden, dtype=np.float32),
        k3=rng.normal((c_in, hidden, 3, 3)) / np.float32(np.sqrt(hidden * 9)),
        b3=np.zeros(c_in, dtype=np.float32),
        temb=np.float32(0.1) * rng.normal((T, hidden)),
        cond_w=rng.normal((hidden, n_cond)) / np.float32(np.sqrt(n_cond)),
    )


def conditioning_pool(c: np.ndarray) -> np.ndarray:
    """Mean over sequence positions, so appended soft rows always matter."""
    if c.ndim != 2 or c.shape[0] < 1:
        raise NumericsError(f"hidden states must be [L, N] with L >= 1, got {c.shape}")
    return c.mean(axis=0)


def forward_batch(model: Denoiser, z: np.ndarray, ts: np.ndarray, cpool: np.ndarray):
    """Batched forward pass; returns predictions and the backprop cache."""
    a1_conv, cols1 = conv3x3_forward(z, model.k1, model.b1)
    cond_vec = cpool @ model.cond_w.T  # [B, 16]
    a1 = a1_conv + model.temb[ts - 1][:, :, None, None] + cond_vec[:, :, None, None]
    h1 = np.tanh(a1)
    a2, cols2 = conv3x3_forward(h1, model.k2, model.b2)
    h2 = np.tanh(a2)
    out, cols3 = conv3x3_forward(h2, model.k3, model.b3)
    cache = (cols1, cols2, cols3, h1, h2, cpool, ts)
    return out, cache


def backward_batch(model: Denoiser, dout: np.ndarray, cache, with_weight_grads: bool = False):
    """Gradient w.r.t. the pooled conditioning (and optionally all weights)."""
    cols1, cols2, cols3, h1, h2, cpool, ts = cache
    dh2, dk3, db3 = conv3x3_backward(dout, cols3, model.k3, need_dx=True)
    da2 = dh2 * (1.0 - h2 * h2)
    dh1, dk2, db2 = conv3x3_backward(da2, cols2, model.k2, need_dx=True)
    da1 = dh1 * (1.0 - h1 * h1)
    dvec = da1.sum(axis=(2, 3))  # [B, 16]: shared by temb and conditioning paths
    dcpool = dvec @ model.cond_w
    if not with_weight_grads:
        return dcpool, None
    _, dk1, db1 = conv3x3_backward(da1, cols1, model.k1, need_dx=False)
    dtemb = np.zeros_like(model.temb)
    np.add.at(dtemb, ts - 1, dvec)
    grads = {
        "den.k1": dk1,
        "den.b1": db1,
        "den.k2": dk2,
        "den.b2": db2,
        "den.k3": dk3,
        "den.b3": db3,
        "den.temb": dtemb,
        "den.cond_w": dvec.T @ cpool,
    }
    return dcpool, grads


def predict_noise(model: Denoiser, z_t: np.ndarray, t: int, c: np.ndarray) -> np.ndarray:
    """Predicted injected noise for one latent, conditioned on hidden states c."""
    if z_t.shape != LATENT_SHAPE:
        raise NumericsError(f"latent shape {z_t.shape} != {LATENT_SHAPE}")
    if not 1 <= int(t) <= model.T:
        raise NumericsError(f"timestep {t} outside 1..{model.T}")
    cpool = conditioning_pool(c)
    out, _ = forward_batch(model, z_t[None], np.array([int(t)]), cpool[None])
    return require_finite(out[0], "predicted noise")
