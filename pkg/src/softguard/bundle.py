"""Frozen base-model bundle and its PGM1 checkpoint format.

A bundle ties together everything the generation pipeline needs: vocabulary,
latent codec, text encoder, denoiser, and the noise schedule. The checkpoint
carries a SHA-256 trailer; its hex digest is the "base model hash" recorded in
guard metadata, and equality of that hash before/after guard training is the
frozen-model isolation check.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from .denoiser import Denoiser, init_denoiser
from .latentcodec import LatentCodec
from .numerics import Rng
from .scheduler import DiffusionSchedule, make_schedule
from .textenc import FrozenEncoder, Vocabulary, init_encoder
from .world import ConceptWorld, default_world

MAGIC_PGM = b"PGM1"
CHECKPOINT_VERSION = 1


@dataclass
class ModelBundle:
    world: ConceptWorld
    vocab: Vocabulary
    codec: LatentCodec
    encoder: FrozenEncoder
    denoiser: Denoiser
    schedule: DiffusionSchedule
    beta_range: tuple[float, float]

    def weight_arrays(self) -> dict[str, np.ndarray]:
        arrays: dict[str, np.ndarray] = {}
        arrays.update(self.codec.weight_arrays())
        arrays.update(self.encoder.weight_arrays())
        arrays.update(self.denoiser.weight_arrays())
        return arrays

    def header(self) -> dict:
        return {
            "format": "PGM1",
            "n_embed": self.encoder.n_embed,
            "hidden_channels": self.denoiser.k1.shape[0],
            "T": self.schedule.T,
            "beta_start": self.beta_range[0],
            "beta_end": self.beta_range[1],
            "vocab_hash": self.vocab.content_hash(),
            "weights": [[name, list(arr.shape)] for name, arr in self.weight_arrays().items()],
        }

    def content_hash(self) -> str:
        """SHA-256 over the serialized header and weight bytes."""
        return hashlib.sha256(_serialize_body(self)).hexdigest()

    def astype(self, dtype) -> "ModelBundle":
        """Copy with weights cast (float64 for gradient-check tests)."""
        return replace(
            self,
            codec=LatentCodec(
                mix=self.codec.mix.astype(dtype),
                offset=self.codec.offset.astype(dtype),
                scale=self.codec.scale.astype(dtype),
            ),
            encoder=self.encoder.astype(dtype),
            denoiser=self.denoiser.astype(dtype),
        )


def new_bundle(
    seed: int,
    T: int = 50,
    beta_start: float = 1e-4,
    beta_end: float = 0.25,
    world: ConceptWorld | None = None,
) -> ModelBundle:
    """Freshly initialized (untrained) bundle with seeded weights."""
    from .latentcodec import calibrate_codec, init_codec

    world = world or default_world()
    vocab = world.vocabulary()
    rng = Rng(seed, stream=101)
    codec = init_codec(rng.derive(1))
    probe_rng = rng.derive(2)
    probes = np.stack(
        [world.render_word(w, probe_rng.derive(16 * i + k))
         for i, w in enumerate(world.concept_words) for k in range(6)]
    )
    codec = calibrate_codec(codec, probes)
    encoder = init_encoder(rng.derive(3), vocab.size)
    denoiser = init_denoiser(rng.derive(4), T=T, n_cond=encoder.n_embed)
    schedule = make_schedule(T, beta_start, beta_end)
    return ModelBundle(
        world=world,
        vocab=vocab,
        codec=codec,
        encoder=encoder,
        denoiser=denoiser,
        schedule=schedule,
        beta_range=(beta_start, beta_end),
    )


def _serialize_body(bundle: ModelBundle) -> bytes:
    header = json.dumps(bundle.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC_PGM, struct.pack("<B", CHECKPOINT_VERSION), struct.pack("<I", len(header)),
             header]
    for _, arr in bundle.weight_arrays().items():
        parts.append(arr.astype("<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(path, bundle: ModelBundle) -> str:
    """Write PGM1 file; returns the hex content hash stored in the trailer."""
    body = _serialize_body(bundle)
    digest = hashlib.sha256(body).digest()
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(digest)
    return digest.hex()


def load_checkpoint(path, world: ConceptWorld | None = None) -> ModelBundle:
    world = world or default_world()
    vocab = world.vocabulary()
    with open(path, "rb") as fh:
        blob = fh.read()
    body, trailer = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != trailer:
        raise ValueError(f"checkpoint {path} failed its content-hash check")
    if body[:4] != MAGIC_PGM:
        raise ValueError(f"bad magic {body[:4]!r}, expected PGM1")
    version = body[4]
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (header_len,) = struct.unpack("<I", body[5:9])
    header = json.loads(body[9 : 9 + header_len].decode("utf-8"))
    if header["vocab_hash"] != vocab.content_hash():
        raise ValueError("checkpoint vocabulary does not match this concept world")
    offset = 9 + header_len
    arrays = {}
    for name, shape in header["weights"]:
        count = int(np.prod(shape))
        arr = np.frombuffer(body[offset : offset + 4 * count], dtype="<f4").reshape(shape)
        arrays[name] = arr.copy()
        offset += 4 * count
    codec = LatentCodec(
        mix=arrays["codec.mix"], offset=arrays["codec.offset"], scale=arrays["codec.scale"]
    )
    encoder = FrozenEncoder(
        embedding=arrays["enc.embedding"], pos=arrays["enc.pos"],
        w1=arrays["enc.w1"], b1=arrays["enc.b1"], w2=arrays["enc.w2"], b2=arrays["enc.b2"],
    )
    denoiser = Denoiser(
        k1=arrays["den.k1"], b1=arrays["den.b1"], k2=arrays["den.k2"], b2=arrays["den.b2"],
        k3=arrays["den.k3"], b3=arrays["den.b3"], temb=arrays["den.temb"],
        cond_w=arrays["den.cond_w"],
    )
    schedule = make_schedule(int(header["T"]), float(header["beta_start"]),
                             float(header["beta_end"]))
    return ModelBundle(
        world=world, vocab=vocab, codec=codec, encoder=encoder, denoiser=denoiser,
        schedule=schedule, beta_range=(float(header["beta_start"]), float(header["beta_end"])),
    )
