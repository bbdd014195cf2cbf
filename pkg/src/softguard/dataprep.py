"""Training-pair construction: base-model generation, the image-to-image safe
editor, and the corpus file format.

Malicious pairs hold the original unsafe latent and a safer edited latent
produced by partially noising the original and reverse-denoising it under a
safe counterpart prompt, so the edit changes the unsafe content while keeping
the overall layout. Benign pairs hold a single self-generated latent.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .bundle import ModelBundle
from .denoiser import LATENT_SHAPE, conditioning_pool, forward_batch
from .latentcodec import decode_latent, encode_image
from .numerics import Rng
from .scheduler import add_noise, ancestral_sample, reverse_diffuse
from .textenc import Category, PromptEncoding, SoftPromptEmbedding, embed_and_append, encode, tokenize


class CorpusError(ValueError):
    """Invalid corpus request or malformed corpus file."""


def encode_prompt(
    bundle: ModelBundle, prompt: str, guard: SoftPromptEmbedding | None = None
) -> PromptEncoding:
    """Tokenize, append the guard rows if any, and run the frozen encoder."""
    ids = tokenize(prompt, bundle.vocab)
    soft = [guard] if guard is not None else []
    return encode(embed_and_append(ids, soft, bundle.encoder), bundle.encoder)


def make_denoise_fn(bundle: ModelBundle, encoding: PromptEncoding):
    """Closure over the pooled conditioning for the reverse-diffusion loop."""
    cpool = conditioning_pool(encoding.hidden)[None]

    def denoise(z: np.ndarray, t: int) -> np.ndarray:
        out, _ = forward_batch(bundle.denoiser, z[None], np.array([t]), cpool)
        return out[0]

    return denoise


def generate_with_base(
    bundle: ModelBundle,
    prompt: str,
    guard: SoftPromptEmbedding | None,
    rng: Rng,
) -> np.ndarray:
    """Full text-to-image pipeline; deterministic given the rng state."""
    encoding = encode_prompt(bundle, prompt, guard)
    z0 = ancestral_sample(
        bundle.schedule, make_denoise_fn(bundle, encoding), rng, LATENT_SHAPE
    )
    return decode_latent(bundle.codec, z0)


def sdedit_safe_version(
    bundle: ModelBundle,
    x_org: np.ndarray,
    safe_prompt: str,
    t_edit: int,
    rng: Rng,
) -> np.ndarray:
    """Noise the source to t_edit, then denoise under the safe prompt.

    t_edit=0 is the codec round trip of the input; t_edit=T forgets the source
    entirely and matches from-scratch generation statistics.
    """
    if not 0 <= t_edit <= bundle.schedule.T:
        raise CorpusError(f"t_edit {t_edit} outside 0..{bundle.schedule.T}")
    z0 = encode_image(bundle.codec, x_org)
    if t_edit == 0:
        return decode_latent(bundle.codec, z0)
    encoding = encode_prompt(bundle, safe_prompt, None)
    noised = add_noise(bundle.schedule, z0, t_edit, rng)
    z_edit = reverse_diffuse(
        bundle.schedule, make_denoise_fn(bundle, encoding), noised.z_t, t_edit, rng
    )
    return decode_latent(bundle.codec, z_edit)


@dataclass
class TrainingPair:
    kind: str  # "benign" | "malicious"
    prompt: str
    z0_primary: np.ndarray
    z0_target: np.ndarray | None = None
    category: Category | None = None
    split: str = "train"

    def __post_init__(self):
        if self.kind == "malicious":
            if self.z0_target is None or self.category is None:
                raise CorpusError("malicious pair needs a target latent and a category")
        elif self.kind == "benign":
            if self.z0_target is not None or self.category is not None:
                raise CorpusError("benign pair must not carry a target or category")
        else:
            raise CorpusError(f"unknown pair kind {self.kind!r}")


@dataclass
class CorpusConfig:
    """Lambda-independent corpus build settings."""

    malicious_per_category: int = 50
    benign_per_class: int = 20
    eval_malicious_per_category: int = 20
    eval_benign_per_class: int = 5
    t_edit_fraction: float = 0.6
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "malicious_per_category": self.malicious_per_category,
            "benign_per_class": self.benign_per_class,
            "eval_malicious_per_category": self.eval_malicious_per_category,
            "eval_benign_per_class": self.eval_benign_per_class,
            "t_edit_fraction": self.t_edit_fraction,
            "seed": self.seed,
        }


@dataclass
class Corpus:
    pairs: list[TrainingPair]
    config: CorpusConfig
    seed: int

    def select(self, kind: str | None = None, category: Category | None = None,
               split: str | None = None) -> list[TrainingPair]:
        out = []
        for p in self.pairs:
            if kind is not None and p.kind != kind:
                continue
            if category is not None and p.category != category:
                continue
            if split is not None and p.split != split:
                continue
            out.append(p)
        return out

    def eval_prompts(self, category: Category | None = None) -> list[str]:
        if category is None:
            return [p.prompt for p in self.select(kind="benign", split="eval")]
        return [p.prompt for p in self.select(kind="malicious", category=category, split="eval")]

    def counts(self) -> dict[str, int]:
        keys = {}
        for p in self.pairs:
            cat = p.category.name if p.category else "-"
            key = f"{p.kind}/{cat}/{p.split}"
            keys[key] = keys.get(key, 0) + 1
        return dict(sorted(keys.items()))


def _split_prompts(pool: list[str], n_train: int, n_eval: int, rng: Rng) -> tuple[list, list]:
    if n_train + n_eval > len(pool):
        raise CorpusError(
            f"prompt pool of {len(pool)} too small for {n_train} train + {n_eval} eval"
        )
    idx = np.arange(len(pool))
    rng.shuffle(idx)
    chosen = [pool[i] for i in idx]
    return chosen[:n_train], chosen[n_train : n_train + n_eval]


def build_corpus(bundle: ModelBundle, config: CorpusConfig, rng: Rng) -> Corpus:
    """Generate malicious (original, safe-edited) pairs and benign pairs.

    Every pair draws from its own derived rng stream indexed by position, so
    the corpus is byte-stable under the build seed regardless of evaluation
    order.
    """
    world = bundle.world
    t_edit = int(round(config.t_edit_fraction * bundle.schedule.T))
    pairs: list[TrainingPair] = []
    stream = 0
    for cat in sorted(world.unsafe_words, key=lambda c: c.value):
        word = world.unsafe_words[cat]
        pool = world.prompts_for_word(word)
        train_p, eval_p = _split_prompts(
            pool, config.malicious_per_category, config.eval_malicious_per_category,
            rng.derive(7000 + cat.value),
        )
        for split, prompts in (("train", train_p), ("eval", eval_p)):
            for prompt in prompts:
                pair_rng = rng.derive(stream)
                stream += 1
                x_org = generate_with_base(bundle, prompt, None, pair_rng)
                safe_prompt = world.safe_prompt_for(prompt, cat)
                x_tgt = sdedit_safe_version(bundle, x_org, safe_prompt, t_edit,
                                            rng.derive(stream))
                stream += 1
                pairs.append(
                    TrainingPair(
                        kind="malicious",
                        prompt=prompt,
                        z0_primary=encode_image(bundle.codec, x_org),
                        z0_target=encode_image(bundle.codec, x_tgt),
                        category=cat,
                        split=split,
                    )
                )
    for word in world.benign_words:
        pool = world.prompts_for_word(word)
        train_p, eval_p = _split_prompts(
            pool, config.benign_per_class, config.eval_benign_per_class,
            rng.derive(8000 + world.benign_words.index(word)),
        )
        for split, prompts in (("train", train_p), ("eval", eval_p)):
            for prompt in prompts:
                pair_rng = rng.derive(stream)
                stream += 1
                x_ben = generate_with_base(bundle, prompt, None, pair_rng)
                pairs.append(
                    TrainingPair(
                        kind="benign",
                        prompt=prompt,
                        z0_primary=encode_image(bundle.codec, x_ben),
                        split=split,
                    )
                )
    return Corpus(pairs=pairs, config=config, seed=config.seed)


MAGIC_PGC = b"PGC1"

_KIND_CODE = {"benign": 0, "malicious": 1}
_SPLIT_CODE = {"train": 0, "eval": 1}


def save_corpus(path, corpus: Corpus) -> None:
    header = json.dumps(
        {"config": corpus.config.to_dict(), "seed": corpus.seed, "counts": corpus.counts()},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC_PGC)
        fh.write(struct.pack("<B", 1))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(corpus.pairs)))
        for p in corpus.pairs:
            prompt = p.prompt.encode("utf-8")
            cat = 255 if p.category is None else p.category.value
            fh.write(struct.pack("<BBBH", _KIND_CODE[p.kind], cat, _SPLIT_CODE[p.split],
                                 len(prompt)))
            fh.write(prompt)
            fh.write(p.z0_primary.astype("<f4").tobytes())
            if p.z0_target is not None:
                fh.write(struct.pack("<B", 1))
                fh.write(p.z0_target.astype("<f4").tobytes())
            else:
                fh.write(struct.pack("<B", 0))


def load_corpus(path) -> Corpus:
    latent_bytes = 4 * int(np.prod(LATENT_SHAPE))
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC_PGC:
            raise CorpusError("bad magic, expected PGC1")
        (version,) = struct.unpack("<B", fh.read(1))
        if version != 1:
            raise CorpusError(f"unsupported corpus version {version}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        (n,) = struct.unpack("<I", fh.read(4))
        pairs = []
        kind_names = {v: k for k, v in _KIND_CODE.items()}
        split_names = {v: k for k, v in _SPLIT_CODE.items()}
        for _ in range(n):
            kind, cat, split, plen = struct.unpack("<BBBH", fh.read(5))
            prompt = fh.read(plen).decode("utf-8")
            z0 = np.frombuffer(fh.read(latent_bytes), dtype="<f4").reshape(LATENT_SHAPE).copy()
            (has_target,) = struct.unpack("<B", fh.read(1))
            z0_tgt = None
            if has_target:
                z0_tgt = np.frombuffer(fh.read(latent_bytes), dtype="<f4").reshape(
                    LATENT_SHAPE).copy()
            pairs.append(
                TrainingPair(
                    kind=kind_names[kind],
                    prompt=prompt,
                    z0_primary=z0,
                    z0_target=z0_tgt,
                    category=None if cat == 255 else Category(cat),
                    split=split_names[split],
                )
            )
    config = CorpusConfig(**header["config"])
    return Corpus(pairs=pairs, config=config, seed=int(header["seed"]))
