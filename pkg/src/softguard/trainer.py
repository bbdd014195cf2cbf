"""Base-model pretraining and per-category soft-prompt optimization.

Soft-prompt training minimizes, per batch and per pair, either the benign
preservation loss (denoising MSE with the guard appended) or the malicious
moderation loss (a contrastive objective that pushes the prediction away from
the unsafe image's true noise, clamped at a margin, and toward the safe edited
image's true noise). Gradients flow through the frozen denoiser and encoder
into the soft vectors only; no frozen weight is ever updated.

Randomness is laid out in documented Philox streams so tests can replay any
step exactly:

* pretraining:   stream 5000+step for batch draws, 9000+ for the final checks
* soft training: stream 1 soft init, stream 2 margin probe, stream 1000+step
  for per-step draws in the order benign indices, malicious indices, then per
  pair (benign first): timestep, then noise (org before tgt for malicious).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .bundle import ModelBundle, new_bundle
from .dataprep import Corpus, TrainingPair, generate_with_base
from .denoiser import LATENT_SHAPE, backward_batch, conditioning_pool, forward_batch
from .latentcodec import encode_image
from .numerics import AdamWState, NumericsError, Rng, adamw_step, gaussian
from .scheduler import sample_timestep
from .textenc import (
    CATEGORIES,
    Category,
    SoftPromptEmbedding,
    cap_norm,
    combine_embeddings,
    embed_and_append,
    encode_backward,
    encode_hidden,
    init_soft_prompt,
    tokenize,
)

# Best per-category balance observed in the reference sweeps; re-derivable
# with the sweep harness at any time.
DEFAULT_LAMBDA = {Category.A: 0.7, Category.B: 0.6, Category.C: 0.4, Category.D: 0.7}

WARM_START_WORD = "plain"


class TrainerError(RuntimeError):
    def __init__(self, message: str, log: "TrainRunLog | None" = None):
        super().__init__(message)
        self.log = log


class PreconditionError(RuntimeError):
    """Pretraining finished but the attack-success precondition failed."""

    def __init__(self, message: str, report: "PretrainReport", checkpoint_path=None):
        super().__init__(message)
        self.report = report
        self.checkpoint_path = checkpoint_path


@dataclass
class TrainConfig:
    category: Category
    lam: float | None = None  # None -> per-category default
    steps: int = 1000
    batch_benign: int = 4
    batch_malicious: int = 4
    lr: float = 1e-2
    margin: float | None = None  # None -> 4x mean org-branch MSE at step 0
    norm_cap: float = 10.0
    k: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.lam is None:
            self.lam = DEFAULT_LAMBDA[self.category]
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {self.lam}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.margin is not None and self.margin <= 0:
            raise ValueError("margin must be positive")

    def to_dict(self) -> dict:
        return {
            "category": self.category.name, "lambda": self.lam, "steps": self.steps,
            "batch_benign": self.batch_benign, "batch_malicious": self.batch_malicious,
            "lr": self.lr, "margin": self.margin, "norm_cap": self.norm_cap,
            "k": self.k, "seed": self.seed,
        }


@dataclass
class TrainRunLog:
    records: list[dict] = field(default_factory=list)
    duration_s: float = 0.0
    margin: float = 0.0

    def save_jsonl(self, path) -> None:
        import json

        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _encode_with_soft(bundle: ModelBundle, prompt: str, soft: SoftPromptEmbedding):
    ids = tokenize(prompt, bundle.vocab)
    encoding = embed_and_append(ids, [soft], bundle.encoder)
    hidden, cache = encode_hidden(encoding.embed, bundle.encoder)
    return encoding, hidden, cache


def _branch_mse(bundle: ModelBundle, z0: np.ndarray, t: int, eps: np.ndarray,
                cpool: np.ndarray):
    """Denoising MSE of one branch plus what backward needs."""
    ab = bundle.schedule.alpha_bars[t - 1]
    dtype = z0.dtype
    z_t = np.sqrt(ab).astype(dtype) * z0 + np.sqrt(1.0 - ab).astype(dtype) * eps
    pred, cache = forward_batch(bundle.denoiser, z_t[None], np.array([t]), cpool[None])
    diff = pred[0] - eps
    mse = float(np.mean(diff * diff))
    return mse, diff, cache


def _soft_grad_from_dcpool(dcpool: np.ndarray, enc_cache, bundle: ModelBundle,
                           length: int, k: int) -> np.ndarray:
    d_hidden = np.tile(dcpool / length, (length, 1))
    d_embed, _ = encode_backward(d_hidden, enc_cache, bundle.encoder)
    return d_embed[-k:]


def loss_benign(
    bundle: ModelBundle,
    pair: TrainingPair,
    soft: SoftPromptEmbedding,
    t: int,
    eps: np.ndarray | None = None,
    rng: Rng | None = None,
):
    """Benign preservation loss and its gradient w.r.t. the soft vectors."""
    if pair.kind != "benign":
        raise TrainerError("loss_benign expects a benign pair")
    t = bundle.schedule.check_t(t)
    z0 = pair.z0_primary
    if eps is None:
        eps = gaussian(rng, z0.shape, dtype=z0.dtype)
    _, hidden, enc_cache = _encode_with_soft(bundle, pair.prompt, soft)
    cpool = conditioning_pool(hidden)
    mse, diff, cache = _branch_mse(bundle, z0, t, eps, cpool)
    dpred = (2.0 / diff.size) * diff
    dcpool, _ = backward_batch(bundle.denoiser, dpred[None], cache)
    grad = _soft_grad_from_dcpool(dcpool[0], enc_cache, bundle, hidden.shape[0], soft.k)
    return mse, grad


def loss_malicious(
    bundle: ModelBundle,
    pair: TrainingPair,
    soft: SoftPromptEmbedding,
    lam: float,
    margin: float,
    t: int,
    rng: Rng | None = None,
    eps_org: np.ndarray | None = None,
    eps_tgt: np.ndarray | None = None,
):
    """Contrastive moderation loss: -lam * min(org MSE, margin) + (1-lam) * tgt MSE.

    Both branches share the timestep and the prompt encoding but draw
    independent noise (org first, then tgt, when drawn from ``rng``).
    """
    if pair.kind != "malicious":
        raise TrainerError("loss_malicious expects a malicious pair")
    if not 0.0 <= lam <= 1.0:
        raise TrainerError(f"lambda must be in [0, 1], got {lam}")
    if margin <= 0:
        raise TrainerError("margin must be positive")
    t = bundle.schedule.check_t(t)
    if eps_org is None:
        eps_org = gaussian(rng, pair.z0_primary.shape, dtype=pair.z0_primary.dtype)
    if eps_tgt is None:
        eps_tgt = gaussian(rng, pair.z0_target.shape, dtype=pair.z0_target.dtype)
    _, hidden, enc_cache = _encode_with_soft(bundle, pair.prompt, soft)
    cpool = conditioning_pool(hidden)

    mse_org, diff_org, cache_org = _branch_mse(bundle, pair.z0_primary, t, eps_org, cpool)
    mse_tgt, diff_tgt, cache_tgt = _branch_mse(bundle, pair.z0_target, t, eps_tgt, cpool)

    clamp_active = mse_org >= margin
    loss = -lam * min(mse_org, margin) + (1.0 - lam) * mse_tgt

    org_scale = 0.0 if clamp_active else -lam * (2.0 / diff_org.size)
    dcpool_org, _ = backward_batch(bundle.denoiser, (org_scale * diff_org)[None], cache_org)
    dcpool_tgt, _ = backward_batch(
        bundle.denoiser, ((1.0 - lam) * (2.0 / diff_tgt.size) * diff_tgt)[None], cache_tgt
    )
    dcpool = dcpool_org[0] + dcpool_tgt[0]
    grad = _soft_grad_from_dcpool(dcpool, enc_cache, bundle, hidden.shape[0], soft.k)
    return loss, grad


def _measure_margin(bundle: ModelBundle, pairs: list[TrainingPair],
                    soft: SoftPromptEmbedding, rng: Rng) -> float:
    """4x the mean org-branch MSE under the freshly initialized soft prompt."""
    probe = pairs[: min(8, len(pairs))]
    total = 0.0
    for pair in probe:
        t = sample_timestep(rng, bundle.schedule.T)
        eps = gaussian(rng, pair.z0_primary.shape, dtype=pair.z0_primary.dtype)
        _, hidden, _ = _encode_with_soft(bundle, pair.prompt, soft)
        mse, _, _ = _branch_mse(bundle, pair.z0_primary, t, eps, conditioning_pool(hidden))
        total += mse
    return 4.0 * total / len(probe)


def train_soft_prompt(
    bundle: ModelBundle, corpus: Corpus, config: TrainConfig
) -> tuple[SoftPromptEmbedding, TrainRunLog]:
    """Optimize one category's soft prompt against the mixed objective."""
    benign_pool = corpus.select(kind="benign", split="train")
    mal_pool = corpus.select(kind="malicious", category=config.category, split="train")
    if config.batch_benign > 0 and not benign_pool:
        raise TrainerError("corpus has no benign training pairs")
    if config.batch_malicious > 0 and not mal_pool:
        raise TrainerError(f"corpus has no malicious pairs for {config.category.name}")

    soft = init_soft_prompt(
        bundle.encoder, config.category, Rng(config.seed, 1),
        warm_start_token=bundle.vocab.id(WARM_START_WORD), k=config.k,
    )
    margin = config.margin
    if margin is None:
        margin = _measure_margin(bundle, mal_pool, soft, Rng(config.seed, 2))

    state = AdamWState(lr=config.lr)
    log = TrainRunLog(margin=margin)
    started = time.perf_counter()
    for step in range(1, config.steps + 1):
        srng = Rng(config.seed, 1000 + step)
        batch: list[TrainingPair] = []
        for _ in range(config.batch_benign):
            batch.append(benign_pool[int(srng.integers(0, len(benign_pool) - 1))])
        for _ in range(config.batch_malicious):
            batch.append(mal_pool[int(srng.integers(0, len(mal_pool) - 1))])

        grad_sum = np.zeros_like(soft.vectors)
        loss_sum = 0.0
        ben_sum, mal_sum = [], []
        for pair in batch:
            t = sample_timestep(srng, bundle.schedule.T)
            if pair.kind == "benign":
                loss, grad = loss_benign(bundle, pair, soft, t, rng=srng)
                ben_sum.append(loss)
            else:
                loss, grad = loss_malicious(
                    bundle, pair, soft, config.lam, margin, t, rng=srng
                )
                mal_sum.append(loss)
            loss_sum += loss
            grad_sum += grad

        n = max(len(batch), 1)
        mean_grad = grad_sum / n
        mean_loss = loss_sum / n
        if not np.isfinite(mean_loss) or not np.all(np.isfinite(mean_grad)):
            log.duration_s = time.perf_counter() - started
            raise TrainerError(f"non-finite loss at step {step}", log=log)
        new_vectors = adamw_step(soft.vectors, mean_grad.astype(soft.vectors.dtype), state)
        soft.vectors = cap_norm(new_vectors, config.norm_cap)
        log.records.append(
            {
                "step": step,
                "loss": float(mean_loss),
                "loss_benign": float(np.mean(ben_sum)) if ben_sum else None,
                "loss_malicious": float(np.mean(mal_sum)) if mal_sum else None,
                "grad_norm": float(np.linalg.norm(mean_grad)),
                "v_norm": float(np.linalg.norm(soft.vectors)),
            }
        )
    log.duration_s = time.perf_counter() - started
    soft.metadata = {
        "category": config.category.name,
        "lambda": config.lam,
        "steps": config.steps,
        "seed": config.seed,
        "lr": config.lr,
        "margin": margin,
        "norm_cap": config.norm_cap,
        "k": config.k,
        "base_model_hash": bundle.content_hash(),
    }
    return soft, log


def train_all_categories(
    bundle: ModelBundle, corpus: Corpus, configs: dict[Category, TrainConfig]
) -> tuple[dict[Category, SoftPromptEmbedding], SoftPromptEmbedding,
           dict[Category, TrainRunLog]]:
    """Four independent per-category runs combined into the 4-row guard."""
    missing = [c.name for c in CATEGORIES if c not in configs]
    if missing:
        raise TrainerError(f"missing configs for categories: {missing}")
    guards: dict[Category, SoftPromptEmbedding] = {}
    logs: dict[Category, TrainRunLog] = {}
    for cat in CATEGORIES:
        guards[cat], logs[cat] = train_soft_prompt(bundle, corpus, configs[cat])
    combined = combine_embeddings([guards[c] for c in CATEGORIES])
    return guards, combined, logs


# ---------------------------------------------------------------------------
# base-model pretraining
# ---------------------------------------------------------------------------

@dataclass
class PretrainConfig:
    seed: int = 0
    steps: int = 15000
    batch_size: int = 16
    lr: float = 3e-3
    T: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.25
    check_samples: int = 32
    unsafe_floor: float = 0.6
    benign_alignment_floor: float = 0.5
    loss_window: int = 100

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "steps": self.steps, "batch_size": self.batch_size,
            "lr": self.lr, "T": self.T, "beta_start": self.beta_start,
            "beta_end": self.beta_end, "check_samples": self.check_samples,
            "unsafe_floor": self.unsafe_floor,
            "benign_alignment_floor": self.benign_alignment_floor,
            "loss_window": self.loss_window,
        }


@dataclass
class PretrainReport:
    steps: int
    loss_first: float
    loss_last: float
    unsafe_rates: dict[str, float]
    benign_alignment: float
    duration_s: float
    passed: bool

    def to_dict(self) -> dict:
        return {
            "steps": self.steps, "loss_first": self.loss_first, "loss_last": self.loss_last,
            "unsafe_rates": dict(self.unsafe_rates),
            "benign_alignment": self.benign_alignment,
            "duration_s": self.duration_s, "passed": self.passed,
        }


_PRETRAIN_TRAINABLE = (
    "enc.embedding", "enc.pos", "enc.w1", "enc.b1", "enc.w2", "enc.b2",
    "den.k1", "den.b1", "den.k2", "den.b2", "den.k3", "den.b3",
    "den.temb", "den.cond_w",
)


def _pretrain_step(bundle: ModelBundle, srng: Rng, batch_size: int):
    """One joint encoder+denoiser DDPM step; returns loss and weight grads."""
    world, vocab = bundle.world, bundle.vocab
    words = world.concept_words
    prompts, latents, ts, epss, encodings = [], [], [], [], []
    for _ in range(batch_size):
        word = words[int(srng.integers(0, len(words) - 1))]
        pool = world.prompts_for_word(word)
        prompt = pool[int(srng.integers(0, len(pool) - 1))]
        image = world.render(prompt, srng)
        z0 = encode_image(bundle.codec, image)
        t = sample_timestep(srng, bundle.schedule.T)
        eps = gaussian(srng, z0.shape, dtype=z0.dtype)
        prompts.append(prompt)
        latents.append(z0)
        ts.append(t)
        epss.append(eps)

    hiddens, caches, ids_list = [], [], []
    for prompt in prompts:
        ids = tokenize(prompt, vocab)
        embed = bundle.encoder.embedding[ids]
        hidden, cache = encode_hidden(embed, bundle.encoder)
        hiddens.append(hidden)
        caches.append(cache)
        ids_list.append(ids)
    cpool = np.stack([h.mean(axis=0) for h in hiddens])

    ab = bundle.schedule.alpha_bars[np.array(ts) - 1].astype(np.float32)
    z0b = np.stack(latents)
    epsb = np.stack(epss)
    z_t = np.sqrt(ab)[:, None, None, None] * z0b + np.sqrt(1.0 - ab)[:, None, None, None] * epsb
    pred, cache = forward_batch(bundle.denoiser, z_t, np.array(ts), cpool)
    diff = pred - epsb
    loss = float(np.mean(diff * diff))
    dpred = (2.0 / diff.size) * diff
    dcpool, grads = backward_batch(bundle.denoiser, dpred, cache, with_weight_grads=True)

    grads["enc.embedding"] = np.zeros_like(bundle.encoder.embedding)
    grads["enc.pos"] = np.zeros_like(bundle.encoder.pos)
    for name in ("enc.w1", "enc.b1", "enc.w2", "enc.b2"):
        grads[name] = 0.0
    for i, (hidden, cache_i, ids) in enumerate(zip(hiddens, caches, ids_list)):
        L = hidden.shape[0]
        d_hidden = np.tile(dcpool[i] / L, (L, 1))
        d_embed, enc_g = encode_backward(d_hidden, cache_i, bundle.encoder,
                                         with_weight_grads=True)
        np.add.at(grads["enc.embedding"], ids, d_embed)
        grads["enc.pos"][:L] += enc_g["enc.pos.rows"]
        for name in ("enc.w1", "enc.b1", "enc.w2", "enc.b2"):
            grads[name] = grads[name] + enc_g[name]
    return loss, grads


def _apply_weight_updates(bundle: ModelBundle, grads: dict, states: dict) -> None:
    enc, den = bundle.encoder, bundle.denoiser
    targets = {**enc.weight_arrays(), **den.weight_arrays()}
    for name in _PRETRAIN_TRAINABLE:
        new = adamw_step(targets[name], grads[name].astype(np.float32), states[name])
        owner, attr = (enc, name[4:]) if name.startswith("enc.") else (den, name[4:])
        setattr(owner, attr, new)


def pretrain_base(
    config: PretrainConfig,
    world=None,
    checkpoint_path=None,
) -> tuple[ModelBundle, PretrainReport]:
    """Train the frozen base model until the attack-success precondition holds.

    The checkpoint (when a path is given) is written before the precondition
    check, so a failed run still leaves an inspectable artifact; failure
    raises PreconditionError carrying the achieved rates.
    """
    from . import evalharness
    from .bundle import save_checkpoint

    bundle = new_bundle(config.seed, T=config.T, beta_start=config.beta_start,
                        beta_end=config.beta_end, world=world)
    states = {name: AdamWState(lr=config.lr) for name in _PRETRAIN_TRAINABLE}
    losses: list[float] = []
    started = time.perf_counter()
    for step in range(1, config.steps + 1):
        srng = Rng(config.seed, 5000 + step)
        loss, grads = _pretrain_step(bundle, srng, config.batch_size)
        if not np.isfinite(loss):
            raise TrainerError(f"non-finite pretraining loss at step {step}")
        _apply_weight_updates(bundle, grads, states)
        losses.append(loss)

    window = min(config.loss_window, max(len(losses), 1))
    loss_first = float(np.mean(losses[:window])) if losses else float("nan")
    loss_last = float(np.mean(losses[-window:])) if losses else float("nan")

    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, bundle)

    unsafe_rates: dict[str, float] = {}
    for cat in CATEGORIES:
        word = bundle.world.unsafe_words[cat]
        prompts = bundle.world.prompts_for_word(word)
        fires = 0
        for i in range(config.check_samples):
            prompt = prompts[i % len(prompts)]
            rng = Rng(config.seed, 9000 + cat.value * 1000 + i)
            image = generate_with_base(bundle, prompt, None, rng)
            verdict = evalharness.classify_safety(bundle.world, image)
            fires += int(not verdict.safe)
        unsafe_rates[cat.name] = fires / config.check_samples

    align_total, align_n = 0.0, 0
    for w_i, word in enumerate(bundle.world.benign_words):
        prompts = bundle.world.prompts_for_word(word)
        for i in range(max(config.check_samples // len(bundle.world.benign_words), 4)):
            prompt = prompts[i % len(prompts)]
            rng = Rng(config.seed, 14000 + w_i * 1000 + i)
            image = generate_with_base(bundle, prompt, None, rng)
            align_total += evalharness.alignment_score(bundle, prompt, image)
            align_n += 1
    benign_alignment = align_total / align_n

    passed = all(r >= config.unsafe_floor for r in unsafe_rates.values()) and (
        benign_alignment >= config.benign_alignment_floor
    )
    report = PretrainReport(
        steps=config.steps, loss_first=loss_first, loss_last=loss_last,
        unsafe_rates=unsafe_rates, benign_alignment=benign_alignment,
        duration_s=time.perf_counter() - started, passed=passed,
    )
    if not passed:
        raise PreconditionError(
            f"attack-success precondition not met: rates={unsafe_rates}, "
            f"benign_alignment={benign_alignment:.3f}",
            report=report, checkpoint_path=checkpoint_path,
        )
    return bundle, report
