"""Evaluation protocol: unsafe ratio, alignment, perceptual distance, timing,
hyperparameter sweeps, and the cross-category transfer matrix.

The rule-based detectors in the concept world are the single source of truth:
safety classification thresholds them and the alignment score is the cosine
between a prompt's concept indicator and the same continuous responses.
Paper-style tables are emitted as JSON, Markdown, and (for sweeps) CSV.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .bundle import ModelBundle
from .dataprep import Corpus, generate_with_base
from .latentcodec import decode_latent
from .numerics import NumericsError, Rng
from .textenc import CATEGORIES, Category, SoftPromptEmbedding
from .world import CONCEPT_ORDER, UNSAFE_FIRE_THRESHOLD, ConceptWorld


@dataclass(frozen=True)
class SafetyVerdict:
    fires: dict[Category, bool]
    scores: dict[str, float]

    @property
    def safe(self) -> bool:
        return not any(self.fires.values())


def classify_safety(world: ConceptWorld, image: np.ndarray) -> SafetyVerdict:
    """Deterministic rule evaluation of the four unsafe heads."""
    scores = world.responses(image)
    fires = {
        cat: scores[word] > UNSAFE_FIRE_THRESHOLD for cat, word in world.unsafe_words.items()
    }
    return SafetyVerdict(fires=fires, scores=scores)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    denom = float(np.linalg.norm(a) * np.linalg.norm(b))
    if denom < 1e-12:
        return 0.0
    return float(np.dot(a, b) / denom)


def alignment_score(bundle: ModelBundle, prompt: str, image: np.ndarray) -> float:
    """Cosine between the prompt's concept indicator and the detector responses."""
    indicator = bundle.world.indicator(prompt)
    responses = bundle.world.responses(image)
    response_vec = np.array([responses[w] for w in CONCEPT_ORDER])
    return cosine(indicator, response_vec)


_PATCH = 4


def _patch_stats(image: np.ndarray) -> np.ndarray:
    """Per-patch (mean, std, edge energy) per channel on a 4x4 patch grid."""
    C, H, W = image.shape
    gh, gw = H // _PATCH, W // _PATCH
    stats = np.empty((gh * gw, 3 * C))
    idx = 0
    for pi in range(gh):
        for pj in range(gw):
            patch = image[:, pi * _PATCH : (pi + 1) * _PATCH, pj * _PATCH : (pj + 1) * _PATCH]
            dx = np.abs(np.diff(patch, axis=2)).mean(axis=(1, 2))
            dy = np.abs(np.diff(patch, axis=1)).mean(axis=(1, 2))
            stats[idx] = np.concatenate(
                [patch.mean(axis=(1, 2)), patch.std(axis=(1, 2)), 0.5 * (dx + dy)]
            )
            idx += 1
    return stats


def perceptual_distance(x: np.ndarray, y: np.ndarray) -> float:
    """Patch-statistic L2 distance, normalized to [0, 1]; 0 iff patch stats agree."""
    if x.shape != y.shape:
        raise NumericsError(f"image shapes disagree: {x.shape} vs {y.shape}")
    sx = _patch_stats(np.asarray(x, dtype=np.float64))
    sy = _patch_stats(np.asarray(y, dtype=np.float64))
    per_patch = np.linalg.norm(sx - sy, axis=1) / np.sqrt(sx.shape[1])
    return float(per_patch.mean())


def unsafe_ratio(
    bundle: ModelBundle,
    corpus: Corpus,
    guard: SoftPromptEmbedding | None,
    category: Category,
    n: int = 200,
    seed: int = 0,
) -> float:
    """Percent of n generations on which any unsafe head fires.

    Prompts round-robin over the category's eval split; image i draws from
    stream i of the evaluation seed, so cells are reproducible independently.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    prompts = corpus.eval_prompts(category)
    if not prompts:
        raise ValueError(f"corpus has no eval prompts for category {category.name}")
    fires = 0
    for i in range(n):
        prompt = prompts[i % len(prompts)]
        image = generate_with_base(bundle, prompt, guard, Rng(seed, i))
        fires += int(not classify_safety(bundle.world, image).safe)
    return 100.0 * fires / n


def benign_metrics(
    bundle: ModelBundle,
    corpus: Corpus,
    guard: SoftPromptEmbedding | None,
    n: int = 120,
    seed: int = 0,
) -> tuple[float, float]:
    """Mean alignment score and mean perceptual distance to reference latents."""
    pairs = corpus.select(kind="benign", split="eval")
    if not pairs:
        raise ValueError("corpus has no benign eval pairs")
    align_total, perc_total = 0.0, 0.0
    for i in range(n):
        pair = pairs[i % len(pairs)]
        image = generate_with_base(bundle, pair.prompt, guard, Rng(seed, 50000 + i))
        align_total += alignment_score(bundle, pair.prompt, image)
        perc_total += perceptual_distance(image, decode_latent(bundle.codec, pair.z0_primary))
    return align_total / n, perc_total / n


def avg_time(
    bundle: ModelBundle,
    guard: SoftPromptEmbedding | None,
    prompts: Sequence[str],
    n: int = 50,
    generate_fn: Callable[[str, int], object] | None = None,
) -> float:
    """Mean wall-clock seconds per generation over n runs, 3 warmups excluded."""
    if n < 10:
        raise ValueError("n must be >= 10 for a stable timing estimate")
    if generate_fn is None:
        def generate_fn(prompt: str, i: int):
            return generate_with_base(bundle, prompt, guard, Rng(0, 60000 + i))

    for i in range(3):
        generate_fn(prompts[i % len(prompts)], i)
    started = time.perf_counter()
    for i in range(n):
        generate_fn(prompts[i % len(prompts)], 3 + i)
    return (time.perf_counter() - started) / n


@dataclass
class EvalReport:
    unsafe_ratios: dict[str, float]
    benign_alignment: float
    benign_perceptual: float
    n_unsafe: int
    n_benign: int
    seed: int
    guard: str  # "none", a category name, or "combined"
    config_fingerprint: str
    avg_time_s: float | None = None
    command: str = ""

    def to_dict(self) -> dict:
        out = {
            "unsafe_ratios": dict(self.unsafe_ratios),
            "benign_alignment": self.benign_alignment,
            "benign_perceptual": self.benign_perceptual,
            "n_unsafe": self.n_unsafe,
            "n_benign": self.n_benign,
            "seed": self.seed,
            "guard": self.guard,
            "config_fingerprint": self.config_fingerprint,
            "command": self.command,
        }
        if self.avg_time_s is not None:
            out["avg_time_s"] = self.avg_time_s
        return out

    def markdown(self) -> str:
        rows = [(f"unsafe ratio {name} (%)", f"{v:.2f}") for name, v in
                sorted(self.unsafe_ratios.items())]
        rows += [
            ("benign alignment", f"{self.benign_alignment:.4f}"),
            ("benign perceptual distance", f"{self.benign_perceptual:.4f}"),
        ]
        if self.avg_time_s is not None:
            rows.append(("avg time (s/image)", f"{self.avg_time_s:.4f}"))
        body = "\n".join(f"| {k} | {v} |" for k, v in rows)
        return (
            f"# Evaluation (guard: {self.guard})\n\n"
            f"| metric | value |\n|---|---|\n{body}\n\n"
            f"seed: {self.seed}, n_unsafe: {self.n_unsafe}, n_benign: {self.n_benign}\n"
        )


def guard_label(guard: SoftPromptEmbedding | None) -> str:
    if guard is None:
        return "none"
    return "combined" if guard.category is None else guard.category.name


def full_evaluation(
    bundle: ModelBundle,
    corpus: Corpus,
    guard: SoftPromptEmbedding | None,
    n_unsafe: int = 200,
    n_benign: int = 120,
    seed: int = 0,
) -> EvalReport:
    ratios = {
        cat.name: unsafe_ratio(bundle, corpus, guard, cat, n_unsafe, seed)
        for cat in CATEGORIES
    }
    align, perc = benign_metrics(bundle, corpus, guard, n_benign, seed)
    return EvalReport(
        unsafe_ratios=ratios,
        benign_alignment=align,
        benign_perceptual=perc,
        n_unsafe=n_unsafe,
        n_benign=n_benign,
        seed=seed,
        guard=guard_label(guard),
        config_fingerprint=bundle.content_hash()[:16],
    )


@dataclass
class SweepTable:
    axis: str  # "lambda" or "steps"
    category: str
    rows: list[dict] = field(default_factory=list)
    seed: int = 0

    def to_dict(self) -> dict:
        return {"axis": self.axis, "category": self.category, "seed": self.seed,
                "rows": self.rows}

    def headers(self) -> list[str]:
        return [self.axis, "unsafe_ratio", "alignment", "perceptual"]

    def markdown(self) -> str:
        head = "| " + " | ".join(self.headers()) + " |"
        sep = "|" + "---|" * len(self.headers())
        lines = [head, sep]
        for row in self.rows:
            lines.append(
                f"| {row[self.axis]} | {row['unsafe_ratio']:.2f} "
                f"| {row['alignment']:.4f} | {row['perceptual']:.4f} |"
            )
        return f"# {self.axis} sweep, category {self.category}\n\n" + "\n".join(lines) + "\n"

    def csv(self) -> str:
        lines = [",".join(self.headers())]
        for row in self.rows:
            lines.append(
                f"{row[self.axis]},{row['unsafe_ratio']},{row['alignment']},"
                f"{row['perceptual']}"
            )
        return "\n".join(lines) + "\n"


def _sweep_cell(bundle, corpus, config, n_unsafe, n_benign, seed):
    from .trainer import train_soft_prompt

    guard, _ = train_soft_prompt(bundle, corpus, config)
    ratio = unsafe_ratio(bundle, corpus, guard, config.category, n_unsafe, seed)
    align, perc = benign_metrics(bundle, corpus, guard, n_benign, seed)
    return guard, ratio, align, perc


def sweep_lambda(
    bundle: ModelBundle,
    corpus: Corpus,
    category: Category,
    lambdas: Sequence[float],
    steps: int = 1000,
    seed: int = 0,
    n_unsafe: int = 200,
    n_benign: int = 120,
) -> SweepTable:
    """One full train+eval per lambda; rows sorted ascending."""
    from .trainer import TrainConfig

    table = SweepTable(axis="lambda", category=category.name, seed=seed)
    for lam in sorted(float(x) for x in lambdas):
        config = TrainConfig(category=category, lam=lam, steps=steps, seed=seed)
        _, ratio, align, perc = _sweep_cell(bundle, corpus, config, n_unsafe, n_benign, seed)
        table.rows.append(
            {"lambda": lam, "unsafe_ratio": ratio, "alignment": align, "perceptual": perc}
        )
    return table


def sweep_steps(
    bundle: ModelBundle,
    corpus: Corpus,
    category: Category,
    step_values: Sequence[int],
    lam: float | None = None,
    seed: int = 0,
    n_unsafe: int = 200,
    n_benign: int = 120,
) -> SweepTable:
    """One full train+eval per step count at a fixed lambda."""
    from .trainer import TrainConfig

    table = SweepTable(axis="steps", category=category.name, seed=seed)
    for steps in sorted(int(s) for s in step_values):
        if steps < 1:
            raise ValueError("step values must be positive")
        config = TrainConfig(category=category, lam=lam, steps=steps, seed=seed)
        _, ratio, align, perc = _sweep_cell(bundle, corpus, config, n_unsafe, n_benign, seed)
        table.rows.append(
            {"steps": steps, "unsafe_ratio": ratio, "alignment": align, "perceptual": perc}
        )
    return table


@dataclass
class TransferMatrix:
    """Unsafe ratios for every (guard category, prompt category) pair."""

    cells: dict[str, dict[str, float]]
    baseline: dict[str, float]
    n: int
    seed: int

    def to_dict(self) -> dict:
        return {"cells": self.cells, "baseline": self.baseline, "n": self.n, "seed": self.seed}

    def row_major(self) -> list[float]:
        return [self.cells[g.name][p.name] for g in CATEGORIES for p in CATEGORIES]

    def markdown(self) -> str:
        head = "| guard \\ prompts | " + " | ".join(c.name for c in CATEGORIES) + " |"
        sep = "|---|" + "---|" * len(CATEGORIES)
        lines = [head, sep]
        for g in CATEGORIES:
            cells = " | ".join(f"{self.cells[g.name][p.name]:.2f}" for p in CATEGORIES)
            lines.append(f"| {g.name} | {cells} |")
        base = " | ".join(f"{self.baseline[p.name]:.2f}" for p in CATEGORIES)
        lines.append(f"| (no guard) | {base} |")
        return "# Cross-category transfer\n\n" + "\n".join(lines) + "\n"


def transfer_matrix(
    bundle: ModelBundle,
    corpus: Corpus,
    guards: dict[Category, SoftPromptEmbedding],
    n: int = 200,
    seed: int = 0,
) -> TransferMatrix:
    missing = [c.name for c in CATEGORIES if c not in guards]
    if missing:
        raise ValueError(f"missing guards for categories: {missing}")
    cells = {
        g.name: {
            p.name: unsafe_ratio(bundle, corpus, guards[g], p, n, seed) for p in CATEGORIES
        }
        for g in CATEGORIES
    }
    baseline = {p.name: unsafe_ratio(bundle, corpus, None, p, n, seed) for p in CATEGORIES}
    return TransferMatrix(cells=cells, baseline=baseline, n=n, seed=seed)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"
