"""Operator entry point wiring the pipeline end to end.

Subcommands: pretrain, gen-data, train, combine, generate, evaluate,
sweep-lambda, sweep-steps, transfer, bench, config. Artifacts land in a
workspace directory (flag --workspace or env SOFTGUARD_WORKSPACE) under
fixed subpaths, named by content hash so identical reruns are cache hits
and nothing is ever silently overwritten.

Exit codes: 0 ok, 2 usage or missing input, 3 precondition failure,
4 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from . import config as config_mod
from .bundle import load_checkpoint, save_checkpoint
from .dataprep import (
    Corpus,
    CorpusConfig,
    build_corpus,
    generate_with_base,
    load_corpus,
    save_corpus,
)
from .evalharness import (
    avg_time,
    canonical_json,
    classify_safety,
    full_evaluation,
    guard_label,
    sweep_lambda,
    sweep_steps,
    transfer_matrix,
)
from .latentcodec import export_png, save_image
from .numerics import Rng
from .textenc import CATEGORIES, Category, load_embedding, save_embedding
from .trainer import (
    PreconditionError,
    PretrainConfig,
    TrainConfig,
    TrainerError,
    pretrain_base,
    train_soft_prompt,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_PRECONDITION = 3
EXIT_RUNTIME = 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


@dataclass
class ProjectLayout:
    root: Path

    SUBDIRS = ("checkpoints", "corpora", "guards", "reports", "configs")

    def dir(self, name: str) -> Path:
        path = self.root / name
        path.mkdir(parents=True, exist_ok=True)
        return path

    def place(self, subdir: str, stem: str, suffix: str, payload: bytes) -> tuple[Path, bool]:
        """Write payload under a content-hash name; returns (path, cache_hit)."""
        digest = hashlib.sha256(payload).hexdigest()[:12]
        path = self.dir(subdir) / f"{stem}-{digest}{suffix}"
        if path.exists():
            return path, True
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(payload)
        tmp.rename(path)
        return path, False


def _workspace(args) -> ProjectLayout:
    root = args.workspace or os.environ.get("SOFTGUARD_WORKSPACE") or "softguard-workspace"
    return ProjectLayout(root=Path(root))


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found: {p}")
    return p


def _load_cfg(args) -> dict:
    if getattr(args, "config", None):
        return config_mod.load_config(_require_file(args.config, "config file"))
    return config_mod.default_config()


def _reproduction_command() -> str:
    return "softguard " + " ".join(sys.argv[1:])


def _write_report(layout: ProjectLayout, stem: str, payload: dict,
                  markdown: str | None = None, csv: str | None = None) -> Path:
    body = canonical_json(payload).encode("utf-8")
    path, hit = layout.place("reports", stem, ".json", body)
    if markdown is not None:
        path.with_suffix(".md").write_text(markdown, encoding="utf-8")
    if csv is not None:
        path.with_suffix(".csv").write_text(csv, encoding="utf-8")
    print(f"report: {path}{' (cache hit)' if hit else ''}")
    return path


def cmd_pretrain(args) -> int:
    cfg = _load_cfg(args)["pretrain"]
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.steps is not None:
        cfg["steps"] = args.steps
    layout = _workspace(args)
    pconfig = PretrainConfig(**cfg)
    tmp = layout.dir("checkpoints") / f".pretrain-{pconfig.seed}.tmp"
    code = EXIT_OK
    try:
        _, report = pretrain_base(pconfig, checkpoint_path=tmp)
    except PreconditionError as exc:
        report = exc.report
        code = EXIT_PRECONDITION
    payload = tmp.read_bytes()
    path, hit = layout.place("checkpoints", "base", ".pgm", payload)
    tmp.unlink()
    print(f"checkpoint: {path}{' (cache hit)' if hit else ''}")
    print(f"pretrain loss: {report.loss_first:.4f} -> {report.loss_last:.4f}")
    for name, rate in report.unsafe_rates.items():
        print(f"unsafe fire rate {name}: {rate:.2f}")
    print(f"benign alignment: {report.benign_alignment:.3f}")
    print(f"precondition: {'PASS' if report.passed else 'FAIL'}")
    return code


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)["corpus"]
    if args.seed is not None:
        cfg["seed"] = args.seed
    layout = _workspace(args)
    bundle = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    corpus_cfg = CorpusConfig(**cfg)
    corpus = build_corpus(bundle, corpus_cfg, Rng(corpus_cfg.seed, 0))
    tmp = layout.dir("corpora") / ".corpus.tmp"
    save_corpus(tmp, corpus)
    path, hit = layout.place("corpora", "corpus", ".pgc", tmp.read_bytes())
    tmp.unlink()
    print(f"corpus: {path}{' (cache hit)' if hit else ''}")
    for key, count in corpus.counts().items():
        print(f"  {key}: {count}")
    return EXIT_OK


def _train_one(bundle, corpus, cat: Category, args, cfg_train: dict, layout: ProjectLayout):
    overrides = []
    lam = cfg_train["lambda"][cat.name]
    if args.lam is not None:
        lam = args.lam
        overrides.append("lambda")
    steps = cfg_train["steps"]
    if args.steps is not None:
        steps = args.steps
        overrides.append("steps")
    seed = cfg_train["seed"]
    if args.seed is not None:
        seed = args.seed
        overrides.append("seed")
    tconfig = TrainConfig(
        category=cat, lam=lam, steps=steps, seed=seed,
        batch_benign=cfg_train["batch_benign"], batch_malicious=cfg_train["batch_malicious"],
        lr=cfg_train["lr"], norm_cap=cfg_train["norm_cap"], k=cfg_train["k"],
    )
    guard, log = train_soft_prompt(bundle, corpus, tconfig)
    if overrides:
        guard.metadata["flag_overrides"] = overrides
    tmp = layout.dir("guards") / f".guard-{cat.name}.tmp"
    save_embedding(tmp, guard)
    path, hit = layout.place("guards", f"guard-{cat.name}", ".pge", tmp.read_bytes())
    tmp.unlink()
    log_path = path.with_suffix(".runlog.jsonl")
    if not log_path.exists():
        log.save_jsonl(log_path)
    print(f"guard {cat.name}: {path}{' (cache hit)' if hit else ''}")
    return guard, path


def cmd_train(args) -> int:
    cfg_train = _load_cfg(args)["train"]
    layout = _workspace(args)
    bundle = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    corpus = load_corpus(_require_file(args.corpus, "corpus"))
    if args.category == "all":
        from .textenc import combine_embeddings

        guards = {}
        for cat in CATEGORIES:
            guards[cat], _ = _train_one(bundle, corpus, cat, args, cfg_train, layout)
        combined = combine_embeddings([guards[c] for c in CATEGORIES])
        tmp = layout.dir("guards") / ".guard-combined.tmp"
        save_embedding(tmp, combined)
        path, hit = layout.place("guards", "guard-combined", ".pge", tmp.read_bytes())
        tmp.unlink()
        print(f"guard combined: {path}{' (cache hit)' if hit else ''}")
    else:
        _train_one(bundle, corpus, Category[args.category], args, cfg_train, layout)
    return EXIT_OK


def cmd_combine(args) -> int:
    from .textenc import combine_embeddings

    layout = _workspace(args)
    parts = [load_embedding(_require_file(p, "guard file")) for p in args.guards]
    combined = combine_embeddings(parts)
    tmp = layout.dir("guards") / ".guard-combined.tmp"
    save_embedding(tmp, combined)
    path, hit = layout.place("guards", "guard-combined", ".pge", tmp.read_bytes())
    tmp.unlink()
    print(f"guard combined: {path}{' (cache hit)' if hit else ''}")
    return EXIT_OK


def _load_guard(args):
    if getattr(args, "guard", None):
        return load_embedding(_require_file(args.guard, "guard file"))
    return None


def cmd_generate(args) -> int:
    bundle = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    guard = _load_guard(args)
    image = generate_with_base(bundle, args.prompt, guard, Rng(args.seed, 0))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_image(out, image)
    export_png(out.with_suffix(".png"), image)
    verdict = classify_safety(bundle.world, image)
    fired = [cat.name for cat, f in verdict.fires.items() if f]
    print(f"image: {out} (+ .png)")
    print(f"verdict: {'safe' if verdict.safe else 'unsafe ' + ','.join(fired)}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load_cfg(args)["eval"]
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.n_unsafe is not None:
        cfg["n_unsafe"] = args.n_unsafe
    if args.n_benign is not None:
        cfg["n_benign"] = args.n_benign
    layout = _workspace(args)
    bundle = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    corpus = load_corpus(_require_file(args.corpus, "corpus"))
    guard = _load_guard(args)
    report = full_evaluation(
        bundle, corpus, guard,
        n_unsafe=cfg["n_unsafe"], n_benign=cfg["n_benign"], seed=cfg["seed"],
    )
    report.command = _reproduction_command()
    _write_report(layout, f"eval-{guard_label(guard)}", report.to_dict(), report.markdown())
    for name, ratio in sorted(report.unsafe_ratios.items()):
        print(f"unsafe ratio {name}: {ratio:.2f}%")
    print(f"benign alignment: {report.benign_alignment:.4f}")
    print(f"benign perceptual: {report.benign_perceptual:.4f}")
    return EXIT_OK


def _parse_floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _parse_ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def cmd_sweep_lambda(args) -> int:
    cfg = _load_cfg(args)
    layout = _workspace(args)
    bundle = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    corpus = load_corpus(_require_file(args.corpus, "corpus"))
    table = sweep_lambda(
        bundle, corpus, Category[args.category], _parse_floats(args.lambdas),
        steps=args.steps if args.steps is not None else cfg["train"]["steps"],
        seed=args.seed if args.seed is not None else cfg["eval"]["seed"],
        n_unsafe=cfg["eval"]["n_unsafe"], n_benign=cfg["eval"]["n_benign"],
    )
    payload = table.to_dict()
    payload["command"] = _reproduction_command()
    _write_report(layout, f"sweep-lambda-{args.category}", payload, table.markdown(),
                  table.csv())
    print(table.markdown())
    return EXIT_OK


def cmd_sweep_steps(args) -> int:
    cfg = _load_cfg(args)
    layout = _workspace(args)
    bundle = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    corpus = load_corpus(_require_file(args.corpus, "corpus"))
    lam = args.lam if args.lam is not None else cfg["train"]["lambda"][args.category]
    table = sweep_steps(
        bundle, corpus, Category[args.category], _parse_ints(args.step_values), lam=lam,
        seed=args.seed if args.seed is not None else cfg["eval"]["seed"],
        n_unsafe=cfg["eval"]["n_unsafe"], n_benign=cfg["eval"]["n_benign"],
    )
    payload = table.to_dict()
    payload["command"] = _reproduction_command()
    _write_report(layout, f"sweep-steps-{args.category}", payload, table.markdown(),
                  table.csv())
    print(table.markdown())
    return EXIT_OK


def cmd_transfer(args) -> int:
    cfg = _load_cfg(args)["eval"]
    layout = _workspace(args)
    bundle = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    corpus = load_corpus(_require_file(args.corpus, "corpus"))
    guards = {}
    for spec in args.guards:
        emb = load_embedding(_require_file(spec, "guard file"))
        if emb.category is None:
            raise CliError(f"{spec} is a combined guard; transfer needs individual guards")
        guards[emb.category] = emb
    missing = [c.name for c in CATEGORIES if c not in guards]
    if missing:
        raise CliError(f"missing guards for categories: {', '.join(missing)}")
    matrix = transfer_matrix(
        bundle, corpus, guards,
        n=args.n if args.n is not None else cfg["n_unsafe"],
        seed=args.seed if args.seed is not None else cfg["seed"],
    )
    payload = matrix.to_dict()
    payload["command"] = _reproduction_command()
    _write_report(layout, "transfer", payload, matrix.markdown())
    print(matrix.markdown())
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _load_cfg(args)["bench"]
    if args.n is not None:
        cfg["n"] = args.n
    layout = _workspace(args)
    bundle = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    guard = _load_guard(args)
    prompts = []
    for word in bundle.world.benign_words:
        prompts.append(bundle.world.prompts_for_word(word)[0])
    times = []
    for i in range(3):
        generate_with_base(bundle, prompts[i % len(prompts)], guard, Rng(cfg["seed"], i))
    import time as _time

    for i in range(cfg["n"]):
        started = _time.perf_counter()
        generate_with_base(bundle, prompts[i % len(prompts)], guard, Rng(cfg["seed"], 100 + i))
        times.append(_time.perf_counter() - started)
    payload = {
        "guard": guard_label(guard),
        "n": cfg["n"],
        "seed": cfg["seed"],
        "mean_s": float(sum(times) / len(times)),
        "min_s": float(min(times)),
        "max_s": float(max(times)),
        "per_run_s": [float(t) for t in times],
        "command": _reproduction_command(),
        "note": "wall-clock timings; bytes vary across reruns by design",
    }
    md = (
        f"# Generation timing (guard: {payload['guard']})\n\n"
        f"| n | mean s/image | min | max |\n|---|---|---|---|\n"
        f"| {cfg['n']} | {payload['mean_s']:.4f} | {payload['min_s']:.4f} "
        f"| {payload['max_s']:.4f} |\n"
    )
    _write_report(layout, f"bench-{payload['guard']}", payload, md)
    print(f"avg time: {payload['mean_s']:.4f} s/image over n={cfg['n']}")
    return EXIT_OK


def cmd_config(args) -> int:
    if args.action == "init":
        text = config_mod.dump_config(config_mod.default_config())
        if args.out:
            Path(args.out).write_text(text, encoding="utf-8")
            print(f"config written: {args.out}")
        else:
            print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="softguard",
        description="Soft-prompt safety tuning for a toy latent-diffusion model.",
    )
    parser.add_argument("--workspace", default=None,
                        help="workspace root (default: $SOFTGUARD_WORKSPACE or ./softguard-workspace)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="pretrain and freeze the base model")
    p.add_argument("--config", default=None, help="config JSON (default: embedded defaults)")
    p.add_argument("--seed", type=int, default=None, help="override pretrain seed")
    p.add_argument("--steps", type=int, default=None, help="override pretrain steps")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("gen-data", help="build the training corpus from the base model")
    p.add_argument("--checkpoint", required=True, help="base checkpoint (PGM1)")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None, help="override corpus seed")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train per-category soft prompts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--category", required=True, choices=["A", "B", "C", "D", "all"])
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="contrast weight in [0,1] (default: per-category config value)")
    p.add_argument("--steps", type=int, default=None, help="optimization steps (default: config)")
    p.add_argument("--seed", type=int, default=None, help="training seed (default: config)")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("combine", help="combine four individual guards into one")
    p.add_argument("guards", nargs=4, help="four PGE1 files, one per category")
    p.set_defaults(func=cmd_combine)

    p = sub.add_parser("generate", help="generate one image")
    p.add_argument("prompt")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--guard", default=None, help="optional PGE1 guard to append")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="image.img1")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="full metric report for one guard setting")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--guard", default=None)
    p.add_argument("--n-unsafe", type=int, default=None, help="generations per unsafe cell")
    p.add_argument("--n-benign", type=int, default=None, help="generations for benign metrics")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep-lambda", help="train+eval across lambda values")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--category", required=True, choices=["A", "B", "C", "D"])
    p.add_argument("--lambdas", required=True, help="comma-separated values in [0,1]")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_sweep_lambda)

    p = sub.add_parser("sweep-steps", help="train+eval across optimization steps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--category", required=True, choices=["A", "B", "C", "D"])
    p.add_argument("--step-values", required=True, help="comma-separated step counts")
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_sweep_steps)

    p = sub.add_parser("transfer", help="4x4 cross-category transfer matrix")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--guards", nargs="+", required=True,
                   help="individual guard files covering all four categories")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("bench", help="wall-clock generation timing")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--guard", default=None)
    p.add_argument("--n", type=int, default=None, help="timed generations (default: config)")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("config", help="configuration utilities")
    p.add_argument("action", choices=["init"])
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_config)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except PreconditionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except TrainerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
