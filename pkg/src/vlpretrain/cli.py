"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime failure.  Every command that
writes artifacts also writes ``manifest.json`` next to them (command line,
seed, library versions, output digests; no timestamps, so reruns are
byte-identical).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import atomic_write_text, dump_json
from .errors import CheckpointError, ConfigError, InputError

log = logging.getLogger("vlpretrain")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out_dir: Path, command: str, argv: list[str], seed: int | None, extra: dict | None = None) -> Path:
    """Manifest of a run: inputs, seed, versions and sha256 of every file in ``out_dir``."""
    out_dir = Path(out_dir)
    files = {}
    for p in sorted(out_dir.rglob("*")):
        if p.is_file() and p.name != "manifest.json" and not p.name.endswith(".tmp"):
            files[str(p.relative_to(out_dir))] = _digest(p)
    body = {
        "command": command,
        "argv": list(argv),
        "seed": seed,
        "versions": {"vlpretrain": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
        "outputs": files,
    }
    if extra:
        body.update(extra)
    path = out_dir / "manifest.json"
    atomic_write_text(path, dump_json(body))
    return path


# -- subcommands --------------------------------------------------------------------------

def cmd_gen(args, argv) -> int:
    from dataclasses import replace

    from .synth import DomainShift, WorldSpec, generate, make_domain_pair, make_eval_pool

    spec = WorldSpec(**json.loads(Path(args.world).read_text())) if args.world else WorldSpec()
    if args.num_images is not None:
        spec = replace(spec, num_images=args.num_images)
    out = Path(args.out)
    if args.kind == "corpus":
        generate(spec, args.seed, out.name).save(out)
    elif args.kind == "pool":
        make_eval_pool(spec, spec.num_images, args.captions_per_image, args.seed).save(out)
    else:
        ood, ind = make_domain_pair(spec, DomainShift(args.shift, args.size_ratio), args.seed)
        ood.save(out / "out_of_domain")
        ind.save(out / "in_domain")
    write_manifest(out, "gen", argv, args.seed, {"world": spec.to_dict()})
    print(f"wrote {args.kind} to {out}")
    return EXIT_OK


def cmd_pipeline(args, argv) -> int:
    from .pipeline import Policy, run_files

    policy = Policy.from_file(args.policy) if args.policy else Policy()
    out = Path(args.out)
    report = Path(args.report) if args.report else None
    stats = run_files(args.inp, out, policy, report, workers=args.workers)
    d = stats.to_dict()
    for name, c in d["stages"].items():
        dropped = ", ".join(f"{k}={v}" for k, v in c["dropped"].items()) or "-"
        print(f"{name:<16} in={c['input']:<7} kept={c['kept']:<7} dropped: {dropped}")
    manifest_dir = out if out.is_dir() else out.parent
    write_manifest(manifest_dir, "pipeline", argv, None, {"policy": policy.to_dict()})
    return EXIT_OK


def cmd_train(args, argv) -> int:
    from dataclasses import replace

    from . import plotting
    from .retrieval import format_table
    from .trainer import StagePlan, run_plan

    plan = StagePlan.from_file(args.plan)
    if args.seed is not None:
        plan = replace(plan, seed=args.seed)
    out = Path(args.out)
    res = run_plan(plan, out, init=args.init)
    reports = []
    for i, stage in enumerate(plan.stages):
        mpath = out / f"stage{i}_{stage.name}" / "metrics.jsonl"
        if mpath.exists():
            reports += [json.loads(line) for line in mpath.read_text().splitlines() if line]
    if reports:
        plotting.loss_curves(reports, out / "loss_curves.png")
    last = res["stages"][-1] if res["stages"] else {}
    if last.get("eval"):
        print(format_table(last["eval"]), end="")
        plotting.recall_bars(last["eval"], out / "recall.png", f"after stage {last['name']}")
    write_manifest(out, "train", argv, plan.seed, {"plan_digest": res["plan_digest"]})
    print(f"final checkpoint: {out / 'final'}")
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    from . import plotting
    from .data import Corpus
    from .model import Model
    from .retrieval import eval_report, format_table
    from .tokenizer import Vocab

    model = Model.load(args.checkpoint)
    pool = Corpus.load(args.pool)
    vocab = Vocab.from_file(args.vocab) if args.vocab else Vocab.default()
    rows = eval_report(model, pool, vocab, tuple(args.ks))
    print(format_table(rows), end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        atomic_write_text(out / "report.json", dump_json({"rows": rows}))
        atomic_write_text(out / "report.txt", format_table(rows))
        plotting.recall_bars(rows, out / "recall.png")
        write_manifest(out, "eval", argv, None)
    return EXIT_OK


def cmd_tokenize(args, argv) -> int:
    from .tokenizer import Vocab, subword_tokens, tokenize

    vocab = Vocab.from_file(args.vocab) if args.vocab else Vocab.default()
    if args.max_len is None:
        print(" ".join(subword_tokens(args.text, vocab)))
    else:
        seq = tokenize(args.text, vocab, args.max_len)
        print(" ".join(vocab.token(i) for i in seq.token_ids))
        print(" ".join(str(i) for i in seq.token_ids))
    return EXIT_OK


def cmd_gradcheck(args, argv) -> int:
    from .gradcheck import run_suite
    from .model import ModelConfig

    cfg = ModelConfig.from_file(args.config) if args.config else ModelConfig.tiny()
    if cfg.dropout:
        cfg = ModelConfig.from_dict({**cfg.to_dict(), "dropout": 0.0})
    results = run_suite(cfg, args.seed, max_coords=args.max_coords)
    worst = max(results, key=lambda r: r.rel_error)
    failed = [r for r in results if not r.rel_error < args.tol]
    if args.list:
        for r in results:
            print(f"{r.name:<48} {r.rel_error:.3e} ({r.n_coords} coords)")
    print(f"checked {len(results)} tensors; max relative error {worst.rel_error:.3e} at {worst.name}")
    if failed:
        print(f"{len(failed)} checks above tolerance {args.tol:g}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_ablate(args, argv) -> int:
    from dataclasses import replace

    from .experiments import AblationScale, run_ablations
    from .model import ModelConfig
    from .synth import WorldSpec

    scale = AblationScale()
    if args.config:
        d = json.loads(Path(args.config).read_text())
        if "world" in d:
            d["world"] = WorldSpec(**d["world"])
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        for k in ("roi_counts", "seeds"):
            if k in d:
                d[k] = tuple(d[k])
        scale = replace(scale, **d)
    if args.seeds:
        scale = replace(scale, seeds=tuple(args.seeds))
    out = Path(args.out)
    res = run_ablations(scale, args.which, out)
    print(res.tables(), end="")
    write_manifest(out, "ablate", argv, None, {"seeds": list(scale.seeds)})
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------------

def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vlpretrain", description="Cross-modal pre-training toolkit on synthetic and cleaned corpora.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic corpus, domain pair or evaluation pool")
    g.add_argument("--out", required=True)
    g.add_argument("--kind", choices=("corpus", "domain-pair", "pool"), default="corpus")
    g.add_argument("--world", help="JSON file of world-spec overrides")
    g.add_argument("--num-images", type=int)
    g.add_argument("--captions-per-image", type=int, default=5, help="pool only")
    g.add_argument("--shift", type=float, default=1.0, help="domain-pair only")
    g.add_argument("--size-ratio", type=int, default=5, help="domain-pair only")
    g.add_argument("--seed", type=int, default=42)
    g.set_defaults(fn=cmd_gen)

    pl = sub.add_parser("pipeline", help="clean a raw image-text corpus")
    plsub = pl.add_subparsers(dest="action", parser_class=_Parser)
    run = plsub.add_parser("run")
    run.add_argument("--in", dest="inp", required=True, help="records JSONL file or corpus directory")
    run.add_argument("--out", required=True)
    run.add_argument("--policy", help="policy JSON (defaults documented in README)")
    run.add_argument("--report", help="write stage counters as JSON here")
    run.add_argument("--workers", type=int, default=1)
    run.set_defaults(fn=cmd_pipeline)

    t = sub.add_parser("train", help="run a multi-stage training plan")
    t.add_argument("--plan", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--init", help="checkpoint stem to start from")
    t.add_argument("--seed", type=int, default=None, help="overrides the plan seed (plans default to 42)")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="Recall@K of a checkpoint on a pool")
    e.add_argument("--pool", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--ks", type=_ints, default=[1, 5, 10])
    e.add_argument("--vocab")
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)

    k = sub.add_parser("tokenize", help="WordPiece-tokenize a string")
    k.add_argument("--text", required=True)
    k.add_argument("--vocab")
    k.add_argument("--max-len", type=int)
    k.set_defaults(fn=cmd_tokenize)

    c = sub.add_parser("gradcheck", help="finite-difference check of every op and model loss")
    c.add_argument("--config", help="model config JSON (default: tiny)")
    c.add_argument("--seed", type=int, default=42)
    c.add_argument("--max-coords", type=int, default=8)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--list", action="store_true", help="print every check, not just the worst")
    c.set_defaults(fn=cmd_gradcheck)

    a = sub.add_parser("ablate", help="seeded ablations: stage order, fine-tune losses, RoI count")
    a.add_argument("--out", required=True)
    a.add_argument("--config", help="JSON overrides of the ablation scale")
    a.add_argument("--seeds", type=_ints)
    a.add_argument("--which", nargs="+", choices=("multistage", "finetune_loss", "roi_count"),
                   default=["multistage", "finetune_loss", "roi_count"])
    a.set_defaults(fn=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "fn", None) is None:
            raise UsageError(parser.format_help())
    except UsageError as e:
        print(str(e), file=sys.stderr, end="" if str(e).endswith("\n") else "\n")
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args, argv)
    except (ConfigError, InputError, CheckpointError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"vlpretrain {args.command}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # keep the exit-code contract for anything unexpected
        print(f"vlpretrain {args.command}: unexpected {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
