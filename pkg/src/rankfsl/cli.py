"""``rankfsl`` command line: data generation, evaluation, training, ablations, benchmarks.

Exit codes: 0 success, 1 usage error, 2 data/input error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import statistics
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from ._seeding import rng_for
from .ablation import MaskSpec, masked_eval, sweep_alpha, sweep_csv, sweep_pair_budget
from .classifier import ClassifierConfig
from .data import (DataError, LabeledFeatureSet, SyntheticSpec, atomic_write_text, channel_stats,
                   format_features, generate_synthetic, load_features, write_temp)
from .episode import EpisodeConfig, evaluate_tasks
from .metrics import (MetricKind, MetricSpec, cosine_similarity, kendall_tau_fast, kendall_tau_naive,
                      pair_count, sample_pairs, sampled_kendall)
from .model import (LinearEmbedder, NumericalAbort, TrainConfig, checkpoint_text, load_checkpoint,
                    pretrain_ce, train_meta)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# Flags that never change results and are left out of the echoed run config.
_NON_PROVENANCE = {"threads", "out", "log", "base_out", "novel_out", "func"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- argument types --------------------------------------------------------


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _nonneg_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _positive_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not v > 0 or not np.isfinite(v):
        raise argparse.ArgumentTypeError(f"must be a finite value > 0, got {text}")
    return v


def _metric(text: str) -> MetricSpec:
    try:
        return MetricSpec.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _mask(text: str) -> Optional[MaskSpec]:
    if text == "none":
        return None
    try:
        return MaskSpec.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _float_list(text: str) -> list[float]:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad number list {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad integer list {text!r}") from None
    if not vals or min(vals) < 2:
        raise argparse.ArgumentTypeError("dimensions must be >= 2")
    return vals


def _budget_list(text: str) -> list[str]:
    """Budgets as integers or multiples of the dimension: ``640``, ``n``, ``5n``, ``full``."""
    items = [t.strip() for t in text.split(",") if t.strip()]
    for t in items:
        if t != "full" and not (t.isdigit() or (t.endswith("n") and (t[:-1] == "" or t[:-1].isdigit()))):
            raise argparse.ArgumentTypeError(f"bad pair budget {t!r}")
    if not items:
        raise argparse.ArgumentTypeError("empty budget list")
    return items


def resolve_budget(token: str, dim: int) -> int:
    total = pair_count(dim)
    if token == "full":
        return total
    m = int(token[:-1] or 1) * dim if token.endswith("n") else int(token)
    if not 1 <= m <= total:
        raise ValueError(f"pair budget {token!r} = {m} outside [1, {total}] for n={dim}")
    return m


# -- parser ----------------------------------------------------------------


def _add_global(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--seed", type=int, default=d(0), help="master seed (default 0)")
    p.add_argument("--threads", type=_positive_int, default=d(1), help="worker threads (default 1)")
    p.add_argument("--out", type=Path, default=d(None), help="output path (stdout when omitted)")


def _add_episode(p: argparse.ArgumentParser) -> None:
    p.add_argument("--way", type=_positive_int, default=5)
    p.add_argument("--shot", type=_positive_int, default=1)
    p.add_argument("--query", type=_positive_int, default=15, help="queries per class")


def _add_training(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--init", type=Path, help="start from this checkpoint instead of a random embedder")
    g.add_argument("--d-out", type=_positive_int, default=64, help="embedding dimension of a fresh embedder")
    g.add_argument("--rectify", action="store_true", help="append max(., 0) to a fresh embedder")
    g.add_argument("--pretrain-steps", type=_nonneg_int, default=2000)
    g.add_argument("--pretrain-lr", type=float, default=0.05)
    g.add_argument("--batch-size", type=_positive_int, default=64)
    g.add_argument("--episodes", type=_nonneg_int, default=1000)
    g.add_argument("--lr", type=float, default=0.5)
    g.add_argument("--temperature", type=_positive_float, default=10.0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rankfsl", description="Kendall rank-correlation few-shot toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _add_global(parser, suppress=False)
    common = _Parser(add_help=False)
    _add_global(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", parents=[common], help="generate synthetic base/novel feature CSVs")
    for f in dataclasses.fields(SyntheticSpec):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "novel_class_count":
            p.add_argument(flag, type=int, default=f.default)
        else:
            p.add_argument(flag, type=type(f.default), default=f.default)
    p.add_argument("--base-out", type=Path, help="base CSV path (default OUT/base.csv)")
    p.add_argument("--novel-out", type=Path, help="novel CSV path (default OUT/novel.csv)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("eval", parents=[common], help="few-shot accuracy over seeded tasks")
    p.add_argument("features", type=Path)
    p.add_argument("--metric", type=_metric, default=MetricSpec.kendall())
    p.add_argument("--freeze-pairs", action="store_true",
                   help="sampled Kendall: one pair subset per episode instead of per comparison")
    p.add_argument("--model", type=Path, help="embedder checkpoint applied before comparison")
    p.add_argument("--tasks", type=_positive_int, default=2000)
    p.add_argument("--temperature", type=_positive_float, default=10.0)
    _add_episode(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("train", parents=[common], help="pretrain and meta-train a linear embedder")
    p.add_argument("base", type=Path)
    p.add_argument("--novel", type=Path, help="novel split for periodic evaluation")
    _add_training(p)
    p.add_argument("--alpha", type=_positive_float, default=0.5)
    p.add_argument("--eval-every", type=_nonneg_int, default=250)
    p.add_argument("--eval-tasks", type=_positive_int, default=200)
    p.add_argument("--log", type=Path, help="training log CSV (default OUT.log.csv)")
    _add_episode(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", parents=[common], help="accuracy under channel masks")
    p.add_argument("features", type=Path)
    p.add_argument("--mask", type=_mask, action="append", required=True,
                   help="lowcut:L0, highcut:H0 or none; repeatable")
    p.add_argument("--metric", type=_metric, action="append",
                   help="repeatable (default: cosine and kendall)")
    p.add_argument("--model", type=Path)
    p.add_argument("--tasks", type=_positive_int, default=2000)
    p.add_argument("--temperature", type=_positive_float, default=10.0)
    _add_episode(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-alpha", parents=[common], help="meta-train per alpha, evaluate exact Kendall")
    p.add_argument("base", type=Path)
    p.add_argument("novel", type=Path)
    p.add_argument("--alphas", type=_float_list, default=[0.01, 0.5, 50.0])
    _add_training(p)
    p.add_argument("--tasks", type=_positive_int, default=2000)
    _add_episode(p)
    p.set_defaults(func=cmd_sweep_alpha)

    p = sub.add_parser("sweep-pairs", parents=[common], help="sampled Kendall accuracy per pair budget")
    p.add_argument("features", type=Path)
    p.add_argument("--budgets", type=_budget_list, default=["n", "5n", "full"],
                   help="comma list of integers, kn multiples of the dimension, or 'full'")
    p.add_argument("--sampler-seed", type=int, default=0)
    p.add_argument("--freeze-pairs", action="store_true")
    p.add_argument("--model", type=Path)
    p.add_argument("--tasks", type=_positive_int, default=2000)
    p.add_argument("--temperature", type=_positive_float, default=10.0)
    _add_episode(p)
    p.set_defaults(func=cmd_sweep_pairs)

    p = sub.add_parser("bench", parents=[common], help="median wall-times of the similarity kernels")
    p.add_argument("--dims", type=_int_list, default=[64, 128, 256, 512, 640, 1024])
    p.add_argument("--reps", type=_positive_int, default=5)
    p.set_defaults(func=cmd_bench)
    return parser


# -- helpers -----------------------------------------------------------------


def run_config(args: argparse.Namespace) -> dict:
    """JSON-ready echo of every result-affecting flag."""
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in _NON_PROVENANCE:
            continue
        if isinstance(v, (MetricSpec, MaskSpec, Path)):
            v = str(v) if not isinstance(v, MaskSpec) else f"{v.kind.value}:{v.threshold!r}"
        elif isinstance(v, list):
            v = [str(x) if isinstance(x, MetricSpec) else
                 (f"{x.kind.value}:{x.threshold!r}" if isinstance(x, MaskSpec) else
                  ("none" if x is None else x)) for x in v]
        out[k] = v
    return out


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _inputs(args, *names) -> dict:
    return {n: _file_digest(getattr(args, n)) for n in names if getattr(args, n, None) is not None}


def _provenance(args, *input_names) -> dict:
    return {"run_config": run_config(args), "input_sha256": _inputs(args, *input_names)}


def _emit(args, text: str) -> None:
    if args.out is None:
        sys.stdout.write(text)
    else:
        atomic_write_text(args.out, text)


def _econfig(args) -> EpisodeConfig:
    return EpisodeConfig(args.way, args.shot, args.query)


def _load_model(path: Optional[Path]) -> Optional[LinearEmbedder]:
    return None if path is None else load_checkpoint(path)


def _write_all(targets: Sequence[tuple[Path, str]]) -> None:
    """Write several files so that either all of them appear or none is touched."""
    temps: list[tuple[str, Path]] = []
    try:
        for path, text in targets:
            temps.append((write_temp(path, text), path))
        for tmp, path in temps:
            os.replace(tmp, path)
    finally:
        for tmp, _ in temps:
            if os.path.exists(tmp):
                os.unlink(tmp)


def _initial_model(args, base: LabeledFeatureSet) -> LinearEmbedder:
    if args.init is not None:
        model = load_checkpoint(args.init)
        if model.d_in != base.dim:
            raise DataError(f"checkpoint expects {model.d_in} inputs, base features have {base.dim}")
    else:
        if args.d_out < 2:
            raise UsageError("--d-out must be >= 2")
        model = LinearEmbedder.random(base.dim, args.d_out, (args.seed, 100), rectify=args.rectify)
    if args.pretrain_steps > 0:
        cfg = TrainConfig(learning_rate=args.pretrain_lr, episodes=args.pretrain_steps,
                          seed=args.seed, batch_size=args.batch_size)
        model = pretrain_ce(base, model, None, cfg)
    return model


# -- subcommands -------------------------------------------------------------


def cmd_gen(args) -> int:
    names = [f.name for f in dataclasses.fields(SyntheticSpec)]
    spec = SyntheticSpec(**{n: getattr(args, n) for n in names})
    base, novel = generate_synthetic(spec, args.seed)
    out_dir = args.out if args.out is not None else Path(".")
    base_path = args.base_out or out_dir / "base.csv"
    novel_path = args.novel_out or out_dir / "novel.csv"
    _write_all([(base_path, format_features(base)), (novel_path, format_features(novel))])
    report = {
        "config": run_config(args),
        "base": channel_stats(base).to_dict(),
        "novel": channel_stats(novel).to_dict(),
    }
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_eval(args) -> int:
    data = load_features(args.features)
    metric = args.metric
    if args.freeze_pairs:
        if metric.kind is not MetricKind.KENDALL_SAMPLED:
            raise UsageError("--freeze-pairs applies only to kendall-sampled")
        metric = dataclasses.replace(metric, freeze_pairs=True)
    rep = evaluate_tasks(data, _econfig(args), ClassifierConfig(metric, args.temperature), args.tasks,
                         args.seed, embed=_load_model(args.model), threads=args.threads)
    doc = {"config": _provenance(args, "features", "model"), **rep.to_dict()}
    _emit(args, json.dumps(doc, indent=2) + "\n")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.out is None:
        raise UsageError("train needs --out for the checkpoint")
    base = load_features(args.base)
    novel = load_features(args.novel) if args.novel is not None else None
    model = _initial_model(args, base)
    cfg = TrainConfig(learning_rate=args.lr, episodes=args.episodes, alpha=args.alpha,
                      temperature=args.temperature, econfig=_econfig(args), seed=args.seed,
                      eval_every=args.eval_every, eval_tasks=args.eval_tasks, batch_size=args.batch_size)
    model, log = train_meta(base, novel, model, cfg, threads=args.threads)
    prov = json.dumps(_provenance(args, "base", "novel", "init"), sort_keys=True)
    log_path = args.log or args.out.with_name(args.out.name + ".log.csv")
    _write_all([
        (args.out, checkpoint_text(model, "run_config=" + prov)),
        (log_path, "# run_config=" + prov + "\n" + log.to_csv()),
    ])
    if log.evals:
        first, last = log.evals[0], log.evals[-1]
        print(f"novel accuracy: episode {first[0]} {first[1].mean_accuracy:.4f} +- {first[1].ci95:.4f}, "
              f"episode {last[0]} {last[1].mean_accuracy:.4f} +- {last[1].ci95:.4f}", file=sys.stderr)
    return EXIT_OK


def cmd_ablate(args) -> int:
    data = load_features(args.features)
    metrics = args.metric or [MetricSpec.cosine(), MetricSpec.kendall()]
    model = _load_model(args.model)
    lines = ["# run_config=" + json.dumps(_provenance(args, "features", "model"), sort_keys=True),
             "mask,metric,accuracy,ci95"]
    for mask in args.mask:
        for metric in metrics:
            cfg = ClassifierConfig(metric, args.temperature)
            if mask is None:
                rep = evaluate_tasks(data, _econfig(args), cfg, args.tasks, args.seed, embed=model,
                                     threads=args.threads)
                label = "none"
            else:
                rep = masked_eval(data, _econfig(args), cfg, mask, args.tasks, args.seed, embed=model,
                                  threads=args.threads)
                label = f"{mask.kind.value}:{mask.threshold!r}"
            lines.append(f"{label},{metric},{rep.mean_accuracy!r},{rep.ci95!r}")
    _emit(args, "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_sweep_alpha(args) -> int:
    base = load_features(args.base)
    novel = load_features(args.novel)
    model = _initial_model(args, base)
    cfg = TrainConfig(learning_rate=args.lr, episodes=args.episodes, temperature=args.temperature,
                      econfig=_econfig(args), seed=args.seed, batch_size=args.batch_size)
    rows = sweep_alpha(base, novel, args.alphas, cfg, model, args.tasks, args.seed, threads=args.threads)
    _emit(args, sweep_csv(rows, _provenance(args, "base", "novel", "init")))
    return EXIT_OK


def cmd_sweep_pairs(args) -> int:
    data = load_features(args.features)
    model = _load_model(args.model)
    dim = model.d_out if model is not None else data.dim
    budgets = [resolve_budget(t, dim) for t in args.budgets]
    metric = MetricSpec.kendall_sampled(budgets[0], args.sampler_seed, args.freeze_pairs)
    rows = sweep_pair_budget(data, _econfig(args), ClassifierConfig(metric, args.temperature), budgets,
                             args.tasks, args.seed, embed=model, threads=args.threads)
    _emit(args, sweep_csv(rows, _provenance(args, "features", "model")))
    return EXIT_OK


def _median_time(fn, reps: int) -> tuple[float, object]:
    value = fn()  # warm-up (and JIT compilation)
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times), value


def cmd_bench(args) -> int:
    lines = ["# run_config=" + json.dumps({"run_config": run_config(args)}, sort_keys=True),
             "dim,pairs_sampled,naive_s,fast_s,sampled_s,cosine_s,tau"]
    failures = []
    for n in args.dims:
        rng = rng_for(args.seed, n)
        x = rng.standard_normal(n)
        y = rng.standard_normal(n)
        m = min(5 * n, pair_count(n))
        pairs = sample_pairs(n, m, (args.seed, n, 1))
        t_naive, v_naive = _median_time(lambda: kendall_tau_naive(x, y), args.reps)
        t_fast, v_fast = _median_time(lambda: kendall_tau_fast(x, y), args.reps)
        t_samp, v_samp = _median_time(lambda: sampled_kendall(x, y, pairs), args.reps)
        t_cos, _ = _median_time(lambda: cosine_similarity(x, y), args.reps)
        if v_fast != v_naive:
            failures.append(f"n={n}: fast {v_fast!r} != naive {v_naive!r}")
        if m == pair_count(n) and v_samp != v_naive:
            failures.append(f"n={n}: full-budget sampled {v_samp!r} != exact {v_naive!r}")
        if n >= 512 and not t_fast < t_naive:
            failures.append(f"n={n}: fast ({t_fast:.3g}s) not faster than naive ({t_naive:.3g}s)")
        lines.append(f"{n},{m},{t_naive!r},{t_fast!r},{t_samp!r},{t_cos!r},{v_naive!r}")
    _emit(args, "\n".join(lines) + "\n")
    for f in failures:
        print(f"rankfsl bench: {f}", file=sys.stderr)
    return EXIT_NUMERIC if failures else EXIT_OK


# -- entry point -------------------------------------------------------------


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"rankfsl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalAbort as exc:
        print(f"rankfsl: numerical abort: {exc} (last finite loss: {exc.last_finite_loss!r})",
              file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        print(f"rankfsl: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
