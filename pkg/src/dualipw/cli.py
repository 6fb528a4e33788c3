"""Command-line pipeline: simulate, train, evaluate, analyze, check, export.

Exit codes:
    0  success
    1  missing or unreadable input file
    2  configuration error (unknown key, bad value, bad flag combination)
    3  malformed data file (sessions, annotations, checkpoint, tables)
    4  numerical failure (non-finite loss or gradients, training abort)
    5  a requested check failed its tolerance

Every subcommand writes a resolved-config snapshot into its output
directory; together with the seed it determines all outputs exactly.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from .checks import GRAD_TOLERANCE, gradient_suite, unbiasedness_suite
from .config import KEYS, ConfigError, RunConfig, parse_config_file, write_snapshot
from .dataset.sessions import (
    DataFormatError,
    filter_sessions,
    load_annotations,
    load_sessions,
    save_annotations,
    save_sessions,
)
from .dataset.synthetic import (
    generate_synthetic_world,
    load_sidecar,
    save_sidecar,
    simulate_clicks,
)
from .evalkit import (
    evaluate,
    export_click_weights,
    export_dmp_distributions,
    pilot_partition,
    save_metric_report,
    save_per_query_metrics,
)
from .numkit.adamw import OptimizerError
from .numkit.autodiff import NonFiniteError
from .numkit.checkpoint import CheckpointError
from .propensity import compute_dmp, load_dmp, qcp_forward, save_propensities
from .training import ModelBundle, TrainingDivergedError, train

logger = logging.getLogger("dualipw.cli")

EXIT_INPUT = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_CHECK = 5


class CheckFailed(Exception):
    pass


def _require_file(path: str) -> str:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"input file not found: {path}")
    return path


def _load_config(args) -> RunConfig:
    config = parse_config_file(_require_file(args.config)) if args.config else RunConfig()
    for key, value in args.overrides or []:
        config.set(key, value)
    if getattr(args, "seed", None) is not None:
        config.values["seed"] = args.seed
    return config


def _override(key: str):
    """argparse action factory: ``--lr 0.01`` appends ('lr', '0.01')."""

    class Action(argparse.Action):
        def __call__(self, parser, namespace, values, option_string=None):
            if namespace.overrides is None:
                namespace.overrides = []
            namespace.overrides.append((key, values))

    return Action


def _add_common(parser: argparse.ArgumentParser, keys: list[str], out_required: bool = True) -> None:
    parser.add_argument("--config", "-c", help="flat key = value config file")
    parser.add_argument("--out", "-o", required=out_required, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="run seed")
    parser.set_defaults(overrides=None)
    for key in keys:
        if key == "seed":
            continue
        flag = "--" + key.replace("_", "-")
        parser.add_argument(flag, action=_override(key), metavar="V", help=f"override {key}")


def cmd_simulate(args) -> int:
    config = _load_config(args)
    os.makedirs(args.out, exist_ok=True)
    seed = config["seed"]
    world = generate_synthetic_world(config.world_config(), seed=seed)
    result = simulate_clicks(world, seed=seed)

    save_sessions(os.path.join(args.out, "sessions.tsv"), result.sessions)
    save_sidecar(os.path.join(args.out, "sidecar.tsv"), result.sidecar)
    if world.val:
        save_annotations(os.path.join(args.out, "val.tsv"), world.val)
    if world.test:
        save_annotations(os.path.join(args.out, "test.tsv"), world.test)
    stats = result.stats
    mix = stats.click_mix()
    with open(os.path.join(args.out, "stats.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"queries\t{stats.n_queries}\n")
        fh.write(f"kept\t{stats.n_kept}\n")
        fh.write(f"dropped\t{stats.n_dropped}\n")
        for name, value in mix.items():
            fh.write(f"mix_{name}\t{'%.6f' % value}\n")
        fh.write("clicks_per_position\t" + " ".join("%d" % c for c in stats.clicks_per_position) + "\n")
    write_snapshot(os.path.join(args.out, "resolved.cfg"), config)
    print(
        f"simulated {stats.n_queries} queries -> {stats.n_kept} sessions "
        f"(single/double/more = {mix['single']:.3f}/{mix['double']:.3f}/{mix['more']:.3f})"
    )
    return 0


def _train_single(config: RunConfig, args, seed: int, out_dir: str) -> float:
    sessions = load_sessions(_require_file(args.sessions))
    validation = load_annotations(_require_file(args.validation))
    sidecar = load_sidecar(_require_file(args.sidecar)) if args.sidecar else None
    dmp = load_dmp(_require_file(args.dmp_file)) if args.dmp_file else None

    train_config = config.train_config(seed=seed)
    checkpoints = train(train_config, sessions, validation, sidecar=sidecar, dmp=dmp)

    os.makedirs(out_dir, exist_ok=True)
    checkpoints.save(out_dir)
    if checkpoints.dmp is not None:
        export_dmp_distributions(checkpoints.dmp, os.path.join(out_dir, "dmp.csv"))
    write_snapshot(os.path.join(out_dir, "resolved.cfg"), config)
    print(
        f"[seed {seed}] best validation ndcg@10 = {checkpoints.best_val_ndcg10:.6f} "
        f"at step {checkpoints.best_step}"
    )
    return checkpoints.best_val_ndcg10


def _train_worker(payload) -> tuple[int, float]:
    config_values, args_dict, seed, out_dir = payload
    config = RunConfig(values=config_values)
    args = argparse.Namespace(**args_dict)
    return seed, _train_single(config, args, seed, out_dir)


def cmd_train(args) -> int:
    config = _load_config(args)
    os.makedirs(args.out, exist_ok=True)
    if args.seeds:
        seeds = [int(s) for s in args.seeds.split(",")]
        payloads = [
            (
                dict(config.values),
                {
                    "sessions": args.sessions,
                    "validation": args.validation,
                    "sidecar": args.sidecar,
                    "dmp_file": args.dmp_file,
                },
                seed,
                os.path.join(args.out, f"seed-{seed}"),
            )
            for seed in seeds
        ]
        max_workers = int(os.environ.get("DUALIPW_THREADS", str(min(len(seeds), os.cpu_count() or 1))))
        results: dict[int, float] = {}
        if max_workers <= 1:
            for payload in payloads:
                seed, val = _train_worker(payload)
                results[seed] = val
        else:
            with ProcessPoolExecutor(max_workers=max_workers) as pool:
                for seed, val in pool.map(_train_worker, payloads):
                    results[seed] = val
        if args.aggregate:
            values = np.array([results[s] for s in seeds])
            with open(os.path.join(args.out, "aggregate.csv"), "w", encoding="utf-8") as fh:
                fh.write("seed,best_val_ndcg10\n")
                for s in seeds:
                    fh.write(f"{s},{'%.17g' % results[s]}\n")
                fh.write(f"mean,{'%.17g' % values.mean()}\n")
                fh.write(f"stderr,{'%.17g' % (values.std(ddof=1) / np.sqrt(len(values)) if len(values) > 1 else 0.0)}\n")
        return 0
    _train_single(config, args, config["seed"], args.out)
    return 0


def cmd_evaluate(args) -> int:
    config = _load_config(args)
    bundle = ModelBundle.load(_require_file(args.checkpoint), tau=config["tau"])
    queries = load_annotations(_require_file(args.annotations))
    report = evaluate(bundle.f, queries, ks=config["ks"], metadata={"checkpoint": args.checkpoint})
    os.makedirs(args.out, exist_ok=True)
    save_metric_report(os.path.join(args.out, "report.csv"), report)
    save_per_query_metrics(os.path.join(args.out, "per_query.csv"), report)
    write_snapshot(os.path.join(args.out, "resolved.cfg"), config)
    for k in report.ks:
        print(f"ndcg@{k} = {report.ndcg[k]:.6f}   err@{k} = {report.err[k]:.6f}")
    print(f"({report.n_queries} queries, {report.n_zero_label} without positive grades)")
    return 0


def cmd_analyze(args) -> int:
    config = _load_config(args)
    os.makedirs(args.out, exist_ok=True)
    sessions = load_sessions(_require_file(args.sessions))
    filtered, _ = filter_sessions(sessions)

    partition = pilot_partition(filtered)
    with open(os.path.join(args.out, "single_click_groups.csv"), "w", encoding="utf-8") as fh:
        fh.write("position,count,proportion\n")
        proportions = partition.proportions()
        for rank in sorted(partition.groups):
            fh.write(f"{rank},{len(partition.groups[rank])},{'%.17g' % proportions[rank]}\n")
    partition.export(os.path.join(args.out, "groups"))

    bundle = None
    if args.checkpoint:
        bundle = ModelBundle.load(_require_file(args.checkpoint), tau=config["tau"])
    if args.dmp_file:
        dmp = load_dmp(_require_file(args.dmp_file))
    elif bundle is not None:
        scores = np.stack([bundle.f.score(s.features) for s in filtered])
        dmp = compute_dmp(filtered, scores)
    else:
        raise ConfigError("analyze needs --checkpoint or --dmp-file for the divergence table")
    export_dmp_distributions(dmp, os.path.join(args.out, "dmp.csv"))

    if bundle is not None:
        export_click_weights(
            bundle.g, bundle.h, dmp, os.path.join(args.out, "click_weights.csv"), w_max=config["wmax"]
        )
        save_propensities(os.path.join(args.out, "query_propensities.csv"), qcp_forward(bundle.h, dmp))
    write_snapshot(os.path.join(args.out, "resolved.cfg"), config)
    print(f"analysis written to {args.out} ({partition.n_single_click} single-click sessions)")
    return 0


def cmd_check(args) -> int:
    config = _load_config(args)
    failed = False
    if args.grad or args.all:
        results = gradient_suite(num_fixtures=args.fixtures, seed=config["seed"])
        worst = max(r.max_error for r in results)
        ok = all(r.passed for r in results)
        print(f"gradient suite: {len(results)} fixtures, max rel error {worst:.3e} "
              f"(tolerance {GRAD_TOLERANCE:g}) -> {'PASS' if ok else 'FAIL'}")
        failed |= not ok
    if args.unbiasedness or args.all:
        oracle, naive = unbiasedness_suite(
            num_queries=args.queries,
            num_draws=args.draws,
            saturation_rate=config["lambda_sat"],
            seed=config["seed"],
        )
        ok = oracle.relative_error < 0.02 and naive.relative_error >= 5 * oracle.relative_error
        print(
            f"unbiasedness: oracle rel err {oracle.relative_error:.4f} (< 0.02), "
            f"unweighted rel err {naive.relative_error:.4f} -> {'PASS' if ok else 'FAIL'}"
        )
        failed |= not ok
    if not (args.grad or args.unbiasedness or args.all):
        raise ConfigError("check needs at least one of --grad, --unbiasedness, --all")
    if failed:
        raise CheckFailed("one or more checks failed")
    return 0


def cmd_export(args) -> int:
    params = ModelBundle.load(_require_file(args.checkpoint)).all_params()
    lines = [f"checkpoint: {args.checkpoint}", f"parameters: {len(params)}"]
    for name in sorted(params):
        arr = params[name]
        lines.append(
            f"{name}  shape={'x'.join(map(str, arr.shape))}  "
            f"min={arr.min():.6g}  max={arr.max():.6g}  l2={np.linalg.norm(arr):.6g}"
        )
        if args.values:
            lines.append("  " + " ".join("%.6g" % v for v in arr.reshape(-1)))
    text = "\n".join(lines) + "\n"
    if args.out:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualipw",
        description="Dual inverse propensity weighting for unbiased learning to rank.",
    )
    parser.add_argument("--version", action="version", version=f"dualipw {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="info-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    sim_keys = [k for k in KEYS if k not in ("method", "ks")]
    p = sub.add_parser("simulate", help="generate a synthetic world and click log")
    _add_common(p, sim_keys)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a ranking model from a click log")
    _add_common(p, [k for k in KEYS if k != "ks"])
    p.add_argument("--sessions", required=True, help="session TSV")
    p.add_argument("--validation", required=True, help="annotation TSV for model selection")
    p.add_argument("--sidecar", help="oracle sidecar TSV (oracle mode / fixed IPW)")
    p.add_argument("--dmp-file", help="precomputed divergence table CSV")
    p.add_argument("--seeds", help="comma-separated seeds; runs in parallel processes")
    p.add_argument("--aggregate", action="store_true", help="write per-seed summary CSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on annotated queries")
    _add_common(p, ["ks", "tau"])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--annotations", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="click-pattern and propensity analyses")
    _add_common(p, ["tau", "wmax"])
    p.add_argument("--sessions", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--dmp-file")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("check", help="gradient and unbiasedness self-checks")
    _add_common(p, ["lambda_sat", "eta"], out_required=False)
    p.add_argument("--grad", action="store_true")
    p.add_argument("--unbiasedness", action="store_true")
    p.add_argument("--all", action="store_true")
    p.add_argument("--fixtures", type=int, default=20)
    p.add_argument("--queries", type=int, default=200)
    p.add_argument("--draws", type=int, default=10_000)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("export", help="human-readable parameter dump")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="write to file instead of stdout")
    p.add_argument("--values", action="store_true", help="include raw values")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except FileNotFoundError as err:
        print(f"error code={EXIT_INPUT} kind=input msg={str(err)!r}", file=sys.stderr)
        return EXIT_INPUT
    except ConfigError as err:
        print(f"error code={EXIT_CONFIG} kind=config msg={str(err)!r}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, CheckpointError) as err:
        print(f"error code={EXIT_DATA} kind=data msg={str(err)!r}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergedError, OptimizerError, NonFiniteError) as err:
        print(f"error code={EXIT_NUMERIC} kind=numeric msg={str(err)!r}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckFailed as err:
        print(f"error code={EXIT_CHECK} kind=check msg={str(err)!r}", file=sys.stderr)
        return EXIT_CHECK
    except ValueError as err:
        print(f"error code={EXIT_CONFIG} kind=config msg={str(err)!r}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
