"""Command-line front end: ``sbmrecon <subcommand> [options]``.

Invalid arguments or configuration exit with status 1, failed runs with
status 2. CSV outputs start with one ``# {json}`` line holding
the resolved configuration, seed, RNG name, package version and timestamp;
the rows below it depend only on the configuration and seed.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from sbmrecon import RNG_NAME, __version__
from sbmrecon.model import ModelParams, NoiseMatrixError, ParamError, derive_params, noise_family

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --- output helpers ---------------------------------------------------------


def atomic_write(path: str | os.PathLike, text: str) -> None:
    """Write ``text`` to a temporary file next to ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit(text: str, path: str | None) -> None:
    if path:
        atomic_write(path, text)
    else:
        sys.stdout.write(text)


def header(config: dict) -> dict:
    return {
        "config": config,
        "seed": config.get("seed"),
        "rng_name": RNG_NAME,
        "artifact_version": __version__,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }


def render_csv(config: dict, columns, rows) -> str:
    buf = io.StringIO()
    buf.write("# " + json.dumps(header(config), sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows(rows)
    return buf.getvalue()


def csv_body(text: str) -> str:
    """Everything after the header line, for reproducibility comparisons."""
    return "".join(ln for ln in text.splitlines(keepends=True) if not ln.startswith("#"))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def render_json(config: dict, result: dict) -> str:
    return json.dumps({"meta": header(config), "result": _jsonable(result)}, indent=2, sort_keys=True) + "\n"


# --- configuration ----------------------------------------------------------


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise UsageError(f"config line {n}: empty key")
        out[key.replace("_", "-")] = value
    return out


def dump_config_text(config: dict) -> str:
    lines = []
    for key in sorted(config):
        value = config[key]
        if value is None:
            continue
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key.replace('_', '-')} = {value}")
    return "\n".join(lines) + "\n"


def _config_tokens(parser: argparse.ArgumentParser, config: dict) -> list[str]:
    actions = {a.dest.replace("_", "-"): a for a in parser._actions if a.option_strings}
    tokens = []
    for key, value in config.items():
        if key == "command":
            continue
        if key not in actions:
            raise UsageError(f"unknown config key {key!r}")
        act = actions[key]
        flag = max(act.option_strings, key=len)
        if isinstance(act, argparse._StoreTrueAction):
            if value.lower() in ("1", "true", "yes", "on"):
                tokens.append(flag)
            elif value.lower() not in ("0", "false", "no", "off"):
                raise UsageError(f"config key {key!r} expects true/false")
        else:
            tokens.extend([flag, value])
    return tokens


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


# --- parser -----------------------------------------------------------------


def _model_args(p: argparse.ArgumentParser, need_n: bool = False) -> None:
    p.add_argument("--q", type=int, default=3, help="number of communities")
    p.add_argument("--a", type=float, help="within-community edge rate (times n)")
    p.add_argument("--b", type=float, help="across-community edge rate (times n)")
    p.add_argument("--lam", type=float, help="second eigenvalue; use with --d instead of --a/--b")
    p.add_argument("--d", type=float, help="mean degree; use with --lam")
    if need_n:
        p.add_argument("--n", type=int, required=True, help="number of vertices")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output file (stdout when omitted)")
    p.add_argument("--threads", type=int, default=None, help="worker cap (runs are single-threaded)")
    p.add_argument("--save-config", help="write the resolved configuration to this file")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sbmrecon", description="Block-model reconstruction experiments.")
    parser.add_argument("--version", action="version", version=f"sbmrecon {__version__}")
    parser.add_argument("--config", help="file of 'key = value' lines supplying option defaults")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("params", help="derived model quantities as JSON")
    _model_args(p)
    _common(p)

    p = sub.add_parser("tree-sim", help="sample one broadcast tree and dump it")
    _model_args(p)
    _common(p)
    p.add_argument("--depth", type=int, required=True)
    p.add_argument("--regime", choices=["regular", "galton-watson"], default="galton-watson")
    p.add_argument("--delta", default=None, help="noise family for the deepest level")

    p = sub.add_parser("majority-sim", help="majority and iterated-majority Monte Carlo")
    _model_args(p)
    _common(p)
    p.add_argument("--ks", type=_ints, default=[1, 2, 3, 4])
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--regime", choices=["regular", "galton-watson"], default="regular")
    p.add_argument("--delta", default=None)
    p.add_argument("--no-iterated", action="store_true")
    p.add_argument("--collapse-last-level", action="store_true")
    p.add_argument("--summary", help="JSON summary path")

    p = sub.add_parser("contraction", help="E||X - W||_1 with exact and noisy E_m per depth")
    _model_args(p)
    _common(p)
    p.add_argument("--delta", default="uniform-diag:0.8")
    p.add_argument("--depth", type=int, default=6)
    p.add_argument("--trials", type=int, default=2000)
    p.add_argument("--regime", choices=["regular", "galton-watson"], default="galton-watson")
    p.add_argument("--method", choices=["auto", "exact", "population"], default="auto")
    p.add_argument("--pool-size", type=int, default=20000)

    p = sub.add_parser("sbm-gen", help="sample a block-model graph")
    _model_args(p, need_n=True)
    _common(p)
    p.add_argument("--balanced", action="store_true")
    p.add_argument("--labels", help="labels sidecar path (default: <out>.labels)")

    p = sub.add_parser("coupling-check", help="ball/tree coupling diagnostic as JSON")
    _model_args(p, need_n=True)
    _common(p)
    p.add_argument("--R", type=int, default=None)
    p.add_argument("--centers", type=int, default=200)
    p.add_argument("--balanced", action="store_true")

    p = sub.add_parser("reconstruct", help="BP amplification of the spectral partition")
    _model_args(p, need_n=True)
    _common(p)
    p.add_argument("--R", type=int, default=None)
    p.add_argument("--subsample", type=int, default=None)
    p.add_argument("--amortize", action="store_true")
    p.add_argument("--debug-exact", action="store_true")
    p.add_argument("--u-from-align", action="store_true")
    p.add_argument("--balanced", action="store_true")
    p.add_argument("--summary", help="JSON summary path (stdout when omitted)")
    return parser


def _resolve_params(args) -> ModelParams:
    if args.lam is not None or args.d is not None:
        if args.lam is None or args.d is None or args.a is not None or args.b is not None:
            raise UsageError("give either --a and --b, or --lam and --d")
        return ModelParams.from_lambda_degree(args.q, args.lam, args.d)
    if args.a is None or args.b is None:
        raise UsageError("--a and --b are required (or --lam and --d)")
    return derive_params(args.q, args.a, args.b)


def _config_of(args) -> dict:
    skip = {"out", "save_config", "summary", "labels", "config"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip and v is not None}


# --- subcommands -------------------------------------------------------------


def cmd_params(args, params, cfg):
    _emit(json.dumps(params.to_dict(), indent=2, sort_keys=True) + "\n", args.out)


def cmd_tree_sim(args, params, cfg):
    from sbmrecon.tree import apply_noise, broadcast_labels, dump_tree, sample_gw_tree, sample_regular_tree

    rng = np.random.Generator(np.random.PCG64(args.seed))
    if args.regime == "regular":
        skel = sample_regular_tree(int(round(params.d)), args.depth)
    else:
        skel = sample_gw_tree(params.d, args.depth, rng)
    tree = broadcast_labels(skel, params, 0, rng)
    noisy = apply_noise(tree, args.depth, noise_family(args.delta, params.q), rng) if args.delta else None
    text = "# " + json.dumps(header(cfg), sort_keys=True) + "\n" + dump_tree(tree, noisy)
    _emit(text, args.out)


def cmd_majority_sim(args, params, cfg):
    from sbmrecon.majority import majority_success_bound, run_majority_experiment, summarize_counts

    delta = noise_family(args.delta, params.q) if args.delta else None
    run = run_majority_experiment(
        params,
        args.ks,
        args.trials,
        args.regime,
        delta,
        args.seed,
        iterated=not args.no_iterated,
        collapse_last_level=args.collapse_last_level,
    )
    summ = summarize_counts(run, params, delta)
    try:
        bound = majority_success_bound(params, args.regime)
    except ValueError:
        bound = None
    cols = ["trial_seed", "k", "regime", "z", *[f"y{i}" for i in range(1, params.q)],
            "majority_correct", "iterated_correct"]
    rows = [[f"{args.seed}:{r[0]}", *r[1:]] for r in run.csv_rows()]
    _emit(render_csv(cfg, cols, rows), args.out)
    if args.summary:
        atomic_write(args.summary, render_json(cfg, {"levels": summ, "majority_bound": bound}))


def cmd_contraction(args, params, cfg):
    from sbmrecon.bp import ContractionTrace, estimate_limits

    delta = noise_family(args.delta, params.q)
    trace = estimate_limits(
        params, delta, args.depth, args.trials, args.regime, args.seed,
        method=args.method, pool_size=args.pool_size,
    )
    cfg = dict(cfg, method_used=trace.method)
    _emit(render_csv(cfg, ContractionTrace.CSV_HEADER, trace.csv_rows()), args.out)


def cmd_sbm_gen(args, params, cfg):
    from sbmrecon.sbm import dump_edge_list, dump_labels, sample_sbm

    g = sample_sbm(args.n, params, args.balanced, args.seed)
    text = "# " + json.dumps(header(cfg), sort_keys=True) + "\n" + dump_edge_list(g, args.seed)
    _emit(text, args.out)
    labels_path = args.labels or (args.out + ".labels" if args.out else None)
    if labels_path:
        atomic_write(labels_path, dump_labels(g.sigma))


def cmd_coupling_check(args, params, cfg):
    from sbmrecon.sbm import coupling_diagnostic, coupling_radius, sample_sbm

    g = sample_sbm(args.n, params, args.balanced, args.seed)
    R = coupling_radius(args.n, params.a, params.b) if args.R is None else args.R
    rng = np.random.Generator(np.random.PCG64([args.seed, 1]))
    centers = rng.choice(args.n, size=min(args.centers, args.n), replace=False)
    report = coupling_diagnostic(g, centers, R)
    _emit(render_json(cfg, report.to_dict()), args.out)


def cmd_reconstruct(args, params, cfg):
    from sbmrecon.reconstruct import reconstruct
    from sbmrecon.sbm import dump_labels, sample_sbm

    g = sample_sbm(args.n, params, args.balanced, args.seed)
    res = reconstruct(
        g, params, R=args.R, subsample=args.subsample, amortize=args.amortize,
        debug_exact=args.debug_exact, u_from_align=args.u_from_align, seed=args.seed,
    )
    m = res.meta
    summary = {
        "accuracy": m.get("accuracy"),
        "blackbox_accuracy": m.get("blackbox_accuracy"),
        "gamma_observed": m.get("gamma_observed"),
        "R": m["R"],
        "R_formula": m["R_formula"],
        "seeds": {"graph": args.seed, "algorithm": args.seed},
        "fallback_count": m["fallback_count"],
        "delta_hat": m["delta_hat"],
        "scored": int(res.scored.size),
        "mode": m["mode"],
        "notes": m["notes"],
    }
    if args.out:
        atomic_write(args.out, dump_labels(res.assign))
    _emit(render_json(cfg, summary), args.summary)


COMMANDS = {
    "params": cmd_params,
    "tree-sim": cmd_tree_sim,
    "majority-sim": cmd_majority_sim,
    "contraction": cmd_contraction,
    "sbm-gen": cmd_sbm_gen,
    "coupling-check": cmd_coupling_check,
    "reconstruct": cmd_reconstruct,
}


def _parse(argv: list[str]):
    parser = build_parser()
    pre = _Parser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    if known.config:
        try:
            config = parse_config_text(Path(known.config).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from exc
        command = config.pop("command", None)
        if command is None:
            cmd_pos = [t for t in rest if t in COMMANDS]
            if not cmd_pos:
                raise UsageError("no subcommand given")
            command = cmd_pos[0]
        if command not in COMMANDS:
            raise UsageError(f"unknown subcommand {command!r} in config")
        sub = parser._subparsers._group_actions[0].choices[command]
        tokens = _config_tokens(sub, config)
        rest = [t for t in rest if t != command]
        argv = [command, *tokens, *rest]
    else:
        argv = rest
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("a subcommand is required; see --help")
    return args


def run(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = _parse(argv)
        params = _resolve_params(args)
        if getattr(args, "delta", None):
            noise_family(args.delta, params.q)
        cfg = _config_of(args)
        cfg["command"] = args.command
        if args.save_config:
            atomic_write(args.save_config, dump_config_text(cfg))
    except SystemExit as exc:  # --help and --version
        return int(exc.code or 0)
    except (UsageError, ParamError, NoiseMatrixError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ValueError, OSError) as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        COMMANDS[args.command](args, params, cfg)
    except MemoryError as exc:
        print(f"error: node budget exceeded: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        print(f"error: run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
