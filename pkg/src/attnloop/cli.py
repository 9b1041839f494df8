"""``attnloop`` command line: simulate, analyze, fit.

Exit codes: 0 success, 2 configuration error, 3 I/O or parse error,
4 insufficient data.
"""

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .eventlog import CohortWindow, write_event_log, write_fan_snapshot
from .estimators import (
    InsufficientDataError,
    Pow2,
    binned_mean_arrays,
    compare_geometric_vs_powerlaw,
    contribution_histogram,
    fit_geometric,
    fit_powerlaw,
    hazard,
    linear_fit,
    paired_t_test_less,
    popularity_threshold,
    reverse_index_ratio,
    weekly_final_ratio,
)
from .ingest import MONTH_SECONDS, ParseError, fan_attention_join, read_event_log, read_fan_snapshot
from .model import ConfigError, load_params
from .sim import fan_snapshot, simulate_population

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DATA = 4

DEFAULT_START = 1167609600  # 2007-01-01T00:00:00Z
DEFAULT_CAPTURE = 1209600000  # 2008-05-01T00:00:00Z

ANALYSES = ("dist", "hazard", "reverse_index", "weekly_final", "fan_bins")

logger = logging.getLogger("attnloop")


def num(v):
    """17 significant digits for floats, plain text otherwise."""
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([num(v) for v in row])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    return obj


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_manifest(out_dir, subcommand, consumed, seed, n_cap, outputs):
    manifest = {
        "subcommand": subcommand,
        "config_path": str(consumed),
        "config_digest": sha256_file(consumed),
        "digest_algorithm": "sha256",
        "master_seed": seed,
        "timestamp": int(time.time()),
        "tool_version": __version__,
        "n_cap_used": n_cap,
        "outputs": {Path(p).name: sha256_file(p) for p in outputs},
    }
    write_json(Path(out_dir) / "manifest.json", manifest)
    return manifest


# -- subcommands ---------------------------------------------------------------


def cmd_simulate(args):
    params = load_params(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log = simulate_population(
        params,
        args.users,
        args.seed,
        args.start,
        args.capture,
        arrival_window=args.arrival_window,
        threads=args.threads,
    )
    events = out / f"events.{args.format}"
    with open(events, "w", encoding="utf-8") as fh:
        write_event_log(log, fh, args.format)
    outputs = [events]
    if args.snapshot_time is not None:
        snap_path = out / "fans.csv"
        with open(snap_path, "w", encoding="utf-8") as fh:
            write_fan_snapshot(fan_snapshot(log, args.snapshot_time), fh)
        outputs.append(snap_path)
    write_manifest(out, "simulate", args.config, args.seed, params.n_cap, outputs)
    print(
        f"simulated {args.users} users, {len(log)} records "
        f"({log.meta.get('capped_users', 0)} reached n_cap={params.n_cap}) -> {events}"
    )
    return EXIT_OK


def _load_log(args):
    log, report = read_event_log(args.log, capture_time=args.capture_time)
    if report:
        print(f"warning: skipped {len(report)} malformed line(s)", file=sys.stderr)
    return log


def _threshold(log, q):
    if not len(log):
        raise InsufficientDataError("event log has no records")
    return popularity_threshold(log.x, q)


def _analyze_dist(log, args, out):
    hist = contribution_histogram(log, args.T_months * MONTH_SECONDS)
    if hist.empty:
        raise InsufficientDataError(f"no stopped users (all {hist.excluded} still active)")
    ns, cs = hist.arrays()
    write_csv(out / "dist.csv", ("n", "users"), zip(ns, cs))
    report = {"counts": dict(zip(ns.tolist(), cs.tolist())), "total_users": hist.total_users, "excluded": hist.excluded}
    return ["dist.csv"], report, f"{hist.total_users} stopped users, {hist.excluded} still active, max n = {ns.max()}"


def _analyze_hazard(log, args, out):
    hist = contribution_histogram(log, args.T_months * MONTH_SECONDS)
    if hist.empty:
        raise InsufficientDataError(f"no stopped users (all {hist.excluded} still active)")
    hz = hazard(hist)
    rows = [(n, hist.counts[n], hz.at_risk[n], h) for n, h in hz.values.items()]
    write_csv(out / "hazard.csv", ("n", "users", "at_risk", "hazard"), rows)
    report = {"hazard": hz.values, "at_risk": hz.at_risk, "total_users": hist.total_users}
    return ["hazard.csv"], report, f"hazard at n=1: {hz.values[min(hz.values)]:.4g} ({len(rows)} points)"


def _analyze_reverse(log, args, out):
    thr = _threshold(log, args.q)
    series = reverse_index_ratio(log, args.K, thr, args.T_months * MONTH_SECONDS)
    if not len(series):
        raise InsufficientDataError(f"no stopped users with at least {args.K} submissions")
    se = series.stderr()
    rows = list(zip(series.labels, series.values, series.counts, se))
    write_csv(out / "reverse_index.csv", ("index", "ratio", "count", "stderr"), rows)
    report = {"threshold": thr, "q": args.q, "labels": series.labels, "values": series.values, "counts": series.counts}
    return ["reverse_index.csv"], report, (
        f"{series.counts[0]} users; ratio at {series.labels[0]}: {series.values[0]:.4g}, at -1: {series.values[-1]:.4g}"
    )


def _analyze_weekly(log, args, out):
    thr = _threshold(log, args.q)
    r, r_f = weekly_final_ratio(log, thr, args.T_months * MONTH_SECONDS)
    test = paired_t_test_less(r_f.values, r.values)
    rows = zip(r.labels, r.values, r_f.values, r.counts, r_f.counts)
    write_csv(out / "weekly_final.csv", ("week", "r", "r_final", "n_all", "n_final"), rows)
    report = {
        "threshold": thr,
        "q": args.q,
        "weeks": r.labels,
        "r": r.values,
        "r_final": r_f.values,
        "t_stat": test.t_stat,
        "p_value": test.p_value,
        "df": test.df,
    }
    return ["weekly_final.csv"], report, (
        f"{len(r)} weeks; paired t-test r_f < r: t = {test.t_stat:.4f}, one-sided p = {test.p_value:.3g}"
    )


def _read_user_list(path):
    users = set()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                users.add(int(line) if line.lstrip("-").isdigit() else line)
    return users


def _analyze_fans(log, args, out):
    if args.snapshot is None or args.window_start is None or args.window_end is None:
        raise ConfigError("fan_bins", "needs --snapshot, --window-start and --window-end")
    snap = read_fan_snapshot(args.snapshot)
    exclude = _read_user_list(args.exclude_users) if args.exclude_users else None
    try:
        rows = fan_attention_join(log, snap, CohortWindow(args.window_start, args.window_end), exclude)
    except ValueError as exc:
        raise ConfigError("window", str(exc)) from None
    if not rows:
        raise InsufficientDataError("no submissions inside the cohort window")
    prod = np.array([r.past_productivity for r in rows], dtype=float)
    fans = np.array([r.fans for r in rows], dtype=float)
    att_keys = np.concatenate([np.full(len(r.attentions), r.fans, dtype=float) for r in rows])
    att_vals = np.concatenate([np.asarray(r.attentions, dtype=float) for r in rows])
    report = {"users": len(rows), "records": int(att_vals.size)}
    files = []
    for name, keys, vals, cols in (
        ("fans_vs_productivity.csv", prod, fans, ("productivity", "fans")),
        ("attention_vs_fans.csv", att_keys, att_vals, ("fans", "attention")),
    ):
        binned = binned_mean_arrays(keys, vals, Pow2())
        write_csv(
            out / name,
            ("bin", "lo", "hi", f"mean_{cols[0]}", f"mean_{cols[1]}", "count"),
            [(r.label, *Pow2().edges(r.label), r.key_mean, r.mean, r.count) for r in binned],
        )
        files.append(name)
        entry = {"rejected_nonpositive": binned.rejected, "bins": len(binned)}
        if len(binned) >= 2:
            _, k, m, c = binned.columns()
            entry["slope"], entry["intercept"], entry["r_squared"] = linear_fit(k, m, c)
        report[name[:-4]] = entry
    slope = report["fans_vs_productivity"].get("slope", float("nan"))
    return files, report, f"{len(rows)} users, {att_vals.size} in-window records; fans per past submission {slope:.4g}"


_ANALYZERS = {
    "dist": _analyze_dist,
    "hazard": _analyze_hazard,
    "reverse_index": _analyze_reverse,
    "weekly_final": _analyze_weekly,
    "fan_bins": _analyze_fans,
}


def cmd_analyze(args):
    log = _load_log(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files, report, summary = _ANALYZERS[args.analysis](log, args, out)
    report["analysis"] = args.analysis
    write_json(out / f"{args.analysis}.json", report)
    paths = [out / f for f in files] + [out / f"{args.analysis}.json"]
    write_manifest(out, "analyze", args.log, log.meta.get("master_seed"), log.meta.get("n_cap"), paths)
    print(summary)
    return EXIT_OK


def cmd_fit(args):
    log = _load_log(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hist = contribution_histogram(log, args.T_months * MONTH_SECONDS)
    if hist.empty:
        raise InsufficientDataError("no stopped users to fit")
    report = {"model": args.model, "x_min": args.x_min, "total_users": hist.total_users}
    rows = []
    lines = []
    if args.model in ("geometric", "both"):
        p = fit_geometric(hist)
        report["geometric_p_hat"] = p
        rows.append(("geometric_p_hat", p))
        lines.append(f"geometric stop probability p_hat = {p:.6g}")
    if args.model in ("powerlaw", "both"):
        fit = fit_powerlaw(hist, args.x_min)
        report.update(
            powerlaw_alpha_hat=fit.alpha_hat,
            powerlaw_stderr=fit.stderr,
            powerlaw_n_tail=fit.n_tail,
            powerlaw_log_likelihood=fit.log_likelihood,
        )
        rows += [("powerlaw_alpha_hat", fit.alpha_hat), ("powerlaw_n_tail", fit.n_tail),
                 ("powerlaw_log_likelihood", fit.log_likelihood)]
        lines.append(f"power-law alpha_hat = {fit.alpha_hat:.6g} +/- {fit.stderr:.2g} (x_min = {args.x_min}, n_tail = {fit.n_tail})")
    if args.model == "both":
        cmp = compare_geometric_vs_powerlaw(hist, args.x_min)
        report.update(log_likelihood_ratio=cmp.ratio, vuong_z=cmp.z, vuong_p=cmp.p_value, verdict=cmp.verdict())
        rows += [("log_likelihood_ratio", cmp.ratio), ("vuong_z", cmp.z), ("vuong_p", cmp.p_value)]
        lines.append(f"log-likelihood ratio (power law - geometric, per observation) = {cmp.ratio:+.6g}")
        lines.append(f"verdict: {cmp.verdict()}")
    write_csv(out / "fit.csv", ("parameter", "value"), rows)
    write_json(out / "fit.json", report)
    write_manifest(out, "fit", args.log, log.meta.get("master_seed"), log.meta.get("n_cap"),
                   [out / "fit.csv", out / "fit.json"])
    print("\n".join(lines))
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="attnloop", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a contributor population")
    p.add_argument("--config", required=True, help="key = value model file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--users", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("jsonl", "csv"), default="jsonl")
    p.add_argument("--start", type=int, default=DEFAULT_START, help="first possible arrival (epoch s)")
    p.add_argument("--capture", type=int, default=DEFAULT_CAPTURE, help="data capture time (epoch s)")
    p.add_argument("--arrival-window", type=int, default=None,
                   help="arrivals spread over this many seconds after --start (default: up to capture)")
    p.add_argument("--snapshot-time", type=int, default=None, help="also write fans.csv at this time")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default ATTN_LOOP_THREADS or CPUs)")
    p.set_defaults(func=cmd_simulate)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--log", required=True, help="event log (.jsonl or .csv)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--T-months", dest="T_months", type=float, default=3.0,
                        help="inactivity / finality lag in 30-day months")
    common.add_argument("--capture-time", type=int, default=None, help="override the log's capture time")

    p = sub.add_parser("analyze", parents=[common], help="run one estimator over a log")
    p.add_argument("--analysis", choices=ANALYSES, required=True)
    p.add_argument("--K", type=int, default=5, help="reverse-index depth")
    p.add_argument("--q", type=float, default=0.9, help="popularity quantile")
    p.add_argument("--window-start", type=int)
    p.add_argument("--window-end", type=int)
    p.add_argument("--snapshot", help="fan snapshot CSV")
    p.add_argument("--exclude-users", help="file with one user id per line")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("fit", parents=[common], help="fit lifetime models")
    p.add_argument("--model", choices=("geometric", "powerlaw", "both"), default="both")
    p.add_argument("--x-min", type=int, default=10)
    p.set_defaults(func=cmd_fit)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InsufficientDataError as exc:
        print(f"insufficient data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, ParseError, UnicodeDecodeError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
