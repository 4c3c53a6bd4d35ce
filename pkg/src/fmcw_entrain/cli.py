"""Command-line entry point: ``fmcw-entrain {identify,track,run,report}``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .identify import IdentificationError
from .scenario import (
    Scenario,
    ScenarioError,
    Simulation,
    bundled_scenario_path,
    estimate_from_toml,
    load_scenario,
    read_metrics_csv,
    run_all,
    run_identification,
    run_tracking,
    tracking_start,
    write_artifacts,
)


def _scenario(arg: str, seed: int | None) -> Scenario:
    path = Path(arg)
    if not path.exists() and not arg.endswith(".toml"):
        path = bundled_scenario_path(arg)
    sc = load_scenario(path)
    return sc if seed is None else sc.with_seed(seed)


def _capture_writer(out: Path, enabled: bool):
    if not enabled:
        return None
    out.mkdir(parents=True, exist_ok=True)

    def sink(label, capture):
        (out / f"{label}.bin").write_bytes(capture.to_bytes())

    return sink


def _progress(quiet: bool):
    if quiet:
        return None

    def show(n, m):
        print(
            f"frame {n:3d}  range {m.range_width_m:.3f} m  doppler {m.doppler_width_hz:.1f} Hz  "
            f"slope rmse {m.slope_rmse_hz_per_s:.3e} Hz/s",
            file=sys.stderr,
        )

    return show


def cmd_identify(args) -> int:
    sc = _scenario(args.scenario, args.seed)
    out = Path(args.out)
    sim = Simulation.create(sc)
    ident = run_identification(sim, _capture_writer(out, args.dump_captures))
    written = write_artifacts(out, ident=ident)
    est = ident.estimate
    print(f"frame interval {est.frame_interval * 1e3:.6f} ms, offset {est.frame_offset * 1e3:.6f} ms, "
          f"{len(est.chirps)} chirps")
    for p in written.values():
        print(f"wrote {p}")
    return 0


def cmd_track(args) -> int:
    sc = _scenario(args.scenario, args.seed)
    est = estimate_from_toml(Path(args.estimate).read_text(encoding="utf-8"))
    sim = Simulation.create(sc)
    track = run_tracking(sim, est, tracking_start(sc, est), args.frames, _progress(args.quiet))
    written = write_artifacts(args.out, track=track, metrics_path=args.metrics, dump_cubes=args.dump_captures)
    for p in written.values():
        print(f"wrote {p}")
    return 0


def cmd_run(args) -> int:
    sc = _scenario(args.scenario, args.seed)
    out = Path(args.out)
    _, report = run_all(sc, args.frames, _progress(args.quiet), _capture_writer(out, args.dump_captures))
    written = write_artifacts(out, report, metrics_path=args.metrics, dump_cubes=args.dump_captures)
    for line in report.summary_lines():
        print(line)
    for p in written.values():
        print(f"wrote {p}")
    if args.check and not all(report.verdicts.values()):
        return 1
    return 0


def cmd_report(args) -> int:
    out = Path(args.out)
    metrics_path = Path(args.metrics) if args.metrics else out / "metrics.csv"
    rows = read_metrics_csv(metrics_path.read_text(encoding="utf-8"))
    print(f"{'frame':>5}  {'range_m':>9}  {'doppler_hz':>11}  {'slope_rmse':>11}")
    for m in rows:
        print(f"{m.frame_index:5d}  {m.range_width_m:9.3f}  {m.doppler_width_hz:11.1f}  {m.slope_rmse_hz_per_s:11.3e}")
    report_path = out / "report.json"
    ok = True
    if report_path.exists():
        data = json.loads(report_path.read_text(encoding="utf-8"))
        for name, verdict in data["verdicts"].items():
            print(f"{'PASS' if verdict else 'FAIL'} {name}")
        ok = all(data["verdicts"].values())
    elif args.check:
        print(f"no report.json in {out}", file=sys.stderr)
        return 2
    return 1 if args.check and not ok else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fmcw-entrain", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_scenario=True):
        if needs_scenario:
            p.add_argument("scenario", nargs="?", default="reference",
                           help="scenario TOML path or bundled name (default: reference)")
            p.add_argument("--seed", type=int, default=None, help="override the scenario rng_seed")
        p.add_argument("--out", default="out", help="output directory (default: out)")
        p.add_argument("--metrics", default=None, help="metrics CSV path (default: OUT/metrics.csv)")

    p = sub.add_parser("identify", help="run the identification stage")
    common(p)
    p.add_argument("--dump-captures", action="store_true", help="write the raw tone captures")
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("track", help="track using a stored estimate.cfg")
    common(p)
    p.add_argument("--estimate", required=True, help="estimate.cfg written by 'identify'")
    p.add_argument("--frames", type=int, default=None, help="number of tracking frames")
    p.add_argument("--dump-captures", action="store_true", help="write first/last range-Doppler magnitudes")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("run", help="identification followed by tracking")
    common(p)
    p.add_argument("--frames", type=int, default=None, help="number of tracking frames")
    p.add_argument("--dump-captures", action="store_true", help="write tone captures and cube magnitudes")
    p.add_argument("--check", action="store_true", help="exit 1 if any acceptance verdict fails")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="summarize metrics.csv and report.json")
    common(p, needs_scenario=False)
    p.add_argument("--check", action="store_true", help="exit 1 if any acceptance verdict fails")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ScenarioError, IdentificationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
