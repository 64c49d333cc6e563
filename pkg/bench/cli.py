"""
Command line for the desk-scale experiments.

    python -m bench.cli preset npgc-vs-pllgc --seeds 5 --output out/
    python -m bench.cli run --config profiles/engine-small.yaml --threads 4 --passes 2
    python -m bench.cli inject-aging --config profiles/engine-small.yaml --image aged.npz
    python -m bench.cli report out/npgc-vs-pllgc-pllgc-latency.csv
"""

from __future__ import annotations

import argparse
import logging
import sys

from ftl import engine
from ftl.config import GcPolicy, load_engine_config
from ftl.errors import FtlError

from bench.aging import AgingSpec, inject_aging
from bench.presets import (PRESETS, Preset, preset, run_driver_speed, run_init_scan, run_queue_sweep,
                           run_with_policy)
from bench.report import emit_report, normalize, render_summary, summarize_latency_csv
from bench.workload import AccessPattern, WorkloadSpec

LOGGER = logging.getLogger("bench.cli")

EXIT_OK = 0
EXIT_FTL_ERROR = 2
EXIT_AUDIT_FAILED = 3


class AuditFailed(Exception):
    def __init__(self, problems):
        super().__init__(f"{len(problems)} audit problems")
        self.problems = problems


def _policy(value):
    return GcPolicy.parse(value)


def build_parser():
    parser = argparse.ArgumentParser(prog="bench", description="FTL experiments on a simulated NAND card")
    parser.add_argument("--log-level", default="WARNING",
                        choices=("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"))
    commands = parser.add_subparsers(dest="command", required=True)

    run_cmd = commands.add_parser("run", help="run one workload on an engine config")
    run_cmd.add_argument("--config", required=True, help="engine config YAML")
    run_cmd.add_argument("--threads", type=int, default=1)
    run_cmd.add_argument("--bytes-per-thread", type=int, default=1024 * 1024)
    run_cmd.add_argument("--io-size", type=int, default=32 * 1024)
    run_cmd.add_argument("--pattern", default="sequential", choices=[p.value for p in AccessPattern])
    run_cmd.add_argument("--passes", type=int, default=1)
    run_cmd.add_argument("--sync-every", type=int, default=None)
    run_cmd.add_argument("--read-back", action="store_true")
    run_cmd.add_argument("--age", action="store_true", help="age the card before running")
    _common(run_cmd)

    preset_cmd = commands.add_parser("preset", help="run a named experiment")
    preset_cmd.add_argument("name", choices=sorted(PRESETS))
    preset_cmd.add_argument("--seeds", type=int, default=1, help="number of seeded repetitions")
    preset_cmd.add_argument("--think-scale", type=float, default=100.0)
    preset_cmd.add_argument("--size-scale", type=int, default=64)
    _common(preset_cmd)

    aging_cmd = commands.add_parser("inject-aging", help="age a fresh card and save its image")
    aging_cmd.add_argument("--config", required=True)
    aging_cmd.add_argument("--image", required=True, help="where to save the aged flash image")
    aging_cmd.add_argument("--free-mean", type=float, default=AgingSpec.free_mean)
    aging_cmd.add_argument("--free-spread", type=float, default=AgingSpec.free_spread)
    aging_cmd.add_argument("--valid-mean", type=float, default=AgingSpec.valid_mean)
    aging_cmd.add_argument("--valid-spread", type=float, default=AgingSpec.valid_spread)
    aging_cmd.add_argument("--seed", type=int, default=0)

    report_cmd = commands.add_parser("report", help="summarize a latency CSV written earlier")
    report_cmd.add_argument("csv")
    report_cmd.add_argument("--threshold-us", type=float, default=2000.0)
    return parser


def _common(parser):
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--output", default=None, help="directory for CSVs and summaries")
    parser.add_argument("--policy", type=_policy, default=None, choices=list(GcPolicy),
                        metavar="{" + ",".join(p.value for p in GcPolicy) + "}")
    parser.add_argument("--queues", type=int, default=None)


def _finish(report, output, out):
    out.write(render_summary(report))
    if output:
        for path in emit_report(report, output):
            out.write(f"wrote {path}\n")
    problems = report.stats.get("audit_problems") or []
    if problems:
        raise AuditFailed(problems)


def cmd_run(args, out):
    config = load_engine_config(args.config)
    workload = WorkloadSpec(
        num_client_threads=args.threads, bytes_per_thread=args.bytes_per_thread, io_size=args.io_size,
        pattern=args.pattern, passes=args.passes, sync_every=args.sync_every, read_back=args.read_back,
        seed=args.seed or 0)
    chosen = Preset("custom", f"workload on {config.profile.name}", workload, config,
                    AgingSpec(seed=args.seed or 0) if args.age else None, config.gc.policy)
    report = run_with_policy(chosen, policy=args.policy, queues=args.queues, seed=args.seed,
                             label=f"run-{(args.policy or config.gc.policy).value}")
    _finish(report, args.output, out)


def _seeds(args):
    first = args.seed or 0
    return range(first, first + max(args.seeds, 1))


def cmd_preset(args, out):
    for seed in _seeds(args):
        chosen = preset(args.name, seed=seed, think_scale=args.think_scale, size_scale=args.size_scale)
        out.write(f"# {chosen.name} seed {seed}: {chosen.description}\n")
        if chosen.name == "init-scan":
            result = run_init_scan(chosen, seed=seed)
            for key, value in result.items():
                out.write(f"{key}: {value}\n")
        elif chosen.name == "driver-speed":
            for row in run_driver_speed(chosen, seed=seed):
                out.write(f"{row['bank_set']} banks={row['banks']} write={row['write_mb_s']:.1f}MB/s "
                          f"read={row['read_mb_s']:.1f}MB/s\n")
        elif chosen.sweep:
            sweep = (args.queues,) if args.queues else None
            for report in run_queue_sweep(chosen, seed=seed, queues=sweep):
                out.write(f"{report.label}: write {report.throughput_mb_s('write'):.1f}MB/s "
                          f"read {report.throughput_mb_s('read'):.1f}MB/s\n")
                _finish_quiet(report, args.output, seed)
        else:
            policies = (args.policy,) if args.policy else chosen.compare or (chosen.policy,)
            for policy in policies:
                report = run_with_policy(chosen, policy=policy, queues=args.queues, seed=seed,
                                         label=f"{chosen.name}-{policy.value}-s{seed}")
                _finish(report, args.output, out)
                averages = normalize(report.thread_averages())
                if averages:
                    out.write(f"max normalized latency: {max(averages.values()):.4f}\n")


def _finish_quiet(report, output, seed):
    if output:
        emit_report(report, output, prefix=f"{report.label}-s{seed}")
    problems = report.stats.get("audit_problems") or []
    if problems:
        raise AuditFailed(problems)


def cmd_inject_aging(args, out):
    config = load_engine_config(args.config)
    spec = AgingSpec(free_mean=args.free_mean, free_spread=args.free_spread, valid_mean=args.valid_mean,
                     valid_spread=args.valid_spread, seed=args.seed)
    handle = engine.start(config)
    try:
        result = inject_aging(handle, spec)
        handle.quiesce()
        problems = handle.audit()
    finally:
        handle.shutdown(clean=False)
    handle.device.save_image(args.image)
    out.write(f"free blocks per bank: {result.free_per_bank.tolist()}\n")
    out.write(f"valid pages: {result.valid_pages} of {result.synthesized_pages} synthesized\n")
    out.write(f"image: {args.image}\n")
    if problems:
        raise AuditFailed(problems)


def cmd_report(args, out):
    summary = summarize_latency_csv(args.csv, threshold_us=args.threshold_us)
    for key, value in summary.items():
        out.write(f"{key}: {value:.3f}\n" if isinstance(value, float) else f"{key}: {value}\n")


COMMANDS = {
    "run": cmd_run,
    "preset": cmd_preset,
    "inject-aging": cmd_inject_aging,
    "report": cmd_report,
}


def main(argv=None, out=None):
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args, out)
    except AuditFailed as failure:
        for problem in failure.problems[:20]:
            LOGGER.error("audit: %s", problem)
        out.write(f"audit failed: {len(failure.problems)} problems\n")
        return EXIT_AUDIT_FAILED
    except FtlError as error:
        LOGGER.error("%s: %s", type(error).__name__, error)
        out.write(f"error: {error}\n")
        return EXIT_FTL_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
