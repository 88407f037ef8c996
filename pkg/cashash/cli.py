import os
import sys
import logging
import argparse

from banal import ensure_list

from cashash.catalog import Catalog
from cashash.config import RunConfig
from cashash.feature_io import load_manifest, read_text_keys, save_features, save_manifest
from cashash.pipeline import Pipeline, bench_reduce
from cashash.scheduler import plan_exhaustive, plan_hashing, simulate, MEMORY, DEVICE
from cashash.types import DatasetManifest
from cashash.util import CashashException

log = logging.getLogger(__name__)


def _common():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--verbose", action="store_true", help="debug logging")
    common.add_argument("--csv", action="store_true", help="print results as CSV")
    RunConfig.add_arguments(common)
    return common


def build_parser():
    common = _common()
    parser = argparse.ArgumentParser(
        prog="cashash", description="Out-of-core cascade hashing feature matcher."
    )
    commands = parser.add_subparsers(dest="command")
    commands.required = True

    for name, text in (
        ("hash", "compute per-image code caches"),
        ("oracle", "brute-force matches and cascade recall"),
        ("bench-match", "throughput of cascade, brute force and kd-tree"),
    ):
        sub = commands.add_parser(name, parents=[common], help=text)
        sub.add_argument("manifest")

    sub = commands.add_parser("match", parents=[common], help="match every image pair")
    sub.add_argument("manifest")
    sub.add_argument("--guided", action="store_true", help="two-stage guided matching")

    sub = commands.add_parser("plan", parents=[common], help="print the task plan")
    sub.add_argument("manifest")
    sub.add_argument("--mode", choices=("exhaustive", "hashing"), default="exhaustive")
    sub.add_argument("--simulate", action="store_true", help="report residency peaks")

    sub = commands.add_parser("bench-reduce", parents=[common],
                              help="time the reduction at every switch point")
    sub.add_argument("--points", type=int, default=10000)

    sub = commands.add_parser("convert-keys", parents=[common],
                              help="convert text keys to feature files")
    sub.add_argument("keys", nargs="+")
    sub.add_argument("--manifest-out", help="write a manifest of the converted files")
    return parser


def load_config(args):
    config = RunConfig.from_file(args.config) if args.config else RunConfig()
    return config.apply_args(args)


def _print_rows(args, header, rows):
    if args.csv:
        print(",".join(header))
        for row in rows:
            print(",".join(str(v) for v in row))
        return
    table = [header] + [[str(v) for v in row] for row in rows]
    widths = [max(len(r[c]) for r in table) for c in range(len(header))]
    for row in table:
        print("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip())


def _run(pipeline, args, action):
    summary = action(pipeline)
    print(summary.csv() if args.csv else summary.format())
    failed = summary.failed + len(pipeline.failed_images)
    return 1 if failed else 0


def cmd_hash(args, config):
    with Catalog(config.catalog_url()) as catalog:
        pipeline = Pipeline(load_manifest(args.manifest), config, catalog)
        counts = pipeline.hash()
        catalog.record_images(pipeline.manifest, pipeline.points, pipeline.failed_images)
    _print_rows(args, ["status", "images"],
                [(key, counts[key]) for key in ("computed", "cached", "failed")])
    return 1 if counts["failed"] or pipeline.failed_images else 0


def cmd_match(args, config):
    with Catalog(config.catalog_url()) as catalog:
        pipeline = Pipeline(load_manifest(args.manifest), config, catalog)
        return _run(pipeline, args, lambda p: p.match(guided=args.guided))


def cmd_oracle(args, config):
    with Catalog(config.catalog_url()) as catalog:
        pipeline = Pipeline(load_manifest(args.manifest), config, catalog)
        code = _run(pipeline, args, lambda p: p.oracle())
        totals = catalog.recall_totals()
    log.info("Oracle %d, cascade %d, common %d",
             totals["oracle"], totals["found"], totals["common"])
    return code


def cmd_bench_match(args, config):
    pipeline = Pipeline(load_manifest(args.manifest), config)
    rows = pipeline.bench_match()
    _print_rows(args, ["method", "pairs", "seconds", "pairs/s", "recall"],
                [(m, n, "%.3f" % s, "%.2f" % r, "%.4f" % rec) for m, n, s, r, rec in rows])
    return 0


def cmd_bench_reduce(args, config):
    rows = bench_reduce(config, points=args.points)
    _print_rows(args, ["N_r", "ns/op", "checksum"],
                [(n, "%.2f" % ns, checksum) for n, ns, checksum in rows])
    return 0


def cmd_plan(args, config):
    pipeline = Pipeline(load_manifest(args.manifest), config)
    part = pipeline.partition
    plan = plan_hashing(part) if args.mode == "hashing" else plan_exhaustive(part)
    print(plan.dump())
    if args.simulate:
        trace = simulate(plan)
        print("# peak memory %d device %d stalls %d"
              % (trace.peak[MEMORY], trace.peak[DEVICE], trace.stalls))
    return 0


def cmd_convert_keys(args, config):
    os.makedirs(config.output, exist_ok=True)
    manifest = DatasetManifest()
    failed = 0
    for path in ensure_list(args.keys):
        try:
            fs = read_text_keys(path)
            target = os.path.join(config.output, "%s.chft" % fs.image_id)
            save_features(fs, target)
            manifest.add(fs.image_id, os.path.abspath(target))
            log.info("Converted %s (%d points)", path, len(fs))
        except (CashashException, OSError) as exc:
            log.warning("Could not convert %s: %s", path, exc)
            failed += 1
    if args.manifest_out:
        save_manifest(manifest, args.manifest_out)
    return 1 if failed else 0


COMMANDS = {
    "hash": cmd_hash,
    "match": cmd_match,
    "oracle": cmd_oracle,
    "bench-match": cmd_bench_match,
    "bench-reduce": cmd_bench_reduce,
    "plan": cmd_plan,
    "convert-keys": cmd_convert_keys,
}


def main(argv=None):
    """Console entry point; returns the process exit code."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        config = load_config(args)
        if args.command not in ("bench-reduce", "plan"):
            os.makedirs(config.output, exist_ok=True)
        return COMMANDS[args.command](args, config)
    except CashashException as exc:
        log.error("%s", exc)
        return 1
    except OSError as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
