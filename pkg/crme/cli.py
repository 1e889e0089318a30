from __future__ import annotations

import argparse
from pathlib import Path
import sys

from .baselines import IDW, BaselineSpec
from .citygen import random_city, random_transmitters
from .config import configure_logging, get_cache_dir
from .core import GRAY, NoiseMap, linear_to_db, write_gray_png, write_image_png, write_json_sidecar
from .dataset import (
    MANIFEST_NAME,
    SampleRecord,
    build_dataset,
    codec_from_manifest,
    load_dataset,
    read_manifest,
    to_gray,
)
from .errors import ConfigError, CrmeError, ShapeMismatchError
from .evaluation import (
    BaselineEstimator,
    Estimator,
    GeneratorEstimator,
    render_maps,
    run_accuracy_vs_samples,
    run_error_correction,
)
from .export import ReportOptions, export_report, write_report_csv, write_summary_json
from .filters import filter_records, sort_records
from .models import Generator, init_params, load_params, save_params
from .propagation import simulate_radio_map
from .runconfig import RunConfig, help_epilog, load_run_config
from .training import resolve_device, train, train_l2_only
from .utils import dump_json, make_rng

logger = configure_logging()

EXIT_OK = 0
EXIT_NOTHING = 1
EXIT_USAGE = 2
EXIT_FAILED = 3

RESOLVED_CONFIG = "resolved_config.json"


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, help="JSON run config")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override a config key (repeatable), e.g. train.n_stop=5",
    )
    parser.add_argument("--out", type=str, help="Output directory (default: <out_dir>/<command>-<config hash>)")
    parser.add_argument("--workers", type=int, default=1, help="Parallel workers for dataset build and evaluation")
    parser.add_argument("--seed", type=int, help="Root seed (overrides the config's seed)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crme", description="Cooperative radio map estimation with a conditional GAN")
    subparsers = parser.add_subparsers(dest="command")
    epilog = help_epilog()

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        sub = subparsers.add_parser(
            name,
            help=help_text,
            epilog=epilog,
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        _add_common(sub)
        return sub

    simulate_parser = add("simulate", "Simulate ground-truth radio maps and render PNGs")
    simulate_parser.add_argument("--count", type=int, default=4, help="Number of maps to simulate")

    add("build-dataset", "Build a Standard/Flawed dataset or ingest RadioMapSeer")

    train_parser = add("train", "Train the generator (adversarially or L2-only)")
    train_parser.add_argument("--dataset", type=str, required=True, help="Dataset directory")
    train_parser.add_argument("--validation", type=str, help="Validation dataset directory")
    train_parser.add_argument("--l2-only", action="store_true", help="Train without the discriminator")

    evaluate_parser = add("evaluate", "Accuracy-vs-samples curves, error correction and renders")
    evaluate_parser.add_argument("--checkpoint", type=str, required=True, help="Generator checkpoint (.pt)")
    evaluate_parser.add_argument("--dataset", type=str, required=True, help="Test dataset directory")
    evaluate_parser.add_argument(
        "--baselines",
        action=argparse.BooleanOptionalAction,
        default=False,
        help="Also evaluate the configured interpolation baselines",
    )

    compare_parser = add("compare", "Side-by-side table of checkpoints and baselines")
    compare_parser.add_argument(
        "--checkpoints",
        nargs="+",
        default=[],
        metavar="[NAME=]PATH",
        help="Generator checkpoints to compare",
    )
    compare_parser.add_argument("--dataset", type=str, required=True, help="Test dataset directory")

    render_parser = add("render", "Render label and estimate panels for chosen records")
    render_parser.add_argument("--checkpoint", type=str, help="Generator checkpoint (.pt)")
    render_parser.add_argument("--dataset", type=str, required=True, help="Dataset directory")
    render_parser.add_argument("--records", nargs="*", help="Record ids (default: first eval.render_count)")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "simulate": _simulate_cmd,
        "build-dataset": _build_dataset_cmd,
        "train": _train_cmd,
        "evaluate": _evaluate_cmd,
        "compare": _compare_cmd,
        "render": _render_cmd,
    }
    handler = handlers.get(args.command)
    if handler is None:
        parser.print_help()
        return EXIT_OK

    try:
        config = load_run_config(
            Path(args.config).expanduser() if args.config else None,
            args.overrides,
            args.seed,
        )
        return handler(args, config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CrmeError as exc:
        logger.error("%s failed: %s", args.command, exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except Exception:
        logger.exception("unexpected failure in %s", args.command)
        raise


def _warn(message: str) -> None:
    logger.warning(message)
    print(f"warning: {message}", file=sys.stderr)


def _run_dir(args: argparse.Namespace, config: RunConfig, *extra: object) -> Path:
    if args.out:
        out = Path(args.out).expanduser()
    else:
        out = Path(config.out_dir).expanduser() / f"{args.command}-{config.digest(args.command, *extra)}"
    out.mkdir(parents=True, exist_ok=True)
    dump_json(out / RESOLVED_CONFIG, config.to_dict())
    return out


def _load_records(path: str) -> list[SampleRecord]:
    return sort_records(load_dataset(Path(path).expanduser()))


def _simulate_cmd(args: argparse.Namespace, config: RunConfig) -> int:
    if args.count < 1:
        print("Nothing to simulate (--count < 1).")
        return EXIT_NOTHING
    out = _run_dir(args, config, args.count)
    cfg = config.dataset
    if cfg.transmitters[1] == 0:
        _warn("no transmitters configured: maps equal the noise floor")
    for index in range(args.count):
        rng = make_rng(config.seed, "simulate", index)
        geo = random_city(config.city, rng)
        transmitters = random_transmitters(geo, cfg.transmitters, cfg.tx_power_dbm, rng)
        noise = NoiseMap.constant(geo.shape, cfg.noise_dbm)
        received = simulate_radio_map(transmitters, geo, noise, config.propagation)
        label = to_gray(linear_to_db(received, config.codec.floor_dbm), config.codec)
        stem = f"{index:06d}"
        write_gray_png(label, out / f"{stem}_label.png")
        write_image_png(geo.occupancy.astype(float), out / f"{stem}_map.png")
        write_json_sidecar(
            out / f"{stem}_meta.json",
            {
                "transmitters": [[tx.x, tx.y, tx.power] for tx in transmitters.tx_list],
                "buildings": geo.building_ids,
                "domain": GRAY,
            },
        )
    print(f"Simulated {args.count} maps -> {out}")
    return EXIT_OK


def _build_dataset_cmd(args: argparse.Namespace, config: RunConfig) -> int:
    recipe = config.recipe()
    if args.out:
        out = _run_dir(args, config)
    else:
        out = get_cache_dir() / "datasets" / config.digest("dataset")
        if (out / MANIFEST_NAME).exists():
            try:
                manifest = read_manifest(out)
            except CrmeError as exc:
                logger.warning("ignoring unusable cached dataset %s: %s", out, exc)
            else:
                print(f"Using cached dataset ({manifest['count']} records) -> {out}")
                return EXIT_OK
        out.mkdir(parents=True, exist_ok=True)
        dump_json(out / RESOLVED_CONFIG, config.to_dict())
    manifest = build_dataset(recipe, out, workers=args.workers)
    if not manifest["count"]:
        print(f"No records produced -> {out}")
        return EXIT_NOTHING
    print(f"Built {manifest['count']} records -> {out}")
    return EXIT_OK


def _train_cmd(args: argparse.Namespace, config: RunConfig) -> int:
    records = _load_records(args.dataset)
    if not records:
        print("No records to train on.")
        return EXIT_NOTHING
    validation = _load_records(args.validation) if args.validation else None
    smallest = config.discriminator_spec.min_input_size
    if not args.l2_only and min(records[0].shape) < smallest:
        raise ShapeMismatchError(
            f"maps of size {records[0].shape} are too small for the discriminator; need at least {smallest}x{smallest}"
        )
    out = _run_dir(args, config, args.dataset, args.l2_only)
    train_config = config.seeded_train()
    gen = init_params(config.generator_spec, config.init_seed("generator"))
    if args.l2_only:
        gen, log = train_l2_only(records, gen, train_config, out_dir=out, validation=validation)
    else:
        disc = init_params(config.discriminator_spec, config.init_seed("discriminator"))
        gen, disc, log = train(records, gen, disc, train_config, out_dir=out, validation=validation)
        save_params(disc, out / "discriminator.pt")
    save_params(gen, out / "generator.pt")
    log.write_csv(out / "train_log.csv")
    print(f"Trained {len(log)} epochs on {len(records)} records -> {out}")
    return EXIT_OK


def _load_generator(path: str, config: RunConfig) -> Generator:
    return load_params(Path(path).expanduser(), config.generator_spec)  # type: ignore[return-value]


def _baseline_estimators(specs: tuple[BaselineSpec, ...]) -> list[Estimator]:
    return [BaselineEstimator(spec) for spec in specs]


def _evaluate_cmd(args: argparse.Namespace, config: RunConfig) -> int:
    records = _load_records(args.dataset)
    if not records:
        print("No records to evaluate.")
        return EXIT_NOTHING
    codec = codec_from_manifest(read_manifest(Path(args.dataset).expanduser()))
    out = _run_dir(args, config, args.checkpoint, args.dataset, args.baselines)
    model = GeneratorEstimator(_load_generator(args.checkpoint, config), device=resolve_device(config.train.device))
    estimators: list[Estimator] = [model]
    if args.baselines:
        estimators.extend(_baseline_estimators(config.eval.baselines))
    report = run_accuracy_vs_samples(
        estimators,
        records,
        config=config.eval,
        codec=codec,
        seed=config.seed,
        out_dir=out,
        workers=args.workers,
    )
    export_report(report, out)
    print(f"Evaluated {len(records)} records at K={list(config.eval.k_grid)} -> {out}")

    flawed = filter_records(records, flawed=True)
    if flawed:
        correction = run_error_correction(
            estimators, flawed, config=config.eval, codec=codec, seed=config.seed, workers=args.workers
        )
        write_report_csv(correction, out / "error_correction.csv")
        write_summary_json(correction, out / "error_correction.json")
        verdict = "decreases" if correction.masked_decreasing(model.name) else "does not decrease"
        print(f"Masked-region RMSE {verdict} with K over {len(flawed)} flawed records")

    _render_records(records[: config.eval.render_count], [model, BaselineEstimator(BaselineSpec(method=IDW))], out)
    return EXIT_OK


def _parse_checkpoint_arg(item: str) -> tuple[str, str]:
    name, sep, path = item.partition("=")
    if sep:
        return name, path
    stem = Path(item).expanduser()
    return stem.parent.name or stem.stem, item


def _compare_cmd(args: argparse.Namespace, config: RunConfig) -> int:
    records = _load_records(args.dataset)
    if not records:
        print("No records to compare on.")
        return EXIT_NOTHING
    named = [_parse_checkpoint_arg(item) for item in args.checkpoints]
    names = [name for name, _ in named]
    if len(set(names)) != len(names):
        raise ConfigError("checkpoint names must be unique", names)
    codec = codec_from_manifest(read_manifest(Path(args.dataset).expanduser()))
    out = _run_dir(args, config, args.dataset, *args.checkpoints)
    device = resolve_device(config.train.device)
    estimators: list[Estimator] = [
        GeneratorEstimator(_load_generator(path, config), name=name, device=device) for name, path in named
    ]
    estimators.extend(_baseline_estimators(config.eval.baselines))
    report = run_accuracy_vs_samples(
        estimators,
        records,
        config=config.eval,
        codec=codec,
        seed=config.seed,
        out_dir=out,
        workers=args.workers,
    )
    export_report(report, out, ReportOptions(title="Method comparison"))
    print((out / "report.md").read_text(encoding="utf-8"))
    print(f"Compared {len(estimators)} methods -> {out}")
    return EXIT_OK


def _render_records(records: list[SampleRecord], estimators: list[Estimator], out: Path) -> int:
    rendered = 0
    for record in records:
        render_maps(record, {est.name: est(record) for est in estimators}, out / "renders")
        rendered += 1
    return rendered


def _render_cmd(args: argparse.Namespace, config: RunConfig) -> int:
    records = _load_records(args.dataset)
    if args.records:
        records = filter_records(records, record_ids=args.records)
    else:
        records = records[: config.eval.render_count]
    if not records:
        print("No matching records to render.")
        return EXIT_NOTHING
    out = _run_dir(args, config, args.dataset, args.checkpoint, *(args.records or []))
    estimators: list[Estimator] = []
    if args.checkpoint:
        generator = _load_generator(args.checkpoint, config)
        estimators.append(GeneratorEstimator(generator, device=resolve_device(config.train.device)))
    estimators.extend(_baseline_estimators(config.eval.baselines))
    count = _render_records(records, estimators, out)
    print(f"Rendered {count} records -> {out / 'renders'}")
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
