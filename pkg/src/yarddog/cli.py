"""Command-line entry point.

Subcommands mirror the pipeline stages::

    yarddog extract  --model M --depth K --images IMG.json --out F.csv
    yarddog split    --features F.csv --seed S --out SPLIT.json
    yarddog fit      --features F.csv (--split SPLIT.json | --seed S) --alpha A --components N --out HEAD.json
    yarddog eval     --features F.csv --config CFG.json --out REPORT.json [--baseline] [--threads T]
    yarddog predict  --projection HEAD.json --gallery G.csv --threshold T (--query-features Q.csv | --query-image IMG.json --model M --depth K)

Failures exit with status 1 and print ``error: <ErrorClass>: <message>`` as
a single line on stderr.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import FeatureDataset, SplitPlan, load_features, make_split, save_features
from .embed import ProjectionModel, embed_many, fit
from .errors import ConfigError, DimensionError, YarddogError
from .matcher import Gallery, decide, score_many
from .nn_core import forward, load_images, load_model, truncate
from .protocol import ExperimentConfig, grid_search, report_json

THREADS_ENV = "YARDDOG_THREADS"
log = logging.getLogger("yarddog")


def file_digest(path: str | Path) -> str:
    return "sha256:" + hashlib.sha256(Path(path).read_bytes()).hexdigest()


def timestamp() -> str:
    """UTC timestamp; honours SOURCE_DATE_EPOCH for reproducible outputs."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = (
        _dt.datetime.fromtimestamp(int(epoch), _dt.timezone.utc)
        if epoch
        else _dt.datetime.now(_dt.timezone.utc)
    )
    return when.strftime("%Y-%m-%dT%H:%M:%SZ")


def manifest(command: str, config: dict, inputs: dict, outputs: dict, seed) -> dict:
    return {
        "command": command,
        "config": config,
        "inputs": {name: {"path": str(p), "digest": file_digest(p)} for name, p in inputs.items() if p},
        "outputs": {name: Path(p).name for name, p in outputs.items()},
        "seed": seed,
        "version": __version__,
        "timestamp": timestamp(),
    }


def resolve_threads(flag: int | None) -> int:
    if flag is not None:
        threads = flag
    elif os.environ.get(THREADS_ENV):
        try:
            threads = int(os.environ[THREADS_ENV])
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer") from None
    else:
        threads = os.cpu_count() or 1
    if threads < 1:
        raise ConfigError("thread count must be >= 1")
    return threads


def _write(path: str | Path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")


# -- commands --------------------------------------------------------------

def cmd_extract(args) -> int:
    model = load_model(args.model)
    head = truncate(model, args.depth)
    records = load_images(args.images)
    if not records:
        raise YarddogError(f"{args.images}: no images")
    vectors = np.stack([forward(head, r.tensor) for r in records])
    data = FeatureDataset(tuple(r.identity for r in records), tuple(r.image for r in records), vectors)
    save_features(data, args.out)
    log.info("wrote %d x %d features to %s", len(data), data.dim, args.out)
    return 0


def _split_for(args, data: FeatureDataset) -> SplitPlan:
    if args.split:
        return SplitPlan.load(args.split)
    return make_split(data, args.seed, args.family_size, args.num_family_sets, args.min_images)


def cmd_split(args) -> int:
    data = load_features(args.features)
    plan = make_split(data, args.seed, args.family_size, args.num_family_sets, args.min_images)
    plan.save(args.out)
    return 0


def cmd_fit(args) -> int:
    data = load_features(args.features)
    if not 1 <= args.components <= data.dim:
        raise DimensionError(f"--components must be in [1, d={data.dim}], got {args.components}")
    if not args.alpha > 0:
        raise ConfigError(f"--alpha must be positive, got {args.alpha}")
    plan = _split_for(args, data)
    model = fit(data, args.alpha, args.components, identities=plan.train)
    model.save(args.out)
    if model.n_nonpositive:
        log.warning("%d components have a non-positive objective value", model.n_nonpositive)
    return 0


def load_config(args) -> ExperimentConfig:
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.baseline:
        doc["baseline"] = True
    if args.alpha is not None:
        doc["alpha_grid"] = [args.alpha]
    if args.components is not None:
        doc["n_grid"] = [args.components]
    if args.depth is not None:
        doc["truncation_depths"] = [args.depth]
    return ExperimentConfig.from_dict(doc)


def cmd_eval(args) -> int:
    config = load_config(args)
    threads = resolve_threads(args.threads)
    inputs = {"features": args.features, "model": args.model, "images": args.images,
              "config": args.config, "split": args.split}
    feature_sets: list[tuple[str, FeatureDataset]] = []
    if args.features:
        feature_sets.append(("features", load_features(args.features)))
    elif args.model and args.images:
        model = load_model(args.model)
        records = load_images(args.images)
        depths = config.truncation_depths or (len(model),)
        for depth in depths:
            head = truncate(model, depth)
            vectors = np.stack([forward(head, r.tensor) for r in records])
            feature_sets.append((f"depth={depth}", FeatureDataset(
                tuple(r.identity for r in records), tuple(r.image for r in records), vectors)))
    else:
        raise ConfigError("eval needs --features, or --model together with --images")

    first = feature_sets[0][1]
    if args.split:
        plan = SplitPlan.load(args.split)
    else:
        plan = make_split(first, config.seed, config.family_size, config.num_family_sets, config.min_images)
    reports = [grid_search(config, data, plan, threads=threads, label=label) for label, data in feature_sets]
    man = manifest("eval", config.to_dict(), inputs, {"report": args.out}, config.seed)
    man["split"] = plan.to_dict()
    _write(args.out, report_json(reports, man))
    tables = "\n".join(r.tables() for r in reports)
    _write(str(args.out) + ".txt", tables)
    if not args.quiet:
        sys.stdout.write(tables)
    return 0


def _query_vectors(args) -> tuple[list[str], np.ndarray]:
    if args.query_features:
        q = load_features(args.query_features)
        return [f"{i}/{m}" for i, m in zip(q.identities, q.images)], q.vectors
    if args.query_image:
        if not args.model or args.depth is None:
            raise ConfigError("--query-image needs --model and --depth")
        head = truncate(load_model(args.model), args.depth)
        records = load_images(args.query_image)
        return [f"{r.identity}/{r.image}" for r in records], np.stack([forward(head, r.tensor) for r in records])
    raise ConfigError("predict needs --query-features or --query-image")


def predict(projection: ProjectionModel, gallery_data: FeatureDataset, queries: np.ndarray, threshold: float):
    """Library form of ``predict``: one Decision per query row."""
    gallery_emb = embed_many(projection, gallery_data.vectors)
    order = gallery_data.rows_of(dict.fromkeys(gallery_data.identities))
    gallery = Gallery.from_arrays(
        [gallery_data.identities[i] for i in order],
        [gallery_data.images[i] for i in order],
        gallery_emb[order],
    )
    return [decide(s, threshold) for s in score_many(embed_many(projection, queries), gallery)]


def cmd_predict(args) -> int:
    if args.threshold < 0:
        raise ConfigError("--threshold must be >= 0")
    projection = ProjectionModel.load(args.projection)
    gallery_data = load_features(args.gallery)
    names, vectors = _query_vectors(args)
    for name, decision in zip(names, predict(projection, gallery_data, vectors, args.threshold)):
        line = {"query": name, "label": decision.label, "distance": decision.distance,
                "best_member": decision.best_member, "best_image": decision.best_image}
        sys.stdout.write(json.dumps(line, sort_keys=True) + "\n")
    return 0


# -- argument parsing ------------------------------------------------------

def _split_args(p: argparse.ArgumentParser, with_seed_default: bool = True) -> None:
    p.add_argument("--seed", type=int, default=0 if with_seed_default else None)
    p.add_argument("--family-size", type=int, default=10)
    p.add_argument("--num-family-sets", type=int, default=100)
    p.add_argument("--min-images", type=int, default=10)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="yarddog", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="truncate a model and write features of raw images")
    p.add_argument("--model", required=True)
    p.add_argument("--depth", type=int, required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("split", help="write a seeded train / family split")
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    _split_args(p)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("fit", help="fit the projection head on the training identities")
    p.add_argument("--features", required=True)
    p.add_argument("--split")
    _split_args(p)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--components", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", help="run the family-set protocol over an (alpha, n) grid")
    p.add_argument("--features")
    p.add_argument("--model")
    p.add_argument("--images")
    p.add_argument("--depth", type=int)
    p.add_argument("--config")
    p.add_argument("--split")
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float, help="evaluate a single alpha instead of the config grid")
    p.add_argument("--components", type=int, help="evaluate a single n instead of the config grid")
    p.add_argument("--baseline", action="store_true", help="also evaluate the no-PCA head")
    p.add_argument("--threads", type=int, help=f"worker threads (default ${THREADS_ENV} or all cores)")
    p.add_argument("--out", required=True)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="classify queries as a family member or STRANGER")
    p.add_argument("--projection", required=True)
    p.add_argument("--gallery", required=True, help="feature CSV of family member images")
    p.add_argument("--threshold", type=float, required=True)
    p.add_argument("--query-features")
    p.add_argument("--query-image")
    p.add_argument("--model")
    p.add_argument("--depth", type=int)
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (YarddogError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}".replace("\n", " "), file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
