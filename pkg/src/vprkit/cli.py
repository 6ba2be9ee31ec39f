"""Command-line entry point wiring validation, vocabularies, aggregation,
projection, evaluation, and cluster visualization.

Exit codes: 0 success, 1 validation failure, 2 configuration error,
3 I/O error. A YAML config file (--config) supplies per-flag defaults;
flags given on the command line win. Machine-readable outputs carry no
timestamps, so identical inputs and seeds give byte-identical files.
VPRKIT_CACHE_DIR names the default directory for cached descriptors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Mapping, Sequence

import yaml

from .aggregation import PoolingConfig, VladConfig, aggregate_dataset
from .cluster_viz import assign_map, export_label_image, export_montage
from .errors import ConfigError, ValidationError
from .feature_store import (
    FeatureDirectory,
    load_manifest,
    read_descriptor_set,
    read_feature_map,
    write_descriptor_set,
)
from .projection import (
    export_domain_scatter,
    fit_pca,
    format_scatter_table,
    project,
    read_pca_model,
    write_pca_model,
)
from .retrieval import (
    evaluate,
    evaluate_descriptors,
    format_report_text,
    write_report_json,
)
from .vocabulary import (
    VocabAssembly,
    VocabPart,
    build_vocabulary,
    default_cluster_count,
    domain_vocab_presets,
    read_vocabulary,
    write_vocabulary,
)

CACHE_ENV = "VPRKIT_CACHE_DIR"

log = logging.getLogger("vprkit")


class _RoutedFeatures(Mapping):
    """Mapping over several feature directories, one route per image id."""

    def __init__(self):
        self._routes: dict[str, FeatureDirectory] = {}

    def add(self, image_id: str, directory: FeatureDirectory) -> None:
        known = self._routes.get(image_id)
        if known is not None and known.root != directory.root:
            raise ConfigError(
                f"image id {image_id!r} appears in two feature directories: "
                f"{known.root} and {directory.root}"
            )
        self._routes[image_id] = directory

    def __getitem__(self, image_id: str):
        return self._routes[image_id][image_id]

    def __iter__(self):
        return iter(self._routes)

    def __len__(self):
        return len(self._routes)


def _parse_k_list(value) -> tuple[int, ...]:
    if isinstance(value, (list, tuple)):
        items = list(value)
    else:
        items = [v for v in str(value).split(",") if v.strip()]
    try:
        ks = tuple(sorted(set(int(v) for v in items)))
    except (TypeError, ValueError):
        raise ConfigError(f"--k expects comma-separated integers, got {value!r}")
    if not ks or ks[0] < 1:
        raise ConfigError(f"--k values must be positive, got {value!r}")
    return ks


def _make_method(args):
    """Build the aggregation config from CLI flags."""
    if args.method == "vlad":
        if not args.vocab:
            raise ConfigError("--method vlad requires --vocab")
        vocab = read_vocabulary(args.vocab)
        return VladConfig(
            vocabulary=vocab,
            assignment=args.assignment,
            soft_temperature=args.temperature,
            normalize_features=args.normalize_features,
        )
    if args.vocab:
        log.warning("--vocab is ignored for --method %s", args.method)
    if args.method == "gem":
        return PoolingConfig(kind="gem", p=args.p)
    return PoolingConfig(kind=args.method)


def _split_entries(manifest, split: str):
    if split == "database":
        return manifest.database_entries()
    if split == "query":
        return manifest.query_entries()
    return manifest.entries


# ---------------------------------------------------------------- commands


def cmd_validate(args) -> int:
    manifest = load_manifest(args.manifest)
    features = FeatureDirectory(args.features)
    problems = []
    expected_dim = None
    anchor_id = None
    for entry in manifest.entries:
        path = features.path_for(entry.image_id)
        if not path.exists():
            problems.append(f"missing feature file: {path}")
            continue
        try:
            fmap = read_feature_map(path, entry.image_id)
        except ValidationError as err:  # FormatError included
            problems.append(f"unreadable feature file {path}: {err}")
            continue
        if expected_dim is None:
            expected_dim, anchor_id = fmap.dim, entry.image_id
        elif fmap.dim != expected_dim:
            problems.append(
                f"dim mismatch: {entry.image_id} has dim {fmap.dim}, "
                f"{anchor_id} has dim {expected_dim}"
            )
    if problems:
        for p in problems:
            print(p, file=sys.stderr)
        print(f"FAIL: {len(problems)} problem(s)", file=sys.stderr)
        return 1
    print(f"OK, {len(manifest.entries)} maps, dim {expected_dim}")
    return 0


def cmd_build_vocab(args) -> int:
    manifests = [load_manifest(p) for p in args.manifest]
    if len(args.features) != len(manifests):
        raise ConfigError(
            f"{len(args.manifest)} --manifest but {len(args.features)} "
            "--features; counts must match"
        )
    if args.preset and args.stride:
        raise ConfigError("--preset and --stride are mutually exclusive")
    if args.preset:
        preset = domain_vocab_presets()[args.preset]
        strides = []
        for m in manifests:
            s = preset.stride_for(m.name)
            if s is None:
                known = ", ".join(p.dataset for p in preset.parts)
                raise ConfigError(
                    f"manifest dataset {m.name!r} is not part of preset "
                    f"{args.preset!r} (expected one of: {known})"
                )
            strides.append(s)
    elif args.stride:
        if len(args.stride) != len(manifests):
            raise ConfigError(
                f"{len(args.stride)} --stride for {len(manifests)} manifests"
            )
        strides = args.stride
    else:
        strides = [1] * len(manifests)

    features = _RoutedFeatures()
    for manifest, feat_dir in zip(manifests, args.features):
        directory = FeatureDirectory(feat_dir)
        for entry in manifest.database_entries():
            features.add(entry.image_id, directory)

    k = args.k
    if k is None:
        first = manifests[0].database_entries()[0]
        dim = features[first.image_id].dim
        k = default_cluster_count(dim)
        if k is None:
            raise ConfigError(
                f"no default cluster count for feature dim {dim}; pass --k"
            )
        log.info("defaulting to k=%d for feature dim %d", k, dim)

    assembly = VocabAssembly(
        parts=tuple(
            VocabPart(manifest=m, stride=s) for m, s in zip(manifests, strides)
        ),
        k=k,
        sample_cap=args.sample_cap,
    )
    vocab = build_vocabulary(
        assembly,
        features,
        seed=args.seed,
        max_iters=args.max_iters,
        tol=args.tol,
    )
    write_vocabulary(vocab, args.out)
    print(f"vocabulary: k={vocab.k} dim={vocab.dim} seed={vocab.seed}")
    print(f"fingerprint: {vocab.fingerprint}")
    print(f"written: {args.out}")
    return 0


def cmd_aggregate(args) -> int:
    manifest = load_manifest(args.manifest)
    features = FeatureDirectory(args.features)
    method = _make_method(args)
    entries = _split_entries(manifest, args.split)
    maps = []
    for entry in entries:
        if entry.image_id not in features:
            raise ValidationError(f"no feature map for {entry.image_id!r}")
        maps.append(features[entry.image_id])
    dset = aggregate_dataset(maps, method, jobs=args.jobs)
    write_descriptor_set(dset, args.out)
    print(f"descriptors: {len(dset)} x {dset.dim} ({dset.method_tag})")
    print(f"written: {args.out}")
    return 0


def cmd_fit_pca(args) -> int:
    dset = read_descriptor_set(args.descriptors)
    if args.manifest:
        manifest = load_manifest(args.manifest)
        keep = [e.image_id for e in _split_entries(manifest, args.split)]
        dset = dset.subset(keep)
    model = fit_pca(dset, args.dim, whiten=args.whiten, epsilon=args.epsilon)
    write_pca_model(model, args.out)
    evr = float(model.explained_variance_ratio.sum())
    print(
        f"pca: dim {model.dim} -> rank {model.rank}, "
        f"whiten={'yes' if model.whiten else 'no'}, "
        f"explained variance {evr:.4f}"
    )
    print(f"written: {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    manifest = load_manifest(args.manifest)
    ks = _parse_k_list(args.k)
    desc_route = bool(args.descriptors_db or args.descriptors_q)
    if desc_route:
        if not (args.descriptors_db and args.descriptors_q):
            raise ConfigError(
                "--descriptors-db and --descriptors-q must be given together"
            )
        if args.features:
            raise ConfigError("--features conflicts with --descriptors-db/q")
        db_set = read_descriptor_set(args.descriptors_db)
        q_set = read_descriptor_set(args.descriptors_q)
        if db_set.method_tag != q_set.method_tag:
            raise ConfigError(
                f"descriptor method tags differ: {db_set.method_tag!r} vs "
                f"{q_set.method_tag!r}"
            )
        if args.pca is not None:
            db_ids = [e.image_id for e in manifest.database_entries()]
            model = fit_pca(db_set.subset(db_ids), args.pca, whiten=args.whiten)
            db_set = project(model, db_set)
            q_set = project(model, q_set)
        report = evaluate_descriptors(
            db_set, q_set, manifest, ks, metric=args.metric, jobs=args.jobs
        )
    else:
        if not args.features:
            raise ConfigError("--features (or --descriptors-db/q) is required")
        features = FeatureDirectory(args.features)
        method = _make_method(args)
        cache_dir = None
        if not args.no_cache:
            cache_dir = args.cache_dir or os.environ.get(CACHE_ENV) or None
        report = evaluate(
            features,
            features,
            method,
            manifest,
            ks,
            metric=args.metric,
            pca_dim=args.pca,
            pca_whiten=args.whiten,
            jobs=args.jobs,
            cache_dir=cache_dir,
        )
    text = format_report_text(report)
    print(text, end="")
    if args.report_text:
        Path(args.report_text).write_text(text, encoding="utf-8")
    if args.report_json:
        write_report_json(report, args.report_json)
    return 0


def cmd_scatter(args) -> int:
    model = read_pca_model(args.model)
    sets = []
    for spec_item in args.set:
        label, sep, path = spec_item.partition("=")
        if not sep or not label or not path:
            raise ConfigError(f"--set expects label=path, got {spec_item!r}")
        sets.append((label, read_descriptor_set(path)))
    rows = export_domain_scatter(model, sets)
    table = format_scatter_table(rows)
    Path(args.out).write_text(table, encoding="utf-8")
    print(f"scatter: {len(rows)} rows")
    print(f"written: {args.out}")
    return 0


def cmd_clustviz(args) -> int:
    vocab = read_vocabulary(args.vocab)
    features = FeatureDirectory(args.features)
    if args.ids:
        image_ids = list(args.ids)
    elif args.manifest:
        manifest = load_manifest(args.manifest)
        image_ids = [e.image_id for e in _split_entries(manifest, args.split)]
    else:
        raise ConfigError("pass --ids or --manifest to choose images")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    amaps = []
    for image_id in image_ids:
        if image_id not in features:
            raise ValidationError(f"no feature map for {image_id!r}")
        amap = assign_map(features[image_id], vocab)
        amaps.append(amap)
        export_label_image(amap, out_dir / f"{image_id}.png", upscale=args.upscale)
    print(f"label maps: {len(amaps)} written to {out_dir}")
    if args.montage:
        export_montage(amaps, args.montage, upscale=args.upscale)
        print(f"montage: {args.montage}")
    return 0


# ------------------------------------------------------------------ parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML file of flag defaults")
    p.add_argument(
        "--log-level",
        default="info",
        choices=["debug", "info", "warning", "error"],
    )


def _add_method_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--method", default="gem", choices=["gap", "gmp", "gem", "vlad"]
    )
    p.add_argument("--p", type=float, default=3.0, help="gem power")
    p.add_argument("--assignment", default="hard", choices=["hard", "soft"])
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--normalize-features", action="store_true")
    p.add_argument("--vocab", help="vocabulary file, required for vlad")


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="vprkit",
        description="Training-free visual place recognition toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    registry = {}

    p = sub.add_parser("validate", help="check a manifest against a feature dir")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_validate)
    registry["validate"] = p

    p = sub.add_parser("build-vocab", help="cluster database features")
    p.add_argument("--manifest", action="append", required=True)
    p.add_argument("--features", action="append", required=True)
    p.add_argument("--stride", action="append", type=int)
    p.add_argument("--preset", choices=sorted(domain_vocab_presets()))
    p.add_argument("--k", type=int, help="cluster count (default by feature dim)")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--sample-cap", type=int, default=500_000)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_build_vocab)
    registry["build-vocab"] = p

    p = sub.add_parser("aggregate", help="one global descriptor per image")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    _add_method_flags(p)
    p.add_argument(
        "--split", default="all", choices=["database", "query", "all"]
    )
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_aggregate)
    registry["aggregate"] = p

    p = sub.add_parser("fit-pca", help="fit a projection on descriptors")
    p.add_argument("--descriptors", required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--whiten", action="store_true")
    p.add_argument("--epsilon", type=float, default=1e-12)
    p.add_argument("--manifest", help="restrict fitting to one split")
    p.add_argument(
        "--split", default="database", choices=["database", "query", "all"]
    )
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_fit_pca)
    registry["fit-pca"] = p

    p = sub.add_parser("evaluate", help="rank queries and score Recall@K")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features")
    _add_method_flags(p)
    p.add_argument("--descriptors-db", help="precomputed database descriptors")
    p.add_argument("--descriptors-q", help="precomputed query descriptors")
    p.add_argument("--pca", type=int, help="project to this rank before ranking")
    p.add_argument("--whiten", action="store_true")
    p.add_argument("--metric", default="cosine", choices=["cosine", "euclidean"])
    p.add_argument("--k", default="1,5", help="comma-separated K values")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--cache-dir", help=f"descriptor cache (default ${CACHE_ENV})")
    p.add_argument("--no-cache", action="store_true")
    p.add_argument("--report-json")
    p.add_argument("--report-text")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)
    registry["evaluate"] = p

    p = sub.add_parser("scatter", help="2-D projection table for plotting")
    p.add_argument("--model", required=True)
    p.add_argument(
        "--set",
        action="append",
        required=True,
        help="label=descriptors.anyd (repeatable)",
    )
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_scatter)
    registry["scatter"] = p

    p = sub.add_parser("clustviz", help="per-pixel cluster label images")
    p.add_argument("--features", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--ids", nargs="+", help="image ids to render")
    p.add_argument("--manifest", help="render a whole manifest split")
    p.add_argument(
        "--split", default="all", choices=["database", "query", "all"]
    )
    p.add_argument("--upscale", type=int, default=1)
    p.add_argument("--montage", help="also write one side-by-side image")
    p.add_argument("--out-dir", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_clustviz)
    registry["clustviz"] = p

    return parser, registry


def _apply_config_file(args, subparser, argv: Sequence[str]) -> None:
    """Overlay YAML config values onto args; explicit CLI flags win."""
    if not args.config:
        return
    with open(args.config, "r", encoding="utf-8") as fh:
        loaded = yaml.safe_load(fh)
    if loaded is None:
        return
    if not isinstance(loaded, dict):
        raise ConfigError(f"{args.config}: config must be a mapping")
    types = {a.dest: a.type for a in subparser._actions}
    known = vars(args)
    for raw_key, value in loaded.items():
        key = str(raw_key).replace("-", "_")
        if key in ("config", "command", "func") or key not in known:
            raise ConfigError(f"{args.config}: unknown config key {raw_key!r}")
        flag = "--" + str(raw_key).replace("_", "-")
        given = any(t == flag or t.startswith(flag + "=") for t in argv)
        if given:
            continue
        convert = types.get(key)
        if convert is not None and isinstance(value, str):
            value = convert(value)
        setattr(args, key, value)


def _log_resolved(args) -> None:
    resolved = {}
    for key, value in sorted(vars(args).items()):
        if key == "func":
            continue
        if isinstance(value, (str, int, float, bool, type(None), list, tuple)):
            resolved[key] = list(value) if isinstance(value, tuple) else value
        else:
            resolved[key] = str(value)
    log.info("resolved config: %s", json.dumps(resolved, sort_keys=True))


def main(argv: Sequence[str] | None = None) -> int:
    tokens = list(sys.argv[1:] if argv is None else argv)
    parser, registry = _build_parser()
    try:
        args = parser.parse_args(tokens)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper()),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        _apply_config_file(args, registry[args.command], tokens)
        _log_resolved(args)
        return int(args.func(args) or 0)
    except ValidationError as e:  # includes FormatError
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
