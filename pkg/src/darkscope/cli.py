"""Command-line entry point: one subcommand per pipeline stage plus ``run``.

Exit status: 0 on success, 2 for bad or missing input, 3 for numeric
failures (diverged training, transport solver failure).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3

log = logging.getLogger("darkscope")


def _numeric_errors() -> tuple[type, ...]:
    from .autoencoder import TrainingDiverged
    from .changedetect import TransportError

    return (TrainingDiverged, TransportError, FloatingPointError, np.linalg.LinAlgError)


def _exit_code(exc: BaseException) -> int:
    from .pipeline import StageError

    if isinstance(exc, StageError):
        exc = exc.cause
    return EXIT_NUMERIC if isinstance(exc, _numeric_errors()) else EXIT_INPUT


def _parse_kv(text: str) -> dict[str, str]:
    out = {}
    for part in text.split(","):
        if not part.strip():
            continue
        if "=" not in part:
            raise ValueError(f"expected key=value, got {part!r}")
        k, v = part.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _read_external(path: str, ids: list[str], day: str | None) -> list[str]:
    """External partition aligned to ``ids``: src_ip plus a label column (last one)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "src_ip" not in reader.fieldnames:
            raise ValueError(f"{path}: needs a src_ip column")
        label_col = "archetype" if "archetype" in reader.fieldnames else reader.fieldnames[-1]
        table = {}
        for row in reader:
            if day is not None and row.get("day") != day:
                continue
            table[row["src_ip"]] = row[label_col]
    missing = [i for i in ids if i not in table]
    if missing:
        raise ValueError(f"{len(missing)} rows lack an external label (e.g. {missing[0]})")
    return [table[i] for i in ids]


def _aligned_labels(labels_path: str, ids: list[str]) -> np.ndarray:
    from .pipeline import read_labels_csv

    lab_ids, labels = read_labels_csv(labels_path)
    if lab_ids != ids:
        raise ValueError("labels and feature rows are not aligned (src_ip order differs)")
    return labels


# subcommands -------------------------------------------------------------

def cmd_ingest(args) -> int:
    from .ingest import ingest, ingest_sharded, read_packets, write_jsonl

    stats: dict = {}
    if args.lanes > 1:
        events = ingest_sharded(read_packets(args.input), args.lanes, args.timeout, args.slack)
    else:
        events = ingest(read_packets(args.input), args.timeout, args.slack, stats)
    n = write_jsonl(args.out, (e.to_dict() for e in events))
    log.info("%d events written (%d packets rejected as out of order)", n, stats.get("rejected", 0))
    return EXIT_OK


def cmd_enrich(args) -> int:
    from .enrich import Annotations
    from .features import aggregate_daily, write_profiles
    from .ingest import read_events

    ann = Annotations.load(args.geo, args.asn, args.censys)
    profiles = aggregate_daily(read_events(args.events), ann)
    write_profiles(args.out, profiles)
    log.info("%d profiles written", len(profiles))
    return EXIT_OK


def cmd_featurize(args) -> int:
    from .features import FeatureSchema, build_schema, featurize, interpret_rows, read_profiles, write_matrix_csv

    profiles = read_profiles(args.profiles)
    schema_path = Path(args.schema)
    if schema_path.exists() and not args.refit:
        schema = FeatureSchema.load(schema_path)
        log.info("using schema %s (%s)", schema_path, schema.fingerprint())
    else:
        schema = build_schema(profiles, args.u, args.mode, args.bins)
        schema.save(schema_path)
    featurize(profiles, schema).to_csv(args.out)
    if args.interpret_out:
        X, cols, _ = interpret_rows(profiles)
        write_matrix_csv(args.interpret_out, [p.src_ip for p in profiles], cols, X)
    return EXIT_OK


def cmd_train(args) -> int:
    from .autoencoder import MlpConfig, grid_search, parse_config, save_model, split_train_val, train
    from .features import read_matrix_csv

    _, _, X = read_matrix_csv(args.features)
    loss_mode = "hamming_surrogate" if args.mode == "tmlp" else "squared_euclidean"
    overrides = {"input_dim": X.shape[1], "loss_mode": loss_mode}
    if args.seed_given or not args.config:
        overrides["seed"] = args.seed
    if args.config:
        cfg = parse_config(Path(args.config).read_text(), **overrides)
    else:
        cfg = MlpConfig(**overrides)
    if args.grid:
        grid = {}
        for part in args.grid.split(";"):
            key, vals = part.split("=", 1)
            caster = float if key.strip() in ("learning_rate", "dropout_prob", "weight_decay") else int
            grid[key.strip()] = [caster(v) for v in vals.split(",")]
        tr, va = split_train_val(len(X), seed=cfg.seed)
        cfg, table = grid_search(X[tr], X[va], cfg, grid)
        for row in table:
            log.info("grid %s", row)
        log.info("selected %s", {k: getattr(cfg, k) for k in grid})
    model, report = train(X, cfg)
    save_model(model, args.model_out)
    if args.report:
        Path(args.report).write_text(report.to_csv())
    return EXIT_OK


def cmd_embed(args) -> int:
    from .autoencoder import embed, load_model
    from .features import read_matrix_csv, write_matrix_csv

    ids, _, X = read_matrix_csv(args.features)
    Z = embed(load_model(args.model), X)
    write_matrix_csv(args.out, ids, [f"z{i}" for i in range(Z.shape[1])], Z)
    return EXIT_OK


def cmd_cluster(args) -> int:
    from .clustering import kmeans
    from .features import read_matrix_csv, write_matrix_csv
    from .pipeline import write_labels_csv

    ids, cols, Z = read_matrix_csv(args.embeddings)
    cl = kmeans(Z, args.k, seed=args.seed, n_init=args.n_init)
    write_labels_csv(args.out, ids, cl.labels)
    if args.centroids:
        write_matrix_csv(args.centroids, [str(i) for i in range(args.k)], cols, cl.centroids, id_name="cluster")
    log.info("inertia %.6g after %d iterations", cl.inertia, cl.n_iter)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .clustering import StabilityConfig, jaccard_pair, silhouette, stability
    from .features import read_matrix_csv

    ids, _, Z = read_matrix_csv(args.embeddings)
    labels = _aligned_labels(args.labels, ids)
    out: dict = {"n": len(ids), "clusters": int(len(np.unique(labels)))}
    out["silhouette"] = silhouette(Z, labels) if out["clusters"] > 1 else None
    if args.external:
        out["jaccard"] = jaccard_pair(labels, _read_external(args.external, ids, args.day))
    if args.stability:
        kv = _parse_kv(args.stability)
        cfg = StabilityConfig(rounds=int(kv.get("B", 50)),
                              sample_size=int(kv["size"]) if "size" in kv else None, seed=args.seed)
        cfg.sample_size = min(cfg.size_for(len(ids)), len(ids))
        out["stability"] = stability(Z, int(kv.get("k", out["clusters"])), cfg)
    text = json.dumps(out, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_ksweep(args) -> int:
    from .clustering import k_sweep
    from .features import read_matrix_csv

    ids, _, Z = read_matrix_csv(args.embeddings)
    ks = [int(k) for k in args.klist.split(",")]
    external = _read_external(args.external, ids, args.day) if args.external else None
    rows, knee = k_sweep(Z, ks, external, seed=args.seed)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["k", "jaccard", "silhouette", "inertia"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    print(f"suggested K (knee): {knee}")
    return EXIT_OK


def _tree_inputs(args):
    from .enrich import GroupingTags
    from .features import interpret_rows, read_matrix_csv, read_profiles

    if args.profiles:
        profiles = read_profiles(args.profiles)
        X, cols, is_tag = interpret_rows(profiles)
        ids = [p.src_ip for p in profiles]
    else:
        ids, cols, X = read_matrix_csv(args.features)
        tags = set(GroupingTags.names())
        is_tag = [c in tags for c in cols]
    return ids, X, cols, is_tag


def cmd_tree(args) -> int:
    from .trees import fit_tree_exact, fit_tree_greedy

    if not (args.features or args.profiles):
        raise ValueError("tree needs --features or --profiles")
    ids, X, cols, is_tag = _tree_inputs(args)
    y = _aligned_labels(args.labels, ids)
    if args.mode == "exact":
        tree = fit_tree_exact(X, y, cols, is_tag, args.depth, args.min_leaf, args.max_thresholds)
    else:
        tree = fit_tree_greedy(X, y, cols, is_tag, args.depth, args.min_leaf)
    tree.save(args.out)
    text = tree.render()
    if args.render:
        Path(args.render).write_text(text)
    else:
        sys.stdout.write(text)
    log.info("training accuracy %.4f", tree.accuracy(X, y))
    return EXIT_OK


def cmd_report(args) -> int:
    from .features import read_profiles
    from .pipeline import read_labels_csv
    from .report import cluster_report

    profiles = read_profiles(args.profiles)
    ids, labels = read_labels_csv(args.labels)
    if ids != [p.src_ip for p in profiles]:
        raise ValueError("labels and profiles are not aligned (src_ip order differs)")
    rep = cluster_report(labels, profiles, args.topk)
    rep.to_csv(args.out)
    sys.stdout.write(rep.render(10))
    return EXIT_OK


def cmd_dnf(args) -> int:
    from .trees import DecisionTree, dnf_for_cluster

    tree = DecisionTree.load(args.tree)
    X = y = None
    if args.features or args.profiles:
        ids, X, _, _ = _tree_inputs(args)
        if not args.labels:
            raise ValueError("--labels is required with --features/--profiles")
        y = _aligned_labels(args.labels, ids)
    dnf = dnf_for_cluster(tree, args.cluster, X, y)
    print(dnf)
    for d in dnf.disjuncts:
        print(f"  leaf {d.leaf}: support {d.support}, precision {d.precision:.4f}  {d}")
    return EXIT_OK if not dnf.empty else EXIT_INPUT


def cmd_signature(args) -> int:
    from .changedetect import build_signature
    from .features import FeatureSchema, read_matrix_csv

    ids, _, X = read_matrix_csv(args.features)
    labels = _aligned_labels(args.labels, ids)
    fp = FeatureSchema.load(args.schema).fingerprint() if args.schema else None
    build_signature(labels, X, args.space, fp, args.day).save(args.out)
    return EXIT_OK


def cmd_diff(args) -> int:
    from .changedetect import Signature, diff_series

    sigs = [Signature.load(p) for p in args.sigs]
    days = [s.day or Path(p).stem for s, p in zip(sigs, args.sigs)]
    series = diff_series(sigs, days, args.kappa)
    series.to_csv(args.out)
    for d in series.flagged_days():
        print(f"change flagged on {d}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .scenario import ScenarioSpec, generate

    spec = ScenarioSpec.load(args.spec)
    files = generate(spec, args.out_dir)
    log.info("wrote %d days under %s", len(files.packets), files.root)
    return EXIT_OK


def cmd_run(args) -> int:
    from .pipeline import PipelineConfig, run_pipeline, scenario_config

    overrides = {}
    if args.k is not None:
        overrides["k"] = args.k
    if args.seed_given:
        overrides["seed"] = args.seed
    if args.deterministic:
        overrides["deterministic"] = True
    for item in args.set or []:
        key, _, raw = item.partition("=")
        try:
            overrides[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key.strip()] = raw
    if args.config:
        cfg = PipelineConfig.load(args.config)
        for k, v in overrides.items():
            if not hasattr(cfg, k):
                raise ValueError(f"unknown config key {k!r}")
            setattr(cfg, k, v)
        if args.out_dir:
            cfg.out_dir = args.out_dir
    else:
        if not (args.scenario and args.out_dir):
            raise ValueError("run needs --config, or --scenario with --out-dir")
        cfg = scenario_config(args.scenario, args.out_dir, **overrides)
    pipe = run_pipeline(cfg, args.threads)
    if pipe.series is not None:
        for d in pipe.series.flagged_days():
            print(f"change flagged on {d}")
    print(f"manifest: {Path(cfg.out_dir) / 'manifest.json'}")
    return EXIT_OK


# parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    def globals_parser(suppress: bool) -> argparse.ArgumentParser:
        # the subcommand copy must not overwrite values given before the subcommand
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        g = argparse.ArgumentParser(add_help=False)
        g.add_argument("--seed", type=int, default=d(None), help="random seed (default 0)")
        g.add_argument("--threads", type=int, default=d(None), help="BLAS thread limit")
        g.add_argument("--deterministic", action="store_true", default=d(False),
                       help="single-threaded, timestamp-free outputs")
        g.add_argument("-v", "--verbose", action="store_true", default=d(False))
        return g

    common = globals_parser(suppress=True)
    p = argparse.ArgumentParser(prog="darkscope", description=__doc__.splitlines()[0],
                                parents=[globals_parser(suppress=False)])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, parents=[common])
        sp.set_defaults(func=fn)
        return sp

    sp = add("ingest", cmd_ingest, "packet records to darknet events")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--timeout", type=float, default=600.0)
    sp.add_argument("--slack", type=float, default=5.0)
    sp.add_argument("--lanes", type=int, default=1, help="independent caches by source hash")

    sp = add("enrich", cmd_enrich, "events to annotated daily scanner profiles")
    sp.add_argument("--events", required=True)
    sp.add_argument("--geo")
    sp.add_argument("--asn")
    sp.add_argument("--censys")
    sp.add_argument("--out", required=True)

    sp = add("featurize", cmd_featurize, "profiles to a feature matrix")
    sp.add_argument("--profiles", required=True)
    sp.add_argument("--schema", required=True, help="schema JSON: read if it exists, else written")
    sp.add_argument("--refit", action="store_true", help="rebuild the schema even if it exists")
    sp.add_argument("--mode", choices=["onehot", "thermo"], default="onehot")
    sp.add_argument("--u", type=int, default=100)
    sp.add_argument("--bins", type=int, default=10)
    sp.add_argument("--out", required=True)
    sp.add_argument("--interpret-out", help="also write raw numerics + grouping tags for trees")

    sp = add("train", cmd_train, "train the autoencoder")
    sp.add_argument("--features", required=True)
    sp.add_argument("--mode", choices=["mlp", "tmlp"], default="mlp")
    sp.add_argument("--config")
    sp.add_argument("--grid", help="e.g. 'learning_rate=0.001,0.01;latent_dim=10,20'")
    sp.add_argument("--model-out", required=True)
    sp.add_argument("--report")

    sp = add("embed", cmd_embed, "encode features with a trained model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--features", required=True)
    sp.add_argument("--out", required=True)

    sp = add("cluster", cmd_cluster, "k-means on embeddings")
    sp.add_argument("--embeddings", required=True)
    sp.add_argument("--k", type=int, required=True)
    sp.add_argument("--n-init", type=int, default=1)
    sp.add_argument("--out", required=True)
    sp.add_argument("--centroids")

    sp = add("evaluate", cmd_evaluate, "silhouette, Jaccard and stability scores")
    sp.add_argument("--embeddings", required=True)
    sp.add_argument("--labels", required=True)
    sp.add_argument("--external")
    sp.add_argument("--day", help="select rows of a multi-day external file")
    sp.add_argument("--stability", help="e.g. B=50,size=50000")
    sp.add_argument("--out")

    sp = add("ksweep", cmd_ksweep, "cluster quality across K")
    sp.add_argument("--embeddings", required=True)
    sp.add_argument("--klist", required=True)
    sp.add_argument("--external")
    sp.add_argument("--day")
    sp.add_argument("--out", required=True)

    sp = add("tree", cmd_tree, "explain clusters with a decision tree")
    sp.add_argument("--features", help="CSV of raw numerics and grouping tags")
    sp.add_argument("--profiles", help="profiles JSONL (alternative to --features)")
    sp.add_argument("--labels", required=True)
    sp.add_argument("--depth", type=int, default=3)
    sp.add_argument("--mode", choices=["exact", "greedy"], default="exact")
    sp.add_argument("--min-leaf", type=int, default=10)
    sp.add_argument("--max-thresholds", type=int, default=32)
    sp.add_argument("--out", required=True)
    sp.add_argument("--render")

    sp = add("report", cmd_report, "per-cluster summary table")
    sp.add_argument("--labels", required=True)
    sp.add_argument("--profiles", required=True)
    sp.add_argument("--topk", type=int, default=3)
    sp.add_argument("--out", required=True)

    sp = add("dnf", cmd_dnf, "DNF structure of one cluster")
    sp.add_argument("--tree", required=True)
    sp.add_argument("--cluster", type=int, required=True)
    sp.add_argument("--features")
    sp.add_argument("--profiles")
    sp.add_argument("--labels")

    sp = add("signature", cmd_signature, "cluster signature of one day")
    sp.add_argument("--labels", required=True)
    sp.add_argument("--features", required=True)
    sp.add_argument("--space", choices=["input", "latent"], default="input")
    sp.add_argument("--schema", help="schema JSON whose fingerprint is recorded")
    sp.add_argument("--day")
    sp.add_argument("--out", required=True)

    sp = add("diff", cmd_diff, "EMD series over consecutive signatures")
    sp.add_argument("--sigs", nargs="+", required=True)
    sp.add_argument("--kappa", type=float, default=5.0)
    sp.add_argument("--out", required=True)

    sp = add("synth", cmd_synth, "generate a synthetic scenario")
    sp.add_argument("--spec", required=True)
    sp.add_argument("--out-dir", required=True)

    sp = add("run", cmd_run, "end-to-end pipeline")
    sp.add_argument("--config", help="pipeline JSON config")
    sp.add_argument("--scenario", help="directory written by synth")
    sp.add_argument("--out-dir")
    sp.add_argument("--k", type=int)
    sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                    help='override a config field; VALUE is parsed as JSON, e.g. mlp=\'{"epochs": 5}\'')
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    args.seed_given = args.seed is not None
    if args.seed is None:
        args.seed = 0
    if args.deterministic:
        args.threads = 1
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except Exception as exc:
        code = _exit_code(exc)
        print(f"error: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return code


if __name__ == "__main__":
    sys.exit(main())
