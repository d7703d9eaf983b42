"""End-to-end multi-day runs with persisted intermediates and a run manifest.

Per day: ingest -> enrich -> featurize -> embed -> cluster -> evaluate ->
report -> signature; then one diff over all days.  In reference mode the
feature schema and the autoencoder are fitted once on the reference day and
reused, so day-to-day distances reflect traffic rather than representation
drift.  In daily mode the schema is still shared (signatures must stay
comparable) but the autoencoder is retrained every day.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__
from .autoencoder import MlpConfig, MlpModel, embed, save_model, train
from .changedetect import DistanceSeries, Signature, build_signature, diff_series
from .clustering import Clustering, jaccard_pair, kmeans, silhouette
from .enrich import Annotations
from .features import FeatureSchema, aggregate_daily, build_schema, featurize, write_matrix_csv, write_profiles
from .ingest import ingest, read_packets, write_jsonl
from .report import cluster_report

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it and ``cause`` is the original error."""

    def __init__(self, stage: str, cause: BaseException, day: str | None = None):
        where = f"{stage} ({day})" if day else stage
        super().__init__(f"stage {where} failed: {cause}")
        self.stage = stage
        self.day = day
        self.cause = cause


@dataclass
class PipelineConfig:
    packets: list[str]
    out_dir: str
    geo: str | None = None
    asn: str | None = None
    censys: str | None = None
    truth: str | None = None  # optional ground-truth CSV (day, src_ip, archetype)
    timeout: float = 600.0
    slack: float = 5.0
    u: int = 100
    mode: str = "onehot"
    bins: int = 10
    mlp: dict[str, Any] = field(default_factory=dict)  # MlpConfig overrides
    training: str = "reference"  # or "daily"
    reference_day: int = 0
    k: int = 10
    n_init: int = 10
    space: str = "input"
    kappa: float = 5.0
    topk: int = 3
    seed: int = 0
    deterministic: bool = False

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | Path | None = None) -> "PipelineConfig":
        d = dict(d)
        if base_dir is not None:
            # relative paths in a config file are relative to that file
            for key in ("geo", "asn", "censys", "truth", "out_dir"):
                if d.get(key):
                    d[key] = str(Path(base_dir, d[key]))
            d["packets"] = [str(Path(base_dir, p)) for p in d.get("packets", [])]
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown pipeline config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), base_dir=path.parent)

    def validate(self) -> None:
        if not self.packets:
            raise ValueError("no packet files given")
        for p in [*self.packets, self.geo, self.asn, self.censys, self.truth]:
            if p and not Path(p).exists():
                raise FileNotFoundError(f"missing input: {p}")
        if self.training not in ("reference", "daily"):
            raise ValueError(f"unknown training mode {self.training!r}")
        if not 0 <= self.reference_day < len(self.packets):
            raise ValueError("reference_day out of range")
        if self.space not in ("input", "latent"):
            raise ValueError(f"unknown signature space {self.space!r}")


@dataclass
class RunManifest:
    version: str
    config: dict
    seeds: dict
    inputs: dict[str, str]
    outputs: dict[str, dict[str, str]]
    days: list[str]
    signatures: list[str]
    series: str | None
    timing: dict[str, float] | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["timing"] is None:
            del d["timing"]
        return d

    def write(self, path: str | Path) -> None:
        """Atomic write: a temporary sibling file renamed over the target."""
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        d = json.loads(Path(path).read_text())
        d.setdefault("timing", None)
        return cls(**d)


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def write_labels_csv(path: str | Path, ids: Sequence[str], labels: Sequence[int]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["src_ip", "cluster"])
        for ip, lab in zip(ids, labels):
            w.writerow([ip, int(lab)])


def read_labels_csv(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if len(header) < 2:
            raise ValueError(f"{path}: expected columns src_ip,cluster")
        rows = list(reader)
    return [r[0] for r in rows], np.array([int(r[1]) for r in rows], dtype=int)


def read_truth_csv(path: str | Path) -> dict[tuple[str, str], str]:
    with open(path, newline="", encoding="utf-8") as fh:
        return {(r["day"], r["src_ip"]): r["archetype"] for r in csv.DictReader(fh)}


def _thread_limit(threads: int | None):
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=threads)


@dataclass
class DayResult:
    day: str
    profiles: list
    features: np.ndarray
    embeddings: np.ndarray
    clustering: Clustering
    signature: Signature
    metrics: dict


class Pipeline:
    def __init__(self, config: PipelineConfig):
        self.config = config
        self.out = Path(config.out_dir)
        self.outputs: dict[str, dict[str, str]] = {}
        self.timing: dict[str, float] = {}
        self.schema: FeatureSchema | None = None
        self.model: MlpModel | None = None
        self.results: list[DayResult] = []

    def _record(self, stage: str, path: Path) -> None:
        rel = str(path.relative_to(self.out))
        self.outputs.setdefault(stage, {})[rel] = file_digest(path)

    def _stage(self, name: str, fn: Callable, day: str | None = None):
        t0 = time.perf_counter()
        try:
            return fn()
        except StageError:
            raise
        except Exception as exc:  # surfaced with the stage name
            raise StageError(name, exc, day) from exc
        finally:
            key = f"{name}:{day}" if day else name
            self.timing[key] = self.timing.get(key, 0.0) + time.perf_counter() - t0

    # per-day stages ------------------------------------------------------

    def _profiles(self, index: int, annotations: Annotations) -> tuple[str, list]:
        cfg = self.config
        src = cfg.packets[index]
        tag = f"day{index + 1:02d}"
        events = self._stage("ingest", lambda: list(ingest(read_packets(src), cfg.timeout, cfg.slack)), tag)
        if not events:
            raise StageError("ingest", ValueError(f"{src}: no events"), tag)
        profiles = self._stage("enrich", lambda: aggregate_daily(events, annotations), tag)
        days = sorted({p.day for p in profiles})
        # a file may spill past midnight; it is named after its busiest day
        counts = {d: sum(p.day == d for p in profiles) for d in days}
        name = max(days, key=lambda d: (counts[d], -d.toordinal())).isoformat()
        ddir = self.out / "days" / name
        ddir.mkdir(parents=True, exist_ok=True)
        write_jsonl(ddir / "events.jsonl.gz", (e.to_dict() for e in events))
        self._record("ingest", ddir / "events.jsonl.gz")
        write_profiles(ddir / "profiles.jsonl", profiles)
        self._record("enrich", ddir / "profiles.jsonl")
        return name, profiles

    def _fit_model(self, X: np.ndarray, day: str, stage_dir: Path) -> MlpModel:
        cfg = self.config
        mlp = MlpConfig(input_dim=X.shape[1], **{"seed": cfg.seed, **cfg.mlp})
        model, report = self._stage("train", lambda: train(X, mlp), day)
        save_model(model, stage_dir / "model.npz")
        (stage_dir / "train_report.csv").write_text(report.to_csv())
        self._record("train", stage_dir / "model.npz")
        self._record("train", stage_dir / "train_report.csv")
        return model

    def _run_day(self, index: int, name: str, profiles: list, truth: dict | None) -> DayResult:
        cfg = self.config
        ddir = self.out / "days" / name
        fm = self._stage("featurize", lambda: featurize(profiles, self.schema), name)
        fm.to_csv(ddir / "features.csv")
        self._record("featurize", ddir / "features.csv")

        if cfg.training == "daily":
            model = self._fit_model(fm.values, name, ddir)
        else:
            model = self.model
        Z = self._stage("embed", lambda: embed(model, fm.values), name)
        write_matrix_csv(ddir / "embeddings.csv", fm.row_ids, [f"z{i}" for i in range(Z.shape[1])], Z)
        self._record("embed", ddir / "embeddings.csv")

        seed = derive_seed(cfg.seed, index)
        cl = self._stage("cluster", lambda: kmeans(Z, cfg.k, seed=seed, n_init=cfg.n_init), name)
        write_labels_csv(ddir / "labels.csv", fm.row_ids, cl.labels)
        write_matrix_csv(ddir / "centroids.csv", [str(i) for i in range(cfg.k)],
                         [f"z{i}" for i in range(Z.shape[1])], cl.centroids, id_name="cluster")
        self._record("cluster", ddir / "labels.csv")
        self._record("cluster", ddir / "centroids.csv")

        def evaluate():
            m = {"day": name, "n": len(profiles), "k": cfg.k, "inertia": cl.inertia}
            m["silhouette"] = silhouette(Z, cl.labels) if len(np.unique(cl.labels)) > 1 else None
            if truth is not None:
                ext = [truth.get((name, ip), "unknown") for ip in fm.row_ids]
                m["jaccard"] = jaccard_pair(cl.labels, ext)
            return m

        metrics = self._stage("evaluate", evaluate, name)
        (ddir / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True) + "\n")
        self._record("evaluate", ddir / "metrics.json")

        rep = self._stage("report", lambda: cluster_report(cl.labels, profiles, cfg.topk), name)
        rep.to_csv(ddir / "report.csv")
        self._record("report", ddir / "report.csv")

        space_X = fm.values if cfg.space == "input" else Z
        sig = self._stage("signature", lambda: build_signature(
            cl.labels, space_X, cfg.space, self.schema.fingerprint(), name), name)
        sig.save(ddir / "signature.json")
        self._record("signature", ddir / "signature.json")
        return DayResult(name, profiles, fm.values, Z, cl, sig, metrics)

    # driver ---------------------------------------------------------------

    def run(self) -> RunManifest:
        cfg = self.config
        try:
            cfg.validate()
        except Exception as exc:
            raise StageError("config", exc) from exc
        self.out.mkdir(parents=True, exist_ok=True)
        annotations = self._stage("enrich", lambda: Annotations.load(cfg.geo, cfg.asn, cfg.censys))
        truth = read_truth_csv(cfg.truth) if cfg.truth else None

        # reference day first: it fixes the schema (and model)
        order = [cfg.reference_day] + [i for i in range(len(cfg.packets)) if i != cfg.reference_day]
        named: dict[int, tuple[str, list]] = {}
        for i in order:
            named[i] = self._profiles(i, annotations)
            if i == cfg.reference_day:
                ref_name, ref_profiles = named[i]
                self.schema = self._stage(
                    "featurize", lambda: build_schema(ref_profiles, cfg.u, cfg.mode, cfg.bins), ref_name)
                self.schema.save(self.out / "schema.json")
                self._record("featurize", self.out / "schema.json")
                if cfg.training == "reference":
                    X_ref = featurize(ref_profiles, self.schema).values
                    self.model = self._fit_model(X_ref, ref_name, self.out)
        names = [named[i][0] for i in range(len(cfg.packets))]
        if len(set(names)) != len(names):
            raise StageError("ingest", ValueError(f"two packet files map to the same day: {names}"))
        if names != sorted(names):
            raise StageError("ingest", ValueError("packet files must be given in day order"))

        for i in range(len(cfg.packets)):
            name, profiles = named[i]
            self.results.append(self._run_day(i, name, profiles, truth))

        series_rel = None
        if len(self.results) >= 2:
            series: DistanceSeries = self._stage(
                "diff", lambda: diff_series([r.signature for r in self.results], names, cfg.kappa))
            series.to_csv(self.out / "series.csv")
            self._record("diff", self.out / "series.csv")
            series_rel = "series.csv"
            self.series = series
        else:
            self.series = None

        inputs = {}
        for p in [*cfg.packets, cfg.geo, cfg.asn, cfg.censys, cfg.truth]:
            if p:
                inputs[Path(p).name if cfg.deterministic else str(p)] = file_digest(p)
        conf = asdict(cfg)
        if cfg.deterministic:
            # absolute locations differ between otherwise identical runs
            conf["packets"] = [Path(p).name for p in cfg.packets]
            conf["out_dir"] = "."
            for key in ("geo", "asn", "censys", "truth"):
                if conf[key]:
                    conf[key] = Path(conf[key]).name
        manifest = RunManifest(
            version=__version__,
            config=conf,
            seeds={"global": cfg.seed,
                   "cluster": {n: derive_seed(cfg.seed, i) for i, n in enumerate(names)},
                   "model": cfg.mlp.get("seed", cfg.seed)},
            inputs=inputs,
            outputs=self.outputs,
            days=names,
            signatures=[f"days/{n}/signature.json" for n in names],
            series=series_rel,
            timing=None if cfg.deterministic else {k: round(v, 3) for k, v in self.timing.items()},
        )
        manifest.write(self.out / "manifest.json")
        return manifest


def run_pipeline(config: PipelineConfig, threads: int | None = None) -> Pipeline:
    """Run all stages; deterministic runs are forced onto a single BLAS thread."""
    if config.deterministic:
        threads = 1
    pipe = Pipeline(config)
    with _thread_limit(threads):
        pipe.run()
    return pipe


def scenario_config(scenario_dir: str | Path, out_dir: str | Path, **overrides) -> PipelineConfig:
    """Pipeline configuration for the output directory of ``scenario.generate``."""
    root = Path(scenario_dir)
    packets = sorted(str(p) for p in (root / "packets").glob("*.jsonl*"))
    censys = sorted(root.glob("censys-*.jsonl"))
    kw: dict[str, Any] = dict(
        packets=packets, out_dir=str(out_dir),
        geo=str(root / "geo.csv"), asn=str(root / "asn.csv"),
        censys=str(censys[0]) if censys else None,
        truth=str(root / "truth.csv") if (root / "truth.csv").exists() else None,
    )
    kw.update(overrides)
    return PipelineConfig(**kw)
