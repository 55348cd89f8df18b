"""Staged experiment pipeline with on-disk artifacts.

Stages run in order ``ingest -> stl -> pairs -> sample -> predictor ->
search -> baselines -> report``; each reads its predecessors' artifacts
from the artifact directory and fails with :class:`MissingPrerequisiteStage`
when they are absent.  Every JSON artifact starts with a header
``{schema_version, config_hash, seed}``; CSV artifacts carry the same
information on a leading ``#`` line.

All randomness comes from the run's global seed; each stage derives its own
stream from ``sha256(seed, stage name)`` so stages can be rerun on their own.
Trained MTL groups are memoized under ``mtl_cache/``, so reruns with a
warm cache train nothing.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import itertools
import json
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .clustering import GainTransform, Linkage, hierarchical_baseline, kmeans_baseline
from .data import (
    SplitSpec,
    TaskKind,
    TaskSet,
    feature_stats,
    load_taskset,
    load_taskset_json,
    normalize_features,
    save_taskset_json,
    split_taskset,
    synth_taskset,
)
from .errors import ConfigInvalid, MissingPairGain, MissingPrerequisiteStage, TgoptError
from .features import pair_feature_names, pair_features, summarize_tasks, write_feature_table
from .mtl import MtlArch, MtlResult, _classification_metrics, group_key, loss_kind_for, train_mtl
from .nas import ArchCandidate, RecordSet, SearchSpace, nas_search
from .nn import TrainConfig, forward
from .partitions import Partition, sample_uniform_partition
from .predictor import (
    AffinityContext,
    PredictorConfig,
    PredictorModel,
    train_predictor,
    write_train_log,
)
from .search import (
    EvalCache,
    GainSurrogate,
    MtlTrainer,
    SearchConfig,
    evaluate_partition,
    random_search_baseline,
    search_with_predictor,
    write_result,
)
from .stl import StlResult, run_stl

SCHEMA_VERSION = 1
STAGES = ("ingest", "stl", "pairs", "sample", "predictor", "search", "baselines", "report")
SAMPLE_PRESETS = {"school": 65, "chemical": 200, "landmine": 230, "parkinson": 150}
REPORT_COLUMNS = ("method", "total_loss_mean", "total_loss_std", "repeats", "mtl_trainings",
                  "error_rate", "auc", "detail")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

DEFAULT_CONFIG = {
    "dataset": {
        "path": None,
        "synthetic": None,
        "task_col": "task_id",
        "target_col": "target",
        "kind": None,
        "split": {"train": 0.70, "val": 0.15, "test": 0.15},
        "normalize": True,
    },
    "model": {
        "mtl": MtlArch().to_json(),
        "epochs": 100,
        "batch_size": None,
        "predictor": PredictorConfig().to_json(),
        "hyper_search": {"enabled": False, "iters": 50, "P": 20.0, "omega": 1e-5, "epochs": 100},
    },
    "sample": {"size": None, "preset": None},
    "search": {
        "gamma_max": 500,
        "gamma_retrain": 5,
        "K": None,
        "pi_t_start": 0.1,
        "pi_t_end": 0.01,
        "budget_mtl": None,
        "start_rank": 1,
    },
    "baselines": {
        "random_search": True,
        "hierarchical": True,
        "transforms": ["exponential", "logistic"],
        "linkages": ["single", "average", "complete"],
        "k_max": 8,
        "kmeans": True,
    },
    "report": {"repeats": 5},
    "artifacts": "artifacts",
    "seed": 0,
}


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigInvalid(f"unknown config key {where}{k}")
        if isinstance(base[k], dict) and isinstance(v, dict) and k not in ("mtl", "predictor", "synthetic"):
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass(frozen=True)
class RunConfig:
    doc: dict
    base_dir: Path = field(default=Path("."), compare=False)

    @classmethod
    def from_dict(cls, doc: dict, base_dir=".") -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigInvalid("config must be a JSON object")
        merged = _merge(DEFAULT_CONFIG, doc)
        cfg = cls(merged, Path(base_dir))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigInvalid(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigInvalid(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(doc, path.parent)

    def with_overrides(self, seed=None, budget=None, start_rank=None) -> "RunConfig":
        doc = copy.deepcopy(self.doc)
        if seed is not None:
            doc["seed"] = int(seed)
        if budget is not None:
            doc["search"]["budget_mtl"] = int(budget)
        if start_rank is not None:
            doc["search"]["start_rank"] = int(start_rank)
        cfg = RunConfig(doc, self.base_dir)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        ds = self.doc["dataset"]
        if (ds["path"] is None) == (ds["synthetic"] is None):
            raise ConfigInvalid("dataset needs exactly one of 'path' or 'synthetic'")
        if ds["path"] is not None and not self.dataset_path.exists():
            raise ConfigInvalid(f"dataset file not found: {self.dataset_path}")
        try:
            self.split_spec()
            self.arch()
            self.train_config()
            self.predictor_config()
            self.search_config(0)
        except TgoptError as exc:
            raise ConfigInvalid(str(exc)) from None
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigInvalid(f"invalid config value: {exc}") from None
        if int(self.doc["report"]["repeats"]) < 1:
            raise ConfigInvalid("report.repeats must be >= 1")
        if not isinstance(self.doc["seed"], int) or not 0 <= self.doc["seed"] < 2 ** 64:
            raise ConfigInvalid("seed must be a 64-bit non-negative integer")

    # typed views
    @property
    def seed(self) -> int:
        return int(self.doc["seed"])

    @property
    def dataset_path(self) -> Path:
        return (self.base_dir / self.doc["dataset"]["path"]).resolve()

    @property
    def artifact_dir(self) -> Path:
        return (self.base_dir / self.doc["artifacts"]).resolve()

    def split_spec(self) -> SplitSpec:
        s = self.doc["dataset"]["split"]
        return SplitSpec(s["train"], s["val"], s["test"], derive_seed(self.seed, "split"))

    def arch(self) -> MtlArch:
        return MtlArch.from_json({**MtlArch().to_json(), **self.doc["model"]["mtl"]})

    def train_config(self, kind: TaskKind = TaskKind.REGRESSION) -> TrainConfig:
        m = self.doc["model"]
        return TrainConfig(epochs=int(m["epochs"]), batch_size=m["batch_size"],
                           seed=derive_seed(self.seed, "train"), loss_kind=loss_kind_for(kind))

    def predictor_config(self) -> PredictorConfig:
        doc = {**PredictorConfig().to_json(), **self.doc["model"]["predictor"]}
        doc["seed"] = derive_seed(self.seed, "predictor") % (2 ** 32)
        return PredictorConfig.from_json(doc)

    def search_config(self, repeat: int) -> SearchConfig:
        s = dict(self.doc["search"])
        return SearchConfig(seed=derive_seed(self.seed, "search", repeat), **s)

    def sample_size(self, n: int) -> int:
        s = self.doc["sample"]
        if s["size"] is not None:
            return int(s["size"])
        if s["preset"] is not None:
            try:
                return SAMPLE_PRESETS[s["preset"].lower()]
            except KeyError:
                raise ConfigInvalid(f"unknown sample preset {s['preset']!r}") from None
        return max(50, math.ceil(1.5 * n))

    def config_hash(self) -> str:
        """Hash of everything that affects results (not the artifact location)."""
        doc = {k: v for k, v in self.doc.items() if k != "artifacts"}
        if doc["dataset"]["path"] is not None:
            doc = copy.deepcopy(doc)
            doc["dataset"]["path"] = _file_digest(self.dataset_path)
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def _file_digest(path: Path) -> str:
    return "sha256:" + hashlib.sha256(path.read_bytes()).hexdigest()


def derive_seed(seed: int, stage: str, *extra) -> int:
    """64-bit stage seed: ``sha256("<seed>/<stage>[/extra...]")``."""
    text = "/".join([str(int(seed)), stage, *map(str, extra)])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def plan_pairs(ids: Sequence[str]) -> list:
    """Every unordered task pair, in sorted order."""
    return list(itertools.combinations(sorted(ids), 2))


def n_pairs(n: int) -> int:
    return n * (n - 1) // 2


# ---------------------------------------------------------------------------
# artifact I/O
# ---------------------------------------------------------------------------


class MtlMemo:
    """Directory-backed map GroupKey -> MtlResult (``mtl_cache/<sha256>.json``)."""

    def __init__(self, root: Path, header: dict):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.header = header
        self._mem: dict = {}

    def _path(self, key) -> Path:
        h = hashlib.sha256(json.dumps([self.header["config_hash"], list(key)]).encode()).hexdigest()
        return self.root / f"{h}.json"

    def get(self, key, default=None):
        key = tuple(key)
        if key in self._mem:
            return self._mem[key]
        p = self._path(key)
        if p.exists():
            doc = json.loads(p.read_text())
            if doc.get("config_hash") == self.header["config_hash"]:
                res = MtlResult.from_json(doc["result"])
                self._mem[key] = res
                return res
        return default

    def __contains__(self, key):
        return self.get(key) is not None

    def __setitem__(self, key, res: MtlResult):
        key = tuple(key)
        self._mem[key] = res
        _atomic_write(self._path(key), json.dumps({**self.header, "result": res.to_json()}))


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _train_group(args):
    splits, arch, config, augment = args
    return train_mtl(splits, arch, config, augment_size=augment)


class Pipeline:
    """Runs stages for one :class:`RunConfig` inside its artifact directory."""

    def __init__(self, config: RunConfig, jobs: int = 1, log=print):
        self.config = config
        self.jobs = max(1, int(jobs))
        self.dir = config.artifact_dir
        self.dir.mkdir(parents=True, exist_ok=True)
        self.header = {"schema_version": SCHEMA_VERSION, "config_hash": config.config_hash(),
                       "seed": config.seed}
        self.log = log or (lambda *a, **k: None)
        self._ts = None
        self._splits = None
        self._trainer = None

    # -- artifact helpers -------------------------------------------------
    def path(self, name: str) -> Path:
        return self.dir / name

    def write_json(self, name: str, body: dict) -> None:
        _atomic_write(self.path(name), json.dumps({**self.header, **body}, indent=1, sort_keys=True) + "\n")

    def read_json(self, name: str, stage: str) -> dict:
        p = self.path(name)
        if not p.exists():
            raise MissingPrerequisiteStage(f"{name} not found; run the '{stage}' stage first")
        doc = json.loads(p.read_text())
        if doc.get("config_hash") != self.header["config_hash"]:
            raise MissingPrerequisiteStage(
                f"{name} was produced with a different configuration; rerun the '{stage}' stage")
        return doc

    def csv_header(self) -> str:
        return "# " + " ".join(f"{k}={v}" for k, v in self.header.items())

    # -- shared state -------------------------------------------------------
    @property
    def taskset(self) -> TaskSet:
        if self._ts is None:
            self.read_json("ingest.json", "ingest")
            self._ts = load_taskset_json(self.path("taskset.json"))
        return self._ts

    @property
    def splits(self) -> dict:
        if self._splits is None:
            self._splits = split_taskset(self.taskset, self.config.split_spec())
        return self._splits

    @property
    def kind(self) -> TaskKind:
        return self.taskset.tasks[0].kind

    @property
    def train_config(self) -> TrainConfig:
        return self.config.train_config(self.kind)

    @property
    def trainer(self) -> MtlTrainer:
        if self._trainer is None:
            memo = MtlMemo(self.path("mtl_cache"), self.header)
            self._trainer = MtlTrainer(self.splits, self.config.arch(), self.train_config, memo)
        return self._trainer

    def stl_results(self) -> dict:
        doc = self.read_json("stl_results.json", "stl")
        return {t["task_id"]: StlResult.from_json(t) for t in doc["tasks"]}

    def stl_losses(self) -> dict:
        return {k: v.final_loss for k, v in self.stl_results().items()}

    def _train_many(self, groups) -> int:
        """Train missing groups (in parallel with ``jobs > 1``); returns new trainings."""
        tr = self.trainer
        todo = [group_key(g) for g in groups if group_key(g) not in tr.memo]
        if self.jobs > 1 and len(todo) > 1:
            args = [([tr.splits[t] for t in g], tr.arch, tr.config, tr.augment_size) for g in todo]
            with ProcessPoolExecutor(self.jobs) as ex:
                for g, res in zip(todo, ex.map(_train_group, args)):
                    tr.memo[g] = res
            tr.calls += len(todo)
        else:
            for g in todo:
                tr.result(g)
        return len(todo)

    # -- stages ---------------------------------------------------------------
    def run(self, stage: str) -> dict:
        if stage not in STAGES:
            raise ConfigInvalid(f"unknown stage {stage!r}")
        return getattr(self, f"stage_{stage}")()

    def stage_ingest(self) -> dict:
        ds = self.config.doc["dataset"]
        truth = None
        if ds["synthetic"] is not None:
            syn = dict(ds["synthetic"])
            ts, truth = synth_taskset(int(syn["n_tasks"]), int(syn["n_clusters"]), int(syn["d"]),
                                      int(syn["samples_per_task"]), float(syn["noise"]),
                                      int(syn.get("seed", 7)))
        else:
            kind = None if ds["kind"] is None else TaskKind(ds["kind"])
            ts = load_taskset(self.config.dataset_path, ds["task_col"], ds["target_col"], kind)
        stats = feature_stats(ts)
        if ds["normalize"]:
            ts, stats = normalize_features(ts)
        save_taskset_json(ts, self.path("taskset.json"))
        body = {"n_tasks": len(ts.tasks), "d": ts.tasks[0].d, "kind": ts.tasks[0].kind.value,
                "norm_stats": stats.to_json(),
                "true_partition": None if truth is None else truth.to_json()}
        self.write_json("ingest.json", body)
        self._ts, self._splits = ts, None
        self.log(f"ingest: {len(ts.tasks)} tasks, d={ts.tasks[0].d}, kind={ts.tasks[0].kind.value}")
        return body

    def stage_stl(self) -> dict:
        spec = self.config.arch().stl_spec(self.taskset.tasks[0].d)
        cfg = self.train_config
        docs, total = [], 0.0
        for t in self.taskset.ids:
            spl = self.splits[t]
            r = run_stl(spl, spec, cfg)
            doc = r.to_json()
            if self.kind is TaskKind.CLASSIFICATION:
                pred = forward(spec, r.params, spl.test.features)
                doc["test_metrics"] = _classification_metrics(pred, spl.test.targets)
            docs.append(doc)
            total += r.final_loss
        self.write_json("stl_results.json", {"tasks": docs})
        self.log(f"stl: {len(docs)} tasks, total loss {total:.6g}")
        return {"total_loss": total}

    def stage_pairs(self) -> dict:
        stl = self.stl_results()
        ids = sorted(self.taskset.ids)
        pairs = plan_pairs(ids)
        self.log(f"pairs: {len(pairs)} planned pairwise trainings")
        new = self._train_many(pairs)
        tr = self.trainer
        n = len(ids)
        pos = {t: k for k, t in enumerate(ids)}
        gains = np.full((n, n), np.nan)
        task_loss = np.full((n, n), np.nan)
        np.fill_diagonal(gains, 0.0)
        for a, b in pairs:
            res = tr.result((a, b))
            i, j = pos[a], pos[b]
            gains[i, j] = gains[j, i] = 1.0 - res.total_loss / (stl[a].final_loss + stl[b].final_loss)
            task_loss[i, j] = res.per_task_loss[a]
            task_loss[j, i] = res.per_task_loss[b]
        # the all-task model provides lookahead affinity and task vectors
        key = tuple(ids)
        all_res = tr.memo.get(key)
        if all_res is None or all_res.z_matrix is None:
            all_res = train_mtl([self.splits[t] for t in ids], tr.arch, tr.config, compute_affinity=True)
            tr.memo[key] = all_res
            tr.calls += 1
            new += 1
        V = np.stack([all_res.task_vectors[t] for t in ids])
        wdots = V @ V.T
        Z = 0.5 * (all_res.z_matrix + all_res.z_matrix.T)
        self.write_json("pairs.json", {
            "ids": ids, "gains": gains.tolist(), "task_losses": task_loss.tolist(),
            "z_matrix": all_res.z_matrix.tolist(), "wdots": wdots.tolist(),
            "all_task_loss": all_res.total_loss,
        })
        self._write_pair_features(ids, stl, Z, wdots)
        self.log(f"pairs: {new} new trainings")
        return {"planned": len(pairs), "new_trainings": new}

    def _write_pair_features(self, ids, stl, Z, wdots):
        norm = feature_stats(TaskSet(tuple(self.splits[t].train for t in ids)))
        cache: dict = {}
        rows = []
        for a, b in plan_pairs(ids):
            i, j = ids.index(a), ids.index(b)
            rows.append(pair_features(self.splits[a].train, self.splits[b].train, stl[a], stl[b],
                                      z=Z[i, j], w_dot=wdots[i, j], norm=norm,
                                      seed=derive_seed(self.config.seed, "features") % 2 ** 32,
                                      within_cache=cache))
        path = self.path("pair_features.csv")
        write_feature_table(rows, path)
        text = path.read_text()
        path.write_text(self.csv_header() + "\n" + text)
        names = list(rows[0].values)
        self.write_json("features_schema.json", {"features": names, "count": len(names)})

    def pair_data(self) -> dict:
        doc = self.read_json("pairs.json", "pairs")
        return {k: (np.asarray(v, dtype=float) if k in ("gains", "task_losses", "z_matrix", "wdots") else v)
                for k, v in doc.items()}

    def context(self) -> AffinityContext:
        pd = self.pair_data()
        ids = pd["ids"]
        summary = summarize_tasks([self.splits[t].train for t in ids],
                                  seed=derive_seed(self.config.seed, "features") % 2 ** 32)
        return AffinityContext(self.stl_losses(), pd["gains"], pd["wdots"], summary)

    def base_cache(self) -> EvalCache:
        """Cache holding the pairs and the all-task model, counted as trainings."""
        cache = EvalCache(self.stl_losses())
        pd = self.pair_data()
        tr = self.trainer
        for g in [*plan_pairs(pd["ids"]), tuple(pd["ids"])]:
            res = tr.result(g)
            cache.put(g, res.total_loss, res.per_task_loss)
        return cache

    def stage_sample(self) -> dict:
        ids = sorted(self.taskset.ids)
        size = self.config.sample_size(len(ids))
        rng = np.random.default_rng(derive_seed(self.config.seed, "sample"))
        sample = [sample_uniform_partition(ids, rng) for _ in range(size)]
        groups = {g for p in sample for g in p.groups if len(g) > 1}
        new = self._train_many(sorted(groups))
        cache = self.base_cache()
        losses = [evaluate_partition(p, cache, self.trainer) for p in sample]
        self.write_json("sample.json", {"partitions": [p.to_json() for p in sample], "losses": losses,
                                        "mtl_trainings": cache.fresh})
        self.log(f"sample: {size} partitions, {new} new trainings, best loss {min(losses):.6g}")
        return {"size": size, "new_trainings": new}

    def sample_data(self) -> tuple:
        doc = self.read_json("sample.json", "sample")
        return [Partition.from_json(p) for p in doc["partitions"]], doc["losses"]

    def stage_predictor(self) -> dict:
        ctx = self.context()
        sample, _ = self.sample_data()
        cache = self.base_cache()
        for p in sample:
            evaluate_partition(p, cache, self.trainer)
        records = [ctx.record(g, cache.loss(g)) for g in sorted(cache.groups(3))]
        pcfg = self.config.predictor_config()
        hs = self.config.doc["model"]["hyper_search"]
        if hs["enabled"]:
            pcfg = self._tune_predictor(records, pcfg, hs)
        model = train_predictor(records, pcfg)
        doc = model.to_json()
        self.write_json("predictor.json", {**doc, "config": pcfg.to_json()})
        log = self.path("predictor_log.csv")
        write_train_log(model, log)
        log.write_text(self.csv_header() + "\n" + log.read_text())
        self.log(f"predictor: trained on {model.trained_on} groups")
        return {"records": model.trained_on}

    def _tune_predictor(self, records, pcfg: PredictorConfig, hs: dict) -> PredictorConfig:
        rng = np.random.default_rng(derive_seed(self.config.seed, "hyper_search"))
        order = rng.permutation(len(records))
        cut = max(1, int(0.8 * len(records)))
        rs = RecordSet.from_records(records)
        train_set = RecordSet(rs.X[order[:cut]], rs.y[order[:cut]], rs.names)
        val_set = RecordSet(rs.X[order[cut:]], rs.y[order[cut:]], rs.names)
        start = ArchCandidate(pcfg.hidden, pcfg.learning_rate, pcfg.hidden_activation, "linear",
                              tuple(pcfg.feature_names or rs.names))
        space = SearchSpace(features=rs.names)
        res = nas_search(start, space, int(hs["iters"]), float(hs["P"]), float(hs["omega"]), rng,
                         train_set, val_set, epochs=int(hs["epochs"]), seed=pcfg.seed)
        res.write_log(self.path("nas_log.csv"))
        self.write_json("nas_best.json", {"candidate": res.best.to_json(), "score": res.best_score})
        return PredictorConfig(res.best.hidden, res.best.hidden_activation, res.best.learning_rate,
                               pcfg.epochs, pcfg.seed, pcfg.warm_start, res.best.features)

    def load_predictor(self) -> tuple:
        doc = self.read_json("predictor.json", "predictor")
        return PredictorModel.from_json(doc), PredictorConfig.from_json(doc["config"])

    def stage_search(self) -> dict:
        ctx = self.context()
        sample, _ = self.sample_data()
        model, pcfg = self.load_predictor()
        runs = []
        for r in range(int(self.config.doc["report"]["repeats"])):
            cache = self.base_cache()
            surrogate = GainSurrogate(ctx, pcfg, model)
            scfg = self.config.search_config(r)
            trace = self.path("trace.jsonl") if r == 0 else None
            res = search_with_predictor(sample, cache, self.trainer, scfg, surrogate, trace)
            runs.append({"repeat": r, "best_partition": res.best.to_json(), "total_loss": res.best_loss,
                         "mtl_trainings": res.fresh_trainings})
            if r == 0:
                write_result(res, self.path("result.json"), self.header)
                self._prepend_trace_header()
            self.log(f"search[{r}]: best {res.best_loss:.6g} with {res.fresh_trainings} trainings")
        self.write_json("search_runs.json", {"runs": runs})
        return runs[0]

    def _prepend_trace_header(self):
        p = self.path("trace.jsonl")
        p.write_text(json.dumps(self.header, sort_keys=True) + "\n" + p.read_text())

    def stage_baselines(self) -> dict:
        ids = sorted(self.taskset.ids)
        stl = self.stl_losses()
        pd = self.pair_data()
        tr = self.trainer
        bl = self.config.doc["baselines"]
        out = {}
        singles = Partition.singletons(ids)
        out["STL"] = [self._row(singles, 0)]
        summary = pairwise_summary(pd["task_losses"], ids)
        out["PairwiseAll"] = [{"total_loss": summary["all_pairs_total"], "mtl_trainings": n_pairs(len(ids))}]
        out["PairwiseOptimal"] = [{"total_loss": summary["optimal_pairs_total"],
                                   "mtl_trainings": n_pairs(len(ids))}]
        out["SimpleMTL"] = [self._row(Partition((tuple(ids),)), 1)]
        k_hi = min(len(ids) - 1, int(bl["k_max"]))
        if bl["hierarchical"] and k_hi >= 2:
            rows = []
            for tf in bl["transforms"]:
                for lk in bl["linkages"]:
                    for k in range(2, k_hi + 1):
                        p = hierarchical_baseline(pd["gains"], ids, GainTransform(tf), Linkage(lk), k)
                        row = self._row(p, None)
                        row["detail"] = f"{tf}/{lk}/k={k}"
                        rows.append(row)
            out["Hierarchical"] = rows
        if bl["kmeans"] and k_hi >= 2:
            key = tuple(ids)
            vecs = tr.result(key).task_vectors
            km = kmeans_baseline(vecs, range(2, k_hi + 1), seed=derive_seed(self.config.seed, "kmeans") % 2 ** 32)
            row = self._row(km.best, None)
            row["detail"] = f"elbow k={km.elbow_k}"
            out["KMeans"] = [row]
        runs = self.read_json("search_runs.json", "search")["runs"]
        if bl["random_search"]:
            rows = []
            for run in runs:
                cache = EvalCache(stl)
                seed = derive_seed(self.config.seed, "random_search", run["repeat"])
                res = random_search_baseline(ids, cache, tr, run["mtl_trainings"], seed)
                rows.append({"total_loss": res.best_loss, "mtl_trainings": res.fresh_trainings,
                             "partition": res.best.to_json(),
                             **self._metrics(res.best)})
            out["RandomSearch"] = rows
        out["Ours"] = [{"total_loss": r["total_loss"], "mtl_trainings": r["mtl_trainings"],
                        "partition": r["best_partition"],
                        **self._metrics(Partition.from_json(r["best_partition"]))} for r in runs]
        truth = self.read_json("ingest.json", "ingest").get("true_partition")
        if truth is not None:
            out["TruePartition"] = [self._row(Partition.from_json(truth), None)]
        self.write_json("baselines.json", {"methods": out})
        self.log("baselines: " + ", ".join(f"{k}={np.mean([r['total_loss'] for r in v]):.4g}"
                                           for k, v in out.items()))
        return out

    def _row(self, p: Partition, trainings) -> dict:
        cache = EvalCache(self.stl_losses())
        loss_value = evaluate_partition(p, cache, self.trainer)
        return {"total_loss": loss_value, "mtl_trainings": cache.fresh if trainings is None else trainings,
                "partition": p.to_json(), **self._metrics(p)}

    def _metrics(self, p: Partition) -> dict:
        """Mean per-task error rate and AUC for classification data."""
        if self.kind is not TaskKind.CLASSIFICATION:
            return {}
        errs, aucs = [], []
        stl_docs = {d["task_id"]: d for d in self.read_json("stl_results.json", "stl")["tasks"]}
        for g in p.groups:
            for t in g:
                if len(g) == 1:
                    m = stl_docs[t].get("test_metrics", {})
                else:
                    m = self.trainer.result(g).per_task_metrics.get(t, {})
                errs.append(m.get("error_rate"))
                if m.get("auc") is not None:
                    aucs.append(m["auc"])
        errs = [e for e in errs if e is not None]
        return {"error_rate": float(np.mean(errs)) if errs else None,
                "auc": float(np.mean(aucs)) if aucs else None}

    def stage_report(self) -> dict:
        methods = self.read_json("baselines.json", "baselines")["methods"]
        rows = []
        for name, runs in methods.items():
            losses = [r["total_loss"] for r in runs]
            mean, std = mean_std(losses)
            errs = [r.get("error_rate") for r in runs if r.get("error_rate") is not None]
            aucs = [r.get("auc") for r in runs if r.get("auc") is not None]
            detail = ""
            if name == "Hierarchical":
                best = min(runs, key=lambda r: r["total_loss"])
                detail = f"mean over {len(runs)} partitions; best {best['total_loss']:.6g} ({best['detail']})"
            elif "detail" in runs[0]:
                detail = runs[0]["detail"]
            rows.append({
                "method": name, "total_loss_mean": mean, "total_loss_std": std,
                "repeats": len(runs) if name != "Hierarchical" else 1,
                "mtl_trainings": max(r["mtl_trainings"] for r in runs),
                "error_rate": float(np.mean(errs)) if errs else None,
                "auc": float(np.mean(aucs)) if aucs else None,
                "detail": detail,
            })
        emit_report(rows, self.path("report.csv"), self.path("report.md"), header=self.csv_header())
        self.log(f"report: {len(rows)} methods written")
        return {"rows": rows}


# ---------------------------------------------------------------------------
# report helpers
# ---------------------------------------------------------------------------


def pairwise_summary(task_losses: np.ndarray, ids: Sequence[str]) -> dict:
    """Per task, the mean and the minimum of its losses over all pairings.

    ``task_losses[i, j]`` is task ``i``'s loss in the model trained with
    task ``j``.
    """
    L = np.asarray(task_losses, dtype=float)
    n = len(ids)
    if L.shape != (n, n):
        raise MissingPairGain("pair loss matrix has the wrong shape")
    off = ~np.eye(n, dtype=bool)
    if np.any(~np.isfinite(L[off])):
        raise MissingPairGain("pair loss matrix has missing entries")
    rows = [L[i, off[i]] for i in range(n)]
    return {"all_pairs_total": float(sum(r.mean() for r in rows)),
            "optimal_pairs_total": float(sum(r.min() for r in rows))}


def mean_std(values) -> tuple:
    """Mean and population standard deviation."""
    v = np.asarray(values, dtype=float)
    return float(v.mean()), float(v.std())


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return f"{x:.6g}"
    return str(x)


def emit_report(rows: Sequence[dict], csv_path, md_path, header: str | None = None) -> None:
    """CSV with :data:`REPORT_COLUMNS` plus a Markdown table (best loss in bold)."""
    if not rows:
        raise ValueError("report needs at least one method row")
    with Path(csv_path).open("w", newline="") as fh:
        if header:
            fh.write(header + "\n")
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r.get(c)) if c != "method" else r["method"] for c in REPORT_COLUMNS])
    best = min(range(len(rows)), key=lambda k: rows[k]["total_loss_mean"])
    lines = []
    if header:
        lines += [f"<!-- {header[2:]} -->", ""]
    lines += ["| Method | Total loss (mean ± std) | Repeats | MTL trainings | Error rate | AUC | Detail |",
              "|---|---|---|---|---|---|---|"]
    for k, r in enumerate(rows):
        cell = f"{r['total_loss_mean']:.4f} ± {r['total_loss_std']:.4f}"
        name = r["method"]
        if k == best:
            cell, name = f"**{cell}**", f"**{name}**"
        lines.append(f"| {name} | {cell} | {r.get('repeats', '')} | {r.get('mtl_trainings', '')} | "
                     f"{_fmt(r.get('error_rate'))} | {_fmt(r.get('auc'))} | {r.get('detail', '')} |")
    Path(md_path).write_text("\n".join(lines) + "\n")
