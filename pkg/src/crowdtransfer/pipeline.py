"""End-to-end experiment runs and the ablation driver."""

from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import crowdtrain as ct
from . import distill as ds
from . import graphtransfer as gt
from . import io
from . import transition as tr
from .config import ExperimentConfig
from .crowdsim import ConfigError, simulate
from .distill import PipelineError

TRANSITION_METHODS = ("taidtm", "taidtm_ft", "global_only")

STAGES = {
    "taidtm": ["simulate", "warmup", "distill", "global", "finetune", "graph", "gcn", "classifier", "evaluate"],
    "taidtm_ft": ["simulate", "warmup", "distill", "global", "finetune", "classifier", "evaluate"],
    "global_only": ["simulate", "warmup", "distill", "global", "classifier", "evaluate"],
    "mv": ["simulate", "aggregate_mv", "classifier", "evaluate"],
    "ds": ["simulate", "aggregate_ds", "classifier", "evaluate"],
}
STAGE_ORDER = ("simulate", "warmup", "distill", "global", "finetune", "graph", "gcn",
               "aggregate_mv", "aggregate_ds", "classifier", "evaluate")


def stage_plan(methods):
    """Ordered union of the stages the given methods need."""
    needed = {s for m in methods for s in STAGES[m]}
    return [s for s in STAGE_ORDER if s in needed]


@dataclass
class Upstream:
    crowd: object
    pool: object
    distilled: object = None
    global_net: object = None
    individual: object = None
    graph: object = None
    mapper: object = None


@contextmanager
def stage(name):
    """Re-raise pipeline and numerical failures with the failing stage's name."""
    try:
        yield
    except (PipelineError, gt.NumericalError) as exc:
        raise type(exc)(f"stage {name!r} failed: {exc}") from exc


def prepare(cfg: ExperimentConfig, methods):
    """Run the shared stages once for all ``methods``."""
    plan = stage_plan(methods)
    d, nz, dc, tc, gc = cfg.data, cfg.noise, cfg.distill, cfg.transition, cfg.graph
    seed = cfg.seed
    with stage("simulate"):
        crowd, pool = simulate(d.n, d.d, d.C, d.class_sep, nz.R, nz.G, nz.rho, nz.rho_max,
                               nz.mean_annotations, seed)
    up = Upstream(crowd, pool)
    if "distill" not in plan:
        return up
    with stage("warmup"):
        warm = ds.train_warmup(crowd, epochs=dc.warmup_epochs, lr=dc.warmup_lr,
                               batch_size=tc.batch_size, seed=seed)
    with stage("distill"):
        up.distilled = ds.collect_distilled(warm, crowd, dc.threshold, dc.floor)
    with stage("global"):
        up.global_net = tr.train_global(up.distilled, dim=d.d, epochs=tc.global_epochs, lr=tc.global_lr,
                                        batch_size=tc.batch_size, widths=tc.widths, latent=tc.latent,
                                        seed=seed)
    if "finetune" in plan:
        with stage("finetune"):
            up.individual = tr.finetune_all(up.global_net, up.distilled, epochs=tc.finetune_epochs,
                                            lr=tc.finetune_lr, seed=seed)
    if "graph" in plan:
        with stage("graph"):
            up.graph = gt.build_graph(up.individual.thetas, gc.k, cfg.svd_rank, gc.norm)
    if "gcn" in plan:
        with stage("gcn"):
            h = up.global_net.latent_dim
            base = up.global_net.theta if gc.residual else None
            mapper = gt.init_gcn(nz.R, (h + 1) * d.C**2, gc.hidden, gc.final_activation, seed, base)
            aug = up.global_net.augmented_latent(up.distilled.features)
            up.mapper = gt.train_gcn(mapper, up.graph, up.distilled, aug, epochs=gc.epochs, lr=gc.lr,
                                     batch_size=gc.batch_size, seed=seed)
    return up


def head_source(method, up):
    g = up.global_net
    if method == "global_only":
        return ct.HeadSource("global", g, np.repeat(g.theta[None], up.crowd.num_annotators, axis=0))
    if method == "taidtm_ft":
        return ct.HeadSource("individual", g, up.individual.thetas)
    if method == "taidtm":
        heads = gt.gcn_heads(up.mapper, up.graph.A_hat, g.latent_dim, up.crowd.num_classes)
        return ct.HeadSource("interdependent", g, heads, up.mapper, up.graph.A_hat)
    raise ValueError(f"{method!r} has no transition heads")


class ConfusionSource(ct.HeadSource):
    """Instance-independent per-annotator confusion matrices from DS-EM."""

    def __init__(self, confusion):
        super().__init__("ds", thetas=confusion)

    def transitions(self, x, annotators, num_classes):
        return self.thetas[annotators]


def _classifier_kwargs(cfg):
    c = cfg.classifier
    return dict(epochs=c.epochs, lr=c.lr, weight_decay=c.weight_decay, batch_size=c.batch_size,
                hidden=c.hidden, lr_milestones=c.lr_milestones, seed=cfg.seed)


def run_method(cfg, method, up):
    crowd = up.crowd
    metrics = {"method": method}
    if method in TRANSITION_METHODS:
        source = head_source(method, up)
        net, source = ct.train_classifier(crowd, source, joint_revision=cfg.classifier.joint_revision
                                          and method == "taidtm", **_classifier_kwargs(cfg))
        metrics["transition_error"] = ct.transition_error(source, up.pool, crowd, seed=cfg.seed)
        metrics["true_row_error"] = ct.true_row_error(source, up.pool, crowd, seed=cfg.seed)
    else:
        if method == "mv":
            agg = ct.majority_vote_all(crowd)
        else:
            model, agg = ct.dawid_skene_em(crowd)
            metrics["transition_error"] = ct.transition_error(ConfusionSource(model.confusion), up.pool,
                                                              crowd, seed=cfg.seed)
            metrics["em_iterations"] = model.iterations
        net = ct.train_on_labels(crowd.base.features[agg.instance_ids], agg.labels, crowd.num_classes,
                                 **_classifier_kwargs(cfg))
        metrics["aggregation_accuracy"] = float(np.mean(agg.labels == crowd.base.labels[agg.instance_ids]))
    metrics["test_accuracy"] = ct.accuracy(net, crowd.base)
    return metrics, net


def _shared_metrics(up, cfg):
    out = {"num_annotations": int(len(up.crowd.noisy_labels)),
           "mean_annotations": float(up.crowd.mean_annotations)}
    if up.distilled is not None:
        dist = up.distilled
        out["distilled"] = int(dist.m)
        out["distilled_purity"] = float(np.mean(dist.y_star == up.crowd.base.labels[dist.instance_ids]))
        out["fallback_annotators"] = int(dist.insufficient.sum())
        m_j = dist.m_j
        out["m_j"] = {"min": int(m_j.min()), "median": float(np.median(m_j)), "max": int(m_j.max())}
    if up.graph is not None:
        out["same_group_edge_fraction"] = gt.same_group_edge_fraction(up.graph.A_star, up.pool.group_of)
    return out


def run_methods(cfg, methods):
    """Run several methods on one simulated crowd, sharing upstream stages."""
    up = prepare(cfg, methods)
    results = {m: run_method(cfg, m, up)[0] for m in methods}
    return {"shared": _shared_metrics(up, cfg), "methods": results}


def dump_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def run_dir(cfg, out_root):
    return os.path.join(out_root, cfg.config_hash(), cfg.method, f"seed_{cfg.seed}")


def run_pipeline(cfg, out_root="out", dry_run=False):
    """Run ``cfg.method`` and write artifacts under ``out_root/{hash}/{method}/seed_{seed}``.

    With ``dry_run`` nothing is trained; the stage plan is returned instead.
    """
    plan = stage_plan([cfg.method])
    if dry_run:
        return {"config_hash": cfg.config_hash(), "stages": plan}
    start = time.perf_counter()
    up = prepare(cfg, [cfg.method])
    with stage("classifier"):
        metrics, net = run_method(cfg, cfg.method, up)
    metrics.update(_shared_metrics(up, cfg))
    metrics["config_hash"] = cfg.config_hash()
    metrics["seed"] = cfg.seed

    path = run_dir(cfg, out_root)
    os.makedirs(path, exist_ok=True)
    h = cfg.config_hash()
    dump_json(cfg.to_dict(), os.path.join(path, "config.json"))
    io.save_instances_csv(up.crowd.base, os.path.join(path, "instances.csv"), h)
    io.save_annotations_csv(up.crowd, os.path.join(path, "annotations.csv"), h)
    io.save_pool_json(up.pool, os.path.join(path, "pool.json"), h)
    io.save_arrays_json(net.params(), os.path.join(path, "classifier.json"), {"config_hash": h})
    if up.distilled is not None:
        ds.export_distilled_csv(up.distilled, os.path.join(path, "distilled.csv"), h)
        io.save_arrays_json(up.global_net.params(), os.path.join(path, "global_transition.json"),
                            {"config_hash": h})
    if up.graph is not None:
        gt.export_edges_csv(up.graph.A_star, os.path.join(path, "graph_edges.csv"), h)
    dump_json(metrics, os.path.join(path, "metrics.json"))
    dump_json({"wall_time_s": time.perf_counter() - start}, os.path.join(path, "timing.json"))
    return metrics


SWEEP_PARAMS = {
    "r_bar": "noise.mean_annotations",
    "G": "noise.G",
    "k": "graph.k",
    "rho": "noise.rho",
}


def _ablation_job(args):
    cfg, methods = args
    start = time.perf_counter()
    res = run_methods(cfg, methods)
    res["wall_time_s"] = time.perf_counter() - start
    return res


def run_ablation(cfg, seeds, methods=("taidtm", "taidtm_ft", "global_only"), sweep=None, workers=1):
    """Cross product of sweep values x seeds x methods, one metrics row each.

    ``sweep`` is ``(param, values)`` with ``param`` in ``SWEEP_PARAMS`` or
    ``"method"`` (then ``values`` replaces ``methods``). Methods of one
    (value, seed) cell share their upstream stages, so comparisons are paired.
    """
    seeds = list(seeds)
    if not seeds:
        raise ConfigError("ablation needs at least one seed")
    param, values = sweep if sweep else (None, [None])
    if param == "method":
        methods, values = tuple(values), [None]
    elif param is not None and param not in SWEEP_PARAMS:
        raise ConfigError(f"cannot sweep {param!r}; choose from method, {', '.join(SWEEP_PARAMS)}")
    cells = [(v, s) for v in values for s in seeds]
    jobs = []
    for v, s in cells:
        changes = {"seed": s}
        if v is not None:
            changes[SWEEP_PARAMS[param]] = v
        jobs.append((cfg.replace(**changes), tuple(methods)))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_ablation_job, jobs))
    else:
        results = [_ablation_job(j) for j in jobs]

    rows = []
    for (v, s), (job_cfg, _), res in zip(cells, jobs, results):
        for m in methods:
            row = {"param": param or "", "value": "" if v is None else v, "seed": s, "method": m,
                   "config_hash": job_cfg.config_hash()}
            row.update({k: res["methods"][m].get(k) for k in METRIC_COLUMNS})
            row["same_group_edge_fraction"] = res["shared"].get("same_group_edge_fraction")
            row["wall_time_s"] = res["wall_time_s"]
            rows.append(row)
    return {"rows": rows, "summary": summarize(rows)}


METRIC_COLUMNS = ("test_accuracy", "transition_error", "true_row_error")


def summarize(rows):
    """Mean/std of each metric per (value, method), in first-seen order."""
    groups = {}
    for r in rows:
        groups.setdefault((r["value"], r["method"]), []).append(r)
    out = []
    for (value, method), rs in groups.items():
        entry = {"param": rs[0]["param"], "value": value, "method": method, "n_seeds": len(rs)}
        for k in METRIC_COLUMNS:
            vals = [r[k] for r in rs if r[k] is not None]
            entry[f"{k}_mean"] = float(np.mean(vals)) if vals else None
            entry[f"{k}_std"] = float(np.std(vals)) if vals else None
        out.append(entry)
    return out


def summary_lookup(summary, method, value=""):
    for e in summary:
        if e["method"] == method and e["value"] == value:
            return e
    raise KeyError((method, value))


def write_csv(records, path):
    if not records:
        raise ValueError("nothing to write")
    cols = list(records[0])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        for r in records:
            writer.writerow({k: "" if r[k] is None else r[k] for k in cols})
