"""Benchmark harness, attribution stability, and shuffle consistency.

The harness runs the dataset x variant grid with the fixed training
protocol and writes deterministic CSV comparison tables. Stability
repeats the attribution stack with shifted seeds on a frozen model;
shuffle consistency retrains on column-permuted data and measures how
far the re-aligned importances drift.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import data as D
from . import model as M
from .attribution import ExplainConfig, explain_sample, kernel_shap
from .errors import Tab2ImgError
from .metrics import accuracy, auc
from .nn import param_count
from .vif import compute_vif

VARIANT_NAMES = ("base", "vif", "dir", "mul", "single")


@dataclass
class RunReport:
    dataset: str
    variant: str
    per_run_accuracy: list[float]
    per_run_auc: list[float | None]
    mean_accuracy: float
    mean_auc: float | None
    param_count: int
    wall_time_s: float
    config_hash: str
    curves: list[list[dict]] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class StabilityReport:
    runs: int
    n_instances: int
    std_p: float
    std_q: float
    std_shap: float
    per_method_std: dict[str, list[float]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def _config_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _variant_settings(name: str):
    if name == "single":
        return "base", True
    return name, False


def run_dataset_variant(name: str, ds: D.TabularDataset, pool: D.ImagePool,
                        base_config: M.TrainConfig, variant: str,
                        log_path=None) -> RunReport:
    """Train one dataset under one variant and report the protocol metrics."""
    arch, single = _variant_settings(variant)
    train, test = D.split(ds, 0.8, seed=base_config.seed)
    vif_report = compute_vif(train.x) if arch in ("vif", "dir", "mul") else None
    cfg = M.TrainConfig(
        batch_size=base_config.batch_size, epochs=base_config.epochs,
        repeats=base_config.repeats, lr=base_config.lr, betas=base_config.betas,
        eps=base_config.eps, weight_decay=base_config.weight_decay,
        seed=base_config.seed,
        mapping_policy="fixed" if single else base_config.mapping_policy,
        single_mapping=single, variant=arch, dropout=base_config.dropout,
        noise_policy=base_config.noise_policy)

    start = time.monotonic()
    result = M.fit(train, test, pool, cfg, vif_report=vif_report, log_path=log_path)
    wall = time.monotonic() - start

    return RunReport(
        dataset=name, variant=variant,
        per_run_accuracy=[r.best_accuracy for r in result.runs],
        per_run_auc=[r.best_auc for r in result.runs],
        mean_accuracy=result.mean_accuracy, mean_auc=result.mean_auc,
        param_count=param_count(result.models[0]),
        wall_time_s=wall,
        config_hash=_config_hash({"dataset": name, "variant": variant,
                                  "config": _jsonable(cfg)}),
        curves=[[asdict(e) for e in r.epochs] for r in result.runs])


def _jsonable(cfg: M.TrainConfig) -> dict:
    d = asdict(cfg)
    d["betas"] = list(d["betas"])
    return d


def benchmark_run(tables: list[tuple[str, D.TabularDataset]], variants,
                  base_config: M.TrainConfig, pool_source,
                  out_dir=None):
    """Dataset x variant grid. Failures are recorded and do not stop the run.

    ``pool_source`` is (fashion, mnist) corpus pairs; the pool is rebuilt
    per dataset for its class count. Returns (reports, failures).
    """
    for v in variants:
        if v not in VARIANT_NAMES:
            raise Tab2ImgError(f"unknown variant {v!r}; choose from {VARIANT_NAMES}")
    fashion, mnist = pool_source
    reports: list[RunReport] = []
    failures: list[dict] = []
    for name, ds in tables:
        try:
            pool = D.build_pool(ds.n_classes, fashion, mnist)
        except Tab2ImgError as exc:
            failures.append({"dataset": name, "variant": "*", "error": str(exc)})
            continue
        for variant in variants:
            try:
                reports.append(run_dataset_variant(name, ds, pool, base_config, variant))
            except Tab2ImgError as exc:
                failures.append({"dataset": name, "variant": variant, "error": str(exc)})
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_benchmark_csv(reports, out_dir)
        if failures:
            with open(os.path.join(out_dir, "failures.json"), "w") as fh:
                json.dump(failures, fh, indent=2)
    return reports, failures


def write_benchmark_csv(reports: list[RunReport], out_dir):
    """runs.csv (one row per repeat) and summary.csv (means + wins tally)."""
    with open(os.path.join(out_dir, "runs.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset", "variant", "run", "accuracy", "auc"])
        for r in reports:
            for i, (a, u) in enumerate(zip(r.per_run_accuracy, r.per_run_auc)):
                w.writerow([r.dataset, r.variant, i, f"{a:.6f}",
                            "" if u is None else f"{u:.6f}"])

    datasets = sorted({r.dataset for r in reports})
    variants = sorted({r.variant for r in reports})
    acc_wins = {v: 0 for v in variants}
    auc_wins = {v: 0 for v in variants}
    by_key = {(r.dataset, r.variant): r for r in reports}
    for d in datasets:
        cell = {v: by_key.get((d, v)) for v in variants}
        accs = {v: r.mean_accuracy for v, r in cell.items() if r}
        if accs:
            best = max(accs.values())
            for v, a in accs.items():
                if a == best:
                    acc_wins[v] += 1
        aucs = {v: r.mean_auc for v, r in cell.items() if r and r.mean_auc is not None}
        if aucs:
            best = max(aucs.values())
            for v, u in aucs.items():
                if u == best:
                    auc_wins[v] += 1

    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset", "variant", "mean_accuracy", "mean_auc",
                    "param_count", "accuracy_wins", "auc_wins"])
        for r in sorted(reports, key=lambda r: (r.dataset, r.variant)):
            w.writerow([r.dataset, r.variant, f"{r.mean_accuracy:.6f}",
                        "" if r.mean_auc is None else f"{r.mean_auc:.6f}",
                        r.param_count, "", ""])
        for v in variants:
            w.writerow(["__wins__", v, "", "", "", acc_wins[v], auc_wins[v]])


# ---------------------------------------------------------------------------
# stability across repeated measurements


def stability_study(model, reverse, train: D.TabularDataset,
                    instance_rows: np.ndarray, runs: int = 10,
                    base_seed: int = 0,
                    explain: ExplainConfig | None = None) -> StabilityReport:
    """Repeat the attribution stack ``runs`` times with shifted seeds.

    Per instance and feature the standard deviation across runs is taken,
    then averaged over instances and features, separately for the
    dual-fit vectors P and Q and for plain coalition SHAP.
    """
    explain = explain or ExplainConfig()
    k, n = instance_rows.shape
    p_all = np.zeros((runs, k, n))
    q_all = np.zeros((runs, k, n))
    shap_all = np.zeros((runs, k, n))

    for r in range(runs):
        seed = base_seed + r
        cfg = ExplainConfig(
            shap_background=explain.shap_background,
            n_coalitions=explain.n_coalitions,
            noise_seed=explain.noise_seed + r, seed=seed,
            dual=type(explain.dual)(
                iters=explain.dual.iters, lr=explain.dual.lr,
                weight_decay=explain.dual.weight_decay, seed=seed,
                denom_guard=explain.dual.denom_guard, kernel=explain.dual.kernel))
        for i in range(k):
            pair, result = explain_sample(model, reverse, instance_rows[i],
                                          train.x, config=cfg)
            p_all[r, i] = result.p
            q_all[r, i] = result.q
            shap_all[r, i] = pair.phi_tab

    def agg(stack):
        return float(stack.std(axis=0).mean())

    return StabilityReport(
        runs=runs, n_instances=k,
        std_p=agg(p_all), std_q=agg(q_all), std_shap=agg(shap_all),
        per_method_std={
            "P": p_all.std(axis=0).mean(axis=1).tolist(),
            "Q": q_all.std(axis=0).mean(axis=1).tolist(),
            "SHAP": shap_all.std(axis=0).mean(axis=1).tolist(),
        })


# ---------------------------------------------------------------------------
# shuffle consistency


def aligned_mse(original: np.ndarray, shuffled: np.ndarray,
                perm: np.ndarray) -> float:
    """MSE after mapping shuffled-order importances back to original order.

    ``shuffled[:, j]`` scores permuted column j, i.e. original column
    ``perm[j]``.
    """
    restored = np.empty_like(shuffled)
    restored[:, perm] = shuffled
    return float(((np.asarray(original) - restored) ** 2).mean())


def permute_table_columns(raw: D.RawTable, perm: np.ndarray) -> D.RawTable:
    names = [raw.column_names[j] for j in perm]
    cells = [[row[j] for j in perm] for row in raw.cells]
    return D.RawTable(names, cells, raw.target_name, list(raw.target))


def shuffle_consistency(raw: D.RawTable, pool_source, train_config: M.TrainConfig,
                        n_instances: int = 8, perm_seed: int = 1,
                        explain: ExplainConfig | None = None,
                        reverse_epochs: int = 30) -> dict:
    """Retrain on column-shuffled data and compare re-aligned importances.

    Returns per-method alignment MSE for P, Q, and plain SHAP, plus the
    permutation used.
    """
    import dataclasses

    explain = explain or ExplainConfig()
    fashion, mnist = pool_source

    def run(table):
        ds = D.preprocess(table)
        train, test = D.split(ds, 0.8, seed=train_config.seed)
        pool = D.build_pool(ds.n_classes, fashion, mnist)
        cfg = dataclasses.replace(train_config, repeats=1)
        result = M.fit(train, test, pool, cfg)
        model = result.models[0]
        reverse, _ = M.train_reverse(model, train, epochs=reverse_epochs,
                                     seed=train_config.seed)
        rows = test.x[:n_instances]
        p = np.zeros((len(rows), train.n_features))
        q = np.zeros_like(p)
        shap = np.zeros_like(p)
        for i, row in enumerate(rows):
            pair, res = explain_sample(model, reverse, row, train.x, config=explain)
            p[i], q[i], shap[i] = res.p, res.q, pair.phi_tab
        return p, q, shap, ds.column_names

    perm_raw = np.random.default_rng(perm_seed).permutation(len(raw.column_names))
    p0, q0, s0, orig_names = run(raw)
    p1, q1, s1, shuf_names = run(permute_table_columns(raw, perm_raw))
    # preprocessing may drop columns; realign the kept ones by name
    induced = np.array([orig_names.index(nm) for nm in shuf_names])
    return {
        "perm": induced.tolist(),
        "P": aligned_mse(p0, p1, induced),
        "Q": aligned_mse(q0, q1, induced),
        "SHAP": aligned_mse(s0, s1, induced),
    }
