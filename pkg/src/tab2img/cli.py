"""Command-line entry point.

Commands: train, explain, vif-report, visualize, benchmark, stability.
Configuration values come from documented defaults, then an optional
flat key=value config file, then command-line flags, in that order of
precedence; every effective value's provenance is recorded in the run
manifest. Unknown keys are rejected with a suggestion.
"""

from __future__ import annotations

import argparse
import dataclasses
import difflib
import hashlib
import json
import os
import sys

import numpy as np

from . import data as D
from . import model as M
from .attribution import DualConfig, ExplainConfig, explain_sample, phi_img_heatmap_bytes
from .errors import Tab2ImgError, UsageError
from .evaluation import (RunReport, benchmark_run, run_dataset_variant,
                         stability_study)
from .metrics import accuracy, auc
from .nn import param_count
from .vif import compute_vif, write_vif_csv

# every knob, its type, and its protocol default
CONFIG_SCHEMA = {
    "data": (str, None),             # csv path, "openml:<id>", or "builtin:<name>"
    "target": (str, "class"),
    "variant": (str, "base"),        # base | vif | dir | mul
    "mapping": (str, "multiple"),    # multiple | single
    "mapping_policy": (str, "per-epoch"),
    "batch": (int, 64),
    "epochs": (int, 100),
    "repeats": (int, 3),
    "seed": (int, 0),
    "split": (float, 0.8),
    "lr": (float, 1e-3),
    "weight_decay": (float, 1e-2),
    "dropout": (float, 0.5),
    "noise": (str, "per-forward"),   # per-forward | fixed
    "shap_background": (int, 32),
    "shap_coalitions": (int, 2048),
    "dual_iters": (int, 500),
    "dual_lr": (float, 1e-4),
    "reverse_epochs": (int, 100),
    "stability_runs": (int, 10),
    "stability_instances": (int, 8),
    "pool_per_class": (int, 256),
    "out": (str, "out"),
    "cache_dir": (str, None),
    "image_dir": (str, None),
}


class Config:
    def __init__(self):
        self.values = {k: default for k, (_, default) in CONFIG_SCHEMA.items()}
        self.provenance = {k: "default" for k in CONFIG_SCHEMA}

    def set(self, key: str, raw, source: str):
        if key not in CONFIG_SCHEMA:
            hint = difflib.get_close_matches(key, CONFIG_SCHEMA, n=1)
            suffix = f"; did you mean {hint[0]!r}?" if hint else ""
            raise UsageError(f"unknown config key {key!r}{suffix}")
        typ, _ = CONFIG_SCHEMA[key]
        try:
            value = typ(raw) if raw is not None else None
        except (TypeError, ValueError):
            raise UsageError(f"config key {key!r} expects {typ.__name__}, "
                             f"got {raw!r}") from None
        self.values[key] = value
        self.provenance[key] = source

    def __getitem__(self, key):
        return self.values[key]

    def hash(self) -> str:
        blob = json.dumps(self.values, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def parse_config(file_path=None, flag_items=()) -> Config:
    """Defaults <- config file <- flags, with provenance per key."""
    cfg = Config()
    if file_path:
        with open(file_path) as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise UsageError(f"{file_path}:{line_no}: expected key=value")
                key, _, raw = line.partition("=")
                cfg.set(key.strip(), raw.strip(), f"file:{file_path}:{line_no}")
    for key, raw in flag_items:
        cfg.set(key, raw, "flag")
    return cfg


def _cache_dir(cfg: Config) -> str:
    return cfg["cache_dir"] or D.default_cache_dir()


def load_table(cfg: Config) -> tuple[str, D.RawTable]:
    spec = cfg["data"]
    if spec is None:
        raise UsageError("no dataset given; pass --data <csv|openml:ID|builtin:NAME>")
    if spec.startswith("builtin:"):
        name = spec.split(":", 1)[1]
        if name not in D.BUILTIN_TABLES:
            raise UsageError(f"unknown builtin dataset {name!r}; "
                             f"available: {sorted(D.BUILTIN_TABLES)}")
        return name, D.BUILTIN_TABLES[name]()
    if spec.startswith("openml:"):
        ident = spec.split(":", 1)[1]
        dataset_id = D.NAMED_DATASET_IDS.get(ident) or int(ident)
        path = D.fetch_openml(dataset_id, os.path.join(_cache_dir(cfg), "openml"))
        return f"openml-{ident}", D.load_csv(path, cfg["target"])
    name = os.path.splitext(os.path.basename(spec))[0]
    return name, D.load_csv(spec, cfg["target"])


def corpora(cfg: Config):
    root = cfg["image_dir"] or os.path.join(_cache_dir(cfg), "images")
    return D.ensure_corpora(root, per_class=cfg["pool_per_class"])


def train_config(cfg: Config) -> M.TrainConfig:
    return M.TrainConfig(
        batch_size=cfg["batch"], epochs=cfg["epochs"], repeats=cfg["repeats"],
        lr=cfg["lr"], weight_decay=cfg["weight_decay"], seed=cfg["seed"],
        mapping_policy="fixed" if cfg["mapping"] == "single" else cfg["mapping_policy"],
        single_mapping=cfg["mapping"] == "single", variant=cfg["variant"],
        dropout=cfg["dropout"], noise_policy=cfg["noise"])


def explain_config(cfg: Config, seed_shift: int = 0) -> ExplainConfig:
    return ExplainConfig(
        shap_background=cfg["shap_background"],
        n_coalitions=cfg["shap_coalitions"],
        noise_seed=cfg["seed"] + seed_shift, seed=cfg["seed"] + seed_shift,
        dual=DualConfig(iters=cfg["dual_iters"], lr=cfg["dual_lr"],
                        seed=cfg["seed"] + seed_shift))


def write_manifest(cfg: Config, out_dir, command: str, extra=None):
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "command": command,
        "config": cfg.values,
        "provenance": cfg.provenance,
        "config_hash": cfg.hash(),
        "numpy_version": np.__version__,
        "python_version": sys.version.split()[0],
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, default=str)
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: Config) -> int:
    out = cfg["out"]
    name, raw = load_table(cfg)
    ds = D.preprocess(raw)
    train, test = D.split(ds, cfg["split"], seed=cfg["seed"])
    fashion, mnist = corpora(cfg)
    pool = D.build_pool(ds.n_classes, fashion, mnist)
    tcfg = train_config(cfg)
    vif_report = (compute_vif(train.x)
                  if cfg["variant"] in ("vif", "dir", "mul") else None)

    os.makedirs(out, exist_ok=True)
    write_manifest(cfg, out, "train", {"dataset": name})
    result = M.fit(train, test, pool, tcfg, vif_report=vif_report,
                   log_path=os.path.join(out, "training_log.jsonl"))

    for i, model in enumerate(result.models):
        M.save_snapshot(model, os.path.join(out, f"model_run{i}.bin"))
    best = int(np.argmax([r.best_accuracy for r in result.runs]))
    M.save_snapshot(result.models[best], os.path.join(out, "model_best.bin"))

    report = RunReport(
        dataset=name, variant=cfg["variant"],
        per_run_accuracy=[r.best_accuracy for r in result.runs],
        per_run_auc=[r.best_auc for r in result.runs],
        mean_accuracy=result.mean_accuracy, mean_auc=result.mean_auc,
        param_count=param_count(result.models[0]),
        wall_time_s=sum(r.wall_time_s for r in result.runs),
        config_hash=cfg.hash(),
        curves=[[dataclasses.asdict(e) for e in r.epochs] for r in result.runs])
    with open(os.path.join(out, "run_report.json"), "w") as fh:
        json.dump(report.to_json(), fh, indent=2)
    print(f"{name}: mean accuracy {result.mean_accuracy:.4f}, "
          f"mean AUC {result.mean_auc if result.mean_auc is None else round(result.mean_auc, 4)}")
    return 0


def cmd_vif_report(cfg: Config) -> int:
    name, raw = load_table(cfg)
    ds = D.preprocess(raw)
    train, _ = D.split(ds, cfg["split"], seed=cfg["seed"])
    report = compute_vif(train.x)
    os.makedirs(cfg["out"], exist_ok=True)
    path = os.path.join(cfg["out"], f"vif_{name}.csv")
    write_vif_csv(report, path, train.column_names)
    write_manifest(cfg, cfg["out"], "vif-report", {"dataset": name})
    print(f"wrote {path}")
    return 0


def cmd_visualize(cfg: Config, snapshot: str, n_samples: int = 25) -> int:
    model = M.load_snapshot(snapshot)
    name, raw = load_table(cfg)
    ds = D.preprocess(raw)
    _, test = D.split(ds, cfg["split"], seed=cfg["seed"])
    fashion, mnist = corpora(cfg)
    pool = D.build_pool(ds.n_classes, fashion, mnist)
    out = os.path.join(cfg["out"], "images")
    k = min(n_samples, test.n_rows)
    M.dump_images(model, test.x[:k], test.y[:k], pool, out,
                  sample_ids=test.row_indices[:k].tolist(),
                  noise_seed=cfg["seed"])
    write_manifest(cfg, cfg["out"], "visualize", {"dataset": name})
    print(f"wrote {k} images under {out}")
    return 0


def cmd_explain(cfg: Config, snapshot: str, sample_ids: list[int]) -> int:
    model = M.load_snapshot(snapshot)
    name, raw = load_table(cfg)
    ds = D.preprocess(raw)
    train, test = D.split(ds, cfg["split"], seed=cfg["seed"])
    reverse, _ = M.train_reverse(model, train, epochs=cfg["reverse_epochs"],
                                 seed=cfg["seed"])
    ecfg = explain_config(cfg)
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    write_manifest(cfg, out, "explain", {"dataset": name})

    id_to_pos = {int(r): i for i, r in enumerate(test.row_indices)}
    lines_path = os.path.join(out, "attributions.jsonl")
    with open(lines_path, "w") as fh:
        for sid in sample_ids:
            if sid not in id_to_pos:
                raise UsageError(f"sample {sid} is not in the test split "
                                 f"(available: {test.row_indices[:10].tolist()}...)")
            pos = id_to_pos[sid]
            pair, result = explain_sample(model, reverse, test.x[pos],
                                          train.x, config=ecfg)
            heat, scale = phi_img_heatmap_bytes(pair.phi_img)
            heat_path = os.path.join(out, f"phi_img_{sid}.pgm")
            M.write_pgm(heat_path, heat.astype(np.float64) / 255.0)
            fh.write(json.dumps({
                "sample": sid,
                "class": pair.class_index,
                "phi_tab": pair.phi_tab.tolist(),
                "dualshap_p": result.p.tolist(),
                "final_losses": {"mse": result.trace[-1][0],
                                 "kld": result.trace[-1][1],
                                 "mmd": result.trace[-1][2]},
                "heatmap": {"path": os.path.basename(heat_path),
                            "scale": scale},
            }) + "\n")
    print(f"wrote {lines_path}")
    return 0


def cmd_benchmark(cfg: Config, suite_path: str) -> int:
    with open(suite_path) as fh:
        suite = json.load(fh)
    tables = []
    for entry in suite["datasets"]:
        sub = Config()
        sub.values.update(cfg.values)
        sub.set("data", entry["data"], "suite")
        if "target" in entry:
            sub.set("target", entry["target"], "suite")
        name, raw = load_table(sub)
        tables.append((entry.get("name", name), D.preprocess(raw)))
    variants = suite.get("variants", ["base", "vif", "dir", "mul", "single"])
    reports, failures = benchmark_run(tables, variants, train_config(cfg),
                                      corpora(cfg), out_dir=cfg["out"])
    write_manifest(cfg, cfg["out"], "benchmark", {"suite": suite_path})
    print(f"{len(reports)} grid cells done, {len(failures)} failures; "
          f"tables under {cfg['out']}")
    return 0 if not failures else 3


def cmd_stability(cfg: Config) -> int:
    name, raw = load_table(cfg)
    ds = D.preprocess(raw)
    train, test = D.split(ds, cfg["split"], seed=cfg["seed"])
    fashion, mnist = corpora(cfg)
    pool = D.build_pool(ds.n_classes, fashion, mnist)
    tcfg = dataclasses.replace(train_config(cfg), repeats=1)
    result = M.fit(train, test, pool, tcfg)
    model = result.models[0]
    reverse, _ = M.train_reverse(model, train, epochs=cfg["reverse_epochs"],
                                 seed=cfg["seed"])
    rows = test.x[:cfg["stability_instances"]]
    report = stability_study(model, reverse, train, rows,
                             runs=cfg["stability_runs"], base_seed=cfg["seed"],
                             explain=explain_config(cfg))
    os.makedirs(cfg["out"], exist_ok=True)
    path = os.path.join(cfg["out"], f"stability_{name}.json")
    with open(path, "w") as fh:
        json.dump(report.to_json(), fh, indent=2)
    write_manifest(cfg, cfg["out"], "stability", {"dataset": name})
    print(f"std P={report.std_p:.4f} Q={report.std_q:.4f} "
          f"SHAP={report.std_shap:.4f} -> {path}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tab2img",
        description="Tabular classification via class-conditioned image "
                    "synthesis, with VIF-informed initialization and dual "
                    "tabular/image attributions.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key")
        p.add_argument("--data", help="csv path, openml:<id|name>, builtin:<name>")
        p.add_argument("--target", help="target column name")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="base seed")

    p = sub.add_parser("train", help="train the classifier on one dataset")
    add_common(p)
    p.add_argument("--variant", choices=["base", "vif", "dir", "mul"])
    p.add_argument("--single-mapping", action="store_true",
                   help="one reference image per class (ablation)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--repeats", type=int)

    p = sub.add_parser("explain", help="per-sample dual attributions")
    add_common(p)
    p.add_argument("--snapshot", required=True)
    p.add_argument("--samples", required=True,
                   help="comma-separated sample row ids from the test split")

    p = sub.add_parser("vif-report", help="per-feature collinearity CSV")
    add_common(p)

    p = sub.add_parser("visualize", help="dump generated images as PGM")
    add_common(p)
    p.add_argument("--snapshot", required=True)
    p.add_argument("--n-samples", type=int, default=25)

    p = sub.add_parser("benchmark", help="dataset x variant comparison grid")
    add_common(p)
    p.add_argument("--suite", required=True, help="JSON suite description")

    p = sub.add_parser("stability", help="repeated-attribution stability study")
    add_common(p)
    p.add_argument("--runs", type=int, help="number of repeated measurements")
    return parser


def _flags_from_args(args) -> list[tuple[str, str]]:
    items = []
    direct = {"data": args.data, "target": args.target, "out": args.out,
              "seed": args.seed}
    for key, value in direct.items():
        if value is not None:
            items.append((key, value))
    for key in ("variant", "epochs", "repeats"):
        if getattr(args, key, None) is not None:
            items.append((key, getattr(args, key)))
    if getattr(args, "single_mapping", False):
        items.append(("mapping", "single"))
    if getattr(args, "runs", None) is not None:
        items.append(("stability_runs", args.runs))
    for pair in args.set:
        if "=" not in pair:
            raise UsageError(f"--set expects KEY=VALUE, got {pair!r}")
        key, _, raw = pair.partition("=")
        items.append((key.strip(), raw.strip()))
    return items


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config, _flags_from_args(args))
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "explain":
            ids = [int(s) for s in args.samples.split(",") if s]
            return cmd_explain(cfg, args.snapshot, ids)
        if args.command == "vif-report":
            return cmd_vif_report(cfg)
        if args.command == "visualize":
            return cmd_visualize(cfg, args.snapshot, args.n_samples)
        if args.command == "benchmark":
            return cmd_benchmark(cfg, args.suite)
        if args.command == "stability":
            return cmd_stability(cfg)
        raise UsageError(f"unknown command {args.command!r}")
    except Tab2ImgError as exc:
        record = {"error": type(exc).__name__, "message": str(exc),
                  "command": args.command}
        print(json.dumps(record), file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
