"""Command-line surface: data generation, training, evaluation, comparisons, ablations.

Every command is reproducible: identical arguments and seeds yield identical
output files (wall-time fields in training logs excepted). Each run directory
contains a resolved config snapshot sufficient to re-run it.

Exit codes: 0 success, 2 usage/config error, 3 data validation error,
4 runtime/training error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import scm
from .datamodel import Dataset, ModelConfig, load_dataset, save_dataset
from .errors import (
    AucisError,
    ConfigError,
    DataValidationError,
    EmptySubjectError,
    EvidenceImpossibleError,
    ProvenanceMismatchError,
)
from .evaluation import (
    EvalReport,
    FoldPlan,
    evaluate_model,
    export_features,
    fold_split,
    split_subject_exclusive,
    write_f1_csv,
)
from .model import build_model
from .train import TrainConfig, fit, load_checkpoint, save_checkpoint

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4

OUTPUT_ROOT_ENV = "AUCIS_OUTPUT_ROOT"

# Published full-scale reference for the insertion ablation, quoted for context
# in comparison reports (F1 percentages, ResNet34 backbone on BP4D).
REFERENCE_FULL_SCALE = {
    "dataset": "BP4D",
    "backbone": "ResNet34",
    "without_cis": 60.6,
    "with_cis": 64.3,
    "delta": 3.7,
}


def _out_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _read_json(path: Path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _load_spec_arg(path_str: str) -> scm.SCMSpec:
    path = Path(path_str)
    if not path.exists():
        raise ConfigError(f"generator config not found: {path}")
    return scm.load_spec(path)


def _sidecar_path(dataset_path: Path) -> Path:
    return dataset_path.with_suffix(dataset_path.suffix + ".scmspec.json")


def _resolve_spec_for_data(args, dataset_path: Path) -> scm.SCMSpec | None:
    """Explicit --spec wins; otherwise pick up the generator sidecar if present."""
    if getattr(args, "no_oracle", False):
        return None
    if getattr(args, "spec", None):
        return _load_spec_arg(args.spec)
    sidecar = _sidecar_path(dataset_path)
    if sidecar.exists():
        return scm.load_spec(sidecar)
    return None


def _merge_config(args, file_key: str, cls, flag_map: dict[str, str], base: dict | None = None):
    """Layer config file section under CLI flags; unset flags keep file/default values."""
    merged = dict(base or {})
    if getattr(args, "config", None):
        cfg_path = Path(args.config)
        if not cfg_path.exists():
            raise ConfigError(f"config file not found: {cfg_path}")
        section = _read_json(cfg_path).get(file_key, {})
        if not isinstance(section, dict):
            raise ConfigError(f"config section {file_key!r} must be an object")
        merged.update(section)
    for flag, field_name in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            merged[field_name] = value
    try:
        return cls.from_dict(merged)
    except (TypeError, DataValidationError, ConfigError) as exc:
        raise ConfigError(f"invalid {file_key} config: {exc}") from exc


MODEL_FLAGS = {
    "d_in": "d_in",
    "d_m": "d_m",
    "d_out": "d_out",
    "tau": "tau",
    "backbone": "backbone_kind",
    "head": "head",
    "alpha": "alpha_mode",
}

TRAIN_FLAGS = {
    "lr": "learning_rate",
    "momentum": "momentum",
    "weight_decay": "weight_decay",
    "batch_size": "batch_size",
    "epochs": "max_epochs",
    "patience": "patience",
    "seed": "seed",
    "val_fraction": "val_fraction",
}


def _train_one_fold(
    dataset: Dataset,
    plan: FoldPlan,
    fold: int,
    variant: str,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    *,
    subjects_subset: list[int] | None = None,
    spec: scm.SCMSpec | None = None,
    out_dir: Path | None = None,
):
    """Shared fit-and-evaluate path for `train --kfold` and the subject ablation."""
    train_ds, test_ds, mapping = fold_split(
        dataset, plan, fold, train_subject_subset=subjects_subset
    )
    fold_cfg = TrainConfig.from_dict({**train_cfg.to_dict(), "seed": train_cfg.seed + fold})
    model = build_model(variant, model_cfg, dataset.obs_dim, seed=fold_cfg.seed)
    result = fit(model, train_ds, fold_cfg)
    report = evaluate_model(model, test_ds, spec=spec)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(
            model,
            out_dir / "checkpoint.ckpt",
            train_config=fold_cfg,
            history=result.history,
            epoch=result.best_epoch,
        )
        with open(out_dir / "training_log.jsonl", "w", encoding="utf-8") as fh:
            for entry in result.history:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        report.save(out_dir / "report.json")
        write_f1_csv(report, out_dir / "f1.csv")
        _write_json(out_dir / "subject_map.json", {str(k): v for k, v in mapping.items()})
    return model, result, report


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    spec = _load_spec_arg(args.spec)
    out = Path(args.out)
    if out.suffix == "" or out.is_dir():
        out.mkdir(parents=True, exist_ok=True)
        dataset_path = out / "dataset.jsonl"
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        dataset_path = out
    dataset = scm.sample_dataset(spec, args.n, args.seed)
    save_dataset(dataset, dataset_path)
    # the sidecar is itself a loadable generator config; the hash field is
    # informational and ignored by the loader
    sidecar = _sidecar_path(dataset_path)
    _write_json(sidecar, {**scm.spec_to_dict(spec), "hash": scm.spec_hash(spec)})
    print(f"wrote {len(dataset)} samples to {dataset_path} (generator hash {scm.spec_hash(spec)})")
    return EXIT_OK


def cmd_train(args) -> int:
    data_path = Path(args.data)
    if not data_path.exists():
        raise ConfigError(f"dataset not found: {data_path}")
    dataset = load_dataset(data_path)
    spec = _resolve_spec_for_data(args, data_path)
    model_cfg = _merge_config(args, "model", ModelConfig, MODEL_FLAGS, {"num_aus": dataset.num_aus})
    if model_cfg.num_aus != dataset.num_aus:
        raise ConfigError(
            f"model num_aus {model_cfg.num_aus} does not match dataset num_aus {dataset.num_aus}"
        )
    train_cfg = _merge_config(args, "train", TrainConfig, TRAIN_FLAGS)
    out_dir = Path(args.out) if args.out else _out_root() / "train"
    out_dir.mkdir(parents=True, exist_ok=True)

    snapshot = {
        "command": "train",
        "data": str(data_path),
        "variant": args.variant,
        "kfold": args.kfold,
        "plan_seed": args.plan_seed,
        "model": model_cfg.to_dict(),
        "train": train_cfg.to_dict(),
        "oracle": spec is not None,
    }
    _write_json(out_dir / "config.json", snapshot)

    if args.kfold:
        # cisnet needs full subject coverage in the raw data before splitting
        if args.variant == "cisnet":
            present = set(int(s) for s in dataset.subjects_present())
            missing = sorted(set(range(dataset.num_subjects)) - present)
            if missing:
                raise EmptySubjectError(missing[0], f"dataset is missing subject {missing[0]}")
        plan = split_subject_exclusive(dataset, args.kfold, args.plan_seed)
        _write_json(out_dir / "foldplan.json", plan.to_dict())
        macros = []
        for fold in range(plan.k):
            _, _, report = _train_one_fold(
                dataset,
                plan,
                fold,
                args.variant,
                model_cfg,
                train_cfg,
                spec=spec,
                out_dir=out_dir / f"fold_{fold}",
            )
            macros.append(report.macro_f1)
            print(f"fold {fold}: test macro F1 {report.macro_f1:.4f}")
        _write_json(
            out_dir / "summary.json",
            {"fold_macro_f1": macros, "mean_macro_f1": float(np.mean(macros))},
        )
        print(f"mean macro F1 {float(np.mean(macros)):.4f}")
    else:
        model = build_model(args.variant, model_cfg, dataset.obs_dim, seed=train_cfg.seed)
        result = fit(model, dataset, train_cfg)
        save_checkpoint(
            model,
            out_dir / "checkpoint.ckpt",
            train_config=train_cfg,
            history=result.history,
            epoch=result.best_epoch,
        )
        with open(out_dir / "training_log.jsonl", "w", encoding="utf-8") as fh:
            for entry in result.history:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        print(f"best validation macro F1 {result.best_val_macro_f1:.4f} (epoch {result.best_epoch})")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise ConfigError(f"checkpoint not found: {ckpt_path}")
    data_path = Path(args.data)
    if not data_path.exists():
        raise ConfigError(f"dataset not found: {data_path}")
    model, _ = load_checkpoint(ckpt_path)
    dataset = load_dataset(data_path)
    spec = _resolve_spec_for_data(args, data_path)
    report = evaluate_model(model, dataset, spec=spec)
    out_dir = Path(args.out) if args.out else _out_root() / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    report.save(out_dir / "report.json")
    write_f1_csv(report, out_dir / "f1.csv")
    print(f"macro F1 {report.macro_f1:.4f}")
    return EXIT_OK


def _collect_run(run_dir: Path) -> dict:
    plan_path = run_dir / "foldplan.json"
    if not plan_path.exists():
        raise ConfigError(f"{run_dir} is not a cross-validated run (missing foldplan.json)")
    plan = _read_json(plan_path)
    reports = []
    for fold in range(int(plan["k"])):
        rp = run_dir / f"fold_{fold}" / "report.json"
        if not rp.exists():
            raise ConfigError(f"missing report for fold {fold} in {run_dir}")
        reports.append(EvalReport.load(rp))
    return {"plan": plan, "reports": reports}


def _run_aggregates(reports: list[EvalReport]) -> dict:
    per_au = np.mean([r.per_au_f1 for r in reports], axis=0)
    agg = {
        "macro_f1": float(np.mean([r.macro_f1 for r in reports])),
        "per_au_f1": per_au.tolist(),
        "mean_pcc_cosine": float(
            np.mean([v for r in reports for v in r.pcc_cosine_to_gt.values()])
        ),
    }
    if all(r.oracle_alignment is not None for r in reports):
        agg["mad_to_do"] = float(np.mean([r.oracle_alignment["mad_to_do"] for r in reports]))
        agg["mad_to_cond"] = float(np.mean([r.oracle_alignment["mad_to_cond"] for r in reports]))
    return agg


def cmd_compare(args) -> int:
    base_dirs = [Path(p) for p in args.baseline]
    cis_dirs = [Path(p) for p in args.cisnet]
    if len(base_dirs) != len(cis_dirs):
        raise ConfigError("need the same number of baseline and cisnet run directories")
    pairs = []
    plan_ref = None
    for b_dir, c_dir in zip(base_dirs, cis_dirs):
        b = _collect_run(b_dir)
        c = _collect_run(c_dir)
        if b["plan"] != c["plan"]:
            raise DataValidationError(
                f"fold plans differ between {b_dir} and {c_dir}; comparison refused"
            )
        if plan_ref is None:
            plan_ref = b["plan"]
        elif b["plan"] != plan_ref:
            raise DataValidationError("fold plans differ across seed pairs; comparison refused")
        ab, ac = _run_aggregates(b["reports"]), _run_aggregates(c["reports"])
        pair = {
            "baseline_dir": str(b_dir),
            "cisnet_dir": str(c_dir),
            "baseline": ab,
            "cisnet": ac,
            "macro_f1_delta": ac["macro_f1"] - ab["macro_f1"],
            "per_au_f1_delta": (np.array(ac["per_au_f1"]) - np.array(ab["per_au_f1"])).tolist(),
            "pcc_cosine_delta": ac["mean_pcc_cosine"] - ab["mean_pcc_cosine"],
        }
        if "mad_to_do" in ab and "mad_to_do" in ac:
            pair["mad_to_do_delta"] = ac["mad_to_do"] - ab["mad_to_do"]
            pair["mad_to_cond_delta"] = ac["mad_to_cond"] - ab["mad_to_cond"]
        pairs.append(pair)
    deltas = [p["macro_f1_delta"] for p in pairs]
    comparison = {
        "reference_full_scale_f1": REFERENCE_FULL_SCALE,
        "pairs": pairs,
        "mean_macro_f1_delta": float(np.mean(deltas)),
        "cisnet_wins": int(sum(d > 0 for d in deltas)),
        "num_pairs": len(pairs),
        "per_au_f1_mean_delta": np.mean([p["per_au_f1_delta"] for p in pairs], axis=0).tolist(),
    }
    out_dir = Path(args.out) if args.out else _out_root() / "compare"
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "comparison.json", comparison)
    with open(out_dir / "deltas.csv", "w", encoding="utf-8") as fh:
        fh.write("pair,baseline_macro_f1,cisnet_macro_f1,macro_f1_delta\n")
        for i, p in enumerate(pairs):
            fh.write(
                f"{i},{p['baseline']['macro_f1']:.6f},{p['cisnet']['macro_f1']:.6f},"
                f"{p['macro_f1_delta']:.6f}\n"
            )
    print(
        f"mean macro F1 delta {comparison['mean_macro_f1_delta']:+.4f} "
        f"({comparison['cisnet_wins']}/{comparison['num_pairs']} pairs favor cisnet)"
    )
    return EXIT_OK


def cmd_ablate_subjects(args) -> int:
    data_path = Path(args.data)
    if not data_path.exists():
        raise ConfigError(f"dataset not found: {data_path}")
    dataset = load_dataset(data_path)
    spec = _resolve_spec_for_data(args, data_path)
    grid = sorted(int(v) for v in args.grid.split(","))
    seeds = [int(v) for v in args.seeds.split(",")]
    model_cfg = _merge_config(args, "model", ModelConfig, MODEL_FLAGS, {"num_aus": dataset.num_aus})
    train_cfg = _merge_config(args, "train", TrainConfig, TRAIN_FLAGS)
    out_dir = Path(args.out) if args.out else _out_root() / "ablate"
    out_dir.mkdir(parents=True, exist_ok=True)

    detail: dict[str, dict] = {}
    curves: dict[int, dict[str, list[float]]] = {m: {"baseline": [], "cisnet": []} for m in grid}
    for seed in seeds:
        plan = split_subject_exclusive(dataset, args.kfold, args.plan_seed)
        pool = plan.train_subjects(0)
        bad = [m for m in grid if m > len(pool)]
        if bad:
            raise ConfigError(
                f"grid values {bad} exceed the {len(pool)} available training subjects"
            )
        pool_order = np.random.default_rng(seed).permutation(pool)
        seed_cfg = TrainConfig.from_dict({**train_cfg.to_dict(), "seed": seed})
        for m in grid:
            subjects = sorted(int(s) for s in pool_order[:m])
            for variant in ("baseline", "cisnet"):
                _, _, report = _train_one_fold(
                    dataset,
                    plan,
                    0,
                    variant,
                    model_cfg,
                    seed_cfg,
                    subjects_subset=subjects,
                    spec=spec,
                )
                curves[m][variant].append(report.macro_f1)
                detail[f"seed{seed}_m{m}_{variant}"] = {
                    "subjects": subjects,
                    "macro_f1": report.macro_f1,
                }
    with open(out_dir / "ablation.csv", "w", encoding="utf-8") as fh:
        fh.write("m,f1_baseline,f1_cisnet\n")
        for m in grid:
            fh.write(
                f"{m},{float(np.mean(curves[m]['baseline'])):.6f},"
                f"{float(np.mean(curves[m]['cisnet'])):.6f}\n"
            )
    _write_json(out_dir / "ablation_detail.json", detail)
    _write_json(
        out_dir / "config.json",
        {
            "command": "ablate-subjects",
            "data": str(data_path),
            "grid": grid,
            "seeds": seeds,
            "kfold": args.kfold,
            "plan_seed": args.plan_seed,
            "model": model_cfg.to_dict(),
            "train": train_cfg.to_dict(),
        },
    )
    print(f"wrote {out_dir / 'ablation.csv'}")
    return EXIT_OK


def cmd_analyze_pcc(args) -> int:
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise ConfigError(f"checkpoint not found: {ckpt_path}")
    data_path = Path(args.data)
    if not data_path.exists():
        raise ConfigError(f"dataset not found: {data_path}")
    model, _ = load_checkpoint(ckpt_path)
    dataset = load_dataset(data_path)
    import warnings as _warnings

    with _warnings.catch_warnings(record=True) as caught:
        _warnings.simplefilter("always")
        report = evaluate_model(model, dataset)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    out_dir = Path(args.out) if args.out else _out_root() / "pcc"
    out_dir.mkdir(parents=True, exist_ok=True)
    for s, mat in sorted(report.per_subject_pcc_gt.items()):
        np.savetxt(out_dir / f"subject_{s}_gt.csv", mat, delimiter=",", fmt="%.6f")
    for s, mat in sorted(report.per_subject_pcc.items()):
        np.savetxt(out_dir / f"subject_{s}_pred.csv", mat, delimiter=",", fmt="%.6f")
    with open(out_dir / "cosines.csv", "w", encoding="utf-8") as fh:
        fh.write("subject,cosine_full,cosine_upper\n")
        for s in sorted(report.pcc_cosine_to_gt):
            fh.write(
                f"{s},{report.pcc_cosine_to_gt[s]:.6f},{report.pcc_cosine_to_gt_upper[s]:.6f}\n"
            )
    _write_json(
        out_dir / "summary.json",
        {
            "mean_cosine_full": report.mean_pcc_cosine(),
            "mean_cosine_upper": report.mean_pcc_cosine(upper_triangle=True),
            "skipped_subjects": report.skipped_subjects,
        },
    )
    print(f"mean PCC cosine {report.mean_pcc_cosine():.4f}")
    return EXIT_OK


def cmd_export_features(args) -> int:
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise ConfigError(f"checkpoint not found: {ckpt_path}")
    data_path = Path(args.data)
    if not data_path.exists():
        raise ConfigError(f"dataset not found: {data_path}")
    model, _ = load_checkpoint(ckpt_path)
    dataset = load_dataset(data_path)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    export_features(model, dataset, out)
    print(f"wrote {len(dataset)} feature records to {out}")
    return EXIT_OK


def cmd_plot(args) -> int:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise ConfigError("plotting requires matplotlib (install the 'plot' extra)") from exc
    src = Path(args.input)
    if not src.exists():
        raise ConfigError(f"input not found: {src}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.kind == "ablation":
        rows = np.genfromtxt(src, delimiter=",", names=True)
        fig, ax = plt.subplots(figsize=(5, 4))
        ax.plot(rows["m"], rows["f1_baseline"], marker="o", label="baseline")
        ax.plot(rows["m"], rows["f1_cisnet"], marker="s", label="cisnet")
        ax.set_xlabel("training subjects")
        ax.set_ylabel("macro F1")
        ax.legend()
    else:
        mat = np.loadtxt(src, delimiter=",")
        fig, ax = plt.subplots(figsize=(4.5, 4))
        im = ax.imshow(mat, vmin=-1, vmax=1, cmap="coolwarm")
        fig.colorbar(im, ax=ax)
        ax.set_xlabel("AU")
        ax.set_ylabel("AU")
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser / dispatch

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aucis", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="sample a synthetic dataset from a generator config")
    p.add_argument("--spec", required=True, help="generator config JSON")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output file or directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model, optionally with subject-exclusive k-fold CV")
    p.add_argument("--data", required=True)
    p.add_argument("--variant", choices=("baseline", "cisnet"), default="cisnet")
    p.add_argument("--kfold", type=int, default=None)
    p.add_argument("--plan-seed", type=int, default=0, dest="plan_seed")
    p.add_argument("--config", default=None, help="JSON config with 'model'/'train' sections")
    p.add_argument("--spec", default=None, help="generator config for oracle metrics")
    p.add_argument("--no-oracle", action="store_true", dest="no_oracle")
    p.add_argument("--out", default=None)
    for flag in ("--d-in", "--d-m", "--d-out"):
        p.add_argument(flag, type=int, default=None, dest=flag.lstrip("-").replace("-", "_"))
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--backbone", choices=("mlp", "smallconv"), default=None)
    p.add_argument("--head", choices=("concat", "sum"), default=None)
    p.add_argument("--alpha", choices=("attention", "uniform"), default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--momentum", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None, dest="weight_decay")
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--val-fraction", type=float, default=None, dest="val_fraction")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--spec", default=None)
    p.add_argument("--no-oracle", action="store_true", dest="no_oracle")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="compare paired baseline/cisnet cross-validated runs")
    p.add_argument("--baseline", nargs="+", required=True)
    p.add_argument("--cisnet", nargs="+", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("ablate-subjects", help="train both variants over a grid of subject counts")
    p.add_argument("--data", required=True)
    p.add_argument("--grid", required=True, help="comma-separated subject counts, e.g. 2,4,6,8")
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.add_argument("--kfold", type=int, default=3)
    p.add_argument("--plan-seed", type=int, default=0, dest="plan_seed")
    p.add_argument("--config", default=None)
    p.add_argument("--spec", default=None)
    p.add_argument("--no-oracle", action="store_true", dest="no_oracle")
    p.add_argument("--out", default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.set_defaults(func=cmd_ablate_subjects)

    p = sub.add_parser("analyze-pcc", help="per-subject PCC matrices and cosine similarities")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_analyze_pcc)

    p = sub.add_parser("export-features", help="dump backbone features for external embedding")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_features)

    p = sub.add_parser("plot", help="render emitted numeric files (optional)")
    p.add_argument("--kind", choices=("ablation", "pcc"), required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (
        DataValidationError,
        EmptySubjectError,
        ProvenanceMismatchError,
        EvidenceImpossibleError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except AucisError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
