"""Command-line entry points tying the pipeline into reproducible runs.

Subcommands: train-zoo, train-msm, attack, evaluate, report. One JSON config
document drives everything; the paper-style defaults are prefilled so a
minimal config only names the dataset, the zoo entries, and an output
directory. Artifacts land under output_dir/{zoo,msm,reports,plots,attacks}
and every file embeds the config hash.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import jsonschema
import numpy as np
import torch

from .attacks import AttackConfig
from .batch import ExampleBatch
from .datasets import dataset_info, load_dataset
from .determinism import config_hash, derive_seed, enable_determinism
from .errors import CheckpointError, ConfigError, DataError, MetaSurrogateError
from .evaluate import EvalSpec, SurrogateSpec, TransferReport, transfer_eval, sweep
from .meta import MetaTrainConfig, train_msm
from .models import ArchitectureSpec, build_model
from .reporting import (format_comparison, merge_reports, plot_sweep,
                        plot_training_curves, write_long_table)
from .zoo import (Checkpoint, TrainRecipe, adversarial_train, load_checkpoint,
                  save_checkpoint, train_classifier)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["dataset", "output_dir"],
    "properties": {
        "dataset": {
            "type": ["string", "object"],
            "properties": {
                "name": {"type": "string"},
                "train_limit": {"type": ["integer", "null"]},
                "test_limit": {"type": ["integer", "null"]},
            },
        },
        "output_dir": {"type": "string"},
        "master_seed": {"type": "integer"},
        "zoo": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "role", "arch"],
                "properties": {
                    "id": {"type": "string"},
                    "role": {"enum": ["source", "target"]},
                    "arch": {"type": "object"},
                    "recipe": {"type": "object"},
                },
            },
        },
        "meta": {"type": "object"},
        "attack": {"type": "object"},
        "eval": {
            "type": "array",
            "items": {"type": "object", "required": ["surrogate"]},
        },
    },
}


def seal_config(cfg: dict) -> dict:
    """Recompute the embedded hash after any mutation of the config."""
    cfg["config_hash"] = config_hash({k: v for k, v in cfg.items() if k != "config_hash"})
    return cfg


def _normalize_config(raw: dict) -> dict:
    cfg = copy.deepcopy(raw)
    if isinstance(cfg.get("dataset"), str):
        cfg["dataset"] = {"name": cfg["dataset"]}
    cfg["dataset"].setdefault("train_limit", None)
    cfg["dataset"].setdefault("test_limit", None)
    cfg.setdefault("master_seed", 0)
    cfg.setdefault("zoo", [])
    cfg.setdefault("meta", {})
    cfg.setdefault("eval", [])
    return cfg


def load_config(path: str | Path, overrides: dict | None = None) -> dict:
    """Parse, validate, and normalize the experiment config document."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"config {path} fails schema validation: {exc.message}") from exc
    cfg = _normalize_config(raw)
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg[key] = value
    seal_config(cfg)
    ids = [e["id"] for e in cfg["zoo"]]
    if len(set(ids)) != len(ids):
        raise ConfigError("zoo ids must be unique")
    src_families = {e["arch"].get("family") for e in cfg["zoo"] if e["role"] == "source"}
    tgt_families = {e["arch"].get("family") for e in cfg["zoo"] if e["role"] == "target"}
    shared = src_families & tgt_families
    if shared:
        print(f"warning: source and target roles share architecture families: {sorted(shared)}",
              file=sys.stderr)
    return cfg


def _arch_from_config(arch: dict, cfg: dict) -> ArchitectureSpec:
    info = dataset_info(cfg["dataset"]["name"])
    merged = dict(arch)
    merged.setdefault("input_shape", list(info["input_shape"]))
    merged.setdefault("num_classes", info["num_classes"])
    return ArchitectureSpec.from_dict(merged)


def _paths(cfg: dict) -> dict[str, Path]:
    out = Path(cfg["output_dir"])
    return {
        "zoo": out / "zoo",
        "msm": out / "msm",
        "reports": out / "reports",
        "plots": out / "plots",
        "attacks": out / "attacks",
    }


def _checkpoint_path(cfg: dict, model_id: str) -> Path:
    if model_id == "msm":
        return _paths(cfg)["msm"] / "msm.pt"
    return _paths(cfg)["zoo"] / f"{model_id}.pt"


def _load_models(cfg: dict, ids) -> dict:
    models = {}
    for mid in ids:
        models[mid] = load_checkpoint(_checkpoint_path(cfg, mid)).model
    return models


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _load_split(cfg: dict, split: str, seed: int):
    limit = cfg["dataset"]["train_limit"] if split == "train" else cfg["dataset"]["test_limit"]
    return load_dataset(cfg["dataset"]["name"], split, seed=seed, limit=limit)


# ---------------------------------------------------------------- train-zoo

def cmd_train_zoo(cfg: dict) -> int:
    """Train every zoo entry; failures skip the entry but fail the command."""
    master = cfg["master_seed"]
    train = _load_split(cfg, "train", derive_seed(master, "zoo-train-order"))
    test = _load_split(cfg, "test", derive_seed(master, "zoo-test-order"))
    manifest = {"config_hash": cfg["config_hash"], "entries": []}
    failures = 0
    base_ckpts: dict[str, Checkpoint] = {}
    for entry in cfg["zoo"]:
        eid = entry["id"]
        try:
            arch = _arch_from_config(entry["arch"], cfg)
            recipe_raw = dict(entry.get("recipe", {}))
            recipe_raw.setdefault("seed", derive_seed(master, "zoo", eid))
            adversarial = recipe_raw.pop("adversarial", None)
            base_of = recipe_raw.pop("adversarial_base", None)
            recipe = TrainRecipe(**recipe_raw)
            if adversarial is not None:
                recipe = replace(recipe, adversarial=adversarial)
                base = base_ckpts.get(base_of) if base_of else None
                if base is None and base_of:
                    base = load_checkpoint(_checkpoint_path(cfg, base_of))
                if base is None:
                    raise ConfigError(
                        f"zoo entry {eid!r} needs 'adversarial_base' naming a trained entry"
                    )
                model, meta, curve = adversarial_train(base, train, test, recipe,
                                                       dataset_id=cfg["dataset"]["name"])
            else:
                model = build_model(arch, seed=recipe.seed)
                meta, curve = train_classifier(model, train, test, recipe,
                                               dataset_id=cfg["dataset"]["name"])
            meta.config_hash = cfg["config_hash"]
            meta.extra["role"] = entry["role"]
            meta.extra["accuracy_curve"] = curve
            path = _checkpoint_path(cfg, eid)
            save_checkpoint(model, meta, path)
            base_ckpts[eid] = Checkpoint(model=model, metadata=meta)
            manifest["entries"].append({
                "id": eid, "role": entry["role"], "path": str(path),
                "accuracy": meta.clean_accuracy, "training_kind": meta.training_kind,
            })
            print(f"trained {eid} ({entry['role']}): accuracy {meta.clean_accuracy:.4f}")
        except MetaSurrogateError as exc:
            failures += 1
            manifest["entries"].append({"id": eid, "role": entry["role"], "error": str(exc)})
            print(f"error: zoo entry {eid} failed: {exc}", file=sys.stderr)
    _atomic_write_text(_paths(cfg)["zoo"] / "manifest.json",
                       json.dumps(manifest, indent=2, sort_keys=True))
    return EXIT_RUNTIME if failures else EXIT_OK


# ---------------------------------------------------------------- train-msm

def _meta_config(cfg: dict) -> MetaTrainConfig:
    meta_raw = dict(cfg["meta"])
    source_ids = meta_raw.pop("sources", None) or [
        e["id"] for e in cfg["zoo"] if e["role"] == "source"
    ]
    target_ids = meta_raw.pop("eval_targets", None)
    if target_ids is None:
        target_ids = [e["id"] for e in cfg["zoo"] if e["role"] == "target"]
    arch_raw = meta_raw.pop("msm_arch", None)
    if arch_raw is None:
        raise ConfigError("config.meta.msm_arch is required to train the MSM")
    meta_raw.setdefault("seed", derive_seed(cfg["master_seed"], "meta"))
    meta_raw.setdefault("dataset", cfg["dataset"]["name"])
    meta_raw.setdefault("train_limit", cfg["dataset"]["train_limit"])
    return MetaTrainConfig(
        source_checkpoints=[str(_checkpoint_path(cfg, i)) for i in source_ids],
        eval_targets=[str(_checkpoint_path(cfg, i)) for i in target_ids],
        msm_arch=_arch_from_config(arch_raw, cfg),
        **meta_raw,
    )


def cmd_train_msm(cfg: dict) -> int:
    meta_config = _meta_config(cfg)
    missing = [p for p in meta_config.source_checkpoints + meta_config.eval_targets
               if not Path(p).exists()]
    if missing:
        raise ConfigError(f"missing checkpoints: {missing}")
    msm, metadata, log = train_msm(meta_config)
    metadata.config_hash = cfg["config_hash"]
    paths = _paths(cfg)
    save_checkpoint(msm, metadata, paths["msm"] / "msm.pt")
    log.to_csv(paths["msm"] / "training_log.csv", config_hash=cfg["config_hash"])
    if log.snapshots:
        plot_training_curves(log.snapshots, paths["plots"] / "msm_training.png")
    print(f"msm trained: {metadata.extra.get('iterations', 0)} iterations, "
          f"clean accuracy {metadata.clean_accuracy:.4f}")
    return EXIT_OK


# ------------------------------------------------------------------- attack

def _write_image(path: Path, array: np.ndarray) -> None:
    import cv2

    data = array.astype(np.float32)
    if data.shape[-1] == 1:
        data = data[..., 0]
    elif data.shape[-1] == 3:
        data = data[..., ::-1]  # cv2 stores channels as BGR
    if not cv2.imwrite(str(path), data):
        raise ConfigError(f"could not write image {path}")


def _read_image(path: Path) -> np.ndarray:
    import cv2

    data = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if data is None:
        raise DataError(f"could not read image {path}")
    if data.ndim == 2:
        data = data[..., None]
    elif data.shape[-1] == 3:
        data = data[..., ::-1]
    return np.ascontiguousarray(data, dtype=np.float32)


def read_attack_archive(directory: str | Path) -> tuple[ExampleBatch, ExampleBatch, dict]:
    """Load (clean, adversarial) batches and the index of an attack archive."""
    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text())
    clean, adv, labels = [], [], []
    for rec in index["examples"]:
        clean.append(_read_image(directory / rec["clean"]))
        adv.append(_read_image(directory / rec["adversarial"]))
        labels.append(rec["label"])
    clean_t = torch.from_numpy(np.stack(clean))
    adv_t = torch.from_numpy(np.stack(adv))
    labels_t = torch.tensor(labels, dtype=torch.long)
    return (ExampleBatch(images=clean_t, labels=labels_t, validate=False),
            ExampleBatch(images=adv_t, labels=labels_t, validate=False), index)


def cmd_attack(cfg: dict, surrogate_id: str, n_examples: int, attack_name: str = "pgd",
               epsilon: float | None = None, steps: int | None = None,
               images_dir: str | None = None) -> int:
    """Craft adversarial examples on one surrogate and archive them losslessly."""
    attack = AttackConfig(**cfg.get("attack", {}))
    if epsilon is not None:
        attack = replace(attack, epsilon=epsilon)
    if steps is not None:
        attack = replace(attack, steps=steps)
    if attack.epsilon > attack.pixel_hi - attack.pixel_lo:
        raise ConfigError(
            f"epsilon {attack.epsilon} exceeds the pixel range "
            f"[{attack.pixel_lo}, {attack.pixel_hi}]"
        )
    surrogate = load_checkpoint(_checkpoint_path(cfg, surrogate_id)).model
    if images_dir:
        batch, _, _ = read_attack_archive(images_dir)
        batch = batch.subset(torch.arange(min(n_examples, len(batch))))
    else:
        test = _load_split(cfg, "test", derive_seed(cfg["master_seed"], "attack-order"))
        batch = test.subset(torch.arange(min(n_examples, len(test))))

    from .evaluate import _craft  # same crafting dispatch as the evaluator

    adv = _craft(attack_name, surrogate, batch, attack,
                 derive_seed(cfg["master_seed"], "attack", surrogate_id))
    delta = (adv.images - batch.images).abs()
    per_example = delta.flatten(1).max(dim=1).values
    stats = {
        "epsilon": attack.epsilon,
        "max_linf": float(per_example.max()),
        "mean_linf": float(per_example.mean()),
        "n": len(batch),
        "config_hash": cfg["config_hash"],
    }
    out_dir = _paths(cfg)["attacks"] / surrogate_id
    out_dir.mkdir(parents=True, exist_ok=True)
    index = {"surrogate": surrogate_id, "attack": attack_name, "epsilon": attack.epsilon,
             "config_hash": cfg["config_hash"], "examples": []}
    for i in range(len(batch)):
        clean_name, adv_name = f"clean_{i:05d}.tiff", f"adv_{i:05d}.tiff"
        _write_image(out_dir / clean_name, batch.images[i].numpy())
        _write_image(out_dir / adv_name, adv.images[i].numpy())
        index["examples"].append({"clean": clean_name, "adversarial": adv_name,
                                  "label": int(batch.labels[i])})
    _atomic_write_text(out_dir / "index.json", json.dumps(index, indent=2, sort_keys=True))
    _atomic_write_text(out_dir / "stats.json", json.dumps(stats, indent=2, sort_keys=True))
    print(f"archived {len(batch)} adversarial examples to {out_dir} "
          f"(max L-inf {stats['max_linf']:.4f})")
    return EXIT_OK


# ----------------------------------------------------------------- evaluate

def _eval_spec(cfg: dict, entry: dict) -> tuple[str, EvalSpec, dict | None]:
    entry = dict(entry)
    name = entry.pop("name", None) or entry.get("surrogate", {}).get("kind", "eval")
    sweep_cfg = entry.pop("sweep", None)
    targets = entry.pop("targets", None) or [e["id"] for e in cfg["zoo"] if e["role"] == "target"]
    spec = EvalSpec(
        surrogate=SurrogateSpec(**entry.pop("surrogate")),
        targets=targets,
        dataset=cfg["dataset"]["name"],
        seed=entry.pop("seed", derive_seed(cfg["master_seed"], "eval", name)),
        **entry,
    )
    return name, spec, sweep_cfg


def cmd_evaluate(cfg: dict, tv: int | None = None, epsilon: float | None = None,
                 targeted: bool = False) -> int:
    if not cfg["eval"]:
        raise ConfigError("config.eval is empty; nothing to evaluate")
    test = _load_split(cfg, "test", derive_seed(cfg["master_seed"], "eval-test-order"))
    paths = _paths(cfg)
    exit_code = EXIT_OK
    all_rows = TransferReport(metadata={"config_hash": cfg["config_hash"]})
    for entry in cfg["eval"]:
        name, spec, sweep_cfg = _eval_spec(cfg, entry)
        if tv is not None:
            spec = replace(spec, attack=replace(spec.attack, steps=tv))
        if epsilon is not None:
            spec = replace(spec, attack=replace(spec.attack, epsilon=epsilon))
        if targeted:
            spec = replace(spec, targeted=True)
        models = _load_models(cfg, set(spec.surrogate.ids) | set(spec.targets))
        if sweep_cfg:
            report = sweep(spec, sweep_cfg["axis"], sweep_cfg["values"], models, test)
            plot_sweep(report, sweep_cfg["axis"], paths["plots"] / f"{name}_sweep.png")
            errors = []
        else:
            report = TransferReport(metadata={})
            errors = []
            for tid in spec.targets:  # independent cells; a bad target reports, not aborts
                try:
                    part = transfer_eval(replace(spec, targets=[tid]), models, test)
                    report.rows.extend(part.rows)
                    report.metadata.update(part.metadata)
                except ConfigError as exc:
                    errors.append({"target": tid, "error": str(exc)})
                    exit_code = EXIT_CONFIG
        report.metadata["config_hash"] = cfg["config_hash"]
        report.metadata["name"] = name
        if errors:
            report.metadata["errors"] = errors
        report.to_csv(paths["reports"] / f"{name}.csv")
        report.to_json(paths["reports"] / f"{name}.json")
        all_rows.rows.extend(report.rows)
        for row in report.rows:
            print(f"{name}: {row['surrogate']} -> {row['target']}: "
                  f"{row['success_rate']:.4f} (n={row['n']})")
        for err in errors:
            print(f"error: {name}: target {err['target']}: {err['error']}", file=sys.stderr)
    if all_rows.rows:
        all_rows.to_csv(paths["reports"] / "combined.csv")
        all_rows.to_json(paths["reports"] / "combined.json")
        print(format_comparison(all_rows))
    return exit_code


# ------------------------------------------------------------------- report

def cmd_report(report_paths: list[str], output: str, force: bool = False) -> int:
    merged = merge_reports(report_paths, force=force)
    out = Path(output)
    write_long_table(merged, out / "merged.csv")
    merged.to_json(out / "merged.json")
    by_axis: dict[str, set] = {"T_v": set(), "epsilon": set()}
    for row in merged.rows:
        by_axis["T_v"].add(row["T_v"])
        by_axis["epsilon"].add(row["epsilon"])
    for axis, values in by_axis.items():
        if len(values) > 1:
            plot_sweep(merged, axis, out / f"merged_{axis}_sweep.png")
    print(format_comparison(merged))
    print(f"merged {len(report_paths)} report(s), {len(merged.rows)} rows -> {out}")
    return EXIT_OK


# --------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metasurrogate",
        description="Train surrogate models whose white-box attacks transfer, "
                    "and measure transfer success against a local model zoo.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None, help="override master_seed")
        p.add_argument("--output", default=None, help="override output_dir")

    p = sub.add_parser("train-zoo", help="train all source/target classifiers")
    add_common(p)
    p.add_argument("--epochs", type=int, default=None, help="override every recipe's epochs")

    p = sub.add_parser("train-msm", help="train the meta-surrogate model")
    add_common(p)
    p.add_argument("--epochs", type=int, default=None, help="override meta epochs")

    p = sub.add_parser("attack", help="craft and archive adversarial examples")
    add_common(p)
    p.add_argument("--surrogate", required=True, help="model id (zoo id or 'msm')")
    p.add_argument("--n", type=int, default=64, help="number of examples")
    p.add_argument("--attack", default="pgd", help="attack name")
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--tv", type=int, default=None, help="attack iterations")
    p.add_argument("--images", default=None, help="input archive directory")

    p = sub.add_parser("evaluate", help="run the transfer-success evaluations")
    add_common(p)
    p.add_argument("--tv", type=int, default=None, help="override attack iterations")
    p.add_argument("--epsilon", type=float, default=None, help="override attack budget")
    p.add_argument("--targeted", action="store_true", help="force targeted success counting")

    p = sub.add_parser("report", help="merge reports and emit plots")
    p.add_argument("reports", nargs="+", help="report CSV/JSON paths")
    p.add_argument("--output", required=True, help="directory for merged outputs")
    p.add_argument("--force", action="store_true", help="allow mismatched config hashes")
    return parser


def _dispatch(args) -> int:
    if args.command == "report":
        return cmd_report(args.reports, args.output, force=args.force)
    overrides = {"master_seed": args.seed, "output_dir": args.output}
    cfg = load_config(args.config, overrides)
    if args.command == "train-zoo":
        if args.epochs is not None:
            for entry in cfg["zoo"]:
                entry.setdefault("recipe", {})["epochs"] = args.epochs
            seal_config(cfg)
        return cmd_train_zoo(cfg)
    if args.command == "train-msm":
        if args.epochs is not None:
            cfg["meta"]["epochs"] = args.epochs
            seal_config(cfg)
        return cmd_train_msm(cfg)
    if args.command == "attack":
        return cmd_attack(cfg, args.surrogate, args.n, attack_name=args.attack,
                          epsilon=args.epsilon, steps=args.tv, images_dir=args.images)
    if args.command == "evaluate":
        return cmd_evaluate(cfg, tv=args.tv, epsilon=args.epsilon, targeted=args.targeted)
    raise ConfigError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    enable_determinism()
    try:
        return _dispatch(args)
    except (ConfigError, DataError, CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MetaSurrogateError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
