"""Command-line front end: gen, train, explain, bench, ablate, validate.

One JSON config file drives every command; CLI flags override fields.  All
outputs embed the resolved config and seed, and rerunning a command with the
same config and seed reproduces each output byte for byte.  Failures exit
nonzero with a single machine-parsable line: ``error:<category>: <detail>``.
"""

from __future__ import annotations

import copy
import json
import sys
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np

from .batch_explainer import (BatchExplainConfig, ablate,
                              compose_class_batches, explain_batch)
from .bench import (FRACTION_GRID, ecdf_pair, fidelity_curve, ks_report,
                    sweep_removal, augment_and_retrain)
from .explainers import (INSTANCE_METHODS, MaskOptConfig, NodeImportanceMap,
                         explain_with_method)
from .graphs import (SyntheticConfig, dataset_to_dict, generate_synthetic,
                     load_graphs)
from .model import (EpochMetrics, GnnModel, TrainConfig, init_model,
                    load_model, save_model, train)
from .report import write_chart, write_csv, write_json


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def default_config() -> dict:
    return {
        "seed": 0,
        "synthetic": asdict(SyntheticConfig()),
        "model": {"hidden": 32, "num_layers": 3},
        "train": asdict(TrainConfig()),
        "mask_opt": asdict(MaskOptConfig()),
        "batch_explain": {**asdict(BatchExplainConfig()),
                          "schedule": list(FRACTION_GRID)},
        "explain": {"split": "test"},
        "bench": {"split": "test"},
        "ablate": {"split": "train", "fidelity_threshold": 0.5},
        "validate": {"split": "test", "flag_fraction": 0.3},
        "paths": {"dataset": "dataset.json", "checkpoint": "checkpoint.json",
                  "maps": "importance_maps.json"},
    }


_SEEDED_SECTIONS = ("synthetic", "train", "mask_opt", "batch_explain")


def resolve_config(config_path: str | None, seed: int | None) -> dict:
    """Defaults <- config file <- --seed flag; strict about unknown keys."""
    cfg = default_config()
    if config_path is not None:
        try:
            raw = json.loads(Path(config_path).read_text())
        except FileNotFoundError as exc:
            raise CliError("missing-input", f"config file not found: {exc}")
        except json.JSONDecodeError as exc:
            raise CliError("invalid-config", f"config is not valid JSON: {exc}")
        if not isinstance(raw, dict):
            raise CliError("invalid-config", "config root must be an object")
        for section, value in raw.items():
            if section not in cfg:
                raise CliError("invalid-config", f"unknown config section {section!r}")
            if section == "seed":
                continue
            if not isinstance(value, dict):
                raise CliError("invalid-config", f"section {section!r} must be an object")
            for key, field_value in value.items():
                if key not in cfg[section]:
                    raise CliError("invalid-config",
                                   f"unknown field {section}.{key}")
                cfg[section][key] = copy.deepcopy(field_value)
        if "seed" in raw:
            cfg["seed"] = int(raw["seed"])
            for section in _SEEDED_SECTIONS:
                if "seed" not in raw.get(section, {}):
                    cfg[section]["seed"] = cfg["seed"]
    if seed is not None:
        cfg["seed"] = int(seed)
        for section in _SEEDED_SECTIONS:
            cfg[section]["seed"] = int(seed)
    return cfg


def _synthetic_config(cfg: dict) -> SyntheticConfig:
    fields = dict(cfg["synthetic"])
    fields["nodes_per_graph_range"] = tuple(fields["nodes_per_graph_range"])
    return SyntheticConfig(**fields)


def _batch_config(cfg: dict) -> BatchExplainConfig:
    fields = dict(cfg["batch_explain"])
    fields["schedule"] = tuple(fields["schedule"])
    return BatchExplainConfig(**fields)


def _load_dataset(cfg: dict, out: Path):
    path = out / cfg["paths"]["dataset"]
    if not path.exists():
        raise CliError("missing-input", f"dataset file not found: {path}")
    return load_graphs(path)


def _load_model(cfg: dict, out: Path) -> GnnModel:
    path = out / cfg["paths"]["checkpoint"]
    if not path.exists():
        raise CliError("missing-input", f"checkpoint not found: {path}")
    return load_model(path)


def _methods_list(methods: str | None) -> list[str]:
    if methods is None:
        return list(INSTANCE_METHODS)
    out = [m.strip() for m in methods.split(",") if m.strip()]
    for m in out:
        if m not in INSTANCE_METHODS:
            raise CliError("unknown-method",
                           f"{m!r} is not one of {', '.join(INSTANCE_METHODS)}")
    if not out:
        raise CliError("invalid-config", "empty methods list")
    return out


def _instance_maps(model, dataset, indices, method, cfg) -> list[NodeImportanceMap]:
    maps = []
    for i in indices:
        g = dataset.graphs[i]
        gt = dataset.ground_truth_for(i)
        if method == "oracle" and gt is None:
            raise CliError("invalid-input",
                           f"oracle explainer needs ground truth (graph {g.id})")
        maps.append(explain_with_method(
            method, model, g, ground_truth=gt,
            mask_cfg=MaskOptConfig(**cfg["mask_opt"]),
            seed=cfg["mask_opt"]["seed"]))
    return maps


def _run(fn) -> None:
    try:
        fn()
    except CliError as exc:
        click.echo(f"error:{exc.category}: {exc}", err=True)
        sys.exit(2)
    except FileNotFoundError as exc:
        click.echo(f"error:missing-input: {exc}", err=True)
        sys.exit(2)
    except (ValueError, KeyError, TypeError) as exc:
        click.echo(f"error:invalid-input: {exc}", err=True)
        sys.exit(2)


def _common(fn):
    fn = click.option("--config", "config_path", type=str, default=None,
                      help="JSON run config; flags override its fields.")(fn)
    fn = click.option("--out", "out_dir", type=str, default=".",
                      help="Output directory.")(fn)
    fn = click.option("--seed", type=int, default=None,
                      help="Global seed override for every section.")(fn)
    return fn


@click.group()
def main():
    """Explainer benchmark on synthetic cell graphs."""


@main.command()
@_common
def gen(config_path, out_dir, seed):
    """Generate the synthetic dataset file."""

    def body():
        cfg = resolve_config(config_path, seed)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ds = generate_synthetic(_synthetic_config(cfg))
        payload = dataset_to_dict(ds)
        write_json(out / cfg["paths"]["dataset"], payload, cfg)
        click.echo(f"wrote {out / cfg['paths']['dataset']} "
                   f"({len(ds.graphs)} graphs)")

    _run(body)


@main.command(name="train")
@_common
def train_cmd(config_path, out_dir, seed):
    """Train the classifier; write checkpoint and per-epoch metrics."""

    def body():
        cfg = resolve_config(config_path, seed)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ds = _load_dataset(cfg, out)
        template = init_model(ds.graphs[0].feature_dim, ds.num_classes,
                              hidden=cfg["model"]["hidden"],
                              num_layers=cfg["model"]["num_layers"])
        model, metrics = train(template, ds, TrainConfig(**cfg["train"]))
        ckpt = out / cfg["paths"]["checkpoint"]
        save_model(model, ckpt)
        _append_config_to_checkpoint(ckpt, cfg)
        rows = [(m.epoch, m.train_loss, m.train_accuracy, m.val_accuracy)
                for m in metrics]
        write_csv(out / "metrics.csv",
                  ["epoch", "train_loss", "train_accuracy", "val_accuracy"],
                  rows, cfg)
        best = max(m.val_accuracy for m in metrics)
        click.echo(f"wrote {ckpt} (best val accuracy {best:.3f})")

    _run(body)


def _append_config_to_checkpoint(path: Path, cfg: dict) -> None:
    payload = json.loads(path.read_text())
    payload["config"] = cfg
    path.write_text(json.dumps(payload, sort_keys=True,
                               separators=(",", ":")) + "\n")


@main.command()
@_common
@click.option("--methods", type=str, default=None,
              help="Comma-separated method tags (instance scope).")
@click.option("--scope", type=click.Choice(["instance", "batch"]),
              default="instance")
@click.option("--ks-mode", "ks_mode", type=click.Choice(["soft", "binary"]),
              default=None, help="Override the batch KS mode.")
def explain(config_path, out_dir, seed, methods, scope, ks_mode):
    """Write importance maps for a split (instance or batch scope)."""

    def body():
        cfg = resolve_config(config_path, seed)
        if ks_mode is not None:
            cfg["batch_explain"]["ks_mode"] = (
                "soft_confidence" if ks_mode == "soft" else "binary_label")
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ds = _load_dataset(cfg, out)
        model = _load_model(cfg, out)
        split = cfg["explain"]["split"]
        indices = ds.indices(split)
        if not indices:
            raise CliError("invalid-input", f"split {split!r} is empty")
        maps: list[NodeImportanceMap] = []
        if scope == "instance":
            for method in _methods_list(methods):
                maps.extend(_instance_maps(model, ds, indices, method, cfg))
        else:
            bcfg = _batch_config(cfg)
            batches = compose_class_batches(ds, split, bcfg.batch_cap,
                                            bcfg.seed)
            batch_payload = {}
            for cls in sorted(batches):
                graphs = [ds.graphs[i] for i in batches[cls]]
                if not graphs:
                    continue
                result = explain_batch(model, graphs, bcfg)
                maps.extend(result.importance_maps)
                batch_payload[str(cls)] = result.to_dict()
            write_json(out / "batch_explanation.json",
                       {"per_class": batch_payload}, cfg)
        write_json(out / cfg["paths"]["maps"],
                   {"maps": [m.to_dict() for m in maps]}, cfg)
        click.echo(f"wrote {out / cfg['paths']['maps']} ({len(maps)} maps)")

    _run(body)


@main.command()
@_common
@click.option("--methods", type=str, default=None,
              help="Comma-separated method tags to benchmark.")
@click.option("--svg", is_flag=True, default=False,
              help="Also write SVG line charts.")
def bench(config_path, out_dir, seed, methods, svg):
    """Removal sweeps, ECDF pair, KS statistic, and fidelity per method."""

    def body():
        cfg = resolve_config(config_path, seed)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ds = _load_dataset(cfg, out)
        model = _load_model(cfg, out)
        split = cfg["bench"]["split"]
        indices = ds.indices(split)
        if not indices:
            raise CliError("invalid-input", f"split {split!r} is empty")
        graphs = [ds.graphs[i] for i in indices]
        ks_rows = []
        ecdf_rows = []
        fid_rows = []
        ecdf_series = {}
        fid_series = {}
        for method in _methods_list(methods):
            maps = _instance_maps(model, ds, indices, method, cfg)
            sweep = sweep_removal(model, graphs, maps)
            pair = ecdf_pair(sweep)
            rep = ks_report(method, pair)
            ks_rows.append((method, rep.d, rep.p_value, rep.n, rep.m))
            for j, f in enumerate(pair.fractions):
                ecdf_rows.append((method, float(f), float(pair.f_most[j]),
                                  float(pair.f_least[j])))
            curve = fidelity_curve(model, graphs, maps)
            fid_rows.extend((method, t, s) for t, s in curve)
            fracs = [float(f) for f in pair.fractions]
            ecdf_series[method] = (fracs, [float(v) for v in pair.f_most],
                                   [float(v) for v in pair.f_least])
            fid_series[method] = ([t for t, _ in curve], [s for _, s in curve])
        write_csv(out / "ks_report.csv",
                  ["explainer", "D", "p_value", "n", "m"], ks_rows, cfg)
        write_csv(out / "ecdf.csv",
                  ["explainer", "fraction", "F_most", "F_least"],
                  ecdf_rows, cfg)
        write_csv(out / "fidelity_curve.csv",
                  ["explainer", "threshold", "score"], fid_rows, cfg)
        if svg:
            for method, (fr, fm, fl) in ecdf_series.items():
                write_chart(out / f"ecdf_{method}.svg",
                            [("most removed", fr, fm), ("least removed", fr, fl)],
                            f"label-change ECDF: {method}",
                            "removal fraction", "fraction changed")
            write_chart(out / "fidelity_curve.svg",
                        [(m, xs, ys) for m, (xs, ys) in fid_series.items()],
                        "fidelity vs importance threshold",
                        "threshold", "fidelity")
        click.echo(f"wrote {out / 'ks_report.csv'} "
                   f"({len(ks_rows)} explainers)")

    _run(body)


@main.command(name="ablate")
@_common
def ablate_cmd(config_path, out_dir, seed):
    """Objective-term ablation table for the batch explainer."""

    def body():
        cfg = resolve_config(config_path, seed)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ds = _load_dataset(cfg, out)
        model = _load_model(cfg, out)
        rows = ablate(model, ds, _batch_config(cfg),
                      split=cfg["ablate"]["split"],
                      fidelity_threshold=cfg["ablate"]["fidelity_threshold"])
        csv_rows = [(r.name, int(r.uses_mi), int(r.uses_similarity),
                     int(r.uses_ks_sum), int(r.uses_ks_var), r.fidelity)
                    for r in rows]
        write_csv(out / "ablation.csv",
                  ["configuration", "term_mi", "term_similarity",
                   "term_ks_sum", "term_ks_var", "fidelity"],
                  csv_rows, cfg)
        click.echo(f"wrote {out / 'ablation.csv'} ({len(rows)} rows)")

    _run(body)


@main.command()
@_common
@click.option("--methods", type=str, default=None,
              help="Comma-separated method tags to validate.")
def validate(config_path, out_dir, seed, methods):
    """Importance-flag retraining table: KS value vs accuracy gain."""

    def body():
        cfg = resolve_config(config_path, seed)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ds = _load_dataset(cfg, out)
        model = _load_model(cfg, out)
        split = cfg["validate"]["split"]
        eval_indices = ds.indices(split)
        if not eval_indices:
            raise CliError("invalid-input", f"split {split!r} is empty")
        eval_graphs = [ds.graphs[i] for i in eval_indices]
        all_indices = list(range(len(ds.graphs)))
        template = init_model(ds.graphs[0].feature_dim, ds.num_classes,
                              hidden=cfg["model"]["hidden"],
                              num_layers=cfg["model"]["num_layers"])
        tcfg = TrainConfig(**cfg["train"])
        rows = []
        baseline_row = None
        for method in _methods_list(methods):
            maps_all = _instance_maps(model, ds, all_indices, method, cfg)
            by_id = {m.graph_id: m for m in maps_all}
            eval_maps = [by_id[g.id] for g in eval_graphs]
            sweep = sweep_removal(model, eval_graphs, eval_maps)
            rep = ks_report(method, ecdf_pair(sweep))
            report = augment_and_retrain(template, ds, maps_all, tcfg,
                                         cfg["validate"]["flag_fraction"])
            if baseline_row is None:
                baseline_row = tuple(["none", "", ""]
                                     + [report.baseline_per_class[c]
                                        for c in range(ds.num_classes)])
            rows.append(tuple([method, rep.d, rep.p_value]
                              + [report.augmented_per_class[c]
                                 for c in range(ds.num_classes)]))
        header = (["explainer", "D", "p_value"]
                  + [f"class{c}_accuracy" for c in range(ds.num_classes)])
        write_csv(out / "validation.csv", header, [baseline_row] + rows, cfg)
        click.echo(f"wrote {out / 'validation.csv'} ({len(rows)} explainers)")

    _run(body)


if __name__ == "__main__":
    main()
