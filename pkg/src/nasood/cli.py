"""Command-line interface orchestrating the full workflow.

Subcommands: synth-data, search, retrain, analyze (ops | stability | dot |
table | alphas), cross-eval.  A JSON --config file merges under explicit
flags; the fully resolved options are echoed into the run directory.  Exit
codes: 0 success, 2 usage/configuration problems (no partial outputs), 1
anything else.
"""

import argparse
import json
import os
import re
import sys
import time
from pathlib import Path

import numpy as np

from .analysis import (
    comparison_table,
    cross_evaluate,
    export_alpha_vectors,
    export_genotype_dot,
    op_percentages,
    temporal_stability_csv,
)
from .config import AuxLossWeights, RetrainConfig, SearchConfig
from .datasets import (
    SplitSpec,
    SynthSpec,
    generate_synth_dataset,
    load_dataset,
    load_folder_dataset,
    make_splits,
    save_dataset,
    spec_provenance,
)
from .errors import ConfigurationError, NasOodError
from .genotype import load_genotype, save_genotype
from .operations import PRIMITIVES
from .search_space import ArchitectureParameters, instantiate_derived_network, params_millions
from .trainer import retrain_derived, save_history, search


class UsageError(Exception):
    pass


MODE_MAP = {"nasood": "nasood", "nasood-no-cycle": "nasood_no_cycle",
            "darts": "darts_baseline", "random": "random_sample"}

SEARCH_DEFAULTS = {
    "data": None, "target_domain": None, "mode": "nasood", "epochs": 50,
    "layers": 8, "init_channels": 16, "batch_size": 64, "lr_omega": 0.025,
    "lr_alpha": 3e-4, "lr_gen": 5e-6, "lambda_cycle": 1.0, "lambda_ce": 1.0,
    "gen_channels": 4, "pretrain_epochs": 10, "image_size": 64,
    "seed": None, "deterministic": False, "out": None,
}

RETRAIN_DEFAULTS = {
    "data": None, "genotype": None, "target_domain": None, "epochs": 30,
    "layers": 8, "init_channels": 16, "batch_size": 64, "lr_omega": 0.025,
    "val_fraction": 0.1, "augment": False, "cosine": True, "image_size": 64,
    "seed": None, "deterministic": False, "out": None,
}

SYNTH_DEFAULTS = {
    "num_classes": 4, "num_domains": 4, "image_size": 16,
    "samples_per_class": 200, "seed": None, "deterministic": False, "out": None,
}

CROSS_EVAL_DEFAULTS = {
    "genotype": None, "target_domain": None, "epochs": 30, "layers": 8,
    "init_channels": 16, "batch_size": 64, "lr_omega": 0.025,
    "val_fraction": 0.1, "image_size": 64,
    "seed": None, "deterministic": False, "out": None,
}

ANALYZE_DEFAULTS = {"seed": None, "deterministic": False, "out": None}


def _resolve(args, defaults):
    """defaults <- config file <- explicit flags; unknown config keys fail."""
    resolved = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            with open(config_path) as fh:
                file_values = json.load(fh)
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(file_values, dict):
            raise UsageError("config file must contain a JSON object")
        unknown = sorted(set(file_values) - set(defaults))
        if unknown:
            raise UsageError(f"unknown config keys: {unknown}")
        resolved.update(file_values)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    if resolved.get("seed") is None:
        env = os.environ.get("NASOOD_SEED")
        if env is not None:
            try:
                resolved["seed"] = int(env)
            except ValueError as exc:
                raise UsageError(f"NASOOD_SEED must be an integer, got {env!r}") from exc
        else:
            resolved["seed"] = 0
    return resolved


def _require(resolved, *keys):
    for key in keys:
        if resolved.get(key) in (None, ""):
            raise UsageError(f"--{key.replace('_', '-')} is required")


def _load_any_dataset(path, image_size):
    path = Path(path)
    if path.is_dir():
        return load_folder_dataset(path, image_size=image_size)
    return load_dataset(path)


def _write_text(out, text):
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _run_dir(resolved, kind):
    if resolved.get("out"):
        run_dir = Path(resolved["out"])
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        run_dir = Path("runs") / f"{stamp}_{kind}_{resolved['seed']}"
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def cmd_synth_data(args):
    resolved = _resolve(args, SYNTH_DEFAULTS)
    _require(resolved, "out")
    spec = SynthSpec(num_classes=resolved["num_classes"],
                     num_domains=resolved["num_domains"],
                     image_size=resolved["image_size"],
                     samples_per_domain_per_class=resolved["samples_per_class"],
                     seed=resolved["seed"])
    spec.validate()
    dataset = generate_synth_dataset(spec)
    path = save_dataset(dataset, resolved["out"], provenance=spec_provenance(spec))
    print(f"wrote {len(dataset)} samples to {path}")
    return 0


def _search_config(resolved):
    return SearchConfig(
        mode=MODE_MAP[resolved["mode"]],
        layers=resolved["layers"],
        init_channels=resolved["init_channels"],
        epochs=resolved["epochs"],
        batch_size=resolved["batch_size"],
        lr_omega=resolved["lr_omega"],
        lr_alpha=resolved["lr_alpha"],
        lr_generator=resolved["lr_gen"],
        gen_channels=resolved["gen_channels"],
        pretrain_epochs=resolved["pretrain_epochs"],
        aux_weights=AuxLossWeights(lambda_cycle=resolved["lambda_cycle"],
                                   lambda_ce=resolved["lambda_ce"]),
        seed=resolved["seed"],
        deterministic=bool(resolved["deterministic"]),
    )


def cmd_search(args):
    resolved = _resolve(args, SEARCH_DEFAULTS)
    _require(resolved, "data", "target_domain")
    if resolved["mode"] not in MODE_MAP:
        raise UsageError(f"--mode must be one of {sorted(MODE_MAP)}")
    config = _search_config(resolved)
    config.validate()

    dataset = _load_any_dataset(resolved["data"], resolved["image_size"])
    source_pool, _, _ = make_splits(dataset, SplitSpec(
        target_domain=resolved["target_domain"], val_fraction=0.0,
        seed=resolved["seed"]))

    run_dir = _run_dir(resolved, resolved["mode"])
    _write_json(run_dir / "resolved_config.json", resolved)

    started = time.time()
    result = search(source_pool, config)
    genotype, history, snapshots = result
    wall = time.time() - started

    save_genotype(genotype, run_dir / "genotype.json")
    save_history(history, run_dir / "history.jsonl")
    snap_dir = run_dir / "snapshots"
    snap_dir.mkdir(exist_ok=True)
    for epoch, snapshot in enumerate(snapshots):
        save_genotype(snapshot, snap_dir / f"epoch_{epoch}.json")
    alpha = getattr(result, "alpha", None)
    if alpha is not None:
        np.savez(run_dir / "alpha.npz", normal=alpha.normal, reduce=alpha.reduce)

    derived = instantiate_derived_network(
        genotype,
        RetrainConfig(layers=config.layers, init_channels=config.init_channels,
                      num_classes=dataset.num_classes, seed=config.seed),
        in_channels=dataset.channels)
    _write_json(run_dir / "metrics.json", {
        "mode": config.mode,
        "seed": config.seed,
        "target_domain": resolved["target_domain"],
        "target_accuracy": None,
        "params_millions": params_millions(derived),
        "epochs": config.epochs,
        "wall_time_s": 0.0 if config.deterministic else wall,
    })
    print(f"search finished: {run_dir}")
    return 0


def cmd_retrain(args):
    resolved = _resolve(args, RETRAIN_DEFAULTS)
    _require(resolved, "data", "genotype", "target_domain")
    config = RetrainConfig(
        target_domain=resolved["target_domain"],
        layers=resolved["layers"],
        init_channels=resolved["init_channels"],
        epochs=resolved["epochs"],
        batch_size=resolved["batch_size"],
        lr=resolved["lr_omega"],
        val_fraction=resolved["val_fraction"],
        augment=bool(resolved["augment"]),
        cosine=bool(resolved["cosine"]),
        seed=resolved["seed"],
        deterministic=bool(resolved["deterministic"]),
    )
    config.validate()
    genotype = load_genotype(resolved["genotype"])
    dataset = _load_any_dataset(resolved["data"], resolved["image_size"])

    run_dir = _run_dir(resolved, "retrain")
    _write_json(run_dir / "resolved_config.json", resolved)

    started = time.time()
    network, accuracy = retrain_derived(genotype, dataset, config)
    wall = time.time() - started
    _write_json(run_dir / "metrics.json", {
        "mode": "retrain",
        "seed": config.seed,
        "target_domain": config.target_domain,
        "target_accuracy": accuracy,
        "params_millions": params_millions(network),
        "epochs": config.epochs,
        "wall_time_s": 0.0 if config.deterministic else wall,
    })
    print(f"target accuracy {accuracy:.4f}; metrics in {run_dir}")
    return 0


def cmd_analyze_ops(args):
    _resolve(args, ANALYZE_DEFAULTS)
    genotype = load_genotype(args.genotype)
    if args.per_cell_type:
        table = op_percentages(genotype, per_cell_type=True)
        lines = ["cell,op,fraction"]
        for cell_name in ("normal", "reduce"):
            for op in PRIMITIVES:
                lines.append(f"{cell_name},{op},{table[cell_name][op]:.6f}")
    else:
        table = op_percentages(genotype)
        lines = ["op,fraction"]
        for op in PRIMITIVES:
            lines.append(f"{op},{table[op]:.6f}")
    _write_text(args.out, "\n".join(lines) + "\n")
    return 0


def _numbered_snapshots(directory):
    directory = Path(directory)
    found = []
    for path in directory.glob("epoch_*.json"):
        match = re.fullmatch(r"epoch_(\d+)\.json", path.name)
        if match:
            found.append((int(match.group(1)), path))
    if not found:
        raise NasOodError(f"no epoch_*.json snapshots under {directory}")
    return [load_genotype(path) for _, path in sorted(found)]


def cmd_analyze_stability(args):
    _resolve(args, ANALYZE_DEFAULTS)
    snapshots = _numbered_snapshots(args.snapshots)
    _write_text(args.out, temporal_stability_csv(snapshots))
    return 0


def cmd_analyze_dot(args):
    _resolve(args, ANALYZE_DEFAULTS)
    genotype = load_genotype(args.genotype)
    _write_text(args.out, export_genotype_dot(genotype))
    return 0


def cmd_analyze_table(args):
    _resolve(args, ANALYZE_DEFAULTS)
    payloads = []
    for path in args.metrics:
        with open(path) as fh:
            payloads.append(json.load(fh))
    _write_text(args.out, comparison_table(payloads))
    return 0


def cmd_analyze_alphas(args):
    _resolve(args, ANALYZE_DEFAULTS)
    alphas = []
    for path in args.alphas:
        arrays = np.load(path)
        alphas.append(ArchitectureParameters(normal=arrays["normal"],
                                             reduce=arrays["reduce"]))
    _write_text(args.out, export_alpha_vectors(alphas))
    return 0


def cmd_cross_eval(args):
    resolved = _resolve(args, CROSS_EVAL_DEFAULTS)
    _require(resolved, "genotype", "target_domain")
    if not args.data:
        raise UsageError("--data is required")
    config = RetrainConfig(
        target_domain=resolved["target_domain"],
        layers=resolved["layers"],
        init_channels=resolved["init_channels"],
        epochs=resolved["epochs"],
        batch_size=resolved["batch_size"],
        lr=resolved["lr_omega"],
        val_fraction=resolved["val_fraction"],
        seed=resolved["seed"],
        deterministic=bool(resolved["deterministic"]),
    )
    config.validate()
    genotype = load_genotype(resolved["genotype"])
    datasets = [_load_any_dataset(p, resolved["image_size"]) for p in args.data]
    accuracies = cross_evaluate(genotype, datasets, config)
    lines = ["dataset,accuracy"]
    for dataset, accuracy in zip(datasets, accuracies):
        lines.append(f"{dataset.name},{accuracy:.4f}")
    _write_text(resolved["out"], "\n".join(lines) + "\n")
    return 0


def _add_common(parser):
    parser.add_argument("--config", help="JSON file of options; flags win")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--deterministic", action="store_true", default=None)
    parser.add_argument("--out")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="nasood",
        description="Architecture search with an adversarial data generator "
                    "for out-of-distribution robustness.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate the synthetic multi-domain benchmark")
    _add_common(p)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--num-domains", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--samples-per-class", type=int,
                   help="samples per (domain, class) cell")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("search", help="run architecture search")
    _add_common(p)
    p.add_argument("--data")
    p.add_argument("--target-domain")
    p.add_argument("--mode", choices=sorted(MODE_MAP))
    p.add_argument("--epochs", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--init-channels", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr-omega", type=float)
    p.add_argument("--lr-alpha", type=float)
    p.add_argument("--lr-gen", type=float)
    p.add_argument("--lambda-cycle", type=float)
    p.add_argument("--lambda-ce", type=float)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("retrain", help="retrain a derived genotype from scratch")
    _add_common(p)
    p.add_argument("--data")
    p.add_argument("--genotype")
    p.add_argument("--target-domain")
    p.add_argument("--epochs", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--init-channels", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr-omega", type=float)
    p.set_defaults(func=cmd_retrain)

    p = sub.add_parser("analyze", help="architecture analysis outputs")
    asub = p.add_subparsers(dest="analysis", required=True)

    pa = asub.add_parser("ops", help="operation fractions of a genotype")
    _add_common(pa)
    pa.add_argument("--genotype", required=True)
    pa.add_argument("--per-cell-type", action="store_true")
    pa.set_defaults(func=cmd_analyze_ops)

    pa = asub.add_parser("stability", help="per-epoch operation fractions")
    _add_common(pa)
    pa.add_argument("--snapshots", required=True,
                    help="directory of epoch_*.json snapshots")
    pa.set_defaults(func=cmd_analyze_stability)

    pa = asub.add_parser("dot", help="DOT cell diagrams for a genotype")
    _add_common(pa)
    pa.add_argument("--genotype", required=True)
    pa.set_defaults(func=cmd_analyze_dot)

    pa = asub.add_parser("table", help="comparison table over metrics files")
    _add_common(pa)
    pa.add_argument("--metrics", nargs="+", required=True)
    pa.set_defaults(func=cmd_analyze_table)

    pa = asub.add_parser("alphas", help="CSV export of alpha vectors")
    _add_common(pa)
    pa.add_argument("--alphas", nargs="+", required=True,
                    help="alpha.npz files saved by search runs")
    pa.set_defaults(func=cmd_analyze_alphas)

    p = sub.add_parser("cross-eval", help="retrain one genotype on several datasets")
    _add_common(p)
    p.add_argument("--genotype")
    p.add_argument("--data", nargs="+")
    p.add_argument("--target-domain")
    p.add_argument("--epochs", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--init-channels", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr-omega", type=float)
    p.set_defaults(func=cmd_cross_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except NasOodError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
