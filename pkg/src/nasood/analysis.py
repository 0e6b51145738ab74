"""Post-hoc architecture analysis: operation statistics, per-epoch stability
series, DOT cell diagrams, comparison tables, cross-dataset evaluation, and
alpha-vector export for external embedding tools.

All outputs are plain CSV or DOT text with deterministic byte layout.
"""

import re

import numpy as np

from .errors import ValidationError
from .genotype import Genotype, GenotypeMeta, STEPS, validate_genotype
from .operations import NONE_OP, PRIMITIVES
from .search_space import ArchitectureParameters, flatten_alpha, lex_edge_order
from .trainer import retrain_derived

NON_NONE_OPS = tuple(op for op in PRIMITIVES if op != NONE_OP)


def _count_ops(cells):
    counts = {op: 0 for op in PRIMITIVES}
    total = 0
    for cell in cells:
        for node in cell:
            for _, op in node:
                counts[op] += 1
                total += 1
    return counts, total


def op_percentages(genotype: Genotype, per_cell_type=False):
    """Fraction of genotype slots using each operation.

    Pools the normal and reduce cells (16 slots) by default; with
    per_cell_type=True returns {"normal": ..., "reduce": ...} over 8 slots
    each.  The zero operation can never be selected, so its fraction is 0.
    """
    validate_genotype(genotype)
    if per_cell_type:
        result = {}
        for cell_name in ("normal", "reduce"):
            counts, total = _count_ops([getattr(genotype, cell_name)])
            result[cell_name] = {op: counts[op] / total for op in PRIMITIVES}
        return result
    counts, total = _count_ops([genotype.normal, genotype.reduce])
    return {op: counts[op] / total for op in PRIMITIVES}


def temporal_stability(snapshots):
    """Per-epoch operation fractions over a snapshot sequence."""
    if not snapshots:
        raise ValidationError("snapshot list is empty")
    return [op_percentages(snapshot) for snapshot in snapshots]


def temporal_stability_csv(snapshots) -> str:
    """CSV rendering with columns (epoch, op, fraction); one row per non-none
    operation per epoch.
    """
    series = temporal_stability(snapshots)
    lines = ["epoch,op,fraction"]
    for epoch, fractions in enumerate(series):
        for op in NON_NONE_OPS:
            lines.append(f"{epoch},{op},{fractions[op]:.6f}")
    return "\n".join(lines) + "\n"


def _dot_node_name(pred: int) -> str:
    if pred == 0:
        return "c_{k-2}"
    if pred == 1:
        return "c_{k-1}"
    return str(pred - 2)


def _parse_dot_node_name(name: str) -> int:
    if name == "c_{k-2}":
        return 0
    if name == "c_{k-1}":
        return 1
    if name.isdigit():
        return int(name) + 2
    raise ValidationError(f"unknown DOT node name {name!r}")


def export_genotype_dot(genotype: Genotype) -> str:
    """Two digraphs (normal, reduce); one labeled edge per genotype choice
    plus unlabeled concatenation edges into the output node c_k.  Byte-stable
    for a given genotype.
    """
    validate_genotype(genotype)
    lines = []
    for cell_name in ("normal", "reduce"):
        lines.append(f"digraph {cell_name} {{")
        cell = getattr(genotype, cell_name)
        for node_idx, node in enumerate(cell):
            for pred, op in node:
                lines.append(
                    f'  "{_dot_node_name(pred)}" -> "{node_idx}" [label="{op}"];')
        for node_idx in range(len(cell)):
            lines.append(f'  "{node_idx}" -> "c_k";')
        lines.append("}")
    return "\n".join(lines) + "\n"


# The body terminator must be a closing brace on its own line: quoted node
# names such as "c_{k-2}" contain braces, so a bare \} would cut bodies short.
_DIGRAPH_RE = re.compile(r"digraph\s+(\w+)\s*\{(.*?)\n\}", re.DOTALL)
_EDGE_RE = re.compile(
    r'"([^"]+)"\s*->\s*"([^"]+)"\s*(?:\[label="([^"]+)"\])?\s*;')


def parse_genotype_dot(text: str) -> Genotype:
    """Inverse of export_genotype_dot on the labeled edge list; the metadata
    is not represented in DOT and comes back empty.
    """
    cells = {}
    for match in _DIGRAPH_RE.finditer(text):
        cell_name, body = match.group(1), match.group(2)
        nodes = [[] for _ in range(STEPS)]
        for src, dst, label in _EDGE_RE.findall(body):
            if not label:
                continue
            if not dst.isdigit():
                raise ValidationError(f"labeled edge into non-intermediate node {dst!r}")
            node_idx = int(dst)
            if not 0 <= node_idx < STEPS:
                raise ValidationError(f"intermediate node {node_idx} out of range")
            nodes[node_idx].append((_parse_dot_node_name(src), label))
        cells[cell_name] = tuple(tuple(node) for node in nodes)
    for cell_name in ("normal", "reduce"):
        if cell_name not in cells:
            raise ValidationError(f"DOT text is missing the {cell_name} digraph")
    genotype = Genotype(normal=cells["normal"], reduce=cells["reduce"],
                        meta=GenotypeMeta())
    validate_genotype(genotype)
    return genotype


_METRIC_KEYS = ("mode", "seed", "target_domain", "target_accuracy", "params_millions")


def comparison_table(results) -> str:
    """CSV over metrics payloads: one row per run plus mean/std rows per mode.

    Runs without a numeric target_accuracy (search-only metrics) appear with
    an empty accuracy cell and are excluded from the aggregates.  Std is the
    population standard deviation.
    """
    for i, payload in enumerate(results):
        for key in _METRIC_KEYS:
            if key not in payload:
                raise ValidationError(f"metrics payload {i} is missing key {key!r}")
    rows = sorted(results, key=lambda p: (str(p["mode"]), int(p["seed"]),
                                          str(p["target_domain"])))
    lines = ["mode,seed,target_domain,accuracy,params_millions"]
    by_mode = {}
    for payload in rows:
        acc = payload["target_accuracy"]
        acc_text = "" if acc is None else f"{float(acc):.4f}"
        lines.append(f"{payload['mode']},{payload['seed']},{payload['target_domain']},"
                     f"{acc_text},{float(payload['params_millions']):.4f}")
        if acc is not None:
            by_mode.setdefault(str(payload["mode"]), []).append(
                (float(acc), float(payload["params_millions"])))
    for mode in sorted(by_mode):
        accs = np.array([a for a, _ in by_mode[mode]])
        params = np.array([p for _, p in by_mode[mode]])
        lines.append(f"{mode},mean,,{accs.mean():.4f},{params.mean():.4f}")
        lines.append(f"{mode},std,,{accs.std():.4f},{params.std():.4f}")
    return "\n".join(lines) + "\n"


def cross_evaluate(genotype: Genotype, datasets, retrain_config):
    """Retrains one genotype on each dataset's leave-one-domain-out task and
    returns the per-dataset target accuracies, in input order.
    """
    accuracies = []
    for dataset in datasets:
        _, accuracy = retrain_derived(genotype, dataset, retrain_config)
        accuracies.append(accuracy)
    return accuracies


def alpha_csv_header():
    """Column names for export_alpha_vectors: cell, then edge (i, j) in
    lexicographic order, then operation, joined as cell_i_j_op.
    """
    rows = lex_edge_order()
    pairs = []
    seen = []
    for node in range(STEPS):
        for pred in range(2 + node):
            seen.append((pred, node + 2))
    for row in rows:
        pairs.append(seen[row])
    header = []
    for cell_name in ("normal", "reduce"):
        for i, j in pairs:
            for op in PRIMITIVES:
                header.append(f"{cell_name}_{i}_{j}_{op}")
    return header


def export_alpha_vectors(alphas) -> str:
    """One CSV row per ArchitectureParameters via flatten_alpha."""
    if not alphas:
        raise ValidationError("alpha list is empty")
    lines = [",".join(alpha_csv_header())]
    for alpha in alphas:
        if not isinstance(alpha, ArchitectureParameters):
            raise ValidationError("export_alpha_vectors expects ArchitectureParameters")
        vec = flatten_alpha(alpha)
        lines.append(",".join(f"{v:.17g}" for v in vec))
    return "\n".join(lines) + "\n"
