"""Discrete architecture descriptions and their JSON serialization.

A genotype holds, for each of the four intermediate nodes of a cell, two
(predecessor, operation) pairs.  Node i may only consume outputs of the two
cell inputs (predecessors 0 and 1) and earlier intermediate nodes
(predecessors 2 .. i+1).
"""

import json
from dataclasses import dataclass, field

from .errors import ValidationError
from .operations import NONE_OP, PRIMITIVES

STEPS = 4


@dataclass(frozen=True)
class GenotypeMeta:
    dataset: str = ""
    seed: int = 0
    epoch: int = 0


@dataclass(frozen=True)
class Genotype:
    """One discrete cell pair (normal and reduction) plus provenance metadata."""

    normal: tuple
    reduce: tuple
    meta: GenotypeMeta = field(default_factory=GenotypeMeta)


def validate_genotype(genotype: Genotype):
    """Raises ValidationError unless the genotype satisfies every structural rule."""
    for cell_name in ("normal", "reduce"):
        cell = getattr(genotype, cell_name)
        if len(cell) != STEPS:
            raise ValidationError(
                f"{cell_name} cell must have {STEPS} nodes, got {len(cell)}")
        for node_idx, node in enumerate(cell):
            if len(node) != 2:
                raise ValidationError(
                    f"{cell_name} node {node_idx} must have exactly 2 edges, got {len(node)}")
            preds = []
            for pred, op in node:
                if not isinstance(pred, int) or isinstance(pred, bool):
                    raise ValidationError(
                        f"{cell_name} node {node_idx}: predecessor {pred!r} is not an int")
                if not 0 <= pred < node_idx + 2:
                    raise ValidationError(
                        f"{cell_name} node {node_idx}: predecessor {pred} out of range "
                        f"[0, {node_idx + 2})")
                if op not in PRIMITIVES:
                    raise ValidationError(
                        f"{cell_name} node {node_idx}: unknown operation {op!r}")
                if op == NONE_OP:
                    raise ValidationError(
                        f"{cell_name} node {node_idx}: the zero operation may not be selected")
                preds.append(pred)
            if preds[0] == preds[1]:
                raise ValidationError(
                    f"{cell_name} node {node_idx}: predecessors must be distinct, "
                    f"got {preds[0]} twice")


def _cell_to_json(cell):
    return [[[pred, op] for pred, op in node] for node in cell]


def _cell_from_json(raw, cell_name):
    try:
        return tuple(
            tuple((int(pred), str(op)) for pred, op in node) for node in raw)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"malformed {cell_name} cell in genotype JSON: {exc}") from exc


def to_json_dict(genotype: Genotype) -> dict:
    return {
        "normal": _cell_to_json(genotype.normal),
        "reduce": _cell_to_json(genotype.reduce),
        "meta": {
            "dataset": genotype.meta.dataset,
            "seed": genotype.meta.seed,
            "epoch": genotype.meta.epoch,
        },
    }


def from_json_dict(raw: dict) -> Genotype:
    for key in ("normal", "reduce", "meta"):
        if key not in raw:
            raise ValidationError(f"genotype JSON is missing key {key!r}")
    meta_raw = raw["meta"]
    try:
        meta = GenotypeMeta(
            dataset=str(meta_raw["dataset"]),
            seed=int(meta_raw["seed"]),
            epoch=int(meta_raw["epoch"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed meta in genotype JSON: {exc}") from exc
    genotype = Genotype(
        normal=_cell_from_json(raw["normal"], "normal"),
        reduce=_cell_from_json(raw["reduce"], "reduce"),
        meta=meta,
    )
    validate_genotype(genotype)
    return genotype


def dumps(genotype: Genotype) -> str:
    """Canonical JSON text; identical genotypes serialize to identical bytes."""
    return json.dumps(to_json_dict(genotype), indent=2) + "\n"


def loads(text: str) -> Genotype:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"genotype JSON does not parse: {exc}") from exc
    return from_json_dict(raw)


def save_genotype(genotype: Genotype, path):
    validate_genotype(genotype)
    with open(path, "w") as fh:
        fh.write(dumps(genotype))


def load_genotype(path) -> Genotype:
    with open(path) as fh:
        return loads(fh.read())
