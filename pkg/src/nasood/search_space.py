"""Cell-based search space: softmax relaxation, weight-sharing supernet,
genotype derivation, and the discrete network used for retraining.

Cells have 2 input nodes, 4 intermediate nodes, and 1 output node that
concatenates the intermediate nodes.  Every intermediate node receives one
mixed operation per earlier node, so a cell carries 2+3+4+5 = 14 edges.
Reduction cells sit at layer indices floor(L/3) and floor(2L/3) and double
the channel count.
"""

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from dataclasses import dataclass

from .errors import ConfigurationError, InternalError, InvalidParameterError
from .genotype import Genotype, GenotypeMeta, STEPS, validate_genotype
from .operations import (
    NONE_OP,
    OPS,
    PRIMITIVES,
    BatchStatNorm2d,
    FactorizedReduce,
    ReLUConvBN,
    batch_stat_norm,
    build_op,
    dilated_depthwise_conv2d,
)

MULTIPLIER = 4
STEM_MULTIPLIER = 3

NUM_OPS = len(PRIMITIVES)


def num_edges(steps: int = STEPS) -> int:
    return sum(2 + i for i in range(steps))


def edge_rows(steps: int = STEPS):
    """Row order of the alpha matrices: node-major, predecessor ascending.

    Returns (node_index, predecessor_index) per row.
    """
    rows = []
    for node in range(steps):
        for pred in range(2 + node):
            rows.append((node, pred))
    return rows


def lex_edge_order(steps: int = STEPS):
    """Alpha row indices reordered so edges (i, j) come out lexicographically,
    where i is the predecessor and j = node + 2 in the DAG numbering.  Used by
    flatten_alpha so exported vectors have a documented, stable layout.
    """
    keyed = [(pred, node + 2, row) for row, (node, pred) in enumerate(edge_rows(steps))]
    return [row for _, _, row in sorted(keyed)]


def softmax_relaxation(alpha_edge) -> np.ndarray:
    """Softmax over one edge's operation scores, stable under large magnitudes."""
    arr = np.asarray(alpha_edge, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidParameterError(f"alpha_edge must be 1-D, got shape {arr.shape}")
    if arr.size == 0:
        raise InvalidParameterError("alpha_edge must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise InvalidParameterError("alpha_edge contains non-finite entries")
    shifted = arr - arr.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


@dataclass
class ArchitectureParameters:
    """Continuous architecture scores: one row per edge, one column per operation."""

    normal: np.ndarray
    reduce: np.ndarray

    def validate(self, steps: int = STEPS):
        expected = (num_edges(steps), NUM_OPS)
        for name in ("normal", "reduce"):
            arr = getattr(self, name)
            if not isinstance(arr, np.ndarray) or arr.shape != expected:
                shape = getattr(arr, "shape", None)
                raise InvalidParameterError(
                    f"alpha_{name} must be a {expected} array, got shape {shape}")
            if not np.all(np.isfinite(arr)):
                raise InvalidParameterError(f"alpha_{name} contains non-finite entries")


class MixedOp(nn.Module):
    """Weighted sum of every candidate operation on one edge."""

    def __init__(self, C, stride):
        super().__init__()
        self._ops = nn.ModuleList()
        for name in PRIMITIVES:
            op = build_op(name, C, stride, affine=False, track=False)
            if "pool" in name:
                op = nn.Sequential(op, BatchStatNorm2d(C))
            self._ops.append(op)

    def forward(self, x, weights):
        if weights.shape != (NUM_OPS,):
            raise InvalidParameterError(
                f"edge weights must have shape ({NUM_OPS},), got {tuple(weights.shape)}")
        outputs = [op(x) for op in self._ops]
        shape = outputs[0].shape
        for name, out in zip(PRIMITIVES, outputs):
            if out.shape != shape:
                raise InternalError(
                    f"operation {name} produced shape {tuple(out.shape)}, "
                    f"expected {tuple(shape)}")
        return sum(w * out for w, out in zip(weights, outputs))


_CONV_KINDS = (4, 5, 6, 7)  # PRIMITIVES indices of the separable/dilated convs


class Cell(nn.Module):
    """One mixed-operation cell.

    Two forward implementations compute the same weighted DAG.  The reference
    path evaluates each edge's MixedOp separately.  The batched path, used by
    default, groups every edge leaving a source state into single grouped-conv
    calls and computes the parameter-free branches (pools, identity) once per
    source, which cuts kernel launches by roughly 4x on CPU.  Both paths read
    the same per-edge parameters, so results agree to float tolerance.
    """

    def __init__(self, steps, multiplier, C_prev_prev, C_prev, C, reduction, reduction_prev):
        super().__init__()
        self.reduction = reduction
        self.steps = steps
        self.multiplier = multiplier
        self.batched = True
        if reduction_prev:
            self.preprocess0 = FactorizedReduce(C_prev_prev, C, affine=False, track=False)
        else:
            self.preprocess0 = ReLUConvBN(C_prev_prev, C, 1, 1, 0, affine=False, track=False)
        self.preprocess1 = ReLUConvBN(C_prev, C, 1, 1, 0, affine=False, track=False)
        self._ops = nn.ModuleList()
        for node in range(steps):
            for pred in range(2 + node):
                stride = 2 if reduction and pred < 2 else 1
                self._ops.append(MixedOp(C, stride))

        offsets = []
        total = 0
        for node in range(steps):
            offsets.append(total)
            total += 2 + node
        # Edges leaving each source state, as (alpha row, target node) pairs.
        self._src_edges = []
        for src in range(steps + 1):
            self._src_edges.append(
                [(offsets[node] + src, node) for node in range(max(src - 1, 0), steps)])

    def forward(self, s0, s1, weights):
        expected = (num_edges(self.steps), NUM_OPS)
        if weights.shape != expected:
            raise InvalidParameterError(
                f"cell weights must have shape {expected}, got {tuple(weights.shape)}")
        s0 = self.preprocess0(s0)
        s1 = self.preprocess1(s1)
        if self.batched:
            return self._forward_batched(s0, s1, weights)
        return self._forward_reference(s0, s1, weights)

    def _forward_reference(self, s0, s1, weights):
        states = [s0, s1]
        offset = 0
        for node in range(self.steps):
            s = sum(self._ops[offset + pred](state, weights[offset + pred])
                    for pred, state in enumerate(states))
            offset += len(states)
            states.append(s)
        return torch.cat(states[-self.multiplier:], dim=1)

    def _forward_batched(self, s0, s1, weights):
        states = [s0, s1]
        acc = [None] * self.steps
        src = 0
        for node in range(self.steps):
            while src < len(states):
                self._emit_source(states[src], src, weights, acc)
                src += 1
            states.append(acc[node])
        return torch.cat(states[-self.multiplier:], dim=1)

    def _emit_source(self, x, src, weights, acc):
        """Adds source state `src`'s contribution to every target node."""
        edges = self._src_edges[src]
        n_edges = len(edges)
        C = x.shape[1]
        stride = 2 if self.reduction and src < 2 else 1

        r = F.relu(x)
        rep = torch.cat([r] * n_edges, dim=1) if n_edges > 1 else r
        msg = None
        for kind in _CONV_KINDS:
            template = self._ops[edges[0][0]]._ops[kind].op[1]
            dw = torch.cat([self._ops[row]._ops[kind].op[1].weight for row, _ in edges])
            pw = torch.cat([self._ops[row]._ops[kind].op[2].weight for row, _ in edges])
            if template.dilation != (1, 1):
                h = dilated_depthwise_conv2d(rep, dw, template.stride,
                                             template.padding, template.dilation)
            else:
                h = F.conv2d(rep, dw, stride=template.stride, padding=template.padding,
                             groups=rep.shape[1])
            h = batch_stat_norm(F.conv2d(h, pw, groups=n_edges))
            scale = weights[[row for row, _ in edges], kind]
            term = h * scale.repeat_interleave(C).view(1, -1, 1, 1)
            msg = term if msg is None else msg + term

        max_pooled = batch_stat_norm(F.max_pool2d(x, 3, stride, 1))
        avg_pooled = batch_stat_norm(
            F.avg_pool2d(x, 3, stride, 1, count_include_pad=False))
        if stride == 1:
            skips = [x] * n_edges
        else:
            skips = [self._ops[row]._ops[3](x) for row, _ in edges]

        for pos, (row, node) in enumerate(edges):
            part = (msg[:, pos * C:(pos + 1) * C]
                    + weights[row, 1] * max_pooled
                    + weights[row, 2] * avg_pooled
                    + weights[row, 3] * skips[pos])
            acc[node] = part if acc[node] is None else acc[node] + part


def reduction_indices(layers: int):
    return {layers // 3, 2 * layers // 3}


class Supernet(nn.Module):
    """Stacked mixed-operation cells sharing one set of weights plus the alphas."""

    def __init__(self, C=16, num_classes=4, layers=8, in_channels=3,
                 steps=STEPS, multiplier=MULTIPLIER, stem_multiplier=STEM_MULTIPLIER):
        super().__init__()
        self._C = C
        self._num_classes = num_classes
        self._layers = layers
        self._steps = steps

        C_curr = stem_multiplier * C
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, C_curr, 3, padding=1, bias=False),
            BatchStatNorm2d(C_curr, affine=True),
        )

        C_prev_prev, C_prev, C_curr = C_curr, C_curr, C
        self.cells = nn.ModuleList()
        reduction_prev = False
        reductions = reduction_indices(layers)
        for i in range(layers):
            reduction = i in reductions
            if reduction:
                C_curr *= 2
            cell = Cell(steps, multiplier, C_prev_prev, C_prev, C_curr,
                        reduction, reduction_prev)
            self.cells.append(cell)
            reduction_prev = reduction
            C_prev_prev, C_prev = C_prev, multiplier * C_curr

        self.global_pooling = nn.AdaptiveAvgPool2d(1)
        self.classifier = nn.Linear(C_prev, num_classes)

        k = num_edges(steps)
        self.alpha_normal = nn.Parameter(1e-3 * torch.randn(k, NUM_OPS))
        self.alpha_reduce = nn.Parameter(1e-3 * torch.randn(k, NUM_OPS))

        # Channels-last layout: oneDNN's NHWC conv kernels are several times
        # faster than NCHW at the small channel counts searched here.
        self.to(memory_format=torch.channels_last)

    def forward(self, x):
        x = x.contiguous(memory_format=torch.channels_last)
        weights_normal = F.softmax(self.alpha_normal, dim=-1)
        weights_reduce = F.softmax(self.alpha_reduce, dim=-1)
        s0 = s1 = self.stem(x)
        for cell in self.cells:
            weights = weights_reduce if cell.reduction else weights_normal
            s0, s1 = s1, cell(s0, s1, weights)
        out = self.global_pooling(s1)
        return self.classifier(out.view(out.size(0), -1))

    def arch_parameters(self):
        return [self.alpha_normal, self.alpha_reduce]

    def weight_parameters(self):
        return [p for name, p in self.named_parameters() if not name.startswith("alpha_")]

    def architecture_parameters(self) -> ArchitectureParameters:
        return ArchitectureParameters(
            normal=self.alpha_normal.detach().cpu().numpy().copy(),
            reduce=self.alpha_reduce.detach().cpu().numpy().copy(),
        )


def build_supernet(config, in_channels=3) -> Supernet:
    """Builds a seeded supernet from a SearchConfig.

    The full stacking convention assumes at least 3 cells so both reduction
    positions are distinct from the first layer; smaller stacks can be built
    through the Supernet class directly.
    """
    if config.layers < 3:
        raise ConfigurationError(f"layers must be >= 3, got {config.layers}")
    if config.init_channels < 1:
        raise ConfigurationError(f"init_channels must be >= 1, got {config.init_channels}")
    if config.num_classes < 2:
        raise ConfigurationError(f"num_classes must be >= 2, got {config.num_classes}")
    torch.manual_seed(config.seed)
    return Supernet(C=config.init_channels, num_classes=config.num_classes,
                    layers=config.layers, in_channels=in_channels)


def derive_genotype(alpha: ArchitectureParameters, meta: GenotypeMeta | None = None) -> Genotype:
    """Discretizes alphas: per intermediate node keep the 2 strongest incoming
    edges (strength = best non-none softmax weight) and the argmax non-none
    operation on each.  Ties break toward the lower operation index, then the
    lower predecessor index.
    """
    alpha.validate()

    def parse_cell(matrix):
        gene = []
        offset = 0
        for node in range(STEPS):
            n_in = 2 + node
            rows = [softmax_relaxation(matrix[offset + pred]) for pred in range(n_in)]
            best_ops = [1 + int(np.argmax(row[1:])) for row in rows]
            ranked = sorted(
                range(n_in),
                key=lambda pred: (-rows[pred][best_ops[pred]], best_ops[pred], pred))
            keep = sorted(ranked[:2])
            gene.append(tuple((pred, PRIMITIVES[best_ops[pred]]) for pred in keep))
            offset += n_in
        return tuple(gene)

    genotype = Genotype(normal=parse_cell(alpha.normal),
                        reduce=parse_cell(alpha.reduce),
                        meta=meta if meta is not None else GenotypeMeta())
    validate_genotype(genotype)
    return genotype


def flatten_alpha(alpha: ArchitectureParameters) -> np.ndarray:
    """Flattens to a vector: normal cell then reduce cell, edges in (i, j)
    lexicographic order, operations in PRIMITIVES order.
    """
    alpha.validate()
    order = lex_edge_order()
    return np.concatenate([
        np.asarray(alpha.normal, dtype=np.float64)[order].ravel(),
        np.asarray(alpha.reduce, dtype=np.float64)[order].ravel(),
    ])


def count_parameters(network: nn.Module) -> int:
    return sum(p.numel() for p in network.parameters() if p.requires_grad)


def params_millions(network: nn.Module) -> float:
    return count_parameters(network) / 1e6


class DerivedCell(nn.Module):
    """Cell containing only the operations a genotype selected."""

    def __init__(self, cell_spec, C_prev_prev, C_prev, C, reduction, reduction_prev):
        super().__init__()
        self.reduction = reduction
        if reduction_prev:
            self.preprocess0 = FactorizedReduce(C_prev_prev, C)
        else:
            self.preprocess0 = ReLUConvBN(C_prev_prev, C, 1, 1, 0)
        self.preprocess1 = ReLUConvBN(C_prev, C, 1, 1, 0)
        self._ops = nn.ModuleList()
        self._preds = []
        for node in cell_spec:
            for pred, op_name in node:
                stride = 2 if reduction and pred < 2 else 1
                self._ops.append(build_op(op_name, C, stride))
                self._preds.append(pred)

    def forward(self, s0, s1):
        states = [self.preprocess0(s0), self.preprocess1(s1)]
        for node in range(len(self._preds) // 2):
            a = self._ops[2 * node](states[self._preds[2 * node]])
            b = self._ops[2 * node + 1](states[self._preds[2 * node + 1]])
            states.append(a + b)
        return torch.cat(states[-MULTIPLIER:], dim=1)


class DerivedNetwork(nn.Module):
    """Discrete network for retraining; forward contract matches the supernet."""

    def __init__(self, genotype: Genotype, C=16, num_classes=4, layers=8, in_channels=3):
        super().__init__()
        C_curr = STEM_MULTIPLIER * C
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, C_curr, 3, padding=1, bias=False),
            nn.BatchNorm2d(C_curr),
        )
        C_prev_prev, C_prev, C_curr = C_curr, C_curr, C
        self.cells = nn.ModuleList()
        reduction_prev = False
        reductions = reduction_indices(layers)
        for i in range(layers):
            reduction = i in reductions
            if reduction:
                C_curr *= 2
            spec = genotype.reduce if reduction else genotype.normal
            cell = DerivedCell(spec, C_prev_prev, C_prev, C_curr, reduction, reduction_prev)
            self.cells.append(cell)
            reduction_prev = reduction
            C_prev_prev, C_prev = C_prev, MULTIPLIER * C_curr
        self.global_pooling = nn.AdaptiveAvgPool2d(1)
        self.classifier = nn.Linear(C_prev, num_classes)

    def forward(self, x):
        s0 = s1 = self.stem(x)
        for cell in self.cells:
            s0, s1 = s1, cell(s0, s1)
        out = self.global_pooling(s1)
        return self.classifier(out.view(out.size(0), -1))


def instantiate_derived_network(genotype: Genotype, config, in_channels=3) -> DerivedNetwork:
    """Builds the discrete network a RetrainConfig describes for a genotype."""
    validate_genotype(genotype)
    torch.manual_seed(config.seed)
    return DerivedNetwork(genotype, C=config.init_channels, num_classes=config.num_classes,
                          layers=config.layers, in_channels=in_channels)
