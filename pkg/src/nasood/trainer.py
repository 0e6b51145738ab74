"""Training loops: the adversarial minimax search, a plain bilevel baseline,
random genotype sampling, and retraining of derived networks.

One minimax step runs four updates in order on a mini-batch drawn from the
pooled source domains:
  1. generator descent on its auxiliary loss (cycle + semantic CE),
  2. supernet weight descent on the training loss (real data),
  3. generator ASCENT on the validation loss (synthetic data) — the
     adversarial move,
  4. architecture descent on the validation loss, one-step approximation.
Every update re-evaluates its loss at the freshly updated parameters of the
preceding sub-steps, so the synthetic batch is re-synthesized when the
generator has moved.
"""

import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from .config import AuxLossWeights, PretrainConfig, RetrainConfig, SearchConfig
from .datasets import MultiDomainDataset, SplitSpec, batch_iterator, make_splits
from .errors import ConfigurationError, NonFiniteLossError, ProtocolViolationError
from .generator import ConditionalGenerator, auxiliary_loss, pretrain_classifier
from .genotype import Genotype, GenotypeMeta, STEPS, validate_genotype
from .operations import PRIMITIVES
from .search_space import (
    Supernet,
    build_supernet,
    derive_genotype,
    instantiate_derived_network,
)


@dataclass
class LossRecord:
    step: int
    l_train: float
    l_val_synth: float
    l_aux: float
    wall_time: float

    def to_json_dict(self):
        return {"step": self.step, "l_train": self.l_train,
                "l_val_synth": self.l_val_synth, "l_aux": self.l_aux,
                "wall_time": self.wall_time}

    @classmethod
    def from_json_dict(cls, raw):
        return cls(step=int(raw["step"]), l_train=float(raw["l_train"]),
                   l_val_synth=float(raw["l_val_synth"]), l_aux=float(raw["l_aux"]),
                   wall_time=float(raw["wall_time"]))


def save_history(history, path):
    import json
    with open(path, "w") as fh:
        for record in history:
            fh.write(json.dumps(record.to_json_dict()) + "\n")


def load_history(path):
    import json
    with open(path) as fh:
        return [LossRecord.from_json_dict(json.loads(line))
                for line in fh if line.strip()]


class SearchResult(tuple):
    """(genotype, history, snapshots) with the final architecture scores
    riding along as .alpha for export (None for random sampling).
    """

    def __new__(cls, genotype, history, snapshots, alpha=None):
        obj = super().__new__(cls, (genotype, history, snapshots))
        obj.alpha = alpha
        return obj

    @property
    def genotype(self):
        return self[0]

    @property
    def history(self):
        return self[1]

    @property
    def snapshots(self):
        return self[2]


@dataclass
class SearchState:
    """Everything the minimax step mutates, plus the frozen classifier."""

    supernet: Supernet
    generator: ConditionalGenerator
    classifier: object
    opt_omega: torch.optim.Optimizer
    opt_alpha: torch.optim.Optimizer
    opt_generator: torch.optim.Optimizer
    novel_domain: int
    step: int = 0
    start_time: float = field(default_factory=time.time)
    snapshots: list = field(default_factory=list)

    def zero_grads(self):
        self.supernet.zero_grad(set_to_none=True)
        self.generator.zero_grad(set_to_none=True)


def init_search_state(supernet, generator, classifier, config: SearchConfig) -> SearchState:
    """Wires up the three optimizers: SGD with momentum for the supernet
    weights, Adam for the architecture scores and the generator.
    """
    opt_omega = torch.optim.SGD(supernet.weight_parameters(), lr=config.lr_omega,
                                momentum=config.momentum,
                                weight_decay=config.weight_decay_omega)
    opt_alpha = torch.optim.Adam(supernet.arch_parameters(), lr=config.lr_alpha,
                                 betas=(0.5, 0.999),
                                 weight_decay=config.weight_decay_alpha)
    opt_generator = torch.optim.Adam(generator.parameters(), lr=config.lr_generator,
                                     betas=(0.5, 0.999))
    return SearchState(supernet=supernet, generator=generator, classifier=classifier,
                       opt_omega=opt_omega, opt_alpha=opt_alpha,
                       opt_generator=opt_generator,
                       novel_domain=generator.num_domains - 1)


def _check_finite(loss, sub_step):
    if not torch.isfinite(loss):
        raise NonFiniteLossError(
            f"non-finite loss {loss.item()} in sub-step: {sub_step}")


@contextmanager
def _grads_off(params):
    """Temporarily clears requires_grad on parameters another sub-step owns.

    Autograd then skips their gradient kernels outright.  The update itself is
    unchanged: the loss value and the surviving gradients are identical, the
    skipped ones were only ever zeroed and discarded.
    """
    flipped = [p for p in params if p.requires_grad]
    for p in flipped:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p in flipped:
            p.requires_grad_(True)


def search_step(state: SearchState, batch, config: SearchConfig) -> LossRecord:
    """One minimax iteration on one mini-batch; returns the logged losses."""
    images, labels, domains = batch
    G = state.generator
    net = state.supernet
    k_tilde = state.novel_domain

    # Sub-step 1: generator descent on the auxiliary loss.
    state.zero_grads()
    l_aux = auxiliary_loss(G, state.classifier, images, labels, domains,
                           k_tilde, config.aux_weights)
    _check_finite(l_aux, "generator auxiliary descent")
    if l_aux.requires_grad:
        l_aux.backward()
    state.opt_generator.step()

    # Sub-step 2: supernet weight descent on real data.
    state.zero_grads()
    with _grads_off(net.arch_parameters()):
        l_train = F.cross_entropy(net(images), labels)
        _check_finite(l_train, "supernet weight descent")
        l_train.backward()
    state.opt_omega.step()

    # Sub-step 3: generator ascent on the validation loss (adversarial).
    # Only the input gradient has to flow through the supernet.
    state.zero_grads()
    with _grads_off(net.parameters()):
        l_val_ascent = F.cross_entropy(net(G(images, k_tilde)), labels)
        _check_finite(l_val_ascent, "generator adversarial ascent")
        (-l_val_ascent).backward()
    state.opt_generator.step()

    # Sub-step 4: architecture descent on the refreshed synthetic batch,
    # one-step approximation (supernet weights treated as constants).
    state.zero_grads()
    with torch.no_grad():
        x_syn = G(images, k_tilde)
    with _grads_off(net.weight_parameters()):
        l_val = F.cross_entropy(net(x_syn), labels)
        _check_finite(l_val, "architecture descent")
        l_val.backward()
    state.opt_alpha.step()

    state.step += 1
    return LossRecord(step=state.step, l_train=l_train.item(),
                      l_val_synth=l_val.item(), l_aux=l_aux.item(),
                      wall_time=time.time() - state.start_time)


def _seed_everything(seed, deterministic):
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)


def _sync_classes(config, dataset):
    if config.num_classes != dataset.num_classes:
        config = replace(config, num_classes=dataset.num_classes)
    return config


def search(dataset: MultiDomainDataset, config: SearchConfig):
    """Runs the configured search mode on a source-domain pool.

    Returns (genotype, history, snapshots) with one genotype snapshot per
    epoch.  The dataset must contain only source domains, labeled 0..K-1.
    """
    config.validate()
    config = _sync_classes(config, dataset)

    if config.mode == "random_sample":
        genotype = replace(random_genotype(config.seed),
                           meta=GenotypeMeta(dataset.name, config.seed, 0))
        return SearchResult(genotype, [], [genotype])
    if config.mode == "darts_baseline":
        return _darts_search(dataset, config)

    if dataset.total_domains < 2:
        raise ConfigurationError(
            f"search needs at least 2 source domains, got {dataset.total_domains}")
    _seed_everything(config.seed, config.deterministic)
    classifier = pretrain_classifier(dataset, PretrainConfig(
        epochs=config.pretrain_epochs, batch_size=config.batch_size,
        lr=config.pretrain_lr, seed=config.seed))
    supernet = build_supernet(config, in_channels=dataset.channels)
    generator = ConditionalGenerator(image_channels=dataset.channels,
                                     num_domains=dataset.total_domains + 1,
                                     base_channels=config.gen_channels,
                                     norm=config.gen_norm)
    state = init_search_state(supernet, generator, classifier, config)

    step_config = config
    if config.mode == "nasood_no_cycle":
        step_config = replace(config, aux_weights=AuxLossWeights(
            lambda_cycle=0.0, lambda_ce=config.aux_weights.lambda_ce))

    history = []
    supernet.train()
    generator.train()
    for epoch in range(config.epochs):
        for batch in batch_iterator(dataset, config.batch_size, config.seed, epoch):
            history.append(search_step(state, batch, step_config))
        state.snapshots.append(derive_genotype(
            supernet.architecture_parameters(),
            GenotypeMeta(dataset.name, config.seed, epoch)))
    return SearchResult(state.snapshots[-1], history, list(state.snapshots),
                        alpha=supernet.architecture_parameters())


def _half_split(dataset, seed):
    """Disjoint stratified halves of the pooled source data."""
    rng = np.random.default_rng([seed, 1])
    idx_all = np.arange(len(dataset))
    cells = []
    for d in np.unique(dataset.domain_labels):
        for c in np.unique(dataset.class_labels):
            cells.append(idx_all[(dataset.domain_labels == d) & (dataset.class_labels == c)])
    first = []
    for cell in cells:
        if len(cell):
            first.append(rng.choice(cell, size=len(cell) // 2, replace=False))
    first_idx = np.sort(np.concatenate(first)) if first else np.array([], dtype=np.int64)
    second_idx = np.setdiff1d(idx_all, first_idx)

    def subset(indices):
        return MultiDomainDataset(
            images=dataset.images[indices],
            class_labels=dataset.class_labels[indices],
            domain_labels=dataset.domain_labels[indices],
            num_classes=dataset.num_classes,
            domain_names=dataset.domain_names,
            name=dataset.name)

    return subset(first_idx), subset(second_idx)


def _darts_search(dataset, config):
    """Plain bilevel baseline: alternate architecture descent on a held-in
    validation half and weight descent on the training half; no generator.
    """
    config.validate()
    config = _sync_classes(config, dataset)
    _seed_everything(config.seed, config.deterministic)
    train_half, val_half = _half_split(dataset, config.seed)
    supernet = build_supernet(config, in_channels=dataset.channels)
    opt_omega = torch.optim.SGD(supernet.weight_parameters(), lr=config.lr_omega,
                                momentum=config.momentum,
                                weight_decay=config.weight_decay_omega)
    opt_alpha = torch.optim.Adam(supernet.arch_parameters(), lr=config.lr_alpha,
                                 betas=(0.5, 0.999),
                                 weight_decay=config.weight_decay_alpha)

    history, snapshots = [], []
    start, step = time.time(), 0
    supernet.train()
    for epoch in range(config.epochs):
        val_batches = list(batch_iterator(val_half, config.batch_size,
                                          config.seed + 1, epoch))
        for i, (images, labels, _) in enumerate(
                batch_iterator(train_half, config.batch_size, config.seed, epoch)):
            v_images, v_labels, _ = val_batches[i % len(val_batches)]

            supernet.zero_grad(set_to_none=True)
            l_val = F.cross_entropy(supernet(v_images), v_labels)
            _check_finite(l_val, "architecture descent (baseline)")
            l_val.backward()
            opt_alpha.step()

            supernet.zero_grad(set_to_none=True)
            l_train = F.cross_entropy(supernet(images), labels)
            _check_finite(l_train, "supernet weight descent (baseline)")
            l_train.backward()
            opt_omega.step()

            step += 1
            history.append(LossRecord(step=step, l_train=l_train.item(),
                                      l_val_synth=l_val.item(), l_aux=0.0,
                                      wall_time=time.time() - start))
        snapshots.append(derive_genotype(
            supernet.architecture_parameters(),
            GenotypeMeta(dataset.name, config.seed, epoch)))
    return SearchResult(snapshots[-1], history, snapshots,
                        alpha=supernet.architecture_parameters())


def darts_baseline_search(dataset, config):
    """Bilevel baseline entry point; returns (genotype, history)."""
    genotype, history, _ = _darts_search(dataset, replace(config, mode="darts_baseline"))
    return genotype, history


def random_genotype(seed) -> Genotype:
    """Uniformly samples a valid genotype: per node two distinct predecessors,
    each with one non-none operation.
    """
    rng = np.random.default_rng(seed)

    def sample_cell():
        nodes = []
        for node in range(STEPS):
            preds = sorted(int(p) for p in rng.choice(node + 2, size=2, replace=False))
            nodes.append(tuple(
                (pred, PRIMITIVES[1 + int(rng.integers(len(PRIMITIVES) - 1))])
                for pred in preds))
        return tuple(nodes)

    genotype = Genotype(normal=sample_cell(), reduce=sample_cell(),
                        meta=GenotypeMeta("random", int(seed), 0))
    validate_genotype(genotype)
    return genotype


def _augment_batch(images):
    """Horizontal flips plus 1-pixel random shifts, driven by torch's RNG."""
    flip = torch.rand(images.size(0)) < 0.5
    if flip.any():
        images = images.clone()
        images[flip] = torch.flip(images[flip], dims=[-1])
    shifts = torch.randint(-1, 2, (2,))
    if int(shifts[0]) or int(shifts[1]):
        images = torch.roll(images, shifts=(int(shifts[0]), int(shifts[1])),
                            dims=(-2, -1))
    return images


def evaluate(network, split, batch_size=256) -> float:
    """Top-1 accuracy of a network on a split, in evaluation mode."""
    network.eval()
    correct = 0
    with torch.no_grad():
        for images, labels, _ in batch_iterator(split, batch_size, 0, 0):
            correct += int((network(images).argmax(dim=1) == labels).sum())
    return correct / len(split) if len(split) else 0.0


def retrain_derived(genotype: Genotype, dataset: MultiDomainDataset,
                    config: RetrainConfig):
    """Trains the derived network on pooled source domains and reports
    target-domain accuracy at the best held-in validation epoch (final epoch
    when val_fraction is 0).
    """
    config.validate()
    validate_genotype(genotype)
    config = _sync_classes(config, dataset)
    train, held_in_val, test = make_splits(dataset, SplitSpec(
        target_domain=config.target_domain, val_fraction=config.val_fraction,
        seed=config.seed))
    for split in (train, held_in_val):
        if config.target_domain in split.domain_names:
            raise ProtocolViolationError(
                f"target domain {config.target_domain!r} leaked into a source split")

    _seed_everything(config.seed, config.deterministic)
    network = instantiate_derived_network(genotype, config, in_channels=dataset.channels)
    optimizer = torch.optim.SGD(network.parameters(), lr=config.lr,
                                momentum=config.momentum,
                                weight_decay=config.weight_decay)
    scheduler = None
    if config.cosine:
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
            optimizer, T_max=config.epochs)

    best_val = -math.inf
    best_target = None
    for epoch in range(config.epochs):
        network.train()
        for images, labels, _ in batch_iterator(train, config.batch_size,
                                                config.seed, epoch):
            if config.augment:
                images = _augment_batch(images)
            optimizer.zero_grad(set_to_none=True)
            loss = F.cross_entropy(network(images), labels)
            _check_finite(loss, f"retrain epoch {epoch}")
            loss.backward()
            optimizer.step()
        if scheduler is not None:
            scheduler.step()
        if len(held_in_val):
            val_acc = evaluate(network, held_in_val)
            if val_acc > best_val:
                best_val = val_acc
                best_target = evaluate(network, test)

    target_accuracy = best_target if best_target is not None else evaluate(network, test)
    return network, float(target_accuracy)
