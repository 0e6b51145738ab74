"""Conditional generator, auxiliary losses, and the frozen classifier."""

import math

import pytest
import torch
import torch.nn as nn
from hypothesis import given
from hypothesis import strategies as st

from nasood.config import AuxLossWeights, PretrainConfig
from nasood.errors import ConfigurationError, DatasetError, ValidationError
from nasood.generator import (
    ConditionalGenerator,
    SemanticClassifier,
    auxiliary_loss,
    condition_input,
    cycle_loss,
    load_checkpoint,
    parameter_checksum,
    pretrain_classifier,
    save_checkpoint,
    semantic_ce_loss,
)


class IdentityGenerator(nn.Module):
    """Same call contract as ConditionalGenerator but returns the input."""

    num_domains = 4

    def forward(self, x, domain):
        return x


class ConstantLogitClassifier(nn.Module):
    """Parameter-free classifier emitting the same logits for every input."""

    def __init__(self, num_classes, value=0.0):
        super().__init__()
        self.num_classes = num_classes
        self.value = value

    def forward(self, x):
        return torch.full((x.shape[0], self.num_classes), self.value,
                          dtype=x.dtype)


class ExplodingClassifier(ConstantLogitClassifier):

    def forward(self, x):
        raise AssertionError("classifier must not be called when its term is off")


# --- conditioning --------------------------------------------------------


def test_condition_input_one_hot_planes():
    x = torch.zeros(2, 3, 4, 4)
    out = condition_input(x, 1, num_domains=3)
    assert out.shape == (2, 6, 4, 4)
    planes = out[:, 3:]
    assert torch.equal(planes[:, 1], torch.ones(2, 4, 4))
    assert planes.sum().item() == 2 * 4 * 4  # exactly one hot plane per sample


def test_condition_input_per_sample_domains():
    x = torch.zeros(3, 1, 2, 2)
    out = condition_input(x, torch.tensor([0, 2, 1]), num_domains=3)
    planes = out[:, 1:]
    assert planes[0, 0].sum() == 4 and planes[1, 2].sum() == 4 and planes[2, 1].sum() == 4


def test_condition_input_rejects_bad_arguments():
    x = torch.zeros(2, 3, 4, 4)
    with pytest.raises(ValidationError):
        condition_input(torch.zeros(3, 4, 4), 0, 2)
    with pytest.raises(ValidationError):
        condition_input(x, 5, num_domains=3)
    with pytest.raises(ValidationError):
        condition_input(x, torch.tensor([0, 1, 2]), num_domains=3)
    with pytest.raises(ValidationError):
        condition_input(x, torch.tensor([0, 3]), num_domains=3)


# --- generator -----------------------------------------------------------


def test_generator_shape_and_range():
    torch.manual_seed(0)
    gen = ConditionalGenerator(image_channels=3, num_domains=4, base_channels=8)
    x = torch.rand(2, 3, 16, 16) * 2 - 1
    out = gen(x, 3)
    assert out.shape == x.shape
    assert out.min() >= -1.0 and out.max() <= 1.0


def test_generator_rejects_bad_sizes():
    gen = ConditionalGenerator(num_domains=3, base_channels=8)
    with pytest.raises(ConfigurationError):
        gen(torch.zeros(1, 3, 10, 10), 0)
    with pytest.raises(ConfigurationError):
        ConditionalGenerator(num_domains=1)
    with pytest.raises(ConfigurationError):
        ConditionalGenerator(norm="group")


def test_generator_deterministic_init():
    torch.manual_seed(5)
    a = ConditionalGenerator(base_channels=8)
    torch.manual_seed(5)
    b = ConditionalGenerator(base_channels=8)
    assert parameter_checksum(a) == parameter_checksum(b)


def test_generator_domain_changes_output():
    torch.manual_seed(0)
    gen = ConditionalGenerator(num_domains=4, base_channels=8)
    x = torch.rand(2, 3, 16, 16) * 2 - 1
    assert not torch.allclose(gen(x, 0), gen(x, 3))


# --- losses --------------------------------------------------------------


@pytest.mark.property
def test_cycle_loss_zero_for_identity():
    x = torch.rand(4, 3, 8, 8)
    loss = cycle_loss(IdentityGenerator(), x, torch.zeros(4, dtype=torch.long), 3)
    assert loss.item() == 0.0


def test_cycle_loss_positive_for_real_generator():
    torch.manual_seed(0)
    gen = ConditionalGenerator(num_domains=4, base_channels=8)
    x = torch.rand(2, 3, 16, 16) * 2 - 1
    assert cycle_loss(gen, x, torch.zeros(2, dtype=torch.long), 3).item() > 0


@pytest.mark.property
def test_semantic_ce_uniform_logits():
    for k in (2, 4, 10):
        clf = ConstantLogitClassifier(num_classes=k)
        x = torch.rand(6, 3, 8, 8)
        labels = torch.arange(6) % k
        loss = semantic_ce_loss(IdentityGenerator(), clf, x, labels, 3)
        assert abs(loss.item() - math.log(k)) < 1e-6


def test_semantic_ce_rejects_unfrozen_classifier():
    clf = SemanticClassifier(num_classes=4, width=4)
    with pytest.raises(ValidationError, match="frozen"):
        semantic_ce_loss(IdentityGenerator(), clf, torch.rand(2, 3, 8, 8),
                         torch.tensor([0, 1]), 3)


def test_semantic_ce_rejects_out_of_range_labels():
    clf = ConstantLogitClassifier(num_classes=4)
    with pytest.raises(ValidationError, match="labels"):
        semantic_ce_loss(IdentityGenerator(), clf, torch.rand(2, 3, 8, 8),
                         torch.tensor([0, 7]), 3)


@pytest.mark.property
@given(st.floats(0, 20, allow_nan=False), st.floats(0, 20, allow_nan=False))
def test_auxiliary_loss_linear_in_weights(lc, lce):
    torch.manual_seed(0)
    gen = ConditionalGenerator(num_domains=4, base_channels=4)
    clf = ConstantLogitClassifier(num_classes=4)
    x = torch.rand(2, 3, 8, 8) * 2 - 1
    labels = torch.tensor([0, 1])
    domains = torch.tensor([0, 2])
    with torch.no_grad():
        cyc = cycle_loss(gen, x, domains, 3).item()
        ce = semantic_ce_loss(gen, clf, x, labels, 3).item()
        total = auxiliary_loss(gen, clf, x, labels, domains, 3,
                               AuxLossWeights(lambda_cycle=lc, lambda_ce=lce)).item()
    assert total == pytest.approx(lc * cyc + lce * ce, rel=1e-6, abs=1e-9)


def test_auxiliary_loss_skips_disabled_terms():
    torch.manual_seed(0)
    gen = ConditionalGenerator(num_domains=4, base_channels=4)
    x = torch.rand(2, 3, 8, 8)
    labels = torch.tensor([0, 1])
    domains = torch.tensor([0, 1])
    # lambda_ce = 0: the classifier must never run.
    loss = auxiliary_loss(gen, ExplodingClassifier(4), x, labels, domains, 3,
                          AuxLossWeights(lambda_cycle=1.0, lambda_ce=0.0))
    assert loss.item() > 0
    # both off: exactly zero, no gradient path
    zero = auxiliary_loss(gen, ExplodingClassifier(4), x, labels, domains, 3,
                          AuxLossWeights(lambda_cycle=0.0, lambda_ce=0.0))
    assert zero.item() == 0.0 and not zero.requires_grad


def test_auxiliary_gradients_reach_only_generator():
    torch.manual_seed(0)
    gen = ConditionalGenerator(num_domains=4, base_channels=4)
    clf = SemanticClassifier(num_classes=4, width=4).freeze()
    x = torch.rand(2, 3, 8, 8) * 2 - 1
    loss = auxiliary_loss(gen, clf, x, torch.tensor([0, 1]),
                          torch.tensor([0, 1]), 3, AuxLossWeights())
    loss.backward()
    assert all(p.grad is not None for p in gen.parameters())
    assert all(p.grad is None for p in clf.parameters())


# --- frozen classifier ---------------------------------------------------


def test_pretrain_classifier_frozen_and_deterministic(source_pool):
    cfg = PretrainConfig(epochs=2, batch_size=32, seed=4, width=8)
    a = pretrain_classifier(source_pool, cfg)
    b = pretrain_classifier(source_pool, cfg)
    assert parameter_checksum(a) == parameter_checksum(b)
    assert a.frozen
    assert not a.training
    assert all(not p.requires_grad for p in a.parameters())
    assert 0.0 <= a.train_accuracy <= 1.0
    with pytest.raises(ValidationError):
        a.train()
    a.eval()  # still allowed


@pytest.mark.property
def test_pretrained_checksum_survives_use(source_pool):
    clf = pretrain_classifier(source_pool, PretrainConfig(epochs=1, batch_size=32, width=8))
    before = parameter_checksum(clf)
    with torch.no_grad():
        clf(torch.rand(4, 3, 16, 16))
    gen = ConditionalGenerator(num_domains=4, base_channels=4)
    auxiliary_loss(gen, clf, torch.rand(2, 3, 16, 16), torch.tensor([0, 1]),
                   torch.tensor([0, 1]), 3, AuxLossWeights()).backward()
    assert parameter_checksum(clf) == before


def test_pretrain_rejects_empty_dataset():
    class Empty:
        def __len__(self):
            return 0

    with pytest.raises(ConfigurationError):
        pretrain_classifier(Empty())


@pytest.mark.property
def test_parameter_checksum_detects_mutation():
    torch.manual_seed(0)
    clf = SemanticClassifier(num_classes=4, width=4)
    before = parameter_checksum(clf)
    with torch.no_grad():
        clf.head.bias.add_(1.0)
    assert parameter_checksum(clf) != before


# --- checkpoints ---------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(0)
    gen = ConditionalGenerator(num_domains=5, base_channels=4)
    path = tmp_path / "gen.pt"
    save_checkpoint(gen, path, kind="generator", num_domains=5,
                    image_channels=3, seed=9)
    torch.manual_seed(1)
    other = ConditionalGenerator(num_domains=5, base_channels=4)
    assert parameter_checksum(other) != parameter_checksum(gen)
    sidecar = load_checkpoint(other, path)
    assert parameter_checksum(other) == parameter_checksum(gen)
    assert sidecar == {"type": "generator", "num_domains": 5,
                       "image_channels": 3, "seed": 9}


def test_checkpoint_bad_kind(tmp_path):
    gen = ConditionalGenerator(base_channels=4)
    with pytest.raises(ConfigurationError):
        save_checkpoint(gen, tmp_path / "x.pt", kind="discriminator",
                        num_domains=4, image_channels=3, seed=0)


def test_checkpoint_missing_sidecar(tmp_path):
    gen = ConditionalGenerator(base_channels=4)
    torch.save(gen.state_dict(), tmp_path / "naked.pt")
    with pytest.raises(DatasetError):
        load_checkpoint(gen, tmp_path / "naked.pt")


def test_checkpoint_unknown_type(tmp_path):
    gen = ConditionalGenerator(base_channels=4)
    path = tmp_path / "gen.pt"
    save_checkpoint(gen, path, kind="generator", num_domains=4,
                    image_channels=3, seed=0)
    (tmp_path / "gen.pt.json").write_text('{"type": "mystery"}')
    with pytest.raises(ValidationError):
        load_checkpoint(gen, path)
