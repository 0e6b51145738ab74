"""Conditional data generator, its auxiliary losses, and the frozen semantic
classifier used to keep synthetic images on-category.

The generator G(x, k) maps an image batch plus a domain index to images of the
requested domain.  Domains 0..K-1 are the source domains; index K is the
generated novel domain.  Conditioning follows the one-hot-plane convention:
the domain vector is spatially expanded and concatenated to the input.
"""

import hashlib
import json
import logging

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import PretrainConfig
from .errors import ConfigurationError, DatasetError, ValidationError

log = logging.getLogger(__name__)


def _gen_norm(C, kind):
    if kind == "instance":
        return nn.InstanceNorm2d(C, affine=True, track_running_stats=False)
    if kind == "batch":
        return nn.BatchNorm2d(C, affine=True, track_running_stats=False)
    raise ConfigurationError(f"gen_norm must be 'instance' or 'batch', got {kind!r}")


def condition_input(x, domain, num_domains: int):
    """Appends num_domains constant planes, one-hot at the domain index.

    domain may be a single int (whole batch shares one domain) or a 1-D tensor
    with one index per sample.
    """
    if x.dim() != 4:
        raise ValidationError(f"expected a (B, ch, H, W) batch, got {x.dim()} dims")
    batch = x.size(0)
    if isinstance(domain, int):
        if not 0 <= domain < num_domains:
            raise ValidationError(
                f"domain index {domain} out of range [0, {num_domains})")
        idx = torch.full((batch,), domain, dtype=torch.long, device=x.device)
    else:
        idx = torch.as_tensor(domain, dtype=torch.long, device=x.device)
        if idx.dim() == 0:
            idx = idx.expand(batch).clone()
        if idx.shape != (batch,):
            raise ValidationError(
                f"per-sample domain indices must have shape ({batch},), got {tuple(idx.shape)}")
        if idx.numel() and (idx.min() < 0 or idx.max() >= num_domains):
            raise ValidationError(
                f"domain indices must lie in [0, {num_domains}), got "
                f"[{int(idx.min())}, {int(idx.max())}]")
    planes = torch.zeros(batch, num_domains, x.size(2), x.size(3),
                         dtype=x.dtype, device=x.device)
    planes[torch.arange(batch, device=x.device), idx] = 1.0
    return torch.cat([x, planes], dim=1)


class ResidualBlock(nn.Module):

    def __init__(self, C, norm):
        super().__init__()
        self.main = nn.Sequential(
            nn.Conv2d(C, C, 3, padding=1, bias=False),
            _gen_norm(C, norm),
            nn.ReLU(inplace=False),
            nn.Conv2d(C, C, 3, padding=1, bias=False),
            _gen_norm(C, norm),
        )

    def forward(self, x):
        return x + self.main(x)


class ConditionalGenerator(nn.Module):
    """Encoder-decoder with 2 downsampling convolutions, 3 residual blocks,
    and 2 transposed-convolution upsampling layers; tanh keeps outputs in
    [-1, 1].
    """

    def __init__(self, image_channels=3, num_domains=4, base_channels=16, norm="instance"):
        super().__init__()
        if num_domains < 2:
            raise ConfigurationError(f"num_domains must be >= 2, got {num_domains}")
        self.image_channels = image_channels
        self.num_domains = num_domains
        C = base_channels
        self.encoder = nn.Sequential(
            nn.Conv2d(image_channels + num_domains, C, 7, padding=3, bias=False),
            _gen_norm(C, norm),
            nn.ReLU(inplace=False),
            nn.Conv2d(C, 2 * C, 4, stride=2, padding=1, bias=False),
            _gen_norm(2 * C, norm),
            nn.ReLU(inplace=False),
            nn.Conv2d(2 * C, 4 * C, 4, stride=2, padding=1, bias=False),
            _gen_norm(4 * C, norm),
            nn.ReLU(inplace=False),
        )
        self.blocks = nn.Sequential(*[ResidualBlock(4 * C, norm) for _ in range(3)])
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(4 * C, 2 * C, 4, stride=2, padding=1, bias=False),
            _gen_norm(2 * C, norm),
            nn.ReLU(inplace=False),
            nn.ConvTranspose2d(2 * C, C, 4, stride=2, padding=1, bias=False),
            _gen_norm(C, norm),
            nn.ReLU(inplace=False),
            nn.Conv2d(C, image_channels, 7, padding=3),
        )
        # The decoder predicts a residual on top of the input image.  Scaling
        # its last convolution down makes G near the identity at init, so
        # synthetic batches start out recognizable instead of noise and the
        # adversarial updates explore around semantically valid images.
        out = self.decoder[-1]
        with torch.no_grad():
            out.weight.mul_(0.1)
            out.bias.zero_()

    def forward(self, x, domain):
        if x.size(2) % 4 != 0 or x.size(3) % 4 != 0:
            raise ConfigurationError(
                f"spatial dims must be divisible by 4, got {x.size(2)}x{x.size(3)}")
        h = condition_input(x, domain, self.num_domains)
        h = self.encoder(h)
        h = self.blocks(h)
        return torch.tanh(self.decoder(h) + x)


class SemanticClassifier(nn.Module):
    """Small convolutional classifier pretrained on source data and frozen.

    Three conv blocks with pooling, then a linear head.  After freeze() the
    module stays in eval mode and its parameters stop requiring gradients.
    """

    def __init__(self, image_channels=3, num_classes=4, width=16):
        super().__init__()
        self.num_classes = num_classes
        w = width
        self.features = nn.Sequential(
            nn.Conv2d(image_channels, w, 3, padding=1, bias=False),
            nn.BatchNorm2d(w), nn.ReLU(inplace=False), nn.MaxPool2d(2),
            nn.Conv2d(w, 2 * w, 3, padding=1, bias=False),
            nn.BatchNorm2d(2 * w), nn.ReLU(inplace=False), nn.MaxPool2d(2),
            nn.Conv2d(2 * w, 4 * w, 3, padding=1, bias=False),
            nn.BatchNorm2d(4 * w), nn.ReLU(inplace=False), nn.MaxPool2d(2),
        )
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(4 * w, num_classes)
        self._frozen = False

    @property
    def frozen(self):
        return self._frozen

    def freeze(self):
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        self._frozen = True
        return self

    def train(self, mode=True):
        # A frozen classifier must never re-enter training mode; eval() still works.
        if self._frozen and mode:
            raise ValidationError("classifier is frozen and cannot re-enter training mode")
        return super().train(mode)

    def forward(self, x):
        h = self.pool(self.features(x))
        return self.head(h.view(h.size(0), -1))


def _module_bytes(module):
    chunks = []
    for name, tensor in sorted(module.state_dict().items()):
        chunks.append(name.encode())
        chunks.append(tensor.detach().cpu().numpy().tobytes())
    return b"".join(chunks)


def parameter_checksum(module) -> str:
    """SHA-256 over all parameters and buffers; detects any mutation."""
    return hashlib.sha256(_module_bytes(module)).hexdigest()


def _check_classifier_ready(classifier, labels):
    for p in classifier.parameters():
        if p.requires_grad:
            raise ValidationError(
                "semantic classifier must be frozen before use in generator losses")
    num_classes = getattr(classifier, "num_classes", None)
    if num_classes is not None and labels.numel():
        if labels.min() < 0 or labels.max() >= num_classes:
            raise ValidationError(
                f"labels must lie in [0, {num_classes}), got "
                f"[{int(labels.min())}, {int(labels.max())}]")


def cycle_loss(generator, x, source_domains, novel_domain):
    """Mean absolute reconstruction error of the round trip
    x -> G(x, novel) -> G(., source).
    """
    syn = generator(x, novel_domain)
    back = generator(syn, source_domains)
    return (back - x).abs().mean()


def semantic_ce_loss(generator, classifier, x, labels, novel_domain):
    """Cross-entropy of the frozen classifier on generated images against the
    originals' labels; gradients reach only the generator.
    """
    _check_classifier_ready(classifier, labels)
    syn = generator(x, novel_domain)
    return F.cross_entropy(classifier(syn), labels)


def auxiliary_loss(generator, classifier, x, labels, source_domains, novel_domain, weights):
    """Total generator objective: lambda_cycle * cycle + lambda_ce * semantic CE.

    Terms with a zero weight are skipped entirely, so they contribute neither
    value nor gradient.
    """
    weights.validate()
    terms = []
    if weights.lambda_cycle != 0.0:
        terms.append(weights.lambda_cycle * cycle_loss(generator, x, source_domains, novel_domain))
    if weights.lambda_ce != 0.0:
        terms.append(weights.lambda_ce * semantic_ce_loss(generator, classifier, x, labels, novel_domain))
    if not terms:
        return torch.zeros((), dtype=x.dtype, device=x.device)
    return sum(terms)


def pretrain_classifier(train_data, config: PretrainConfig | None = None) -> SemanticClassifier:
    """Trains the semantic classifier on the pooled source data, reports its
    training accuracy, and returns it frozen.
    """
    from .datasets import batch_iterator

    if config is None:
        config = PretrainConfig()
    config.validate()
    if len(train_data) == 0:
        raise ConfigurationError("cannot pretrain the classifier on an empty dataset")

    torch.manual_seed(config.seed)
    model = SemanticClassifier(image_channels=train_data.channels,
                               num_classes=train_data.num_classes,
                               width=config.width)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    model.train()
    for epoch in range(config.epochs):
        for images, labels, _ in batch_iterator(train_data, config.batch_size,
                                                config.seed, epoch):
            optimizer.zero_grad(set_to_none=True)
            loss = F.cross_entropy(model(images), labels)
            loss.backward()
            optimizer.step()

    model.eval()
    correct = 0
    with torch.no_grad():
        for images, labels, _ in batch_iterator(train_data, 256, config.seed, config.epochs):
            correct += int((model(images).argmax(dim=1) == labels).sum())
    model.train_accuracy = correct / len(train_data)
    log.info("pretrained classifier: train accuracy %.4f over %d samples",
             model.train_accuracy, len(train_data))
    model.freeze()
    return model


CHECKPOINT_KINDS = ("generator", "classifier")


def save_checkpoint(module, path, kind, num_domains, image_channels, seed):
    """Writes named parameter arrays plus a JSON sidecar describing them."""
    if kind not in CHECKPOINT_KINDS:
        raise ConfigurationError(f"checkpoint kind must be one of {CHECKPOINT_KINDS}")
    torch.save(module.state_dict(), path)
    sidecar = {"type": kind, "num_domains": int(num_domains),
               "image_channels": int(image_channels), "seed": int(seed)}
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2)
        fh.write("\n")


def load_checkpoint(module, path) -> dict:
    """Restores a checkpoint written by save_checkpoint; returns the sidecar."""
    try:
        with open(str(path) + ".json") as fh:
            sidecar = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read checkpoint sidecar for {path}: {exc}") from exc
    if sidecar.get("type") not in CHECKPOINT_KINDS:
        raise ValidationError(f"unknown checkpoint type {sidecar.get('type')!r}")
    state = torch.load(path, weights_only=True)
    module.load_state_dict(state)
    return sidecar
