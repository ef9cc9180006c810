"""Agreement / disentanglement losses, the composite source and diffusion
objectives, gradient reversal and the adversarial domain loss."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

NORM_TOL = 1e-4

SOURCE_TERMS = ("C1", "C2")
DIFFUSION_TERMS = ("C3", "C4", "C5", "C6")


@dataclass
class LossValue:
    """Differentiable total plus its named (already weighted) contributions."""
    scalar: torch.Tensor
    components: dict = field(default_factory=dict)

    def item(self) -> float:
        return float(self.scalar.detach())

    def floats(self) -> dict:
        return {k: float(v.detach()) for k, v in self.components.items()}


def _check_pair(X, Y):
    if X.ndim != 2 or X.shape != Y.shape:
        raise ValueError(f"expected two [B, D] matrices of equal shape, got {tuple(X.shape)} and {tuple(Y.shape)}")


def _check_normalized(*mats):
    for M in mats:
        dev = (M.detach().norm(dim=1) - 1).abs().max()
        if dev > NORM_TOL:
            raise ValueError(f"rows must be unit-normalized (max deviation {float(dev):.2e})")


def agreement_loss(X: torch.Tensor, Y: torch.Tensor, tau) -> LossValue:
    """Symmetric contrastive cross-entropy with diagonal targets (mean reduction)."""
    _check_pair(X, Y)
    _check_normalized(X, Y)
    tau = torch.as_tensor(tau, dtype=X.dtype)
    if not tau > 0:
        raise ValueError("tau must be positive")
    logits = X @ Y.T / tau
    target = torch.arange(X.shape[0])
    loss = 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))
    return LossValue(loss, {"agreement": loss})


def disentangle_loss(X: torch.Tensor, Y: torch.Tensor, mean: bool = False) -> LossValue:
    """Sum over paired rows of squared cosine similarity, i.e. the squared
    diagonal of X Y^T.  ``mean=True`` divides by the batch size."""
    _check_pair(X, Y)
    _check_normalized(X, Y)
    diag = (X * Y).sum(dim=1)
    loss = diag.pow(2).sum()
    if mean:
        loss = loss / X.shape[0]
    return LossValue(loss, {"disentangle": loss})


def _compose(terms: dict, weights: dict | None) -> LossValue:
    weights = weights or {}
    comps = {}
    for name, fn in terms.items():
        w = weights.get(name, 1.0)
        if w == 0:
            continue
        comps[name] = fn() if w == 1 else w * fn()
    if not comps:
        raise ValueError("every loss component is disabled")
    total = sum(comps.values())
    return LossValue(total, comps)


def source_loss(image_class, text_class, image_domain, tau, weights=None, mean_disentangle=False) -> LossValue:
    """C1 = agreement(class head, class-name text); C2 = disentangle(class head, domain head)."""
    return _compose({
        "C1": lambda: agreement_loss(image_class, text_class, tau).scalar,
        "C2": lambda: disentangle_loss(image_class, image_domain, mean_disentangle).scalar,
    }, weights)


def diffusion_loss(image_class, image_domain, text_style, hidden, tau, weights=None,
                   use_hidden=True, mean_disentangle=False) -> LossValue:
    """C3 = disentangle(class, domain head); C4 = disentangle(style text, class head);
    C5 = agreement(style text, domain head); C6 = agreement(style text, projected hidden states).

    ``use_hidden=False`` drops C6 (hidden-state ablation); otherwise missing
    hidden states are a configuration error.
    """
    weights = dict(weights or {})
    if not use_hidden:
        weights["C6"] = 0.0
    elif hidden is None and weights.get("C6", 1.0) != 0:
        raise ValueError("hidden states required for C6; disable it via the hidden-state ablation flag")
    return _compose({
        "C3": lambda: disentangle_loss(image_class, image_domain, mean_disentangle).scalar,
        "C4": lambda: disentangle_loss(text_style, image_class, mean_disentangle).scalar,
        "C5": lambda: agreement_loss(text_style, image_domain, tau).scalar,
        "C6": lambda: agreement_loss(text_style, hidden, tau).scalar,
    }, weights)


class GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lambd):
        ctx.lambd = lambd
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.lambd, None


def grad_reverse(x: torch.Tensor, lambd: float = 1.0) -> torch.Tensor:
    if lambd < 0:
        raise ValueError("lambda must be >= 0")
    return GradReverse.apply(x, float(lambd))


def dann_lambda(progress: float, gamma: float = 10.0) -> float:
    """Ramp-up 2/(1+exp(-gamma p)) - 1 from the DANN recipe; ``progress`` in [0, 1]."""
    return float(2.0 / (1.0 + torch.exp(torch.tensor(-gamma * progress))) - 1.0)


class DomainClassifier(nn.Module):
    """Two-layer perceptron on penultimate image features."""

    def __init__(self, in_dim: int, n_out: int = 1, width: int = 128):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, width), nn.ReLU(), nn.Linear(width, n_out))

    def forward(self, x):
        return self.net(x)


def adversarial_domain_loss(features_forget, features_noise, classifier, lambd: float = 1.0) -> LossValue:
    """Binary cross-entropy of ``classifier`` telling noise (label 0) from forget
    features (label 1), with gradient reversal in front of the classifier.

    The classifier minimizes the loss; the feature extractor receives the
    reversed, ``lambd``-scaled gradient.  ``lambd=0`` detaches the features.
    """
    if len(features_forget) == 0 or len(features_noise) == 0:
        raise ValueError("both feature batches must be non-empty")
    feats = torch.cat([features_forget, features_noise])
    feats = feats.detach() if lambd == 0 else grad_reverse(feats, lambd)
    logits = classifier(feats).reshape(-1)
    labels = torch.cat([torch.ones(len(features_forget)), torch.zeros(len(features_noise))])
    loss = F.binary_cross_entropy_with_logits(logits, labels)
    return LossValue(loss, {"adversarial": loss})


def adversarial_multiclass_loss(features, domain_labels, classifier, lambd: float = 1.0) -> LossValue:
    """Multi-domain variant used by the DANN baseline."""
    if len(features) == 0:
        raise ValueError("empty feature batch")
    feats = features.detach() if lambd == 0 else grad_reverse(features, lambd)
    loss = F.cross_entropy(classifier(feats), torch.as_tensor(domain_labels))
    return LossValue(loss, {"adversarial": loss})
