"""Dataset-level OOD scores: an SNGP image score calibrated on an anchor
split, a text score over class names, their min-max combination, the
pairwise domain matrix with a 2-D PCA, and correlation with accuracy."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import stats

MEAN_FIELD_FACTOR = math.pi / 8


@dataclass
class SNGPConfig:
    norm_bound: float = 0.95        # spectral norm bound c
    hidden: int = 128
    random_features: int = 1024     # R
    prior_precision: float = 1.0
    ridge: float = 1e-6
    epochs: int = 300
    lr: float = 1e-2
    weight_decay: float = 1e-4
    seed: int = 0


class SpectralLinear(nn.Linear):
    """Linear layer whose effective weight is rescaled to spectral norm <= bound.

    The norm is computed exactly by SVD rather than power iteration, so the
    bound holds at every forward pass.
    """

    def __init__(self, in_features, out_features, bound):
        super().__init__(in_features, out_features)
        self.bound = bound

    def effective_weight(self):
        sigma = torch.linalg.matrix_norm(self.weight, ord=2)
        return self.weight * torch.clamp(self.bound / sigma, max=1.0)

    def forward(self, x):
        return F.linear(x, self.effective_weight(), self.bias)


class SNGPHead(nn.Module):
    """Residual spectral-normalized layer, frozen random Fourier features,
    trained output layer and a Laplace precision over the random features."""

    def __init__(self, in_dim: int, n_classes: int, config: SNGPConfig):
        super().__init__()
        self.config = config
        self.n_classes = n_classes
        g = torch.Generator().manual_seed(config.seed)
        self.inp = nn.Linear(in_dim, config.hidden)
        self.sn = SpectralLinear(config.hidden, config.hidden, config.norm_bound)
        with torch.no_grad():
            for lin in (self.inp, self.sn):
                lin.weight.copy_(torch.randn(lin.weight.shape, generator=g) / math.sqrt(lin.in_features))
                lin.bias.zero_()
        R = config.random_features
        self.register_buffer("rff_w", torch.randn(config.hidden, R, generator=g) * math.sqrt(2.0 / config.hidden))
        self.register_buffer("rff_b", torch.rand(R, generator=g) * 2 * math.pi)
        self.out = nn.Linear(R, n_classes)
        with torch.no_grad():
            self.out.weight.copy_(torch.randn(self.out.weight.shape, generator=g) * 0.01)
            self.out.bias.zero_()
        self.register_buffer("precision", torch.zeros(R, R, dtype=torch.float64))
        self.register_buffer("covariance", torch.zeros(R, R, dtype=torch.float64))
        self.fitted = False

    def hidden_layers(self, x):
        # the input map is spectral-normalized too, keeping the whole trunk bounded
        h = F.linear(x, self._bounded(self.inp.weight), self.inp.bias)
        return h + F.gelu(self.sn(h))

    def _bounded(self, w):
        sigma = torch.linalg.matrix_norm(w, ord=2)
        return w * torch.clamp(self.config.norm_bound / sigma, max=1.0)

    def random_features(self, x):
        z = self.hidden_layers(x)
        R = self.config.random_features
        return math.sqrt(2.0 / R) * torch.cos(z @ self.rff_w + self.rff_b)

    def forward(self, x):
        phi = self.random_features(x)
        return self.out(phi), phi

    def spectral_norms(self) -> list[float]:
        with torch.no_grad():
            return [float(torch.linalg.matrix_norm(self._bounded(self.inp.weight), ord=2)),
                    float(torch.linalg.matrix_norm(self.sn.effective_weight(), ord=2))]

    @torch.no_grad()
    def uncertainty(self, features) -> np.ndarray:
        """Per-sample Dempster-Shafer uncertainty K / (K + sum exp(adjusted logits))."""
        if not self.fitted:
            raise RuntimeError("SNGP head is not fitted")
        x = torch.as_tensor(np.asarray(features), dtype=torch.float32)
        logits, phi = self(x)
        phi = phi.double()
        var = ((phi @ self.covariance) * phi).sum(1)
        adj = logits.double() / torch.sqrt(1.0 + MEAN_FIELD_FACTOR * var)[:, None]
        K = self.n_classes
        return (K / (K + torch.exp(adj).sum(1))).numpy()


def fit_sngp(anchor_features, anchor_labels, config: SNGPConfig | None = None,
             n_classes: int | None = None) -> SNGPHead:
    """Train the head on the anchor split, then accumulate the precision in one pass."""
    config = config or SNGPConfig()
    x = torch.as_tensor(np.asarray(anchor_features), dtype=torch.float32)
    y = torch.as_tensor(np.asarray(anchor_labels), dtype=torch.long)
    K = n_classes or int(y.max()) + 1
    if x.ndim != 2 or len(x) != len(y):
        raise ValueError("features must be [N, F] with one label per row")
    if len(x) < K:
        raise ValueError(f"need at least {K} anchor samples, got {len(x)}")
    head = SNGPHead(x.shape[1], K, config)
    opt = torch.optim.AdamW([p for p in head.parameters() if p.requires_grad], lr=config.lr,
                            weight_decay=config.weight_decay)
    for _ in range(config.epochs):
        logits, _ = head(x)
        loss = F.cross_entropy(logits, y)
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        phi = head.random_features(x).double()
        R = config.random_features
        eye = torch.eye(R, dtype=torch.float64)
        prec = config.prior_precision * eye + phi.T @ phi + config.ridge * eye
        head.precision.copy_(prec)
        head.covariance.copy_(torch.linalg.inv(prec))
    head.fitted = True
    head.eval()
    return head


def image_ood_score(head: SNGPHead, features) -> float:
    """Mean per-sample uncertainty over a dataset."""
    u = head.uncertainty(features)
    if u.size == 0:
        raise ValueError("empty feature set")
    # sort before averaging so the result does not depend on sample order
    return float(np.sort(u.astype(np.float64)).mean())


def text_ood_score(image_embeddings, target_names: Sequence[str], anchor_names: Sequence[str],
                   text_encoder: Callable, tau: float) -> float:
    """Mean softmax mass on target-specific class names over a combined vocabulary.

    Names are compared after case-folding; a name present in both lists
    counts as an anchor name.  ``text_encoder`` maps a list of names to unit
    rows [K, D].
    """
    if not target_names:
        raise ValueError("target_names must be non-empty")
    vocab, is_target, seen = [], [], set()
    anchor_fold = {n.casefold() for n in anchor_names}
    for n in list(anchor_names) + list(target_names):
        f = n.casefold()
        if f in seen:
            continue
        seen.add(f)
        vocab.append(n)
        is_target.append(f not in anchor_fold)
    mask = torch.tensor(is_target)
    if not mask.any():
        return 0.0
    with torch.no_grad():
        img = torch.as_tensor(image_embeddings, dtype=torch.float32).detach()
        txt = torch.as_tensor(text_encoder(vocab), dtype=torch.float32)
        probs = torch.softmax(img @ txt.T / float(tau), dim=1)
    mass = probs[:, mask].sum(1).double()
    return float(mass.mean().clamp(0.0, 1.0))


@dataclass
class OODReport:
    dataset: str
    image_ood: float
    text_ood: float
    accuracy: float | None = None
    image_norm: float | None = None
    text_norm: float | None = None
    combined: float | None = None
    flags: list = field(default_factory=list)


@dataclass
class Normalization:
    image_min: float
    image_max: float
    text_min: float
    text_max: float


def _minmax(v):
    lo, hi = float(np.min(v)), float(np.max(v))
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.full(len(v), 0.5), lo, hi, True
    return (np.asarray(v, float) - lo) / (hi - lo), lo, hi, False


def combine_scores(reports: Sequence[OODReport]) -> tuple[list[OODReport], Normalization]:
    """Min-max normalize each component across the collection and average them.

    A component that is constant over the collection is set to 0.5 and flagged.
    """
    if len(reports) < 2:
        raise ValueError("combine_scores needs at least two reports")
    img, ilo, ihi, ideg = _minmax([r.image_ood for r in reports])
    txt, tlo, thi, tdeg = _minmax([r.text_ood for r in reports])
    out = []
    for r, i, t in zip(reports, img, txt):
        flags = list(r.flags)
        if ideg:
            flags.append("image_degenerate")
        if tdeg:
            flags.append("text_degenerate")
        out.append(replace(r, image_norm=float(i), text_norm=float(t), combined=float((i + t) / 2), flags=flags))
    return out, Normalization(ilo, ihi, tlo, thi)


def ood_csv(reports: Sequence[OODReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dataset", "image_ood_raw", "text_ood_raw", "image_ood_norm", "text_ood_norm",
                "combined", "accuracy"])

    def f(v):
        return "" if v is None else f"{v:.6f}"
    for r in reports:
        w.writerow([r.dataset, f(r.image_ood), f(r.text_ood), f(r.image_norm), f(r.text_norm),
                    f(r.combined), f(r.accuracy)])
    return buf.getvalue()


def ood_sidecar(norm: Normalization, digest: str, reports: Sequence[OODReport], **extra) -> str:
    body = {"config_digest": digest, "normalization": norm.__dict__,
            "flags": {r.dataset: r.flags for r in reports if r.flags}, **extra}
    return json.dumps(body, indent=1, sort_keys=True) + "\n"


def pairwise_ood_from_features(features: Sequence, labels: Sequence, config: SNGPConfig | None = None) -> np.ndarray:
    """K x K matrix: head fitted on domain i scores domain j, minus the self-score,
    symmetrized by averaging both directions."""
    K = len(features)
    if K < 2:
        raise ValueError("need at least two domains")
    raw = np.zeros((K, K))
    for i in range(K):
        y = np.asarray(labels[i])
        classes, y = np.unique(y, return_inverse=True)
        if len(features[i]) < max(2, len(classes)):
            raise ValueError(f"domain {i} is too small to fit a head")
        head = fit_sngp(features[i], y, config, n_classes=len(classes))
        for j in range(K):
            raw[i, j] = image_ood_score(head, features[j])
    rel = raw - np.diag(raw)[:, None]
    return (rel + rel.T) / 2


def pairwise_ood_matrix(domains, trunk, config: SNGPConfig | None = None) -> np.ndarray:
    """``domains``: DatasetManifests; ``trunk``: a model with ``encode_image``."""
    from .model import images_tensor
    feats = []
    with torch.no_grad():
        for m in domains:
            feats.append(trunk.encode_image(images_tensor(m.load_images())).numpy())
    return pairwise_ood_from_features(feats, [m.labels for m in domains], config)


@dataclass
class PCAResult:
    coords: np.ndarray
    explained_variance: np.ndarray
    rank_deficient: bool = False


def pca_embed(matrix) -> PCAResult:
    """Top-2 principal coordinates of the rows.

    Sign convention: each component's largest-magnitude loading is made
    positive; among loadings tied within 1e-9 the first one decides.
    """
    X = np.asarray(matrix, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 3:
        raise ValueError("pca_embed needs a matrix with at least 3 rows")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    V = evecs[:, :2].copy()
    for k in range(V.shape[1]):
        mag = np.abs(V[:, k])
        j = int(np.flatnonzero(mag >= mag.max() - 1e-9)[0])
        if V[j, k] < 0:
            V[:, k] = -V[:, k]
    coords = Xc @ V
    ev = evals[:2].copy()
    deficient = ev[0] <= 0 or ev[1] <= 1e-12 * max(ev[0], 1e-300)
    if deficient:
        coords[:, 1] = 0.0
        ev[1] = 0.0
    return PCAResult(coords, ev, bool(deficient))


def pca_csv(names: Sequence[str], result: PCAResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["domain", "pc1", "pc2"])
    for n, (a, b) in zip(names, result.coords):
        w.writerow([n, f"{a:.6f}", f"{b:.6f}"])
    return buf.getvalue()


def pearson(x, y) -> tuple[float, float]:
    """Pearson r with a two-sided p-value from the t distribution (n - 2 dof)."""
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.float64)
    n = len(x)
    if n < 3 or len(y) != n:
        raise ValueError("need at least 3 paired values")
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt((xc ** 2).sum()), np.sqrt((yc ** 2).sum())
    if sx == 0 or sy == 0:
        raise ValueError("zero variance")
    r = float(np.clip((xc * yc).sum() / (sx * sy), -1.0, 1.0))
    if abs(r) == 1.0:
        return r, 0.0
    t = r * math.sqrt((n - 2) / (1 - r * r))
    return r, float(2 * stats.t.sf(abs(t), n - 2))


def correlate(reports: Sequence[OODReport], score: str = "combined") -> tuple[float, float]:
    """Correlation between a report score field and accuracy."""
    rows = [r for r in reports if r.accuracy is not None]
    if len(rows) < 3:
        raise ValueError("need at least 3 reports with accuracy")
    return pearson([getattr(r, score) for r in rows], [r.accuracy for r in rows])
