"""Approximate domain forgetting: contrastive training on a retain stream while a
gradient-reversed binary classifier makes forget-domain features
indistinguishable from uniform noise."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from . import data as D
from .checkpoint import Checkpoint
from .losses import DomainClassifier, adversarial_domain_loss, agreement_loss
from .model import DualEncoder, ImageBatch, images_tensor
from .train import DivergenceError, D_text, _clone, _cosine_lr, _set_lr, accuracy


@dataclass
class UnlearnConfig:
    lambd: float = 1.0
    steps: int = 300
    batch_size: int = 64
    adversarial_batch_size: int = 32
    lr: float = 2e-4
    weight_decay: float = 0.05
    classifier_lr: float = 1e-3
    classifier_width: int = 128
    audit_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.lambd < 0:
            raise ValueError("lambda must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


@dataclass
class UnlearnAudit:
    forget_domain: str
    before: dict
    after: dict
    forget_drop: float
    retain_drop: float
    intervals: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"forget_domain": self.forget_domain, "before": self.before, "after": self.after,
                "forget_relative_drop": self.forget_drop, "retain_relative_drop": self.retain_drop,
                "intervals": self.intervals}


def sample_noise_batch(shape, seed) -> ImageBatch:
    """I.i.d. uniform [0, 1] pixels, deterministic in ``seed``."""
    g = torch.Generator().manual_seed(int(seed))
    return ImageBatch(torch.rand(tuple(shape), generator=g))


def _relative_drop(before: float, after: float) -> float:
    return 0.0 if before == 0 else (before - after) / before


def audit_accuracies(model, eval_sets: Sequence[D.DatasetManifest]) -> dict:
    return {m.name: accuracy(model, m) for m in eval_sets}


def unlearn_run(start: DualEncoder | Checkpoint, config: UnlearnConfig, retain: D.DatasetManifest,
                forget: D.DatasetManifest, eval_sets: Sequence[D.DatasetManifest], forget_name: str,
                adversarial: bool = True, callback: Callable | None = None) -> tuple[DualEncoder, UnlearnAudit]:
    """Run unlearning on a copy of ``start``.

    ``eval_sets`` are per-domain manifests audited before and after with the
    same zero-shot protocol; the one named ``forget_name`` is the forget
    domain.  ``adversarial=False`` gives plain retain-only training.  The
    binary classifier is discarded when the run ends.
    """
    shared = {d for _, _, d in retain.samples} & {d for _, _, d in forget.samples}
    if retain.domain_names == forget.domain_names and shared:
        raise ValueError("retain and forget manifests share domains")
    model = start.to_model() if isinstance(start, Checkpoint) else _clone(start)
    before = audit_accuracies(model, eval_sets)
    torch.manual_seed(config.seed)
    model.train()
    clf = DomainClassifier(model.cfg.width, 1, config.classifier_width)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    clf_opt = torch.optim.AdamW(clf.parameters(), lr=config.classifier_lr)

    r_images = images_tensor(retain.load_images())
    r_tokens = model.tokenizer(retain.captions())
    f_images = images_tensor(forget.load_images())
    cell_of = np.array([c * len(retain.domain_names) + d for _, c, d in retain.samples])
    cells = np.unique(cell_of)
    members = {c: np.flatnonzero(cell_of == c) for c in cells}
    r_rng = np.random.default_rng([config.seed, 51])
    f_rng = np.random.default_rng([config.seed, 52])
    bs = min(config.batch_size, len(cells))
    ab = config.adversarial_batch_size
    intervals = []
    last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}
    for step in range(config.steps):
        lr = _cosine_lr(step, config.steps, config.lr, 0)
        _set_lr(opt, lr)
        chosen = r_rng.choice(cells, size=bs, replace=False)
        idx = torch.from_numpy(np.array([members[c][r_rng.integers(len(members[c]))] for c in chosen]))
        img = model.project_class(model.encode_image(r_images[idx]))
        txt = model.encode_text(D_text(r_tokens, idx))
        loss = agreement_loss(img, txt, model.temperature()).scalar
        if adversarial:
            fidx = torch.from_numpy(f_rng.choice(len(f_images), size=min(ab, len(f_images)), replace=False))
            noise = sample_noise_batch((ab, *f_images.shape[1:]), seed=config.seed * 1_000_003 + step)
            ff = model.encode_image(f_images[fidx])
            nf = model.encode_image(noise.pixels)
            loss = loss + adversarial_domain_loss(ff, nf, clf, config.lambd).scalar
        if not torch.isfinite(loss):
            model.load_state_dict(last_good)
            raise DivergenceError(f"non-finite loss at step {step}",
                                  last_good=Checkpoint.from_model(model, step=step - 1, seed=config.seed))
        opt.zero_grad()
        clf_opt.zero_grad()
        loss.backward()
        opt.step()
        if adversarial:
            clf_opt.step()
        last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}
        if callback:
            callback(step, model)
        if config.audit_every and (step + 1) % config.audit_every == 0 and step + 1 < config.steps:
            intervals.append({"step": step + 1, **audit_accuracies(model, eval_sets)})
            model.train()
    model.eval()
    after = audit_accuracies(model, eval_sets)
    kept = [n for n in before if n != forget_name]
    audit = UnlearnAudit(
        forget_domain=forget_name, before=before, after=after,
        forget_drop=_relative_drop(before[forget_name], after[forget_name]),
        retain_drop=_relative_drop(float(np.mean([before[n] for n in kept])),
                                   float(np.mean([after[n] for n in kept]))),
        intervals=intervals,
    )
    return model, audit
