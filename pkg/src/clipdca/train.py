"""Toy pretraining, the three finetuners (FLYP, DANN, CLIP-DCA), Wise-FT
sweeps, zero-shot evaluation and report emission."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from scipy import stats

from . import data as D
from .checkpoint import Checkpoint, interpolate_weights
from .losses import (DomainClassifier, adversarial_multiclass_loss, agreement_loss, dann_lambda,
                     diffusion_loss, source_loss)
from .model import DualEncoder, images_tensor, make_model, build_vocab_texts

log = logging.getLogger(__name__)

METHODS = ("flyp", "dann", "dca")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, msg, last_good=None):
        super().__init__(msg)
        self.last_good = last_good


@dataclass
class PretrainConfig:
    steps: int = 2000
    batch_size: int = 64
    lr: float = 5e-4
    weight_decay: float = 0.05
    warmup: int = 100
    augment: bool = True
    seed: int = 0
    model: dict = field(default_factory=dict)


@dataclass
class RunConfig:
    method: str = "dca"
    steps: int = 300
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 0.1
    warmup: int = 0
    ratio: float = 4.0
    weights: dict = field(default_factory=lambda: {k: 1.0 for k in ("C1", "C2", "C3", "C4", "C5", "C6")})
    # ablation axes
    domain_descriptions: bool = True
    disentanglement: bool = True
    mllm_hidden_states: bool = True
    mean_disentangle: bool = False
    # DANN
    dann_lambda: float = 1.0
    lambda_schedule: str = "constant"
    # captioned retain data mixed into finetuning
    with_captions: bool = False
    # start the domain head from the pretrained class projection
    init_domain_from_class: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.lambda_schedule not in ("constant", "dann"):
            raise ValueError("lambda_schedule must be 'constant' or 'dann'")

    def effective_weights(self) -> dict:
        w = {k: float(self.weights.get(k, 1.0)) for k in ("C1", "C2", "C3", "C4", "C5", "C6")}
        if not self.disentanglement:
            w.update(C2=0.0, C3=0.0, C4=0.0)
        if not self.domain_descriptions:
            w.update(C5=0.0)
        if not self.mllm_hidden_states:
            w.update(C6=0.0)
        return w


def _cosine_lr(step, total, base, warmup):
    if step < warmup:
        return base * (step + 1) / warmup
    p = (step - warmup) / max(1, total - warmup)
    return base * 0.5 * (1 + math.cos(math.pi * min(1.0, p)))


def augment(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Random dihedral transform per image (label preserving for every shape class)."""
    k = torch.randint(0, 4, (x.shape[0],), generator=gen)
    flip = torch.randint(0, 2, (x.shape[0],), generator=gen).bool()
    x = torch.where(flip[:, None, None, None], x.flip(-1), x)
    out = x.clone()
    for r in (1, 2, 3):
        sel = k == r
        if sel.any():
            out[sel] = torch.rot90(x[sel], r, dims=(-2, -1))
    return out


def _optimizer(params, lr, wd):
    return torch.optim.AdamW(params, lr=lr, weight_decay=wd)


def _set_lr(opt, lr):
    for g in opt.param_groups:
        g["lr"] = lr


def _check_finite(loss, step, model):
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite loss at step {step}", last_good=None)


# --------------------------------------------------------------------------
# pretraining


def pretrain_toy(corpus: D.DatasetManifest, config: PretrainConfig, extra_texts: Sequence[str] = (),
                 callback: Callable | None = None) -> tuple[DualEncoder, list[float]]:
    """Contrastive training of both encoders on (image, "a <domain> image of a <class>") pairs.

    Each batch holds at most one image per (class, domain) cell so captions in a
    batch are distinct.
    """
    torch.manual_seed(config.seed)
    texts = build_vocab_texts(corpus.class_names, corpus.domain_names, extra_texts)
    model = make_model(texts, seed=config.seed, **config.model)
    model.train()
    images = images_tensor(corpus.load_images())
    captions = corpus.captions()
    cell_of = np.array([c * len(corpus.domain_names) + d for _, c, d in corpus.samples])
    cells = np.unique(cell_of)
    members = {c: np.flatnonzero(cell_of == c) for c in cells}
    tokens = model.tokenizer(captions)
    rng = np.random.default_rng([config.seed, 11])
    opt = _optimizer(model.parameters(), config.lr, config.weight_decay)
    bs = min(config.batch_size, len(cells))
    gen = torch.Generator().manual_seed(config.seed)
    history = []
    for step in range(config.steps):
        _set_lr(opt, _cosine_lr(step, config.steps, config.lr, config.warmup))
        chosen = rng.choice(cells, size=bs, replace=False)
        idx = np.array([members[c][rng.integers(len(members[c]))] for c in chosen])
        t_idx = torch.from_numpy(idx)
        x = images[t_idx]
        if config.augment:
            x = augment(x, gen)
        img = model.project_class(model.encode_image(x))
        txt = model.encode_text(D_text(tokens, t_idx))
        loss = agreement_loss(img, txt, model.temperature()).scalar
        _check_finite(loss, step, model)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
        if callback:
            callback(step, model)
    model.eval()
    return model, history


def D_text(tokens, idx):
    from .model import TextBatch
    return TextBatch(tokens.token_ids[idx], tokens.lengths[idx])


# --------------------------------------------------------------------------
# finetuning


class _StyleTensors:
    def __init__(self, model: DualEncoder, styles, need_hidden: bool):
        imgs, owner = D.style_images(styles)
        self.images, self.owner = images_tensor(imgs), torch.from_numpy(owner)
        self.tokens = model.tokenizer([s.description for s in styles])
        self.hidden = None
        if need_hidden:
            if any(s.hidden_state is None for s in styles):
                raise ValueError("hidden states missing from style manifest; disable mllm_hidden_states")
            self.hidden = torch.from_numpy(np.stack([s.hidden_state for s in styles]))


def finetune(method: str, start: DualEncoder | Checkpoint, config: RunConfig, source: D.DatasetManifest,
             styles: Sequence[D.StyleRecord] | None = None, captions: D.DatasetManifest | None = None,
             callback: Callable | None = None) -> tuple[DualEncoder, list[dict]]:
    """Finetune a copy of ``start``; returns (model, per-step loss history).

    flyp: agreement between class head and class-name prompts on the source stream.
    dann: flyp plus a gradient-reversed domain classifier over {source} + style ids.
    dca : two-stream schedule, source loss (C1+C2) on source batches and
          diffusion loss (C3..C6) on style batches.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if method in ("dca", "dann") and not styles and not (method == "dca" and math.isinf(config.ratio)):
        raise ValueError(f"method {method!r} needs a style manifest")
    model = start.to_model() if isinstance(start, Checkpoint) else _clone(start)
    torch.manual_seed(config.seed)
    model.train()
    weights = config.effective_weights()
    if method == "dca" and config.init_domain_from_class:
        with torch.no_grad():
            model.domain_head.weight.copy_(model.class_head.weight)
    src_images = images_tensor(source.load_images())
    src_labels = torch.from_numpy(source.labels)
    prompts = model.tokenizer([D.PROMPT_TEMPLATE.format(c) for c in source.class_names])

    ratio = config.ratio if method == "dca" else math.inf
    diffusion_active = method == "dca" and any(weights[k] for k in D_TERMS)
    if method == "dca" and not diffusion_active:
        ratio = math.inf
    need_hidden = method == "dca" and weights["C6"] != 0 and diffusion_active
    st = _StyleTensors(model, styles, need_hidden) if (styles and (method == "dann" or not math.isinf(ratio))) else None

    cap = None
    if config.with_captions:
        if captions is None:
            raise ValueError("with_captions requires a captioned manifest")
        cap = (images_tensor(captions.load_images()), model.tokenizer(captions.captions()))
        cap_rng = np.random.default_rng([config.seed, 31])

    params = list(model.parameters())
    clf = None
    if method == "dann":
        clf = DomainClassifier(model.cfg.width, n_out=1 + len(styles))
        params += list(clf.parameters())
        dann_rng = np.random.default_rng([config.seed, 41])
    opt = _optimizer(params, config.lr, config.weight_decay)

    batches = D.two_stream_batches(source, styles or [], config.batch_size,
                                   ratio=ratio if st is not None or math.isinf(ratio) else math.inf,
                                   seed=config.seed, epochs=None)
    history = []
    for step in range(config.steps):
        _set_lr(opt, _cosine_lr(step, config.steps, config.lr, config.warmup))
        b = next(batches)
        idx = torch.tensor(b.indices)
        tau = model.temperature()
        if b.kind == "source":
            feats = model.encode_image(src_images[idx])
            ic = model.project_class(feats)
            txt = model.encode_text(D_text(prompts, src_labels[idx]))
            if method == "dca":
                lv = source_loss(ic, txt, model.project_domain(feats) if weights["C2"] else None, tau,
                                 weights={"C1": weights["C1"], "C2": weights["C2"]},
                                 mean_disentangle=config.mean_disentangle)
            else:
                lv = agreement_loss(ic, txt, tau)
            loss = lv.scalar
            comps = lv.floats()
            if method == "dann":
                lam = config.dann_lambda * (dann_lambda(step / max(1, config.steps - 1))
                                            if config.lambda_schedule == "dann" else 1.0)
                k = min(len(idx), len(st.images))
                sidx = torch.from_numpy(dann_rng.choice(len(st.images), size=k, replace=False))
                sf = model.encode_image(st.images[sidx])
                dom = torch.cat([torch.zeros(len(idx), dtype=torch.long), 1 + st.owner[sidx]])
                adv = adversarial_multiclass_loss(torch.cat([feats, sf]), dom, clf, lam)
                loss = loss + adv.scalar
                comps["adversarial"] = adv.item()
        else:
            sidx = torch.tensor(b.styles)
            feats = model.encode_image(st.images[idx])
            ic = model.project_class(feats)
            idom = model.project_domain(feats)
            txt = model.encode_text(D_text(st.tokens, sidx))
            hid = model.project_hidden(st.hidden[sidx]) if st.hidden is not None else None
            lv = diffusion_loss(ic, idom, txt, hid, tau, weights={k: weights[k] for k in D_TERMS},
                                use_hidden=st.hidden is not None, mean_disentangle=config.mean_disentangle)
            loss = lv.scalar
            comps = lv.floats()
        if cap is not None:
            cidx = torch.from_numpy(cap_rng.choice(len(cap[0]), size=min(config.batch_size, len(cap[0])),
                                                   replace=False))
            ci = model.project_class(model.encode_image(cap[0][cidx]))
            ct = model.encode_text(D_text(cap[1], cidx))
            cl = agreement_loss(ci, ct, tau).scalar
            loss = loss + cl
            comps["captions"] = float(cl.detach())
        if not torch.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append({"step": step, "kind": b.kind, "loss": float(loss.detach()), **comps})
        if callback:
            callback(step, model)
    model.eval()
    return model, history


D_TERMS = ("C3", "C4", "C5", "C6")


def _clone(model: DualEncoder) -> DualEncoder:
    out = DualEncoder(model.cfg)
    out.load_state_dict(model.state_dict())
    return out


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalRow:
    method: str
    dataset: str
    accuracy: float
    combined_ood: float | None = None


@dataclass
class EvalTable:
    rows: list[EvalRow] = field(default_factory=list)

    def accuracy(self, method, dataset) -> float:
        for r in self.rows:
            if r.method == method and r.dataset == dataset:
                return r.accuracy
        raise KeyError((method, dataset))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "dataset", "accuracy", "combined_ood"])
        for r in self.rows:
            w.writerow([r.method, r.dataset, f"{r.accuracy:.6f}",
                        "" if r.combined_ood is None else f"{r.combined_ood:.6f}"])
        return buf.getvalue()


def accuracy(model: DualEncoder, manifest: D.DatasetManifest) -> float:
    if not manifest.class_names:
        raise ValueError(f"dataset {manifest.name!r} has no class names")
    prompts = [D.PROMPT_TEMPLATE.format(c) for c in manifest.class_names]
    pred = model.zero_shot_classify(images_tensor(manifest.load_images()), prompts)
    return float((pred.numpy() == manifest.labels).mean())


def evaluate(model: DualEncoder | Checkpoint, manifests: Sequence[D.DatasetManifest], method: str = "model",
             combined_ood: dict | None = None) -> EvalTable:
    """Zero-shot accuracy per dataset; joins combined OOD scores by dataset name."""
    if isinstance(model, Checkpoint):
        model = model.to_model()
    combined_ood = combined_ood or {}
    return EvalTable([EvalRow(method, m.name, accuracy(model, m), combined_ood.get(m.name)) for m in manifests])


def wise_ft_sweep(zeroshot: Checkpoint, finetuned: Checkpoint, manifests, alphas=(0, 0.25, 0.5, 0.75, 1.0),
                  combined_ood=None) -> EvalTable:
    """Evaluate alpha * finetuned + (1 - alpha) * zeroshot for each alpha."""
    rows = []
    for a in alphas:
        ck = interpolate_weights(finetuned, zeroshot, a)
        rows += evaluate(ck, manifests, method=f"wiseft_{a:g}", combined_ood=combined_ood).rows
    return EvalTable(rows)


# --------------------------------------------------------------------------
# reporting


def best_fit(x, y) -> tuple[float, float]:
    res = stats.linregress(np.asarray(x, float), np.asarray(y, float))
    return float(res.slope), float(res.intercept)


def report(tables: Sequence[EvalTable], out_dir, zeroshot_method: str = "zeroshot", meta: dict | None = None) -> dict:
    """Write results.csv, scatter.csv (combined OOD vs improvement over zero-shot)
    and fits.json (per-method least-squares line)."""
    if not tables:
        raise ValueError("need at least one table")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot write report to {out}: {e}") from e
    rows = [r for t in tables for r in t.rows]
    merged = EvalTable(rows)
    (out / "results.csv").write_text(merged.to_csv(), encoding="utf-8")
    base = {r.dataset: r.accuracy for r in rows if r.method == zeroshot_method}
    ood = {r.dataset: r.combined_ood for r in rows if r.combined_ood is not None}
    scatter = []
    for r in rows:
        if r.method == zeroshot_method or r.dataset not in base:
            continue
        c = r.combined_ood if r.combined_ood is not None else ood.get(r.dataset)
        scatter.append((r.method, r.dataset, c, r.accuracy - base[r.dataset]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "dataset", "combined_ood", "improvement"])
    for m, d, c, imp in scatter:
        w.writerow([m, d, "" if c is None else f"{c:.6f}", f"{imp:.6f}"])
    (out / "scatter.csv").write_text(buf.getvalue(), encoding="utf-8")
    fits = {}
    for m in sorted({s[0] for s in scatter}):
        pts = [(c, imp) for mm, _, c, imp in scatter if mm == m and c is not None]
        if len(pts) >= 2 and len({p[0] for p in pts}) >= 2:
            slope, icpt = best_fit(*zip(*pts))
            fits[m] = {"slope": slope, "intercept": icpt, "n": len(pts)}
    summary = {"fits": fits, **(meta or {})}
    (out / "fits.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return summary
