"""Acceptance criteria A1-A8.

The benchmark (corpora, style bank, pretrained checkpoint) is built once and
cached under pytest's cache directory, keyed by the configs and the source of the
modules that build them.  ``pytest --cache-clear`` forces a rebuild.  Each test records its
measurements as user properties; conftest prints one PASS/FAIL line per
criterion at the end of the session.
"""
import dataclasses
import hashlib
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

import clipdca
from clipdca import data as D
from clipdca import oodscore as O
from clipdca.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from clipdca.cli import main as cli_main
from clipdca.losses import (DomainClassifier, adversarial_domain_loss, agreement_loss, disentangle_loss,
                            grad_reverse)
from clipdca.model import images_tensor
from clipdca.train import PretrainConfig, RunConfig, accuracy, evaluate, finetune, pretrain_toy
from clipdca.unlearn import UnlearnConfig, sample_noise_batch, unlearn_run

pytestmark = pytest.mark.acceptance

CORPUS = D.CorpusConfig(images_per_cell=50, seed=0)
EVAL_CORPUS = D.CorpusConfig(images_per_cell=50, seed=1)
STYLES = D.StyleBankConfig(n_styles=64)
PRETRAIN = PretrainConfig()
SEEDS = (0, 1, 2)
FORGET_DOMAIN = "noisy"


def _source_digest() -> str:
    h = hashlib.sha256()
    # only the modules that produce the cached artifacts
    for name in ("checkpoint", "data", "losses", "model", "train"):
        h.update((Path(clipdca.__file__).parent / f"{name}.py").read_bytes())
    for c in (CORPUS, EVAL_CORPUS, STYLES, PRETRAIN):
        h.update(json.dumps(dataclasses.asdict(c), sort_keys=True).encode())
    return h.hexdigest()[:16]


@dataclasses.dataclass
class Bench:
    corpus: D.DatasetManifest
    evals: D.DatasetManifest
    styles: list
    pretrained: Checkpoint
    root: Path

    def domain_sets(self, domains, manifest=None):
        m = manifest or self.evals
        return [m.subset(domains=[d], name=d) for d in domains]


@pytest.fixture(scope="session")
def bench(request):
    root = Path(request.config.cache.mkdir(f"clipdca_bench_{_source_digest()}"))
    if not (root / "pretrained.dca").exists():
        D.generate_corpus(CORPUS, root / "corpus")
        D.generate_corpus(EVAL_CORPUS, root / "evals")
        D.generate_style_bank(STYLES, root / "styles")
        corpus = D.DatasetManifest.load(root / "corpus" / "manifest.json")
        model, _ = pretrain_toy(corpus.subset(domains=D.PRETRAIN_DOMAINS, name="pretrain"), PRETRAIN)
        save_checkpoint(model, root / "pretrained.tmp", seed=PRETRAIN.seed)
        (root / "pretrained.tmp").rename(root / "pretrained.dca")
    return Bench(D.DatasetManifest.load(root / "corpus" / "manifest.json"),
                 D.DatasetManifest.load(root / "evals" / "manifest.json"),
                 D.load_style_manifest(root / "styles" / "styles.json"),
                 load_checkpoint(root / "pretrained.dca"), root)


# -- A1: loss oracles ---------------------------------------------------------------

def _unit(rng, b, d):
    x = rng.normal(size=(b, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _oracle_agreement(X, Y, tau):
    B = len(X)
    L = [[sum(a * b for a, b in zip(X[i], Y[j])) / tau for j in range(B)] for i in range(B)]
    rows = sum(math.log(sum(math.exp(L[i][j] - L[i][i]) for j in range(B))) for i in range(B))
    cols = sum(math.log(sum(math.exp(L[j][i] - L[i][i]) for j in range(B))) for i in range(B))
    return (rows + cols) / (2 * B)


def _oracle_disentangle(X, Y):
    return sum(sum(a * b for a, b in zip(x, y)) ** 2 for x, y in zip(X, Y))


def _oracle_bce(ff, fn, W1, b1, W2, b2):
    def logit(f):
        h = np.maximum(W1 @ f + b1, 0.0)
        return float(W2 @ h + b2)

    terms = [math.log1p(math.exp(-logit(f))) for f in ff] + [math.log1p(math.exp(logit(f))) for f in fn]
    return sum(terms) / len(terms)


def _central_diff(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        g[idx] = (f(xp) - f(xm)) / (2 * eps)
    return g


def _rel_close(a, b, rel=1e-3, floor=1e-6):
    return np.all(np.abs(a - b) <= rel * np.maximum(np.abs(b), floor) + floor)


def test_A1_loss_oracles(record_property):
    t0 = time.time()
    rng = np.random.default_rng(2024)
    n = 100
    worst = {"agreement": 0.0, "disentangle": 0.0, "adversarial": 0.0}
    for _ in range(n):
        b, d = int(rng.integers(1, 5)), int(rng.integers(2, 9))
        X, Y = _unit(rng, b, d), _unit(rng, b, d)
        tau = float(rng.uniform(0.05, 2.0))
        tx, ty = torch.tensor(X), torch.tensor(Y)
        worst["agreement"] = max(worst["agreement"],
                                 abs(agreement_loss(tx, ty, tau).item() - _oracle_agreement(X, Y, tau)))
        worst["disentangle"] = max(worst["disentangle"],
                                   abs(disentangle_loss(tx, ty).item() - _oracle_disentangle(X, Y)))

        # gradient reversal: forward identity, backward -lambda times the plain gradient
        lam = float(rng.uniform(0.0, 3.0))
        w = rng.normal(size=(b, d))
        x = torch.tensor(X, requires_grad=True)
        out = grad_reverse(x, lam)
        assert torch.equal(out, x)
        (torch.tensor(w) * out ** 2).sum().backward()
        fd = _central_diff(lambda v: float(np.sum(w * v ** 2)), X)
        assert _rel_close(x.grad.numpy(), -lam * fd)

        # adversarial loss: value, classifier gradient and reversed feature gradient
        nf, nn_ = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        ff, fn = rng.normal(size=(nf, d)), rng.normal(size=(nn_, d))
        clf = DomainClassifier(d, 1, width=4).double()
        W1, b1 = (p.detach().numpy().copy() for p in clf.net[0].parameters())
        W2, b2 = (p.detach().numpy().copy() for p in clf.net[2].parameters())
        W2, b2 = W2[0], b2[0]
        tf = torch.tensor(ff, requires_grad=True)
        tn = torch.tensor(fn, requires_grad=True)
        loss = adversarial_domain_loss(tf, tn, clf, lam).scalar
        worst["adversarial"] = max(worst["adversarial"], abs(loss.item() - _oracle_bce(ff, fn, W1, b1, W2, b2)))
        loss.backward()
        assert _rel_close(tf.grad.numpy(), -lam * _central_diff(lambda v: _oracle_bce(v, fn, W1, b1, W2, b2), ff))
        assert _rel_close(tn.grad.numpy(), -lam * _central_diff(lambda v: _oracle_bce(ff, v, W1, b1, W2, b2), fn))
        assert _rel_close(clf.net[0].weight.grad.numpy(),
                          _central_diff(lambda v: _oracle_bce(ff, fn, v, b1, W2, b2), W1))
        assert _rel_close(clf.net[2].weight.grad.numpy()[0],
                          _central_diff(lambda v: _oracle_bce(ff, fn, W1, b1, v, b2), W2))
    elapsed = time.time() - t0
    record_property("detail", f"{n} instances, max abs error {max(worst.values()):.1e}, {elapsed:.1f}s")
    assert max(worst.values()) <= 1e-6
    assert elapsed < 60


# -- A2: inference-path invariance ---------------------------------------------------

def test_A2_auxiliary_heads_do_not_change_predictions(bench, record_property):
    t0 = time.time()
    subset = bench.evals.subset(domains=D.DOMAIN_NAMES)
    pick = np.random.default_rng(0).choice(len(subset), size=1000, replace=False)
    images = images_tensor(subset.load_images())[torch.from_numpy(pick)]
    prompts = [D.PROMPT_TEMPLATE.format(c) for c in subset.class_names]
    model = bench.pretrained.to_model().eval()
    before = model.zero_shot_classify(images, prompts)
    g = torch.Generator().manual_seed(7)
    with torch.no_grad():
        for p in list(model.domain_head.parameters()) + list(model.hidden_proj.parameters()):
            p.copy_(torch.randn(p.shape, generator=g) * 10)
    after = model.zero_shot_classify(images, prompts)
    changed = int((before != after).sum())
    record_property("detail", f"{changed} of 1000 labels changed, {time.time() - t0:.1f}s")
    assert changed == 0


# -- A3: reduction identity ------------------------------------------------------

def test_A3_dca_without_diffusion_equals_flyp(bench, record_property):
    t0 = time.time()
    source = bench.corpus.subset(domains=[D.SOURCE_DOMAIN], name=D.SOURCE_DOMAIN)
    zero = {"C1": 1.0, **{k: 0.0 for k in ("C2", "C3", "C4", "C5", "C6")}}
    snaps = {}
    for method, kw in (("flyp", {}), ("dca", dict(weights=zero, ratio=math.inf))):
        snaps[method] = []
        finetune(method, bench.pretrained, RunConfig(method=method, steps=50, seed=3, **kw), source, bench.styles,
                 callback=lambda s, m, k=method: snaps[k].append(Checkpoint.from_model(m)))
    equal = sum(a.equal(b) for a, b in zip(snaps["flyp"], snaps["dca"]))
    record_property("detail", f"{equal} of 50 steps bitwise equal, {time.time() - t0:.1f}s")
    assert len(snaps["dca"]) == 50 and equal == 50


# -- A4: directional domain generalization ------------------------------------------

def _combined_ranking(bench) -> list[str]:
    """Held-out domains ordered by combined OOD relative to the source anchor."""
    model = bench.pretrained.to_model().eval()
    anchor = bench.corpus.subset(domains=[D.SOURCE_DOMAIN], name="anchor")
    with torch.no_grad():
        feats = model.encode_image(images_tensor(anchor.load_images())).numpy()
    head = O.fit_sngp(feats, anchor.labels, O.SNGPConfig(), n_classes=len(anchor.class_names))
    reports = []
    for t in bench.domain_sets(D.HELDOUT_DOMAINS):
        with torch.no_grad():
            f = model.encode_image(images_tensor(t.load_images()))
            emb = model.project_class(f).numpy()
        text = O.text_ood_score(emb, t.class_names, anchor.class_names,
                                lambda ns: model.encode_text([D.PROMPT_TEMPLATE.format(n) for n in ns]),
                                float(model.temperature().detach()))
        reports.append(O.OODReport(t.name, O.image_ood_score(head, f.numpy()), text))
    reports, _ = O.combine_scores(reports)
    return [r.dataset for r in sorted(reports, key=lambda r: -r.combined)]


def test_A4_dca_beats_flyp_on_heldout_domains(bench, record_property):
    t0 = time.time()
    ranked = _combined_ranking(bench)
    source = bench.corpus.subset(domains=[D.SOURCE_DOMAIN], name=D.SOURCE_DOMAIN)
    heldout = bench.domain_sets(ranked)
    means = {m: [] for m in ("flyp", "dann", "dca")}
    for seed in SEEDS:
        for method in means:
            model, _ = finetune(method, bench.pretrained, RunConfig(method=method, seed=seed), source, bench.styles)
            table = evaluate(model, heldout, method)
            means[method].append(float(np.mean([r.accuracy for r in table.rows])))
    avg = {m: 100 * float(np.mean(v)) for m, v in means.items()}
    elapsed = time.time() - t0
    record_property("detail", f"held-out by OOD {ranked}; mean acc flyp {avg['flyp']:.1f} dca {avg['dca']:.1f} "
                              f"dann {avg['dann']:.1f} (dca-flyp {avg['dca'] - avg['flyp']:+.1f} pts), {elapsed:.0f}s")
    assert avg["dann"] <= avg["flyp"] + 1.0
    assert avg["dca"] >= avg["flyp"] + 2.0
    assert elapsed <= 30 * 60


# -- A5: unlearning audit --------------------------------------------------------

def test_A5_unlearning_forgets_one_domain(bench, record_property):
    t0 = time.time()
    retain_domains = [d for d in D.PRETRAIN_DOMAINS if d != FORGET_DOMAIN]
    retain = bench.corpus.subset(domains=retain_domains, name="retain")
    forget = bench.corpus.subset(domains=[FORGET_DOMAIN], name=FORGET_DOMAIN)
    evals = bench.domain_sets(D.PRETRAIN_DOMAINS)
    drops = []
    for seed in SEEDS:
        _, audit = unlearn_run(bench.pretrained, UnlearnConfig(seed=seed), retain, forget, evals, FORGET_DOMAIN)
        drops.append((audit.forget_drop, audit.retain_drop))
    forget_drop, retain_drop = (float(np.mean(v)) for v in zip(*drops))
    elapsed = time.time() - t0
    record_property("detail", f"forget {FORGET_DOMAIN}: relative drop {forget_drop:.1%}, "
                              f"retained mean drop {retain_drop:.1%}, {elapsed:.0f}s")
    assert forget_drop >= 0.5
    assert retain_drop <= 0.15
    assert elapsed <= 15 * 60


# -- A6: OOD score vs accuracy ----------------------------------------------------

ANCHOR_CLASSES = list(D.CLASS_NAMES[:6])
NOVEL_CLASSES = list(D.CLASS_NAMES[6:])


def ood_targets(manifest):
    """One dataset per non-source domain, varying how many anchor classes it keeps
    and how many novel class names it introduces."""
    out = []
    for i, d in enumerate(x for x in D.DOMAIN_NAMES if x != D.SOURCE_DOMAIN):
        novel = i % 5
        classes = ANCHOR_CLASSES[:6 - (i % 2) * 2] + NOVEL_CLASSES[:novel]
        out.append(manifest.subset(domains=[d], classes=classes, name=f"{d}+{novel}", relabel_classes=True))
    return out


def test_A6_combined_ood_predicts_accuracy(bench, record_property):
    t0 = time.time()
    anchor = bench.corpus.subset(domains=[D.SOURCE_DOMAIN], classes=ANCHOR_CLASSES, name="anchor",
                                 relabel_classes=True)
    model, _ = finetune("flyp", bench.pretrained, RunConfig(method="flyp"), anchor)
    model.eval()
    with torch.no_grad():
        feats = model.encode_image(images_tensor(anchor.load_images())).numpy()
    head = O.fit_sngp(feats, anchor.labels, O.SNGPConfig(), n_classes=len(ANCHOR_CLASSES))
    tau = float(model.temperature().detach())
    reports = []
    for t in ood_targets(bench.evals):
        with torch.no_grad():
            f = model.encode_image(images_tensor(t.load_images()))
            emb = model.project_class(f).numpy()
        text = O.text_ood_score(emb, t.class_names, ANCHOR_CLASSES,
                                lambda ns: model.encode_text([D.PROMPT_TEMPLATE.format(n) for n in ns]), tau)
        reports.append(O.OODReport(t.name, O.image_ood_score(head, f.numpy()), text, accuracy(model, t)))
    reports, _ = O.combine_scores(reports)
    r_comb, p_comb = O.correlate(reports, "combined")
    r_img, _ = O.correlate(reports, "image_ood")
    elapsed = time.time() - t0
    record_property("detail", f"{len(reports)} datasets, r(combined) {r_comb:.3f} (p={p_comb:.2g}), "
                              f"r(image) {r_img:.3f}, {elapsed:.0f}s")
    assert len(reports) >= 8
    assert r_comb < -0.3
    assert r_comb < r_img
    assert elapsed <= 10 * 60


# -- A7: SNGP sanity ---------------------------------------------------------------

def test_A7_noise_is_more_uncertain_than_anchor(bench, record_property):
    t0 = time.time()
    model = bench.pretrained.to_model().eval()
    train = bench.corpus.subset(domains=[D.SOURCE_DOMAIN], name="anchor")
    val = bench.evals.subset(domains=[D.SOURCE_DOMAIN], name="anchor_val")
    noise = sample_noise_batch((len(val), 3, 32, 32), seed=11)
    with torch.no_grad():
        f_train = model.encode_image(images_tensor(train.load_images())).numpy()
        f_val = model.encode_image(images_tensor(val.load_images())).numpy()
        f_noise = model.encode_image(noise).numpy()
    config = O.SNGPConfig()
    head = O.fit_sngp(f_train, train.labels, config, n_classes=len(train.class_names))
    u_val, u_noise = head.uncertainty(f_val), head.uncertainty(f_noise)
    rng = np.random.default_rng(0)
    wins = sum(u_noise[rng.integers(len(u_noise), size=len(u_noise))].mean()
               > u_val[rng.integers(len(u_val), size=len(u_val))].mean() for _ in range(100))
    norms = head.spectral_norms()
    elapsed = time.time() - t0
    record_property("detail", f"noise > anchor in {wins}/100 resamples (means {u_noise.mean():.3f} vs "
                              f"{u_val.mean():.3f}), max spectral norm {max(norms):.4f}, {elapsed:.0f}s")
    assert wins >= 95
    assert max(norms) <= config.norm_bound + 1e-6
    assert elapsed < 120


# -- A8: CLI determinism -----------------------------------------------------------

TINY_MODEL = {"depth": 1, "width": 32, "heads": 2, "text_width": 32, "text_depth": 1, "embed_dim": 16,
              "hidden_width": 8}


def _cli_pipeline(base: Path, cfg: Path):
    def run(*args):
        assert cli_main([str(a) for a in args]) == 0, args

    c = base / "corpus"
    s = base / "styles"
    run("generate-data", "--config", cfg / "data.cfg", "--seed", 1, "--out", c)
    run("generate-styles", "--config", cfg / "styles.cfg", "--seed", 2, "--out", s)
    run("pretrain", "--config", cfg / "pretrain.cfg", "--seed", 3, "--out", base / "pre", "--corpus",
        c / "manifest.json", "--styles", s / "styles.json", "--domains", "plain,inverted,pixelated")
    pre = base / "pre" / "model.dca"
    for method in ("flyp", "dann", "dca"):
        run("finetune", "--config", cfg / "finetune.cfg", "--seed", 4, "--out", base / method, "--method", method,
            "--start", pre, "--corpus", c / "manifest.json", "--styles", s / "styles.json")
    run("unlearn", "--config", cfg / "unlearn.cfg", "--seed", 5, "--out", base / "unlearn", "--start", pre,
        "--corpus", c / "manifest.json", "--retain", "plain,pixelated", "--forget", "inverted")
    run("score-ood", "--config", cfg / "sngp.cfg", "--seed", 6, "--out", base / "ood", "--checkpoint",
        base / "flyp" / "model.dca", "--corpus", c / "manifest.json")
    run("evaluate", "--out", base / "eval", "--corpus", c / "manifest.json", "--ood", base / "ood" / "ood.csv",
        "--checkpoint", f"zeroshot={pre}", "--checkpoint", f"flyp={base / 'flyp' / 'model.dca'}",
        "--checkpoint", f"dca={base / 'dca' / 'model.dca'}")
    run("report", "--out", base / "report", base / "eval" / "eval.csv")
    run("pca", "--config", cfg / "sngp.cfg", "--seed", 7, "--out", base / "pca", "--checkpoint", pre,
        "--corpus", c / "manifest.json")


def test_A8_cli_is_deterministic(tmp_path, record_property):
    t0 = time.time()
    cfg = tmp_path / "cfg"
    cfg.mkdir()
    (cfg / "data.cfg").write_text("n_classes = 3\nn_domains = 4\nimages_per_cell = 4\n")
    (cfg / "styles.cfg").write_text("n_styles = 6\nimages_per_style = 2\nhidden_width = 8\n")
    (cfg / "pretrain.cfg").write_text(f"steps = 20\nbatch_size = 8\nwarmup = 2\nmodel = {json.dumps(TINY_MODEL)}\n")
    (cfg / "finetune.cfg").write_text("steps = 6\nbatch_size = 4\nratio = 2\n")
    (cfg / "unlearn.cfg").write_text("steps = 4\nbatch_size = 4\nadversarial_batch_size = 4\n")
    (cfg / "sngp.cfg").write_text("hidden = 16\nrandom_features = 64\nepochs = 20\n")
    for run_name in ("a", "b"):
        _cli_pipeline(tmp_path / run_name, cfg)
    outputs = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*")
                     if p.suffix in (".csv", ".json", ".dca"))
    differing = [str(p) for p in outputs if (tmp_path / "a" / p).read_bytes() != (tmp_path / "b" / p).read_bytes()]
    kinds = sorted({p.suffix for p in outputs})
    record_property("detail", f"{len(outputs)} output files ({', '.join(kinds)}) from 9 subcommands, "
                              f"{len(differing)} differ, {time.time() - t0:.0f}s")
    assert not differing, differing
    assert {"ood.csv", "ood.json", "eval.csv", "pca.csv", "pairwise.csv", "audit.json"} <= {p.name for p in outputs}
