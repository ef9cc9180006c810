"""Command line entry point: ``clipdca <subcommand> [--config FILE] [--seed N] [--out DIR]``.

Config files hold ``key = value`` lines (``#`` comments allowed).  Values are
parsed as JSON when possible, otherwise kept as strings; dotted keys such as
``weights.C5 = 0.5`` update one entry of a dict field.  Command-line flags
win over the file.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import torch

from . import data as D
from . import oodscore as O
from . import train as T
from . import unlearn as U
from .checkpoint import load_checkpoint, save_checkpoint
from .model import images_tensor


def read_config(path) -> dict:
    if path is None:
        return {}
    text = Path(path).read_text(encoding="utf-8")
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"), delimiters=("=",))
    cp.optionxform = str
    cp.read_string("[run]\n" + text)
    out = {}
    for k, v in cp["run"].items():
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


def build(cls, cfg: dict, **overrides):
    """Instantiate a config dataclass from the keys it knows about."""
    names = {f.name for f in dataclasses.fields(cls)}
    kw = {}
    for k, v in {**cfg, **{k: v for k, v in overrides.items() if v is not None}}.items():
        head, _, sub = k.partition(".")
        if head not in names:
            continue
        if sub:
            base = kw.get(head)
            if base is None:
                base = dict(next(f for f in dataclasses.fields(cls) if f.name == head).default_factory())
            base[sub] = v
            kw[head] = base
        else:
            kw[k] = v
    return cls(**kw)


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, default=str) + "\n"


def _domain_sets(corpus: D.DatasetManifest, names) -> list[D.DatasetManifest]:
    return [corpus.subset(domains=[d], name=d) for d in names]


def _file_digest(path) -> str:
    return "sha256:" + hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _names(arg, default) -> list[str]:
    return list(default) if not arg else [s.strip() for s in arg.split(",") if s.strip()]


# --------------------------------------------------------------------------
# subcommands


def cmd_generate_data(a, cfg):
    config = build(D.CorpusConfig, cfg, seed=a.seed)
    man = D.generate_corpus(config, a.out)
    print(f"wrote {len(man)} images to {a.out}")


def cmd_generate_styles(a, cfg):
    config = build(D.StyleBankConfig, cfg, seed=a.seed)
    recs = D.generate_style_bank(config, a.out)
    print(f"wrote {len(recs)} styles to {a.out}")


def cmd_pretrain(a, cfg):
    corpus = D.DatasetManifest.load(a.corpus)
    domains = _names(a.domains, D.PRETRAIN_DOMAINS)
    config = build(T.PretrainConfig, cfg, seed=a.seed)
    extra = [s.description for s in D.load_style_manifest(a.styles, require_hidden_states=False)] if a.styles else []
    model, hist = T.pretrain_toy(corpus.subset(domains=domains, name="pretrain"), config, extra_texts=extra)
    out = Path(a.out)
    save_checkpoint(model, out / "model.dca", step=config.steps, seed=config.seed,
                    run_config=dataclasses.asdict(config))
    _write(out / "history.json", _dump({"loss": [round(float(x), 6) for x in hist]}))
    print(f"final loss {sum(hist[-50:]) / len(hist[-50:]):.4f}")


def cmd_finetune(a, cfg):
    corpus = D.DatasetManifest.load(a.corpus)
    config = build(T.RunConfig, cfg, method=a.method, seed=a.seed)
    source = corpus.subset(domains=[a.source], name=a.source)
    styles = D.load_style_manifest(a.styles, require_hidden_states=config.effective_weights()["C6"] > 0) \
        if a.styles else None
    captions = corpus.subset(domains=_names(a.caption_domains, D.PRETRAIN_DOMAINS), name="captions") \
        if config.with_captions else None
    start = load_checkpoint(a.start)
    model, hist = T.finetune(config.method, start, config, source, styles, captions)
    out = Path(a.out)
    save_checkpoint(model, out / "model.dca", step=config.steps, seed=config.seed,
                    run_config=dataclasses.asdict(config), parents=[_file_digest(a.start)])
    _write(out / "history.json", _dump(hist))
    print(f"finetuned {config.method} for {config.steps} steps")


def cmd_unlearn(a, cfg):
    corpus = D.DatasetManifest.load(a.corpus)
    config = build(U.UnlearnConfig, cfg, lambd=a.lambd, steps=a.steps, seed=a.seed)
    retain = corpus.subset(domains=_names(a.retain, []), name="retain")
    forget = corpus.subset(domains=[a.forget], name=a.forget)
    evals = _domain_sets(corpus, _names(a.retain, []) + [a.forget])
    model, audit = U.unlearn_run(load_checkpoint(a.start), config, retain, forget, evals, a.forget)
    out = Path(a.out)
    save_checkpoint(model, out / "model.dca", step=config.steps, seed=config.seed, parents=[_file_digest(a.start)])
    _write(out / "audit.json", _dump(audit.to_json()))
    print(f"forget drop {audit.forget_drop:.3f}, retain drop {audit.retain_drop:.3f}")


def _ood_targets(corpus, spec_path, anchor_domain):
    """Target datasets: a JSON list of {name, domain, classes}, or one per non-anchor domain."""
    if spec_path:
        items = json.loads(Path(spec_path).read_text(encoding="utf-8"))
        return [corpus.subset(domains=[it["domain"]], classes=it.get("classes"), name=it["name"],
                              relabel_classes=it.get("classes") is not None) for it in items]
    return _domain_sets(corpus, [d for d in corpus.domain_names if d != anchor_domain])


def cmd_score_ood(a, cfg):
    corpus = D.DatasetManifest.load(a.corpus)
    config = build(O.SNGPConfig, cfg, seed=a.seed)
    ck = load_checkpoint(a.checkpoint)
    model = ck.to_model().eval()
    anchor_classes = _names(a.anchor_classes, corpus.class_names)
    anchor = corpus.subset(domains=[a.anchor], classes=anchor_classes, name="anchor", relabel_classes=True)
    targets = _ood_targets(corpus, a.datasets, a.anchor)
    with torch.no_grad():
        feats = model.encode_image(images_tensor(anchor.load_images())).numpy()
    head = O.fit_sngp(feats, anchor.labels, config, n_classes=len(anchor.class_names))
    reports = []
    tau = float(model.temperature().detach())
    for t in targets:
        with torch.no_grad():
            f = model.encode_image(images_tensor(t.load_images()))
            emb = model.project_class(f)
        text = O.text_ood_score(emb.numpy(), t.class_names, anchor.class_names,
                                lambda names: model.encode_text([D.PROMPT_TEMPLATE.format(n) for n in names]), tau)
        reports.append(O.OODReport(t.name, O.image_ood_score(head, f.numpy()), text, T.accuracy(model, t)))
    reports, norm = O.combine_scores(reports)
    r, p = O.correlate(reports, "combined")
    out = Path(a.out)
    _write(out / "ood.csv", O.ood_csv(reports))
    _write(out / "ood.json", O.ood_sidecar(norm, D.config_digest(dataclasses.asdict(config)), reports,
                                          checkpoint=ck.metadata.get("config_digest"),
                                          pearson_r=r, pearson_p=p))
    print(f"combined OOD vs accuracy: r={r:.3f} (p={p:.3g})")


def cmd_evaluate(a, cfg):
    corpus = D.DatasetManifest.load(a.corpus)
    sets = _domain_sets(corpus, _names(a.domains, corpus.domain_names))
    ood = {}
    if a.ood:
        import csv
        with open(a.ood, encoding="utf-8", newline="") as fh:
            ood = {row["dataset"]: float(row["combined"]) for row in csv.DictReader(fh) if row["combined"]}
    rows = []
    for item in a.checkpoint:
        name, _, path = item.rpartition("=")
        ck = load_checkpoint(path)
        rows += T.evaluate(ck, sets, method=name or Path(path).stem, combined_ood=ood).rows
    table = T.EvalTable(rows)
    _write(Path(a.out) / "eval.csv", table.to_csv())
    for r in rows:
        print(f"{r.method:12s} {r.dataset:12s} {r.accuracy:.3f}")


def cmd_report(a, cfg):
    import csv
    rows = []
    for path in a.tables:
        with open(path, encoding="utf-8", newline="") as fh:
            for row in csv.DictReader(fh):
                c = row.get("combined_ood") or ""
                rows.append(T.EvalRow(row["method"], row["dataset"], float(row["accuracy"]),
                                      float(c) if c else None))
    summary = T.report([T.EvalTable(rows)], a.out, zeroshot_method=a.zeroshot, meta={"seed": a.seed})
    print(_dump(summary), end="")


def cmd_pca(a, cfg):
    corpus = D.DatasetManifest.load(a.corpus)
    names = _names(a.domains, corpus.domain_names)
    config = build(O.SNGPConfig, cfg, seed=a.seed)
    model = load_checkpoint(a.checkpoint).to_model().eval()
    mat = O.pairwise_ood_matrix(_domain_sets(corpus, names), model, config)
    res = O.pca_embed(mat)
    out = Path(a.out)
    lines = ["domain," + ",".join(names)]
    lines += [n + "," + ",".join(f"{v:.6f}" for v in row) for n, row in zip(names, mat)]
    _write(out / "pairwise.csv", "\n".join(lines) + "\n")
    _write(out / "pca.csv", O.pca_csv(names, res))
    print(f"explained variance {res.explained_variance[0]:.4f} {res.explained_variance[1]:.4f}")


# --------------------------------------------------------------------------


def parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", required=True, help="output directory")
    p = argparse.ArgumentParser(prog="clipdca", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        s = sub.add_parser(name, parents=[common], help=help_)
        s.set_defaults(fn=fn)
        return s

    add("generate-data", cmd_generate_data, "render the multi-domain shape corpus")
    add("generate-styles", cmd_generate_styles, "render a style bank with descriptions and hidden states")
    s = add("pretrain", cmd_pretrain, "contrastive pretraining on the seen domains")
    s.add_argument("--corpus", required=True)
    s.add_argument("--styles", help="style manifest whose descriptions join the vocabulary")
    s.add_argument("--domains", help="comma-separated pretraining domains")
    s = add("finetune", cmd_finetune, "finetune with flyp, dann or dca")
    s.add_argument("--method", choices=T.METHODS)
    s.add_argument("--start", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--source", default=D.SOURCE_DOMAIN)
    s.add_argument("--styles")
    s.add_argument("--caption-domains", help="domains for the captioned stream (with_captions = true)")
    s = add("unlearn", cmd_unlearn, "adversarially forget one domain")
    s.add_argument("--start", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--retain", required=True, help="comma-separated retain domains")
    s.add_argument("--forget", required=True)
    s.add_argument("--lambda", dest="lambd", type=float)
    s.add_argument("--steps", type=int)
    s = add("score-ood", cmd_score_ood, "image, text and combined OOD scores per dataset")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--anchor", default=D.SOURCE_DOMAIN)
    s.add_argument("--anchor-classes", help="comma-separated anchor class names")
    s.add_argument("--datasets", help="JSON list of {name, domain, classes}")
    s = add("evaluate", cmd_evaluate, "zero-shot accuracy per domain")
    s.add_argument("--checkpoint", action="append", required=True, help="[name=]path, repeatable")
    s.add_argument("--corpus", required=True)
    s.add_argument("--domains")
    s.add_argument("--ood", help="ood.csv whose combined column is joined")
    s = add("report", cmd_report, "merge eval tables into results, scatter and fits")
    s.add_argument("tables", nargs="+")
    s.add_argument("--zeroshot", default="zeroshot")
    s = add("pca", cmd_pca, "pairwise domain OOD matrix and its 2-D PCA")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--domains")
    return p


def main(argv=None) -> int:
    a = parser().parse_args(argv)
    try:
        cfg = read_config(a.config)
        a.fn(a, cfg)
    except (ValueError, OSError, KeyError) as e:
        print(f"clipdca {a.command}: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
