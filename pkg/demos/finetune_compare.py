"""
Finetuning one source domain, three ways
========================================

Render a small shape corpus, pretrain a toy dual encoder on a few domains,
then finetune it on the ``plain`` domain with FLYP, DANN and CLIP-DCA and
compare zero-shot accuracy on every domain.  Sizes are kept small so the
script finishes in a couple of minutes on one core; the acceptance suite
runs the full-size version.

    python demos/finetune_compare.py [workdir]
"""
import sys
import tempfile
from pathlib import Path

import numpy as np
import torch

from clipdca import data as D
from clipdca.train import PretrainConfig, RunConfig, evaluate, finetune, pretrain_toy

torch.set_num_threads(1)
work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="clipdca_demo_"))

# 10 shapes x 12 domains; each image is one shape restyled by its domain
corpus = D.generate_corpus(D.CorpusConfig(images_per_cell=12, seed=0), work / "corpus")
evals = D.generate_corpus(D.CorpusConfig(images_per_cell=12, seed=1), work / "evals")
print(f"{len(corpus)} training images, domains: {', '.join(corpus.domain_names)}")

# styled blobs with a caption and a pseudo hidden state each; they only carry style
styles = D.generate_style_bank(D.StyleBankConfig(n_styles=32, images_per_style=4), work / "styles")
print("a few style captions:", *[s.description for s in styles[:3]], sep="\n  ")

# contrastive pretraining on the seen domains
small = dict(depth=2, width=64, text_width=64, embed_dim=32)
pre, losses = pretrain_toy(corpus.subset(domains=D.PRETRAIN_DOMAINS, name="pretrain"),
                           PretrainConfig(steps=400, lr=1e-3, model=small))
print(f"pretraining loss {np.mean(losses[:20]):.3f} -> {np.mean(losses[-20:]):.3f}")

source = corpus.subset(domains=[D.SOURCE_DOMAIN], name=D.SOURCE_DOMAIN)
sets = [evals.subset(domains=[d], name=d) for d in D.DOMAIN_NAMES]
rows = evaluate(pre, sets, "zeroshot").rows
for method in ("flyp", "dann", "dca"):
    model, _ = finetune(method, pre, RunConfig(method=method, steps=150), source, styles)
    rows += evaluate(model, sets, method).rows

table = {(r.method, r.dataset): r.accuracy for r in rows}
methods = ["zeroshot", "flyp", "dann", "dca"]
print(f"\n{'domain':12s}" + "".join(f"{m:>10s}" for m in methods))
for d in D.DOMAIN_NAMES:
    tag = " *" if d in D.HELDOUT_DOMAINS else ""
    print(f"{d + tag:12s}" + "".join(f"{table[m, d]:10.2f}" for m in methods))
print("(* held out from pretraining)")
