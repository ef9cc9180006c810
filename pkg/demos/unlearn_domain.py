"""
Forgetting one pretraining domain
=================================

Starting from a pretrained toy model, keep training contrastively on seven
domains while a gradient-reversed binary classifier pushes features of the
``noisy`` domain toward those of uniform noise.  The audit compares per-domain
zero-shot accuracy before and after.

    python demos/unlearn_domain.py [workdir]
"""
import sys
import tempfile
from pathlib import Path

import torch

from clipdca import data as D
from clipdca.train import PretrainConfig, pretrain_toy
from clipdca.unlearn import UnlearnConfig, unlearn_run

torch.set_num_threads(1)
work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="clipdca_demo_"))
forget_domain = "noisy"

corpus = D.generate_corpus(D.CorpusConfig(images_per_cell=12, seed=0), work / "corpus")
evals = D.generate_corpus(D.CorpusConfig(images_per_cell=12, seed=1), work / "evals")
# the forget domain has to be learned before it can be forgotten, so pretrain longer than the other demos
pre, _ = pretrain_toy(corpus.subset(domains=D.PRETRAIN_DOMAINS, name="pretrain"),
                      PretrainConfig(steps=1200, lr=1e-3, model=dict(depth=2, width=64, text_width=64,
                                                                     embed_dim=32)))

retain = corpus.subset(domains=[d for d in D.PRETRAIN_DOMAINS if d != forget_domain], name="retain")
forget = corpus.subset(domains=[forget_domain], name=forget_domain)
audit_sets = [evals.subset(domains=[d], name=d) for d in D.PRETRAIN_DOMAINS]
_, audit = unlearn_run(pre, UnlearnConfig(steps=300), retain, forget, audit_sets, forget_domain)

print(f"{'domain':12s}{'before':>8s}{'after':>8s}")
for d in D.PRETRAIN_DOMAINS:
    print(f"{d:12s}{audit.before[d]:8.2f}{audit.after[d]:8.2f}")
print(f"\nforget domain relative drop {audit.forget_drop:.1%}, retained mean drop {audit.retain_drop:.1%}")
