"""
Dataset-level OOD scores
========================

Fit the SNGP head on ``plain`` images of six shapes, then score target
datasets that differ in style and in which class names they use.  The image
score sees only pixels; the text score sees only the class names.  Their
min-max combination is compared against the accuracy each dataset gets.

    python demos/ood_scores.py [workdir]
"""
import sys
import tempfile
from pathlib import Path

import torch

from clipdca import data as D
from clipdca import oodscore as O
from clipdca.model import images_tensor
from clipdca.train import PretrainConfig, accuracy, pretrain_toy

torch.set_num_threads(1)
work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="clipdca_demo_"))

corpus = D.generate_corpus(D.CorpusConfig(images_per_cell=12, seed=0), work / "corpus")
model, _ = pretrain_toy(corpus.subset(domains=D.PRETRAIN_DOMAINS, name="pretrain"),
                        PretrainConfig(steps=400, lr=1e-3, model=dict(depth=2, width=64, text_width=64,
                                                                      embed_dim=32)))
model.eval()

anchor_classes = list(D.CLASS_NAMES[:6])
anchor = corpus.subset(domains=["plain"], classes=anchor_classes, name="anchor", relabel_classes=True)
with torch.no_grad():
    anchor_feats = model.encode_image(images_tensor(anchor.load_images())).numpy()
head = O.fit_sngp(anchor_feats, anchor.labels, O.SNGPConfig(), n_classes=6)

# targets: restyled anchor classes, some with unseen class names mixed in
targets = [("plain", anchor_classes), ("faded", anchor_classes), ("noisy", anchor_classes[:4]),
           ("grayscale", anchor_classes + ["star", "heart"]), ("outlined", anchor_classes[:4] + ["arrow"]),
           ("speckled", anchor_classes + list(D.CLASS_NAMES[6:]))]


def text_features(names):
    return model.encode_text([D.PROMPT_TEMPLATE.format(n) for n in names])


reports = []
for domain, classes in targets:
    t = corpus.subset(domains=[domain], classes=classes, name=f"{domain}/{len(classes)}", relabel_classes=True)
    with torch.no_grad():
        f = model.encode_image(images_tensor(t.load_images()))
        text = O.text_ood_score(model.project_class(f).numpy(), t.class_names, anchor_classes, text_features,
                                float(model.temperature().detach()))
    reports.append(O.OODReport(t.name, O.image_ood_score(head, f.numpy()), text, accuracy(model, t)))

reports, norm = O.combine_scores(reports)
print(O.ood_csv(reports))
for score in ("image_ood", "text_ood", "combined"):
    r, p = O.correlate(reports, score)
    print(f"{score:10s} vs accuracy: r = {r:+.3f} (p = {p:.2g})")

# pairwise scores between the pretraining domains and their 2-D PCA
domains = [corpus.subset(domains=[d], name=d) for d in D.PRETRAIN_DOMAINS]
matrix = O.pairwise_ood_matrix(domains, model, O.SNGPConfig(epochs=100))
print(O.pca_csv(D.PRETRAIN_DOMAINS, O.pca_embed(matrix)))
