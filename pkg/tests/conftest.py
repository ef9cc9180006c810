import pytest
import torch

from clipdca import data as D
from clipdca.model import build_vocab_texts, make_model

TINY = dict(depth=1, width=32, heads=2, text_width=32, text_depth=1, embed_dim=16, hidden_width=8)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_corpus")
    return D.generate_corpus(D.CorpusConfig(n_classes=4, n_domains=4, images_per_cell=4, seed=0), root)


@pytest.fixture(scope="session")
def tiny_styles(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_styles")
    D.generate_style_bank(D.StyleBankConfig(n_styles=8, images_per_style=2, hidden_width=8, seed=0), root)
    return D.load_style_manifest(root / "styles.json")


@pytest.fixture(scope="session")
def tiny_model(tiny_corpus, tiny_styles):
    texts = build_vocab_texts(tiny_corpus.class_names, tiny_corpus.domain_names,
                              [s.description for s in tiny_styles])
    return make_model(texts, seed=0, **TINY).eval()


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, in order."""
    lines = {}
    for outcome in ("passed", "failed", "error", "skipped"):
        for rep in terminalreporter.stats.get(outcome, []):
            name = getattr(rep, "nodeid", "").rpartition("::")[2]
            if not name.startswith("test_A") or getattr(rep, "when", "call") not in ("call", "setup"):
                continue
            key = name[5:7]
            if key in lines and rep.when == "setup" and outcome == "passed":
                continue
            detail = dict(getattr(rep, "user_properties", [])).get("detail", "")
            status = "PASS" if outcome == "passed" else outcome.upper().replace("FAILED", "FAIL")
            lines[key] = f"{key} {status:5s} {name[8:]}" + (f": {detail}" if detail else "")
    if lines:
        terminalreporter.section("acceptance criteria")
        for key in sorted(lines):
            terminalreporter.write_line(lines[key])
