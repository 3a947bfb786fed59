import numpy as np
import pytest

from mule.data.synthetic import gen_synthetic
from mule.model import ModelConfig, init_params

SMALL_DIMS = dict(d_w=4, d_u=5, d_h=6, d_m=4)


def small_corpus(n_images=8, languages=("en", "de"), seed=0, **kw):
    opts = dict(concepts=3, tokens_per_sentence=4, sentences_per_lang=2, img_dim=6, attributes=4,
                attributes_per_image=1, bank_size=2, distractors=3)
    opts.update(kw)
    return gen_synthetic(n_images, languages, seed=seed, **opts)


def small_params(corpus, seed=0, dtype=np.float32, parallel=False, **dims):
    d = {**SMALL_DIMS, **dims}
    cfg = ModelConfig(corpus.languages, corpus.vocab_sizes, d_img=corpus.feature_dim, parallel=parallel, **d)
    return init_params(cfg, np.random.default_rng(seed), dtype=dtype)


@pytest.fixture
def corpus():
    return small_corpus()


@pytest.fixture
def params(corpus):
    return small_params(corpus)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
