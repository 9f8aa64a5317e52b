import pytest

from docflow.config import default_config
from docflow.runtime import build_system
from docflow.worldgen import PagesDistribution, generate_corpus


@pytest.fixture
def config():
    return default_config()


@pytest.fixture
def system(config, tmp_path):
    sys_ = build_system(config, seed=11, time_scale=0.01, root=tmp_path)
    yield sys_
    sys_.shutdown()


def fields_by_label(config):
    return {name: list(dt.fields) for name, dt in config.doc_types.items()}


def make_corpus(config, n_docs, seed, pages=8, labels=None):
    labels = labels or {"invoice": 1.0}
    return generate_corpus(
        n_docs=n_docs,
        pages_distribution=PagesDistribution.fixed(pages),
        label_distribution=labels,
        seed=seed,
        fields_by_label=fields_by_label(config),
    )
