import numpy as np
import pytest

from gradselect.corpus import Document, DocumentSet, build_vocab
from gradselect.model import ModelConfig, OptimizerConfig, init_params, train
from gradselect.toycorpus import make_classification_corpus


@pytest.fixture(scope="session")
def tiny_victim():
    """A small trained 4-class victim shared by selector/metrics tests."""
    train_docs = make_classification_corpus(800, 4, seed=5)
    vocab = build_vocab(train_docs, 1024, 0)
    config = ModelConfig(vocab_size=vocab.size, embed_dim=16, num_classes=4)
    theta0 = init_params(config, 0)
    opt = OptimizerConfig(kind="sgd", learning_rate=0.5, epochs=3, batch_size=32, seed=0)
    theta_f, _ = train(theta0, train_docs, opt, vocab, 32)
    return {
        "train_docs": train_docs,
        "vocab": vocab,
        "config": config,
        "theta0": theta0,
        "theta_f": theta_f,
    }


def docs_from_texts(texts, labels=None):
    labels = labels or [None] * len(texts)
    return DocumentSet(
        Document(i, t, y) for i, (t, y) in enumerate(zip(texts, labels))
    )


@pytest.fixture
def make_docs():
    return docs_from_texts
