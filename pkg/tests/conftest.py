"""
Shared fixtures for the latentmatch test suite
"""

import os
import sys

import numpy as np
import pytest
import scipy.sparse as sp

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from latentmatch.corpus import ClickRecord, CrossCovariance
from latentmatch.knowledge import KnowledgeMatrix

CLICK_LINES = [
    ("download 2048 apk", "d1", "2048 puzzle game", 3),
    ("download game apk", "d1", "2048 puzzle game", 2),
    ("racing car game", "d2", "car racing fun", 4),
    ("fast car", "d2", "car racing fun", 1),
    ("puzzle games", "d3", "puzzle collection", 2),
    ("music player", "d4", "music player free", 5),
    ("free music", "d4", "music player free", 0),
]


@pytest.fixture
def click_records():
    return [ClickRecord(*line) for line in CLICK_LINES]


@pytest.fixture
def click_log(tmp_path):
    """Click log TSV with a provenance header line"""
    path = tmp_path / "clicks.tsv"
    with open(path, 'w', encoding='utf-8') as f:
        f.write("# config_hash=test\n")
        for query, doc_id, title, clicks in CLICK_LINES:
            f.write(f"{query}\t{doc_id}\t{title}\t{clicks}\n")
    return str(path)


@pytest.fixture
def tags_file(tmp_path):
    path = tmp_path / "tags.tsv"
    path.write_text("d1\tPuzzle\nd2\tracing,fun\nd3\tpuzzle\n", encoding='utf-8')
    return str(path)


def random_cov(rng, d_x, d_y, density=0.6):
    dense = rng.normal(size=(d_x, d_y)) * (rng.random((d_x, d_y)) < density)
    return CrossCovariance.from_dense(dense)


def random_knowledge(rng, dim, density=0.4):
    upper = np.triu(rng.normal(size=(dim, dim)) * (rng.random((dim, dim)) < density))
    symmetric = upper + np.triu(upper, 1).T
    return KnowledgeMatrix(sp.csr_matrix(symmetric), pair_count=1)


def spectrum_cov(rng, singular_values, size):
    """size x size matrix with the given leading singular values (the rest 0)"""
    u, _ = np.linalg.qr(rng.normal(size=(size, size)))
    v, _ = np.linalg.qr(rng.normal(size=(size, size)))
    s = np.zeros(size)
    s[:len(singular_values)] = singular_values
    return CrossCovariance.from_dense(u @ np.diag(s) @ v.T)
