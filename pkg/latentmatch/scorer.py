"""
Query-document scoring and ranking

Three ranking modes share one collection representation:

  latent    <Lx x, Ly y>
  combined  <Lx x, Ly y> + x^T y
  bm25      Okapi BM25 over raw title term frequencies

Queries are raw term-frequency vectors, documents tf-idf title vectors.
"""

import logging
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from .corpus import (IDF_FILE, TermVector, Vocabulary, load_idf, load_vocabulary,
                     term_frequencies, vectorize_document, vectorize_query)
from .exceptions import ConfigError, DataError
from .parallel import ordered_map
from .trainer import MappingPair, load_model
from .tsv import iter_tsv, write_tsv

logger = logging.getLogger(__name__)

DEFAULT_K1 = 1.2
DEFAULT_B = 0.75


class ScoreMode(Enum):
    LATENT = "latent"
    COMBINED = "combined"
    BM25 = "bm25"

    @classmethod
    def parse(cls, value) -> "ScoreMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(f"Unknown ranking mode {value!r} (latent|combined|bm25)")


@dataclass
class Model:
    """Trained mappings plus the vocabulary they were trained on"""
    mappings: MappingPair
    vocab: Vocabulary
    vocab_path: Optional[str] = None

    def __post_init__(self):
        d_x, d_y = self.mappings.dims
        if d_x != self.vocab.size or d_y != self.vocab.size:
            raise DataError(f"model has {d_x}x{d_y} term columns but the vocabulary has "
                            f"{self.vocab.size} terms")

    @classmethod
    def load(cls, path: str) -> "Model":
        mappings, vocab_path = load_model(path)
        if not os.path.isabs(vocab_path) and not os.path.exists(vocab_path):
            candidate = os.path.join(os.path.dirname(path), vocab_path)
            if os.path.exists(candidate):
                vocab_path = candidate
        vocab = load_vocabulary(vocab_path)
        logger.info(f"Loaded model {path} (d={mappings.d}, vocabulary={vocab.size})")
        return cls(mappings, vocab, vocab_path)

    @property
    def bundle_directory(self) -> Optional[str]:
        if self.vocab_path is None:
            return None
        return os.path.dirname(self.vocab_path) or "."

    def load_idf(self) -> np.ndarray:
        """idf table stored next to the vocabulary"""
        if self.bundle_directory is None:
            raise DataError("model has no recorded vocabulary path to locate idf values")
        return load_idf(os.path.join(self.bundle_directory, IDF_FILE), self.vocab)

    def project_query(self, x: TermVector) -> np.ndarray:
        return self.mappings.Lx[:, x.indices] @ x.values

    def project_document(self, y: TermVector) -> np.ndarray:
        return self.mappings.Ly[:, y.indices] @ y.values


@dataclass
class RankedList:
    query: str
    items: List[Tuple[str, float]] = field(default_factory=list)

    @property
    def doc_ids(self) -> List[str]:
        return [doc_id for doc_id, _ in self.items]

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class CollectionStats:
    n_docs: int
    avg_length: float
    df: np.ndarray


@dataclass
class DocumentCollection:
    """Vectorized documents: tf-idf rows for matching, raw tf rows for BM25"""
    doc_ids: List[str]
    tfidf: sp.csr_matrix
    tf: sp.csr_matrix
    stats: CollectionStats

    @classmethod
    def build(cls, titles: Dict[str, str], vocab: Vocabulary, idf: np.ndarray) -> "DocumentCollection":
        doc_ids = list(titles)
        tfidf_rows = [vectorize_document(titles[doc_id], vocab, idf) for doc_id in doc_ids]
        tf_rows = [term_frequencies(titles[doc_id], vocab) for doc_id in doc_ids]
        tf = _stack(tf_rows, vocab.size)
        lengths = np.asarray(tf.sum(axis=1)).ravel()
        df = np.asarray((tf > 0).sum(axis=0)).ravel()
        avg_length = float(lengths.mean()) if len(lengths) else 0.0
        stats = CollectionStats(len(doc_ids), avg_length, df)
        return cls(doc_ids, _stack(tfidf_rows, vocab.size), tf, stats)

    def __len__(self) -> int:
        return len(self.doc_ids)

    @property
    def lengths(self) -> np.ndarray:
        return np.asarray(self.tf.sum(axis=1)).ravel()

    def row(self, doc_id: str) -> int:
        try:
            return self.doc_ids.index(doc_id)
        except ValueError:
            raise KeyError(doc_id)

    def subset(self, doc_ids: Sequence[str]) -> "DocumentCollection":
        """Restriction to ``doc_ids``; statistics stay those of the full collection"""
        positions = {doc_id: i for i, doc_id in enumerate(self.doc_ids)}
        rows, kept = [], []
        for doc_id in doc_ids:
            if doc_id in positions:
                rows.append(positions[doc_id])
                kept.append(doc_id)
        rows = np.asarray(rows, dtype=np.int64)
        return DocumentCollection(kept, self.tfidf[rows], self.tf[rows], self.stats)


def _stack(vectors: Sequence[TermVector], dim: int) -> sp.csr_matrix:
    indptr = np.zeros(len(vectors) + 1, dtype=np.int64)
    for i, vector in enumerate(vectors):
        indptr[i + 1] = indptr[i] + vector.nnz
    indices = np.concatenate([v.indices for v in vectors]) if vectors else np.zeros(0, np.int64)
    data = np.concatenate([v.values for v in vectors]) if vectors else np.zeros(0)
    return sp.csr_matrix((data, indices, indptr), shape=(len(vectors), dim))


# ---------------------------------------------------------------------------
# Pairwise scores
# ---------------------------------------------------------------------------

def latent_match(model: Model, x: TermVector, y: TermVector) -> float:
    """Inner product of the latent projections of x and y"""
    return float(np.dot(model.project_query(x), model.project_document(y)))


def score_ir(model: Model, x: TermVector, y: TermVector) -> float:
    """Latent match plus the exact term-matching score x^T y"""
    return latent_match(model, x, y) + x.dot(y)


def bm25_idf(stats: CollectionStats, term_ids: np.ndarray) -> np.ndarray:
    df = stats.df[term_ids].astype(np.float64)
    return np.log((stats.n_docs - df + 0.5) / (df + 0.5) + 1.0)


def bm25_score(stats: CollectionStats, query: TermVector, doc: TermVector,
               k1: float = DEFAULT_K1, b: float = DEFAULT_B) -> float:
    """Okapi BM25 of one document; every distinct query term counts once"""
    if not query.nnz or not doc.nnz:
        return 0.0
    common, _, j = np.intersect1d(query.indices, doc.indices, assume_unique=True,
                                  return_indices=True)
    if not len(common):
        return 0.0
    tf = doc.values[j]
    norm = k1 * (1.0 - b + b * doc.total() / _avg_length(stats))
    return float(np.sum(bm25_idf(stats, common) * tf * (k1 + 1.0) / (tf + norm)))


def _avg_length(stats: CollectionStats) -> float:
    return stats.avg_length if stats.avg_length > 0 else 1.0


# ---------------------------------------------------------------------------
# Ranking
# ---------------------------------------------------------------------------

class Ranker:
    """Scores queries against one collection under one model

    Document projections Ly y are computed once per collection.
    """

    def __init__(self, model: Optional[Model], collection: DocumentCollection,
                 k1: float = DEFAULT_K1, b: float = DEFAULT_B):
        self.model = model
        self.collection = collection
        self.k1 = k1
        self.b = b
        self._doc_latent: Optional[np.ndarray] = None

    @property
    def doc_latent(self) -> np.ndarray:
        """n_docs x d matrix of document projections"""
        if self._doc_latent is None:
            if self.model is None:
                raise ConfigError("latent ranking modes need a model")
            self._doc_latent = np.asarray(self.collection.tfidf @ self.model.mappings.Ly.T)
        return self._doc_latent

    def scores(self, x: TermVector, mode: ScoreMode) -> np.ndarray:
        mode = ScoreMode.parse(mode)
        if mode is ScoreMode.BM25:
            return self._bm25_scores(x)
        values = self.doc_latent @ self.model.project_query(x)
        if mode is ScoreMode.COMBINED:
            exact = self.collection.tfidf[:, x.indices] @ x.values
            values = values + np.asarray(exact).ravel()
        return values

    def _bm25_scores(self, x: TermVector) -> np.ndarray:
        collection = self.collection
        scores = np.zeros(len(collection))
        if not x.nnz:
            return scores
        norm = self.k1 * (1.0 - self.b + self.b * collection.lengths / _avg_length(collection.stats))
        idf = bm25_idf(collection.stats, x.indices)
        columns = collection.tf[:, x.indices].toarray()
        for j in range(len(x.indices)):
            tf = columns[:, j]
            scores += idf[j] * tf * (self.k1 + 1.0) / (tf + norm)
        return scores

    def rank(self, query: str, k: int, mode: ScoreMode = ScoreMode.COMBINED,
             term_filter: bool = False, vocab: Optional[Vocabulary] = None) -> RankedList:
        if k <= 0:
            raise ConfigError(f"k must be positive, got {k}")
        mode = ScoreMode.parse(mode)
        vocab = vocab or self.model.vocab
        x = vectorize_query(query, vocab)
        scores = self.scores(x, mode)
        doc_ids = np.array(self.collection.doc_ids, dtype=object)

        keep = np.arange(len(scores))
        if term_filter and mode is ScoreMode.BM25:
            if x.nnz:
                keep = np.flatnonzero(self.collection.tf[:, x.indices].getnnz(axis=1) > 0)
            else:
                keep = keep[:0]

        order = sorted(keep, key=lambda i: (-scores[i], doc_ids[i]))[:k]
        return RankedList(query, [(str(doc_ids[i]), float(scores[i])) for i in order])

    def rank_all(self, queries: Sequence[str], k: int, mode: ScoreMode = ScoreMode.COMBINED,
                 candidates: Optional[Dict[str, List[str]]] = None, term_filter: bool = False,
                 workers: int = 1, vocab: Optional[Vocabulary] = None) -> List[RankedList]:
        """Rank every query; with ``candidates`` each query re-ranks its own document list"""
        mode = ScoreMode.parse(mode)
        if candidates is None and mode is not ScoreMode.BM25:
            self.doc_latent
        subsets: Dict[str, "Ranker"] = {}

        def rank_one(query: str) -> RankedList:
            if candidates is None:
                return self.rank(query, k, mode, term_filter, vocab)
            return self._restricted(candidates.get(query, []), subsets).rank(
                query, k, mode, term_filter, vocab)

        return ordered_map(rank_one, list(queries), workers=workers)

    def _restricted(self, doc_ids: List[str], cache: Dict[str, "Ranker"]) -> "Ranker":
        key = '\t'.join(doc_ids)
        if key not in cache:
            ranker = Ranker(self.model, self.collection.subset(doc_ids), self.k1, self.b)
            cache[key] = ranker
        return cache[key]


def rank_top_k(model: Optional[Model], query: str, collection: DocumentCollection, k: int,
               mode: ScoreMode = ScoreMode.COMBINED, term_filter: bool = False,
               vocab: Optional[Vocabulary] = None, k1: float = DEFAULT_K1,
               b: float = DEFAULT_B) -> RankedList:
    """Top ``k`` documents by descending score, ties by doc id"""
    return Ranker(model, collection, k1, b).rank(query, k, mode, term_filter, vocab)


def nearest_terms(model: Model, term: str, k: int = 10, space: str = "x") -> List[Tuple[str, float]]:
    """Terms whose latent columns have the highest cosine with ``term``'s

    ``space`` selects the query mapping (``x``) or the document mapping (``y``).
    """
    if k <= 0:
        raise ConfigError(f"k must be positive, got {k}")
    if space not in ("x", "y"):
        raise ConfigError(f"space must be 'x' or 'y', got {space!r}")
    term_id = model.vocab.lookup(term)
    if term_id is None:
        raise DataError(f"term {term!r} not in the model vocabulary")

    L = model.mappings.Lx if space == "x" else model.mappings.Ly
    norms = np.linalg.norm(L, axis=0)
    if norms[term_id] == 0:
        return []
    safe = np.where(norms > 0, norms, 1.0)
    cosines = (L[:, term_id] @ L) / (safe * norms[term_id])
    cosines[norms == 0] = 0.0
    cosines[term_id] = -np.inf
    order = np.lexsort((np.arange(len(cosines)), -cosines))
    return [(model.vocab.term(int(i)), float(cosines[i])) for i in order[:k]
            if np.isfinite(cosines[i])]


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def write_rankings(path: str, rankings: Sequence[RankedList], header: Optional[str] = None) -> int:
    """``query<TAB>rank<TAB>doc_id<TAB>score`` with 1-based ranks"""
    rows = ((ranked.query, rank, doc_id, f"{score:.6f}")
            for ranked in rankings
            for rank, (doc_id, score) in enumerate(ranked.items, start=1))
    return write_tsv(path, rows, header=header)


def read_rankings(path: str) -> "OrderedDict[str, List[str]]":
    """Ranked doc ids per query in file order of rank"""
    ranked: Dict[str, List[Tuple[int, str]]] = OrderedDict()
    for lineno, fields in iter_tsv(path):
        if len(fields) != 4:
            raise DataError(f"expected query<TAB>rank<TAB>doc_id<TAB>score, got {len(fields)} fields",
                            path=path, line=lineno)
        try:
            rank = int(fields[1])
        except ValueError:
            raise DataError(f"rank must be an integer, got {fields[1]!r}", path=path, line=lineno)
        ranked.setdefault(fields[0], []).append((rank, fields[2].strip()))
    return OrderedDict((query, [doc for _, doc in sorted(items)]) for query, items in ranked.items())


def read_candidates(path: str) -> "OrderedDict[str, List[str]]":
    """``query<TAB>doc_id`` lines; per-query order preserved, repeats dropped"""
    candidates: "OrderedDict[str, List[str]]" = OrderedDict()
    for lineno, fields in iter_tsv(path):
        if len(fields) < 2:
            raise DataError(f"expected query<TAB>doc_id, got {len(fields)} fields",
                            path=path, line=lineno)
        docs = candidates.setdefault(fields[0], [])
        doc_id = fields[1].strip()
        if doc_id not in docs:
            docs.append(doc_id)
    return candidates


def read_queries(path: str) -> List[str]:
    """One query per line, first field of TSV lines, duplicates dropped"""
    queries: List[str] = []
    seen = set()
    for _, fields in iter_tsv(path):
        query = fields[0]
        if query.strip() and query not in seen:
            seen.add(query)
            queries.append(query)
    return queries
