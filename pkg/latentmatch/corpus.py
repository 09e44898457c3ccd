"""
Click-log ingestion for latentmatch

Builds the vocabulary shared by queries and document titles, turns text
into term vectors (raw term frequency for queries, tf-idf for titles) and
accumulates the empirical cross-covariance matrix C = (1/n) sum x_i y_i^T.
"""

import json
import logging
import math
import os
import struct
from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from datetime import datetime
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

from .exceptions import DataError, EmptyCorpusError
from .parallel import chunked, ordered_map
from .tsv import iter_tsv, parse_float, parse_int, write_tsv

logger = logging.getLogger(__name__)

COV_MAGIC = b"LMC1"
_COV_TRIPLE = np.dtype([('u', '<u4'), ('v', '<u4'), ('value', '<f8')])

TAG_PREFIX = "tag:"

VOCAB_FILE = "vocab.txt"
IDF_FILE = "idf.tsv"
COV_FILE = "cross_cov.lmc"
DOCUMENTS_FILE = "documents.tsv"
QUERY_FREQ_FILE = "query_freq.tsv"
META_FILE = "bundle.json"


def tokenize(text: str) -> List[str]:
    """Lowercase and split on whitespace; no stemming"""
    return text.lower().split()


@dataclass(frozen=True)
class ClickRecord:
    """One line of the click log"""
    query: str
    doc_id: str
    doc_title: str
    clicks: int


@dataclass
class Vocabulary:
    """Bidirectional term <-> id map shared by queries and documents"""
    terms: List[str]
    ids: Dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.terms = list(self.terms)
        self.ids = {}
        for i, term in enumerate(self.terms):
            if term in self.ids:
                raise DataError(f"duplicate vocabulary term {term!r}")
            self.ids[term] = i

    @property
    def size(self) -> int:
        return len(self.terms)

    def __len__(self) -> int:
        return len(self.terms)

    def __contains__(self, term: str) -> bool:
        return term in self.ids

    def lookup(self, term: str) -> Optional[int]:
        return self.ids.get(term)

    def term(self, term_id: int) -> str:
        if not 0 <= term_id < len(self.terms):
            raise IndexError(f"term id {term_id} outside vocabulary of size {len(self.terms)}")
        return self.terms[term_id]

    def extend(self, terms: Iterable[str]) -> "Vocabulary":
        """New vocabulary with unseen terms appended in the given order"""
        extended = list(self.terms)
        seen = set(self.ids)
        for term in terms:
            if term not in seen:
                seen.add(term)
                extended.append(term)
        return Vocabulary(extended)


@dataclass(frozen=True)
class TermVector:
    """Sparse vector of (term id, weight) with strictly increasing ids"""
    indices: np.ndarray
    values: np.ndarray
    dim: int

    def __post_init__(self):
        indices = np.asarray(self.indices, dtype=np.int64)
        values = np.asarray(self.values, dtype=np.float64)
        if indices.shape != values.shape or indices.ndim != 1:
            raise ValueError("indices and values must be 1-D arrays of equal length")
        if len(indices):
            if np.any(np.diff(indices) <= 0):
                raise ValueError("term ids must be strictly increasing")
            if indices[0] < 0 or indices[-1] >= self.dim:
                raise ValueError(f"term ids must lie in [0, {self.dim})")
            if not np.all(np.isfinite(values)):
                raise ValueError("term weights must be finite")
        keep = values != 0.0
        if not np.all(keep):
            indices, values = indices[keep], values[keep]
        object.__setattr__(self, 'indices', indices)
        object.__setattr__(self, 'values', values)

    @classmethod
    def from_weights(cls, weights: Dict[int, float], dim: int) -> "TermVector":
        ids = sorted(weights)
        return cls(np.array(ids, dtype=np.int64),
                   np.array([weights[i] for i in ids], dtype=np.float64), dim)

    @classmethod
    def empty(cls, dim: int) -> "TermVector":
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0), dim)

    @property
    def nnz(self) -> int:
        return len(self.indices)

    def total(self) -> float:
        return float(self.values.sum())

    def dot(self, other: "TermVector") -> float:
        common, i, j = np.intersect1d(self.indices, other.indices,
                                      assume_unique=True, return_indices=True)
        if not len(common):
            return 0.0
        return float(np.dot(self.values[i], other.values[j]))

    def scaled(self, factor: float) -> "TermVector":
        return TermVector(self.indices, self.values * factor, self.dim)

    def toarray(self) -> np.ndarray:
        dense = np.zeros(self.dim)
        dense[self.indices] = self.values
        return dense


@dataclass
class CrossCovariance:
    """Sparse empirical cross-covariance C (d_x x d_y) over n weighted pairs"""
    matrix: sp.csr_matrix
    n: Optional[float] = None
    _transposed: Optional[sp.csr_matrix] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.matrix = sp.csr_matrix(self.matrix, dtype=np.float64)
        self.matrix.sort_indices()
        if not np.all(np.isfinite(self.matrix.data)):
            raise DataError("cross-covariance has non-finite entries")

    @classmethod
    def from_dense(cls, array, n: Optional[float] = None) -> "CrossCovariance":
        return cls(sp.csr_matrix(np.asarray(array, dtype=np.float64)), n)

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def cols(self) -> int:
        return self.matrix.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.matrix.shape

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    @property
    def transposed(self) -> sp.csr_matrix:
        """C^T in CSR form, row v holds column v of C"""
        if self._transposed is None:
            self._transposed = self.matrix.T.tocsr()
            self._transposed.sort_indices()
        return self._transposed

    def get(self, u: int, v: int) -> float:
        return float(self.matrix[u, v])

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()


# ---------------------------------------------------------------------------
# Click log and document files
# ---------------------------------------------------------------------------

def read_click_log(path: str) -> List[ClickRecord]:
    """Parse ``query<TAB>doc_id<TAB>doc_title<TAB>clicks`` lines

    Short lines are skipped and counted; anything else malformed is a
    DataError carrying the line number.
    """
    records = []
    skipped = 0
    for lineno, fields in iter_tsv(path):
        if len(fields) < 4:
            skipped += 1
            continue
        if len(fields) > 4:
            raise DataError(f"expected 4 tab-separated fields, got {len(fields)}",
                            path=path, line=lineno)
        query, doc_id, title, clicks_text = fields
        clicks = parse_int(clicks_text.strip(), path, lineno, "clicks")
        if clicks < 0:
            raise DataError(f"clicks must be non-negative, got {clicks}", path=path, line=lineno)
        if not doc_id.strip():
            raise DataError("empty doc_id", path=path, line=lineno)
        records.append(ClickRecord(query, doc_id.strip(), title, clicks))

    if skipped:
        logger.warning(f"Skipped {skipped} click-log lines with fewer than 4 fields in {path}")
    logger.info(f"Read {len(records)} click records from {path}")
    return records


def document_titles(records: Iterable[ClickRecord]) -> "OrderedDict[str, str]":
    """Distinct documents of a click stream, first title seen wins"""
    titles: "OrderedDict[str, str]" = OrderedDict()
    for record in records:
        if record.doc_id not in titles:
            titles[record.doc_id] = record.doc_title
    return titles


def read_documents(path: str) -> "OrderedDict[str, str]":
    """``doc_id<TAB>title`` collection file"""
    titles: "OrderedDict[str, str]" = OrderedDict()
    for lineno, fields in iter_tsv(path):
        if len(fields) != 2:
            raise DataError(f"expected doc_id<TAB>title, got {len(fields)} fields",
                            path=path, line=lineno)
        doc_id = fields[0].strip()
        if doc_id in titles:
            raise DataError(f"duplicate document {doc_id!r}", path=path, line=lineno)
        titles[doc_id] = fields[1]
    return titles


def write_documents(path: str, titles: Dict[str, str], header: Optional[str] = None) -> int:
    return write_tsv(path, titles.items(), header=header)


def query_frequencies(records: Iterable[ClickRecord]) -> Dict[str, int]:
    """Total clicks per query string"""
    freq: Counter = Counter()
    for record in records:
        freq[record.query] += record.clicks
    return dict(freq)


def write_query_frequencies(path: str, freq: Dict[str, int], header: Optional[str] = None) -> int:
    rows = sorted(freq.items(), key=lambda item: (-item[1], item[0]))
    return write_tsv(path, rows, header=header)


def read_query_frequencies(path: str) -> Dict[str, int]:
    freq = {}
    for lineno, fields in iter_tsv(path):
        if len(fields) != 2:
            raise DataError(f"expected query<TAB>count, got {len(fields)} fields",
                            path=path, line=lineno)
        freq[fields[0]] = parse_int(fields[1].strip(), path, lineno, "frequency")
    return freq


# ---------------------------------------------------------------------------
# Vocabulary, idf and vectorization
# ---------------------------------------------------------------------------

def build_vocabulary(records: Iterable[ClickRecord], min_count: int = 1) -> Vocabulary:
    """Terms occurring at least ``min_count`` times across queries and titles

    Ids follow first-occurrence order.
    """
    if min_count < 1:
        raise ValueError(f"min_count must be >= 1, got {min_count}")

    counts: Counter = Counter()
    order: List[str] = []
    n_records = 0
    for record in records:
        n_records += 1
        for token in tokenize(record.query) + tokenize(record.doc_title):
            if token not in counts:
                order.append(token)
            counts[token] += 1

    if n_records == 0:
        raise EmptyCorpusError("no click records to build a vocabulary from")

    vocab = Vocabulary([term for term in order if counts[term] >= min_count])
    logger.info(f"Built vocabulary of {vocab.size} terms from {n_records} records "
                f"(min_count={min_count}, {len(order) - vocab.size} rare terms dropped)")
    return vocab


def compute_idf(records: Iterable[ClickRecord], vocab: Vocabulary) -> np.ndarray:
    """Smoothed idf(t) = ln((N+1)/(df_t+1)) + 1 over distinct documents

    Returns an array indexed by term id; terms never seen in a title get
    the df = 0 value.
    """
    return idf_from_titles(document_titles(records), vocab)


def idf_from_titles(titles: Dict[str, str], vocab: Vocabulary) -> np.ndarray:
    df = np.zeros(vocab.size, dtype=np.int64)
    for title in titles.values():
        ids = {vocab.lookup(token) for token in tokenize(title)}
        ids.discard(None)
        for term_id in ids:
            df[term_id] += 1
    n_docs = len(titles)
    return np.log((n_docs + 1.0) / (df + 1.0)) + 1.0


def _term_counts(text: str, vocab: Vocabulary) -> Dict[int, float]:
    counts: Dict[int, float] = {}
    for token in tokenize(text):
        term_id = vocab.lookup(token)
        if term_id is not None:
            counts[term_id] = counts.get(term_id, 0.0) + 1.0
    return counts


def vectorize_query(text: str, vocab: Vocabulary) -> TermVector:
    """Raw term frequencies; out-of-vocabulary tokens dropped"""
    return TermVector.from_weights(_term_counts(text, vocab), vocab.size)


def vectorize_document(title: str, vocab: Vocabulary, idf: np.ndarray) -> TermVector:
    """tf * idf of the title; out-of-vocabulary tokens dropped"""
    counts = _term_counts(title, vocab)
    return TermVector.from_weights({i: tf * float(idf[i]) for i, tf in counts.items()}, vocab.size)


def term_frequencies(title: str, vocab: Vocabulary) -> TermVector:
    """Raw title term frequencies, the BM25 document representation"""
    return TermVector.from_weights(_term_counts(title, vocab), vocab.size)


def training_pairs(records: Iterable[ClickRecord], vocab: Vocabulary,
                   idf: np.ndarray) -> Iterator[Tuple[TermVector, TermVector, int]]:
    """(query vector, title vector, clicks) for records with at least one click"""
    for record in records:
        if record.clicks < 1:
            continue
        yield (vectorize_query(record.query, vocab),
               vectorize_document(record.doc_title, vocab, idf),
               record.clicks)


# ---------------------------------------------------------------------------
# Cross-covariance accumulation
# ---------------------------------------------------------------------------

PairLike = Union[Tuple[TermVector, TermVector], Tuple[TermVector, TermVector, float]]


def _accumulate_chunk(args) -> Tuple[sp.csr_matrix, float, int]:
    """Partial sum of weighted outer products over one chunk of pairs"""
    chunk, dims = args
    rows, cols, vals = [], [], []
    weight_total = 0.0
    for pair in chunk:
        x, y = pair[0], pair[1]
        weight = float(pair[2]) if len(pair) > 2 else 1.0
        if weight <= 0:
            continue
        weight_total += weight
        if not x.nnz or not y.nnz:
            continue
        rows.append(np.repeat(x.indices, y.nnz))
        cols.append(np.tile(y.indices, x.nnz))
        vals.append(np.outer(x.values * weight, y.values).ravel())

    if rows:
        partial = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=dims,
        ).tocsr()
    else:
        partial = sp.csr_matrix(dims, dtype=np.float64)
    partial.sum_duplicates()
    return partial, weight_total, len(chunk)


def build_cross_covariance(pairs: Iterable[PairLike], dims: Tuple[int, int],
                           workers: int = 1, chunk_size: int = 20000) -> CrossCovariance:
    """C = (1/n) sum_i w_i x_i y_i^T with n = sum_i w_i

    A pair may carry a click weight as third element (c clicks count as c
    copies). The stream is cut into fixed-size chunks, each reduced by a
    worker; partial sums are added in chunk order.
    """
    chunks = [(chunk, dims) for chunk in chunked(pairs, chunk_size)]
    if not chunks:
        raise EmptyCorpusError("no query-document pairs to accumulate")

    partials = ordered_map(_accumulate_chunk, chunks, workers=workers, backend="loky")

    total = sp.csr_matrix(dims, dtype=np.float64)
    n = 0.0
    n_pairs = 0
    for partial, weight, count in partials:
        total = total + partial
        n += weight
        n_pairs += count

    if n <= 0:
        raise EmptyCorpusError("all query-document pairs have zero weight")

    matrix = (total / n).tocsr()
    matrix.eliminate_zeros()
    logger.info(f"Accumulated cross-covariance {dims[0]}x{dims[1]} from {n_pairs} pairs "
                f"(n={n:g}, nnz={matrix.nnz}, chunks={len(chunks)})")
    return CrossCovariance(matrix, n)


def save_cross_covariance(path: str, cov: CrossCovariance):
    """Write the ``LMC1`` cache: header then (u32, u32, f64) triples"""
    coo = cov.matrix.tocoo()
    triples = np.empty(coo.nnz, dtype=_COV_TRIPLE)
    triples['u'] = coo.row
    triples['v'] = coo.col
    triples['value'] = coo.data
    with open(path, 'wb') as f:
        f.write(COV_MAGIC)
        f.write(struct.pack('<QQQ', cov.rows, cov.cols, coo.nnz))
        f.write(triples.tobytes())


def load_cross_covariance(path: str, n: Optional[float] = None) -> CrossCovariance:
    if not os.path.exists(path):
        raise DataError("file not found", path=path)
    with open(path, 'rb') as f:
        magic = f.read(4)
        if magic != COV_MAGIC:
            raise DataError(f"not a cross-covariance cache (magic {magic!r})", path=path)
        header = f.read(24)
        if len(header) != 24:
            raise DataError("truncated header", path=path)
        rows, cols, nnz = struct.unpack('<QQQ', header)
        payload = f.read()
    if len(payload) != nnz * _COV_TRIPLE.itemsize:
        raise DataError(f"expected {nnz} entries, file holds {len(payload) // _COV_TRIPLE.itemsize}",
                        path=path)
    triples = np.frombuffer(payload, dtype=_COV_TRIPLE)
    if nnz and (triples['u'].max() >= rows or triples['v'].max() >= cols):
        raise DataError("entry index outside declared dimensions", path=path)
    matrix = sp.coo_matrix(
        (triples['value'].astype(np.float64), (triples['u'].astype(np.int64), triples['v'].astype(np.int64))),
        shape=(rows, cols),
    ).tocsr()
    return CrossCovariance(matrix, n)


# ---------------------------------------------------------------------------
# Vocabulary and idf files
# ---------------------------------------------------------------------------

def save_vocabulary(path: str, vocab: Vocabulary):
    """One term per line; the 0-based line number is the id"""
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for term in vocab.terms:
            f.write(term)
            f.write('\n')


def load_vocabulary(path: str) -> Vocabulary:
    if not os.path.exists(path):
        raise DataError("file not found", path=path)
    with open(path, 'r', encoding='utf-8') as f:
        terms = [line.rstrip('\r\n') for line in f]
    for lineno, term in enumerate(terms, start=1):
        if not term:
            raise DataError("empty vocabulary term", path=path, line=lineno)
    try:
        return Vocabulary(terms)
    except DataError as e:
        raise DataError(str(e), path=path) from e


def save_idf(path: str, vocab: Vocabulary, idf: np.ndarray, header: Optional[str] = None):
    write_tsv(path, ((term, repr(float(idf[i]))) for i, term in enumerate(vocab.terms)), header=header)


def load_idf(path: str, vocab: Vocabulary) -> np.ndarray:
    idf = np.full(vocab.size, np.nan)
    for lineno, fields in iter_tsv(path):
        if len(fields) != 2:
            raise DataError(f"expected term<TAB>idf, got {len(fields)} fields", path=path, line=lineno)
        term_id = vocab.lookup(fields[0])
        if term_id is None:
            raise DataError(f"term {fields[0]!r} not in vocabulary", path=path, line=lineno)
        value = parse_float(fields[1], path, lineno, "idf")
        if not value > 0:
            raise DataError(f"idf must be positive, got {value}", path=path, line=lineno)
        idf[term_id] = value
    missing = np.isnan(idf)
    if np.any(missing):
        raise DataError(f"{int(missing.sum())} vocabulary terms have no idf value", path=path)
    return idf


# ---------------------------------------------------------------------------
# Corpus bundle: everything training and ranking need from one click log
# ---------------------------------------------------------------------------

@dataclass
class CorpusBundle:
    vocab: Vocabulary
    idf: np.ndarray
    cov: CrossCovariance
    titles: "OrderedDict[str, str]"
    query_freq: Dict[str, int]
    meta: Dict = field(default_factory=dict)
    directory: Optional[str] = None

    @property
    def vocab_path(self) -> Optional[str]:
        if self.directory is None:
            return None
        return os.path.join(self.directory, VOCAB_FILE)


def build_corpus_bundle(records: Sequence[ClickRecord], min_count: int = 1,
                        tags: Optional[Dict[str, List[str]]] = None,
                        workers: int = 1, chunk_size: int = 20000) -> CorpusBundle:
    """Vocabulary, idf, cross-covariance, document titles and query counts

    Tags (doc id -> tag names) are injected into the vocabulary as
    ``tag:<name>`` terms so tag knowledge lives in the shared term space.
    """
    if not records:
        raise EmptyCorpusError("click log holds no records")

    vocab = build_vocabulary(records, min_count)
    if tags:
        tag_terms = sorted({TAG_PREFIX + tag for doc_tags in tags.values() for tag in doc_tags})
        before = vocab.size
        vocab = vocab.extend(tag_terms)
        logger.info(f"Injected {vocab.size - before} tag terms into the vocabulary")

    titles = document_titles(records)
    idf = idf_from_titles(titles, vocab)
    cov = build_cross_covariance(training_pairs(records, vocab, idf), (vocab.size, vocab.size),
                                 workers=workers, chunk_size=chunk_size)
    meta = {
        "n": cov.n,
        "records": len(records),
        "documents": len(titles),
        "vocabulary_size": vocab.size,
        "min_count": min_count,
        "created_at": datetime.now().isoformat(timespec='seconds'),
    }
    return CorpusBundle(vocab, idf, cov, titles, query_frequencies(records), meta)


def save_bundle(bundle: CorpusBundle, directory: str, header: Optional[str] = None) -> Dict[str, str]:
    """Write the bundle files, returns name -> path of everything written"""
    if not os.path.exists(directory):
        os.makedirs(directory)
    paths = {
        "vocabulary": os.path.join(directory, VOCAB_FILE),
        "idf": os.path.join(directory, IDF_FILE),
        "cross_covariance": os.path.join(directory, COV_FILE),
        "documents": os.path.join(directory, DOCUMENTS_FILE),
        "query_frequencies": os.path.join(directory, QUERY_FREQ_FILE),
        "meta": os.path.join(directory, META_FILE),
    }
    save_vocabulary(paths["vocabulary"], bundle.vocab)
    save_idf(paths["idf"], bundle.vocab, bundle.idf, header=header)
    save_cross_covariance(paths["cross_covariance"], bundle.cov)
    write_documents(paths["documents"], bundle.titles, header=header)
    write_query_frequencies(paths["query_frequencies"], bundle.query_freq, header=header)
    with open(paths["meta"], 'w', encoding='utf-8') as f:
        json.dump(bundle.meta, f, indent=2, sort_keys=True)
    bundle.directory = directory
    logger.info(f"Saved corpus bundle to {directory}")
    return paths


def load_bundle(directory: str) -> CorpusBundle:
    if not os.path.isdir(directory):
        raise DataError("corpus directory not found", path=directory)
    vocab = load_vocabulary(os.path.join(directory, VOCAB_FILE))
    idf = load_idf(os.path.join(directory, IDF_FILE), vocab)
    meta = {}
    meta_path = os.path.join(directory, META_FILE)
    if os.path.exists(meta_path):
        with open(meta_path, 'r', encoding='utf-8') as f:
            meta = json.load(f)
    cov = load_cross_covariance(os.path.join(directory, COV_FILE), meta.get("n"))
    if cov.shape != (vocab.size, vocab.size):
        raise DataError(f"cross-covariance is {cov.rows}x{cov.cols} but the vocabulary has "
                        f"{vocab.size} terms", path=directory)
    titles = read_documents(os.path.join(directory, DOCUMENTS_FILE))
    query_freq = read_query_frequencies(os.path.join(directory, QUERY_FREQ_FILE))
    return CorpusBundle(vocab, idf, cov, titles, query_freq, meta, directory)
