"""
Semantic knowledge mining for latentmatch

Synonym pairs come from the click bipartite graph: queries clicked to the
same document are compared term by term, and two terms that appear in the
same context (the query with that term replaced by ``*``) become a
candidate pair. Tag-term pairs come from averaging the tf-idf title vectors
of all documents carrying a tag. Both kinds of pairs are folded into a
symmetric knowledge matrix R used as a regularizer during training.
"""

import logging
from collections import Counter, OrderedDict, defaultdict
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .corpus import TAG_PREFIX, ClickRecord, TermVector, Vocabulary, tokenize
from .exceptions import DataError, EmptyKnowledgeError
from .parallel import chunked, ordered_map
from .tsv import iter_tsv, parse_float, parse_int, write_tsv

logger = logging.getLogger(__name__)

WILDCARD = "*"

KnowledgeTriple = Tuple[str, str, float]


@dataclass(frozen=True)
class SynonymPair:
    """Two terms sharing contexts, stored in lexicographic order"""
    term1: str
    term2: str
    support: int
    weight: float

    def __post_init__(self):
        if self.term1 == self.term2:
            raise ValueError(f"synonym pair needs two distinct terms, got {self.term1!r} twice")
        if self.term1 > self.term2:
            raise ValueError(f"synonym pair ({self.term1!r}, {self.term2!r}) not in canonical order")
        if self.support < 1:
            raise ValueError(f"support must be positive, got {self.support}")


@dataclass(frozen=True)
class TagTermPair:
    """A tag and one of its top terms, weighted by the average tf-idf value"""
    tag: str
    term: str
    weight: float


@dataclass
class KnowledgeMatrix:
    """Symmetric R = (1/m) sum_i s_i (w1 w2^T + w2 w1^T) / 2"""
    matrix: sp.csr_matrix
    pair_count: int

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    def get(self, u: int, v: int) -> float:
        return float(self.matrix[u, v])

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()


@dataclass
class ClickGraph:
    """Click bipartite graph: document id -> distinct queries clicked to it"""
    queries_by_doc: "OrderedDict[str, List[str]]"

    @classmethod
    def from_records(cls, records: Iterable[ClickRecord]) -> "ClickGraph":
        edges: Dict[str, set] = defaultdict(set)
        for record in records:
            if record.clicks >= 1:
                edges[record.doc_id].add(record.query)
        return cls(OrderedDict((doc, sorted(edges[doc])) for doc in sorted(edges)))

    @property
    def documents(self) -> List[str]:
        return list(self.queries_by_doc)

    def __len__(self) -> int:
        return len(self.queries_by_doc)


# ---------------------------------------------------------------------------
# Synonym mining
# ---------------------------------------------------------------------------

def extract_context(tokens: Sequence[str], position: int) -> str:
    """The query with the token at ``position`` replaced by the wildcard"""
    if not 0 <= position < len(tokens):
        raise ValueError(f"position {position} outside query of {len(tokens)} tokens")
    return ' '.join(WILDCARD if i == position else token for i, token in enumerate(tokens))


def logistic_weight(support: float, scale: float = 1.0) -> float:
    """1 / (1 + exp(-support / scale)), strictly increasing in support"""
    if scale <= 0:
        raise ValueError(f"logistic scale must be positive, got {scale}")
    return float(expit(support / scale))


def document_candidates(queries: Iterable[str]) -> Counter:
    """Candidate pairs of one document, one count per distinct shared context"""
    terms_by_context: Dict[str, set] = defaultdict(set)
    for query in queries:
        tokens = tokenize(query)
        for position, token in enumerate(tokens):
            terms_by_context[extract_context(tokens, position)].add(token)

    candidates: Counter = Counter()
    for context in sorted(terms_by_context):
        terms = sorted(terms_by_context[context])
        for i, first in enumerate(terms):
            for second in terms[i + 1:]:
                candidates[(first, second)] += 1
    return candidates


def _candidates_for_documents(query_lists: List[List[str]]) -> List[Counter]:
    return [document_candidates(queries) for queries in query_lists]


def count_support(graph: ClickGraph, workers: int = 1, docs_per_task: int = 2000) -> Counter:
    """Support of every candidate pair over all documents

    Documents are processed in parallel batches and the per-document
    counts merged in document order.
    """
    batches = list(chunked(graph.queries_by_doc.values(), docs_per_task))
    per_batch = ordered_map(_candidates_for_documents, batches, workers=workers, backend="loky")
    support: Counter = Counter()
    for batch in per_batch:
        for doc_counts in batch:
            support.update(doc_counts)
    return support


def mine_synonyms(graph: ClickGraph, k: int, scale: float = 1.0, min_support: int = 1,
                  workers: int = 1) -> List[SynonymPair]:
    """Top ``k`` synonym pairs by support, ties broken lexicographically"""
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    if not len(graph):
        logger.info("Click graph is empty, no synonyms mined")
        return []

    support = count_support(graph, workers=workers)
    ranked = sorted(
        ((pair, count) for pair, count in support.items() if count >= min_support),
        key=lambda item: (-item[1], item[0][0], item[0][1]),
    )
    pairs = [SynonymPair(first, second, count, logistic_weight(count, scale))
             for (first, second), count in ranked[:k]]
    logger.info(f"Mined {len(pairs)} synonym pairs from {len(support)} candidates "
                f"over {len(graph)} documents")
    return pairs


# ---------------------------------------------------------------------------
# Tag-term mining
# ---------------------------------------------------------------------------

def mine_tag_terms(doc_vectors: Dict[str, TermVector], doc_tags: Dict[str, List[str]],
                   vocab: Vocabulary, k: int) -> List[TagTermPair]:
    """Top ``k`` terms of every tag's average tf-idf title vector

    Ties are broken by the lower term id. Tags none of whose documents are
    in ``doc_vectors`` are skipped.
    """
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")

    docs_by_tag: Dict[str, List[str]] = defaultdict(list)
    for doc_id in sorted(doc_tags):
        for tag in doc_tags[doc_id]:
            docs_by_tag[tag].append(doc_id)

    pairs: List[TagTermPair] = []
    skipped = 0
    for tag in sorted(docs_by_tag):
        docs = [doc_id for doc_id in docs_by_tag[tag] if doc_id in doc_vectors]
        if not docs:
            skipped += 1
            continue
        total = np.zeros(vocab.size)
        for doc_id in docs:
            vector = doc_vectors[doc_id]
            np.add.at(total, vector.indices, vector.values)
        average = total / len(docs)

        candidates = np.flatnonzero(average)
        order = np.lexsort((candidates, -average[candidates]))
        for term_id in candidates[order][:k]:
            pairs.append(TagTermPair(tag, vocab.term(int(term_id)), float(average[term_id])))

    if skipped:
        logger.warning(f"Skipped {skipped} tags with no documents in the collection")
    logger.info(f"Mined {len(pairs)} tag-term pairs from {len(docs_by_tag) - skipped} tags")
    return pairs


def tag_term(tag: str) -> str:
    """Vocabulary term standing for a tag"""
    return TAG_PREFIX + tag


# ---------------------------------------------------------------------------
# Knowledge matrices
# ---------------------------------------------------------------------------

def knowledge_triples(synonyms: Optional[Iterable[SynonymPair]] = None,
                      tag_terms: Optional[Iterable[TagTermPair]] = None) -> List[KnowledgeTriple]:
    triples: List[KnowledgeTriple] = []
    for pair in synonyms or ():
        triples.append((pair.term1, pair.term2, pair.weight))
    for pair in tag_terms or ():
        triples.append((tag_term(pair.tag), pair.term, pair.weight))
    return triples


def build_knowledge_matrix(pairs: Iterable[KnowledgeTriple], vocab: Vocabulary) -> KnowledgeMatrix:
    """Symmetrized average weighted outer product of the resolvable pairs"""
    upper: Dict[Tuple[int, int], float] = {}
    retained = 0
    dropped = 0
    for first, second, weight in pairs:
        u, v = vocab.lookup(first), vocab.lookup(second)
        if u is None or v is None:
            dropped += 1
            continue
        retained += 1
        if u == v:
            upper[(u, u)] = upper.get((u, u), 0.0) + weight
        else:
            key = (min(u, v), max(u, v))
            upper[key] = upper.get(key, 0.0) + weight / 2.0

    if dropped:
        logger.warning(f"Dropped {dropped} knowledge pairs with terms outside the vocabulary")
    if not retained:
        raise EmptyKnowledgeError("no knowledge pair could be resolved against the vocabulary")

    rows, cols, vals = [], [], []
    for (u, v), value in upper.items():
        value = value / retained
        rows.append(u)
        cols.append(v)
        vals.append(value)
        if u != v:
            rows.append(v)
            cols.append(u)
            vals.append(value)

    matrix = sp.csr_matrix((vals, (rows, cols)), shape=(vocab.size, vocab.size), dtype=np.float64)
    matrix.sort_indices()
    logger.info(f"Built knowledge matrix from {retained} pairs (nnz={matrix.nnz})")
    return KnowledgeMatrix(matrix, retained)


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def write_synonyms(path: str, pairs: Sequence[SynonymPair], header: Optional[str] = None) -> int:
    """``term1<TAB>term2<TAB>support<TAB>weight`` sorted by support"""
    ordered = sorted(pairs, key=lambda p: (-p.support, p.term1, p.term2))
    return write_tsv(path, ((p.term1, p.term2, p.support, repr(p.weight)) for p in ordered),
                     header=header)


def read_synonyms(path: str) -> List[SynonymPair]:
    pairs = []
    for lineno, fields in iter_tsv(path):
        if len(fields) != 4:
            raise DataError(f"expected 4 fields, got {len(fields)}", path=path, line=lineno)
        first, second = fields[0].strip(), fields[1].strip()
        if first == second:
            raise DataError(f"synonym pair repeats {first!r}", path=path, line=lineno)
        support = parse_int(fields[2].strip(), path, lineno, "support")
        if support < 1:
            raise DataError(f"support must be positive, got {support}", path=path, line=lineno)
        weight = parse_float(fields[3], path, lineno, "weight")
        if first > second:
            first, second = second, first
        pairs.append(SynonymPair(first, second, support, weight))
    return pairs


def read_tags(path: str) -> Dict[str, List[str]]:
    """``doc_id<TAB>tag1,tag2,...``; tags are lowercased and stripped"""
    tags: Dict[str, List[str]] = OrderedDict()
    for lineno, fields in iter_tsv(path):
        if len(fields) != 2:
            raise DataError(f"expected doc_id<TAB>tags, got {len(fields)} fields",
                            path=path, line=lineno)
        names = [tag.strip().lower() for tag in fields[1].split(',')]
        names = [name for name in names if name]
        if not names:
            raise DataError("document has an empty tag list", path=path, line=lineno)
        doc_tags = tags.setdefault(fields[0].strip(), [])
        doc_tags.extend(name for name in names if name not in doc_tags)
    return tags


def write_tag_terms(path: str, pairs: Sequence[TagTermPair], header: Optional[str] = None) -> int:
    return write_tsv(path, ((p.tag, p.term, repr(p.weight)) for p in pairs), header=header)


def read_tag_terms(path: str) -> List[TagTermPair]:
    pairs = []
    for lineno, fields in iter_tsv(path):
        if len(fields) != 3:
            raise DataError(f"expected tag<TAB>term<TAB>weight, got {len(fields)} fields",
                            path=path, line=lineno)
        weight = parse_float(fields[2], path, lineno, "weight")
        if weight < 0:
            raise DataError(f"weight must be non-negative, got {weight}", path=path, line=lineno)
        pairs.append(TagTermPair(fields[0].strip(), fields[1].strip(), weight))
    return pairs
