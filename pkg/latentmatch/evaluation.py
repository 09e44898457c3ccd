"""
Ranking evaluation: graded NDCG with head/tail query splits

Labels are 0 (Bad), 1 (Fair), 2 (Good) and 3 (Excellent). A ranked
document without a judgment counts as Bad.
"""

import csv
import logging
import math
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats

from .exceptions import DataError
from .parallel import ordered_map
from .scorer import RankedList
from .tsv import iter_tsv, parse_int

logger = logging.getLogger(__name__)

MAX_LABEL = 3
DEFAULT_CUTOFFS = (1, 3, 5, 10)

SPLIT_ALL = "all"
SPLIT_HEAD = "head"
SPLIT_TAIL = "tail"

Judgments = Dict[str, Dict[str, int]]


@dataclass(frozen=True)
class Judgment:
    query: str
    doc_id: str
    label: int

    def __post_init__(self):
        if not 0 <= self.label <= MAX_LABEL:
            raise ValueError(f"label must be in 0..{MAX_LABEL}, got {self.label}")


@dataclass
class EvalReport:
    cutoffs: List[int]
    ndcg: Dict[str, Dict[int, float]] = field(default_factory=OrderedDict)
    counts: Dict[str, int] = field(default_factory=OrderedDict)
    per_query: Dict[str, Dict[int, float]] = field(default_factory=OrderedDict)
    splits: Dict[str, List[str]] = field(default_factory=OrderedDict)
    excluded: int = 0

    def value(self, split: str, cutoff: int) -> float:
        return self.ndcg[split][cutoff]

    def query_vector(self, cutoff: int, queries: Optional[Sequence[str]] = None) -> np.ndarray:
        """Per-query NDCG@cutoff in ``queries`` order (all evaluated queries by default)"""
        queries = list(self.per_query) if queries is None else queries
        return np.array([self.per_query[q][cutoff] for q in queries])


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _dcg(labels: Sequence[int], k: int) -> float:
    return sum((2.0 ** label - 1.0) / math.log2(i + 2) for i, label in enumerate(labels[:k]))


def ndcg_at_k(labels: Sequence[int], k: int, ideal_labels: Optional[Iterable[int]] = None) -> float:
    """NDCG@k of labels in ranked order

    The ideal ordering comes from ``ideal_labels`` (all judged labels of the
    query) when given, otherwise from ``labels`` themselves. Zero ideal gain
    gives 0.
    """
    if k < 1:
        raise ValueError(f"cutoff must be >= 1, got {k}")
    labels = list(labels)
    for label in labels:
        if not 0 <= label <= MAX_LABEL:
            raise ValueError(f"label must be in 0..{MAX_LABEL}, got {label}")
    if not labels:
        logger.warning("NDCG of an empty ranking is 0")
        return 0.0

    ideal = sorted(labels if ideal_labels is None else ideal_labels, reverse=True)
    idcg = _dcg(ideal, k)
    if idcg == 0:
        return 0.0
    return min(1.0, _dcg(labels, k) / idcg)


def split_head_tail(queries: Iterable[str], frequency: Dict[str, int]) -> Tuple[List[str], List[str]]:
    """Most frequent half is head (the extra query of an odd count goes there)

    Ties break lexicographically; queries missing from ``frequency`` count 0.
    """
    ordered = sorted(set(queries), key=lambda q: (-frequency.get(q, 0), q))
    cut = (len(ordered) + 1) // 2
    return ordered[:cut], ordered[cut:]


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> Tuple[float, float]:
    """Two-sided paired t-test; returns (t statistic, p-value)"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"paired samples differ in length: {len(a)} vs {len(b)}")
    if len(a) < 2:
        raise ValueError("paired t-test needs at least two queries")
    if np.all(a - b == 0):
        return 0.0, 1.0
    result = stats.ttest_rel(a, b)
    return float(result.statistic), float(result.pvalue)


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------

def _as_doc_lists(rankings) -> "OrderedDict[str, List[str]]":
    if isinstance(rankings, dict):
        return OrderedDict(rankings)
    return OrderedDict((ranked.query, ranked.doc_ids) for ranked in rankings)


def evaluate_run(rankings: Union[Sequence[RankedList], Dict[str, List[str]]], judgments: Judgments,
                 cutoffs: Sequence[int] = DEFAULT_CUTOFFS,
                 frequencies: Optional[Dict[str, int]] = None, workers: int = 1,
                 ideal_from_judgments: bool = False) -> EvalReport:
    """Macro-averaged NDCG per cutoff over all queries, plus head/tail when frequencies are given

    Per-query values are ``ndcg_at_k`` of the ranked labels. With
    ``ideal_from_judgments`` the ideal ordering is built from every judged
    label of the query instead, so judged documents missing from the
    ranking lower the score.
    """
    cutoffs = sorted(set(int(c) for c in cutoffs))
    if not cutoffs or cutoffs[0] < 1:
        raise ValueError(f"cutoffs must be positive, got {cutoffs}")

    doc_lists = _as_doc_lists(rankings)
    evaluated = [q for q in doc_lists if judgments.get(q)]
    excluded = len(doc_lists) - len(evaluated)
    if excluded:
        logger.warning(f"Excluded {excluded} ranked queries with no judgments")

    def evaluate_query(query: str) -> Dict[int, float]:
        labels_by_doc = judgments[query]
        labels = [labels_by_doc.get(doc_id, 0) for doc_id in doc_lists[query]]
        ideal = list(labels_by_doc.values()) if ideal_from_judgments else None
        return {k: ndcg_at_k(labels, k, ideal) for k in cutoffs}

    values = ordered_map(evaluate_query, evaluated, workers=workers)
    report = EvalReport(cutoffs=list(cutoffs), excluded=excluded)
    report.per_query = OrderedDict(zip(evaluated, values))

    report.splits[SPLIT_ALL] = list(evaluated)
    if frequencies is not None:
        head, tail = split_head_tail(evaluated, frequencies)
        report.splits[SPLIT_HEAD] = head
        report.splits[SPLIT_TAIL] = tail

    for split, queries in report.splits.items():
        report.counts[split] = len(queries)
        report.ndcg[split] = OrderedDict(
            (k, float(np.mean([report.per_query[q][k] for q in queries])) if queries else 0.0)
            for k in cutoffs
        )
    logger.info(f"Evaluated {len(evaluated)} queries at cutoffs {cutoffs}")
    return report


def compare_runs(report: EvalReport, baseline: EvalReport) -> Dict[int, Tuple[float, float]]:
    """Paired t-test per cutoff over the queries both runs evaluated"""
    common = [q for q in report.per_query if q in baseline.per_query]
    return OrderedDict(
        (k, paired_t_test(report.query_vector(k, common), baseline.query_vector(k, common)))
        for k in report.cutoffs if k in baseline.cutoffs
    )


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def group_judgments(items: Iterable[Judgment]) -> Judgments:
    """query -> doc_id -> label; a repeated (query, doc_id) is a DataError"""
    judgments: Judgments = OrderedDict()
    for item in items:
        labels = judgments.setdefault(item.query, OrderedDict())
        if item.doc_id in labels:
            raise DataError(f"duplicate judgment for ({item.query!r}, {item.doc_id!r})")
        labels[item.doc_id] = item.label
    return judgments


def read_judgments(path: str) -> Judgments:
    """``query<TAB>doc_id<TAB>label``; duplicates and labels outside 0..3 rejected"""
    judgments: Judgments = OrderedDict()
    for lineno, fields in iter_tsv(path):
        if len(fields) != 3:
            raise DataError(f"expected query<TAB>doc_id<TAB>label, got {len(fields)} fields",
                            path=path, line=lineno)
        query, doc_id = fields[0], fields[1].strip()
        label = parse_int(fields[2].strip(), path, lineno, "label")
        if not 0 <= label <= MAX_LABEL:
            raise DataError(f"label must be in 0..{MAX_LABEL}, got {label}", path=path, line=lineno)
        labels = judgments.setdefault(query, OrderedDict())
        if doc_id in labels:
            raise DataError(f"duplicate judgment for ({query!r}, {doc_id!r})", path=path, line=lineno)
        labels[doc_id] = label
    logger.info(f"Read judgments for {len(judgments)} queries from {path}")
    return judgments


def format_report(report: EvalReport, comparison: Optional[Dict[int, Tuple[float, float]]] = None) -> str:
    """Aligned text table, one row per split"""
    columns = [f"NDCG@{k}" for k in report.cutoffs]
    lines = [f"{'split':<6} {'queries':>7} " + ' '.join(f"{c:>8}" for c in columns)]
    for split, values in report.ndcg.items():
        cells = ' '.join(f"{values[k]:>8.4f}" for k in report.cutoffs)
        lines.append(f"{split:<6} {report.counts[split]:>7d} {cells}")
    if comparison:
        lines.append("")
        lines.append("paired t-test against baseline")
        for k, (t, p) in comparison.items():
            lines.append(f"  NDCG@{k:<3d} t={t:>8.4f}  p={p:.4g}")
    if report.excluded:
        lines.append(f"({report.excluded} queries without judgments excluded)")
    return '\n'.join(lines)


def write_report_csv(path: str, report: EvalReport, header: Optional[str] = None):
    """``split,cutoff,ndcg,n_queries`` rows"""
    directory = os.path.dirname(path)
    if directory and not os.path.exists(directory):
        os.makedirs(directory)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        if header:
            f.write(f"# {header}\n")
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(["split", "cutoff", "ndcg", "n_queries"])
        for split, values in report.ndcg.items():
            for k in report.cutoffs:
                writer.writerow([split, k, f"{values[k]:.6f}", report.counts[split]])
