"""
Tests for NDCG evaluation, query splits and significance testing
"""

import itertools
import math

import numpy as np
import pytest
from scipy import stats

from latentmatch.evaluation import (SPLIT_ALL, SPLIT_HEAD, SPLIT_TAIL, Judgment, compare_runs,
                                    evaluate_run, format_report, group_judgments, ndcg_at_k,
                                    paired_t_test, read_judgments, split_head_tail,
                                    write_report_csv)
from latentmatch.exceptions import DataError
from latentmatch.scorer import RankedList


def test_ndcg_examples():
    assert ndcg_at_k([0, 3], 2) == pytest.approx(0.6309, abs=1e-4)
    assert ndcg_at_k([3, 2, 1, 0], 4) == pytest.approx(1.0)
    assert ndcg_at_k([0, 0, 0], 3) == 0.0
    assert ndcg_at_k([], 5) == 0.0


def test_ndcg_rejects_bad_input():
    with pytest.raises(ValueError):
        ndcg_at_k([1, 2], 0)
    with pytest.raises(ValueError):
        ndcg_at_k([4], 1)
    with pytest.raises(ValueError):
        Judgment("q", "d", -1)


def test_ndcg_uses_all_judged_labels_for_the_ideal():
    assert ndcg_at_k([0], 1, ideal_labels=[3, 0]) == 0.0
    assert ndcg_at_k([2], 1, ideal_labels=[3, 2]) == pytest.approx(3 / 7)
    # a short ranking cannot reach the ideal of a longer judged list
    assert ndcg_at_k([3], 3, ideal_labels=[3, 3]) < 1.0


def test_ndcg_ideal_order_is_the_only_perfect_permutation():
    for k in (1, 2, 3, 4):
        for perm in itertools.permutations([3, 2, 1, 0]):
            value = ndcg_at_k(list(perm), k)
            assert 0.0 <= value <= 1.0
            if k == 4:
                assert (value == pytest.approx(1.0)) == (list(perm) == [3, 2, 1, 0])


def test_ndcg_promoting_a_better_document_helps():
    assert ndcg_at_k([1, 3, 0], 3) < ndcg_at_k([3, 1, 0], 3)
    assert ndcg_at_k([0, 1], 2) < ndcg_at_k([1, 0], 2)


def test_ndcg_hand_computed():
    labels = [2, 0, 3]
    dcg = 3 / math.log2(2) + 0 + 7 / math.log2(4)
    idcg = 7 / math.log2(2) + 3 / math.log2(3) + 0
    assert ndcg_at_k(labels, 3) == pytest.approx(dcg / idcg)


def test_split_head_tail():
    freq = {"a": 5, "b": 3, "c": 1}
    assert split_head_tail(["c", "a", "b"], freq) == (["a", "b"], ["c"])
    assert split_head_tail(["a", "b", "c", "d"], freq) == (["a", "b"], ["c", "d"])
    assert split_head_tail(["y", "x"], {}) == (["x"], ["y"])
    assert split_head_tail([], freq) == ([], [])


def _judgments():
    return {
        "q1": {"d1": 3, "d2": 0, "d3": 1},
        "q2": {"d4": 2},
        "q3": {"d5": 0},
    }


def test_evaluate_run():
    rankings = [
        RankedList("q1", [("d1", 2.0), ("d3", 1.0)]),
        RankedList("q2", [("unjudged", 3.0), ("d4", 1.0)]),
        RankedList("q3", [("d5", 1.0)]),
        RankedList("q9", [("d1", 1.0)]),
    ]
    report = evaluate_run(rankings, _judgments(), cutoffs=[1, 3])
    assert report.excluded == 1
    assert report.counts[SPLIT_ALL] == 3
    assert SPLIT_HEAD not in report.ndcg

    assert report.per_query["q1"][1] == pytest.approx(1.0)
    assert report.per_query["q2"][1] == 0.0
    assert report.per_query["q2"][3] == pytest.approx((3 / math.log2(3)) / 3)
    assert report.per_query["q3"][3] == 0.0
    expected = np.mean([report.per_query[q][3] for q in ("q1", "q2", "q3")])
    assert report.value(SPLIT_ALL, 3) == pytest.approx(expected)


def test_evaluate_run_scores_the_ranked_labels():
    judgments = {"q": {"d1": 3, "d2": 2}}
    report = evaluate_run({"q": ["d2"]}, judgments, cutoffs=[1])
    assert report.value(SPLIT_ALL, 1) == pytest.approx(ndcg_at_k([2], 1))
    assert report.value(SPLIT_ALL, 1) == pytest.approx(1.0)

    strict = evaluate_run({"q": ["d2"]}, judgments, cutoffs=[1], ideal_from_judgments=True)
    assert strict.value(SPLIT_ALL, 1) == pytest.approx(3 / 7)
    assert strict.value(SPLIT_ALL, 1) == pytest.approx(ndcg_at_k([2], 1, ideal_labels=[3, 2]))


def test_evaluate_run_with_frequencies():
    rankings = {"q1": ["d1"], "q2": ["d4"], "q3": ["d5"]}
    report = evaluate_run(rankings, _judgments(), cutoffs=[1], frequencies={"q3": 10, "q1": 4})
    assert report.splits[SPLIT_HEAD] == ["q3", "q1"]
    assert report.splits[SPLIT_TAIL] == ["q2"]
    assert report.value(SPLIT_HEAD, 1) == pytest.approx(0.5)
    assert report.value(SPLIT_TAIL, 1) == pytest.approx(1.0)


def test_evaluate_run_is_independent_of_workers():
    rankings = {f"q{i}": ["d1", "d2", "d3"] for i in range(12)}
    judgments = {f"q{i}": {"d1": i % 4, "d3": (i + 1) % 4} for i in range(12)}
    single = evaluate_run(rankings, judgments, workers=1)
    pooled = evaluate_run(rankings, judgments, workers=4)
    assert single.ndcg == pooled.ndcg


def test_evaluate_run_rejects_bad_cutoffs():
    with pytest.raises(ValueError):
        evaluate_run({}, {}, cutoffs=[0, 3])


def test_paired_t_test_matches_scipy():
    a = [0.5, 0.7, 0.9, 0.4, 0.8]
    b = [0.4, 0.6, 0.95, 0.2, 0.7]
    t, p = paired_t_test(a, b)
    expected = stats.ttest_rel(a, b)
    assert t == pytest.approx(expected.statistic)
    assert p == pytest.approx(expected.pvalue)
    assert 0.0 < p < 1.0


def test_paired_t_test_edge_cases():
    assert paired_t_test([0.5, 0.5], [0.5, 0.5]) == (0.0, 1.0)
    with pytest.raises(ValueError):
        paired_t_test([0.5], [0.4])
    with pytest.raises(ValueError):
        paired_t_test([0.5, 0.1], [0.4])


def test_compare_runs_uses_common_queries():
    judgments = {f"q{i}": {"good": 3, "bad": 0} for i in range(6)}
    better = {f"q{i}": ["good", "bad"] for i in range(6)}
    worse = {f"q{i}": ["bad", "good"] if i % 2 else ["good", "bad"] for i in range(5)}
    comparison = compare_runs(evaluate_run(better, judgments, [1]), evaluate_run(worse, judgments, [1]))
    t, p = comparison[1]
    assert t > 0
    assert p < 1.0


def test_group_judgments():
    grouped = group_judgments([Judgment("q", "d1", 2), Judgment("q", "d2", 0)])
    assert grouped == {"q": {"d1": 2, "d2": 0}}
    with pytest.raises(DataError):
        group_judgments([Judgment("q", "d1", 2), Judgment("q", "d1", 1)])


def test_read_judgments(tmp_path):
    path = tmp_path / "qrels.tsv"
    path.write_text("# config_hash=x\nq1\td1\t3\nq1\td2\t0\nq2\td1\t1\n", encoding='utf-8')
    assert read_judgments(str(path)) == {"q1": {"d1": 3, "d2": 0}, "q2": {"d1": 1}}


@pytest.mark.parametrize("content,line", [
    ("q1\td1\t3\nq1\td2\t4\n", 2),
    ("q1\td1\t3\nq1\td1\t2\n", 2),
    ("q1\td1\tgood\n", 1),
    ("q1\td1\n", 1),
])
def test_read_judgments_errors(tmp_path, content, line):
    path = tmp_path / "qrels.tsv"
    path.write_text(content, encoding='utf-8')
    with pytest.raises(DataError) as excinfo:
        read_judgments(str(path))
    assert excinfo.value.line == line


def test_report_outputs(tmp_path):
    rankings = {"q1": ["d1"], "q2": ["d4"], "q3": ["d5"]}
    report = evaluate_run(rankings, _judgments(), cutoffs=[1, 3], frequencies={"q1": 3})
    path = tmp_path / "out" / "report.csv"
    write_report_csv(str(path), report, header="config_hash=abc")
    lines = path.read_text(encoding='utf-8').splitlines()
    assert lines[0] == "# config_hash=abc"
    assert lines[1] == "split,cutoff,ndcg,n_queries"
    assert lines[2] == "all,1,0.666667,3"
    assert len(lines) == 2 + 3 * 2

    table = format_report(report, {1: (2.0, 0.04)})
    assert "NDCG@1" in table and "NDCG@3" in table
    assert table.splitlines()[1].startswith("all")
    assert "p=0.04" in table
