import math

import numpy as np
import pytest

from semspeech.corpus import ScoredPairSet
from semspeech.errors import MissingGroundTruthError, ValidationError
from semspeech.evaluation import (
    EvalReport,
    alignment,
    average_ranks,
    cosine,
    evaluate,
    inter_rater_agreement,
    l2_normalize,
    load_report,
    recall_at_k,
    save_pair_predictions,
    save_report,
    spearman,
    uniformity,
)


def oracle_ranks(xs):
    # independent implementation: rank = mean of 1-based sorted positions
    xs = list(xs)
    pairs = sorted(range(len(xs)), key=lambda i: xs[i])
    ranks = [0.0] * len(xs)
    i = 0
    while i < len(pairs):
        j = i
        while j + 1 < len(pairs) and xs[pairs[j + 1]] == xs[pairs[i]]:
            j += 1
        avg = sum(range(i + 1, j + 2)) / (j - i + 1)
        for p in pairs[i : j + 1]:
            ranks[p] = avg
        i = j + 1
    return ranks


def oracle_spearman(xs, ys):
    rx, ry = oracle_ranks(xs), oracle_ranks(ys)
    mx, my = sum(rx) / len(rx), sum(ry) / len(ry)
    num = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    den = math.sqrt(
        sum((a - mx) ** 2 for a in rx) * sum((b - my) ** 2 for b in ry)
    )
    return num / den


# ---------------------------------------------------------------------------
# spearman
# ---------------------------------------------------------------------------

def test_spearman_identity_and_reverse():
    xs = [3.0, 1.0, 4.0, 1.5, 9.0]
    assert spearman(xs, xs) == pytest.approx(1.0, abs=1e-12)
    assert spearman(xs, [-v for v in xs]) == pytest.approx(-1.0, abs=1e-12)


def test_spearman_tie_case_matches_oracle():
    xs = [1.0, 2.0, 2.0, 3.0]
    ys = [1.0, 3.0, 2.0, 4.0]
    assert spearman(xs, ys) == pytest.approx(oracle_spearman(xs, ys), abs=1e-12)


def test_spearman_many_random_instances_match_oracle():
    rng = np.random.default_rng(0)
    for _ in range(120):
        n = int(rng.integers(2, 30))
        xs = rng.integers(0, 6, size=n).astype(float)  # heavy ties
        ys = rng.standard_normal(n)
        if np.all(xs == xs[0]):
            continue
        assert spearman(xs, ys) == pytest.approx(oracle_spearman(xs, ys), abs=1e-9)


def test_spearman_monotone_transform_invariance():
    rng = np.random.default_rng(1)
    xs = rng.standard_normal(40)
    ys = rng.standard_normal(40)
    base = spearman(xs, ys)
    assert spearman(np.exp(xs), ys) == base
    assert spearman(xs, 3.0 * ys + 7.0) == base


def test_spearman_errors():
    with pytest.raises(ValidationError):
        spearman([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(ValidationError):
        spearman([1.0], [2.0])
    with pytest.raises(ValidationError):
        spearman([1.0, 2.0], [1.0, 2.0, 3.0])


def test_average_ranks_example():
    assert list(average_ranks(np.array([10.0, 20.0, 20.0, 30.0]))) == [1.0, 2.5, 2.5, 4.0]


# ---------------------------------------------------------------------------
# alignment / uniformity
# ---------------------------------------------------------------------------

def pairset(entries):
    return ScoredPairSet(pairs=entries, split="test")


def test_alignment_identical_embeddings_zero():
    embs = {"a": np.array([1.0, 0.0]), "b": np.array([2.0, 0.0])}
    pairs = pairset([("a", "b", 5.0)])
    assert alignment(embs, pairs) == pytest.approx(0.0, abs=1e-15)


def test_alignment_antipodal_is_four():
    embs = {"a": np.array([0.0, 3.0]), "b": np.array([0.0, -7.0])}
    pairs = pairset([("a", "b", 4.5)])
    assert alignment(embs, pairs) == pytest.approx(4.0, abs=1e-12)


def test_alignment_matches_brute_force():
    rng = np.random.default_rng(2)
    ids = [f"u{i}" for i in range(10)]
    embs = {i: rng.standard_normal(6) for i in ids}
    entries = []
    for n, i in enumerate(range(0, 10, 2)):
        score = 4.0 + 0.2 * n if n % 2 == 0 else float(rng.uniform(0, 3.9))
        entries.append((ids[i], ids[i + 1], score))
    pairs = pairset(entries)
    got = alignment(embs, pairs)
    total, count = 0.0, 0
    for a, b, s in entries:
        if s >= 4.0:
            ea = embs[a] / np.linalg.norm(embs[a])
            eb = embs[b] / np.linalg.norm(embs[b])
            total += float(((ea - eb) ** 2).sum())
            count += 1
    assert got == pytest.approx(total / count, abs=1e-9)


def test_alignment_requires_positives():
    embs = {"a": np.array([1.0, 0.0]), "b": np.array([0.0, 1.0])}
    with pytest.raises(ValidationError):
        alignment(embs, pairset([("a", "b", 2.0)]))


def test_alignment_missing_embedding_names_id():
    embs = {"a": np.array([1.0, 0.0])}
    with pytest.raises(MissingGroundTruthError) as e:
        alignment(embs, pairset([("a", "zzz", 5.0)]))
    assert "zzz" in str(e.value)


def test_uniformity_identical_pair_zero():
    embs = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert uniformity(embs) == pytest.approx(0.0, abs=1e-15)


def test_uniformity_antipodal_minus_eight():
    embs = np.array([[1.0, 0.0], [-1.0, 0.0]])
    assert uniformity(embs) == pytest.approx(-8.0, abs=1e-12)


def test_uniformity_matches_double_loop():
    rng = np.random.default_rng(3)
    embs = rng.standard_normal((10, 5))
    got = uniformity(embs)
    unit = embs / np.linalg.norm(embs, axis=1, keepdims=True)
    total, count = 0.0, 0
    for i in range(10):
        for j in range(i + 1, 10):
            total += math.exp(-2.0 * float(((unit[i] - unit[j]) ** 2).sum()))
            count += 1
    assert got == pytest.approx(math.log(total / count), abs=1e-9)


def test_uniformity_include_self_flag():
    embs = np.array([[1.0, 0.0], [-1.0, 0.0]])
    # pairs: (0,1) -> e^-8, self-pairs add two e^0 terms
    expected = math.log((math.exp(-8.0) + 2.0) / 3.0)
    assert uniformity(embs, include_self=True) == pytest.approx(expected, abs=1e-12)


def test_uniformity_needs_two():
    with pytest.raises(ValidationError):
        uniformity(np.ones((1, 4)))


def test_uniformity_nonpositive_for_unit_vectors():
    rng = np.random.default_rng(4)
    embs = rng.standard_normal((8, 4))
    assert uniformity(embs) <= 0.0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def test_evaluate_single_rendering_reduces_to_cosine():
    rng = np.random.default_rng(5)
    vecs = {f"u{i}": rng.standard_normal(8) for i in range(6)}
    renderings = {i: [i] for i in vecs}  # rendering key = id itself
    entries = [("u0", "u1", 5.0), ("u2", "u3", 2.0), ("u4", "u5", 4.2)]
    report = evaluate(lambda key: vecs[key], pairset(entries), renderings)
    for p in report.per_pair:
        assert p.n_combinations == 1
        assert p.predicted == pytest.approx(cosine(vecs[p.id_a], vecs[p.id_b]), abs=1e-12)
    # rho equals spearman recomputed from the assembled vectors
    rho = spearman([p.predicted for p in report.per_pair], [e[2] for e in entries])
    assert report.spearman == pytest.approx(rho, abs=1e-15)


def test_evaluate_two_by_two_renderings_average_four_combinations():
    rng = np.random.default_rng(6)
    store = {
        ("a", 0): rng.standard_normal(4),
        ("a", 1): rng.standard_normal(4),
        ("b", 0): rng.standard_normal(4),
        ("b", 1): rng.standard_normal(4),
        ("c", 0): rng.standard_normal(4),
        ("d", 0): rng.standard_normal(4),
    }
    renderings = {
        "a": [("a", 0), ("a", 1)],
        "b": [("b", 0), ("b", 1)],
        "c": [("c", 0)],
        "d": [("d", 0)],
    }
    entries = [("a", "b", 4.5), ("c", "d", 1.0)]
    report = evaluate(lambda key: store[key], pairset(entries), renderings)
    first = report.per_pair[0]
    assert first.n_combinations == 4
    manual = np.mean(
        [cosine(store[("a", i)], store[("b", j)]) for i in (0, 1) for j in (0, 1)]
    )
    assert first.predicted == pytest.approx(manual, abs=1e-12)
    assert report.per_pair[1].n_combinations == 1


def test_evaluate_missing_rendering_names_id():
    renderings = {"a": [0]}
    with pytest.raises(MissingGroundTruthError) as e:
        evaluate(lambda key: np.ones(3), pairset([("a", "missing-one", 3.0)]), renderings)
    assert "missing-one" in str(e.value)


def test_evaluate_scale_invariance():
    rng = np.random.default_rng(7)
    vecs = {f"u{i}": rng.standard_normal(5) for i in range(4)}
    renderings = {i: [i] for i in vecs}
    entries = [("u0", "u1", 5.0), ("u2", "u3", 1.0), ("u0", "u2", 3.0)]
    base = evaluate(lambda k: vecs[k], pairset(entries), renderings)
    # power-of-two per-id rescaling leaves every cosine bit-identical
    scales = {"u0": 4.0, "u1": 0.5, "u2": 16.0, "u3": 2.0}
    scaled = evaluate(lambda k: scales[k] * vecs[k], pairset(entries), renderings)
    assert scaled.spearman == base.spearman
    for p, q in zip(base.per_pair, scaled.per_pair):
        assert p.predicted == q.predicted


# ---------------------------------------------------------------------------
# inter-rater agreement
# ---------------------------------------------------------------------------

def test_inter_rater_identical_raters():
    ratings = np.tile(np.array([1.0, 3.0, 2.0, 5.0]), (3, 1))
    assert inter_rater_agreement(ratings) == pytest.approx(1.0, abs=1e-12)


def test_inter_rater_reversed_pair():
    ratings = np.array([[1.0, 2.0, 3.0], [3.0, 2.0, 1.0]])
    assert inter_rater_agreement(ratings) == pytest.approx(-1.0, abs=1e-12)


def test_inter_rater_synthetic_high_agreement():
    rng = np.random.default_rng(8)
    truth = rng.uniform(0, 5, size=60)
    raters = np.stack([truth + 0.15 * rng.standard_normal(60) for _ in range(4)])
    assert inter_rater_agreement(raters) > 0.9


def test_inter_rater_needs_two_raters():
    with pytest.raises(ValidationError):
        inter_rater_agreement(np.ones((1, 5)))


# ---------------------------------------------------------------------------
# recall
# ---------------------------------------------------------------------------

def test_recall_self_query():
    rng = np.random.default_rng(9)
    index = rng.standard_normal((20, 8))
    ids = [f"x{i}" for i in range(20)]
    got = recall_at_k(index[[3]], index, ids, ["x3"], ks=[1])
    assert got[1] == 1.0


def test_recall_monotone_and_full():
    rng = np.random.default_rng(10)
    index = rng.standard_normal((15, 6))
    ids = [f"x{i}" for i in range(15)]
    queries = rng.standard_normal((10, 6))
    true = [ids[int(rng.integers(0, 15))] for _ in range(10)]
    got = recall_at_k(queries, index, ids, true, ks=[1, 3, 7, 15])
    assert got[1] <= got[3] <= got[7] <= got[15]
    assert got[15] == 1.0


def test_recall_chance_baseline():
    rng = np.random.default_rng(11)
    n = 50
    index = rng.standard_normal((n, 16))
    ids = [f"x{i}" for i in range(n)]
    trials = 400
    queries = rng.standard_normal((trials, 16))
    true = [ids[int(rng.integers(0, n))] for _ in range(trials)]
    got = recall_at_k(queries, index, ids, true, ks=[1])
    assert abs(got[1] - 1.0 / n) < 3.0 / n


def test_recall_k_out_of_range():
    rng = np.random.default_rng(12)
    index = rng.standard_normal((5, 4))
    ids = list("abcde")
    with pytest.raises(ValidationError):
        recall_at_k(index[[0]], index, ids, ["a"], ks=[6])
    with pytest.raises(ValidationError):
        recall_at_k(index[[0]], index, ids, ["a"], ks=[0])


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

def test_report_round_trip(tmp_path):
    report = EvalReport(
        spearman=0.61,
        n_pairs=200,
        alignment=0.4,
        uniformity=-2.2,
        recall_at_k={1: 0.5, 5: 0.9},
        metadata={"model": "m1", "split": "test"},
    )
    path = tmp_path / "report.json"
    save_report(report, path)
    back = load_report(path)
    assert back.spearman == report.spearman
    assert back.recall_at_k == {1: 0.5, 5: 0.9}
    assert back.metadata["model"] == "m1"


def test_report_validation():
    with pytest.raises(ValidationError):
        EvalReport(spearman=1.5, n_pairs=10, alignment=0.1, uniformity=-1.0)
    with pytest.raises(ValidationError):
        EvalReport(spearman=0.5, n_pairs=10, alignment=-0.1, uniformity=-1.0)


def test_pair_predictions_file(tmp_path):
    rng = np.random.default_rng(13)
    vecs = {f"u{i}": rng.standard_normal(4) for i in range(4)}
    renderings = {i: [i] for i in vecs}
    entries = [("u0", "u1", 5.0), ("u2", "u3", 1.5)]
    report = evaluate(lambda k: vecs[k], pairset(entries), renderings)
    path = tmp_path / "pairs.tsv"
    save_pair_predictions(report, path)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "id_a\tid_b\thuman_score\tpredicted\tn_combinations"
    assert len(lines) == 3


def test_l2_normalize_zero_vector_errors():
    with pytest.raises(ValidationError):
        l2_normalize(np.zeros(4))
