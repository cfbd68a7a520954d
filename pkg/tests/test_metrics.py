import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ramen_vqa.datasets import VQAExample
from ramen_vqa.metrics import (
    acc_10choose3, mean_per_type, read_predictions, read_table, render_table, score,
    simple_accuracy, vqa_accuracy, write_predictions,
)


def brute_acc10(pred, answers):
    hits = 0
    for a in answers:
        if a == pred:
            hits += 1
    return 1.0 if hits >= 3 else hits / 3


def brute_mpt(preds, gold):
    types = sorted({t for _, t in gold.values()})
    accs = []
    for t in types:
        ids = [i for i, (_, tt) in gold.items() if tt == t]
        accs.append(sum(1 for i in ids if preds[i] == gold[i][0]) / len(ids))
    return sum(accs) / len(accs)


def random_set(rng, n_answers=4, n_types=3):
    n = int(rng.integers(1, 30))
    ids = [f"q{i}" for i in range(n)]
    preds = {i: int(rng.integers(n_answers)) for i in ids}
    gold = {i: (int(rng.integers(n_answers)), f"t{rng.integers(n_types)}") for i in ids}
    annot = {i: rng.integers(n_answers, size=10).tolist() for i in ids}
    return preds, gold, annot


@pytest.mark.parametrize("matches,expect", [(0, 0.0), (1, 1 / 3), (2, 2 / 3), (3, 1.0), (10, 1.0)])
def test_acc_10choose3(matches, expect):
    assert acc_10choose3(7, [7] * matches + [0] * (10 - matches)) == expect


def test_acc_10choose3_needs_ten():
    with pytest.raises(ValueError):
        acc_10choose3(1, [1, 1, 1])


def test_simple_accuracy_three_of_four():
    preds = {"a": 1, "b": 2, "c": 3, "d": 0}
    assert simple_accuracy(preds, {"a": 1, "b": 2, "c": 3, "d": 4}) == 0.75


def test_simple_accuracy_missing_ids_named():
    with pytest.raises(KeyError, match="b"):
        simple_accuracy({"a": 1}, {"a": 1, "b": 2})


def test_mean_per_type_two_types():
    gold = {"a": (1, "x"), "b": (1, "x"), "c": (1, "y")}
    rep = mean_per_type({"a": 1, "b": 0, "c": 1}, gold)
    assert rep.per_type == {"x": 0.5, "y": 1.0}
    assert rep.overall == 0.75


def test_mean_per_type_diverges_from_simple():
    gold = {f"c{i}": (1, "common") for i in range(90)}
    gold.update({f"r{i}": (1, "rare") for i in range(10)})
    preds = {i: (1 if i.startswith("c") else 0) for i in gold}
    assert mean_per_type(preds, gold).overall == 0.5
    assert simple_accuracy(preds, {i: a for i, (a, _) in gold.items()}) == 0.9


def test_metrics_match_brute_force_on_random_sets():
    rng = np.random.default_rng(0)
    for _ in range(200):
        preds, gold, annot = random_set(rng)
        simple = sum(preds[i] == a for i, (a, _) in gold.items()) / len(gold)
        assert simple_accuracy(preds, {i: a for i, (a, _) in gold.items()}) == simple
        assert mean_per_type(preds, gold).overall == brute_mpt(preds, gold)
        expect = sum(brute_acc10(preds[i], annot[i]) for i in annot) / len(annot)
        assert vqa_accuracy(preds, annot) == expect


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3), st.sampled_from("xyz")), min_size=1, max_size=20),
       st.integers(2, 4))
def test_mean_per_type_invariant_to_duplicating_a_type(items, k):
    preds = {str(i): p for i, (p, _, _) in enumerate(items)}
    gold = {str(i): (g, t) for i, (_, g, t) in enumerate(items)}
    base = mean_per_type(preds, gold).overall
    # replicate every question k times: per-type rates, hence the mean, are unchanged
    preds_k = {f"{i}_{j}": p for i, p in preds.items() for j in range(k)}
    gold_k = {f"{i}_{j}": g for i, g in gold.items() for j in range(k)}
    assert mean_per_type(preds_k, gold_k).overall == pytest.approx(base, abs=1e-12)


def test_score_dispatch():
    exs = [VQAExample("a", np.zeros((1, 1)), [1], "t1", 2, [2] * 10),
           VQAExample("b", np.zeros((1, 1)), [1], "t2", 3, [3, 3] + [0] * 8)]
    preds = {"a": 2, "b": 3}
    assert score("vqa10", preds, exs).overall == pytest.approx((1 + 2 / 3) / 2)
    assert score("simple", preds, exs).overall == 1.0
    assert score("mean_per_type", {"a": 2, "b": 0}, exs).overall == 0.5
    with pytest.raises(ValueError):
        score("bleu", preds, exs)


def test_predictions_csv_round_trip(tmp_path):
    preds = {"q1": 3, "q,2": 0, "q3": 11}
    p = tmp_path / "p.csv"
    write_predictions(preds, p)
    assert p.read_text().splitlines()[0] == "id,answer"
    assert read_predictions(p) == preds


def test_predictions_csv_rejects_duplicates(tmp_path):
    p = tmp_path / "p.csv"
    p.write_text("id,answer\na,1\na,2\n")
    with pytest.raises(ValueError, match="duplicate"):
        read_predictions(p)


def test_render_table_mean_row(tmp_path):
    scores = {("d1", "A"): 0.5, ("d2", "A"): 0.25, ("d1", "B"): 0.123456, ("d2", "B"): None}
    text = render_table(scores, ["d1", "d2"], ["A", "B"])
    p = tmp_path / "t.tsv"
    p.write_text(text)
    header, rows = read_table(p)
    assert header == ["Dataset", "A", "B"]
    assert rows["d1"] == ["50.00", "12.35"]
    assert rows["d2"] == ["25.00", "-"]
    assert rows["Mean"] == ["37.50", "12.35"]
