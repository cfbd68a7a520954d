import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ramen_vqa.datasets import (
    COLORS, SHAPES, DatasetFormatError, GenConfig, SceneObject, VQAExample, Vocab, answer_distributions,
    evaluate, generate_toy_dataset, load_dataset, load_jsonl, majority_baseline, save_dataset,
    save_jsonl, total_variation,
)


def decode_objects(regions):
    """(color, shape, x) per region, read back from the one-hot encoding."""
    out = []
    for row in regions:
        shape = SHAPES[int(np.argmax(row[0:3]))]
        color = COLORS[int(np.argmax(row[3:7]))]
        out.append((color, shape, row[9]))
    return out


def oracle_answer(words, objs):
    """Independent re-implementation of the question templates."""
    text = " ".join(words)
    colors = [c for c, _, _ in objs]
    shapes = [s for _, s, _ in objs]
    if text.startswith("how many"):
        return str(colors.count(words[2]))
    if text.startswith("is there a"):
        target = words[3]
        return "yes" if target in colors or target in shapes else "no"
    if text.startswith("what"):
        xs = [x for _, _, x in objs]
        i = int(np.argmin(xs)) if words[4] == "leftmost" else int(np.argmax(xs))
        return objs[i][0] if words[1] == "color" else objs[i][1]
    if text.startswith("is the"):
        (c1, s1), (c2, s2) = (words[2], words[3]), (words[7], words[8])
        x1 = [x for c, s, x in objs if (c, s) == (c1, s1)]
        x2 = [x for c, s, x in objs if (c, s) == (c2, s2)]
        assert len(x1) == 1 and len(x2) == 1
        return "yes" if x1[0] < x2[0] else "no"
    raise AssertionError(text)


def small(**kw):
    base = dict(n_train=150, n_val=20, n_test=80, regions=4, dv=14)
    base.update(kw)
    return GenConfig(**base)


@pytest.mark.parametrize("split", ["iid", "cogent", "cp"])
def test_answers_consistent_with_scene(split):
    ds = generate_toy_dataset(small(split=split), seed=3)
    for ex in ds.train + ds.val + ds.test:
        words = ds.vocab.decode(ex.tokens)
        assert oracle_answer(words, decode_objects(ex.regions)) == ds.vocab.answers[ex.answer]
        assert ex.regions.shape == (4, 14)


def test_count_question_on_known_scene():
    scene = [SceneObject("cube", "red", "small", 0.1, 0.1), SceneObject("sphere", "red", "large", 0.5, 0.2),
             SceneObject("cube", "blue", "large", 0.9, 0.3)]
    assert evaluate(("count_color", "red"), scene) == "2"
    assert evaluate(("extreme", "shape", "rightmost"), scene) == "cube"
    assert evaluate(("left_of", "red", "cube", "blue", "cube"), scene) == "yes"
    assert evaluate(("left_of", "red", "cube", "red", "cube"), scene) is None


def test_generation_is_seed_deterministic():
    a = generate_toy_dataset(small(split="cp"), seed=11)
    b = generate_toy_dataset(small(split="cp"), seed=11)
    c = generate_toy_dataset(small(split="cp"), seed=12)
    for s in ("train", "val", "test"):
        assert a.split(s) == b.split(s)
        assert all(x.regions.tobytes() == y.regions.tobytes() for x, y in zip(a.split(s), b.split(s)))
    assert a.train != c.train


def test_examples_independent_of_split_size():
    a = generate_toy_dataset(small(n_train=10), seed=5)
    b = generate_toy_dataset(small(n_train=30), seed=5)
    assert a.train == b.train[:10]


def test_cogent_holdout():
    ds = generate_toy_dataset(small(split="cogent", holdout=[("red", "cylinder")]), seed=4)
    for ex in ds.train + ds.val:
        assert ("red", "cylinder") not in [(c, s) for c, s, _ in decode_objects(ex.regions)]
    for ex in ds.test:
        assert ("red", "cylinder") in [(c, s) for c, s, _ in decode_objects(ex.regions)]


def test_cp_answer_shift():
    ds = generate_toy_dataset(small(split="cp", n_train=400, n_test=400), seed=2)
    tr, te = answer_distributions(ds.train), answer_distributions(ds.test)
    for qt in tr:
        assert total_variation(tr[qt], te[qt]) > 0.3


def test_annotators_all_correct_when_p_one():
    ds = generate_toy_dataset(small(annotators=True, annotator_p=1.0), seed=1)
    assert ds.metric == "vqa10"
    for ex in ds.train:
        assert ex.annotator_answers == [ex.answer] * 10


def test_annotator_distractors_share_category():
    ds = generate_toy_dataset(small(annotators=True, annotator_p=0.5), seed=1)
    vocab = ds.vocab
    saw_distractor = False
    for ex in ds.train:
        group = vocab.answer_category(vocab.answers[ex.answer])
        for a in ex.annotator_answers:
            assert vocab.answers[a] in group
            saw_distractor |= a != ex.answer
    assert saw_distractor


@pytest.mark.parametrize("kw", [dict(noise=-0.1), dict(regions=1), dict(dv=8), dict(split="weird"),
                                dict(metric="vqa10")])
def test_bad_config_rejected(kw):
    with pytest.raises(ValueError):
        generate_toy_dataset(small(**kw), seed=0)


def test_vocab_unknown_maps_to_unk():
    v = Vocab.build(4)
    assert v.encode(["how", "zebra"]) == [v.token_ids["how"], v.token_ids["<unk>"]]
    assert len(v.answers) == 2 + 5 + 4 + 3


# ---- JSONL

def test_jsonl_round_trip(tmp_path):
    ds = generate_toy_dataset(small(n_train=3, annotators=True), seed=9)
    p = tmp_path / "x.jsonl"
    save_jsonl(ds.train, p)
    back = load_jsonl(p)
    assert back == ds.train
    assert all(a.regions.tobytes() == b.regions.tobytes() for a, b in zip(back, ds.train))


@given(values=st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=2, max_size=8))
def test_jsonl_float_round_trip_exact(tmp_path_factory, values):
    regions = np.array(values[: len(values) // 2 * 2]).reshape(-1, 2)
    ex = VQAExample("a", regions, [1, 2], "count", 3)
    p = tmp_path_factory.mktemp("j") / "x.jsonl"
    save_jsonl([ex], p)
    assert load_jsonl(p)[0].regions.tobytes() == regions.tobytes()


def test_empty_file(tmp_path):
    p = tmp_path / "e.jsonl"
    p.write_text("")
    assert load_jsonl(p) == []


def test_truncated_last_line(tmp_path):
    ds = generate_toy_dataset(small(n_train=3), seed=9)
    p = tmp_path / "x.jsonl"
    save_jsonl(ds.train, p)
    text = p.read_text()
    p.write_text(text[: len(text) - 40])
    with pytest.raises(DatasetFormatError) as info:
        load_jsonl(p)
    assert info.value.line == 3


@pytest.mark.parametrize("line,field", [
    ('{"id":"a","regions":[[1]],"tokens":[],"question_type":"q","answer":1}', "tokens"),
    ('{"id":"a","regions":[[1],[2,3]],"tokens":[1],"question_type":"q","answer":1}', "regions"),
    ('{"id":"a","regions":[[1]],"tokens":[1],"question_type":"q","answer":"x"}', "answer"),
    ('{"id":"a","regions":[[1]],"tokens":[1],"question_type":"q","answer":1,"annotator_answers":[1]}',
     "annotator_answers"),
    ('{"regions":[[1]],"tokens":[1],"question_type":"q","answer":1}', "id"),
])
def test_malformed_fields_named(tmp_path, line, field):
    p = tmp_path / "x.jsonl"
    p.write_text(line + "\n")
    with pytest.raises(DatasetFormatError) as info:
        load_jsonl(p)
    assert info.value.field == field and info.value.line == 1


def test_dataset_directory_round_trip(tmp_path):
    ds = generate_toy_dataset(small(split="cogent"), seed=1)
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert back.train == ds.train and back.test == ds.test
    assert back.vocab.tokens == ds.vocab.tokens and back.vocab.answers == ds.vocab.answers
    assert (back.metric, back.regions, back.dv) == ("simple", 4, 14)
    lines = (tmp_path / "d" / "answers.tsv").read_text().splitlines()
    assert lines[0] == "0\tyes"


def test_majority_baseline():
    exs = [VQAExample(str(i), np.zeros((1, 1)), [1], "t", a) for i, a in enumerate([1, 1, 2, 3])]
    assert majority_baseline(exs) == 0.5
