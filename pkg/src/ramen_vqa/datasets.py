"""Synthetic CLEVR-style scenes, templated questions and the JSONL dataset format.

Each region is one object rendered as
``[shape one-hot (3) | color one-hot (4) | size one-hot (2) | x | y | noise...]``.
Answers are computed from the scene, so the generator is its own oracle.

Split kinds:
  iid     train/val/test drawn from one distribution
  cogent  train/val never contain a held-out (color, shape) pair; every test
          scene contains at least one
  cp      per question type, train and test favour complementary halves of the
          answer set (rejection sampling), so answer priors do not transfer
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

SHAPES = ("cube", "sphere", "cylinder")
COLORS = ("red", "green", "blue", "yellow")
SIZES = ("small", "large")
QUESTION_TYPES = ("exists", "count", "extreme", "relation")
FEATURE_DIMS = len(SHAPES) + len(COLORS) + len(SIZES) + 2

WORDS = (
    "is", "there", "a", "an", "object", "objects", "how", "many", "are", "what",
    "the", "leftmost", "rightmost", "left", "of", "color", "shape", "?",
) + SHAPES + COLORS
PAD, UNK = "<pad>", "<unk>"


class DatasetFormatError(ValueError):
    def __init__(self, line: int, field_name: str, msg: str):
        self.line = line
        self.field = field_name
        super().__init__(f"line {line}: field {field_name!r}: {msg}")


class GenerationError(RuntimeError):
    pass


@dataclass
class SceneObject:
    shape: str
    color: str
    size: str
    x: float
    y: float


@dataclass
class Vocab:
    tokens: list[str]
    answers: list[str]

    def __post_init__(self):
        self.token_ids = {t: i for i, t in enumerate(self.tokens)}
        self.answer_ids = {a: i for i, a in enumerate(self.answers)}

    @classmethod
    def build(cls, regions: int) -> "Vocab":
        answers = ["yes", "no"] + [str(i) for i in range(regions + 1)] + list(COLORS) + list(SHAPES)
        return cls([PAD, UNK] + list(WORDS), answers)

    def encode(self, words: Sequence[str]) -> list[int]:
        unk = self.token_ids[UNK]
        return [self.token_ids.get(w.lower(), unk) for w in words]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def answer_category(self, answer: str) -> tuple[str, ...]:
        for group in (("yes", "no"), tuple(a for a in self.answers if a.isdigit()), COLORS, SHAPES):
            if answer in group:
                return group
        raise KeyError(answer)

    def save(self, directory) -> None:
        d = Path(directory)
        _write_tsv(d / "tokens.tsv", self.tokens)
        _write_tsv(d / "answers.tsv", self.answers)

    @classmethod
    def load(cls, directory) -> "Vocab":
        d = Path(directory)
        return cls(_read_tsv(d / "tokens.tsv"), _read_tsv(d / "answers.tsv"))


def _write_tsv(path: Path, items: Sequence[str]) -> None:
    path.write_text("".join(f"{i}\t{s}\n" for i, s in enumerate(items)), encoding="utf-8")


def _read_tsv(path: Path) -> list[str]:
    out = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        idx, sep, s = line.partition("\t")
        if not sep or not idx.isdigit() or int(idx) != len(out):
            raise DatasetFormatError(n, "id", f"bad vocab line {line!r} in {path.name}")
        out.append(s)
    return out


@dataclass
class VQAExample:
    id: str
    regions: np.ndarray
    tokens: list[int]
    question_type: str
    answer: int
    annotator_answers: list[int] | None = None

    def __post_init__(self):
        self.regions = np.asarray(self.regions, dtype=np.float64)
        if self.annotator_answers is not None and len(self.annotator_answers) != 10:
            raise ValueError(f"{self.id}: annotator_answers must have exactly 10 entries")

    def __eq__(self, other):
        if not isinstance(other, VQAExample):
            return NotImplemented
        return (
            self.id == other.id
            and self.regions.shape == other.regions.shape
            and np.array_equal(self.regions, other.regions)
            and self.tokens == other.tokens
            and self.question_type == other.question_type
            and self.answer == other.answer
            and self.annotator_answers == other.annotator_answers
        )


@dataclass
class GenConfig:
    name: str = "synthetic"
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 400
    regions: int = 6
    dv: int = 16
    noise: float = 0.1
    split: str = "iid"
    holdout: list[tuple[str, str]] = field(default_factory=lambda: [("red", "cylinder")])
    cp_threshold: float = 0.3
    cp_keep: float = 0.1
    annotators: bool = False
    annotator_p: float = 0.9
    metric: str | None = None
    question_types: list[str] = field(default_factory=lambda: list(QUESTION_TYPES))

    def __post_init__(self):
        self.holdout = [tuple(h) for h in self.holdout]
        if self.metric is None:
            self.metric = "vqa10" if self.annotators else "simple"

    def validate(self) -> None:
        if self.regions < 2:
            raise ValueError(f"regions must be >= 2, got {self.regions}")
        if self.noise < 0:
            raise ValueError(f"noise sigma must be >= 0, got {self.noise}")
        if self.dv < FEATURE_DIMS:
            raise ValueError(f"dv must be >= {FEATURE_DIMS} to hold the object encoding, got {self.dv}")
        if self.split not in ("iid", "cogent", "cp"):
            raise ValueError(f"unknown split kind {self.split!r}")
        for color, shape in self.holdout:
            if color not in COLORS or shape not in SHAPES:
                raise ValueError(f"bad holdout pair {color}:{shape}")
        if self.metric not in ("vqa10", "simple", "mean_per_type"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.metric == "vqa10" and not self.annotators:
            raise ValueError("vqa10 metric needs annotator answers")
        if not 0.0 <= self.annotator_p <= 1.0:
            raise ValueError("annotator_p must lie in [0, 1]")
        for q in self.question_types:
            if q not in QUESTION_TYPES:
                raise ValueError(f"unknown question type {q!r}")
        if any(n < 0 for n in (self.n_train, self.n_val, self.n_test)):
            raise ValueError("split sizes must be >= 0")


@dataclass
class VQADataset:
    name: str
    train: list[VQAExample]
    val: list[VQAExample]
    test: list[VQAExample]
    vocab: Vocab
    metric: str
    regions: int
    dv: int
    config: dict = field(default_factory=dict)

    def split(self, name: str) -> list[VQAExample]:
        return {"train": self.train, "val": self.val, "test": self.test}[name]


# ---------------------------------------------------------------- scenes

def render_regions(scene: Sequence[SceneObject], dv: int, noise: float, rng: np.random.Generator) -> np.ndarray:
    out = np.zeros((len(scene), dv))
    for i, o in enumerate(scene):
        out[i, SHAPES.index(o.shape)] = 1.0
        out[i, 3 + COLORS.index(o.color)] = 1.0
        out[i, 7 + SIZES.index(o.size)] = 1.0
        out[i, 9] = o.x
        out[i, 10] = o.y
    if dv > FEATURE_DIMS:
        out[:, FEATURE_DIMS:] = rng.normal(0.0, noise, size=(len(scene), dv - FEATURE_DIMS)) if noise else 0.0
    return out


def _sample_object(rng, forbid: set) -> SceneObject:
    while True:
        color = COLORS[rng.integers(len(COLORS))]
        shape = SHAPES[rng.integers(len(SHAPES))]
        if (color, shape) not in forbid:
            break
    return SceneObject(shape, color, SIZES[rng.integers(len(SIZES))], 0.0, 0.0)


def sample_scene(rng, regions: int, forbid: set = frozenset(), force: Sequence = ()) -> list[SceneObject]:
    objs = [_sample_object(rng, forbid) for _ in range(regions)]
    if force:
        color, shape = force[rng.integers(len(force))]
        i = int(rng.integers(regions))
        objs[i].color, objs[i].shape = color, shape
    # distinct positions: x coordinates are drawn until all differ
    while True:
        xs = rng.uniform(0.0, 1.0, size=regions)
        if len(set(xs.tolist())) == regions:
            break
    ys = rng.uniform(0.0, 1.0, size=regions)
    for o, x, y in zip(objs, xs, ys):
        o.x, o.y = float(x), float(y)
    return objs


# ---------------------------------------------------------------- questions
#
# A question program is a tuple; ``evaluate`` is the single interpreter used
# both to produce answers and to re-check them.

def evaluate(program: tuple, scene: Sequence[SceneObject]) -> str | None:
    """Answer string for ``program`` on ``scene``, or None when unanswerable."""
    op = program[0]
    if op == "exists_shape":
        return "yes" if any(o.shape == program[1] for o in scene) else "no"
    if op == "exists_color":
        return "yes" if any(o.color == program[1] for o in scene) else "no"
    if op == "count_color":
        return str(sum(o.color == program[1] for o in scene))
    if op == "extreme":
        _, attr, side = program
        pick = min if side == "leftmost" else max
        obj = pick(scene, key=lambda o: o.x)
        return getattr(obj, attr)
    if op == "left_of":
        _, c1, s1, c2, s2 = program
        a = [o for o in scene if o.color == c1 and o.shape == s1]
        b = [o for o in scene if o.color == c2 and o.shape == s2]
        if len(a) != 1 or len(b) != 1 or (c1, s1) == (c2, s2):
            return None
        return "yes" if a[0].x < b[0].x else "no"
    raise ValueError(f"unknown program {program!r}")


def question_words(program: tuple) -> list[str]:
    op = program[0]
    if op == "exists_shape":
        return ["is", "there", "a", program[1], "?"]
    if op == "exists_color":
        return ["is", "there", "a", program[1], "object", "?"]
    if op == "count_color":
        return ["how", "many", program[1], "objects", "are", "there", "?"]
    if op == "extreme":
        return ["what", program[1], "is", "the", program[2], "object", "?"]
    if op == "left_of":
        _, c1, s1, c2, s2 = program
        return ["is", "the", c1, s1, "left", "of", "the", c2, s2, "?"]
    raise ValueError(f"unknown program {program!r}")


def question_type(program: tuple) -> str:
    return {"exists_shape": "exists", "exists_color": "exists", "count_color": "count",
            "extreme": "extreme", "left_of": "relation"}[program[0]]


def parse_question(words: Sequence[str]) -> tuple:
    """Recover the program from its token words (inverse of ``question_words``)."""
    w = list(words)
    if w[:3] == ["is", "there", "a"]:
        return ("exists_color", w[3]) if w[4] == "object" else ("exists_shape", w[3])
    if w[:2] == ["how", "many"]:
        return ("count_color", w[2])
    if w[0] == "what":
        return ("extreme", w[1], w[4])
    if w[:2] == ["is", "the"]:
        return ("left_of", w[2], w[3], w[7], w[8])
    raise ValueError(f"unparseable question {' '.join(w)!r}")


def sample_program(rng, scene: Sequence[SceneObject], qtype: str) -> tuple:
    if qtype == "exists":
        if rng.random() < 0.5:
            return ("exists_shape", SHAPES[rng.integers(3)])
        return ("exists_color", COLORS[rng.integers(4)])
    if qtype == "count":
        return ("count_color", COLORS[rng.integers(4)])
    if qtype == "extreme":
        return ("extreme", ("color", "shape")[rng.integers(2)], ("leftmost", "rightmost")[rng.integers(2)])
    i, j = rng.choice(len(scene), size=2, replace=False)
    a, b = scene[int(i)], scene[int(j)]
    return ("left_of", a.color, a.shape, b.color, b.shape)


def _cp_weight(vocab: Vocab, answer: str, split: str, keep: float) -> float:
    group = vocab.answer_category(answer)
    favoured = group.index(answer) % 2 == 0
    if split != "train":
        favoured = not favoured
    return 1.0 if favoured else keep


MAX_ATTEMPTS = 10_000
_SPLIT_CODE = {"train": 0, "val": 1, "test": 2}


def generate_example(cfg: GenConfig, vocab: Vocab, split: str, index: int, seed: int) -> VQAExample:
    rng = np.random.default_rng([seed, _SPLIT_CODE[split], index])
    forbid = set(cfg.holdout) if cfg.split == "cogent" and split != "test" else set()
    force = cfg.holdout if cfg.split == "cogent" and split == "test" else ()
    for _ in range(MAX_ATTEMPTS):
        scene = sample_scene(rng, cfg.regions, forbid, force)
        qtype = cfg.question_types[rng.integers(len(cfg.question_types))]
        program = sample_program(rng, scene, qtype)
        answer = evaluate(program, scene)
        if answer is None:
            continue
        if cfg.split == "cp" and rng.random() >= _cp_weight(vocab, answer, split, cfg.cp_keep):
            continue
        break
    else:
        raise GenerationError(f"no answerable example after {MAX_ATTEMPTS} attempts")

    gold = vocab.answer_ids[answer]
    annot = None
    if cfg.annotators:
        group = [a for a in vocab.answer_category(answer) if a != answer]
        annot = []
        for _ in range(10):
            if rng.random() < cfg.annotator_p or not group:
                annot.append(gold)
            else:
                annot.append(vocab.answer_ids[group[rng.integers(len(group))]])
    regions = render_regions(scene, cfg.dv, cfg.noise, rng)
    return VQAExample(
        id=f"{cfg.name}-{split}-{index:06d}",
        regions=regions,
        tokens=vocab.encode(question_words(program)),
        question_type=question_type(program),
        answer=gold,
        annotator_answers=annot,
    )


def answer_distributions(examples: Sequence[VQAExample]) -> dict[str, Counter]:
    out: dict[str, Counter] = {}
    for ex in examples:
        out.setdefault(ex.question_type, Counter())[ex.answer] += 1
    return out


def total_variation(a: Counter, b: Counter) -> float:
    na, nb = sum(a.values()), sum(b.values())
    keys = set(a) | set(b)
    return 0.5 * sum(abs(a[k] / na - b[k] / nb) for k in keys)


def generate_toy_dataset(cfg: GenConfig, seed: int) -> VQADataset:
    cfg.validate()
    vocab = Vocab.build(cfg.regions)
    splits = {
        name: [generate_example(cfg, vocab, name, i, seed) for i in range(n)]
        for name, n in (("train", cfg.n_train), ("val", cfg.n_val), ("test", cfg.n_test))
    }
    if cfg.split == "cp" and splits["train"] and splits["test"]:
        tr, te = answer_distributions(splits["train"]), answer_distributions(splits["test"])
        for qt in sorted(set(tr) & set(te)):
            tv = total_variation(tr[qt], te[qt])
            if tv <= cfg.cp_threshold:
                raise GenerationError(
                    f"cp split: answer-distribution shift for {qt!r} is {tv:.3f} <= {cfg.cp_threshold}"
                )
    meta = asdict(cfg)
    meta["seed"] = seed
    return VQADataset(cfg.name, splits["train"], splits["val"], splits["test"], vocab,
                      cfg.metric, cfg.regions, cfg.dv, meta)


# ---------------------------------------------------------------- JSONL

def _fmt(x: float) -> str:
    s = format(float(x), ".17g")
    # keep a float literal so that -0.0 survives the JSON round trip
    return s if any(c in s for c in ".en") else s + ".0"


def example_to_json(ex: VQAExample) -> str:
    rows = ",".join("[" + ",".join(_fmt(v) for v in row) + "]" for row in ex.regions)
    parts = [
        f'"id":{json.dumps(ex.id)}',
        f'"regions":[{rows}]',
        f'"tokens":{json.dumps(list(map(int, ex.tokens)))}',
        f'"question_type":{json.dumps(ex.question_type)}',
        f'"answer":{int(ex.answer)}',
    ]
    if ex.annotator_answers is not None:
        parts.append(f'"annotator_answers":{json.dumps(list(map(int, ex.annotator_answers)))}')
    return "{" + ",".join(parts) + "}"


def save_jsonl(examples: Sequence[VQAExample], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(example_to_json(ex) + "\n")


def _int_list(v) -> bool:
    return isinstance(v, list) and all(isinstance(x, int) and not isinstance(x, bool) for x in v)


def example_from_json(line: str, n: int) -> VQAExample:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(n, "<json>", str(exc)) from None
    if not isinstance(obj, dict):
        raise DatasetFormatError(n, "<json>", "expected an object")
    for key in ("id", "regions", "tokens", "question_type", "answer"):
        if key not in obj:
            raise DatasetFormatError(n, key, "missing")
    if not isinstance(obj["id"], str):
        raise DatasetFormatError(n, "id", "expected a string")
    try:
        regions = np.array(obj["regions"], dtype=np.float64)
    except (TypeError, ValueError):
        raise DatasetFormatError(n, "regions", "expected a rectangular array of numbers") from None
    if regions.ndim != 2 or regions.size == 0:
        raise DatasetFormatError(n, "regions", f"expected an R x dv matrix, got shape {regions.shape}")
    if not _int_list(obj["tokens"]) or not obj["tokens"]:
        raise DatasetFormatError(n, "tokens", "expected a non-empty list of integers")
    if not isinstance(obj["question_type"], str):
        raise DatasetFormatError(n, "question_type", "expected a string")
    if not isinstance(obj["answer"], int) or isinstance(obj["answer"], bool):
        raise DatasetFormatError(n, "answer", "expected an integer")
    annot = obj.get("annotator_answers")
    if annot is not None and (not _int_list(annot) or len(annot) != 10):
        raise DatasetFormatError(n, "annotator_answers", "expected exactly 10 integers")
    unknown = set(obj) - {"id", "regions", "tokens", "question_type", "answer", "annotator_answers"}
    if unknown:
        raise DatasetFormatError(n, sorted(unknown)[0], "unknown field")
    return VQAExample(obj["id"], regions, obj["tokens"], obj["question_type"], obj["answer"], annot)


def load_jsonl(path) -> list[VQAExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            out.append(example_from_json(line, n))
    return out


def save_dataset(ds: VQADataset, directory) -> dict[str, int]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name in ("train", "val", "test"):
        save_jsonl(ds.split(name), d / f"{name}.jsonl")
    ds.vocab.save(d)
    meta = dict(ds.config, name=ds.name, metric=ds.metric, regions=ds.regions, dv=ds.dv)
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return {name: len(ds.split(name)) for name in ("train", "val", "test")}


def load_dataset(directory) -> VQADataset:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text(encoding="utf-8"))
    splits = {}
    for name in ("train", "val", "test"):
        p = d / f"{name}.jsonl"
        splits[name] = load_jsonl(p) if p.exists() else []
    return VQADataset(meta.get("name", d.name), splits["train"], splits["val"], splits["test"],
                      Vocab.load(d), meta["metric"], int(meta["regions"]), int(meta["dv"]), meta)


def majority_baseline(examples: Sequence[VQAExample]) -> float:
    """Best accuracy achievable by always answering the same thing."""
    if not examples:
        return math.nan
    counts = Counter(ex.answer for ex in examples)
    return max(counts.values()) / len(examples)
