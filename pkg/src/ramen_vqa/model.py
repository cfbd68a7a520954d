"""The full pipeline: question GRU, early fusion, shared projection, late fusion,
aggregation (bi-GRU or unmasked transformer encoder), classification."""
from __future__ import annotations

import contextlib
import enum
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .fusion import DimensionError, FusionKind, fuse, fused_dim, tile_question
from .nn import MLP, BatchNorm1d, BiGRU, Embedding, GRUCell, Linear, Module, TransformerEncoderLayer

PAD_ID = 0


class AggregationKind(str, enum.Enum):
    BIGRU = "bigru"
    TRANSFORMER = "transformer"

    @classmethod
    def parse(cls, value) -> "AggregationKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ValueError(f"unknown aggregation {value!r}; expected bigru or transformer") from None


def variant_name(aggregation, fusion) -> str:
    agg = AggregationKind.parse(aggregation)
    fus = FusionKind.parse(fusion)
    return ("Ramen-" if agg is AggregationKind.BIGRU else "TransformerNet-") + fus.value.capitalize()


# column order of the results table
VARIANTS: list[tuple[AggregationKind, FusionKind]] = [
    (agg, fus) for agg in AggregationKind for fus in FusionKind
]


class PipelineError(ValueError):
    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        super().__init__(f"[{stage}] {cause}")


@contextlib.contextmanager
def _stage(name: str):
    try:
        yield
    except (ShapeError, IndexError) as exc:
        raise PipelineError(name, exc) from exc


@dataclass
class ModelConfig:
    vocab_size: int
    answer_vocab_size: int
    dq: int = 8
    dv: int = 16
    regions: int = 6
    early_fusion: FusionKind = FusionKind.CONCAT
    late_fusion: FusionKind = FusionKind.CONCAT
    aggregation: AggregationKind = AggregationKind.BIGRU
    word_dim: int | None = None
    shared_projection_dims: list[int] | None = None
    agg_hidden: int = 16
    transformer_layers: int = 1
    transformer_heads: int = 2
    transformer_ffn: int | None = None
    positional_encoding: bool = False
    preclassifier_dims: list[int] | None = None
    seed: int = 0

    def __post_init__(self):
        self.early_fusion = FusionKind.parse(self.early_fusion)
        self.late_fusion = FusionKind.parse(self.late_fusion)
        self.aggregation = AggregationKind.parse(self.aggregation)
        if self.word_dim is None:
            self.word_dim = max(1, self.dq // 2)
        if self.shared_projection_dims is None:
            self.shared_projection_dims = [2 * self.dv, self.dv]
        if self.preclassifier_dims is None:
            self.preclassifier_dims = [2 * self.agg_hidden, 2 * self.agg_hidden]
        self.shared_projection_dims = [int(d) for d in self.shared_projection_dims]
        self.preclassifier_dims = [int(d) for d in self.preclassifier_dims]
        if self.transformer_ffn is None:
            self.transformer_ffn = 2 * self.late_dim
        self.validate()

    @property
    def early_dim(self) -> int:
        return fused_dim(self.early_fusion, self.dq, self.dv)

    @property
    def bimodal_dim(self) -> int:
        return self.shared_projection_dims[-1]

    @property
    def late_dim(self) -> int:
        return fused_dim(self.late_fusion, self.dq, self.bimodal_dim)

    @property
    def agg_out(self) -> int:
        return 2 * self.agg_hidden

    @property
    def variant(self) -> str:
        return variant_name(self.aggregation, self.early_fusion)

    def validate(self) -> None:
        ints = dict(
            vocab_size=self.vocab_size, answer_vocab_size=self.answer_vocab_size, dq=self.dq,
            dv=self.dv, regions=self.regions, word_dim=self.word_dim, agg_hidden=self.agg_hidden,
            transformer_layers=self.transformer_layers, transformer_heads=self.transformer_heads,
            transformer_ffn=self.transformer_ffn,
        )
        for k, v in ints.items():
            if int(v) < 1:
                raise ValueError(f"{k} must be >= 1, got {v}")
        for d in self.shared_projection_dims + self.preclassifier_dims:
            if d < 1:
                raise ValueError(f"layer widths must be >= 1, got {d}")
        if not self.shared_projection_dims:
            raise ValueError("shared_projection_dims must name at least one layer")
        self.early_dim  # raises DimensionError
        self.late_dim
        if self.aggregation is AggregationKind.TRANSFORMER and self.late_dim % self.transformer_heads:
            raise DimensionError(
                f"transformer model dim {self.late_dim} not divisible by {self.transformer_heads} heads"
            )

    # key:value text form used in checkpoint headers
    def to_lines(self) -> list[str]:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, enum.Enum):
                v = v.value
            elif isinstance(v, list):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            out.append(f"{f.name}:{v}")
        return out

    @classmethod
    def from_lines(cls, lines: Sequence[str]) -> "ModelConfig":
        kinds = {f.name: f for f in fields(cls)}
        kw = {}
        for line in lines:
            key, _, raw = line.partition(":")
            if key not in kinds:
                raise ValueError(f"unknown config key {key!r}")
            if key in ("shared_projection_dims", "preclassifier_dims"):
                kw[key] = [int(x) for x in raw.split(",") if x]
            elif key == "positional_encoding":
                kw[key] = raw == "true"
            elif key in ("early_fusion", "late_fusion", "aggregation"):
                kw[key] = raw
            else:
                kw[key] = int(raw)
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("early_fusion", "late_fusion", "aggregation"):
            d[k] = getattr(self, k).value
        return d


def pad_tokens(token_lists: Sequence[Sequence[int]], vocab_size: int) -> tuple[np.ndarray, np.ndarray]:
    if not token_lists:
        raise ValueError("empty batch of questions")
    tmax = 0
    for toks in token_lists:
        if len(toks) == 0:
            raise ValueError("empty question")
        tmax = max(tmax, len(toks))
    ids = np.full((len(token_lists), tmax), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(token_lists), tmax), dtype=bool)
    for i, toks in enumerate(token_lists):
        arr = np.asarray(toks, dtype=np.int64)
        if arr.min() < 0 or arr.max() >= vocab_size:
            raise IndexError(f"token id out of range [0, {vocab_size}) in question {i}: {list(toks)}")
        ids[i, : len(arr)] = arr
        mask[i, : len(arr)] = True
    return ids, mask


def tiny_config(aggregation, fusion, late_fusion=None, seed: int = 0, **overrides) -> ModelConfig:
    """Small model for gradient checks: dq=8, dv=16 (dq=dv=16 for elementwise fusion), R=3."""
    fusion = FusionKind.parse(fusion)
    late = FusionKind.parse(late_fusion) if late_fusion is not None else fusion
    kw = dict(
        vocab_size=10, answer_vocab_size=5,
        dq=16 if (fusion.elementwise or late.elementwise) else 8, dv=16, regions=3,
        early_fusion=fusion, late_fusion=late, aggregation=aggregation,
        shared_projection_dims=[16, 16], agg_hidden=4, transformer_layers=2,
        transformer_heads=2, transformer_ffn=16, preclassifier_dims=[8], seed=seed,
    )
    kw.update(overrides)
    return ModelConfig(**kw)


class TransformerAggregator(Module):
    """Encoder stack (no mask) -> mean over regions -> fully connected head."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.late_dim
        self.positions = (
            Tensor(rng.normal(0.0, 0.02, size=(cfg.regions, d)), requires_grad=True, name="positions")
            if cfg.positional_encoding else None
        )
        self.layers = [
            TransformerEncoderLayer(d, cfg.transformer_heads, cfg.transformer_ffn, rng)
            for _ in range(cfg.transformer_layers)
        ]
        self.head = Linear(d, cfg.agg_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        # x: (B, R, d)
        if self.positions is not None:
            x = ad.add(x, ad.broadcast(self.positions, x.shape[0], 0))
        for layer in self.layers:
            x = layer(x)
        return ad.relu(self.head(ad.mean(x, axis=1)))


class RamenModel(Module):
    def __init__(self, cfg: ModelConfig):
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        self.word_embedding = Embedding(cfg.vocab_size, cfg.word_dim, rng)
        self.question_gru = GRUCell(cfg.word_dim, cfg.dq, rng)
        self.early_bn = BatchNorm1d(cfg.early_dim)
        self.shared_projection = MLP([cfg.early_dim] + cfg.shared_projection_dims, rng)
        self.late_bn = BatchNorm1d(cfg.late_dim)
        if cfg.aggregation is AggregationKind.BIGRU:
            self.aggregator = BiGRU(cfg.late_dim, cfg.agg_hidden, rng)
        else:
            self.aggregator = TransformerAggregator(cfg, rng)
        self.preclassifier = MLP([cfg.agg_out] + cfg.preclassifier_dims, rng)
        self.classifier = Linear(cfg.preclassifier_dims[-1], cfg.answer_vocab_size, rng)

    # ---- stages
    def encode_questions(self, token_lists: Sequence[Sequence[int]]) -> Tensor:
        """(B, dq) final hidden states of the question GRU."""
        ids, mask = pad_tokens(token_lists, self.config.vocab_size)
        emb = self.word_embedding(ids)
        states = self.question_gru.scan(emb, mask=None if mask.all() else mask)
        return states[-1]

    def encode_question(self, tokens: Sequence[int]) -> Tensor:
        return ad.reshape(self.encode_questions([tokens]), (self.config.dq,))

    def aggregate(self, late: Tensor) -> Tensor:
        if self.config.aggregation is AggregationKind.BIGRU:
            return self.aggregator(late)[1]
        return self.aggregator(late)

    def forward_batch(self, regions, token_lists: Sequence[Sequence[int]], mode: str = "train") -> Tensor:
        """(B, R, dv) regions and B questions -> (B, answers) raw logits."""
        cfg = self.config
        self.train(mode == "train")
        v = regions if isinstance(regions, Tensor) else Tensor(regions)
        if v.ndim != 3 or v.shape[1:] != (cfg.regions, cfg.dv):
            raise PipelineError("input", ShapeError("regions", v.shape, ("B", cfg.regions, cfg.dv)))
        if v.shape[0] != len(token_lists):
            raise PipelineError("input", ShapeError("batch", (v.shape[0],), (len(token_lists),)))
        with _stage("question encoder"):
            q = self.encode_questions(token_lists)
            qt = tile_question(q, cfg.regions)
        with _stage("early fusion"):
            early = fuse(cfg.early_fusion, qt, v, self.early_bn).matrix
        with _stage("shared projection"):
            bimodal = self.shared_projection(early)
        with _stage("late fusion"):
            late = fuse(cfg.late_fusion, qt, bimodal, self.late_bn).matrix
        with _stage("aggregation"):
            a = self.aggregate(late)
        with _stage("classifier"):
            return self.classifier(self.preclassifier(a))

    def forward(self, regions, tokens: Sequence[int], mode: str = "eval") -> Tensor:
        """Single example: (R, dv) regions -> (answers,) logits."""
        r = regions.data if isinstance(regions, Tensor) else np.asarray(regions, dtype=np.float64)
        if r.ndim != 2:
            raise PipelineError("input", ShapeError("regions", r.shape, (self.config.regions, self.config.dv)))
        out = self.forward_batch(r[None], [tokens], mode)
        return ad.reshape(out, (self.config.answer_vocab_size,))

    def predict(self, regions: np.ndarray, token_lists, batch_size: int = 256) -> np.ndarray:
        """Argmax answer ids in eval mode, without recording."""
        preds = []
        with ad.no_grad():
            for i in range(0, len(token_lists), batch_size):
                logits = self.forward_batch(regions[i:i + batch_size], token_lists[i:i + batch_size], "eval")
                preds.append(logits.data.argmax(axis=1))
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------- checkpoints
#
# Layout (all integers little-endian):
#   b"RAMEN-CKPT 1\n"
#   config as UTF-8 "key:value\n" lines, terminated by an empty line "\n"
#   uint32 tensor count
#   per tensor, in declaration order (parameters and batchnorm running stats):
#       uint32 ndim, ndim x uint32 dims, prod(dims) x float64 values (row-major)

MAGIC = b"RAMEN-CKPT 1\n"


def save_checkpoint(model: RamenModel, path) -> None:
    tensors = [t for _, t in model.named_tensors()]
    parts = [MAGIC]
    parts.append(("\n".join(model.config.to_lines()) + "\n\n").encode("utf-8"))
    parts.append(struct.pack("<I", len(tensors)))
    for t in tensors:
        parts.append(struct.pack("<I", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> RamenModel:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    end = raw.index(b"\n\n", len(MAGIC))
    header = raw[len(MAGIC):end].decode("utf-8").splitlines()
    model = RamenModel(ModelConfig.from_lines(header))
    pos = end + 2
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    tensors = [t for _, t in model.named_tensors()]
    if count != len(tensors):
        raise ValueError(f"{path}: {count} tensors stored, model declares {len(tensors)}")
    for t in tensors:
        (nd,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{nd}I", raw, pos)
        pos += 4 * nd
        if tuple(shape) != t.shape:
            raise ValueError(f"{path}: stored shape {shape} != declared {t.shape}")
        n = int(np.prod(shape)) if nd else 1
        t.data = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes")
    return model
