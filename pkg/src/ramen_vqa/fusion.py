"""Early/late fusion of the tiled question embedding with per-region vectors.

    concat          c_i = BN([q_i, v_i])
    additive        c_i = BN(v_i + q_i)
    multiplicative  c_i = BN(q_i * v_i)
    question        c_i = BN([q_i, v_i, q_i])

The same ``fuse`` serves both stages; late fusion passes the bimodal
embedding in place of the region features.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nn import BatchNorm1d

# regions per image used by the two dataset families
VQA_REGIONS = 36
CLEVR_REGIONS = 15


class FusionKind(str, enum.Enum):
    CONCAT = "concat"
    ADDITIVE = "additive"
    MULTIPLICATIVE = "multiplicative"
    QUESTION = "question"

    @classmethod
    def parse(cls, value: "str | FusionKind") -> "FusionKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            choices = ", ".join(k.value for k in cls)
            raise ValueError(f"unknown fusion kind {value!r}; expected one of {choices}") from None

    @property
    def elementwise(self) -> bool:
        return self in (FusionKind.ADDITIVE, FusionKind.MULTIPLICATIVE)


class DimensionError(ValueError):
    pass


def fused_dim(kind: FusionKind | str, dq: int, dv: int) -> int:
    kind = FusionKind.parse(kind)
    if kind.elementwise and dq != dv:
        raise DimensionError(
            f"{kind.value} fusion needs question dim == visual dim, got dq={dq}, dv={dv}"
        )
    return {
        FusionKind.CONCAT: dq + dv,
        FusionKind.ADDITIVE: dv,
        FusionKind.MULTIPLICATIVE: dv,
        FusionKind.QUESTION: 2 * dq + dv,
    }[kind]


def tile_question(q: Tensor, regions: int) -> Tensor:
    """Repeat the question embedding once per region: (dq,) -> (R, dq), (B, dq) -> (B, R, dq)."""
    if regions < 1:
        raise ValueError(f"tile_question: region count must be >= 1, got {regions}")
    if q.ndim == 1:
        return ad.broadcast_row(q, regions)
    if q.ndim == 2:
        return ad.broadcast(q, regions, axis=1)
    raise ShapeError("tile_question", q.shape)


@dataclass
class FusedBatch:
    matrix: Tensor
    kind: FusionKind


def combine(kind: FusionKind, qt: Tensor, v: Tensor) -> Tensor:
    """The fusion operator without normalization."""
    if kind is FusionKind.CONCAT:
        return ad.concat([qt, v])
    if kind is FusionKind.ADDITIVE:
        return ad.add(v, qt)
    if kind is FusionKind.MULTIPLICATIVE:
        return ad.mul(qt, v)
    return ad.concat([qt, v, qt])


def fuse(kind: FusionKind | str, qt: Tensor, v: Tensor, bn: BatchNorm1d) -> FusedBatch:
    """Fuse (.., R, dq) tiled question with (.., R, dv) features, then batch-normalize.

    All rows of the input (every region of every example) form one
    normalization population.
    """
    kind = FusionKind.parse(kind)
    if qt.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"fuse[{kind.value}]", qt.shape, v.shape)
    width = fused_dim(kind, qt.shape[-1], v.shape[-1])
    if bn.dim != width:
        raise ShapeError(f"fuse[{kind.value}] batchnorm", (bn.dim,), (width,))
    c = combine(kind, qt, v)
    lead = c.shape[:-1]
    if len(lead) == 1:
        return FusedBatch(bn(c), kind)
    rows = ad.reshape(c, (-1, width))
    return FusedBatch(ad.reshape(bn(rows), lead + (width,)), kind)
