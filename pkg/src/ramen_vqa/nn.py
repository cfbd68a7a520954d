"""Parameterized layers built on the tape: linear, GRU, batch/layer norm, attention."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


class Module:
    """Parameter container. Parameters and buffers are discovered in attribute order."""

    training = True

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        """All tensors (parameters and running-stat buffers) in declaration order."""
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_tensors(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_tensors(f"{name}.{i}.")

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, t in self.named_tensors(prefix):
            if t.requires_grad:
                yield name, t

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _param(rng: np.random.Generator, shape, fan_in: int, name: str) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def _flatten_rows(x: Tensor, din: int, kind: str) -> tuple[Tensor, tuple]:
    if x.ndim < 1 or x.shape[-1] != din:
        raise ShapeError(kind, x.shape, (din,))
    lead = x.shape[:-1]
    n = int(np.prod(lead)) if lead else 1
    if x.ndim == 2:
        return x, lead
    return ad.reshape(x, (n, din)), lead


def _unflatten_rows(y: Tensor, lead: tuple) -> Tensor:
    if len(lead) == 1:
        return y
    return ad.reshape(y, lead + (y.shape[-1],))


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator):
        self.din, self.dout = din, dout
        self.weight = _param(rng, (dout, din), din, "weight")
        self.bias = _param(rng, (dout,), din, "bias")

    def __call__(self, x: Tensor) -> Tensor:
        x2, lead = _flatten_rows(x, self.din, "linear")
        y = ad.matmul(x2, ad.transpose(self.weight))
        y = ad.add(y, ad.broadcast(self.bias, y.shape[0], 0))
        return _unflatten_rows(y, lead)


class MLP(Module):
    """Stack of Linear layers, each followed by relu."""

    def __init__(self, dims: list[int], rng: np.random.Generator):
        if len(dims) < 2:
            raise ValueError(f"MLP needs at least input and output dims, got {dims}")
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    @property
    def dout(self) -> int:
        return self.layers[-1].dout

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = ad.relu(layer(x))
        return x


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng: np.random.Generator):
        self.table = _param(rng, (num, dim), 1, "table")

    def __call__(self, ids) -> Tensor:
        return ad.embedding(self.table, ids)


class GRUCell(Module):
    """z = s(Wz x + Uz h + bz), r = s(Wr x + Ur h + br),
    n = tanh(Wn x + r * (Un h) + bn), h' = (1 - z) * n + z * h."""

    def __init__(self, din: int, hidden: int, rng: np.random.Generator):
        self.din, self.hidden = din, hidden
        for g in "zrn":
            setattr(self, f"W{g}", _param(rng, (hidden, din), din, f"W{g}"))
        for g in "zrn":
            setattr(self, f"U{g}", _param(rng, (hidden, hidden), hidden, f"U{g}"))
        for g in "zrn":
            setattr(self, f"b{g}", _param(rng, (hidden,), hidden, f"b{g}"))

    def input_projections(self, xs: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Wz x + bz, Wr x + br, Wn x + bn for every row of ``xs`` (N x din) at once."""
        n = xs.shape[0]
        out = []
        for g in "zrn":
            w, b = getattr(self, f"W{g}"), getattr(self, f"b{g}")
            out.append(ad.add(ad.matmul(xs, ad.transpose(w)), ad.broadcast(b, n, 0)))
        return tuple(out)

    def step_projected(self, xz, xr, xn, h: Tensor, Ut=None) -> Tensor:
        """One step given precomputed input projections; batched over rows of ``h``."""
        Uz, Ur, Un = Ut if Ut is not None else self.hidden_transposes()
        z = ad.sigmoid(ad.add(xz, ad.matmul(h, Uz)))
        r = ad.sigmoid(ad.add(xr, ad.matmul(h, Ur)))
        n = ad.tanh(ad.add(xn, ad.mul(r, ad.matmul(h, Un))))
        # (1 - z) * n + z * h  ==  n + z * (h - n)
        return ad.add(n, ad.mul(z, ad.sub(h, n)))

    def hidden_transposes(self):
        return ad.transpose(self.Uz), ad.transpose(self.Ur), ad.transpose(self.Un)

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        vector = x.ndim == 1
        if vector:
            x = ad.reshape(x, (1, x.shape[0]))
            h = ad.reshape(h, (1, h.shape[0]))
        if x.ndim != 2 or x.shape[1] != self.din:
            raise ShapeError("gru_cell(x)", x.shape, (self.din,))
        if h.shape != (x.shape[0], self.hidden):
            raise ShapeError("gru_cell(h)", h.shape, (x.shape[0], self.hidden))
        out = self.step_projected(*self.input_projections(x), h)
        return ad.reshape(out, (self.hidden,)) if vector else out

    def scan(self, seq: Tensor, reverse: bool = False, mask: np.ndarray | None = None) -> list[Tensor]:
        """Run over a (B, T, din) sequence from a zero state; returns per-step states.

        ``mask`` (B, T) of 0/1 freezes the state where 0, for padded batches.
        """
        if seq.ndim != 3 or seq.shape[2] != self.din:
            raise ShapeError("gru_scan", seq.shape, ("B", "T", self.din))
        b, t, _ = seq.shape
        if t < 1:
            raise ValueError("gru_scan: empty sequence")
        flat = ad.reshape(seq, (b * t, self.din))
        projs = [ad.reshape(p, (b, t, self.hidden)) for p in self.input_projections(flat)]
        Ut = self.hidden_transposes()
        h = Tensor(np.zeros((b, self.hidden)))
        states = [None] * t
        order = range(t - 1, -1, -1) if reverse else range(t)
        for i in order:
            step = [ad.reshape(ad.slice_(p, i, i + 1, axis=1), (b, self.hidden)) for p in projs]
            new = self.step_projected(*step, h, Ut)
            if mask is not None and not mask[:, i].all():
                m = np.repeat(mask[:, i:i + 1].astype(np.float64), self.hidden, axis=1)
                new = ad.add(ad.mul(Tensor(m), new), ad.mul(Tensor(1.0 - m), h))
            h = new
            states[i] = h
        return states


class BiGRU(Module):
    def __init__(self, din: int, hidden: int, rng: np.random.Generator):
        self.hidden = hidden
        self.fwd = GRUCell(din, hidden, rng)
        self.bwd = GRUCell(din, hidden, rng)

    def __call__(self, seq: Tensor) -> tuple[Tensor, Tensor]:
        """(T, din) or (B, T, din) -> (outputs (.., T, 2h), final (.., 2h)).

        final = [forward state after step T, backward state after step 1].
        """
        single = seq.ndim == 2
        if single:
            seq = ad.reshape(seq, (1,) + seq.shape)
        if seq.ndim != 3 or seq.shape[1] < 1:
            raise ValueError(f"bigru: need a non-empty sequence, got shape {seq.shape}")
        b, t = seq.shape[:2]
        hf = self.fwd.scan(seq)
        hb = self.bwd.scan(seq, reverse=True)
        rows = [ad.reshape(ad.concat([f, r]), (b, 1, 2 * self.hidden)) for f, r in zip(hf, hb)]
        outputs = rows[0] if t == 1 else ad.concat(rows, axis=1)
        final = ad.concat([hf[-1], hb[0]])
        if single:
            outputs = ad.reshape(outputs, (t, 2 * self.hidden))
            final = ad.reshape(final, (2 * self.hidden,))
        return outputs, final


class BatchNorm1d(Module):
    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        self.dim = dim
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(dim), requires_grad=True, name="gamma")
        self.beta = Tensor(np.zeros(dim), requires_grad=True, name="beta")
        self.running_mean = Tensor(np.zeros(dim), name="running_mean")
        self.running_var = Tensor(np.ones(dim), name="running_var")

    def normalize(self, x: Tensor) -> Tensor:
        """Pre-affine output; updates running stats in train mode."""
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeError("batchnorm", x.shape, ("n", self.dim))
        n = x.shape[0]
        if self.training:
            if n < 2:
                raise ValueError("batchnorm: train mode needs at least 2 rows")
            mu = ad.mean(x, axis=0)
            xc = ad.sub(x, ad.broadcast(mu, n, 0))
            var = ad.mean(ad.mul(xc, xc), axis=0)
            std = ad.sqrt(ad.add(var, Tensor(np.full(self.dim, self.eps))))
            m = self.momentum
            self.running_mean.data = (1 - m) * self.running_mean.data + m * mu.data
            self.running_var.data = (1 - m) * self.running_var.data + m * var.data * (n / (n - 1))
            return ad.div(xc, ad.broadcast(std, n, 0))
        mu = Tensor(np.broadcast_to(self.running_mean.data, x.shape))
        std = Tensor(np.broadcast_to(np.sqrt(self.running_var.data + self.eps), x.shape))
        return ad.div(ad.sub(x, mu), std)

    def __call__(self, x: Tensor) -> Tensor:
        xhat = self.normalize(x)
        n = x.shape[0]
        return ad.add(ad.mul(xhat, ad.broadcast(self.gamma, n, 0)), ad.broadcast(self.beta, n, 0))


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.dim = dim
        self.eps = eps
        self.gamma = Tensor(np.ones(dim), requires_grad=True, name="gamma")
        self.beta = Tensor(np.zeros(dim), requires_grad=True, name="beta")

    def __call__(self, x: Tensor) -> Tensor:
        x2, lead = _flatten_rows(x, self.dim, "layernorm")
        n, d = x2.shape
        mu = ad.broadcast(ad.mean(x2, axis=1), d, axis=1)
        xc = ad.sub(x2, mu)
        var = ad.mean(ad.mul(xc, xc), axis=1)
        std = ad.sqrt(ad.add(var, Tensor(np.full(n, self.eps))))
        y = ad.div(xc, ad.broadcast(std, d, axis=1))
        y = ad.add(ad.mul(y, ad.broadcast(self.gamma, n, 0)), ad.broadcast(self.beta, n, 0))
        return _unflatten_rows(y, lead)


class MultiHeadAttention(Module):
    """Unmasked scaled dot-product self-attention; every position sees every position."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"attention: model dim {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.head_dim = dim // heads
        self.query = Linear(dim, dim, rng)
        self.key = Linear(dim, dim, rng)
        self.value = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)
        self.last_weights: list[np.ndarray] = []

    def __call__(self, x: Tensor) -> Tensor:
        single = x.ndim == 2
        if single:
            x = ad.reshape(x, (1,) + x.shape)
        if x.ndim != 3 or x.shape[-1] != self.dim:
            raise ShapeError("attention", x.shape, ("R", self.dim))
        q, k, v = self.query(x), self.key(x), self.value(x)
        inv = 1.0 / math.sqrt(self.head_dim)
        heads, self.last_weights = [], []
        for h in range(self.heads):
            lo, hi = h * self.head_dim, (h + 1) * self.head_dim
            qh, kh, vh = (ad.slice_(t, lo, hi) for t in (q, k, v))
            scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), inv)
            w = ad.softmax(scores)
            self.last_weights.append(w.data)
            heads.append(ad.matmul(w, vh))
        y = self.out(heads[0] if self.heads == 1 else ad.concat(heads))
        return ad.reshape(y, y.shape[1:]) if single else y


class TransformerEncoderLayer(Module):
    """Post-norm: y = LN(x + MHA(x)); out = LN(y + FFN(y))."""

    def __init__(self, dim: int, heads: int, ffn_dim: int, rng: np.random.Generator):
        self.dim = dim
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.ff1 = Linear(dim, ffn_dim, rng)
        self.ff2 = Linear(ffn_dim, dim, rng)
        self.norm1 = LayerNorm(dim)
        self.norm2 = LayerNorm(dim)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.dim:
            raise ShapeError("transformer_encoder", x.shape, ("R", self.dim))
        y = self.norm1(ad.add(x, self.attn(x)))
        return self.norm2(ad.add(y, self.ff2(ad.relu(self.ff1(y)))))
