"""Small next-token models with analytic gradients.

Two kinds share one flat-parameter representation:

``logistic``
    Softmax regression on the one-hot previous token: ``logits = W[ctx] + b``.
    Convex in its parameters.
``bigram``
    Neural bigram LM: ``logits = E[ctx] @ O + b`` with a ``dim``-wide embedding.

The context vocabulary is extended by one begin-of-sequence id (``V``) that
precedes every utterance, so an utterance of ``L`` tokens yields ``L``
(context, target) pairs. Losses are mean cross-entropy in nats.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .population import DeviceShard, Utterance, atomic_write_bytes

KINDS = ("logistic", "bigram")


def param_layout(kind: str, vocab_size: int, dim: int) -> list[tuple[str, tuple[int, ...]]]:
    if kind == "logistic":
        return [("weight", (vocab_size + 1, vocab_size)), ("bias", (vocab_size,))]
    if kind == "bigram":
        return [
            ("embedding", (vocab_size + 1, dim)),
            ("output", (dim, vocab_size)),
            ("bias", (vocab_size,)),
        ]
    raise ValueError(f"unknown model kind {kind!r}; expected one of {KINDS}")


@dataclass(frozen=True, eq=False)
class ModelParams:
    kind: str
    vocab_size: int
    dim: int
    values: np.ndarray

    @property
    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        return param_layout(self.kind, self.vocab_size, self.dim)

    @property
    def size(self) -> int:
        return int(self.values.size)

    def views(self, values: np.ndarray | None = None) -> dict[str, np.ndarray]:
        """Named reshaped views into ``values`` (defaults to this object's vector)."""
        flat = self.values if values is None else values
        out, offset = {}, 0
        for name, shape in self.layout:
            n = math.prod(shape)
            out[name] = flat[offset:offset + n].reshape(shape)
            offset += n
        return out

    def replace(self, values: np.ndarray) -> "ModelParams":
        return ModelParams(self.kind, self.vocab_size, self.dim, values)

    def same_layout(self, other: "ModelParams") -> bool:
        return (
            self.kind == other.kind
            and self.vocab_size == other.vocab_size
            and self.dim == other.dim
            and self.values.shape == other.values.shape
        )

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return self.same_layout(other) and np.array_equal(self.values, other.values)


@dataclass(frozen=True, eq=False)
class Batch:
    """(context, target) pairs. Context ids live in ``[0, V]`` where ``V`` is BOS."""

    context: np.ndarray
    target: np.ndarray

    def __len__(self) -> int:
        return int(self.target.size)

    @classmethod
    def from_utterances(cls, utterances: Iterable[Utterance | Sequence[int]], vocab_size: int) -> "Batch":
        ctx: list[int] = []
        tgt: list[int] = []
        for utt in utterances:
            tokens = utt.tokens if isinstance(utt, Utterance) else tuple(utt)
            ctx.append(vocab_size)
            ctx.extend(tokens[:-1])
            tgt.extend(tokens)
        return cls(np.asarray(ctx, dtype=np.int64), np.asarray(tgt, dtype=np.int64))

    def take(self, idx: np.ndarray) -> "Batch":
        return Batch(self.context[idx], self.target[idx])

    def repeat(self, times: int) -> "Batch":
        return Batch(np.tile(self.context, times), np.tile(self.target, times))


def init_params(kind: str, vocab_size: int, dim: int, seed: int) -> ModelParams:
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if vocab_size < 2:
        raise ValueError("vocab_size must be >= 2")
    layout = param_layout(kind, vocab_size, dim)
    rng = np.random.default_rng(seed)
    parts = []
    for name, shape in layout:
        if name == "bias":
            parts.append(np.zeros(shape))
        elif name == "weight":
            parts.append(rng.uniform(-0.01, 0.01, size=shape))
        else:
            scale = 1.0 / math.sqrt(shape[0] if name == "output" else dim)
            parts.append(rng.uniform(-scale, scale, size=shape))
    values = np.concatenate([p.ravel() for p in parts])
    return ModelParams(kind, vocab_size, dim, values)


def _as_batch(data, vocab_size: int) -> Batch:
    if isinstance(data, Batch):
        return data
    if isinstance(data, DeviceShard):
        return Batch.from_utterances(data.utterances, vocab_size)
    return Batch.from_utterances(data, vocab_size)


def _check(params: ModelParams, batch: Batch) -> None:
    if len(batch) == 0:
        raise ValueError("batch is empty")
    if not np.all(np.isfinite(params.values)):
        raise ValueError("parameters contain non-finite values")


def _logits(params: ModelParams, values: np.ndarray, context: np.ndarray):
    v = params.views(values)
    if params.kind == "logistic":
        return v["weight"][context] + v["bias"], None
    hidden = v["embedding"][context]
    return hidden @ v["output"] + v["bias"], hidden


def _nll_terms(logits: np.ndarray, target: np.ndarray):
    shift = logits.max(axis=1, keepdims=True)
    exp = np.exp(logits - shift)
    total = exp.sum(axis=1, keepdims=True)
    log_norm = np.log(total) + shift
    nll = log_norm[:, 0] - logits[np.arange(target.size), target]
    return nll, exp / total


def _backward(kind: str, views: dict[str, np.ndarray], context: np.ndarray, target: np.ndarray):
    """Mean loss and per-block gradients for one minibatch."""
    n = target.size
    rows = np.arange(n)
    if kind == "logistic":
        z = views["weight"][context] + views["bias"]
    else:
        hidden = views["embedding"][context]
        z = hidden @ views["output"]
        z += views["bias"]
    z -= z.max(axis=1, keepdims=True)
    picked = z[rows, target]
    np.exp(z, out=z)
    total = z.sum(axis=1)
    mean_loss = float(np.mean(np.log(total) - picked))
    z /= total[:, None]
    z[rows, target] -= 1.0
    z /= n
    grads = {"bias": z.sum(axis=0)}
    if kind == "logistic":
        g_w = np.zeros_like(views["weight"])
        np.add.at(g_w, context, z)
        grads["weight"] = g_w
    else:
        grads["output"] = hidden.T @ z
        g_e = np.zeros_like(views["embedding"])
        np.add.at(g_e, context, z @ views["output"].T)
        grads["embedding"] = g_e
    return mean_loss, grads


def _loss_and_grad(params: ModelParams, values: np.ndarray, batch: Batch):
    mean_loss, grads = _backward(params.kind, params.views(values), batch.context, batch.target)
    grad = np.zeros_like(values)
    for name, block in params.views(grad).items():
        block[...] = grads[name]
    return mean_loss, grad


def total_nll(params: ModelParams, data) -> tuple[float, int]:
    """Summed negative log-likelihood (nats) and number of predicted tokens."""
    batch = _as_batch(data, params.vocab_size)
    _check(params, batch)
    logits, _ = _logits(params, params.values, batch.context)
    nll, _ = _nll_terms(logits, batch.target)
    # correctly rounded sum: the total does not depend on example order
    return math.fsum(nll.tolist()), len(batch)


def loss(params: ModelParams, data) -> float:
    total, count = total_nll(params, data)
    return total / count


def grad(params: ModelParams, data) -> np.ndarray:
    batch = _as_batch(data, params.vocab_size)
    _check(params, batch)
    return _loss_and_grad(params, params.values, batch)[1]


def sgd_epoch_with_loss(
    params: ModelParams,
    data,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
) -> tuple[ModelParams, float]:
    """One shuffled pass of minibatch SGD; also returns the mean minibatch loss."""
    if lr < 0:
        raise ValueError("learning rate must be >= 0")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    batch = _as_batch(data, params.vocab_size)
    if len(batch) == 0:
        raise ValueError("cannot train on an empty shard")
    _check(params, batch)
    values = params.values.copy()
    views = params.views(values)
    order = rng.permutation(len(batch))
    losses = []
    for start in range(0, len(batch), batch_size):
        # canonical order inside a batch: a single full batch is bitwise one GD step
        idx = np.sort(order[start:start + batch_size])
        value, grads = _backward(params.kind, views, batch.context[idx], batch.target[idx])
        # all blocks are read before any is written
        for name, g in grads.items():
            views[name] -= lr * g
        losses.append(value)
    return params.replace(values), float(np.mean(losses))


def sgd_epoch(params: ModelParams, data, lr: float, batch_size: int, rng: np.random.Generator) -> ModelParams:
    return sgd_epoch_with_loss(params, data, lr, batch_size, rng)[0]


def perplexity(params: ModelParams, utterances) -> float:
    """exp(total NLL / total predicted tokens), pooled over all utterances."""
    total, count = total_nll(params, utterances)
    return math.exp(total / count)


def grad_check(
    params: ModelParams,
    data,
    epsilon: float = 1e-5,
    seed: int = 0,
    max_coords: int = 200,
    full_limit: int = 10_000,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Every coordinate is checked up to ``full_limit`` parameters, otherwise a
    seeded random subsample of ``max_coords`` coordinates. The per-coordinate
    denominator is floored at ``1e-3 * max|analytic|`` so that coordinates with
    near-zero gradient are judged against the roundoff of the loss, not against 0.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    if params.size == 0:
        raise ValueError("no parameters to check")
    batch = _as_batch(data, params.vocab_size)
    analytic = grad(params, batch)
    if params.size > full_limit:
        rng = np.random.default_rng(seed)
        coords = np.sort(rng.choice(params.size, size=max_coords, replace=False))
    else:
        coords = np.arange(params.size)
    floor = max(1e-3 * float(np.abs(analytic).max()), 1e-8)
    worst = 0.0
    for i in coords:
        plus = params.values.copy()
        minus = params.values.copy()
        plus[i] += epsilon
        minus[i] -= epsilon
        numeric = (loss(params.replace(plus), batch) - loss(params.replace(minus), batch)) / (2 * epsilon)
        denom = max(abs(numeric), abs(analytic[i]), floor)
        worst = max(worst, abs(numeric - analytic[i]) / denom)
    return worst


# -- checkpoints --------------------------------------------------------------

def checkpoint_bytes(params: ModelParams) -> bytes:
    header = {
        "kind": params.kind,
        "vocab_size": params.vocab_size,
        "dim": params.dim,
        "layout": [[name, list(shape)] for name, shape in params.layout],
    }
    head = json.dumps(header, separators=(",", ":")).encode("utf-8") + b"\n"
    return head + params.values.astype("<f8").tobytes()


def save_checkpoint(params: ModelParams, path: str | os.PathLike) -> None:
    atomic_write_bytes(path, checkpoint_bytes(params))


def load_checkpoint(path: str | os.PathLike) -> ModelParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    head, sep, body = raw.partition(b"\n")
    if not sep:
        raise ValueError(f"{path}: missing checkpoint header")
    header = json.loads(head)
    layout = param_layout(header["kind"], header["vocab_size"], header["dim"])
    if [[n, list(s)] for n, s in layout] != header["layout"]:
        raise ValueError(f"{path}: layout does not match kind/vocab_size/dim")
    values = np.frombuffer(body, dtype="<f8").astype(np.float64)
    expected = sum(math.prod(s) for _, s in layout)
    if values.size != expected:
        raise ValueError(f"{path}: expected {expected} values, found {values.size}")
    return ModelParams(header["kind"], header["vocab_size"], header["dim"], values)
