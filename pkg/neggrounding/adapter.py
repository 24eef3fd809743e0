"""Rectified low-rank adapter kernel.

``y = W x + alpha * B relu(A x)`` with ``W`` frozen. ``B`` starts at zero so a
fresh layer is exactly its base projection. Gradients are analytic; callers
that accumulate into a layer's buffers must not share that layer across
threads.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from . import embio
from .errors import (
    DimensionMismatch,
    FormatError,
    MalformedConfig,
    RowNotNormalized,
    ShapeMismatch,
    UnknownScheme,
)

logger = logging.getLogger(__name__)

DEFAULT_RANK = 4
DEFAULT_ALPHA = 1.0


class Scheme(str, Enum):
    SHALLOW = "shallow"
    STRIDED = "strided"
    DEEP = "deep"


PLACEMENTS = {
    Scheme.SHALLOW: (0, 1, 2),
    Scheme.STRIDED: (1, 3, 5),
    Scheme.DEEP: (3, 4, 5),
}


def placement(scheme: str | Scheme) -> tuple[int, ...]:
    try:
        return PLACEMENTS[Scheme(scheme)]
    except ValueError:
        raise UnknownScheme(f"unknown placement scheme {scheme!r}; expected one of "
                            f"{', '.join(s.value for s in Scheme)}") from None


@dataclass(frozen=True)
class PlacementConfig:
    scheme: Scheme = Scheme.DEEP

    @property
    def block_indices(self) -> tuple[int, ...]:
        return placement(self.scheme)


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def relu_grad(z: np.ndarray) -> np.ndarray:
    # subgradient 0 at the kink
    return (z > 0).astype(z.dtype)


@dataclass
class LoraGradients:
    A: np.ndarray
    B: np.ndarray


@dataclass
class LoraLinear:
    W: np.ndarray
    A: np.ndarray
    B: np.ndarray
    alpha: float = DEFAULT_ALPHA
    grad_A: np.ndarray = field(init=False, repr=False)
    grad_B: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        W = np.array(self.W, dtype=np.float64)
        A = np.array(self.A, dtype=np.float64)
        B = np.array(self.B, dtype=np.float64)
        if W.ndim != 2 or A.ndim != 2 or B.ndim != 2:
            raise DimensionMismatch("W, A and B must be matrices")
        d_out, d_in = W.shape
        r = A.shape[0]
        if A.shape != (r, d_in) or B.shape != (d_out, r):
            raise DimensionMismatch(
                f"shapes W{W.shape} A{A.shape} B{B.shape} do not compose"
            )
        if r < 1 or r > min(d_in, d_out):
            raise DimensionMismatch(f"rank {r} must be in [1, {min(d_in, d_out)}]")
        W.setflags(write=False)
        self.W, self.A, self.B = W, A, B
        self.zero_grad()

    @classmethod
    def init(cls, W, rank: int = DEFAULT_RANK, alpha: float = DEFAULT_ALPHA, rng=None) -> "LoraLinear":
        """Fresh adapter around ``W``: A ~ U(-1/sqrt(d), 1/sqrt(d)), B = 0."""
        rng = np.random.default_rng(rng)
        W = np.asarray(W, dtype=np.float64)
        d_out, d_in = W.shape
        bound = 1.0 / np.sqrt(d_in)
        A = rng.uniform(-bound, bound, size=(rank, d_in))
        B = np.zeros((d_out, rank))
        return cls(W=W, A=A, B=B, alpha=alpha)

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def d(self) -> int:
        return self.W.shape[1]

    def _check_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1:] != (self.d,) or x.ndim > 2:
            raise DimensionMismatch(f"input shape {x.shape} does not end in ({self.d},)")
        return x

    def forward(self, x) -> np.ndarray:
        """Accepts one vector or an (N, d) batch."""
        x = self._check_input(x)
        return x @ self.W.T + self.alpha * relu(x @ self.A.T) @ self.B.T

    def backward(self, x, g) -> LoraGradients:
        """Gradients of ``<g, forward(x)>`` with respect to A and B, summed over a batch."""
        x = self._check_input(x)
        g = np.asarray(g, dtype=np.float64)
        if g.shape[:-1] != x.shape[:-1] or g.shape[-1] != self.W.shape[0]:
            raise DimensionMismatch(f"upstream gradient shape {g.shape} does not match output")
        X = np.atleast_2d(x)
        G = np.atleast_2d(g)
        Z = X @ self.A.T
        grad_B = self.alpha * G.T @ relu(Z)
        grad_A = self.alpha * ((G @ self.B) * relu_grad(Z)).T @ X
        return LoraGradients(A=grad_A, B=grad_B)

    def accumulate(self, grads: LoraGradients) -> None:
        self.grad_A += grads.A
        self.grad_B += grads.B

    def zero_grad(self) -> None:
        self.grad_A = np.zeros_like(self.A)
        self.grad_B = np.zeros_like(self.B)

    def step(self, lr: float) -> None:
        self.A -= lr * self.grad_A
        self.B -= lr * self.grad_B
        self.zero_grad()

    def base_digest(self) -> str:
        return hashlib.sha256(self.W.tobytes()).hexdigest()


@dataclass
class QVAdapterPair:
    """Query and value adapters of one cross-attention block."""

    query: LoraLinear
    value: LoraLinear

    @classmethod
    def init(cls, W_q, W_v, rank: int = DEFAULT_RANK, alpha: float = DEFAULT_ALPHA, rng=None) -> "QVAdapterPair":
        rng = np.random.default_rng(rng)
        return cls(
            query=LoraLinear.init(W_q, rank, alpha, rng),
            value=LoraLinear.init(W_v, rank, alpha, rng),
        )

    def forward(self, x) -> tuple[np.ndarray, np.ndarray]:
        return self.query.forward(x), self.value.forward(x)


def fit_toy(layer: LoraLinear, X, Y, lr: float = 0.05, steps: int = 200) -> list[float]:
    """Fit the adapter so ``forward(X)`` regresses onto ``Y`` (mean squared error)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    losses = []
    for _ in range(steps):
        residual = layer.forward(X) - Y
        losses.append(float(0.5 * np.mean(np.sum(residual**2, axis=1))))
        layer.accumulate(layer.backward(X, residual / X.shape[0]))
        layer.step(lr)
    logger.debug("toy fit: loss %.6g -> %.6g over %d steps", losses[0], losses[-1], steps)
    return losses


def _relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def numeric_gradients(layer: LoraLinear, x, g, step: float = 1e-5) -> LoraGradients:
    """Central finite differences of ``<g, forward(x)>`` with respect to A and B."""
    g = np.asarray(g, dtype=np.float64)

    def objective() -> float:
        return float(np.sum(g * layer.forward(x)))

    grads = {}
    for name in ("A", "B"):
        param = getattr(layer, name)
        out = np.zeros_like(param)
        for idx in np.ndindex(param.shape):
            saved = param[idx]
            param[idx] = saved + step
            plus = objective()
            param[idx] = saved - step
            minus = objective()
            param[idx] = saved
            out[idx] = (plus - minus) / (2 * step)
        grads[name] = out
    return LoraGradients(**grads)


def random_layer(rng, d: int, r: int, alpha: float | None = None) -> LoraLinear:
    """A layer with non-zero B, for exercising the gradient paths."""
    return LoraLinear(
        W=rng.normal(size=(d, d)),
        A=rng.normal(size=(r, d)),
        B=rng.normal(size=(d, r)),
        alpha=float(rng.uniform(0.5, 2.0)) if alpha is None else alpha,
    )


def gradient_check(trials: int = 50, max_d: int = 8, max_r: int = 4, step: float = 1e-5,
                   kink_margin: float = 1e-3, seed: int = 0) -> float:
    """Max relative error between analytic and numeric gradients over random layers.

    Inputs whose pre-activations fall within ``kink_margin`` of zero are
    redrawn, so every finite-difference probe stays on one side of the kink.
    """
    if max_d < 2 or max_r < 1:
        raise MalformedConfig(f"gradient check needs max_d >= 2 and max_r >= 1, got {max_d} and {max_r}")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        d = int(rng.integers(2, max_d + 1))
        r = int(rng.integers(1, min(max_r, d) + 1))
        layer = random_layer(rng, d, r)
        while True:
            x = rng.normal(size=d)
            if np.min(np.abs(layer.A @ x)) > kink_margin:
                break
        g = rng.normal(size=d)
        analytic = layer.backward(x, g)
        numeric = numeric_gradients(layer, x, g, step)
        worst = max(worst, _relative_error(analytic.A, numeric.A), _relative_error(analytic.B, numeric.B))
    return worst


@dataclass(frozen=True)
class AttentionDiagnostics:
    per_class: dict[str, float]
    per_block: list[dict[str, float]]

    def to_dict(self) -> dict:
        return {"per_class": self.per_class, "per_block": self.per_block}


def attention_by_class(attn, classes: Sequence, tol: float = 1e-4) -> AttentionDiagnostics:
    """Mean attention weight per word class, per block and overall.

    ``attn`` is a sequence of (queries, tokens) matrices, one per decoder
    block. Means run over every (query, token) entry whose token has the
    class, i.e. over heads/queries already flattened into rows.
    """
    labels = [getattr(c, "value", c) for c in classes]
    blocks = [np.asarray(a, dtype=np.float64) for a in attn]
    if not blocks:
        raise ShapeMismatch("no attention blocks given")
    for b, block in enumerate(blocks):
        if block.ndim != 2 or block.shape[1] != len(labels):
            raise ShapeMismatch(
                f"block {b} has shape {block.shape}, expected (queries, {len(labels)})"
            )
        if block.shape[0] == 0 or block.shape[1] == 0:
            raise ShapeMismatch(f"block {b} has shape {block.shape}; every block needs a query row and a token")
        if np.any(block < 0) or not np.allclose(block.sum(axis=1), 1.0, atol=tol, rtol=0):
            raise RowNotNormalized(f"block {b} has rows that are not attention distributions")

    names = sorted(set(labels))
    label_arr = np.array(labels)
    per_block = []
    sums = {name: 0.0 for name in names}
    counts = {name: 0 for name in names}
    for block in blocks:
        means = {}
        for name in names:
            cols = block[:, label_arr == name]
            means[name] = float(cols.mean())
            sums[name] += float(cols.sum())
            counts[name] += cols.size
        per_block.append(means)
    per_class = {name: sums[name] / counts[name] for name in names}
    return AttentionDiagnostics(per_class=per_class, per_block=per_block)


def save_checkpoint(layer: LoraLinear, path: str | Path) -> None:
    """Write a JSON header line, then W, A and B as EMB1 blocks.

    EMB1 stores float32, so a reload matches the float64 layer only to
    float32 precision.
    """
    header = {"d": layer.d, "r": layer.rank, "alpha": layer.alpha}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        for matrix in (layer.W, layer.A, layer.B):
            embio.write_block(fh, matrix)


def load_checkpoint(path: str | Path) -> LoraLinear:
    """Read a checkpoint from :func:`save_checkpoint`; matrices come back float32-rounded."""
    with open(path, "rb") as fh:
        try:
            header = json.loads(fh.readline().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"{path}: bad checkpoint header: {e}") from e
        blocks = list(embio.iter_blocks(fh))
    if len(blocks) != 3:
        raise FormatError(f"{path}: expected 3 blocks (W, A, B), found {len(blocks)}")
    W, A, B = blocks
    layer = LoraLinear(W=W, A=A, B=B, alpha=float(header["alpha"]))
    if layer.d != header["d"] or layer.rank != header["r"]:
        raise FormatError(f"{path}: header {header} disagrees with stored matrices")
    return layer
