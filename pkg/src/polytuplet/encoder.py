"""Desk-scale trainable text encoders with exact manual backpropagation.

Two independently trainable paths (context and result) share one
architecture: hashed bag-of-n-grams -> linear -> ReLU -> inverted dropout
-> linear -> unit-sphere projection. The result path is index-blind: the
B x N answer grid is flattened row-major so every row is encoded with no
knowledge of its position or siblings. The interface (text in, unit
embedding out, embedding gradient in, parameter gradient out) is the seam
where a heavyweight backbone could be substituted.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import McqaInstance
from .kernels import csr_matmul, csr_weight_grad
from .manifold import EmbeddingBatch, project_to_sphere, project_to_sphere_backward

_TOKEN_RE = re.compile(r"[a-z0-9]+")

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture hyperparameters shared by both paths."""

    vocab_dim: int = 4096
    n_gram: int = 1
    hidden_dim: int = 128
    embed_dim: int = 64
    dropout_rate: float = 0.1
    normalize_features: bool = True

    def __post_init__(self) -> None:
        if self.vocab_dim < 8:
            raise ValueError(f"vocab_dim must be >= 8, got {self.vocab_dim}")
        if self.n_gram not in (1, 2):
            raise ValueError(f"n_gram must be 1 or 2, got {self.n_gram}")
        if self.hidden_dim < 1 or self.embed_dim < 1:
            raise ValueError("hidden_dim and embed_dim must be >= 1")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


@dataclass
class TokenizedText:
    """Sparse hashed token counts: sorted bucket indices with their counts."""

    indices: np.ndarray
    values: np.ndarray
    dim: int

    def to_dense(self) -> np.ndarray:
        dense = np.zeros(self.dim, dtype=np.float64)
        dense[self.indices] = self.values
        return dense


def _bucket(token: str, vocab_dim: int) -> int:
    # blake2b is seedless and stable across runs and platforms; the builtin
    # hash() is salted per process and would break determinism
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % vocab_dim


def tokenize(text: str, vocab_dim: int, n_gram: int = 1) -> TokenizedText:
    """Hash lowercased word (and optional bigram) counts into vocab_dim buckets.

    Empty text yields the zero vector; the sphere projection downstream
    rejects an embedding that stays at zero through the network.
    """
    if vocab_dim < 8:
        raise ValueError(f"vocab_dim must be >= 8, got {vocab_dim}")
    if n_gram not in (1, 2):
        raise ValueError(f"n_gram must be 1 or 2, got {n_gram}")
    tokens = _TOKEN_RE.findall(text.lower())
    if n_gram == 2:
        tokens = tokens + [f"{a}_{b}" for a, b in zip(tokens, tokens[1:])]
    counts: dict[int, float] = {}
    for tok in tokens:
        b = _bucket(tok, vocab_dim)
        counts[b] = counts.get(b, 0.0) + 1.0
    indices = np.array(sorted(counts), dtype=np.int64)
    values = np.array([counts[i] for i in indices], dtype=np.float64)
    return TokenizedText(indices=indices, values=values, dim=vocab_dim)


def flatten_index_blind(batch_results: Sequence[Sequence]) -> tuple[list, tuple[int, int]]:
    """Flatten a rectangular B x N grid row-major into B*N independent items."""
    if not batch_results:
        return [], (0, 0)
    n = len(batch_results[0])
    flat = []
    for row in batch_results:
        if len(row) != n:
            raise ValueError(f"ragged input: row of length {len(row)}, expected {n}")
        flat.extend(row)
    return flat, (len(batch_results), n)


def unflatten(flat: Sequence, shape: tuple[int, int]) -> list[list]:
    b, n = shape
    if len(flat) != b * n:
        raise ValueError(f"cannot unflatten {len(flat)} items into shape {shape}")
    return [list(flat[i * n : (i + 1) * n]) for i in range(b)]


@dataclass
class CsrBatch:
    """Row-compressed batch of sparse feature vectors."""

    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray
    dim: int

    @property
    def n_rows(self) -> int:
        return len(self.indptr) - 1

    @classmethod
    def from_tokenized(cls, rows: Sequence[TokenizedText], dim: int) -> "CsrBatch":
        indptr = np.zeros(len(rows) + 1, dtype=np.int64)
        for i, row in enumerate(rows):
            indptr[i + 1] = indptr[i] + len(row.indices)
        if rows:
            indices = np.concatenate([r.indices for r in rows])
            values = np.concatenate([r.values for r in rows])
        else:
            indices = np.zeros(0, dtype=np.int64)
            values = np.zeros(0, dtype=np.float64)
        return cls(indptr=indptr, indices=indices.astype(np.int64), values=values.astype(np.float64), dim=dim)

    def take_rows(self, rows: np.ndarray) -> "CsrBatch":
        starts = self.indptr[rows]
        stops = self.indptr[rows + 1]
        lengths = stops - starts
        indptr = np.zeros(len(rows) + 1, dtype=np.int64)
        np.cumsum(lengths, out=indptr[1:])
        gather = np.concatenate([np.arange(a, b) for a, b in zip(starts, stops)]) if len(rows) else np.zeros(0, dtype=np.int64)
        return CsrBatch(indptr, self.indices[gather], self.values[gather], self.dim)

    def l2_normalized(self) -> "CsrBatch":
        """Row-normalize values; zero rows stay zero."""
        values = self.values.copy()
        for r in range(self.n_rows):
            sl = slice(self.indptr[r], self.indptr[r + 1])
            norm = np.sqrt(np.sum(values[sl] ** 2))
            if norm > 0:
                values[sl] /= norm
        return CsrBatch(self.indptr, self.indices, values, self.dim)


@dataclass
class PathParams:
    """One encoder path: vocab -> hidden -> embedding, two affine layers."""

    w_in: np.ndarray
    b_in: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray

    def copy(self) -> "PathParams":
        return PathParams(self.w_in.copy(), self.b_in.copy(), self.w_out.copy(), self.b_out.copy())


@dataclass
class EncoderParams:
    """Full parameter set: independent context and result paths plus config."""

    config: EncoderConfig
    context_path: PathParams
    result_path: PathParams

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for path_name, path in (("context", self.context_path), ("result", self.result_path)):
            for tensor_name in ("w_in", "b_in", "w_out", "b_out"):
                out.append((f"{path_name}.{tensor_name}", getattr(path, tensor_name)))
        return out

    def as_dict(self) -> dict[str, np.ndarray]:
        return dict(self.named_arrays())

    @classmethod
    def from_dict(cls, config: EncoderConfig, arrays: dict[str, np.ndarray]) -> "EncoderParams":
        paths = {}
        for path_name in ("context", "result"):
            paths[path_name] = PathParams(
                w_in=arrays[f"{path_name}.w_in"],
                b_in=arrays[f"{path_name}.b_in"],
                w_out=arrays[f"{path_name}.w_out"],
                b_out=arrays[f"{path_name}.b_out"],
            )
        return cls(config=config, context_path=paths["context"], result_path=paths["result"])

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, self.context_path.copy(), self.result_path.copy())


# gradients share the parameter container layout
EncoderGrads = EncoderParams


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(config: EncoderConfig, seed: int) -> EncoderParams:
    """Glorot-uniform weights, zero biases, one child RNG stream per path."""
    streams = np.random.SeedSequence(seed).spawn(2)
    paths = []
    for stream in streams:
        rng = np.random.default_rng(stream)
        paths.append(
            PathParams(
                w_in=_glorot(rng, config.vocab_dim, config.hidden_dim),
                b_in=np.zeros(config.hidden_dim),
                w_out=_glorot(rng, config.hidden_dim, config.embed_dim),
                b_out=np.zeros(config.embed_dim),
            )
        )
    return EncoderParams(config=config, context_path=paths[0], result_path=paths[1])


def dropout(activations: np.ndarray, rate: float, seed: int, mode: str) -> tuple[np.ndarray, np.ndarray]:
    """Inverted dropout: zero units with probability rate, scale survivors by 1/(1-rate).

    Eval mode is the exact identity. Returns (output, binary keep mask).
    """
    if not (0.0 <= rate < 1.0):
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or rate == 0.0:
        return activations, np.ones_like(activations)
    rng = np.random.default_rng(seed)
    mask = (rng.random(activations.shape) >= rate).astype(np.float64)
    return activations * mask / (1.0 - rate), mask


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return x @ w + b


def linear_backward(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of an affine layer: (d_x, d_w, d_b) for out = x @ w + b."""
    return grad_out @ w.T, x.T @ grad_out, grad_out.sum(axis=0)


@dataclass
class _PathTrace:
    features: CsrBatch
    z_hidden: np.ndarray
    dropped: np.ndarray
    mask_scaled: np.ndarray
    z_embed: np.ndarray
    embeddings: np.ndarray


@dataclass
class ForwardTrace:
    """Cached activations and dropout masks for one forward call.

    Holds a reference to the params used (immutable during the
    forward/backward pair); consumed at most once by encode_backward.
    """

    mode: str
    shape: tuple[int, int]
    params: EncoderParams
    context: _PathTrace
    results: _PathTrace
    consumed: bool = False


def _path_forward(features: CsrBatch, path: PathParams, rate: float, seed: int, mode: str, normalize: bool) -> _PathTrace:
    x = features.l2_normalized() if normalize else features
    z_hidden = csr_matmul(x.indptr, x.indices, x.values, path.w_in) + path.b_in
    hidden = np.maximum(z_hidden, 0.0)
    dropped, mask = dropout(hidden, rate, seed, mode)
    scale = 1.0 if (mode == "eval" or rate == 0.0) else 1.0 / (1.0 - rate)
    z_embed = linear_forward(dropped, path.w_out, path.b_out)
    embeddings = project_to_sphere(z_embed)
    return _PathTrace(
        features=x,
        z_hidden=z_hidden,
        dropped=dropped,
        mask_scaled=mask * scale,
        z_embed=z_embed,
        embeddings=embeddings,
    )


def _path_backward(trace: _PathTrace, path: PathParams, grad_embeddings: np.ndarray) -> PathParams:
    grad_z_embed = project_to_sphere_backward(trace.z_embed, grad_embeddings)
    grad_dropped, grad_w_out, grad_b_out = linear_backward(trace.dropped, path.w_out, grad_z_embed)
    grad_hidden = grad_dropped * trace.mask_scaled
    grad_z_hidden = grad_hidden * (trace.z_hidden > 0.0)
    x = trace.features
    grad_w_in = csr_weight_grad(x.indptr, x.indices, x.values, grad_z_hidden, x.dim)
    return PathParams(grad_w_in, grad_z_hidden.sum(axis=0), grad_w_out, grad_b_out)


def context_text(instance: McqaInstance) -> str:
    return f"{instance.context} {instance.question}"


def result_text(instance: McqaInstance, answer_index: int) -> str:
    return f"{instance.context} {instance.question} {instance.answers[answer_index]}"


def featurize(instances: Sequence[McqaInstance], config: EncoderConfig) -> tuple[CsrBatch, CsrBatch, np.ndarray | None, tuple[int, int]]:
    """Tokenize a dataset once into reusable context and result CSR batches.

    Result rows are flattened index-blind: row i*N + j is answer j of sample
    i, encoded with no information about its position.
    """
    if not instances:
        raise ValueError("cannot featurize an empty instance list")
    n = len(instances[0].answers)
    ctx_rows = [tokenize(context_text(inst), config.vocab_dim, config.n_gram) for inst in instances]
    grid = [
        [tokenize(result_text(inst, j), config.vocab_dim, config.n_gram) for j in range(len(inst.answers))]
        for inst in instances
    ]
    flat, shape = flatten_index_blind(grid)
    if shape[1] != n:
        raise ValueError("instances disagree on answer count")
    labels = None
    if all(inst.label is not None for inst in instances):
        labels = np.array([inst.label for inst in instances], dtype=np.int64)
    return (
        CsrBatch.from_tokenized(ctx_rows, config.vocab_dim),
        CsrBatch.from_tokenized(flat, config.vocab_dim),
        labels,
        shape,
    )


def encode_features(
    ctx_features: CsrBatch,
    result_features: CsrBatch,
    labels: np.ndarray | None,
    shape: tuple[int, int],
    params: EncoderParams,
    mode: str = "eval",
    seed: int = 0,
) -> tuple[EmbeddingBatch, ForwardTrace]:
    """Forward pass over pre-tokenized features; see encode_batch."""
    cfg = params.config
    b, n = shape
    ctx_seed, res_seed = (int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(2))
    ctx_trace = _path_forward(ctx_features, params.context_path, cfg.dropout_rate, ctx_seed, mode, cfg.normalize_features)
    res_trace = _path_forward(result_features, params.result_path, cfg.dropout_rate, res_seed, mode, cfg.normalize_features)
    batch = EmbeddingBatch(
        context=ctx_trace.embeddings,
        results=res_trace.embeddings.reshape(b, n, cfg.embed_dim),
        labels=labels,
    )
    return batch, ForwardTrace(mode=mode, shape=shape, params=params, context=ctx_trace, results=res_trace)


def encode_batch(
    instances: Sequence[McqaInstance],
    params: EncoderParams,
    mode: str = "eval",
    seed: int = 0,
) -> tuple[EmbeddingBatch, ForwardTrace]:
    """Encode instances into unit-sphere context and result embeddings.

    Context path sees "context question"; the result path sees
    "context question answer_j" for each j, flattened to B*N independent
    rows. Deterministic given (params, instances, mode, seed).
    """
    if mode == "train" and any(inst.label is None for inst in instances):
        raise ValueError("train-mode encoding requires labeled instances")
    ctx_features, result_features, labels, shape = featurize(instances, params.config)
    return encode_features(ctx_features, result_features, labels, shape, params, mode, seed)


def encode_backward(trace: ForwardTrace, grad_context: np.ndarray, grad_results: np.ndarray) -> EncoderGrads:
    """Exact parameter gradients for the forward pass that produced `trace`.

    grad_results may be (B, N, d) or already flattened (B*N, d); gradients
    from all flattened rows accumulate into the shared result-path weights.
    """
    if trace.consumed:
        raise RuntimeError("ForwardTrace already consumed by a previous backward call")
    trace.consumed = True
    b, n = trace.shape
    d = trace.context.embeddings.shape[1]
    flat_grad_results = np.asarray(grad_results, dtype=np.float64).reshape(b * n, d)
    grad_context = np.asarray(grad_context, dtype=np.float64)
    if grad_context.shape != trace.context.embeddings.shape:
        raise ValueError(
            f"grad_context shape {grad_context.shape} != {trace.context.embeddings.shape}"
        )
    return EncoderGrads(
        config=trace.params.config,
        context_path=_path_backward(trace.context, trace.params.context_path, grad_context),
        result_path=_path_backward(trace.results, trace.params.result_path, flat_grad_results),
    )


class CheckpointError(ValueError):
    """Corrupt or internally inconsistent checkpoint file."""


def save_checkpoint(params: EncoderParams, path: str | Path) -> None:
    """Write a versioned .npz container: config as JSON metadata, float64 weights."""
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": {
            "vocab_dim": params.config.vocab_dim,
            "n_gram": params.config.n_gram,
            "hidden_dim": params.config.hidden_dim,
            "embed_dim": params.config.embed_dim,
            "dropout_rate": params.config.dropout_rate,
            "normalize_features": params.config.normalize_features,
        },
    }
    arrays = {name.replace(".", "__"): arr for name, arr in params.named_arrays()}
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8), **arrays)


def load_checkpoint(path: str | Path) -> EncoderParams:
    """Load a checkpoint, validating declared dims against stored weight shapes."""
    try:
        with np.load(path) as archive:
            meta = json.loads(bytes(archive["meta"]).decode("utf-8"))
            arrays = {key: archive[key] for key in archive.files if key != "meta"}
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: not a readable checkpoint ({e})") from e
    version = meta.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {version}")
    config = EncoderConfig(**meta["config"])
    named = {key.replace("__", "."): np.asarray(arr, dtype=np.float64) for key, arr in arrays.items()}
    expected = {
        "w_in": (config.vocab_dim, config.hidden_dim),
        "b_in": (config.hidden_dim,),
        "w_out": (config.hidden_dim, config.embed_dim),
        "b_out": (config.embed_dim,),
    }
    for path_name in ("context", "result"):
        for tensor, shape in expected.items():
            key = f"{path_name}.{tensor}"
            if key not in named:
                raise CheckpointError(f"{path}: missing tensor {key}")
            if named[key].shape != shape:
                raise CheckpointError(
                    f"{path}: {key} has shape {named[key].shape} but the declared "
                    f"dims require {shape}"
                )
    return EncoderParams.from_dict(config, named)
