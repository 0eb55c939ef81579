"""Central finite-difference verification of every analytic gradient.

Each check builds a random well-conditioned input (resampled away from
hinge and ReLU kinks, where a subgradient and a finite difference may
legitimately disagree), evaluates the analytic gradient, and compares
coordinate-wise against (f(x+h) - f(x-h)) / 2h.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import EncoderConfig, EncoderParams, encode_backward, encode_features, init_params
from .encoder import CsrBatch
from .loss import PolytupletConfig, cce_loss, distances_to_logits, hybrid_loss, polytuplet_loss
from .manifold import EmbeddingBatch, distance_matrix, project_to_sphere

FD_STEP = 1e-5
KINK_GAP = 1e-3
REL_FLOOR = 1e-6


@dataclass
class ComponentResult:
    name: str
    max_rel_error: float
    trials: int

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def rel_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), REL_FLOOR)


def central_diff(f, x: np.ndarray, index: tuple, step: float = FD_STEP) -> float:
    x_plus = x.copy()
    x_plus[index] += step
    x_minus = x.copy()
    x_minus[index] -= step
    return (f(x_plus) - f(x_minus)) / (2.0 * step)


def _random_batch(rng: np.random.Generator, b: int, n: int, d: int) -> EmbeddingBatch:
    context = project_to_sphere(rng.normal(size=(b, d)))
    results = project_to_sphere(rng.normal(size=(b, n, d)))
    labels = rng.integers(n, size=b)
    return EmbeddingBatch(context=context, results=results, labels=labels)


def _hinges_well_conditioned(batch: EmbeddingBatch, margin: float) -> bool:
    dmat = distance_matrix(batch)
    rows = np.arange(batch.batch_size)
    gaps = dmat[rows, batch.labels][:, None] - dmat + margin
    negatives = np.ones_like(dmat, dtype=bool)
    negatives[rows, batch.labels] = False
    return bool(np.all(np.abs(gaps[negatives]) > KINK_GAP))


def _conditioned_batch(rng: np.random.Generator, b: int, n: int, d: int, margin: float) -> EmbeddingBatch:
    for _ in range(200):
        batch = _random_batch(rng, b, n, d)
        if _hinges_well_conditioned(batch, margin):
            return batch
    raise RuntimeError("could not sample a batch away from hinge boundaries")


def _pack(batch: EmbeddingBatch) -> np.ndarray:
    return np.concatenate([batch.context.ravel(), batch.results.ravel()])


def _unpack(x: np.ndarray, batch: EmbeddingBatch) -> EmbeddingBatch:
    b, d = batch.context.shape
    context = x[: b * d].reshape(b, d)
    results = x[b * d :].reshape(batch.results.shape)
    return EmbeddingBatch(context=context, results=results, labels=batch.labels)


def _check_embedding_grads(loss_fn, batch: EmbeddingBatch) -> float:
    out = loss_fn(batch)
    analytic = np.concatenate([out.grad_context.ravel(), out.grad_results.ravel()])
    x0 = _pack(batch)

    def f(x: np.ndarray) -> float:
        return loss_fn(_unpack(x, batch)).value

    worst = 0.0
    for i in range(len(x0)):
        fd = central_diff(f, x0, (i,))
        worst = max(worst, rel_error(analytic[i], fd))
    return worst


def check_polytuplet(seed: int, d: int) -> float:
    rng = np.random.default_rng(seed)
    cfg = PolytupletConfig(
        margin=float(rng.uniform(0.2, 1.5)),
        w_hard=float(rng.uniform(0.5, 2.0)),
        w_semi=float(rng.uniform(0.5, 2.0)),
    )
    batch = _conditioned_batch(rng, b=2, n=3, d=d, margin=cfg.margin)
    return _check_embedding_grads(lambda bt: polytuplet_loss(bt, cfg), batch)


def check_hybrid(seed: int, d: int) -> float:
    rng = np.random.default_rng(seed)
    cfg = PolytupletConfig(
        margin=float(rng.uniform(0.2, 1.5)),
        w_hard=float(rng.uniform(0.5, 2.0)),
        w_semi=float(rng.uniform(0.5, 2.0)),
        lambda_poly=float(rng.uniform(0.3, 2.0)),
        lambda_cce=float(rng.uniform(0.3, 2.0)),
        temperature=float(rng.uniform(0.5, 2.0)),
    )
    batch = _conditioned_batch(rng, b=2, n=3, d=d, margin=cfg.margin)
    return _check_embedding_grads(lambda bt: hybrid_loss(bt, cfg), batch)


def check_cce(seed: int, n: int = 4) -> float:
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(3, n))
    labels = rng.integers(n, size=3)
    out = cce_loss(logits, labels)

    def f(x: np.ndarray) -> float:
        return cce_loss(x, labels).value

    worst = 0.0
    for i in range(logits.shape[0]):
        for j in range(logits.shape[1]):
            fd = central_diff(f, logits, (i, j))
            worst = max(worst, rel_error(out.grad_logits[i, j], fd))
    return worst


def _random_features(rng: np.random.Generator, rows: int, dim: int, nnz: int) -> CsrBatch:
    indptr = np.arange(rows + 1, dtype=np.int64) * nnz
    indices = np.concatenate([rng.choice(dim, size=nnz, replace=False) for _ in range(rows)]).astype(np.int64)
    values = rng.uniform(0.5, 2.0, size=rows * nnz)
    return CsrBatch(indptr=indptr, indices=indices, values=values, dim=dim)


def _encoder_well_conditioned(trace) -> bool:
    for path in (trace.context, trace.results):
        if np.min(np.abs(path.z_hidden)) < 1e-4:
            return False
        if np.min(np.linalg.norm(path.z_embed, axis=-1)) < 1e-3:
            return False
    return True


def check_encoder(seed: int, d: int, h: int, max_coords: int = 150, mode: str = "eval") -> float:
    """FD check of encode_backward through the hybrid loss.

    Subsamples parameter coordinates deterministically; dropout masks depend
    only on the seed, so train-mode checks are valid too.
    """
    rng = np.random.default_rng(seed)
    cfg = EncoderConfig(
        vocab_dim=32,
        n_gram=1,
        hidden_dim=h,
        embed_dim=d,
        dropout_rate=0.3 if mode == "train" else 0.0,
        normalize_features=True,
    )
    loss_cfg = PolytupletConfig(
        margin=float(rng.uniform(0.2, 1.0)),
        w_hard=float(rng.uniform(0.5, 2.0)),
        w_semi=float(rng.uniform(0.5, 2.0)),
    )
    b, n = 2, 3
    enc_seed = int(rng.integers(2**31))

    for attempt in range(200):
        params = init_params(cfg, seed=int(rng.integers(2**31)))
        ctx = _random_features(rng, b, cfg.vocab_dim, nnz=6)
        res = _random_features(rng, b * n, cfg.vocab_dim, nnz=6)
        labels = rng.integers(n, size=b)
        batch, trace = encode_features(ctx, res, labels, (b, n), params, mode=mode, seed=enc_seed)
        if _encoder_well_conditioned(trace) and _hinges_well_conditioned(batch, loss_cfg.margin):
            break
    else:
        raise RuntimeError("could not sample a well-conditioned encoder input")

    out = hybrid_loss(batch, loss_cfg)
    grads = encode_backward(trace, out.grad_context, out.grad_results)
    grad_dict = grads.as_dict()
    param_dict = params.as_dict()

    def loss_at(pdict: dict[str, np.ndarray]) -> float:
        p = EncoderParams.from_dict(cfg, pdict)
        bt, _ = encode_features(ctx, res, labels, (b, n), p, mode=mode, seed=enc_seed)
        return hybrid_loss(bt, loss_cfg).value

    coords = []
    for name, arr in sorted(param_dict.items()):
        for flat_idx in range(arr.size):
            coords.append((name, flat_idx))
    if len(coords) > max_coords:
        picked = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in picked]

    worst = 0.0
    for name, flat_idx in coords:
        base = param_dict[name].ravel()[flat_idx]
        for sign, store in ((1.0, "plus"), (-1.0, "minus")):
            pass
        plus = {k: v.copy() for k, v in param_dict.items()}
        plus[name].ravel()[flat_idx] = base + FD_STEP
        minus = {k: v.copy() for k, v in param_dict.items()}
        minus[name].ravel()[flat_idx] = base - FD_STEP
        fd = (loss_at(plus) - loss_at(minus)) / (2.0 * FD_STEP)
        worst = max(worst, rel_error(grad_dict[name].ravel()[flat_idx], fd))
    return worst


def run_gradient_checks(seed: int, trials: int, tolerance: float) -> list[ComponentResult]:
    """Run every FD suite; trial i spans d in {2, 64} and h in {4, 32}."""
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    dims = [(2, 4), (64, 32)]
    results = []
    for name, runner in (
        ("polytuplet_loss", lambda s, d, h: check_polytuplet(s, d)),
        ("cce_loss", lambda s, d, h: check_cce(s)),
        ("hybrid_loss", lambda s, d, h: check_hybrid(s, d)),
        ("encode_backward", lambda s, d, h: check_encoder(s, d, h)),
    ):
        worst = 0.0
        for i in range(trials):
            d, h = dims[i % len(dims)]
            worst = max(worst, runner(seed + i, d, h))
        results.append(ComponentResult(name=name, max_rel_error=worst, trials=trials))
    return results
