"""Mini-batch training on the hybrid objective, evaluation, and tuning.

The loop is deterministic end-to-end for a fixed seed: shuffling, dropout
masks, and parameter init all derive from it. `mode="cce_only"` trains the
same architecture with the cross-entropy path alone, giving the baseline
for hybrid-vs-baseline comparison tables.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import McqaInstance
from .encoder import (
    EncoderConfig,
    EncoderParams,
    encode_backward,
    encode_features,
    featurize,
    init_params,
)
from .loss import PolytupletConfig, hybrid_loss
from .manifold import distance_matrix
from .mining import classify_negatives


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.kind!r}")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    loss: PolytupletConfig = field(default_factory=PolytupletConfig)
    model: EncoderConfig = field(default_factory=EncoderConfig)
    mode: str = "hybrid"

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not math.isfinite(self.learning_rate) or self.learning_rate < 0:
            raise ValueError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if self.mode not in ("hybrid", "cce_only"):
            raise ValueError(f"mode must be 'hybrid' or 'cce_only', got {self.mode!r}")


@dataclass
class EpochStats:
    epoch: int
    loss: float
    loss_poly: float
    loss_cce: float
    train_accuracy: float
    test_accuracy: float
    hard: int
    semi_hard: int
    easy: int

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["mining"] = {"hard": d.pop("hard"), "semi_hard": d.pop("semi_hard"), "easy": d.pop("easy")}
        return d


@dataclass
class TrainReport:
    epochs: list[EpochStats]
    best_test_accuracy: float
    best_epoch: int
    wall_seconds: float

    def summary_dict(self, cfg: TrainConfig) -> dict:
        # wall_seconds is intentionally absent: report files must be
        # byte-identical across reruns with the same flags
        last = self.epochs[-1]
        return {
            "mode": cfg.mode,
            "seed": cfg.seed,
            "epochs": len(self.epochs),
            "best_test_accuracy": self.best_test_accuracy,
            "best_epoch": self.best_epoch,
            "final_test_accuracy": last.test_accuracy,
            "final_train_accuracy": last.train_accuracy,
            "final_loss": last.loss,
            "final_loss_poly": last.loss_poly,
            "final_loss_cce": last.loss_cce,
            "config": config_to_dict(cfg),
        }


def config_to_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def write_report(report: TrainReport, cfg: TrainConfig, jsonl_path: str | Path, summary_path: str | Path) -> None:
    """Serialize the per-epoch log as JSON lines plus a final summary JSON."""
    lines = [json.dumps(e.to_json_dict(), sort_keys=True) for e in report.epochs]
    Path(jsonl_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    Path(summary_path).write_text(
        json.dumps(report.summary_dict(cfg), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
    """p <- p - lr * g, out of place."""
    return {name: params[name] - lr * grads[name] for name in params}


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(a) for k, a in params.items()},
            v={k: np.zeros_like(a) for k, a in params.items()},
            t=0,
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; moments are carried explicitly."""
    t = state.t + 1
    new_m, new_v, new_p = {}, {}, {}
    for name in params:
        g = grads[name]
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        new_p[name] = params[name] - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name] = m
        new_v[name] = v
    return new_p, AdamState(m=new_m, v=new_v, t=t)


def _predict_features(feats, params: EncoderParams) -> tuple[np.ndarray, np.ndarray]:
    ctx, res, labels, shape = feats
    batch, _ = encode_features(ctx, res, labels, shape, params, mode="eval", seed=0)
    dmat = distance_matrix(batch)
    return np.argmin(dmat, axis=1), dmat


def predict(instance: McqaInstance, params: EncoderParams) -> tuple[int, np.ndarray]:
    """Predicted index (argmin distance, ties to the lowest index) and the N distances."""
    indices, dmat = _predict_features(featurize([instance], params.config), params)
    return int(indices[0]), dmat[0]


def predict_batch(instances: Sequence[McqaInstance], params: EncoderParams) -> tuple[np.ndarray, np.ndarray]:
    return _predict_features(featurize(instances, params.config), params)


def evaluate(dataset: Sequence[McqaInstance], params: EncoderParams) -> float:
    """Fraction of instances whose predicted index equals the label."""
    if not dataset:
        raise ValueError("cannot evaluate on an empty dataset")
    if any(inst.label is None for inst in dataset):
        raise ValueError("evaluate requires labeled instances")
    indices, _ = predict_batch(dataset, params)
    labels = np.array([inst.label for inst in dataset])
    return float(np.mean(indices == labels))


def _effective_loss_cfg(cfg: TrainConfig) -> PolytupletConfig:
    if cfg.mode == "cce_only":
        # force lambda_poly to 0 so no polytuplet gradient flows
        return replace(cfg.loss, lambda_poly=0.0)
    return cfg.loss


def _step_seed(seed: int, epoch: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, step]).generate_state(1)[0])


def train(
    train_set: Sequence[McqaInstance],
    test_set: Sequence[McqaInstance],
    cfg: TrainConfig,
    init: EncoderParams | None = None,
) -> tuple[EncoderParams, TrainReport]:
    """Train the two-path encoder and report per-epoch losses and accuracies.

    Deterministic for a fixed config; aborts with DivergenceError if the
    loss goes non-finite. `init` warm-starts from existing parameters.
    """
    if not train_set or not test_set:
        raise ValueError("train and test sets must be non-empty")
    if any(inst.label is None for inst in train_set) or any(inst.label is None for inst in test_set):
        raise ValueError("training requires labeled instances")

    start = time.perf_counter()
    params = init.copy() if init is not None else init_params(cfg.model, cfg.seed)
    loss_cfg = _effective_loss_cfg(cfg)

    train_feats = featurize(train_set, cfg.model)
    test_feats = featurize(test_set, cfg.model)
    ctx_all, res_all, labels_all, (n_train, n_answers) = train_feats

    param_dict = params.as_dict()
    adam_state = AdamState.zeros_like(param_dict)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xD47A]))

    epochs: list[EpochStats] = []
    best_acc, best_epoch = -1.0, -1
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n_train)
        sums = {"loss": 0.0, "poly": 0.0, "cce": 0.0}
        mined = {"hard": 0, "semi_hard": 0, "easy": 0}
        for step, lo in enumerate(range(0, n_train, cfg.batch_size)):
            rows = order[lo : lo + cfg.batch_size]
            result_rows = (rows[:, None] * n_answers + np.arange(n_answers)).ravel()
            batch, trace = encode_features(
                ctx_all.take_rows(rows),
                res_all.take_rows(result_rows),
                labels_all[rows],
                (len(rows), n_answers),
                params,
                mode="train",
                seed=_step_seed(cfg.seed, epoch, step),
            )
            out = hybrid_loss(batch, loss_cfg)
            if not math.isfinite(out.value):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, step {step} (learning_rate={cfg.learning_rate})"
                )
            report = classify_negatives(batch, loss_cfg.margin)
            mined["hard"] += report.hard
            mined["semi_hard"] += report.semi_hard
            mined["easy"] += report.easy
            sums["loss"] += out.value * len(rows)
            sums["poly"] += (out.poly_value if cfg.mode == "hybrid" else 0.0) * len(rows)
            sums["cce"] += out.cce_value * len(rows)

            grads = encode_backward(trace, out.grad_context, out.grad_results)
            grad_dict = grads.as_dict()
            if cfg.optimizer.kind == "adam":
                param_dict, adam_state = adam_step(
                    param_dict,
                    grad_dict,
                    adam_state,
                    cfg.learning_rate,
                    cfg.optimizer.beta1,
                    cfg.optimizer.beta2,
                    cfg.optimizer.eps,
                )
            else:
                param_dict = sgd_step(param_dict, grad_dict, cfg.learning_rate)
            params = EncoderParams.from_dict(cfg.model, param_dict)

        train_acc = float(np.mean(_predict_features(train_feats, params)[0] == labels_all))
        test_labels = np.array([inst.label for inst in test_set])
        test_acc = float(np.mean(_predict_features(test_feats, params)[0] == test_labels))
        if test_acc > best_acc:
            best_acc, best_epoch = test_acc, epoch
        epochs.append(
            EpochStats(
                epoch=epoch,
                loss=sums["loss"] / n_train,
                loss_poly=sums["poly"] / n_train,
                loss_cce=sums["cce"] / n_train,
                train_accuracy=train_acc,
                test_accuracy=test_acc,
                hard=mined["hard"],
                semi_hard=mined["semi_hard"],
                easy=mined["easy"],
            )
        )

    report = TrainReport(
        epochs=epochs,
        best_test_accuracy=best_acc,
        best_epoch=best_epoch,
        wall_seconds=time.perf_counter() - start,
    )
    return params, report


# --- successive-halving tuner ---------------------------------------------

SEARCHABLE = ("margin", "dropout_rate", "learning_rate", "w_hard", "w_semi", "lambda_poly", "lambda_cce", "temperature")


@dataclass
class TrialResult:
    rung: int
    config_index: int
    overrides: dict
    epochs_trained: int
    test_accuracy: float


def apply_overrides(base: TrainConfig, overrides: dict) -> TrainConfig:
    cfg = base
    for name, value in overrides.items():
        if name == "learning_rate":
            cfg = replace(cfg, learning_rate=value)
        elif name == "dropout_rate":
            cfg = replace(cfg, model=replace(cfg.model, dropout_rate=value))
        elif name in ("margin", "w_hard", "w_semi", "lambda_poly", "lambda_cce", "temperature"):
            cfg = replace(cfg, loss=replace(cfg.loss, **{name: value}))
        else:
            raise ValueError(f"unknown search dimension {name!r} (expected one of {SEARCHABLE})")
    return cfg


def _sample_overrides(space: dict, rng: np.random.Generator) -> dict:
    """Draw one config. Specs: {"choices": [...]}, {"low", "high"[, "log"]},
    a plain list (choices), or a (low, high) tuple (uniform)."""
    overrides = {}
    for name in sorted(space):
        spec = space[name]
        if isinstance(spec, dict) and "choices" in spec:
            overrides[name] = spec["choices"][int(rng.integers(len(spec["choices"])))]
        elif isinstance(spec, dict):
            lo, hi = float(spec["low"]), float(spec["high"])
            if spec.get("log"):
                overrides[name] = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
            else:
                overrides[name] = float(rng.uniform(lo, hi))
        elif isinstance(spec, list):
            overrides[name] = spec[int(rng.integers(len(spec)))]
        elif isinstance(spec, tuple) and len(spec) == 2:
            overrides[name] = float(rng.uniform(float(spec[0]), float(spec[1])))
        else:
            raise ValueError(f"bad search spec for {name!r}: {spec!r}")
    return overrides


def derive_rungs(budget: int, eta: float, n_configs: int | None) -> tuple[int, int]:
    """Pick (k, r0): initial config count and epochs for the first rung.

    Rung i trains ceil(k/eta^i) survivors for r0*eta^i epochs from scratch;
    total epoch cost is about k*r0*(s+1), kept within budget.
    """
    if eta <= 1.0:
        raise ValueError(f"eta must be > 1, got {eta}")
    if budget < 1:
        raise ValueError(f"budget must be >= 1 epoch, got {budget}")
    if n_configs is not None:
        if n_configs < 1:
            raise ValueError("n_configs must be >= 1")
        k = n_configs
    else:
        s = 0
        while (eta ** (s + 1)) * (s + 2) <= budget:
            s += 1
        k = int(round(eta**s))
    # count rungs by simulating the halving (avoids float log edge cases)
    n_rungs, n = 1, k
    while n > 1:
        n = math.ceil(n / eta)
        n_rungs += 1
    r0 = max(1, budget // (k * n_rungs))
    return k, r0


def tune(
    train_set: Sequence[McqaInstance],
    test_set: Sequence[McqaInstance],
    search_space: dict,
    budget: int,
    eta: float,
    seed: int,
    base: TrainConfig | None = None,
    n_configs: int | None = None,
) -> tuple[TrainConfig, list[TrialResult]]:
    """Successive halving over seeded random configs.

    Samples k configs, trains each r0 epochs, keeps the top ceil(n/eta) by
    test accuracy, multiplies the epoch allowance by eta, and repeats until
    one survives. Returns the winning full config and the leaderboard of
    every (rung, config) evaluation. Deterministic for a fixed seed.
    """
    if not search_space:
        raise ValueError("search_space must be non-empty")
    base = base if base is not None else TrainConfig()
    k, r0 = derive_rungs(budget, eta, n_configs)

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7E5E]))
    candidates = [(i, _sample_overrides(search_space, rng)) for i in range(k)]

    leaderboard: list[TrialResult] = []
    rung = 0
    survivors = candidates
    while True:
        epochs_here = max(1, int(round(r0 * eta**rung)))
        scored = []
        for config_index, overrides in survivors:
            cfg = apply_overrides(base, overrides)
            cfg = replace(cfg, epochs=epochs_here, seed=int(np.random.SeedSequence([seed, config_index]).generate_state(1)[0]))
            _, report = train(train_set, test_set, cfg)
            scored.append((config_index, overrides, report.best_test_accuracy))
            leaderboard.append(
                TrialResult(
                    rung=rung,
                    config_index=config_index,
                    overrides=overrides,
                    epochs_trained=epochs_here,
                    test_accuracy=report.best_test_accuracy,
                )
            )
        # stable sort: accuracy desc, then config index asc
        scored.sort(key=lambda t: (-t[2], t[0]))
        if len(scored) == 1:
            winner_index, winner_overrides, _ = scored[0]
            best = apply_overrides(base, winner_overrides)
            best = replace(best, seed=int(np.random.SeedSequence([seed, winner_index]).generate_state(1)[0]))
            return best, leaderboard
        keep = math.ceil(len(scored) / eta)
        survivors = [(idx, ov) for idx, ov, _ in scored[:keep]]
        rung += 1
