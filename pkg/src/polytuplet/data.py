"""MCQA dataset ingestion, synthetic generation, and deterministic splits.

Files are JSON arrays using the published ReClor field names (`context`,
`question`, `answers`, `label`, `id_string`), so real ReClor files load
unmodified and generated files round-trip through the same loader. All
randomness flows through explicit integer seeds.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Malformed dataset file or record."""


@dataclass(frozen=True)
class McqaInstance:
    """One context/question/answer-set sample, optionally labeled.

    answers is an ordered tuple of N >= 2 choices; label, when present, is
    the index of the correct answer in [0, N).
    """

    id: str
    context: str
    question: str
    answers: tuple[str, ...]
    label: int | None = None

    def __post_init__(self) -> None:
        if len(self.answers) < 2:
            raise DataError(f"record {self.id!r}: needs >= 2 answers, got {len(self.answers)}")
        if not self.context.strip():
            raise DataError(f"record {self.id!r}: empty context")
        if not self.question.strip():
            raise DataError(f"record {self.id!r}: empty question")
        if self.label is not None and not (0 <= self.label < len(self.answers)):
            raise DataError(
                f"record {self.id!r}: label {self.label} out of range [0, {len(self.answers)})"
            )


@dataclass
class DatasetSplit:
    train: list[McqaInstance]
    test: list[McqaInstance]
    seed: int


def _instance_from_record(record: dict, position: int) -> McqaInstance:
    if not isinstance(record, dict):
        raise DataError(f"record[{position}]: expected a JSON object")
    rid = record.get("id_string", f"record[{position}]")
    for key in ("context", "question", "answers"):
        if key not in record:
            raise DataError(f"record {rid!r}: missing field {key!r}")
    answers = record["answers"]
    if not isinstance(answers, list) or not all(isinstance(a, str) for a in answers):
        raise DataError(f"record {rid!r}: answers must be a list of strings")
    label = record.get("label")
    if label is not None and not isinstance(label, int):
        raise DataError(f"record {rid!r}: label must be an integer index, got {label!r}")
    return McqaInstance(
        id=str(rid),
        context=record["context"],
        question=record["question"],
        answers=tuple(answers),
        label=label,
    )


def load_reclor_json(path: str | Path) -> list[McqaInstance]:
    """Load a JSON array of MCQA records, preserving file order.

    The answer count N is taken from the first record (N >= 2; ReClor uses 4)
    and enforced across the file; a record with a different count raises a
    DataError naming its id. Records without a `label` load as unlabeled.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        byte_offset = len(text[: e.pos].encode("utf-8"))
        raise DataError(
            f"{path}: invalid JSON at line {e.lineno}, column {e.colno} (byte offset {byte_offset}): {e.msg}"
        ) from e
    if not isinstance(raw, list):
        raise DataError(f"{path}: expected a JSON array of records")
    if not raw:
        return []

    instances = [_instance_from_record(rec, i) for i, rec in enumerate(raw)]
    n_answers = len(instances[0].answers)
    for inst in instances:
        if len(inst.answers) != n_answers:
            raise DataError(
                f"record {inst.id!r}: has {len(inst.answers)} answers, expected {n_answers}"
            )
    return instances


def save_json(instances: list[McqaInstance], path: str | Path) -> None:
    """Write instances as a JSON array in the same schema the loader reads."""
    records = []
    for inst in instances:
        rec = {
            "id_string": inst.id,
            "context": inst.context,
            "question": inst.question,
            "answers": list(inst.answers),
        }
        if inst.label is not None:
            rec["label"] = inst.label
        records.append(rec)
    Path(path).write_text(json.dumps(records, indent=2) + "\n", encoding="utf-8")


def split_dataset(corpus: list[McqaInstance], test_fraction: float, seed: int) -> DatasetSplit:
    """Deterministic label-stratified split.

    Test size is round(test_fraction * |corpus|), allocated across labels by
    largest-remainder rounding so per-label proportions are preserved. Both
    halves keep the corpus order.
    """
    if not corpus:
        raise DataError("cannot split an empty corpus")
    if not (0.0 < test_fraction < 1.0):
        raise DataError(f"test_fraction must be in (0, 1), got {test_fraction}")
    n_total = len(corpus)
    n_test = math.floor(test_fraction * n_total + 0.5)
    if n_test < 1:
        raise DataError(f"test_fraction {test_fraction} selects no test samples from {n_total}")

    groups: dict[int, list[int]] = {}
    for i, inst in enumerate(corpus):
        groups.setdefault(-1 if inst.label is None else inst.label, []).append(i)

    rng = np.random.default_rng(seed)
    quotas = {lbl: test_fraction * len(idx) for lbl, idx in sorted(groups.items())}
    take = {lbl: math.floor(q) for lbl, q in quotas.items()}
    remainder = n_test - sum(take.values())
    # hand out the leftover slots by largest fractional part, label order on ties
    order = sorted(quotas, key=lambda lbl: (take[lbl] - quotas[lbl], lbl))
    for lbl in order:
        if remainder <= 0:
            break
        if take[lbl] < len(groups[lbl]):
            take[lbl] += 1
            remainder -= 1

    test_idx: set[int] = set()
    for lbl in sorted(groups):
        chosen = rng.permutation(len(groups[lbl]))[: take[lbl]]
        test_idx.update(groups[lbl][c] for c in chosen)

    train = [corpus[i] for i in range(n_total) if i not in test_idx]
    test = [corpus[i] for i in range(n_total) if i in test_idx]
    return DatasetSplit(train=train, test=test, seed=seed)


def generate_synthetic(
    n: int,
    vocab_size: int = 256,
    n_answers: int = 4,
    difficulty: str = "separable",
    seed: int = 0,
) -> list[McqaInstance]:
    """Generate MCQA instances with a planted lexical-overlap signal.

    Each context contains a planted keyword set; the correct answer reuses
    context tokens while distractors draw from words absent from the context
    (`separable`), or additionally echo one context token each (`noisy`).
    Labels are sampled uniformly. A token-overlap argmax classifies the
    separable variant perfectly, so the data tests the optimizer rather
    than language understanding.
    """
    if n < 1:
        raise DataError(f"n must be >= 1, got {n}")
    if vocab_size < 8:
        raise DataError(f"vocab_size must be >= 8, got {vocab_size}")
    if n_answers < 2:
        raise DataError(f"n_answers must be >= 2, got {n_answers}")
    if difficulty not in ("separable", "noisy"):
        raise DataError(f"difficulty must be 'separable' or 'noisy', got {difficulty!r}")

    words = np.array([f"w{i:04d}" for i in range(vocab_size)])
    n_keywords = min(4, max(2, vocab_size // 4))
    n_filler = min(6, max(1, vocab_size // 6))
    rng = np.random.default_rng(seed)

    instances = []
    for idx in range(n):
        label = int(rng.integers(n_answers))
        perm = rng.permutation(vocab_size)
        keywords = perm[:n_keywords]
        context_words = perm[: n_keywords + n_filler]
        pool = perm[n_keywords + n_filler :]  # disjoint from the context by construction

        answer_len = min(4, max(1, min(n_keywords, len(pool))))
        n_question = min(3, max(1, len(pool) // 4))

        context = " ".join(words[rng.permutation(context_words)])
        question = " ".join(words[rng.choice(pool, size=n_question, replace=False)])

        answers: list[str] = []
        for j in range(n_answers):
            if j == label:
                picked = rng.choice(keywords, size=min(answer_len, n_keywords), replace=False)
            else:
                picked = rng.choice(pool, size=answer_len, replace=False)
                if difficulty == "noisy":
                    picked = picked.copy()
                    picked[int(rng.integers(len(picked)))] = rng.choice(context_words)
            answers.append(" ".join(words[picked]))

        instances.append(
            McqaInstance(
                id=f"synthetic-{difficulty}-{seed}-{idx:05d}",
                context=context,
                question=question,
                answers=tuple(answers),
                label=label,
            )
        )
    return instances


def token_overlap_argmax(instance: McqaInstance) -> int:
    """Brute-force baseline: answer with the most tokens shared with the context."""
    context_tokens = set(instance.context.split())
    overlaps = [len(context_tokens & set(ans.split())) for ans in instance.answers]
    return int(np.argmax(overlaps))
