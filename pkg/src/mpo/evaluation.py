"""Multiple-choice evaluation: datasets, answer extraction, scoring, comparison.

Scoring is exact match on the extracted choice letter. Extraction applies a
fixed rule order; a response no rule can read scores as incorrect and is
counted separately so the failure mode stays visible. Comparison lines up
results for the same item set and reports percentage-point deltas against the
first entry.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from random import Random
from typing import Sequence

from .backends import SOLVER_PARAMS, BackendError, ChatTurn, CriticBackend, GenerationParams
from .schema import PromptState, render_prompt
from .templating import PromptTemplate, default_template

logger = logging.getLogger(__name__)

LETTERS = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"

DATASET_FORMATS = ("generic_jsonl", "arc_jsonl", "mmlu_csv")

# Rule 1: an explicit answer line. Case-insensitive; the letter may be
# parenthesized and the line may end in punctuation.
_ANSWER_LINE_RE = re.compile(
    r"^\s*answer\s*:\s*\(?([A-Za-z])\)?\s*[.!?]?\s*$", re.IGNORECASE
)
# Rule 2: the whole response is a single letter, optional trailing punctuation.
_BARE_LETTER_RE = re.compile(r"([A-Za-z])[.!?]?")
# Rule 3: standalone letter tokens (no alphanumeric neighbours).
_STANDALONE_RE = re.compile(r"(?<![A-Za-z0-9])([A-Z])(?![A-Za-z0-9])")


class DatasetError(Exception):
    """Base for dataset loading and validation failures."""


class FormatError(DatasetError):
    """A row or line does not match the declared dataset format."""


class MissingAnswerKey(DatasetError):
    """An item has no gold answer."""


class DuplicateId(DatasetError):
    """Two items in one dataset share an id."""


class DatasetMismatch(Exception):
    """Results being compared do not cover the same item set."""


class EvaluationAborted(Exception):
    """Too many solver failures; carries the partial result."""

    def __init__(self, message: str, result: "EvalResult"):
        super().__init__(message)
        self.result = result


@dataclass(frozen=True)
class MCQItem:
    """One multiple-choice question with lettered choices and a gold key."""

    id: str
    question: str
    choices: tuple[tuple[str, str], ...]
    answer_key: str
    subject: str | None = None

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("item id must be non-empty")
        if not self.question.strip():
            raise ValueError(f"item {self.id}: question must be non-empty")
        if not 2 <= len(self.choices) <= 26:
            raise ValueError(f"item {self.id}: need 2 to 26 choices, got {len(self.choices)}")
        expected = tuple(LETTERS[i] for i in range(len(self.choices)))
        letters = tuple(letter for letter, _ in self.choices)
        if letters != expected:
            raise ValueError(
                f"item {self.id}: choice letters must run consecutively from A, got {letters}"
            )
        for letter, text in self.choices:
            if not text.strip():
                raise ValueError(f"item {self.id}: choice {letter} has empty text")
        if self.answer_key not in letters:
            raise ValueError(
                f"item {self.id}: answer key {self.answer_key!r} not among {letters}"
            )

    @property
    def letters(self) -> tuple[str, ...]:
        return tuple(letter for letter, _ in self.choices)

    @property
    def valid_letters(self) -> frozenset[str]:
        return frozenset(self.letters)


@dataclass(frozen=True)
class Dataset:
    name: str
    split: str
    items: tuple[MCQItem, ...]

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("dataset name must be non-empty")
        if not self.split:
            raise ValueError("dataset split must be non-empty")
        seen: set[str] = set()
        for item in self.items:
            if item.id in seen:
                raise DuplicateId(f"duplicate item id {item.id!r} in dataset {self.name}")
            seen.add(item.id)

    def __len__(self) -> int:
        return len(self.items)

    @property
    def ids_digest(self) -> str:
        return _ids_digest(item.id for item in self.items)


def _ids_digest(ids) -> str:
    blob = json.dumps(sorted(ids), ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def sample_items(dataset: Dataset, limit: int, seed: int = 0) -> Dataset:
    """Deterministic subsample of ``limit`` items, preserving dataset order."""
    if limit < 1:
        raise ValueError("limit must be >= 1")
    if limit >= len(dataset.items):
        return dataset
    picked = sorted(Random(seed).sample(range(len(dataset.items)), limit))
    return Dataset(
        name=dataset.name,
        split=dataset.split,
        items=tuple(dataset.items[i] for i in picked),
    )


def _normalize_keys(
    pairs: Sequence[tuple[str, str]], answer: str, where: str
) -> tuple[tuple[tuple[str, str], ...], str]:
    """Map all-digit choice labels ("1".. ) onto letters, answer included."""
    labels = [label for label, _ in pairs]
    if labels and all(label.isdigit() for label in labels):
        if any(not 1 <= int(label) <= len(LETTERS) for label in labels):
            raise FormatError(f"{where}: digit label out of range in {labels}")
        mapping = {label: LETTERS[int(label) - 1] for label in labels}
        if answer not in mapping:
            raise FormatError(f"{where}: answer {answer!r} not among labels {labels}")
        return tuple((mapping[label], text) for label, text in pairs), mapping[answer]
    return tuple(pairs), answer


def load_dataset(
    path: str | Path,
    format: str,
    *,
    name: str | None = None,
    split: str = "test",
) -> Dataset:
    """Load and normalize a dataset file into lettered multiple-choice items."""
    path = Path(path)
    if format not in DATASET_FORMATS:
        raise ValueError(f"unknown dataset format {format!r}; expected one of {DATASET_FORMATS}")
    if format == "generic_jsonl":
        items = _load_generic_jsonl(path)
        default_name = path.stem
    elif format == "arc_jsonl":
        items = _load_arc_jsonl(path)
        default_name = path.stem
    else:
        subject = _subject_from_filename(path)
        items = _load_mmlu_csv(path, subject)
        default_name = subject
    if not items:
        logger.warning("dataset file %s contains no items", path)
    return Dataset(name=name or default_name, split=split, items=tuple(items))


def _load_generic_jsonl(path: Path) -> list[MCQItem]:
    items = []
    seen: set[str] = set()
    for lineno, raw in _jsonl_lines(path):
        where = f"{path}:{lineno}"
        if "answer" not in raw:
            raise MissingAnswerKey(f"{where}: item has no 'answer' field")
        try:
            item_id = str(raw["id"])
            question = raw["question"]
            choices = raw["choices"]
            answer = str(raw["answer"])
            subject = raw.get("subject")
        except KeyError as exc:
            raise FormatError(f"{where}: missing field {exc}") from None
        if not isinstance(choices, dict):
            raise FormatError(f"{where}: 'choices' must be an object mapping letters to text")
        pairs, answer = _normalize_keys(
            [(str(k), str(v)) for k, v in choices.items()], answer, where
        )
        _check_unique(item_id, seen, where)
        try:
            items.append(
                MCQItem(id=item_id, question=question, choices=pairs, answer_key=answer, subject=subject)
            )
        except ValueError as exc:
            raise FormatError(f"{where}: {exc}") from None
    return items


def _load_arc_jsonl(path: Path) -> list[MCQItem]:
    items = []
    seen: set[str] = set()
    for lineno, raw in _jsonl_lines(path):
        where = f"{path}:{lineno}"
        if "answerKey" not in raw:
            raise MissingAnswerKey(f"{where}: item has no 'answerKey' field")
        try:
            item_id = str(raw["id"])
            stem = raw["question"]["stem"]
            choice_list = raw["question"]["choices"]
            answer = str(raw["answerKey"])
        except (KeyError, TypeError) as exc:
            raise FormatError(f"{where}: not in ARC layout ({exc})") from None
        try:
            pairs = [(str(choice["label"]), str(choice["text"])) for choice in choice_list]
        except (KeyError, TypeError) as exc:
            raise FormatError(f"{where}: malformed choice entry ({exc})") from None
        pairs, answer = _normalize_keys(pairs, answer, where)
        _check_unique(item_id, seen, where)
        try:
            items.append(MCQItem(id=item_id, question=stem, choices=tuple(pairs), answer_key=answer))
        except ValueError as exc:
            raise FormatError(f"{where}: {exc}") from None
    return items


def _load_mmlu_csv(path: Path, subject: str) -> list[MCQItem]:
    items = []
    with path.open("r", encoding="utf-8", newline="") as handle:
        for rowno, row in enumerate(csv.reader(handle), start=1):
            where = f"{path}:{rowno}"
            if not row:
                continue
            if len(row) != 6:
                raise FormatError(f"{where}: expected 6 columns, got {len(row)}")
            question, *texts, answer = row
            answer = answer.strip()
            if not answer:
                raise MissingAnswerKey(f"{where}: empty answer column")
            pairs = tuple((LETTERS[i], text) for i, text in enumerate(texts))
            try:
                items.append(
                    MCQItem(
                        id=f"{subject}-{rowno:04d}",
                        question=question,
                        choices=pairs,
                        answer_key=answer,
                        subject=subject,
                    )
                )
            except ValueError as exc:
                raise FormatError(f"{where}: {exc}") from None
    return items


def _jsonl_lines(path: Path):
    with path.open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({exc})") from None


def _check_unique(item_id: str, seen: set[str], where: str) -> None:
    if item_id in seen:
        raise DuplicateId(f"{where}: duplicate item id {item_id!r}")
    seen.add(item_id)


def _subject_from_filename(path: Path) -> str:
    stem = path.stem
    for suffix in ("_test", "_dev", "_val", "_train"):
        if stem.endswith(suffix):
            return stem[: -len(suffix)]
    return stem


def pose_question(
    state: PromptState, item: MCQItem, template: PromptTemplate | None = None
) -> str:
    """Assemble the full solver input: rendered prompt plus question block."""
    template = template or default_template("question")
    choices = "\n".join(f"{letter}. {text}" for letter, text in item.choices)
    block = template.fill(QUESTION=item.question, CHOICES=choices)
    return render_prompt(state) + "\n" + block


def extract_answer(response: str, valid: frozenset[str] | set[str]) -> str | None:
    """Read the predicted choice letter out of a solver response.

    Rules, in priority order; the first hit wins:
      1. the first line of the form ``Answer: L`` whose letter is valid
         (case-insensitive, optional parentheses and end punctuation);
      2. the whole response is a single valid letter with optional trailing
         punctuation (exact case);
      3. the first standalone valid letter token in the first non-empty line
         (exact case, so a lowercase article "a" never counts).

    Returns None when no rule applies. Never returns a letter outside
    ``valid``.
    """
    lines = response.splitlines()
    for line in lines:
        match = _ANSWER_LINE_RE.match(line)
        if match and match.group(1).upper() in valid:
            return match.group(1).upper()
    match = _BARE_LETTER_RE.fullmatch(response.strip())
    if match and match.group(1) in valid:
        return match.group(1)
    for line in lines:
        if not line.strip():
            continue
        for match in _STANDALONE_RE.finditer(line):
            if match.group(1) in valid:
                return match.group(1)
        break
    return None


@dataclass(frozen=True)
class ItemRecord:
    """Outcome of one evaluated item."""

    id: str
    raw_response: str
    extracted: str | None
    gold: str
    correct: bool
    subject: str | None = None
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "raw_response": self.raw_response,
            "extracted": self.extracted,
            "gold": self.gold,
            "correct": self.correct,
            "subject": self.subject,
            "note": self.note,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ItemRecord":
        return cls(
            id=data["id"],
            raw_response=data["raw_response"],
            extracted=data["extracted"],
            gold=data["gold"],
            correct=data["correct"],
            subject=data.get("subject"),
            note=data.get("note", ""),
        )


@dataclass(frozen=True)
class EvalResult:
    """Aggregate exact-match accuracy plus the per-item records behind it."""

    dataset_name: str
    split: str
    prompt_digest: str
    records: tuple[ItemRecord, ...]
    accuracy: float
    total: int
    correct: int
    unparseable: int

    def __post_init__(self) -> None:
        if self.total != len(self.records):
            raise ValueError("total must equal the number of records")
        if self.total and self.accuracy != self.correct / self.total:
            raise ValueError("accuracy must equal correct / total")

    @classmethod
    def from_records(
        cls,
        dataset_name: str,
        split: str,
        prompt_digest: str,
        records: Sequence[ItemRecord],
    ) -> "EvalResult":
        records = tuple(records)
        total = len(records)
        correct = sum(1 for record in records if record.correct)
        unparseable = sum(1 for record in records if record.extracted is None)
        return cls(
            dataset_name=dataset_name,
            split=split,
            prompt_digest=prompt_digest,
            records=records,
            accuracy=(correct / total) if total else 0.0,
            total=total,
            correct=correct,
            unparseable=unparseable,
        )

    @property
    def ids_digest(self) -> str:
        return _ids_digest(record.id for record in self.records)

    @property
    def per_subject(self) -> dict[str, tuple[int, int, float]]:
        """subject -> (correct, total, accuracy), only for items with subjects."""
        counts: dict[str, list[int]] = {}
        for record in self.records:
            if record.subject is None:
                continue
            bucket = counts.setdefault(record.subject, [0, 0])
            bucket[0] += int(record.correct)
            bucket[1] += 1
        return {
            subject: (correct, total, correct / total)
            for subject, (correct, total) in sorted(counts.items())
        }

    @property
    def macro_accuracy(self) -> float | None:
        """Unweighted mean of per-subject accuracies; None without subjects."""
        per_subject = self.per_subject
        if not per_subject:
            return None
        return sum(acc for _, _, acc in per_subject.values()) / len(per_subject)

    def to_dict(self) -> dict:
        data = {
            "dataset_name": self.dataset_name,
            "split": self.split,
            "prompt_digest": self.prompt_digest,
            "accuracy": self.accuracy,
            "total": self.total,
            "correct": self.correct,
            "unparseable": self.unparseable,
            "records": [record.to_dict() for record in self.records],
        }
        if self.per_subject:
            data["per_subject"] = {
                subject: {"correct": c, "total": t, "accuracy": a}
                for subject, (c, t, a) in self.per_subject.items()
            }
            data["macro_accuracy"] = self.macro_accuracy
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "EvalResult":
        return cls.from_records(
            dataset_name=data["dataset_name"],
            split=data["split"],
            prompt_digest=data["prompt_digest"],
            records=[ItemRecord.from_dict(r) for r in data["records"]],
        )


def evaluate(
    state: PromptState,
    dataset: Dataset,
    solver: CriticBackend,
    params: GenerationParams = SOLVER_PARAMS,
    *,
    concurrency: int = 1,
    template: PromptTemplate | None = None,
) -> EvalResult:
    """Score a prompt on a dataset with exact-match accuracy.

    Per-item solver failures are recorded as unparseable (hence incorrect)
    with a note; if failures exceed half the dataset the run aborts with the
    partial result attached. Record order follows dataset order.
    """
    if not dataset.items:
        raise DatasetError(f"dataset {dataset.name} has no items")
    if concurrency < 1:
        raise ValueError("concurrency must be >= 1")
    template = template or default_template("question")

    def solve(item: MCQItem) -> ItemRecord:
        posed = pose_question(state, item, template)
        try:
            response = solver.complete((ChatTurn("user", posed),), params)
        except BackendError as exc:
            logger.warning("solver failed on item %s: %s", item.id, exc)
            return ItemRecord(
                id=item.id,
                raw_response="",
                extracted=None,
                gold=item.answer_key,
                correct=False,
                subject=item.subject,
                note=f"solver failed: {exc}",
            )
        extracted = extract_answer(response, item.valid_letters)
        return ItemRecord(
            id=item.id,
            raw_response=response,
            extracted=extracted,
            gold=item.answer_key,
            correct=extracted == item.answer_key,
            subject=item.subject,
        )

    total = len(dataset.items)
    records: list[ItemRecord] = []
    if concurrency > 1:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            records = list(pool.map(solve, dataset.items))
    else:
        failed = 0
        for item in dataset.items:
            record = solve(item)
            records.append(record)
            failed += bool(record.note)
            if failed * 2 > total:
                partial = EvalResult.from_records(
                    dataset.name, dataset.split, state.digest, records
                )
                raise EvaluationAborted(
                    f"{failed} of {total} items failed; aborting", partial
                )

    failed = sum(1 for record in records if record.note)
    if failed * 2 > total:
        partial = EvalResult.from_records(dataset.name, dataset.split, state.digest, records)
        raise EvaluationAborted(f"{failed} of {total} items failed; aborting", partial)
    return EvalResult.from_records(dataset.name, dataset.split, state.digest, records)


@dataclass(frozen=True)
class Comparison:
    """Accuracy table for runs over the same item set.

    The first row is the baseline; every later row carries its delta against
    it, in percentage points.
    """

    rows: tuple[tuple[str, "EvalResult"], ...] = field(repr=False)

    def __post_init__(self) -> None:
        if len(self.rows) < 2:
            raise ValueError("comparison needs at least two results")
        baseline_digest = self.rows[0][1].ids_digest
        for label, result in self.rows[1:]:
            if result.ids_digest != baseline_digest:
                raise DatasetMismatch(
                    f"result {label!r} covers a different item set than the baseline"
                )

    def to_dict(self) -> dict:
        base = self.rows[0][1].accuracy
        entries = []
        for index, (label, result) in enumerate(self.rows):
            entries.append(
                {
                    "label": label,
                    "accuracy": result.accuracy,
                    "accuracy_pct": _pct(result.accuracy),
                    "delta_pct": "" if index == 0 else _delta(result.accuracy, base),
                    "unparseable": result.unparseable,
                    "total": result.total,
                }
            )
        return {"dataset": self.rows[0][1].dataset_name, "rows": entries}

    def to_text(self) -> str:
        base = self.rows[0][1].accuracy
        header = ("label", "accuracy", "delta", "unparseable")
        table = [header]
        for index, (label, result) in enumerate(self.rows):
            table.append(
                (
                    label,
                    _pct(result.accuracy),
                    "" if index == 0 else _delta(result.accuracy, base),
                    f"{result.unparseable}/{result.total}",
                )
            )
        widths = [max(len(row[col]) for row in table) for col in range(len(header))]
        lines = []
        for row in table:
            lines.append("  ".join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip())
        return "\n".join(lines)


def _pct(accuracy: float) -> str:
    return f"{accuracy * 100:.2f}"


def _delta(accuracy: float, base: float) -> str:
    return f"{(accuracy - base) * 100:+.2f}"


def compare(results: Sequence[tuple[str, EvalResult]]) -> Comparison:
    return Comparison(rows=tuple(results))
