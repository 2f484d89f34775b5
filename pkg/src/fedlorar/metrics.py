"""Per-client accuracy and the two averaging conventions.

MacroAvg is the arithmetic mean of per-client accuracies (each client counts
once); MicroAvg pools correct predictions over all test examples.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

from . import models
from .errors import EmptyInput, NotClassification
from .models import ModelSpec
from .tensor import ParamVector


@dataclass(frozen=True)
class ClientScore:
    client_id: int
    test_size: int
    correct: int
    accuracy: float

    @classmethod
    def from_counts(cls, client_id: int, test_size: int, correct: int) -> "ClientScore":
        acc = correct / test_size if test_size else 0.0
        return cls(client_id, test_size, correct, acc)


@dataclass(frozen=True)
class EvalReport:
    per_client: tuple[ClientScore, ...]
    macro_avg: float
    micro_avg: float

    @classmethod
    def from_scores(cls, scores: Sequence[ClientScore]) -> "EvalReport":
        if not scores:
            raise EmptyInput("an evaluation report needs at least one client")
        scores = tuple(sorted(scores, key=lambda s: s.client_id))
        macro = math.fsum(s.accuracy for s in scores) / len(scores)
        total = sum(s.test_size for s in scores)
        micro = sum(s.correct for s in scores) / total if total else 0.0
        return cls(scores, macro, micro)

    def to_dict(self) -> dict:
        return {
            "per_client": [asdict(s) for s in self.per_client],
            "macro_avg": self.macro_avg,
            "micro_avg": self.micro_avg,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        scores = tuple(ClientScore(**s) for s in d["per_client"])
        return cls(scores, d["macro_avg"], d["micro_avg"])

    def accuracy_of(self, client_id: int) -> float:
        for s in self.per_client:
            if s.client_id == client_id:
                return s.accuracy
        raise KeyError(client_id)


def evaluate_all(spec: ModelSpec, w: ParamVector, population, split: str = "test") -> EvalReport:
    """Score ``w`` on every client's ``split`` and average both ways."""
    if not spec.is_classifier:
        raise NotClassification("evaluate_all needs a classification model")
    if len(population) == 0:
        raise EmptyInput("population is empty")
    scores = []
    for d in population:
        s = d.split(split)
        correct = models.count_correct(spec, w, s.inputs, s.targets) if len(s) else 0
        scores.append(ClientScore.from_counts(d.client_id, len(s), correct))
    return EvalReport.from_scores(scores)


def format_table(rows: Sequence[tuple[str, EvalReport]], client_names: Sequence[str] | None = None) -> str:
    """Render reports as percentage rows: one column per client, then MacroAvg and MicroAvg."""
    if not rows:
        return ""
    ids = [s.client_id for s in rows[0][1].per_client]
    names = list(client_names) if client_names else [f"client{i}" for i in ids]
    header = [""] + names + ["MacroAvg", "MicroAvg"]
    body = []
    for label, report in rows:
        cells = [label] + [f"{s.accuracy * 100:.2f}" for s in report.per_client]
        cells += [f"{report.macro_avg * 100:.2f}", f"{report.micro_avg * 100:.2f}"]
        body.append(cells)
    widths = [max(len(r[c]) for r in [header] + body) for c in range(len(header))]
    lines = []
    for r in [header] + body:
        lines.append("  ".join(cell.ljust(widths[0]) if c == 0 else cell.rjust(widths[c]) for c, cell in enumerate(r)))
    return "\n".join(lines)
