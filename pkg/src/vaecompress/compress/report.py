"""Accuracy constraints and search reports shared by the compression searches."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, List, Optional, Sequence


@dataclass(frozen=True)
class Evaluation:
    auroc: float
    kl_id: Optional[float] = None
    kl_ood: Optional[float] = None


class ConstraintViolation(ValueError):
    """The starting model does not satisfy the accuracy constraint."""


@dataclass
class AccuracyConstraint:
    """Pass iff the evaluated AUROC is at least ``threshold``.

    ``eval_bundle`` maps a list of models (one per encoder in the detector)
    to an :class:`Evaluation` or a bare AUROC float.
    """

    threshold: float
    eval_bundle: Callable
    metric: str = "auroc"

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")
        if self.metric != "auroc":
            raise ValueError("only the auroc metric is supported")

    def evaluate(self, models: Sequence) -> Evaluation:
        out = self.eval_bundle(list(models))
        return out if isinstance(out, Evaluation) else Evaluation(float(out))

    def passes(self, ev: Evaluation) -> bool:
        return ev.auroc >= self.threshold


@dataclass
class SearchRecord:
    step: int
    spec_id: str
    removed: List[str]
    sparsity_pct: float
    dtype: str
    auroc: float
    kl_id: Optional[float]
    kl_ood: Optional[float]
    param_count: int
    size_bytes: int
    flops: int
    passed: bool
    time_mean_s: Optional[float] = None
    time_std_s: Optional[float] = None
    selected: bool = False


COLUMNS = [f.name for f in fields(SearchRecord)]


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, list):
        return "|".join(v)
    if isinstance(v, float):
        return repr(v)
    return v


@dataclass
class SearchReport:
    kind: str
    threshold: float
    records: List[SearchRecord] = field(default_factory=list)

    def append(self, record: SearchRecord) -> None:
        self.records.append(record)

    def select(self, index: int) -> None:
        for i, r in enumerate(self.records):
            r.selected = i == index

    @property
    def selected(self) -> SearchRecord:
        chosen = [r for r in self.records if r.selected]
        if len(chosen) != 1:
            raise ValueError(f"expected exactly one selected record, found {len(chosen)}")
        return chosen[0]

    def to_json(self) -> str:
        body = {"kind": self.kind, "threshold": self.threshold,
                "records": [asdict(r) for r in self.records]}
        return json.dumps(body, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SearchReport":
        body = json.loads(text)
        return cls(body["kind"], body["threshold"], [SearchRecord(**r) for r in body["records"]])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.records:
            w.writerow([_cell(getattr(r, c)) for c in COLUMNS])
        return buf.getvalue()

    def write(self, stem) -> None:
        """Write ``<stem>.json`` and ``<stem>.csv``."""
        with open(f"{stem}.json", "w") as fh:
            fh.write(self.to_json())
        with open(f"{stem}.csv", "w", newline="") as fh:
            fh.write(self.to_csv())
