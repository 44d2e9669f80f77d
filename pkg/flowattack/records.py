"""Attack records and the JSON / JSON-lines documents every command emits."""
from __future__ import annotations

import dataclasses
import json
import logging
from collections.abc import Iterable
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import pandas as pd

from .errors import FormatError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttackRecord:
    index: int
    variant: str
    success: bool
    queries: int
    total_queries: int
    linf: float
    seed: int
    correct: bool

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, row: dict[str, Any]) -> "AttackRecord":
        return cls(
            index=int(row["index"]),
            variant=str(row["variant"]),
            success=bool(row["success"]),
            queries=int(row["queries"]),
            total_queries=int(row.get("total_queries", row["queries"])),
            linf=float(row["linf"]),
            seed=int(row["seed"]),
            correct=bool(row.get("correct", True)),
        )


def dumps(document: Any) -> str:
    return json.dumps(document, sort_keys=True, indent=2) + "\n"


def write_json(path: str | Path, document: Any) -> None:
    Path(path).write_text(dumps(document), encoding="utf-8")
    logger.info("wrote %s", path)


def read_json(path: str | Path) -> Any:
    text = Path(path).read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc.msg}", exc.pos) from None


def write_records(path: str | Path, records: Iterable[AttackRecord]) -> None:
    lines = [json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in records]
    Path(path).write_text("".join(lines), encoding="utf-8")
    logger.info("wrote %d records to %s", len(lines), path)


def read_records(path: str | Path) -> list[AttackRecord]:
    records = []
    offset = 0
    raw = Path(path).read_bytes()
    for line in raw.splitlines(keepends=True):
        if line.strip():
            try:
                records.append(AttackRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}: bad attack record ({exc})", offset) from None
        offset += len(line)
    return records


def records_frame(records: Iterable[AttackRecord]) -> pd.DataFrame:
    frame = pd.DataFrame([r.to_dict() for r in records],
                         columns=[f.name for f in dataclasses.fields(AttackRecord)])
    return frame.sort_values(["variant", "index"], kind="stable").reset_index(drop=True)
