"""Per-epoch training records, streamed as JSON lines and CSV."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

from safer.errors import ContractError

PHASES = ("clean-pretrain", "pgd-at", "safer")
CSV_FIELDS = ("epoch", "phase", "clean_acc", "robust_acc", "loss", "lr", "selected")


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    clean_acc: float
    robust_acc: float | None
    mean_loss: float
    selected_layers: list[str]
    lr: float
    train_acc: float = float("nan")
    wall_time: float = 0.0

    def to_dict(self, timing: bool = True) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, float) and not math.isfinite(v):
                d[k] = None
        if not timing:
            d.pop("wall_time")
        return d


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        if rec.phase not in PHASES:
            raise ContractError(f"unknown phase {rec.phase!r}")
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ContractError(f"epoch {rec.epoch} does not follow {self.records[-1].epoch}")
        if rec.phase != "safer" and rec.selected_layers:
            raise ContractError("selected layers are only recorded in the safer phase")
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str, phase: str | None = None) -> list:
        return [getattr(r, name) for r in self.records if phase is None or r.phase == phase]

    def to_jsonl(self, timing: bool = True) -> str:
        return "".join(json.dumps(r.to_dict(timing), sort_keys=True) + "\n" for r in self.records)

    def to_csv(self) -> str:
        """CSV without wall times, so identical runs give identical bytes."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in self.records:
            w.writerow([r.epoch, r.phase, _fmt(r.clean_acc), _fmt(r.robust_acc), _fmt(r.mean_loss),
                        _fmt(r.lr), ";".join(r.selected_layers)])
        return buf.getvalue()

    def state(self) -> list[dict]:
        return [r.to_dict(timing=False) for r in self.records]

    @classmethod
    def from_state(cls, rows: list[dict]) -> "TrainLog":
        log = cls()
        for row in rows:
            row = {k: (float("nan") if v is None and k in ("train_acc",) else v) for k, v in row.items()}
            log.append(EpochRecord(**row))
        return log

    @classmethod
    def from_jsonl(cls, path) -> "TrainLog":
        rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        return cls.from_state(rows)


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return ""
    return repr(float(v))
