import csv
import json
import logging
import math
from typing import Dict, List, Optional

from dannseg.error import DannSegError, ErrorCode
from dannseg.phantom import CLASS_NAMES

logger = logging.getLogger(__name__)

PHASES = ("seg", "disc", "joint")
CSV_COLUMNS = [
    "epoch", "phase", "alpha", "seg_loss", "disc_loss", "disc_acc",
    "dice_lv", "dice_myo", "dice_rv", "checkpoint_path",
]
DICE_KEYS = [f"dice_{name}" for name in CLASS_NAMES.values()]


def _optional_float(value) -> Optional[float]:
    if value is None or value == "":
        return None
    return float(value)


class EpochRecord:
    def __init__(
        self,
        epoch: int,
        phase: str,
        alpha: float,
        seg_loss: Optional[float] = None,
        disc_loss: Optional[float] = None,
        disc_acc: Optional[float] = None,
        dice: Optional[Dict[str, float]] = None,
        checkpoint_path: str = "",
    ):
        if phase not in PHASES:
            raise DannSegError(ErrorCode.INVALID_CONFIG, f"unknown phase {phase!r}")
        self.epoch = epoch
        self.phase = phase
        self.alpha = alpha
        self.seg_loss = seg_loss
        self.disc_loss = disc_loss
        self.disc_acc = disc_acc
        self.dice = dice or {}
        self.checkpoint_path = checkpoint_path

    @property
    def mean_dice(self) -> Optional[float]:
        values = [v for v in self.dice.values() if v is not None]
        return sum(values) / len(values) if values else None

    def to_row(self) -> Dict[str, object]:
        row = {
            "epoch": self.epoch,
            "phase": self.phase,
            "alpha": self.alpha,
            "seg_loss": self.seg_loss,
            "disc_loss": self.disc_loss,
            "disc_acc": self.disc_acc,
            "checkpoint_path": self.checkpoint_path,
        }
        for key in DICE_KEYS:
            row[key] = self.dice.get(key[len("dice_"):])
        return row

    def to_dict(self) -> dict:
        return self.to_row()

    @classmethod
    def from_dict(cls, row: dict) -> "EpochRecord":
        dice = {key[len("dice_"):]: _optional_float(row.get(key)) for key in DICE_KEYS}
        return cls(
            epoch=int(row["epoch"]),
            phase=row["phase"],
            alpha=float(row["alpha"]),
            seg_loss=_optional_float(row.get("seg_loss")),
            disc_loss=_optional_float(row.get("disc_loss")),
            disc_acc=_optional_float(row.get("disc_acc")),
            dice={k: v for k, v in dice.items() if v is not None},
            checkpoint_path=row.get("checkpoint_path") or "",
        )

    def __eq__(self, other):
        return isinstance(other, EpochRecord) and self.to_row() == other.to_row()

    def __repr__(self):
        return f"EpochRecord(epoch={self.epoch}, phase={self.phase}, alpha={self.alpha:.3f})"


class TrainingLog:
    """Per-epoch training history; persisted as CSV and as JSON with the run config embedded."""

    def __init__(self, config: Optional[dict] = None, records: Optional[List[EpochRecord]] = None):
        self.config = config or {}
        self.records: List[EpochRecord] = []
        for record in records or []:
            self.append(record)

    def append(self, record: EpochRecord) -> None:
        if self.records and record.epoch <= self.records[-1].epoch:
            raise DannSegError(
                ErrorCode.INVALID_CONFIG,
                f"epoch {record.epoch} does not follow epoch {self.records[-1].epoch}",
            )
        last = self.records[-1] if self.records else None
        if last is not None and last.phase == "joint" and record.phase == "joint" and record.alpha < last.alpha:
            raise DannSegError(ErrorCode.ALPHA_OUT_OF_RANGE, f"alpha decreased at epoch {record.epoch}")
        self.records.append(record)

    def truncate(self, last_epoch: int) -> None:
        self.records = [r for r in self.records if r.epoch <= last_epoch]

    def phase(self, name: str) -> "TrainingLog":
        return TrainingLog(self.config, [r for r in self.records if r.phase == name])

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __eq__(self, other):
        return isinstance(other, TrainingLog) and self.records == other.records

    def record_for(self, epoch: int) -> EpochRecord:
        for record in self.records:
            if record.epoch == epoch:
                return record
        raise DannSegError(ErrorCode.INVALID_CONFIG, f"no record for epoch {epoch}")

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            for record in self.records:
                writer.writerow({k: ("" if v is None else v) for k, v in record.to_row().items()})

    @classmethod
    def from_csv(cls, path: str, config: Optional[dict] = None) -> "TrainingLog":
        with open(path, newline="") as f:
            return cls(config, [EpochRecord.from_dict(row) for row in csv.DictReader(f)])

    def to_dict(self) -> dict:
        return {"config": self.config, "records": [r.to_dict() for r in self.records]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, json_str: str) -> "TrainingLog":
        data = json.loads(json_str)
        return cls(data.get("config", {}), [EpochRecord.from_dict(r) for r in data.get("records", [])])

    def save(self, csv_path: str, json_path: str) -> None:
        self.to_csv(csv_path)
        with open(json_path, "w") as f:
            f.write(self.to_json())


class EarlyStopSelection:
    def __init__(self, epoch: int, plateau_epoch: Optional[int], warning: bool):
        self.epoch = epoch
        self.plateau_epoch = plateau_epoch
        self.warning = warning

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "plateau_epoch": self.plateau_epoch, "warning": self.warning}

    def __repr__(self):
        return f"EarlyStopSelection(epoch={self.epoch}, plateau={self.plateau_epoch}, warning={self.warning})"


def find_plateau(log: TrainingLog, window: int = 10, tolerance: float = 0.005) -> Optional[int]:
    """
    Earliest epoch e whose following `window` epochs never beat the best validation Dice
    up to e by more than `tolerance`. Only epochs with a full window after them qualify, so
    a plateau reached within the last `window` epochs is not reported and selection falls
    back to the last epoch.
    """
    scored = [(r.epoch, r.mean_dice) for r in log if r.mean_dice is not None]
    if not scored:
        return None
    last_epoch = scored[-1][0]
    best = -math.inf
    for epoch, dice in scored:
        best = max(best, dice)
        if epoch + window > last_epoch:
            break
        ahead = [d for e, d in scored if epoch < e <= epoch + window]
        if ahead and max(ahead) <= best + tolerance:
            return epoch
    return None


def early_stop_select(log: TrainingLog, num_domains: int, window: int = 10,
                      tolerance: float = 0.005) -> EarlyStopSelection:
    """
    Pick the epoch, at or after the Dice plateau, whose discriminator accuracy is closest to
    chance (1 / num_domains); ties go to the earliest. Without a plateau the last epoch is
    returned with the warning flag set.
    """
    if not log.records:
        raise DannSegError(ErrorCode.EMPTY_INPUT, "cannot select an epoch from an empty training log")
    if num_domains < 2:
        raise DannSegError(ErrorCode.INVALID_CONFIG, f"early stopping needs >= 2 domains, got {num_domains}")
    last = log.records[-1].epoch

    plateau = find_plateau(log, window, tolerance)
    if plateau is None:
        logger.warning(f"No Dice plateau found (window={window}, tolerance={tolerance}); selecting last epoch {last}")
        return EarlyStopSelection(last, None, True)

    chance = 1.0 / num_domains
    best_epoch, best_gap = None, math.inf
    for record in log:
        if record.epoch < plateau or record.disc_acc is None:
            continue
        gap = abs(record.disc_acc - chance)
        if gap < best_gap:
            best_epoch, best_gap = record.epoch, gap
    if best_epoch is None:
        logger.warning(f"No discriminator accuracy after plateau epoch {plateau}; selecting last epoch {last}")
        return EarlyStopSelection(last, plateau, True)
    logger.info(f"Early stopping: plateau at epoch {plateau}, selected epoch {best_epoch} (|acc - 1/D|={best_gap:.4f})")
    return EarlyStopSelection(best_epoch, plateau, False)
