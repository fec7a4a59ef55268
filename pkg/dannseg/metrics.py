import csv
import itertools
import json
import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import binary_erosion
from scipy.spatial.distance import cdist
from scipy.stats import mannwhitneyu, rankdata

from dannseg.error import DannSegError, ErrorCode
from dannseg.phantom import CLASS_NAMES

logger = logging.getLogger(__name__)

EXACT_LIMIT = 12
ALL_DOMAINS = "All"
METRICS = ("dice", "hd")
_TIE_TOLERANCE = 1e-9


def _check_masks(pred_mask: np.ndarray, true_mask: np.ndarray) -> None:
    if pred_mask.shape != true_mask.shape:
        raise DannSegError(
            ErrorCode.SHAPE_MISMATCH,
            f"prediction {pred_mask.shape} and ground truth {true_mask.shape} differ in shape",
        )


def dice(pred_mask: np.ndarray, true_mask: np.ndarray, class_id: int) -> float:
    """2|A n B| / (|A| + |B|) for one class; 1.0 when the class is absent from both masks."""
    _check_masks(pred_mask, true_mask)
    a = pred_mask == class_id
    b = true_mask == class_id
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def boundary(region: np.ndarray) -> np.ndarray:
    """Pixels of a binary region with at least one 8-neighbour outside it (image border counts as outside)."""
    interior = binary_erosion(region, structure=np.ones((3, 3), dtype=bool), border_value=0)
    return region & ~interior


def hausdorff_mm(pred_mask: np.ndarray, true_mask: np.ndarray, class_id: int,
                 spacing: Tuple[float, float]) -> Optional[float]:
    """
    Symmetric Hausdorff distance in mm between the boundaries of one class in two masks.

    Returns:
        float distance, or None when the class is empty in either mask
    """
    _check_masks(pred_mask, true_mask)
    a = boundary(pred_mask == class_id)
    b = boundary(true_mask == class_id)
    if not a.any() or not b.any():
        return None
    scale = np.asarray(spacing, dtype=np.float64)
    points_a = np.argwhere(a) * scale
    points_b = np.argwhere(b) * scale
    distances = cdist(points_a, points_b)
    return float(max(distances.min(axis=1).max(), distances.min(axis=0).max()))


class MannWhitneyResult:
    def __init__(self, u: float, p: float, method: str):
        self.u = u
        self.p = p
        self.method = method

    def to_dict(self) -> dict:
        return {"U": self.u, "p": self.p, "method": self.method}

    def __repr__(self):
        return f"MannWhitneyResult(U={self.u}, p={self.p:.4g}, method={self.method})"


def _exact_p(x: np.ndarray, y: np.ndarray) -> Tuple[float, float]:
    n, m = len(x), len(y)
    ranks = rankdata(np.concatenate([x, y]))
    offset = n * (n + 1) / 2.0
    u = float(ranks[:n].sum() - offset)
    mean = n * m / 2.0
    observed = abs(u - mean)
    extreme = total = 0
    for chosen in itertools.combinations(range(n + m), n):
        total += 1
        candidate = ranks[list(chosen)].sum() - offset
        if abs(candidate - mean) >= observed - _TIE_TOLERANCE:
            extreme += 1
    return u, min(1.0, extreme / total)


def mann_whitney_u(x: Sequence[float], y: Sequence[float], method: str = "auto") -> MannWhitneyResult:
    """
    Two-sided Mann-Whitney U test; U is reported for `x` with midranks for ties.

    With method "auto", the p-value is exact (full enumeration of rank assignments) when
    len(x) + len(y) <= 12 and otherwise the tie-corrected normal approximation with continuity
    correction.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size == 0 or y.size == 0:
        raise DannSegError(ErrorCode.EMPTY_INPUT, "Mann-Whitney U needs at least one value per sample")
    if method not in ("auto", "exact", "asymptotic"):
        raise DannSegError(ErrorCode.INVALID_CONFIG, f"unknown Mann-Whitney method {method!r}")
    if method == "exact" or (method == "auto" and x.size + y.size <= EXACT_LIMIT):
        u, p = _exact_p(x, y)
        return MannWhitneyResult(u, p, "exact")
    if np.ptp(np.concatenate([x, y])) == 0:
        return MannWhitneyResult(x.size * y.size / 2.0, 1.0, "asymptotic")
    result = mannwhitneyu(x, y, alternative="two-sided", method="asymptotic", use_continuity=True)
    return MannWhitneyResult(float(result.statistic), float(min(1.0, result.pvalue)), "asymptotic")


class SampleMetrics:
    """Per-class Dice and Hausdorff distance (mm, None when undefined) of one image."""

    def __init__(self, sample_id: str, domain_id: str, dice_scores: Dict[str, float],
                 hausdorff: Dict[str, Optional[float]]):
        self.sample_id = sample_id
        self.domain_id = domain_id
        self.dice = dice_scores
        self.hd = hausdorff

    @classmethod
    def compute(cls, sample_id: str, domain_id: str, pred_mask: np.ndarray, true_mask: np.ndarray,
                spacing: Tuple[float, float]) -> "SampleMetrics":
        return cls(
            sample_id,
            domain_id,
            {name: dice(pred_mask, true_mask, label) for label, name in CLASS_NAMES.items()},
            {name: hausdorff_mm(pred_mask, true_mask, label, spacing) for label, name in CLASS_NAMES.items()},
        )

    def to_row(self) -> dict:
        row = {"sample_id": self.sample_id, "domain_id": self.domain_id}
        for name in CLASS_NAMES.values():
            row[f"dice_{name}"] = self.dice[name]
            row[f"hd_{name}"] = self.hd[name]
        return row

    @classmethod
    def from_row(cls, row: dict) -> "SampleMetrics":
        def value(v):
            return None if v in (None, "") else float(v)

        return cls(
            row["sample_id"],
            row["domain_id"],
            {name: float(row[f"dice_{name}"]) for name in CLASS_NAMES.values()},
            {name: value(row[f"hd_{name}"]) for name in CLASS_NAMES.values()},
        )


def summarize(values: Sequence[Optional[float]]) -> dict:
    """Mean and population standard deviation of the defined values, with the count of undefined ones."""
    defined = [v for v in values if v is not None]
    excluded = len(values) - len(defined)
    if not defined:
        return {"mean": None, "sd": None, "n": 0, "excluded": excluded}
    array = np.asarray(defined, dtype=np.float64)
    return {"mean": float(array.mean()), "sd": float(array.std()), "n": len(defined), "excluded": excluded}


class MetricsReport:
    """
    Per-sample rows plus aggregates per domain and over all samples, optional comparison tests
    and the domain-probe result.
    """

    def __init__(self, rows: List[SampleMetrics], comparisons: Optional[List[dict]] = None,
                 probe: Optional[dict] = None, checkpoint: str = ""):
        self.rows = rows
        self.comparisons = comparisons or []
        self.probe = probe
        self.checkpoint = checkpoint
        self.aggregates = self.aggregate()

    def domains(self) -> List[str]:
        return sorted({r.domain_id for r in self.rows})

    def aggregate(self) -> Dict[str, Dict[str, dict]]:
        groups = {d: [r for r in self.rows if r.domain_id == d] for d in self.domains()}
        groups[ALL_DOMAINS] = list(self.rows)
        aggregates = {}
        for group, rows in groups.items():
            block = {}
            for name in CLASS_NAMES.values():
                block[f"dice_{name}"] = summarize([r.dice[name] for r in rows])
                block[f"hd_{name}"] = summarize([r.hd[name] for r in rows])
            aggregates[group] = block
        excluded = aggregates[ALL_DOMAINS]
        for name in CLASS_NAMES.values():
            if excluded[f"hd_{name}"]["excluded"]:
                logger.warning(f"Hausdorff undefined for {excluded[f'hd_{name}']['excluded']} samples of class {name}")
        return aggregates

    def values(self, metric: str, class_name: str, domain_id: Optional[str] = None) -> List[Optional[float]]:
        if metric not in METRICS:
            raise DannSegError(ErrorCode.INVALID_CONFIG, f"unknown metric {metric!r}")
        rows = [r for r in self.rows if domain_id in (None, ALL_DOMAINS) or r.domain_id == domain_id]
        return [getattr(r, metric)[class_name] for r in rows]

    def compare(self, other: "MetricsReport") -> List[dict]:
        """Mann-Whitney U per domain block, metric and class against a second model's report."""
        results = []
        for group in [*self.domains(), ALL_DOMAINS]:
            for metric in METRICS:
                for name in CLASS_NAMES.values():
                    mine = [v for v in self.values(metric, name, group) if v is not None]
                    theirs = [v for v in other.values(metric, name, group) if v is not None]
                    if not mine or not theirs:
                        continue
                    test = mann_whitney_u(mine, theirs)
                    results.append({"domain": group, "metric": metric, "class": name, **test.to_dict()})
        self.comparisons = results
        return results

    def to_csv(self, path: str) -> None:
        fieldnames = ["sample_id", "domain_id"] + [
            f"{metric}_{name}" for name in CLASS_NAMES.values() for metric in METRICS
        ]
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=fieldnames)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: ("" if v is None else v) for k, v in row.to_row().items()})

    @classmethod
    def from_csv(cls, path: str) -> "MetricsReport":
        with open(path, newline="") as f:
            return cls([SampleMetrics.from_row(row) for row in csv.DictReader(f)])

    def to_dict(self) -> dict:
        return {
            "checkpoint": self.checkpoint,
            "aggregates": self.aggregates,
            "comparisons": self.comparisons,
            "probe": self.probe,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self) -> str:
        """Text table with one row per domain plus "All": mean (sd) of each metric."""
        def cell(summary: dict) -> str:
            if summary["mean"] is None:
                return "n/a"
            return f"{summary['mean']:.2f} ({summary['sd']:.2f})"

        columns = [f"dice_{n}" for n in CLASS_NAMES.values()] + [f"hd_{n}" for n in CLASS_NAMES.values()]
        lines = ["domain\t" + "\t".join(columns)]
        for group, block in self.aggregates.items():
            lines.append(group + "\t" + "\t".join(cell(block[c]) for c in columns))
        return "\n".join(lines)


def is_close_to_chance(accuracy: float, num_domains: int, points: float = 0.15) -> bool:
    return math.fabs(accuracy - 1.0 / num_domains) <= points
