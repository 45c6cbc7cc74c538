"""Segmentation metrics and nonparametric statistics.

Dice similarity coefficients (per label and mean), reproducibility DSC
between paired segmentations, region volumes with percent change and RMSE,
and the Wilcoxon signed-rank test (exact by sign-pattern enumeration for
n <= 20) with Bonferroni-corrected thresholds.

Conventions: a label empty in both maps has undefined DSC and is excluded
from means, the background label is excluded from mean DSC, zero differences
are dropped before ranking, and two-sided p doubles the smaller tail
(capped at 1). Volumes and volume RMSE are reported in cm^3.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .volio import LabelMap

EXACT_ENUMERATION_LIMIT = 20


@dataclass
class DscRecord:
    subject_id: str
    per_label: dict[int, float | None]
    mean_dsc: float
    kind: str = "plain"  # one of: pdsc, rdsc, plain


@dataclass
class VolumeChangeRecord:
    subject_id: str
    pre_volume_cm3: float
    post_volume_cm3: float

    @property
    def percent_change(self) -> float:
        if self.pre_volume_cm3 <= 0:
            raise ValueError(f"{self.subject_id}: percent change needs pre volume > 0")
        return 100.0 * (self.post_volume_cm3 - self.pre_volume_cm3) / self.pre_volume_cm3


@dataclass
class StatResult:
    n_pairs: int
    w_plus: float
    p_two_sided: float
    n_comparisons: int = 1
    alpha: float = 0.05
    comparison: str = ""

    @property
    def bonferroni_alpha(self) -> float:
        return bonferroni(self.alpha, self.n_comparisons)

    @property
    def significant(self) -> bool:
        return self.p_two_sided < self.bonferroni_alpha


def _check_compatible(a: LabelMap, b: LabelMap) -> None:
    if tuple(a.dims) != tuple(b.dims):
        raise ValueError(f"label map dims differ: {a.dims} vs {b.dims}")
    if sorted(a.label_ids()) != sorted(b.label_ids()):
        raise ValueError("label map vocabularies differ")


def dsc_per_label(a: LabelMap, b: LabelMap) -> dict[int, float | None]:
    """Dice overlap 2|A∩B|/(|A|+|B|) per label; None when empty in both."""
    _check_compatible(a, b)
    out: dict[int, float | None] = {}
    for lab in sorted(a.label_ids()):
        ma = a.labels == lab
        mb = b.labels == lab
        na = int(ma.sum())
        nb = int(mb.sum())
        if na == 0 and nb == 0:
            out[lab] = None
            continue
        inter = int(np.logical_and(ma, mb).sum())
        out[lab] = 2.0 * inter / (na + nb)
    return out


def mean_dsc(per_label: dict[int, float | None], background_id: int = 0) -> float:
    """Arithmetic mean over defined, non-background labels."""
    vals = [v for lab, v in per_label.items()
            if lab != background_id and v is not None]
    if not vals:
        raise ValueError("no defined non-background labels to average")
    return float(sum(vals) / len(vals))


def dsc_record(a: LabelMap, b: LabelMap, subject_id: str = "",
               kind: str = "plain") -> DscRecord:
    per_label = dsc_per_label(a, b)
    return DscRecord(subject_id=subject_id, per_label=per_label,
                     mean_dsc=mean_dsc(per_label, a.background_id), kind=kind)


def reproducibility_dsc(seg_pre: LabelMap, seg_post: LabelMap,
                        subject_id: str = "") -> DscRecord:
    """DSC between two automatic segmentations of the same subject."""
    return dsc_record(seg_pre, seg_post, subject_id=subject_id, kind="rdsc")


def region_volume(seg: LabelMap, label: int) -> float:
    """Volume of a labelled region in cm^3."""
    if label not in seg.label_ids():
        raise ValueError(f"label {label} not in vocabulary")
    count = int((seg.labels == label).sum())
    mm3 = count * float(np.prod(np.asarray(seg.voxel_size, dtype=np.float64)))
    return mm3 / 1000.0


def volume_change_stats(records) -> tuple[float, float]:
    """Mean percent change and RMSE (cm^3) over paired volume records."""
    records = list(records)
    if not records:
        raise ValueError("no volume-change records")
    changes = [r.percent_change for r in records]
    sq = [(r.post_volume_cm3 - r.pre_volume_cm3) ** 2 for r in records]
    return float(np.mean(changes)), float(math.sqrt(np.mean(sq)))


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_two_sided_p(ranks: np.ndarray, w_plus: float) -> float:
    # Distribution of W+ over all 2^n equally likely sign assignments,
    # computed by convolution over doubled ranks (half-integer ranks from
    # ties become integers when doubled).
    doubled = np.rint(2.0 * ranks).astype(np.int64)
    total = int(doubled.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:len(counts) - r]
        counts = counts + shifted
    counts /= 2.0 ** len(doubled)
    w2 = int(np.rint(2.0 * w_plus))
    p_le = float(counts[:w2 + 1].sum())
    p_ge = float(counts[w2:].sum())
    return min(1.0, 2.0 * min(p_le, p_ge))


def _normal_two_sided_p(ranks: np.ndarray, w_plus: float) -> float:
    n = len(ranks)
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    # tie correction: subtract sum(t^3 - t)/48 over tie groups
    _, tie_counts = np.unique(ranks, return_counts=True)
    var -= float(((tie_counts ** 3 - tie_counts) / 48.0).sum())
    if var <= 0:
        return 1.0
    d = w_plus - mean
    if d == 0:
        return 1.0
    z = (d - 0.5 * math.copysign(1.0, d)) / math.sqrt(var)
    return min(1.0, math.erfc(abs(z) / math.sqrt(2.0)))


def wilcoxon_signed_rank(x, y, n_comparisons: int = 1, alpha: float = 0.05,
                         comparison: str = "") -> StatResult:
    """Paired two-sided Wilcoxon signed-rank test.

    Zero differences are dropped; |differences| are ranked with average ranks
    for ties; W+ sums the ranks of positive differences. The p-value is exact
    (full enumeration of sign assignments) for reduced n <= 20, and uses a
    tie- and continuity-corrected normal approximation beyond that.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"paired samples must be equal-length 1-D, got "
                         f"{x.shape} and {y.shape}")
    if len(x) < 1:
        raise ValueError("need at least one pair")
    d = x - y
    d = d[d != 0.0]
    if len(d) == 0:
        raise ValueError("all differences are zero; test undefined")
    ranks = _average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    n = len(d)
    if n <= EXACT_ENUMERATION_LIMIT:
        p = _exact_two_sided_p(ranks, w_plus)
    else:
        p = _normal_two_sided_p(ranks, w_plus)
    return StatResult(n_pairs=n, w_plus=w_plus, p_two_sided=p,
                      n_comparisons=n_comparisons, alpha=alpha,
                      comparison=comparison)


def bonferroni(alpha: float, m: int) -> float:
    """Corrected per-comparison significance threshold alpha/m."""
    if m < 1:
        raise ValueError(f"number of comparisons must be >= 1, got {m}")
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    return alpha / m


def write_metrics_csv(records, path) -> None:
    """Per-label DSC rows plus one 'mean' row per record."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "kind", "label_id", "dsc"])
        for r in records:
            for lab in sorted(r.per_label):
                v = r.per_label[lab]
                w.writerow([r.subject_id, r.kind, lab,
                            "" if v is None else f"{v:.6f}"])
            w.writerow([r.subject_id, r.kind, "mean", f"{r.mean_dsc:.6f}"])


def write_summary_csv(rows, path) -> None:
    """Rows of (regime, cohort, mean, sd, n)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["regime", "cohort", "mean", "sd", "n"])
        for regime, cohort, mean, sd, n in rows:
            w.writerow([regime, cohort, f"{mean:.6f}", f"{sd:.6f}", n])


def write_stats_csv(results, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["comparison", "W", "p", "threshold", "significant"])
        for r in results:
            w.writerow([r.comparison, f"{r.w_plus:g}", f"{r.p_two_sided:.6g}",
                        f"{r.bonferroni_alpha:.6g}", str(r.significant).lower()])
