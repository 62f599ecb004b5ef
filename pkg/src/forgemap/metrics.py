"""Quantitative evaluation: map quality (PSNR/SSIM) and detection AUC.

AUC uses the Mann-Whitney rank statistic (ties counted one half), which is
exact, invariant under monotone score transforms, and directly checkable
against O(n^2) pair counting. Group averaging first replaces each group's
scores by their mean, mirroring per-clip aggregation of per-frame scores.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .dssim import DEFAULT_PARAMS, ssim_map
from .errors import ForgemapError, ShapeError


@dataclass(frozen=True)
class ScoredSample:
    id: str
    group_id: str
    label: int  # 1 = fake
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ForgemapError(f"score {self.score} outside [0, 1] for id {self.id}")
        if self.label not in (0, 1):
            raise ForgemapError(f"label must be 0 or 1, got {self.label}")


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE); +inf sentinel when the maps are identical."""
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shapes differ {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def ssim_scalar(a: np.ndarray, b: np.ndarray, params=DEFAULT_PARAMS) -> float:
    """Spatial mean of the per-pixel SSIM map."""
    return float(ssim_map(np.squeeze(a), np.squeeze(b), params).mean())


def _rank_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores), dtype=np.float64)
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ForgemapError("auc: both labels must be present")
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc(samples: list[ScoredSample], group_average: bool = False) -> float:
    """Probability a random fake outscores a random real, ties counted 1/2."""
    if group_average:
        by_group: dict[str, list[ScoredSample]] = {}
        for s in samples:
            by_group.setdefault(s.group_id, []).append(s)
        scores, labels = [], []
        for gid in sorted(by_group):
            members = by_group[gid]
            if len({m.label for m in members}) != 1:
                raise ForgemapError(f"auc: group {gid} mixes labels")
            scores.append(float(np.mean([m.score for m in members])))
            labels.append(members[0].label)
        return _rank_auc(np.asarray(scores), np.asarray(labels))
    scores = np.asarray([s.score for s in samples], dtype=np.float64)
    labels = np.asarray([s.label for s in samples], dtype=np.int64)
    return _rank_auc(scores, labels)


def auc_bruteforce(scores, labels) -> float:
    """O(n^2) pair counting; the oracle for the rank implementation."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise ForgemapError("auc: both labels must be present")
    total = 0.0
    for p in pos:
        total += float((p > neg).sum()) + 0.5 * float((p == neg).sum())
    return total / (len(pos) * len(neg))


def localization_report(gen_maps: np.ndarray, gt_maps: np.ndarray, ids=None,
                        split: str = "test", config_hash: str = "") -> list[dict]:
    """Per-sample PSNR/SSIM rows plus one aggregate row.

    Aggregate PSNR averages the finite values; the count of +inf sentinels
    (identical maps) is reported separately.
    """
    if gen_maps.shape != gt_maps.shape:
        raise ShapeError(
            f"localization_report: unpaired inputs {gen_maps.shape} vs {gt_maps.shape}")
    n = gen_maps.shape[0]
    ids = ids if ids is not None else [str(i) for i in range(n)]
    rows = []
    psnrs, ssims = [], []
    inf_count = 0
    for i in range(n):
        p = psnr(gen_maps[i], gt_maps[i])
        s = ssim_scalar(gen_maps[i], gt_maps[i])
        if math.isinf(p):
            inf_count += 1
        else:
            psnrs.append(p)
        ssims.append(s)
        rows.append({"row": "sample", "id": ids[i], "split": split,
                     "config_hash": config_hash, "psnr": p, "ssim": s})
    rows.append({
        "row": "aggregate", "id": "mean", "split": split, "config_hash": config_hash,
        "psnr": float(np.mean(psnrs)) if psnrs else math.inf,
        "ssim": float(np.mean(ssims)),
        "psnr_std": float(np.std(psnrs)) if psnrs else 0.0,
        "ssim_std": float(np.std(ssims)),
        "psnr_inf_count": inf_count,
    })
    return rows


def write_metric_csv(path, rows: list[dict]) -> None:
    """CSV with the fixed header ``metric,split,config_hash,value``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "split", "config_hash", "value"])
        for r in rows:
            w.writerow([r["metric"], r["split"], r["config_hash"], repr(float(r["value"]))])


def write_report_csv(path, rows: list[dict]) -> None:
    fields = sorted({k for r in rows for k in r})
    lead = [f for f in ("row", "id", "split", "config_hash") if f in fields]
    fields = lead + [f for f in fields if f not in lead]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow(r)
