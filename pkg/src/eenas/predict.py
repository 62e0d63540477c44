"""Weak surrogate predictors.

Ridge regressions over hand-crafted chromosome features rank candidates
between true evaluations. Accuracy is fit directly and clamped to [0, 100];
the energy-delay product is fit in log space so predictions stay positive
across its wide dynamic range. Predictors are refit from scratch on the
cumulative labeled archive each search iteration.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .arch import Chromosome, SpaceConfig, chromosome_hash
from .workload import backbone_mac_fractions


@dataclass(frozen=True)
class LabeledRecord:
    """One truly evaluated search point."""

    genes: tuple[int, ...]
    acc_avg: float
    et_avg: float

    @property
    def key(self) -> str:
        return chromosome_hash(Chromosome(self.genes))


class LabeledSet:
    """Cumulative archive of evaluated architectures, keyed by chromosome
    hash; re-adding a key keeps the latest record. Iteration is in hash
    order so downstream fits are order-independent."""

    def __init__(self, records: Iterable[LabeledRecord] = ()):
        self._records: dict[str, LabeledRecord] = {}
        for rec in records:
            self.add(rec)

    def add(self, record: LabeledRecord) -> None:
        self._records[record.key] = record

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, key: str) -> bool:
        return key in self._records

    def __iter__(self) -> Iterator[LabeledRecord]:
        for key in sorted(self._records):
            yield self._records[key]

    def get(self, key: str) -> LabeledRecord | None:
        return self._records.get(key)

    def keys(self) -> set[str]:
        return set(self._records)

    def copy(self) -> "LabeledSet":
        return LabeledSet(self._records.values())

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self:
                fh.write(
                    json.dumps(
                        {
                            "genes": list(rec.genes),
                            "acc_avg": rec.acc_avg,
                            "et_avg": rec.et_avg,
                        },
                        sort_keys=True,
                    )
                )
                fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "LabeledSet":
        out = cls()
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                data = json.loads(line)
                out.add(
                    LabeledRecord(
                        genes=tuple(int(g) for g in data["genes"]),
                        acc_avg=float(data["acc_avg"]),
                        et_avg=float(data["et_avg"]),
                    )
                )
        return out


def featurize(chrom: Chromosome, space: SpaceConfig) -> np.ndarray:
    """Fixed-length feature vector: exit count, per-mount occupancy bits,
    per-mount cumulative MAC fraction (zero when vacant), per-exit head
    depth and bit width over all mount slots (final slot last), and the
    backbone bit width. Injective over a space because occupancy, head and
    quant genes each get their own coordinates."""
    if len(chrom.genes) != space.gene_length:
        raise ValueError(
            f"expected {space.gene_length} genes, got {len(chrom.genes)}"
        )
    fractions = backbone_mac_fractions(space.backbone)
    labels = space.backbone.optional_mounts
    occupancy = []
    frac = []
    depth = []
    bits = []
    for j, label in enumerate(labels):
        present, head_idx, quant_idx = chrom.genes[3 * j : 3 * j + 3]
        occupancy.append(float(present))
        frac.append(fractions[label] if present else 0.0)
        depth.append(float(space.head_options[head_idx].depth) if present else 0.0)
        bits.append(float(space.exit_bit_options[quant_idx]) if present else 0.0)
    fh, fq = chrom.genes[-2], chrom.genes[-1]
    depth.append(float(space.head_options[fh].depth))
    bits.append(float(space.exit_bit_options[fq]))
    n_exits = sum(occupancy) + 1.0
    return np.array(
        [n_exits, *occupancy, *frac, *depth, *bits, float(space.backbone_bits)]
    )


@dataclass(frozen=True)
class Predictor:
    """Deterministic linear model on standardized features."""

    target: str  # "accuracy" or "et"
    feature_mean: tuple[float, ...]
    feature_std: tuple[float, ...]
    coefficients: tuple[float, ...]
    intercept: float
    train_mse: float


def fit(
    labeled: LabeledSet,
    space: SpaceConfig,
    target: str = "accuracy",
    ridge: float = 1e-3,
) -> Predictor:
    """Closed-form ridge fit on the archive.

    Features are z-scored (constant features neutralized); the intercept is
    the target mean, so the model can never do worse than the mean
    predictor on its own training set. ``target="et"`` fits log values.
    """
    if target not in ("accuracy", "et"):
        raise ValueError("target must be 'accuracy' or 'et'")
    if ridge < 0:
        raise ValueError("ridge strength must be >= 0")
    records = list(labeled)
    if len(records) < 2:
        raise ValueError("need at least two labeled records to fit")
    X = np.stack([featurize(Chromosome(r.genes), space) for r in records])
    if target == "accuracy":
        y = np.array([r.acc_avg for r in records])
    else:
        if any(r.et_avg <= 0 for r in records):
            raise ValueError("energy-delay labels must be positive")
        y = np.log(np.array([r.et_avg for r in records]))

    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std == 0] = 1.0
    Z = (X - mean) / std
    yc = y - y.mean()
    if ridge > 0:
        gram = Z.T @ Z + ridge * np.eye(Z.shape[1])
        coef = np.linalg.solve(gram, Z.T @ yc)
    else:
        coef = np.linalg.lstsq(Z, yc, rcond=None)[0]
    residual = yc - Z @ coef
    return Predictor(
        target=target,
        feature_mean=tuple(mean),
        feature_std=tuple(std),
        coefficients=tuple(coef),
        intercept=float(y.mean()),
        train_mse=float(np.mean(residual**2)),
    )


def predict(pred: Predictor, chrom: Chromosome, space: SpaceConfig) -> float:
    """Deterministic estimate; accuracy clamps to [0, 100], energy-delay
    maps back out of log space so it stays positive."""
    feats = featurize(chrom, space)
    if len(feats) != len(pred.feature_mean):
        raise ValueError("feature length does not match the fitted predictor")
    z = (feats - np.array(pred.feature_mean)) / np.array(pred.feature_std)
    value = pred.intercept + float(z @ np.array(pred.coefficients))
    if pred.target == "accuracy":
        return min(max(value, 0.0), 100.0)
    return math.exp(value)
