"""Subject-exclusive cross-validation, F1 and correlation metrics, oracle alignment.

Identity never leaks across a fold boundary: folds partition subjects, and
every train/test pair shares no subject. Oracle alignment decodes each test
observation back to its discrete appearance code and measures the mean
absolute deviation of model probabilities from the two exact references.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .datamodel import Dataset
from .errors import DataValidationError, DimensionMismatchError, ProvenanceMismatchError
from . import scm
from .model import AUModel, predict_probabilities, binarize


@dataclass(frozen=True)
class FoldPlan:
    """Assignment of every subject to exactly one fold."""

    k: int
    assignments: dict[int, int]

    def __post_init__(self):
        folds = set(self.assignments.values())
        if folds != set(range(self.k)):
            raise DataValidationError("every fold index in [0, k) must be nonempty")
        sizes = [list(self.assignments.values()).count(f) for f in range(self.k)]
        if max(sizes) - min(sizes) > 1:
            raise DataValidationError("fold sizes may differ by at most one subject")

    def subjects_in_fold(self, fold: int) -> list[int]:
        return sorted(s for s, f in self.assignments.items() if f == fold)

    def train_subjects(self, fold: int) -> list[int]:
        return sorted(s for s, f in self.assignments.items() if f != fold)

    def to_dict(self) -> dict:
        return {"k": self.k, "assignments": {str(s): f for s, f in sorted(self.assignments.items())}}

    @classmethod
    def from_dict(cls, d: dict) -> "FoldPlan":
        return cls(k=int(d["k"]), assignments={int(s): int(f) for s, f in d["assignments"].items()})


def split_subject_exclusive(dataset: Dataset, k: int, seed: int) -> FoldPlan:
    """Shuffle subjects deterministically and deal them round-robin into k folds."""
    n = dataset.num_subjects
    if k <= 0 or k > n:
        raise DataValidationError(f"k must lie in [1, {n}], got {k}")
    order = np.random.default_rng(seed).permutation(n)
    return FoldPlan(k=k, assignments={int(s): i % k for i, s in enumerate(order)})


def fold_split(
    dataset: Dataset,
    plan: FoldPlan,
    fold: int,
    *,
    train_subject_subset: list[int] | None = None,
) -> tuple[Dataset, Dataset, dict[int, int]]:
    """Materialize (train, test) for one fold.

    The train split is renumbered to dense subject ids 0..m-1 (ascending
    original order) so the fit loop sees full subject coverage; the returned
    map goes original -> dense. The test split keeps original ids.
    """
    if not (0 <= fold < plan.k):
        raise DataValidationError(f"fold must lie in [0, {plan.k})")
    train_ids = plan.train_subjects(fold)
    if train_subject_subset is not None:
        extra = set(train_subject_subset) - set(train_ids)
        if extra:
            raise DataValidationError(
                f"subjects {sorted(extra)} are not in the training side of fold {fold}"
            )
        train_ids = sorted(train_subject_subset)
    test_ids = plan.subjects_in_fold(fold)
    train = dataset.restrict_to_subjects(
        train_ids, reindex=True, provenance_note=f"train(fold={fold})"
    )
    test = dataset.restrict_to_subjects(
        test_ids, reindex=False, provenance_note=f"test(fold={fold})"
    )
    mapping = {orig: dense for dense, orig in enumerate(train_ids)}
    return train, test, mapping


# ---------------------------------------------------------------------------
# metrics

def f1_scores(pred: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-AU F1 = 2TP / (2TP + FP + FN), plus the unweighted macro mean.

    An AU with no positives in either prediction or truth scores 0.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape or pred.ndim != 2:
        raise DimensionMismatchError(
            f"prediction shape {pred.shape} and truth shape {truth.shape} must be equal 2-D"
        )
    pred = pred.astype(np.int64)
    truth = truth.astype(np.int64)
    tp = ((pred == 1) & (truth == 1)).sum(axis=0)
    fp = ((pred == 1) & (truth == 0)).sum(axis=0)
    fn = ((pred == 0) & (truth == 1)).sum(axis=0)
    denom = 2 * tp + fp + fn
    per_au = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)
    return per_au, float(per_au.mean())


def pcc_matrix(labels: np.ndarray) -> np.ndarray:
    """Pearson correlation between AU columns; constant columns correlate 0."""
    labels = np.asarray(labels, dtype=np.float64)
    if labels.ndim != 2 or labels.shape[0] < 2:
        raise DataValidationError("need a 2-D label matrix with at least two rows")
    centered = labels - labels.mean(axis=0)
    std = centered.std(axis=0)
    C = labels.shape[1]
    out = np.zeros((C, C))
    nonconst = std > 0
    if nonconst.any():
        z = centered[:, nonconst] / std[nonconst]
        out[np.ix_(nonconst, nonconst)] = (z.T @ z) / labels.shape[0]
    np.fill_diagonal(out, 1.0)
    # exact symmetry despite floating-point summation order
    out = (out + out.T) / 2.0
    np.fill_diagonal(out, 1.0)
    return np.clip(out, -1.0, 1.0)


def pcc_cosine(a: np.ndarray, b: np.ndarray, *, upper_triangle: bool = False) -> float:
    """Cosine similarity of two correlation matrices, flattened.

    With upper_triangle=True only strictly-upper entries enter (the unit
    diagonal otherwise inflates similarity).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"matrix shapes differ: {a.shape} vs {b.shape}")
    if upper_triangle:
        iu = np.triu_indices(a.shape[0], k=1)
        va, vb = a[iu], b[iu]
    else:
        va, vb = a.ravel(), b.ravel()
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        raise DataValidationError("cosine similarity undefined for a zero matrix")
    return float(np.dot(va, vb) / (na * nb))


# ---------------------------------------------------------------------------
# oracle alignment

def wrap_oracle_predictor(spec: scm.SCMSpec, kind: str) -> Callable[[np.ndarray], np.ndarray]:
    """An ideal predictor that answers with the exact conditional or stratified estimate."""
    oracle = scm.ExactOracle(spec)
    if kind not in ("conditional", "interventional"):
        raise DataValidationError("kind must be 'conditional' or 'interventional'")

    def predictor(observations: np.ndarray) -> np.ndarray:
        observations = np.atleast_2d(np.asarray(observations, dtype=np.float64))
        out = np.zeros((observations.shape[0], spec.num_aus))
        cache: dict[tuple[int, int], np.ndarray] = {}
        for i, row in enumerate(observations):
            code = scm.decode_observation(row, spec.num_aus, spec.num_subjects)
            key = (code.au_bits(), code.subject_channel)
            if key not in cache:
                cache[key] = (
                    oracle.conditional(code) if kind == "conditional" else oracle.interventional(code)
                )
            out[i] = cache[key]
        return out

    return predictor


def oracle_alignment(
    model: AUModel | Callable[[np.ndarray], np.ndarray],
    spec: scm.SCMSpec,
    test: Dataset,
) -> dict[str, float]:
    """Mean |p̂ - reference| against both exact references, over samples and AUs.

    Refuses datasets whose provenance does not carry the generator hash: the
    references are meaningless for foreign data.
    """
    h = scm.spec_hash(spec)
    if f"hash={h}" not in test.provenance:
        raise ProvenanceMismatchError(
            f"dataset provenance {test.provenance!r} does not reference generator hash {h}"
        )
    if len(test) == 0:
        raise DataValidationError("cannot measure alignment on an empty dataset")
    if callable(model) and not isinstance(model, AUModel):
        probs = np.atleast_2d(model(test.observations))
    else:
        probs = predict_probabilities(model, test.observations)

    oracle = scm.ExactOracle(spec)
    cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
    do_ref = np.zeros_like(probs)
    cond_ref = np.zeros_like(probs)
    for i, row in enumerate(test.observations):
        code = scm.decode_observation(row, spec.num_aus, spec.num_subjects)
        key = (code.au_bits(), code.subject_channel)
        if key not in cache:
            cache[key] = (oracle.interventional(code), oracle.conditional(code))
        do_ref[i], cond_ref[i] = cache[key]
    return {
        "mad_to_do": float(np.mean(np.abs(probs - do_ref))),
        "mad_to_cond": float(np.mean(np.abs(probs - cond_ref))),
    }


# ---------------------------------------------------------------------------
# full report

@dataclass
class EvalReport:
    """Metrics of one model on one test split."""

    per_au_f1: np.ndarray
    macro_f1: float
    per_subject_pcc: dict[int, np.ndarray]       # prediction-based, per test subject
    per_subject_pcc_gt: dict[int, np.ndarray]    # ground-truth-based
    pcc_cosine_to_gt: dict[int, float]           # full-matrix flatten
    pcc_cosine_to_gt_upper: dict[int, float]     # strictly-upper-triangle flatten
    skipped_subjects: list[int] = field(default_factory=list)
    oracle_alignment: dict[str, float] | None = None

    def mean_pcc_cosine(self, *, upper_triangle: bool = False) -> float:
        vals = self.pcc_cosine_to_gt_upper if upper_triangle else self.pcc_cosine_to_gt
        if not vals:
            return float("nan")
        return float(np.mean(list(vals.values())))

    def to_dict(self) -> dict:
        return {
            "per_au_f1": self.per_au_f1.tolist(),
            "macro_f1": self.macro_f1,
            "per_subject_pcc": {str(s): m.tolist() for s, m in sorted(self.per_subject_pcc.items())},
            "per_subject_pcc_gt": {str(s): m.tolist() for s, m in sorted(self.per_subject_pcc_gt.items())},
            "pcc_cosine_to_gt": {str(s): v for s, v in sorted(self.pcc_cosine_to_gt.items())},
            "pcc_cosine_to_gt_upper": {str(s): v for s, v in sorted(self.pcc_cosine_to_gt_upper.items())},
            "skipped_subjects": self.skipped_subjects,
            "oracle_alignment": self.oracle_alignment,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            per_au_f1=np.asarray(d["per_au_f1"], dtype=np.float64),
            macro_f1=float(d["macro_f1"]),
            per_subject_pcc={int(s): np.asarray(m) for s, m in d["per_subject_pcc"].items()},
            per_subject_pcc_gt={int(s): np.asarray(m) for s, m in d["per_subject_pcc_gt"].items()},
            pcc_cosine_to_gt={int(s): float(v) for s, v in d["pcc_cosine_to_gt"].items()},
            pcc_cosine_to_gt_upper={int(s): float(v) for s, v in d["pcc_cosine_to_gt_upper"].items()},
            skipped_subjects=[int(s) for s in d.get("skipped_subjects", [])],
            oracle_alignment=d.get("oracle_alignment"),
        )

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def evaluate_model(
    model: AUModel,
    test: Dataset,
    *,
    spec: scm.SCMSpec | None = None,
    pcc_min_samples: int = 2,
) -> EvalReport:
    """F1, per-subject correlation structure, and optional oracle alignment."""
    if len(test) == 0:
        raise DataValidationError("cannot evaluate on an empty dataset")
    probs = predict_probabilities(model, test.observations)
    preds = binarize(probs, model.config.tau)
    per_au, macro = f1_scores(preds, test.labels)

    pcc_pred: dict[int, np.ndarray] = {}
    pcc_gt: dict[int, np.ndarray] = {}
    cos_full: dict[int, float] = {}
    cos_upper: dict[int, float] = {}
    skipped: list[int] = []
    for s in test.subjects_present():
        rows = test.subject_ids == s
        if rows.sum() < pcc_min_samples:
            skipped.append(int(s))
            warnings.warn(f"subject {int(s)}: fewer than {pcc_min_samples} test samples, PCC skipped")
            continue
        mp = pcc_matrix(preds[rows])
        mg = pcc_matrix(test.labels[rows])
        pcc_pred[int(s)] = mp
        pcc_gt[int(s)] = mg
        cos_full[int(s)] = pcc_cosine(mp, mg)
        try:
            cos_upper[int(s)] = pcc_cosine(mp, mg, upper_triangle=True)
        except DataValidationError:
            cos_upper[int(s)] = 0.0  # all off-diagonal correlations vanished
    alignment = None
    if spec is not None:
        alignment = oracle_alignment(model, spec, test)
    return EvalReport(
        per_au_f1=per_au,
        macro_f1=macro,
        per_subject_pcc=pcc_pred,
        per_subject_pcc_gt=pcc_gt,
        pcc_cosine_to_gt=cos_full,
        pcc_cosine_to_gt_upper=cos_upper,
        skipped_subjects=skipped,
        oracle_alignment=alignment,
    )


def write_f1_csv(report: EvalReport, path: str | Path) -> None:
    """Comma-separated per-AU table with a trailing Avg column."""
    C = len(report.per_au_f1)
    header = ",".join(f"AU{j + 1}" for j in range(C)) + ",Avg"
    values = ",".join(f"{v:.4f}" for v in report.per_au_f1) + f",{report.macro_f1:.4f}"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n" + values + "\n")


# ---------------------------------------------------------------------------
# feature export (for external embedding/visualization tooling)

def export_features(model: AUModel, dataset: Dataset, path: str | Path) -> None:
    """Write backbone features per sample in the dataset line syntax."""
    header = {
        "version": 1,
        "num_subjects": dataset.num_subjects,
        "num_aus": dataset.num_aus,
        "obs_dim": model.config.d_in,
        "provenance": (dataset.provenance + "|features") if dataset.provenance else "features",
    }
    with torch.no_grad():
        feats = model.backbone(torch.from_numpy(dataset.observations.copy())).numpy()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for i in range(len(dataset)):
            rec = {
                "sample_id": int(dataset.sample_ids[i]),
                "subject_id": int(dataset.subject_ids[i]),
                "labels": dataset.labels[i].tolist(),
                "f_cur": feats[i].tolist(),
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_features(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Read a feature export; returns (sample_ids, subject_ids, labels, features)."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataValidationError("empty feature file", line=1)
    header = json.loads(lines[0])
    d = int(header["obs_dim"])
    ids, sids, labels, feats = [], [], [], []
    for i, raw in enumerate(lines[1:]):
        rec = json.loads(raw)
        if len(rec["f_cur"]) != d:
            raise DataValidationError(f"feature vector has length {len(rec['f_cur'])}, expected {d}", line=i + 2)
        ids.append(rec["sample_id"])
        sids.append(rec["subject_id"])
        labels.append(rec["labels"])
        feats.append(rec["f_cur"])
    return (
        np.asarray(ids, dtype=np.int64),
        np.asarray(sids, dtype=np.int64),
        np.asarray(labels, dtype=np.uint8),
        np.asarray(feats, dtype=np.float64),
    )
