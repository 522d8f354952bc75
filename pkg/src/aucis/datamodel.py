"""Core sample/dataset types, model configuration, and the on-disk dataset format.

Datasets are column-oriented and immutable after construction; the record view
(`AUSample`) is materialized on indexing. The file format is UTF-8 JSON lines:
one header object followed by one record object per sample.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import DatasetWriteError, DataValidationError

DATASET_FORMAT_VERSION = 1

BACKBONE_KINDS = ("mlp", "smallconv")
HEAD_MODES = ("concat", "sum")
ALPHA_MODES = ("attention", "uniform")


@dataclass(frozen=True, eq=False)
class AUSample:
    """One observation: encoded appearance, subject identity, binary AU labels."""

    sample_id: int
    subject_id: int
    labels: np.ndarray       # uint8 [C], entries in {0, 1}
    observation: np.ndarray  # float64 [d_obs]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AUSample):
            return NotImplemented
        return (
            self.sample_id == other.sample_id
            and self.subject_id == other.subject_id
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.observation, other.observation)
        )


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class Dataset:
    """Immutable collection of AU samples with shared dimensions.

    Stored column-wise (ids, subject ids, label matrix, observation matrix)
    so metric code can work on whole arrays; iteration yields `AUSample`
    records. Safe for shared read access once constructed.
    """

    __slots__ = (
        "sample_ids",
        "subject_ids",
        "labels",
        "observations",
        "num_subjects",
        "num_aus",
        "obs_dim",
        "provenance",
    )

    def __init__(
        self,
        *,
        sample_ids,
        subject_ids,
        labels,
        observations,
        num_subjects: int,
        num_aus: int,
        obs_dim: int,
        provenance: str = "",
    ):
        self.num_subjects = int(num_subjects)
        self.num_aus = int(num_aus)
        self.obs_dim = int(obs_dim)
        self.sample_ids = _frozen(np.asarray(sample_ids, dtype=np.int64).reshape(-1))
        self.subject_ids = _frozen(np.asarray(subject_ids, dtype=np.int64).reshape(-1))
        n = len(self.sample_ids)
        try:
            self.labels = _frozen(
                np.asarray(labels, dtype=np.uint8).reshape(n, self.num_aus if n else 0)
            )
            self.observations = _frozen(
                np.asarray(observations, dtype=np.float64).reshape(n, self.obs_dim if n else 0)
            )
        except ValueError as exc:
            raise DataValidationError(f"column arrays have inconsistent shapes: {exc}") from exc
        self.provenance = str(provenance)
        self._validate()

    @classmethod
    def from_samples(
        cls,
        samples: Sequence[AUSample],
        *,
        num_subjects: int,
        num_aus: int,
        obs_dim: int,
        provenance: str = "",
    ) -> "Dataset":
        n = len(samples)
        labels = np.zeros((n, num_aus), dtype=np.uint8)
        obs = np.zeros((n, obs_dim), dtype=np.float64)
        sids = np.zeros(n, dtype=np.int64)
        ids = np.zeros(n, dtype=np.int64)
        for i, s in enumerate(samples):
            ids[i] = s.sample_id
            sids[i] = s.subject_id
            if len(s.labels) != num_aus:
                raise DataValidationError(
                    f"sample {s.sample_id}: label vector has length {len(s.labels)}, expected {num_aus}"
                )
            if len(s.observation) != obs_dim:
                raise DataValidationError(
                    f"sample {s.sample_id}: observation has length {len(s.observation)}, expected {obs_dim}"
                )
            labels[i] = s.labels
            obs[i] = s.observation
        return cls(
            sample_ids=ids,
            subject_ids=sids,
            labels=labels,
            observations=obs,
            num_subjects=num_subjects,
            num_aus=num_aus,
            obs_dim=obs_dim,
            provenance=provenance,
        )

    def _validate(self) -> None:
        n = len(self.sample_ids)
        if self.num_subjects < 0 or self.num_aus <= 0 or self.obs_dim < 0:
            raise DataValidationError("num_subjects must be >= 0 and num_aus > 0")
        if len(self.subject_ids) != n or len(self.labels) != n or len(self.observations) != n:
            raise DataValidationError("column arrays have inconsistent lengths")
        if n > 0 and self.labels.shape[1] != self.num_aus:
            raise DataValidationError(
                f"label matrix has {self.labels.shape[1]} columns, expected {self.num_aus}"
            )
        if n > 0 and self.observations.shape[1] != self.obs_dim:
            raise DataValidationError(
                f"observation matrix has {self.observations.shape[1]} columns, expected {self.obs_dim}"
            )
        if n > 0:
            bad = ~np.isin(self.labels, (0, 1))
            if bad.any():
                i = int(np.argwhere(bad.any(axis=1))[0][0])
                raise DataValidationError(
                    f"sample {int(self.sample_ids[i])}: labels must be 0/1"
                )
            if self.subject_ids.min() < 0 or self.subject_ids.max() >= self.num_subjects:
                i = int(np.argmax((self.subject_ids < 0) | (self.subject_ids >= self.num_subjects)))
                raise DataValidationError(
                    f"sample {int(self.sample_ids[i])}: subject_id {int(self.subject_ids[i])} "
                    f"outside [0, {self.num_subjects})"
                )
            if not np.isfinite(self.observations).all():
                raise DataValidationError("observations contain non-finite values")
        if len(np.unique(self.sample_ids)) != n:
            raise DataValidationError("sample_id values are not unique")

    def __len__(self) -> int:
        return len(self.sample_ids)

    def __getitem__(self, i: int) -> AUSample:
        return AUSample(
            sample_id=int(self.sample_ids[i]),
            subject_id=int(self.subject_ids[i]),
            labels=self.labels[i],
            observation=self.observations[i],
        )

    def __iter__(self) -> Iterator[AUSample]:
        for i in range(len(self)):
            yield self[i]

    @property
    def samples(self) -> "Dataset":
        return self

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.num_subjects == other.num_subjects
            and self.num_aus == other.num_aus
            and self.obs_dim == other.obs_dim
            and self.provenance == other.provenance
            and np.array_equal(self.sample_ids, other.sample_ids)
            and np.array_equal(self.subject_ids, other.subject_ids)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.observations, other.observations)
        )

    def subjects_present(self) -> np.ndarray:
        return np.unique(self.subject_ids)

    def restrict_to_subjects(
        self,
        subject_ids: Sequence[int],
        *,
        reindex: bool = False,
        provenance_note: str | None = None,
    ) -> "Dataset":
        """Subset to the given subjects.

        With ``reindex=True`` the kept subjects are renumbered densely
        0..m-1 in ascending original order, so the result declares exactly
        the subjects it contains. Observations are untouched (any identity
        encoding inside them keeps its original meaning).
        """
        keep_set = np.asarray(sorted(set(int(s) for s in subject_ids)), dtype=np.int64)
        mask = np.isin(self.subject_ids, keep_set)
        new_sids = self.subject_ids[mask]
        if reindex:
            remap = {int(orig): dense for dense, orig in enumerate(keep_set)}
            new_sids = np.array([remap[int(s)] for s in new_sids], dtype=np.int64)
            num_subjects = len(keep_set)
        else:
            num_subjects = self.num_subjects
        note = provenance_note or f"subset=subjects{keep_set.tolist()}"
        return Dataset(
            sample_ids=self.sample_ids[mask],
            subject_ids=new_sids,
            labels=self.labels[mask],
            observations=self.observations[mask],
            num_subjects=num_subjects,
            num_aus=self.num_aus,
            obs_dim=self.obs_dim,
            provenance=self.provenance + "|" + note if self.provenance else note,
        )


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write the line-oriented dataset file (header line + one record per sample)."""
    header = {
        "version": DATASET_FORMAT_VERSION,
        "num_subjects": dataset.num_subjects,
        "num_aus": dataset.num_aus,
        "obs_dim": dataset.obs_dim,
        "provenance": dataset.provenance,
    }
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for i in range(len(dataset)):
                rec = {
                    "sample_id": int(dataset.sample_ids[i]),
                    "subject_id": int(dataset.subject_ids[i]),
                    "labels": dataset.labels[i].tolist(),
                    # float repr round-trips binary64 exactly (>= 9 significant digits)
                    "observation": dataset.observations[i].tolist(),
                }
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    except OSError as exc:
        raise DatasetWriteError(f"could not write dataset to {path}: {exc}") from exc


def load_dataset(path: str | Path) -> Dataset:
    """Read and validate a dataset file, reporting the offending line on failure."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataValidationError("empty file, expected a header line", line=1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DataValidationError(f"malformed header: {exc}", line=1) from exc
    for key in ("version", "num_subjects", "num_aus", "obs_dim", "provenance"):
        if key not in header:
            raise DataValidationError(f"header missing field {key!r}", line=1)
    if header["version"] != DATASET_FORMAT_VERSION:
        raise DataValidationError(
            f"unsupported dataset format version {header['version']}", line=1
        )
    num_subjects = int(header["num_subjects"])
    num_aus = int(header["num_aus"])
    obs_dim = int(header["obs_dim"])

    n = len(lines) - 1
    sample_ids = np.zeros(n, dtype=np.int64)
    subject_ids = np.zeros(n, dtype=np.int64)
    labels = np.zeros((n, num_aus), dtype=np.uint8)
    observations = np.zeros((n, obs_dim), dtype=np.float64)
    for i, raw in enumerate(lines[1:]):
        lineno = i + 2
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise DataValidationError(f"malformed record: {exc}", line=lineno) from exc
        try:
            sid = int(rec["subject_id"])
            lab = rec["labels"]
            obs = rec["observation"]
            sample_ids[i] = int(rec["sample_id"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataValidationError(f"record missing or malformed field: {exc}", line=lineno) from exc
        if len(lab) != num_aus:
            raise DataValidationError(
                f"label vector has length {len(lab)}, expected {num_aus}", line=lineno
            )
        if any(v not in (0, 1) for v in lab):
            raise DataValidationError("labels must be 0/1", line=lineno)
        if sid < 0 or sid >= num_subjects:
            raise DataValidationError(
                f"subject_id {sid} outside [0, {num_subjects})", line=lineno
            )
        if len(obs) != obs_dim:
            raise DataValidationError(
                f"observation has length {len(obs)}, expected {obs_dim}", line=lineno
            )
        subject_ids[i] = sid
        labels[i] = lab
        observations[i] = obs
    return Dataset(
        sample_ids=sample_ids,
        subject_ids=subject_ids,
        labels=labels,
        observations=observations,
        num_subjects=num_subjects,
        num_aus=num_aus,
        obs_dim=obs_dim,
        provenance=str(header["provenance"]),
    )


@dataclass
class ModelConfig:
    """Shape and behaviour of the recognition model.

    `head` selects how image features and the intervention context are
    combined before the classifier (two linear maps concatenated, or summed);
    `alpha_mode` selects attention-based or uniform prototype weighting.
    """

    d_in: int = 64
    d_m: int = 32
    d_out: int = 64
    num_aus: int = 6
    tau: float = 0.5
    backbone_kind: str = "mlp"
    backbone_shape: tuple[int, ...] = (128,)
    classifier_hidden: int = 16
    head: str = "concat"
    alpha_mode: str = "attention"
    renormalize_weights: bool = False

    def __post_init__(self):
        self.backbone_shape = tuple(int(v) for v in self.backbone_shape)
        for name in ("d_in", "d_m", "d_out", "num_aus", "classifier_hidden"):
            if getattr(self, name) <= 0:
                raise DataValidationError(f"{name} must be positive")
        if not (0.0 < self.tau < 1.0):
            raise DataValidationError("tau must lie in (0, 1)")
        if self.backbone_kind not in BACKBONE_KINDS:
            raise DataValidationError(f"backbone_kind must be one of {BACKBONE_KINDS}")
        if self.head not in HEAD_MODES:
            raise DataValidationError(f"head must be one of {HEAD_MODES}")
        if self.alpha_mode not in ALPHA_MODES:
            raise DataValidationError(f"alpha_mode must be one of {ALPHA_MODES}")
        if any(v <= 0 for v in self.backbone_shape):
            raise DataValidationError("backbone_shape entries must be positive")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["backbone_shape"] = list(self.backbone_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataValidationError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)
