"""Subject-deconfounding intervention module.

Per-subject memory banks accumulate backbone features during an epoch; at the
epoch barrier they are condensed into a dictionary of subject prototypes
(mean feature per subject) with empirical priors (sample-count ratios). The
forward pass attends over the prototypes with scaled dot-product attention,
aggregates them weighted by attention times prior, and maps image feature and
aggregate through two linear heads.

Prototypes are statistics, not parameters: gradients never flow into the
dictionary, only into the four weight matrices and whatever produced f_cur.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .errors import (
    DimensionMismatchError,
    EmptyDictionaryError,
    EmptySubjectError,
    ModuleNotInitializedError,
)

PRIOR_SUM_TOL = 1e-9


@dataclass
class SubjectMemoryBank:
    """Running feature sum and count for one subject.

    The prototype (mean feature) is `running_sum / count`; storing the sum
    keeps memory constant while yielding the exact mean. `features` keeps the
    raw vectors only when constructed with store_features=True, for
    brute-force cross-checks.
    """

    subject_id: int
    running_sum: Tensor
    count: int = 0
    features: list[Tensor] | None = None

    @classmethod
    def empty(cls, subject_id: int, d_in: int, *, store_features: bool = False) -> "SubjectMemoryBank":
        return cls(
            subject_id=int(subject_id),
            running_sum=torch.zeros(d_in, dtype=torch.float64),
            count=0,
            features=[] if store_features else None,
        )

    @property
    def prototype(self) -> Tensor:
        if self.count == 0:
            raise EmptySubjectError(self.subject_id)
        return self.running_sum / self.count

    def clone(self) -> "SubjectMemoryBank":
        return SubjectMemoryBank(
            subject_id=self.subject_id,
            running_sum=self.running_sum.clone(),
            count=self.count,
            features=None if self.features is None else [f.clone() for f in self.features],
        )


def bank_update(bank: SubjectMemoryBank, f: Tensor) -> SubjectMemoryBank:
    """Accumulate one feature vector into the bank (in place; returns the bank)."""
    f = torch.as_tensor(f, dtype=torch.float64).detach()
    if f.shape != bank.running_sum.shape:
        raise DimensionMismatchError(
            f"feature has shape {tuple(f.shape)}, bank expects {tuple(bank.running_sum.shape)}"
        )
    if not torch.isfinite(f).all():
        raise DimensionMismatchError("feature vector contains non-finite values")
    bank.running_sum += f
    bank.count += 1
    if bank.features is not None:
        bank.features.append(f.clone())
    return bank


class MemoryBanks:
    """One memory bank per tracked subject, with batched accumulation."""

    def __init__(self, subject_ids: Sequence[int], d_in: int, *, store_features: bool = False):
        ids = sorted(int(s) for s in subject_ids)
        if len(set(ids)) != len(ids):
            raise DimensionMismatchError("duplicate subject ids in memory bank set")
        self.d_in = int(d_in)
        self.store_features = store_features
        self._banks = {s: SubjectMemoryBank.empty(s, d_in, store_features=store_features) for s in ids}

    @property
    def subject_ids(self) -> list[int]:
        return list(self._banks.keys())

    def bank(self, subject_id: int) -> SubjectMemoryBank:
        return self._banks[int(subject_id)]

    def banks(self) -> list[SubjectMemoryBank]:
        return list(self._banks.values())

    def reset(self) -> None:
        for s in self._banks:
            self._banks[s] = SubjectMemoryBank.empty(s, self.d_in, store_features=self.store_features)

    def update_batch(self, subject_ids: np.ndarray, feats: Tensor) -> None:
        feats = feats.detach()
        if feats.shape[1] != self.d_in:
            raise DimensionMismatchError(
                f"features have width {feats.shape[1]}, banks expect {self.d_in}"
            )
        for s in np.unique(subject_ids):
            bank = self._banks.get(int(s))
            if bank is None:
                raise EmptySubjectError(int(s), f"subject {int(s)} has no allocated memory bank")
            rows = feats[np.asarray(subject_ids) == s]
            bank.running_sum += rows.sum(dim=0)
            bank.count += rows.shape[0]
            if bank.features is not None:
                bank.features.extend(r.clone() for r in rows)

    def clone(self) -> "MemoryBanks":
        out = MemoryBanks(self.subject_ids, self.d_in, store_features=self.store_features)
        for s, bank in self._banks.items():
            out._banks[s] = bank.clone()
        return out


@dataclass
class ConfounderDictionary:
    """Subject prototypes with empirical priors, frozen between epoch barriers."""

    prototypes: Tensor          # [N, d_in], float64, no grad
    priors: Tensor              # [N], sums to 1
    subject_ids: np.ndarray     # [N], original subject ids per row
    epoch_built: int = 0

    def __post_init__(self):
        self.prototypes = torch.as_tensor(self.prototypes, dtype=torch.float64).detach()
        self.priors = torch.as_tensor(self.priors, dtype=torch.float64).detach()
        self.subject_ids = np.asarray(self.subject_ids, dtype=np.int64)
        if self.prototypes.shape[0] != self.priors.shape[0] or len(self.subject_ids) != self.priors.shape[0]:
            raise DimensionMismatchError("prototypes, priors, subject_ids must agree in length")
        if self.priors.shape[0] > 0:
            if (self.priors < 0).any():
                raise DimensionMismatchError("priors must be nonnegative")
            if abs(float(self.priors.sum()) - 1.0) > 1e-6:
                raise DimensionMismatchError("priors must sum to 1")

    def __len__(self) -> int:
        return self.prototypes.shape[0]

    def clone(self) -> "ConfounderDictionary":
        return ConfounderDictionary(
            prototypes=self.prototypes.clone(),
            priors=self.priors.clone(),
            subject_ids=self.subject_ids.copy(),
            epoch_built=self.epoch_built,
        )


def rebuild_dictionary(
    banks: Iterable[SubjectMemoryBank] | MemoryBanks, epoch: int = 0
) -> ConfounderDictionary:
    """Condense banks to prototypes (mean feature) and priors (count ratios)."""
    bank_list = banks.banks() if isinstance(banks, MemoryBanks) else list(banks)
    if not bank_list:
        raise EmptyDictionaryError("cannot rebuild a dictionary from zero banks")
    bank_list = sorted(bank_list, key=lambda b: b.subject_id)
    for b in bank_list:
        if b.count == 0:
            raise EmptySubjectError(b.subject_id)
    counts = torch.tensor([b.count for b in bank_list], dtype=torch.float64)
    prototypes = torch.stack([b.running_sum / b.count for b in bank_list])
    return ConfounderDictionary(
        prototypes=prototypes,
        priors=counts / counts.sum(),
        subject_ids=np.array([b.subject_id for b in bank_list], dtype=np.int64),
        epoch_built=int(epoch),
    )


class CISParameters(nn.Module):
    """The four trainable maps of the intervention head (no biases)."""

    def __init__(self, d_in: int, d_m: int, d_out: int):
        super().__init__()
        self.W_Q = nn.Parameter(torch.zeros(d_m, d_in, dtype=torch.float64))
        self.W_K = nn.Parameter(torch.zeros(d_m, d_in, dtype=torch.float64))
        self.W_X = nn.Parameter(torch.zeros(d_out, d_in, dtype=torch.float64))
        self.W_S = nn.Parameter(torch.zeros(d_out, d_in, dtype=torch.float64))

    @classmethod
    def initialized(cls, d_in: int, d_m: int, d_out: int, rng: np.random.Generator) -> "CISParameters":
        params = cls(d_in, d_m, d_out)
        bound = 1.0 / math.sqrt(d_in)
        with torch.no_grad():
            for w in (params.W_Q, params.W_K, params.W_X, params.W_S):
                w.copy_(torch.from_numpy(rng.uniform(-bound, bound, size=tuple(w.shape))))
        return params


@dataclass
class CISOutput:
    r_cur: Tensor     # [d_in] or [B, d_in]
    alphas: Tensor    # [N] or [B, N]
    head_out: Tensor  # concat: [2*d_out]; sum: [d_out] (batched accordingly)


def attention_weights(f_cur: Tensor, dictionary: ConfounderDictionary, params: CISParameters) -> Tensor:
    """Scaled dot-product attention of the query feature against all prototypes.

    alpha_i = softmax_i( (W_Q f)^T (W_K s_i) / sqrt(d_m) ), normalized across
    the dictionary entries so alpha is a distribution over subjects.
    """
    if len(dictionary) == 0:
        raise EmptyDictionaryError("attention over an empty dictionary")
    f2, squeeze = _as_batch(f_cur)
    d_in = params.W_Q.shape[1]
    if f2.shape[1] != d_in:
        raise DimensionMismatchError(f"feature width {f2.shape[1]} != d_in {d_in}")
    if dictionary.prototypes.shape[1] != d_in:
        raise DimensionMismatchError("dictionary prototype width does not match d_in")
    d_m = params.W_Q.shape[0]
    q = f2 @ params.W_Q.T                                  # [B, d_m]
    k = dictionary.prototypes @ params.W_K.T               # [N, d_m]
    logits = (q @ k.T) / math.sqrt(d_m)                    # [B, N]
    alphas = torch.softmax(logits, dim=-1)
    return alphas[0] if squeeze else alphas


def aggregate_r(
    alphas: Tensor, dictionary: ConfounderDictionary, *, renormalize: bool = False
) -> Tensor:
    """Weighted prototype aggregate r = sum_i alpha_i * P(s_i) * s_i.

    The combined weights alpha_i * P(s_i) are kept as-is by default (they do
    not sum to one); `renormalize` rescales them to a convex combination.
    """
    a2, squeeze = _as_batch(alphas)
    if a2.shape[1] != len(dictionary):
        raise DimensionMismatchError(
            f"got {a2.shape[1]} attention weights for {len(dictionary)} prototypes"
        )
    w = a2 * dictionary.priors[None, :]                    # [B, N]
    if renormalize:
        w = w / w.sum(dim=-1, keepdim=True)
    r = w @ dictionary.prototypes                          # [B, d_in]
    return r[0] if squeeze else r


def cis_forward(
    f_cur: Tensor,
    dictionary: ConfounderDictionary | None,
    params: CISParameters,
    *,
    head: str = "concat",
    alpha_mode: str = "attention",
    renormalize: bool = False,
) -> CISOutput:
    """Full intervention pass: attention, prototype aggregation, linear heads.

    head="concat" emits [W_X f ; W_S r]; head="sum" emits W_X f + W_S r.
    Differentiable in f_cur and all four maps; the dictionary is a constant.
    """
    if dictionary is None or len(dictionary) == 0:
        raise ModuleNotInitializedError(
            "confounder dictionary not built; run the initialization epoch first"
        )
    f2, squeeze = _as_batch(f_cur)
    if alpha_mode == "attention":
        alphas = attention_weights(f2, dictionary, params)
    elif alpha_mode == "uniform":
        n = len(dictionary)
        alphas = torch.full((f2.shape[0], n), 1.0 / n, dtype=torch.float64)
    else:
        raise DimensionMismatchError(f"unknown alpha_mode {alpha_mode!r}")
    r = aggregate_r(alphas, dictionary, renormalize=renormalize)
    hx = f2 @ params.W_X.T
    hs = r @ params.W_S.T
    if head == "concat":
        out = torch.cat([hx, hs], dim=-1)
    elif head == "sum":
        out = hx + hs
    else:
        raise DimensionMismatchError(f"unknown head mode {head!r}")
    if squeeze:
        return CISOutput(r_cur=r[0], alphas=alphas[0], head_out=out[0])
    return CISOutput(r_cur=r, alphas=alphas, head_out=out)


def _as_batch(t: Tensor) -> tuple[Tensor, bool]:
    t = torch.as_tensor(t, dtype=torch.float64)
    if t.dim() == 1:
        return t.unsqueeze(0), True
    if t.dim() == 2:
        return t, False
    raise DimensionMismatchError(f"expected 1-D or 2-D tensor, got {t.dim()}-D")
