"""Synthetic generative process for subject-confounded AU data, plus exact oracles.

The generative graph: a subject and an emotion are drawn; the emotion's
template activates base AU labels; the subject's habit rules then rewrite
them; the appearance renders the final labels (bit flips) together with a
noisy subject identity cue. Labels depend on the subject only through the
rules, and the appearance depends on the subject only through the identity
cue, which makes the subject a classic confounder between appearance and
labels.

Because every variable is finite, both the observational conditional
P(y_j = 1 | x) and the stratified prior-weighted estimate
sum_s P(y_j = 1 | x, s) P(s) can be computed by exact enumeration over the
2^C label states, which is what `ExactOracle` does.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .datamodel import Dataset
from .errors import (
    DataValidationError,
    EnumerationInfeasibleError,
    EvidenceImpossibleError,
)

MAX_ENUMERABLE_AUS = 12
PROB_SUM_TOL = 1e-9


@dataclass(frozen=True)
class SubjectRule:
    """Habit rule: if AU `src_au` is on after earlier rules, turn `dst_au` on with prob `strength`."""

    src_au: int
    dst_au: int
    strength: float


@dataclass(frozen=True, eq=False)
class SCMSpec:
    """Full parameterization of the synthetic generator.

    emotion_templates[e, j] is the base activation probability of AU j under
    emotion e (shared by all subjects); subject_rules[s] is an ordered list
    applied once, left to right, after the base draw (per-subject habits).
    label_flip_noise corrupts the rendered AU bits; subject_code_noise is the
    probability the rendered identity cue is replaced by a uniformly random one.
    """

    num_subjects: int
    num_aus: int
    num_emotions: int
    subject_prior: np.ndarray      # [N]
    emotion_prior: np.ndarray      # [E]
    emotion_templates: np.ndarray  # [E, C]
    subject_rules: tuple[tuple[SubjectRule, ...], ...]
    label_flip_noise: float | tuple[float, ...]  # scalar rate, or one rate per AU
    subject_code_noise: float

    def __post_init__(self):
        object.__setattr__(self, "subject_prior", _frozen(np.asarray(self.subject_prior, dtype=np.float64)))
        object.__setattr__(self, "emotion_prior", _frozen(np.asarray(self.emotion_prior, dtype=np.float64)))
        object.__setattr__(
            self, "emotion_templates", _frozen(np.asarray(self.emotion_templates, dtype=np.float64))
        )
        object.__setattr__(
            self,
            "subject_rules",
            tuple(tuple(SubjectRule(int(r.src_au), int(r.dst_au), float(r.strength)) for r in rules)
                  for rules in self.subject_rules),
        )
        eps = self.label_flip_noise
        if np.ndim(eps) == 0:
            object.__setattr__(self, "label_flip_noise", float(eps))
        else:
            object.__setattr__(self, "label_flip_noise", tuple(float(v) for v in eps))
        validate_spec(self)

    @property
    def flip_rates(self) -> np.ndarray:
        """Per-AU bit-flip rates (a scalar rate broadcasts to every AU)."""
        if isinstance(self.label_flip_noise, float):
            return np.full(self.num_aus, self.label_flip_noise)
        return np.asarray(self.label_flip_noise, dtype=np.float64)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SCMSpec):
            return NotImplemented
        return spec_to_dict(self) == spec_to_dict(other)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def validate_spec(spec: SCMSpec) -> None:
    N, C, E = spec.num_subjects, spec.num_aus, spec.num_emotions
    if N <= 0 or C <= 0 or E <= 0:
        raise DataValidationError("num_subjects, num_aus, num_emotions must be positive")
    if C > MAX_ENUMERABLE_AUS:
        raise EnumerationInfeasibleError(
            f"num_aus={C} exceeds the exact-enumeration limit of {MAX_ENUMERABLE_AUS}"
        )
    for name, vec, size in (("subject_prior", spec.subject_prior, N),
                            ("emotion_prior", spec.emotion_prior, E)):
        if vec.shape != (size,):
            raise DataValidationError(f"{name} must have shape ({size},)")
        if (vec < 0).any():
            raise DataValidationError(f"{name} entries must be >= 0")
        if abs(float(vec.sum()) - 1.0) > PROB_SUM_TOL:
            raise DataValidationError(f"{name} must sum to 1 within {PROB_SUM_TOL}")
    if spec.emotion_templates.shape != (E, C):
        raise DataValidationError(f"emotion_templates must have shape ({E}, {C})")
    if ((spec.emotion_templates < 0) | (spec.emotion_templates > 1)).any():
        raise DataValidationError("emotion_templates entries must lie in [0, 1]")
    if len(spec.subject_rules) != N:
        raise DataValidationError(f"subject_rules must have one rule list per subject ({N})")
    for s, rules in enumerate(spec.subject_rules):
        for r in rules:
            if not (0 <= r.src_au < C and 0 <= r.dst_au < C):
                raise DataValidationError(f"subject {s}: rule AU index outside [0, {C})")
            if not (0.0 <= r.strength <= 1.0):
                raise DataValidationError(f"subject {s}: rule strength must lie in [0, 1]")
    rates = spec.flip_rates
    if rates.shape != (C,):
        raise DataValidationError(f"label_flip_noise must be a scalar or give one rate per AU ({C})")
    if ((rates < 0.0) | (rates >= 0.5)).any():
        raise DataValidationError("label_flip_noise rates must lie in [0, 0.5)")
    if not (0.0 <= spec.subject_code_noise <= 1.0):
        raise DataValidationError("subject_code_noise must lie in [0, 1]")


# ---------------------------------------------------------------------------
# spec serialization

def spec_to_dict(spec: SCMSpec) -> dict:
    return {
        "num_subjects": spec.num_subjects,
        "num_aus": spec.num_aus,
        "num_emotions": spec.num_emotions,
        "subject_prior": spec.subject_prior.tolist(),
        "emotion_prior": spec.emotion_prior.tolist(),
        "emotion_templates": spec.emotion_templates.tolist(),
        "subject_rules": [
            [[r.src_au, r.dst_au, r.strength] for r in rules] for rules in spec.subject_rules
        ],
        "label_flip_noise": (
            spec.label_flip_noise
            if isinstance(spec.label_flip_noise, float)
            else list(spec.label_flip_noise)
        ),
        "subject_code_noise": spec.subject_code_noise,
    }


def spec_from_dict(d: dict) -> SCMSpec:
    try:
        return SCMSpec(
            num_subjects=int(d["num_subjects"]),
            num_aus=int(d["num_aus"]),
            num_emotions=int(d["num_emotions"]),
            subject_prior=np.asarray(d["subject_prior"], dtype=np.float64),
            emotion_prior=np.asarray(d["emotion_prior"], dtype=np.float64),
            emotion_templates=np.asarray(d["emotion_templates"], dtype=np.float64),
            subject_rules=tuple(
                tuple(SubjectRule(int(a), int(b), float(p)) for a, b, p in rules)
                for rules in d["subject_rules"]
            ),
            label_flip_noise=(
                tuple(float(v) for v in d["label_flip_noise"])
                if isinstance(d["label_flip_noise"], (list, tuple))
                else float(d["label_flip_noise"])
            ),
            subject_code_noise=float(d["subject_code_noise"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataValidationError(f"malformed generator config: {exc}") from exc


def save_spec(spec: SCMSpec, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(spec_to_dict(spec), fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_spec(path: str | Path) -> SCMSpec:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            return spec_from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise DataValidationError(f"malformed generator config {path}: {exc}") from exc


def spec_hash(spec: SCMSpec) -> str:
    """Stable content hash of the generator parameters (16 hex chars)."""
    canon = json.dumps(spec_to_dict(spec), sort_keys=True)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# appearance codes and observation encoding

@dataclass(frozen=True, eq=False)
class AppearanceCode:
    """Discrete appearance content: noisy AU rendering plus an identity cue."""

    au_channel: np.ndarray  # uint8 [C]
    subject_channel: int

    def __post_init__(self):
        object.__setattr__(self, "au_channel", _frozen(np.asarray(self.au_channel, dtype=np.uint8)))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AppearanceCode):
            return NotImplemented
        return self.subject_channel == other.subject_channel and np.array_equal(
            self.au_channel, other.au_channel
        )

    def au_bits(self) -> int:
        return int(np.dot(self.au_channel.astype(np.int64), 1 << np.arange(len(self.au_channel))))


def encode_observation(code: AppearanceCode, num_subjects: int) -> np.ndarray:
    """AU bits concatenated with a one-hot identity block, as reals in {0, 1}."""
    C = len(code.au_channel)
    obs = np.zeros(C + num_subjects, dtype=np.float64)
    obs[:C] = code.au_channel
    obs[C + code.subject_channel] = 1.0
    return obs


def decode_observation(obs: np.ndarray, num_aus: int, num_subjects: int) -> AppearanceCode:
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape != (num_aus + num_subjects,):
        raise DataValidationError(
            f"observation has length {obs.shape}, expected ({num_aus + num_subjects},)"
        )
    au = obs[:num_aus]
    onehot = obs[num_aus:]
    if not np.all(np.isclose(au, np.round(au), atol=1e-6)) or not np.isin(np.round(au), (0, 1)).all():
        raise DataValidationError("observation AU block is not binary")
    hot = np.flatnonzero(np.isclose(onehot, 1.0, atol=1e-6))
    if len(hot) != 1 or not np.allclose(np.delete(onehot, hot[0]), 0.0, atol=1e-6):
        raise DataValidationError("observation identity block is not one-hot")
    return AppearanceCode(au_channel=np.round(au).astype(np.uint8), subject_channel=int(hot[0]))


# ---------------------------------------------------------------------------
# forward sampler

def sample_dataset(spec: SCMSpec, n: int, seed: int) -> Dataset:
    """Forward-sample the generative graph; deterministic given the seed.

    For each sample: subject then emotion are drawn from their priors,
    base labels follow the emotion template, the subject's rules rewrite
    them in order, and the appearance renders the result with bit-flip and
    identity-cue noise. Stored labels are post-rule, pre-noise.
    """
    if n <= 0:
        raise DataValidationError("n must be positive")
    validate_spec(spec)
    N, C = spec.num_subjects, spec.num_aus
    rng = np.random.default_rng(seed)

    subjects = rng.choice(N, size=n, p=spec.subject_prior)
    emotions = rng.choice(spec.num_emotions, size=n, p=spec.emotion_prior)
    y = (rng.random((n, C)) < spec.emotion_templates[emotions]).astype(np.uint8)

    for s in range(N):
        of_subject = subjects == s
        for rule in spec.subject_rules[s]:
            fires = of_subject & (y[:, rule.src_au] == 1) & (rng.random(n) < rule.strength)
            y[fires, rule.dst_au] = 1

    labels = y.copy()
    au_channel = y ^ (rng.random((n, C)) < spec.flip_rates[None, :])
    replaced = rng.random(n) < spec.subject_code_noise
    subject_channel = np.where(replaced, rng.integers(0, N, size=n), subjects)

    observations = np.zeros((n, C + N), dtype=np.float64)
    observations[:, :C] = au_channel
    observations[np.arange(n), C + subject_channel] = 1.0

    return Dataset(
        sample_ids=np.arange(n),
        subject_ids=subjects,
        labels=labels,
        observations=observations,
        num_subjects=N,
        num_aus=C,
        obs_dim=C + N,
        provenance=f"scm;hash={spec_hash(spec)};seed={seed};n={n}",
    )


# ---------------------------------------------------------------------------
# exact enumeration oracle

class ExactOracle:
    """Exact label-probability queries by enumeration over the 2^C label states.

    Precomputes, per subject, the full post-rule label distribution
    P(y | s) = sum_e P(e) * rules_s(template_e). Queries then reduce to
    weighted sums against the appearance likelihood of the queried code.
    """

    def __init__(self, spec: SCMSpec):
        validate_spec(spec)
        self.spec = spec
        C = spec.num_aus
        self._n_states = 1 << C
        states = np.arange(self._n_states)
        # bit_masks[j, y] == 1 when label state y has AU j active
        self._bit_masks = ((states[None, :] >> np.arange(C)[:, None]) & 1).astype(np.float64)
        self._label_dist = np.stack(
            [self._subject_label_dist(s) for s in range(spec.num_subjects)]
        )  # [N, 2^C]

    def _subject_label_dist(self, s: int) -> np.ndarray:
        spec = self.spec
        dist = np.zeros(self._n_states)
        for e in range(spec.num_emotions):
            d = np.ones(1)
            for j in range(spec.num_aus):
                p = spec.emotion_templates[e, j]
                d = np.concatenate([d * (1.0 - p), d * p])  # bit j becomes the next-highest bit
            for rule in spec.subject_rules[s]:
                d = _apply_rule(d, rule, self._n_states)
            dist += spec.emotion_prior[e] * d
        return dist

    def _appearance_likelihood(self, au_bits: int) -> np.ndarray:
        """P(rendered AU bits | true labels y) for every label state y."""
        rates = self.spec.flip_rates
        like = np.ones(self._n_states)
        for j in range(self.spec.num_aus):
            a_j = (au_bits >> j) & 1
            like *= np.where(self._bit_masks[j] == a_j, 1.0 - rates[j], rates[j])
        return like

    def _identity_likelihood(self, channel: int) -> np.ndarray:
        """P(identity cue | subject s) for every subject s."""
        N, eta = self.spec.num_subjects, self.spec.subject_code_noise
        pc = np.full(N, eta / N)
        pc[channel] += 1.0 - eta
        return pc

    def _query(self, x: AppearanceCode) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Per-subject evidence pieces for code x.

        Returns (joint, L, M, posterior): joint[s] = P(x, s), L[s] = P(au bits | s),
        M[s, j] = P(au bits, y_j = 1 | s), posterior[s] = P(s | x).
        """
        spec = self.spec
        if len(x.au_channel) != spec.num_aus:
            raise DataValidationError("appearance code has the wrong number of AU bits")
        if not (0 <= x.subject_channel < spec.num_subjects):
            raise DataValidationError("appearance code identity cue outside subject range")
        w = self._appearance_likelihood(x.au_bits())          # [2^C]
        wy = self._label_dist * w[None, :]                    # [N, 2^C]
        L = wy.sum(axis=1)                                    # [N]
        M = wy @ self._bit_masks.T                            # [N, C]
        joint = spec.subject_prior * self._identity_likelihood(x.subject_channel) * L
        px = float(joint.sum())
        if px <= 0.0:
            raise EvidenceImpossibleError("appearance code has zero probability under the generator")
        posterior = joint / px
        return joint, L, M, posterior

    def conditional(self, x: AppearanceCode) -> np.ndarray:
        """P(y_j = 1 | x) per AU, via posterior-weighted per-subject conditionals."""
        _, L, M, posterior = self._query(x)
        out = np.zeros(self.spec.num_aus)
        for s in range(self.spec.num_subjects):
            if posterior[s] > 0.0:
                out += posterior[s] * (M[s] / L[s])
        return out

    def interventional(self, x: AppearanceCode) -> np.ndarray:
        """Prior-weighted stratified estimate sum_s P(y_j = 1 | x, s) P(s).

        Strata with zero evidence probability fall back to the marginal
        conditional so the weights still sum to one (the stratified formula
        is undefined there).
        """
        joint, L, M, _ = self._query(x)
        cond = self.conditional(x)
        out = np.zeros(self.spec.num_aus)
        for s in range(self.spec.num_subjects):
            stratum = M[s] / L[s] if joint[s] > 0.0 else cond
            out += self.spec.subject_prior[s] * stratum
        return out

    def gap(self, x: AppearanceCode) -> np.ndarray:
        return np.abs(self.interventional(x) - self.conditional(x))

    def observation_probability(self, x: AppearanceCode) -> float:
        spec = self.spec
        w = self._appearance_likelihood(x.au_bits())
        L = (self._label_dist * w[None, :]).sum(axis=1)
        return float((spec.subject_prior * self._identity_likelihood(x.subject_channel) * L).sum())

    def reachable_codes(self) -> Iterator[AppearanceCode]:
        """All appearance codes with positive probability, in (au bits, cue) order."""
        C, N = self.spec.num_aus, self.spec.num_subjects
        for bits in range(self._n_states):
            au = np.array([(bits >> j) & 1 for j in range(C)], dtype=np.uint8)
            for c in range(N):
                x = AppearanceCode(au_channel=au, subject_channel=c)
                if self.observation_probability(x) > 0.0:
                    yield x


def _apply_rule(dist: np.ndarray, rule: SubjectRule, n_states: int) -> np.ndarray:
    """Push a label-state distribution through one stochastic habit rule."""
    src_bit, dst_bit = 1 << rule.src_au, 1 << rule.dst_au
    states = np.arange(n_states)
    movable = (states & src_bit != 0) & (states & dst_bit == 0)
    out = dist.copy()
    moved = dist[movable] * rule.strength
    out[movable] -= moved
    out[states[movable] | dst_bit] += moved
    return out


_ORACLE_CACHE: dict[str, ExactOracle] = {}


def _oracle_for(spec: SCMSpec) -> ExactOracle:
    key = spec_hash(spec)
    oracle = _ORACLE_CACHE.get(key)
    if oracle is None:
        oracle = ExactOracle(spec)
        _ORACLE_CACHE[key] = oracle
    return oracle


def exact_conditional(spec: SCMSpec, x: AppearanceCode) -> np.ndarray:
    return _oracle_for(spec).conditional(x)


def exact_interventional(spec: SCMSpec, x: AppearanceCode) -> np.ndarray:
    return _oracle_for(spec).interventional(x)


def confounding_gap(spec: SCMSpec, x: AppearanceCode) -> np.ndarray:
    return _oracle_for(spec).gap(x)


# ---------------------------------------------------------------------------
# bundled generator presets

def demo_spec(
    num_subjects: int = 8,
    num_aus: int = 6,
    num_emotions: int = 4,
    *,
    num_hidden_aus: int = 2,
    visible_flip_noise: float = 0.1,
    hidden_flip_noise: float = 0.45,
    subject_code_noise: float = 0.3,
    rules_per_subject: int = 2,
    rule_strength: float = 0.9,
    seed: int = 7,
) -> SCMSpec:
    """Confounded desk-scale preset.

    The last `num_hidden_aus` AUs render almost invisibly (flip rate near
    0.5), so their occurrence must be inferred from relations rather than
    read off the appearance. Universal structure: each emotion activates two
    core visible AUs strongly, one support AU at an intermediate rate, and
    mildly modulates the hidden AUs. Habit structure: each subject's rules
    write from a visible AU into a hidden AU, so the correct fill-in for a
    hidden AU depends on who is being observed; the identity cue is the only
    appearance trace of that, and it lies with probability subject_code_noise.
    """
    rng = np.random.default_rng(seed)
    C, E = num_aus, num_emotions
    if not (0 <= num_hidden_aus < C):
        raise DataValidationError("num_hidden_aus must lie in [0, num_aus)")
    visible = list(range(C - num_hidden_aus))
    hidden = list(range(C - num_hidden_aus, C))

    templates = np.full((E, C), 0.1)
    v = len(visible)
    for e in range(E):
        core = [visible[(2 * e) % v], visible[(2 * e + 1) % v]]
        support = visible[(2 * e + 2) % v]
        templates[e, core] = 0.8
        templates[e, support] = 0.5
    for e in range(E):
        for j in hidden:
            templates[e, j] = 0.1 + 0.2 * ((e + j) % 2)

    rules = []
    dst_pool = hidden if hidden else list(range(C))
    for _ in range(num_subjects):
        own = []
        for _ in range(rules_per_subject):
            src = int(rng.choice(visible if visible else range(C)))
            dst = int(rng.choice([d for d in dst_pool if d != src]))
            own.append(SubjectRule(src, dst, rule_strength))
        rules.append(tuple(own))

    flip = np.full(C, visible_flip_noise)
    flip[hidden] = hidden_flip_noise
    return SCMSpec(
        num_subjects=num_subjects,
        num_aus=C,
        num_emotions=E,
        subject_prior=np.full(num_subjects, 1.0 / num_subjects),
        emotion_prior=np.full(E, 1.0 / E),
        emotion_templates=templates,
        subject_rules=tuple(rules),
        label_flip_noise=tuple(flip.tolist()),
        subject_code_noise=subject_code_noise,
    )


def unconfounded_spec(
    num_subjects: int = 8,
    num_aus: int = 6,
    num_emotions: int = 4,
    *,
    num_hidden_aus: int = 2,
    visible_flip_noise: float = 0.1,
    hidden_flip_noise: float = 0.45,
    seed: int = 7,
) -> SCMSpec:
    """Matched preset with no habit rules and a fully random identity cue."""
    return demo_spec(
        num_subjects,
        num_aus,
        num_emotions,
        num_hidden_aus=num_hidden_aus,
        visible_flip_noise=visible_flip_noise,
        hidden_flip_noise=hidden_flip_noise,
        subject_code_noise=1.0,
        rules_per_subject=0,
        seed=seed,
    )
