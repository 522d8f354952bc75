"""Backbones, classifier, and the two compared model compositions.

`baseline` is backbone -> classifier; `cisnet` inserts the subject
deconfounding pass between them. Both share the same backbone/classifier
factories so ablations differ only in the insertion.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .cis import CISParameters, ConfounderDictionary, MemoryBanks, cis_forward
from .datamodel import ModelConfig
from .errors import DataValidationError, DimensionMismatchError, ModuleNotInitializedError

LOGIT_CAP = 50.0

VARIANTS = ("baseline", "cisnet")


def _init_linear(layer: nn.Linear, rng: np.random.Generator) -> None:
    bound = 1.0 / math.sqrt(layer.in_features)
    with torch.no_grad():
        layer.weight.copy_(torch.from_numpy(rng.uniform(-bound, bound, size=tuple(layer.weight.shape))))
        layer.bias.copy_(torch.from_numpy(rng.uniform(-bound, bound, size=tuple(layer.bias.shape))))


def _init_conv(layer: nn.Conv2d, rng: np.random.Generator) -> None:
    fan_in = layer.in_channels * layer.kernel_size[0] * layer.kernel_size[1]
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        layer.weight.copy_(torch.from_numpy(rng.uniform(-bound, bound, size=tuple(layer.weight.shape))))
        layer.bias.copy_(torch.from_numpy(rng.uniform(-bound, bound, size=tuple(layer.bias.shape))))


class MLPBackbone(nn.Module):
    """Flat-vector feature extractor: obs_dim -> hidden... -> d_in."""

    def __init__(self, obs_dim: int, hidden: Sequence[int], d_in: int, rng: np.random.Generator):
        super().__init__()
        dims = [obs_dim, *hidden, d_in]
        layers: list[nn.Module] = []
        for a, b in zip(dims[:-1], dims[1:]):
            lin = nn.Linear(a, b, dtype=torch.float64)
            _init_linear(lin, rng)
            layers.append(lin)
            layers.append(nn.ReLU())
        layers.pop()  # no nonlinearity after the last projection
        self.net = nn.Sequential(*layers)
        self.obs_dim = obs_dim

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


class SmallConvBackbone(nn.Module):
    """Two-stage conv extractor for observations viewed as a small square grid.

    Flat observations are zero-padded to the next perfect square and reshaped
    to one channel.
    """

    def __init__(self, obs_dim: int, channels: Sequence[int], d_in: int, rng: np.random.Generator):
        super().__init__()
        if len(channels) != 2:
            raise DataValidationError("smallconv backbone_shape must list exactly two channel counts")
        self.obs_dim = obs_dim
        self.grid = int(math.ceil(math.sqrt(obs_dim)))
        c1, c2 = channels
        self.conv1 = nn.Conv2d(1, c1, kernel_size=3, padding=1, dtype=torch.float64)
        self.conv2 = nn.Conv2d(c1, c2, kernel_size=3, padding=1, dtype=torch.float64)
        self.proj = nn.Linear(c2 * self.grid * self.grid, d_in, dtype=torch.float64)
        _init_conv(self.conv1, rng)
        _init_conv(self.conv2, rng)
        _init_linear(self.proj, rng)

    def forward(self, x: Tensor) -> Tensor:
        pad = self.grid * self.grid - self.obs_dim
        if pad:
            x = torch.nn.functional.pad(x, (0, pad))
        g = x.reshape(-1, 1, self.grid, self.grid)
        g = torch.relu(self.conv1(g))
        g = torch.relu(self.conv2(g))
        return self.proj(g.reshape(g.shape[0], -1))


class Classifier(nn.Module):
    """Two affine layers with a rectifier in between."""

    def __init__(self, in_dim: int, hidden: int, num_aus: int, rng: np.random.Generator):
        super().__init__()
        l1 = nn.Linear(in_dim, hidden, dtype=torch.float64)
        l2 = nn.Linear(hidden, num_aus, dtype=torch.float64)
        _init_linear(l1, rng)
        _init_linear(l2, rng)
        self.net = nn.Sequential(l1, nn.ReLU(), l2)

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


class AUModel(nn.Module):
    """Composed recognizer: backbone, optional intervention pass, classifier.

    `dictionary` and `banks` are training-time statistics attached by the fit
    loop (or checkpoint restore), not module parameters.
    """

    def __init__(
        self,
        variant: str,
        config: ModelConfig,
        obs_dim: int,
        backbone: nn.Module,
        classifier: nn.Module,
        cis: CISParameters | None,
    ):
        super().__init__()
        if variant not in VARIANTS:
            raise DataValidationError(f"variant must be one of {VARIANTS}")
        if (variant == "cisnet") != (cis is not None):
            raise DataValidationError("cis parameters present iff variant is cisnet")
        self.variant = variant
        self.config = config
        self.obs_dim = obs_dim
        self.backbone = backbone
        self.classifier = classifier
        self.cis = cis
        self.dictionary: ConfounderDictionary | None = None
        self.banks: MemoryBanks | None = None

    def features(self, observation) -> Tensor:
        return self.backbone(_as_batch_f64(observation)[0])

    def forward(self, observation) -> Tensor:
        return forward_logits(self, observation)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_model(variant: str, config: ModelConfig, obs_dim: int, seed: int = 0) -> AUModel:
    """Deterministic construction; same (variant, config, obs_dim, seed) gives identical weights."""
    rng = np.random.default_rng(seed)
    if config.backbone_kind == "mlp":
        backbone: nn.Module = MLPBackbone(obs_dim, config.backbone_shape, config.d_in, rng)
    else:
        backbone = SmallConvBackbone(obs_dim, config.backbone_shape, config.d_in, rng)
    cis = None
    clf_in = config.d_in
    if variant == "cisnet":
        cis = CISParameters.initialized(config.d_in, config.d_m, config.d_out, rng)
        clf_in = 2 * config.d_out if config.head == "concat" else config.d_out
    classifier = Classifier(clf_in, config.classifier_hidden, config.num_aus, rng)
    return AUModel(variant, config, obs_dim, backbone, classifier, cis)


def forward_logits(model: AUModel, observation) -> Tensor:
    """Per-AU logits; for cisnet the dictionary must already be built."""
    x, squeeze = _as_batch_f64(observation)
    if x.shape[1] != model.obs_dim:
        raise DimensionMismatchError(
            f"observation width {x.shape[1]} != model obs_dim {model.obs_dim}"
        )
    f = model.backbone(x)
    if model.variant == "cisnet":
        if model.dictionary is None:
            raise ModuleNotInitializedError(
                "cisnet forward requires a built confounder dictionary"
            )
        cfg = model.config
        out = cis_forward(
            f,
            model.dictionary,
            model.cis,
            head=cfg.head,
            alpha_mode=cfg.alpha_mode,
            renormalize=cfg.renormalize_weights,
        )
        logits = model.classifier(out.head_out)
    else:
        logits = model.classifier(f)
    return logits[0] if squeeze else logits


def predict_probabilities(model: AUModel, observation) -> np.ndarray:
    """Elementwise logistic of capped logits, as a plain float array in (0, 1)."""
    with torch.no_grad():
        logits = forward_logits(model, observation)
        probs = torch.sigmoid(logits.clamp(-LOGIT_CAP, LOGIT_CAP))
    return probs.numpy()


def binarize(probs: np.ndarray, tau: float) -> np.ndarray:
    """Threshold probabilities at tau; ties at exactly tau count as occurrences."""
    if not (0.0 < tau < 1.0):
        raise DataValidationError("tau must lie in (0, 1)")
    return (np.asarray(probs, dtype=np.float64) >= tau).astype(np.uint8)


def _as_batch_f64(observation) -> tuple[Tensor, bool]:
    if isinstance(observation, np.ndarray) and not observation.flags.writeable:
        observation = observation.copy()
    t = torch.as_tensor(np.asarray(observation), dtype=torch.float64)
    if t.dim() == 1:
        return t.unsqueeze(0), True
    if t.dim() == 2:
        return t, False
    raise DimensionMismatchError(f"expected 1-D or 2-D observation array, got {t.dim()}-D")
