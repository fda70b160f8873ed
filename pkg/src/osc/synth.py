"""Synthetic activations with planted token-persistent outlier channels.

Each group has one designated channel. A token receives a planted outlier
in a group with probability ``rate``; the outlier lands on the designated
channel with probability ``persistence`` and otherwise on a uniformly
chosen other channel of the group. Planted values overwrite the standard
normal base with magnitude ``magnitude * layer_scale`` and a random sign.

Random streams come from numpy's Philox counter-based generator keyed by
``SeedSequence([seed, stream_tag, ...])``. Structure (designated channels)
and token data use separate streams, so held-out tokens drawn with another
``stream`` share the same designated channels.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .errors import ValidationError
from .table import CalibrationSet
from .tensor import ActivationTensor, GroupSpec, PositionId, WeightMatrix

PRNG_ALGORITHM = "numpy.random.Philox(SeedSequence)"
_STRUCTURE, _TOKENS, _WEIGHTS = 0, 1, 2

DEFAULT_PERSISTENCE = {
    PositionId.ATTENTION_IN: 0.7,
    PositionId.WO_IN: 0.7,
    PositionId.W1W3_IN: 0.7,
    PositionId.W2_IN: 0.3,
}


@dataclass(frozen=True)
class SynthSpec:
    tokens: int
    channels: int
    group_size: int = 32
    seed: int = 0
    magnitude: float = 20.0
    persistence: float = 0.7
    rate: float = 0.2
    layer_scale: float = 1.0

    def __post_init__(self):
        GroupSpec.for_channels(self.channels, self.group_size)
        if self.tokens < 1:
            raise ValidationError("token count must be positive")
        for name in ("persistence", "rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {v}")
        if not self.magnitude > 0 or not self.layer_scale > 0:
            raise ValidationError("magnitude and layer scale must be positive")

    @property
    def group_spec(self) -> GroupSpec:
        return GroupSpec.for_channels(self.channels, self.group_size)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    designated: np.ndarray  # K designated local channels
    planted: np.ndarray  # S x K planted local channel, -1 = none

    def to_json(self, spec: Optional[SynthSpec] = None) -> str:
        doc = {
            "prng": PRNG_ALGORITHM,
            "designated": self.designated.tolist(),
            "planted": self.planted.tolist(),
        }
        if spec is not None:
            doc["spec"] = asdict(spec)
        return json.dumps(doc, separators=(",", ":"), sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "GroundTruth":
        doc = json.loads(text)
        return cls(np.array(doc["designated"], dtype=np.int16),
                   np.array(doc["planted"], dtype=np.int16).reshape(-1, len(doc["designated"])))


def expected_density(persistence: float, group_size: int) -> float:
    """Analytic clustering-density target p + (1 - p)/(G - 1)."""
    return persistence + (1.0 - persistence) / (group_size - 1)


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


def designated_channels(spec: SynthSpec) -> np.ndarray:
    g = spec.group_spec
    return _rng(spec.seed, _STRUCTURE).integers(0, g.group_size, size=g.group_count).astype(np.int16)


def generate(spec: SynthSpec, stream: int = 0, position=None, layer=None
             ) -> tuple[ActivationTensor, GroundTruth]:
    g = spec.group_spec
    s, k, gs = spec.tokens, g.group_count, g.group_size
    designated = designated_channels(spec)
    rng = _rng(spec.seed, _TOKENS, stream)

    data = rng.standard_normal((s, k, gs), dtype=np.float32) * np.float32(spec.layer_scale)
    planted_mask = rng.random((s, k)) < spec.rate
    on_designated = rng.random((s, k)) < spec.persistence
    # offset in [1, G) picks one of the other G-1 channels uniformly
    offset = rng.integers(1, gs, size=(s, k)) if gs > 1 else np.zeros((s, k), dtype=np.int64)
    channel = np.where(on_designated, designated[None, :], (designated[None, :] + offset) % gs)
    sign = np.where(rng.random((s, k)) < 0.5, -1.0, 1.0).astype(np.float32)

    planted = np.where(planted_mask, channel, -1).astype(np.int16)
    ss, kk = np.nonzero(planted_mask)
    data[ss, kk, channel[ss, kk]] = sign[ss, kk] * np.float32(spec.magnitude * spec.layer_scale)
    x = ActivationTensor(data.reshape(s, spec.channels), position, layer)
    return x, GroundTruth(designated, planted)


def generate_weight(channels: int, out_channels: int, seed: int, position=None, layer=None
                    ) -> WeightMatrix:
    rng = _rng(seed, _WEIGHTS)
    data = rng.standard_normal((channels, out_channels), dtype=np.float32)
    return WeightMatrix(data / np.float32(np.sqrt(channels)), position, layer)


def cell_seed(master_seed: int, position: PositionId, layer: int) -> int:
    """Per-cell seed derived from the master seed."""
    pidx = list(PositionId).index(position)
    return int(np.random.SeedSequence([master_seed, pidx, layer]).generate_state(1)[0])


@dataclass
class SynthGrid:
    """Calibration sequences, held-out tensors and weights for every cell."""

    calibration: CalibrationSet
    evaluation: dict
    weights: dict
    truth: dict
    specs: dict


def generate_grid(
    positions: Sequence[PositionId],
    layers: int,
    template: SynthSpec,
    master_seed: int = 0,
    sequences: int = 3,
    eval_tokens: Optional[int] = None,
    out_channels: int = 128,
    persistence: Optional[dict] = None,
) -> SynthGrid:
    """Default persistence follows the high/low clustering tiers: 0.7 except
    0.3 at W2 inputs. Calibration uses streams 0..sequences-1; held-out
    tokens use stream ``sequences``."""
    if not positions or layers < 1:
        raise ValidationError("grid needs at least one position and one layer")
    persistence = {**DEFAULT_PERSISTENCE, **(persistence or {})}
    calib = CalibrationSet()
    evaluation, weights, truth, specs = {}, {}, {}, {}
    for p in positions:
        p = PositionId.parse(str(p))
        for layer in range(layers):
            spec = replace(template, seed=cell_seed(master_seed, p, layer),
                           persistence=persistence[p])
            for i in range(sequences):
                x, _ = generate(spec, stream=i, position=p, layer=layer)
                calib.add(x)
            held = replace(spec, tokens=eval_tokens or template.tokens)
            x_eval, gt = generate(held, stream=sequences, position=p, layer=layer)
            evaluation[(p, layer)] = x_eval
            truth[(p, layer)] = gt
            weights[(p, layer)] = generate_weight(spec.channels, out_channels, spec.seed, p, layer)
            specs[(p, layer)] = spec
    return SynthGrid(calib, evaluation, weights, truth, specs)
