"""Branch fusion: the common/different (C2) attention module and the three
baseline mechanisms (addition, concatenation, cross-attention)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Module, Parameter, SqueezeExcitation, kaiming_normal
from .tensor import ShapeError, Tensor

LOCATIONS = ("input", "middle", "high")
MECHANISMS = ("addition", "concatenation", "cross_attention", "c2fusion")


@dataclass(frozen=True)
class FusionSpec:
    location: str
    mechanism: str

    def __post_init__(self):
        if self.location not in LOCATIONS:
            raise ValueError(f"unknown fusion location {self.location!r}")
        if self.mechanism not in MECHANISMS:
            raise ValueError(f"unknown fusion mechanism {self.mechanism!r}")
        if self.location == "input" and self.mechanism != "concatenation":
            # raw modalities have different channel counts
            raise ValueError("input-level fusion only supports concatenation")


@dataclass
class AttentionMasks:
    m_ap: Tensor
    m_mo: Tensor
    m_co: Tensor
    m_di: Tensor


def _check_same(*tensors: Tensor) -> None:
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError(f"shape mismatch: {shape} vs {t.shape}")


def attention_maps(
    f_ap: Tensor, f_mo: Tensor, e_ap: SqueezeExcitation, e_mo: SqueezeExcitation
) -> tuple[Tensor, Tensor]:
    """Per-position two-way softmax over the SE logits of both branches."""
    _check_same(f_ap, f_mo)
    return T.pairwise_softmax(e_ap(f_ap), e_mo(f_mo))


def common_mask(m_ap: Tensor, m_mo: Tensor, epsilon: float = 1e-6) -> tuple[Tensor, Tensor]:
    """``m_co = spatial min-max norm of min(m_ap, m_mo)`` and ``m_di = 1 - m_co``."""
    _check_same(m_ap, m_mo)
    m_co = T.minmax_normalize_spatial(T.minimum(m_ap, m_mo), epsilon)
    return m_co, 1.0 - m_co


def c2_split(
    f_ap: Tensor,
    f_mo: Tensor,
    masks: AttentionMasks,
    use_m_co: bool = True,
    use_m_di: bool = True,
) -> tuple[Tensor, Tensor, Tensor]:
    """Return ``(f'_ap, f'_mo, f'_co)``.

    With both toggles on::

        f'_co = (f_ap + f_mo) / 2 * m_co
        f'_ap = f_ap * m_ap * m_di
        f'_mo = f_mo * m_mo * m_di

    Turning a toggle off drops that mask factor from its equations.
    """
    _check_same(f_ap, f_mo, masks.m_ap, masks.m_mo, masks.m_co, masks.m_di)
    f_co = (f_ap + f_mo) * 0.5
    if use_m_co:
        f_co = f_co * masks.m_co
    ap = f_ap * masks.m_ap
    mo = f_mo * masks.m_mo
    if use_m_di:
        ap = ap * masks.m_di
        mo = mo * masks.m_di
    return ap, mo, f_co


class C2Module(Module):
    """Extracts a common stream from the appearance and motion branches and
    refines both branches towards what they do not share."""

    def __init__(self, channels: int, reduction: int = 16, epsilon: float = 1e-6,
                 use_m_co: bool = True, use_m_di: bool = True, rng=None):
        super().__init__()
        self.e_ap = SqueezeExcitation(channels, reduction, rng=rng)
        self.e_mo = SqueezeExcitation(channels, reduction, rng=rng)
        self.epsilon = epsilon
        self.use_m_co = use_m_co
        self.use_m_di = use_m_di

    def masks(self, f_ap: Tensor, f_mo: Tensor) -> AttentionMasks:
        m_ap, m_mo = attention_maps(f_ap, f_mo, self.e_ap, self.e_mo)
        m_co, m_di = common_mask(m_ap, m_mo, self.epsilon)
        return AttentionMasks(m_ap, m_mo, m_co, m_di)

    def forward(self, f_ap: Tensor, f_mo: Tensor):
        masks = self.masks(f_ap, f_mo)
        return c2_split(f_ap, f_mo, masks, self.use_m_co, self.use_m_di)


class CrossAttentionFusion(Module):
    """Two-branch fusion: a 1x1 conv on the channel concat yields two logit
    maps, softmaxed against each other, which weight the branches."""

    def __init__(self, channels: int, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(kaiming_normal(rng, (2, 2 * channels, 1, 1), 2 * channels))
        self.bias = Parameter(np.zeros(2))

    def weights(self, f1: Tensor, f2: Tensor) -> tuple[Tensor, Tensor]:
        logits = T.conv2d(T.concat([f1, f2], axis=1), self.weight, 1, 0, bias=self.bias)
        return T.pairwise_softmax(logits[:, 0:1], logits[:, 1:2])

    def forward(self, f1: Tensor, f2: Tensor) -> Tensor:
        w1, w2 = self.weights(f1, f2)
        return f1 * w1 + f2 * w2


def fuse(mechanism: str, features: list, params: CrossAttentionFusion | None = None) -> Tensor:
    """Merge branch features with ``addition``, ``concatenation`` or ``cross_attention``."""
    if not features:
        raise ValueError("nothing to fuse")
    if mechanism == "concatenation":
        return T.concat(features, axis=1)
    if mechanism == "addition":
        _check_same(*features)
        out = features[0]
        for f in features[1:]:
            out = out + f
        return out
    if mechanism == "cross_attention":
        if len(features) != 2:
            raise ValueError(f"cross-attention fuses exactly 2 branches, got {len(features)}")
        _check_same(*features)
        if params is None:
            raise ValueError("cross-attention needs its 1x1 conv parameters")
        return params(*features)
    raise ValueError(f"unknown fusion mechanism {mechanism!r}")
