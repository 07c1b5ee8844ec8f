"""MultiGait variants and the shared gait head.

Streams are per-frame 2-D CNNs (Conv0 then Stage1..Stage4); a sequence
[B, T, C, H, W] is folded into the batch axis for the convolutional part and
unfolded again for temporal pooling.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .fusion import C2Module, CrossAttentionFusion, FusionSpec, fuse
from .nn import BNNeck, Conv2d, ConvBNReLU, Module, ModuleDict, SeparateFC, Stage
from .tensor import ShapeError, Tensor

MODALITY_CHANNELS = {"sil": 1, "par": 1, "flow": 3}
VARIANTS = ("s", "p", "f", "2s", "s+p", "s+f", "s+p+f", "++")
STRIDES = (1, 2, 2, 1)
INPUT_HW = (64, 44)

_UNIMODAL = {"s": "sil", "p": "par", "f": "flow", "2s": "sil"}
_PAIRS = {"s+p": ("sil", "par"), "s+f": ("sil", "flow")}


@dataclass
class ModelConfig:
    variant: str = "++"
    stem: int = 16
    widths: tuple = (16, 32, 64, 128)
    blocks: tuple = (1, 1, 1, 1)
    parts: int = 16
    embed_dim: int = 64
    num_classes: int = 4
    fusion: FusionSpec | None = None
    use_m_co: bool = True
    use_m_di: bool = True
    double_merge: bool = False
    se_reduction: int = 16
    appearance: tuple = ("sil", "par")
    motion: tuple = ("flow",)
    input_hw: tuple = INPUT_HW

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.blocks = tuple(int(b) for b in self.blocks)
        self.appearance = tuple(self.appearance)
        self.motion = tuple(self.motion)
        self.input_hw = tuple(self.input_hw)
        if self.variant in _PAIRS and self.fusion is None:
            self.fusion = FusionSpec("high", "addition")
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"invalid variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if len(self.widths) != 4 or len(self.blocks) != 4:
            raise ValueError("widths and blocks need one entry per stage (4)")
        if min(self.widths) < 1 or self.stem < 1 or min(self.blocks) < 1:
            raise ValueError("widths, stem and block counts must be positive")
        if self.variant != "++" and (not self.use_m_co or not self.use_m_di or self.double_merge):
            raise ValueError("C2 toggles only apply to the '++' variant")
        if self.variant in _PAIRS:
            if self.fusion is None or self.fusion.mechanism == "c2fusion":
                raise ValueError(f"variant {self.variant} needs an addition/concatenation/cross_attention fusion")
        elif self.fusion is not None and self.variant not in _PAIRS:
            raise ValueError(f"variant {self.variant} does not take a fusion spec")
        for m in self.appearance + self.motion:
            if m not in MODALITY_CHANNELS:
                raise ValueError(f"unknown modality {m!r}")
        h = self.input_hw[0]
        for s in STRIDES:
            h = (h - 1) // s + 1
        if h % self.parts:
            raise ValueError(f"{self.parts} parts do not divide final feature height {h}")

    @property
    def stage_widths(self) -> tuple:
        """Stem plus four stage widths actually built (doubled for ``2s``)."""
        k = 2 if self.variant == "2s" else 1
        return (self.stem * k,) + tuple(w * k for w in self.widths)

    @property
    def modalities(self) -> tuple:
        if self.variant in _UNIMODAL:
            return (_UNIMODAL[self.variant],)
        if self.variant in _PAIRS:
            return _PAIRS[self.variant]
        return self.appearance + self.motion

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    @property
    def uses_c2(self) -> bool:
        return self.variant == "++" and (self.use_m_co or self.use_m_di)


class Stream(Module):
    """Consecutive stages ``first..last`` of one branch (0 is Conv0)."""

    def __init__(self, c_in: int, widths: tuple, blocks: tuple, first: int, last: int, rng):
        super().__init__()
        self.first, self.last = first, last
        self.stages = ModuleDict()
        c = c_in
        for k in range(first, last + 1):
            if k == 0:
                self.stages["conv0"] = ConvBNReLU(c, widths[0], rng=rng)
            else:
                self.stages[f"stage{k}"] = Stage(c, widths[k], STRIDES[k - 1], blocks[k - 1], rng=rng)
            c = widths[k]

    def forward(self, x: Tensor) -> Tensor:
        for _, stage in self.stages.items():
            x = stage(x)
        return x


def temporal_pool(x: Tensor) -> Tensor:
    """Max over the frame axis of [B, T, C, H, W]."""
    if x.ndim != 5:
        raise ShapeError(f"expected [B, T, C, H, W], got {x.shape}")
    if x.shape[1] < 1:
        raise ValueError("cannot pool an empty sequence")
    return T.reduce("max", x, 1)


def horizontal_pool(x: Tensor, parts: int) -> Tensor:
    """Split H into ``parts`` equal strips and max-pool each to a vector: [B, P, C]."""
    B, C, H, W = x.shape
    if parts < 1 or H % parts:
        raise ValueError(f"{parts} parts do not divide height {H}")
    strips = T.reshape(x, (B, C, parts, H // parts, W))
    pooled = T.reduce("max", strips, (3, 4))
    return T.transpose(pooled, (0, 2, 1))


class GaitHead(Module):
    def __init__(self, channels: int, config: ModelConfig, rng):
        super().__init__()
        self.parts = config.parts
        self.fc = SeparateFC(config.parts, channels, config.embed_dim, rng=rng)
        self.bnneck = BNNeck(config.parts, config.embed_dim, config.num_classes, rng=rng)

    def forward(self, frames: Tensor, batch: int) -> tuple[Tensor, Tensor]:
        BT, C, H, W = frames.shape
        seq = T.reshape(frames, (batch, BT // batch, C, H, W))
        pooled = horizontal_pool(temporal_pool(seq), self.parts)
        return self.bnneck(self.fc(pooled))


class MultiGait(Module):
    """One configurable MultiGait network.

    ``forward`` takes a dict mapping modality name ("sil", "par", "flow") to a
    [B, T, C, 64, 44] tensor and returns (embeddings [B, P, D], logits
    [B, P, num_classes]).
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        object.__setattr__(self, "config", config)
        rng = np.random.default_rng(seed)
        w = config.stage_widths
        v = config.variant
        ch = MODALITY_CHANNELS
        self.streams = ModuleDict()
        self.fusion_params = None
        self.c2 = None
        self.merge = None
        self.merge2 = None
        if v in _UNIMODAL:
            self.layout = "single"
            self.streams[config.modalities[0]] = Stream(ch[config.modalities[0]], w, config.blocks, 0, 4, rng)
            trunk_in, last = None, 4
        elif v in _PAIRS:
            a, b = config.modalities
            loc, mech = config.fusion.location, config.fusion.mechanism
            self.layout = f"pair-{loc}"
            if loc == "input":
                self.streams[f"{a}+{b}"] = Stream(ch[a] + ch[b], w, config.blocks, 0, 4, rng)
                trunk_in, last = None, 4
            else:
                last = 1 if loc == "middle" else 3
                self.streams[a] = Stream(ch[a], w, config.blocks, 0, last, rng)
                self.streams[b] = Stream(ch[b], w, config.blocks, 0, last, rng)
                if mech == "cross_attention":
                    self.fusion_params = CrossAttentionFusion(w[last], rng=rng)
                trunk_in = 2 * w[last] if mech == "concatenation" else w[last]
        else:
            app = "+".join(config.appearance)
            mot = "+".join(config.motion)
            c_app = sum(ch[m] for m in config.appearance)
            c_mot = sum(ch[m] for m in config.motion)
            if not config.uses_c2:
                # both masks off: the naive baseline (input concat + high cross-attention)
                self.layout = "naive"
                self.streams[app] = Stream(c_app, w, config.blocks, 0, 3, rng)
                self.streams[mot] = Stream(c_mot, w, config.blocks, 0, 3, rng)
                self.fusion_params = CrossAttentionFusion(w[3], rng=rng)
                trunk_in, last = w[3], 3
            else:
                self.layout = "c2"
                self.streams[app] = Stream(c_app, w, config.blocks, 0, 1, rng)
                self.streams[mot] = Stream(c_mot, w, config.blocks, 0, 1, rng)
                self.c2 = C2Module(w[1], config.se_reduction, use_m_co=config.use_m_co,
                                   use_m_di=config.use_m_di, rng=rng)
                self.branches = ModuleDict()
                for name in (app, mot, "common"):
                    self.branches[name] = Stream(w[1], w, config.blocks, 2, 3, rng)
                if config.double_merge:
                    self.merge2 = Conv2d(3 * w[2], w[2], 1, 1, padding=0, rng=rng)
                self.merge = Conv2d(3 * w[3], w[3], 1, 1, padding=0, rng=rng)
                trunk_in, last = w[3], 3
        self.trunk = Stream(trunk_in, w, config.blocks, last + 1, 4, rng) if last < 4 else None
        self.head = GaitHead(w[4], config, rng)

    # -- helpers ----------------------------------------------------------
    def _gather(self, batch: dict) -> tuple[dict, int, int]:
        config = self.config
        needed = config.modalities
        missing = [m for m in needed if m not in batch]
        if missing:
            raise KeyError(f"batch lacks modality {', '.join(missing)}")
        frames, B, Tn = {}, None, None
        for m in needed:
            x = batch[m]
            x = x if isinstance(x, Tensor) else Tensor(x)
            if x.ndim != 5:
                raise ShapeError(f"{m}: expected [B, T, C, H, W], got {x.shape}")
            b, t, c, h, w = x.shape
            if (h, w) != config.input_hw:
                raise ShapeError(f"{m}: expected resolution {config.input_hw}, got {(h, w)}")
            if c != MODALITY_CHANNELS[m]:
                raise ShapeError(f"{m}: expected {MODALITY_CHANNELS[m]} channels, got {c}")
            if B is None:
                B, Tn = b, t
            elif (b, t) != (B, Tn):
                raise ShapeError(f"{m}: batch/frame count {(b, t)} differs from {(B, Tn)}")
            frames[m] = T.reshape(x, (b * t, c, h, w))
        if Tn == 0:
            raise ValueError("empty sequence")
        return frames, B, Tn

    def _input(self, frames: dict, names: tuple) -> Tensor:
        if len(names) == 1:
            return frames[names[0]]
        return T.concat([frames[n] for n in names], axis=1)

    def features(self, batch: dict) -> tuple[Tensor, int]:
        """Per-frame Stage4 output [B*T, C, h, w] and the sequence count B."""
        frames, B, _ = self._gather(batch)
        config = self.config
        if self.layout == "single":
            (name,) = self.streams.keys()
            x = self.streams[name](frames[config.modalities[0]])
        elif self.layout == "pair-input":
            x = self.streams["+".join(config.modalities)](self._input(frames, config.modalities))
        elif self.layout.startswith("pair-"):
            a, b = config.modalities
            x = fuse(config.fusion.mechanism, [self.streams[a](frames[a]), self.streams[b](frames[b])],
                     self.fusion_params)
        elif self.layout == "naive":
            app, mot = list(self.streams.keys())
            f_ap = self.streams[app](self._input(frames, config.appearance))
            f_mo = self.streams[mot](self._input(frames, config.motion))
            x = fuse("cross_attention", [f_ap, f_mo], self.fusion_params)
        else:
            app, mot = list(self.streams.keys())
            f_ap = self.streams[app](self._input(frames, config.appearance))
            f_mo = self.streams[mot](self._input(frames, config.motion))
            outs = list(self.c2(f_ap, f_mo))  # ap, mo, co
            names = (app, mot, "common")
            outs = [self.branches[n].stages["stage2"](o) for n, o in zip(names, outs)]
            if self.merge2 is not None:
                shared = self.merge2(T.concat(outs, axis=1))
                outs = [o + shared for o in outs]
            outs = [self.branches[n].stages["stage3"](o) for n, o in zip(names, outs)]
            x = self.merge(T.concat(outs, axis=1))
        if self.trunk is not None:
            x = self.trunk(x)
        return x, B

    def forward(self, batch: dict) -> tuple[Tensor, Tensor]:
        x, B = self.features(batch)
        return self.head(x, B)


def build(config: ModelConfig, seed: int = 0) -> MultiGait:
    """Construct a model; identical (config, seed) pairs give identical parameters."""
    config.validate()
    return MultiGait(config, seed)


def forward(model: MultiGait, batch: dict) -> tuple[Tensor, Tensor]:
    return model(batch)


def config_to_dict(config: ModelConfig) -> dict:
    d = dataclasses.asdict(config)
    d["fusion"] = None if config.fusion is None else {"location": config.fusion.location,
                                                      "mechanism": config.fusion.mechanism}
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    unknown = set(d) - {f.name for f in dataclasses.fields(ModelConfig)}
    if unknown:
        raise ValueError(f"unknown model config keys: {sorted(unknown)}")
    if d.get("fusion") is not None:
        d["fusion"] = FusionSpec(**d["fusion"])
    return ModelConfig(**d)
