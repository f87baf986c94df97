"""Res-UNet+ topology: two-branch residual encoder, intra-connected decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ShapeMismatch, ValidationError
from .layers import (BatchNorm, Context, Conv, ConvTranspose, Layer, ReLU, Sequential,
                     softmax_cross_entropy)


@dataclass
class NetConfig:
    levels: int = 3
    channels: tuple = (8, 16, 32)
    input_tile: int = 64
    in_channels: int = 3
    classes: int = 2
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 3
    max_epochs: int = 10
    class_weights: tuple | None = None
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.class_weights is not None:
            self.class_weights = tuple(float(w) for w in self.class_weights)
        self.validate()

    def validate(self):
        if self.levels < 2:
            raise ValidationError("levels must be >= 2")
        if len(self.channels) != self.levels:
            raise ValidationError(f"need {self.levels} channel counts, got {len(self.channels)}")
        if any(b <= a for a, b in zip(self.channels, self.channels[1:])):
            raise ValidationError("channels must strictly increase with depth")
        if self.input_tile % (2 ** self.levels):
            raise ValidationError(f"tile {self.input_tile} not divisible by 2**{self.levels}")
        if self.classes != 2:
            raise ValidationError("only two classes (strand / background) are supported")
        if self.class_weights is not None and len(self.class_weights) != self.classes:
            raise ValidationError("one class weight per class is required")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValidationError("batch_size must be >= 1 and max_epochs >= 0")

    def to_json(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["class_weights"] = list(self.class_weights) if self.class_weights else None
        return d

    @classmethod
    def from_json(cls, data: dict) -> "NetConfig":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class NetParams:
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)

    def copy(self) -> "NetParams":
        return NetParams({k: v.copy() for k, v in self.params.items()},
                         {k: v.copy() for k, v in self.buffers.items()})

    def astype(self, dtype) -> "NetParams":
        return NetParams({k: v.astype(dtype) for k, v in self.params.items()},
                         {k: v.copy() for k, v in self.buffers.items()})


class EncoderBlock(Layer):
    """Two-branch residual block.

    lower = ReLU(shortcut(x) + F1a(x)); out = ReLU(F2(lower) + F1b(lower)) with
    F1 = conv3, BN, ReLU, conv3, BN and F2 = conv3, BN. The shortcut is the identity
    unless the block changes width or stride, then a 1x1 conv + BN projection.
    """

    def __init__(self, name, cin, cout, stride=1):
        self.name = name
        self.f1a = Sequential(Conv(f"{name}.f1a.conv1", cin, cout, 3, stride, bias=False),
                              BatchNorm(f"{name}.f1a.bn1", cout), ReLU(),
                              Conv(f"{name}.f1a.conv2", cout, cout, 3, bias=False),
                              BatchNorm(f"{name}.f1a.bn2", cout))
        self.shortcut = None
        if cin != cout or stride != 1:
            self.shortcut = Sequential(Conv(f"{name}.proj", cin, cout, 1, stride, bias=False),
                                       BatchNorm(f"{name}.proj_bn", cout))
        self.f2 = Sequential(Conv(f"{name}.f2.conv", cout, cout, 3, bias=False),
                             BatchNorm(f"{name}.f2.bn", cout))
        self.f1b = Sequential(Conv(f"{name}.f1b.conv1", cout, cout, 3, bias=False),
                              BatchNorm(f"{name}.f1b.bn1", cout), ReLU(),
                              Conv(f"{name}.f1b.conv2", cout, cout, 3, bias=False),
                              BatchNorm(f"{name}.f1b.bn2", cout))

    def children(self):
        out = [self.f1a]
        if self.shortcut is not None:
            out.append(self.shortcut)
        return out + [self.f2, self.f1b]

    def forward(self, P, x, ctx):
        a, ca = self.f1a.forward(P, x, ctx)
        if self.shortcut is not None:
            s, cs = self.shortcut.forward(P, x, ctx)
        else:
            s, cs = x, None
        pre_l = s + a
        lower = np.maximum(pre_l, 0)
        u2, c2 = self.f2.forward(P, lower, ctx)
        u1, c1 = self.f1b.forward(P, lower, ctx)
        pre_u = u2 + u1
        return np.maximum(pre_u, 0), (ca, cs, pre_l > 0, c2, c1, pre_u > 0)

    def backward(self, P, G, cache, dy):
        ca, cs, mask_l, c2, c1, mask_u = cache
        du = dy * mask_u
        dlower = self.f2.backward(P, G, c2, du) + self.f1b.backward(P, G, c1, du)
        dpre = dlower * mask_l
        dx = self.f1a.backward(P, G, ca, dpre)
        if self.shortcut is not None:
            dx = dx + self.shortcut.backward(P, G, cs, dpre)
        else:
            dx = dx + dpre
        return dx


class DecoderBlock(Layer):
    """One decoder level with intra-connections.

    Deepest level: A2([skip, AT(bottom)]). Shallower level i: A2 over the
    concatenation of A(skip_i), AT(decoder_j) for every deeper level j and
    AT(bottom), each transposed conv upsampling straight to level-i resolution.
    A = conv3 + ReLU, AT = transposed conv + ReLU, A2 = two A stages.
    """

    def __init__(self, name, level, levels, channels):
        self.name, self.level, self.levels = name, level, levels
        c = channels[level - 1]
        bottom_c = 2 * channels[-1]
        self.deepest = level == levels
        self.skip = None if self.deepest else Sequential(Conv(f"{name}.skip", c, c, 3), ReLU())
        self.up = []
        for j in range(level + 1, levels + 1):
            self.up.append(Sequential(
                ConvTranspose(f"{name}.up{j}", channels[j - 1], c, 2 ** (j - level)), ReLU()))
        self.up_bottom = Sequential(
            ConvTranspose(f"{name}.up_bottom", bottom_c, c, 2 ** (levels + 1 - level)), ReLU())
        self.branch_channels = [c] * (1 + len(self.up) + 1)
        self.fuse = Sequential(Conv(f"{name}.fuse1", sum(self.branch_channels), c, 3), ReLU(),
                               Conv(f"{name}.fuse2", c, c, 3), ReLU())

    def children(self):
        out = [self.skip] if self.skip is not None else []
        return out + self.up + [self.up_bottom, self.fuse]

    def forward(self, P, skip, deeper, bottom, ctx):
        if len(deeper) != len(self.up):
            raise ShapeMismatch(f"{self.name} expects {len(self.up)} deeper decoder outputs")
        parts, caches = [], []
        if self.skip is not None:
            s, cs = self.skip.forward(P, skip, ctx)
        else:
            s, cs = skip, None
        parts.append(s)
        for layer, d in zip(self.up, deeper):
            y, c = layer.forward(P, d, ctx)
            parts.append(y)
            caches.append(c)
        yb, cb = self.up_bottom.forward(P, bottom, ctx)
        parts.append(yb)
        shapes = {p.shape[2:] for p in parts}
        if len(shapes) != 1:
            raise ShapeMismatch(f"{self.name}: branch resolutions differ {sorted(shapes)}")
        cat = np.concatenate(parts, axis=1)
        out, cf = self.fuse.forward(P, cat, ctx)
        return out, (cs, caches, cb, [p.shape[1] for p in parts], cf)

    def backward(self, P, G, cache, dy):
        cs, caches, cb, widths, cf = cache
        dcat = self.fuse.backward(P, G, cf, dy)
        bounds = np.cumsum([0] + widths)
        pieces = [dcat[:, a:b] for a, b in zip(bounds[:-1], bounds[1:])]
        dskip = pieces[0] if self.skip is None else self.skip.backward(P, G, cs, pieces[0])
        ddeeper = [layer.backward(P, G, c, g)
                   for layer, c, g in zip(self.up, caches, pieces[1:-1])]
        dbottom = self.up_bottom.backward(P, G, cb, pieces[-1])
        return dskip, ddeeper, dbottom


class ResUNetPlus(Layer):
    def __init__(self, cfg: NetConfig):
        self.cfg = cfg
        ch = cfg.channels
        self.encoders = [EncoderBlock("enc1", cfg.in_channels, ch[0], 1)]
        for i in range(2, cfg.levels + 1):
            self.encoders.append(EncoderBlock(f"enc{i}", ch[i - 2], ch[i - 1], 2))
        self.bottom = EncoderBlock("bottom", ch[-1], 2 * ch[-1], 2)
        self.decoders = [DecoderBlock(f"dec{i}", i, cfg.levels, ch)
                         for i in range(1, cfg.levels + 1)]
        self.head = Conv("head", ch[0], cfg.classes, 1)

    def children(self):
        return self.encoders + [self.bottom] + self.decoders + [self.head]

    def init_params(self, seed=None) -> NetParams:
        rng = np.random.default_rng(self.cfg.seed if seed is None else seed)
        params, buffers = {}, {}
        for layer in self.walk():
            if layer.param_shapes():
                layer.init(rng, params, np.dtype(self.cfg.dtype))
            buffers.update(layer.buffer_init())
        return NetParams(params, buffers)

    def forward(self, P, x, ctx):
        n = self.cfg.levels
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeMismatch(f"expected (B, {self.cfg.in_channels}, H, W) input, got {x.shape}")
        if x.shape[2] % (2 ** n) or x.shape[3] % (2 ** n):
            raise ShapeMismatch(f"spatial size {x.shape[2:]} not divisible by 2**{n}")
        enc, enc_c = [], []
        h = x
        for block in self.encoders:
            h, c = block.forward(P, h, ctx)
            enc.append(h)
            enc_c.append(c)
        bottom, bottom_c = self.bottom.forward(P, enc[-1], ctx)
        dec = [None] * n
        dec_c = [None] * n
        for i in range(n, 0, -1):
            dec[i - 1], dec_c[i - 1] = self.decoders[i - 1].forward(P, enc[i - 1], dec[i:], bottom, ctx)
        logits, head_c = self.head.forward(P, dec[0], ctx)
        return logits, (enc_c, bottom_c, dec_c, head_c, [e.shape for e in enc], bottom.shape)

    def backward(self, P, G, cache, dlogits):
        enc_c, bottom_c, dec_c, head_c, enc_shapes, bottom_shape = cache
        n = self.cfg.levels
        ddec = [None] * n
        ddec[0] = self.head.backward(P, G, head_c, dlogits)
        denc = [np.zeros(s, dtype=dlogits.dtype) for s in enc_shapes]
        dbottom = np.zeros(bottom_shape, dtype=dlogits.dtype)
        for i in range(1, n + 1):
            dskip, ddeeper, db = self.decoders[i - 1].backward(P, G, dec_c[i - 1], ddec[i - 1])
            denc[i - 1] += dskip
            dbottom += db
            for j, g in enumerate(ddeeper, start=i + 1):
                ddec[j - 1] = g if ddec[j - 1] is None else ddec[j - 1] + g
        denc[-1] += self.bottom.backward(P, G, bottom_c, dbottom)
        dx = None
        for i in range(n, 0, -1):
            dx = self.encoders[i - 1].backward(P, G, enc_c[i - 1], denc[i - 1])
            if i > 1:
                denc[i - 2] += dx
        return dx


def forward(net: NetParams, cfg: NetConfig, batch: np.ndarray, mode: str = "eval",
            model: ResUNetPlus | None = None) -> np.ndarray:
    """Per-pixel class logits, shape (B, classes, tile, tile)."""
    batch = np.asarray(batch)
    if batch.ndim != 4 or batch.shape[2:] != (cfg.input_tile, cfg.input_tile):
        raise ShapeMismatch(f"batch must be (B, C, {cfg.input_tile}, {cfg.input_tile}), "
                            f"got {batch.shape}")
    model = model or ResUNetPlus(cfg)
    ctx = Context(mode == "train", net.buffers)
    logits, _ = model.forward(net.params, batch.astype(cfg.dtype, copy=False), ctx)
    return logits


def loss_and_grads(model: ResUNetPlus, net: NetParams, x, targets, class_weights=None,
                   train: bool = True, update_stats: bool = True):
    ctx = Context(train, net.buffers, update_stats)
    logits, cache = model.forward(net.params, x, ctx)
    loss, dlogits = softmax_cross_entropy(logits, targets, class_weights)
    grads: dict = {}
    dx = model.backward(net.params, grads, cache, dlogits)
    return loss, grads, dx
