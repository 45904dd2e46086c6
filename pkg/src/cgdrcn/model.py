"""Confidence-guided deep residual counting network.

Layout, with resolutions relative to the input::

    C1 -pool- C2 -pool- C3 (/4) -pool- C4 (/8) -pool- C5 (/16)
    CB6(C5) -pool-> Y6 (/32)
    for i in 5, 4, 3:
        R_i  = CB_i(C_i)
        CM_i = sigmoid(UCEB_i([R_i, reduce_i(C_i)]))   clamped to [cm_epsilon, 1]
        Y_i  = R_i * CM_i + up(Y_{i+1})

The residual taps sit *before* each stage's pool; that placement is what
gives C3, C4, C5 the /4, /8, /16 resolutions of the corresponding outputs.
"""
from __future__ import annotations

import hashlib
import math
import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor
from .errors import ShapeError

SCALES = (6, 5, 4, 3)
RESIDUAL_SCALES = (5, 4, 3)
# stage whose features feed each residual branch
TAP_STAGE = {5: 5, 4: 4, 3: 3}
REDUCED_CHANNELS = 32

PRESETS = {
    "tiny": dict(stage_channels=(8, 16, 32, 64, 64), stage_convs=(2, 2, 3, 3, 3)),
    "full": dict(stage_channels=(64, 128, 256, 512, 512), stage_convs=(2, 2, 3, 3, 3)),
}


@dataclass(frozen=True)
class ModelConfig:
    stage_channels: tuple = PRESETS["tiny"]["stage_channels"]
    stage_convs: tuple = PRESETS["tiny"]["stage_convs"]
    enable_residual: bool = True
    enable_uceb: bool = True
    cm_epsilon: float = 1e-6
    preserve_integral_upsample: bool = True
    precision: int = 32

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "stage_convs", tuple(int(c) for c in self.stage_convs))
        if len(self.stage_channels) != 5 or len(self.stage_convs) != 5:
            raise ValueError("stage_channels and stage_convs need exactly 5 entries")
        if min(self.stage_channels) <= 0 or min(self.stage_convs) <= 0:
            raise ValueError("stage channels and conv counts must be positive")
        if self.precision not in (32, 64):
            raise ValueError(f"precision must be 32 or 64, got {self.precision}")
        if not 0 < self.cm_epsilon < 1:
            raise ValueError("cm_epsilon must lie in (0, 1)")
        if self.enable_uceb and not self.enable_residual:
            raise ValueError("UCEB gates residual branches; it needs enable_residual")

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(**PRESETS[name], **overrides)

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["stage_convs"] = list(self.stage_convs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _conv_block_specs(prefix: str, cin: int) -> list:
    # conv(cin,32,1)-relu-conv(32,32,3)-relu-conv(32,1,3)
    return [(f"{prefix}.conv1", cin, 32, 1), (f"{prefix}.conv2", 32, 32, 3), (f"{prefix}.conv3", 32, 1, 3)]


def _uceb_specs(prefix: str) -> list:
    # conv(33,32,1)-relu-conv(32,16,3)-relu-conv(16,16,3)-relu-conv(16,1,1)
    return [
        (f"{prefix}.conv1", 1 + REDUCED_CHANNELS, 32, 1),
        (f"{prefix}.conv2", 32, 16, 3),
        (f"{prefix}.conv3", 16, 16, 3),
        (f"{prefix}.conv4", 16, 1, 1),
    ]


def layer_specs(config: ModelConfig) -> list:
    """Ordered (name, cin, cout, k) for every conv layer the config needs."""
    specs = []
    cin = 3
    for s, (cout, nconv) in enumerate(zip(config.stage_channels, config.stage_convs), start=1):
        for j in range(1, nconv + 1):
            specs.append((f"backbone.s{s}.conv{j}", cin, cout, 3))
            cin = cout
    ch = dict(enumerate(config.stage_channels, start=1))
    specs += _conv_block_specs("cb6", ch[5])
    if config.enable_residual:
        for i in RESIDUAL_SCALES:
            specs += _conv_block_specs(f"cb{i}", ch[TAP_STAGE[i]])
    if config.enable_uceb:
        for i in RESIDUAL_SCALES:
            specs.append((f"reduce{i}", ch[TAP_STAGE[i]], REDUCED_CHANNELS, 1))
            specs += _uceb_specs(f"uceb{i}")
    return specs


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    shapes = {}
    for name, cin, cout, k in layer_specs(config):
        shapes[f"{name}.weight"] = (cout, cin, k, k)
        shapes[f"{name}.bias"] = (cout,)
    return shapes


def parameter_count(config: ModelConfig) -> int:
    return sum(math.prod(s) for s in param_shapes(config).values())


@dataclass
class ModelState:
    config: ModelConfig
    params: dict = field(default_factory=dict)

    def copy(self) -> "ModelState":
        return ModelState(self.config, {k: v.copy() for k, v in self.params.items()})

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            arr = np.ascontiguousarray(self.params[name])
            h.update(name.encode())
            h.update(str(arr.shape).encode())
            h.update(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
        return h.hexdigest()

    def astype(self, precision: int) -> "ModelState":
        cfg = replace(self.config, precision=precision)
        return ModelState(cfg, {k: v.astype(cfg.dtype) for k, v in self.params.items()})


def init_model(config: ModelConfig, seed: int = 0) -> ModelState:
    """He-normal weights, zero biases.

    Each tensor draws from its own stream keyed on (seed, name), so toggling
    optional branches leaves the shared weights unchanged.
    """
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=config.dtype)
            continue
        fan_in = shape[1] * shape[2] * shape[3]
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        params[name] = (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(config.dtype)
    return ModelState(config, params)


@dataclass
class ForwardOutputs:
    predictions: dict  # scale index -> Tensor; only supervised scales
    y3: Tensor
    residuals: dict = field(default_factory=dict)
    gated_residuals: dict = field(default_factory=dict)
    confidences: dict = field(default_factory=dict)  # CM_i; CM_6 is implicitly 1
    params: dict = field(default_factory=dict)

    @property
    def y6(self) -> Tensor:
        return self.predictions[6]

    @property
    def y5(self):
        return self.predictions.get(5)

    @property
    def y4(self):
        return self.predictions.get(4)


def _conv(x, params, name, k):
    return ops.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], stride=1, padding=(k - 1) // 2)


def _conv_block(x, params, prefix):
    x = ops.relu(_conv(x, params, f"{prefix}.conv1", 1))
    x = ops.relu(_conv(x, params, f"{prefix}.conv2", 3))
    return _conv(x, params, f"{prefix}.conv3", 3)


def _uceb(x, params, prefix):
    x = ops.relu(_conv(x, params, f"{prefix}.conv1", 1))
    x = ops.relu(_conv(x, params, f"{prefix}.conv2", 3))
    x = ops.relu(_conv(x, params, f"{prefix}.conv3", 3))
    return _conv(x, params, f"{prefix}.conv4", 1)


def forward(
    state: ModelState,
    image,
    overrides: dict | None = None,
    requires_grad: bool = False,
    params: dict | None = None,
) -> ForwardOutputs:
    """Run the network on a (3, H, W) or (N, 3, H, W) image.

    ``overrides`` maps a residual scale (5, 4, 3) to a forced confidence map
    of the same shape as R_i; the forced map is clamped like a predicted one.
    ``params`` may supply pre-built leaf tensors (used by gradient checking).
    """
    cfg = state.config
    img = image.data if isinstance(image, Tensor) else np.asarray(image)
    if params is None:
        params = {k: Tensor(v, requires_grad=requires_grad) for k, v in state.params.items()}
    # compute in the parameters' precision (the gradient oracle runs in extended precision)
    dtype = next(iter(params.values())).dtype
    img = img.astype(dtype, copy=False)
    if img.ndim not in (3, 4) or img.shape[-3] != 3:
        raise ShapeError(f"expected a 3-channel image, got shape {img.shape}")
    h, w = img.shape[-2:]
    if h % 32 or w % 32 or h == 0 or w == 0:
        raise ShapeError(f"image extents {h}x{w} must be positive multiples of 32")

    x = Tensor(img)
    feats = {}
    layer = iter(n for n, *_ in layer_specs(cfg) if n.startswith("backbone."))
    for s, nconv in enumerate(cfg.stage_convs, start=1):
        for _ in range(nconv):
            x = ops.relu(_conv(x, params, next(layer), 3))
        feats[s] = x
        if s < 5:
            x = ops.maxpool2d(x, 2, 2)

    y6 = ops.maxpool2d(_conv_block(feats[5], params, "cb6"), 2, 2)
    preserve = cfg.preserve_integral_upsample
    out = ForwardOutputs(predictions={6: y6}, y3=y6, params=params)

    if not cfg.enable_residual:
        y = y6
        for _ in RESIDUAL_SCALES:
            y = ops.bilinear_upsample2x(y, preserve)
        out.y3 = y
        return out

    prev = y6
    for i in RESIDUAL_SCALES:
        f = feats[TAP_STAGE[i]]
        r = _conv_block(f, params, f"cb{i}")
        out.residuals[i] = r
        cm = None
        if overrides and i in overrides:
            forced = np.asarray(overrides[i], dtype=dtype)
            if forced.shape != r.shape:
                raise ShapeError(f"override for CM_{i} has shape {forced.shape}, expected {r.shape}")
            cm = ops.clamp(Tensor(forced), cfg.cm_epsilon, 1.0)
        elif cfg.enable_uceb:
            reduced = _conv(f, params, f"reduce{i}", 1)
            logits = _uceb(ops.concat_channels(r, reduced), params, f"uceb{i}")
            cm = ops.clamp(ops.sigmoid(logits), cfg.cm_epsilon, 1.0)
        if cm is not None:
            out.confidences[i] = cm
            r_hat = ops.mul(r, cm)
        else:
            r_hat = r
        out.gated_residuals[i] = r_hat
        prev = ops.add(r_hat, ops.bilinear_upsample2x(prev, preserve))
        out.predictions[i] = prev
    out.y3 = prev
    return out


def infer_count(state: ModelState, image) -> tuple[float, np.ndarray]:
    """Count people in an image of any size.

    The image is zero-padded on the right/bottom to multiples of 32 and the
    /4 output is cropped back to ceil(W/4) x ceil(H/4).
    """
    img = np.asarray(image)
    h, w = img.shape[-2:]
    ph, pw = -h % 32, -w % 32
    if ph or pw:
        pad = [(0, 0)] * (img.ndim - 2) + [(0, ph), (0, pw)]
        img = np.pad(img, pad)
    y3 = forward(state, img).y3.data
    y3 = y3[..., : math.ceil(h / 4), : math.ceil(w / 4)]
    density = y3.reshape(y3.shape[-2:]) if y3.ndim > 2 and math.prod(y3.shape[:-2]) == 1 else y3
    return float(density.sum(dtype=np.float64)), density
