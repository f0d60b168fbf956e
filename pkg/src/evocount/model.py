"""The three-part counting network.

A small conv backbone (stride 4) feeds three consumers: a global-pooled linear
classifier over seen classes, a class-agnostic mask branch whose inverted
output is re-encoded and fused with the regression trunk, and a bank of 1x1
density heads with one output channel per seen class plus background.  Heads
and classifier grow by one row per stage; expansion copies existing parameters
bit for bit so the pre-training behavior of old classes is unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

VARIANTS = ("full", "no-mask", "unsupervised-mask", "density-supervised", "no-feedback")


@dataclass(frozen=True)
class ArchConfig:
    backbone_widths: tuple[int, ...] = (16, 32, 64, 64)
    trunk_width: int = 64
    mask_width: int = 32
    use_mask: bool = True
    use_feedback: bool = True

    @staticmethod
    def for_variant(variant: str) -> "ArchConfig":
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        if variant == "no-mask":
            return ArchConfig(use_mask=False, use_feedback=False)
        if variant == "no-feedback":
            return ArchConfig(use_feedback=False)
        return ArchConfig()

    @property
    def fused_channels(self) -> int:
        if not self.use_mask:
            return self.trunk_width
        if not self.use_feedback:
            return self.trunk_width + 1
        return self.trunk_width + self.mask_width


@dataclass
class ModelState:
    t: int
    arch: ArchConfig
    params: dict[str, Tensor]

    def param_items(self):
        return list(self.params.items())

    def trainable(self):
        return [p for p in self.params.values() if p.requires_grad]


@dataclass
class ForwardOutput:
    density_channels: Tensor
    class_logits: Tensor
    mask_prob: Tensor | None
    feature_vec: Tensor


def _xavier(rng, shape, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def _conv_param(rng, params, name, c_out, c_in, k):
    fan_in = c_in * k * k
    fan_out = c_out * k * k
    params[name + ".w"] = Tensor(_xavier(rng, (c_out, c_in, k, k), fan_in, fan_out),
                                 requires_grad=True)
    params[name + ".b"] = Tensor(np.zeros(c_out), requires_grad=True)


def build_initial(arch: ArchConfig, seed: int, n_classes: int = 1) -> ModelState:
    """Fresh model at stage n_classes (head/classifier width n_classes+1).

    Weights are centered-uniform with half-width sqrt(6/(fan_in+fan_out));
    biases start at zero.  The parameter draw order is fixed, so a seed pins
    every weight.
    """
    if n_classes < 1:
        raise ValueError("need at least one counting class")
    rng = np.random.default_rng([int(seed) & (2**63 - 1), 0xE0C])
    params: dict[str, Tensor] = {}
    w = arch.backbone_widths
    c_in = 1
    for i, c_out in enumerate(w):
        _conv_param(rng, params, f"backbone.conv{i + 1}", c_out, c_in, 3)
        c_in = c_out
    _conv_param(rng, params, "trunk.conv1", arch.trunk_width, w[-1], 3)
    _conv_param(rng, params, "trunk.conv2", arch.trunk_width, arch.trunk_width, 3)
    if arch.use_mask:
        _conv_param(rng, params, "mask.conv1", arch.mask_width, w[-1], 3)
        _conv_param(rng, params, "mask.conv2", arch.mask_width, arch.mask_width, 3)
        _conv_param(rng, params, "mask.out", 1, arch.mask_width, 1)
        if arch.use_feedback:
            _conv_param(rng, params, "feedback.conv1", arch.mask_width, 1, 3)
            _conv_param(rng, params, "feedback.conv2", arch.mask_width, arch.mask_width, 3)
    heads = n_classes + 1
    _conv_param(rng, params, "head", heads, arch.fused_channels, 1)
    fan_in = w[-1]
    params["classifier.w"] = Tensor(_xavier(rng, (heads, fan_in), fan_in, heads),
                                    requires_grad=True)
    params["classifier.b"] = Tensor(np.zeros(heads), requires_grad=True)
    return ModelState(t=n_classes, arch=arch, params=params)


def _conv(p, name, x, padding=1):
    return T.conv2d(x, p[name + ".w"], p[name + ".b"], stride=1, padding=padding)


def _run(m: ModelState, x: Tensor) -> ForwardOutput:
    p = m.params
    h = T.relu(_conv(p, "backbone.conv1", x))
    h = T.maxpool2d(h, 2)
    h = T.relu(_conv(p, "backbone.conv2", h))
    h = T.maxpool2d(h, 2)
    h = T.relu(_conv(p, "backbone.conv3", h))
    feat = T.relu(_conv(p, "backbone.conv4", h))

    logits = T.linear(T.global_avgpool(feat), p["classifier.w"], p["classifier.b"])

    tr = T.relu(_conv(p, "trunk.conv1", feat))
    tr = T.relu(_conv(p, "trunk.conv2", tr))
    feature_vec = T.global_avgpool(tr)

    mask_prob = None
    fused = tr
    if m.arch.use_mask:
        mb = T.relu(_conv(p, "mask.conv1", feat))
        mb = T.relu(_conv(p, "mask.conv2", mb))
        mask_prob = T.sigmoid(_conv(p, "mask.out", mb, padding=0))
        if m.arch.use_feedback:
            inv = T.affine(mask_prob, -1.0, 1.0)
            fb = T.relu(_conv(p, "feedback.conv1", inv))
            fb = T.relu(_conv(p, "feedback.conv2", fb))
            fused = T.concat_channels(tr, fb)
        else:
            fused = T.concat_channels(tr, mask_prob)
    dens = T.relu(_conv(p, "head", fused, padding=0))
    return ForwardOutput(density_channels=dens, class_logits=logits,
                         mask_prob=mask_prob, feature_vec=feature_vec)


def forward(m: ModelState, image: Tensor) -> ForwardOutput:
    """Single-sample forward; image is (1,H,W) with H,W divisible by 4."""
    if image.ndim != 3 or image.data.shape[0] != 1:
        raise ValueError(f"expected a (1,H,W) image, got {image.data.shape}")
    H, W = image.data.shape[1:]
    if H % 4 or W % 4:
        raise ValueError(f"spatial size ({H},{W}) must be divisible by 4")
    return _run(m, image)


def forward_batch(m: ModelState, images: Tensor) -> ForwardOutput:
    """Batched forward over (N,1,H,W)."""
    if images.ndim != 4 or images.data.shape[1] != 1:
        raise ValueError(f"expected (N,1,H,W) images, got {images.data.shape}")
    H, W = images.data.shape[2:]
    if H % 4 or W % 4:
        raise ValueError(f"spatial size ({H},{W}) must be divisible by 4")
    return _run(m, images)


def expand(m: ModelState, seed: int) -> ModelState:
    """Stage t -> t+1: one new head channel and classifier row, everything
    else copied bitwise.  The argument model is untouched (it becomes the
    frozen teacher)."""
    rng = np.random.default_rng([int(seed) & (2**63 - 1), m.t + 1, 0xE0C2])
    params: dict[str, Tensor] = {}
    for name, p in m.params.items():
        params[name] = Tensor(p.data.copy(), requires_grad=True)

    hw = m.params["head.w"].data
    heads, fin = hw.shape[0] + 1, hw.shape[1]
    new_hw = np.empty((heads, fin, 1, 1), dtype=np.float64)
    new_hw[:-1] = hw
    new_hw[-1] = _xavier(rng, (fin, 1, 1), fin, heads)
    params["head.w"] = Tensor(new_hw, requires_grad=True)
    params["head.b"] = Tensor(np.append(m.params["head.b"].data, 0.0), requires_grad=True)

    cw = m.params["classifier.w"].data
    new_cw = np.empty((heads, cw.shape[1]), dtype=np.float64)
    new_cw[:-1] = cw
    new_cw[-1] = _xavier(rng, (cw.shape[1],), cw.shape[1], heads)
    params["classifier.w"] = Tensor(new_cw, requires_grad=True)
    params["classifier.b"] = Tensor(np.append(m.params["classifier.b"].data, 0.0),
                                    requires_grad=True)
    return ModelState(t=m.t + 1, arch=m.arch, params=params)


def select_density(out: ForwardOutput) -> tuple[int, Tensor]:
    """Classifier-selected density channel; exact ties resolve to the lowest
    class index (argmax takes the first maximum)."""
    logits = out.class_logits.data
    if logits.ndim != 1:
        raise ValueError("select_density expects a single-sample output")
    c = int(np.argmax(logits))
    return c, T.slice_channels(out.density_channels, c, c + 1)


def predict_count(m: ModelState, image: Tensor) -> tuple[int, float]:
    with T.no_grad():
        out = forward(m, image)
        c, dens = select_density(out)
        return c, float(dens.data.sum())


def predict_counts_batch(m: ModelState, images: Tensor) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized predict_count: returns (classes, counts) arrays."""
    with T.no_grad():
        out = forward_batch(m, images)
        cls = np.argmax(out.class_logits.data, axis=1)
        sums = out.density_channels.data.sum(axis=(2, 3))
        counts = sums[np.arange(len(cls)), cls]
        return cls, counts


def clone_frozen(m: ModelState) -> ModelState:
    """Read-only deep copy for use as a distillation teacher or snapshot."""
    params = {name: Tensor(p.data.copy(), requires_grad=False)
              for name, p in m.params.items()}
    return ModelState(t=m.t, arch=m.arch, params=params)


def infer_arch(params: dict[str, np.ndarray]) -> ArchConfig:
    """Reconstruct the architecture flags/widths from checkpoint contents."""
    widths = []
    i = 1
    while f"backbone.conv{i}.w" in params:
        widths.append(params[f"backbone.conv{i}.w"].shape[0])
        i += 1
    if not widths:
        raise ValueError("checkpoint holds no backbone parameters")
    use_mask = "mask.out.w" in params
    use_feedback = "feedback.conv1.w" in params
    trunk = params["trunk.conv1.w"].shape[0]
    mask_w = params["mask.conv1.w"].shape[0] if use_mask else 32
    return ArchConfig(backbone_widths=tuple(widths), trunk_width=trunk,
                      mask_width=mask_w, use_mask=use_mask, use_feedback=use_feedback)


def state_from_arrays(stage: int, arrays: dict[str, np.ndarray]) -> ModelState:
    arch = infer_arch(arrays)
    heads = arrays["head.w"].shape[0]
    if heads != stage + 1:
        raise ValueError(f"checkpoint stage {stage} disagrees with head width {heads}")
    if arrays["classifier.w"].shape[0] != heads:
        raise ValueError("head and classifier widths disagree")
    params = {name: Tensor(a, requires_grad=True) for name, a in arrays.items()}
    return ModelState(t=stage, arch=arch, params=params)
