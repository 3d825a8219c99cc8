"""Network components: cross-resolution encoder, HR decoder with skip
connections, multi-scale feature discriminators, image discriminator, HR
encoder, and classifier, with exact shape contracts.

Tensors are NCHW throughout this module; ``images_to_tensor`` converts the
datapipe's (B, H, W, 3) arrays at the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F_t


class NonFiniteError(RuntimeError):
    """A forward pass produced NaN/Inf."""


class ShapeError(ValueError):
    """Tensor shape violates a config-determined contract."""


def images_to_tensor(batch: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(B, H, W, 3) in [0, 1] -> (B, 3, H, W) tensor (channels_last layout,
    which is what CPU conv kernels prefer)."""
    arr = np.asarray(batch, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    t = torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)
    return t.to(memory_format=torch.channels_last)


def tensor_to_images(x: torch.Tensor) -> np.ndarray:
    """(B, 3, H, W) tensor -> (B, H, W, 3) float32 array."""
    return x.detach().cpu().contiguous().numpy().transpose(0, 2, 3, 1).astype(np.float32)


def assert_finite(x: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return x


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BackboneConfig:
    """Five-stage residual backbone. channels[-1] is the embedding width d;
    the deepest tap is the resolution-invariant map fed to retrieval."""

    channels: tuple[int, ...] = (16, 32, 64, 128, 256)
    strides: tuple[int, ...] = (2, 2, 2, 2, 1)
    height: int = 64
    width: int = 32

    def __post_init__(self):
        if len(self.channels) != 5 or len(self.strides) != 5:
            raise ShapeError("backbone must have exactly 5 stages")
        if any(c < 1 for c in self.channels) or any(s < 1 for s in self.strides):
            raise ShapeError("channels and strides must be positive")

    @property
    def embed_channels(self) -> int:
        return self.channels[-1]

    def stage_shapes(self, height: int | None = None, width: int | None = None) -> list[tuple[int, int, int]]:
        """(channels, h, w) of each stage output for a given input size."""
        h = self.height if height is None else height
        w = self.width if width is None else width
        shapes = []
        for c, s in zip(self.channels, self.strides):
            h = (h - 1) // s + 1
            w = (w - 1) // s + 1
            shapes.append((c, h, w))
        return shapes


EMBED_MODES = ("joint", "f_only", "g_only")


@dataclass(frozen=True)
class BundleConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    align_levels: tuple[int, ...] = (1, 2)
    embed: str = "joint"
    num_classes: int = 10

    def __post_init__(self):
        if self.embed not in EMBED_MODES:
            raise ShapeError(f"embed must be one of {EMBED_MODES}")
        if not self.align_levels:
            raise ShapeError("align_levels must be non-empty")
        if any(j < 1 or j > 5 for j in self.align_levels):
            raise ShapeError("align levels index stages 1..5")
        if self.num_classes < 1:
            raise ShapeError("num_classes must be positive")

    @property
    def embed_dim(self) -> int:
        d = self.backbone.embed_channels
        return d if self.embed in ("f_only", "g_only") else 2 * d

    def manifest(self) -> dict[str, str]:
        return {
            "format": "crossreid-ckpt-1",
            "channels": ",".join(str(c) for c in self.backbone.channels),
            "strides": ",".join(str(s) for s in self.backbone.strides),
            "height": str(self.backbone.height),
            "width": str(self.backbone.width),
            "align_levels": ",".join(str(j) for j in self.align_levels),
            "embed": self.embed,
            "num_classes": str(self.num_classes),
        }

    @classmethod
    def from_manifest(cls, m: dict[str, str]) -> "BundleConfig":
        backbone = BackboneConfig(
            channels=tuple(int(c) for c in m["channels"].split(",")),
            strides=tuple(int(s) for s in m["strides"].split(",")),
            height=int(m["height"]),
            width=int(m["width"]),
        )
        return cls(
            backbone=backbone,
            align_levels=tuple(int(j) for j in m["align_levels"].split(",")),
            embed=m["embed"],
            num_classes=int(m["num_classes"]),
        )


# ---------------------------------------------------------------------------
# Modules
# ---------------------------------------------------------------------------

def _groups(channels: int) -> int:
    for g in (4, 2, 1):
        if channels % g == 0:
            return g
    return 1


class ResStage(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.norm1 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Conv2d(in_ch, out_ch, 1, stride=stride)
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        h = F_t.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F_t.relu(h + self.shortcut(x))


@dataclass
class FeaturePyramid:
    """Per-stage encoder taps f^1..f^5 for one batch (NCHW tensors)."""

    maps: list[torch.Tensor]

    def __post_init__(self):
        if len(self.maps) != 5:
            raise ShapeError("a pyramid has exactly 5 levels")

    def level(self, j: int) -> torch.Tensor:
        """1-indexed tap: level(1) is the shallowest, level(5) the deepest."""
        if not 1 <= j <= 5:
            raise ShapeError(f"pyramid level {j} outside 1..5")
        return self.maps[j - 1]

    @property
    def deepest(self) -> torch.Tensor:
        return self.maps[-1]

    def check(self, config: BackboneConfig) -> "FeaturePyramid":
        batch = self.maps[0].shape[0]
        h, w = self.maps[0].shape[2] * config.strides[0], self.maps[0].shape[3] * config.strides[0]
        expected = config.stage_shapes(height=h, width=w)
        for j, (fmap, (c, eh, ew)) in enumerate(zip(self.maps, expected), start=1):
            if tuple(fmap.shape) != (batch, c, eh, ew):
                raise ShapeError(
                    f"pyramid level {j}: got {tuple(fmap.shape)}, expected {(batch, c, eh, ew)}"
                )
            assert_finite(fmap, f"pyramid level {j}")
        return self


class Encoder(nn.Module):
    """Five-stage residual encoder used for both the cross-resolution
    encoder and the HR encoder (same architecture, independent weights)."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        c = config.channels
        self.stem = nn.Sequential(
            nn.Conv2d(3, c[0], 3, padding=1),
            nn.GroupNorm(_groups(c[0]), c[0]),
            nn.ReLU(inplace=True),
        )
        stages = []
        prev = c[0]
        for ch, s in zip(c, config.strides):
            stages.append(ResStage(prev, ch, s))
            prev = ch
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"encoder input must be (B, 3, H, W), got {tuple(x.shape)}")
        h = self.stem(x)
        maps = []
        for stage in self.stages:
            h = stage(h)
            maps.append(h)
        return FeaturePyramid(maps).check(self.config)


class Decoder(nn.Module):
    """HR decoder: deepest pyramid map as trunk, skip connections from
    shallower taps, sigmoid output in [0, 1].

    No normalization layers: reconstruction must preserve absolute
    intensity, which per-sample normalization would erase.  The output head
    is zero-initialized so the first reconstructions start at 0.5.
    """

    SKIP_LEVELS = (2, 3)

    def __init__(self, config: BackboneConfig, skip_levels: tuple[int, ...] | None = None):
        super().__init__()
        self.config = config
        self.skip_levels = tuple(sorted(set(skip_levels or self.SKIP_LEVELS)))
        if len(self.skip_levels) < 2 or any(not 1 <= j <= 4 for j in self.skip_levels):
            raise ShapeError("decoder needs at least two skip taps from levels 1..4")

        c = config.channels
        down = self._downsteps(config)  # factor-2 steps between each tap and full size
        self.total_steps = down[5]
        # map "remaining up-steps after step i" -> skip tap to fuse there
        self.tap_at_scale = {down[j]: j for j in self.skip_levels}

        def block(cin, cout):
            return nn.Sequential(
                nn.Conv2d(cin, cout, 3, padding=1),
                nn.LeakyReLU(0.1, inplace=True),
                nn.Conv2d(cout, cout, 3, padding=1),
                nn.LeakyReLU(0.1, inplace=True),
            )

        self.trunk = block(c[4], c[3])
        self.fuses = nn.ModuleList()
        self.fuse_taps: list[int | None] = []
        width = c[3]
        for step in range(self.total_steps):
            remaining = self.total_steps - 1 - step
            tap = self.tap_at_scale.get(remaining)
            cin = width + (c[tap - 1] if tap is not None else 0)
            cout = c[remaining] if remaining > 0 else c[0]
            self.fuses.append(block(cin, cout))
            self.fuse_taps.append(tap)
            width = cout
        # Small non-zero head init: an exactly-zero head would block every
        # gradient into the trunk.  Scaled down so outputs still start near
        # the 0.5 center.
        self.head = nn.Conv2d(width, 3, 3, padding=1)
        with torch.no_grad():
            self.head.weight.mul_(0.2)
            self.head.bias.zero_()

    @staticmethod
    def _downsteps(config: BackboneConfig) -> dict[int, int]:
        """Cumulative factor-2 steps below full resolution at each tap."""
        out = {}
        total = 1
        for j, s in enumerate(config.strides, start=1):
            if s not in (1, 2):
                raise ShapeError("decoder supports stage strides of 1 or 2 only")
            total *= s
            out[j] = int(np.log2(total))
        return out

    @staticmethod
    def _up2(x):
        return F_t.interpolate(x, scale_factor=2, mode="nearest")

    def forward(self, pyramid: FeaturePyramid) -> torch.Tensor:
        h = self.trunk(pyramid.deepest)
        for fuse, tap in zip(self.fuses, self.fuse_taps):
            h = self._up2(h)
            if tap is not None:
                h = torch.cat([h, pyramid.level(tap)], dim=1)
            h = fuse(h)
        return assert_finite(torch.sigmoid(self.head(h)), "decoder output")


class FeatureDiscriminator(nn.Module):
    """Strided conv stack over one pyramid level; sigmoid patch map reduced
    by mean to one probability per sample (probability the feature map came
    from an HR image)."""

    def __init__(self, in_ch: int, width: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_ch, width, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(width, width * 2, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(width * 2, 1, 3, padding=1),
        )

    def forward(self, fmap: torch.Tensor) -> torch.Tensor:
        probs = torch.sigmoid(self.net(fmap))
        return assert_finite(probs.mean(dim=(1, 2, 3)), "feature discriminator output")


class ImageDiscriminator(nn.Module):
    """Patch discriminator over images; mean sigmoid probability per sample."""

    def __init__(self, width: int = 16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(width, width * 2, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(width * 2, width * 4, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(width * 4, 1, 3, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        probs = torch.sigmoid(self.net(x))
        return assert_finite(probs.mean(dim=(1, 2, 3)), "image discriminator output")


class Classifier(nn.Module):
    """Global average pooling followed by one fully connected layer."""

    def __init__(self, in_ch: int, num_classes: int):
        super().__init__()
        self.in_ch = in_ch
        self.fc = nn.Linear(in_ch, num_classes)

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        if v.dim() != 4 or v.shape[1] != self.in_ch:
            raise ShapeError(
                f"classifier expects (B, {self.in_ch}, h, w), got {tuple(v.shape)}"
            )
        return self.fc(v.mean(dim=(2, 3)))


# ---------------------------------------------------------------------------
# Joint embedding
# ---------------------------------------------------------------------------

@dataclass
class JointEmbedding:
    """v = [f, g] channel concatenation, u = GAP(v)."""

    f: torch.Tensor
    g: torch.Tensor
    v: torch.Tensor
    u: torch.Tensor


def joint_embed(f: torch.Tensor, g: torch.Tensor, mode: str = "joint") -> JointEmbedding:
    """Form the joint representation from the resolution-invariant map f and
    the HR-re-encoded map g.  Ablation modes select a single modality, in
    which case u has d channels instead of 2d."""
    if mode not in EMBED_MODES:
        raise ShapeError(f"unknown embed mode {mode!r}")
    if f.shape != g.shape:
        raise ShapeError(f"f and g must share shape, got {tuple(f.shape)} vs {tuple(g.shape)}")
    if mode == "f_only":
        v = f
    elif mode == "g_only":
        v = g
    else:
        v = torch.cat([f, g], dim=1)
    u = v.mean(dim=(2, 3))
    return JointEmbedding(f=f, g=g, v=v, u=assert_finite(u, "pooled embedding"))


# ---------------------------------------------------------------------------
# Bundle
# ---------------------------------------------------------------------------

class NetworkBundle:
    """All six components plus the config that fixes their contracts.

    The cross-resolution encoder E and the HR encoder F share the
    architecture but never share parameters.
    """

    def __init__(self, config: BundleConfig):
        self.config = config
        bb = config.backbone
        self.E = Encoder(bb)
        self.G = Decoder(bb)
        self.F = Encoder(bb)
        self.C = Classifier(config.embed_dim, config.num_classes)
        shapes = bb.stage_shapes()
        self.D_F = nn.ModuleDict({
            str(j): FeatureDiscriminator(shapes[j - 1][0]) for j in config.align_levels
        })
        self.D_I = ImageDiscriminator()
        for comp in self.components().values():
            comp.to(memory_format=torch.channels_last)

    # -- component access ---------------------------------------------------
    def components(self) -> dict[str, nn.Module]:
        return {"E": self.E, "G": self.G, "F": self.F, "C": self.C,
                "D_F": self.D_F, "D_I": self.D_I}

    def named_parameters(self):
        """Flat namespace over all components, e.g. 'E.stages.0.conv1.weight'."""
        for comp_name, comp in self.components().items():
            for name, param in comp.named_parameters():
                yield f"{comp_name}.{name}", param

    def train(self):
        for comp in self.components().values():
            comp.train()
        return self

    def eval(self):
        for comp in self.components().values():
            comp.eval()
        return self

    def double(self):
        for comp in self.components().values():
            comp.double()
        return self

    # -- forward operations ---------------------------------------------------
    def encode(self, x: torch.Tensor) -> FeaturePyramid:
        """Cross-resolution encoder: image batch -> feature pyramid."""
        return self.E(x)

    def decode(self, pyramid: FeaturePyramid) -> torch.Tensor:
        """HR decoder over a pyramid from a paired encode call."""
        return self.G(pyramid)

    def hr_encode(self, x: torch.Tensor) -> torch.Tensor:
        """HR encoder: image batch -> deepest feature map g."""
        return self.F(x).deepest

    def classify(self, v: torch.Tensor) -> torch.Tensor:
        return self.C(v)

    def discriminate_feature(self, level: int, fmap: torch.Tensor) -> torch.Tensor:
        if str(level) not in self.D_F:
            raise ShapeError(
                f"feature level {level} outside configured alignment set {self.config.align_levels}"
            )
        return self.D_F[str(level)](fmap)

    def discriminate_image(self, x: torch.Tensor) -> torch.Tensor:
        return self.D_I(x)

    def embed_images(self, x: torch.Tensor) -> JointEmbedding:
        """Full retrieval path: encode, decode, re-encode, join, pool."""
        pyramid = self.encode(x)
        recovered = self.decode(pyramid)
        g = self.hr_encode(recovered)
        return joint_embed(pyramid.deepest, g, self.config.embed)


def build_bundle(config: BundleConfig, seed: int = 0) -> NetworkBundle:
    """Deterministically initialized bundle (torch RNG forked, not leaked)."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return NetworkBundle(config)
