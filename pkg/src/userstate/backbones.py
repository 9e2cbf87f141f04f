"""Wide residual networks built from res2net blocks, and the three-model bundle."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
from torch import nn
from torch.nn import functional as F

from .core_data import NUM_CLASSES

AUDIO_SHAPE = (30, 50, 1)
FACE_SHAPE = (30, 68, 3)
BN_MOMENTUM = 0.1  # torch convention: running = 0.9 * running + 0.1 * batch


@dataclass(frozen=True)
class BackboneSpec:
    depth: int
    width: int
    input_shape: tuple          # (time, features, channels), channels last
    scale: int = 4
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        if self.depth < 10 or (self.depth - 4) % 6:
            raise ValueError(f"depth must satisfy (depth - 4) % 6 == 0 and depth >= 10, got {self.depth}")
        if self.width < 1:
            raise ValueError("width must be >= 1")
        if self.scale < 1:
            raise ValueError("res2net scale must be >= 1")
        if (16 * self.width) % self.scale:
            raise ValueError(f"16 * width must be divisible by scale {self.scale}")
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))

    @property
    def blocks_per_group(self) -> int:
        return (self.depth - 4) // 6

    @property
    def channels(self) -> tuple:
        return 16 * self.width, 32 * self.width, 64 * self.width

    @property
    def feature_dim(self) -> int:
        return 64 * self.width


def fusion_map_shape(length: int) -> tuple:
    """Most square (h, w) with h * w == length and h <= w."""
    h = int(math.isqrt(length))
    while length % h:
        h -= 1
    return h, length // h


class Res2NetBlock(nn.Module):
    """Pre-activation residual block with hierarchical res2net splits.

    The block's width is split into ``scale`` groups. The first group is
    passed through unchanged; group i > 0 is convolved after adding the
    output of group i-1. Downsampling blocks use no cascade and average-pool
    the pass-through group, following the res2net "stage" variant.
    """

    def __init__(self, in_planes: int, out_planes: int, stride: int = 1, scale: int = 4):
        super().__init__()
        if out_planes % scale:
            raise ValueError("out_planes must be divisible by scale")
        self.scale = scale
        self.stride = stride
        self.split = out_planes // scale
        self.bn1 = nn.BatchNorm2d(in_planes, momentum=BN_MOMENTUM)
        self.conv1 = nn.Conv2d(in_planes, out_planes, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_planes, momentum=BN_MOMENTUM)
        n_convs = 1 if scale == 1 else scale - 1
        width = out_planes if scale == 1 else self.split
        self.convs = nn.ModuleList(nn.Conv2d(width, width, 3, stride=stride, padding=1, bias=False)
                                   for _ in range(n_convs))
        self.bns = nn.ModuleList(nn.BatchNorm2d(width, momentum=BN_MOMENTUM) for _ in range(n_convs))
        self.conv3 = nn.Conv2d(out_planes, out_planes, 1, bias=False)
        self.shortcut = None
        if stride != 1 or in_planes != out_planes:
            self.shortcut = nn.Conv2d(in_planes, out_planes, 1, stride=stride, bias=False)

    def forward(self, x):
        o = F.relu(self.bn1(x))
        shortcut = x if self.shortcut is None else self.shortcut(o)
        o = F.relu(self.bn2(self.conv1(o)))
        if self.scale == 1:
            o = F.relu(self.bns[0](self.convs[0](o)))
        else:
            xs = torch.split(o, self.split, dim=1)
            ys = []
            prev = None
            for i in range(1, self.scale):
                inp = xs[i] if (prev is None or self.stride != 1) else xs[i] + prev
                prev = F.relu(self.bns[i - 1](self.convs[i - 1](inp)))
                ys.append(prev)
            first = xs[0] if self.stride == 1 else F.avg_pool2d(xs[0], 3, self.stride, 1)
            o = torch.cat([first] + ys, dim=1)
        return self.conv3(o) + shortcut


class WideRes2Net(nn.Module):
    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        c0 = 16
        c1, c2, c3 = spec.channels
        in_ch = spec.input_shape[2]
        self.stem = nn.Conv2d(in_ch, c0, 3, padding=1, bias=False)
        self.groups = nn.ModuleList()
        cin = c0
        for cout, stride in ((c1, 1), (c2, 2), (c3, 2)):
            blocks = [Res2NetBlock(cin if i == 0 else cout, cout, stride if i == 0 else 1, spec.scale)
                      for i in range(spec.blocks_per_group)]
            self.groups.append(nn.Sequential(*blocks))
            cin = cout
        self.bn = nn.BatchNorm2d(c3, momentum=BN_MOMENTUM)
        self.fc = nn.Linear(c3, spec.num_classes)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Linear):
                nn.init.xavier_normal_(m.weight)
                nn.init.zeros_(m.bias)

    def check_input(self, x: torch.Tensor):
        if x.ndim != 4 or tuple(x.shape[1:]) != self.spec.input_shape:
            raise ValueError(f"expected input (N, {self.spec.input_shape}), got {tuple(x.shape)}")

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Penultimate vector (N, 64 * width) for channels-last input (N, T, F, C)."""
        self.check_input(x)
        o = self.stem(x.permute(0, 3, 1, 2))
        for g in self.groups:
            o = g(o)
        o = F.relu(self.bn(o))
        return o.mean(dim=(2, 3))

    def logits(self, x):
        return self.fc(self.features(x))

    def forward(self, x):
        """Return (penultimate vector, class probabilities)."""
        h = self.features(x)
        return h, F.softmax(self.fc(h), dim=-1)

    def block_counts(self) -> list[int]:
        return [len(g) for g in self.groups]

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_backbone(spec: BackboneSpec) -> WideRes2Net:
    return WideRes2Net(spec)


def forward(network: WideRes2Net, x: torch.Tensor, mode: str = "inference"):
    """Run ``network`` in ``train`` (batch statistics) or ``inference`` mode."""
    if mode not in ("train", "inference"):
        raise ValueError(f"unknown mode {mode!r}")
    network.train(mode == "train")
    if mode == "inference":
        with torch.no_grad():
            return network(x)
    return network(x)


@dataclass(frozen=True)
class BundleSpec:
    audio_shape: tuple = AUDIO_SHAPE
    face_shape: tuple = FACE_SHAPE
    modality_depth: int = 22
    fusion_depth: int = 16
    width: int = 8
    scale: int = 4

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def toy(cls, audio_shape=AUDIO_SHAPE, face_shape=FACE_SHAPE):
        return cls(audio_shape, face_shape, modality_depth=10, fusion_depth=10, width=1, scale=4)


class ModelBundle(nn.Module):
    """Audio model, face model and the fusion model fed by their penultimate vectors."""

    def __init__(self, spec: BundleSpec = BundleSpec(), seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.spec = spec
        self.audio = build_backbone(BackboneSpec(spec.modality_depth, spec.width, spec.audio_shape, spec.scale))
        self.face = build_backbone(BackboneSpec(spec.modality_depth, spec.width, spec.face_shape, spec.scale))
        fused = self.audio.spec.feature_dim + self.face.spec.feature_dim
        h, w = fusion_map_shape(fused)
        self.fusion = build_backbone(BackboneSpec(spec.fusion_depth, spec.width, (h, w, 1), spec.scale))

    @property
    def fusion_width(self) -> int:
        return self.audio.spec.feature_dim + self.face.spec.feature_dim

    def fusion_input(self, feat_a: torch.Tensor, feat_f: torch.Tensor) -> torch.Tensor:
        """Concatenate penultimate vectors and reshape row-major into the fusion map."""
        z = torch.cat([feat_a, feat_f], dim=1)
        if z.shape[1] != self.fusion_width:
            raise ValueError(f"fusion input has width {z.shape[1]}, expected {self.fusion_width}")
        h, w, _ = self.fusion.spec.input_shape
        return z.reshape(-1, h, w, 1)

    def fusion_logits(self, x_a, x_f):
        return self.fusion.logits(self.fusion_input(self.audio.features(x_a), self.face.features(x_f)))

    def param_report(self) -> dict:
        return {
            name: {"depth": net.spec.depth, "width": net.spec.width, "scale": net.spec.scale,
                   "input_shape": list(net.spec.input_shape), "blocks_per_group": net.block_counts(),
                   "feature_dim": net.spec.feature_dim, "parameters": net.num_parameters()}
            for name, net in (("audio", self.audio), ("face", self.face), ("fusion", self.fusion))
        }


def fuse_forward(bundle: ModelBundle, x_a, x_f, mode: str = "inference") -> torch.Tensor:
    """Class distribution of the fusion model given both modalities."""
    if x_a is None or x_f is None:
        raise ValueError("fusion needs both audio and face input; use the modality heads otherwise")
    if mode not in ("train", "inference"):
        raise ValueError(f"unknown mode {mode!r}")
    bundle.train(mode == "train")
    with torch.set_grad_enabled(mode == "train"):
        return F.softmax(bundle.fusion_logits(x_a, x_f), dim=-1)


BUNDLE_CHECKPOINT_VERSION = 1


def save_bundle(bundle: ModelBundle, path, config_hash: str | None = None, extra: dict | None = None):
    torch.save({"version": BUNDLE_CHECKPOINT_VERSION, "kind": "bundle", "spec": bundle.spec.to_dict(),
                "config_hash": config_hash, "state_dict": bundle.state_dict(), "extra": extra or {}}, path)


def load_bundle(path) -> tuple[ModelBundle, dict]:
    """Load a bundle checkpoint; returns (bundle in eval mode, checkpoint metadata)."""
    if not Path(path).is_file():
        raise FileNotFoundError(f"bundle checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("kind") != "bundle" or blob.get("version") != BUNDLE_CHECKPOINT_VERSION:
        raise ValueError(f"{path} is not a version-{BUNDLE_CHECKPOINT_VERSION} bundle checkpoint")
    bundle = ModelBundle(BundleSpec.from_dict(blob["spec"]))
    bundle.load_state_dict(blob["state_dict"])
    bundle.eval()
    return bundle, {"config_hash": blob.get("config_hash"), "extra": blob.get("extra", {})}
