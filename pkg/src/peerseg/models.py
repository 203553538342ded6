"""Trainable components: two architecturally distinct peer segmenters,
patch discriminators, and the optimizer update rules.

The peers intentionally differ so they develop different decision
boundaries: peer A is a 4-stage encoder-decoder with a multi-scale
pooled bottleneck, peer B a shallower, wider 2-stage network built from
depthwise-separable convolutions. Both map an RGB image to per-pixel
class logits at the input resolution. The discriminator is a 5-stage
strided fully convolutional net producing patch logits.

Segmenters are trained with momentum SGD (v <- mu*v + g, p <- p - lr*v),
discriminators with Adam.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .datamodel import Image, ProbMap


class NumericalFailureError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


def _gn(ch):
    groups = 4 if ch % 4 == 0 else (2 if ch % 2 == 0 else 1)
    return nn.GroupNorm(groups, ch)


class _ConvBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1), _gn(cout), nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1), _gn(cout), nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.body(x)


class _SepBlock(nn.Module):
    """Depthwise-separable convolution block."""

    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(cin, cin, 3, stride=stride, padding=1, groups=cin),
            nn.Conv2d(cin, cout, 1), _gn(cout), nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.body(x)


class _PyramidPool(nn.Module):
    """Multi-scale context head: global + coarse average pools fused back."""

    def __init__(self, ch, pool_sizes=(1, 2, 3)):
        super().__init__()
        self.pool_sizes = pool_sizes
        self.branches = nn.ModuleList(nn.Conv2d(ch, ch // 4, 1) for _ in pool_sizes)
        self.fuse = nn.Conv2d(ch + len(pool_sizes) * (ch // 4), ch, 1)

    def forward(self, x):
        h, w = x.shape[2:]
        feats = [x]
        for size, conv in zip(self.pool_sizes, self.branches):
            pooled = F.adaptive_avg_pool2d(x, size)
            feats.append(F.interpolate(conv(pooled), size=(h, w), mode="bilinear", align_corners=False))
        return F.relu(self.fuse(torch.cat(feats, dim=1)))


class PeerASegmenter(nn.Module):
    """Encoder-decoder with 4 downsampling stages and a pooled bottleneck."""

    architecture_id = "peer_a"
    downsample_stages = 4
    receptive_field = 140  # conservative analytic estimate at full depth

    def __init__(self, num_classes=3, width=14):
        super().__init__()
        ws = [width, width * 2, width * 3, width * 4]
        self.enc = nn.ModuleList()
        cin = 3
        for wch in ws:
            self.enc.append(_ConvBlock(cin, wch))
            cin = wch
        self.down = nn.MaxPool2d(2)
        self.bottleneck = _PyramidPool(ws[-1])
        outs = ws[-2::-1] + [ws[0]]  # w2, w1, w0, w0
        self.dec = nn.ModuleList()
        cin = ws[-1]
        for skip_ch, cout in zip(reversed(ws), outs):
            self.dec.append(_ConvBlock(cin + skip_ch, cout))
            cin = cout
        self.head = nn.Conv2d(ws[0], num_classes, 1)
        self.num_classes = num_classes

    def forward(self, x):
        skips = []
        for block in self.enc:
            x = block(x)
            skips.append(x)
            x = self.down(x)
        x = self.bottleneck(x)
        for block, skip in zip(self.dec, reversed(skips)):
            x = F.interpolate(x, size=skip.shape[2:], mode="bilinear", align_corners=False)
            x = block(torch.cat([x, skip], dim=1))
        return self.head(x)


class PeerBSegmenter(nn.Module):
    """Shallow, wide separable-convolution network with 2 downsampling stages."""

    architecture_id = "peer_b"
    downsample_stages = 2
    receptive_field = 43

    def __init__(self, num_classes=3, width=26):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(3, width, 3, padding=1), _gn(width), nn.ReLU(inplace=True))
        self.stage1 = _SepBlock(width, width * 2, stride=2)
        self.stage2 = _SepBlock(width * 2, width * 2, stride=2)
        self.mid = nn.Sequential(_SepBlock(width * 2, width * 2), _SepBlock(width * 2, width * 2))
        self.up1 = _SepBlock(width * 2 + width * 2, width * 2)
        self.up2 = _SepBlock(width * 2 + width, width)
        self.head = nn.Conv2d(width, num_classes, 1)
        self.num_classes = num_classes

    def forward(self, x):
        s0 = self.stem(x)
        s1 = self.stage1(s0)
        s2 = self.stage2(s1)
        m = self.mid(s2)
        m = F.interpolate(m, size=s1.shape[2:], mode="bilinear", align_corners=False)
        m = self.up1(torch.cat([m, s1], dim=1))
        m = F.interpolate(m, size=s0.shape[2:], mode="bilinear", align_corners=False)
        m = self.up2(torch.cat([m, s0], dim=1))
        return self.head(m)


class PatchDiscriminator(nn.Module):
    """5 strided convolution stages from probability maps to patch logits."""

    def __init__(self, num_classes=3, width=8):
        super().__init__()
        chs = [width, width * 2, width * 4, width * 8]
        layers = []
        cin = num_classes
        for ch in chs:
            layers += [nn.Conv2d(cin, ch, 3, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
            cin = ch
        layers.append(nn.Conv2d(cin, 1, 3, stride=2, padding=1))
        self.net = nn.Sequential(*layers)
        self.num_stages = len(chs) + 1

    def forward(self, probs):
        return self.net(probs)


ARCHITECTURES = {"peer_a": PeerASegmenter, "peer_b": PeerBSegmenter}


def build_segmenter(architecture_id: str, num_classes=3, seed=0) -> nn.Module:
    if architecture_id not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {architecture_id!r}")
    torch.manual_seed(seed)
    return ARCHITECTURES[architecture_id](num_classes=num_classes)


def build_discriminator(num_classes=3, seed=0) -> PatchDiscriminator:
    torch.manual_seed(seed)
    return PatchDiscriminator(num_classes=num_classes)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def image_to_tensor(image: Image, dtype=torch.float32) -> torch.Tensor:
    """(H, W, 3) image to a (3, H, W) tensor."""
    arr = np.moveaxis(image.pixels, 2, 0).copy()
    return torch.from_numpy(arr).to(dtype)


def forward_softmax(seg: nn.Module, image: Image) -> ProbMap:
    """Run a segmenter on one image and return a validated ProbMap."""
    dtype = next(seg.parameters()).dtype
    with torch.no_grad():
        logits = seg(image_to_tensor(image, dtype)[None])[0]
    if not torch.isfinite(logits).all():
        pnorm = sum(p.detach().norm().item() for p in seg.parameters())
        raise NumericalFailureError(
            f"non-finite logits from {getattr(seg, 'architecture_id', 'segmenter')} "
            f"(parameter norm {pnorm:.3e})"
        )
    probs = torch.softmax(logits, dim=0)
    return ProbMap(np.moveaxis(probs.numpy().astype(np.float64), 0, 2))


class MomentumSGD:
    """v <- mu * v + g; p <- p - lr * v."""

    kind = "momentum_sgd"

    def __init__(self, params, lr, momentum=0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [torch.zeros_like(p) for p in self.params]

    @torch.no_grad()
    def step(self):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                g = torch.zeros_like(p)
            else:
                g = p.grad
            if not torch.isfinite(g).all():
                raise NumericalFailureError("NaN/inf gradient in momentum SGD step")
            v.mul_(self.momentum).add_(g)
            p.add_(v, alpha=-self.lr)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_dict(self):
        return {"velocity": [v.clone() for v in self.velocity]}

    def load_state_dict(self, state):
        for v, s in zip(self.velocity, state["velocity"]):
            v.copy_(s)


class Adam:
    """Standard adaptive-moment rule with bias correction."""

    kind = "adaptive_moment"

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    @torch.no_grad()
    def step(self):
        self.t += 1
        b1t = 1 - self.beta1**self.t
        b2t = 1 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            if not torch.isfinite(g).all():
                raise NumericalFailureError("NaN/inf gradient in Adam step")
            m.mul_(self.beta1).add_(g, alpha=1 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1 - self.beta2)
            p.addcdiv_(m / b1t, (v / b2t).sqrt().add_(self.eps), value=-self.lr)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_dict(self):
        return {"t": self.t, "m": [m.clone() for m in self.m], "v": [v.clone() for v in self.v]}

    def load_state_dict(self, state):
        self.t = state["t"]
        for m, s in zip(self.m, state["m"]):
            m.copy_(s)
        for v, s in zip(self.v, state["v"]):
            v.copy_(s)


def apply_gradient(optimizer, grads):
    """One explicit update: assign ``grads`` to the optimizer's parameters
    and step. Returns the updated parameter tensors."""
    for p, g in zip(optimizer.params, grads):
        p.grad = g.clone() if isinstance(g, torch.Tensor) else torch.as_tensor(g, dtype=p.dtype)
    optimizer.step()
    optimizer.zero_grad()
    return [p.detach().clone() for p in optimizer.params]


def config_hash(config_dict: dict) -> str:
    return hashlib.sha256(json.dumps(config_dict, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(path, segmenter, extra=None, cfg_hash=""):
    payload = {
        "architecture_id": segmenter.architecture_id,
        "num_classes": segmenter.num_classes,
        "config_hash": cfg_hash,
        "state_dict": segmenter.state_dict(),
    }
    if extra:
        payload.update(extra)
    torch.save(payload, path)


def load_checkpoint(path, expect_architecture=None, expect_hash=None):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    arch = payload.get("architecture_id")
    if expect_architecture is not None and arch != expect_architecture:
        raise CheckpointError(f"checkpoint architecture {arch!r} != expected {expect_architecture!r}")
    if expect_hash is not None and payload.get("config_hash") != expect_hash:
        raise CheckpointError("checkpoint config hash does not match the run config")
    seg = ARCHITECTURES[arch](num_classes=payload["num_classes"])
    seg.load_state_dict(payload["state_dict"])
    return seg, payload
