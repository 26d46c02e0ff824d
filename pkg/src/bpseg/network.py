"""Attention U-Net: double-conv encoder/decoder with gated skips.

Encoder level i carries base_channels * 2**i channels through two
(3x3 conv -> BatchNorm -> ReLU) blocks with 2x2 max-pooling between
levels; the decoder mirrors it with 2x2 transposed-convolution
upsampling. Each skip connection is modulated by an attention gate —
a learned per-pixel sigmoid coefficient computed from the skip features
and the decoder's gating signal — before concatenation. The head is a
1x1 convolution producing one logit per pixel.

Checkpoints use a self-describing container (magic + JSON header +
raw little-endian float32 payload) so saved parameters are readable
without torch and round-trip exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data_model import ConfigError, ShapeMismatch

CHECKPOINT_MAGIC = b"BPCKPT01"

_forward_calls = 0


def forward_call_count() -> int:
    """Process-wide count of network forward passes; lets analytics
    paths assert they never touched a model."""
    return _forward_calls


class InvalidConfig(ConfigError):
    """Network configuration violates a structural invariant."""


class NonFiniteActivation(RuntimeError):
    """Forward pass produced NaN/inf logits — training has diverged."""


@dataclass(frozen=True)
class NetworkConfig:
    """Shape and seeding of the model; defaults are desk-scale."""

    base_channels: int = 16
    depth: int = 5
    in_channels: int = 1
    out_channels: int = 1
    attention_reduction: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.depth < 2:
            raise InvalidConfig(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 1:
            raise InvalidConfig("base_channels must be >= 1")
        if self.in_channels < 1 or self.out_channels < 1:
            raise InvalidConfig("channel counts must be >= 1")
        if self.attention_reduction < 1:
            raise InvalidConfig("attention_reduction must be >= 1")

    @property
    def stride(self) -> int:
        """Total downsampling factor; input dims must divide by it."""
        return 2 ** (self.depth - 1)


def _double_conv(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class AttentionGate(nn.Module):
    """Per-pixel sigmoid gate on skip features.

    q = ReLU(Wx·x + Wg·g + b) via 1x1 convs to the inner width, then
    alpha = sigmoid(psi·q + b_psi); output is x scaled by alpha. With
    all parameters zero, alpha is identically 0.5.
    """

    def __init__(self, x_channels: int, g_channels: int, reduction: int):
        super().__init__()
        inner = max(1, x_channels // reduction)
        self.wx = nn.Conv2d(x_channels, inner, 1, bias=False)
        self.wg = nn.Conv2d(g_channels, inner, 1, bias=True)
        self.psi = nn.Conv2d(inner, 1, 1, bias=True)

    def forward(self, x: torch.Tensor, g: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if x.shape[2:] != g.shape[2:]:
            raise ShapeMismatch(f"skip {tuple(x.shape)} vs gate {tuple(g.shape)}")
        q = torch.relu(self.wx(x) + self.wg(g))
        alpha = torch.sigmoid(self.psi(q))
        return x * alpha, alpha


class AttentionUNet(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        chans = [cfg.base_channels * 2**i for i in range(cfg.depth)]

        self.encoders = nn.ModuleList()
        prev = cfg.in_channels
        for c in chans:
            self.encoders.append(_double_conv(prev, c))
            prev = c
        self.pool = nn.MaxPool2d(2)

        self.ups = nn.ModuleList()
        self.gates = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for c in reversed(chans[:-1]):
            self.ups.append(nn.ConvTranspose2d(2 * c, c, 2, stride=2))
            self.gates.append(AttentionGate(c, c, cfg.attention_reduction))
            self.decoders.append(_double_conv(2 * c, c))

        self.head = nn.Conv2d(chans[0], cfg.out_channels, 1)

    def forward(self, batch: torch.Tensor) -> torch.Tensor:
        global _forward_calls
        _forward_calls += 1
        if batch.ndim != 4 or batch.shape[1] != self.cfg.in_channels:
            raise ShapeMismatch(f"expected Bx{self.cfg.in_channels}xHxW, got {tuple(batch.shape)}")
        h, w = batch.shape[2], batch.shape[3]
        if h % self.cfg.stride or w % self.cfg.stride:
            raise ShapeMismatch(f"spatial dims {h}x{w} not divisible by {self.cfg.stride}")

        skips = []
        x = batch
        for i, enc in enumerate(self.encoders):
            if i:
                x = self.pool(x)
            x = enc(x)
            skips.append(x)

        for j, (up, gate, dec) in enumerate(zip(self.ups, self.gates, self.decoders)):
            g = up(x)
            gated, _ = gate(skips[len(skips) - 2 - j], g)
            x = dec(torch.cat([gated, g], dim=1))

        out = self.head(x)
        if not torch.isfinite(out).all():
            raise NonFiniteActivation("non-finite logits in forward pass")
        return out


def build_model(cfg: NetworkConfig) -> AttentionUNet:
    """Instantiate the network with seeded fan-in uniform initialization."""
    torch.manual_seed(cfg.seed)
    model = AttentionUNet(cfg)
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def predict_scores(model: AttentionUNet, images, batch_size: int = 8) -> np.ndarray:
    """Inference logits for a stack of uint8 images, (N, H, W) out.

    Intensities are scaled to [0,1]; normalization layers run in
    inference mode.
    """
    arr = np.asarray(images, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[None]
    was_training = model.training
    model.eval()
    outs = []
    with torch.no_grad():
        for start in range(0, arr.shape[0], batch_size):
            chunk = torch.from_numpy(arr[start : start + batch_size]).unsqueeze(1)
            outs.append(model(chunk).squeeze(1).numpy().astype(np.float64))
    if was_training:
        model.train()
    return np.concatenate(outs, axis=0)


def save_checkpoint(path, model: AttentionUNet, cfg: NetworkConfig) -> None:
    """Write magic + JSON header + little-endian float32 payload.

    Integer batch counters are stored as float32; exactness is asserted
    (counters beyond 2**24 steps would need a wider field).
    """
    entries = []
    payload = bytearray()
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        kind = "i8" if arr.dtype == np.int64 else "f4"
        as_f4 = arr.astype("<f4")
        if kind == "i8" and not np.array_equal(as_f4.astype(np.int64), arr):
            raise ValueError(f"{name} exceeds exact float32 integer range")
        entries.append({"name": name, "shape": list(arr.shape), "kind": kind, "offset": len(payload)})
        payload.extend(as_f4.tobytes())
    header = json.dumps(
        {"version": 1, "config": asdict(cfg), "tensors": entries}, sort_keys=True
    ).encode("utf-8")
    Path(path).write_bytes(
        CHECKPOINT_MAGIC + struct.pack("<I", len(header)) + header + bytes(payload)
    )


def load_checkpoint(path) -> tuple[AttentionUNet, NetworkConfig]:
    blob = Path(path).read_bytes()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    hlen = struct.unpack("<I", blob[8:12])[0]
    header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    if header["version"] != 1:
        raise ValueError(f"unsupported checkpoint version {header['version']}")
    cfg = NetworkConfig(**header["config"])
    base = 12 + hlen
    state = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        start = base + entry["offset"]
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=start).reshape(entry["shape"])
        if entry["kind"] == "i8":
            state[entry["name"]] = torch.from_numpy(arr.astype(np.int64))
        else:
            state[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
    model = AttentionUNet(cfg)
    model.load_state_dict(state)
    return model, cfg
