"""U-Net over 3-channel bundles: contracting path with 3x3 convolutions and
channel doubling per level, a 1x1-convolution bottom that keeps its channel
count, and an expansive path of 2x2 up-convolutions that halve channels and
concatenate the copied encoder features. Output is a per-pixel probability
simplex over {background, cerebellum, brain stem}."""

from __future__ import annotations

import hashlib
import json

import numpy as np
import torch
from torch import nn

NUM_CLASSES = 3
IN_CHANNELS = 3


class DoubleConv(nn.Module):
    def __init__(self, cin, cout, kernel=3):
        super().__init__()
        pad = kernel // 2
        self.block = nn.Sequential(
            nn.Conv2d(cin, cout, kernel, padding=pad),
            nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, kernel, padding=pad),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class UNet(nn.Module):
    def __init__(self, base_channels: int = 16, depth: int = 3):
        super().__init__()
        if depth < 1:
            raise ValueError("depth must be >= 1")
        self.base_channels = base_channels
        self.depth = depth
        chans = [base_channels * (2 ** k) for k in range(depth)]
        self.encoders = nn.ModuleList()
        cin = IN_CHANNELS
        for c in chans:
            self.encoders.append(DoubleConv(cin, c))
            cin = c
        self.pool = nn.MaxPool2d(2)
        # bottom level uses 1x1 convolutions, channel count unchanged
        self.bottom = DoubleConv(chans[-1], chans[-1], kernel=1)
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for c in reversed(chans[:-1]):
            self.ups.append(nn.ConvTranspose2d(2 * c, c, kernel_size=2, stride=2))
            self.decoders.append(DoubleConv(2 * c, c))
        self.head = nn.Conv2d(chans[0], NUM_CLASSES, kernel_size=1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for k, enc in enumerate(self.encoders):
            x = enc(x)
            if k + 1 < len(self.encoders):
                skips.append(x)
                x = self.pool(x)
        x = self.bottom(x)
        for up, dec, skip in zip(self.ups, self.decoders, reversed(skips)):
            x = up(x)
            x = dec(torch.cat([skip, x], dim=1))
        return self.head(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Per-pixel class probabilities, shape (B, 3, H, W)."""
        return torch.softmax(self.logits(x), dim=1)

    @property
    def architecture(self) -> dict:
        return {
            "family": "unet-1x1-bottom",
            "in_channels": IN_CHANNELS,
            "num_classes": NUM_CLASSES,
            "base_channels": self.base_channels,
            "depth": self.depth,
        }

    @property
    def architecture_hash(self) -> str:
        blob = json.dumps(self.architecture, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def forward_probabilities(model: UNet, channels: np.ndarray) -> np.ndarray:
    """Inference for one subject: (3, H, W) float array -> (H, W, 3) simplex."""
    if channels.ndim != 3 or channels.shape[0] != IN_CHANNELS:
        raise ValueError(f"expected (3, H, W) input, got {channels.shape}")
    model.eval()
    with torch.no_grad():
        x = torch.from_numpy(np.ascontiguousarray(channels, dtype=np.float32))[None]
        probs = model(x)[0]
    return probs.permute(1, 2, 0).numpy().astype(np.float64)


def predict_mask(probabilities: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over the class axis; ties resolve to the lowest
    class id (numpy argmax takes the first maximum)."""
    if probabilities.ndim != 3 or probabilities.shape[-1] != NUM_CLASSES:
        raise ValueError(f"expected (H, W, 3) probabilities, got {probabilities.shape}")
    return np.argmax(probabilities, axis=-1).astype(np.uint8)
