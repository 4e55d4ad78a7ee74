"""
Small CNN shared by the letter classifier and the defensibility regressors:
two conv + ReLU + max-pool blocks followed by two fully connected layers.
"""

import hashlib

import torch
import torch.nn as nn

from src.glyphs.rasterize import CANVAS
from src.letters import NUM_CLASSES


class LetterCNN(nn.Module):
    def __init__(
        self,
        out_features: int = NUM_CLASSES,
        conv_channels: tuple[int, ...] = (32, 64),
        kernel: int = 3,
        pool: int = 2,
        fc_hidden: int = 128,
        canvas: int = CANVAS,
        linear: bool = False,
    ):
        """
        Args:
            out_features: 26 for the classifier, 1 for a regressor
            linear: replace ReLU by identity and max-pool by average pooling,
                which makes the whole network an affine map (used in tests)
        """
        super().__init__()
        layers: list[nn.Module] = []
        in_channels, size = 1, canvas
        for channels in conv_channels:
            layers += [
                nn.Conv2d(in_channels, channels, kernel, padding=kernel // 2),
                nn.Identity() if linear else nn.ReLU(),
                nn.AvgPool2d(pool) if linear else nn.MaxPool2d(pool),
            ]
            in_channels, size = channels, size // pool
        self.features = nn.Sequential(*layers)
        self.head = nn.Sequential(
            nn.Flatten(),
            nn.Linear(in_channels * size * size, fc_hidden),
            nn.Identity() if linear else nn.ReLU(),
            nn.Linear(fc_hidden, out_features),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(1)
        return self.head(self.features(x))


def as_network(model) -> nn.Module:
    """Accept either a trained-model wrapper (with .network) or a bare module."""
    return getattr(model, "network", model)


def model_device(network: nn.Module) -> torch.device:
    param = next(network.parameters(), None)
    return param.device if param is not None else torch.device("cpu")


def model_dtype(network: nn.Module) -> torch.dtype:
    param = next(network.parameters(), None)
    return param.dtype if param is not None else torch.float32


def parameter_checksum(model) -> str:
    """SHA-256 over every state-dict tensor, in key order."""
    digest = hashlib.sha256()
    for name, tensor in as_network(model).state_dict().items():
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()
