"""Convolutional autoencoder and the AutoBC steering regressor built on its encoder."""
from __future__ import annotations

from torch import nn

from .common import check_image_batch


class Encoder(nn.Module):
    """3 x (conv3x3 -> ELU -> BatchNorm -> 2x max-pool): 224 -> 28."""

    def __init__(self, widths=(32, 64, 128)):
        super().__init__()
        layers, c_in = [], 3
        for c in widths:
            layers += [nn.Conv2d(c_in, c, 3, padding=1), nn.ELU(), nn.BatchNorm2d(c), nn.MaxPool2d(2)]
            c_in = c
        self.net = nn.Sequential(*layers)
        self.out_channels = c_in

    def forward(self, x):
        return self.net(x)


class Decoder(nn.Module):
    """3 x (conv3x3 -> ELU -> BatchNorm -> 2x up-sample), then transposed conv + sigmoid."""

    def __init__(self, widths=(32, 64, 128)):
        super().__init__()
        rev = list(widths)[::-1]
        layers, c_in = [], rev[0]
        for c in rev:
            layers += [nn.Conv2d(c_in, c, 3, padding=1), nn.ELU(), nn.BatchNorm2d(c), nn.Upsample(scale_factor=2)]
            c_in = c
        layers += [nn.ConvTranspose2d(c_in, 3, 3, padding=1), nn.Sigmoid()]
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return self.net(z)


class ConvAutoencoderNet(nn.Module):
    def __init__(self, widths=(32, 64, 128)):
        super().__init__()
        self.widths = tuple(widths)
        self.encoder = Encoder(widths)
        self.decoder = Decoder(widths)

    def forward(self, x):
        check_image_batch(x)
        return self.decoder(self.encoder(x))


class AutoBCNet(nn.Module):
    """Encoder -> flatten -> dense(hidden, ELU) -> dropout -> dense(1)."""

    def __init__(self, widths=(32, 64, 128), hidden=128, dropout=0.3, image_size=224):
        super().__init__()
        self.encoder = Encoder(widths)
        side = image_size // 8
        self.head = nn.Sequential(
            nn.Flatten(),
            nn.Linear(self.encoder.out_channels * side * side, hidden),
            nn.ELU(),
            nn.Dropout(dropout),
            nn.Linear(hidden, 1),
        )

    def forward(self, x):
        check_image_batch(x)
        return self.head(self.encoder(x)).squeeze(-1)
