"""Conv building blocks shared by the codecs."""

import torch.nn.functional as F
from torch import Tensor, nn


def conv(cin: int, cout: int, k: int = 3, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2)


def act() -> nn.Module:
    return nn.LeakyReLU(0.1)


class ResBlock(nn.Module):
    """conv - act - conv with an additive skip."""

    def __init__(self, ch: int):
        super().__init__()
        self.c1 = conv(ch, ch)
        self.c2 = conv(ch, ch)
        self.act = act()

    def forward(self, x: Tensor) -> Tensor:
        return x + self.c2(self.act(self.c1(x)))


class DownBlock(nn.Module):
    """Stride-2 conv followed by a 3x3 conv, each with a nonlinearity."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.body = nn.Sequential(conv(cin, cout, stride=2), act(), conv(cout, cout), act())

    def forward(self, x: Tensor) -> Tensor:
        return self.body(x)


class UpBlock(nn.Module):
    """Nearest-neighbour x2 upsample followed by two 3x3 convs."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.body = nn.Sequential(conv(cin, cout), act(), conv(cout, cout), act())

    def forward(self, x: Tensor) -> Tensor:
        return self.body(F.interpolate(x, scale_factor=2, mode="nearest"))
