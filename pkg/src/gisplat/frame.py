from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument
from .geometry import Intrinsics
from .imu import ImuSample


@dataclass
class Frame:
    """One timestamped observation: RGB in [0, 1], optional metric depth (0 = invalid)."""

    t: float
    rgb: np.ndarray | None
    depth: np.ndarray | None = None
    imu: list[ImuSample] = field(default_factory=list)
    index: int = 0

    def validate(self, k: Intrinsics) -> None:
        if self.rgb is None:
            raise InvalidArgument("frame has no RGB image")
        if self.rgb.shape != (k.height, k.width, 3):
            raise InvalidArgument(f"rgb shape {self.rgb.shape} does not match intrinsics {k.height}x{k.width}")
        if self.depth is not None and self.depth.shape != (k.height, k.width):
            raise InvalidArgument(f"depth shape {self.depth.shape} does not match rgb")

    @property
    def has_gyro(self) -> bool:
        return bool(self.imu) and all(s.gyro is not None for s in self.imu)
