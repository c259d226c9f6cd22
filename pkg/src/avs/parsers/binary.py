"""Little-endian primitives shared by the binary containers."""

import struct

import numpy as np
import torch

from avs.core.errors import ContainerError

MAX_NDIM = 8


class BinaryWriter:
    """Accumulates little-endian fields into a byte buffer."""

    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def u8(self, value: int) -> "BinaryWriter":
        self._parts.append(struct.pack("<B", value))
        return self

    def u32(self, value: int) -> "BinaryWriter":
        self._parts.append(struct.pack("<I", value))
        return self

    def i64(self, value: int) -> "BinaryWriter":
        self._parts.append(struct.pack("<q", value))
        return self

    def f64(self, value: float) -> "BinaryWriter":
        self._parts.append(struct.pack("<d", value))
        return self

    def raw(self, data: bytes) -> "BinaryWriter":
        self._parts.append(data)
        return self

    def text(self, value: str) -> "BinaryWriter":
        data = value.encode("utf-8")
        return self.u32(len(data)).raw(data)

    def ints(self, values: list[int] | tuple[int, ...]) -> "BinaryWriter":
        self.u32(len(values))
        return self.raw(np.asarray(values, dtype="<i4").tobytes())

    def array(self, x: torch.Tensor | np.ndarray) -> "BinaryWriter":
        """Shape header (u32 ndim, u32 dims) followed by f32 data."""
        arr = x.detach().cpu().numpy() if isinstance(x, torch.Tensor) else np.asarray(x)
        self.u32(arr.ndim)
        for dim in arr.shape:
            self.u32(dim)
        return self.raw(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class BinaryReader:
    """Reads the fields written by :class:`BinaryWriter`."""

    def __init__(self, data: bytes, source: str = "<bytes>"):
        self.data = data
        self.pos = 0
        self.source = source

    def _take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise ContainerError(f"{self.source}: truncated at byte {self.pos} (wanted {n})")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    @property
    def exhausted(self) -> bool:
        return self.pos >= len(self.data)

    def magic(self, expected: bytes) -> None:
        got = self._take(len(expected))
        if got != expected:
            raise ContainerError(f"{self.source}: bad magic {got!r}, expected {expected!r}")

    def u8(self) -> int:
        return struct.unpack("<B", self._take(1))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def i64(self) -> int:
        return struct.unpack("<q", self._take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self._take(8))[0]

    def text(self) -> str:
        n = self.u32()
        try:
            return self._take(n).decode("utf-8")
        except UnicodeDecodeError as e:
            raise ContainerError(f"{self.source}: invalid utf-8 string") from e

    def ints(self) -> list[int]:
        n = self.u32()
        return np.frombuffer(self._take(4 * n), dtype="<i4").astype(int).tolist()

    def array(self) -> torch.Tensor:
        ndim = self.u32()
        if ndim > MAX_NDIM:
            raise ContainerError(f"{self.source}: implausible array rank {ndim}")
        shape = tuple(self.u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(self._take(4 * count), dtype="<f4").reshape(shape)
        return torch.from_numpy(data.astype(np.float32))
