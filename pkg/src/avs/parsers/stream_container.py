"""SCS1 stream containers.

A header followed by one record per generated chunk:

    header: b"SCS1" | u32 version | str run-config YAML | u32 prompt_id |
            u8 sink | ints transcript
    record: u32 chunk_index | f64 cursor | f64 generate/decode/preprocess/
            write/wall/budget seconds | video latents | audio latents |
            decoded video frames

Records are appended as they are produced; a reader stops cleanly at the
end of the last complete record.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import aiofiles
import torch
from loguru import logger

from avs.core.config import RunConfig
from avs.core.errors import ContainerError
from avs.models.report import LatencyRecord
from avs.parsers.binary import BinaryReader, BinaryWriter

MAGIC = b"SCS1"
VERSION = 1


@dataclass(frozen=True)
class StreamHeader:
    config: RunConfig
    transcript: tuple[int, ...]
    prompt_id: int
    sink: bool = True


@dataclass(frozen=True)
class ChunkRecord:
    latency: LatencyRecord
    video: torch.Tensor  # (C, T, H, W)
    audio: torch.Tensor  # (T, C)
    frames: torch.Tensor  # decoded video (C, 1 + 4(T-1), H, W)

    @property
    def chunk_index(self) -> int:
        return self.latency.chunk_index

    @property
    def cursor(self) -> float:
        return self.latency.cursor


@dataclass
class StreamContainer:
    header: StreamHeader
    records: list[ChunkRecord] = field(default_factory=list)

    @property
    def cursors(self) -> list[float]:
        return [r.cursor for r in self.records]

    def video(self) -> Optional[torch.Tensor]:
        if not self.records:
            return None
        return torch.cat([r.video for r in self.records], dim=1)

    def audio(self) -> Optional[torch.Tensor]:
        if not self.records:
            return None
        return torch.cat([r.audio for r in self.records], dim=0)


def encode_header(header: StreamHeader) -> bytes:
    w = BinaryWriter().raw(MAGIC).u32(VERSION).text(header.config.to_yaml())
    w.u32(header.prompt_id).u8(int(header.sink)).ints(header.transcript)
    return w.getvalue()


def encode_record(record: ChunkRecord) -> bytes:
    lat = record.latency
    w = BinaryWriter().u32(lat.chunk_index).f64(lat.cursor)
    for value in (lat.generate_s, lat.decode_s, lat.preprocess_s, lat.write_s, lat.wall_s,
                  lat.budget_s):
        w.f64(value)
    return w.array(record.video).array(record.audio).array(record.frames).getvalue()


def decode_container(data: bytes, source: str = "<bytes>") -> StreamContainer:
    r = BinaryReader(data, source)
    r.magic(MAGIC)
    version = r.u32()
    if version != VERSION:
        raise ContainerError(f"{source}: unsupported stream container version {version}")
    try:
        config = RunConfig.from_yaml(r.text())
    except ValueError as e:
        raise ContainerError(f"{source}: embedded config is invalid: {e}") from e
    prompt_id = r.u32()
    sink = bool(r.u8())
    header = StreamHeader(config=config, transcript=tuple(r.ints()), prompt_id=prompt_id, sink=sink)

    container = StreamContainer(header=header)
    while not r.exhausted:
        start = r.pos
        try:
            chunk_index = r.u32()
            cursor = r.f64()
            gen, dec, pre, wrt, wall, budget = (r.f64() for _ in range(6))
            video, audio, frames = r.array(), r.array(), r.array()
        except ContainerError:
            # Partially written trailing record (writer interrupted).
            logger.warning(
                f"[Container] {source}: dropping incomplete record at byte {start} "
                f"after {len(container.records)} chunks"
            )
            break
        latency = LatencyRecord(
            chunk_index=chunk_index, cursor=cursor, generate_s=gen, decode_s=dec,
            preprocess_s=pre, write_s=wrt, wall_s=wall, budget_s=budget,
        )
        container.records.append(ChunkRecord(latency=latency, video=video, audio=audio, frames=frames))
    return container


def write_container(path: Path, header: StreamHeader, records: list[ChunkRecord]) -> Path:
    """Write a complete container in one go."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_header(header) + b"".join(encode_record(r) for r in records))
    return path


def read_container(path: Path) -> StreamContainer:
    if not path.exists():
        raise ContainerError(f"stream container not found: {path}")
    container = decode_container(path.read_bytes(), str(path))
    logger.debug(f"[Container] {path}: {len(container.records)} chunks")
    return container


class AsyncStreamWriter:
    """Appends chunk records to an SCS1 file without blocking the event loop."""

    def __init__(self, path: Path, header: StreamHeader):
        self.path = path
        self.header = header
        self._fh = None
        self.records_written = 0

    async def __aenter__(self) -> "AsyncStreamWriter":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = await aiofiles.open(self.path, "wb")
        await self._fh.write(encode_header(self.header))
        return self

    async def write(self, record: ChunkRecord) -> None:
        if self._fh is None:
            raise RuntimeError("writer is not open")
        await self._fh.write(encode_record(record))
        await self._fh.flush()
        self.records_written += 1

    async def __aexit__(self, *exc) -> None:
        if self._fh is not None:
            await self._fh.close()
            self._fh = None
        logger.info(f"[Container] wrote {self.records_written} chunks to {self.path}")
