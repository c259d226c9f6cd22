"""Line-delimited JSON traces of pydantic records."""

from pathlib import Path
from typing import Iterable, TypeVar

from loguru import logger
from pydantic import BaseModel, ValidationError

from avs.core.errors import ContainerError

M = TypeVar("M", bound=BaseModel)


class TraceWriter:
    """Appends one JSON object per line."""

    def __init__(self, path: Path, append: bool = False):
        self.path = path
        path.parent.mkdir(parents=True, exist_ok=True)
        if not append:
            path.write_text("", encoding="utf-8")
        self.count = 0

    def write(self, record: BaseModel) -> None:
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(record.model_dump_json() + "\n")
        self.count += 1

    def write_all(self, records: Iterable[BaseModel]) -> None:
        for record in records:
            self.write(record)


def read_trace(path: Path, model: type[M]) -> list[M]:
    """Parse every non-empty line of a trace into ``model``."""
    if not path.exists():
        raise ContainerError(f"trace not found: {path}")
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                out.append(model.model_validate_json(line))
            except ValidationError as e:
                raise ContainerError(f"{path}:{lineno}: invalid {model.__name__} record") from e
    logger.debug(f"[Trace] read {len(out)} {model.__name__} records from {path}")
    return out
