"""Trusted, block-structured container for multimodal AI artifacts."""

from __future__ import annotations

__version__ = "0.1.0"

from .container import (  # noqa: E402
    ArtifactReader,
    ArtifactWriter,
    append_block,
    create_artifact,
    finalize,
    get_block,
    open_artifact,
    open_writer,
    stream_blocks,
)
from .errors import MaifError, TamperError  # noqa: E402
from .transactions import open_snapshot, recover  # noqa: E402
from .validation import repair, validate  # noqa: E402

__all__ = [
    "ArtifactReader", "ArtifactWriter", "MaifError", "TamperError", "__version__", "append_block",
    "create_artifact", "finalize", "get_block", "open_artifact", "open_snapshot", "open_writer",
    "recover", "repair", "stream_blocks", "validate",
]
