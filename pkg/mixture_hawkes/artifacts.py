"""Versioned JSON envelope shared by every file the tool writes."""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from . import __version__
from .errors import CorpusFormatError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


def to_jsonable(value: Any) -> Any:
    """Convert numpy containers and scalars into plain JSON types."""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


def dumps_canonical(document: Any, indent: Optional[int] = 2) -> str:
    return json.dumps(to_jsonable(document), sort_keys=True, indent=indent)


def make_envelope(kind: str, payload: Dict[str, Any], run_config: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "tool_version": __version__,
        "run_config": run_config,
        "payload": payload,
    }


def write_artifact(
    path: Union[str, Path], kind: str, payload: Dict[str, Any], run_config: Optional[Dict[str, Any]] = None
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_canonical(make_envelope(kind, payload, run_config)) + "\n", encoding="utf-8")
    logger.debug("Wrote %s artifact to %s", kind, path)
    return path


def read_artifact(path: Union[str, Path], kind: Optional[str] = None) -> Dict[str, Any]:
    """Load an envelope, checking schema version and (optionally) its kind."""
    path = Path(path)
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"Invalid JSON: {exc.msg}", line_number=exc.lineno, path=str(path)) from exc
    if not isinstance(document, dict) or "payload" not in document:
        raise CorpusFormatError("Not a mixture-hawkes artifact", path=str(path))
    if document.get("schema_version") != SCHEMA_VERSION:
        raise CorpusFormatError(
            f"Unsupported artifact schema version {document.get('schema_version')}", path=str(path)
        )
    if kind is not None and document.get("kind") != kind:
        raise CorpusFormatError(f"Expected a '{kind}' artifact, found '{document.get('kind')}'", path=str(path))
    return document
