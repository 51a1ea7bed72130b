"""Content-addressed stage outputs.

Every JSON artifact records the digests of the inputs it was built from
and a checksum over its own content, so stale or corrupted upstream files
are detected before they are used.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from pathlib import Path

FORMAT_VERSION = 1


class StorageError(RuntimeError):
    pass


class ChecksumError(StorageError):
    """Stored checksum does not match the file content."""


class StaleInputError(StorageError):
    """An artifact was built from inputs that have since changed."""


class MissingArtifactError(StorageError, FileNotFoundError):
    pass


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _clean(obj):
    """Replace non-finite floats by None so the JSON stays standard."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_artifact(path, stage: str, payload: dict, inputs: dict[str, str]) -> None:
    """Write ``payload`` with its input digests and a self checksum.

    Output is byte-deterministic for identical content.
    """
    body = {"format": f"gridscen/{stage}", "version": FORMAT_VERSION, "inputs": dict(sorted(inputs.items())),
            "payload": _clean(payload)}
    body["checksum"] = hashlib.sha256(_canonical(body).encode()).hexdigest()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(body, sort_keys=True, indent=1) + "\n")
    os.replace(tmp, path)


def read_artifact(path, stage: str | None = None, expect_inputs: dict[str, str] | None = None,
                  force: bool = False) -> dict:
    """Load an artifact, verify its checksum and (optionally) that its
    recorded inputs still match ``expect_inputs``. Returns the payload."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing upstream artifact {path}")
    try:
        body = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ChecksumError(f"{path}: unreadable artifact ({exc})") from exc
    if not isinstance(body, dict) or "checksum" not in body:
        raise ChecksumError(f"{path}: no checksum")
    stored = body.pop("checksum")
    if hashlib.sha256(_canonical(body).encode()).hexdigest() != stored:
        raise ChecksumError(f"{path}: checksum mismatch, file is corrupted or was edited")
    if stage is not None and body.get("format") != f"gridscen/{stage}":
        raise StorageError(f"{path}: expected a {stage} artifact, found {body.get('format')}")
    if expect_inputs is not None and not force:
        recorded = body.get("inputs", {})
        changed = sorted(k for k, v in expect_inputs.items() if recorded.get(k) != v)
        if changed:
            raise StaleInputError(f"{path} is stale: inputs changed ({', '.join(changed)}); rerun upstream or --force")
    return body["payload"]


def artifact_inputs(path) -> dict[str, str]:
    body = json.loads(Path(path).read_text())
    return body.get("inputs", {})
