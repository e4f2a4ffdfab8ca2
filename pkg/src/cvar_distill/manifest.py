"""Run manifests: what produced a directory of outputs, and from which inputs."""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import platform
from importlib import metadata
from pathlib import Path

from . import __version__
from .config import config_hash

MANIFEST_NAME = "manifest.json"


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def module_versions() -> dict:
    out = {"cvar_distill": __version__, "python": platform.python_version()}
    for pkg in ("numpy", "scipy", "pandas"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1, default=str) + "\n")


def write_run_manifest(out_dir, *, command: str, cfg: dict, seeds: dict, inputs=(), outputs=(),
                       extra: dict | None = None) -> Path:
    """Write ``manifest.json``; only ``created_at`` varies between identical reruns."""
    out_dir = Path(out_dir)
    digests = {}
    for p in inputs:
        p = Path(p)
        if p.is_file():
            digests[str(p)] = file_digest(p)
    outs = {}
    for p in outputs:
        p = Path(p)
        if p.is_file():
            outs[str(p.relative_to(out_dir) if p.is_relative_to(out_dir) else p)] = file_digest(p)
    manifest = {
        "command": command,
        "config_hash": config_hash(cfg),
        "seeds": seeds,
        "versions": module_versions(),
        "inputs": digests,
        "outputs": outs,
        "created_at": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    if extra:
        manifest.update(extra)
    path = out_dir / MANIFEST_NAME
    write_json(path, manifest)
    return path
