"""Run-directory management: content-addressed directories, lock files and
reproducibility manifests (config hash, seed, git describe, input digests)."""

from __future__ import annotations

import hashlib
import json
import os
import subprocess
from pathlib import Path

RUN_ROOT_ENV = "TINYVLM_RUN_ROOT"
LOCK_NAME = "LOCK"
MANIFEST_NAME = "manifest.json"


class RunDirError(RuntimeError):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def content_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10,
                             cwd=os.path.dirname(os.path.abspath(__file__)))
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def run_root() -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, "runs"))


def create_run_dir(command: str, payload: dict, inputs: dict[str, str] | None = None) -> Path:
    """Create runs/<command>-<hash12>/ with a manifest and a lock file.

    The directory name is content-addressed over (command, payload); an
    existing completed run is never silently overwritten.
    """
    digest = content_hash({"command": command, "payload": payload})
    run_dir = run_root() / f"{command}-{digest[:12]}"
    if run_dir.exists():
        if (run_dir / LOCK_NAME).exists():
            raise RunDirError("run_locked",
                              f"{run_dir} is owned by a running process (or stale LOCK)")
        if (run_dir / MANIFEST_NAME).exists():
            raise RunDirError("run_exists",
                              f"{run_dir} already holds a completed run; refusing to overwrite")
    run_dir.mkdir(parents=True, exist_ok=True)
    fd = os.open(run_dir / LOCK_NAME, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    manifest = {
        "command": command,
        "payload": payload,
        "payload_hash": digest,
        "git": git_describe(),
        "inputs": inputs or {},
    }
    with open(run_dir / (MANIFEST_NAME + ".tmp"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return run_dir


def finalize_run_dir(run_dir: Path, outputs: dict | None = None) -> None:
    """Record output digests and release the lock."""
    run_dir = Path(run_dir)
    tmp = run_dir / (MANIFEST_NAME + ".tmp")
    with open(tmp) as f:
        manifest = json.load(f)
    manifest["outputs"] = outputs if outputs is not None else {
        p.name: file_digest(p) for p in sorted(run_dir.iterdir())
        if p.is_file() and p.name not in (LOCK_NAME, MANIFEST_NAME + ".tmp")
    }
    with open(run_dir / MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    tmp.unlink()
    (run_dir / LOCK_NAME).unlink()
