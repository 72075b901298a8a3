"""Run-directory bookkeeping: manifest, digests, locking, atomic writes.

A run directory holds every stage's artifacts plus ``manifest.json``
recording the seed, a configuration snapshot, SHA-256 digests of the
input files, and per-stage output digests. The manifest's timestamps are
bookkeeping and the one exception to byte-identical reruns; all listed
artifacts are reproducible byte for byte given the same seed and inputs.
"""
from __future__ import annotations

import datetime as dt
import hashlib
import json
import os
from contextlib import contextmanager
from pathlib import Path

from .errors import ConfigError, DataError

MANIFEST_VERSION = 1


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _utcnow() -> str:
    return dt.datetime.now(dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


class RunDir:
    """A pipeline working directory with a manifest and a lock."""

    def __init__(self, path):
        self.path = Path(path)

    @property
    def manifest_path(self) -> Path:
        return self.path / "manifest.json"

    def exists(self) -> bool:
        return self.manifest_path.exists()

    def create_or_open(self, seed: int, config_snapshot: dict) -> dict:
        """Open an existing run directory or initialize a fresh one.

        An existing manifest pins the seed: passing a different one is an
        error so artifacts stay mutually consistent.
        """
        if self.exists():
            manifest = self.read_manifest()
            if seed is not None and seed != manifest["seed"]:
                raise ConfigError(
                    f"run directory {self.path} was created with seed "
                    f"{manifest['seed']}; refusing --seed {seed}")
            return manifest
        self.path.mkdir(parents=True, exist_ok=True)
        manifest = {
            "version": MANIFEST_VERSION,
            "created_utc": _utcnow(),
            "updated_utc": _utcnow(),
            "seed": int(seed if seed is not None else 0),
            "config": config_snapshot,
            "inputs": {},
            "stages": {},
        }
        self.write_manifest(manifest)
        return manifest

    def read_manifest(self) -> dict:
        try:
            return json.loads(self.manifest_path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"{self.path} is not a run directory "
                              "(no manifest.json)")

    def write_manifest(self, manifest: dict):
        manifest["updated_utc"] = _utcnow()
        tmp = self.manifest_path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        os.replace(tmp, self.manifest_path)

    @contextmanager
    def lock(self):
        """Exclusive advisory lock for the duration of a stage."""
        self.path.mkdir(parents=True, exist_ok=True)
        lockfile = self.path / ".lock"
        try:
            fd = os.open(lockfile, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(
                f"run directory {self.path} is locked by another process "
                f"(remove {lockfile} if stale)")
        try:
            os.write(fd, f"{os.getpid()}\n".encode())
            os.close(fd)
            yield self
        finally:
            try:
                lockfile.unlink()
            except FileNotFoundError:
                pass

    # -- inputs ---------------------------------------------------------

    def record_inputs(self, named_paths: dict[str, str | Path]):
        """Digest input files; on resume, changed inputs are refused."""
        manifest = self.read_manifest()
        for name, p in named_paths.items():
            digest = file_digest(p)
            old = manifest["inputs"].get(name)
            if old is not None and old != digest:
                raise DataError(
                    f"input {name} ({p}) changed since this run directory "
                    "was populated; use a fresh --run-dir")
            manifest["inputs"][name] = digest
        self.write_manifest(manifest)

    # -- stages ---------------------------------------------------------

    def record_stage(self, stage: str, outputs, extra: dict | None = None):
        manifest = self.read_manifest()
        entry = {
            "completed_utc": _utcnow(),
            "outputs": {str(Path(p).relative_to(self.path)): file_digest(p)
                        for p in outputs},
        }
        if extra:
            entry.update(extra)
        manifest["stages"][stage] = entry
        self.write_manifest(manifest)

    def stage_complete(self, stage: str) -> bool:
        return self.exists() and stage_in(self.read_manifest(), stage)

    def verify(self) -> list[str]:
        """Re-digest recorded artifacts; returns mismatch descriptions.

        Inputs may live outside the run directory and move, so only the
        stage outputs are re-checked by path.
        """
        manifest = self.read_manifest()
        problems = []
        for stage, entry in manifest["stages"].items():
            for rel, digest in entry["outputs"].items():
                p = self.path / rel
                if not p.exists():
                    problems.append(f"{stage}: missing artifact {rel}")
                elif file_digest(p) != digest:
                    problems.append(f"{stage}: digest mismatch for {rel}")
        return problems


def stage_in(manifest: dict, stage: str) -> bool:
    return stage in manifest.get("stages", {})
