"""Run manifests: every command writes one JSON manifest next to its
outputs, carrying the resolved config, seed, paths and timestamps —
enough to re-run the command identically.

With EPIMATCH_DETERMINISTIC=1 in the environment, wall-clock values
(timestamps, elapsed times destined for files) are written as fixed
constants so that two identical runs produce byte-identical output
trees; all computational results are seed-determined regardless.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone

from . import formats

DETERMINISTIC_ENV = "EPIMATCH_DETERMINISTIC"
_FIXED_TIMESTAMP = "1970-01-01T00:00:00+00:00"


def deterministic_mode() -> bool:
    return os.environ.get(DETERMINISTIC_ENV, "") not in ("", "0")


def now_iso() -> str:
    if deterministic_mode():
        return _FIXED_TIMESTAMP
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def file_elapsed_ms(real_ms: float | None) -> float | None:
    """Elapsed value as written to output files (zeroed in deterministic
    mode; the in-memory reports keep the real measurement)."""
    if real_ms is None:
        return None
    return 0.0 if deterministic_mode() else float(real_ms)


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    seed: int | None = None
    version: str = ""
    started_at: str = ""
    finished_at: str = ""
    notes: dict = field(default_factory=dict)

    @classmethod
    def start(cls, command: str, config: dict, seed=None,
              inputs=None) -> "RunManifest":
        from . import __version__
        return cls(command=command, config=config, seed=seed,
                   inputs=list(inputs or []), version=__version__,
                   started_at=now_iso())

    def add_output(self, path) -> str:
        self.outputs.append(str(path))
        return str(path)

    def to_json(self) -> dict:
        return {
            "command": self.command,
            "config": self.config,
            "config_hash": config_hash(self.config),
            "inputs": list(self.inputs),
            "outputs": list(self.outputs),
            "seed": self.seed,
            "version": self.version,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "notes": dict(self.notes),
        }

    def finish(self, out_dir) -> str:
        """Stamp the end time and write `manifest.json` into out_dir."""
        self.finished_at = now_iso()
        path = os.path.join(out_dir, "manifest.json")
        formats.atomic_write_text(
            path, json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        return path
