"""
Run logs on disk: one JSONL file per run plus a manifest.

<run_key>.partial.jsonl   records appended while the run is in progress
<run_key>.jsonl           the same file, renamed once the run finished
manifest.json             run_key → variant, drop rate, status, error
"""
import hashlib
import json
import threading
from pathlib import Path

from infrastructure.errors import ConfigurationError
from infrastructure.logger import log

MANIFEST_FILE = "manifest.json"
PARTIAL_SUFFIX = ".partial.jsonl"
DONE_SUFFIX = ".jsonl"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def run_key(payload: dict) -> str:
    return hashlib.sha256(canonical_json(payload).encode()).hexdigest()[:20]


class RunLogWriter:
    """
    Single appender for a log directory. Every write (records and manifest)
    goes through one lock, so worker threads never interleave lines.
    """

    def __init__(self, log_dir):
        self.log_dir = Path(log_dir)
        self.log_dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self.manifest = load_manifest(self.log_dir)

    def discard_partials(self) -> int:
        """Removes leftovers of interrupted runs; they are re-executed from scratch."""
        stale = sorted(self.log_dir.glob(f"*{PARTIAL_SUFFIX}"))
        for path in stale:
            path.unlink()
        if stale:
            log.warning(f"[RUNLOG] discarded {len(stale)} partial run logs in {self.log_dir}")
        return len(stale)

    def is_complete(self, key: str) -> bool:
        entry = self.manifest.get(key)
        if entry is None:
            return False
        if entry.get("status") == "config_error":
            return True
        return (self.log_dir / f"{key}{DONE_SUFFIX}").exists()

    def begin(self, key: str):
        with self._lock:
            (self.log_dir / f"{key}{PARTIAL_SUFFIX}").write_text("", encoding="utf-8")

    def append(self, key: str, row: dict):
        with self._lock:
            with open(self.log_dir / f"{key}{PARTIAL_SUFFIX}", "a", encoding="utf-8") as f:
                f.write(canonical_json(row) + "\n")

    def finish(self, key: str, entry: dict):
        """Renames the partial file into place, then records the run in the manifest."""
        with self._lock:
            partial = self.log_dir / f"{key}{PARTIAL_SUFFIX}"
            if partial.exists():
                partial.replace(self.log_dir / f"{key}{DONE_SUFFIX}")
            self.manifest[key] = entry
            self._write_manifest()

    def _write_manifest(self):
        tmp = self.log_dir / f"{MANIFEST_FILE}.tmp"
        tmp.write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        tmp.replace(self.log_dir / MANIFEST_FILE)


def load_manifest(log_dir) -> dict:
    """Manifest dict, or {} when absent or unreadable."""
    path = Path(log_dir) / MANIFEST_FILE
    if path.exists():
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            log.warning(f"[RUNLOG] {path} is corrupted; starting with an empty manifest")
            return {}
    return {}


def completed_logs(log_dir) -> list:
    """Finished run files in a stable order."""
    log_dir = Path(log_dir)
    return sorted(p for p in log_dir.glob(f"*{DONE_SUFFIX}") if not p.name.endswith(PARTIAL_SUFFIX))


def read_rows(log_dir) -> list:
    """All rows of all finished runs. A truncated final line is skipped."""
    log_dir = Path(log_dir)
    if not log_dir.is_dir():
        raise ConfigurationError(f"Log directory not found: {log_dir}", key="log_dir")
    rows = []
    for path in completed_logs(log_dir):
        for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError:
                log.warning(f"[RUNLOG] {path.name}:{n} is not valid JSON; skipped")
    return rows


def log_digest(log_dir, exclude=("epoch_wall_seconds",)) -> str:
    """sha256 over every finished run's rows with timing fields removed."""
    digest = hashlib.sha256()
    for path in completed_logs(log_dir):
        digest.update(path.stem.encode())
        for line in path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                row = {k: v for k, v in json.loads(line).items() if k not in exclude}
                digest.update(canonical_json(row).encode())
    return digest.hexdigest()
