from __future__ import annotations

from typing import Any, Dict, Iterable, List, Optional
from pathlib import Path
from datetime import datetime
import hashlib
import json
import os
import platform
import time

import numpy as np

# ===================== General config =====================

TOOL_VERSION = "1.0.0"
DEFAULT_WORKERS = 4
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")

# Run status strings written to run manifests
STATUS_OK = "OK"
STATUS_FAILED = "FAILED"


def now_local() -> datetime:
    return datetime.now().astimezone()


def clean(x: Any) -> str:
    return str(x).strip() if x is not None else ""


def log(tag: str, msg: str, verbose: bool = True) -> None:
    """Print one '[tag] msg' line; prefix HH:MM:SS when SMARC_LOG_TIME=1."""
    if not verbose:
        return
    if os.environ.get("SMARC_LOG_TIME", "0").strip() == "1":
        print(f"[{datetime.now().strftime('%H:%M:%S')}] [{tag}] {msg}")
    else:
        print(f"[{tag}] {msg}")


def num_workers() -> int:
    """Worker-pool width from SMARC_NUM_THREADS (default 4)."""
    raw = clean(os.environ.get("SMARC_NUM_THREADS", ""))
    if not raw:
        return DEFAULT_WORKERS
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"SMARC_NUM_THREADS must be a positive integer, got '{raw}'")
    if n < 1:
        raise ValueError(f"SMARC_NUM_THREADS must be a positive integer, got '{raw}'")
    return n


def rng_stream(*keys: int) -> np.random.Generator:
    """Independent generator for a (seed, epoch, index, ...) key; order-independent of other streams."""
    return np.random.default_rng([int(k) for k in keys])


def checksum64(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def array_checksum(arrays: Iterable[np.ndarray]) -> str:
    h = hashlib.blake2b(digest_size=8)
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


# ===================== Files =====================

def find_images(folder: str | Path, recursive: bool = False) -> List[Path]:
    """*.png/*.jpg/*.jpeg under folder, excluding hidden and '~$' lock files, sorted."""
    folder_path = Path(folder)
    if not folder_path.exists():
        raise FileNotFoundError(f"Folder not found: {folder_path.resolve()}")
    pattern = "**/*" if recursive else "*"
    files = [
        p for p in folder_path.glob(pattern)
        if p.is_file()
        and p.suffix.lower() in IMAGE_SUFFIXES
        and not p.name.startswith(("~$", "."))
    ]
    return sorted(files)


# ===================== Run manifests =====================

class Stopwatch:
    """Named wall-clock intervals: `with sw.lap("train"): ...`."""

    def __init__(self):
        self.timings: Dict[str, float] = {}

    class _Lap:
        def __init__(self, owner: "Stopwatch", name: str):
            self.owner, self.name = owner, name

        def __enter__(self):
            self.t0 = time.perf_counter()
            return self

        def __exit__(self, *exc):
            self.owner.timings[self.name] = self.owner.timings.get(self.name, 0.0) + time.perf_counter() - self.t0
            return False

    def lap(self, name: str) -> "Stopwatch._Lap":
        return Stopwatch._Lap(self, name)


def write_run_manifest(
    out_dir: str | Path,
    command: str,
    config: Dict[str, Any],
    seed: Optional[int],
    inputs: Dict[str, Any],
    outputs: Dict[str, Any],
    timings: Dict[str, float],
    status: str = STATUS_OK,
) -> Path:
    """Write run_manifest.json beside a command's outputs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "status": status,
        "tool_version": TOOL_VERSION,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "started_at": now_local().isoformat(timespec="seconds"),
        "seed": seed,
        "config": config,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "timings_s": {k: round(float(v), 6) for k, v in timings.items()},
    }
    path = out / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path
