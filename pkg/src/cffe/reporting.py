"""CSV/JSON exports and the report bundle.

Every file is written atomically (temporary file in the target directory,
then ``os.replace``).  CSV floats use Python's shortest round-trip repr, so
re-reading an export reproduces the data exactly.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import pandas as pd
import scipy

from .errors import CffeError, IoFailure
from .panel import RESERVED, PanelDataset, PanelSchema

MANIFEST_VERSION = 1


# ---------------------------------------------------------------------------
# Low-level writers
# ---------------------------------------------------------------------------

def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc.strerror or exc}") from None


def frame_to_csv(frame: pd.DataFrame) -> bytes:
    buf = io.StringIO()
    frame.to_csv(buf, index=False, lineterminator="\n")
    return buf.getvalue().encode("utf-8")


def to_json_bytes(obj) -> bytes:
    return (json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n").encode("utf-8")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return None if not np.isfinite(v) else v
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def _cell(v) -> str:
    if v is None or v is pd.NA:
        return ""
    if isinstance(v, (float, np.floating)):
        return "" if np.isnan(v) else repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def export_panel(dataset: PanelDataset) -> bytes:
    """The dataset in the loader's CSV schema (never-treated adoption left empty)."""
    f = dataset.frame
    cols = ["country", "year", "outcome", "adoption_year", *dataset.feature_names, *dataset.extra_names]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in f[cols].itertuples(index=False):
        w.writerow([_cell(v) for v in row])
    return buf.getvalue().encode("utf-8")


def infer_schema(csv_bytes: bytes, extra_outcomes: Iterable[str] = ()) -> PanelSchema:
    """Every non-reserved header column is a feature unless listed as an extra outcome."""
    try:
        header = next(csv.reader(io.StringIO(csv_bytes.decode("utf-8-sig"))))
    except (StopIteration, UnicodeDecodeError):
        header = []
    extras = tuple(extra_outcomes)
    feats = tuple(h.strip() for h in header if h.strip() not in RESERVED and h.strip() not in extras)
    return PanelSchema(features=feats, extra_outcomes=extras)


def read_bytes(path: str | os.PathLike) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc.strerror or exc}") from None


# ---------------------------------------------------------------------------
# Report bundle
# ---------------------------------------------------------------------------

def derive_seed(seed: int, task: str) -> int:
    """Stable 32-bit sub-seed for a named task."""
    digest = hashlib.sha256(f"{int(seed)}:{task}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def versions() -> dict[str, str]:
    try:
        own = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        own = "unknown"
    return {"artifact": own, "numpy": np.__version__, "pandas": pd.__version__, "scipy": scipy.__version__}


@dataclass
class Bundle:
    """Collects outputs of named tasks; failed tasks mark the bundle incomplete."""

    out_dir: Path
    config: dict
    files: dict[str, str] = field(default_factory=dict)
    tasks: dict[str, dict] = field(default_factory=dict)

    def write(self, relpath: str, data: bytes) -> None:
        atomic_write(self.out_dir / relpath, data)
        self.files[relpath] = hashlib.sha256(data).hexdigest()

    def run(self, name: str, fn: Callable[[], None]) -> bool:
        try:
            fn()
        except CffeError as exc:
            self.tasks[name] = {"status": "failed", "error": f"{exc.code}: {exc}"}
            return False
        self.tasks[name] = {"status": "ok"}
        return True

    @property
    def complete(self) -> bool:
        return all(t["status"] == "ok" for t in self.tasks.values())

    def finish(self) -> dict:
        manifest = {
            "manifest_version": MANIFEST_VERSION,
            "status": "complete" if self.complete else "incomplete",
            "config": self.config,
            "versions": versions(),
            "tasks": self.tasks,
            "files": dict(sorted(self.files.items())),
        }
        atomic_write(self.out_dir / "manifest.json", to_json_bytes(manifest))
        return manifest


def irf_frame(irfs) -> pd.DataFrame:
    rows = []
    for irf in irfs:
        rows.extend(irf.to_long_rows())
    return pd.DataFrame(rows, columns=["regime", "variable", "quarter", "value"])


def config_dict(obj) -> dict:
    return _jsonable(asdict(obj))
