"""Workspace directory conventions, the run manifest, and the table formats.

A workspace is a plain directory: field files for the template, observation,
and model runs; the design and metrics tables; serialized emulators; and
per-mode posterior artifacts. ``workspace.json`` records, for every completed
stage, the exact configuration and input digests that produced its outputs,
so reruns with unchanged inputs can short-circuit. Nothing in a workspace
carries timestamps: identical inputs produce byte-identical workspaces.
"""

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from . import __version__

MANIFEST_NAME = "workspace.json"

# spec'd metric-table columns first, provenance columns after
_METRIC_FIELDS = ("d_a", "d_p", "d_euclid", "converged", "iters")
_EXTRA_FIELDS = ("run", "d_qmap0", "is_reference")


class WorkspaceError(ValueError):
    """A workspace validation problem (maps to CLI exit code 2)."""


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


class Workspace:
    """Path conventions and the stage manifest of one calibration workspace."""

    def __init__(self, root):
        self.root = Path(root)

    # field files
    @property
    def template_path(self) -> Path:
        return self.root / "template.json"

    @property
    def observation_path(self) -> Path:
        return self.root / "observation.json"

    @property
    def runs_dir(self) -> Path:
        return self.root / "runs"

    def run_path(self, index: int) -> Path:
        return self.runs_dir / f"run_{index:03d}.json"

    # tables and models
    @property
    def design_table(self) -> Path:
        return self.root / "design.csv"

    @property
    def design_manifest(self) -> Path:
        return self.root / "design.json"

    @property
    def metrics_table(self) -> Path:
        return self.root / "metrics.csv"

    @property
    def traces_table(self) -> Path:
        return self.root / "registration_traces.csv"

    @property
    def models_path(self) -> Path:
        return self.root / "models.json"

    @property
    def cv_report_path(self) -> Path:
        return self.root / "cv_report.json"

    def posterior_dir(self, mode: str) -> Path:
        return self.root / "posterior" / mode

    @property
    def report_dir(self) -> Path:
        return self.root / "report"

    @property
    def manifest_path(self) -> Path:
        return self.root / MANIFEST_NAME

    # manifest bookkeeping
    def load_manifest(self) -> dict:
        if not self.manifest_path.exists():
            return {"tool": "warpcal", "version": __version__, "stages": {}}
        with open(self.manifest_path) as f:
            return json.load(f)

    def save_manifest(self, manifest: dict):
        self.root.mkdir(parents=True, exist_ok=True)
        with open(self.manifest_path, "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")

    def stage_record(self, name: str):
        return self.load_manifest()["stages"].get(name)

    def stage_is_current(self, name: str, config: dict, inputs: list) -> bool:
        """True when the stage already ran with this config on identical inputs
        and all recorded outputs still exist."""
        record = self.stage_record(name)
        if record is None:
            return False
        if record.get("config") != _jsonify(config):
            return False
        if record.get("inputs") != self.digest_inputs(inputs):
            return False
        return all((self.root / out).exists() for out in record.get("outputs", []))

    def record_stage(self, name: str, config: dict, inputs: list, outputs: list):
        manifest = self.load_manifest()
        manifest["version"] = __version__
        manifest["stages"][name] = {
            "config": _jsonify(config),
            "inputs": self.digest_inputs(inputs),
            "outputs": sorted(str(Path(out).relative_to(self.root)) for out in outputs),
        }
        self.save_manifest(manifest)

    def digest_inputs(self, paths: list) -> dict:
        return {
            str(Path(p).relative_to(self.root)): file_digest(p)
            for p in sorted(paths, key=str)
        }


def _jsonify(value):
    return json.loads(json.dumps(value, sort_keys=True))


def file_digest(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_design_table(path, theta: np.ndarray, field_paths: list):
    """Design manifest table: theta columns plus the model-run field file."""
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    if len(field_paths) != theta.shape[0]:
        raise WorkspaceError(f"{len(field_paths)} field paths for {theta.shape[0]} design rows")
    header = [f"theta_{j + 1}" for j in range(theta.shape[1])] + ["field"]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row, field in zip(theta, field_paths):
            writer.writerow([_fmt(v) for v in row] + [str(field)])
    return path


def read_design_table(path) -> tuple[np.ndarray, list]:
    path = Path(path)
    if not path.exists():
        raise WorkspaceError(f"design table not found: {path}")
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        names = reader.fieldnames or []
        theta_cols = [n for n in names if n.startswith("theta_")]
        if not theta_cols or "field" not in names:
            raise WorkspaceError(f"design table {path} needs theta_* columns and a field column")
        theta_cols.sort(key=lambda n: int(n.split("_")[1]))
        rows = list(reader)
    theta = np.array([[float(r[c]) for c in theta_cols] for r in rows])
    fields = [r["field"] for r in rows]
    return theta, fields


def write_metrics_table(path, rows: list):
    """Registration metrics table; one row per registered image."""
    if not rows:
        raise WorkspaceError("no metric rows to write")
    n_theta = len(rows[0]["theta"])
    header = [f"theta_{j + 1}" for j in range(n_theta)] + list(_METRIC_FIELDS) + list(_EXTRA_FIELDS)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            record = [_fmt(v) for v in row["theta"]]
            record += [_fmt(row[name]) for name in _METRIC_FIELDS]
            record += [_fmt(row[name]) for name in _EXTRA_FIELDS]
            writer.writerow(record)
    return path


def read_metrics_table(path) -> dict:
    """Read a metrics table into arrays; design rows only (the reference row,
    when present, is reported separately)."""
    path = Path(path)
    if not path.exists():
        raise WorkspaceError(f"metrics table not found: {path}")
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        names = reader.fieldnames or []
        theta_cols = sorted(
            (n for n in names if n.startswith("theta_")), key=lambda n: int(n.split("_")[1])
        )
        missing = [c for c in _METRIC_FIELDS if c not in names]
        if missing:
            raise WorkspaceError(f"metrics table {path} is missing columns: {missing}")
        rows = list(reader)
    design_rows = [r for r in rows if r.get("is_reference", "0") != "1"]
    reference_rows = [r for r in rows if r.get("is_reference", "0") == "1"]

    def table(selected):
        return {
            "theta": np.array([[float(r[c]) for c in theta_cols] for r in selected]),
            "d_a": np.array([float(r["d_a"]) for r in selected]),
            "d_p": np.array([float(r["d_p"]) for r in selected]),
            "d_euclid": np.array([float(r["d_euclid"]) for r in selected]),
            "converged": np.array([r["converged"] == "1" for r in selected]),
            "iters": np.array([int(r["iters"]) for r in selected]),
            "d_qmap0": np.array([float(r["d_qmap0"]) for r in selected if "d_qmap0" in r]),
            "run": [r.get("run", "") for r in selected],
        }

    out = table(design_rows)
    out["reference"] = table(reference_rows) if reference_rows else None
    return out


def write_samples_table(path, chain):
    """Posterior samples table: chain, iter, parameters, log posterior."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["chain", "iter"] + list(chain.param_names) + ["logpost"])
        for c in range(chain.by_chain.shape[0]):
            for i in range(chain.by_chain.shape[1]):
                writer.writerow(
                    [c, i]
                    + [_fmt(v) for v in chain.by_chain[c, i]]
                    + [_fmt(chain.log_posts[c, i])]
                )
    return path
