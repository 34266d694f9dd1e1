"""File formats: dataset CSV, basis spec, fit reports, experiment tables and run manifests.

Every file is written to a temporary sibling first and moved into place with
``os.replace`` so readers never see a partial file.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import numpy as np

from .model import (
    CT_CEILING,
    AR1Covariance,
    Dataset,
    FullCovariance,
    LinearCovariance,
    ModelDims,
    SubjectRecord,
    ct_inverse,
)

HEADER = ("subject_id", "day_offset", "value")


class DatasetFormatError(ValueError):
    """Malformed dataset file; ``line`` is 1-based and counts the header."""

    def __init__(self, path, line: int, message: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class BasisSpecError(ValueError):
    pass


def fmt(x) -> str:
    return format(float(x), ".17g")


# -- atomic writes ------------------------------------------------------------

def atomic_write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_csv(path, header, rows) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return atomic_write_text(path, buf.getvalue())


def write_json(path, obj) -> Path:
    return atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


# -- dataset CSV --------------------------------------------------------------

@dataclass
class ExclusionReport:
    """Per-subject accounting of a dataset read.

    ``n_input`` equals ``n_accepted`` plus the three exclusion counts.
    ``by_multiplicity`` maps the number of retained rows to input and accepted
    subject counts.
    """
    n_input: int = 0
    n_accepted: int = 0
    no_rows_left: int = 0          # every row was at or above the ceiling
    gap_sum_too_large: int = 0
    gap_too_large: int = 0
    rows_read: int = 0
    rows_above_ceiling: int = 0
    by_multiplicity: dict = field(default_factory=dict)

    @property
    def n_excluded(self) -> int:
        return self.no_rows_left + self.gap_sum_too_large + self.gap_too_large

    def to_dict(self) -> dict:
        out = asdict(self)
        out["by_multiplicity"] = {str(k): v for k, v in sorted(self.by_multiplicity.items())}
        out["n_excluded"] = self.n_excluded
        return out


def _parse_rows(path):
    """Yield ``(line, subject, offset, value)`` for each data row."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetFormatError(path, 1, "empty file") from None
        if tuple(h.strip() for h in header) != HEADER:
            raise DatasetFormatError(path, 1, f"expected header {','.join(HEADER)!r}, got {','.join(header)!r}")
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != 3:
                raise DatasetFormatError(path, line, f"expected 3 fields, got {len(row)}")
            sid, off_text, val_text = (c.strip() for c in row)
            if not sid:
                raise DatasetFormatError(path, line, "empty subject_id")
            try:
                off = int(off_text)
            except ValueError:
                raise DatasetFormatError(path, line, f"day_offset {off_text!r} is not an integer") from None
            if off < 0:
                raise DatasetFormatError(path, line, f"negative day_offset {off}")
            try:
                val = float(val_text)
            except ValueError:
                raise DatasetFormatError(path, line, f"value {val_text!r} is not a number") from None
            if not np.isfinite(val):
                raise DatasetFormatError(path, line, f"non-finite value {val_text!r}")
            yield line, sid, off, val


def read_dataset(path, d: int, ct_mode: bool = False, ceiling: float = CT_CEILING,
                 max_gap: int | None = None):
    """Read a ``subject_id,day_offset,value`` file into ``(Dataset, ExclusionReport)``.

    In Ct mode rows at or above ``ceiling`` are dropped (negative tests) and
    the rest mapped to ``ceiling - value``.  Subjects whose gaps sum to ``d``
    or more, or with any gap above ``max_gap`` (default ``d - 1``), are
    excluded and counted.
    """
    ModelDims(d)
    max_gap = d - 1 if max_gap is None else int(max_gap)
    subjects: dict[str, list] = {}
    first_line: dict[str, int] = {}
    seen: dict[tuple, int] = {}
    report = ExclusionReport()
    for line, sid, off, val in _parse_rows(path):
        report.rows_read += 1
        key = (sid, off)
        if key in seen:
            raise DatasetFormatError(path, line, f"duplicate row for subject {sid!r} at day_offset {off} "
                                                 f"(first on line {seen[key]})")
        seen[key] = line
        first_line.setdefault(sid, line)
        subjects.setdefault(sid, []).append((off, val))
    for sid, rows in subjects.items():
        if min(off for off, _ in rows) != 0:
            raise DatasetFormatError(path, first_line[sid], f"subject {sid!r} has no row with day_offset 0")

    records = []
    report.n_input = len(subjects)
    for sid, rows in subjects.items():
        rows.sort()
        if ct_mode:
            kept = [(o, v) for o, v in rows if v < ceiling]
            report.rows_above_ceiling += len(rows) - len(kept)
            rows = [(o, ceiling - v) for o, v in kept]
        m = len(rows)
        tally = report.by_multiplicity.setdefault(m, {"input": 0, "accepted": 0})
        tally["input"] += 1
        if m == 0:
            report.no_rows_left += 1
            continue
        offsets = np.array([o for o, _ in rows], dtype=np.int64)
        gaps = np.diff(offsets)
        if gaps.sum() >= d:
            report.gap_sum_too_large += 1
            continue
        if gaps.size and gaps.max() > max_gap:
            report.gap_too_large += 1
            continue
        records.append(SubjectRecord([v for _, v in rows], gaps, sid))
        tally["accepted"] += 1
    report.n_accepted = len(records)
    return Dataset(records, ModelDims(d)), report


def dataset_rows(data):
    records = data.records if isinstance(data, Dataset) else data
    for i, rec in enumerate(records):
        sid = rec.subject_id if rec.subject_id is not None else f"s{i + 1}"
        for off, v in zip(rec.offsets, rec.values):
            yield sid, int(off), fmt(v)


def write_dataset(path, data) -> Path:
    return write_csv(path, HEADER, dataset_rows(data))


def write_truth(path, truth, origins, seed: int, n: int, extra: dict | None = None) -> Path:
    """Sidecar with the generating parameters and every subject's hidden first day."""
    obj = {
        "seed": int(seed),
        "n": int(n),
        "d": truth.d,
        "theta": truth.theta.theta,
        "cov_matrix": truth.cov_matrix(),
        "cov": covariance_summary(truth.cov),
        "q": truth.q.q,
        "gap_law": truth.gap_law.describe(),
        "m_per_subject": truth.m_per_subject,
        "metadata": truth.metadata,
        "rejected_gap_draws": origins.rejected_gap_draws,
        "first_day": origins.first_day,
    }
    if extra:
        obj.update(extra)
    return write_json(path, obj)


# -- basis spec ---------------------------------------------------------------

def parse_basis_spec(text: str, d: int):
    """Build linear-covariance basis matrices from directive lines.

    ``diag j`` is the variance of day ``j`` (day ``d`` covers the whole tail),
    ``diag *`` expands to every day, and ``band k`` is one value shared by the
    lag-``k`` off-diagonals.  ``#`` starts a comment.
    """
    L = 2 * d - 1
    basis, labels = [], []

    def add(mat, label):
        if label in labels:
            raise BasisSpecError(f"duplicate basis directive {label!r}")
        basis.append(mat)
        labels.append(label)

    def diag(j):
        b = np.zeros((L, L))
        idx = np.arange(d - 1, L) if j == d else np.array([j - 1])
        b[idx, idx] = 1.0
        return b

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        kind = parts[0].lower()
        if kind == "diag" and len(parts) == 2:
            if parts[1] == "*":
                for j in range(1, d + 1):
                    add(diag(j), f"diag {j}")
                continue
            j = _int_arg(parts[1], lineno)
            if not 1 <= j <= d:
                raise BasisSpecError(f"line {lineno}: diag day {j} outside 1..{d}")
            add(diag(j), f"diag {j}")
        elif kind == "band" and len(parts) in (2, 3):
            if len(parts) == 3 and parts[2].lower() != "value-shared":
                raise BasisSpecError(f"line {lineno}: unknown band option {parts[2]!r}")
            k = _int_arg(parts[1], lineno)
            if not 1 <= k < L:
                raise BasisSpecError(f"line {lineno}: band lag {k} outside 1..{L - 1}")
            add(np.eye(L, k=k) + np.eye(L, k=-k), f"band {k}")
        else:
            raise BasisSpecError(f"line {lineno}: cannot parse {raw.strip()!r}")
    if not basis:
        raise BasisSpecError("basis spec has no directives")
    return basis, labels


def _int_arg(text, lineno):
    try:
        return int(text)
    except ValueError:
        raise BasisSpecError(f"line {lineno}: {text!r} is not an integer") from None


def read_basis_spec(path, d: int):
    return parse_basis_spec(Path(path).read_text(encoding="utf-8"), d)


# -- fit reports --------------------------------------------------------------

def covariance_summary(spec) -> dict:
    if isinstance(spec, AR1Covariance):
        return {"structure": "ar1", "sigma2": spec.sigma2, "rho": spec.rho}
    if isinstance(spec, LinearCovariance):
        return {"structure": "linear", "labels": list(spec.labels), "beta": spec.beta}
    if isinstance(spec, FullCovariance):
        return {"structure": "full"}
    raise TypeError(f"unknown covariance spec {type(spec).__name__}")


def fit_summary(result, exclusion: ExclusionReport | None = None) -> dict:
    out = {
        "d": result.d,
        "loglik": result.loglik,
        "loglik_per_measurement": result.loglik_per_measurement,
        "iterations": result.iterations,
        "em_steps": result.em_steps,
        "converged": result.converged,
        "label": result.label,
        "start_index": result.start_index,
        "n_records": result.n_records,
        "n_measurements": result.n_measurements,
        "peak_day": int(np.argmax(result.theta[:result.d])) + 1,
        "cov": covariance_summary(result.cov),
        "alpha": list(result.alpha) if result.alpha is not None else None,
        "d_max": result.d_max,
        "flags": list(result.flags),
        "diagnostics": [{"kind": w.kind, "index": w.index, "message": w.message} for w in result.diagnostics],
        "starts": [asdict(s) for s in result.starts],
    }
    if exclusion is not None:
        out["exclusions"] = exclusion.to_dict()
    return out


def write_fit_report(out_dir, result, exclusion: ExclusionReport | None = None) -> list:
    """``theta.csv``, ``cov.csv``, ``q.csv``, ``trace.csv`` and ``summary.json`` under ``out_dir``."""
    out = Path(out_dir)
    L = result.theta.size
    theta_rows = [(k + 1, float(t), float(ct_inverse(t))) for k, t in enumerate(result.theta)]
    cov_header = ["day"] + [f"day_{k + 1}" for k in range(L)]
    cov_rows = [[k + 1] + [float(v) for v in row] for k, row in enumerate(result.cov_matrix)]
    return [
        write_csv(out / "theta.csv", ("day", "theta", "ct"), theta_rows),
        write_csv(out / "cov.csv", cov_header, cov_rows),
        write_csv(out / "q.csv", ("day", "q"), [(k + 1, float(v)) for k, v in enumerate(result.q)]),
        write_csv(out / "trace.csv", ("step", "loglik"),
                  [(k, float(v)) for k, v in enumerate(result.loglik_trace)]),
        write_json(out / "summary.json", fit_summary(result, exclusion)),
    ]


# -- experiment tables --------------------------------------------------------

def write_nmse_table(path, rows) -> Path:
    return write_csv(path, ("setting", "parameter", "n", "replicate", "nmse"), rows)


def write_overlay_table(path, rows) -> Path:
    return write_csv(path, ("day", "replicate", "theta_hat"), rows)


# -- run manifest -------------------------------------------------------------

def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def tool_version() -> str:
    try:
        return metadata.version("vlcurve")
    except metadata.PackageNotFoundError:
        return "unknown"


def now_utc() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    inputs: dict                    # path -> sha256
    outputs: list
    version: str
    started: str
    finished: str

    @classmethod
    def create(cls, command, config, seed, input_paths, outputs, started):
        return cls(command, config, seed, {str(p): file_digest(p) for p in input_paths},
                   sorted(str(p) for p in outputs), tool_version(), started, now_utc())

    def write(self, path) -> Path:
        return write_json(path, asdict(self))


def read_manifest(path) -> RunManifest:
    return RunManifest(**json.loads(Path(path).read_text(encoding="utf-8")))


def read_marginals(path):
    """Per-day value samples from a ``day,value`` CSV (days 1-based and contiguous)."""
    from .simulate import EmpiricalMarginals

    by_day: dict[int, list] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != ("day", "value"):
            raise DatasetFormatError(path, 1, "expected header 'day,value'")
        for row in reader:
            if not row:
                continue
            try:
                day, val = int(row[0]), float(row[1])
            except (ValueError, IndexError):
                raise DatasetFormatError(path, reader.line_num, f"cannot parse {','.join(row)!r}") from None
            by_day.setdefault(day, []).append(val)
    days = sorted(by_day)
    if not days or days != list(range(1, days[-1] + 1)):
        raise DatasetFormatError(path, 1, "days must run contiguously from 1")
    return EmpiricalMarginals(tuple(by_day[k] for k in days))


def write_marginals(path, marginals) -> Path:
    rows = ((k + 1, float(v)) for k, s in enumerate(marginals.samples) for v in s)
    return write_csv(path, ("day", "value"), rows)
