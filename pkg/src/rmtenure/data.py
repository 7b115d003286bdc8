"""Counting-process data model for two-process (promotion, retirement) records.

Times are real numbers on a calendar axis (days since an epoch by default).
Covariates are right-continuous step functions stored per process.
"""

from __future__ import annotations

import csv
import datetime as _dt
import io
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "CovariateTrajectory",
    "ProcessObservation",
    "SubjectRecord",
    "Dataset",
    "RestrictionWindow",
    "Sidecar",
    "Violation",
    "ValidationError",
    "ParseError",
    "validate_dataset",
    "evaluate_covariates",
    "read_csv",
    "write_csv",
    "dumps_csv",
    "loads_csv",
    "read_sidecar",
    "format_time",
]

PROCESSES = ("P", "R")


class ParseError(ValueError):
    """Malformed input file; carries the offending line number when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class Violation:
    subject_id: str | None
    rule: str
    detail: str

    def __str__(self):
        who = self.subject_id if self.subject_id is not None else "<dataset>"
        return f"{who}: [{self.rule}] {self.detail}"


class ValidationError(ValueError):
    """Raised by :func:`validate_dataset`; lists every violation found."""

    def __init__(self, violations: Sequence[Violation]):
        self.violations = list(violations)
        lines = "\n".join(f"  {v}" for v in self.violations)
        super().__init__(f"{len(self.violations)} validation error(s):\n{lines}")


@dataclass(frozen=True)
class CovariateTrajectory:
    """Right-continuous piecewise-constant covariate path.

    Segment ``k`` holds ``values[k]`` on ``[starts[k], starts[k+1])``; the last
    segment extends indefinitely.
    """

    starts: tuple[float, ...]
    values: tuple[tuple[float, ...], ...]

    @classmethod
    def constant(cls, start, values):
        return cls((float(start),), (tuple(float(v) for v in values),))

    @classmethod
    def from_segments(cls, segments: Iterable[tuple[float, Sequence[float]]]):
        segs = list(segments)
        return cls(tuple(float(s) for s, _ in segs),
                   tuple(tuple(float(v) for v in vals) for _, vals in segs))

    @property
    def dim(self) -> int:
        return len(self.values[0]) if self.values else 0

    @property
    def first_start(self) -> float:
        return self.starts[0]

    @cached_property
    def _starts_array(self) -> np.ndarray:
        return np.asarray(self.starts, dtype=float)

    @cached_property
    def _values_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float).reshape(len(self.starts), -1)

    def __call__(self, t):
        return evaluate_covariates(self, t)

    def evaluate_many(self, times) -> np.ndarray:
        """Values at each of ``times`` as a ``(len(times), dim)`` array."""
        times = np.asarray(times, dtype=float)
        if times.size and times.min() < self.starts[0]:
            raise ValueError(
                f"time {times.min()!r} precedes trajectory start {self.starts[0]!r}")
        idx = np.searchsorted(self._starts_array, times, side="right") - 1
        return self._values_array[idx]

    def replace_column(self, column: int, value: float) -> "CovariateTrajectory":
        vals = tuple(v[:column] + (float(value),) + v[column + 1:] for v in self.values)
        return CovariateTrajectory(self.starts, vals)

    def is_constant(self) -> bool:
        return len(self.starts) == 1


def evaluate_covariates(traj: CovariateTrajectory, t: float) -> np.ndarray:
    """Covariate vector in force at time ``t``.

    Raises
    ------
    ValueError
        If ``t`` precedes the first segment start.
    """
    if t < traj.starts[0]:
        raise ValueError(f"time {t!r} precedes trajectory start {traj.starts[0]!r}")
    k = int(np.searchsorted(traj._starts_array, t, side="right")) - 1
    return traj._values_array[k].copy()


@dataclass(frozen=True)
class ProcessObservation:
    entry: float
    exit: float
    event: bool


@dataclass(frozen=True)
class SubjectRecord:
    id: str
    promotion: ProcessObservation | None
    retirement: ProcessObservation | None
    x_traj: CovariateTrajectory | None
    z_traj: CovariateTrajectory | None
    protected_flag: bool = False

    def observation(self, process: str) -> ProcessObservation | None:
        return self.promotion if process == "P" else self.retirement

    def trajectory(self, process: str) -> CovariateTrajectory | None:
        return self.x_traj if process == "P" else self.z_traj


@dataclass(frozen=True)
class RestrictionWindow:
    tau0: float
    tau1: float

    def __post_init__(self):
        if not (self.tau0 < self.tau1):
            raise ValueError(f"restriction window needs tau0 < tau1, got {self.tau0}, {self.tau1}")

    def start_for(self, entry: float) -> float:
        return max(self.tau0, entry)


@dataclass(frozen=True)
class Dataset:
    subjects: tuple[SubjectRecord, ...]
    promo_covariate_names: tuple[str, ...]
    retire_covariate_names: tuple[str, ...]
    protected_column: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))
        object.__setattr__(self, "promo_covariate_names", tuple(self.promo_covariate_names))
        object.__setattr__(self, "retire_covariate_names", tuple(self.retire_covariate_names))

    def __len__(self):
        return len(self.subjects)

    def covariate_names(self, process: str) -> tuple[str, ...]:
        return self.promo_covariate_names if process == "P" else self.retire_covariate_names

    def subject(self, subject_id: str) -> SubjectRecord:
        for s in self.subjects:
            if s.id == subject_id:
                return s
        raise KeyError(subject_id)


def _check_traj(sid, label, traj, dim, violations):
    if traj is None:
        violations.append(Violation(sid, "missing-trajectory", f"{label} trajectory absent"))
        return False
    if not traj.starts:
        violations.append(Violation(sid, "empty-trajectory", f"{label} trajectory has no segments"))
        return False
    ok = True
    if any(b <= a for a, b in zip(traj.starts, traj.starts[1:])):
        violations.append(Violation(sid, "segment-order",
                                    f"{label} segment starts not strictly increasing"))
        ok = False
    if len(traj.values) != len(traj.starts):
        violations.append(Violation(sid, "segment-count",
                                    f"{label} has {len(traj.starts)} starts but {len(traj.values)} value rows"))
        return False
    if any(len(v) != dim for v in traj.values):
        violations.append(Violation(sid, "covariate-dimension",
                                    f"{label} value vectors must have length {dim}"))
        ok = False
    if any(not math.isfinite(v) for row in traj.values for v in row) or \
            any(not math.isfinite(s) for s in traj.starts):
        violations.append(Violation(sid, "missing-value", f"{label} contains missing or non-finite values"))
        ok = False
    return ok


def validate_dataset(raw: Dataset) -> Dataset:
    """Check every structural invariant and return ``raw`` unchanged.

    Raises
    ------
    ValidationError
        Listing each violation with its subject id.
    """
    violations: list[Violation] = []
    seen = set()
    n_events = {"P": 0, "R": 0}
    for s in raw.subjects:
        sid = s.id
        if sid in seen:
            violations.append(Violation(sid, "duplicate-id", "subject id appears more than once"))
        seen.add(sid)
        if s.promotion is None and s.retirement is None:
            violations.append(Violation(sid, "no-observation", "subject has neither process"))
        for proc, label in (("P", "promotion"), ("R", "retirement")):
            obs = s.observation(proc)
            if obs is None:
                continue
            if not (math.isfinite(obs.entry) and math.isfinite(obs.exit)):
                violations.append(Violation(sid, "non-finite-time", f"{label} entry/exit not finite"))
                continue
            if obs.entry > obs.exit:
                violations.append(Violation(sid, "entry-after-exit",
                                            f"{label} entry {obs.entry!r} > exit {obs.exit!r}"))
            n_events[proc] += bool(obs.event)
            dim = len(raw.covariate_names(proc))
            traj = s.trajectory(proc)
            if _check_traj(sid, label, traj, dim, violations) and traj.starts[0] > obs.entry:
                violations.append(Violation(sid, "trajectory-coverage",
                                            f"{label} trajectory starts at {traj.starts[0]!r} after entry {obs.entry!r}"))
        p, r = s.promotion, s.retirement
        if p is not None and r is not None and r.event and p.exit > r.exit:
            violations.append(Violation(sid, "promotion-after-retirement",
                                        f"promotion exit {p.exit!r} > retirement time {r.exit!r}"))
    if n_events["P"] == 0:
        violations.append(Violation(None, "no-events", "no events in promotion process"))
    if n_events["R"] == 0:
        violations.append(Violation(None, "no-events", "no events in retirement process"))
    if violations:
        raise ValidationError(violations)
    return raw


# ---------------------------------------------------------------------------
# file formats


def format_time(t: float) -> str:
    """Shortest decimal string that round-trips to the same float."""
    return repr(float(t))


@dataclass(frozen=True)
class Sidecar:
    protected_column: str
    window: RestrictionWindow | None = None
    epoch: str = "1970-01-01"
    promotion_covariates: tuple[str, ...] | None = None
    retirement_covariates: tuple[str, ...] | None = None
    extra: dict = field(default_factory=dict, compare=False)


def parse_time(text: str, epoch: str = "1970-01-01") -> float:
    """Numbers pass through; ISO dates become days since ``epoch``."""
    text = text.strip()
    try:
        return float(text)
    except ValueError:
        pass
    day = _dt.date.fromisoformat(text)
    return float((day - _dt.date.fromisoformat(epoch)).days)


def read_sidecar(path) -> Sidecar:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"sidecar is not valid JSON: {exc.msg}", exc.lineno) from exc
    return sidecar_from_dict(raw)


def sidecar_from_dict(raw: dict) -> Sidecar:
    if not isinstance(raw, dict) or not raw.get("protected_column"):
        raise ParseError("sidecar must name a 'protected_column'")
    epoch = raw.get("epoch", "1970-01-01")
    window = None
    if raw.get("window") is not None:
        w = raw["window"]
        if len(w) != 2:
            raise ParseError("sidecar 'window' must be [tau0, tau1]")
        window = RestrictionWindow(parse_time(str(w[0]), epoch), parse_time(str(w[1]), epoch))
    pc = raw.get("promotion_covariates")
    rc = raw.get("retirement_covariates")
    known = {"protected_column", "window", "epoch", "promotion_covariates", "retirement_covariates"}
    return Sidecar(
        protected_column=raw["protected_column"],
        window=window,
        epoch=epoch,
        promotion_covariates=tuple(pc) if pc is not None else None,
        retirement_covariates=tuple(rc) if rc is not None else None,
        extra={k: v for k, v in raw.items() if k not in known},
    )


_FIXED = ["subject_id", "process", "entry", "exit", "event", "segment_start"]


def loads_csv(text: str, sidecar: Sidecar) -> Dataset:
    """Parse the one-row-per-covariate-segment CSV format.

    The sidecar decides which covariate columns belong to each process; by
    default every column is used for both. Blank cells are allowed only in
    columns a process does not use.
    """
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty file", 1) from None
    header = [h.strip() for h in header]
    if header[:6] != _FIXED:
        raise ParseError(f"header must start with {','.join(_FIXED)}", 1)
    cov_names = header[6:]
    if len(set(cov_names)) != len(cov_names):
        raise ParseError("duplicate covariate column names", 1)
    names = {
        "P": tuple(sidecar.promotion_covariates) if sidecar.promotion_covariates is not None else tuple(cov_names),
        "R": tuple(sidecar.retirement_covariates) if sidecar.retirement_covariates is not None else tuple(cov_names),
    }
    for proc in PROCESSES:
        missing = [c for c in names[proc] if c not in cov_names]
        if missing:
            raise ParseError(f"sidecar names unknown covariate column(s) {missing}")
    cols = {proc: [cov_names.index(c) for c in names[proc]] for proc in PROCESSES}
    pcol = sidecar.protected_column
    if pcol not in cov_names:
        raise ParseError(f"protected column {pcol!r} is not a covariate column", 1)
    pidx = cov_names.index(pcol)

    groups: dict[tuple[str, str], dict] = {}
    order: list[str] = []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, found {len(row)}", lineno)
        sid, proc = row[0].strip(), row[1].strip()
        if proc not in PROCESSES:
            raise ParseError(f"process must be P or R, got {proc!r}", lineno)
        ev = row[4].strip()
        if ev not in ("0", "1"):
            raise ParseError(f"event must be 0 or 1, got {ev!r}", lineno)
        try:
            entry = parse_time(row[2], sidecar.epoch)
            exit_ = parse_time(row[3], sidecar.epoch)
            start = parse_time(row[5], sidecar.epoch)
        except ValueError as exc:
            raise ParseError(f"bad time value: {exc}", lineno) from None
        vals = []
        for j in cols[proc]:
            cell = row[6 + j].strip()
            if cell == "":
                raise ParseError(f"missing value for covariate {cov_names[j]!r}", lineno)
            try:
                vals.append(float(cell))
            except ValueError:
                raise ParseError(f"non-numeric covariate {cov_names[j]!r}: {cell!r}", lineno) from None
        key = (sid, proc)
        g = groups.get(key)
        if g is None:
            g = groups[key] = {"obs": (entry, exit_, ev == "1"), "segs": [], "line": lineno}
            if sid not in order:
                order.append(sid)
        elif g["obs"] != (entry, exit_, ev == "1"):
            raise ParseError(f"entry/exit/event differ from earlier rows of {sid}/{proc}", lineno)
        flag_cell = row[6 + pidx].strip()
        g["segs"].append((start, tuple(vals), lineno, flag_cell))

    subjects = []
    for sid in order:
        obs = {}
        trajs = {}
        flag = None
        for proc in PROCESSES:
            g = groups.get((sid, proc))
            if g is None:
                obs[proc] = trajs[proc] = None
                continue
            segs = sorted(g["segs"], key=lambda s: s[0])
            for a, b in zip(segs, segs[1:]):
                if a[0] == b[0]:
                    raise ParseError(f"duplicate segment_start for {sid}/{proc}", b[2])
            obs[proc] = ProcessObservation(*g["obs"])
            trajs[proc] = CovariateTrajectory(tuple(s[0] for s in segs), tuple(s[1] for s in segs))
            if flag is None and segs[0][3]:
                try:
                    flag = float(segs[0][3]) != 0.0
                except ValueError:
                    raise ParseError(f"non-numeric protected indicator {segs[0][3]!r}", segs[0][2]) from None
        subjects.append(SubjectRecord(sid, obs["P"], obs["R"], trajs["P"], trajs["R"], bool(flag)))
    return Dataset(tuple(subjects), names["P"], names["R"], pcol)


def read_csv(path, sidecar: Sidecar) -> Dataset:
    return loads_csv(Path(path).read_text(), sidecar)


def dumps_csv(dataset: Dataset) -> str:
    """Serialize to the segment-row CSV; covariate columns are the ordered union."""
    cov = list(dataset.promo_covariate_names)
    cov += [c for c in dataset.retire_covariate_names if c not in cov]
    pcol = dataset.protected_column
    if pcol is not None and pcol not in cov:
        cov.append(pcol)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_FIXED + cov)
    for s in dataset.subjects:
        for proc in PROCESSES:
            obs, traj = s.observation(proc), s.trajectory(proc)
            if obs is None:
                continue
            names = dataset.covariate_names(proc)
            for start, vals in zip(traj.starts, traj.values):
                cells = [""] * len(cov)
                for name, v in zip(names, vals):
                    cells[cov.index(name)] = format_time(v)
                if pcol is not None and pcol not in names:
                    cells[cov.index(pcol)] = "1" if s.protected_flag else "0"
                w.writerow([s.id, proc, format_time(obs.entry), format_time(obs.exit),
                            int(obs.event), format_time(start)] + cells)
    return buf.getvalue()


def write_csv(dataset: Dataset, path) -> None:
    Path(path).write_text(dumps_csv(dataset))


def sidecar_for(dataset: Dataset, window: RestrictionWindow | None = None) -> dict:
    """Sidecar dictionary that reproduces ``dataset``'s column split."""
    out = {
        "protected_column": dataset.protected_column,
        "promotion_covariates": list(dataset.promo_covariate_names),
        "retirement_covariates": list(dataset.retire_covariate_names),
    }
    if window is not None:
        out["window"] = [window.tau0, window.tau1]
    return out
