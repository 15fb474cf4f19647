"""Study data containers, validation, and the long/wide CSV transforms.

A subject carries a sequence of error-prone binary reports on a common visit
grid, one optional gold-standard status observed at a single visit, covariates,
and survey design labels. Gold-standard missingness is encoded by an absent
``gs_status`` (None), never by a sentinel value. Missed report visits are gaps
in ``aux_visit_indices``; downstream likelihood code handles gaps natively.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, replace

from .errors import DataError

__all__ = [
    "VisitSchedule",
    "MisclassSpec",
    "SubjectRecord",
    "Dataset",
    "Violation",
    "validate",
    "truncate_after_first_positive",
    "truncate_dataset",
    "read_long_csv",
    "write_long_csv",
    "read_wide_csv",
    "write_wide_csv",
    "DEFAULT_LONG_COLUMNS",
]


@dataclass(frozen=True)
class VisitSchedule:
    """Common assessment grid: boundaries tau_0 < tau_1 < ... < tau_J, tau_0 = 0.

    Interval j is (tau_{j-1}, tau_j] for j = 1..J; interval J+1 is (tau_J, inf).
    """

    boundaries: tuple[float, ...]

    def __post_init__(self):
        bounds = tuple(float(b) for b in self.boundaries)
        object.__setattr__(self, "boundaries", bounds)
        if len(bounds) < 2:
            raise ValueError("schedule needs at least tau_0 and tau_1 (J >= 1)")
        if bounds[0] != 0.0:
            raise ValueError(f"tau_0 must be 0, got {bounds[0]}")
        if any(b1 >= b2 for b1, b2 in zip(bounds, bounds[1:])):
            raise ValueError("schedule boundaries must be strictly increasing")

    @property
    def n_visits(self) -> int:
        """J, the number of post-baseline assessment times."""
        return len(self.boundaries) - 1

    @property
    def n_intervals(self) -> int:
        """J + 1, counting the open-ended final interval."""
        return len(self.boundaries)

    @classmethod
    def annual(cls, n_visits: int) -> "VisitSchedule":
        """Unit-spaced grid 0, 1, ..., n_visits."""
        return cls(tuple(float(k) for k in range(n_visits + 1)))


@dataclass(frozen=True)
class MisclassSpec:
    """Known sensitivity/specificity of the auxiliary report."""

    sensitivity: float
    specificity: float

    def __post_init__(self):
        se, sp = float(self.sensitivity), float(self.specificity)
        object.__setattr__(self, "sensitivity", se)
        object.__setattr__(self, "specificity", sp)
        if not (0.0 < se <= 1.0):
            raise ValueError(f"sensitivity must be in (0, 1], got {se}")
        if not (0.0 < sp <= 1.0):
            raise ValueError(f"specificity must be in (0, 1], got {sp}")
        if se + sp <= 1.0:
            warnings.warn(
                f"Se + Sp = {se + sp:g} <= 1: auxiliary reports are uninformative "
                "or anti-informative",
                UserWarning,
                stacklevel=2,
            )


@dataclass(frozen=True)
class SubjectRecord:
    """One subject's observed data on the common grid.

    aux_results[l] is the l-th binary report, made at visit
    aux_visit_indices[l] (1-based index into the schedule). gs_status None
    means the gold standard was never observed for this subject.
    """

    id: object
    aux_results: tuple[int, ...]
    aux_visit_indices: tuple[int, ...]
    gs_visit_index: int
    gs_status: int | None
    covariates: tuple[float, ...]
    weight: float = 1.0
    stratum_id: object = None
    cluster_id: object = None

    def __post_init__(self):
        object.__setattr__(self, "aux_results", tuple(int(r) for r in self.aux_results))
        object.__setattr__(
            self, "aux_visit_indices", tuple(int(k) for k in self.aux_visit_indices)
        )
        object.__setattr__(self, "covariates", tuple(float(x) for x in self.covariates))
        object.__setattr__(self, "weight", float(self.weight))

    @property
    def n_reports(self) -> int:
        return len(self.aux_results)

    @property
    def gs_missing(self) -> bool:
        return self.gs_status is None


@dataclass(frozen=True)
class Dataset:
    """Schedule + subjects + the known misclassification rates of the reports."""

    schedule: VisitSchedule
    subjects: tuple[SubjectRecord, ...]
    misclass: MisclassSpec

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def n_covariates(self) -> int:
        return len(self.subjects[0].covariates) if self.subjects else 0


@dataclass(frozen=True)
class Violation:
    """One validation failure; subject_id is None for dataset-level problems."""

    subject_id: object
    field: str
    message: str

    def __str__(self) -> str:
        who = "dataset" if self.subject_id is None else f"subject {self.subject_id!r}"
        return f"{who}: {self.field}: {self.message}"


def validate(dataset: Dataset) -> list[Violation]:
    """Collect every invariant violation; empty list iff the dataset is usable."""
    out: list[Violation] = []
    j_max = dataset.schedule.n_visits
    seen_ids: set = set()
    cluster_stratum: dict = {}
    p = None
    any_information = False

    for subj in dataset.subjects:
        sid = subj.id
        if sid in seen_ids:
            out.append(Violation(sid, "id", "duplicate subject id"))
        seen_ids.add(sid)

        if len(subj.aux_results) != len(subj.aux_visit_indices):
            out.append(
                Violation(sid, "aux_results", "misaligned report/visit-index lengths")
            )
        if any(r not in (0, 1) for r in subj.aux_results):
            out.append(Violation(sid, "aux_results", "non-binary report value"))
        idx = subj.aux_visit_indices
        if any(k2 <= k1 for k1, k2 in zip(idx, idx[1:])):
            out.append(Violation(sid, "aux_visit_indices", "non-increasing visit indices"))
        if any(not (1 <= k <= j_max) for k in idx):
            out.append(
                Violation(sid, "aux_visit_indices", f"visit index outside 1..{j_max}")
            )
        if not (1 <= subj.gs_visit_index <= j_max):
            out.append(
                Violation(sid, "gs_visit_index", f"gold-standard visit outside 1..{j_max}")
            )
        if subj.gs_status not in (0, 1, None):
            out.append(Violation(sid, "gs_status", "gold-standard status not 0/1/missing"))
        if not math.isfinite(subj.weight):
            out.append(Violation(sid, "weight", "non-finite weight"))
        elif subj.weight <= 0:
            out.append(Violation(sid, "weight", "non-positive weight"))
        if any(not math.isfinite(x) for x in subj.covariates):
            out.append(Violation(sid, "covariates", "non-finite covariate value"))
        if p is None:
            p = len(subj.covariates)
        elif len(subj.covariates) != p:
            out.append(
                Violation(sid, "covariates", f"covariate length {len(subj.covariates)} != {p}")
            )
        if subj.gs_status is not None or subj.aux_results:
            any_information = True
        if subj.cluster_id is not None:
            prev = cluster_stratum.setdefault(subj.cluster_id, subj.stratum_id)
            if prev != subj.stratum_id:
                out.append(
                    Violation(sid, "cluster_id", "cluster appears in more than one stratum")
                )

    if dataset.subjects and not any_information:
        out.append(
            Violation(None, "subjects", "no subject has a gold standard or any report")
        )
    return out


def truncate_after_first_positive(
    aux_results, aux_visit_indices
) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Keep the prefix through the first positive report (reporting stops there).

    Idempotent; sequences without a positive are returned unchanged.
    """
    results = tuple(int(r) for r in aux_results)
    indices = tuple(int(k) for k in aux_visit_indices)
    if len(results) != len(indices):
        raise DataError(
            f"misaligned report/visit-index lengths ({len(results)} vs {len(indices)})"
        )
    for pos, r in enumerate(results):
        if r == 1:
            return results[: pos + 1], indices[: pos + 1]
    return results, indices


def truncate_dataset(dataset: Dataset) -> Dataset:
    """Apply truncate_after_first_positive to every subject."""
    subjects = []
    for subj in dataset.subjects:
        res, idx = truncate_after_first_positive(subj.aux_results, subj.aux_visit_indices)
        if res != subj.aux_results:
            subj = replace(subj, aux_results=res, aux_visit_indices=idx)
        subjects.append(subj)
    return replace(dataset, subjects=tuple(subjects))


# --- CSV transforms ---------------------------------------------------------

DEFAULT_LONG_COLUMNS = {
    "id": "id",
    "time": "time_index",
    "result": "result",
    "gs_visit": "gs_visit",
    "gs_status": "gs_status",
    "weight": "weight",
    "stratum": "stratum",
    "cluster": "cluster",
}

_MAP_KEYS = set(DEFAULT_LONG_COLUMNS) | {"covariates"}


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_label(text: str):
    """CSV cell -> id/stratum/cluster label; integers round-trip as int."""
    if text == "":
        return None
    try:
        return int(text)
    except ValueError:
        return text


def _resolve_map(column_map) -> dict:
    cmap = dict(DEFAULT_LONG_COLUMNS)
    cmap["covariates"] = None
    if column_map:
        unknown = set(column_map) - _MAP_KEYS
        if unknown:
            raise DataError(f"unknown column_map keys: {sorted(unknown)}")
        cmap.update(column_map)
    return cmap


def _covariate_columns(header, cmap, known):
    if cmap["covariates"] is not None:
        missing = [c for c in cmap["covariates"] if c not in header]
        if missing:
            raise DataError(f"missing covariate columns: {missing}")
        return list(cmap["covariates"])
    return [c for c in header if c not in known]


def read_long_csv(path, column_map=None, misclass: MisclassSpec | None = None) -> Dataset:
    """Read the long layout: one row per (subject, visit).

    Subject-level columns are repeated on every row and must agree. A subject
    with no reports is a single row with empty time/result cells. The schedule
    is reconstructed as the annual grid 0..J with J = max visit index seen
    (pre-gridded integer indices are required). Se/Sp are not part of the CSV;
    pass them via `misclass` (defaults to a perfect-report spec).
    """
    cmap = _resolve_map(column_map)
    errors: list[str] = []
    order: list = []
    per_subject: dict = {}

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        required = [cmap[k] for k in ("id", "time", "result", "gs_visit", "gs_status")]
        missing = [c for c in required if c not in header]
        if missing:
            raise DataError(f"missing required columns: {missing}")
        known = {cmap[k] for k in DEFAULT_LONG_COLUMNS}
        cov_cols = _covariate_columns(header, cmap, known)
        have_weight = cmap["weight"] in header
        have_stratum = cmap["stratum"] in header
        have_cluster = cmap["cluster"] in header

        for rownum, row in enumerate(reader, start=2):
            try:
                sid = _parse_label(row[cmap["id"]])
                if sid is None:
                    raise ValueError("empty id")
                level = {
                    "gs_visit": int(row[cmap["gs_visit"]]),
                    "gs_status": (
                        None
                        if row[cmap["gs_status"]] == ""
                        else int(row[cmap["gs_status"]])
                    ),
                    "weight": float(row[cmap["weight"]]) if have_weight else 1.0,
                    "stratum": _parse_label(row[cmap["stratum"]]) if have_stratum else None,
                    "cluster": _parse_label(row[cmap["cluster"]]) if have_cluster else None,
                    "covariates": tuple(float(row[c]) for c in cov_cols),
                }
                t_cell, r_cell = row[cmap["time"]], row[cmap["result"]]
                visit = None
                if t_cell != "" or r_cell != "":
                    result = int(r_cell)
                    if result not in (0, 1):
                        raise ValueError(f"non-binary result {result}")
                    visit = (int(t_cell), result)
            except (ValueError, TypeError) as exc:
                errors.append(f"row {rownum}: {exc}")
                continue

            if sid not in per_subject:
                order.append(sid)
                per_subject[sid] = {"level": level, "visits": [], "first_row": rownum}
            else:
                if per_subject[sid]["level"] != level:
                    errors.append(
                        f"row {rownum}: subject-level fields differ from "
                        f"row {per_subject[sid]['first_row']} for id {sid!r}"
                    )
                    continue
            if visit is not None:
                per_subject[sid]["visits"].append((rownum, visit))

    subjects = []
    j_max = 1
    for sid in order:
        info = per_subject[sid]
        visits = sorted(info["visits"], key=lambda rv: rv[1][0])
        seen = set()
        for rownum, (t, _r) in visits:
            if t in seen:
                errors.append(f"row {rownum}: duplicate visit index {t} for id {sid!r}")
            seen.add(t)
        idx = tuple(t for _rn, (t, _r) in visits)
        res = tuple(r for _rn, (_t, r) in visits)
        lvl = info["level"]
        j_max = max(j_max, lvl["gs_visit"], max(idx, default=1))
        subjects.append(
            SubjectRecord(
                id=sid,
                aux_results=res,
                aux_visit_indices=idx,
                gs_visit_index=lvl["gs_visit"],
                gs_status=lvl["gs_status"],
                covariates=lvl["covariates"],
                weight=lvl["weight"],
                stratum_id=lvl["stratum"],
                cluster_id=lvl["cluster"],
            )
        )

    if errors:
        shown = "\n".join(errors[:20])
        if len(errors) > 20:
            shown += f"\n... and {len(errors) - 20} more"
        raise DataError(f"{path}:\n{shown}")

    return Dataset(
        schedule=VisitSchedule.annual(j_max),
        subjects=tuple(subjects),
        misclass=misclass if misclass is not None else MisclassSpec(1.0, 1.0),
    )


def write_long_csv(dataset: Dataset, path) -> None:
    """Write the long layout read back by read_long_csv (bit-exact round trip)."""
    p = dataset.n_covariates
    cov_names = [f"x{k + 1}" for k in range(p)]
    header = [
        "id", "time_index", "result", "gs_visit", "gs_status",
        "weight", "stratum", "cluster", *cov_names,
    ]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for subj in dataset.subjects:
            level = [
                _fmt(subj.id),
                "", "",
                _fmt(subj.gs_visit_index),
                _fmt(subj.gs_status),
                _fmt(subj.weight),
                _fmt(subj.stratum_id),
                _fmt(subj.cluster_id),
                *[_fmt(x) for x in subj.covariates],
            ]
            if not subj.aux_results:
                writer.writerow(level)
                continue
            for t, r in zip(subj.aux_visit_indices, subj.aux_results):
                row = list(level)
                row[1] = _fmt(t)
                row[2] = _fmt(r)
                writer.writerow(row)


def write_wide_csv(dataset: Dataset, path) -> None:
    """Write one row per subject with result_1..result_J columns (gaps empty)."""
    j_max = dataset.schedule.n_visits
    p = dataset.n_covariates
    header = [
        "id",
        *[f"result_{k}" for k in range(1, j_max + 1)],
        "gs_visit", "gs_status", "weight", "stratum", "cluster",
        *[f"x{k + 1}" for k in range(p)],
    ]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for subj in dataset.subjects:
            cells = {k: r for k, r in zip(subj.aux_visit_indices, subj.aux_results)}
            writer.writerow(
                [
                    _fmt(subj.id),
                    *[_fmt(cells.get(k)) for k in range(1, j_max + 1)],
                    _fmt(subj.gs_visit_index),
                    _fmt(subj.gs_status),
                    _fmt(subj.weight),
                    _fmt(subj.stratum_id),
                    _fmt(subj.cluster_id),
                    *[_fmt(x) for x in subj.covariates],
                ]
            )


def read_wide_csv(path, misclass: MisclassSpec | None = None) -> Dataset:
    """Read the wide layout written by write_wide_csv."""
    subjects = []
    j_max = 1
    errors: list[str] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        result_cols = sorted(
            (c for c in header if c.startswith("result_")),
            key=lambda c: int(c.split("_", 1)[1]),
        )
        if not result_cols or "id" not in header or "gs_visit" not in header:
            raise DataError(f"{path}: not a wide-layout file (need id/result_k/gs_visit)")
        cov_cols = [c for c in header if c.startswith("x") and c[1:].isdigit()]
        cov_cols.sort(key=lambda c: int(c[1:]))
        for rownum, row in enumerate(reader, start=2):
            try:
                idx, res = [], []
                for col in result_cols:
                    if row[col] != "":
                        idx.append(int(col.split("_", 1)[1]))
                        res.append(int(row[col]))
                gs_visit = int(row["gs_visit"])
                j_max = max(j_max, gs_visit, max(idx, default=1))
                subjects.append(
                    SubjectRecord(
                        id=_parse_label(row["id"]),
                        aux_results=tuple(res),
                        aux_visit_indices=tuple(idx),
                        gs_visit_index=gs_visit,
                        gs_status=None if row.get("gs_status", "") == "" else int(row["gs_status"]),
                        covariates=tuple(float(row[c]) for c in cov_cols),
                        weight=float(row["weight"]) if row.get("weight") else 1.0,
                        stratum_id=_parse_label(row.get("stratum", "")),
                        cluster_id=_parse_label(row.get("cluster", "")),
                    )
                )
            except (ValueError, TypeError) as exc:
                errors.append(f"row {rownum}: {exc}")
    if errors:
        raise DataError(f"{path}:\n" + "\n".join(errors[:20]))
    j_max = max(j_max, int(result_cols[-1].split("_", 1)[1]))
    return Dataset(
        schedule=VisitSchedule.annual(j_max),
        subjects=tuple(subjects),
        misclass=misclass if misclass is not None else MisclassSpec(1.0, 1.0),
    )
