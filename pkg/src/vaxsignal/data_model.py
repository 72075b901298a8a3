"""Report parsing, exclusion rules, AE filtering, and stratified aggregation.

Two input formats are supported. The canonical format is a single CSV with
header ``report_id,received_date,vaccine_group,gender,age_years,ae_list``
where ``ae_list`` is a ``;``-separated list of adverse event names and dates
are ISO-8601. The raw adapter joins three CSV extracts keyed by ``VAERS_ID``
(a demographics file with ``RECVDATE,AGE_YRS,SEX``, a vaccine file with
``VAX_TYPE``, and a symptom file with ``SYMPTOM1..SYMPTOM5`` columns) and
emits the same report records; raw dates are ``MM/DD/YYYY``.

Downstream stages consume a :class:`StratumTable`: per-stratum exposure
counts ``n_s``, per-AE case counts ``y[j, s]``, a fixed design vector per
stratum, and a vaccine indicator. Strata are the cross of gender, age group,
and vaccine group actually present in the data, ordered lexicographically.
"""
from __future__ import annotations

import csv
import datetime as dt
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import gammaln

from .errors import DataError

log = logging.getLogger(__name__)

TARGET = "Target"
CONTROL = "Control"
GENDERS = ("Female", "Male", "Unknown")
AGE_GROUPS = ("A18_30", "A30_65", "A65plus")

# Reference levels Female and A18_30 are absorbed into the intercept.
DESIGN_COLUMNS = ("intercept", "gender_Male", "gender_Unknown",
                  "age_A30_65", "age_A65plus")


def assign_age_group(age_years: float) -> str:
    """Map an adult age in years onto [18,30), [30,65), [65,inf)."""
    if age_years < 18:
        raise ValueError(f"age {age_years} below the adult threshold")
    if age_years < 30:
        return "A18_30"
    if age_years < 65:
        return "A30_65"
    return "A65plus"


@dataclass(frozen=True)
class Report:
    report_id: str
    received_date: dt.date
    vaccine_group: str          # TARGET or CONTROL
    gender: str                 # one of GENDERS
    age_years: float | None
    ae_ids: frozenset[str]


@dataclass(frozen=True)
class FilterPolicy:
    """Row exclusions and AE retention thresholds.

    An AE is retained when it has at least ``min_total_cases`` reports
    overall, at least ``min_target_cases`` in the target group, and at
    least ``min_control_cases`` in the control group.
    """

    min_total_cases: int = 5
    min_target_cases: int = 1
    min_control_cases: int = 4
    min_age: float = 18.0
    window_start: dt.date = dt.date(2016, 9, 1)
    window_end: dt.date = dt.date(2022, 12, 31)
    target_earliest_date: dt.date = dt.date(2020, 3, 16)

    def __post_init__(self):
        if min(self.min_total_cases, self.min_target_cases,
               self.min_control_cases) < 0:
            raise ValueError("case thresholds must be non-negative")
        if self.window_start > self.window_end:
            raise ValueError("window_start is after window_end")


@dataclass
class ParseResult:
    reports: list[Report]
    rejects: list[tuple[str, str]]   # (report_id, reason)

    def reject_counts(self) -> dict[str, int]:
        return dict(Counter(reason for _, reason in self.rejects))


CANONICAL_HEADER = ["report_id", "received_date", "vaccine_group",
                    "gender", "age_years", "ae_list"]


def _parse_age(text: str) -> float | None:
    text = text.strip()
    if not text:
        return None
    return float(text)


def parse_canonical(stream) -> ParseResult:
    """Parse canonical-format reports from an open text stream.

    Malformed rows are reject-listed with a reason rather than aborting;
    a missing or wrong header is a hard :class:`DataError`. Duplicate
    report ids keep the first copy when the rows agree and reject the
    conflicting occurrence otherwise.
    """
    reader = csv.reader(stream)
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != CANONICAL_HEADER:
        raise DataError(
            f"canonical header must be {','.join(CANONICAL_HEADER)}")
    reports: dict[str, Report] = {}
    rejects: list[tuple[str, str]] = []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not f.strip() for f in row):
            continue
        if len(row) != len(CANONICAL_HEADER):
            rejects.append((row[0] if row else f"line {lineno}",
                            "malformed row"))
            continue
        rid, date_s, group, gender, age_s, ae_s = [f.strip() for f in row]
        if group not in (TARGET, CONTROL):
            rejects.append((rid, "unrecognized vaccine group"))
            continue
        if not gender:
            gender = "Unknown"
        if gender not in GENDERS:
            rejects.append((rid, "unrecognized gender"))
            continue
        try:
            date = dt.date.fromisoformat(date_s)
        except ValueError:
            rejects.append((rid, "unparseable date"))
            continue
        try:
            age = _parse_age(age_s)
        except ValueError:
            rejects.append((rid, "unparseable age"))
            continue
        aes = frozenset(t.strip() for t in ae_s.split(";") if t.strip())
        if not aes:
            rejects.append((rid, "no symptoms"))
            continue
        rec = Report(rid, date, group, gender, age, aes)
        if rid in reports:
            if reports[rid] != rec:
                rejects.append((rid, "conflicting duplicate report id"))
            continue
        reports[rid] = rec
    return ParseResult(list(reports.values()), rejects)


def _require_columns(fieldnames, required, label):
    missing = [c for c in required if c not in (fieldnames or [])]
    if missing:
        raise DataError(f"{label} file missing columns: {', '.join(missing)}")


def parse_raw_reports(data_stream, vax_stream, symptom_stream,
                      target_codes, control_codes) -> ParseResult:
    """Join raw surveillance extracts into report records.

    Parameters
    ----------
    data_stream, vax_stream, symptom_stream : open text streams
        Demographics (``VAERS_ID,RECVDATE,AGE_YRS,SEX``), vaccine codes
        (``VAERS_ID,VAX_TYPE``), and symptom terms (``VAERS_ID`` plus
        ``SYMPTOM<n>`` columns).
    target_codes, control_codes : iterable of str
        ``VAX_TYPE`` values defining the target and control groups. Codes
        outside both sets count as other vaccines: any target code mixed
        with a control or other code rejects the report, while control
        reports tolerate other non-target codes.
    """
    target_codes = frozenset(target_codes)
    control_codes = frozenset(control_codes)
    if target_codes & control_codes:
        raise DataError("target and control code sets overlap")

    data_reader = csv.DictReader(data_stream)
    _require_columns(data_reader.fieldnames,
                     ["VAERS_ID", "RECVDATE", "AGE_YRS", "SEX"], "data")
    demo: dict[str, tuple] = {}
    rejects: list[tuple[str, str]] = []
    conflicted: set[str] = set()
    for rowno, row in enumerate(data_reader, start=2):
        rid = (row["VAERS_ID"] or "").strip()
        if not rid:
            raise DataError(f"data file row {rowno}: missing join key VAERS_ID")
        key = (row["RECVDATE"].strip(), row["AGE_YRS"].strip(),
               row["SEX"].strip())
        if rid in demo and demo[rid] != key:
            conflicted.add(rid)
        demo.setdefault(rid, key)
    for rid in sorted(conflicted):
        del demo[rid]
        rejects.append((rid, "conflicting duplicate demographics"))

    vax_reader = csv.DictReader(vax_stream)
    _require_columns(vax_reader.fieldnames, ["VAERS_ID", "VAX_TYPE"], "vaccine")
    codes: dict[str, set[str]] = {}
    for rowno, row in enumerate(vax_reader, start=2):
        rid = (row["VAERS_ID"] or "").strip()
        if not rid:
            raise DataError(
                f"vaccine file row {rowno}: missing join key VAERS_ID")
        code = (row["VAX_TYPE"] or "").strip()
        if code:
            codes.setdefault(rid, set()).add(code)

    sym_reader = csv.DictReader(symptom_stream)
    if sym_reader.fieldnames is None:
        log.warning("symptom file is empty; no reports will be produced")
        sym_cols: list[str] = []
    else:
        _require_columns(sym_reader.fieldnames, ["VAERS_ID"], "symptom")
        sym_cols = [c for c in sym_reader.fieldnames
                    if re.fullmatch(r"SYMPTOM\d+", c)]
        if not sym_cols:
            raise DataError("symptom file has no SYMPTOM<n> columns")
    symptoms: dict[str, set[str]] = {}
    if sym_reader.fieldnames is not None:
        for rowno, row in enumerate(sym_reader, start=2):
            rid = (row["VAERS_ID"] or "").strip()
            if not rid:
                raise DataError(
                    f"symptom file row {rowno}: missing join key VAERS_ID")
            for col in sym_cols:
                term = (row.get(col) or "").strip()
                if term:
                    symptoms.setdefault(rid, set()).add(term)

    reports = []
    for rid, (date_s, age_s, sex_s) in demo.items():
        group_codes = codes.get(rid)
        if not group_codes:
            rejects.append((rid, "no vaccine records"))
            continue
        has_t = bool(group_codes & target_codes)
        has_c = bool(group_codes & control_codes)
        has_other = bool(group_codes - target_codes - control_codes)
        if has_t and (has_c or has_other):
            rejects.append((rid, "mixed vaccine groups"))
            continue
        if has_t:
            group = TARGET
        elif has_c:
            group = CONTROL
        else:
            rejects.append((rid, "no study-group vaccine codes"))
            continue
        terms = symptoms.get(rid)
        if not terms:
            rejects.append((rid, "no symptoms"))
            continue
        try:
            date = dt.datetime.strptime(date_s, "%m/%d/%Y").date()
        except ValueError:
            rejects.append((rid, "unparseable date"))
            continue
        try:
            age = _parse_age(age_s)
        except ValueError:
            rejects.append((rid, "unparseable age"))
            continue
        sex = {"F": "Female", "M": "Male", "U": "Unknown",
               "": "Unknown"}.get(sex_s.strip().upper())
        if sex is None:
            rejects.append((rid, "unrecognized gender"))
            continue
        reports.append(Report(rid, date, group, sex, age, frozenset(terms)))
    return ParseResult(reports, rejects)


EXCLUSION_REASONS = ("missing age", "under minimum age",
                     "outside study window", "target before earliest date")


def apply_exclusions(reports, policy: FilterPolicy):
    """Drop reports per the study window and age rules.

    Returns ``(kept, audit)`` where ``audit`` maps every reason in
    :data:`EXCLUSION_REASONS` to a count (zeros included). The first
    matching reason in that order is charged.
    """
    audit = {r: 0 for r in EXCLUSION_REASONS}
    kept = []
    for r in reports:
        if r.age_years is None:
            audit["missing age"] += 1
        elif r.age_years < policy.min_age:
            audit["under minimum age"] += 1
        elif not (policy.window_start <= r.received_date <= policy.window_end):
            audit["outside study window"] += 1
        elif (r.vaccine_group == TARGET
              and r.received_date < policy.target_earliest_date):
            audit["target before earliest date"] += 1
        else:
            kept.append(r)
    return kept, audit


def filter_aes(reports, policy: FilterPolicy) -> list[str]:
    """Return the lexicographically sorted list of retained AE names."""
    total: Counter = Counter()
    by_group = {TARGET: Counter(), CONTROL: Counter()}
    for r in reports:
        total.update(r.ae_ids)
        by_group[r.vaccine_group].update(r.ae_ids)
    kept = [ae for ae in total
            if total[ae] >= policy.min_total_cases
            and by_group[TARGET][ae] >= policy.min_target_cases
            and by_group[CONTROL][ae] >= policy.min_control_cases]
    if not kept:
        raise DataError("no adverse events survive the retention thresholds")
    return sorted(kept)


@dataclass(frozen=True)
class Stratum:
    gender: str | None
    age_group: str | None
    vaccine_group: str
    n: int                       # exposure: reports in this stratum

    @property
    def label(self) -> str:
        parts = [p for p in (self.gender, self.age_group) if p is not None]
        return "/".join(parts + [self.vaccine_group])

    def design_vector(self) -> np.ndarray:
        if self.gender is None:  # simulated single-covariate design
            return np.array([1.0])
        return np.array([1.0,
                         float(self.gender == "Male"),
                         float(self.gender == "Unknown"),
                         float(self.age_group == "A30_65"),
                         float(self.age_group == "A65plus")])


@dataclass(eq=False)
class StratumTable:
    """Aggregated counts ready for the likelihood.

    ``counts[j, s]`` is the number of stratum-``s`` reports mentioning AE
    ``ae_index[j]``; ``exposures[s]`` the number of reports in the stratum.
    ``design`` overrides the stratum-derived design matrix (it may have
    zero columns for an effect-only model); it is not persisted by
    :func:`save_table`.
    """

    strata: list[Stratum]
    ae_index: list[str]
    counts: np.ndarray           # (J, S) int64
    design: np.ndarray | None = None

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.design is not None:
            self.design = np.asarray(self.design, dtype=float)
        self.validate()

    def validate(self):
        j, s = self.counts.shape
        if j != len(self.ae_index) or s != len(self.strata):
            raise DataError("counts shape disagrees with index lengths")
        n = self.exposures
        if np.any(self.counts < 0) or np.any(self.counts > n[None, :]):
            raise DataError("counts must satisfy 0 <= y <= n per stratum")
        if np.any(n < 0):
            raise DataError("exposures must be non-negative")
        if self.design is not None and self.design.shape[0] != s:
            raise DataError("design override must have one row per stratum")

    @property
    def n_aes(self) -> int:
        return len(self.ae_index)

    @property
    def n_strata(self) -> int:
        return len(self.strata)

    @property
    def n_covariates(self) -> int:
        return self.design_matrix.shape[1]

    @property
    def exposures(self) -> np.ndarray:
        return np.array([s.n for s in self.strata], dtype=np.int64)

    @property
    def design_matrix(self) -> np.ndarray:
        if self.design is not None:
            return self.design
        if not self.strata:
            return np.zeros((0, 0))
        return np.stack([s.design_vector() for s in self.strata])

    @property
    def vaccine_indicator(self) -> np.ndarray:
        return np.array([float(s.vaccine_group == TARGET)
                         for s in self.strata])

    @property
    def log_binom_coeff(self) -> np.ndarray:
        # log C(n, y) per cell; cached because gammaln is the cost.
        if not hasattr(self, "_lbc"):
            n = self.exposures[None, :].astype(float)
            y = self.counts.astype(float)
            self._lbc = gammaln(n + 1) - gammaln(y + 1) - gammaln(n - y + 1)
        return self._lbc

    def __eq__(self, other):
        if not isinstance(other, StratumTable):
            return NotImplemented
        same_design = (self.design is None) == (other.design is None) and \
            (self.design is None or np.array_equal(self.design, other.design))
        return (self.strata == other.strata
                and self.ae_index == other.ae_index
                and np.array_equal(self.counts, other.counts)
                and same_design)


def aggregate(reports, retained_aes) -> StratumTable:
    """Aggregate reports into a :class:`StratumTable`.

    Strata are keyed by (gender, age group, vaccine group); combinations
    with no reports are omitted. The result is invariant to the order of
    ``reports``.
    """
    retained = list(retained_aes)
    ae_pos = {ae: i for i, ae in enumerate(retained)}
    groups: dict[tuple, list[Report]] = {}
    for r in reports:
        if r.age_years is None:
            raise DataError(
                f"report {r.report_id} has no age; apply exclusions first")
        key = (r.gender, assign_age_group(r.age_years), r.vaccine_group)
        groups.setdefault(key, []).append(r)
    keys = sorted(groups)
    counts = np.zeros((len(retained), len(keys)), dtype=np.int64)
    strata = []
    for s, key in enumerate(keys):
        members = groups[key]
        strata.append(Stratum(key[0], key[1], key[2], len(members)))
        for r in members:
            for ae in r.ae_ids:
                j = ae_pos.get(ae)
                if j is not None:
                    counts[j, s] += 1
    return StratumTable(strata, retained, counts)


# ---------------------------------------------------------------------------
# Ontology groups and negative-control lists

@dataclass
class AeDictionary:
    """Per-AE metadata: ontology group membership and NC status."""

    ae_index: list[str]
    soc_names: list[str]                    # sorted registry
    memberships: dict[str, frozenset[str]]  # AE name -> SOC names
    nc_ids: frozenset[str]                  # subset of ae_index

    def soc_members(self, soc: str) -> list[str]:
        return [ae for ae in self.ae_index if soc in self.memberships[ae]]


def load_soc_map(stream) -> dict[str, frozenset[str]]:
    """Read an ``ae_name,soc_name`` CSV into AE -> set-of-SOC memberships.

    Duplicate rows are idempotent; a row without both fields is a
    :class:`DataError` naming the line.
    """
    reader = csv.reader(stream)
    header = next(reader, None)
    if header is None or [h.strip() for h in header][:2] != ["ae_name",
                                                             "soc_name"]:
        raise DataError("SOC map header must be ae_name,soc_name")
    memb: dict[str, set[str]] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not f.strip() for f in row):
            continue
        if len(row) < 2 or not row[0].strip() or not row[1].strip():
            raise DataError(f"SOC map line {lineno}: need ae_name and soc_name")
        memb.setdefault(row[0].strip(), set()).add(row[1].strip())
    return {ae: frozenset(socs) for ae, socs in memb.items()}


def load_nc_list(stream) -> list[str]:
    """One negative-control AE name per line; blanks skipped."""
    names = [line.strip() for line in stream]
    return [n for n in names if n]


def build_ae_dictionary(ae_index, soc_map, nc_names) -> AeDictionary:
    """Attach SOC memberships and NC flags to the modeled AE list.

    AEs absent from the SOC map get an empty membership set, and NC names
    not in the modeled list are dropped; both are logged as warnings.
    """
    ae_index = list(ae_index)
    modeled = set(ae_index)
    memberships = {}
    unmapped = 0
    for ae in ae_index:
        memberships[ae] = soc_map.get(ae, frozenset())
        if not memberships[ae]:
            unmapped += 1
    if unmapped:
        log.warning("%d of %d modeled AEs have no SOC mapping",
                    unmapped, len(ae_index))
    nc_in = [n for n in nc_names if n in modeled]
    missing = sorted(set(nc_names) - modeled)
    if missing:
        log.warning("%d negative controls are not modeled AEs: %s",
                    len(missing), ", ".join(missing[:5]))
    socs = sorted({s for m in memberships.values() for s in m})
    return AeDictionary(ae_index, socs, memberships, frozenset(nc_in))


def save_dictionary(d: AeDictionary, path) -> Path:
    """ae_dictionary.csv: ae_id, is_nc flag, ;-joined SOC memberships."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ae_id", "is_nc", "soc_list"])
        for ae in d.ae_index:
            w.writerow([ae, int(ae in d.nc_ids),
                        ";".join(sorted(d.memberships[ae]))])
    return path


def load_dictionary(path) -> AeDictionary:
    ae_index, nc, memb = [], [], {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            ae = row["ae_id"]
            ae_index.append(ae)
            if int(row["is_nc"]):
                nc.append(ae)
            memb[ae] = frozenset(s for s in row["soc_list"].split(";") if s)
    socs = sorted({s for m in memb.values() for s in m})
    return AeDictionary(ae_index, socs, memb, frozenset(nc))


# ---------------------------------------------------------------------------
# Table persistence (run-directory artifacts)

def save_table(table: StratumTable, directory) -> list[Path]:
    """Write strata.csv, ae_index.csv, counts.csv under ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    p = directory / "strata.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stratum", "gender", "age_group", "vaccine_group", "n"])
        for i, s in enumerate(table.strata):
            w.writerow([i, s.gender or "", s.age_group or "",
                        s.vaccine_group, s.n])
    paths.append(p)
    p = directory / "ae_index.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "ae_id"])
        for i, ae in enumerate(table.ae_index):
            w.writerow([i, ae])
    paths.append(p)
    p = directory / "counts.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ae_id", "stratum", "count"])
        for j, ae in enumerate(table.ae_index):
            for s in range(table.n_strata):
                w.writerow([ae, s, int(table.counts[j, s])])
    paths.append(p)
    return paths


def load_table(directory) -> StratumTable:
    directory = Path(directory)
    strata = []
    with open(directory / "strata.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            strata.append(Stratum(row["gender"] or None,
                                  row["age_group"] or None,
                                  row["vaccine_group"], int(row["n"])))
    with open(directory / "ae_index.csv", newline="") as fh:
        ae_index = [row["ae_id"] for row in csv.DictReader(fh)]
    counts = np.zeros((len(ae_index), len(strata)), dtype=np.int64)
    ae_pos = {ae: i for i, ae in enumerate(ae_index)}
    with open(directory / "counts.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            counts[ae_pos[row["ae_id"]], int(row["stratum"])] = int(row["count"])
    return StratumTable(strata, ae_index, counts)
