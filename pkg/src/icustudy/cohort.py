"""Cohort extraction: flat-file ingestion, linear-time sorted joins, the
extract/intersect/filter pipeline with attrition accounting, and
treatment-naive detection by lexicon search over discharge summaries.

Extract files are headered CSVs keyed by one identifier component.  The
pipeline works over in-memory records carrying an attribute dict; every
step reports survivors plus percentages of the original set and of the
previous step.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .errors import (
    DataError,
    PredicateFailure,
    UnknownSetReference,
    UnsortedInput,
)
from .group import PatientKey

# Diuretic generic and brand names used for the naive check; lowercase,
# matched on word boundaries.
DEFAULT_DIURETIC_LEXICON = frozenset(
    {
        "acetazolamide", "diamox",
        "dichlorphenamide", "daranide",
        "methazolamide", "glauctabs", "mzm", "neptazane",
        "torsemide", "demadex",
        "furosemide", "lasix",
        "spironolactone", "pironolactone", "aldactone",
        "amiloride", "midamor",
        "triamterene", "dyrenium",
        "hydrochlorothiazide", "hctz", "hydrodiuril", "aquazide h", "esidrix", "microzide",
        "metolazone", "mykrox", "zaroxolyn",
        "methyclothiazide", "enduron", "aquatensen",
        "chlorothiazide", "diuril",
        "indapamide", "lozol",
        "bendroflumethiazide", "naturetin",
        "polythiazide", "renese",
        "hydroflumethiazide", "saluron",
        "chlorthalidone", "thalitone",
    }
)

#: summary sections describing the pre-admission drug history
DEFAULT_PREADMISSION_HEADINGS = (
    "DRUGS ON ADMISSION",
    "MEDICATIONS ON ADMISSION",
    "ON ADMISSION",
)

# a heading-like line: run of capitals/digits/spaces followed by a colon
_HEADING_RE = re.compile(r"^[ \t]*[A-Z][A-Z0-9 /\-]{2,}:", re.MULTILINE)


@dataclass(frozen=True)
class DrugLexicon:
    entries: frozenset

    def __post_init__(self):
        if not self.entries:
            raise DataError("drug lexicon must not be empty")
        for entry in self.entries:
            if entry != entry.strip() or entry != entry.lower():
                raise DataError(f"lexicon entries must be trimmed lowercase: {entry!r}")

    @staticmethod
    def default() -> "DrugLexicon":
        return DrugLexicon(DEFAULT_DIURETIC_LEXICON)


def _mentions_drug(text: str, lexicon: DrugLexicon) -> bool:
    lowered = text.lower()
    for entry in lexicon.entries:
        for m in re.finditer(re.escape(entry), lowered):
            before = lowered[m.start() - 1] if m.start() > 0 else " "
            after = lowered[m.end()] if m.end() < len(lowered) else " "
            if not before.isalnum() and not after.isalnum():
                return True
    return False


def detect_naive(
    summary: str,
    lexicon: DrugLexicon | None = None,
    headings: Sequence[str] | None = None,
) -> bool:
    """True when no lexicon drug is mentioned in the pre-admission context.

    The configured headings locate pre-admission sections; each section
    runs to the next heading-like line or the end of the document.  When no
    heading matches, the whole document is searched (conservative).
    Matching is case-insensitive on word boundaries, so "lasixol" does not
    count as "lasix".
    """
    if not summary:
        return True
    lexicon = lexicon or DrugLexicon.default()
    headings = tuple(headings) if headings is not None else DEFAULT_PREADMISSION_HEADINGS

    upper = summary.upper()
    sections = []
    for heading in headings:
        start = 0
        while True:
            pos = upper.find(heading.upper(), start)
            if pos < 0:
                break
            body_start = pos + len(heading)
            nxt = _HEADING_RE.search(summary, body_start)
            body_end = nxt.start() if nxt else len(summary)
            sections.append(summary[body_start:body_end])
            start = body_start
    if not sections:
        return not _mentions_drug(summary, lexicon)
    return not any(_mentions_drug(section, lexicon) for section in sections)


# --- sorted merge join --------------------------------------------------------

MISSING = None

_COMPONENTS = ("subject_id", "hadm_id", "icustay_id")


@dataclass
class JoinResult:
    groups: list  # (PatientKey, list-of-payloads or None)
    cursor_advances: int


def sorted_merge_join(
    ids: Sequence[PatientKey],
    values: Sequence[tuple],
    component: str = "icustay_id",
) -> JoinResult:
    """Join sorted id triples against sorted (key, payload) rows.

    Both inputs must be ascending in the chosen component; duplicates are
    legal on either side and every input row is read at most once, so the
    cursor-advance total never exceeds len(ids) + len(values).  Ids without
    a match are emitted with a None payload group.
    """
    if component not in _COMPONENTS:
        raise DataError(f"unknown join component {component!r}")
    key_of: Callable[[PatientKey], int] = lambda k: getattr(k, component)

    groups: list = []
    advances = 0
    vi = 0
    n_values = len(values)
    current_key: int | None = None
    current_group: list | None = None
    prev_value_key: int | None = None
    prev_id_key: int | None = None

    for index, pid in enumerate(ids):
        ik = key_of(pid)
        advances += 1
        if prev_id_key is not None and ik < prev_id_key:
            raise UnsortedInput("ids", index)
        prev_id_key = ik
        if current_key is not None and ik == current_key:
            groups.append((pid, list(current_group)))
            continue
        # advance the value cursor to the first row with key >= ik
        while vi < n_values:
            vk, payload = values[vi]
            if prev_value_key is not None and vk < prev_value_key:
                raise UnsortedInput("values", vi)
            if vk >= ik:
                break
            prev_value_key = vk
            vi += 1
            advances += 1
        # collect all rows equal to ik
        collected = []
        while vi < n_values:
            vk, payload = values[vi]
            if prev_value_key is not None and vk < prev_value_key:
                raise UnsortedInput("values", vi)
            if vk != ik:
                break
            collected.append(payload)
            prev_value_key = vk
            vi += 1
            advances += 1
        if collected:
            current_key, current_group = ik, collected
            groups.append((pid, list(collected)))
        else:
            current_key, current_group = None, None
            groups.append((pid, MISSING))
    return JoinResult(groups=groups, cursor_advances=advances)


# --- records and the filter pipeline -------------------------------------------


@dataclass
class Record:
    subject_id: int | None
    hadm_id: int | None
    icustay_id: int | None
    attrs: dict = field(default_factory=dict)

    @property
    def ident(self) -> tuple:
        return (self.subject_id, self.hadm_id, self.icustay_id)

    def key(self) -> PatientKey:
        return PatientKey(self.subject_id, self.hadm_id, self.icustay_id)

    def need(self, predicate: str, name: str):
        if name not in self.attrs or self.attrs[name] is None:
            raise PredicateFailure(predicate, self.ident, name)
        return self.attrs[name]


@dataclass(frozen=True)
class FilterStep:
    index: int
    kind: str  # "extract" | "intersect" | "filter"
    label: str
    predicate: str | None = None  # extract/filter steps
    operands: tuple = ()  # intersect steps: two prior labels
    args: tuple = ()

    def __post_init__(self):
        if self.kind not in ("extract", "intersect", "filter"):
            raise DataError(f"unknown step kind {self.kind!r}")
        if self.kind == "intersect" and len(self.operands) != 2:
            raise DataError("intersect step needs exactly two operand labels")
        if self.kind != "intersect" and not self.predicate:
            raise DataError(f"{self.kind} step needs a predicate name")


@dataclass
class StepTrace:
    index: int
    kind: str
    label: str
    surviving_count: int
    pct_of_original: float
    pct_of_previous: float


@dataclass
class FilterTrace:
    original_count: int
    steps: list


# predicate registry: name -> callable(record, *args) -> bool


def _p_has_all_ids(r: Record) -> bool:
    return all(v is not None and v > 0 for v in r.ident)


def _p_single_admission(r: Record) -> bool:
    return r.need("single_admission", "n_admissions") == 1


def _p_full_day_data(r: Record) -> bool:
    span = r.attrs.get("max_offset_hours")
    return span is not None and span >= 24.0


def _p_age_at_least(r: Record, years: str = "18") -> bool:
    return r.need("age_at_least", "age") >= float(years)


def _p_sepsis(r: Record) -> bool:
    return bool(r.attrs.get("sepsis"))


def _p_not_cmo(r: Record) -> bool:
    return not r.attrs.get("cmo")


def _p_has_summary(r: Record) -> bool:
    return bool(r.attrs.get("summary"))


def _p_naive(r: Record) -> bool:
    naive = r.attrs.get("naive")
    return True if naive is None else bool(naive)


def _p_has_mandatory(r: Record) -> bool:
    missing = r.attrs.get("missing_mandatory")
    return not missing


def _p_always_true(r: Record) -> bool:
    return True


PREDICATES: dict = {
    "has_all_ids": _p_has_all_ids,
    "single_admission": _p_single_admission,
    "full_day_data": _p_full_day_data,
    "age_at_least": _p_age_at_least,
    "sepsis": _p_sepsis,
    "not_cmo": _p_not_cmo,
    "has_summary": _p_has_summary,
    "naive": _p_naive,
    "has_mandatory": _p_has_mandatory,
    "always_true": _p_always_true,
}


def parse_pipeline(text: str) -> list:
    """Parse a pipeline file: `index,kind,label,spec` per line.

    `spec` is a predicate name (plus optional space-separated arguments)
    for extract/filter steps, or two operand labels for intersect steps.
    Blank lines and lines starting with # are skipped.
    """
    steps = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 4:
            raise DataError(f"bad pipeline line: {raw!r}")
        index, kind, label, spec = int(parts[0]), parts[1].lower(), parts[2], parts[3]
        if kind == "intersect":
            operands = tuple(spec.split())
            steps.append(FilterStep(index, kind, label, operands=operands))
        else:
            tokens = spec.split()
            steps.append(
                FilterStep(index, kind, label, predicate=tokens[0], args=tuple(tokens[1:]))
            )
    if [s.index for s in steps] != list(range(1, len(steps) + 1)):
        raise DataError("pipeline step indices must be contiguous from 1")
    return steps


def run_filter_pipeline(base: Sequence[Record], steps: Sequence[FilterStep]):
    """Run the extract/intersect/filter pipeline over the base record set.

    Returns (final records, FilterTrace).  Extract steps evaluate their
    predicate over the base set; intersect steps combine two prior results
    preserving first-operand order; filter steps narrow the previous
    result.  Percentages are exact fractions of the original set and of
    the previous step's survivors.
    """
    original = len(base)
    results: dict = {}
    trace_steps = []
    previous: Sequence[Record] = base
    current: Sequence[Record] = base

    for step in steps:
        if step.kind == "extract":
            pred = _predicate(step)
            current = [r for r in base if pred(r)]
        elif step.kind == "intersect":
            for label in step.operands:
                if label not in results:
                    raise UnknownSetReference(label)
            left, right = (results[label] for label in step.operands)
            right_ids = {r.ident for r in right}
            current = [r for r in left if r.ident in right_ids]
        else:  # filter
            pred = _predicate(step)
            current = [r for r in previous if pred(r)]
        results[step.label] = current
        trace_steps.append(
            StepTrace(
                index=step.index,
                kind=step.kind,
                label=step.label,
                surviving_count=len(current),
                pct_of_original=len(current) / original if original else 0.0,
                pct_of_previous=len(current) / len(previous) if len(previous) else 0.0,
            )
        )
        previous = current

    return list(current), FilterTrace(original_count=original, steps=trace_steps)


def _predicate(step: FilterStep) -> Callable[[Record], bool]:
    if step.predicate not in PREDICATES:
        raise UnknownSetReference(step.predicate)
    fn = PREDICATES[step.predicate]
    if step.args:
        return lambda r: fn(r, *step.args)
    return lambda r: fn(r)


DEFAULT_PIPELINE = """\
1,extract,A,has_all_ids
2,extract,B,single_admission
3,intersect,C,A B
4,extract,D,full_day_data
5,intersect,E,C D
6,extract,F,age_at_least 18
7,intersect,G,E F
8,extract,H,sepsis
9,intersect,I,G H
10,extract,L,not_cmo
11,intersect,M,I L
12,extract,N,has_summary
13,intersect,O,M N
14,extract,P,naive
15,intersect,Q,O P
16,filter,R,has_mandatory
"""


def write_trace_csv(trace: FilterTrace, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["step", "kind", "label", "surviving", "pct_of_original", "pct_of_previous"]
        )
        for s in trace.steps:
            writer.writerow(
                [
                    s.index,
                    s.kind,
                    s.label,
                    s.surviving_count,
                    format(s.pct_of_original, ".10g"),
                    format(s.pct_of_previous, ".10g"),
                ]
            )


# --- extract ingestion ----------------------------------------------------------

TIMELINE_EXTRACTS = ("saps", "sofa", "creatinine", "bp", "bp_mean", "fluids_in", "fluids_out")

#: extract file -> (key component, required columns)
EXTRACT_SCHEMAS = {
    "ids": ("subject_id", ("subject_id", "hadm_id", "icustay_id")),
    "demographics": ("icustay_id", ("icustay_id", "age", "gender")),
    "race": ("hadm_id", ("hadm_id", "value")),
    "elixhauser": ("hadm_id", ("hadm_id", "value")),
    "elixhauser_binary": (
        "hadm_id",
        (
            "hadm_id",
            "chf",
            "arrhythmia",
            "valvular",
            "hypertension",
            "diabetes_unc",
            "diabetes_comp",
            "renal_failure",
            "liver_disease",
            "obesity",
        ),
    ),
    "vasopressors": ("icustay_id", ("icustay_id", "value")),
    "ventilation": ("icustay_id", ("icustay_id", "value")),
    "mortality": ("icustay_id", ("icustay_id", "value")),
    "los": ("icustay_id", ("icustay_id", "value")),
    "diuretics": ("icustay_id", ("icustay_id", "first_dose_hours")),
    "summaries": ("hadm_id", ("hadm_id", "text")),
    "sepsis": ("icustay_id", ("icustay_id",)),
    "cmo": ("icustay_id", ("icustay_id",)),
    **{name: ("icustay_id", ("icustay_id", "offset_hours", "value")) for name in TIMELINE_EXTRACTS},
}

ELIX_BINARY_FIELDS = EXTRACT_SCHEMAS["elixhauser_binary"][1][1:]

#: extracts that must hold data for a patient to clear the missing-data filter
DEFAULT_MANDATORY_EXTRACTS = (
    "demographics",
    "race",
    "elixhauser",
    "elixhauser_binary",
    "vasopressors",
    "ventilation",
    "mortality",
    "los",
) + TIMELINE_EXTRACTS


def _read_extract(directory: Path, name: str) -> list:
    path = directory / f"{name}.csv"
    if not path.exists():
        raise DataError(f"missing extract file: {path}")
    key_col, required = EXTRACT_SCHEMAS[name]
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        return list(reader)


def _int_or_none(raw: str) -> int | None:
    raw = (raw or "").strip()
    return int(raw) if raw else None


def load_extracts(
    directory: str | Path,
    lexicon: DrugLexicon | None = None,
    headings: Sequence[str] | None = None,
    mandatory_extracts: Sequence[str] = DEFAULT_MANDATORY_EXTRACTS,
) -> list:
    """Read every extract file and join them onto the id triples.

    Returns records with attributes filled: demographics, flags, outcome
    values, timeline sample lists, the naive decision and the
    missing-mandatory marker used by the final pipeline step.
    """
    directory = Path(directory)
    raw_ids = _read_extract(directory, "ids")
    records = []
    subject_counts: dict = {}
    for row in raw_ids:
        rec = Record(
            subject_id=_int_or_none(row["subject_id"]),
            hadm_id=_int_or_none(row["hadm_id"]),
            icustay_id=_int_or_none(row["icustay_id"]),
        )
        records.append(rec)
        if rec.subject_id is not None:
            subject_counts[rec.subject_id] = subject_counts.get(rec.subject_id, 0) + 1
    for rec in records:
        rec.attrs["n_admissions"] = (
            subject_counts.get(rec.subject_id, 1) if rec.subject_id is not None else 1
        )

    joinable = [r for r in records if r.icustay_id is not None]
    joinable.sort(key=lambda r: r.icustay_id)
    by_hadm = [r for r in records if r.hadm_id is not None]
    by_hadm.sort(key=lambda r: r.hadm_id)

    def join_onto(records_sorted, name, payload_of, attach):
        # variable files must arrive sorted by their key component; a
        # re-sort here would mask corrupt extracts
        component = EXTRACT_SCHEMAS[name][0]
        rows = _read_extract(directory, name)
        values = []
        for row in rows:
            key = _int_or_none(row[component])
            if key is None:
                continue
            values.append((key, payload_of(row)))
        try:
            result = sorted_merge_join(
                [_pseudo_key(r, component) for r in records_sorted], values, component
            )
        except UnsortedInput as exc:
            raise UnsortedInput(f"{name}.csv", exc.index) from exc
        for rec, (_, group) in zip(records_sorted, result.groups):
            attach(rec, group)

    def _scalar(field_name, cast=float):
        return lambda row: cast(row[field_name])

    join_onto(
        joinable,
        "demographics",
        lambda row: (float(row["age"]), float(row["gender"])),
        lambda rec, g: rec.attrs.update(
            {"age": g[0][0], "gender": g[0][1]} if g else {"age": None, "gender": None}
        ),
    )
    join_onto(
        by_hadm,
        "race",
        _scalar("value"),
        lambda rec, g: rec.attrs.update({"race": g[0] if g else None}),
    )
    join_onto(
        by_hadm,
        "elixhauser",
        _scalar("value"),
        lambda rec, g: rec.attrs.update({"elixhauser": g[0] if g else None}),
    )
    join_onto(
        by_hadm,
        "elixhauser_binary",
        lambda row: tuple(float(row[f]) for f in ELIX_BINARY_FIELDS),
        lambda rec, g: rec.attrs.update({"elixhauser_binary": g[0] if g else None}),
    )
    for flag in ("vasopressors", "ventilation", "mortality", "los"):
        join_onto(
            joinable,
            flag,
            _scalar("value"),
            (lambda name: lambda rec, g: rec.attrs.update({name: g[0] if g else None}))(flag),
        )
    join_onto(
        joinable,
        "diuretics",
        _scalar("first_dose_hours"),
        lambda rec, g: rec.attrs.update({"first_dose_hours": g[0] if g else None}),
    )
    join_onto(
        by_hadm,
        "summaries",
        lambda row: row["text"],
        lambda rec, g: rec.attrs.update({"summary": g[0] if g else None}),
    )
    for flag_name in ("sepsis", "cmo"):
        join_onto(
            joinable,
            flag_name,
            lambda row: True,
            (lambda name: lambda rec, g: rec.attrs.update({name: bool(g)}))(flag_name),
        )
    for series in TIMELINE_EXTRACTS:
        join_onto(
            joinable,
            series,
            lambda row: (float(row["offset_hours"]), float(row["value"])),
            (lambda name: lambda rec, g: rec.attrs.update({name: g or []}))(series),
        )

    for rec in records:
        spans = [
            max((off for off, _ in rec.attrs.get(series) or []), default=None)
            for series in TIMELINE_EXTRACTS
        ]
        spans = [s for s in spans if s is not None]
        rec.attrs["max_offset_hours"] = max(spans) if spans else None
        summary = rec.attrs.get("summary")
        rec.attrs["naive"] = detect_naive(summary or "", lexicon, headings)
        missing = _first_missing_extract(rec, mandatory_extracts)
        rec.attrs["missing_mandatory"] = missing
    return records


def _first_missing_extract(rec: Record, mandatory: Sequence[str]) -> str | None:
    for name in mandatory:
        if name == "demographics":
            if rec.attrs.get("age") is None or rec.attrs.get("gender") is None:
                return name
        elif name in TIMELINE_EXTRACTS:
            if not rec.attrs.get(name):
                return name
        elif rec.attrs.get(name) is None:
            return name
    return None


def _pseudo_key(rec: Record, component: str) -> PatientKey:
    # joins run before id validation; substitute 1 for absent components
    return PatientKey(
        rec.subject_id or 1,
        rec.hadm_id or 1,
        rec.icustay_id or 1,
    )
