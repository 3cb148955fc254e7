import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icustudy.cohort import (
    DEFAULT_PIPELINE,
    DrugLexicon,
    FilterStep,
    Record,
    detect_naive,
    parse_pipeline,
    run_filter_pipeline,
    sorted_merge_join,
)
from icustudy.errors import (
    DataError,
    PredicateFailure,
    UnknownSetReference,
    UnsortedInput,
)
from icustudy.group import PatientKey

from oracles import nested_loop_join


def _keys(ids):
    return [PatientKey(i, 100 + i, 1000 + i) for i in ids]


def _keys_by_icustay(ids):
    return [PatientKey(9999, 9999, i) for i in ids]


# --- sorted merge join ------------------------------------------------------


def test_join_single_match():
    ids = _keys([1, 2, 3])
    result = sorted_merge_join(ids, [(2, "a")], component="subject_id")
    assert result.groups == [(ids[0], None), (ids[1], ["a"]), (ids[2], None)]


def test_join_empty_ids():
    result = sorted_merge_join([], [(5, "x")], component="subject_id")
    assert result.groups == []


def test_join_duplicate_value_keys_grouped():
    ids = _keys([1, 2])
    result = sorted_merge_join(ids, [(1, "a"), (1, "b"), (1, "c")], component="subject_id")
    assert result.groups[0] == (ids[0], ["a", "b", "c"])
    assert result.groups[1] == (ids[1], None)


def test_join_duplicate_ids_share_group():
    # two stays of one subject joined against a subject-keyed extract
    ids = [PatientKey(7, 1, 1), PatientKey(7, 2, 2)]
    result = sorted_merge_join(ids, [(7, "v")], component="subject_id")
    assert result.groups == [(ids[0], ["v"]), (ids[1], ["v"])]


def test_join_unsorted_ids_raises_with_index():
    ids = _keys([1, 3, 2])
    with pytest.raises(UnsortedInput) as excinfo:
        sorted_merge_join(ids, [], component="subject_id")
    assert excinfo.value.index == 2
    assert excinfo.value.name == "ids"


def test_join_unsorted_values_raises_with_index():
    ids = _keys([1, 2, 3])
    with pytest.raises(UnsortedInput) as excinfo:
        sorted_merge_join(ids, [(2, "a"), (1, "b")], component="subject_id")
    assert excinfo.value.name == "values"
    assert excinfo.value.index == 1


def test_join_large_random_matches_nested_loop_oracle():
    rng = np.random.default_rng(31)
    ids = _keys_by_icustay(sorted(rng.integers(1, 2000, size=1000).tolist()))
    values = sorted(
        (int(k), f"p{j}") for j, k in enumerate(rng.integers(1, 2000, size=5000))
    )
    result = sorted_merge_join(ids, values, component="icustay_id")
    want = nested_loop_join(ids, values, "icustay_id")
    assert [(k, g) for k, g in result.groups] == want
    assert result.cursor_advances <= len(ids) + len(values)


@given(
    st.lists(st.integers(1, 60), min_size=0, max_size=40),
    st.lists(st.tuples(st.integers(1, 60), st.integers(0, 9)), min_size=0, max_size=60),
)
@settings(max_examples=200)
def test_join_equals_oracle_property(raw_ids, raw_values):
    ids = _keys_by_icustay(sorted(raw_ids))
    values = sorted(raw_values)
    result = sorted_merge_join(ids, values, component="icustay_id")
    assert [(k, g) for k, g in result.groups] == nested_loop_join(ids, values, "icustay_id")
    assert result.cursor_advances <= len(ids) + len(values)


# --- naive detection ---------------------------------------------------------


def test_naive_false_on_admission_drug():
    assert detect_naive("ON ADMISSION: lasix 20mg") is False


def test_naive_empty_summary_true():
    assert detect_naive("") is True


def test_naive_discharge_only_mention_stays_naive():
    text = (
        "MEDICATIONS ON ADMISSION: aspirin.\n"
        "DISCHARGE MEDS: furosemide 40mg daily.\n"
    )
    assert detect_naive(text, headings=["MEDICATIONS ON ADMISSION"]) is True


def test_naive_case_insensitive():
    text = "on admission: FUROSEMIDE started at home"
    assert detect_naive(text) is False
    assert detect_naive(text.upper()) is False
    assert detect_naive(text.lower()) is False


def test_naive_word_boundaries():
    # "lasixol" must not match "lasix"
    assert detect_naive("ON ADMISSION: lasixol 5mg") is True
    assert detect_naive("ON ADMISSION: (lasix)") is False


def test_naive_no_heading_searches_whole_text():
    assert detect_naive("patient took hydrochlorothiazide at home") is False
    assert detect_naive("patient took vitamins at home") is True


def test_naive_custom_lexicon():
    lexicon = DrugLexicon(frozenset({"examplamide"}))
    assert detect_naive("ON ADMISSION: examplamide", lexicon=lexicon) is False
    assert detect_naive("ON ADMISSION: lasix", lexicon=lexicon) is True


def test_lexicon_rejects_bad_entries():
    with pytest.raises(DataError):
        DrugLexicon(frozenset())
    with pytest.raises(DataError):
        DrugLexicon(frozenset({" Lasix "}))


# --- filter pipeline -----------------------------------------------------------


def _record(i, **attrs):
    defaults = {
        "n_admissions": 1,
        "age": 50.0,
        "sepsis": True,
        "cmo": False,
        "summary": "ok",
        "naive": True,
        "max_offset_hours": 60.0,
        "missing_mandatory": None,
    }
    defaults.update(attrs)
    return Record(i, 100 + i, 1000 + i, defaults)


def test_pipeline_always_true_extract():
    base = [_record(i) for i in range(1, 11)]
    steps = [FilterStep(1, "extract", "A", predicate="always_true")]
    final, trace = run_filter_pipeline(base, steps)
    assert len(final) == 10
    assert trace.steps[0].surviving_count == 10
    assert trace.steps[0].pct_of_original == 1.0


def test_pipeline_intersection_set_algebra():
    # extracts of sizes 8 and 6 overlapping in 5 records
    base = [_record(i) for i in range(1, 10)]
    for r in base[:3]:
        r.attrs["age"] = 10.0  # fails age filter -> in B-complement
    # A: records 1..8 (drop record 9 via sepsis), B: age >= 18
    for r in base[8:]:
        r.attrs["sepsis"] = False
    steps = parse_pipeline(
        "1,extract,A,sepsis\n2,extract,B,age_at_least 18\n3,intersect,C,A B\n"
    )
    final, trace = run_filter_pipeline(base, steps)
    assert trace.steps[0].surviving_count == 8
    assert trace.steps[1].surviving_count == 6
    assert trace.steps[2].surviving_count == 5
    assert len(final) == 5


def test_pipeline_unknown_set_reference():
    base = [_record(1)]
    steps = [FilterStep(1, "intersect", "C", operands=("A", "B"))]
    with pytest.raises(UnknownSetReference):
        run_filter_pipeline(base, steps)


def test_pipeline_predicate_failure_carries_key():
    record = _record(2)
    del record.attrs["age"]
    steps = parse_pipeline("1,extract,F,age_at_least 18")
    with pytest.raises(PredicateFailure) as excinfo:
        run_filter_pipeline([record], steps)
    assert excinfo.value.key == (2, 102, 1002)
    assert excinfo.value.field == "age"


def test_pipeline_monotone_after_intersections():
    rng = np.random.default_rng(41)
    base = []
    for i in range(1, 201):
        base.append(
            _record(
                i,
                age=float(rng.integers(5, 90)),
                sepsis=bool(rng.random() < 0.5),
                cmo=bool(rng.random() < 0.1),
                n_admissions=int(rng.integers(1, 3)),
                summary="ok" if rng.random() < 0.9 else None,
                naive=bool(rng.random() < 0.9),
            )
        )
    steps = parse_pipeline(DEFAULT_PIPELINE)
    final, trace = run_filter_pipeline(base, steps)
    counts = {s.label: s.surviving_count for s in trace.steps}
    chain = ["C", "E", "G", "I", "M", "O", "Q", "R"]
    assert all(counts[b] <= counts[a] for a, b in zip(chain, chain[1:]))
    assert trace.steps[-1].surviving_count == len(final)
    # exact fraction bookkeeping
    for s in trace.steps:
        assert s.pct_of_original == s.surviving_count / 200


def test_load_extracts_rejects_unsorted_variable_file(tmp_path):
    from icustudy.synth import SynthSpec, synth_generate
    from icustudy.cohort import load_extracts

    synth_generate(SynthSpec(n=6, seed=1), tmp_path)
    saps = tmp_path / "saps.csv"
    lines = saps.read_text().splitlines()
    # swap two data rows of different patients to corrupt the ordering
    assert len(lines) > 20
    lines[1], lines[-1] = lines[-1], lines[1]
    saps.write_text("\n".join(lines) + "\n")
    with pytest.raises(UnsortedInput) as excinfo:
        load_extracts(tmp_path)
    assert excinfo.value.name == "saps.csv"
    assert excinfo.value.index >= 0


def test_parse_pipeline_requires_contiguous_indices():
    with pytest.raises(DataError):
        parse_pipeline("1,extract,A,always_true\n3,extract,B,always_true\n")


def test_default_pipeline_has_sixteen_steps():
    steps = parse_pipeline(DEFAULT_PIPELINE)
    assert len(steps) == 16
    assert [s.kind for s in steps] == (
        ["extract", "extract"]
        + ["intersect", "extract"] * 6
        + ["intersect", "filter"]
    )
