import json
import math
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from choreoflow.choreo import (
    ChoreoAnnotation, TokenLayout, default_vocabulary, extract_tokens, min_acceptable, qc_evaluate, qc_plan,
    validate_annotation,
)
from choreoflow.errors import ConfigError, RangeError, VocabOverflow

FIX = Path(__file__).parent / "fixtures" / "choreo"
EXPECTED = json.loads((FIX / "expected.json").read_text())


def _load(p):
    return json.loads(p.read_text())


@pytest.mark.parametrize("path", sorted((FIX / "valid").glob("*.json")), ids=lambda p: p.stem)
def test_valid_fixtures_have_no_diagnostics(path):
    assert validate_annotation(_load(path)) == []


@pytest.mark.parametrize("name", sorted(EXPECTED))
def test_invalid_fixture_diagnostics(name):
    diags = validate_annotation(_load(FIX / "invalid" / f"{name}.json"))
    got = [[d.phrase, d.path, d.message] for d in diags]
    assert got == EXPECTED[name]


def test_fixture_counts():
    assert len(list((FIX / "valid").glob("*.json"))) == 10
    assert len(list((FIX / "invalid").glob("*.json"))) == 15


def test_orientation_8_coronal_phrase_is_valid():
    doc = {"phrases": [{"body": {"head": "turn"}, "orientation": 8, "space": {"plane": "coronal"},
                        "effort": {"weight": "strong", "time": "sudden", "space_q": "direct", "flow": "bound"}}]}
    assert validate_annotation(doc) == []


def test_word_count_mismatch_is_warning_only():
    diags = validate_annotation({"phrases": [{"body": {"head": "nod"}}], "free_text": "a b", "word_count": 3})
    assert [d.severity for d in diags] == ["warning"]
    extract_tokens({"phrases": [{"body": {"head": "nod"}}], "free_text": "a b", "word_count": 3})


vocab_token = st.one_of(st.text(max_size=8), st.integers(-3, 12), st.none(), st.booleans())


@settings(max_examples=300, deadline=None)
@given(st.recursive(
    st.dictionaries(st.sampled_from(["phrases", "free_text", "word_count", "x"]), vocab_token),
    lambda inner: st.one_of(st.lists(inner, max_size=3), st.dictionaries(
        st.sampled_from(["body", "space", "effort", "orientation", "phrases", "plane", "weight", "head"]),
        inner, max_size=4)),
    max_leaves=12,
))
def test_fuzz_never_raises_and_locates(doc):
    for d in validate_annotation(doc):
        assert d.message and d.severity in ("error", "warning")
        assert isinstance(d.path, str)


def _ann(**phrase):
    base = {"body": {"left_arm": "raise"}, "space": {"plane": "coronal", "direction": "up", "level": "high"},
            "orientation": 1, "effort": {"weight": "light", "space": "direct", "time": "sudden", "flow": "free"}}
    base.update(phrase)
    return {"phrases": [base]}


def test_tokens_deterministic_and_layout():
    layout = TokenLayout()
    a = extract_tokens(_ann(), layout)
    assert a == extract_tokens(_ann(), layout)
    assert len(a) == layout.slots_per_phrase == 17
    v = default_vocabulary()
    assert a[0] == layout.PHRASE
    assert a[1 + v.segments.index("left_arm")] == layout.body_base + v.segments.index("left_arm") * len(v.movements) + 1
    assert all(a[1 + i] == layout.NONE for i, s in enumerate(v.segments) if s != "left_arm")
    assert a[9] == layout.plane_base + v.planes.index("coronal")
    assert a[12] == layout.orientation_base


def test_empty_effort_uses_none():
    a = extract_tokens(_ann(effort={}))
    assert a[-4:] == [TokenLayout.NONE] * 4


@pytest.mark.parametrize("o", [2, 5, 8])
def test_orientation_changes_only_its_slot(o):
    a, b = extract_tokens(_ann(orientation=1)), extract_tokens(_ann(orientation=o))
    assert [i for i in range(len(a)) if a[i] != b[i]] == [12]


def test_phrase_order_matters():
    p1 = _ann()["phrases"][0]
    p2 = {"body": {"right_leg": "kick"}}
    assert extract_tokens({"phrases": [p1, p2]}) != extract_tokens({"phrases": [p2, p1]})


def test_structured_slots_injective():
    v = default_vocabulary()
    seen = set()
    for seg in v.segments:
        for mv in v.movements:
            seen.add(tuple(extract_tokens({"phrases": [{"body": {seg: mv}}]})))
    assert len(seen) == len(v.segments) * len(v.movements)


def test_free_text_tokens_and_truncation():
    layout = TokenLayout()
    doc = _ann()
    doc["free_text"] = " ".join(f"w{i}" for i in range(400))
    toks = extract_tokens(doc, layout, l_max=40)
    assert len(toks) == 40 and toks[17] == layout.TEXT
    assert all(layout.text_base <= t < layout.size for t in toks[18:])


def test_vocab_overflow_and_invalid():
    doc = {"phrases": [_ann()["phrases"][0]] * 16}
    with pytest.raises(VocabOverflow):
        extract_tokens(doc, l_max=256)
    with pytest.raises(ValueError):
        extract_tokens({"phrases": [{"body": {}}]})


def test_qc_plan_20000_items_in_100_batches():
    plan = qc_plan(20000, 100, 30, seed=0)
    assert len(plan.batches) == 100
    assert all(len(b.members) == 200 and len(b.sampled) == 30 for b in plan.batches)
    assert all(set(b.sampled) <= set(b.members) and len(set(b.sampled)) == 30 for b in plan.batches)
    assert sorted(i for b in plan.batches for i in b.members) == list(range(20000))
    assert qc_plan(20000, 100, 30, seed=0).to_dict() == plan.to_dict()


def test_qc_plan_small_and_errors():
    plan = qc_plan(10, 2, 5, seed=1)
    assert [sorted(b.sampled) for b in plan.batches] == [b.members for b in plan.batches]
    with pytest.raises(ConfigError):
        qc_plan(10, 2, 6)
    with pytest.raises(ConfigError):
        qc_plan(1, 2, 1)


def test_qc_evaluate_examples():
    r = qc_evaluate([5] * 29 + [2])
    assert r.verdict == "pass" and r.acceptance_rate == pytest.approx(29 / 30)
    assert qc_evaluate([5] * 28 + [2] * 2).verdict == "fail"
    assert qc_evaluate([3] * 30).acceptance_rate == 1.0
    with pytest.raises(RangeError):
        qc_evaluate([5, 6])
    with pytest.raises(RangeError):
        qc_evaluate([])


@pytest.mark.parametrize("n", [1, 10, 20, 30, 57, 100])
def test_qc_boundary(n):
    k = math.ceil(0.95 * n)
    assert min_acceptable(n) == k
    assert qc_evaluate([5] * k + [1] * (n - k)).verdict == "pass"
    if k > 0:
        assert qc_evaluate([5] * (k - 1) + [1] * (n - k + 1)).verdict == "fail"


def test_roundtrip_dict():
    doc = _ann()
    doc["free_text"] = "hello"
    doc["word_count"] = 1
    assert ChoreoAnnotation.from_dict(doc).to_dict() == doc
