import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opendx.kbmodel import (
    DEMOGRAPHIC,
    SYMPTOM,
    ConfigError,
    DiseaseFindingLink,
    KbConfig,
    KbValidationError,
    KnowledgeBase,
    SchemaVersionError,
    generate_synthetic_kb,
    load_kb,
    save_kb,
    validate_kb,
)


@pytest.fixture(scope="module")
def full_kb():
    return generate_synthetic_kb(KbConfig(seed=7))


def test_full_dimensions(full_kb):
    assert full_kb.n_diseases == 830
    assert full_kb.n_findings == 2052
    assert len(full_kb.prevalence_ids("very_common")) == 160
    assert validate_kb(full_kb) == []


def test_prevalence_remainder_split_evenly(full_kb):
    common, rare = len(full_kb.prevalence_ids("common")), len(full_kb.prevalence_ids("rare"))
    assert common + rare == 670 and abs(common - rare) <= 1


def test_symptom_counts_and_levels(full_kb):
    for d in range(full_kb.n_diseases):
        ids, levels = full_kb.symptom_links[d]
        assert 10 <= ids.size <= 30
        assert set(levels.tolist()) <= {1, 2, 3, 4, 5}


def test_demographic_profile(full_kb):
    ages = [f.id for f in full_kb.findings if f.kind == DEMOGRAPHIC and f.name.startswith("age")]
    assert len(ages) == 5
    for d in range(0, 830, 37):
        levels = [full_kb.disease_links[d][a] for a in ages]
        assert levels.count(5) == 1  # one preferred age bucket
        assert max(levels) == 5 and min(levels) < 5


def test_minimal_kb():
    cfg = KbConfig(n_diseases=1, n_findings=1, n_very_common=0, symptoms_per_disease_min=1,
                   symptoms_per_disease_max=1, n_exclusion_groups=0, age_buckets=(), sexes=(),
                   n_systems=1, system_size=1, min_expected_symptoms=0)
    kb = generate_synthetic_kb(cfg)
    assert len(kb.links) == 1
    assert 1 <= kb.links[0].frequency <= 5
    assert validate_kb(kb) == []


def test_deterministic_bytes():
    cfg = KbConfig(n_diseases=60, n_findings=400, n_very_common=10, n_systems=10, seed=3)
    assert generate_synthetic_kb(cfg).to_json() == generate_synthetic_kb(cfg).to_json()


def test_seed_changes_kb():
    a = generate_synthetic_kb(KbConfig(n_diseases=60, n_findings=400, n_very_common=10, n_systems=10, seed=1))
    b = generate_synthetic_kb(KbConfig(n_diseases=60, n_findings=400, n_very_common=10, n_systems=10, seed=2))
    assert a != b


@pytest.mark.parametrize("kw,field", [
    (dict(n_very_common=900), "n_very_common"),
    (dict(symptoms_per_disease_min=12, symptoms_per_disease_max=11), "symptoms_per_disease_max"),
    (dict(n_diseases=0), "n_diseases"),
    (dict(n_findings=20), "n_findings"),
])
def test_invalid_config_names_field(kw, field):
    with pytest.raises(ConfigError) as exc:
        generate_synthetic_kb(KbConfig(**kw))
    assert exc.value.field == field


def test_config_rejects_unknown_key():
    with pytest.raises(ConfigError):
        KbConfig.from_dict({"n_disease": 3})


@settings(max_examples=15)
@given(n_d=st.integers(5, 40), n_vc=st.integers(0, 5), k_min=st.integers(8, 12),
       extra=st.integers(0, 6), groups=st.integers(0, 6), seed=st.integers(0, 10**6))
def test_generated_kbs_always_valid(n_d, n_vc, k_min, extra, groups, seed):
    cfg = KbConfig(n_diseases=n_d, n_findings=200, n_very_common=n_vc,
                   symptoms_per_disease_min=k_min, symptoms_per_disease_max=k_min + extra,
                   n_exclusion_groups=groups, n_systems=5, system_size=30, seed=seed)
    kb = generate_synthetic_kb(cfg)
    assert validate_kb(kb) == []
    assert len(kb.prevalence_ids("very_common")) == n_vc


def _replace_links(kb, links):
    return KnowledgeBase(kb.findings, kb.diseases, tuple(links), kb.exclusion_groups)


def test_dangling_disease_reference(small_kb):
    bad = list(small_kb.links)
    k = 17
    ln = bad[k]
    bad[k] = DiseaseFindingLink(small_kb.n_diseases, ln.finding_id, ln.frequency, ln.evoking_strength)
    assert validate_kb(_replace_links(small_kb, bad)) == [f"dangling disease reference in link #{k}"]


def test_overlapping_exclusion_groups():
    from kbfactory import hand_kb
    kb, first = hand_kb([[(0, 5), (1, 5), (2, 5)]], 15, symptom_groups=[(10, 12), (12, 13)])
    problems = [p for p in validate_kb(kb) if "overlap" in p]
    assert problems == [f"exclusion groups 2 and 3 overlap on finding {first + 12}"]


def test_disease_without_symptoms_flagged():
    from kbfactory import hand_kb
    kb, _ = hand_kb([[(0, 5)], []], 3)
    assert validate_kb(kb) == ["disease 1 has no linked symptom finding"]


def test_roundtrip(tmp_path, small_kb):
    p = tmp_path / "kb.json"
    save_kb(small_kb, p)
    assert load_kb(p) == small_kb
    doc = json.loads(p.read_text())
    assert doc["schema_version"] == 1
    assert set(doc) == {"schema_version", "findings", "diseases", "links", "exclusion_groups"}


def test_unknown_schema_version(tmp_path, small_kb):
    doc = small_kb.to_dict()
    doc["schema_version"] = 99
    p = tmp_path / "kb.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(SchemaVersionError):
        load_kb(p)


def test_corrupt_file_lists_violations(tmp_path, small_kb):
    doc = small_kb.to_dict()
    doc["links"][3]["finding_id"] = 10**6  # hand-edit one id
    p = tmp_path / "kb.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(KbValidationError) as exc:
        load_kb(p)
    assert exc.value.violations == ["dangling finding reference in link #3"]


def test_kinds_limited_to_demographic_and_symptom(small_kb):
    assert {f.kind for f in small_kb.findings} == {DEMOGRAPHIC, SYMPTOM}
