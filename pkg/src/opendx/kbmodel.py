"""Disease/finding knowledge base and a seeded synthetic generator."""
import hashlib
import json
from dataclasses import dataclass, fields
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np

SCHEMA_VERSION = 1

DEMOGRAPHIC = "demographic"
SYMPTOM = "symptom"
PREVALENCE_LEVELS = ("very_common", "common", "rare")

DEFAULT_AGE_BUCKETS = (
    "newborn (<2 months)",
    "child (1-11 years)",
    "adolescent (12-18 years)",
    "adult (19-39 years)",
    "middle age (40-70 years)",
)
DEFAULT_SEXES = ("female", "male")


class ConfigError(ValueError):
    def __init__(self, field_name, message):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class KbValidationError(ValueError):
    def __init__(self, violations):
        super().__init__("invalid knowledge base:\n  " + "\n  ".join(violations))
        self.violations = list(violations)


class SchemaVersionError(ValueError):
    pass


@dataclass(frozen=True)
class Finding:
    id: int
    name: str
    kind: str
    exclusion_group: Optional[int] = None


@dataclass(frozen=True)
class Disease:
    id: int
    name: str
    prevalence: str


@dataclass(frozen=True)
class DiseaseFindingLink:
    disease_id: int
    finding_id: int
    frequency: int
    evoking_strength: int


@dataclass(frozen=True)
class KnowledgeBase:
    findings: tuple
    diseases: tuple
    links: tuple
    exclusion_groups: tuple  # tuple of tuples of finding ids

    @property
    def n_findings(self):
        return len(self.findings)

    @property
    def n_diseases(self):
        return len(self.diseases)

    @cached_property
    def finding_group(self):
        """Exclusion group id per finding, -1 when ungrouped."""
        g = np.full(len(self.findings), -1, dtype=np.int64)
        for gid, members in enumerate(self.exclusion_groups):
            g[list(members)] = gid
        return g

    @cached_property
    def demographic_groups(self):
        kinds = [self.findings[m].kind for m in range(len(self.findings))]
        return tuple(
            gid
            for gid, members in enumerate(self.exclusion_groups)
            if members and all(kinds[m] == DEMOGRAPHIC for m in members)
        )

    @cached_property
    def disease_links(self):
        """Per disease: ``{finding_id: frequency}``."""
        out = [dict() for _ in self.diseases]
        for ln in self.links:
            out[ln.disease_id][ln.finding_id] = ln.frequency
        return out

    @cached_property
    def symptom_links(self):
        """Per disease: (finding ids, frequency levels) arrays over symptoms."""
        kinds = np.array([f.kind == SYMPTOM for f in self.findings])
        out = []
        for links in self.disease_links:
            ids = np.array(sorted(f for f in links if kinds[f]), dtype=np.int64)
            levels = np.array([links[f] for f in ids], dtype=np.int64)
            out.append((ids, levels))
        return out

    def prevalence_ids(self, level):
        return sorted(d.id for d in self.diseases if d.prevalence == level)

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "findings": [
                {
                    "id": f.id,
                    "name": f.name,
                    "kind": f.kind,
                    "exclusion_group": f.exclusion_group,
                }
                for f in self.findings
            ],
            "diseases": [
                {"id": d.id, "name": d.name, "prevalence": d.prevalence}
                for d in self.diseases
            ],
            "links": [
                {
                    "disease_id": ln.disease_id,
                    "finding_id": ln.finding_id,
                    "frequency": ln.frequency,
                    "evoking_strength": ln.evoking_strength,
                }
                for ln in self.links
            ],
            "exclusion_groups": [list(g) for g in self.exclusion_groups],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), separators=(",", ":"), sort_keys=True)

    def content_hash(self):
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    @classmethod
    def from_dict(cls, doc):
        return cls(
            findings=tuple(
                Finding(
                    int(f["id"]),
                    str(f["name"]),
                    str(f["kind"]),
                    None if f.get("exclusion_group") is None else int(f["exclusion_group"]),
                )
                for f in doc["findings"]
            ),
            diseases=tuple(
                Disease(int(d["id"]), str(d["name"]), str(d["prevalence"]))
                for d in doc["diseases"]
            ),
            links=tuple(
                DiseaseFindingLink(
                    int(ln["disease_id"]),
                    int(ln["finding_id"]),
                    int(ln["frequency"]),
                    int(ln["evoking_strength"]),
                )
                for ln in doc["links"]
            ),
            exclusion_groups=tuple(tuple(int(i) for i in g) for g in doc["exclusion_groups"]),
        )

    def __eq__(self, other):
        if not isinstance(other, KnowledgeBase):
            return NotImplemented
        return (
            self.findings == other.findings
            and self.diseases == other.diseases
            and self.links == other.links
            and self.exclusion_groups == other.exclusion_groups
        )

    __hash__ = object.__hash__


@dataclass
class KbConfig:
    n_diseases: int = 830
    n_findings: int = 2052
    n_very_common: int = 160
    symptoms_per_disease_min: int = 10
    symptoms_per_disease_max: int = 30
    n_exclusion_groups: int = 40
    exclusion_group_min: int = 2
    exclusion_group_max: int = 4
    age_buckets: tuple = DEFAULT_AGE_BUCKETS
    sexes: tuple = DEFAULT_SEXES
    # symptoms are clustered into body systems so that diseases of the same
    # system share findings; this is what makes nearest-neighbour unknowns hard
    n_systems: int = 30
    in_system_fraction: float = 1.0
    # within a system, symptom i (by popularity rank) is drawn with weight
    # (i + 1) ** -popularity_exponent; 0 gives uniform draws
    popularity_exponent: float = 1.0
    # symptoms per system; None spreads all symptoms over the systems, a
    # smaller value leaves the rest of the vocabulary to out-of-system draws
    system_size: Optional[int] = 30
    # frequency levels are redrawn until the expected symptom count clears this
    min_expected_symptoms: float = 6.0
    seed: int = 0

    def validate(self):
        def need(cond, name, msg):
            if not cond:
                raise ConfigError(name, msg)

        need(self.n_diseases >= 1, "n_diseases", "must be >= 1")
        need(0 <= self.n_very_common <= self.n_diseases, "n_very_common",
             "must lie in [0, n_diseases]")
        need(self.symptoms_per_disease_min >= 1, "symptoms_per_disease_min", "must be >= 1")
        need(self.symptoms_per_disease_min <= self.symptoms_per_disease_max,
             "symptoms_per_disease_max", "range is empty")
        n_symptoms = self.n_findings - len(self.age_buckets) - len(self.sexes)
        need(n_symptoms >= self.symptoms_per_disease_max, "n_findings",
             f"leaves {n_symptoms} symptom findings, fewer than symptoms_per_disease_max")
        need(self.n_exclusion_groups >= 0, "n_exclusion_groups", "must be >= 0")
        need(2 <= self.exclusion_group_min <= self.exclusion_group_max,
             "exclusion_group_max", "group size range must be non-empty and >= 2")
        need(self.n_exclusion_groups * self.exclusion_group_max <= n_symptoms,
             "n_exclusion_groups", "too many exclusion groups for the symptom count")
        need(1 <= self.n_systems <= n_symptoms, "n_systems", "must lie in [1, #symptoms]")
        need(self.system_size is None
             or 1 <= self.system_size * self.n_systems <= n_symptoms,
             "system_size", "systems do not fit in the symptom vocabulary")
        need(0.0 <= self.in_system_fraction <= 1.0, "in_system_fraction", "must lie in [0, 1]")
        need(self.min_expected_symptoms <= 0.9 * self.symptoms_per_disease_min,
             "min_expected_symptoms", "unreachable for the minimum symptom count")

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown KbConfig field")
        kw = dict(doc)
        for key in ("age_buckets", "sexes"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["age_buckets"] = list(self.age_buckets)
        d["sexes"] = list(self.sexes)
        return d


# probability of presence per frequency level, used to keep generated
# diseases simulatable; mirrors casesim.FREQUENCY_PROBABILITY
_LEVEL_P = np.array([0.0, 0.05, 0.2, 0.5, 0.75, 0.9])


def generate_synthetic_kb(config: KbConfig) -> KnowledgeBase:
    config.validate()
    rng = np.random.default_rng(config.seed)

    findings = []
    groups = []
    demo = []
    for names, tag in ((config.age_buckets, "age"), (config.sexes, "sex")):
        members = []
        gid = len(groups)
        for name in names:
            fid = len(findings)
            findings.append(Finding(fid, f"{tag}: {name}", DEMOGRAPHIC, gid))
            members.append(fid)
        if members:
            groups.append(tuple(members))
        demo.append(tuple(members))
    age_ids, sex_ids = demo

    first_symptom = len(findings)
    symptom_ids = np.arange(first_symptom, config.n_findings)
    n_sym = symptom_ids.size

    group_of = {}
    pool = rng.permutation(symptom_ids)
    pos = 0
    for _ in range(config.n_exclusion_groups):
        size = int(rng.integers(config.exclusion_group_min, config.exclusion_group_max + 1))
        members = tuple(sorted(int(i) for i in pool[pos:pos + size]))
        pos += size
        gid = len(groups)
        groups.append(members)
        for m in members:
            group_of[m] = gid

    for fid in symptom_ids:
        fid = int(fid)
        findings.append(Finding(fid, f"symptom {fid - first_symptom:04d}", SYMPTOM,
                                group_of.get(fid)))

    if config.system_size is None:
        system_of = rng.integers(0, config.n_systems, size=n_sym)
    else:
        system_of = np.full(n_sym, -1)
        system_of[rng.permutation(n_sym)[: config.n_systems * config.system_size]] = np.repeat(
            np.arange(config.n_systems), config.system_size)
    systems = []
    for s in range(config.n_systems):
        members = rng.permutation(symptom_ids[system_of == s])  # order = popularity rank
        w = (np.arange(members.size) + 1.0) ** -config.popularity_exponent
        systems.append((members, w / w.sum() if members.size else w))

    prevalence = np.empty(config.n_diseases, dtype=object)
    order = rng.permutation(config.n_diseases)
    rest = config.n_diseases - config.n_very_common
    n_common = rest - rest // 2
    prevalence[order[: config.n_very_common]] = "very_common"
    prevalence[order[config.n_very_common: config.n_very_common + n_common]] = "common"
    prevalence[order[config.n_very_common + n_common:]] = "rare"

    diseases = []
    links = []
    for d in range(config.n_diseases):
        diseases.append(Disease(d, f"disease {d:04d}", str(prevalence[d])))
        k = int(rng.integers(config.symptoms_per_disease_min,
                             config.symptoms_per_disease_max + 1))
        home, home_w = systems[int(rng.integers(config.n_systems))]
        n_home = min(int(round(config.in_system_fraction * k)), home.size)
        chosen = set(int(i) for i in rng.choice(home, size=n_home, replace=False, p=home_w))
        while len(chosen) < k:
            chosen.add(int(symptom_ids[rng.integers(n_sym)]))
        chosen = sorted(chosen)
        levels = rng.integers(1, 6, size=k)
        while _LEVEL_P[levels].sum() < config.min_expected_symptoms:
            levels = rng.integers(1, 6, size=k)
        strengths = rng.integers(0, 6, size=k)

        # demographic profile: one preferred age bucket, optional sex preference
        pref_age = int(rng.integers(max(len(age_ids), 1)))
        for i, fid in enumerate(age_ids):
            gap = abs(i - pref_age)
            level = 5 if gap == 0 else (3 if gap == 1 else 1)
            links.append(DiseaseFindingLink(d, fid, level, int(rng.integers(0, 6))))
        sex_specific = rng.random() < 0.3
        pref_sex = int(rng.integers(max(len(sex_ids), 1)))
        for i, fid in enumerate(sex_ids):
            level = (5 if i == pref_sex else 1) if sex_specific else 3
            links.append(DiseaseFindingLink(d, fid, level, int(rng.integers(0, 6))))
        for fid, lv, es in zip(chosen, levels, strengths):
            links.append(DiseaseFindingLink(d, fid, int(lv), int(es)))

    return KnowledgeBase(
        findings=tuple(findings),
        diseases=tuple(diseases),
        links=tuple(links),
        exclusion_groups=tuple(groups),
    )


def validate_kb(kb: KnowledgeBase) -> list:
    problems = []
    nf, nd = len(kb.findings), len(kb.diseases)

    for i, f in enumerate(kb.findings):
        if f.id != i:
            problems.append(f"finding #{i} has id {f.id}, expected dense id {i}")
        if f.kind not in (DEMOGRAPHIC, SYMPTOM):
            problems.append(f"finding {f.id} has unknown kind {f.kind!r}")
        if f.kind == DEMOGRAPHIC and f.exclusion_group is None:
            problems.append(f"demographic finding {f.id} is not in an exclusion group")
        if f.exclusion_group is not None and not 0 <= f.exclusion_group < len(kb.exclusion_groups):
            problems.append(f"finding {f.id} names missing exclusion group {f.exclusion_group}")

    for i, d in enumerate(kb.diseases):
        if d.id != i:
            problems.append(f"disease #{i} has id {d.id}, expected dense id {i}")
        if d.prevalence not in PREVALENCE_LEVELS:
            problems.append(f"disease {d.id} has unknown prevalence {d.prevalence!r}")

    seen_pairs = set()
    has_symptom = [False] * nd
    for k, ln in enumerate(kb.links):
        ok = True
        if not 0 <= ln.disease_id < nd:
            problems.append(f"dangling disease reference in link #{k}")
            ok = False
        if not 0 <= ln.finding_id < nf:
            problems.append(f"dangling finding reference in link #{k}")
            ok = False
        if not 1 <= ln.frequency <= 5:
            problems.append(f"link #{k} frequency {ln.frequency} outside [1, 5]")
        if not 0 <= ln.evoking_strength <= 5:
            problems.append(f"link #{k} evoking_strength {ln.evoking_strength} outside [0, 5]")
        pair = (ln.disease_id, ln.finding_id)
        if pair in seen_pairs:
            problems.append(f"duplicate link #{k} for disease {pair[0]}, finding {pair[1]}")
        seen_pairs.add(pair)
        if ok and kb.findings[ln.finding_id].kind == SYMPTOM:
            has_symptom[ln.disease_id] = True

    owner = {}
    for gid, members in enumerate(kb.exclusion_groups):
        for m in members:
            if not 0 <= m < nf:
                problems.append(f"exclusion group {gid} references missing finding {m}")
                continue
            if m in owner:
                problems.append(f"exclusion groups {owner[m]} and {gid} overlap on finding {m}")
            else:
                owner[m] = gid
            if kb.findings[m].exclusion_group != gid:
                problems.append(f"finding {m} is listed in group {gid} but tagged "
                                f"{kb.findings[m].exclusion_group}")

    for d in range(nd):
        if not has_symptom[d]:
            problems.append(f"disease {d} has no linked symptom finding")
    return problems


def save_kb(kb: KnowledgeBase, path):
    Path(path).write_text(kb.to_json())


def load_kb(path) -> KnowledgeBase:
    doc = json.loads(Path(path).read_text())
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"{path}: unsupported KB schema_version {version!r} (expected {SCHEMA_VERSION})"
        )
    kb = KnowledgeBase.from_dict(doc)
    problems = validate_kb(kb)
    if problems:
        raise KbValidationError(problems)
    return kb
