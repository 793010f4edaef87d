"""Clinical vignette simulation and the case dataset container."""
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kbmodel import SYMPTOM, KnowledgeBase

FREQUENCY_PROBABILITY = {1: 0.05, 2: 0.2, 3: 0.5, 4: 0.75, 5: 0.9}
MIN_SYMPTOMS = 5
MAX_SYMPTOMS = 8
MAX_ATTEMPTS = 100


class SimulationError(RuntimeError):
    def __init__(self, disease_id, message):
        super().__init__(f"disease {disease_id}: {message}")
        self.disease_id = disease_id


class DatasetError(ValueError):
    pass


def frequency_to_probability(level, table=None):
    table = FREQUENCY_PROBABILITY if table is None else table
    if isinstance(level, bool) or int(level) != level or level not in table:
        raise ValueError(f"frequency level {level!r} outside [1, 5]")
    return table[int(level)]


def _level_table(table):
    table = FREQUENCY_PROBABILITY if table is None else table
    arr = np.zeros(6)
    for k, v in table.items():
        arr[int(k)] = v
    if not np.all(np.diff(arr[1:]) > 0):
        raise ValueError("frequency probability table must be strictly increasing")
    return arr


@dataclass(frozen=True)
class ClinicalCase:
    disease_id: int
    present_findings: tuple

    def symptom_count(self, kb):
        return sum(kb.findings[f].kind == SYMPTOM for f in self.present_findings)


def case_rng(master_seed, disease_id, case_index):
    """Per-case stream; depends only on the triple, not on iteration order."""
    return np.random.default_rng([int(master_seed), int(disease_id), int(case_index)])


class _DiseaseSampler:
    """Per-disease arrays reused across that disease's cases."""

    def __init__(self, kb, disease_id, level_p):
        links = kb.disease_links[disease_id]
        self.disease_id = disease_id
        self.demo = []
        for gid in kb.demographic_groups:
            members = np.array(kb.exclusion_groups[gid], dtype=np.int64)
            w = np.array([level_p[links[m]] if m in links else 0.0 for m in members])
            if w.sum() == 0:
                w = np.ones(len(members))
            self.demo.append((members, np.cumsum(w / w.sum())))
        self.ids, levels = kb.symptom_links[disease_id]
        self.p = level_p[levels]
        g = kb.finding_group[self.ids]
        self.free = g < 0
        self.groups = [np.flatnonzero(g == gid) for gid in np.unique(g[g >= 0])]

    def attempts(self, rng, n):
        """Accepted-symptom masks for ``n`` independent attempts."""
        keys = rng.random((n, self.ids.size))
        hits = rng.random((n, self.ids.size)) < self.p
        accepted = hits & self.free
        rows_all = np.arange(n)
        for cols in self.groups:
            masked = np.where(hits[:, cols], keys[:, cols], np.inf)
            # the sibling visited first wins the group
            win = np.argmin(masked, axis=1)
            rows = np.flatnonzero(np.isfinite(masked[rows_all, win]))
            accepted[rows, cols[win[rows]]] = True
        return accepted

    def sample(self, rng, min_symptoms, max_symptoms, max_attempts):
        present = []
        for members, cdf in self.demo:
            k = min(int(np.searchsorted(cdf, rng.random(), side="right")), members.size - 1)
            present.append(int(members[k]))
        overflow = None
        chosen = None
        # a small first batch covers most diseases; the rest only on rejection
        for batch in (min(8, max_attempts), max_attempts - min(8, max_attempts)):
            if batch <= 0:
                continue
            accepted = self.attempts(rng, batch)
            counts = accepted.sum(axis=1)
            ok = np.flatnonzero((counts >= min_symptoms) & (counts <= max_symptoms))
            if ok.size:
                chosen = self.ids[accepted[ok[0]]]
                break
            over = np.flatnonzero(counts > max_symptoms)
            if over.size:
                overflow = self.ids[accepted[over[-1]]]
        if chosen is None:
            if overflow is None:
                raise SimulationError(
                    self.disease_id,
                    f"no case with >= {min_symptoms} symptoms in {max_attempts} attempts",
                )
            chosen = rng.choice(overflow, size=max_symptoms, replace=False)
        present.extend(int(f) for f in chosen)
        return ClinicalCase(int(self.disease_id), tuple(sorted(present)))


def _sampler(kb, disease_id, table, min_symptoms):
    if not 0 <= disease_id < kb.n_diseases:
        raise SimulationError(disease_id, "unknown disease id")
    s = _DiseaseSampler(kb, int(disease_id), _level_table(table))
    if s.ids.size < min_symptoms:
        raise SimulationError(
            disease_id, f"only {s.ids.size} linked symptoms, cannot reach {min_symptoms}"
        )
    return s


def simulate_case(kb: KnowledgeBase, disease_id, rng, table=None,
                  min_symptoms=MIN_SYMPTOMS, max_symptoms=MAX_SYMPTOMS,
                  max_attempts=MAX_ATTEMPTS) -> ClinicalCase:
    """Simulate one case of ``disease_id``.

    Demographics: one finding per demographic exclusion group, weighted by
    the disease's link frequency.  Symptoms: every linked symptom is visited
    in random order and marked present with its frequency probability unless
    an exclusion sibling is already present.  Attempts outside the allowed
    symptom count are rejected; after ``max_attempts`` an over-full attempt is
    trimmed at random, otherwise SimulationError.
    """
    s = _sampler(kb, disease_id, table, min_symptoms)
    return s.sample(rng, min_symptoms, max_symptoms, max_attempts)


class Dataset:
    """Cases stored as a binary CSR matrix plus per-row labels.

    ``case_index`` is the simulation index of each case within its disease;
    ``(label, case_index)`` identifies a case.
    """

    def __init__(self, labels, indptr, indices, vocab_size, label_space=None,
                 case_index=None):
        self.labels = np.asarray(labels, dtype=np.int64)
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.vocab_size = int(vocab_size)
        if label_space is None:
            label_space = np.unique(self.labels)
        self.label_space = tuple(sorted(int(x) for x in label_space))
        if case_index is None:
            case_index = np.arange(self.labels.size)
        self.case_index = np.asarray(case_index, dtype=np.int64)
        if self.indptr.size != self.labels.size + 1:
            raise DatasetError("indptr length must be n_cases + 1")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= self.vocab_size):
            raise DatasetError("finding id outside the vocabulary")
        if self.labels.size and not np.isin(self.labels, self.label_space).all():
            raise DatasetError("case label outside label_space")

    @classmethod
    def from_cases(cls, cases, vocab_size, label_space=None, case_index=None):
        cases = list(cases)
        indptr = np.zeros(len(cases) + 1, dtype=np.int64)
        for i, c in enumerate(cases):
            indptr[i + 1] = indptr[i] + len(c.present_findings)
        indices = np.fromiter(
            (f for c in cases for f in c.present_findings), dtype=np.int64, count=int(indptr[-1])
        )
        labels = np.array([c.disease_id for c in cases], dtype=np.int64)
        return cls(labels, indptr, indices, vocab_size, label_space, case_index)

    @classmethod
    def empty(cls, vocab_size, label_space=()):
        return cls(np.zeros(0, np.int64), np.zeros(1, np.int64), np.zeros(0, np.int64),
                   vocab_size, label_space)

    def __len__(self):
        return int(self.labels.size)

    def case(self, i):
        a, b = self.indptr[i], self.indptr[i + 1]
        return ClinicalCase(int(self.labels[i]), tuple(int(f) for f in self.indices[a:b]))

    def __iter__(self):
        for i in range(len(self)):
            yield self.case(i)

    def keys(self):
        return list(zip(self.labels.tolist(), self.case_index.tolist()))

    def subset(self, rows, label_space=None):
        rows = np.asarray(rows, dtype=np.int64)
        counts = np.diff(self.indptr)[rows]
        indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        if rows.size:
            starts = self.indptr[rows]
            offs = np.arange(int(indptr[-1])) - np.repeat(indptr[:-1], counts)
            indices = self.indices[np.repeat(starts, counts) + offs]
        else:
            indices = np.zeros(0, np.int64)
        return Dataset(self.labels[rows], indptr, indices, self.vocab_size,
                       self.label_space if label_space is None else label_space,
                       self.case_index[rows])

    def with_labels(self, label_set):
        """Rows whose label is in ``label_set``; label space shrinks to match."""
        label_set = sorted(int(x) for x in label_set)
        rows = np.flatnonzero(np.isin(self.labels, label_set))
        return self.subset(rows, label_set)

    @staticmethod
    def concat(parts, vocab_size=None):
        parts = list(parts)
        if vocab_size is None:
            if not parts:
                raise DatasetError("cannot infer vocab_size of an empty concat")
            vocab_size = parts[0].vocab_size
        if any(p.vocab_size != vocab_size for p in parts):
            raise DatasetError("datasets disagree on vocab_size")
        if not parts:
            return Dataset.empty(vocab_size)
        labels = np.concatenate([p.labels for p in parts])
        indices = np.concatenate([p.indices for p in parts])
        counts = np.concatenate([np.diff(p.indptr) for p in parts])
        indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        space = sorted(set().union(*[p.label_space for p in parts]))
        case_index = np.concatenate([p.case_index for p in parts])
        return Dataset(labels, indptr, indices, vocab_size, space, case_index)

    def to_dense(self):
        x = np.zeros((len(self), self.vocab_size))
        rows = np.repeat(np.arange(len(self)), np.diff(self.indptr))
        x[rows, self.indices] = 1.0
        return x

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.vocab_size == other.vocab_size
            and self.label_space == other.label_space
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.case_index, other.case_index)
        )

    __hash__ = None


def simulate_dataset(kb, label_set, cases_per_disease, master_seed, table=None,
                     start_index=0) -> Dataset:
    """Simulate a fixed number of cases for every disease in ``label_set``.

    ``cases_per_disease`` is an int or a ``{disease_id: count}`` mapping.
    Cases of disease ``d`` use indices ``start_index .. start_index + n - 1``.
    """
    label_set = sorted(int(d) for d in label_set)
    cases = []
    index = []
    for d in label_set:
        n = cases_per_disease[d] if isinstance(cases_per_disease, dict) else cases_per_disease
        if int(n) == 0:
            continue
        s = _sampler(kb, d, table, MIN_SYMPTOMS)
        for i in range(start_index, start_index + int(n)):
            try:
                cases.append(s.sample(case_rng(master_seed, d, i), MIN_SYMPTOMS,
                                      MAX_SYMPTOMS, MAX_ATTEMPTS))
            except SimulationError as exc:
                raise SimulationError(d, f"case {i}: {exc}") from exc
            index.append(i)
    return Dataset.from_cases(cases, kb.n_findings, label_set, index)


def header_path(path):
    path = Path(path)
    return path.with_name(path.name.split(".")[0] + ".header.json")


def save_dataset(ds: Dataset, path, kb_hash=None, seed=None, extra=None):
    path = Path(path)
    lines = []
    for i in range(len(ds)):
        a, b = ds.indptr[i], ds.indptr[i + 1]
        lines.append(json.dumps(
            {"d": int(ds.labels[i]), "x": ds.indices[a:b].tolist(), "i": int(ds.case_index[i])},
            separators=(",", ":"),
        ))
    path.write_text("".join(line + "\n" for line in lines))
    header = {
        "vocab_size": ds.vocab_size,
        "label_space": list(ds.label_space),
        "kb_hash": kb_hash,
        "seed": seed,
        "n_cases": len(ds),
    }
    if extra:
        header.update(extra)
    header_path(path).write_text(json.dumps(header, indent=1, sort_keys=True) + "\n")


def load_dataset(path, kb_hash=None):
    path = Path(path)
    header = json.loads(header_path(path).read_text())
    if kb_hash is not None and header.get("kb_hash") not in (None, kb_hash):
        raise DatasetError(f"{path}: built from a different knowledge base")
    cases, index = [], []
    with path.open() as fh:
        for n, line in enumerate(fh):
            if not line.strip():
                continue
            row = json.loads(line)
            cases.append(ClinicalCase(int(row["d"]), tuple(int(f) for f in row["x"])))
            index.append(int(row.get("i", n)))
    return Dataset.from_cases(cases, header["vocab_size"], header["label_space"], index), header
