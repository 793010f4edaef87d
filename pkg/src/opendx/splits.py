"""Label partitions (select / unknown / extra), Task 1 datasets and Task 2 site plans."""
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .casesim import Dataset, simulate_dataset
from .numerics import sym_eigen

SCHEMA_VERSION = 1


class SplitError(ValueError):
    pass


class UnknownSelectionError(SplitError):
    def __init__(self, message, partial):
        super().__init__(message)
        self.partial = list(partial)


# --------------------------------------------------------------------------
# PCA nearest-neighbour unknowns
# --------------------------------------------------------------------------


def mean_onehot_profiles(kb, cases: Dataset):
    """Row ``d`` is the average binary finding vector over disease ``d``'s cases."""
    n, dim = kb.n_diseases, kb.n_findings
    counts = np.bincount(cases.labels, minlength=n)[:n]
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise SplitError(f"disease {int(missing[0])} has no cases to profile")
    sums = np.zeros((n, dim))
    rows = np.repeat(cases.labels, np.diff(cases.indptr))
    np.add.at(sums, (rows, cases.indices), 1.0)
    return sums / counts[:, None]


@dataclass
class PcaResult:
    reduced: np.ndarray  # N x k
    components: np.ndarray  # D x k, orthonormal columns
    variance_explained: float
    eigenvalues: np.ndarray  # full non-negative spectrum, descending


def pca_reduce(profiles, variance_target=0.9, max_components=500) -> PcaResult:
    x = np.asarray(profiles, dtype=np.float64)
    n, dim = x.shape
    if n < 2:
        raise SplitError("PCA needs at least two rows")
    if not 0.0 < variance_target <= 1.0:
        raise SplitError("variance_target must lie in (0, 1]")
    xc = x - x.mean(axis=0)
    if n < dim:
        # Gram trick: same non-zero spectrum as the covariance, N x N
        evals, u = sym_eigen(xc @ xc.T)
    else:
        evals, vecs = sym_eigen(xc.T @ xc)
    evals = np.clip(evals, 0.0, None)
    total = evals.sum()
    if total <= 0.0:
        raise SplitError("profiles have zero total variance")
    cum = np.cumsum(evals) / total
    k = int(np.searchsorted(cum, variance_target - 1e-12) + 1)
    k = max(1, min(k, max_components, int(np.count_nonzero(evals > 1e-12 * evals[0]))))
    if n < dim:
        comps = xc.T @ u[:, :k] / np.sqrt(evals[:k])
    else:
        comps = vecs[:, :k]
    return PcaResult(xc @ comps, comps, float(cum[k - 1]), evals)


def select_unknowns(reduced, l_select, candidates):
    """Greedy unique nearest neighbour, select ids visited in ascending order.

    ``reduced`` rows are indexed by disease id.  Ties go to the lower
    candidate id.
    """
    sel = sorted(int(d) for d in l_select)
    pool = sorted(int(d) for d in candidates)
    if set(sel) & set(pool):
        raise SplitError("candidates overlap l_select")
    x = np.asarray(reduced, dtype=np.float64)
    pool_arr = np.array(pool, dtype=np.int64)
    alive = np.ones(pool_arr.size, dtype=bool)
    chosen = []
    for d in sel:
        if not alive.any():
            raise UnknownSelectionError(
                f"candidate pool exhausted after {len(chosen)} of {len(sel)} selections", chosen
            )
        dist = np.sum((x[pool_arr] - x[d]) ** 2, axis=1)
        dist[~alive] = np.inf
        j = int(np.argmin(dist))  # first minimum = lowest id, pool is sorted
        chosen.append(int(pool_arr[j]))
        alive[j] = False
    return chosen


def sample_extras(pool, n, rng):
    pool = sorted(int(d) for d in pool)
    if n > len(pool):
        raise SplitError(f"cannot draw {n} extras from a pool of {len(pool)}")
    if n == 0:
        return ()
    return tuple(sorted(int(d) for d in rng.choice(pool, size=n, replace=False)))


@dataclass
class LabelSplit:
    l_select: tuple
    l_unknown: tuple
    l_extra: tuple
    pca_components_retained: int = 0
    variance_explained: float = 0.0
    variance_target: float = 0.0

    def __post_init__(self):
        self.l_select = tuple(sorted(int(d) for d in self.l_select))
        self.l_unknown = tuple(sorted(int(d) for d in self.l_unknown))
        self.l_extra = tuple(sorted(int(d) for d in self.l_extra))

    def violations(self):
        out = []
        s, u, e = set(self.l_select), set(self.l_unknown), set(self.l_extra)
        if s & u:
            out.append("l_select and l_unknown overlap")
        if s & e:
            out.append("l_select and l_extra overlap")
        if u & e:
            out.append("l_unknown and l_extra overlap")
        return out

    def with_extras(self, l_extra):
        return LabelSplit(self.l_select, self.l_unknown, l_extra, self.pca_components_retained,
                          self.variance_explained, self.variance_target)

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "l_select": list(self.l_select),
            "l_unknown": list(self.l_unknown),
            "l_extra": list(self.l_extra),
            "pca_components_retained": self.pca_components_retained,
            "variance_explained": self.variance_explained,
            "variance_target": self.variance_target,
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(doc["l_select"], doc["l_unknown"], doc["l_extra"],
                   int(doc.get("pca_components_retained", 0)),
                   float(doc.get("variance_explained", 0.0)),
                   float(doc.get("variance_target", 0.0)))


def build_label_split(kb, profile_cases, n_extra=None, variance_target=0.9,
                      max_components=500, seed=0, l_select=None) -> LabelSplit:
    """Select = very-common diseases, unknown = their PCA nearest neighbours,
    extra = uniform sample of what remains."""
    if l_select is None:
        l_select = kb.prevalence_ids("very_common")
    l_select = sorted(int(d) for d in l_select)
    pca = pca_reduce(mean_onehot_profiles(kb, profile_cases), variance_target, max_components)
    candidates = sorted(set(range(kb.n_diseases)) - set(l_select))
    l_unknown = select_unknowns(pca.reduced, l_select, candidates)
    remaining = sorted(set(candidates) - set(l_unknown))
    if n_extra is None:
        n_extra = len(l_select)
    l_extra = sample_extras(remaining, n_extra, np.random.default_rng(seed))
    return LabelSplit(l_select, l_unknown, l_extra, pca.components.shape[1],
                      pca.variance_explained, variance_target)


def resample_extras(kb, split: LabelSplit, seed, n_extra=None):
    remaining = sorted(set(range(kb.n_diseases)) - set(split.l_select) - set(split.l_unknown))
    n = len(split.l_extra) if n_extra is None else n_extra
    return split.with_extras(sample_extras(remaining, n, np.random.default_rng(seed)))


# --------------------------------------------------------------------------
# Task 1 datasets
# --------------------------------------------------------------------------


@dataclass
class SplitDatasets:
    train_select: Dataset
    val_select: Dataset
    test_select: Dataset
    extra_train: Dataset
    test_unknown: Dataset

    def partitions(self):
        return {
            "train_select": self.train_select,
            "val_select": self.val_select,
            "test_select": self.test_select,
            "extra_train": self.extra_train,
            "test_unknown": self.test_unknown,
        }


def _stratified_rows(ds: Dataset, test_frac, val_frac, seed):
    """Per-disease shuffled split of row indices into (train, val, test)."""
    train, val, test = [], [], []
    for d in ds.label_space:
        rows = np.flatnonzero(ds.labels == d)
        rng = np.random.default_rng([int(seed), int(d), 1])
        rows = rows[rng.permutation(rows.size)]
        n_test = int(round(test_frac * rows.size))
        rest = rows[n_test:]
        n_val = int(round(val_frac * rest.size))
        test.append(rows[:n_test])
        val.append(rest[:n_val])
        train.append(rest[n_val:])
    cat = lambda parts: np.sort(np.concatenate(parts)) if parts else np.zeros(0, np.int64)
    return cat(train), cat(val), cat(test)


def build_task1_splits(kb, split: LabelSplit, cases_per_select=1000, cases_per_extra=100,
                       cases_per_unknown=1000, test_frac=0.2, val_frac=0.1,
                       master_seed=0) -> SplitDatasets:
    if not 0.0 <= test_frac < 1.0:
        raise SplitError("test_frac must lie in [0, 1); 1.0 leaves no training data")
    if not 0.0 <= val_frac < 1.0:
        raise SplitError("val_frac must lie in [0, 1)")
    bad = split.violations()
    if bad:
        raise SplitError("; ".join(bad))
    select = simulate_dataset(kb, split.l_select, cases_per_select, master_seed)
    tr, va, te = _stratified_rows(select, test_frac, val_frac, master_seed)
    if tr.size == 0:
        raise SplitError("split leaves an empty training set")
    return SplitDatasets(
        train_select=select.subset(tr),
        val_select=select.subset(va),
        test_select=select.subset(te),
        extra_train=simulate_dataset(kb, split.l_extra, cases_per_extra, master_seed),
        test_unknown=simulate_dataset(kb, split.l_unknown, cases_per_unknown, master_seed),
    )


# --------------------------------------------------------------------------
# Task 2 site plans
# --------------------------------------------------------------------------


@dataclass
class Site:
    l_rel: tuple
    l_extra_local: tuple = ()

    def __post_init__(self):
        self.l_rel = tuple(sorted(int(d) for d in self.l_rel))
        self.l_extra_local = tuple(sorted(int(d) for d in self.l_extra_local))


@dataclass
class SitePlan:
    sites: list
    overlap_percent: float  # realised: % of l_select held by more than one site
    requested_overlap_percent: float = 0.0

    @property
    def l_select(self):
        return tuple(sorted(set().union(*[s.l_rel for s in self.sites])))

    def holders(self):
        """disease id -> sorted list of site indices holding it."""
        out = {}
        for i, s in enumerate(self.sites):
            for d in s.l_rel:
                out.setdefault(d, []).append(i)
        return out

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "overlap_percent": self.overlap_percent,
            "requested_overlap_percent": self.requested_overlap_percent,
            "sites": [
                {"l_rel": list(s.l_rel), "l_extra_local": list(s.l_extra_local)}
                for s in self.sites
            ],
        }

    @classmethod
    def from_dict(cls, doc):
        return cls([Site(s["l_rel"], s["l_extra_local"]) for s in doc["sites"]],
                   float(doc["overlap_percent"]), float(doc.get("requested_overlap_percent", 0)))


def measured_overlap_percent(sites, l_select):
    counts = {}
    for s in sites:
        for d in s.l_rel:
            counts[d] = counts.get(d, 0) + 1
    shared = sum(1 for d in l_select if counts.get(d, 0) > 1)
    return 100.0 * shared / max(len(l_select), 1)


def build_site_plan(l_select, remaining_pool, m_sites=4, overlap_percent=0,
                    extras_per_site=None, rng=None) -> SitePlan:
    """Spread ``l_select`` over ``m_sites``; ``overlap_percent`` of it sits at two sites.

    Every condition gets one home site (balanced random partition).  A random
    ``overlap_percent`` subset additionally gets a second, different site,
    always the currently least loaded one, so site sizes stay balanced.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    l_select = sorted(int(d) for d in l_select)
    if m_sites < 1:
        raise SplitError("m_sites must be >= 1")
    if not 0 <= overlap_percent <= 100:
        raise SplitError("overlap_percent must lie in [0, 100]")
    n = len(l_select)
    members = [set() for _ in range(m_sites)]
    order = rng.permutation(n)
    for pos, j in enumerate(order):
        members[pos % m_sites].add(l_select[j])
    if m_sites > 1:
        n_dup = int(round(overlap_percent / 100.0 * n))
        dup = rng.permutation(n)[:n_dup]
        for j in dup:
            d = l_select[j]
            loads = np.array([len(m) if d not in m else np.iinfo(np.int64).max
                              for m in members])
            tie_break = rng.permutation(m_sites)
            best = min(tie_break, key=lambda i: loads[i])
            members[int(best)].add(d)

    pool = sorted(int(d) for d in remaining_pool)
    if set(pool) & set(l_select):
        raise SplitError("extras pool overlaps l_select")
    if extras_per_site is None:
        extras_per_site = len(pool) // m_sites
    need = extras_per_site * m_sites
    if need > len(pool):
        raise SplitError(f"extras pool exhausted: need {need}, have {len(pool)}")
    drawn = rng.permutation(np.array(pool, dtype=np.int64))[:need] if pool else []
    sites = [
        Site(sorted(members[i]), [int(x) for x in drawn[i * extras_per_site:(i + 1) * extras_per_site]])
        for i in range(m_sites)
    ]
    return SitePlan(sites, measured_overlap_percent(sites, l_select), float(overlap_percent))


@dataclass
class SiteData:
    train: Dataset  # select cases of l_rel plus the site's extra cases
    val: Dataset
    l_rel: tuple
    l_extra_local: tuple


@dataclass
class Task2Datasets:
    sites: list  # list of SiteData
    heldout: Dataset  # small pooled set for the learned ensemble
    oracle_train: Dataset
    oracle_val: Dataset
    test_select: Dataset
    test_unknown: Dataset
    l_extra: tuple = field(default_factory=tuple)


def build_task2_splits(kb, split: LabelSplit, plan: SitePlan, task1: SplitDatasets,
                       heldout_per_select=10, heldout_per_extra=10, cases_per_select=1000,
                       cases_per_extra=100, master_seed=0) -> Task2Datasets:
    """Distribute Task 1 training data over sites without duplication.

    A condition held by several sites has its training (and validation) cases
    dealt round-robin between them, so the union over sites is exactly the
    Task 1 training data.  The heldout pool is freshly simulated with case
    indices past those used for training.
    """
    holders = plan.holders()
    if set(holders) != set(split.l_select):
        raise SplitError("site plan does not cover l_select exactly")

    def deal(ds):
        rows = [[] for _ in plan.sites]
        for d in split.l_select:
            idx = np.flatnonzero(ds.labels == d)
            hs = holders[d]
            for k, r in enumerate(idx):
                rows[hs[k % len(hs)]].append(r)
        return [np.array(sorted(r), dtype=np.int64) for r in rows]

    tr_rows, va_rows = deal(task1.train_select), deal(task1.val_select)
    sites = []
    for i, s in enumerate(plan.sites):
        extra = task1.extra_train.with_labels(s.l_extra_local)
        train = Dataset.concat([task1.train_select.subset(tr_rows[i], s.l_rel), extra])
        val = task1.val_select.subset(va_rows[i], s.l_rel)
        sites.append(SiteData(train, val, s.l_rel, s.l_extra_local))

    pooled_extra = sorted(set().union(*[s.l_extra_local for s in plan.sites]))
    heldout = Dataset.concat([
        simulate_dataset(kb, split.l_select, heldout_per_select, master_seed,
                         start_index=cases_per_select),
        simulate_dataset(kb, pooled_extra, heldout_per_extra, master_seed,
                         start_index=cases_per_extra),
    ], vocab_size=kb.n_findings)
    oracle_train = Dataset.concat([s.train for s in sites], vocab_size=kb.n_findings)
    oracle_val = Dataset.concat([s.val for s in sites], vocab_size=kb.n_findings)
    return Task2Datasets(sites, heldout, oracle_train, oracle_val, task1.test_select,
                         task1.test_unknown, tuple(pooled_extra))


def save_json(obj, path, **provenance):
    doc = obj.to_dict()
    doc.update(provenance)
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_label_split(path):
    doc = json.loads(Path(path).read_text())
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise SplitError(f"{path}: unsupported schema_version {doc.get('schema_version')!r}")
    return LabelSplit.from_dict(doc), doc


def load_site_plan(path):
    doc = json.loads(Path(path).read_text())
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise SplitError(f"{path}: unsupported schema_version {doc.get('schema_version')!r}")
    return SitePlan.from_dict(doc), doc
