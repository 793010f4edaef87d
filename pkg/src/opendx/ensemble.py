"""Ensembles of per-site expert models: naive max-confidence and a learned mixture of experts."""
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _io, _kernels
from .casesim import Dataset
from .numerics import softmax
from .openset import (
    BG,
    CE,
    EOS,
    EXTRA_TARGET,
    LOSS_MODES,
    NOTA_ID,
    MlpModel,
    TrainConfig,
    _batches,
    _dlogits,
    batch_losses,
    fit,
    forward,
    glorot,
    predict_logits,
    predict_proba,
)

NAIVE_COMBINATIONS = ("CE", "BG", "EOS")
LEARNED_COMBINATIONS = ("CE+CE", "BG+CE", "EOS+CE", "EOS+BG", "EOS+EOS")


class EnsembleError(ValueError):
    pass


def parse_combination(name):
    """``"EOS+BG"`` -> ("EOS", "BG"); ``"BG"`` -> ("BG", None) for naive."""
    if name in NAIVE_COMBINATIONS:
        return name, None
    if name in LEARNED_COMBINATIONS:
        a, b = name.split("+")
        return a, b
    raise EnsembleError(f"unknown ensemble combination {name!r}")


@dataclass
class ExpertSet:
    experts: list
    l_select: tuple
    site_plan: object = field(default=None, repr=False)

    def __post_init__(self):
        self.l_select = tuple(sorted(int(c) for c in self.l_select))
        if not self.experts:
            raise EnsembleError("an ensemble needs at least one expert")
        dims = {e.n_features for e in self.experts}
        if len(dims) != 1:
            raise EnsembleError(f"experts disagree on vocabulary size: {sorted(dims)}")
        covered = set()
        for e in self.experts:
            covered.update(e.foreground_ids)
        missing = set(self.l_select) - covered
        if missing:
            raise EnsembleError(f"class {min(missing)} is not covered by any expert")

    @property
    def n_features(self):
        return self.experts[0].n_features

    def column(self):
        return {c: i for i, c in enumerate(self.l_select)}

    def hashes(self):
        return [e.param_hash() for e in self.experts]


# --------------------------------------------------------------------------
# naive max-confidence fusion
# --------------------------------------------------------------------------


@dataclass
class FusedScore:
    confidences: np.ndarray  # over l_select
    nota_score: float
    l_select: tuple = field(repr=False, default=())

    def decide(self, theta):
        k = int(np.argmax(self.confidences))
        conf = float(self.confidences[k])
        if self.nota_score > conf or conf < theta:
            return None
        return self.l_select[k]


def _fuse(expert_set, probs_per_expert):
    col = expert_set.column()
    n = probs_per_expert[0].shape[0]
    fused = np.zeros((n, len(expert_set.l_select)))
    bg = []
    for e, p in zip(expert_set.experts, probs_per_expert):
        for k, c in enumerate(e.class_ids):
            if c in col:
                j = col[c]
                np.maximum(fused[:, j], p[:, k], out=fused[:, j])
        if e.loss_mode == BG:
            bg.append(p[:, e.bg_index])
    nota = np.mean(bg, axis=0) if bg else np.zeros(n)
    return fused, nota


def naive_predict(expert_set: ExpertSet, x) -> FusedScore:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != expert_set.n_features:
        raise EnsembleError("input dimension does not match the experts")
    probs = [forward(e, x[None, :]).probs for e in expert_set.experts]
    fused, nota = _fuse(expert_set, probs)
    return FusedScore(fused[0], float(nota[0]), expert_set.l_select)


def naive_scores(expert_set: ExpertSet, ds: Dataset):
    """Fused class confidences (n x |l_select|) and nota scores (n)."""
    return _fuse(expert_set, [predict_proba(e, ds) for e in expert_set.experts])


# --------------------------------------------------------------------------
# learned mixture of experts
# --------------------------------------------------------------------------


@dataclass
class MoeModel:
    gate_w: np.ndarray  # D x E
    gate_b: np.ndarray  # E
    out_w: np.ndarray  # E x C_out
    out_b: np.ndarray  # C_out
    loss_mode: str
    class_ids: tuple  # l_select, plus NOTA_ID last for a BG head
    experts: list = field(repr=False)

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise EnsembleError(f"unknown head loss mode {self.loss_mode!r}")
        self.class_ids = tuple(int(c) for c in self.class_ids)
        e = sum(x.n_outputs for x in self.experts)
        if self.gate_w.shape[1] != e or self.out_w.shape[0] != e:
            raise EnsembleError("gate/output widths do not match the concatenated expert logits")
        if self.out_w.shape[1] != len(self.class_ids):
            raise EnsembleError("output width does not match class_ids")

    @property
    def n_outputs(self):
        return self.out_w.shape[1]

    @property
    def bg_index(self):
        return self.n_outputs - 1 if self.loss_mode == BG else None

    def params(self):
        return {"gate_w": self.gate_w, "gate_b": self.gate_b, "out_w": self.out_w,
                "out_b": self.out_b}

    def copy(self):
        return MoeModel(self.gate_w.copy(), self.gate_b.copy(), self.out_w.copy(),
                        self.out_b.copy(), self.loss_mode, self.class_ids, self.experts)

    def to_dict(self):
        return {k: _io.encode_array(v) for k, v in self.params().items()} | {
            "loss_mode": self.loss_mode,
            "class_ids": list(self.class_ids),
        }

    @classmethod
    def from_dict(cls, doc, experts):
        return cls(_io.decode_array(doc["gate_w"]), _io.decode_array(doc["gate_b"]),
                   _io.decode_array(doc["out_w"]), _io.decode_array(doc["out_b"]),
                   doc["loss_mode"], doc["class_ids"], list(experts))


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def class_map_matrix(experts, class_ids):
    """E x C_out 0/1 matrix routing each expert logit to its ensemble class.

    Expert background logits route to the ensemble background output when
    there is one; expert-local extra classes route nowhere.
    """
    col = {c: j for j, c in enumerate(class_ids)}
    rows = []
    for e in experts:
        for c in e.class_ids:
            r = np.zeros(len(class_ids))
            if c in col:
                r[col[c]] = 1.0
            rows.append(r)
    return np.array(rows).reshape(-1, len(class_ids))


def init_moe(expert_set: ExpertSet, head_loss_mode, seed=0) -> MoeModel:
    """Gate: Glorot weights, zero bias (g = 0.5).  Head: class routing matrix
    plus small Glorot noise, so training starts near a logit-summing ensemble."""
    class_ids = list(expert_set.l_select) + ([NOTA_ID] if head_loss_mode == BG else [])
    experts = list(expert_set.experts)
    e = sum(x.n_outputs for x in experts)
    rng = np.random.default_rng(seed)
    gate_w = glorot(rng, expert_set.n_features, e)
    out_w = class_map_matrix(experts, class_ids) + 0.1 * glorot(rng, e, len(class_ids))
    return MoeModel(gate_w, np.zeros(e), out_w, np.zeros(len(class_ids)), head_loss_mode,
                    class_ids, experts)


def expert_logits(experts, ds: Dataset):
    return np.hstack([predict_logits(e, ds) for e in experts])


@dataclass
class MoeForward:
    gate_pre: np.ndarray
    gate: np.ndarray
    z: np.ndarray
    logits: np.ndarray
    probs: np.ndarray


def _moe_head(moe, gate_pre, z):
    g = sigmoid(gate_pre)
    logits = (g * z) @ moe.out_w + moe.out_b
    return MoeForward(gate_pre, g, z, logits, softmax(logits))


def moe_forward(moe: MoeModel, x):
    """Dense input (length D or n x D): returns (logits, probs)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    z = np.hstack([forward(e, xb).logits for e in moe.experts])
    fw = _moe_head(moe, xb @ moe.gate_w + moe.gate_b, z)
    if single:
        return fw.logits[0], fw.probs[0]
    return fw.logits, fw.probs


def moe_predict_proba(moe: MoeModel, ds: Dataset, z=None):
    if z is None:
        z = expert_logits(moe.experts, ds)
    pre = _kernels.csr_affine(ds.indptr, ds.indices, moe.gate_w, moe.gate_b)
    return _moe_head(moe, pre, z).probs


def _moe_targets(moe, labels):
    col = {c: j for j, c in enumerate(moe.class_ids) if c != NOTA_ID}
    out = np.empty(len(labels), dtype=np.int64)
    for i, lab in enumerate(np.asarray(labels).tolist()):
        if lab in col:
            out[i] = col[lab]
        elif moe.loss_mode == BG:
            out[i] = moe.bg_index
        elif moe.loss_mode == EOS:
            out[i] = EXTRA_TARGET
        else:
            raise EnsembleError(f"label {lab} outside l_select for a CE head")
    return out


def moe_loss_and_grads(moe, indptr, indices, z, targets):
    fw = _moe_head(moe, _kernels.csr_affine(indptr, indices, moe.gate_w, moe.gate_b), z)
    n = len(targets)
    loss = float(batch_losses(fw.logits, targets).mean())
    d = _dlogits(fw.probs, targets) / n
    s = fw.gate * fw.z
    ds_ = d @ moe.out_w.T
    dpre = ds_ * fw.z * fw.gate * (1.0 - fw.gate)
    grads = {
        "gate_w": _kernels.csr_grad(indptr, indices, dpre, moe.gate_w.shape[0]),
        "gate_b": dpre.sum(axis=0),
        "out_w": s.T @ d,
        "out_b": d.sum(axis=0),
    }
    return loss, grads


def split_heldout(ds: Dataset, val_frac=0.2, seed=0):
    """Per-label split of the pooled heldout set into (train, val)."""
    tr, va = [], []
    for d in ds.label_space:
        rows = np.flatnonzero(ds.labels == d)
        rows = rows[np.random.default_rng([int(seed), int(d), 2]).permutation(rows.size)]
        n_val = int(round(val_frac * rows.size))
        if rows.size > 1:
            n_val = min(max(n_val, 1), rows.size - 1)
        else:
            n_val = 0
        va.append(rows[:n_val])
        tr.append(rows[n_val:])
    return ds.subset(np.sort(np.concatenate(tr))), ds.subset(np.sort(np.concatenate(va)))


def train_moe(expert_set: ExpertSet, pooled_heldout: Dataset, head_loss_mode,
              config: TrainConfig, val_frac=0.2):
    """Train gate and head on the pooled heldout set; experts stay frozen.

    Returns ``(moe, history)``.  A CE head sees only l_select cases; BG and
    EOS heads need extra-condition cases in the pool.
    """
    select = set(expert_set.l_select)
    if head_loss_mode == CE:
        pooled_heldout = pooled_heldout.with_labels(
            [d for d in pooled_heldout.label_space if d in select])
    elif not any(d not in select for d in pooled_heldout.labels.tolist()):
        raise EnsembleError(f"a {head_loss_mode} head needs extra-condition cases in the heldout pool")
    if len(pooled_heldout) == 0:
        raise EnsembleError("empty heldout pool")
    before = expert_set.hashes()
    moe = init_moe(expert_set, head_loss_mode, seed=config.seed)
    tr, va = split_heldout(pooled_heldout, val_frac, config.seed)
    z_tr = expert_logits(moe.experts, tr)
    z_va = expert_logits(moe.experts, va) if len(va) else None
    t_tr = _moe_targets(moe, tr.labels)
    t_va = _moe_targets(moe, va.labels) if len(va) else None
    params = moe.params()
    def grad_fn(rows):
        _, indptr, indices = next(_batches(tr, rows, rows.size))
        return moe_loss_and_grads(moe, indptr, indices, z_tr[rows], t_tr[rows])

    def val_fn():
        ds, z, t = (va, z_va, t_va) if t_va is not None else (tr, z_tr, t_tr)
        pre = _kernels.csr_affine(ds.indptr, ds.indices, moe.gate_w, moe.gate_b)
        return float(batch_losses(_moe_head(moe, pre, z).logits, t).mean())

    best, history = fit(params, grad_fn, val_fn, len(tr), config, moe.copy)
    if expert_set.hashes() != before:  # pragma: no cover - guards the frozen-expert contract
        raise EnsembleError("expert parameters changed during ensemble training")
    return best, history


# --------------------------------------------------------------------------
# uniform scoring for evaluation
# --------------------------------------------------------------------------


@dataclass
class EvalScores:
    confidence: np.ndarray  # 0 where the decision was NOTA
    predicted: np.ndarray  # disease id, -1 for NOTA
    correct: np.ndarray  # predicted == true label
    class_probs: np.ndarray  # n x |l_select|, for recall@k
    output_probs: np.ndarray  # n x C distributions, for entropy histograms
    l_select: tuple


def _from_outputs(probs, l_select, class_ids, bg_index, labels):
    fg_cols = [j for j, c in enumerate(class_ids) if c != NOTA_ID]
    fg_ids = np.array([class_ids[j] for j in fg_cols])
    fg = probs[:, fg_cols]
    k = np.argmax(fg, axis=1)
    conf = fg[np.arange(len(k)), k]
    pred = fg_ids[k] if len(k) else np.zeros(0, np.int64)
    if bg_index is not None:
        nota = probs[:, bg_index] > conf
        conf = np.where(nota, 0.0, conf)
        pred = np.where(nota, -1, pred)
    col = {c: j for j, c in enumerate(fg_ids.tolist())}
    class_probs = np.zeros((probs.shape[0], len(l_select)))
    for i, c in enumerate(l_select):
        if c in col:
            class_probs[:, i] = fg[:, col[c]]
    return EvalScores(conf, pred, pred == labels, class_probs, probs, tuple(l_select))


def ensemble_scores_for_eval(scorer, ds: Dataset, l_select=None) -> EvalScores:
    """Confidence / prediction / correctness per case for an MlpModel,
    ExpertSet (naive fusion) or MoeModel."""
    labels = ds.labels
    if isinstance(scorer, MlpModel):
        l_select = scorer.foreground_ids if l_select is None else l_select
        return _from_outputs(predict_proba(scorer, ds), l_select, scorer.class_ids,
                             scorer.bg_index, labels)
    if isinstance(scorer, MoeModel):
        l_select = [c for c in scorer.class_ids if c != NOTA_ID] if l_select is None else l_select
        return _from_outputs(moe_predict_proba(scorer, ds), l_select, scorer.class_ids,
                             scorer.bg_index, labels)
    if isinstance(scorer, ExpertSet):
        fused, nota = naive_scores(scorer, ds)
        ids = np.array(scorer.l_select)
        k = np.argmax(fused, axis=1)
        conf = fused[np.arange(len(k)), k]
        pred = ids[k] if len(k) else np.zeros(0, np.int64)
        is_nota = nota > conf
        conf = np.where(is_nota, 0.0, conf)
        pred = np.where(is_nota, -1, pred)
        # fused scores are not a distribution; normalise with the nota mass
        full = np.hstack([fused, nota[:, None]])
        full = full / np.maximum(full.sum(axis=1, keepdims=True), 1e-300)
        return EvalScores(conf, pred, pred == labels, fused, full, scorer.l_select)
    raise EnsembleError(f"cannot score a {type(scorer).__name__}")


def triples(scores: EvalScores):
    """(max confidence, predicted class or None, is_correct) per case."""
    return [
        (float(c), None if p < 0 else int(p), bool(ok))
        for c, p, ok in zip(scores.confidence, scores.predicted, scores.correct)
    ]


# --------------------------------------------------------------------------
# ensemble files
# --------------------------------------------------------------------------

ENSEMBLE_SCHEMA_VERSION = 1


def save_ensemble(path, combination, expert_paths, expert_set: ExpertSet, moe=None, **provenance):
    """Write a JSON manifest; experts are referenced by path and content hash."""
    path = Path(path)
    doc = {
        "schema_version": ENSEMBLE_SCHEMA_VERSION,
        "kind": "naive" if moe is None else "learned",
        "combination": combination,
        "l_select": list(expert_set.l_select),
        "experts": [
            {"path": _rel(p, path.parent), "sha256": _io.file_hash(p), "param_hash": e.param_hash()}
            for p, e in zip(expert_paths, expert_set.experts)
        ],
    }
    if moe is not None:
        doc["moe"] = moe.to_dict()
    doc.update(provenance)
    _io.write_json(path, doc)


def _rel(p, base):
    return os.path.relpath(Path(p).resolve(), Path(base).resolve())


def load_ensemble(path):
    """Returns ``(scorer, manifest)``: an ExpertSet (naive) or MoeModel (learned).

    Raises EnsembleError when an expert file no longer matches its recorded hash.
    """
    path = Path(path)
    doc = _io.read_json(path)
    if doc.get("schema_version") != ENSEMBLE_SCHEMA_VERSION:
        raise EnsembleError(f"{path}: unsupported ensemble schema_version {doc.get('schema_version')!r}")
    experts = []
    for ref in doc["experts"]:
        p = Path(ref["path"])
        if not p.is_absolute():
            p = path.parent / p
        if not p.exists():
            raise EnsembleError(f"missing expert file {p}")
        if _io.file_hash(p) != ref["sha256"]:
            raise EnsembleError(f"expert file {p} changed since the ensemble was built")
        experts.append(MlpModel.from_dict(_io.read_json(p)))
    es = ExpertSet(experts, doc["l_select"])
    if doc["kind"] == "naive":
        return es, doc
    return MoeModel.from_dict(doc["moe"], experts), doc
