"""Two-layer MLP diagnosis model with CE, background-class and entropic open-set losses."""
import copy
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import _io, _kernels
from .casesim import ClinicalCase, Dataset
from .numerics import log_softmax, softmax

CE, BG, EOS = "CE", "BG", "EOS"
LOSS_MODES = (CE, BG, EOS)
NOTA_ID = -1  # class id of the appended background output
EXTRA_TARGET = -1  # target index meaning "extra example, uniform target"
PROB_FLOOR = 1e-12
SCHEMA_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass
class MlpModel:
    w1: np.ndarray  # D x H
    b1: np.ndarray  # H
    w2: np.ndarray  # H x C, the logit layer has no bias
    loss_mode: str
    class_ids: tuple

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ModelError(f"unknown loss mode {self.loss_mode!r}")
        self.class_ids = tuple(int(c) for c in self.class_ids)
        if self.w2.shape[1] != len(self.class_ids):
            raise ModelError("w2 width does not match class_ids")
        if (self.loss_mode == BG) != (NOTA_ID in self.class_ids):
            raise ModelError("background output present iff loss_mode is BG")
        if self.loss_mode == BG and self.class_ids[-1] != NOTA_ID:
            raise ModelError("background output must be the last class")

    @property
    def n_features(self):
        return self.w1.shape[0]

    @property
    def hidden(self):
        return self.w1.shape[1]

    @property
    def n_outputs(self):
        return self.w2.shape[1]

    @property
    def bg_index(self):
        return self.n_outputs - 1 if self.loss_mode == BG else None

    @property
    def foreground_ids(self):
        return tuple(c for c in self.class_ids if c != NOTA_ID)

    def params(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2}

    def copy(self):
        return copy.deepcopy(self)

    def param_hash(self):
        return _io.arrays_hash(self.w1, self.b1, self.w2)

    def to_dict(self, **provenance):
        doc = {
            "schema_version": SCHEMA_VERSION,
            "loss_mode": self.loss_mode,
            "class_ids": list(self.class_ids),
            "H": self.hidden,
            "D": self.n_features,
            "w1": _io.encode_array(self.w1),
            "b1": _io.encode_array(self.b1),
            "w2": _io.encode_array(self.w2),
        }
        doc.update(provenance)
        return doc

    @classmethod
    def from_dict(cls, doc):
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise ModelError(f"unsupported model schema_version {doc.get('schema_version')!r}")
        m = cls(_io.decode_array(doc["w1"]), _io.decode_array(doc["b1"]),
                _io.decode_array(doc["w2"]), doc["loss_mode"], doc["class_ids"])
        if m.hidden != doc["H"] or m.n_features != doc["D"]:
            raise ModelError("model arrays disagree with recorded H / D")
        return m


def glorot(rng, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def init_model(n_features, class_ids, loss_mode, hidden=100, seed=0) -> MlpModel:
    """Glorot-uniform weights, zero hidden bias; BG appends a NOTA output."""
    class_ids = [int(c) for c in class_ids]
    if loss_mode == BG:
        class_ids = class_ids + [NOTA_ID]
    rng = np.random.default_rng(seed)
    c = len(class_ids)
    return MlpModel(glorot(rng, n_features, hidden), np.zeros(hidden),
                    glorot(rng, hidden, c), loss_mode, class_ids)


def encode(case: ClinicalCase, vocab_size):
    x = np.zeros(vocab_size)
    for f in case.present_findings:
        if not 0 <= f < vocab_size:
            raise ModelError(f"finding {f} outside vocabulary of size {vocab_size}")
        x[f] = 1.0
    return x


# --------------------------------------------------------------------------
# forward / losses / gradients
# --------------------------------------------------------------------------


@dataclass
class Forward:
    pre: np.ndarray
    hidden: np.ndarray
    logits: np.ndarray
    probs: np.ndarray


def _finish(model, pre):
    h = np.maximum(pre, 0.0)
    logits = h @ model.w2
    return Forward(pre, h, logits, softmax(logits))


def forward(model: MlpModel, x) -> Forward:
    """Dense input: a length-D vector or an n x D matrix."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.n_features:
        raise ModelError(f"input has {x.shape[-1]} features, model expects {model.n_features}")
    return _finish(model, x @ model.w1 + model.b1)


def forward_csr(model: MlpModel, indptr, indices) -> Forward:
    return _finish(model, _kernels.csr_affine(indptr, indices, model.w1, model.b1))


def loss_ce(probs, true_index):
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= true_index < probs.shape[-1]:
        raise ModelError(f"class index {true_index} out of range")
    return float(-np.log(max(probs[true_index], PROB_FLOOR)))


def loss_eos(probs, origin):
    """``origin`` is a class index for a select example or ``"extra"``."""
    probs = np.asarray(probs, dtype=np.float64)
    if origin == "extra" or origin == EXTRA_TARGET:
        return float(-np.mean(np.log(np.maximum(probs, PROB_FLOOR))))
    return loss_ce(probs, origin)


def batch_losses(logits, targets):
    """Per-example loss from logits; target ``EXTRA_TARGET`` is the uniform branch."""
    logp = log_softmax(logits)
    targets = np.asarray(targets)
    extra = targets == EXTRA_TARGET
    out = np.empty(targets.shape[0])
    known = ~extra
    out[known] = -logp[np.flatnonzero(known), targets[known]]
    out[extra] = -logp[extra].mean(axis=1)
    return out


def _dlogits(probs, targets):
    t = np.asarray(targets)
    d = probs.copy()
    extra = t == EXTRA_TARGET
    known = np.flatnonzero(~extra)
    d[known, t[known]] -= 1.0
    d[extra] -= 1.0 / probs.shape[1]
    return d


def _grads(model, fw, dlogits, backprop_w1):
    dw2 = fw.hidden.T @ dlogits
    dpre = (dlogits @ model.w2.T) * (fw.pre > 0)
    return {"w1": backprop_w1(dpre), "b1": dpre.sum(axis=0), "w2": dw2}


def loss_and_grads_csr(model, indptr, indices, targets):
    """Mean loss and its gradients over a CSR batch."""
    fw = forward_csr(model, indptr, indices)
    n = len(targets)
    loss = float(batch_losses(fw.logits, targets).mean())
    d = _dlogits(fw.probs, targets) / n
    return loss, _grads(model, fw, d,
                        lambda dp: _kernels.csr_grad(indptr, indices, dp, model.n_features))


def loss_and_grads(model, x, targets):
    """Dense-input counterpart of :func:`loss_and_grads_csr`."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    fw = forward(model, x)
    n = len(targets)
    loss = float(batch_losses(fw.logits, targets).mean())
    d = _dlogits(fw.probs, targets) / n
    return loss, _grads(model, fw, d, lambda dp: x.T @ dp)


def backward(model, x, target):
    """Gradients of one example's loss. ``target`` is a class index or EXTRA_TARGET."""
    if target == EXTRA_TARGET and model.loss_mode != EOS:
        raise ModelError("the uniform-target branch exists only for EOS models")
    return loss_and_grads(model, x, np.array([target]))[1]


# --------------------------------------------------------------------------
# optimisation
# --------------------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 128
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0

    def validate(self):
        for name in ("learning_rate", "epsilon", "batch_size", "max_epochs"):
            if getattr(self, name) <= 0:
                raise ModelError(f"TrainConfig.{name} must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ModelError("Adam betas must lie in [0, 1)")
        if not 0 <= self.patience <= self.max_epochs:
            raise ModelError("patience must lie in [0, max_epochs]")

    def to_dict(self):
        return asdict(self)


@dataclass
class OptState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params, state: OptState, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam, updating ``params`` (a name -> array dict) in place."""
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for k, g in grads.items():
        _kernels.adam_update(params[k], np.ascontiguousarray(g, dtype=np.float64),
                             state.m[k], state.v[k], lr, beta1, beta2, eps, c1, c2)
    return params, state


def targets_for(model: MlpModel, labels, extra_ids=None):
    """Map disease labels to output indices for ``model``'s loss mode.

    Labels outside ``class_ids`` are extra examples: the background index for
    BG, ``EXTRA_TARGET`` for EOS, an error for CE.  With ``extra_ids`` given,
    only those labels may be treated as extra.
    """
    index = {c: i for i, c in enumerate(model.class_ids) if c != NOTA_ID}
    extra = None if extra_ids is None else set(int(e) for e in extra_ids)
    out = np.empty(len(labels), dtype=np.int64)
    for i, lab in enumerate(np.asarray(labels).tolist()):
        if lab in index:
            out[i] = index[lab]
        elif model.loss_mode != CE and (extra is None or lab in extra):
            out[i] = model.bg_index if model.loss_mode == BG else EXTRA_TARGET
        else:
            raise ModelError(f"label {lab} outside class_ids for a {model.loss_mode} model")
    return out


def _batches(ds, order, size):
    for s in range(0, order.size, size):
        rows = order[s:s + size]
        counts = np.diff(ds.indptr)[rows]
        indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        starts = np.repeat(ds.indptr[rows], counts)
        offs = np.arange(int(indptr[-1])) - np.repeat(indptr[:-1], counts)
        yield rows, indptr, ds.indices[starts + offs]


def mean_loss(model, ds: Dataset, targets, batch_size=4096):
    if len(ds) == 0:
        return float("nan")
    total = 0.0
    for rows, indptr, indices in _batches(ds, np.arange(len(ds)), batch_size):
        fw = forward_csr(model, indptr, indices)
        total += batch_losses(fw.logits, targets[rows]).sum()
    return float(total / len(ds))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


def fit(params, grad_fn, val_fn, n_train, config: TrainConfig, snapshot):
    """Shared mini-batch Adam loop with early stopping on validation loss.

    ``grad_fn(rows) -> (loss, grads)``; ``val_fn() -> float``;
    ``snapshot()`` returns a copy of the current model.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    state = OptState.zeros_like(params)
    history = []
    best, best_loss, since = snapshot(), np.inf, 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n_train)
        tot = 0.0
        for s in range(0, n_train, config.batch_size):
            rows = order[s:s + config.batch_size]
            loss, grads = grad_fn(rows)
            tot += loss * rows.size
            adam_step(params, state, grads, config.learning_rate, config.beta1,
                      config.beta2, config.epsilon)
        val = val_fn()
        history.append(EpochRecord(epoch, tot / n_train, val))
        if val < best_loss:
            best, best_loss, since = snapshot(), val, 0
        else:
            since += 1
        if since >= config.patience:
            break
    return best, history


def train(model: MlpModel, train_set: Dataset, val_set: Dataset, config: TrainConfig,
          extra_ids=None):
    """Train a copy of ``model``; returns ``(best_model, history)``."""
    if len(train_set) == 0:
        raise ModelError("empty training set")
    if train_set.vocab_size != model.n_features:
        raise ModelError("training vocabulary does not match the model")
    model = model.copy()
    t_train = targets_for(model, train_set.labels, extra_ids)
    t_val = targets_for(model, val_set.labels, extra_ids) if len(val_set) else None
    params = model.params()

    def grad_fn(rows):
        _, indptr, indices = next(_batches(train_set, rows, rows.size))
        return loss_and_grads_csr(model, indptr, indices, t_train[rows])

    def val_fn():
        if t_val is None:
            return mean_loss(model, train_set, t_train)
        return mean_loss(model, val_set, t_val)

    return fit(params, grad_fn, val_fn, len(train_set), config, model.copy)


# --------------------------------------------------------------------------
# open-set prediction
# --------------------------------------------------------------------------


@dataclass
class Prediction:
    label: Optional[int]  # disease id, None for NOTA
    confidence: float  # max foreground probability
    probs: np.ndarray = field(repr=False)

    @property
    def is_nota(self):
        return self.label is None


def decide(probs, class_ids, theta, bg_index=None):
    """Thresholded argmax over foreground outputs; background argmax forces NOTA."""
    probs = np.asarray(probs)
    fg = probs if bg_index is None else np.delete(probs, bg_index)
    fg_ids = [c for c in class_ids if c != NOTA_ID]
    k = int(np.argmax(fg))
    conf = float(fg[k])
    if bg_index is not None and probs[bg_index] > conf:
        return None, conf
    if conf >= theta:
        return fg_ids[k], conf
    return None, conf


def predict_open_set(model: MlpModel, x, theta) -> Prediction:
    probs = forward(model, x).probs
    label, conf = decide(probs, model.class_ids, theta, model.bg_index)
    return Prediction(label, conf, probs)


def predict_proba(model: MlpModel, ds: Dataset, batch_size=4096):
    out = np.empty((len(ds), model.n_outputs))
    for rows, indptr, indices in _batches(ds, np.arange(len(ds)), batch_size):
        out[rows] = forward_csr(model, indptr, indices).probs
    return out


def predict_logits(model: MlpModel, ds: Dataset, batch_size=4096):
    out = np.empty((len(ds), model.n_outputs))
    for rows, indptr, indices in _batches(ds, np.arange(len(ds)), batch_size):
        out[rows] = forward_csr(model, indptr, indices).logits
    return out


def save_model(model: MlpModel, path, **provenance):
    _io.write_json(path, model.to_dict(**provenance))


def load_model(path) -> MlpModel:
    return MlpModel.from_dict(_io.read_json(path))
