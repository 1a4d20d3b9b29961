"""Adam, mini-batch training, 10-fold cross-validation and the cross-subject runs."""

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from mwcnn import model as M
from mwcnn.metrics import confusion, pool_counts

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    dropout_rate: float = 0.2
    seed: int = 0
    # samples per forward/backward call inside a batch; bounds memory only
    chunk_size: int = 16

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1 or self.chunk_size < 1:
            raise ValueError("batch_size and chunk_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state, config):
    """One Adam update of the arrays in ``params`` (modified in place and returned)."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and Adam moments must have the same length")
    b1, b2 = config.adam_beta1, config.adam_beta2
    state.t += 1
    bc1 = 1 - b1**state.t
    bc2 = 1 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    return params, state


# -- folds -------------------------------------------------------------------------------


@dataclass
class FoldPlan:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray


def _labels_of(data):
    return data.labels if hasattr(data, "labels") else np.asarray(data)


def _stratified_order(labels, rng):
    """Indices shuffled within class, then interleaved so every prefix is near-balanced."""
    keys = np.empty(len(labels))
    order = np.arange(len(labels))
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        keys[idx] = (np.arange(idx.size) + 0.5) / idx.size
    return order[np.lexsort((labels, keys))]


def make_folds(data, k=10, seed=0):
    """Stratified k-fold plan; repetition r tests on fold r and validates on fold r+1."""
    labels = _labels_of(data)
    n = len(labels)
    if k < 3:
        raise ValueError(f"k={k} leaves no training fold; need k >= 3")
    if n < k:
        raise ValueError(f"dataset of {n} samples is smaller than k={k}")
    rng = np.random.default_rng([seed, 0xF01D])
    fold_of = np.empty(n, dtype=np.int64)
    offset = 0
    # deal each class round-robin, continuing the fold counter across classes
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        fold_of[idx] = (offset + np.arange(idx.size)) % k
        offset += idx.size
    folds = [np.flatnonzero(fold_of == i) for i in range(k)]
    plans = []
    for r in range(k):
        val = (r + 1) % k
        train = np.sort(np.concatenate([folds[j] for j in range(k) if j not in (r, val)]))
        plans.append(FoldPlan(train, folds[val], folds[r]))
    return plans


# -- training -----------------------------------------------------------------------------


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    best_epoch: int = 0


def predict_labels(params, X, batch=64):
    labels = []
    for s in range(0, len(X), batch):
        probs, _ = M.forward(params, X[s : s + batch], mode="eval")
        labels.append(M.label_from_probs(probs))
    return np.concatenate(labels) if labels else np.empty(0, np.int64)


def _accuracy(params, X, y):
    return float(np.mean(predict_labels(params, X) == y))


def train_model(train, val, arch, config, repetition=0, params=None):
    """Train on ``train = (X, y)``; keep the epoch with best validation accuracy.

    Returns ``(best_params, history)``.
    """
    Xtr, ytr = train
    Xva, yva = val
    if len(Xtr) == 0 or len(Xva) == 0:
        raise ValueError("train and validation sets must be nonempty")
    if params is None:
        params = M.init_params(arch, seed=int(np.random.SeedSequence([config.seed, repetition]).generate_state(1)[0]))
    tensors = params.tensors()
    state = AdamState.zeros(tensors)
    history = TrainHistory()
    best, best_acc = params.copy(), -1.0
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, repetition, epoch])
        perm = rng.permutation(len(Xtr))
        loss_sum = 0.0
        for b, start in enumerate(range(0, len(perm), config.batch_size)):
            idx = perm[start : start + config.batch_size]
            grads, batch_loss = None, 0.0
            for c in range(0, len(idx), config.chunk_size):
                sub = idx[c : c + config.chunk_size]
                _, cache = M.forward(params, Xtr[sub], mode="train", rng=rng)
                g, loss = M.backward(params, cache, ytr[sub])
                batch_loss += loss
                grads = g if grads is None else [a + d for a, d in zip(grads, g)]
            if not np.isfinite(batch_loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}, batch {b + 1}")
            scale = params.dtype.type(1.0 / len(idx))
            adam_step(tensors, [g * scale for g in grads], state, config)
            loss_sum += batch_loss
        history.train_loss.append(loss_sum / len(perm))
        history.train_acc.append(_accuracy(params, Xtr, ytr))
        val_acc = _accuracy(params, Xva, yva)
        history.val_acc.append(val_acc)
        if val_acc > best_acc:
            best_acc, best = val_acc, params.copy()
            history.best_epoch = epoch + 1
        log.debug("rep %d epoch %d loss %.4f train %.3f val %.3f", repetition, epoch + 1,
                  history.train_loss[-1], history.train_acc[-1], val_acc)
    return best, history


@dataclass
class CvResult:
    counts: list  # per repetition
    pooled: object
    histories: list
    params: list
    plans: list


def run_cv(dataset, arch, config, k=10):
    """Train k models; pooled counts are the sum of every repetition's test counts."""
    X, y = dataset.arrays()
    plans = make_folds(y, k, config.seed)
    counts, histories, models = [], [], []
    for r, plan in enumerate(plans):
        params, history = train_model((X[plan.train], y[plan.train]),
                                      (X[plan.validation], y[plan.validation]), arch, config, repetition=r)
        counts.append(confusion(predict_labels(params, X[plan.test]), y[plan.test]))
        histories.append(history)
        models.append(params)
        log.info("repetition %d/%d: test accuracy %.4f", r + 1, k,
                 (counts[-1].tp + counts[-1].tn) / counts[-1].total)
    return CvResult(counts, pool_counts(counts), histories, models, plans)


# -- cross-subject -------------------------------------------------------------------------

REFERENCE_SUBJECT_SIZE = 475


def cross_subject_split(dataset, run, seed=0):
    """``(train, validation, test)`` index arrays for cross-subject run 1, 2 or 3."""
    if run not in (1, 2, 3):
        raise ValueError(f"run must be 1, 2 or 3, got {run}")
    labels = dataset.labels
    subjects = dataset.subjects
    rng = np.random.default_rng([seed, 0xC5, run])
    if run == 3:
        order = _stratified_order(labels, rng)
        n = len(order)
        n_train, n_val = int(round(0.4 * n)), int(round(0.1 * n))
        return (np.sort(order[:n_train]), np.sort(order[n_train : n_train + n_val]),
                np.sort(order[n_train + n_val :]))
    ids = sorted(set(subjects.tolist()))
    if len(ids) != 2:
        raise ValueError(f"runs 1 and 2 need exactly two subjects, found {ids}")
    train_subject, test_subject = (ids[0], ids[1]) if run == 1 else (ids[1], ids[0])
    own = np.flatnonzero(subjects == train_subject)
    if own.size < REFERENCE_SUBJECT_SIZE:
        warnings.warn(f"subject {train_subject} has {own.size} samples (< {REFERENCE_SUBJECT_SIZE}); "
                      "using an 80/20 train/validation split of what is available")
    order = own[_stratified_order(labels[own], rng)]
    n_train = int(round(0.8 * own.size))
    return np.sort(order[:n_train]), np.sort(order[n_train:]), np.flatnonzero(subjects == test_subject)


def run_cross_subject(dataset, arch, config, run):
    """Returns ``(counts, history, params)`` for one cross-subject run."""
    X, y = dataset.arrays()
    tr, va, te = cross_subject_split(dataset, run, config.seed)
    params, history = train_model((X[tr], y[tr]), (X[va], y[va]), arch, config, repetition=100 + run)
    return confusion(predict_labels(params, X[te]), y[te]), history, params
