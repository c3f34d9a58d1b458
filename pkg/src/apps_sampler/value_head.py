"""Learned value head: supervision collection, targets, loss and training.

The head is a one-hidden-layer tanh network written directly in numpy with
hand-derived gradients.  Targets and predictions pass through the same
groupwise transform (centre, clip, scale) that is applied when the head is
used as a selection potential.
"""

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import log_softmax, logsumexp
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .engine import run_apps
from .exceptions import ConfigurationError, InputError, TrainingError
from .potentials import RolloutPotential
from .validation import check_choice, check_positive

TARGET_MODES = ("decode-aligned", "standardized")
PARAM_NAMES = ("W1", "b1", "w2", "b2")
LOSS_TERMS = ("pointwise", "centered", "listwise", "pairwise", "top1")


@dataclass(frozen=True)
class TrainConfig:
    eta_distill: float = 0.4
    clip: float = 5.0
    batch_size: int = 512
    dropout: float = 0.10
    weight_decay: float = 5e-2
    ema_decay: float = 0.995
    max_epochs: int = 60
    patience: int = 12
    min_delta: float = 1e-3
    loss_weights: tuple = (1.0, 1.0, 1.0, 1.0, 1.0)
    learning_rate: float = 1e-2
    hidden: int = 64
    val_fraction: float = 0.2
    target_mode: str = "decode-aligned"

    def __post_init__(self):
        object.__setattr__(self, "loss_weights", tuple(float(w) for w in self.loss_weights))
        check_positive(self.eta_distill, "eta_distill")
        check_positive(self.clip, "clip")
        check_positive(self.batch_size, "batch_size", integer=True)
        check_positive(self.max_epochs, "max_epochs", integer=True)
        check_positive(self.patience, "patience", integer=True)
        check_positive(self.hidden, "hidden", integer=True)
        check_positive(self.learning_rate, "learning_rate", strict=False)
        check_positive(self.weight_decay, "weight_decay", strict=False)
        check_positive(self.min_delta, "min_delta", strict=False)
        if not 0 <= self.dropout < 1:
            raise ConfigurationError("dropout must lie in [0, 1)")
        if not 0 < self.ema_decay < 1:
            raise ConfigurationError("ema_decay must lie in (0, 1)")
        if not 0 < self.val_fraction < 1:
            raise ConfigurationError("val_fraction must lie in (0, 1)")
        if len(self.loss_weights) != 5 or min(self.loss_weights) < 0:
            raise ConfigurationError("loss_weights needs five non-negative entries")
        check_choice(self.target_mode, "target_mode", TARGET_MODES)

    def to_dict(self):
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# ----------------------------------------------------------------------------
# groupwise transform


def _group_index(groups):
    """Map arbitrary group labels to 0..G-1 in order of first appearance."""
    groups = np.asarray(groups)
    _, first, inv = np.unique(groups, return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first))
    return order[inv.ravel()], len(first)


def transform(values, groups=None, eta=0.4, clip=5.0, mode="decode-aligned"):
    """Centre within each group, clip to ``[-clip, clip]`` and scale by ``eta``.

    ``mode="standardized"`` also divides by the within-group standard
    deviation before clipping.
    """
    values = np.asarray(values, dtype=float)
    gidx, n_groups = _group_index(np.zeros(values.size, int) if groups is None else groups)
    counts = np.bincount(gidx, minlength=n_groups)
    mean = np.bincount(gidx, values, n_groups) / counts
    centred = values - mean[gidx]
    if mode == "standardized":
        var = np.bincount(gidx, centred**2, n_groups) / counts
        centred = centred / np.maximum(np.sqrt(var), 1e-8)[gidx]
    return eta * np.clip(centred, -clip, clip)


def effective_target(y, eta_distill=0.4, clip=5.0):
    """Decode-aligned target for one group of raw rollout log-potentials."""
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or y.size < 2:
        raise InputError("a group needs at least two candidates")
    return transform(y, None, eta_distill, clip)


# ----------------------------------------------------------------------------
# network


class ValueHead:
    """Feed-forward head ``d -> hidden (tanh) -> 1`` plus its decode settings."""

    def __init__(self, params, eta_distill=0.4, clip=5.0, target_mode="decode-aligned"):
        self.params = {k: np.asarray(params[k], dtype=float) for k in PARAM_NAMES}
        self.eta_distill = float(eta_distill)
        self.clip = float(clip)
        self.target_mode = target_mode
        for k, v in self.params.items():
            if not np.isfinite(v).all():
                raise InputError(f"parameter {k} is not finite")

    @property
    def n_features(self):
        return self.params["W1"].shape[0]

    @property
    def n_hidden(self):
        return self.params["W1"].shape[1]

    @classmethod
    def init(cls, n_features, hidden=64, seed=0, **kw):
        rng = np.random.default_rng(seed)
        params = {
            "W1": rng.normal(0.0, 1.0 / math.sqrt(n_features), (n_features, hidden)),
            "b1": np.zeros(hidden),
            "w2": rng.normal(0.0, 1.0 / math.sqrt(hidden), hidden),
            "b2": np.zeros(1),
        }
        return cls(params, **kw)

    @classmethod
    def zeros(cls, n_features, hidden=64, **kw):
        params = {"W1": np.zeros((n_features, hidden)), "b1": np.zeros(hidden), "w2": np.zeros(hidden), "b2": np.zeros(1)}
        return cls(params, **kw)

    def copy(self):
        return ValueHead({k: v.copy() for k, v in self.params.items()}, self.eta_distill, self.clip, self.target_mode)

    def _check(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise ConfigurationError(f"head expects {self.n_features} features, got {X.shape[1]}")
        return X

    def forward(self, X, params=None, dropout_mask=None):
        """Raw outputs and the cache needed by :meth:`backward`."""
        p = self.params if params is None else params
        X = self._check(X)
        a = np.tanh(X @ p["W1"] + p["b1"])
        ad = a if dropout_mask is None else a * dropout_mask
        out = ad @ p["w2"] + p["b2"][0]
        return out, (X, a, ad, dropout_mask)

    def backward(self, cache, grad_out, params=None):
        p = self.params if params is None else params
        X, a, ad, mask = cache
        grads = {"w2": ad.T @ grad_out, "b2": np.array([grad_out.sum()])}
        da = np.outer(grad_out, p["w2"])
        if mask is not None:
            da = da * mask
        dz = da * (1.0 - a**2)
        grads["W1"] = X.T @ dz
        grads["b1"] = dz.sum(axis=0)
        return grads

    def predict(self, X):
        return self.forward(X)[0]

    def decode(self, raw, groups=None):
        """Groupwise transform of raw outputs, as used for selection."""
        return transform(raw, groups, self.eta_distill, self.clip, self.target_mode)

    def to_dict(self):
        return {
            "n_features": self.n_features,
            "hidden": self.n_hidden,
            "eta_distill": self.eta_distill,
            "clip": self.clip,
            "target_mode": self.target_mode,
            "params": {k: v.tolist() for k, v in self.params.items()},
        }

    @classmethod
    def from_dict(cls, d):
        params = {k: np.asarray(v, dtype=float) for k, v in d["params"].items()}
        if params["W1"].shape != (d["n_features"], d["hidden"]):
            raise InputError("parameter shapes disagree with the header")
        return cls(params, d["eta_distill"], d["clip"], d.get("target_mode", "decode-aligned"))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# ----------------------------------------------------------------------------
# composite loss on padded groups


def _smooth_l1(x):
    ax = np.abs(x)
    return np.where(ax < 1, 0.5 * x * x, ax - 0.5), np.clip(x, -1.0, 1.0)


def _masked_mean(x, mask, n):
    return (x * mask).sum(axis=1, keepdims=True) / n


def pad_groups(values, gidx, n_groups):
    """Scatter flat ``values`` into an (n_groups, max_size) array plus mask."""
    counts = np.bincount(gidx, minlength=n_groups)
    width = int(counts.max())
    order = np.argsort(gidx, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    col = np.arange(gidx.size) - starts[gidx[order]]
    rows = gidx[order]
    out = np.zeros((n_groups, width))
    mask = np.zeros((n_groups, width), dtype=bool)
    out[rows, col] = np.asarray(values)[order]
    mask[rows, col] = True
    return out, mask, (rows, col, order)


def group_weights(target, mask):
    """Within-group spread plus winner/runner-up margin, normalised to mean 1."""
    n = mask.sum(axis=1)
    m = _masked_mean(target, mask, n[:, None])
    std = np.sqrt(_masked_mean((target - m) ** 2, mask, n[:, None]))[:, 0]
    srt = np.sort(np.where(mask, target, -np.inf), axis=1)
    margin = srt[:, -1] - srt[:, -2]
    w = std + margin
    total = w.sum()
    return np.ones_like(w) if total <= 0 else w * (w.size / total)


def composite_loss(pred, target, mask, weights=None, loss_weights=(1, 1, 1, 1, 1)):
    """Five-term groupwise loss on padded (G, m) arrays.

    Terms: smooth-L1 on values; smooth-L1 on group-centred values; softmax
    cross-entropy against the target softmax; soft-label logistic loss on
    ordered pairs, minus its value at the target (so it vanishes when
    ``pred == target``); cross-entropy on the target winner.

    Returns
    -------
    total : float
    terms : ndarray (5,)
        Weighted group averages of each unweighted term.
    grad : ndarray (G, m)
        Gradient of ``total`` with respect to ``pred`` (zero off-mask).
    """
    mask = np.asarray(mask, dtype=bool)
    fm = mask.astype(float)
    pred = np.where(mask, pred, 0.0)
    target = np.where(mask, target, 0.0)
    G = pred.shape[0]
    n = fm.sum(axis=1, keepdims=True)
    if weights is None:
        weights = group_weights(target, mask)
    gw = np.asarray(weights, dtype=float) / np.sum(weights)
    lam = np.asarray(loss_weights, dtype=float)
    terms = np.zeros((5, G))
    grads = np.zeros((5,) + pred.shape)

    v, dv = _smooth_l1(pred - target)
    terms[0] = (v * fm).sum(axis=1) / n[:, 0]
    grads[0] = dv * fm / n

    d = (pred - _masked_mean(pred, fm, n)) - (target - _masked_mean(target, fm, n))
    v, dv = _smooth_l1(d)
    terms[1] = (v * fm).sum(axis=1) / n[:, 0]
    g = dv * fm / n
    grads[1] = (g - _masked_mean(g, fm, n)) * fm

    neg = np.where(mask, 0.0, -np.inf)
    log_s = log_softmax(pred + neg, axis=1)
    log_t = log_softmax(target + neg, axis=1)
    s = np.exp(log_s)
    t = np.exp(log_t)
    terms[2] = -(t * np.where(mask, log_s, 0.0)).sum(axis=1)
    grads[2] = (s - t) * fm

    pairs = (target[:, :, None] > target[:, None, :]) & mask[:, :, None] & mask[:, None, :]
    n_pairs = pairs.sum(axis=(1, 2))
    dp = pred[:, :, None] - pred[:, None, :]
    dt = target[:, :, None] - target[:, None, :]
    pi = 1.0 / (1.0 + np.exp(-dt))
    # soft-label logistic loss minus its own minimum
    bce = pi * np.logaddexp(0.0, -dp) + (1 - pi) * np.logaddexp(0.0, dp)
    ent = pi * np.logaddexp(0.0, -dt) + (1 - pi) * np.logaddexp(0.0, dt)
    denom = np.maximum(n_pairs, 1)[:, None, None]
    terms[3] = np.where(pairs, bce - ent, 0.0).sum(axis=(1, 2)) / denom[:, 0, 0]
    gp = np.where(pairs, 1.0 / (1.0 + np.exp(-dp)) - pi, 0.0) / denom
    grads[3] = gp.sum(axis=2) - gp.sum(axis=1)

    win = np.argmax(np.where(mask, target, -np.inf), axis=1)
    terms[4] = -log_s[np.arange(G), win]
    onehot = np.zeros_like(pred)
    onehot[np.arange(G), win] = 1.0
    grads[4] = (s - onehot) * fm

    per_term = terms @ gw
    total = float(lam @ per_term)
    grad = np.tensordot(lam, grads, axes=1) * gw[:, None]
    return total, per_term, grad


def _transform_backward(raw_pad, mask, grad_pred, eta, clip, mode):
    # derivative of eta * clip(raw - mean) (optionally standardised) wrt raw
    fm = mask.astype(float)
    n = fm.sum(axis=1, keepdims=True)
    c = (raw_pad - _masked_mean(raw_pad, fm, n)) * fm
    if mode == "standardized":
        sd = np.maximum(np.sqrt(_masked_mean(c**2, fm, n)), 1e-8)
        z = c / sd
        gz = grad_pred * eta * (np.abs(z) < clip) * fm
        # d z_i / d c_k = (delta_ik - z_i z_k / n) / sd
        gc = (gz - z * _masked_mean(gz * z, fm, n)) / sd
    else:
        gc = grad_pred * eta * (np.abs(c) < clip) * fm
    return (gc - _masked_mean(gc, fm, n)) * fm


def _transform_padded(raw_pad, mask, eta, clip, mode):
    fm = mask.astype(float)
    n = fm.sum(axis=1, keepdims=True)
    c = (raw_pad - _masked_mean(raw_pad, fm, n)) * fm
    if mode == "standardized":
        c = c / np.maximum(np.sqrt(_masked_mean(c**2, fm, n)), 1e-8)
    return eta * np.clip(c, -clip, clip) * fm


def head_loss(head, X, target_pad, mask, scatter, loss_weights, params=None, dropout_mask=None, weights=None):
    """Loss of the head on a padded batch and its parameter gradients."""
    raw, cache = head.forward(X, params, dropout_mask)
    rows, col, order = scatter
    raw_pad = np.zeros(mask.shape)
    raw_pad[rows, col] = raw[order]
    pred = _transform_padded(raw_pad, mask, head.eta_distill, head.clip, head.target_mode)
    total, terms, g_pred = composite_loss(pred, target_pad, mask, weights, loss_weights)
    g_raw_pad = _transform_backward(raw_pad, mask, g_pred, head.eta_distill, head.clip, head.target_mode)
    g_raw = np.empty_like(raw)
    g_raw[order] = g_raw_pad[rows, col]
    return total, terms, head.backward(cache, g_raw, params)


# ----------------------------------------------------------------------------
# data


@dataclass
class SupervisionSet:
    """Boundary-level supervision: features, raw log-potential and group id per row."""

    features: np.ndarray
    log_psi: np.ndarray
    groups: np.ndarray
    particle_index: np.ndarray = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.log_psi = np.asarray(self.log_psi, dtype=float)
        self.groups = np.asarray(self.groups, dtype=np.int64)
        if self.particle_index is None:
            self.particle_index = np.zeros(self.log_psi.size, dtype=np.int64)
        self.particle_index = np.asarray(self.particle_index, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.log_psi.size or self.groups.size != self.log_psi.size:
            raise InputError("features, log_psi and groups must have matching rows")

    def __len__(self):
        return self.log_psi.size

    @property
    def group_ids(self):
        return np.unique(self.groups)

    def subset(self, rows):
        rows = np.asarray(rows, dtype=np.int64)
        return SupervisionSet(self.features[rows], self.log_psi[rows], self.groups[rows], self.particle_index[rows])

    def select_groups(self, ids):
        return self.subset(np.flatnonzero(np.isin(self.groups, ids)))

    def drop_degenerate(self, min_size=2):
        ids, counts = np.unique(self.groups, return_counts=True)
        return self.select_groups(ids[counts >= min_size])

    def split(self, val_fraction=0.2, seed=0):
        """Partition into train and validation sets by whole groups."""
        ids = self.group_ids
        if ids.size < 2:
            raise InputError("need at least two groups to split")
        perm = np.random.default_rng(seed).permutation(ids)
        n_val = min(max(1, int(round(val_fraction * ids.size))), ids.size - 1)
        return self.select_groups(np.sort(perm[n_val:])), self.select_groups(np.sort(perm[:n_val]))

    def to_jsonl(self):
        buf = io.StringIO()
        for h, y, g, i in zip(self.features, self.log_psi, self.groups, self.particle_index):
            rec = {"group_id": int(g), "particle_index": int(i), "features": h.tolist(), "log_psi": float(y)}
            buf.write(json.dumps(rec, sort_keys=True) + "\n")
        return buf.getvalue()

    @classmethod
    def from_jsonl(cls, text):
        recs = [json.loads(line) for line in text.splitlines() if line.strip()]
        if not recs:
            raise InputError("empty supervision file")
        return cls(
            [r["features"] for r in recs],
            [r["log_psi"] for r in recs],
            [r["group_id"] for r in recs],
            [r["particle_index"] for r in recs],
        )


def collect_supervision(model, prompts, config, rollout_config=None, seeds=(0,), dedupe=True):
    """Record rollout potentials at every boundary where they were evaluated.

    Each evaluation becomes one group of candidates (the movable
    particles).  With ``dedupe`` set, candidates sharing a model state are
    merged and their rollout estimates pooled by log-mean-exp, which is the
    estimate the merged rollouts would have produced together.  Groups with
    fewer than two candidates are dropped.
    """
    if config.apf_mode != "rollout":
        config = config.with_updates(apf_mode="rollout")
    potential = RolloutPotential(rollout_config)
    feats, ys, gids, pidx = [], [], [], []
    counter = [0]

    def observe(boundary, population, out):
        movable = np.flatnonzero(population.alive(model))
        if movable.size < 2:
            return
        states = population.states[movable]
        h = np.asarray(model.features_batch(states), dtype=float)
        y = out.log_psi[movable]
        if dedupe:
            keys = [repr(s) for s in states]
            first, members = {}, {}
            for k, key in enumerate(keys):
                first.setdefault(key, k)
                members.setdefault(key, []).append(k)
            picks = [first[key] for key in first]
            # equal rollout counts per particle, so pooled mean = mean of the exp estimates
            y = np.array([logsumexp(y[members[keys[k]]]) - math.log(len(members[keys[k]])) for k in picks])
            h, movable = h[picks], movable[picks]
        if movable.size < 2:
            return
        g = counter[0]
        counter[0] += 1
        feats.extend(h)
        ys.extend(y)
        gids.extend([g] * movable.size)
        pidx.extend(movable.tolist())

    for prompt in prompts:
        for seed in seeds:
            run_apps(model, prompt, config.with_updates(seed=int(seed)), potential, observe)
    if not ys:
        raise InputError("collection produced no usable groups")
    return SupervisionSet(np.array(feats), np.array(ys), np.array(gids), np.array(pidx))


# ----------------------------------------------------------------------------
# metrics


def group_metrics(pred, target, groups, seed=0):
    """Group top-1 agreement, pairwise accuracy, pooled Pearson and MAE.

    Ties in ``pred`` are broken uniformly at random (seeded), both for the
    group argmax and for pairs.
    """
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    rng = np.random.default_rng(seed)
    gidx, n_groups = _group_index(groups)
    top1, pair_acc = [], []
    for g in range(n_groups):
        rows = np.flatnonzero(gidx == g)
        p, t = pred[rows], target[rows]
        best = np.flatnonzero(p == p.max())
        pick = best[rng.integers(best.size)] if best.size > 1 else best[0]
        top1.append(float(t[pick] == t.max()))
        i, k = np.triu_indices(rows.size, 1)
        distinct = t[i] != t[k]
        if distinct.any():
            i, k = i[distinct], k[distinct]
            sp = np.sign(p[i] - p[k])
            st = np.sign(t[i] - t[k])
            flips = rng.random(i.size) < 0.5
            correct = np.where(sp == 0, flips, sp == st)
            pair_acc.append(float(correct.mean()))
    if pred.std() == 0 or target.std() == 0:
        pearson = 0.0
    else:
        pearson = float(np.clip(np.corrcoef(pred, target)[0, 1], -1.0, 1.0))
    return {
        "top1": float(np.mean(top1)),
        "pairwise": float(np.mean(pair_acc)) if pair_acc else 0.5,
        "pearson": pearson,
        "mae": float(np.abs(pred - target).mean()),
    }


def evaluate(head, data, seed=0):
    """Metrics of the head's decoded predictions against decoded rollout targets."""
    if len(data) == 0:
        raise InputError("empty evaluation set")
    target = transform(data.log_psi, data.groups, head.eta_distill, head.clip, head.target_mode)
    pred = head.decode(head.predict(data.features), data.groups)
    return group_metrics(pred, target, data.groups, seed)


# ----------------------------------------------------------------------------
# optimisation


class AdamW:
    """Adam with decoupled weight decay (biases are not decayed)."""

    def __init__(self, params, weight_decay, b1=0.9, b2=0.999, eps=1e-8):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0
        self.wd = weight_decay
        self.b1, self.b2, self.eps = b1, b2, eps

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k in params:
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            decay = self.wd * params[k] if k in ("W1", "w2") else 0.0
            params[k] = params[k] - lr * (update + decay)


def ema_update(shadow, params, decay):
    for k in shadow:
        shadow[k] = decay * shadow[k] + (1 - decay) * params[k]


def cosine_lr(base, step, total):
    """Cosine schedule decaying from ``base`` to zero over ``total`` steps."""
    if total <= 0:
        return base
    return 0.5 * base * (1 + math.cos(math.pi * min(step, total) / total))


def _batches(data, batch_size, rng):
    """Whole-group minibatches of at most ``batch_size`` rows (a lone larger group is its own batch)."""
    ids, counts = np.unique(data.groups, return_counts=True)
    perm = rng.permutation(ids.size)
    out, cur, size = [], [], 0
    for k in perm:
        if cur and size + counts[k] > batch_size:
            out.append(cur)
            cur, size = [], 0
        cur.append(ids[k])
        size += counts[k]
    if cur:
        out.append(cur)
    return out


class _Prepared:
    """Padded view of a supervision set for fast loss evaluation."""

    def __init__(self, data, cfg):
        self.data = data
        gidx, n_groups = _group_index(data.groups)
        target = transform(data.log_psi, data.groups, cfg.eta_distill, cfg.clip, cfg.target_mode)
        self.target_pad, self.mask, self.scatter = pad_groups(target, gidx, n_groups)
        self.weights = group_weights(self.target_pad, self.mask)


def _data_loss(head, prep, cfg, params):
    total, terms, _ = head_loss(
        head, prep.data.features, prep.target_pad, prep.mask, prep.scatter, cfg.loss_weights, params, None, prep.weights
    )
    return total, terms


@dataclass
class TrainResult:
    head: ValueHead
    history: list = field(default_factory=list)
    best_epoch: int = 0

    def history_csv(self):
        if not self.history:
            return ""
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(self.history[0]), lineterminator="\n")
        writer.writeheader()
        for row in self.history:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()


def train(data, config=None, seed=0, validation=None):
    """Fit a value head on grouped supervision.

    The validation set is carved out by whole groups unless given.  The
    returned head holds the EMA parameters of the epoch with the best
    validation top-1 agreement; pairwise accuracy breaks ties, then lower
    validation loss.
    """
    cfg = config or TrainConfig()
    data = data.drop_degenerate()
    if len(data) == 0:
        raise InputError("no groups with at least two candidates")
    if validation is None:
        train_set, val_set = data.split(cfg.val_fraction, seed)
    else:
        train_set, val_set = data, validation.drop_degenerate()
    head = ValueHead.init(data.features.shape[1], cfg.hidden, seed, eta_distill=cfg.eta_distill, clip=cfg.clip,
                          target_mode=cfg.target_mode)
    params = head.params
    shadow = {k: v.copy() for k, v in params.items()}
    opt = AdamW(params, cfg.weight_decay)
    rng = np.random.default_rng(seed + 1)
    tr_prep = {}
    val_prep = _Prepared(val_set, cfg)
    n_batches = len(_batches(train_set, cfg.batch_size, np.random.default_rng(0)))
    total_steps = cfg.max_epochs * n_batches
    step = 0
    best_key, best_params, best_epoch = None, None, 0
    best_val, wait = np.inf, 0
    history = []
    keep = 1.0 - cfg.dropout
    for epoch in range(1, cfg.max_epochs + 1):
        running = np.zeros(5)
        running_total = 0.0
        for batch in _batches(train_set, cfg.batch_size, rng):
            key = tuple(batch)
            if key not in tr_prep:
                tr_prep[key] = _Prepared(train_set.select_groups(batch), cfg)
            prep = tr_prep[key]
            mask = None
            if cfg.dropout > 0:
                mask = (rng.random((len(prep.data), head.n_hidden)) < keep) / keep
            total, terms, grads = head_loss(
                head, prep.data.features, prep.target_pad, prep.mask, prep.scatter, cfg.loss_weights, params, mask,
                prep.weights,
            )
            if not np.isfinite(total) or not all(np.isfinite(g).all() for g in grads.values()):
                raise TrainingError(f"non-finite loss or gradient at epoch {epoch}")
            lr = cosine_lr(cfg.learning_rate, step, total_steps)
            opt.step(params, grads, lr)
            ema_update(shadow, params, cfg.ema_decay)
            step += 1
            running += terms
            running_total += total
        eval_head = ValueHead(shadow, cfg.eta_distill, cfg.clip, cfg.target_mode)
        val_loss, _ = _data_loss(eval_head, val_prep, cfg, shadow)
        metrics = evaluate(eval_head, val_set, seed)
        row = {"epoch": epoch, "lr": lr, "train_loss": running_total / n_batches}
        row.update({f"train_{name}": float(v / n_batches) for name, v in zip(LOSS_TERMS, running)})
        row.update({"val_loss": val_loss}, **{f"val_{k}": v for k, v in metrics.items()})
        history.append(row)
        key = (metrics["top1"], metrics["pairwise"], -val_loss)
        if best_key is None or key > best_key:
            best_key, best_epoch = key, epoch
            best_params = {k: v.copy() for k, v in shadow.items()}
        if val_loss < best_val - cfg.min_delta:
            best_val, wait = val_loss, 0
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    return TrainResult(ValueHead(best_params, cfg.eta_distill, cfg.clip, cfg.target_mode), history, best_epoch)


# ----------------------------------------------------------------------------
# estimator facade


class ValueHeadRegressor(RegressorMixin, BaseEstimator):
    """scikit-learn style wrapper: ``fit(X, y, groups)`` then ``predict(X)``.

    ``predict`` returns raw head outputs; ``score`` reports held-out group
    top-1 agreement, which is the metric the head is selected on.
    """

    def __init__(self, eta_distill=0.4, clip=5.0, hidden=64, learning_rate=1e-2, max_epochs=60, patience=12,
                 batch_size=512, dropout=0.10, weight_decay=5e-2, ema_decay=0.995, val_fraction=0.2,
                 target_mode="decode-aligned", random_state=0):
        self.eta_distill = eta_distill
        self.clip = clip
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.patience = patience
        self.batch_size = batch_size
        self.dropout = dropout
        self.weight_decay = weight_decay
        self.ema_decay = ema_decay
        self.val_fraction = val_fraction
        self.target_mode = target_mode
        self.random_state = random_state

    def _config(self):
        return TrainConfig(
            eta_distill=self.eta_distill, clip=self.clip, hidden=self.hidden, learning_rate=self.learning_rate,
            max_epochs=self.max_epochs, patience=self.patience, batch_size=self.batch_size, dropout=self.dropout,
            weight_decay=self.weight_decay, ema_decay=self.ema_decay, val_fraction=self.val_fraction,
            target_mode=self.target_mode,
        )

    def fit(self, X, y, groups=None):
        X, y = check_X_y(X, y, y_numeric=True)
        if groups is None:
            raise InputError("groups are required: targets are only meaningful within a group")
        result = train(SupervisionSet(X, y, groups), self._config(), self.random_state)
        self.head_ = result.head
        self.history_ = result.history
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "head_")
        return self.head_.predict(check_array(X))

    def transform_scores(self, X, groups):
        check_is_fitted(self, "head_")
        return self.head_.decode(self.predict(X), groups)

    def score(self, X, y, groups=None, sample_weight=None):
        if groups is None:
            raise InputError("groups are required")
        return evaluate(self.head_, SupervisionSet(check_array(X), y, groups), self.random_state)["top1"]
