"""Classifier whose penultimate layer doubles as the latent encoder.

Two input paths share the same head:

* ``sequence``: two stacked GRU layers over the masked ``T x 4`` rows, final
  hidden state concatenated with the context vector.
* ``features``: one dense ReLU layer over a flat feature vector.

Head: dense(latent_dim, ReLU) -> dense(n_classes) -> softmax.  The ReLU
activations of the latent layer are the latent vector.

Gradients are derived by hand (numpy, float64) and verified by
``gradient_check`` against central finite differences.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dataset import TIME_SCALE_DAYS, AuditTrail, EncodedSequence, FeatureVector, stack_sequences
from .seeding import derive_seed

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "latentmcif.encoder"
CHECKPOINT_VERSION = 1

REFERENCE_LATENT_DIM = 100
DESK_LATENT_DIM = 32
SWEEP_LATENT_DIMS = (10, 25, 50, 70, 100)


class EncoderError(ValueError):
    pass


class TrainingDiverged(EncoderError):
    pass


@dataclass
class NetworkConfig:
    input_kind: str = "sequence"
    input_dim: int = 4
    recurrent_units: int = 64
    recurrent_layers: int = 2
    hidden_units: int = 64
    latent_dim: int = DESK_LATENT_DIM
    n_classes: int = 2
    context_dim: int = 4
    epochs: int = 40
    learning_rate: float = 1e-3
    batch_size: int = 128
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    prefix_fraction: float = 0.0

    def __post_init__(self) -> None:
        if self.input_kind not in ("sequence", "features"):
            raise EncoderError(f"input_kind must be 'sequence' or 'features', got {self.input_kind!r}")
        if self.latent_dim < 1:
            raise EncoderError("latent_dim must be >= 1")
        if self.n_classes < 2:
            raise EncoderError("n_classes must be >= 2")
        if self.epochs < 1:
            raise EncoderError("epochs must be >= 1")
        if not 0.0 <= self.prefix_fraction <= 1.0:
            raise EncoderError("prefix_fraction must lie in [0, 1]")
        if self.input_kind == "features":
            self.context_dim = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LatentVector:
    object_id: str
    z: np.ndarray
    label: str | None = None


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(logits):
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _glorot(rng, fan_in, fan_out):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def class_weights_from_counts(counts: Sequence[int]) -> np.ndarray:
    """Inverse-frequency weights normalized to mean 1."""
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts <= 0):
        raise EncoderError("every class needs at least one training example")
    w = 1.0 / counts
    return w / w.mean()


# ---------------------------------------------------------------- GRU layer


def gru_forward(X, mask, W, U, b):
    """Masked GRU over X (B, T, D); returns hidden states (B, T, H) and a cache.

    z = sig(x Wz + h Uz + bz), r = sig(x Wr + h Ur + br),
    c = tanh(x Wc + (r*h) Uc + bc), h' = z*h + (1-z)*c.
    Masked steps carry h through unchanged.
    """
    B, T, D = X.shape
    H = U.shape[0]
    A = (X.reshape(B * T, D) @ W).reshape(B, T, 3 * H) + b
    Uzr, Uc = U[:, : 2 * H], U[:, 2 * H:]
    h = np.zeros((B, H))
    hs = np.empty((B, T, H))
    HP = np.empty((B, T, H))
    Z = np.empty((B, T, H))
    R = np.empty((B, T, H))
    C = np.empty((B, T, H))
    for t in range(T):
        a = A[:, t]
        zr = _sigmoid(a[:, : 2 * H] + h @ Uzr)
        z, r = zr[:, :H], zr[:, H:]
        c = np.tanh(a[:, 2 * H:] + (r * h) @ Uc)
        hn = z * h + (1.0 - z) * c
        HP[:, t], Z[:, t], R[:, t], C[:, t] = h, z, r, c
        h = np.where(mask[:, t, None], hn, h)
        hs[:, t] = h
    return hs, (X, mask, HP, Z, R, C)


def gru_backward(W, U, cache, dHs):
    """Gradients of the loss w.r.t. (X, W, U, b) given dL/dhs."""
    X, mask, HP, Z, R, C = cache
    B, T, D = X.shape
    H = U.shape[0]
    Uzr, Uc = U[:, : 2 * H], U[:, 2 * H:]
    dA = np.zeros((B, T, 3 * H))
    dh = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        dh = dh + dHs[:, t]
        m = mask[:, t, None]
        dhn = np.where(m, dh, 0.0)
        carry = np.where(m, 0.0, dh)
        hp, z, r, c = HP[:, t], Z[:, t], R[:, t], C[:, t]
        dz = dhn * (hp - c)
        dac = dhn * (1.0 - z) * (1.0 - c * c)
        drh = dac @ Uc.T
        dar = drh * hp * r * (1.0 - r)
        daz = dz * z * (1.0 - z)
        dazr = np.concatenate([daz, dar], axis=1)
        dA[:, t, : 2 * H] = dazr
        dA[:, t, 2 * H:] = dac
        dh = dhn * z + drh * r + dazr @ Uzr.T + carry
    flatA = dA.reshape(B * T, 3 * H)
    dW = X.reshape(B * T, D).T @ flatA
    db = flatA.sum(axis=0)
    dU = np.empty_like(U)
    dU[:, : 2 * H] = HP.reshape(B * T, H).T @ flatA[:, : 2 * H]
    dU[:, 2 * H:] = (R * HP).reshape(B * T, H).T @ flatA[:, 2 * H:]
    dX = (flatA @ W.T).reshape(B, T, D)
    return dX, dW, dU, db


# ---------------------------------------------------------------- model


@dataclass(eq=False)
class EncoderClassifier:
    config: NetworkConfig
    class_names: list[str]
    params: "OrderedDict[str, np.ndarray]"
    class_weights: np.ndarray = None
    training_log: list[dict] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.class_names) != self.config.n_classes:
            raise EncoderError(f"{len(self.class_names)} class names for n_classes={self.config.n_classes}")
        if self.class_weights is None:
            self.class_weights = np.ones(self.config.n_classes)
        self.class_weights = np.asarray(self.class_weights, dtype=np.float64)

    @classmethod
    def initialize(cls, config: NetworkConfig, class_names: Sequence[str]) -> "EncoderClassifier":
        rng = np.random.default_rng(derive_seed(config.seed, "init"))
        p: OrderedDict[str, np.ndarray] = OrderedDict()
        if config.input_kind == "sequence":
            d_in = config.input_dim
            H = config.recurrent_units
            for k in range(config.recurrent_layers):
                p[f"gru{k}.W"] = _glorot(rng, d_in, 3 * H)
                p[f"gru{k}.U"] = _glorot(rng, H, 3 * H)
                p[f"gru{k}.b"] = np.zeros(3 * H)
                d_in = H
            head_in = H + config.context_dim
        else:
            p["hidden.W"] = _glorot(rng, config.input_dim, config.hidden_units)
            p["hidden.b"] = np.zeros(config.hidden_units)
            head_in = config.hidden_units
        p["latent.W"] = _glorot(rng, head_in, config.latent_dim)
        p["latent.b"] = np.zeros(config.latent_dim)
        p["output.W"] = _glorot(rng, config.latent_dim, config.n_classes)
        p["output.b"] = np.zeros(config.n_classes)
        return cls(config, list(class_names), p)

    @property
    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def check_finite(self) -> None:
        for name, v in self.params.items():
            if not np.all(np.isfinite(v)):
                raise EncoderError(f"parameter tensor {name} contains NaN or inf")

    # -- forward / backward on batch arrays

    def _forward(self, batch):
        cfg = self.config
        p = self.params
        cache = {}
        if cfg.input_kind == "sequence":
            rows, mask, ctx = batch
            if rows.shape[2] != cfg.input_dim or ctx.shape[1] != cfg.context_dim:
                raise EncoderError(
                    f"sequence input width {rows.shape[2]}/context {ctx.shape[1]} does not match "
                    f"config {cfg.input_dim}/{cfg.context_dim}")
            lengths = mask.sum(axis=1)
            t_eff = int(np.max(np.flatnonzero(mask.any(axis=0))) + 1) if mask.any() else 0
            x, m = rows[:, :t_eff], mask[:, :t_eff]
            gru_caches = []
            for k in range(cfg.recurrent_layers):
                hs, gc = gru_forward(x, m, p[f"gru{k}.W"], p[f"gru{k}.U"], p[f"gru{k}.b"])
                gru_caches.append(gc)
                x = hs
            h_last = x[:, -1] if t_eff else np.zeros((rows.shape[0], cfg.recurrent_units))
            feat = np.concatenate([h_last, ctx], axis=1)
            cache.update(gru=gru_caches, t_eff=t_eff, lengths=lengths, batch=rows.shape[0])
        else:
            X = batch
            if X.shape[1] != cfg.input_dim:
                raise EncoderError(f"feature width {X.shape[1]} does not match config {cfg.input_dim}")
            a0 = X @ p["hidden.W"] + p["hidden.b"]
            feat = np.maximum(a0, 0.0)
            cache.update(X=X, a0=a0)
        a1 = feat @ p["latent.W"] + p["latent.b"]
        z = np.maximum(a1, 0.0)
        probs = _softmax(z @ p["output.W"] + p["output.b"])
        cache.update(feat=feat, a1=a1, z=z)
        return probs, z, cache

    def _loss(self, probs, y):
        w = self.class_weights[y]
        picked = probs[np.arange(len(y)), y]
        with np.errstate(divide="ignore"):
            nll = -np.log(picked)
        return float(np.sum(w * nll) / len(y))

    def loss_and_grad(self, batch, y):
        """Class-weighted mean cross-entropy and its gradient for every tensor."""
        cfg = self.config
        p = self.params
        y = np.asarray(y, dtype=np.int64)
        probs, z, cache = self._forward(batch)
        loss = self._loss(probs, y)
        n = len(y)
        w = self.class_weights[y]
        dlogits = probs.copy()
        dlogits[np.arange(n), y] -= 1.0
        dlogits *= (w / n)[:, None]
        g: OrderedDict[str, np.ndarray] = OrderedDict()
        g["output.W"] = z.T @ dlogits
        g["output.b"] = dlogits.sum(axis=0)
        da1 = (dlogits @ p["output.W"].T) * (cache["a1"] > 0)
        g["latent.W"] = cache["feat"].T @ da1
        g["latent.b"] = da1.sum(axis=0)
        dfeat = da1 @ p["latent.W"].T
        if cfg.input_kind == "sequence":
            H = cfg.recurrent_units
            t_eff = cache["t_eff"]
            grus = cache["gru"]
            for k in range(cfg.recurrent_layers):
                d_in = cfg.input_dim if k == 0 else H
                g[f"gru{k}.W"] = np.zeros((d_in, 3 * H))
                g[f"gru{k}.U"] = np.zeros((H, 3 * H))
                g[f"gru{k}.b"] = np.zeros(3 * H)
            if t_eff:
                dHs = np.zeros((cache["batch"], t_eff, H))
                dHs[:, -1] = dfeat[:, :H]
                for k in range(cfg.recurrent_layers - 1, -1, -1):
                    dX, dW, dU, db = gru_backward(p[f"gru{k}.W"], p[f"gru{k}.U"], grus[k], dHs)
                    g[f"gru{k}.W"], g[f"gru{k}.U"], g[f"gru{k}.b"] = dW, dU, db
                    dHs = dX
        else:
            da0 = dfeat * (cache["a0"] > 0)
            g["hidden.W"] = cache["X"].T @ da0
            g["hidden.b"] = da0.sum(axis=0)
        return loss, OrderedDict((k, g[k]) for k in p)

    # -- public API on dataset objects

    def batch_from(self, items: Sequence[EncodedSequence | FeatureVector]):
        if self.config.input_kind == "sequence":
            if not all(isinstance(i, EncodedSequence) for i in items):
                raise EncoderError("sequence model needs EncodedSequence inputs")
            return stack_sequences(items)
        if not all(isinstance(i, FeatureVector) for i in items):
            raise EncoderError("feature model needs FeatureVector inputs")
        return np.vstack([i.values for i in items])

    def label_indices(self, labels: Iterable[str | None]) -> np.ndarray:
        lookup = {c: i for i, c in enumerate(self.class_names)}
        out = []
        for lab in labels:
            if lab not in lookup:
                raise EncoderError(f"label {lab!r} is not one of the trained classes")
            out.append(lookup[lab])
        return np.asarray(out, dtype=np.int64)

    # -- persistence

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "class_names": list(self.class_names),
            "class_weights": self.class_weights.tolist(),
            "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.params.items()},
            "training_log": self.training_log,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "EncoderClassifier":
        if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
            raise EncoderError(f"unsupported checkpoint {doc.get('format')!r} v{doc.get('version')}")
        params = OrderedDict(
            (k, np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])) for k, v in doc["params"].items()
        )
        return cls(NetworkConfig(**doc["config"]), list(doc["class_names"]), params,
                   np.asarray(doc["class_weights"]), list(doc.get("training_log", [])))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "EncoderClassifier":
        return cls.from_dict(json.loads(Path(path).read_text()))


def forward(model: EncoderClassifier, inputs) -> tuple[np.ndarray, np.ndarray]:
    """Class probabilities and latent vectors for one input or a list of inputs."""
    model.check_finite()
    single = isinstance(inputs, (EncodedSequence, FeatureVector))
    items = [inputs] if single else list(inputs)
    probs, z, _ = model._forward(model.batch_from(items))
    return (probs[0], z[0]) if single else (probs, z)


def encode(
    model: EncoderClassifier, inputs: Sequence[EncodedSequence | FeatureVector], batch_size: int = 256
) -> list[LatentVector]:
    """Latent vectors for ``inputs``, order preserved."""
    model.check_finite()
    out = []
    for s in range(0, len(inputs), batch_size):
        chunk = list(inputs[s:s + batch_size])
        _, z, _ = model._forward(model.batch_from(chunk))
        out.extend(LatentVector(item.object_id, z[i].copy(), item.label) for i, item in enumerate(chunk))
    return out


def latent_matrix(latents: Sequence[LatentVector]) -> np.ndarray:
    return np.vstack([lv.z for lv in latents]) if latents else np.empty((0, 0))


# ---------------------------------------------------------------- training


@dataclass
class _Adam:
    lr: float
    beta1: float
    beta2: float
    eps: float
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    def step(self, params, grads) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def prefix_batch(rows: np.ndarray, mask: np.ndarray, fraction: float, rng: np.random.Generator):
    """Replace a random ``fraction`` of sequences by observation prefixes.

    A chosen sequence is cut at a time drawn uniformly between its first
    observation and one day past its last, keeping rows strictly earlier than
    the cut, and re-scaled by the prefix's own max |flux|.  This matches
    preprocessing a truncated light curve, so the classifier sees the same
    partial inputs it is asked to score in real time.
    """
    rows, mask = rows.copy(), mask.copy()
    pick = rng.random(len(rows)) < fraction
    cuts = rng.random(len(rows))
    for i in np.flatnonzero(pick):
        m = int(mask[i].sum())
        if m == 0:
            continue
        t = rows[i, :m, 2] * TIME_SCALE_DAYS
        cut = t[0] + cuts[i] * (t[-1] + 1.0 - t[0])
        k = int(np.searchsorted(t, cut, side="left"))
        rows[i, k:] = 0.0
        mask[i, k:] = False
        peak = float(np.max(np.abs(rows[i, :k, 0]))) if k else 0.0
        if peak > 0:
            rows[i, :k, :2] /= peak
    return rows, mask


def _evaluate(model, batch_arrays, y, batch_size):
    n = len(y)
    loss = 0.0
    correct = 0
    for s in range(0, n, batch_size):
        sl = slice(s, s + batch_size)
        b = tuple(a[sl] for a in batch_arrays) if isinstance(batch_arrays, tuple) else batch_arrays[sl]
        probs, _, _ = model._forward(b)
        loss += model._loss(probs, y[sl]) * len(y[sl])
        correct += int(np.sum(probs.argmax(axis=1) == y[sl]))
    return loss / n, correct / n


def train(
    model: EncoderClassifier,
    train_set: Sequence[EncodedSequence | FeatureVector],
    val_set: Sequence[EncodedSequence | FeatureVector] = (),
    config: NetworkConfig | None = None,
    *,
    forbidden_ids: Iterable[str] = (),
    audit: AuditTrail | None = None,
) -> EncoderClassifier:
    """Fit ``model`` in place with class-weighted cross-entropy and Adam.

    Class weights come from the training label frequencies.  Every batch is
    checked against ``forbidden_ids`` before use and recorded in ``audit``.
    """
    cfg = config or model.config
    if not train_set:
        raise EncoderError("empty training set")
    y = model.label_indices(i.label for i in train_set)
    counts = np.bincount(y, minlength=cfg.n_classes)
    model.class_weights = class_weights_from_counts(counts)
    ids = np.array([i.object_id for i in train_set], dtype=object)
    forbidden = set(forbidden_ids)
    X = model.batch_from(train_set)
    is_seq = isinstance(X, tuple)
    if len(val_set):
        Xv = model.batch_from(val_set)
        yv = model.label_indices(i.label for i in val_set)
    opt = _Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = np.random.default_rng(derive_seed(cfg.seed, "shuffle"))
    prefix_rng = np.random.default_rng(derive_seed(cfg.seed, "prefix"))
    n = len(y)
    last_finite = math.nan
    model.training_log = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for bi, s in enumerate(range(0, n, cfg.batch_size)):
            idx = order[s:s + cfg.batch_size]
            batch_ids = ids[idx]
            if forbidden and not forbidden.isdisjoint(batch_ids):
                raise AssertionError(f"held-out object in training batch {bi} of epoch {epoch}")
            if audit is not None:
                audit.record("encoder", batch_ids)
            b = tuple(a[idx] for a in X) if is_seq else X[idx]
            if is_seq and cfg.prefix_fraction > 0:
                b = prefix_batch(b[0], b[1], cfg.prefix_fraction, prefix_rng) + (b[2],)
            loss, grads = model.loss_and_grad(b, y[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"loss became {loss} at epoch {epoch} batch {bi}; last finite loss {last_finite}")
            last_finite = loss
            opt.step(model.params, grads)
            total += loss * len(idx)
        train_loss, train_acc = _evaluate(model, X, y, 512)
        entry = {"epoch": epoch + 1, "loss": total / n, "train_loss": train_loss, "train_accuracy": train_acc}
        if len(val_set):
            vl, va = _evaluate(model, Xv, yv, 512)
            entry.update(val_loss=vl, val_accuracy=va)
        model.training_log.append(entry)
        log.info("epoch %d loss %.4f acc %.3f", epoch + 1, entry["loss"], train_acc)
    return model


# ---------------------------------------------------------------- verification


def flat_params(model: EncoderClassifier) -> np.ndarray:
    return np.concatenate([v.ravel() for v in model.params.values()])


def gradient_check(
    model: EncoderClassifier,
    inputs: Sequence[EncodedSequence | FeatureVector],
    labels: Sequence[str] | None = None,
    *,
    n_params: int = 200,
    h: float = 1e-5,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Evaluated on a random subset of ``n_params`` scalar parameters; relative
    error is |ga - gf| / max(|ga|, |gf|, 1e-8).
    """
    batch = model.batch_from(inputs)
    y = model.label_indices(labels if labels is not None else [i.label for i in inputs])
    _, grads = model.loss_and_grad(batch, y)
    names = list(model.params)
    sizes = [model.params[k].size for k in names]
    offsets = np.cumsum([0] + sizes)
    ga_flat = np.concatenate([grads[k].ravel() for k in names])
    rng = np.random.default_rng(seed)
    picks = rng.choice(offsets[-1], size=min(n_params, offsets[-1]), replace=False)
    worst = 0.0
    for flat in picks:
        ti = int(np.searchsorted(offsets, flat, side="right") - 1)
        arr = model.params[names[ti]].reshape(-1)
        j = flat - offsets[ti]
        orig = arr[j]
        arr[j] = orig + h
        lp = model._loss(model._forward(batch)[0], y)
        arr[j] = orig - h
        lm = model._loss(model._forward(batch)[0], y)
        arr[j] = orig
        gf = (lp - lm) / (2 * h)
        ga = ga_flat[flat]
        worst = max(worst, abs(ga - gf) / max(abs(ga), abs(gf), 1e-8))
    return worst


def write_latents_csv(path: str | Path, latents: Sequence[LatentVector]) -> None:
    k = len(latents[0].z) if latents else 0
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["object_id", "label"] + [f"z{j}" for j in range(k)])
        for lv in latents:
            w.writerow([lv.object_id, lv.label or ""] + [repr(float(x)) for x in lv.z])


def read_latents_csv(path: str | Path) -> list[LatentVector]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["object_id", "label"]:
            raise EncoderError(f"{path}: latent CSV must start with object_id,label")
        return [LatentVector(r[0], np.array([float(x) for x in r[2:]]), r[1] or None) for r in reader if r]
