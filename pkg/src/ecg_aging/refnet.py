"""Small 1-D CNN on raw ECG crops, written directly in numpy.

Conv blocks (same padding, stride, ReLU), global average pooling and a linear
head to one logit per age group. Forward and backward passes are explicit so
that training, saliency and gradient checks share a single code path. Everything
runs in float64.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .evaluation import macro_auc

FORMAT = "ecg_aging.refnet/1"
DEFAULT_BLOCKS = ((16, 7, 2), (32, 7, 2), (32, 7, 2), (64, 7, 2))


class TrainingError(RuntimeError):
    """Non-finite loss or parameters during training."""


@dataclass(frozen=True)
class NetSpec:
    crop_len: int = 300
    fs: float = 100.0
    blocks: tuple = DEFAULT_BLOCKS      # (filters, kernel, stride) per block
    n_classes: int = 15
    in_channels: int = 1
    negative_slope: float = 0.01        # leaky ReLU; 0 gives a plain ReLU
    seed: int = 0

    def validate(self):
        if self.n_classes != 15:
            raise ValueError("the classifier head has one logit per age group (15)")
        if self.in_channels != 1:
            raise ValueError("single input channel expected")
        if not self.blocks:
            raise ValueError("need at least one conv block")
        for f, k, s in self.blocks:
            if k % 2 == 0 or k < 1:
                raise ValueError(f"kernel sizes must be odd, got {k}")
            if f < 1 or s < 1:
                raise ValueError("filters and stride must be positive")
        if self.crop_len < 1:
            raise ValueError("crop_len must be positive")
        return self


@dataclass
class FitConfig:
    loss: str = "focal"                 # "focal" | "cross_entropy"
    gamma: float = 2.0
    class_weights: object = None        # None | "inverse" | sequence of 15 positives
    lr: float | None = None             # None -> 1e-5 focal, 1e-2 cross-entropy
    weight_decay: float = 1e-2
    batch_size: int = 32
    max_epochs: int = 20
    plateau_patience: int = 2
    plateau_factor: float = 0.1
    early_stop_patience: int = 3
    crops_per_record: int = 4
    seed: int = 0

    def initial_lr(self):
        if self.lr is not None:
            return float(self.lr)
        return 1e-5 if self.loss == "focal" else 1e-2

    def validate(self):
        if self.loss not in ("focal", "cross_entropy"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.class_weights is not None and not isinstance(self.class_weights, str):
            w = np.asarray(self.class_weights, dtype=float)
            if np.any(~(w > 0)):
                raise ValueError("class weights must be > 0")
        elif isinstance(self.class_weights, str) and self.class_weights != "inverse":
            raise ValueError(f"unknown class weighting {self.class_weights!r}")
        if not self.initial_lr() >= 0 or not math.isfinite(self.initial_lr()):
            raise ValueError("learning rate must be finite and >= 0")
        return self


@dataclass
class AttributionMap:
    crop_id: str
    record_id: str
    values: np.ndarray
    target_class: int


# ---------------------------------------------------------------- loss

def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def compute_loss(logits, label, config: FitConfig, weights=None):
    """Weighted focal or cross-entropy loss and its gradient w.r.t. the logits.

    ``logits`` may be one vector with an integer ``label`` or a batch
    ``(B, K)`` with ``label`` of shape ``(B,)``; a batch returns the mean loss
    and the gradient of that mean.
    """
    z = np.asarray(logits, dtype=float)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    y = np.atleast_1d(np.asarray(label, dtype=int))
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("non-finite logits")
    b, k = z.shape
    if weights is None:
        weights = np.ones(k) if config.class_weights is None or isinstance(config.class_weights, str) \
            else np.asarray(config.class_weights, dtype=float)
    w = np.asarray(weights, dtype=float)[y]
    logp = _log_softmax(z)
    p = np.exp(logp)
    rows = np.arange(b)
    logp_y = logp[rows, y]
    onehot = np.zeros_like(z)
    onehot[rows, y] = 1.0
    gamma = config.gamma if config.loss == "focal" else 0.0
    if gamma == 0.0:
        loss = -w * logp_y
        grad = w[:, None] * (p - onehot)
    else:
        # 1 - p_y summed from the other classes keeps precision near saturation
        q = (p * (1.0 - onehot)).sum(axis=1)
        mod = q ** gamma
        loss = -w * mod * logp_y
        dmod = gamma * q ** (gamma - 1.0) if gamma >= 1.0 else \
            np.where(q > 0, gamma * np.power(np.where(q > 0, q, 1.0), gamma - 1.0), 0.0)
        # dL/dz_k = w [gamma q^(g-1) p_y log p_y - q^g] (delta_yk - p_k)
        coef = w * (dmod * p[rows, y] * logp_y - mod)
        grad = coef[:, None] * (onehot - p)
    if single:
        return float(loss[0]), grad[0]
    return float(loss.mean()), grad / b


# ---------------------------------------------------------------- layers

def _conv_forward(x, W, b, stride):
    bsz, c, L = x.shape
    f, _, k = W.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    win = sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]   # (B, C, Lout, k)
    lout = win.shape[2]
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(bsz * lout, c * k)
    out = cols @ W.reshape(f, c * k).T + b
    return out.reshape(bsz, lout, f).transpose(0, 2, 1), cols


def _conv_backward(dout, cols, x_shape, W, stride):
    bsz, c, L = x_shape
    f, _, k = W.shape
    pad = k // 2
    lout = dout.shape[2]
    d2 = dout.transpose(0, 2, 1).reshape(bsz * lout, f)
    dW = (d2.T @ cols).reshape(W.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ W.reshape(f, c * k)).reshape(bsz, lout, c, k).transpose(0, 2, 1, 3)
    dxp = np.zeros((bsz, c, L + 2 * pad))
    span = stride * (lout - 1) + 1
    for kk in range(k):
        dxp[:, :, kk:kk + span:stride] += dcols[:, :, :, kk]
    return dxp[:, :, pad:pad + L], dW, db


class RefNet:
    """Parameter store plus forward/backward passes."""

    def __init__(self, spec: NetSpec, params=None):
        self.spec = spec.validate()
        if params is None:
            params = self._init_params()
        self.params = [np.array(p, dtype=float) for p in params]

    def _init_params(self):
        rng = np.random.default_rng(self.spec.seed)
        params = []
        c = self.spec.in_channels
        for f, k, _ in self.spec.blocks:
            params.append(rng.normal(0.0, math.sqrt(2.0 / (c * k)), size=(f, c, k)))
            params.append(np.zeros(f))
            c = f
        params.append(rng.normal(0.0, math.sqrt(1.0 / c), size=(self.spec.n_classes, c)))
        params.append(np.zeros(self.spec.n_classes))
        return params

    @property
    def head(self):
        return self.params[-2], self.params[-1]

    def n_parameters(self):
        return int(sum(p.size for p in self.params))

    def forward(self, x, keep=False):
        x = np.asarray(x, dtype=float)
        h = x.reshape(x.shape[0], 1, -1) if x.ndim == 2 else x[None, None, :]
        cache = []
        for i, (_, _, s) in enumerate(self.spec.blocks):
            W, b = self.params[2 * i], self.params[2 * i + 1]
            pre, cols = _conv_forward(h, W, b, s)
            if keep:
                cache.append((h.shape, cols, pre))
            h = np.where(pre > 0, pre, self.spec.negative_slope * pre)
        g = h.mean(axis=2)
        Wh, bh = self.head
        logits = g @ Wh.T + bh
        if keep:
            return logits, (cache, g, h.shape)
        return logits

    def backward(self, state, dlogits):
        """Gradients of sum(dlogits * logits) w.r.t. parameters and input."""
        cache, g, hshape = state
        Wh, _ = self.head
        grads = [None] * len(self.params)
        grads[-2] = dlogits.T @ g
        grads[-1] = dlogits.sum(axis=0)
        dg = dlogits @ Wh
        dh = np.broadcast_to(dg[:, :, None] / hshape[2], hshape)
        for i in range(len(self.spec.blocks) - 1, -1, -1):
            xshape, cols, pre = cache[i]
            dpre = dh * np.where(pre > 0, 1.0, self.spec.negative_slope)
            dh, grads[2 * i], grads[2 * i + 1] = _conv_backward(
                dpre, cols, xshape, self.params[2 * i], self.spec.blocks[i][2])
        return grads, dh[:, 0, :]

    def loss_and_grad(self, x, y, config: FitConfig, weights=None):
        logits, state = self.forward(x, keep=True)
        loss, dlogits = compute_loss(logits, y, config, weights)
        grads, _ = self.backward(state, dlogits)
        return loss, grads

    def predict_crops(self, crops):
        logits = forward_chunked(self, np.atleast_2d(np.asarray(crops, dtype=float)))
        return np.exp(_log_softmax(logits))

    # serialization
    def to_json(self, extra=None):
        doc = {"format": FORMAT, "spec": asdict(self.spec),
               "params": [p.tolist() for p in self.params]}
        if extra:
            doc.update(extra)
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        if doc.get("format") != FORMAT:
            raise ValueError("not a refnet model file")
        s = doc["spec"]
        s["blocks"] = tuple(tuple(b) for b in s["blocks"])
        return cls(NetSpec(**s), doc["params"])


# ---------------------------------------------------------------- optimizer

class AdamW:
    def __init__(self, params, lr, weight_decay=1e-2, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * ((m / c1) / (np.sqrt(v / c2) + self.eps) + self.wd * p)


# ---------------------------------------------------------------- data helpers

def _as_signal(record, fs):
    if hasattr(record, "samples"):
        if abs(record.fs - fs) > 1e-9:
            from .signal_io import resample
            record = resample(record, fs)
        return np.asarray(record.samples, dtype=float)
    return np.asarray(record, dtype=float)


def tile_crops(signal, crop_len):
    """Non-overlapping crops from the start; the remainder is dropped."""
    signal = np.asarray(signal, dtype=float)
    n = signal.size // crop_len
    if n == 0:
        raise ValueError(f"record shorter than one crop ({signal.size} < {crop_len} samples)")
    return signal[: n * crop_len].reshape(n, crop_len)


def class_weights_inverse(labels, n_classes):
    counts = np.bincount(np.asarray(labels, dtype=int), minlength=n_classes)
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise ValueError(f"class weighting needs every class in training data; missing {missing}")
    w = 1.0 / counts
    return w * n_classes / w.sum()


def _random_crops(signals, labels, per_record, crop_len, rng):
    xs, ys = [], []
    for s, y in zip(signals, labels):
        if s.size < crop_len:
            raise ValueError(f"record shorter than one crop ({s.size} < {crop_len} samples)")
        for start in rng.integers(0, s.size - crop_len + 1, size=per_record):
            xs.append(s[start:start + crop_len])
            ys.append(y)
    return np.stack(xs), np.asarray(ys, dtype=int)


# ---------------------------------------------------------------- training

@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    valid_loss: float
    valid_auc: float
    improved: bool
    lr_reduced: bool


@dataclass
class FitResult:
    net: RefNet
    history: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False


def forward_chunked(net, x, chunk=512):
    """Logits for many crops with bounded memory."""
    return np.concatenate([net.forward(x[i:i + chunk]) for i in range(0, len(x), chunk)])


def _evaluate(net, signals, labels, config, weights):
    crops, crop_y, probs = [], [], []
    for s, y in zip(signals, labels):
        c = tile_crops(s, net.spec.crop_len)
        crops.append(c)
        crop_y.extend([y] * len(c))
    x = np.concatenate(crops)
    logits = forward_chunked(net, x)
    loss, _ = compute_loss(logits, np.asarray(crop_y), config, weights)
    p = np.exp(_log_softmax(logits))
    i = 0
    for c in crops:
        probs.append(p[i:i + len(c)].mean(axis=0))
        i += len(c)
    probs = np.stack(probs)
    try:
        auc = macro_auc(probs, labels, n_classes=net.spec.n_classes, warn=False).macro
    except ValueError:
        auc = math.nan
    return loss, auc, probs


def fit(signals, labels, spec: NetSpec | None = None, config: FitConfig | None = None,
        valid=None, log=None) -> FitResult:
    """Train on random crops drawn afresh each epoch.

    Parameters
    ----------
    signals : list of 1-D arrays (or ``EcgRecord``) sampled at ``spec.fs``
    labels : age-group index per signal
    valid : optional ``(signals, labels)``; drives the plateau scheduler,
        early stopping and best-epoch restore
    """
    spec = (spec or NetSpec()).validate()
    config = (config or FitConfig()).validate()
    signals = [_as_signal(s, spec.fs) for s in signals]
    labels = np.asarray(labels, dtype=int)
    if config.class_weights == "inverse":
        weights = class_weights_inverse(labels, spec.n_classes)
    elif config.class_weights is not None:
        weights = np.asarray(config.class_weights, dtype=float)
    else:
        weights = np.ones(spec.n_classes)
    net = RefNet(spec)
    opt = AdamW(net.params, config.initial_lr(), config.weight_decay)
    if valid is not None:
        vsig = [_as_signal(s, spec.fs) for s in valid[0]]
        vlab = np.asarray(valid[1], dtype=int)
    result = FitResult(net)
    best_loss, best_params, bad = math.inf, None, 0
    for epoch in range(config.max_epochs):
        lr_used = opt.lr
        rng = np.random.default_rng([config.seed, epoch])
        x, y = _random_crops(signals, labels, config.crops_per_record, spec.crop_len, rng)
        order = rng.permutation(len(y))
        total = 0.0
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            loss, grads = net.loss_and_grad(x[idx], y[idx], config, weights)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            opt.step(net.params, grads)
            total += loss * len(idx)
        train_loss = total / len(order)
        vloss, vauc = math.nan, math.nan
        improved, reduced = True, False
        if valid is not None:
            vloss, vauc, _ = _evaluate(net, vsig, vlab, config, weights)
            if not math.isfinite(vloss):
                raise TrainingError(f"non-finite validation loss at epoch {epoch}")
            improved = vloss < best_loss
            if improved:
                best_loss, bad = vloss, 0
                best_params = [p.copy() for p in net.params]
                result.best_epoch = epoch
            else:
                bad += 1
                if bad == config.plateau_patience:
                    opt.lr *= config.plateau_factor
                    reduced = True
        entry = EpochLog(epoch, lr_used, train_loss, vloss, vauc, improved, reduced)
        result.history.append(entry)
        if log is not None:
            log(entry)
        if valid is not None and bad >= config.early_stop_patience:
            result.stopped_early = True
            break
    if best_params is not None:
        net.params = best_params
    elif valid is None:
        result.best_epoch = len(result.history) - 1
    return result


# ---------------------------------------------------------------- inference

def predict_record(net: RefNet, record):
    """Mean of per-crop softmax outputs over non-overlapping crops."""
    crops = tile_crops(_as_signal(record, net.spec.fs), net.spec.crop_len)
    return net.predict_crops(crops).mean(axis=0)


def saliency(net: RefNet, crop, target_class=None, crop_id="", record_id=""):
    """|d logit_target / d input| per sample; target defaults to the predicted class."""
    crop = np.asarray(crop, dtype=float)
    if crop.shape != (net.spec.crop_len,):
        raise ValueError(f"crop must have {net.spec.crop_len} samples")
    logits, state = net.forward(crop[None, :], keep=True)
    if target_class is None:
        target_class = int(np.argmax(logits[0]))
    d = np.zeros_like(logits)
    d[0, target_class] = 1.0
    _, dx = net.backward(state, d)
    return AttributionMap(crop_id, record_id, np.abs(dx[0]), int(target_class))


def saliency_batch(net: RefNet, crops, targets):
    """Saliency values for many crops at once; one target class per crop."""
    crops = np.atleast_2d(np.asarray(crops, dtype=float))
    targets = np.asarray(targets, dtype=int)
    logits, state = net.forward(crops, keep=True)
    d = np.zeros_like(logits)
    d[np.arange(len(crops)), targets] = 1.0
    _, dx = net.backward(state, d)
    return np.abs(dx)


def attribution_to_dict(amap: AttributionMap, signal, fs, crop_start):
    return {"record_id": amap.record_id, "fs": float(fs), "crop_start": int(crop_start),
            "signal": np.asarray(signal, dtype=float).tolist(),
            "attribution": np.asarray(amap.values, dtype=float).tolist(),
            "target_class": int(amap.target_class)}


def attribution_from_dict(d):
    """Parse one attribution interchange record (also from external models)."""
    for key in ("record_id", "fs", "crop_start", "signal", "attribution", "target_class"):
        if key not in d:
            raise ValueError(f"attribution record lacks {key!r}")
    sig = np.asarray(d["signal"], dtype=float)
    att = np.asarray(d["attribution"], dtype=float)
    if sig.shape != att.shape:
        raise ValueError("signal and attribution differ in length")
    if np.any(att < 0):
        raise ValueError("attribution values must be >= 0")
    return {"record_id": str(d["record_id"]), "fs": float(d["fs"]),
            "crop_start": int(d["crop_start"]), "signal": sig, "attribution": att,
            "target_class": int(d["target_class"])}
