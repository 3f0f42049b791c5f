"""Small fully-connected networks in numpy with hand-written backpropagation.

Two model kinds are provided: a ReLU classifier exposing logits, hidden
activations and input gradients, and an (optionally variational) autoencoder
with sigmoid outputs scored by MSE or BCE reconstruction loss. Both are
trained with minibatch Adam/SGD and per-epoch checkpoint selection on a
holdout slice of the training data.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasets import as_generator
from .errors import DegenerateData, DimensionMismatch, DivergedLoss, DomainError
from .numeric import RngStream, softmax

BCE_CLAMP = 1e-7
CHECKPOINT_VERSION = 1


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Mlp:
    """Dense network: ReLU on hidden layers, identity on the output layer.

    Weights are stored as ``(fan_in, fan_out)`` so a batch ``x`` of shape
    ``(n, fan_in)`` maps to ``x @ W + b``.
    """

    def __init__(self, weights, biases):
        if len(weights) != len(biases) or not weights:
            raise ValueError("need matching, nonempty weight and bias lists")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        for w, b in zip(self.weights, self.biases):
            if b.shape != (w.shape[1],):
                raise ValueError("bias shape does not match weight fan-out")
        for w0, w1 in zip(self.weights, self.weights[1:]):
            if w0.shape[1] != w1.shape[0]:
                raise ValueError("layer sizes do not chain")

    @classmethod
    def init(cls, sizes, gen):
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes, sizes[1:]):
            weights.append(gen.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @property
    def sizes(self):
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    @property
    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.sizes[0]:
            raise DimensionMismatch(f"expected input dim {self.sizes[0]}, got {x.shape[-1]}")
        return x

    def forward(self, x):
        """Return ``(output, activations)``; ``activations[i]`` is the input to layer i."""
        h = self._check(x)
        acts = [h]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = z if i == last else relu(z)
            acts.append(h)
        return h, acts

    def backward(self, acts, grad_out, start_layer=None):
        """Backpropagate ``grad_out`` (gradient w.r.t. ``acts[start_layer]``).

        ``start_layer`` defaults to the output. Returns ``(param_grads, grad_input)``
        where ``param_grads`` is ordered like :attr:`params` (zeros for layers
        above ``start_layer``).
        """
        n_layers = len(self.weights)
        top = n_layers if start_layer is None else start_layer
        grads = [None] * (2 * n_layers)
        for i in range(n_layers - 1, top - 1, -1):
            grads[2 * i] = np.zeros_like(self.weights[i])
            grads[2 * i + 1] = np.zeros_like(self.biases[i])
        g = grad_out
        for i in range(top - 1, -1, -1):
            if i != n_layers - 1:
                g = g * (acts[i + 1] > 0)
            grads[2 * i] = acts[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return grads, g

    def copy(self):
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def cross_entropy(logits, y):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), y].mean()
    g = np.exp(logp)
    g[np.arange(n), y] -= 1.0
    return loss, g / n


# -- classifier ------------------------------------------------------------


class ClassifierModel:
    def __init__(self, net, classes=None):
        self.net = net
        k = net.sizes[-1]
        self.classes = np.arange(k) if classes is None else np.asarray(classes)
        self.history = None

    @property
    def input_dim(self):
        return self.net.sizes[0]

    @property
    def n_classes(self):
        return self.net.sizes[-1]

    @property
    def hidden_sizes(self):
        return self.net.sizes[1:-1]

    def forward(self, x):
        """``(penultimate, logits)``; accepts a single vector or a batch."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        logits, acts = self.net.forward(np.atleast_2d(x))
        pen = acts[-2]
        if single:
            return pen[0], logits[0]
        return pen, logits

    def logits(self, x):
        return self.forward(x)[1]

    def hidden_activations(self, x):
        """Post-ReLU activations of every hidden layer, first to last."""
        _, acts = self.net.forward(np.atleast_2d(x))
        return acts[1:-1]

    def predict_proba(self, x, temperature=1.0):
        return softmax(self.logits(x), temperature)

    def input_gradient(self, x, target, temperature=1.0):
        """Gradient of ``-log softmax(logits / T)[target]`` w.r.t. the input.

        ``x`` may be a batch, in which case ``target`` is an array of classes
        and each row gets its own per-sample gradient.
        """
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = np.atleast_2d(x)
        target = np.broadcast_to(np.asarray(target), (xb.shape[0],))
        logits, acts = self.net.forward(xb)
        g = softmax(logits, temperature)
        g[np.arange(xb.shape[0]), target] -= 1.0
        _, gx = self.net.backward(acts, g / temperature)
        return gx[0] if single else gx

    def layer_input_gradient(self, x, layer, grad_act):
        """Backpropagate a gradient on hidden layer ``layer``'s activations to the input."""
        xb = np.atleast_2d(np.asarray(x, dtype=np.float64))
        _, acts = self.net.forward(xb)
        _, gx = self.net.backward(acts, np.atleast_2d(grad_act), start_layer=layer + 1)
        return gx

    def loss_and_grads(self, x, y):
        logits, acts = self.net.forward(x)
        loss, g = cross_entropy(logits, y)
        grads, _ = self.net.backward(acts, g)
        return loss, grads


# -- autoencoder -----------------------------------------------------------


@dataclass(frozen=True)
class AutoencoderSpec:
    variational: bool = False
    loss_kind: str = "mse"
    bottleneck: int | None = None
    hidden: tuple = (32,)

    def resolve_bottleneck(self, dim):
        if self.bottleneck is not None:
            b = self.bottleneck
        else:
            b = 8 if dim <= 64 else dim // 8
        if not 0 < b < dim:
            raise ValueError(f"bottleneck {b} must be in (0, {dim})")
        return b


def elementwise_recon_loss(x, recon, kind):
    if kind == "mse":
        return (recon - x) ** 2
    if kind == "bce":
        p = np.clip(recon, BCE_CLAMP, 1.0 - BCE_CLAMP)
        return -(x * np.log(p) + (1.0 - x) * np.log(1.0 - p))
    raise ValueError(f"unknown loss kind {kind!r}")


def _recon_grad_wrt_logits(x, recon, kind):
    if kind == "mse":
        return 2.0 * (recon - x) * recon * (1.0 - recon)
    clamped = (recon < BCE_CLAMP) | (recon > 1.0 - BCE_CLAMP)
    return np.where(clamped, 0.0, recon - x)


class AutoencoderModel:
    def __init__(self, encoder, decoder, variational=False, loss_kind="mse"):
        if loss_kind not in ("mse", "bce"):
            raise ValueError(f"unknown loss kind {loss_kind!r}")
        self.encoder = encoder
        self.decoder = decoder
        self.variational = bool(variational)
        self.loss_kind = loss_kind
        b = decoder.sizes[0]
        if encoder.sizes[-1] != (2 * b if variational else b):
            raise ValueError("encoder output width does not match the bottleneck")
        if decoder.sizes[-1] != encoder.sizes[0]:
            raise ValueError("decoder output must match input dimension")
        if not b < encoder.sizes[0]:
            raise ValueError("bottleneck must be smaller than the input")
        self.history = None

    @property
    def input_dim(self):
        return self.encoder.sizes[0]

    @property
    def bottleneck(self):
        return self.decoder.sizes[0]

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_dim:
            raise DimensionMismatch(f"expected input dim {self.input_dim}, got {x.shape[-1]}")
        return x

    def encode(self, x):
        """Bottleneck code; for a VAE, the posterior means."""
        x = self._check(x)
        h, _ = self.encoder.forward(np.atleast_2d(x))
        code = h[:, :self.bottleneck]
        return code[0] if x.ndim == 1 else code

    def reconstruct(self, x):
        x = self._check(x)
        out, _ = self.decoder.forward(np.atleast_2d(self.encode(x)))
        out = sigmoid(out)
        return out[0] if x.ndim == 1 else out

    def reconstruction_loss(self, x):
        """Per-sample mean reconstruction loss under ``loss_kind``."""
        x = self._check(x)
        if self.loss_kind == "bce" and (x.min() < 0 or x.max() > 1):
            raise DomainError("BCE requires inputs in [0, 1]")
        loss = elementwise_recon_loss(np.atleast_2d(x), np.atleast_2d(self.reconstruct(x)),
                                      self.loss_kind).mean(axis=1)
        return float(loss[0]) if x.ndim == 1 else loss

    def loss_terms(self, x, noise=None):
        """Batch-mean ``(total, reconstruction, kl)`` with per-sample sums over dims.

        ``noise`` is the reparameterisation draw for a VAE (``None`` = use the
        posterior mean).
        """
        total, recon, kl, _ = self._loss_and_grads(np.atleast_2d(self._check(x)), noise, False)
        return total, recon, kl

    def loss_and_grads(self, x, noise=None):
        total, _, _, grads = self._loss_and_grads(np.atleast_2d(x), noise, True)
        return total, grads

    @property
    def params(self):
        return self.encoder.params + self.decoder.params

    def _loss_and_grads(self, x, noise, want_grads):
        n = x.shape[0]
        b = self.bottleneck
        h, enc_acts = self.encoder.forward(x)
        if self.variational:
            mu, logvar = h[:, :b], h[:, b:]
            std = np.exp(0.5 * logvar)
            z = mu if noise is None else mu + std * noise
            kl_each = 0.5 * (np.exp(logvar) + mu * mu - 1.0 - logvar).sum(axis=1)
        else:
            z = h
            kl_each = np.zeros(n)
        out, dec_acts = self.decoder.forward(z)
        recon = sigmoid(out)
        rec_each = elementwise_recon_loss(x, recon, self.loss_kind).sum(axis=1)
        rec, kl = rec_each.mean(), kl_each.mean()
        total = rec + kl
        if not want_grads:
            return total, rec, kl, None
        g_out = _recon_grad_wrt_logits(x, recon, self.loss_kind) / n
        dec_grads, g_z = self.decoder.backward(dec_acts, g_out)
        if self.variational:
            g_mu = g_z + mu / n
            g_lv = 0.5 * (np.exp(logvar) - 1.0) / n
            if noise is not None:
                g_lv = g_lv + g_z * noise * 0.5 * std
            g_h = np.hstack([g_mu, g_lv])
        else:
            g_h = g_z
        enc_grads, _ = self.encoder.backward(enc_acts, g_h)
        return total, rec, kl, enc_grads + dec_grads


# -- training --------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    holdout: float = 0.05
    hidden: tuple = (64, 32)
    rng: RngStream = field(default_factory=lambda: RngStream(0))

    def __post_init__(self):
        if not 0 < self.holdout <= 0.5:
            raise ValueError(f"holdout fraction must be in (0, 0.5], got {self.holdout}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("epochs, batch_size and lr must be positive")


@dataclass
class TrainHistory:
    train_loss: list
    holdout_loss: list
    best_epoch: int
    batch_terms: list = field(default_factory=list)


class _Adam:
    def __init__(self, params, cfg):
        self.cfg = cfg
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads):
        cfg = self.cfg
        if cfg.optimizer == "sgd":
            for p, g in zip(params, grads):
                p -= cfg.lr * g
            return
        b1, b2 = cfg.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


def _holdout_split(n, frac, gen):
    perm = gen.permutation(n)
    n_hold = max(1, int(round(frac * n)))
    if n - n_hold < 1:
        raise DegenerateData("not enough samples for a holdout split")
    return perm[n_hold:], perm[:n_hold]


def _unpack(data):
    if hasattr(data, "x") and hasattr(data, "task_class"):
        return np.asarray(data.x, dtype=np.float64), np.asarray(data.task_class)
    x, y = data
    return np.asarray(x, dtype=np.float64), None if y is None else np.asarray(y)


def _check_unit_interval(x):
    if x.size == 0 or not np.all(np.isfinite(x)) or x.min() < 0 or x.max() > 1:
        raise DegenerateData("inputs must be finite and within [0, 1]")


def train_classifier(d_tr, cfg):
    """Train a ReLU classifier on ``d_tr`` (a SampleSet or ``(x, y)``).

    Returns the per-epoch checkpoint with the lowest holdout cross-entropy.
    """
    x, y_raw = _unpack(d_tr)
    _check_unit_interval(x)
    classes, y = np.unique(y_raw, return_inverse=True)
    if classes.size < 2:
        raise DegenerateData("classifier training needs at least two task classes")
    gen = cfg.rng.generator()
    tr, ho = _holdout_split(len(x), cfg.holdout, gen)
    net = Mlp.init((x.shape[1],) + tuple(cfg.hidden) + (classes.size,), gen)
    model = ClassifierModel(net, classes)
    opt = _Adam(net.params, cfg)
    best, best_loss, best_epoch = net.copy(), np.inf, 0
    train_hist, hold_hist = [], []
    for epoch in range(cfg.epochs):
        order = tr[gen.permutation(tr.size)]
        losses = []
        for start in range(0, order.size, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = model.loss_and_grads(x[idx], y[idx])
            if not np.isfinite(loss):
                raise DivergedLoss(f"non-finite training loss at epoch {epoch}")
            opt.step(net.params, grads)
            losses.append(loss)
        hold, _ = cross_entropy(model.logits(x[ho]), y[ho])
        if not np.isfinite(hold):
            raise DivergedLoss(f"non-finite holdout loss at epoch {epoch}")
        train_hist.append(float(np.mean(losses)))
        hold_hist.append(float(hold))
        if hold < best_loss:
            best, best_loss, best_epoch = net.copy(), hold, epoch
    result = ClassifierModel(best, classes)
    result.history = TrainHistory(train_hist, hold_hist, best_epoch)
    return result


def train_autoencoder(d_tr, cfg, arch=AutoencoderSpec()):
    """Train an AE (or VAE, maximising the ELBO) on the inputs of ``d_tr``."""
    x, _ = _unpack(d_tr) if not isinstance(d_tr, np.ndarray) else (np.asarray(d_tr, float), None)
    _check_unit_interval(x)
    if len(x) < 2:
        raise DegenerateData("need at least two samples")
    gen = cfg.rng.generator()
    d = x.shape[1]
    b = arch.resolve_bottleneck(d)
    hidden = tuple(arch.hidden)
    enc = Mlp.init((d,) + hidden + ((2 * b) if arch.variational else b,), gen)
    dec = Mlp.init((b,) + hidden[::-1] + (d,), gen)
    model = AutoencoderModel(enc, dec, arch.variational, arch.loss_kind)
    tr, ho = _holdout_split(len(x), cfg.holdout, gen)
    params = model.params
    opt = _Adam(params, cfg)
    best = (enc.copy(), dec.copy())
    best_loss, best_epoch = np.inf, 0
    train_hist, hold_hist, terms = [], [], []
    for epoch in range(cfg.epochs):
        order = tr[gen.permutation(tr.size)]
        losses = []
        for start in range(0, order.size, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            noise = gen.standard_normal((idx.size, b)) if arch.variational else None
            total, rec, kl, grads = model._loss_and_grads(x[idx], noise, True)
            if not np.isfinite(total):
                raise DivergedLoss(f"non-finite training loss at epoch {epoch}")
            opt.step(params, grads)
            losses.append(total)
            terms.append((total, rec, kl))
        hold, _, _ = model.loss_terms(x[ho])
        if not np.isfinite(hold):
            raise DivergedLoss(f"non-finite holdout loss at epoch {epoch}")
        train_hist.append(float(np.mean(losses)))
        hold_hist.append(float(hold))
        if hold < best_loss:
            best, best_loss, best_epoch = (enc.copy(), dec.copy()), hold, epoch
    result = AutoencoderModel(best[0], best[1], arch.variational, arch.loss_kind)
    result.history = TrainHistory(train_hist, hold_hist, best_epoch, terms)
    return result


# -- checkpoints -----------------------------------------------------------


def _net_arrays(prefix, net):
    out = {}
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        out[f"{prefix}.W{i}"] = w
        out[f"{prefix}.b{i}"] = b
    return out


def _net_from(arrays, prefix, n_layers):
    return Mlp([arrays[f"{prefix}.W{i}"] for i in range(n_layers)],
               [arrays[f"{prefix}.b{i}"] for i in range(n_layers)])


def model_arrays(model, prefix="model"):
    """Flatten a model into ``(meta, arrays)`` for embedding in npz containers."""
    if isinstance(model, ClassifierModel):
        meta = {"kind": "classifier", "layers": len(model.net.weights),
                "classes": [int(c) for c in model.classes]}
        return meta, _net_arrays(f"{prefix}.net", model.net)
    if isinstance(model, AutoencoderModel):
        meta = {"kind": "autoencoder", "variational": model.variational,
                "loss_kind": model.loss_kind, "enc_layers": len(model.encoder.weights),
                "dec_layers": len(model.decoder.weights)}
        arrays = _net_arrays(f"{prefix}.enc", model.encoder)
        arrays.update(_net_arrays(f"{prefix}.dec", model.decoder))
        return meta, arrays
    raise TypeError(f"cannot serialise {type(model).__name__}")


def model_from_arrays(meta, arrays, prefix="model"):
    if meta["kind"] == "classifier":
        return ClassifierModel(_net_from(arrays, f"{prefix}.net", meta["layers"]), meta["classes"])
    if meta["kind"] == "autoencoder":
        return AutoencoderModel(_net_from(arrays, f"{prefix}.enc", meta["enc_layers"]),
                                _net_from(arrays, f"{prefix}.dec", meta["dec_layers"]),
                                meta["variational"], meta["loss_kind"])
    raise ValueError(f"unknown model kind {meta['kind']!r}")


def save_model(path, model):
    meta, arrays = model_arrays(model)
    meta["version"] = CHECKPOINT_VERSION
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)


def load_model(path):
    with np.load(Path(path), allow_pickle=False) as f:
        meta = json.loads(str(f["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        arrays = {k: f[k] for k in f.files if k != "__meta__"}
    return model_from_arrays(meta, arrays)


def clone(model):
    return copy.deepcopy(model)
