"""Out-of-distribution detectors behind one fit / score / predict surface.

Every score is oriented so that larger means "more likely out of
distribution", and every detector is turned into a classifier by the same
rule: predict "out" when ``score > threshold``, with the threshold chosen by
:func:`calibrate_threshold` to maximise balanced accuracy.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .datasets import IN, OUT, as_generator
from .errors import DimensionMismatch, MissingModel, SingleClassValidation
from .nnet import model_arrays, model_from_arrays
from .numeric import cholesky_factor, mean_and_tied_covariance, nearest_indices, softmax

DETECTOR_VERSION = 1
IMAGE_KNN_POOL = 1000
DEFAULT_K = 8

AUTOENCODER_KEYS = ("ae_mse", "ae_bce", "vae_mse", "vae_bce")
RECONST_METHODS = {f"reconst_{key}": key for key in AUTOENCODER_KEYS}

CLASSIFIER_METHODS = (
    "prob_threshold", "score_svm", "binary_classifier", "feature_knn",
    "odin", "mahalanobis_single", "mahalanobis_multi",
)
AUXILIARY_METHODS = tuple(RECONST_METHODS) + ("ae_knn",)
DATA_METHODS = ("image_knn",)
METHODS = DATA_METHODS + CLASSIFIER_METHODS + AUXILIARY_METHODS

DEFAULT_PARAMS = {
    "image_knn": {"k": DEFAULT_K},
    "prob_threshold": {},
    "score_svm": {"C": 1.0},
    "binary_classifier": {"lr": 0.5, "epochs": 300},
    "feature_knn": {"k": DEFAULT_K},
    "odin": {"T": 1000.0, "eps": 0.001},
    "mahalanobis_single": {"eps": 0.0},
    "mahalanobis_multi": {"eps": 0.0, "lr": 0.5, "epochs": 300},
    "ae_knn": {"k": DEFAULT_K, "autoencoder": "ae_mse"},
    **{m: {} for m in RECONST_METHODS},
}


def is_auxiliary(method):
    return method in AUXILIARY_METHODS


def required_autoencoder(method, params=None):
    if method in RECONST_METHODS:
        return RECONST_METHODS[method]
    if method == "ae_knn":
        return (params or {}).get("autoencoder", "ae_mse")
    return None


@dataclass(frozen=True)
class DetectorSpec:
    method: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown detector method {self.method!r}")
        merged = dict(DEFAULT_PARAMS[self.method])
        unknown = set(self.params) - set(merged)
        if unknown:
            raise ValueError(f"{self.method} does not take parameters {sorted(unknown)}")
        merged.update(self.params)
        object.__setattr__(self, "params", merged)

    def to_json(self):
        return {"method": self.method, "params": self.params}


@dataclass
class Models:
    """Trained networks a detector may depend on."""

    classifier: object = None
    autoencoders: dict = field(default_factory=dict)


def _as_out(labels):
    a = np.asarray(labels)
    if a.dtype == bool:
        return a
    if a.dtype.kind in "iu":
        return a.astype(bool)
    return a == OUT


def balanced_accuracy(pred_out, is_out):
    pred_out = np.asarray(pred_out, dtype=bool)
    is_out = _as_out(is_out)
    tpr = pred_out[is_out].mean()
    tnr = (~pred_out[~is_out]).mean()
    return 0.5 * (tpr + tnr)


def calibrate_threshold(scores, labels):
    """Threshold maximising balanced accuracy of ``score > threshold`` => out.

    Candidates are the midpoints between consecutive distinct scores plus a
    sentinel below the minimum and one above the maximum, so the all-out and
    all-in rules are always available. Ties go to the smallest threshold.
    """
    s = np.asarray(scores, dtype=np.float64)
    out = _as_out(labels)
    if s.shape != out.shape or s.ndim != 1:
        raise DimensionMismatch("scores and labels must be 1-D of equal length")
    if out.all() or not out.any():
        raise SingleClassValidation("calibration needs both in and out samples")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    u = np.unique(s)
    pad = max(1.0, abs(u[0]), abs(u[-1]))
    cands = np.concatenate([[u[0] - pad], 0.5 * (u[:-1] + u[1:]), [u[-1] + pad]])
    so, si = np.sort(s[out]), np.sort(s[~out])
    tp = so.size - np.searchsorted(so, cands, side="right")
    tn = np.searchsorted(si, cands, side="right")
    ba = 0.5 * (tp / so.size + tn / si.size)
    return float(cands[int(np.argmax(ba))])


# -- small linear learners ---------------------------------------------------


def _standardizer(x):
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd[sd < 1e-12] = 1.0
    return mu, sd


def fit_logistic(features, is_out, lr=0.5, epochs=300, l2=1e-4):
    """Full-batch gradient-descent logistic regression on standardised features.

    Returns ``(mu, sd, w, b)``; the out-probability is ``sigmoid(((x-mu)/sd) @ w + b)``.
    """
    x = np.asarray(features, dtype=np.float64)
    y = _as_out(is_out).astype(np.float64)
    mu, sd = _standardizer(x)
    z = (x - mu) / sd
    w = np.zeros(z.shape[1])
    b = 0.0
    n = len(y)
    for _ in range(int(epochs)):
        p = 1.0 / (1.0 + np.exp(-(z @ w + b)))
        g = p - y
        w -= lr * (z.T @ g / n + l2 * w)
        b -= lr * g.mean()
    return mu, sd, w, b


def logistic_proba(state, x):
    mu, sd, w, b = state
    return 1.0 / (1.0 + np.exp(-(((x - mu) / sd) @ w + b)))


def fit_linear_svm(features, is_out, C=1.0, max_epochs=200, tol=1e-3, gen=None):
    """Linear SVM with hinge loss, solved by dual coordinate descent.

    Minimises ``0.5 |(w, b)|^2 + C * sum(max(0, 1 - y (w.z + b)))`` over
    standardised features ``z`` with y = +1 for out (the bias is regularised
    as an extra constant feature). Stops when the projected-gradient spread
    falls below ``tol``.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.where(_as_out(is_out), 1.0, -1.0)
    mu, sd = _standardizer(x)
    z = np.hstack([(x - mu) / sd, np.ones((len(y), 1))])
    rows = (z * y[:, None]).tolist()
    qii = (z * z).sum(axis=1).tolist()
    n, dim = z.shape
    alpha = [0.0] * n
    w = [0.0] * dim
    order = list(range(n))
    for _ in range(int(max_epochs)):
        if gen is not None:
            order = gen.permutation(n).tolist()
        pg_max, pg_min = -math.inf, math.inf
        for i in order:
            r = rows[i]
            g = sum(wj * rj for wj, rj in zip(w, r)) - 1.0
            a = alpha[i]
            if a == 0.0:
                pg = min(g, 0.0)
            elif a == C:
                pg = max(g, 0.0)
            else:
                pg = g
            pg_max, pg_min = max(pg_max, pg), min(pg_min, pg)
            if pg != 0.0:
                a_new = min(max(a - g / qii[i], 0.0), C)
                delta = a_new - a
                if delta != 0.0:
                    alpha[i] = a_new
                    w = [wj + delta * rj for wj, rj in zip(w, r)]
        if pg_max - pg_min < tol:
            break
    w = np.array(w)
    return mu, sd, w[:-1], float(w[-1])


def svm_margin(state, x):
    mu, sd, w, b = state
    return ((x - mu) / sd) @ w + b


# -- Mahalanobis helpers -----------------------------------------------------


def mahalanobis_min(features, means, chol):
    """Squared Mahalanobis distance to the closest class mean, and that class index."""
    f = np.atleast_2d(features)
    d2 = np.empty((f.shape[0], means.shape[0]))
    for c, mu in enumerate(means):
        sol = solve_triangular(chol, (f - mu).T, lower=True, check_finite=False)
        d2[:, c] = (sol * sol).sum(axis=0)
    idx = np.argmin(d2, axis=1)
    return d2[np.arange(f.shape[0]), idx], idx


def _mahalanobis_perturbed(classifier, x, layer, means, chol, eps):
    """Min class distance at hidden ``layer`` after an input step that lowers it."""
    if eps > 0:
        f = classifier.hidden_activations(x)[layer]
        _, idx = mahalanobis_min(f, means, chol)
        diff = f - means[idx]
        grad_f = 2.0 * solve_triangular(
            chol.T, solve_triangular(chol, diff.T, lower=True), lower=False).T
        gx = classifier.layer_input_gradient(x, layer, grad_f)
        x = np.clip(x - eps * np.sign(gx), 0.0, 1.0)
    f = classifier.hidden_activations(x)[layer]
    return mahalanobis_min(f, means, chol)[0]


def _class_gaussians(classifier, d_tr, layer):
    feats = classifier.hidden_activations(d_tr.x)[layer]
    _, means, cov = mean_and_tied_covariance(feats, d_tr.task_class)
    return means, cholesky_factor(cov)


# -- per-method fit / score ----------------------------------------------------


def _penultimate(models, x):
    return models.classifier.forward(np.atleast_2d(x))[0]


def _knn_out_fraction(pool, pool_out, x, k):
    idx, _ = nearest_indices(x, pool, k)
    return pool_out[idx].mean(axis=1)


def _fit_image_knn(p, models, d_tr, d_val, gen):
    n = min(IMAGE_KNN_POOL, len(d_tr))
    idx = np.sort(gen.choice(len(d_tr), size=n, replace=False))
    return {"pool": d_tr.x[idx].copy()}


def _score_image_knn(p, state, models, x):
    idx, dist = nearest_indices(x, state["pool"], int(p["k"]))
    return dist[:, -1]


def _score_prob(p, state, models, x):
    return 1.0 - softmax(models.classifier.logits(np.atleast_2d(x)), 1.0).max(axis=1)


def _fit_svm(p, models, d_tr, d_val, gen):
    logits = models.classifier.logits(d_val.x)
    mu, sd, w, b = fit_linear_svm(logits, d_val.is_out, float(p["C"]), gen=gen)
    return {"mu": mu, "sd": sd, "w": w, "b": np.float64(b)}


def _score_svm(p, state, models, x):
    s = state
    return svm_margin((s["mu"], s["sd"], s["w"], s["b"]), models.classifier.logits(np.atleast_2d(x)))


def _fit_binary(p, models, d_tr, d_val, gen):
    mu, sd, w, b = fit_logistic(_penultimate(models, d_val.x), d_val.is_out, p["lr"], p["epochs"])
    return {"mu": mu, "sd": sd, "w": w, "b": np.float64(b)}


def _score_binary(p, state, models, x):
    s = state
    return logistic_proba((s["mu"], s["sd"], s["w"], s["b"]), _penultimate(models, x))


def _fit_feature_knn(p, models, d_val_features, d_val):
    if int(p["k"]) > len(d_val):
        raise ValueError(f"k={p['k']} exceeds the {len(d_val)} calibration samples")
    return {"pool": d_val_features, "pool_out": d_val.is_out.astype(np.float64)}


def _score_pool_knn(p, state, feats):
    return _knn_out_fraction(state["pool"], state["pool_out"], feats, int(p["k"]))


def _score_odin(p, state, models, x):
    clf = models.classifier
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    T, eps = float(p["T"]), float(p["eps"])
    if eps > 0:
        pred = np.argmax(clf.logits(x), axis=1)
        gx = clf.input_gradient(x, pred, T)
        x = np.clip(x - eps * np.sign(gx), 0.0, 1.0)
    return 1.0 - softmax(clf.logits(x), T).max(axis=1)


def _fit_maha_single(p, models, d_tr, d_val, gen):
    layer = len(models.classifier.hidden_sizes) - 1
    means, chol = _class_gaussians(models.classifier, d_tr, layer)
    return {"means": means, "chol": chol}


def _score_maha_single(p, state, models, x):
    layer = len(models.classifier.hidden_sizes) - 1
    return _mahalanobis_perturbed(models.classifier, np.atleast_2d(x), layer,
                                  state["means"], state["chol"], float(p["eps"]))


def _maha_layer_scores(p, state, models, x):
    n_layers = len(models.classifier.hidden_sizes)
    cols = [_mahalanobis_perturbed(models.classifier, np.atleast_2d(x), layer,
                                   state[f"means{layer}"], state[f"chol{layer}"], float(p["eps"]))
            for layer in range(n_layers)]
    return np.log1p(np.stack(cols, axis=1))


def _fit_maha_multi(p, models, d_tr, d_val, gen):
    state = {}
    for layer in range(len(models.classifier.hidden_sizes)):
        state[f"means{layer}"], state[f"chol{layer}"] = _class_gaussians(models.classifier, d_tr, layer)
    feats = _maha_layer_scores(p, state, models, d_val.x)
    mu, sd, w, b = fit_logistic(feats, d_val.is_out, p["lr"], p["epochs"])
    state.update({"mu": mu, "sd": sd, "w": w, "b": np.float64(b)})
    return state


def _score_maha_multi(p, state, models, x):
    s = state
    return logistic_proba((s["mu"], s["sd"], s["w"], s["b"]), _maha_layer_scores(p, s, models, x))


def _autoencoder(models, key):
    ae = models.autoencoders.get(key)
    if ae is None:
        raise MissingModel(f"autoencoder {key!r} is required")
    return ae


def _score_reconst(method):
    def score(p, state, models, x):
        return np.atleast_1d(_autoencoder(models, RECONST_METHODS[method]).reconstruction_loss(
            np.atleast_2d(x)))
    return score


_FIT = {
    "image_knn": _fit_image_knn,
    "prob_threshold": lambda p, m, tr, val, g: {},
    "score_svm": _fit_svm,
    "binary_classifier": _fit_binary,
    "feature_knn": lambda p, m, tr, val, g: _fit_feature_knn(p, m, _penultimate(m, val.x), val),
    "odin": lambda p, m, tr, val, g: {},
    "mahalanobis_single": _fit_maha_single,
    "mahalanobis_multi": _fit_maha_multi,
    "ae_knn": lambda p, m, tr, val, g: _fit_feature_knn(
        p, m, _autoencoder(m, p["autoencoder"]).encode(val.x), val),
    **{name: (lambda p, m, tr, val, g: {}) for name in RECONST_METHODS},
}

_SCORE = {
    "image_knn": _score_image_knn,
    "prob_threshold": _score_prob,
    "score_svm": _score_svm,
    "binary_classifier": _score_binary,
    "feature_knn": lambda p, s, m, x: _score_pool_knn(p, s, _penultimate(m, x)),
    "odin": _score_odin,
    "mahalanobis_single": _score_maha_single,
    "mahalanobis_multi": _score_maha_multi,
    "ae_knn": lambda p, s, m, x: _score_pool_knn(
        p, s, np.atleast_2d(_autoencoder(m, p["autoencoder"]).encode(np.atleast_2d(x)))),
    **{name: _score_reconst(name) for name in RECONST_METHODS},
}


def _check_models(spec, models):
    if spec.method in CLASSIFIER_METHODS and models.classifier is None:
        raise MissingModel(f"{spec.method} requires a trained classifier")
    key = required_autoencoder(spec.method, spec.params)
    if key is not None:
        _autoencoder(models, key)


class FittedDetector:
    """A calibrated scorer; immutable after :func:`fit`."""

    def __init__(self, spec, state, threshold, models):
        if not math.isfinite(threshold):
            raise ValueError("threshold must be finite")
        self.spec = spec
        self.state = state
        self.threshold = float(threshold)
        self.models = models

    @property
    def method(self):
        return self.spec.method

    def _input_dim(self):
        if self.spec.method == "image_knn":
            return self.state["pool"].shape[1]
        if self.models.classifier is not None and self.spec.method in CLASSIFIER_METHODS:
            return self.models.classifier.input_dim
        return _autoencoder(self.models, required_autoencoder(self.spec.method, self.spec.params)).input_dim

    def score(self, x):
        """Out-of-distribution score(s); a float for one vector, an array for a batch."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self._input_dim():
            raise DimensionMismatch(f"expected input dim {self._input_dim()}, got {x.shape[-1]}")
        s = np.asarray(_SCORE[self.spec.method](self.spec.params, self.state, self.models, x),
                       dtype=np.float64)
        return float(s[0]) if x.ndim == 1 else s

    def predict(self, x):
        s = self.score(x)
        if np.ndim(s) == 0:
            return OUT if s > self.threshold else IN
        return np.where(s > self.threshold, OUT, IN)

    def predict_out(self, x):
        return np.asarray(self.score(np.atleast_2d(x))) > self.threshold


def fit(spec, models, d_tr, d_val, rng, d_calib=None):
    """Fit ``spec`` on calibration data and set its threshold.

    ``d_val`` (a SampleSet with both in and out samples) trains the learned
    state; the threshold is calibrated on ``d_calib`` (defaults to ``d_val``).
    ``d_tr`` is the task-training data (image KNN pool, Mahalanobis class
    statistics).
    """
    if not isinstance(spec, DetectorSpec):
        spec = DetectorSpec(spec)
    _check_models(spec, models)
    if d_val.is_out.all() or not d_val.is_out.any():
        raise SingleClassValidation("validation data must contain both in and out samples")
    gen = as_generator(rng)
    state = _FIT[spec.method](spec.params, models, d_tr, d_val, gen)
    det = FittedDetector(spec, state, 0.0, models)
    calib = d_val if d_calib is None else d_calib
    det.threshold = calibrate_threshold(det.score(calib.x), calib.is_out)
    return det


# -- serialisation -----------------------------------------------------------


def save_detector(path, det):
    """Write spec, learned state, threshold and the models it uses to one npz file."""
    arrays, scalars = {}, {}
    for k, v in det.state.items():
        if isinstance(v, np.ndarray) and v.ndim > 0:
            arrays[f"state.{k}"] = v
        else:
            scalars[k] = float(v)
    model_meta = {}
    if det.models.classifier is not None and det.spec.method in CLASSIFIER_METHODS:
        meta, arr = model_arrays(det.models.classifier, "classifier")
        model_meta["classifier"] = meta
        arrays.update(arr)
    key = required_autoencoder(det.spec.method, det.spec.params)
    if key is not None:
        meta, arr = model_arrays(det.models.autoencoders[key], f"ae.{key}")
        model_meta[f"ae.{key}"] = meta
        arrays.update(arr)
    meta = {"version": DETECTOR_VERSION, "spec": det.spec.to_json(),
            "threshold": det.threshold.hex(), "scalars": {k: v.hex() for k, v in scalars.items()},
            "models": model_meta}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)


def load_detector(path):
    with np.load(path, allow_pickle=False) as f:
        meta = json.loads(str(f["__meta__"]))
        if meta.get("version") != DETECTOR_VERSION:
            raise ValueError(f"unsupported detector version {meta.get('version')}")
        arrays = {k: f[k] for k in f.files if k != "__meta__"}
    state = {k[len("state."):]: v for k, v in arrays.items() if k.startswith("state.")}
    state.update({k: np.float64(float.fromhex(v)) for k, v in meta["scalars"].items()})
    models = Models()
    for prefix, mm in meta["models"].items():
        model = model_from_arrays(mm, arrays, prefix)
        if prefix == "classifier":
            models.classifier = model
        else:
            models.autoencoders[prefix[len("ae."):]] = model
    spec = DetectorSpec(meta["spec"]["method"], meta["spec"]["params"])
    return FittedDetector(spec, state, float.fromhex(meta["threshold"]), models)
