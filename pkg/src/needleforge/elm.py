"""Extreme Learning Machine: fixed random sigmoid layer, ridge output layer.

Inputs are ``[E_ff, e]`` and outputs the effector displacement ``C``, all in the
dataset units (mm).  Training is a single closed-form solve.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg as sla
from scipy.special import expit

from .config import TrainConfig
from .errors import DataError, UsageError
from .io import atomic_write_text

log = logging.getLogger(__name__)

N_INPUTS = 6
N_OUTPUTS = 3
SCALE_FLOOR = 1e-12


@dataclass(frozen=True)
class ElmModel:
    seed: int
    hidden_count: int
    w_in: np.ndarray  # (hidden, inputs)
    bias: np.ndarray  # (hidden,)
    beta: np.ndarray  # (outputs, hidden)
    input_mean: np.ndarray = None
    input_scale: np.ndarray = None
    output_mean: np.ndarray = None
    output_scale: np.ndarray = None
    ridge: float = 0.0
    trained_on: str = ""
    trained: bool = False

    @property
    def normalized(self):
        return self.input_mean is not None and self.output_mean is not None


def init_model(cfg: TrainConfig, n_inputs=N_INPUTS, n_outputs=N_OUTPUTS) -> ElmModel:
    """Untrained model: uniform [-1, 1] input weights and biases, zero output layer."""
    if cfg.hidden_count < 1:
        raise UsageError("hidden_count must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    w_in = rng.uniform(-1.0, 1.0, size=(cfg.hidden_count, n_inputs))
    bias = rng.uniform(-1.0, 1.0, size=cfg.hidden_count)
    return ElmModel(seed=cfg.seed, hidden_count=cfg.hidden_count, w_in=w_in, bias=bias,
                    beta=np.zeros((n_outputs, cfg.hidden_count)), ridge=cfg.ridge)


def fit_normalization(model: ElmModel, X, Y) -> ElmModel:
    X, Y = np.asarray(X, dtype=float), np.asarray(Y, dtype=float)
    return replace(model, input_mean=X.mean(axis=0),
                   input_scale=np.maximum(X.std(axis=0), SCALE_FLOOR),
                   output_mean=Y.mean(axis=0),
                   output_scale=np.maximum(Y.std(axis=0), SCALE_FLOOR))


def hidden_features(model: ElmModel, x):
    """Sigmoid activations; accepts one input vector or an (N, inputs) batch."""
    if not model.normalized:
        raise UsageError("model normalization is not set")
    xh = (np.asarray(x, dtype=float) - model.input_mean) / model.input_scale
    return expit(xh @ model.w_in.T + model.bias)


def _check_finite(name, A):
    bad = np.flatnonzero(~np.all(np.isfinite(A), axis=1))
    if len(bad):
        raise DataError(f"non-finite {name} at row {int(bad[0])}")


def solve_output_weights(H, T, ridge):
    """``(H^T H + ridge I)^-1 H^T T`` via Cholesky of the Gram matrix.

    The Gram matrix and right-hand side are accumulated in extended precision
    and the solution gets two refinement passes, so ill-conditioned feature sets
    still reproduce the exact normal-equation solution closely.
    """
    Hl = H.astype(np.longdouble)
    G = Hl.T @ Hl
    G[np.diag_indices_from(G)] += ridge
    B = Hl.T @ T.astype(np.longdouble)
    G64 = G.astype(float)
    try:
        fac = sla.cho_factor(G64)
        solve = lambda rhs: sla.cho_solve(fac, rhs)
    except np.linalg.LinAlgError:
        if ridge > 0:
            raise DataError("regularized Gram matrix is not positive definite") from None
        log.warning("singular Gram matrix with ridge 0; using the minimum-norm solution")
        pinv = np.linalg.pinv(G64, hermitian=True)
        solve = lambda rhs: pinv @ rhs
    X = solve(B.astype(float))
    for _ in range(2):
        R = (B - G @ X.astype(np.longdouble)).astype(float)
        X = X + solve(R)
    return X


def train(model: ElmModel, X, Y, ridge=None, trained_on="") -> ElmModel:
    """Fit normalization and solve the output layer in closed form."""
    X, Y = np.asarray(X, dtype=float), np.asarray(Y, dtype=float)
    if X.ndim != 2 or Y.ndim != 2 or len(X) != len(Y) or len(X) < 1:
        raise DataError(f"training data shapes {X.shape} and {Y.shape} do not match")
    if X.shape[1] != model.w_in.shape[1] or Y.shape[1] != model.beta.shape[0]:
        raise DataError("training data width does not match the model")
    _check_finite("input", X)
    _check_finite("target", Y)
    ridge = model.ridge if ridge is None else float(ridge)
    if ridge < 0:
        raise UsageError("ridge lambda must be >= 0")
    model = fit_normalization(model, X, Y)
    H = hidden_features(model, X)
    T = (Y - model.output_mean) / model.output_scale
    beta = solve_output_weights(H, T, ridge).T
    return replace(model, beta=beta, ridge=ridge, trained_on=trained_on, trained=True)


def predict(model: ElmModel, x):
    if not model.trained:
        raise UsageError("model is not trained")
    return model.output_mean + model.output_scale * (hidden_features(model, x) @ model.beta.T)


def rmse(model: ElmModel, X, Y):
    """Per-component RMSE over all outputs, in the data units (mm)."""
    Y = np.asarray(Y, dtype=float)
    if len(Y) == 0:
        raise UsageError("rmse of an empty set")
    r = predict(model, X) - Y
    return float(np.sqrt(np.mean(r * r)))


def to_dict(model: ElmModel):
    if not model.trained:
        raise UsageError("only trained models can be saved")
    arr = lambda a: np.asarray(a, dtype=float).tolist()
    return {
        "seed": model.seed, "hidden_count": model.hidden_count,
        "w_in": arr(model.w_in), "bias": arr(model.bias), "beta": arr(model.beta),
        "input_mean": arr(model.input_mean), "input_scale": arr(model.input_scale),
        "output_mean": arr(model.output_mean), "output_scale": arr(model.output_scale),
        "lambda": model.ridge, "trained_on": model.trained_on,
    }


def from_dict(d) -> ElmModel:
    try:
        a = lambda k: np.asarray(d[k], dtype=float)
        model = ElmModel(seed=int(d["seed"]), hidden_count=int(d["hidden_count"]),
                         w_in=a("w_in"), bias=a("bias"), beta=a("beta"),
                         input_mean=a("input_mean"), input_scale=a("input_scale"),
                         output_mean=a("output_mean"), output_scale=a("output_scale"),
                         ridge=float(d["lambda"]), trained_on=str(d.get("trained_on", "")),
                         trained=True)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed model document: {exc}") from None
    h = model.hidden_count
    if model.w_in.shape[0] != h or model.bias.shape != (h,) or model.beta.shape[1] != h:
        raise DataError("model arrays disagree with hidden_count")
    if np.any(model.input_scale <= 0) or np.any(model.output_scale <= 0):
        raise DataError("model scales must be positive")
    return model


def save_model(model: ElmModel, path):
    # json writes floats with repr, which round-trips exactly
    atomic_write_text(path, json.dumps(to_dict(model), indent=1) + "\n")


def load_model(path) -> ElmModel:
    try:
        with open(path) as fh:
            return from_dict(json.load(fh))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
