"""Vanilla tanh RNN and a linear per-step model, both with exact gradients
and Hessian-vector products of the weighted squared loss.

Every model works on batched arrays: inputs ``x`` of shape ``(n, T, d_in)``,
aligned targets ``Y`` and weights ``W`` of shape ``(n, T, horizon+1)``. The
loss is ``sum W * (Y - f)**2``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from .dataset import SequenceDataset, WeightVector
from .numerics import ConformabilityError, RngStream

log = logging.getLogger(__name__)


class ContractViolation(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, message: str = ""):
        super().__init__(message or f"training loss became non-finite at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class ForwardTrace:
    hidden: np.ndarray       # (T, H)
    predictions: np.ndarray  # (T, horizon+1)
    losses: np.ndarray | None = None


class _Model:
    """Shared plumbing: parameter layout and dataset-level wrappers.

    ``l2`` adds ``l2/2 * ||theta||^2`` to the dataset-level loss, gradient and
    HVP (not to the array-level data terms). It is 0 unless a caller asks for
    a ridge-stabilised objective.
    """

    shapes: dict[str, tuple[int, ...]]
    l2: float = 0.0

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes.values())

    def unpack(self, theta: np.ndarray) -> dict[str, np.ndarray]:
        """Named views into ``theta`` (they alias its storage)."""
        theta = np.asarray(theta)
        if theta.shape != (self.n_params,):
            raise ConformabilityError(f"expected {self.n_params} parameters, got shape {theta.shape}")
        out, k = {}, 0
        for name, shape in self.shapes.items():
            size = int(np.prod(shape))
            out[name] = theta[k:k + size].reshape(shape)
            k += size
        return out

    def wrap(self, theta) -> "RnnParams":
        return RnnParams(self, np.asarray(theta, dtype=np.float64))

    def _check_x(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[2] != self.d_in:
            raise ConformabilityError(f"input must be (n, T, {self.d_in}), got {x.shape}")
        return x

    def to_dict(self) -> dict:
        raise NotImplementedError


class RNN(_Model):
    """Single-layer tanh recurrence with a linear readout per horizon.

    ``h_t = tanh(x_t W_xh + h_{t-1} W_hh + b_h)``, ``h_0 = 0``,
    ``f_t = h_t W_hy^T + b_y``.
    """

    kind = "rnn"

    def __init__(self, hidden: int = 20, d_in: int = 1, horizon: int = 0, l2: float = 0.0):
        self.hidden, self.d_in, self.horizon = int(hidden), int(d_in), int(horizon)
        self.l2 = float(l2)
        H, O = self.hidden, self.horizon + 1
        self.shapes = {
            "W_xh": (self.d_in, H),
            "W_hh": (H, H),
            "b_h": (H,),
            "W_hy": (O, H),
            "b_y": (O,),
        }

    def to_dict(self) -> dict:
        return {"model": self.kind, "H": self.hidden, "d_in": self.d_in, "T_prime": self.horizon, "l2": self.l2}

    def init(self, rng: RngStream) -> np.ndarray:
        gen = rng.generator()
        theta = np.zeros(self.n_params)
        bound = 1.0 / np.sqrt(self.hidden)
        views = self.unpack(theta)
        for name in ("W_xh", "W_hh", "W_hy"):
            views[name][...] = gen.uniform(-bound, bound, views[name].shape)
        return theta

    def _forward(self, theta, x):
        p = self.unpack(theta)
        n, T, _ = x.shape
        h = np.empty((n, T, self.hidden))
        prev = np.zeros((n, self.hidden))
        for t in range(T):
            prev = np.tanh(x[:, t] @ p["W_xh"] + prev @ p["W_hh"] + p["b_h"])
            h[:, t] = prev
        f = h @ p["W_hy"].T + p["b_y"]
        return h, f

    def predict(self, theta, x) -> np.ndarray:
        return self._forward(theta, self._check_x(x))[1]

    def hidden_states(self, theta, x) -> np.ndarray:
        return self._forward(theta, self._check_x(x))[0]

    def _backward(self, p, x, h, df):
        n, T, _ = x.shape
        g = {k: np.zeros(s) for k, s in self.shapes.items()}
        g["W_hy"] = np.einsum("nto,nth->oh", df, h)
        g["b_y"] = df.sum(axis=(0, 1))
        dh_out = df @ p["W_hy"]
        da = np.empty_like(h)
        nxt = np.zeros((n, self.hidden))
        for t in range(T - 1, -1, -1):
            dh = dh_out[:, t] + nxt @ p["W_hh"].T
            nxt = dh * (1.0 - h[:, t] ** 2)
            da[:, t] = nxt
        hprev = np.concatenate([np.zeros((n, 1, self.hidden)), h[:, :-1]], axis=1)
        g["W_xh"] = np.einsum("ntd,nth->dh", x, da)
        g["W_hh"] = np.einsum("ntk,nth->kh", hprev, da)
        g["b_h"] = da.sum(axis=(0, 1))
        return g, da, dh_out, hprev

    def loss_and_grad(self, theta, x, Y, W):
        p = self.unpack(theta)
        h, f = self._forward(theta, x)
        resid = f - Y
        loss = float(np.sum(W * resid ** 2))
        g, *_ = self._backward(p, x, h, 2.0 * W * resid)
        return loss, np.concatenate([g[k].ravel() for k in self.shapes])

    def hvp(self, theta, x, Y, W, v):
        """Forward-over-reverse (R-operator) Hessian-vector product."""
        p = self.unpack(theta)
        V = self.unpack(np.asarray(v, dtype=np.float64))
        n, T, _ = x.shape
        h, f = self._forward(theta, x)
        df = 2.0 * W * (f - Y)
        g, da, dh_out, hprev = self._backward(p, x, h, df)

        # R-forward
        Rh = np.empty_like(h)
        prev = np.zeros((n, self.hidden))
        for t in range(T):
            Ra = x[:, t] @ V["W_xh"] + prev @ p["W_hh"] + hprev[:, t] @ V["W_hh"] + V["b_h"]
            prev = (1.0 - h[:, t] ** 2) * Ra
            Rh[:, t] = prev
        Rf = Rh @ p["W_hy"].T + h @ V["W_hy"].T + V["b_y"]
        Rdf = 2.0 * W * Rf

        # R-backward
        R = {}
        R["W_hy"] = np.einsum("nto,nth->oh", Rdf, h) + np.einsum("nto,nth->oh", df, Rh)
        R["b_y"] = Rdf.sum(axis=(0, 1))
        Rdh_out = Rdf @ p["W_hy"] + df @ V["W_hy"]
        Rda = np.empty_like(h)
        nxt = np.zeros((n, self.hidden))
        Rnxt = np.zeros((n, self.hidden))
        for t in range(T - 1, -1, -1):
            dh = dh_out[:, t] + nxt @ p["W_hh"].T
            Rdh = Rdh_out[:, t] + Rnxt @ p["W_hh"].T + nxt @ V["W_hh"].T
            gate = 1.0 - h[:, t] ** 2
            nxt = da[:, t]
            Rnxt = Rdh * gate - 2.0 * dh * h[:, t] * Rh[:, t]
            Rda[:, t] = Rnxt
        Rhprev = np.concatenate([np.zeros((n, 1, self.hidden)), Rh[:, :-1]], axis=1)
        R["W_xh"] = np.einsum("ntd,nth->dh", x, Rda)
        R["W_hh"] = np.einsum("ntk,nth->kh", Rhprev, da) + np.einsum("ntk,nth->kh", hprev, Rda)
        R["b_h"] = Rda.sum(axis=(0, 1))
        return np.concatenate([R[k].ravel() for k in self.shapes])


class LinearModel(_Model):
    """Per-step linear predictor ``f_t = x_t A + b`` with no recurrence.

    Its loss is ordinary weighted least squares, which makes closed-form
    leave-one-out results available for checking influence estimates.
    """

    kind = "linear"

    def __init__(self, d_in: int = 1, horizon: int = 0, l2: float = 0.0):
        self.d_in, self.horizon = int(d_in), int(horizon)
        self.hidden = 0
        self.l2 = float(l2)
        self.shapes = {"A": (self.d_in, self.horizon + 1), "b": (self.horizon + 1,)}

    def to_dict(self) -> dict:
        return {"model": self.kind, "H": 0, "d_in": self.d_in, "T_prime": self.horizon, "l2": self.l2}

    def init(self, rng: RngStream) -> np.ndarray:
        return np.zeros(self.n_params)

    def predict(self, theta, x) -> np.ndarray:
        p = self.unpack(theta)
        return self._check_x(x) @ p["A"] + p["b"]

    def loss_and_grad(self, theta, x, Y, W):
        resid = self.predict(theta, x) - Y
        df = 2.0 * W * resid
        gA = np.einsum("ntd,nto->do", x, df)
        return float(np.sum(W * resid ** 2)), np.concatenate([gA.ravel(), df.sum(axis=(0, 1))])

    def hvp(self, theta, x, Y, W, v):
        V = self.unpack(np.asarray(v, dtype=np.float64))
        Rdf = 2.0 * W * (x @ V["A"] + V["b"])
        return np.concatenate([np.einsum("ntd,nto->do", x, Rdf).ravel(), Rdf.sum(axis=(0, 1))])


def model_from_dict(d: dict) -> _Model:
    l2 = float(d.get("l2", 0.0))
    if d.get("model", "rnn") == "linear":
        return LinearModel(d["d_in"], d["T_prime"], l2)
    return RNN(d["H"], d["d_in"], d["T_prime"], l2)


@dataclass(frozen=True)
class RnnParams:
    """Flat parameter vector plus the model that gives it structure.

    Attribute access by block name (``params.W_hh``) returns a view that
    aliases ``theta``.
    """

    model: _Model
    theta: np.ndarray

    def __getattr__(self, name):
        if name in ("model", "theta"):
            raise AttributeError(name)
        views = self.model.unpack(self.theta)
        if name in views:
            return views[name]
        raise AttributeError(name)

    @property
    def P(self) -> int:
        return self.theta.size


# dataset-level operations

def _weights_array(w) -> np.ndarray:
    return w.values if isinstance(w, WeightVector) else np.asarray(w, dtype=np.float64)


def _aligned(data: SequenceDataset, w):
    W = _weights_array(w)
    if W.shape != (data.n, data.T, data.n_out):
        raise ConformabilityError(f"weights {W.shape} do not match data ({data.n}, {data.T}, {data.n_out})")
    if np.any(W[~data.observed_mask()] != 0):
        raise ContractViolation("nonzero weight on a slot whose target lies outside the observed range")
    return data.x, data.targets(), W


def _theta(theta) -> np.ndarray:
    return theta.theta if isinstance(theta, RnnParams) else np.asarray(theta, dtype=np.float64)


def forward(model: _Model, theta, x) -> ForwardTrace:
    """Run one sequence ``x`` of shape ``(T, d_in)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    th = _theta(theta)
    f = model.predict(th, x[None])[0]
    hidden = model.hidden_states(th, x[None])[0] if isinstance(model, RNN) else np.zeros((x.shape[0], 0))
    return ForwardTrace(hidden, f)


def loss(model: _Model, data: SequenceDataset, theta, w) -> float:
    x, Y, W = _aligned(data, w)
    th = _theta(theta)
    val = model.loss_and_grad(th, x, Y, W)[0] if W.any() else 0.0
    return val + 0.5 * model.l2 * float(th @ th) if model.l2 else val


def grad(model: _Model, data: SequenceDataset, theta, w) -> np.ndarray:
    x, Y, W = _aligned(data, w)
    th = _theta(theta)
    g = model.loss_and_grad(th, x, Y, W)[1]
    return g + model.l2 * th if model.l2 else g


def hvp(model: _Model, data: SequenceDataset, theta, w, v) -> np.ndarray:
    x, Y, W = _aligned(data, w)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (model.n_params,):
        raise ConformabilityError(f"direction must have length {model.n_params}")
    hv = model.hvp(_theta(theta), x, Y, W, v)
    return hv + model.l2 * v if model.l2 else hv


@dataclass
class TrainConfig:
    hidden: int = 20
    lr: float = 0.01
    epochs: int = 10
    batch_size: int = 150
    seed: int = 0
    clip: float = 5.0
    optimizer: str = "sgd"      # "sgd" or "lbfgs"
    max_iter: int = 5000        # lbfgs only
    gtol: float = 1e-8          # lbfgs only, on the per-sequence mean gradient

    def __post_init__(self):
        for name in ("lr", "epochs", "batch_size", "clip", "max_iter"):
            if not getattr(self, name) > 0:
                raise ValueError(f"TrainConfig.{name} must be positive")
        if self.hidden < 0:
            raise ValueError("TrainConfig.hidden must be >= 0")
        if self.optimizer not in ("sgd", "lbfgs"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainResult:
    params: RnnParams
    final_loss: float
    history: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = True


def train(model: _Model, data: SequenceDataset, w, config: TrainConfig, theta_init=None) -> TrainResult:
    """Minimise the weighted loss from ``theta_init`` (or a seeded init).

    SGD steps use the batch gradient divided by the batch size, clipped to
    norm ``config.clip``. L-BFGS minimises the loss divided by ``n``.
    """
    x, Y, W = _aligned(data, w)
    rng = RngStream(config.seed)
    theta = model.init(rng.spawn(0)) if theta_init is None else _theta(theta_init).copy()
    if config.optimizer == "lbfgs":
        return _train_lbfgs(model, x, Y, W, theta, config)

    n = data.n
    history = []
    for epoch in range(config.epochs):
        order = rng.spawn(1, epoch).generator().permutation(n)
        for start in range(0, n, config.batch_size):
            idx = np.sort(order[start:start + config.batch_size])
            if not W[idx].any():
                continue
            _, g = model.loss_and_grad(theta, x[idx], Y[idx], W[idx])
            g /= idx.size
            if model.l2:
                g += (model.l2 / n) * theta
            norm = np.linalg.norm(g)
            if not np.isfinite(norm):
                raise TrainingDiverged(epoch)
            if norm > config.clip:
                g *= config.clip / norm
            theta = theta - config.lr * g
        epoch_loss = model.loss_and_grad(theta, x, Y, W)[0] if W.any() else 0.0
        epoch_loss += 0.5 * model.l2 * float(theta @ theta)
        if not np.isfinite(epoch_loss):
            raise TrainingDiverged(epoch)
        history.append(epoch_loss)
        log.debug("epoch %d loss %.6g", epoch, epoch_loss)
    final = history[-1] if history else 0.0
    return TrainResult(model.wrap(theta), final, history, config.epochs)


def _train_lbfgs(model, x, Y, W, theta, config) -> TrainResult:
    if not W.any() and not model.l2:
        return TrainResult(model.wrap(theta), 0.0, [0.0], 0)
    scale = 1.0 / x.shape[0]

    def fun(th):
        val, g = model.loss_and_grad(th, x, Y, W)
        if model.l2:
            val += 0.5 * model.l2 * float(th @ th)
            g = g + model.l2 * th
        if not np.isfinite(val):
            raise TrainingDiverged(0)
        return val * scale, g * scale

    res = minimize(fun, theta, jac=True, method="L-BFGS-B",
                   options={"maxiter": config.max_iter, "gtol": config.gtol, "ftol": 0.0,
                            "maxcor": 20, "maxls": 50})
    final = float(res.fun / scale)
    return TrainResult(model.wrap(res.x), final, [final], int(res.nit), bool(res.success))


def save_checkpoint(path, model: _Model, params, config: TrainConfig, final_loss: float) -> None:
    d = model.to_dict()
    d.update({"theta": _theta(params).tolist(), "config": asdict(config), "final_loss": final_loss})
    Path(path).write_text(json.dumps(d), encoding="utf-8")


def load_checkpoint(path):
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    model = model_from_dict(d)
    return model, model.wrap(np.array(d["theta"], dtype=np.float64)), TrainConfig(**d["config"]), d["final_loss"]
