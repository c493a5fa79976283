"""Experiment configuration read from a single UTF-8 JSON file.

Example::

    {
      "data": {"n": 1000, "T": 10, "a": 0.9, "noise": {"kind": "static", "sigma2": 1.0},
               "horizon": 0, "n_test": 500, "seed": 0},
      "model": {"kind": "rnn", "hidden": 20, "l2": 10.0, "optimizer": "lbfgs"},
      "jackknife": {"K": null, "alpha": [0.1, 0.2, 0.4], "mode": "influence",
                    "ihvp": {"depth": 100, "damping": 0.01, "batch_size": 32}},
      "sweep": {"sigma2": [0, 1, 2, 3, 4]}
    }

Every block and key is optional; missing values take the defaults below.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .dataset import ConfigurationError, NoiseProfile, standard_weights
from .influence import InverseHvpConfig
from .model import RNN, LinearModel, TrainConfig
from .pipeline import JackknifeConfig


@dataclass
class DataConfig:
    n: int = 1000
    T: int = 10
    a: float = 0.9
    noise: NoiseProfile = field(default_factory=lambda: NoiseProfile("static", 1.0))
    horizon: int = 0
    n_test: int = 500
    seed: int = 0


@dataclass
class ModelConfig:
    kind: str = "rnn"                 # "rnn" or "linear"
    hidden: int = 20
    l2: float = 10.0
    architecture: str = "labeling"
    train: TrainConfig = field(default_factory=lambda: TrainConfig(optimizer="lbfgs", max_iter=2000, gtol=1e-6))

    def build(self, horizon: int):
        if self.kind == "rnn":
            return RNN(self.hidden, 1, horizon, self.l2)
        return LinearModel(1, horizon, self.l2)


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    jackknife: JackknifeConfig = field(
        default_factory=lambda: JackknifeConfig(ihvp=InverseHvpConfig(depth=100, damping=0.01, batch_size=32)))
    alphas: tuple[float, ...] = (0.1,)
    sweep_sigma2: tuple[float, ...] | None = None

    @property
    def seed(self) -> int:
        return self.data.seed

    @property
    def K(self) -> int:
        return self.jackknife.interval(self.data.T)

    def with_overrides(self, seed=None, mode=None, alpha=None) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            train = dataclasses.replace(cfg.model.train, seed=int(seed))
            cfg = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, seed=int(seed)),
                                      model=dataclasses.replace(cfg.model, train=train))
        if mode is not None:
            cfg = dataclasses.replace(cfg, jackknife=_field("jackknife.mode", dataclasses.replace,
                                                            cfg.jackknife, mode=mode))
        if alpha is not None:
            cfg = dataclasses.replace(cfg, alphas=(_alpha(alpha),))
        cfg.validate()
        return cfg

    def at_sigma2(self, sigma2: float) -> "ExperimentConfig":
        noise = NoiseProfile("static", float(sigma2))
        return dataclasses.replace(self, data=dataclasses.replace(self.data, noise=noise), sweep_sigma2=None)

    def validate(self) -> None:
        d = self.data
        for name in ("n", "T", "n_test"):
            if getattr(d, name) < 1:
                raise ConfigurationError(f"data.{name}: must be >= 1, got {getattr(d, name)}")
        if d.horizon < 0:
            raise ConfigurationError(f"data.horizon: must be >= 0, got {d.horizon}")
        if not abs(d.a) < 1:
            raise ConfigurationError(f"data.a: |a| must be < 1, got {d.a}")
        if d.n < 2 and self.jackknife.mode == "influence" and self.jackknife.ihvp.batch_size is not None:
            raise ConfigurationError("data.n: stochastic influence needs at least 2 sequences")
        _field("jackknife.K", self.jackknife.interval, d.T)
        _field("model.architecture", standard_weights, 1, d.T, d.horizon, self.model.architecture)
        if self.model.kind not in ("rnn", "linear"):
            raise ConfigurationError(f"model.kind: unknown model {self.model.kind!r}")
        if self.model.l2 < 0:
            raise ConfigurationError(f"model.l2: must be >= 0, got {self.model.l2}")
        if not self.alphas:
            raise ConfigurationError("jackknife.alpha: at least one level is required")
        for a in self.alphas:
            _alpha(a)
        if self.sweep_sigma2 is not None:
            if not self.sweep_sigma2:
                raise ConfigurationError("sweep.sigma2: empty sweep")
            for s in self.sweep_sigma2:
                if s < 0:
                    raise ConfigurationError(f"sweep.sigma2: variances must be >= 0, got {s}")

    def to_dict(self) -> dict:
        t = self.model.train
        ihvp = self.jackknife.ihvp
        out = {
            "data": {"n": self.data.n, "T": self.data.T, "a": self.data.a, "noise": self.data.noise.to_dict(),
                     "horizon": self.data.horizon, "n_test": self.data.n_test, "seed": self.data.seed},
            "model": {"kind": self.model.kind, "hidden": self.model.hidden, "l2": self.model.l2,
                      "architecture": self.model.architecture, **dataclasses.asdict(t)},
            "jackknife": {"K": self.K, "alpha": list(self.alphas), "mode": self.jackknife.mode,
                          "ihvp": dataclasses.asdict(ihvp), "unconverged": self.jackknife.unconverged,
                          "exact_budget": self.jackknife.exact_budget},
        }
        if self.sweep_sigma2 is not None:
            out["sweep"] = {"sigma2": list(self.sweep_sigma2)}
        return out

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _alpha(a) -> float:
    try:
        a = float(a)
    except (TypeError, ValueError):
        raise ConfigurationError(f"jackknife.alpha: not a number: {a!r}") from None
    if not 0.0 < a < 1.0:
        raise ConfigurationError(f"jackknife.alpha: must lie in (0, 1), got {a}")
    return a


def _field(name: str, fn, *args, **kwargs):
    """Call ``fn`` and prefix any validation error with the config field name."""
    try:
        return fn(*args, **kwargs)
    except (ConfigurationError, ValueError, TypeError) as exc:
        raise ConfigurationError(f"{name}: {exc}") from None


def _section(raw: dict, name: str) -> dict:
    sec = raw.get(name, {})
    if sec is None:
        return {}
    if not isinstance(sec, dict):
        raise ConfigurationError(f"{name}: expected an object")
    return sec


def _typed(sec: dict, prefix: str, key: str, kind, default):
    if key not in sec or sec[key] is None:
        return default
    try:
        value = kind(sec[key])
    except (TypeError, ValueError):
        raise ConfigurationError(f"{prefix}.{key}: expected {kind.__name__}, got {sec[key]!r}") from None
    if kind is int and value != sec[key]:
        raise ConfigurationError(f"{prefix}.{key}: expected an integer, got {sec[key]!r}")
    return value


def _unknown(sec: dict, prefix: str, known) -> None:
    extra = sorted(set(sec) - set(known))
    if extra:
        raise ConfigurationError(f"{prefix}: unknown keys {', '.join(extra)}")


def from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigurationError("config: expected a JSON object")
    _unknown(raw, "config", ("data", "model", "jackknife", "sweep"))
    base = ExperimentConfig()

    d = _section(raw, "data")
    _unknown(d, "data", ("n", "T", "a", "noise", "horizon", "n_test", "seed"))
    noise_raw = d.get("noise", base.data.noise.to_dict())
    if not isinstance(noise_raw, dict):
        raise ConfigurationError("data.noise: expected an object")
    noise = _field("data.noise", NoiseProfile.from_dict, noise_raw)
    data = DataConfig(
        n=_typed(d, "data", "n", int, base.data.n),
        T=_typed(d, "data", "T", int, base.data.T),
        a=_typed(d, "data", "a", float, base.data.a),
        noise=noise,
        horizon=_typed(d, "data", "horizon", int, base.data.horizon),
        n_test=_typed(d, "data", "n_test", int, base.data.n_test),
        seed=_typed(d, "data", "seed", int, base.data.seed),
    )

    m = _section(raw, "model")
    train_keys = [f.name for f in dataclasses.fields(TrainConfig)]
    _unknown(m, "model", ["kind", "l2", "architecture"] + train_keys)
    t0 = base.model.train
    train_kwargs = {}
    for f in dataclasses.fields(TrainConfig):
        if f.name == "optimizer":
            train_kwargs[f.name] = m.get("optimizer", t0.optimizer)
        elif f.name != "seed":
            train_kwargs[f.name] = _typed(m, "model", f.name, type(getattr(t0, f.name)), getattr(t0, f.name))
    train_kwargs["seed"] = data.seed
    model = ModelConfig(
        kind=m.get("kind", base.model.kind),
        hidden=train_kwargs["hidden"],
        l2=_typed(m, "model", "l2", float, base.model.l2),
        architecture=m.get("architecture", base.model.architecture),
        train=_field("model", TrainConfig, **train_kwargs),
    )

    j = _section(raw, "jackknife")
    _unknown(j, "jackknife", ("K", "alpha", "mode", "ihvp", "unconverged", "exact_budget"))
    ih = j.get("ihvp") or {}
    if not isinstance(ih, dict):
        raise ConfigurationError("jackknife.ihvp: expected an object")
    ihvp_keys = [f.name for f in dataclasses.fields(InverseHvpConfig)]
    _unknown(ih, "jackknife.ihvp", ihvp_keys)
    ih0 = base.jackknife.ihvp
    ihvp = _field("jackknife.ihvp", InverseHvpConfig, **{k: ih.get(k, getattr(ih0, k)) for k in ihvp_keys})
    jk = _field("jackknife", JackknifeConfig,
                K=_typed(j, "jackknife", "K", int, None),
                mode=j.get("mode", base.jackknife.mode),
                ihvp=ihvp,
                unconverged=j.get("unconverged", base.jackknife.unconverged),
                exact_budget=_typed(j, "jackknife", "exact_budget", int, base.jackknife.exact_budget))
    alpha_raw = j.get("alpha", list(base.alphas))
    alphas = tuple(_alpha(a) for a in (alpha_raw if isinstance(alpha_raw, list) else [alpha_raw]))

    sweep = None
    s = _section(raw, "sweep")
    if s:
        _unknown(s, "sweep", ("sigma2",))
        values = s.get("sigma2")
        if not isinstance(values, list):
            raise ConfigurationError("sweep.sigma2: expected a list of variances")
        try:
            sweep = tuple(float(v) for v in values)
        except (TypeError, ValueError):
            raise ConfigurationError(f"sweep.sigma2: expected numbers, got {values!r}") from None

    cfg = ExperimentConfig(data, model, jk, alphas, sweep)
    cfg.validate()
    return cfg


def load(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config is not valid JSON: {exc}") from None
    return from_dict(raw)
