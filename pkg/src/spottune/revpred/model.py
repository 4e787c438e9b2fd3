"""Training, calibrated inference and evaluation of revocation predictors."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from spottune.revpred.features import (
    HISTORY_LEN,
    N_FEATURES,
    ClassBalance,
    FeatureRecord,
    SampleSet,
)
from spottune.revpred.nn import Adam, LogisticNet, SequenceNet, sigmoid, weighted_bce

ARCHITECTURES = ("sequence", "logistic")
PRICE_COLS = (0, 1)


class UntrainableError(Exception):
    pass


@dataclass
class TrainConfig:
    architecture: str = "sequence"
    epochs: int = 20
    learning_rate: float = 3e-3
    batch_size: int = 64
    seed: int = 0
    hidden: int = 32
    lstm_layers: int = 3
    dense: int = 16
    dense_layers: int = 3

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"architecture must be one of {ARCHITECTURES}")


@dataclass
class PredictorModel:
    architecture: str
    net_config: dict
    params: dict[str, np.ndarray]
    norm: dict[str, np.ndarray]
    balance: ClassBalance
    seed: int
    instance: str = ""
    on_demand_price: float = 1.0
    loss_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        net = make_net(self.architecture, self.net_config)
        expected = net.init(np.random.default_rng(0))
        if set(expected) != set(self.params):
            raise ValueError("parameter names do not match the architecture")
        for k, v in expected.items():
            if self.params[k].shape != v.shape:
                raise ValueError(f"parameter {k} has shape {self.params[k].shape}, expected {v.shape}")
        for k, v in self.norm.items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"normalization statistic {k} is not finite")
        self._net = net

    @property
    def net(self):
        return self._net


def make_net(architecture: str, config: dict):
    if architecture == "sequence":
        return SequenceNet(**config)
    if architecture == "logistic":
        return LogisticNet(**config)
    raise ValueError(f"unknown architecture {architecture!r}")


def _scale_prices(hist, present, max_price, on_demand):
    hist = np.array(hist, dtype=float, copy=True)
    present = np.array(present, dtype=float, copy=True)
    for c in PRICE_COLS:
        hist[..., c] /= on_demand
        present[:, c] /= on_demand
    return hist, present, np.asarray(max_price, dtype=float) / on_demand


def _raw_inputs(arch, hist, present, max_price, on_demand):
    hist, present, mp = _scale_prices(hist, present, max_price, on_demand)
    pres7 = np.concatenate([present, mp[:, None]], axis=1)
    if arch == "sequence":
        return hist, pres7
    summary = np.concatenate([hist.mean(axis=1), hist.min(axis=1), hist.max(axis=1)], axis=1)
    return (np.concatenate([summary, pres7], axis=1),)


def _fit_norm(arch, raw) -> dict[str, np.ndarray]:
    def stats(x):
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        return mean, np.where(std > 1e-12, std, 1.0)

    if arch == "sequence":
        hist, pres = raw
        hm, hs = stats(hist.reshape(-1, hist.shape[-1]))
        pm, ps = stats(pres)
        return {"hist_mean": hm, "hist_std": hs, "pres_mean": pm, "pres_std": ps}
    xm, xs = stats(raw[0])
    return {"x_mean": xm, "x_std": xs}


def _apply_norm(arch, raw, norm):
    if arch == "sequence":
        hist, pres = raw
        return (
            (hist - norm["hist_mean"]) / norm["hist_std"],
            (pres - norm["pres_mean"]) / norm["pres_std"],
        )
    return ((raw[0] - norm["x_mean"]) / norm["x_std"],)


def class_weights(labels: np.ndarray, balance: ClassBalance) -> np.ndarray:
    """Positives weigh phi_minus and negatives phi_plus."""
    return np.where(labels, balance.phi_minus, balance.phi_plus)


def train(samples: SampleSet, config: TrainConfig | None = None) -> PredictorModel:
    config = config or TrainConfig()
    balance = samples.balance
    if not balance.trainable:
        raise UntrainableError(
            f"{samples.instance}: dataset has a single class (phi_plus={balance.phi_plus})"
        )
    arch = config.architecture
    raw = _raw_inputs(arch, samples.history, samples.present, samples.max_price, samples.on_demand_price)
    norm = _fit_norm(arch, raw)
    inputs = _apply_norm(arch, raw, norm)
    y = samples.label.astype(float)
    w = class_weights(samples.label, balance)

    if arch == "sequence":
        net_config = dict(
            n_hist=N_FEATURES, n_present=N_FEATURES + 1, hidden=config.hidden,
            lstm_layers=config.lstm_layers, dense=config.dense, dense_layers=config.dense_layers,
        )
    else:
        net_config = dict(n_in=inputs[0].shape[1])
    net = make_net(arch, net_config)
    rng = np.random.default_rng(config.seed)
    params = net.init(rng)
    opt = Adam(params, lr=config.learning_rate)

    n = len(y)
    history = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, config.batch_size):
            idx = order[s : s + config.batch_size]
            batch = tuple(x[idx] for x in inputs)
            z, cache = net.forward(params, batch)
            loss, dz = weighted_bce(z, y[idx], w[idx])
            grads = net.backward(params, cache, dz)
            opt.step(params, grads)
            total += loss * w[idx].sum()
        history.append(total / w.sum())

    return PredictorModel(
        arch, net_config, params, norm, balance, config.seed,
        samples.instance, samples.on_demand_price, history,
    )


def training_loss(model: PredictorModel, samples: SampleSet) -> float:
    z = _logits(model, samples.history, samples.present, samples.max_price)
    return weighted_bce(z, samples.label.astype(float), class_weights(samples.label, model.balance))[0]


def calibrate(p_hat, balance: ClassBalance):
    """Odds correction: P/(1-P) = p_hat * phi_minus / ((1 - p_hat) * phi_plus)."""
    p_hat = np.asarray(p_hat, dtype=float)
    num = p_hat * balance.phi_minus
    return num / (num + (1.0 - p_hat) * balance.phi_plus)


def _logits(model, hist, present, max_price, batch: int = 512):
    hist = np.asarray(hist, dtype=float)
    present = np.asarray(present, dtype=float)
    max_price = np.asarray(max_price, dtype=float)
    out = []
    for s in range(0, len(max_price), batch):
        sl = slice(s, s + batch)
        raw = _raw_inputs(model.architecture, hist[sl], present[sl], max_price[sl], model.on_demand_price)
        z, _ = model.net.forward(model.params, _apply_norm(model.architecture, raw, model.norm))
        out.append(z)
    return np.concatenate(out) if out else np.zeros(0)


def raw_probability(model: PredictorModel, hist, present, max_price) -> np.ndarray:
    return sigmoid(_logits(model, hist, present, max_price))


def predict_proba(model: PredictorModel, samples: SampleSet) -> np.ndarray:
    return calibrate(raw_probability(model, samples.history, samples.present, samples.max_price), model.balance)


def predict(
    model: PredictorModel,
    history: Sequence[FeatureRecord] | np.ndarray,
    present: FeatureRecord | np.ndarray,
    max_price: float,
) -> float:
    """Calibrated revocation probability within the next hour for one query."""
    hist = np.asarray(
        [r.as_array() for r in history] if not isinstance(history, np.ndarray) else history, dtype=float
    )
    pres = present.as_array() if isinstance(present, FeatureRecord) else np.asarray(present, dtype=float)
    if hist.shape != (HISTORY_LEN, N_FEATURES):
        raise ValueError(f"history must be {HISTORY_LEN}x{N_FEATURES}")
    p_hat = raw_probability(model, hist[None], pres[None], np.array([max_price]))
    return float(calibrate(p_hat, model.balance)[0])


def encode_history(model: PredictorModel, hist: np.ndarray) -> np.ndarray:
    """Max-price independent part of a query, reusable across max-price draws."""
    hist = np.asarray(hist, dtype=float)[None]
    scaled, _, _ = _scale_prices(hist, np.zeros((1, N_FEATURES)), np.ones(1), model.on_demand_price)
    if model.architecture == "sequence":
        normed = (scaled - model.norm["hist_mean"]) / model.norm["hist_std"]
        return model.net.encode_history(model.params, normed)[0]
    return np.concatenate([scaled.mean(axis=1), scaled.min(axis=1), scaled.max(axis=1)], axis=1)[0]


def predict_encoded(model: PredictorModel, encoding: np.ndarray, present, max_prices) -> np.ndarray:
    """Calibrated probabilities for one encoded history and several max prices."""
    mp = np.atleast_1d(np.asarray(max_prices, dtype=float))
    pres = np.repeat(np.asarray(present, dtype=float)[None], len(mp), axis=0)
    _, pres, mp_s = _scale_prices(np.zeros((len(mp), 1, N_FEATURES)), pres, mp, model.on_demand_price)
    pres7 = np.concatenate([pres, mp_s[:, None]], axis=1)
    enc = np.repeat(encoding[None], len(mp), axis=0)
    if model.architecture == "sequence":
        z = model.net.score(model.params, enc, (pres7 - model.norm["pres_mean"]) / model.norm["pres_std"])
    else:
        x = (np.concatenate([enc, pres7], axis=1) - model.norm["x_mean"]) / model.norm["x_std"]
        z = model.net.forward(model.params, (x,))[0]
    return calibrate(sigmoid(z), model.balance)


def confusion_metrics(y_true, y_pred) -> dict:
    y_true = np.asarray(y_true, dtype=bool)
    y_pred = np.asarray(y_pred, dtype=bool)
    if y_true.size == 0:
        raise ValueError("empty evaluation set")
    tp = int(np.sum(y_true & y_pred))
    fp = int(np.sum(~y_true & y_pred))
    tn = int(np.sum(~y_true & ~y_pred))
    fn = int(np.sum(y_true & ~y_pred))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {
        "accuracy": (tp + tn) / y_true.size,
        "f1": f1,
        "precision": precision,
        "recall": recall,
        "tp": tp,
        "fp": fp,
        "tn": tn,
        "fn": fn,
    }


def evaluate(model: PredictorModel, samples: SampleSet, threshold: float = 0.5) -> dict:
    if len(samples) == 0:
        raise ValueError("empty evaluation set")
    return confusion_metrics(samples.label, predict_proba(model, samples) >= threshold)


def save_model(model: PredictorModel, path) -> None:
    meta = {
        "architecture": model.architecture,
        "net_config": model.net_config,
        "balance": asdict(model.balance),
        "seed": model.seed,
        "instance": model.instance,
        "on_demand_price": model.on_demand_price,
        "loss_history": model.loss_history,
        "param_names": sorted(model.params),
        "norm_names": sorted(model.norm),
    }
    arrays = {f"param/{k}": v for k, v in model.params.items()}
    arrays.update({f"norm/{k}": v for k, v in model.norm.items()})
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_model(path) -> PredictorModel:
    with np.load(Path(path)) as z:
        meta = json.loads(str(z["meta"]))
        params = {k: z[f"param/{k}"].copy() for k in meta["param_names"]}
        norm = {k: z[f"norm/{k}"].copy() for k in meta["norm_names"]}
    return PredictorModel(
        meta["architecture"],
        meta["net_config"],
        params,
        norm,
        ClassBalance(**meta["balance"]),
        meta["seed"],
        meta["instance"],
        meta["on_demand_price"],
        meta["loss_history"],
    )
