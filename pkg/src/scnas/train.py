"""Losses, Adam, plateau schedules, the alternating search loop and retraining."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .genotype import Genotype, derive, deserialize, serialize
from .ops import FULL_CATALOG, OperationKind
from .sampler import log_tau, sample_architecture, temperature
from .search_space import ArchitectureParams, CellType, Network, NetworkSpec
from .tasks import SegmentationSample, TaskData, crop_patch, search_split, sliding_window_infer
from .tensor import Tensor

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# losses and metrics


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label values must lie in [0, {num_classes}), got max {labels.max()}")
    oh = np.eye(num_classes)[labels]  # (..., K)
    return np.moveaxis(oh, -1, 1)


def soft_jaccard_distance(probs: Tensor, target: np.ndarray, smooth: float = 1e-5,
                          classes: Sequence[int] | None = None) -> Tensor:
    """1 - mean_c (sum p*g + s) / (sum p + sum g - sum p*g + s) over ``classes``.

    ``probs`` and ``target`` are ``batch x classes x spatial``; sums run over
    batch and space. By default the background class 0 is excluded.
    """
    probs = T.as_tensor(probs)
    k = probs.shape[1]
    if classes is None:
        classes = range(1, k) if k > 1 else range(k)
    axes = (0,) + tuple(range(2, probs.ndim))
    inter = T.tsum(probs * target, axis=axes)
    psum = T.tsum(probs, axis=axes)
    gsum = target.sum(axis=axes)
    jac = (inter + smooth) / (psum + gsum - inter + smooth)
    idx = list(classes)
    return 1.0 - T.mean(T.getitem(jac, (idx,)))


def jaccard_loss(logits: Tensor, labels: np.ndarray, smooth: float = 1e-5) -> Tensor:
    """Soft Jaccard distance of softmax class probabilities, foreground classes averaged."""
    logits = T.as_tensor(logits)
    k = logits.shape[1]
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ValueError(f"labels {labels.shape} do not match logits {logits.shape}")
    target = one_hot(labels, k)
    return soft_jaccard_distance(T.softmax(logits, axis=1), target, smooth)


def dice_metric(prediction: np.ndarray, truth: np.ndarray, c: int) -> float:
    """2|P and G| / (|P| + |G|) for class ``c``; 1 when both are empty."""
    p = np.asarray(prediction) == c
    g = np.asarray(truth) == c
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    denom = p.sum() + g.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, g).sum() / denom)


# ---------------------------------------------------------------------------
# optimization state


class Adam:
    """Adam with per-parameter step counts; a ``None`` gradient skips the parameter."""

    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.betas = tuple(float(b) for b in betas)
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = [0] * len(self.params)

    def step(self, grads: Sequence[np.ndarray | None]) -> None:
        b1, b2 = self.betas
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g is None:
                continue
            self.t[i] += 1
            t = self.t[i]
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            mhat = self.m[i] / (1 - b1**t)
            vhat = self.v[i] / (1 - b2**t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.t": np.array(self.t, dtype=np.int64), f"{prefix}.lr": np.array(self.lr)}
        for i in range(len(self.params)):
            out[f"{prefix}.m{i}"] = self.m[i]
            out[f"{prefix}.v{i}"] = self.v[i]
        return out

    def load_arrays(self, prefix: str, arrays) -> None:
        self.t = [int(v) for v in arrays[f"{prefix}.t"]]
        self.lr = float(arrays[f"{prefix}.lr"])
        self.m = [arrays[f"{prefix}.m{i}"].copy() for i in range(len(self.params))]
        self.v = [arrays[f"{prefix}.v{i}"].copy() for i in range(len(self.params))]


class Plateau:
    """Signals a learning-rate cut after ``patience`` epochs without an improvement of ``threshold``."""

    def __init__(self, patience: int, factor: float, threshold: float = 1e-4):
        if patience < 1 or factor <= 1:
            raise ValueError("patience must be >= 1 and factor > 1")
        self.patience = patience
        self.factor = factor
        self.threshold = threshold
        self.best = math.inf
        self.bad = 0

    def step(self, loss: float) -> bool:
        if loss < self.best - self.threshold:
            self.best = loss
            self.bad = 0
            return False
        self.bad += 1
        if self.bad >= self.patience:
            self.bad = 0
            return True
        return False


@dataclass
class SearchConfig:
    lr_theta: float = 0.025
    betas_theta: tuple[float, float] = (0.1, 0.001)
    lr_alpha: float = 0.003
    betas_alpha: tuple[float, float] = (0.5, 0.999)
    epochs: int = 200
    patience: int = 20
    factor: float = 10.0
    threshold: float = 1e-4
    split_ratio: int = 4
    batch_size: int = 4
    tau0: float = 1.0
    tau_min: float = 0.05
    alpha_init: float = 1e-3

    def __post_init__(self):
        if min(self.lr_theta, self.lr_alpha) < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("invalid search config")
        if self.patience < 1 or self.split_ratio < 1:
            raise ValueError("patience and split_ratio must be >= 1")


@dataclass
class RetrainConfig:
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    patience: int = 30
    factor: float = 5.0
    threshold: float = 1e-4
    epochs: int = 500
    min_lr: float = 1e-7
    batch_size: int = 8
    stem_channels: int | None = None

    def __post_init__(self):
        if self.lr < 0 or self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("invalid retrain config")


def lr_schedule(lr: float, factor: float, min_lr: float) -> list[float]:
    """Learning rates visited under a permanent plateau, ending with the first below ``min_lr``."""
    seq = [lr]
    while seq[-1] >= min_lr:
        seq.append(seq[-1] / factor)
    return seq


def format_record(rec: dict) -> str:
    def fmt(v):
        return "na" if v is None else f"{v:.6g}"

    return (
        f"epoch={rec['epoch']} phase={rec['phase']} train_loss={fmt(rec['train_loss'])} "
        f"val_loss={fmt(rec['val_loss'])} tau={fmt(rec.get('tau'))} "
        f"lr_theta={fmt(rec.get('lr_theta'))} lr_alpha={fmt(rec.get('lr_alpha'))}"
    )


def _append(path, line: str) -> None:
    if path is not None:
        with open(path, "a") as fh:
            fh.write(line + "\n")


# ---------------------------------------------------------------------------
# batching


def make_batch(samples: Sequence[SegmentationSample], patch: Sequence[int],
               rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for s in samples:
        if tuple(s.label.shape) != tuple(patch):
            s = crop_patch(s, patch, rng)
        xs.append(s.image.astype(np.float64))
        ys.append(s.label.astype(np.int64))
    return np.stack(xs), np.stack(ys)


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + size] for i in range(0, n, size)]


def _grads_or_none(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray | None]:
    for p in params:
        p.grad = None
    found = T.backward(loss)
    grads = [found.get(p) for p in params]
    for p in params:
        p.grad = None
    return grads


# ---------------------------------------------------------------------------
# search


@dataclass
class SearchState:
    spec: NetworkSpec
    config: SearchConfig
    network: Network
    alpha: ArchitectureParams
    opt_theta: Adam
    opt_alpha: Adam
    plateau: Plateau
    rng: np.random.Generator
    epoch: int = 0

    @classmethod
    def create(cls, spec: NetworkSpec, config: SearchConfig, catalog=FULL_CATALOG, seed: int = 0) -> SearchState:
        ss = np.random.SeedSequence(seed)
        net_seed, alpha_seed, run_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
        network = Network(spec, catalog=catalog, seed=net_seed)
        alpha = ArchitectureParams(catalog, spec.nodes, init_scale=config.alpha_init, seed=alpha_seed)
        return cls(
            spec, config, network, alpha,
            Adam(network.parameters(), config.lr_theta, config.betas_theta),
            Adam(alpha.parameters(), config.lr_alpha, config.betas_alpha),
            Plateau(config.patience, config.factor, config.threshold),
            np.random.default_rng(run_seed),
        )


def _edge_weight_extrema(selection) -> tuple[float, float]:
    vals = np.concatenate([s.weights.data for rows in selection.values() for s in rows])
    return float(vals.min()), float(vals.max())


def search_step(state: SearchState, train_batch, val_batch, tau: float) -> tuple[float, float]:
    """One weight step on the training batch, then one logit step on the validation batch.

    Each half draws its own pair sample. The logit gradient treats the current
    weights as fixed (first-order approximation of the inner problem).
    """
    theta = state.network.parameters()
    alpha = state.alpha.parameters()
    x_tr, y_tr = train_batch
    x_val, y_val = val_batch

    with T.frozen(alpha):
        sel = sample_architecture(state.alpha, tau, state.rng)
        loss = jaccard_loss(state.network(Tensor(x_tr), sel), y_tr)
    _check_finite(loss, "train", state, tau, sel)
    state.opt_theta.step(_grads_or_none(loss, theta))

    with T.frozen(theta):
        sel = sample_architecture(state.alpha, tau, state.rng)
        vloss = jaccard_loss(state.network(Tensor(x_val), sel), y_val)
    _check_finite(vloss, "val", state, tau, sel)
    state.opt_alpha.step(_grads_or_none(vloss, alpha))
    return loss.item(), vloss.item()


def _check_finite(loss: Tensor, phase: str, state: SearchState, tau: float, sel) -> None:
    if not np.isfinite(loss.data).all():
        lo, hi = _edge_weight_extrema(sel)
        raise NumericalError(
            f"non-finite {phase} loss at epoch {state.epoch}, tau={tau:.6g}, edge weights in [{lo:.3g}, {hi:.3g}]"
        )


@dataclass
class SearchResult:
    records: list[dict]
    alpha: ArchitectureParams
    network: Network
    genotype: Genotype
    state: SearchState


def search_epoch(state: SearchState, theta_part, alpha_part, patch) -> dict:
    cfg = state.config
    tau = temperature(state.epoch, cfg.epochs, cfg.tau0, cfg.tau_min)
    log_tau(state.epoch, tau)
    train_losses, val_losses = [], []
    val_order = _batches(len(alpha_part), cfg.batch_size, state.rng)
    for b, idx in enumerate(_batches(len(theta_part), cfg.batch_size, state.rng)):
        vidx = val_order[b % len(val_order)]
        tb = make_batch([theta_part[i] for i in idx], patch, state.rng)
        vb = make_batch([alpha_part[i] for i in vidx], patch, state.rng)
        lt, lv = search_step(state, tb, vb, tau)
        train_losses.append(lt)
        val_losses.append(lv)
    rec = {
        "epoch": state.epoch,
        "phase": "search",
        "train_loss": float(np.mean(train_losses)),
        "val_loss": float(np.mean(val_losses)),
        "tau": tau,
        "lr_theta": state.opt_theta.lr,
        "lr_alpha": state.opt_alpha.lr,
        "entropy": {ct.name: state.alpha.entropy(ct) for ct in CellType},
    }
    if state.plateau.step(rec["train_loss"]):
        state.opt_theta.lr /= cfg.factor
        state.opt_alpha.lr /= cfg.factor
    state.epoch += 1
    return rec


def run_search(spec: NetworkSpec, config: SearchConfig, samples: Sequence[SegmentationSample],
               seed: int = 0, catalog: Sequence[OperationKind] = FULL_CATALOG, log_path=None,
               task_id: str = "") -> SearchResult:
    """Alternate weight and logit steps for ``config.epochs`` epochs, then derive the genotype."""
    state = SearchState.create(spec, config, catalog, seed)
    theta_part, alpha_part = search_split(samples, config.split_ratio)
    records = []
    while state.epoch < config.epochs:
        rec = search_epoch(state, theta_part, alpha_part, spec.patch)
        records.append(rec)
        _append(log_path, format_record(rec))
    tau_final = temperature(config.epochs - 1, config.epochs, config.tau0, config.tau_min)
    provenance = {"seed": seed, "tau_final": f"{tau_final:.6g}"}
    if task_id:
        provenance["task"] = task_id
    g = derive(state.alpha, provenance)
    return SearchResult(records, state.alpha, state.network, g, state)


def mean_entropy(rec: dict) -> float:
    return float(np.mean(list(rec["entropy"].values())))


# ---------------------------------------------------------------------------
# checkpoints


def save_search_checkpoint(path, state: SearchState) -> None:
    arrays = {f"theta{i}": p.data for i, p in enumerate(state.network.parameters())}
    for ct in CellType:
        arrays[f"alpha.{ct.name}"] = state.alpha.logits[ct].data
    arrays.update(state.opt_theta.state_arrays("adam_theta"))
    arrays.update(state.opt_alpha.state_arrays("adam_alpha"))
    meta = {
        "epoch": state.epoch,
        "plateau": [state.plateau.best, state.plateau.bad],
        "rng": state.rng.bit_generator.state,
        "catalog": [k.name for k in state.alpha.catalog],
        "spec": dataclasses.asdict(state.spec),
    }
    arrays["meta"] = np.array(json.dumps(meta))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_search_checkpoint(path, state: SearchState) -> SearchState:
    """Restore a checkpoint into a state created with the same spec and catalog."""
    with np.load(path) as z:
        meta = json.loads(str(z["meta"]))
        if [k.name for k in state.alpha.catalog] != meta["catalog"]:
            raise ValueError("checkpoint catalog does not match the search state")
        params = state.network.parameters()
        for i, p in enumerate(params):
            p.data = z[f"theta{i}"].copy()
        for ct in CellType:
            state.alpha.logits[ct].data = z[f"alpha.{ct.name}"].copy()
        state.opt_theta.load_arrays("adam_theta", z)
        state.opt_alpha.load_arrays("adam_alpha", z)
    state.epoch = meta["epoch"]
    state.plateau.best, state.plateau.bad = meta["plateau"]
    state.rng.bit_generator.state = meta["rng"]
    return state


def save_model(path, network: Network) -> None:
    if network.genotype is None:
        raise ValueError("only discrete networks can be saved as models")
    arrays = {f"p{i}": p.data for i, p in enumerate(network.parameters())}
    spec = dataclasses.asdict(network.spec)
    arrays["meta"] = np.array(json.dumps({"spec": spec, "genotype": serialize(network.genotype)}))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_model(path) -> Network:
    with np.load(path) as z:
        meta = json.loads(str(z["meta"]))
        spec_d = meta["spec"]
        spec_d["patch"] = tuple(spec_d["patch"])
        spec = NetworkSpec(**spec_d)
        g = deserialize(meta["genotype"])
        net = Network(spec, genotype=g, seed=0)
        for i, p in enumerate(net.parameters()):
            p.data = z[f"p{i}"].copy()
    return net


# ---------------------------------------------------------------------------
# retraining and evaluation


def predictor(network: Network) -> Callable[[np.ndarray], np.ndarray]:
    def predict(x: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return network(Tensor(np.asarray(x, dtype=np.float64))).data

    return predict


def evaluate(predict: Callable[[np.ndarray], np.ndarray], samples: Sequence[SegmentationSample],
             num_classes: int, patch: Sequence[int]) -> dict[int, float]:
    """Mean per-sample dice for every foreground class, using half-overlap window inference."""
    scores: dict[int, list[float]] = {c: [] for c in range(1, num_classes)}
    for s in samples:
        pred = sliding_window_infer(predict, s.image, patch)
        for c in scores:
            scores[c].append(dice_metric(pred, s.label, c))
    return {c: float(np.mean(v)) for c, v in scores.items()}


def format_dice(dice: dict[int, float]) -> str:
    return "\n".join(f"class={c} dice={v:.6f}" for c, v in sorted(dice.items())) + "\n"


@dataclass
class RetrainResult:
    network: Network
    records: list[dict]
    dice: dict[int, float]
    stop_reason: str
    final_lr: float = field(default=0.0)

    @property
    def mean_dice(self) -> float:
        return float(np.mean(list(self.dice.values())))


def _loss_on(network: Network, samples, patch, rng, batch_size) -> float:
    losses = []
    with T.no_grad():
        for i in range(0, len(samples), batch_size):
            x, y = make_batch(samples[i : i + batch_size], patch, rng)
            losses.append(jaccard_loss(network(Tensor(x)), y).item())
    return float(np.mean(losses)) if losses else float("nan")


def run_retrain(genotype: Genotype, spec: NetworkSpec, config: RetrainConfig, task: TaskData,
                seed: int = 0, log_path=None) -> RetrainResult:
    """Train ``genotype`` from scratch on the training split and score the test split."""
    if config.stem_channels:
        spec = spec.replace(stem_channels=config.stem_channels)
    ss = np.random.SeedSequence(seed)
    net_seed, run_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    network = Network(spec, genotype=genotype, seed=net_seed)
    rng = np.random.default_rng(run_seed)
    params = network.parameters()
    opt = Adam(params, config.lr, config.betas)
    plateau = Plateau(config.patience, config.factor, config.threshold)
    records = []
    reason = "max_epochs"
    for epoch in range(config.epochs):
        losses = []
        for idx in _batches(len(task.train), config.batch_size, rng):
            x, y = make_batch([task.train[i] for i in idx], spec.patch, rng)
            loss = jaccard_loss(network(Tensor(x)), y)
            if not np.isfinite(loss.data).all():
                raise NumericalError(f"non-finite retrain loss at epoch {epoch}, lr={opt.lr:.3g}")
            opt.step(_grads_or_none(loss, params))
            losses.append(loss.item())
        train_loss = float(np.mean(losses))
        val_loss = _loss_on(network, task.val, spec.patch, rng, config.batch_size) if task.val else None
        rec = {"epoch": epoch, "phase": "retrain", "train_loss": train_loss, "val_loss": val_loss,
               "tau": None, "lr_theta": opt.lr, "lr_alpha": None}
        records.append(rec)
        _append(log_path, format_record(rec))
        if plateau.step(train_loss):
            opt.lr /= config.factor
        if opt.lr < config.min_lr:
            reason = "min_lr"
            break
    dice = evaluate(predictor(network), task.test, spec.num_classes, spec.patch)
    return RetrainResult(network, records, dice, reason, opt.lr)
