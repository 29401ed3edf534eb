"""Training protocol: splits, normalization, Adam with plateau halving,
early stopping, cross-validation and random hyperparameter search."""

from __future__ import annotations

import itertools
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import model as M
from .data import Dataset, Instance
from .graph import ForecastQuery, TimeSeries, squared_error
from .numerics import tensor as T
from .numerics.optim import AdamState, DivergenceError, adam_step

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = "1.0"
# "train" monitors the training split itself (used for overfitting checks)
VALIDATE_ON = ("holdout", "train")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    lr_halving_patience: int = 10
    max_epochs: int = 200
    early_stop_patience: int = 30
    batch_size: int = 64
    folds: int = 5
    validation_fraction: float = 0.20
    test_fraction: float = 0.10
    seed: int = 0
    search_samples: int = 5
    validate_on: str = "holdout"

    def __post_init__(self):
        if self.validate_on not in VALIDATE_ON:
            raise ValueError(f"validate_on must be one of {VALIDATE_ON}, got {self.validate_on!r}")
        for name in ("validation_fraction", "test_fraction"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        for name in ("lr_halving_patience", "early_stop_patience", "max_epochs", "batch_size", "folds", "search_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Fold:
    train: tuple[int, ...]
    validation: tuple[int, ...]
    test: tuple[int, ...]


@dataclass(frozen=True)
class SplitPlan:
    folds: tuple[Fold, ...]

    def __len__(self) -> int:
        return len(self.folds)

    def __getitem__(self, k) -> Fold:
        return self.folds[k]


def make_splits(n: int | Sequence, cfg: TrainConfig) -> SplitPlan:
    """Folds with pairwise disjoint test sets; validation is a fraction of the rest."""
    n = n if isinstance(n, int) else len(n)
    if n < cfg.folds:
        raise ValueError(f"{n} instances cannot be split into {cfg.folds} folds")
    n_test = max(1, int(round(cfg.test_fraction * n)))
    if n_test * cfg.folds > n:
        raise ValueError(f"{cfg.folds} disjoint test sets of {n_test} exceed {n} instances")
    order = np.random.default_rng([cfg.seed, 101]).permutation(n)
    folds = []
    for k in range(cfg.folds):
        test = order[k * n_test : (k + 1) * n_test]
        rest = np.concatenate([order[: k * n_test], order[(k + 1) * n_test :]])
        rest = np.random.default_rng([cfg.seed, 102, k]).permutation(rest)
        n_val = max(1, int(round(cfg.validation_fraction * rest.size)))
        if n_val >= rest.size:
            raise ValueError(f"too few instances ({n}) for a nonempty training split")
        folds.append(Fold(tuple(sorted(rest[n_val:].tolist())), tuple(sorted(rest[:n_val].tolist())), tuple(sorted(test.tolist()))))
    return SplitPlan(tuple(folds))


def fold_sets(dataset: Dataset, fold: Fold, cfg: TrainConfig) -> tuple[list[Instance], list[Instance]]:
    """Instances to fit on and to monitor for schedules and checkpointing."""
    tr = [dataset[i] for i in fold.train]
    va = [dataset[i] for i in fold.validation]
    if cfg.validate_on == "train":
        return tr + va, tr + va
    return tr, va


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Normalizer:
    """Per-channel z-scoring of values and a global time rescaling."""

    mean: tuple[float, ...]
    std: tuple[float, ...]
    time_scale: float

    @classmethod
    def fit(cls, instances: Sequence[Instance], channel_count: int) -> "Normalizer":
        sums = np.zeros(channel_count)
        sq = np.zeros(channel_count)
        counts = np.zeros(channel_count)
        t_max = 0.0
        for inst in instances:
            s = inst.series
            sums += s.values.sum(axis=0)
            sq += (s.values**2).sum(axis=0)
            counts += s.observed.sum(axis=0)
            t_max = max(t_max, float(np.abs(s.times).max(initial=0.0)))
        safe = np.maximum(counts, 1)
        mean = np.where(counts > 0, sums / safe, 0.0)
        var = np.where(counts > 1, sq / safe - mean**2, 1.0)
        std = np.sqrt(np.maximum(var, 1e-12))
        std = np.where(std > 1e-6, std, 1.0)
        return cls(tuple(mean.tolist()), tuple(std.tolist()), t_max if t_max > 0 else 1.0)

    @classmethod
    def identity(cls, channel_count: int) -> "Normalizer":
        return cls((0.0,) * channel_count, (1.0,) * channel_count, 1.0)

    def apply(self, inst: Instance) -> Instance:
        mu, sd = np.asarray(self.mean), np.asarray(self.std)
        s = inst.series
        series = TimeSeries(s.times / self.time_scale, (s.values - mu) / sd, s.observed)
        q = inst.query
        query = ForecastQuery(q.times / self.time_scale, q.channels)
        answer = (inst.answer - mu[q.channels]) / sd[q.channels]
        return Instance(series, query, answer)

    def invert(self, values: np.ndarray, channels: np.ndarray) -> np.ndarray:
        return values * np.asarray(self.std)[channels] + np.asarray(self.mean)[channels]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(tuple(d["mean"]), tuple(d["std"]), d["time_scale"])


# ---------------------------------------------------------------------------
# Schedulers
# ---------------------------------------------------------------------------


@dataclass
class PlateauHalving:
    """Halve the learning rate after ``patience`` epochs without strict improvement."""

    lr: float
    patience: int = 10
    best: float = float("inf")
    wait: int = 0

    def update(self, val_loss: float) -> float:
        if val_loss < self.best:
            self.best, self.wait = val_loss, 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.lr *= 0.5
                self.wait = 0
        return self.lr


@dataclass
class EarlyStopping:
    patience: int = 30
    best: float = float("inf")
    best_epoch: int = 0
    wait: int = 0

    def update(self, val_loss: float, epoch: int) -> bool:
        """Record an epoch; True means stop now."""
        if val_loss < self.best:
            self.best, self.best_epoch, self.wait = val_loss, epoch, 0
            return False
        self.wait += 1
        return self.wait >= self.patience


# ---------------------------------------------------------------------------
# Losses and prepared data
# ---------------------------------------------------------------------------


@dataclass
class Prepared:
    """Normalized instances with their graphs, ready for batching."""

    instances: list[Instance]
    graphs: list
    targets: list[np.ndarray]

    @classmethod
    def build(cls, instances: Sequence[Instance], norm: Normalizer, cfg: M.ModelConfig) -> "Prepared":
        normed = [norm.apply(i) for i in instances]
        graphs = [M.build_graph(i.series, i.query, cfg) for i in normed]
        return cls(normed, graphs, [i.answer for i in normed])

    def __len__(self) -> int:
        return len(self.instances)

    def batch(self, ids: Sequence[int]) -> tuple[M.GraphBatch, np.ndarray]:
        batch = M.collate([self.graphs[i] for i in ids], [self.instances[i].query for i in ids])
        y = np.zeros(batch.query_mask.shape)
        for b, i in enumerate(ids):
            y[b, : self.targets[i].size] = self.targets[i]
        return batch, y


def batch_loss(pred: T.Tensor, y: np.ndarray, mask: np.ndarray) -> T.Tensor:
    """Mean over instances of each instance's mean squared error over its queries."""
    weights = mask / mask.sum(axis=1, keepdims=True) / mask.shape[0]
    return T.sum(T.mul(T.square(T.sub(pred, y)), weights))


def _loss_and_grads(prep: Prepared, ids, cfg: M.ModelConfig, params: dict[str, np.ndarray]):
    batch, y = prep.batch(ids)
    with T.Tape() as tape:
        leaves = T.parameters(params)
        loss = batch_loss(M.forward_batch(batch, cfg, leaves), y, batch.query_mask)
        names = list(leaves)
        grads = tape.gradient(loss, [leaves[k] for k in names])
    return float(loss.data), dict(zip(names, grads))


def prepared_loss(prep: Prepared, cfg: M.ModelConfig, params, batch_size: int = 64) -> float:
    """Normalized-space loss over all prepared instances (equal instance weight)."""
    total = 0.0
    for start in range(0, len(prep), batch_size):
        ids = list(range(start, min(start + batch_size, len(prep))))
        batch, y = prep.batch(ids)
        loss = batch_loss(M.forward_batch(batch, cfg, params), y, batch.query_mask)
        total += float(loss.data) * len(ids)
    return total / len(prep)


# ---------------------------------------------------------------------------
# Fold training
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: float
    lr: float
    seconds: float


@dataclass
class FoldResult:
    params: dict[str, np.ndarray]
    normalizer: Normalizer
    history: list[EpochRecord]
    best_epoch: int
    stopped_epoch: int
    best_val_mse: float
    seconds_per_batch: float
    config: M.ModelConfig

    def summary(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "stopped_epoch": self.stopped_epoch,
            "best_val_mse": self.best_val_mse,
            "seconds_per_batch": self.seconds_per_batch,
            "epochs": [asdict(r) for r in self.history],
        }


def _arrays_to_json(d: dict[str, np.ndarray]) -> dict:
    return {k: {"shape": list(v.shape), "values": v.reshape(-1).tolist()} for k, v in d.items()}


def _arrays_from_json(d: dict) -> dict[str, np.ndarray]:
    return {k: np.asarray(v["values"], dtype=np.float64).reshape(v["shape"]) for k, v in d.items()}


def train_fold(
    train: Sequence[Instance],
    val: Sequence[Instance],
    model_cfg: M.ModelConfig,
    cfg: TrainConfig,
    *,
    init_seed: int | None = None,
    normalizer: Normalizer | None = None,
    state_path: str | Path | None = None,
    progress: Callable[[str], None] | None = None,
) -> FoldResult:
    """Fit one model; returns the parameters of the best validation epoch.

    When ``state_path`` is given the full training state is written there
    after every epoch and, if the file already exists, training resumes
    from it.
    """
    if not train or not val:
        raise ValueError("training and validation sets must be nonempty")
    seed = cfg.seed if init_seed is None else init_seed
    norm = normalizer or Normalizer.fit(train, model_cfg.channel_count)
    tr = Prepared.build(train, norm, model_cfg)
    va = Prepared.build(val, norm, model_cfg)

    params = M.init_params(model_cfg, seed)
    adam = AdamState()
    plateau = PlateauHalving(cfg.lr, cfg.lr_halving_patience)
    stopper = EarlyStopping(cfg.early_stop_patience)
    best_params = params
    history: list[EpochRecord] = []
    start_epoch = 1
    batch_seconds, n_batches = 0.0, 0

    state_path = Path(state_path) if state_path else None
    if state_path and state_path.exists():
        st = json.loads(state_path.read_text())
        params = _arrays_from_json(st["params"])
        best_params = _arrays_from_json(st["best_params"])
        adam = AdamState.from_dict(st["adam"])
        plateau = PlateauHalving(**st["plateau"])
        stopper = EarlyStopping(**st["stopper"])
        history = [EpochRecord(**r) for r in st["history"]]
        start_epoch = st["epoch"] + 1
        if st.get("finished"):
            start_epoch = cfg.max_epochs + 1

    stopped = history[-1].epoch if history else 0
    for epoch in range(start_epoch, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng([seed, 7, epoch]).permutation(len(tr))
        running = 0.0
        for start in range(0, len(tr), cfg.batch_size):
            ids = order[start : start + cfg.batch_size].tolist()
            tb = time.perf_counter()
            loss, grads = _loss_and_grads(tr, ids, model_cfg, params)
            if not np.isfinite(loss):
                raise DivergenceError(f"loss became {loss} at epoch {epoch}")
            adam, params = adam_step(adam, params, grads, plateau.lr)
            batch_seconds += time.perf_counter() - tb
            n_batches += 1
            running += loss * len(ids)
        train_mse = running / len(tr)
        val_mse = prepared_loss(va, model_cfg, params, cfg.batch_size)
        if not np.isfinite(val_mse):
            raise DivergenceError(f"validation loss became {val_mse} at epoch {epoch}")
        lr_used = plateau.lr
        improved = val_mse < stopper.best
        stop = stopper.update(val_mse, epoch)
        plateau.update(val_mse)
        if improved:
            best_params = params
        history.append(EpochRecord(epoch, train_mse, val_mse, lr_used, time.perf_counter() - t0))
        stopped = epoch
        if progress:
            progress(f"epoch {epoch:4d}  train {train_mse:.5f}  val {val_mse:.5f}  lr {lr_used:.2e}")
        if state_path:
            _write_state(state_path, epoch, params, best_params, adam, plateau, stopper, history, stop)
        if stop:
            break

    return FoldResult(
        params=best_params,
        normalizer=norm,
        history=history,
        best_epoch=stopper.best_epoch,
        stopped_epoch=stopped,
        best_val_mse=stopper.best,
        seconds_per_batch=batch_seconds / max(n_batches, 1),
        config=model_cfg,
    )


def _write_state(path, epoch, params, best_params, adam, plateau, stopper, history, finished):
    st = {
        "epoch": epoch,
        "finished": bool(finished),
        "params": _arrays_to_json(params),
        "best_params": _arrays_to_json(best_params),
        "adam": adam.to_dict(),
        "plateau": asdict(plateau),
        "stopper": asdict(stopper),
        "history": [asdict(r) for r in history],
    }
    tmp = Path(path).with_suffix(".tmp")
    tmp.write_text(json.dumps(st))
    tmp.replace(path)


# ---------------------------------------------------------------------------
# Evaluation and reference predictors
# ---------------------------------------------------------------------------


def predict_instances(instances: Sequence[Instance], params, cfg: M.ModelConfig, norm: Normalizer, batch_size: int = 64) -> list[np.ndarray]:
    """Model answers in original units."""
    normed = [norm.apply(i) for i in instances]
    preds = M.predict([(i.series, i.query) for i in normed], params, cfg, batch_size)
    return [norm.invert(p, i.query.channels) for p, i in zip(preds, instances)]


def evaluate(params, cfg: M.ModelConfig, norm: Normalizer, instances: Sequence[Instance], batch_size: int = 64) -> float:
    """Mean over instances of the per-instance squared error, original units."""
    preds = predict_instances(instances, params, cfg, norm, batch_size)
    return float(np.mean([squared_error(i.answer, p) for i, p in zip(instances, preds)]))


def fold_summary(scores: Sequence[float]) -> tuple[float, float]:
    """Mean and (population) standard deviation over fold scores."""
    a = np.asarray(scores, dtype=np.float64)
    return float(a.mean()), float(a.std())


def channel_means(instances: Sequence[Instance], channel_count: int) -> np.ndarray:
    return np.asarray(Normalizer.fit(instances, channel_count).mean)


def mean_predictor(inst: Instance, means: np.ndarray) -> np.ndarray:
    return means[inst.query.channels]


def carry_forward_predictor(inst: Instance, means: np.ndarray) -> np.ndarray:
    """Last observed value of the queried channel; the channel mean if never observed."""
    s = inst.series
    out = means[inst.query.channels].copy()
    for k, c in enumerate(inst.query.channels):
        rows = np.flatnonzero(s.observed[:, c])
        if rows.size:
            out[k] = s.values[rows[-1], c]
    return out


def baseline_mse(predictor, instances: Sequence[Instance], means: np.ndarray) -> float:
    return float(np.mean([squared_error(i.answer, predictor(i, means)) for i in instances]))


# ---------------------------------------------------------------------------
# Hyperparameter search and cross-validation
# ---------------------------------------------------------------------------


def search_space(layers=M.LAYER_CHOICES, heads=M.HEAD_CHOICES, hidden=M.HIDDEN_CHOICES) -> list[dict]:
    return [{"layers": l, "heads": h, "hidden": d} for l, h, d in itertools.product(layers, heads, hidden)]


def sample_configs(space: Sequence[dict], cfg: TrainConfig) -> list[dict]:
    rng = np.random.default_rng([cfg.seed, 303])
    n = min(cfg.search_samples, len(space))
    return [dict(space[i]) for i in rng.choice(len(space), size=n, replace=False)]


Trainer = Callable[[Sequence[Instance], Sequence[Instance], M.ModelConfig, TrainConfig], FoldResult]


@dataclass
class SearchResult:
    chosen: M.ModelConfig
    trials: list[dict]  # {"config", "val_mse", "fold_val_mse"}
    runs: dict[int, list[FoldResult]] = field(default_factory=dict)  # trial index -> fold results
    chosen_index: int = 0


def select_hyperparameters(
    dataset: Dataset,
    plan: SplitPlan,
    space: Sequence[dict],
    cfg: TrainConfig,
    *,
    ablation: bool = False,
    trainer: Trainer | None = None,
    state_dir: str | Path | None = None,
    progress: Callable[[str], None] | None = None,
    fold_ids: Sequence[int] | None = None,
) -> SearchResult:
    """Sample configurations and keep the one with the lowest mean validation MSE.

    Ties go to the configuration sampled first.
    """
    fold_ids = list(range(len(plan))) if fold_ids is None else list(fold_ids)
    trials, runs = [], {}
    best_idx, best_val = None, float("inf")
    for t, params in enumerate(sample_configs(space, cfg)):
        mc = M.ModelConfig(channel_count=dataset.channel_count, ablation_no_target_edges=ablation, **params)
        results = []
        for k, fold in zip(fold_ids, plan.folds):
            tr, va = fold_sets(dataset, fold, cfg)
            if trainer is not None:
                results.append(trainer(tr, va, mc, cfg))
                continue
            if progress:
                progress(f"trial {t} {params} fold {k}")
            state = Path(state_dir) / f"trial{t}.fold{k}.state.json" if state_dir else None
            results.append(train_fold(tr, va, mc, cfg, state_path=state, progress=progress))
        fold_vals = [r.best_val_mse for r in results]
        val = float(np.mean(fold_vals))
        trials.append({"config": params, "val_mse": val, "fold_val_mse": fold_vals})
        runs[t] = results
        log.info("trial %d %s: validation MSE %.5f", t, params, val)
        if val < best_val:
            best_idx, best_val = t, val
    chosen = M.ModelConfig(
        channel_count=dataset.channel_count, ablation_no_target_edges=ablation, **trials[best_idx]["config"]
    )
    return SearchResult(chosen, trials, runs, best_idx)


@dataclass
class TrainReport:
    label: str
    hyperparameters: dict
    folds: list[dict]
    test_mse_mean: float
    test_mse_std: float
    train_config: dict
    search: list[dict] = field(default_factory=list)
    baselines: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"schema_version": REPORT_SCHEMA_VERSION, **asdict(self)}

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def fold_report(k: int, fold: Fold, result: FoldResult, dataset: Dataset) -> dict:
    tr = [dataset[i] for i in fold.train]
    te = [dataset[i] for i in fold.test]
    va = [dataset[i] for i in fold.validation]
    means = channel_means(tr, dataset.channel_count)
    args = (result.params, result.config, result.normalizer)
    return {
        "fold": k,
        "train_size": len(tr),
        "validation_size": len(va),
        "test_size": len(te),
        "train_mse": evaluate(*args, tr),
        "validation_mse": evaluate(*args, va),
        "test_mse": evaluate(*args, te),
        "carry_forward_test_mse": baseline_mse(carry_forward_predictor, te, means),
        "channel_mean_test_mse": baseline_mse(mean_predictor, te, means),
        **result.summary(),
    }


def build_report(
    dataset: Dataset,
    plan: SplitPlan,
    results: Sequence[FoldResult],
    cfg: TrainConfig,
    search: Sequence[dict] = (),
    fold_ids: Sequence[int] | None = None,
) -> TrainReport:
    fold_ids = list(range(len(results))) if fold_ids is None else list(fold_ids)
    folds = [fold_report(k, plan[j], r, dataset) for j, (k, r) in enumerate(zip(fold_ids, results))]
    mean, std = fold_summary([f["test_mse"] for f in folds])
    chosen = results[0].config
    baselines = {
        name: dict(zip(("mean", "std"), fold_summary([f[f"{name}_test_mse"] for f in folds])))
        for name in ("carry_forward", "channel_mean")
    }
    return TrainReport(
        label=chosen.label,
        hyperparameters={"layers": chosen.layers, "heads": chosen.heads, "hidden": chosen.hidden},
        folds=folds,
        test_mse_mean=mean,
        test_mse_std=std,
        train_config=asdict(cfg),
        search=list(search),
        baselines=baselines,
    )


def cross_validate(
    dataset: Dataset,
    cfg: TrainConfig,
    model_cfg: M.ModelConfig | None = None,
    *,
    space: Sequence[dict] | None = None,
    ablation: bool = False,
    folds: Sequence[int] | None = None,
    state_dir: str | Path | None = None,
    progress: Callable[[str], None] | None = None,
) -> tuple[TrainReport, list[FoldResult]]:
    """Full protocol: search (unless ``model_cfg`` is given), then per-fold test scores."""
    plan = make_splits(len(dataset), cfg)
    fold_ids = list(range(len(plan))) if folds is None else list(folds)
    plan = SplitPlan(tuple(plan[k] for k in fold_ids))
    trials: list[dict] = []
    if model_cfg is None:
        found = select_hyperparameters(
            dataset, plan, space or search_space(), cfg,
            ablation=ablation, state_dir=state_dir, progress=progress, fold_ids=fold_ids,
        )
        trials = found.trials
        results = found.runs[found.chosen_index]
    else:
        model_cfg = replace(model_cfg, ablation_no_target_edges=ablation or model_cfg.ablation_no_target_edges)
        results = []
        for k, fold in zip(fold_ids, plan.folds):
            state = Path(state_dir) / f"fold{k}.state.json" if state_dir else None
            tr, va = fold_sets(dataset, fold, cfg)
            results.append(train_fold(tr, va, model_cfg, cfg, state_path=state, progress=progress))
    return build_report(dataset, plan, results, cfg, trials, fold_ids), results
