"""Sequential training: main training, auxiliary distillation and retrospector fitting."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .data import TaskDataset, TaskStream
from .errors import ConfigError, DivergenceError, NonFiniteError, SequencingError
from .exemplars import RESERVOIR_ALL_TASKS, SUBSET_PREV_TASK, Exemplar, ExemplarStore, reservoir_insert
from .model import AuxiliaryExtractor, ContinualModel, Linear, Module, Retrospector
from .tensor_core import Adam, Tape, Tensor, ops

logger = logging.getLogger(__name__)

STRATEGY_KINDS = ("rfe", "rfe_p", "rfe_b", "finetune")


@dataclass
class StrategyConfig:
    kind: str = "rfe"
    capacity: int = 0
    alpha: float = 1.0
    end_to_end: bool = False

    def __post_init__(self):
        self.kind = self.kind.lower().replace("-", "_")
        if self.kind not in STRATEGY_KINDS:
            raise ConfigError(f"strategy.kind must be one of {STRATEGY_KINDS}, got {self.kind!r}")
        if self.capacity < 0:
            raise ConfigError("strategy.capacity must be non-negative")
        if self.kind in ("rfe", "finetune") and self.capacity != 0:
            raise ConfigError(f"strategy.capacity must be 0 for kind {self.kind!r}")
        if self.alpha < 0:
            raise ConfigError("strategy.alpha must be non-negative")
        if self.kind == "finetune":
            self.alpha = 0.0
            self.end_to_end = False

    @property
    def uses_retrospectors(self) -> bool:
        return self.kind != "finetune"

    def new_store(self) -> Optional[ExemplarStore]:
        if self.kind == "rfe_p":
            return ExemplarStore(self.capacity, SUBSET_PREV_TASK)
        if self.kind == "rfe_b":
            return ExemplarStore(self.capacity, RESERVOIR_ALL_TASKS)
        return None


@dataclass
class TrainConfig:
    epochs: int = 40
    aux_epochs: int = 40
    retro_epochs: int = 40
    lr: float = 5e-4
    aux_lr: float = 5e-3
    retro_lr: float = 5e-3
    batch_size: int = 32
    patience: int = 3
    lr_decay: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "aux_epochs", "retro_epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"training.{name} must be at least 1")
        for name in ("lr", "aux_lr", "retro_lr", "lr_decay"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"training.{name} must be positive")
        if self.patience < 1:
            raise ConfigError("training.patience must be at least 1")


@dataclass
class LossRecord:
    task: int
    stage: str
    epoch: int
    loss: float
    val_loss: float
    lr: float


class PlateauSchedule:
    """Multiply the learning rate by ``factor`` once the validation loss has
    failed to improve for ``patience`` consecutive epochs."""

    def __init__(self, optimizers, patience: int, factor: float, threshold: float = 1e-4):
        self.optimizers = list(optimizers)
        self.patience = patience
        self.factor = factor
        self.threshold = threshold
        self.best = np.inf
        self.bad_epochs = 0

    def step(self, value: float) -> None:
        if value < self.best * (1.0 - self.threshold):
            self.best = value
            self.bad_epochs = 0
            return
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            for opt in self.optimizers:
                opt.lr = opt.lr * self.factor
            self.bad_epochs = 0


@dataclass
class Trainer:
    """Holds per-run state shared across tasks: configs, the exemplar store and the loss log."""

    strategy: StrategyConfig
    config: TrainConfig
    store: Optional[ExemplarStore] = None
    log: list = field(default_factory=list)
    on_record: Optional[Callable[[LossRecord], None]] = None

    def __post_init__(self):
        if self.store is None:
            self.store = self.strategy.new_store()

    def _emit(self, rec: LossRecord) -> None:
        self.log.append(rec)
        if self.on_record is not None:
            self.on_record(rec)

    def learn_task(self, model: ContinualModel, data: TaskDataset) -> ContinualModel:
        return learn_task(model, data, self)


# ---------------------------------------------------------------- helpers

def _rng(cfg: TrainConfig, task: int, stage: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, task, stage])


def _batches(n: int, size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    return [perm[i:i + size] for i in range(0, n, size)]


def features(module: Module, x: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """Untracked forward pass in chunks."""
    if len(x) == 0:
        return np.zeros((0,))
    parts = [module(Tensor(x[i:i + chunk])).data for i in range(0, len(x), chunk)]
    return np.concatenate(parts)


def _check_finite(value: float, stage: str, task: int, epoch: int) -> None:
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite {stage} loss at task {task}, epoch {epoch}")


def _fit(stage: str, task: int, params: dict, lr: float, epochs: int, n_train: int,
         step_loss: Callable[[np.ndarray, np.random.Generator], Tensor],
         val_loss: Callable[[], float], trainer: Trainer, rng: np.random.Generator,
         extra_optimizers=()) -> list[float]:
    """Generic epoch loop with Adam and plateau decay. Returns per-epoch training losses."""
    cfg = trainer.config
    opt = Adam(params, lr=lr)
    optimizers = [opt, *extra_optimizers]
    sched = PlateauSchedule(optimizers, cfg.patience, cfg.lr_decay)
    history = []
    for epoch in range(1, epochs + 1):
        total, count = 0.0, 0
        for idx in _batches(n_train, cfg.batch_size, rng):
            with Tape() as tape:
                loss = step_loss(idx, rng)
            value = loss.item()
            _check_finite(value, stage, task, epoch)
            tape.backward(loss)
            try:
                for o in optimizers:
                    o.step()
                    o.zero_grad()
            except NonFiniteError as exc:
                raise DivergenceError(f"{stage} at task {task}, epoch {epoch}: {exc}") from exc
            total += value * len(idx)
            count += len(idx)
        train_loss = total / count
        v = val_loss()
        _check_finite(v, stage, task, epoch)
        sched.step(v)
        history.append(train_loss)
        trainer._emit(LossRecord(task, stage, epoch, train_loss, v, opt.lr))
    return history


# ---------------------------------------------------------------- losses

def feature_estimation_loss(estimate: Tensor, target) -> Tensor:
    """Batch mean of squared L2 distances; the target never receives gradient."""
    target = target.detach() if isinstance(target, Tensor) else Tensor(target)
    return ops.mse_sum(estimate, target)


def training_loss(model: ContinualModel, x: np.ndarray, y_local: np.ndarray, task: int,
                  prev_extractor: Optional[Module], alpha: float,
                  stored_x: Optional[np.ndarray] = None) -> Tensor:
    """Cross-entropy on the current head plus ``alpha`` times the feature
    estimation loss of the current extractor against the frozen predecessor
    over the current batch and any stored samples."""
    feats = model.extract(Tensor(x))
    ce = ops.masked_softmax_cross_entropy(model.classify(feats, task), y_local)
    if task == 1 or alpha == 0:
        return ce
    if prev_extractor is None:
        raise ConfigError(f"task {task} needs the previous extractor for the regularization term")
    if stored_x is not None and len(stored_x):
        union_x = np.concatenate([x, stored_x])
        union_f = ops.concat([feats, model.extract(Tensor(stored_x))], axis=0)
    else:
        union_x, union_f = x, feats
    target = features(prev_extractor, union_x)
    return ops.add(ce, ops.scale(feature_estimation_loss(union_f, target), alpha))


# ---------------------------------------------------------------- stages

def _stored(trainer: Trainer, task: int):
    """Stored samples usable at ``task``: (x, task ids, features) or None."""
    if task == 1 or trainer.store is None or len(trainer.store) == 0:
        return None
    x, tasks, _, feats = trainer.store.arrays()
    return x, tasks, feats


def train_main(model: ContinualModel, data: TaskDataset, trainer: Trainer,
               retrospector: Optional[Retrospector] = None) -> list[float]:
    """Optimize the extractor and the current head. With ``retrospector`` the
    end-to-end variant is used: the regularizer is replaced by the
    retrospector's estimation loss, trained jointly."""
    t = data.task
    cfg, strat = trainer.config, trainer.strategy
    prev = model.prev_extractor
    alpha = strat.alpha
    y_local = data.local(data.y_train)
    y_val = data.local(data.y_val)
    stored = _stored(trainer, t)
    stored_x = stored[0] if stored is not None else None
    params = {**model.extractor.parameters("f."), **model.heads[t].parameters(f"w.task{t}.")}
    extra = []
    if retrospector is not None:
        extra.append(Adam(retrospector.parameters(f"r.task{t}."), lr=cfg.retro_lr))

    def e2e_term(x: np.ndarray, feats: Tensor) -> Tensor:
        if stored_x is not None:
            x = np.concatenate([x, stored_x])
            feats = ops.concat([feats, Tensor(features(model.extractor, stored_x))], axis=0)
        est = retrospector.rectify(feats.detach(), Tensor(x))
        return feature_estimation_loss(est, features(prev, x))

    def step_loss(idx, rng):
        xb = data.x_train[idx]
        if retrospector is not None:
            feats = model.extract(Tensor(xb))
            ce = ops.masked_softmax_cross_entropy(model.classify(feats, t), y_local[idx])
            return ops.add(ce, ops.scale(e2e_term(xb, feats), alpha))
        sb = None
        if stored_x is not None and alpha > 0:
            sb = stored_x[rng.choice(len(stored_x), size=min(len(idx), len(stored_x)), replace=False)]
        return training_loss(model, xb, y_local[idx], t, prev, alpha, sb)

    def val_loss():
        feats = model.extract(Tensor(data.x_val))
        loss = ops.masked_softmax_cross_entropy(model.classify(feats, t), y_val).item()
        if t > 1 and alpha > 0:
            if retrospector is not None:
                est = retrospector.rectify(feats, Tensor(data.x_val))
                loss += alpha * ops.mse_sum(est, Tensor(features(prev, data.x_val))).item()
            else:
                loss += alpha * ops.mse_sum(feats, Tensor(features(prev, data.x_val))).item()
        return loss

    return _fit("main", t, params, cfg.lr, cfg.epochs, len(data.y_train), step_loss, val_loss,
                trainer, _rng(cfg, t, 0), extra)


def distill_aux(extractor: Module, data: TaskDataset, aux: AuxiliaryExtractor, trainer: Trainer,
                dim_f: int, rng_seed: Optional[np.random.Generator] = None) -> list[float]:
    """Fit ``aux`` to reproduce ``extractor`` on the task's training data, then freeze it.

    When dim(h) differs from dim(f) a temporary affine adapter maps the
    auxiliary output into feature space; it is discarded afterwards.
    """
    cfg = trainer.config
    rng = _rng(cfg, data.task, 1) if rng_seed is None else rng_seed
    target = features(extractor, data.x_train)
    target_val = features(extractor, data.x_val)
    adapter = Linear(aux.dim_h, dim_f, rng) if aux.dim_h != dim_f else None
    params = aux.parameters("aux.")
    if adapter is not None:
        params.update(adapter.parameters("adapter."))

    def estimate(x):
        h = aux(Tensor(x))
        return adapter(h) if adapter is not None else h

    def step_loss(idx, _rng):
        return feature_estimation_loss(estimate(data.x_train[idx]), target[idx])

    def val_loss():
        return ops.mse_sum(estimate(data.x_val), Tensor(target_val)).item()

    history = _fit("distill", data.task, params, cfg.aux_lr, cfg.aux_epochs, len(data.y_train),
                   step_loss, val_loss, trainer, rng)
    aux.freeze()
    return history


def train_retrospector(model: ContinualModel, retro: Retrospector, data: TaskDataset,
                       trainer: Trainer) -> list[float]:
    """Fit the non-auxiliary parameters of ``retro`` so that it maps current
    features to the previous extractor's features, over the task's training
    data plus any stored samples. Under the reservoir strategy, older
    retrospectors are tuned as well through chained terms on buffered samples."""
    t = data.task
    cfg = trainer.config
    prev = model.prev_extractor
    if prev is None:
        raise ConfigError("retrospector training needs the previous extractor")
    stored = _stored(trainer, t)
    # f_t, f_{t-1} and h_t are frozen here, so their outputs are fixed inputs
    x = data.x_train
    cur = features(model.extractor, x)
    aux_out = features(retro.aux, x)
    target = features(prev, x)
    replay = None
    if stored is not None:
        sx = stored[0]
        replay = (features(model.extractor, sx), features(retro.aux, sx), features(prev, sx))
    cur_val = features(model.extractor, data.x_val)
    aux_val = features(retro.aux, data.x_val)
    target_val = features(prev, data.x_val)

    params = retro.trainable_parameters(f"r.task{t}.")
    for p in params.values():
        p.requires_grad = True

    chain = None
    if trainer.strategy.kind == "rfe_b" and stored is not None:
        bx, btask, bfeat = stored
        older = np.flatnonzero(btask < t - 1)
        if older.size and bfeat is not None:
            chain = _ChainData(model, t, bx[older], btask[older], bfeat[older])
            for j in range(btask[older].min() + 1, t):
                extra = model.retrospectors[j].trainable_parameters(f"r.task{j}.")
                for p in extra.values():
                    p.requires_grad = True
                params.update(extra)

    def step_loss(idx, rng):
        f, h, tgt = cur[idx], aux_out[idx], target[idx]
        if replay is not None:
            # stored samples are replayed next to every batch of new data
            pick = rng.choice(len(replay[0]), size=min(len(idx), len(replay[0])), replace=False)
            f, h, tgt = (np.concatenate([a, b[pick]]) for a, b in zip((f, h, tgt), replay))
        est = retro.rectify(Tensor(f), h_x=Tensor(h))
        loss = feature_estimation_loss(est, tgt)
        if chain is not None:
            pick = rng.choice(chain.size, size=min(len(idx), chain.size), replace=False)
            loss = ops.add(loss, chain.loss(pick))
        return loss

    def val_loss():
        est = retro.rectify(Tensor(cur_val), h_x=Tensor(aux_val))
        return ops.mse_sum(est, Tensor(target_val)).item()

    try:
        history = _fit("retrospector", t, params, cfg.retro_lr, cfg.retro_epochs, len(data.y_train), step_loss,
                       val_loss, trainer, _rng(cfg, t, 2))
    finally:
        retro.freeze()
        for j in model.retrospectors:
            model.retrospectors[j].freeze()
    return history


class _ChainData:
    """Buffered samples from tasks older than t-1, with their original features
    and the frozen auxiliary outputs each retrospector in their chain needs."""

    def __init__(self, model: ContinualModel, t: int, x, task, target):
        self.model = model
        self.t = t
        self.task = task
        self.target = target
        self.size = len(task)
        self.cur = features(model.extractor, x)
        lowest = int(task.min())
        self.aux = {j: features(model.retrospectors[j].aux, x) for j in range(lowest + 1, t + 1)}

    def loss(self, idx: np.ndarray) -> Tensor:
        """Size-weighted mean of per-source-task chain losses."""
        idx = np.sort(idx)
        total = None
        for i in np.unique(self.task[idx]):
            sel = idx[self.task[idx] == i]
            f = Tensor(self.cur[sel])
            for j in range(self.t, i, -1):
                f = self.model.retrospectors[j].rectify(f, h_x=Tensor(self.aux[j][sel]))
            term = ops.scale(feature_estimation_loss(f, self.target[sel]), len(sel) / len(idx))
            total = term if total is None else ops.add(total, term)
        return total


def update_store(trainer: Trainer, model: ContinualModel, data: TaskDataset) -> None:
    """After task t: P keeps a subset of task t; B streams task t through the reservoir.
    Stored features are f_t(x)."""
    store = trainer.store
    if store is None or store.capacity == 0:
        return
    feats = features(model.extractor, data.x_train)
    items = [Exemplar(data.x_train[i], data.task, int(data.y_train[i]), feats[i]) for i in range(len(feats))]
    rng = _rng(trainer.config, data.task, 3)
    if store.policy == SUBSET_PREV_TASK:
        store.replace_with_subset(items, rng)
    else:
        n = store.seen
        for item in items:
            n += 1
            reservoir_insert(store, item, n, rng)


def learn_task(model: ContinualModel, data: TaskDataset, trainer: Trainer) -> ContinualModel:
    """One step of the sequential procedure for task ``data.task``:
    main training, distillation of the next auxiliary extractor, then
    retrospector training (t > 1), and the store update."""
    t = data.task
    if t != model.n_tasks + 1:
        raise SequencingError(f"expected task {model.n_tasks + 1}, got task {t}")
    strat = trainer.strategy
    for s in model.heads.tasks():
        model.heads[s].freeze()
    model.add_task(data.classes)
    if t > 1 and model.prev_extractor is None:
        model.prev_extractor = model.snapshot_extractor()

    e2e = strat.end_to_end and strat.uses_retrospectors and t > 1
    retro = None
    if e2e:
        retro = model.new_retrospector(model.new_aux())
        model.retrospectors[t] = retro
    logger.info("task %d: main training", t)
    train_main(model, data, trainer, retrospector=retro)
    model.heads[t].freeze()

    if e2e:
        retro.freeze()
    elif strat.uses_retrospectors and not strat.end_to_end:
        aux = model.new_aux()
        distill_aux(model.extractor, data, aux, trainer, model.dim_f)
        model.pending_aux[t + 1] = aux
        if t > 1:
            retro = model.new_retrospector(model.pending_aux.pop(t))
            model.retrospectors[t] = retro
            train_retrospector(model, retro, data, trainer)

    update_store(trainer, model, data)
    model.prev_extractor = model.snapshot_extractor()
    return model


def train_stream(model: ContinualModel, stream: TaskStream, trainer: Trainer,
                 after_task: Optional[Callable[[ContinualModel, int], None]] = None) -> ContinualModel:
    for data in stream:
        learn_task(model, data, trainer)
        if after_task is not None:
            after_task(model, data.task)
    return model


def train_joint(model: ContinualModel, stream: TaskStream, trainer: Trainer) -> ContinualModel:
    """Oracle reference: all tasks trained together, each sample scored on its own task's units."""
    cfg = trainer.config
    for data in stream:
        model.add_task(data.classes)
    x = np.concatenate([d.x_train for d in stream])
    x_val = np.concatenate([d.x_val for d in stream])
    n_units = model.n_classes()

    def targets(split):
        ys, masks = [], []
        for d in stream:
            y = getattr(d, split)
            off = model.class_offset(d.task)
            ys.append(d.local(y) + off)
            m = np.zeros((len(y), n_units), dtype=bool)
            m[:, off:off + d.n_classes] = True
            masks.append(m)
        return np.concatenate(ys), np.concatenate(masks)

    y, mask = targets("y_train")
    y_val, mask_val = targets("y_val")
    heads = [model.heads[t] for t in range(1, model.n_tasks + 1)]

    def logits(xb):
        feats = model.extract(Tensor(xb))
        return ops.concat([h(feats) for h in heads], axis=1)

    def step_loss(idx, _rng):
        return ops.masked_softmax_cross_entropy(logits(x[idx]), y[idx], mask[idx])

    def val_loss():
        return ops.masked_softmax_cross_entropy(logits(x_val), y_val, mask_val).item()

    params = {**model.extractor.parameters("f."), **model.heads.parameters("w.")}
    _fit("joint", 0, params, cfg.lr, cfg.epochs, len(y), step_loss, val_loss, trainer, _rng(cfg, 0, 0))
    return model
