import dataclasses

import numpy as np
import pytest
from scipy import stats

import rfe.engine as engine
from helpers import tiny_model, tiny_stream, tiny_trainer
from rfe.engine import (PlateauSchedule, StrategyConfig, TrainConfig, Trainer, distill_aux,
                        feature_estimation_loss, features, learn_task, train_retrospector, train_stream,
                        training_loss)
from rfe.errors import ConfigError, DivergenceError, SequencingError
from rfe.exemplars import Exemplar, ExemplarStore, reservoir_insert
from rfe.inference import rectify_chain
from rfe.model import AuxiliaryExtractor
from rfe.tensor_core import Adam, Tape, Tensor, ops


def _params(model):
    return {k: p.data.copy() for k, p in model.named_parameters()}


def _same(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


# ---------------------------------------------------------------- feature estimation loss

def test_fe_loss_identity_is_zero_with_zero_gradient():
    x = np.random.default_rng(0).normal(size=(5, 4))
    est = Tensor(x, requires_grad=True)
    with Tape() as tape:
        loss = feature_estimation_loss(est, x)
    tape.backward(loss)
    assert loss.item() == 0.0
    assert np.array_equal(est.grad, np.zeros_like(x))


def test_fe_loss_unit_offset():
    e = np.zeros((1, 6))
    e[0, 0] = 1.0
    assert feature_estimation_loss(Tensor(e), np.zeros((1, 6))).item() == 1.0


def test_fe_loss_vs_direct_sum_and_detached_target():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(7, 5)), rng.normal(size=(7, 5))
    direct = sum(sum((a[i, j] - b[i, j]) ** 2 for j in range(5)) for i in range(7)) / 7
    est, tgt = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    with Tape() as tape:
        loss = feature_estimation_loss(est, tgt)
    tape.backward(loss)
    assert loss.item() == pytest.approx(direct, rel=1e-12)
    assert np.allclose(est.grad, 2 * (a - b) / 7)
    assert tgt.grad is None


def test_fe_loss_dimension_mismatch():
    from rfe.errors import DimensionError
    with pytest.raises(DimensionError):
        feature_estimation_loss(Tensor(np.ones((2, 3))), np.ones((2, 4)))


# ---------------------------------------------------------------- training loss

def _two_task_model(seed=0):
    stream = tiny_stream(seed=seed)
    model = tiny_model(seed=seed)
    model.add_task(stream[1].classes)
    model.prev_extractor = model.snapshot_extractor()
    model.add_task(stream[2].classes)
    rng = np.random.default_rng(seed + 10)
    for _, p in model.extractor.named_parameters():
        p.data = p.data + 0.1 * rng.normal(size=p.shape)
    return model, stream


def _ce(model, x, y, task):
    return ops.masked_softmax_cross_entropy(model.classify(model.extract(Tensor(x)), task), y).item()


def test_training_loss_first_task_is_cross_entropy():
    stream = tiny_stream()
    model = tiny_model()
    model.add_task(stream[1].classes)
    x, y = stream[1].x_train[:16], stream[1].local(stream[1].y_train[:16])
    assert training_loss(model, x, y, 1, None, 1.0).item() == _ce(model, x, y, 1)


def test_training_loss_alpha_zero_is_cross_entropy():
    model, stream = _two_task_model()
    x, y = stream[2].x_train[:16], stream[2].local(stream[2].y_train[:16])
    assert training_loss(model, x, y, 2, model.prev_extractor, 0.0).item() == _ce(model, x, y, 2)


def test_training_loss_alpha_one_is_sum_of_terms():
    model, stream = _two_task_model()
    x, y = stream[2].x_train[:16], stream[2].local(stream[2].y_train[:16])
    s = stream[1].x_train[:5]
    union = np.concatenate([x, s])
    cur = model.extractor(Tensor(union)).data
    old = model.prev_extractor(Tensor(union)).data
    fe = np.sum((cur - old) ** 2) / len(union)
    assert fe > 0
    got = training_loss(model, x, y, 2, model.prev_extractor, 1.0, stored_x=s).item()
    assert got == pytest.approx(_ce(model, x, y, 2) + fe, rel=1e-12)


def test_training_loss_needs_previous_extractor():
    model, stream = _two_task_model()
    with pytest.raises(ConfigError):
        training_loss(model, stream[2].x_train[:4], np.zeros(4, dtype=int), 2, None, 1.0)


def test_warm_start_regularizer_is_zero():
    stream = tiny_stream()
    model = tiny_model()
    learn_task(model, stream[1], tiny_trainer(epochs=2))
    x = stream[2].x_train
    loss = feature_estimation_loss(model.extract(Tensor(x)), features(model.prev_extractor, x))
    assert loss.item() == 0.0


# ---------------------------------------------------------------- distillation

def test_distill_zero_target_reaches_zero():
    stream = tiny_stream()
    model = tiny_model(dim_f=4, dim_h=4, d=2)
    last = model.extractor.layer1
    last.weight.data[:] = 0.0
    aux = AuxiliaryExtractor((6,), 4, np.random.default_rng(0))
    aux.fc.weight.data[:] = 0.0
    history = distill_aux(model.extractor, stream[1], aux, tiny_trainer(epochs=3), 4)
    assert history == [0.0, 0.0, 0.0]
    assert aux.frozen


def test_distill_loss_is_monotone():
    stream = tiny_stream(samples=100)
    model = tiny_model()
    trainer = tiny_trainer(epochs=15)
    history = distill_aux(model.extractor, stream[1], model.new_aux(), trainer, model.dim_f)
    assert history[-1] < history[0]
    for prev, cur in zip(history, history[1:]):
        assert cur <= prev * 1.05


# ---------------------------------------------------------------- retrospector training

def test_retrospector_without_drift_learns_passthrough():
    stream = tiny_stream(samples=100)
    model = tiny_model()
    trainer = Trainer(StrategyConfig("rfe"), TrainConfig(epochs=2, aux_epochs=2, retro_epochs=60, retro_lr=1e-2))
    learn_task(model, stream[1], trainer)
    model.add_task(stream[2].classes)
    retro = model.new_retrospector(model.pending_aux.pop(2))
    x = stream[2].x_train
    f = features(model.extractor, x)
    initial = ops.mse_sum(retro.rectify(Tensor(f), Tensor(x)), Tensor(f)).item()
    train_retrospector(model, retro, stream[2], trainer)
    final = ops.mse_sum(retro.rectify(Tensor(f), Tensor(x)), Tensor(f)).item()
    assert final < 0.01 * initial


@pytest.mark.parametrize("kind,capacity,extra", [("rfe", 0, 0), ("rfe_p", 8, 8)])
def test_retrospector_training_set(monkeypatch, kind, capacity, extra):
    stream = tiny_stream()
    trainer = tiny_trainer(kind, capacity, epochs=1)
    model = tiny_model()
    learn_task(model, stream[1], trainer)
    sizes = []
    real = engine.features

    def spy(module, x, chunk=1024):
        sizes.append(len(x))
        return real(module, x, chunk)

    monkeypatch.setattr(engine, "features", spy)
    model.add_task(stream[2].classes)
    model.prev_extractor = model.snapshot_extractor()
    retro = model.new_retrospector(model.pending_aux.pop(2))
    train_retrospector(model, retro, stream[2], trainer)
    n = len(stream[2].y_train)
    assert sizes[:3] == [n] * 3
    assert sizes[3:-3] == [extra] * (3 if extra else 0)
    assert sizes[-3:] == [len(stream[2].y_val)] * 3


def _task1_rmse(kind, capacity, seed):
    stream = tiny_stream(seed=seed)
    trainer = Trainer(StrategyConfig(kind, capacity, alpha=0.0),
                      TrainConfig(epochs=20, aux_epochs=20, retro_epochs=20, lr=1e-2, seed=seed))
    model = tiny_model(seed=seed)
    learn_task(model, stream[1], trainer)
    x = stream[1].x_test
    original = model.extract(Tensor(x)).data
    learn_task(model, stream[2], trainer)
    rectified = rectify_chain(model, x, 1).features[-1]
    return float(np.sqrt(np.mean((rectified - original) ** 2)))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_stored_subset_improves_rectification(seed):
    assert _task1_rmse("rfe_p", 8, seed) < _task1_rmse("rfe", 0, seed)


# ---------------------------------------------------------------- learn_task

def test_structure_after_five_tasks():
    stream = tiny_stream(n_tasks=5)
    model = train_stream(tiny_model(), stream, tiny_trainer(epochs=1))
    assert len(model.heads) == 5
    assert sorted(model.retrospectors) == [2, 3, 4, 5]
    assert all(r.frozen for r in model.retrospectors.values())


def test_sequencing_error():
    stream = tiny_stream()
    with pytest.raises(SequencingError):
        learn_task(tiny_model(), stream[2], tiny_trainer())


def test_subset_store_holds_only_latest_task():
    stream = tiny_stream(n_tasks=3)
    trainer = tiny_trainer("rfe_p", 8, epochs=1)
    model = tiny_model()
    for data in stream:
        learn_task(model, data, trainer)
        assert len(trainer.store) == 8
        assert set(trainer.store.tasks()) == {data.task}


def test_reservoir_store_spans_tasks():
    stream = tiny_stream(n_tasks=3)
    trainer = tiny_trainer("rfe_b", 30, epochs=1)
    train_stream(tiny_model(), stream, trainer)
    assert len(trainer.store) == 30
    assert trainer.store.seen == sum(len(d.y_train) for d in stream)
    assert set(trainer.store.tasks()) <= {1, 2, 3}


def test_strategy_artifacts():
    stream = tiny_stream(n_tasks=2)
    for kind, cap, store in (("rfe", 0, None), ("rfe_p", 4, "subset_prev_task"), ("rfe_b", 4, "reservoir_all_tasks")):
        trainer = tiny_trainer(kind, cap, epochs=1)
        model = train_stream(tiny_model(), stream, trainer)
        assert model.prev_extractor is not None
        assert (trainer.store.policy if trainer.store else None) == store
    trainer = tiny_trainer("finetune", epochs=1)
    model = train_stream(tiny_model(), stream, trainer)
    assert trainer.store is None and not model.retrospectors and not model.pending_aux


def test_learn_task_is_deterministic():
    stream = tiny_stream(n_tasks=3)
    runs = [train_stream(tiny_model(seed=4), stream, tiny_trainer("rfe_b", 10, epochs=2, seed=4))
            for _ in range(2)]
    assert _same(*(_params(m) for m in runs))


def test_end_to_end_variant():
    stream = tiny_stream(n_tasks=3)
    model = train_stream(tiny_model(), stream, tiny_trainer(epochs=2, end_to_end=True))
    assert sorted(model.retrospectors) == [2, 3]
    assert not model.pending_aux
    assert all(r.frozen for r in model.retrospectors.values())


# ---------------------------------------------------------------- freezing

@pytest.mark.parametrize("kind,capacity", [("rfe", 0), ("rfe_b", 20)])
def test_frozen_parts_stay_bit_identical(kind, capacity):
    stream = tiny_stream(n_tasks=3)
    trainer = tiny_trainer(kind, capacity, epochs=2)
    model = tiny_model()
    learn_task(model, stream[1], trainer)
    learn_task(model, stream[2], trainer)
    before = _params(model)
    prev = {k: p.data.copy() for k, p in model.prev_extractor.named_parameters()}
    aux3 = {k: p.data.copy() for k, p in model.pending_aux[3].named_parameters()}
    learn_task(model, stream[3], trainer)
    after = _params(model)
    head1 = [k for k in before if k.startswith(("w.task1.", "w.task2.", "r.task2.aux."))]
    assert head1 and all(np.array_equal(before[k], after[k]) for k in head1)
    assert _same(aux3, {k[len("r.task3.aux."):]: v for k, v in after.items() if k.startswith("r.task3.aux.")})
    r2 = [k for k in before if k.startswith("r.task2.")]
    if kind == "rfe":
        assert all(np.array_equal(before[k], after[k]) for k in r2)
    # the snapshot taken before task 3 was never touched by an optimizer
    assert model.prev_extractor is not None
    assert all(not p.requires_grad for _, p in model.prev_extractor.named_parameters())
    assert not _same(prev, {k: p.data for k, p in model.prev_extractor.named_parameters()})  # replaced after task 3


def test_previous_snapshot_unchanged_during_main_training(monkeypatch):
    stream = tiny_stream()
    trainer = tiny_trainer(epochs=2)
    model = tiny_model()
    learn_task(model, stream[1], trainer)
    snap = model.prev_extractor
    frozen = {k: p.data.copy() for k, p in snap.named_parameters()}
    real = engine.distill_aux

    def check(*args, **kwargs):
        assert _same(frozen, {k: p.data for k, p in snap.named_parameters()})
        return real(*args, **kwargs)

    monkeypatch.setattr(engine, "distill_aux", check)
    learn_task(model, stream[2], trainer)


# ---------------------------------------------------------------- reservoir

def _stream_into(store, n, rng, task_of=lambda i: 1):
    for i in range(1, n + 1):
        reservoir_insert(store, Exemplar(np.array([i]), task_of(i), i), i, rng)
    return store


def test_reservoir_fill_phase():
    store = _stream_into(ExemplarStore(5), 5, np.random.default_rng(0))
    assert [int(e.x[0]) for e in store.entries] == [1, 2, 3, 4, 5]


def test_reservoir_zero_capacity():
    store = _stream_into(ExemplarStore(0), 20, np.random.default_rng(0))
    assert len(store) == 0 and store.seen == 20


def test_reservoir_capacity_one_is_uniform():
    counts = np.zeros(4)
    for seed in range(10_000):
        store = _stream_into(ExemplarStore(1), 4, np.random.default_rng(seed))
        counts[int(store.entries[0].x[0]) - 1] += 1
    assert stats.chisquare(counts).pvalue > 0.01


def test_reservoir_task_composition():
    per_task = np.zeros(3)
    for seed in range(200):
        store = _stream_into(ExemplarStore(30), 300, np.random.default_rng(seed), lambda i: (i - 1) // 100 + 1)
        assert len(store) == 30
        per_task += np.bincount(store.tasks(), minlength=4)[1:]
    mean = per_task / 200
    # per-run variance of one task's share: 30 * (1/3) * (2/3) * (270 / 299)
    tol = 4 * np.sqrt(30 * (1 / 3) * (2 / 3) * (270 / 299) / 200)
    assert np.all(np.abs(mean - 10) < tol)


# ---------------------------------------------------------------- configs, schedule, divergence

def test_strategy_config_validation():
    with pytest.raises(ConfigError):
        StrategyConfig("rfe", capacity=5)
    with pytest.raises(ConfigError):
        StrategyConfig("rfe_b", alpha=-1)
    with pytest.raises(ConfigError):
        StrategyConfig("der")
    assert StrategyConfig("RFE-B", 4).kind == "rfe_b"
    assert StrategyConfig().alpha == 1.0
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)


def test_plateau_schedule_decays_after_patience():
    opt = Adam({"w": Tensor(np.zeros(1), requires_grad=True)}, lr=1.0)
    sched = PlateauSchedule([opt], patience=3, factor=0.1)
    for v in (1.0, 1.0, 1.0):
        sched.step(v)
    assert opt.lr == 1.0
    sched.step(1.0)
    assert opt.lr == pytest.approx(0.1)
    sched.step(0.5)
    assert opt.lr == pytest.approx(0.1)


def test_divergence_names_epoch():
    stream = tiny_stream()
    bad = dataclasses.replace(stream[1], x_train=np.full_like(stream[1].x_train, np.nan))
    with pytest.raises(DivergenceError, match="epoch 1"):
        learn_task(tiny_model(), bad, tiny_trainer())


def test_loss_records_cover_every_stage():
    stream = tiny_stream()
    seen = []
    trainer = tiny_trainer(epochs=2)
    trainer.on_record = seen.append
    train_stream(tiny_model(), stream, trainer)
    stages = [(r.task, r.stage, r.epoch) for r in seen]
    assert stages == [(1, "main", 1), (1, "main", 2), (1, "distill", 1), (1, "distill", 2),
                      (2, "main", 1), (2, "main", 2), (2, "distill", 1), (2, "distill", 2),
                      (2, "retrospector", 1), (2, "retrospector", 2)]
    assert trainer.log == seen
