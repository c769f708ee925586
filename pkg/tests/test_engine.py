import dataclasses
import warnings

import numpy as np
import pytest

from dpcn.autograd import Tensor
from dpcn.checkpoint import load_checkpoint, save_checkpoint
from dpcn.engine import (DPCN, DpcnConfig, PhaseError, Trainer, TrainingDiverged, accuracy,
                         divergence_probe, ensemble_predict, evaluate, net_probabilities, predict,
                         run_phase1, train_single)
from dpcn.layers import Module
from dpcn.models import build_extra_classifier, build_small_nin
from dpcn.optim import SGD
from dpcn import functional as F


def tiny_cfg(**kw):
    base = dict(channels=(4, 8, 8), disc_channels=(4, 8), phase_epochs=(1, 1, 1), batch_size=16,
                lr=0.05, seed=3)
    base.update(kw)
    return DpcnConfig(**base)


def snapshot(module: Module):
    return {k: v.copy() for k, v in module.state_dict().items()}


def same(a, b):
    return a.keys() == b.keys() and all(a[k].tobytes() == b[k].tobytes() for k in a)


def build(cfg, train):
    return DPCN.build(cfg, train.class_count, train.image_shape)


# ----------------------------------------------------------------- config

def test_config_validation():
    with pytest.raises(ValueError):
        DpcnConfig(lam=-1)
    with pytest.raises(ValueError):
        DpcnConfig(n_subnets=1)
    with pytest.raises(ValueError):
        DpcnConfig(n_subnets=4)                       # no default targets
    DpcnConfig(n_subnets=4, targets=(1, 0, 0.5, 0.25))
    with pytest.raises(ValueError):
        DpcnConfig(fusion="max")
    with pytest.raises(ValueError):
        DpcnConfig(phase_epochs=(1, 2))
    with pytest.raises(ValueError):
        DpcnConfig(seeds=(1, 2, 3))
    assert len(set(DpcnConfig(seed=4).subnet_seeds())) == 2


def test_build_widths(tiny_splits):
    train, _ = tiny_splits
    model = build(tiny_cfg(), train)
    assert model.extra.in_channels == 2 * train.class_count
    model = build(tiny_cfg(fusion="sum"), train)
    assert model.extra.in_channels == train.class_count
    model = build(tiny_cfg(n_subnets=3), train)
    assert model.extra.in_channels == 3 * train.class_count
    assert model.disc.final_sigmoid
    assert not build(tiny_cfg(backbone="resnet", channels=(4, 4, 8), depth_blocks=1),
                     train).disc.final_sigmoid


# ------------------------------------------------------------------ phase 1

def test_phase1_freezes_discriminator_and_diverges_nets(tiny_splits):
    train, _ = tiny_splits
    model = build(tiny_cfg(), train)
    d0 = snapshot(model.disc)
    before = [snapshot(n) for n in model.nets]
    Trainer(model, train).run_phase1()
    assert same(d0, snapshot(model.disc))
    assert all(p.requires_grad for p in model.disc.parameters())   # restored afterwards
    assert not same(before[0], snapshot(model.nets[0]))
    a, b = (np.concatenate([p.data.ravel() for p in n.parameters()]) for n in model.nets)
    assert np.abs(a - b).max() > 0


def test_phase1_identical_seeds_without_lambda_stay_identical(tiny_splits):
    train, _ = tiny_splits
    model = build(tiny_cfg(lam=0.0, seeds=(7, 7), phase_epochs=(2, 1, 1)), train)
    run_phase1(model.nets, model.disc, train, model.config, model.extra)
    assert same(snapshot(model.nets[0]), snapshot(model.nets[1]))


def test_phase1_identical_seeds_with_lambda_diverge(tiny_splits):
    train, _ = tiny_splits
    model = build(tiny_cfg(lam=1.0, seeds=(7, 7)), train)
    run_phase1(model.nets, model.disc, train, model.config, model.extra)
    assert not same(snapshot(model.nets[0]), snapshot(model.nets[1]))


def test_phase1_zero_epochs_warns(tiny_splits):
    train, _ = tiny_splits
    trainer = Trainer(build(tiny_cfg(phase_epochs=(0, 1, 1)), train), train)
    with pytest.warns(UserWarning):
        trainer.run_phase1()
    assert trainer.phases_done == 1


def test_phases_must_run_in_order(tiny_splits):
    train, _ = tiny_splits
    trainer = Trainer(build(tiny_cfg(), train), train)
    with pytest.raises(PhaseError):
        trainer.run_phase2()
    with pytest.raises(PhaseError):
        trainer.run_phase3()


# ------------------------------------------------------------------ phase 2

def test_phase2_update_routing(tiny_splits):
    train, _ = tiny_splits
    model = build(tiny_cfg(), train)
    trainer = Trainer(model, train)
    trainer.run_phase1()
    subnet_params = [p for n in model.nets for p in n.parameters()]
    disc_params = model.disc.parameters()
    log = []

    def wrap(opt, name):
        inner = opt.step

        def step():
            before_s = [p.data.copy() for p in subnet_params]
            before_d = [p.data.copy() for p in disc_params]
            grads_elsewhere = [p.grad for p in (subnet_params if name == "disc" else disc_params)]
            inner()
            moved_s = any(not np.array_equal(a, p.data) for a, p in zip(before_s, subnet_params))
            moved_d = any(not np.array_equal(a, p.data) for a, p in zip(before_d, disc_params))
            log.append((name, moved_s, moved_d, all(g is None for g in grads_elsewhere)))
            for q in opt.params:
                q.grad = None        # so a later stray gradient is attributable
        opt.step = step

    wrap(trainer.disc_opt, "disc")
    wrap(trainer.subnet_opt, "subnet")
    for q in subnet_params + disc_params:
        q.grad = None
    trainer.run_phase2()
    assert log and [e[0] for e in log[:2]] == ["disc", "subnet"]
    for name, moved_s, moved_d, isolated in log:
        assert isolated, name
        assert (moved_s, moved_d) == ((False, True) if name == "disc" else (True, False))


def test_phase2_lambda_zero_equals_independent_training(tiny_splits):
    train, _ = tiny_splits
    one_batch = train.subset(np.arange(16))
    cfg = tiny_cfg(lam=0.0, phase_epochs=(0, 1, 1))
    model = build(cfg, one_batch)
    refs = [build_small_nin(one_batch.class_count, seed=s, channels=cfg.channels)
            for s in cfg.subnet_seeds()]
    trainer = Trainer(model, one_batch)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        trainer.run_phase1()
    trainer.run_phase2()
    for ref, net in zip(refs, model.nets):
        train_single(ref, one_batch, cfg, 1, rng_seed=cfg.seed)
        assert same(snapshot(ref), snapshot(net))


def test_phase2_discriminator_learns(tiny_splits):
    train, _ = tiny_splits
    model = build(tiny_cfg(phase_epochs=(1, 3, 1)), train)
    trainer = Trainer(model, train)
    trainer.run(2)
    l_d = [r["l_D"] for r in trainer.records if r["phase"] == "step2"]
    assert all(np.isfinite(l_d)) and l_d[-1] < l_d[0]


def test_non_finite_loss_aborts_with_snapshot(tiny_splits):
    train, _ = tiny_splits
    bad = dataclasses.replace(train, images=train.images.copy())
    bad.images[:] = np.nan
    trainer = Trainer(build(tiny_cfg(), bad), bad)
    with pytest.raises(TrainingDiverged) as info:
        trainer.run_phase1()
    assert info.value.snapshot["phase"] == "step1" and "ce" in info.value.snapshot


# ------------------------------------------------------------------ phase 3

def test_phase3_freezes_extractors_and_statistics(tiny_splits):
    train, _ = tiny_splits
    model = build(tiny_cfg(phase_epochs=(1, 1, 2)), train)
    trainer = Trainer(model, train)
    trainer.run(2)
    nets0 = [snapshot(n) for n in model.nets]
    d0 = snapshot(model.disc)
    e0 = snapshot(model.extra)
    for n in model.nets:
        n.reset_calls()
    model.disc.reset_calls()
    trainer.run_phase3()
    assert all(same(a, snapshot(n)) for a, n in zip(nets0, model.nets))
    assert same(d0, snapshot(model.disc)) and model.disc.total_calls() == 0
    assert all(n.classifier.total_calls() == 0 for n in model.nets)
    assert not same(e0, snapshot(model.extra))


def test_extra_classifier_loss_decreases_on_separable_features():
    rng = np.random.default_rng(0)
    n, c, k = 120, 6, 3
    labels = rng.integers(0, k, n)
    feats = rng.normal(0, 0.3, size=(n, c, 2, 2))
    feats[np.arange(n), labels] += 2.0            # class k lights up channel k
    template = build_small_nin(k, channels=(4, 4, 4)).classifier
    extra = build_extra_classifier(template, c, k, dtype=np.float64)
    opt = SGD(extra.parameters(), lr=0.1, momentum=0.9, weight_decay=0.0)
    losses = []
    for epoch in range(6):
        total = 0.0
        for lo in range(0, n, 20):
            loss = F.softmax_cross_entropy(extra(Tensor(feats[lo:lo + 20])), labels[lo:lo + 20])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
        losses.append(total)
    assert all(b < a for a, b in zip(losses, losses[1:]))


# ---------------------------------------------------------------- inference

@pytest.fixture(scope="module")
def trained(tiny_splits):
    train, test = tiny_splits
    model = build(tiny_cfg(phase_epochs=(1, 2, 2)), train)
    trainer = Trainer(model, train, test)
    trainer.run()
    return trainer


def test_inference_path_purity(trained, tiny_splits):
    model = trained.model
    _, test = tiny_splits
    for m in (*model.nets, model.disc, model.extra):
        m.reset_calls()
    predict(model, test.images[:5])
    assert model.disc.total_calls() == 0
    assert all(n.classifier.total_calls() == 0 for n in model.nets)
    assert all(n.extractor.total_calls() > 0 for n in model.nets) and model.extra.calls > 0


def test_predict_properties(trained, tiny_splits):
    _, test = tiny_splits
    x = test.images[:8]
    p = predict(trained.model, x)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    assert p.tobytes() == predict(trained.model, x).tobytes()
    np.testing.assert_allclose(predict(trained.model, x[3:4]), p[3:4], atol=1e-5)


def test_metric_records(trained):
    phases = [r["phase"] for r in trained.records]
    assert phases == ["step1", "step2", "step2", "step3", "step3"]
    step2 = trained.records[1]
    assert len(step2["ce"]) == 2 and len(step2["disc"]) == 2 and step2["l_D"] >= 0
    assert set(step2["acc"]) == {"subnet0", "subnet1"}
    assert "extra" in trained.records[-1]["acc"]


def test_ensemble_helpers(trained, tiny_splits):
    _, test = tiny_splits
    net = trained.model.nets[0]
    single = net_probabilities(net, test.images)
    np.testing.assert_array_equal(ensemble_predict([net, net], test.images), single)
    # averaged probabilities: 0.9 and 0.7 for class A average to 0.8
    np.testing.assert_allclose(np.mean([[0.9, 0.1], [0.7, 0.3]], axis=0), [0.8, 0.2])
    accs = [accuracy(net_probabilities(n, test.images), test.labels) for n in trained.model.nets]
    ens = accuracy(ensemble_predict(trained.model.nets, test.images), test.labels)
    assert ens >= min(accs)


def test_evaluate_reports_every_head(trained, tiny_splits):
    _, test = tiny_splits
    acc = evaluate(trained.model, test)
    assert set(acc) == {"subnet0", "subnet1", "extra"}
    assert acc["extra"] == accuracy(predict(trained.model, test.images), test.labels)


# ------------------------------------------------------------------ probe

def test_probe_identical_extractors_is_chance(tiny_splits):
    train, _ = tiny_splits
    net = build_small_nin(train.class_count, seed=1, channels=(4, 8, 8))
    assert abs(divergence_probe([net, net], train) - 0.5) <= 0.05


def test_probe_shifted_extractor_is_separable(tiny_splits):
    train, _ = tiny_splits
    a = build_small_nin(train.class_count, seed=1, channels=(4, 8, 8))
    b = build_small_nin(train.class_count, seed=1, channels=(4, 8, 8))
    b.extractor[2][2].bias.data += 50.0      # tap = last conv output, shifted by a constant
    assert divergence_probe([a, b], train) >= 0.95


# ------------------------------------------------------ determinism, resume

def test_identical_runs_give_identical_records(tiny_splits):
    train, test = tiny_splits
    runs = []
    for _ in range(2):
        trainer = Trainer(build(tiny_cfg(), train), train, test)
        trainer.run()
        runs.append(trainer.records)
    assert runs[0] == runs[1]


@pytest.mark.parametrize("boundary", [1, 2])
def test_resume_at_phase_boundary_is_bit_exact(tiny_splits, tmp_path, boundary):
    train, test = tiny_splits
    cfg = tiny_cfg(phase_epochs=(1, 2, 1))
    full = Trainer(build(cfg, train), train, test)
    full.run()

    first = Trainer(build(cfg, train), train, test)
    first.run(boundary)
    path = tmp_path / "boundary.ckpt"
    save_checkpoint(path, first.state_arrays(), first.state_meta())
    ckpt = load_checkpoint(path)

    resumed = Trainer(build(dataclasses.replace(cfg, seed=cfg.seed), train), train, test)
    resumed.load_state(ckpt.arrays, ckpt.meta)
    resumed.run()
    assert resumed.records == full.records
    assert same(resumed.model.state_dict(), full.model.state_dict())


def test_three_subnets_and_sum_fusion_train(tiny_splits):
    train, test = tiny_splits
    for cfg in (tiny_cfg(n_subnets=3), tiny_cfg(fusion="sum"),
                tiny_cfg(backbone="resnet", channels=(4, 4, 8), depth_blocks=1)):
        trainer = Trainer(build(cfg, train), train)
        trainer.run()
        p = predict(trainer.model, test.images[:4])
        assert p.shape == (4, train.class_count) and np.all(np.isfinite(p))
