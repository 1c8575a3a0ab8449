import dataclasses
import math
import statistics

import numpy as np
import pytest
import torch

from causalfsfg.backbone import BackboneConfig
from causalfsfg.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from causalfsfg.config import TrainConfig
from causalfsfg.data import SyntheticSpec, generate_synthetic_dataset, sample_episode, split_classes
from causalfsfg.imfr import class_prototypes
from causalfsfg.metric import episode_accuracy
from causalfsfg.model import ModelConfig, build_model
from causalfsfg import training
from causalfsfg.training import (NumericalError, evaluate, lr_schedule, run_ablation, sgd_step,
                                 summarize_accuracies, train)

TINY_BB = BackboneConfig(channels=(4, 8, 8, 8), input_size=16)


def tiny_config(**kw):
    model = kw.pop("model", ModelConfig(backbone=TINY_BB, gamma=8, top_k=1))
    base = dict(epochs=2, episodes_per_epoch=3, n_train=3, k_train=1, u_train=2, n_test=3,
                k_test=1, u_test=2, eval_episodes=4, lr=0.001, decay_epoch=1, val_every=1,
                val_episodes=2, model=model)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_data():
    ds = generate_synthetic_dataset(SyntheticSpec(n_classes=9, samples_per_class=4,
                                                  image_size=16, seed=1))
    return ds, split_classes(ds.classes, (3, 3, 3), 0)


# -- schedule and optimizer --------------------------------------------------


def test_lr_schedule_boundaries():
    cfg = TrainConfig(epochs=800, decay_epoch=400)
    assert lr_schedule(0, cfg) == 0.1
    assert lr_schedule(399, cfg) == 0.1
    assert abs(lr_schedule(400, cfg) - 0.005) < 1e-15
    flat = TrainConfig(epochs=10, decay_epoch=10)
    assert {lr_schedule(e, flat) for e in range(10)} == {0.1}
    rates = [lr_schedule(e, TrainConfig(epochs=50, decay_epoch=7)) for e in range(50)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))


def test_sgd_fixed_point_and_hand_value():
    p, v = [torch.tensor([2.0])], [torch.zeros(1)]
    sgd_step(p, [torch.zeros(1)], v, 0.1, 0.9, 0.0)
    assert p[0].item() == 2.0 and v[0].item() == 0.0
    p = [torch.tensor([1.0], dtype=torch.float64)]
    v = [torch.zeros(1, dtype=torch.float64)]
    sgd_step(p, [torch.ones(1, dtype=torch.float64)], v, 0.1, 0.9, 0.0)
    assert v[0].item() == 1.0 and abs(p[0].item() - 0.81) < 1e-15


def test_sgd_quadratic_scalar_oracle():
    # f(x) = 1.5 x^2, grad 3x, two steps with weight decay
    lr, mu, wd = 0.05, 0.9, 3e-4
    x, vel = 2.0, 0.0
    p, v = [torch.tensor([2.0], dtype=torch.float64)], [torch.zeros(1, dtype=torch.float64)]
    for _ in range(2):
        g = 3 * x + wd * x
        vel = mu * vel + g
        x = x - lr * (g + mu * vel)
        sgd_step(p, [3 * p[0].clone()], v, lr, mu, wd)
    assert abs(p[0].item() - x) < 1e-12


def test_sgd_matches_torch_nesterov():
    torch.manual_seed(0)
    w = torch.randn(5, dtype=torch.float64)
    ref = w.clone().requires_grad_(True)
    opt = torch.optim.SGD([ref], lr=0.1, momentum=0.9, nesterov=True, weight_decay=3e-4)
    p, v = [w.clone()], [torch.zeros(5, dtype=torch.float64)]
    for _ in range(5):
        opt.zero_grad()
        (ref ** 3).sum().backward()
        opt.step()
        sgd_step(p, [3 * p[0] ** 2], v, 0.1, 0.9, 3e-4)
    assert torch.allclose(p[0], ref.detach(), atol=1e-12)


def test_sgd_shape_mismatch():
    with pytest.raises(ValueError):
        sgd_step([torch.zeros(2)], [torch.zeros(3)], [torch.zeros(2)], 0.1)


# -- evaluation statistics ---------------------------------------------------


def test_ci_single_episode():
    rep = summarize_accuracies([0.6])
    assert rep.mean_accuracy == pytest.approx(60.0) and rep.ci95_halfwidth == 0.0


def test_ci_statistics_oracle():
    rng = np.random.default_rng(0)
    acc = rng.integers(0, 76, 10000) / 75
    rep = summarize_accuracies(acc)
    pct = [100 * a for a in acc.tolist()]
    mean = math.fsum(pct) / len(pct)
    sd = math.sqrt(math.fsum((x - mean) ** 2 for x in pct) / (len(pct) - 1))
    assert abs(rep.mean_accuracy - mean) < 1e-10
    assert abs(rep.ci95_halfwidth - 1.96 * sd / 100) < 1e-10
    assert abs(sd - statistics.stdev(pct)) < 1e-9


def test_constant_prediction_chance_level(tiny_data):
    ds, split = tiny_data
    model = build_model(ModelConfig(backbone=TINY_BB, use_imse=False, use_imfr=False))
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    small = evaluate(model, ds, split.test, 10, 3, 1, 3, seed=0)
    assert small.mean_accuracy == pytest.approx(100 / 3)


def test_chance_ci_shrinks():
    rng = np.random.default_rng(1)
    widths = [summarize_accuracies(rng.binomial(15, 0.2, n) / 15).ci95_halfwidth
              for n in (100, 1000, 10000)]
    assert widths[0] > widths[1] > widths[2]


def test_evaluate_order_invariant(tiny_data):
    ds, split = tiny_data
    model = build_model(ModelConfig(backbone=TINY_BB, gamma=8, top_k=1), seed=2)
    a = evaluate(model, ds, split.test, 6, 3, 1, 2, seed=5)
    b = evaluate(model, ds, split.test, 6, 3, 1, 2, seed=5, order=[5, 2, 0, 4, 1, 3])
    assert np.array_equal(a.accuracies, b.accuracies)
    assert 0 <= a.mean_accuracy <= 100 and a.ci95_halfwidth >= 0


# -- model-level properties --------------------------------------------------


def test_baseline_is_prototype_euclidean(tiny_data):
    ds, split = tiny_data
    model = build_model(ModelConfig(backbone=TINY_BB, use_imse=False, use_imfr=False),
                        dtype=torch.float64).eval()
    ep = sample_episode(ds, split.train, 3, 2, 2, np.random.default_rng(0))
    out = model.run_episode(ep)
    with torch.no_grad():
        s = model.backbone(ep.support.double())[-1].flatten(1)
        q = model.backbone(ep.query.double())[-1].flatten(1)
    protos = torch.stack([s[ep.support_labels == n].mean(0) for n in range(3)])
    ref = torch.cdist(q, protos)
    assert torch.allclose(out.distances.detach(), ref, atol=1e-10)
    assert torch.allclose(protos, class_prototypes(s, ep.support_labels, 3).flatten(1))


def test_chunked_features_match_in_eval_mode(tiny_data):
    ds, split = tiny_data
    cfg = ModelConfig(backbone=TINY_BB, gamma=8, top_k=1)
    ep = sample_episode(ds, split.train, 3, 2, 2, np.random.default_rng(4))
    grads, dists = [], []
    for chunk in (0, 4):
        model = build_model(dataclasses.replace(cfg, feature_chunk=chunk),
                            dtype=torch.float64).eval()
        out = model.run_episode(ep)
        training.episode_loss(out.probs, ep.query_labels).backward()
        dists.append(out.distances.detach())
        grads.append(torch.cat([p.grad.flatten() for p in model.parameters()
                                if p.grad is not None]))
    assert torch.allclose(dists[0], dists[1], atol=1e-12)
    assert torch.allclose(grads[0], grads[1], atol=1e-10)


def test_chunked_training_step_runs(tiny_data):
    ds, split = tiny_data
    model = ModelConfig(backbone=TINY_BB, gamma=8, top_k=1, feature_chunk=3)
    res = train(tiny_config(model=model, epochs=1, decay_epoch=1), ds, split)
    assert all(np.isfinite(r["loss"]) for r in res.log)


@pytest.mark.parametrize("flags", [(False, False), (True, True)])
def test_class_relabeling_invariance(tiny_data, flags):
    ds, split = tiny_data
    cfg = ModelConfig(backbone=TINY_BB, gamma=8, top_k=1, use_imse=flags[0], use_imfr=flags[1])
    model = build_model(cfg, dtype=torch.float64).eval()
    ep = sample_episode(ds, split.train, 3, 1, 2, np.random.default_rng(3))
    perm = torch.tensor([2, 0, 1])  # slot n becomes perm[n]
    inv = torch.argsort(perm)
    support = ep.support[inv]
    with torch.no_grad():
        a = model(ep.support.double(), ep.support_labels, ep.query.double(), 3)
        b = model(support.double(), ep.support_labels, ep.query.double(), 3)
    assert torch.allclose(b.probs[:, perm], a.probs, atol=1e-12)
    assert episode_accuracy(b.probs, perm[ep.query_labels]) == \
        episode_accuracy(a.probs, ep.query_labels)


# -- training ----------------------------------------------------------------


def test_train_deterministic(tiny_data, tmp_path):
    ds, split = tiny_data
    cfg = tiny_config()
    r1 = train(cfg, ds, split, tmp_path / "a")
    r2 = train(cfg, ds, split, tmp_path / "b")
    assert all(np.array_equal(x, y) for x, y in zip(r1.episode_indices, r2.episode_indices))
    l1 = np.array([r["loss"] for r in r1.log])
    l2 = np.array([r["loss"] for r in r2.log])
    assert np.allclose(l1, l2, rtol=1e-6, atol=0)
    lines = (tmp_path / "a" / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 6 + 2  # episodes plus one validation record per epoch
    assert r1.best_epoch in (0, 1)


def test_train_changes_parameters(tiny_data):
    ds, split = tiny_data
    cfg = tiny_config(epochs=1, decay_epoch=1)
    init = build_model(cfg.model, seed=cfg.seed)
    trained = train(cfg, ds, split).model
    changed = [not torch.equal(a, b) for a, b in zip(init.parameters(), trained.parameters())]
    assert sum(changed) > len(changed) // 2


def test_non_finite_loss_dumps_episode(tiny_data, tmp_path, monkeypatch):
    ds, split = tiny_data
    monkeypatch.setattr(training, "episode_loss", lambda p, y: torch.tensor(float("nan")))
    with pytest.raises(NumericalError):
        train(tiny_config(), ds, split, tmp_path)
    assert (tmp_path / "nonfinite_episode.json").exists()


def test_config_validation_rejects_bad_decay():
    with pytest.raises(ValueError):
        TrainConfig(epochs=5, decay_epoch=6).validate()
    full = TrainConfig(epochs=800, decay_epoch=400, n_train=30, k_train=5)
    full.validate()


def test_ablation_rows_and_rerun(tiny_data):
    ds, split = tiny_data
    cfg = tiny_config(epochs=1, decay_epoch=1, episodes_per_epoch=2, eval_episodes=3)
    rows = run_ablation(cfg, ds, split)
    assert [(r["use_imse"], r["use_imfr"]) for r in rows] == \
        [(False, False), (True, False), (False, True), (True, True)]
    assert rows[-1]["config"]["model"]["use_imse"] and rows[-1]["config"]["model"]["use_imfr"]
    again = run_ablation(cfg, ds, split)
    assert [r["report"].mean_accuracy for r in rows] == [r["report"].mean_accuracy for r in again]


# -- checkpoints -------------------------------------------------------------


def test_checkpoint_round_trip(tiny_data, tmp_path):
    ds, split = tiny_data
    cfg = tiny_config(epochs=1, decay_epoch=1)
    res = train(cfg, ds, split)
    path = tmp_path / "ck.npz"
    save_checkpoint(path, res.model, cfg, res.velocity, extra={"note": 1})
    model, stored, velocity, meta = load_checkpoint(path, cfg)
    for (n, a), b in zip(res.model.state_dict().items(), model.state_dict().values()):
        assert torch.equal(a, b), n
    assert all(torch.equal(a, b) for a, b in zip(res.velocity, velocity))
    assert stored == cfg and meta["extra"] == {"note": 1}
    e1 = evaluate(res.model, ds, split.test, 3, 3, 1, 2, seed=0)
    e2 = evaluate(model, ds, split.test, 3, 3, 1, 2, seed=0)
    assert e1.mean_accuracy == e2.mean_accuracy


def test_checkpoint_incompatible_config(tiny_data, tmp_path):
    cfg = tiny_config()
    model = build_model(cfg.model)
    save_checkpoint(tmp_path / "ck.npz", model, cfg)
    other = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, gamma=4))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ck.npz", other)


def test_calibrated_projections(tiny_data):
    ds, split = tiny_data
    cfg = ModelConfig(backbone=TINY_BB, gamma=8, top_k=1, proj_init="calibrated")
    model = build_model(cfg).train()
    images = torch.from_numpy(ds.images[:6].copy())
    before = [b.clone() for b in model.buffers()]
    rms = training.calibrate_projections(model, images)
    assert all(torch.equal(a, b) for a, b in zip(before, model.buffers()))
    with torch.no_grad():
        feats, _ = model.features(images)
    assert rms == pytest.approx(feats.pow(2).mean().sqrt().item(), rel=1e-6)
    w = model.imfr.reconstructor.w_q.weight
    assert torch.allclose(w, torch.eye(8) / rms)
    baseline = build_model(dataclasses.replace(cfg, use_imfr=False))
    assert training.calibrate_projections(baseline, images) == 1.0
