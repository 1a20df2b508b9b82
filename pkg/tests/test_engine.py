import math

import numpy as np
import pytest
import torch

from robustevo import engine
from robustevo.data import synth_dataset
from robustevo.engine import OptimizerConfig, TrainConfig
from robustevo.genome import decode_genome, seed_genome
from robustevo.netbuilder import LayerDescriptor, NetworkPlan, build


def small_plan(act="swish", bn="mid"):
    conv = LayerDescriptor("convblock", [("layer", "convblock"), ("act-pos", "postconv"), ("act", act), ("bn", bn),
                                         ("num-filters", 4), ("filter-shape", "3"), ("stride", "1"),
                                         ("padding", "same"), ("bias", "True")], [-1])
    head = LayerDescriptor("softmax", [("layer", "fc"), ("act", "softmax"), ("num-units", "10"), ("bias", "True")],
                           [0, -1])
    return NetworkPlan([conv, head], (4, 4, 3))


@pytest.fixture(scope="module")
def tiny_data():
    ds = synth_dataset(20, 3, 4, seed=1)
    return ds.subset(np.arange(48)), ds.subset(np.arange(48, 60))


# -- gradients ---------------------------------------------------------------------------

@pytest.mark.parametrize("train_mode", [False, True])
def test_input_gradient_matches_finite_differences(train_mode):
    net = build(small_plan(), 3, seed=0, dtype=torch.float64)
    if not train_mode:
        net.train()
        net(torch.rand(16, 3, 4, 4, dtype=torch.float64))  # non-trivial running statistics
    x = torch.rand(5, 3, 4, 4, dtype=torch.float64, requires_grad=True)
    y = torch.tensor([0, 1, 2, 0, 1])

    def loss(inp):
        return engine.loss_ce(engine.forward(net, inp, train_mode), y)

    assert torch.autograd.gradcheck(loss, (x,), eps=1e-6, atol=1e-6)


def test_parameter_gradients_match_finite_differences():
    net = build(small_plan(act="sigmoid"), 3, seed=1, dtype=torch.float64)
    x = torch.rand(6, 3, 4, 4, dtype=torch.float64)
    y = torch.tensor([0, 1, 2, 2, 1, 0])
    grads, _ = engine.backward(net, x, y, train=True)
    h = 1e-6
    for name, p in net.named_parameters():
        flat = p.data.view(-1)
        for j in range(0, flat.numel(), max(1, flat.numel() // 4)):
            orig = flat[j].item()
            with torch.no_grad():
                flat[j] = orig + h
                up = engine.loss_ce(engine.forward(net, x, True), y).item()
                flat[j] = orig - h
                down = engine.loss_ce(engine.forward(net, x, True), y).item()
                flat[j] = orig
            assert grads[name].view(-1)[j].item() == pytest.approx((up - down) / (2 * h), abs=1e-6)


def test_backward_input_gradient_shape():
    net = build(small_plan(), 3, dtype=torch.float64)
    x = torch.rand(2, 3, 4, 4, dtype=torch.float64)
    grads, gx = engine.backward(net, x, torch.tensor([0, 1]))
    assert gx.shape == x.shape and set(grads) == {n for n, _ in net.named_parameters()}


# -- optimizers and schedules ------------------------------------------------------------

def test_inverse_time_decay_counts_steps():
    oc = OptimizerConfig(lr=0.1, decay=0.01)
    assert [oc.lr_at(s) for s in (0, 100, 300)] == pytest.approx([0.1, 0.05, 0.025])
    assert OptimizerConfig(lr=0.3).lr_at(10_000) == 0.3


def test_other_schedules():
    cos = OptimizerConfig(lr=1.0, schedule="cosine")
    assert cos.lr_at(0, total_steps=10) == pytest.approx(1.0)
    assert cos.lr_at(5, total_steps=10) == pytest.approx(0.5)
    assert cos.lr_at(10, total_steps=10) == pytest.approx(0.0, abs=1e-12)
    step = OptimizerConfig(lr=1.0, schedule="step", milestones=(2, 4), gamma=0.1)
    assert [step.lr_at(0, e) for e in (0, 2, 5)] == pytest.approx([1.0, 0.1, 0.01])
    with pytest.raises(ValueError):
        OptimizerConfig(schedule="linear").lr_at(0)


def test_optimizer_from_attrs():
    sgd = OptimizerConfig.from_attrs([("learning", "gradient-descent"), ("lr", 0.1), ("decay", 1e-4),
                                      ("momentum", 0.9), ("nesterov", "True")])
    assert (sgd.kind, sgd.momentum, sgd.nesterov) == ("gradient-descent", 0.9, True)
    adam = OptimizerConfig.from_attrs([("learning", "adam"), ("lr", 0.001), ("beta1", 1.0), ("beta2", 0.999)])
    opt = adam.make([torch.nn.Parameter(torch.zeros(2))])
    assert isinstance(opt, torch.optim.Adam) and opt.defaults["betas"][0] < 1
    rms = OptimizerConfig.from_attrs([("learning", "rmsprop"), ("lr", 0.001), ("rho", 0.8)])
    assert isinstance(rms.make([torch.nn.Parameter(torch.zeros(2))]), torch.optim.RMSprop)
    with pytest.raises(ValueError):
        OptimizerConfig(kind="lbfgs")
    with pytest.raises(ValueError):
        OptimizerConfig(lr=0)


# -- training loop -----------------------------------------------------------------------

def test_step_budget_is_exact(tiny_data):
    tr, co = tiny_data
    net = build(small_plan(), 3)
    rep = engine.train(net, tr, co, TrainConfig(batch_size=10, budget=7, early_stop_patience=100),
                       OptimizerConfig(lr=0.01))
    assert rep.steps == 7 and rep.stop_reason == "budget" and rep.budget_consumed == 7
    assert rep.epochs_run == 2 and len(rep.train_loss) == 2  # 5 steps per epoch, the second is cut


def test_epochs_cap(tiny_data):
    tr, co = tiny_data
    rep = engine.train(build(small_plan(), 3), tr, co,
                       TrainConfig(batch_size=16, budget=1000, epochs_cap=2, early_stop_patience=100),
                       OptimizerConfig(lr=0.01))
    assert rep.stop_reason == "epochs-cap" and rep.epochs_run == 2 and rep.steps == 6


def test_early_stopping_patience(tiny_data):
    tr, co = tiny_data
    # without BN, updates far below float32 resolution leave the control loss unchanged every epoch
    rep = engine.train(build(small_plan(bn="none"), 3), tr, co,
                       TrainConfig(batch_size=16, budget=1000, early_stop_patience=3, l2_coeff=0),
                       OptimizerConfig(lr=1e-30))
    assert rep.stop_reason == "early-stop" and rep.epochs_run == 4
    assert len(set(rep.control_loss)) == 1


def test_nonfinite_loss_is_reported_not_raised(tiny_data):
    tr, co = tiny_data
    rep = engine.train(build(small_plan(act="relu"), 3), tr, co, TrainConfig(batch_size=16, budget=200),
                       OptimizerConfig(lr=1e30))
    assert rep.nonfinite_seen and rep.stop_reason == "non-finite"


def test_training_is_deterministic(tiny_data):
    tr, co = tiny_data
    nets = []
    for _ in range(2):
        net = build(small_plan(), 3, seed=4)
        engine.train(net, tr, co, TrainConfig(batch_size=8, budget=20, augment=True, rng_seed=9),
                     OptimizerConfig(lr=0.01, momentum=0.9))
        nets.append(net)
    assert all(torch.equal(a, b) for a, b in zip(nets[0].state_dict().values(), nets[1].state_dict().values()))


def test_training_reduces_loss(synth_splits, desk_grammar):
    tr, co, _ = synth_splits
    plan = decode_genome(seed_genome("desk"), desk_grammar, (8, 8, 3))
    net = build(plan, 3, seed=0)
    rep = engine.train(net, tr, co, TrainConfig.from_attrs(plan.metadata, budget=100),
                       OptimizerConfig.from_attrs(plan.metadata))
    assert rep.train_loss[-1] < rep.train_loss[0]


def test_trained_seed_accuracy(trained_desk):
    net, fitness_set = trained_desk
    acc, mask, hist = engine.evaluate(net, fitness_set)
    assert acc > 0.9
    assert mask.shape == (len(fitness_set),) and hist.sum() == len(fitness_set) and len(hist) == 3


def test_frozen_bn_stats_restores_running_statistics():
    net = build(small_plan(), 3)
    before = {k: v.clone() for k, v in net.state_dict().items() if "running" in k}
    with engine.frozen_bn_stats(net):
        engine.forward(net, torch.rand(8, 3, 4, 4) * 5, train=True)
        changed = {k: v.clone() for k, v in net.state_dict().items() if "running" in k}
    after = {k: v for k, v in net.state_dict().items() if "running" in k}
    assert any(not torch.equal(before[k], changed[k]) for k in before)
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_zero_step_adversary_equals_standard_training(tiny_data):
    from robustevo.attacks import AttackConfig, ThreatModel

    tr, co = tiny_data
    tc = TrainConfig(batch_size=8, budget=12, rng_seed=3)
    a, b = build(small_plan(), 3, seed=2), build(small_plan(), 3, seed=2)
    engine.train(a, tr, co, tc, OptimizerConfig(lr=0.05))
    engine.adversarial_train(b, tr, co, tc, OptimizerConfig(lr=0.05), AttackConfig(kind="pgd", steps=0),
                             ThreatModel("Linf", 0.03))
    assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))


def test_l2_penalty_covers_kernels_only():
    net = build(small_plan(), 3)
    expected = sum((m.weight ** 2).sum() for m in net.modules() if isinstance(m, (torch.nn.Conv2d, torch.nn.Linear)))
    assert torch.allclose(engine.l2_penalty(net), expected)


def test_to_tensor_layout():
    arr = np.random.default_rng(0).random((2, 4, 5, 3)).astype(np.float32)
    t = engine.to_tensor(arr)
    assert t.shape == (2, 3, 4, 5) and t[1, 2, 3, 4] == arr[1, 3, 4, 2]


# -- checkpoints ---------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, trained_desk):
    net, fitness_set = trained_desk
    path = tmp_path / "net.pt"
    engine.save_checkpoint(path, net, engine.TrainReport(steps=3), genome={"k": 1})
    loaded, ck = engine.load_checkpoint(path)
    x = engine.to_tensor(fitness_set.images[:16])
    assert torch.equal(engine.predict_logits(net, x), engine.predict_logits(loaded, x))
    assert ck["report"]["steps"] == 3 and ck["genome"] == {"k": 1}
    assert not loaded.training


def test_checkpoint_corruption_detected(tmp_path):
    net = build(small_plan(), 3)
    path = tmp_path / "net.pt"
    engine.save_checkpoint(path, net)
    ck = torch.load(path, weights_only=True)
    ck["plan_hash"] = "0" * 16
    torch.save(ck, path)
    with pytest.raises(ValueError, match="hash"):
        engine.load_checkpoint(path)
    ck["version"] = 99
    torch.save(ck, path)
    with pytest.raises(ValueError, match="version"):
        engine.load_checkpoint(path)


def test_report_round_trip():
    rep = engine.TrainReport([1.0, 0.5], [0.9], 2, 10, "budget", False, 10)
    assert engine.TrainReport.from_dict(rep.to_dict()) == rep
    assert rep.history == [1.0, 0.5, 0.9]
    assert math.isfinite(sum(rep.history))


def test_epsilon_ramp_grows_attack_radius(tiny_data):
    from robustevo import attacks
    from robustevo.attacks import AttackConfig, ThreatModel

    seen = []
    real_pgd = attacks.pgd

    def spy(model, x, y, tm, cfg, **kw):
        seen.append((tm.epsilon, cfg.step_size))
        return real_pgd(model, x, y, tm, cfg, **kw)

    attacks.pgd = spy
    try:
        tr, co = tiny_data
        engine.adversarial_train(build(small_plan(), 3), tr, co, TrainConfig(batch_size=8, budget=6),
                                 OptimizerConfig(lr=0.01), AttackConfig(steps=2, step_size=0.01),
                                 ThreatModel("Linf", 0.04), ramp_steps=4)
    finally:
        attacks.pgd = real_pgd
    assert [e for e, _ in seen] == pytest.approx([0.01, 0.02, 0.03, 0.04, 0.04, 0.04])
    assert [s for _, s in seen] == pytest.approx([0.0025, 0.005, 0.0075, 0.01, 0.01, 0.01])
