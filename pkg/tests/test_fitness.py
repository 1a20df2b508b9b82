import csv
import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from conftest import TinyConvNet
from robustevo.attacks import ThreatModel
from robustevo.data import synth_dataset
from robustevo.engine import TrainReport
from robustevo.fitness import (PENALTY, RUNLOG_COLUMNS, FitnessReport, WarmupController, adversarial_accuracy,
                               detect_ill_fitted, evaluate_individual, f_beta, fgsm_attack, runlog_row,
                               update_warmup, write_runlog)

TM = ThreatModel("Linf", 8 / 255)
unit = st.floats(0, 1)


def constant_net(cls=0, n_classes=3):
    net = TinyConvNet(n_classes)
    with torch.no_grad():
        net.fc.weight.zero_()
        net.fc.bias.zero_()
        net.fc.bias[cls] = 1.0
    return net.eval()


@pytest.fixture(scope="module")
def small_set():
    return synth_dataset(10, 3, 8, seed=2)


# -- F-beta -------------------------------------------------------------------------------

def test_f_beta_reported_value():
    assert f_beta(0.8749, 0.3325, 4) == pytest.approx(0.7983, abs=5e-4)


def test_f_beta_examples():
    assert f_beta(0.6, 0.6, 4) == pytest.approx(0.6)
    assert f_beta(0.0, 0.0, 4) == 0.0
    assert f_beta(1.0, 0.0, 4) == 0.0
    # beta = 1 is the ordinary harmonic mean
    assert f_beta(0.5, 1.0, 1) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        f_beta(0.5, 0.5, 0)


@given(unit, unit, st.floats(0.1, 10))
def test_f_beta_between_min_and_max(C, A, beta):
    value = f_beta(C, A, beta)
    if C > 0 and A > 0:
        assert min(C, A) - 1e-12 <= value <= max(C, A) + 1e-12
    else:
        assert value == 0.0


@given(st.floats(0.01, 1), st.floats(0.01, 1), st.floats(0.01, 0.5), st.floats(0.1, 10))
def test_f_beta_monotone(C, A, bump, beta):
    assert f_beta(min(C + bump, 1), A, beta) >= f_beta(C, A, beta) - 1e-12
    assert f_beta(C, min(A + bump, 1), beta) >= f_beta(C, A, beta) - 1e-12


def test_large_beta_weights_clean_accuracy():
    # a larger beta pulls the score toward C
    assert abs(f_beta(0.9, 0.3, 8) - 0.9) < abs(f_beta(0.9, 0.3, 2) - 0.9)


# -- ill-fitted detection -------------------------------------------------------------------

def test_constant_predictor_flagged():
    assert detect_ill_fitted(TrainReport(train_loss=[1.0]), [1000] + [0] * 9, 10) == "trivial-classifier"


def test_exactly_ninety_percent_not_flagged():
    assert detect_ill_fitted(TrainReport(train_loss=[1.0]), [900, 100] + [0] * 8, 10) is None
    assert detect_ill_fitted(None, [900] + [12] * 8 + [4], 10) is None
    assert detect_ill_fitted(None, [901, 99] + [0] * 8, 10) == "trivial-classifier"


def test_binary_threshold_is_half():
    assert detect_ill_fitted(None, [50, 50], 2) is None
    assert detect_ill_fitted(None, [51, 49], 2) == "trivial-classifier"


@pytest.mark.parametrize("history", [[1.0, float("nan")], [float("inf")], [-float("inf"), 0.5]])
def test_nonfinite_history_flagged(history):
    report = TrainReport(train_loss=history)
    assert detect_ill_fitted(report, [10, 10, 10], 3) == "non-finite-loss"


def test_nonfinite_checked_before_trivial():
    report = TrainReport(control_loss=[float("nan")], nonfinite_seen=True)
    assert detect_ill_fitted(report, [30, 0, 0], 3) == "non-finite-loss"


# -- warm-up ------------------------------------------------------------------------------------

def reports(*values, penalized=()):
    return [FitnessReport(F=v, ill_fitted="invalid-plan" if i in penalized else None) for i, v in enumerate(values)]


def test_warmup_latches_at_tau():
    ctrl = WarmupController(0.8)
    ctrl = update_warmup(ctrl, reports(0.7, 0.85))
    assert ctrl.regime == "warmup"
    ctrl = update_warmup(ctrl, reports(0.8, 0.8))
    assert ctrl.transitioned and ctrl.regime == "fbeta"
    assert update_warmup(ctrl, reports(0.0, 0.0)).transitioned


def test_warmup_penalty_handling():
    mix = reports(0.95, 0.95, 0.95, PENALTY, penalized=(3,))
    assert not update_warmup(WarmupController(0.8), mix).transitioned
    assert update_warmup(WarmupController(0.8, include_penalized=False), mix).transitioned


def test_warmup_does_not_mutate_input():
    ctrl = WarmupController(0.5)
    update_warmup(ctrl, reports(0.9))
    assert not ctrl.transitioned


# -- per-individual evaluation ---------------------------------------------------------------

def test_adversarial_accuracy_edge_cases(small_set):
    net = TinyConvNet()
    identity = lambda model, x, y, tm: x  # noqa: E731
    mask = np.zeros(len(small_set), bool)
    assert adversarial_accuracy(net, small_set, mask, identity, TM) == (0.0, 0)
    mask[:7] = True
    assert adversarial_accuracy(net, small_set, mask, identity, TM) == (
        float(np.mean(net(torch.from_numpy(small_set.images[:7]).permute(0, 3, 1, 2)).argmax(1).numpy()
                      == small_set.labels[:7])), 7)


def test_adversarial_accuracy_counts_only_correct_samples(trained_desk):
    net, fitness_set = trained_desk
    from robustevo.engine import evaluate

    _, mask, _ = evaluate(net, fitness_set)
    A, n_correct = adversarial_accuracy(net, fitness_set, mask, fgsm_attack(), TM)
    assert n_correct == mask.sum() and 0 <= A < 1


def test_evaluate_individual_regimes(trained_desk):
    net, fitness_set = trained_desk
    ok = TrainReport(train_loss=[1.0, 0.5])
    warm = evaluate_individual(net, fitness_set, 4, fgsm_attack(), TM, WarmupController(), ok)
    assert warm.regime == "warmup" and warm.F == warm.C and warm.A is None and not warm.penalized
    hot = evaluate_individual(net, fitness_set, 4, fgsm_attack(), TM, WarmupController(transitioned=True), ok)
    assert hot.regime == "fbeta" and hot.A is not None and hot.F == pytest.approx(f_beta(hot.C, hot.A, 4))
    assert hot.n_clean == len(fitness_set) and hot.n_correct == round(hot.C * len(fitness_set))


def test_evaluate_individual_penalties(small_set):
    ok = TrainReport(train_loss=[1.0])
    invalid = evaluate_individual(None, small_set, 4, fgsm_attack(), TM, WarmupController(), None, invalid_plan=True)
    assert invalid.F == PENALTY and invalid.ill_fitted == "invalid-plan"
    trivial = evaluate_individual(constant_net(), small_set, 4, fgsm_attack(), TM, WarmupController(), ok)
    assert trivial.F == PENALTY and trivial.ill_fitted == "trivial-classifier" and trivial.C == pytest.approx(1 / 3)
    nan = evaluate_individual(TinyConvNet().eval(), small_set, 4, fgsm_attack(), TM, WarmupController(True),
                              TrainReport(train_loss=[math.nan]))
    assert nan.F == PENALTY and nan.ill_fitted == "non-finite-loss" and nan.A is None


def test_report_and_runlog(tmp_path):
    rep = FitnessReport(0.9, 0.25, f_beta(0.9, 0.25, 4), 150, 135, None, "fbeta")
    assert FitnessReport.from_dict(rep.to_dict()) == rep
    row = runlog_row(3, 1, rep, 300)
    assert float(row["F"]) == rep.F and row["ill_fitted_reason"] == ""
    warm = runlog_row(0, 2, FitnessReport(ill_fitted="invalid-plan"), 300)
    assert warm["A"] == "" and warm["ill_fitted_reason"] == "invalid-plan"
    path = tmp_path / "runlog.csv"
    write_runlog(path, [row, warm])
    with open(path) as fh:
        read = list(csv.DictReader(fh))
    assert list(read[0]) == RUNLOG_COLUMNS and len(read) == 2


def test_fgsm_attack_batches_consistently(small_set):
    net = TinyConvNet().eval()
    x = torch.from_numpy(small_set.images).permute(0, 3, 1, 2).contiguous()
    y = torch.from_numpy(small_set.labels)
    assert torch.equal(fgsm_attack(7)(net, x, y, TM), fgsm_attack(1000)(net, x, y, TM))
