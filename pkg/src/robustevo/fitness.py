"""Fitness: clean accuracy, adversarial accuracy, the F-beta score, warm-up and penalties."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .attacks import ThreatModel, fgsm
from .data import Dataset
from .engine import TrainReport, evaluate, net_dtype, to_tensor

PENALTY = -1.0
RUNLOG_COLUMNS = ["generation", "individual", "C", "A", "F", "regime", "ill_fitted_reason", "budget"]


@dataclass
class FitnessReport:
    C: float = 0.0
    A: float | None = None
    F: float = PENALTY
    n_clean: int = 0
    n_correct: int = 0
    ill_fitted: str | None = None  # non-finite-loss | trivial-classifier | invalid-plan
    regime: str = "warmup"  # warmup | fbeta

    @property
    def penalized(self) -> bool:
        return self.ill_fitted is not None

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def f_beta(C: float, A: float, beta: float) -> float:
    """Weighted harmonic combination of clean and adversarial accuracy."""
    if beta <= 0:
        raise ValueError("beta must be > 0")
    b2 = beta * beta
    den = C + b2 * A
    if den == 0:
        return 0.0
    return (1 + b2) * C * A / den


@dataclass
class WarmupController:
    tau: float = 0.80
    transitioned: bool = False
    include_penalized: bool = True

    @property
    def regime(self) -> str:
        return "fbeta" if self.transitioned else "warmup"


def update_warmup(ctrl: WarmupController, reports) -> WarmupController:
    """Latch the transition once the generation's mean fitness reaches tau."""
    if ctrl.transitioned:
        return ctrl
    values = [r.F for r in reports if ctrl.include_penalized or not r.penalized]
    if values and float(np.mean(values)) >= ctrl.tau:
        return WarmupController(ctrl.tau, True, ctrl.include_penalized)
    return ctrl


def detect_ill_fitted(report: TrainReport | None, histogram, n_classes: int) -> str | None:
    if report is not None and (report.nonfinite_seen or not all(math.isfinite(v) for v in report.history)):
        return "non-finite-loss"
    hist = np.asarray(histogram)
    n = hist.sum()
    # integer comparison so an exact (K-1)/K share is not flagged through rounding
    if n > 0 and hist.max() * n_classes > (n_classes - 1) * n:
        return "trivial-classifier"
    return None


def fgsm_attack(batch_size: int = 128):
    """The fitness-time attack: FGSM in inference mode, minibatches of ``batch_size``."""
    def attack(model, x, y, tm):
        return fgsm(model, x, y, tm, batch_size=batch_size)
    return attack


def adversarial_accuracy(model, dataset: Dataset, mask, attack, tm: ThreatModel):
    """Share of the correctly classified samples that survive ``attack`` -> (A, N_c)."""
    mask = np.asarray(mask, dtype=bool)
    n_correct = int(mask.sum())
    if n_correct == 0:
        return 0.0, 0
    idx = np.flatnonzero(mask)
    x = to_tensor(dataset.images[idx], net_dtype(model))
    y = torch.from_numpy(dataset.labels[idx])
    x_adv = attack(model, x, y, tm)
    model.eval()
    with torch.no_grad():
        pred = torch.cat([model(x_adv[i:i + 256]) for i in range(0, len(x_adv), 256)]).argmax(1)
    survived = int((pred == y).sum())
    return survived / n_correct, n_correct


def evaluate_individual(model, fitness_set: Dataset, beta: float, attack, tm: ThreatModel,
                        warmup: WarmupController, train_report: TrainReport | None,
                        invalid_plan: bool = False) -> FitnessReport:
    regime = warmup.regime
    if invalid_plan or model is None:
        return FitnessReport(F=PENALTY, n_clean=len(fitness_set), ill_fitted="invalid-plan", regime=regime)
    C, mask, hist = evaluate(model, fitness_set)
    reason = detect_ill_fitted(train_report, hist, fitness_set.n_classes)
    n_corr = int(mask.sum())
    if reason is not None:
        return FitnessReport(C=C, F=PENALTY, n_clean=len(fitness_set), n_correct=n_corr,
                             ill_fitted=reason, regime=regime)
    if not warmup.transitioned:
        return FitnessReport(C=C, F=C, n_clean=len(fitness_set), n_correct=n_corr, regime=regime)
    A, _ = adversarial_accuracy(model, fitness_set, mask, attack, tm)
    return FitnessReport(C=C, A=A, F=f_beta(C, A, beta), n_clean=len(fitness_set), n_correct=n_corr,
                         regime=regime)


def runlog_row(generation: int, individual: int, rep: FitnessReport, budget) -> dict:
    return {"generation": generation, "individual": individual, "C": repr(float(rep.C)),
            "A": "" if rep.A is None else repr(float(rep.A)), "F": repr(float(rep.F)),
            "regime": rep.regime, "ill_fitted_reason": rep.ill_fitted or "", "budget": budget}


def write_runlog(path, rows, columns=RUNLOG_COLUMNS) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        w.writerows(rows)
