"""Training and inference runtime for built networks.

Networks are torch modules (see :mod:`robustevo.netbuilder`); this module
adds the optimizers and learning-rate schedules the grammar can express,
budgeted training with early stopping, adversarial training, evaluation
and checkpoint files.
"""
from __future__ import annotations

import contextlib
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .data import Dataset, augment as augment_batch
from .netbuilder import LayerDescriptor, Network, NetworkPlan, build

CHECKPOINT_VERSION = 1
DEFAULT_STEPS = 2000  # budget steps standing in for the default 10-minute training time


@dataclass
class OptimizerConfig:
    kind: str = "gradient-descent"  # gradient-descent | adam | rmsprop
    lr: float = 0.01
    decay: float = 0.0
    momentum: float = 0.0
    nesterov: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    rho: float = 0.9
    schedule: str = "inverse-time"  # inverse-time | cosine | step
    milestones: tuple = ()  # epochs, for the step schedule
    gamma: float = 0.1
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.kind not in ("gradient-descent", "adam", "rmsprop"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.lr <= 0 or self.decay < 0:
            raise ValueError("lr must be > 0 and decay >= 0")

    @classmethod
    def from_attrs(cls, attrs) -> "OptimizerConfig":
        d = dict(attrs)
        kw = dict(kind=d["learning"], lr=float(d["lr"]), decay=float(d.get("decay", 0.0)))
        if kw["kind"] == "gradient-descent":
            kw.update(momentum=float(d["momentum"]), nesterov=str(d["nesterov"]) == "True")
        elif kw["kind"] == "adam":
            kw.update(beta1=float(d["beta1"]), beta2=float(d["beta2"]))
        else:
            kw.update(rho=float(d["rho"]))
        return cls(**kw)

    def lr_at(self, step: int, epoch: int = 0, total_steps: int = 1) -> float:
        if self.schedule == "inverse-time":
            return self.lr / (1.0 + self.decay * step)
        if self.schedule == "cosine":
            return 0.5 * self.lr * (1.0 + math.cos(math.pi * min(step, total_steps) / max(total_steps, 1)))
        if self.schedule == "step":
            return self.lr * self.gamma ** sum(epoch >= m for m in self.milestones)
        raise ValueError(f"unknown schedule {self.schedule!r}")

    def make(self, params):
        if self.kind == "gradient-descent":
            return torch.optim.SGD(params, lr=self.lr, momentum=self.momentum,
                                   nesterov=self.nesterov and self.momentum > 0, weight_decay=self.weight_decay)
        if self.kind == "adam":
            # torch rejects beta == 1; the grammar range includes it
            b1, b2 = min(self.beta1, 1 - 1e-7), min(self.beta2, 1 - 1e-7)
            return torch.optim.Adam(params, lr=self.lr, betas=(b1, b2), eps=1e-7, weight_decay=self.weight_decay)
        return torch.optim.RMSprop(params, lr=self.lr, alpha=self.rho, eps=1e-7, weight_decay=self.weight_decay)


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs_cap: int = 10000
    early_stop_patience: int = 10
    budget: float = 300
    budget_mode: str = "steps"  # steps | seconds
    l2_coeff: float = 5e-4
    grad_clip_norm: float | None = None
    augment: bool = False
    rng_seed: int = 0

    @classmethod
    def from_attrs(cls, attrs, **kw) -> "TrainConfig":
        d = dict(attrs)
        return cls(batch_size=int(d["batch_size"]), epochs_cap=int(d.get("epochs", 10000)),
                   early_stop_patience=int(d["early_stop"]), **kw)


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    control_loss: list = field(default_factory=list)
    epochs_run: int = 0
    steps: int = 0
    stop_reason: str = "epochs-cap"  # early-stop | budget | epochs-cap | non-finite
    nonfinite_seen: bool = False
    budget_consumed: float = 0

    @property
    def history(self):
        return list(self.train_loss) + list(self.control_loss)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def to_tensor(images: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """N x H x W x C array -> N x C x H x W tensor."""
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).to(dtype)


def net_dtype(net: nn.Module):
    return next(net.parameters()).dtype


def forward(net: nn.Module, x: torch.Tensor, train: bool = False) -> torch.Tensor:
    net.train(train)
    return net(x)


def loss_ce(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, labels)


def l2_penalty(net: Network) -> torch.Tensor:
    return sum((w * w).sum() for w in net.kernels())


def backward(net: nn.Module, x: torch.Tensor, y: torch.Tensor, train: bool = False):
    """Gradients of the mean cross-entropy w.r.t. parameters and input."""
    x = x.detach().clone().requires_grad_(True)
    net.zero_grad(set_to_none=True)
    loss = loss_ce(forward(net, x, train), y)
    loss.backward()
    grads = {name: p.grad.detach().clone() for name, p in net.named_parameters() if p.grad is not None}
    return grads, x.grad.detach()


@contextlib.contextmanager
def frozen_bn_stats(net: nn.Module):
    """Run forward passes in train mode without touching BN running statistics."""
    saved = {k: v.clone() for k, v in net.state_dict().items()
             if k.endswith(("running_mean", "running_var", "num_batches_tracked"))}
    try:
        yield
    finally:
        with torch.no_grad():
            state = net.state_dict()
            for k, v in saved.items():
                state[k].copy_(v)


def _control_loss(net, x, y, batch_size=256):
    net.eval()
    total = 0.0
    with torch.no_grad():
        for i in range(0, len(y), batch_size):
            total += F.cross_entropy(net(x[i:i + batch_size]), y[i:i + batch_size], reduction="sum").item()
    return total / len(y)


def train(net: Network, train_set: Dataset, control_set: Dataset | None, tc: TrainConfig,
          oc: OptimizerConfig, adversary=None) -> TrainReport:
    """Budgeted minibatch training.

    ``adversary(net, x, y) -> x_adv`` replaces each minibatch before the
    update (adversarial training).  Non-finite losses end training and are
    reported, never raised.
    """
    dtype = net_dtype(net)
    rng = np.random.default_rng(tc.rng_seed)
    y_all = torch.from_numpy(train_set.labels)
    if control_set is not None:
        xc, yc = to_tensor(control_set.images, dtype), torch.from_numpy(control_set.labels)
    x_all = None if tc.augment else to_tensor(train_set.images, dtype)

    opt = oc.make(list(net.parameters()))
    report = TrainReport()
    n = len(train_set)
    bs = max(1, min(tc.batch_size, n))
    per_epoch = math.ceil(n / bs)
    total_steps = int(min(tc.budget if tc.budget_mode == "steps" else math.inf, tc.epochs_cap * per_epoch))
    start = time.monotonic()
    best, stale = math.inf, 0

    def exhausted():
        if tc.budget_mode == "steps":
            return report.steps >= tc.budget
        return time.monotonic() - start >= tc.budget

    for epoch in range(tc.epochs_cap):
        if exhausted():
            report.stop_reason = "budget"
            break
        perm = rng.permutation(n)
        running, seen, cut = 0.0, 0, False
        net.train()
        for b in range(per_epoch):
            if exhausted():
                cut = True
                break
            idx = perm[b * bs:(b + 1) * bs]
            if tc.augment:
                xb = to_tensor(augment_batch(train_set.images[idx], rng), dtype)
            else:
                xb = x_all[idx]
            yb = y_all[idx]
            if adversary is not None:
                with frozen_bn_stats(net):
                    xb = adversary(net, xb, yb)
                net.train()
            for group in opt.param_groups:
                group["lr"] = oc.lr_at(report.steps, epoch, total_steps)
            opt.zero_grad(set_to_none=True)
            loss = loss_ce(net(xb), yb)
            if tc.l2_coeff:
                loss = loss + tc.l2_coeff * l2_penalty(net)
            value = loss.item()
            if not math.isfinite(value):
                report.train_loss.append(value)
                report.nonfinite_seen = True
                report.stop_reason = "non-finite"
                report.epochs_run = epoch + 1
                report.budget_consumed = report.steps if tc.budget_mode == "steps" else time.monotonic() - start
                return report
            loss.backward()
            if tc.grad_clip_norm:
                nn.utils.clip_grad_norm_(net.parameters(), tc.grad_clip_norm)
            opt.step()
            report.steps += 1
            running += value * len(idx)
            seen += len(idx)
        if seen == 0:
            report.stop_reason = "budget"
            break
        report.epochs_run = epoch + 1
        report.train_loss.append(running / seen)
        if control_set is not None:
            c = _control_loss(net, xc, yc)
            report.control_loss.append(c)
            if not math.isfinite(c):
                report.nonfinite_seen = True
                report.stop_reason = "non-finite"
                break
            if c < best:
                best, stale = c, 0
            else:
                stale += 1
                if stale >= tc.early_stop_patience:
                    report.stop_reason = "early-stop"
                    break
        if cut:
            report.stop_reason = "budget"
            break
    else:
        report.stop_reason = "epochs-cap"
    report.budget_consumed = report.steps if tc.budget_mode == "steps" else time.monotonic() - start
    report.nonfinite_seen = report.nonfinite_seen or not all(math.isfinite(v) for v in report.history)
    net.eval()
    return report


def adversarial_train(net: Network, train_set: Dataset, control_set: Dataset | None, tc: TrainConfig,
                      oc: OptimizerConfig, adv, tm, seed: int = 0, ramp_steps: int = 0) -> TrainReport:
    """Train on PGD adversarial counterparts of every minibatch (attack in train mode).

    With ``ramp_steps > 0`` the attack radius (and an explicit step size)
    grows linearly from eps / ramp_steps to eps over the first updates.
    """
    from dataclasses import replace

    from .attacks import pgd

    gen = torch.Generator().manual_seed(int(seed))
    calls = [0]

    def adversary(model, x, y):
        if adv.steps == 0:
            return x
        calls[0] += 1
        if ramp_steps > 0 and calls[0] < ramp_steps:
            frac = calls[0] / ramp_steps
            step = None if adv.step_size is None else adv.step_size * frac
            return pgd(model, x, y, replace(tm, epsilon=tm.epsilon * frac), replace(adv, step_size=step),
                       generator=gen, train_mode=True)
        return pgd(model, x, y, tm, adv, generator=gen, train_mode=True)

    return train(net, train_set, control_set, tc, oc, adversary=adversary)


def predict_logits(net: nn.Module, x: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    net.eval()
    with torch.no_grad():
        return torch.cat([net(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


def evaluate(net: Network, dataset: Dataset, batch_size: int = 256):
    """(accuracy, per-sample correctness mask, prediction histogram); BN in inference mode."""
    x = to_tensor(dataset.images, net_dtype(net))
    pred = predict_logits(net, x, batch_size).argmax(1).numpy()
    mask = pred == dataset.labels
    hist = np.bincount(pred, minlength=dataset.n_classes)
    return float(mask.mean()), mask, hist


# -- checkpoints -------------------------------------------------------------

def plan_from_content(content: dict, metadata=()) -> NetworkPlan:
    descs = [LayerDescriptor(l["kind"], [tuple(a) for a in l["attrs"]], list(l["inputs"])) for l in content["layers"]]
    return NetworkPlan(descs, tuple(content["input_shape"]), list(metadata))


def save_checkpoint(path, net: Network, report: TrainReport | None = None, optimizer_state=None,
                    genome: dict | None = None, extra: dict | None = None) -> None:
    torch.save({
        "version": CHECKPOINT_VERSION,
        "plan_hash": net.plan_hash,
        "plan": net.plan.content(),
        "metadata": [list(a) for a in net.plan.metadata],
        "n_classes": net.n_classes,
        "dtype": str(net_dtype(net)).replace("torch.", ""),
        "parameters": net.state_dict(),
        "optimizer": optimizer_state,
        "report": report.to_dict() if report is not None else None,
        "genome": genome,
        "extra": extra or {},
    }, path)


def load_checkpoint(path):
    """-> (network in eval mode, checkpoint dict)."""
    ck = torch.load(path, map_location="cpu", weights_only=True)
    if ck.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {ck.get('version')!r}")
    plan = plan_from_content(ck["plan"], [tuple(a) for a in ck["metadata"]])
    if plan.hash != ck["plan_hash"]:
        raise ValueError("checkpoint plan hash mismatch (corrupt file?)")
    net = build(plan, ck["n_classes"], dtype=getattr(torch, ck["dtype"]))
    net.load_state_dict(ck["parameters"])
    net.eval()
    return net, ck
