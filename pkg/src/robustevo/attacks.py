"""White-box gradient attacks under L-inf / L2 threat models.

All attacks treat the model as frozen (inference-mode BN unless
``train_mode`` is requested), work per sample (results do not depend on
batch composition) and return points inside the epsilon-ball intersected
with the data range.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import torch
from torch.nn import functional as F


@dataclass(frozen=True)
class ThreatModel:
    norm: str = "Linf"
    epsilon: float = 8 / 255
    data_range: tuple = (0.0, 1.0)

    def __post_init__(self):
        if self.norm not in ("Linf", "L2"):
            raise ValueError(f"unsupported norm {self.norm!r}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")


@dataclass
class AttackConfig:
    kind: str = "PGD"  # FGSM | PGD | APGD
    steps: int = 10
    step_size: float | None = None  # default: eps / 4 for PGD (APGD starts at 2 eps)
    random_start: bool = False
    loss: str = "CE"  # CE | DLR | targeted-DLR
    targeted: bool = False
    momentum_alpha: float = 0.75
    rho: float = 0.75
    n_target_classes: int = 9
    batch_size: int = 128
    seed: int = 0


def _batched(fn, x, *rest, batch_size):
    if batch_size is None or len(x) <= batch_size:
        return fn(x, *rest)
    outs = []
    for i in range(0, len(x), batch_size):
        outs.append(fn(x[i:i + batch_size], *[None if r is None else r[i:i + batch_size] for r in rest]))
    return torch.cat(outs)


def _flat_norm(t):
    return t.flatten(1).norm(dim=1).view(-1, *([1] * (t.dim() - 1)))


def _l2_unit(g):
    n = _flat_norm(g)
    return torch.where(n > 0, g / torch.where(n > 0, n, torch.ones_like(n)), torch.zeros_like(g))


def project(x_adv, x0, tm: ThreatModel):
    """Projection onto the epsilon-ball around x0 intersected with the data range."""
    lo, hi = tm.data_range
    eps = tm.epsilon
    if tm.norm == "Linf":
        return torch.clamp(torch.min(torch.max(x_adv, x0 - eps), x0 + eps), lo, hi)
    delta = (x_adv - x0).double()
    norm = _flat_norm(delta)
    factor = torch.where(norm > eps, eps / torch.where(norm > 0, norm, torch.ones_like(norm)), torch.ones_like(norm))
    out = torch.clamp(x0 + (delta * factor).to(x0.dtype), lo, hi)
    # rounding in the dtype may leave the exact norm a hair above eps; rescale until inside,
    # shrinking harder on every pass (small eps in float32 needs relative margins near 1e-4)
    margin = 1e-7
    for _ in range(24):
        exact = _flat_norm((out - x0).double())
        over = exact > eps
        if not over.any():
            return out
        factor = torch.where(over, factor * (eps / torch.where(over, exact, torch.ones_like(exact))) * (1 - margin),
                             factor)
        out = torch.clamp(x0 + (delta * factor).to(x0.dtype), lo, hi)
        margin = min(2 * margin, 0.5)
    over = _flat_norm((out - x0).double()) > eps
    out = torch.where(over, x0, out)
    return out


def random_delta(x, tm: ThreatModel, generator=None):
    """Uniform random point in the epsilon-ball (per coordinate for L-inf, volume-uniform for L2)."""
    if tm.norm == "Linf":
        u = torch.rand(x.shape, generator=generator, dtype=torch.float64)
        return ((2 * u - 1) * tm.epsilon).to(x.dtype)
    g = torch.randn(x.shape, generator=generator, dtype=torch.float64)
    d = g[0].numel()
    r = torch.rand((len(x),) + (1,) * (x.dim() - 1), generator=generator, dtype=torch.float64) ** (1.0 / d)
    return (_l2_unit(g) * r * tm.epsilon).to(x.dtype)


def _direction(g, tm):
    return torch.sign(g) if tm.norm == "Linf" else _l2_unit(g)


def dlr_loss(logits, y, target=None):
    """Difference-of-logits-ratio loss per sample (higher = closer to misclassification).

    With three classes the targeted denominator uses the third-largest
    logit only, since there is no fourth.
    """
    z = logits
    srt, _ = z.sort(dim=1, descending=True)
    rows = torch.arange(len(z))
    zy = z[rows, y]
    if target is None:
        others = z.clone()
        others[rows, y] = float("-inf")
        num = zy - others.max(dim=1).values
        den = srt[:, 0] - srt[:, 2]
    else:
        num = zy - z[rows, target]
        if z.shape[1] >= 4:
            den = srt[:, 0] - 0.5 * (srt[:, 2] + srt[:, 3])
        else:
            den = srt[:, 0] - srt[:, 2]
    safe = torch.where(den > 0, den, torch.ones_like(den))
    return torch.where(den > 0, -num / safe, torch.zeros_like(num))


def _loss_fn(name, targeted=False):
    if name == "CE":
        if targeted:
            return lambda z, y, t: -F.cross_entropy(z, t, reduction="none")
        return lambda z, y, t: F.cross_entropy(z, y, reduction="none")
    if name == "DLR":
        return lambda z, y, t: dlr_loss(z, y)
    if name == "targeted-DLR":
        return lambda z, y, t: dlr_loss(z, y, t)
    raise ValueError(f"unknown attack loss {name!r}")


def _grad(model, x, y, t, loss_fn):
    x = x.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        logits = model(x)
        loss = loss_fn(logits, y, t)
        g, = torch.autograd.grad(loss.sum(), x)
    return g.detach(), loss.detach(), logits.detach()


def input_gradient(model, x, y):
    """Gradient of the summed per-sample cross-entropy w.r.t. the input."""
    model.eval()
    return _grad(model, x, y, None, _loss_fn("CE"))[0]


def fgsm(model, x, y, tm: ThreatModel, batch_size: int | None = None):
    """x + eps * sign(grad), clipped to the data range."""
    if tm.norm != "Linf":
        raise ValueError("fgsm is the L-inf attack; use fgm for L2")
    model.eval()
    lo, hi = tm.data_range

    def run(xb, yb):
        g = _grad(model, xb, yb, None, _loss_fn("CE"))[0]
        return torch.clamp(xb + tm.epsilon * torch.sign(g), lo, hi).detach()

    return _batched(run, x, y, batch_size=batch_size)


def fgm(model, x, y, tm: ThreatModel, batch_size: int | None = None):
    """x + eps * g / ||g||_2 per sample, clipped to the data range."""
    if tm.norm != "L2":
        raise ValueError("fgm is the L2 attack; use fgsm for L-inf")
    model.eval()

    def run(xb, yb):
        g = _grad(model, xb, yb, None, _loss_fn("CE"))[0]
        return project(xb + tm.epsilon * _l2_unit(g), xb, tm).detach()

    return _batched(run, x, y, batch_size=batch_size)


def pgd(model, x, y, tm: ThreatModel, cfg: AttackConfig, targets=None, generator=None, init=None,
        train_mode: bool = False):
    """Projected gradient ascent on CE (descent on the target's CE when targeted).

    ``init`` is an explicit starting perturbation; otherwise ``random_start``
    draws one from ``generator``.
    """
    if not train_mode:
        model.eval()
    step = cfg.step_size if cfg.step_size is not None else tm.epsilon / 4
    targeted = cfg.targeted or targets is not None
    loss_fn = _loss_fn(cfg.loss if cfg.loss != "CE" else "CE", targeted and cfg.loss == "CE")
    x0 = x.detach()
    if init is None and cfg.random_start and cfg.steps > 0:
        init = random_delta(x0, tm, generator)
    x_adv = project(x0 + init, x0, tm) if init is not None else x0.clone()
    for _ in range(cfg.steps):
        g = _grad(model, x_adv, y, targets, loss_fn)[0]
        x_adv = project(x_adv + step * _direction(g, tm), x0, tm)
    return x_adv.detach()


def apgd(model, x, y, tm: ThreatModel, cfg: AttackConfig, targets=None, generator=None, init=None,
         return_loss: bool = False):
    """APGD with momentum and automatic step halving.

    Per sample, returns the last misclassifying iterate if any, otherwise
    the highest-loss iterate.  Checkpoint schedule: first check after
    ``max(int(0.22 n), 1)`` iterations, then intervals shrinking by
    ``max(int(0.03 n), 1)`` down to ``max(int(0.06 n), 1)``.
    """
    model.eval()
    n_iter = cfg.steps
    eps = tm.epsilon
    alpha = cfg.momentum_alpha
    loss_fn = _loss_fn(cfg.loss, cfg.loss == "CE" and targets is not None)
    x0 = x.detach()
    shape1 = (len(x0),) + (1,) * (x0.dim() - 1)
    if init is None and cfg.random_start:
        init = random_delta(x0, tm, generator)
    x_adv = project(x0 + init, x0, tm) if init is not None else x0.clone()

    grad, loss, logits = _grad(model, x_adv, y, targets, loss_fn)
    x_best, grad_best, loss_best = x_adv.clone(), grad.clone(), loss.clone()
    fooled = logits.argmax(1) != y
    x_best_adv = x_adv.clone()
    history = [loss.clone()]

    step = torch.full(shape1, 2 * eps, dtype=torch.float64)
    k = max(int(0.22 * n_iter), 1)
    k_min = max(int(0.06 * n_iter), 1)
    k_decr = max(int(0.03 * n_iter), 1)
    counter = 0
    loss_best_last = loss_best.clone()
    reduced_last = torch.ones_like(loss_best, dtype=torch.bool)
    x_prev = x_adv.clone()

    for i in range(n_iter):
        a = alpha if i > 0 else 1.0
        z = project(x_adv + (step * _direction(grad, tm).double()).to(x0.dtype), x0, tm)
        x_new = project(x_adv + a * (z - x_adv) + (1 - a) * (x_adv - x_prev), x0, tm)
        x_prev, x_adv = x_adv, x_new

        grad, loss, logits = _grad(model, x_adv, y, targets, loss_fn)
        wrong = logits.argmax(1) != y
        x_best_adv[wrong] = x_adv[wrong]
        fooled |= wrong
        history.append(loss.clone())
        better = loss > loss_best
        x_best[better], grad_best[better], loss_best[better] = x_adv[better], grad[better], loss[better]

        counter += 1
        if counter == k:
            ups = sum((history[-1 - j] > history[-2 - j]).to(torch.int64) for j in range(k))
            oscillating = ups <= k * cfg.rho
            stalled = ~reduced_last & (loss_best_last >= loss_best)
            halve = oscillating | stalled
            reduced_last = halve.clone()
            loss_best_last = loss_best.clone()
            if halve.any():
                step[halve] /= 2.0
                x_adv[halve] = x_best[halve]
                grad[halve] = grad_best[halve]
            k = max(k - k_decr, k_min)
            counter = 0

    out = torch.where(fooled.view(shape1), x_best_adv, x_best).detach()
    return (out, loss_best) if return_loss else out


def top_targets(logits, y, n_targets):
    """Incorrect classes ordered by logit (highest first), first ``n_targets`` columns."""
    z = logits.clone()
    z[torch.arange(len(z)), y] = float("-inf")
    return z.argsort(dim=1, descending=True)[:, :n_targets]


@dataclass
class EnsembleResult:
    x_adv: torch.Tensor
    clean: np.ndarray
    flipped: dict = field(default_factory=dict)
    robust: np.ndarray = None

    @property
    def robust_accuracy(self) -> float:
        return float(self.robust.mean())


def _predict(model, x, batch_size=256):
    model.eval()
    with torch.no_grad():
        return torch.cat([model(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


def _init_for(x, tm, seed, random_start):
    if not random_start:
        return None
    return random_delta(x, tm, torch.Generator().manual_seed(int(seed)))


def apgd_ce(model, x, y, tm, cfg: AttackConfig, active=None):
    """Untargeted APGD on CE over the ``active`` samples -> (x_adv, flipped mask)."""
    ce = AttackConfig(**{**cfg.__dict__, "kind": "APGD", "loss": "CE", "targeted": False})
    init = _init_for(x, tm, cfg.seed, cfg.random_start)
    return _run_masked(model, x, y, tm, ce, active, None, init)


def apgd_t(model, x, y, tm, cfg: AttackConfig, active=None):
    """Targeted APGD on DLR, one run per top incorrect class (capped by n_target_classes)."""
    dl = AttackConfig(**{**cfg.__dict__, "kind": "APGD", "loss": "targeted-DLR", "targeted": True})
    n_classes = _predict(model, x[:1]).shape[1]
    n_targets = min(cfg.n_target_classes, n_classes - 1)
    targets = top_targets(_predict(model, x), y, n_targets)
    x_adv = x.clone()
    flipped = np.zeros(len(x), dtype=bool)
    active = np.ones(len(x), dtype=bool) if active is None else active.copy()
    for t in range(n_targets):
        init = _init_for(x, tm, cfg.seed + 1 + t, cfg.random_start)
        run_adv, run_flip = _run_masked(model, x, y, tm, dl, active, targets[:, t], init)
        x_adv[run_flip] = run_adv[run_flip]
        flipped |= run_flip
        active &= ~run_flip
    return x_adv, flipped


def _run_masked(model, x, y, tm, cfg, active, targets, init):
    x_adv = x.clone()
    flipped = np.zeros(len(x), dtype=bool)
    idx = np.arange(len(x)) if active is None else np.flatnonzero(active)
    if len(idx) == 0:
        return x_adv, flipped
    t_idx = torch.from_numpy(idx)

    def run(xb, yb, tb, ib):
        return apgd(model, xb, yb, tm, cfg, targets=tb, init=ib)

    res = _batched(run, x[t_idx], y[t_idx], None if targets is None else targets[t_idx],
                   None if init is None else init[t_idx], batch_size=cfg.batch_size)
    pred = _predict(model, res).argmax(1)
    hit = (pred != y[t_idx]).numpy()
    x_adv[t_idx] = res
    flipped[idx] = hit
    return x_adv, flipped


def aa_lite(model, x, y, tm: ThreatModel, cfg: AttackConfig | None = None) -> EnsembleResult:
    """APGD-CE followed by APGD-T on the samples that survive it."""
    cfg = cfg or AttackConfig(kind="APGD", steps=100, random_start=True)
    clean = (_predict(model, x).argmax(1) == y).numpy()
    x_adv = x.clone()
    flips = {"apgd-ce": np.zeros(len(x), bool), "apgd-t": np.zeros(len(x), bool)}
    if clean.any():
        adv_ce, flips["apgd-ce"] = apgd_ce(model, x, y, tm, cfg, active=clean)
        x_adv[flips["apgd-ce"]] = adv_ce[flips["apgd-ce"]]
        remaining = clean & ~flips["apgd-ce"]
        if remaining.any():
            adv_t, flips["apgd-t"] = apgd_t(model, x, y, tm, cfg, active=remaining)
            x_adv[flips["apgd-t"]] = adv_t[flips["apgd-t"]]
    robust = clean & ~flips["apgd-ce"] & ~flips["apgd-t"]
    return EnsembleResult(x_adv, clean, flips, robust)


def run_attack(name: str, model, x, y, tm: ThreatModel, cfg: AttackConfig | None = None) -> EnsembleResult:
    """Dispatch by CLI name (fgsm, fgm, pgd, apgd, aa-lite) and score per sample."""
    cfg = cfg or AttackConfig()
    clean = (_predict(model, x).argmax(1) == y).numpy()
    if name == "aa-lite":
        return aa_lite(model, x, y, tm, cfg)
    if name == "fgsm":
        x_adv = fgsm(model, x, y, tm, batch_size=cfg.batch_size)
    elif name == "fgm":
        x_adv = fgm(model, x, y, tm, batch_size=cfg.batch_size)
    elif name == "pgd":
        gen = torch.Generator().manual_seed(cfg.seed)
        x_adv = _batched(lambda xb, yb: pgd(model, xb, yb, tm, cfg, generator=gen), x, y,
                         batch_size=cfg.batch_size)
    elif name == "apgd":
        x_adv, _ = apgd_ce(model, x, y, tm, cfg)
    else:
        raise ValueError(f"unknown attack {name!r}")
    adv_ok = (_predict(model, x_adv).argmax(1) == y).numpy()
    flipped = clean & ~adv_ok
    return EnsembleResult(x_adv, clean, {name: flipped}, clean & ~flipped)


def write_attack_csv(path, result: EnsembleResult) -> None:
    """One row per sample: index, clean-correct, per-attack flipped flags, robust flag."""
    names = list(result.flipped)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "clean_correct"] + [f"flipped_{n}" for n in names] + ["robust"])
        for i in range(len(result.clean)):
            w.writerow([i, int(result.clean[i])] + [int(result.flipped[n][i]) for n in names]
                       + [int(result.robust[i])])
