"""Command-line entry points: evolve, train, evaluate, attack, plot."""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch

from . import attacks, data as datamod, engine
from .evolution import DataBundle, EvolutionConfig, parse_epsilon, run, summarize_generation
from .genome import decode_genome, load_genome
from .grammar import load_grammar
from .netbuilder import build, check_plan

PRESETS = {
    # extended standard training
    "std-350": dict(epochs=350, batch_size=128, lr=0.025, momentum=0.9, schedule="cosine",
                    weight_decay=3e-4, grad_clip_norm=5.0, mode="standard"),
    # PGD-7 adversarial training
    "adv-200": dict(epochs=200, batch_size=64, lr=0.1, momentum=0.9, schedule="step", milestones=(100, 150),
                    weight_decay=1e-4, grad_clip_norm=5.0, mode="adversarial"),
}


@dataclass
class DataConfig:
    name: str = "synth"  # synth | cifar10
    dir: str | None = None
    n_per_class: int = 300
    n_classes: int = 3
    size: int = 8
    seed: int = 0
    split: tuple = (600, 150, 150)
    split_seed: int | None = None  # defaults to the run seed

    @classmethod
    def from_dict(cls, d):
        _reject_unknown(cls, d, "data")
        d = dict(d)
        if "split" in d:
            d["split"] = tuple(d["split"])
        return cls(**d)


def _reject_unknown(cls, d, where):
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ValueError(f"unknown keys in [{where}]: {sorted(unknown)}")


def load_run_config(path):
    """JSON run config: {"evolution": {...}, "data": {...}, "out": "dir"}."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    unknown = set(doc) - {"evolution", "data", "out"}
    if unknown:
        raise ValueError(f"unknown top-level config keys: {sorted(unknown)}")
    return (EvolutionConfig.from_dict(doc.get("evolution", {})), DataConfig.from_dict(doc.get("data", {})),
            doc.get("out"))


def load_dataset(dc: DataConfig, split: str = "train") -> datamod.Dataset:
    if dc.name == "synth":
        seed = dc.seed if split == "train" else dc.seed + 7919
        return datamod.synth_dataset(dc.n_per_class, dc.n_classes, dc.size, seed=seed)
    if dc.name == "cifar10":
        if not dc.dir:
            raise ValueError("cifar10 needs a data directory")
        return datamod.load_cifar10_binary(dc.dir, split)
    raise ValueError(f"unknown dataset {dc.name!r}")


# -- evolve -------------------------------------------------------------------

def cmd_evolve(args) -> int:
    if args.config:
        cfg, dc, out = load_run_config(args.config)
    else:
        cfg, dc, out = EvolutionConfig(variant="desk", budget_default=300, budget_max=900,
                                       budget_increment=300, epsilon="8/255"), DataConfig(), None
    if args.seed is not None:
        cfg.rng_seed = args.seed
    if args.generations is not None:
        cfg.generations = args.generations
    out = args.out or out
    if not out:
        raise ValueError("no output directory (use --out or set 'out' in the config)")
    if dc.name == "cifar10" and dc.split == DataConfig.split:
        dc.split = datamod.CIFAR_SPLIT
    ds = load_dataset(dc, "train")
    split_seed = cfg.rng_seed if dc.split_seed is None else dc.split_seed
    bundle = DataBundle(*datamod.split(ds, datamod.SplitSpec(tuple(dc.split), split_seed)))
    Path(out).mkdir(parents=True, exist_ok=True)
    (Path(out) / "config.json").write_text(json.dumps(
        {"evolution": cfg.to_dict(), "data": {**dc.__dict__, "split": list(dc.split)}}, indent=1) + "\n")
    st = run(cfg, bundle, out, resume=args.resume, jobs=args.jobs,
             log=None if args.quiet else (lambda m: print(m, flush=True)))
    print(f"done: {st.generation + 1} generations, best F = {st.parent.F():.4f}; logs in {out}")
    return 0


# -- train --------------------------------------------------------------------

def cmd_train(args) -> int:
    torch.manual_seed(args.seed)
    genome = load_genome(args.genome)
    grammar = load_grammar(args.grammar or _guess_grammar(genome))
    dc = DataConfig(name=args.data, dir=args.data_dir, n_per_class=args.n_per_class, n_classes=args.n_classes,
                    size=args.size, seed=args.data_seed)
    ds = load_dataset(dc, "train")
    plan = decode_genome(genome, grammar, ds.shape)
    reason = check_plan(plan, ds.n_classes)
    if reason:
        raise ValueError(f"genome does not build: {reason}")
    net = build(plan, ds.n_classes, seed=args.seed)
    preset = PRESETS.get(args.preset) if args.preset else None
    mode = preset["mode"] if preset and args.mode is None else (args.mode or "standard")
    rng = np.random.default_rng(args.seed)
    if preset:
        train_set, control = ds, None
        steps_per_epoch = math.ceil(len(train_set) / preset["batch_size"])
        epochs = args.epochs or preset["epochs"]
        budget = args.budget or epochs * steps_per_epoch
        tc = engine.TrainConfig(batch_size=preset["batch_size"], epochs_cap=epochs, early_stop_patience=10 ** 9,
                                budget=budget, l2_coeff=0.0, grad_clip_norm=preset["grad_clip_norm"],
                                augment=not args.no_augment, rng_seed=args.seed)
        oc = engine.OptimizerConfig(lr=preset["lr"], momentum=preset["momentum"], schedule=preset["schedule"],
                                    milestones=tuple(preset.get("milestones", ())), weight_decay=preset["weight_decay"])
    else:
        n_ctrl = max(1, len(ds) // 10)
        perm = rng.permutation(len(ds))
        train_set, control = ds.subset(perm[n_ctrl:]), ds.subset(perm[:n_ctrl])
        tc = engine.TrainConfig.from_attrs(plan.metadata, budget=args.budget or genome.budget,
                                           augment=not args.no_augment, rng_seed=args.seed)
        oc = engine.OptimizerConfig.from_attrs(plan.metadata)
    if mode == "adversarial":
        eps = parse_epsilon(args.eps)
        adv = attacks.AttackConfig("PGD", steps=7, step_size=eps / 4, random_start=True)
        report = engine.adversarial_train(net, train_set, control, tc, oc, adv, attacks.ThreatModel("Linf", eps),
                                          seed=args.seed)
    else:
        report = engine.train(net, train_set, control, tc, oc)
    engine.save_checkpoint(args.out, net, report, genome=genome.to_dict(),
                           extra={"data": {**dc.__dict__, "split": list(dc.split)}, "mode": mode,
                                  "preset": args.preset})
    print(f"trained ({mode}): {report.steps} steps, {report.epochs_run} epochs, stop={report.stop_reason}; "
          f"checkpoint {args.out}")
    return 0


def _guess_grammar(genome):
    return "desk" if any(s.nonterminal == "features" and s.max_units == 10 for s in genome.specs) else "neronet"


def _eval_data(args, ck):
    stored = dict(ck.get("extra", {}).get("data") or {})
    stored.pop("split", None)
    dc = DataConfig(**{k: v for k, v in stored.items() if k in {f.name for f in fields(DataConfig)}})
    if args.data:
        dc.name = args.data
    if args.data_dir:
        dc.dir = args.data_dir
    ds = load_dataset(dc, args.split)
    if args.n and args.n < len(ds):
        ds = ds.subset(np.arange(args.n))
    return ds


def cmd_evaluate(args) -> int:
    net, ck = engine.load_checkpoint(args.ckpt)
    ds = _eval_data(args, ck)
    acc, _, hist = engine.evaluate(net, ds)
    print(f"clean accuracy C = {acc:.4f} on {len(ds)} samples; predictions per class {hist.tolist()}")
    return 0


# -- attack -------------------------------------------------------------------

def cmd_attack(args) -> int:
    net, ck = engine.load_checkpoint(args.ckpt)
    ds = _eval_data(args, ck)
    tm = attacks.ThreatModel("Linf" if args.norm == "linf" else "L2", parse_epsilon(args.eps))
    if args.attack == "fgsm" and tm.norm != "Linf" or args.attack == "fgm" and tm.norm != "L2":
        raise ValueError(f"{args.attack} does not support norm {args.norm}")
    step = parse_epsilon(args.step_size) if args.step_size else None
    cfg = attacks.AttackConfig(kind=args.attack.upper(), steps=args.steps, step_size=step,
                               random_start=args.random_start or args.attack in ("apgd", "aa-lite"),
                               batch_size=args.batch_size, seed=args.seed)
    x = engine.to_tensor(ds.images, engine.net_dtype(net))
    y = torch.from_numpy(ds.labels)
    res = attacks.run_attack(args.attack, net, x, y, tm, cfg)
    n, n_c = len(ds), int(res.clean.sum())
    print(f"clean accuracy C = {n_c / n:.4f} ({n_c}/{n})")
    for name, flipped in res.flipped.items():
        a = (n_c - int(flipped[res.clean].sum())) / n_c if n_c else 0.0
        print(f"adversarial accuracy A[{name}] = {a:.4f} (after this attack alone, among the {n_c} correct)")
    if len(res.flipped) > 1:
        print(f"adversarial accuracy A[{args.attack}] = {(res.robust.sum() / n_c if n_c else 0.0):.4f}")
    print(f"overall post-attack accuracy = {res.robust.sum() / n:.4f} ({int(res.robust.sum())}/{n})")
    if args.out:
        attacks.write_attack_csv(args.out, res)
        print(f"per-sample results: {args.out}")
    return 0


# -- plot ---------------------------------------------------------------------

PLOT_COLUMNS = ["generation", "regime", "best_F", "best_C", "best_A"]


def plot_series(runlog_path) -> list[dict]:
    """Per-generation series rebuilt from a run log (same rule as the run's summary)."""
    with open(runlog_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    missing = {"generation", "individual", "C", "A", "F", "regime"} - set(rows[0] if rows else {})
    if not rows or missing:
        raise ValueError(f"{runlog_path} is not a run log")
    out = []
    for gen in sorted({int(r["generation"]) for r in rows}):
        gen_rows = [r for r in rows if int(r["generation"]) == gen]
        offspring = [r for r in gen_rows if int(r["individual"]) > 0]
        s = summarize_generation(gen, offspring[0]["regime"], gen_rows)
        out.append({k: s[k] for k in PLOT_COLUMNS})
    return out


def render_svg(series, width=640, height=360) -> str:
    pad = 48
    gens = [int(s["generation"]) for s in series]
    g_lo, g_hi = min(gens), max(max(gens), min(gens) + 1)
    vals = [float(s[k]) for s in series for k in ("best_F", "best_C", "best_A") if s[k] != ""]
    v_lo, v_hi = min(0.0, min(vals)), max(1.0, max(vals))

    def px(g, v):
        x = pad + (g - g_lo) / (g_hi - g_lo) * (width - 2 * pad)
        y = height - pad - (v - v_lo) / (v_hi - v_lo) * (height - 2 * pad)
        return f"{x:.1f},{y:.1f}"

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{width / 2}" y="{height - 12}" text-anchor="middle">generation</text>',
             f'<text x="{pad - 6}" y="{pad}" text-anchor="end">{v_hi:g}</text>',
             f'<text x="{pad - 6}" y="{height - pad}" text-anchor="end">{v_lo:g}</text>']
    colors = {"best_F": "black", "best_C": "#1f77b4", "best_A": "#2ca02c"}
    for i, (key, color) in enumerate(colors.items()):
        pts = [px(int(s["generation"]), float(s[key])) for s in series if s[key] != ""]
        if pts:
            parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{" ".join(pts)}"/>')
        parts.append(f'<text x="{width - pad - 60}" y="{pad + 14 * i}" fill="{color}">{key}</text>')
    flip = next((int(s["generation"]) for s in series if s["regime"] == "fbeta"), None)
    if flip is not None:
        x = px(flip, v_lo).split(",")[0]
        parts.append(f'<line x1="{x}" y1="{pad}" x2="{x}" y2="{height - pad}" stroke="red" '
                     f'stroke-dasharray="3,3"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_plot(args) -> int:
    series = plot_series(args.runlog)
    out = Path(args.out)
    csv_path, svg_path = out.with_suffix(".csv"), out.with_suffix(".svg")
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=PLOT_COLUMNS)
        w.writeheader()
        w.writerows(series)
    svg_path.write_text(render_svg(series), encoding="utf-8")
    print(f"{len(series)} generations -> {csv_path}, {svg_path}")
    return 0


# -- parser -------------------------------------------------------------------

def _data_flags(p, default=None):
    p.add_argument("--data", choices=["synth", "cifar10"], default=default)
    p.add_argument("--data-dir", help="CIFAR-10 binary directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="robustevo", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("evolve", help="run the evolutionary search")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--generations", type=int)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_evolve)

    p = sub.add_parser("train", help="train a genome and write a checkpoint")
    p.add_argument("--genome", required=True)
    p.add_argument("--mode", choices=["standard", "adversarial"])
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--budget", type=int, help="update steps")
    p.add_argument("--epochs", type=int, help="override the preset's epoch count")
    p.add_argument("--grammar")
    p.add_argument("--eps", default="8/255", help="PGD epsilon for adversarial mode")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--n-per-class", type=int, default=300)
    p.add_argument("--n-classes", type=int, default=3)
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _data_flags(p, "synth")
    p.set_defaults(func=cmd_train)

    for name, func, hlp in (("evaluate", cmd_evaluate, "clean accuracy of a checkpoint"),
                            ("attack", cmd_attack, "attack a checkpoint")):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--split", choices=["train", "test"], default="test")
        p.add_argument("--n", type=int, help="use the first N samples")
        _data_flags(p)
        if name == "attack":
            p.add_argument("--attack", choices=["fgsm", "fgm", "pgd", "apgd", "aa-lite"], required=True)
            p.add_argument("--norm", choices=["linf", "l2"], default="linf")
            p.add_argument("--eps", default="8/255")
            p.add_argument("--steps", type=int, default=20)
            p.add_argument("--step-size")
            p.add_argument("--random-start", action="store_true")
            p.add_argument("--batch-size", type=int, default=128)
            p.add_argument("--seed", type=int, default=0)
            p.add_argument("--out", help="per-sample CSV")
        p.set_defaults(func=func)

    p = sub.add_parser("plot", help="per-generation series (CSV + SVG) from a run log")
    p.add_argument("--runlog", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)  # exits with status 2 on bad flags
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"robustevo {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
