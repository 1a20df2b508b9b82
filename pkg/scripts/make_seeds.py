"""Regenerate src/robustevo/assets/seed_*.json.

The seeds transcribe the phase structure of the NSGA-Net macro-space model
into this search space: a 3x3 stem, three phases of bottleneck macro-nodes
(with an intra-phase skip and a phase-residual edge), a max-pooling
transition between phases, global-ish average pooling and the softmax head.
Filter counts are approximations chosen inside the grammar's ranges.
"""
import json
from pathlib import Path

from robustevo.genome import DESK_MODULES, PAPER_MODULES, Genome, Unit, validate
from robustevo.grammar import construct, load_grammar

ASSETS = Path(__file__).resolve().parents[1] / "src" / "robustevo" / "assets"

MACRO, TRANSITION = 0, 2
RELU, AVG, MAX = 0, 0, 1


def phase_units(first, n_nodes):
    """Inputs for n_nodes macro-nodes whose phase input is unit first-1."""
    start = first - 1
    inputs = []
    for k in range(n_nodes):
        i = first + k
        if k == 0:
            inputs.append([start])
        elif k == n_nodes - 1 and k >= 2:
            inputs.append(sorted({start, i - 1}))
        elif k >= 1 and i - 2 >= start:
            inputs.append(sorted({i - 1, i - 2}) if k >= 2 else [start, i - 1])
    return inputs


def make(variant, grammar_name, specs, stem_filters, node_filters, trans_filters,
         nodes_per_phase, last_kernel, learning_values, budget):
    g = load_grammar(grammar_name)
    units = [Unit("stem", construct(g, "stem", {"padding": [0]}, {"num-filters": [stem_filters]}), [-1])]
    for phase in range(3):
        first = len(units)
        for inputs in phase_units(first, nodes_per_phase):
            inner = construct(g, "features", {"features": [MACRO], "node-activation": [RELU]},
                              {"num-filters": [node_filters]})
            units.append(Unit("features", inner, inputs))
        if phase < 2:
            inner = construct(g, "features", {"features": [TRANSITION], "node-activation": [RELU],
                                              "pooling-type": [MAX]}, {"num-filters": [trans_filters]})
            units.append(Unit("features", inner, [len(units) - 1]))
    inner = construct(g, "last-transition", {"node-activation": [RELU], "pooling-type": [AVG]},
                      {"num-filters": [trans_filters], "pool-kernel-size": [last_kernel]})
    units.append(Unit("last-transition", inner, [len(units) - 1]))
    units.append(Unit("softmax", construct(g, "softmax"), [len(units) - 1]))
    learning = construct(g, "learning", {"optimizer-algo": [0], "nesterov": [0]}, learning_values)
    genome = Genome(tuple(specs), units, learning, budget)
    problems = validate(genome)
    assert not problems, problems
    doc = {
        "note": ("Seed transcription of the NSGA-Net macro model: 3 phases of "
                 f"{nodes_per_phase} bottleneck macro-nodes, max-pool transitions between phases, "
                 "average-pooling head. Structural phases only; filter counts approximate."),
        "phases": [nodes_per_phase] * 3,
        "grammar": grammar_name,
        "genome": genome.to_dict(),
    }
    (ASSETS / f"seed_{variant}.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


learning = {"lr": [-1], "decay": [-4], "momentum": [0.9], "early_stop": [10]}
make("neronet", "neronet", PAPER_MODULES, 64, 32, 64, 4, 7, {**learning, "batch_size": [7]}, 2000)
make("desk", "desk", DESK_MODULES, 16, 8, 16, 2, 2, {**learning, "lr": [-2], "batch_size": [5]}, 300)
