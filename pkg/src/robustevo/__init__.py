"""Grammar-guided neuroevolution of convolutional networks for clean accuracy and adversarial robustness."""
from .attacks import AttackConfig, ThreatModel, aa_lite, apgd, dlr_loss, fgm, fgsm, pgd
from .data import Dataset, SplitSpec, augment, load_cifar10_binary, split, synth_dataset
from .engine import OptimizerConfig, TrainConfig, TrainReport, adversarial_train, evaluate, train
from .estimator import EvolvedCNNClassifier
from .evolution import EvolutionConfig, Individual, init_population, mutate, run, select
from .fitness import FitnessReport, WarmupController, detect_ill_fitted, evaluate_individual, f_beta, update_warmup
from .genome import Genome, ModuleSpec, decode_genome, random_genome, repair_dead_ends, seed_genome, validate
from .grammar import Grammar, InnerGenotype, decode, derive, load_grammar, parse_grammar, realize_parameter
from .netbuilder import LayerDescriptor, Network, NetworkPlan, build, expand_block, infer_shapes

__version__ = "0.1.0"
