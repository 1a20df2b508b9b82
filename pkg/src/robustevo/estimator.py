"""scikit-learn style wrapper: ``fit`` runs the evolutionary search, the winner predicts."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted

from .data import Dataset, SplitSpec, split
from .engine import to_tensor
from .evolution import DataBundle, EvolutionConfig, run
from .genome import decode_genome
from .netbuilder import build


def check_images(X, expected_shape=None) -> np.ndarray:
    """Validate an N x H x W x C image batch with values in [0, 1]."""
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_all_finite=True)
    if X.ndim != 4:
        raise ValueError(f"expected images shaped N x H x W x C, got {X.ndim} dimensions")
    if X.min() < 0 or X.max() > 1:
        raise ValueError("pixel values must lie in [0, 1]")
    if expected_shape is not None and tuple(X.shape[1:]) != tuple(expected_shape):
        raise ValueError(f"images have shape {X.shape[1:]}, the fitted network expects {expected_shape}")
    return X


def split_sizes(n: int, fractions) -> tuple:
    """Integer (train, control, fitness) sizes from fractions, using every sample."""
    f = np.asarray(fractions, dtype=float)
    if f.shape != (3,) or (f <= 0).any():
        raise ValueError("split_fractions needs three positive fractions")
    f = f / f.sum()
    ctrl, fit = max(1, int(round(f[1] * n))), max(1, int(round(f[2] * n)))
    if n - ctrl - fit < 1:
        raise ValueError(f"{n} samples are too few to split three ways")
    return (n - ctrl - fit, ctrl, fit)


class EvolvedCNNClassifier(ClassifierMixin, BaseEstimator):
    """Searches an architecture on (X, y) and keeps the final parent network.

    X holds images shaped N x H x W x C in [0, 1].  The data are split into
    evolutionary-train / control / fitness parts internally.
    """

    def __init__(self, variant="desk", lam=4, generations=5, budget_default=300, budget_max=900,
                 budget_increment=300, epsilon="8/255", tau=0.80, beta=4.0, seed_mode="seeded",
                 augment=False, split_fractions=(0.8, 0.1, 0.1), random_state=0, n_jobs=1, out_dir=None,
                 verbose=False):
        self.variant = variant
        self.lam = lam
        self.generations = generations
        self.budget_default = budget_default
        self.budget_max = budget_max
        self.budget_increment = budget_increment
        self.epsilon = epsilon
        self.tau = tau
        self.beta = beta
        self.seed_mode = seed_mode
        self.augment = augment
        self.split_fractions = split_fractions
        self.random_state = random_state
        self.n_jobs = n_jobs
        self.out_dir = out_dir
        self.verbose = verbose

    def _config(self) -> EvolutionConfig:
        seed = self.random_state if isinstance(self.random_state, (int, np.integer)) else 0
        return EvolutionConfig(lam=self.lam, generations=self.generations, budget_default=self.budget_default,
                               budget_max=self.budget_max, budget_increment=self.budget_increment,
                               epsilon=str(self.epsilon), tau=self.tau, beta=self.beta, seed_mode=self.seed_mode,
                               rng_seed=int(seed), variant=self.variant, augment=self.augment)

    def fit(self, X, y):
        X = check_images(X)
        check_classification_targets(y)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError("X and y have different lengths")
        self.label_encoder_ = LabelEncoder().fit(y)
        self.classes_ = self.label_encoder_.classes_
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        ds = Dataset(X, self.label_encoder_.transform(y), len(self.classes_))
        cfg = self._config()
        bundle = DataBundle(*split(ds, SplitSpec(split_sizes(len(ds), self.split_fractions), cfg.rng_seed)))
        state = run(cfg, bundle, self.out_dir, jobs=self.n_jobs, log=print if self.verbose else None)
        parent = state.parent
        if parent.state is None:
            raise RuntimeError(f"no viable network found (best individual: {parent.fitness.ill_fitted})")
        plan = decode_genome(parent.genome, cfg.load_grammar(), ds.shape)
        net = build(plan, ds.n_classes)
        net.load_state_dict(parent.state)
        net.eval()
        self.network_ = net
        self.genome_ = parent.genome
        self.fitness_ = parent.fitness
        self.run_state_ = state
        self.input_shape_ = ds.shape
        self.n_features_in_ = int(np.prod(ds.shape))
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "network_")
        X = check_images(X, self.input_shape_)
        x = to_tensor(X)
        with torch.no_grad():
            probs = torch.cat([self.network_.probabilities(x[i:i + 256]) for i in range(0, len(x), 256)])
        return probs.numpy().astype(np.float64)

    def predict(self, X):
        check_is_fitted(self, "network_")
        return self.classes_[self.predict_proba(X).argmax(axis=1)]
