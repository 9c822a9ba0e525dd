"""Deterministic surrogate objectives f: SMILES -> [0, 1].

The default "toy_mpo" scores a molecule by how closely three cheap
structural features (token length, ring count, heteroatom fraction) match
configured targets, one Gaussian kernel per feature, combined as a
weighted geometric mean. Syntactically invalid strings score 0 by
convention. Pure functions of the input string, so they double as
dataset labelers and as the oracle for re-scoring optimization output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from .smiles import Vocabulary, detokenize, syntax_features, validate
from .training import Dataset


@dataclass(frozen=True)
class ObjectiveSpec:
    """Closed form: geometric mean of per-feature Gaussian kernels.

    score = prod_i exp(-(f_i - target_i)^2 / (2 sigma_i^2))^(w_i / sum w)
    over features (token length, ring pairs, heteroatom fraction).
    """

    name: str = "toy_mpo"
    target_length: float = 19.0
    target_rings: float = 2.0
    target_hetero: float = 0.5
    sigma_length: float = 4.0
    sigma_rings: float = 0.8
    sigma_hetero: float = 0.1
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def params_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = list(self.weights)
        return d


def _kernel(value: float, target: float, sigma: float) -> float:
    return math.exp(-((value - target) ** 2) / (2.0 * sigma * sigma))


def evaluate(obj: ObjectiveSpec, s: str) -> float:
    """Score a SMILES string in [0, 1]; invalid strings score 0."""
    if not validate(s):
        return 0.0
    feats = syntax_features(s)
    scores = [
        _kernel(feats.n_tokens, obj.target_length, obj.sigma_length),
        _kernel(feats.ring_pairs, obj.target_rings, obj.sigma_rings),
        _kernel(feats.hetero_fraction, obj.target_hetero, obj.sigma_hetero),
    ]
    total_w = sum(obj.weights)
    log_score = sum(w * math.log(max(s_, 1e-300)) for w, s_ in zip(obj.weights, scores))
    return math.exp(log_score / total_w)


def label_dataset(dataset: Dataset, obj: ObjectiveSpec, vocab: Vocabulary) -> Dataset:
    """Attach objective values as targets to an unsupervised dataset."""
    if dataset.supervised:
        raise ValueError("dataset already has targets")
    ys = np.array([evaluate(obj, detokenize(seq, vocab)) for seq in dataset.sequences])
    return Dataset(dataset.sequences, ys, target_range=dataset.target_range)


def make_objective(name: str, params: str = "") -> ObjectiveSpec:
    """Objective from a CLI-style spec: name plus "key=value,key=value"."""
    if name != "toy_mpo":
        raise ValueError(f"unknown objective {name!r} (available: toy_mpo)")
    kwargs = {}
    if params:
        for part in params.split(","):
            key, _, value = part.partition("=")
            if not _:
                raise ValueError(f"bad objective parameter {part!r} (want key=value)")
            kwargs[key.strip()] = float(value)
    return ObjectiveSpec(name=name, **kwargs)
