"""Finite-difference suite on the smallest model that exercises every component."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import GradCheckReport, finite_diff_check
from .data import SynthConfig, synth_generate
from .model import Model, ModelConfig, init_params, objective
from .trainer import sample_triples

MINIMAL = dict(users=6, items=8, behaviors=2, num_slots=2, dim=4, layers=1)


@dataclass
class MinimalSetup:
    model: Model
    params: dict[str, np.ndarray]
    triples: np.ndarray
    l2_lambda: float


def minimal_setup(seed: int = 0, l2_lambda: float = 1e-4, **model_overrides) -> MinimalSetup:
    """Two behaviors, two slots, 6 users, 8 items, d=4 and one propagation layer."""
    ds = synth_generate(SynthConfig(users=MINIMAL["users"], items=MINIMAL["items"],
                                    behaviors=MINIMAL["behaviors"], num_slots=MINIMAL["num_slots"],
                                    clusters=2, seed=seed, target_mean=0.5, view_ratio=2.0))
    kwargs = dict(num_slots=MINIMAL["num_slots"], granularity=float(ds.granularity),
                  dim=MINIMAL["dim"], layers=MINIMAL["layers"], time_scale=1.0)
    kwargs.update(model_overrides)
    cfg = ModelConfig(ds.num_users, ds.num_items, ds.catalog.size, ds.catalog.target, **kwargs)
    rng = np.random.default_rng(seed)
    params = init_params(cfg, rng)
    triples = sample_triples(ds.events, cfg.target, cfg.num_items, rng)
    return MinimalSetup(Model(cfg, ds.events), params, triples, l2_lambda)


def run_suite(seed: int = 0, eps: float = 1e-5, tol: float = 1e-4) -> dict[str, GradCheckReport]:
    """Check the joint loss and each of its components against central differences.

    The contrastive weights are set to 1 here so their gradients are not
    scaled down below the comparison floor.
    """
    setup = minimal_setup(seed, alpha=1.0, beta=1.0)
    m, trip, lam = setup.model, setup.triples, setup.l2_lambda
    builders = {
        "joint": lambda lv: objective(m, lv, trip, lam).total,
        "bpr": lambda lv: objective(m, lv, trip, lam, contrastive=False).total,
        "cl_long": lambda lv: objective(m, lv, trip, 0.0).long_cl,
        "cl_short": lambda lv: objective(m, lv, trip, 0.0).short_cl,
    }
    return {name: finite_diff_check(fn, setup.params, eps=eps, tol=tol)
            for name, fn in builders.items()}
