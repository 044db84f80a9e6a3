"""Gradient check of the full HGCH loss on a six-node toy graph."""

from __future__ import annotations

import numpy as np

from .autodiff import GradCheckReport, Tape, grad_check
from .graph import INTERACTION
from .model import GraphContext, ModelConfig, init_embeddings, node_frequencies
from .synthetic import toy_hcg
from .training import TrainConfig, _PositiveIndex, _side_relations, build_loss

KINK_EXCLUSION = 1e-3
TOLERANCE = {"float64": 1e-4, "float32": 1e-2}


def toy_loss_tape(model_config: ModelConfig, train_config: TrainConfig, seed: int = 0, dtype="float64", hcg=None):
    """Record ``L_CF + alpha L_SI`` on a small graph with random parameters.

    ``hcg`` defaults to :func:`~hgch.synthetic.toy_hcg`.  Returns
    ``(tape, loss_node)``; the whole interaction set forms one batch and
    every side edge contributes one triplet.
    """
    hcg = toy_hcg() if hcg is None else hcg
    ctx = GraphContext(hcg, model_config)
    rng = np.random.default_rng(seed)
    params = init_embeddings(model_config, node_frequencies(hcg, ctx.subspaces), rng, ctx.gate_pairs)
    tape = Tape(dtype=dtype)
    leaves = {name: tape.leaf(name, v) for name, v in params.as_leaves().items()}
    edges = hcg.relations[INTERACTION].edges
    batch = {"users": edges[:, 0], "items": edges[:, 1], "index": _PositiveIndex(edges[:, 0], edges[:, 1], hcg.n_items)}
    sides = [(rel, rel.edges) for rel in _side_relations(hcg, ctx)]
    loss, _ = build_loss(tape, leaves, ctx, model_config, train_config, batch, rng, sides)
    return tape, loss


def toy_grad_check(
    model_config: ModelConfig | None = None,
    train_config: TrainConfig | None = None,
    seed: int = 0,
    dtype: str = "float64",
    h: float = 1e-6,
    tol: float | None = None,
    max_tries: int = 50,
    hcg=None,
) -> GradCheckReport:
    """Grad-check the toy loss, redrawing parameters that sit near a hinge kink.

    Seeds ``seed, seed + 1, ...`` are tried until every hinge input is at
    least ``1e-3`` away from zero and the loss is positive.  float32 tapes
    are compared against a float64 finite-difference reference at the
    looser tolerance 1e-2.
    """
    model_config = model_config or ModelConfig(dim=4, n_layers=3, init_scale=0.5)
    train_config = train_config or TrainConfig(margin=0.5, alpha=0.5, n_neg=2)
    tol = TOLERANCE[dtype] if tol is None else tol
    for s in range(seed, seed + max_tries):
        tape, loss = toy_loss_tape(model_config, train_config, s, dtype, hcg)
        # a zero loss has an all-zero gradient and would pass vacuously
        if tape.hinge_margin() >= KINK_EXCLUSION and float(loss.value) > 0:
            return grad_check(tape, loss, h=h, tol=tol)
    raise RuntimeError(f"no seed in [{seed}, {seed + max_tries}) gives a positive loss away from the hinge kinks")
