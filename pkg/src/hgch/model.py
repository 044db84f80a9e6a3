"""HGCH forward computation on the autodiff tape.

Embeddings live in the tangent space at the origin.  Each layer maps
them into one Poincare ball per relation ("subspace"), aggregates every
node with its neighbours there, maps back, and fuses the per-subspace
results with per-node weights.  The final representation is the sum of
the layer outputs.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import geometry as geo
from ._validation import (
    check_choice,
    check_curvature,
    check_non_negative,
    check_positive_int,
    check_random_state,
)
from .autodiff import Node, Tape
from .graph import INTERACTION, Hcg

logger = logging.getLogger(__name__)

FUSIONS = ("none", "gate", "prior", "gate_prior")
AGGREGATIONS = ("gyromidpoint", "tangent")
INITS = ("power_law", "uniform")

__all__ = [
    "GraphContext",
    "ModelConfig",
    "ModelParams",
    "aggregate_gyro",
    "aggregate_tangent",
    "forward",
    "forward_values",
    "fusion_weights",
    "init_embeddings",
    "load_checkpoint",
    "node_frequencies",
    "parameter_count",
    "save_checkpoint",
    "score",
]


@dataclass
class ModelConfig:
    dim: int = 64
    n_layers: int = 3
    curvature: float = 1.0
    curvatures: dict = field(default_factory=dict)  # per-subspace overrides
    score_curvature: float = 1.0
    init_scale: float = 0.1
    power: float = 1.1
    fusion: str = "gate_prior"
    aggregation: str = "gyromidpoint"
    init: str = "power_law"
    include_layer0: bool = False

    def validate(self) -> "ModelConfig":
        check_positive_int(self.dim, "dim")
        check_positive_int(self.n_layers, "n_layers")
        check_curvature(self.curvature)
        check_curvature(self.score_curvature)
        for k in self.curvatures.values():
            check_curvature(k)
        if not self.init_scale > 0:
            raise ValueError(f"init_scale must be positive, got {self.init_scale}")
        check_non_negative(self.power, "power")
        check_choice(self.fusion, "fusion", FUSIONS)
        check_choice(self.aggregation, "aggregation", AGGREGATIONS)
        check_choice(self.init, "init", INITS)
        return self

    def k(self, subspace: str) -> float:
        return float(self.curvatures.get(subspace, self.curvature))

    @property
    def uses_gates(self) -> bool:
        return self.fusion in ("gate", "gate_prior")


@dataclass
class ModelParams:
    embeddings: np.ndarray  # (n_nodes, dim), tangent space at the origin
    gates: dict = field(default_factory=dict)  # (node_type, subspace) -> (dim, dim)

    def as_leaves(self) -> dict[str, np.ndarray]:
        out = {"E": self.embeddings}
        for (t, s), w in self.gates.items():
            out[_gate_name(t, s)] = w
        return out

    @classmethod
    def from_leaves(cls, leaves: dict) -> "ModelParams":
        gates = {}
        for name, w in leaves.items():
            if name != "E":
                gates[_parse_gate_name(name)] = w
        return cls(leaves["E"], gates)

    def copy(self) -> "ModelParams":
        return ModelParams(self.embeddings.copy(), {k: v.copy() for k, v in self.gates.items()})


def _gate_name(t: str, s: str) -> str:
    return f"W[{t}|{s}]"


def _parse_gate_name(name: str) -> tuple[str, str]:
    t, s = name[2:-1].split("|")
    return t, s


class GraphContext:
    """Constant per-graph tensors the forward pass needs.

    With ``fusion="none"`` only the interaction subspace takes part, so
    side relations are ignored altogether.
    """

    def __init__(self, hcg: Hcg, config: ModelConfig):
        self.hcg = hcg
        self.n_nodes = hcg.n_nodes
        self.type_names = hcg.type_names
        self.node_type = hcg.node_type
        if config.fusion == "none":
            self.subspaces = [INTERACTION]
        else:
            self.subspaces = list(hcg.relations)
        eye = sp.identity(self.n_nodes, format="csr")
        self.midpoint_weights = {}
        self.mean_weights = {}
        degs = []
        for s in self.subspaces:
            a_self = (hcg.adjacency(s) + eye).tocsr()
            self.midpoint_weights[s] = a_self
            rows = np.asarray(a_self.sum(axis=1)).ravel()
            self.mean_weights[s] = sp.diags(1.0 / rows) @ a_self
            degs.append(hcg.degree(s))
        # (n_nodes, n_subspaces) neighbour counts, self excluded
        self.degrees = np.stack(degs, axis=1).astype(np.float64)
        member = self.degrees > 0
        is_ui = np.isin(self.node_type, [0, 1])
        member[:, 0] |= is_ui
        isolated = ~member.any(axis=1)
        member[isolated, 0] = True
        self.membership = member
        prior = self.degrees.copy()
        prior[prior.sum(axis=1) == 0, 0] = 1.0
        self.prior_numerators = prior
        self.gate_pairs = []
        if config.uses_gates:
            for j, s in enumerate(self.subspaces):
                for ti, t in enumerate(self.type_names):
                    if np.any(member[self.node_type == ti, j]):
                        self.gate_pairs.append((t, s))
        self.type_masks = {
            t: (self.node_type == ti).astype(np.float64)[:, None] for ti, t in enumerate(self.type_names)
        }


def node_frequencies(hcg: Hcg, relations=None) -> np.ndarray:
    """Per-node edge count over ``relations`` (all by default), clamped to >= 1."""
    relations = list(hcg.relations) if relations is None else relations
    freq = sum(hcg.degree(r) for r in relations)
    zero = int(np.sum(freq == 0))
    if zero:
        logger.warning("%d nodes have zero frequency; clamped to 1", zero)
    return np.maximum(freq, 1)


def init_embeddings(config: ModelConfig, frequencies, rng=None, gate_pairs=()) -> ModelParams:
    """Draw initial tangent embeddings and gate matrices.

    ``power_law``: coordinates of node ``n`` ~ ``Uni(-a x_n^-b, a x_n^-b)``
    with ``x_n`` its frequency; ``uniform``: ``Uni(-a, a)``.  Gates use
    Xavier-uniform initialisation.
    """
    rng = check_random_state(rng)
    freq = np.asarray(frequencies, dtype=np.float64)
    if np.any(freq <= 0):
        logger.warning("non-positive frequencies clamped to 1")
        freq = np.maximum(freq, 1.0)
    d = config.dim
    if config.init == "power_law":
        half = config.init_scale * freq ** (-config.power)
    else:
        half = np.full(len(freq), config.init_scale)
    emb = rng.uniform(-1.0, 1.0, size=(len(freq), d)) * half[:, None]
    bound = np.sqrt(6.0 / (d + d))
    gates = {pair: rng.uniform(-bound, bound, size=(d, d)) for pair in gate_pairs}
    return ModelParams(emb, gates)


def parameter_count(params: ModelParams) -> int:
    return int(params.embeddings.size + sum(w.size for w in params.gates.values()))


# -- building blocks ------------------------------------------------------------


def aggregate_gyro(tape: Tape, e: Node, weights, k: float) -> Node:
    """Gyromidpoint of each node's neighbourhood (self included), in tangent space."""
    h = tape.record("exp_o", [e], k=k)
    m = tape.gyromidpoint(h, weights, k=k)
    return tape.record("log_o", [m], k=k)


def aggregate_tangent(tape: Tape, e: Node, mean_weights) -> Node:
    """Arithmetic mean over each node's neighbourhood (self included)."""
    return tape.record("weighted_sum", [e], weights=mean_weights)


def fusion_weights(tape: Tape, e0: Node, params: dict, ctx: GraphContext, mode: str) -> list:
    """Per-subspace fusion weights, each broadcastable to ``(n_nodes, dim)``.

    Returns one entry per subspace in ``ctx.subspaces``; for ``"none"``
    that is a single weight of one.
    """
    if mode == "none" or len(ctx.subspaces) == 1:
        return [1.0] * len(ctx.subspaces)
    if mode == "prior":
        w = ctx.prior_numerators / ctx.prior_numerators.sum(axis=1, keepdims=True)
        return [w[:, j:j + 1] for j in range(len(ctx.subspaces))]
    # the gate reads the direction of the initial embedding
    norm = tape.record("norm", [e0])
    zero = norm.value == 0
    if np.any(zero):
        logger.warning("%d nodes with zero initial embedding feed a zero gate input", int(zero.sum()))
    direction = tape.record("div", [e0, tape.record("sum", [norm, zero.astype(np.float64)])])
    numerators = []
    for j, s in enumerate(ctx.subspaces):
        logits = []
        for t in ctx.type_names:
            if (t, s) in ctx.gate_pairs:
                z = tape.record("matvec", [direction, params[_gate_name(t, s)]])
                logits.append(tape.record("mul", [z, ctx.type_masks[t]]))
        gate = tape.record("sigmoid", [tape.record("sum", logits) if len(logits) > 1 else logits[0]])
        if mode == "gate":
            scale = ctx.membership[:, j:j + 1].astype(np.float64)
        else:
            scale = ctx.prior_numerators[:, j:j + 1]
        numerators.append(tape.record("mul", [gate, scale]))
    total = tape.record("sum", numerators)
    return [tape.record("div", [num, total]) for num in numerators]


def forward(tape: Tape, leaves: dict, ctx: GraphContext, config: ModelConfig) -> Node:
    """Record the full forward pass; returns final tangent embeddings ``(n_nodes, dim)``."""
    e0 = leaves["E"]
    gates = fusion_weights(tape, e0, leaves, ctx, config.fusion)
    e_prev = e0
    layers = []
    for _ in range(config.n_layers):
        parts = []
        for s in ctx.subspaces:
            if config.aggregation == "gyromidpoint":
                parts.append(aggregate_gyro(tape, e_prev, ctx.midpoint_weights[s], config.k(s)))
            else:
                parts.append(aggregate_tangent(tape, e_prev, ctx.mean_weights[s]))
        if len(parts) == 1:
            e_prev = parts[0]
        else:
            e_prev = tape.record("sum", [tape.record("mul", [g, p]) for g, p in zip(gates, parts)])
        layers.append(e_prev)
    if config.include_layer0:
        layers.insert(0, e0)
    return layers[0] if len(layers) == 1 else tape.record("sum", layers)


def forward_values(params: ModelParams, ctx: GraphContext, config: ModelConfig) -> np.ndarray:
    tape = Tape()
    leaves = {name: tape.leaf(name, v) for name, v in params.as_leaves().items()}
    return forward(tape, leaves, ctx, config).value


def score(tape: Tape, e_i: Node, e_j: Node, k: float = 1.0) -> Node:
    """Row-wise ``-d(exp(e_i), exp(e_j))^2`` in the scoring ball."""
    h_i = tape.record("exp_o", [e_i], k=k)
    h_j = tape.record("exp_o", [e_j], k=k)
    return -tape.record("sqdist", [h_i, h_j], k=k)


def score_values(e_i, e_j, k: float = 1.0) -> np.ndarray:
    return -geo.sqdist_kernel(geo.exp_o_kernel(np.asarray(e_i, float), k), geo.exp_o_kernel(np.asarray(e_j, float), k), k)


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(path, params: ModelParams, config: ModelConfig, fingerprint: str = "", extra=None) -> None:
    arrays = {"E": params.embeddings}
    gate_index = []
    for i, (pair, w) in enumerate(params.gates.items()):
        arrays[f"gate_{i}"] = w
        gate_index.append(list(pair))
    meta = {
        "config": asdict(config),
        "gates": gate_index,
        "fingerprint": fingerprint,
        "extra": extra or {},
    }
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig, dict]:
    """Returns ``(params, config, meta)``; ``meta`` has the dataset fingerprint."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such checkpoint: {path}")
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        gates = {tuple(pair): data[f"gate_{i}"] for i, pair in enumerate(meta["gates"])}
        params = ModelParams(data["E"], gates)
    return params, ModelConfig(**meta["config"]).validate(), meta
