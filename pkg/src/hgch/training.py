"""Margin-ranking training with hyperbolic user-specific negative sampling."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from ._validation import check_choice, check_non_negative, check_positive_int
from .autodiff import Tape
from .graph import INTERACTION, SplitDataset
from .metrics import evaluate_rankings, top_k_items
from .model import (
    GraphContext,
    ModelConfig,
    ModelParams,
    forward,
    forward_values,
    init_embeddings,
    node_frequencies,
    score,
)

logger = logging.getLogger(__name__)

__all__ = [
    "NonFiniteLossError",
    "SamplingExhaustedError",
    "TrainConfig",
    "TrainResult",
    "build_loss",
    "cf_loss",
    "sample_negative",
    "sample_negatives",
    "si_loss",
    "train",
]


class SamplingExhaustedError(RuntimeError):
    """A user has interacted with every item, so no negative exists."""


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    margin: float = 0.1
    alpha: float = 0.01
    n_neg: int = 20
    sampling: str = "hyperbolic"
    lr: float = 1e-3
    batch_size: int = 1024
    max_epochs: int = 1000
    patience: int = 100
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_k: int = 10
    side_margins: dict = field(default_factory=dict)

    def validate(self) -> "TrainConfig":
        check_non_negative(self.margin, "margin")
        check_non_negative(self.alpha, "alpha")
        check_positive_int(self.n_neg, "n_neg")
        check_choice(self.sampling, "sampling", ("hyperbolic", "uniform"))
        check_non_negative(self.lr, "lr")
        check_positive_int(self.batch_size, "batch_size")
        check_positive_int(self.max_epochs, "max_epochs")
        check_positive_int(self.patience, "patience")
        check_positive_int(self.eval_k, "eval_k")
        return self

    @property
    def candidates(self) -> int:
        return self.n_neg if self.sampling == "hyperbolic" else 1


# -- losses ---------------------------------------------------------------------


def cf_loss(pos_score, neg_score, margin: float):
    """``max(neg - pos + margin, 0)``, element-wise on plain numbers or arrays."""
    return np.maximum(np.asarray(neg_score) - np.asarray(pos_score) + margin, 0.0)


def si_loss(batches, margin: float = 0.1) -> float:
    """Sum over side relations of the mean margin loss.

    ``batches`` maps relation name to a ``(pos_scores, neg_scores)`` pair;
    relations without triplets contribute 0.  ``margin`` may be a dict of
    per-relation margins.
    """
    total = 0.0
    for name, (pos, neg) in batches.items():
        if len(pos) == 0:
            continue
        m = margin.get(name, 0.1) if isinstance(margin, dict) else margin
        total += float(np.mean(cf_loss(pos, neg, m)))
    return total


def _tape_margin_loss(tape: Tape, final, anchors, pos, neg, margin: float, k: float):
    a = tape.record("gather", [final], index=anchors)
    s_pos = score(tape, a, tape.record("gather", [final], index=pos), k)
    s_neg = score(tape, a, tape.record("gather", [final], index=neg), k)
    h = tape.record("hinge", [s_neg - s_pos + margin])
    return tape.record("weighted_sum", [h], weights=np.full(len(anchors), 1.0 / len(anchors)))


# -- negative sampling --------------------------------------------------------------


class _PositiveIndex:
    """Membership test for (anchor, node) pairs via sorted integer codes."""

    def __init__(self, anchors, nodes, n_cols: int):
        self.n_cols = n_cols
        self.codes = np.unique(np.asarray(anchors, np.int64) * n_cols + np.asarray(nodes, np.int64))

    def contains(self, anchors, nodes) -> np.ndarray:
        if len(self.codes) == 0:
            return np.zeros(np.shape(nodes), dtype=bool)
        q = np.asarray(anchors, np.int64) * self.n_cols + np.asarray(nodes, np.int64)
        pos = np.minimum(np.searchsorted(self.codes, q), len(self.codes) - 1)
        return self.codes[pos] == q

    def count(self, anchors) -> np.ndarray:
        lo = np.searchsorted(self.codes, np.asarray(anchors, np.int64) * self.n_cols)
        hi = np.searchsorted(self.codes, (np.asarray(anchors, np.int64) + 1) * self.n_cols)
        return hi - lo


def _draw_uniform(anchors, index: _PositiveIndex, pool: np.ndarray, n: int, rng) -> np.ndarray:
    """``n`` pool positions per anchor, none of them a positive of that anchor."""
    draws = rng.integers(0, len(pool), size=(len(anchors), n))
    a = np.repeat(np.asarray(anchors)[:, None], n, axis=1)
    bad = index.contains(a, pool[draws])
    while bad.any():
        draws[bad] = rng.integers(0, len(pool), size=int(bad.sum()))
        bad[bad] = index.contains(a[bad], pool[draws[bad]])
    return pool[draws]


def sample_negatives(
    users,
    positives: _PositiveIndex,
    n_items: int,
    n_neg: int,
    rng,
    user_ball=None,
    item_ball=None,
    k: float = 1.0,
) -> np.ndarray:
    """Batch version of :func:`sample_negative`.

    ``user_ball`` / ``item_ball`` are scoring-ball coordinates for every
    user / item; with ``n_neg == 1`` they are not needed.
    """
    users = np.asarray(users, dtype=np.int64)
    full = positives.count(users) >= n_items
    if full.any():
        raise SamplingExhaustedError(f"user {int(users[full][0])} has interacted with every item")
    cands = _draw_uniform(users, positives, np.arange(n_items), n_neg, rng)
    if n_neg == 1:
        return cands[:, 0]
    # distance is increasing in the arcosh argument, so rank by that
    hu = user_ball[users]
    hi = item_ball[cands]
    su = np.sum(hu * hu, axis=1)[:, None]
    si = np.sum(hi * hi, axis=2)
    q = np.maximum(su + si - 2.0 * np.einsum("bd,bnd->bn", hu, hi), 0.0)
    z = q / ((k - su) * (k - si))
    # argmin keeps the first minimum, matching a strict "<" scan
    return cands[np.arange(len(users)), np.argmin(z, axis=1)]


def sample_negative(user: int, positives, user_emb, item_emb, n_neg: int, k: float = 1.0, rng=None) -> int:
    """Hyperbolic user-specific negative sampling for a single user.

    Draws ``n_neg`` uniform candidates among items the user has not
    interacted with and returns the one closest to the user in the
    ball of parameter ``k``.  ``user_emb`` is the user's tangent
    embedding and ``item_emb`` the tangent embeddings of all items.
    """
    rng = np.random.default_rng(rng)
    item_emb = np.asarray(item_emb, dtype=np.float64)
    positives = np.asarray(list(positives), dtype=np.int64)
    index = _PositiveIndex(np.zeros(len(positives), np.int64), positives, len(item_emb))
    user_ball = geo.exp_o_kernel(np.atleast_2d(np.asarray(user_emb, float)), k)
    item_ball = geo.exp_o_kernel(item_emb, k)
    return int(sample_negatives([0], index, len(item_emb), n_neg, rng, user_ball, item_ball, k)[0])


# -- side relations ------------------------------------------------------------------


@dataclass
class _SideRelation:
    name: str
    edges: np.ndarray  # global (anchor, positive) in canonical orientation
    symmetric: bool
    pool: np.ndarray  # global nodes negatives are drawn from
    index: _PositiveIndex
    n_nodes: int


def _side_relations(hcg, ctx: GraphContext) -> list[_SideRelation]:
    out = []
    n = hcg.n_nodes
    for name in ctx.subspaces:
        if name == INTERACTION:
            continue
        rel = hcg.relations[name]
        e = hcg.global_edges(name)
        if len(e) == 0:
            continue
        if not rel.symmetric and rel.dst_type in ("user", "item") and rel.src_type not in ("user", "item"):
            e = e[:, ::-1]  # the user/item endpoint anchors
        if rel.symmetric:
            both = np.concatenate([e, e[:, ::-1]])
            pool = np.unique(e)
        else:
            both = e
            pool = np.unique(e[:, 1])
        out.append(_SideRelation(name, e, rel.symmetric, pool, _PositiveIndex(both[:, 0], both[:, 1], n), n))
    return out


def _side_triplets(rel: _SideRelation, edges: np.ndarray, rng):
    if rel.symmetric:
        flip = rng.random(len(edges)) < 0.5
        edges = np.where(flip[:, None], edges[:, ::-1], edges)
    anchors, pos = edges[:, 0], edges[:, 1]
    # anchors linked to the whole pool have no negative; drop them
    ok = rel.index.count(anchors) < len(rel.pool)
    anchors, pos = anchors[ok], pos[ok]
    neg = _draw_uniform(anchors, rel.index, rel.pool, 1, rng)[:, 0] if len(anchors) else anchors
    return anchors, pos, neg


# -- optimisation ----------------------------------------------------------------------


class Adam:
    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            p -= self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)


@dataclass
class TrainResult:
    params: ModelParams
    best_epoch: int
    best_score: float
    history: list
    context: GraphContext


def build_loss(tape, leaves, ctx, model_config: ModelConfig, train_config: TrainConfig, batch, rng, sides=()):
    """Record ``L_CF + alpha * L_SI`` for one batch of (user, item) pairs.

    Negatives are drawn from the start-of-step forward values before the
    loss nodes are recorded.  Returns ``(loss_node, final_node)``.
    """
    hcg = ctx.hcg
    k = model_config.score_curvature
    final = forward(tape, leaves, ctx, model_config)
    users, items = batch["users"], batch["items"]
    if train_config.candidates > 1:
        ball = geo.exp_o_kernel(final.value, k)
        u_ball = ball[: hcg.n_users]
        i_ball = ball[hcg.n_users: hcg.n_users + hcg.n_items]
    else:
        u_ball = i_ball = None
    neg = sample_negatives(users, batch["index"], hcg.n_items, train_config.candidates, rng, u_ball, i_ball, k)
    off = hcg.offset("item")
    loss = _tape_margin_loss(tape, final, users, items + off, neg + off, train_config.margin, k)
    side_terms = []
    for rel, chunk in sides:
        anchors, pos, negs = _side_triplets(rel, chunk, rng)
        if len(anchors) == 0:
            continue
        m = train_config.side_margins.get(rel.name, train_config.margin)
        side_terms.append(_tape_margin_loss(tape, final, anchors, pos, negs, m, k))
    if side_terms and train_config.alpha > 0:
        si = side_terms[0] if len(side_terms) == 1 else tape.record("sum", side_terms)
        loss = loss + train_config.alpha * si
    return loss, final


def _validate_split(data: SplitDataset) -> None:
    if len(data.train) == 0:
        raise ValueError("the training split is empty")
    for name in ("train", "valid", "test"):
        arr = getattr(data, name)
        if len(arr) and (arr[:, 0].max() >= data.n_users or arr[:, 1].max() >= data.n_items):
            raise ValueError(f"{name} split refers to unknown users or items")


def evaluate_split(final: np.ndarray, data: SplitDataset, which: str, ks=(10, 20), k: float = 1.0, head=None):
    """Full-ranking report for the ``valid`` or ``test`` interactions.

    Validation excludes the optimised train positives; test additionally
    excludes the validation positives.
    """
    n_u, n_i = data.n_users, data.n_items
    users_emb = final[:n_u]
    items_emb = final[data.hcg.offset("item"): data.hcg.offset("item") + n_i]
    exclude = data.positives("train" if which == "valid" else "seen")
    topk = top_k_items(users_emb, items_emb, exclude, max(ks), k)
    return evaluate_rankings(topk, data.positives(which), ks, head=head, n_items=n_i)


def train(
    data: SplitDataset,
    model_config: ModelConfig | None = None,
    train_config: TrainConfig | None = None,
    log=None,
    validate: bool = True,
) -> TrainResult:
    """Fit HGCH on ``data.train``; returns the best-validation parameters.

    ``log`` is an optional writable text stream receiving one JSON line
    per epoch.  With ``validate=False`` (or an empty validation split)
    the last epoch's parameters are returned.
    """
    model_config = (model_config or ModelConfig()).validate()
    train_config = (train_config or TrainConfig()).validate()
    _validate_split(data)
    rng = np.random.default_rng(train_config.seed)
    hcg = data.train_graph()
    ctx = GraphContext(hcg, model_config)
    freq = node_frequencies(hcg, ctx.subspaces)
    params = init_embeddings(model_config, freq, rng, ctx.gate_pairs)
    leaves = params.as_leaves()
    opt = Adam(leaves, train_config.lr, train_config.beta1, train_config.beta2, train_config.eps)
    index = _PositiveIndex(data.train[:, 0], data.train[:, 1], data.n_items)
    sides = _side_relations(hcg, ctx) if train_config.alpha > 0 else []
    validate = validate and len(data.valid) > 0

    n_batches = math.ceil(len(data.train) / train_config.batch_size)
    best = (-math.inf, 0, params.copy())
    history = []
    for epoch in range(1, train_config.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(data.train))
        side_chunks = [
            (rel, np.array_split(rel.edges[rng.permutation(len(rel.edges))], n_batches)) for rel in sides
        ]
        total, seen = 0.0, 0
        for b, idx in enumerate(np.array_split(order, n_batches)):
            batch = {"users": data.train[idx, 0], "items": data.train[idx, 1], "index": index}
            tape = Tape()
            nodes = {name: tape.leaf(name, v) for name, v in leaves.items()}
            loss, _ = build_loss(
                tape, nodes, ctx, model_config, train_config, batch, rng,
                [(rel, chunks[b]) for rel, chunks in side_chunks],
            )
            value = float(loss.value)
            if not math.isfinite(value):
                raise NonFiniteLossError(
                    f"non-finite loss at epoch {epoch}, batch {b}: users {batch['users'][:10].tolist()}"
                )
            grads = tape.backward(loss)
            opt.step(leaves, grads)
            total += value * len(idx)
            seen += len(idx)
        params = ModelParams.from_leaves(leaves)
        entry = {"epoch": epoch, "train_loss": total / seen}
        if validate:
            final = forward_values(params, ctx, model_config)
            rep = evaluate_split(final, data, "valid", (train_config.eval_k,), model_config.score_curvature)
            ndcg = rep.get("ndcg", train_config.eval_k)
            entry[f"val_recall@{train_config.eval_k}"] = rep.get("recall", train_config.eval_k)
            entry[f"val_ndcg@{train_config.eval_k}"] = ndcg
            if ndcg > best[0]:
                best = (ndcg, epoch, params.copy())
        entry["wall_ms"] = round((time.perf_counter() - t0) * 1000.0, 3)
        history.append(entry)
        if log is not None:
            log.write(json.dumps(entry) + "\n")
            log.flush()
        logger.info("epoch %d loss %.5f", epoch, entry["train_loss"])
        if validate and epoch - best[1] >= train_config.patience:
            break
    if not validate:
        best = (math.nan, len(history), ModelParams.from_leaves(leaves).copy())
    return TrainResult(best[2], best[1], best[0], history, ctx)
