"""Synthetic heterogeneous graphs for smoke tests and trend checks."""

from __future__ import annotations

import numpy as np

from .graph import INTERACTION, Hcg, Relation, k_core


def power_law_hcg(
    n_users: int = 500,
    n_items: int = 800,
    exponent: float = 1.1,
    n_clusters: int = 10,
    min_degree: int = 5,
    max_degree: int = 60,
    affinity: float = 10.0,
    side_per_node: int = 3,
    side_noise: float = 0.1,
    seed=0,
) -> Hcg:
    """Clustered user-item graph with Zipf item popularity plus side relations.

    Items are drawn with probability proportional to ``rank^-exponent``
    times ``affinity`` when user and item share a latent cluster.  The
    ``friend`` (user-user) and ``neighbor`` (item-item) relations mostly
    link nodes of the same cluster, with a ``side_noise`` fraction of
    random edges.  Items that end up without interactions are dropped.
    """
    rng = np.random.default_rng(seed)
    pop = np.arange(1, n_items + 1, dtype=np.float64) ** (-exponent)
    rng.shuffle(pop)
    user_cluster = rng.integers(0, n_clusters, n_users)
    item_cluster = rng.integers(0, n_clusters, n_items)
    # Pareto-tailed user activity
    deg = np.floor(min_degree * (1.0 - rng.random(n_users)) ** (-1.0 / exponent)).astype(int)
    deg = np.clip(deg, min_degree, max_degree)
    pairs = []
    for u in range(n_users):
        w = pop * np.where(item_cluster == user_cluster[u], affinity, 1.0)
        items = rng.choice(n_items, size=deg[u], replace=False, p=w / w.sum())
        pairs.extend((u, i) for i in items)

    def side(clusters):
        n = len(clusters)
        by_cluster = [np.flatnonzero(clusters == c) for c in range(n_clusters)]
        edges = []
        for a in range(n):
            for _ in range(side_per_node):
                if rng.random() < side_noise:
                    b = int(rng.integers(0, n))
                else:
                    members = by_cluster[clusters[a]]
                    b = int(members[rng.integers(0, len(members))])
                if a != b:
                    edges.append((a, b))
        return np.array(edges, dtype=np.int64).reshape(-1, 2)

    ids = {"user": np.array([f"u{i}" for i in range(n_users)], dtype=object),
           "item": np.array([f"i{i}" for i in range(n_items)], dtype=object)}
    relations = {
        INTERACTION: Relation(INTERACTION, "user", "item", np.array(pairs)),
        "friend": Relation("friend", "user", "user", side(user_cluster)),
        "neighbor": Relation("neighbor", "item", "item", side(item_cluster)),
    }
    return k_core(Hcg(ids, relations), 1, 1)


def toy_hcg() -> Hcg:
    """Six nodes: three users, three items, one user-user and one item-item edge."""
    ids = {"user": np.array(["u0", "u1", "u2"], dtype=object),
           "item": np.array(["i0", "i1", "i2"], dtype=object)}
    relations = {
        INTERACTION: Relation(INTERACTION, "user", "item",
                              np.array([[0, 0], [0, 1], [1, 1], [1, 2], [2, 2], [2, 0]])),
        "friend": Relation("friend", "user", "user", np.array([[0, 1]])),
        "neighbor": Relation("neighbor", "item", "item", np.array([[1, 2]])),
    }
    return Hcg(ids, relations)
