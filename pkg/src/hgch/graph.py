"""Heterogeneous collaborative graph: data model, ingestion and preprocessing.

Node ids are remapped to dense per-type indices.  Global node indices
concatenate the types in order (users first, then items, then any side
node types), which is the row order of the embedding matrix.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from ._validation import check_random_state

logger = logging.getLogger(__name__)

INTERACTION = "interaction"
EARTH_RADIUS_KM = 6371.0

__all__ = [
    "EARTH_RADIUS_KM",
    "EmptyGraphError",
    "Hcg",
    "INTERACTION",
    "ParseError",
    "Relation",
    "SchemaError",
    "SideSpec",
    "SplitDataset",
    "dataset_fingerprint",
    "geo_neighbors",
    "haversine_km",
    "ingest",
    "k_core",
    "load_manifest",
    "load_processed",
    "save_processed",
    "split",
]


class ParseError(ValueError):
    """A malformed input row; the message carries file and line number."""


class SchemaError(ValueError):
    """A relation refers to an undeclared node type or relation."""


class EmptyGraphError(ValueError):
    pass


@dataclass(frozen=True)
class Relation:
    name: str
    src_type: str
    dst_type: str
    edges: np.ndarray  # (m, 2) local indices into src_type / dst_type

    @property
    def symmetric(self) -> bool:
        return self.src_type == self.dst_type

    def __len__(self):
        return len(self.edges)


def _dedupe(edges: np.ndarray, symmetric: bool) -> np.ndarray:
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if symmetric:
        edges = np.sort(edges, axis=1)
        edges = edges[edges[:, 0] != edges[:, 1]]
    if len(edges) == 0:
        return edges
    return np.unique(edges, axis=0)


class Hcg:
    """Typed heterogeneous graph with one interaction relation.

    Parameters
    ----------
    ids : dict of str -> array
        Raw ids per node type; the position is the local index.  Must
        contain ``"user"`` and ``"item"``.
    relations : dict of str -> Relation
        Must contain the ``"interaction"`` relation from user to item.
    """

    def __init__(self, ids: dict, relations: dict):
        if "user" not in ids or "item" not in ids:
            raise SchemaError("an HCG needs both 'user' and 'item' node types")
        order = ["user", "item"] + [t for t in ids if t not in ("user", "item")]
        self.ids = {t: np.asarray(ids[t], dtype=object) for t in order}
        if INTERACTION not in relations:
            raise SchemaError("missing the interaction relation")
        rels = {}
        for name in [INTERACTION] + [r for r in relations if r != INTERACTION]:
            rel = relations[name]
            if rel.src_type not in self.ids or rel.dst_type not in self.ids:
                raise SchemaError(
                    f"relation {name!r} has undeclared endpoint type "
                    f"({rel.src_type!r}, {rel.dst_type!r})"
                )
            edges = _dedupe(rel.edges, rel.symmetric)
            if len(edges) and (
                edges[:, 0].max() >= len(self.ids[rel.src_type])
                or edges[:, 1].max() >= len(self.ids[rel.dst_type])
                or edges.min() < 0
            ):
                raise ValueError(f"relation {name!r} has an out-of-range node index")
            rels[name] = replace(rel, name=name, edges=edges)
        inter = rels[INTERACTION]
        if (inter.src_type, inter.dst_type) != ("user", "item"):
            raise SchemaError("the interaction relation must go from user to item")
        self.relations = rels
        self._adj_cache: dict[str, sp.csr_matrix] = {}

    # -- sizes and indexing ---------------------------------------------

    @property
    def type_names(self) -> list[str]:
        return list(self.ids)

    @property
    def n_users(self) -> int:
        return len(self.ids["user"])

    @property
    def n_items(self) -> int:
        return len(self.ids["item"])

    @property
    def n_nodes(self) -> int:
        return sum(len(v) for v in self.ids.values())

    def offset(self, node_type: str) -> int:
        total = 0
        for t, v in self.ids.items():
            if t == node_type:
                return total
            total += len(v)
        raise KeyError(node_type)

    @property
    def node_type(self) -> np.ndarray:
        """Type index of every global node (the node-type map)."""
        return np.repeat(np.arange(len(self.ids)), [len(v) for v in self.ids.values()])

    @property
    def side_relations(self) -> list[str]:
        return [r for r in self.relations if r != INTERACTION]

    def global_edges(self, name: str) -> np.ndarray:
        rel = self.relations[name]
        off = np.array([self.offset(rel.src_type), self.offset(rel.dst_type)])
        return rel.edges + off

    def adjacency(self, name: str) -> sp.csr_matrix:
        """Symmetric 0/1 adjacency over global nodes, without self-loops."""
        if name not in self._adj_cache:
            e = self.global_edges(name)
            n = self.n_nodes
            rows = np.concatenate([e[:, 0], e[:, 1]])
            cols = np.concatenate([e[:, 1], e[:, 0]])
            adj = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
            adj.sum_duplicates()
            adj.data[:] = 1.0
            self._adj_cache[name] = adj
        return self._adj_cache[name]

    def degree(self, name: str) -> np.ndarray:
        return np.asarray(self.adjacency(name).sum(axis=1)).ravel().astype(np.int64)

    def total_degree(self) -> np.ndarray:
        return sum(self.degree(r) for r in self.relations)

    def with_relation(self, name: str, edges) -> "Hcg":
        rels = dict(self.relations)
        rels[name] = replace(rels[name], edges=np.asarray(edges, dtype=np.int64).reshape(-1, 2))
        return Hcg(self.ids, rels)

    def without_side_relations(self) -> "Hcg":
        return Hcg(self.ids, {INTERACTION: self.relations[INTERACTION]})

    def stats(self) -> dict:
        inter = self.relations[INTERACTION]
        n_u, n_i = self.n_users, self.n_items
        out = {
            "n_users": n_u,
            "n_items": n_i,
            "n_interactions": len(inter),
            "density": len(inter) / (n_u * n_i) if n_u and n_i else 0.0,
            "node_types": {t: len(v) for t, v in self.ids.items()},
            "relations": {},
        }
        for name, rel in self.relations.items():
            if name == INTERACTION:
                continue
            out["relations"][name] = {
                "src_type": rel.src_type,
                "dst_type": rel.dst_type,
                "n_src": len(self.ids[rel.src_type]),
                "n_dst": len(self.ids[rel.dst_type]),
                "n_edges": len(rel),
            }
        return out

    def __repr__(self):
        rels = ", ".join(f"{n}={len(r)}" for n, r in self.relations.items())
        return f"Hcg(users={self.n_users}, items={self.n_items}, nodes={self.n_nodes}, {rels})"


# -- ingestion --------------------------------------------------------------


@dataclass(frozen=True)
class SideSpec:
    name: str
    path: str | Path
    src_type: str
    dst_type: str


def _read_rows(path: Path, min_cols: int, max_cols: int):
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            cols = line.split("\t") if "\t" in line else line.split()
            if not min_cols <= len(cols) <= max_cols:
                raise ParseError(
                    f"{path}:{lineno}: expected {min_cols}-{max_cols} columns, got {len(cols)}"
                )
            yield lineno, [c.strip() for c in cols]


class _Remap:
    def __init__(self):
        self.index: dict[str, int] = {}

    def __call__(self, raw: str) -> int:
        return self.index.setdefault(raw, len(self.index))

    def ids(self) -> np.ndarray:
        return np.array(list(self.index), dtype=object)


def ingest(
    interactions_path,
    side_specs=(),
    threshold: float | None = 4.0,
    node_types=(),
    locations_path=None,
    geo_radius_km: float = 0.2,
) -> Hcg:
    """Build an :class:`Hcg` from TSV files.

    Interaction rows are ``user<TAB>item[<TAB>rating]``; when a rating is
    present, rows with ``rating < threshold`` are dropped.  Side rows are
    ``src<TAB>dst``.  Side edges whose user or item endpoint never occurs
    in a kept interaction are dropped.  ``locations_path`` (rows
    ``item<TAB>lat<TAB>lon``) materialises a ``neighbor`` item-item
    relation at ``geo_radius_km``.
    """
    known_types = {"user", "item", *node_types}
    for spec in side_specs:
        for t in (spec.src_type, spec.dst_type):
            if t not in known_types:
                raise SchemaError(f"relation {spec.name!r} uses undeclared node type {t!r}")

    path = Path(interactions_path)
    users, items = _Remap(), _Remap()
    pairs = []
    for lineno, cols in _read_rows(path, 2, 3):
        if len(cols) == 3 and threshold is not None:
            try:
                rating = float(cols[2])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: rating {cols[2]!r} is not a number") from None
            if rating < threshold:
                continue
        pairs.append((users(cols[0]), items(cols[1])))
    if not pairs:
        raise EmptyGraphError(f"{path}: no interactions survive the rating threshold")

    remaps = {"user": users, "item": items}
    for t in node_types:
        remaps.setdefault(t, _Remap())
    relations = {INTERACTION: Relation(INTERACTION, "user", "item", np.array(pairs))}
    for spec in side_specs:
        spath = Path(spec.path)
        edges = []
        for _, cols in _read_rows(spath, 2, 2):
            ends = []
            for t, raw in zip((spec.src_type, spec.dst_type), cols):
                if t in ("user", "item"):
                    ends.append(remaps[t].index.get(raw, -1))
                else:
                    ends.append(remaps[t](raw))
            if min(ends) >= 0:
                edges.append(ends)
        relations[spec.name] = Relation(spec.name, spec.src_type, spec.dst_type, np.array(edges))

    if locations_path is not None:
        lpath = Path(locations_path)
        locs = []
        for lineno, cols in _read_rows(lpath, 3, 3):
            if cols[0] not in items.index:
                continue
            try:
                locs.append((items.index[cols[0]], float(cols[1]), float(cols[2])))
            except ValueError:
                raise ParseError(f"{lpath}:{lineno}: bad coordinate") from None
        pairs = geo_neighbors(locs, geo_radius_km)
        relations["neighbor"] = Relation("neighbor", "item", "item", np.array(pairs))

    ids = {t: r.ids() for t, r in remaps.items()}
    return Hcg(ids, relations)


def haversine_km(lat1, lon1, lat2, lon2, radius_km: float = EARTH_RADIUS_KM):
    """Great-circle distance in km between coordinates given in degrees."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(np.asarray(lon2) - np.asarray(lon1))
    a = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2) ** 2
    return 2.0 * radius_km * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def geo_neighbors(locations, radius_km: float = 0.2) -> list[tuple]:
    """Pairs of location ids whose haversine distance is at most ``radius_km``.

    ``locations`` is a sequence of ``(id, lat_deg, lon_deg)``.  Each
    undirected pair appears once, ordered by input position; pairs with
    the same id are skipped.
    """
    from sklearn.neighbors import BallTree

    if radius_km < 0:
        raise ValueError("radius_km must be non-negative")
    if len(locations) == 0:
        return []
    ids = [loc[0] for loc in locations]
    coords = np.array([[loc[1], loc[2]] for loc in locations], dtype=np.float64)
    lat, lon = coords[:, 0], coords[:, 1]
    if np.any(np.abs(lat) > 90) or np.any(np.abs(lon) > 180) or not np.all(np.isfinite(coords)):
        raise ValueError("latitude must lie in [-90, 90] and longitude in [-180, 180]")
    tree = BallTree(np.radians(coords), metric="haversine")
    # small slack so the exact check below decides boundary cases
    hits = tree.query_radius(np.radians(coords), r=radius_km / EARTH_RADIUS_KM * (1 + 1e-9) + 1e-15)
    pairs = []
    for i, js in enumerate(hits):
        for j in np.sort(js):
            if j <= i or ids[i] == ids[j]:
                continue
            if haversine_km(lat[i], lon[i], lat[j], lon[j]) <= radius_km:
                pairs.append((ids[i], ids[j]))
    return pairs


# -- preprocessing -------------------------------------------------------------


def _compact(hcg: Hcg, keep: dict[str, np.ndarray]) -> Hcg:
    """Restrict ``hcg`` to the nodes flagged in ``keep`` and reindex."""
    new_index = {}
    for t, mask in keep.items():
        idx = np.full(len(mask), -1, dtype=np.int64)
        idx[mask] = np.arange(int(mask.sum()))
        new_index[t] = idx
    rels = {}
    for name, rel in hcg.relations.items():
        e = rel.edges
        if len(e):
            e = np.stack([new_index[rel.src_type][e[:, 0]], new_index[rel.dst_type][e[:, 1]]], axis=1)
            e = e[(e >= 0).all(axis=1)]
        rels[name] = replace(rel, edges=e.reshape(-1, 2))
    ids = {t: hcg.ids[t][keep[t]] for t in hcg.ids}
    return Hcg(ids, rels)


def k_core(hcg: Hcg, user_core: int = 10, item_core: int = 10) -> Hcg:
    """Iteratively drop users/items below their interaction-degree threshold.

    Side edges touching removed nodes go with them; side-only node types
    (e.g. categories) left without edges are dropped too.
    """
    if user_core < 1 or item_core < 1:
        raise ValueError("core thresholds must be >= 1")
    edges = hcg.relations[INTERACTION].edges
    alive_u = np.ones(hcg.n_users, dtype=bool)
    alive_i = np.ones(hcg.n_items, dtype=bool)
    while True:
        live = edges[alive_u[edges[:, 0]] & alive_i[edges[:, 1]]]
        du = np.bincount(live[:, 0], minlength=hcg.n_users)
        di = np.bincount(live[:, 1], minlength=hcg.n_items)
        drop_u = alive_u & (du < user_core)
        drop_i = alive_i & (di < item_core)
        if not drop_u.any() and not drop_i.any():
            break
        alive_u &= ~drop_u
        alive_i &= ~drop_i
    if not alive_u.any() or not alive_i.any():
        raise EmptyGraphError(f"the ({user_core}, {item_core})-core is empty")
    keep = {"user": alive_u, "item": alive_i}
    out = _compact(hcg, {**keep, **{t: np.ones(len(v), bool) for t, v in hcg.ids.items() if t not in keep}})
    extra = [t for t in out.ids if t not in ("user", "item")]
    if extra:
        touched = {t: np.zeros(len(out.ids[t]), dtype=bool) for t in out.ids}
        for rel in out.relations.values():
            if len(rel.edges):
                touched[rel.src_type][rel.edges[:, 0]] = True
                touched[rel.dst_type][rel.edges[:, 1]] = True
        mask = {t: (touched[t] if t in extra else np.ones(len(out.ids[t]), bool)) for t in out.ids}
        out = _compact(out, mask)
    return out


@dataclass
class SplitDataset:
    """Train/validation/test interactions over a fixed HCG.

    ``train`` is the optimised set; ``valid`` was carved out of the
    original training portion, so ``train + valid`` is the 80% part.
    Interaction arrays hold ``(user, item)`` local indices.
    """

    hcg: Hcg
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_users(self) -> int:
        return self.hcg.n_users

    @property
    def n_items(self) -> int:
        return self.hcg.n_items

    def train_graph(self) -> Hcg:
        """The message-passing graph: optimised train edges plus side relations."""
        return self.hcg.with_relation(INTERACTION, self.train)

    def positives(self, which: str = "train") -> list[np.ndarray]:
        """Per-user sorted item arrays for ``train``, ``valid``, ``test`` or ``seen``.

        ``seen`` is train plus validation, the candidates excluded at test time.
        """
        if which == "seen":
            pairs = np.concatenate([self.train, self.valid])
        else:
            pairs = getattr(self, which)
        return _group(pairs, self.n_users)


def _group(pairs: np.ndarray, n_users: int) -> list[np.ndarray]:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    pairs = pairs[order]
    bounds = np.searchsorted(pairs[:, 0], np.arange(n_users + 1))
    return [pairs[bounds[u]:bounds[u + 1], 1] for u in range(n_users)]


def split(
    hcg: Hcg,
    seed=0,
    test_ratio: float = 0.2,
    valid_ratio: float = 0.1,
) -> SplitDataset:
    """Per-user 8:2 train/test split, then a uniform 10% validation carve-out.

    Each user keeps at least one optimised training edge: the per-user
    test count is capped at ``n - 1`` and validation edges are only taken
    from users that still have another training edge.
    """
    rng = check_random_state(seed)
    edges = hcg.relations[INTERACTION].edges
    per_user = _group(edges, hcg.n_users)
    counts = np.array([len(p) for p in per_user])
    if np.any(counts < 2):
        bad = int(np.flatnonzero(counts < 2)[0])
        raise ValueError(f"user {hcg.ids['user'][bad]!r} has fewer than 2 interactions")
    train_parts, test_parts = [], []
    for u, items in enumerate(per_user):
        n = len(items)
        n_test = min(int(math.floor(test_ratio * n + 0.5)), n - 1)
        perm = rng.permutation(n)
        test_parts.append(np.stack([np.full(n_test, u), items[perm[:n_test]]], axis=1))
        train_parts.append(np.stack([np.full(n - n_test, u), items[perm[n_test:]]], axis=1))
    portion = np.concatenate(train_parts)
    test = np.concatenate(test_parts).reshape(-1, 2)

    n_valid = int(math.floor(valid_ratio * len(portion) + 0.5))
    remaining = np.bincount(portion[:, 0], minlength=hcg.n_users)
    chosen = np.zeros(len(portion), dtype=bool)
    taken = 0
    for idx in rng.permutation(len(portion)):
        if taken == n_valid:
            break
        u = portion[idx, 0]
        if remaining[u] > 1:
            chosen[idx] = True
            remaining[u] -= 1
            taken += 1
    if taken < n_valid:
        logger.warning("only %d of %d validation edges could be carved out", taken, n_valid)
    meta = {"seed": None if isinstance(seed, np.random.Generator) else seed}
    return SplitDataset(hcg, portion[~chosen], portion[chosen], test, meta)


# -- persistence ---------------------------------------------------------------


def _write_pairs(path: Path, pairs: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for a, b in np.asarray(pairs).reshape(-1, 2):
            fh.write(f"{a}\t{b}\n")


def _read_pairs(path: Path) -> np.ndarray:
    rows = [(int(a), int(b)) for _, (a, b) in _read_rows(path, 2, 2)]
    return np.array(rows, dtype=np.int64).reshape(-1, 2)


def _fingerprint_files(directory: Path) -> list[Path]:
    return sorted(directory.glob("remap_*.tsv")) + [directory / f"{s}.tsv" for s in ("train", "valid", "test")]


def dataset_fingerprint(directory) -> str:
    """SHA-256 over the split files and remap tables of a processed dataset."""
    directory = Path(directory)
    h = hashlib.sha256()
    for path in _fingerprint_files(directory):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def save_processed(data: SplitDataset, out_dir) -> str:
    """Write a processed dataset directory; returns its fingerprint."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    hcg = data.hcg
    for t, raw in hcg.ids.items():
        with open(out / f"remap_{t}.tsv", "w", encoding="utf-8") as fh:
            for i, r in enumerate(raw):
                fh.write(f"{i}\t{r}\n")
    for name, rel in hcg.relations.items():
        if name != INTERACTION:
            _write_pairs(out / f"relation_{name}.tsv", rel.edges)
    for s in ("train", "valid", "test"):
        _write_pairs(out / f"{s}.tsv", getattr(data, s))
    schema = {
        "node_types": hcg.type_names,
        "relations": {n: [r.src_type, r.dst_type] for n, r in hcg.relations.items()},
        "meta": data.meta,
    }
    (out / "schema.json").write_text(json.dumps(schema, indent=2), encoding="utf-8")
    stats = hcg.stats()
    stats["split"] = {s: int(len(getattr(data, s))) for s in ("train", "valid", "test")}
    (out / "stats.json").write_text(json.dumps(stats, indent=2), encoding="utf-8")
    return dataset_fingerprint(out)


def load_processed(directory) -> SplitDataset:
    d = Path(directory)
    if not (d / "schema.json").exists():
        raise FileNotFoundError(f"not a processed dataset directory: {d}")
    schema = json.loads((d / "schema.json").read_text(encoding="utf-8"))
    ids = {}
    for t in schema["node_types"]:
        rows = list(_read_rows(d / f"remap_{t}.tsv", 2, 2))
        ids[t] = np.array([cols[1] for _, cols in rows], dtype=object)
    train, valid, test = (_read_pairs(d / f"{s}.tsv") for s in ("train", "valid", "test"))
    rels = {INTERACTION: Relation(INTERACTION, "user", "item", np.concatenate([train, valid, test]))}
    for name, (src, dst) in schema["relations"].items():
        if name != INTERACTION:
            rels[name] = Relation(name, src, dst, _read_pairs(d / f"relation_{name}.tsv"))
    return SplitDataset(Hcg(ids, rels), train, valid, test, schema.get("meta", {}))


# -- manifests -------------------------------------------------------------------


@dataclass
class Manifest:
    interactions: Path
    side_specs: list
    node_types: list
    threshold: float | None = 4.0
    locations: Path | None = None
    geo_radius_km: float = 0.2
    user_core: int = 10
    item_core: int = 10
    seed: int = 0


def load_manifest(path) -> Manifest:
    """Read an INI dataset manifest.

    ::

        [dataset]
        interactions = ratings.tsv
        rating_threshold = 4       ; "none" keeps every row
        node_types = category
        locations = locations.tsv  ; optional, adds the 'neighbor' relation
        geo_radius_km = 0.2
        user_core = 10
        item_core = 5
        seed = 0

        [relation:category]
        path = item_category.tsv
        src = item
        dst = category

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.read(path, encoding="utf-8")
    if "dataset" not in cp:
        raise SchemaError(f"{path}: missing [dataset] section")
    ds = cp["dataset"]
    base = path.parent
    if "interactions" not in ds:
        raise SchemaError(f"{path}: [dataset] needs an 'interactions' entry")
    thr = ds.get("rating_threshold", "4").strip().lower()
    node_types = [t.strip() for t in ds.get("node_types", "").split(",") if t.strip()]
    specs = []
    for section in cp.sections():
        if not section.startswith("relation:"):
            continue
        name = section.split(":", 1)[1].strip()
        sec = cp[section]
        missing = {"path", "src", "dst"} - set(sec)
        if missing:
            raise SchemaError(f"{path}: [{section}] lacks {sorted(missing)}")
        specs.append(SideSpec(name, base / sec["path"], sec["src"].strip(), sec["dst"].strip()))
    return Manifest(
        interactions=base / ds["interactions"],
        side_specs=specs,
        node_types=node_types,
        threshold=None if thr in ("", "none") else float(thr),
        locations=base / ds["locations"] if ds.get("locations") else None,
        geo_radius_km=ds.getfloat("geo_radius_km", 0.2),
        user_core=ds.getint("user_core", 10),
        item_core=ds.getint("item_core", 10),
        seed=ds.getint("seed", 0),
    )
