"""Synthetic relational data with skewed foreign keys, plus exact join counting.

Every column is a 64-bit integer array.  Foreign keys follow a Zipf law over a
seeded permutation of the referenced keys; ``NULL`` (the largest int64) never
matches in an equijoin.
"""
from __future__ import annotations

import json
import os
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import yaml

from aqora.errors import CartesianProductError, ConfigError, DataError

NULL = np.iinfo(np.int64).max
KINDS = ("key", "fk", "attr")
DEFAULT_DOMAIN = 1000


@dataclass(frozen=True, order=True)
class ColumnRef:
    table: str
    column: str

    def __str__(self):
        return f"{self.table}.{self.column}"

    @classmethod
    def parse(cls, text: str) -> "ColumnRef":
        table, sep, column = str(text).partition(".")
        if not sep or not table or not column:
            raise ConfigError(f"column reference {text!r} is not of the form table.column")
        return cls(table, column)


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str = "attr"
    ref: ColumnRef | None = None
    zipf: float = 0.0
    domain: int = DEFAULT_DOMAIN
    null_fraction: float = 0.0
    # fk only: rank referenced keys by one shared popularity order instead of a private one
    correlated: bool = False


@dataclass(frozen=True)
class TableSpec:
    name: str
    rows: int
    columns: tuple[ColumnSpec, ...]


@dataclass(frozen=True)
class SchemaSpec:
    tables: tuple[TableSpec, ...]

    @classmethod
    def from_dict(cls, raw: Mapping) -> "SchemaSpec":
        try:
            tables = []
            for t in raw["tables"]:
                cols = []
                for c in t.get("columns", ()):
                    ref = c.get("ref")
                    cols.append(ColumnSpec(
                        name=str(c["name"]),
                        kind=str(c.get("kind", "attr")),
                        ref=ColumnRef.parse(ref) if ref is not None else None,
                        zipf=float(c.get("zipf", 0.0)),
                        domain=int(c.get("domain", DEFAULT_DOMAIN)),
                        null_fraction=float(c.get("null_fraction", 0.0)),
                        correlated=bool(c.get("correlated", False)),
                    ))
                tables.append(TableSpec(str(t["name"]), int(t["rows"]), tuple(cols)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed schema: {exc}") from exc
        return cls(tuple(tables))

    def table(self, name: str) -> TableSpec:
        for t in self.tables:
            if t.name == name:
                return t
        raise ConfigError(f"unknown table {name!r}")


def load_schema(path: str | os.PathLike) -> SchemaSpec:
    with open(path) as f:
        raw = yaml.safe_load(f)
    if isinstance(raw, dict) and "schema" in raw:
        raw = raw["schema"]
    return SchemaSpec.from_dict(raw)


@dataclass
class Relation:
    name: str
    columns: list[ColumnSpec]
    data: dict[str, np.ndarray]
    row_count: int

    def __post_init__(self):
        for c in self.columns:
            arr = self.data[c.name]
            if arr.dtype != np.int64 or arr.ndim != 1 or len(arr) != self.row_count:
                raise DataError(f"column {self.name}.{c.name} is not an int64 vector of length {self.row_count}")

    def column(self, name: str) -> np.ndarray:
        try:
            return self.data[name]
        except KeyError:
            raise ConfigError(f"unknown column {self.name}.{name}") from None

    def spec(self, name: str) -> ColumnSpec:
        for c in self.columns:
            if c.name == name:
                return c
        raise ConfigError(f"unknown column {self.name}.{name}")

    def take(self, rows: np.ndarray) -> "Relation":
        return Relation(self.name, list(self.columns),
                        {k: v[rows] for k, v in self.data.items()}, int(len(rows)))

    def ndv(self, name: str) -> int:
        col = self.column(name)
        col = col[col != NULL]
        return int(len(np.unique(col))) if len(col) else 0


@dataclass(frozen=True)
class Predicate:
    """Inclusive range filter ``lo <= table.column <= hi``; equality when lo == hi."""

    table: str
    column: str
    lo: int
    hi: int

    def __str__(self):
        if self.lo == self.hi:
            return f"{self.table}.{self.column} = {self.lo}"
        return f"{self.table}.{self.column} BETWEEN {self.lo} AND {self.hi}"

    def mask(self, relation: Relation) -> np.ndarray:
        col = relation.column(self.column)
        return (col >= self.lo) & (col <= self.hi) & (col != NULL)


@dataclass(frozen=True)
class JoinCondition:
    """Equijoin ``left = right``; endpoints are stored in sorted order."""

    left: ColumnRef
    right: ColumnRef

    def __post_init__(self):
        if self.right < self.left:
            a, b = self.right, self.left
            object.__setattr__(self, "left", a)
            object.__setattr__(self, "right", b)

    @property
    def tables(self) -> frozenset[str]:
        return frozenset((self.left.table, self.right.table))

    def __str__(self):
        return f"{self.left} = {self.right}"

    def side(self, table: str) -> ColumnRef:
        if self.left.table == table:
            return self.left
        if self.right.table == table:
            return self.right
        raise KeyError(table)


@dataclass(frozen=True)
class JoinGraph:
    tables: tuple[str, ...]
    edges: tuple[JoinCondition, ...]
    predicates: tuple[Predicate, ...] = ()

    def __post_init__(self):
        if len(set(self.tables)) != len(self.tables):
            raise ConfigError(f"duplicate table in join graph {self.tables}")
        names = set(self.tables)
        for e in self.edges:
            if not e.tables <= names:
                raise ConfigError(f"edge {e} names a table outside {sorted(names)}")
        for p in self.predicates:
            if p.table not in names:
                raise ConfigError(f"predicate {p} names a table outside the graph")

    def predicates_for(self, table: str) -> tuple[Predicate, ...]:
        return tuple(p for p in self.predicates if p.table == table)

    def edges_within(self, subset: Iterable[str]) -> list[JoinCondition]:
        s = set(subset)
        return [e for e in self.edges if e.tables <= s]

    def is_connected(self, subset: Iterable[str]) -> bool:
        s = set(subset)
        if not s:
            return False
        adj = {t: set() for t in s}
        for e in self.edges_within(s):
            a, b = e.left.table, e.right.table
            if a != b:
                adj[a].add(b)
                adj[b].add(a)
        start = next(iter(sorted(s)))
        seen = {start}
        todo = [start]
        while todo:
            for n in adj[todo.pop()]:
                if n not in seen:
                    seen.add(n)
                    todo.append(n)
        return seen == s

    def validate(self, relations: Mapping[str, Relation]) -> None:
        for t in self.tables:
            if t not in relations:
                raise ConfigError(f"join graph names unknown table {t!r}")
        for e in self.edges:
            for ref in (e.left, e.right):
                relations[ref.table].spec(ref.column)
        for p in self.predicates:
            relations[p.table].spec(p.column)
        if not self.is_connected(self.tables):
            raise ConfigError(f"join graph over {list(self.tables)} is disconnected")


# ---------------------------------------------------------------------------
# generation


def _validate_schema(schema: SchemaSpec) -> None:
    if len(schema.tables) < 2:
        raise ConfigError("schema must name at least 2 tables")
    seen: dict[str, TableSpec] = {}
    for t in schema.tables:
        if t.name in seen:
            raise ConfigError(f"duplicate table name {t.name!r}")
        if t.rows < 0:
            raise ConfigError(f"table {t.name!r} has negative row count")
        seen[t.name] = t
        names = [c.name for c in t.columns]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate column in table {t.name!r}")
    for t in schema.tables:
        for c in t.columns:
            if c.kind not in KINDS:
                raise ConfigError(f"column {t.name}.{c.name} has unknown kind {c.kind!r}")
            if c.zipf < 0:
                raise ConfigError(f"column {t.name}.{c.name} has negative skew")
            if not 0 <= c.null_fraction <= 1:
                raise ConfigError(f"column {t.name}.{c.name} null_fraction outside [0, 1]")
            if c.kind == "attr" and c.domain < 1:
                raise ConfigError(f"column {t.name}.{c.name} needs domain >= 1")
            if c.kind == "fk":
                if c.ref is None:
                    raise ConfigError(f"foreign key {t.name}.{c.name} has no reference")
                target = seen.get(c.ref.table)
                if target is None:
                    raise ConfigError(f"dangling foreign key {t.name}.{c.name} -> {c.ref}")
                kinds = {x.name: x.kind for x in target.columns}
                if kinds.get(c.ref.column) != "key":
                    raise ConfigError(f"dangling foreign key {t.name}.{c.name} -> {c.ref} (not a key column)")


def zipf_pmf(n: int, exponent: float) -> np.ndarray:
    ranks = np.arange(1, n + 1, dtype=np.float64)
    w = ranks ** -float(exponent)
    return w / w.sum()


def generate_dataset(schema: SchemaSpec, seed: int) -> list[Relation]:
    """Materialize every table of ``schema``; a pure function of (schema, seed)."""
    _validate_schema(schema)
    keys: dict[ColumnRef, np.ndarray] = {}
    out: dict[str, Relation] = {}
    # key columns first so foreign keys can sample from them regardless of table order
    for ti, t in enumerate(schema.tables):
        for ci, c in enumerate(t.columns):
            if c.kind == "key":
                rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, ti, ci])
                keys[ColumnRef(t.name, c.name)] = rng.permutation(t.rows).astype(np.int64)
    for ti, t in enumerate(schema.tables):
        data = {}
        for ci, c in enumerate(t.columns):
            ref = ColumnRef(t.name, c.name)
            rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, ti, ci, 1])
            if c.kind == "key":
                col = keys[ref]
            elif c.kind == "fk":
                domain = np.sort(keys[c.ref])
                if len(domain) == 0:
                    col = np.full(t.rows, NULL, dtype=np.int64)
                else:
                    hot = keys[c.ref] if c.correlated else rng.permutation(domain)
                    ranks = rng.choice(len(domain), size=t.rows, p=zipf_pmf(len(domain), c.zipf))
                    col = hot[ranks].astype(np.int64)
            else:
                if c.zipf > 0:
                    ranks = rng.choice(c.domain, size=t.rows, p=zipf_pmf(c.domain, c.zipf))
                    col = rng.permutation(c.domain)[ranks].astype(np.int64)
                else:
                    col = rng.integers(0, c.domain, size=t.rows, dtype=np.int64)
            if c.kind != "key" and c.null_fraction > 0 and t.rows:
                col = col.copy()
                col[rng.random(t.rows) < c.null_fraction] = NULL
            data[c.name] = np.ascontiguousarray(col, dtype=np.int64)
        out[t.name] = Relation(t.name, list(t.columns), data, t.rows)
    return [out[t.name] for t in schema.tables]


def as_mapping(relations: Sequence[Relation] | Mapping[str, Relation]) -> dict[str, Relation]:
    if isinstance(relations, Mapping):
        return dict(relations)
    return {r.name: r for r in relations}


# ---------------------------------------------------------------------------
# filters and joins


def evaluate_filter(relation: Relation, predicate: Predicate) -> Relation:
    if predicate.table != relation.name:
        raise ConfigError(f"predicate {predicate} does not apply to table {relation.name!r}")
    return relation.take(np.flatnonzero(predicate.mask(relation)))


def filtered_rows(relation: Relation, predicates: Iterable[Predicate]) -> np.ndarray:
    predicates = list(predicates)
    if not predicates:
        # shared read-only index vector; many per-query oracles would otherwise copy it
        rows = relation.__dict__.get("_all_rows")
        if rows is None:
            rows = np.arange(relation.row_count, dtype=np.int64)
            rows.flags.writeable = False
            relation.__dict__["_all_rows"] = rows
        return rows
    mask = np.ones(relation.row_count, dtype=bool)
    for p in predicates:
        mask &= p.mask(relation)
    return np.flatnonzero(mask).astype(np.int64)


def _encode_keys(left_cols: list[np.ndarray], right_cols: list[np.ndarray]):
    """Map composite keys of both sides onto shared int64 ids; rows with a NULL part get -1."""
    lvalid = np.ones(len(left_cols[0]), dtype=bool)
    rvalid = np.ones(len(right_cols[0]), dtype=bool)
    for c in left_cols:
        lvalid &= c != NULL
    for c in right_cols:
        rvalid &= c != NULL
    if len(left_cols) == 1:
        lk = np.where(lvalid, left_cols[0], -1)
        rk = np.where(rvalid, right_cols[0], -1)
        return lk, rk
    stacked = np.concatenate([np.stack(left_cols, axis=1), np.stack(right_cols, axis=1)])
    _, inv = np.unique(stacked, axis=0, return_inverse=True)
    inv = inv.reshape(-1).astype(np.int64)
    nl = len(left_cols[0])
    return np.where(lvalid, inv[:nl], -1), np.where(rvalid, inv[nl:], -1)


def _group_sum(keys: np.ndarray, weights: np.ndarray):
    ok = keys >= 0
    keys, weights = keys[ok], weights[ok]
    if len(keys) == 0:
        return keys, weights
    order = np.argsort(keys, kind="stable")
    ks = keys[order]
    starts = np.flatnonzero(np.concatenate(([True], ks[1:] != ks[:-1])))
    return ks[starts], np.add.reduceat(weights[order], starts)


def _lookup(uniq: np.ndarray, sums: np.ndarray, keys: np.ndarray) -> np.ndarray:
    if len(uniq) == 0:
        return np.zeros(len(keys), dtype=np.int64)
    idx = np.searchsorted(uniq, keys)
    idx = np.minimum(idx, len(uniq) - 1)
    hit = (uniq[idx] == keys) & (keys >= 0)
    return np.where(hit, sums[idx], 0)


_EXACT_FLOAT = 2 ** 53


def _match_weights(keys: np.ndarray, weights: np.ndarray, probe: np.ndarray) -> np.ndarray:
    """For every probe key, the summed weight of equal keys (0 for -1 or no match)."""
    ok = keys >= 0
    top = int(keys.max(initial=-1))
    # dense bincount path is exact while every partial sum stays below 2**53
    if 0 <= top <= 8 * (len(keys) + len(probe)) + (1 << 16) and int(weights.sum()) < _EXACT_FLOAT:
        dense = np.bincount(keys[ok], weights=weights[ok], minlength=top + 1)
        dense = np.rint(dense).astype(np.int64)
        hit = (probe >= 0) & (probe <= top)
        out = np.zeros(len(probe), dtype=np.int64)
        out[hit] = dense[probe[hit]]
        return out
    uniq, sums = _group_sum(keys, weights)
    return _lookup(uniq, sums, probe)


def equi_join(relations: Mapping[str, Relation], left: dict[str, np.ndarray],
              right: dict[str, np.ndarray], conditions: Sequence[JoinCondition]) -> dict[str, np.ndarray]:
    """Join two row-index tuples (table -> aligned row ids) on ``conditions``.

    An empty condition list yields the Cartesian product.
    """
    nl = len(next(iter(left.values()))) if left else 0
    nr = len(next(iter(right.values()))) if right else 0
    if conditions:
        lcols, rcols = [], []
        for c in conditions:
            if c.left.table in left and c.right.table in right:
                lref, rref = c.left, c.right
            elif c.right.table in left and c.left.table in right:
                lref, rref = c.right, c.left
            else:
                raise DataError(f"condition {c} does not span the join inputs")
            lcols.append(relations[lref.table].column(lref.column)[left[lref.table]])
            rcols.append(relations[rref.table].column(rref.column)[right[rref.table]])
        lk, rk = _encode_keys(lcols, rcols)
        rvalid = np.flatnonzero(rk >= 0)
        order = rvalid[np.argsort(rk[rvalid], kind="stable")]
        rs = rk[order]
        lo = np.searchsorted(rs, lk, side="left")
        hi = np.searchsorted(rs, lk, side="right")
        counts = np.where(lk >= 0, hi - lo, 0)
    else:
        order = np.arange(nr, dtype=np.int64)
        lo = np.zeros(nl, dtype=np.int64)
        counts = np.full(nl, nr, dtype=np.int64)
    total = int(counts.sum())
    lrows = np.repeat(np.arange(nl, dtype=np.int64), counts)
    offsets = np.arange(total, dtype=np.int64) - np.repeat(np.cumsum(counts) - counts, counts)
    rrows = order[np.repeat(lo, counts) + offsets] if total else np.zeros(0, dtype=np.int64)
    out = {t: v[lrows] for t, v in left.items()}
    out.update({t: v[rrows] for t, v in right.items()})
    return out


def _traversal(subset: Sequence[str], pairs: dict[frozenset, list]) -> list[tuple[str, str | None]]:
    adj = {t: [] for t in subset}
    for pair in pairs:
        a, b = sorted(pair)
        adj[a].append(b)
        adj[b].append(a)
    root = subset[0]
    order = [(root, None)]
    seen = {root}
    q = deque([root])
    while q:
        t = q.popleft()
        for n in sorted(adj[t]):
            if n not in seen:
                seen.add(n)
                order.append((n, t))
                q.append(n)
    return order


def _pair_conditions(graph: JoinGraph, subset: Iterable[str]) -> dict[frozenset, list[JoinCondition]]:
    pairs: dict[frozenset, list[JoinCondition]] = {}
    for e in graph.edges_within(subset):
        if len(e.tables) == 2:
            pairs.setdefault(e.tables, []).append(e)
    return pairs


def _self_conditions_mask(relations, graph, table, rows):
    # an edge with both endpoints on one table acts as a row filter
    mask = np.ones(len(rows), dtype=bool)
    for e in graph.edges:
        if e.tables == frozenset((table,)):
            a = relations[table].column(e.left.column)[rows]
            b = relations[table].column(e.right.column)[rows]
            mask &= (a == b) & (a != NULL)
    return rows if mask.all() else rows[mask]


def exact_join_cardinality(relations: Sequence[Relation] | Mapping[str, Relation],
                           graph: JoinGraph, subset: Iterable[str]) -> int:
    """Exact row count of the join of ``subset`` under the graph's edges and predicates."""
    rels = as_mapping(relations)
    tables = sorted(set(subset))
    if not tables or not graph.is_connected(tables):
        raise CartesianProductError(tables)
    rows = {t: _self_conditions_mask(rels, graph, t, filtered_rows(rels[t], graph.predicates_for(t)))
            for t in tables}
    return _count(rels, graph, tables, rows)


def _count(rels, graph, tables, rows) -> int:
    if len(tables) == 1:
        return int(len(rows[tables[0]]))
    pairs = _pair_conditions(graph, tables)
    if len(pairs) != len(tables) - 1:
        return int(len(next(iter(materialize_join(rels, graph, tables, rows).values()))))
    # acyclic: pass per-row match counts from the leaves towards the root
    order = _traversal(tables, pairs)
    weights = {t: np.ones(len(rows[t]), dtype=np.int64) for t in tables}
    for t, parent in reversed(order[1:]):
        conds = pairs[frozenset((t, parent))]
        tcols = [rels[t].column(c.side(t).column)[rows[t]] for c in conds]
        pcols = [rels[parent].column(c.side(parent).column)[rows[parent]] for c in conds]
        tk, pk = _encode_keys(tcols, pcols)
        weights[parent] = weights[parent] * _match_weights(tk, weights[t], pk)
    return int(weights[tables[0]].sum())


def materialize_join(relations: Mapping[str, Relation], graph: JoinGraph, subset: Iterable[str],
                     rows: Mapping[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """Row-index tuples of the join of ``subset`` (table -> aligned row ids)."""
    rels = as_mapping(relations)
    tables = sorted(set(subset))
    if not graph.is_connected(tables):
        raise CartesianProductError(tables)
    if rows is None:
        rows = {t: _self_conditions_mask(rels, graph, t, filtered_rows(rels[t], graph.predicates_for(t)))
                for t in tables}
    pairs = _pair_conditions(graph, tables)
    order = _traversal(tables, pairs)
    current = {order[0][0]: rows[order[0][0]]}
    for t, _ in order[1:]:
        conds = [e for e in graph.edges_within(set(current) | {t}) if t in e.tables and len(e.tables) == 2]
        current = equi_join(rels, current, {t: rows[t]}, conds)
    return current


class CardinalityOracle:
    """Memoized exact counts for one query over fixed relations."""

    def __init__(self, relations, graph: JoinGraph):
        self.relations = as_mapping(relations)
        self.graph = graph
        self._rows = {}
        self._cache: dict[frozenset, int] = {}

    def rows(self, table: str) -> np.ndarray:
        r = self._rows.get(table)
        if r is None:
            rel = self.relations[table]
            r = _self_conditions_mask(self.relations, self.graph, table,
                                      filtered_rows(rel, self.graph.predicates_for(table)))
            self._rows[table] = r
        return r

    def count(self, subset: Iterable[str]) -> int:
        key = frozenset(subset)
        hit = self._cache.get(key)
        if hit is None:
            tables = sorted(key)
            if not tables or not self.graph.is_connected(tables):
                raise CartesianProductError(tables)
            hit = _count(self.relations, self.graph, tables, {t: self.rows(t) for t in tables})
            self._cache[key] = hit
        return hit


# ---------------------------------------------------------------------------
# persistence

MANIFEST = "manifest.json"


def save_dataset(relations: Sequence[Relation], out_dir: str | os.PathLike) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tables = []
    for r in relations:
        cols = []
        for c in r.columns:
            fname = f"{r.name}.{c.name}.i64"
            r.data[c.name].astype("<i8").tofile(out / fname)
            cols.append({"name": c.name, "kind": c.kind, "ref": str(c.ref) if c.ref else None,
                         "zipf": c.zipf, "domain": c.domain, "null_fraction": c.null_fraction,
                         "correlated": c.correlated, "file": fname})
        tables.append({"name": r.name, "row_count": r.row_count, "columns": cols})
    manifest = {"format": "aqora-columns", "version": 1, "tables": tables}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out / MANIFEST


def load_dataset(in_dir: str | os.PathLike) -> list[Relation]:
    base = Path(in_dir)
    try:
        manifest = json.loads((base / MANIFEST).read_text())
    except FileNotFoundError:
        raise DataError(f"no dataset manifest in {base}") from None
    if manifest.get("format") != "aqora-columns" or manifest.get("version") != 1:
        raise DataError(f"unsupported dataset manifest in {base}")
    out = []
    for t in manifest["tables"]:
        cols, data = [], {}
        for c in t["columns"]:
            arr = np.fromfile(base / c["file"], dtype="<i8").astype(np.int64)
            if len(arr) != t["row_count"]:
                raise DataError(f"column file {c['file']} has {len(arr)} values, expected {t['row_count']}")
            data[c["name"]] = arr
            cols.append(ColumnSpec(c["name"], c["kind"], ColumnRef.parse(c["ref"]) if c["ref"] else None,
                                   c.get("zipf", 0.0), c.get("domain", DEFAULT_DOMAIN),
                                   c.get("null_fraction", 0.0), c.get("correlated", False)))
        out.append(Relation(t["name"], cols, data, int(t["row_count"])))
    return out
