"""Query templates, randomized predicate instantiation, and workload files on disk.

A template fixes a join graph and the FROM order the syntactic planner
follows; each query draws fresh range filters over the template's filter
columns.  Queries are split into disjoint train and test sets.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from aqora.errors import ConfigError, DataError
from aqora.relstore import ColumnRef, JoinCondition, JoinGraph, Predicate, SchemaSpec

WORKLOAD_FILE = "workload.json"
FORMAT = "aqora-workload"


@dataclass(frozen=True)
class Template:
    name: str
    tables: tuple[str, ...]
    edges: tuple[JoinCondition, ...]
    filters: tuple[ColumnRef, ...]
    # filtered in every query, in addition to the randomly drawn ones
    required: tuple[ColumnRef, ...] = ()

    def graph(self, predicates: Sequence[Predicate] = ()) -> JoinGraph:
        return JoinGraph(self.tables, self.edges, tuple(predicates))

    def to_dict(self) -> dict:
        return {"name": self.name, "tables": list(self.tables), "edges": [str(e) for e in self.edges],
                "filters": [str(c) for c in self.filters], "required": [str(c) for c in self.required]}

    @classmethod
    def from_dict(cls, raw: Mapping) -> "Template":
        try:
            edges = tuple(parse_edge(e) for e in raw["edges"])
            filters = tuple(ColumnRef.parse(c) for c in raw.get("filters", ()))
            required = tuple(ColumnRef.parse(c) for c in raw.get("required", ()))
            return cls(str(raw["name"]), tuple(raw["tables"]), edges, filters, required)
        except KeyError as exc:
            raise ConfigError(f"template is missing field {exc}") from None


def parse_edge(text: str) -> JoinCondition:
    left, sep, right = str(text).partition("=")
    if not sep:
        raise ConfigError(f"edge {text!r} is not of the form a.x = b.y")
    return JoinCondition(ColumnRef.parse(left.strip()), ColumnRef.parse(right.strip()))


@dataclass(frozen=True)
class QuerySpec:
    query_id: str
    template: str
    split: str
    tables: tuple[str, ...]
    edges: tuple[JoinCondition, ...]
    predicates: tuple[Predicate, ...]

    def graph(self) -> JoinGraph:
        return JoinGraph(self.tables, self.edges, self.predicates)

    def to_dict(self) -> dict:
        return {"query_id": self.query_id, "template": self.template, "split": self.split,
                "tables": list(self.tables), "edges": [str(e) for e in self.edges],
                "predicates": [{"table": p.table, "column": p.column, "lo": p.lo, "hi": p.hi}
                               for p in self.predicates]}

    @classmethod
    def from_dict(cls, raw: Mapping) -> "QuerySpec":
        try:
            preds = tuple(Predicate(p["table"], p["column"], int(p["lo"]), int(p["hi"]))
                          for p in raw["predicates"])
            return cls(raw["query_id"], raw["template"], raw["split"], tuple(raw["tables"]),
                       tuple(parse_edge(e) for e in raw["edges"]), preds)
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed query record: {exc}") from None


@dataclass(frozen=True)
class WorkloadSpec:
    templates: tuple[Template, ...] = ()
    n_templates: int = 0
    template_tables: int = 0
    queries_per_template: int = 10
    n_test: int = 0
    seed: int = 0
    selectivity: tuple[float, float] = (0.001, 1.0)
    filters_per_query: tuple[int, int] = (1, 3)
    # columns filtered in every generated template that contains their table
    required: tuple[ColumnRef, ...] = ()

    @classmethod
    def from_dict(cls, raw: Mapping, seed: int | None = None) -> "WorkloadSpec":
        raw = dict(raw or {})
        known = {"templates", "n_templates", "template_tables", "queries_per_template", "n_test", "seed",
                 "selectivity", "filters_per_query", "required"}
        extra = set(raw) - known
        if extra:
            raise ConfigError(f"unknown workload keys: {sorted(extra)}")
        spec = cls(
            templates=tuple(Template.from_dict(t) for t in raw.get("templates", ())),
            n_templates=int(raw.get("n_templates", 0)),
            template_tables=int(raw.get("template_tables", 0)),
            queries_per_template=int(raw.get("queries_per_template", 10)),
            n_test=int(raw.get("n_test", 0)),
            seed=int(raw.get("seed", 0) if seed is None else seed),
            selectivity=tuple(float(x) for x in raw.get("selectivity", (0.001, 1.0))),
            filters_per_query=tuple(int(x) for x in raw.get("filters_per_query", (1, 3))),
            required=tuple(ColumnRef.parse(c) for c in raw.get("required", ())),
        )
        lo, hi = spec.selectivity
        if not 0 < lo <= hi <= 1:
            raise ConfigError("selectivity must satisfy 0 < lo <= hi <= 1")
        if spec.filters_per_query[0] < 0 or spec.filters_per_query[0] > spec.filters_per_query[1]:
            raise ConfigError("filters_per_query must be a non-decreasing pair of counts")
        if spec.queries_per_template < 1:
            raise ConfigError("queries_per_template must be >= 1")
        return spec


@dataclass
class Workload:
    spec: WorkloadSpec
    templates: tuple[Template, ...]
    queries: list[QuerySpec] = field(default_factory=list)

    @property
    def train(self) -> list[QuerySpec]:
        return [q for q in self.queries if q.split == "train"]

    @property
    def test(self) -> list[QuerySpec]:
        return [q for q in self.queries if q.split == "test"]

    @property
    def n_max(self) -> int:
        return max(len(t.tables) for t in self.templates)

    @property
    def vocab(self) -> tuple[str, ...]:
        """Every table in first-seen order; indexes the table bitmap of node features."""
        seen: dict[str, None] = {}
        for t in self.templates:
            seen.update(dict.fromkeys(t.tables))
        return tuple(seen)


def schema_edges(schema: SchemaSpec) -> list[JoinCondition]:
    return [JoinCondition(ColumnRef(t.name, c.name), c.ref)
            for t in schema.tables for c in t.columns if c.kind == "fk"]


def _attr_columns(schema: SchemaSpec, tables) -> tuple[ColumnRef, ...]:
    return tuple(ColumnRef(t.name, c.name) for t in schema.tables if t.name in tables
                 for c in t.columns if c.kind == "attr")


def random_templates(schema: SchemaSpec, n: int, size: int, seed: int,
                     required: Sequence[ColumnRef] = ()) -> list[Template]:
    """Random connected table subsets of the foreign-key graph, each listed in a random FROM order."""
    edges = schema_edges(schema)
    names = [t.name for t in schema.tables]
    size = size or len(names)
    if not 2 <= size <= len(names):
        raise ConfigError(f"template_tables must lie in [2, {len(names)}]")
    out = []
    for k in range(n):
        rng = np.random.default_rng([seed, 101, k])
        for _attempt in range(1000):
            chosen = [names[int(rng.integers(len(names)))]]
            while len(chosen) < size:
                frontier = sorted({t for e in edges if len(e.tables & set(chosen)) == 1
                                   for t in e.tables - set(chosen)})
                if not frontier:
                    break
                chosen.append(frontier[int(rng.integers(len(frontier)))])
            if len(chosen) == size:
                break
        else:
            raise ConfigError(f"foreign-key graph has no connected subset of {size} tables")
        order = [chosen[i] for i in rng.permutation(len(chosen))]
        sub = tuple(e for e in edges if e.tables <= set(order))
        req = tuple(c for c in required if c.table in order)
        out.append(Template(f"t{k:02d}", tuple(order), sub, _attr_columns(schema, order), req))
    return out


def resolve_templates(spec: WorkloadSpec, schema: SchemaSpec) -> tuple[Template, ...]:
    templates = list(spec.templates)
    if spec.n_templates:
        templates += random_templates(schema, spec.n_templates, spec.template_tables, spec.seed, spec.required)
    if not templates:
        raise ConfigError("workload defines no templates")
    domains = {ColumnRef(t.name, c.name): c.domain for t in schema.tables for c in t.columns}
    known = {t.name for t in schema.tables}
    for t in templates:
        missing = set(t.tables) - known
        if missing:
            raise ConfigError(f"template {t.name} names unknown tables {sorted(missing)}")
        if not t.graph().is_connected(t.tables):
            raise ConfigError(f"template {t.name} join graph is disconnected")
        for f in t.filters + t.required:
            if f not in domains:
                raise ConfigError(f"template {t.name} filters unknown column {f}")
    return tuple(templates)


def instantiate(template: Template, schema: SchemaSpec, rng: np.random.Generator,
                selectivity=(0.001, 1.0), filters_per_query=(1, 3)) -> tuple[Predicate, ...]:
    """Range filters with log-uniform width fraction over the column domain."""
    domains = {ColumnRef(t.name, c.name): c.domain for t in schema.tables for c in t.columns}
    cols = [c for c in template.filters if c not in template.required]
    k = int(rng.integers(filters_per_query[0], filters_per_query[1] + 1))
    k = min(k, len(cols))
    picked = sorted(rng.choice(len(cols), size=k, replace=False).tolist()) if k else []
    lo_f, hi_f = selectivity
    preds = []
    for col in list(template.required) + [cols[i] for i in picked]:
        dom = domains[col]
        frac = math.exp(rng.uniform(math.log(lo_f), math.log(hi_f)))
        width = max(1, min(dom, int(round(frac * dom))))
        lo = int(rng.integers(0, dom - width + 1))
        preds.append(Predicate(col.table, col.column, lo, lo + width - 1))
    return tuple(preds)


def generate_workload(spec: WorkloadSpec, schema: SchemaSpec) -> Workload:
    """Deterministic in (spec, schema); duplicate instantiations are redrawn so test never repeats train."""
    templates = resolve_templates(spec, schema)
    total = len(templates) * spec.queries_per_template
    if not 0 <= spec.n_test <= total:
        raise ConfigError(f"n_test={spec.n_test} outside [0, {total}]")
    drafts = []
    seen = set()
    for ti, t in enumerate(templates):
        for qi in range(spec.queries_per_template):
            rng = np.random.default_rng([spec.seed, 202, ti, qi])
            for _ in range(100):
                preds = instantiate(t, schema, rng, spec.selectivity, spec.filters_per_query)
                key = (t.name, preds)
                if key not in seen:
                    break
            seen.add(key)
            drafts.append((t, preds))
    test = set(np.random.default_rng([spec.seed, 303]).permutation(total)[:spec.n_test].tolist())
    width = max(4, len(str(total - 1)))
    queries = [QuerySpec(f"q{i:0{width}d}", t.name, "test" if i in test else "train", t.tables, t.edges, preds)
               for i, (t, preds) in enumerate(drafts)]
    return Workload(spec, templates, queries)


def write_workload(workload: Workload, out_dir) -> Path:
    out = Path(out_dir)
    (out / "queries").mkdir(parents=True, exist_ok=True)
    for q in workload.queries:
        (out / "queries" / f"{q.query_id}.json").write_text(json.dumps(q.to_dict(), indent=1, sort_keys=True) + "\n")
    s = workload.spec
    manifest = {
        "format": FORMAT, "version": 1, "seed": s.seed,
        "templates": [t.to_dict() for t in workload.templates],
        "queries": [q.query_id for q in workload.queries],
        "n_train": len(workload.train), "n_test": len(workload.test),
        "selectivity": list(s.selectivity), "filters_per_query": list(s.filters_per_query),
    }
    path = out / WORKLOAD_FILE
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def read_workload(in_dir) -> Workload:
    base = Path(in_dir)
    try:
        manifest = json.loads((base / WORKLOAD_FILE).read_text())
    except FileNotFoundError:
        raise DataError(f"no workload in {base} (run gen-workload first)") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"unreadable workload manifest: {exc}") from None
    if manifest.get("format") != FORMAT:
        raise DataError(f"{base / WORKLOAD_FILE} is not a workload manifest")
    templates = tuple(Template.from_dict(t) for t in manifest["templates"])
    queries = []
    for qid in manifest["queries"]:
        try:
            raw = json.loads((base / "queries" / f"{qid}.json").read_text())
        except FileNotFoundError:
            raise DataError(f"query file for {qid} is missing") from None
        queries.append(QuerySpec.from_dict(raw))
    spec = WorkloadSpec(templates=templates, seed=int(manifest["seed"]),
                        n_test=int(manifest["n_test"]),
                        selectivity=tuple(manifest["selectivity"]),
                        filters_per_query=tuple(manifest["filters_per_query"]))
    return Workload(spec, templates, queries)
