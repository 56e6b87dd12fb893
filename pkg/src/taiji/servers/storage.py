"""Tabular lake storage: CSV (or JSON lines) files with a sidecar schema.

A table ``furniture`` lives in ``furniture.csv`` next to
``furniture.schema.json``::

    {"name": "furniture",
     "columns": [["id", "int"], ["title", "string"], ["img", "item-ref"]],
     "refs": {"img": {"dataset": "photos", "modality": "Image"}},
     "modality": "Relational"}

Semi-structured tables use ``<name>.jsonl`` (one object per row) with the
same schema file.
"""

from __future__ import annotations

import csv
import io
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Sequence

from ..algebra import DatasetRef, ItemRef, Modality
from ..mcp.server import RWLock

SEMANTIC_TYPES = ("int", "float", "string", "bool", "item-ref")


class UnknownTableError(KeyError):
    def __init__(self, name: str):
        super().__init__(name)
        self.name = name

    def __str__(self) -> str:
        return f"unknown table {self.name!r}"


class SchemaError(ValueError):
    pass


@dataclass
class Table:
    name: str
    columns: tuple[tuple[str, str], ...]
    rows: list[tuple] = field(default_factory=list)
    refs: dict[str, dict] = field(default_factory=dict)
    modality: Modality = Modality.RELATIONAL

    def __post_init__(self):
        self.columns = tuple((str(c), str(t)) for c, t in self.columns)
        for col, typ in self.columns:
            if typ not in SEMANTIC_TYPES:
                raise SchemaError(f"{self.name}.{col}: unknown type {typ!r}")
            if typ == "item-ref" and col not in self.refs:
                raise SchemaError(f"{self.name}.{col}: item-ref column needs a target dataset")
        for row in self.rows:
            self.check_row(row)

    @property
    def column_names(self) -> tuple[str, ...]:
        return tuple(c for c, _ in self.columns)

    def check_row(self, row: Sequence[Any]) -> None:
        if len(row) != len(self.columns):
            raise SchemaError(f"{self.name}: row arity {len(row)} != {len(self.columns)}")
        for v, (col, typ) in zip(row, self.columns):
            if v is not None and not _type_ok(v, typ):
                raise SchemaError(f"{self.name}.{col}: {v!r} is not {typ}")

    def dataset_ref(self) -> DatasetRef:
        return DatasetRef(self.name, self.modality, f"lake://{self.name}", self.columns)

    def schema_json(self) -> dict:
        return {"name": self.name, "columns": [list(c) for c in self.columns],
                "refs": self.refs, "modality": self.modality.value}


def _type_ok(v: Any, typ: str) -> bool:
    if typ == "int":
        return isinstance(v, int) and not isinstance(v, bool)
    if typ == "float":
        return isinstance(v, (int, float)) and not isinstance(v, bool)
    if typ == "string":
        return isinstance(v, str)
    if typ == "bool":
        return isinstance(v, bool)
    return isinstance(v, ItemRef)


def _parse_cell(text: str, typ: str, ref: Optional[dict]) -> Any:
    if text == "":
        return None
    if typ == "int":
        return int(text)
    if typ == "float":
        return float(text)
    if typ == "bool":
        low = text.strip().lower()
        if low not in ("true", "false"):
            raise SchemaError(f"not a bool: {text!r}")
        return low == "true"
    if typ == "item-ref":
        return ItemRef(ref["dataset"], text, Modality.parse(ref["modality"]))
    return text


def _format_cell(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, ItemRef):
        return v.item
    return str(v)


def _from_json_value(v: Any, typ: str, ref: Optional[dict]) -> Any:
    if v is None:
        return None
    if typ == "item-ref":
        return ItemRef(ref["dataset"], str(v), Modality.parse(ref["modality"]))
    if typ == "float" and isinstance(v, int):
        return float(v)
    return v


def read_table(schema_path: Path) -> Table:
    schema = json.loads(schema_path.read_text())
    name = schema["name"]
    cols = [tuple(c) for c in schema["columns"]]
    refs = schema.get("refs", {})
    modality = Modality.parse(schema.get("modality", "Relational"))
    base = schema_path.parent
    rows: list[tuple] = []
    csv_path, jsonl_path = base / f"{name}.csv", base / f"{name}.jsonl"
    if csv_path.exists():
        with csv_path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is not None and tuple(header) != tuple(c for c, _ in cols):
                raise SchemaError(f"{csv_path}: header {header} does not match schema")
            for rec in reader:
                rows.append(tuple(_parse_cell(x, t, refs.get(c)) for x, (c, t) in zip(rec, cols)))
    elif jsonl_path.exists():
        for line in jsonl_path.read_text().splitlines():
            if line.strip():
                doc = json.loads(line)
                rows.append(tuple(_from_json_value(doc.get(c), t, refs.get(c)) for c, t in cols))
    else:
        raise SchemaError(f"no data file for table {name!r} in {base}")
    return Table(name, tuple(cols), rows, refs, modality)


def write_table(table: Table, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / f"{table.name}.schema.json").write_text(
        json.dumps(table.schema_json(), indent=2, sort_keys=True) + "\n")
    if table.modality is Modality.SEMI_STRUCTURED:
        lines = []
        for row in table.rows:
            doc = {c: (v.item if isinstance(v, ItemRef) else v) for (c, _), v in zip(table.columns, row)}
            lines.append(json.dumps(doc, sort_keys=True))
        (directory / f"{table.name}.jsonl").write_text("".join(l + "\n" for l in lines))
        return
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(table.column_names)
    for row in table.rows:
        w.writerow([_format_cell(v) for v in row])
    (directory / f"{table.name}.csv").write_text(buf.getvalue())


class LakeStore:
    """Tables of one lake directory, with a writer latch per table.

    Scans take the read side and get a snapshot of the row list, so they run
    in parallel with each other and never observe a half-applied mutation.
    """

    def __init__(self, directory: Optional[str | Path] = None, tables: Iterable[Table] = ()):
        self.directory = Path(directory) if directory is not None else None
        self._tables: dict[str, Table] = {}
        self._latches: dict[str, RWLock] = {}
        self._meta_lock = threading.Lock()
        if self.directory is not None and self.directory.exists():
            for schema in sorted(self.directory.glob("*.schema.json")):
                t = read_table(schema)
                self._tables[t.name] = t
        for t in tables:
            self._tables[t.name] = t
        self.listeners: list[Callable[[str, dict], None]] = []

    def names(self) -> list[str]:
        return sorted(self._tables)

    def __contains__(self, name: str) -> bool:
        return name in self._tables

    def _latch(self, name: str) -> RWLock:
        with self._meta_lock:
            return self._latches.setdefault(name, RWLock())

    def table(self, name: str) -> Table:
        try:
            return self._tables[name]
        except KeyError:
            raise UnknownTableError(name) from None

    def snapshot(self, name: str) -> tuple[Table, tuple[tuple, ...]]:
        t = self.table(name)
        latch = self._latch(name)
        latch.acquire_read()
        try:
            return t, tuple(t.rows)
        finally:
            latch.release_read()

    def add_table(self, table: Table, persist: bool = True) -> None:
        self._tables[table.name] = table
        if persist and self.directory is not None:
            write_table(table, self.directory)

    def insert(self, name: str, rows: Sequence[Sequence[Any]]) -> int:
        t = self.table(name)
        latch = self._latch(name)
        latch.acquire_write()
        try:
            new = [tuple(r) for r in rows]
            for r in new:
                t.check_row(r)
            t.rows = t.rows + new
            if self.directory is not None:
                write_table(t, self.directory)
        finally:
            latch.release_write()
        self._emit(name, {"kind": "insert", "count": len(new), "columns": list(t.column_names), "rows": new})
        return len(new)

    def delete(self, name: str, keep: Callable[[tuple], bool]) -> int:
        """Remove rows for which ``keep`` is False; returns rows removed."""
        t = self.table(name)
        latch = self._latch(name)
        latch.acquire_write()
        try:
            gone = [r for r in t.rows if not keep(r)]
            t.rows = [r for r in t.rows if keep(r)]
            removed = len(gone)
            if removed and self.directory is not None:
                write_table(t, self.directory)
        finally:
            latch.release_write()
        if removed:
            self._emit(name, {"kind": "delete", "count": removed, "columns": list(t.column_names), "rows": gone})
        return removed

    def _emit(self, name: str, change: dict) -> None:
        """Listeners get the table name and ``{"kind", "count", "columns", "rows"}``."""
        for cb in list(self.listeners):
            cb(name, change)
