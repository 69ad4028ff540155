"""Entity-embedding tables for categorical trip attributes.

Each attribute owns a trainable (levels + 1, dim) table; the extra final row
is a dedicated level for unknown/missing codes (code -1). A lookup
concatenates the selected rows in schema order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CategoricalDomainError, DimensionError, UsageError
from .tensor import Param

MISSING_CODE = -1

INIT_SCALE = 0.05  # tables start uniform in [-0.05, 0.05]


@dataclass(frozen=True)
class EmbeddingAttribute:
    name: str
    cardinality: int  # number of real category levels, excluding the missing level
    dim: int

    def __post_init__(self):
        if self.cardinality < 1:
            raise DimensionError(f"attribute {self.name!r}: cardinality must be >= 1")
        if self.dim < 1:
            raise DimensionError(f"attribute {self.name!r}: embedding dim must be >= 1")

    @property
    def rows(self) -> int:
        return self.cardinality + 1  # final row = missing/unknown level


@dataclass(frozen=True)
class EmbeddingSchema:
    attributes: tuple[EmbeddingAttribute, ...]

    def __post_init__(self):
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            raise DimensionError("embedding attribute names must be unique")

    @property
    def output_width(self) -> int:
        return sum(a.dim for a in self.attributes)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.attributes)

    def to_jsonable(self):
        return [[a.name, a.cardinality, a.dim] for a in self.attributes]

    @classmethod
    def from_jsonable(cls, data) -> "EmbeddingSchema":
        return cls(tuple(EmbeddingAttribute(n, int(c), int(d)) for n, c, d in data))


def make_schema(entries) -> EmbeddingSchema:
    return EmbeddingSchema(tuple(EmbeddingAttribute(n, c, d) for n, c, d in entries))


class EmbeddingTables:
    """One Param table per schema attribute."""

    def __init__(self, schema: EmbeddingSchema, tables: dict[str, Param]):
        self.schema = schema
        self.tables = tables
        for attr in schema.attributes:
            t = tables[attr.name]
            if t.shape != (attr.rows, attr.dim):
                raise DimensionError(
                    f"table {attr.name!r} shape {t.shape} != ({attr.rows}, {attr.dim})"
                )

    @classmethod
    def create(cls, schema: EmbeddingSchema, rng_for) -> "EmbeddingTables":
        tables = {
            a.name: Param(rng_for(a.name).uniform(-INIT_SCALE, INIT_SCALE, size=(a.rows, a.dim)))
            for a in schema.attributes
        }
        return cls(schema, tables)

    def params(self, prefix: str = "embed") -> dict[str, Param]:
        return {f"{prefix}.{a.name}": self.tables[a.name] for a in self.schema.attributes}


def _resolve_codes(attr: EmbeddingAttribute, codes: np.ndarray) -> np.ndarray:
    rows = np.where(codes == MISSING_CODE, attr.cardinality, codes)
    bad = (rows < 0) | (rows >= attr.rows)
    if bad.any():
        value = int(codes[bad][0])
        raise CategoricalDomainError(
            f"attribute {attr.name!r}: code {value} outside [0, {attr.cardinality}) "
            f"and not the missing marker {MISSING_CODE}"
        )
    return rows


def embed(tables: EmbeddingTables, codes: np.ndarray):
    """Look up and concatenate embedding rows.

    codes: (batch, n_attributes) integer array in schema order.
    Returns (out, cache) where out is (batch, sum of dims).
    """
    schema = tables.schema
    codes = np.asarray(codes)
    if codes.ndim != 2 or codes.shape[1] != len(schema.attributes):
        raise DimensionError(
            f"codes shape {codes.shape} != (batch, {len(schema.attributes)})"
        )
    pieces, rows_per_attr = [], []
    for j, attr in enumerate(schema.attributes):
        rows = _resolve_codes(attr, codes[:, j])
        rows_per_attr.append(rows)
        pieces.append(tables.tables[attr.name].value[rows])
    out = np.concatenate(pieces, axis=1)
    return out, rows_per_attr


def embed_backward(tables: EmbeddingTables, cache, d_out: np.ndarray) -> None:
    """Scatter-add upstream slices into the rows that were looked up."""
    if cache is None:
        raise UsageError("embed_backward requires the forward cache")
    schema = tables.schema
    col = 0
    for attr, rows in zip(schema.attributes, cache):
        d_slice = d_out[:, col : col + attr.dim]
        np.add.at(tables.tables[attr.name].grad, rows, d_slice)
        col += attr.dim


def table_1_schema() -> EmbeddingSchema:
    """Default categorical schema for the survey attributes with embedded levels."""
    return make_schema(
        [
            ("day_of_week", 7, 4),
            ("hour_start", 24, 12),
            ("hour_end", 24, 12),
            ("cbd_origin", 2, 1),
            ("cbd_destin", 2, 1),
            ("mtl_origin", 2, 1),
            ("mtl_destin", 2, 1),
            ("sex", 3, 2),
            ("occupation", 6, 2),
            ("age", 6, 3),
        ]
    )
