"""Small enums shared by the index, gateway and router."""

from __future__ import annotations

from enum import Enum


class Category(str, Enum):
    ANIMAL = "animal"
    PLANT = "plant"
    OTHER = "other"

    @classmethod
    def parse(cls, value: str | "Category") -> "Category":
        if isinstance(value, Category):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ValueError(f"unknown category {value!r}") from None


# categories that have entries in a centroid index
SPECIALIZED = frozenset({Category.ANIMAL, Category.PLANT})


class Granularity(str, Enum):
    FINE = "fine"
    COARSE = "coarse"
