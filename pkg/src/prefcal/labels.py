"""Pairwise outcome labels and the perception category vocabulary."""

from __future__ import annotations

from enum import Enum

CATEGORIES: tuple[str, ...] = ("safety", "lively", "beautiful", "wealthy", "depressing", "boring")


class Label(str, Enum):
    """Outcome of a pairwise comparison, oriented as (left, right)."""

    LEFT = "left"
    RIGHT = "right"
    EQUAL = "equal"

    def flip(self) -> Label:
        if self is Label.LEFT:
            return Label.RIGHT
        if self is Label.RIGHT:
            return Label.LEFT
        return Label.EQUAL

    @classmethod
    def parse(cls, token: str | Label) -> Label:
        if isinstance(token, Label):
            return token
        try:
            return cls(str(token).strip().lower())
        except ValueError:
            raise ValueError(f"unknown label {token!r}") from None

    def __str__(self) -> str:
        return self.value


def check_category(category: str, allowed: tuple[str, ...] | None = None) -> str:
    allowed = CATEGORIES if allowed is None else allowed
    if category not in allowed:
        raise ValueError(f"unknown category {category!r}; expected one of {', '.join(allowed)}")
    return category
