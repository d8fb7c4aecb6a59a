"""Shared domain vocabulary: tokens, procedural steps, boxes.

Everything here is a plain value type. Instances are safe to share across
threads; the single sanctioned mutation is the one-time assignment of a
token's ``entry_position`` when it enters a cache.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np


class TokenKind(Enum):
    VISUAL_FRAME = "visual_frame"
    TEXT = "text"
    LONG_TERM_MARKER = "long_term_marker"
    PROMPT = "prompt"


@dataclass(eq=False)
class Token:
    """One cache entry: a visual frame token, a text token, a group marker
    delimiting a verbalized step, or a pinned prompt token.

    ``entry_position`` is assigned exactly once, at cache entry, and is never
    reassigned afterwards: cached attention keys/values are keyed on it, so it
    must survive eviction of other tokens.
    """

    id: int
    kind: TokenKind
    embedding: np.ndarray
    frame_index: Optional[int] = None
    step_id: Optional[int] = None
    entry_position: Optional[int] = None

    def validate(self) -> "Token":
        if self.kind is TokenKind.VISUAL_FRAME and self.frame_index is None:
            raise ValueError(f"token {self.id}: visual frame token requires frame_index")
        if self.kind in (TokenKind.TEXT, TokenKind.LONG_TERM_MARKER) and self.step_id is None:
            raise ValueError(f"token {self.id}: {self.kind.value} token requires step_id")
        if self.embedding.ndim != 1:
            raise ValueError(f"token {self.id}: embedding must be a 1-d vector")
        return self

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind.value,
            "embedding": [float(x) for x in self.embedding],
            "frame_index": self.frame_index,
            "step_id": self.step_id,
            "entry_position": self.entry_position,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Token":
        return cls(
            id=int(data["id"]),
            kind=TokenKind(data["kind"]),
            embedding=np.asarray(data["embedding"], dtype=np.float64),
            frame_index=data.get("frame_index"),
            step_id=data.get("step_id"),
            entry_position=data.get("entry_position"),
        ).validate()


class TokenFactory:
    """Mints tokens with strictly increasing ids.

    One factory per logical stream; ids are unique across all token kinds so
    cache and attention stores can key on them.
    """

    def __init__(self) -> None:
        self._next_id = 0

    def _take_id(self) -> int:
        tid = self._next_id
        self._next_id += 1
        return tid

    def visual(self, frame_index: int, embedding: np.ndarray) -> Token:
        return Token(self._take_id(), TokenKind.VISUAL_FRAME, embedding,
                     frame_index=frame_index).validate()

    def text(self, step_id: int, embedding: np.ndarray) -> Token:
        return Token(self._take_id(), TokenKind.TEXT, embedding, step_id=step_id).validate()

    def marker(self, step_id: int, embedding: np.ndarray) -> Token:
        return Token(self._take_id(), TokenKind.LONG_TERM_MARKER, embedding,
                     step_id=step_id).validate()

    def prompt(self, embedding: np.ndarray) -> Token:
        return Token(self._take_id(), TokenKind.PROMPT, embedding).validate()


@dataclass
class StepRecord:
    """A procedural step: label, temporal span, and verbal description length."""

    step_id: int
    label: str
    start_s: float
    end_s: float
    text_token_count: int

    def validate(self) -> "StepRecord":
        if self.end_s <= self.start_s:
            raise ValueError(f"step {self.step_id}: end_s must exceed start_s")
        if self.text_token_count < 1:
            raise ValueError(f"step {self.step_id}: text_token_count must be >= 1")
        return self


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in normalized center format (cx, cy, w, h)."""

    cx: float
    cy: float
    w: float
    h: float

    def validate(self) -> "BBox":
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"degenerate box: w={self.w}, h={self.h}")
        return self

    def corners(self, clamp: bool = False) -> np.ndarray:
        """(x1, y1, x2, y2); optionally clamped to the unit square."""
        c = np.array(
            [self.cx - self.w / 2.0, self.cy - self.h / 2.0,
             self.cx + self.w / 2.0, self.cy + self.h / 2.0],
            dtype=np.float64,
        )
        if clamp:
            c = np.clip(c, 0.0, 1.0)
        return c

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "BBox":
        cx, cy, w, h = (float(v) for v in a)
        return cls(cx, cy, w, h).validate()


class PositionClock:
    """Monotone counter handing out cache entry positions.

    Shared between caches when several caches must agree on one global
    ordering (the two-cache baseline strategy does this).
    """

    def __init__(self, start: int = 0) -> None:
        self._next = start

    def next(self) -> int:
        pos = self._next
        self._next += 1
        return pos

    def peek(self) -> int:
        return self._next
