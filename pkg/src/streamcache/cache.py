"""Interleaved FIFO token cache with one entry point and two typed exits.

Visual frame tokens and verbalized text tokens live in a single ordered
sequence. ``exit_short`` trims the oldest visual tokens down to the visual
capacity; ``exit_long`` trims whole verbalized groups (marker plus its step's
text tokens) down to the long-term capacity. Prompt tokens are pinned and
never evicted. Exits are explicit calls, not side effects of entry, so a
run's op sequence is auditable.

Single-writer: all mutations come from one logical stream thread. Snapshots
returned by ``live_tokens`` are immutable tuples, safe to hand elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

from .types import PositionClock, Token, TokenKind


class CacheStructureError(RuntimeError):
    """The cache contents violate the marker/text group structure."""


@dataclass
class CacheEvent:
    """One audit-log row: an entry or an exit with the token ids it touched."""

    t: float
    op: str  # entry | exit_short | exit_long
    token_ids: List[int]
    kind: str

    def to_dict(self) -> dict:
        return {"t": self.t, "op": self.op, "token_ids": self.token_ids, "kind": self.kind}


class InterleavedCache:
    """FIFO cache of interleaved visual/text tokens with per-kind capacities.

    ``n_s`` caps VISUAL_FRAME tokens, ``n_l`` caps LONG_TERM_MARKER entries
    (each marker's text tokens leave with it). ``n_l=None`` means unbounded.
    """

    def __init__(self, n_s: int, n_l: Optional[int],
                 clock: Optional[PositionClock] = None,
                 events: Optional[List[CacheEvent]] = None) -> None:
        if n_s < 1:
            raise ValueError(f"n_s must be >= 1, got {n_s}")
        if n_l is not None and n_l < 0:
            raise ValueError(f"n_l must be >= 0, got {n_l}")
        self.n_s = n_s
        self.n_l = n_l
        self.tokens: List[Token] = []
        self.visual_count = 0
        self.long_count = 0
        self._ids = set()
        self._clock = clock if clock is not None else PositionClock()
        # several caches may share one event list to keep a global op order
        self.events = events if events is not None else []

    def __len__(self) -> int:
        return len(self.tokens)

    def live_tokens(self) -> tuple:
        """Snapshot of live tokens in entry order."""
        return tuple(self.tokens)

    def live_ids(self) -> tuple:
        return tuple(tok.id for tok in self.tokens)

    def entry(self, token: Token, t: float = 0.0) -> None:
        """Append ``token`` at the tail with a fresh entry position.

        No eviction happens here; overflow is resolved by the exit calls.
        """
        if token.id in self._ids:
            raise ValueError(f"duplicate token id {token.id}")
        if token.entry_position is not None:
            raise ValueError(f"token {token.id} already entered a cache")
        token.entry_position = self._clock.next()
        self.tokens.append(token)
        self._ids.add(token.id)
        if token.kind is TokenKind.VISUAL_FRAME:
            self.visual_count += 1
        elif token.kind is TokenKind.LONG_TERM_MARKER:
            self.long_count += 1
        self.events.append(CacheEvent(t, "entry", [token.id], token.kind.value))

    def exit_short(self, t: float = 0.0) -> List[Token]:
        """Evict oldest visual tokens until the visual count fits ``n_s``."""
        evicted: List[Token] = []
        while self.visual_count > self.n_s:
            idx = next(i for i, tok in enumerate(self.tokens)
                       if tok.kind is TokenKind.VISUAL_FRAME)
            evicted.append(self._pop(idx))
        self.events.append(CacheEvent(t, "exit_short", [tok.id for tok in evicted],
                                      TokenKind.VISUAL_FRAME.value))
        return evicted

    def exit_long(self, t: float = 0.0) -> List[List[Token]]:
        """Evict oldest verbalized groups until the marker count fits ``n_l``.

        A group is a marker plus the contiguous run of TEXT tokens right after
        it that share its step_id.
        """
        groups: List[List[Token]] = []
        while self.n_l is not None and self.long_count > self.n_l:
            idx = next(i for i, tok in enumerate(self.tokens)
                       if tok.kind is TokenKind.LONG_TERM_MARKER)
            marker = self.tokens[idx]
            group = [self._pop(idx)]
            while (idx < len(self.tokens)
                   and self.tokens[idx].kind is TokenKind.TEXT
                   and self.tokens[idx].step_id == marker.step_id):
                group.append(self._pop(idx))
            if len(group) == 1:
                raise CacheStructureError(
                    f"marker {marker.id} (step {marker.step_id}) has no attached text tokens")
            groups.append(group)
        flat = [tok.id for group in groups for tok in group]
        self.events.append(CacheEvent(t, "exit_long", flat,
                                      TokenKind.LONG_TERM_MARKER.value))
        return groups

    def _pop(self, idx: int) -> Token:
        tok = self.tokens.pop(idx)
        self._ids.discard(tok.id)
        if tok.kind is TokenKind.VISUAL_FRAME:
            self.visual_count -= 1
        elif tok.kind is TokenKind.LONG_TERM_MARKER:
            self.long_count -= 1
        return tok
