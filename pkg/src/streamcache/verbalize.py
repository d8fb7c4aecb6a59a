"""Online verbalization: turn step predictions into compact text tokens.

A predicted step becomes one marker token plus a handful of text tokens,
unless the same step id was already verbalized within the last ``tau``
predictions. ``budget_report`` does the token-count arithmetic comparing an
all-visual context against the verbalized one.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from .config import SimConfig
from .types import StepRecord, Token, TokenFactory

# Average text tokens per verbalized step; measured step descriptions run
# just under six tokens, so the default budget math uses 5.7.
DEFAULT_TOKENS_PER_STEP = 5.7


class PredictionLog:
    """Ring buffer of the last ``tau`` predicted step ids."""

    def __init__(self, tau: int) -> None:
        if tau < 0:
            raise ValueError(f"tau must be >= 0, got {tau}")
        self.tau = tau
        self._recent: deque = deque(maxlen=tau)

    def __len__(self) -> int:
        return len(self._recent)

    def add(self, step_id: int) -> None:
        if self.tau > 0:
            self._recent.append(step_id)

    def recent(self) -> Tuple[int, ...]:
        return tuple(self._recent)


def should_verbalize(log: PredictionLog, step_id: int) -> bool:
    """True iff ``step_id`` is absent from the last ``tau`` predictions."""
    return step_id not in log._recent


class EmbeddingTable:
    """Seeded vectors for text vocab ids, the group marker, and prompts.

    The marker embedding is a single fixed vector; markers carry no payload
    beyond it.
    """

    def __init__(self, vocab_size: int, d: int, seed: int) -> None:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE]))
        self.vocab = rng.standard_normal((vocab_size, d))
        self.marker = rng.standard_normal(d)
        self._prompt_rng_seed = seed
        self.d = d
        self.vocab_size = vocab_size

    def vocab_embedding(self, vocab_id: int) -> np.ndarray:
        return self.vocab[vocab_id % self.vocab_size]

    def prompt_embedding(self, index: int) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence([self._prompt_rng_seed, 0xB, index]))
        return rng.standard_normal(self.d)


def step_text_vocab_ids(step_id: int, count: int, vocab_size: int) -> List[int]:
    """Deterministic text vocab ids describing a step: same step id, same ids."""
    base = (step_id * 31 + 7) % vocab_size
    return [(base + 3 * j) % vocab_size for j in range(count)]


class Verbalizer:
    """Builds marker + text token groups for predicted steps."""

    def __init__(self, factory: TokenFactory, table: EmbeddingTable) -> None:
        self.factory = factory
        self.table = table

    def verbalize(self, step: StepRecord) -> List[Token]:
        """One marker token followed by ``text_token_count`` text tokens, all
        sharing the step id. Payloads repeat across calls; ids are fresh."""
        if step.text_token_count < 1:
            raise ValueError(f"step {step.step_id}: nothing to verbalize")
        tokens = [self.factory.marker(step.step_id, self.table.marker.copy())]
        for vid in step_text_vocab_ids(step.step_id, step.text_token_count,
                                       self.table.vocab_size):
            tokens.append(self.factory.text(step.step_id, self.table.vocab_embedding(vid).copy()))
        return tokens


def group_consecutive(predictions: Sequence[Tuple[int, int]]) -> List[StepRecord]:
    """Collapse maximal runs of equal step ids into step records.

    ``predictions`` is an ascending (frame, step_id) sequence; run spans are
    reported in frame units with an exclusive end. Token counts are not known
    at this level and default to 1.
    """
    records: List[StepRecord] = []
    prev_frame = None
    for frame, step_id in predictions:
        if prev_frame is not None and frame <= prev_frame:
            raise ValueError(f"frames must be ascending, got {frame} after {prev_frame}")
        prev_frame = frame
        if records and records[-1].step_id == step_id:
            records[-1].end_s = float(frame + 1)
        else:
            records.append(StepRecord(step_id=step_id, label=f"step-{step_id}",
                                      start_s=float(frame), end_s=float(frame + 1),
                                      text_token_count=1))
    return records


@dataclass
class TokenBudgetReport:
    """Token counts for one horizon: all-visual versus verbalized."""

    horizon_s: float
    visual_tokens: float
    verbalized_text_tokens: float
    marker_tokens: float
    verbalized_total: float
    reduction_ratio: float  # visual / verbalized text
    reduction_ratio_with_markers: float

    def to_dict(self) -> dict:
        return {
            "horizon_s": self.horizon_s,
            "visual_tokens": self.visual_tokens,
            "verbalized_text_tokens": self.verbalized_text_tokens,
            "marker_tokens": self.marker_tokens,
            "verbalized_total": self.verbalized_total,
            "reduction_ratio": self.reduction_ratio,
            "reduction_ratio_with_markers": self.reduction_ratio_with_markers,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def budget_report(cfg: SimConfig, horizon_s: float,
                  tokens_per_step: float = DEFAULT_TOKENS_PER_STEP) -> TokenBudgetReport:
    """Expected token budgets over ``horizon_s`` seconds of stream.

    Marker tokens are counted separately from the text tokens; both ratios are
    reported.
    """
    if horizon_s <= 0:
        raise ValueError(f"horizon_s must be > 0, got {horizon_s}")
    if tokens_per_step <= 0:
        raise ValueError(f"tokens_per_step must be > 0, got {tokens_per_step}")
    visual = cfg.fps * horizon_s * cfg.tokens_per_frame
    steps = horizon_s / cfg.mean_step_s
    text = steps * tokens_per_step
    markers = steps
    return TokenBudgetReport(
        horizon_s=float(horizon_s),
        visual_tokens=visual,
        verbalized_text_tokens=text,
        marker_tokens=markers,
        verbalized_total=text + markers,
        reduction_ratio=visual / text,
        reduction_ratio_with_markers=visual / (text + markers),
    )
