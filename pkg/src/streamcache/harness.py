"""Synthetic procedural streams and the three caching strategies.

A stream is a sequence of labelled steps rendered to per-frame feature
vectors (class prototype plus Gaussian noise). Each strategy replays the
stream through the attention engine and records a per-frame trace of token
counts and multiply-add costs:

- ``a1`` ProgressiveVisual: every frame token kept forever, no verbalization.
- ``a2`` VerbalizedSeparate: short and long caches kept apart; every
  verbalization re-encodes the whole short cache over the grown long prefix
  and that cost is charged to the frame as conversion recompute.
- ``b``  Interleaved: one cache, one entry point; frame entry, short exit,
  prediction, dedup-gated verbalization, long exit, in that order every
  frame. Retained text tokens are appended incrementally, so the only
  prediction-path cost is the frame append itself.

Strategies never share mutable state; each run builds its own factory,
caches, and engine, so runs can execute on parallel workers.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence

import numpy as np

from .attention import AttentionEngine, recompute_flop_cost
from .cache import CacheEvent, InterleavedCache
from .config import SimConfig, validate_config
from .types import PositionClock, StepRecord, Token, TokenFactory
from .verbalize import EmbeddingTable, PredictionLog, Verbalizer, should_verbalize

ENGINE_HEADS = 4
ENGINE_LAYERS = 2
DEFAULT_PROMPT_TOKENS = 4


class StrategyKind(Enum):
    PROGRESSIVE_VISUAL = "a1"
    VERBALIZED_SEPARATE = "a2"
    INTERLEAVED = "b"


@dataclass
class StreamFrame:
    index: int
    time_s: float
    step_id: int
    feature: np.ndarray
    gt_boxes: Optional[list] = None


@dataclass
class SyntheticStream:
    steps: List[StepRecord]
    frames: List[StreamFrame]
    fps: float
    seed: int
    class_ids: List[int]
    labels: List[str]
    class_token_counts: np.ndarray
    prototypes: np.ndarray

    def label(self, class_id: int) -> str:
        return self.labels[class_id]


def generate_stream(cfg: SimConfig, duration_s: float, n_classes: int = 20,
                    feature_noise: float = 0.1,
                    class_noise: Optional[Dict[int, float]] = None) -> SyntheticStream:
    """Deterministic stream: step durations are clamped normals around
    ``mean_step_s`` and adjacent steps always change class."""
    validate_config(cfg)
    if duration_s <= 0:
        raise ValueError(f"duration_s must be > 0, got {duration_s}")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x57]))
    prototypes = rng.standard_normal((n_classes, cfg.d))
    # description lengths of 5 or 6 tokens, 70% long: mean 5.7 per class
    class_token_counts = 5 + (rng.random(n_classes) < 0.7).astype(np.int64)
    labels = [f"step-{c:02d}" for c in range(n_classes)]

    steps: List[StepRecord] = []
    t = 0.0
    prev_class = -1
    min_dur = 1.0 / cfg.fps
    while t < duration_s:
        c = int(rng.integers(n_classes))
        if c == prev_class:
            c = (c + 1) % n_classes
        dur = float(rng.normal(cfg.mean_step_s, cfg.step_s_jitter))
        dur = max(dur, min_dur)
        end = min(t + dur, duration_s)
        steps.append(StepRecord(step_id=c, label=labels[c], start_s=t, end_s=end,
                                text_token_count=int(class_token_counts[c])).validate())
        prev_class = c
        t = end

    n_frames = int(round(duration_s * cfg.fps))
    frames: List[StreamFrame] = []
    step_idx = 0
    for i in range(n_frames):
        ts = i / cfg.fps
        while step_idx + 1 < len(steps) and ts >= steps[step_idx].end_s:
            step_idx += 1
        c = steps[step_idx].step_id
        sigma = feature_noise if class_noise is None else class_noise.get(c, feature_noise)
        feature = prototypes[c] + sigma * rng.standard_normal(cfg.d)
        frames.append(StreamFrame(index=i, time_s=ts, step_id=c, feature=feature))
    return SyntheticStream(steps=steps, frames=frames, fps=cfg.fps, seed=cfg.seed,
                           class_ids=list(range(n_classes)), labels=labels,
                           class_token_counts=class_token_counts, prototypes=prototypes)


def oracle_predict(true_step_id: int, class_ids: Sequence[int], noise_p: float,
                   rng: np.random.Generator) -> int:
    """True id with probability 1 - noise_p, else uniform over all class ids."""
    if not 0.0 <= noise_p <= 1.0:
        raise ValueError(f"noise_p must be in [0, 1], got {noise_p}")
    if noise_p > 0.0 and rng.random() < noise_p:
        return int(class_ids[int(rng.integers(len(class_ids)))])
    return int(true_step_id)


class OraclePredictor:
    """Seeded stand-in for the decoder's per-frame step prediction."""

    def __init__(self, stream: SyntheticStream, noise_p: float, seed: int) -> None:
        if not 0.0 <= noise_p <= 1.0:
            raise ValueError(f"noise_p must be in [0, 1], got {noise_p}")
        self.stream = stream
        self.noise_p = noise_p
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA1]))

    def predict(self, frame: StreamFrame) -> int:
        return oracle_predict(frame.step_id, self.stream.class_ids, self.noise_p, self.rng)


@dataclass
class FrameRecord:
    frame: int
    t_s: float
    live_token_count: int
    append_flops: int
    extra_recompute_flops: int
    text_entry_flops: int
    memory_tokens: int
    predicted_step_id: int
    correct: bool
    verbalization_event: bool
    wall_ns: int


@dataclass
class StrategyTrace:
    kind: StrategyKind
    cfg: SimConfig
    rows: List[FrameRecord] = field(default_factory=list)
    cache_events: List[CacheEvent] = field(default_factory=list)
    engine_total_flops: int = 0
    setup_flops: int = 0
    truncated_at: Optional[int] = None

    def live_series(self) -> np.ndarray:
        return np.array([r.live_token_count for r in self.rows], dtype=np.float64)

    def prediction_flops(self) -> np.ndarray:
        """Per-frame flops on the prediction path: the frame append plus any
        conversion recompute that must finish before the prediction."""
        return np.array([r.append_flops + r.extra_recompute_flops for r in self.rows],
                        dtype=np.float64)

    def accuracy(self) -> float:
        if not self.rows:
            return 0.0
        return float(np.mean([r.correct for r in self.rows]))


class StrategyAbort(RuntimeError):
    """Live token count exceeded the configured cap; carries the partial trace."""

    def __init__(self, message: str, trace: StrategyTrace) -> None:
        super().__init__(message)
        self.trace = trace


def spike_ratio(trace: StrategyTrace) -> float:
    """Max over median of the per-frame prediction-path flops."""
    flops = trace.prediction_flops()
    med = float(np.median(flops))
    if med <= 0:
        return 0.0 if flops.max() <= 0 else math.inf
    return float(flops.max() / med)


def run_strategy(kind: StrategyKind, stream: SyntheticStream, cfg: SimConfig, *,
                 noise_p: float = 0.0, prompt_tokens: int = DEFAULT_PROMPT_TOKENS,
                 live_token_cap: Optional[int] = None,
                 with_engine: bool = True) -> StrategyTrace:
    """Replay ``stream`` under one caching strategy and trace every frame.

    ``with_engine=False`` runs the cache mechanics only (all flop columns
    zero), which is enough for symbolic replay comparisons.
    """
    validate_config(cfg)
    factory = TokenFactory()
    clock = PositionClock()
    table = EmbeddingTable(cfg.vocab_size, cfg.d, cfg.seed)
    verbalizer = Verbalizer(factory, table)
    predictor = OraclePredictor(stream, noise_p, cfg.seed)
    log = PredictionLog(cfg.tau)
    engine = AttentionEngine(cfg.d, ENGINE_HEADS, ENGINE_LAYERS, cfg.vocab_size,
                             cfg.seed) if with_engine else None
    trace = StrategyTrace(kind=kind, cfg=cfg)
    events: List[CacheEvent] = trace.cache_events

    n_s_tokens = cfg.N_S * cfg.tokens_per_frame
    if kind is StrategyKind.PROGRESSIVE_VISUAL:
        # capacity never enforced: exits are simply not called
        cap_tokens = len(stream.frames) * cfg.tokens_per_frame + prompt_tokens + 1
        short = InterleavedCache(cap_tokens, None, clock=clock, events=events)
        long = None
    elif kind is StrategyKind.VERBALIZED_SEPARATE:
        short = InterleavedCache(n_s_tokens, None, clock=clock, events=events)
        long = InterleavedCache(1, cfg.N_L, clock=clock, events=events)
    else:
        short = InterleavedCache(n_s_tokens, cfg.N_L, clock=clock, events=events)
        long = short

    def append(token: Token) -> int:
        if engine is None:
            return 0
        before = engine.flop_counter
        engine.append_token(token)
        return engine.flop_counter - before

    def evict(tokens: Sequence[Token]) -> None:
        if engine is not None and tokens:
            engine.evict([tok.id for tok in tokens])

    for i in range(prompt_tokens):
        tok = factory.prompt(table.prompt_embedding(i))
        short.entry(tok, 0.0)
        trace.setup_flops += append(tok)

    inv_fps = 1.0 / cfg.fps
    for frame in stream.frames:
        t0 = time.perf_counter_ns()
        append_flops = 0
        recompute_flops = 0
        text_flops = 0

        for _ in range(cfg.tokens_per_frame):
            tok = factory.visual(frame.index, frame.feature)
            short.entry(tok, frame.time_s)
            append_flops += append(tok)

        if kind is not StrategyKind.PROGRESSIVE_VISUAL:
            evict(short.exit_short(frame.time_s))

        pred = predictor.predict(frame)
        event = False
        if kind is not StrategyKind.PROGRESSIVE_VISUAL and should_verbalize(log, pred):
            event = True
            record = StepRecord(step_id=pred, label=stream.label(pred),
                                start_s=frame.time_s, end_s=frame.time_s + inv_fps,
                                text_token_count=int(stream.class_token_counts[pred]))
            group = verbalizer.verbalize(record)
            for tok in group:
                long.entry(tok, frame.time_s)
                cost = append(tok)
                if kind is StrategyKind.VERBALIZED_SEPARATE:
                    recompute_flops += cost
                else:
                    text_flops += cost
            if kind is StrategyKind.VERBALIZED_SEPARATE and engine is not None:
                # separate caches: the grown long prefix invalidates the short
                # cache's attention state, forcing a full re-encode before the
                # next prediction
                recompute_flops += recompute_flop_cost(
                    n_queries=len(short), n_prefix=len(long), d=cfg.d,
                    layers=ENGINE_LAYERS)
            evicted_groups = long.exit_long(frame.time_s)
            for grp in evicted_groups:
                evict(grp)
        log.add(pred)

        live = len(short) if long is short or long is None else len(short) + len(long)
        trace.rows.append(FrameRecord(
            frame=frame.index, t_s=frame.time_s, live_token_count=live,
            append_flops=append_flops, extra_recompute_flops=recompute_flops,
            text_entry_flops=text_flops, memory_tokens=live,
            predicted_step_id=pred, correct=pred == frame.step_id,
            verbalization_event=event, wall_ns=time.perf_counter_ns() - t0))
        if live_token_cap is not None and live > live_token_cap:
            trace.truncated_at = frame.index
            trace.engine_total_flops = engine.flop_counter if engine else 0
            raise StrategyAbort(
                f"{kind.value}: live tokens {live} exceed cap {live_token_cap} "
                f"at frame {frame.index}", trace)

    if engine is not None:
        expected = {tok.id for tok in short.tokens}
        if long is not None and long is not short:
            expected |= {tok.id for tok in long.tokens}
        if set(engine.live_ids()) != expected:
            raise RuntimeError("attention store diverged from cache contents")
    trace.engine_total_flops = engine.flop_counter if engine else 0
    return trace


@dataclass
class GrowthFit:
    growth_class: str  # linear | sublinear | bounded
    exponent: float
    r2: float

    def to_dict(self) -> dict:
        return {"class": self.growth_class, "exponent": self.exponent, "r2": self.r2}


def fit_growth(trace_or_series) -> GrowthFit:
    """Classify how the live context size grows with the frame count.

    Log-log regression of live tokens against frame index over the last
    three quarters of the run (the first quarter is cache-warmup transient);
    a flat tail short-circuits to "bounded" (both caches capped means the
    derivative heads to zero regardless of the fill-up phase).
    """
    if isinstance(trace_or_series, StrategyTrace):
        series = trace_or_series.live_series()
    else:
        series = np.asarray(trace_or_series, dtype=np.float64)
    n = series.size
    if n < 100:
        raise ValueError(f"need at least 100 frames to fit growth, got {n}")
    start = n // 4
    x = np.log(np.arange(1, n + 1, dtype=np.float64))[start:]
    y = np.log(np.clip(series, 1.0, None))[start:]
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * x + intercept
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot

    tail = series[n // 2:]
    tail_range = float(tail.max() - tail.min())
    if tail_range <= max(0.08 * float(np.median(tail)), 8.0):
        return GrowthFit("bounded", float(slope), r2)
    if slope >= 0.95:
        return GrowthFit("linear", float(slope), r2)
    return GrowthFit("sublinear", float(slope), r2)


def temporal_variance(stream: SyntheticStream, class_id: int) -> float:
    """Mean per-dimension feature variance within the class's segments."""
    seg_vars = []
    current: List[np.ndarray] = []
    total = 0
    for frame in stream.frames:
        if frame.step_id == class_id:
            current.append(frame.feature)
            total += 1
        elif current:
            if len(current) >= 2:
                seg_vars.append(float(np.var(np.stack(current), axis=0, ddof=1).mean()))
            current = []
    if current and len(current) >= 2:
        seg_vars.append(float(np.var(np.stack(current), axis=0, ddof=1).mean()))
    if total < 2:
        raise ValueError(f"class {class_id} has fewer than 2 frames")
    if not seg_vars:
        raise ValueError(f"class {class_id} has no segment with 2+ frames")
    return float(np.mean(seg_vars))
