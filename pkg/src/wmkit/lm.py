"""Token-distribution sources: seeded synthetic Markov models and replay
of recorded next-token-probability traces.

A source exposes ``next(history) -> NtpDistribution`` plus ``vocab_size``
and stands in for a language model.  MarkovSource synthesizes Dirichlet-like
rows lazily from the deterministic keyed stream, so identical (seed,
context) pairs reproduce identical rows across processes.  Traces are JSON
Lines files that let externally recorded model outputs drive the decoders
without any inference in-process.
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from .core import MASK64, NotNormalized, NtpDistribution, RngStream, fold64, make_ntp, mix64

__all__ = [
    "NtpSource",
    "MarkovSource",
    "NtpTrace",
    "TraceSource",
    "markov_next",
    "save_trace",
    "load_trace",
    "replay_next",
    "parse_model_spec",
    "MalformedTrace",
    "EndOfTrace",
]

# Domain tag separating row-synthesis streams from watermark key streams.
_ROW_TAG = 0x5A


class MalformedTrace(ValueError):
    """Raised when a trace file violates the trace format."""


class EndOfTrace(IndexError):
    """Raised when replay is asked for a step past the recorded horizon."""


@runtime_checkable
class NtpSource(Protocol):
    """Anything that can emit a next-token distribution for a history."""

    vocab_size: int

    def next(self, history: Sequence[int]) -> NtpDistribution: ...


def _standard_normal(stream: RngStream) -> float:
    # Box-Muller; 1 - u keeps the log argument in (0, 1].
    u1 = 1.0 - stream.next_uniform()
    u2 = stream.next_uniform()
    return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)


def _gamma_draw(stream: RngStream, shape: float) -> float:
    """Marsaglia-Tsang gamma sampler driven by the keyed stream."""
    if shape < 1.0:
        # Boost: Gamma(a) = Gamma(a + 1) * U^(1/a).
        u = 1.0 - stream.next_uniform()
        return _gamma_draw(stream, shape + 1.0) * u ** (1.0 / shape)
    d = shape - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    while True:
        x = _standard_normal(stream)
        v = (1.0 + c * x) ** 3
        if v <= 0.0:
            continue
        u = 1.0 - stream.next_uniform()
        if math.log(u) < 0.5 * x * x + d - d * v + d * math.log(v):
            return d * v


@dataclass
class MarkovSource:
    """Order-k Markov model whose rows are lazily synthesized Dirichlet
    draws: normalized Gamma(concentration) variates from a stream keyed by
    (seed, context), then tempered by exponent 1/temperature.

    Rows are cached (bounded LRU) so long generations stay memory-stable
    and repeated contexts cost one synthesis.
    """

    order: int
    vocab_size: int
    concentration: float = 0.3
    seed: int = 0
    temperature: float = 1.0
    cache_size: int = 1 << 20
    _cache: OrderedDict = field(default_factory=OrderedDict, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.order < 0:
            raise ValueError("order must be >= 0")
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")
        if not self.concentration > 0.0:
            raise ValueError("concentration must be > 0")
        if not self.temperature > 0.0:
            raise ValueError("temperature must be > 0")

    def _context(self, history: Sequence[int]) -> tuple[int, ...]:
        if self.order == 0:
            return ()
        tail = tuple(int(t) for t in history[-self.order :])
        if len(tail) < self.order:
            tail = (0,) * (self.order - len(tail)) + tail
        return tail

    def _row(self, ctx: tuple[int, ...]) -> NtpDistribution:
        cached = self._cache.get(ctx)
        if cached is not None:
            self._cache.move_to_end(ctx)
            return cached
        stream = RngStream(mix64(fold64((self.seed ^ _ROW_TAG) & MASK64, ctx)))
        raw = np.array(
            [_gamma_draw(stream, self.concentration) for _ in range(self.vocab_size)]
        )
        if raw.sum() <= 0.0:
            raw = np.ones(self.vocab_size)
        row = raw / raw.sum()
        if self.temperature != 1.0:
            row = row ** (1.0 / self.temperature)
        dist = make_ntp(row)
        self._cache[ctx] = dist
        if len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return dist

    def next(self, history: Sequence[int]) -> NtpDistribution:
        return self._row(self._context(history))


def markov_next(src: MarkovSource, history: Sequence[int]) -> NtpDistribution:
    """Row for the last ``src.order`` tokens of the history."""
    return src.next(history)


@dataclass
class NtpTrace:
    """Recorded per-step next-token distributions, optionally with the
    tokens the recording run actually took."""

    vocab_size: int
    steps: list[NtpDistribution]
    tokens_taken: list[int] | None = None


def save_trace(trace: NtpTrace, path: Path | str) -> None:
    """Write the JSON Lines trace format: a header line with vocab_size and
    n_steps, then one line per step with full-precision probabilities."""
    lines = [json.dumps({"vocab_size": trace.vocab_size, "n_steps": len(trace.steps)})]
    for i, step in enumerate(trace.steps):
        row: dict = {"t": i, "probs": [float(p) for p in step.probs]}
        if trace.tokens_taken is not None:
            row["token"] = int(trace.tokens_taken[i])
        lines.append(json.dumps(row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_trace(path: Path | str) -> NtpTrace:
    """Parse and validate a trace file; any structural or numerical problem
    raises MalformedTrace."""
    raw_lines = Path(path).read_text().splitlines()
    if not raw_lines:
        raise MalformedTrace("empty trace file")
    try:
        header = json.loads(raw_lines[0])
    except json.JSONDecodeError as exc:
        raise MalformedTrace(f"bad header line: {exc}") from exc
    if not isinstance(header, dict) or "vocab_size" not in header or "n_steps" not in header:
        raise MalformedTrace("header must carry vocab_size and n_steps")
    vocab_size = int(header["vocab_size"])
    n_steps = int(header["n_steps"])
    body = [ln for ln in raw_lines[1:] if ln.strip()]
    if len(body) != n_steps:
        raise MalformedTrace(f"header promises {n_steps} steps, found {len(body)}")
    steps: list[NtpDistribution] = []
    tokens: list[int] = []
    for i, ln in enumerate(body):
        try:
            row = json.loads(ln)
        except json.JSONDecodeError as exc:
            raise MalformedTrace(f"bad step line {i}: {exc}") from exc
        if row.get("t") != i:
            raise MalformedTrace(f"step line {i} carries t={row.get('t')}")
        probs = row.get("probs")
        if not isinstance(probs, list) or len(probs) != vocab_size:
            raise MalformedTrace(f"step {i} needs {vocab_size} probabilities")
        try:
            steps.append(make_ntp(np.array(probs, dtype=np.float64), strict=True))
        except (NotNormalized, ValueError) as exc:
            raise MalformedTrace(f"step {i}: {exc}") from exc
        if "token" in row:
            tokens.append(int(row["token"]))
    if tokens and len(tokens) != n_steps:
        raise MalformedTrace("tokens must be present on every step or none")
    return NtpTrace(vocab_size=vocab_size, steps=steps, tokens_taken=tokens or None)


def replay_next(trace: NtpTrace, t: int) -> NtpDistribution:
    """Distribution recorded at step t; past the horizon raises EndOfTrace."""
    if not 0 <= t < len(trace.steps):
        raise EndOfTrace(f"trace has {len(trace.steps)} steps, asked for t={t}")
    return trace.steps[t]


@dataclass
class TraceSource:
    """Cursor-based source replaying a trace step by step; the history
    argument is ignored because the distributions were recorded offline."""

    trace: NtpTrace
    cursor: int = 0

    @property
    def vocab_size(self) -> int:
        return self.trace.vocab_size

    def next(self, history: Sequence[int]) -> NtpDistribution:
        dist = replay_next(self.trace, self.cursor)
        self.cursor += 1
        return dist

    def reset(self) -> None:
        self.cursor = 0


def parse_model_spec(spec: str):
    """Build a source from a compact spec string.

    ``markov:seed=7,vocab=64,order=2[,conc=0.3][,temp=1.0]`` or
    ``trace:path=file.jsonl``.
    """
    kind, _, rest = spec.partition(":")
    params: dict[str, str] = {}
    if rest:
        for part in rest.split(","):
            if "=" not in part:
                raise ValueError(f"malformed model parameter {part!r}")
            k, _, v = part.partition("=")
            params[k.strip()] = v.strip()
    if kind == "markov":
        known = {"seed", "vocab", "order", "conc", "temp"}
        unknown = set(params) - known
        if unknown:
            raise ValueError(f"unknown markov parameters: {sorted(unknown)}")
        missing = {"seed", "vocab", "order"} - set(params)
        if missing:
            raise ValueError(f"markov spec needs: {sorted(missing)}")
        return MarkovSource(
            order=int(params["order"]),
            vocab_size=int(params["vocab"]),
            concentration=float(params.get("conc", 0.3)),
            seed=int(params["seed"]),
            temperature=float(params.get("temp", 1.0)),
        )
    if kind == "trace":
        if set(params) != {"path"}:
            raise ValueError("trace spec needs exactly path=...")
        return TraceSource(load_trace(params["path"]))
    raise ValueError(f"unknown model kind {kind!r}")
