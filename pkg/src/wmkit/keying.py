"""Watermark key material: per-context green lists and pivot uniforms.

Two keyed pseudorandom functions are realized by seeding the shared
mix-finalizer stream with a fold of (master secret XOR tag, previous k
tokens).  Distinct tag constants separate the green-list PRF, the pivot
PRF, and the permutation PRF, so their outputs are independent inputs to
the mixer.  A small ledger tracks contexts that already triggered
watermarking so repeated contexts can be left unwatermarked.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import GOLDEN, MASK64, RngStream, fold64, mix64, mix64_array

__all__ = [
    "GREEN_TAG",
    "ZETA_TAG",
    "PERM_TAG",
    "GREEN_MODES",
    "WatermarkKey",
    "MaskLedger",
    "derive_seed",
    "derive_seed_batch",
    "derive_zeta",
    "derive_zeta_batch",
    "is_green",
    "green_mask",
    "green_mask_batch",
    "is_green_batch",
    "keyed_permutation",
    "keyed_permutation_batch",
    "green_set_exact",
    "gumbel_uniform",
    "format_key",
    "parse_key",
    "ContextLengthMismatch",
    "KeyFormatError",
]

GREEN_TAG = 0x11
ZETA_TAG = 0x22
PERM_TAG = 0x33

# hash:   per-context hash membership, O(1) per token, |green| ~ Binomial(V, gamma)
# single: one context-independent membership hash shared by every step
# perm:   per-context keyed permutation, exactly floor(gamma * V) green tokens
GREEN_MODES = ("hash", "single", "perm")

ContextTuple = tuple[int, ...]

_INV_2_53 = 2.0**-53


class ContextLengthMismatch(ValueError):
    """Raised when a context tuple does not have exactly k tokens."""


class KeyFormatError(ValueError):
    """Raised when a serialized key string cannot be parsed."""


@dataclass(frozen=True)
class WatermarkKey:
    """64-bit master secret with context width k and green fraction gamma."""

    master: int
    k: int
    gamma: float
    green_mode: str = "hash"

    def __post_init__(self):
        if not 0 <= self.master <= MASK64:
            raise ValueError("master must be a 64-bit integer")
        if self.k < 0:
            raise ValueError("context width k must be >= 0")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("green fraction gamma must lie in (0, 1)")
        if self.green_mode not in GREEN_MODES:
            raise ValueError(f"green_mode must be one of {GREEN_MODES}")


def format_key(key: WatermarkKey) -> str:
    """Serialize as ``<16 hex digits>:k=<int>:g=<float>:mode=<mode>``."""
    return f"{key.master:016x}:k={key.k}:g={key.gamma!r}:mode={key.green_mode}"


def parse_key(text: str) -> WatermarkKey:
    """Inverse of :func:`format_key`; raises :class:`KeyFormatError` on bad input."""
    parts = text.strip().split(":")
    if len(parts) != 4:
        raise KeyFormatError(f"expected 4 colon-separated fields, got {len(parts)}")
    master_s, k_s, g_s, mode_s = parts
    try:
        if not (1 <= len(master_s) <= 16):
            raise ValueError
        master = int(master_s, 16)
    except ValueError:
        raise KeyFormatError(f"master must be 1-16 hex digits, got {master_s!r}") from None
    for prefix, part in (("k=", k_s), ("g=", g_s), ("mode=", mode_s)):
        if not part.startswith(prefix):
            raise KeyFormatError(f"expected field starting with {prefix!r}, got {part!r}")
    try:
        k = int(k_s[2:])
        gamma = float(g_s[2:])
    except ValueError as exc:
        raise KeyFormatError(str(exc)) from None
    mode = mode_s[5:]
    try:
        return WatermarkKey(master=master, k=k, gamma=gamma, green_mode=mode)
    except ValueError as exc:
        raise KeyFormatError(str(exc)) from None


def _check_context(key: WatermarkKey, ctx) -> None:
    if len(ctx) != key.k:
        raise ContextLengthMismatch(f"context has {len(ctx)} tokens, key expects {key.k}")


def derive_seed(key: WatermarkKey, ctx, tag: int) -> int:
    """Deterministic 64-bit seed from (master XOR tag) folded with the context."""
    _check_context(key, ctx)
    return mix64(fold64(key.master ^ tag, ctx))


def derive_seed_batch(key: WatermarkKey, ctxs: np.ndarray, tag: int) -> np.ndarray:
    """Vectorized :func:`derive_seed` for an (n, k) array of contexts."""
    ctxs = np.asarray(ctxs)
    if ctxs.ndim != 2 or ctxs.shape[1] != key.k:
        raise ContextLengthMismatch(f"context array must have shape (n, {key.k})")
    s = np.full(ctxs.shape[0], (key.master ^ tag) & MASK64, dtype=np.uint64)
    for col in range(key.k):
        tok = ctxs[:, col].astype(np.uint64)
        s = mix64_array(s * np.uint64(GOLDEN) + tok + np.uint64(1))
    return mix64_array(s)


def _token_hash(token: int) -> int:
    return mix64(((int(token) + 1) * GOLDEN) & MASK64)


def _first_uniform_array(states: np.ndarray) -> np.ndarray:
    # First stream draw for each state, i.e. the value at counter 1.
    z = mix64_array(states + np.uint64(GOLDEN))
    return (z >> np.uint64(11)).astype(np.float64) * _INV_2_53


def _green_seed(key: WatermarkKey, ctx) -> int:
    if key.green_mode == "single":
        # Context-independent: the membership hash is shared by every step.
        return mix64(key.master ^ GREEN_TAG)
    return derive_seed(key, ctx, GREEN_TAG)


def is_green(key: WatermarkKey, ctx, token: int, vocab_size: int | None = None) -> bool:
    """Green-list membership of one token under the keyed partition."""
    if key.green_mode == "perm":
        if vocab_size is None:
            raise ValueError("perm mode needs vocab_size for membership queries")
        return bool(green_mask(key, ctx, vocab_size)[int(token)])
    state = _green_seed(key, ctx) ^ _token_hash(token)
    return RngStream(state).next_uniform() < key.gamma


def green_mask(key: WatermarkKey, ctx, vocab_size: int) -> np.ndarray:
    """Boolean membership vector over the whole vocabulary."""
    if key.green_mode == "perm":
        perm = keyed_permutation(key, ctx, vocab_size)
        mask = np.zeros(vocab_size, dtype=bool)
        mask[perm[: int(key.gamma * vocab_size)]] = True
        return mask
    seed = np.uint64(_green_seed(key, ctx))
    hashes = mix64_array(np.arange(1, vocab_size + 1, dtype=np.uint64) * np.uint64(GOLDEN))
    return _first_uniform_array(seed ^ hashes) < key.gamma


def green_mask_batch(key: WatermarkKey, ctxs: np.ndarray, vocab_size: int) -> np.ndarray:
    """(n, vocab_size) membership matrix for an (n, k) array of contexts."""
    if key.green_mode == "perm":
        perms = keyed_permutation_batch(derive_seed_batch(key, ctxs, PERM_TAG), vocab_size)
        mask = np.zeros(perms.shape, dtype=bool)
        rows = np.arange(perms.shape[0])[:, None]
        mask[rows, perms[:, : int(key.gamma * vocab_size)]] = True
        return mask
    if key.green_mode == "single":
        row = green_mask(key, (), vocab_size)
        return np.broadcast_to(row, (np.asarray(ctxs).shape[0], vocab_size)).copy()
    seeds = derive_seed_batch(key, ctxs, GREEN_TAG)
    hashes = mix64_array(np.arange(1, vocab_size + 1, dtype=np.uint64) * np.uint64(GOLDEN))
    return _first_uniform_array(seeds[:, None] ^ hashes[None, :]) < key.gamma


def is_green_batch(
    key: WatermarkKey, ctxs: np.ndarray, tokens: np.ndarray, vocab_size: int | None = None
) -> np.ndarray:
    """Vectorized :func:`is_green` for paired (n, k) contexts and (n,) tokens."""
    ctxs = np.asarray(ctxs)
    tokens = np.asarray(tokens, dtype=np.int64)
    if key.green_mode == "perm":
        if vocab_size is None:
            raise ValueError("perm mode needs vocab_size for membership queries")
        mask = green_mask_batch(key, ctxs, vocab_size)
        return mask[np.arange(len(tokens)), tokens]
    if key.green_mode == "single":
        seeds = np.full(len(tokens), mix64(key.master ^ GREEN_TAG), dtype=np.uint64)
    else:
        seeds = derive_seed_batch(key, ctxs, GREEN_TAG)
    hashes = mix64_array((tokens.astype(np.uint64) + np.uint64(1)) * np.uint64(GOLDEN))
    return _first_uniform_array(seeds ^ hashes) < key.gamma


def keyed_permutation(key: WatermarkKey, ctx, vocab_size: int) -> np.ndarray:
    """Fisher-Yates permutation of [0, vocab_size) driven by the keyed stream."""
    stream = RngStream(derive_seed(key, ctx, PERM_TAG))
    perm = np.arange(vocab_size, dtype=np.int64)
    for i in range(vocab_size - 1, 0, -1):
        j = int(stream.next_uniform() * (i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def keyed_permutation_batch(seeds: np.ndarray, vocab_size: int) -> np.ndarray:
    """Vectorized Fisher-Yates: one permutation row per seed.

    Matches :func:`keyed_permutation` draw-for-draw so scalar and batch
    paths produce identical permutations for the same seed.
    """
    n = seeds.shape[0]
    counters = np.arange(1, vocab_size, dtype=np.uint64)
    z = mix64_array(seeds[:, None].astype(np.uint64) + counters[None, :] * np.uint64(GOLDEN))
    u = (z >> np.uint64(11)).astype(np.float64) * _INV_2_53
    perm = np.tile(np.arange(vocab_size, dtype=np.int64), (n, 1))
    rows = np.arange(n)
    for idx, i in enumerate(range(vocab_size - 1, 0, -1)):
        j = (u[:, idx] * (i + 1)).astype(np.int64)
        pi = perm[rows, i].copy()
        perm[rows, i] = perm[rows, j]
        perm[rows, j] = pi
    return perm


def green_set_exact(key: WatermarkKey, ctx, vocab_size: int) -> frozenset[int]:
    """Exactly floor(gamma * vocab_size) green tokens from the keyed permutation."""
    perm = keyed_permutation(key, ctx, vocab_size)
    return frozenset(int(t) for t in perm[: int(key.gamma * vocab_size)])


def derive_zeta(key: WatermarkKey, ctx) -> float:
    """Keyed pivot uniform for one context: first draw of the ZETA stream."""
    return RngStream(derive_seed(key, ctx, ZETA_TAG)).next_uniform()


def derive_zeta_batch(key: WatermarkKey, ctxs: np.ndarray) -> np.ndarray:
    """Vectorized :func:`derive_zeta` for an (n, k) array of contexts."""
    return _first_uniform_array(derive_seed_batch(key, ctxs, ZETA_TAG))


def gumbel_uniform(key: WatermarkKey, ctx, token: int) -> float:
    """Per-token uniform used by the Gumbel-max decoder: draw ``token + 1``
    of the ZETA-seeded stream, addressed without generating predecessors."""
    return RngStream(derive_seed(key, ctx, ZETA_TAG)).value_at(int(token) + 1)


@dataclass
class MaskLedger:
    """Records contexts that already triggered watermarking within one text."""

    seen_contexts: set = field(default_factory=set)

    def check_and_record(self, ctx) -> bool:
        """True iff the context is fresh (watermark should be applied); the
        context is recorded either way."""
        ctx = tuple(int(t) for t in ctx)
        fresh = ctx not in self.seen_contexts
        self.seen_contexts.add(ctx)
        return fresh
