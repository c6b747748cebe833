"""Watermarked next-token samplers and the autoregressive generation loop.

The main decoder couples the model distribution P with a green-list
restriction Q through maximal coupling: a keyed pivot uniform picks the
overlap branch (min(P, Q), all green for the hard list) or the excess
branch (all red), so the token marginal stays exactly P while the pivot
carries the detectable signal.  Baselines: Gumbel-max, the soft
green/red-list reweighting (biased), and DiPmark reweighting over a keyed
permutation.  A soft variant of the coupling decoder keeps a small
probability of red tokens via rejection sampling against the soft Q.

Batch samplers (``*_batch``) reproduce the scalar step functions
draw-for-draw over arrays of contexts; they exist so statistical tests on
1e5 samples run in seconds.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import GOLDEN, GeneratedText, NtpDistribution, RngStream, mix64_array
from .keying import (
    MaskLedger,
    WatermarkKey,
    PERM_TAG,
    ZETA_TAG,
    derive_seed,
    derive_seed_batch,
    derive_zeta,
    derive_zeta_batch,
    green_mask,
    green_mask_batch,
    keyed_permutation,
    keyed_permutation_batch,
)

__all__ = [
    "Scheme",
    "Branch",
    "CouplingOutcome",
    "DecoderConfig",
    "StepResult",
    "GenerationResult",
    "categorical_from_uniform",
    "sample_maximal_coupling",
    "sample_rejection_coupling",
    "hard_list_q",
    "mc_soft_q",
    "mc_step",
    "mc_soft_step",
    "dipmark_q",
    "gumbel_max_step",
    "soft_step",
    "dipmark_step",
    "generate",
    "context_window",
    "to_record",
    "text_from_record",
    "sample_mc_batch",
    "sample_gumbel_batch",
    "sample_soft_batch",
    "sample_dipmark_batch",
    "VocabMismatch",
    "ZeroGreenMass",
    "DegenerateExcess",
]

_INV_2_53 = 2.0**-53


class VocabMismatch(ValueError):
    """Raised when two distributions cover different vocabularies."""


class ZeroGreenMass(Exception):
    """Signals that the green list carries no probability mass; callers fall
    back to sampling from the unmodified distribution."""


class DegenerateExcess(RuntimeError):
    """Raised if the excess branch is entered with no excess mass available."""


class Scheme(str, enum.Enum):
    MC = "mc"
    MC_SOFT = "mc-soft"
    GUMBEL = "gumbel"
    SOFT = "soft"
    DIPMARK = "dipmark"


class Branch(str, enum.Enum):
    OVERLAP = "OVERLAP"
    EXCESS = "EXCESS"


@dataclass(frozen=True)
class CouplingOutcome:
    """Token plus which coupling branch produced it."""

    token: int
    branch: Branch
    overlap_mass: float


@dataclass(frozen=True)
class DecoderConfig:
    """Scheme selection and its hyperparameters."""

    scheme: Scheme
    delta: float | None = None
    alpha_dip: float | None = None
    masking: bool = True

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if self.scheme in (Scheme.MC_SOFT, Scheme.SOFT):
            if self.delta is None or self.delta < 0:
                raise ValueError(f"scheme {self.scheme.value} requires delta >= 0")
        if self.scheme is Scheme.DIPMARK:
            if self.alpha_dip is None or not 0.0 <= self.alpha_dip < 0.5:
                raise ValueError("dipmark requires alpha_dip in [0, 0.5)")


@dataclass(frozen=True)
class StepResult:
    """One decoding step with its diagnostics."""

    token: int
    masked: bool
    branch: Branch | None = None
    green_mass: float | None = None
    zero_green: bool = False


@dataclass(frozen=True)
class GenerationResult:
    text: GeneratedText
    steps: tuple[StepResult, ...]
    scheme: Scheme


def categorical_from_uniform(weights: np.ndarray, u: float) -> int:
    """Inverse-CDF draw over nonnegative weights in token-index order.

    Deterministic given ``u``; zero-weight tokens are never returned.
    """
    cdf = np.cumsum(weights)
    total = cdf[-1]
    if total <= 0.0:
        raise ValueError("categorical draw over all-zero weights")
    idx = int(np.searchsorted(cdf, u * total, side="right"))
    if idx >= len(weights):
        idx = int(np.flatnonzero(weights)[-1])
    return idx


def _check_vocab(P: NtpDistribution, Q: NtpDistribution) -> None:
    if len(P) != len(Q):
        raise VocabMismatch(f"vocab sizes differ: {len(P)} vs {len(Q)}")


def sample_maximal_coupling(
    P: NtpDistribution, Q: NtpDistribution, zeta: float, aux: RngStream
) -> CouplingOutcome:
    """Maximal-coupling token draw: overlap branch when ``zeta`` falls below
    the overlap mass sum(min(P, Q)), excess branch max(0, P - Q) otherwise.

    With ``zeta ~ U[0, 1)`` independent of ``aux`` the token marginal is
    exactly P.
    """
    _check_vocab(P, Q)
    overlap = np.minimum(P.probs, Q.probs)
    p = float(overlap.sum())
    if zeta <= p:
        token = categorical_from_uniform(overlap, aux.next_uniform())
        return CouplingOutcome(token=token, branch=Branch.OVERLAP, overlap_mass=p)
    excess = np.maximum(P.probs - Q.probs, 0.0)
    if float(excess.sum()) <= 0.0:
        raise DegenerateExcess("excess branch entered with zero excess mass")
    token = categorical_from_uniform(excess, aux.next_uniform())
    return CouplingOutcome(token=token, branch=Branch.EXCESS, overlap_mass=p)


def sample_rejection_coupling(
    P: NtpDistribution,
    Q: NtpDistribution,
    zeta: float,
    aux: RngStream,
    accept_scale: float = 1.0,
) -> tuple[int, bool]:
    """One-draw rejection form of the coupling: draw w ~ Q via ``aux``, keep
    it iff ``accept_scale * zeta * Q_w <= P_w``, else resample from the
    normalized excess max(0, P - Q).

    At ``accept_scale = 1`` and uniform ``zeta`` the token marginal equals P
    and the acceptance probability equals sum(min(P, Q)).  Unlike
    :func:`sample_maximal_coupling` the joint law of (zeta, token) makes
    ``zeta`` conditionally uniform on [0, P_w/Q_w]-style intervals, which is
    what the soft coupling decoder needs.
    """
    _check_vocab(P, Q)
    w = categorical_from_uniform(Q.probs, aux.next_uniform())
    if accept_scale * zeta * Q.probs[w] <= P.probs[w]:
        return w, True
    excess = np.maximum(P.probs - Q.probs, 0.0)
    if float(excess.sum()) <= 0.0:
        raise DegenerateExcess("rejection with zero excess mass")
    return categorical_from_uniform(excess, aux.next_uniform()), False


def hard_list_q(P: NtpDistribution, green: np.ndarray) -> NtpDistribution:
    """Green-conditional restriction of P: Q_w = P_w 1{w green} / P_green.

    Raises :class:`ZeroGreenMass` when the green list carries no mass; the
    caller then samples from P unmodified.
    """
    mass = float(P.probs[green].sum())
    if mass <= 0.0:
        raise ZeroGreenMass
    q = np.where(green, P.probs / mass, 0.0)
    q.setflags(write=False)
    return NtpDistribution(q)


def mc_soft_q(P: NtpDistribution, green: np.ndarray, delta: float) -> NtpDistribution:
    """Soft green/red reweighting Q_w = e^delta P_w / C on green, P_w / C on
    red, with C = 1 + (e^delta - 1) P_green."""
    boost = math.exp(delta)
    mass = float(P.probs[green].sum())
    c = 1.0 + (boost - 1.0) * mass
    q = np.where(green, P.probs * boost, P.probs) / c
    q.setflags(write=False)
    return NtpDistribution(q)


def _sample_plain(P: NtpDistribution, aux: RngStream) -> int:
    return categorical_from_uniform(P.probs, aux.next_uniform())


def _ledger_skips(ledger: MaskLedger | None, ctx) -> bool:
    return ledger is not None and not ledger.check_and_record(ctx)


def mc_step_full(
    P: NtpDistribution,
    key: WatermarkKey,
    ctx,
    ledger: MaskLedger | None,
    aux: RngStream,
) -> StepResult:
    """Hard-list coupling step.  Equivalent closed form: the token is
    green-conditional when zeta <= P_green and red-conditional otherwise."""
    if _ledger_skips(ledger, ctx):
        return StepResult(token=_sample_plain(P, aux), masked=True)
    green = green_mask(key, ctx, len(P))
    zeta = derive_zeta(key, ctx)
    try:
        Q = hard_list_q(P, green)
    except ZeroGreenMass:
        return StepResult(
            token=_sample_plain(P, aux), masked=False, green_mass=0.0, zero_green=True
        )
    out = sample_maximal_coupling(P, Q, zeta, aux)
    return StepResult(
        token=out.token, masked=False, branch=out.branch, green_mass=out.overlap_mass
    )


def mc_step(P, key, ctx, ledger, aux) -> int:
    return mc_step_full(P, key, ctx, ledger, aux).token


def mc_soft_step_full(
    P: NtpDistribution,
    key: WatermarkKey,
    ctx,
    ledger: MaskLedger | None,
    aux: RngStream,
    delta: float,
) -> StepResult:
    """Coupling against the soft Q via rejection: conditioned on a green
    token, the pivot is uniform on [0, P_green + (1 - P_green) e^-delta]."""
    if _ledger_skips(ledger, ctx):
        return StepResult(token=_sample_plain(P, aux), masked=True)
    green = green_mask(key, ctx, len(P))
    mass = float(P.probs[green].sum())
    zeta = derive_zeta(key, ctx)
    Q = mc_soft_q(P, green, delta)
    token, accepted = sample_rejection_coupling(P, Q, zeta, aux, accept_scale=1.0)
    return StepResult(
        token=token,
        masked=False,
        branch=Branch.OVERLAP if accepted else Branch.EXCESS,
        green_mass=mass,
        zero_green=mass == 0.0,
    )


def mc_soft_step(P, key, ctx, ledger, aux, delta) -> int:
    return mc_soft_step_full(P, key, ctx, ledger, aux, delta).token


def gumbel_max_step_full(
    P: NtpDistribution,
    key: WatermarkKey,
    ctx,
    ledger: MaskLedger | None,
    aux: RngStream | None = None,
) -> StepResult:
    """Deterministic Gumbel-max decoder: argmax_w log(U_w) / P_w with U from
    the context-seeded stream, ordered by token index.  Zero-probability
    tokens are excluded from the argmax."""
    if _ledger_skips(ledger, ctx):
        if aux is None:
            raise ValueError("masked Gumbel step needs an aux stream to sample from P")
        return StepResult(token=_sample_plain(P, aux), masked=True)
    stream = RngStream(derive_seed(key, ctx, ZETA_TAG))
    u = stream.uniforms(len(P))
    scores = np.full(len(P), -np.inf)
    pos = P.probs > 0.0
    scores[pos] = np.log(u[pos]) / P.probs[pos]
    return StepResult(token=int(np.argmax(scores)), masked=False)


def gumbel_max_step(P, key, ctx, ledger, aux=None) -> int:
    return gumbel_max_step_full(P, key, ctx, ledger, aux).token


def soft_step_full(
    P: NtpDistribution,
    key: WatermarkKey,
    ctx,
    ledger: MaskLedger | None,
    aux: RngStream,
    delta: float,
) -> StepResult:
    """Plain soft green/red watermark: sample from the reweighted Q.  This
    scheme is biased; the marginal does not equal P for delta > 0."""
    if _ledger_skips(ledger, ctx):
        return StepResult(token=_sample_plain(P, aux), masked=True)
    green = green_mask(key, ctx, len(P))
    mass = float(P.probs[green].sum())
    weights = np.where(green, P.probs * math.exp(delta), P.probs)
    token = categorical_from_uniform(weights, aux.next_uniform())
    return StepResult(token=token, masked=False, green_mass=mass)


def soft_step(P, key, ctx, ledger, aux, delta) -> int:
    return soft_step_full(P, key, ctx, ledger, aux, delta).token


def dipmark_q(P: NtpDistribution, perm: np.ndarray, alpha_dip: float) -> np.ndarray:
    """Token-indexed reweighted distribution: with S_i the cumulative mass
    along the reversed permutation, position i gets F_i - F_{i-1} where
    F_i = max(S_i - alpha, 0) + max(S_i - (1 - alpha), 0).

    Averaged over uniformly random permutations the result equals P for any
    alpha in [0, 0.5]; a single permutation shifts mass toward its head,
    which is the green set the green-count detector looks for.
    """
    order = perm[::-1]
    s = np.cumsum(P.probs[order])
    f = np.maximum(s - alpha_dip, 0.0) + np.maximum(s - (1.0 - alpha_dip), 0.0)
    q_order = np.clip(np.diff(f, prepend=0.0), 0.0, None)
    q = np.zeros_like(q_order)
    q[order] = q_order
    return q


def dipmark_step_full(
    P: NtpDistribution,
    key: WatermarkKey,
    ctx,
    ledger: MaskLedger | None,
    aux: RngStream,
    alpha_dip: float,
) -> StepResult:
    """Distribution-preserving reweighting over the keyed permutation; see
    :func:`dipmark_q` for the construction."""
    if _ledger_skips(ledger, ctx):
        return StepResult(token=_sample_plain(P, aux), masked=True)
    vocab = len(P)
    perm = keyed_permutation(key, ctx, vocab)
    # Draw in ordering space (not token space) so the batch sampler can
    # reproduce the exact same inverse-CDF lookup.
    order = perm[::-1]
    s = np.cumsum(P.probs[order])
    f = np.maximum(s - alpha_dip, 0.0) + np.maximum(s - (1.0 - alpha_dip), 0.0)
    q_order = np.clip(np.diff(f, prepend=0.0), 0.0, None)
    token = int(order[categorical_from_uniform(q_order, aux.next_uniform())])
    mass = float(P.probs[perm[: int(key.gamma * vocab)]].sum())
    return StepResult(token=token, masked=False, green_mass=mass)


def dipmark_step(P, key, ctx, ledger, aux, alpha_dip) -> int:
    return dipmark_step_full(P, key, ctx, ledger, aux, alpha_dip).token


def context_window(history: Sequence[int], k: int) -> tuple[int, ...]:
    """Trailing k tokens of the history, left-padded with token 0 when the
    history is shorter than k."""
    if k == 0:
        return ()
    tail = tuple(int(t) for t in history[-k:])
    if len(tail) < k:
        tail = (0,) * (k - len(tail)) + tail
    return tail


def generate(
    model,
    key: WatermarkKey,
    config: DecoderConfig,
    prompt: GeneratedText,
    n: int,
    aux: RngStream,
) -> GenerationResult:
    """Autoregressively append ``n`` tokens to the prompt with the configured
    scheme, recording per-step diagnostics."""
    if n < 1:
        raise ValueError("n must be >= 1")
    history: list[int] = list(prompt.tokens)
    ledger = MaskLedger() if config.masking else None
    steps: list[StepResult] = []
    for _ in range(n):
        ctx = context_window(history, key.k)
        P = model.next(history)
        scheme = config.scheme
        if scheme is Scheme.MC:
            step = mc_step_full(P, key, ctx, ledger, aux)
        elif scheme is Scheme.MC_SOFT:
            step = mc_soft_step_full(P, key, ctx, ledger, aux, config.delta)
        elif scheme is Scheme.GUMBEL:
            step = gumbel_max_step_full(P, key, ctx, ledger, aux)
        elif scheme is Scheme.SOFT:
            step = soft_step_full(P, key, ctx, ledger, aux, config.delta)
        elif scheme is Scheme.DIPMARK:
            step = dipmark_step_full(P, key, ctx, ledger, aux, config.alpha_dip)
        else:  # pragma: no cover - enum is exhaustive
            raise ValueError(f"unknown scheme {scheme!r}")
        steps.append(step)
        history.append(step.token)
    text = GeneratedText(tokens=tuple(history), prompt_len=len(prompt.tokens))
    return GenerationResult(text=text, steps=tuple(steps), scheme=config.scheme)


def to_record(result: GenerationResult, vocab_size: int, watermarked: bool = True) -> dict:
    """JSON-serializable record for one generated text."""
    return {
        "tokens": list(result.text.tokens),
        "prompt_len": result.text.prompt_len,
        "scheme": result.scheme.value,
        "vocab_size": vocab_size,
        "watermarked": watermarked,
        "diagnostics": [
            {
                "masked": s.masked,
                "branch": s.branch.value if s.branch is not None else None,
                "green_mass": s.green_mass,
                "zero_green": s.zero_green,
            }
            for s in result.steps
        ],
    }


def text_from_record(record: dict) -> GeneratedText:
    return GeneratedText(tokens=tuple(record["tokens"]), prompt_len=record.get("prompt_len", 0))


def _categorical_batch(weights: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Row-wise inverse-CDF draws; mirrors :func:`categorical_from_uniform`."""
    cdf = np.cumsum(weights, axis=1)
    total = cdf[:, -1]
    x = u * total
    hit = cdf > x[:, None]
    idx = hit.argmax(axis=1)
    stuck = ~hit.any(axis=1)
    if stuck.any():
        for row in np.flatnonzero(stuck):
            idx[row] = np.flatnonzero(weights[row])[-1]
    return idx.astype(np.int64)


def sample_mc_batch(
    P: NtpDistribution, key: WatermarkKey, ctxs: np.ndarray, u_aux: np.ndarray
) -> np.ndarray:
    """Vectorized hard-list coupling over (n, k) contexts with one aux
    uniform per row; matches :func:`mc_step` token-for-token."""
    green = green_mask_batch(key, ctxs, len(P))
    zeta = derive_zeta_batch(key, ctxs)
    pw = np.broadcast_to(P.probs, green.shape)
    mass = np.where(green, pw, 0.0).sum(axis=1)
    take_green = zeta <= mass
    weights = np.where(take_green[:, None], np.where(green, pw, 0.0), np.where(green, 0.0, pw))
    fallback = mass == 0.0
    if fallback.any():
        weights[fallback] = P.probs
    return _categorical_batch(weights, u_aux)


def sample_gumbel_batch(P: NtpDistribution, key: WatermarkKey, ctxs: np.ndarray) -> np.ndarray:
    """Vectorized Gumbel-max decoding; matches :func:`gumbel_max_step`."""
    seeds = derive_seed_batch(key, ctxs, ZETA_TAG)
    counters = np.arange(1, len(P) + 1, dtype=np.uint64)
    z = mix64_array(seeds[:, None] + counters[None, :] * np.uint64(GOLDEN))
    u = (z >> np.uint64(11)).astype(np.float64) * _INV_2_53
    scores = np.full(u.shape, -np.inf)
    pos = P.probs > 0.0
    scores[:, pos] = np.log(u[:, pos]) / P.probs[pos]
    return scores.argmax(axis=1).astype(np.int64)


def sample_soft_batch(
    P: NtpDistribution,
    key: WatermarkKey,
    ctxs: np.ndarray,
    u_aux: np.ndarray,
    delta: float,
) -> np.ndarray:
    """Vectorized soft green/red sampling; matches :func:`soft_step`."""
    green = green_mask_batch(key, ctxs, len(P))
    pw = np.broadcast_to(P.probs, green.shape)
    weights = np.where(green, pw * math.exp(delta), pw)
    return _categorical_batch(weights, u_aux)


def sample_dipmark_batch(
    P: NtpDistribution,
    key: WatermarkKey,
    ctxs: np.ndarray,
    u_aux: np.ndarray,
    alpha_dip: float,
) -> np.ndarray:
    """Vectorized DiPmark sampling; matches :func:`dipmark_step`."""
    seeds = derive_seed_batch(key, ctxs, PERM_TAG)
    perms = keyed_permutation_batch(seeds, len(P))
    order = perms[:, ::-1]
    s = np.cumsum(P.probs[order], axis=1)
    f = np.maximum(s - alpha_dip, 0.0) + np.maximum(s - (1.0 - alpha_dip), 0.0)
    q = np.clip(np.diff(f, axis=1, prepend=0.0), 0.0, None)
    idx = _categorical_batch(q, u_aux)
    return order[np.arange(order.shape[0]), idx]
