"""Watermark detection: pivot extraction from text and the statistical tests.

Scores are folded pivots: a green token contributes its keyed uniform
``zeta``, a red token contributes ``1 - zeta``.  Under the null (text
independent of the key) every score is U[0,1]; under the watermark both
kinds are stochastically small.  Tests: the sum of scores against its
exact Irwin-Hall null (normal approximation for n >= 15), higher
criticism (HC* and the HC+ restriction) against a simulated null
quantile, and the order-statistic max test with its closed-form
threshold.  Baseline detectors for the Gumbel-max and green/red-count
schemes are included for comparisons.
"""

from __future__ import annotations

import enum
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats as sstats

from .core import GeneratedText
from .keying import (
    WatermarkKey,
    derive_zeta,
    derive_zeta_batch,
    gumbel_uniform,
    is_green,
    is_green_batch,
)

__all__ = [
    "Statistic",
    "HcDenom",
    "Side",
    "ScoredToken",
    "DetectionReport",
    "NullCalibration",
    "extract_scores",
    "extract_zeta_primes_batch",
    "irwin_hall_cdf",
    "sum_pvalue",
    "sum_test",
    "hc_statistic",
    "hc_batch",
    "max_test",
    "calibrate_null",
    "default_cache_dir",
    "detect",
    "detect_baseline",
    "TooShort",
    "EmptyScores",
    "TooFewScores",
    "OutOfRange",
]

class TooShort(ValueError):
    """Raised when a text has no full context window to score."""


class EmptyScores(ValueError):
    """Raised when a test receives no scores."""


class TooFewScores(ValueError):
    """Raised when a test needs more scores than provided."""


class OutOfRange(ValueError):
    """Raised for arguments outside a function's supported domain."""


class Statistic(str, enum.Enum):
    SUM = "sum"
    HC_PLUS = "hc+"
    HC_STAR = "hc*"
    MAX = "max"
    GUMBEL_SUM = "gumbel-sum"
    GREEN_COUNT = "green-count"


class HcDenom(str, enum.Enum):
    # sqrt(x(1-x)) standardizes the empirical process (the default);
    # x(1-x) is kept selectable for ablation.
    STANDARD_SQRT = "sqrt"
    PAPER_LINEAR = "linear"


class Side(str, enum.Enum):
    COMBINED = "combined"
    GREEN_ONLY = "green"


@dataclass(frozen=True)
class ScoredToken:
    """One detection observation: token, its context, and the folded pivot."""

    position: int
    token: int
    context: tuple[int, ...]
    is_green: bool
    zeta_prime: float


@dataclass(frozen=True)
class DetectionReport:
    """Outcome of one test; either a p-value or a calibrated threshold
    drives the decision, never both."""

    statistic: Statistic
    value: float
    p_value: float | None
    threshold: float | None
    n_scored: int
    reject: bool
    alpha: float

    def to_dict(self) -> dict:
        return {
            "statistic": self.statistic.value,
            "value": self.value,
            "p_value": self.p_value,
            "threshold": self.threshold,
            "n_scored": self.n_scored,
            "reject": self.reject,
            "alpha": self.alpha,
        }


@dataclass(frozen=True)
class NullCalibration:
    """Empirical critical value from repeated null simulation."""

    statistic: Statistic
    n: int
    alpha: float
    critical_value: float
    reps: int
    seed: int


def _iter_unique_tuples(text: GeneratedText, k: int):
    """Positions whose (context, token) tuple has not been seen before,
    walking the received tokens from the first full context window."""
    tokens = text.tokens
    if len(tokens) <= k:
        raise TooShort(f"text of length {len(tokens)} has no scorable position for k={k}")
    seen: set[tuple[int, ...]] = set()
    for t in range(k, len(tokens)):
        ctx = tokens[t - k : t]
        tup = tokens[t - k : t + 1]
        if tup in seen:
            continue
        seen.add(tup)
        yield t, ctx, tokens[t]


def extract_scores(
    text: GeneratedText, key: WatermarkKey, vocab_size: int | None = None
) -> list[ScoredToken]:
    """Score each first occurrence of a (context, token) tuple: recompute the
    keyed pivot, test green membership, and fold red pivots to 1 - zeta."""
    scores = []
    for pos, ctx, tok in _iter_unique_tuples(text, key.k):
        zeta = derive_zeta(key, ctx)
        green = is_green(key, ctx, tok, vocab_size)
        scores.append(
            ScoredToken(
                position=pos,
                token=tok,
                context=ctx,
                is_green=green,
                zeta_prime=zeta if green else 1.0 - zeta,
            )
        )
    return scores


def extract_zeta_primes_batch(
    tokens_2d: np.ndarray, key: WatermarkKey, vocab_size: int | None = None
) -> list[np.ndarray]:
    """Folded pivots for a batch of equal-length texts (rows), with the same
    per-text tuple deduplication as :func:`extract_scores`.

    Only hash and single green modes are vectorized; perm mode falls back
    to the scalar path.
    """
    tokens_2d = np.asarray(tokens_2d, dtype=np.int64)
    k = key.k
    out = []
    for row in tokens_2d:
        win = np.lib.stride_tricks.sliding_window_view(row, k + 1)
        _, first = np.unique(win, axis=0, return_index=True)
        keep = np.sort(first)
        ctxs = win[keep, :k]
        toks = win[keep, k]
        zetas = derive_zeta_batch(key, ctxs)
        green = is_green_batch(key, ctxs, toks, vocab_size)
        out.append(np.where(green, zetas, 1.0 - zetas))
    return out


def _score_values(scores) -> np.ndarray:
    if isinstance(scores, np.ndarray):
        return scores.astype(np.float64, copy=False)
    return np.array([s.zeta_prime for s in scores], dtype=np.float64)


def irwin_hall_cdf(s: float, n: int) -> float:
    """Exact CDF of a sum of n i.i.d. U[0,1] variables, for n < 15."""
    if not 1 <= n < 15:
        raise OutOfRange(f"exact branch supports 1 <= n < 15, got {n}")
    if not 0.0 <= s <= n:
        raise OutOfRange(f"sum must lie in [0, {n}], got {s}")
    acc = 0.0
    for j in range(int(math.floor(s)) + 1):
        acc += (-1.0) ** j * math.comb(n, j) * (s - j) ** n
    return min(1.0, max(0.0, acc / math.factorial(n)))


def sum_pvalue(s: float, n: int) -> float:
    """Lower-tail p-value of the score sum: exact Irwin-Hall for n < 15,
    normal approximation with matching moments for n >= 15."""
    if n < 15:
        return irwin_hall_cdf(s, n)
    return float(sstats.norm.cdf((s - n / 2.0) / math.sqrt(n / 12.0)))


def sum_test(scores, alpha: float = 0.01) -> DetectionReport:
    """Reject when the score sum is too small: the watermark pulls folded
    pivots toward 0, so the signal sits in the lower tail."""
    values = _score_values(scores)
    n = len(values)
    if n < 1:
        raise EmptyScores("sum test needs at least one score")
    s = float(values.sum())
    p = sum_pvalue(s, n)
    return DetectionReport(
        statistic=Statistic.SUM,
        value=s,
        p_value=p,
        threshold=None,
        n_scored=n,
        reject=p < alpha,
        alpha=alpha,
    )


def _hc_matrix(sorted_rows: np.ndarray, variant: Statistic, denom: HcDenom) -> np.ndarray:
    reps, m = sorted_rows.shape
    t = np.arange(1, m + 1, dtype=np.float64) / m
    x = np.clip(sorted_rows, 1e-12, 1.0 - 1e-12)
    d = x * (1.0 - x)
    if denom is HcDenom.STANDARD_SQRT:
        d = np.sqrt(d)
    hc = math.sqrt(m) * (t[None, :] - sorted_rows) / d
    if variant is Statistic.HC_PLUS:
        hc = np.where(sorted_rows >= 1.0 / m, hc, -np.inf)
    return hc.max(axis=1)


def hc_statistic(
    scores,
    variant: Statistic = Statistic.HC_PLUS,
    denom: HcDenom = HcDenom.STANDARD_SQRT,
) -> float:
    """Higher-criticism statistic: the maximum standardized gap between the
    empirical CDF of the scores and the uniform CDF.

    The + variant maximizes only over order statistics >= 1/n, which tames
    the heavy null tail; with no eligible order statistic it returns -inf
    (never rejects).
    """
    if variant not in (Statistic.HC_PLUS, Statistic.HC_STAR):
        raise ValueError(f"variant must be hc+ or hc*, got {variant}")
    values = _score_values(scores)
    if len(values) < 2:
        raise TooFewScores("higher criticism needs at least two scores")
    return float(_hc_matrix(np.sort(values)[None, :], variant, HcDenom(denom))[0])


def hc_batch(
    rows: np.ndarray,
    variant: Statistic = Statistic.HC_PLUS,
    denom: HcDenom = HcDenom.STANDARD_SQRT,
) -> np.ndarray:
    """Row-wise :func:`hc_statistic` for a (reps, m) matrix of scores."""
    return _hc_matrix(np.sort(rows, axis=1), variant, HcDenom(denom))


def max_test(scores, alpha: float = 0.01) -> DetectionReport:
    """Order-statistic test on green pivots: reject iff max zeta <=
    alpha**(1/n), which has exact size alpha under the null.  The reported
    p-value max**n is informational; the threshold drives the decision."""
    values = _score_values(scores)
    n = len(values)
    if n < 1:
        raise EmptyScores("max test needs at least one score")
    mx = float(values.max())
    threshold = alpha ** (1.0 / n)
    return DetectionReport(
        statistic=Statistic.MAX,
        value=mx,
        p_value=mx**n,
        threshold=threshold,
        n_scored=n,
        reject=mx <= threshold,
        alpha=alpha,
    )


_CALIBRATABLE = (Statistic.SUM, Statistic.HC_PLUS, Statistic.HC_STAR, Statistic.MAX)
_LOWER_TAIL = (Statistic.SUM, Statistic.MAX)
_STAT_CODE = {s: i for i, s in enumerate(Statistic)}
_CACHE_FILE = "calibrations.csv"
_CACHE_HEADER = "statistic,n,alpha,reps,seed,critical_value"


def default_cache_dir() -> Path:
    """Calibration cache location; WMKIT_CALIB_DIR overrides the default."""
    env = os.environ.get("WMKIT_CALIB_DIR")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "wmkit"


def _null_statistics(
    statistic: Statistic, n: int, reps: int, seed: int, denom: HcDenom
) -> np.ndarray:
    rng = np.random.default_rng([_STAT_CODE[statistic], n, reps, seed])
    chunk = max(1, int(2e7) // max(n, 1))
    vals = []
    done = 0
    while done < reps:
        c = min(chunk, reps - done)
        x = rng.random((c, n))
        if statistic is Statistic.SUM:
            vals.append(x.sum(axis=1))
        elif statistic is Statistic.MAX:
            vals.append(x.max(axis=1))
        else:
            vals.append(hc_batch(x, statistic, denom))
        done += c
    return np.concatenate(vals)


def _cache_lookup(path: Path, statistic, n, alpha, reps, seed) -> float | None:
    if not path.exists():
        return None
    for line in path.read_text().splitlines()[1:]:
        parts = line.split(",")
        if len(parts) != 6:
            continue
        if (
            parts[0] == statistic.value
            and int(parts[1]) == n
            and float(parts[2]) == alpha
            and int(parts[3]) == reps
            and int(parts[4]) == seed
        ):
            return float(parts[5])
    return None


def _cache_append(path: Path, statistic, n, alpha, reps, seed, critical_value) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    line = f"{statistic.value},{n},{alpha!r},{reps},{seed},{critical_value!r}\n"
    if not path.exists():
        path.write_text(_CACHE_HEADER + "\n" + line)
    else:
        with path.open("a") as fh:
            fh.write(line)


def calibrate_null(
    statistic: Statistic,
    n: int,
    alpha: float,
    reps: int = 2000,
    seed: int = 0,
    denom: HcDenom = HcDenom.STANDARD_SQRT,
    cache_dir: Path | str | None = None,
    use_cache: bool = True,
) -> NullCalibration:
    """Empirical critical value of a statistic over ``reps`` null simulations
    of n i.i.d. U[0,1] scores: the (1-alpha) quantile for upper-tail
    statistics (HC) and the alpha quantile for lower-tail ones (SUM, MAX).

    Results are cached in a CSV keyed by (statistic, n, alpha, reps, seed).
    The HC denominator choice is part of the simulation but not the cache
    key, so ablation runs should use a separate cache directory.
    """
    statistic = Statistic(statistic)
    if statistic not in _CALIBRATABLE:
        raise ValueError(f"no simulated null for statistic {statistic}")
    if reps < 1000:
        raise ValueError("calibration needs reps >= 1000")
    cache_path = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    cache_path = cache_path / _CACHE_FILE
    if use_cache:
        hit = _cache_lookup(cache_path, statistic, n, alpha, reps, seed)
        if hit is not None:
            return NullCalibration(statistic, n, alpha, hit, reps, seed)
    vals = _null_statistics(statistic, n, reps, seed, denom)
    q = alpha if statistic in _LOWER_TAIL else 1.0 - alpha
    critical = float(np.quantile(vals, q))
    if use_cache:
        _cache_append(cache_path, statistic, n, alpha, reps, seed, critical)
    return NullCalibration(statistic, n, alpha, critical, reps, seed)


def detect(
    text: GeneratedText,
    key: WatermarkKey,
    statistic: Statistic = Statistic.SUM,
    alpha: float = 0.01,
    side: Side = Side.COMBINED,
    vocab_size: int | None = None,
    denom: HcDenom = HcDenom.STANDARD_SQRT,
    reps: int = 2000,
    seed: int = 0,
    cache_dir: Path | str | None = None,
) -> DetectionReport:
    """Extract scores and run the chosen test.

    COMBINED uses folded pivots from green and red tokens; GREEN_ONLY
    restricts to green tokens' raw pivots (the max test always does).
    """
    statistic = Statistic(statistic)
    side = Side(side)
    scores = extract_scores(text, key, vocab_size)
    if statistic is Statistic.MAX:
        side = Side.GREEN_ONLY
    if side is Side.GREEN_ONLY:
        values = np.array([s.zeta_prime for s in scores if s.is_green])
    else:
        values = _score_values(scores)
    if statistic is Statistic.SUM:
        return sum_test(values, alpha)
    if statistic is Statistic.MAX:
        return max_test(values, alpha)
    value = hc_statistic(values, statistic, denom)
    calib = calibrate_null(
        statistic, len(values), alpha, reps=reps, seed=seed, denom=denom, cache_dir=cache_dir
    )
    return DetectionReport(
        statistic=statistic,
        value=value,
        p_value=None,
        threshold=calib.critical_value,
        n_scored=len(values),
        reject=value > calib.critical_value,
        alpha=alpha,
    )


def detect_baseline(
    text: GeneratedText,
    key: WatermarkKey,
    scheme,
    alpha: float = 0.01,
    vocab_size: int | None = None,
) -> DetectionReport:
    """Reference detectors for the baseline schemes.

    Gumbel-max: sum of -log(1 - U_token) over deduplicated tuples against
    the Gamma(n, 1) upper tail.  Soft/DiPmark: green-token count against
    the exact Binomial(n, gamma) upper tail.
    """
    from .decoders import Scheme

    scheme = Scheme(scheme)
    if scheme is Scheme.GUMBEL:
        stat = 0.0
        n = 0
        for _, ctx, tok in _iter_unique_tuples(text, key.k):
            u = gumbel_uniform(key, ctx, tok)
            stat -= math.log1p(-u)
            n += 1
        if n < 1:
            raise EmptyScores("no scorable tuples")
        p = float(sstats.gamma.sf(stat, a=n))
        return DetectionReport(
            statistic=Statistic.GUMBEL_SUM,
            value=stat,
            p_value=p,
            threshold=None,
            n_scored=n,
            reject=p < alpha,
            alpha=alpha,
        )
    if scheme in (Scheme.SOFT, Scheme.DIPMARK, Scheme.MC, Scheme.MC_SOFT):
        scores = extract_scores(text, key, vocab_size)
        n = len(scores)
        if n < 1:
            raise EmptyScores("no scorable tuples")
        g = sum(1 for s in scores if s.is_green)
        p = float(sstats.binom.sf(g - 1, n, key.gamma))
        return DetectionReport(
            statistic=Statistic.GREEN_COUNT,
            value=float(g),
            p_value=p,
            threshold=None,
            n_scored=n,
            reject=p < alpha,
            alpha=alpha,
        )
    raise ValueError(f"no baseline detector for scheme {scheme}")
