"""Sparse-mixture power study for the pivot tests.

Under the alternative only a fraction eps = m**(-p) of the m scores carry
watermark signal; the rest are null uniforms.  Two signal regimes: STRONG
draws the green mass P_G uniformly from [m**(-r), 1] and the pivot from
U[0, P_G]; WEAK pins P_G = 1 - m**(-q) so each signal pivot is barely
sub-uniform.  For each m the critical value is the empirical null quantile
and power is the rejection rate over fresh alternative replications,
mirroring the analytic detection boundaries p + q = 1/2 (sum test) and
2p + q = 1 (higher criticism).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .detection import HcDenom, Statistic, hc_batch

__all__ = [
    "Regime",
    "RegimeConfig",
    "PowerRow",
    "PowerCurve",
    "sample_alternative",
    "run_power",
    "boundary_scan",
    "null_histogram",
    "histogram_to_csv",
    "POWER_CSV_HEADER",
]

POWER_CSV_HEADER = "regime,p,q_or_r,m,statistic,reps,alpha,critical_value,power,seed"

# Keep per-chunk draw matrices under ~80 MB.
_CHUNK_ELEMENTS = int(1e7)

_STATISTICS = (Statistic.SUM, Statistic.HC_PLUS)


class Regime(str, enum.Enum):
    STRONG = "strong"
    WEAK = "weak"


@dataclass(frozen=True)
class RegimeConfig:
    """One power-study cell: regime, sparsity/signal exponents, and the
    Monte-Carlo protocol."""

    regime: Regime
    p: float
    r: float | None = None
    q: float | None = None
    m_grid: tuple[int, ...] = (100, 1000, 10000, 100000)
    reps: int = 2000
    alpha: float = 0.01
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "regime", Regime(self.regime))
        object.__setattr__(self, "m_grid", tuple(int(m) for m in self.m_grid))
        if not 0.0 < self.p < 1.0:
            raise ValueError("p must lie in (0, 1)")
        if self.regime is Regime.STRONG and self.r is None:
            raise ValueError("STRONG regime requires r")
        if self.regime is Regime.WEAK and self.q is None:
            raise ValueError("WEAK regime requires q")
        if not self.m_grid:
            raise ValueError("m_grid must not be empty")
        if any(m < 1 for m in self.m_grid):
            raise ValueError("m_grid entries must be >= 1")
        if list(self.m_grid) != sorted(self.m_grid):
            raise ValueError("m_grid must be ascending")
        if self.reps < 1000:
            raise ValueError("reps must be >= 1000")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")

    @property
    def q_or_r(self) -> float:
        return float(self.r if self.regime is Regime.STRONG else self.q)


@dataclass(frozen=True)
class PowerRow:
    m: int
    statistic: Statistic
    critical_value: float
    power: float


@dataclass(frozen=True)
class PowerCurve:
    config: RegimeConfig
    rows: tuple[PowerRow, ...]

    def to_csv(self) -> str:
        c = self.config
        lines = [POWER_CSV_HEADER]
        for row in self.rows:
            lines.append(
                f"{c.regime.value},{c.p!r},{c.q_or_r!r},{row.m},{row.statistic.value},"
                f"{c.reps},{c.alpha!r},{row.critical_value!r},{row.power!r},{c.seed}"
            )
        return "\n".join(lines) + "\n"


def signal_count(config: RegimeConfig, m: int) -> int:
    """Number of signal-bearing scores: m * m**(-p) rounded to nearest."""
    return int(m * m ** (-config.p) + 0.5)


def _alt_block(config: RegimeConfig, m: int, reps: int, rng: np.random.Generator) -> np.ndarray:
    """(reps, m) alternative scores with signals in the leading columns.

    The tests are permutation-invariant, so block sampling skips the
    per-replication shuffle that :func:`sample_alternative` performs.
    """
    n_sig = signal_count(config, m)
    x = rng.random((reps, m))
    if n_sig == 0:
        return x
    if config.regime is Regime.STRONG:
        lo = m ** (-config.r)
        pg = lo + (1.0 - lo) * rng.random((reps, n_sig))
        x[:, :n_sig] *= pg
    else:
        x[:, :n_sig] *= 1.0 - m ** (-config.q)
    return x


def sample_alternative(config: RegimeConfig, m: int, rng: np.random.Generator) -> np.ndarray:
    """One alternative replication: signal draws for a m**(-p) fraction of
    positions, null uniforms elsewhere, in shuffled order."""
    if m < 1:
        raise ValueError("m must be >= 1")
    row = _alt_block(config, m, 1, rng)[0]
    return row[rng.permutation(m)]


def _stats_over_draws(config: RegimeConfig, m: int, role: int) -> dict[Statistic, np.ndarray]:
    """All reps of each statistic for one (m, role) cell; role 0 = null,
    role 1 = alternative.  Streams are derived from (seed, m, role) so the
    two roles never share draws."""
    rng = np.random.default_rng([config.seed, m, role])
    rows_per_chunk = max(1, _CHUNK_ELEMENTS // m)
    out: dict[Statistic, list[np.ndarray]] = {s: [] for s in _STATISTICS}
    done = 0
    while done < config.reps:
        c = min(rows_per_chunk, config.reps - done)
        x = rng.random((c, m)) if role == 0 else _alt_block(config, m, c, rng)
        out[Statistic.SUM].append(x.sum(axis=1))
        out[Statistic.HC_PLUS].append(hc_batch(x, Statistic.HC_PLUS, HcDenom.STANDARD_SQRT))
        done += c
    return {s: np.concatenate(v) for s, v in out.items()}


def run_power(config: RegimeConfig) -> PowerCurve:
    """Calibrate each statistic on null draws and measure rejection rates on
    alternative draws, for every m in the grid."""
    rows: list[PowerRow] = []
    for m in config.m_grid:
        null_stats = _stats_over_draws(config, m, 0)
        alt_stats = _stats_over_draws(config, m, 1)
        for stat in _STATISTICS:
            if stat is Statistic.SUM:
                crit = float(np.quantile(null_stats[stat], config.alpha))
                power = float(np.mean(alt_stats[stat] < crit))
            else:
                crit = float(np.quantile(null_stats[stat], 1.0 - config.alpha))
                power = float(np.mean(alt_stats[stat] > crit))
            rows.append(PowerRow(m=m, statistic=stat, critical_value=crit, power=power))
    return PowerCurve(config=config, rows=tuple(rows))


def _classify(p: float, q: float) -> str:
    if 2.0 * p + q > 1.0:
        return "undetectable"
    if p + q < 0.5:
        return "sum-detectable"
    return "hc-only"


def boundary_scan(
    p_list, q_list, m: int, reps: int = 2000, alpha: float = 0.01, seed: int = 0
) -> list[dict]:
    """WEAK-regime power at a fixed m over a (p, q) grid, with each cell
    labeled by its side of the analytic boundaries 2p + q = 1 and
    p + q = 1/2."""
    table = []
    for p in p_list:
        for q in q_list:
            config = RegimeConfig(
                regime=Regime.WEAK, p=p, q=q, m_grid=(m,), reps=reps, alpha=alpha, seed=seed
            )
            curve = run_power(config)
            for row in curve.rows:
                table.append(
                    {
                        "p": p,
                        "q": q,
                        "m": m,
                        "statistic": row.statistic.value,
                        "power": row.power,
                        "region": _classify(p, q),
                    }
                )
    return table


def null_histogram(
    statistic: Statistic,
    m: int,
    reps: int = 2000,
    bins: int = 50,
    config: RegimeConfig | None = None,
    seed: int = 0,
) -> list[dict]:
    """Binned counts of one statistic under the null and, when a config is
    given, under its alternative at the same m.  Bins cover the pooled
    observed range so no draw falls outside."""
    statistic = Statistic(statistic)
    if statistic not in _STATISTICS:
        raise ValueError(f"histogram supports {[s.value for s in _STATISTICS]}")
    probe = config or RegimeConfig(regime=Regime.WEAK, p=0.5, q=0.5, m_grid=(m,), seed=seed)
    probe = RegimeConfig(
        regime=probe.regime,
        p=probe.p,
        r=probe.r,
        q=probe.q,
        m_grid=(m,),
        reps=reps,
        alpha=probe.alpha,
        seed=probe.seed if config is not None else seed,
    )
    null_vals = _stats_over_draws(probe, m, 0)[statistic]
    alt_vals = _stats_over_draws(probe, m, 1)[statistic] if config is not None else None
    pool = null_vals if alt_vals is None else np.concatenate([null_vals, alt_vals])
    finite = pool[np.isfinite(pool)]
    edges = np.histogram_bin_edges(finite, bins=bins)
    null_counts, _ = np.histogram(null_vals, bins=edges)
    alt_counts = None if alt_vals is None else np.histogram(alt_vals, bins=edges)[0]
    rows = []
    for i in range(len(edges) - 1):
        row = {
            "statistic": statistic.value,
            "bin_lo": float(edges[i]),
            "bin_hi": float(edges[i + 1]),
            "null_count": int(null_counts[i]),
        }
        if alt_counts is not None:
            row["alt_count"] = int(alt_counts[i])
        rows.append(row)
    return rows


def histogram_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0].keys())
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in cols))
    return "\n".join(lines) + "\n"
