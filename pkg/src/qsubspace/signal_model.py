"""Closed-form signal simulation for the 5-readout Look-Locker block.

One repetition block of duration TR contains, in order: a T2 preparation
at the block start, FLASH readout 1, an inversion pulse, FLASH readouts
2..5 placed at configurable delays after the inversion, and trailing dead
time. Longitudinal magnetization relaxes toward M0 with T1 in every gap,
and toward the saturated level M0* with the apparent constant T1* inside
each readout train. The transverse signal at an echo is Mz at that echo
time scaled by sin(alpha * B1).

All propagation helpers accept scalars or equally shaped numpy arrays, so
whole parameter grids simulate in one vectorized pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError

N_READOUTS = 5


@dataclass(frozen=True)
class TissueParams:
    """Single-voxel tissue parameters."""

    t1_ms: float
    t2_ms: float
    pd: float = 1.0
    b1: float = 1.0
    ie: float = 1.0

    def __post_init__(self):
        if self.t1_ms <= 0 or self.t2_ms <= 0:
            raise ConfigError(f"t1/t2 must be positive, got {self.t1_ms}, {self.t2_ms}")
        if self.pd < 0:
            raise ConfigError(f"pd must be nonnegative, got {self.pd}")
        if self.b1 <= 0:
            raise ConfigError(f"b1 must be positive, got {self.b1}")
        if not 0.0 <= self.ie <= 1.0:
            raise ConfigError(f"ie must lie in [0, 1], got {self.ie}")


@dataclass(frozen=True)
class SequenceTiming:
    """Block timing. Delays position readouts 2..5 relative to the inversion.

    Nominal flip angle and the T2-prep echo time default to 4 deg / 100 ms;
    both are assumptions, not measured values, and are freely configurable.
    """

    tr_ms: float = 4500.0
    te_t2prep_ms: float = 100.0
    esp_ms: float = 5.8
    etl: int = 127
    flip_deg: float = 4.0
    inv_delay_ms: tuple = (100.0, 1000.0, 1900.0, 2800.0)

    def __post_init__(self):
        if self.etl < 1:
            raise ConfigError(f"etl must be >= 1, got {self.etl}")
        if self.tr_ms <= 0 or self.esp_ms <= 0 or self.te_t2prep_ms < 0:
            raise ConfigError("tr/esp must be positive and te_t2prep nonnegative")
        if len(self.inv_delay_ms) != N_READOUTS - 1:
            raise ConfigError(f"expected {N_READOUTS - 1} inversion delays")
        d = np.asarray(self.inv_delay_ms, dtype=float)
        if np.any(np.diff(d) <= 0) or d[0] <= 0:
            raise ConfigError("inversion delays must be positive and strictly increasing")


@dataclass(frozen=True)
class BlockSchedule:
    """Resolved event layout of one block on [0, TR).

    events is the ordered propagation list: ("t2prep",), ("readout", r),
    ("inversion",), ("gap", dt_ms). echo_times holds the absolute time of
    every echo of the block, readout-major.
    """

    timing: SequenceTiming
    readout_starts: tuple
    inversion_time_ms: float
    events: tuple
    echo_times: np.ndarray = field(repr=False)

    @property
    def n_echoes(self) -> int:
        return self.timing.etl * N_READOUTS

    @property
    def readout_dur_ms(self) -> float:
        return self.timing.etl * self.timing.esp_ms


@dataclass(frozen=True)
class SignalEvolution:
    """Real transverse signal at every echo of the converged block."""

    values: np.ndarray
    echo_times: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.echo_times.shape:
            raise ConfigError("values and echo_times must have equal length")
        if not np.all(np.isfinite(self.values)):
            raise NumericError("non-finite signal evolution")


@dataclass(frozen=True)
class FivePointSignal:
    """Signal at the first echo of each of the five readouts."""

    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (N_READOUTS,):
            raise ConfigError("five-point signal must have length 5")


def build_schedule(timing: SequenceTiming) -> BlockSchedule:
    """Lay out one block: T2-prep, readout 1, inversion, readouts 2..5.

    Readout 1 starts immediately after the T2 preparation; the inversion
    fires when readout 1 ends; readout k (k >= 2) starts inv_delay_ms[k-2]
    after the inversion. Rejects layouts whose readouts overlap or spill
    past TR.
    """
    t = timing
    r_dur = t.etl * t.esp_ms
    starts = [t.te_t2prep_ms]
    inv_time = starts[0] + r_dur
    for d in t.inv_delay_ms:
        starts.append(inv_time + d)

    for k in range(1, N_READOUTS):
        if starts[k] < starts[k - 1] + r_dur:
            raise ConfigError(
                f"readout {k + 1} (start {starts[k]:.1f} ms) overlaps readout {k} "
                f"(ends {starts[k - 1] + r_dur:.1f} ms)"
            )
    if starts[-1] + r_dur > t.tr_ms:
        raise ConfigError(
            f"block runs {starts[-1] + r_dur:.1f} ms, exceeding TR {t.tr_ms:.1f} ms"
        )

    events = [("t2prep",), ("readout", 0), ("inversion",)]
    prev_end = inv_time
    for k in range(1, N_READOUTS):
        events.append(("gap", starts[k] - prev_end))
        events.append(("readout", k))
        prev_end = starts[k] + r_dur
    events.append(("gap", t.tr_ms - prev_end))

    echo_times = np.concatenate(
        [s + np.arange(t.etl) * t.esp_ms for s in starts]
    )
    return BlockSchedule(
        timing=t,
        readout_starts=tuple(starts),
        inversion_time_ms=inv_time,
        events=tuple(events),
        echo_times=echo_times,
    )


def relax_t1(m, m0, dt_ms, t1_ms):
    """T1 recovery of Mz toward m0 over a gap of dt_ms."""
    return m0 - (m0 - m) * np.exp(-np.asarray(dt_ms) / t1_ms)


def ernst_saturation(t1_ms, esp_ms, flip_rad):
    """Saturation factor and apparent T1 during a pulse train.

    factor = (1 - E) / (1 - cos(flip) * E) with E = exp(-esp/T1); the same
    factor scales M0 into M0* and T1 into T1*.
    """
    e = np.exp(-esp_ms / np.asarray(t1_ms, dtype=float))
    factor = (1.0 - e) / (1.0 - np.cos(flip_rad) * e)
    return factor, factor * t1_ms


def apply_t2prep(m, te_ms, t2_ms):
    """T2 decay of Mz across the preparation interval."""
    return m * np.exp(-np.asarray(te_ms) / t2_ms)


def apply_inversion(m, ie):
    """Inversion with efficiency ie: Mz -> -Mz * ie."""
    return -np.asarray(m) * ie


def _readout_signals(m, pd, t1_ms, esp_ms, etl, flip_rad):
    """Propagate one readout train; return per-echo signals and exit Mz.

    Echo j samples Mz at j*esp after the train start (before that step's
    saturation decay); the train occupies etl*esp in total.
    """
    factor, t1_star = ernst_saturation(t1_ms, esp_ms, flip_rad)
    m0_star = factor * pd
    j = np.arange(etl + 1, dtype=float)
    decay = np.exp(np.multiply.outer(-esp_ms * j, 1.0 / t1_star))  # (etl+1, ...)
    mz = m0_star + (m - m0_star) * decay
    signals = mz[:etl] * np.sin(flip_rad)
    return signals, mz[etl]


def _run_post_prep(m_plus, pd, t1_ms, b1, ie, schedule: BlockSchedule):
    """Run all events after the T2 preparation, starting from Mz = m_plus.

    Returns the (n_echoes, ...) signal stack and the Mz at block end. Every
    update here is affine in m_plus, which the dictionary builder exploits.
    """
    t = schedule.timing
    flip_rad = np.deg2rad(t.flip_deg) * b1
    m = m_plus
    blocks = []
    for ev in schedule.events:
        if ev[0] == "t2prep":
            continue
        if ev[0] == "readout":
            sig, m = _readout_signals(m, pd, t1_ms, t.esp_ms, t.etl, flip_rad)
            blocks.append(sig)
        elif ev[0] == "inversion":
            m = apply_inversion(m, ie)
        else:
            m = relax_t1(m, pd, ev[1], t1_ms)
    return np.concatenate(blocks, axis=0), m


def block_response(t1_ms, pd, b1, ie, schedule: BlockSchedule):
    """Affine response of one block to the post-prep magnetization m+.

    Returns (sig0, sig_slope, mend0, mend_slope) such that for any m+:
    signals = sig0 + m+ * sig_slope and Mz(block end) = mend0 + m+ * mend_slope.
    T2 enters the block only through the prep factor applied to produce m+.
    """
    t1_ms = np.asarray(t1_ms, dtype=float)
    zero = np.zeros_like(t1_ms)
    sig0, mend0 = _run_post_prep(zero, pd, t1_ms, b1, ie, schedule)
    sig1, mend1 = _run_post_prep(zero + 1.0, pd, t1_ms, b1, ie, schedule)
    return sig0, sig1 - sig0, mend0, mend1 - mend0


def simulate_evolution_batch(
    t1_ms,
    t2_ms,
    pd,
    b1,
    ie,
    schedule: BlockSchedule,
    tol: float = 1e-6,
    max_blocks: int = 20,
) -> np.ndarray:
    """Steady-state evolutions for a batch of voxels, shape (n_echoes, n).

    Iterates whole blocks from thermal equilibrium Mz = pd until the
    start-of-block Mz is stable to tol (relative) everywhere, then returns
    the converged block's signals.
    """
    t1_ms, t2_ms, pd, b1, ie = np.broadcast_arrays(
        *(np.asarray(a, dtype=float) for a in (t1_ms, t2_ms, pd, b1, ie))
    )
    te = schedule.timing.te_t2prep_ms
    prep = np.exp(-te / t2_ms)
    m = pd.copy()
    rel = np.inf
    for _ in range(max_blocks):
        _, m_end = _run_post_prep(m * prep, pd, t1_ms, b1, ie, schedule)
        rel = np.max(np.abs(m_end - m) / np.maximum(np.abs(m), 1e-30))
        m = m_end
        if rel < tol:
            break
    else:
        raise NumericError(
            f"block iteration not converged after {max_blocks} blocks "
            f"(last relative change {rel:.3e})"
        )
    signals, _ = _run_post_prep(m * prep, pd, t1_ms, b1, ie, schedule)
    return signals


def simulate_evolution(
    p: TissueParams,
    schedule: BlockSchedule,
    tol: float = 1e-6,
    max_blocks: int = 20,
) -> SignalEvolution:
    """Steady-state transverse signal of one voxel at every echo."""
    values = simulate_evolution_batch(
        p.t1_ms, p.t2_ms, p.pd, p.b1, p.ie, schedule, tol=tol, max_blocks=max_blocks
    )
    return SignalEvolution(values=values, echo_times=schedule.echo_times.copy())


def extract_five_point(e: SignalEvolution, schedule: BlockSchedule) -> FivePointSignal:
    """First-echo signal of each readout: indices 0, etl, 2*etl, ..."""
    etl = schedule.timing.etl
    idx = np.arange(N_READOUTS) * etl
    return FivePointSignal(values=e.values[idx].copy())
