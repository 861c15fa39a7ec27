"""Poisson stream of reproduction events and exact state updates.

The hot loop is compiled with numba. Every event draws its time spacing,
kind, center and radius, then a small buffer of parent-sampling uniforms.
The update itself is a pure function of the event and that buffer, so an
event log replays bitwise.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
from numba import njit
from numpy.typing import NDArray

from .errors import ReplayError, ResolutionError
from .lattice import FrequencyField, TorusGrid, ball_volume
from .models import (
    N_KINDS,
    EventKind,
    EventLaw,
    FixedRadius,
    GeneralF,
    Overdominance,
    StablePareto,
    total_event_rate,
    uniforms_per_kind,
)
from .scaling import Regime, ScalingParams

#: Expected event count above which a run is refused.
MAX_EXPECTED_EVENTS = 1e12

_RADIUS_FIXED = 0
_RADIUS_PARETO = 1
_MAX_UNIFORMS = 16


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream identified by ``(seed, stream, counter)``.

    Streams with distinct indices use independent Philox keys derived by
    ``SeedSequence``; ``counter`` skips that many Philox blocks.
    """

    seed: int
    stream: int = 0
    counter: int = 0

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(self.seed, spawn_key=(self.stream,))
        bits = np.random.Philox(seq)
        if self.counter:
            bits.advance(self.counter)
        return np.random.Generator(bits)


@dataclass(frozen=True)
class ReproductionEvent:
    """One event: time, center, radius, kind and the parent-sampling uniforms."""

    t: float
    x: NDArray[np.float64]
    r: float
    kind: EventKind
    uniforms: NDArray[np.float64]


# --------------------------------------------------------------------------
# compiled kernels
#
# Numba's IR-level inlining of helpers measurably defeats LLVM optimization
# of the event loop, so the geometry and update code lives in one function.
# Simulation and replay share it, which keeps replay bitwise faithful.


@njit(cache=True)
def _event_kernel(
    q, d, n, h, L, u, model_code, m, p_table, seg_start, seg_len,
    gen, rate, cum_w, n_uniforms, radius_code, R, pareto_expo, pareto_span, t_next, t_stop, max_events,
    replay, rp_x, rp_r, rp_kind, rp_nu, rp_u,
    log_on, log_t, log_x, log_r, log_kind, log_u, log_nu, log_pos,
):
    """Apply a stream of events to the flat field ``q``.

    In draw mode events are generated until the next one would fall after
    ``t_stop`` or ``max_events`` have been applied (the pending time is then
    returned negated). In replay mode the logged events ``rp_*`` are applied.
    Returns the pending event time, the number of events applied and the
    run count and update target of the last event.

    Ball membership uses the cell-center rule: cells whose centers lie
    strictly within ``r`` of the event center, stored as contiguous runs of
    flat indices. Parent ``i`` uses ``ub[2i]`` to pick a member cell
    uniformly (in run order) and ``ub[2i+1]`` to draw its type from that
    cell's frequency. Parent types are packed in the bits of ``bits``.
    """
    x = np.empty(d)
    ub = np.empty(16)
    done = 0
    rp_pos = 0
    nseg = 0
    target = 0.0
    n_replay = rp_r.shape[0]
    while True:
        if replay:
            if done >= n_replay:
                break
            for k in range(d):
                x[k] = rp_x[done, k]
            r = rp_r[done]
            kind = rp_kind[done]
            nu = rp_nu[done]
            for k in range(nu):
                ub[k] = rp_u[rp_pos + k]
            rp_pos += nu
        else:
            if t_next > t_stop:
                break
            if done >= max_events:
                return -t_next, done, nseg, target
            kind_u = gen.random()
            kind = 0
            while kind < cum_w.shape[0] - 1 and kind_u >= cum_w[kind]:
                kind += 1
            for k in range(d):
                x[k] = gen.random() * L
            if radius_code == 0:
                r = R
            else:
                r = (1.0 - gen.random() * pareto_span) ** pareto_expo
            nu = n_uniforms[kind]
            for k in range(nu):
                ub[k] = gen.random()

        # ball runs; unwrapped indices stay in (-n, 2n) since 2r < L
        nseg = 0
        lo0 = int(np.floor((x[0] - r) / h - 0.5)) + 1
        hi0 = int(np.ceil((x[0] + r) / h - 0.5)) - 1
        if d == 1:
            ilo = lo0
            ihi = hi0
            base = 0
            n_rows = 1
        else:
            n_rows = hi0 - lo0 + 1
        for row in range(n_rows):
            if d == 2:
                i0 = lo0 + row
                d0 = (i0 + 0.5) * h - x[0]
                rem = r * r - d0 * d0
                if rem <= 0.0:
                    continue
                half = np.sqrt(rem)
                ilo = int(np.floor((x[1] - half) / h - 0.5)) + 1
                ihi = int(np.ceil((x[1] + half) / h - 0.5)) - 1
                w0 = i0 + n if i0 < 0 else (i0 - n if i0 >= n else i0)
                base = w0 * n
            if d == 3:
                i0 = lo0 + row
                d0 = (i0 + 0.5) * h - x[0]
                rem0 = r * r - d0 * d0
                if rem0 <= 0.0:
                    continue
                half0 = np.sqrt(rem0)
                lo1 = int(np.floor((x[1] - half0) / h - 0.5)) + 1
                hi1 = int(np.ceil((x[1] + half0) / h - 0.5)) - 1
                w0 = i0 + n if i0 < 0 else (i0 - n if i0 >= n else i0)
                for i1 in range(lo1, hi1 + 1):
                    d1 = (i1 + 0.5) * h - x[1]
                    rem = rem0 - d1 * d1
                    if rem <= 0.0:
                        continue
                    half = np.sqrt(rem)
                    ilo = int(np.floor((x[2] - half) / h - 0.5)) + 1
                    ihi = int(np.ceil((x[2] + half) / h - 0.5)) - 1
                    w1 = i1 + n if i1 < 0 else (i1 - n if i1 >= n else i1)
                    base = (w0 * n + w1) * n
                    length = ihi - ilo + 1
                    if length <= 0:
                        continue
                    start = ilo + n if ilo < 0 else (ilo - n if ilo >= n else ilo)
                    first = min(length, n - start)
                    seg_start[nseg] = base + start
                    seg_len[nseg] = first
                    nseg += 1
                    if first < length:
                        seg_start[nseg] = base
                        seg_len[nseg] = length - first
                        nseg += 1
                continue
            length = ihi - ilo + 1
            if length <= 0:
                continue
            start = ilo + n if ilo < 0 else (ilo - n if ilo >= n else ilo)
            first = min(length, n - start)
            seg_start[nseg] = base + start
            seg_len[nseg] = first
            nseg += 1
            if first < length:
                seg_start[nseg] = base
                seg_len[nseg] = length - first
                nseg += 1

        count = 0
        for k in range(nseg):
            count += seg_len[k]
        if count > 0:
            if model_code == 0:
                n_par = 1 if kind == 0 else m
            elif kind == 0:
                n_par = 2
            elif kind <= 2:
                n_par = 4
            else:
                n_par = 0
            bits = 0
            for i in range(n_par):
                j = min(int(ub[2 * i] * count), count - 1)
                k = 0
                while j >= seg_len[k]:
                    j -= seg_len[k]
                    k += 1
                bits |= int(ub[2 * i + 1] < q[seg_start[k] + j]) << i
            if model_code == 0:
                if kind == 0:
                    target = float(bits)
                else:
                    target = 1.0 if ub[2 * m] < p_table[bits] else 0.0
            elif kind == 0:
                target = 0.5 * ((bits & 1) + (bits >> 1))
            elif kind == 3:
                target = 0.0
            elif kind == 4:
                target = 1.0
            else:
                # Two parent pairs; a pair homozygous for the disfavoured
                # allele is discarded when the other pair is not.
                bad = 3 if kind == 1 else 0
                p1 = bits & 3
                p2 = bits >> 2
                if p1 == bad and p2 != bad:
                    pick = p2
                elif p2 == bad and p1 != bad:
                    pick = p1
                elif ub[8] < 0.5:
                    pick = p1
                else:
                    pick = p2
                target = 0.5 * ((pick & 1) + (pick >> 1))
            for k in range(nseg):
                a = seg_start[k]
                for c in range(a, a + seg_len[k]):
                    q[c] += u * (target - q[c])

        if log_on:
            log_t[done] = t_next
            for k in range(d):
                log_x[done, k] = x[k]
            log_r[done] = r
            log_kind[done] = kind
            log_nu[done] = nu
            p = log_pos[0]
            for k in range(nu):
                log_u[p + k] = ub[k]
            log_pos[0] = p + nu
        done += 1
        if not replay:
            t_next = t_next + gen.standard_exponential() / rate
    return t_next, done, nseg, target


@njit(cache=True)
def _first_time(gen, t0, rate):
    return t0 + gen.standard_exponential() / rate


# --------------------------------------------------------------------------
# python-level API


def _model_arrays(model: GeneralF | Overdominance):
    return model.model_code, int(model.m), np.ascontiguousarray(model.p_table, dtype=float)


def _radius_arrays(law: EventLaw, d: int):
    rad = law.radius
    if isinstance(rad, FixedRadius):
        return _RADIUS_FIXED, rad.R, 0.0, 0.0
    b = d + rad.alpha
    span = 1.0 - (0.0 if np.isinf(rad.r_max) else rad.r_max**-b)
    return _RADIUS_PARETO, 1.0, -1.0 / b, span


def _law_segment_buffers(grid: TorusGrid, law: EventLaw):
    rmax = law.radius.max_radius
    if np.isinf(rmax):
        raise ValueError("an untruncated radius law cannot be simulated on a torus")
    if 2 * rmax >= grid.L:
        raise ResolutionError("reproduction balls would wrap around the torus onto themselves")
    return _segment_buffers(grid, rmax)


_EMPTY_F = np.zeros(0)
_EMPTY_I = np.zeros(0, np.int64)
_EMPTY_U8 = np.zeros(0, np.uint8)
_DUMMY_CUM = np.ones(1)


def _replay_kernel(q, grid: TorusGrid, u: float, model, xs, rs, kinds, nus, us, seg_start, seg_len):
    """Run the compiled kernel over logged events; returns (count, last run count, last target)."""
    code, m, p_table = _model_arrays(model)
    _, done, nseg, target = _event_kernel(
        q, grid.d, grid.n, grid.h, grid.L, float(u), code, m, p_table, seg_start, seg_len,
        _dummy_generator(), 1.0, _DUMMY_CUM, _EMPTY_I, _RADIUS_FIXED, 1.0, 0.0, 0.0, 0.0, 0.0, 0,
        True, np.ascontiguousarray(xs, dtype=float).reshape(-1, grid.d), np.ascontiguousarray(rs, dtype=float),
        np.ascontiguousarray(kinds, dtype=np.int64), np.ascontiguousarray(nus, dtype=np.int64),
        np.ascontiguousarray(us, dtype=float),
        False, _EMPTY_F, np.zeros((0, grid.d)), _EMPTY_F, _EMPTY_U8, _EMPTY_F, _EMPTY_I, np.zeros(1, np.int64),
    )
    return done, nseg, target


_DUMMY_GEN: list[np.random.Generator] = []


def _dummy_generator() -> np.random.Generator:
    # replay mode never draws; the kernel signature still needs a generator
    if not _DUMMY_GEN:
        _DUMMY_GEN.append(np.random.Generator(np.random.Philox(0)))
    return _DUMMY_GEN[0]


def _check_resolution(grid: TorusGrid, law: EventLaw) -> None:
    rmin = law.radius.R if isinstance(law.radius, FixedRadius) else 1.0
    if rmin < grid.h:
        raise ResolutionError(f"smallest radius {rmin} is below the cell width {grid.h}")


def _segment_buffers(grid: TorusGrid, rmax: float):
    rows = int(np.ceil(2 * rmax / grid.h)) + 2
    nmax = 2 * rows ** (grid.d - 1)
    return np.empty(nmax, dtype=np.int64), np.empty(nmax, dtype=np.int64)


def ball_cells(grid: TorusGrid, x, r: float) -> NDArray[np.int64]:
    """Flat indices of the cells whose centers lie strictly inside ``B(x, r)``."""
    x = np.ascontiguousarray(np.broadcast_to(np.asarray(x, dtype=float), (grid.d,)))
    if 2 * r >= grid.L:
        raise ResolutionError("ball would wrap around the torus onto itself")
    seg_start, seg_len = _segment_buffers(grid, r)
    # A zero-parent event with zero impact only computes the ball.
    _, nseg, _ = _replay_kernel(
        np.zeros(grid.size), grid, 0.0, Overdominance(0.5, 0.25), x[None, :], [float(r)],
        [int(EventKind.MUTATION_1)], [0], _EMPTY_F, seg_start, seg_len,
    )
    cells = [np.arange(a, a + k) for a, k in zip(seg_start[:nseg], seg_len[:nseg])]
    if not cells or sum(len(c) for c in cells) == 0:
        raise ResolutionError(f"ball of radius {r} at {x} contains no cell center")
    return np.concatenate(cells)


def draw_event(
    grid: TorusGrid, law: EventLaw, model: GeneralF | Overdominance, rng: np.random.Generator, t: float = 0.0,
    kind: EventKind | None = None,
) -> ReproductionEvent:
    """Draw an event's center, radius, kind (unless given) and uniforms."""
    weights = law.kind_weights(model)
    if kind is None:
        kind = EventKind(int(rng.choice(N_KINDS, p=weights)))
    x = rng.random(grid.d) * grid.L
    r = float(law.radius.inverse_cdf(rng.random(), grid.d))
    nu = int(uniforms_per_kind(model)[kind])
    return ReproductionEvent(t, x, r, EventKind(kind), rng.random(nu))


def apply_event(q: FrequencyField, ev: ReproductionEvent, u: float, model: GeneralF | Overdominance) -> tuple[FrequencyField, float]:
    """Apply one event to a copy of ``q``; returns the new field and the update target."""
    need = int(uniforms_per_kind(model)[ev.kind])
    if len(ev.uniforms) < need:
        raise ValueError(f"{ev.kind.name} event needs {need} uniforms, got {len(ev.uniforms)}")
    if model.haploid and ev.kind not in (EventKind.NEUTRAL, EventKind.SELECTIVE):
        raise ValueError(f"haploid models have no {ev.kind.name} events")
    grid = q.grid
    x = np.ascontiguousarray(np.broadcast_to(np.asarray(ev.x, dtype=float), (grid.d,)))
    if 2 * ev.r >= grid.L:
        raise ResolutionError("ball would wrap around the torus onto itself")
    seg_start, seg_len = _segment_buffers(grid, ev.r)
    vals = q.values.ravel().copy()
    _, nseg, target = _replay_kernel(
        vals, grid, u, model, x[None, :], [float(ev.r)], [int(ev.kind)], [need],
        np.asarray(ev.uniforms[:need], dtype=float), seg_start, seg_len,
    )
    if nseg == 0 or seg_len[:nseg].sum() == 0:
        raise ResolutionError(f"ball of radius {ev.r} at {x} contains no cell center")
    return FrequencyField(q.grid, vals.reshape(q.grid.shape)), float(target)


def apply_neutral_event(q: FrequencyField, ev: ReproductionEvent, u: float) -> FrequencyField:
    """Haploid neutral event: one uniform parent cell, offspring takes its type."""
    if ev.kind != EventKind.NEUTRAL:
        raise ValueError("not a neutral event")
    return apply_event(q, ev, u, GeneralF(1, (0.0, 1.0)))[0]


def apply_selective_event_haploid(q: FrequencyField, ev: ReproductionEvent, u: float, model: GeneralF) -> FrequencyField:
    """Haploid selective event through the ``(m, p)`` parent mechanism."""
    if ev.kind != EventKind.SELECTIVE or not model.haploid:
        raise ValueError("needs a selective event and a haploid model")
    return apply_event(q, ev, u, model)[0]


def apply_diploid_event(q: FrequencyField, ev: ReproductionEvent, u: float, model: Overdominance) -> FrequencyField:
    """Diploid event of any kind under the overdominance mechanism."""
    if model.haploid:
        raise ValueError("needs a diploid model")
    return apply_event(q, ev, u, model)[0]


@dataclass
class EventLogData:
    """Arrays describing every applied event, in order."""

    d: int
    times: NDArray[np.float64]
    centers: NDArray[np.float64]
    radii: NDArray[np.float64]
    kinds: NDArray[np.uint8]
    n_uniforms: NDArray[np.int64]
    uniforms: NDArray[np.float64]

    @classmethod
    def empty(cls, d: int) -> "EventLogData":
        return cls(d, np.zeros(0), np.zeros((0, d)), np.zeros(0), np.zeros(0, np.uint8), np.zeros(0, np.int64), np.zeros(0))

    def __len__(self) -> int:
        return len(self.radii)


@dataclass
class TrajectoryRecord:
    """Output of :func:`run_trajectory`."""

    grid: TorusGrid
    sample_times: NDArray[np.float64]
    snapshots: list[NDArray[np.float64]]
    observations: dict[str, list]
    final: NDArray[np.float64]
    n_events: int
    rng_state: dict = field(repr=False, default_factory=dict)
    log: EventLogData | None = None


def run_trajectory(
    q0: FrequencyField,
    law: EventLaw,
    model: GeneralF | Overdominance,
    horizon: float,
    rng: RngStream,
    sample_times=None,
    observers: Mapping[str, Callable[[float, NDArray[np.float64]], object]] | None = None,
    keep_snapshots: bool = False,
    log_events: bool = False,
) -> TrajectoryRecord:
    """Simulate the event stream on ``[0, horizon]`` from ``q0``.

    Observers are called as ``observer(t, values)`` at each sample time with
    the field right after every event at or before ``t``. The event stream
    does not depend on the sample schedule.
    """
    grid = q0.grid
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    law.validate(grid.d, model)
    if not model.haploid and law.s != 0:
        raise ValueError("diploid weights come from the model")
    _check_resolution(grid, law)
    rate = total_event_rate(law, grid)
    if rate * horizon > MAX_EXPECTED_EVENTS:
        raise ValueError(f"expected event count {rate * horizon:.3g} exceeds the configured bound")
    times = np.array([0.0, horizon] if sample_times is None else sample_times, dtype=float)
    if np.any(np.diff(times) < 0) or times[0] < 0 or times[-1] > horizon:
        raise ValueError("sample times must be sorted within [0, horizon]")
    observers = dict(observers or {})

    weights = law.kind_weights(model)
    cum_w = np.cumsum(weights)
    cum_w[-1] = 1.0 + 1e-9
    n_uniforms = uniforms_per_kind(model)
    code, m, p_table = _model_arrays(model)
    radius_code, R, expo, span = _radius_arrays(law, grid.d)
    seg_start, seg_len = _law_segment_buffers(grid, law)
    q = q0.values.ravel().copy()
    gen = rng.generator()

    chunk = 1 << 16
    if log_events:
        log_t = np.empty(chunk)
        log_x = np.empty((chunk, grid.d))
        log_r = np.empty(chunk)
        log_kind = np.empty(chunk, np.uint8)
        log_nu = np.empty(chunk, np.int64)
        log_u = np.empty(chunk * _MAX_UNIFORMS)
    else:
        log_t = np.empty(0)
        log_x = np.empty((0, grid.d))
        log_r = np.empty(0)
        log_kind = np.empty(0, np.uint8)
        log_nu = np.empty(0, np.int64)
        log_u = np.empty(0)
    log_pos = np.zeros(1, np.int64)
    pieces: list[tuple] = []

    snapshots: list[NDArray[np.float64]] = []
    obs: dict[str, list] = {name: [] for name in observers}
    n_events = 0
    t_next = _first_time(gen, 0.0, rate)
    for t_obs in times:
        while True:
            max_ev = chunk if log_events else np.iinfo(np.int64).max
            t_next, done, _, _ = _event_kernel(
                q, grid.d, grid.n, grid.h, grid.L, float(law.u), code, m, p_table, seg_start, seg_len,
                gen, rate, cum_w, n_uniforms, radius_code, R, expo, span, t_next, float(t_obs), max_ev,
                False, np.zeros((0, grid.d)), _EMPTY_F, _EMPTY_I, _EMPTY_I, _EMPTY_F,
                log_events, log_t, log_x, log_r, log_kind, log_u, log_nu, log_pos,
            )
            n_events += done
            if log_events and done:
                p = int(log_pos[0])
                pieces.append((log_t[:done].copy(), log_x[:done].copy(), log_r[:done].copy(),
                               log_kind[:done].copy(), log_nu[:done].copy(), log_u[:p].copy()))
                log_pos[0] = 0
            if t_next >= 0:
                break
            t_next = -t_next
        field_now = q.reshape(grid.shape)
        if keep_snapshots:
            snapshots.append(field_now.copy())
        for name, fn in observers.items():
            obs[name].append(fn(float(t_obs), field_now))

    log = None
    if log_events:
        if pieces:
            log = EventLogData(
                grid.d,
                np.concatenate([p[0] for p in pieces]),
                np.concatenate([p[1] for p in pieces]),
                np.concatenate([p[2] for p in pieces]),
                np.concatenate([p[3] for p in pieces]),
                np.concatenate([p[4] for p in pieces]),
                np.concatenate([p[5] for p in pieces]),
            )
        else:
            log = EventLogData.empty(grid.d)
    return TrajectoryRecord(
        grid=grid,
        sample_times=times,
        snapshots=snapshots,
        observations=obs,
        final=q.reshape(grid.shape).copy(),
        n_events=n_events,
        rng_state=gen.bit_generator.state,
        log=log,
    )


def replay_events(q0: FrequencyField, law: EventLaw, model: GeneralF | Overdominance, log: EventLogData) -> NDArray[np.float64]:
    """Re-apply logged events to ``q0``; returns the final field values."""
    grid = q0.grid
    if log.d != grid.d:
        raise ReplayError("log dimension differs from the grid")
    q = q0.values.ravel().copy()
    if len(log):
        _replay_kernel(q, grid, law.u, model, log.centers, log.radii, log.kinds, log.n_uniforms, log.uniforms,
                       *_law_segment_buffers(grid, law))
    return q.reshape(grid.shape)


# --------------------------------------------------------------------------
# event log file

_LOG_MAGIC = b"SLFVEVT1"
_LOG_HEADER = struct.Struct("<8sI32s")


def write_event_log(path: str | Path, log: EventLogData, config_hash: str) -> None:
    """Binary log: header then one record per event.

    Record layout: ``t`` f64, ``x`` d x f64, ``r`` f64, ``kind`` u8, uniform
    count u32, then the uniforms as f64. All little-endian.
    """
    digest = bytes.fromhex(config_hash)[:32].ljust(32, b"\0")
    pos = 0
    with open(path, "wb") as fh:
        fh.write(_LOG_HEADER.pack(_LOG_MAGIC, log.d, digest))
        rec = struct.Struct(f"<d{log.d}ddBI")
        for j in range(len(log)):
            nu = int(log.n_uniforms[j])
            fh.write(rec.pack(log.times[j], *log.centers[j], log.radii[j], int(log.kinds[j]), nu))
            fh.write(np.asarray(log.uniforms[pos : pos + nu], dtype="<f8").tobytes())
            pos += nu


def _truncation_message(j: int) -> str:
    if j == 0:
        return "event log truncated inside record 0; no valid records"
    return f"event log truncated inside record {j}; last valid record is {j - 1}"


def read_event_log(path: str | Path) -> tuple[EventLogData, str]:
    """Parse a log written by :func:`write_event_log`; returns the data and config hash."""
    data = Path(path).read_bytes()
    if len(data) < _LOG_HEADER.size:
        raise ReplayError("event log header is truncated")
    magic, d, digest = _LOG_HEADER.unpack_from(data)
    if magic != _LOG_MAGIC:
        raise ReplayError(f"bad event log magic {magic!r}")
    rec = struct.Struct(f"<d{d}ddBI")
    off = _LOG_HEADER.size
    times, centers, radii, kinds, nus, us = [], [], [], [], [], []
    while off < len(data):
        j = len(times)
        if off + rec.size > len(data):
            raise ReplayError(_truncation_message(j))
        vals = rec.unpack_from(data, off)
        nu = vals[-1]
        end = off + rec.size + 8 * nu
        if end > len(data):
            raise ReplayError(_truncation_message(j))
        times.append(vals[0])
        centers.append(vals[1 : 1 + d])
        radii.append(vals[1 + d])
        kinds.append(vals[2 + d])
        nus.append(nu)
        us.append(np.frombuffer(data, dtype="<f8", count=nu, offset=off + rec.size))
        off = end
    log = EventLogData(
        d,
        np.array(times, dtype=float),
        np.array(centers, dtype=float).reshape(-1, d),
        np.array(radii, dtype=float),
        np.array(kinds, dtype=np.uint8),
        np.array(nus, dtype=np.int64),
        np.concatenate(us).astype(float) if us else np.zeros(0),
    )
    return log, digest.hex()


# --------------------------------------------------------------------------
# rescaling


@dataclass(frozen=True)
class RescaledTrajectory:
    """Rescaled view of a raw trajectory: same arrays, relabelled coordinates."""

    grid: TorusGrid
    times: NDArray[np.float64]
    snapshots: list[NDArray[np.float64]]
    scaling: ScalingParams


def rescale_view(record: TrajectoryRecord, scaling: ScalingParams, law: EventLaw | None = None) -> RescaledTrajectory:
    """Map raw time ``t`` to ``t * eta`` and raw space ``x`` to ``x * delta``.

    Field arrays are shared with the raw record, not copied.
    """
    if law is not None:
        stable_law = isinstance(law.radius, StablePareto)
        if stable_law != (scaling.regime is Regime.STABLE):
            raise ValueError("scaling regime does not match the radius law")
    return RescaledTrajectory(
        grid=record.grid.scaled(scaling.delta),
        times=record.sample_times * scaling.eta,
        snapshots=record.snapshots,
        scaling=scaling,
    )


def config_digest(text: str) -> str:
    """SHA-256 hex digest used to tie logs and manifests to a configuration."""
    return hashlib.sha256(text.encode()).hexdigest()


def expected_ball_volume(law: EventLaw, d: int) -> float:
    """Mean continuum ball volume under the radius law (per unit rate)."""
    rad = law.radius
    if isinstance(rad, FixedRadius):
        return ball_volume(d, rad.R)
    b = d + rad.alpha
    # E[r^d] for density proportional to r^-(b+1) on [1, r_max]
    num = (1.0 - rad.r_max ** (d - b)) / (b - d)
    return ball_volume(d, 1.0) * num / rad.total_mass(d)
