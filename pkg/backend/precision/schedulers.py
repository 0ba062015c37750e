"""
Precision schedules: one `bits_for(iteration, epoch, layer_id)` interface over
the learned schedule and the fixed baselines, plus the schedule log that
records any run and replays it.

ProgressiveSchedule and CyclicSchedule are simplified stand-ins for
progressive fractional quantization and cyclic precision training: a linear
staircase and a cosine cycle over epochs. They are not faithful
reimplementations of either method's switching rules.
"""
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from .cost_model import FULL_BITS, LayerCost
from .exceptions import CoverageError, ScheduleError
from .quantizer import bits_of, round_half_away

logger = logging.getLogger(__name__)

MIN_BITS = 2
MAX_BITS = FULL_BITS

SCHEDULE_COLUMNS = ['iteration', 'layer_id', 'layer_name', 'beta', 'bits', 'fwd_bitops', 'cum_fwd_bitops']


def _check_bits(bits, where):
    if not MIN_BITS <= bits <= MAX_BITS:
        raise ScheduleError(f"{where}: bits {bits} outside [{MIN_BITS}, {MAX_BITS}]")
    return int(bits)


class PrecisionSchedule(ABC):
    """Produces the bit-width of each quantized layer at each iteration."""

    kind = 'abstract'
    learned = False

    @abstractmethod
    def bits_for(self, iteration, epoch, layer_id, rng=None) -> int:
        ...

    @property
    @abstractmethod
    def bounds(self):
        """(min, max) bits this schedule can produce."""


@dataclass
class StaticSchedule(PrecisionSchedule):
    bits: int = 8
    kind = 'static'

    def __post_init__(self):
        _check_bits(self.bits, 'static schedule')

    def bits_for(self, iteration, epoch, layer_id, rng=None):
        return self.bits

    @property
    def bounds(self):
        return self.bits, self.bits


@dataclass
class RandomKSchedule(PrecisionSchedule):
    """
    Every k iterations during the first `active_epochs` epochs, draw a bit-width
    uniformly from `choices` and hold it until the next draw. One draw serves
    all layers unless `per_layer` is set. Outside the active epochs every layer
    runs at `fallback_bits`. k=None never redraws after the first draw.
    """
    k: Optional[int] = 10
    choices: Sequence[int] = (4, 6, 8)
    active_epochs: Optional[int] = None
    fallback_bits: int = 8
    per_layer: bool = False
    kind = 'random_k'
    _window: Optional[int] = field(default=None, init=False, repr=False)
    _current: Dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        if self.k is not None and self.k < 1:
            raise ScheduleError(f"random_k needs k >= 1, got {self.k}")
        if not self.choices:
            raise ScheduleError("random_k needs at least one choice")
        self.choices = tuple(_check_bits(b, 'random_k choice') for b in self.choices)
        _check_bits(self.fallback_bits, 'random_k fallback')

    def _window_of(self, iteration):
        return 0 if self.k is None else iteration // self.k

    def bits_for(self, iteration, epoch, layer_id, rng=None):
        if self.active_epochs is not None and epoch >= self.active_epochs:
            return self.fallback_bits
        window = self._window_of(iteration)
        if window != self._window:
            if rng is None:
                raise ScheduleError("random_k needs a random generator to draw bit-widths")
            self._window = window
            self._current = {}
        key = layer_id if self.per_layer else None
        if key not in self._current:
            self._current[key] = int(rng.choice(self.choices))
            logger.debug(f"random_k drew {self._current[key]} bits at iteration {iteration} (key={key})")
        return self._current[key]

    @property
    def bounds(self):
        values = set(self.choices) | {self.fallback_bits}
        return min(values), max(values)


@dataclass
class StagedSchedule(PrecisionSchedule):
    """
    Block-wise bits per training stage. `boundaries` are the epochs at which a
    new stage starts; `stage_bits[s][b]` is the bit-width of block b in stage s,
    so there is one more entry in `stage_bits` than in `boundaries`.
    """
    boundaries: Sequence[int]
    stage_bits: Sequence[Sequence[int]]
    block_of: Mapping[int, int] = field(default_factory=dict)
    kind = 'staged'

    def __post_init__(self):
        if list(self.boundaries) != sorted(self.boundaries):
            raise ScheduleError(f"stage boundaries must be increasing, got {list(self.boundaries)}")
        if len(self.stage_bits) != len(self.boundaries) + 1:
            raise ScheduleError(
                f"{len(self.boundaries)} boundaries need {len(self.boundaries) + 1} stages, got {len(self.stage_bits)}"
            )
        widths = {len(row) for row in self.stage_bits}
        if len(widths) != 1:
            raise ScheduleError("every stage must list bits for the same number of blocks")
        for row in self.stage_bits:
            for bits in row:
                _check_bits(bits, 'staged schedule')

    def stage_of(self, epoch):
        return int(np.searchsorted(np.asarray(self.boundaries), epoch, side='right'))

    def bits_for(self, iteration, epoch, layer_id, rng=None):
        if layer_id not in self.block_of:
            raise ScheduleError(f"layer {layer_id} has no block in the staged mapping")
        block = self.block_of[layer_id]
        row = self.stage_bits[self.stage_of(epoch)]
        if block >= len(row):
            raise ScheduleError(f"layer {layer_id} maps to block {block}, stages only list {len(row)} blocks")
        return int(row[block])

    @property
    def bounds(self):
        flat = [b for row in self.stage_bits for b in row]
        return min(flat), max(flat)


@dataclass
class ProgressiveSchedule(PrecisionSchedule):
    """b_start stepped linearly to b_end over `num_stages` equal spans of the run's epochs."""
    b_start: int
    b_end: int
    num_stages: int
    total_epochs: int
    kind = 'progressive'

    def __post_init__(self):
        _check_bits(self.b_start, 'progressive start')
        _check_bits(self.b_end, 'progressive end')
        if self.num_stages < 1 or self.total_epochs < 1:
            raise ScheduleError("progressive schedule needs num_stages >= 1 and total_epochs >= 1")

    def bits_for(self, iteration, epoch, layer_id, rng=None):
        stage = min(epoch * self.num_stages // self.total_epochs, self.num_stages - 1)
        if self.num_stages == 1:
            return self.b_start
        fraction = stage / (self.num_stages - 1)
        return int(round_half_away(self.b_start + (self.b_end - self.b_start) * fraction))

    @property
    def bounds(self):
        return min(self.b_start, self.b_end), max(self.b_start, self.b_end)


@dataclass
class CyclicSchedule(PrecisionSchedule):
    """Cosine cycle from b_min up to b_max and back, one period per `cycle_len` epochs."""
    b_min: int
    b_max: int
    cycle_len: int
    kind = 'cyclic'

    def __post_init__(self):
        _check_bits(self.b_min, 'cyclic min')
        _check_bits(self.b_max, 'cyclic max')
        if self.b_min > self.b_max or self.cycle_len < 1:
            raise ScheduleError("cyclic schedule needs b_min <= b_max and cycle_len >= 1")

    def bits_for(self, iteration, epoch, layer_id, rng=None):
        phase = (epoch % self.cycle_len) / self.cycle_len
        value = self.b_min + 0.5 * (self.b_max - self.b_min) * (1 - math.cos(2 * math.pi * phase))
        return int(round_half_away(value))

    @property
    def bounds(self):
        return self.b_min, self.b_max


@dataclass
class LearnedSchedule(PrecisionSchedule):
    precisions: Mapping[int, object]
    kind = 'learned'
    learned = True

    def bits_for(self, iteration, epoch, layer_id, rng=None):
        if layer_id not in self.precisions:
            raise ScheduleError(f"layer {layer_id} has no precision parameter")
        return bits_of(self.precisions[layer_id])

    @property
    def bounds(self):
        params = list(self.precisions.values())
        return min(p.b_min for p in params), max(p.b_max for p in params)


@dataclass
class ReplaySchedule(PrecisionSchedule):
    """Bits read back from a recorded schedule log."""
    table: Mapping[tuple, int]
    iterations: int
    layer_ids: Sequence[int]
    kind = 'replay'

    def bits_for(self, iteration, epoch, layer_id, rng=None):
        try:
            return self.table[(iteration, layer_id)]
        except KeyError:
            raise CoverageError(
                f"replay log has no entry for iteration {iteration}, layer {layer_id}",
                missing_iteration=iteration,
            )

    def check_covers(self, total_iterations, layer_ids):
        if sorted(layer_ids) != sorted(self.layer_ids):
            raise CoverageError(f"replay log covers layers {sorted(self.layer_ids)}, run has {sorted(layer_ids)}")
        if self.iterations < total_iterations:
            raise CoverageError(
                f"replay log stops before iteration {self.iterations} of {total_iterations}",
                missing_iteration=self.iterations,
            )

    @property
    def bounds(self):
        values = list(self.table.values())
        return min(values), max(values)


@dataclass(frozen=True)
class ScheduleRecord:
    iteration: int
    layer_id: int
    layer_name: str
    beta: float
    bits: int
    fwd_bitops: float


class ScheduleLog:
    """Append-only sink of ScheduleRecords, kept sorted by (iteration, layer_id)."""

    def __init__(self, records=None):
        self.records = []
        self._cumulative = 0.0
        for record in records or ():
            self.record(record)

    def __len__(self):
        return len(self.records)

    def record(self, rec: ScheduleRecord):
        if self.records:
            last = self.records[-1]
            if (rec.iteration, rec.layer_id) <= (last.iteration, last.layer_id):
                raise ScheduleError(
                    f"schedule rows must be sorted by (iteration, layer_id): "
                    f"({rec.iteration}, {rec.layer_id}) after ({last.iteration}, {last.layer_id})"
                )
        self._cumulative += rec.fwd_bitops
        self.records.append(rec)

    def to_frame(self):
        frame = pd.DataFrame(
            [(r.iteration, r.layer_id, r.layer_name, r.beta, r.bits, r.fwd_bitops) for r in self.records],
            columns=SCHEDULE_COLUMNS[:-1],
        )
        frame['cum_fwd_bitops'] = frame['fwd_bitops'].cumsum()
        return frame.astype({'iteration': np.int64, 'layer_id': np.int64, 'bits': np.int64})

    def write_csv(self, path):
        self.to_frame().to_csv(path, index=False)
        logger.info(f"Wrote {len(self.records)} schedule rows to {path}")

    @classmethod
    def from_frame(cls, frame: pd.DataFrame):
        missing = [c for c in SCHEDULE_COLUMNS if c not in frame.columns]
        if missing:
            raise ScheduleError(f"schedule log is missing columns {missing}")
        return cls(
            ScheduleRecord(int(row.iteration), int(row.layer_id), str(row.layer_name),
                           float(row.beta), int(row.bits), float(row.fwd_bitops))
            for row in frame.itertuples(index=False)
        )

    @classmethod
    def read_csv(cls, path):
        try:
            frame = pd.read_csv(path, keep_default_na=False)
        except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
            raise ScheduleError(f"cannot read schedule log {path}: {exc}") from exc
        return cls.from_frame(frame)

    def replay(self) -> ReplaySchedule:
        """Validate the log (non-empty, sorted, gap-free) and turn it into a schedule."""
        if not self.records:
            raise ScheduleError("schedule log is empty")
        layer_ids = sorted({r.layer_id for r in self.records if r.iteration == self.records[0].iteration})
        if self.records[0].iteration != 0:
            raise CoverageError("schedule log does not start at iteration 0", missing_iteration=0)
        table = {}
        expected_iteration = 0
        for iteration, rows in pd.DataFrame(
            [(r.iteration, r.layer_id, r.bits) for r in self.records], columns=['iteration', 'layer_id', 'bits']
        ).groupby('iteration', sort=True):
            if iteration != expected_iteration:
                raise CoverageError(f"schedule log is missing iteration {expected_iteration}",
                                    missing_iteration=expected_iteration)
            if sorted(rows['layer_id'].tolist()) != layer_ids:
                raise CoverageError(f"schedule log iteration {iteration} does not cover layers {layer_ids}",
                                    missing_iteration=int(iteration))
            for layer_id, bits in zip(rows['layer_id'], rows['bits']):
                table[(int(iteration), int(layer_id))] = int(bits)
            expected_iteration += 1
        return ReplaySchedule(table, expected_iteration, layer_ids)


def record_iteration(log: ScheduleLog, iteration, bits: Mapping[int, int], costs: Sequence[LayerCost],
                     names: Mapping[int, str], precisions: Mapping[int, object] = None, n=8):
    """Append one row per quantized layer. Non-learned schedules log beta = bits / N."""
    for cost in sorted(costs, key=lambda c: c.layer_id):
        b = bits[cost.layer_id]
        if precisions and cost.layer_id in precisions:
            beta = precisions[cost.layer_id].beta
        else:
            beta = b / n
        log.record(ScheduleRecord(
            iteration=iteration,
            layer_id=cost.layer_id,
            layer_name=names.get(cost.layer_id, ''),
            beta=float(beta),
            bits=int(b),
            fwd_bitops=float(cost.o_full * (b / FULL_BITS) ** 2),
        ))


def replay(log: ScheduleLog) -> ReplaySchedule:
    return log.replay()
