"""Power-trace acquisition: CSV files, live counter files, synthetic generators.

Trace CSV format: header line ``t_s,p_w`` followed by ``<float>,<float>``
rows, UTF-8, ``.`` decimal separator, LF line endings.

Counter files follow the RAPL convention: a text file holding one
non-negative integer, a cumulative energy counter in microjoules, re-read
on every poll.  The wrap-around modulus is configuration (default 2**32),
overridable through the ``ENCWATT_WRAP_UJ`` environment variable.
"""

from __future__ import annotations

import abc
import json
import os
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .energy import PowerSample, PowerTrace
from .errors import (
    AcquisitionError,
    CorruptCounterError,
    MalformedTraceError,
    TraceWindowError,
)

__all__ = [
    "TraceSourceSpec",
    "SyntheticRecipe",
    "parse_trace_csv",
    "write_trace_csv",
    "read_counter_uj",
    "sample_counter_file",
    "generate_synthetic_trace",
    "Meter",
    "MeterSession",
    "CounterMeter",
    "SyntheticMeter",
    "CsvReplayMeter",
    "make_meter",
    "parse_meter_spec",
    "DEFAULT_POLL_PERIOD",
    "DEFAULT_WRAP_UJ",
]

DEFAULT_POLL_PERIOD = 0.1  # seconds; configuration default, not a measured value
DEFAULT_WRAP_UJ = 2**32
WRAP_ENV_VAR = "ENCWATT_WRAP_UJ"

TRACE_HEADER = "t_s,p_w"


@dataclass(frozen=True)
class TraceSourceSpec:
    """Where a power trace comes from: a CSV, a live counter, or a recipe."""

    kind: str  # csv_file | counter_file | synthetic
    path_or_recipe: str
    sample_period: float = DEFAULT_POLL_PERIOD

    def __post_init__(self) -> None:
        if self.kind not in ("csv_file", "counter_file", "synthetic"):
            raise ValueError(f"unknown trace source kind {self.kind!r}")
        if self.kind in ("counter_file", "synthetic") and self.sample_period <= 0:
            raise ValueError(f"sample_period must be > 0, got {self.sample_period}")


@dataclass(frozen=True)
class SyntheticRecipe:
    """Test double for a power meter: base load plus an active step."""

    base_power: float = 20.0
    active_power: float = 30.0
    noise_std: float = 0.0
    duration: float = 10.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.base_power < 0 or self.active_power < 0:
            raise ValueError("base_power and active_power must be >= 0")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.duration <= 0:
            raise ValueError("duration must be > 0")


def parse_trace_csv(path: str | Path) -> PowerTrace:
    """Read a trace CSV, validating header, monotonicity, and power sign."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise AcquisitionError(f"cannot read trace file {path}: {exc}") from exc
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()  # trailing newline
    if not lines or lines[0].strip() != TRACE_HEADER:
        raise MalformedTraceError(
            f"{path}: expected header {TRACE_HEADER!r}, got {lines[0]!r}" if lines
            else f"{path}: empty file"
        )
    samples: list[PowerSample] = []
    prev_t: Optional[float] = None
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split(",")
        if len(fields) != 2:
            raise MalformedTraceError(
                f"{path}, line {lineno}: expected 2 columns, got {len(fields)}"
            )
        try:
            t, p = float(fields[0]), float(fields[1])
        except ValueError as exc:
            raise MalformedTraceError(f"{path}, line {lineno}: {exc}") from exc
        if p < 0:
            raise MalformedTraceError(f"{path}, line {lineno}: negative power {p}")
        if prev_t is not None and t <= prev_t:
            raise MalformedTraceError(
                f"{path}, line {lineno}: timestamp {t} not greater than previous {prev_t}"
            )
        prev_t = t
        samples.append(PowerSample(t, p))
    if len(samples) < 2:
        raise MalformedTraceError(f"{path}: fewer than 2 samples")
    return PowerTrace(tuple(samples), source_label=str(path))


def write_trace_csv(trace: PowerTrace, path: str | Path) -> None:
    """Write a trace in canonical CSV form (shortest round-trip floats, LF)."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(TRACE_HEADER + "\n")
        for s in trace.samples:
            fh.write(f"{s.t!r},{s.p!r}\n")


def _wrap_modulus(override: Optional[int]) -> int:
    if override is not None:
        return override
    env = os.environ.get(WRAP_ENV_VAR)
    if env is not None:
        try:
            value = int(env)
        except ValueError as exc:
            raise AcquisitionError(f"{WRAP_ENV_VAR} must be an integer, got {env!r}") from exc
        if value <= 0:
            raise AcquisitionError(f"{WRAP_ENV_VAR} must be positive, got {value}")
        return value
    return DEFAULT_WRAP_UJ


def read_counter_uj(path: str | Path) -> int:
    """Read a cumulative microjoule counter from a text file."""
    try:
        raw = Path(path).read_text().strip()
    except OSError as exc:
        raise AcquisitionError(f"cannot read counter file {path}: {exc}") from exc
    try:
        value = int(raw)
    except ValueError as exc:
        raise AcquisitionError(f"counter file {path} does not hold an integer: {raw!r}") from exc
    if value < 0:
        raise AcquisitionError(f"counter file {path} holds a negative value: {value}")
    return value


def counter_delta_uj(prev: int, current: int, modulus: int, wrap_fraction: float = 0.5) -> int:
    """Microjoules consumed between two counter readings, handling wrap-around.

    A decrease is interpreted as one wrap of the counter; if the implied
    interval energy reaches ``wrap_fraction`` of the modulus the decrease
    cannot be a plausible wrap and the counter is reported corrupt.
    """
    delta = current - prev
    if delta < 0:
        delta += modulus
        if delta >= wrap_fraction * modulus:
            raise CorruptCounterError(
                f"counter fell from {prev} to {current}; implied wrap energy {delta} uJ "
                f"exceeds {wrap_fraction:.0%} of modulus {modulus}"
            )
    return delta


def sample_counter_file(
    path: str | Path,
    period: float,
    stop_signal: Optional[threading.Event] = None,
    *,
    max_duration: Optional[float] = None,
    wrap_modulus: Optional[int] = None,
    clock: Callable[[], float] = time.monotonic,
    wait: Optional[Callable[[float], None]] = None,
    source_label: Optional[str] = None,
    ready: Optional[threading.Event] = None,
) -> PowerTrace:
    """Poll a cumulative energy counter and return interval-average powers.

    Each poll interval becomes one sample at the interval midpoint with
    power ``delta_uJ / dt / 1e6``.  Polling runs until ``stop_signal`` is
    set or ``max_duration`` elapses (at least one must be given).  When
    stopped by signal a final partial interval is captured so the trace
    reaches the stop moment.  ``ready`` is set right after the initial
    counter reading, letting a supervisor delay the measured activity
    until sampling has actually begun.

    The ``clock`` and ``wait`` hooks exist for deterministic testing;
    production use keeps the defaults.
    """
    if period <= 0:
        raise ValueError(f"period must be > 0, got {period}")
    if stop_signal is None and max_duration is None:
        raise ValueError("need a stop_signal or a max_duration; refusing to poll forever")
    modulus = _wrap_modulus(wrap_modulus)
    if wait is None:
        wait = stop_signal.wait if stop_signal is not None else time.sleep

    label = source_label if source_label is not None else f"counter:{path}"
    t0 = clock()
    prev_t = t0
    prev_c = read_counter_uj(path)
    if ready is not None:
        ready.set()
    samples: list[PowerSample] = []

    def take_reading() -> None:
        nonlocal prev_t, prev_c
        now = clock()
        current = read_counter_uj(path)
        dt = now - prev_t
        if dt <= 0:
            return
        delta = counter_delta_uj(prev_c, current, modulus)
        midpoint = (prev_t + now) / 2.0 - t0
        samples.append(PowerSample(midpoint, delta / dt / 1e6))
        prev_t, prev_c = now, current

    while True:
        if stop_signal is not None and stop_signal.is_set():
            break
        if max_duration is not None and clock() - t0 >= max_duration:
            break
        wait(period)
        take_reading()

    if stop_signal is not None and stop_signal.is_set() and clock() - prev_t > period * 0.05:
        take_reading()  # final partial interval up to the stop moment

    if len(samples) < 2:
        raise AcquisitionError(
            f"counter sampling of {path} yielded {len(samples)} interval(s); "
            f"need at least 2 (sampled for {clock() - t0:.3f} s at period {period} s)"
        )
    return PowerTrace(tuple(samples), source_label=label)


def generate_synthetic_trace(
    recipe: SyntheticRecipe,
    active_window: tuple[float, float],
    sample_period: float = DEFAULT_POLL_PERIOD,
    source_label: str = "synthetic",
) -> PowerTrace:
    """Deterministic synthetic trace: base power plus a step inside the window.

    Samples lie on the grid ``0, T, 2T, ...`` up to the recipe duration
    (the endpoint is included).  Window membership is half-open,
    ``a <= t < b``, so a window with edges on the sample grid integrates
    to exactly ``base * duration + active * (b - a)``.  Gaussian noise of
    the given std is added and truncated at zero.
    """
    if sample_period <= 0:
        raise ValueError(f"sample_period must be > 0, got {sample_period}")
    a, b = active_window
    if not (0.0 <= a <= b <= recipe.duration):
        raise ValueError(
            f"active window [{a}, {b}] must lie within [0, {recipe.duration}]"
        )
    n = int(np.floor(recipe.duration / sample_period + 1e-9)) + 1
    times = np.arange(n) * sample_period
    if times[-1] < recipe.duration - 1e-12:
        times = np.append(times, recipe.duration)
    powers = np.full(times.shape, recipe.base_power, dtype=float)
    powers[(times >= a) & (times < b)] += recipe.active_power
    if recipe.noise_std > 0:
        rng = np.random.default_rng(recipe.seed)
        powers = powers + rng.normal(0.0, recipe.noise_std, size=times.shape)
        powers = np.maximum(powers, 0.0)
    return PowerTrace.from_arrays(times, powers, source_label=source_label)


class MeterSession(abc.ABC):
    """One start/stop measurement window of a meter.

    ``needs_settle`` tells the caller whether real time must pass after
    the measured activity ends so the trace covers its full duration.
    """

    needs_settle = True

    @abc.abstractmethod
    def start(self) -> None: ...

    def mark_activity(self, t_start: float, t_end: float) -> None:
        """Note when the measured activity ran, relative to session start.

        Real meters observe activity through the hardware and ignore this;
        synthetic meters use it to place their active window.
        """

    @abc.abstractmethod
    def stop(self) -> PowerTrace: ...


class Meter(abc.ABC):
    """A source of power traces for measured runs and idle baselines."""

    sample_period: float

    @abc.abstractmethod
    def session(self) -> MeterSession: ...

    @abc.abstractmethod
    def capture_idle(self, duration: float) -> PowerTrace: ...


class _CounterSession(MeterSession):
    needs_settle = True

    def __init__(self, meter: "CounterMeter"):
        self._meter = meter
        self._stop = threading.Event()
        self._ready = threading.Event()
        self._thread: Optional[threading.Thread] = None
        self._trace: Optional[PowerTrace] = None
        self._error: Optional[BaseException] = None

    def start(self) -> None:
        def run() -> None:
            try:
                self._trace = sample_counter_file(
                    self._meter.path,
                    self._meter.sample_period,
                    self._stop,
                    wrap_modulus=self._meter.wrap_modulus,
                    ready=self._ready,
                )
            except BaseException as exc:  # surfaced on stop()
                self._ready.set()
                self._error = exc

        self._thread = threading.Thread(target=run, name="encwatt-sampler", daemon=True)
        self._thread.start()
        # the measured activity must not begin before sampling has
        self._ready.wait(timeout=10.0)

    def stop(self) -> PowerTrace:
        if self._thread is None:
            raise AcquisitionError("sampler session stopped before start")
        self._stop.set()
        self._thread.join()
        if self._error is not None:
            raise self._error
        assert self._trace is not None
        return self._trace


class CounterMeter(Meter):
    """Live meter polling a cumulative microjoule counter file."""

    def __init__(
        self,
        path: str | Path,
        sample_period: float = DEFAULT_POLL_PERIOD,
        wrap_modulus: Optional[int] = None,
    ):
        self.path = Path(path)
        self.sample_period = sample_period
        self.wrap_modulus = wrap_modulus

    def session(self) -> MeterSession:
        return _CounterSession(self)

    def capture_idle(self, duration: float) -> PowerTrace:
        # Two extra periods so midpoint trimming cannot shrink the span
        # below the requested duration.
        return sample_counter_file(
            self.path,
            self.sample_period,
            max_duration=duration + 2 * self.sample_period,
            wrap_modulus=self.wrap_modulus,
            source_label=f"idle:{self.path}",
        )


class _SyntheticSession(MeterSession):
    needs_settle = False

    def __init__(self, meter: "SyntheticMeter", seed: int):
        self._meter = meter
        self._seed = seed
        self._t0: Optional[float] = None
        self._window: Optional[tuple[float, float]] = None

    def start(self) -> None:
        self._t0 = time.perf_counter()

    def mark_activity(self, t_start: float, t_end: float) -> None:
        self._window = (t_start, t_end)

    def stop(self) -> PowerTrace:
        if self._t0 is None:
            raise AcquisitionError("synthetic session stopped before start")
        elapsed = time.perf_counter() - self._t0
        window = self._window if self._window is not None else (0.0, elapsed)
        margin = 2 * self._meter.sample_period
        duration = max(elapsed, window[1]) + margin
        recipe = replace(self._meter.recipe, duration=duration, seed=self._seed)
        return generate_synthetic_trace(
            recipe,
            window,
            sample_period=self._meter.sample_period,
            source_label="synthetic-meter",
        )


class SyntheticMeter(Meter):
    """Meter test double generating traces from a recipe.

    Each session and idle capture draws a fresh seed derived from the
    recipe seed so repeated measurements see independent noise; with
    ``noise_std=0`` traces are exactly reproducible.
    """

    def __init__(self, recipe: SyntheticRecipe, sample_period: float = DEFAULT_POLL_PERIOD):
        self.recipe = recipe
        self.sample_period = sample_period
        self._uses = 0

    def _next_seed(self) -> int:
        self._uses += 1
        return self.recipe.seed + self._uses

    def session(self) -> MeterSession:
        return _SyntheticSession(self, seed=self._next_seed())

    def capture_idle(self, duration: float) -> PowerTrace:
        recipe = replace(
            self.recipe,
            duration=duration + 2 * self.sample_period,
            seed=self._next_seed(),
        )
        return generate_synthetic_trace(
            recipe,
            (0.0, 0.0),  # empty active window: base power only
            sample_period=self.sample_period,
            source_label="synthetic-idle",
        )


class _ReplaySession(MeterSession):
    needs_settle = False

    def __init__(self, trace: PowerTrace):
        self._trace = trace

    def start(self) -> None:
        pass

    def stop(self) -> PowerTrace:
        return self._trace


class CsvReplayMeter(Meter):
    """Replays a fixed trace file; useful for dry runs and diagnostics."""

    def __init__(self, path: str | Path, sample_period: float = DEFAULT_POLL_PERIOD):
        self.path = Path(path)
        self.sample_period = sample_period
        self._trace = parse_trace_csv(self.path)

    def session(self) -> MeterSession:
        return _ReplaySession(self._trace)

    def capture_idle(self, duration: float) -> PowerTrace:
        if self._trace.duration < duration:
            raise TraceWindowError(
                f"replay trace {self.path} spans {self._trace.duration:.6g} s, "
                f"shorter than the requested {duration:.6g} s idle window"
            )
        return self._trace


def _parse_inline_recipe(text: str) -> tuple[SyntheticRecipe, Optional[float]]:
    """Parse ``key=value,key=value`` synthetic recipe shorthand."""
    kwargs: dict[str, float] = {}
    period: Optional[float] = None
    aliases = {"base": "base_power", "active": "active_power", "noise": "noise_std"}
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        if "=" not in item:
            raise ValueError(f"bad recipe item {item!r}; expected key=value")
        key, value = item.split("=", 1)
        key = aliases.get(key.strip(), key.strip())
        if key == "period":
            period = float(value)
            continue
        if key not in ("base_power", "active_power", "noise_std", "duration", "seed"):
            raise ValueError(f"unknown recipe key {key!r}")
        kwargs[key] = int(value) if key == "seed" else float(value)
    return SyntheticRecipe(**kwargs), period  # type: ignore[arg-type]


def load_recipe(path_or_inline: str) -> tuple[SyntheticRecipe, Optional[float]]:
    """Load a synthetic recipe from a JSON file or inline shorthand."""
    candidate = Path(path_or_inline)
    if candidate.suffix == ".json" or candidate.is_file():
        data = json.loads(candidate.read_text(encoding="utf-8"))
        period = data.pop("period", None)
        return SyntheticRecipe(**data), period
    return _parse_inline_recipe(path_or_inline)


def parse_meter_spec(text: str, sample_period: float = DEFAULT_POLL_PERIOD) -> TraceSourceSpec:
    """Parse a CLI meter spec: ``csv:<path> | counter:<path> | synth:<recipe>``."""
    if ":" not in text:
        raise ValueError(f"meter spec {text!r} must look like kind:target")
    kind, target = text.split(":", 1)
    kinds = {"csv": "csv_file", "counter": "counter_file", "synth": "synthetic"}
    if kind not in kinds:
        raise ValueError(f"unknown meter kind {kind!r}; expected csv, counter, or synth")
    return TraceSourceSpec(kind=kinds[kind], path_or_recipe=target, sample_period=sample_period)


def make_meter(spec: TraceSourceSpec) -> Meter:
    """Build the meter implementation for a trace source spec."""
    if spec.kind == "csv_file":
        return CsvReplayMeter(spec.path_or_recipe, sample_period=spec.sample_period)
    if spec.kind == "counter_file":
        return CounterMeter(spec.path_or_recipe, sample_period=spec.sample_period)
    recipe, period = load_recipe(spec.path_or_recipe)
    return SyntheticMeter(recipe, sample_period=period if period is not None else spec.sample_period)
