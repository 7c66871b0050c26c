"""Majority-vote treat dispensing and PCA9685 servo register frames."""

from __future__ import annotations

import csv
import enum
import io
import math
from collections import Counter, deque
from dataclasses import dataclass, field

from .errors import ConfigError, ControllerError, TimestampOrderError


class Behavior(enum.IntEnum):
    LYING = 0
    SITTING = 1
    STANDING = 2

    @classmethod
    def parse(cls, text) -> "Behavior":
        if isinstance(text, (int, Behavior)):
            return cls(int(text))
        try:
            return cls[str(text).strip().upper()]
        except KeyError:
            raise ControllerError(f"unknown behavior {text!r}") from None


class Reason(enum.Enum):
    BUFFER_WARMUP = "BufferWarmup"
    NO_MAJORITY = "NoMajority"
    NOT_REWARD_LABEL = "NotRewardLabel"
    LOW_CONFIDENCE = "LowConfidence"
    REFRACTORY = "Refractory"


@dataclass(frozen=True)
class InferenceEvent:
    timestamp_ms: int
    label: Behavior
    confidence: float = 1.0


@dataclass(frozen=True)
class ControllerConfig:
    window: int = 15
    majority: int = 12
    reward_labels: frozenset = frozenset({Behavior.SITTING, Behavior.LYING})
    refractory_ms: int = 10_000
    min_confidence: float = 0.0
    dwell_ms: int = 400

    def __post_init__(self):
        if self.window < 1:
            raise ConfigError(f"window must be positive, got {self.window}")
        if not self.window / 2 < self.majority <= self.window:
            raise ConfigError(
                f"majority threshold must satisfy N/2 < k <= N, got k={self.majority}, N={self.window}"
            )
        if self.refractory_ms < 0 or self.dwell_ms < 0:
            raise ConfigError("refractory and dwell times must be non-negative")
        if not 0.0 <= self.min_confidence <= 1.0:
            raise ConfigError(f"min_confidence must be in [0, 1], got {self.min_confidence}")
        object.__setattr__(self, "reward_labels",
                           frozenset(Behavior.parse(x) for x in self.reward_labels))


@dataclass(frozen=True)
class DispenseDecision:
    timestamp_ms: int
    label: Behavior | None = None  # set only when dispensing
    reason: Reason | None = None  # set only when not dispensing

    @property
    def dispense(self) -> bool:
        return self.label is not None

    def __str__(self):
        if self.dispense:
            return f"Dispense({self.label.name.lower()})"
        return f"NoAction({self.reason.value})"


class DispenseController:
    """k-of-N majority window with refractory protection.

    Only one caller should push events. Every event takes a buffer slot;
    events under ``min_confidence`` occupy their slot but do not count toward
    a majority. The buffer is cleared after each dispense.
    """

    def __init__(self, config: ControllerConfig = ControllerConfig()):
        self.config = config
        self.buffer: deque[InferenceEvent] = deque(maxlen=config.window)
        self.last_timestamp: int | None = None
        self.last_dispense: int | None = None
        self.event_log: list[tuple[int, Behavior]] = []

    def push_inference(self, event: InferenceEvent) -> DispenseDecision:
        cfg = self.config
        now = event.timestamp_ms
        if self.last_timestamp is not None and now < self.last_timestamp:
            raise TimestampOrderError(
                f"timestamp {now} ms precedes previous event at {self.last_timestamp} ms"
            )
        self.last_timestamp = now
        self.buffer.append(event)
        if len(self.buffer) < cfg.window:
            return DispenseDecision(now, reason=Reason.BUFFER_WARMUP)
        label, count = Counter(e.label for e in self.buffer).most_common(1)[0]
        if count < cfg.majority:
            return DispenseDecision(now, reason=Reason.NO_MAJORITY)
        if label not in cfg.reward_labels:
            return DispenseDecision(now, reason=Reason.NOT_REWARD_LABEL)
        confident = sum(1 for e in self.buffer if e.label == label and e.confidence >= cfg.min_confidence)
        if confident < cfg.majority:
            return DispenseDecision(now, reason=Reason.LOW_CONFIDENCE)
        if self.last_dispense is not None and now - self.last_dispense < cfg.refractory_ms:
            return DispenseDecision(now, reason=Reason.REFRACTORY)
        self.last_dispense = now
        self.buffer.clear()
        return DispenseDecision(now, label=label)

    def run_dispense_cycle(self, now_ms: int, label: Behavior | None = None) -> list["ServoCommand"]:
        """Open to 60 degrees, hold ``dwell_ms``, close to 0 degrees."""
        self.event_log.append((now_ms, label))
        return dispense_cycle(self.config.dwell_ms)


# -- PCA9685 -------------------------------------------------------------------

OSC_HZ = 25_000_000
PWM_STEPS = 4096
SERVO_HZ = 50
DEFAULT_ADDRESS = 0x40

MODE1 = 0x00
PRESCALE = 0xFE
LED0_ON_L, LED0_ON_H, LED0_OFF_L, LED0_OFF_H = 0x06, 0x07, 0x08, 0x09
MODE1_SLEEP = 0x10
MODE1_AI = 0x20
MODE1_RESTART = 0x80

OPEN_ANGLE = 60.0
CLOSED_ANGLE = 0.0


def prescale_for(freq_hz: float) -> int:
    return round(OSC_HZ / (PWM_STEPS * freq_hz)) - 1


def angle_to_counts(angle_deg: float) -> int:
    """1.0 ms pulse at 0 degrees to 2.0 ms at 180, out of a 20 ms period."""
    if not 0.0 <= angle_deg <= 180.0 or math.isnan(angle_deg):
        raise ControllerError(f"servo angle must be within [0, 180] degrees, got {angle_deg}")
    pulse_ms = 1.0 + angle_deg / 180.0
    return math.floor(pulse_ms / (1000.0 / SERVO_HZ) * PWM_STEPS + 0.5)


@dataclass(frozen=True)
class ServoCommand:
    angle_deg: float
    writes: tuple[tuple[int, int], ...]
    address: int = DEFAULT_ADDRESS
    dwell_ms: int = 0  # hold time after these writes

    def bus_lines(self) -> list[str]:
        return [f"{self.address},{reg},{value}" for reg, value in self.writes]


def servo_frames(angle_deg: float, address: int = DEFAULT_ADDRESS, channel: int = 0) -> ServoCommand:
    counts = angle_to_counts(angle_deg)
    base = LED0_ON_L + 4 * channel
    writes = (
        (MODE1, MODE1_SLEEP),
        (PRESCALE, prescale_for(SERVO_HZ)),
        (MODE1, 0x00),
        (MODE1, MODE1_RESTART | MODE1_AI),
        (base, 0),
        (base + 1, 0),
        (base + 2, counts & 0xFF),
        (base + 3, counts >> 8),
    )
    return ServoCommand(float(angle_deg), writes, address)


def dispense_cycle(dwell_ms: int = 400) -> list[ServoCommand]:
    opened = servo_frames(OPEN_ANGLE)
    opened = ServoCommand(opened.angle_deg, opened.writes, opened.address, dwell_ms)
    return [opened, servo_frames(CLOSED_ANGLE)]


# -- simulation ---------------------------------------------------------------

@dataclass
class SimulationResult:
    decisions: list[DispenseDecision] = field(default_factory=list)
    commands: list[ServoCommand] = field(default_factory=list)

    @property
    def dispense_count(self) -> int:
        return sum(d.dispense for d in self.decisions)

    def decisions_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["timestamp_ms", "decision"])
        for d in self.decisions:
            w.writerow([d.timestamp_ms, str(d)])
        return buf.getvalue()

    def bus_log(self) -> str:
        return "".join(line + "\n" for c in self.commands for line in c.bus_lines())


def read_events_csv(text: str) -> list[InferenceEvent]:
    """Parse ``timestamp_ms,label,confidence`` rows (header optional)."""
    events = []
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if lineno == 1 and row[0].strip().lower() == "timestamp_ms":
            continue
        if len(row) not in (2, 3):
            raise ControllerError(f"line {lineno}: expected timestamp_ms,label[,confidence]")
        try:
            ts = int(row[0])
            conf = float(row[2]) if len(row) == 3 else 1.0
        except ValueError:
            raise ControllerError(f"line {lineno}: malformed number in {row!r}") from None
        try:
            label = Behavior.parse(row[1])
        except ControllerError as exc:
            raise ControllerError(f"line {lineno}: {exc}") from None
        events.append(InferenceEvent(ts, label, conf))
    return events


def simulate(events, config: ControllerConfig = ControllerConfig()) -> SimulationResult:
    ctl = DispenseController(config)
    result = SimulationResult()
    for event in events:
        decision = ctl.push_inference(event)
        result.decisions.append(decision)
        if decision.dispense:
            result.commands.extend(ctl.run_dispense_cycle(event.timestamp_ms, decision.label))
    return result
