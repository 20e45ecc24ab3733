"""Deploy a monitor next to the classifier over a frame stream.

The safety mode follows the monitor's per-frame level verdicts through an
asymmetric debounce: promotions apply immediately, demotions only once at
least q of the last n verdicts sit at or below the candidate mode's level.
Any provider failure forces the least-safe mode for that frame (fail-safe).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .imageio import LabeledDataset
from .perturb import stack_array
from .rng import Xoshiro256


@dataclass(frozen=True)
class SafetyModeConfig:
    level_to_mode: dict[int, str] = field(
        default_factory=lambda: {3: "normal", 2: "limited", 1: "stop"}
    )
    window: int = 3
    quorum: int = 3

    def __post_init__(self):
        m = len(self.level_to_mode)
        if sorted(self.level_to_mode) != list(range(1, m + 1)):
            raise ValueError("level_to_mode must map every level 1..m")
        if self.window < 1 or not 1 <= self.quorum <= self.window:
            raise ValueError("need 1 <= quorum <= window")

    @property
    def m(self) -> int:
        return len(self.level_to_mode)

    def mode_name(self, level: int) -> str:
        return self.level_to_mode[level]


@dataclass(frozen=True)
class RuntimeState:
    mode_level: int
    history: tuple[int, ...] = ()  # last `window` verdict levels, oldest first

    @classmethod
    def initial(cls, config: SafetyModeConfig) -> "RuntimeState":
        return cls(mode_level=config.m)


@dataclass(frozen=True)
class MonitorVerdict:
    frame_index: int
    level: int
    level_probs: tuple[float, ...]
    component_prediction: int
    mode_after: str
    error: str | None = None


def _advance(config: SafetyModeConfig, state: RuntimeState, level: int) -> RuntimeState:
    window = (state.history + (level,))[-config.window:]
    mode = state.mode_level
    if level > mode:
        mode = level  # promotion is immediate
    else:
        for candidate in range(1, mode):  # most severe justified demotion wins
            if sum(1 for v in window if v <= candidate) >= config.quorum:
                mode = candidate
                break
    return RuntimeState(mode_level=mode, history=window)


def step(component_provider, monitor_provider, config: SafetyModeConfig,
         state: RuntimeState, frame: np.ndarray,
         frame_index: int = 0) -> tuple[MonitorVerdict, RuntimeState]:
    """Evaluate one frame; pure in (state, frame) for fixed providers."""
    try:
        comp_probs = component_provider.predict_proba(frame[None])
        level_probs = monitor_provider.predict_proba(frame[None])[0]
        level = int(level_probs.argmax()) + 1
        comp_pred = int(comp_probs[0].argmax())
    except Exception as exc:
        probs = tuple(1.0 if i == 0 else 0.0 for i in range(config.m))
        new_state = RuntimeState(
            mode_level=1, history=(state.history + (1,))[-config.window:]
        )
        verdict = MonitorVerdict(
            frame_index=frame_index, level=1, level_probs=probs,
            component_prediction=-1, mode_after=config.mode_name(1),
            error=f"provider failure: {exc}",
        )
        return verdict, new_state
    new_state = _advance(config, state, level)
    verdict = MonitorVerdict(
        frame_index=frame_index, level=level,
        level_probs=tuple(float(p) for p in level_probs),
        component_prediction=comp_pred,
        mode_after=config.mode_name(new_state.mode_level),
    )
    return verdict, new_state


# ---------------------------------------------------------------------------
# Drift scenarios

@dataclass(frozen=True)
class Segment:
    start: int  # inclusive
    stop: int  # exclusive
    assignment: dict[str, float]
    interpolate: bool = False


@dataclass(frozen=True)
class DriftScenario:
    seed: int
    frames: int
    segments: tuple[Segment, ...]

    def __post_init__(self):
        prev = 0
        for seg in self.segments:
            if seg.start != prev or seg.stop <= seg.start:
                raise ValueError("segments must be contiguous and non-empty")
            if any(not 0.0 <= e <= 1.0 for e in seg.assignment.values()):
                raise ValueError("epsilon values must lie in [0, 1]")
            prev = seg.stop
        if prev != self.frames:
            raise ValueError(f"segments cover {prev} frames, scenario declares {self.frames}")

    def assignment_at(self, frame: int) -> dict[str, float]:
        prev_target: dict[str, float] = {}
        for seg in self.segments:
            if frame < seg.stop:
                if not seg.interpolate:
                    return dict(seg.assignment)
                span = max(seg.stop - 1 - seg.start, 1)
                t = (frame - seg.start) / span
                out = {}
                for factor, target in seg.assignment.items():
                    start_val = prev_target.get(factor, 0.0)
                    out[factor] = start_val + (target - start_val) * t
                return out
            prev_target = dict(seg.assignment)
        raise IndexError(f"frame {frame} beyond scenario end {self.frames}")

    @classmethod
    def from_dict(cls, d: dict) -> "DriftScenario":
        segs = tuple(
            Segment(int(s["from"]), int(s["to"]), dict(s["assignment"]),
                    bool(s.get("interpolate", False)))
            for s in d.get("segments", [])
        )
        return cls(seed=int(d["seed"]), frames=int(d["frames"]), segments=segs)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "frames": self.frames,
            "segments": [
                {"from": s.start, "to": s.stop, "assignment": dict(s.assignment),
                 "interpolate": s.interpolate}
                for s in self.segments
            ],
        }


@dataclass
class Trace:
    verdicts: list[MonitorVerdict]
    transitions: list[tuple[int, str, str]]  # (frame, from_mode, to_mode)


def run_stream(scenario: DriftScenario, source: LabeledDataset, factors,
               component_provider, monitor_provider,
               config: SafetyModeConfig) -> Trace:
    """Sample frames from the source, apply the scheduled degradation, and
    drive the mode machine. Deterministic per scenario seed."""
    kinds = {f.name: f for f in factors}
    rng = Xoshiro256(scenario.seed)
    state = RuntimeState.initial(config)
    verdicts: list[MonitorVerdict] = []
    transitions: list[tuple[int, str, str]] = []
    for frame_idx in range(scenario.frames):
        src = source.pixels[rng.randbelow(len(source))]
        assignment = scenario.assignment_at(frame_idx)
        stack = [(kinds[name], eps) for name, eps in assignment.items() if name in kinds]
        unknown = [n for n in assignment if n not in kinds]
        if unknown:
            raise ValueError(f"scenario names unknown factors: {unknown}")
        frame = stack_array(src[None], stack)[0]
        before = config.mode_name(state.mode_level)
        verdict, state = step(component_provider, monitor_provider, config,
                              state, frame, frame_index=frame_idx)
        if verdict.mode_after != before:
            transitions.append((frame_idx, before, verdict.mode_after))
        verdicts.append(verdict)
    return Trace(verdicts=verdicts, transitions=transitions)


def write_trace_jsonl(trace: Trace, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for v in trace.verdicts:
            f.write(json.dumps({
                "frame": v.frame_index,
                "level": v.level,
                "level_probs": list(v.level_probs),
                "component_prediction": v.component_prediction,
                "mode": v.mode_after,
                "error": v.error,
            }, sort_keys=True) + "\n")


def write_trace_csv(trace: Trace, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("frame,level,mode\n")
        for v in trace.verdicts:
            f.write(f"{v.frame_index},{v.level},{v.mode_after}\n")


def write_transitions_json(trace: Trace, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(
            [{"frame": fr, "from": a, "to": b} for fr, a, b in trace.transitions],
            f, indent=2, sort_keys=True,
        )
        f.write("\n")
