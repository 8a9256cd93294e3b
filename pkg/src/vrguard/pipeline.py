"""Closed-loop stream simulator: replay a trace frame by frame, classify a
sliding window, optionally inject adversarial windows on a schedule, gate
mitigation on the detector verdict, and log a deterministic event stream.

Mitigation policy: none -> no mitigation, low -> foveated depth-of-field
blur, medium -> dynamic Gaussian blur, high -> dynamic FOV reduction.  A
frame whose verdict is "attack" raises an alert, its sample is discarded,
and the previous frame's action is held (the renderer receives no new
command).

Event logs are JSON-lines with stable field order and never contain wall
-clock measurements, so identical inputs and seeds give byte-identical
logs; per-frame inference latency lives only in the in-memory report and
its separate timing summary.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace as dc_replace
from enum import Enum

import numpy as np

from .attacks import AttackConfig, craft_cw_batch, craft_fgsm_batch, craft_pgd_batch
from .data import LABELS, SensorTrace
from .errors import ConfigError, ContractViolation
from .explain import BackgroundSet, signature_matrix
from .numerics.rng import _mix64_int


class MitigationAction(Enum):
    NO_MITIGATION = "no_mitigation"
    FOVEATED_DOF_BLUR = "foveated_dof_blur"
    DYNAMIC_GAUSSIAN_BLUR = "dynamic_gaussian_blur"
    DYNAMIC_FOV_REDUCTION = "dynamic_fov_reduction"


_LEVEL_ACTION = {
    0: MitigationAction.NO_MITIGATION,
    1: MitigationAction.FOVEATED_DOF_BLUR,
    2: MitigationAction.DYNAMIC_GAUSSIAN_BLUR,
    3: MitigationAction.DYNAMIC_FOV_REDUCTION,
}

VERDICTS = ("normal", "attack", "detector-disabled")


def mitigation_for(level, verdict: str, previous: MitigationAction = MitigationAction.NO_MITIGATION):
    """Map (severity, verdict) to (action, alert).

    An attack verdict discards the sample: the previous action is held and
    the alert flag raised.  Normal and detector-disabled verdicts map the
    severity level straight to its mitigation technique.
    """
    if isinstance(level, str):
        if level not in LABELS:
            raise ContractViolation(f"unknown severity level {level!r}")
        level = LABELS.index(level)
    if level not in _LEVEL_ACTION:
        raise ContractViolation(f"unknown severity level {level!r}")
    if verdict not in VERDICTS:
        raise ContractViolation(f"unknown verdict {verdict!r}")
    if verdict == "attack":
        return previous, True
    return _LEVEL_ACTION[level], False


@dataclass
class InjectionSchedule:
    attack: AttackConfig
    start_seconds: float = 60.0
    duration_seconds: float = 120.0

    def validate(self):
        if self.start_seconds < 0 or self.duration_seconds < 0:
            raise ConfigError("schedule start and duration must be >= 0")
        self.attack.validate()

    def frame_range(self, sample_rate: float):
        start = int(round(self.start_seconds * sample_rate))
        end = int(round((self.start_seconds + self.duration_seconds) * sample_rate))
        return start, end


@dataclass
class PipelineEvent:
    frame: int
    time_seconds: float
    true_label: int
    predicted_label: int
    probabilities: list
    attack_active: bool
    verdict: str | None          # None when the detector is disabled
    action: str
    alert: bool
    latency_seconds: float       # measurement; excluded from the canonical log

    def to_log_json(self) -> str:
        return json.dumps({
            "frame": self.frame,
            "t": round(self.time_seconds, 6),
            "true": self.true_label,
            "pred": self.predicted_label,
            "probs": [round(float(p), 6) for p in self.probabilities],
            "attack_active": self.attack_active,
            "verdict": self.verdict,
            "action": self.action,
            "alert": self.alert,
        })


@dataclass
class RunReport:
    mode: str
    events: list
    truncated_schedule: bool = False

    def summary(self) -> dict:
        """Pure aggregation over events (latency aside, recomputable at will)."""
        ev = self.events
        n = len(ev)
        correct = sum(1 for e in ev if e.predicted_label == e.true_label)
        attack_frames = [e for e in ev if e.attack_active]
        flagged = sum(1 for e in attack_frames if e.alert)
        dwell = {a.value: 0 for a in MitigationAction}
        for e in ev:
            dwell[e.action] += 1
        return {
            "mode": self.mode,
            "frames": n,
            "prediction_accuracy": correct / n if n else 0.0,
            "attack_frames": len(attack_frames),
            "attack_frames_flagged_fraction": flagged / len(attack_frames) if attack_frames else 0.0,
            "alerts": sum(1 for e in ev if e.alert),
            "action_dwell_frames": dwell,
            "truncated_schedule": self.truncated_schedule,
        }

    def latency_stats(self) -> dict:
        lat = np.array([e.latency_seconds for e in self.events])
        if len(lat) == 0:
            return {"mean_seconds": 0.0, "p95_seconds": 0.0}
        return {"mean_seconds": float(lat.mean()),
                "p95_seconds": float(np.percentile(lat, 95))}


_CRAFTERS = {"fgsm": craft_fgsm_batch, "pgd": craft_pgd_batch, "cw": craft_cw_batch}


def run_stream(trace: SensorTrace, model, detector=None, background: BackgroundSet = None,
               schedule: InjectionSchedule = None, seed: int = 0,
               decision_interval: int = 1, mode: str = None) -> RunReport:
    """Replay `trace` through classify -> sign -> detect -> gate, frame by frame.

    Decisions happen every `decision_interval` frames once the first full
    window is available.  When a schedule is active at a frame, the window
    the classifier sees is replaced by an adversarially crafted version
    (the stored trace and its ground-truth labels stay clean).
    """
    timestep = model.spec.timestep
    if trace.n_frames < timestep:
        raise ContractViolation(f"trace has {trace.n_frames} frames; needs >= {timestep}")
    if trace.n_features != model.spec.n_features:
        raise ContractViolation("trace feature count does not match the model")
    if model.stats_id is not None and trace.norm_stats_id != model.stats_id:
        raise ContractViolation(
            "trace was not normalized with the model's normalization stats")
    if decision_interval < 1:
        raise ConfigError("decision_interval must be >= 1")
    if detector is not None and background is None:
        raise ContractViolation("a detector needs a background set for signatures")

    truncated = False
    attack_range = None
    if schedule is not None:
        schedule.validate()
        start_f, end_f = schedule.frame_range(trace.sample_rate)
        if start_f >= trace.n_frames:
            truncated = True
        elif end_f > trace.n_frames:
            truncated = True
            end_f = trace.n_frames
        if start_f < trace.n_frames:
            attack_range = (start_f, end_f)

    if mode is None:
        mode = "baseline" if schedule is None else ("defended" if detector else "attacked")

    events = []
    prev_action = MitigationAction.NO_MITIGATION
    for t in range(timestep - 1, trace.n_frames, decision_interval):
        window_values = trace.frames[t - timestep + 1:t + 1]
        active = attack_range is not None and attack_range[0] <= t < attack_range[1]
        x_used = window_values
        if active:
            clean_pred = int(np.argmax(model.predict_batch(window_values[None])[0]))
            cfg = dc_replace(schedule.attack, seed=_mix64_int(seed ^ _mix64_int(t)))
            crafted = _CRAFTERS[cfg.kind](model, window_values[None], [clean_pred], cfg)[0]
            x_used = crafted.values

        tic = time.perf_counter()
        probs = model.predict_batch(x_used[None])[0]
        latency = time.perf_counter() - tic
        predicted = int(np.argmax(probs))

        if detector is not None:
            sig_vec = signature_matrix(model, x_used[None], background)[0]
            score = float(detector.score_batch(sig_vec[None])[0])
            verdict = "attack" if score > detector.spec.threshold else "normal"
        else:
            verdict = None

        action, alert = mitigation_for(predicted, verdict or "detector-disabled", prev_action)
        prev_action = action
        events.append(PipelineEvent(frame=t, time_seconds=float(trace.timestamps[t]),
                                    true_label=int(trace.labels[t]), predicted_label=predicted,
                                    probabilities=[float(p) for p in probs],
                                    attack_active=bool(active), verdict=verdict,
                                    action=action.value, alert=alert,
                                    latency_seconds=latency))
    return RunReport(mode=mode, events=events, truncated_schedule=truncated)


# event log I/O -----------------------------------------------------------------

def write_event_log(report: RunReport, path, config_hash: str = "", seed: int = 0,
                    tool_version: str = "") -> None:
    """JSONL: one header line with provenance, then one event per line."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"header": True, "mode": report.mode,
                             "config_hash": config_hash, "seed": seed,
                             "tool_version": tool_version,
                             "truncated_schedule": report.truncated_schedule}) + "\n")
        for e in report.events:
            fh.write(e.to_log_json() + "\n")


def read_event_log(path):
    with open(path, "r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        events = [json.loads(line) for line in fh if line.strip()]
    return header, events


def compare_runs(baseline: RunReport, others) -> list:
    """Frame-level agreement of each run against the baseline.

    Returns one row per run: action agreement, prediction agreement, and
    alert count.  Runs must cover identical frame indices.
    """
    base_frames = [e.frame for e in baseline.events]
    rows = []
    for run in others:
        frames = [e.frame for e in run.events]
        if frames != base_frames:
            raise ContractViolation(
                f"run {run.mode!r} covers different frames than the baseline")
        n = len(frames)
        action_agree = sum(1 for a, b in zip(baseline.events, run.events)
                           if a.action == b.action)
        pred_agree = sum(1 for a, b in zip(baseline.events, run.events)
                         if a.predicted_label == b.predicted_label)
        rows.append({"mode": run.mode,
                     "frames": n,
                     "action_agreement": action_agree / n if n else 0.0,
                     "prediction_agreement": pred_agree / n if n else 0.0,
                     "alerts": sum(1 for e in run.events if e.alert)})
    return rows


def comparison_csv(rows, path, config_hash: str = "", seed: int = 0,
                   tool_version: str = "") -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# vrguard {tool_version} config={config_hash} seed={seed}\n")
        fh.write("mode,frames,action_agreement,prediction_agreement,alerts\n")
        for r in rows:
            fh.write(f"{r['mode']},{r['frames']},{r['action_agreement']:.6f},"
                     f"{r['prediction_agreement']:.6f},{r['alerts']}\n")
