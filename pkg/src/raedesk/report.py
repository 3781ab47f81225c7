"""Experiment reports: ordered metric records, bit-stable JSONL output,
human-readable summaries, and rendered metric figures."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


@dataclass
class MetricRecord:
    step: int
    epoch: int
    name: str
    value: float


@dataclass
class ExperimentReport:
    """Ordered metric records tied to one (config hash, seed) run."""

    config_hash: str
    seed: int
    records: list[MetricRecord] = field(default_factory=list)
    phase_seconds: dict[str, float] = field(default_factory=dict)
    _last_step: dict[str, int] = field(default_factory=dict, repr=False)

    def log(self, step: int, name: str, value: float, epoch: int = 0):
        prev = self._last_step.get(name, -1)
        if step < prev:
            raise ValueError(f"step went backwards for {name!r}: {step} < {prev}")
        self._last_step[name] = step
        self.records.append(MetricRecord(step, epoch, name, float(value)))

    def values(self, name: str) -> list[tuple[int, float]]:
        return [(r.step, r.value) for r in self.records if r.name == name]

    def last(self, name: str) -> float:
        vals = self.values(name)
        if not vals:
            raise KeyError(name)
        return vals[-1][1]

    # ------------------------------------------------------------------

    def write_jsonl(self, path):
        """Byte-stable metrics.jsonl; timing goes to a sibling file."""
        path = Path(path)
        with open(path, "w") as f:
            for r in self.records:
                f.write(json.dumps(
                    {"step": r.step, "epoch": r.epoch, "name": r.name,
                     "value": r.value, "config_hash": self.config_hash,
                     "seed": self.seed},
                    sort_keys=True) + "\n")
        with open(path.with_name(path.stem + "_timing.json"), "w") as f:
            json.dump({"phase_seconds": self.phase_seconds,
                       "written_at": time.time()}, f, indent=2)

    def write_summary(self, path, lines: list[str]):
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")

    def render_figure(self, path, names: list[str], title: str = "",
                      logy: bool = False):
        """Line plot of the named metric series, saved as PNG."""
        fig, ax = plt.subplots(figsize=(6, 4))
        for name in names:
            vals = self.values(name)
            if not vals:
                continue
            steps, ys = zip(*vals)
            ax.plot(steps, ys, label=name, marker="." if len(ys) < 40 else None)
        if logy:
            ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.legend(fontsize=8)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)


class PhaseTimer:
    """Context manager recording wall-clock per phase into a report."""

    def __init__(self, report: ExperimentReport, name: str):
        self.report = report
        self.name = name

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.report.phase_seconds[self.name] = (
            self.report.phase_seconds.get(self.name, 0.0)
            + time.perf_counter() - self.t0)
        return False
