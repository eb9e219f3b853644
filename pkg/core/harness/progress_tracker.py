#!/usr/bin/env python3
"""
Progress Tracker Module - Multi-stage progress display for batch runs
Stages (calibration, trial simulation, reporting) are shown with a progress
bar, elapsed time and ETA. A disabled tracker keeps its state but prints nothing.
"""

import sys
import time
from typing import List, Optional, TextIO

from colorama import Fore, Style


class ProgressStage:
    """Individual progress stage with status and timing"""

    def __init__(self, name: str, description: str, total: int = 0):
        self.name = name
        self.description = description
        self.total = total
        self.done = 0
        self.start_time: Optional[float] = None
        self.end_time: Optional[float] = None
        self.status = "pending"  # pending, active, completed, failed
        self.message = ""

    @property
    def progress(self) -> float:
        if self.status == "completed":
            return 1.0
        return min(1.0, self.done / self.total) if self.total else 0.0

    def start(self):
        self.start_time = time.monotonic()
        self.status = "active"

    def complete(self, message: str = ""):
        self.end_time = time.monotonic()
        self.status = "completed"
        if message:
            self.message = message

    def fail(self, error_message: str = ""):
        self.end_time = time.monotonic()
        self.status = "failed"
        if error_message:
            self.message = error_message

    def advance(self, n: int = 1, message: str = ""):
        self.done += n
        if message:
            self.message = message

    def get_elapsed_time(self) -> Optional[float]:
        if self.start_time is None:
            return None
        return (self.end_time or time.monotonic()) - self.start_time

    def get_eta(self) -> Optional[float]:
        """Seconds left, extrapolated from the current rate"""
        elapsed = self.get_elapsed_time()
        if self.status != "active" or not elapsed or self.progress <= 0:
            return None
        return elapsed / self.progress - elapsed


class AdvancedProgressTracker:
    """Stage-based progress display"""

    def __init__(self, title: str = "Batch Simulation", enabled: bool = True, show_eta: bool = True,
                 stream: TextIO = sys.stdout):
        self.title = title
        self.enabled = enabled
        self.show_eta = show_eta
        self.stream = stream
        self.stages: List[ProgressStage] = []
        self.current_stage_index = -1
        self.start_time: Optional[float] = None
        self.overall_status = "not_started"  # not_started, running, completed, failed

    def add_stage(self, name: str, description: str, total: int = 0) -> ProgressStage:
        stage = ProgressStage(name, description, total)
        self.stages.append(stage)
        return stage

    def start(self):
        self.start_time = time.monotonic()
        self.overall_status = "running"
        self._print(f"\n{Fore.CYAN}{'=' * 70}\n{self.title}\n{'=' * 70}{Style.RESET_ALL}")

    def get_current_stage(self) -> Optional[ProgressStage]:
        if 0 <= self.current_stage_index < len(self.stages):
            return self.stages[self.current_stage_index]
        return None

    def next_stage(self, message: str = "") -> Optional[ProgressStage]:
        """Complete the active stage and start the next one"""
        current = self.get_current_stage()
        if current is not None and current.status == "active":
            current.complete(message)
            self._update_display(final=True)
        self.current_stage_index += 1
        stage = self.get_current_stage()
        if stage is not None:
            stage.start()
            self._update_display()
        return stage

    def advance(self, n: int = 1, message: str = ""):
        stage = self.get_current_stage()
        if stage is not None:
            stage.advance(n, message)
            self._update_display()

    def fail_current_stage(self, error_message: str = ""):
        stage = self.get_current_stage()
        if stage is not None:
            stage.fail(error_message)
            self.overall_status = "failed"
            self._update_display(final=True)

    def complete(self, message: str = "All stages completed"):
        current = self.get_current_stage()
        if current is not None and current.status == "active":
            current.complete()
            self._update_display(final=True)
        self.overall_status = "completed"
        elapsed = time.monotonic() - self.start_time if self.start_time else 0.0
        self._print(f"{Fore.GREEN}{message} in {self._format_duration(elapsed)}{Style.RESET_ALL}")

    def _print(self, text: str, end: str = "\n"):
        if self.enabled:
            print(text, end=end, file=self.stream, flush=True)

    def _update_display(self, final: bool = False):
        stage = self.get_current_stage()
        if stage is None or not self.enabled:
            return
        icon = {"completed": "done", "failed": "FAILED", "active": "..."}.get(stage.status, "")
        color = {"completed": Fore.GREEN, "failed": Fore.RED}.get(stage.status, Fore.YELLOW)
        count = f" {stage.done}/{stage.total}" if stage.total else ""
        eta = ""
        if self.show_eta and not final:
            remaining = stage.get_eta()
            if remaining:
                eta = f" | ETA: {self._format_duration(remaining)}"
        line = (f"\r{color}{stage.name:<12}{Style.RESET_ALL} {self._create_progress_bar(stage.progress)}"
                f"{count} {icon}{eta}")
        if stage.message and final:
            line += f" | {stage.message}"
        self._print(line.ljust(80), end="\n" if final else "")

    @staticmethod
    def _create_progress_bar(progress: float, width: int = 30) -> str:
        filled = int(progress * width)
        return "[" + "#" * filled + "-" * (width - filled) + "]"

    @staticmethod
    def _format_duration(seconds: float) -> str:
        if seconds < 60:
            return f"{seconds:.1f}s"
        if seconds < 3600:
            return f"{int(seconds // 60)}m {int(seconds % 60)}s"
        return f"{int(seconds // 3600)}h {int((seconds % 3600) // 60)}m"


def create_batch_tracker(n_trials: int, enabled: bool = True) -> AdvancedProgressTracker:
    """Tracker with the three stages of a batch run"""
    tracker = AdvancedProgressTracker(enabled=enabled)
    tracker.add_stage("calibrate", "Calibrating the toxicity threshold")
    tracker.add_stage("simulate", "Simulating and analysing trials", n_trials)
    tracker.add_stage("report", "Writing results")
    return tracker
