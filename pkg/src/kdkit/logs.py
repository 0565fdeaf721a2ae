"""Experiment logging: one tab-separated record line per event, with the fully
resolved config echoed at the top so the log file doubles as a rerunnable
record of the experiment.

Numeric fields use repr() of the float, the shortest string that round-trips,
so parsing a log reconstructs the loss sequence exactly.
"""

from __future__ import annotations

import datetime
import warnings
from dataclasses import dataclass, field

ECHO_BEGIN = "# ===== resolved-config-begin ====="
ECHO_END = "# ===== resolved-config-end ====="


@dataclass
class LogRecord:
    stage: int
    epoch: int
    step: int
    loss: float
    lr: float
    metrics: dict = field(default_factory=dict)
    timestamp: str = ""

    def line(self) -> str:
        ts = self.timestamp or datetime.datetime.now().isoformat(timespec="milliseconds")
        parts = [f"stage={self.stage}", f"epoch={self.epoch}", f"step={self.step}",
                 f"loss={float(self.loss)!r}", f"lr={float(self.lr)!r}"]
        for k in sorted(self.metrics):
            parts.append(f"{k}={float(self.metrics[k])!r}")
        return f"{ts}\t" + " ".join(parts)


class LogWriter:
    """Appends records to an optional file and optionally the console.

    Log I/O failures never abort a run; they degrade to warnings.
    """

    def __init__(self, path: str | None = None, console: bool = False):
        self.path = path
        self.console = console
        self._fh = None
        if path is not None:
            try:
                self._fh = open(path, "w", encoding="utf-8")
            except OSError as exc:
                warnings.warn(f"cannot open log file {path}: {exc}")
                self._fh = None

    def write_header(self, resolved_config_text: str) -> None:
        body = resolved_config_text.rstrip("\n")
        self._write_raw(f"{ECHO_BEGIN}\n{body}\n{ECHO_END}\n")

    def record(self, rec: LogRecord) -> None:
        self._write_raw(rec.line() + "\n")
        if self.console:
            print(rec.line(), flush=False)

    def text(self, line: str) -> None:
        self._write_raw(f"# {line}\n")
        if self.console:
            print(line)

    def _write_raw(self, chunk: str) -> None:
        if self._fh is None:
            return
        try:
            self._fh.write(chunk)
        except OSError as exc:
            warnings.warn(f"log write failed: {exc}")

    def flush(self) -> None:
        if self._fh is not None:
            try:
                self._fh.flush()
            except OSError as exc:
                warnings.warn(f"log flush failed: {exc}")

    def close(self) -> None:
        if self._fh is not None:
            try:
                self._fh.close()
            except OSError:
                pass
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def parse_log(text: str):
    """-> (resolved config text or None, list of LogRecord).

    Comment lines (outside the echo block) are skipped; record lines
    reconstruct every numeric field exactly.
    """
    lines = text.splitlines()
    config_lines = None
    records = []
    i = 0
    if lines and lines[0] == ECHO_BEGIN:
        try:
            end = lines.index(ECHO_END)
        except ValueError:
            raise ValueError("unterminated resolved-config echo block")
        config_lines = "\n".join(lines[1:end]) + "\n"
        i = end + 1
    for line in lines[i:]:
        if not line or line.startswith("#"):
            continue
        ts, _, rest = line.partition("\t")
        fields = {}
        for tok in rest.split():
            k, _, v = tok.partition("=")
            fields[k] = v
        metrics = {k: float(v) for k, v in fields.items()
                   if k not in ("stage", "epoch", "step", "loss", "lr")}
        records.append(LogRecord(
            stage=int(fields["stage"]), epoch=int(fields["epoch"]), step=int(fields["step"]),
            loss=float(fields["loss"]), lr=float(fields["lr"]),
            metrics=metrics, timestamp=ts,
        ))
    return config_lines, records


def strip_timestamps(text: str) -> str:
    """Drop the wall-clock column so two runs of one experiment compare equal."""
    out = []
    for line in text.splitlines():
        if line.startswith("#") or "\t" not in line:
            out.append(line)
        else:
            out.append(line.split("\t", 1)[1])
    return "\n".join(out) + ("\n" if text.endswith("\n") else "")
