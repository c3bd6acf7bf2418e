"""Per-iteration run records and their CSV form.

A trace file starts with ``# config <json>`` echoing the resolved run
configuration, then the `EvalReport` header and one row per record.
Wall-clock timings are kept on the object but not written, so reruns
produce byte-identical files.
"""
import json
from dataclasses import dataclass, field

from .errors import FormatError, InvalidInput
from .metrics import EvalReport

CONFIG_PREFIX = "# config "


@dataclass
class RunTrace:
    config: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    diverged_at: int = None

    def append(self, report, seconds=0.0):
        if self.rows and report.iteration <= self.rows[-1].iteration:
            raise InvalidInput(f"iteration {report.iteration} does not follow {self.rows[-1].iteration}")
        self.rows.append(report)
        self.seconds.append(float(seconds))

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        return [getattr(r, name) for r in self.rows]

    def to_csv(self, path=None):
        lines = [CONFIG_PREFIX + json.dumps(self.config, sort_keys=True)]
        if self.diverged_at is not None:
            lines.append(f"# diverged_at {self.diverged_at}")
        lines.append(EvalReport.CSV_HEADER)
        lines.extend(r.csv_row() for r in self.rows)
        text = "\n".join(lines) + "\n"
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, path):
        with open(path) as fh:
            lines = fh.read().splitlines()
        trace = cls()
        body = []
        for line in lines:
            if line.startswith(CONFIG_PREFIX):
                trace.config = json.loads(line[len(CONFIG_PREFIX):])
            elif line.startswith("# diverged_at "):
                trace.diverged_at = int(line.split()[-1])
            elif line and not line.startswith("#"):
                body.append(line)
        if not body or body[0] != EvalReport.CSV_HEADER:
            raise FormatError(f"{path} lacks the trace header")
        for row in body[1:]:
            trace.append(EvalReport.from_csv_row(row))
        return trace


def read_config(path):
    """The config echoed at the top of a trace file."""
    with open(path) as fh:
        for line in fh:
            if line.startswith(CONFIG_PREFIX):
                return json.loads(line[len(CONFIG_PREFIX):])
    raise FormatError(f"{path} has no config echo")
