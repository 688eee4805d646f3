"""Metrics records, the averaged table, and CSV / markdown rendering."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from ..personalization import COMBINATION_FLAGS, plan_for_row

SCENARIOS = ("fl", "dp_fl", "ra_fl")
SCENARIO_TITLES = {"fl": "FL", "dp_fl": "DP-FL", "ra_fl": "RA-FL"}
APPROACHES = ("local", "fl", *(f"row{r}" for r in range(1, len(COMBINATION_FLAGS) + 1)))
CSV_HEADER = ("scenario", "approach", "client_id", "accuracy")
AVERAGES_MARKER = "#averages"
FORMATS = ("csv", "markdown")


def approach_label(approach: str) -> str:
    if approach == "local":
        return "Local Model"
    if approach == "fl":
        return "FL"
    return plan_for_row(int(approach[3:])).label


class ReportError(ValueError):
    pass


@dataclass(frozen=True)
class MetricsRecord:
    scenario: str
    approach: str
    client_id: int
    accuracy: float

    def __post_init__(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.approach not in APPROACHES:
            raise ValueError(f"unknown approach {self.approach!r}")
        if not (0.0 <= self.accuracy <= 1.0):
            raise ValueError(f"accuracy must lie in [0, 1], got {self.accuracy}")

    def sort_key(self) -> tuple[int, int, int]:
        return SCENARIOS.index(self.scenario), APPROACHES.index(self.approach), self.client_id


@dataclass
class MetricsTable:
    records: list[MetricsRecord] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.records = sorted(self.records, key=MetricsRecord.sort_key)
        seen = set()
        for r in self.records:
            key = (r.scenario, r.approach, r.client_id)
            if key in seen:
                raise ValueError(f"duplicate record for {key}")
            seen.add(key)

    @property
    def averages(self) -> dict[tuple[str, str], float]:
        groups: dict[tuple[str, str], list[float]] = {}
        for r in self.records:
            groups.setdefault((r.scenario, r.approach), []).append(r.accuracy)
        return {k: math.fsum(v) / len(v) for k, v in groups.items()}

    def counts(self) -> dict[tuple[str, str], int]:
        out: dict[tuple[str, str], int] = {}
        for r in self.records:
            out[(r.scenario, r.approach)] = out.get((r.scenario, r.approach), 0) + 1
        return out

    def scenarios(self) -> list[str]:
        present = {r.scenario for r in self.records}
        return [s for s in SCENARIOS if s in present]

    def approaches(self) -> list[str]:
        present = {r.approach for r in self.records}
        return [a for a in APPROACHES if a in present]

    def select(self, scenario: Optional[str] = None, approach: Optional[str] = None) -> list[MetricsRecord]:
        return [
            r
            for r in self.records
            if (scenario is None or r.scenario == scenario) and (approach is None or r.approach == approach)
        ]

    def __len__(self) -> int:
        return len(self.records)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, MetricsTable) and self.records == other.records


def table_from_averages(values: dict[tuple[str, str], float], client_id: int = 0) -> MetricsTable:
    """One record per cell; handy for rendering published aggregates."""
    return MetricsTable([MetricsRecord(s, a, client_id, v) for (s, a), v in values.items()])


def render_csv(table: MetricsTable) -> str:
    lines = [",".join(CSV_HEADER)]
    for r in table.records:
        lines.append(f"{r.scenario},{r.approach},{r.client_id},{r.accuracy!r}")
    lines.append(AVERAGES_MARKER)
    lines.append("scenario,approach,mean_accuracy,num_clients")
    counts = table.counts()
    for (s, a), v in sorted(table.averages.items(), key=lambda kv: (SCENARIOS.index(kv[0][0]), APPROACHES.index(kv[0][1]))):
        lines.append(f"{s},{a},{v!r},{counts[(s, a)]}")
    return "\n".join(lines) + "\n"


def render_markdown(table: MetricsTable) -> str:
    scenarios = table.scenarios()
    approaches = table.approaches()
    avg = table.averages
    # rounded cells decide the bolding so visual ties are all marked
    cells = {k: round(100.0 * v, 2) for k, v in avg.items()}
    best = {}
    for s in scenarios:
        col = [cells[(s, a)] for a in approaches if a != "local" and (s, a) in cells]
        best[s] = max(col) if col else None
    lines = [
        "| Approach | " + " | ".join(SCENARIO_TITLES[s] for s in scenarios) + " |",
        "|---|" + "---|" * len(scenarios),
    ]
    for a in approaches:
        row = []
        for s in scenarios:
            if (s, a) not in cells:
                row.append("")
                continue
            text = f"{cells[(s, a)]:.2f}"
            if a != "local" and cells[(s, a)] == best[s]:
                text = f"**{text}**"
            row.append(text)
        lines.append(f"| {approach_label(a)} | " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def emit_report(table: MetricsTable, fmt: str, out_path) -> Path:
    if fmt not in FORMATS:
        raise ReportError(f"unknown report format {fmt!r}; expected one of {FORMATS}")
    if not table.records:
        raise ReportError("cannot render an empty metrics table (no approaches)")
    text = render_csv(table) if fmt == "csv" else render_markdown(table)
    path = Path(out_path)
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as e:
        raise ReportError(f"cannot write report to {path}: {e}") from e
    return path


def read_metrics_csv(path, check_averages: bool = True) -> MetricsTable:
    records: list[MetricsRecord] = []
    declared: dict[tuple[str, str], float] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise ReportError(f"{path}: expected header {','.join(CSV_HEADER)}")
    in_averages = False
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if row[0] == AVERAGES_MARKER:
            in_averages = True
            continue
        try:
            if in_averages:
                if row[0] == "scenario":
                    continue
                declared[(row[0], row[1])] = float(row[2])
            else:
                if len(row) != 4:
                    raise ValueError(f"expected 4 fields, got {len(row)}")
                records.append(MetricsRecord(row[0], row[1], int(row[2]), float(row[3])))
        except (ValueError, IndexError) as e:
            raise ReportError(f"{path}:{lineno}: {e}") from None
    table = MetricsTable(records)
    if check_averages:
        actual = table.averages
        for key, v in declared.items():
            if key not in actual or abs(actual[key] - v) > 1e-9:
                raise ReportError(f"{path}: declared average for {key} does not match its records")
    return table


@dataclass(frozen=True)
class LocalVsFlSummary:
    scenario: str
    deltas: dict[int, float]  # FL minus local, per client
    local_better: int
    fl_better: int
    ties: int
    mean_local: float
    mean_fl: float

    @property
    def mean_delta(self) -> float:
        return self.mean_fl - self.mean_local

    @property
    def fraction_local_better(self) -> float:
        return self.local_better / len(self.deltas)


def compare_local_vs_fl(table: MetricsTable, scenario: str = "fl") -> LocalVsFlSummary:
    local = {r.client_id: r.accuracy for r in table.select(scenario, "local")}
    fl = {r.client_id: r.accuracy for r in table.select(scenario, "fl")}
    if not local or not fl:
        raise ReportError(f"scenario {scenario!r} needs both local and fl records")
    if set(local) != set(fl):
        missing = sorted(set(local) ^ set(fl))
        raise ReportError(f"local and fl records are not paired for clients {missing}")
    deltas = {cid: fl[cid] - local[cid] for cid in sorted(local)}
    return LocalVsFlSummary(
        scenario=scenario,
        deltas=deltas,
        local_better=sum(d < 0 for d in deltas.values()),
        fl_better=sum(d > 0 for d in deltas.values()),
        ties=sum(d == 0 for d in deltas.values()),
        mean_local=math.fsum(local.values()) / len(local),
        mean_fl=math.fsum(fl.values()) / len(fl),
    )


def summarize(table: MetricsTable, scenarios: Optional[Sequence[str]] = None) -> list[LocalVsFlSummary]:
    return [compare_local_vs_fl(table, s) for s in (scenarios or table.scenarios())]

