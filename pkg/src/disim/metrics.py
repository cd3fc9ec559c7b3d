"""Session records and the comparative analysis across modes and interfaces.

Each trial produces one SessionRecord: interface label, operating mode,
per-task durations, sorted bolt count and joint-limit violation count.
Aggregation groups records by (mode, interface label) and takes arithmetic
means; the mode comparison reports signed percent changes per interface
plus an unweighted average row. Percent changes are kept at full precision
internally and rounded to two decimals for reporting, so the ratio
antisymmetry of the comparison holds exactly.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

TASK_KEYS = ("bolts", "busbar", "cover", "modules")
TASK_HEADINGS = {"bolts": "Bolts", "busbar": "Busbar",
                 "cover": "Cover Case", "modules": "Battery Cells"}


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class SessionRecord:
    mode: int                      # 1 = manual, 2 = semi-autonomous
    im_label: str
    per_task_s: dict
    sorted_bolts: int
    violations: int

    def __post_init__(self):
        if self.mode not in (1, 2):
            raise MetricsError("mode must be 1 or 2")
        missing = [k for k in TASK_KEYS if k not in self.per_task_s]
        if missing:
            raise MetricsError(f"per_task_s missing keys: {missing}")
        if any(self.per_task_s[k] < 0 for k in TASK_KEYS):
            raise MetricsError("task durations must be >= 0")
        if self.sorted_bolts < 0 or self.violations < 0:
            raise MetricsError("counts must be >= 0")
        object.__setattr__(self, "per_task_s",
                           {k: float(self.per_task_s[k]) for k in TASK_KEYS})

    @property
    def total_s(self) -> float:
        return sum(self.per_task_s.values())

    def to_json(self) -> dict:
        return {"mode": self.mode, "im_label": self.im_label,
                "per_task_s": dict(self.per_task_s),
                "sorted_bolts": self.sorted_bolts, "violations": self.violations}

    @staticmethod
    def from_json(d: dict) -> "SessionRecord":
        return SessionRecord(mode=int(d["mode"]), im_label=str(d["im_label"]),
                             per_task_s=dict(d["per_task_s"]),
                             sorted_bolts=int(d["sorted_bolts"]),
                             violations=int(d["violations"]))


@dataclass(frozen=True)
class Aggregate:
    mode: int
    im_label: str
    count: int
    per_task_s: dict        # per-task means
    sorted_bolts: float     # mean
    violations: float       # mean

    @property
    def total_s(self) -> float:
        """Total time is the sum of the per-task means."""
        return sum(self.per_task_s[k] for k in TASK_KEYS)


def mmss(seconds: float) -> str:
    """mm:ss rendering, flooring fractional seconds (598 -> 09:58)."""
    if seconds < 0:
        raise MetricsError("negative duration")
    whole = int(math.floor(seconds))
    return f"{whole // 60:02d}:{whole % 60:02d}"


def aggregate(records) -> dict:
    """Group means keyed by (mode, im_label)."""
    records = list(records)
    if not records:
        raise MetricsError("empty record group")
    groups: dict = {}
    for r in records:
        groups.setdefault((r.mode, r.im_label), []).append(r)
    out = {}
    for key in sorted(groups):
        rs = groups[key]
        n = len(rs)
        out[key] = Aggregate(
            mode=key[0], im_label=key[1], count=n,
            per_task_s={k: sum(r.per_task_s[k] for r in rs) / n for k in TASK_KEYS},
            sorted_bolts=sum(r.sorted_bolts for r in rs) / n,
            violations=sum(r.violations for r in rs) / n,
        )
    return out


@dataclass(frozen=True)
class ComparisonRow:
    """Signed percent changes mode1 -> mode2; None marks an undefined change
    (zero baseline), which is excluded from the average row."""

    im_label: str
    d_time_pct: float | None
    d_bolts_pct: float | None
    d_violations_pct: float | None

    def rounded(self) -> dict:
        def r2(v):
            return None if v is None else round(v, 2)
        return {"im_label": self.im_label, "d_time_pct": r2(self.d_time_pct),
                "d_bolts_pct": r2(self.d_bolts_pct),
                "d_violations_pct": r2(self.d_violations_pct)}


def _pct_change(baseline: float, variant: float) -> float | None:
    if baseline == 0:
        return None
    return (variant - baseline) / baseline * 100.0


def compare(mode1_aggs: dict, mode2_aggs: dict) -> tuple[list[ComparisonRow], ComparisonRow]:
    """Per-interface percent changes plus the unweighted average row.

    Both arguments map im_label -> Aggregate; the label sets must match.
    """
    if set(mode1_aggs) != set(mode2_aggs):
        raise MetricsError(
            f"interface labels differ: {sorted(mode1_aggs)} vs {sorted(mode2_aggs)}")
    if not mode1_aggs:
        raise MetricsError("nothing to compare")
    rows = []
    for im in sorted(mode1_aggs):
        a, b = mode1_aggs[im], mode2_aggs[im]
        rows.append(ComparisonRow(
            im_label=im,
            d_time_pct=_pct_change(a.total_s, b.total_s),
            d_bolts_pct=_pct_change(a.sorted_bolts, b.sorted_bolts),
            d_violations_pct=_pct_change(a.violations, b.violations),
        ))

    def col_avg(values):
        vals = [v for v in values if v is not None]
        return sum(vals) / len(vals) if vals else None

    avg = ComparisonRow(
        im_label="Average Change",
        d_time_pct=col_avg([r.d_time_pct for r in rows]),
        d_bolts_pct=col_avg([r.d_bolts_pct for r in rows]),
        d_violations_pct=col_avg([r.d_violations_pct for r in rows]),
    )
    return rows, avg


def headline(mode1_agg: Aggregate, mode2_agg: Aggregate) -> float:
    """Percent time reduction of mode2 relative to mode1 (positive = faster)."""
    t1, t2 = mode1_agg.total_s, mode2_agg.total_s
    if t1 == 0:
        raise MetricsError("zero baseline time")
    return (t1 - t2) / t1 * 100.0


# ---------------------------------------------------------------------------
# reports


def split_by_mode(aggs: dict) -> tuple[dict, dict]:
    m1 = {im: a for (mode, im), a in aggs.items() if mode == 1}
    m2 = {im: a for (mode, im), a in aggs.items() if mode == 2}
    return m1, m2


def build_report(records, compare_modes: tuple[int, int] | None = (1, 2)) -> dict:
    """Tables keyed 'table1' (headline metrics), 'table2' (per-task times),
    'table3' (mode comparison; present when both modes have data)."""
    aggs = aggregate(records)
    m1, m2 = split_by_mode(aggs)
    ims = sorted(set(m1) | set(m2))

    def fmt(agg: Aggregate | None):
        if agg is None:
            return {"Average Time": "", "Average Sorted Bolts": "",
                    "Average Joint Limit Violations": ""}
        return {"Average Time": mmss(agg.total_s),
                "Average Sorted Bolts": round(agg.sorted_bolts, 2),
                "Average Joint Limit Violations": round(agg.violations, 2)}

    table1 = []
    table2 = []
    for im in ims:
        row1: dict = {"IM": im}
        row2: dict = {"IM": im}
        for label, group in (("Mode 1", m1), ("Mode 2", m2)):
            agg = group.get(im)
            for k, v in fmt(agg).items():
                row1[f"{label} {k}"] = v
            for key in TASK_KEYS:
                row2[f"{label} {TASK_HEADINGS[key]}"] = (
                    mmss(agg.per_task_s[key]) if agg is not None else "")
        table1.append(row1)
        table2.append(row2)

    report = {"table1": table1, "table2": table2}
    if compare_modes and all(im in m1 and im in m2 for im in ims) and ims:
        base = {im: aggs[(compare_modes[0], im)] for im in ims}
        var = {im: aggs[(compare_modes[1], im)] for im in ims}
        rows, avg = compare(base, var)
        table3 = []
        for r in rows + [avg]:
            rr = r.rounded()
            table3.append({"Method": rr["im_label"],
                           "Average Time": rr["d_time_pct"],
                           "Average Sorted Bolts": rr["d_bolts_pct"],
                           "Average Joint Limit Violations": rr["d_violations_pct"]})
        report["table3"] = table3
    return report


def render_csv(report: dict) -> str:
    buf = io.StringIO()
    titles = {"table1": "Task Performance (mm:ss)",
              "table2": "Tasks Average Times (mm:ss)",
              "table3": "Comparison between IMs on the different modes"}
    first = True
    for key in ("table1", "table2", "table3"):
        rows = report.get(key)
        if not rows:
            continue
        if not first:
            buf.write("\n")
        first = False
        buf.write(titles[key] + "\n")
        writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    return buf.getvalue()


def render_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def load_records(directory) -> list:
    """All *.json session records of a directory, filename order."""
    directory = Path(directory)
    records = []
    for path in sorted(directory.glob("*.json")):
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise MetricsError(f"{path}: {exc}") from None
        if "record" in data:  # full session artifact: record nested
            data = data["record"]
        records.append(SessionRecord.from_json(data))
    if not records:
        raise MetricsError(f"no session records in {directory}")
    return records
