"""Aggregate a run directory into metric tables (JSON, CSV, Markdown)."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .campaign import COMPLETED, FAILED, INAPPLICABLE, RunManifest, cell_filename, cell_id
from .errors import IncompleteRun, T2IMTError
from .metrics import fit_temperature, i_fid, i_is, load_matrix, r_precision, summarize, temperature_scale
from .mr import MissCounts
from .mutation import ALL_OPERATORS, EC, EC_ER_A, EC_ER_R, ER_A, ER_R, ORIG, SS, stratify_by_density

logger = logging.getLogger(__name__)

QUALITY_OPERATORS = (ORIG, SS, ER_R, ER_A, EC)
ERROR_OPERATORS = ALL_OPERATORS
MISS_OPERATORS = (ORIG, ER_R, ER_A, EC, EC_ER_R, EC_ER_A)


@dataclass
class ReportRow:
    backend: str
    operator: str
    completed: int = 0
    inapplicable: int = 0
    failed: int = 0
    missing: int = 0
    verdicts: int = 0
    error_e: float | None = None
    error_r: float | None = None
    miss: MissCounts = field(default_factory=MissCounts)
    i_fid: float | None = None
    i_is_mean: float | None = None
    i_is_std: float | None = None
    r_precision: float | None = None

    @property
    def miss_e(self) -> float | None:
        return self.miss.miss_e

    @property
    def miss_r(self) -> float | None:
        return self.miss.miss_r

    def to_dict(self) -> dict:
        out = asdict(self)
        out["miss"] = asdict(self.miss)
        out["miss_e"], out["miss_r"] = self.miss_e, self.miss_r
        return out


@dataclass
class MetricReport:
    backends: list[str]
    operators: list[str]
    rows: dict[tuple[str, str], ReportRow]
    strata: list[dict]
    failures: list[dict]
    missing: list[str]
    epsilon: float
    temperature: float | None = None

    def row(self, backend: str, operator: str) -> ReportRow | None:
        return self.rows.get((backend, operator))

    @property
    def counts(self) -> dict[str, int]:
        rows = self.rows.values()
        return {
            COMPLETED: sum(r.completed for r in rows),
            INAPPLICABLE: sum(r.inapplicable for r in rows),
            FAILED: sum(r.failed for r in rows),
            "missing": sum(r.missing for r in rows),
        }

    def to_dict(self) -> dict:
        return {
            "backends": self.backends,
            "operators": self.operators,
            "counts": self.counts,
            "epsilon": self.epsilon,
            "temperature": self.temperature,
            "rows": [self.rows[k].to_dict() for k in sorted(self.rows)],
            "density": self.strata,
            "failures": self.failures,
            "missing": self.missing,
        }


# --- building ------------------------------------------------------------------

def _find_matrix(base: Path, name: str) -> Path | None:
    for suffix in (".npy", ".txt"):
        p = base / f"{name}{suffix}"
        if p.exists():
            return p
    return None


def _quality(report: MetricReport, qdir: Path) -> None:
    """Fill realism/relevance columns from ingested arrays under ``qdir``.

    Layout: ``real_features``, optional ``temperature.json`` or
    ``calibration_logits`` + ``calibration_labels``, and per cell group
    ``<backend>/<operator>/{features,logits,similarity}``.
    """
    real_path = _find_matrix(qdir, "real_features")
    real = summarize(load_matrix(real_path)) if real_path else None
    t_file = qdir / "temperature.json"
    cal_z, cal_y = _find_matrix(qdir, "calibration_logits"), _find_matrix(qdir, "calibration_labels")
    if t_file.exists():
        report.temperature = float(json.loads(t_file.read_text(encoding="utf-8"))["temperature"])
    elif cal_z and cal_y:
        report.temperature = fit_temperature(load_matrix(cal_z), load_matrix(cal_y)[:, 0].astype(int))
    for (backend, op), row in report.rows.items():
        base = qdir / backend / op
        try:
            feats = _find_matrix(base, "features")
            if feats and real is not None:
                row.i_fid = i_fid(real, summarize(load_matrix(feats)))
            logits = _find_matrix(base, "logits")
            if logits:
                probs = temperature_scale(load_matrix(logits), report.temperature or 1.0)
                row.i_is_mean, row.i_is_std = i_is(probs, min(10, probs.shape[0]))
            sims = _find_matrix(base, "similarity")
            if sims:
                row.r_precision = r_precision(load_matrix(sims), candidates=None)
        except T2IMTError as exc:
            report.failures.append({"cell": f"quality|{op}|{backend}", "error": f"{type(exc).__name__}: {exc}"})


def build_report(run_dir: str | Path, *, epsilon: float | None = None, quality_dir: str | Path | None = None) -> MetricReport:
    """Aggregate every cell of a run; raise :class:`IncompleteRun` when cells are missing."""
    run_dir = Path(run_dir)
    manifest = RunManifest(run_dir)
    start = manifest.start
    if start is None:
        empty = MetricReport([], [], {}, [], [], [], epsilon if epsilon is not None else 0.1)
        raise IncompleteRun(empty, [])
    config = start.get("config", {})
    eps = float(epsilon if epsilon is not None else config.get("epsilon", 0.1))
    plan = start["plan"]
    report = MetricReport(list(plan["backends"]), list(plan["operators"]), {}, [], [], [], eps)
    for b in report.backends:
        for op in report.operators:
            report.rows[(b, op)] = ReportRow(b, op)

    events = manifest.cells()
    verdicts: dict[tuple[str, str], list[dict]] = {}
    levels: dict[tuple[str, str], list[tuple[int, float]]] = {}
    for seed_id, op, b in manifest.expected_cells():
        cid = cell_id(seed_id, op, b)
        row = report.rows[(b, op)]
        event = events.get(cid)
        status = event["status"] if event else None
        if status == INAPPLICABLE:
            row.inapplicable += 1
            continue
        if status == FAILED:
            row.failed += 1
            report.failures.append({"cell": cid, "error": event.get("error", "")})
            continue
        path = run_dir / "cells" / cell_filename(cid)
        if status != COMPLETED or not path.exists():
            row.missing += 1
            report.missing.append(cid)
            continue
        cell = json.loads(path.read_text(encoding="utf-8"))
        row.completed += 1
        row.miss = row.miss + MissCounts(**cell["miss"])
        if cell.get("verdict") is not None:
            verdicts.setdefault((b, op), []).append(cell["verdict"])
        if cell.get("score") is not None:
            levels.setdefault((b, op), []).append((int(cell["level"]), float(cell["score"])))

    for key, vs in verdicts.items():
        row = report.rows[key]
        row.verdicts = len(vs)
        row.error_e = sum(bool(v["p_e"]) for v in vs) / len(vs)
        row.error_r = sum(bool(v["p_r"]) for v in vs) / len(vs)

    for b in report.backends:
        pooled = [pair for op in report.operators for pair in levels.get((b, op), [])]
        groups = [("*", pooled)] + [(op, levels.get((b, op), [])) for op in report.operators]
        for op, pairs in groups:
            if pairs:
                strat = stratify_by_density(pairs, epsilon=eps)
                report.strata.append({"backend": b, "operator": op, **strat.to_dict()})

    qdir = quality_dir if quality_dir is not None else config.get("quality_dir")
    if qdir:
        _quality(report, Path(qdir))
    if report.missing:
        raise IncompleteRun(report, report.missing)
    return report


# --- rendering -----------------------------------------------------------------

def _rate(x: float | None) -> str:
    return "-" if x is None else f"{x:.4f}"


def _marked(values: list[float | None]) -> list[str]:
    """Format rates; the largest is bold and the runner-up underlined."""
    text = [_rate(v) for v in values]
    ranked = sorted({v for v in values if v is not None}, reverse=True)
    for i, v in enumerate(values):
        if v is None:
            continue
        if v == ranked[0]:
            text[i] = f"**{text[i]}**"
        elif len(ranked) > 1 and v == ranked[1]:
            text[i] = f"<u>{text[i]}</u>"
    return text


def _md_table(header: list[str], rows: list[list[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines)


def _present(report: MetricReport, wanted: tuple[str, ...]) -> list[str]:
    return [op for op in wanted if op in report.operators]


def quality_table(report: MetricReport) -> tuple[list[str], list[list[str]]]:
    header = ["Backend", "Operator", "I-FID", "I-IS", "RP"]
    rows = []
    for b in report.backends:
        for op in _present(report, QUALITY_OPERATORS):
            r = report.rows[(b, op)]
            fid = "-" if r.i_fid is None else f"{r.i_fid:.2f}"
            iis = "-" if r.i_is_mean is None else f"{r.i_is_mean:.2f} ± {r.i_is_std:.2f}"
            rp = "-" if r.r_precision is None else f"{100 * r.r_precision:.2f}%"
            rows.append([b, op, fid, iis, rp])
    return header, rows


def error_table(report: MetricReport) -> tuple[list[str], list[list[str]]]:
    header = ["Backend", "Operator", "Cases", "Error_e", "Error_r"]
    rows = []
    for b in report.backends:
        for op in _present(report, ERROR_OPERATORS):
            r = report.rows[(b, op)]
            rows.append([b, op, str(r.verdicts), _rate(r.error_e), _rate(r.error_r)])
    return header, rows


def miss_table(report: MetricReport, marks: bool = True) -> tuple[list[str], list[list[str]]]:
    ops = _present(report, MISS_OPERATORS)
    header = ["Backend"] + [f"Miss_e {op}" for op in ops] + [f"Miss_r {op}" for op in ops]
    fmt = _marked if marks else (lambda vs: [_rate(v) for v in vs])
    rows = []
    for b in report.backends:
        me = [report.rows[(b, op)].miss_e for op in ops]
        mr = [report.rows[(b, op)].miss_r for op in ops]
        rows.append([b] + fmt(me) + fmt(mr))
    return header, rows


def density_table(report: MetricReport) -> tuple[list[str], list[list[str]]]:
    header = ["Backend", "Operator", "Levels", "Level a", "Level b", "D", "Flagged"]
    rows = []
    for s in report.strata:
        lv = ", ".join(f"{x['level']}:{x['mean']:.4f} (n={x['count']})" for x in s["levels"])
        if not s["distances"]:
            rows.append([s["backend"], s["operator"], lv, "-", "-", "-", "no"])
        for d in s["distances"]:
            rows.append([s["backend"], s["operator"], lv, str(d["a"]), str(d["b"]), f"{d['distance']:.4f}",
                         "yes" if d["flagged"] else "no"])
    return header, rows


def cells_table(report: MetricReport) -> tuple[list[str], list[list[str]]]:
    header = ["backend", "operator", "completed", "inapplicable", "failed", "missing", "verdicts",
              "error_e", "error_r", "miss_e", "miss_r", "i_fid", "i_is_mean", "i_is_std", "r_precision"]
    rows = []
    for key in sorted(report.rows):
        r = report.rows[key]
        vals = [r.error_e, r.error_r, r.miss_e, r.miss_r, r.i_fid, r.i_is_mean, r.i_is_std, r.r_precision]
        rows.append([r.backend, r.operator, str(r.completed), str(r.inapplicable), str(r.failed), str(r.missing),
                     str(r.verdicts)] + ["" if v is None else repr(float(v)) for v in vals])
    return header, rows


TABLES = {"quality": quality_table, "errors": error_table, "miss": miss_table, "density": density_table,
          "cells": cells_table}


def render_markdown(report: MetricReport) -> str:
    parts = ["# Test campaign report", ""]
    c = report.counts
    parts.append(f"Cells: {c[COMPLETED]} completed, {c[INAPPLICABLE]} inapplicable, "
                 f"{c[FAILED]} failed, {c['missing']} missing.")
    sections = [("Image quality", quality_table), ("Metamorphic relation errors", error_table),
                ("Detection miss rates", miss_table), (f"Density stratification (epsilon = {report.epsilon:g})", density_table)]
    for title, fn in sections:
        header, rows = fn(report)
        parts += ["", f"## {title}", "", _md_table(header, rows) if rows else "_no data_"]
    if report.failures:
        parts += ["", "## Failures", ""] + [f"- `{f['cell']}`: {f['error']}" for f in report.failures]
    if report.missing:
        parts += ["", "## Missing cells", ""] + [f"- `{m}`" for m in report.missing]
    return "\n".join(parts) + "\n"


def render_csv(report: MetricReport, table: str = "cells") -> str:
    fn = TABLES[table]
    header, rows = fn(report, marks=False) if fn is miss_table else fn(report)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def render_json(report: MetricReport) -> str:
    return json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n"


def render(report: MetricReport, fmt: str = "md", table: str = "cells") -> str:
    if fmt == "json":
        return render_json(report)
    if fmt == "csv":
        return render_csv(report, table)
    if fmt == "md":
        return render_markdown(report)
    raise ValueError(f"unknown report format {fmt!r}")


def write_report(report: MetricReport, run_dir: str | Path) -> dict[str, Path]:
    run_dir = Path(run_dir)
    out = {}
    for fmt, name in (("json", "report.json"), ("csv", "report.csv"), ("md", "report.md")):
        path = run_dir / name
        path.write_text(render(report, fmt), encoding="utf-8")
        out[fmt] = path
    return out
