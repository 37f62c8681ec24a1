"""Recording-level recall/FPR reports and model comparison artifacts (CSV + SVG)."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import fileio
from .dataset import DatasetManifest, Label

PREDICTION_FIELDS = ["path", "deployment", "label", "pred", "log_prob_neg", "log_prob_pos"]
REPORT_FIELDS = ["model_id", "combo", "window", "duration_class", "deployment", "P", "N", "TP", "FP",
                 "recall", "fpr"]
OVERALL = "overall"

RECALL_COLOUR = "#ff7f0e"   # orange
FPR_COLOUR = "#808080"      # grey
DURATION_COLOURS = {"ThirtySecond": RECALL_COLOUR, "FourMinute": FPR_COLOUR}


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class Prediction:
    path: str
    deployment: str
    label: str
    pred: int  # 1 = Positive
    log_prob_neg: float
    log_prob_pos: float


def write_predictions(path, preds: list[Prediction]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PREDICTION_FIELDS)
    for p in preds:
        w.writerow([p.path, p.deployment, p.label, p.pred, repr(p.log_prob_neg), repr(p.log_prob_pos)])
    fileio.write_text_atomic(path, buf.getvalue())


def read_predictions(path) -> list[Prediction]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"predictions file {path} does not exist")
    reader = csv.DictReader(io.StringIO(path.read_text()))
    if reader.fieldnames != PREDICTION_FIELDS:
        raise EvaluationError(f"{path}: expected header {','.join(PREDICTION_FIELDS)}")
    return [Prediction(r["path"], r["deployment"], r["label"], int(r["pred"]), float(r["log_prob_neg"]),
                       float(r["log_prob_pos"])) for r in reader]


@dataclass(frozen=True)
class Counts:
    P: int = 0
    N: int = 0
    TP: int = 0
    FP: int = 0

    def __post_init__(self):
        if not (0 <= self.TP <= self.P and 0 <= self.FP <= self.N):
            raise ValueError(f"inconsistent counts {self}")

    @property
    def recall(self) -> float:
        return self.TP / self.P if self.P else math.nan

    @property
    def fpr(self) -> float:
        return self.FP / self.N if self.N else math.nan

    def __add__(self, other: "Counts") -> "Counts":
        return Counts(self.P + other.P, self.N + other.N, self.TP + other.TP, self.FP + other.FP)


@dataclass
class EvalReport:
    model_id: str
    combo: str
    window: int
    deployments: dict[str, Counts] = field(default_factory=dict)
    duration_class: str = ""

    @property
    def overall(self) -> Counts:
        return sum(self.deployments.values(), Counts())

    def rows(self) -> list[dict]:
        out = []
        for dep, c in list(sorted(self.deployments.items())) + [(OVERALL, self.overall)]:
            out.append({"model_id": self.model_id, "combo": self.combo, "window": self.window,
                        "duration_class": self.duration_class, "deployment": dep, "P": c.P, "N": c.N,
                        "TP": c.TP, "FP": c.FP, "recall": c.recall, "fpr": c.fpr})
        return out

    def to_csv(self) -> str:
        return rows_to_csv(self.rows())

    def save(self, path) -> None:
        fileio.write_text_atomic(path, self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        reports = reports_from_csv(text)
        if len(reports) != 1:
            raise EvaluationError(f"expected one report, found {len(reports)}")
        return reports[0]

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_csv(Path(path).read_text())


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, REPORT_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def reports_from_csv(text: str) -> list[EvalReport]:
    """Parse report rows; overall rows are recomputed from deployments and checked."""
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != REPORT_FIELDS:
        raise EvaluationError(f"expected header {','.join(REPORT_FIELDS)}")
    reports: dict[tuple, EvalReport] = {}
    overall: dict[tuple, Counts] = {}
    for r in reader:
        key = (r["model_id"], r["combo"], int(r["window"]), r["duration_class"])
        rep = reports.setdefault(key, EvalReport(key[0], key[1], key[2], {}, key[3]))
        c = Counts(int(r["P"]), int(r["N"]), int(r["TP"]), int(r["FP"]))
        if r["deployment"] == OVERALL:
            overall[key] = c
        else:
            rep.deployments[r["deployment"]] = c
    for key, c in overall.items():
        if reports[key].overall != c:
            raise EvaluationError(f"overall row of {key[0]} does not equal the sum of its deployments")
    return list(reports.values())


def evaluate(predictions: list[Prediction], manifest: DatasetManifest, model_id: str = "", combo: str = "",
             window: int = 0) -> EvalReport:
    """Count TP/FP against the manifest labels, grouped by deployment.

    Every prediction must name a manifest entry and every Positive/Negative entry must be predicted.
    """
    truth = {e.path: e for e in manifest.entries if e.label is not Label.EXCLUDED}
    by_path = {p.path: p for p in predictions}
    unmatched = sorted(set(by_path) - set(truth)) + sorted(set(truth) - set(by_path))
    if unmatched:
        raise EvaluationError("unmatched paths between predictions and manifest: " + ", ".join(unmatched))
    groups: dict[str, Counts] = {}
    durations = set()
    for path, e in truth.items():
        hit = by_path[path].pred == 1
        pos = e.label is Label.POSITIVE
        c = Counts(int(pos), int(not pos), int(pos and hit), int(hit and not pos))
        groups[e.deployment] = groups.get(e.deployment, Counts()) + c
        durations.add(e.duration_class.value)
    return EvalReport(model_id, combo, window, groups, durations.pop() if len(durations) == 1 else "")


# -- comparison artifacts -------------------------------------------------------------------

def comparison_csv(reports: list[EvalReport]) -> str:
    return rows_to_csv([r for rep in reports for r in rep.rows()])


def box_stats(values) -> dict[str, float]:
    """Whiskers at min/max, box at linear-interpolated quartiles."""
    v = np.asarray([x for x in values if not math.isnan(x)], dtype=np.float64)
    if v.size == 0:
        return {k: math.nan for k in ("min", "q1", "median", "q3", "max")}
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"min": float(v.min()), "q1": float(q1), "median": float(med), "q3": float(q3), "max": float(v.max())}


@dataclass
class _Frame:
    """Unit-square to SVG pixel mapping of one plot panel."""
    left: float
    top: float
    width: float
    height: float

    def x(self, u: float) -> float:
        return self.left + u * self.width

    def y(self, v: float) -> float:
        return self.top + (1.0 - v) * self.height


def _fmt(v: float) -> str:
    return f"{v:.3f}"


def _svg(width: int, height: int, body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">')
    return "\n".join([head, f'<rect width="{width}" height="{height}" fill="white"/>'] + body + ["</svg>"]) + "\n"


def _axes(f: _Frame, xlabel: str, ylabel: str, ticks=(0.0, 0.25, 0.5, 0.75, 1.0), xticks=True) -> list[str]:
    out = [f'<rect x="{_fmt(f.left)}" y="{_fmt(f.top)}" width="{_fmt(f.width)}" height="{_fmt(f.height)}" '
           f'fill="none" stroke="black"/>']
    for t in ticks:
        out.append(f'<text x="{_fmt(f.left - 4)}" y="{_fmt(f.y(t) + 4)}" text-anchor="end">{t:g}</text>')
        if xticks:
            out.append(f'<text x="{_fmt(f.x(t))}" y="{_fmt(f.top + f.height + 14)}" '
                       f'text-anchor="middle">{t:g}</text>')
    out.append(f'<text x="{_fmt(f.left + f.width / 2)}" y="{_fmt(f.top + f.height + 30)}" '
               f'text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="{_fmt(f.left - 34)}" y="{_fmt(f.top + f.height / 2)}" text-anchor="middle" '
               f'transform="rotate(-90 {_fmt(f.left - 34)} {_fmt(f.top + f.height / 2)})">{escape(ylabel)}</text>')
    return out


def _feature_size(rep: EvalReport) -> str:
    return rep.combo if rep.combo else rep.model_id


def scatter_svg(reports: list[EvalReport]) -> str:
    """Overall recall (x) against FPR (y, increasing upward); good detectors sit lower right."""
    f = _Frame(60, 20, 360, 360)
    body = _axes(f, "recall", "false positive rate")
    for rep in reports:
        c = rep.overall
        if math.isnan(c.recall) or math.isnan(c.fpr):
            continue
        cx, cy = f.x(c.recall), f.y(c.fpr)
        body.append(f'<circle class="model" cx="{_fmt(cx)}" cy="{_fmt(cy)}" r="4" fill="{RECALL_COLOUR}" '
                    f'data-model="{escape(rep.model_id)}" data-recall="{c.recall!r}" data-fpr="{c.fpr!r}"/>')
        body.append(f'<text x="{_fmt(cx + 6)}" y="{_fmt(cy - 6)}">{escape(_feature_size(rep))}</text>')
    return _svg(480, 430, body)


def _box(f: _Frame, centre: float, half: float, stats: dict, colour: str, attrs: str) -> list[str]:
    if math.isnan(stats["min"]):
        return []
    y = {k: f.y(v) for k, v in stats.items()}
    data = " ".join(f'data-{k}="{v!r}"' for k, v in stats.items())
    return [f'<g class="box" {attrs} {data}>',
            f'<line class="whisker" x1="{_fmt(centre)}" y1="{_fmt(y["min"])}" x2="{_fmt(centre)}" '
            f'y2="{_fmt(y["max"])}" stroke="black"/>',
            f'<line class="cap-min" x1="{_fmt(centre - half / 2)}" y1="{_fmt(y["min"])}" '
            f'x2="{_fmt(centre + half / 2)}" y2="{_fmt(y["min"])}" stroke="black"/>',
            f'<line class="cap-max" x1="{_fmt(centre - half / 2)}" y1="{_fmt(y["max"])}" '
            f'x2="{_fmt(centre + half / 2)}" y2="{_fmt(y["max"])}" stroke="black"/>',
            f'<rect x="{_fmt(centre - half)}" y="{_fmt(y["q3"])}" width="{_fmt(2 * half)}" '
            f'height="{_fmt(y["q1"] - y["q3"])}" fill="{colour}" stroke="black"/>',
            f'<line class="median" x1="{_fmt(centre - half)}" y1="{_fmt(y["median"])}" '
            f'x2="{_fmt(centre + half)}" y2="{_fmt(y["median"])}" stroke="black" stroke-width="2"/>',
            "</g>"]


def _grouped_boxes(f: _Frame, groups: list[tuple[str, list[tuple[str, str, list[float]]]]]) -> list[str]:
    """``groups``: (group label, [(series key, colour, values)]) drawn left to right."""
    body = []
    slot = f.width / max(len(groups), 1)
    for i, (label, series) in enumerate(groups):
        centre0 = f.left + slot * (i + 0.5)
        half = slot / (3 * max(len(series), 1))
        for j, (key, colour, values) in enumerate(series):
            centre = centre0 + (j - (len(series) - 1) / 2) * 2.4 * half
            attrs = f'data-group="{escape(label)}" data-series="{escape(key)}"'
            body += _box(f, centre, half, box_stats(values), colour, attrs)
        body.append(f'<text x="{_fmt(centre0)}" y="{_fmt(f.top + f.height + 14)}" '
                    f'text-anchor="middle">{escape(label)}</text>')
    return body


def _per_deployment(rep: EvalReport, metric: str) -> list[float]:
    return [getattr(c, metric) for _, c in sorted(rep.deployments.items())]


def boxplot_svg(reports: list[EvalReport]) -> str:
    """Per-model boxes over deployments: recall orange, FPR grey."""
    width = 80 + 90 * max(len(reports), 1)
    f = _Frame(60, 20, width - 80, 300)
    body = _axes(f, "model", "rate", xticks=False)
    groups = [(_feature_size(r), [("recall", RECALL_COLOUR, _per_deployment(r, "recall")),
                                  ("fpr", FPR_COLOUR, _per_deployment(r, "fpr"))]) for r in reports]
    return _svg(width, 370, body + _grouped_boxes(f, groups))


def facet_svg(reports: list[EvalReport]) -> str:
    """Two panels (recall, FPR); per feature size, 30-s boxes orange beside 4-min boxes grey."""
    sizes = list(dict.fromkeys(_feature_size(r) for r in reports))
    width = 80 + 90 * max(len(sizes), 1)
    body = []
    for k, metric in enumerate(("recall", "fpr")):
        f = _Frame(60, 30 + k * 360, width - 80, 280)
        body += _axes(f, "feature size", metric, xticks=False)
        body.append(f'<g class="panel" data-metric="{metric}">')
        groups = []
        for size in sizes:
            series = []
            for dur in ("ThirtySecond", "FourMinute"):
                vals = [v for r in reports if _feature_size(r) == size and r.duration_class == dur
                        for v in _per_deployment(r, metric)]
                series.append((dur, DURATION_COLOURS[dur], vals))
            groups.append((size, series))
        body += _grouped_boxes(f, groups)
        body.append("</g>")
    return _svg(width, 720, body)


def compare_models(reports: list[EvalReport], out_dir) -> dict[str, Path]:
    """Write comparison.csv, scatter.svg, boxplot.svg and, when both durations are present, facet.svg."""
    if not reports:
        raise EvaluationError("no reports to compare")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {"csv": out_dir / "comparison.csv", "scatter": out_dir / "scatter.svg",
               "boxplot": out_dir / "boxplot.svg"}
    fileio.write_text_atomic(written["csv"], comparison_csv(reports))
    fileio.write_text_atomic(written["scatter"], scatter_svg(reports))
    fileio.write_text_atomic(written["boxplot"], boxplot_svg(reports))
    if {r.duration_class for r in reports} >= {"ThirtySecond", "FourMinute"}:
        written["facet"] = out_dir / "facet.svg"
        fileio.write_text_atomic(written["facet"], facet_svg(reports))
    return written
