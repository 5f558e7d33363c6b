"""Attribute-prediction metrics, caption similarity and corruption robustness."""
from __future__ import annotations

import csv
import json
import math
import re
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

# families reported as columns of a robustness table; brightness pools both directions
ROBUSTNESS_FAMILIES = {
    "occlusion": ("occlusion",),
    "motion_blur": ("motion_blur",),
    "gaussian_noise": ("gaussian_noise",),
    "brightness": ("brightness_up", "brightness_down"),
}
CLASSIFICATION_ATTRS = ("type", "material")
REGRESSION_ATTRS = ("floors", "age_year")


class MetricError(ValueError):
    pass


def classification_metrics(preds: Sequence, truth: Sequence, second_choice: Sequence | None = None, average: str = "macro") -> dict:
    """Accuracy, precision, recall, F1 and (given second choices) acc@2.

    Precision, recall and F1 average per-class scores over the classes
    present in ``truth``; ``average="weighted"`` weights them by support.
    A class never predicted scores precision 0.
    """
    if len(preds) != len(truth):
        raise MetricError(f"length mismatch: {len(preds)} predictions vs {len(truth)} labels")
    if not truth:
        raise MetricError("no samples")
    if average not in ("macro", "weighted"):
        raise MetricError(f"unknown average {average!r}")
    n = len(truth)
    hits = [p == t for p, t in zip(preds, truth)]
    support = defaultdict(int)
    tp = defaultdict(int)
    predicted = defaultdict(int)
    for p, t, h in zip(preds, truth, hits):
        support[t] += 1
        predicted[p] += 1
        if h:
            tp[t] += 1
    classes = sorted(support, key=str)
    prec, rec, f1 = [], [], []
    for c in classes:
        p = tp[c] / predicted[c] if predicted[c] else 0.0
        r = tp[c] / support[c]
        prec.append(p)
        rec.append(r)
        f1.append(2 * p * r / (p + r) if p + r > 0 else 0.0)
    if average == "macro":
        w = np.full(len(classes), 1.0 / len(classes))
    else:
        w = np.array([support[c] for c in classes], dtype=float) / n
    out = {
        "accuracy": sum(hits) / n,
        "precision": float(np.dot(w, prec)),
        "recall": float(np.dot(w, rec)),
        "f1": float(np.dot(w, f1)),
    }
    if second_choice is not None:
        if len(second_choice) != n:
            raise MetricError("second_choice length mismatch")
        out["acc@2"] = sum(h or s == t for h, s, t in zip(hits, second_choice, truth)) / n
    return out


def regression_metrics(preds: Sequence[float], truth: Sequence[float]) -> dict:
    """R2, MAE, MAPE (as a fraction) and RMSE."""
    if len(preds) != len(truth):
        raise MetricError(f"length mismatch: {len(preds)} predictions vs {len(truth)} labels")
    if len(truth) < 2:
        raise MetricError("need at least two samples")
    p = np.asarray(preds, dtype=float)
    t = np.asarray(truth, dtype=float)
    err = p - t
    ss_res = float(np.sum(err**2))
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    if ss_tot == 0.0:
        raise MetricError("R2 undefined: all truth values identical")
    nz = t != 0
    if not nz.all():
        warnings.warn(f"MAPE excludes {int((~nz).sum())} zero-valued truth entries", stacklevel=2)
    mape = float(np.mean(np.abs(err[nz] / t[nz]))) if nz.any() else float("nan")
    return {
        "r2": 1.0 - ss_res / ss_tot,
        "mae": float(np.mean(np.abs(err))),
        "mape": mape,
        "rmse": math.sqrt(ss_res / len(t)),
    }


def error_rate(task_kind: str, metrics: Mapping) -> float:
    if task_kind == "classification":
        return 1.0 - metrics["accuracy"]
    if task_kind == "regression":
        return 1.0 - metrics["r2"]
    raise MetricError(f"unknown task kind {task_kind!r}")


# ----------------------------------------------------------------------------
# robustness


def relative_ce(
    model_errors: Sequence[float],
    model_clean: float,
    baseline_errors: Sequence[float],
    baseline_clean: float,
    per_severity_clean: bool = False,
) -> float:
    """Relative corruption error of one corruption family.

    By default the clean error is subtracted once from the summed severity
    errors; ``per_severity_clean`` subtracts it from every severity instead.
    """
    if len(model_errors) != len(baseline_errors) or not model_errors:
        raise MetricError("model and baseline need the same non-empty set of severities")
    k_m = len(model_errors) if per_severity_clean else 1
    k_b = len(baseline_errors) if per_severity_clean else 1
    num = math.fsum(model_errors) - k_m * model_clean
    den = math.fsum(baseline_errors) - k_b * baseline_clean
    if den == 0:
        raise MetricError("baseline shows no degradation")
    return num / den


def relative_mce(per_kind: Sequence[float]) -> float:
    if not per_kind:
        raise MetricError("no corruption kinds")
    return math.fsum(per_kind) / len(per_kind)


def round_half_up(x: float, places: int = 2) -> float:
    q = Decimal(1).scaleb(-places)
    return float(Decimal(repr(float(x))).quantize(q, rounding=ROUND_HALF_UP))


@dataclass
class ErrorTable:
    """Error rates of one model on one attribute: clean and per (kind, severity)."""

    clean: float
    levels: dict[tuple[str, int], float] = field(default_factory=dict)

    def family(self, kinds: Iterable[str]) -> list[float]:
        vals = []
        for k in kinds:
            sev = sorted(s for (kk, s) in self.levels if kk == k)
            if not sev:
                raise MetricError(f"no errors recorded for corruption kind {k!r}")
            vals.extend(self.levels[(k, s)] for s in sev)
        return vals


@dataclass
class RobustnessReport:
    model: str
    clean_error: float
    errors: dict[tuple[str, int], float]
    relative_ce: dict[str, float]
    relative_mce: float

    def row(self) -> dict:
        return {"model": self.model, **self.relative_ce, "relative_mce": self.relative_mce}


def robustness_report(model: str, model_table: ErrorTable, baseline_table: ErrorTable, per_severity_clean: bool = False, families=None) -> RobustnessReport:
    families = families or ROBUSTNESS_FAMILIES
    ce = {}
    for name, kinds in families.items():
        ce[name] = relative_ce(
            model_table.family(kinds),
            model_table.clean,
            baseline_table.family(kinds),
            baseline_table.clean,
            per_severity_clean,
        )
    return RobustnessReport(model, model_table.clean, dict(model_table.levels), ce, relative_mce(list(ce.values())))


# ----------------------------------------------------------------------------
# captions


def lcs_length(a: Sequence, b: Sequence) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str, beta: float = 1.0) -> float:
    ref = reference.lower().split()
    if not ref:
        raise MetricError("empty reference")
    cand = candidate.lower().split()
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p = lcs / len(cand)
    r = lcs / len(ref)
    return (1 + beta**2) * p * r / (r + beta**2 * p)


# ----------------------------------------------------------------------------
# answer extraction and prediction files

_INT_TOKEN = re.compile(r"(?<![\d.])-?\d+(?!\.?\d)")
_YEAR_TOKEN = re.compile(r"(?<!\d)(\d{4})(?!\d)")


def extract_floors(text) -> int | None:
    if isinstance(text, (int, float)) and not isinstance(text, bool):
        return int(text)
    m = _INT_TOKEN.search(str(text))
    return int(m.group(0)) if m else None


def extract_year(text) -> int | None:
    if isinstance(text, (int, float)) and not isinstance(text, bool):
        return int(text)
    m = _YEAR_TOKEN.search(str(text))
    return int(m.group(1)) if m else None


def load_predictions(path) -> list[dict]:
    """Line-delimited prediction records: image_id, attribute, predicted,
    optional second_choice, truth."""
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        rec = json.loads(line)
        for key in ("image_id", "attribute", "predicted", "truth"):
            if key not in rec:
                raise MetricError(f"{path}:{lineno}: missing {key}")
        out.append(rec)
    return out


def evaluate_predictions(records: Iterable[Mapping], average: str = "macro", age_reference_year: int | None = None) -> dict[str, dict]:
    """Per-attribute metrics from prediction records. Free-text numeric
    answers are reduced to their first integer (floors) or 4-digit year (age).

    With ``age_reference_year`` set, construction years are scored as ages
    (reference year minus year). Only MAPE depends on this choice.
    """
    by_attr: dict[str, list[Mapping]] = defaultdict(list)
    for r in records:
        by_attr[r["attribute"]].append(r)
    out = {}
    for attr, recs in sorted(by_attr.items()):
        if attr in REGRESSION_ATTRS:
            extract = extract_floors if attr == "floors" else extract_year
            pairs = [(extract(r["predicted"]), float(r["truth"])) for r in recs]
            missing = sum(p is None for p, _ in pairs)
            pairs = [(float(p), t) for p, t in pairs if p is not None]
            if attr == "age_year" and age_reference_year is not None:
                pairs = [(age_reference_year - p, age_reference_year - t) for p, t in pairs]
            m = regression_metrics([p for p, _ in pairs], [t for _, t in pairs])
            m["unparsed"] = missing
            m["n"] = len(pairs)
        else:
            preds = [str(r["predicted"]).strip().lower() for r in recs]
            truth = [str(r["truth"]).strip().lower() for r in recs]
            second = None
            if all(r.get("second_choice") is not None for r in recs):
                second = [str(r["second_choice"]).strip().lower() for r in recs]
            m = classification_metrics(preds, truth, second, average=average)
            m["n"] = len(recs)
        out[attr] = m
    return out


def write_classification_table(path, rows: Mapping[str, Mapping[str, Mapping]]) -> Path:
    """Rows keyed model -> attribute -> metrics, columns as in the accuracy table."""
    cols = ["attribute", "model", "accuracy", "precision", "recall", "f1", "acc@2"]
    return _write_csv(path, cols, _flatten(rows, CLASSIFICATION_ATTRS, cols))


def write_regression_table(path, rows: Mapping[str, Mapping[str, Mapping]]) -> Path:
    cols = ["attribute", "model", "r2", "mae", "mape", "rmse"]
    return _write_csv(path, cols, _flatten(rows, REGRESSION_ATTRS, cols))


def write_robustness_table(path, reports: Mapping[str, Sequence[RobustnessReport]]) -> Path:
    """Reports keyed by attribute; one row per model."""
    fams = list(ROBUSTNESS_FAMILIES)
    cols = ["attribute", "model", *fams, "relative_mce"]
    out = []
    for attr, reps in reports.items():
        for rep in reps:
            row = {"attribute": attr, "model": rep.model, "relative_mce": round_half_up(rep.relative_mce)}
            row.update({f: round_half_up(rep.relative_ce[f]) for f in fams})
            out.append(row)
    return _write_csv(path, cols, out)


def _flatten(rows, attrs, cols):
    out = []
    for model, per_attr in rows.items():
        for attr in attrs:
            if attr not in per_attr:
                continue
            m = per_attr[attr]
            row = {"attribute": attr, "model": model}
            for c in cols[2:]:
                if c in m and m[c] is not None:
                    row[c] = round_half_up(m[c])
            out.append(row)
    return out


def _write_csv(path, cols, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return path


def load_error_tables(path) -> dict[str, dict[str, ErrorTable]]:
    """Error-rate records ``{attribute, model, kind, severity, error}``; kind
    ``clean`` (severity 0) gives the clean error. Returns attribute -> model -> table."""
    tables: dict[str, dict[str, ErrorTable]] = defaultdict(dict)
    pending = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            pending.append(json.loads(line))
    for r in pending:
        if r["kind"] == "clean":
            tables[r["attribute"]][r["model"]] = ErrorTable(float(r["error"]))
    for r in pending:
        if r["kind"] != "clean":
            try:
                t = tables[r["attribute"]][r["model"]]
            except KeyError:
                raise MetricError(f"no clean error for {r['model']} / {r['attribute']}") from None
            t.levels[(r["kind"], int(r["severity"]))] = float(r["error"])
    return dict(tables)
