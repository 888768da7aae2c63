"""Reconstruction metrics, run reports and the three result-table layouts."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .autodiff import ConfigError
from .nn import ComplexityReport, Encoder

MISSING = "—"
NEG_INF_TEXT = "-inf"


class Nmse(NamedTuple):
    linear: float
    db: float


def nmse_with_exclusions(h, h_hat) -> tuple[Nmse, int]:
    """NMSE in the centered domain plus the number of zero-norm samples skipped."""
    h = np.asarray(h, dtype=np.float64)
    h_hat = np.asarray(h_hat, dtype=np.float64)
    if h.shape != h_hat.shape:
        raise ValueError(f"sample sets differ in shape: {h.shape} vs {h_hat.shape}")
    if h.ndim < 2:
        raise ValueError("expected a batch of samples along axis 0")
    n = h.shape[0]
    ref = (h - 0.5).reshape(n, -1)
    err = (h_hat - h).reshape(n, -1)
    power = np.einsum("ij,ij->i", ref, ref)
    keep = power > 0
    excluded = int(n - keep.sum())
    if not keep.any():
        raise ValueError("every ground-truth sample has zero norm")
    ratios = np.einsum("ij,ij->i", err[keep], err[keep]) / power[keep]
    linear = float(ratios.mean())
    db = 10.0 * math.log10(linear) if linear > 0 else -math.inf
    return Nmse(linear, db), excluded


def nmse(h, h_hat) -> Nmse:
    """Mean per-sample ‖Ĥ−H‖²/‖H−0.5‖²; exact recovery gives dB = -inf."""
    result, excluded = nmse_with_exclusions(h, h_hat)
    if excluded:
        warnings.warn(f"nmse: excluded {excluded} zero-norm sample(s)", RuntimeWarning, stacklevel=2)
    return result


def codeword_mse_values(v_teacher, v_student) -> float:
    v_teacher = np.asarray(v_teacher, dtype=np.float64)
    v_student = np.asarray(v_student, dtype=np.float64)
    if v_teacher.shape != v_student.shape:
        raise ConfigError(f"codeword shapes differ: {v_teacher.shape} vs {v_student.shape}")
    return float(np.mean((v_teacher - v_student) ** 2))


def codeword_mse(encoder_t: Encoder, encoder_s: Encoder, data, batch: int = 500) -> float:
    """Mean over samples of MSE(v_T, v_S); equal-length codewords make this the global mean."""
    from .distill import forward_values

    m_t, m_s = encoder_t.spec.codeword_size, encoder_s.spec.codeword_size
    if m_t != m_s:
        raise ConfigError(f"codeword sizes differ: teacher M={m_t}, student M={m_s}")
    x = getattr(data, "x", data)
    return codeword_mse_values(forward_values(encoder_t, x, batch), forward_values(encoder_s, x, batch))


# ---------------------------------------------------------------- reports

def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=_jsonable)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, (tuple, set)):
        return list(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _json_float(v):
    if v is None or (isinstance(v, float) and math.isinf(v) and v < 0):
        return None
    return float(v)


@dataclass
class ExperimentReport:
    run_id: str
    label: str
    plan: dict
    seed: int
    nmse_db: dict[str, float] = field(default_factory=dict)
    mse_cm_mid: dict[str, float | None] = field(default_factory=dict)
    mse_cm_end: dict[str, float | None] = field(default_factory=dict)
    complexity: ComplexityReport | None = None
    eta: str = ""
    loss_gt: list[float] = field(default_factory=list)
    loss_cm: list[float | None] = field(default_factory=list)
    seconds: float = 0.0
    config_hash: str = ""

    def __post_init__(self):
        if not self.config_hash:
            self.config_hash = config_hash(self.plan)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["nmse_db"] = {k: _json_float(v) for k, v in self.nmse_db.items()}
        d["complexity"] = None if self.complexity is None else asdict(self.complexity)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        d = dict(d)
        d["nmse_db"] = {k: (-math.inf if v is None else v) for k, v in d.get("nmse_db", {}).items()}
        if d.get("complexity") is not None:
            d["complexity"] = ComplexityReport(**d["complexity"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_jsonable)


# ---------------------------------------------------------------- tables

def fmt_nmse(v) -> str:
    if v is None:
        return MISSING
    if math.isinf(v) and v < 0:
        return NEG_INF_TEXT
    return f"{v:.2f}"


def fmt_mse(v) -> str:
    return MISSING if v is None else f"{v:.3f}"


def _fmt_k(n) -> str:
    return MISSING if n is None else f"{round(n / 1000)}K"


def _proportion(plan: dict) -> str:
    t, t_cm = int(plan.get("epochs", 0)), _mimic(plan)
    return f"{t_cm}-{t - t_cm}"


def _mimic(plan: dict) -> int:
    return int(plan.get("mimic_epochs", 0)) if plan.get("pipeline") == "codeword_mimic" else 0


@dataclass
class Table:
    layout: str
    columns: list[str]
    rows: list[list]  # machine values: float | int | str | None
    text_rows: list[list[str]]
    missing: int = 0

    def text(self) -> str:
        cells = [self.columns] + self.text_rows
        widths = [max(len(r[i]) for r in cells) for i in range(len(self.columns))]
        lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines)

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow(["" if _is_blank(v) else v for v in row])
        return buf.getvalue()

    def json(self) -> str:
        recs = [{c: (None if _is_blank(v) else v) for c, v in zip(self.columns, row)} for row in self.rows]
        return json.dumps({"layout": self.layout, "rows": recs}, indent=2)


def _is_blank(v) -> bool:
    return v is None or (isinstance(v, float) and math.isinf(v) and v < 0)


def _round(v, digits):
    if v is None or (isinstance(v, float) and math.isinf(v)):
        return v
    return round(float(v), digits)


def _scenarios(reports: Sequence[ExperimentReport]) -> list[str]:
    seen = []
    for r in reports:
        for s in list(r.nmse_db) + list(r.mse_cm_end):
            if s not in seen:
                seen.append(s)
    order = {"indoor": 0, "outdoor": 1}
    return sorted(seen, key=lambda s: (order.get(s, 2), s))


def _merge(reports: Iterable[ExperimentReport]) -> dict:
    """Combine reports that share a row key (e.g. one per scenario)."""
    merged: dict = {"nmse_db": {}, "mse_cm_mid": {}, "mse_cm_end": {}, "complexity": None}
    for r in reports:
        for key in ("nmse_db", "mse_cm_mid", "mse_cm_end"):
            merged[key].update({k: v for k, v in getattr(r, key).items() if v is not None})
        merged["complexity"] = merged["complexity"] or r.complexity
    return merged


def render_table(reports: Sequence[ExperimentReport], layout: str, *, grid: Sequence | None = None) -> Table:
    """Render reports in one of the three table layouts.

    ``table1`` rows are keyed by (eta, label), ``table2`` by mimic epochs
    (ascending) and ``table3`` by scheduler. ``grid`` lists the row keys that
    must appear; absent rows and empty cells print as "—" with a warning.
    """
    if layout not in ("table1", "table2", "table3"):
        raise ConfigError(f"unknown table layout {layout!r}")
    scen = _scenarios(reports) or ["indoor"]
    groups: dict = {}
    if layout == "table1":
        for r in reports:
            groups.setdefault((r.eta, r.label), []).append(r)
        keys = list(grid) if grid is not None else list(groups)
        columns = ["eta", "method", "mul", "params"] + [f"nmse_{s}" for s in scen]
    elif layout == "table2":
        for r in reports:
            groups.setdefault(_mimic(r.plan), []).append(r)
        keys = sorted(set(grid) | set(groups)) if grid is not None else sorted(groups)
        columns = ["mimic_explore"] + [c for s in scen for c in (f"nmse_{s}", f"mse_cm_end_{s}")]
    else:
        for r in reports:
            groups.setdefault(r.plan.get("alpha_scheduler", "cosine"), []).append(r)
        keys = list(grid) if grid is not None else [k for k in ("const", "linear", "cosine") if k in groups]
        columns = ["scheduler"] + [c for s in scen for c in (f"nmse_{s}", f"mse_cm_mid_{s}", f"mse_cm_end_{s}")]

    rows, text_rows, missing = [], [], 0
    epochs = next((int(r.plan.get("epochs", 0)) for r in reports), 0)
    for key in keys:
        m = _merge(groups.get(key, []))
        if layout == "table1":
            c = m["complexity"]
            row = [key[0], key[1], c.mul_count if c else None, c.param_count_equiv if c else None]
            text = [str(key[0]), str(key[1]), _fmt_k(row[2]), _fmt_k(row[3])]
            for s in scen:
                v = _round(m["nmse_db"].get(s), 2)
                row.append(v)
                text.append(fmt_nmse(v))
        elif layout == "table2":
            label = _proportion(groups[key][0].plan) if key in groups else f"{key}-{epochs - key}"
            row, text = [label], [label]
            for s in scen:
                v, c = _round(m["nmse_db"].get(s), 2), _round(m["mse_cm_end"].get(s), 3)
                row += [v, c]
                text += [fmt_nmse(v), fmt_mse(c)]
        else:
            row, text = [key], [key]
            for s in scen:
                v = _round(m["nmse_db"].get(s), 2)
                mid, end = _round(m["mse_cm_mid"].get(s), 3), _round(m["mse_cm_end"].get(s), 3)
                row += [v, mid, end]
                text += [fmt_nmse(v), fmt_mse(mid), fmt_mse(end)]
        missing += sum(t == MISSING for t in text)
        rows.append(row)
        text_rows.append(text)
    if missing:
        warnings.warn(f"render_table({layout}): {missing} missing cell(s) shown as {MISSING}",
                      RuntimeWarning, stacklevel=2)
    return Table(layout, columns, rows, text_rows, missing)


def parse_csv(text: str) -> list[dict]:
    """Read a rendered CSV back; numeric cells become floats, empty cells None."""
    out = []
    for rec in csv.DictReader(io.StringIO(text)):
        row = {}
        for k, v in rec.items():
            if v == "":
                row[k] = None
                continue
            try:
                row[k] = float(v)
            except ValueError:
                row[k] = v
        out.append(row)
    return out
