"""Artifact writers: CSV traces, JSON reports and rendered text summaries."""
import csv
import json
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np
from jinja2 import Environment, FileSystemLoader

from widthlab.harness import SweepReport
from widthlab.limits import DynamicsTrace
from widthlab.mlp import FiniteTrace
from widthlab.param import AbcdParam, Classification, format_fraction

TEMPLATE_DIR = Path(__file__).parent / "templates"


def _environment() -> Environment:
    return Environment(loader=FileSystemLoader(TEMPLATE_DIR), trim_blocks=True, lstrip_blocks=True,
                       keep_trailing_newline=True)


def write_json(data: Dict[str, Any], path: Path):
    """Write ``data`` with a single ``created`` timestamp field added."""
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"created": datetime.now(timezone.utc).isoformat(timespec="seconds"), **data}
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")


def _write_rows(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(x: float) -> str:
    return "" if not np.isfinite(x) else repr(float(x))


def write_finite_traces(traces: Sequence[FiniteTrace], path: Path):
    rows = ((tr.width, tr.trial, t, a, _fmt(tr.outputs[t, a]))
            for tr in traces for t in range(tr.outputs.shape[0]) for a in range(tr.outputs.shape[1]))
    _write_rows(path, ("width", "trial", "step", "input", "f_value"), rows)


def write_limit_trace(trace: DynamicsTrace, path: Path):
    stderr = trace.stderr if trace.stderr is not None else np.zeros_like(trace.outputs)
    rows = ((t, a, _fmt(trace.outputs[t, a]), _fmt(stderr[t, a]))
            for t in range(trace.outputs.shape[0]) for a in range(trace.outputs.shape[1]))
    _write_rows(path, ("step", "input", "f_value", "mc_stderr"), rows)


def write_kernels(kernels: np.ndarray, path: Path):
    """Per-step kernels (T+1, N, N) as step, i, j, value rows."""
    T1, N, _ = kernels.shape
    rows = ((t, i, j, _fmt(kernels[t, i, j])) for t in range(T1) for i in range(N) for j in range(N))
    _write_rows(path, ("step", "i", "j", "value"), rows)


def tracked_inputs(report: SweepReport) -> List[int]:
    """Held-out inputs, or every input when nothing is held out."""
    mask = report.config.dataset().train_mask
    held_out = [int(a) for a in np.flatnonzero(mask == 0)]
    return held_out or list(range(mask.size))


def write_sweep(report: SweepReport, out_dir: Path) -> List[Path]:
    """sweep.json plus one sweep_input_{k}.csv per tracked input."""
    written = [out_dir / "sweep.json"]
    write_json(report.to_dict(), written[0])
    for k in tracked_inputs(report):
        rows: List[Sequence[Any]] = []
        for r in report.results:
            rows += [(t, r.width, _fmt(r.mean[t, k]), _fmt(r.std[t, k]))
                     for t in range(r.mean.shape[0])]
        rows += [(t, "limit", _fmt(report.limit.outputs[t, k]),
                  _fmt(report.limit.stderr[t, k] if report.limit.stderr is not None else 0.0))
                 for t in range(report.limit.outputs.shape[0])]
        path = out_dir / f"sweep_input_{k}.csv"
        _write_rows(path, ("step", "width", "mean", "std"), rows)
        written.append(path)
    return written


def render_classification(param: AbcdParam, result: Classification) -> str:
    layers = [{"l": l, **{key: format_fraction(v)
                          for key, v in zip("abcde", param.layer(l))},
               "r": format_fraction(result.r_values.per_layer[l - 1])}
              for l in range(1, param.L + 2)]
    return _environment().get_template("classification.txt.j2").render(
        param=param, result=result, layers=layers, r=format_fraction(result.r))


def render_sweep_summary(report: SweepReport, files: Optional[Sequence[Path]] = None) -> str:
    data = report.to_dict()
    return _environment().get_template("sweep_summary.txt.j2").render(
        report=data, results=data["results"], files=[str(p) for p in files or ()])
