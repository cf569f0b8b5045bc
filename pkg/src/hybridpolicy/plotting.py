"""SVG rendering for metrics logs, sweeps and traces.

Output bytes are stable for a given input: the SVG id salt is fixed and the
date metadata is dropped.
"""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

HASH_SALT = "hybridpolicy"


class PlotError(ValueError):
    pass


def read_csv(path) -> tuple[list[str], list[dict]]:
    """Rows of a CSV, skipping ``#`` comment lines. Empty files are an error."""
    lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    if not lines:
        raise PlotError(f"{path}: empty CSV")
    reader = csv.DictReader(lines)
    header = reader.fieldnames or []
    rows = list(reader)
    if not rows:
        raise PlotError(f"{path}: CSV has a header but no rows")
    for i, row in enumerate(rows):
        if None in row or any(v is None for v in row.values()):
            raise PlotError(f"{path}: row {i + 2} does not match the header")
    return header, rows


def _floats(rows, key, path):
    try:
        return [float(r[key]) for r in rows]
    except (KeyError, ValueError) as exc:
        raise PlotError(f"{path}: bad value in column {key!r}: {exc}") from None


def config_hash(path) -> str:
    """The ``# config_hash=...`` value from a CSV header, or an empty string."""
    for line in Path(path).read_text().splitlines():
        if line.startswith("# config_hash="):
            return line.split("=", 1)[1].strip()
    return ""


def _save(fig, out, source):
    out = Path(out)
    meta = {"Date": None}
    h = config_hash(source)
    if h:
        meta["Description"] = f"config_hash={h}"
    with matplotlib.rc_context({"svg.hashsalt": HASH_SALT}):
        fig.savefig(out, format="svg", metadata=meta)
    plt.close(fig)
    return out


def plot_metrics(path, out_dir) -> list[Path]:
    """Loss curves from a training metrics CSV, on linear and log axes."""
    header, rows = read_csv(path)
    steps = _floats(rows, "step", path)
    outs = []
    for scale in ("linear", "log"):
        fig, ax = plt.subplots(figsize=(6, 4))
        for key in ("l_diff", "l_plan", "l_total"):
            ys = _floats(rows, key, path)
            if scale == "log" and min(ys) <= 0:
                continue
            ax.plot(steps, ys, label=key, linewidth=0.8)
        sw = [s for s, a, b in zip(steps, rows, rows[1:]) if a["source"] != b["source"]]
        for s in sw:
            ax.axvline(s + 1, color="grey", linestyle="--", linewidth=0.8)
        ax.set_yscale(scale)
        ax.set_xlabel("training step")
        ax.set_ylabel("loss")
        ax.legend()
        outs.append(_save(fig, Path(out_dir) / f"{Path(path).stem}_loss_{scale}.svg", path))
    return outs


def plot_sweep(path, out_dir, key: str) -> list[Path]:
    header, rows = read_csv(path)
    xs = _floats(rows, key, path)
    ys = _floats(rows, "success", path)
    lo = _floats(rows, "ci_low", path)
    hi = _floats(rows, "ci_high", path)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.errorbar(xs, ys, yerr=[[y - a for y, a in zip(ys, lo)], [b - y for y, b in zip(ys, hi)]],
                marker="o", capsize=3)
    if key == "n_bins":
        ax.set_xscale("log", base=2)
    ax.set_xlabel(key)
    ax.set_ylabel("success rate")
    ax.set_ylim(0, 1)
    outs = [_save(fig, Path(out_dir) / f"{Path(path).stem}.svg", path)]
    if "latency_ms" in header:
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(xs, _floats(rows, "latency_ms", path), marker="o")
        ax.set_xlabel(key)
        ax.set_ylabel("latency per chunk (ms)")
        outs.append(_save(fig, Path(out_dir) / f"{Path(path).stem}_latency.svg", path))
    return outs


def plot_trace(path, out_dir) -> list[Path]:
    header, rows = read_csv(path)
    chunks = _floats(rows, "chunk", path)
    clock = _floats(rows, "clock_ms", path)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.step(chunks, clock, where="post")
    planned = [c for c, r in zip(chunks, rows) if r["planned"] == "1"]
    ax.plot(planned, [clock[int(c)] for c in planned], "o", label="planner call")
    ax.set_xlabel("chunk")
    ax.set_ylabel("simulated clock (ms)")
    ax.legend()
    return [_save(fig, Path(out_dir) / f"{Path(path).stem}.svg", path)]


def plot_csv(path, out_dir) -> list[Path]:
    """Dispatch on the CSV header."""
    header, _ = read_csv(path)
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    if "l_diff" in header:
        return plot_metrics(path, out_dir)
    if "clock_ms" in header:
        return plot_trace(path, out_dir)
    for key in ("n_bins", "m_factor", "strategy"):
        if key in header and "success" in header:
            if key == "strategy":
                return plot_strategy(path, out_dir)
            return plot_sweep(path, out_dir, key)
    raise PlotError(f"{path}: unrecognised CSV header {header}")


def plot_strategy(path, out_dir) -> list[Path]:
    header, rows = read_csv(path)
    names = sorted({r["strategy"] for r in rows})
    means = []
    for n in names:
        vals = [float(r["success"]) for r in rows if r["strategy"] == n]
        means.append(sum(vals) / len(vals))
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.bar(names, means)
    ax.set_ylabel("mean success rate")
    ax.set_ylim(0, 1)
    return [_save(fig, Path(out_dir) / f"{Path(path).stem}.svg", path)]
