"""Report emission: aligned text tables next to JSON/CSV twins, plus static plots.

Numbers go into the JSON and CSV files unrounded, straight from the run
manifests; only the text table rounds for display.
"""

from __future__ import annotations

import csv
import json
import math
import time
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

REPORT_VERSION = 1


def _cell(value, digits: int) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return f"{value:.{digits}f}"
    return str(value)


def format_table(columns: list[str], rows: list[list], digits: int = 4) -> str:
    text = [[_cell(v, digits) for v in row] for row in rows]
    widths = [max([len(c)] + [len(r[i]) for r in text]) for i, c in enumerate(columns)]
    line = "  ".join(c.ljust(w) for c, w in zip(columns, widths))
    rule = "  ".join("-" * w for w in widths)
    body = ["  ".join(v.rjust(w) if i else v.ljust(w) for i, (v, w) in enumerate(zip(r, widths))) for r in text]
    return "\n".join([line, rule, *body]) + "\n"


def write_table(stem, title: str, columns: list[str], rows: list[list], provenance: dict) -> list[Path]:
    """Write ``stem.txt``, ``stem.json`` and ``stem.csv`` holding the same table."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    txt, js, cs = stem.with_suffix(".txt"), stem.with_suffix(".json"), stem.with_suffix(".csv")
    header = f"{title}\n" + "".join(f"# {k}: {v}\n" for k, v in provenance.items() if not isinstance(v, (dict, list)))
    txt.write_text(header + "\n" + format_table(columns, rows))
    doc = {
        "report_version": REPORT_VERSION,
        "title": title,
        "provenance": provenance,
        "columns": columns,
        "rows": [dict(zip(columns, r)) for r in rows],
    }
    js.write_text(json.dumps(doc, indent=2) + "\n")
    with open(cs, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        w.writerows([["" if v is None else v for v in r] for r in rows])
    return [txt, js, cs]


def _block_text(block: dict) -> str:
    lines = [f"== {block['command']} @ {block['time']}"]
    for k, v in block.items():
        if k in ("command", "time"):
            continue
        if isinstance(v, list) and v and isinstance(v[0], float):
            v = "[" + ", ".join(f"{x:.4g}" for x in v) + "]"
        elif isinstance(v, float):
            v = f"{v:.6g}"
        lines.append(f"  {k}: {v}")
    return "\n".join(lines) + "\n"


def append_block(out_dir, command: str, payload: dict) -> tuple[Path, Path]:
    """Append one result block to ``report.txt`` and ``report.jsonl`` in ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    block = {"command": command, "time": time.strftime("%Y-%m-%dT%H:%M:%S"), **payload}
    txt, jl = out / "report.txt", out / "report.jsonl"
    with open(txt, "a") as fh:
        fh.write(_block_text(block))
    with open(jl, "a") as fh:
        fh.write(json.dumps(block) + "\n")
    return txt, jl


# --------------------------------------------------------------------------- alpha sweep


def sweep_rows(cells: list[dict], alphas) -> tuple[list[str], list[list]]:
    """Two rows (with / without class-wise noising), one teacher/student column pair per alpha."""
    columns = ["noising"]
    for a in alphas:
        columns += [f"teacher a={a:g}", f"student a={a:g}"]
    rows = []
    for class_wise, label in ((True, "class-wise"), (False, "pixel-wise")):
        row: list = [label]
        for a in alphas:
            hit = [c for c in cells if c["class_wise"] == class_wise and c["alpha"] == a]
            row += [hit[0]["teacher_miou"], hit[0]["student_miou"]] if hit else [None, None]
        rows.append(row)
    return columns, rows


def plot_sweep(cells: list[dict], alphas, path, baseline: float | None = None) -> Path:
    alphas = sorted(alphas)
    positive = [a for a in alphas if a > 0]
    fig, ax = plt.subplots(figsize=(6.0, 3.8))
    styles = {True: ("tab:blue", "class-wise"), False: ("tab:orange", "pixel-wise")}
    for class_wise, (color, label) in styles.items():
        for role, marker, ls in (("teacher", "o", "-"), ("student", "s", "--")):
            pts = sorted((c["alpha"], c[f"{role}_miou"]) for c in cells if c["class_wise"] == class_wise)
            if pts:
                xs, ys = zip(*pts)
                ax.plot(xs, ys, ls, marker=marker, color=color, label=f"{role}, {label}")
    if baseline is not None:
        ax.axhline(baseline, color="gray", lw=1, ls=":", label="RGB baseline")
    if 0 in alphas and positive:
        ax.set_xscale("symlog", linthresh=min(positive))
    elif positive:
        ax.set_xscale("log")
    ax.set_xlabel("label noise scale alpha")
    ax.set_ylabel("val mIoU")
    ax.legend(fontsize=7, frameon=False)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_curves(histories: dict[str, list[dict]], path) -> Path:
    """Val mIoU against iteration for several runs (records from metrics files)."""
    fig, ax = plt.subplots(figsize=(6.0, 3.8))
    for name, records in histories.items():
        pts = [(r["iter"], r["val_miou"]) for r in records if "val_miou" in r]
        if pts:
            xs, ys = zip(*pts)
            ax.plot(xs, ys, marker=".", label=name)
    ax.set_xlabel("iteration")
    ax.set_ylabel("val mIoU")
    ax.legend(fontsize=7, frameon=False)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
