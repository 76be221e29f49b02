"""Render metrics CSVs as aligned text tables and static SVG line plots."""

import math


def read_csv(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    header = lines[0].split(",")
    return header, [dict(zip(header, ln.split(","))) for ln in lines[1:]]


def text_table(header, rows, max_rows=None):
    shown = rows if max_rows is None else rows[:max_rows]
    cells = [header] + [[row.get(h, "") for h in header] for row in shown]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    out = []
    for i, row in enumerate(cells):
        out.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        if i == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out) + "\n"


def summarize(rows):
    """Final cumulative error and probe range per arm, in file order."""
    arms = []
    per_arm = {}
    for row in rows:
        arm = row.get("arm", "")
        if arm not in per_arm:
            per_arm[arm] = []
            arms.append(arm)
        per_arm[arm].append(row)
    out = []
    for arm in arms:
        recs = per_arm[arm]
        final = recs[-1]
        src = [float(r["src_err"]) for r in recs
               if r.get("src_err") and r["src_err"] != "nan"]
        out.append({
            "arm": arm,
            "steps": str(len(recs)),
            "final_cum_err": final.get("cum_err", ""),
            "src_err_first": f"{src[0]:.6f}" if src else "nan",
            "src_err_last": f"{src[-1]:.6f}" if src else "nan",
        })
    return out


def svg_line_plot(series, path, width=720, height=300, ylabel="error"):
    """series: {label: [(x, y), ...]}; writes a standalone SVG file."""
    pad = 45
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    if not xs:
        raise ValueError("nothing to plot")
    x0, x1 = min(xs), max(xs) or 1
    y0, y1 = 0.0, max(max(ys), 1e-9)
    sx = lambda x: pad + (x - x0) / max(1e-12, x1 - x0) * (width - 2 * pad)
    sy = lambda y: height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)
    colors = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height-pad}" x2="{width-pad}" y2="{height-pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height-pad}" stroke="black"/>',
             f'<text x="{pad}" y="{pad-10}" font-size="11">{ylabel} (max {y1:.3f})</text>']
    for i, (label, pts) in enumerate(series.items()):
        color = colors[i % len(colors)]
        coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in pts
                          if not (math.isnan(x) or math.isnan(y)))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        parts.append(f'<text x="{width-pad-150}" y="{pad+14*i}" font-size="11" '
                     f'fill="{color}">{label}</text>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(parts) + "\n")


def render_report(csv_path, svg_path=None):
    header, rows = read_csv(csv_path)
    summary = summarize(rows)
    text = text_table(["arm", "steps", "final_cum_err", "src_err_first", "src_err_last"],
                      summary)
    if svg_path:
        series = {}
        for row in rows:
            series.setdefault(row["arm"], []).append(
                (float(row["step"]), float(row["cum_err"])))
        svg_line_plot(series, svg_path, ylabel="cumulative error")
    return text
