"""CSV and aligned-markdown rendering for result tables."""

from __future__ import annotations

import csv
import io


def format_cell(value, digits=2):
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.{digits}f}"
    return str(value)


def render_markdown(headers, rows):
    """Aligned GitHub-style markdown table. Cells are pre-formatted strings."""
    table = [list(headers)] + [[str(c) for c in row] for row in rows]
    widths = [max(len(row[j]) for row in table) for j in range(len(headers))]
    out = []

    def line(cells):
        return "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) + " |"

    out.append(line(table[0]))
    out.append("|" + "|".join("-" * (w + 2) for w in widths) + "|")
    for row in table[1:]:
        out.append(line(row))
    return "\n".join(out) + "\n"


def render_csv(headers, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(headers)
    for row in rows:
        writer.writerow(["" if c is None else c for c in row])
    return buf.getvalue()


def write_table(path_base, headers, rows):
    """Write <path_base>.csv and <path_base>.md with identical content."""
    with open(str(path_base) + ".csv", "w", encoding="utf-8", newline="") as f:
        f.write(render_csv(headers, rows))
    with open(str(path_base) + ".md", "w", encoding="utf-8") as f:
        f.write(render_markdown(headers, [[str(c) if c is not None else "-" for c in r] for r in rows]))
