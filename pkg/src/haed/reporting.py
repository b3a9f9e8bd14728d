"""Run reports: summary tables (CSV + markdown) and trend plots.

`report` scans a run directory for eval reports and training metrics and
emits: a decoder-LM-weight sweep table, an adaptation comparison table,
and loss/perplexity/error trend plots (PNG plus a machine-readable CSV).
Reports opt into tables via their tags: table=lambda_sweep with a
`lambda` tag, or table=adaptation with a `row` tag.
"""

from __future__ import annotations

import json
import os

from .metrics import EvalReport

ADAPTATION_ROW_ORDER = ["AED", "AED+SF", "AED+DR", "HAED", "+Adapt", "++SF"]


def find_eval_reports(run_dir: str) -> list[EvalReport]:
    reports = []
    for root, _, files in os.walk(run_dir):
        for name in sorted(files):
            if name.startswith("eval_report") and name.endswith(".json"):
                reports.append(EvalReport.load(os.path.join(root, name)))
    return reports


def find_metrics_logs(run_dir: str) -> list[str]:
    paths = []
    for root, _, files in os.walk(run_dir):
        for name in sorted(files):
            if name == "metrics.jsonl":
                paths.append(os.path.join(root, name))
    return sorted(paths)


def _write_table(path_base: str, header: list[str], rows: list[list]) -> None:
    def fmt(v):
        if isinstance(v, float):
            return f"{v:.4f}"
        return "" if v is None else str(v)

    csv = ",".join(header) + "\n"
    csv += "".join(",".join(fmt(v) for v in row) + "\n" for row in rows)
    with open(path_base + ".csv", "w", encoding="utf-8") as f:
        f.write(csv)
    md = "| " + " | ".join(header) + " |\n"
    md += "|" + "|".join(["---"] * len(header)) + "|\n"
    md += "".join("| " + " | ".join(fmt(v) for v in row) + " |\n" for row in rows)
    with open(path_base + ".md", "w", encoding="utf-8") as f:
        f.write(md)


def lambda_sweep_table(reports: list[EvalReport]) -> tuple[list[str], list[list]]:
    rows = []
    for rep in reports:
        if rep.tags.get("table") != "lambda_sweep":
            continue
        rows.append(
            [
                float(rep.tags["lambda"]),
                rep.ppl,
                rep.overall.wer,
                rep.overall.token_error_rate,
                rep.config_fingerprint,
            ]
        )
    rows.sort(key=lambda r: r[0])
    return ["lambda", "ppl", "wer", "ter", "config"], rows


def adaptation_table(reports: list[EvalReport]) -> tuple[list[str], list[list]]:
    by_row: dict[str, dict] = {}
    for rep in reports:
        if rep.tags.get("table") != "adaptation":
            continue
        row = rep.tags.get("row", "?")
        domain = rep.tags.get("domain", "target")
        cell = by_row.setdefault(row, {})
        cell[domain + "_wer"] = rep.overall.wer
        cell[domain + "_ter"] = rep.overall.token_error_rate
    ordered = [r for r in ADAPTATION_ROW_ORDER if r in by_row]
    ordered += [r for r in sorted(by_row) if r not in ADAPTATION_ROW_ORDER]
    rows = [
        [
            r,
            by_row[r].get("target_wer"),
            by_row[r].get("target_ter"),
            by_row[r].get("general_wer"),
            by_row[r].get("general_ter"),
        ]
        for r in ordered
    ]
    return ["row", "target_wer", "target_ter", "general_wer", "general_ter"], rows


def trend_rows(metrics_path: str) -> list[dict]:
    rows = []
    with open(metrics_path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def report(run_dir: str, out_dir: str) -> dict[str, str]:
    """Emit every table/plot derivable from the artifacts under run_dir."""
    os.makedirs(out_dir, exist_ok=True)
    reports = find_eval_reports(run_dir)
    outputs: dict[str, str] = {}

    header, rows = lambda_sweep_table(reports)
    base = os.path.join(out_dir, "lambda_sweep")
    _write_table(base, header, rows)
    outputs["lambda_sweep"] = base + ".csv"

    header, rows = adaptation_table(reports)
    base = os.path.join(out_dir, "adaptation")
    _write_table(base, header, rows)
    outputs["adaptation"] = base + ".csv"

    trend_csv_rows: list[list] = []
    logs = find_metrics_logs(run_dir)
    for path in logs:
        run_name = os.path.relpath(os.path.dirname(path), run_dir)
        for row in trend_rows(path):
            trend_csv_rows.append(
                [
                    run_name,
                    row.get("step"),
                    row.get("total"),
                    row.get("dev_ppl"),
                    row.get("dev_wer"),
                    row.get("dev_ter"),
                ]
            )
    _write_table(
        os.path.join(out_dir, "trends"),
        ["run", "step", "loss", "dev_ppl", "dev_wer", "dev_ter"],
        trend_csv_rows,
    )
    outputs["trends"] = os.path.join(out_dir, "trends.csv")
    outputs["plot"] = _plot_trends(logs, run_dir, os.path.join(out_dir, "trends.png"))
    return outputs


def _plot_trends(logs: list[str], run_dir: str, out_path: str) -> str:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    for path in logs:
        name = os.path.relpath(os.path.dirname(path), run_dir)
        rows = trend_rows(path)
        steps = [r["step"] for r in rows if "total" in r]
        loss = [r["total"] for r in rows if "total" in r]
        axes[0].plot(steps, loss, label=name)
        ev = [(r["step"], r["dev_ppl"]) for r in rows if r.get("dev_ppl")]
        if ev:
            axes[1].plot([e[0] for e in ev], [e[1] for e in ev], marker="o", label=name)
        er = [(r["step"], r["dev_ter"]) for r in rows if r.get("dev_ter") is not None]
        if er:
            axes[2].plot([e[0] for e in er], [e[1] for e in er], marker="o", label=name)
    for ax, title in zip(axes, ["training loss", "dev decoder PPL", "dev token error"]):
        ax.set_title(title)
        ax.set_xlabel("step")
        if ax.lines:
            ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110, metadata={"Software": "haed"})
    plt.close(fig)
    return out_path
