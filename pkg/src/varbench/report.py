"""Report files: metric CSVs, a markdown summary and PNG figures."""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from pathlib import Path

import numpy as np

REPORT_COLUMNS = ("dataset", "recommender", "defense", "attack", "metric", "K", "value")
ATTACK_COLUMNS = ("dataset", "defense", "attack", "origin", "target", "items", "metric", "value")
FAILURE_COLUMNS = ("dataset", "recommender", "defense", "attack", "error")


def _fmt(v: float) -> str:
    return repr(float(v))


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    try:
        path.write_text(buf.getvalue())
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def report_rows(result) -> list[tuple]:
    from .pipeline import METRICS

    rows = []
    for cell in sorted((c for c in result.cells if c.ok), key=lambda c: c.key):
        for metric in METRICS:
            for K in sorted(result.config.evaluation.ks):
                rows.append((*cell.key, metric, K, _fmt(cell.values[(metric, K)])))
    return rows


def attack_rows(result) -> list[tuple]:
    rows = []
    for a in sorted(result.attacks, key=lambda a: (a.dataset, a.defense, a.attack)):
        head = (a.dataset, a.defense, a.attack, a.origin, a.target, a.n_items)
        rows.append((*head, "SR", _fmt(a.sr)))
        rows.append((*head, "FL", _fmt(a.fl)))
        rows.append((*head, "L2", _fmt(a.mean_l2)))
    return rows


def markdown_summary(result) -> str:
    """One table per <dataset, recommender, defense>; the maximum of each column is bold."""
    from .pipeline import CLEAN, METRICS

    ks = sorted(result.config.evaluation.ks)
    cols = [(m, K) for K in ks for m in METRICS if m != "CHR"]
    groups = defaultdict(list)
    for c in result.cells:
        groups[(c.dataset, c.recommender, c.defense)].append(c)
    lines = []
    plan = result.plan
    if plan is not None:
        lines += [
            "# Category push summary", "",
            f"Origin class {plan.origin} (clean CHR@50 {plan.origin_chr:.4f}) pushed toward "
            f"target class {plan.target} (clean CHR@50 {plan.target_chr:.4f}, ratio {plan.ratio:.2f}).", "",
        ]
    for key in sorted(groups):
        cells = sorted(groups[key], key=lambda c: (c.attack != CLEAN, c.attack))
        ok = [c for c in cells if c.ok]
        best = {col: max(c.values[col] for c in ok) for col in cols} if ok else {}
        lines.append(f"## {key[0]} / {key[1]} / {key[2]}")
        lines.append("")
        lines.append("| attack | " + " | ".join(f"{m}@{K}" for m, K in cols) + " |")
        lines.append("|---|" + "---|" * len(cols))
        for c in cells:
            if not c.ok:
                lines.append(f"| {c.attack} | FAILED: {c.error} |" + " |" * (len(cols) - 1))
                continue
            vals = []
            for col in cols:
                s = f"{c.values[col]:.4f}"
                vals.append(f"**{s}**" if c.values[col] == best[col] else s)
            lines.append(f"| {c.attack} | " + " | ".join(vals) + " |")
        lines.append("")
    if result.attacks:
        lines += ["## Attack success and feature loss", "",
                  "| defense | attack | items | SR | FL | mean L2 |", "|---|---|---|---|---|---|"]
        for a in sorted(result.attacks, key=lambda a: (a.defense, a.attack)):
            lines.append(f"| {a.defense} | {a.attack} | {a.n_items} | {a.sr:.4f} | {a.fl:.6f} | {a.mean_l2:.4f} |")
        lines.append("")
    return "\n".join(lines)


def render_figures(result, out: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .pipeline import CLEAN

    out.mkdir(parents=True, exist_ok=True)
    paths = []
    ok = [c for c in result.cells if c.ok]
    defenses = sorted({c.defense for c in ok})
    recs = sorted({c.recommender for c in ok})
    attacks = sorted({c.attack for c in ok}, key=lambda a: (a != CLEAN, a))
    for K in sorted(result.config.evaluation.ks):
        fig, axes = plt.subplots(1, max(len(defenses), 1), figsize=(4.5 * max(len(defenses), 1), 3.6), squeeze=False)
        width = 0.8 / max(len(attacks), 1)
        for ax, d in zip(axes[0], defenses):
            for a_i, a in enumerate(attacks):
                vals = []
                for r in recs:
                    hit = [c for c in ok if (c.defense, c.recommender, c.attack) == (d, r, a)]
                    vals.append(hit[0].values[("CHR_x100", K)] if hit else np.nan)
                ax.bar(np.arange(len(recs)) + a_i * width, vals, width, label=a)
            ax.set_xticks(np.arange(len(recs)) + width * (len(attacks) - 1) / 2)
            ax.set_xticklabels(recs)
            ax.set_title(d)
            ax.set_ylabel(f"origin CHR@{K} (x100)")
        axes[0][0].legend(fontsize=7)
        fig.tight_layout()
        p = out / f"chr_at_{K}.png"
        fig.savefig(p, dpi=100, metadata={"Software": None})
        plt.close(fig)
        paths.append(p)

    if result.attacks:
        fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
        labels = sorted({a.attack for a in result.attacks})
        width = 0.8 / max(len(defenses), 1)
        for d_i, d in enumerate(sorted({a.defense for a in result.attacks})):
            row = {a.attack: a for a in result.attacks if a.defense == d}
            x = np.arange(len(labels)) + d_i * width
            axes[0].bar(x, [row[l].sr if l in row else np.nan for l in labels], width, label=d)
            axes[1].bar(x, [row[l].fl if l in row else np.nan for l in labels], width, label=d)
        for ax, title in zip(axes, ("success rate", "feature loss")):
            ax.set_xticks(np.arange(len(labels)) + width * (len(defenses) - 1) / 2)
            ax.set_xticklabels(labels)
            ax.set_title(title)
        axes[1].set_yscale("log")
        axes[0].legend(fontsize=7)
        fig.tight_layout()
        p = out / "attacks.png"
        fig.savefig(p, dpi=100, metadata={"Software": None})
        plt.close(fig)
        paths.append(p)
    return paths


def emit_report(result, out_dir, figures: bool = True) -> dict[str, Path]:
    if not any(c.ok for c in result.cells):
        raise ValueError("no completed cell to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"report": out / "report.csv", "attacks": out / "attack_report.csv", "summary": out / "summary.md"}
    _write_csv(paths["report"], REPORT_COLUMNS, report_rows(result))
    _write_csv(paths["attacks"], ATTACK_COLUMNS, attack_rows(result))
    failures = [(*c.key, c.error) for c in sorted(result.cells, key=lambda c: c.key) if not c.ok]
    if failures:
        paths["failures"] = out / "failures.csv"
        _write_csv(paths["failures"], FAILURE_COLUMNS, failures)
    paths["summary"].write_text(markdown_summary(result))
    if figures:
        for p in render_figures(result, out / "figures"):
            paths[p.stem] = p
    return paths
