"""
Evaluation artifacts: report.txt, report.xlsx, per_image.tsv, confusion.png, roc.png.
"""
from __future__ import annotations

from pathlib import Path
from typing import Dict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from smarc.metrics import EvalReport  # noqa: E402


def _confusion_frame(report: EvalReport) -> pd.DataFrame:
    names = report.class_names
    return pd.DataFrame(report.cls.confusion, index=[f"true_{n}" for n in names], columns=[f"pred_{n}" for n in names])


def _roc_frame(report: EvalReport) -> pd.DataFrame:
    rows = []
    for c, name in enumerate(report.class_names):
        pts = report.cls.roc.get(c)
        if pts is None:
            continue
        for fpr, tpr in zip(pts["fpr"], pts["tpr"]):
            rows.append({"class": name, "fpr": fpr, "tpr": tpr})
    return pd.DataFrame(rows, columns=["class", "fpr", "tpr"])


def write_xlsx(report: EvalReport, path: Path) -> Path:
    metrics = pd.DataFrame(list(report.metrics().items()), columns=["key", "value"])
    with pd.ExcelWriter(path, engine="openpyxl") as writer:
        metrics.to_excel(writer, index=False, sheet_name="metrics")
        report.per_class_table().to_excel(writer, index=False, sheet_name="per_class")
        report.per_image.to_excel(writer, index=False, sheet_name="per_image")
        _confusion_frame(report).to_excel(writer, sheet_name="confusion")
        _roc_frame(report).to_excel(writer, index=False, sheet_name="roc")

        ws = writer.book["metrics"]
        ws.column_dimensions["A"].width = 20
        ws.column_dimensions["B"].width = 18
    return path


def plot_confusion(report: EvalReport, path: Path) -> Path:
    cm = report.cls.confusion
    k = len(report.class_names)
    fig, ax = plt.subplots(figsize=(1.2 * k + 2, 1.2 * k + 1.5))
    ax.imshow(cm, cmap="Blues")
    ax.set_xticks(range(k), report.class_names, rotation=45, ha="right")
    ax.set_yticks(range(k), report.class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    top = cm.max() if cm.size else 0
    for i in range(k):
        for j in range(k):
            ax.text(j, i, str(int(cm[i, j])), ha="center", va="center", color="white" if cm[i, j] > top / 2 else "black")
    ax.set_title(f"{report.split}: accuracy {report.cls.accuracy:.4f}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_roc(report: EvalReport, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 5))
    for c, name in enumerate(report.class_names):
        pts = report.cls.roc.get(c)
        if pts is None:
            continue
        ax.plot(pts["fpr"], pts["tpr"], label=f"{name} (AUC {report.cls.auc[c]:.3f})")
    ax.plot([0, 1], [0, 1], linestyle="--", color="grey", linewidth=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.01)
    ax.legend(loc="lower right", fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def write_report(report: EvalReport, out_dir: str | Path) -> Dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "report_txt": out / "report.txt",
        "report_xlsx": out / "report.xlsx",
        "per_image": out / "per_image.tsv",
        "confusion": out / "confusion.png",
        "roc": out / "roc.png",
    }
    paths["report_txt"].write_text(report.to_text(), encoding="utf-8")
    report.per_image.to_csv(paths["per_image"], sep="\t", index=False, lineterminator="\n")
    write_xlsx(report, paths["report_xlsx"])
    plot_confusion(report, paths["confusion"])
    plot_roc(report, paths["roc"])
    return paths
