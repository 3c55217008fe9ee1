"""Campaign report emission: JSON evidence, CSV matrix, and a plain-text
table mirroring the operator/application matrix with `$` / `×` legend
symbols and lettered footnotes for qualifiers."""

from __future__ import annotations

import csv
import io
import json
import string
from pathlib import Path

from . import ZrAuditError
from .orchestrator import CampaignReport, Classification, Qualifier

ROAMING_TEXT = {
    "yes": "Yes",
    "no": "No",
    "not-offered": "×",
    "indeterminate": "?",
}

CLASSIFICATION_TEXT = {
    Classification.IP_ONLY: "IP",
    Classification.HOST_ONLY: "Host",
    Classification.IP_AND_HOST: "IP, Host",
    Classification.FULLY_BILLED: "$",
    Classification.NOT_AVAILABLE: "×",
    Classification.UNKNOWN: "ZR",
    Classification.INDETERMINATE: "?",
}

QUALIFIER_TEXT = {
    Qualifier.IPV4_ONLY: "IPv4 only",
    Qualifier.HTTPS_ONLY: "HTTPS only",
    Qualifier.TCP_ONLY: "TCP only",
    Qualifier.UNKNOWN_MECHANISM: "zero-rated, classification mechanism unknown",
    Qualifier.PARTIAL: "applies to part of the tested protocol/IP-version matrix",
}

LEGEND = (
    "$ traffic fully billed.  × not part of zero-rating tariff.  "
    "? indeterminate."
)


class IoFailure(ZrAuditError):
    pass


def render_text(report: CampaignReport) -> str:
    """Operator-by-application plain-text matrix; deterministic for a given report."""
    footnotes: list[Qualifier] = []

    def cell_text(verdict) -> str:
        text = CLASSIFICATION_TEXT[verdict.classification]
        for qualifier in verdict.qualifiers:
            if qualifier not in footnotes:
                footnotes.append(qualifier)
            text += f"^{string.ascii_lowercase[footnotes.index(qualifier)]}"
        return text

    header = ["Operator", "Roaming", *report.applications]
    rows = [header]
    for op in report.operators:
        by_app = {v.application: v for v in op.verdicts}
        row = [op.operator, ROAMING_TEXT.get(op.roaming, "?")]
        for app in report.applications:
            verdict = by_app.get(app)
            row.append(cell_text(verdict) if verdict is not None else "×")
        rows.append(row)

    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = []
    for index, row in enumerate(rows):
        lines.append("  ".join(col.ljust(widths[i]) for i, col in enumerate(row)).rstrip())
        if index == 0:
            lines.append("  ".join("-" * widths[i] for i in range(len(header))))
    lines.append("")
    lines.append(LEGEND)
    for index, qualifier in enumerate(footnotes):
        lines.append(f"^{string.ascii_lowercase[index]} {QUALIFIER_TEXT[qualifier]}.")
    return "\n".join(lines) + "\n"


def render_json(report: CampaignReport, normalize_timestamps: bool = False) -> str:
    return json.dumps(
        report.to_dict(normalize_timestamps=normalize_timestamps),
        indent=2,
        sort_keys=True,
    ) + "\n"


def render_csv(report: CampaignReport) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(
        ["operator", "application", "classification", "qualifiers", "roaming"]
    )
    for op in report.operators:
        for verdict in op.verdicts:
            writer.writerow([
                op.operator,
                verdict.application,
                verdict.classification.value,
                ";".join(q.value for q in verdict.qualifiers),
                op.roaming,
            ])
    return buffer.getvalue()


def emit_reports(
    report: CampaignReport,
    directory: str | Path,
    formats: tuple[str, ...] = ("json", "csv", "text"),
    normalize_timestamps: bool = False,
) -> dict[str, Path]:
    renderers = {
        "json": ("report.json", lambda: render_json(report, normalize_timestamps)),
        "csv": ("report.csv", lambda: render_csv(report)),
        "text": ("report.txt", lambda: render_text(report)),
    }
    unknown = set(formats) - set(renderers)
    if unknown:
        raise IoFailure(f"unknown report formats: {sorted(unknown)}")
    directory = Path(directory)
    written: dict[str, Path] = {}
    try:
        directory.mkdir(parents=True, exist_ok=True)
        for fmt in formats:
            name, render = renderers[fmt]
            path = directory / name
            path.write_text(render(), encoding="utf-8")
            written[fmt] = path
    except OSError as exc:
        raise IoFailure(f"cannot write reports to {directory}: {exc}") from exc
    return written


def load_json_report(path: str | Path) -> CampaignReport:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise IoFailure(f"cannot read report {path}: {exc}") from exc
    return CampaignReport.from_dict(raw)
