# tomoclass/utils/xlsx.py
"""Styled workbook sheets for report tables."""
from pathlib import Path
from typing import Any, Sequence

from openpyxl import Workbook
from openpyxl.styles import Alignment, Border, Font, PatternFill, Side
from openpyxl.utils import get_column_letter
from openpyxl.worksheet.worksheet import Worksheet

# ── Style helpers ──────────────────────────────────────────────────────────
HEADER_FILL = PatternFill("solid", fgColor="1E3A8A")          # navy
HEADER_FONT = Font(bold=True, color="FFFFFF", size=11)
ALT_FILL    = PatternFill("solid", fgColor="F8FAFC")          # slate-50
THIN        = Side(border_style="thin", color="CBD5E1")
BORDER      = Border(left=THIN, right=THIN, top=THIN, bottom=THIN)
LEFT        = Alignment(vertical="center", horizontal="left")
CENTER      = Alignment(wrap_text=True, vertical="center", horizontal="center")
NUMBER_FMT  = "0.00"


def render_table(ws: Worksheet, title: str, columns: Sequence[tuple[str, int]],
                 rows: Sequence[Sequence[Any]], row_offset: int = 1) -> int:
    """Title line + header row + data rows. Returns the next free row index."""
    ws.merge_cells(start_row=row_offset, start_column=1, end_row=row_offset, end_column=len(columns))
    cell = ws.cell(row=row_offset, column=1, value=title)
    cell.font = Font(bold=True, size=13, color="1E3A8A")
    cell.alignment = Alignment(horizontal="left", vertical="center", indent=1)
    ws.row_dimensions[row_offset].height = 26
    row_offset += 1

    for ci, (name, width) in enumerate(columns, start=1):
        c = ws.cell(row=row_offset, column=ci, value=name)
        c.fill = HEADER_FILL
        c.font = HEADER_FONT
        c.alignment = CENTER
        c.border = BORDER
        letter = get_column_letter(ci)
        ws.column_dimensions[letter].width = max(ws.column_dimensions[letter].width or 0, width)
    row_offset += 1

    for i, values in enumerate(rows, start=1):
        for ci, val in enumerate(values, start=1):
            c = ws.cell(row=row_offset, column=ci, value=val)
            c.alignment = LEFT
            c.border = BORDER
            if isinstance(val, float):
                c.number_format = NUMBER_FMT
            if i % 2 == 0:
                c.fill = ALT_FILL
        row_offset += 1
    return row_offset + 1


def save_workbook(sheets: Sequence[tuple[str, list[tuple]]], path: str | Path) -> None:
    """sheets: (sheet name, [(table title, columns, rows), ...])."""
    wb = Workbook()
    wb.remove(wb.active)
    for name, tables in sheets:
        ws = wb.create_sheet(title=name[:31])
        row = 1
        for title, columns, rows in tables:
            row = render_table(ws, title, columns, rows, row)
        ws.freeze_panes = "A3"
    wb.save(str(path))
