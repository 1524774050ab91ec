"""
Ablation table exports: CSV, JSON summary, Excel and PDF
"""
import math
from io import BytesIO

from reportlab.lib import colors
from reportlab.lib.enums import TA_CENTER
from reportlab.lib.pagesizes import landscape, letter
from reportlab.lib.styles import ParagraphStyle, getSampleStyleSheet
from reportlab.lib.units import inch
from reportlab.platypus import Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle

from extensions import logger
from utils.serialization import atomic_write_bytes, atomic_write_text, canonical_json, write_json


def format_metric(value):
    """Cells as short strings; failed medians show a dash"""
    if isinstance(value, float):
        if math.isnan(value):
            return "-"
        return f"{value:.3f}"
    return str(value)


def write_csv(table, path, config_echo=None):
    """CSV of the grid; the first line is a '#' comment holding the config echo"""
    header = f"# config: {canonical_json(config_echo)}\n" if config_echo is not None else ''
    atomic_write_text(path, header + table.to_csv(index=False))


def table_records(table):
    out = []
    for record in table.to_dict(orient='records'):
        out.append({k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in record.items()})
    return out


def write_summary(table, path, config_echo, axes, seeds):
    medians = table[table['seed'] == 'median']
    failed = table[(table['seed'] != 'median') & (table['status'] == 'failed')]
    write_json(path, {
        'config': config_echo,
        'axes': axes,
        'seeds': list(seeds),
        'rows': int((table['seed'] != 'median').sum()),
        'medians': table_records(medians),
        'failed': table_records(failed[['cell', 'seed', 'error']]),
    })


def write_xlsx(table, path):
    buffer = BytesIO()
    table.to_excel(buffer, index=False, sheet_name='ablation', engine='openpyxl')
    atomic_write_bytes(path, buffer.getvalue())
    logger.info(f"Ablation workbook written to {path}")


def generate_ablation_pdf(table, title="Ablation grid: medians over seeds"):
    """Landscape PDF with one table of the median rows"""
    buffer = BytesIO()
    doc = SimpleDocTemplate(buffer, pagesize=landscape(letter), topMargin=0.4*inch, bottomMargin=0.4*inch,
                            leftMargin=0.3*inch, rightMargin=0.3*inch)
    styles = getSampleStyleSheet()
    title_style = ParagraphStyle(
        'GridTitle',
        parent=styles['Heading1'],
        fontSize=14,
        textColor=colors.HexColor('#1a1a1a'),
        spaceAfter=8,
        alignment=TA_CENTER
    )

    medians = table[table['seed'] == 'median'].drop(columns=['seed', 'error'])
    columns = list(medians.columns)
    table_data = [columns] + [[format_metric(v) for v in row] for row in medians.itertuples(index=False)]

    col_width = 10.4 * inch / max(len(columns), 1)
    grid = Table(table_data, colWidths=[col_width] * len(columns), repeatRows=1)
    grid.setStyle(TableStyle([
        ('BACKGROUND', (0, 0), (-1, 0), colors.HexColor('#f0f0f0')),
        ('FONTNAME', (0, 0), (-1, 0), 'Helvetica-Bold'),
        ('FONTNAME', (0, 1), (-1, -1), 'Helvetica'),
        ('FONTSIZE', (0, 0), (-1, -1), 7),
        ('ALIGN', (0, 0), (-1, -1), 'CENTER'),
        ('VALIGN', (0, 0), (-1, -1), 'MIDDLE'),
        ('GRID', (0, 0), (-1, -1), 0.5, colors.HexColor('#cccccc')),
    ]))

    doc.build([Paragraph(title, title_style), Spacer(1, 0.15*inch), grid])
    buffer.seek(0)
    return buffer


def write_pdf(table, path):
    atomic_write_bytes(path, generate_ablation_pdf(table).getvalue())
    logger.info(f"Ablation report written to {path}")
