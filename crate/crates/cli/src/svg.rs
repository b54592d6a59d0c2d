//! Minimal SVG heatmap for phase diagrams.

use std::fmt::Write as _;

use spinchern::geometry::PhaseDiagram;

const CELL: usize = 14;
const MARGIN: usize = 48;

fn color(value: Option<f64>) -> &'static str {
    match value.map(|v| v.round() as i64) {
        None => "#bbbbbb",
        Some(0) => "#9ecae1",
        Some(1) => "#c7e9c0",
        Some(2) => "#74c476",
        Some(3) => "#fdd0a2",
        Some(4) => "#fd8d3c",
        Some(v) if v < 0 => "#6a51a3",
        Some(_) => "#d94801",
    }
}

/// Axis 1 runs down the rows, axis 2 across the columns.
pub fn heatmap(diagram: &PhaseDiagram) -> String {
    let rows = diagram.cells.len();
    let cols = diagram.cells.first().map_or(0, |r| r.len());
    let (w, h) = (2 * MARGIN + cols * CELL, 2 * MARGIN + rows * CELL);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    for (i, row) in diagram.cells.iter().enumerate() {
        for (j, cell) in row.iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{}" width="{CELL}" height="{CELL}" fill="{}"><title>{}</title></rect>"#,
                MARGIN + j * CELL,
                MARGIN + i * CELL,
                color(cell.value),
                cell.value.map_or("error".to_string(), |v| format!("{v:.4}")),
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{} ({})</text>"#,
        MARGIN + cols * CELL / 2,
        h - MARGIN / 3,
        diagram.axis2.name,
        diagram.axis2.unit
    );
    let _ = writeln!(
        s,
        r#"<text x="{x}" y="{y}" font-size="12" text-anchor="middle" transform="rotate(-90 {x} {y})">{} ({})</text>"#,
        diagram.axis1.name,
        diagram.axis1.unit,
        x = MARGIN / 2,
        y = MARGIN + rows * CELL / 2,
    );
    s.push_str("</svg>\n");
    s
}
