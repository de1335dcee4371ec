//! 2-D scatter plots as standalone SVG.

use std::fmt::Write as _;

use nalgebra::DMatrix;

const SIZE: f64 = 480.0;
const MARGIN: f64 = 24.0;
const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

/// One circle per row of `points` (n x 2), filled by class.
pub fn scatter(points: &DMatrix<f64>, labels: &[usize], title: &str) -> String {
    let range = |col: usize| {
        let c = points.column(col);
        let (lo, hi) = (c.min(), c.max());
        (lo, if hi > lo { hi - lo } else { 1.0 })
    };
    let (x0, xs) = range(0);
    let (y0, ys) = range(1);
    let span = SIZE - 2.0 * MARGIN;

    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    )
    .unwrap();
    writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(
        out,
        r#"<text x="{MARGIN}" y="16" font-family="sans-serif" font-size="12">{title}</text>"#
    )
    .unwrap();
    for (i, &label) in labels.iter().enumerate() {
        let x = MARGIN + (points[(i, 0)] - x0) / xs * span;
        // SVG y grows downwards
        let y = SIZE - MARGIN - (points[(i, 1)] - y0) / ys * span;
        let fill = PALETTE[label % PALETTE.len()];
        writeln!(
            out,
            r#"<circle cx="{x:.2}" cy="{y:.2}" r="2.5" fill="{fill}" fill-opacity="0.7"/>"#
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    out
}
