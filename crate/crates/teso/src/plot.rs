//! Static plot files: grouped bar charts as SVG and mask grids as PNG.

use std::fmt::Write as _;

use crate::dataset_io::encode_png;

/// One group of bars sharing an x-axis label.
#[derive(Clone, Debug, PartialEq)]
pub struct BarGroup {
    pub label: String,
    pub values: Vec<f64>,
}

const PALETTE: [&str; 6] = ["#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#b07aa1"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grouped bar chart; `series` names the bars within each group.
pub fn bar_chart_svg(title: &str, y_label: &str, series: &[&str], groups: &[BarGroup]) -> String {
    let (w, h, left, bottom, top) = (640.0, 360.0, 60.0, 50.0, 40.0);
    let plot_h = h - bottom - top;
    let vals = groups.iter().flat_map(|g| g.values.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = vals.fold((0.0f64, 0.0f64), |(a, b), v| (a.min(v), b.max(v)));
    let span = if hi - lo > 0.0 { hi - lo } else { 1.0 };
    let y = |v: f64| top + plot_h * (hi - v) / span;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, w / 2.0, esc(title));
    let _ = writeln!(s, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">{}</text>"#, h / 2.0, h / 2.0, esc(y_label));
    for k in 0..=4 {
        let v = lo + span * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r##"<line x1="{left}" x2="{}" y1="{yy:.1}" y2="{yy:.1}" stroke="#ddd"/><text x="{}" y="{:.1}" text-anchor="end">{v:.1}</text>"##,
            w - 10.0,
            left - 4.0,
            y(v) + 4.0,
            yy = y(v)
        );
    }
    let group_w = (w - left - 10.0) / groups.len().max(1) as f64;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    for (gi, g) in groups.iter().enumerate() {
        let x0 = left + gi as f64 * group_w + group_w * 0.1;
        for (si, &v) in g.values.iter().enumerate() {
            let v = if v.is_finite() { v } else { 0.0 };
            let (y1, y2) = (y(v.max(0.0)), y(v.min(0.0)));
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{y1:.1}" width="{bar_w:.1}" height="{:.1}" fill="{}"><title>{} {}: {v:.3}</title></rect>"#,
                x0 + si as f64 * bar_w,
                (y2 - y1).max(0.5),
                PALETTE[si % PALETTE.len()],
                esc(&g.label),
                esc(series.get(si).copied().unwrap_or(""))
            );
        }
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, x0 + group_w * 0.4, h - bottom + 18.0, esc(&g.label));
    }
    for (si, name) in series.iter().enumerate() {
        let lx = left + 10.0 + si as f64 * 130.0;
        let _ = writeln!(
            s,
            r#"<rect x="{lx}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            h - 18.0,
            PALETTE[si % PALETTE.len()],
            lx + 14.0,
            h - 9.0,
            esc(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// RGB tile of `height x width` pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<u8>,
}

impl Tile {
    /// Frame with a binary mask tinted on top.
    pub fn overlay(height: usize, width: usize, frame: &[u8], mask: &[bool], tint: [u8; 3]) -> Self {
        let mut rgb = frame.to_vec();
        for (p, &m) in mask.iter().enumerate() {
            if m {
                for c in 0..3 {
                    rgb[p * 3 + c] = ((u16::from(rgb[p * 3 + c]) + u16::from(tint[c])) / 2) as u8;
                }
            }
        }
        Self { height, width, rgb }
    }

    pub fn binary(height: usize, width: usize, mask: &[bool]) -> Self {
        let rgb = mask.iter().flat_map(|&m| if m { [255u8; 3] } else { [0u8; 3] }).collect();
        Self { height, width, rgb }
    }
}

/// Tiles laid out row by row with a 2-pixel gap; returns PNG bytes.
pub fn grid_png(rows: &[Vec<Tile>]) -> Vec<u8> {
    const GAP: usize = 2;
    let th = rows.iter().flatten().map(|t| t.height).max().unwrap_or(1);
    let tw = rows.iter().flatten().map(|t| t.width).max().unwrap_or(1);
    let cols = rows.iter().map(Vec::len).max().unwrap_or(1).max(1);
    let (w, h) = (cols * (tw + GAP) + GAP, rows.len().max(1) * (th + GAP) + GAP);
    let mut img = vec![255u8; w * h * 3];
    for (r, row) in rows.iter().enumerate() {
        for (c, t) in row.iter().enumerate() {
            let (ox, oy) = (GAP + c * (tw + GAP), GAP + r * (th + GAP));
            for y in 0..t.height {
                let dst = ((oy + y) * w + ox) * 3;
                img[dst..dst + t.width * 3].copy_from_slice(&t.rgb[y * t.width * 3..(y + 1) * t.width * 3]);
            }
        }
    }
    encode_png(w, h, png::ColorType::Rgb, &img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_has_one_bar_per_value() {
        let g = vec![
            BarGroup { label: "mute".into(), values: vec![40.0, -3.0] },
            BarGroup { label: "wgn<10>".into(), values: vec![f64::NAN, 2.0] },
        ];
        let svg = bar_chart_svg("t", "delta (%)", &["a", "b"], &g);
        assert_eq!(svg.matches("<rect x=").count(), 4 + 2);
        assert!(svg.contains("wgn&lt;10&gt;"));
        assert!(svg.ends_with("</svg>\n"));
    }

    #[test]
    fn grid_png_has_expected_size() {
        let t = Tile::binary(4, 5, &[true; 20]);
        let bytes = grid_png(&[vec![t.clone(), t.clone()], vec![t]]);
        let dec = png::Decoder::new(std::io::Cursor::new(bytes)).read_info().unwrap();
        assert_eq!((dec.info().width, dec.info().height), (2 * 7 + 2, 2 * 6 + 2));
    }
}
