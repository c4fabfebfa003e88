//! Hand-emitted SVG figures: layer x head heatmaps, histograms, and line
//! charts. No plotting dependency; output is deterministic for identical
//! input (floats are formatted to fixed precision), so figures diff
//! cleanly and regenerate offline from the numeric artifacts.

const CELL: f32 = 22.0;
const MARGIN_LEFT: f32 = 56.0;
const MARGIN_TOP: f32 = 48.0;
const MARGIN_BOTTOM: f32 = 40.0;
const MARGIN_RIGHT: f32 = 24.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// White-to-dark-red ramp for a value in [0, 1].
fn heat_color(v: f32) -> String {
    let c = v.clamp(0.0, 1.0);
    let r = 255.0 - 75.0 * c;
    let g = 245.0 * (1.0 - c);
    let b = 240.0 * (1.0 - c);
    format!("rgb({},{},{})", r.round() as u8, g.round() as u8, b.round() as u8)
}

/// Layer x head heatmap. `values[layer][head]` is drawn on a [0, max]
/// ramp (`max <= 0` autoscales), with an optional head-index band
/// outlined.
pub fn heatmap_svg(values: &[Vec<f32>], band: Option<[usize; 2]>, title: &str, max: f32) -> String {
    let layers = values.len();
    let heads = values.first().map(|r| r.len()).unwrap_or(0);
    let scale = if max > 0.0 {
        max
    } else {
        values
            .iter()
            .flatten()
            .fold(1e-6f32, |acc, &v| acc.max(v.abs()))
    };
    let width = MARGIN_LEFT + heads as f32 * CELL + MARGIN_RIGHT;
    let height = MARGIN_TOP + layers as f32 * CELL + MARGIN_BOTTOM;
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
         viewBox=\"0 0 {width:.0} {height:.0}\" font-family=\"sans-serif\">\n"
    ));
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"24\" font-size=\"14\" text-anchor=\"middle\">{}</text>\n",
        width / 2.0,
        esc(title)
    ));
    for (l, row) in values.iter().enumerate() {
        for (h, &v) in row.iter().enumerate() {
            let x = MARGIN_LEFT + h as f32 * CELL;
            let y = MARGIN_TOP + l as f32 * CELL;
            s.push_str(&format!(
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{CELL:.1}\" height=\"{CELL:.1}\" \
                 fill=\"{}\" stroke=\"#ccc\" stroke-width=\"0.5\"><title>L{l}H{h}: {v:.4}</title></rect>\n",
                heat_color(v / scale)
            ));
        }
    }
    // axis labels
    for h in 0..heads {
        let x = MARGIN_LEFT + h as f32 * CELL + CELL / 2.0;
        s.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{:.1}\" font-size=\"9\" text-anchor=\"middle\">H{h}</text>\n",
            MARGIN_TOP + layers as f32 * CELL + 14.0
        ));
    }
    for l in 0..layers {
        let y = MARGIN_TOP + l as f32 * CELL + CELL / 2.0 + 3.0;
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{y:.1}\" font-size=\"9\" text-anchor=\"end\">L{l}</text>\n",
            MARGIN_LEFT - 6.0
        ));
    }
    if let Some([a, b]) = band {
        let x = MARGIN_LEFT + a as f32 * CELL;
        let w = (b - a + 1) as f32 * CELL;
        s.push_str(&format!(
            "<rect x=\"{x:.1}\" y=\"{MARGIN_TOP:.1}\" width=\"{w:.1}\" height=\"{:.1}\" \
             fill=\"none\" stroke=\"#1f5fbf\" stroke-width=\"2.5\"/>\n",
            layers as f32 * CELL
        ));
    }
    s.push_str("</svg>\n");
    s
}

/// Bucket counts over [0, 1]; the final bucket is right-closed so every
/// value lands somewhere.
pub fn histogram_buckets(values: &[f32], buckets: usize) -> Vec<usize> {
    let mut counts = vec![0usize; buckets];
    for &v in values {
        let idx = ((v.clamp(0.0, 1.0) * buckets as f32) as usize).min(buckets - 1);
        counts[idx] += 1;
    }
    counts
}

/// Histogram of values in [0, 1] (the BOS-mass distribution shape).
pub fn histogram_svg(values: &[f32], buckets: usize, title: &str) -> String {
    let counts = histogram_buckets(values, buckets);
    let max = counts.iter().copied().max().unwrap_or(1).max(1);
    let bar_w = 28.0f32;
    let plot_h = 160.0f32;
    let width = MARGIN_LEFT + buckets as f32 * bar_w + MARGIN_RIGHT;
    let height = MARGIN_TOP + plot_h + MARGIN_BOTTOM;
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
         viewBox=\"0 0 {width:.0} {height:.0}\" font-family=\"sans-serif\">\n"
    ));
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"24\" font-size=\"14\" text-anchor=\"middle\">{}</text>\n",
        width / 2.0,
        esc(title)
    ));
    for (i, &c) in counts.iter().enumerate() {
        let h = plot_h * c as f32 / max as f32;
        let x = MARGIN_LEFT + i as f32 * bar_w;
        let y = MARGIN_TOP + plot_h - h;
        s.push_str(&format!(
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{h:.1}\" fill=\"#b04030\">\
             <title>[{:.2},{:.2}): {c}</title></rect>\n",
            bar_w - 2.0,
            i as f32 / buckets as f32,
            (i + 1) as f32 / buckets as f32,
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"8\" text-anchor=\"middle\">{:.1}</text>\n",
            x + bar_w / 2.0,
            MARGIN_TOP + plot_h + 12.0,
            i as f32 / buckets as f32
        ));
    }
    s.push_str(&format!(
        "<line x1=\"{MARGIN_LEFT:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#333\"/>\n",
        MARGIN_TOP + plot_h,
        MARGIN_LEFT + buckets as f32 * bar_w,
        MARGIN_TOP + plot_h
    ));
    s.push_str("</svg>\n");
    s
}

const SERIES_COLORS: &[&str] = &[
    "#1f5fbf", "#b04030", "#2d8a4a", "#8655b5", "#c58a1f", "#3aa0a8", "#94424f", "#666666",
];

/// Multi-series line chart (drift trajectories, perplexity curves).
pub fn line_chart_svg(
    series: &[(String, Vec<(f32, f32)>)],
    title: &str,
    x_label: &str,
    y_label: &str,
) -> String {
    let plot_w = 420.0f32;
    let plot_h = 220.0f32;
    let width = MARGIN_LEFT + plot_w + 140.0;
    let height = MARGIN_TOP + plot_h + MARGIN_BOTTOM;

    let all: Vec<(f32, f32)> = series.iter().flat_map(|(_, pts)| pts.iter().copied()).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f32::MAX, f32::MIN, f32::MAX, f32::MIN);
    for &(x, y) in &all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if all.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if (x1 - x0).abs() < 1e-12 {
        x1 = x0 + 1.0;
    }
    if (y1 - y0).abs() < 1e-12 {
        y1 = y0 + 1.0;
    }
    let px = |x: f32| MARGIN_LEFT + (x - x0) / (x1 - x0) * plot_w;
    let py = |y: f32| MARGIN_TOP + plot_h - (y - y0) / (y1 - y0) * plot_h;

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
         viewBox=\"0 0 {width:.0} {height:.0}\" font-family=\"sans-serif\">\n"
    ));
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"24\" font-size=\"14\" text-anchor=\"middle\">{}</text>\n",
        MARGIN_LEFT + plot_w / 2.0,
        esc(title)
    ));
    s.push_str(&format!(
        "<rect x=\"{MARGIN_LEFT:.1}\" y=\"{MARGIN_TOP:.1}\" width=\"{plot_w:.1}\" height=\"{plot_h:.1}\" \
         fill=\"none\" stroke=\"#333\"/>\n"
    ));
    // corner tick labels
    s.push_str(&format!(
        "<text x=\"{MARGIN_LEFT:.1}\" y=\"{:.1}\" font-size=\"9\">{x0:.2}</text>\n\
         <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"9\" text-anchor=\"end\">{x1:.2}</text>\n\
         <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"9\" text-anchor=\"end\">{y0:.3}</text>\n\
         <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"9\" text-anchor=\"end\">{y1:.3}</text>\n",
        MARGIN_TOP + plot_h + 14.0,
        MARGIN_LEFT + plot_w,
        MARGIN_TOP + plot_h + 14.0,
        MARGIN_LEFT - 6.0,
        MARGIN_TOP + plot_h,
        MARGIN_LEFT - 6.0,
        MARGIN_TOP + 8.0,
    ));
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
        MARGIN_LEFT + plot_w / 2.0,
        height - 8.0,
        esc(x_label)
    ));
    s.push_str(&format!(
        "<text x=\"14\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\" \
         transform=\"rotate(-90 14 {:.1})\">{}</text>\n",
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0,
        esc(y_label)
    ));
    for (i, (label, pts)) in series.iter().enumerate() {
        let color = SERIES_COLORS[i % SERIES_COLORS.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        s.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        for &(x, y) in pts {
            s.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.2\" fill=\"{color}\"/>\n",
                px(x),
                py(y)
            ));
        }
        let ly = MARGIN_TOP + 14.0 * i as f32 + 8.0;
        s.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\">{}</text>\n",
            MARGIN_LEFT + plot_w + 10.0,
            MARGIN_LEFT + plot_w + 28.0,
            MARGIN_LEFT + plot_w + 34.0,
            ly + 3.0,
            esc(label)
        ));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_buckets_conserve_counts() {
        let values: Vec<f32> = (0..48).map(|i| i as f32 / 48.0).collect();
        let counts = histogram_buckets(&values, 10);
        assert_eq!(counts.iter().sum::<usize>(), 48);
        // boundary value 1.0 lands in the last bucket
        assert_eq!(histogram_buckets(&[1.0], 10)[9], 1);
    }

    #[test]
    fn emitters_are_deterministic() {
        let grid = vec![vec![0.1, 0.9], vec![0.5, 0.2]];
        let a = heatmap_svg(&grid, Some([1, 1]), "t", 1.0);
        let b = heatmap_svg(&grid, Some([1, 1]), "t", 1.0);
        assert_eq!(a, b);
        let s = vec![("x".to_string(), vec![(0.0, 1.0), (1.0, 2.0)])];
        assert_eq!(
            line_chart_svg(&s, "t", "x", "y"),
            line_chart_svg(&s, "t", "x", "y")
        );
    }

    #[test]
    fn svg_is_well_formed_enough() {
        let grid = vec![vec![0.0; 8]; 6];
        let svg = heatmap_svg(&grid, None, "BOS mass", 1.0);
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<rect").count(), 48);
        let h = histogram_svg(&[0.1, 0.2, 0.9], 10, "hist & <title>");
        assert!(h.contains("&amp;"));
        assert!(h.contains("&lt;title&gt;"));
    }
}
