//! Static SVG scatter plot of evaluation points with per-arm Pareto fronts.

use rlhf_lab::eval::ParetoPoint;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 56.0;

const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

fn scale(value: f64, lo: f64, hi: f64, out_lo: f64, out_hi: f64) -> f64 {
    if (hi - lo).abs() < 1e-12 {
        return 0.5 * (out_lo + out_hi);
    }
    out_lo + (value - lo) / (hi - lo) * (out_hi - out_lo)
}

/// Renders one SVG with a scatter of all points and a front polyline per arm.
pub fn plot(arms: &[(String, Vec<ParetoPoint>, Vec<ParetoPoint>)]) -> String {
    let all: Vec<&ParetoPoint> = arms.iter().flat_map(|(_, pts, _)| pts.iter()).collect();
    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in &all {
        min_x = min_x.min(p.mean_length);
        max_x = max_x.max(p.mean_length);
        min_y = min_y.min(p.win_score);
        max_y = max_y.max(p.win_score);
    }
    if all.is_empty() {
        min_x = 0.0;
        max_x = 1.0;
        min_y = 0.0;
        max_y = 1.0;
    }
    let pad_x = 0.05 * (max_x - min_x).max(1.0);
    let pad_y = 0.05 * (max_y - min_y).max(1.0);
    let (min_x, max_x) = (min_x - pad_x, max_x + pad_x);
    let (min_y, max_y) = (min_y - pad_y, max_y + pad_y);
    let sx = |x: f64| scale(x, min_x, max_x, MARGIN, WIDTH - MARGIN);
    let sy = |y: f64| scale(y, min_y, max_y, HEIGHT - MARGIN, MARGIN);

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    // Axes.
    out.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        r = WIDTH - MARGIN,
        t = MARGIN,
        b = HEIGHT - MARGIN
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"13\" text-anchor=\"middle\">mean response length</text>\n",
        WIDTH / 2.0,
        HEIGHT - 14.0
    ));
    out.push_str(&format!(
        "<text x=\"16\" y=\"{}\" font-size=\"13\" text-anchor=\"middle\" \
         transform=\"rotate(-90 16 {})\">win score</text>\n",
        HEIGHT / 2.0,
        HEIGHT / 2.0
    ));
    for (frac, val, vertical) in [
        (0.0, min_x, true),
        (1.0, max_x, true),
        (0.0, min_y, false),
        (1.0, max_y, false),
    ] {
        if vertical {
            let x = scale(frac, 0.0, 1.0, MARGIN, WIDTH - MARGIN);
            out.push_str(&format!(
                "<text x=\"{x}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{val:.1}</text>\n",
                HEIGHT - MARGIN + 16.0
            ));
        } else {
            let y = scale(frac, 0.0, 1.0, HEIGHT - MARGIN, MARGIN);
            out.push_str(&format!(
                "<text x=\"{}\" y=\"{y}\" font-size=\"11\" text-anchor=\"end\">{val:.1}</text>\n",
                MARGIN - 6.0
            ));
        }
    }

    for (i, (arm, points, front)) in arms.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        for p in points {
            out.push_str(&format!(
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3.5\" fill=\"{color}\" fill-opacity=\"0.5\"/>\n",
                sx(p.mean_length),
                sy(p.win_score)
            ));
        }
        if !front.is_empty() {
            let path: Vec<String> = front
                .iter()
                .map(|p| format!("{:.1},{:.1}", sx(p.mean_length), sy(p.win_score)))
                .collect();
            out.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
                path.join(" ")
            ));
        }
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{arm}</text>\n",
            WIDTH - MARGIN - 120.0,
            MARGIN + 18.0 * i as f64
        ));
    }
    out.push_str("</svg>\n");
    out
}
