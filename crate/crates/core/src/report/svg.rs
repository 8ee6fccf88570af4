//! Hand-emitted line chart of accuracy against SNR.

use std::fmt::Write as _;

use super::{sorted_snrs, SnrMetrics};

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 500.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 640.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 440.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// One polyline per model over the union of SNR bins, y fixed to [0, 1].
pub fn render_accuracy_svg(models: &[(&str, &SnrMetrics)]) -> String {
    let snrs = sorted_snrs(models);
    let (lo, hi) = match (snrs.first(), snrs.last()) {
        (Some(&a), Some(&b)) if a < b => (a as f64, b as f64),
        (Some(&a), _) => (a as f64 - 1.0, a as f64 + 1.0),
        _ => (0.0, 1.0),
    };
    let x = |snr: f64| LEFT + (snr - lo) / (hi - lo) * (RIGHT - LEFT);
    let y = |acc: f64| BOTTOM - acc * (BOTTOM - TOP);

    let mut s = String::new();
    s.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    )
    .unwrap();
    writeln!(s, "<rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>").unwrap();
    s.push_str("<g stroke=\"black\" stroke-width=\"1\">\n");
    writeln!(s, "<line x1=\"{LEFT}\" y1=\"{BOTTOM}\" x2=\"{RIGHT}\" y2=\"{BOTTOM}\"/>").unwrap();
    writeln!(s, "<line x1=\"{LEFT}\" y1=\"{BOTTOM}\" x2=\"{LEFT}\" y2=\"{TOP}\"/>").unwrap();
    for &snr in &snrs {
        let px = x(snr as f64);
        writeln!(s, "<line x1=\"{px:.2}\" y1=\"{BOTTOM}\" x2=\"{px:.2}\" y2=\"{}\"/>", BOTTOM + 5.0).unwrap();
    }
    for k in 0..=10 {
        let py = y(k as f64 / 10.0);
        writeln!(s, "<line x1=\"{}\" y1=\"{py:.2}\" x2=\"{LEFT}\" y2=\"{py:.2}\"/>", LEFT - 5.0).unwrap();
    }
    s.push_str("</g>\n");

    s.push_str("<g font-family=\"sans-serif\" font-size=\"12\" fill=\"black\">\n");
    for &snr in &snrs {
        writeln!(s, "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\">{snr}</text>", x(snr as f64), BOTTOM + 20.0).unwrap();
    }
    for k in 0..=10 {
        let v = k as f64 / 10.0;
        writeln!(s, "<text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\">{v:.1}</text>", LEFT - 8.0, y(v) + 4.0).unwrap();
    }
    writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">SNR (dB)</text>", (LEFT + RIGHT) / 2.0, BOTTOM + 45.0).unwrap();
    writeln!(
        s,
        "<text x=\"20\" y=\"{0}\" text-anchor=\"middle\" transform=\"rotate(-90 20 {0})\">Accuracy</text>",
        (TOP + BOTTOM) / 2.0
    )
    .unwrap();
    s.push_str("</g>\n");

    for (k, (name, m)) in models.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let points: Vec<String> =
            m.per_snr.iter().map(|b| format!("{:.2},{:.2}", x(b.snr_db as f64), y(b.accuracy()))).collect();
        writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"><title>{}</title></polyline>",
            points.join(" "),
            escape(name)
        )
        .unwrap();
        let ly = TOP + 10.0 + 22.0 * k as f64;
        writeln!(s, "<line x1=\"660\" y1=\"{ly}\" x2=\"690\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>").unwrap();
        writeln!(
            s,
            "<text x=\"698\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">{}</text>",
            ly + 4.0,
            escape(name)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}
