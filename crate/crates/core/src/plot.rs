//! Static SVG charts for reports: histograms with an optional marker line and
//! bar charts. Coordinates are printed with fixed precision so identical
//! data gives identical files.

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 70.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn frame(title: &str, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
<text x=\"{:.1}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n\
<line x1=\"{LEFT}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n\
<line x1=\"{LEFT}\" y1=\"{TOP}\" x2=\"{LEFT}\" y2=\"{:.1}\" stroke=\"black\"/>\n{body}</svg>\n",
        W / 2.0,
        escape(title),
        H - BOTTOM,
        W - RIGHT,
        H - BOTTOM,
        H - BOTTOM,
    )
}

fn y_ticks(max: f64, fmt: impl Fn(f64) -> String) -> String {
    let mut s = String::new();
    let plot_h = H - TOP - BOTTOM;
    for k in 0..=4 {
        let v = max * k as f64 / 4.0;
        let y = H - BOTTOM - plot_h * k as f64 / 4.0;
        s += &format!(
            "<line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{LEFT}\" y2=\"{y:.1}\" stroke=\"black\"/><text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            LEFT - 4.0,
            LEFT - 6.0,
            y + 4.0,
            fmt(v)
        );
    }
    s
}

/// Histogram of `values` over `bins` equal-width bins spanning their range.
/// `marker` draws a vertical line (e.g. an observed statistic); the range is
/// widened to include it.
pub fn histogram(title: &str, values: &[f64], bins: usize, marker: Option<f64>) -> String {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() || bins == 0 {
        return frame(title, "<text x=\"320\" y=\"200\" text-anchor=\"middle\">no data</text>\n");
    }
    let mut lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if let Some(m) = marker.filter(|m| m.is_finite()) {
        lo = lo.min(m);
        hi = hi.max(m);
    }
    if hi <= lo {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for v in &finite {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let max = *counts.iter().max().unwrap() as f64;
    let plot_w = W - LEFT - RIGHT;
    let plot_h = H - TOP - BOTTOM;
    let x_of = |v: f64| LEFT + (v - lo) / (hi - lo) * plot_w;
    let mut body = y_ticks(max, |v| format!("{v:.0}"));
    for (i, &c) in counts.iter().enumerate() {
        let h = plot_h * c as f64 / max;
        body += &format!(
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{h:.2}\" fill=\"#4c72b0\" stroke=\"white\" stroke-width=\"0.5\"/>\n",
            x_of(lo + i as f64 * width),
            H - BOTTOM - h,
            plot_w / bins as f64,
        );
    }
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        body += &format!("<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{v:.3}</text>\n", x_of(v), H - BOTTOM + 16.0);
    }
    if let Some(m) = marker.filter(|m| m.is_finite()) {
        body += &format!(
            "<line x1=\"{x:.2}\" y1=\"{TOP}\" x2=\"{x:.2}\" y2=\"{:.1}\" stroke=\"#c44e52\" stroke-width=\"2\"/>\n<text x=\"{x:.2}\" y=\"{:.1}\" fill=\"#c44e52\" text-anchor=\"middle\">{m:.4}</text>\n",
            H - BOTTOM,
            TOP - 4.0,
            x = x_of(m)
        );
    }
    frame(title, &body)
}

/// Vertical bars; `None` values are left blank. Negative values hang below a
/// zero line.
pub fn bar_chart(title: &str, labels: &[String], values: &[Option<f64>]) -> String {
    let present: Vec<f64> = values.iter().flatten().copied().filter(|v| v.is_finite()).collect();
    if labels.is_empty() || present.is_empty() {
        return frame(title, "<text x=\"320\" y=\"200\" text-anchor=\"middle\">no data</text>\n");
    }
    let hi = present.iter().copied().fold(0.0, f64::max);
    let lo = present.iter().copied().fold(0.0, f64::min);
    let span = if hi - lo > 0.0 { hi - lo } else { 1.0 };
    let plot_w = W - LEFT - RIGHT;
    let plot_h = H - TOP - BOTTOM;
    let y_of = |v: f64| H - BOTTOM - (v - lo) / span * plot_h;
    let slot = plot_w / labels.len() as f64;
    let mut body = String::new();
    for k in 0..=4 {
        let v = lo + span * k as f64 / 4.0;
        body += &format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.3}</text>\n",
            LEFT - 6.0,
            y_of(v) + 4.0
        );
    }
    body += &format!(
        "<line x1=\"{LEFT}\" y1=\"{y:.2}\" x2=\"{:.1}\" y2=\"{y:.2}\" stroke=\"#888\"/>\n",
        W - RIGHT,
        y = y_of(0.0)
    );
    for (i, (label, v)) in labels.iter().zip(values).enumerate() {
        let x = LEFT + slot * i as f64;
        if let Some(v) = v.filter(|v| v.is_finite()) {
            let (y0, y1) = (y_of(v.max(0.0)), y_of(v.min(0.0)));
            body += &format!(
                "<rect x=\"{:.2}\" y=\"{y0:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#55a868\"/>\n<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{v:.3}</text>\n",
                x + slot * 0.15,
                slot * 0.7,
                y1 - y0,
                x + slot / 2.0,
                y0 - 4.0
            );
        }
        body += &format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\" transform=\"rotate(-35 {:.2} {:.2})\">{}</text>\n",
            x + slot / 2.0,
            H - BOTTOM + 14.0,
            x + slot / 2.0,
            H - BOTTOM + 14.0,
            escape(label)
        );
    }
    frame(title, &body)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_is_deterministic_and_well_formed() {
        let v: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = histogram("null", &v, 20, Some(0.5));
        assert_eq!(a, histogram("null", &v, 20, Some(0.5)));
        assert!(a.starts_with("<svg") && a.trim_end().ends_with("</svg>"));
        assert_eq!(a.matches("<rect").count(), 21);
    }

    #[test]
    fn empty_inputs_render_placeholder() {
        assert!(histogram("t", &[], 10, None).contains("no data"));
        assert!(bar_chart("t", &[], &[]).contains("no data"));
        let s = bar_chart("a<b", &["x".into(), "y".into()], &[Some(-0.2), None]);
        assert!(s.contains("a&lt;b"));
    }
}
