//! Plain SVG plots for the reporter. Output depends only on the input
//! values, so reports are byte-stable.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, title: &str, xlabel: &str, ylabel: &str) {
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        W / 2.0,
        escape(title),
        LEFT + (W - LEFT - RIGHT) / 2.0,
        H - 12.0,
        escape(xlabel),
        TOP + (H - TOP - BOTTOM) / 2.0,
        TOP + (H - TOP - BOTTOM) / 2.0,
        escape(ylabel),
    );
}

fn axes(out: &mut String, x: (f64, f64), y: (f64, f64)) {
    let (x0, y0, x1, y1) = (LEFT, H - BOTTOM, W - RIGHT, TOP);
    let _ = writeln!(out, "<path d=\"M{x0} {y1} L{x0} {y0} L{x1} {y0}\" fill=\"none\" stroke=\"black\"/>");
    for i in 0..=4 {
        let f = f64::from(i) / 4.0;
        let px = x0 + f * (x1 - x0);
        let py = y0 - f * (y0 - y1);
        let _ = writeln!(
            out,
            "<text x=\"{px:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{:.3}</text>",
            y0 + 16.0,
            x.0 + f * (x.1 - x.0)
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{:.3}</text>",
            x0 - 6.0,
            py + 4.0,
            y.0 + f * (y.1 - y.0)
        );
    }
}

/// Bin counts over `[lo, hi]` with the top edge in the last bin.
pub fn histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Vec<usize> {
    let mut counts = vec![0; bins.max(1)];
    let width = (hi - lo) / counts.len() as f64;
    for v in values.iter().filter(|v| v.is_finite()) {
        let i = if width > 0.0 { ((v - lo) / width).floor() as isize } else { 0 };
        let i = i.clamp(0, counts.len() as isize - 1) as usize;
        counts[i] += 1;
    }
    counts
}

pub fn histogram_svg(values: &[f64], bins: usize, title: &str, xlabel: &str) -> String {
    let hi = values.iter().copied().filter(|v| v.is_finite()).fold(0.0, f64::max).max(1e-9);
    let counts = histogram(values, bins, 0.0, hi);
    let top = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let mut out = String::new();
    header(&mut out, title, xlabel, "matches");
    axes(&mut out, (0.0, hi), (0.0, top));
    let pw = (W - LEFT - RIGHT) / counts.len() as f64;
    let ph = H - TOP - BOTTOM;
    for (i, c) in counts.iter().enumerate() {
        let h = *c as f64 / top * ph;
        let _ = writeln!(
            out,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\" stroke=\"white\"/>",
            LEFT + i as f64 * pw,
            H - BOTTOM - h,
            pw,
            h,
            PALETTE[0]
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Line plot of named series on shared axes; y spans [0, 1].
pub fn line_plot_svg(series: &[(String, Vec<(f64, f64)>)], title: &str, xlabel: &str, ylabel: &str) -> String {
    let xs = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0));
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for x in xs {
        lo = lo.min(x);
        hi = hi.max(x);
    }
    if !(lo < hi) {
        (lo, hi) = if lo.is_finite() { (lo - 0.5, lo + 0.5) } else { (0.0, 1.0) };
    }
    let mut out = String::new();
    header(&mut out, title, xlabel, ylabel);
    axes(&mut out, (lo, hi), (0.0, 1.0));
    let px = |x: f64| LEFT + (x - lo) / (hi - lo) * (W - LEFT - RIGHT);
    let py = |y: f64| H - BOTTOM - y.clamp(0.0, 1.0) * (H - TOP - BOTTOM);
    for (k, (name, pts)) in series.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = pts.iter().map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y))).collect();
        let _ = writeln!(out, "<polyline points=\"{}\" fill=\"none\" stroke=\"{colour}\" stroke-width=\"2\"/>", path.join(" "));
        for (x, y) in pts {
            let _ = writeln!(out, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{colour}\"/>", px(*x), py(*y));
        }
        let ly = TOP + 14.0 + 16.0 * k as f64;
        let _ = writeln!(
            out,
            "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{colour}\" stroke-width=\"2\"/>\n<text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
            W - RIGHT - 150.0,
            W - RIGHT - 130.0,
            W - RIGHT - 125.0,
            ly + 4.0,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_edges() {
        assert_eq!(histogram(&[0.0, 0.5, 1.0, 0.99, f64::NAN], 2, 0.0, 1.0), vec![1, 3]);
        assert_eq!(histogram(&[], 3, 0.0, 1.0), vec![0, 0, 0]);
        assert_eq!(histogram(&[2.0, 2.0], 4, 2.0, 2.0), vec![2, 0, 0, 0]);
    }

    #[test]
    fn svg_is_well_formed_text() {
        let h = histogram_svg(&[0.1, 0.2, 3.0], 5, "d <a&b>", "x");
        assert!(h.starts_with("<svg") && h.ends_with("</svg>\n"));
        assert!(h.contains("d &lt;a&amp;b&gt;"));
        assert_eq!(h.matches("<rect").count(), 6);
        let l = line_plot_svg(&[("f1".into(), vec![(0.0, 0.2), (1.0, 0.9)])], "t", "x", "y");
        assert_eq!(l.matches("<circle").count(), 2);
        let single = line_plot_svg(&[("f1".into(), vec![(0.5, 0.2)])], "t", "x", "y");
        assert!(!single.contains("NaN"));
    }
}
