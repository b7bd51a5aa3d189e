//! Minimal static SVG charts.

use std::fmt::Write;

use ndarray::Array2;

use crate::interpret::ImportanceSeries;

const W: f64 = 900.0;
const H: f64 = 420.0;
const PAD: f64 = 50.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{}</text>\n",
        W / 2.0,
        escape(title)
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn bounds<'a>(series: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    let (lo, hi) = series
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

struct Frame {
    n: usize,
    lo: f64,
    hi: f64,
}

impl Frame {
    fn x(&self, i: usize) -> f64 {
        PAD + (W - 2.0 * PAD) * i as f64 / (self.n.max(2) - 1) as f64
    }

    fn y(&self, v: f64) -> f64 {
        H - PAD - (H - 2.0 * PAD) * (v - self.lo) / (self.hi - self.lo)
    }

    fn axes(&self, out: &mut String, first: &str, last: &str) {
        let _ = writeln!(
            out,
            "<line x1=\"{PAD}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\
             <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{0}\" stroke=\"black\"/>",
            H - PAD,
            W - PAD
        );
        let _ = writeln!(
            out,
            "<g font-family=\"sans-serif\" font-size=\"10\">\
             <text x=\"{PAD}\" y=\"{0}\">{first}</text>\
             <text x=\"{1}\" y=\"{0}\" text-anchor=\"end\">{last}</text>\
             <text x=\"{2}\" y=\"{3}\" text-anchor=\"end\">{4:.3}</text>\
             <text x=\"{2}\" y=\"{5}\" text-anchor=\"end\">{6:.3}</text></g>",
            H - PAD + 15.0,
            W - PAD,
            PAD - 4.0,
            self.y(self.hi) + 4.0,
            self.hi,
            self.y(self.lo),
            self.lo
        );
    }

    fn path(&self, values: &[f64]) -> String {
        let mut d = String::new();
        for (i, v) in values.iter().enumerate() {
            let _ = write!(d, "{}{:.2},{:.2} ", if i == 0 { "M" } else { "L" }, self.x(i), self.y(*v));
        }
        d
    }
}

/// Line chart of named series sharing an x axis.
pub fn line_chart(title: &str, x_labels: (&str, &str), series: &[(String, Vec<f64>)]) -> String {
    let n = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    let (lo, hi) = bounds(series.iter().flat_map(|(_, v)| v.iter()));
    let f = Frame { n, lo, hi };
    let mut out = header(title);
    f.axes(&mut out, x_labels.0, x_labels.1);
    for (k, (name, v)) in series.iter().enumerate() {
        let c = PALETTE[k % PALETTE.len()];
        let _ = writeln!(out, "<path d=\"{}\" fill=\"none\" stroke=\"{c}\" stroke-width=\"1\"/>", f.path(v));
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" fill=\"{c}\">{}</text>",
            W - PAD + 4.0,
            PAD + 12.0 * k as f64,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Smoothed importance with its confidence band for the chosen columns.
pub fn fan_chart(title: &str, s: &ImportanceSeries, columns: &[usize]) -> String {
    let n = s.len();
    let band: Vec<f64> = columns
        .iter()
        .flat_map(|&j| s.ci_low.column(j).iter().chain(s.ci_high.column(j).iter()).copied().collect::<Vec<_>>())
        .collect();
    let (lo, hi) = bounds(band.iter());
    let f = Frame { n, lo, hi };
    let mut out = header(title);
    let first = s.dates.first().map(|d| d.to_string()).unwrap_or_default();
    let last = s.dates.last().map(|d| d.to_string()).unwrap_or_default();
    f.axes(&mut out, &first, &last);
    for (k, &j) in columns.iter().enumerate() {
        let c = PALETTE[k % PALETTE.len()];
        let mut band = String::new();
        for t in 0..n {
            let _ = write!(band, "{}{:.2},{:.2} ", if t == 0 { "M" } else { "L" }, f.x(t), f.y(s.ci_high[[t, j]]));
        }
        for t in (0..n).rev() {
            let _ = write!(band, "L{:.2},{:.2} ", f.x(t), f.y(s.ci_low[[t, j]]));
        }
        let _ = writeln!(out, "<path d=\"{band}Z\" fill=\"{c}\" fill-opacity=\"0.2\" stroke=\"none\"/>");
        let mean: Vec<f64> = s.smoothed.column(j).to_vec();
        let _ = writeln!(out, "<path d=\"{}\" fill=\"none\" stroke=\"{c}\" stroke-width=\"1.2\"/>", f.path(&mean));
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" fill=\"{c}\">{}</text>",
            PAD + 6.0,
            PAD + 12.0 * k as f64,
            escape(&s.labels[j])
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Heatmap with rows along x (dates) and columns along y; darker is larger.
pub fn heatmap(title: &str, values: &Array2<f64>, x_labels: (&str, &str), y_labels: (&str, &str)) -> String {
    let (n, m) = values.dim();
    let (lo, hi) = bounds(values.iter());
    let mut out = header(title);
    let cw = (W - 2.0 * PAD) / n.max(1) as f64;
    let ch = (H - 2.0 * PAD) / m.max(1) as f64;
    for t in 0..n {
        for j in 0..m {
            let v = ((values[[t, j]] - lo) / (hi - lo)).clamp(0.0, 1.0);
            let shade = (255.0 * (1.0 - v)).round() as u8;
            let _ = write!(
                out,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"rgb({shade},{shade},255)\"/>",
                PAD + cw * t as f64,
                PAD + ch * j as f64,
                cw + 0.05,
                ch + 0.05
            );
        }
    }
    let _ = writeln!(
        out,
        "\n<g font-family=\"sans-serif\" font-size=\"10\">\
         <text x=\"{PAD}\" y=\"{0}\">{1}</text><text x=\"{2}\" y=\"{0}\" text-anchor=\"end\">{3}</text>\
         <text x=\"{4}\" y=\"{5}\" text-anchor=\"end\">{6}</text><text x=\"{4}\" y=\"{7}\" text-anchor=\"end\">{8}</text></g>",
        H - PAD + 15.0,
        escape(x_labels.0),
        W - PAD,
        escape(x_labels.1),
        PAD - 4.0,
        PAD + 8.0,
        escape(y_labels.0),
        H - PAD,
        escape(y_labels.1)
    );
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_closed_svg() {
        let s = line_chart("t<1>", ("a", "b"), &[("x".into(), vec![1.0, 2.0, 3.0])]);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("t&lt;1&gt;"));
        let h = heatmap("h", &Array2::from_elem((3, 2), 0.5), ("a", "b"), ("c", "d"));
        assert_eq!(h.matches("<rect").count(), 7);
    }
}
