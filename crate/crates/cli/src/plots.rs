//! Minimal SVG line and box plots.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD_L: f64 = 64.0;
const PAD_R: f64 = 120.0;
const PAD_Y: f64 = 32.0;
pub const COLORS: [&str; 6] = ["#1f77b4", "#2ca02c", "#ff7f0e", "#d62728", "#9467bd", "#8c564b"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn header(s: &mut String, title: &str) {
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, escape(title));
    let (x0, x1, y0, y1) = (PAD_L, W - PAD_R, PAD_Y, H - PAD_Y);
    let _ = writeln!(
        s,
        r#"<path d="M{x0},{y0} L{x0},{y1} L{x1},{y1}" fill="none" stroke="black"/>"#
    );
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line plot with a log-scaled y axis. Non-positive values are skipped.
pub fn line_plot(title: &str, x_label: &str, series: &[Series]) -> String {
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|p| p.1 > 0.0 && p.1.is_finite());
    let (mut xmin, mut xmax, mut lmin, mut lmax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        lmin = lmin.min(y.log10());
        lmax = lmax.max(y.log10());
    }
    if !xmin.is_finite() {
        (xmin, xmax, lmin, lmax) = (0.0, 1.0, -1.0, 0.0);
    }
    lmin = lmin.floor();
    lmax = lmax.ceil().max(lmin + 1.0);
    if xmax <= xmin {
        xmax = xmin + 1.0;
    }
    let sx = |x: f64| PAD_L + (x - xmin) / (xmax - xmin) * (W - PAD_L - PAD_R);
    let sy = |y: f64| H - PAD_Y - (y.log10() - lmin) / (lmax - lmin) * (H - 2.0 * PAD_Y);

    let mut s = String::new();
    header(&mut s, title);
    let mut e = lmin;
    while e <= lmax {
        let y = sy(10f64.powf(e));
        let _ = writeln!(
            s,
            r##"<line x1="{PAD_L}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">1e{e}</text>"##,
            W - PAD_R,
            PAD_L - 4.0,
            y + 4.0
        );
        e += 1.0;
    }
    let _ = writeln!(s, r#"<text x="{PAD_L}" y="{}" text-anchor="start">{xmin}</text>"#, H - PAD_Y + 14.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{xmax}</text>"#, W - PAD_R, H - PAD_Y + 14.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (PAD_L + W - PAD_R) / 2.0, H - 6.0, escape(x_label));
    for (k, ser) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let d: Vec<String> = ser
            .points
            .iter()
            .filter(|p| p.1 > 0.0 && p.1.is_finite())
            .enumerate()
            .map(|(i, &(x, y))| format!("{}{:.2},{:.2}", if i == 0 { 'M' } else { 'L' }, sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<path class="series" data-name="{}" d="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            escape(&ser.name),
            d.join(" ")
        );
        let ly = PAD_Y + 16.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{0:.2}" y1="{ly}" x2="{1:.2}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{2:.2}" y="{3}">{4}</text>"#,
            W - PAD_R + 8.0,
            W - PAD_R + 28.0,
            W - PAD_R + 32.0,
            ly + 4.0,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Five-number summary: min, lower quartile, median, upper quartile, max.
pub fn quartiles(values: &[f64]) -> Option<[f64; 5]> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    Some([v[0], q(0.25), q(0.5), q(0.75), v[v.len() - 1]])
}

/// One box per group on a linear y axis.
pub fn box_plot(title: &str, groups: &[(String, Vec<f64>)]) -> String {
    let stats: Vec<_> = groups.iter().map(|(n, v)| (n, quartiles(v))).collect();
    let ymax = stats
        .iter()
        .filter_map(|(_, q)| q.map(|q| q[4]))
        .fold(0.0f64, f64::max)
        .max(1e-12)
        * 1.05;
    let sy = |y: f64| H - PAD_Y - y / ymax * (H - 2.0 * PAD_Y);
    let mut s = String::new();
    header(&mut s, title);
    for frac in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let y = sy(frac * ymax);
        let _ = writeln!(
            s,
            r##"<line x1="{PAD_L}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{:.3e}</text>"##,
            W - PAD_R,
            PAD_L - 4.0,
            y + 4.0,
            frac * ymax
        );
    }
    let slot = (W - PAD_L - PAD_R) / stats.len().max(1) as f64;
    for (k, (name, q)) in stats.iter().enumerate() {
        let cx = PAD_L + slot * (k as f64 + 0.5);
        let half = slot * 0.25;
        let color = COLORS[k % COLORS.len()];
        let _ = writeln!(
            s,
            r#"<text x="{cx:.2}" y="{}" text-anchor="middle">{}</text>"#,
            H - PAD_Y + 14.0,
            escape(name)
        );
        let Some([mn, q1, md, q3, mx]) = *q else { continue };
        let _ = writeln!(
            s,
            r#"<g class="box" data-name="{}"><line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="black"/><rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{color}" fill-opacity="0.5" stroke="black"/><line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black" stroke-width="2"/></g>"#,
            escape(name),
            sy(mn),
            sy(mx),
            cx - half,
            sy(q3),
            2.0 * half,
            (sy(q1) - sy(q3)).max(0.5),
            cx - half,
            sy(md),
            cx + half,
            sy(md),
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quartiles_of_five() {
        assert_eq!(quartiles(&[5.0, 1.0, 3.0, 2.0, 4.0]), Some([1.0, 2.0, 3.0, 4.0, 5.0]));
        assert_eq!(quartiles(&[f64::NAN]), None);
    }

    #[test]
    fn one_path_per_series() {
        let series: Vec<Series> = (0..4)
            .map(|k| Series {
                name: format!("s{k}"),
                points: vec![(0.0, 1.0), (1.0, 0.1 * (k + 1) as f64)],
            })
            .collect();
        let svg = line_plot("t", "epoch", &series);
        assert_eq!(svg.matches("class=\"series\"").count(), 4);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
    }
}
