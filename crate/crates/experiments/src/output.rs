//! CSV tables and SVG line charts. Every artifact carries the config hash
//! and seed that produced it.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{io_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub config_hash: String,
    pub seeds: Vec<u64>,
}

/// Rows of pre-formatted cells under a fixed header, each tagged with the
/// seed that produced it. `config_hash` and `seed` columns are prepended on
/// output.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<(u64, Vec<String>)>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, seed: u64, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push((seed, row));
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv(&self, config_hash: &str) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Invalid(e.to_string());
        let mut header = vec!["config_hash".to_string(), "seed".to_string()];
        header.extend(self.header.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for (seed, r) in &self.rows {
            let mut rec = vec![config_hash.to_string(), seed.to_string()];
            rec.extend(r.iter().cloned());
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Invalid(e.to_string()))
    }
}

/// Shortest round-trip representation.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io_err(path))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    /// `(x, low, high)`.
    pub band: Vec<(f64, f64, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_y: bool,
    /// Categorical tick labels at the given x positions.
    pub x_ticks: Vec<(f64, String)>,
    pub series: Vec<Series>,
}

const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];
const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: (f64, f64, f64, f64) = (70.0, 20.0, 40.0, 50.0);

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl LineChart {
    pub fn is_empty(&self) -> bool {
        self.series.iter().all(|s| s.points.is_empty())
    }

    pub fn to_svg(&self, prov: &Provenance) -> String {
        let ty = |y: f64| if self.log_y { y.max(1e-300).log10() } else { y };
        let xs = self
            .series
            .iter()
            .flat_map(|s| s.points.iter().map(|p| p.0).chain(s.band.iter().map(|b| b.0)));
        let ys = self.series.iter().flat_map(|s| {
            s.points
                .iter()
                .map(|p| p.1)
                .chain(s.band.iter().flat_map(|b| [b.1, b.2]))
        });
        let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let (y0, y1) = ys
            .map(ty)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let (x0, x1) = if x1 > x0 { (x0, x1) } else { (x0 - 1.0, x0 + 1.0) };
        let (y0, y1) = if y1 > y0 { (y0, y1) } else { (y0 - 1.0, y0 + 1.0) };
        let (ml, mr, mt, mb) = MARGIN;
        let px = |x: f64| ml + (x - x0) / (x1 - x0) * (W - ml - mr);
        let py = |y: f64| H - mb - (ty(y) - y0) / (y1 - y0) * (H - mt - mb);

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let seeds: Vec<String> = prov.seeds.iter().map(|s| s.to_string()).collect();
        let _ = writeln!(
            s,
            "<desc>config_hash={} seed={}</desc>",
            prov.config_hash,
            seeds.join(" ")
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
            W / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            s,
            r#"<path d="M{ml} {mt} V{} H{}" fill="none" stroke="black"/>"#,
            H - mb,
            W - mr
        );
        for i in 0..=4 {
            let v = y0 + (y1 - y0) * i as f64 / 4.0;
            let label = if self.log_y {
                format!("1e{v:.1}")
            } else {
                format!("{v:.3}")
            };
            let y = H - mb - (H - mt - mb) * i as f64 / 4.0;
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{:.1}" text-anchor="end">{label}</text>"#,
                ml - 6.0,
                y + 4.0
            );
        }
        if self.x_ticks.is_empty() {
            for i in 0..=4 {
                let v = x0 + (x1 - x0) * i as f64 / 4.0;
                let _ = writeln!(
                    s,
                    r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
                    px(v),
                    H - mb + 16.0,
                    format_tick(v)
                );
            }
        } else {
            for (x, label) in &self.x_ticks {
                let _ = writeln!(
                    s,
                    r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
                    px(*x),
                    H - mb + 16.0,
                    escape(label)
                );
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            (ml + W - mr) / 2.0,
            H - 10.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
            H / 2.0,
            H / 2.0,
            escape(&self.y_label)
        );
        for (i, series) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            if !series.band.is_empty() {
                let mut d = String::new();
                for (j, b) in series.band.iter().enumerate() {
                    let _ = write!(d, "{}{:.2} {:.2} ", if j == 0 { "M" } else { "L" }, px(b.0), py(b.2));
                }
                for b in series.band.iter().rev() {
                    let _ = write!(d, "L{:.2} {:.2} ", px(b.0), py(b.1));
                }
                let _ = writeln!(
                    s,
                    r#"<path d="{}Z" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
                    d
                );
            }
            if !series.points.is_empty() {
                let pts: Vec<String> = series
                    .points
                    .iter()
                    .map(|p| format!("{:.2},{:.2}", px(p.0), py(p.1)))
                    .collect();
                let _ = writeln!(
                    s,
                    r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                    pts.join(" ")
                );
            }
            let ly = mt + 16.0 * i as f64;
            let _ = writeln!(
                s,
                r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
                W - mr - 120.0,
                W - mr - 100.0,
                W - mr - 95.0,
                ly + 4.0,
                escape(&series.name)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn format_tick(v: f64) -> String {
    if v.abs() >= 1000.0 || v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prov() -> Provenance {
        Provenance {
            config_hash: "abc".into(),
            seeds: vec![3],
        }
    }

    #[test]
    fn empty_table_is_header_only() {
        let t = Table::new(&["a", "b"]);
        assert_eq!(t.to_csv("abc").unwrap(), "config_hash,seed,a,b\n");
    }

    #[test]
    fn rows_carry_provenance() {
        let mut t = Table::new(&["x"]);
        t.push(3, vec![num(0.1)]);
        assert_eq!(t.to_csv("abc").unwrap(), "config_hash,seed,x\nabc,3,0.1\n");
    }

    #[test]
    fn svg_embeds_provenance() {
        let chart = LineChart {
            title: "t".into(),
            log_y: true,
            series: vec![Series {
                name: "s".into(),
                points: vec![(1.0, 10.0), (2.0, 100.0)],
                band: vec![(1.0, 9.0, 11.0), (2.0, 90.0, 110.0)],
            }],
            ..Default::default()
        };
        let svg = chart.to_svg(&prov());
        assert!(svg.contains("config_hash=abc seed=3"));
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(LineChart::default().is_empty());
    }
}
