//! SVG rendering of CSV tables.
//!
//! A plot spec is a small TOML file:
//!
//! ```toml
//! kind = "line"        # line | scatter
//! x = "t"
//! y = ["lambda"]
//! series = "k"         # optional: split rows into one series per value
//! color = "psi_1"      # scatter only: numeric or small-integer column
//! title = "spectrum"
//! ```

use std::path::Path;

use plotters::prelude::*;
use serde::Deserialize;

use crate::error::{io_err, CliError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlotKind {
    Line,
    Scatter,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotSpec {
    pub kind: PlotKind,
    pub x: String,
    pub y: Vec<String>,
    pub series: Option<String>,
    pub color: Option<String>,
    #[serde(default)]
    pub title: String,
    #[serde(default = "default_w")]
    pub width: u32,
    #[serde(default = "default_h")]
    pub height: u32,
}

fn default_w() -> u32 {
    720
}
fn default_h() -> u32 {
    480
}

impl PlotSpec {
    pub fn line(x: &str, y: &[&str], series: Option<&str>, title: &str) -> Self {
        Self {
            kind: PlotKind::Line,
            x: x.into(),
            y: y.iter().map(|s| s.to_string()).collect(),
            series: series.map(Into::into),
            color: None,
            title: title.into(),
            width: default_w(),
            height: default_h(),
        }
    }

    pub fn scatter(x: &str, y: &str, color: Option<&str>, title: &str) -> Self {
        Self {
            kind: PlotKind::Scatter,
            x: x.into(),
            y: vec![y.into()],
            series: None,
            color: color.map(Into::into),
            title: title.into(),
            width: 560,
            height: 560,
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let spec: PlotSpec = toml::from_str(&text).map_err(|e| CliError::Config(format!("plot spec: {e}")))?;
        if spec.y.is_empty() {
            return Err(CliError::Config("plot spec: y must name at least one column".into()));
        }
        if spec.kind == PlotKind::Scatter && spec.y.len() != 1 {
            return Err(CliError::Config("plot spec: scatter plots take exactly one y column".into()));
        }
        Ok(spec)
    }
}

/// In-memory CSV table.
#[derive(Debug, Clone, Default)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let mut rdr = csv::Reader::from_path(path)?;
        let headers = rdr.headers()?.iter().map(str::to_string).collect();
        let rows = rdr.records().map(|r| r.map(|r| r.iter().map(str::to_string).collect())).collect::<Result<_, _>>()?;
        Ok(Self { headers, rows })
    }

    fn column(&self, name: &str) -> Result<usize, CliError> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Plot(format!("missing column {name:?}; table has {}", self.headers.join(","))))
    }

    fn numeric(&self, col: usize, row: usize) -> Result<f64, CliError> {
        let s = &self.rows[row][col];
        s.parse().map_err(|_| CliError::Plot(format!("row {}: {:?} in column {:?} is not a number", row + 1, s, self.headers[col])))
    }
}

struct Series {
    name: String,
    points: Vec<(f64, f64)>,
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.04 * (hi - lo);
    (lo - pad, hi + pad)
}

/// Diverging blue-grey-red map on `[0, 1]`.
fn diverging(u: f64) -> RGBColor {
    let u = u.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64, s: f64| (a + (b - a) * s).round() as u8;
    if u < 0.5 {
        let s = u / 0.5;
        RGBColor(lerp(33.0, 221.0, s), lerp(102.0, 221.0, s), lerp(172.0, 221.0, s))
    } else {
        let s = (u - 0.5) / 0.5;
        RGBColor(lerp(221.0, 178.0, s), lerp(221.0, 24.0, s), lerp(221.0, 43.0, s))
    }
}

fn plot_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Plot(e.to_string())
}

/// Renders `table` to an SVG string. Output depends only on the inputs.
pub fn render(table: &Table, spec: &PlotSpec) -> Result<String, CliError> {
    let xi = table.column(&spec.x)?;
    let yis = spec.y.iter().map(|y| table.column(y)).collect::<Result<Vec<_>, _>>()?;
    let si = spec.series.as_deref().map(|s| table.column(s)).transpose()?;
    let ci = spec.color.as_deref().map(|c| table.column(c)).transpose()?;

    let mut series: Vec<Series> = Vec::new();
    for (k, &yi) in yis.iter().enumerate() {
        for r in 0..table.rows.len() {
            let p = (table.numeric(xi, r)?, table.numeric(yi, r)?);
            let name = match si {
                Some(s) if yis.len() > 1 => format!("{} {}={}", spec.y[k], table.headers[s], table.rows[r][s]),
                Some(s) => format!("{}={}", table.headers[s], table.rows[r][s]),
                None => spec.y[k].clone(),
            };
            match series.iter_mut().find(|s| s.name == name) {
                Some(s) => s.points.push(p),
                None => series.push(Series { name, points: vec![p] }),
            }
        }
    }
    let colors: Vec<f64> = match ci {
        Some(c) => (0..table.rows.len()).map(|r| table.numeric(c, r)).collect::<Result<_, _>>()?,
        None => Vec::new(),
    };

    let all = || series.iter().flat_map(|s| s.points.iter());
    let (x0, x1) = bounds(all().map(|p| p.0));
    let (y0, y1) = bounds(all().map(|p| p.1));

    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (spec.width, spec.height)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(&spec.title, ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(52)
            .build_cartesian_2d(x0..x1, y0..y1)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .x_desc(spec.x.as_str())
            .y_desc(spec.y.join(", "))
            .light_line_style(WHITE.mix(0.0))
            .draw()
            .map_err(plot_err)?;

        if table.rows.is_empty() {
            log::warn!("plot {:?}: table is empty", spec.title);
            root.draw(&Text::new(
                "no data",
                ((spec.width / 2) as i32 - 30, (spec.height / 2) as i32),
                ("sans-serif", 20).into_font().color(&RED),
            ))
            .map_err(plot_err)?;
        }

        match spec.kind {
            PlotKind::Line => {
                for (i, s) in series.iter().enumerate() {
                    let color = Palette99::pick(i).to_rgba();
                    let mut pts = s.points.clone();
                    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                    chart
                        .draw_series(LineSeries::new(pts, color.stroke_width(2)))
                        .map_err(plot_err)?
                        .label(s.name.clone())
                        .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
                }
                if series.len() > 1 {
                    chart
                        .configure_series_labels()
                        .background_style(WHITE.mix(0.85))
                        .border_style(BLACK)
                        .draw()
                        .map_err(plot_err)?;
                }
            }
            PlotKind::Scatter => {
                let pts = &series.first().map(|s| s.points.clone()).unwrap_or_default();
                let categorical = !colors.is_empty() && colors.iter().all(|c| c.fract() == 0.0 && (0.0..=20.0).contains(c));
                let (c0, c1) = if colors.is_empty() {
                    (0.0, 1.0)
                } else {
                    let m = colors.iter().fold(0.0f64, |m, c| m.max(c.abs())).max(1e-12);
                    (-m, m)
                };
                chart
                    .draw_series(pts.iter().enumerate().map(|(r, &p)| {
                        let style = if colors.is_empty() {
                            Palette99::pick(0).filled()
                        } else if categorical {
                            Palette99::pick(colors[r] as usize).filled()
                        } else {
                            diverging((colors[r] - c0) / (c1 - c0)).filled()
                        };
                        Circle::new(p, 2, style)
                    }))
                    .map_err(plot_err)?;
            }
        }
        root.present().map_err(plot_err)?;
    }
    Ok(svg)
}

/// Reads `table`, renders it with `spec` and writes `out`.
pub fn emit_plot(table: &Path, spec: &PlotSpec, out: &Path) -> Result<(), CliError> {
    let t = Table::read(table)?;
    let svg = render(&t, spec)?;
    std::fs::write(out, svg).map_err(io_err(out))
}
