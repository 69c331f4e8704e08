//! Static SVG plots of saved predictive sets and the interval-count table.
//!
//! Scalar targets: one vertical segment per disjoint interval at the test
//! covariate, with the test target marked green (covered) or red (missed).
//! Two-dimensional targets: outlines of the balls of the first few test
//! points and a scatter of all test targets. Higher dimensions only in
//! pairwise mode, one panel per coordinate pair.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use pcp_core::{NormKind, PcpError, Radius, Result};

use crate::experiment::{write_atomic, SavedSet, SetsFile};

const PANEL_W: f64 = 480.0;
const PANEL_H: f64 = 360.0;
const MARGIN: f64 = 50.0;
const MAX_COLUMNS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct PlotOptions {
    /// One panel per coordinate pair; required when d > 2.
    pub pairwise: bool,
    /// Test points whose sets are outlined when d ≥ 2.
    pub max_sets: usize,
}

impl Default for PlotOptions {
    fn default() -> Self {
        Self { pairwise: false, max_sets: 3 }
    }
}

/// Affine map from a data interval onto a pixel interval.
#[derive(Debug, Clone, Copy)]
struct Axis {
    lo: f64,
    scale: f64,
    px0: f64,
    flip: bool,
    span: f64,
}

impl Axis {
    fn px(&self, v: f64) -> f64 {
        let t = (v - self.lo) * self.scale;
        if self.flip {
            self.px0 + self.span - t
        } else {
            self.px0 + t
        }
    }
}

fn padded(mut lo: f64, mut hi: f64) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (-1.0, 1.0);
    }
    if hi - lo < 1e-12 {
        lo -= 1.0;
        hi += 1.0;
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    padded(lo, hi)
}

struct Panel {
    ox: f64,
    oy: f64,
}

impl Panel {
    fn axes(&self, (xlo, xhi): (f64, f64), (ylo, yhi): (f64, f64), equal: bool) -> (Axis, Axis) {
        let (w, h) = (PANEL_W - 2.0 * MARGIN, PANEL_H - 2.0 * MARGIN);
        let (mut sx, mut sy) = (w / (xhi - xlo), h / (yhi - ylo));
        if equal {
            sx = sx.min(sy);
            sy = sx;
        }
        (
            Axis { lo: xlo, scale: sx, px0: self.ox + MARGIN, flip: false, span: w },
            Axis { lo: ylo, scale: sy, px0: self.oy + MARGIN, flip: true, span: h },
        )
    }

    fn frame(&self, svg: &mut String, title: &str, xlabel: &str, ylabel: &str) {
        let (x, y) = (self.ox + MARGIN, self.oy + MARGIN);
        let (w, h) = (PANEL_W - 2.0 * MARGIN, PANEL_H - 2.0 * MARGIN);
        let _ = writeln!(svg, r#"<g class="panel">"#);
        let _ = writeln!(svg, r#"<rect class="frame" x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}"/>"#);
        let _ = writeln!(svg, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{title}</text>"#, x + w / 2.0, y - 12.0);
        let _ = writeln!(svg, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{xlabel}</text>"#, x + w / 2.0, y + h + 28.0);
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" transform="rotate(-90 {:.2} {:.2})">{ylabel}</text>"#,
            x - 40.0,
            y + h / 2.0,
            x - 40.0,
            y + h / 2.0
        );
    }
}

/// Data values at the panel edges.
fn edge_labels(svg: &mut String, ax: &Axis, ay: &Axis) {
    let (x0, x1) = (ax.px0, ax.px0 + ax.span);
    let (y0, y1) = (ay.px0, ay.px0 + ay.span);
    let at = |a: &Axis, px: f64| if a.flip { a.lo + (a.px0 + a.span - px) / a.scale } else { a.lo + (px - a.px0) / a.scale };
    let _ = writeln!(svg, r#"<text x="{x0:.2}" y="{:.2}" text-anchor="start" font-size="10">{:.3}</text>"#, y1 + 14.0, at(ax, x0));
    let _ = writeln!(svg, r#"<text x="{x1:.2}" y="{:.2}" text-anchor="end" font-size="10">{:.3}</text>"#, y1 + 14.0, at(ax, x1));
    let _ = writeln!(svg, r#"<text x="{:.2}" y="{y1:.2}" text-anchor="end" font-size="10">{:.3}</text>"#, x0 - 4.0, at(ay, y1));
    let _ = writeln!(svg, r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-size="10">{:.3}</text>"#, x0 - 4.0, y0 + 10.0, at(ay, y0));
}

fn marker(svg: &mut String, cx: f64, cy: f64, covered: bool) {
    let class = if covered { "test covered" } else { "test uncovered" };
    let _ = writeln!(svg, r#"<circle class="{class}" cx="{cx:.2}" cy="{cy:.2}" r="3"/>"#);
}

fn document(body: &str, panels: usize) -> String {
    let cols = panels.clamp(1, MAX_COLUMNS);
    let rows = panels.div_ceil(cols).max(1);
    let (w, h) = (cols as f64 * PANEL_W, rows as f64 * PANEL_H);
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
    svg.push_str(
        "<style>.frame{fill:none;stroke:#333}.set{stroke:#1f77b4;stroke-width:1.5}\
         .set.infinite{stroke-dasharray:4 3}.ball,.box{fill:none;stroke:#1f77b4;stroke-opacity:0.35}\
         .covered{fill:#2ca02c}.uncovered{fill:#d62728}</style>\n",
    );
    svg.push_str(body);
    svg.push_str("</svg>\n");
    svg
}

fn scalar_panel(file: &SetsFile, svg: &mut String) -> Result<()> {
    let xs: Vec<f64> = file.points.iter().map(|p| p.x.first().copied().unwrap_or(0.0)).collect();
    let mut intervals = Vec::with_capacity(file.points.len());
    for p in &file.points {
        intervals.push(p.set.intervals()?);
    }
    let yr = range(
        file.points
            .iter()
            .map(|p| p.y[0])
            .chain(intervals.iter().flatten().flatten().flat_map(|&(a, b)| [a, b])),
    );
    let panel = Panel { ox: 0.0, oy: 0.0 };
    let (ax, ay) = panel.axes(range(xs.iter().copied()), yr, false);
    panel.frame(svg, &format!("{} repetition {}", file.method, file.repetition), "x0", "y");
    edge_labels(svg, &ax, &ay);
    for (x, ivs) in xs.iter().zip(&intervals) {
        let px = ax.px(*x);
        match ivs {
            Some(ivs) => {
                for &(a, b) in ivs {
                    let _ = writeln!(
                        svg,
                        r#"<line class="set" x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}"/>"#,
                        ay.px(a),
                        ay.px(b)
                    );
                }
            }
            None => {
                let _ = writeln!(
                    svg,
                    r#"<line class="set infinite" x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}"/>"#,
                    ay.px(yr.0),
                    ay.px(yr.1)
                );
            }
        }
    }
    for (x, p) in xs.iter().zip(&file.points) {
        marker(svg, ax.px(*x), ay.px(p.y[0]), p.covered);
    }
    svg.push_str("</g>\n");
    Ok(())
}

fn outline(svg: &mut String, set: &SavedSet, (i, j): (usize, usize), ax: &Axis, ay: &Axis) {
    match set {
        SavedSet::Balls(b) => {
            let Radius::Finite(r) = b.radius() else { return };
            for c in b.centers() {
                let (cx, cy) = (ax.px(c[i]), ay.px(c[j]));
                let (rx, ry) = (r * ax.scale, r * ay.scale);
                let _ = match b.norm() {
                    NormKind::L2 => writeln!(svg, r#"<circle class="ball" cx="{cx:.2}" cy="{cy:.2}" r="{rx:.2}"/>"#),
                    NormKind::Linf => writeln!(
                        svg,
                        r#"<rect class="ball" x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}"/>"#,
                        cx - rx,
                        cy - ry,
                        2.0 * rx,
                        2.0 * ry
                    ),
                    NormKind::L1 => writeln!(
                        svg,
                        r#"<polygon class="ball" points="{:.2},{cy:.2} {cx:.2},{:.2} {:.2},{cy:.2} {cx:.2},{:.2}"/>"#,
                        cx - rx,
                        cy - ry,
                        cx + rx,
                        cy + ry
                    ),
                };
            }
        }
        SavedSet::Box(b) if !b.unbounded => {
            let (x0, x1) = (ax.px(b.lo[i]), ax.px(b.hi[i]));
            let (y0, y1) = (ay.px(b.hi[j]), ay.px(b.lo[j]));
            let _ = writeln!(
                svg,
                r#"<rect class="box" x="{x0:.2}" y="{y0:.2}" width="{:.2}" height="{:.2}"/>"#,
                x1 - x0,
                y1 - y0
            );
        }
        SavedSet::Box(_) => {}
    }
}

fn set_extent(set: &SavedSet, k: usize) -> Vec<f64> {
    match set {
        SavedSet::Balls(b) => match b.radius() {
            Radius::Finite(r) => b.centers().iter().flat_map(|c| [c[k] - r, c[k] + r]).collect(),
            Radius::Infinite => Vec::new(),
        },
        SavedSet::Box(b) if !b.unbounded => vec![b.lo[k], b.hi[k]],
        SavedSet::Box(_) => Vec::new(),
    }
}

fn pair_panel(file: &SetsFile, pair: (usize, usize), panel: &Panel, opts: &PlotOptions, svg: &mut String) {
    let (i, j) = pair;
    let shown = &file.points[..opts.max_sets.min(file.points.len())];
    let coord = |k: usize| {
        range(
            file.points
                .iter()
                .map(move |p| p.y[k])
                .chain(shown.iter().flat_map(move |p| set_extent(&p.set, k))),
        )
    };
    let (ax, ay) = panel.axes(coord(i), coord(j), true);
    panel.frame(
        svg,
        &format!("{} repetition {}", file.method, file.repetition),
        &format!("y{i}"),
        &format!("y{j}"),
    );
    edge_labels(svg, &ax, &ay);
    for p in shown {
        outline(svg, &p.set, pair, &ax, &ay);
    }
    for p in &file.points {
        marker(svg, ax.px(p.y[i]), ay.px(p.y[j]), p.covered);
    }
    svg.push_str("</g>\n");
}

/// Renders one SVG document for a sets file.
pub fn plot_sets(file: &SetsFile, opts: &PlotOptions) -> Result<String> {
    if file.points.is_empty() {
        return Err(PcpError::Precondition("no test points to plot".into()));
    }
    let mut body = String::new();
    let panels = match file.d {
        1 => {
            scalar_panel(file, &mut body)?;
            1
        }
        2 if !opts.pairwise => {
            pair_panel(file, (0, 1), &Panel { ox: 0.0, oy: 0.0 }, opts, &mut body);
            1
        }
        d if d >= 2 && opts.pairwise => {
            let pairs: Vec<(usize, usize)> = (0..d).flat_map(|i| (i + 1..d).map(move |j| (i, j))).collect();
            let cols = pairs.len().min(MAX_COLUMNS);
            for (n, &pair) in pairs.iter().enumerate() {
                let panel = Panel { ox: (n % cols) as f64 * PANEL_W, oy: (n / cols) as f64 * PANEL_H };
                pair_panel(file, pair, &panel, opts, &mut body);
            }
            pairs.len()
        }
        d => {
            return Err(PcpError::Config(format!(
                "cannot draw {d}-dimensional sets directly; use pairwise mode (pcp plot --pairwise)"
            )))
        }
    };
    Ok(document(&body, panels))
}

/// Number of disjoint intervals per test point, tallied: components → count.
pub fn interval_histogram(file: &SetsFile) -> Result<BTreeMap<usize, usize>> {
    if file.d != 1 {
        return Err(PcpError::Config(format!("interval histogram needs scalar targets, got d = {}", file.d)));
    }
    let mut hist = BTreeMap::new();
    for p in &file.points {
        let n = p.set.intervals()?.map_or(1, |iv| iv.len());
        *hist.entry(n).or_insert(0) += 1;
    }
    Ok(hist)
}

pub fn histogram_csv(hist: &BTreeMap<usize, usize>) -> String {
    let mut out = String::from("components,count\n");
    for (k, v) in hist {
        let _ = writeln!(out, "{k},{v}");
    }
    out
}

/// Sets files of a run directory, sorted by name.
pub fn load_sets(run_dir: &Path) -> Result<Vec<(String, SetsFile)>> {
    let dir = run_dir.join("sets");
    let entries = fs::read_dir(&dir).map_err(|e| {
        PcpError::Data(format!("cannot read {}: {e} (run with save_sets = true)", dir.display()))
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|path| {
            let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let bytes = fs::read(&path)?;
            let file = serde_json::from_slice(&bytes)
                .map_err(|e| PcpError::Data(format!("{}: {e}", path.display())))?;
            Ok((stem, file))
        })
        .collect()
}

/// Plots every sets file of a run into `<run-dir>/plots`, plus an interval
/// histogram table per file for scalar targets.
pub fn plot_run(run_dir: &Path, opts: &PlotOptions) -> Result<Vec<PathBuf>> {
    let files = load_sets(run_dir)?;
    if files.is_empty() {
        return Err(PcpError::Data(format!("no sets files under {}", run_dir.join("sets").display())));
    }
    let out_dir = run_dir.join("plots");
    let mut rendered = Vec::new();
    for (stem, file) in &files {
        let svg = plot_sets(file, opts)?;
        rendered.push((out_dir.join(format!("{stem}.svg")), svg));
        if file.d == 1 {
            rendered.push((out_dir.join(format!("{stem}_components.csv")), histogram_csv(&interval_histogram(file)?)));
        }
    }
    fs::create_dir_all(&out_dir)?;
    for (path, text) in &rendered {
        write_atomic(path, text.as_bytes())?;
    }
    Ok(rendered.into_iter().map(|(p, _)| p).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Method;
    use crate::experiment::SetRecord;
    use pcp_core::baseline::IntervalBox;
    use pcp_core::geometry::Measure;
    use pcp_core::BallUnionSet;

    fn balls(centers: &[&[f64]], r: f64) -> SavedSet {
        let radius = if r.is_finite() { Radius::Finite(r) } else { Radius::Infinite };
        SavedSet::Balls(BallUnionSet::new(centers.iter().map(|c| c.to_vec()).collect(), radius, NormKind::L2).unwrap())
    }

    fn file(d: usize, points: Vec<(Vec<f64>, bool, SavedSet)>) -> SetsFile {
        SetsFile {
            method: Method::Pcp,
            repetition: 0,
            p: 1,
            d,
            points: points
                .into_iter()
                .enumerate()
                .map(|(i, (y, covered, set))| SetRecord { x: vec![i as f64], y, covered, measure: Measure::Finite(1.0), set })
                .collect(),
        }
    }

    fn count(svg: &str, needle: &str) -> usize {
        svg.matches(needle).count()
    }

    #[test]
    fn one_point_one_interval() {
        let f = file(1, vec![(vec![0.5], true, balls(&[&[0.0], &[0.5]], 1.0))]);
        let svg = plot_sets(&f, &PlotOptions::default()).unwrap();
        assert_eq!(count(&svg, "<line "), 1);
        assert_eq!(count(&svg, "<circle "), 1);
        assert_eq!(count(&svg, r#"class="test covered""#), 1);
        assert_eq!(count(&svg, r#"class="panel""#), 1);
    }

    #[test]
    fn segments_follow_components() {
        let f = file(
            1,
            vec![
                (vec![0.0], true, balls(&[&[0.0], &[10.0]], 1.0)),
                (vec![5.0], false, balls(&[&[0.0]], 1.0)),
                (vec![1.0], true, balls(&[&[0.0]], f64::INFINITY)),
                (vec![2.0], false, SavedSet::Box(IntervalBox { lo: vec![-1.0], hi: vec![1.0], unbounded: false })),
            ],
        );
        let svg = plot_sets(&f, &PlotOptions::default()).unwrap();
        assert_eq!(count(&svg, "<line "), 5);
        assert_eq!(count(&svg, "set infinite"), 1);
        assert_eq!(count(&svg, "test uncovered"), 2);
        assert_eq!(plot_sets(&f, &PlotOptions::default()).unwrap(), svg);
    }

    #[test]
    fn empty_test_set_is_refused_and_writes_nothing() {
        let f = file(1, vec![]);
        assert!(matches!(plot_sets(&f, &PlotOptions::default()), Err(PcpError::Precondition(_))));

        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("sets")).unwrap();
        fs::write(dir.path().join("sets/pcp_rep0.json"), serde_json::to_vec(&f).unwrap()).unwrap();
        assert!(plot_run(dir.path(), &PlotOptions::default()).is_err());
        assert!(!dir.path().join("plots").exists());
    }

    #[test]
    fn two_dimensional_outlines() {
        let f = file(
            2,
            vec![
                (vec![0.0, 0.0], true, balls(&[&[0.0, 0.0], &[1.0, 1.0]], 0.5)),
                (vec![3.0, 0.0], false, balls(&[&[0.0, 0.0]], 0.5)),
            ],
        );
        let svg = plot_sets(&f, &PlotOptions { pairwise: false, max_sets: 1 }).unwrap();
        assert_eq!(count(&svg, r#"class="ball""#), 2);
        assert_eq!(count(&svg, r#"class="test "#), 2);
    }

    #[test]
    fn higher_dimensions_need_pairwise_mode() {
        let f = file(3, vec![(vec![0.0, 0.0, 0.0], true, balls(&[&[0.0, 0.0, 0.0]], 1.0))]);
        match plot_sets(&f, &PlotOptions::default()) {
            Err(PcpError::Config(msg)) => assert!(msg.contains("pairwise")),
            other => panic!("expected refusal, got {other:?}"),
        }
        let svg = plot_sets(&f, &PlotOptions { pairwise: true, max_sets: 1 }).unwrap();
        assert_eq!(count(&svg, r#"class="panel""#), 3);
        let f4 = file(4, vec![(vec![0.0; 4], true, balls(&[&[0.0; 4]], 1.0))]);
        let svg = plot_sets(&f4, &PlotOptions { pairwise: true, max_sets: 1 }).unwrap();
        assert_eq!(count(&svg, r#"class="panel""#), 6);
    }

    #[test]
    fn histogram_examples() {
        let f = file(
            1,
            vec![
                (vec![0.0], true, balls(&[&[0.0], &[10.0]], 1.0)),
                (vec![0.0], true, balls(&[&[0.0], &[1.5]], 1.0)),
                (vec![0.0], true, balls(&[&[2.0][..]; 7], 1.0)),
            ],
        );
        let hist = interval_histogram(&f).unwrap();
        assert_eq!(hist, BTreeMap::from([(1, 2), (2, 1)]));
        assert_eq!(histogram_csv(&hist), "components,count\n1,2\n2,1\n");

        let f2 = file(2, vec![(vec![0.0, 0.0], true, balls(&[&[0.0, 0.0]], 1.0))]);
        assert!(matches!(interval_histogram(&f2), Err(PcpError::Config(_))));
    }

    #[test]
    fn histogram_matches_merge_oracle() {
        // Two unit intervals around c1 < c2 form one component iff c2 - c1 <= 2.
        for gap in [0.0, 0.5, 1.9, 2.0, 2.1, 5.0] {
            let f = file(1, vec![(vec![0.0], true, balls(&[&[0.0], &[gap]], 1.0))]);
            let expected = if gap <= 2.0 { 1 } else { 2 };
            assert_eq!(interval_histogram(&f).unwrap(), BTreeMap::from([(expected, 1)]), "gap {gap}");
        }
    }
}
