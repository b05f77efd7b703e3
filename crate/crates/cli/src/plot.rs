//! Per-time CSV dumps and a static SVG line chart.

use std::fmt::Write as _;

use anyhow::{Context, Result};
use fluxfno::data::read_dataset;
use fluxfno::GridFunction;

use crate::commands::reference_at;
use crate::{PlotArgs, Usage};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 40.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

/// One requested time: the stored time actually used and both profiles.
pub struct Slice {
    pub time: f64,
    pub pred: Vec<f64>,
    pub reference: Vec<f64>,
}

fn nearest(times: &[f64], t: f64) -> usize {
    times
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
        .map(|(k, _)| k)
        .expect("trajectories hold at least one state")
}

pub fn plot(a: PlotArgs) -> Result<()> {
    let ds = read_dataset(&a.traj).with_context(|| format!("reading {}", a.traj.display()))?;
    if a.index >= ds.n_funcs() {
        return Err(Usage(format!("--index {} out of range", a.index)).into());
    }
    if let Some(t) = a.times.iter().find(|t| !(**t >= 0.0 && t.is_finite())) {
        return Err(Usage(format!("time {t} is not a non-negative number")).into());
    }
    let traj = ds.trajectory(a.index);
    let times = traj.times();
    let reference = a
        .reference
        .as_deref()
        .map(|p| read_dataset(p).with_context(|| format!("reading {}", p.display())))
        .transpose()?;
    if let Some(r) = &reference {
        if r.nx() != ds.nx() || a.index >= r.n_funcs() {
            return Err(
                Usage("reference trajectory does not match the rollout grid".into()).into(),
            );
        }
    }
    let header = ds.header();
    let u0 = &traj.states()[0];

    let mut slices = Vec::with_capacity(a.times.len());
    for &t in &a.times {
        let k = nearest(&times, t);
        let time = times[k];
        let ref_state: GridFunction = match &reference {
            Some(r) => {
                let rt: Vec<f64> = (0..=r.n_steps()).map(|j| r.time(j)).collect();
                r.grid_state(a.index, nearest(&rt, time))
            }
            None => reference_at(header.equation, header.advection_speed(), u0, time)?,
        };
        slices.push(Slice {
            time,
            pred: traj.states()[k].values().to_vec(),
            reference: ref_state.into_values(),
        });
    }

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (s, &requested) in slices.iter().zip(&a.times) {
        let path = a.out.join(format!("t_{requested:.6}.csv"));
        std::fs::write(&path, csv(s)).with_context(|| format!("writing {}", path.display()))?;
    }
    if a.svg {
        let path = a.out.join("plot.svg");
        std::fs::write(&path, svg(&slices))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    eprintln!("wrote {} time slices to {}", slices.len(), a.out.display());
    Ok(())
}

/// Columns `x,u_pred,u_ref`, one row per cell.
pub fn csv(s: &Slice) -> String {
    let n = s.pred.len();
    let mut out = String::from("x,u_pred,u_ref\n");
    for j in 0..n {
        let _ = writeln!(
            out,
            "{},{},{}",
            j as f64 / n as f64,
            s.pred[j],
            s.reference[j]
        );
    }
    out
}

fn polyline(values: &[f64], sx: impl Fn(f64) -> f64, sy: impl Fn(f64) -> f64) -> String {
    let n = values.len();
    let mut pts = String::new();
    for (j, v) in values.iter().enumerate() {
        if j > 0 {
            pts.push(' ');
        }
        let _ = write!(pts, "{:.2},{:.2}", sx(j as f64 / n as f64), sy(*v));
    }
    pts
}

/// Solid lines for predictions, dashed for references, one colour per time.
pub fn svg(slices: &[Slice]) -> String {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in slices {
        for &v in s.pred.iter().chain(&s.reference) {
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    if lo >= hi {
        let c = if lo.is_finite() { lo } else { 0.0 };
        (lo, hi) = (c - 1.0, c + 1.0);
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + x * pw;
    let sy = |y: f64| TOP + (hi - y.clamp(lo, hi)) / (hi - lo) * ph;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        out,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        out,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let x = i as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{x}</text>"#,
            sx(x),
            HEIGHT - BOTTOM + 16.0
        );
        let y = lo + (hi - lo) * i as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{y:.3}</text>"#,
            LEFT - 6.0,
            sy(y) + 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">x</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 6.0
    );
    for (i, s) in slices.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            polyline(&s.pred, sx, sy)
        );
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1" stroke-dasharray="4 3" points="{}"/>"#,
            polyline(&s.reference, sx, sy)
        );
        let ly = TOP + 16.0 + 18.0 * i as f64;
        let lx = WIDTH - RIGHT + 12.0;
        let _ = writeln!(
            out,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="1.5"/>"#,
            lx + 20.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}">t = {}</text>"#,
            lx + 26.0,
            ly + 4.0,
            s.time
        );
    }
    let note_y = TOP + 16.0 + 18.0 * slices.len() as f64 + 8.0;
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{note_y}" font-size="10">solid: prediction</text>"#,
        WIDTH - RIGHT + 12.0
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" font-size="10">dashed: reference</text>"#,
        WIDTH - RIGHT + 12.0,
        note_y + 14.0
    );
    out.push_str("</svg>\n");
    out
}
