//! SVG rendering of a logged episode.
//!
//! The first panel shows the prior with the true targets; each further panel
//! is a snapshot taken when the remaining budget first drops below a given
//! fraction, drawing the posterior, the flown primitive curves, a green
//! start dot and a red dot at the current position.

use std::fmt::Write as _;

use crate::envgen::Scenario;
use crate::episode::{EpisodeConfig, EpisodeLog, EpisodeState};
use crate::error::{Error, Result};
use crate::grid::GridDims;

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOptions {
    /// Pixels per grid cell.
    pub scale: usize,
    /// Remaining-budget fractions, one panel each.
    pub snapshots: Vec<f64>,
    /// Points sampled along each primitive curve.
    pub curve_samples: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            scale: 12,
            snapshots: vec![0.7, 0.3, 0.0],
            curve_samples: 8,
        }
    }
}

const GAP: usize = 10;
const TITLE: usize = 18;

struct Panel {
    title: String,
    heat: Vec<f64>,
    path: Vec<[f64; 2]>,
    /// Targets already above the found threshold.
    found: Vec<bool>,
}

fn heat_color(p: f64) -> String {
    let c = (255.0 * (1.0 - p.clamp(0.0, 1.0))).round() as u8;
    format!("#ff{c:02x}{c:02x}")
}

fn draw_heat(svg: &mut String, dims: &GridDims, heat: &[f64], obstacles: &[bool], s: usize) {
    for y in 0..dims.height {
        let mut x = 0;
        while x < dims.width {
            let i = y * dims.width + x;
            let color = if obstacles.get(i).copied().unwrap_or(false) {
                "#333333".to_string()
            } else {
                heat_color(heat[i])
            };
            let mut run = 1;
            while x + run < dims.width {
                let j = i + run;
                let next = if obstacles.get(j).copied().unwrap_or(false) {
                    "#333333".to_string()
                } else {
                    heat_color(heat[j])
                };
                if next != color {
                    break;
                }
                run += 1;
            }
            writeln!(
                svg,
                r#"<rect x="{}" y="{}" width="{}" height="{s}" fill="{color}"/>"#,
                x * s,
                y * s,
                run * s
            )
            .unwrap();
            x += run;
        }
    }
}

/// Replays `log` on `scenario` and draws the prior panel plus one panel per
/// snapshot fraction. Fails if the log does not match the configuration or
/// its recorded positions disagree with the replay; the error names the
/// offending log line.
pub fn render_trajectory(
    config: &EpisodeConfig,
    scenario: &Scenario,
    log: &EpisodeLog,
    opts: &RenderOptions,
) -> Result<String> {
    if opts.scale == 0 || opts.curve_samples == 0 {
        return Err(Error::InvalidArgument("scale and curve_samples must be positive".into()));
    }
    if let Some(f) = opts.snapshots.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(Error::InvalidArgument(format!("snapshot fraction {f} outside [0, 1]")));
    }
    let h = &log.header;
    if h.config_hash != config.hash() {
        return Err(Error::Config(format!(
            "log was recorded under configuration {} but the current one is {}",
            h.config_hash,
            config.hash()
        )));
    }
    let (mut state, _) =
        EpisodeState::reset(config, &scenario.world, &scenario.prior, &scenario.obstacles, h.seed)?;
    if state.agent_cell != h.start_cell || state.node != h.start_node {
        return Err(Error::Parse {
            line: 1,
            message: "start pose differs from the replayed episode".into(),
        });
    }

    let dims = config.dims;
    let cs = dims.cell_size;
    let center = |c: (usize, usize)| [c.0 as f64 + 0.5, c.1 as f64 + 0.5];
    let targets = scenario.world.targets();
    let found_now = |st: &EpisodeState| -> Result<Vec<bool>> {
        targets
            .iter()
            .map(|&c| Ok(st.belief.posterior(c)? > config.params.found_threshold))
            .collect()
    };
    let snapshot = |st: &EpisodeState, path: &[[f64; 2]], f: f64| -> Result<Panel> {
        Ok(Panel {
            title: format!("{:.0}% budget left", 100.0 * f),
            heat: st.belief.posteriors().values,
            path: path.to_vec(),
            found: found_now(st)?,
        })
    };

    // snapshots in order of decreasing fraction; one is due when the next
    // step would leave less than its share of the budget
    let mut order: Vec<usize> = (0..opts.snapshots.len()).collect();
    order.sort_by(|&a, &b| opts.snapshots[b].total_cmp(&opts.snapshots[a]));
    let mut shots: Vec<Option<Panel>> = (0..opts.snapshots.len()).map(|_| None).collect();
    let mut pending = order.into_iter().peekable();
    let mut path = vec![center(state.agent_cell)];

    for (i, rec) in log.steps.iter().enumerate() {
        let line = i + 2;
        let corrupt = |m: String| Error::Parse { line, message: m };
        if rec.node != state.node {
            return Err(corrupt(format!(
                "step starts at node {}, replay is at node {}",
                rec.node, state.node
            )));
        }
        let prim = config
            .graph
            .edges
            .get(state.node)
            .and_then(|es| es.get(rec.edge))
            .ok_or_else(|| corrupt(format!("edge {} does not exist at node {}", rec.edge, state.node)))?
            .clone();
        let after = (state.budget_left - prim.cost).max(0.0);
        while let Some(&k) = pending.peek() {
            let f = opts.snapshots[k];
            if after >= f * h.budget {
                break;
            }
            shots[k] = Some(snapshot(&state, &path, f)?);
            pending.next();
        }
        let origin = center(state.agent_cell);
        state
            .step(config, rec.edge)
            .map_err(|e| corrupt(format!("replay rejected the step: {e}")))?;
        if state.agent_cell != rec.agent_cell {
            return Err(corrupt(format!(
                "recorded cell {:?} differs from replayed cell {:?}",
                rec.agent_cell, state.agent_cell
            )));
        }
        for t in prim.sample_times(opts.curve_samples) {
            let p = prim.position(t);
            path.push([origin[0] + p[0] / cs, origin[1] + p[1] / cs]);
        }
    }
    for k in pending {
        shots[k] = Some(snapshot(&state, &path, opts.snapshots[k])?);
    }

    let mut panels = vec![Panel {
        title: "prior".into(),
        heat: scenario.prior.values.clone(),
        path: vec![path[0]],
        found: vec![false; targets.len()],
    }];
    panels.extend(shots.into_iter().map(|p| p.expect("every snapshot is taken")));
    Ok(draw(&dims, &scenario.obstacles, &targets, &panels, opts.scale))
}

fn draw(
    dims: &GridDims,
    obstacles: &[bool],
    targets: &[(usize, usize)],
    panels: &[Panel],
    s: usize,
) -> String {
    let pw = dims.width * s;
    let ph = dims.height * s;
    let width = panels.len() * pw + (panels.len() + 1) * GAP;
    let height = ph + TITLE + 2 * GAP;
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    )
    .unwrap();
    writeln!(svg, r#"<rect width="{width}" height="{height}" fill="white"/>"#).unwrap();
    let px = |v: f64| v * s as f64;
    for (k, panel) in panels.iter().enumerate() {
        let x0 = GAP + k * (pw + GAP);
        let y0 = GAP + TITLE;
        writeln!(
            svg,
            r#"<text x="{x0}" y="{}" font-family="sans-serif" font-size="13">{}</text>"#,
            GAP + 12,
            panel.title
        )
        .unwrap();
        writeln!(svg, r#"<g class="panel" transform="translate({x0},{y0})">"#).unwrap();
        draw_heat(&mut svg, dims, &panel.heat, obstacles, s);
        writeln!(
            svg,
            r#"<rect class="frame" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        )
        .unwrap();
        for (t, &(x, y)) in targets.iter().enumerate() {
            let fill = if panel.found[t] { "#1f4fd8" } else { "none" };
            writeln!(
                svg,
                r##"<circle class="target" cx="{:.2}" cy="{:.2}" r="{:.2}" fill="{fill}" stroke="#1f4fd8" stroke-width="1.5"/>"##,
                px(x as f64 + 0.5),
                px(y as f64 + 0.5),
                0.35 * s as f64
            )
            .unwrap();
        }
        if panel.path.len() > 1 {
            let pts: Vec<String> = panel
                .path
                .iter()
                .map(|p| format!("{:.2},{:.2}", px(p[0]), px(p[1])))
                .collect();
            writeln!(
                svg,
                r#"<polyline class="path" points="{}" fill="none" stroke="black" stroke-width="1.5"/>"#,
                pts.join(" ")
            )
            .unwrap();
        }
        let start = panel.path[0];
        let end = panel.path[panel.path.len() - 1];
        let r = 0.4 * s as f64;
        writeln!(
            svg,
            r#"<circle class="start" cx="{:.2}" cy="{:.2}" r="{r:.2}" fill="green"/>"#,
            px(start[0]),
            px(start[1])
        )
        .unwrap();
        if k > 0 {
            writeln!(
                svg,
                r#"<circle class="end" cx="{:.2}" cy="{:.2}" r="{r:.2}" fill="red"/>"#,
                px(end[0]),
                px(end[1])
            )
            .unwrap();
        }
        svg.push_str("</g>\n");
    }
    svg.push_str("</svg>\n");
    svg
}
