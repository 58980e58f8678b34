//! Synthetic desk-scale scene generation: agent kinematics, exact oriented
//! box rasterization, center-ray occlusion and ground-truth grid assembly.
//!
//! Everything is expressed in the ego frame at t = 0. Grid cells are indexed
//! `[row, col]`; the continuous cell coordinate of a world point puts integer
//! values at cell centers. Backward flow is stored in cell units.

use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{HgError, Result};

/// Agent class; fixes nominal box size and speed range.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AgentType {
    Vehicle,
    Pedestrian,
    Cyclist,
}

impl AgentType {
    pub fn code(self) -> u8 {
        match self {
            AgentType::Vehicle => 0,
            AgentType::Pedestrian => 1,
            AgentType::Cyclist => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(AgentType::Vehicle),
            1 => Some(AgentType::Pedestrian),
            2 => Some(AgentType::Cyclist),
            _ => None,
        }
    }

    fn nominal_size(self) -> (f32, f32) {
        match self {
            AgentType::Vehicle => (4.6, 2.0),
            AgentType::Pedestrian => (0.7, 0.7),
            AgentType::Cyclist => (1.8, 0.6),
        }
    }

    fn max_speed(self) -> f32 {
        match self {
            AgentType::Vehicle => 4.0,
            AgentType::Pedestrian => 1.4,
            AgentType::Cyclist => 3.0,
        }
    }
}

/// Kinematic state of one agent at one timestep, with its oriented box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentState {
    pub x: f32,
    pub y: f32,
    pub vx: f32,
    pub vy: f32,
    pub heading: f32,
    pub length: f32,
    pub width: f32,
    pub typ: AgentType,
    pub valid: bool,
}

impl AgentState {
    /// Box corners, counter-clockwise.
    pub fn corners(&self) -> [[f32; 2]; 4] {
        let (c, s) = (self.heading.cos(), self.heading.sin());
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        let mut out = [[0.0f32; 2]; 4];
        for (i, (du, dv)) in [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].iter().enumerate() {
            out[i] = [self.x + c * du - s * dv, self.y + s * du + c * dv];
        }
        out
    }
}

/// Geometry and horizon configuration for generated scenes.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SceneConfig {
    pub n_agents: usize,
    pub h: usize,
    pub w: usize,
    pub t_h: usize,
    pub t: usize,
    /// Meters per cell.
    pub resolution: f32,
    pub n_lanes: usize,
    pub waypoints_per_lane: usize,
    /// Seconds per simulation step.
    pub dt: f32,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            n_agents: 12,
            h: 64,
            w: 64,
            t_h: 5,
            t: 4,
            resolution: 0.5,
            n_lanes: 3,
            waypoints_per_lane: 10,
            dt: 0.5,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=32).contains(&self.n_agents) {
            return Err(HgError::InvalidConfig(format!(
                "n_agents {} outside [2, 32]",
                self.n_agents
            )));
        }
        if self.h != self.w || ![32usize, 64, 128].contains(&self.h) {
            return Err(HgError::InvalidConfig(format!(
                "grid {}x{} must be square with side in {{32, 64, 128}}",
                self.h, self.w
            )));
        }
        if self.t_h < 2 {
            return Err(HgError::InvalidConfig("t_h must be >= 2".into()));
        }
        if self.t < 1 {
            return Err(HgError::InvalidConfig("t must be >= 1".into()));
        }
        if self.resolution <= 0.0 {
            return Err(HgError::InvalidConfig("resolution must be > 0".into()));
        }
        let extent = self.h as f32 * self.resolution;
        let (veh_len, _) = AgentType::Vehicle.nominal_size();
        if extent < 2.0 * veh_len {
            return Err(HgError::InvalidConfig(format!(
                "grid extent {extent:.1} m cannot fit agents (need >= {:.1} m)",
                2.0 * veh_len
            )));
        }
        Ok(())
    }

    pub fn extent(&self) -> f32 {
        self.h as f32 * self.resolution
    }

    /// Continuous cell coordinate (col, row) of a world point; integers sit
    /// at cell centers.
    pub fn world_to_cell(&self, x: f32, y: f32) -> (f32, f32) {
        (
            x / self.resolution + self.w as f32 / 2.0 - 0.5,
            y / self.resolution + self.h as f32 / 2.0 - 0.5,
        )
    }

    /// World coordinates of a cell center.
    pub fn cell_center(&self, row: usize, col: usize) -> (f32, f32) {
        (
            (col as f32 + 0.5 - self.w as f32 / 2.0) * self.resolution,
            (row as f32 + 0.5 - self.h as f32 / 2.0) * self.resolution,
        )
    }
}

/// One complete training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// `[N_A][T_h+1]`, timesteps -T_h..0, ego frame at t = 0.
    pub agent_histories: Vec<Vec<AgentState>>,
    pub map_polylines: Vec<Vec<[f32; 2]>>,
    /// `[T_h+1, H, W]` fractional coverage in [0, 1].
    pub hist_occupancy: Array3<f32>,
    /// `[T_h, H, W, 2]` cell units; frame i holds flow from step i+1 back to i.
    pub hist_backward_flow: Array4<f32>,
    /// `[H, W, 3]`: lanes, road boundary, signal blob.
    pub map_raster: Array3<f32>,
    /// `[T, H, W]` binary.
    pub gt_observed: Array3<f32>,
    /// `[T, H, W]` binary, disjoint from `gt_observed`.
    pub gt_occluded: Array3<f32>,
    /// `[T, H, W, 2]` cell units, zero at unoccupied cells.
    pub gt_flow: Array4<f32>,
    pub ego_index: usize,
}

fn wrap_angle(a: f32) -> f32 {
    let two_pi = 2.0 * std::f32::consts::PI;
    (a + std::f32::consts::PI).rem_euclid(two_pi) - std::f32::consts::PI
}

// ---- polygon geometry ----

fn polygon_area(poly: &[[f32; 2]]) -> f32 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut s = 0f64;
    for i in 0..poly.len() {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % poly.len()];
        s += x0 as f64 * y1 as f64 - x1 as f64 * y0 as f64;
    }
    (s.abs() / 2.0) as f32
}

/// Sutherland-Hodgman clip of a convex polygon against an axis-aligned
/// rectangle.
fn clip_polygon_to_rect(poly: &[[f32; 2]], x0: f32, y0: f32, x1: f32, y1: f32) -> Vec<[f32; 2]> {
    // Each clip edge keeps points with keep(p) >= 0.
    type Edge = (usize, f32, bool);
    // (axis, bound, keep_greater)
    let edges: [Edge; 4] = [(0, x0, true), (0, x1, false), (1, y0, true), (1, y1, false)];
    let mut cur: Vec<[f32; 2]> = poly.to_vec();
    for &(axis, bound, keep_greater) in &edges {
        if cur.is_empty() {
            break;
        }
        let inside = |p: &[f32; 2]| {
            if keep_greater {
                p[axis] >= bound
            } else {
                p[axis] <= bound
            }
        };
        let mut next = Vec::with_capacity(cur.len() + 2);
        for i in 0..cur.len() {
            let a = cur[i];
            let b = cur[(i + 1) % cur.len()];
            let (ia, ib) = (inside(&a), inside(&b));
            if ia {
                next.push(a);
            }
            if ia != ib {
                let t = (bound - a[axis]) / (b[axis] - a[axis]);
                let mut p = [0f32; 2];
                p[axis] = bound;
                p[1 - axis] = a[1 - axis] + t * (b[1 - axis] - a[1 - axis]);
                next.push(p);
            }
        }
        cur = next;
    }
    cur
}

/// Fraction of the cell `[row, col]` covered by the agent's box, exact up
/// to float rounding (polygon clipping, not sampling).
fn cell_coverage(cfg: &SceneConfig, agent: &AgentState, row: usize, col: usize) -> f32 {
    let (cx, cy) = cfg.cell_center(row, col);
    let half = cfg.resolution / 2.0;
    let clipped = clip_polygon_to_rect(
        &agent.corners(),
        cx - half,
        cy - half,
        cx + half,
        cy + half,
    );
    polygon_area(&clipped) / (cfg.resolution * cfg.resolution)
}

/// Adds one agent's exact coverage into `grid`, returning the list of
/// touched cells and their coverage.
fn splat_box(cfg: &SceneConfig, agent: &AgentState, grid: &mut Array2<f32>) -> Vec<(usize, usize, f32)> {
    let corners = agent.corners();
    let (mut cmin, mut cmax, mut rmin, mut rmax) = (f32::MAX, f32::MIN, f32::MAX, f32::MIN);
    for c in &corners {
        let (cc, rr) = cfg.world_to_cell(c[0], c[1]);
        cmin = cmin.min(cc);
        cmax = cmax.max(cc);
        rmin = rmin.min(rr);
        rmax = rmax.max(rr);
    }
    let r0 = (rmin.floor().max(0.0)) as usize;
    let c0 = (cmin.floor().max(0.0)) as usize;
    if rmin > cfg.h as f32 || cmin > cfg.w as f32 || rmax < -1.0 || cmax < -1.0 {
        return Vec::new();
    }
    let r1 = (rmax.ceil() as isize).clamp(0, cfg.h as isize - 1) as usize;
    let c1 = (cmax.ceil() as isize).clamp(0, cfg.w as isize - 1) as usize;
    let mut touched = Vec::new();
    for row in r0..=r1 {
        for col in c0..=c1 {
            let cov = cell_coverage(cfg, agent, row, col);
            if cov > 0.0 {
                grid[[row, col]] += cov;
                touched.push((row, col, cov));
            }
        }
    }
    touched
}

/// Fraction of each cell covered by any agent's oriented box, clipped to
/// [0, 1]. Overlapping boxes accumulate by sum before clipping, which is
/// exact whenever boxes are disjoint.
pub fn rasterize_occupancy(cfg: &SceneConfig, agents: &[AgentState]) -> Array2<f32> {
    let mut grid = Array2::<f32>::zeros((cfg.h, cfg.w));
    for a in agents {
        if a.valid {
            splat_box(cfg, a, &mut grid);
        }
    }
    grid.mapv_inplace(|v| v.min(1.0));
    grid
}

// ---- occlusion ----

/// True if segment p0 -> p1 intersects the agent's oriented box (slab test
/// in the box frame).
pub fn segment_intersects_box(p0: [f32; 2], p1: [f32; 2], b: &AgentState) -> bool {
    let (c, s) = (b.heading.cos(), b.heading.sin());
    let to_local = |p: [f32; 2]| {
        let dx = p[0] - b.x;
        let dy = p[1] - b.y;
        [c * dx + s * dy, -s * dx + c * dy]
    };
    let a = to_local(p0);
    let d = {
        let e = to_local(p1);
        [e[0] - a[0], e[1] - a[1]]
    };
    let half = [b.length / 2.0, b.width / 2.0];
    let (mut t0, mut t1) = (0f32, 1f32);
    for axis in 0..2 {
        if d[axis].abs() < 1e-12 {
            if a[axis].abs() > half[axis] {
                return false;
            }
        } else {
            let inv = 1.0 / d[axis];
            let mut ta = (-half[axis] - a[axis]) * inv;
            let mut tb = (half[axis] - a[axis]) * inv;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return false;
            }
        }
    }
    true
}

/// Per-agent occlusion flags: an agent is occluded iff the ray from the ego
/// center to its center crosses some other valid agent's box. The ego is
/// never occluded; invalid agents are reported unoccluded.
pub fn compute_occlusion(agents: &[AgentState], ego_index: usize) -> Vec<bool> {
    assert!(!agents.is_empty(), "compute_occlusion needs >= 1 agent");
    let ego = &agents[ego_index];
    let p0 = [ego.x, ego.y];
    (0..agents.len())
        .map(|i| {
            if i == ego_index || !agents[i].valid {
                return false;
            }
            let p1 = [agents[i].x, agents[i].y];
            agents.iter().enumerate().any(|(j, blocker)| {
                j != i && j != ego_index && blocker.valid && segment_intersects_box(p0, p1, blocker)
            })
        })
        .collect()
}

// ---- ground-truth assembly ----

/// Occupancy split and backward flow for one future step. `frames[k]` holds
/// all agents at simulation step k; flow at a cell comes from the agent with
/// the largest coverage there ("the agent occupying x").
pub struct StepGroundTruth {
    pub observed: Array2<f32>,
    pub occluded: Array2<f32>,
    pub flow: Array3<f32>,
}

/// Builds binary observed/occluded grids and backward flow for the step
/// `cur`, using agent centers at `cur - 1` for the flow displacement.
/// The ego itself is never rasterized (it carries the sensor).
pub fn build_step_ground_truth(
    cfg: &SceneConfig,
    prev: &[AgentState],
    cur: &[AgentState],
    ego_index: usize,
) -> StepGroundTruth {
    let occl_flags = compute_occlusion(cur, ego_index);
    let mut obs_cov = Array2::<f32>::zeros((cfg.h, cfg.w));
    let mut occl_cov = Array2::<f32>::zeros((cfg.h, cfg.w));
    let mut best_cov = Array2::<f32>::zeros((cfg.h, cfg.w));
    let mut flow = Array3::<f32>::zeros((cfg.h, cfg.w, 2));
    for (i, a) in cur.iter().enumerate() {
        if i == ego_index || !a.valid {
            continue;
        }
        let target = if occl_flags[i] { &mut occl_cov } else { &mut obs_cov };
        let touched = splat_box(cfg, a, target);
        let dx = (prev[i].x - a.x) / cfg.resolution;
        let dy = (prev[i].y - a.y) / cfg.resolution;
        for (row, col, cov) in touched {
            if cov > best_cov[[row, col]] {
                best_cov[[row, col]] = cov;
                flow[[row, col, 0]] = dx;
                flow[[row, col, 1]] = dy;
            }
        }
    }
    let mut observed = Array2::<f32>::zeros((cfg.h, cfg.w));
    let mut occluded = Array2::<f32>::zeros((cfg.h, cfg.w));
    for row in 0..cfg.h {
        for col in 0..cfg.w {
            let obs = obs_cov[[row, col]] > 0.5;
            let occ = occl_cov[[row, col]] > 0.5 && !obs;
            observed[[row, col]] = if obs { 1.0 } else { 0.0 };
            occluded[[row, col]] = if occ { 1.0 } else { 0.0 };
            if !obs && !occ {
                flow[[row, col, 0]] = 0.0;
                flow[[row, col, 1]] = 0.0;
            }
        }
    }
    StepGroundTruth { observed, occluded, flow }
}

// ---- simulation ----

struct AgentSpec {
    typ: AgentType,
    length: f32,
    width: f32,
    first_valid_frame: usize,
}

/// Simulates one scene. Agents follow constant-turn-rate-and-velocity
/// kinematics with bounded uniform perturbations; everything is then
/// re-expressed in the ego frame at t = 0. Deterministic in (seed, cfg).
pub fn simulate_scene(seed: u64, cfg: &SceneConfig) -> Result<SceneSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames_total = cfg.t_h + 1 + cfg.t;
    let ego_index = 0usize;
    let lo = 2.max(cfg.n_agents / 2);
    let n_agents = rng.random_range(lo..=cfg.n_agents);

    // Spawn specs and initial world states (ego starts at the origin).
    let mut specs = Vec::with_capacity(n_agents);
    let mut states = Vec::with_capacity(n_agents);
    let spawn_radius = 0.38 * cfg.extent();
    for i in 0..n_agents {
        let typ = if i == ego_index {
            AgentType::Vehicle
        } else {
            match rng.random_range(0..4u32) {
                0 | 1 => AgentType::Vehicle,
                2 => AgentType::Pedestrian,
                _ => AgentType::Cyclist,
            }
        };
        let (nl, nw) = typ.nominal_size();
        let jitter = 0.9 + 0.2 * rng.random::<f32>();
        let (length, width) = (nl * jitter, nw * jitter);
        let (x, y) = if i == ego_index {
            (0.0, 0.0)
        } else {
            loop {
                let r = spawn_radius * rng.random::<f32>().sqrt();
                let a = rng.random_range(-std::f32::consts::PI..std::f32::consts::PI);
                let (px, py) = (r * a.cos(), r * a.sin());
                if (px * px + py * py).sqrt() > 3.0 {
                    break (px, py);
                }
            }
        };
        let heading = rng.random_range(-std::f32::consts::PI..std::f32::consts::PI);
        let speed = if rng.random::<f32>() < 0.2 {
            0.0
        } else {
            typ.max_speed() * rng.random_range(0.3..1.0)
        };
        let first_valid_frame = if i != ego_index && rng.random::<f32>() < 0.15 {
            rng.random_range(1..=cfg.t_h)
        } else {
            0
        };
        specs.push(AgentSpec { typ, length, width, first_valid_frame });
        states.push((x, y, heading, speed, rng.random_range(-0.2..0.2f32)));
    }

    // Roll the kinematics over all frames in the world frame.
    let mut world: Vec<Vec<AgentState>> = Vec::with_capacity(frames_total);
    for frame in 0..frames_total {
        let mut frame_states = Vec::with_capacity(n_agents);
        for (i, spec) in specs.iter().enumerate() {
            let (x, y, heading, speed, _omega) = states[i];
            frame_states.push(AgentState {
                x,
                y,
                vx: speed * heading.cos(),
                vy: speed * heading.sin(),
                heading: wrap_angle(heading),
                length: spec.length,
                width: spec.width,
                typ: spec.typ,
                valid: frame >= spec.first_valid_frame,
            });
        }
        world.push(frame_states);
        if frame + 1 < frames_total {
            for (i, spec) in specs.iter().enumerate() {
                let (x, y, heading, speed, omega) = states[i];
                let h2 = heading + omega * cfg.dt + rng.random_range(-0.02..0.02);
                let s2 = (speed + rng.random_range(-0.1..0.1f32))
                    .clamp(0.0, spec.typ.max_speed());
                let s2 = if speed == 0.0 { 0.0 } else { s2 };
                states[i] = (
                    x + s2 * h2.cos() * cfg.dt,
                    y + s2 * h2.sin() * cfg.dt,
                    h2,
                    s2,
                    omega,
                );
            }
        }
    }

    // Ego pose at t = 0 defines the output frame.
    let ego_t0 = world[cfg.t_h][ego_index];
    let (ec, es) = (ego_t0.heading.cos(), ego_t0.heading.sin());
    let to_ego = |a: &AgentState| -> AgentState {
        let dx = a.x - ego_t0.x;
        let dy = a.y - ego_t0.y;
        AgentState {
            x: ec * dx + es * dy,
            y: -es * dx + ec * dy,
            vx: ec * a.vx + es * a.vy,
            vy: -es * a.vx + ec * a.vy,
            heading: wrap_angle(a.heading - ego_t0.heading),
            ..*a
        }
    };
    let frames: Vec<Vec<AgentState>> =
        world.iter().map(|fr| fr.iter().map(to_ego).collect()).collect();

    // Lanes in the ego frame.
    let map_polylines = gen_lanes(cfg, &mut rng, ec, es, ego_t0.x, ego_t0.y);

    // History rasters.
    let mut hist_occupancy = Array3::<f32>::zeros((cfg.t_h + 1, cfg.h, cfg.w));
    for j in 0..=cfg.t_h {
        let others: Vec<AgentState> = frames[j]
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != ego_index)
            .map(|(_, a)| *a)
            .collect();
        hist_occupancy
            .index_axis_mut(ndarray::Axis(0), j)
            .assign(&rasterize_occupancy(cfg, &others));
    }
    let mut hist_backward_flow = Array4::<f32>::zeros((cfg.t_h, cfg.h, cfg.w, 2));
    for j in 1..=cfg.t_h {
        let gt = build_step_ground_truth(cfg, &frames[j - 1], &frames[j], ego_index);
        hist_backward_flow
            .index_axis_mut(ndarray::Axis(0), j - 1)
            .assign(&gt.flow);
    }

    // Future ground truth.
    let mut gt_observed = Array3::<f32>::zeros((cfg.t, cfg.h, cfg.w));
    let mut gt_occluded = Array3::<f32>::zeros((cfg.t, cfg.h, cfg.w));
    let mut gt_flow = Array4::<f32>::zeros((cfg.t, cfg.h, cfg.w, 2));
    for step in 1..=cfg.t {
        let frame = cfg.t_h + step;
        let gt = build_step_ground_truth(cfg, &frames[frame - 1], &frames[frame], ego_index);
        gt_observed.index_axis_mut(ndarray::Axis(0), step - 1).assign(&gt.observed);
        gt_occluded.index_axis_mut(ndarray::Axis(0), step - 1).assign(&gt.occluded);
        gt_flow.index_axis_mut(ndarray::Axis(0), step - 1).assign(&gt.flow);
    }

    let map_raster = rasterize_map(cfg, &map_polylines, &mut rng);

    let agent_histories: Vec<Vec<AgentState>> = (0..n_agents)
        .map(|i| (0..=cfg.t_h).map(|j| frames[j][i]).collect())
        .collect();

    Ok(SceneSample {
        agent_histories,
        map_polylines,
        hist_occupancy,
        hist_backward_flow,
        map_raster,
        gt_observed,
        gt_occluded,
        gt_flow,
        ego_index,
    })
}

fn gen_lanes(
    cfg: &SceneConfig,
    rng: &mut ChaCha8Rng,
    ec: f32,
    es: f32,
    ex: f32,
    ey: f32,
) -> Vec<Vec<[f32; 2]>> {
    let extent = cfg.extent();
    let mut lanes = Vec::with_capacity(cfg.n_lanes);
    for _ in 0..cfg.n_lanes {
        let start_r = 0.45 * extent;
        let a0 = rng.random_range(-std::f32::consts::PI..std::f32::consts::PI);
        let (mut x, mut y) = (start_r * a0.cos() + ex, start_r * a0.sin() + ey);
        // Aim roughly across the grid with some curvature.
        let mut dir = a0 + std::f32::consts::PI + rng.random_range(-0.4..0.4);
        let curve = rng.random_range(-0.06..0.06f32);
        let step = 1.1 * extent / cfg.waypoints_per_lane as f32;
        let mut lane = Vec::with_capacity(cfg.waypoints_per_lane);
        for _ in 0..cfg.waypoints_per_lane {
            let dx = x - ex;
            let dy = y - ey;
            lane.push([ec * dx + es * dy, -es * dx + ec * dy]);
            x += step * dir.cos();
            y += step * dir.sin();
            dir += curve;
        }
        lanes.push(lane);
    }
    lanes
}

fn rasterize_map(cfg: &SceneConfig, lanes: &[Vec<[f32; 2]>], rng: &mut ChaCha8Rng) -> Array3<f32> {
    let mut raster = Array3::<f32>::zeros((cfg.h, cfg.w, 3));
    // Channel 0: lane polylines, marked by dense sampling along segments.
    for lane in lanes {
        for seg in lane.windows(2) {
            let [x0, y0] = seg[0];
            let [x1, y1] = seg[1];
            let len = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
            let steps = (len / (cfg.resolution * 0.5)).ceil().max(1.0) as usize;
            for k in 0..=steps {
                let t = k as f32 / steps as f32;
                let (cc, rr) = cfg.world_to_cell(x0 + t * (x1 - x0), y0 + t * (y1 - y0));
                let (col, row) = (cc.round(), rr.round());
                if row >= 0.0 && col >= 0.0 && (row as usize) < cfg.h && (col as usize) < cfg.w {
                    raster[[row as usize, col as usize, 0]] = 1.0;
                }
            }
        }
    }
    // Channel 1: road boundary ring inset two cells from the grid edge.
    for row in 0..cfg.h {
        for col in 0..cfg.w {
            let d = row.min(col).min(cfg.h - 1 - row).min(cfg.w - 1 - col);
            if d == 2 {
                raster[[row, col, 1]] = 1.0;
            }
        }
    }
    // Channel 2: one synthetic signal blob at a random lane waypoint.
    if !lanes.is_empty() {
        let lane = &lanes[rng.random_range(0..lanes.len())];
        let wp = lane[rng.random_range(0..lane.len())];
        let (cc, rr) = cfg.world_to_cell(wp[0], wp[1]);
        let (cc, rr) = (
            cc.clamp(0.0, cfg.w as f32 - 1.0),
            rr.clamp(0.0, cfg.h as f32 - 1.0),
        );
        let sigma2 = 2.0f32 * 2.0;
        for row in 0..cfg.h {
            for col in 0..cfg.w {
                let d2 = (row as f32 - rr).powi(2) + (col as f32 - cc).powi(2);
                let v = (-d2 / (2.0 * sigma2)).exp();
                if v > 1e-3 {
                    raster[[row, col, 2]] = v;
                }
            }
        }
    }
    raster
}

/// Bilinear lookup on a `[H, W]` grid at continuous (col, row), zero
/// outside; the same kernel the model's sampler uses.
pub fn bilinear_grid(grid: &Array2<f32>, col: f32, row: f32) -> f32 {
    let (h, w) = (grid.shape()[0] as isize, grid.shape()[1] as isize);
    let c0 = col.floor();
    let r0 = row.floor();
    let fc = col - c0;
    let fr = row - r0;
    let mut acc = 0f32;
    for (dr, wr) in [(0isize, 1.0 - fr), (1, fr)] {
        for (dc, wc) in [(0isize, 1.0 - fc), (1, fc)] {
            let rr = r0 as isize + dr;
            let cc = c0 as isize + dc;
            let wgt = wr * wc;
            if wgt != 0.0 && rr >= 0 && cc >= 0 && rr < h && cc < w {
                acc += wgt * grid[[rr as usize, cc as usize]];
            }
        }
    }
    acc
}

/// Mean absolute error of warping occupancy at step t back to step t-1
/// through the ground-truth backward flow, averaged over all cells and
/// future steps. Small values certify flow/occupancy consistency.
pub fn warp_consistency_mae(sample: &SceneSample) -> f32 {
    let (t_steps, h, w) = (
        sample.gt_observed.shape()[0],
        sample.gt_observed.shape()[1],
        sample.gt_observed.shape()[2],
    );
    let occ_at = |step: isize| -> Array2<f32> {
        let mut g = Array2::<f32>::zeros((h, w));
        if step < 0 {
            let hist = sample.hist_occupancy.index_axis(ndarray::Axis(0), sample.hist_occupancy.shape()[0] - 1);
            g.assign(&hist.mapv(|v| if v > 0.5 { 1.0 } else { 0.0 }));
        } else {
            let s = step as usize;
            for row in 0..h {
                for col in 0..w {
                    let v = sample.gt_observed[[s, row, col]] + sample.gt_occluded[[s, row, col]];
                    g[[row, col]] = if v > 0.5 { 1.0 } else { 0.0 };
                }
            }
        }
        g
    };
    let mut total = 0f64;
    let mut count = 0usize;
    for step in 0..t_steps {
        let prev = occ_at(step as isize - 1);
        let cur = occ_at(step as isize);
        for row in 0..h {
            for col in 0..w {
                let fx = sample.gt_flow[[step, row, col, 0]];
                let fy = sample.gt_flow[[step, row, col, 1]];
                let warped = bilinear_grid(&prev, col as f32 + fx, row as f32 + fy);
                total += (warped - cur[[row, col]]).abs() as f64;
                count += 1;
            }
        }
    }
    (total / count as f64) as f32
}
