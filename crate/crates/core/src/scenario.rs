//! Synthetic safety-critical scenes.
//!
//! Every scene has an ego plan, one scripted adversary (frontal, side or
//! stationary) and a handful of background agents. Each agent carries a
//! multimodal forecast and a true future trajectory; the true trajectory
//! is one of the forecast modes plus bounded noise. Labels come from a
//! geometric oracle on the true trajectories.
//!
//! [`embed_scene`] turns a scene into a [`Sample`]: the perceived forecasts
//! (perception noise, missed detections) are stored as trajectory tensors
//! and mapped through a fixed random projection to surrogate plan and
//! motion queries.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dims, Sample};
use crate::error::{Error, Result};
use crate::rng;

pub type Point = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    Frontal,
    Side,
    Stationary,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 3] = [
        ScenarioKind::Frontal,
        ScenarioKind::Side,
        ScenarioKind::Stationary,
    ];

    pub fn index(self) -> usize {
        match self {
            ScenarioKind::Frontal => 0,
            ScenarioKind::Side => 1,
            ScenarioKind::Stationary => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Frontal => "frontal",
            ScenarioKind::Side => "side",
            ScenarioKind::Stationary => "stationary",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EgoPlan {
    pub waypoints: Vec<Point>,
}

impl EgoPlan {
    pub fn horizon(&self) -> usize {
        self.waypoints.len()
    }
}

/// Multimodal forecast for one agent: `modes[m][k]` is the predicted
/// position of mode `m` at future step `k + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentForecast {
    pub modes: Vec<Vec<Point>>,
    pub weights: Vec<f64>,
}

/// Current kinematic state of an agent. `accel` and `yaw_rate` describe the
/// manoeuvre the agent has actually started; they are what a perception
/// stack would observe as the intent cue.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState {
    pub position: Point,
    pub velocity: Point,
    pub accel: f64,
    pub yaw_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub kind: ScenarioKind,
    pub sequence_id: u64,
    /// Global scene id, unique across kinds.
    pub id: u64,
    pub ego_speed: f64,
    pub ego_yaw_rate: f64,
    pub ego_plan: EgoPlan,
    pub agents: Vec<AgentForecast>,
    pub agent_states: Vec<AgentState>,
    pub agent_truth: Vec<Vec<Point>>,
    /// Index into `agents` of the scripted adversary.
    pub adversary: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub seed: u64,
    pub scenes_per_kind: usize,
    /// Number of recording sequences for frontal, side and stationary scenes.
    pub sequences_per_kind: [usize; 3],
    pub horizon: usize,
    pub n_agents: usize,
    pub n_modes: usize,
    pub d: usize,
    /// Seconds between consecutive waypoints.
    pub dt: f64,
    pub safety_distance: f64,
    pub perception_noise_sigma: f64,
    pub miss_rate: f64,
    /// Standard deviation of the per-sequence offset added to the embedding
    /// pre-activations (the appearance gap between recordings).
    pub domain_shift: f64,
    /// Logit boost the forecaster gives to the mode the agent will follow.
    pub forecast_confidence: f64,
    /// Scale of the noise on the observed manoeuvre cue.
    pub cue_noise: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            scenes_per_kind: 400,
            sequences_per_kind: [5, 5, 10],
            horizon: 6,
            n_agents: 8,
            n_modes: 6,
            d: 64,
            dt: 0.5,
            safety_distance: 2.0,
            perception_noise_sigma: 0.5,
            miss_rate: 0.1,
            domain_shift: 0.2,
            forecast_confidence: 1.0,
            cue_noise: 0.3,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.safety_distance > 0.0 && self.safety_distance.is_finite()) {
            return bad(format!(
                "safety_distance must be > 0, got {}",
                self.safety_distance
            ));
        }
        if !(0.0..1.0).contains(&self.miss_rate) {
            return bad(format!(
                "miss_rate must lie in [0, 1), got {}",
                self.miss_rate
            ));
        }
        if self.d < 4 {
            return bad(format!("d must be >= 4, got {}", self.d));
        }
        if self.horizon < 1 || self.n_modes < 1 {
            return bad("horizon and n_modes must be >= 1".into());
        }
        if self.n_agents < 1 {
            return bad("n_agents must be >= 1".into());
        }
        if !(self.dt > 0.0) {
            return bad(format!("dt must be > 0, got {}", self.dt));
        }
        for (name, v) in [
            ("perception_noise_sigma", self.perception_noise_sigma),
            ("domain_shift", self.domain_shift),
            ("cue_noise", self.cue_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !self.forecast_confidence.is_finite() {
            return bad("forecast_confidence must be finite".into());
        }
        if self.sequences_per_kind.iter().any(|&s| s == 0) {
            return bad("every scenario kind needs at least one sequence".into());
        }
        Ok(())
    }

    pub fn dims(&self) -> Dims {
        Dims {
            horizon: self.horizon,
            agents: self.n_agents,
            modes: self.n_modes,
            d: self.d,
        }
    }

    /// First global sequence id of `kind`.
    pub fn sequence_offset(&self, kind: ScenarioKind) -> u64 {
        self.sequences_per_kind[..kind.index()]
            .iter()
            .sum::<usize>() as u64
    }

    pub fn sequence_of(&self, kind: ScenarioKind, index: usize) -> u64 {
        self.sequence_offset(kind) + (index % self.sequences_per_kind[kind.index()]) as u64
    }

    pub fn total_sequences(&self) -> usize {
        self.sequences_per_kind.iter().sum()
    }
}

// Stream tags for rng::stream.
const TAG_SEQUENCE: u64 = 1;
const TAG_SCENE: u64 = 2;
const TAG_PERCEPTION: u64 = 3;
const TAG_DOMAIN: u64 = 4;
const TAG_PROJECTION: u64 = 5;

/// Manoeuvre profiles for moving agents: (longitudinal accel m/s², yaw rate rad/s).
const MOVING_PROFILES: [(f64, f64); 8] = [
    (0.0, 0.0),
    (-2.0, 0.0),
    (-5.0, 0.0),
    (1.5, 0.0),
    (0.0, 0.35),
    (0.0, -0.35),
    (-1.0, 0.2),
    (-1.0, -0.2),
];

/// Profiles for parked objects: mode 0 stays put, the rest creep away.
const STATIC_PROFILES: [(f64, f64); 8] = [
    (0.0, 0.0),
    (1.0, 0.0),
    (0.5, 0.0),
    (1.0, 0.35),
    (1.0, -0.35),
    (2.0, 0.0),
    (0.5, 0.3),
    (0.5, -0.3),
];

fn profile(table: &[(f64, f64); 8], m: usize) -> (f64, f64) {
    let (a, w) = table[m % table.len()];
    let scale = 1.0 + 0.5 * (m / table.len()) as f64;
    (a * scale, w * scale)
}

/// Position at time `t` of a unicycle starting at `start` with heading
/// `heading`, speed `speed`, constant longitudinal accel and yaw rate.
/// Speed is clamped at zero (no reversing).
fn integrate(start: Point, heading: f64, speed: f64, accel: f64, yaw_rate: f64, t: f64) -> Point {
    const SUBSTEPS_PER_SECOND: f64 = 40.0;
    let n = ((t.abs() * SUBSTEPS_PER_SECOND).ceil() as usize).max(1);
    let h = t / n as f64;
    let [mut x, mut y] = start;
    let (mut th, mut v) = (heading, speed);
    for _ in 0..n {
        // midpoint rule
        let v_mid = (v + 0.5 * accel * h).max(0.0);
        let th_mid = th + 0.5 * yaw_rate * h;
        x += v_mid * th_mid.cos() * h;
        y += v_mid * th_mid.sin() * h;
        v = (v + accel * h).max(0.0);
        th += yaw_rate * h;
    }
    [x, y]
}

/// Ego path as a closed-form constant-speed, constant-turn-rate arc.
#[derive(Debug, Clone, Copy)]
struct EgoArc {
    speed: f64,
    yaw_rate: f64,
}

impl EgoArc {
    fn position(&self, t: f64) -> Point {
        let (v, w) = (self.speed, self.yaw_rate);
        if w.abs() < 1e-9 {
            [v * t, 0.0]
        } else {
            [v / w * (w * t).sin(), v / w * (1.0 - (w * t).cos())]
        }
    }

    fn heading(&self, t: f64) -> f64 {
        self.yaw_rate * t
    }

    fn normal(&self, t: f64) -> Point {
        let th = self.heading(t);
        [-th.sin(), th.cos()]
    }
}

fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1]]
}

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

fn scale(a: Point, s: f64) -> Point {
    [a[0] * s, a[1] * s]
}

fn norm(a: Point) -> f64 {
    a[0].hypot(a[1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BackgroundRole {
    Parked,
    SameDirection,
    Oncoming,
}

#[derive(Debug, Clone, Copy)]
struct BackgroundTemplate {
    role: BackgroundRole,
    /// Time along the ego arc where the agent sits at t = 0.
    arc_time: f64,
    lateral: f64,
    speed: f64,
}

#[derive(Debug, Clone)]
struct SequenceLayout {
    ego_speed: f64,
    ego_yaw_rate: f64,
    background: Vec<BackgroundTemplate>,
}

fn sequence_layout(config: &GenConfig, sequence_id: u64) -> SequenceLayout {
    let mut rng = rng::stream(config.seed, &[TAG_SEQUENCE, sequence_id]);
    let ego_speed = rng.random_range(5.0..10.0);
    let cluster = [-0.12, 0.0, 0.12][rng.random_range(0..3)];
    let ego_yaw_rate = cluster + rng.random_range(-0.02..0.02);
    let max_bg = config.n_agents.saturating_sub(1).min(5);
    let min_bg = max_bg.min(2);
    let n_bg = rng.random_range(min_bg..=max_bg);
    let background = (0..n_bg)
        .map(|_| {
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            match rng.random_range(0..3) {
                0 => BackgroundTemplate {
                    role: BackgroundRole::Parked,
                    arc_time: rng.random_range(0.8..4.0),
                    lateral: side * rng.random_range(4.0..7.0),
                    speed: 0.0,
                },
                1 => BackgroundTemplate {
                    role: BackgroundRole::SameDirection,
                    arc_time: rng.random_range(-1.0..2.5),
                    lateral: side * rng.random_range(3.5..4.5),
                    speed: ego_speed + rng.random_range(-2.0..2.0),
                },
                _ => BackgroundTemplate {
                    role: BackgroundRole::Oncoming,
                    arc_time: rng.random_range(2.0..6.0),
                    lateral: side * rng.random_range(3.8..5.5),
                    speed: rng.random_range(4.0..9.0),
                },
            }
        })
        .collect();
    SequenceLayout {
        ego_speed,
        ego_yaw_rate,
        background,
    }
}

/// Builds the N_m forecast modes from an initial state using a profile table.
fn profile_modes(
    start: Point,
    heading: f64,
    speed: f64,
    table: &[(f64, f64); 8],
    config: &GenConfig,
) -> Vec<Vec<Point>> {
    (0..config.n_modes)
        .map(|m| {
            let (a, w) = profile(table, m);
            (1..=config.horizon)
                .map(|k| integrate(start, heading, speed, a, w, k as f64 * config.dt))
                .collect()
        })
        .collect()
}

/// Forecaster mode weights: softmax of noisy logits that favour the mode
/// the agent will actually follow by `forecast_confidence`.
fn forecast_weights<R: Rng>(
    rng: &mut R,
    n_modes: usize,
    truth: usize,
    confidence: f64,
) -> Vec<f64> {
    let logits: Vec<f64> = (0..n_modes)
        .map(|m| {
            let z: f64 = StandardNormal.sample(rng);
            z + if m == truth { confidence } else { 0.0 }
        })
        .collect();
    softmax(&logits)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

struct AgentBuild {
    forecast: AgentForecast,
    state: AgentState,
    truth: Vec<Point>,
}

fn truth_from_mode<R: Rng>(rng: &mut R, mode: &[Point], noisy: bool) -> Vec<Point> {
    const TRUTH_NOISE: f64 = 0.1;
    mode.iter()
        .map(|&p| {
            if noisy {
                [
                    p[0] + rng.random_range(-TRUTH_NOISE..TRUTH_NOISE),
                    p[1] + rng.random_range(-TRUTH_NOISE..TRUTH_NOISE),
                ]
            } else {
                p
            }
        })
        .collect()
}

fn build_adversary<R: Rng>(
    rng: &mut R,
    kind: ScenarioKind,
    ego: &EgoArc,
    config: &GenConfig,
) -> AgentBuild {
    let k_star = rng.random_range(2.min(config.horizon)..=config.horizon);
    let t_star = k_star as f64 * config.dt;
    let conflict = ego.position(t_star);
    let ego_heading = ego.heading(t_star);
    // Closest approach offset; |offset| < safety_distance collides.
    let offset = rng.random_range(-1.0..1.0) * 2.0 * config.safety_distance;

    match kind {
        ScenarioKind::Stationary => {
            let spot = add(conflict, scale(ego.normal(t_star), offset));
            let heading = ego_heading + rng.random_range(-PI..PI);
            let modes = profile_modes(spot, heading, 0.0, &STATIC_PROFILES, config);
            let weights = forecast_weights(rng, config.n_modes, 0, config.forecast_confidence);
            let truth = vec![spot; config.horizon];
            AgentBuild {
                forecast: AgentForecast { modes, weights },
                state: AgentState {
                    position: spot,
                    velocity: [0.0, 0.0],
                    accel: 0.0,
                    yaw_rate: 0.0,
                },
                truth,
            }
        }
        ScenarioKind::Frontal | ScenarioKind::Side => {
            let (heading, miss_dir) = if kind == ScenarioKind::Frontal {
                (
                    ego_heading + PI + rng.random_range(-0.15..0.15),
                    ego.normal(t_star),
                )
            } else {
                let side = if rng.random_bool(0.5) {
                    0.5 * PI
                } else {
                    -0.5 * PI
                };
                (
                    ego_heading + side + rng.random_range(-0.2..0.2),
                    [ego_heading.cos(), ego_heading.sin()],
                )
            };
            let speed = rng.random_range(4.0..9.0);
            let intent = if config.n_modes == 1 || rng.random_bool(0.4) {
                0
            } else {
                rng.random_range(1..config.n_modes)
            };
            let (a, w) = profile(&MOVING_PROFILES, intent);
            let target = add(conflict, scale(miss_dir, offset));
            let displacement = integrate([0.0, 0.0], heading, speed, a, w, t_star);
            let start = sub(target, displacement);
            let modes = profile_modes(start, heading, speed, &MOVING_PROFILES, config);
            let weights = forecast_weights(rng, config.n_modes, intent, config.forecast_confidence);
            let truth = truth_from_mode(rng, &modes[intent], true);
            AgentBuild {
                forecast: AgentForecast { modes, weights },
                state: AgentState {
                    position: start,
                    velocity: [speed * heading.cos(), speed * heading.sin()],
                    accel: a,
                    yaw_rate: w,
                },
                truth,
            }
        }
    }
}

/// Background traffic follows the ego arc at a lateral offset; forecasts
/// include drifting modes toward the ego lane that the agent never takes.
fn build_background<R: Rng>(
    rng: &mut R,
    tpl: &BackgroundTemplate,
    ego: &EgoArc,
    config: &GenConfig,
) -> AgentBuild {
    let arc_time = tpl.arc_time + rng.random_range(-0.4..0.4);
    let lateral = tpl.lateral + rng.random_range(-0.3..0.3);
    let toward_ego = -lateral.signum();
    let horizon_time = config.horizon as f64 * config.dt;

    let (direction, speed) = match tpl.role {
        BackgroundRole::Parked => (0.0, 0.0),
        BackgroundRole::SameDirection => (1.0, (tpl.speed + rng.random_range(-1.0..1.0)).max(0.5)),
        BackgroundRole::Oncoming => (-1.0, tpl.speed + rng.random_range(-1.0..1.0)),
    };
    // (speed factor, lateral drift toward ego lane reached at the horizon)
    let mode_shapes: Vec<(f64, f64)> = (0..config.n_modes)
        .map(|m| match m % 6 {
            0 => (1.0, 0.0),
            1 => (0.7, 0.0),
            2 => (1.25, 0.0),
            3 => (1.0, 0.5 * lateral.abs()),
            4 => (1.0, lateral.abs()),
            _ => (0.5, 0.0),
        })
        .collect();
    let lane_keeping: Vec<usize> = (0..config.n_modes)
        .filter(|&m| mode_shapes[m].1 == 0.0)
        .collect();
    let truth_mode = if tpl.role == BackgroundRole::Parked {
        0
    } else {
        lane_keeping[rng.random_range(0..lane_keeping.len())]
    };

    let ego_speed = ego.speed.max(1e-6);
    let position_at = |t: f64, speed_factor: f64, drift: f64| -> Point {
        let along = arc_time + direction * speed * speed_factor * t / ego_speed;
        let lat = lateral + toward_ego * drift * (t / horizon_time).min(1.0);
        add(ego.position(along), scale(ego.normal(along), lat))
    };

    let start = position_at(0.0, 1.0, 0.0);
    let modes: Vec<Vec<Point>> = if tpl.role == BackgroundRole::Parked {
        let heading = ego.heading(arc_time) + rng.random_range(-0.3..0.3);
        profile_modes(start, heading, 0.0, &STATIC_PROFILES, config)
    } else {
        mode_shapes
            .iter()
            .map(|&(f, drift)| {
                (1..=config.horizon)
                    .map(|k| position_at(k as f64 * config.dt, f, drift))
                    .collect()
            })
            .collect()
    };
    let weights = forecast_weights(rng, config.n_modes, truth_mode, config.forecast_confidence);
    let moving = tpl.role != BackgroundRole::Parked;
    let truth = truth_from_mode(rng, &modes[truth_mode], moving);

    let eps = 1e-3;
    let ahead = position_at(eps, mode_shapes[truth_mode].0, 0.0);
    let velocity = if moving {
        scale(sub(ahead, start), 1.0 / eps)
    } else {
        [0.0, 0.0]
    };
    let accel = if moving {
        (mode_shapes[truth_mode].0 - 1.0) * speed / horizon_time
    } else {
        0.0
    };
    AgentBuild {
        forecast: AgentForecast { modes, weights },
        state: AgentState {
            position: start,
            velocity,
            accel,
            yaw_rate: if moving { ego.yaw_rate } else { 0.0 },
        },
        truth,
    }
}

/// Deterministic scene generator; validates its config once.
#[derive(Debug, Clone)]
pub struct Generator {
    config: GenConfig,
}

impl Generator {
    pub fn new(config: GenConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &GenConfig {
        &self.config
    }

    pub fn generate_scene(&self, kind: ScenarioKind, index: usize) -> Result<Scene> {
        generate_scene(&self.config, kind, index)
    }

    /// All scenes of all kinds, ordered by (kind, index).
    pub fn generate_all(&self) -> Vec<Scene> {
        ScenarioKind::ALL
            .iter()
            .flat_map(|&kind| (0..self.config.scenes_per_kind).map(move |i| (kind, i)))
            .map(|(kind, i)| generate_scene(&self.config, kind, i).expect("index in range"))
            .collect()
    }
}

/// Generates scene `index` of `kind`; a pure function of `(config, kind, index)`.
pub fn generate_scene(config: &GenConfig, kind: ScenarioKind, index: usize) -> Result<Scene> {
    if index >= config.scenes_per_kind {
        return Err(Error::InvalidInput(format!(
            "scene index {index} out of range for {} scenes per kind",
            config.scenes_per_kind
        )));
    }
    let sequence_id = config.sequence_of(kind, index);
    let layout = sequence_layout(config, sequence_id);
    let id = (kind.index() * config.scenes_per_kind + index) as u64;
    let mut rng = rng::stream(config.seed, &[TAG_SCENE, kind.index() as u64, index as u64]);

    let ego = EgoArc {
        speed: layout.ego_speed * rng.random_range(0.9..1.1),
        yaw_rate: layout.ego_yaw_rate,
    };
    let waypoints = (1..=config.horizon)
        .map(|k| ego.position(k as f64 * config.dt))
        .collect();

    let mut builds = vec![build_adversary(&mut rng, kind, &ego, config)];
    let room = config.n_agents - 1;
    for tpl in layout.background.iter().take(room) {
        builds.push(build_background(&mut rng, tpl, &ego, config));
    }
    let mut order: Vec<usize> = (0..builds.len()).collect();
    order.shuffle(&mut rng);
    let adversary = order
        .iter()
        .position(|&i| i == 0)
        .expect("adversary present");

    let mut slots: Vec<Option<AgentBuild>> = builds.into_iter().map(Some).collect();
    let (mut agents, mut agent_states, mut agent_truth) = (Vec::new(), Vec::new(), Vec::new());
    for i in order {
        let b = slots[i].take().expect("each agent placed once");
        agents.push(b.forecast);
        agent_states.push(b.state);
        agent_truth.push(b.truth);
    }

    Ok(Scene {
        kind,
        sequence_id,
        id,
        ego_speed: ego.speed,
        ego_yaw_rate: ego.yaw_rate,
        ego_plan: EgoPlan { waypoints },
        agents,
        agent_states,
        agent_truth,
        adversary,
    })
}

/// Hinge collision loss of one agent against the plan:
/// `sum_k max(0, safety_distance - |plan_k - agent_k|)`, label `loss > 0`.
pub fn collision_oracle(
    plan: &EgoPlan,
    agent_truth: &[Point],
    safety_distance: f64,
) -> Result<(u8, f64)> {
    if plan.waypoints.len() != agent_truth.len() {
        return Err(Error::Shape {
            what: "collision_oracle horizon",
            expected: plan.waypoints.len().to_string(),
            got: agent_truth.len().to_string(),
        });
    }
    let loss: f64 = plan
        .waypoints
        .iter()
        .zip(agent_truth)
        .map(|(&p, &a)| (safety_distance - norm(sub(p, a))).max(0.0))
        .sum();
    Ok((u8::from(loss > 0.0), loss))
}

/// Scene-level label: the collision loss summed over all agents.
pub fn scene_label(scene: &Scene, safety_distance: f64) -> Result<(u8, f64)> {
    let mut total = 0.0;
    for truth in &scene.agent_truth {
        total += collision_oracle(&scene.ego_plan, truth, safety_distance)?.1;
    }
    Ok((u8::from(total > 0.0), total))
}

const POS_SCALE: f64 = 0.1;
const ACCEL_SCALE: f64 = 1.0 / 3.0;
const YAW_SCALE: f64 = 2.0;

pub fn plan_feature_len(horizon: usize) -> usize {
    2 * horizon + 2 + 5 * PLAN_SUMMARY_AGENTS
}

pub fn motion_feature_len(horizon: usize) -> usize {
    2 * horizon + 8
}

/// Smallest distance between two equally long trajectories, step by step.
fn min_gap(a: &[Point], b: &[Point]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&p, &q)| norm(sub(p, q)))
        .fold(f64::INFINITY, f64::min)
}

/// Signed clearance margin, roughly in [-1, 1]; positive means inside the
/// safety distance.
fn margin(gap: f64, safety_distance: f64) -> f64 {
    ((safety_distance - gap) / safety_distance).tanh()
}

/// Number of most threatening detected agents summarised inside the plan query.
const PLAN_SUMMARY_AGENTS: usize = 2;

/// Fixed random map from kinematic features to query space:
/// `tanh(W x + b + domain)`.
#[derive(Debug, Clone)]
pub struct QueryProjection {
    plan_w: Vec<f64>,
    plan_b: Vec<f64>,
    motion_w: Vec<f64>,
    motion_b: Vec<f64>,
    d: usize,
    plan_in: usize,
    motion_in: usize,
}

impl QueryProjection {
    pub fn new(d: usize, horizon: usize, projection_seed: u64) -> Self {
        let plan_in = plan_feature_len(horizon);
        let motion_in = motion_feature_len(horizon);
        let mut rng = rng::stream(projection_seed, &[TAG_PROJECTION]);
        let mut gauss = |n: usize, fan_in: usize, gain: f64| -> Vec<f64> {
            let dist = Normal::new(0.0, gain / (fan_in as f64).sqrt()).expect("valid normal");
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        };
        let plan_w = gauss(d * plan_in, plan_in, 1.5);
        let plan_b = gauss(d, 1, 0.1);
        let motion_w = gauss(d * motion_in, motion_in, 1.5);
        let motion_b = gauss(d, 1, 0.1);
        Self {
            plan_w,
            plan_b,
            motion_w,
            motion_b,
            d,
            plan_in,
            motion_in,
        }
    }

    fn apply(w: &[f64], b: &[f64], domain: &[f64], x: &[f64], out: &mut [f32]) {
        let n_in = x.len();
        for (i, o) in out.iter_mut().enumerate() {
            let row = &w[i * n_in..(i + 1) * n_in];
            let pre: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b[i] + domain[i];
            *o = pre.tanh() as f32;
        }
    }

    pub fn embed_plan(&self, features: &[f64], domain: &[f64], out: &mut [f32]) {
        debug_assert_eq!(features.len(), self.plan_in);
        Self::apply(
            &self.plan_w,
            &self.plan_b,
            domain,
            features,
            &mut out[..self.d],
        );
    }

    pub fn embed_motion(&self, features: &[f64], domain: &[f64], out: &mut [f32]) {
        debug_assert_eq!(features.len(), self.motion_in);
        Self::apply(
            &self.motion_w,
            &self.motion_b,
            domain,
            features,
            &mut out[..self.d],
        );
    }
}

fn domain_offset(config: &GenConfig, sequence_id: u64, which: u64) -> Vec<f64> {
    let mut rng = rng::stream(config.seed, &[TAG_DOMAIN, sequence_id, which]);
    (0..config.d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            config.domain_shift * z
        })
        .collect()
}

/// Perceived agent after perception noise and detection.
struct Perceived {
    detected: bool,
    position: Point,
    velocity: Point,
    accel: f64,
    yaw_rate: f64,
    modes: Vec<Vec<Point>>,
}

fn perceive(scene: &Scene, config: &GenConfig) -> Vec<Perceived> {
    let mut rng = rng::stream(config.seed, &[TAG_PERCEPTION, scene.id]);
    let sigma = config.perception_noise_sigma;
    scene
        .agents
        .iter()
        .zip(&scene.agent_states)
        .map(|(forecast, state)| {
            let detected = !rng.random_bool(config.miss_rate);
            let mut g = || -> f64 { StandardNormal.sample(&mut rng) };
            let shift = [sigma * g(), sigma * g()];
            let vel_noise = [sigma * g(), sigma * g()];
            let accel = state.accel + config.cue_noise * g();
            let yaw_rate = state.yaw_rate + 0.1 * config.cue_noise * g();
            Perceived {
                detected,
                position: add(state.position, shift),
                velocity: add(state.velocity, vel_noise),
                accel,
                yaw_rate,
                modes: forecast
                    .modes
                    .iter()
                    .map(|mode| mode.iter().map(|&p| add(p, shift)).collect())
                    .collect(),
            }
        })
        .collect()
}

/// Turns a scene into a training/evaluation sample.
///
/// The label and collision loss come from the oracle on noiseless truth;
/// everything else reflects what the (noisy, occasionally blind) planner
/// perceived. Missed agents get zero query rows, zero trajectory tensors and
/// a zero mask entry.
pub fn embed_scene(
    scene: &Scene,
    config: &GenConfig,
    projection: &QueryProjection,
) -> Result<Sample> {
    let dims = config.dims();
    let t = dims.horizon;
    if scene.ego_plan.horizon() != t {
        return Err(Error::Shape {
            what: "embed_scene horizon",
            expected: t.to_string(),
            got: scene.ego_plan.horizon().to_string(),
        });
    }
    if scene.agents.len() > dims.agents {
        return Err(Error::Shape {
            what: "embed_scene agents",
            expected: format!("<= {}", dims.agents),
            got: scene.agents.len().to_string(),
        });
    }
    let (label, collision_loss) = scene_label(scene, config.safety_distance)?;
    let perceived = perceive(scene, config);
    let plan = &scene.ego_plan.waypoints;

    let mut sample = Sample::zeros(dims, scene.id, scene.sequence_id);
    sample.label = label;
    sample.collision_loss = collision_loss;
    for (k, p) in plan.iter().enumerate() {
        sample.plan[2 * k] = p[0] as f32;
        sample.plan[2 * k + 1] = p[1] as f32;
    }

    // Plan query: ego intent plus a coarse summary of the riskiest detected agents.
    let mut pf = Vec::with_capacity(plan_feature_len(t));
    for p in plan {
        pf.extend([p[0] * POS_SCALE, p[1] * POS_SCALE]);
    }
    pf.extend([scene.ego_speed * POS_SCALE, scene.ego_yaw_rate * YAW_SCALE]);
    // The planner extrapolates what it sees with the observed manoeuvre cue
    // and keeps the agents that come closest to its own path.
    let mut threats: Vec<(f64, &Perceived)> = perceived
        .iter()
        .filter(|p| p.detected)
        .map(|p| {
            let heading = p.velocity[1].atan2(p.velocity[0]);
            let path: Vec<Point> = (1..=t)
                .map(|k| {
                    integrate(
                        p.position,
                        heading,
                        norm(p.velocity),
                        p.accel,
                        p.yaw_rate,
                        k as f64 * config.dt,
                    )
                })
                .collect();
            (min_gap(&path, plan), p)
        })
        .collect();
    threats.sort_by(|a, b| a.0.total_cmp(&b.0));
    for j in 0..PLAN_SUMMARY_AGENTS {
        match threats.get(j) {
            Some((gap, p)) => pf.extend([
                p.position[0] * POS_SCALE,
                p.position[1] * POS_SCALE,
                p.velocity[0] * POS_SCALE,
                p.velocity[1] * POS_SCALE,
                margin(*gap, config.safety_distance),
            ]),
            None => pf.extend([5.0, 5.0, 0.0, 0.0, -1.0]),
        }
    }
    let plan_domain = domain_offset(config, scene.sequence_id, 0);
    let motion_domain = domain_offset(config, scene.sequence_id, 1);
    projection.embed_plan(&pf, &plan_domain, &mut sample.h_plan);

    let (n_m, d) = (dims.modes, dims.d);
    let mut mf = Vec::with_capacity(motion_feature_len(t));
    for (a, (per, forecast)) in perceived.iter().zip(&scene.agents).enumerate() {
        if !per.detected {
            continue;
        }
        sample.agent_mask[a] = 1.0;
        for m in 0..n_m {
            let w = forecast.weights[m];
            sample.mode_weights[a * n_m + m] = w as f32;
            mf.clear();
            for (k, (q, p)) in per.modes[m].iter().zip(plan).enumerate() {
                let base = ((a * n_m + m) * t + k) * 2;
                sample.motion[base] = q[0] as f32;
                sample.motion[base + 1] = q[1] as f32;
                mf.extend([(q[0] - p[0]) * POS_SCALE, (q[1] - p[1]) * POS_SCALE]);
            }
            mf.extend([
                margin(min_gap(&per.modes[m], plan), config.safety_distance),
                2.0 * w,
                per.position[0] * POS_SCALE,
                per.position[1] * POS_SCALE,
                per.velocity[0] * POS_SCALE,
                per.velocity[1] * POS_SCALE,
                per.accel * ACCEL_SCALE,
                per.yaw_rate * YAW_SCALE,
            ]);
            let row = (a * n_m + m) * d;
            projection.embed_motion(&mf, &motion_domain, &mut sample.h_motion[row..row + d]);
        }
    }
    sample.scene = Some(Box::new(scene.clone()));
    Ok(sample)
}

/// Generates and embeds every scene of a config, in (kind, index) order.
pub fn generate_dataset(config: &GenConfig, projection_seed: u64) -> Result<Vec<Sample>> {
    use rayon::prelude::*;
    let generator = Generator::new(config.clone())?;
    let projection = QueryProjection::new(config.d, config.horizon, projection_seed);
    let jobs: Vec<(ScenarioKind, usize)> = ScenarioKind::ALL
        .iter()
        .flat_map(|&k| (0..config.scenes_per_kind).map(move |i| (k, i)))
        .collect();
    jobs.par_iter()
        .map(|&(kind, i)| {
            let scene = generator.generate_scene(kind, i)?;
            embed_scene(&scene, config, &projection)
        })
        .collect()
}

/// Partitions distinct sequence ids into (train, test) sets.
pub fn split_sequences(
    ids: &BTreeSet<u64>,
    ratio: f64,
    seed: u64,
) -> Result<(BTreeSet<u64>, BTreeSet<u64>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidInput(format!(
            "split ratio must lie in (0, 1), got {ratio}"
        )));
    }
    if ids.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 distinct sequences to split, got {}",
            ids.len()
        )));
    }
    let mut order: Vec<u64> = ids.iter().copied().collect();
    order.shuffle(&mut rng::stream(seed, &[0x5911]));
    let n_train = ((ratio * order.len() as f64).round() as usize).clamp(1, order.len() - 1);
    let train = order[..n_train].iter().copied().collect();
    let test = order[n_train..].iter().copied().collect();
    Ok((train, test))
}

/// Sequence-disjoint split: no sequence id contributes to both parts.
pub fn split_dataset(
    samples: Vec<Sample>,
    ratio: f64,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let ids: BTreeSet<u64> = samples.iter().map(|s| s.sequence_id).collect();
    let (train_ids, _) = split_sequences(&ids, ratio, seed)?;
    Ok(samples
        .into_iter()
        .partition(|s| train_ids.contains(&s.sequence_id)))
}
