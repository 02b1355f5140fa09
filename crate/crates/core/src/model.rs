//! The end-to-end predictor: behavior-, interaction-, priority- and
//! position-aware encoders feeding a maneuver classifier and a
//! maneuver-conditioned LSTM decoder that emits one bivariate Gaussian over
//! `(rho, theta)` per future step and maneuver.
//!
//! All scenes of a batch are pushed through each block together: agents and
//! neighbors are stacked as rows, so one LSTM unroll serves the whole batch.

use std::f64::consts::FRAC_PI_2;

use bat_autodiff::{Tape, Tensor, Var};

use crate::behavior::behavior_features;
use crate::data::Scene;
use crate::geometry::{chord_heading, local_to_polar, polar_to_local, CartPoint, Frame, PolarPoint};
use crate::nn::{max_pool_agents, Activation, Attention, Bound, Embed, Linear, Lstm, Mlp, ParamStore};
use crate::objective::{bivariate_nll_var, squared_displacement_var, GaussianVars, LossWeights};
use crate::{CoreError, Result};

pub const SIGMA_FLOOR: f64 = 1e-3;
pub const CORR_LIMIT: f64 = 0.99;
const LEAK: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Lateral {
    Left = 0,
    Keep = 1,
    Right = 2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Longitudinal {
    Accelerate = 0,
    Maintain = 1,
    Brake = 2,
}

impl Lateral {
    pub const ALL: [Lateral; 3] = [Lateral::Left, Lateral::Keep, Lateral::Right];

    pub fn name(self) -> &'static str {
        match self {
            Lateral::Left => "left",
            Lateral::Keep => "keep",
            Lateral::Right => "right",
        }
    }
}

impl Longitudinal {
    pub const ALL: [Longitudinal; 3] = [Longitudinal::Accelerate, Longitudinal::Maintain, Longitudinal::Brake];

    pub fn name(self) -> &'static str {
        match self {
            Longitudinal::Accelerate => "accelerate",
            Longitudinal::Maintain => "maintain",
            Longitudinal::Brake => "brake",
        }
    }
}

/// Joint maneuver; index `3 * lateral + longitudinal`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ManeuverClass {
    pub lateral: Lateral,
    pub longitudinal: Longitudinal,
}

impl ManeuverClass {
    pub const COUNT: usize = 9;

    pub const fn new(lateral: Lateral, longitudinal: Longitudinal) -> Self {
        Self { lateral, longitudinal }
    }

    pub fn index(self) -> usize {
        3 * self.lateral as usize + self.longitudinal as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        if i >= Self::COUNT {
            return Err(CoreError::InvalidInput(format!("maneuver index {i} outside 0..9")));
        }
        Ok(Self::new(Lateral::ALL[i / 3], Longitudinal::ALL[i % 3]))
    }

    pub fn name(self) -> String {
        format!("{}-{}", self.lateral.name(), self.longitudinal.name())
    }
}

impl Default for ManeuverClass {
    fn default() -> Self {
        Self::new(Lateral::Keep, Longitudinal::Maintain)
    }
}

/// Bivariate normal over `(rho, theta)` for one future step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianParams {
    pub mu_rho: f64,
    pub mu_theta: f64,
    pub sigma_rho: f64,
    pub sigma_theta: f64,
    pub corr: f64,
}

impl GaussianParams {
    pub fn density(&self, p: PolarPoint) -> f64 {
        let zr = (p.rho - self.mu_rho) / self.sigma_rho;
        let zt = (p.theta - self.mu_theta) / self.sigma_theta;
        let one_minus = 1.0 - self.corr * self.corr;
        let q = (zr * zr + zt * zt - 2.0 * self.corr * zr * zt) / one_minus;
        (-0.5 * q).exp() / (2.0 * std::f64::consts::PI * self.sigma_rho * self.sigma_theta * one_minus.sqrt())
    }

    pub fn mean(&self) -> PolarPoint {
        PolarPoint {
            rho: self.mu_rho,
            theta: self.mu_theta,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.sigma_rho > 0.0 && self.sigma_theta > 0.0 && self.corr.abs() < 1.0
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Maps five raw decoder outputs onto valid Gaussian parameters.
pub fn squash_output(raw: [f64; 5], rho_scale: f64) -> GaussianParams {
    GaussianParams {
        mu_rho: rho_scale * raw[0],
        mu_theta: raw[1],
        sigma_rho: rho_scale * (softplus(raw[2]) + SIGMA_FLOOR),
        sigma_theta: softplus(raw[3]) + SIGMA_FLOOR,
        corr: CORR_LIMIT * raw[4].tanh(),
    }
}

/// Output of [`BatModel::predict`]. Coordinates are in `frame`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalPrediction {
    pub lateral_probs: [f64; 3],
    pub longitudinal_probs: [f64; 3],
    /// Indexed by [`ManeuverClass::index`].
    pub maneuver_probs: [f64; 9],
    /// `modes[maneuver][step]`.
    pub modes: Vec<Vec<GaussianParams>>,
    /// Neighbor id and attention weight; empty without neighbors.
    pub attention: Vec<(u64, f64)>,
    pub frame: Frame,
}

impl MultimodalPrediction {
    pub fn steps(&self) -> usize {
        self.modes.first().map_or(0, Vec::len)
    }

    pub fn best_mode(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.maneuver_probs.iter().enumerate() {
            if p > self.maneuver_probs[best] {
                best = i;
            }
        }
        best
    }

    /// Mean of mode `m` at `step`, as a frame-local Cartesian point.
    pub fn mode_mean_local(&self, m: usize, step: usize) -> CartPoint {
        polar_to_local(self.modes[m][step].mean())
    }

    /// Probability-weighted mean of the mode means, frame-local.
    pub fn weighted_mean_local(&self, step: usize) -> CartPoint {
        let (mut x, mut y) = (0.0, 0.0);
        for (m, &p) in self.maneuver_probs.iter().enumerate() {
            let c = self.mode_mean_local(m, step);
            x += p * c.x;
            y += p * c.y;
        }
        CartPoint::new(x, y)
    }

    fn check_step(&self, step: usize) -> Result<()> {
        if step < self.steps() {
            Ok(())
        } else {
            Err(CoreError::InvalidInput(format!("step {step} outside 0..{}", self.steps())))
        }
    }

    /// `sum_i P(M_i) N(point; mode i)` over the `(rho, theta)` plane.
    pub fn mixture_density(&self, point: PolarPoint, step: usize) -> Result<f64> {
        self.check_step(step)?;
        Ok(self
            .maneuver_probs
            .iter()
            .zip(&self.modes)
            .map(|(p, mode)| p * mode[step].density(point))
            .sum())
    }

    /// Density per square meter at a frame-local Cartesian point: the polar
    /// density divided by the Jacobian `rho`. Zero at the origin.
    pub fn cartesian_density(&self, local: CartPoint, step: usize) -> Result<f64> {
        let p = local_to_polar(local);
        if p.rho == 0.0 {
            self.check_step(step)?;
            return Ok(0.0);
        }
        Ok(self.mixture_density(p, step)? / p.rho)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputMode {
    Polar,
    Cartesian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameMode {
    /// Rotated so the ego's history chord points along +y.
    Heading,
    Axis,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatConfig {
    pub behavior_hidden: usize,
    pub interaction_hidden: usize,
    pub position_hidden: usize,
    pub decoder_hidden: usize,
    pub input_embed: usize,
    pub behavior_embed: usize,
    pub attention_dim: usize,
    pub priority_hidden: usize,
    pub context_embed: usize,
    pub encoding_dim: usize,
    /// Graph threshold in meters.
    pub r: f64,
    pub t_h: f64,
    pub t_f: f64,
    pub dt: f64,
    /// Meters per unit of network input/output distance.
    pub rho_scale: f64,
    pub input_mode: InputMode,
    pub frame_mode: FrameMode,
    pub use_behavior: bool,
    pub use_interaction: bool,
    pub use_priority: bool,
    pub seed: u64,
}

impl Default for BatConfig {
    fn default() -> Self {
        Self {
            behavior_hidden: 32,
            interaction_hidden: 64,
            position_hidden: 64,
            decoder_hidden: 128,
            input_embed: 32,
            behavior_embed: 16,
            attention_dim: 64,
            priority_hidden: 64,
            context_embed: 64,
            encoding_dim: 128,
            r: 7.62,
            t_h: 3.0,
            t_f: 5.0,
            dt: 0.2,
            rho_scale: 30.0,
            input_mode: InputMode::Polar,
            frame_mode: FrameMode::Heading,
            use_behavior: true,
            use_interaction: true,
            use_priority: true,
            seed: 0,
        }
    }
}

fn steps_of(seconds: f64, dt: f64) -> usize {
    (seconds / dt).round() as usize
}

impl BatConfig {
    /// History frames including the reference frame.
    pub fn history_steps(&self) -> usize {
        steps_of(self.t_h, self.dt)
    }

    pub fn future_steps(&self) -> usize {
        steps_of(self.t_f, self.dt)
    }

    pub fn pooled_dim(&self) -> usize {
        self.priority_hidden
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("behavior_hidden", self.behavior_hidden),
            ("interaction_hidden", self.interaction_hidden),
            ("position_hidden", self.position_hidden),
            ("decoder_hidden", self.decoder_hidden),
            ("input_embed", self.input_embed),
            ("behavior_embed", self.behavior_embed),
            ("attention_dim", self.attention_dim),
            ("priority_hidden", self.priority_hidden),
            ("context_embed", self.context_embed),
            ("encoding_dim", self.encoding_dim),
        ];
        for (name, d) in dims {
            if d == 0 {
                return Err(CoreError::InvalidInput(format!("{name} must be > 0")));
            }
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(CoreError::InvalidInput(format!("dt={} must be positive", self.dt)));
        }
        if !(self.r >= 0.0 && self.r.is_finite()) {
            return Err(CoreError::InvalidInput(format!("r={} must be >= 0", self.r)));
        }
        if !(self.rho_scale > 0.0 && self.rho_scale.is_finite()) {
            return Err(CoreError::InvalidInput("rho_scale must be positive".into()));
        }
        if self.history_steps() < 3 {
            // Behavior intensity needs two differences.
            return Err(CoreError::InvalidInput(format!(
                "t_h={} gives {} history frames; at least 3 needed",
                self.t_h,
                self.history_steps()
            )));
        }
        if self.future_steps() < 1 {
            return Err(CoreError::InvalidInput(format!("t_f={} gives no future frames", self.t_f)));
        }
        Ok(())
    }
}

/// The Table-3 style model variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelVariant {
    /// Cartesian inputs.
    A,
    /// Without the behavior-aware module.
    B,
    /// Without the interaction-aware module.
    C,
    /// Without the priority-aware module.
    D,
    /// Full model.
    E,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 5] = [
        ModelVariant::A,
        ModelVariant::B,
        ModelVariant::C,
        ModelVariant::D,
        ModelVariant::E,
    ];

    pub fn apply(self, base: &BatConfig) -> BatConfig {
        let mut c = base.clone();
        c.input_mode = InputMode::Polar;
        c.use_behavior = true;
        c.use_interaction = true;
        c.use_priority = true;
        match self {
            ModelVariant::A => c.input_mode = InputMode::Cartesian,
            ModelVariant::B => c.use_behavior = false,
            ModelVariant::C => c.use_interaction = false,
            ModelVariant::D => c.use_priority = false,
            ModelVariant::E => {}
        }
        c
    }

    pub fn label(self) -> &'static str {
        match self {
            ModelVariant::A => "A",
            ModelVariant::B => "B",
            ModelVariant::C => "C",
            ModelVariant::D => "D",
            ModelVariant::E => "E",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            ModelVariant::A => "cartesian_input",
            ModelVariant::B => "no_behavior",
            ModelVariant::C => "no_interaction",
            ModelVariant::D => "no_priority",
            ModelVariant::E => "full",
        }
    }
}

/// Numeric model inputs for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedScene {
    pub frame: Frame,
    /// Per history frame, encoder input pair of the ego.
    pub ego_inputs: Vec<[f64; 2]>,
    pub neighbor_ids: Vec<u64>,
    /// `neighbor_inputs[n][t]`.
    pub neighbor_inputs: Vec<Vec<[f64; 2]>>,
    /// `behavior[agent][t]`, ego first; empty when the module is disabled.
    pub behavior: Vec<Vec<[f64; 6]>>,
    pub target_polar: Vec<PolarPoint>,
    pub target_local: Vec<CartPoint>,
    pub label: usize,
}

/// Fills `None` samples from the nearest observed sample (earlier wins ties).
fn hold_fill(track: &[Option<CartPoint>]) -> Option<Vec<CartPoint>> {
    let observed: Vec<usize> = (0..track.len()).filter(|&t| track[t].is_some()).collect();
    if observed.is_empty() {
        return None;
    }
    Some(
        (0..track.len())
            .map(|t| {
                let nearest = observed
                    .iter()
                    .copied()
                    .min_by_key(|&o| (o.abs_diff(t), o))
                    .expect("nonempty");
                track[nearest].expect("observed")
            })
            .collect(),
    )
}

/// Rows of a batch that share one scene.
#[derive(Debug, Clone, Copy)]
struct Span {
    start: usize,
    len: usize,
}

/// Tape outputs of the encoder for a batch.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `[B x encoding_dim]`.
    pub encoding: Var,
    /// `[B x context_embed]` softmax context embedding.
    pub context: Var,
    /// `[B x 3]` each.
    pub lateral: Var,
    pub longitudinal: Var,
    /// `[B x 9]`.
    pub joint: Var,
    /// Per scene, `[n x 1]` attention weights.
    pub attention: Vec<Option<Var>>,
}

/// Scalar parts of a training loss, for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub nll: f64,
    pub displacement: f64,
    pub ce: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatModel {
    pub config: BatConfig,
    behavior_embed: Embed,
    behavior_lstm: Lstm,
    interaction_embed: Embed,
    interaction_lstm: Lstm,
    position_embed: Embed,
    position_lstm: Lstm,
    attention: Attention,
    priority_mlp: Mlp,
    context_embed: Embed,
    encoding: Embed,
    lateral_head: Linear,
    longitudinal_head: Linear,
    decoder: Lstm,
    output: Linear,
}

impl BatModel {
    pub fn new(config: BatConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let context_dim = c.position_hidden + c.pooled_dim() + c.behavior_hidden;
        let leaky = Activation::LeakyRelu(LEAK);
        Ok(Self {
            behavior_embed: Embed::new("behavior.embed", 6, c.behavior_embed, leaky),
            behavior_lstm: Lstm::new("behavior.lstm", c.behavior_embed, c.behavior_hidden),
            interaction_embed: Embed::new("interaction.embed", 2, c.input_embed, leaky),
            interaction_lstm: Lstm::new("interaction.lstm", c.input_embed, c.interaction_hidden),
            position_embed: Embed::new("position.embed", 2, c.input_embed, leaky),
            position_lstm: Lstm::new("position.lstm", c.input_embed, c.position_hidden),
            attention: Attention::new("priority.attention", c.position_hidden, c.interaction_hidden, c.attention_dim),
            priority_mlp: Mlp::new(
                "priority.mlp",
                &[
                    if c.use_priority { c.attention_dim } else { c.interaction_hidden },
                    c.priority_hidden,
                    c.priority_hidden,
                ],
                // Bounded like the LSTM hiddens it is concatenated with, so
                // no branch dominates the softmax context embedding.
                &[leaky, Activation::Tanh],
            )?,
            context_embed: Embed::new("context.embed", context_dim, c.context_embed, Activation::Softmax),
            encoding: Embed::new("context.encoding", c.context_embed, c.encoding_dim, leaky),
            lateral_head: Linear::new("head.lateral", c.encoding_dim, 3),
            longitudinal_head: Linear::new("head.longitudinal", c.encoding_dim, 3),
            decoder: Lstm::new("decoder.lstm", c.encoding_dim + ManeuverClass::COUNT, c.decoder_hidden),
            output: Linear::new("decoder.output", c.decoder_hidden, 5),
            config,
        })
    }

    /// Freshly initialised parameters for this configuration.
    pub fn init_params(&self) -> ParamStore {
        let seed = self.config.seed;
        let mut s = ParamStore::new();
        if self.config.use_behavior {
            self.behavior_embed.register(&mut s, seed);
            self.behavior_lstm.register(&mut s, seed);
        }
        if self.config.use_interaction {
            self.interaction_embed.register(&mut s, seed);
            self.interaction_lstm.register(&mut s, seed);
            if self.config.use_priority {
                self.attention.register(&mut s, seed);
            }
            self.priority_mlp.register(&mut s, seed);
        }
        self.position_embed.register(&mut s, seed);
        self.position_lstm.register(&mut s, seed);
        self.context_embed.register(&mut s, seed);
        self.encoding.register(&mut s, seed);
        self.lateral_head.register(&mut s, seed);
        self.longitudinal_head.register(&mut s, seed);
        self.decoder.register(&mut s, seed);
        self.output.register(&mut s, seed);
        if self.config.frame_mode == FrameMode::Heading {
            // Start the angle mean at straight ahead; the output is otherwise
            // centered on the lateral axis and takes many steps to turn.
            if let Some(b) = s.get_mut(&self.output.bias()) {
                b.data_mut()[1] += FRAC_PI_2;
            }
        }
        s
    }

    /// Checks that `params` has every tensor this model reads, with the
    /// shapes it expects.
    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        let expected = self.init_params();
        for (name, t) in expected.iter() {
            let got = params.get(name).ok_or_else(|| CoreError::UnknownParameter(name.to_string()))?;
            if got.shape() != t.shape() {
                return Err(CoreError::InvalidInput(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn frame_for(&self, scene: &Scene) -> Result<Frame> {
        let origin = *scene
            .ego_history
            .last()
            .ok_or(CoreError::MissingEgoFrame(0))?;
        let heading = match self.config.frame_mode {
            FrameMode::Axis => FRAC_PI_2,
            FrameMode::Heading => chord_heading(&scene.ego_history).unwrap_or(FRAC_PI_2),
        };
        Ok(Frame::with_heading(origin, heading))
    }

    fn encode_point(&self, local: CartPoint) -> [f64; 2] {
        let s = self.config.rho_scale;
        match self.config.input_mode {
            InputMode::Polar => {
                let p = local_to_polar(local);
                [p.rho / s, p.theta]
            }
            InputMode::Cartesian => [local.x / s, local.y / s],
        }
    }

    /// Converts a scene into encoder inputs and (if present) targets.
    pub fn prepare(&self, scene: &Scene) -> Result<PreparedScene> {
        let c = &self.config;
        let h = c.history_steps();
        if scene.ego_history.len() != h {
            return Err(CoreError::InvalidInput(format!(
                "scene has {} history frames, model expects {h}",
                scene.ego_history.len()
            )));
        }
        if !scene.ego_future.is_empty() && scene.ego_future.len() != c.future_steps() {
            return Err(CoreError::InvalidInput(format!(
                "scene has {} future frames, model expects {}",
                scene.ego_future.len(),
                c.future_steps()
            )));
        }
        let points = scene
            .ego_history
            .iter()
            .chain(&scene.ego_future)
            .chain(scene.neighbors.iter().flat_map(|n| n.history.iter().flatten()));
        for p in points {
            if !p.is_finite() {
                return Err(CoreError::NonFinite(format!("scene of ego {}", scene.ego_id)));
            }
        }
        let frame = self.frame_for(scene)?;
        let origin = frame.origin;

        let mut neighbor_ids = Vec::new();
        let mut neighbor_tracks = Vec::new();
        for n in &scene.neighbors {
            if n.history.len() != h {
                return Err(CoreError::InvalidInput(format!(
                    "neighbor {} has {} frames, expected {h}",
                    n.id,
                    n.history.len()
                )));
            }
            let Some(at_ref) = n.history[h - 1] else { continue };
            if c.r > 0.0 && at_ref.distance(origin) <= 2.0 * c.r {
                neighbor_ids.push(n.id);
                neighbor_tracks.push(&n.history);
            }
        }

        let ego_inputs = scene
            .ego_history
            .iter()
            .map(|&p| self.encode_point(frame.to_local(p)))
            .collect();
        let neighbor_inputs = neighbor_tracks
            .iter()
            .map(|track| {
                let filled = hold_fill(track).expect("observed at reference frame");
                filled.iter().map(|&p| self.encode_point(frame.to_local(p))).collect()
            })
            .collect();

        let behavior = if c.use_behavior {
            let mut tracks = vec![scene.ego_history.iter().copied().map(Some).collect::<Vec<_>>()];
            tracks.extend(neighbor_tracks.iter().map(|t| (*t).clone()));
            let ids: Vec<u64> = (0..tracks.len() as u64).collect();
            let series = behavior_features(&ids, &tracks, c.r, c.dt)?;
            let (d1, d2) = (c.dt, c.dt * c.dt);
            (0..tracks.len())
                .map(|a| {
                    series
                        .agent(a)
                        .iter()
                        .map(|f| [f[0] * d1, f[1] * d1, f[2] * d1, f[3] * d2, f[4] * d2, f[5] * d2])
                        .collect()
                })
                .collect()
        } else {
            Vec::new()
        };

        let target_local: Vec<CartPoint> = scene.ego_future.iter().map(|&p| frame.to_local(p)).collect();
        let target_polar = target_local.iter().map(|&p| local_to_polar(p)).collect();
        Ok(PreparedScene {
            frame,
            ego_inputs,
            neighbor_ids,
            neighbor_inputs,
            behavior,
            target_polar,
            target_local,
            label: scene.maneuver.index(),
        })
    }

    /// Runs an LSTM over per-step row blocks that are first embedded.
    /// `steps[t]` is a `[rows x in]` tensor.
    fn encode_sequence(
        &self,
        tape: &mut Tape,
        p: &Bound,
        embed: &Embed,
        lstm: &Lstm,
        steps: Vec<Tensor>,
    ) -> Result<Var> {
        let rows = steps[0].shape()[0];
        let stacked: Vec<f64> = steps.iter().flat_map(|t| t.data().iter().copied()).collect();
        let width = steps[0].shape()[1];
        let x = tape.constant(Tensor::new(vec![rows * steps.len(), width], stacked)?);
        let e = embed.forward(tape, p, x)?;
        let proj = lstm.project_input(tape, p, e)?;
        let per_step = (0..steps.len())
            .map(|t| Ok(tape.slice(proj, 0, t * rows, (t + 1) * rows)?))
            .collect::<Result<Vec<_>>>()?;
        let hs = lstm.unroll_projected(tape, p, &per_step)?;
        Ok(*hs.last().expect("nonempty history"))
    }

    /// Encoder and maneuver heads for a batch of prepared scenes.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, batch: &[&PreparedScene]) -> Result<Encoded> {
        let c = &self.config;
        let b = batch.len();
        if b == 0 {
            return Err(CoreError::Empty("batch".into()));
        }
        let h = c.history_steps();

        let ego_steps = (0..h)
            .map(|t| {
                let rows: Vec<[f64; 2]> = batch.iter().map(|s| s.ego_inputs[t]).collect();
                Ok(Tensor::from_rows(&rows)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let position = self.encode_sequence(tape, p, &self.position_embed, &self.position_lstm, ego_steps)?;

        let behavior = if c.use_behavior {
            let mut spans = Vec::with_capacity(b);
            let mut total = 0;
            for s in batch {
                spans.push(Span {
                    start: total,
                    len: s.behavior.len(),
                });
                total += s.behavior.len();
            }
            let steps = (0..h)
                .map(|t| {
                    let rows: Vec<[f64; 6]> = batch.iter().flat_map(|s| s.behavior.iter().map(move |a| a[t])).collect();
                    Ok(Tensor::from_rows(&rows)?)
                })
                .collect::<Result<Vec<_>>>()?;
            let hidden = self.encode_sequence(tape, p, &self.behavior_embed, &self.behavior_lstm, steps)?;
            let mut avg = Tensor::zeros(&[b, total]);
            for (i, span) in spans.iter().enumerate() {
                for a in span.start..span.start + span.len {
                    avg.data_mut()[i * total + a] = 1.0 / span.len as f64;
                }
            }
            let avg = tape.constant(avg);
            tape.matmul(avg, hidden)?
        } else {
            tape.constant(Tensor::zeros(&[b, c.behavior_hidden]))
        };

        let mut attention = vec![None; b];
        let pooled = if c.use_interaction {
            self.pool_neighbors(tape, p, batch, position, &mut attention)?
        } else {
            tape.constant(Tensor::zeros(&[b, c.pooled_dim()]))
        };

        let context = tape.concat(&[position, pooled, behavior], 1)?;
        let context = self.context_embed.forward(tape, p, context)?;
        // The embedding sums to one; rescaled so a uniform embedding gives
        // unit inputs, otherwise the encoding sees ~1/width values and the
        // scene-dependent signal is learned far more slowly than the biases.
        let widened = tape.scale(context, c.context_embed as f64);
        let encoding = self.encoding.forward(tape, p, widened)?;
        let lat = self.lateral_head.forward(tape, p, encoding)?;
        let lateral = tape.softmax(lat, 1)?;
        let lon = self.longitudinal_head.forward(tape, p, encoding)?;
        let longitudinal = tape.softmax(lon, 1)?;
        let mut expand_lat = Tensor::zeros(&[3, 9]);
        let mut expand_lon = Tensor::zeros(&[3, 9]);
        for m in 0..9 {
            expand_lat.data_mut()[(m / 3) * 9 + m] = 1.0;
            expand_lon.data_mut()[(m % 3) * 9 + m] = 1.0;
        }
        let el = tape.constant(expand_lat);
        let eo = tape.constant(expand_lon);
        let lat9 = tape.matmul(lateral, el)?;
        let lon9 = tape.matmul(longitudinal, eo)?;
        let joint = tape.mul(lat9, lon9)?;
        Ok(Encoded {
            encoding,
            context,
            lateral,
            longitudinal,
            joint,
            attention,
        })
    }

    /// Interaction encoding and priority pooling; `[B x pooled_dim]`.
    fn pool_neighbors(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &[&PreparedScene],
        position: Var,
        attention: &mut [Option<Var>],
    ) -> Result<Var> {
        let c = &self.config;
        let h = c.history_steps();
        let mut spans = Vec::with_capacity(batch.len());
        let mut total = 0;
        for s in batch {
            spans.push(Span {
                start: total,
                len: s.neighbor_inputs.len(),
            });
            total += s.neighbor_inputs.len();
        }
        if total == 0 {
            return Ok(tape.constant(Tensor::zeros(&[batch.len(), c.pooled_dim()])));
        }
        let steps = (0..h)
            .map(|t| {
                let rows: Vec<[f64; 2]> = batch
                    .iter()
                    .flat_map(|s| s.neighbor_inputs.iter().map(move |n| n[t]))
                    .collect();
                Ok(Tensor::from_rows(&rows)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let hidden = self.encode_sequence(tape, p, &self.interaction_embed, &self.interaction_lstm, steps)?;

        let features = if c.use_priority {
            let q = self.attention.project_queries(tape, p, position)?;
            let k = self.attention.project_keys(tape, p, hidden)?;
            let v = self.attention.project_values(tape, p, hidden)?;
            let mut weighted = Vec::new();
            for (i, span) in spans.iter().enumerate() {
                if span.len == 0 {
                    continue;
                }
                let qi = tape.slice(q, 0, i, i + 1)?;
                let ki = tape.slice(k, 0, span.start, span.start + span.len)?;
                let vi = tape.slice(v, 0, span.start, span.start + span.len)?;
                let att = self.attention.attend_projected(tape, qi, ki, vi)?;
                attention[i] = Some(att.weights);
                weighted.push(att.weighted);
            }
            tape.concat(&weighted, 0)?
        } else {
            hidden
        };
        let mlp = self.priority_mlp.forward(tape, p, features)?;
        let rows = spans
            .iter()
            .map(|span| {
                let part = if span.len == 0 {
                    None
                } else {
                    Some(tape.slice(mlp, 0, span.start, span.start + span.len)?)
                };
                max_pool_agents(tape, part, c.pooled_dim())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(tape.concat(&rows, 0)?)
    }

    /// Decodes one row per entry of `encoding` rows, conditioned on the
    /// maneuver in `maneuvers`. Returns step-major stacked Gaussian vars of
    /// shape `[(steps * rows) x 1]`.
    pub fn decode(&self, tape: &mut Tape, p: &Bound, encoding: Var, maneuvers: &[usize]) -> Result<GaussianVars> {
        let rows = maneuvers.len();
        if tape.shape(encoding)[0] != rows {
            return Err(CoreError::InvalidInput(format!(
                "{} encodings for {rows} maneuvers",
                tape.shape(encoding)[0]
            )));
        }
        let mut onehot = Tensor::zeros(&[rows, ManeuverClass::COUNT]);
        for (r, &m) in maneuvers.iter().enumerate() {
            if m >= ManeuverClass::COUNT {
                return Err(CoreError::InvalidInput(format!("maneuver index {m} outside 0..9")));
            }
            onehot.data_mut()[r * ManeuverClass::COUNT + m] = 1.0;
        }
        let onehot = tape.constant(onehot);
        let input = tape.concat(&[encoding, onehot], 1)?;
        let proj = self.decoder.project_input(tape, p, input)?;
        let steps = vec![proj; self.config.future_steps()];
        let hs = self.decoder.unroll_projected(tape, p, &steps)?;
        let stacked = tape.concat(&hs, 0)?;
        let raw = self.output.forward(tape, p, stacked)?;
        self.squash(tape, raw, rows)
    }

    fn squash(&self, tape: &mut Tape, raw: Var, rows: usize) -> Result<GaussianVars> {
        let c = &self.config;
        let n = c.future_steps() * rows;
        let scale = vec![c.rho_scale; n];
        let s = tape.constant(Tensor::new(vec![n, 1], scale)?);
        let col = |tape: &mut Tape, i: usize| tape.slice(raw, 1, i, i + 1);
        let r0 = col(tape, 0)?;
        let mu_rho = tape.mul(r0, s)?;
        let mu_theta = col(tape, 1)?;
        let r2 = col(tape, 2)?;
        let sp = tape.softplus(r2);
        let sp = tape.add_scalar(sp, SIGMA_FLOOR);
        let sigma_rho = tape.mul(sp, s)?;
        let r3 = col(tape, 3)?;
        let st = tape.softplus(r3);
        let sigma_theta = tape.add_scalar(st, SIGMA_FLOOR);
        let r4 = col(tape, 4)?;
        let t = tape.tanh(r4);
        let corr = tape.scale(t, CORR_LIMIT);
        Ok(GaussianVars {
            mu_rho,
            mu_theta,
            sigma_rho,
            sigma_theta,
            corr,
        })
    }

    /// Training objective over a batch. The decoder is run only for each
    /// scene's labeled maneuver.
    pub fn loss(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &[&PreparedScene],
        weights: LossWeights,
    ) -> Result<(Var, LossParts)> {
        let f = self.config.future_steps();
        let b = batch.len();
        for s in batch {
            if s.target_polar.len() != f {
                return Err(CoreError::InvalidInput("training scene without future".into()));
            }
        }
        let enc = self.encode(tape, p, batch)?;
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        let g = self.decode(tape, p, enc.encoding, &labels)?;

        let column = |tape: &mut Tape, pick: &dyn Fn(&PreparedScene, usize) -> f64| -> Result<Var> {
            let data = (0..f)
                .flat_map(|t| batch.iter().map(move |s| (s, t)))
                .map(|(s, t)| pick(*s, t))
                .collect();
            Ok(tape.constant(Tensor::new(vec![f * b, 1], data)?))
        };
        let rho = column(tape, &|s, t| s.target_polar[t].rho)?;
        let theta = column(tape, &|s, t| s.target_polar[t].theta)?;
        let x = column(tape, &|s, t| s.target_local[t].x)?;
        let y = column(tape, &|s, t| s.target_local[t].y)?;

        let nll = bivariate_nll_var(tape, &g, rho, theta)?;
        let nll = tape.mean_all(nll);
        let mut onehot = Tensor::zeros(&[b, ManeuverClass::COUNT]);
        let mut lat_onehot = Tensor::zeros(&[b, 3]);
        let mut lon_onehot = Tensor::zeros(&[b, 3]);
        for (i, &l) in labels.iter().enumerate() {
            onehot.data_mut()[i * 9 + l] = 1.0;
            lat_onehot.data_mut()[i * 3 + l / 3] = 1.0;
            lon_onehot.data_mut()[i * 3 + l % 3] = 1.0;
        }
        let pick = |tape: &mut Tape, probs: Var, mask: Tensor| -> Result<Var> {
            let m = tape.constant(mask);
            let picked = tape.mul(probs, m)?;
            let picked = tape.sum(picked, 1)?;
            let logp = tape.log(picked);
            Ok(tape.mean_all(logp))
        };
        let log_label = pick(tape, enc.joint, onehot)?;
        let seq = tape.sub(nll, log_label)?;

        let disp = squared_displacement_var(tape, &g, x, y)?;
        let disp = tape.mean_all(disp);
        let log_lat = pick(tape, enc.lateral, lat_onehot)?;
        let log_lon = pick(tape, enc.longitudinal, lon_onehot)?;
        let ce = tape.add(log_lat, log_lon)?;
        let ce = tape.neg(ce);

        let wd = tape.scale(disp, weights.alpha_rmse);
        let wc = tape.scale(ce, weights.beta_ce);
        let total = tape.add(seq, wd)?;
        let total = tape.add(total, wc)?;
        let value = |v: Var| tape.value(v).data()[0];
        let parts = LossParts {
            total: value(total),
            nll: value(seq),
            displacement: value(disp),
            ce: value(ce),
        };
        Ok((total, parts))
    }

    /// All nine modes for each prepared scene.
    pub fn predict_prepared(&self, params: &ParamStore, batch: &[&PreparedScene]) -> Result<Vec<MultimodalPrediction>> {
        let b = batch.len();
        if b == 0 {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let enc = self.encode(&mut tape, &p, batch)?;
        let rows = 9 * b;
        let mut rep = Tensor::zeros(&[rows, b]);
        let mut maneuvers = Vec::with_capacity(rows);
        for m in 0..ManeuverClass::COUNT {
            for i in 0..b {
                rep.data_mut()[(m * b + i) * b + i] = 1.0;
                maneuvers.push(m);
            }
        }
        let rep = tape.constant(rep);
        let repeated = tape.matmul(rep, enc.encoding)?;
        let g = self.decode(&mut tape, &p, repeated, &maneuvers)?;
        let f = self.config.future_steps();
        let col = |v: Var| tape.value(v).data();
        let (mr, mt, sr, st, co) = (col(g.mu_rho), col(g.mu_theta), col(g.sigma_rho), col(g.sigma_theta), col(g.corr));
        let lat = tape.value(enc.lateral);
        let lon = tape.value(enc.longitudinal);
        let joint = tape.value(enc.joint);
        let mut out = Vec::with_capacity(b);
        for (i, scene) in batch.iter().enumerate() {
            let modes = (0..9)
                .map(|m| {
                    (0..f)
                        .map(|t| {
                            let k = t * rows + m * b + i;
                            GaussianParams {
                                mu_rho: mr[k],
                                mu_theta: mt[k],
                                sigma_rho: sr[k],
                                sigma_theta: st[k],
                                corr: co[k],
                            }
                        })
                        .collect()
                })
                .collect();
            let attention = match enc.attention[i] {
                Some(w) => scene
                    .neighbor_ids
                    .iter()
                    .copied()
                    .zip(tape.value(w).data().iter().copied())
                    .collect(),
                None => Vec::new(),
            };
            let row3 = |t: &Tensor| -> [f64; 3] { std::array::from_fn(|k| t.get2(i, k)) };
            out.push(MultimodalPrediction {
                lateral_probs: row3(lat),
                longitudinal_probs: row3(lon),
                maneuver_probs: std::array::from_fn(|k| joint.get2(i, k)),
                modes,
                attention,
                frame: scene.frame,
            });
        }
        Ok(out)
    }

    pub fn predict(&self, params: &ParamStore, scene: &Scene) -> Result<MultimodalPrediction> {
        let prepared = self.prepare(scene)?;
        Ok(self
            .predict_prepared(params, &[&prepared])?
            .pop()
            .expect("one prediction per scene"))
    }

    pub fn predict_batch(&self, params: &ParamStore, scenes: &[Scene]) -> Result<Vec<MultimodalPrediction>> {
        let prepared = scenes.iter().map(|s| self.prepare(s)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&PreparedScene> = prepared.iter().collect();
        self.predict_prepared(params, &refs)
    }
}

#[cfg(test)]
mod tests;
