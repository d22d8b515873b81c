//! Effect presets and frame-by-frame video hallucination.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, AdamState};
use crate::error::{Error, Result};
use crate::flow::{consistency_mask, inconsistency_fraction, warp, ConsistencyMask, ConsistencyParams, FlowSource};
use crate::losses::{total_loss, FrameContext, LossWeights, Objective, TemporalPrior};
use crate::net::Network;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::tiler::{
    apply_tilewise, apply_tilewise_parallel, crop, crop_mask, make_schedule, roll, roll_mask,
    TileRng, TileSchedule,
};

pub const ALPHA: f32 = 10000.0;
pub const K_BASE: usize = 12;
pub const K_OVER: usize = 30;
pub const SHOT_CHANGE_THRESHOLD: f64 = 0.85;
pub const LONG_TERM_OFFSETS: [usize; 6] = [1, 2, 4, 8, 16, 32];
pub const DEFAULT_LR: f32 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresetName {
    PerFrame,
    ShortTerm,
    LongTerm,
    Trail,
    Decay,
    TrailDecay,
}

impl PresetName {
    pub const ALL: [PresetName; 6] = [
        PresetName::PerFrame,
        PresetName::ShortTerm,
        PresetName::LongTerm,
        PresetName::Trail,
        PresetName::Decay,
        PresetName::TrailDecay,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PresetName::PerFrame => "per_frame",
            PresetName::ShortTerm => "short_term",
            PresetName::LongTerm => "long_term",
            PresetName::Trail => "trail",
            PresetName::Decay => "decay",
            PresetName::TrailDecay => "trail_decay",
        }
    }
}

impl fmt::Display for PresetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PresetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PresetName::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::UnknownPreset(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    OriginalContent,
    WarpedPrevious,
}

impl InitPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            InitPolicy::OriginalContent => "original_content",
            InitPolicy::WarpedPrevious => "warped_previous",
        }
    }
}

impl FromStr for InitPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original_content" => Ok(InitPolicy::OriginalContent),
            "warped_previous" => Ok(InitPolicy::WarpedPrevious),
            _ => Err(Error::Config(format!("unknown init policy `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EffectPreset {
    pub name: PresetName,
    pub weights: LossWeights,
    /// Long-term offsets `J`.
    pub offsets: Vec<usize>,
    pub init: InitPolicy,
    pub k_base: usize,
    pub k_over: usize,
}

impl EffectPreset {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.offsets.is_empty()
            || self.offsets[0] == 0
            || self.offsets.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config(format!(
                "offsets {:?} must be positive and strictly increasing",
                self.offsets
            )));
        }
        if self.k_base > self.k_over {
            return Err(Error::Config(format!(
                "k_base ({}) must not exceed k_over ({})",
                self.k_base, self.k_over
            )));
        }
        Ok(())
    }
}

pub fn preset(name: PresetName) -> EffectPreset {
    let w = |beta, gamma, delta| LossWeights {
        alpha: ALPHA,
        beta,
        gamma,
        delta,
    };
    let (weights, offsets, init, k_over) = match name {
        PresetName::PerFrame => (w(0.0, 0.0, 0.0), vec![1], InitPolicy::OriginalContent, K_BASE),
        PresetName::ShortTerm => (w(300.0, 0.0, 0.0), vec![1], InitPolicy::OriginalContent, K_OVER),
        PresetName::LongTerm => (
            w(0.0, 1000.0, 0.0),
            LONG_TERM_OFFSETS.to_vec(),
            InitPolicy::OriginalContent,
            K_OVER,
        ),
        PresetName::Trail => (w(1.0, 0.0, 500.0), vec![1], InitPolicy::WarpedPrevious, K_OVER),
        PresetName::Decay => (w(3.0, 0.0, 0.0), vec![1], InitPolicy::OriginalContent, K_OVER),
        PresetName::TrailDecay => (w(3.0, 0.0, 0.0), vec![1], InitPolicy::WarpedPrevious, K_OVER),
    };
    EffectPreset {
        name,
        weights,
        offsets,
        init,
        k_base: K_BASE,
        k_over,
    }
}

pub fn resolve_preset(name: &str) -> Result<EffectPreset> {
    Ok(preset(name.parse()?))
}

/// `true` iff at least `threshold` of the pixels are inconsistent.
pub fn detect_shot_change(mask: &ConsistencyMask, threshold: f64) -> bool {
    inconsistency_fraction(mask) >= threshold
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameKind {
    First,
    ShotChange,
    Normal,
}

impl FrameKind {
    pub fn uses_temporal_terms(self) -> bool {
        self == FrameKind::Normal
    }
}

/// Origin selections and Adam steps per tile for one frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Iterations {
    pub origins: usize,
    pub steps: usize,
}

impl Iterations {
    pub fn square(k: usize) -> Self {
        Self { origins: k, steps: k }
    }
}

/// Full configuration of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub preset: EffectPreset,
    pub class: usize,
    pub lr: f32,
    pub seed: u64,
    pub shot_threshold: f64,
    pub consistency: ConsistencyParams,
    /// Restrict the flow-trail residual to consistent pixels.
    pub trail_masked: bool,
    /// Overrides for the origin-selection and step counts; `None` means `k`.
    pub origins: Option<usize>,
    pub steps: Option<usize>,
    pub parallel: bool,
}

impl Settings {
    pub fn new(preset: EffectPreset, class: usize) -> Self {
        Self {
            preset,
            class,
            lr: DEFAULT_LR,
            seed: 0,
            shot_threshold: SHOT_CHANGE_THRESHOLD,
            consistency: ConsistencyParams::default(),
            trail_masked: false,
            origins: None,
            steps: None,
            parallel: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.preset.validate()?;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.shot_threshold) {
            return Err(Error::Config(format!(
                "shot_threshold must lie in [0, 1], got {}",
                self.shot_threshold
            )));
        }
        let c = &self.consistency;
        for (name, v) in [
            ("disagreement_ratio", c.disagreement_ratio),
            ("disagreement_offset", c.disagreement_offset),
            ("boundary_ratio", c.boundary_ratio),
            ("boundary_offset", c.boundary_offset),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn iterations(&self, k: usize) -> Iterations {
        Iterations {
            origins: self.origins.unwrap_or(k),
            steps: self.steps.unwrap_or(k),
        }
    }

    pub fn objective(&self, kind: FrameKind) -> Objective {
        let mut weights = self.preset.weights;
        if !kind.uses_temporal_terms() {
            weights.beta = 0.0;
            weights.gamma = 0.0;
            weights.delta = 0.0;
        }
        Objective {
            class: self.class,
            weights,
            trail_masked: self.trail_masked,
        }
    }

    /// Effective values of every setting, as echoed into the manifest.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let p = &self.preset;
        let c = &self.consistency;
        let opt = |v: Option<usize>| v.map_or_else(|| "k".to_string(), |v| v.to_string());
        [
            ("preset", p.name.to_string()),
            ("class", self.class.to_string()),
            ("alpha", p.weights.alpha.to_string()),
            ("beta", p.weights.beta.to_string()),
            ("gamma", p.weights.gamma.to_string()),
            ("delta", p.weights.delta.to_string()),
            (
                "j",
                p.offsets.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            ),
            ("init", p.init.as_str().to_string()),
            ("k_base", p.k_base.to_string()),
            ("k_over", p.k_over.to_string()),
            ("lr", self.lr.to_string()),
            ("seed", self.seed.to_string()),
            ("shot_threshold", self.shot_threshold.to_string()),
            ("disagreement_ratio", c.disagreement_ratio.to_string()),
            ("disagreement_offset", c.disagreement_offset.to_string()),
            ("boundary_ratio", c.boundary_ratio.to_string()),
            ("boundary_offset", c.boundary_offset.to_string()),
            ("mark_out_of_bounds", c.mark_out_of_bounds.to_string()),
            ("trail_masked", self.trail_masked.to_string()),
            ("origins", opt(self.origins)),
            ("steps", opt(self.steps)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

fn tile_context(rolled: &FrameContext, r0: usize, c0: usize, t: usize) -> Result<FrameContext> {
    let priors = rolled
        .priors
        .iter()
        .map(|p| {
            Ok(TemporalPrior {
                offset: p.offset,
                warped: crop(&p.warped, r0, c0, t)?,
                mask: crop_mask(&p.mask, r0, c0, t)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(FrameContext {
        offsets: rolled.offsets.clone(),
        priors,
    })
}

fn roll_context(context: &FrameContext, origin: (usize, usize)) -> Result<FrameContext> {
    let priors = context
        .priors
        .iter()
        .map(|p| {
            Ok(TemporalPrior {
                offset: p.offset,
                warped: roll(&p.warped, origin)?,
                mask: roll_mask(&p.mask, origin),
            })
        })
        .collect::<Result<_>>()?;
    Ok(FrameContext {
        offsets: context.offsets.clone(),
        priors,
    })
}

/// Runs `steps` Adam steps on one tile, clamping to `[0, 1]` after each.
pub fn optimize_tile(
    net: &Network,
    tile: Tensor,
    objective: &Objective,
    context: &FrameContext,
    steps: usize,
    lr: f32,
) -> Result<Tensor> {
    let mut x = tile.with_requires_grad(true);
    let mut state = AdamState::new(x.len(), lr);
    for _ in 0..steps {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let loss = total_loss(&mut tape, net, v, objective, context)?;
        tape.backward(loss.total)?;
        let grad = tape.grad(v).expect("input leaf requires grad").to_vec();
        x.set_grad(grad)?;
        adam_step(&mut x, &mut state)?;
        x.clamp_in_place(0.0, 1.0);
    }
    x.clear_grad();
    Ok(x.with_requires_grad(false))
}

/// Sum of the per-tile objective over the unrolled (origin `(0, 0)`) grid.
pub fn evaluate_loss(
    net: &Network,
    image: &Tensor,
    objective: &Objective,
    context: &FrameContext,
) -> Result<f64> {
    let (h, w, _) = image.dims3()?;
    let t = net.input_size();
    if t > h || t > w {
        return Err(Error::UnsupportedSize(format!(
            "a {h}x{w} image cannot hold a {t}x{t} tile"
        )));
    }
    let mut total = 0.0;
    for i in 0..h / t {
        for j in 0..w / t {
            let (r0, c0) = (i * t, j * t);
            let ctx = tile_context(context, r0, c0, t)?;
            let mut tape = Tape::new();
            let v = tape.constant(crop(image, r0, c0, t)?);
            let loss = total_loss(&mut tape, net, v, objective, &ctx)?;
            total += tape.scalar(loss.total)?;
        }
    }
    Ok(total)
}

/// Optimizes `x0` with `iters.origins` random tilings, `iters.steps` Adam
/// steps per tile each. Returns the image and the number of tile updates.
#[allow(clippy::too_many_arguments)]
pub fn hallucinate(
    net: &Network,
    x0: &Tensor,
    objective: &Objective,
    context: &FrameContext,
    iters: Iterations,
    lr: f32,
    rng: &mut TileRng,
    parallel: bool,
) -> Result<(Tensor, usize)> {
    let (h, w, c) = x0.dims3()?;
    context.validate(h, w, c)?;
    let t = net.input_size();
    if t > h || t > w {
        return Err(Error::UnsupportedSize(format!(
            "a {h}x{w} frame cannot hold a {t}x{t} tile"
        )));
    }
    if objective.class >= net.class_count() {
        return Err(Error::Index(format!(
            "class {} out of range for {} classes",
            objective.class,
            net.class_count()
        )));
    }
    let mut x = x0.clone();
    let mut updates = 0;
    for _ in 0..iters.origins {
        let schedule: TileSchedule = make_schedule(h, w, t, rng)?;
        let rolled = roll_context(context, schedule.origin)?;
        let update = |_: usize, (r0, c0): (usize, usize), tile: Tensor| {
            let ctx = tile_context(&rolled, r0, c0, t)?;
            optimize_tile(net, tile, objective, &ctx, iters.steps, lr)
        };
        x = if parallel {
            apply_tilewise_parallel(&x, &schedule, update)?
        } else {
            apply_tilewise(&x, &schedule, update)?
        };
        updates += schedule.tile_count() * iters.steps;
    }
    Ok((x, updates))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: usize,
    pub kind: FrameKind,
    pub k: usize,
    pub origins: usize,
    pub steps: usize,
    /// Inconsistency fraction of the `(i - 1, i)` mask.
    pub inconsistency: Option<f64>,
    /// Offsets whose temporal priors entered the objective.
    pub offsets: Vec<usize>,
    pub init: InitPolicy,
    pub tile_updates: usize,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub preset: PresetName,
    pub seed: u64,
    pub class: usize,
    pub config: BTreeMap<String, String>,
    pub shot_changes: usize,
    pub frames: Vec<FrameRecord>,
}

impl RunManifest {
    pub fn new(settings: &Settings) -> Self {
        Self {
            preset: settings.preset.name,
            seed: settings.seed,
            class: settings.class,
            config: settings.echo(),
            shot_changes: 0,
            frames: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))
    }

    pub fn kinds(&self) -> Vec<FrameKind> {
        self.frames.iter().map(|f| f.kind).collect()
    }

    pub fn ks(&self) -> Vec<usize> {
        self.frames.iter().map(|f| f.k).collect()
    }
}

/// Offsets relevant to frame `index` (1-based) that have an existing
/// predecessor.
pub fn active_offsets(preset: &EffectPreset, index: usize) -> Vec<usize> {
    let w = &preset.weights;
    let mut set = BTreeSet::new();
    if index > 1 {
        set.insert(1);
    }
    if w.gamma > 0.0 {
        set.extend(preset.offsets.iter().copied().filter(|&j| j < index));
    }
    set.into_iter().collect()
}

/// Every `(earlier, later)` flow pair a run over `frames` frames reads.
pub fn required_flow_pairs(preset: &EffectPreset, frames: usize) -> Vec<(usize, usize)> {
    (2..=frames)
        .flat_map(|i| active_offsets(preset, i).into_iter().map(move |j| (i - j, i)))
        .collect()
}

/// Initial image for a frame; `warped_previous` falls back to the original
/// content wherever the warp leaves the frame.
pub fn init_frame(
    policy: InitPolicy,
    kind: FrameKind,
    frame: &Tensor,
    previous: Option<&TemporalPrior>,
) -> Result<Tensor> {
    if policy == InitPolicy::OriginalContent || kind != FrameKind::Normal {
        return Ok(frame.clone());
    }
    let prior = previous
        .ok_or_else(|| Error::Contract("warped_previous init needs the previous output".into()))?;
    let (h, w, c) = frame.dims3()?;
    if prior.warped.shape() != frame.shape() {
        return Err(Error::Shape("warped previous output does not match the frame".into()));
    }
    let mut out = prior.warped.clone();
    for (p, &valid) in prior.mask.data().iter().enumerate().take(h * w) {
        if !valid {
            out.data_mut()[p * c..(p + 1) * c].copy_from_slice(&frame.data()[p * c..(p + 1) * c]);
        }
    }
    Ok(out)
}

/// A single image: frame 1 of a one-frame video.
pub fn dream_image(net: &Network, image: &Tensor, settings: &Settings) -> Result<(Tensor, RunManifest)> {
    let out = process_video(net, std::slice::from_ref(image), &NoFlows, settings)?;
    Ok((out.frames.into_iter().next().expect("one frame"), out.manifest))
}

struct NoFlows;

impl FlowSource for NoFlows {
    fn pair(
        &self,
        earlier: usize,
        later: usize,
    ) -> Result<(crate::flow::FlowField, crate::flow::FlowField)> {
        Err(Error::Missing(format!("flow pair ({earlier}, {later})")))
    }
}

pub struct VideoOutput {
    pub frames: Vec<Tensor>,
    pub manifest: RunManifest,
}

pub fn process_video(
    net: &Network,
    frames: &[Tensor],
    flows: &dyn FlowSource,
    settings: &Settings,
) -> Result<VideoOutput> {
    settings.validate()?;
    let first = frames
        .first()
        .ok_or_else(|| Error::Contract("a video needs at least one frame".into()))?;
    for (i, f) in frames.iter().enumerate() {
        if f.shape() != first.shape() {
            return Err(Error::Shape(format!(
                "frame {} is {:?} but frame 1 is {:?}",
                i + 1,
                f.shape(),
                first.shape()
            )));
        }
    }
    let mut manifest = RunManifest::new(settings);
    let mut outputs: Vec<Tensor> = Vec::with_capacity(frames.len());
    for (n, frame) in frames.iter().enumerate() {
        let index = n + 1;
        let mut priors = Vec::new();
        let mut inconsistency = None;
        let mut kind = FrameKind::First;
        if index > 1 {
            for j in active_offsets(&settings.preset, index) {
                let (fwd, bwd) = flows.pair(index - j, index)?;
                let mask = consistency_mask(&fwd, &bwd, &settings.consistency)?;
                if j == 1 {
                    inconsistency = Some(inconsistency_fraction(&mask));
                    kind = if detect_shot_change(&mask, settings.shot_threshold) {
                        FrameKind::ShotChange
                    } else {
                        FrameKind::Normal
                    };
                }
                let (warped, valid) = warp(&outputs[index - j - 1], &bwd)?;
                priors.push(TemporalPrior {
                    offset: j,
                    warped,
                    mask: mask.and(&valid)?,
                });
            }
        }
        let p = &settings.preset;
        let context = if kind == FrameKind::Normal {
            FrameContext {
                offsets: p.offsets.iter().copied().filter(|&j| j < index).collect(),
                priors,
            }
        } else {
            FrameContext::empty()
        };
        let x0 = init_frame(p.init, kind, frame, context.prior(1))?;
        let objective = settings.objective(kind);
        let k = if kind == FrameKind::Normal { p.k_over } else { p.k_base };
        let iters = settings.iterations(k);
        let mut rng = TileRng::for_frame(settings.seed, index);
        let (out, tile_updates) = hallucinate(
            net,
            &x0,
            &objective,
            &context,
            iters,
            settings.lr,
            &mut rng,
            settings.parallel,
        )?;
        let final_loss = evaluate_loss(net, &out, &objective, &context)?;
        let used = if objective.weights.has_temporal_terms() {
            let mut used: BTreeSet<usize> = BTreeSet::new();
            if objective.weights.beta > 0.0 || objective.weights.delta > 0.0 {
                used.insert(1);
            }
            if objective.weights.gamma > 0.0 {
                used.extend(context.offsets.iter().copied());
            }
            used.into_iter().collect()
        } else {
            Vec::new()
        };
        log::info!(
            "frame {index}: {kind:?}, k={k}, {tile_updates} tile updates, loss {final_loss:.6}"
        );
        manifest.shot_changes += (kind == FrameKind::ShotChange) as usize;
        manifest.frames.push(FrameRecord {
            index,
            kind,
            k,
            origins: iters.origins,
            steps: iters.steps,
            inconsistency,
            offsets: used,
            init: if kind == FrameKind::Normal { p.init } else { InitPolicy::OriginalContent },
            tile_updates,
            final_loss,
        });
        outputs.push(out);
    }
    Ok(VideoOutput {
        frames: outputs,
        manifest,
    })
}

/// Masked mean squared difference between `current` and `warped_previous`,
/// normalised by the element count.
pub fn pair_flicker(current: &Tensor, warped_previous: &Tensor, mask: &ConsistencyMask) -> Result<f64> {
    let (h, w, c) = current.dims3()?;
    if warped_previous.shape() != current.shape() || (mask.height(), mask.width()) != (h, w) {
        return Err(Error::Shape("pair_flicker: inputs disagree in shape".into()));
    }
    let mut s = 0.0f64;
    for p in 0..h * w {
        if mask.data()[p] {
            for k in p * c..(p + 1) * c {
                let d = current.data()[k] as f64 - warped_previous.data()[k] as f64;
                s += d * d;
            }
        }
    }
    Ok(s / (h * w * c) as f64)
}

/// Mean short-term temporal loss of consecutive output pairs.
pub fn flicker_metric(outputs: &[Tensor], flows: &dyn FlowSource, params: &ConsistencyParams) -> Result<f64> {
    if outputs.len() < 2 {
        return Err(Error::Contract("flicker_metric needs at least two frames".into()));
    }
    let mut total = 0.0;
    for i in 1..outputs.len() {
        let (fwd, bwd) = flows.pair(i, i + 1)?;
        let mask = consistency_mask(&fwd, &bwd, params)?;
        let (warped, valid) = warp(&outputs[i - 1], &bwd)?;
        total += pair_flicker(&outputs[i], &warped, &mask.and(&valid)?)?;
    }
    Ok(total / (outputs.len() - 1) as f64)
}
