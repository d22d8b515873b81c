//! Dream, class, temporal and flow-trail objectives.
//!
//! Every loss is recorded on a [`Tape`] so its gradient w.r.t. the output
//! image comes from [`Tape::backward`]. Warped priors and masks enter as
//! constants. Masks are per pixel and are broadcast over channels, so the
//! normaliser `D` is the element count `H * W * C` of the image.

use crate::error::{Error, Result};
use crate::flow::ConsistencyMask;
use crate::net::Network;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Class logit term.
    pub alpha: f32,
    /// Short-term temporal term (`J = {1}`).
    pub beta: f32,
    /// Long-term temporal term.
    pub gamma: f32,
    /// Flow-trail term.
    pub delta: f32,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("delta", self.delta),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn has_temporal_terms(&self) -> bool {
        self.beta > 0.0 || self.gamma > 0.0 || self.delta > 0.0
    }

    /// `alpha*L_c + beta*L_st + gamma*L_lt + delta*L_f` over plain values,
    /// skipping zero-weighted terms.
    pub fn combine(&self, terms: &LossTerms) -> f64 {
        [
            (self.alpha, terms.controlled),
            (self.beta, terms.short_term),
            (self.gamma, terms.long_term),
            (self.delta, terms.trail),
        ]
        .into_iter()
        .filter(|(w, _)| *w != 0.0)
        .map(|(w, v)| w as f64 * v.unwrap_or(0.0))
        .sum()
    }

    pub fn scaled(&self, s: f32) -> Self {
        Self {
            alpha: self.alpha * s,
            beta: self.beta * s,
            gamma: self.gamma * s,
            delta: self.delta * s,
        }
    }
}

/// Unweighted component values; `None` for terms that were not evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub controlled: Option<f64>,
    pub short_term: Option<f64>,
    pub long_term: Option<f64>,
    pub trail: Option<f64>,
}

/// A finalized earlier output warped into the current frame, together with
/// its consistency mask `c^(i-j, i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalPrior {
    pub offset: usize,
    pub warped: Tensor,
    pub mask: ConsistencyMask,
}

/// Temporal inputs for one frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameContext {
    /// Long-term offsets active for this frame, strictly increasing.
    pub offsets: Vec<usize>,
    /// Priors, one per offset needed by any active term.
    pub priors: Vec<TemporalPrior>,
}

impl FrameContext {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn prior(&self, offset: usize) -> Option<&TemporalPrior> {
        self.priors.iter().find(|p| p.offset == offset)
    }

    /// Priors for `offsets`, in order; a missing offset is a contract error.
    pub fn priors_for(&self, offsets: &[usize]) -> Result<Vec<&TemporalPrior>> {
        if offsets.windows(2).any(|w| w[0] >= w[1]) || offsets.first() == Some(&0) {
            return Err(Error::Contract(format!(
                "offsets {offsets:?} must be positive and strictly increasing"
            )));
        }
        offsets
            .iter()
            .map(|&j| {
                self.prior(j).ok_or_else(|| {
                    Error::Contract(format!("no warped prior or mask for offset {j}"))
                })
            })
            .collect()
    }

    /// Checks that every prior matches an `h x w x c` frame.
    pub fn validate(&self, h: usize, w: usize, c: usize) -> Result<()> {
        for p in &self.priors {
            if p.warped.shape() != [h, w, c] || (p.mask.height(), p.mask.width()) != (h, w) {
                return Err(Error::Shape(format!(
                    "prior for offset {} does not match a {h}x{w}x{c} frame",
                    p.offset
                )));
            }
        }
        Ok(())
    }
}

/// `-||F||_F^2` of a feature map.
pub fn layer_dream_loss(tape: &mut Tape, feature_map: Var) -> Var {
    let s = tape.sum_squares(feature_map);
    tape.scale(s, -1.0)
}

/// `-logits[class]^2`.
pub fn controlled_loss(tape: &mut Tape, logits: Var, class: usize) -> Result<Var> {
    let n = tape.value(logits).len();
    if class >= n {
        return Err(Error::Index(format!("class {class} out of range for {n} logits")));
    }
    let l = tape.select(logits, class)?;
    let s = tape.sum_squares(l);
    Ok(tape.scale(s, -1.0))
}

/// Per-offset weight fields `c_l = max(c_j - sum_{k < j} c_k, 0)`, with
/// masks ordered from the nearest offset outwards.
pub fn long_term_weights(masks: &[&ConsistencyMask]) -> Result<Vec<Vec<f32>>> {
    let Some(first) = masks.first() else {
        return Ok(Vec::new());
    };
    let (h, w) = (first.height(), first.width());
    if masks.iter().any(|m| (m.height(), m.width()) != (h, w)) {
        return Err(Error::Shape("long_term_weights: mask dimensions differ".into()));
    }
    let mut nearer = vec![0.0f32; h * w];
    let mut out = Vec::with_capacity(masks.len());
    for m in masks {
        let field: Vec<f32> = m
            .data()
            .iter()
            .zip(&nearer)
            .map(|(&c, &s)| ((c as u8 as f32) - s).max(0.0))
            .collect();
        for (s, &c) in nearer.iter_mut().zip(m.data()) {
            *s += c as u8 as f32;
        }
        out.push(field);
    }
    Ok(out)
}

fn broadcast(pixel_field: &[f32], channels: usize) -> Vec<f32> {
    pixel_field
        .iter()
        .flat_map(|&v| std::iter::repeat_n(v, channels))
        .collect()
}

/// `(1/D) sum_j sum_k weight_j[k] (x[k] - w_j[k])^2` over the given priors.
pub fn temporal_loss(
    tape: &mut Tape,
    x: Var,
    priors: &[&TemporalPrior],
    weights: &[Vec<f32>],
) -> Result<Var> {
    let (h, w, c) = tape.value(x).dims3()?;
    if priors.len() != weights.len() {
        return Err(Error::Contract(format!(
            "temporal_loss: {} priors but {} weight fields",
            priors.len(),
            weights.len()
        )));
    }
    let d = (h * w * c) as f32;
    let mut total: Option<Var> = None;
    for (p, wf) in priors.iter().zip(weights) {
        if p.warped.shape() != [h, w, c] || wf.len() != h * w {
            return Err(Error::Shape(format!(
                "temporal_loss: prior for offset {} does not match {h}x{w}x{c}",
                p.offset
            )));
        }
        let term = tape.weighted_squared_diff(x, p.warped.data().to_vec(), broadcast(wf, c))?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    Ok(tape.scale(total, 1.0 / d))
}

/// Short-term loss: [`temporal_loss`] restricted to the offset-1 prior.
pub fn short_term_loss(tape: &mut Tape, x: Var, context: &FrameContext) -> Result<Var> {
    let priors = context.priors_for(&[1])?;
    let weights = long_term_weights(&[&priors[0].mask])?;
    temporal_loss(tape, x, &priors, &weights)
}

/// Long-term loss over `context.offsets`.
pub fn long_term_loss(tape: &mut Tape, x: Var, context: &FrameContext) -> Result<Var> {
    let priors = context.priors_for(&context.offsets)?;
    let masks: Vec<&ConsistencyMask> = priors.iter().map(|p| &p.mask).collect();
    let weights = long_term_weights(&masks)?;
    temporal_loss(tape, x, &priors, &weights)
}

/// `||x - w||_F^2 / (D * sum_k c[k])`, zero when no pixel is consistent.
///
/// With `masked` the residual itself is restricted to consistent pixels.
pub fn flow_trail_loss(
    tape: &mut Tape,
    x: Var,
    warped: &Tensor,
    mask: &ConsistencyMask,
    masked: bool,
) -> Result<Var> {
    let (h, w, c) = tape.value(x).dims3()?;
    if warped.shape() != [h, w, c] || (mask.height(), mask.width()) != (h, w) {
        return Err(Error::Shape(format!(
            "flow_trail_loss: inputs do not match {h}x{w}x{c}"
        )));
    }
    let consistent = (mask.count() * c) as f64;
    if consistent == 0.0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let weight = if masked {
        broadcast(&mask.to_f32(), c)
    } else {
        vec![1.0; h * w * c]
    };
    let s = tape.weighted_squared_diff(x, warped.data().to_vec(), weight)?;
    let d = (h * w * c) as f64;
    Ok(tape.scale(s, (1.0 / (d * consistent)) as f32))
}

/// Which terms to evaluate and how.
#[derive(Clone, Debug, PartialEq)]
pub struct Objective {
    pub class: usize,
    pub weights: LossWeights,
    pub trail_masked: bool,
}

pub struct LossBreakdown {
    pub total: Var,
    pub terms: LossTerms,
}

/// `alpha*L_c + beta*L_st + gamma*L_lt + delta*L_f` for image `x`.
///
/// Zero-weighted terms are not evaluated; if every weight is zero the
/// result is a constant 0.
pub fn total_loss(
    tape: &mut Tape,
    net: &Network,
    x: Var,
    objective: &Objective,
    context: &FrameContext,
) -> Result<LossBreakdown> {
    let w = objective.weights;
    let mut parts: Vec<Var> = Vec::new();
    let mut terms = LossTerms::default();
    let mut record = |tape: &mut Tape, weight: f32, v: Var, slot: &mut Option<f64>| {
        *slot = Some(tape.scalar(v).unwrap());
        parts.push(tape.scale(v, weight));
    };
    if w.alpha != 0.0 {
        let logits = net.forward_logits(tape, x)?;
        let l = controlled_loss(tape, logits, objective.class)?;
        record(tape, w.alpha, l, &mut terms.controlled);
    }
    if w.beta != 0.0 {
        let l = short_term_loss(tape, x, context)?;
        record(tape, w.beta, l, &mut terms.short_term);
    }
    if w.gamma != 0.0 {
        let l = long_term_loss(tape, x, context)?;
        record(tape, w.gamma, l, &mut terms.long_term);
    }
    if w.delta != 0.0 {
        let p = context.priors_for(&[1])?[0];
        let l = flow_trail_loss(tape, x, &p.warped, &p.mask, objective.trail_masked)?;
        record(tape, w.delta, l, &mut terms.trail);
    }
    let mut iter = parts.into_iter();
    let total = match iter.next() {
        Some(first) => iter.try_fold(first, |acc, v| tape.add(acc, v))?,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    Ok(LossBreakdown { total, terms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_differences, max_relative_error};
    use crate::net::{micro_spec, Weights};
    use proptest::prelude::*;

    fn mask(bits: &[u8]) -> ConsistencyMask {
        ConsistencyMask::new(1, bits.len(), bits.iter().map(|&b| b == 1).collect()).unwrap()
    }

    fn value(tape: &Tape, v: Var) -> f32 {
        tape.value(v).item().unwrap()
    }

    #[test]
    fn dream_loss_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[2, 2]));
        let l = layer_dream_loss(&mut tape, z);
        assert_eq!(value(&tape, l), 0.0);

        let f = tape.leaf(
            Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0])
                .unwrap()
                .with_requires_grad(true),
        );
        let l = layer_dream_loss(&mut tape, f);
        assert_eq!(value(&tape, l), -30.0);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(f).unwrap(), &[-2.0, -4.0, -6.0, -8.0]);
    }

    #[test]
    fn controlled_loss_examples() {
        let mut tape = Tape::new();
        let logits = tape.leaf(
            Tensor::new(vec![3], vec![0.5, 3.0, 0.0])
                .unwrap()
                .with_requires_grad(true),
        );
        let l = controlled_loss(&mut tape, logits, 1).unwrap();
        assert_eq!(value(&tape, l), -9.0);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(logits).unwrap(), &[0.0, -6.0, 0.0]);

        let l = controlled_loss(&mut tape, logits, 2).unwrap();
        assert_eq!(value(&tape, l), 0.0);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(logits).unwrap(), &[0.0, 0.0, 0.0]);

        assert!(matches!(
            controlled_loss(&mut tape, logits, 3),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn long_term_weight_examples() {
        let c1 = mask(&[1, 0, 1]);
        assert_eq!(long_term_weights(&[&c1]).unwrap(), vec![vec![1.0, 0.0, 1.0]]);
        let c2 = mask(&[1, 1, 1]);
        let w = long_term_weights(&[&c1, &c2]).unwrap();
        assert_eq!(w[1], vec![0.0, 1.0, 0.0]);
        let z = mask(&[0, 0, 0]);
        let w = long_term_weights(&[&z, &z, &z]).unwrap();
        assert!(w.iter().flatten().all(|&v| v == 0.0));
        assert!(long_term_weights(&[&c1, &mask(&[1, 1])]).is_err());
    }

    proptest! {
        #[test]
        fn long_term_weights_never_double_count(
            stack in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 12), 1..7)
        ) {
            let masks: Vec<ConsistencyMask> = stack
                .iter()
                .map(|bits| ConsistencyMask::new(3, 4, bits.clone()).unwrap())
                .collect();
            let refs: Vec<&ConsistencyMask> = masks.iter().collect();
            let w = long_term_weights(&refs).unwrap();
            prop_assert_eq!(&w[0], &masks[0].to_f32());
            for p in 0..12 {
                let s: f32 = w.iter().map(|f| f[p]).sum();
                prop_assert!(s <= 1.0);
            }
        }

        #[test]
        fn temporal_loss_ignores_masked_out_permutations(
            vals in proptest::collection::vec(0.0f32..1.0, 8),
            shift in 1usize..4,
        ) {
            // pixels 4..8 are masked out; rotating them leaves the loss unchanged
            let bits = [true, true, true, true, false, false, false, false];
            let m = ConsistencyMask::new(1, 8, bits.to_vec()).unwrap();
            let prior = TemporalPrior { offset: 1, warped: Tensor::full(&[1, 8, 1], 0.5), mask: m };
            let ctx = FrameContext { offsets: vec![1], priors: vec![prior] };
            let mut permuted = vals.clone();
            permuted[4..].rotate_left(shift);
            let eval = |v: &[f32]| {
                let mut tape = Tape::new();
                let x = tape.constant(Tensor::new(vec![1, 8, 1], v.to_vec()).unwrap());
                let l = short_term_loss(&mut tape, x, &ctx).unwrap();
                tape.value(l).item().unwrap()
            };
            prop_assert_eq!(eval(&vals), eval(&permuted));
        }
    }

    #[test]
    fn temporal_loss_examples() {
        let m = ConsistencyMask::new(1, 4, vec![true, true, false, false]).unwrap();
        let prior = TemporalPrior {
            offset: 1,
            warped: Tensor::zeros(&[1, 4, 1]),
            mask: m.clone(),
        };
        let ctx = FrameContext {
            offsets: vec![1],
            priors: vec![prior],
        };
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let l = short_term_loss(&mut tape, x, &ctx).unwrap();
        assert_eq!(value(&tape, l), 1.25);

        let same = tape.constant(Tensor::zeros(&[1, 4, 1]));
        let l = short_term_loss(&mut tape, same, &ctx).unwrap();
        assert_eq!(value(&tape, l), 0.0);

        let zero_ctx = FrameContext {
            offsets: vec![1],
            priors: vec![TemporalPrior {
                offset: 1,
                warped: Tensor::zeros(&[1, 4, 1]),
                mask: ConsistencyMask::full(1, 4, false),
            }],
        };
        let l = short_term_loss(&mut tape, x, &zero_ctx).unwrap();
        assert_eq!(value(&tape, l), 0.0);

        let missing = FrameContext {
            offsets: vec![1, 2],
            priors: ctx.priors.clone(),
        };
        assert!(matches!(
            long_term_loss(&mut tape, x, &missing),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn masks_broadcast_over_channels() {
        let m = ConsistencyMask::new(1, 2, vec![true, false]).unwrap();
        let ctx = FrameContext {
            offsets: vec![1],
            priors: vec![TemporalPrior {
                offset: 1,
                warped: Tensor::zeros(&[1, 2, 3]),
                mask: m,
            }],
        };
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 2, 3], 1.0));
        let l = short_term_loss(&mut tape, x, &ctx).unwrap();
        // three consistent elements out of D = 6
        assert_eq!(value(&tape, l), 0.5);
    }

    #[test]
    fn flow_trail_examples() {
        let m = ConsistencyMask::full(1, 2, true);
        let w = Tensor::zeros(&[1, 2, 1]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 2, 1], 1.0));
        let l = flow_trail_loss(&mut tape, x, &w, &m, false).unwrap();
        assert_eq!(value(&tape, l), 0.5);

        let same = tape.constant(w.clone());
        let l = flow_trail_loss(&mut tape, same, &w, &m, false).unwrap();
        assert_eq!(value(&tape, l), 0.0);

        let none = ConsistencyMask::full(1, 2, false);
        let l = flow_trail_loss(&mut tape, x, &w, &none, false).unwrap();
        assert_eq!(value(&tape, l), 0.0);

        // doubling the consistent count halves the loss for a fixed residual
        let x4 = tape.constant(Tensor::new(vec![1, 4, 1], vec![1.0, 1.0, 0.0, 0.0]).unwrap());
        let w4 = Tensor::zeros(&[1, 4, 1]);
        let half = ConsistencyMask::new(1, 4, vec![true, false, true, false]).unwrap();
        let all = ConsistencyMask::full(1, 4, true);
        let a = flow_trail_loss(&mut tape, x4, &w4, &half, false).unwrap();
        let b = flow_trail_loss(&mut tape, x4, &w4, &all, false).unwrap();
        assert_eq!(value(&tape, a), 2.0 * value(&tape, b));

        let m = flow_trail_loss(&mut tape, x4, &w4, &half, true).unwrap();
        assert_eq!(value(&tape, m), 1.0 / 8.0);
    }

    #[test]
    fn combine_examples() {
        let w = LossWeights {
            alpha: 10000.0,
            beta: 300.0,
            gamma: 0.0,
            delta: 0.0,
        };
        let terms = LossTerms {
            controlled: Some(1e-4),
            short_term: Some(2e-3),
            long_term: Some(7.0),
            trail: None,
        };
        assert!((w.combine(&terms) - 1.6).abs() < 1e-12);
        let only_alpha = LossWeights { beta: 0.0, ..w };
        assert!((only_alpha.combine(&terms) - 1.0).abs() < 1e-12);
        assert_eq!(w.scaled(0.0).combine(&terms), 0.0);
    }

    fn fixture() -> (Network, Tensor, FrameContext) {
        let spec = micro_spec(8, 3, 4, 5);
        let net = Network::new(spec.clone(), Weights::random(&spec, 3)).unwrap();
        let x = Tensor::from_fn(&[8, 8, 3], |i| ((i * 37 % 101) as f32) / 101.0);
        let priors = (0..2)
            .map(|k| TemporalPrior {
                offset: 1 << k,
                warped: Tensor::from_fn(&[8, 8, 3], |i| ((i * 13 + k) % 17) as f32 / 17.0),
                mask: ConsistencyMask::new(8, 8, (0..64).map(|p| (p + k) % 3 != 0).collect())
                    .unwrap(),
            })
            .collect();
        (
            net,
            x,
            FrameContext {
                offsets: vec![1, 2],
                priors,
            },
        )
    }

    #[test]
    fn total_loss_only_alpha_equals_controlled_term() {
        let (net, x, ctx) = fixture();
        let obj = Objective {
            class: 2,
            weights: LossWeights {
                alpha: 3.0,
                beta: 0.0,
                gamma: 0.0,
                delta: 0.0,
            },
            trail_masked: false,
        };
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let b = total_loss(&mut tape, &net, xv, &obj, &ctx).unwrap();
        let logit = net.logits(&x).unwrap().data()[2];
        assert_eq!(value(&tape, b.total), 3.0 * -(logit * logit));
        assert!(b.terms.short_term.is_none() && b.terms.trail.is_none());

        let zero = Objective {
            weights: obj.weights.scaled(0.0),
            ..obj
        };
        let b = total_loss(&mut tape, &net, xv, &zero, &FrameContext::empty()).unwrap();
        assert_eq!(value(&tape, b.total), 0.0);
    }

    #[test]
    fn total_loss_scales_linearly_with_weights() {
        let (net, x, ctx) = fixture();
        let weights = LossWeights {
            alpha: 2.0,
            beta: 3.0,
            gamma: 5.0,
            delta: 7.0,
        };
        let run = |w: LossWeights| {
            let obj = Objective {
                class: 1,
                weights: w,
                trail_masked: false,
            };
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone().with_requires_grad(true));
            let b = total_loss(&mut tape, &net, xv, &obj, &ctx).unwrap();
            tape.backward(b.total).unwrap();
            (value(&tape, b.total), tape.grad(xv).unwrap().to_vec(), b.terms)
        };
        let (l1, g1, terms) = run(weights);
        let (l2, g2, _) = run(weights.scaled(4.0));
        assert!((l2 - 4.0 * l1).abs() <= 1e-5 * l2.abs().max(1.0));
        for (a, b) in g1.iter().zip(&g2) {
            assert!((b - 4.0 * a).abs() <= 1e-5 * b.abs().max(1e-3));
        }
        assert!((weights.combine(&terms) - l1 as f64).abs() < 1e-4 * (l1.abs() as f64).max(1.0));
    }

    #[test]
    fn every_loss_gradient_matches_finite_differences() {
        let (net, x, ctx) = fixture();
        let prior = ctx.prior(1).unwrap().clone();
        type LossFn<'a> = Box<dyn Fn(&mut Tape, Var) -> Var + 'a>;
        let losses: Vec<(&str, LossFn)> = vec![
            (
                "dream",
                Box::new(|t: &mut Tape, v: Var| {
                    let f = net.forward_features(t, v, 2, 1).unwrap();
                    layer_dream_loss(t, f)
                }),
            ),
            (
                "temporal",
                Box::new(|t: &mut Tape, v: Var| long_term_loss(t, v, &ctx).unwrap()),
            ),
            (
                "trail",
                Box::new(|t: &mut Tape, v: Var| {
                    flow_trail_loss(t, v, &prior.warped, &prior.mask, false).unwrap()
                }),
            ),
        ];
        for (name, f) in &losses {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone().with_requires_grad(true));
            let l = f(&mut tape, xv);
            tape.backward(l).unwrap();
            let analytic = tape.grad(xv).unwrap().to_vec();
            let numeric = central_differences(&x, 1e-3, |p| {
                let mut tape = Tape::new();
                let xv = tape.constant(p.clone());
                let l = f(&mut tape, xv);
                tape.scalar(l).unwrap()
            });
            let err = max_relative_error(&analytic, &numeric);
            assert!(err <= 1e-3, "{name}: relative error {err}");
        }
    }
}
