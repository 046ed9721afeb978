//! Simulated clients: a three-layer classifier over one modality.
//!
//! `x -> tanh(extractor · x) -> projector · h = representation -> classifier · r = logits`
//!
//! Hidden width varies per client; the projector maps every client into the
//! shared representation dim so reports from heterogeneous clients line up.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{
    all_finite, argmax, entropy_weight, kl_unchecked, softmax_unchecked, Mat, ProbVec, PROB_FLOOR,
};
use crate::rng::SimRng;
use crate::world::{Example, Modality};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientModel {
    pub client_id: usize,
    pub modality: Modality,
    /// `hidden x input`
    pub extractor: Mat,
    /// `rep_dim x hidden`
    pub projector: Mat,
    /// `classes x rep_dim`
    pub classifier: Mat,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the consensus-label cross-entropy during retraining.
    pub lambda: f64,
    pub kl_temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 20,
            batch_size: 16,
            lambda: 1.0,
            kl_temperature: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda must be non-negative"));
        }
        if !(self.kl_temperature > 0.0 && self.kl_temperature.is_finite()) {
            return Err(Error::invalid("KL temperature must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(())
    }
}

/// Everything a forward pass produces for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub label: usize,
    pub entropy_weight: f64,
    pub representation: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

/// What a client uploads for one synthetic record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ReportPayload {
    Representation(Vec<f64>),
    Logits(Vec<f64>),
    /// Representation of the original and of an augmented view.
    RepresentationPair {
        original: Vec<f64>,
        augmented: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientReport {
    pub client_id: usize,
    pub modality: Modality,
    pub label: usize,
    pub entropy_weight: f64,
    pub payload: ReportPayload,
}

impl ClientReport {
    pub fn representation(&self) -> Option<&[f64]> {
        match &self.payload {
            ReportPayload::Representation(r) => Some(r),
            ReportPayload::RepresentationPair { original, .. } => Some(original),
            ReportPayload::Logits(_) => None,
        }
    }

    pub fn logits(&self) -> Option<&[f64]> {
        match &self.payload {
            ReportPayload::Logits(l) => Some(l),
            _ => None,
        }
    }
}

/// One training example. `target_rep` is the fused representation the
/// client distills toward; it is required by [`Objective::Distill`].
#[derive(Debug, Clone, Copy)]
pub struct TrainSample<'a> {
    pub feature: &'a [f64],
    pub label: usize,
    pub target_rep: Option<&'a [f64]>,
}

impl<'a> From<&'a Example> for TrainSample<'a> {
    fn from(e: &'a Example) -> Self {
        Self {
            feature: &e.feature,
            label: e.label,
            target_rep: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// Cross-entropy on hard labels.
    CrossEntropy,
    /// `KL(softmax(r/τ) ‖ softmax(target/τ)) + λ · CE`
    Distill { lambda: f64, temperature: f64 },
}

/// Parameter-shaped gradient buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub extractor: Mat,
    pub projector: Mat,
    pub classifier: Mat,
}

impl Gradients {
    fn zeros_like(m: &ClientModel) -> Self {
        Self {
            extractor: Mat::zeros(m.extractor.rows(), m.extractor.cols()),
            projector: Mat::zeros(m.projector.rows(), m.projector.cols()),
            classifier: Mat::zeros(m.classifier.rows(), m.classifier.cols()),
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.extractor.frobenius_sq() + self.projector.frobenius_sq() + self.classifier.frobenius_sq()
    }
}

struct Forward {
    hidden: Vec<f64>,
    rep: Vec<f64>,
    logits: Vec<f64>,
    probs: Vec<f64>,
}

impl ClientModel {
    pub fn new(
        client_id: usize,
        modality: Modality,
        input_dim: usize,
        hidden_dim: usize,
        rep_dim: usize,
        num_classes: usize,
        rng: &mut SimRng,
    ) -> Self {
        Self {
            client_id,
            modality,
            extractor: Mat::random_normal(hidden_dim, input_dim, (1.0 / input_dim as f64).sqrt(), rng),
            projector: Mat::random_normal(rep_dim, hidden_dim, (1.0 / hidden_dim as f64).sqrt(), rng),
            classifier: Mat::random_normal(num_classes, rep_dim, (1.0 / rep_dim as f64).sqrt(), rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.extractor.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.extractor.rows()
    }

    pub fn rep_dim(&self) -> usize {
        self.projector.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.rows()
    }

    pub fn is_finite(&self) -> bool {
        self.extractor.is_finite() && self.projector.is_finite() && self.classifier.is_finite()
    }

    /// Flattened parameters (extractor, projector, classifier).
    pub fn parameters(&self) -> Vec<f64> {
        [
            self.extractor.as_slice(),
            self.projector.as_slice(),
            self.classifier.as_slice(),
        ]
        .concat()
    }

    fn forward(&self, x: &[f64]) -> Forward {
        let hidden: Vec<f64> = self.extractor.matvec(x).into_iter().map(f64::tanh).collect();
        let rep = self.projector.matvec(&hidden);
        let logits = self.classifier.matvec(&rep);
        let probs = softmax_unchecked(&logits, 1.0);
        Forward {
            hidden,
            rep,
            logits,
            probs,
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "client {} expects {} features of dim {}, got {}",
                self.client_id,
                self.modality.as_str(),
                self.input_dim(),
                x.len()
            )));
        }
        if !all_finite(x) {
            return Err(Error::invalid("feature must be finite"));
        }
        Ok(())
    }

    fn apply(&mut self, grads: &Gradients, step: f64) {
        self.extractor.add_scaled(-step, &grads.extractor);
        self.projector.add_scaled(-step, &grads.projector);
        self.classifier.add_scaled(-step, &grads.classifier);
    }
}

pub fn infer(model: &ClientModel, feature: &[f64]) -> Result<Inference> {
    model.check_input(feature)?;
    let f = model.forward(feature);
    let p = ProbVec::new(f.probs.clone())?;
    Ok(Inference {
        label: argmax(&f.logits),
        entropy_weight: entropy_weight(&p),
        representation: f.rep,
        logits: f.logits,
        probs: f.probs,
    })
}

/// Loss of one sample; accumulates `scale · ∂loss/∂θ` into `grads` if given.
fn sample_loss(
    model: &ClientModel,
    sample: &TrainSample<'_>,
    objective: Objective,
    grads: Option<(&mut Gradients, f64)>,
) -> f64 {
    let f = model.forward(sample.feature);
    let ce = -f.probs[sample.label].max(PROB_FLOOR).ln();

    let (loss, ce_weight, rep_grad) = match objective {
        Objective::CrossEntropy => (ce, 1.0, None),
        Objective::Distill {
            lambda,
            temperature,
        } => {
            let target = sample
                .target_rep
                .expect("distillation sample without target representation");
            let p = softmax_unchecked(&f.rep, temperature);
            let q = softmax_unchecked(target, temperature);
            let kl = kl_unchecked(&p, &q);
            // ∂KL/∂r_i = p_i (a_i − Σ_j p_j a_j) / τ with a = log p − log q
            let a: Vec<f64> = p
                .iter()
                .zip(&q)
                .map(|(&pi, &qi)| {
                    if pi > 0.0 {
                        pi.ln() - qi.max(PROB_FLOOR).ln()
                    } else {
                        0.0
                    }
                })
                .collect();
            let mean_a: f64 = p.iter().zip(&a).map(|(pi, ai)| pi * ai).sum();
            let g: Vec<f64> = p
                .iter()
                .zip(&a)
                .map(|(pi, ai)| pi * (ai - mean_a) / temperature)
                .collect();
            (kl + lambda * ce, lambda, Some(g))
        }
    };

    if let Some((g, scale)) = grads {
        let mut d_logits = f.probs.clone();
        d_logits[sample.label] -= 1.0;
        d_logits.iter_mut().for_each(|x| *x *= ce_weight);
        g.classifier.add_outer(scale, &d_logits, &f.rep);
        let mut d_rep = model.classifier.matvec_t(&d_logits);
        if let Some(rg) = rep_grad {
            d_rep.iter_mut().zip(&rg).for_each(|(d, r)| *d += r);
        }
        g.projector.add_outer(scale, &d_rep, &f.hidden);
        let d_hidden = model.projector.matvec_t(&d_rep);
        let d_pre: Vec<f64> = d_hidden
            .iter()
            .zip(&f.hidden)
            .map(|(dh, h)| dh * (1.0 - h * h))
            .collect();
        g.extractor.add_outer(scale, &d_pre, sample.feature);
    }
    loss
}

/// Mean loss over `samples` (0 for an empty set).
pub fn batch_loss(model: &ClientModel, samples: &[TrainSample<'_>], objective: Objective) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples
        .iter()
        .map(|s| sample_loss(model, s, objective, None))
        .sum::<f64>()
        / samples.len() as f64
}

/// Mean loss and its gradient over `samples`.
pub fn batch_gradient(
    model: &ClientModel,
    samples: &[TrainSample<'_>],
    objective: Objective,
) -> (f64, Gradients) {
    let mut g = Gradients::zeros_like(model);
    if samples.is_empty() {
        return (0.0, g);
    }
    let scale = 1.0 / samples.len() as f64;
    let loss = samples
        .iter()
        .map(|s| sample_loss(model, s, objective, Some((&mut g, scale))))
        .sum::<f64>()
        * scale;
    (loss, g)
}

fn validate_samples(model: &ClientModel, samples: &[TrainSample<'_>], objective: Objective) -> Result<()> {
    for s in samples {
        model.check_input(s.feature)?;
        if s.label >= model.num_classes() {
            return Err(Error::invalid(format!("label {} out of range", s.label)));
        }
        if let Objective::Distill { .. } = objective {
            match s.target_rep {
                Some(t) if t.len() == model.rep_dim() && all_finite(t) => {}
                Some(t) => {
                    return Err(Error::invalid(format!(
                        "fused representation has dim {}, expected {}",
                        t.len(),
                        model.rep_dim()
                    )))
                }
                None => return Err(Error::invalid("retraining record lacks a fused representation")),
            }
        }
    }
    Ok(())
}

/// Minibatch SGD. Returns the mean loss over `samples` after the last epoch.
pub fn sgd(
    model: &mut ClientModel,
    samples: &[TrainSample<'_>],
    objective: Objective,
    cfg: &TrainConfig,
    rng: &mut SimRng,
) -> Result<f64> {
    cfg.validate()?;
    validate_samples(model, samples, objective)?;
    if samples.is_empty() || cfg.epochs == 0 {
        return Ok(batch_loss(model, samples, objective));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| samples[i]));
            let (loss, g) = batch_gradient(model, &batch, objective);
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            model.apply(&g, cfg.learning_rate);
        }
        if !model.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
    }
    let loss = batch_loss(model, samples, objective);
    if !loss.is_finite() {
        return Err(Error::TrainingDiverged {
            epoch: cfg.epochs - 1,
        });
    }
    Ok(loss)
}

/// Local supervised training on private data.
pub fn local_train(
    model: &mut ClientModel,
    dataset: &[Example],
    cfg: &TrainConfig,
    rng: &mut SimRng,
) -> Result<f64> {
    if let Some(e) = dataset.iter().find(|e| e.modality != model.modality) {
        return Err(Error::invalid(format!(
            "{} client given a {} example",
            model.modality.as_str(),
            e.modality.as_str()
        )));
    }
    let samples: Vec<TrainSample<'_>> = dataset.iter().map(TrainSample::from).collect();
    sgd(model, &samples, Objective::CrossEntropy, cfg, rng)
}

/// Retraining on refined synthetic records: distill toward the fused
/// representation and fit the consensus label.
pub fn retrain(
    model: &mut ClientModel,
    refined: &[TrainSample<'_>],
    cfg: &TrainConfig,
    rng: &mut SimRng,
) -> Result<f64> {
    let objective = Objective::Distill {
        lambda: cfg.lambda,
        temperature: cfg.kl_temperature,
    };
    sgd(model, refined, objective, cfg, rng)
}

/// Logit-variant retraining: cross-entropy on consensus labels only.
pub fn retrain_logit(
    model: &mut ClientModel,
    refined: &[TrainSample<'_>],
    cfg: &TrainConfig,
    rng: &mut SimRng,
) -> Result<f64> {
    sgd(model, refined, Objective::CrossEntropy, cfg, rng)
}

/// Feature-space view augmentation: random coordinate masking then additive
/// Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub drop_rate: f64,
    pub noise_std: f64,
}

impl Augmentation {
    pub const DEFAULT_DROP_RATE: f64 = 0.2;

    /// Default strengths for a world with per-coordinate noise `world_noise`.
    pub fn for_world_noise(world_noise: f64) -> Self {
        Self {
            drop_rate: Self::DEFAULT_DROP_RATE,
            noise_std: 0.5 * world_noise,
        }
    }
}

pub fn augment_feature<R: Rng + ?Sized>(feature: &[f64], aug: &Augmentation, rng: &mut R) -> Vec<f64> {
    feature
        .iter()
        .map(|&x| {
            let kept = if rng.random::<f64>() < aug.drop_rate { 0.0 } else { x };
            kept + aug.noise_std * rng.sample::<f64, _>(StandardNormal)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::ProbVec;
    use crate::rng::{stream, Stream};
    use crate::world::{build_world, heldout_set, sample_example};

    fn model(seed: u64, input: usize, hidden: usize, d: usize, c: usize) -> ClientModel {
        let mut rng = stream(seed, Stream::ClientInit, &[]);
        ClientModel::new(0, Modality::Image, input, hidden, d, c, &mut rng)
    }

    #[test]
    fn zero_classifier_gives_uniform_weight() {
        let mut m = model(1, 4, 6, 8, 5);
        m.classifier = Mat::zeros(5, 8);
        let inf = infer(&m, &[0.3, -0.2, 1.0, 0.5]).unwrap();
        let w = 1.0 / (1.0 + 5f64.ln());
        assert!((inf.entropy_weight - w).abs() < 1e-12);
        assert_eq!(inf.label, 0);
        assert_eq!(inf, infer(&m, &[0.3, -0.2, 1.0, 0.5]).unwrap());
        assert!(infer(&m, &[0.3]).is_err());
    }

    #[test]
    fn argmax_tie_goes_to_lowest_label() {
        // classifier rows chosen so logits are [1, 1, 0] for any representation with r[0] = 1
        let mut m = model(2, 2, 3, 2, 3);
        m.extractor = Mat::from_rows(&[vec![10.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        m.projector = Mat::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 0.0]]).unwrap();
        m.classifier = Mat::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let inf = infer(&m, &[100.0, 0.0]).unwrap();
        assert!((inf.logits[0] - 1.0).abs() < 1e-12 && inf.logits[0] == inf.logits[1]);
        assert_eq!(inf.label, 0);
    }

    #[test]
    fn zero_epochs_is_identity() {
        let w = build_world(3, 4, 4, 0.0, 0.5, 1).unwrap();
        let mut rng = stream(1, Stream::Eval, &[]);
        let data = heldout_set(&w, 5, Modality::Image, &mut rng);
        let mut m = model(3, 4, 6, 8, 3);
        let before = m.clone();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        local_train(&mut m, &data, &cfg, &mut rng).unwrap();
        assert_eq!(m, before);
        assert!(retrain_logit(&mut m, &[], &TrainConfig::default(), &mut rng).is_ok());
        assert_eq!(m, before);
    }

    #[test]
    fn modality_mismatch_rejected() {
        let w = build_world(3, 4, 4, 0.0, 0.5, 1).unwrap();
        let mut rng = stream(1, Stream::Eval, &[]);
        let data = heldout_set(&w, 2, Modality::Text, &mut rng);
        let mut m = model(3, 4, 6, 8, 3);
        assert!(local_train(&mut m, &data, &TrainConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn learns_separable_two_class_problem() {
        let w = build_world(2, 6, 6, 0.0, 0.5, 8).unwrap();
        let mut rng = stream(8, Stream::Eval, &[]);
        let train = heldout_set(&w, 50, Modality::Image, &mut rng);
        let mut m = model(8, 6, 8, 8, 2);
        let cfg = TrainConfig { epochs: 200, ..Default::default() };
        local_train(&mut m, &train, &cfg, &mut rng).unwrap();
        let acc = train
            .iter()
            .filter(|e| infer(&m, &e.feature).unwrap().label == e.label)
            .count() as f64
            / train.len() as f64;
        assert!(acc >= 0.95, "accuracy {acc}");
    }

    #[test]
    fn divergence_reports_epoch() {
        let w = build_world(3, 4, 4, 0.0, 0.5, 1).unwrap();
        let mut rng = stream(1, Stream::Eval, &[]);
        let data = heldout_set(&w, 5, Modality::Image, &mut rng);
        let mut m = model(3, 4, 6, 8, 3);
        let cfg = TrainConfig { learning_rate: 1e300, epochs: 3, ..Default::default() };
        match local_train(&mut m, &data, &cfg, &mut rng) {
            Err(Error::TrainingDiverged { epoch }) => assert!(epoch < 3),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn distill_loss_vanishes_at_target() {
        let mut m = model(4, 3, 5, 6, 4);
        let x = [0.5, -1.0, 0.2];
        let r = infer(&m, &x).unwrap().representation;
        let s = [TrainSample { feature: &x, label: 1, target_rep: Some(&r) }];
        let obj = Objective::Distill { lambda: 0.0, temperature: 1.0 };
        let (loss, g) = batch_gradient(&m, &s, obj);
        assert!(loss.abs() < 1e-12);
        assert!(g.classifier.frobenius_sq() == 0.0);
        assert!(g.norm_sq() < 1e-20);
        // retraining with zero loss leaves the model numerically in place
        let before = m.clone();
        let mut rng = stream(0, Stream::Retrain, &[]);
        let cfg = TrainConfig { lambda: 0.0, epochs: 2, ..Default::default() };
        retrain(&mut m, &s, &cfg, &mut rng).unwrap();
        assert!(m.parameters().iter().zip(before.parameters()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn retrain_requires_fused_rep() {
        let mut m = model(4, 3, 5, 6, 4);
        let x = [0.5, -1.0, 0.2];
        let s = [TrainSample { feature: &x, label: 1, target_rep: None }];
        let mut rng = stream(0, Stream::Retrain, &[]);
        assert!(retrain(&mut m, &s, &TrainConfig::default(), &mut rng).is_err());
        let short = [0.0; 3];
        let s = [TrainSample { feature: &x, label: 1, target_rep: Some(&short) }];
        assert!(retrain(&mut m, &s, &TrainConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn logit_retrain_matches_zero_kl_direction() {
        // with the KL term removed the distillation gradient is λ times the CE gradient
        let m = model(5, 3, 5, 6, 4);
        let x = [0.1, 0.7, -0.4];
        let s = [TrainSample { feature: &x, label: 2, target_rep: None }];
        let (_, ce) = batch_gradient(&m, &s, Objective::CrossEntropy);
        let r = infer(&m, &x).unwrap().representation;
        let s2 = [TrainSample { feature: &x, label: 2, target_rep: Some(&r) }];
        let (_, dg) = batch_gradient(&m, &s2, Objective::Distill { lambda: 3.0, temperature: 1.0 });
        for (a, b) in ce.classifier.as_slice().iter().zip(dg.classifier.as_slice()) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
        for (a, b) in ce.extractor.as_slice().iter().zip(dg.extractor.as_slice()) {
            assert!((3.0 * a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn logit_retrain_drives_loss_down() {
        let w = build_world(3, 5, 5, 0.0, 0.3, 2).unwrap();
        let mut rng = stream(2, Stream::Eval, &[]);
        let data = heldout_set(&w, 10, Modality::Image, &mut rng);
        let samples: Vec<TrainSample<'_>> = data.iter().map(TrainSample::from).collect();
        let mut m = model(6, 5, 8, 8, 3);
        let cfg = TrainConfig { epochs: 1, ..Default::default() };
        let mut losses = vec![batch_loss(&m, &samples, Objective::CrossEntropy)];
        for _ in 0..30 {
            losses.push(retrain_logit(&mut m, &samples, &cfg, &mut rng).unwrap());
        }
        assert!(losses.last().unwrap() < &(0.25 * losses[0]), "{losses:?}");
        let rises = losses.windows(2).filter(|w| w[1] > w[0] * 1.05).count();
        assert!(rises <= 2, "{losses:?}");
    }

    #[test]
    fn entropy_weight_in_unit_interval() {
        let m = model(7, 4, 6, 8, 5);
        let mut rng = stream(7, Stream::Eval, &[]);
        for _ in 0..200 {
            let x: Vec<f64> = (0..4).map(|_| rng.sample::<f64, _>(StandardNormal) * 5.0).collect();
            let inf = infer(&m, &x).unwrap();
            assert!(inf.entropy_weight > 0.0 && inf.entropy_weight <= 1.0);
            assert!(ProbVec::new(inf.probs).is_ok());
        }
    }

    #[test]
    fn augmentation_identity_and_mask_rate() {
        let x: Vec<f64> = (0..10).map(|i| i as f64 + 1.0).collect();
        let mut rng = stream(0, Stream::Augment, &[]);
        let id = Augmentation { drop_rate: 0.0, noise_std: 0.0 };
        assert_eq!(augment_feature(&x, &id, &mut rng), x);

        let aug = Augmentation { drop_rate: 0.2, noise_std: 0.0 };
        let ones = vec![1.0; 10_000];
        let zeros = augment_feature(&ones, &aug, &mut rng).iter().filter(|v| **v == 0.0).count();
        let frac = zeros as f64 / 10_000.0;
        assert!((frac - 0.2).abs() <= 0.02, "{frac}");

        let a = augment_feature(&x, &aug, &mut stream(1, Stream::Augment, &[]));
        let b = augment_feature(&x, &aug, &mut stream(1, Stream::Augment, &[]));
        assert_eq!(a, b);
    }

    #[test]
    fn augmented_samples_stay_recognisable() {
        let w = build_world(10, 16, 16, 0.0, 0.5, 3).unwrap();
        let aug = Augmentation::for_world_noise(w.noise_std);
        let mut rng = stream(3, Stream::Augment, &[]);
        let n = 2000;
        let ok = (0..n)
            .filter(|i| {
                let e = sample_example(&w, i % 10, Modality::Image, &mut rng).unwrap();
                let z = augment_feature(&e.feature, &aug, &mut rng);
                w.nearest_class(&z, Modality::Image) == e.label
            })
            .count();
        assert!(ok as f64 / n as f64 >= 0.90, "{ok}/{n}");
    }
}
