//! Evaluation and theory instrumentation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::client::{batch_gradient, batch_loss, infer, ClientModel, Objective, TrainSample};
use crate::error::{Error, Result};
use crate::math::{mean_vec, sq_dist};
use crate::server::{generate_post_finetune, GeneratorModel};
use crate::world::{Example, FeatureWorld, Modality};

/// One line of `metrics.jsonl`. Round 0 is the state after client
/// pre-training, before any protocol round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    /// Held-out accuracy of each client on its own modality.
    pub client_accuracy: Vec<f64>,
    pub img_acc: Option<f64>,
    pub txt_acc: Option<f64>,
    pub mean_acc: f64,
    /// Fraction of label-only generations the oracle assigns to the prompt class.
    pub t2i_accuracy: f64,
    /// Fraction of kept records whose consensus label is the oracle class of the image.
    pub labvote_fidelity: Option<f64>,
    /// Fraction of kept records whose prompt label is the oracle class of the image.
    pub prompt_fidelity: Option<f64>,
    /// Same as `prompt_fidelity` over every synthetic record.
    pub prompt_fidelity_all: Option<f64>,
    pub kept_fraction: Option<f64>,
    /// Mean held-out cross-entropy over clients.
    pub global_loss: f64,
    /// Mean over clients of the squared held-out gradient norm.
    pub grad_norm_sq: f64,
    pub zeta_sq: f64,
    pub gamma_sq: Option<f64>,
    pub eps_align_sq: Option<f64>,
    pub finetune_loss: Option<f64>,
    pub mr_draws: Option<usize>,
    pub mr_omitted: Option<usize>,
    /// Diagnostic only: mean distance from label-only generations to the
    /// true image prototype of the prompt class.
    pub aux_prototype_distance: f64,
}

/// Nearest-prototype classifier over the world's true class centres.
#[derive(Debug, Clone, Copy)]
pub struct OracleClassifier<'a> {
    world: &'a FeatureWorld,
}

impl<'a> OracleClassifier<'a> {
    pub fn new(world: &'a FeatureWorld) -> Self {
        Self { world }
    }

    pub fn classify(&self, feature: &[f64], modality: Modality) -> usize {
        self.world.nearest_class(feature, modality)
    }
}

/// Generates `per_class` label-only images per class and returns the
/// fraction the oracle assigns to the prompt class.
pub fn gan_test_accuracy<R: Rng + ?Sized>(
    gen: &GeneratorModel,
    world: &FeatureWorld,
    per_class: usize,
    rng: &mut R,
) -> Result<f64> {
    if per_class == 0 {
        return Err(Error::invalid("gan test needs at least one sample per class"));
    }
    let oracle = OracleClassifier::new(world);
    let mut hits = 0usize;
    for _ in 0..per_class {
        for c in 0..world.num_classes {
            let img = generate_post_finetune(gen, c, None, rng)?;
            hits += usize::from(oracle.classify(&img, Modality::Image) == c);
        }
    }
    Ok(hits as f64 / (per_class * world.num_classes) as f64)
}

/// Mean distance between the noiseless label-only generation and the true
/// prototype, over classes.
pub fn prototype_distance(gen: &GeneratorModel, world: &FeatureWorld) -> f64 {
    (0..world.num_classes)
        .map(|c| sq_dist(&gen.decoder.matvec(gen.embed(c)), &world.image_prototypes[c]).sqrt())
        .sum::<f64>()
        / world.num_classes as f64
}

pub fn client_accuracy(model: &ClientModel, heldout: &[Example]) -> Result<f64> {
    if heldout.is_empty() {
        return Err(Error::UndefinedMetric("accuracy over an empty held-out set"));
    }
    let mut hits = 0usize;
    for e in heldout {
        hits += usize::from(infer(model, &e.feature)?.label == e.label);
    }
    Ok(hits as f64 / heldout.len() as f64)
}

pub fn heldout_loss(model: &ClientModel, heldout: &[Example]) -> Result<f64> {
    if heldout.is_empty() {
        return Err(Error::UndefinedMetric("loss over an empty held-out set"));
    }
    let samples: Vec<TrainSample<'_>> = heldout.iter().map(TrainSample::from).collect();
    Ok(batch_loss(model, &samples, Objective::CrossEntropy))
}

pub fn heldout_grad_norm_sq(model: &ClientModel, heldout: &[Example]) -> f64 {
    let samples: Vec<TrainSample<'_>> = heldout.iter().map(TrainSample::from).collect();
    batch_gradient(model, &samples, Objective::CrossEntropy).1.norm_sq()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryEstimates {
    pub zeta_sq: f64,
    pub gamma_sq: Option<f64>,
    pub eps_align_sq: Option<f64>,
}

/// Gradient dissimilarity: mean over clients of the squared deviation of the
/// classifier-head gradient from the mean, each client evaluated on its own
/// modality's view of the probe (probes are label-aligned across modalities).
pub fn zeta_sq(clients: &[ClientModel], probes: &[&[Example]]) -> Result<f64> {
    if clients.is_empty() || clients.len() != probes.len() {
        return Err(Error::invalid("one probe set per client required"));
    }
    let grads: Vec<Vec<f64>> = clients
        .iter()
        .zip(probes)
        .map(|(m, p)| {
            let samples: Vec<TrainSample<'_>> = p.iter().map(TrainSample::from).collect();
            batch_gradient(m, &samples, Objective::CrossEntropy)
                .1
                .classifier
                .as_slice()
                .to_vec()
        })
        .collect();
    let dim = grads[0].len();
    if grads.iter().any(|g| g.len() != dim) {
        return Err(Error::invalid("classifier heads differ in shape"));
    }
    let mean = mean_vec(grads.iter().map(Vec::as_slice), dim);
    Ok(grads.iter().map(|g| sq_dist(g, &mean)).sum::<f64>() / grads.len() as f64)
}

/// Parameter spread around the parameter mean; `None` unless every client
/// has the same architecture.
pub fn gamma_sq(clients: &[ClientModel]) -> Option<f64> {
    let params: Vec<Vec<f64>> = clients.iter().map(ClientModel::parameters).collect();
    let first = clients.first()?;
    let same = clients.iter().all(|c| {
        c.input_dim() == first.input_dim()
            && c.hidden_dim() == first.hidden_dim()
            && c.rep_dim() == first.rep_dim()
            && c.num_classes() == first.num_classes()
    });
    if !same {
        return None;
    }
    let dim = params[0].len();
    let mean = mean_vec(params.iter().map(Vec::as_slice), dim);
    Some(params.iter().map(|p| sq_dist(p, &mean)).sum::<f64>() / params.len() as f64)
}

/// Mean of `‖R − MR‖²` over `(client representation, fused representation)`
/// pairs; `None` when there are none.
pub fn eps_align_sq(pairs: &[(&[f64], &[f64])]) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    Some(pairs.iter().map(|(r, m)| sq_dist(r, m)).sum::<f64>() / pairs.len() as f64)
}

pub fn theory_estimates(
    clients: &[ClientModel],
    probes: &[&[Example]],
    aligned: &[(&[f64], &[f64])],
) -> Result<TheoryEstimates> {
    Ok(TheoryEstimates {
        zeta_sq: zeta_sq(clients, probes)?,
        gamma_sq: gamma_sq(clients),
        eps_align_sq: eps_align_sq(aligned),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub violations: usize,
    /// Number of consecutive pairs checked.
    pub steps: usize,
    pub passed: bool,
}

/// Counts steps with `L[t+1] > L[t] + slack`; passes with at most
/// `max_violations` of them.
pub fn monotonicity_check(series: &[f64], slack: f64, max_violations: usize) -> MonotonicityReport {
    let violations = series.windows(2).filter(|w| w[1] > w[0] + slack).count();
    MonotonicityReport {
        violations,
        steps: series.len().saturating_sub(1),
        passed: violations <= max_violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::local_train;
    use crate::client::TrainConfig;
    use crate::math::Mat;
    use crate::rng::{stream, Stream};
    use crate::server::pretrain_decoder;
    use crate::world::{build_world, heldout_set};

    fn world(q: f64) -> FeatureWorld {
        build_world(10, 16, 16, q, 0.5, 3).unwrap()
    }

    fn pretrained(world: &FeatureWorld, noise: f64) -> GeneratorModel {
        let mut rng = stream(3, Stream::Generator, &[]);
        let mut g = GeneratorModel::new(world.num_classes, 32, world.image_dim, noise, &mut rng);
        pretrain_decoder(&mut g, world).unwrap();
        g
    }

    #[test]
    fn gan_test_oracle_values() {
        let w = world(0.0);
        let g = pretrained(&w, 0.0);
        let mut rng = stream(0, Stream::Eval, &[]);
        assert_eq!(gan_test_accuracy(&g, &w, 3, &mut rng).unwrap(), 1.0);

        let w = world(0.3);
        let g = pretrained(&w, 0.0);
        let acc = gan_test_accuracy(&g, &w, 3, &mut rng).unwrap();
        assert!((acc - 0.7).abs() <= 1.0 / 10.0 + 1e-12, "{acc}");
        // exactly the uncorrupted classes succeed
        assert!((acc - (10 - w.num_corrupted()) as f64 / 10.0).abs() < 1e-12);
        assert!(prototype_distance(&pretrained(&world(0.0), 0.0), &world(0.0)) < 1e-9);
        assert!(gan_test_accuracy(&g, &w, 0, &mut rng).is_err());
    }

    #[test]
    fn client_accuracy_cases() {
        let w = world(0.0);
        let mut rng = stream(1, Stream::ClientInit, &[]);
        let m = ClientModel::new(0, Modality::Image, 16, 24, 32, 10, &mut rng);
        let held = heldout_set(&w, 100, Modality::Image, &mut stream(1, Stream::Heldout, &[]));
        assert!(client_accuracy(&m, &[]).is_err());
        let a1 = client_accuracy(&m, &held).unwrap();
        assert_eq!(a1, client_accuracy(&m, &held).unwrap());

        // a classifier that ignores its input is right on 1/C of a balanced set
        let mut blind = m.clone();
        blind.classifier = Mat::zeros(10, 32);
        assert!((client_accuracy(&blind, &held).unwrap() - 0.1).abs() < 1e-12);

        let mut trained = m.clone();
        let train = heldout_set(&w, 40, Modality::Image, &mut stream(2, Stream::Heldout, &[]));
        local_train(&mut trained, &train, &TrainConfig::default(), &mut rng).unwrap();
        assert!(client_accuracy(&trained, &held).unwrap() > 0.95);
    }

    #[test]
    fn random_classifier_is_near_chance() {
        let w = world(0.0);
        let held = heldout_set(&w, 100, Modality::Image, &mut stream(1, Stream::Heldout, &[]));
        let sd = (0.1f64 * 0.9 / 1000.0).sqrt();
        let mut accs = Vec::new();
        for s in 0..20 {
            let m = ClientModel::new(0, Modality::Image, 16, 24, 32, 10, &mut stream(s, Stream::ClientInit, &[]));
            accs.push(client_accuracy(&m, &held).unwrap());
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        // averaged over random inits the expected accuracy is 1/C
        assert!((mean - 0.1).abs() < 3.0 * sd + 0.05, "{mean}");
    }

    #[test]
    fn theory_trivial_cases() {
        let w = world(0.0);
        let m = ClientModel::new(0, Modality::Image, 16, 24, 32, 10, &mut stream(5, Stream::ClientInit, &[]));
        let held = heldout_set(&w, 5, Modality::Image, &mut stream(1, Stream::Heldout, &[]));
        let clients = vec![m.clone(), m.clone()];
        let est = theory_estimates(&clients, &[&held, &held], &[]).unwrap();
        assert_eq!(est.zeta_sq, 0.0);
        assert_eq!(est.gamma_sq, Some(0.0));
        assert_eq!(est.eps_align_sq, None);

        let r = [1.0, 2.0];
        assert_eq!(eps_align_sq(&[(&r, &r), (&r, &r)]), Some(0.0));

        let other = ClientModel::new(1, Modality::Image, 16, 40, 32, 10, &mut stream(6, Stream::ClientInit, &[]));
        assert_eq!(gamma_sq(&[m, other]), None);
    }

    #[test]
    fn theory_two_client_hand_case() {
        let w = world(0.0);
        let mut a = ClientModel::new(0, Modality::Image, 16, 24, 32, 10, &mut stream(5, Stream::ClientInit, &[]));
        let mut b = a.clone();
        a.classifier = Mat::zeros(10, 32);
        b.classifier = Mat::zeros(10, 32);
        b.classifier[(0, 0)] = 2.0;
        let pa = a.parameters();
        let pb = b.parameters();
        // mean = midpoint, each client is 1 away in one coordinate
        assert_eq!(gamma_sq(&[a.clone(), b.clone()]), Some(1.0));
        assert_eq!(sq_dist(&pa, &pb), 4.0);

        let held = heldout_set(&w, 2, Modality::Image, &mut stream(1, Stream::Heldout, &[]));
        let ga: Vec<f64> = {
            let s: Vec<TrainSample<'_>> = held.iter().map(TrainSample::from).collect();
            batch_gradient(&a, &s, Objective::CrossEntropy).1.classifier.as_slice().to_vec()
        };
        let gb: Vec<f64> = {
            let s: Vec<TrainSample<'_>> = held.iter().map(TrainSample::from).collect();
            batch_gradient(&b, &s, Objective::CrossEntropy).1.classifier.as_slice().to_vec()
        };
        let direct = sq_dist(&ga, &gb) / 4.0;
        let z = zeta_sq(&[a, b], &[&held, &held]).unwrap();
        assert!((z - direct).abs() < 1e-12 * (1.0 + direct));

        let r1 = [1.0, 0.0];
        let r2 = [0.0, 3.0];
        let m = [0.0, 0.0];
        assert_eq!(eps_align_sq(&[(&r1, &m), (&r2, &m)]), Some(5.0));
    }

    #[test]
    fn monotonicity() {
        let r = monotonicity_check(&[3.0, 2.0, 1.0], 0.0, 0);
        assert_eq!((r.violations, r.steps, r.passed), (0, 2, true));
        for slack in [0.0, 0.5] {
            assert_eq!(monotonicity_check(&[1.0; 5], slack, 0).violations, 0);
        }
        let r = monotonicity_check(&[1.0, 1.2, 1.1, 1.5], 0.05, 1);
        assert_eq!((r.violations, r.passed), (2, false));
        assert_eq!(monotonicity_check(&[1.0, 1.2], 0.5, 0).violations, 0);
        assert_eq!(monotonicity_check(&[1.0], 0.0, 0).steps, 0);
    }
}
