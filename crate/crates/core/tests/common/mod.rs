//! Central finite-difference probes shared by the gradient and acceptance tests.

use fedmmkt::client::{batch_gradient, batch_loss, ClientModel, Gradients, Objective, TrainSample};
use fedmmkt::math::Mat;
use fedmmkt::rng::{stream, SimRng, Stream};
use fedmmkt::server::{reconstruction_gradient, reconstruction_loss};
use fedmmkt::world::Modality;
use rand::Rng;
use rand_distr::StandardNormal;

const H: f64 = 1e-5;
pub const PROBES: usize = 24;
pub const TOL: f64 = 1e-4;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-7)
}

fn normal_vec(n: usize, scale: f64, rng: &mut SimRng) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

struct Fixture {
    model: ClientModel,
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    targets: Vec<Vec<f64>>,
}

fn fixture(seed: u64) -> Fixture {
    let mut rng = stream(seed, Stream::Probe, &[]);
    let model = ClientModel::new(0, Modality::Image, 6, 7, 8, 5, &mut rng);
    let features = (0..4).map(|_| normal_vec(6, 1.5, &mut rng)).collect();
    let labels = (0..4).map(|_| rng.random_range(0..5)).collect();
    let targets = (0..4).map(|_| normal_vec(8, 1.0, &mut rng)).collect();
    Fixture {
        model,
        features,
        labels,
        targets,
    }
}

fn samples(f: &Fixture) -> Vec<TrainSample<'_>> {
    f.features
        .iter()
        .zip(&f.labels)
        .zip(&f.targets)
        .map(|((x, &label), t)| TrainSample {
            feature: x,
            label,
            target_rep: Some(t),
        })
        .collect()
}

fn param(m: &mut ClientModel, which: usize) -> &mut Mat {
    match which {
        0 => &mut m.extractor,
        1 => &mut m.projector,
        _ => &mut m.classifier,
    }
}

fn grad(g: &Gradients, which: usize) -> &Mat {
    match which {
        0 => &g.extractor,
        1 => &g.projector,
        _ => &g.classifier,
    }
}

/// Checks `PROBES` random coordinates spread over all three parameter
/// blocks and returns the worst relative error.
pub fn check_client(objective: Objective, seed: u64) -> f64 {
    let f = fixture(seed);
    let s = samples(&f);
    let (_, g) = batch_gradient(&f.model, &s, objective);
    let mut rng = stream(seed, Stream::Probe, &[1]);
    let mut worst: f64 = 0.0;
    for p in 0..PROBES {
        let which = p % 3;
        let mut m = f.model.clone();
        let len = param(&mut m, which).as_slice().len();
        let idx = rng.random_range(0..len);
        let analytic = grad(&g, which).as_slice()[idx];
        param(&mut m, which).as_mut_slice()[idx] += H;
        let up = batch_loss(&m, &s, objective);
        param(&mut m, which).as_mut_slice()[idx] -= 2.0 * H;
        let down = batch_loss(&m, &s, objective);
        let numeric = (up - down) / (2.0 * H);
        worst = worst.max(rel_err(analytic, numeric));
    }
    worst
}

/// Worst relative error over `PROBES` decoder coordinates.
pub fn check_decoder(seed: u64) -> f64 {
    let mut rng = stream(seed, Stream::Probe, &[]);
    let decoder = Mat::random_normal(5, 7, 0.5, &mut rng);
    let targets: Vec<Vec<f64>> = (0..6).map(|_| normal_vec(5, 1.0, &mut rng)).collect();
    let pairs: Vec<(Vec<f64>, &[f64])> = targets
        .iter()
        .map(|t| (normal_vec(7, 1.0, &mut rng), t.as_slice()))
        .collect();
    let g = reconstruction_gradient(&decoder, &pairs);
    let mut worst: f64 = 0.0;
    for _ in 0..PROBES {
        let idx = rng.random_range(0..decoder.as_slice().len());
        let mut d = decoder.clone();
        d.as_mut_slice()[idx] += H;
        let up = reconstruction_loss(&d, &pairs);
        d.as_mut_slice()[idx] -= 2.0 * H;
        let down = reconstruction_loss(&d, &pairs);
        worst = worst.max(rel_err(g.as_slice()[idx], (up - down) / (2.0 * H)));
    }
    worst
}
