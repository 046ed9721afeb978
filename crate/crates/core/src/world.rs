//! The synthetic feature world that stands in for real datasets and
//! pretrained backbones, plus non-IID client partitioning.
//!
//! Each class owns a Gaussian prototype in image space; text prototypes are
//! the image prototypes pushed through a fixed linear cross-modal map. A
//! permutation of class indices models the generator's label bias: the
//! pretrained generator prompted with `y` produces class `π(y)`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{sq_dist, Mat};
use crate::rng::{stream, SimRng, Stream};

/// Minimum pairwise prototype distance, in units of the per-coordinate noise
/// std, enforced by rescaling.
pub const SEPARATION_FACTOR: f64 = 6.0;

const MAX_BUILD_ATTEMPTS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureWorld {
    pub num_classes: usize,
    pub image_dim: usize,
    pub text_dim: usize,
    pub image_prototypes: Vec<Vec<f64>>,
    pub text_prototypes: Vec<Vec<f64>>,
    /// `text_dim x image_dim`
    pub cross_modal_map: Mat,
    /// Generator label bias: prompt `y` renders as class `corruption_perm[y]`.
    pub corruption_perm: Vec<usize>,
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub feature: Vec<f64>,
    pub label: usize,
    pub modality: Modality,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub num_image_clients: usize,
    pub dirichlet_alpha: f64,
    pub samples_per_client: usize,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 || self.num_image_clients > self.num_clients {
            return Err(Error::invalid(format!(
                "need 0 <= image clients ({}) <= clients ({}), clients >= 1",
                self.num_image_clients, self.num_clients
            )));
        }
        if !(self.dirichlet_alpha > 0.0 && self.dirichlet_alpha.is_finite()) {
            return Err(Error::invalid("dirichlet alpha must be positive"));
        }
        if self.samples_per_client == 0 {
            return Err(Error::invalid("samples per client must be positive"));
        }
        Ok(())
    }

    pub fn modality_of(&self, client: usize) -> Modality {
        if client < self.num_image_clients {
            Modality::Image
        } else {
            Modality::Text
        }
    }
}

/// A client's private data, tagged with the modality it can see.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: usize,
    pub modality: Modality,
    pub examples: Vec<Example>,
}

fn min_pairwise_distance(protos: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for (i, a) in protos.iter().enumerate() {
        for b in &protos[i + 1..] {
            best = best.min(sq_dist(a, b));
        }
    }
    best.sqrt()
}

/// Permutation that moves exactly `n` classes (a single cycle over a seeded
/// random subset), or identity when `n == 0`.
fn corruption_permutation(num_classes: usize, n: usize, rng: &mut SimRng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..num_classes).collect();
    if n < 2 {
        return perm;
    }
    let mut classes: Vec<usize> = (0..num_classes).collect();
    classes.shuffle(rng);
    let subset = &mut classes[..n];
    subset.sort_unstable();
    subset.shuffle(rng);
    for i in 0..n {
        perm[subset[i]] = subset[(i + 1) % n];
    }
    perm
}

/// Number of classes the corruption permutation moves for fraction `q`.
/// A single moved class is impossible for a permutation, so 1 becomes 2.
pub fn corrupted_class_count(num_classes: usize, q: f64) -> usize {
    match (q * num_classes as f64).round() as usize {
        1 => 2.min(num_classes),
        n => n.min(num_classes),
    }
}

pub fn build_world(
    num_classes: usize,
    image_dim: usize,
    text_dim: usize,
    corruption: f64,
    noise_std: f64,
    seed: u64,
) -> Result<FeatureWorld> {
    if num_classes < 2 {
        return Err(Error::invalid("need at least 2 classes"));
    }
    if image_dim < 2 || text_dim < 2 {
        return Err(Error::invalid("feature dims must be at least 2"));
    }
    if !(0.0..=1.0).contains(&corruption) {
        return Err(Error::invalid("corruption fraction must lie in [0, 1]"));
    }
    if !(noise_std > 0.0 && noise_std.is_finite()) {
        return Err(Error::invalid("noise std must be positive"));
    }
    let mut rng = stream(seed, Stream::World, &[]);
    let target = SEPARATION_FACTOR * noise_std;

    for _ in 0..MAX_BUILD_ATTEMPTS {
        let raw = Mat::random_normal(num_classes, image_dim, 1.0, &mut rng);
        let map = if text_dim >= image_dim {
            Mat::random_orthonormal_columns(text_dim, image_dim, &mut rng)?
        } else {
            let q = Mat::random_orthonormal_columns(image_dim, text_dim, &mut rng)?;
            let mut t = Mat::zeros(text_dim, image_dim);
            for i in 0..text_dim {
                for j in 0..image_dim {
                    t[(i, j)] = q[(j, i)];
                }
            }
            t
        };
        let mut image: Vec<Vec<f64>> = (0..num_classes).map(|c| raw.row(c).to_vec()).collect();
        let mut text: Vec<Vec<f64>> = image.iter().map(|p| map.matvec(p)).collect();

        let sep = min_pairwise_distance(&image).min(min_pairwise_distance(&text));
        if sep < 1e-9 {
            continue;
        }
        if sep < target {
            let s = target / sep * (1.0 + 1e-9);
            for p in image.iter_mut().chain(text.iter_mut()) {
                p.iter_mut().for_each(|x| *x *= s);
            }
        }
        let n_corrupt = corrupted_class_count(num_classes, corruption);
        let corruption_perm = corruption_permutation(num_classes, n_corrupt, &mut rng);
        return Ok(FeatureWorld {
            num_classes,
            image_dim,
            text_dim,
            image_prototypes: image,
            text_prototypes: text,
            cross_modal_map: map,
            corruption_perm,
            noise_std,
        });
    }
    Err(Error::Construction(format!(
        "prototype separation unattainable after {MAX_BUILD_ATTEMPTS} attempts"
    )))
}

impl FeatureWorld {
    pub fn dim(&self, modality: Modality) -> usize {
        match modality {
            Modality::Image => self.image_dim,
            Modality::Text => self.text_dim,
        }
    }

    pub fn prototypes(&self, modality: Modality) -> &[Vec<f64>] {
        match modality {
            Modality::Image => &self.image_prototypes,
            Modality::Text => &self.text_prototypes,
        }
    }

    /// Nearest-prototype class, lowest index on ties.
    pub fn nearest_class(&self, feature: &[f64], modality: Modality) -> usize {
        let mut best = (0, f64::INFINITY);
        for (c, p) in self.prototypes(modality).iter().enumerate() {
            let d = sq_dist(feature, p);
            if d < best.1 {
                best = (c, d);
            }
        }
        best.0
    }

    /// Image-space feature mapped into text space.
    pub fn image_to_text(&self, image_feature: &[f64]) -> Vec<f64> {
        self.cross_modal_map.matvec(image_feature)
    }

    pub fn num_corrupted(&self) -> usize {
        self.corruption_perm
            .iter()
            .enumerate()
            .filter(|(c, p)| c != *p)
            .count()
    }
}

pub fn sample_example<R: Rng + ?Sized>(
    world: &FeatureWorld,
    label: usize,
    modality: Modality,
    rng: &mut R,
) -> Result<Example> {
    if label >= world.num_classes {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            world.num_classes
        )));
    }
    let feature = world.prototypes(modality)[label]
        .iter()
        .map(|m| m + world.noise_std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(Example {
        feature,
        label,
        modality,
    })
}

/// Class-balanced fresh samples (`per_class` of every class) for evaluation.
pub fn heldout_set<R: Rng + ?Sized>(
    world: &FeatureWorld,
    per_class: usize,
    modality: Modality,
    rng: &mut R,
) -> Vec<Example> {
    (0..per_class * world.num_classes)
        .map(|i| {
            sample_example(world, i % world.num_classes, modality, rng)
                .expect("label in range by construction")
        })
        .collect()
}

fn largest_remainder(total: usize, proportions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    // stable sort keeps lower client index first on equal remainders
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal)
    });
    for &k in order.iter().take(total.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

fn dirichlet_proportions(k: usize, alpha: f64, rng: &mut SimRng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let s: f64 = draws.iter().sum();
    if s > 0.0 && s.is_finite() {
        draws.iter().map(|x| x / s).collect()
    } else {
        // all draws underflowed: the limit of a tiny-alpha Dirichlet is a vertex
        let mut p = vec![0.0; k];
        p[rng.random_range(0..k)] = 1.0;
        p
    }
}

/// Splits example indices across `num_clients` lists. Every class's indices
/// are shuffled and dealt out in Dirichlet(alpha)-drawn proportions with
/// largest-remainder rounding, so the lists partition `0..labels.len()`.
pub fn dirichlet_partition(
    labels: &[usize],
    num_clients: usize,
    alpha: f64,
    rng: &mut SimRng,
) -> Result<Vec<Vec<usize>>> {
    if num_clients == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid("dirichlet alpha must be positive"));
    }
    let mut parts = vec![Vec::new(); num_clients];
    let Some(&max_label) = labels.iter().max() else {
        return Ok(parts);
    };
    for class in 0..=max_label {
        let mut idx: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(rng);
        let props = dirichlet_proportions(num_clients, alpha, rng);
        let counts = largest_remainder(idx.len(), &props);
        let mut start = 0;
        for (part, n) in parts.iter_mut().zip(counts) {
            part.extend_from_slice(&idx[start..start + n]);
            start += n;
        }
    }
    parts.iter_mut().for_each(|p| p.sort_unstable());
    Ok(parts)
}

/// Builds every client's private dataset. A class-balanced label pool of
/// `num_clients * samples_per_client` entries is split with
/// [`dirichlet_partition`]; the first `num_image_clients` clients see image
/// features, the rest text features.
pub fn make_client_datasets(
    world: &FeatureWorld,
    spec: &PartitionSpec,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    spec.validate()?;
    let total = spec.num_clients * spec.samples_per_client;
    let labels: Vec<usize> = (0..total).map(|i| i % world.num_classes).collect();
    let mut part_rng = stream(seed, Stream::Partition, &[]);
    let parts = dirichlet_partition(&labels, spec.num_clients, spec.dirichlet_alpha, &mut part_rng)?;
    parts
        .into_iter()
        .enumerate()
        .map(|(k, idx)| {
            let modality = spec.modality_of(k);
            let mut rng = stream(seed, Stream::ClientData, &[k as u64]);
            let examples = idx
                .iter()
                .map(|&i| sample_example(world, labels[i], modality, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            Ok(ClientDataset {
                client_id: k,
                modality,
                examples,
            })
        })
        .collect()
}

pub fn save_examples(path: &Path, examples: &[Example]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer(std::io::BufWriter::new(file), examples)?;
    Ok(())
}

pub fn load_examples(path: &Path) -> Result<Vec<Example>> {
    let file = std::fs::File::open(path)?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}
