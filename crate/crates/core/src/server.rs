//! Server side: the toy text-to-image generator, label voting, and
//! representation fusion.
//!
//! The generator is an embedding table (the frozen encoder) followed by a
//! linear decoder into image-feature space. Text for a generated image is
//! derived from the image itself through the world's cross-modal map, so a
//! mislabeled generation carries consistently mislabeled text.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{axpy, cosine, mean_vec, softmax_unchecked, sq_dist, CAParams, Mat};
use crate::math::cross_attention;
use crate::rng::SimRng;
use crate::world::{FeatureWorld, Modality};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorModel {
    /// `classes x rep_dim`; row `y` is the prompt embedding `e(y)`. Frozen.
    pub encoder: Mat,
    /// `image_dim x rep_dim`; the only trainable part.
    pub decoder: Mat,
    pub generation_noise: f64,
    /// Norm the fused representation is rescaled to before conditioning.
    pub mr_scale: f64,
}

impl GeneratorModel {
    /// Prompt embeddings are orthonormal when `rep_dim >= classes`; otherwise
    /// unit-norm Gaussian rows (and decoder pretraining will refuse them).
    pub fn new(
        num_classes: usize,
        rep_dim: usize,
        image_dim: usize,
        generation_noise: f64,
        rng: &mut SimRng,
    ) -> Self {
        let encoder = if rep_dim >= num_classes {
            let cols = Mat::random_orthonormal_columns(rep_dim, num_classes, rng)
                .expect("rep_dim >= num_classes");
            let rows: Vec<Vec<f64>> = (0..num_classes).map(|c| cols.column(c)).collect();
            Mat::from_rows(&rows).expect("finite orthonormal rows")
        } else {
            let mut m = Mat::random_normal(num_classes, rep_dim, 1.0, rng);
            for c in 0..num_classes {
                let n = crate::math::norm(m.row(c));
                for j in 0..rep_dim {
                    m[(c, j)] /= n;
                }
            }
            m
        };
        Self {
            encoder,
            decoder: Mat::zeros(image_dim, rep_dim),
            generation_noise,
            mr_scale: 1.0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.encoder.rows()
    }

    pub fn rep_dim(&self) -> usize {
        self.encoder.cols()
    }

    pub fn embed(&self, label: usize) -> &[f64] {
        self.encoder.row(label)
    }

    /// Decoder input `e(y) + s·MR/‖MR‖` with `s = mr_scale`; a zero `MR`
    /// adds nothing.
    pub fn condition(&self, label: usize, fused: Option<&[f64]>) -> Vec<f64> {
        let mut z = self.embed(label).to_vec();
        if let Some(mr) = fused {
            let n = crate::math::norm(mr);
            if n > crate::math::NORM_EPS {
                axpy(self.mr_scale / n, mr, &mut z);
            }
        }
        z
    }

    fn check_label(&self, y: usize) -> Result<()> {
        if y >= self.num_classes() {
            return Err(Error::invalid(format!(
                "prompt label {y} out of range for {} classes",
                self.num_classes()
            )));
        }
        Ok(())
    }

    fn noisy<R: Rng + ?Sized>(&self, mut v: Vec<f64>, rng: &mut R) -> Vec<f64> {
        if self.generation_noise > 0.0 {
            for x in &mut v {
                *x += self.generation_noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
        v
    }
}

/// Solves `decoder · e(y) = μ_I(π(y))` for every class in the least-squares
/// sense (`W = M (EEᵀ)⁻¹ E` with `E` the embedding rows). This stands in for
/// a pretrained generator that carries the world's label bias.
pub fn pretrain_decoder(gen: &mut GeneratorModel, world: &FeatureWorld) -> Result<()> {
    let c = gen.num_classes();
    let d = gen.rep_dim();
    if c != world.num_classes || gen.decoder.rows() != world.image_dim {
        return Err(Error::Pretrain("generator and world shapes disagree".into()));
    }
    if d < c {
        return Err(Error::Pretrain(format!(
            "rank deficient: representation dim {d} < {c} classes"
        )));
    }
    // gram = E Eᵀ (c x c); solve gram · B = E for B (c x d)
    let mut aug: Vec<Vec<f64>> = (0..c)
        .map(|i| {
            let mut row: Vec<f64> = (0..c)
                .map(|j| crate::math::dot(gen.encoder.row(i), gen.encoder.row(j)))
                .collect();
            row.extend_from_slice(gen.encoder.row(i));
            row
        })
        .collect();
    for col in 0..c {
        let pivot = (col..c)
            .max_by(|&a, &b| aug[a][col].abs().total_cmp(&aug[b][col].abs()))
            .expect("non-empty range");
        if aug[pivot][col].abs() < 1e-10 {
            return Err(Error::Pretrain("prompt embeddings are linearly dependent".into()));
        }
        aug.swap(col, pivot);
        let p = aug[col][col];
        aug[col].iter_mut().for_each(|x| *x /= p);
        let pivot_row = aug[col].clone();
        for (r, row) in aug.iter_mut().enumerate() {
            if r != col && row[col] != 0.0 {
                let f = row[col];
                axpy(-f, &pivot_row, row);
            }
        }
    }
    let mut decoder = Mat::zeros(world.image_dim, d);
    for (y, row) in aug.iter().enumerate() {
        let target = &world.image_prototypes[world.corruption_perm[y]];
        decoder.add_outer(1.0, target, &row[c..]);
    }
    gen.decoder = decoder;
    Ok(())
}

/// Generates one image feature for prompt `y` and derives its text feature
/// from the image.
pub fn generate_synthetic<R: Rng + ?Sized>(
    gen: &GeneratorModel,
    world: &FeatureWorld,
    y: usize,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    gen.check_label(y)?;
    let image = gen.noisy(gen.decoder.matvec(gen.embed(y)), rng);
    let text = gen.noisy(world.image_to_text(&image), rng);
    Ok((image, text))
}

/// Generation at inference time from [`GeneratorModel::condition`]: with a
/// fused representation when given, from the prompt embedding alone otherwise.
pub fn generate_post_finetune<R: Rng + ?Sized>(
    gen: &GeneratorModel,
    y: usize,
    fused: Option<&[f64]>,
    rng: &mut R,
) -> Result<Vec<f64>> {
    gen.check_label(y)?;
    if fused.is_some_and(|mr| mr.len() != gen.rep_dim()) {
        return Err(Error::invalid("fused representation has the wrong dim"));
    }
    let z = gen.condition(y, fused);
    Ok(gen.noisy(gen.decoder.matvec(&z), rng))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRecord {
    pub index: usize,
    pub prompt_label: usize,
    pub image_feature: Vec<f64>,
    pub text_feature: Vec<f64>,
}

impl SyntheticRecord {
    pub fn feature(&self, modality: Modality) -> &[f64] {
        match modality {
            Modality::Image => &self.image_feature,
            Modality::Text => &self.text_feature,
        }
    }
}

/// How the vote count `v` that gates filtering is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteCount {
    /// Number of clients whose prediction equals the consensus label.
    #[default]
    Count,
    /// Summed confidence weight behind the consensus label.
    WeightedMass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vote {
    pub label: usize,
    /// Clients agreeing with `label`.
    pub count: usize,
    /// Summed entropy weights behind `label`.
    pub mass: f64,
}

impl Vote {
    pub fn votes(&self, mode: VoteCount) -> f64 {
        match mode {
            VoteCount::Count => self.count as f64,
            VoteCount::WeightedMass => self.mass,
        }
    }
}

/// Confidence-weighted plurality over `(predicted label, weight)` pairs.
/// Ties in summed weight go to the lowest class index.
pub fn lab_vote(predictions: &[(usize, f64)], num_classes: usize) -> Result<Vote> {
    if predictions.is_empty() {
        return Err(Error::invalid("label vote over zero reports"));
    }
    let mut mass = vec![0.0; num_classes];
    for &(label, w) in predictions {
        if label >= num_classes {
            return Err(Error::invalid(format!("predicted label {label} out of range")));
        }
        mass[label] += w;
    }
    let label = crate::math::argmax(&mass);
    Ok(Vote {
        label,
        count: predictions.iter().filter(|(l, _)| *l == label).count(),
        mass: mass[label],
    })
}

/// `floor(β·K)`, robust to representation error in `β·K`.
pub fn vote_threshold(beta: f64, num_clients: usize) -> f64 {
    (beta * num_clients as f64 + 1e-9).floor()
}

/// Indices (in order) of records whose vote strictly exceeds `floor(β·K)`.
pub fn filter_records(votes: &[Vote], beta: f64, num_clients: usize, mode: VoteCount) -> Vec<usize> {
    let t = vote_threshold(beta, num_clients);
    votes
        .iter()
        .enumerate()
        .filter(|(_, v)| v.votes(mode) > t)
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub beta: f64,
    pub ca_params: CAParams,
    /// Records per contrastive scoring batch.
    pub batch_size: usize,
    pub p_drop: f64,
    pub vote_count: VoteCount,
}

fn modality_means(reps: &[Vec<f64>], modalities: &[Modality], dim: usize) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let mean_of = |m: Modality| {
        let sel: Vec<&[f64]> = reps
            .iter()
            .zip(modalities)
            .filter(|(_, &mm)| mm == m)
            .map(|(r, _)| r.as_slice())
            .collect();
        (!sel.is_empty()).then(|| mean_vec(sel, dim))
    };
    (mean_of(Modality::Image), mean_of(Modality::Text))
}

/// Inter-modal cross-attention for one record: each client's representation
/// attends over the mean representation of the other modality's clients.
pub fn intermodal_fuse(
    reps: &[Vec<f64>],
    modalities: &[Modality],
    ca: &CAParams,
) -> Result<Vec<Vec<f64>>> {
    if reps.len() != modalities.len() {
        return Err(Error::invalid("one modality tag per report required"));
    }
    let d = ca.dim();
    let (img_mean, txt_mean) = modality_means(reps, modalities, d);
    let img_mean = img_mean.ok_or(Error::ModalityAbsent("image"))?;
    let txt_mean = txt_mean.ok_or(Error::ModalityAbsent("text"))?;
    reps.iter()
        .zip(modalities)
        .map(|(r, m)| match m {
            Modality::Image => cross_attention(r, &txt_mean, ca),
            Modality::Text => cross_attention(r, &img_mean, ca),
        })
        .collect()
}

/// `cos(anchor, positives[i]) − ln Σ_{j≠i} exp(cos(anchor, positives[j]))`
pub fn contrastive_score(anchor: &[f64], positives: &[&[f64]], i: usize) -> Result<f64> {
    if positives.len() < 2 {
        return Err(Error::ContrastiveDegenerate(positives.len()));
    }
    let own = cosine(anchor, positives[i])?.value;
    let mut denom = 0.0;
    for (j, p) in positives.iter().enumerate() {
        if j != i {
            denom += cosine(anchor, p)?.value.exp();
        }
    }
    Ok(own - denom.ln())
}

/// Cross-client, cross-modal contrastive weights.
///
/// `batch[i][k]` is client `k`'s (cross-attended) representation of record
/// `i`. Image clients are scored against the per-record mean of the text
/// clients and text clients against the image mean. Returns `w[i][k]`.
pub fn contrastive_weights(batch: &[Vec<Vec<f64>>], modalities: &[Modality]) -> Result<Vec<Vec<f64>>> {
    if batch.len() < 2 {
        return Err(Error::ContrastiveDegenerate(batch.len()));
    }
    let dim = batch[0].first().map_or(0, Vec::len);
    let mut img_means = Vec::with_capacity(batch.len());
    let mut txt_means = Vec::with_capacity(batch.len());
    for reps in batch {
        if reps.len() != modalities.len() {
            return Err(Error::invalid("one representation per client per record required"));
        }
        let (im, tm) = modality_means(reps, modalities, dim);
        img_means.push(im.ok_or(Error::ModalityAbsent("image"))?);
        txt_means.push(tm.ok_or(Error::ModalityAbsent("text"))?);
    }
    let img_refs: Vec<&[f64]> = img_means.iter().map(Vec::as_slice).collect();
    let txt_refs: Vec<&[f64]> = txt_means.iter().map(Vec::as_slice).collect();
    batch
        .iter()
        .enumerate()
        .map(|(i, reps)| {
            reps.iter()
                .zip(modalities)
                .map(|(r, m)| match m {
                    Modality::Image => contrastive_score(r, &txt_refs, i),
                    Modality::Text => contrastive_score(r, &img_refs, i),
                })
                .collect()
        })
        .collect()
}

/// Softmax-normalised client weights for one record.
pub fn fusion_alphas(w: &[f64]) -> Vec<f64> {
    softmax_unchecked(w, 1.0)
}

/// `Σ_k softmax(w)_k · reps[k]` for one record.
pub fn fuse(reps: &[Vec<f64>], w: &[f64]) -> Result<Vec<f64>> {
    if reps.is_empty() || reps.len() != w.len() {
        return Err(Error::invalid("one weight per client representation required"));
    }
    let alpha = fusion_alphas(w);
    let mut out = vec![0.0; reps[0].len()];
    for (a, r) in alpha.iter().zip(reps) {
        axpy(*a, r, &mut out);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub p_drop: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

/// Cosine-annealed step size over a run of `total_epochs` epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub total_epochs: usize,
}

impl CosineSchedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        if self.total_epochs == 0 {
            return self.base_lr;
        }
        let t = epoch.min(self.total_epochs) as f64 / self.total_epochs as f64;
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// One kept record as the fine-tuning step sees it.
#[derive(Debug, Clone, Copy)]
pub struct FineTuneSample<'a> {
    pub label: usize,
    pub fused: Option<&'a [f64]>,
    pub image: &'a [f64],
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FineTuneReport {
    /// Bernoulli draws made (records x epochs).
    pub draws: usize,
    /// Draws in which the fused representation was omitted.
    pub omitted: usize,
    /// Mean reconstruction loss over the samples (unconditional path) after training.
    pub final_loss: f64,
    /// Set when there was nothing to train on.
    pub skipped_empty: bool,
}

/// Mean of `‖decoder · z − target‖²` over `(z, target)` pairs.
pub fn reconstruction_loss(decoder: &Mat, pairs: &[(Vec<f64>, &[f64])]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs
        .iter()
        .map(|(z, t)| sq_dist(&decoder.matvec(z), t))
        .sum::<f64>()
        / pairs.len() as f64
}

/// Gradient of [`reconstruction_loss`] with respect to the decoder.
pub fn reconstruction_gradient(decoder: &Mat, pairs: &[(Vec<f64>, &[f64])]) -> Mat {
    let mut g = Mat::zeros(decoder.rows(), decoder.cols());
    if pairs.is_empty() {
        return g;
    }
    let scale = 2.0 / pairs.len() as f64;
    for (z, t) in pairs {
        let mut err = decoder.matvec(z);
        axpy(-1.0, t, &mut err);
        g.add_outer(scale, &err, z);
    }
    g
}

/// Fine-tunes the decoder on kept records. Each record is conditioned on
/// `MR + e(Y)` with probability `1 − p_drop` and on `e(Y)` alone otherwise;
/// records without a fused representation always take the label-only path.
/// The encoder is never touched.
pub fn finetune_t2i(
    gen: &mut GeneratorModel,
    samples: &[FineTuneSample<'_>],
    cfg: &FineTuneConfig,
    schedule: &CosineSchedule,
    epoch_offset: usize,
    rng: &mut SimRng,
) -> Result<FineTuneReport> {
    if !(0.0..=1.0).contains(&cfg.p_drop) {
        return Err(Error::invalid("p_drop must lie in [0, 1]"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut report = FineTuneReport::default();
    if samples.is_empty() {
        report.skipped_empty = true;
        return Ok(report);
    }
    for s in samples {
        gen.check_label(s.label)?;
        if s.image.len() != gen.decoder.rows() {
            return Err(Error::invalid("synthetic image has the wrong dim"));
        }
        if s.fused.is_some_and(|f| f.len() != gen.rep_dim()) {
            return Err(Error::invalid("fused representation has the wrong dim"));
        }
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr(epoch_offset + epoch);
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let pairs: Vec<(Vec<f64>, &[f64])> = chunk
                .iter()
                .map(|&i| {
                    let s = &samples[i];
                    let omit = rng.random::<f64>() < cfg.p_drop;
                    report.draws += 1;
                    report.omitted += usize::from(omit);
                    let fused = if omit { None } else { s.fused };
                    (gen.condition(s.label, fused), s.image)
                })
                .collect();
            let g = reconstruction_gradient(&gen.decoder, &pairs);
            gen.decoder.add_scaled(-lr, &g);
        }
        if !gen.decoder.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
    }
    let pairs: Vec<(Vec<f64>, &[f64])> = samples
        .iter()
        .map(|s| (gen.embed(s.label).to_vec(), s.image))
        .collect();
    report.final_loss = reconstruction_loss(&gen.decoder, &pairs);
    Ok(report)
}
