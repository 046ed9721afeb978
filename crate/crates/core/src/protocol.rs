//! Round orchestration for the three protocol variants, plus the logical
//! communication ledger.

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::client::{
    augment_feature, infer, local_train, retrain, retrain_logit, Augmentation, ClientModel,
    ClientReport, ReportPayload, TrainConfig, TrainSample,
};
use crate::config::{ProtocolConfig, Variant};
use crate::error::{Error, Result};
use crate::math::{argmax, mean_vec, CAParams};
use crate::metrics::{
    client_accuracy, eps_align_sq, gamma_sq, gan_test_accuracy, heldout_grad_norm_sq, heldout_loss,
    prototype_distance, zeta_sq, RoundMetrics,
};
use crate::rng::{stream, Stream};
use crate::server::{
    contrastive_score, contrastive_weights, filter_records, finetune_t2i, fuse, fusion_alphas,
    generate_synthetic, intermodal_fuse, lab_vote, pretrain_decoder, CosineSchedule, FineTuneConfig,
    FineTuneReport, FineTuneSample, GeneratorModel, SyntheticRecord, Vote,
};
use crate::world::{build_world, heldout_set, make_client_datasets, ClientDataset, Example, FeatureWorld, Modality};

/// Per-round bytes for one variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommCost {
    pub upload_bytes: u64,
    pub download_bytes: u64,
}

/// Floats each client uploads per synthetic record.
pub fn report_floats_per_record(cfg: &ProtocolConfig, variant: Variant) -> u64 {
    let d = cfg.rep_dim as u64;
    match variant {
        // label, confidence weight, representation
        Variant::Representation => d + 2,
        Variant::Logit => cfg.num_classes as u64,
        // label, confidence weight, original and augmented representations
        Variant::Unimodal => 2 * d + 2,
    }
}

/// Floats each client downloads per synthetic record after aggregation.
pub fn refined_floats_per_record(cfg: &ProtocolConfig, variant: Variant) -> u64 {
    match variant {
        Variant::Logit => 1,
        _ => cfg.rep_dim as u64 + 1,
    }
}

/// Analytic per-round upload and download bytes.
pub fn comm_cost(cfg: &ProtocolConfig, variant: Variant) -> CommCost {
    let s = cfg.synthetic_per_round as u64;
    let k = cfg.num_clients as u64;
    let n = cfg.num_image_clients as u64;
    let b = cfg.comm.float_bytes;
    let synthetic = s * cfg.comm.image_bytes * n + s * cfg.comm.text_bytes * (k - n);
    CommCost {
        upload_bytes: s * k * b * report_floats_per_record(cfg, variant),
        download_bytes: synthetic + s * k * b * refined_floats_per_record(cfg, variant),
    }
}

/// `bytes / 2^20` rounded half-up to two decimals.
pub fn format_mb(bytes: u64) -> String {
    let hundredths = (u128::from(bytes) * 100 + (1 << 19)) >> 20;
    format!("{}.{:02}", hundredths / 100, hundredths % 100)
}

/// The `comm-cost` table for the variants that apply to `cfg`.
pub fn comm_table(cfg: &ProtocolConfig) -> String {
    let first = if cfg.is_single_modality() {
        ("u-FedMMKT", Variant::Unimodal)
    } else {
        ("FedMMKT", Variant::Representation)
    };
    let variants = [first, ("l-FedMMKT", Variant::Logit)];
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:>14} {:>10} {:>14} {:>10}",
        "variant", "upload_bytes", "upload_MB", "download_bytes", "download_MB"
    );
    for (name, v) in variants {
        let c = comm_cost(cfg, v);
        let _ = writeln!(
            out,
            "{:<10} {:>14} {:>10} {:>14} {:>10}",
            name,
            c.upload_bytes,
            format_mb(c.upload_bytes),
            c.download_bytes,
            format_mb(c.download_bytes)
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Up,
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    SyntheticBatch,
    ReportBatch,
    RefinedBatch,
}

/// One metered transfer between the server and a client.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundMessage {
    pub round: usize,
    pub direction: Direction,
    pub kind: PayloadKind,
    pub client: usize,
    pub bytes: u64,
}

/// What the server sends back for every synthetic record: the consensus
/// label (absent for discarded records) and, outside the logit variant, the
/// fused representation (zero-filled for discarded records).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedBatch {
    pub labels: Vec<Option<usize>>,
    pub fused: Option<Vec<Vec<f64>>>,
}

impl RefinedBatch {
    pub fn floats(&self) -> u64 {
        let reps = self
            .fused
            .as_ref()
            .map_or(0, |f| f.iter().map(|r| r.len() as u64).sum());
        self.labels.len() as u64 + reps
    }
}

pub fn synthetic_batch_bytes(num_records: usize, modality: Modality, cfg: &ProtocolConfig) -> u64 {
    let per = match modality {
        Modality::Image => cfg.comm.image_bytes,
        Modality::Text => cfg.comm.text_bytes,
    };
    num_records as u64 * per
}

pub fn report_floats(report: &ClientReport) -> u64 {
    match &report.payload {
        ReportPayload::Representation(r) => r.len() as u64 + 2,
        ReportPayload::Logits(l) => l.len() as u64,
        ReportPayload::RepresentationPair { original, augmented } => {
            (original.len() + augmented.len()) as u64 + 2
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub round: usize,
    pub upload_bytes: u64,
    pub download_bytes: u64,
}

/// Per-round byte totals built from metered messages.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CommLedger {
    rows: Vec<LedgerRow>,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, msg: &RoundMessage) {
        let row = match self.rows.iter_mut().find(|r| r.round == msg.round) {
            Some(r) => r,
            None => {
                self.rows.push(LedgerRow {
                    round: msg.round,
                    upload_bytes: 0,
                    download_bytes: 0,
                });
                self.rows.last_mut().expect("just pushed")
            }
        };
        match msg.direction {
            Direction::Up => row.upload_bytes += msg.bytes,
            Direction::Down => row.download_bytes += msg.bytes,
        }
    }

    pub fn rows(&self) -> &[LedgerRow] {
        &self.rows
    }

    pub fn total_upload(&self) -> u64 {
        self.rows.iter().map(|r| r.upload_bytes).sum()
    }

    pub fn total_download(&self) -> u64 {
        self.rows.iter().map(|r| r.download_bytes).sum()
    }

    /// Running `(upload, download)` totals after each round.
    pub fn cumulative(&self) -> Vec<(u64, u64)> {
        let mut acc = (0, 0);
        self.rows
            .iter()
            .map(|r| {
                acc.0 += r.upload_bytes;
                acc.1 += r.download_bytes;
                acc
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,upload_bytes,download_bytes\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.round, r.upload_bytes, r.download_bytes);
        }
        out
    }
}

/// Splits `n` records into contrastive batches of `batch_size`. A trailing
/// batch of one record is merged into the previous batch.
pub fn contrastive_batches(n: usize, batch_size: usize) -> Vec<Range<usize>> {
    let size = batch_size.max(2);
    let mut out: Vec<Range<usize>> = (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect();
    if out.len() >= 2 && out.last().is_some_and(|r| r.len() == 1) {
        let tail = out.pop().expect("len >= 2");
        out.last_mut().expect("len >= 1").end = tail.end;
    }
    out
}

/// Contrastive weights when only one modality is present: every client is
/// scored against the per-record mean over all clients.
pub fn pooled_contrastive_weights(batch: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>> {
    if batch.len() < 2 {
        return Err(Error::ContrastiveDegenerate(batch.len()));
    }
    let dim = batch[0].first().map_or(0, Vec::len);
    let means: Vec<Vec<f64>> = batch
        .iter()
        .map(|reps| mean_vec(reps.iter().map(Vec::as_slice), dim))
        .collect();
    let refs: Vec<&[f64]> = means.iter().map(Vec::as_slice).collect();
    batch
        .iter()
        .enumerate()
        .map(|(i, reps)| reps.iter().map(|r| contrastive_score(r, &refs, i)).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedLogits {
    pub logits: Vec<f64>,
    pub label: usize,
}

/// Logit-variant aggregation over one batch of records: contrastive weights
/// on the logits, softmax, weighted logit sum and argmax label.
/// `batch[i][k]` is client `k`'s logit vector for record `i`.
pub fn aggregate_logits(batch: &[Vec<Vec<f64>>], modalities: &[Modality]) -> Result<Vec<AggregatedLogits>> {
    if batch.len() < 2 {
        return Err(Error::ContrastiveDegenerate(batch.len()));
    }
    let both = modalities.contains(&Modality::Image) && modalities.contains(&Modality::Text);
    let w = if both {
        contrastive_weights(batch, modalities)?
    } else {
        pooled_contrastive_weights(batch)?
    };
    batch
        .iter()
        .zip(&w)
        .map(|(logits, w)| {
            let fused = fuse(logits, w)?;
            Ok(AggregatedLogits {
                label: argmax(&fused),
                logits: fused,
            })
        })
        .collect()
}

/// Unimodal contrastive weights: each client's representation of record `i`
/// is scored against its own augmented views of the batch, the view of
/// record `i` being the positive. Indexed `[record][client]`.
pub fn unimodal_weights(originals: &[Vec<Vec<f64>>], augmented: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>> {
    if originals.len() < 2 {
        return Err(Error::ContrastiveDegenerate(originals.len()));
    }
    if originals.len() != augmented.len() {
        return Err(Error::invalid("one augmented view per record required"));
    }
    let clients = originals[0].len();
    if originals.iter().chain(augmented).any(|r| r.len() != clients) {
        return Err(Error::invalid("one representation per client per record required"));
    }
    let mut w = vec![vec![0.0; clients]; originals.len()];
    for n in 0..clients {
        let views: Vec<&[f64]> = augmented.iter().map(|r| r[n].as_slice()).collect();
        for (i, rec) in originals.iter().enumerate() {
            w[i][n] = contrastive_score(&rec[n], &views, i)?;
        }
    }
    Ok(w)
}

/// Server-side outcome of aggregation for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregation {
    pub votes: Vec<Vote>,
    /// Consensus label per record (before filtering).
    pub labels: Vec<usize>,
    pub kept: Vec<usize>,
    /// Fused representation per record; `None` for discarded records and in
    /// the logit variant.
    pub fused: Vec<Option<Vec<f64>>>,
    /// Fusion weights per record, `None` where no fusion happened.
    pub alphas: Vec<Option<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordTrace {
    pub index: usize,
    pub prompt_label: usize,
    pub oracle_label: usize,
    pub consensus_label: usize,
    pub votes: usize,
    pub vote_mass: f64,
    pub kept: bool,
    pub alphas: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    pub variant: Variant,
    pub records: Vec<RecordTrace>,
    pub messages: Vec<RoundMessage>,
    pub finetune: FineTuneReport,
    pub retrain_loss: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub metrics: RoundMetrics,
    pub trace: RoundTrace,
}

/// Per-round information the metrics need beyond model state.
struct RoundStats<'a> {
    records: &'a [SyntheticRecord],
    agg: &'a Aggregation,
    reports: &'a [Vec<ClientReport>],
    finetune: FineTuneReport,
}

/// Full simulation state.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ProtocolConfig,
    /// The variant actually run (see [`ProtocolConfig::effective_variant`]).
    pub variant: Variant,
    pub world: FeatureWorld,
    pub datasets: Vec<ClientDataset>,
    pub clients: Vec<ClientModel>,
    pub generator: GeneratorModel,
    pub ca_params: CAParams,
    pub heldout_image: Vec<Example>,
    pub heldout_text: Vec<Example>,
    pub ledger: CommLedger,
    /// Last completed round.
    pub round: usize,
    pretrained: bool,
}

impl Experiment {
    pub fn new(config: ProtocolConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let w = &config.world;
        let world = build_world(
            config.num_classes,
            w.image_dim,
            w.text_dim,
            w.corruption,
            w.noise_std,
            seed,
        )?;
        let datasets = make_client_datasets(&world, &config.partition_spec(), seed)?;
        let clients = datasets
            .iter()
            .map(|ds| {
                let mut rng = stream(seed, Stream::ClientInit, &[ds.client_id as u64]);
                ClientModel::new(
                    ds.client_id,
                    ds.modality,
                    world.dim(ds.modality),
                    config.model.hidden_dim(ds.client_id),
                    config.rep_dim,
                    config.num_classes,
                    &mut rng,
                )
            })
            .collect();
        let mut gen_rng = stream(seed, Stream::Generator, &[]);
        let mut generator = GeneratorModel::new(
            config.num_classes,
            config.rep_dim,
            w.image_dim,
            config.server.generation_noise,
            &mut gen_rng,
        );
        generator.mr_scale = config.server.mr_scale;
        pretrain_decoder(&mut generator, &world)?;
        let ca_params = CAParams::new(
            config.rep_dim,
            config.fusion.ca_tokens,
            &mut stream(seed, Stream::CrossAttention, &[]),
        )?;
        let per_class = config.eval.heldout_per_class;
        let heldout_image = heldout_set(&world, per_class, Modality::Image, &mut stream(seed, Stream::Heldout, &[0]));
        let heldout_text = heldout_set(&world, per_class, Modality::Text, &mut stream(seed, Stream::Heldout, &[1]));
        Ok(Self {
            variant: config.effective_variant(),
            config,
            world,
            datasets,
            clients,
            generator,
            ca_params,
            heldout_image,
            heldout_text,
            ledger: CommLedger::new(),
            round: 0,
            pretrained: false,
        })
    }

    pub fn heldout(&self, modality: Modality) -> &[Example] {
        match modality {
            Modality::Image => &self.heldout_image,
            Modality::Text => &self.heldout_text,
        }
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.clients.iter().map(|c| c.modality).collect()
    }

    /// Local supervised pre-training of every client, once.
    pub fn pretrain_clients(&mut self) -> Result<()> {
        if self.pretrained {
            return Err(Error::invalid("clients are already pre-trained"));
        }
        let cfg = self.config.train;
        for (model, ds) in self.clients.iter_mut().zip(&self.datasets) {
            let mut rng = stream(self.config.seed, Stream::Pretrain, &[ds.client_id as u64]);
            local_train(model, &ds.examples, &cfg, &mut rng).map_err(|e| e.in_phase(0, "pretrain"))?;
        }
        self.pretrained = true;
        Ok(())
    }

    /// Continues purely local training for `epochs` more epochs: the
    /// no-collaboration baseline.
    pub fn train_standalone(&mut self, epochs: usize) -> Result<()> {
        let cfg = TrainConfig {
            epochs,
            ..self.config.train
        };
        for (model, ds) in self.clients.iter_mut().zip(&self.datasets) {
            let mut rng = stream(self.config.seed, Stream::Retrain, &[u64::MAX, ds.client_id as u64]);
            local_train(model, &ds.examples, &cfg, &mut rng)?;
        }
        Ok(())
    }

    fn send(&mut self, trace: &mut Vec<RoundMessage>, msg: RoundMessage) {
        self.ledger.record(&msg);
        trace.push(msg);
    }

    fn synthesize(&self, t: usize) -> Result<Vec<SyntheticRecord>> {
        let mut rng = stream(self.config.seed, Stream::Synthesis, &[t as u64]);
        (0..self.config.synthetic_per_round)
            .map(|index| {
                let prompt_label = rng.random_range(0..self.config.num_classes);
                let (image_feature, text_feature) = generate_synthetic(&self.generator, &self.world, prompt_label, &mut rng)?;
                Ok(SyntheticRecord {
                    index,
                    prompt_label,
                    image_feature,
                    text_feature,
                })
            })
            .collect()
    }

    fn client_reports(&self, t: usize, records: &[SyntheticRecord]) -> Result<Vec<Vec<ClientReport>>> {
        let aug = Augmentation::for_world_noise(self.world.noise_std);
        self.clients
            .iter()
            .map(|model| {
                let mut rng = stream(self.config.seed, Stream::Augment, &[t as u64, model.client_id as u64]);
                records
                    .iter()
                    .map(|rec| {
                        let x = rec.feature(model.modality);
                        let inf = infer(model, x)?;
                        let payload = match self.variant {
                            Variant::Representation => ReportPayload::Representation(inf.representation),
                            Variant::Logit => ReportPayload::Logits(inf.logits),
                            Variant::Unimodal => {
                                let view = augment_feature(x, &aug, &mut rng);
                                ReportPayload::RepresentationPair {
                                    original: inf.representation,
                                    augmented: infer(model, &view)?.representation,
                                }
                            }
                        };
                        Ok(ClientReport {
                            client_id: model.client_id,
                            modality: model.modality,
                            label: inf.label,
                            entropy_weight: inf.entropy_weight,
                            payload,
                        })
                    })
                    .collect()
            })
            .collect()
    }

    /// Label voting, filtering and fusion. `reports[k][i]` is client `k`'s
    /// report on record `i`.
    pub fn aggregate(&self, reports: &[Vec<ClientReport>]) -> Result<Aggregation> {
        let n = reports.first().map_or(0, Vec::len);
        let k = reports.len();
        let fc = &self.config.fusion;
        let modalities = self.modalities();
        let per_record = |i: usize| -> Vec<&ClientReport> { reports.iter().map(|r| &r[i]).collect() };

        if self.variant == Variant::Logit {
            let logits: Vec<Vec<Vec<f64>>> = (0..n)
                .map(|i| {
                    per_record(i)
                        .iter()
                        .map(|r| r.logits().map(<[f64]>::to_vec).ok_or_else(|| Error::invalid("logit report expected")))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()?;
            let mut labels = vec![0; n];
            let mut alphas = vec![None; n];
            for range in contrastive_batches(n, fc.batch_size) {
                let batch = &logits[range.clone()];
                if batch.len() < 2 {
                    let agg = mean_vec(batch[0].iter().map(Vec::as_slice), self.config.num_classes);
                    labels[range.start] = argmax(&agg);
                    alphas[range.start] = Some(vec![1.0 / k as f64; k]);
                    continue;
                }
                let both = modalities.contains(&Modality::Image) && modalities.contains(&Modality::Text);
                let w = if both {
                    contrastive_weights(batch, &modalities)?
                } else {
                    pooled_contrastive_weights(batch)?
                };
                let agg = aggregate_logits(batch, &modalities)?;
                for (off, (a, w)) in agg.into_iter().zip(w).enumerate() {
                    labels[range.start + off] = a.label;
                    alphas[range.start + off] = Some(fusion_alphas(&w));
                }
            }
            let votes: Vec<Vote> = (0..n)
                .map(|i| {
                    let rs = per_record(i);
                    let agree: Vec<&&ClientReport> = rs.iter().filter(|r| r.label == labels[i]).collect();
                    Vote {
                        label: labels[i],
                        count: agree.len(),
                        mass: agree.iter().map(|r| r.entropy_weight).sum(),
                    }
                })
                .collect();
            let kept = filter_records(&votes, fc.beta, k, fc.vote_count);
            let mut kept_alphas = vec![None; n];
            for &i in &kept {
                kept_alphas[i] = alphas[i].take();
            }
            return Ok(Aggregation {
                votes,
                labels,
                kept,
                fused: vec![None; n],
                alphas: kept_alphas,
            });
        }

        let votes: Vec<Vote> = (0..n)
            .map(|i| {
                let preds: Vec<(usize, f64)> = per_record(i).iter().map(|r| (r.label, r.entropy_weight)).collect();
                lab_vote(&preds, self.config.num_classes)
            })
            .collect::<Result<_>>()?;
        let labels: Vec<usize> = votes.iter().map(|v| v.label).collect();
        let kept = filter_records(&votes, fc.beta, k, fc.vote_count);
        let reps_of = |i: usize| -> Vec<Vec<f64>> {
            per_record(i)
                .iter()
                .map(|r| r.representation().expect("representation report").to_vec())
                .collect()
        };
        let enhanced: Vec<Vec<Vec<f64>>> = match self.variant {
            Variant::Representation => kept
                .iter()
                .map(|&i| intermodal_fuse(&reps_of(i), &modalities, &self.ca_params))
                .collect::<Result<_>>()?,
            _ => kept.iter().map(|&i| reps_of(i)).collect(),
        };
        let mut fused = vec![None; n];
        let mut alphas = vec![None; n];
        for range in contrastive_batches(kept.len(), fc.batch_size) {
            let batch = &enhanced[range.clone()];
            let w = if batch.len() < 2 {
                vec![vec![0.0; k]]
            } else if self.variant == Variant::Unimodal {
                let aug: Vec<Vec<Vec<f64>>> = kept[range.clone()]
                    .iter()
                    .map(|&i| {
                        per_record(i)
                            .iter()
                            .map(|r| match &r.payload {
                                ReportPayload::RepresentationPair { augmented, .. } => Ok(augmented.clone()),
                                _ => Err(Error::invalid("unimodal report lacks an augmented view")),
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<_>>()?;
                unimodal_weights(batch, &aug)?
            } else {
                contrastive_weights(batch, &modalities)?
            };
            for (off, (reps, w)) in batch.iter().zip(&w).enumerate() {
                let i = kept[range.start + off];
                fused[i] = Some(fuse(reps, w)?);
                alphas[i] = Some(fusion_alphas(w));
            }
        }
        Ok(Aggregation {
            votes,
            labels,
            kept,
            fused,
            alphas,
        })
    }

    fn refined_batch(&self, agg: &Aggregation) -> RefinedBatch {
        let n = agg.labels.len();
        let mut labels = vec![None; n];
        for &i in &agg.kept {
            labels[i] = Some(agg.labels[i]);
        }
        let fused = (self.variant != Variant::Logit).then(|| {
            agg.fused
                .iter()
                .map(|f| f.clone().unwrap_or_else(|| vec![0.0; self.config.rep_dim]))
                .collect()
        });
        RefinedBatch { labels, fused }
    }

    /// Runs one protocol round.
    pub fn run_round(&mut self) -> Result<RoundOutcome> {
        if !self.pretrained {
            return Err(Error::invalid("clients must be pre-trained before round 1"));
        }
        let t = self.round + 1;
        let seed = self.config.seed;
        let b = self.config.comm.float_bytes;
        let mut messages = Vec::new();

        let records = self.synthesize(t).map_err(|e| e.in_phase(t, "synthesis"))?;

        for k in 0..self.clients.len() {
            let bytes = synthetic_batch_bytes(records.len(), self.clients[k].modality, &self.config);
            self.send(
                &mut messages,
                RoundMessage {
                    round: t,
                    direction: Direction::Down,
                    kind: PayloadKind::SyntheticBatch,
                    client: k,
                    bytes,
                },
            );
        }

        let reports = self.client_reports(t, &records).map_err(|e| e.in_phase(t, "inference"))?;
        for (k, rs) in reports.iter().enumerate() {
            let bytes = b * rs.iter().map(report_floats).sum::<u64>();
            self.send(
                &mut messages,
                RoundMessage {
                    round: t,
                    direction: Direction::Up,
                    kind: PayloadKind::ReportBatch,
                    client: k,
                    bytes,
                },
            );
        }

        let agg = self.aggregate(&reports).map_err(|e| e.in_phase(t, "aggregation"))?;

        let refined = self.refined_batch(&agg);
        for k in 0..self.clients.len() {
            self.send(
                &mut messages,
                RoundMessage {
                    round: t,
                    direction: Direction::Down,
                    kind: PayloadKind::RefinedBatch,
                    client: k,
                    bytes: b * refined.floats(),
                },
            );
        }

        let sc = &self.config.server;
        let ft_cfg = FineTuneConfig {
            p_drop: if self.variant == Variant::Logit { 1.0 } else { self.config.fusion.p_drop },
            epochs: sc.finetune_epochs,
            learning_rate: sc.learning_rate,
            batch_size: sc.batch_size,
        };
        let schedule = CosineSchedule {
            base_lr: sc.learning_rate,
            total_epochs: self.config.rounds * sc.finetune_epochs,
        };
        let samples: Vec<FineTuneSample<'_>> = agg
            .kept
            .iter()
            .map(|&i| FineTuneSample {
                label: agg.labels[i],
                fused: agg.fused[i].as_deref(),
                image: &records[i].image_feature,
            })
            .collect();
        let mut ft_rng = stream(seed, Stream::FineTune, &[t as u64]);
        let finetune = finetune_t2i(
            &mut self.generator,
            &samples,
            &ft_cfg,
            &schedule,
            (t - 1) * sc.finetune_epochs,
            &mut ft_rng,
        )
        .map_err(|e| e.in_phase(t, "finetune"))?;

        let rt_cfg = TrainConfig {
            epochs: self.config.server.retrain_epochs,
            ..self.config.train
        };
        let variant = self.variant;
        let mut retrain_loss = Vec::with_capacity(self.clients.len());
        for model in &mut self.clients {
            let mut samples = Vec::with_capacity(agg.kept.len());
            for &i in &agg.kept {
                let label = refined.labels[i].ok_or_else(|| {
                    Error::invalid("retraining record lacks a consensus label").in_phase(t, "retrain")
                })?;
                let target_rep = match variant {
                    Variant::Logit => None,
                    _ => Some(agg.fused[i].as_deref().ok_or_else(|| {
                        Error::invalid("retraining record lacks a fused representation").in_phase(t, "retrain")
                    })?),
                };
                samples.push(TrainSample {
                    feature: records[i].feature(model.modality),
                    label,
                    target_rep,
                });
            }
            let mut rng = stream(seed, Stream::Retrain, &[t as u64, model.client_id as u64]);
            let loss = match variant {
                Variant::Logit => retrain_logit(model, &samples, &rt_cfg, &mut rng),
                _ => retrain(model, &samples, &rt_cfg, &mut rng),
            }
            .map_err(|e| e.in_phase(t, "retrain"))?;
            retrain_loss.push(loss);
        }

        self.round = t;
        let metrics = self
            .metrics(
                t,
                Some(RoundStats {
                    records: &records,
                    agg: &agg,
                    reports: &reports,
                    finetune,
                }),
            )
            .map_err(|e| e.in_phase(t, "metrics"))?;
        let oracle: Vec<usize> = records
            .iter()
            .map(|r| self.world.nearest_class(&r.image_feature, Modality::Image))
            .collect();
        let trace = RoundTrace {
            round: t,
            variant,
            records: records
                .iter()
                .enumerate()
                .map(|(i, r)| RecordTrace {
                    index: r.index,
                    prompt_label: r.prompt_label,
                    oracle_label: oracle[i],
                    consensus_label: agg.labels[i],
                    votes: agg.votes[i].count,
                    vote_mass: agg.votes[i].mass,
                    kept: refined.labels[i].is_some(),
                    alphas: agg.alphas[i].clone(),
                })
                .collect(),
            messages,
            finetune,
            retrain_loss,
        };
        Ok(RoundOutcome { metrics, trace })
    }

    /// Metrics for the current model state; round 0 has no round statistics.
    pub fn baseline_metrics(&self) -> Result<RoundMetrics> {
        self.metrics(0, None)
    }

    fn metrics(&self, t: usize, stats: Option<RoundStats<'_>>) -> Result<RoundMetrics> {
        let seed = self.config.seed;
        let accs: Vec<f64> = self
            .clients
            .iter()
            .map(|m| client_accuracy(m, self.heldout(m.modality)))
            .collect::<Result<_>>()?;
        let mean_over = |m: Modality| {
            let sel: Vec<f64> = self
                .clients
                .iter()
                .zip(&accs)
                .filter(|(c, _)| c.modality == m)
                .map(|(_, a)| *a)
                .collect();
            (!sel.is_empty()).then(|| sel.iter().sum::<f64>() / sel.len() as f64)
        };
        let k = self.clients.len() as f64;
        let losses: Vec<f64> = self
            .clients
            .iter()
            .map(|m| heldout_loss(m, self.heldout(m.modality)))
            .collect::<Result<_>>()?;
        let grad_norm_sq = self
            .clients
            .iter()
            .map(|m| heldout_grad_norm_sq(m, self.heldout(m.modality)))
            .sum::<f64>()
            / k;
        let probes: Vec<&[Example]> = self.clients.iter().map(|m| self.heldout(m.modality)).collect();
        let mut eval_rng = stream(seed, Stream::Eval, &[t as u64]);
        let t2i = gan_test_accuracy(&self.generator, &self.world, self.config.eval.gan_test_per_class, &mut eval_rng)?;

        let mut m = RoundMetrics {
            round: t,
            img_acc: mean_over(Modality::Image),
            txt_acc: mean_over(Modality::Text),
            mean_acc: accs.iter().sum::<f64>() / k,
            client_accuracy: accs,
            t2i_accuracy: t2i,
            labvote_fidelity: None,
            prompt_fidelity: None,
            prompt_fidelity_all: None,
            kept_fraction: None,
            global_loss: losses.iter().sum::<f64>() / k,
            grad_norm_sq,
            zeta_sq: zeta_sq(&self.clients, &probes)?,
            gamma_sq: gamma_sq(&self.clients),
            eps_align_sq: None,
            finetune_loss: None,
            mr_draws: None,
            mr_omitted: None,
            aux_prototype_distance: prototype_distance(&self.generator, &self.world),
        };
        let Some(s) = stats else { return Ok(m) };
        let oracle: Vec<usize> = s
            .records
            .iter()
            .map(|r| self.world.nearest_class(&r.image_feature, Modality::Image))
            .collect();
        let frac = |idx: &mut dyn Iterator<Item = bool>, n: usize| {
            (n > 0).then(|| idx.filter(|&b| b).count() as f64 / n as f64)
        };
        let kept = &s.agg.kept;
        m.labvote_fidelity = frac(&mut kept.iter().map(|&i| s.agg.labels[i] == oracle[i]), kept.len());
        m.prompt_fidelity = frac(&mut kept.iter().map(|&i| s.records[i].prompt_label == oracle[i]), kept.len());
        m.prompt_fidelity_all = frac(
            &mut s.records.iter().zip(&oracle).map(|(r, &o)| r.prompt_label == o),
            s.records.len(),
        );
        m.kept_fraction = (!s.records.is_empty()).then(|| kept.len() as f64 / s.records.len() as f64);
        if self.variant != Variant::Logit {
            let pairs: Vec<(&[f64], &[f64])> = kept
                .iter()
                .flat_map(|&i| {
                    let mr = s.agg.fused[i].as_deref().expect("kept record is fused");
                    s.reports
                        .iter()
                        .map(move |r| (r[i].representation().expect("representation report"), mr))
                })
                .collect();
            m.eps_align_sq = eps_align_sq(&pairs);
        }
        if !s.finetune.skipped_empty {
            m.finetune_loss = Some(s.finetune.final_loss);
        }
        m.mr_draws = Some(s.finetune.draws);
        m.mr_omitted = Some(s.finetune.omitted);
        Ok(m)
    }
}

/// Everything a run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub variant: Variant,
    /// Round 0 (after pre-training) followed by one entry per round.
    pub metrics: Vec<RoundMetrics>,
    pub ledger: CommLedger,
    pub traces: Vec<RoundTrace>,
}

impl ExperimentResult {
    pub fn metrics_jsonl(&self) -> String {
        let mut out = String::new();
        for m in &self.metrics {
            out.push_str(&serde_json::to_string(m).expect("metrics serialize"));
            out.push('\n');
        }
        out
    }

    pub fn final_metrics(&self) -> &RoundMetrics {
        self.metrics.last().expect("at least the baseline row")
    }
}

/// Pre-trains clients and runs every round.
pub fn run_experiment(config: &ProtocolConfig) -> Result<ExperimentResult> {
    let mut exp = Experiment::new(config.clone())?;
    exp.pretrain_clients()?;
    let mut metrics = vec![exp.baseline_metrics().map_err(|e| e.in_phase(0, "metrics"))?];
    let mut traces = Vec::with_capacity(config.rounds);
    for _ in 0..config.rounds {
        let out = exp.run_round()?;
        metrics.push(out.metrics);
        traces.push(out.trace);
    }
    Ok(ExperimentResult {
        variant: exp.variant,
        metrics,
        ledger: exp.ledger,
        traces,
    })
}

/// Per-client held-out accuracy of the no-collaboration baseline: the same
/// pre-trained clients given as many further local epochs as the protocol
/// spends on retraining.
pub fn run_standalone(config: &ProtocolConfig) -> Result<Vec<f64>> {
    let mut exp = Experiment::new(config.clone())?;
    exp.pretrain_clients()?;
    exp.train_standalone(config.rounds * config.server.retrain_epochs)?;
    exp.clients
        .iter()
        .map(|m| client_accuracy(m, exp.heldout(m.modality)))
        .collect()
}

/// Writes `metrics.jsonl`, `ledger.csv` and, when asked, `trace/round_NNN.json`.
pub fn write_outputs(dir: &Path, result: &ExperimentResult, dump_trace: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.jsonl"), result.metrics_jsonl())?;
    fs::write(dir.join("ledger.csv"), result.ledger.to_csv())?;
    if dump_trace {
        let tdir = dir.join("trace");
        fs::create_dir_all(&tdir)?;
        for tr in &result.traces {
            let text = serde_json::to_string_pretty(tr)?;
            fs::write(tdir.join(format!("round_{:03}.json", tr.round)), text)?;
        }
    }
    Ok(())
}
