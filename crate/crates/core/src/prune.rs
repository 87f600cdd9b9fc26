//! Training loops, continuous pruning, post-training curves and rank analysis.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::criteria::{rank_most_prunable, CriterionConfig, CriterionKind};
use crate::data::Dataset;
use crate::error::{contract, Result};
use crate::nn::{AdamState, Network, StructureId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub epochs_train: usize,
    #[serde(default = "default_fine_tune")]
    pub fine_tune_epochs: usize,
    #[serde(default = "default_interval")]
    pub prune_interval: usize,
}

fn default_fine_tune() -> usize {
    10
}
fn default_interval() -> usize {
    1
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self { epochs_train: 50, fine_tune_epochs: 10, prune_interval: 1 }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_train < 1 || self.prune_interval < 1 {
            return Err(crate::Error::Config(format!(
                "schedule needs epochs_train >= 1 and prune_interval >= 1, got {} and {}",
                self.epochs_train, self.prune_interval
            )));
        }
        Ok(())
    }
}

/// Optimiser and objective settings for one training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub lr: f64,
    pub batch_size: usize,
    /// Multiplier on ΣKL/N in the step loss.
    pub kl_scale: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    FineTune,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneEvent {
    pub structure_id: StructureId,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub test_accuracy: f64,
    pub compression: f64,
    pub alive_counts: Vec<usize>,
    /// Structure ids refer to the network as it was just before the event.
    pub prune_events: Vec<PruneEvent>,
    /// Gate layers with no live structure left.
    pub degenerate_layers: Vec<usize>,
    pub mean_ce: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub structures_removed: usize,
    pub compression: f64,
    pub accuracy: f64,
    pub alive_counts: Vec<usize>,
    /// Set on the point where a BMRS criterion would stop pruning.
    pub stop: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub points: Vec<CurvePoint>,
    /// How many structures the BMRS rule prunes before ΔF < 0 (BMRS only).
    pub stop_after: Option<usize>,
}

/// Percentage of weight+bias scalars of `before` that are gone in `after`,
/// counting both nets as if their pruned structures were physically removed.
pub fn compression_percent(before: &Network, after: &Network) -> Result<f64> {
    let b = before.effective_weight_count()?;
    let a = after.effective_weight_count()?;
    if b == 0 {
        return Ok(0.0);
    }
    Ok(100.0 * (b as f64 - a as f64) / b as f64)
}

/// Percent of correctly classified examples in eval mode. Batches are spread
/// over threads; counts are integers so the result is order-independent.
pub fn accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(contract("accuracy of an empty dataset"));
    }
    const BATCH: usize = 500;
    let idx: Vec<usize> = (0..data.len()).collect();
    let chunks: Vec<&[usize]> = idx.chunks(BATCH).collect();
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(chunks.len()).max(1);
    let per = chunks.len().div_ceil(threads);
    let correct: Result<usize> = std::thread::scope(|s| {
        let handles: Vec<_> = chunks
            .chunks(per)
            .map(|group| {
                s.spawn(move || -> Result<usize> {
                    let mut c = 0;
                    for ids in group {
                        let (x, y) = data.batch(ids);
                        let logits = net.predict(&x)?;
                        let k = logits.row_len();
                        for (row, &label) in logits.data().chunks(k).zip(&y) {
                            if argmax(row) == label {
                                c += 1;
                            }
                        }
                    }
                    Ok(c)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("eval thread panicked")).sum()
    });
    Ok(100.0 * correct? as f64 / data.len() as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Owns the optimiser and RNG stream of one run.
pub struct Trainer {
    pub net: Network,
    pub adam: AdamState,
    pub opts: TrainOptions,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub mean_ce: f64,
    pub kl: f64,
}

impl Trainer {
    pub fn new(net: Network, opts: TrainOptions) -> Result<Self> {
        if !(opts.lr > 0.0) || opts.batch_size == 0 || !(opts.kl_scale >= 0.0) {
            return Err(crate::Error::Config(format!(
                "training needs lr > 0, batch_size > 0, kl_scale >= 0 (got {}, {}, {})",
                opts.lr, opts.batch_size, opts.kl_scale
            )));
        }
        Ok(Self { net, adam: AdamState::new(opts.lr), opts, rng: ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_0f7a11) })
    }

    /// One pass over `data` in a seeded shuffled order. The KL term is
    /// weighted by kl_scale / |data|.
    pub fn epoch(&mut self, data: &Dataset) -> Result<EpochStats> {
        if data.is_empty() {
            return Err(contract("cannot train on an empty dataset"));
        }
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.shuffle(&mut self.rng);
        let kl_weight = self.opts.kl_scale / data.len() as f64;
        let (mut ce_sum, mut kl) = (0.0, 0.0);
        for ids in idx.chunks(self.opts.batch_size) {
            let (x, y) = data.batch(ids);
            let noise = self.net.draw_noise(&mut self.rng);
            let loss = self.net.loss_and_grad(&x, &y, &noise, kl_weight)?;
            ce_sum += loss.ce * ids.len() as f64;
            kl = loss.kl;
            self.adam.step(self.net.params_mut());
        }
        Ok(EpochStats { mean_ce: ce_sum / data.len() as f64, kl })
    }
}

fn degenerate(net: &Network) -> Vec<usize> {
    net.gates().filter(|(_, g)| g.n_alive() == 0).map(|(l, _)| l).collect()
}

/// Train-and-prune loop: every `prune_interval` epochs all live structures
/// are scored and the ones the criterion flags are removed physically; the
/// last `fine_tune_epochs` epochs train without pruning. One record per epoch.
pub fn continuous_prune(
    net: Network,
    train: &Dataset,
    test: &Dataset,
    criterion: &CriterionConfig,
    schedule: &TrainSchedule,
    opts: TrainOptions,
) -> Result<(Network, Vec<RunRecord>)> {
    schedule.validate()?;
    criterion.validate()?;
    if net.gate_layers().is_empty() {
        return Err(contract("continuous pruning needs at least one gate layer"));
    }
    if criterion.criterion == CriterionKind::L2 && criterion.threshold.is_none() {
        return Err(crate::Error::Config("the l2 criterion needs an explicit threshold in continuous mode".into()));
    }
    let initial = net.clone();
    let mut tr = Trainer::new(net, opts)?;
    let mut records = Vec::new();
    let total = schedule.epochs_train + schedule.fine_tune_epochs;
    for epoch in 1..=total {
        let phase = if epoch <= schedule.epochs_train { Phase::Train } else { Phase::FineTune };
        let stats = tr.epoch(train)?;
        let mut events = Vec::new();
        if phase == Phase::Train && epoch % schedule.prune_interval == 0 && criterion.criterion != CriterionKind::None {
            let flagged: Vec<_> = criterion.score_all(&tr.net)?.into_iter().filter(|s| s.prune).collect();
            if !flagged.is_empty() {
                let ids: Vec<StructureId> = flagged.iter().map(|s| s.structure_id).collect();
                tr.net.prune(&ids)?;
                tr.net.compact()?;
                events = flagged.iter().map(|s| PruneEvent { structure_id: s.structure_id, score: s.score }).collect();
            }
        }
        records.push(RunRecord {
            epoch,
            phase,
            test_accuracy: accuracy(&tr.net, test)?,
            compression: compression_percent(&initial, &tr.net)?,
            alive_counts: tr.net.n_alive_per_gate(),
            prune_events: events,
            degenerate_layers: degenerate(&tr.net),
            mean_ce: stats.mean_ce,
            kl: stats.kl,
        });
    }
    Ok((tr.net, records))
}

/// Progressive post-training pruning: structures are ranked once on the
/// trained net (most prunable first, ties by id), removed chunk by chunk,
/// and each chunk is followed by one fine-tune epoch before measuring test
/// accuracy. For BMRS criteria the breakpoint where the next structure has
/// ΔF < 0 is always on the curve and marked `stop`.
pub fn post_training_prune(
    net: &Network,
    train: &Dataset,
    test: &Dataset,
    criterion: &CriterionConfig,
    chunk_fraction: f64,
    opts: TrainOptions,
) -> Result<Curve> {
    criterion.validate()?;
    if !(chunk_fraction > 0.0 && chunk_fraction <= 1.0) {
        return Err(crate::Error::Config(format!("chunk fraction must lie in (0, 1], got {chunk_fraction}")));
    }
    let ranked = rank_most_prunable(&criterion.score_all(net)?);
    let n = ranked.len();
    let stop_after = criterion.criterion.is_bmrs().then(|| ranked.iter().take_while(|s| s.score >= 0.0).count());
    if n == 0 {
        let point = CurvePoint {
            step: 0,
            structures_removed: 0,
            compression: 0.0,
            accuracy: accuracy(net, test)?,
            alive_counts: net.n_alive_per_gate(),
            stop: stop_after == Some(0),
        };
        return Ok(Curve { points: vec![point], stop_after });
    }
    let chunk = ((chunk_fraction * n as f64).floor() as usize).max(1);
    let mut cuts: Vec<usize> = (1..=n.div_ceil(chunk)).map(|k| (k * chunk).min(n)).collect();
    if let Some(s) = stop_after {
        if s > 0 && !cuts.contains(&s) {
            cuts.push(s);
            cuts.sort_unstable();
        }
    }
    let mut tr = Trainer::new(net.clone(), opts)?;
    let mut points = Vec::with_capacity(cuts.len());
    let mut done = 0;
    for (step, &cut) in cuts.iter().enumerate() {
        let ids: Vec<StructureId> = ranked[done..cut].iter().map(|s| s.structure_id).collect();
        tr.net.prune(&ids)?;
        done = cut;
        tr.epoch(train)?;
        points.push(CurvePoint {
            step: step + 1,
            structures_removed: cut,
            compression: compression_percent(net, &tr.net)?,
            accuracy: accuracy(&tr.net, test)?,
            alive_counts: tr.net.n_alive_per_gate(),
            stop: stop_after == Some(cut),
        });
    }
    Ok(Curve { points, stop_after })
}

/// Removes live structures of `net` in `ranking` order, one at a time, until
/// its compression relative to `reference` reaches `target` percent.
/// Returns the number of structures removed. The net is left masked.
pub fn prune_to_compression(net: &mut Network, reference: &Network, ranking: &CriterionConfig, target: f64) -> Result<usize> {
    let ranked = rank_most_prunable(&ranking.score_all(net)?);
    let base = reference.effective_weight_count()? as f64;
    let mut removed = 0;
    for s in ranked {
        let current = 100.0 * (base - net.effective_weight_count()? as f64) / base;
        if current >= target {
            break;
        }
        net.prune(&[s.structure_id])?;
        removed += 1;
    }
    Ok(removed)
}

/// Spearman's ρ with average ranks for ties. `None` when either input is
/// constant (ρ undefined).
pub fn spearman_rank_correlation(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(contract(format!("spearman needs two vectors of equal length >= 2, got {} and {}", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(contract("spearman inputs contain NaN"));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(None);
    }
    Ok(Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)))
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pairwise Spearman ρ of the criteria's prunability keys over the live
/// structures of `net`.
pub fn spearman_matrix(net: &Network, criteria: &[CriterionConfig]) -> Result<Vec<Vec<Option<f64>>>> {
    let keys: Vec<Vec<f64>> = criteria
        .iter()
        .map(|c| Ok(c.score_all(net)?.iter().map(|s| s.prunability).collect()))
        .collect::<Result<_>>()?;
    let mut m = vec![vec![None; criteria.len()]; criteria.len()];
    for i in 0..criteria.len() {
        for j in 0..criteria.len() {
            m[i][j] = if keys[i].len() < 2 { None } else { spearman_rank_correlation(&keys[i], &keys[j])? };
        }
    }
    Ok(m)
}
