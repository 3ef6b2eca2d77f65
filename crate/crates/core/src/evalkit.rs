//! Retrieval evaluation: N-way top-k accuracy over paired embeddings,
//! representational similarity matrices, and the temporal window sweep.

use crate::data::{Dataset, Embedding};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::{cosine_sim_matrix, DenseArray};
use crate::scalar::Real;
use crate::synth::stream;
use crate::trainer::{train_stage1, TrainConfig};

const DOM_TRIAL: u64 = 0x5452_4941;

#[derive(Debug, Clone, PartialEq)]
pub struct ReportCell {
    pub n_way: usize,
    pub k: usize,
    pub accuracy: f64,
    pub trials: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RetrievalReport {
    pub cells: Vec<ReportCell>,
}

impl RetrievalReport {
    /// For every fixed `n_way`, accuracy must not decrease in `k`.
    pub fn check_monotonicity(&self) -> Result<()> {
        for a in &self.cells {
            for b in &self.cells {
                if a.n_way == b.n_way && a.k < b.k && a.accuracy > b.accuracy {
                    return Err(Error::Invalid(format!(
                        "top-{} accuracy {} exceeds top-{} accuracy {} at {}-way",
                        a.k, a.accuracy, b.k, b.accuracy, a.n_way
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("n_way,k,accuracy,trials,seed\n");
        for c in &self.cells {
            out.push_str(&format!("{},{},{},{},{}\n", c.n_way, c.k, c.accuracy, c.trials, c.seed));
        }
        out
    }
}

/// Unit-normalized rows, with the offending row named on failure.
fn normalized<T: Real>(e: &Embedding<T>, side: &'static str) -> Result<Vec<f64>> {
    let (n, d) = (e.n_samples(), e.dim());
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        let row = e.values().row(i);
        let norm = row
            .iter()
            .fold(0.0f64, |acc, &v| acc + v.to_f64().unwrap_or(f64::NAN).powi(2))
            .sqrt();
        if norm.is_nan() || norm <= 1e-12 {
            return Err(Error::ZeroNormRow { side, index: i, norm });
        }
        out.extend(row.iter().map(|&v| v.to_f64().unwrap() / norm));
    }
    Ok(out)
}

struct TrialSampler {
    n: usize,
    seed: u64,
}

impl TrialSampler {
    /// Query index plus `n_way - 1` distinct distractors for one trial.
    fn draw(&self, trial: usize, n_way: usize) -> (usize, Vec<usize>) {
        let mut rng = stream(self.seed, DOM_TRIAL, trial as u64);
        let q = rand::Rng::random_range(&mut rng, 0..self.n);
        let mut picked = Vec::with_capacity(n_way - 1);
        while picked.len() < n_way - 1 {
            let c = rand::Rng::random_range(&mut rng, 0..self.n);
            if c != q && !picked.contains(&c) {
                picked.push(c);
            }
        }
        (q, picked)
    }
}

/// Rank (1-based) of the true counterpart among the candidates; the
/// true match is candidate 0 and ties resolve toward the lower index.
fn true_rank(query: &[f64], truth: &[f64], distractors: &[&[f64]]) -> usize {
    let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
    let true_sim = dot(query, truth);
    let mut rank = 1;
    for d in distractors {
        if dot(query, d) > true_sim {
            rank += 1;
        }
    }
    rank
}

/// Monte-Carlo N-way retrieval over one or more `(n_way, k)` cells.
/// Within a fixed `n_way`, every `k` shares the same sampled trials, so
/// top-k monotonicity holds by construction.
pub fn retrieval_report<T: Real>(
    brain: &Embedding<T>,
    vis: &Embedding<T>,
    n_ways: &[usize],
    ks: &[usize],
    trials: usize,
    seed: u64,
) -> Result<RetrievalReport> {
    if brain.n_samples() != vis.n_samples() || brain.dim() != vis.dim() {
        return Err(Error::PairingMismatch(format!(
            "embeddings [{} x {}] vs [{} x {}]",
            brain.n_samples(),
            brain.dim(),
            vis.n_samples(),
            vis.dim()
        )));
    }
    if trials == 0 {
        return Err(Error::Invalid("trials must be >= 1".into()));
    }
    let n = brain.n_samples();
    let d = brain.dim();
    let nb = normalized(brain, "brain")?;
    let nv = normalized(vis, "vision")?;

    let mut cells = Vec::new();
    for &n_way in n_ways {
        if n_way < 2 || n_way > n {
            return Err(Error::Invalid(format!(
                "n_way {n_way} outside 2..={n} (test set size)"
            )));
        }
        let ks_here: Vec<usize> = ks.iter().copied().filter(|&k| k >= 1 && k < n_way).collect();
        if ks_here.is_empty() {
            continue;
        }
        let sampler = TrialSampler { n, seed };
        let mut successes = vec![0usize; ks_here.len()];
        for trial in 0..trials {
            let (q, distractors) = sampler.draw(trial, n_way);
            let query = &nb[q * d..(q + 1) * d];
            let truth = &nv[q * d..(q + 1) * d];
            let drows: Vec<&[f64]> = distractors.iter().map(|&i| &nv[i * d..(i + 1) * d]).collect();
            let rank = true_rank(query, truth, &drows);
            for (slot, &k) in successes.iter_mut().zip(&ks_here) {
                if rank <= k {
                    *slot += 1;
                }
            }
        }
        for (&k, &s) in ks_here.iter().zip(&successes) {
            cells.push(ReportCell {
                n_way,
                k,
                accuracy: s as f64 / trials as f64,
                trials,
                seed,
            });
        }
    }
    let report = RetrievalReport { cells };
    report.check_monotonicity()?;
    Ok(report)
}

/// Single-cell convenience wrapper.
pub fn nway_topk<T: Real>(
    brain: &Embedding<T>,
    vis: &Embedding<T>,
    n_way: usize,
    k: usize,
    trials: usize,
    seed: u64,
) -> Result<ReportCell> {
    if k >= n_way {
        return Err(Error::Invalid(format!("k {k} must be < n_way {n_way}")));
    }
    let report = retrieval_report(brain, vis, &[n_way], &[k], trials, seed)?;
    report
        .cells
        .into_iter()
        .next()
        .ok_or_else(|| Error::Invalid("empty report".into()))
}

/// Pairwise similarity matrix over one embedding set, rows ordered by
/// category label.
#[derive(Debug, Clone)]
pub struct Rsm<T> {
    /// Category-ordered similarity matrix.
    pub matrix: DenseArray<T>,
    /// Label per reordered row.
    pub labels: Vec<usize>,
    /// Original sample index per reordered row.
    pub order: Vec<usize>,
    /// Start offset of each category block, in label order.
    pub boundaries: Vec<(usize, usize)>,
}

pub fn rsm<T: Real>(emb: &Embedding<T>, labels: &[usize]) -> Result<Rsm<T>> {
    let n = emb.n_samples();
    if n < 2 {
        return Err(Error::Invalid("an RSM needs at least 2 samples".into()));
    }
    if labels.len() != n {
        return Err(Error::PairingMismatch(format!(
            "{} labels for {n} samples",
            labels.len()
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (labels[i], i));
    let reordered = emb.values().gather_axis0(&order);
    let matrix = cosine_sim_matrix(&reordered, &reordered)?;

    let sorted_labels: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
    let mut boundaries = Vec::new();
    let mut start = 0usize;
    for i in 1..=n {
        if i == n || sorted_labels[i] != sorted_labels[start] {
            boundaries.push((sorted_labels[start], start));
            start = i;
        }
    }

    // construction guarantees both; check anyway so corrupted inputs
    // cannot produce a silently broken matrix
    let tol = 1e-6;
    for i in 0..n {
        let dii = matrix.at2(i, i).to_f64().unwrap();
        if (dii - 1.0).abs() > tol {
            return Err(Error::Invalid(format!("diagonal entry {i} is {dii}")));
        }
        for j in 0..i {
            let a = matrix.at2(i, j).to_f64().unwrap();
            let b = matrix.at2(j, i).to_f64().unwrap();
            if (a - b).abs() > tol {
                return Err(Error::Invalid(format!("asymmetry at ({i},{j})")));
            }
        }
    }
    Ok(Rsm {
        matrix,
        labels: sorted_labels,
        order,
        boundaries,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub window: usize,
    pub top1: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("window,top1\n");
        for r in &self.rows {
            out.push_str(&format!("{},{}\n", r.window, r.top1));
        }
        out
    }
}

/// For each window, truncate the recordings to that many leading
/// timesteps, train from scratch with the shared seed, and score
/// held-out N-way top-1 retrieval.
#[allow(clippy::too_many_arguments)]
pub fn window_sweep<T: Real>(
    train_ds: &Dataset<T>,
    test_ds: &Dataset<T>,
    windows: &[usize],
    base_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    n_way: usize,
    trials: usize,
    eval_seed: u64,
) -> Result<SweepReport> {
    if windows.is_empty() {
        return Err(Error::Invalid("sweep needs at least one window".into()));
    }
    let mut rows = Vec::with_capacity(windows.len());
    for &window in windows {
        let train_cut = Dataset {
            brain: train_ds.brain.truncate_window(window)?,
            vision: train_ds.vision.clone(),
            text: train_ds.text.clone(),
            latent: train_ds.latent.clone(),
            labels: train_ds.labels.clone(),
        };
        let test_cut = Dataset {
            brain: test_ds.brain.truncate_window(window)?,
            vision: test_ds.vision.clone(),
            text: test_ds.text.clone(),
            latent: test_ds.latent.clone(),
            labels: test_ds.labels.clone(),
        };
        let mut cfg = base_cfg.clone();
        cfg.timesteps = window;
        let mut model = Model::<T>::init(cfg, train_cfg.seed)?;
        train_stage1(&mut model, &train_cut, train_cfg)?;
        let (fb, fv) = model.embed_dataset(&test_cut)?;
        let cell = nway_topk(&fb, &fv, n_way, 1, trials, eval_seed)?;
        rows.push(SweepRow {
            window,
            top1: cell.accuracy,
        });
    }
    Ok(SweepReport { rows })
}
