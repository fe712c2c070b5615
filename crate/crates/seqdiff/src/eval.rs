//! Evaluation battery: numerical fidelity (MMD, correlation MAE, ACF MSE,
//! DTW), categorical fidelity (TVD, transition distance), a two-sample
//! classifier test, and train-on-synthetic downstream utility, collected
//! into a JSON report.
//!
//! Every metric is deterministic given its inputs and seed, and every
//! reported value carries its configuration in the report metadata.

use ndarray::{s, Array2, Array3, ArrayView1, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::autodiff::{NodeId, Tape};
use crate::dataio::{compute_norm_stats, NormStats, SequenceBatch};
use crate::denoiser::gru_direction;
use crate::error::{Error, Result};
use crate::training::Adam;

/// Knobs for the seeded/trained metrics. Defaults are sized for desk-scale
/// datasets (thousands of sequences).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Random real-synth pairings for DTW.
    pub dtw_pairs: usize,
    /// Seeds for the classifier-based metrics (the mean is reported).
    pub seeds: usize,
    pub classifier_hidden: usize,
    pub classifier_epochs: usize,
    pub classifier_batch: usize,
    pub classifier_lr: f64,
    /// Base seed; every seeded sub-procedure derives from it.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            dtw_pairs: 200,
            seeds: 5,
            classifier_hidden: 16,
            classifier_epochs: 8,
            classifier_batch: 64,
            classifier_lr: 0.01,
            seed: 0,
        }
    }
}

// --- Numerical fidelity -------------------------------------------------------

/// One feature's sequences as f64 rows [n, L].
fn feature_matrix(data: &ArrayView3<f32>, f: usize) -> Array2<f64> {
    let (n, l, _) = data.dim();
    Array2::from_shape_fn((n, l), |(i, t)| f64::from(data[[i, t, f]]))
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Median pairwise Euclidean distance over the pooled rows (the RBF
/// bandwidth heuristic). Zero medians (heavily duplicated data) fall back
/// to a tiny positive constant so the kernel stays defined.
fn median_pairwise(pooled: &Array2<f64>) -> f64 {
    let n = pooled.nrows();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            dists.push(sq_dist(pooled.row(i), pooled.row(j)).sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    let mid = dists.len() / 2;
    let (_, median, _) = dists.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    let m = *median;
    if m > 0.0 {
        m
    } else {
        1e-12
    }
}

/// Biased (V-statistic) squared MMD between two row sets under an RBF
/// kernel k(a,b) = exp(-|a-b|^2 / (2 bandwidth^2)).
pub fn mmd_feature_sq(real: &Array2<f64>, synth: &Array2<f64>, bandwidth: f64) -> f64 {
    let gamma = 1.0 / (2.0 * bandwidth * bandwidth);
    let mean_kernel = |a: &Array2<f64>, b: &Array2<f64>| -> f64 {
        let mut acc = 0.0;
        for i in 0..a.nrows() {
            for j in 0..b.nrows() {
                acc += (-gamma * sq_dist(a.row(i), b.row(j))).exp();
            }
        }
        acc / (a.nrows() * b.nrows()) as f64
    };
    mean_kernel(real, real) + mean_kernel(synth, synth) - 2.0 * mean_kernel(real, synth)
}

/// RBF MMD between the real and synthetic numerical channels: squared MMD
/// per feature with the median-heuristic bandwidth on the pooled sample,
/// averaged over features, square root reported. Returns the value and the
/// per-feature bandwidths.
pub fn mmd(real: &ArrayView3<f32>, synth: &ArrayView3<f32>) -> Result<(f64, Vec<f64>)> {
    if real.dim().0 < 2 || synth.dim().0 < 2 {
        return Err(Error::argument("mmd needs at least 2 samples per side"));
    }
    if real.dim().1 != synth.dim().1 || real.dim().2 != synth.dim().2 {
        return Err(Error::argument(format!(
            "mmd shape mismatch: real {:?}, synth {:?}",
            real.dim(),
            synth.dim()
        )));
    }
    let features = real.dim().2;
    let mut bandwidths = Vec::with_capacity(features);
    let mut total = 0.0;
    for f in 0..features {
        let r = feature_matrix(real, f);
        let s = feature_matrix(synth, f);
        let pooled = ndarray::concatenate(Axis(0), &[r.view(), s.view()])
            .expect("matching widths");
        let bw = median_pairwise(&pooled);
        total += mmd_feature_sq(&r, &s, bw);
        bandwidths.push(bw);
    }
    if features == 0 {
        return Ok((0.0, bandwidths));
    }
    Ok(((total / features as f64).max(0.0).sqrt(), bandwidths))
}

/// Pearson correlation matrix of pooled observations [N, F]. Returns the
/// matrix and a per-feature zero-variance flag (those rows/cols are NaN).
fn correlation_matrix(pooled: &Array2<f64>) -> (Array2<f64>, Vec<bool>) {
    let (n, f) = pooled.dim();
    let means: Vec<f64> = (0..f).map(|j| pooled.column(j).sum() / n as f64).collect();
    let mut centered = pooled.clone();
    for j in 0..f {
        centered.column_mut(j).mapv_inplace(|v| v - means[j]);
    }
    let stds: Vec<f64> = (0..f)
        .map(|j| centered.column(j).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let degenerate: Vec<bool> = stds.iter().map(|&s| s == 0.0).collect();
    let mut corr = Array2::from_elem((f, f), f64::NAN);
    for i in 0..f {
        for j in 0..f {
            if !degenerate[i] && !degenerate[j] {
                let dot: f64 = centered
                    .column(i)
                    .iter()
                    .zip(centered.column(j).iter())
                    .map(|(&a, &b)| a * b)
                    .sum();
                corr[[i, j]] = dot / (stds[i] * stds[j]);
            }
        }
    }
    (corr, degenerate)
}

/// Mean absolute error between the two sides' pooled Pearson correlation
/// matrices over the strict upper triangle. Pairs touching a zero-variance
/// feature on either side are skipped; the skip count is returned.
pub fn corr_mae(real: &ArrayView3<f32>, synth: &ArrayView3<f32>) -> Result<(f64, usize)> {
    let features = real.dim().2;
    if features < 2 {
        return Err(Error::argument(
            "corr_mae needs at least 2 numerical features",
        ));
    }
    let pool = |data: &ArrayView3<f32>| -> Array2<f64> {
        let (n, l, f) = data.dim();
        let mut out = Array2::zeros((n * l, f));
        for i in 0..n {
            for t in 0..l {
                for j in 0..f {
                    out[[i * l + t, j]] = f64::from(data[[i, t, j]]);
                }
            }
        }
        out
    };
    let (corr_r, bad_r) = correlation_matrix(&pool(real));
    let (corr_s, bad_s) = correlation_matrix(&pool(synth));
    let mut total = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for i in 0..features {
        for j in (i + 1)..features {
            if bad_r[i] || bad_r[j] || bad_s[i] || bad_s[j] {
                skipped += 1;
            } else {
                total += (corr_r[[i, j]] - corr_s[[i, j]]).abs();
                used += 1;
            }
        }
    }
    if used == 0 {
        return Ok((0.0, skipped));
    }
    Ok((total / used as f64, skipped))
}

/// Sample autocorrelation of one sequence at lags 1..=max_lag, or None for
/// a constant sequence (undefined normalization).
fn sample_acf(x: &[f64], max_lag: usize) -> Option<Vec<f64>> {
    let l = x.len();
    let mean = x.iter().sum::<f64>() / l as f64;
    let denom: f64 = x.iter().map(|&v| (v - mean) * (v - mean)).sum();
    if denom == 0.0 {
        return None;
    }
    let mut out = Vec::with_capacity(max_lag);
    for k in 1..=max_lag {
        let num: f64 = (0..l - k)
            .map(|t| (x[t] - mean) * (x[t + k] - mean))
            .sum();
        out.push(num / denom);
    }
    Some(out)
}

/// Per-feature mean (over samples) autocorrelation curves [F, max_lag].
/// Constant sequences contribute zeros; their count is returned.
pub fn mean_acf(data: &ArrayView3<f32>, max_lag: usize) -> (Array2<f64>, usize) {
    let (n, l, features) = data.dim();
    let mut curves = Array2::zeros((features, max_lag));
    let mut constant = 0usize;
    for f in 0..features {
        for i in 0..n {
            let x: Vec<f64> = (0..l).map(|t| f64::from(data[[i, t, f]])).collect();
            match sample_acf(&x, max_lag) {
                Some(acf) => {
                    for (k, v) in acf.into_iter().enumerate() {
                        curves[[f, k]] += v;
                    }
                }
                None => constant += 1,
            }
        }
        curves.row_mut(f).mapv_inplace(|v| v / n as f64);
    }
    (curves, constant)
}

/// MSE between the real and synthetic mean-ACF curves at lags
/// 1..=min(10, L-1), averaged over features. Returns the value and the
/// number of constant (zero-contribution) sequences seen across both sides.
pub fn acf_mse(real: &ArrayView3<f32>, synth: &ArrayView3<f32>) -> Result<(f64, usize)> {
    let l = real.dim().1;
    if l < 2 {
        return Err(Error::argument("acf_mse needs sequences longer than 1"));
    }
    let max_lag = 10.min(l - 1);
    let (curve_r, const_r) = mean_acf(real, max_lag);
    let (curve_s, const_s) = mean_acf(synth, max_lag);
    let features = real.dim().2;
    if features == 0 {
        return Ok((0.0, 0));
    }
    let diff = &curve_r - &curve_s;
    let mse = diff.iter().map(|v| v * v).sum::<f64>() / (features * max_lag) as f64;
    Ok((mse, const_r + const_s))
}

/// Dynamic time warping distance with absolute-difference local cost and
/// steps {(1,0),(0,1),(1,1)}.
pub fn dtw_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::argument("dtw requires nonempty sequences"));
    }
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for &av in a {
        cur[0] = f64::INFINITY;
        for (j, &bv) in b.iter().enumerate() {
            let cost = (av - bv).abs();
            cur[j + 1] = cost + prev[j + 1].min(cur[j]).min(prev[j]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

/// Mean DTW over seeded index-aligned pairings: each pair draws a random
/// real index i and compares it with synthetic sequence i mod n_synth.
/// Synthetic samples carry no positional meaning, so aligned indices are a
/// random pairing across generators while a self-comparison pairs each
/// sequence with itself and scores exactly zero.
pub fn dtw(
    real: &ArrayView3<f32>,
    synth: &ArrayView3<f32>,
    pairs: usize,
    seed: u64,
) -> Result<f64> {
    let (n_r, l, features) = real.dim();
    let n_s = synth.dim().0;
    if n_r == 0 || n_s == 0 || l == 0 {
        return Err(Error::argument("dtw requires nonempty data on both sides"));
    }
    if features == 0 || pairs == 0 {
        return Ok(0.0);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..pairs {
        let i = rand::Rng::gen_range(&mut rng, 0..n_r);
        let j = i % n_s;
        for f in 0..features {
            let a: Vec<f64> = (0..l).map(|t| f64::from(real[[i, t, f]])).collect();
            let b: Vec<f64> = (0..l).map(|t| f64::from(synth[[j, t, f]])).collect();
            total += dtw_distance(&a, &b)?;
        }
    }
    Ok(total / (pairs * features) as f64)
}

// --- Categorical fidelity -------------------------------------------------------

/// Mean total variation distance between per-(feature, timestep) marginal
/// category distributions.
pub fn tvd(real: &ArrayView3<u8>, synth: &ArrayView3<u8>, cardinalities: &[usize]) -> f64 {
    let (n_r, l, features) = real.dim();
    let n_s = synth.dim().0;
    if features == 0 || l == 0 || n_r == 0 || n_s == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for (j, &card) in cardinalities.iter().enumerate() {
        for t in 0..l {
            let mut p = vec![0.0; card];
            let mut q = vec![0.0; card];
            for i in 0..n_r {
                p[usize::from(real[[i, t, j]])] += 1.0 / n_r as f64;
            }
            for i in 0..n_s {
                q[usize::from(synth[[i, t, j]])] += 1.0 / n_s as f64;
            }
            total += 0.5
                * p.iter()
                    .zip(q.iter())
                    .map(|(&a, &b)| (a - b).abs())
                    .sum::<f64>();
        }
    }
    total / (features * l) as f64
}

/// Distance between empirical one-step transition structures: per feature,
/// transition matrices pooled over samples and timesteps; rows are compared
/// by total variation and weighted by the real side's occupancy. Rows the
/// real side visits but the synthetic side never does contribute their full
/// occupancy-weighted mass; their count is returned. The real side anchors
/// the occupancy weights, so the metric is not symmetric.
pub fn trans_dist(
    real: &ArrayView3<u8>,
    synth: &ArrayView3<u8>,
    cardinalities: &[usize],
) -> Result<(f64, usize)> {
    let (n_r, l, features) = real.dim();
    let n_s = synth.dim().0;
    if l < 2 {
        return Err(Error::argument(
            "trans_dist needs sequences longer than 1",
        ));
    }
    if features == 0 || n_r == 0 || n_s == 0 {
        return Ok((0.0, 0));
    }
    let mut total = 0.0;
    let mut unobserved = 0usize;
    for (j, &card) in cardinalities.iter().enumerate() {
        let count = |data: &ArrayView3<u8>, n: usize| -> Array2<f64> {
            let mut c = Array2::zeros((card, card));
            for i in 0..n {
                for t in 0..l - 1 {
                    let from = usize::from(data[[i, t, j]]);
                    let to = usize::from(data[[i, t + 1, j]]);
                    c[[from, to]] += 1.0;
                }
            }
            c
        };
        let c_r = count(real, n_r);
        let c_s = count(synth, n_s);
        let total_r: f64 = c_r.sum();
        let mut dist = 0.0;
        for k in 0..card {
            let row_r: f64 = c_r.row(k).sum();
            if row_r == 0.0 {
                continue;
            }
            let occupancy = row_r / total_r;
            let row_s: f64 = c_s.row(k).sum();
            if row_s == 0.0 {
                dist += occupancy;
                unobserved += 1;
                continue;
            }
            let row_tvd = 0.5
                * (0..card)
                    .map(|m| (c_r[[k, m]] / row_r - c_s[[k, m]] / row_s).abs())
                    .sum::<f64>();
            dist += occupancy * row_tvd;
        }
        total += dist;
    }
    Ok((total / features as f64, unobserved))
}

// --- Classifier machinery -------------------------------------------------------

/// Discriminator/classifier family for the trained metrics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Discriminator {
    /// Multinomial logistic regression on flattened sequences.
    Logistic,
    /// Single-direction GRU with a mean-pooled classification head.
    Gru,
}

impl Discriminator {
    pub fn as_str(&self) -> &'static str {
        match self {
            Discriminator::Logistic => "logistic",
            Discriminator::Gru => "gru",
        }
    }
}

/// Encode mixed-type sequences as position-major rows [L*n, F_num + sum C_j]:
/// normalized numerical values followed by one-hot categories.
fn encode_rows(
    num: &ArrayView3<f32>,
    cat: &ArrayView3<u8>,
    cardinalities: &[usize],
    stats: &NormStats,
) -> Array2<f32> {
    let (n, l, m_num) = num.dim();
    let cat_width: usize = cardinalities.iter().sum();
    let mut out = Array2::zeros((l * n, m_num + cat_width));
    for i in 0..n {
        for t in 0..l {
            let row = t * n + i;
            for f in 0..m_num {
                let scale = if stats.std[f] == 0.0 { 0.0 } else { 0.5 / stats.std[f] };
                out[[row, f]] = ((f64::from(num[[i, t, f]]) - stats.mean[f]) * scale) as f32;
            }
            let mut at = m_num;
            for (j, &card) in cardinalities.iter().enumerate() {
                out[[row, at + usize::from(cat[[i, t, j]])]] = 1.0;
                at += card;
            }
        }
    }
    out
}

/// Gather a sample subset out of position-major rows, producing the
/// position-major batch [L*batch, D].
fn gather_positions(rows: &Array2<f32>, seq_len: usize, n: usize, indices: &[usize]) -> Array2<f32> {
    let batch = indices.len();
    let mut out = Array2::zeros((seq_len * batch, rows.ncols()));
    for t in 0..seq_len {
        for (b, &i) in indices.iter().enumerate() {
            out.row_mut(t * batch + b).assign(&rows.row(t * n + i));
        }
    }
    out
}

struct Classifier {
    disc: Discriminator,
    hidden: usize,
    seq_len: usize,
    params: Vec<Array2<f32>>,
}

impl Classifier {
    fn init(
        disc: Discriminator,
        input_dim: usize,
        hidden: usize,
        classes: usize,
        seq_len: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        use crate::scalar::Scalar;
        // U(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization, zero biases.
        let uniform = |rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha12Rng| {
            let bound = 1.0 / (fan_in as f32).sqrt();
            Array2::from_shape_fn((rows, cols), |_| f32::sample_uniform_sym(rng, bound))
        };
        let params = match disc {
            Discriminator::Logistic => vec![
                uniform(seq_len * input_dim, classes, seq_len * input_dim, rng),
                Array2::zeros((1, classes)),
            ],
            Discriminator::Gru => vec![
                uniform(input_dim, 3 * hidden, input_dim, rng),
                uniform(hidden, 2 * hidden, hidden, rng),
                uniform(hidden, hidden, hidden, rng),
                Array2::zeros((1, 3 * hidden)),
                uniform(hidden, classes, hidden, rng),
                Array2::zeros((1, classes)),
            ],
        };
        Classifier {
            disc,
            hidden,
            seq_len,
            params,
        }
    }

    /// Class logits for a position-major input batch on the tape. Returns
    /// (leaf ids, logits id).
    fn logits_on_tape(&self, tape: &mut Tape<f32>, input: &Array2<f32>, batch: usize) -> (Vec<NodeId>, NodeId) {
        let leaves: Vec<NodeId> = self.params.iter().map(|p| tape.leaf(p.clone())).collect();
        let logits = match self.disc {
            Discriminator::Logistic => {
                // Flatten each sample's positions into one row.
                let d = input.ncols();
                let mut flat = Array2::zeros((batch, self.seq_len * d));
                for b in 0..batch {
                    for t in 0..self.seq_len {
                        for c in 0..d {
                            flat[[b, t * d + c]] = input[[t * batch + b, c]];
                        }
                    }
                }
                let x = tape.leaf(flat);
                let xw = tape.matmul(x, leaves[0]);
                tape.add_row(xw, leaves[1])
            }
            Discriminator::Gru => {
                let x = tape.leaf(input.clone());
                let xw = tape.matmul(x, leaves[0]);
                let gates = tape.add_row(xw, leaves[3]);
                let states = gru_direction(
                    tape,
                    gates,
                    leaves[1],
                    leaves[2],
                    self.hidden,
                    self.seq_len,
                    batch,
                    false,
                );
                // Mean-pool the states over time with a constant matrix.
                let mut pool = Array2::zeros((batch, self.seq_len * batch));
                for b in 0..batch {
                    for t in 0..self.seq_len {
                        pool[[b, t * batch + b]] = 1.0 / self.seq_len as f32;
                    }
                }
                let p = tape.leaf(pool);
                let pooled = tape.matmul(p, states);
                let hw = tape.matmul(pooled, leaves[4]);
                tape.add_row(hw, leaves[5])
            }
        };
        (leaves, logits)
    }

    fn scores(&self, rows: &Array2<f32>, n: usize) -> Array2<f32> {
        let all: Vec<usize> = (0..n).collect();
        let input = gather_positions(rows, self.seq_len, n, &all);
        let mut tape = Tape::new();
        let (_, logits) = self.logits_on_tape(&mut tape, &input, n);
        tape.value(logits).clone()
    }
}

/// Train a classifier on position-major rows with per-sample class targets.
fn train_classifier(
    rows: &Array2<f32>,
    labels: &[usize],
    classes: usize,
    seq_len: usize,
    disc: Discriminator,
    config: &EvalConfig,
    seed: u64,
) -> Classifier {
    let n = labels.len();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut model = Classifier::init(disc, rows.ncols(), config.classifier_hidden, classes, seq_len, &mut rng);
    let shapes: Vec<(usize, usize)> = model.params.iter().map(|p| p.dim()).collect();
    let mut adam = Adam::new(&shapes);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..config.classifier_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.classifier_batch) {
            let input = gather_positions(rows, seq_len, n, chunk);
            let targets = Rc::new(chunk.iter().map(|&i| labels[i]).collect::<Vec<_>>());
            let mut tape = Tape::new();
            let (leaves, logits) = model.logits_on_tape(&mut tape, &input, chunk.len());
            let (loss, _) = tape.softmax_xent(logits, &targets);
            tape.backward(loss);
            let grads: Vec<Option<&Array2<f32>>> =
                leaves.iter().map(|&id| tape.grad(id)).collect();
            let mut refs: Vec<&mut Array2<f32>> = model.params.iter_mut().collect();
            adam.update(&mut refs, &grads, config.classifier_lr);
        }
    }
    model
}

/// Area under the ROC curve with midrank tie handling. Labels must contain
/// both classes.
pub fn auc_binary(scores: &[f64], positive: &[bool]) -> Result<f64> {
    assert_eq!(scores.len(), positive.len());
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::argument(
            "AUC is undefined for a single-class sample",
        ));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = positive
        .iter()
        .zip(ranks.iter())
        .filter(|(&p, _)| p)
        .map(|(_, &r)| r)
        .sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Held-out AUC of classifying one-vs-rest class membership: standard AUC
/// for binary labels, macro-averaged one-vs-rest otherwise.
fn classifier_auc(logits: &Array2<f32>, labels: &[usize], classes: usize) -> Result<f64> {
    if classes == 2 {
        let scores: Vec<f64> = (0..labels.len())
            .map(|i| f64::from(logits[[i, 1]] - logits[[i, 0]]))
            .collect();
        let positive: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        return auc_binary(&scores, &positive);
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for k in 0..classes {
        let positive: Vec<bool> = labels.iter().map(|&l| l == k).collect();
        if positive.iter().all(|&p| !p) || positive.iter().all(|&p| p) {
            continue;
        }
        let scores: Vec<f64> = (0..labels.len())
            .map(|i| f64::from(logits[[i, k]]))
            .collect();
        total += auc_binary(&scores, &positive)?;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::argument(
            "AUC is undefined for a single-class sample",
        ));
    }
    Ok(total / counted as f64)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Classifier two-sample test: train to distinguish real from synthetic,
/// report held-out AUC per seed (values near 0.5 mean the sides are hard to
/// tell apart). Returns (mean, std, per-seed AUCs).
#[allow(clippy::too_many_arguments)]
pub fn c2st(
    real_num: &ArrayView3<f32>,
    real_cat: &ArrayView3<u8>,
    synth_num: &ArrayView3<f32>,
    synth_cat: &ArrayView3<u8>,
    cardinalities: &[usize],
    disc: Discriminator,
    config: &EvalConfig,
) -> Result<(f64, f64, Vec<f64>)> {
    let n = real_num.dim().0.min(synth_num.dim().0);
    if n < 4 {
        return Err(Error::argument(
            "c2st needs at least 4 samples per side for a balanced split",
        ));
    }
    let seq_len = real_num.dim().1;
    // Pooled normalization so the discriminator sees both sides on one scale.
    let union = ndarray::concatenate(
        Axis(0),
        &[
            real_num.slice(s![..n, .., ..]),
            synth_num.slice(s![..n, .., ..]),
        ],
    )
    .expect("matching shapes");
    let stats = compute_norm_stats(&union.view());
    let rows_real = encode_rows(real_num, real_cat, cardinalities, &stats);
    let rows_synth = encode_rows(synth_num, synth_cat, cardinalities, &stats);

    let mut aucs = Vec::with_capacity(config.seeds);
    for s in 0..config.seeds {
        let seed = config.seed.wrapping_add(1000 + s as u64);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut idx_r: Vec<usize> = (0..n).collect();
        let mut idx_s: Vec<usize> = (0..n).collect();
        idx_r.shuffle(&mut rng);
        idx_s.shuffle(&mut rng);
        let half = n / 2;

        // Assemble position-major train/test sets with real=1, synth=0.
        let assemble = |r_idx: &[usize], s_idx: &[usize]| {
            let m = r_idx.len() + s_idx.len();
            let d = rows_real.ncols();
            let mut rows = Array2::zeros((seq_len * m, d));
            let mut labels = Vec::with_capacity(m);
            for t in 0..seq_len {
                for (b, &i) in r_idx.iter().enumerate() {
                    rows.row_mut(t * m + b)
                        .assign(&rows_real.row(t * real_num.dim().0 + i));
                }
                for (b, &i) in s_idx.iter().enumerate() {
                    rows.row_mut(t * m + r_idx.len() + b)
                        .assign(&rows_synth.row(t * synth_num.dim().0 + i));
                }
            }
            labels.extend(std::iter::repeat_n(1usize, r_idx.len()));
            labels.extend(std::iter::repeat_n(0usize, s_idx.len()));
            (rows, labels)
        };
        let (train_rows, train_labels) = assemble(&idx_r[..half], &idx_s[..half]);
        let (test_rows, test_labels) = assemble(&idx_r[half..], &idx_s[half..]);
        let model = train_classifier(&train_rows, &train_labels, 2, seq_len, disc, config, seed);
        let logits = model.scores(&test_rows, test_labels.len());
        aucs.push(classifier_auc(&logits, &test_labels, 2)?);
    }
    let (mean, std) = mean_std(&aucs);
    Ok((mean, std, aucs))
}

/// Train-on-X, test-on-real downstream utility: fit the GRU classifier on
/// the training side's labels and report held-out real AUC per seed.
#[allow(clippy::too_many_arguments)]
pub fn tstr(
    train_num: &ArrayView3<f32>,
    train_cat: &ArrayView3<u8>,
    train_labels: &ArrayView1<u8>,
    test_num: &ArrayView3<f32>,
    test_cat: &ArrayView3<u8>,
    test_labels: &ArrayView1<u8>,
    cardinalities: &[usize],
    label_cardinality: usize,
    config: &EvalConfig,
) -> Result<(f64, f64, Vec<f64>)> {
    let classes = label_cardinality;
    let first = train_labels.first().copied();
    if train_labels.is_empty() || train_labels.iter().all(|&l| Some(l) == first) {
        return Err(Error::argument(
            "classifier training needs at least two label classes",
        ));
    }
    let seq_len = train_num.dim().1;
    let stats = compute_norm_stats(train_num);
    let rows_train = encode_rows(train_num, train_cat, cardinalities, &stats);
    let rows_test = encode_rows(test_num, test_cat, cardinalities, &stats);
    let train_targets: Vec<usize> = train_labels.iter().map(|&l| usize::from(l)).collect();
    let test_targets: Vec<usize> = test_labels.iter().map(|&l| usize::from(l)).collect();

    let mut aucs = Vec::with_capacity(config.seeds);
    for s in 0..config.seeds {
        let seed = config.seed.wrapping_add(2000 + s as u64);
        let model = train_classifier(
            &rows_train,
            &train_targets,
            classes,
            seq_len,
            Discriminator::Gru,
            config,
            seed,
        );
        let logits = model.scores(&rows_test, test_targets.len());
        aucs.push(classifier_auc(&logits, &test_targets, classes)?);
    }
    let (mean, std) = mean_std(&aucs);
    Ok((mean, std, aucs))
}

// --- Report --------------------------------------------------------------------

/// A metric value plus the configuration that produced it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricEntry {
    pub value: f64,
    pub metadata: Map<String, Value>,
}

/// Shape summary and content digest of one dataset side.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetFingerprint {
    pub n: usize,
    pub seq_len: usize,
    pub num_features: usize,
    pub cat_features: usize,
    pub digest: String,
}

impl DatasetFingerprint {
    pub fn of(batch: &SequenceBatch) -> Self {
        let mut hasher = Sha256::new();
        for &v in batch.numerical.iter() {
            hasher.update(v.to_le_bytes());
        }
        hasher.update(batch.categorical.as_slice().unwrap_or(&[]));
        hasher.update(batch.labels.as_slice().unwrap_or(&[]));
        let digest = hasher
            .finalize()
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect::<String>();
        DatasetFingerprint {
            n: batch.n(),
            seq_len: batch.seq_len(),
            num_features: batch.numerical.dim().2,
            cat_features: batch.categorical.dim().2,
            digest,
        }
    }
}

/// The full evaluation outcome: one entry per metric, each with its
/// configuration, plus fingerprints of both inputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub real: DatasetFingerprint,
    pub synth: DatasetFingerprint,
    pub metrics: BTreeMap<String, MetricEntry>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Range invariants: probabilities in [0,1] for TVD and every AUC.
    pub fn validate(&self) -> Result<()> {
        for (name, entry) in &self.metrics {
            let bounded = name == "tvd" || name.starts_with("c2st") || name == "tstr" || name == "trtr";
            if bounded && !(0.0..=1.0).contains(&entry.value) {
                return Err(Error::numeric(format!(
                    "metric '{name}' = {} outside [0,1]",
                    entry.value
                )));
            }
            if !entry.value.is_finite() {
                return Err(Error::numeric(format!("metric '{name}' is not finite")));
            }
        }
        Ok(())
    }
}

fn seed_meta(values: &[f64], std: f64, extra: &[(&str, Value)]) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("seeds".into(), json!(values.len()));
    m.insert("per_seed".into(), json!(values));
    m.insert("std".into(), json!(std));
    for (k, v) in extra {
        m.insert((*k).into(), v.clone());
    }
    m
}

/// Names `evaluate` can compute, in report order.
pub const METRIC_NAMES: [&str; 10] = [
    "acf_mse",
    "c2st_gru",
    "c2st_logistic",
    "corr_mae",
    "dtw",
    "mmd",
    "trans_dist",
    "trtr",
    "tstr",
    "tvd",
];

/// Run the battery. With `only = None` every applicable metric is computed
/// and metrics whose preconditions the data cannot meet (single numerical
/// feature, length-1 sequences, no categorical features) are skipped; an
/// explicit selection turns an inapplicable metric into an argument error.
pub fn evaluate(
    real: &SequenceBatch,
    synth: &SequenceBatch,
    cardinalities: &[usize],
    label_cardinality: usize,
    config: &EvalConfig,
    only: Option<&[String]>,
) -> Result<EvalReport> {
    if let Some(selected) = only {
        for name in selected {
            if !METRIC_NAMES.contains(&name.as_str()) {
                return Err(Error::argument(format!(
                    "unknown metric '{name}' (available: {})",
                    METRIC_NAMES.join(", ")
                )));
            }
        }
    }
    let want = |name: &str| only.is_none_or(|s| s.iter().any(|m| m == name));
    let explicit = |name: &str| only.is_some_and(|s| s.iter().any(|m| m == name));
    if real.seq_len() != synth.seq_len()
        || real.numerical.dim().2 != synth.numerical.dim().2
        || real.categorical.dim().2 != synth.categorical.dim().2
    {
        return Err(Error::argument(format!(
            "real and synthetic shapes disagree: {:?} vs {:?}",
            real.numerical.dim(),
            synth.numerical.dim()
        )));
    }
    let mut metrics = BTreeMap::new();
    let rn = real.numerical.view();
    let sn = synth.numerical.view();
    let rc = real.categorical.view();
    let sc = synth.categorical.view();

    if want("mmd") {
        let (mmd_value, bandwidths) = mmd(&rn, &sn)?;
        metrics.insert(
            "mmd".to_string(),
            MetricEntry {
                value: mmd_value,
                metadata: Map::from_iter([
                    ("kernel".to_string(), json!("rbf")),
                    ("bandwidth".to_string(), json!("median pairwise, pooled")),
                    ("per_feature_bandwidth".to_string(), json!(bandwidths)),
                    ("estimator".to_string(), json!("biased V-statistic")),
                    (
                        "aggregation".to_string(),
                        json!("sqrt of feature-mean squared MMD"),
                    ),
                ]),
            },
        );
    }

    if want("corr_mae") && (real.numerical.dim().2 >= 2 || explicit("corr_mae")) {
        let (value, skipped) = corr_mae(&rn, &sn)?;
        metrics.insert(
            "corr_mae".to_string(),
            MetricEntry {
                value,
                metadata: Map::from_iter([
                    ("pairs".to_string(), json!("strict upper triangle, pooled Pearson")),
                    ("skipped_zero_variance_pairs".to_string(), json!(skipped)),
                ]),
            },
        );
    }

    if want("acf_mse") && (real.seq_len() > 1 || explicit("acf_mse")) {
        let (value, constant) = acf_mse(&rn, &sn)?;
        metrics.insert(
            "acf_mse".to_string(),
            MetricEntry {
                value,
                metadata: Map::from_iter([
                    ("max_lag".to_string(), json!(10.min(real.seq_len() - 1))),
                    ("constant_sequences".to_string(), json!(constant)),
                ]),
            },
        );
    }

    if want("dtw") {
        let dtw_value = dtw(&rn, &sn, config.dtw_pairs, config.seed.wrapping_add(77))?;
        metrics.insert(
            "dtw".to_string(),
            MetricEntry {
                value: dtw_value,
                metadata: Map::from_iter([
                    ("pairs".to_string(), json!(config.dtw_pairs)),
                    ("pairing".to_string(), json!("seeded, index-aligned")),
                    ("cost".to_string(), json!("absolute difference")),
                ]),
            },
        );
    }

    if want("tvd") && !cardinalities.is_empty() {
        let value = tvd(&rc, &sc, cardinalities);
        metrics.insert(
            "tvd".to_string(),
            MetricEntry {
                value,
                metadata: Map::from_iter([(
                    "pooling".to_string(),
                    json!("mean over features and timesteps"),
                )]),
            },
        );
    }
    if want("trans_dist")
        && (!cardinalities.is_empty() && real.seq_len() > 1 || explicit("trans_dist"))
    {
        let (value, unobserved) = trans_dist(&rc, &sc, cardinalities)?;
        metrics.insert(
            "trans_dist".to_string(),
            MetricEntry {
                value,
                metadata: Map::from_iter([
                    ("weighting".to_string(), json!("real-side occupancy (asymmetric)")),
                    ("unobserved_rows".to_string(), json!(unobserved)),
                ]),
            },
        );
    }

    for disc in [Discriminator::Logistic, Discriminator::Gru] {
        if !want(&format!("c2st_{}", disc.as_str())) {
            continue;
        }
        let (mean, std, per_seed) = c2st(&rn, &rc, &sn, &sc, cardinalities, disc, config)?;
        metrics.insert(
            format!("c2st_{}", disc.as_str()),
            MetricEntry {
                value: mean,
                metadata: seed_meta(
                    &per_seed,
                    std,
                    &[("discriminator", json!(disc.as_str()))],
                ),
            },
        );
    }

    // Downstream utility: split real per seed into train/test halves; TRTR
    // trains on the real half, TSTR on the same number of synthetic samples,
    // both tested on the held-out real half.
    let n_real = real.n();
    if (want("tstr") || want("trtr"))
        && (n_real >= 4 || explicit("tstr") || explicit("trtr"))
    {
        if n_real < 4 {
            return Err(Error::argument(
                "downstream utility needs at least 4 real samples",
            ));
        }
        let mut tstr_aucs = Vec::with_capacity(config.seeds);
        let mut trtr_aucs = Vec::with_capacity(config.seeds);
        for s in 0..config.seeds {
            let seed = config.seed.wrapping_add(3000 + s as u64);
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let mut idx: Vec<usize> = (0..n_real).collect();
            idx.shuffle(&mut rng);
            let half = n_real / 2;
            let take = |src: &SequenceBatch, ids: &[usize]| -> SequenceBatch {
                let mut numerical = Array3::zeros((ids.len(), src.seq_len(), src.numerical.dim().2));
                let mut categorical = Array3::zeros((ids.len(), src.seq_len(), src.categorical.dim().2));
                let mut labels = ndarray::Array1::zeros(ids.len());
                for (b, &i) in ids.iter().enumerate() {
                    numerical.slice_mut(s![b, .., ..]).assign(&src.numerical.slice(s![i, .., ..]));
                    categorical.slice_mut(s![b, .., ..]).assign(&src.categorical.slice(s![i, .., ..]));
                    labels[b] = src.labels[i];
                }
                SequenceBatch { numerical, categorical, labels }
            };
            let train_real = take(real, &idx[..half]);
            let test_real = take(real, &idx[half..]);
            let n_synth = synth.n().min(half);
            let synth_ids: Vec<usize> = (0..n_synth).collect();
            let train_synth = take(synth, &synth_ids);

            let mut one = EvalConfig { seeds: 1, ..config.clone() };
            one.seed = seed;
            let (trtr_auc, _, _) = tstr(
                &train_real.numerical.view(),
                &train_real.categorical.view(),
                &train_real.labels.view(),
                &test_real.numerical.view(),
                &test_real.categorical.view(),
                &test_real.labels.view(),
                cardinalities,
                label_cardinality,
                &one,
            )?;
            let (tstr_auc, _, _) = tstr(
                &train_synth.numerical.view(),
                &train_synth.categorical.view(),
                &train_synth.labels.view(),
                &test_real.numerical.view(),
                &test_real.categorical.view(),
                &test_real.labels.view(),
                cardinalities,
                label_cardinality,
                &one,
            )?;
            trtr_aucs.push(trtr_auc);
            tstr_aucs.push(tstr_auc);
        }
        let (trtr_mean, trtr_std) = mean_std(&trtr_aucs);
        let (tstr_mean, tstr_std) = mean_std(&tstr_aucs);
        if want("trtr") {
            metrics.insert(
                "trtr".to_string(),
                MetricEntry {
                    value: trtr_mean,
                    metadata: seed_meta(&trtr_aucs, trtr_std, &[("classifier", json!("gru"))]),
                },
            );
        }
        if want("tstr") {
            metrics.insert(
                "tstr".to_string(),
                MetricEntry {
                    value: tstr_mean,
                    metadata: seed_meta(&tstr_aucs, tstr_std, &[("classifier", json!("gru"))]),
                },
            );
        }
    }

    let report = EvalReport {
        real: DatasetFingerprint::of(real),
        synth: DatasetFingerprint::of(synth),
        metrics,
    };
    report.validate()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::gen_toy;
    use ndarray::{array, Array1};
    use rand::Rng;

    fn toy(n: usize, l: usize, seed: u64) -> SequenceBatch {
        gen_toy(n, l, seed).1
    }

    #[test]
    fn mmd_is_zero_on_identical_sets_and_matches_the_singleton_formula() {
        let data = toy(20, 6, 1);
        let (value, _) = mmd(&data.numerical.view(), &data.numerical.view()).unwrap();
        assert_eq!(value, 0.0);

        let x = array![[0.0, 1.0, 2.0]];
        let y = array![[1.0, 1.0, 0.0]];
        let d2 = 1.0 + 0.0 + 4.0;
        let want = 2.0 - 2.0 * (-d2 / 2.0f64).exp();
        assert!((mmd_feature_sq(&x, &y, 1.0) - want).abs() < 1e-12);
        assert_eq!(mmd_feature_sq(&x, &x, 1.0), 0.0);
    }

    #[test]
    fn mmd_rejects_undersized_sides() {
        let data = toy(8, 4, 2);
        let single = data.numerical.slice(s![..1, .., ..]);
        let err = mmd(&single, &data.numerical.view()).unwrap_err();
        assert_eq!(err.kind(), "usage");
    }

    #[test]
    fn mmd_detects_a_shift() {
        let a = toy(60, 6, 3).numerical;
        let mut b = toy(60, 6, 4).numerical;
        let (near, _) = mmd(&a.view(), &b.view()).unwrap();
        b.mapv_inplace(|v| v + 10.0);
        let (far, _) = mmd(&a.view(), &b.view()).unwrap();
        assert!(far > near + 0.5, "near {near}, far {far}");
    }

    fn correlated_pair(n: usize, l: usize, seed: u64, rho: f64) -> Array3<f32> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut out = Array3::zeros((n, l, 2));
        for i in 0..n {
            for t in 0..l {
                let u: f64 = rng.sample(rand_distr::StandardNormal);
                let v: f64 = rng.sample(rand_distr::StandardNormal);
                out[[i, t, 0]] = u as f32;
                out[[i, t, 1]] = (rho * u + (1.0 - rho * rho).sqrt() * v) as f32;
            }
        }
        out
    }

    #[test]
    fn corr_mae_identity_sign_flip_and_extremes() {
        let a = correlated_pair(200, 4, 5, 0.6);
        let (zero, skipped) = corr_mae(&a.view(), &a.view()).unwrap();
        assert_eq!(zero, 0.0);
        assert_eq!(skipped, 0);

        // Flipping one synthetic feature turns correlation r into -r.
        let pooled = Array2::from_shape_fn((200 * 4, 2), |(k, j)| {
            f64::from(a[[k / 4, k % 4, j]])
        });
        let (corr, _) = correlation_matrix(&pooled);
        let r = corr[[0, 1]];
        let mut flipped = a.clone();
        flipped.slice_mut(s![.., .., 1]).mapv_inplace(|v| -v);
        let (mae, _) = corr_mae(&a.view(), &flipped.view()).unwrap();
        assert!((mae - 2.0 * r.abs()).abs() < 1e-9, "mae {mae}, r {r}");

        // Independent vs perfectly correlated: MAE near 1.
        let indep = correlated_pair(400, 4, 6, 0.0);
        let perfect = correlated_pair(400, 4, 7, 1.0);
        let (mae, _) = corr_mae(&indep.view(), &perfect.view()).unwrap();
        assert!((mae - 1.0).abs() < 0.1, "mae {mae}");
    }

    #[test]
    fn corr_mae_skips_constant_features_and_needs_two() {
        let a = correlated_pair(50, 4, 8, 0.3);
        let mut degenerate = a.clone();
        degenerate.slice_mut(s![.., .., 0]).fill(2.5);
        let (value, skipped) = corr_mae(&a.view(), &degenerate.view()).unwrap();
        assert_eq!(value, 0.0);
        assert_eq!(skipped, 1);

        let single = a.slice(s![.., .., ..1]);
        assert_eq!(
            corr_mae(&single, &single).unwrap_err().kind(),
            "usage"
        );
    }

    #[test]
    fn acf_identity_and_ar1_oracle() {
        let data = toy(30, 8, 9);
        let (zero, _) = acf_mse(&data.numerical.view(), &data.numerical.view()).unwrap();
        assert_eq!(zero, 0.0);

        // AR(1) with coefficient 0.8: lag-1 autocorrelation of long samples
        // concentrates at 0.8.
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let n = 8;
        let l = 10_000;
        let mut ar = Array3::zeros((n, l, 1));
        for i in 0..n {
            let mut x = 0.0f64;
            for t in 0..l {
                let e: f64 = rng.sample(rand_distr::StandardNormal);
                x = 0.8 * x + e;
                ar[[i, t, 0]] = x as f32;
            }
        }
        let (curves, constant) = mean_acf(&ar.view(), 3);
        assert_eq!(constant, 0);
        assert!(
            (curves[[0, 0]] - 0.8).abs() < 0.02,
            "lag-1 acf {}",
            curves[[0, 0]]
        );

        let err = acf_mse(
            &data.numerical.slice(s![.., ..1, ..]),
            &data.numerical.slice(s![.., ..1, ..]),
        )
        .unwrap_err();
        assert_eq!(err.kind(), "usage");
    }

    #[test]
    fn acf_counts_constant_sequences() {
        let mut a = toy(10, 6, 11).numerical;
        a.slice_mut(s![0, .., 0]).fill(1.0);
        let (_, constant) = acf_mse(&a.view(), &a.view()).unwrap();
        assert_eq!(constant, 2);
    }

    #[test]
    fn dtw_identities_and_constant_sequences() {
        assert_eq!(dtw_distance(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        // Constant sequences: every cell costs |a-b|; the diagonal path has
        // L steps.
        let a = vec![2.0; 7];
        let b = vec![-1.5; 7];
        assert!((dtw_distance(&a, &b).unwrap() - 7.0 * 3.5).abs() < 1e-12);

        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let x: Vec<f64> = (0..9).map(|_| rng.gen::<f64>()).collect();
        let y: Vec<f64> = (0..9).map(|_| rng.gen::<f64>()).collect();
        let fwd = dtw_distance(&x, &y).unwrap();
        let rev = dtw_distance(&y, &x).unwrap();
        assert!((fwd - rev).abs() < 1e-12);
        // Never worse than the straight diagonal alignment.
        let diagonal: f64 = x.iter().zip(y.iter()).map(|(a, b)| (a - b).abs()).sum();
        assert!(fwd <= diagonal + 1e-12);

        assert_eq!(dtw_distance(&[], &[1.0]).unwrap_err().kind(), "usage");
    }

    #[test]
    fn dtw_over_pairs_is_deterministic() {
        let a = toy(12, 5, 13).numerical;
        let b = toy(12, 5, 14).numerical;
        let d1 = dtw(&a.view(), &b.view(), 20, 99).unwrap();
        let d2 = dtw(&a.view(), &b.view(), 20, 99).unwrap();
        assert_eq!(d1, d2);
        // Self-comparison pairs every drawn sequence with itself.
        assert_eq!(dtw(&a.view(), &a.view(), 20, 99).unwrap(), 0.0);
    }

    #[test]
    fn tvd_identity_disjoint_and_hand_value() {
        let data = toy(16, 4, 15);
        assert_eq!(
            tvd(&data.categorical.view(), &data.categorical.view(), &[3, 2]),
            0.0
        );

        // Disjoint supports: all real in category 0, all synth in 1.
        let real = Array3::<u8>::zeros((10, 3, 1));
        let synth = Array3::<u8>::ones((10, 3, 1));
        assert!((tvd(&real.view(), &synth.view(), &[2]) - 1.0).abs() < 1e-12);

        // p = (0.6, 0.4) vs q = (0.5, 0.5) at a single position.
        let mut real = Array3::<u8>::zeros((10, 1, 1));
        for i in 6..10 {
            real[[i, 0, 0]] = 1;
        }
        let mut synth = Array3::<u8>::zeros((10, 1, 1));
        for i in 5..10 {
            synth[[i, 0, 0]] = 1;
        }
        let value = tvd(&real.view(), &synth.view(), &[2]);
        assert!((value - 0.1).abs() < 1e-12);
    }

    #[test]
    fn trans_dist_identity_and_stay_vs_switch() {
        let data = toy(16, 6, 16);
        let (zero, unobserved) =
            trans_dist(&data.categorical.view(), &data.categorical.view(), &[3, 2]).unwrap();
        assert_eq!(zero, 0.0);
        assert_eq!(unobserved, 0);

        // Deterministic stay-chain vs deterministic switch-chain.
        let l = 6;
        let mut stay = Array3::<u8>::zeros((4, l, 1));
        for i in 0..4 {
            let state = (i % 2) as u8;
            for t in 0..l {
                stay[[i, t, 0]] = state;
            }
        }
        let mut switch = Array3::<u8>::zeros((4, l, 1));
        for i in 0..4 {
            for t in 0..l {
                switch[[i, t, 0]] = ((i + t) % 2) as u8;
            }
        }
        let (dist, _) = trans_dist(&stay.view(), &switch.view(), &[2]).unwrap();
        assert!((dist - 1.0).abs() < 1e-12);

        let err = trans_dist(
            &stay.slice(s![.., ..1, ..]),
            &switch.slice(s![.., ..1, ..]),
            &[2],
        )
        .unwrap_err();
        assert_eq!(err.kind(), "usage");
    }

    #[test]
    fn trans_dist_charges_unobserved_rows() {
        // Real visits both states; synth stays in state 0 forever, so the
        // row for state 1 is unobserved on the synthetic side.
        let mut real = Array3::<u8>::zeros((2, 4, 1));
        for t in 0..4 {
            real[[1, t, 0]] = 1;
        }
        let synth = Array3::<u8>::zeros((2, 4, 1));
        let (dist, unobserved) = trans_dist(&real.view(), &synth.view(), &[2]).unwrap();
        assert_eq!(unobserved, 1);
        // Half the real transitions start from state 1, whose full mass is
        // charged; the state-0 rows agree exactly.
        assert!((dist - 0.5).abs() < 1e-12);
    }

    #[test]
    fn auc_handles_perfect_ties_and_inversion() {
        let perfect = auc_binary(&[0.9, 0.8, 0.3, 0.2], &[true, true, false, false]).unwrap();
        assert_eq!(perfect, 1.0);
        let tied = auc_binary(&[0.5, 0.5, 0.5, 0.5], &[true, false, true, false]).unwrap();
        assert_eq!(tied, 0.5);
        let scores = [0.1, 0.4, 0.35, 0.8];
        let labels = [false, true, false, true];
        let a = auc_binary(&scores, &labels).unwrap();
        let inverted: Vec<f64> = scores.iter().map(|s| -s).collect();
        let b = auc_binary(&inverted, &labels).unwrap();
        assert!((a + b - 1.0).abs() < 1e-12);
        assert_eq!(
            auc_binary(&[0.1, 0.2], &[true, true]).unwrap_err().kind(),
            "usage"
        );
    }

    fn quick_config(seed: u64) -> EvalConfig {
        EvalConfig {
            dtw_pairs: 10,
            seeds: 3,
            classifier_hidden: 8,
            classifier_epochs: 6,
            classifier_batch: 32,
            classifier_lr: 0.01,
            seed,
        }
    }

    #[test]
    fn c2st_near_half_on_same_generator_and_separates_a_shift() {
        let a = toy(300, 8, 21);
        let b = toy(300, 8, 22);
        let cfg = quick_config(31);
        let (same, _, per_seed) = c2st(
            &a.numerical.view(),
            &a.categorical.view(),
            &b.numerical.view(),
            &b.categorical.view(),
            &[3, 2],
            Discriminator::Logistic,
            &cfg,
        )
        .unwrap();
        assert_eq!(per_seed.len(), 3);
        assert!((same - 0.5).abs() < 0.05, "same-generator AUC {same}");

        let mut shifted = b.clone();
        // +10 standard deviations on every numerical feature.
        let stats = compute_norm_stats(&b.numerical.view());
        for f in 0..3 {
            let delta = (10.0 * stats.std[f]) as f32;
            shifted
                .numerical
                .slice_mut(s![.., .., f])
                .mapv_inplace(|v| v + delta);
        }
        let (apart, _, _) = c2st(
            &a.numerical.view(),
            &a.categorical.view(),
            &shifted.numerical.view(),
            &shifted.categorical.view(),
            &[3, 2],
            Discriminator::Logistic,
            &cfg,
        )
        .unwrap();
        assert!(apart > 0.99, "shifted AUC {apart}");
    }

    #[test]
    fn c2st_rejects_degenerate_splits() {
        let a = toy(3, 4, 23);
        let err = c2st(
            &a.numerical.view(),
            &a.categorical.view(),
            &a.numerical.view(),
            &a.categorical.view(),
            &[3, 2],
            Discriminator::Logistic,
            &quick_config(1),
        )
        .unwrap_err();
        assert_eq!(err.kind(), "usage");
    }

    #[test]
    fn trtr_separates_the_toy_labels_and_shuffling_destroys_the_signal() {
        let train = toy(300, 10, 24);
        let test = toy(200, 10, 25);
        let cfg = quick_config(41);
        let (auc, _, _) = tstr(
            &train.numerical.view(),
            &train.categorical.view(),
            &train.labels.view(),
            &test.numerical.view(),
            &test.categorical.view(),
            &test.labels.view(),
            &[3, 2],
            2,
            &cfg,
        )
        .unwrap();
        assert!(auc > 0.99, "separable TRTR AUC {auc}");

        // Independently reshuffled labels per repetition: the mean AUC
        // settles at chance level.
        let big_train = toy(400, 10, 44);
        let big_test = toy(400, 10, 45);
        let mut total = 0.0;
        let reps = 5;
        for rep in 0..reps {
            let mut rng = ChaCha12Rng::seed_from_u64(4 + rep);
            let mut shuffled: Vec<u8> = big_train.labels.to_vec();
            shuffled.shuffle(&mut rng);
            let shuffled = Array1::from_vec(shuffled);
            let one = EvalConfig { seeds: 1, seed: 50 + rep, ..cfg.clone() };
            let (noise, _, _) = tstr(
                &big_train.numerical.view(),
                &big_train.categorical.view(),
                &shuffled.view(),
                &big_test.numerical.view(),
                &big_test.categorical.view(),
                &big_test.labels.view(),
                &[3, 2],
                2,
                &one,
            )
            .unwrap();
            total += noise;
        }
        let mean = total / reps as f64;
        assert!((mean - 0.5).abs() < 0.05, "shuffled-label AUC {mean}");
    }

    #[test]
    fn tstr_rejects_single_class_training_labels() {
        let mut train = toy(40, 6, 26);
        train.labels.fill(0);
        let test = toy(20, 6, 27);
        let err = tstr(
            &train.numerical.view(),
            &train.categorical.view(),
            &train.labels.view(),
            &test.numerical.view(),
            &test.categorical.view(),
            &test.labels.view(),
            &[3, 2],
            2,
            &quick_config(1),
        )
        .unwrap_err();
        assert_eq!(err.kind(), "usage");
    }

    #[test]
    fn full_report_is_deterministic_and_serializable() {
        let real = toy(60, 6, 28);
        let synth = toy(60, 6, 29);
        let cfg = EvalConfig {
            dtw_pairs: 10,
            seeds: 2,
            classifier_hidden: 8,
            classifier_epochs: 3,
            classifier_batch: 32,
            classifier_lr: 0.01,
            seed: 5,
        };
        let r1 = evaluate(&real, &synth, &[3, 2], 2, &cfg, None).unwrap();
        let r2 = evaluate(&real, &synth, &[3, 2], 2, &cfg, None).unwrap();
        assert_eq!(r1.to_json(), r2.to_json());
        for key in METRIC_NAMES {
            assert!(r1.metrics.contains_key(key), "missing metric {key}");
        }
        r1.validate().unwrap();
        assert_ne!(r1.real.digest, r1.synth.digest);

        let parsed: EvalReport = serde_json::from_str(&r1.to_json()).unwrap();
        assert_eq!(parsed.metrics["mmd"].value, r1.metrics["mmd"].value);
    }

    #[test]
    fn metric_selection_filters_and_rejects_unknown_names() {
        let real = toy(40, 6, 31);
        let synth = toy(40, 6, 32);
        let cfg = EvalConfig {
            dtw_pairs: 10,
            ..EvalConfig::default()
        };
        let only = vec!["dtw".to_string(), "tvd".to_string()];
        let report = evaluate(&real, &synth, &[3, 2], 2, &cfg, Some(&only)).unwrap();
        assert_eq!(
            report.metrics.keys().cloned().collect::<Vec<_>>(),
            vec!["dtw".to_string(), "tvd".to_string()]
        );

        let bad = vec!["mmd".to_string(), "wasserstein".to_string()];
        let err = evaluate(&real, &synth, &[3, 2], 2, &cfg, Some(&bad)).unwrap_err();
        assert_eq!(err.kind(), "usage");
        assert!(err.to_string().contains("wasserstein"));

        // Explicitly requesting a metric the data cannot support is an error
        // rather than a silent skip.
        let single = toy(40, 1, 33);
        let single2 = toy(40, 1, 34);
        let acf = vec!["acf_mse".to_string()];
        let err = evaluate(&single, &single2, &[3, 2], 2, &cfg, Some(&acf)).unwrap_err();
        assert_eq!(err.kind(), "usage");
    }

    #[test]
    fn report_validation_flags_out_of_range_values() {
        let real = toy(8, 4, 30);
        let mut metrics = BTreeMap::new();
        metrics.insert(
            "tvd".to_string(),
            MetricEntry {
                value: 1.4,
                metadata: Map::new(),
            },
        );
        let report = EvalReport {
            real: DatasetFingerprint::of(&real),
            synth: DatasetFingerprint::of(&real),
            metrics,
        };
        assert_eq!(report.validate().unwrap_err().kind(), "numeric");
    }
}
