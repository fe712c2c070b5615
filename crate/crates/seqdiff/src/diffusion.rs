//! Forward noising, the probability-flow Euler sampler with score
//! interpolation, and classifier-free guidance.
//!
//! The sampler integrates the deterministic reverse-time flow in sigma
//! space: x_{i+1} = x_i + ((sigma_{i+1} - sigma_i)/sigma_i) * (x_i - x0_hat),
//! a first-order step that contracts toward the denoised estimate and needs
//! no schedule derivative. The time grid is uniform in t, so each channel's
//! learned exponent decides where its sigma steps concentrate.

use ndarray::{Array2, Array3};
use rand::Rng;
use std::str::FromStr;

use crate::denoiser::{c_out, c_skip, precondition_in, DenoiserModel, ForwardInput};
use crate::embed::EmbeddingTable;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::schedule::ScheduleParams;

/// Shared noise floor for both channels.
pub const SIGMA_MIN: f64 = 0.002;
/// Top of the numerical channel's noise range.
pub const SIGMA_MAX_NUMERICAL: f64 = 80.0;
/// Top of the embedding channel's noise range (wider: embeddings live on a
/// sqrt(d) sphere and need more noise to lose their identity).
pub const SIGMA_MAX_EMBEDDING: f64 = 100.0;
/// Initial global exponent for the numerical channel.
pub const RHO_INIT_NUMERICAL: f64 = 1.0;
/// Initial global exponent for the embedding channel.
pub const RHO_INIT_EMBEDDING: f64 = 7.0;

/// How labels enter sampling.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// Zero label vector, no guidance; output labels are drawn from the
    /// training label frequencies so downstream tasks still get labels.
    Unconditional,
    /// Labels drawn from the training label frequencies, guided.
    CfgCombined,
    /// Labels assigned round-robin so classes get equal counts, guided.
    CfgBalanced,
}

impl SampleMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SampleMode::Unconditional => "uncond",
            SampleMode::CfgCombined => "cfg-comb",
            SampleMode::CfgBalanced => "cfg-bal",
        }
    }
}

impl FromStr for SampleMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uncond" => Ok(SampleMode::Unconditional),
            "cfg-comb" => Ok(SampleMode::CfgCombined),
            "cfg-bal" => Ok(SampleMode::CfgBalanced),
            other => Err(Error::argument(format!(
                "unknown sample mode '{other}' (expected uncond, cfg-comb, or cfg-bal)"
            ))),
        }
    }
}

/// Sampler knobs. Guidance weights are ignored in unconditional mode.
#[derive(Copy, Clone, Debug)]
pub struct SampleSettings<T: Scalar> {
    pub steps: usize,
    pub w_num: T,
    pub w_cat: T,
    pub mode: SampleMode,
}

impl<T: Scalar> SampleSettings<T> {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::argument("steps must be at least 1"));
        }
        Ok(())
    }
}

/// Guided prediction (1 + w) * conditional - w * unconditional.
pub fn cfg_combine<T: Scalar>(cond: &Array2<T>, uncond: &Array2<T>, w: T) -> Array2<T> {
    assert_eq!(cond.dim(), uncond.dim(), "cfg_combine shape mismatch");
    let mut out = cond.clone();
    out.zip_mut_with(uncond, |c, &u| *c = (T::one() + w) * *c - w * u);
    out
}

/// Corrupt a clean batch: x_t = x0 + sigma * eps with fresh standard-normal
/// eps, drawn in row-major order. Returns (x_t, eps).
pub fn forward_noise<T: Scalar, R: Rng + ?Sized>(
    x0: &Array2<T>,
    sigma: &Array2<T>,
    rng: &mut R,
) -> Result<(Array2<T>, Array2<T>)> {
    if x0.dim() != sigma.dim() {
        return Err(Error::argument(format!(
            "forward_noise: shape {:?} vs sigma {:?}",
            x0.dim(),
            sigma.dim()
        )));
    }
    let eps = Array2::from_shape_fn(x0.dim(), |_| T::sample_standard_normal(rng));
    let mut x_t = x0.clone();
    for ((v, &e), &s) in x_t.iter_mut().zip(eps.iter()).zip(sigma.iter()) {
        *v = *v + s * e;
    }
    Ok((x_t, eps))
}

/// One sigma-space Euler step toward the denoised estimate.
pub fn euler_step<T: Scalar>(
    x: &Array2<T>,
    x0_hat: &Array2<T>,
    sigma_cur: &Array2<T>,
    sigma_next: &Array2<T>,
) -> Result<Array2<T>> {
    let dims = [x0_hat.dim(), sigma_cur.dim(), sigma_next.dim()];
    if dims.iter().any(|&d| d != x.dim()) {
        return Err(Error::argument(format!(
            "euler_step: mismatched shapes {:?} / {:?} / {:?} / {:?}",
            x.dim(),
            dims[0],
            dims[1],
            dims[2]
        )));
    }
    for (&c, &n) in sigma_cur.iter().zip(sigma_next.iter()) {
        if c <= T::zero() {
            return Err(Error::argument("euler_step: current sigma must be positive"));
        }
        if n > c {
            return Err(Error::argument(
                "euler_step: sigma must be non-increasing along the trajectory",
            ));
        }
    }
    let mut out = x.clone();
    for (((o, &x0), &c), &n) in out
        .iter_mut()
        .zip(x0_hat.iter())
        .zip(sigma_cur.iter())
        .zip(sigma_next.iter())
    {
        *o = *o + ((n - c) / c) * (*o - x0);
    }
    Ok(out)
}

/// Repeat a [L, F] sigma grid into the position-major batch layout
/// [L*B, F*expand]: row l*B + b, with each feature's value shared by its
/// `expand` adjacent columns.
pub fn expand_grid<T: Scalar>(grid: &Array2<T>, batch: usize, expand: usize) -> Array2<T> {
    let (l_len, f_len) = grid.dim();
    Array2::from_shape_fn((l_len * batch, f_len * expand), |(row, col)| {
        grid[[row / batch, col / expand]]
    })
}

/// Per-step context handed to the denoising predictor.
pub struct StepContext<'a, T: Scalar> {
    pub step: usize,
    pub t: T,
    pub sigma_num: &'a Array2<T>,
    pub sigma_emb: &'a Array2<T>,
}

/// Integrate the reverse flow over pre-expanded sigma grids (length S+1,
/// indexed by the uniform grid t_i = 1 - i/S). The predictor returns the
/// denoised estimate for each channel at the given step.
pub fn run_euler<T, F>(
    mut x_num: Array2<T>,
    mut x_emb: Array2<T>,
    grids_num: &[Array2<T>],
    grids_emb: &[Array2<T>],
    mut predict: F,
) -> Result<(Array2<T>, Array2<T>)>
where
    T: Scalar,
    F: FnMut(&StepContext<'_, T>, &Array2<T>, &Array2<T>) -> Result<(Array2<T>, Array2<T>)>,
{
    if grids_num.len() < 2 || grids_num.len() != grids_emb.len() {
        return Err(Error::argument(format!(
            "run_euler: want matching grids of length steps+1 >= 2, got {} and {}",
            grids_num.len(),
            grids_emb.len()
        )));
    }
    let steps = grids_num.len() - 1;
    for i in 0..steps {
        let ctx = StepContext {
            step: i,
            t: T::from_f64(1.0 - i as f64 / steps as f64),
            sigma_num: &grids_num[i],
            sigma_emb: &grids_emb[i],
        };
        let (x0_num, x0_emb) = predict(&ctx, &x_num, &x_emb)?;
        x_num = euler_step(&x_num, &x0_num, &grids_num[i], &grids_num[i + 1])?;
        x_emb = euler_step(&x_emb, &x0_emb, &grids_emb[i], &grids_emb[i + 1])?;
    }
    Ok((x_num, x_emb))
}

/// Row-wise stable softmax.
pub fn softmax_rows<T: Scalar>(logits: &Array2<T>) -> Array2<T> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

/// One-hot rows for conditioning; errors on labels outside the cardinality.
pub fn one_hot<T: Scalar>(labels: &[u8], classes: usize) -> Result<Array2<T>> {
    let mut out = Array2::zeros((labels.len(), classes));
    for (i, &l) in labels.iter().enumerate() {
        if usize::from(l) >= classes {
            return Err(Error::argument(format!(
                "unknown label class {l} (label cardinality {classes})"
            )));
        }
        out[[i, usize::from(l)]] = T::one();
    }
    Ok(out)
}

/// Draw output labels for a sampling run. Balanced mode is deterministic
/// round-robin; the other modes draw from the stored training frequencies.
pub fn draw_labels<R: Rng + ?Sized>(
    mode: SampleMode,
    n: usize,
    freqs: &[f64],
    rng: &mut R,
) -> Result<Vec<u8>> {
    if freqs.is_empty() || freqs.len() > 255 {
        return Err(Error::argument(format!(
            "label frequency table must have 1..=255 entries, got {}",
            freqs.len()
        )));
    }
    let total: f64 = freqs.iter().sum();
    if freqs.iter().any(|&f| f < 0.0) || (total - 1.0).abs() > 1e-6 {
        return Err(Error::argument(
            "label frequencies must be nonnegative and sum to 1",
        ));
    }
    match mode {
        SampleMode::CfgBalanced => Ok((0..n).map(|s| (s % freqs.len()) as u8).collect()),
        SampleMode::Unconditional | SampleMode::CfgCombined => {
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut pick = freqs.len() - 1;
                for (k, &f) in freqs.iter().enumerate() {
                    acc += f;
                    if u < acc {
                        pick = k;
                        break;
                    }
                }
                out.push(pick as u8);
            }
            Ok(out)
        }
    }
}

/// The full generative model: denoiser, categorical embeddings, and one
/// noise schedule per channel.
pub struct DiffusionModel<T: Scalar> {
    pub denoiser: DenoiserModel<T>,
    pub embeddings: EmbeddingTable<T>,
    pub schedule_num: ScheduleParams<T>,
    pub schedule_emb: ScheduleParams<T>,
}

impl<T: Scalar> DiffusionModel<T> {
    /// Fresh model with the default channel schedules. The draw order is
    /// pinned (embeddings first, then denoiser) so a seed fully determines
    /// the initialization.
    pub fn init<R: Rng + ?Sized>(
        config: crate::denoiser::DenoiserConfig,
        seq_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let embeddings = EmbeddingTable::init(&config.cat_cardinalities, config.embed_dim, rng)?;
        let schedule_num = ScheduleParams::new(
            config.num_features,
            seq_len,
            RHO_INIT_NUMERICAL,
            SIGMA_MIN,
            SIGMA_MAX_NUMERICAL,
        )?;
        let schedule_emb = ScheduleParams::new(
            config.cat_cardinalities.len(),
            seq_len,
            RHO_INIT_EMBEDDING,
            SIGMA_MIN,
            SIGMA_MAX_EMBEDDING,
        )?;
        let denoiser = DenoiserModel::init(config, rng);
        Ok(DiffusionModel {
            denoiser,
            embeddings,
            schedule_num,
            schedule_emb,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.schedule_num.timesteps()
    }

    /// Every learnable array with a stable hierarchical name; the order
    /// defines optimizer-state and checkpoint layout.
    pub fn named_params(&self) -> Vec<(String, &Array2<T>)> {
        let mut out: Vec<(String, &Array2<T>)> = Vec::new();
        for (name, a) in self.denoiser.named_params() {
            out.push((format!("denoiser.{name}"), a));
        }
        for (j, table) in self.embeddings.tables.iter().enumerate() {
            out.push((format!("embed.table{j}"), table));
        }
        for (name, a) in self.schedule_num.named_params() {
            out.push((format!("schedule_num.{name}"), a));
        }
        for (name, a) in self.schedule_emb.named_params() {
            out.push((format!("schedule_emb.{name}"), a));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Array2<T>)> {
        let mut out: Vec<(String, &mut Array2<T>)> = Vec::new();
        for (name, a) in self.denoiser.named_params_mut() {
            out.push((format!("denoiser.{name}"), a));
        }
        for (j, table) in self.embeddings.tables.iter_mut().enumerate() {
            out.push((format!("embed.table{j}"), table));
        }
        for (name, a) in self.schedule_num.named_params_mut() {
            out.push((format!("schedule_num.{name}"), a));
        }
        for (name, a) in self.schedule_emb.named_params_mut() {
            out.push((format!("schedule_emb.{name}"), a));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, a)| a.len()).sum()
    }

    /// Plain-value forward pass (no gradients kept).
    fn forward_values(
        &self,
        x_num_scaled: &Array2<T>,
        x_emb_scaled: &Array2<T>,
        onehot: &Array2<T>,
        t: &[T],
        seq_len: usize,
        batch: usize,
    ) -> (Array2<T>, Vec<Array2<T>>) {
        let mut tape = crate::autodiff::Tape::new();
        let leaves = self.denoiser.leaves(&mut tape);
        let xn = tape.leaf(x_num_scaled.clone());
        let xe = tape.leaf(x_emb_scaled.clone());
        let out = self.denoiser.forward_on_tape(
            &mut tape,
            &leaves,
            &ForwardInput {
                x_num_scaled: xn,
                x_emb_scaled: xe,
                label_onehot: onehot,
                t,
                seq_len,
                batch,
            },
        );
        let f_num = tape.value(out.f_num).clone();
        let logits = out.logits.iter().map(|&l| tape.value(l).clone()).collect();
        (f_num, logits)
    }

    /// Denoised estimates for both channels at one sampler step, including
    /// guidance and score interpolation. `labels: None` is the pure
    /// unconditional path; guidance runs only when some weight is nonzero,
    /// so w=0 is bit-identical to the conditional-only path.
    #[allow(clippy::too_many_arguments)]
    pub fn predict_x0(
        &self,
        x_num: &Array2<T>,
        x_emb: &Array2<T>,
        sigma_num: &Array2<T>,
        sigma_emb: &Array2<T>,
        t: T,
        seq_len: usize,
        batch: usize,
        labels: Option<&[u8]>,
        w_num: T,
        w_cat: T,
    ) -> Result<(Array2<T>, Array2<T>)> {
        let classes = self.denoiser.config.label_cardinality;
        let xn_scaled = precondition_in(x_num, sigma_num)?;
        let xe_scaled = precondition_in(x_emb, sigma_emb)?;
        let t_vec = vec![t; batch];
        let onehot = match labels {
            Some(ls) => one_hot::<T>(ls, classes)?,
            None => Array2::zeros((batch, classes)),
        };
        let (f_cond, logits_cond) =
            self.forward_values(&xn_scaled, &xe_scaled, &onehot, &t_vec, seq_len, batch);

        let denoise_num = |f: &Array2<T>| -> Array2<T> {
            let mut out = x_num.clone();
            for ((o, &fv), &s) in out.iter_mut().zip(f.iter()).zip(sigma_num.iter()) {
                *o = c_skip(s) * *o + c_out(s) * fv;
            }
            out
        };

        let guided = labels.is_some() && (w_num != T::zero() || w_cat != T::zero());
        let (x0_num, logits) = if guided {
            let zeros = Array2::zeros((batch, classes));
            let (f_unc, logits_unc) =
                self.forward_values(&xn_scaled, &xe_scaled, &zeros, &t_vec, seq_len, batch);
            let x0 = cfg_combine(&denoise_num(&f_cond), &denoise_num(&f_unc), w_num);
            let combined: Vec<Array2<T>> = logits_cond
                .iter()
                .zip(logits_unc.iter())
                .map(|(c, u)| cfg_combine(c, u, w_cat))
                .collect();
            (x0, combined)
        } else {
            (denoise_num(&f_cond), logits_cond)
        };

        let d = self.embeddings.dim();
        let rows = seq_len * batch;
        let mut x0_emb = Array2::zeros((rows, self.embeddings.total_width()));
        for (j, lj) in logits.iter().enumerate() {
            let probs = softmax_rows(lj);
            let table = self.embeddings.normalized_table(j)?;
            let block = probs.dot(&table);
            x0_emb
                .slice_mut(ndarray::s![.., j * d..(j + 1) * d])
                .assign(&block);
        }
        Ok((x0_num, x0_emb))
    }

    /// Generate `labels.len()` sequences. All randomness (the initial noise)
    /// is drawn upfront in sample-major order from `rng`, so the result is
    /// independent of `chunk_size` and fully determined by the stream state.
    /// Numerical output stays in normalized units; categorical output is
    /// decoded to indices.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        labels: &[u8],
        settings: &SampleSettings<T>,
        rng: &mut R,
        chunk_size: usize,
    ) -> Result<(Array3<T>, Array3<u8>)> {
        settings.validate()?;
        if chunk_size == 0 {
            return Err(Error::argument("chunk_size must be at least 1"));
        }
        let classes = self.denoiser.config.label_cardinality;
        for &l in labels {
            if usize::from(l) >= classes {
                return Err(Error::argument(format!(
                    "unknown label class {l} (label cardinality {classes})"
                )));
            }
        }
        let n = labels.len();
        let seq_len = self.seq_len();
        let m_num = self.denoiser.config.num_features;
        let m_cat = self.denoiser.config.cat_cardinalities.len();
        let d = self.embeddings.dim();
        let emb_width = m_cat * d;
        let steps = settings.steps;

        let grids_num = self.schedule_num.sigma_grid(steps)?;
        let grids_emb = self.schedule_emb.sigma_grid(steps)?;

        // Sample-major upfront noise: numerical block then embedding block
        // per sample, rows in time order.
        let noise_num = Array2::from_shape_fn((n, seq_len * m_num), |_| T::sample_standard_normal(rng));
        let noise_emb = Array2::from_shape_fn((n, seq_len * emb_width), |_| T::sample_standard_normal(rng));

        let mut out_num = Array3::zeros((n, seq_len, m_num));
        let mut out_cat = Array3::zeros((n, seq_len, m_cat));

        let mut start = 0usize;
        while start < n {
            let end = (start + chunk_size).min(n);
            let bc = end - start;
            let gn: Vec<Array2<T>> = grids_num.iter().map(|g| expand_grid(g, bc, 1)).collect();
            let ge: Vec<Array2<T>> = grids_emb.iter().map(|g| expand_grid(g, bc, d)).collect();

            let mut x_num = Array2::zeros((seq_len * bc, m_num));
            let mut x_emb = Array2::zeros((seq_len * bc, emb_width));
            for b in 0..bc {
                for l in 0..seq_len {
                    for f in 0..m_num {
                        x_num[[l * bc + b, f]] =
                            gn[0][[l * bc + b, f]] * noise_num[[start + b, l * m_num + f]];
                    }
                    for c in 0..emb_width {
                        x_emb[[l * bc + b, c]] =
                            ge[0][[l * bc + b, c]] * noise_emb[[start + b, l * emb_width + c]];
                    }
                }
            }

            let chunk_labels = &labels[start..end];
            let (label_arg, w_num, w_cat) = match settings.mode {
                SampleMode::Unconditional => (None, T::zero(), T::zero()),
                SampleMode::CfgCombined | SampleMode::CfgBalanced => {
                    (Some(chunk_labels), settings.w_num, settings.w_cat)
                }
            };

            let (final_num, final_emb) = run_euler(
                x_num,
                x_emb,
                &gn,
                &ge,
                |ctx, xn, xe| {
                    self.predict_x0(
                        xn,
                        xe,
                        ctx.sigma_num,
                        ctx.sigma_emb,
                        ctx.t,
                        seq_len,
                        bc,
                        label_arg,
                        w_num,
                        w_cat,
                    )
                },
            )?;

            for b in 0..bc {
                for l in 0..seq_len {
                    for f in 0..m_num {
                        out_num[[start + b, l, f]] = final_num[[l * bc + b, f]];
                    }
                    for j in 0..m_cat {
                        let row = final_emb.row(l * bc + b);
                        let slice = row.slice(ndarray::s![j * d..(j + 1) * d]);
                        let k = self.embeddings.nearest_decode(j, slice)?;
                        out_cat[[start + b, l, j]] = k as u8;
                    }
                }
            }
            start = end;
        }
        Ok((out_num, out_cat))
    }
}
