//! Bidirectional GRU denoising network with FiLM time conditioning, label
//! conditioning, EDM-style preconditioning, and dual output heads.
//!
//! Batches are laid out position-major: a sequence batch [B, L, W] is stored
//! as a 2-D array [L*B, W] with row l*B + b, so every per-position affine map
//! is one matrix product over all positions at once and only the recurrence
//! itself is sequential.
//!
//! The GRU gates follow the original formulation of Cho et al. (2014):
//! r = sigmoid(W_r x + U_r h + b_r), z likewise, candidate
//! h~ = tanh(W_c x + U_c (r*h) + b_c), h' = z*h + (1-z)*h~.

use ndarray::Array2;
use rand::Rng;
use std::collections::HashMap;
use std::rc::Rc;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Data scale the preconditioning assumes (matches the normalization target).
pub const SIGMA_DATA: f64 = 0.5;

/// Architecture hyperparameters. `standard` gives the full-size network; the
/// gradient-check suite shrinks everything to keep finite differences cheap.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize)]
pub struct DenoiserConfig {
    pub num_features: usize,
    pub cat_cardinalities: Vec<usize>,
    pub label_cardinality: usize,
    /// Embedding dimension d shared by all categorical features.
    pub embed_dim: usize,
    /// Hidden width H per GRU direction.
    pub hidden: usize,
    pub layers: usize,
    /// Width of the sinusoidal time embedding and its MLP.
    pub time_dim: usize,
    /// Width of the label embedding.
    pub label_dim: usize,
}

impl DenoiserConfig {
    /// Full-size configuration: d=16, H=64, 3 layers, 64-dim time embedding,
    /// 16-dim label embedding.
    pub fn standard(
        num_features: usize,
        cat_cardinalities: Vec<usize>,
        label_cardinality: usize,
    ) -> Self {
        DenoiserConfig {
            num_features,
            cat_cardinalities,
            label_cardinality,
            embed_dim: 16,
            hidden: 64,
            layers: 3,
            time_dim: 64,
            label_dim: 16,
        }
    }

    /// Total categorical logit width.
    pub fn cat_width(&self) -> usize {
        self.cat_cardinalities.iter().sum()
    }

    /// Width of the embedded categorical block.
    pub fn emb_width(&self) -> usize {
        self.cat_cardinalities.len() * self.embed_dim
    }

    /// Per-position input width: numerical + embedded categorical + label.
    pub fn input_width(&self) -> usize {
        self.num_features + self.emb_width() + self.label_dim
    }

    pub fn output_width(&self) -> usize {
        self.num_features + self.cat_width()
    }
}

// --- Preconditioning coefficients -----------------------------------------

fn sigma_data_sq<T: Scalar>() -> T {
    T::from_f64(SIGMA_DATA * SIGMA_DATA)
}

/// Input scaling 1/sqrt(sigma^2 + sigma_data^2).
pub fn c_in<T: Scalar>(sigma: T) -> T {
    T::one() / (sigma * sigma + sigma_data_sq::<T>()).sqrt()
}

/// Skip-connection weight sigma_data^2 / (sigma^2 + sigma_data^2).
pub fn c_skip<T: Scalar>(sigma: T) -> T {
    sigma_data_sq::<T>() / (sigma * sigma + sigma_data_sq::<T>())
}

/// Output scaling sigma * sigma_data / sqrt(sigma^2 + sigma_data^2).
pub fn c_out<T: Scalar>(sigma: T) -> T {
    sigma * T::from_f64(SIGMA_DATA) * c_in(sigma)
}

/// Elementwise c_in(sigma) * x with per-element noise levels.
pub fn precondition_in<T: Scalar>(x: &Array2<T>, sigma: &Array2<T>) -> Result<Array2<T>> {
    if x.dim() != sigma.dim() {
        return Err(Error::argument(format!(
            "precondition_in: shape {:?} vs sigma {:?}",
            x.dim(),
            sigma.dim()
        )));
    }
    if sigma.iter().any(|&s| s <= T::zero()) {
        return Err(Error::argument("precondition_in: sigma must be positive"));
    }
    let mut out = x.clone();
    out.zip_mut_with(sigma, |v, &s| *v = *v * c_in(s));
    Ok(out)
}

/// Tape nodes for c_in, c_skip, c_out from a sigma node (all elementwise),
/// so schedule gradients flow through the preconditioning.
pub fn coefficients_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    sigma: NodeId,
) -> (NodeId, NodeId, NodeId) {
    let sd2 = sigma_data_sq::<T>();
    let s2 = tape.mul(sigma, sigma);
    let denom = tape.offset(s2, sd2);
    let cin = tape.powf(denom, T::from_f64(-0.5));
    let inv = tape.powf(denom, -T::one());
    let cskip = tape.scale(inv, sd2);
    let scin = tape.mul(sigma, cin);
    let cout = tape.scale(scin, T::from_f64(SIGMA_DATA));
    (cin, cskip, cout)
}

/// One GRU pass over a position-major projected input `gates_in`
/// [L*batch, 3*hidden] (reset | update | candidate blocks, input part
/// already including the bias). `u_rz` [hidden, 2*hidden] and `u_c`
/// [hidden, hidden] are the recurrent weights. Returns the hidden states
/// [L*batch, hidden] in time order regardless of scan direction.
#[allow(clippy::too_many_arguments)]
pub fn gru_direction<T: Scalar>(
    tape: &mut Tape<T>,
    gates_in: NodeId,
    u_rz: NodeId,
    u_c: NodeId,
    hidden: usize,
    seq_len: usize,
    batch: usize,
    reverse: bool,
) -> NodeId {
    let mut h = tape.zeros(batch, hidden);
    let mut states: Vec<NodeId> = vec![0; seq_len];
    let order: Vec<usize> = if reverse {
        (0..seq_len).rev().collect()
    } else {
        (0..seq_len).collect()
    };
    for l in order {
        let step = tape.slice_rows(gates_in, l * batch, (l + 1) * batch);
        let rz_in = tape.slice_cols(step, 0, 2 * hidden);
        let c_in_part = tape.slice_cols(step, 2 * hidden, 3 * hidden);
        let rz_h = tape.matmul(h, u_rz);
        let rz_pre = tape.add(rz_in, rz_h);
        let rz = tape.sigmoid(rz_pre);
        let r = tape.slice_cols(rz, 0, hidden);
        let z = tape.slice_cols(rz, hidden, 2 * hidden);
        let rh = tape.mul(r, h);
        let c_h = tape.matmul(rh, u_c);
        let c_pre = tape.add(c_in_part, c_h);
        let cand = tape.tanh(c_pre);
        let keep = tape.mul(z, h);
        let neg_z = tape.scale(z, -T::one());
        let gate = tape.offset(neg_z, T::one());
        let update = tape.mul(gate, cand);
        h = tape.add(keep, update);
        states[l] = h;
    }
    tape.concat_rows(&states)
}

// --- Model -----------------------------------------------------------------

/// The denoiser's learnable parameters, stored as named 2-D arrays in a
/// fixed order (the order defines checkpoint layout and optimizer state).
pub struct DenoiserModel<T: Scalar> {
    pub config: DenoiserConfig,
    names: Vec<String>,
    arrays: Vec<Array2<T>>,
    index: HashMap<String, usize>,
}

/// Position-major forward-pass inputs. `x_num_scaled` and `x_emb_scaled`
/// must already carry the c_in scaling of their channel.
pub struct ForwardInput<'a, T: Scalar> {
    pub x_num_scaled: NodeId,
    pub x_emb_scaled: NodeId,
    /// One-hot label rows [B, label_cardinality]; an all-zero row is the
    /// unconditional branch.
    pub label_onehot: &'a Array2<T>,
    /// Diffusion time per sample, length B.
    pub t: &'a [T],
    pub seq_len: usize,
    pub batch: usize,
}

/// Network outputs: the numerical head slice and one logit block per
/// categorical feature, all position-major.
pub struct ForwardOutput {
    pub f_num: NodeId,
    pub logits: Vec<NodeId>,
}

impl<T: Scalar> DenoiserModel<T> {
    pub fn init<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Self {
        assert!(config.time_dim >= 2 && config.time_dim.is_multiple_of(2), "time_dim must be even");
        assert!(config.layers >= 1 && config.hidden >= 1);
        let h = config.hidden;
        let mut names = Vec::new();
        let mut arrays: Vec<Array2<T>> = Vec::new();

        let push = |names: &mut Vec<String>, arrays: &mut Vec<Array2<T>>, name: String, a: Array2<T>| {
            names.push(name);
            arrays.push(a);
        };
        let uniform = |rng: &mut R, rows: usize, cols: usize, fan: usize| -> Array2<T> {
            let bound = T::from_f64(1.0 / (fan as f64).sqrt());
            let mut a = Array2::zeros((rows, cols));
            for v in a.iter_mut() {
                *v = T::sample_uniform_sym(rng, bound);
            }
            a
        };

        let w_in = config.input_width();
        push(&mut names, &mut arrays, "in_proj.w".into(), uniform(rng, w_in, h, w_in));
        push(&mut names, &mut arrays, "in_proj.b".into(), Array2::zeros((1, h)));

        let td = config.time_dim;
        push(&mut names, &mut arrays, "time_mlp.w1".into(), uniform(rng, td, td, td));
        push(&mut names, &mut arrays, "time_mlp.b1".into(), Array2::zeros((1, td)));
        push(&mut names, &mut arrays, "time_mlp.w2".into(), uniform(rng, td, td, td));
        push(&mut names, &mut arrays, "time_mlp.b2".into(), Array2::zeros((1, td)));

        let cy = config.label_cardinality;
        push(&mut names, &mut arrays, "label_emb.w".into(), uniform(rng, cy, config.label_dim, cy));

        for layer in 0..config.layers {
            let d_in = if layer == 0 { h } else { 2 * h };
            for dir in ["fwd", "bwd"] {
                push(&mut names, &mut arrays, format!("gru{layer}.{dir}.w"), uniform(rng, d_in, 3 * h, h));
                push(&mut names, &mut arrays, format!("gru{layer}.{dir}.u_rz"), uniform(rng, h, 2 * h, h));
                push(&mut names, &mut arrays, format!("gru{layer}.{dir}.u_c"), uniform(rng, h, h, h));
                push(&mut names, &mut arrays, format!("gru{layer}.{dir}.b"), Array2::zeros((1, 3 * h)));
            }
            // FiLM projections start at zero: the layer opens as a plain
            // layer-norm and learns its modulation.
            push(&mut names, &mut arrays, format!("film{layer}.gamma.w"), Array2::zeros((td, 2 * h)));
            push(&mut names, &mut arrays, format!("film{layer}.gamma.b"), Array2::zeros((1, 2 * h)));
            push(&mut names, &mut arrays, format!("film{layer}.omega.w"), Array2::zeros((td, 2 * h)));
            push(&mut names, &mut arrays, format!("film{layer}.omega.b"), Array2::zeros((1, 2 * h)));
        }

        let w_out = config.output_width();
        push(&mut names, &mut arrays, "head.w".into(), uniform(rng, 2 * h, w_out, 2 * h));
        push(&mut names, &mut arrays, "head.b".into(), Array2::zeros((1, w_out)));

        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        DenoiserModel {
            config,
            names,
            arrays,
            index,
        }
    }

    /// Total learnable scalar count, as a closed-form function of the
    /// configuration.
    pub fn expected_param_count(config: &DenoiserConfig) -> usize {
        let h = config.hidden;
        let td = config.time_dim;
        let w_in = config.input_width();
        let w_out = config.output_width();
        let mut count = w_in * h + h; // input projection
        count += 2 * (td * td + td); // time MLP
        count += config.label_cardinality * config.label_dim;
        for layer in 0..config.layers {
            let d_in = if layer == 0 { h } else { 2 * h };
            count += 2 * (d_in * 3 * h + h * 2 * h + h * h + 3 * h); // two directions
            count += 2 * (td * 2 * h + 2 * h); // gamma and omega projections
        }
        count += 2 * h * w_out + w_out;
        count
    }

    pub fn param_count(&self) -> usize {
        self.arrays.iter().map(|a| a.len()).sum()
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Array2<T>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.arrays.iter())
    }

    pub fn named_params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array2<T>)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.arrays.iter_mut())
    }

    pub fn param(&self, name: &str) -> &Array2<T> {
        &self.arrays[self.index[name]]
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Array2<T> {
        &mut self.arrays[self.index[name]]
    }

    /// Leaves for every parameter, aligned with the declaration order.
    pub fn leaves(&self, tape: &mut Tape<T>) -> Vec<NodeId> {
        self.arrays.iter().map(|a| tape.leaf(a.clone())).collect()
    }

    fn leaf(&self, leaves: &[NodeId], name: &str) -> NodeId {
        leaves[self.index[name]]
    }

    /// Sinusoidal embedding of diffusion times: half sines, half cosines,
    /// with frequencies spaced geometrically from 1 to 10^4.
    pub fn time_embedding(t: &[T], dim: usize) -> Array2<T> {
        assert!(dim >= 2 && dim.is_multiple_of(2), "time embedding width must be even");
        let half = dim / 2;
        let mut out = Array2::zeros((t.len(), dim));
        for (b, &tb) in t.iter().enumerate() {
            for i in 0..half {
                let exponent = if half == 1 {
                    0.0
                } else {
                    i as f64 * (10_000f64).ln() / (half - 1) as f64
                };
                let omega = T::from_f64(exponent.exp());
                out[[b, i]] = (omega * tb).sin();
                out[[b, half + i]] = (omega * tb).cos();
            }
        }
        out
    }

    /// One GRU direction over the position-major projected input. Returns
    /// the per-position hidden states concatenated back in time order.
    #[allow(clippy::too_many_arguments)]
    fn gru_direction(
        &self,
        tape: &mut Tape<T>,
        gates_in: NodeId,
        u_rz: NodeId,
        u_c: NodeId,
        seq_len: usize,
        batch: usize,
        reverse: bool,
    ) -> NodeId {
        gru_direction(
            tape,
            gates_in,
            u_rz,
            u_c,
            self.config.hidden,
            seq_len,
            batch,
            reverse,
        )
    }

    fn film(
        &self,
        tape: &mut Tape<T>,
        h: NodeId,
        e_t: NodeId,
        tile: &Rc<Vec<usize>>,
        layer: usize,
        leaves: &[NodeId],
    ) -> NodeId {
        let normed = tape.layer_norm(h);
        let gw = self.leaf(leaves, &format!("film{layer}.gamma.w"));
        let gb = self.leaf(leaves, &format!("film{layer}.gamma.b"));
        let ow = self.leaf(leaves, &format!("film{layer}.omega.w"));
        let ob = self.leaf(leaves, &format!("film{layer}.omega.b"));
        let gamma = tape.matmul(e_t, gw);
        let gamma = tape.add_row(gamma, gb);
        let omega = tape.matmul(e_t, ow);
        let omega = tape.add_row(omega, ob);
        let gamma_rows = tape.gather_rows(gamma, tile);
        let omega_rows = tape.gather_rows(omega, tile);
        let scale = tape.offset(gamma_rows, T::one());
        let modulated = tape.mul(normed, scale);
        tape.add(modulated, omega_rows)
    }

    /// Full forward pass on the tape. The two channel inputs must already be
    /// scaled by their c_in coefficients; labels enter as one-hot rows (zero
    /// row = unconditional).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        leaves: &[NodeId],
        input: &ForwardInput<'_, T>,
    ) -> ForwardOutput {
        let cfg = &self.config;
        let (seq_len, batch) = (input.seq_len, input.batch);
        let rows = seq_len * batch;
        assert_eq!(tape.value(input.x_num_scaled).dim(), (rows, cfg.num_features));
        assert_eq!(tape.value(input.x_emb_scaled).dim(), (rows, cfg.emb_width()));
        assert_eq!(input.label_onehot.dim(), (batch, cfg.label_cardinality));
        assert_eq!(input.t.len(), batch);

        // Per-sample conditioning rows, tiled to positions via row gather.
        let tile = Rc::new((0..rows).map(|i| i % batch).collect::<Vec<usize>>());

        let onehot = tape.leaf(input.label_onehot.clone());
        let label_w = self.leaf(leaves, "label_emb.w");
        let label_vec = tape.matmul(onehot, label_w);
        let label_rows = tape.gather_rows(label_vec, &tile);

        let x = tape.concat_cols(&[input.x_num_scaled, input.x_emb_scaled, label_rows]);
        let w_in = self.leaf(leaves, "in_proj.w");
        let b_in = self.leaf(leaves, "in_proj.b");
        let projected = tape.matmul(x, w_in);
        let mut layer_input = tape.add_row(projected, b_in);

        // Time embedding MLP (SiLU hidden activation).
        let sin_emb = tape.leaf(Self::time_embedding(input.t, cfg.time_dim));
        let w1 = self.leaf(leaves, "time_mlp.w1");
        let b1 = self.leaf(leaves, "time_mlp.b1");
        let h1 = tape.matmul(sin_emb, w1);
        let h1 = tape.add_row(h1, b1);
        let s1 = tape.sigmoid(h1);
        let h1 = tape.mul(h1, s1);
        let w2 = self.leaf(leaves, "time_mlp.w2");
        let b2 = self.leaf(leaves, "time_mlp.b2");
        let e_t = tape.matmul(h1, w2);
        let e_t = tape.add_row(e_t, b2);

        for layer in 0..cfg.layers {
            let mut dir_outputs = Vec::with_capacity(2);
            for (dir, reverse) in [("fwd", false), ("bwd", true)] {
                let w = self.leaf(leaves, &format!("gru{layer}.{dir}.w"));
                let b = self.leaf(leaves, &format!("gru{layer}.{dir}.b"));
                let u_rz = self.leaf(leaves, &format!("gru{layer}.{dir}.u_rz"));
                let u_c = self.leaf(leaves, &format!("gru{layer}.{dir}.u_c"));
                let gates = tape.matmul(layer_input, w);
                let gates = tape.add_row(gates, b);
                dir_outputs.push(self.gru_direction(tape, gates, u_rz, u_c, seq_len, batch, reverse));
            }
            let joined = tape.concat_cols(&dir_outputs);
            layer_input = self.film(tape, joined, e_t, &tile, layer, leaves);
        }

        let head_w = self.leaf(leaves, "head.w");
        let head_b = self.leaf(leaves, "head.b");
        let out = tape.matmul(layer_input, head_w);
        let out = tape.add_row(out, head_b);

        let f_num = tape.slice_cols(out, 0, cfg.num_features);
        let mut logits = Vec::with_capacity(cfg.cat_cardinalities.len());
        let mut at = cfg.num_features;
        for &c in &cfg.cat_cardinalities {
            logits.push(tape.slice_cols(out, at, at + c));
            at += c;
        }
        ForwardOutput { f_num, logits }
    }
}
