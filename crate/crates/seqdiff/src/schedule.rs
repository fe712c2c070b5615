//! Learnable power-mean noise schedules, factorized over features and
//! sequence positions.
//!
//! A schedule maps diffusion time t in [0,1] to a noise level
//! sigma(t) = (sigma_min^{1/rho} + t (sigma_max^{1/rho} - sigma_min^{1/rho}))^rho,
//! so rho = 1 is linear interpolation and larger rho concentrates the
//! sampler's step budget near low noise. The exponent is additively
//! factorized as rho_{f,l} = rho_global + rho_feature[f] + rho_time[l] and
//! passed through a smooth clamp, giving 1 + F + L learnable scalars per
//! feature channel instead of F*L.

use ndarray::Array2;
use std::rc::Rc;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default smooth-clamp range for the effective exponent. The power-mean is
/// ill-defined at rho <= 0 and numerically explosive at large rho.
pub const RHO_MIN: f64 = 0.1;
pub const RHO_MAX: f64 = 15.0;

/// Sharpness of the smooth clamp. At 25 the map is the identity to within
/// ~1e-11 everywhere in the initialization range and reaches the exact
/// bounds a short distance past them, while keeping a nonzero gradient.
const RHO_CLAMP_BETA: f64 = 25.0;

fn softplus<T: Scalar>(z: T) -> T {
    if z > T::zero() {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Smooth saturating clamp of `x` into `[lo, hi]`: identity deep inside the
/// range, asymptotically constant outside it, strictly monotone throughout.
pub fn softclip<T: Scalar>(x: T, lo: T, hi: T) -> T {
    let beta = T::from_f64(RHO_CLAMP_BETA);
    x - softplus(beta * (x - hi)) / beta + softplus(beta * (lo - x)) / beta
}

/// One noise schedule: per-(feature, position) sigma(t) with a shared global
/// exponent plus per-feature and per-position adjustments.
pub struct ScheduleParams<T: Scalar> {
    pub sigma_min: T,
    pub sigma_max: T,
    /// Clamp bounds (lower, upper) for the effective exponent.
    pub rho_clamp: (T, T),
    /// Learnable. Shape [1,1]; carries the initialization (e.g. 1.0 or 7.0).
    pub rho_global: Array2<T>,
    /// Learnable per-feature adjustment, shape [1,F]; starts at zero.
    pub rho_feature: Array2<T>,
    /// Learnable per-position adjustment, shape [L,1]; starts at zero.
    pub rho_time: Array2<T>,
}

/// Tape leaves for one schedule's learnable parameters.
pub struct ScheduleLeaves {
    pub rho_global: NodeId,
    pub rho_feature: NodeId,
    pub rho_time: NodeId,
}

impl<T: Scalar> ScheduleParams<T> {
    pub fn new(
        features: usize,
        timesteps: usize,
        rho_init: f64,
        sigma_min: f64,
        sigma_max: f64,
    ) -> Result<Self> {
        if features == 0 || timesteps == 0 {
            return Err(Error::argument("schedule needs at least one feature and one timestep"));
        }
        if !(sigma_min > 0.0 && sigma_min < sigma_max) {
            return Err(Error::argument(format!(
                "need 0 < sigma_min < sigma_max, got {sigma_min} and {sigma_max}"
            )));
        }
        Ok(ScheduleParams {
            sigma_min: T::from_f64(sigma_min),
            sigma_max: T::from_f64(sigma_max),
            rho_clamp: (T::from_f64(RHO_MIN), T::from_f64(RHO_MAX)),
            rho_global: Array2::from_elem((1, 1), T::from_f64(rho_init)),
            rho_feature: Array2::zeros((1, features)),
            rho_time: Array2::zeros((timesteps, 1)),
        })
    }

    pub fn features(&self) -> usize {
        self.rho_feature.ncols()
    }

    pub fn timesteps(&self) -> usize {
        self.rho_time.nrows()
    }

    /// Number of learnable scalars: 1 + F + L.
    pub fn param_count(&self) -> usize {
        1 + self.features() + self.timesteps()
    }

    pub fn named_params(&self) -> [(&'static str, &Array2<T>); 3] {
        [
            ("rho_global", &self.rho_global),
            ("rho_feature", &self.rho_feature),
            ("rho_time", &self.rho_time),
        ]
    }

    pub fn named_params_mut(&mut self) -> [(&'static str, &mut Array2<T>); 3] {
        [
            ("rho_global", &mut self.rho_global),
            ("rho_feature", &mut self.rho_feature),
            ("rho_time", &mut self.rho_time),
        ]
    }

    /// Clamped exponent for one (feature, position) pair.
    pub fn effective_rho(&self, f: usize, l: usize) -> Result<T> {
        if f >= self.features() || l >= self.timesteps() {
            return Err(Error::argument(format!(
                "rho index ({f},{l}) out of range ({}x{})",
                self.features(),
                self.timesteps()
            )));
        }
        let raw = self.rho_global[[0, 0]] + self.rho_feature[[0, f]] + self.rho_time[[l, 0]];
        Ok(softclip(raw, self.rho_clamp.0, self.rho_clamp.1))
    }

    fn sigma_from_rho(&self, rho: T, t: T) -> T {
        let inv = T::one() / rho;
        let a = self.sigma_min.powf(inv);
        let b = self.sigma_max.powf(inv);
        (a + t * (b - a)).powf(rho)
    }

    /// Noise level at diffusion time `t` for one (feature, position) pair.
    pub fn sigma(&self, t: T, f: usize, l: usize) -> Result<T> {
        if t < T::zero() || t > T::one() {
            return Err(Error::argument(format!("diffusion time {t} outside [0,1]")));
        }
        Ok(self.sigma_from_rho(self.effective_rho(f, l)?, t))
    }

    /// Noise levels for every (position, feature) at one time, shape [L,F].
    pub fn sigma_grid_at(&self, t: T) -> Result<Array2<T>> {
        if t < T::zero() || t > T::one() {
            return Err(Error::argument(format!("diffusion time {t} outside [0,1]")));
        }
        let (lf, ff) = (self.timesteps(), self.features());
        let mut out = Array2::zeros((lf, ff));
        for l in 0..lf {
            for f in 0..ff {
                let raw =
                    self.rho_global[[0, 0]] + self.rho_feature[[0, f]] + self.rho_time[[l, 0]];
                let rho = softclip(raw, self.rho_clamp.0, self.rho_clamp.1);
                out[[l, f]] = self.sigma_from_rho(rho, t);
            }
        }
        Ok(out)
    }

    /// Sampler grid: sigma on t_i = 1 - i/S for i = 0..=S. Element `i` is the
    /// full [L,F] grid at t_i, so each (l,f) traces a strictly decreasing
    /// path from sigma_max down to sigma_min.
    pub fn sigma_grid(&self, steps: usize) -> Result<Vec<Array2<T>>> {
        if steps == 0 {
            return Err(Error::argument("sampler needs at least one step"));
        }
        let s = T::from_f64(steps as f64);
        (0..=steps)
            .map(|i| {
                let t = T::one() - T::from_f64(i as f64) / s;
                // Pin the endpoints so accumulated division error cannot push
                // t marginally outside [0,1].
                let t = t.max(T::zero()).min(T::one());
                self.sigma_grid_at(t)
            })
            .collect()
    }

    pub fn leaves(&self, tape: &mut Tape<T>) -> ScheduleLeaves {
        ScheduleLeaves {
            rho_global: tape.leaf(self.rho_global.clone()),
            rho_feature: tape.leaf(self.rho_feature.clone()),
            rho_time: tape.leaf(self.rho_time.clone()),
        }
    }

    fn softclip_on_tape(&self, tape: &mut Tape<T>, raw: NodeId) -> NodeId {
        let beta = T::from_f64(RHO_CLAMP_BETA);
        let inv_beta = T::one() / beta;
        let (lo, hi) = self.rho_clamp;
        let over = tape.offset(raw, -hi);
        let over = tape.scale(over, beta);
        let over = tape.softplus(over);
        let over = tape.scale(over, -inv_beta);
        let neg = tape.scale(raw, -T::one());
        let under = tape.offset(neg, lo);
        let under = tape.scale(under, beta);
        let under = tape.softplus(under);
        let under = tape.scale(under, inv_beta);
        let clipped = tape.add(raw, over);
        tape.add(clipped, under)
    }

    /// Differentiable sigma for a training batch laid out position-major:
    /// row l*batch + b, one column per data channel. `t` holds each sample's
    /// diffusion time replicated per row ([L*B, 1]); `expand` widens each
    /// feature across that many consecutive columns (embedding dimensions
    /// share their feature's exponent).
    pub fn sigma_on_tape(
        &self,
        tape: &mut Tape<T>,
        leaves: &ScheduleLeaves,
        t: &Array2<T>,
        batch: usize,
        expand: usize,
    ) -> NodeId {
        let (lf, ff) = (self.timesteps(), self.features());
        let rows = lf * batch;
        assert_eq!(t.dim(), (rows, 1), "t column must be [L*batch, 1]");
        assert!(expand >= 1);

        let feat_row = if expand == 1 {
            leaves.rho_feature
        } else {
            let col = tape.transpose(leaves.rho_feature);
            let map = Rc::new((0..ff * expand).map(|c| c / expand).collect::<Vec<_>>());
            let expanded = tape.gather_rows(col, &map);
            tape.transpose(expanded)
        };
        let rowmap = Rc::new((0..rows).map(|i| i / batch).collect::<Vec<_>>());
        let time_col = tape.gather_rows(leaves.rho_time, &rowmap);

        let base = tape.zeros(rows, ff * expand);
        let raw = tape.add_row(base, feat_row);
        let raw = tape.add_col(raw, time_col);
        let raw = tape.add_bscalar(raw, leaves.rho_global);
        let rho = self.softclip_on_tape(tape, raw);

        let inv_rho = tape.powf(rho, -T::one());
        let ln_a = tape.scale(inv_rho, self.sigma_min.ln());
        let a = tape.exp(ln_a);
        let ln_b = tape.scale(inv_rho, self.sigma_max.ln());
        let b = tape.exp(ln_b);
        let span = tape.sub(b, a);
        let t_col = tape.leaf(t.clone());
        let scaled = tape.mul_col(span, t_col);
        let u = tape.add(a, scaled);
        let ln_u = tape.ln(u);
        let rho_ln_u = tape.mul(rho, ln_u);
        tape.exp(rho_ln_u)
    }
}
