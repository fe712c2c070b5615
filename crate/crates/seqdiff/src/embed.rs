//! Continuous embedding space for categorical features.
//!
//! Each category is a learnable vector that is L2-normalized and scaled to
//! norm sqrt(d) at every lookup, so all categories live on a common sphere
//! and noise levels are comparable across features. Categorical diffusion
//! runs in this space; decoding maps a denoised vector back to the nearest
//! category.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use std::rc::Rc;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Norm below which a raw embedding is considered degenerate: the
/// normalization direction is meaningless there.
const NORM_FLOOR: f64 = 1e-8;

/// Learnable embedding tables, one `[C_j, d]` matrix per categorical feature.
pub struct EmbeddingTable<T: Scalar> {
    dim: usize,
    pub tables: Vec<Array2<T>>,
}

impl<T: Scalar> EmbeddingTable<T> {
    /// Fresh tables with independent N(0, 1/d) entries, so raw vectors start
    /// near the target sphere with uniformly random directions. Any row that
    /// lands degenerately close to zero is redrawn.
    pub fn init<R: Rng + ?Sized>(cardinalities: &[usize], dim: usize, rng: &mut R) -> Result<Self> {
        if dim == 0 {
            return Err(Error::argument("embedding dimension must be positive"));
        }
        if cardinalities.iter().any(|&c| c < 2) {
            return Err(Error::argument(
                "every categorical feature needs at least two categories",
            ));
        }
        let scale = T::from_f64(1.0 / (dim as f64).sqrt());
        let floor = T::from_f64(NORM_FLOOR);
        let tables = cardinalities
            .iter()
            .map(|&c| {
                let mut t: Array2<T> = Array2::zeros((c, dim));
                for mut row in t.rows_mut() {
                    loop {
                        for e in row.iter_mut() {
                            *e = T::sample_standard_normal(rng) * scale;
                        }
                        let norm = row.iter().map(|&e| e * e).sum::<T>().sqrt();
                        if norm > floor {
                            break;
                        }
                    }
                }
                t
            })
            .collect();
        Ok(EmbeddingTable { dim, tables })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn features(&self) -> usize {
        self.tables.len()
    }

    pub fn cardinality(&self, j: usize) -> usize {
        self.tables[j].nrows()
    }

    /// Total width of all embedded features side by side.
    pub fn total_width(&self) -> usize {
        self.features() * self.dim
    }

    fn check_feature(&self, j: usize) -> Result<()> {
        if j >= self.features() {
            return Err(Error::argument(format!(
                "categorical feature {j} out of range ({})",
                self.features()
            )));
        }
        Ok(())
    }

    fn normalize(&self, raw: ArrayView1<T>) -> Result<Array1<T>> {
        let norm = raw.iter().map(|&e| e * e).sum::<T>().sqrt();
        if norm.to_f64() <= NORM_FLOOR {
            return Err(Error::numeric(
                "degenerate embedding: raw vector has (near-)zero norm",
            ));
        }
        let scale = T::from_f64(self.dim as f64).sqrt() / norm;
        Ok(raw.mapv(|e| e * scale))
    }

    /// Normalized embedding of category `k` of feature `j`: norm sqrt(d).
    pub fn embed(&self, j: usize, k: usize) -> Result<Array1<T>> {
        self.check_feature(j)?;
        if k >= self.cardinality(j) {
            return Err(Error::argument(format!(
                "category {k} out of range ({}) for feature {j}",
                self.cardinality(j)
            )));
        }
        self.normalize(self.tables[j].row(k))
    }

    /// All categories of feature `j`, normalized; shape [C_j, d].
    pub fn normalized_table(&self, j: usize) -> Result<Array2<T>> {
        self.check_feature(j)?;
        let mut out = self.tables[j].clone();
        for k in 0..out.nrows() {
            let row = self.normalize(self.tables[j].row(k))?;
            out.row_mut(k).assign(&row);
        }
        Ok(out)
    }

    /// Probability-weighted mean of the normalized embeddings: the posterior
    /// mean of the clean embedding under `probabilities`.
    pub fn score_interpolate(&self, j: usize, probabilities: &[T]) -> Result<Array1<T>> {
        self.check_feature(j)?;
        if probabilities.len() != self.cardinality(j) {
            return Err(Error::argument(format!(
                "want {} probabilities for feature {j}, got {}",
                self.cardinality(j),
                probabilities.len()
            )));
        }
        let mut sum = T::zero();
        for &p in probabilities {
            if p < T::zero() {
                return Err(Error::argument("probabilities must be nonnegative"));
            }
            sum = sum + p;
        }
        if (sum - T::one()).abs().to_f64() > 1e-6 {
            return Err(Error::argument(format!(
                "probabilities must sum to 1 (got {sum})"
            )));
        }
        let mut out = Array1::zeros(self.dim);
        for (k, &p) in probabilities.iter().enumerate() {
            let e = self.embed(j, k)?;
            out = out + e.mapv(|v| v * p);
        }
        Ok(out)
    }

    /// Index of the normalized embedding nearest to `x` in L2 distance.
    /// Ties resolve to the lowest index.
    pub fn nearest_decode(&self, j: usize, x: ArrayView1<T>) -> Result<usize> {
        self.check_feature(j)?;
        let mut best = 0usize;
        let mut best_d2 = T::infinity();
        for k in 0..self.cardinality(j) {
            let e = self.embed(j, k)?;
            let d2 = e
                .iter()
                .zip(x.iter())
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<T>();
            if d2 < best_d2 {
                best_d2 = d2;
                best = k;
            }
        }
        Ok(best)
    }

    /// Differentiable batch lookup: rows of normalized embeddings for the
    /// given category sequence of feature `j`. `table_leaf` must be the tape
    /// leaf holding this feature's raw table.
    pub fn embed_on_tape(
        &self,
        tape: &mut Tape<T>,
        table_leaf: NodeId,
        categories: &Rc<Vec<usize>>,
    ) -> NodeId {
        let gathered = tape.gather_rows(table_leaf, categories);
        tape.normalize_rows(gathered, T::from_f64(self.dim as f64).sqrt())
    }

    /// Differentiable normalized table (all categories of feature `j`).
    pub fn normalized_table_on_tape(&self, tape: &mut Tape<T>, table_leaf: NodeId) -> NodeId {
        tape.normalize_rows(table_leaf, T::from_f64(self.dim as f64).sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn table_f64() -> EmbeddingTable<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        EmbeddingTable::init(&[3, 2], 16, &mut rng).unwrap()
    }

    #[test]
    fn embed_scales_unit_direction_to_sqrt_d() {
        let mut t = table_f64();
        let mut raw = Array1::zeros(16);
        raw[0] = 2.0;
        t.tables[0].row_mut(0).assign(&raw);
        let e = t.embed(0, 0).unwrap();
        assert!((e[0] - 4.0).abs() < 1e-12);
        assert!(e.iter().skip(1).all(|&v| v == 0.0));
    }

    #[test]
    fn embed_norm_is_sqrt_d_for_random_vectors() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mut t = EmbeddingTable::<f64>::init(&[10_000], 16, &mut rng).unwrap();
        for k in 0..10_000 {
            // Spread raw norms over several orders of magnitude.
            let s = 10f64.powf((k % 9) as f64 - 4.0);
            let row = t.tables[0].row(k).mapv(|v| v * s);
            t.tables[0].row_mut(k).assign(&row);
            let norm = t.embed(0, k).unwrap().mapv(|v| v * v).sum().sqrt();
            assert!((norm - 4.0).abs() < 1e-6, "norm {norm} at {k}");
        }
    }

    #[test]
    fn embed_is_idempotent_on_the_target_sphere() {
        let t = table_f64();
        let mut t2 = table_f64();
        t2.tables[0].row_mut(1).assign(&t.embed(0, 1).unwrap());
        let e = t2.embed(0, 1).unwrap();
        let diff = (&e - &t.embed(0, 1).unwrap()).mapv(f64::abs).sum();
        assert!(diff < 1e-12);
    }

    #[test]
    fn embed_rejects_bad_indices_and_degenerate_rows() {
        let mut t = table_f64();
        assert!(t.embed(2, 0).is_err());
        assert!(t.embed(0, 3).is_err());
        t.tables[0].row_mut(0).fill(0.0);
        let err = t.embed(0, 0).unwrap_err();
        assert_eq!(err.kind(), "numeric");
        assert!(EmbeddingTable::<f64>::init(&[1], 16, &mut ChaCha12Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn score_interpolate_recovers_one_hot_and_midpoint() {
        let t = table_f64();
        let one_hot = t.score_interpolate(0, &[0.0, 1.0, 0.0]).unwrap();
        let direct = t.embed(0, 1).unwrap();
        assert!((&one_hot - &direct).mapv(f64::abs).sum() < 1e-12);

        let mid = t.score_interpolate(1, &[0.5, 0.5]).unwrap();
        let want = (t.embed(1, 0).unwrap() + t.embed(1, 1).unwrap()).mapv(|v| v * 0.5);
        assert!((&mid - &want).mapv(f64::abs).sum() < 1e-12);
    }

    #[test]
    fn score_interpolate_stays_inside_the_sphere() {
        let t = table_f64();
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        for _ in 0..1000 {
            let mut p = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
            let s: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= s);
            let e = t.score_interpolate(0, &p).unwrap();
            let norm = e.mapv(|v| v * v).sum().sqrt();
            assert!(norm <= 4.0 + 1e-9, "norm {norm} left the ball");
        }
    }

    #[test]
    fn score_interpolate_rejects_off_simplex_input() {
        let t = table_f64();
        assert!(t.score_interpolate(0, &[0.7, 0.4, -0.1]).is_err());
        assert!(t.score_interpolate(0, &[0.5, 0.2, 0.2]).is_err());
        assert!(t.score_interpolate(0, &[0.5, 0.5]).is_err());
    }

    #[test]
    fn nearest_decode_round_trips_and_breaks_ties_low() {
        let t = table_f64();
        for j in 0..t.features() {
            for k in 0..t.cardinality(j) {
                let e = t.embed(j, k).unwrap();
                assert_eq!(t.nearest_decode(j, e.view()).unwrap(), k);
            }
        }
        let mid = t.score_interpolate(1, &[0.5, 0.5]).unwrap();
        assert_eq!(t.nearest_decode(1, mid.view()).unwrap(), 0);
    }

    #[test]
    fn nearest_decode_tolerates_small_perturbations() {
        let t = table_f64();
        let j = 0;
        let mut min_gap = f64::INFINITY;
        for a in 0..t.cardinality(j) {
            for b in a + 1..t.cardinality(j) {
                let d = (&t.embed(j, a).unwrap() - &t.embed(j, b).unwrap())
                    .mapv(|v| v * v)
                    .sum()
                    .sqrt();
                min_gap = min_gap.min(d);
            }
        }
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for k in 0..t.cardinality(j) {
            let mut x = t.embed(j, k).unwrap();
            let mut noise = Array1::from_shape_fn(16, |_| rng.gen::<f64>() - 0.5);
            let norm = noise.mapv(|v| v * v).sum().sqrt();
            noise.mapv_inplace(|v| v / norm * (0.49 * min_gap));
            x = x + noise;
            assert_eq!(t.nearest_decode(j, x.view()).unwrap(), k);
        }
    }

    #[test]
    fn embed_gradient_matches_finite_differences() {
        let t = table_f64();
        let idx = Rc::new(vec![0usize, 2, 1, 2]);
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let weight = Array2::from_shape_fn((4, 16), |_| rng.gen::<f64>() * 2.0 - 1.0);
        let t_dim = t.dim();
        let build = move |tape: &mut Tape<f64>, ids: &[NodeId]| {
            let gathered = tape.gather_rows(ids[0], &idx);
            let normed = tape.normalize_rows(gathered, (t_dim as f64).sqrt());
            let w = tape.leaf(weight.clone());
            let weighted = tape.mul(normed, w);
            tape.sum_all(weighted)
        };
        let err = grad_check(&build, &[t.tables[0].clone()], 1e-6);
        assert!(err < 1e-5, "embed grad rel err {err}");
    }

    #[test]
    fn init_is_reproducible_per_seed() {
        let mut r1 = ChaCha12Rng::seed_from_u64(3);
        let mut r2 = ChaCha12Rng::seed_from_u64(3);
        let a = EmbeddingTable::<f32>::init(&[4, 3], 8, &mut r1).unwrap();
        let b = EmbeddingTable::<f32>::init(&[4, 3], 8, &mut r2).unwrap();
        for (x, y) in a.tables.iter().zip(b.tables.iter()) {
            assert_eq!(x, y);
        }
    }
}
