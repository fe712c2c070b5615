//! Dataset container format, normalization, imputation, CSV ingestion, and
//! the deterministic mixed-type toy generator.
//!
//! A dataset is a directory of four files: `manifest.json` describing the
//! schema, `num.f32` (little-endian f32, row-major [N, L, F_num]), `cat.u8`
//! (category indices, [N, L, F_cat]), and `labels.u8` ([N]). Categorical
//! cardinalities are capped at 255 by the byte storage.

use ndarray::{Array1, Array2, Array3, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.json";
const NUM_BLOB: &str = "num.f32";
const CAT_BLOB: &str = "cat.u8";
const LABEL_BLOB: &str = "labels.u8";
const LOCK_FILE: &str = ".lock";

/// A categorical feature: its name and number of categories.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatFeature {
    pub name: String,
    pub cardinality: usize,
}

/// Per-numerical-feature normalization statistics of the raw data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Dataset schema and bookkeeping. `normalization` is present exactly when
/// the stored numerical data has already been normalized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub n: usize,
    pub seq_len: usize,
    pub numerical: Vec<String>,
    pub categorical: Vec<CatFeature>,
    pub label: CatFeature,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<NormStats>,
    pub seed: u64,
}

impl DatasetManifest {
    fn validate(&self) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(Error::data(format!(
                "unknown dataset format version {} (supported: {FORMAT_VERSION})",
                self.version
            )));
        }
        if self.seq_len == 0 {
            return Err(Error::data("sequence length must be at least 1"));
        }
        for c in self.categorical.iter().chain(std::iter::once(&self.label)) {
            if c.cardinality < 2 || c.cardinality > 255 {
                return Err(Error::data(format!(
                    "categorical '{}' has cardinality {}; need 2..=255",
                    c.name, c.cardinality
                )));
            }
        }
        if let Some(stats) = &self.normalization {
            if stats.mean.len() != self.numerical.len() || stats.std.len() != self.numerical.len()
            {
                return Err(Error::data(
                    "normalization statistics do not cover every numerical feature",
                ));
            }
        }
        Ok(())
    }
}

/// In-memory dataset payload. Numerical is [N, L, F_num], categorical is
/// [N, L, F_cat] category indices, labels is [N].
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub numerical: Array3<f32>,
    pub categorical: Array3<u8>,
    pub labels: Array1<u8>,
}

impl SequenceBatch {
    pub fn n(&self) -> usize {
        self.numerical.dim().0
    }

    pub fn seq_len(&self) -> usize {
        self.numerical.dim().1
    }

    pub fn validate(&self, manifest: &DatasetManifest) -> Result<()> {
        let want_num = (manifest.n, manifest.seq_len, manifest.numerical.len());
        if self.numerical.dim() != want_num {
            return Err(Error::data(format!(
                "numerical shape {:?} does not match manifest {:?}",
                self.numerical.dim(),
                want_num
            )));
        }
        let want_cat = (manifest.n, manifest.seq_len, manifest.categorical.len());
        if self.categorical.dim() != want_cat {
            return Err(Error::data(format!(
                "categorical shape {:?} does not match manifest {:?}",
                self.categorical.dim(),
                want_cat
            )));
        }
        if self.labels.len() != manifest.n {
            return Err(Error::data(format!(
                "label count {} does not match manifest n={}",
                self.labels.len(),
                manifest.n
            )));
        }
        for ((i, l, f), &v) in self.numerical.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::data(format!(
                    "non-finite numerical value at sample {i}, time {l}, feature {f}"
                )));
            }
        }
        for ((i, l, j), &k) in self.categorical.indexed_iter() {
            if (k as usize) >= manifest.categorical[j].cardinality {
                return Err(Error::data(format!(
                    "category index {k} out of range {} at sample {i}, time {l}, feature {j}",
                    manifest.categorical[j].cardinality
                )));
            }
        }
        for (i, &y) in self.labels.iter().enumerate() {
            if (y as usize) >= manifest.label.cardinality {
                return Err(Error::data(format!(
                    "label {y} out of range {} at sample {i}",
                    manifest.label.cardinality
                )));
            }
        }
        Ok(())
    }

    /// Shift and scale each numerical feature to mean 0 and standard
    /// deviation 0.5 (the data scale the denoiser preconditioning assumes).
    /// Constant features (std 0) are mapped to 0 and restored exactly by
    /// `denormalize`.
    pub fn normalize(&mut self, stats: &NormStats) {
        let f_num = self.numerical.dim().2;
        assert_eq!(stats.mean.len(), f_num, "stats cover every feature");
        for f in 0..f_num {
            let scale = if stats.std[f] == 0.0 { 0.0 } else { 0.5 / stats.std[f] };
            let mean = stats.mean[f];
            for v in self.numerical.slice_mut(ndarray::s![.., .., f]).iter_mut() {
                *v = ((*v as f64 - mean) * scale) as f32;
            }
        }
    }

    /// Exact inverse of `normalize`.
    pub fn denormalize(&mut self, stats: &NormStats) {
        denormalize_array(&mut self.numerical, stats);
    }
}

/// Inverse of the normalization transform, applied to a raw [N, L, F] array.
pub fn denormalize_array(numerical: &mut Array3<f32>, stats: &NormStats) {
    let f_num = numerical.dim().2;
    assert_eq!(stats.mean.len(), f_num, "stats cover every feature");
    for f in 0..f_num {
        let scale = stats.std[f] / 0.5;
        let mean = stats.mean[f];
        for v in numerical.slice_mut(ndarray::s![.., .., f]).iter_mut() {
            *v = (*v as f64 * scale + mean) as f32;
        }
    }
}

/// Per-feature mean and (population) standard deviation over samples and
/// timesteps, computed in double precision.
pub fn compute_norm_stats(numerical: &ArrayView3<f32>) -> NormStats {
    let (n, l, f_num) = numerical.dim();
    let count = (n * l) as f64;
    let mut mean = vec![0.0; f_num];
    let mut std = vec![0.0; f_num];
    for f in 0..f_num {
        let mut sum = 0.0;
        for v in numerical.slice(ndarray::s![.., .., f]).iter() {
            sum += *v as f64;
        }
        let m = sum / count;
        let mut ss = 0.0;
        for v in numerical.slice(ndarray::s![.., .., f]).iter() {
            let d = *v as f64 - m;
            ss += d * d;
        }
        mean[f] = m;
        std[f] = (ss / count).sqrt();
    }
    NormStats { mean, std }
}

/// Exclusive-writer guard: a lock file that exists for the duration of a
/// dataset write and is removed on drop.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::data(format!(
                "dataset directory {} is locked by another writer",
                dir.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Write a dataset directory (manifest + three binary blobs).
pub fn write_dataset(dir: &Path, manifest: &DatasetManifest, batch: &SequenceBatch) -> Result<()> {
    manifest.validate()?;
    batch.validate(manifest)?;
    fs::create_dir_all(dir)?;
    let _lock = DirLock::acquire(dir)?;

    let manifest_json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::data(format!("manifest serialization failed: {e}")))?;
    fs::write(dir.join(MANIFEST_FILE), manifest_json)?;

    let mut num_bytes = Vec::with_capacity(batch.numerical.len() * 4);
    for &v in batch.numerical.iter() {
        num_bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::File::create(dir.join(NUM_BLOB))?.write_all(&num_bytes)?;

    let cat_bytes: Vec<u8> = batch.categorical.iter().copied().collect();
    fs::File::create(dir.join(CAT_BLOB))?.write_all(&cat_bytes)?;

    let label_bytes: Vec<u8> = batch.labels.iter().copied().collect();
    fs::File::create(dir.join(LABEL_BLOB))?.write_all(&label_bytes)?;
    Ok(())
}

fn read_blob(dir: &Path, name: &str, want_bytes: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(dir.join(name))
        .map_err(|e| Error::data(format!("cannot read {name}: {e}")))?;
    if bytes.len() != want_bytes {
        return Err(Error::data(format!(
            "{name}: expected {want_bytes} bytes, found {}",
            bytes.len()
        )));
    }
    Ok(bytes)
}

/// Read and validate a dataset directory.
pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, SequenceBatch)> {
    let manifest_raw = fs::read_to_string(dir.join(MANIFEST_FILE))
        .map_err(|e| Error::data(format!("cannot read {MANIFEST_FILE}: {e}")))?;
    let manifest: DatasetManifest = serde_json::from_str(&manifest_raw)
        .map_err(|e| Error::data(format!("malformed {MANIFEST_FILE}: {e}")))?;
    manifest.validate()?;

    let (n, l) = (manifest.n, manifest.seq_len);
    let f_num = manifest.numerical.len();
    let f_cat = manifest.categorical.len();

    let num_bytes = read_blob(dir, NUM_BLOB, n * l * f_num * 4)?;
    let values: Vec<f32> = num_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let numerical = Array3::from_shape_vec((n, l, f_num), values)
        .map_err(|e| Error::data(format!("{NUM_BLOB}: {e}")))?;

    let cat_bytes = read_blob(dir, CAT_BLOB, n * l * f_cat)?;
    let categorical = Array3::from_shape_vec((n, l, f_cat), cat_bytes)
        .map_err(|e| Error::data(format!("{CAT_BLOB}: {e}")))?;

    let label_bytes = read_blob(dir, LABEL_BLOB, n)?;
    let labels = Array1::from_vec(label_bytes);

    let batch = SequenceBatch {
        numerical,
        categorical,
        labels,
    };
    batch.validate(&manifest)?;
    Ok((manifest, batch))
}

/// Fill missing numerical entries (non-finite values) in place and return
/// the observation masks (1 = originally observed), shape [N, L, F].
///
/// The fill hierarchy per sample and feature: last observation carried
/// forward; leading gaps take the per-sample mean of observed entries; a
/// sample with no observations at all takes the dataset-wide feature mean.
/// A feature observed nowhere in the dataset is an error.
pub fn impute(numerical: &mut Array3<f32>, feature_names: &[String]) -> Result<Array3<u8>> {
    let (n, l, f_num) = numerical.dim();
    assert_eq!(feature_names.len(), f_num, "one name per feature");
    let mut mask = Array3::<u8>::zeros((n, l, f_num));

    // Dataset-wide observed means, and the everywhere-missing check.
    let mut dataset_mean = vec![0.0f64; f_num];
    for f in 0..f_num {
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..n {
            for t in 0..l {
                let v = numerical[[i, t, f]];
                if v.is_finite() {
                    sum += v as f64;
                    count += 1;
                }
            }
        }
        if count == 0 {
            return Err(Error::data(format!(
                "feature '{}' has no observed values in the dataset",
                feature_names[f]
            )));
        }
        dataset_mean[f] = sum / count as f64;
    }

    for i in 0..n {
        for f in 0..f_num {
            let mut sum = 0.0f64;
            let mut count = 0usize;
            for t in 0..l {
                if numerical[[i, t, f]].is_finite() {
                    mask[[i, t, f]] = 1;
                    sum += numerical[[i, t, f]] as f64;
                    count += 1;
                }
            }
            let sample_mean = if count > 0 {
                (sum / count as f64) as f32
            } else {
                dataset_mean[f] as f32
            };
            let mut last: Option<f32> = None;
            for t in 0..l {
                if mask[[i, t, f]] == 1 {
                    last = Some(numerical[[i, t, f]]);
                } else {
                    numerical[[i, t, f]] = last.unwrap_or(sample_mean);
                }
            }
        }
    }
    Ok(mask)
}

// --- Toy generator -------------------------------------------------------

const TOY_STATES: usize = 3;
const TOY_STAY: f64 = 0.85;
const TOY_AR: f64 = 0.8;
const TOY_NOISE: f64 = 0.1;
/// Regime means per numerical feature: `TOY_MEANS[feature][regime]`.
const TOY_MEANS: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [1.0, 0.0, -1.0], [0.0, 1.0, -1.0]];
const TOY_OBS_CORRECT: f64 = 0.9;
const TOY_MASK_P: [f64; 3] = [0.95, 0.8, 0.6];

pub const TOY_NUM_FEATURES: usize = 3;
pub const TOY_CAT_FEATURES: usize = 2;
pub const TOY_DEFAULT_SEQ_LEN: usize = 24;

/// Toy trajectories plus the hidden regime path that generated them, for
/// diagnostics and statistical tests. Regimes are [N, L].
pub struct ToyDraw {
    pub batch: SequenceBatch,
    pub regimes: Array2<u8>,
}

/// Draw `n` sequences from the hidden-regime toy process.
///
/// Per sample: a 3-state Markov regime path (uniform start, self-transition
/// 0.85), three AR(1) numerical features pulled toward per-regime means, a
/// noisy regime observation (correct with probability 0.9), an observation
/// mask whose rate depends on the regime, and a binary label marking samples
/// that spend more than a third of their time in regime 2.
pub fn toy_draw(n: usize, seq_len: usize, seed: u64) -> ToyDraw {
    assert!(n >= 1 && seq_len >= 1);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut numerical = Array3::<f32>::zeros((n, seq_len, TOY_NUM_FEATURES));
    let mut categorical = Array3::<u8>::zeros((n, seq_len, TOY_CAT_FEATURES));
    let mut labels = Array1::<u8>::zeros(n);
    let mut regimes = Array2::<u8>::zeros((n, seq_len));
    // Start the AR(1) chains in their stationary law about the regime mean.
    let x0_std = TOY_NOISE / (1.0 - TOY_AR * TOY_AR).sqrt();

    for i in 0..n {
        regimes[[i, 0]] = (rng.gen::<f64>() * TOY_STATES as f64) as u8;
        for t in 1..seq_len {
            let prev = regimes[[i, t - 1]];
            // Two draws per step regardless of branch, to pin the stream.
            let u_stay = rng.gen::<f64>();
            let u_which = rng.gen::<f64>();
            regimes[[i, t]] = if u_stay < TOY_STAY {
                prev
            } else {
                let others = [(prev + 1) % 3, (prev + 2) % 3];
                let pick = usize::from(u_which >= 0.5);
                others[pick.min(1)]
            };
        }

        for f in 0..TOY_NUM_FEATURES {
            let mut x = 0.0f64;
            for t in 0..seq_len {
                let mu = TOY_MEANS[f][regimes[[i, t]] as usize];
                let eta: f64 = rng.sample(rand_distr::StandardNormal);
                x = if t == 0 {
                    mu + x0_std * eta
                } else {
                    mu + TOY_AR * (x - mu) + TOY_NOISE * eta
                };
                numerical[[i, t, f]] = x as f32;
            }
        }

        for t in 0..seq_len {
            let r = regimes[[i, t]];
            let u_correct = rng.gen::<f64>();
            let u_which = rng.gen::<f64>();
            categorical[[i, t, 0]] = if u_correct < TOY_OBS_CORRECT {
                r
            } else {
                let others = [(r + 1) % 3, (r + 2) % 3];
                others[usize::from(u_which >= 0.5)]
            };
        }
        for t in 0..seq_len {
            let r = regimes[[i, t]] as usize;
            categorical[[i, t, 1]] = u8::from(rng.gen::<f64>() < TOY_MASK_P[r]);
        }

        let in_two = (0..seq_len).filter(|&t| regimes[[i, t]] == 2).count();
        labels[i] = u8::from(in_two as f64 / seq_len as f64 > 1.0 / 3.0);
    }

    ToyDraw {
        batch: SequenceBatch {
            numerical,
            categorical,
            labels,
        },
        regimes,
    }
}

/// Toy dataset with its manifest, ready for `write_dataset`.
pub fn gen_toy(n: usize, seq_len: usize, seed: u64) -> (DatasetManifest, SequenceBatch) {
    let draw = toy_draw(n, seq_len, seed);
    let manifest = DatasetManifest {
        version: FORMAT_VERSION,
        n,
        seq_len,
        numerical: vec!["ar0".into(), "ar1".into(), "ar2".into()],
        categorical: vec![
            CatFeature {
                name: "regime_obs".into(),
                cardinality: 3,
            },
            CatFeature {
                name: "obs_mask".into(),
                cardinality: 2,
            },
        ],
        label: CatFeature {
            name: "label".into(),
            cardinality: 2,
        },
        normalization: None,
        seed,
    };
    (manifest, draw.batch)
}

// --- CSV ingestion -------------------------------------------------------

/// Declaration of a categorical CSV feature: raw string values map to
/// category indices by position.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CsvCatFeature {
    pub name: String,
    pub values: Vec<String>,
}

/// Column mapping and schema declaration for long-format CSV ingestion.
/// Rows are (sample id, time index, feature name, value); the label is a
/// feature that must appear at least once per sample with a consistent
/// value.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvMapping {
    pub sample_id: String,
    pub time_index: String,
    pub feature: String,
    pub value: String,
    pub seq_len: usize,
    pub numerical: Vec<String>,
    pub categorical: Vec<CsvCatFeature>,
    pub label: CsvCatFeature,
}

/// Ingest a long-format CSV into a dataset: numerical gaps are imputed (with
/// observation masks appended as extra categorical features), categorical
/// cells must be fully observed. Sample order follows first appearance in
/// the file.
pub fn ingest_csv(csv_path: &Path, mapping: &CsvMapping) -> Result<(DatasetManifest, SequenceBatch)> {
    if mapping.seq_len == 0 {
        return Err(Error::data("mapping seq_len must be at least 1"));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(csv_path)
        .map_err(|e| Error::data(format!("cannot open CSV: {e}")))?;

    let headers = reader
        .headers()
        .map_err(|e| Error::data(format!("cannot read CSV header: {e}")))?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::data(format!("CSV is missing column '{name}'")))
    };
    let c_sample = col(&mapping.sample_id)?;
    let c_time = col(&mapping.time_index)?;
    let c_feature = col(&mapping.feature)?;
    let c_value = col(&mapping.value)?;

    let num_index: HashMap<&str, usize> = mapping
        .numerical
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let cat_index: HashMap<&str, usize> = mapping
        .categorical
        .iter()
        .enumerate()
        .map(|(i, c)| (c.name.as_str(), i))
        .collect();

    let l = mapping.seq_len;
    let f_num = mapping.numerical.len();
    let f_cat = mapping.categorical.len();
    let mut sample_order: Vec<String> = Vec::new();
    let mut sample_index: HashMap<String, usize> = HashMap::new();
    let mut num_rows: Vec<Vec<f32>> = Vec::new(); // per sample, L*F_num, NaN = missing
    let mut cat_rows: Vec<Vec<i16>> = Vec::new(); // per sample, L*F_cat, -1 = missing
    let mut label_rows: Vec<Option<u8>> = Vec::new();

    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::data(format!("CSV row {}: {e}", line + 2)))?;
        let row_err = |msg: String| Error::data(format!("CSV row {}: {msg}", line + 2));
        let get = |c: usize| record.get(c).unwrap_or("").trim();

        let sid = get(c_sample).to_string();
        if sid.is_empty() {
            return Err(row_err("empty sample id".into()));
        }
        let idx = *sample_index.entry(sid.clone()).or_insert_with(|| {
            sample_order.push(sid);
            num_rows.push(vec![f32::NAN; l * f_num]);
            cat_rows.push(vec![-1; l * f_cat]);
            label_rows.push(None);
            sample_order.len() - 1
        });

        let feat = get(c_feature);
        let value = get(c_value);

        if feat == mapping.label.name {
            let k = mapping
                .label
                .values
                .iter()
                .position(|v| v == value)
                .ok_or_else(|| row_err(format!("unknown label value '{value}'")))?;
            match label_rows[idx] {
                Some(prev) if prev as usize != k => {
                    return Err(row_err(format!(
                        "conflicting label for sample '{}'",
                        sample_order[idx]
                    )));
                }
                _ => label_rows[idx] = Some(k as u8),
            }
            continue;
        }

        let t: usize = get(c_time)
            .parse()
            .map_err(|_| row_err(format!("bad time index '{}'", get(c_time))))?;
        if t >= l {
            return Err(row_err(format!("time index {t} outside 0..{l}")));
        }

        if let Some(&f) = num_index.get(feat) {
            let v: f32 = value
                .parse()
                .map_err(|_| row_err(format!("bad numerical value '{value}'")))?;
            let cell = &mut num_rows[idx][t * f_num + f];
            if cell.is_finite() {
                return Err(row_err(format!(
                    "duplicate value for sample '{}', time {t}, feature '{feat}'",
                    sample_order[idx]
                )));
            }
            *cell = v;
        } else if let Some(&j) = cat_index.get(feat) {
            let k = mapping.categorical[j]
                .values
                .iter()
                .position(|v| v == value)
                .ok_or_else(|| row_err(format!("unknown value '{value}' for '{feat}'")))?;
            let cell = &mut cat_rows[idx][t * f_cat + j];
            if *cell >= 0 {
                return Err(row_err(format!(
                    "duplicate value for sample '{}', time {t}, feature '{feat}'",
                    sample_order[idx]
                )));
            }
            *cell = k as i16;
        } else {
            return Err(row_err(format!("undeclared feature '{feat}'")));
        }
    }

    let n = sample_order.len();
    if n == 0 {
        return Err(Error::data("CSV contains no data rows"));
    }

    let mut numerical = Array3::<f32>::zeros((n, l, f_num));
    let mut categorical = Array3::<u8>::zeros((n, l, f_cat + f_num));
    let mut labels = Array1::<u8>::zeros(n);
    for i in 0..n {
        labels[i] = label_rows[i].ok_or_else(|| {
            Error::data(format!("sample '{}' has no label row", sample_order[i]))
        })?;
        for t in 0..l {
            for f in 0..f_num {
                numerical[[i, t, f]] = num_rows[i][t * f_num + f];
            }
            for j in 0..f_cat {
                let v = cat_rows[i][t * f_cat + j];
                if v < 0 {
                    return Err(Error::data(format!(
                        "categorical '{}' missing for sample '{}' at time {t}",
                        mapping.categorical[j].name, sample_order[i]
                    )));
                }
                categorical[[i, t, j]] = v as u8;
            }
        }
    }

    let mask = impute(&mut numerical, &mapping.numerical)?;
    for i in 0..n {
        for t in 0..l {
            for f in 0..f_num {
                categorical[[i, t, f_cat + f]] = mask[[i, t, f]];
            }
        }
    }

    let mut cat_features: Vec<CatFeature> = mapping
        .categorical
        .iter()
        .map(|c| CatFeature {
            name: c.name.clone(),
            cardinality: c.values.len(),
        })
        .collect();
    for name in &mapping.numerical {
        cat_features.push(CatFeature {
            name: format!("{name}_mask"),
            cardinality: 2,
        });
    }

    let manifest = DatasetManifest {
        version: FORMAT_VERSION,
        n,
        seq_len: l,
        numerical: mapping.numerical.clone(),
        categorical: cat_features,
        label: CatFeature {
            name: mapping.label.name.clone(),
            cardinality: mapping.label.values.len(),
        },
        normalization: None,
        seed: 0,
    };
    let batch = SequenceBatch {
        numerical,
        categorical,
        labels,
    };
    manifest.validate()?;
    batch.validate(&manifest)?;
    Ok((manifest, batch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::s;
    use tempfile::TempDir;

    fn toy_dataset(n: usize) -> (DatasetManifest, SequenceBatch) {
        gen_toy(n, TOY_DEFAULT_SEQ_LEN, 42)
    }

    #[test]
    fn write_read_round_trip_is_bit_exact() {
        let dir = TempDir::new().unwrap();
        let (manifest, batch) = toy_dataset(16);
        write_dataset(dir.path(), &manifest, &batch).unwrap();
        let (m2, b2) = read_dataset(dir.path()).unwrap();
        assert_eq!(manifest, m2);
        assert_eq!(batch, b2);
        assert!(!dir.path().join(LOCK_FILE).exists());
    }

    #[test]
    fn truncated_blob_names_the_file() {
        let dir = TempDir::new().unwrap();
        let (manifest, batch) = toy_dataset(4);
        write_dataset(dir.path(), &manifest, &batch).unwrap();
        let blob = dir.path().join(NUM_BLOB);
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
        let err = read_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains(NUM_BLOB), "message was: {err}");
    }

    #[test]
    fn out_of_range_category_reports_coordinates() {
        let dir = TempDir::new().unwrap();
        let (manifest, mut batch) = toy_dataset(4);
        batch.categorical[[2, 5, 0]] = 3; // regime_obs has cardinality 3
        let err = write_dataset(dir.path(), &manifest, &batch)
            .unwrap_err()
            .to_string();
        for needle in ["sample 2", "time 5", "feature 0"] {
            assert!(err.contains(needle), "message was: {err}");
        }
    }

    #[test]
    fn unknown_version_is_rejected() {
        let dir = TempDir::new().unwrap();
        let (mut manifest, batch) = toy_dataset(4);
        write_dataset(dir.path(), &manifest, &batch).unwrap();
        manifest.version = 9;
        let raw = serde_json::to_string(&manifest).unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), raw).unwrap();
        let err = read_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("version"), "message was: {err}");
    }

    #[test]
    fn existing_lock_blocks_writers() {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join(LOCK_FILE), b"").unwrap();
        let (manifest, batch) = toy_dataset(2);
        let err = write_dataset(dir.path(), &manifest, &batch).unwrap_err();
        assert!(err.to_string().contains("locked"), "got: {err}");
    }

    #[test]
    fn normalization_hits_target_scale_and_inverts() {
        let (_, mut batch) = toy_dataset(256);
        let original = batch.clone();
        let stats = compute_norm_stats(&batch.numerical.view());
        batch.normalize(&stats);
        let after = compute_norm_stats(&batch.numerical.view());
        for f in 0..3 {
            assert!(after.mean[f].abs() < 1e-6, "mean {}", after.mean[f]);
            assert!((after.std[f] - 0.5).abs() < 1e-6, "std {}", after.std[f]);
        }
        batch.denormalize(&stats);
        for (a, b) in batch.numerical.iter().zip(original.numerical.iter()) {
            let rel = (a - b).abs() / b.abs().max(1.0);
            assert!(rel < 1e-5, "round trip {a} vs {b}");
        }
    }

    #[test]
    fn constant_feature_round_trips_exactly() {
        let mut numerical = Array3::<f32>::from_elem((5, 4, 2), 0.0);
        numerical.slice_mut(s![.., .., 0]).fill(3.25);
        for (idx, v) in numerical.slice_mut(s![.., .., 1]).iter_mut().enumerate() {
            *v = idx as f32;
        }
        let mut batch = SequenceBatch {
            numerical,
            categorical: Array3::zeros((5, 4, 0)),
            labels: Array1::zeros(5),
        };
        let stats = compute_norm_stats(&batch.numerical.view());
        assert_eq!(stats.std[0], 0.0);
        batch.normalize(&stats);
        assert!(batch.numerical.slice(s![.., .., 0]).iter().all(|&v| v == 0.0));
        batch.denormalize(&stats);
        assert!(batch.numerical.slice(s![.., .., 0]).iter().all(|&v| v == 3.25));
    }

    #[test]
    fn impute_follows_the_fill_hierarchy() {
        let mut num = Array3::<f32>::zeros((1, 4, 1));
        num[[0, 0, 0]] = f32::NAN;
        num[[0, 1, 0]] = 2.0;
        num[[0, 2, 0]] = f32::NAN;
        num[[0, 3, 0]] = 3.0;
        let mask = impute(&mut num, &["a".into()]).unwrap();
        let want = [2.5, 2.0, 2.0, 3.0];
        for t in 0..4 {
            assert!((num[[0, t, 0]] - want[t]).abs() < 1e-6, "t={t}");
        }
        assert_eq!(
            mask.iter().copied().collect::<Vec<_>>(),
            vec![0, 1, 0, 1]
        );
    }

    #[test]
    fn impute_leaves_observed_data_unchanged() {
        let (_, mut batch) = toy_dataset(8);
        let original = batch.numerical.clone();
        // Punch a hole pattern, impute, then compare observed cells.
        for i in 0..8 {
            for t in 0..batch.seq_len() {
                if (i + t) % 3 == 0 {
                    batch.numerical[[i, t, 1]] = f32::NAN;
                }
            }
        }
        let names = vec!["a".into(), "b".into(), "c".into()];
        let mask = impute(&mut batch.numerical, &names).unwrap();
        for ((i, t, f), &m) in mask.indexed_iter() {
            if m == 1 {
                assert_eq!(batch.numerical[[i, t, f]], original[[i, t, f]]);
            }
            assert!(batch.numerical[[i, t, f]].is_finite());
        }
    }

    #[test]
    fn impute_uses_dataset_mean_for_empty_samples() {
        let mut num = Array3::<f32>::zeros((2, 3, 1));
        num[[0, 0, 0]] = 1.0;
        num[[0, 1, 0]] = 2.0;
        num[[0, 2, 0]] = 3.0;
        for t in 0..3 {
            num[[1, t, 0]] = f32::NAN;
        }
        impute(&mut num, &["a".into()]).unwrap();
        for t in 0..3 {
            assert!((num[[1, t, 0]] - 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn impute_rejects_feature_missing_everywhere() {
        let mut num = Array3::<f32>::from_elem((2, 3, 2), f32::NAN);
        num.slice_mut(s![.., .., 0]).fill(1.0);
        let err = impute(&mut num, &["ok".into(), "gone".into()]).unwrap_err();
        assert!(err.to_string().contains("gone"), "got: {err}");
    }

    #[test]
    fn toy_generation_is_deterministic_with_expected_shapes() {
        let (m1, b1) = gen_toy(10, 24, 7);
        let (m2, b2) = gen_toy(10, 24, 7);
        assert_eq!(m1, m2);
        assert_eq!(b1, b2);
        assert_eq!(b1.numerical.dim(), (10, 24, 3));
        assert_eq!(b1.categorical.dim(), (10, 24, 2));
        assert_eq!(b1.labels.len(), 10);
        let (_, b3) = gen_toy(10, 24, 8);
        assert_ne!(b1, b3);
    }

    /// Exact label prevalence by dynamic programming over (state, count of
    /// regime-2 visits): an oracle independent of the generator's RNG path.
    fn exact_label_prevalence(seq_len: usize) -> f64 {
        let mut dp = vec![vec![0.0f64; seq_len + 1]; TOY_STATES];
        for (s, row) in dp.iter_mut().enumerate() {
            row[usize::from(s == 2)] = 1.0 / TOY_STATES as f64;
        }
        let off = (1.0 - TOY_STAY) / 2.0;
        for _ in 1..seq_len {
            let mut next = vec![vec![0.0f64; seq_len + 1]; TOY_STATES];
            for s in 0..TOY_STATES {
                for c in 0..seq_len {
                    let p = dp[s][c];
                    if p == 0.0 {
                        continue;
                    }
                    for s2 in 0..TOY_STATES {
                        let pr = if s2 == s { TOY_STAY } else { off };
                        next[s2][c + usize::from(s2 == 2)] += p * pr;
                    }
                }
            }
            dp = next;
        }
        let threshold = seq_len as f64 / 3.0;
        let mut total = 0.0;
        for row in &dp {
            for (c, p) in row.iter().enumerate() {
                if c as f64 > threshold {
                    total += p;
                }
            }
        }
        total
    }

    #[test]
    fn label_prevalence_matches_the_exact_chain_oracle() {
        let exact = exact_label_prevalence(24);
        assert!(
            (exact - 0.42870492048820386).abs() < 1e-12,
            "oracle drifted: {exact}"
        );
        let n = 100_000;
        let draw = toy_draw(n, 24, 123);
        let observed = draw.batch.labels.iter().map(|&y| y as f64).sum::<f64>() / n as f64;
        let se = (exact * (1.0 - exact) / n as f64).sqrt();
        assert!(
            (observed - exact).abs() < 3.0 * se,
            "observed {observed} vs exact {exact} (3se {})",
            3.0 * se
        );
    }

    #[test]
    fn toy_statistics_match_their_generating_parameters() {
        let n = 100_000;
        let l = 24;
        let draw = toy_draw(n, l, 321);

        // Regime occupancy: uniform by symmetry.
        let mut occ = [0usize; 3];
        for &r in draw.regimes.iter() {
            occ[r as usize] += 1;
        }
        let total = (n * l) as f64;
        for o in occ {
            let p = o as f64 / total;
            assert!((p - 1.0 / 3.0).abs() < 0.01, "occupancy {p}");
        }

        // Self-transition rate.
        let mut stay = 0usize;
        let mut trans = 0usize;
        for i in 0..n {
            for t in 1..l {
                trans += 1;
                stay += usize::from(draw.regimes[[i, t]] == draw.regimes[[i, t - 1]]);
            }
        }
        let stay_rate = stay as f64 / trans as f64;
        let se = (TOY_STAY * (1.0 - TOY_STAY) / trans as f64).sqrt();
        assert!((stay_rate - TOY_STAY).abs() < 3.0 * se, "stay {stay_rate}");

        // AR coefficient: regress (x_{t+1} - mu) on (x_t - mu) over pairs
        // that stay in one regime; the conditional mean is exactly 0.8 x.
        let mut sxx = 0.0;
        let mut sxy = 0.0;
        for i in 0..n {
            for t in 1..l {
                if draw.regimes[[i, t]] != draw.regimes[[i, t - 1]] {
                    continue;
                }
                let r = draw.regimes[[i, t]] as usize;
                let x = draw.batch.numerical[[i, t - 1, 0]] as f64 - TOY_MEANS[0][r];
                let y = draw.batch.numerical[[i, t, 0]] as f64 - TOY_MEANS[0][r];
                sxx += x * x;
                sxy += x * y;
            }
        }
        let slope = sxy / sxx;
        assert!((slope - TOY_AR).abs() < 0.01, "ar slope {slope}");

        // Noisy regime observation accuracy.
        let mut correct = 0usize;
        for i in 0..n {
            for t in 0..l {
                correct +=
                    usize::from(draw.batch.categorical[[i, t, 0]] == draw.regimes[[i, t]]);
            }
        }
        let acc = correct as f64 / total;
        let se = (TOY_OBS_CORRECT * (1.0 - TOY_OBS_CORRECT) / total).sqrt();
        assert!((acc - TOY_OBS_CORRECT).abs() < 3.0 * se, "obs accuracy {acc}");

        // Mask rate per regime.
        for r in 0..3 {
            let mut on = 0usize;
            let mut count = 0usize;
            for i in 0..n {
                for t in 0..l {
                    if draw.regimes[[i, t]] as usize == r {
                        count += 1;
                        on += draw.batch.categorical[[i, t, 1]] as usize;
                    }
                }
            }
            let rate = on as f64 / count as f64;
            let p = TOY_MASK_P[r];
            let se = (p * (1.0 - p) / count as f64).sqrt();
            assert!((rate - p).abs() < 3.0 * se, "mask rate {rate} regime {r}");
        }
    }

    fn demo_mapping() -> CsvMapping {
        CsvMapping {
            sample_id: "id".into(),
            time_index: "t".into(),
            feature: "var".into(),
            value: "val".into(),
            seq_len: 3,
            numerical: vec!["hr".into()],
            categorical: vec![CsvCatFeature {
                name: "state".into(),
                values: vec!["lo".into(), "hi".into()],
            }],
            label: CsvCatFeature {
                name: "outcome".into(),
                values: vec!["neg".into(), "pos".into()],
            },
        }
    }

    fn write_csv(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("data.csv");
        fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn csv_ingestion_builds_the_expected_dataset() {
        let dir = TempDir::new().unwrap();
        let csv = write_csv(
            dir.path(),
            "id,t,var,val\n\
             a,0,hr,60\n\
             a,2,hr,66\n\
             a,0,state,lo\n\
             a,1,state,hi\n\
             a,2,state,hi\n\
             a,0,outcome,pos\n\
             b,0,hr,80\n\
             b,1,hr,82\n\
             b,2,hr,84\n\
             b,0,state,lo\n\
             b,1,state,lo\n\
             b,2,state,lo\n\
             b,1,outcome,neg\n",
        );
        let (manifest, batch) = ingest_csv(&csv, &demo_mapping()).unwrap();
        assert_eq!(manifest.n, 2);
        assert_eq!(manifest.numerical, vec!["hr".to_string()]);
        assert_eq!(manifest.categorical.len(), 2); // state + hr_mask
        assert_eq!(manifest.categorical[1].name, "hr_mask");

        // Sample a: hr missing at t=1 -> carried forward from 60.
        assert_eq!(batch.numerical[[0, 0, 0]], 60.0);
        assert_eq!(batch.numerical[[0, 1, 0]], 60.0);
        assert_eq!(batch.numerical[[0, 2, 0]], 66.0);
        assert_eq!(batch.categorical[[0, 1, 1]], 0); // mask says imputed
        assert_eq!(batch.categorical[[0, 0, 1]], 1);
        assert_eq!(batch.categorical[[0, 1, 0]], 1); // state hi
        assert_eq!(batch.labels[0], 1);
        assert_eq!(batch.labels[1], 0);
    }

    #[test]
    fn csv_ingestion_rejects_malformed_input() {
        let dir = TempDir::new().unwrap();
        let mapping = demo_mapping();
        let base = "id,t,var,val\na,0,hr,60\na,0,state,lo\na,1,state,lo\na,2,state,lo\na,0,outcome,pos\n";

        let cases: Vec<(&str, &str)> = vec![
            ("a,1,bp,70\n", "undeclared feature"),
            ("a,9,hr,70\n", "time index"),
            ("a,1,hr,abc\n", "bad numerical value"),
            ("a,1,state,mid\n", "unknown value"),
            ("a,0,hr,61\n", "duplicate"),
            ("a,1,outcome,neg\n", "conflicting label"),
        ];
        for (extra, needle) in cases {
            let csv = write_csv(dir.path(), &format!("{base}{extra}"));
            let err = ingest_csv(&csv, &mapping).unwrap_err().to_string();
            assert!(err.contains(needle), "want '{needle}' in: {err}");
        }

        // Missing categorical cell.
        let csv = write_csv(
            dir.path(),
            "id,t,var,val\na,0,hr,60\na,0,state,lo\na,2,state,lo\na,0,outcome,pos\n",
        );
        let err = ingest_csv(&csv, &mapping).unwrap_err().to_string();
        assert!(err.contains("state"), "got: {err}");

        // Missing label.
        let csv = write_csv(
            dir.path(),
            "id,t,var,val\na,0,hr,60\na,0,state,lo\na,1,state,lo\na,2,state,lo\n",
        );
        let err = ingest_csv(&csv, &mapping).unwrap_err().to_string();
        assert!(err.contains("label"), "got: {err}");
    }
}
