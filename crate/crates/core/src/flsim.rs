//! Desk-scale federated training with per-device weight quantization:
//! local SGD where every step is followed by stochastic rounding of the
//! weights, and full-precision weighted averaging at the server.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convergence::FitTrace;
use crate::error::{FwqError, Result};
use crate::models::{comm_energy, comp_energy, DeviceProfile, NetworkConfig};
use crate::quantizer::{quantize_in_place, QuantScheme};
use crate::rng::substream;
use crate::scalar::Scalar;

/// Loss growth factor over the initial loss that aborts a run.
pub const DIVERGENCE_FACTOR: f64 = 1e3;

/// Weight precision of one device. `Full` bypasses quantization; `Bits(32)`
/// still runs the 32-bit quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PrecisionRepr", into = "PrecisionRepr")]
pub enum Precision {
    Full,
    Bits(u32),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum PrecisionRepr {
    Bits(u32),
    Word(String),
}

impl TryFrom<PrecisionRepr> for Precision {
    type Error = String;

    fn try_from(r: PrecisionRepr) -> std::result::Result<Self, String> {
        match r {
            PrecisionRepr::Bits(q) if (2..=32).contains(&q) => Ok(Precision::Bits(q)),
            PrecisionRepr::Bits(q) => Err(format!("bit-width {q} outside [2, 32]")),
            PrecisionRepr::Word(w) if w == "full" => Ok(Precision::Full),
            PrecisionRepr::Word(w) => Err(format!("unknown precision {w:?}, expected an integer or \"full\"")),
        }
    }
}

impl From<Precision> for PrecisionRepr {
    fn from(p: Precision) -> Self {
        match p {
            Precision::Full => PrecisionRepr::Word("full".into()),
            Precision::Bits(q) => PrecisionRepr::Bits(q),
        }
    }
}

impl Precision {
    /// Bit-width used for energy accounting.
    pub fn energy_bits(self) -> u32 {
        match self {
            Precision::Full => 32,
            Precision::Bits(q) => q,
        }
    }
}

/// Labelled samples, features stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub features: Vec<T>,
    pub labels: Vec<usize>,
    pub dim: usize,
    pub classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let mut features = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            features.extend_from_slice(self.row(i));
        }
        Self {
            features,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            dim: self.dim,
            classes: self.classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub dim: usize,
    pub classes: usize,
    /// Scale of the class means; the within-class noise is unit variance.
    pub separation: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_test: 500,
            dim: 20,
            classes: 10,
            separation: 1.5,
        }
    }
}

/// Gaussian class-conditional mixture: class means drawn once from
/// `N(0, separation^2 I)`, samples `mean + N(0, I)`, balanced labels.
pub fn synthetic_dataset<T: Scalar>(spec: &SyntheticSpec, seed: u64) -> (Dataset<T>, Dataset<T>) {
    let mut rng = substream(seed, "data", 0);
    let means: Vec<f64> = (0..spec.classes * spec.dim)
        .map(|_| spec.separation * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let draw = |n: usize, rng: &mut ChaCha8Rng| {
        let mut features = Vec::with_capacity(n * spec.dim);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % spec.classes;
            for j in 0..spec.dim {
                let z: f64 = StandardNormal.sample(rng);
                features.push(T::lit(means[c * spec.dim + j] + z));
            }
            labels.push(c);
        }
        Dataset {
            features,
            labels,
            dim: spec.dim,
            classes: spec.classes,
        }
    };
    let train = draw(spec.n_train, &mut rng);
    let test = draw(spec.n_test, &mut rng);
    (train, test)
}

/// Splits `data` into `n` equal shards holding `label_skew` classes each.
/// Device `i` holds classes `(i * skew + j) mod C`; every class is divided
/// evenly among its holders. Returns the shards and their weights.
pub fn partition_data<T: Scalar>(
    data: &Dataset<T>,
    n: usize,
    label_skew: usize,
    seed: u64,
) -> Result<(Vec<Dataset<T>>, Vec<T>)> {
    let classes = data.classes;
    if n == 0 || label_skew == 0 || label_skew > classes {
        return Err(FwqError::Partition(format!(
            "need n >= 1 and 1 <= label_skew <= {classes}, got n = {n}, label_skew = {label_skew}"
        )));
    }
    let mut rng = substream(seed, "partition", 0);
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in data.labels.iter().enumerate() {
        pools[y].push(i);
    }
    for pool in &mut pools {
        for i in (1..pool.len()).rev() {
            let j = rng.random_range(0..=i);
            pool.swap(i, j);
        }
    }
    let held: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..label_skew).map(|j| (i * label_skew + j) % classes).collect())
        .collect();
    let mut holders = vec![0usize; classes];
    for h in &held {
        for &c in h {
            holders[c] += 1;
        }
    }
    let per_class = (0..classes)
        .filter(|&c| holders[c] > 0)
        .map(|c| pools[c].len() / holders[c])
        .min()
        .unwrap_or(0)
        .min(data.len() / n / label_skew);
    if per_class == 0 {
        return Err(FwqError::Partition(format!(
            "{} samples are too few for {n} devices with {label_skew} classes each",
            data.len()
        )));
    }
    let mut cursor = vec![0usize; classes];
    let shards: Vec<Dataset<T>> = held
        .iter()
        .map(|cls| {
            let mut idx = Vec::with_capacity(per_class * label_skew);
            for &c in cls {
                idx.extend_from_slice(&pools[c][cursor[c]..cursor[c] + per_class]);
                cursor[c] += per_class;
            }
            data.subset(&idx)
        })
        .collect();
    let total: usize = shards.iter().map(|s| s.len()).sum();
    let pis = shards
        .iter()
        .map(|s| T::from_usize_lossy(s.len()) / T::from_usize_lossy(total))
        .collect();
    Ok((shards, pis))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    Logistic,
    /// One hidden `tanh` layer.
    Mlp { hidden: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyModel<T> {
    pub kind: ModelKind,
    pub dim: usize,
    pub classes: usize,
    pub weights: Vec<T>,
}

impl<T: Scalar> TinyModel<T> {
    pub fn new(kind: ModelKind, dim: usize, classes: usize, rng: &mut impl Rng) -> Self {
        let n = Self::param_count(kind, dim, classes);
        let mut weights = vec![T::zero(); n];
        let m = Self { kind, dim, classes, weights: Vec::new() };
        for (t, r) in m.tensor_ranges().into_iter().enumerate() {
            // weight matrices get Xavier-scaled noise, biases start at zero
            let fan_in = match (kind, t) {
                (ModelKind::Logistic, 0) => Some(dim),
                (ModelKind::Mlp { .. }, 0) => Some(dim),
                (ModelKind::Mlp { hidden }, 2) => Some(hidden),
                _ => None,
            };
            if let Some(fan) = fan_in {
                let sd = (1.0 / fan as f64).sqrt() * if matches!(kind, ModelKind::Logistic) { 0.01 } else { 1.0 };
                for w in &mut weights[r] {
                    *w = T::lit(sd * rng.sample::<f64, _>(StandardNormal));
                }
            }
        }
        Self { weights, ..m }
    }

    pub fn param_count(kind: ModelKind, dim: usize, classes: usize) -> usize {
        match kind {
            ModelKind::Logistic => classes * dim + classes,
            ModelKind::Mlp { hidden } => hidden * dim + hidden + classes * hidden + classes,
        }
    }

    /// Index ranges of the individual tensors (quantized with separate scales).
    pub fn tensor_ranges(&self) -> Vec<Range<usize>> {
        let (d, c) = (self.dim, self.classes);
        match self.kind {
            ModelKind::Logistic => vec![0..c * d, c * d..c * d + c],
            ModelKind::Mlp { hidden: h } => {
                let a = h * d;
                let b = a + h;
                let w2 = b + c * h;
                vec![0..a, a..b, b..w2, w2..w2 + c]
            }
        }
    }

    fn logits(&self, w: &[T], x: &[T], hidden_out: &mut Vec<T>, out: &mut [T]) {
        let (d, c) = (self.dim, self.classes);
        match self.kind {
            ModelKind::Logistic => {
                for k in 0..c {
                    let row = &w[k * d..(k + 1) * d];
                    out[k] = row.iter().zip(x).map(|(&a, &b)| a * b).sum::<T>() + w[c * d + k];
                }
            }
            ModelKind::Mlp { hidden: h } => {
                hidden_out.clear();
                for j in 0..h {
                    let row = &w[j * d..(j + 1) * d];
                    let z = row.iter().zip(x).map(|(&a, &b)| a * b).sum::<T>() + w[h * d + j];
                    hidden_out.push(z.tanh());
                }
                let base = h * d + h;
                for k in 0..c {
                    let row = &w[base + k * h..base + (k + 1) * h];
                    out[k] = row.iter().zip(hidden_out.iter()).map(|(&a, &b)| a * b).sum::<T>() + w[base + c * h + k];
                }
            }
        }
    }

    /// Mean cross-entropy over `idx` plus `l2 / 2 * |w|^2`; accumulates the
    /// gradient into `grad` when given.
    pub fn loss_grad(&self, w: &[T], data: &Dataset<T>, idx: &[usize], l2: T, mut grad: Option<&mut [T]>) -> T {
        let (d, c) = (self.dim, self.classes);
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().zip(w).for_each(|(g, &wi)| *g = l2 * wi);
        }
        let inv = T::one() / T::from_usize_lossy(idx.len().max(1));
        let mut logits = vec![T::zero(); c];
        let mut hidden = Vec::new();
        let mut loss = T::zero();
        for &i in idx {
            let x = data.row(i);
            let y = data.labels[i];
            self.logits(w, x, &mut hidden, &mut logits);
            let mx = logits.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = logits.iter().map(|&l| (l - mx).exp()).sum();
            loss = loss + (z.ln() + mx - logits[y]) * inv;
            let Some(g) = grad.as_deref_mut() else { continue };
            // dL/dlogit_k = softmax_k - 1[k == y]
            let delta: Vec<T> = (0..c)
                .map(|k| {
                    let p = (logits[k] - mx).exp() / z;
                    (if k == y { p - T::one() } else { p }) * inv
                })
                .collect();
            match self.kind {
                ModelKind::Logistic => {
                    for k in 0..c {
                        for j in 0..d {
                            g[k * d + j] = g[k * d + j] + delta[k] * x[j];
                        }
                        g[c * d + k] = g[c * d + k] + delta[k];
                    }
                }
                ModelKind::Mlp { hidden: h } => {
                    let base = h * d + h;
                    let mut dh = vec![T::zero(); h];
                    for k in 0..c {
                        for j in 0..h {
                            g[base + k * h + j] = g[base + k * h + j] + delta[k] * hidden[j];
                            dh[j] = dh[j] + delta[k] * w[base + k * h + j];
                        }
                        g[base + c * h + k] = g[base + c * h + k] + delta[k];
                    }
                    for j in 0..h {
                        let dz = dh[j] * (T::one() - hidden[j] * hidden[j]);
                        for m in 0..d {
                            g[j * d + m] = g[j * d + m] + dz * x[m];
                        }
                        g[h * d + j] = g[h * d + j] + dz;
                    }
                }
            }
        }
        let reg: T = w.iter().map(|&v| v * v).sum::<T>() * l2 / T::lit(2.0);
        loss + reg
    }

    pub fn accuracy(&self, w: &[T], data: &Dataset<T>) -> T {
        if data.is_empty() {
            return T::zero();
        }
        let mut logits = vec![T::zero(); self.classes];
        let mut hidden = Vec::new();
        let hits = (0..data.len())
            .filter(|&i| {
                self.logits(w, data.row(i), &mut hidden, &mut logits);
                let best = (0..self.classes)
                    .max_by(|&a, &b| logits[a].partial_cmp(&logits[b]).unwrap_or(std::cmp::Ordering::Equal))
                    .unwrap_or(0);
                best == data.labels[i]
            })
            .count();
        T::from_usize_lossy(hits) / T::from_usize_lossy(data.len())
    }
}

/// Quantizes every tensor of `w` with its own infinity-norm scale.
pub fn quantize_weights<T: Scalar>(
    model: &TinyModel<T>,
    w: &mut [T],
    scheme: &QuantScheme<T>,
    rng: &mut impl Rng,
) -> Result<()> {
    for r in model.tensor_ranges() {
        quantize_in_place(&mut w[r], scheme, rng)?;
    }
    Ok(())
}

/// `h_steps` mini-batch SGD steps from `weights`, each followed by
/// stochastic rounding unless `precision` is `Full`. Batches are drawn
/// without replacement from `batch_rng`; rounding draws from `quant_rng`.
#[allow(clippy::too_many_arguments)]
pub fn local_round<T: Scalar>(
    model: &TinyModel<T>,
    weights: &[T],
    shard: &Dataset<T>,
    h_steps: usize,
    batch: usize,
    lr: T,
    l2: T,
    precision: Precision,
    batch_rng: &mut impl Rng,
    quant_rng: &mut impl Rng,
) -> Result<Vec<T>> {
    let scheme = match precision {
        Precision::Full => None,
        Precision::Bits(q) => Some(QuantScheme::<T>::new(q)?),
    };
    let mut w = weights.to_vec();
    let mut g = vec![T::zero(); w.len()];
    let m = batch.min(shard.len());
    for step in 0..h_steps {
        let idx = sample(batch_rng, shard.len(), m).into_vec();
        let loss = model.loss_grad(&w, shard, &idx, l2, Some(&mut g));
        if !loss.is_finite() {
            return Err(FwqError::Divergence {
                round: step,
                loss: loss.as_f64(),
            });
        }
        w.iter_mut().zip(&g).for_each(|(w, &g)| *w = *w - lr * g);
        if let Some(s) = &scheme {
            quantize_weights(model, &mut w, s, quant_rng)?;
        }
    }
    Ok(w)
}

/// `sum_i pi_i w_i` in full precision, summed in device order.
pub fn aggregate<T: Scalar>(weights: &[Vec<T>], pi: &[T]) -> Result<Vec<T>> {
    if weights.len() != pi.len() || weights.is_empty() {
        return Err(FwqError::DimensionMismatch {
            expected: pi.len(),
            got: weights.len(),
        });
    }
    let d = weights[0].len();
    let mut out = vec![T::zero(); d];
    for (w, &p) in weights.iter().zip(pi) {
        if w.len() != d {
            return Err(FwqError::DimensionMismatch { expected: d, got: w.len() });
        }
        out.iter_mut().zip(w).for_each(|(o, &x)| *o = *o + p * x);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSpec {
    Synthetic(SyntheticSpec),
    /// IDX image/label files; images are scaled to [0, 1].
    Idx {
        train_images: String,
        train_labels: String,
        test_images: String,
        test_labels: String,
        #[serde(default)]
        limit: Option<usize>,
    },
}

/// Device profiles and network used to price each simulated round.
/// Bandwidth is split evenly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergySpec<T> {
    pub devices: Vec<DeviceProfile<T>>,
    pub net: NetworkConfig<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig<T> {
    pub n_devices: usize,
    pub h_steps: usize,
    pub rounds: usize,
    pub batch: usize,
    pub lr: T,
    #[serde(default)]
    pub l2: T,
    pub q_per_device: Vec<Precision>,
    pub seed: u64,
    pub data: DataSpec,
    pub label_skew: usize,
    pub model: ModelKind,
    #[serde(default)]
    pub energy: Option<EnergySpec<T>>,
}

impl<T: Scalar> SimConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.n_devices == 0 || self.h_steps == 0 || self.batch == 0 {
            return Err(FwqError::InvalidInput("n_devices, h_steps and batch must be >= 1".into()));
        }
        if !(self.lr > T::zero()) || !(self.l2 >= T::zero()) {
            return Err(FwqError::InvalidInput("lr must be > 0 and l2 >= 0".into()));
        }
        if self.q_per_device.len() != self.n_devices {
            return Err(FwqError::DimensionMismatch {
                expected: self.n_devices,
                got: self.q_per_device.len(),
            });
        }
        if let Some(e) = &self.energy {
            if e.devices.len() != self.n_devices {
                return Err(FwqError::DimensionMismatch {
                    expected: self.n_devices,
                    got: e.devices.len(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord<T> {
    pub round: usize,
    pub loss: T,
    pub grad_norm_sq: T,
    pub accuracy: T,
    pub energy_j: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace<T> {
    pub records: Vec<RoundRecord<T>>,
    pub initial_loss: T,
    pub initial_grad_norm_sq: T,
    pub pis: Vec<T>,
    pub final_weights: Vec<T>,
}

impl<T: Scalar> TrainingTrace<T> {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("round,loss,grad_norm_sq,accuracy,energy_j\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{},{}", r.round, r.loss, r.grad_norm_sq, r.accuracy, r.energy_j);
        }
        s
    }

    /// Mean squared gradient norm over the last `frac` of the rounds.
    pub fn tail_grad_norm_sq(&self, frac: f64) -> T {
        let n = self.records.len();
        if n == 0 {
            return self.initial_grad_norm_sq;
        }
        let k = ((n as f64 * frac).ceil() as usize).clamp(1, n);
        self.records[n - k..].iter().map(|r| r.grad_norm_sq).sum::<T>() / T::from_usize_lossy(k)
    }

    /// Running average of the squared gradient norm, as in the left-hand
    /// side of the convergence bound, packaged for coefficient fitting.
    pub fn fit_trace(&self, h: u32, m_batch: u32, bits: Vec<Option<u32>>) -> FitTrace<T> {
        let mut acc = T::zero();
        let grad_norm_sq = self
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                acc = acc + r.grad_norm_sq;
                acc / T::from_usize_lossy(i + 1)
            })
            .collect();
        FitTrace {
            h,
            m_batch,
            pis: self.pis.clone(),
            bits,
            grad_norm_sq,
        }
    }
}

fn load_data<T: Scalar>(spec: &DataSpec, seed: u64) -> Result<(Dataset<T>, Dataset<T>)> {
    match spec {
        DataSpec::Synthetic(s) => Ok(synthetic_dataset(s, seed)),
        DataSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            limit,
        } => Ok((
            load_idx(Path::new(train_images), Path::new(train_labels), *limit)?,
            load_idx(Path::new(test_images), Path::new(test_labels), *limit)?,
        )),
    }
}

/// Seeds of the per-device batch and rounding streams of one round.
pub fn device_streams(seed: u64, round: usize, device: usize) -> (ChaCha8Rng, ChaCha8Rng) {
    let idx = ((round as u64) << 24) | device as u64;
    (substream(seed, "batches", idx), substream(seed, "quantizer", idx))
}

/// Runs federated training with the configured per-device precisions.
pub fn run_fwq_fl<T: Scalar>(config: &SimConfig<T>) -> Result<TrainingTrace<T>> {
    config.validate()?;
    let (train, test) = load_data::<T>(&config.data, config.seed)?;
    let (shards, pis) = partition_data(&train, config.n_devices, config.label_skew, config.seed)?;
    let mut init_rng = substream(config.seed, "init", 0);
    let model = TinyModel::<T>::new(config.model, train.dim, train.classes, &mut init_rng);
    let all: Vec<usize> = (0..train.len()).collect();
    let mut grad = vec![T::zero(); model.weights.len()];
    let initial_loss = model.loss_grad(&model.weights, &train, &all, config.l2, Some(&mut grad));
    let initial_grad_norm_sq = grad.iter().map(|&g| g * g).sum();

    let round_energy = match &config.energy {
        Some(e) => {
            let b = e.net.b_max / T::from_usize_lossy(config.n_devices);
            let h = T::from_usize_lossy(config.h_steps);
            let mut total = T::zero();
            for (d, p) in e.devices.iter().zip(&config.q_per_device) {
                let q = T::from_u32(p.energy_bits()).expect("bits fit");
                total = total + comp_energy(&d.gpu, q, h) + comm_energy(b, &d.radio, &e.net)?;
            }
            total
        }
        None => T::zero(),
    };

    let mut w = model.weights.clone();
    let mut records = Vec::with_capacity(config.rounds);
    for round in 0..config.rounds {
        let locals: Vec<Vec<T>> = shards
            .par_iter()
            .enumerate()
            .map(|(i, shard)| {
                let (mut brng, mut qrng) = device_streams(config.seed, round, i);
                local_round(
                    &model,
                    &w,
                    shard,
                    config.h_steps,
                    config.batch,
                    config.lr,
                    config.l2,
                    config.q_per_device[i],
                    &mut brng,
                    &mut qrng,
                )
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| match e {
                FwqError::Divergence { loss, .. } => FwqError::Divergence { round, loss },
                other => other,
            })?;
        w = aggregate(&locals, &pis)?;
        let loss = model.loss_grad(&w, &train, &all, config.l2, Some(&mut grad));
        if !loss.is_finite() || loss > T::lit(DIVERGENCE_FACTOR) * initial_loss {
            return Err(FwqError::Divergence {
                round,
                loss: loss.as_f64(),
            });
        }
        records.push(RoundRecord {
            round: round + 1,
            loss,
            grad_norm_sq: grad.iter().map(|&g| g * g).sum(),
            accuracy: model.accuracy(&w, &test),
            energy_j: round_energy * T::from_usize_lossy(round + 1),
        });
    }
    Ok(TrainingTrace {
        records,
        initial_loss,
        initial_grad_norm_sq,
        pis,
        final_weights: w,
    })
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| FwqError::InvalidInput("truncated IDX header".into()))
}

/// Parses an IDX image file (`u8` pixels, 3 dimensions) into
/// `(count, rows * cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    if read_be_u32(bytes, 0)? != IDX_IMAGES {
        return Err(FwqError::InvalidInput("bad IDX image magic".into()));
    }
    let n = read_be_u32(bytes, 4)? as usize;
    let dim = read_be_u32(bytes, 8)? as usize * read_be_u32(bytes, 12)? as usize;
    let body = bytes
        .get(16..16 + n * dim)
        .ok_or_else(|| FwqError::InvalidInput("truncated IDX image data".into()))?;
    Ok((n, dim, body.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    if read_be_u32(bytes, 0)? != IDX_LABELS {
        return Err(FwqError::InvalidInput("bad IDX label magic".into()));
    }
    let n = read_be_u32(bytes, 4)? as usize;
    bytes
        .get(8..8 + n)
        .map(<[u8]>::to_vec)
        .ok_or_else(|| FwqError::InvalidInput("truncated IDX label data".into()))
}

pub fn load_idx<T: Scalar>(images: &Path, labels: &Path, limit: Option<usize>) -> Result<Dataset<T>> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| FwqError::InvalidInput(format!("{}: {e}", p.display())));
    let (n, dim, pixels) = parse_idx_images(&read(images)?)?;
    let labels = parse_idx_labels(&read(labels)?)?;
    if labels.len() != n {
        return Err(FwqError::DimensionMismatch {
            expected: n,
            got: labels.len(),
        });
    }
    let n = limit.map_or(n, |l| l.min(n));
    let classes = labels[..n].iter().map(|&l| l as usize + 1).max().unwrap_or(1);
    Ok(Dataset {
        features: pixels[..n * dim].iter().map(|&p| T::lit(p as f64 / 255.0)).collect(),
        labels: labels[..n].iter().map(|&l| l as usize).collect(),
        dim,
        classes,
    })
}

/// Fresh generator for callers that need an ad-hoc stream.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests;
