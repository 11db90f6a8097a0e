//! Shapley-value attributions by exact coalition enumeration or permutation
//! sampling, with global mean-|phi| rankings and signed local reports.
//!
//! A feature outside the coalition takes its value from the background: the
//! column means by default, or each background row in turn with the outputs
//! averaged.

use std::fmt::Write as _;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{feature_names, FEATURE_COUNT};
use crate::neuralnet::{softmax_rows, AeFeed, Autoencoder, Classifier};
use crate::scalar::Scalar;

/// Default cap on features for exact enumeration (2^12 coalitions).
pub const DEFAULT_EXACT_LIMIT: usize = 12;
/// Cap for enumerating every permutation.
pub const ALL_PERMUTATIONS_LIMIT: usize = 9;
const EVAL_ROWS: usize = 4096;

/// A vector-valued function of the (scaled) feature vector.
pub trait ValueModel<T: Scalar> {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn evaluate(&self, x: ArrayView2<T>) -> Result<Array2<T>>;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputScale {
    #[default]
    Probability,
    Logit,
}

/// Classifier output as a value function, optionally behind an autoencoder
/// so attributions stay over the original features.
#[derive(Clone, Copy, Debug)]
pub struct ClassifierModel<'a, T> {
    pub classifier: &'a Classifier<T>,
    pub autoencoder: Option<(&'a Autoencoder<T>, AeFeed)>,
    pub scale: OutputScale,
}

impl<'a, T: Scalar> ClassifierModel<'a, T> {
    pub fn new(classifier: &'a Classifier<T>) -> Self {
        ClassifierModel {
            classifier,
            autoencoder: None,
            scale: OutputScale::Probability,
        }
    }

    pub fn with_autoencoder(mut self, ae: &'a Autoencoder<T>, feed: AeFeed) -> Self {
        self.autoencoder = Some((ae, feed));
        self
    }

    pub fn with_scale(mut self, scale: OutputScale) -> Self {
        self.scale = scale;
        self
    }
}

impl<T: Scalar> ValueModel<T> for ClassifierModel<'_, T> {
    fn input_dim(&self) -> usize {
        match self.autoencoder {
            Some((ae, _)) => ae.input_dim(),
            None => self.classifier.input_dim(),
        }
    }

    fn output_dim(&self) -> usize {
        self.classifier.n_classes()
    }

    fn evaluate(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        let logits = match self.autoencoder {
            Some((ae, feed)) => self.classifier.logits_batch(ae.represent_batch(x, feed)?.view())?,
            None => self.classifier.logits_batch(x)?,
        };
        Ok(match self.scale {
            OutputScale::Probability => softmax_rows(&logits),
            OutputScale::Logit => logits,
        })
    }
}

/// `f(x) = W x + b` with one row of `W` per output.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel<T> {
    pub weights: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> ValueModel<T> for LinearModel<T> {
    fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    fn output_dim(&self) -> usize {
        self.weights.nrows()
    }

    fn evaluate(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        Ok(x.dot(&self.weights.t()) + &self.bias)
    }
}

/// Wraps a closure mapping a batch of rows to a batch of outputs.
pub struct FnModel<F> {
    pub input_dim: usize,
    pub output_dim: usize,
    pub f: F,
}

impl<T: Scalar, F: Fn(ArrayView2<T>) -> Array2<T>> ValueModel<T> for FnModel<F> {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn evaluate(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        Ok((self.f)(x))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackgroundMode {
    #[default]
    MeanVector,
    SampleSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackgroundSet<T> {
    rows: Array2<T>,
    mode: BackgroundMode,
    reference: Array2<T>,
}

impl<T: Scalar> BackgroundSet<T> {
    pub fn new(rows: Array2<T>, mode: BackgroundMode) -> Result<Self> {
        if rows.nrows() == 0 || rows.ncols() == 0 {
            return Err(Error::InvalidInput("background set is empty".into()));
        }
        let reference = match mode {
            BackgroundMode::MeanVector => rows.mean_axis(Axis(0)).expect("nonempty").insert_axis(Axis(0)),
            BackgroundMode::SampleSet => rows.clone(),
        };
        Ok(BackgroundSet { rows, mode, reference })
    }

    pub fn rows(&self) -> ArrayView2<'_, T> {
        self.rows.view()
    }

    pub fn mode(&self) -> BackgroundMode {
        self.mode
    }

    pub fn width(&self) -> usize {
        self.rows.ncols()
    }

    /// Rows substituted for absent features.
    pub fn reference(&self) -> ArrayView2<'_, T> {
        self.reference.view()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribution<T> {
    pub feature_names: Vec<String>,
    /// `phi[i][c]`: contribution of feature `i` to output `c`.
    pub phi: Vec<Vec<T>>,
    /// Value with every feature absent, per output.
    pub base_value: Vec<T>,
    /// Model output for the explained instance, per output.
    pub fx: Vec<T>,
    pub explained_class: usize,
    /// Per-feature standard error of the sampled estimate, per output.
    pub std_error: Option<Vec<Vec<T>>>,
}

impl<T: Scalar> Attribution<T> {
    pub fn phi_for(&self, class: usize) -> Vec<T> {
        self.phi.iter().map(|p| p[class]).collect()
    }

    /// Contributions to the explained class.
    pub fn explained_phi(&self) -> Vec<T> {
        self.phi_for(self.explained_class)
    }

    /// `|base + sum(phi) - f(x)|` for one output.
    pub fn efficiency_gap(&self, class: usize) -> T {
        let total = self.phi.iter().fold(self.base_value[class], |a, p| a + p[class]);
        (total - self.fx[class]).abs()
    }

    pub fn to_json(&self) -> Result<String>
    where
        T: Serialize,
    {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("attribution", e))
    }
}

/// Names used for attributions: the standard feature names for 18 inputs,
/// `x1..xd` otherwise.
pub fn default_feature_names(d: usize) -> Vec<String> {
    if d == FEATURE_COUNT {
        feature_names()
    } else {
        (1..=d).map(|i| format!("x{i}")).collect()
    }
}

fn check_inputs<T: Scalar, M: ValueModel<T>>(
    model: &M,
    x: &[T],
    background: &BackgroundSet<T>,
    class: usize,
) -> Result<()> {
    let d = model.input_dim();
    if x.len() != d {
        return Err(Error::Shape {
            context: "explained instance width",
            expected: d,
            found: x.len(),
        });
    }
    if background.width() != d {
        return Err(Error::Shape {
            context: "background width",
            expected: d,
            found: background.width(),
        });
    }
    if class >= model.output_dim() {
        return Err(Error::InvalidInput(format!(
            "class {class} outside the {} model outputs",
            model.output_dim()
        )));
    }
    Ok(())
}

/// Evaluates v(S) for a list of coalitions, each given as a boolean mask over
/// features. Returns one row of averaged outputs per coalition.
fn coalition_values<T: Scalar, M: ValueModel<T>>(
    model: &M,
    x: &[T],
    reference: ArrayView2<T>,
    masks: &[Vec<bool>],
) -> Result<Array2<T>> {
    let d = x.len();
    let r = reference.nrows();
    let k = model.output_dim();
    let mut out = Array2::zeros((masks.len(), k));
    let per_chunk = (EVAL_ROWS / r).max(1);
    let scale = T::from_count(r);
    for (chunk_idx, chunk) in masks.chunks(per_chunk).enumerate() {
        let mut batch = Array2::zeros((chunk.len() * r, d));
        for (m, mask) in chunk.iter().enumerate() {
            for b in 0..r {
                let mut row = batch.row_mut(m * r + b);
                for j in 0..d {
                    row[j] = if mask[j] { x[j] } else { reference[(b, j)] };
                }
            }
        }
        let y = model.evaluate(batch.view())?;
        if y.dim() != (chunk.len() * r, k) {
            return Err(Error::Shape {
                context: "model output rows",
                expected: chunk.len() * r,
                found: y.nrows(),
            });
        }
        for m in 0..chunk.len() {
            let block = y.slice(s![m * r..(m + 1) * r, ..]);
            let avg = block.sum_axis(Axis(0)) / scale;
            out.row_mut(chunk_idx * per_chunk + m).assign(&avg);
        }
    }
    Ok(out)
}

/// Weight `|S|! (d-|S|-1)! / d!` for each coalition size `|S|` in `0..d`.
pub fn shapley_weights(d: usize) -> Vec<f64> {
    // 1 / (d * C(d-1, s)), with the binomial built up exactly in f64
    let mut binom = 1.0f64;
    (0..d)
        .map(|s| {
            if s > 0 {
                binom = binom * (d - s) as f64 / s as f64;
            }
            1.0 / (d as f64 * binom)
        })
        .collect()
}

/// Exact Shapley values over all 2^d coalitions. Fails when `d > limit`.
pub fn exact_shapley<T: Scalar, M: ValueModel<T>>(
    model: &M,
    x: &[T],
    background: &BackgroundSet<T>,
    class: usize,
    limit: usize,
) -> Result<Attribution<T>> {
    check_inputs(model, x, background, class)?;
    let d = x.len();
    if d > limit {
        return Err(Error::ExactLimit { features: d, limit });
    }
    if d >= usize::BITS as usize - 1 {
        return Err(Error::ExactLimit {
            features: d,
            limit: usize::BITS as usize - 2,
        });
    }
    let n_masks = 1usize << d;
    let masks: Vec<Vec<bool>> = (0..n_masks)
        .map(|m| (0..d).map(|j| m >> j & 1 == 1).collect())
        .collect();
    let v = coalition_values(model, x, background.reference(), &masks)?;
    let k = model.output_dim();
    let weights: Vec<T> = shapley_weights(d).into_iter().map(T::lit).collect();
    let mut phi = vec![vec![T::zero(); k]; d];
    for mask in 0..n_masks {
        let size = mask.count_ones() as usize;
        for (i, phi_i) in phi.iter_mut().enumerate() {
            if mask >> i & 1 == 1 {
                continue;
            }
            let with = mask | 1 << i;
            let w = weights[size];
            for c in 0..k {
                phi_i[c] += w * (v[(with, c)] - v[(mask, c)]);
            }
        }
    }
    Ok(Attribution {
        feature_names: default_feature_names(d),
        phi,
        base_value: v.row(0).to_vec(),
        fx: v.row(n_masks - 1).to_vec(),
        explained_class: class,
        std_error: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Permutations {
    Random {
        n: usize,
        seed: u64,
    },
    /// Every one of the d! orderings.
    All,
}

/// Lexicographic successor; false after the last permutation.
fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
        return false;
    };
    let j = (i..p.len())
        .rev()
        .find(|&j| p[j] > p[i - 1])
        .expect("pivot has a successor");
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Permutation-sampling estimate: the mean over orderings of each feature's
/// marginal contribution when it joins the features before it.
pub fn sampled_shapley<T: Scalar, M: ValueModel<T>>(
    model: &M,
    x: &[T],
    background: &BackgroundSet<T>,
    class: usize,
    permutations: Permutations,
) -> Result<Attribution<T>> {
    check_inputs(model, x, background, class)?;
    let d = x.len();
    let orders: Vec<Vec<usize>> = match permutations {
        Permutations::Random { n, seed } => {
            if n == 0 {
                return Err(Error::Config("at least one permutation is required".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p: Vec<usize> = (0..d).collect();
            (0..n)
                .map(|_| {
                    p.shuffle(&mut rng);
                    p.clone()
                })
                .collect()
        }
        Permutations::All => {
            if d > ALL_PERMUTATIONS_LIMIT {
                return Err(Error::ExactLimit {
                    features: d,
                    limit: ALL_PERMUTATIONS_LIMIT,
                });
            }
            let mut p: Vec<usize> = (0..d).collect();
            let mut all = vec![p.clone()];
            while next_permutation(&mut p) {
                all.push(p.clone());
            }
            all
        }
    };
    let k = model.output_dim();
    let n = orders.len();
    let mut sum = vec![vec![T::zero(); k]; d];
    let mut sum_sq = vec![vec![T::zero(); k]; d];
    let mut base = None;
    let mut fx = None;
    let chunk = (EVAL_ROWS / ((d + 1) * background.reference().nrows())).max(1);
    for group in orders.chunks(chunk) {
        let mut masks = Vec::with_capacity(group.len() * (d + 1));
        for order in group {
            let mut mask = vec![false; d];
            masks.push(mask.clone());
            for &j in order {
                mask[j] = true;
                masks.push(mask.clone());
            }
        }
        let v = coalition_values(model, x, background.reference(), &masks)?;
        for (g, order) in group.iter().enumerate() {
            let offset = g * (d + 1);
            base.get_or_insert_with(|| v.row(offset).to_vec());
            fx.get_or_insert_with(|| v.row(offset + d).to_vec());
            for (step, &j) in order.iter().enumerate() {
                for c in 0..k {
                    let delta = v[(offset + step + 1, c)] - v[(offset + step, c)];
                    sum[j][c] += delta;
                    sum_sq[j][c] += delta * delta;
                }
            }
        }
    }
    let nt = T::from_count(n);
    let phi: Vec<Vec<T>> = sum.iter().map(|r| r.iter().map(|&s| s / nt).collect()).collect();
    let std_error = phi
        .iter()
        .zip(&sum_sq)
        .map(|(m, sq)| {
            m.iter()
                .zip(sq)
                .map(|(&mean, &sq)| {
                    if n < 2 {
                        return T::zero();
                    }
                    let var = ((sq - nt * mean * mean) / T::from_count(n - 1)).max(T::zero());
                    (var / nt).sqrt()
                })
                .collect()
        })
        .collect();
    Ok(Attribution {
        feature_names: default_feature_names(d),
        phi,
        base_value: base.expect("at least one ordering"),
        fx: fx.expect("at least one ordering"),
        explained_class: class,
        std_error: Some(std_error),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Exact { limit: usize },
    Sampled { permutations: usize, seed: u64 },
}

impl Default for Method {
    fn default() -> Self {
        Method::Exact {
            limit: DEFAULT_EXACT_LIMIT,
        }
    }
}

pub fn explain_instance<T: Scalar, M: ValueModel<T>>(
    model: &M,
    x: &[T],
    background: &BackgroundSet<T>,
    class: usize,
    method: Method,
) -> Result<Attribution<T>> {
    match method {
        Method::Exact { limit } => exact_shapley(model, x, background, class, limit),
        Method::Sampled { permutations, seed } => sampled_shapley(
            model,
            x,
            background,
            class,
            Permutations::Random { n: permutations, seed },
        ),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalImportance<T> {
    pub feature_names: Vec<String>,
    /// `per_class[i][c]`: mean |phi| of feature `i` for output `c`.
    pub per_class: Vec<Vec<T>>,
    /// Mean of `per_class` over outputs.
    pub overall: Vec<T>,
    /// Feature indices by descending `overall`, ties in declaration order.
    pub ranking: Vec<usize>,
    pub rows: usize,
}

impl<T: Scalar> GlobalImportance<T> {
    pub fn rank_of(&self, name: &str) -> Option<usize> {
        self.ranking.iter().position(|&i| self.feature_names[i] == name)
    }

    pub fn ranked_names(&self) -> Vec<&str> {
        self.ranking.iter().map(|&i| self.feature_names[i].as_str()).collect()
    }

    /// One line per feature in rank order:
    /// `rank,feature,mean_abs_phi,<one column per class>`.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("rank,feature,mean_abs_phi");
        for c in class_names {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (rank, &i) in self.ranking.iter().enumerate() {
            let _ = write!(
                out,
                "{},{},{:.10e}",
                rank + 1,
                self.feature_names[i],
                self.overall[i].to_f64_lossy()
            );
            for v in &self.per_class[i] {
                let _ = write!(out, ",{:.10e}", v.to_f64_lossy());
            }
            out.push('\n');
        }
        out
    }
}

/// Mean |phi| over the evaluation rows. Sampled attributions for row `r` use
/// seed `seed + r` so results do not depend on how rows are batched.
pub fn global_importance<T: Scalar, M: ValueModel<T>>(
    model: &M,
    rows: ArrayView2<T>,
    method: Method,
    background: &BackgroundSet<T>,
) -> Result<GlobalImportance<T>> {
    if rows.nrows() == 0 {
        return Err(Error::InvalidInput("no rows to explain".into()));
    }
    let d = model.input_dim();
    let k = model.output_dim();
    let mut acc = vec![vec![T::zero(); k]; d];
    for (r, row) in rows.rows().into_iter().enumerate() {
        let method = match method {
            Method::Sampled { permutations, seed } => Method::Sampled {
                permutations,
                seed: seed.wrapping_add(r as u64),
            },
            m => m,
        };
        let a = explain_instance(model, &row.to_vec(), background, 0, method)?;
        for (acc_i, phi_i) in acc.iter_mut().zip(&a.phi) {
            for (s, p) in acc_i.iter_mut().zip(phi_i) {
                *s += p.abs();
            }
        }
    }
    let n = T::from_count(rows.nrows());
    let per_class: Vec<Vec<T>> = acc.iter().map(|r| r.iter().map(|&v| v / n).collect()).collect();
    let kt = T::from_count(k);
    let overall: Vec<T> = per_class
        .iter()
        .map(|r| r.iter().fold(T::zero(), |a, &b| a + b) / kt)
        .collect();
    let mut ranking: Vec<usize> = (0..d).collect();
    ranking.sort_by(|&a, &b| overall[b].partial_cmp(&overall[a]).unwrap_or(std::cmp::Ordering::Equal));
    Ok(GlobalImportance {
        feature_names: default_feature_names(d),
        per_class,
        overall,
        ranking,
        rows: rows.nrows(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contribution<T> {
    pub feature: String,
    pub phi: T,
}

/// Signed contributions to the explained class, largest magnitude first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalReport<T> {
    pub explained_class: usize,
    pub base_value: T,
    pub fx: T,
    pub positive: Vec<Contribution<T>>,
    pub negative: Vec<Contribution<T>>,
    /// `base_value + sum(phi)`.
    pub checksum: T,
}

pub fn local_report<T: Scalar>(attribution: &Attribution<T>) -> LocalReport<T> {
    let c = attribution.explained_class;
    let phi = attribution.explained_phi();
    let mut order: Vec<usize> = (0..phi.len()).collect();
    order.sort_by(|&a, &b| {
        phi[b]
            .abs()
            .partial_cmp(&phi[a].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut positive = Vec::new();
    let mut negative = Vec::new();
    for i in order {
        let entry = Contribution {
            feature: attribution.feature_names[i].clone(),
            phi: phi[i],
        };
        if phi[i] > T::zero() {
            positive.push(entry);
        } else if phi[i] < T::zero() {
            negative.push(entry);
        }
    }
    let checksum = phi.iter().fold(attribution.base_value[c], |a, &b| a + b);
    LocalReport {
        explained_class: c,
        base_value: attribution.base_value[c],
        fx: attribution.fx[c],
        positive,
        negative,
        checksum,
    }
}

impl<T: Scalar> LocalReport<T> {
    pub fn to_json(&self) -> Result<String>
    where
        T: Serialize,
    {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("local report", e))
    }
}
