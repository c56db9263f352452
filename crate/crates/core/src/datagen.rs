//! Synthetic long-tailed Gaussian mixtures and feature-space augmentation.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    #[serde(rename = "K")]
    pub k: usize,
    pub d: usize,
    #[serde(rename = "N1")]
    pub n1: usize,
    #[serde(rename = "M1")]
    pub m1: usize,
    pub gamma_l: f64,
    /// Values below 1 mean a reversed long tail with ratio `1/gamma_u`.
    pub gamma_u: f64,
    /// When false, reports show the unlabeled ratio as unknown. The learner
    /// never sees it either way.
    pub gamma_u_known: bool,
    pub separation: f64,
    pub noise_sigma: f64,
    pub test_per_class: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            k: 10,
            d: 16,
            n1: 500,
            m1: 4000,
            gamma_l: 100.0,
            gamma_u: 100.0,
            gamma_u_known: true,
            separation: 3.0,
            noise_sigma: 1.0,
            test_per_class: 100,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::config("dataset.K", "need at least two classes"));
        }
        if self.d == 0 {
            return Err(Error::config("dataset.d", "input dimension must be positive"));
        }
        if !(self.gamma_l >= 1.0) {
            return Err(Error::config("dataset.gamma_l", "must be at least 1"));
        }
        if !(self.gamma_u > 0.0) || !self.gamma_u.is_finite() {
            return Err(Error::config("dataset.gamma_u", "must be positive"));
        }
        if !(self.separation > 0.0) {
            return Err(Error::config("dataset.separation", "must be positive"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("dataset.noise_sigma", "must be non-negative"));
        }
        if self.test_per_class == 0 {
            return Err(Error::config("dataset.test_per_class", "must be positive"));
        }
        longtail_counts(self.n1, self.gamma_l, self.k).map_err(|e| Error::config("dataset.N1", e.to_string()))?;
        unlabeled_counts(self.m1, self.gamma_u, self.k).map_err(|e| Error::config("dataset.M1", e.to_string()))?;
        Ok(())
    }
}

/// `count_k = ⌊head · γ^{−(k−1)/(K−1)}⌋`, head first.
pub fn longtail_counts(head: usize, gamma: f64, k: usize) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::Infeasible("need at least two classes".into()));
    }
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::Infeasible(format!("imbalance ratio {gamma} must be positive")));
    }
    let counts: Vec<usize> = (0..k)
        .map(|i| {
            let v = head as f64 * gamma.powf(-(i as f64) / (k - 1) as f64);
            // absorb pow() rounding at exact integers, e.g. 500 / 100 = 5
            (v + 1e-9).floor() as usize
        })
        .collect();
    if counts.contains(&0) {
        return Err(Error::Infeasible(format!(
            "head {head} with ratio {gamma} leaves an empty class"
        )));
    }
    Ok(counts)
}

/// Unlabeled counts; `gamma < 1` reverses the tail so the last class is largest.
pub fn unlabeled_counts(head: usize, gamma: f64, k: usize) -> Result<Vec<usize>> {
    if gamma < 1.0 {
        let mut c = longtail_counts(head, 1.0 / gamma, k)?;
        c.reverse();
        Ok(c)
    } else {
        longtail_counts(head, gamma, k)
    }
}

/// Labeled sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Labeled {
    pub x: Vec<f64>,
    pub y: usize,
}

/// Unlabeled inputs only. The hidden labels live in [`DatasetBundle`] and
/// are reachable through [`DatasetBundle::hidden_labels`], which only the
/// diagnostics use.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledSet {
    pub inputs: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub labeled: Vec<Labeled>,
    pub unlabeled: UnlabeledSet,
    hidden: Vec<usize>,
    pub test: Vec<Labeled>,
    pub labeled_counts: Vec<usize>,
    pub unlabeled_counts: Vec<usize>,
    pub class_means: Vec<Vec<f64>>,
}

impl DatasetBundle {
    pub fn num_classes(&self) -> usize {
        self.class_means.len()
    }

    /// Ground truth of the unlabeled split, for pseudo-label diagnostics.
    pub fn hidden_labels(&self) -> &[usize] {
        &self.hidden
    }
}

/// Class means: `separation · e_k` when `d ≥ K`, else evenly spread on a
/// circle of radius `separation` in the first two coordinates.
pub fn class_means(k: usize, d: usize, separation: f64) -> Vec<Vec<f64>> {
    (0..k)
        .map(|c| {
            let mut m = vec![0.0; d];
            if d >= k {
                m[c] = separation;
            } else if d == 1 {
                m[0] = separation * c as f64;
            } else {
                let a = 2.0 * std::f64::consts::PI * c as f64 / k as f64;
                m[0] = separation * a.cos();
                m[1] = separation * a.sin();
            }
            m
        })
        .collect()
}

pub fn generate_dataset(spec: &DatasetSpec, seed: u64) -> Result<DatasetBundle> {
    spec.validate()?;
    let labeled_counts = longtail_counts(spec.n1, spec.gamma_l, spec.k)?;
    let unlabeled_counts = unlabeled_counts(spec.m1, spec.gamma_u, spec.k)?;
    let means = class_means(spec.k, spec.d, spec.separation);
    let mut rng = seed::rng(seed);
    let draw = |c: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        means[c]
            .iter()
            .map(|&m| {
                let e: f64 = StandardNormal.sample(rng);
                m + spec.noise_sigma * e
            })
            .collect()
    };
    let mut labeled = Vec::new();
    for (c, &n) in labeled_counts.iter().enumerate() {
        for _ in 0..n {
            labeled.push(Labeled {
                x: draw(c, &mut rng),
                y: c,
            });
        }
    }
    let mut unl = Vec::new();
    for (c, &n) in unlabeled_counts.iter().enumerate() {
        for _ in 0..n {
            unl.push((draw(c, &mut rng), c));
        }
    }
    // interleave so batch sampling order carries no class information
    for i in (1..unl.len()).rev() {
        let j = rng.random_range(0..=i);
        unl.swap(i, j);
    }
    let mut test = Vec::new();
    for c in 0..spec.k {
        for _ in 0..spec.test_per_class {
            test.push(Labeled {
                x: draw(c, &mut rng),
                y: c,
            });
        }
    }
    let (inputs, hidden) = unl.into_iter().unzip();
    Ok(DatasetBundle {
        labeled,
        unlabeled: UnlabeledSet { inputs },
        hidden,
        test,
        labeled_counts,
        unlabeled_counts,
        class_means: means,
    })
}

/// Writes `split,class,x0,x1,...` rows. Unlabeled rows carry the hidden label.
pub fn write_csv(bundle: &DatasetBundle, mut w: impl std::io::Write) -> std::io::Result<()> {
    let d = bundle.class_means.first().map_or(0, Vec::len);
    let header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    writeln!(w, "split,class,{}", header.join(","))?;
    let row = |w: &mut dyn std::io::Write, split: &str, y: usize, x: &[f64]| {
        let xs: Vec<String> = x.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{split},{y},{}", xs.join(","))
    };
    for s in &bundle.labeled {
        row(&mut w, "labeled", s.y, &s.x)?;
    }
    for (x, &y) in bundle.unlabeled.inputs.iter().zip(&bundle.hidden) {
        row(&mut w, "unlabeled", y, x)?;
    }
    for s in &bundle.test {
        row(&mut w, "test", s.y, &s.x)?;
    }
    Ok(())
}

/// Reads the format produced by [`write_csv`]. Counts are recomputed from the
/// rows and class means are the empirical means of the labeled+test rows.
pub fn read_csv(text: &str) -> Result<DatasetBundle> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Input("empty dataset file".into()))?;
    let d = header.split(',').count().saturating_sub(2);
    let mut labeled = Vec::new();
    let mut unl = Vec::new();
    let mut hidden = Vec::new();
    let mut test = Vec::new();
    for (n, line) in lines.enumerate() {
        let mut f = line.split(',');
        let split = f.next().unwrap_or_default();
        let y: usize = f
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Input(format!("line {}: bad class", n + 2)))?;
        let x: Vec<f64> = f
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Input(format!("line {}: {e}", n + 2)))?;
        if x.len() != d {
            return Err(Error::Input(format!("line {}: expected {d} coordinates", n + 2)));
        }
        match split {
            "labeled" => labeled.push(Labeled { x, y }),
            "unlabeled" => {
                unl.push(x);
                hidden.push(y);
            }
            "test" => test.push(Labeled { x, y }),
            other => return Err(Error::Input(format!("line {}: unknown split {other}", n + 2))),
        }
    }
    let k = labeled
        .iter()
        .chain(&test)
        .map(|s| s.y + 1)
        .chain(hidden.iter().map(|y| y + 1))
        .max()
        .unwrap_or(0);
    let mut labeled_counts = vec![0; k];
    let mut unlabeled_counts = vec![0; k];
    let mut sums = vec![vec![0.0; d]; k];
    let mut n_seen = vec![0usize; k];
    for s in labeled.iter().chain(&test) {
        n_seen[s.y] += 1;
        for (a, b) in sums[s.y].iter_mut().zip(&s.x) {
            *a += b;
        }
    }
    for s in &labeled {
        labeled_counts[s.y] += 1;
    }
    for &y in &hidden {
        unlabeled_counts[y] += 1;
    }
    let class_means = sums
        .into_iter()
        .zip(n_seen)
        .map(|(s, n)| s.into_iter().map(|v| v / n.max(1) as f64).collect())
        .collect();
    Ok(DatasetBundle {
        labeled,
        unlabeled: UnlabeledSet { inputs: unl },
        hidden,
        test,
        labeled_counts,
        unlabeled_counts,
        class_means,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSpec {
    pub weak_sigma: f64,
    pub strong_sigma: f64,
    pub strong_drop_prob: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            weak_sigma: 0.1,
            strong_sigma: 0.5,
            strong_drop_prob: 0.2,
        }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.weak_sigma >= 0.0) {
            return Err(Error::config("augment.weak_sigma", "must be non-negative"));
        }
        if !(self.strong_sigma >= self.weak_sigma) {
            return Err(Error::config("augment.strong_sigma", "must be at least weak_sigma"));
        }
        if !(0.0..1.0).contains(&self.strong_drop_prob) {
            return Err(Error::config("augment.strong_drop_prob", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentMode {
    Weak,
    Strong,
}

/// Weak: `x + N(0, σ_w²)`. Strong: `x + N(0, σ_s²)` with each coordinate
/// zeroed independently with probability `strong_drop_prob`.
pub fn augment(x: &[f64], spec: &AugmentSpec, mode: AugmentMode, seed: u64) -> Vec<f64> {
    let mut rng = seed::rng(seed);
    match mode {
        AugmentMode::Weak => jitter(x, spec.weak_sigma, &mut rng),
        AugmentMode::Strong => {
            let mut v = jitter(x, spec.strong_sigma, &mut rng);
            if spec.strong_drop_prob > 0.0 {
                for vi in v.iter_mut() {
                    if rng.random::<f64>() < spec.strong_drop_prob {
                        *vi = 0.0;
                    }
                }
            }
            v
        }
    }
}

fn jitter(x: &[f64], sigma: f64, rng: &mut impl Rng) -> Vec<f64> {
    if sigma == 0.0 {
        return x.to_vec();
    }
    let n = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
    x.iter().map(|&v| v + n.sample(rng)).collect()
}
