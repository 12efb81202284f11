//! Synthetic imbalanced data, stratified splits, and jitter augmentation.
//!
//! Column order is fixed: informative features, then redundant linear
//! combinations of them, then pure noise. Label 0 is the majority class.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, FossilError, Result};
use crate::net::Batch;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSpec {
    pub n_samples: usize,
    pub n_features: usize,
    pub n_informative: usize,
    pub n_redundant: usize,
    pub clusters_per_class: usize,
    pub flip_y: f64,
    pub class_sep: f64,
    pub majority_prior: f64,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            n_samples: 3000,
            n_features: 20,
            n_informative: 10,
            n_redundant: 5,
            clusters_per_class: 2,
            flip_y: 0.05,
            class_sep: 1.0,
            majority_prior: 0.9,
            seed: 42,
        }
    }
}

impl GenSpec {
    /// Majority prior for an imbalance ratio `ir : 1`.
    pub fn prior_for_ir(ir: f64) -> f64 {
        ir / (ir + 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FossilError::InvalidConfig(m.to_string()));
        if self.n_informative == 0 || self.n_informative + self.n_redundant > self.n_features {
            return bad("need 0 < informative and informative + redundant <= features");
        }
        if !(0.0..1.0).contains(&self.flip_y) {
            return bad("flip_y must lie in [0, 1)");
        }
        if !(self.majority_prior > 0.5 && self.majority_prior < 1.0) {
            return bad("majority prior must lie in (0.5, 1)");
        }
        if self.clusters_per_class == 0 || !(self.class_sep > 0.0) {
            return bad("clusters_per_class and class_sep must be positive");
        }
        let vertices = 2f64.powi(self.n_informative.min(60) as i32);
        if (2 * self.clusters_per_class) as f64 > vertices {
            return bad("not enough hypercube vertices for the requested clusters");
        }
        if self.n_samples < 2 {
            return bad("need at least two samples");
        }
        Ok(())
    }

    pub fn class_sizes(&self) -> (usize, usize) {
        let majority = (self.n_samples as f64 * self.majority_prior).floor() as usize;
        (majority, self.n_samples - majority)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    n_features: usize,
    labels: Vec<u8>,
    aug_flags: Vec<bool>,
    origin: Vec<Option<usize>>,
}

impl Dataset {
    pub fn new(features: Vec<f64>, n_features: usize, labels: Vec<u8>, aug_flags: Vec<bool>, origin: Vec<Option<usize>>) -> Result<Self> {
        let n = labels.len();
        if n_features == 0 {
            return Err(FossilError::InvalidInput("dataset needs at least one feature".into()));
        }
        ensure_len("dataset features", n * n_features, features.len())?;
        ensure_len("dataset aug flags", n, aug_flags.len())?;
        ensure_len("dataset origin", n, origin.len())?;
        if labels.iter().any(|&y| y > 1) {
            return Err(FossilError::InvalidInput("labels must be 0 or 1".into()));
        }
        for (i, (&a, o)) in aug_flags.iter().zip(&origin).enumerate() {
            match (a, o) {
                (true, Some(src)) if *src < n && !aug_flags[*src] => {}
                (false, None) => {}
                _ => {
                    return Err(FossilError::InvalidInput(format!(
                        "row {i}: augmented rows need an original origin, original rows none"
                    )))
                }
            }
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(FossilError::NonFinite("dataset features"));
        }
        Ok(Self { features, n_features, labels, aug_flags, origin })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn aug_flags(&self) -> &[bool] {
        &self.aug_flags
    }

    pub fn origin(&self) -> &[Option<usize>] {
        &self.origin
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let pos = self.labels.iter().filter(|&&y| y == 1).count();
        [self.len() - pos, pos]
    }

    /// Rows `indices` in the given order. Augmented rows must come with their
    /// origin row, and origins are renumbered.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut position = vec![None; self.len()];
        for (new, &old) in indices.iter().enumerate() {
            if old >= self.len() {
                return Err(FossilError::InvalidInput(format!("row {old} out of range")));
            }
            position[old] = Some(new);
        }
        let mut features = Vec::with_capacity(indices.len() * self.n_features);
        let mut origin = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            origin.push(match self.origin[i] {
                None => None,
                Some(src) => Some(position[src].ok_or_else(|| {
                    FossilError::InvalidInput(format!("augmented row {i} separated from origin {src}"))
                })?),
            });
        }
        Ok(Self {
            features,
            n_features: self.n_features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            aug_flags: indices.iter().map(|&i| self.aug_flags[i]).collect(),
            origin,
        })
    }

    pub fn to_batch(&self) -> Result<Batch> {
        Batch::new(
            self.features.clone(),
            self.n_features,
            self.labels.clone(),
            vec![1.0; self.len()],
            self.aug_flags.clone(),
        )
    }

    /// Writes `feature_0..feature_{d-1},label,aug_flag,origin`; an original
    /// row has an empty origin field.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.n_features).map(|j| format!("feature_{j}")).collect();
        header.extend(["label", "aug_flag", "origin"].map(String::from));
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.row(i).iter().map(|x| format!("{x:?}")).collect();
            rec.push(self.labels[i].to_string());
            rec.push(u8::from(self.aug_flags[i]).to_string());
            rec.push(self.origin[i].map(|o| o.to_string()).unwrap_or_default());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        let n_cols = header.len();
        if n_cols < 4 || &header[n_cols - 3] != "label" || &header[n_cols - 2] != "aug_flag" || &header[n_cols - 1] != "origin" {
            return Err(FossilError::InvalidInput("unexpected dataset header".into()));
        }
        let n_features = n_cols - 3;
        for (j, name) in header.iter().take(n_features).enumerate() {
            if name != format!("feature_{j}") {
                return Err(FossilError::InvalidInput(format!("unexpected column {name}")));
            }
        }
        let parse_err = |line: usize, what: &str| FossilError::InvalidInput(format!("line {line}: bad {what}"));
        let (mut features, mut labels, mut aug, mut origin) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            for j in 0..n_features {
                features.push(rec[j].parse::<f64>().map_err(|_| parse_err(line + 2, "feature"))?);
            }
            labels.push(rec[n_features].parse::<u8>().map_err(|_| parse_err(line + 2, "label"))?);
            aug.push(match &rec[n_features + 1] {
                "0" => false,
                "1" => true,
                _ => return Err(parse_err(line + 2, "aug_flag")),
            });
            let o = &rec[n_features + 2];
            origin.push(if o.is_empty() {
                None
            } else {
                Some(o.parse::<usize>().map_err(|_| parse_err(line + 2, "origin"))?)
            });
        }
        Self::new(features, n_features, labels, aug, origin)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// Generation output with the labels before noise was applied.
#[derive(Clone, Debug)]
pub struct Generated {
    pub dataset: Dataset,
    pub clean_labels: Vec<u8>,
}

pub fn generate(spec: &GenSpec) -> Result<Dataset> {
    Ok(generate_detailed(spec)?.dataset)
}

pub fn generate_detailed(spec: &GenSpec) -> Result<Generated> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.n_informative;
    let n_clusters = 2 * spec.clusters_per_class;

    let mut vertices: Vec<Vec<f64>> = Vec::with_capacity(n_clusters);
    while vertices.len() < n_clusters {
        let v: Vec<f64> = (0..k)
            .map(|_| if rng.gen::<bool>() { spec.class_sep } else { -spec.class_sep })
            .collect();
        if !vertices.contains(&v) {
            vertices.push(v);
        }
    }
    let rotation = random_rotation(k, &mut rng);
    let mixing: Vec<f64> = (0..k * spec.n_redundant).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let (n_major, n_minor) = spec.class_sizes();
    let mut rows: Vec<(u8, usize)> = Vec::with_capacity(spec.n_samples);
    for (label, count) in [(0u8, n_major), (1u8, n_minor)] {
        for i in 0..count {
            let cluster = label as usize * spec.clusters_per_class + i % spec.clusters_per_class;
            rows.push((label, cluster));
        }
    }
    rows.shuffle(&mut rng);

    let d = spec.n_features;
    let mut features = vec![0.0; spec.n_samples * d];
    let mut z = vec![0.0; k];
    for (r, &(_, cluster)) in rows.iter().enumerate() {
        for (zj, c) in z.iter_mut().zip(&vertices[cluster]) {
            *zj = c + rng.sample::<f64, _>(StandardNormal);
        }
        let out = &mut features[r * d..(r + 1) * d];
        for a in 0..k {
            out[a] = (0..k).map(|b| rotation[a * k + b] * z[b]).sum();
        }
        for j in 0..spec.n_redundant {
            out[k + j] = (0..k).map(|a| out[a] * mixing[a * spec.n_redundant + j]).sum();
        }
        for x in &mut out[k + spec.n_redundant..] {
            *x = rng.sample(StandardNormal);
        }
    }

    let clean_labels: Vec<u8> = rows.iter().map(|&(y, _)| y).collect();
    let labels = clean_labels
        .iter()
        .map(|&y| if rng.gen::<f64>() < spec.flip_y { 1 - y } else { y })
        .collect();
    let n = spec.n_samples;
    let dataset = Dataset::new(features, d, labels, vec![false; n], vec![None; n])?;
    Ok(Generated { dataset, clean_labels })
}

/// Orthogonal matrix (row-major) from Gram-Schmidt on a Gaussian matrix.
fn random_rotation(k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let mut q: Vec<Vec<f64>> = Vec::with_capacity(k);
        let mut ok = true;
        for _ in 0..k {
            let mut v: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
            for u in &q {
                let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (vi, ui) in v.iter_mut().zip(u) {
                    *vi -= p * ui;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            q.push(v.into_iter().map(|x| x / norm).collect());
        }
        if ok {
            return q.concat();
        }
    }
}

fn class_indices(ds: &Dataset, seed: u64) -> Result<[Vec<usize>; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class = [Vec::new(), Vec::new()];
    for i in 0..ds.len() {
        if !ds.aug_flags[i] {
            by_class[ds.labels[i] as usize].push(i);
        }
    }
    for c in &mut by_class {
        c.shuffle(&mut rng);
    }
    Ok(by_class)
}

/// Adds each augmented row to the side holding its origin and sorts.
fn attach_augmented(ds: &Dataset, sides: &mut [Vec<usize>]) {
    let mut side_of = vec![usize::MAX; ds.len()];
    for (s, idx) in sides.iter().enumerate() {
        for &i in idx {
            side_of[i] = s;
        }
    }
    for i in 0..ds.len() {
        if let Some(src) = ds.origin[i] {
            sides[side_of[src]].push(i);
        }
    }
    for s in sides.iter_mut() {
        s.sort_unstable();
    }
}

/// Per-class shuffled holdout; each class contributes `round(n_c * fraction)`
/// rows to the test side. Augmented rows follow their origin.
pub fn stratified_split_indices(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(FossilError::InvalidInput("test fraction must lie in [0, 1)".into()));
    }
    let by_class = class_indices(ds, seed)?;
    if by_class.iter().any(|c| c.len() < 2) {
        return Err(FossilError::InvalidInput("each class needs at least two rows to split".into()));
    }
    let mut sides = vec![Vec::new(), Vec::new()];
    for c in &by_class {
        let n_test = (c.len() as f64 * test_fraction).round() as usize;
        sides[1].extend_from_slice(&c[..n_test]);
        sides[0].extend_from_slice(&c[n_test..]);
    }
    attach_augmented(ds, &mut sides);
    let test = sides.pop().unwrap();
    Ok((sides.pop().unwrap(), test))
}

pub fn stratified_split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = stratified_split_indices(ds, test_fraction, seed)?;
    Ok((ds.subset(&train)?, ds.subset(&test)?))
}

/// `k` (train, validation) index pairs. Rows of each class are dealt to folds
/// in turn, continuing the rotation across classes so total fold sizes also
/// differ by at most one.
pub fn stratified_kfold_indices(ds: &Dataset, k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 {
        return Err(FossilError::InvalidInput("k-fold needs k >= 2".into()));
    }
    let by_class = class_indices(ds, seed)?;
    if by_class.iter().any(|c| c.len() < k) {
        return Err(FossilError::InvalidInput(format!("each class needs at least {k} rows")));
    }
    let mut folds = vec![Vec::new(); k];
    let mut slot = 0;
    for c in &by_class {
        for &i in c {
            folds[slot % k].push(i);
            slot += 1;
        }
    }
    attach_augmented(ds, &mut folds);
    Ok((0..k)
        .map(|f| {
            let mut train: Vec<usize> = folds.iter().enumerate().filter(|&(g, _)| g != f).flat_map(|(_, v)| v.iter().copied()).collect();
            train.sort_unstable();
            (train, folds[f].clone())
        })
        .collect())
}

pub fn stratified_kfold(ds: &Dataset, k: usize, seed: u64) -> Result<Vec<(Dataset, Dataset)>> {
    stratified_kfold_indices(ds, k, seed)?
        .into_iter()
        .map(|(tr, va)| Ok((ds.subset(&tr)?, ds.subset(&va)?)))
        .collect()
}

/// Appends `copies` jittered duplicates of every original row.
pub fn augment(ds: &Dataset, copies: usize, jitter_sigma: f64, seed: u64) -> Result<Dataset> {
    augment_class(ds, copies, jitter_sigma, seed, None)
}

/// As [`augment`], restricted to original rows with label `only` when given.
pub fn augment_class(ds: &Dataset, copies: usize, jitter_sigma: f64, seed: u64, only: Option<u8>) -> Result<Dataset> {
    if !(jitter_sigma >= 0.0) {
        return Err(FossilError::InvalidInput("jitter sigma must be nonnegative".into()));
    }
    let mut out = ds.clone();
    if copies == 0 {
        return Ok(out);
    }
    let noise = Normal::new(0.0, jitter_sigma).map_err(|e| FossilError::InvalidInput(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..ds.len() {
        if ds.aug_flags[i] || only.is_some_and(|c| ds.labels[i] != c) {
            continue;
        }
        for _ in 0..copies {
            out.features.extend(ds.row(i).iter().map(|x| x + noise.sample(&mut rng)));
            out.labels.push(ds.labels[i]);
            out.aug_flags.push(true);
            out.origin.push(Some(i));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(prior: f64, n: usize, seed: u64) -> Dataset {
        generate(&GenSpec { n_samples: n, majority_prior: prior, seed, ..GenSpec::default() }).unwrap()
    }

    #[test]
    fn class_counts_follow_prior() {
        let ds = generate(&GenSpec::default()).unwrap();
        let g = generate_detailed(&GenSpec::default()).unwrap();
        let clean = [g.clean_labels.iter().filter(|&&y| y == 0).count(), g.clean_labels.iter().filter(|&&y| y == 1).count()];
        assert_eq!(clean, [2700, 300]);
        assert_eq!(ds.len(), 3000);
        assert_eq!(ds.n_features(), 20);
        for (ir, major) in [(4.0, 2400), (9.0, 2700), (19.0, 2850)] {
            let spec = GenSpec { majority_prior: GenSpec::prior_for_ir(ir), ..GenSpec::default() };
            assert_eq!(spec.class_sizes().0, major);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(small(0.8, 200, 5), small(0.8, 200, 5));
        assert_ne!(small(0.8, 200, 5), small(0.8, 200, 6));
    }

    #[test]
    fn label_noise_rate() {
        let g = generate_detailed(&GenSpec { flip_y: 0.0, ..GenSpec::default() }).unwrap();
        assert_eq!(g.dataset.labels(), &g.clean_labels[..]);
        for seed in [1, 2, 3] {
            let g = generate_detailed(&GenSpec { seed, ..GenSpec::default() }).unwrap();
            let flipped = g.dataset.labels().iter().zip(&g.clean_labels).filter(|(a, b)| a != b).count();
            assert!((100..=200).contains(&flipped), "{flipped}");
        }
    }

    #[test]
    fn noise_columns_are_unrelated_to_labels() {
        let ds = generate(&GenSpec::default()).unwrap();
        let y: Vec<f64> = ds.labels().iter().map(|&v| f64::from(v)).collect();
        let corr = |j: usize| {
            let x: Vec<f64> = (0..ds.len()).map(|i| ds.row(i)[j]).collect();
            pearson(&x, &y)
        };
        for j in 15..20 {
            assert!(corr(j).abs() < 0.1, "column {j}: {}", corr(j));
        }
        let strongest = (0..10).map(|j| corr(j).abs()).fold(0.0, f64::max);
        assert!(strongest > 0.1, "informative columns carry no signal: {strongest}");
    }

    fn pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        sxy / (sxx * syy).sqrt()
    }

    #[test]
    fn redundant_columns_are_linear_in_informative() {
        let ds = small(0.9, 50, 3);
        // 5 redundant columns cannot add rank beyond the 10 informative ones:
        // check by least squares residual against the informative block.
        let rows: Vec<Vec<f64>> = (0..ds.len()).map(|i| ds.row(i)[..15].to_vec()).collect();
        assert_eq!(matrix_rank(&rows, 1e-8), 10);
    }

    fn matrix_rank(rows: &[Vec<f64>], tol: f64) -> usize {
        let mut m = rows.to_vec();
        let cols = m[0].len();
        let mut rank = 0;
        for c in 0..cols {
            let Some(p) = (rank..m.len()).max_by(|&a, &b| m[a][c].abs().total_cmp(&m[b][c].abs())) else { break };
            if m[p][c].abs() < tol {
                continue;
            }
            m.swap(rank, p);
            for r in 0..m.len() {
                if r != rank {
                    let f = m[r][c] / m[rank][c];
                    let pivot = m[rank].clone();
                    for (x, pv) in m[r].iter_mut().zip(&pivot) {
                        *x -= f * pv;
                    }
                }
            }
            rank += 1;
        }
        rank
    }

    fn mixed(n_major: usize, n_minor: usize) -> Dataset {
        let n = n_major + n_minor;
        let mut labels = vec![0u8; n_major];
        labels.extend(vec![1u8; n_minor]);
        let features = (0..n).map(|i| i as f64).collect();
        Dataset::new(features, 1, labels, vec![false; n], vec![None; n]).unwrap()
    }

    #[test]
    fn split_examples() {
        let ds = mixed(90, 10);
        let (train, test) = stratified_split(&ds, 0.2, 1).unwrap();
        assert_eq!(test.class_counts(), [18, 2]);
        assert_eq!(train.class_counts(), [72, 8]);
        let (_, empty) = stratified_split(&ds, 0.0, 1).unwrap();
        assert!(empty.is_empty());
        assert_eq!(stratified_split(&ds, 0.2, 7).unwrap(), stratified_split(&ds, 0.2, 7).unwrap());
        let (a, b) = stratified_split_indices(&ds, 0.2, 3).unwrap();
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert!(stratified_split(&mixed(10, 1), 0.2, 0).is_err());
    }

    #[test]
    fn kfold_examples() {
        let ds = mixed(50, 50);
        let folds = stratified_kfold(&ds, 5, 3).unwrap();
        assert_eq!(folds.len(), 5);
        for (train, val) in &folds {
            assert_eq!(val.class_counts(), [10, 10]);
            assert_eq!(train.len(), 80);
        }
        let idx = stratified_kfold_indices(&ds, 5, 3).unwrap();
        let mut union: Vec<usize> = idx.iter().flat_map(|(_, v)| v.iter().copied()).collect();
        union.sort_unstable();
        assert_eq!(union, (0..100).collect::<Vec<_>>());
        assert_eq!(idx, stratified_kfold_indices(&ds, 5, 3).unwrap());
        for (tr, va) in &idx {
            assert!(tr.iter().all(|i| !va.contains(i)));
        }
        let uneven = stratified_kfold_indices(&mixed(23, 7), 5, 1).unwrap();
        for (_, va) in &uneven {
            let minor = va.iter().filter(|&&i| i >= 23).count();
            let major = va.len() - minor;
            assert!((4..=5).contains(&major) && (1..=2).contains(&minor));
        }
        assert!(stratified_kfold(&mixed(20, 3), 5, 0).is_err());
    }

    #[test]
    fn augment_examples() {
        let ds = mixed(60, 40);
        assert_eq!(augment(&ds, 0, 0.5, 1).unwrap(), ds);
        let aug = augment(&ds, 1, 0.5, 1).unwrap();
        assert_eq!(aug.len(), 200);
        assert_eq!(aug.aug_flags().iter().filter(|&&a| a).count(), 100);
        let exact = augment(&ds, 2, 0.0, 1).unwrap();
        for i in 100..exact.len() {
            let src = exact.origin()[i].unwrap();
            assert_eq!(exact.row(i), ds.row(src));
            assert_eq!(exact.labels()[i], ds.labels()[src]);
        }
        let minority = augment_class(&ds, 1, 0.5, 1, Some(1)).unwrap();
        assert_eq!(minority.len(), 140);
    }

    #[test]
    fn augmented_rows_stay_with_origin() {
        let ds = augment_class(&mixed(40, 20), 2, 0.3, 4, Some(1)).unwrap();
        for (tr, va) in stratified_kfold_indices(&ds, 4, 2).unwrap() {
            for side in [&tr, &va] {
                for &i in side.iter() {
                    if let Some(src) = ds.origin()[i] {
                        assert!(side.contains(&src));
                    }
                }
            }
        }
        let (train, test) = stratified_split(&ds, 0.25, 9).unwrap();
        assert_eq!(train.len() + test.len(), ds.len());
        for part in [&train, &test] {
            for i in 0..part.len() {
                if let Some(src) = part.origin()[i] {
                    assert!(!part.aug_flags()[src]);
                    assert_eq!(part.labels()[src], part.labels()[i]);
                }
            }
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let ds = augment(&small(0.8, 60, 11), 1, 0.5, 2).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("feature_0,feature_1,"));
        assert!(text.lines().next().unwrap().ends_with("feature_19,label,aug_flag,origin"));
        let back = Dataset::read_csv(&buf[..]).unwrap();
        assert_eq!(back, ds);
        assert!(back.features().iter().zip(ds.features()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for spec in [
            GenSpec { n_informative: 16, ..GenSpec::default() },
            GenSpec { flip_y: 1.0, ..GenSpec::default() },
            GenSpec { majority_prior: 0.5, ..GenSpec::default() },
            GenSpec { n_informative: 1, clusters_per_class: 2, n_redundant: 0, ..GenSpec::default() },
        ] {
            assert!(generate(&spec).is_err());
        }
    }
}
