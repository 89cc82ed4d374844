//! Synthetic datasets, weak/strong augmentation and pool bookkeeping.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    /// One isotropic Gaussian per class.
    GaussianBlobs,
    /// Two interleaving half circles; exactly two classes.
    TwoMoons,
    /// Class `c` lives on a circle of radius `c + 1`.
    ConcentricRings,
}

impl FromStr for GeneratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-blobs" | "blobs" => Ok(Self::GaussianBlobs),
            "two-moons" | "moons" => Ok(Self::TwoMoons),
            "concentric-rings" | "rings" => Ok(Self::ConcentricRings),
            other => Err(Error::config(format!("unknown generator kind `{other}`"))),
        }
    }
}

impl GeneratorKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::GaussianBlobs => "gaussian-blobs",
            Self::TwoMoons => "two-moons",
            Self::ConcentricRings => "concentric-rings",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    pub size: usize,
    pub classes: usize,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    /// Blob centers; defaults to `classes` points evenly spaced on a circle
    /// of radius 5.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centers: Option<Vec<Vec<f64>>>,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            kind: GeneratorKind::TwoMoons,
            size: 2000,
            classes: 2,
            noise: 0.2,
            centers: None,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        if self.size < 10 * self.classes {
            return Err(Error::config(format!(
                "size {} is below 10 * classes = {}",
                self.size,
                10 * self.classes
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("noise must be finite and >= 0"));
        }
        if self.kind == GeneratorKind::TwoMoons && self.classes != 2 {
            return Err(Error::config("two-moons has exactly two classes"));
        }
        if let Some(centers) = &self.centers {
            if self.kind != GeneratorKind::GaussianBlobs {
                return Err(Error::config("centers only apply to gaussian-blobs"));
            }
            if centers.len() != self.classes {
                return Err(Error::config("need one center per class"));
            }
            let dim = centers[0].len();
            if dim == 0 || centers.iter().any(|c| c.len() != dim) {
                return Err(Error::config("centers must share a positive dimension"));
            }
        }
        Ok(())
    }

    fn blob_centers(&self) -> Vec<Vec<f64>> {
        self.centers.clone().unwrap_or_else(|| {
            (0..self.classes)
                .map(|c| {
                    let a = 2.0 * PI * c as f64 / self.classes as f64;
                    vec![5.0 * a.cos(), 5.0 * a.sin()]
                })
                .collect()
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub id: usize,
    pub x: Vec<f64>,
    pub y: usize,
}

/// Labeled points with ids `0..len`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    points: Vec<Point>,
    classes: usize,
    spec: Option<GeneratorSpec>,
    seed: Option<u64>,
}

/// Draws a dataset. Labels are assigned round-robin (`id % classes`), so
/// class counts differ by at most one.
pub fn generate(spec: &GeneratorSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = spec.blob_centers();
    let mut points = Vec::with_capacity(spec.size);
    for id in 0..spec.size {
        let y = id % spec.classes;
        let mut x = match spec.kind {
            GeneratorKind::GaussianBlobs => centers[y].clone(),
            GeneratorKind::TwoMoons => {
                let t = PI * rng.random::<f64>();
                if y == 0 {
                    vec![t.cos(), t.sin()]
                } else {
                    vec![1.0 - t.cos(), 0.5 - t.sin()]
                }
            }
            GeneratorKind::ConcentricRings => {
                let t = 2.0 * PI * rng.random::<f64>();
                let r = (y + 1) as f64;
                vec![r * t.cos(), r * t.sin()]
            }
        };
        for v in &mut x {
            let e: f64 = rng.sample(StandardNormal);
            *v += spec.noise * e;
        }
        points.push(Point { id, x, y });
    }
    Ok(Dataset {
        points,
        classes: spec.classes,
        spec: Some(spec.clone()),
        seed: Some(seed),
    })
}

impl Dataset {
    /// Builds a dataset from raw points, checking ids, labels and dimensions.
    pub fn from_points(points: Vec<Point>, classes: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::input("dataset is empty"));
        }
        let dim = points[0].x.len();
        let mut seen = vec![false; classes];
        for (i, p) in points.iter().enumerate() {
            if p.id != i {
                return Err(Error::input(format!("ids must be contiguous from 0; row {i} has id {}", p.id)));
            }
            if p.x.len() != dim {
                return Err(Error::input(format!("point {} has dimension {}", p.id, p.x.len())));
            }
            if p.y >= classes {
                return Err(Error::input(format!("point {} has label {} >= {classes}", p.id, p.y)));
            }
            seen[p.y] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::input("every class needs at least one point"));
        }
        Ok(Self {
            points,
            classes,
            spec: None,
            seed: None,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].x.len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn spec(&self) -> Option<&GeneratorSpec> {
        self.spec.as_ref()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn x(&self, id: usize) -> &[f64] {
        &self.points[id].x
    }

    pub fn y(&self, id: usize) -> usize {
        self.points[id].y
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for p in &self.points {
            counts[p.y] += 1;
        }
        counts
    }

    /// Per-dimension zero mean and unit (population) variance. Constant
    /// dimensions are only centered.
    pub fn standardized(&self) -> Dataset {
        let n = self.len() as f64;
        let dim = self.dim();
        let mut mean = vec![0.0; dim];
        for p in &self.points {
            for (m, v) in mean.iter_mut().zip(&p.x) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; dim];
        for p in &self.points {
            for ((s, v), m) in var.iter_mut().zip(&p.x).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let std: Vec<f64> = var.iter().map(|v| if *v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        let points = self
            .points
            .iter()
            .map(|p| Point {
                id: p.id,
                x: p.x.iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s).collect(),
                y: p.y,
            })
            .collect();
        Dataset {
            points,
            ..self.clone()
        }
    }

    /// Writes `id,x0,x1,...,y`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["id".to_string()];
        header.extend((0..self.dim()).map(|d| format!("x{d}")));
        header.push("y".into());
        out.write_record(&header)?;
        for p in &self.points {
            let mut row = vec![p.id.to_string()];
            row.extend(p.x.iter().map(|v| v.to_string()));
            row.push(p.y.to_string());
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads the format produced by [`Dataset::write_csv`]. The class count
    /// is `max(y) + 1`.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut points = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() < 3 {
                return Err(Error::input("dataset rows need id, at least one feature and y"));
            }
            let parse_usize = |s: &str| s.trim().parse::<usize>().map_err(|e| Error::input(format!("bad integer `{s}`: {e}")));
            let id = parse_usize(&rec[0])?;
            let y = parse_usize(&rec[rec.len() - 1])?;
            let x = (1..rec.len() - 1)
                .map(|i| rec[i].trim().parse::<f64>().map_err(|e| Error::input(format!("bad number `{}`: {e}", &rec[i]))))
                .collect::<Result<Vec<_>>>()?;
            points.push(Point { id, x, y });
        }
        let classes = points.iter().map(|p| p.y + 1).max().unwrap_or(0);
        Self::from_points(points, classes)
    }
}

/// Augmentation parameters, in standardized feature units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Weak view jitter (0.05 of the unit per-dimension std).
    pub weak_sigma: f64,
    /// Strong view jitter.
    pub strong_sigma: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Probability of zeroing one random coordinate in the strong view.
    pub drop_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            weak_sigma: 0.05,
            strong_sigma: 0.2,
            scale_min: 0.7,
            scale_max: 1.3,
            drop_prob: 0.2,
        }
    }
}

impl AugmentConfig {
    /// Configuration under which both views are the identity.
    pub fn identity() -> Self {
        Self {
            weak_sigma: 0.0,
            strong_sigma: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            drop_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.weak_sigma) || !finite_nonneg(self.strong_sigma) {
            return Err(Error::config("augmentation sigmas must be finite and >= 0"));
        }
        if !(self.scale_min <= self.scale_max && self.scale_min.is_finite() && self.scale_max.is_finite()) {
            return Err(Error::config("scale range must satisfy min <= max"));
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(Error::config("drop_prob must be in [0, 1]"));
        }
        Ok(())
    }

    /// `x + N(0, weak_sigma^2 I)`.
    pub fn weak<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        jitter(x, self.weak_sigma, rng)
    }

    /// Jitter, then per-coordinate scaling in `[scale_min, scale_max]`, then
    /// with probability `drop_prob` one coordinate set to zero. The number of
    /// draws is independent of the parameter values.
    pub fn strong<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        let mut out = jitter(x, self.strong_sigma, rng);
        for v in &mut out {
            let u: f64 = rng.random();
            *v *= self.scale_min + (self.scale_max - self.scale_min) * u;
        }
        let drop = rng.random::<f64>() < self.drop_prob;
        let coord = rng.random_range(0..out.len().max(1));
        if drop && !out.is_empty() {
            out[coord] = 0.0;
        }
        out
    }
}

fn jitter<R: Rng + ?Sized>(x: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    x.iter()
        .map(|v| {
            let e: f64 = rng.sample(StandardNormal);
            v + sigma * e
        })
        .collect()
}

/// Disjoint labeled / unlabeled / test partitions of a dataset's ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplePools {
    labeled: BTreeSet<usize>,
    unlabeled: BTreeSet<usize>,
    test: BTreeSet<usize>,
}

impl SamplePools {
    pub fn new(
        labeled: BTreeSet<usize>,
        unlabeled: BTreeSet<usize>,
        test: BTreeSet<usize>,
    ) -> Result<Self> {
        if !labeled.is_disjoint(&unlabeled) || !labeled.is_disjoint(&test) || !unlabeled.is_disjoint(&test) {
            return Err(Error::input("pools must be pairwise disjoint"));
        }
        Ok(Self {
            labeled,
            unlabeled,
            test,
        })
    }

    pub fn labeled(&self) -> &BTreeSet<usize> {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &BTreeSet<usize> {
        &self.unlabeled
    }

    pub fn test(&self) -> &BTreeSet<usize> {
        &self.test
    }

    pub fn total(&self) -> usize {
        self.labeled.len() + self.unlabeled.len() + self.test.len()
    }

    /// Moves `ids` from the unlabeled pool to the labeled set.
    pub fn acquire(&mut self, ids: &[usize]) -> Result<()> {
        let picked: BTreeSet<usize> = ids.iter().copied().collect();
        if picked.len() != ids.len() {
            return Err(Error::input("acquired ids must be distinct"));
        }
        if let Some(bad) = picked.iter().find(|id| !self.unlabeled.contains(id)) {
            return Err(Error::input(format!("sample {bad} is not in the unlabeled pool")));
        }
        for id in picked {
            self.unlabeled.remove(&id);
            self.labeled.insert(id);
        }
        Ok(())
    }
}

/// Random split with an initial labeled set of `n_init` and a test set of
/// `n_test`. When `stratified`, the labeled set first takes one random
/// sample per class.
pub fn split_pools(
    dataset: &Dataset,
    n_init: usize,
    n_test: usize,
    seed: u64,
    stratified: bool,
) -> Result<SamplePools> {
    let k = dataset.classes();
    if n_init < k {
        return Err(Error::config(format!("n_init {n_init} is below the class count {k}")));
    }
    if n_init + n_test >= dataset.len() {
        return Err(Error::config(format!(
            "n_init + n_test = {} leaves no unlabeled pool out of {}",
            n_init + n_test,
            dataset.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);

    let mut labeled = BTreeSet::new();
    if stratified {
        for class in 0..k {
            if let Some(id) = order.iter().find(|id| dataset.y(**id) == class) {
                labeled.insert(*id);
            }
        }
    }
    let seeded = labeled.clone();
    let mut rest = order.into_iter().filter(|id| !seeded.contains(id));
    while labeled.len() < n_init {
        match rest.next() {
            Some(id) => {
                labeled.insert(id);
            }
            None => break,
        }
    }
    let test: BTreeSet<usize> = rest.by_ref().take(n_test).collect();
    let unlabeled: BTreeSet<usize> = rest.collect();
    SamplePools::new(labeled, unlabeled, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moons(size: usize) -> GeneratorSpec {
        GeneratorSpec {
            size,
            ..GeneratorSpec::default()
        }
    }

    #[test]
    fn separated_blobs_split_at_zero() {
        let spec = GeneratorSpec {
            kind: GeneratorKind::GaussianBlobs,
            size: 200,
            classes: 2,
            noise: 0.0,
            centers: Some(vec![vec![-5.0, 0.0], vec![5.0, 0.0]]),
        };
        let ds = generate(&spec, 3).unwrap();
        for p in ds.points() {
            let predicted = usize::from(p.x[0] > 0.0);
            assert_eq!(predicted, p.y);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(&moons(500), 9).unwrap(), generate(&moons(500), 9).unwrap());
        assert_ne!(generate(&moons(500), 9).unwrap(), generate(&moons(500), 10).unwrap());
    }

    #[test]
    fn moons_are_balanced() {
        let ds = generate(&moons(2000), 1).unwrap();
        assert_eq!(ds.class_counts(), vec![1000, 1000]);
    }

    #[test]
    fn rings_have_k_classes() {
        let spec = GeneratorSpec {
            kind: GeneratorKind::ConcentricRings,
            size: 300,
            classes: 3,
            noise: 0.05,
            centers: None,
        };
        let ds = generate(&spec, 0).unwrap();
        assert_eq!(ds.class_counts(), vec![100, 100, 100]);
        for p in ds.points() {
            let r = (p.x[0] * p.x[0] + p.x[1] * p.x[1]).sqrt();
            assert!((r - (p.y + 1) as f64).abs() < 0.5);
        }
    }

    #[test]
    fn bad_specs_rejected() {
        assert!(matches!("spirals".parse::<GeneratorKind>(), Err(Error::Config(_))));
        assert!(generate(&moons(15), 0).is_err());
        let three_moons = GeneratorSpec { classes: 3, ..moons(300) };
        assert!(generate(&three_moons, 0).is_err());
        let negative = GeneratorSpec { noise: -0.1, ..moons(300) };
        assert!(generate(&negative, 0).is_err());
        let json = r#"{"kind":"spirals","size":100,"classes":2,"noise":0.1}"#;
        assert!(serde_json::from_str::<GeneratorSpec>(json).is_err());
    }

    #[test]
    fn standardized_has_unit_moments() {
        let ds = generate(&moons(1000), 4).unwrap().standardized();
        for d in 0..2 {
            let vals: Vec<f64> = ds.points().iter().map(|p| p.x[d]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_round_trip() {
        let ds = generate(&moons(100), 5).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("id,x0,x1,y\n"));
        let back = Dataset::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.points(), ds.points());
    }

    #[test]
    fn identity_augmentations() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = AugmentConfig::identity();
        let x = [0.3, -1.7, 2.0];
        assert_eq!(cfg.weak(&x, &mut rng), x.to_vec());
        assert_eq!(cfg.strong(&x, &mut rng), x.to_vec());
    }

    #[test]
    fn weak_noise_is_centered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = AugmentConfig::default();
        let x = [1.0, -2.0];
        let n = 20_000;
        let mut mean = [0.0; 2];
        for _ in 0..n {
            let v = cfg.weak(&x, &mut rng);
            mean[0] += v[0] / n as f64;
            mean[1] += v[1] / n as f64;
        }
        // 5 standard errors of the mean
        let tol = 5.0 * cfg.weak_sigma / (n as f64).sqrt();
        assert!((mean[0] - 1.0).abs() < tol && (mean[1] + 2.0).abs() < tol);
    }

    #[test]
    fn weak_displacement_matches_chi_mean() {
        // E||e|| for e ~ N(0, s^2 I_2) is s * sqrt(pi / 2)
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = [0.5, 0.5];
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|_| {
                let v = cfg.weak(&x, &mut rng);
                ((v[0] - x[0]).powi(2) + (v[1] - x[1]).powi(2)).sqrt()
            })
            .sum::<f64>()
            / n as f64;
        let analytic = cfg.weak_sigma * (PI / 2.0).sqrt();
        assert!((mean - analytic).abs() / analytic < 0.05, "{mean} vs {analytic}");
    }

    #[test]
    fn strong_moves_further_than_weak() {
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = [0.8, -0.6];
        let dist = |v: &[f64]| ((v[0] - x[0]).powi(2) + (v[1] - x[1]).powi(2)).sqrt();
        let n = 10_000;
        let (mut weak, mut strong) = (0.0, 0.0);
        for _ in 0..n {
            weak += dist(&cfg.weak(&x, &mut rng));
            strong += dist(&cfg.strong(&x, &mut rng));
        }
        assert!(strong > weak, "{strong} <= {weak}");
    }

    #[test]
    fn augmentations_are_deterministic_and_shape_preserving() {
        let cfg = AugmentConfig::default();
        let x = [0.1, 0.2, 0.3, 0.4];
        let a = cfg.strong(&x, &mut ChaCha8Rng::seed_from_u64(4));
        let b = cfg.strong(&x, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert_eq!(cfg.weak(&x, &mut ChaCha8Rng::seed_from_u64(4)).len(), 4);
    }

    #[test]
    fn split_is_a_stratified_partition() {
        let ds = generate(&moons(400), 0).unwrap();
        let pools = split_pools(&ds, 2, 100, 7, true).unwrap();
        let labels: BTreeSet<usize> = pools.labeled().iter().map(|id| ds.y(*id)).collect();
        assert_eq!(labels.len(), 2);
        assert_eq!(pools.labeled().len(), 2);
        assert_eq!(pools.test().len(), 100);
        assert_eq!(pools.total(), 400);
        let all: BTreeSet<usize> = pools
            .labeled()
            .iter()
            .chain(pools.unlabeled())
            .chain(pools.test())
            .copied()
            .collect();
        assert_eq!(all.len(), 400);
        assert_eq!(pools, split_pools(&ds, 2, 100, 7, true).unwrap());
    }

    #[test]
    fn infeasible_split_rejected() {
        let ds = generate(&moons(100), 0).unwrap();
        assert!(split_pools(&ds, 1, 10, 0, true).is_err());
        assert!(split_pools(&ds, 50, 50, 0, true).is_err());
    }

    #[test]
    fn acquire_updates_pools() {
        let ds = generate(&moons(100), 0).unwrap();
        let mut pools = split_pools(&ds, 4, 20, 1, true).unwrap();
        let before = pools.clone();
        let picks: Vec<usize> = pools.unlabeled().iter().take(5).copied().collect();
        pools.acquire(&picks).unwrap();
        assert_eq!(pools.labeled().len(), before.labeled().len() + 5);
        assert_eq!(pools.unlabeled().len(), before.unlabeled().len() - 5);
        assert_eq!(pools.test(), before.test());
        let expected: BTreeSet<usize> = before.labeled().iter().chain(&picks).copied().collect();
        assert_eq!(pools.labeled(), &expected);
        assert!(pools.acquire(&picks).is_err());
    }
}
