//! Synthetic activity dataset.
//!
//! Each sample of class `c` for user `u` is `center_c + offset_u + N(0, σ²I)`.
//! Class centers lie on a sphere inside a low-dimensional signal subspace
//! shared with the source (pretraining) task, so features learned on the
//! source task carry over to the activity task.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::LabeledBatch;
use crate::seed;

/// The five recognised activities, in class-index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivityLabel {
    Reading = 0,
    DrinkingWater = 1,
    UsingLaptop = 2,
    UsingMobilePhone = 3,
    WashingDishes = 4,
}

impl ActivityLabel {
    pub const ALL: [ActivityLabel; 5] = [
        ActivityLabel::Reading,
        ActivityLabel::DrinkingWater,
        ActivityLabel::UsingLaptop,
        ActivityLabel::UsingMobilePhone,
        ActivityLabel::WashingDishes,
    ];

    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ActivityLabel::Reading => "reading",
            ActivityLabel::DrinkingWater => "drinking_water",
            ActivityLabel::UsingLaptop => "using_laptop",
            ActivityLabel::UsingMobilePhone => "using_mobile_phone",
            ActivityLabel::WashingDishes => "washing_dishes",
        }
    }
}

impl fmt::Display for ActivityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ActivityLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown activity '{s}'")))
    }
}

/// Per-user training counts, columns in [`ActivityLabel`] order.
pub const REFERENCE_TRAIN_COUNTS: [(&str, [usize; 5]); 3] = [
    ("A", [518, 517, 504, 564, 502]),
    ("B", [433, 371, 529, 288, 422]),
    ("C", [478, 372, 527, 433, 462]),
];

/// Total held-out frames across all users.
pub const REFERENCE_TEST_TOTAL: usize = 2028;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserCounts {
    pub user: String,
    pub train: [usize; 5],
    /// Defaults to a proportional share of `test_total`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<[usize; 5]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub feature_dim: usize,
    /// Dimension of the subspace holding all class centers.
    pub signal_dim: usize,
    pub users: Vec<UserCounts>,
    /// Test total split across users/classes in proportion to training counts
    /// when a user has no explicit test counts.
    pub test_total: usize,
    pub center_radius: f64,
    pub offset_radius: f64,
    pub noise_std: f64,
    pub source_classes: usize,
    pub source_per_class: usize,
    /// The first `min(5, source_classes)` source classes sit this many noise
    /// standard deviations from one target class center each (a related but
    /// distinct activity); the rest are uniform on the center sphere.
    pub source_anchor_gap: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            signal_dim: 8,
            users: REFERENCE_TRAIN_COUNTS
                .iter()
                .map(|(u, c)| UserCounts {
                    user: (*u).to_string(),
                    train: *c,
                    test: None,
                })
                .collect(),
            test_total: REFERENCE_TEST_TOTAL,
            center_radius: 5.0,
            offset_radius: 0.5,
            noise_std: 1.0,
            source_classes: 8,
            source_per_class: 400,
            source_anchor_gap: 4.5,
            seed: 0,
        }
    }
}

/// Centers, offsets and subspace basis derived from a spec.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    /// Orthonormal rows spanning the signal subspace.
    pub basis: Vec<Vec<f64>>,
    pub class_centers: Vec<Vec<f64>>,
    pub user_offsets: Vec<Vec<f64>>,
    pub source_centers: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub user: String,
    pub train: LabeledBatch,
    pub test: LabeledBatch,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::config("feature_dim must be >= 1"));
        }
        if self.signal_dim == 0 || self.signal_dim > self.feature_dim {
            return Err(Error::config(format!(
                "signal_dim must be in 1..={}, got {}",
                self.feature_dim, self.signal_dim
            )));
        }
        if self.users.is_empty() {
            return Err(Error::config("at least one user is required"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for u in &self.users {
            if !seen.insert(&u.user) {
                return Err(Error::config(format!("duplicate user '{}'", u.user)));
            }
        }
        if !(self.noise_std > 0.0) {
            return Err(Error::config("noise_std must be > 0"));
        }
        if !(self.center_radius >= 0.0 && self.offset_radius >= 0.0) {
            return Err(Error::config("radii must be >= 0"));
        }
        if self.source_classes == 0 {
            return Err(Error::config("source task needs at least one class"));
        }
        if !(self.source_anchor_gap > 4.0 && self.source_anchor_gap.is_finite()) {
            return Err(Error::config(format!(
                "source_anchor_gap must exceed 4 noise standard deviations, got {}",
                self.source_anchor_gap
            )));
        }
        Ok(())
    }

    pub fn total_train(&self) -> usize {
        self.users.iter().flat_map(|u| u.train).sum()
    }

    /// Test counts per user, either explicit or apportioned from
    /// `test_total` by the largest-remainder method.
    pub fn test_counts(&self) -> Vec<[usize; 5]> {
        let total_train = self.total_train();
        let cells: Vec<(usize, usize)> = self
            .users
            .iter()
            .enumerate()
            .flat_map(|(u, _)| (0..5).map(move |k| (u, k)))
            .collect();
        let mut out: Vec<[usize; 5]> = self.users.iter().map(|u| u.test.unwrap_or([0; 5])).collect();
        let implicit: Vec<&(usize, usize)> = cells.iter().filter(|(u, _)| self.users[*u].test.is_none()).collect();
        if implicit.is_empty() || total_train == 0 {
            return out;
        }
        let explicit_total: usize = self.users.iter().filter_map(|u| u.test).flatten().sum();
        let budget = self.test_total.saturating_sub(explicit_total);
        let implicit_train: usize = implicit.iter().map(|(u, k)| self.users[*u].train[*k]).sum();
        if implicit_train == 0 {
            return out;
        }
        let mut remainders = Vec::with_capacity(implicit.len());
        let mut assigned = 0;
        for &&(u, k) in &implicit {
            let exact = budget as f64 * self.users[u].train[k] as f64 / implicit_train as f64;
            let floor = exact.floor() as usize;
            out[u][k] = floor;
            assigned += floor;
            remainders.push((exact - floor as f64, u, k));
        }
        // Largest remainder first; ties by position for determinism.
        remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
        for &(_, u, k) in remainders.iter().take(budget - assigned) {
            out[u][k] += 1;
        }
        out
    }

    pub fn geometry(&self) -> Result<Geometry> {
        self.validate()?;
        let d = self.feature_dim;
        let basis = orthonormal_basis(d, self.signal_dim, seed::derive(self.seed, &[seed::tag("basis")]));

        let mut rng = seed::rng(seed::derive(self.seed, &[seed::tag("centers")]));
        let class_centers: Vec<Vec<f64>> = (0..ActivityLabel::COUNT)
            .map(|_| embed(&basis, &sphere_point(self.signal_dim, self.center_radius, &mut rng)))
            .collect();

        // Offsets are full-dimensional: user appearance is not confined to the
        // class subspace.
        let mut rng = seed::rng(seed::derive(self.seed, &[seed::tag("offsets")]));
        let user_offsets = (0..self.users.len())
            .map(|_| sphere_point(d, self.offset_radius, &mut rng))
            .collect();

        let min_gap = 4.0 * self.noise_std;
        let clear = |c: &[f64]| class_centers.iter().all(|t| distance(t, c) > min_gap);
        let mut rng = seed::rng(seed::derive(self.seed, &[seed::tag("source-centers")]));
        let mut source_centers = Vec::with_capacity(self.source_classes);
        let mut attempts = 0;
        while source_centers.len() < self.source_classes {
            attempts += 1;
            if attempts > 100_000 {
                return Err(Error::config(
                    "cannot place source centers away from every target center; \
                     increase center_radius or signal_dim",
                ));
            }
            let k = source_centers.len();
            let c = if k < class_centers.len() {
                let step = embed(&basis, &sphere_point(self.signal_dim, self.source_anchor_gap * self.noise_std, &mut rng));
                class_centers[k].iter().zip(&step).map(|(a, b)| a + b).collect()
            } else {
                embed(&basis, &sphere_point(self.signal_dim, self.center_radius, &mut rng))
            };
            if clear(&c) {
                source_centers.push(c);
            }
        }
        Ok(Geometry {
            basis,
            class_centers,
            user_offsets,
            source_centers,
        })
    }
}

/// Generates every user's train and test partitions.
pub fn generate(spec: &SynthSpec) -> Result<BTreeMap<String, Partition>> {
    let geo = spec.geometry()?;
    let test_counts = spec.test_counts();
    let mut out = BTreeMap::new();
    for (u, user) in spec.users.iter().enumerate() {
        let mut splits = [(&user.train, 0u64), (&test_counts[u], 1u64)]
            .into_iter()
            .map(|(counts, split)| {
                let mut rng = seed::rng(seed::derive(spec.seed, &[seed::tag("noise"), seed::tag(&user.user), split]));
                let mut batch = LabeledBatch::empty(spec.feature_dim);
                let mut row = vec![0.0; spec.feature_dim];
                for (class, &n) in counts.iter().enumerate() {
                    for _ in 0..n {
                        sample_into(&mut row, &geo.class_centers[class], &geo.user_offsets[u], spec.noise_std, &mut rng);
                        batch.push(&row, class);
                    }
                }
                batch
            });
        let train = splits.next().expect("train split");
        let test = splits.next().expect("test split");
        out.insert(
            user.user.clone(),
            Partition {
                user: user.user.clone(),
                train,
                test,
            },
        );
    }
    Ok(out)
}

/// Pretraining corpus: `source_classes` clusters in the same subspace with the
/// same user offsets and noise, drawn from its own seed streams.
pub fn source_task(spec: &SynthSpec) -> Result<LabeledBatch> {
    let geo = spec.geometry()?;
    let mut rng = seed::rng(seed::derive(spec.seed, &[seed::tag("source-noise")]));
    let mut batch = LabeledBatch::empty(spec.feature_dim);
    let mut row = vec![0.0; spec.feature_dim];
    for (class, center) in geo.source_centers.iter().enumerate() {
        for i in 0..spec.source_per_class {
            let offset = &geo.user_offsets[i % geo.user_offsets.len()];
            sample_into(&mut row, center, offset, spec.noise_std, &mut rng);
            batch.push(&row, class);
        }
    }
    Ok(batch)
}

/// Union of every user's test split.
pub fn pooled_test(partitions: &BTreeMap<String, Partition>) -> LabeledBatch {
    pooled(partitions.values().map(|p| &p.test))
}

/// Union of every user's training split.
pub fn pooled_train(partitions: &BTreeMap<String, Partition>) -> LabeledBatch {
    pooled(partitions.values().map(|p| &p.train))
}

fn pooled<'a>(batches: impl Iterator<Item = &'a LabeledBatch>) -> LabeledBatch {
    let mut out: Option<LabeledBatch> = None;
    for b in batches {
        let acc = out.get_or_insert_with(|| LabeledBatch::empty(b.dim()));
        for i in 0..b.len() {
            acc.push(b.row(i), b.labels[i]);
        }
    }
    out.unwrap_or_else(|| LabeledBatch::empty(0))
}

fn sample_into<R: Rng>(row: &mut [f64], center: &[f64], offset: &[f64], std: f64, rng: &mut R) {
    for ((v, c), o) in row.iter_mut().zip(center).zip(offset) {
        let z: f64 = rng.sample(StandardNormal);
        *v = c + o + std * z;
    }
}

fn sphere_point<R: Rng>(dim: usize, radius: f64, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x * radius / norm).collect();
        }
    }
}

fn orthonormal_basis(dim: usize, k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seed::rng(seed);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        // Modified Gram-Schmidt.
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

fn embed(basis: &[Vec<f64>], coords: &[f64]) -> Vec<f64> {
    let dim = basis.first().map_or(0, Vec::len);
    let mut out = vec![0.0; dim];
    for (b, c) in basis.iter().zip(coords) {
        out.iter_mut().zip(b).for_each(|(o, x)| *o += c * x);
    }
    out
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Writes rows as CSV with header `f0..f{d-1},label,user`.
pub fn write_csv<W: Write>(writer: W, rows: &[(&str, &LabeledBatch)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let dim = rows.first().map_or(0, |(_, b)| b.dim());
    let mut header: Vec<String> = (0..dim).map(|i| format!("f{i}")).collect();
    header.push("label".into());
    header.push("user".into());
    w.write_record(&header).map_err(csv_err)?;
    for (user, batch) in rows {
        if batch.dim() != dim {
            return Err(Error::shape("all batches must share a feature dimension"));
        }
        for i in 0..batch.len() {
            let mut rec: Vec<String> = batch.row(i).iter().map(|v| format!("{v:?}")).collect();
            rec.push(batch.labels[i].to_string());
            rec.push((*user).to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads CSV written by [`write_csv`], grouping rows by user.
pub fn read_csv<R: Read>(reader: R) -> Result<BTreeMap<String, LabeledBatch>> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers().map_err(csv_err)?.clone();
    let n = header.len();
    if n < 2 || &header[n - 2] != "label" || &header[n - 1] != "user" {
        return Err(Error::config("CSV header must end with label,user"));
    }
    let dim = n - 2;
    for (i, name) in header.iter().take(dim).enumerate() {
        if name != format!("f{i}") {
            return Err(Error::config(format!("unexpected column '{name}' at position {i}")));
        }
    }
    let mut out: BTreeMap<String, LabeledBatch> = BTreeMap::new();
    let mut row = vec![0.0; dim];
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        for (slot, field) in row.iter_mut().zip(rec.iter()) {
            *slot = field
                .parse()
                .map_err(|_| Error::config(format!("bad feature value '{field}'")))?;
        }
        let label: usize = rec[dim]
            .parse()
            .map_err(|_| Error::config(format!("bad label '{}'", &rec[dim])))?;
        out.entry(rec[dim + 1].to_string())
            .or_insert_with(|| LabeledBatch::empty(dim))
            .push(&row, label);
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::config(format!("csv: {e}"))
}
