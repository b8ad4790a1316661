//! Synthetic and file-backed classification datasets.

use std::fmt;
use std::io::Read;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::TrainError;
use crate::collectives::split_even;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub dim: usize,
    pub classes: usize,
}

/// How to obtain a dataset. Textual form: `blobs:classes=2,dim=16,...`,
/// `moons:...` or `file:path=data.csv,...`; omitted fields take defaults.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Blobs {
        classes: usize,
        dim: usize,
        separation: f64,
        train: usize,
        test: usize,
        seed: u64,
    },
    Moons {
        train: usize,
        test: usize,
        noise: f64,
        seed: u64,
    },
    File {
        path: PathBuf,
        test_fraction: f64,
        seed: u64,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Blobs {
            classes: 2,
            dim: 16,
            separation: 6.0,
            train: 10_000,
            test: 2_000,
            seed: 7,
        }
    }
}

impl fmt::Display for DatasetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetSpec::Blobs {
                classes,
                dim,
                separation,
                train,
                test,
                seed,
            } => write!(
                f,
                "blobs:classes={classes},dim={dim},separation={separation},train={train},test={test},seed={seed}"
            ),
            DatasetSpec::Moons {
                train,
                test,
                noise,
                seed,
            } => write!(f, "moons:train={train},test={test},noise={noise},seed={seed}"),
            DatasetSpec::File {
                path,
                test_fraction,
                seed,
            } => write!(f, "file:path={},test={test_fraction},seed={seed}", path.display()),
        }
    }
}

fn field<T: FromStr>(k: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("bad value '{v}' for {k}"))
}

impl FromStr for DatasetSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        let mut spec = match kind {
            "blobs" => DatasetSpec::default(),
            "moons" => DatasetSpec::Moons {
                train: 2_000,
                test: 500,
                noise: 0.1,
                seed: 7,
            },
            "file" => DatasetSpec::File {
                path: PathBuf::new(),
                test_fraction: 0.2,
                seed: 7,
            },
            _ => return Err(format!("unknown dataset kind '{kind}'")),
        };
        for part in rest.split(',').filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| format!("expected key=value in '{part}'"))?;
            match (&mut spec, k) {
                (DatasetSpec::Blobs { classes, .. }, "classes") => *classes = field(k, v)?,
                (DatasetSpec::Blobs { dim, .. }, "dim") => *dim = field(k, v)?,
                (DatasetSpec::Blobs { separation, .. }, "separation") => *separation = field(k, v)?,
                (DatasetSpec::Blobs { train, .. } | DatasetSpec::Moons { train, .. }, "train") => {
                    *train = field(k, v)?
                }
                (DatasetSpec::Blobs { test, .. } | DatasetSpec::Moons { test, .. }, "test") => *test = field(k, v)?,
                (DatasetSpec::Moons { noise, .. }, "noise") => *noise = field(k, v)?,
                (DatasetSpec::File { path, .. }, "path") => *path = PathBuf::from(v),
                (DatasetSpec::File { test_fraction, .. }, "test") => *test_fraction = field(k, v)?,
                (
                    DatasetSpec::Blobs { seed, .. } | DatasetSpec::Moons { seed, .. } | DatasetSpec::File { seed, .. },
                    "seed",
                ) => *seed = field(k, v)?,
                _ => return Err(format!("unknown {kind} field '{k}'")),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), String> {
        match self {
            DatasetSpec::Blobs {
                classes,
                dim,
                separation,
                train,
                test,
                ..
            } => {
                if *classes < 2 || *dim == 0 || *train == 0 || *test == 0 {
                    return Err("blobs need classes >= 2 and positive dim, train, test".into());
                }
                if !(separation.is_finite() && *separation >= 0.0) {
                    return Err("separation must be finite and non-negative".into());
                }
            }
            DatasetSpec::Moons { train, test, noise, .. } => {
                if *train == 0 || *test == 0 || !(noise.is_finite() && *noise >= 0.0) {
                    return Err("moons need positive train, test and a non-negative noise".into());
                }
            }
            DatasetSpec::File { path, test_fraction, .. } => {
                let p = path.to_string_lossy();
                if p.is_empty() || p.contains([',', '=', '\n']) {
                    return Err("file path must be non-empty without ',', '=' or newlines".into());
                }
                if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                    return Err("test fraction must lie in (0, 1)".into());
                }
            }
        }
        Ok(())
    }

    pub fn load(&self) -> Result<Dataset, TrainError> {
        match self {
            DatasetSpec::Blobs {
                classes,
                dim,
                separation,
                train,
                test,
                seed,
            } => Ok(gaussian_blobs(*classes, *dim, *separation, *train, *test, *seed)),
            DatasetSpec::Moons {
                train,
                test,
                noise,
                seed,
            } => Ok(two_moons(*train, *test, *noise, *seed)),
            DatasetSpec::File {
                path,
                test_fraction,
                seed,
            } => {
                let f = std::fs::File::open(path)
                    .map_err(|e| TrainError::Data(format!("{}: {e}", path.display())))?;
                let samples = parse_csv(f)?;
                split_samples(samples, *test_fraction, *seed)
            }
        }
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Isotropic unit-variance gaussian clusters. Cluster centers lie at
/// distance `separation / 2` from the origin; with two classes they sit
/// on opposite sides, so centers are `separation` apart.
pub fn gaussian_blobs(classes: usize, dim: usize, separation: f64, train: usize, test: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = |rng: &mut ChaCha8Rng| {
        let v = normal_vec(rng, dim);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        v.into_iter().map(|x| x / norm).collect::<Vec<_>>()
    };
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let first = unit(&mut rng);
    centers.push(first.iter().map(|x| x * separation / 2.0).collect());
    if classes == 2 {
        centers.push(first.iter().map(|x| -x * separation / 2.0).collect());
    } else {
        for _ in 1..classes {
            centers.push(unit(&mut rng).into_iter().map(|x| x * separation / 2.0).collect());
        }
    }
    let draw = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Sample> {
        let mut out: Vec<Sample> = (0..n)
            .map(|i| {
                let y = i % classes;
                let x = normal_vec(rng, dim)
                    .into_iter()
                    .zip(&centers[y])
                    .map(|(e, c)| c + e)
                    .collect();
                Sample { x, y }
            })
            .collect();
        out.shuffle(rng);
        out
    };
    let train = draw(train, &mut rng);
    let test = draw(test, &mut rng);
    Dataset {
        train,
        test,
        dim,
        classes,
    }
}

/// Two interleaved half circles in the plane.
pub fn two_moons(train: usize, test: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Sample> {
        let mut out: Vec<Sample> = (0..n)
            .map(|i| {
                let y = i % 2;
                let t = rng.random_range(0.0..std::f64::consts::PI);
                let (a, b) = if y == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                let ea: f64 = StandardNormal.sample(rng);
                let eb: f64 = StandardNormal.sample(rng);
                Sample {
                    x: vec![a + noise * ea, b + noise * eb],
                    y,
                }
            })
            .collect();
        out.shuffle(rng);
        out
    };
    let train = draw(train, &mut rng);
    let test = draw(test, &mut rng);
    Dataset {
        train,
        test,
        dim: 2,
        classes: 2,
    }
}

/// Reads comma-separated rows of features followed by an integer class
/// label. Lines starting with `#` are comments. All rows must have the same
/// width.
pub fn parse_csv(input: impl Read) -> Result<Vec<Sample>, TrainError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut out: Vec<Sample> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| TrainError::Data(format!("row {}: {e}", i + 1)))?;
        if rec.len() < 2 {
            return Err(TrainError::Data(format!("row {}: need features and a label", i + 1)));
        }
        let bad = |what: &str| TrainError::Data(format!("row {}: {what}", i + 1));
        let (label, feats) = (rec.get(rec.len() - 1).unwrap(), rec.len() - 1);
        let y: usize = label.parse().map_err(|_| bad("label must be a non-negative integer"))?;
        if y > 1 << 16 {
            return Err(bad("label out of range"));
        }
        let x = (0..feats)
            .map(|j| rec[j].parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| bad("features must be finite numbers"))?;
        if let Some(first) = out.first() {
            if first.x.len() != x.len() {
                return Err(bad("row width differs from the first row"));
            }
        }
        out.push(Sample { x, y });
    }
    if out.is_empty() {
        return Err(TrainError::Data("no samples".into()));
    }
    Ok(out)
}

/// Shuffles with `seed` and holds out `test_fraction` of the samples.
pub fn split_samples(mut samples: Vec<Sample>, test_fraction: f64, seed: u64) -> Result<Dataset, TrainError> {
    let n = samples.len();
    let n_test = ((n as f64) * test_fraction).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(TrainError::Data(format!("{n} samples cannot be split with test fraction {test_fraction}")));
    }
    samples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let dim = samples[0].x.len();
    let classes = samples.iter().map(|s| s.y).max().unwrap() + 1;
    let test = samples.split_off(n - n_test);
    Ok(Dataset {
        train: samples,
        test,
        dim,
        classes: classes.max(2),
    })
}

/// Deals `samples` into `workers` disjoint shards whose sizes differ by at
/// most one, after a shuffle determined by `seed`.
pub fn shard_data(samples: &[Sample], workers: usize, seed: u64) -> Result<Vec<Vec<Sample>>, TrainError> {
    if workers == 0 || samples.len() < workers {
        return Err(TrainError::Data(format!(
            "cannot shard {} samples across {workers} workers",
            samples.len()
        )));
    }
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(split_even(samples.len(), workers)
        .into_iter()
        .map(|r| idx[r].iter().map(|i| samples[*i].clone()).collect())
        .collect())
}
