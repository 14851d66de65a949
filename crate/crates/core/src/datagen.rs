//! Synthetic dataset generation with controllable conditional shift and
//! label shift, plus feature-file ingestion.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distributions::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::FeatureSet;
use crate::label_shift::l1_label_distance;
use crate::numerics::DenseMatrix;
use crate::objectives::check_simplex;

/// A two-domain sampling plan: gaussian class-conditionals whose means and
/// scales may differ between domains, under different label priors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlsScenario {
    pub name: String,
    /// Per-class mean vectors in the source domain, c rows of width d.
    pub source_means: Vec<Vec<f64>>,
    /// Per-class isotropic standard deviations in the source domain.
    pub source_scales: Vec<f64>,
    pub target_means: Vec<Vec<f64>>,
    pub target_scales: Vec<f64>,
    pub source_prior: Vec<f64>,
    pub target_prior: Vec<f64>,
    pub n_source: usize,
    pub n_target: usize,
    pub seed: u64,
}

/// Ground-truth record kept alongside generated data for evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioOracle {
    pub scenario: String,
    pub source_prior: Vec<f64>,
    pub target_prior: Vec<f64>,
    /// Per-class translation applied to the class-conditional mean.
    pub mean_shifts: Vec<Vec<f64>>,
    pub l1_prior_distance: f64,
}

impl GlsScenario {
    pub fn class_count(&self) -> usize {
        self.source_prior.len()
    }

    fn validate(&self) -> Result<()> {
        let c = self.class_count();
        if c == 0 {
            return Err(Error::Empty("scenario with no classes".into()));
        }
        if self.target_prior.len() != c
            || self.source_means.len() != c
            || self.target_means.len() != c
            || self.source_scales.len() != c
            || self.target_scales.len() != c
        {
            return Err(Error::DimensionMismatch(
                "per-class fields disagree on the class count".into(),
            ));
        }
        check_simplex(&self.source_prior)?;
        check_simplex(&self.target_prior)?;
        let d = self.source_means[0].len();
        if self
            .source_means
            .iter()
            .chain(self.target_means.iter())
            .any(|m| m.len() != d)
        {
            return Err(Error::DimensionMismatch("mean widths disagree".into()));
        }
        if self
            .source_scales
            .iter()
            .chain(self.target_scales.iter())
            .any(|&s| !(s > 0.0) || !s.is_finite())
        {
            return Err(Error::InvalidArgument(
                "class scales must be positive and finite".into(),
            ));
        }
        Ok(())
    }

    /// A scenario by name. `null` draws both domains from one law; `g1` is
    /// a 3-class mean-shift with skewed target prior; `g2` drops two of
    /// four classes from the target.
    pub fn named(name: &str, seed: u64) -> Result<GlsScenario> {
        let third = 1.0 / 3.0;
        match name {
            "null" => Ok(GlsScenario {
                name: "null".into(),
                source_means: vec![vec![0.0, 0.0], vec![0.0, 3.0], vec![3.0, 1.5]],
                source_scales: vec![0.4; 3],
                target_means: vec![vec![0.0, 0.0], vec![0.0, 3.0], vec![3.0, 1.5]],
                target_scales: vec![0.4; 3],
                source_prior: vec![third; 3],
                target_prior: vec![third; 3],
                n_source: 600,
                n_target: 600,
                seed,
            }),
            "g1" => Ok(GlsScenario {
                name: "g1".into(),
                source_means: vec![vec![0.0, 0.0], vec![0.0, 3.0], vec![3.0, 1.5]],
                source_scales: vec![0.4; 3],
                target_means: vec![vec![1.5, 0.0], vec![1.5, 3.0], vec![4.5, 1.5]],
                target_scales: vec![0.4; 3],
                source_prior: vec![third; 3],
                target_prior: vec![0.6, 0.3, 0.1],
                n_source: 600,
                n_target: 600,
                seed,
            }),
            "g2" => Ok(GlsScenario {
                name: "g2".into(),
                source_means: vec![
                    vec![0.0, 0.0],
                    vec![0.0, 3.0],
                    vec![3.0, 1.5],
                    vec![-3.0, 1.5],
                ],
                source_scales: vec![0.4; 4],
                target_means: vec![
                    vec![1.5, 0.0],
                    vec![1.5, 3.0],
                    vec![4.5, 1.5],
                    vec![-1.5, 1.5],
                ],
                target_scales: vec![0.4; 4],
                source_prior: vec![0.25; 4],
                target_prior: vec![0.5, 0.5, 0.0, 0.0],
                n_source: 600,
                n_target: 600,
                seed,
            }),
            other => Err(Error::InvalidArgument(format!(
                "unknown scenario '{other}' (expected null, g1, g2)"
            ))),
        }
    }
}

fn sample_domain(
    rng: &mut ChaCha8Rng,
    means: &[Vec<f64>],
    scales: &[f64],
    prior: &[f64],
    n: usize,
) -> Result<FeatureSet> {
    let d = means[0].len();
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut y = prior.len() - 1;
        for (j, &p) in prior.iter().enumerate() {
            acc += p;
            if u < acc {
                y = j;
                break;
            }
        }
        labels.push(y as i64);
        for k in 0..d {
            let g: f64 = StandardNormal.sample(rng);
            data.push(means[y][k] + scales[y] * g);
        }
    }
    FeatureSet::labeled(DenseMatrix::new(n, d, data)?, labels)
}

/// Draw both domains of a scenario. Target labels are returned for
/// evaluation only; training must strip them.
pub fn synth_gls(scenario: &GlsScenario) -> Result<(FeatureSet, FeatureSet, ScenarioOracle)> {
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let source = sample_domain(
        &mut rng,
        &scenario.source_means,
        &scenario.source_scales,
        &scenario.source_prior,
        scenario.n_source,
    )?;
    let target = sample_domain(
        &mut rng,
        &scenario.target_means,
        &scenario.target_scales,
        &scenario.target_prior,
        scenario.n_target,
    )?;
    let mean_shifts = scenario
        .source_means
        .iter()
        .zip(scenario.target_means.iter())
        .map(|(s, t)| s.iter().zip(t.iter()).map(|(a, b)| b - a).collect())
        .collect();
    let oracle = ScenarioOracle {
        scenario: scenario.name.clone(),
        source_prior: scenario.source_prior.clone(),
        target_prior: scenario.target_prior.clone(),
        mean_shifts,
        l1_prior_distance: l1_label_distance(&scenario.source_prior, &scenario.target_prior)?,
    };
    Ok((source, target, oracle))
}

/// Read a feature CSV: header `f0,...,f{d-1},label`, one sample per row,
/// label -1 meaning unlabeled.
pub fn load_features(path: &Path) -> Result<FeatureSet> {
    let file = File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse {
            line: 1,
            msg: "empty file".into(),
        })??;
    let cols: Vec<&str> = header.trim_end().split(',').collect();
    if cols.len() < 2 || cols[cols.len() - 1] != "label" {
        return Err(Error::Parse {
            line: 1,
            msg: "expected header f0,...,f{d-1},label".into(),
        });
    }
    let d = cols.len() - 1;
    for (k, col) in cols[..d].iter().enumerate() {
        if *col != format!("f{k}") {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected column f{k}, found '{col}'"),
            });
        }
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in lines.enumerate() {
        let lineno = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != d + 1 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected {} fields, found {}", d + 1, fields.len()),
            });
        }
        for f in &fields[..d] {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad float '{f}'"),
            })?;
            data.push(v);
        }
        let label: i64 = fields[d].parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("bad label '{}'", fields[d]),
        })?;
        if label < -1 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("label {label} below -1"),
            });
        }
        labels.push(label);
    }
    let n = labels.len();
    let features = DenseMatrix::new(n, d, data)?;
    if labels.iter().all(|&l| l == -1) {
        Ok(FeatureSet::unlabeled(features))
    } else {
        FeatureSet::labeled(features, labels)
    }
}

/// Write a FeatureSet in the same CSV dialect `load_features` reads.
/// Floats use the shortest representation that parses back bit-exactly.
pub fn save_features(path: &Path, set: &FeatureSet) -> Result<()> {
    let file = File::create(path)?;
    let mut out = BufWriter::new(file);
    let d = set.dim();
    for k in 0..d {
        write!(out, "f{k},")?;
    }
    writeln!(out, "label")?;
    for i in 0..set.len() {
        for &v in set.features.row(i) {
            write!(out, "{v},")?;
        }
        let label = set.labels.as_ref().map_or(-1, |ls| ls[i]);
        writeln!(out, "{label}")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn class_freqs(set: &FeatureSet, c: usize) -> Vec<f64> {
        let mut f = vec![0.0; c];
        for &l in set.labels.as_ref().unwrap() {
            f[l as usize] += 1.0 / set.len() as f64;
        }
        f
    }

    #[test]
    fn null_scenario_same_law() {
        let mut sc = GlsScenario::named("null", 11).unwrap();
        sc.n_source = 10_000;
        sc.n_target = 10_000;
        let (s, t, oracle) = synth_gls(&sc).unwrap();
        assert_eq!(oracle.l1_prior_distance, 0.0);
        let fs = class_freqs(&s, 3);
        let ft = class_freqs(&t, 3);
        let gap: f64 = fs.iter().zip(&ft).map(|(a, b)| (a - b).abs()).sum();
        assert!(gap < 0.05, "two-sample l1 gap {gap}");
    }

    #[test]
    fn g1_prior_distance() {
        let (_, _, oracle) = synth_gls(&GlsScenario::named("g1", 5).unwrap()).unwrap();
        assert!((oracle.l1_prior_distance - 0.5333333333333333).abs() < 1e-12);
    }

    #[test]
    fn g2_prior_distance_exact() {
        let (_, t, oracle) = synth_gls(&GlsScenario::named("g2", 5).unwrap()).unwrap();
        assert_eq!(oracle.l1_prior_distance, 1.0);
        // absent classes truly absent
        assert!(t.labels.as_ref().unwrap().iter().all(|&l| l < 2));
    }

    #[test]
    fn deterministic_and_prior_convergent() {
        let mut sc = GlsScenario::named("g1", 123).unwrap();
        sc.n_source = 10_000;
        sc.n_target = 10_000;
        let (s1, t1, _) = synth_gls(&sc).unwrap();
        let (s2, _, _) = synth_gls(&sc).unwrap();
        assert_eq!(s1.features.data(), s2.features.data());
        let gap: f64 = class_freqs(&s1, 3)
            .iter()
            .zip(sc.source_prior.iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(gap < 0.05);
        let tgap: f64 = class_freqs(&t1, 3)
            .iter()
            .zip(sc.target_prior.iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(tgap < 0.05);
    }

    #[test]
    fn load_single_row() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("one.csv");
        std::fs::write(&p, "f0,f1,label\n0.0,1.0,0\n").unwrap();
        let set = load_features(&p).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.dim(), 2);
        assert_eq!(set.labels.as_ref().unwrap()[0], 0);
    }

    #[test]
    fn load_all_unlabeled() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("u.csv");
        std::fs::write(&p, "f0,label\n1.5,-1\n2.5,-1\n").unwrap();
        let set = load_features(&p).unwrap();
        assert!(set.labels.is_none());
        assert_eq!(set.len(), 2);
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "f0,label\n1.0,0\nnope,1\n").unwrap();
        match load_features(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let q = dir.path().join("wide.csv");
        std::fs::write(&q, "f0,label\n1.0,2.0,0\n").unwrap();
        assert!(matches!(load_features(&q), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn save_load_round_trip_bit_exact() {
        let (s, _, _) = synth_gls(&GlsScenario::named("g1", 42).unwrap()).unwrap();
        let dir = tempdir().unwrap();
        let p = dir.path().join("rt.csv");
        save_features(&p, &s).unwrap();
        let back = load_features(&p).unwrap();
        assert_eq!(s.features.data(), back.features.data());
        assert_eq!(s.labels, back.labels);
    }
}
