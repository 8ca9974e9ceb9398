//! Pseudo-labels for unlabelled test data.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::model::{argmax, LinearClassifier, Targets};
use crate::numkit::Matrix;
use crate::rng::StreamKey;

/// How test rows receive targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LabelStrategy {
    /// Argmax label when the top probability is strictly above `tau`,
    /// otherwise a uniform draw over all K classes.
    Mixed { tau: f64 },
    FullPseudo,
    FullRandom,
    /// The dataset's own labels. Only for ablations; needs labels present.
    GroundTruth,
    /// Soft target 1/K on every class.
    UniformSoft,
}

/// Strategy names as used on the command line and in config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Mixed,
    Pseudo,
    Random,
    Truth,
    Uniform,
}

impl LabelKind {
    pub const ALL: [LabelKind; 5] = [
        LabelKind::Mixed,
        LabelKind::Pseudo,
        LabelKind::Random,
        LabelKind::Truth,
        LabelKind::Uniform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LabelKind::Mixed => "mixed",
            LabelKind::Pseudo => "pseudo",
            LabelKind::Random => "random",
            LabelKind::Truth => "truth",
            LabelKind::Uniform => "uniform",
        }
    }

    pub fn with_tau(self, tau: f64) -> LabelStrategy {
        match self {
            LabelKind::Mixed => LabelStrategy::Mixed { tau },
            LabelKind::Pseudo => LabelStrategy::FullPseudo,
            LabelKind::Random => LabelStrategy::FullRandom,
            LabelKind::Truth => LabelStrategy::GroundTruth,
            LabelKind::Uniform => LabelStrategy::UniformSoft,
        }
    }
}

impl fmt::Display for LabelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LabelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LabelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown label strategy {s:?}")))
    }
}

fn row_draw(seed: u64, name: &str, row: usize, k: usize) -> usize {
    StreamKey::new(seed)
        .with_str("labels")
        .with_str(name)
        .with_u64(row as u64)
        .rng()
        .random_range(0..k)
}

/// Assign targets to every row of `ds` according to `strategy`.
///
/// Random draws use a stream keyed by `(seed, dataset name, row index)`, so
/// a row's label does not depend on which other rows are processed or in
/// what order.
pub fn generate_labels(
    clf: &LinearClassifier,
    ds: &Dataset,
    strategy: LabelStrategy,
    seed: u64,
) -> Result<Targets> {
    let k = ds.num_classes();
    if clf.num_classes() != k {
        return Err(Error::InvalidInput(format!(
            "classifier has {} classes, dataset {:?} has {k}",
            clf.num_classes(),
            ds.name()
        )));
    }
    let m = ds.len();
    Ok(match strategy {
        LabelStrategy::Mixed { tau } => {
            if !(0.0..=1.0).contains(&tau) {
                return Err(Error::InvalidParameter(format!("tau must be in [0, 1], got {tau}")));
            }
            let probs = clf.probabilities(ds.features())?;
            let labels = probs
                .iter_rows()
                .enumerate()
                .map(|(i, p)| {
                    let top = argmax(p);
                    if p[top] > tau {
                        top
                    } else {
                        row_draw(seed, ds.name(), i, k)
                    }
                })
                .collect();
            Targets::Hard(labels)
        }
        LabelStrategy::FullPseudo => Targets::Hard(clf.predict(ds.features())?),
        LabelStrategy::FullRandom => {
            Targets::Hard((0..m).map(|i| row_draw(seed, ds.name(), i, k)).collect())
        }
        LabelStrategy::GroundTruth => Targets::Hard(ds.require_labels("ground-truth labelling")?.to_vec()),
        LabelStrategy::UniformSoft => Targets::Soft(Matrix::from_fn(m, k, |_, _| 1.0 / k as f64)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_setup(m: usize, d: usize, k: usize, seed: u64) -> (LinearClassifier, Dataset) {
        let mut rng = StreamKey::new(seed).rng();
        let x = Matrix::from_fn(m, d, |_, _| StandardNormal.sample(&mut rng));
        let w = Matrix::from_fn(d, k, |_, _| 1.5 * { let z: f64 = StandardNormal.sample(&mut rng); z });
        (
            LinearClassifier::new(w).unwrap(),
            Dataset::new("rand", x, None, k).unwrap(),
        )
    }

    #[test]
    fn tau_zero_equals_full_pseudo() {
        let (clf, ds) = random_setup(300, 5, 4, 1);
        let a = generate_labels(&clf, &ds, LabelStrategy::Mixed { tau: 0.0 }, 3).unwrap();
        let b = generate_labels(&clf, &ds, LabelStrategy::FullPseudo, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tau_one_is_uniform_within_three_sigma() {
        let m = 10_000;
        let k = 3;
        let (clf, ds) = random_setup(m, 4, k, 2);
        let t = generate_labels(&clf, &ds, LabelStrategy::Mixed { tau: 1.0 }, 99).unwrap();
        let labels = t.hard().unwrap();
        let p = 1.0 / k as f64;
        let sigma = (p * (1.0 - p) / m as f64).sqrt();
        for c in 0..k {
            let freq = labels.iter().filter(|&&y| y == c).count() as f64 / m as f64;
            assert!((freq - p).abs() <= 3.0 * sigma, "class {c}: {freq}");
        }
    }

    #[test]
    fn low_confidence_draw_is_reproducible() {
        // all-zero weights: every row sits at confidence 1/3
        let clf = LinearClassifier::zeros(2, 3).unwrap();
        let ds = Dataset::new("one", Matrix::from_rows(&[[0.3, -0.1]]).unwrap(), None, 3).unwrap();
        let s = LabelStrategy::Mixed { tau: 0.5 };
        let a = generate_labels(&clf, &ds, s, 42).unwrap();
        let b = generate_labels(&clf, &ds, s, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.hard().unwrap()[0] < 3);
    }

    #[test]
    fn confident_rows_keep_argmax_and_agree_with_pseudo() {
        let (clf, ds) = random_setup(500, 6, 4, 5);
        let probs = clf.probabilities(ds.features()).unwrap();
        let pseudo = generate_labels(&clf, &ds, LabelStrategy::FullPseudo, 0).unwrap();
        for tau in [0.3, 0.5, 0.8] {
            let mixed = generate_labels(&clf, &ds, LabelStrategy::Mixed { tau }, 7).unwrap();
            for (i, p) in probs.iter_rows().enumerate() {
                if p.iter().copied().fold(0.0, f64::max) > tau {
                    assert_eq!(mixed.hard().unwrap()[i], pseudo.hard().unwrap()[i]);
                }
            }
        }
    }

    #[test]
    fn labels_do_not_depend_on_row_order() {
        let (clf, ds) = random_setup(50, 3, 3, 6);
        let all = generate_labels(&clf, &ds, LabelStrategy::FullRandom, 8).unwrap();
        // the same rows, processed as a prefix, get the same draws
        let idx: Vec<usize> = (0..20).collect();
        let part = generate_labels(&clf, &ds.select(&idx).unwrap(), LabelStrategy::FullRandom, 8).unwrap();
        assert_eq!(&all.hard().unwrap()[..20], part.hard().unwrap());
    }

    #[test]
    fn strategies_cover_ground_truth_and_uniform() {
        let (clf, ds) = random_setup(10, 3, 4, 7);
        assert!(generate_labels(&clf, &ds, LabelStrategy::GroundTruth, 0).is_err());
        let labelled = ds.with_labels(vec![1; 10]).unwrap();
        let t = generate_labels(&clf, &labelled, LabelStrategy::GroundTruth, 0).unwrap();
        assert_eq!(t, Targets::Hard(vec![1; 10]));
        match generate_labels(&clf, &ds, LabelStrategy::UniformSoft, 0).unwrap() {
            Targets::Soft(s) => assert!(s.data().iter().all(|&v| v == 0.25)),
            other => panic!("{other:?}"),
        }
        assert!(generate_labels(&clf, &ds, LabelStrategy::Mixed { tau: 1.5 }, 0).is_err());
    }

    #[test]
    fn label_kind_names_round_trip() {
        for k in LabelKind::ALL {
            assert_eq!(k.name().parse::<LabelKind>().unwrap(), k);
        }
        assert!("bogus".parse::<LabelKind>().is_err());
    }
}
