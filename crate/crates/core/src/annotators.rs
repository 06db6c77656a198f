//! Synthetic annotators and the external label-file format.
//!
//! Label CSV: header `sample_index,annotator_id,label`, one row per
//! `(sample, annotator)` pair, 0-based indices, UTF-8. Every pair must appear
//! exactly once.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LABEL_CSV_HEADER: [&str; 3] = ["sample_index", "annotator_id", "label"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Euclidean,
    HammerSpammer,
    External,
    /// Fixed geometric rules (the TwoMoon annotators).
    Geometric,
    /// Copies of the golden labels.
    Golden,
}

/// `R x N` label matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatorLabels {
    labels: Array2<usize>,
    classes: usize,
    provenance: Provenance,
}

impl AnnotatorLabels {
    pub fn new(labels: Array2<usize>, classes: usize, provenance: Provenance) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::InvalidLabel {
                label: bad,
                classes,
            });
        }
        Ok(AnnotatorLabels {
            labels,
            classes,
            provenance,
        })
    }

    /// Every annotator returns the golden label.
    pub fn golden_copies(golden: &[usize], classes: usize, annotators: usize) -> Result<Self> {
        let labels = Array2::from_shape_fn((annotators, golden.len()), |(_, n)| golden[n]);
        Self::new(labels, classes, Provenance::Golden)
    }

    pub fn annotators(&self) -> usize {
        self.labels.nrows()
    }

    pub fn samples(&self) -> usize {
        self.labels.ncols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn matrix(&self) -> &Array2<usize> {
        &self.labels
    }

    #[inline]
    pub fn get(&self, annotator: usize, sample: usize) -> usize {
        self.labels[[annotator, sample]]
    }

    /// All annotators' labels for one sample.
    pub fn sample_labels(&self, sample: usize) -> Vec<usize> {
        self.labels.column(sample).to_vec()
    }

    /// One annotator's labels across samples.
    pub fn annotator_row(&self, annotator: usize) -> Vec<usize> {
        self.labels.row(annotator).to_vec()
    }

    /// Column subset, in the given order.
    pub fn select(&self, samples: &[usize]) -> Self {
        AnnotatorLabels {
            labels: self.labels.select(ndarray::Axis(1), samples),
            classes: self.classes,
            provenance: self.provenance,
        }
    }
}

/// A uniformly drawn label different from `golden`.
fn wrong_label(golden: usize, classes: usize, rng: &mut impl Rng) -> usize {
    let draw = rng.random_range(0..classes - 1);
    if draw >= golden {
        draw + 1
    } else {
        draw
    }
}

/// Independent RNG stream for one `(annotator, sample)` cell, so the label of
/// a cell does not depend on iteration order or on other cells.
fn cell_rng(seed: u64, annotator: usize, sample: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((annotator as u64) << 40) | sample as u64);
    rng
}

fn check_golden(golden: &[usize], classes: usize) -> Result<()> {
    if classes < 2 {
        return Err(Error::InvalidArgument(format!("need K >= 2, got {classes}")));
    }
    if let Some(&bad) = golden.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidLabel {
            label: bad,
            classes,
        });
    }
    Ok(())
}

/// Weakness-ball annotators.
///
/// Each annotator gets its own weakness sample (drawn without replacement).
/// Samples strictly closer than `epsilon` to it receive a uniformly drawn wrong
/// label; all others keep the golden label.
pub fn synthesize_euclidean(
    features: ArrayView2<'_, f64>,
    golden: &[usize],
    classes: usize,
    annotators: usize,
    epsilon: f64,
    seed: u64,
) -> Result<AnnotatorLabels> {
    let n = features.nrows();
    if n == 0 {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    if golden.len() != n {
        return Err(Error::dim(format!("{n} feature rows but {} golden labels", golden.len())));
    }
    if annotators == 0 || annotators > n {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= R <= N, got R={annotators}, N={n}"
        )));
    }
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be >= 0, got {epsilon}")));
    }
    check_golden(golden, classes)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weakness = index::sample(&mut rng, n, annotators).into_vec();
    let mut labels = Array2::zeros((annotators, n));
    for (r, &w) in weakness.iter().enumerate() {
        let anchor = features.row(w);
        for (i, row) in features.rows().into_iter().enumerate() {
            let dist = row
                .iter()
                .zip(anchor.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            labels[[r, i]] = if dist < epsilon {
                wrong_label(golden[i], classes, &mut cell_rng(seed, r, i))
            } else {
                golden[i]
            };
        }
    }
    AnnotatorLabels::new(labels, classes, Provenance::Euclidean)
}

/// Class-wise hammer/spammer annotators: each annotator is always right on
/// `n_correct` randomly chosen classes and returns a uniformly drawn wrong
/// label (fresh per sample) on the rest.
pub fn synthesize_hammer_spammer(
    golden: &[usize],
    classes: usize,
    annotators: usize,
    n_correct: usize,
    seed: u64,
) -> Result<AnnotatorLabels> {
    check_golden(golden, classes)?;
    if n_correct > classes {
        return Err(Error::InvalidArgument(format!(
            "N_correct={n_correct} exceeds K={classes}"
        )));
    }
    if annotators == 0 {
        return Err(Error::InvalidArgument("need R >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = Array2::zeros((annotators, golden.len()));
    for r in 0..annotators {
        let mut hammer = vec![false; classes];
        for c in index::sample(&mut rng, classes, n_correct) {
            hammer[c] = true;
        }
        for (i, &g) in golden.iter().enumerate() {
            labels[[r, i]] = if hammer[g] {
                g
            } else {
                wrong_label(g, classes, &mut cell_rng(seed, r, i))
            };
        }
    }
    AnnotatorLabels::new(labels, classes, Provenance::HammerSpammer)
}

/// Per-annotator fraction of labels that differ from `golden`.
pub fn corruption_rate(labels: &AnnotatorLabels, golden: &[usize]) -> Result<Vec<f64>> {
    if labels.samples() != golden.len() {
        return Err(Error::dim(format!(
            "{} labelled samples but {} golden labels",
            labels.samples(),
            golden.len()
        )));
    }
    if golden.is_empty() {
        return Ok(vec![0.0; labels.annotators()]);
    }
    Ok(labels
        .labels
        .rows()
        .into_iter()
        .map(|row| {
            row.iter().zip(golden).filter(|(a, b)| a != b).count() as f64 / golden.len() as f64
        })
        .collect())
}

pub fn write_label_csv(path: &Path, labels: &AnnotatorLabels) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(LABEL_CSV_HEADER)?;
    for n in 0..labels.samples() {
        for r in 0..labels.annotators() {
            w.write_record([n.to_string(), r.to_string(), labels.get(r, n).to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads and validates an external label file for `samples x annotators` cells.
pub fn load_external_labels(
    path: &Path,
    samples: usize,
    annotators: usize,
    classes: usize,
) -> Result<AnnotatorLabels> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => parse_err(1, format!("{other:?}")),
        })?;
    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != LABEL_CSV_HEADER {
        return Err(parse_err(
            1,
            format!("expected header {:?}, found {:?}", LABEL_CSV_HEADER.join(","), header),
        ));
    }

    let mut cells: Array2<Option<usize>> = Array2::from_elem((annotators, samples), None);
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != 3 {
            return Err(parse_err(line, format!("expected 3 fields, found {}", record.len())));
        }
        let field = |i: usize, name: &str| -> Result<usize> {
            record[i]
                .parse::<usize>()
                .map_err(|_| parse_err(line, format!("{name} {:?} is not a non-negative integer", &record[i])))
        };
        let sample = field(0, "sample_index")?;
        let annotator = field(1, "annotator_id")?;
        let label = field(2, "label")?;
        if sample >= samples {
            return Err(parse_err(line, format!("sample_index {sample} >= N={samples}")));
        }
        if annotator >= annotators {
            return Err(parse_err(line, format!("annotator_id {annotator} >= R={annotators}")));
        }
        if label >= classes {
            return Err(Error::LabelRange {
                path: path.to_path_buf(),
                line,
                label,
                classes,
            });
        }
        let cell = &mut cells[[annotator, sample]];
        if cell.is_some() {
            return Err(Error::DuplicateEntry {
                path: path.to_path_buf(),
                line,
                sample,
                annotator,
            });
        }
        *cell = Some(label);
    }

    for n in 0..samples {
        for r in 0..annotators {
            if cells[[r, n]].is_none() {
                return Err(Error::MissingEntry {
                    path: path.to_path_buf(),
                    sample: n,
                    annotator: r,
                });
            }
        }
    }
    AnnotatorLabels::new(
        cells.mapv(|c| c.expect("checked above")),
        classes,
        Provenance::External,
    )
}
