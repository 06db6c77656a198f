//! Datasets: the TwoMoon generator, MNIST IDX ingestion, splits and
//! standardization.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::annotators::{AnnotatorLabels, Provenance};
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub golden: Option<Vec<usize>>,
    pub annotators: Option<AnnotatorLabels>,
    pub classes: usize,
    pub split: SplitTag,
}

impl Dataset {
    pub fn new(
        features: Array2<f64>,
        golden: Option<Vec<usize>>,
        annotators: Option<AnnotatorLabels>,
        classes: usize,
        split: SplitTag,
    ) -> Result<Self> {
        let ds = Dataset {
            features,
            golden,
            annotators,
            classes,
            split,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if let Some(g) = &self.golden {
            if g.len() != n {
                return Err(Error::dim(format!("{n} samples but {} golden labels", g.len())));
            }
            if let Some(&bad) = g.iter().find(|&&y| y >= self.classes) {
                return Err(Error::InvalidLabel {
                    label: bad,
                    classes: self.classes,
                });
            }
        }
        if let Some(a) = &self.annotators {
            if a.samples() != n {
                return Err(Error::dim(format!(
                    "{n} samples but annotator labels cover {}",
                    a.samples()
                )));
            }
            if a.classes() != self.classes {
                return Err(Error::dim(format!(
                    "dataset has K={} but annotator labels K={}",
                    self.classes,
                    a.classes()
                )));
            }
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite feature value".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn golden(&self) -> Result<&[usize]> {
        self.golden
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("dataset has no golden labels".into()))
    }

    pub fn annotator_labels(&self) -> Result<&AnnotatorLabels> {
        self.annotators
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("dataset has no annotator labels".into()))
    }

    /// Rows `indices`, in order, with every label source subset consistently.
    pub fn select(&self, indices: &[usize], split: SplitTag) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), indices),
            golden: self
                .golden
                .as_ref()
                .map(|g| indices.iter().map(|&i| g[i]).collect()),
            annotators: self.annotators.as_ref().map(|a| a.select(indices)),
            classes: self.classes,
            split,
        }
    }

    /// First `n` rows (or all of them if fewer).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx, self.split)
    }
}

/// TwoMoon generator settings.
///
/// Branches are `(cos t, sin t)` (upper) and `(1 - cos t, 0.5 - sin t)` (lower)
/// for `t ~ U[0, pi]`. With `center` set the cloud is shifted by `(-0.5, -0.25)`
/// so both branches straddle the axes symmetrically. Annotator 1 answers
/// `upper_label` when `x < 0`; annotator 2 answers `upper_label` when
/// `y > y_threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwoMoonConfig {
    pub n: usize,
    pub noise_sigma: f64,
    pub center: bool,
    pub upper_label: usize,
    pub y_threshold: f64,
    pub seed: u64,
}

impl Default for TwoMoonConfig {
    fn default() -> Self {
        TwoMoonConfig {
            n: 20_000,
            noise_sigma: 0.1,
            center: true,
            upper_label: 1,
            y_threshold: 0.0,
            seed: 0,
        }
    }
}

/// Rule-based labels of the two TwoMoon annotators at `(x, y)`.
pub fn two_moon_annotator_labels(cfg: &TwoMoonConfig, x: f64, y: f64) -> [usize; 2] {
    let upper = cfg.upper_label;
    let lower = 1 - upper;
    [
        if x < 0.0 { upper } else { lower },
        if y > cfg.y_threshold { upper } else { lower },
    ]
}

/// Golden labels plus the two rule-based annotators, rows in generation order
/// (all upper-branch points first).
pub fn generate_two_moon(cfg: &TwoMoonConfig) -> Result<Dataset> {
    if cfg.n == 0 || cfg.n % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "TwoMoon needs a positive even n, got {}",
            cfg.n
        )));
    }
    if !(cfg.noise_sigma >= 0.0) || !cfg.noise_sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "noise_sigma must be finite and >= 0, got {}",
            cfg.noise_sigma
        )));
    }
    if cfg.upper_label > 1 {
        return Err(Error::InvalidArgument("upper_label must be 0 or 1".into()));
    }
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (dx, dy) = if cfg.center { (0.5, 0.25) } else { (0.0, 0.0) };
    let half = cfg.n / 2;

    let mut features = Array2::zeros((cfg.n, 2));
    let mut golden = Vec::with_capacity(cfg.n);
    let mut ants = Array2::zeros((2, cfg.n));
    for i in 0..cfg.n {
        let t = rng.random_range(0.0..=std::f64::consts::PI);
        let upper = i < half;
        let (bx, by) = if upper {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        let x = bx - dx + noise.sample(&mut rng);
        let y = by - dy + noise.sample(&mut rng);
        features[[i, 0]] = x;
        features[[i, 1]] = y;
        golden.push(if upper { cfg.upper_label } else { 1 - cfg.upper_label });
        let [a1, a2] = two_moon_annotator_labels(cfg, x, y);
        ants[[0, i]] = a1;
        ants[[1, i]] = a2;
    }
    let annotators = AnnotatorLabels::new(ants, 2, Provenance::Geometric)?;
    Dataset::new(features, Some(golden), Some(annotators), 2, SplitTag::All)
}

/// CSV `x,y,golden,ant1,ant2` for external plotting.
pub fn write_two_moon_csv(path: &Path, ds: &Dataset) -> Result<()> {
    if ds.dim() != 2 {
        return Err(Error::dim(format!("expected 2-D features, got {}", ds.dim())));
    }
    let golden = ds.golden()?;
    let ants = ds.annotator_labels()?;
    if ants.annotators() < 2 {
        return Err(Error::dim("need two annotators".to_string()));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x", "y", "golden", "ant1", "ant2"])?;
    for i in 0..ds.len() {
        w.write_record([
            ds.features[[i, 0]].to_string(),
            ds.features[[i, 1]].to_string(),
            golden[i].to_string(),
            ants.get(0, i).to_string(),
            ants.get(1, i).to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4-byte slice")))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("missing {what}"),
        })
}

fn read_idx(path: &Path, magic: u32, rank: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let found = be_u32(&bytes, 0, path, "magic")?;
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found,
            expected: magic,
        });
    }
    let dims = (0..rank)
        .map(|d| be_u32(&bytes, 4 + 4 * d, path, "dimension").map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * rank;
    let expected = dims.iter().product::<usize>();
    let body = &bytes[start..];
    if body.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("expected {expected} data bytes, found {}", body.len()),
        });
    }
    if body.len() > expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("{} unexpected trailing bytes", body.len() - expected),
        });
    }
    Ok((dims, body.to_vec()))
}

/// Loads an IDX image/label pair. Pixels are flattened row-major and scaled
/// to `[0, 1]`; the class count is fixed at 10.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (idims, pixels) = read_idx(images_path, IDX_IMAGES_MAGIC, 3)?;
    let (ldims, labels) = read_idx(labels_path, IDX_LABELS_MAGIC, 1)?;
    if idims[0] != ldims[0] {
        return Err(Error::CountMismatch {
            images: idims[0],
            labels: ldims[0],
        });
    }
    let d = idims[1] * idims[2];
    let features = Array2::from_shape_vec(
        (idims[0], d),
        pixels.iter().map(|&p| p as f64 / 255.0).collect(),
    )
    .map_err(|e| Error::dim(e.to_string()))?;
    let golden = labels.iter().map(|&l| l as usize).collect();
    Dataset::new(features, Some(golden), None, 10, SplitTag::All)
}

/// Writes an IDX image file; `images` holds `n * rows * cols` bytes.
pub fn write_idx_images(path: &Path, rows: usize, cols: usize, images: &[u8]) -> Result<()> {
    if rows * cols == 0 || images.len() % (rows * cols) != 0 {
        return Err(Error::dim("image buffer is not a whole number of images".to_string()));
    }
    let mut out = Vec::with_capacity(16 + images.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for v in [images.len() / (rows * cols), rows, cols] {
        out.extend_from_slice(&(v as u32).to_be_bytes());
    }
    out.extend_from_slice(images);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Seeded partition into `(train, val, test)`. Leftover rows are dropped.
pub fn split(
    ds: &Dataset,
    sizes: (usize, usize, usize),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let (a, b, c) = sizes;
    let total = a
        .checked_add(b)
        .and_then(|s| s.checked_add(c))
        .ok_or_else(|| Error::InvalidArgument("split sizes overflow".into()))?;
    if total > ds.len() {
        return Err(Error::InvalidArgument(format!(
            "split sizes {a}+{b}+{c} exceed {} samples",
            ds.len()
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((
        ds.select(&order[..a], SplitTag::Train),
        ds.select(&order[a..a + b], SplitTag::Val),
        ds.select(&order[a + b..total], SplitTag::Test),
    ))
}

/// Per-feature affine map fitted on a training matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl Standardizer {
    pub fn fit(features: &Array2<f64>) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::InvalidArgument("cannot standardize on an empty split".into()));
        }
        let mean = features.mean_axis(Axis(0)).expect("non-empty");
        let std = features.std_axis(Axis(0), 0.0).mapv(|s| s.max(STD_FLOOR));
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, features: &Array2<f64>) -> Result<Array2<f64>> {
        if features.ncols() != self.mean.len() {
            return Err(Error::dim(format!(
                "standardizer fitted on {} features, got {}",
                self.mean.len(),
                features.ncols()
            )));
        }
        Ok((features - &self.mean) / &self.std)
    }
}

/// Fits on `train` and rewrites the features of `train` and every other split.
pub fn standardize(train: &mut Dataset, others: &mut [&mut Dataset]) -> Result<Standardizer> {
    let s = Standardizer::fit(&train.features)?;
    train.features = s.apply(&train.features)?;
    for ds in others.iter_mut() {
        ds.features = s.apply(&ds.features)?;
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn agreement(ds: &Dataset, r: usize) -> f64 {
        let g = ds.golden().unwrap();
        let a = ds.annotator_labels().unwrap();
        (0..ds.len()).filter(|&i| a.get(r, i) == g[i]).count() as f64 / ds.len() as f64
    }

    #[test]
    fn annotator_rules_at_branch_points() {
        let cfg = TwoMoonConfig::default();
        // Upper branch left end (-1, 0) centred to (-1.5, -0.25): golden = upper label.
        assert_eq!(two_moon_annotator_labels(&cfg, -1.5, -0.25), [1, 0]);
        // Lower branch midpoint (1, -0.5) centred to (0.5, -0.75): golden 0, both right.
        assert_eq!(two_moon_annotator_labels(&cfg, 0.5, -0.75), [0, 0]);
        // Upper branch apex (0, 1) centred to (-0.5, 0.75): both right.
        assert_eq!(two_moon_annotator_labels(&cfg, -0.5, 0.75), [1, 1]);

        let flipped = TwoMoonConfig {
            upper_label: 0,
            ..cfg
        };
        assert_eq!(two_moon_annotator_labels(&flipped, -1.5, -0.25), [0, 1]);
    }

    #[test]
    fn two_moon_noise_free_rows_on_branches() {
        let cfg = TwoMoonConfig {
            n: 200,
            noise_sigma: 0.0,
            ..Default::default()
        };
        let ds = generate_two_moon(&cfg).unwrap();
        for i in 0..ds.len() {
            let (x, y) = (ds.features[[i, 0]] + 0.5, ds.features[[i, 1]] + 0.25);
            let on_upper = ((x * x + y * y) - 1.0).abs() < 1e-12 && y >= -1e-12;
            let on_lower = (((1.0 - x).powi(2) + (0.5 - y).powi(2)) - 1.0).abs() < 1e-12 && y <= 0.5 + 1e-12;
            if i < 100 {
                assert!(on_upper);
                assert_eq!(ds.golden.as_ref().unwrap()[i], 1);
            } else {
                assert!(on_lower);
                assert_eq!(ds.golden.as_ref().unwrap()[i], 0);
            }
        }
    }

    #[test]
    fn two_moon_agreement_regime() {
        let ds = generate_two_moon(&TwoMoonConfig::default()).unwrap();
        let a1 = agreement(&ds, 0);
        let a2 = agreement(&ds, 1);
        assert!((0.60..=0.75).contains(&a1), "AnT-1 agreement {a1}");
        assert!((0.78..=0.90).contains(&a2), "AnT-2 agreement {a2}");
        // Branch balance.
        let ones = ds.golden().unwrap().iter().filter(|&&y| y == 1).count();
        assert_eq!(ones, 10_000);
    }

    #[test]
    fn two_moon_agreement_pins() {
        // Regression pins at seed 0; the noise-free values are 2/3 and about 0.839.
        let ds = generate_two_moon(&TwoMoonConfig::default()).unwrap();
        assert!((agreement(&ds, 0) - 0.66645).abs() < 1e-12, "{}", agreement(&ds, 0));
        assert!((agreement(&ds, 1) - 0.8411).abs() < 1e-12, "{}", agreement(&ds, 1));
    }

    #[test]
    fn two_moon_errors_and_determinism() {
        for n in [0, 3] {
            let cfg = TwoMoonConfig { n, ..Default::default() };
            assert!(generate_two_moon(&cfg).is_err());
        }
        let cfg = TwoMoonConfig { noise_sigma: -0.1, ..Default::default() };
        assert!(generate_two_moon(&cfg).is_err());
        let cfg = TwoMoonConfig { n: 500, seed: 3, ..Default::default() };
        assert_eq!(generate_two_moon(&cfg).unwrap(), generate_two_moon(&cfg).unwrap());
    }

    #[test]
    fn two_moon_csv_export() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("moons.csv");
        let ds = generate_two_moon(&TwoMoonConfig { n: 10, ..Default::default() }).unwrap();
        write_two_moon_csv(&path, &ds).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("x,y,golden,ant1,ant2"));
        assert_eq!(lines.count(), 10);
    }

    fn synthetic_idx(dir: &tempfile::TempDir, n_img: usize, n_lab: usize) -> (std::path::PathBuf, std::path::PathBuf) {
        let img: Vec<u8> = (0..n_img * 4 * 3).map(|i| (i * 37 % 256) as u8).collect();
        let lab: Vec<u8> = (0..n_lab).map(|i| (i % 10) as u8).collect();
        let ip = dir.path().join("img.idx");
        let lp = dir.path().join("lab.idx");
        write_idx_images(&ip, 4, 3, &img).unwrap();
        write_idx_labels(&lp, &lab).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = synthetic_idx(&dir, 5, 5);
        let ds = load_mnist_idx(&ip, &lp).unwrap();
        assert_eq!((ds.len(), ds.dim(), ds.classes), (5, 12, 10));
        for i in 0..5 {
            for j in 0..12 {
                let raw = ((i * 12 + j) * 37 % 256) as f64;
                assert_eq!(ds.features[[i, j]] * 255.0, raw);
            }
        }
        assert_eq!(ds.golden().unwrap(), &[0, 1, 2, 3, 4]);

        // Re-encode and compare bytes exactly.
        let bytes: Vec<u8> = ds.features.iter().map(|v| (v * 255.0).round() as u8).collect();
        let again = dir.path().join("again.idx");
        write_idx_images(&again, 4, 3, &bytes).unwrap();
        assert_eq!(std::fs::read(&ip).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn idx_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = synthetic_idx(&dir, 5, 4);
        assert!(matches!(load_mnist_idx(&ip, &lp), Err(Error::CountMismatch { images: 5, labels: 4 })));

        let (ip, lp) = synthetic_idx(&dir, 5, 5);
        match load_mnist_idx(&lp, &ip) {
            Err(Error::BadMagic { found, expected, .. }) => {
                assert_eq!(found, IDX_LABELS_MAGIC);
                assert_eq!(expected, IDX_IMAGES_MAGIC);
            }
            other => panic!("unexpected {other:?}"),
        }

        let mut bytes = std::fs::read(&ip).unwrap();
        bytes.truncate(bytes.len() - 1);
        std::fs::write(&ip, &bytes).unwrap();
        assert!(matches!(load_mnist_idx(&ip, &lp), Err(Error::Truncated { .. })));
        std::fs::write(&ip, [0u8, 0]).unwrap();
        assert!(matches!(load_mnist_idx(&ip, &lp), Err(Error::Truncated { .. })));
    }

    #[test]
    fn split_examples() {
        let ds = generate_two_moon(&TwoMoonConfig::default()).unwrap();
        let (tr, va, te) = split(&ds, (16_000, 0, 4_000), 1).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (16_000, 0, 4_000));
        assert_eq!(tr.split, SplitTag::Train);
        assert_eq!(tr.annotators.as_ref().unwrap().samples(), 16_000);
        assert!(split(&ds, (20_000, 1, 0), 1).is_err());
    }

    #[test]
    fn standardize_examples() {
        let mut train = Dataset::new(
            ndarray::array![[1.0, 5.0], [3.0, 5.0], [5.0, 5.0]],
            None,
            None,
            2,
            SplitTag::Train,
        )
        .unwrap();
        let mut test = Dataset::new(ndarray::array![[3.0, 6.0]], None, None, 2, SplitTag::Test).unwrap();
        let s = standardize(&mut train, &mut [&mut test]).unwrap();
        assert_eq!(s.std[1], STD_FLOOR);
        for i in 0..3 {
            assert_eq!(train.features[[i, 1]], 0.0);
        }
        let mean = train.features.mean_axis(Axis(0)).unwrap();
        assert!(mean.iter().all(|m| m.abs() < 1e-9));
        assert_eq!(test.features[[0, 0]], 0.0);

        // Refitting on already standardized data is the identity.
        let s2 = Standardizer::fit(&train.features).unwrap();
        let twice = s2.apply(&train.features).unwrap();
        for (a, b) in twice.iter().zip(train.features.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(Standardizer::fit(&Array2::zeros((0, 2))).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn split_is_a_partition(seed in any::<u64>(), a in 0usize..40, b in 0usize..40, c in 0usize..40) {
            let n = 120;
            let feats = Array2::from_shape_fn((n, 1), |(i, _)| i as f64);
            let ds = Dataset::new(feats, Some(vec![0; n]), None, 2, SplitTag::All).unwrap();
            let (tr, va, te) = split(&ds, (a, b, c), seed).unwrap();
            let mut seen: Vec<usize> = tr.features.iter().chain(va.features.iter()).chain(te.features.iter())
                .map(|&v| v as usize).collect();
            prop_assert_eq!(seen.len(), a + b + c);
            seen.sort_unstable();
            seen.dedup();
            prop_assert_eq!(seen.len(), a + b + c);
            let (tr2, _, _) = split(&ds, (a, b, c), seed).unwrap();
            prop_assert_eq!(tr.features, tr2.features);
        }
    }
}
