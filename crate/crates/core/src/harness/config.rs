use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::baselines::{DEFAULT_EM_ROUNDS, DEFAULT_EM_SMOOTHING, DEFAULT_TRACE_LAMBDA};
use crate::error::{Error, Result};
use crate::fusion::{FrozenHead, KlDirection};
use crate::linalg::factorial;

pub const OUTPUT_DIR_ENV: &str = "LABELFUSE_OUTPUT_DIR";
pub const THREADS_ENV: &str = "LABELFUSE_THREADS";
pub const MNIST_DIR_ENV: &str = "MNIST_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    #[serde(rename = "twomoon")]
    TwoMoon {
        #[serde(default = "default_moon_n")]
        n: usize,
        #[serde(default = "default_noise")]
        noise_sigma: f64,
        #[serde(default = "default_true")]
        center: bool,
        #[serde(default = "default_upper")]
        upper_label: usize,
        #[serde(default)]
        y_threshold: f64,
        /// Held-out fraction for the test split.
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
        /// Golden-labelled validation rows carved from the training part.
        #[serde(default)]
        val_size: usize,
    },
    Mnist {
        /// Directory holding the four standard IDX files. Falls back to
        /// `$MNIST_DIR`, then `data/mnist`.
        #[serde(default)]
        dir: Option<PathBuf>,
        #[serde(default = "default_mnist_train")]
        train_size: usize,
        #[serde(default = "default_mnist_val")]
        val_size: usize,
        /// Rows of the official test file to use; all of them when absent.
        #[serde(default)]
        test_size: Option<usize>,
    },
}

fn default_moon_n() -> usize {
    20_000
}
fn default_noise() -> f64 {
    0.1
}
fn default_true() -> bool {
    true
}
fn default_upper() -> usize {
    1
}
fn default_test_fraction() -> f64 {
    0.2
}
fn default_mnist_train() -> usize {
    10_000
}
fn default_mnist_val() -> usize {
    5_000
}

impl DatasetSpec {
    pub fn classes(&self) -> usize {
        match self {
            DatasetSpec::TwoMoon { .. } => 2,
            DatasetSpec::Mnist { .. } => 10,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            DatasetSpec::TwoMoon { .. } => 2,
            DatasetSpec::Mnist { .. } => 784,
        }
    }

    pub fn default_hidden(&self) -> Vec<usize> {
        match self {
            DatasetSpec::TwoMoon { .. } => vec![32, 32],
            DatasetSpec::Mnist { .. } => vec![256, 128],
        }
    }

    pub fn mnist_dir(dir: Option<&Path>) -> PathBuf {
        dir.map(Path::to_path_buf)
            .or_else(|| std::env::var_os(MNIST_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data/mnist"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SynthesisSpec {
    /// The two rule-based TwoMoon annotators.
    Geometric,
    Euclidean {
        epsilon: f64,
        /// Measure distances on standardized training features.
        #[serde(default = "default_true")]
        standardize: bool,
    },
    HammerSpammer {
        n_correct: usize,
    },
    External {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Ours,
    Mjv,
    Wdn,
    TraceReg,
    Mbem,
    /// One annotator's labels, 1-based.
    Single(usize),
    Golden,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Ours => f.write_str("ours"),
            Method::Mjv => f.write_str("mjv"),
            Method::Wdn => f.write_str("wdn"),
            Method::TraceReg => f.write_str("tracereg"),
            Method::Mbem => f.write_str("mbem"),
            Method::Single(r) => write!(f, "single:{r}"),
            Method::Golden => f.write_str("golden"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "ours" => Method::Ours,
            "mjv" => Method::Mjv,
            "wdn" => Method::Wdn,
            "tracereg" => Method::TraceReg,
            "mbem" => Method::Mbem,
            "golden" => Method::Golden,
            other => match other.strip_prefix("single:").map(str::parse::<usize>) {
                Some(Ok(r)) if r >= 1 => Method::Single(r),
                _ => {
                    return Err(Error::Config(format!(
                        "unknown method {other:?}; expected ours, mjv, wdn, tracereg, mbem, single:<r>, golden"
                    )))
                }
            },
        })
    }
}

impl Serialize for Method {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Full,
    /// Confusion matrices fixed at identity.
    WeightsOnly,
    /// Annotator weights fixed at uniform.
    ConfusionOnly,
}

impl Mode {
    pub fn frozen(self) -> FrozenHead {
        match self {
            Mode::Full => FrozenHead::None,
            Mode::WeightsOnly => FrozenHead::Confusions,
            Mode::ConfusionOnly => FrozenHead::Weights,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    #[serde(default)]
    pub data: u64,
    #[serde(default)]
    pub model: u64,
    #[serde(default)]
    pub synthesis: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub synthesis: SynthesisSpec,
    pub method: Method,
    #[serde(default)]
    pub mode: Mode,
    /// R. The geometric TwoMoon annotators are always two.
    #[serde(default = "default_annotators")]
    pub annotators: usize,
    /// M, the permutation basis size.
    #[serde(default = "default_basis")]
    pub basis_size: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_true")]
    pub include_identity: bool,
    #[serde(default)]
    pub kl_direction: KlDirection,
    /// Trunk widths; dataset default when absent.
    #[serde(default)]
    pub hidden: Option<Vec<usize>>,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_em_rounds")]
    pub em_rounds: usize,
    #[serde(default = "default_em_smoothing")]
    pub em_smoothing: f64,
    #[serde(default = "default_trace_lambda")]
    pub trace_lambda: f64,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_annotators() -> usize {
    3
}
fn default_basis() -> usize {
    20
}
fn default_lambda() -> f64 {
    1.0
}
fn default_lr() -> f64 {
    0.01
}
fn default_momentum() -> f64 {
    0.9
}
fn default_batch() -> usize {
    64
}
fn default_epochs() -> usize {
    20
}
fn default_em_rounds() -> usize {
    DEFAULT_EM_ROUNDS
}
fn default_em_smoothing() -> f64 {
    DEFAULT_EM_SMOOTHING
}
fn default_trace_lambda() -> f64 {
    DEFAULT_TRACE_LAMBDA
}

impl ExperimentConfig {
    /// Defaults for everything but the three required choices.
    pub fn new(dataset: DatasetSpec, synthesis: SynthesisSpec, method: Method) -> Self {
        ExperimentConfig {
            dataset,
            synthesis,
            method,
            mode: Mode::Full,
            annotators: default_annotators(),
            basis_size: default_basis(),
            lambda: default_lambda(),
            include_identity: true,
            kl_direction: KlDirection::default(),
            hidden: None,
            learning_rate: default_lr(),
            momentum: default_momentum(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            em_rounds: default_em_rounds(),
            em_smoothing: default_em_smoothing(),
            trace_lambda: default_trace_lambda(),
            seeds: Seeds::default(),
            output_dir: None,
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    /// Applies `LABELFUSE_OUTPUT_DIR` when set.
    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
            self.output_dir = Some(PathBuf::from(dir));
        }
    }

    pub fn hidden(&self) -> Vec<usize> {
        self.hidden.clone().unwrap_or_else(|| self.dataset.default_hidden())
    }

    /// Number of annotators after resolving the synthesis rule.
    pub fn effective_annotators(&self) -> usize {
        match self.synthesis {
            SynthesisSpec::Geometric => 2,
            _ => self.annotators,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let k = self.dataset.classes();
        let r = self.effective_annotators();
        if self.mode != Mode::Full && self.method != Method::Ours {
            return bad(format!("mode {:?} only applies to method ours", self.mode));
        }
        if self.mode == Mode::WeightsOnly && !self.include_identity {
            return bad("weights_only mode requires include_identity".into());
        }
        if r == 0 {
            return bad("need at least one annotator".into());
        }
        if let Method::Single(i) = self.method {
            if i > r {
                return bad(format!("single:{i} but only {r} annotators"));
            }
        }
        if self.basis_size == 0 {
            return bad("basis_size M must be >= 1".into());
        }
        if factorial(k).is_some_and(|f| (self.basis_size as u128) > f) {
            return bad(format!("basis_size M={} exceeds K!={}", self.basis_size, factorial(k).unwrap_or(0)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if self.hidden.as_ref().is_some_and(|h| h.contains(&0)) {
            return bad("hidden widths must be positive".into());
        }
        if self.method == Method::Mbem && (self.em_rounds == 0 || self.em_rounds > self.epochs) {
            return bad(format!("mbem needs 1 <= em_rounds <= epochs, got {}", self.em_rounds));
        }
        if !(self.em_smoothing > 0.0) {
            return bad("em_smoothing must be > 0".into());
        }
        if !(self.trace_lambda >= 0.0) {
            return bad("trace_lambda must be >= 0".into());
        }
        match &self.dataset {
            DatasetSpec::TwoMoon { n, noise_sigma, upper_label, test_fraction, val_size, .. } => {
                if *n == 0 || n % 2 != 0 {
                    return bad(format!("twomoon n must be positive and even, got {n}"));
                }
                if !(*noise_sigma >= 0.0) {
                    return bad("noise_sigma must be >= 0".into());
                }
                if *upper_label > 1 {
                    return bad("upper_label must be 0 or 1".into());
                }
                if !(0.0..1.0).contains(test_fraction) {
                    return bad("test_fraction must be in [0, 1)".into());
                }
                let test = (*n as f64 * test_fraction).round() as usize;
                if val_size + test >= *n {
                    return bad("validation and test splits leave no training data".into());
                }
            }
            DatasetSpec::Mnist { train_size, test_size, .. } => {
                if *train_size == 0 || test_size == &Some(0) {
                    return bad("mnist train_size and test_size must be positive".into());
                }
            }
        }
        match &self.synthesis {
            SynthesisSpec::Geometric => {
                if !matches!(self.dataset, DatasetSpec::TwoMoon { .. }) {
                    return bad("geometric annotators exist only for twomoon".into());
                }
            }
            SynthesisSpec::Euclidean { epsilon, .. } => {
                if !(*epsilon >= 0.0) {
                    return bad(format!("epsilon must be >= 0, got {epsilon}"));
                }
            }
            SynthesisSpec::HammerSpammer { n_correct } => {
                if *n_correct > k {
                    return bad(format!("n_correct={n_correct} exceeds K={k}"));
                }
            }
            SynthesisSpec::External { .. } => {}
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moon() -> DatasetSpec {
        serde_json::from_str(r#"{"kind": "twomoon"}"#).unwrap()
    }

    #[test]
    fn method_round_trip() {
        for s in ["ours", "mjv", "wdn", "tracereg", "mbem", "single:2", "golden"] {
            let m: Method = s.parse().unwrap();
            assert_eq!(m.to_string(), s);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{s}\""));
        }
        for s in ["single:0", "single:x", "bogus"] {
            assert!(s.parse::<Method>().is_err());
        }
    }

    #[test]
    fn minimal_json_gets_defaults() {
        let cfg = ExperimentConfig::from_json_str(
            r#"{"dataset": {"kind": "twomoon"}, "synthesis": {"kind": "geometric"}, "method": "ours", "basis_size": 2}"#,
        )
        .unwrap();
        assert_eq!(cfg.dataset, moon());
        assert_eq!(cfg.lambda, 1.0);
        assert_eq!(cfg.hidden(), vec![32, 32]);
        assert_eq!(cfg.effective_annotators(), 2);
        assert_eq!(cfg.mode, Mode::Full);
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json_str(&text).unwrap(), cfg);
    }

    #[test]
    fn validation_errors() {
        let base = ExperimentConfig {
            basis_size: 2,
            ..ExperimentConfig::new(moon(), SynthesisSpec::Geometric, Method::Ours)
        };
        assert!(base.validate().is_ok());
        let cases: Vec<Box<dyn Fn(&mut ExperimentConfig)>> = vec![
            Box::new(|c| c.basis_size = 3),
            Box::new(|c| c.basis_size = 0),
            Box::new(|c| c.lambda = -1.0),
            Box::new(|c| {
                c.method = Method::Mjv;
                c.mode = Mode::WeightsOnly
            }),
            Box::new(|c| {
                c.mode = Mode::WeightsOnly;
                c.include_identity = false
            }),
            Box::new(|c| c.method = Method::Single(3)),
            Box::new(|c| c.learning_rate = 0.0),
            Box::new(|c| c.momentum = 1.0),
            Box::new(|c| c.epochs = 0),
            Box::new(|c| c.synthesis = SynthesisSpec::HammerSpammer { n_correct: 3 }),
            Box::new(|c| c.synthesis = SynthesisSpec::Euclidean { epsilon: -1.0, standardize: true }),
            Box::new(|c| {
                c.method = Method::Mbem;
                c.em_rounds = 50
            }),
            Box::new(|c| {
                c.dataset = DatasetSpec::Mnist { dir: None, train_size: 10, val_size: 0, test_size: None };
            }),
        ];
        for (i, mutate) in cases.iter().enumerate() {
            let mut c = base.clone();
            mutate(&mut c);
            assert!(matches!(c.validate(), Err(Error::Config(_))), "case {i} should fail");
        }
    }

    #[test]
    fn unknown_fields_rejected() {
        let text = r#"{"dataset": {"kind": "twomoon"}, "synthesis": {"kind": "geometric"}, "method": "ours", "lamda": 2}"#;
        assert!(matches!(ExperimentConfig::from_json_str(text), Err(Error::Config(_))));
    }
}
