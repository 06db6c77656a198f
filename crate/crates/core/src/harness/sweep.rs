use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::error::{Error, Result};

use super::config::{ExperimentConfig, Method, SynthesisSpec, THREADS_ENV};
use super::{run_experiment, ExperimentReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Epsilon,
    Lambda,
    BasisSize,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Epsilon => "epsilon",
            SweepAxis::Lambda => "lambda",
            SweepAxis::BasisSize => "M",
        }
    }

    /// `base` with the axis set to `value`.
    pub fn apply(self, base: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        match self {
            SweepAxis::Epsilon => match &mut cfg.synthesis {
                SynthesisSpec::Euclidean { epsilon, .. } => *epsilon = value,
                _ => return Err(Error::Config("an epsilon sweep needs euclidean synthesis".into())),
            },
            SweepAxis::Lambda => cfg.lambda = value,
            SweepAxis::BasisSize => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::Config(format!("M must be a positive integer, got {value}")));
                }
                cfg.basis_size = value as usize;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epsilon" => Ok(SweepAxis::Epsilon),
            "lambda" => Ok(SweepAxis::Lambda),
            "M" | "m" | "basis_size" => Ok(SweepAxis::BasisSize),
            other => Err(Error::Config(format!("unknown sweep axis {other:?}; expected epsilon, lambda or M"))),
        }
    }
}

#[derive(Debug)]
pub struct SweepCell {
    pub value: f64,
    pub method: Method,
    pub result: Result<ExperimentReport>,
}

#[derive(Debug)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub methods: Vec<Method>,
    /// Row-major: value, then method.
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    pub fn cell(&self, value_index: usize, method_index: usize) -> &SweepCell {
        &self.cells[value_index * self.methods.len() + method_index]
    }

    /// One row per value, one test-accuracy column per method; failed cells
    /// read `error:<kind>`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec![self.axis.name().to_string()];
        header.extend(self.methods.iter().map(Method::to_string));
        w.write_record(&header)?;
        for (vi, v) in self.values.iter().enumerate() {
            let mut row = vec![v.to_string()];
            for mi in 0..self.methods.len() {
                row.push(match &self.cell(vi, mi).result {
                    Ok(r) => format!("{:.4}", r.test_accuracy),
                    Err(e) => format!("error:{}", e.kind()),
                });
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Worker threads: `LABELFUSE_THREADS` when set, else the available parallelism.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// One run per `(value, method)` pair with the base seeds. Cells run on a
/// thread pool; each writes to its own subdirectory of the base output
/// directory. A failing cell is recorded and the sweep continues.
pub fn run_sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    methods: &[Method],
    threads: usize,
) -> Result<SweepTable> {
    if values.is_empty() || methods.is_empty() {
        return Err(Error::Config("a sweep needs at least one value and one method".into()));
    }
    let jobs: Vec<(f64, Method)> = values
        .iter()
        .flat_map(|&v| methods.iter().map(move |&m| (v, m)))
        .collect();
    let results: Vec<Mutex<Option<Result<ExperimentReport>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);

    let run_one = |(value, method): (f64, Method)| -> Result<ExperimentReport> {
        let mut cfg = axis.apply(base, value)?;
        cfg.method = method;
        if method != Method::Ours {
            cfg.mode = Default::default();
        }
        cfg.output_dir = base
            .output_dir
            .as_ref()
            .map(|d| d.join(format!("{}={value}", axis.name())).join(method.to_string().replace(':', "-")));
        cfg.validate()?;
        Ok(run_experiment(&cfg)?.report)
    };

    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, jobs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let r = run_one(jobs[i]);
                *results[i].lock().expect("result slot") = Some(r);
            });
        }
    });

    let cells = jobs
        .into_iter()
        .zip(results)
        .map(|((value, method), slot)| SweepCell {
            value,
            method,
            result: slot.into_inner().expect("result slot").expect("every job ran"),
        })
        .collect();
    let table = SweepTable {
        axis,
        values: values.to_vec(),
        methods: methods.to_vec(),
        cells,
    };
    if let Some(dir) = &base.output_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        table.write_csv(&dir.join(format!("sweep_{}.csv", axis.name())))?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::DatasetSpec;

    fn base() -> ExperimentConfig {
        ExperimentConfig {
            epochs: 2,
            annotators: 2,
            basis_size: 2,
            ..ExperimentConfig::new(
                DatasetSpec::TwoMoon {
                    n: 400,
                    noise_sigma: 0.1,
                    center: true,
                    upper_label: 1,
                    y_threshold: 0.0,
                    test_fraction: 0.2,
                    val_size: 40,
                },
                SynthesisSpec::Euclidean { epsilon: 0.5, standardize: true },
                Method::Ours,
            )
        }
    }

    #[test]
    fn axis_parsing_and_application() {
        assert_eq!("M".parse::<SweepAxis>().unwrap(), SweepAxis::BasisSize);
        assert!("mu".parse::<SweepAxis>().is_err());
        let b = base();
        assert_eq!(SweepAxis::Lambda.apply(&b, 2.0).unwrap().lambda, 2.0);
        assert!(SweepAxis::BasisSize.apply(&b, 1.5).is_err());
        let moon = ExperimentConfig { synthesis: SynthesisSpec::Geometric, ..b };
        assert!(SweepAxis::Epsilon.apply(&moon, 1.0).is_err());
    }

    #[test]
    fn infeasible_cells_are_recorded_and_the_sweep_continues() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig { output_dir: Some(dir.path().to_path_buf()), ..base() };
        // K=2 admits at most M=2.
        let t = run_sweep(&cfg, SweepAxis::BasisSize, &[1.0, 2.0, 3.0], &[Method::Ours, Method::Mjv], 2).unwrap();
        assert_eq!(t.cells.len(), 6);
        assert!(t.cell(0, 0).result.is_ok() && t.cell(1, 1).result.is_ok());
        assert!(matches!(t.cell(2, 0).result, Err(Error::Config(_))));
        let text = std::fs::read_to_string(dir.path().join("sweep_M.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "M,ours,mjv");
        assert!(lines[3].starts_with("3,error:config,error:config"));
        assert!(dir.path().join("M=1/ours/report.json").exists());
    }

    #[test]
    fn threaded_and_serial_sweeps_agree() {
        let values = [0.0, 1.0];
        let methods = [Method::Ours, Method::Single(1)];
        let a = run_sweep(&base(), SweepAxis::Epsilon, &values, &methods, 1).unwrap();
        let b = run_sweep(&base(), SweepAxis::Epsilon, &values, &methods, 3).unwrap();
        for (x, y) in a.cells.iter().zip(&b.cells) {
            let (x, y) = (x.result.as_ref().unwrap(), y.result.as_ref().unwrap());
            assert_eq!(x.without_timing(), y.without_timing());
        }
        // Corruption grows with epsilon.
        let r0 = &a.cell(0, 0).result.as_ref().unwrap().corruption_rates;
        let r1 = &a.cell(1, 0).result.as_ref().unwrap().corruption_rates;
        assert!(r0.iter().all(|&v| v == 0.0));
        assert!(r0.iter().zip(r1).all(|(a, b)| a <= b));
    }
}
