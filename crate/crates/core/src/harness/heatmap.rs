use std::path::Path;

use ndarray::Array2;

use crate::backbone::ModelParams;
use crate::error::{Error, Result};
use crate::fusion::FrozenHead;
use crate::linalg::PermutationBasis;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    /// Points per axis.
    pub resolution: usize,
}

/// Annotator indices are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapQuantity {
    /// Probability of class 1.
    Prediction,
    Weight(usize),
    /// Diagonal of the annotator's confusion matrix at the label its rule
    /// assigns to the grid point.
    ConfusionDiag(usize),
}

impl std::str::FromStr for HeatmapQuantity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let indexed = |prefix: &str| -> Option<usize> {
            s.strip_prefix(prefix)?.strip_suffix(']')?.parse().ok()
        };
        if s == "prediction" {
            Ok(HeatmapQuantity::Prediction)
        } else if let Some(r) = indexed("weight[") {
            Ok(HeatmapQuantity::Weight(r))
        } else if let Some(r) = indexed("confusion_diag[") {
            Ok(HeatmapQuantity::ConfusionDiag(r))
        } else {
            Err(Error::InvalidArgument(format!("unknown heatmap quantity {s:?}")))
        }
    }
}

/// A trained model together with how its auxiliary heads are interpreted.
#[derive(Debug, Clone, Copy)]
pub struct HeatmapModel<'a> {
    pub params: &'a ModelParams,
    pub basis: Option<&'a PermutationBasis>,
    pub frozen: FrozenHead,
}

/// Evaluates `quantity` over the grid; rows are `[x, y, value]`, x varying fastest.
/// `rule(r, x, y)` gives annotator `r`'s (0-based) label at a point.
pub fn export_heatmap_grid(
    model: HeatmapModel<'_>,
    grid: GridSpec,
    quantity: HeatmapQuantity,
    rule: &dyn Fn(usize, f64, f64) -> usize,
) -> Result<Vec<[f64; 3]>> {
    let dims = &model.params.dims;
    if dims.input_dim != 2 {
        return Err(Error::dim(format!("heatmaps need a 2-D input model, got {}", dims.input_dim)));
    }
    if grid.resolution < 2 {
        return Err(Error::InvalidArgument("grid resolution must be >= 2".into()));
    }
    let annotator = match quantity {
        HeatmapQuantity::Prediction => None,
        HeatmapQuantity::Weight(r) | HeatmapQuantity::ConfusionDiag(r) => {
            if r == 0 || r > dims.annotators {
                return Err(Error::InvalidArgument(format!(
                    "annotator {r} out of range 1..={}",
                    dims.annotators
                )));
            }
            Some(r - 1)
        }
    };
    if matches!(quantity, HeatmapQuantity::ConfusionDiag(_))
        && model.frozen != FrozenHead::Confusions
        && model.basis.is_none()
    {
        return Err(Error::InvalidArgument("confusion_diag needs the permutation basis".into()));
    }

    let res = grid.resolution;
    let step = |(lo, hi): (f64, f64), i: usize| lo + (hi - lo) * i as f64 / (res - 1) as f64;
    let mut points = Array2::zeros((res * res, 2));
    for iy in 0..res {
        for ix in 0..res {
            points[[iy * res + ix, 0]] = step(grid.x_range, ix);
            points[[iy * res + ix, 1]] = step(grid.y_range, iy);
        }
    }
    let out = model.params.forward_batch(points.view())?;
    let m = dims.basis_size;
    let mut rows = Vec::with_capacity(res * res);
    for i in 0..res * res {
        let (x, y) = (points[[i, 0]], points[[i, 1]]);
        let value = match (quantity, annotator) {
            (HeatmapQuantity::Prediction, _) => out.class_probs[[i, 1.min(dims.classes - 1)]],
            (HeatmapQuantity::Weight(_), Some(r)) => match model.frozen {
                FrozenHead::Weights => 1.0 / dims.annotators as f64,
                _ => out.weights[[i, r]],
            },
            (HeatmapQuantity::ConfusionDiag(_), Some(r)) => match (model.frozen, model.basis) {
                (FrozenHead::Confusions, _) => 1.0,
                (_, Some(basis)) => {
                    let label = rule(r, x, y);
                    (0..m)
                        .filter(|&mm| basis.fixes(mm, label))
                        .map(|mm| out.coeffs[[i, r * m + mm]])
                        .sum()
                }
                (_, None) => unreachable!("checked above"),
            },
            _ => unreachable!("annotator resolved above"),
        };
        rows.push([x, y, value]);
    }
    Ok(rows)
}

pub fn write_heatmap_csv(path: &Path, rows: &[[f64; 3]]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x", "y", "value"])?;
    for r in rows {
        w.write_record(r.iter().map(f64::to_string))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_params, ModelDims};
    use crate::linalg::random_permutation_basis;

    fn model_parts() -> (ModelParams, PermutationBasis) {
        let dims = ModelDims {
            input_dim: 2,
            hidden: vec![8],
            classes: 2,
            annotators: 2,
            basis_size: 2,
        };
        (init_params(&dims, 4, true).unwrap(), random_permutation_basis(2, 2, 0, true).unwrap())
    }

    const GRID: GridSpec = GridSpec {
        x_range: (-2.0, 2.0),
        y_range: (-1.5, 1.5),
        resolution: 11,
    };

    fn rule(r: usize, x: f64, y: f64) -> usize {
        usize::from(if r == 0 { x < 0.0 } else { y > 0.0 })
    }

    #[test]
    fn weights_are_simplex_coordinates() {
        let (p, b) = model_parts();
        let model = HeatmapModel { params: &p, basis: Some(&b), frozen: FrozenHead::None };
        let w1 = export_heatmap_grid(model, GRID, HeatmapQuantity::Weight(1), &rule).unwrap();
        let w2 = export_heatmap_grid(model, GRID, HeatmapQuantity::Weight(2), &rule).unwrap();
        assert_eq!(w1.len(), 121);
        for (a, b) in w1.iter().zip(&w2) {
            assert!((0.0..=1.0).contains(&a[2]));
            assert!((a[2] + b[2] - 1.0).abs() < 1e-12);
            assert_eq!((a[0], a[1]), (b[0], b[1]));
        }
        assert_eq!(w1[0][..2], [-2.0, -1.5]);
        assert_eq!(w1[120][..2], [2.0, 1.5]);
    }

    #[test]
    fn confusion_diag_for_k2_is_identity_coefficient() {
        // For K=2 with identity first, the swap fixes nothing, so the diagonal
        // is the identity coefficient whatever the label.
        let (p, b) = model_parts();
        let model = HeatmapModel { params: &p, basis: Some(&b), frozen: FrozenHead::None };
        let rows = export_heatmap_grid(model, GRID, HeatmapQuantity::ConfusionDiag(2), &rule).unwrap();
        let out = p.forward_batch(ndarray::array![[rows[7][0], rows[7][1]]].view()).unwrap();
        assert!((rows[7][2] - out.coeffs[[0, 2]]).abs() < 1e-12);
    }

    #[test]
    fn frozen_modes_report_fixed_values() {
        let (p, b) = model_parts();
        let wo = HeatmapModel { params: &p, basis: Some(&b), frozen: FrozenHead::Confusions };
        let rows = export_heatmap_grid(wo, GRID, HeatmapQuantity::ConfusionDiag(1), &rule).unwrap();
        assert!(rows.iter().all(|r| r[2] == 1.0));
        let co = HeatmapModel { params: &p, basis: Some(&b), frozen: FrozenHead::Weights };
        let rows = export_heatmap_grid(co, GRID, HeatmapQuantity::Weight(1), &rule).unwrap();
        assert!(rows.iter().all(|r| r[2] == 0.5));
    }

    #[test]
    fn errors_and_parsing() {
        let (p, b) = model_parts();
        let model = HeatmapModel { params: &p, basis: Some(&b), frozen: FrozenHead::None };
        assert!(export_heatmap_grid(model, GRID, HeatmapQuantity::Weight(3), &rule).is_err());
        assert!(export_heatmap_grid(model, GRID, HeatmapQuantity::Weight(0), &rule).is_err());
        let no_basis = HeatmapModel { basis: None, ..model };
        assert!(export_heatmap_grid(no_basis, GRID, HeatmapQuantity::ConfusionDiag(1), &rule).is_err());
        let wide = init_params(
            &ModelDims { input_dim: 3, hidden: vec![], classes: 2, annotators: 1, basis_size: 1 },
            0,
            true,
        )
        .unwrap();
        let m3 = HeatmapModel { params: &wide, basis: None, frozen: FrozenHead::None };
        assert!(export_heatmap_grid(m3, GRID, HeatmapQuantity::Prediction, &rule).is_err());

        assert_eq!("prediction".parse::<HeatmapQuantity>().unwrap(), HeatmapQuantity::Prediction);
        assert_eq!("weight[2]".parse::<HeatmapQuantity>().unwrap(), HeatmapQuantity::Weight(2));
        assert_eq!(
            "confusion_diag[1]".parse::<HeatmapQuantity>().unwrap(),
            HeatmapQuantity::ConfusionDiag(1)
        );
        assert!("weight[x]".parse::<HeatmapQuantity>().is_err());
    }

    #[test]
    fn csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.csv");
        write_heatmap_csv(&path, &[[0.0, 1.0, 0.25]]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "x,y,value\n0,1,0.25\n");
    }
}
