//! Prediction records and density heatmaps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use bat_core::data::Scene;
use bat_core::geometry::CartPoint;
use bat_core::model::{ManeuverClass, MultimodalPrediction};
use serde::Serialize;

use crate::{HarnessError, Result};

#[derive(Debug, Serialize)]
pub struct FrameRecord {
    pub origin_x: f64,
    pub origin_y: f64,
    pub heading: f64,
}

#[derive(Debug, Serialize)]
pub struct StepRecord {
    pub mu_rho: f64,
    pub mu_theta: f64,
    pub sigma_rho: f64,
    pub sigma_theta: f64,
    pub corr: f64,
}

#[derive(Debug, Serialize)]
pub struct ModeRecord {
    pub maneuver: String,
    pub probability: f64,
    pub steps: Vec<StepRecord>,
}

#[derive(Debug, Serialize)]
pub struct AttentionRecord {
    pub agent_id: u64,
    pub weight: f64,
}

#[derive(Debug, Serialize)]
pub struct PredictionRecord {
    pub ego_id: u64,
    pub ref_frame: i64,
    pub frame: FrameRecord,
    pub lateral_probs: [f64; 3],
    pub longitudinal_probs: [f64; 3],
    pub modes: Vec<ModeRecord>,
    pub attention: Vec<AttentionRecord>,
}

pub fn prediction_record(scene: &Scene, pred: &MultimodalPrediction) -> Result<PredictionRecord> {
    let modes = pred
        .modes
        .iter()
        .enumerate()
        .map(|(m, steps)| {
            Ok(ModeRecord {
                maneuver: ManeuverClass::from_index(m)?.name(),
                probability: pred.maneuver_probs[m],
                steps: steps
                    .iter()
                    .map(|g| StepRecord {
                        mu_rho: g.mu_rho,
                        mu_theta: g.mu_theta,
                        sigma_rho: g.sigma_rho,
                        sigma_theta: g.sigma_theta,
                        corr: g.corr,
                    })
                    .collect(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(PredictionRecord {
        ego_id: scene.ego_id,
        ref_frame: scene.ref_frame,
        frame: FrameRecord {
            origin_x: pred.frame.origin.x,
            origin_y: pred.frame.origin.y,
            heading: pred.frame.heading,
        },
        lateral_probs: pred.lateral_probs,
        longitudinal_probs: pred.longitudinal_probs,
        modes,
        attention: pred
            .attention
            .iter()
            .map(|&(agent_id, weight)| AttentionRecord { agent_id, weight })
            .collect(),
    })
}

pub fn prediction_json(scene: &Scene, pred: &MultimodalPrediction) -> Result<String> {
    serde_json::to_string_pretty(&prediction_record(scene, pred)?)
        .map_err(|e| HarnessError::Io(format!("serializing prediction: {e}")))
}

/// Regular grid over the ego frame (meters); `y` points along the heading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    /// `x_min,x_max,y_min,y_max,nx,ny`.
    pub fn parse(text: &str) -> Result<Self> {
        let f: Vec<&str> = text.split(',').map(str::trim).collect();
        let bad = || HarnessError::Config(format!("grid `{text}` is not x_min,x_max,y_min,y_max,nx,ny"));
        if f.len() != 6 {
            return Err(bad());
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        let int = |i: usize| f[i].parse::<usize>().map_err(|_| bad());
        let g = GridSpec {
            x_min: num(0)?,
            x_max: num(1)?,
            y_min: num(2)?,
            y_max: num(3)?,
            nx: int(4)?,
            ny: int(5)?,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.x_max, self.y_min, self.y_max].iter().all(|v| v.is_finite());
        if !finite || self.x_min >= self.x_max || self.y_min >= self.y_max || self.nx == 0 || self.ny == 0 {
            return Err(HarnessError::Config(format!("degenerate grid {self:?}")));
        }
        Ok(())
    }

    pub fn cell_width(&self) -> f64 {
        (self.x_max - self.x_min) / self.nx as f64
    }

    pub fn cell_height(&self) -> f64 {
        (self.y_max - self.y_min) / self.ny as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.cell_width() * self.cell_height()
    }

    /// Center of cell `(ix, iy)`; `iy = 0` is the bottom row.
    pub fn center(&self, ix: usize, iy: usize) -> CartPoint {
        CartPoint::new(
            self.x_min + (ix as f64 + 0.5) * self.cell_width(),
            self.y_min + (iy as f64 + 0.5) * self.cell_height(),
        )
    }
}

/// Mixture density per square meter on the grid cell centers for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub spec: GridSpec,
    pub step: usize,
    /// Row-major, `values[iy * nx + ix]`.
    pub values: Vec<f64>,
}

impl DensityGrid {
    pub fn evaluate(pred: &MultimodalPrediction, spec: GridSpec, step: usize) -> Result<Self> {
        spec.validate()?;
        let mut values = Vec::with_capacity(spec.nx * spec.ny);
        for iy in 0..spec.ny {
            for ix in 0..spec.nx {
                values.push(pred.cartesian_density(spec.center(ix, iy), step)?);
            }
        }
        Ok(Self { spec, step, values })
    }

    /// Sum of density times cell area.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.spec.cell_area()
    }

    pub fn peak(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        (best % self.spec.nx, best / self.spec.nx)
    }

    /// Binary graymap scaled to the peak; the top row is `y_max`.
    pub fn to_pgm(&self) -> Vec<u8> {
        let GridSpec { nx, ny, .. } = self.spec;
        let max = self.values.iter().cloned().fold(0.0, f64::max);
        let mut out = format!("P5\n{nx} {ny}\n255\n").into_bytes();
        for iy in (0..ny).rev() {
            for ix in 0..nx {
                let v = if max > 0.0 { self.values[iy * nx + ix] / max } else { 0.0 };
                out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        out
    }

    /// `step,ix,iy,x,y,density` rows, no header.
    pub fn csv_rows(&self, out: &mut String) {
        for iy in 0..self.spec.ny {
            for ix in 0..self.spec.nx {
                let c = self.spec.center(ix, iy);
                let _ = writeln!(
                    out,
                    "{},{ix},{iy},{},{},{:e}",
                    self.step,
                    c.x,
                    c.y,
                    self.values[iy * self.spec.nx + ix]
                );
            }
        }
    }
}

/// Writes `{prefix}_t{step}.pgm` per step and `{prefix}.csv`; returns the
/// written paths and each step's mass.
pub fn write_heatmaps(
    pred: &MultimodalPrediction,
    spec: GridSpec,
    steps: &[usize],
    prefix: &Path,
) -> Result<(Vec<PathBuf>, Vec<f64>)> {
    let mut csv = String::from("step,ix,iy,x,y,density\n");
    let mut paths = Vec::new();
    let mut masses = Vec::new();
    for &step in steps {
        let grid = DensityGrid::evaluate(pred, spec, step)?;
        let path = PathBuf::from(format!("{}_t{step}.pgm", prefix.display()));
        std::fs::write(&path, grid.to_pgm()).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        grid.csv_rows(&mut csv);
        masses.push(grid.mass());
        paths.push(path);
    }
    let csv_path = PathBuf::from(format!("{}.csv", prefix.display()));
    std::fs::write(&csv_path, csv).map_err(|e| HarnessError::Io(format!("{}: {e}", csv_path.display())))?;
    paths.push(csv_path);
    Ok((paths, masses))
}
