//! RMSE tables per horizon and maneuver split, with a constant-velocity
//! baseline.

use std::fmt::Write as _;

use bat_core::data::{Scene, SplitTag};
use bat_core::geometry::CartPoint;
use bat_core::model::{BatConfig, BatModel, MultimodalPrediction};
use bat_core::nn::ParamStore;

use crate::{HarnessError, Result};

const PREDICT_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Predictor {
    /// Mean of the most probable maneuver's component.
    BestMode,
    /// Probability-weighted mean over all maneuvers.
    Weighted,
    ConstantVelocity,
}

impl Predictor {
    pub const ALL: [Predictor; 3] = [Predictor::BestMode, Predictor::Weighted, Predictor::ConstantVelocity];

    pub fn name(self) -> &'static str {
        match self {
            Predictor::BestMode => "bat_best",
            Predictor::Weighted => "bat_weighted",
            Predictor::ConstantVelocity => "cv",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub split: String,
    pub predictor: String,
    pub n: usize,
    /// One entry per horizon; NaN for an empty split.
    pub rmse: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalTable {
    /// Seconds.
    pub horizons: Vec<f64>,
    pub rows: Vec<EvalRow>,
}

impl EvalTable {
    pub fn get(&self, split: &str, predictor: Predictor) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.split == split && r.predictor == predictor.name())
    }

    /// `split,predictor,n,rmse_1s,...` with a fixed column order.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("split,predictor,n");
        for h in &self.horizons {
            let _ = write!(s, ",rmse_{h}s");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{},{},{}", r.split, r.predictor, r.n);
            for v in &r.rmse {
                let _ = write!(s, ",{v:.6}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |m: &str| HarnessError::Eval(format!("malformed eval table: {m}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty"))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 3 || cols[..3] != ["split", "predictor", "n"] {
            return Err(bad("header"));
        }
        let horizons = cols[3..]
            .iter()
            .map(|c| {
                c.strip_prefix("rmse_")
                    .and_then(|c| c.strip_suffix('s'))
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| bad(c))
            })
            .collect::<Result<Vec<f64>>>()?;
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != cols.len() {
                return Err(bad(line));
            }
            rows.push(EvalRow {
                split: f[0].to_string(),
                predictor: f[1].to_string(),
                n: f[2].parse().map_err(|_| bad(line))?,
                rmse: f[3..].iter().map(|v| v.parse().map_err(|_| bad(line))).collect::<Result<_>>()?,
            });
        }
        Ok(EvalTable { horizons, rows })
    }
}

/// Whole seconds from 1 up to the prediction horizon.
pub fn default_horizons(cfg: &BatConfig) -> Vec<f64> {
    (1..=(cfg.t_f + 1e-9).floor() as usize).map(|k| k as f64).collect()
}

/// Future-step index of each horizon.
pub fn horizon_steps(cfg: &BatConfig, horizons: &[f64]) -> Result<Vec<usize>> {
    horizons
        .iter()
        .map(|&h| {
            let k = (h / cfg.dt).round() as usize;
            if !(h > 0.0) || k == 0 || k > cfg.future_steps() {
                Err(HarnessError::Eval(format!("horizon {h} s is outside (0, t_f={}]", cfg.t_f)))
            } else {
                Ok(k - 1)
            }
        })
        .collect()
}

/// Extrapolates the last observed velocity for `steps` frames.
pub fn constant_velocity(history: &[CartPoint], steps: usize) -> Vec<CartPoint> {
    let n = history.len();
    let last = history[n - 1];
    let (vx, vy) = if n >= 2 {
        (last.x - history[n - 2].x, last.y - history[n - 2].y)
    } else {
        (0.0, 0.0)
    };
    (1..=steps).map(|k| last.translated(vx * k as f64, vy * k as f64)).collect()
}

/// Squared errors per scene and horizon for each predictor.
pub struct SquaredErrors {
    /// `[predictor][scene][horizon]`, predictors in [`Predictor::ALL`] order.
    pub values: Vec<Vec<Vec<f64>>>,
}

pub fn predict_all(model: &BatModel, params: &ParamStore, scenes: &[Scene]) -> Result<Vec<MultimodalPrediction>> {
    let mut out = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(PREDICT_CHUNK) {
        out.extend(model.predict_batch(params, chunk)?);
    }
    Ok(out)
}

pub fn squared_errors(
    model: &BatModel,
    params: &ParamStore,
    scenes: &[Scene],
    horizons: &[f64],
) -> Result<SquaredErrors> {
    let steps = horizon_steps(&model.config, horizons)?;
    let f = model.config.future_steps();
    if let Some(s) = scenes.iter().find(|s| s.ego_future.len() != f) {
        return Err(HarnessError::Eval(format!(
            "scene of ego {} at frame {} has {} future frames, expected {f}",
            s.ego_id,
            s.ref_frame,
            s.ego_future.len()
        )));
    }
    let preds = predict_all(model, params, scenes)?;
    let mut values = vec![Vec::with_capacity(scenes.len()); 3];
    for (scene, pred) in scenes.iter().zip(&preds) {
        let best = pred.best_mode();
        let cv = constant_velocity(&scene.ego_history, f);
        let sq = |p: CartPoint, t: usize| {
            let d = p.distance(scene.ego_future[t]);
            d * d
        };
        values[0].push(steps.iter().map(|&t| sq(pred.frame.to_world(pred.mode_mean_local(best, t)), t)).collect());
        values[1].push(steps.iter().map(|&t| sq(pred.frame.to_world(pred.weighted_mean_local(t)), t)).collect());
        values[2].push(steps.iter().map(|&t| sq(cv[t], t)).collect());
    }
    Ok(SquaredErrors { values })
}

fn rmse_rows(split: &str, errors: &SquaredErrors, members: &[usize], horizons: usize) -> Vec<EvalRow> {
    Predictor::ALL
        .iter()
        .enumerate()
        .map(|(p, predictor)| {
            let rmse = (0..horizons)
                .map(|h| {
                    if members.is_empty() {
                        f64::NAN
                    } else {
                        let sum: f64 = members.iter().map(|&i| errors.values[p][i][h]).sum();
                        (sum / members.len() as f64).sqrt()
                    }
                })
                .collect();
            EvalRow {
                split: split.to_string(),
                predictor: predictor.name().to_string(),
                n: members.len(),
                rmse,
            }
        })
        .collect()
}

/// RMSE table over `scenes`; with `by_tag`, one block of rows per split tag
/// follows the `all` block, always in keep/merge/left/right order.
pub fn evaluate(
    model: &BatModel,
    params: &ParamStore,
    scenes: &[Scene],
    horizons: &[f64],
    by_tag: bool,
) -> Result<EvalTable> {
    if scenes.is_empty() {
        return Err(HarnessError::Eval("no scenes to evaluate".into()));
    }
    let errors = squared_errors(model, params, scenes, horizons)?;
    let all: Vec<usize> = (0..scenes.len()).collect();
    let mut rows = rmse_rows("all", &errors, &all, horizons.len());
    if by_tag {
        for tag in SplitTag::ALL {
            let members: Vec<usize> = all.iter().copied().filter(|&i| scenes[i].split_tag == tag).collect();
            rows.extend(rmse_rows(tag.name(), &errors, &members, horizons.len()));
        }
    }
    Ok(EvalTable {
        horizons: horizons.to_vec(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use bat_core::data::{synth_generate, SynthKind, SynthSpec};

    fn small_model() -> BatModel {
        BatModel::new(BatConfig {
            decoder_hidden: 8,
            encoding_dim: 8,
            position_hidden: 8,
            interaction_hidden: 8,
            ..BatConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn cv_is_exact_on_constant_velocity_synth() {
        let model = small_model();
        let params = model.init_params();
        let scenes = synth_generate(&SynthSpec {
            kind: SynthKind::ConstantVelocity,
            n_scenes: 20,
            ..SynthSpec::default()
        })
        .unwrap();
        let t = evaluate(&model, &params, &scenes, &default_horizons(&model.config), true).unwrap();
        let cv = t.get("all", Predictor::ConstantVelocity).unwrap();
        assert_eq!(cv.n, 20);
        assert!(cv.rmse.iter().all(|&v| v < 1e-9), "{:?}", cv.rmse);
        assert!(t.get("left", Predictor::BestMode).unwrap().rmse[0].is_nan());
        assert!(t.get("all", Predictor::BestMode).unwrap().rmse.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn table_shape_and_round_trip() {
        let model = small_model();
        let params = model.init_params();
        let scenes = synth_generate(&SynthSpec {
            n_scenes: 12,
            ..SynthSpec::default()
        })
        .unwrap();
        let t = evaluate(&model, &params, &scenes, &default_horizons(&model.config), true).unwrap();
        assert_eq!(t.horizons, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(t.rows.len(), 15);
        let csv = t.to_csv();
        assert!(csv.starts_with("split,predictor,n,rmse_1s,rmse_2s,rmse_3s,rmse_4s,rmse_5s\n"));
        let back = EvalTable::from_csv(&csv).unwrap();
        assert_eq!(back.rows.len(), t.rows.len());
        for (a, b) in back.rows.iter().zip(&t.rows) {
            assert_eq!((&a.split, &a.predictor, a.n), (&b.split, &b.predictor, b.n));
            for (x, y) in a.rmse.iter().zip(&b.rmse) {
                assert!((x.is_nan() && y.is_nan()) || (x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn horizon_beyond_tf_is_an_error() {
        let cfg = BatConfig::default();
        assert_eq!(horizon_steps(&cfg, &[1.0, 5.0]).unwrap(), vec![4, 24]);
        assert!(horizon_steps(&cfg, &[6.0]).is_err());
        assert!(horizon_steps(&cfg, &[0.0]).is_err());
    }

    #[test]
    fn cv_extrapolates_last_step() {
        let h = [CartPoint::new(0.0, 0.0), CartPoint::new(1.0, 2.0)];
        let f = constant_velocity(&h, 3);
        assert_eq!(f[2], CartPoint::new(4.0, 8.0));
    }
}
