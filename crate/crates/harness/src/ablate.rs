//! Variant comparison: models A-E and the graph-threshold sweep, trained
//! with a shared seed on the same splits.

use std::fmt::Write as _;
use std::time::Instant;

use bat_core::data::DatasetSplit;
use bat_core::model::{BatModel, ModelVariant};

use crate::eval::{default_horizons, evaluate, Predictor};
use crate::train::{train, TrainOptions};
use crate::{HarnessError, Result, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variant {
    Model(ModelVariant),
    /// Full model with this graph threshold in meters.
    Radius(f64),
}

impl Variant {
    pub fn parse(token: &str) -> Result<Self> {
        let t = token.trim();
        for v in ModelVariant::ALL {
            if t == v.label() || t == v.description() {
                return Ok(Variant::Model(v));
            }
        }
        if let Some(r) = t.strip_prefix("r=") {
            if let Ok(r) = r.parse::<f64>() {
                if r >= 0.0 && r.is_finite() {
                    return Ok(Variant::Radius(r));
                }
            }
        }
        Err(HarnessError::Config(format!(
            "unknown variant `{t}`; expected A-E, cartesian_input, no_behavior, no_interaction, no_priority, full or r=<meters>"
        )))
    }

    pub fn parse_list(text: &str) -> Result<Vec<Self>> {
        text.split(',').filter(|s| !s.trim().is_empty()).map(Variant::parse).collect()
    }

    pub fn label(&self) -> String {
        match self {
            Variant::Model(v) => v.label().to_string(),
            Variant::Radius(r) => format!("r={r}"),
        }
    }

    pub fn description(&self) -> String {
        match self {
            Variant::Model(v) => v.description().to_string(),
            Variant::Radius(_) => "full".to_string(),
        }
    }

    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        match *self {
            Variant::Model(v) => cfg.model = v.apply(&base.model),
            Variant::Radius(r) => {
                cfg.model = ModelVariant::E.apply(&base.model);
                cfg.model.r = r;
            }
        }
        cfg
    }
}

/// Models A-E followed by the threshold sweep 0, 7.62 and 15.24 m.
pub fn default_variants() -> Vec<Variant> {
    let mut v: Vec<Variant> = ModelVariant::ALL.iter().map(|&m| Variant::Model(m)).collect();
    v.extend([0.0, 7.62, 15.24].map(Variant::Radius));
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub description: String,
    pub r: f64,
    pub parameters: usize,
    pub final_train_nll: f64,
    pub seconds: f64,
    /// Best-mode test RMSE per whole-second horizon.
    pub rmse: Vec<f64>,
    pub cv_rmse: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub horizons: Vec<f64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,description,r,parameters,final_train_nll,seconds");
        for h in &self.horizons {
            let _ = write!(s, ",rmse_{h}s");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(
                s,
                "{},{},{},{},{:.6},{:.1}",
                r.label, r.description, r.r, r.parameters, r.final_train_nll, r.seconds
            );
            for v in &r.rmse {
                let _ = write!(s, ",{v:.6}");
            }
            s.push('\n');
        }
        s
    }
}

/// Trains and evaluates every variant. Runs sharing a configuration (for
/// example `E` and `r=7.62` at the default threshold) are trained once.
pub fn run_ablation(base: &RunConfig, variants: &[Variant], splits: &DatasetSplit) -> Result<AblationTable> {
    if variants.is_empty() {
        return Err(HarnessError::Config("no variants requested".into()));
    }
    if splits.test.is_empty() {
        return Err(HarnessError::Config("ablation needs a non-empty test split".into()));
    }
    let horizons = default_horizons(&base.model);
    let mut rows: Vec<AblationRow> = Vec::new();
    let mut done: Vec<(RunConfig, AblationRow)> = Vec::new();
    for v in variants {
        let cfg = v.apply(base);
        let mut row = if let Some((_, r)) = done.iter().find(|(c, _)| *c == cfg) {
            r.clone()
        } else {
            log::info!("training variant {}", v.label());
            let start = Instant::now();
            let out = train(&cfg, &splits.train, &splits.val, TrainOptions::default())?;
            let model = BatModel::new(cfg.model.clone())?;
            let table = evaluate(&model, &out.checkpoint.params, &splits.test, &horizons, false)?;
            let pick = |p: Predictor| table.get("all", p).map(|r| r.rmse.clone()).unwrap_or_default();
            let row = AblationRow {
                label: String::new(),
                description: String::new(),
                r: cfg.model.r,
                parameters: out.checkpoint.params.size(),
                final_train_nll: out.log.last().map_or(f64::NAN, |e| e.train_nll),
                seconds: start.elapsed().as_secs_f64(),
                rmse: pick(Predictor::BestMode),
                cv_rmse: pick(Predictor::ConstantVelocity),
            };
            done.push((cfg, row.clone()));
            row
        };
        row.label = v.label();
        row.description = v.description();
        rows.push(row);
    }
    Ok(AblationTable { horizons, rows })
}
