//! Experiment specs: what to train, with which seeds, and which ablation
//! axis to sweep. A spec is fully validated before any compute starts.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use vlmoe_core::aux_loss::AuxLossKind;
use vlmoe_core::model::MoMEConfig;
use vlmoe_core::parallel::DEFAULT_ALPHA;
use vlmoe_core::train::{ObjectiveToggles, TrainConfig};

/// Which modality pools are sparse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "none")]
    None,
    T,
    V,
    TV,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::None, Strategy::T, Strategy::V, Strategy::TV];

    fn flags(self) -> (bool, bool) {
        match self {
            Strategy::None => (false, false),
            Strategy::T => (true, false),
            Strategy::V => (false, true),
            Strategy::TV => (true, true),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::None => "none",
            Strategy::T => "T",
            Strategy::V => "V",
            Strategy::TV => "TV",
        })
    }
}

impl FromStr for Strategy {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => Strategy::None,
            "T" | "t" => Strategy::T,
            "V" | "v" => Strategy::V,
            "TV" | "tv" => Strategy::TV,
            other => bail!("unknown scaling strategy {other:?} (expected none, T, V or TV)"),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Experts,
    Strategy,
    Aux,
    Bpr,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Experts => "experts",
            Axis::Strategy => "strategy",
            Axis::Aux => "aux",
            Axis::Bpr => "bpr",
        }
    }

    pub fn default_values(self) -> Vec<Setting> {
        match self {
            Axis::Experts => [1, 4, 8, 16, 32].map(Setting::Experts).to_vec(),
            Axis::Strategy => Strategy::ALL.map(Setting::Strategy).to_vec(),
            Axis::Aux => [AuxLossKind::Load, AuxLossKind::Vloss, AuxLossKind::Zloss]
                .map(Setting::Aux)
                .to_vec(),
            Axis::Bpr => vec![Setting::Bpr(false), Setting::Bpr(true)],
        }
    }

    pub fn parse_value(self, s: &str) -> Result<Setting> {
        Ok(match self {
            Axis::Experts => Setting::Experts(
                s.parse()
                    .with_context(|| format!("expert count {s:?} is not a number"))?,
            ),
            Axis::Strategy => Setting::Strategy(s.parse()?),
            Axis::Aux => {
                let kind: AuxLossKind = s.parse()?;
                ensure!(
                    kind != AuxLossKind::Importance,
                    "the aux axis covers load, vloss and zloss"
                );
                Setting::Aux(kind)
            }
            Axis::Bpr => Setting::Bpr(match s {
                "on" | "true" => true,
                "off" | "false" => false,
                other => bail!("bpr value {other:?} must be on or off"),
            }),
        })
    }
}

impl FromStr for Axis {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "experts" => Axis::Experts,
            "strategy" => Axis::Strategy,
            "aux" => Axis::Aux,
            "bpr" => Axis::Bpr,
            other => bail!("unknown axis {other:?} (expected experts, strategy, aux or bpr)"),
        })
    }
}

/// One point on an ablation axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Setting {
    Experts(usize),
    Strategy(Strategy),
    Aux(AuxLossKind),
    Bpr(bool),
}

impl Setting {
    pub fn label(&self) -> String {
        match self {
            Setting::Experts(e) => format!("experts-{e}"),
            Setting::Strategy(s) => format!("strategy-{s}"),
            Setting::Aux(k) => format!("aux-{}", k.name()),
            Setting::Bpr(on) => format!("bpr-{}", if *on { "on" } else { "off" }),
        }
    }

    pub fn value(&self) -> String {
        match self {
            Setting::Experts(e) => e.to_string(),
            Setting::Strategy(s) => s.to_string(),
            Setting::Aux(k) => k.name().to_string(),
            Setting::Bpr(on) => (if *on { "on" } else { "off" }).to_string(),
        }
    }

    pub fn apply(&self, cfg: &mut MoMEConfig) {
        match *self {
            Setting::Experts(e) => cfg.experts = e,
            Setting::Strategy(s) => (cfg.scale_text, cfg.scale_image) = s.flags(),
            Setting::Aux(k) => {
                cfg.aux.text = k;
                cfg.aux.image = k;
            }
            Setting::Bpr(on) => {
                cfg.bpr_text = on;
                cfg.bpr_image = on;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Preset name (`toy`, `small`, `base`) or a path to a model config
    /// file, relative to the spec file.
    pub model: String,
    pub steps: usize,
    pub seeds: Vec<u64>,
    pub batch_size: usize,
    pub val_size: usize,
    pub eval_every: usize,
    pub routing_log_every: usize,
    pub objectives: ObjectiveToggles,
    /// Fixed settings applied to the model before any axis value.
    pub experts: Option<usize>,
    pub strategy: Option<Strategy>,
    pub aux: Option<AuxLossKind>,
    pub bpr: Option<bool>,
    pub axis: Option<Axis>,
    /// Subset of axis values to sweep; every value of the axis when absent.
    pub values: Option<Vec<String>>,
    /// Simulated expert-parallel workers.
    pub workers: usize,
    /// Cost of one token transfer in compute units.
    pub alpha: f64,
    pub out: PathBuf,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        let tc = TrainConfig::default();
        Self {
            model: "toy".into(),
            steps: tc.steps,
            seeds: vec![tc.seed],
            batch_size: tc.batch_size,
            val_size: tc.val_size,
            eval_every: tc.eval_every,
            routing_log_every: tc.routing_log_every,
            objectives: ObjectiveToggles::default(),
            experts: None,
            strategy: None,
            aux: None,
            bpr: None,
            axis: None,
            values: None,
            workers: 4,
            alpha: DEFAULT_ALPHA,
            out: PathBuf::from("runs/default"),
        }
    }
}

/// A spec as read from disk, with the exact bytes kept for persistence.
pub struct LoadedSpec {
    pub spec: ExperimentSpec,
    pub source: Option<String>,
    pub base_dir: PathBuf,
}

impl LoadedSpec {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self {
                spec: ExperimentSpec::default(),
                source: None,
                base_dir: PathBuf::from("."),
            });
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading spec {}", path.display()))?;
        let spec = serde_json::from_str(&text)
            .with_context(|| format!("parsing spec {}", path.display()))?;
        Ok(Self {
            spec,
            source: Some(text),
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }
}

/// One model to train: a label, its config, and the axis value it
/// represents, if any.
#[derive(Debug, Clone)]
pub struct Cell {
    pub label: String,
    pub setting: Option<Setting>,
    pub model: MoMEConfig,
}

/// The validated contents of a spec.
#[derive(Debug, Clone)]
pub struct Plan {
    pub cells: Vec<Cell>,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
}

impl ExperimentSpec {
    fn base_model(&self, base_dir: &Path) -> Result<MoMEConfig> {
        let mut cfg = match self.model.as_str() {
            "toy" => MoMEConfig::toy(),
            "small" => MoMEConfig::small(),
            "base" => MoMEConfig::base(),
            path => {
                let p = base_dir.join(path);
                MoMEConfig::from_json_file(&p)
                    .with_context(|| format!("loading model config {}", p.display()))?
            }
        };
        let fixed = [
            self.experts.map(Setting::Experts),
            self.strategy.map(Setting::Strategy),
            self.aux.map(Setting::Aux),
            self.bpr.map(Setting::Bpr),
        ];
        for s in fixed.iter().flatten() {
            s.apply(&mut cfg);
        }
        Ok(cfg)
    }

    fn settings(&self, axis: Axis) -> Result<Vec<Setting>> {
        let values = match &self.values {
            None => axis.default_values(),
            Some(v) => v
                .iter()
                .map(|s| axis.parse_value(s))
                .collect::<Result<_>>()?,
        };
        ensure!(!values.is_empty(), "axis {} has no values", axis.name());
        let labels: BTreeSet<String> = values.iter().map(Setting::label).collect();
        ensure!(
            labels.len() == values.len(),
            "axis {} repeats a value",
            axis.name()
        );
        Ok(values)
    }

    /// Checks every field and resolves the model configs of all cells.
    /// `sweep` asks for one cell per axis value; otherwise a single cell.
    pub fn plan(&self, base_dir: &Path, sweep: bool) -> Result<Plan> {
        ensure!(!self.seeds.is_empty(), "at least one seed is required");
        let unique: BTreeSet<u64> = self.seeds.iter().copied().collect();
        ensure!(unique.len() == self.seeds.len(), "seeds must be distinct");
        ensure!(self.batch_size > 0, "batch_size must be positive");
        ensure!(self.val_size > 0, "val_size must be positive");
        ensure!(
            self.objectives.any(),
            "at least one objective must be enabled"
        );
        ensure!(self.workers > 0, "workers must be positive");
        ensure!(
            self.alpha.is_finite() && self.alpha >= 0.0,
            "alpha must be a finite non-negative number"
        );
        if self.values.is_some() && self.axis.is_none() {
            bail!("values are given but no axis is set");
        }

        let base = self.base_model(base_dir)?;
        let cells = match (sweep, self.axis) {
            (true, None) => bail!("ablate needs an axis (set it in the spec or pass --axis)"),
            (true, Some(axis)) => self
                .settings(axis)?
                .into_iter()
                .map(|s| {
                    let mut model = base.clone();
                    s.apply(&mut model);
                    Cell {
                        label: s.label(),
                        setting: Some(s),
                        model,
                    }
                })
                .collect(),
            (false, _) => vec![Cell {
                label: String::new(),
                setting: None,
                model: base,
            }],
        };
        for c in &cells {
            c.model
                .validate()
                .with_context(|| format!("model config of cell {:?}", c.label))?;
        }
        let train = TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            seed: self.seeds[0],
            objectives: self.objectives,
            val_size: self.val_size,
            eval_every: self.eval_every,
            routing_log_every: self.routing_log_every,
            ..TrainConfig::default()
        };
        Ok(Plan {
            cells,
            seeds: self.seeds.clone(),
            train,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_plans_one_toy_cell() {
        let plan = ExperimentSpec::default()
            .plan(Path::new("."), false)
            .unwrap();
        assert_eq!(plan.cells.len(), 1);
        assert_eq!(plan.cells[0].model, MoMEConfig::toy());
        assert_eq!(plan.seeds, vec![1]);
    }

    #[test]
    fn strategy_axis_has_four_cells() {
        let spec = ExperimentSpec {
            axis: Some(Axis::Strategy),
            ..ExperimentSpec::default()
        };
        let plan = spec.plan(Path::new("."), true).unwrap();
        let flags: Vec<(bool, bool)> = plan
            .cells
            .iter()
            .map(|c| (c.model.scale_text, c.model.scale_image))
            .collect();
        assert_eq!(
            flags,
            vec![(false, false), (true, false), (false, true), (true, true)]
        );
    }

    #[test]
    fn explicit_values_and_fixed_overrides() {
        let spec = ExperimentSpec {
            axis: Some(Axis::Experts),
            values: Some(vec!["1".into(), "8".into()]),
            aux: Some(AuxLossKind::Zloss),
            ..ExperimentSpec::default()
        };
        let plan = spec.plan(Path::new("."), true).unwrap();
        assert_eq!(
            plan.cells
                .iter()
                .map(|c| c.model.experts)
                .collect::<Vec<_>>(),
            vec![1, 8]
        );
        assert!(plan
            .cells
            .iter()
            .all(|c| c.model.aux.image == AuxLossKind::Zloss));
        assert_eq!(plan.cells[1].label, "experts-8");
    }

    #[test]
    fn invalid_specs_fail_before_compute() {
        let bad = [
            ExperimentSpec {
                seeds: vec![],
                ..ExperimentSpec::default()
            },
            ExperimentSpec {
                seeds: vec![2, 2],
                ..ExperimentSpec::default()
            },
            ExperimentSpec {
                batch_size: 0,
                ..ExperimentSpec::default()
            },
            ExperimentSpec {
                alpha: f64::NAN,
                ..ExperimentSpec::default()
            },
            ExperimentSpec {
                model: "missing.json".into(),
                ..ExperimentSpec::default()
            },
            ExperimentSpec {
                experts: Some(0),
                ..ExperimentSpec::default()
            },
            ExperimentSpec {
                axis: Some(Axis::Aux),
                values: Some(vec!["importance".into()]),
                ..ExperimentSpec::default()
            },
            ExperimentSpec {
                objectives: ObjectiveToggles {
                    mlm: false,
                    mim: false,
                    vlm: false,
                },
                ..ExperimentSpec::default()
            },
        ];
        for spec in bad {
            assert!(spec.plan(Path::new("."), true).is_err(), "{spec:?}");
        }
        assert!(ExperimentSpec::default()
            .plan(Path::new("."), true)
            .is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<ExperimentSpec>(r#"{"stepz": 3}"#).is_err());
        let spec: ExperimentSpec =
            serde_json::from_str(r#"{"steps": 3, "strategy": "TV"}"#).unwrap();
        assert_eq!((spec.steps, spec.strategy), (3, Some(Strategy::TV)));
    }
}
