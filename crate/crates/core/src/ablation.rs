//! Ablation suites over layer schedules with shared seeds, summarized as an
//! arm × metric comparison table.

use std::fmt;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Example;
use crate::evaluation::{evaluate, EvalReport, DEFAULT_KS};
use crate::mask::{build_schedule, BlockOrder, LayerSchedule, MaskError, Scheme};
use crate::model::{MaskRouting, ModelConfig, ModelParams};
use crate::training::{train, StopReason, TrainConfig};

#[derive(Debug, Error)]
pub enum AblationError {
    #[error("unknown suite {0:?} (expected orders, components or all)")]
    UnknownSuite(String),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Orders,
    Components,
    All,
}

impl FromStr for Suite {
    type Err = AblationError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "orders" => Ok(Suite::Orders),
            "components" => Ok(Suite::Components),
            "all" => Ok(Suite::All),
            _ => Err(AblationError::UnknownSuite(s.to_string())),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Orders => "orders",
            Suite::Components => "components",
            Suite::All => "all",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    pub schedule: LayerSchedule,
}

pub const FULL_ARM: &str = "full";
pub const BASELINE_ARM: &str = "all-OR";

/// Arms of a suite for a model of `total` layers with `n_shallow` IN and
/// `n_deep` CR layers.
///
/// "w/o IN" and "w/o CR" turn that block into OR layers, keeping depth.
/// "w/o OR" drops the OR block, since turning it into OR would reproduce the
/// full model.
pub fn suite_arms(
    suite: Suite,
    total: usize,
    n_shallow: usize,
    n_deep: usize,
) -> Result<Vec<Arm>, AblationError> {
    let full = build_schedule(total, n_shallow, n_deep, BlockOrder::CANONICAL, Scheme::Cr)?;
    let arm = |name: &str, schedule: LayerSchedule| Arm {
        name: name.to_string(),
        schedule,
    };
    let orders = || -> Result<Vec<Arm>, AblationError> {
        BlockOrder::all()
            .into_iter()
            .map(|o| {
                Ok(arm(
                    &o.to_string(),
                    build_schedule(total, n_shallow, n_deep, o, Scheme::Cr)?,
                ))
            })
            .collect()
    };
    let components = || -> Result<Vec<Arm>, AblationError> {
        Ok(vec![
            arm(FULL_ARM, full.clone()),
            arm("w/o IN", full.replace(Scheme::In, Scheme::Or)),
            arm("w/o OR", full.without(Scheme::Or)),
            arm("w/o CR", full.replace(Scheme::Cr, Scheme::Or)),
            arm(
                "CR->CR_PRE",
                build_schedule(
                    total,
                    n_shallow,
                    n_deep,
                    BlockOrder::CANONICAL,
                    Scheme::CrPre,
                )?,
            ),
        ])
    };
    Ok(match suite {
        Suite::Orders => orders()?,
        Suite::Components => components()?,
        Suite::All => {
            let mut arms = components()?;
            // the canonical order is the full arm
            arms.extend(orders()?.into_iter().skip(1));
            arms.push(arm(BASELINE_ARM, LayerSchedule::uniform(total, Scheme::Or)));
            arms
        }
    })
}

/// Outcome of one (arm, seed) training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub best_step: usize,
    pub stop_reason: StopReason,
    pub valid: EvalReport,
    pub test: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub arm: String,
    pub schedule: String,
    pub seed: u64,
    pub result: Result<RunResult, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub schedule: String,
    pub n_ok: usize,
    pub n_failed: usize,
    pub test_hr5: f64,
    pub test_ndcg5: f64,
    pub test_hr10: f64,
    pub test_ndcg10: f64,
    pub valid_hr10: f64,
    pub valid_ndcg10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub runs: Vec<RunRecord>,
    pub summary: Vec<ArmSummary>,
}

/// Trains and evaluates one arm. Model and training seeds are both `seed`,
/// so arms differ only in their schedule.
pub fn train_arm(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    schedule: &LayerSchedule,
    seed: u64,
    data: (&[Example], &[Example], &[Example]),
) -> Result<RunResult, String> {
    train_arm_params(base, train_cfg, schedule, seed, data).map(|(r, _, _)| r)
}

/// [`train_arm`] that also returns the selected parameters and the arm's
/// model config.
pub fn train_arm_params(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    schedule: &LayerSchedule,
    seed: u64,
    data: (&[Example], &[Example], &[Example]),
) -> Result<(RunResult, ModelParams, ModelConfig), String> {
    let model = ModelConfig {
        n_layers: schedule.len(),
        schedule: schedule.clone(),
        seed,
        ..base.clone()
    };
    let tc = TrainConfig {
        seed,
        ..train_cfg.clone()
    };
    let (tr, va, te) = data;
    let init = ModelParams::init(&model).map_err(|e| e.to_string())?;
    let out =
        train(init, &model, &tc, tr, va, MaskRouting::Scheduled).map_err(|e| e.to_string())?;
    let valid = evaluate(&out.best_params, &model, va, "valid", &DEFAULT_KS)
        .map_err(|e| e.to_string())?
        .0;
    let test = evaluate(&out.best_params, &model, te, "test", &DEFAULT_KS)
        .map_err(|e| e.to_string())?
        .0;
    let result = RunResult {
        best_step: out.history.best_step,
        stop_reason: out.history.stop_reason,
        valid,
        test,
    };
    Ok((result, out.best_params, model))
}

/// Runs every arm for every seed through `run`. Failures are recorded and
/// the suite continues.
pub fn run_suite<F>(arms: &[Arm], seeds: &[u64], mut run: F) -> AblationTable
where
    F: FnMut(&Arm, u64) -> Result<RunResult, String>,
{
    let mut runs = Vec::new();
    for a in arms {
        for &seed in seeds {
            let result = run(a, seed);
            match &result {
                Ok(r) => log::info!("{} seed {seed}: test {}", a.name, r.test.summary_line()),
                Err(e) => log::warn!("{} seed {seed} failed: {e}", a.name),
            }
            runs.push(RunRecord {
                arm: a.name.clone(),
                schedule: a.schedule.to_string(),
                seed,
                result,
            });
        }
    }
    let summary = arms.iter().map(|a| summarize(a, &runs)).collect();
    AblationTable { runs, summary }
}

fn summarize(arm: &Arm, runs: &[RunRecord]) -> ArmSummary {
    let ok: Vec<&RunResult> = runs
        .iter()
        .filter(|r| r.arm == arm.name)
        .filter_map(|r| r.result.as_ref().ok())
        .collect();
    let n_failed = runs
        .iter()
        .filter(|r| r.arm == arm.name && r.result.is_err())
        .count();
    let mean = |f: &dyn Fn(&RunResult) -> f64| {
        if ok.is_empty() {
            f64::NAN
        } else {
            ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64
        }
    };
    let m = |r: &EvalReport, k: usize, hr: bool| {
        r.at(k).map_or(f64::NAN, |c| if hr { c.hr } else { c.ndcg })
    };
    ArmSummary {
        arm: arm.name.clone(),
        schedule: arm.schedule.to_string(),
        n_ok: ok.len(),
        n_failed,
        test_hr5: mean(&|r| m(&r.test, 5, true)),
        test_ndcg5: mean(&|r| m(&r.test, 5, false)),
        test_hr10: mean(&|r| m(&r.test, 10, true)),
        test_ndcg10: mean(&|r| m(&r.test, 10, false)),
        valid_hr10: mean(&|r| m(&r.valid, 10, true)),
        valid_ndcg10: mean(&|r| m(&r.valid, 10, false)),
    }
}

impl AblationTable {
    pub fn arm(&self, name: &str) -> Option<&ArmSummary> {
        self.summary.iter().find(|s| s.arm == name)
    }

    /// One row per arm: `arm,schedule,n_ok,n_failed,H@5,N@5,H@10,N@10,...`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "arm,schedule,n_ok,n_failed,test_hr5,test_ndcg5,test_hr10,test_ndcg10,valid_hr10,valid_ndcg10"
        )?;
        for s in &self.summary {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                s.arm,
                s.schedule,
                s.n_ok,
                s.n_failed,
                s.test_hr5,
                s.test_ndcg5,
                s.test_hr10,
                s.test_ndcg10,
                s.valid_hr10,
                s.valid_ndcg10
            )?;
        }
        Ok(())
    }

    /// Writes `ablation.csv` and `ablation.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), AblationError> {
        std::fs::create_dir_all(dir)?;
        let mut f = BufWriter::new(std::fs::File::create(dir.join("ablation.csv"))?);
        self.write_csv(&mut f)?;
        f.flush()?;
        let f = BufWriter::new(std::fs::File::create(dir.join("ablation.json"))?);
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::EvalReport;
    use Scheme::*;

    fn names(arms: &[Arm]) -> Vec<&str> {
        arms.iter().map(|a| a.name.as_str()).collect()
    }

    #[test]
    fn orders_suite_has_six_orderings() {
        let arms = suite_arms(Suite::Orders, 6, 2, 1).unwrap();
        assert_eq!(
            names(&arms),
            vec!["IN-OR-CR", "IN-CR-OR", "OR-IN-CR", "OR-CR-IN", "CR-IN-OR", "CR-OR-IN"]
        );
        assert_eq!(arms[1].schedule.schemes(), &[In, In, Cr, Or, Or, Or]);
    }

    #[test]
    fn component_semantics() {
        let arms = suite_arms(Suite::Components, 6, 2, 1).unwrap();
        assert_eq!(
            names(&arms),
            vec!["full", "w/o IN", "w/o OR", "w/o CR", "CR->CR_PRE"]
        );
        assert_eq!(arms[0].schedule.schemes(), &[In, In, Or, Or, Or, Cr]);
        assert_eq!(arms[1].schedule.schemes(), &[Or, Or, Or, Or, Or, Cr]);
        assert_eq!(arms[2].schedule.schemes(), &[In, In, Cr]);
        assert_eq!(arms[3].schedule.schemes(), &[In, In, Or, Or, Or, Or]);
        assert_eq!(arms[4].schedule.schemes(), &[In, In, Or, Or, Or, CrPre]);
    }

    #[test]
    fn all_suite_covers_tables() {
        let arms = suite_arms(Suite::All, 3, 1, 1).unwrap();
        assert_eq!(arms.len(), 5 + 5 + 1);
        assert_eq!(arms.last().unwrap().name, BASELINE_ARM);
        assert!(arms.last().unwrap().schedule.is_all_or());
        assert!("bogus".parse::<Suite>().is_err());
    }

    #[test]
    fn failures_are_recorded_and_suite_continues() {
        let arms = suite_arms(Suite::Components, 3, 1, 1).unwrap();
        let report = |v: f64| {
            EvalReport::from_ranks("x", &[if v > 0.5 { 1 } else { 20 }], &DEFAULT_KS).unwrap()
        };
        let mut calls = 0;
        let table = run_suite(&arms, &[1, 2], |a, seed| {
            calls += 1;
            if a.name == "w/o OR" && seed == 2 {
                return Err("boom".into());
            }
            Ok(RunResult {
                best_step: 100,
                stop_reason: StopReason::MaxSteps,
                valid: report(seed as f64 / 2.0),
                test: report(seed as f64 / 2.0),
            })
        });
        assert_eq!(calls, 10);
        assert_eq!(table.runs.len(), 10);
        let s = table.arm("w/o OR").unwrap();
        assert_eq!((s.n_ok, s.n_failed), (1, 1));
        assert_eq!(table.arm(FULL_ARM).unwrap().test_hr10, 0.5);

        let dir = tempfile::tempdir().unwrap();
        table.save(dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
        assert_eq!(csv.lines().count(), 6);
        let back: AblationTable = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("ablation.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(back.runs.len(), 10);
    }
}
