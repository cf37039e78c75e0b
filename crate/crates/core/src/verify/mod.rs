//! Self-verification suite: gradient checks, invariants, metric oracles
//! and the synthetic training checks.

mod checks;
pub mod oracles;

use std::time::Instant;

use serde::Deserialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::experiment::RunResult;
use crate::model::{ModelConfig, Variant};
use crate::synth::ArchSpec;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverfitSetup {
    pub steps: usize,
    pub min_accuracy: f64,
    pub arch: ArchSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneralizationSetup {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub min_miou: f64,
    pub arch: ArchSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl GeneralizationSetup {
    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            model: self.model.clone(),
            train: self.train.clone(),
        }
    }
}

/// Test mIoU of the first verified generalization run, with the allowed
/// drift.
#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Baseline {
    pub miou: f64,
    pub tolerance: f64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Suite {
    pub overfit: OverfitSetup,
    pub generalization: GeneralizationSetup,
}

impl Suite {
    /// The setup shipped with the crate.
    pub fn shipped() -> Self {
        toml::from_str(include_str!("suite.toml")).expect("shipped suite parses")
    }
}

/// The shipped regression baseline, if one has been recorded.
pub fn shipped_baseline() -> Option<Baseline> {
    #[derive(Deserialize)]
    struct File {
        baseline: Option<Baseline>,
    }
    toml::from_str::<File>(include_str!("baseline.toml"))
        .expect("shipped baseline parses")
        .baseline
}

/// Outcome of one check: pass/fail and a one-line summary of what was
/// measured.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CheckReport {
    pub fn line(&self) -> String {
        format!(
            "{} {:>2} {:<26} {} ({:.1}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail,
            self.seconds
        )
    }
}

/// Shared state across checks, so the training checks reuse runs.
pub struct Context {
    pub suite: Suite,
    pub baseline: Option<Baseline>,
    runs: Vec<(Variant, RunResult)>,
}

impl Context {
    pub fn new(suite: Suite, baseline: Option<Baseline>) -> Self {
        Context {
            suite,
            baseline,
            runs: Vec::new(),
        }
    }

    /// Train (once) and evaluate `variant` on the generalization split.
    pub fn generalization_run(&mut self, variant: Variant) -> Result<&RunResult> {
        if let Some(i) = self.runs.iter().position(|(v, _)| *v == variant) {
            return Ok(&self.runs[i].1);
        }
        let run = checks::generalization_run(&self.suite.generalization, variant)?;
        self.runs.push((variant, run));
        Ok(&self.runs.last().expect("just pushed").1)
    }
}

type CheckFn = fn(&mut Context) -> Result<(bool, String)>;

pub struct Check {
    pub id: usize,
    pub name: &'static str,
    /// Needs minutes of training; only run in the full suite.
    pub slow: bool,
    run: CheckFn,
}

pub const CHECKS: [Check; 11] = [
    Check {
        id: 1,
        name: "gradient_correctness",
        slow: false,
        run: checks::gradients,
    },
    Check {
        id: 2,
        name: "attention_normalization",
        slow: false,
        run: checks::attention_normalization,
    },
    Check {
        id: 3,
        name: "aggregation_invariance",
        slow: false,
        run: checks::aggregation_invariance,
    },
    Check {
        id: 4,
        name: "knn_oracle",
        slow: false,
        run: checks::knn_oracle,
    },
    Check {
        id: 5,
        name: "loss_sanity",
        slow: false,
        run: checks::loss_sanity,
    },
    Check {
        id: 6,
        name: "metric_oracle",
        slow: false,
        run: checks::metric_oracle,
    },
    Check {
        id: 7,
        name: "overfit",
        slow: true,
        run: checks::overfit,
    },
    Check {
        id: 8,
        name: "synthetic_generalization",
        slow: true,
        run: checks::generalization,
    },
    Check {
        id: 9,
        name: "ablation_ordering",
        slow: true,
        run: checks::ablation_ordering,
    },
    Check {
        id: 10,
        name: "determinism_persistence",
        slow: false,
        run: checks::determinism,
    },
    Check {
        id: 11,
        name: "geometry",
        slow: false,
        run: checks::geometry,
    },
];

/// Deliberate defects used to show that checks detect them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mutation {
    BrokenSoftmax,
}

impl std::str::FromStr for Mutation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Mutation::BrokenSoftmax),
            _ => Err(Error::Usage(format!("unknown mutation {s:?}; valid: softmax"))),
        }
    }
}

impl Check {
    pub fn run(&self, ctx: &mut Context, mutation: Option<Mutation>) -> CheckReport {
        let start = Instant::now();
        let outcome = match mutation {
            Some(Mutation::BrokenSoftmax) => crate::tensor::with_broken_softmax(|| (self.run)(ctx)),
            None => (self.run)(ctx),
        };
        let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        CheckReport {
            id: self.id,
            name: self.name,
            passed,
            detail,
            seconds: start.elapsed().as_secs_f64(),
        }
    }
}

/// Look up a check by id or name.
pub fn find_check(key: &str) -> Option<&'static Check> {
    CHECKS.iter().find(|c| c.name == key || c.id.to_string() == key)
}

/// Run the quick checks (and the slow ones with `full`), reporting each as
/// it finishes.
pub fn run_all(
    ctx: &mut Context,
    full: bool,
    mutation: Option<Mutation>,
    mut report: impl FnMut(&CheckReport),
) -> Vec<CheckReport> {
    CHECKS
        .iter()
        .filter(|c| full || !c.slow)
        .map(|c| {
            let r = c.run(ctx, mutation);
            report(&r);
            r
        })
        .collect()
}
