//! Train/evaluate runs and ablation tables shared by the command-line tool
//! and the verification suite.

use std::fmt::Write as _;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{ConfusionMatrix, Metrics};
use crate::mesh::{mesh_features, TriangleMesh};
use crate::model::{TsgcNet, Variant};
use crate::train::{EpochRecord, Trainer, TrainingSet};

/// Confusion matrix of eval-mode predictions over labeled meshes. Each
/// mesh is centered before feature extraction.
pub fn evaluate(model: &mut TsgcNet<f32>, meshes: &[TriangleMesh]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.config().num_classes);
    for (i, m) in meshes.iter().enumerate() {
        let truth = m
            .labels()
            .ok_or_else(|| Error::Data(format!("evaluation mesh {i} has no labels")))?;
        let pred = model.predict(&mesh_features(m, true))?;
        cm.accumulate(&pred, truth)?;
    }
    Ok(cm)
}

/// Outcome of one training run.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub model: TsgcNet<f32>,
    pub log: Vec<EpochRecord>,
    pub metrics: Metrics,
}

/// Train a fresh model from `config` and evaluate it on `test`.
pub fn train_and_evaluate(
    config: &RunConfig,
    train: &[TriangleMesh],
    test: &[TriangleMesh],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<RunResult> {
    config.validate()?;
    let model = TsgcNet::new(config.model.clone())?;
    let data = TrainingSet::new(train, config.model.num_classes)?;
    let mut trainer = Trainer::new(model, config.train.clone())?;
    let log = trainer.fit(&data, config.train.epochs, |_, rec| {
        on_epoch(rec);
        Ok(())
    })?;
    let mut model = trainer.into_model();
    let metrics = evaluate(&mut model, test)?.metrics()?;
    Ok(RunResult { model, log, metrics })
}

/// One row of an ablation table.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub name: String,
    pub variant: Variant,
    pub parameters: usize,
    pub metrics: Metrics,
}

/// Parse variant names, keeping the spelling the caller used.
pub fn parse_variants(names: &[String]) -> Result<Vec<(String, Variant)>> {
    names.iter().map(|n| Ok((n.clone(), n.parse()?))).collect()
}

/// Train every variant from the same base configuration, seeds and data.
pub fn ablate(
    base: &RunConfig,
    variants: &[(String, Variant)],
    train: &[TriangleMesh],
    test: &[TriangleMesh],
    mut on_epoch: impl FnMut(&str, &EpochRecord),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len());
    for (name, v) in variants {
        let config = RunConfig {
            model: v.apply(&base.model),
            train: base.train.clone(),
        };
        let run = train_and_evaluate(&config, train, test, |rec| on_epoch(name, rec))?;
        rows.push(AblationRow {
            name: name.clone(),
            variant: *v,
            parameters: run.model.num_parameters(),
            metrics: run.metrics,
        });
    }
    Ok(rows)
}

/// Tab-separated table: variant, parameter count, OA, mIoU, then one IoU
/// column per class (`NA` where undefined).
pub fn format_ablation_tsv(rows: &[AblationRow]) -> String {
    let classes = rows.first().map_or(0, |r| r.metrics.iou.len());
    let mut s = String::from("variant\tparameters\toa\tmiou");
    for c in 0..classes {
        let _ = write!(s, "\tiou_{c}");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(
            s,
            "{}\t{}\t{:.6}\t{:.6}",
            r.name, r.parameters, r.metrics.overall_accuracy, r.metrics.mean_iou
        );
        for v in &r.metrics.iou {
            match v {
                Some(v) => {
                    let _ = write!(s, "\t{v:.6}");
                }
                None => s.push_str("\tNA"),
            }
        }
        s.push('\n');
    }
    s
}

/// Aligned plain-text version of the same table with percentages.
pub fn format_ablation_text(rows: &[AblationRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(7);
    let mut s = format!(
        "{:<width$}  {:>10}  {:>7}  {:>7}\n",
        "variant", "parameters", "OA", "mIoU"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<width$}  {:>10}  {:>7.2}  {:>7.2}",
            r.name,
            r.parameters,
            100.0 * r.metrics.overall_accuracy,
            100.0 * r.metrics.mean_iou
        );
    }
    s
}
