use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::experiment::{
    evaluate_single, evaluate_xcross, subset, target_lora_stage, xcross_stage, ExperimentConfig, Foundation,
    Variant, Workbench,
};
use super::metrics::EvalReport;
use crate::error::{Error, Result};
use crate::lora::LoraSet;

pub const SWEEP_SIZES: [usize; 9] = [50, 75, 100, 200, 300, 400, 500, 750, 1000];
pub const SWEEP_SUBSETS: usize = 5;
pub const LAYER_COUNTS: [usize; 4] = [1, 2, 4, 8];

/// Smallest size whose value exceeds `reference`, scanning in order.
pub fn crossing_size(sizes: &[usize], series: &[f64], reference: f64) -> Option<usize> {
    sizes
        .iter()
        .zip(series)
        .find(|(_, &v)| v > reference)
        .map(|(&s, _)| s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepMethod {
    Xcross,
    TargetLora,
}

impl SweepMethod {
    pub fn tag(self) -> &'static str {
        match self {
            SweepMethod::Xcross => "xcross",
            SweepMethod::TargetLora => "target-lora",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub method: SweepMethod,
    pub size: usize,
    pub subset: usize,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub sizes: Vec<usize>,
    pub subsets: usize,
    /// Test Hit@1 of the reference model, constant across sizes.
    pub reference: f64,
    pub reference_tag: String,
    pub runs: Vec<SweepRun>,
}

impl SweepResult {
    /// Mean Hit@1 per size for `method`; sizes that were not run are skipped.
    pub fn means(&self, method: SweepMethod) -> Vec<(usize, f64)> {
        self.sizes
            .iter()
            .filter_map(|&size| {
                let v: Vec<f64> = self
                    .runs
                    .iter()
                    .filter(|r| r.method == method && r.size == size)
                    .map(|r| r.report.hit1)
                    .collect();
                (!v.is_empty()).then(|| (size, v.iter().sum::<f64>() / v.len() as f64))
            })
            .collect()
    }

    pub fn crossing(&self, method: SweepMethod) -> Option<usize> {
        let (sizes, values): (Vec<usize>, Vec<f64>) = self.means(method).into_iter().unzip();
        crossing_size(&sizes, &values, self.reference)
    }

    /// `method,size,subset,hit1,hit3,hit10,mrr10,reference` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,size,subset,hit1,hit3,hit10,mrr10,reference\n");
        for r in &self.runs {
            out += &format!(
                "{},{},{},{},{},{},{},{}\n",
                r.method.tag(),
                r.size,
                r.subset,
                r.report.hit1,
                r.report.hit3,
                r.report.hit10,
                r.report.mrr10,
                self.reference
            );
        }
        out
    }
}

/// Trains X-Cross and fresh target adapters on random subsets of the target
/// training split and evaluates each on the full target test split.
///
/// With `stop_when_crossed`, a method's remaining sizes are skipped once its
/// mean Hit@1 exceeds the reference; the crossing size is unaffected.
#[allow(clippy::too_many_arguments)]
pub fn data_efficiency_sweep(
    cfg: &ExperimentConfig,
    wb: &Workbench,
    foundation: &Foundation,
    sources: &[&LoraSet],
    reference: (&str, f64),
    sizes: &[usize],
    subsets: usize,
    methods: &[SweepMethod],
    stop_when_crossed: bool,
    mut progress: impl FnMut(&SweepRun),
) -> Result<SweepResult> {
    let target = wb.domain(cfg.experiment.target)?;
    if let Some(&max) = sizes.iter().max() {
        if max > target.train.len() {
            return Err(Error::Input(format!(
                "sweep size {max} exceeds the {} available target training instances",
                target.train.len()
            )));
        }
    }
    let mut result = SweepResult {
        sizes: sizes.to_vec(),
        subsets,
        reference: reference.1,
        reference_tag: reference.0.to_string(),
        runs: Vec::new(),
    };
    for &method in methods {
        for &size in sizes {
            let mut sum = 0.0;
            for s in 0..subsets {
                let seed = cfg.seed ^ ((size as u64) << 16 | s as u64);
                let train = subset(&target.train, size, seed)?;
                let tag = format!("{}-{size}-{s}", method.tag());
                let report = match method {
                    SweepMethod::Xcross => {
                        let (m, _) = xcross_stage(cfg, wb, &foundation.base, sources, &train, Variant::Full)?;
                        evaluate_xcross(&foundation.base, sources, &m, &target.test, &tag, cfg.seed)?.0
                    }
                    SweepMethod::TargetLora => {
                        let (a, _) = target_lora_stage(cfg, wb, &foundation.base, &train)?;
                        evaluate_single(&foundation.base, &a, &target.test, &tag, cfg.seed)?.0
                    }
                };
                sum += report.hit1;
                let run = SweepRun {
                    method,
                    size,
                    subset: s,
                    report,
                };
                progress(&run);
                result.runs.push(run);
            }
            if stop_when_crossed && sum / subsets as f64 > reference.1 {
                break;
            }
        }
    }
    Ok(result)
}

/// X-Cross with the top `c` layers integrated, for each `c` in `counts`.
pub fn layer_count_sweep(
    cfg: &ExperimentConfig,
    wb: &Workbench,
    foundation: &Foundation,
    sources: &[&LoraSet],
    train: &[crate::recdata::EncodedInstance],
    counts: &[usize],
) -> Result<Vec<(usize, EvalReport)>> {
    let layers = cfg.encoder.num_layers;
    if let Some(&c) = counts.iter().find(|&&c| c == 0 || c > layers) {
        return Err(Error::Config(format!("cannot integrate {c} of {layers} layers")));
    }
    let test = &wb.domain(cfg.experiment.target)?.test;
    counts
        .iter()
        .map(|&c| {
            let mut run_cfg = cfg.clone();
            run_cfg.integration.layers = Some(c);
            let (m, _) = xcross_stage(&run_cfg, wb, &foundation.base, sources, train, Variant::Full)?;
            let tag = format!("xcross-top{c}");
            Ok((c, evaluate_xcross(&foundation.base, sources, &m, test, &tag, cfg.seed)?.0))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTTest {
    pub t: f64,
    pub df: f64,
    /// Two-tailed.
    pub p_value: f64,
    /// The differences have zero variance, so `t` is undefined.
    pub degenerate: bool,
}

/// Two-tailed paired Student's t-test of `a` against `b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Input(format!(
            "paired t-test needs two equal-length samples of size ≥ 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let df = n - 1.0;
    if var == 0.0 {
        return Ok(PairedTTest {
            t: f64::NAN,
            df,
            p_value: f64::NAN,
            degenerate: true,
        });
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Input(e.to_string()))?;
    let p_value = 2.0 * dist.cdf(-t.abs());
    Ok(PairedTTest {
        t,
        df,
        p_value,
        degenerate: false,
    })
}

/// Per-instance Hit@1 indicators from ranks.
pub fn hit1_indicators(ranks: &[usize]) -> Vec<f64> {
    ranks.iter().map(|&r| if r == 1 { 1.0 } else { 0.0 }).collect()
}

/// Aligned text table, MRR shown ×100.
pub fn format_table(reports: &[EvalReport]) -> String {
    let width = reports.iter().map(|r| r.model_tag.len()).max().unwrap_or(5).max(5);
    let mut out = format!(
        "{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}  {:>6}  {:>6}\n",
        "model", "Hit@1", "Hit@3", "Hit@10", "MRR@10", "n", "seed"
    );
    for r in reports {
        out += &format!(
            "{:<width$}  {:>7.2}  {:>7.2}  {:>7.2}  {:>7.2}  {:>6}  {:>6}\n",
            r.model_tag,
            r.hit1,
            r.hit3,
            r.hit10,
            100.0 * r.mrr10,
            r.count,
            r.seed
        );
    }
    out
}
