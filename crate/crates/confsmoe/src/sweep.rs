//! Sweep runner: cartesian product of gates × variants × impute modes ×
//! seeds over a base config, executed by a bounded worker pool, aggregated
//! into summary.csv. Completed run directories are skipped on rerun.

use crate::config::{ExperimentConfig, ImputeMode, ResolvedConfig, Variant};
use crate::error::{Error, Result};
use crate::gating::GateKind;
use crate::moe::SelectionTrace;
use crate::runio::{fmt_f64, parse_f64, parse_usize, read_csv, write_text};
use crate::train::{run_training, METRICS_HEADER};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::path::Path;
use std::sync::Mutex;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub base: ExperimentConfig,
    pub gates: Vec<GateKind>,
    #[serde(default)]
    pub variants: Vec<Variant>,
    #[serde(default)]
    pub impute_modes: Vec<ImputeMode>,
    pub seeds: Vec<u64>,
}

impl SweepSpec {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec: SweepSpec = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.gates.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config(
                "sweep needs at least one gate and one seed".into(),
            ));
        }
        self.base.validate()
    }

    /// All runs of the sweep, in deterministic order.
    pub fn jobs(&self) -> Vec<SweepJob> {
        let variants = if self.variants.is_empty() {
            vec![self.base.model.variant]
        } else {
            self.variants.clone()
        };
        let imputes = if self.impute_modes.is_empty() {
            vec![self.base.model.impute]
        } else {
            self.impute_modes.clone()
        };
        let mut out = Vec::new();
        for &gate in &self.gates {
            for &variant in &variants {
                for &impute in &imputes {
                    for &seed in &self.seeds {
                        out.push(SweepJob {
                            gate,
                            variant,
                            impute,
                            seed,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Copy, Clone, Debug)]
pub struct SweepJob {
    pub gate: GateKind,
    pub variant: Variant,
    pub impute: ImputeMode,
    pub seed: u64,
}

impl SweepJob {
    pub fn run_name(&self) -> String {
        format!(
            "{}_{}_{}_seed{}",
            self.gate.as_str(),
            self.variant.as_str(),
            self.impute.as_str(),
            self.seed
        )
    }

    pub fn config(&self, base: &ExperimentConfig, run_dir: &Path) -> ResolvedConfig {
        let mut cfg = base.clone();
        cfg.model.gate = self.gate;
        cfg.model.variant = self.variant;
        cfg.model.impute = self.impute;
        cfg.model.seed = Some(self.seed);
        cfg.synth.seed = Some(self.seed);
        cfg.resolve(None, Some(run_dir.to_path_buf()), None)
    }
}

pub const SUMMARY_HEADER: &str =
    "gate,variant,impute,seed,final_f1,final_auc,final_usage_entropy,oscillation";

#[derive(Clone, Debug)]
pub struct SummaryRow {
    pub gate: GateKind,
    pub variant: Variant,
    pub impute: ImputeMode,
    pub seed: u64,
    pub final_f1: f64,
    pub final_auc: f64,
    pub final_usage_entropy: f64,
    pub oscillation: f64,
}

impl SummaryRow {
    fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.gate.as_str(),
            self.variant.as_str(),
            self.impute.as_str(),
            self.seed,
            fmt_f64(self.final_f1),
            fmt_f64(self.final_auc),
            fmt_f64(self.final_usage_entropy),
            fmt_f64(self.oscillation),
        )
    }
}

fn run_is_complete(dir: &Path) -> bool {
    dir.join("metrics.csv").is_file()
        && dir.join("selection.csv").is_file()
        && dir.join("run_meta.json").is_file()
}

/// Reads the final test F1/AUC and trace statistics back from a finished
/// run directory, keeping aggregation purely file-driven.
pub fn summarize_run(job: &SweepJob, dir: &Path) -> Result<SummaryRow> {
    let mut final_f1 = None;
    let mut final_auc = None;
    for row in read_csv(&dir.join("metrics.csv"), METRICS_HEADER)? {
        if row.len() != 7 {
            return Err(Error::DataFormat("metrics.csv row width".into()));
        }
        if row[1] == "test" {
            final_f1 = Some(parse_f64(&row[5], "metrics.csv f1")?);
            final_auc = Some(parse_f64(&row[6], "metrics.csv auc")?);
        }
    }
    let (final_f1, final_auc) = match (final_f1, final_auc) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::DataFormat(format!(
                "{}: no test rows in metrics.csv",
                dir.display()
            )))
        }
    };

    let rows = read_csv(&dir.join("selection.csv"), "epoch,expert_id,count")?;
    let mut per_epoch: Vec<Vec<u64>> = Vec::new();
    let mut num_experts = 0usize;
    for row in &rows {
        let epoch = parse_usize(&row[0], "selection.csv epoch")?;
        let expert = parse_usize(&row[1], "selection.csv expert")?;
        let count = parse_usize(&row[2], "selection.csv count")? as u64;
        num_experts = num_experts.max(expert + 1);
        while per_epoch.len() < epoch {
            per_epoch.push(Vec::new());
        }
        let slot = &mut per_epoch[epoch - 1];
        while slot.len() <= expert {
            slot.push(0);
        }
        slot[expert] = count;
    }
    for slot in &mut per_epoch {
        while slot.len() < num_experts {
            slot.push(0);
        }
    }
    let trace = SelectionTrace::from_counts(per_epoch, num_experts)?;
    let final_usage_entropy = if trace.num_epochs() > 0 {
        trace.usage_entropy(trace.num_epochs() - 1)?
    } else {
        f64::NAN
    };
    let oscillation = if trace.num_epochs() >= 2 {
        trace.selection_oscillation()?
    } else {
        f64::NAN
    };

    Ok(SummaryRow {
        gate: job.gate,
        variant: job.variant,
        impute: job.impute,
        seed: job.seed,
        final_f1,
        final_auc,
        final_usage_entropy,
        oscillation,
    })
}

pub struct SweepOutcome {
    pub completed: Vec<SummaryRow>,
    pub failures: Vec<(String, String)>,
    pub skipped: usize,
}

/// Executes the sweep with `jobs` worker threads; each child owns its run
/// directory. Failures are recorded and the sweep continues.
pub fn run_sweep(spec: &SweepSpec, out_dir: &Path, jobs: usize) -> Result<SweepOutcome> {
    std::fs::create_dir_all(out_dir.join("runs"))?;
    let all_jobs = spec.jobs();
    let queue: Mutex<VecDeque<(usize, SweepJob)>> =
        Mutex::new(all_jobs.iter().copied().enumerate().collect());
    let results: Mutex<Vec<(usize, std::result::Result<(), String>, bool)>> =
        Mutex::new(Vec::new());

    let workers = jobs.max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let item = queue.lock().expect("queue lock").pop_front();
                let Some((idx, job)) = item else { break };
                let run_dir = out_dir.join("runs").join(job.run_name());
                let skipped = run_is_complete(&run_dir);
                let status = if skipped {
                    Ok(())
                } else {
                    let cfg = job.config(&spec.base, &run_dir);
                    run_training(&cfg, &run_dir).map(|_| ()).map_err(|e| e.to_string())
                };
                results
                    .lock()
                    .expect("results lock")
                    .push((idx, status, skipped));
            });
        }
    });

    let mut completed = Vec::new();
    let mut failures = Vec::new();
    let mut skipped = 0;
    let mut statuses = results.into_inner().expect("results");
    statuses.sort_by_key(|&(idx, _, _)| idx);
    for (idx, status, was_skipped) in statuses {
        let job = all_jobs[idx];
        let run_dir = out_dir.join("runs").join(job.run_name());
        match status {
            Ok(()) => {
                if was_skipped {
                    skipped += 1;
                }
                match summarize_run(&job, &run_dir) {
                    Ok(row) => completed.push(row),
                    Err(e) => failures.push((job.run_name(), e.to_string())),
                }
            }
            Err(e) => failures.push((job.run_name(), e)),
        }
    }

    let mut summary = String::from(SUMMARY_HEADER);
    summary.push('\n');
    for row in &completed {
        summary.push_str(&row.to_csv_line());
        summary.push('\n');
    }
    write_text(&out_dir.join("summary.csv"), &summary)?;

    if !failures.is_empty() {
        let mut text = String::from("run,error\n");
        for (name, err) in &failures {
            text.push_str(&format!("{name},{}\n", err.replace('\n', " ")));
        }
        write_text(&out_dir.join("failures.csv"), &text)?;
    }

    Ok(SweepOutcome {
        completed,
        failures,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn job_grid_is_the_cartesian_product() {
        let spec = SweepSpec {
            base: ExperimentConfig::default(),
            gates: GateKind::ALL.to_vec(),
            variants: vec![],
            impute_modes: vec![],
            seeds: vec![2023, 2024, 2025],
        };
        assert_eq!(spec.jobs().len(), 18);
        let names: Vec<String> = spec.jobs().iter().map(|j| j.run_name()).collect();
        assert!(names.contains(&"softmax_lb_token_level_full_seed2024".to_string()));
    }

    #[test]
    fn module_dropout_axis_covers_the_five_variants() {
        let spec = SweepSpec {
            base: ExperimentConfig::default(),
            gates: vec![GateKind::ConfNet, GateKind::Softmax],
            variants: vec![],
            impute_modes: vec![ImputeMode::Full, ImputeMode::PreOnly, ImputeMode::Off],
            seeds: vec![2023],
        };
        let names: Vec<String> = spec.jobs().iter().map(|j| j.run_name()).collect();
        // full model, w/o Conf, w/o impute, w/o post-impute, w/o impute & Conf
        for expected in [
            "confnet_token_level_full_seed2023",
            "softmax_token_level_full_seed2023",
            "confnet_token_level_off_seed2023",
            "confnet_token_level_pre_only_seed2023",
            "softmax_token_level_off_seed2023",
        ] {
            assert!(names.contains(&expected.to_string()), "{expected}");
        }
    }
}
