//! Deterministic training harness: seeded shuffling and batching, Adam
//! updates on the tape gradients, per-epoch metrics for both splits, and
//! selection telemetry.

use crate::config::ResolvedConfig;
use crate::error::{Error, Result};
use crate::imputation::ModalityPool;
use crate::metrics::{auc_ovr, f1_macro};
use crate::model::{forward_batch, ForwardMode, Model};
use crate::moe::SelectionTrace;
use crate::rng::{stream, StreamKind};
use crate::runio::fmt_f64;
use crate::synth::{apply_protocol, generate, Dataset, Split};
use confsmoe_core::Mat;
use rand::Rng;
use serde::Serialize;
use std::path::Path;

/// One metrics.csv row.
#[derive(Clone, Debug, Serialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: Split,
    pub loss_task: f64,
    pub loss_conf: f64,
    pub loss_lb: f64,
    pub f1_macro: f64,
    pub auc: f64,
}

pub const METRICS_HEADER: &str = "epoch,split,loss_task,loss_conf,loss_lb,f1_macro,auc";

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            match self.split {
                Split::Train => "train",
                Split::Test => "test",
            },
            fmt_f64(self.loss_task),
            fmt_f64(self.loss_conf),
            fmt_f64(self.loss_lb),
            fmt_f64(self.f1_macro),
            fmt_f64(self.auc),
        )
    }
}

/// Adam with bias correction; state aligned with `Model::params()` order.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[(usize, usize)]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Mat], grads: &[Mat]) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(&mut self.v))
        {
            let pd = p.data_mut();
            let gd = g.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gd[i];
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gd[i] * gd[i];
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Train/test view over one dataset.
pub struct SplitDataset {
    pub dataset: Dataset,
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
}

/// Generates the dataset from config and draws protocol masks per split.
pub fn prepare_dataset(cfg: &ResolvedConfig) -> Result<SplitDataset> {
    let mut dataset = generate(&cfg.config.synth)?;
    let split = dataset.split_index();
    let n = dataset.len();
    let seed = cfg.synth_seed();
    apply_protocol(&mut dataset, &cfg.config.protocol, Split::Train, seed, 0..split)?;
    apply_protocol(&mut dataset, &cfg.config.protocol, Split::Test, seed, split..n)?;
    Ok(SplitDataset {
        dataset,
        train_ids: (0..split).collect(),
        test_ids: (split..n).collect(),
    })
}

/// Observed-instance pools per modality, train split only.
pub fn build_pools(data: &SplitDataset) -> Vec<ModalityPool> {
    let m_count = data.dataset.spec.num_modalities;
    (0..m_count)
        .map(|m| ModalityPool {
            instances: data
                .train_ids
                .iter()
                .map(|&id| &data.dataset.instances[id])
                .filter(|inst| inst.observed[m])
                .map(|inst| inst.modalities[m].clone())
                .collect(),
        })
        .collect()
}

pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<MetricsRow>,
    pub trace: SelectionTrace,
}

fn evaluate(
    model: &Model,
    data: &SplitDataset,
    ids: &[usize],
    pools: &[ModalityPool],
    split: Split,
    epoch: usize,
    seed: u64,
) -> Result<MetricsRow> {
    let batch = model.cfg.batch_size;
    let mut y_pred = Vec::with_capacity(ids.len());
    let mut scores = Mat::zeros(ids.len(), model.num_classes);
    let (mut task, mut conf, mut lb) = (0.0, 0.0, 0.0);
    let mode = ForwardMode {
        train: false,
        epoch,
        step_tag: 0,
        base_seed: seed,
    };
    let mut at = 0;
    for chunk in ids.chunks(batch) {
        let out = forward_batch(model, &data.dataset, chunk, pools, mode, false, None)?;
        let w = chunk.len() as f64 / ids.len() as f64;
        task += out.loss_task * w;
        conf += out.loss_conf * w;
        lb += out.loss_lb * w;
        for b in 0..chunk.len() {
            let row = out.probs.row(b);
            scores.row_mut(at + b).copy_from_slice(row);
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probs"))
                .map(|(i, _)| i)
                .expect("nonempty row");
            y_pred.push(pred);
        }
        at += chunk.len();
    }
    let y_true: Vec<usize> = ids.iter().map(|&id| data.dataset.labels[id]).collect();
    Ok(MetricsRow {
        epoch,
        split,
        loss_task: task,
        loss_conf: conf,
        loss_lb: lb,
        f1_macro: f1_macro(&y_true, &y_pred, model.num_classes)?,
        auc: auc_ovr(&y_true, &scores, model.num_classes)?,
    })
}

/// Full training run: epoch-0 evaluation rows, then per epoch one train row
/// (accumulated over the optimization steps) and one test row.
pub fn train(cfg: &ResolvedConfig, data: &SplitDataset) -> Result<TrainOutcome> {
    let spec = &data.dataset.spec;
    let mcfg = &cfg.config.model;
    let mut model = Model::init(
        mcfg,
        spec.num_modalities,
        spec.dim,
        spec.seq_len,
        spec.num_classes,
    )?;
    let pools = build_pools(data);
    for (m, pool) in pools.iter().enumerate() {
        if pool.is_empty() && mcfg.impute != crate::config::ImputeMode::Off {
            return Err(Error::Imputation(format!(
                "modality {m} is never observed in the train split; pre-imputation impossible"
            )));
        }
    }
    let seed = cfg.model_seed();
    let shapes: Vec<(usize, usize)> = model.params().iter().map(|p| p.shape()).collect();
    let mut adam = Adam::new(mcfg.learning_rate, &shapes);
    let mut trace = SelectionTrace::new(mcfg.num_experts);
    let mut metrics = Vec::new();

    metrics.push(evaluate(&model, data, &data.train_ids, &pools, Split::Train, 0, seed)?);
    metrics.push(evaluate(&model, data, &data.test_ids, &pools, Split::Test, 0, seed)?);

    let mut step_tag = 0u64;
    for epoch in 1..=mcfg.epochs {
        let mut order = data.train_ids.clone();
        let mut shuffle_rng = stream(seed, StreamKind::EpochShuffle, &[epoch as u64]);
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }

        let n_train = order.len();
        let (mut task, mut conf, mut lb) = (0.0, 0.0, 0.0);
        let mut y_pred = Vec::with_capacity(n_train);
        let mut y_true = Vec::with_capacity(n_train);
        let mut scores = Mat::zeros(n_train, model.num_classes);
        let mut at = 0;

        for chunk in order.chunks(mcfg.batch_size) {
            step_tag += 1;
            let mode = ForwardMode {
                train: true,
                epoch,
                step_tag,
                base_seed: seed,
            };
            let out = forward_batch(&model, &data.dataset, chunk, &pools, mode, false, None)?;
            let loss_var = out.loss_var.expect("training forward builds the loss");
            let mut graph = out.graph;
            let total = graph.value(loss_var)[(0, 0)];
            if !total.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {epoch}, step {step_tag}: task={} conf={} lb={}",
                    out.loss_task, out.loss_conf, out.loss_lb
                )));
            }
            graph.backward(loss_var);
            let grads: Vec<Mat> = out.param_vars.iter().map(|&v| graph.grad(v)).collect();
            drop(graph);
            adam.step(&mut model.params_mut(), &grads);

            trace.record(&out.gate, epoch - 1);
            let w = chunk.len() as f64 / n_train as f64;
            task += out.loss_task * w;
            conf += out.loss_conf * w;
            lb += out.loss_lb * w;
            for b in 0..chunk.len() {
                let row = out.probs.row(b);
                scores.row_mut(at + b).copy_from_slice(row);
                let pred = row
                    .iter()
                    .enumerate()
                    .max_by(|x, y| x.1.partial_cmp(y.1).expect("finite probs"))
                    .map(|(i, _)| i)
                    .expect("nonempty row");
                y_pred.push(pred);
                y_true.push(data.dataset.labels[chunk[b]]);
            }
            at += chunk.len();
        }

        metrics.push(MetricsRow {
            epoch,
            split: Split::Train,
            loss_task: task,
            loss_conf: conf,
            loss_lb: lb,
            f1_macro: f1_macro(&y_true, &y_pred, model.num_classes)?,
            auc: auc_ovr(&y_true, &scores, model.num_classes)?,
        });
        metrics.push(evaluate(&model, data, &data.test_ids, &pools, Split::Test, epoch, seed)?);
    }

    Ok(TrainOutcome {
        model,
        metrics,
        trace,
    })
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    out
}

/// Runs training for a resolved config and writes metrics.csv,
/// selection.csv, and run_meta.json into the run directory.
pub fn run_training(cfg: &ResolvedConfig, dir: &Path) -> Result<TrainOutcome> {
    let data = load_or_generate(cfg, dir)?;
    let outcome = train(cfg, &data)?;
    write_run_outputs(cfg, dir, &outcome)?;
    Ok(outcome)
}

/// Loads `<dir>/dataset/` when present (written by the generate command),
/// otherwise synthesizes from config.
pub fn load_or_generate(cfg: &ResolvedConfig, dir: &Path) -> Result<SplitDataset> {
    let ds_dir = dir.join("dataset");
    if ds_dir.join("meta.json").is_file() {
        let (dataset, _) = crate::synth::load_dataset(&ds_dir)?;
        let split = dataset.split_index();
        let n = dataset.len();
        Ok(SplitDataset {
            dataset,
            train_ids: (0..split).collect(),
            test_ids: (split..n).collect(),
        })
    } else {
        prepare_dataset(cfg)
    }
}

pub fn write_run_outputs(cfg: &ResolvedConfig, dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    crate::runio::write_text(&dir.join("metrics.csv"), &metrics_csv(&outcome.metrics))?;
    crate::runio::write_text(&dir.join("selection.csv"), &outcome.trace.to_csv())?;
    let meta = serde_json::to_string_pretty(&cfg.config)?;
    crate::runio::write_text(&dir.join("run_meta.json"), &meta)?;
    Ok(())
}

/// Final-epoch test row of a metrics set.
pub fn final_test_row(metrics: &[MetricsRow]) -> Option<&MetricsRow> {
    metrics
        .iter()
        .rev()
        .find(|r| r.split == Split::Test)
}
