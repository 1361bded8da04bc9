//! Seeded synthetic multimodal classification data with controllable
//! cross-modal structure, plus the three missingness protocols.
//!
//! Construction: every instance draws a label-dependent shared latent and,
//! per modality, an independent label-dependent private latent. Tokens are
//! per-(modality, position) linear views of the strength-weighted latent
//! mix, shifted by a per-modality offset (the modality gap) and perturbed by
//! Gaussian noise. At strength 1 all modalities see the same evidence; at
//! strength 0 each carries independent evidence, so dropping one loses
//! information.

use crate::error::{Error, Result};
use crate::rng::{stream, StreamKind};
use crate::runio::{fmt_f64, parse_f64, parse_usize, read_csv, write_text};
use confsmoe_core::Mat;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Scale of the per-modality offset vectors; creates distinct per-modality
/// clusters so shared-only imputation is measurably off-distribution.
const MODALITY_GAP: f64 = 2.0;
/// Within-class latent spread.
const LATENT_STD: f64 = 0.3;
/// Fraction of instances reserved for the test split (tail of the dataset).
pub const TEST_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_instances: usize,
    pub num_modalities: usize,
    pub seq_len: usize,
    pub dim: usize,
    pub num_classes: usize,
    pub shared_signal_strength: f64,
    pub noise_std: f64,
    pub seed: Option<u64>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_instances: 2500,
            num_modalities: 3,
            seq_len: 8,
            dim: 32,
            num_classes: 3,
            shared_signal_strength: 0.75,
            noise_std: 0.8,
            seed: None,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.num_modalities < 2 {
            return Err(Error::Config("num_modalities must be >= 2".into()));
        }
        if self.num_instances == 0 || self.seq_len == 0 || self.dim == 0 {
            return Err(Error::Config(
                "num_instances, seq_len, dim must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.shared_signal_strength) {
            return Err(Error::Config(
                "shared_signal_strength must lie in [0, 1]".into(),
            ));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("noise_std must be >= 0".into()));
        }
        Ok(())
    }

    pub fn resolved_seed(&self) -> u64 {
        self.seed.unwrap_or(2023)
    }
}

/// The three missingness protocols.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Protocol {
    /// Fixed per-modality missing probabilities (natural-missingness
    /// marginals).
    NaturalFixed { missing_probs: Vec<f64> },
    /// Each modality dropped independently at `rate`; redrawn until at least
    /// one modality stays observed.
    RandomDropout { rate: f64 },
    /// Training masks at `train_rate`; test instances keep exactly
    /// `test_present` observed.
    Asymmetric {
        train_rate: f64,
        test_present: Vec<usize>,
    },
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol::RandomDropout { rate: 0.5 }
    }
}

impl Protocol {
    pub fn validate(&self, num_modalities: usize) -> Result<()> {
        match self {
            Protocol::NaturalFixed { missing_probs } => {
                if missing_probs.len() != num_modalities {
                    return Err(Error::Config(format!(
                        "missing_probs covers {} modalities, dataset has {num_modalities}",
                        missing_probs.len()
                    )));
                }
                if missing_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return Err(Error::Config("missing probabilities must be in [0, 1]".into()));
                }
                if missing_probs.iter().all(|&p| p >= 1.0) {
                    return Err(Error::Config(
                        "at least one modality must be observable".into(),
                    ));
                }
            }
            Protocol::RandomDropout { rate } => {
                if !(0.0..1.0).contains(rate) {
                    return Err(Error::Config(format!(
                        "dropout rate must be in [0, 1), got {rate}"
                    )));
                }
            }
            Protocol::Asymmetric {
                train_rate,
                test_present,
            } => {
                if !(0.0..1.0).contains(train_rate) {
                    return Err(Error::Config(format!(
                        "train_rate must be in [0, 1), got {train_rate}"
                    )));
                }
                if test_present.is_empty() {
                    return Err(Error::Config("test_present must not be empty".into()));
                }
                if test_present.iter().any(|&m| m >= num_modalities) {
                    return Err(Error::Config("test_present index out of range".into()));
                }
            }
        }
        Ok(())
    }
}

/// Per-instance, per-modality token sequences plus the missingness mask
/// (true = observed).
#[derive(Clone, Debug)]
pub struct ModalityBatch {
    /// One s×d matrix per modality.
    pub modalities: Vec<Mat>,
    pub observed: Vec<bool>,
}

pub type MissingnessMask = Vec<bool>;

#[derive(Clone, Debug)]
pub struct Dataset {
    pub instances: Vec<ModalityBatch>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub spec: SynthSpec,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Train/test split: the leading (1 - TEST_FRACTION) of instances train.
    pub fn split_index(&self) -> usize {
        let test = (self.len() as f64 * TEST_FRACTION).round() as usize;
        self.len() - test.min(self.len())
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normal_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Mat {
    Mat::from_fn(rows, cols, |_, _| normal(rng) * std)
}

/// Fully seeded dataset generation: all instances observed, class-balanced
/// labels in seeded-shuffled order.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let seed = spec.resolved_seed();
    let mut g = stream(seed, StreamKind::SynthGlobal, &[]);
    let dz = spec.dim;

    // class prototypes for the shared latent and per-modality private latents
    let shared_centers: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| (0..dz).map(|_| normal(&mut g)).collect())
        .collect();
    let private_centers: Vec<Vec<Vec<f64>>> = (0..spec.num_modalities)
        .map(|_| {
            (0..spec.num_classes)
                .map(|_| (0..dz).map(|_| normal(&mut g)).collect())
                .collect()
        })
        .collect();
    let view_std = 1.0 / (dz as f64).sqrt();
    let views: Vec<Vec<Mat>> = (0..spec.num_modalities)
        .map(|_| {
            (0..spec.seq_len)
                .map(|_| normal_mat(&mut g, dz, spec.dim, view_std))
                .collect()
        })
        .collect();
    let offsets: Vec<Vec<f64>> = (0..spec.num_modalities)
        .map(|_| (0..spec.dim).map(|_| normal(&mut g) * MODALITY_GAP).collect())
        .collect();

    // balanced labels, order shuffled by the global stream
    let mut labels: Vec<usize> = (0..spec.num_instances)
        .map(|i| i % spec.num_classes)
        .collect();
    for i in (1..labels.len()).rev() {
        let j = g.random_range(0..=i);
        labels.swap(i, j);
    }

    let strength = spec.shared_signal_strength;
    let mut instances = Vec::with_capacity(spec.num_instances);
    for (idx, &label) in labels.iter().enumerate() {
        let mut r = stream(seed, StreamKind::SynthInstance, &[idx as u64]);
        let z_shared: Vec<f64> = shared_centers[label]
            .iter()
            .map(|&c| c + LATENT_STD * normal(&mut r))
            .collect();
        let mut modalities = Vec::with_capacity(spec.num_modalities);
        for m in 0..spec.num_modalities {
            let z_private: Vec<f64> = private_centers[m][label]
                .iter()
                .map(|&c| c + LATENT_STD * normal(&mut r))
                .collect();
            let mix: Vec<f64> = z_shared
                .iter()
                .zip(&z_private)
                .map(|(&s, &p)| strength * s + (1.0 - strength) * p)
                .collect();
            let mix_row = Mat::row_vector(&mix);
            let mut tokens = Mat::zeros(spec.seq_len, spec.dim);
            for (t, view) in views[m].iter().enumerate() {
                let projected = mix_row.matmul(view);
                for (j, x) in tokens.row_mut(t).iter_mut().enumerate() {
                    *x = projected[(0, j)] + offsets[m][j] + spec.noise_std * normal(&mut r);
                }
            }
            modalities.push(tokens);
        }
        instances.push(ModalityBatch {
            modalities,
            observed: vec![true; spec.num_modalities],
        });
    }

    Ok(Dataset {
        instances,
        labels,
        num_classes: spec.num_classes,
        spec: spec.clone(),
    })
}

/// Which split a mask is drawn for.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Draws missingness masks per instance. Pure in (protocol, split, seed,
/// instance index): reapplication is idempotent and masks never depend on
/// labels.
pub fn apply_protocol(
    dataset: &mut Dataset,
    protocol: &Protocol,
    split: Split,
    seed: u64,
    instance_range: std::ops::Range<usize>,
) -> Result<()> {
    protocol.validate(dataset.spec.num_modalities)?;
    let kind = match split {
        Split::Train => StreamKind::ProtocolTrain,
        Split::Test => StreamKind::ProtocolTest,
    };
    for idx in instance_range {
        let mut r = stream(seed, kind, &[idx as u64]);
        let m = dataset.spec.num_modalities;
        let mask = match protocol {
            Protocol::NaturalFixed { missing_probs } => {
                draw_until_one_observed(&mut r, m, |r, i| {
                    r.random_range(0.0..1.0) >= missing_probs[i]
                })
            }
            Protocol::RandomDropout { rate } => {
                let rate = *rate;
                draw_until_one_observed(&mut r, m, |r, _| r.random_range(0.0..1.0) >= rate)
            }
            Protocol::Asymmetric {
                train_rate,
                test_present,
            } => match split {
                Split::Train => {
                    let rate = *train_rate;
                    draw_until_one_observed(&mut r, m, |r, _| r.random_range(0.0..1.0) >= rate)
                }
                Split::Test => (0..m).map(|i| test_present.contains(&i)).collect(),
            },
        };
        dataset.instances[idx].observed = mask;
    }
    Ok(())
}

fn draw_until_one_observed(
    rng: &mut ChaCha8Rng,
    num_modalities: usize,
    mut keep: impl FnMut(&mut ChaCha8Rng, usize) -> bool,
) -> Vec<bool> {
    loop {
        let mask: Vec<bool> = (0..num_modalities).map(|i| keep(rng, i)).collect();
        if mask.iter().any(|&b| b) {
            return mask;
        }
    }
}

// ---- persistence -----------------------------------------------------------

pub const DATA_HEADER: &str = "instance_id,modality_id,token_idx,dim_idx,value";
pub const LABELS_HEADER: &str = "instance_id,label";
pub const MASK_HEADER: &str = "instance_id,modality_id,observed";

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    spec: SynthSpec,
    protocol: Protocol,
    num_train: usize,
    num_test: usize,
}

/// Writes `meta.json`, `data.csv`, `labels.csv`, `mask.csv` into `dir`.
pub fn save_dataset(dataset: &Dataset, protocol: &Protocol, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let split = dataset.split_index();
    let meta = DatasetMeta {
        spec: dataset.spec.clone(),
        protocol: protocol.clone(),
        num_train: split,
        num_test: dataset.len() - split,
    };
    write_text(
        &dir.join("meta.json"),
        &serde_json::to_string_pretty(&meta)?,
    )?;

    let mut data = String::from(DATA_HEADER);
    data.push('\n');
    for (i, inst) in dataset.instances.iter().enumerate() {
        for (m, tokens) in inst.modalities.iter().enumerate() {
            for t in 0..tokens.rows() {
                for (dji, &v) in tokens.row(t).iter().enumerate() {
                    data.push_str(&format!("{i},{m},{t},{dji},{}\n", fmt_f64(v)));
                }
            }
        }
    }
    write_text(&dir.join("data.csv"), &data)?;

    let mut labels = String::from(LABELS_HEADER);
    labels.push('\n');
    for (i, &l) in dataset.labels.iter().enumerate() {
        labels.push_str(&format!("{i},{l}\n"));
    }
    write_text(&dir.join("labels.csv"), &labels)?;

    let mut mask = String::from(MASK_HEADER);
    mask.push('\n');
    for (i, inst) in dataset.instances.iter().enumerate() {
        for (m, &obs) in inst.observed.iter().enumerate() {
            mask.push_str(&format!("{i},{m},{}\n", u8::from(obs)));
        }
    }
    write_text(&dir.join("mask.csv"), &mask)?;
    Ok(())
}

/// Reads a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(Dataset, Protocol)> {
    let meta: DatasetMeta =
        serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)?;
    let spec = meta.spec;
    spec.validate()?;
    let n = spec.num_instances;

    let mut instances: Vec<ModalityBatch> = (0..n)
        .map(|_| ModalityBatch {
            modalities: vec![Mat::zeros(spec.seq_len, spec.dim); spec.num_modalities],
            observed: vec![true; spec.num_modalities],
        })
        .collect();

    for row in read_csv(&dir.join("data.csv"), DATA_HEADER)? {
        if row.len() != 5 {
            return Err(Error::DataFormat("data.csv row width".into()));
        }
        let i = parse_usize(&row[0], "data.csv instance_id")?;
        let m = parse_usize(&row[1], "data.csv modality_id")?;
        let t = parse_usize(&row[2], "data.csv token_idx")?;
        let d = parse_usize(&row[3], "data.csv dim_idx")?;
        let v = parse_f64(&row[4], "data.csv value")?;
        if i >= n || m >= spec.num_modalities || t >= spec.seq_len || d >= spec.dim {
            return Err(Error::DataFormat(format!(
                "data.csv index out of range: {i},{m},{t},{d}"
            )));
        }
        instances[i].modalities[m][(t, d)] = v;
    }

    let mut labels = vec![0usize; n];
    for row in read_csv(&dir.join("labels.csv"), LABELS_HEADER)? {
        let i = parse_usize(&row[0], "labels.csv instance_id")?;
        let l = parse_usize(&row[1], "labels.csv label")?;
        if i >= n || l >= spec.num_classes {
            return Err(Error::DataFormat("labels.csv out of range".into()));
        }
        labels[i] = l;
    }

    for row in read_csv(&dir.join("mask.csv"), MASK_HEADER)? {
        let i = parse_usize(&row[0], "mask.csv instance_id")?;
        let m = parse_usize(&row[1], "mask.csv modality_id")?;
        let o = parse_usize(&row[2], "mask.csv observed")?;
        if i >= n || m >= spec.num_modalities || o > 1 {
            return Err(Error::DataFormat("mask.csv out of range".into()));
        }
        instances[i].observed[m] = o == 1;
    }

    let num_classes = spec.num_classes;
    Ok((
        Dataset {
            instances,
            labels,
            num_classes,
            spec,
        },
        meta.protocol,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> SynthSpec {
        SynthSpec {
            num_instances: 60,
            num_modalities: 3,
            seq_len: 2,
            dim: 6,
            num_classes: 3,
            shared_signal_strength: 1.0,
            noise_std: 0.0,
            seed: Some(seed),
        }
    }

    /// Nearest-class-centroid probe on concatenated observed tokens; an
    /// implementation-independent measure of attainable class evidence.
    pub(crate) fn centroid_probe_accuracy(
        train: &[(Vec<f64>, usize)],
        test: &[(Vec<f64>, usize)],
        num_classes: usize,
    ) -> f64 {
        let dim = train[0].0.len();
        let mut centroids = vec![vec![0.0; dim]; num_classes];
        let mut counts = vec![0usize; num_classes];
        for (x, y) in train {
            counts[*y] += 1;
            for (a, b) in centroids[*y].iter_mut().zip(x) {
                *a += b;
            }
        }
        for (c, &n) in centroids.iter_mut().zip(&counts) {
            for a in c {
                *a /= n.max(1) as f64;
            }
        }
        let mut hits = 0;
        for (x, y) in test {
            let mut best = (f64::INFINITY, 0);
            for (c, centroid) in centroids.iter().enumerate() {
                let d: f64 = centroid.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, c);
                }
            }
            if best.1 == *y {
                hits += 1;
            }
        }
        hits as f64 / test.len() as f64
    }

    fn flatten(inst: &ModalityBatch, keep: &[bool]) -> Vec<f64> {
        let mut out = Vec::new();
        for (m, tokens) in inst.modalities.iter().enumerate() {
            if keep[m] {
                out.extend_from_slice(tokens.data());
            }
        }
        out
    }

    #[test]
    fn noiseless_separable_construction_probes_at_100_percent() {
        let ds = generate(&small_spec(7)).unwrap();
        let rows: Vec<(Vec<f64>, usize)> = ds
            .instances
            .iter()
            .zip(&ds.labels)
            .map(|(inst, &y)| (flatten(inst, &[true, true, true]), y))
            .collect();
        let acc = centroid_probe_accuracy(&rows, &rows, ds.num_classes);
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate(&small_spec(11)).unwrap();
        let b = generate(&small_spec(11)).unwrap();
        assert_eq!(a.labels, b.labels);
        for (x, y) in a.instances.iter().zip(&b.instances) {
            for (mx, my) in x.modalities.iter().zip(&y.modalities) {
                assert_eq!(mx.data(), my.data());
            }
        }
        let c = generate(&small_spec(12)).unwrap();
        assert!(
            a.instances[0].modalities[0].data() != c.instances[0].modalities[0].data(),
            "different seeds must differ"
        );
    }

    #[test]
    fn zero_strength_makes_modalities_complementary() {
        // independent per-modality evidence: dropping a modality reduces
        // probe accuracy on a noisy task
        let spec = SynthSpec {
            num_instances: 600,
            shared_signal_strength: 0.0,
            noise_std: 3.5,
            seq_len: 2,
            dim: 8,
            seed: Some(5),
            ..SynthSpec::default()
        };
        let ds = generate(&spec).unwrap();
        let split = ds.split_index();
        let make = |keep: &[bool]| {
            let rows: Vec<(Vec<f64>, usize)> = ds
                .instances
                .iter()
                .zip(&ds.labels)
                .map(|(inst, &y)| (flatten(inst, keep), y))
                .collect();
            let (train, test) = rows.split_at(split);
            centroid_probe_accuracy(train, test, ds.num_classes)
        };
        let full = make(&[true, true, true]);
        let dropped = make(&[true, true, false]);
        assert!(
            full > dropped + 0.02,
            "full {full} should beat dropped {dropped}"
        );
    }

    #[test]
    fn labels_are_class_balanced() {
        let ds = generate(&small_spec(3)).unwrap();
        let mut counts = vec![0usize; ds.num_classes];
        for &l in &ds.labels {
            counts[l] += 1;
        }
        assert_eq!(counts, vec![20, 20, 20]);
    }

    #[test]
    fn protocol_rate_zero_keeps_everything() {
        let mut ds = generate(&small_spec(1)).unwrap();
        let n = ds.len();
        apply_protocol(
            &mut ds,
            &Protocol::RandomDropout { rate: 0.0 },
            Split::Train,
            9,
            0..n,
        )
        .unwrap();
        assert!(ds
            .instances
            .iter()
            .all(|i| i.observed.iter().all(|&o| o)));
    }

    #[test]
    fn asymmetric_test_masks_are_exact() {
        let mut ds = generate(&small_spec(2)).unwrap();
        let n = ds.len();
        let protocol = Protocol::Asymmetric {
            train_rate: 0.5,
            test_present: vec![0, 2],
        };
        apply_protocol(&mut ds, &protocol, Split::Test, 5, 0..n).unwrap();
        for inst in &ds.instances {
            assert_eq!(inst.observed, vec![true, false, true]);
        }
        let bad = Protocol::Asymmetric {
            train_rate: 0.5,
            test_present: vec![],
        };
        assert!(apply_protocol(&mut ds, &bad, Split::Test, 5, 0..1).is_err());
    }

    #[test]
    fn no_instance_loses_every_modality() {
        let mut ds = generate(&small_spec(4)).unwrap();
        let n = ds.len();
        for protocol in [
            Protocol::RandomDropout { rate: 0.9 },
            Protocol::NaturalFixed {
                missing_probs: vec![0.95, 0.9, 0.99],
            },
            Protocol::Asymmetric {
                train_rate: 0.85,
                test_present: vec![1],
            },
        ] {
            apply_protocol(&mut ds, &protocol, Split::Train, 17, 0..n).unwrap();
            assert!(ds.instances.iter().all(|i| i.observed.iter().any(|&o| o)));
        }
    }

    #[test]
    fn protocol_is_idempotent_per_seed_and_split() {
        let mut a = generate(&small_spec(6)).unwrap();
        let n = a.len();
        let protocol = Protocol::RandomDropout { rate: 0.5 };
        apply_protocol(&mut a, &protocol, Split::Train, 21, 0..n).unwrap();
        let first: Vec<Vec<bool>> = a.instances.iter().map(|i| i.observed.clone()).collect();
        apply_protocol(&mut a, &protocol, Split::Train, 21, 0..n).unwrap();
        let second: Vec<Vec<bool>> = a.instances.iter().map(|i| i.observed.clone()).collect();
        assert_eq!(first, second);
    }

    #[test]
    fn dropout_marginals_match_conditional_enumeration() {
        // exact conditional-on-not-all-missing marginal for rate .5, |M|=3:
        // P(m missing | >=1 observed) = 3/7
        let spec = SynthSpec {
            num_instances: 10_000,
            seq_len: 1,
            dim: 2,
            ..small_spec(8)
        };
        let mut ds = generate(&spec).unwrap();
        let n = ds.len();
        apply_protocol(
            &mut ds,
            &Protocol::RandomDropout { rate: 0.5 },
            Split::Train,
            33,
            0..n,
        )
        .unwrap();
        for m in 0..3 {
            let missing = ds.instances.iter().filter(|i| !i.observed[m]).count();
            let frac = missing as f64 / n as f64;
            assert!(
                (frac - 3.0 / 7.0).abs() < 0.02,
                "modality {m}: missing fraction {frac}"
            );
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = generate(&small_spec(13)).unwrap();
        let n = ds.len();
        let protocol = Protocol::RandomDropout { rate: 0.3 };
        apply_protocol(&mut ds, &protocol, Split::Train, 13, 0..n).unwrap();
        save_dataset(&ds, &protocol, dir.path()).unwrap();
        let (back, proto_back) = load_dataset(dir.path()).unwrap();
        assert_eq!(proto_back, protocol);
        assert_eq!(back.labels, ds.labels);
        for (a, b) in back.instances.iter().zip(&ds.instances) {
            assert_eq!(a.observed, b.observed);
            for (ma, mb) in a.modalities.iter().zip(&b.modalities) {
                assert_eq!(ma.data(), mb.data());
            }
        }
    }
}
