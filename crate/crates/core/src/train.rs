//! Anchor masking, the masked L1 loss, AdamW, the step schedule and the
//! multi-dataset training loop.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::augment::{augment, AugmentationConfig};
use crate::data::batching::{anchors_for_ratio, make_batches, AnchorSpec};
use crate::data::{DatasetDescriptor, Sample};
use crate::error::{Result, TufaError};
use crate::geometry::{compute_mean_shape, AffineTransform, Point};
use crate::model::{Model, PromptSource};

/// Anchor landmarks kept for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub dataset_id: String,
    /// Sorted, unique, each `< N_D`.
    pub indices: Vec<usize>,
}

/// Draws the anchor set of one sample uniformly without replacement.
/// A ratio of zero keeps every landmark.
pub fn mask_anchors<R: Rng + ?Sized>(descriptor: &DatasetDescriptor, spec: AnchorSpec, rng: &mut R) -> Result<MaskPlan> {
    let n_d = descriptor.n_landmarks;
    let n_a = match spec {
        AnchorSpec::Ratio(r) if r == 0.0 => n_d,
        AnchorSpec::Ratio(r) => anchors_for_ratio(n_d, r)?,
        AnchorSpec::Count(n) => n,
    };
    if n_a == 0 {
        return Err(TufaError::InvalidArgument("anchor count must be at least 1".into()));
    }
    if n_a > n_d {
        return Err(TufaError::InvalidArgument(format!(
            "{n_a} anchors requested from `{}` with {n_d} landmarks",
            descriptor.id
        )));
    }
    let indices = if n_a == n_d {
        (0..n_d).collect()
    } else {
        let mut v = rand::seq::index::sample(rng, n_d, n_a).into_vec();
        v.sort_unstable();
        v
    };
    Ok(MaskPlan {
        dataset_id: descriptor.id.clone(),
        indices,
    })
}

/// Mean over valid `(sample, anchor)` pairs of `|Δx| + |Δy|`.
pub fn l1_landmark_loss(predicted: &[Vec<Point>], target: &[Vec<Point>], valid: &[Vec<bool>]) -> Result<f64> {
    if predicted.len() != target.len() || predicted.len() != valid.len() {
        return Err(TufaError::ShapeMismatch("batch sizes differ".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (k, ((p, t), v)) in predicted.iter().zip(target).zip(valid).enumerate() {
        if p.len() != t.len() || p.len() != v.len() {
            return Err(TufaError::ShapeMismatch(format!("anchor counts differ in sample {k}")));
        }
        for i in 0..p.len() {
            if v[i] {
                total += (p[i][0] - t[i][0]).abs() + (p[i][1] - t[i][1]).abs();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(TufaError::Empty("no valid anchors in batch".into()));
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    /// Epochs at which the learning rate is multiplied by `decay`.
    pub milestones: Vec<usize>,
    pub decay: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub anchors: AnchorSpec,
    pub batch_size: usize,
    pub seed: u64,
    /// Threads computing per-sample gradients; results do not depend on it.
    pub workers: usize,
    /// Random augmentation of training samples; `None` trains on the raw crops.
    pub augmentation: Option<AugmentationConfig>,
    /// Keep every alignment embedding at its current value.
    pub freeze_alignment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            base_lr: 1e-4,
            milestones: vec![80, 90],
            decay: 0.1,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            anchors: AnchorSpec::default(),
            batch_size: 16,
            seed: 0,
            workers: 1,
            augmentation: None,
            freeze_alignment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TufaError::InvalidArgument(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad(format!("learning rate {} must be finite and non-negative", self.base_lr));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad(format!("decay factor {} outside (0, 1]", self.decay));
        }
        if self.weight_decay < 0.0 {
            return bad("weight decay must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("optimizer moments need betas in [0, 1) and eps > 0".into());
        }
        for w in self.milestones.windows(2) {
            if w[1] <= w[0] {
                return bad("milestones must be strictly increasing".into());
            }
        }
        if self.milestones.last().is_some_and(|&m| m >= self.epochs) {
            return bad("milestones must be smaller than the epoch count".into());
        }
        match self.anchors {
            AnchorSpec::Ratio(r) if !(0.0..1.0).contains(&r) => return bad(format!("masking ratio {r} outside [0, 1)")),
            AnchorSpec::Count(0) => return bad("anchor count must be at least 1".into()),
            _ => {}
        }
        if let Some(a) = &self.augmentation {
            a.validate()?;
        }
        Ok(())
    }
}

/// Step schedule: `base_lr · decay^(milestones passed)`.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    let passed = config.milestones.iter().filter(|&&m| epoch >= m).count();
    config.base_lr * config.decay.powi(passed as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Moments {
    m: Array2<f64>,
    v: Array2<f64>,
    t: i32,
}

/// Adam with decoupled weight decay. Parameters without a gradient in a
/// step are left untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: &TrainConfig) -> Self {
        AdamW {
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            weight_decay: config.weight_decay,
            state: BTreeMap::new(),
        }
    }

    /// Biases, norm gains and alignment embeddings are not decayed.
    fn decays(name: &str, value: &Array2<f64>) -> bool {
        value.nrows() > 1 && !name.starts_with("align.")
    }

    pub fn step(&mut self, params: &mut crate::model::ParamStore, grads: &BTreeMap<String, Array2<f64>>, lr: f64) {
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: Array2::zeros(g.dim()),
                v: Array2::zeros(g.dim()),
                t: 0,
            });
            st.t += 1;
            let (b1, b2) = (self.beta1, self.beta2);
            let c1 = 1.0 - b1.powi(st.t);
            let c2 = 1.0 - b2.powi(st.t);
            let decay = if Self::decays(name, p) { lr * self.weight_decay } else { 0.0 };
            ndarray::Zip::from(&mut *p)
                .and(&mut st.m)
                .and(&mut st.v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= decay * *p;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                });
        }
    }
}

/// One sample of a batch together with its anchors.
#[derive(Debug, Clone, Copy)]
pub struct BatchEntry<'a> {
    pub sample: &'a Sample,
    pub plan: &'a MaskPlan,
}

/// Summed loss, valid anchor count and parameter gradients of a batch.
/// `loss` and `grads` are already divided by `valid`.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub loss: f64,
    pub valid: usize,
    pub grads: BTreeMap<String, Array2<f64>>,
}

struct SampleGrad {
    loss_sum: f64,
    valid: usize,
    grads: Vec<(String, Array2<f64>)>,
}

fn sample_gradient(model: &Model, entry: BatchEntry, freeze_alignment: bool, with_grads: bool) -> Result<SampleGrad> {
    let idx = &entry.plan.indices;
    let source = PromptSource::Dataset {
        id: &entry.plan.dataset_id,
        anchors: Some(idx),
    };
    let mut fg = model.build(&entry.sample.image, source)?;
    let lm = &entry.sample.landmarks;
    if let Some(&bad) = idx.iter().find(|&&i| i >= lm.len()) {
        return Err(TufaError::IndexOutOfRange { index: bad, len: lm.len() });
    }
    let mut target = Array2::zeros((idx.len(), 2));
    let mut mask = Vec::with_capacity(idx.len());
    for (r, &i) in idx.iter().enumerate() {
        target[[r, 0]] = lm.coords()[i][0];
        target[[r, 1]] = lm.coords()[i][1];
        mask.push(lm.is_valid(i));
    }
    let valid = mask.iter().filter(|&&m| m).count();
    let loss = fg.graph.masked_l1_sum(fg.output, &target, &mask);
    let loss_sum = fg.graph.value(loss)[[0, 0]];
    let mut grads = Vec::new();
    if with_grads {
        let mut g = fg.graph.backward(loss);
        let named: Vec<(String, crate::autodiff::NodeId)> =
            fg.graph.named_nodes().map(|(n, id)| (n.to_string(), id)).collect();
        for (name, id) in named {
            if freeze_alignment && name.starts_with("align.") {
                continue;
            }
            if let Some(v) = g.take(id) {
                grads.push((name, v));
            }
        }
    }
    drop(fg);
    Ok(SampleGrad { loss_sum, valid, grads })
}

fn batch_reduce(model: &Model, entries: &[BatchEntry], freeze_alignment: bool, with_grads: bool) -> Result<BatchGradients> {
    if entries.is_empty() {
        return Err(TufaError::Empty("empty batch".into()));
    }
    let per_sample: Vec<Result<SampleGrad>> = entries
        .par_iter()
        .map(|&e| sample_gradient(model, e, freeze_alignment, with_grads))
        .collect();
    // fixed-order reduction keeps results independent of thread count
    let mut loss_sum = 0.0;
    let mut valid = 0usize;
    let mut grads: BTreeMap<String, Array2<f64>> = BTreeMap::new();
    for r in per_sample {
        let s = r?;
        loss_sum += s.loss_sum;
        valid += s.valid;
        for (name, g) in s.grads {
            match grads.get_mut(&name) {
                Some(acc) => *acc += &g,
                None => {
                    grads.insert(name, g);
                }
            }
        }
    }
    if valid == 0 {
        return Err(TufaError::Empty("no valid anchors in batch".into()));
    }
    let inv = 1.0 / valid as f64;
    for g in grads.values_mut() {
        g.mapv_inplace(|v| v * inv);
    }
    Ok(BatchGradients {
        loss: loss_sum * inv,
        valid,
        grads,
    })
}

/// Loss and gradients of a batch without updating anything.
pub fn batch_gradients(model: &Model, entries: &[BatchEntry], freeze_alignment: bool) -> Result<BatchGradients> {
    batch_reduce(model, entries, freeze_alignment, true)
}

/// Loss of a batch (forward passes only).
pub fn batch_loss(model: &Model, entries: &[BatchEntry]) -> Result<f64> {
    Ok(batch_reduce(model, entries, true, false)?.loss)
}

/// One optimizer step on a batch. Returns the loss before the update.
pub fn train_step(
    model: &mut Model,
    entries: &[BatchEntry],
    optimizer: &mut AdamW,
    lr: f64,
    freeze_alignment: bool,
) -> Result<f64> {
    let bg = batch_gradients(model, entries, freeze_alignment)?;
    if !bg.loss.is_finite() {
        let ids: Vec<&str> = entries.iter().map(|e| e.sample.source.as_str()).collect();
        return Err(TufaError::NonFinite(format!("loss of batch [{}]", ids.join(", "))));
    }
    optimizer.step(&mut model.params, &bg.grads, lr);
    Ok(bg.loss)
}

/// Training samples of one registered dataset.
#[derive(Debug, Clone, Copy)]
pub struct TrainSet<'a> {
    pub dataset_id: &'a str,
    pub samples: &'a [Sample],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean over all valid anchors seen in the epoch.
    pub mean_loss: f64,
    pub wall_time_s: f64,
}

fn mix(seed: u64, a: u64, b: u64, c: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F) ^ c.wrapping_mul(0x1656_67B1_9E37_79F9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Trains `model` in place. `on_epoch` runs after every epoch (logging,
/// checkpoints); an error from it stops training.
pub fn train<F>(model: &mut Model, sets: &[TrainSet], config: &TrainConfig, mut on_epoch: F) -> Result<Vec<EpochLog>>
where
    F: FnMut(&EpochLog, &Model) -> Result<()>,
{
    config.validate()?;
    if sets.is_empty() || sets.iter().all(|s| s.samples.is_empty()) {
        return Err(TufaError::Empty("no training samples".into()));
    }
    for s in sets {
        let d = model.registry.get(s.dataset_id)?;
        if let Some(k) = s.samples.iter().position(|x| x.landmarks.len() != d.n_landmarks) {
            return Err(TufaError::CountMismatch {
                expected: d.n_landmarks,
                found: s.samples[k].landmarks.len(),
                context: format!("training sample {k} of `{}`", s.dataset_id),
            });
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| TufaError::InvalidArgument(format!("thread pool: {e}")))?;
    let pools: Vec<(&str, usize)> = sets.iter().map(|s| (s.dataset_id, s.samples.len())).collect();
    let aug = config
        .augmentation
        .as_ref()
        .map(|a| a.scaled_to(model.config.image_size.0.max(model.config.image_size.1)));
    let mut opt = AdamW::new(config);
    let mut logs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let lr = lr_schedule(epoch, config);
        let batches = make_batches(
            &model.registry,
            &pools,
            config.batch_size,
            config.anchors,
            mix(config.seed, epoch as u64, 0, 0),
        )?;
        let mut loss_total = 0.0;
        let mut valid_total = 0usize;
        for (bi, batch) in batches.iter().enumerate() {
            let augmented: Vec<Sample>;
            let samples: Vec<&Sample> = match &aug {
                None => batch.items.iter().map(|it| &sets[it.pool].samples[it.sample]).collect(),
                Some(a) => {
                    let reg = &model.registry;
                    augmented = pool.install(|| {
                        batch
                            .items
                            .par_iter()
                            .map(|it| {
                                let seed = mix(config.seed ^ a.seed, epoch as u64 + 1, it.pool as u64 + 1, it.sample as u64 + 1);
                                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                                let d = reg.get(sets[it.pool].dataset_id)?;
                                augment(&sets[it.pool].samples[it.sample], a, d, &mut rng)
                            })
                            .collect::<Result<Vec<_>>>()
                    })?;
                    augmented.iter().collect()
                }
            };
            let entries: Vec<BatchEntry> = batch
                .items
                .iter()
                .zip(&samples)
                .map(|(it, s)| BatchEntry { sample: s, plan: &it.plan })
                .collect();
            let bg = pool.install(|| batch_gradients(model, &entries, config.freeze_alignment))?;
            if !bg.loss.is_finite() {
                let ids: Vec<&str> = samples.iter().map(|s| s.source.as_str()).collect();
                return Err(TufaError::NonFinite(format!(
                    "loss at epoch {epoch}, batch {bi} [{}]",
                    ids.join(", ")
                )));
            }
            opt.step(&mut model.params, &bg.grads, lr);
            loss_total += bg.loss * bg.valid as f64;
            valid_total += bg.valid;
        }
        let log = EpochLog {
            epoch,
            lr,
            mean_loss: loss_total / valid_total.max(1) as f64,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        on_epoch(&log, model)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Returns `descriptor` with its mean shape computed from crop-frame
/// landmarks of `samples`.
pub fn with_mean_shape(mut descriptor: DatasetDescriptor, samples: &[Sample]) -> Result<DatasetDescriptor> {
    let sets: Vec<_> = samples.iter().map(|s| s.landmarks.clone()).collect();
    if let Some(k) = sets.iter().position(|s| s.len() != descriptor.n_landmarks) {
        return Err(TufaError::CountMismatch {
            expected: descriptor.n_landmarks,
            found: sets[k].len(),
            context: format!("sample {k} of `{}`", descriptor.id),
        });
    }
    let ident = vec![AffineTransform::identity(); sets.len()];
    descriptor.mean_shape = Some(compute_mean_shape(&descriptor.id, &sets, &ident)?);
    descriptor.validate()?;
    Ok(descriptor)
}

/// Registers a new dataset from `shots` (fresh mean shape and zero alignment
/// embedding) on a copy of `base` and fine-tunes the whole model on them.
pub fn fewshot_finetune(
    base: &Model,
    descriptor: DatasetDescriptor,
    shots: &[Sample],
    config: &TrainConfig,
) -> Result<(Model, Vec<EpochLog>)> {
    if shots.is_empty() {
        return Err(TufaError::Empty("few-shot training needs at least one sample".into()));
    }
    let d = with_mean_shape(descriptor, shots)?;
    let id = d.id.clone();
    let mut model = base.clone();
    model.register_dataset(d)?;
    model.reset_alignment(&id)?;
    let logs = train(
        &mut model,
        &[TrainSet {
            dataset_id: &id,
            samples: shots,
        }],
        config,
        |_, _| Ok(()),
    )?;
    Ok((model, logs))
}

/// One analytic-versus-numeric gradient comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientProbe {
    pub name: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradientProbe {
    pub fn relative_error(&self, floor: f64) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(floor)
    }
}

/// Central finite differences of the batch loss at `per_tensor` random
/// entries of every parameter that receives a gradient.
pub fn gradient_check(model: &Model, entries: &[BatchEntry], step: f64, per_tensor: usize, seed: u64) -> Result<Vec<GradientProbe>> {
    let bg = batch_gradients(model, entries, false)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe_model = model.clone();
    let mut out = Vec::new();
    for (name, g) in &bg.grads {
        let (rows, cols) = g.dim();
        for _ in 0..per_tensor.min(rows * cols) {
            let (r, c) = (rng.random_range(0..rows), rng.random_range(0..cols));
            let orig = model.params.expect(name)[[r, c]];
            probe_model.params.get_mut(name).expect("param")[[r, c]] = orig + step;
            let up = batch_loss(&probe_model, entries)?;
            probe_model.params.get_mut(name).expect("param")[[r, c]] = orig - step;
            let down = batch_loss(&probe_model, entries)?;
            probe_model.params.get_mut(name).expect("param")[[r, c]] = orig;
            out.push(GradientProbe {
                name: name.clone(),
                row: r,
                col: c,
                analytic: g[[r, c]],
                numeric: (up - down) / (2.0 * step),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_generate, Scheme};
    use crate::model::ModelConfig;

    fn toy_setup(count: usize) -> (Model, Vec<Sample>) {
        let scheme = Scheme::a();
        let set = synth_generate(&scheme, count, 11, 32).unwrap();
        let d = with_mean_shape(scheme.descriptor(), &set.samples).unwrap();
        let mut m = Model::new(ModelConfig::toy(), 5).unwrap();
        m.register_dataset(d).unwrap();
        (m, set.samples)
    }

    #[test]
    fn ratio_examples() {
        let d = DatasetDescriptor::new("w", 98);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(mask_anchors(&d, AnchorSpec::Ratio(0.75), &mut rng).unwrap().indices.len(), 24);
        assert_eq!(mask_anchors(&d, AnchorSpec::Ratio(0.0), &mut rng).unwrap().indices, (0..98).collect::<Vec<_>>());
        assert!(mask_anchors(&d, AnchorSpec::Count(99), &mut rng).is_err());
    }

    #[test]
    fn anchor_frequencies_are_uniform() {
        let d = DatasetDescriptor::new("w", 10);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = 100_000;
        let n_a = 3;
        let mut counts = [0usize; 10];
        for _ in 0..draws {
            let p = mask_anchors(&d, AnchorSpec::Count(n_a), &mut rng).unwrap();
            assert!(p.indices.windows(2).all(|w| w[0] < w[1]));
            for i in p.indices {
                counts[i] += 1;
            }
        }
        let prob = n_a as f64 / 10.0;
        let sigma = (draws as f64 * prob * (1.0 - prob)).sqrt();
        for c in counts {
            assert!((c as f64 - draws as f64 * prob).abs() < 3.0 * sigma, "{c}");
        }
    }

    #[test]
    fn loss_examples() {
        let p = vec![vec![[0.1, -0.1], [0.2, 0.0]]];
        let t = vec![vec![[0.0, 0.0], [0.0, 0.0]]];
        let v = vec![vec![true, true]];
        assert!((l1_landmark_loss(&p, &t, &v).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(l1_landmark_loss(&t, &t, &v).unwrap(), 0.0);
        let p3: Vec<Vec<Point>> = p.iter().map(|s| s.iter().map(|q| [3.0 * q[0], 3.0 * q[1]]).collect()).collect();
        assert!((l1_landmark_loss(&p3, &t, &v).unwrap() - 0.6).abs() < 1e-15);
        let v0 = vec![vec![false, true]];
        assert!((l1_landmark_loss(&p, &t, &v0).unwrap() - 0.2).abs() < 1e-15);
        assert!(l1_landmark_loss(&p, &t, &[vec![false, false]]).is_err());
    }

    #[test]
    fn schedule_steps() {
        let c = TrainConfig::default();
        assert_eq!(lr_schedule(0, &c), 1e-4);
        assert!((lr_schedule(85, &c) - 1e-5).abs() < 1e-20);
        assert!((lr_schedule(95, &c) - 1e-6).abs() < 1e-21);
        let mut bad = c.clone();
        bad.milestones = vec![90, 80];
        assert!(bad.validate().is_err());
        bad.milestones = vec![80, 100];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_lr_leaves_params() {
        let (mut m, samples) = toy_setup(2);
        let before = m.params.clone();
        let d = m.registry.get("synth-a").unwrap().clone();
        let plan = mask_anchors(&d, AnchorSpec::Count(5), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let entries = [BatchEntry { sample: &samples[0], plan: &plan }, BatchEntry { sample: &samples[1], plan: &plan }];
        let mut opt = AdamW::new(&TrainConfig::default());
        train_step(&mut m, &entries, &mut opt, 0.0, false).unwrap();
        train_step(&mut m, &entries, &mut opt, 0.0, false).unwrap();
        assert_eq!(m.params, before);
    }

    #[test]
    fn graph_loss_matches_scalar_loop() {
        let (m, samples) = toy_setup(3);
        let d = m.registry.get("synth-a").unwrap().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let plans: Vec<MaskPlan> = (0..3).map(|_| mask_anchors(&d, AnchorSpec::Count(6), &mut rng).unwrap()).collect();
        let entries: Vec<BatchEntry> = samples.iter().zip(&plans).map(|(s, p)| BatchEntry { sample: s, plan: p }).collect();
        let got = batch_loss(&m, &entries).unwrap();
        let mut pred = Vec::new();
        let mut tgt = Vec::new();
        let mut val = Vec::new();
        for e in &entries {
            let p = m
                .predict(&e.sample.image, PromptSource::Dataset { id: "synth-a", anchors: Some(&e.plan.indices) })
                .unwrap();
            pred.push(p.points);
            tgt.push(e.plan.indices.iter().map(|&i| e.sample.landmarks.coords()[i]).collect());
            val.push(vec![true; e.plan.indices.len()]);
        }
        let oracle = l1_landmark_loss(&pred, &tgt, &val).unwrap();
        assert!((got - oracle).abs() < 1e-9);
    }

    #[test]
    fn absent_dataset_gets_no_gradient_and_masked_targets_do_not_matter() {
        let (mut m, samples) = toy_setup(2);
        let other = with_mean_shape(Scheme::b().descriptor(), &synth_generate(&Scheme::b(), 2, 1, 32).unwrap().samples).unwrap();
        m.register_dataset(other).unwrap();
        let d = m.registry.get("synth-a").unwrap().clone();
        let plan = mask_anchors(&d, AnchorSpec::Count(4), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let entries = [BatchEntry { sample: &samples[0], plan: &plan }];
        let bg = batch_gradients(&m, &entries, false).unwrap();
        assert!(bg.grads.contains_key("align.synth-a"));
        assert!(!bg.grads.contains_key("align.synth-b"));
        // moving a masked-out target leaves loss and gradients unchanged
        let masked = (0..20).find(|i| !plan.indices.contains(i)).unwrap();
        let mut moved = samples[0].clone();
        let mut coords = moved.landmarks.coords().to_vec();
        coords[masked] = [0.9, 0.1];
        moved.landmarks = crate::geometry::LandmarkSet::from_points(coords).unwrap();
        let bg2 = batch_gradients(&m, &[BatchEntry { sample: &moved, plan: &plan }], false).unwrap();
        assert_eq!(bg.loss, bg2.loss);
        assert_eq!(bg.grads, bg2.grads);
    }

    #[test]
    fn worker_count_does_not_change_training() {
        let (m0, samples) = toy_setup(6);
        let mut cfg = TrainConfig {
            epochs: 2,
            milestones: vec![],
            base_lr: 1e-3,
            batch_size: 3,
            anchors: AnchorSpec::Count(5),
            ..TrainConfig::default()
        };
        let run = |cfg: &TrainConfig| {
            let mut m = m0.clone();
            let logs = train(&mut m, &[TrainSet { dataset_id: "synth-a", samples: &samples }], cfg, |_, _| Ok(())).unwrap();
            (logs.iter().map(|l| l.mean_loss).collect::<Vec<_>>(), m.params)
        };
        let a = run(&cfg);
        cfg.workers = 3;
        let b = run(&cfg);
        assert_eq!(a, b);
    }

    #[test]
    fn fewshot_single_shot_mean() {
        let (m, _) = toy_setup(2);
        let shots = synth_generate(&Scheme::b(), 1, 3, 32).unwrap().samples;
        let cfg = TrainConfig {
            epochs: 1,
            milestones: vec![],
            batch_size: 1,
            ..TrainConfig::default()
        };
        let (ft, logs) = fewshot_finetune(&m, Scheme::b().descriptor(), &shots, &cfg).unwrap();
        assert_eq!(logs.len(), 1);
        let mean = ft.registry.get("synth-b").unwrap().mean_shape().unwrap();
        assert_eq!(mean.points, crate::geometry::normalize_to_plane(shots[0].landmarks.coords()));
        let wrong = synth_generate(&Scheme::a(), 1, 3, 32).unwrap().samples;
        assert!(matches!(
            fewshot_finetune(&m, Scheme::b().descriptor(), &wrong, &cfg),
            Err(TufaError::CountMismatch { .. })
        ));
    }
}
