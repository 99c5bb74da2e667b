//! Training recipe: losses, cosine schedule with linear warmup, global
//! gradient clipping, Adam with decoupled weight decay, and the
//! deterministic train/evaluate loops.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{batches, Batch, BatchPlan, Dataset};
use crate::tensor::{DType, Graph, NodeId, Tensor, TensorError};
use crate::vit::{layer_group, load_params, vit_forward, ModelConfig, ParamTree};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    SigmoidXent,
    SoftmaxXent,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub loss: Loss,
    pub seed: u64,
    /// Evaluate on the held-out set every this many steps (0 = only at
    /// the end).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    /// Desk-scale recipe: the production-scale constants with steps and batch
    /// shrunk to laptop size.
    fn default() -> TrainConfig {
        TrainConfig {
            total_steps: 2000,
            batch_size: 128,
            base_lr: 1e-3,
            weight_decay: 1e-4,
            warmup_steps: 100,
            clip_norm: Some(1.0),
            loss: Loss::SigmoidXent,
            seed: 0,
            eval_every: 0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("step {step} of schedule exceeds total_steps {total}")]
    ScheduleOverrun { step: usize, total: usize },
    #[error("non-finite values at step {step}: {source}")]
    NonFinite { step: usize, source: TensorError },
    #[error("{0}")]
    Tensor(#[from] TensorError),
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.warmup_steps > self.total_steps {
            return Err(TrainError::Config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.base_lr <= 0.0 {
            return Err(TrainError::Config("base_lr must be positive".into()));
        }
        if let Some(c) = self.clip_norm {
            if c <= 0.0 {
                return Err(TrainError::Config("clip_norm must be positive or absent".into()));
            }
        }
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(TrainError::Config("batch_size and total_steps must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup 0 -> base_lr over `warmup_steps`, then cosine decay to 0
/// at `total_steps`.
pub fn cosine_schedule(step: usize, cfg: &TrainConfig) -> Result<f64, TrainError> {
    if step > cfg.total_steps {
        return Err(TrainError::ScheduleOverrun { step, total: cfg.total_steps });
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.base_lr * step as f64 / cfg.warmup_steps as f64);
    }
    let span = cfg.total_steps - cfg.warmup_steps;
    if span == 0 {
        return Ok(cfg.base_lr);
    }
    let t = (step - cfg.warmup_steps) as f64 / span as f64;
    Ok(cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Per-parameter gradients keyed by path, in path order.
pub type GradMap = BTreeMap<String, Vec<f64>>;

pub fn global_norm(grads: &GradMap) -> f64 {
    grads.values().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

/// If the joint L2 norm exceeds `clip`, scale every gradient by
/// clip/norm; otherwise leave them bitwise untouched. Returns the
/// pre-clip norm.
pub fn clip_global_norm(grads: &mut GradMap, clip: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > clip {
        let s = clip / norm;
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First/second Adam moments, shaped like the parameters.
#[derive(Debug, Clone)]
pub struct OptState {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    pub step: u64,
}

impl OptState {
    pub fn new(params: &ParamTree) -> OptState {
        let zeros =
            |p: &ParamTree| p.iter().map(|(k, t)| (k.clone(), vec![0.0; t.numel()])).collect();
        OptState { m: zeros(params), v: zeros(params), step: 0 }
    }
}

/// Whether decoupled weight decay applies: kernels only, never biases or
/// norm parameters.
fn decayed(path: &str) -> bool {
    path.ends_with("/kernel")
}

/// Bias-corrected Adam followed by decoupled weight decay
/// p <- p - lr*wd*p on kernels.
pub fn adam_step(
    params: &mut ParamTree,
    grads: &GradMap,
    state: &mut OptState,
    lr: f64,
    wd: f64,
) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for (path, p) in params.iter_mut() {
        let g = &grads[path];
        assert_eq!(g.len(), p.numel(), "gradient shape mismatch for {path}");
        let m = state.m.get_mut(path).unwrap();
        let v = state.v.get_mut(path).unwrap();
        let decay = if wd > 0.0 && decayed(path) { 1.0 - lr * wd } else { 1.0 };
        for i in 0..g.len() {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            let updated = (p.data()[i] - lr * mhat / (vhat.sqrt() + ADAM_EPS)) * decay;
            p.set(i, updated);
        }
    }
}

/// One step's worth of logged state.
#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: f64,
    pub learning_rate: f64,
    pub eval_accuracy: Option<f64>,
    /// Pre-clip gradient L2 norms grouped by layer (stem, block0…, head).
    pub grad_norms: BTreeMap<String, f64>,
}

pub struct TrainOutput {
    pub params: ParamTree,
    pub metrics: Vec<MetricsRecord>,
}

fn batch_loss(
    g: &mut Graph,
    batch: &Batch,
    mcfg: &ModelConfig,
    params: &crate::vit::ParamNodes,
    loss: Loss,
) -> crate::tensor::Result<(NodeId, NodeId)> {
    let img = g.leaf(batch.images.clone().with_tracking(false));
    let tgt = g.leaf(batch.targets.clone().with_tracking(false));
    let logits = vit_forward(g, img, mcfg, params)?;
    let l = match loss {
        Loss::SigmoidXent => g.sigmoid_xent(logits, tgt)?,
        Loss::SoftmaxXent => g.softmax_xent(logits, tgt)?,
    };
    Ok((logits, l))
}

/// Deterministic training loop: batch -> forward -> loss -> backward ->
/// clip -> Adam, logging every step. Raw gradients are clipped before the
/// moment update. Any non-finite value aborts with the step and the graph
/// scope where it appeared.
pub fn train(
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    mut params: ParamTree,
    dataset: &Dataset,
    eval_set: Option<&Dataset>,
) -> Result<TrainOutput, TrainError> {
    tcfg.validate()?;
    mcfg.validate().map_err(TrainError::Config)?;
    let dtype = params.iter().next().map(|(_, t)| t.dtype()).unwrap_or(DType::F64);
    let plan = BatchPlan::new(tcfg.seed, tcfg.batch_size).map_err(|e| TrainError::Config(e.to_string()))?;
    let mut state = OptState::new(&params);
    let mut metrics = Vec::with_capacity(tcfg.total_steps);
    let mut epoch = 0u64;
    let mut queue = batches(dataset, &plan, epoch, dtype);
    let mut cursor = 0usize;
    for step in 0..tcfg.total_steps {
        if cursor == queue.len() {
            epoch += 1;
            queue = batches(dataset, &plan, epoch, dtype);
            cursor = 0;
        }
        let batch = &queue[cursor];
        cursor += 1;

        let mut g = Graph::new();
        let nodes = load_params(&mut g, &params);
        let wrap = |e: TensorError| match e {
            TensorError::NonFinite { .. } => TrainError::NonFinite { step, source: e },
            other => TrainError::Tensor(other),
        };
        let (_, loss_node) = batch_loss(&mut g, batch, mcfg, &nodes, tcfg.loss).map_err(wrap)?;
        let loss = g.value(loss_node).item();
        let grads = g.backward(loss_node).map_err(wrap)?;
        let mut grad_map: GradMap = nodes
            .iter()
            .map(|(path, id)| (path.clone(), grads.get_or_zeros(*id, g.value(*id).numel())))
            .collect();

        let mut group_sq: BTreeMap<String, f64> = BTreeMap::new();
        for (path, gvec) in &grad_map {
            let s: f64 = gvec.iter().map(|v| v * v).sum();
            *group_sq.entry(layer_group(path)).or_insert(0.0) += s;
        }
        let grad_norms = group_sq.into_iter().map(|(k, s)| (k, s.sqrt())).collect();

        if let Some(clip) = tcfg.clip_norm {
            clip_global_norm(&mut grad_map, clip);
        }
        let lr = cosine_schedule(step, tcfg)?;
        adam_step(&mut params, &grad_map, &mut state, lr, tcfg.weight_decay);

        let eval_due = step + 1 == tcfg.total_steps
            || (tcfg.eval_every > 0 && (step + 1) % tcfg.eval_every == 0);
        let eval_accuracy = match (eval_due, eval_set) {
            (true, Some(ds)) => Some(evaluate(&params, mcfg, ds, tcfg.batch_size)?),
            _ => None,
        };
        metrics.push(MetricsRecord { step, loss, learning_rate: lr, eval_accuracy, grad_norms });
    }
    Ok(TrainOutput { params, metrics })
}

/// Exact-match accuracy; argmax ties break toward the lowest class index.
pub fn evaluate(
    params: &ParamTree,
    mcfg: &ModelConfig,
    dataset: &Dataset,
    batch_size: usize,
) -> Result<f64, TrainError> {
    let dtype = params.iter().next().map(|(_, t)| t.dtype()).unwrap_or(DType::F64);
    let (h, w, c) = dataset.image_dims();
    let px = h * w * c;
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let mut data = Vec::with_capacity(chunk.len() * px);
        for &i in chunk {
            data.extend_from_slice(&dataset.images.data()[i * px..(i + 1) * px]);
        }
        let mut g = Graph::new();
        let img = g.leaf(Tensor::from_vec(vec![chunk.len(), h, w, c], data, dtype).with_tracking(false));
        let nodes = load_params(&mut g, params);
        let logits = vit_forward(&mut g, img, mcfg, &nodes)?;
        let out = g.value(logits);
        let k = mcfg.num_classes;
        for (row, &i) in chunk.iter().enumerate() {
            let pred = argmax(&out.data()[row * k..(row + 1) * k]);
            if pred == dataset.labels[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// First index of the maximum (the tie rule).
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_dataset;
    use crate::vit::{init_params, micro_config, BlockExtra, Placement, StemNorm};

    fn graph_loss(loss: Loss, logits: Vec<f64>, targets: Vec<f64>, shape: Vec<usize>) -> f64 {
        let mut g = Graph::new();
        let l = g.leaf(Tensor::from_vec(shape.clone(), logits, DType::F64));
        let t = g.leaf(Tensor::from_vec(shape, targets, DType::F64));
        let node = match loss {
            Loss::SigmoidXent => g.sigmoid_xent(l, t).unwrap(),
            Loss::SoftmaxXent => g.softmax_xent(l, t).unwrap(),
        };
        g.value(node).item()
    }

    #[test]
    fn sigmoid_loss_closed_forms() {
        // logit 0, target 1, one class: ln 2
        let v = graph_loss(Loss::SigmoidXent, vec![0.0], vec![1.0], vec![1, 1]);
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        // logit -6.9, target 0: softplus(-6.9), the head-bias rationale
        let v = graph_loss(Loss::SigmoidXent, vec![-6.9], vec![0.0], vec![1, 1]);
        assert!((v - 1.006e-3).abs() < 1e-5, "got {v}");
        assert!((v - (1.0 + (-6.9f64).exp()).ln()).abs() < 1e-15);
    }

    #[test]
    fn softmax_loss_closed_forms_and_oracle() {
        let v = graph_loss(Loss::SoftmaxXent, vec![0.5; 10], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], vec![1, 10]);
        assert!((v - 10f64.ln()).abs() < 1e-12);
        let mut hot = vec![0.0; 10];
        hot[3] = 1.0;
        let mut big = vec![0.0; 10];
        big[3] = 1e4;
        assert!(graph_loss(Loss::SoftmaxXent, big, hot.clone(), vec![1, 10]) < 1e-12);
        // random logits vs -log softmax[target]
        let mut rng = crate::rng::SplitMix64::new(3);
        let logits: Vec<f64> = (0..10).map(|_| rng.next_f64() * 8.0 - 4.0).collect();
        let lse = logits.iter().map(|z| z.exp()).sum::<f64>().ln();
        let expect = lse - logits[3];
        let got = graph_loss(Loss::SoftmaxXent, logits, hot, vec![1, 10]);
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig { total_steps: 1000, warmup_steps: 100, base_lr: 3e-3, ..TrainConfig::default() };
        assert_eq!(cosine_schedule(0, &cfg).unwrap(), 0.0);
        assert_eq!(cosine_schedule(100, &cfg).unwrap(), 3e-3);
        assert!(cosine_schedule(1000, &cfg).unwrap().abs() < 1e-12);
        // warmup is linear
        assert!((cosine_schedule(50, &cfg).unwrap() - 1.5e-3).abs() < 1e-15);
        // halfway through decay: base_lr / 2
        assert!((cosine_schedule(550, &cfg).unwrap() - 1.5e-3).abs() < 1e-12);
        assert!(matches!(cosine_schedule(1001, &cfg), Err(TrainError::ScheduleOverrun { .. })));
    }

    #[test]
    fn clipping_semantics() {
        let mut grads: GradMap = BTreeMap::new();
        grads.insert("a".into(), vec![2.0, 0.0]);
        grads.insert("b".into(), vec![0.0, 0.0]);
        let pre = clip_global_norm(&mut grads, 1.0);
        assert_eq!(pre, 2.0);
        assert_eq!(grads["a"], vec![1.0, 0.0]); // every element halved

        let mut small: GradMap = BTreeMap::new();
        small.insert("a".into(), vec![0.3, 0.4]);
        let before = small.clone();
        clip_global_norm(&mut small, 1.0);
        assert!(small["a"].iter().zip(&before["a"]).all(|(x, y)| x.to_bits() == y.to_bits()));

        // post-clip norm == min(g, clip) on random gradients
        let mut rng = crate::rng::SplitMix64::new(9);
        for _ in 0..20 {
            let mut g: GradMap = BTreeMap::new();
            for name in ["x", "y", "z"] {
                g.insert(name.into(), (0..7).map(|_| rng.next_normal() * 3.0).collect());
            }
            let pre = clip_global_norm(&mut g, 1.0);
            assert!((global_norm(&g) - pre.min(1.0)).abs() < 1e-9);
        }
    }

    fn scalar_tree(value: f64) -> ParamTree {
        let mut t = ParamTree::new();
        t.insert("w/kernel", Tensor::from_vec(vec![1], vec![value], DType::F64));
        t.insert("w/bias", Tensor::from_vec(vec![1], vec![value], DType::F64));
        t
    }

    #[test]
    fn adam_single_step_oracle() {
        // zero gradient, wd 0: untouched
        let mut p = scalar_tree(0.7);
        let mut s = OptState::new(&p);
        let mut g: GradMap = BTreeMap::new();
        g.insert("w/kernel".into(), vec![0.0]);
        g.insert("w/bias".into(), vec![0.0]);
        adam_step(&mut p, &g, &mut s, 1e-3, 0.0);
        assert_eq!(p.get("w/kernel").unwrap().data()[0], 0.7);

        // unit gradient: bias-corrected first step moves by ~lr
        let mut p = scalar_tree(0.0);
        let mut s = OptState::new(&p);
        g.insert("w/kernel".into(), vec![1.0]);
        g.insert("w/bias".into(), vec![1.0]);
        adam_step(&mut p, &g, &mut s, 1e-3, 0.0);
        let got = p.get("w/kernel").unwrap().data()[0];
        // hand oracle: m=0.1/0.1=1, v=0.001/0.001=1 -> update = lr/(1+eps)
        let expect = -1e-3 / (1.0 + ADAM_EPS);
        assert!((got - expect).abs() < 1e-15, "got {got}");

        // wd with zero grads: pure multiplicative decay, kernels only
        let mut p = scalar_tree(2.0);
        let mut s = OptState::new(&p);
        g.insert("w/kernel".into(), vec![0.0]);
        g.insert("w/bias".into(), vec![0.0]);
        adam_step(&mut p, &g, &mut s, 0.1, 0.01);
        assert_eq!(p.get("w/kernel").unwrap().data()[0], 2.0 * (1.0 - 0.1 * 0.01));
        assert_eq!(p.get("w/bias").unwrap().data()[0], 2.0);
    }

    #[test]
    fn adam_first_step_is_scale_covariant() {
        // holds while sqrt(v-hat) dominates eps=1e-8, i.e. |g| >> 1e-2
        for scale in [0.1, 1.0, 1e3, 1e6] {
            let mut p = scalar_tree(0.0);
            let mut s = OptState::new(&p);
            let mut g: GradMap = BTreeMap::new();
            g.insert("w/kernel".into(), vec![scale]);
            g.insert("w/bias".into(), vec![scale]);
            adam_step(&mut p, &g, &mut s, 1e-3, 0.0);
            let update = p.get("w/kernel").unwrap().data()[0].abs();
            assert!((update - 1e-3).abs() < 1e-3 * 1e-6, "scale {scale}: {update}");
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0, 2.0]), 0);
        assert_eq!(argmax(&[-1.0, -3.0]), 0);
    }

    #[test]
    fn evaluate_matches_per_example_oracle() {
        let cfg = micro_config(StemNorm::Dpn, Placement::Pre, Placement::Pre, BlockExtra::None);
        let params = init_params(&cfg, 1, DType::F64, true);
        let ds = synthetic_dataset(2, 12, 4, 4, 1, 7);
        let acc = evaluate(&params, &cfg, &ds, 5).unwrap();
        // oracle: run each example alone and count matches
        let (h, w, c) = ds.image_dims();
        let px = h * w * c;
        let mut correct = 0;
        for i in 0..ds.len() {
            let mut g = Graph::new();
            let img = g.leaf(Tensor::from_vec(
                vec![1, h, w, c],
                ds.images.data()[i * px..(i + 1) * px].to_vec(),
                DType::F64,
            ));
            let nodes = load_params(&mut g, &params);
            let logits = vit_forward(&mut g, img, &cfg, &nodes).unwrap();
            if argmax(g.value(logits).data()) == ds.labels[i] {
                correct += 1;
            }
        }
        assert_eq!(acc, correct as f64 / ds.len() as f64);
    }

    fn blob_cfg(stem: StemNorm) -> (ModelConfig, Dataset) {
        let mut cfg = micro_config(stem, Placement::Pre, Placement::Pre, BlockExtra::None);
        cfg.image_size = (8, 8);
        cfg.patch_size = 4;
        (cfg, synthetic_dataset(2, 64, 8, 8, 1, 0))
    }

    #[test]
    fn micro_model_overfits_synthetic_blobs() {
        let (cfg, ds) = blob_cfg(StemNorm::Dpn);
        let tcfg = TrainConfig {
            total_steps: 300,
            batch_size: 16,
            warmup_steps: 30,
            eval_every: 0,
            ..TrainConfig::default()
        };
        let params = init_params(&cfg, tcfg.seed, DType::F64, true);
        let out = train(&cfg, &tcfg, params, &ds, None).unwrap();
        let acc = evaluate(&out.params, &cfg, &ds, 16).unwrap();
        assert!(acc >= 0.99, "train accuracy {acc}");
    }

    #[test]
    fn loss_trend_decreases_for_every_stem_strategy() {
        for stem in [StemNorm::None, StemNorm::Pre, StemNorm::Post, StemNorm::PostPosemb, StemNorm::Dpn] {
            let (cfg, ds) = blob_cfg(stem);
            let tcfg = TrainConfig {
                total_steps: 100,
                batch_size: 16,
                warmup_steps: 10,
                ..TrainConfig::default()
            };
            let params = init_params(&cfg, tcfg.seed, DType::F64, true);
            let out = train(&cfg, &tcfg, params, &ds, None).unwrap();
            let avg = |r: std::ops::Range<usize>| -> f64 {
                let n = r.len() as f64;
                out.metrics[r].iter().map(|m| m.loss).sum::<f64>() / n
            };
            assert!(
                avg(80..100) < avg(0..20),
                "{stem:?}: loss trend {} -> {}",
                avg(0..20),
                avg(80..100)
            );
            assert!(out.metrics.iter().all(|m| m.loss.is_finite()));
        }
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let (cfg, ds) = blob_cfg(StemNorm::Dpn);
        let tcfg = TrainConfig { total_steps: 20, batch_size: 8, warmup_steps: 5, ..TrainConfig::default() };
        let run = || {
            let params = init_params(&cfg, tcfg.seed, DType::F32, true);
            train(&cfg, &tcfg, params, &ds, None).unwrap()
        };
        let a = run();
        let b = run();
        for (x, y) in a.metrics.iter().zip(&b.metrics) {
            assert_eq!(x.loss.to_bits(), y.loss.to_bits());
            assert_eq!(x.learning_rate.to_bits(), y.learning_rate.to_bits());
        }
        for ((n1, t1), (n2, t2)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(n1, n2);
            assert!(t1.data().iter().zip(t2.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn grad_norm_groups_cover_depth_plus_two() {
        let (cfg, ds) = blob_cfg(StemNorm::None);
        let tcfg = TrainConfig { total_steps: 2, batch_size: 8, warmup_steps: 1, ..TrainConfig::default() };
        let params = init_params(&cfg, tcfg.seed, DType::F64, true);
        let out = train(&cfg, &tcfg, params, &ds, None).unwrap();
        let groups: Vec<&String> = out.metrics[0].grad_norms.keys().collect();
        assert_eq!(groups.len(), cfg.depth + 2);
        assert!(out.metrics[0].grad_norms.values().all(|&v| v.is_finite() && v >= 0.0));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = TrainConfig { warmup_steps: 10, total_steps: 5, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { base_lr: 0.0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { clip_norm: Some(-1.0), ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
