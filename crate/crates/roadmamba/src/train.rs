//! Training loop pieces: combined main/auxiliary loss, AdamW, the warmup plus
//! cosine learning-rate schedule, and macro-averaged classification metrics.

use crate::backbone::{AuxLogits, Backbone, BackboneConfig, ForwardOut};
use crate::scan2d::ScanMode;
use crate::tensor::{AutogradError, Tensor};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;

/// L_total = L_main + λ Σ_i (L_aux_global_i + L_aux_local_i).
/// Every term is a softmax cross-entropy against the same labels.
pub fn total_loss(out: &ForwardOut, labels: &[usize], lambda: f64) -> Tensor {
    let mut loss = out.logits.softmax_cross_entropy(labels);
    let mut aux_sum: Option<Tensor> = None;
    for (g, l) in &out.aux {
        for t in [g, l].into_iter().flatten() {
            let term = t.softmax_cross_entropy(labels);
            aux_sum = Some(match aux_sum {
                Some(acc) => acc.add(&term),
                None => term,
            });
        }
    }
    if let Some(aux) = aux_sum {
        loss = loss.add(&aux.scale(lambda));
    }
    loss
}

/// Number of cross-entropy terms that [`total_loss`] sums with weight λ.
pub fn aux_term_count(aux: &AuxLogits) -> usize {
    aux.iter().map(|(g, l)| g.is_some() as usize + l.is_some() as usize).sum()
}

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

pub struct AdamW {
    pub cfg: AdamWConfig,
    params: Vec<Tensor>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamW {
    pub fn new(params: Vec<Tensor>, cfg: AdamWConfig) -> AdamW {
        let m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        AdamW { cfg, params, m, v, t: 0 }
    }

    /// One decoupled-weight-decay Adam step at learning rate `lr`.
    /// Fails if any gradient is non-finite.
    pub fn step(&mut self, lr: f64) -> Result<(), AutogradError> {
        self.t += 1;
        let t = self.t as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, p) in self.params.iter().enumerate() {
            let g = match p.grad_vec() {
                Some(g) => g,
                None => continue,
            };
            if g.iter().any(|x| !x.is_finite()) {
                return Err(AutogradError::NonFinite("gradient".into()));
            }
            let mut data = p.to_vec();
            for (j, gj) in g.iter().enumerate() {
                self.m[i][j] = c.beta1 * self.m[i][j] + (1.0 - c.beta1) * gj;
                self.v[i][j] = c.beta2 * self.v[i][j] + (1.0 - c.beta2) * gj * gj;
                let mhat = self.m[i][j] / bc1;
                let vhat = self.v[i][j] / bc2;
                data[j] -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * data[j]);
            }
            p.set_data(&data);
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }
}

/// Linear warmup from 0 to `base_lr` over the first `warmup` steps, then a
/// cosine decay to `min_lr` at `total`. Step counts the update being taken,
/// starting at 0.
pub fn lr_at(step: usize, total: usize, warmup: usize, base_lr: f64, min_lr: f64) -> f64 {
    assert!(total > 0 && warmup < total, "bad schedule lengths");
    if step < warmup {
        return base_lr * (step + 1) as f64 / warmup as f64;
    }
    if step >= total {
        return min_lr;
    }
    let p = (step - warmup) as f64 / (total - warmup) as f64;
    min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (std::f64::consts::PI * p).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub top1: f64,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_f1: f64,
    pub confusion: Vec<Vec<usize>>,
}

/// Macro-averaged precision, recall, and F1 over `num_classes` classes.
/// A class with an empty denominator contributes 0 to the average.
pub fn compute_metrics(preds: &[usize], labels: &[usize], num_classes: usize) -> Metrics {
    assert_eq!(preds.len(), labels.len());
    assert!(!preds.is_empty(), "empty evaluation set");
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &y) in preds.iter().zip(labels) {
        confusion[y][p] += 1;
    }
    let correct: usize = (0..num_classes).map(|k| confusion[k][k]).sum();
    let mut psum = 0.0;
    let mut rsum = 0.0;
    let mut fsum = 0.0;
    for k in 0..num_classes {
        let tp = confusion[k][k] as f64;
        let pred_k: usize = (0..num_classes).map(|y| confusion[y][k]).sum();
        let true_k: usize = confusion[k].iter().sum();
        let prec = if pred_k == 0 { 0.0 } else { tp / pred_k as f64 };
        let rec = if true_k == 0 { 0.0 } else { tp / true_k as f64 };
        let f1 = if prec + rec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) };
        psum += prec;
        rsum += rec;
        fsum += f1;
    }
    let n = num_classes as f64;
    Metrics {
        top1: correct as f64 / preds.len() as f64,
        mean_precision: psum / n,
        mean_recall: rsum / n,
        mean_f1: fsum / n,
        confusion,
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let s = logits.shape();
    let (b, k) = (s[0], s[1]);
    let v = logits.to_vec();
    (0..b)
        .map(|i| {
            let row = &v[i * k..(i + 1) * k];
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// A dataset the loop can draw batches from. Images are [B,H,W,3].
pub trait BatchSource {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>);
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_frac: f64,
    pub lambda_aux: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub log_every: usize,
    /// Stop once an eval reaches this top-1, if set.
    pub target_top1: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 1000,
            batch_size: 8,
            base_lr: 1e-3,
            min_lr: 1e-5,
            warmup_frac: 0.05,
            lambda_aux: 0.3,
            seed: 0,
            eval_every: 200,
            log_every: 20,
            target_top1: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("loss diverged (non-finite) at step {0}")]
    Diverged(usize),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

pub struct TrainOutcome {
    pub steps_run: usize,
    pub final_loss: f64,
    pub final_metrics: Option<Metrics>,
    /// CSV log with header `step,lr,loss,top1,meanP,meanR,meanF1`.
    pub log_csv: String,
}

/// Evaluate the network over `data` in fixed-size batches, eval scan mode.
pub fn evaluate(net: &Backbone, data: &dyn BatchSource, batch_size: usize, num_classes: usize) -> Metrics {
    let mut rng = ChaCha8Rng::seed_from_u64(0); // unused in eval mode
    let mut preds = Vec::with_capacity(data.len());
    let mut labels = Vec::with_capacity(data.len());
    let mut i = 0;
    while i < data.len() {
        let hi = (i + batch_size).min(data.len());
        let idx: Vec<usize> = (i..hi).collect();
        let (x, y) = data.batch(&idx);
        let out = net.forward(&x, ScanMode::Eval, &mut rng);
        preds.extend(argmax_rows(&out.logits));
        labels.extend(y);
        i = hi;
    }
    compute_metrics(&preds, &labels, num_classes)
}

/// Seeded training loop. Batches are sampled with replacement from `train`;
/// every `eval_every` steps the model is scored on `val`. Emits a CSV log
/// and aborts on a non-finite loss or gradient.
pub fn train_loop(
    net: &Backbone,
    cfg: &BackboneConfig,
    tcfg: &TrainConfig,
    train: &dyn BatchSource,
    val: &dyn BatchSource,
) -> Result<TrainOutcome, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut opt = AdamW::new(
        net.params(true),
        AdamWConfig { lr: tcfg.base_lr, ..AdamWConfig::default() },
    );
    let warmup = ((tcfg.total_steps as f64 * tcfg.warmup_frac) as usize).max(1);
    let mut log = String::from("step,lr,loss,top1,meanP,meanR,meanF1\n");
    let mut last_loss = f64::NAN;
    let mut last_metrics: Option<Metrics> = None;
    let mut steps_run = 0;
    for step in 0..tcfg.total_steps {
        let idx: Vec<usize> =
            (0..tcfg.batch_size).map(|_| rng.gen_range(0..train.len())).collect();
        let (x, y) = train.batch(&idx);
        let out = net.forward(&x, ScanMode::Train, &mut rng);
        let loss = total_loss(&out, &y, tcfg.lambda_aux);
        let lval = loss.to_vec()[0];
        if !lval.is_finite() {
            return Err(TrainError::Diverged(step));
        }
        last_loss = lval;
        opt.zero_grad();
        loss.backward()?;
        let lr = lr_at(step, tcfg.total_steps, warmup, tcfg.base_lr, tcfg.min_lr);
        opt.step(lr)?;
        steps_run = step + 1;
        let do_eval = tcfg.eval_every > 0
            && ((step + 1) % tcfg.eval_every == 0 || step + 1 == tcfg.total_steps);
        if do_eval {
            let m = evaluate(net, val, tcfg.batch_size, cfg.num_classes);
            let _ = writeln!(
                log,
                "{},{:.6e},{:.6},{:.4},{:.4},{:.4},{:.4}",
                step + 1, lr, lval, m.top1, m.mean_precision, m.mean_recall, m.mean_f1
            );
            let hit = tcfg.target_top1.map(|t| m.top1 >= t).unwrap_or(false);
            last_metrics = Some(m);
            if hit {
                break;
            }
        } else if tcfg.log_every > 0 && (step + 1) % tcfg.log_every == 0 {
            let _ = writeln!(log, "{},{:.6e},{:.6},,,,", step + 1, lr, lval);
        }
    }
    Ok(TrainOutcome { steps_run, final_loss: last_loss, final_metrics: last_metrics, log_csv: log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Backbone;
    use crate::tensor::{with_precision, Precision};

    #[test]
    fn loss_at_uniform_logits_is_ln_k_times_aux_weight() {
        // all-zero weights give uniform logits everywhere; with n blocks the
        // loss is ln(K) * (1 + lambda * 2 * n)
        with_precision(Precision::F64, || {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let cfg = BackboneConfig::micro();
            let net = Backbone::new(&cfg, &mut rng);
            for p in net.params(true) {
                p.set_data(&vec![0.0; p.numel()]);
            }
            let x = Tensor::from_vec(
                &[2, 64, 64, 3],
                (0..2 * 64 * 64 * 3).map(|i| (i % 7) as f64 / 7.0).collect(),
            );
            let out = net.forward(&x, ScanMode::Train, &mut rng);
            let loss = total_loss(&out, &[3, 19], 0.3).to_vec()[0];
            let n = cfg.n_blocks() as f64;
            let expect = (27.0f64).ln() * (1.0 + 0.3 * 2.0 * n);
            assert!(
                (loss - expect).abs() < 1e-9,
                "loss {loss} expected {expect}"
            );
        });
    }

    #[test]
    fn aux_term_count_matches_variant() {
        use crate::block::BlockVariant;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_vec(&[1, 64, 64, 3], vec![0.1; 64 * 64 * 3]);
        for (variant, expect_per_block) in [
            (BlockVariant::Dual, 2),
            (BlockVariant::GlobalOnly, 1),
            (BlockVariant::LocalOnly, 1),
        ] {
            let mut cfg = BackboneConfig::micro();
            cfg.variant = variant;
            let net = Backbone::new(&cfg, &mut rng);
            let out = net.forward(&x, ScanMode::Train, &mut rng);
            assert_eq!(aux_term_count(&out.aux), expect_per_block * cfg.n_blocks());
        }
    }

    #[test]
    fn adamw_first_step_closed_form() {
        // single parameter, fixed gradient g: after one step,
        // mhat = g, vhat = g^2, update = lr (g/(|g|+eps) + wd*x0)
        with_precision(Precision::F64, || {
            let p = Tensor::param(&[2], vec![1.0, -2.0]);
            p.accumulate_grad(&[0.5, -0.25]);
            let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.05, ..AdamWConfig::default() };
            let mut opt = AdamW::new(vec![p.clone()], cfg);
            opt.step(0.1).unwrap();
            let got = p.to_vec();
            for (i, (x0, g)) in [(1.0f64, 0.5f64), (-2.0, -0.25)].iter().enumerate() {
                let want = x0 - 0.1 * (g / (g.abs() + 1e-8) + 0.05 * x0);
                assert!((got[i] - want).abs() < 1e-12, "slot {i}: {} vs {want}", got[i]);
            }
        });
    }

    #[test]
    fn adamw_rejects_nan_grad() {
        let p = Tensor::param(&[1], vec![0.0]);
        p.accumulate_grad(&[f64::NAN]);
        let mut opt = AdamW::new(vec![p], AdamWConfig::default());
        assert!(matches!(opt.step(1e-3), Err(AutogradError::NonFinite(_))));
    }

    #[test]
    fn adamw_shrinks_quadratic() {
        // minimize 0.5*x^2: x should head toward 0
        with_precision(Precision::F64, || {
            let p = Tensor::param(&[1], vec![3.0]);
            let mut opt = AdamW::new(
                vec![p.clone()],
                AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() },
            );
            for _ in 0..500 {
                opt.zero_grad();
                let loss = p.square().mean_all().scale(0.5);
                loss.backward().unwrap();
                opt.step(0.05).unwrap();
            }
            assert!(p.to_vec()[0].abs() < 0.05);
        });
    }

    #[test]
    fn schedule_shape() {
        let total = 1000;
        let warmup = 100;
        // warmup is linear and hits base exactly at the boundary
        assert!((lr_at(0, total, warmup, 1.0, 0.01) - 0.01).abs() < 1e-12);
        assert!((lr_at(49, total, warmup, 1.0, 0.01) - 0.5).abs() < 1e-12);
        assert!((lr_at(99, total, warmup, 1.0, 0.01) - 1.0).abs() < 1e-12);
        assert!((lr_at(100, total, warmup, 1.0, 0.01) - 1.0).abs() < 1e-9);
        // cosine tail is monotone decreasing and lands on min_lr
        let mut prev = lr_at(100, total, warmup, 1.0, 0.01);
        for s in 101..total {
            let cur = lr_at(s, total, warmup, 1.0, 0.01);
            assert!(cur <= prev + 1e-15, "not monotone at {s}");
            prev = cur;
        }
        let end = lr_at(total - 1, total, warmup, 1.0, 0.01);
        assert!((end - 0.01).abs() < 1e-4);
        assert_eq!(lr_at(total, total, warmup, 1.0, 0.01), 0.01);
        // midpoint of the cosine span is the arithmetic mean of base and min
        let mid = lr_at(warmup + (total - warmup) / 2, total, warmup, 1.0, 0.01);
        assert!((mid - 0.505).abs() < 1e-3);
    }

    #[test]
    fn metrics_hand_worked_two_class() {
        // preds [0,0,1,1], labels [0,1,1,1]:
        // class 0: tp=1 fp=1 fn=0 -> P=0.5 R=1
        // class 1: tp=2 fp=0 fn=1 -> P=1 R=2/3
        // meanP = 0.75, top1 = 0.75
        let m = compute_metrics(&[0, 0, 1, 1], &[0, 1, 1, 1], 2);
        assert!((m.mean_precision - 0.75).abs() < 1e-12);
        assert!((m.top1 - 0.75).abs() < 1e-12);
        assert!((m.mean_recall - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        let f0 = 2.0 * 0.5 * 1.0 / 1.5;
        let f1 = 2.0 * 1.0 * (2.0 / 3.0) / (1.0 + 2.0 / 3.0);
        assert!((m.mean_f1 - (f0 + f1) / 2.0).abs() < 1e-12);
        assert_eq!(m.confusion, vec![vec![1, 0], vec![1, 2]]);
    }

    #[test]
    fn metrics_absent_class_counts_zero() {
        // class 2 never predicted and never present: P=R=F1=0 for it
        let m = compute_metrics(&[0, 1], &[0, 1], 3);
        assert!((m.top1 - 1.0).abs() < 1e-12);
        assert!((m.mean_precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.mean_f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_perfect_and_worst() {
        let m = compute_metrics(&[0, 1, 2], &[0, 1, 2], 3);
        assert_eq!(m.top1, 1.0);
        assert_eq!(m.mean_f1, 1.0);
        let w = compute_metrics(&[1, 2, 0], &[0, 1, 2], 3);
        assert_eq!(w.top1, 0.0);
        assert_eq!(w.mean_f1, 0.0);
    }

    #[test]
    fn argmax_ties_pick_first() {
        let t = Tensor::from_vec(&[2, 3], vec![1.0, 3.0, 3.0, 2.0, 0.0, 2.0]);
        assert_eq!(argmax_rows(&t), vec![1, 0]);
    }

    struct ToyData {
        images: Vec<Vec<f64>>,
        labels: Vec<usize>,
        side: usize,
    }

    impl BatchSource for ToyData {
        fn len(&self) -> usize {
            self.labels.len()
        }
        fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
            let n = self.side * self.side * 3;
            let mut data = Vec::with_capacity(indices.len() * n);
            let mut labels = Vec::with_capacity(indices.len());
            for &i in indices {
                data.extend_from_slice(&self.images[i]);
                labels.push(self.labels[i]);
            }
            (Tensor::from_vec(&[indices.len(), self.side, self.side, 3], data), labels)
        }
    }

    fn tiny_two_class_data(n: usize, side: usize, seed: u64) -> ToyData {
        // class 0: red-dominant, class 1: blue-dominant; trivially separable
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 2;
            let img: Vec<f64> = (0..side * side * 3)
                .map(|j| {
                    let hot = if y == 0 { 0 } else { 2 };
                    let base = if j % 3 == hot { 0.8 } else { 0.2 };
                    base + rng.gen_range(-0.05..0.05)
                })
                .collect();
            images.push(img);
            labels.push(y);
        }
        ToyData { images, labels, side }
    }

    #[test]
    fn train_loop_learns_trivial_task_and_logs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut cfg = BackboneConfig::micro();
        cfg.num_classes = 2;
        cfg.widths = [4, 8, 16, 32];
        cfg.dt_ranks = [1, 1, 2, 4];
        cfg.blocks = [1, 1, 1, 1];
        cfg.image_side = 32;
        cfg.m = 4;
        let net = Backbone::new(&cfg, &mut rng);
        let train = tiny_two_class_data(32, 32, 0);
        let val = tiny_two_class_data(16, 32, 1);
        let tcfg = TrainConfig {
            total_steps: 30,
            batch_size: 4,
            base_lr: 3e-3,
            eval_every: 10,
            log_every: 5,
            target_top1: Some(1.0),
            ..TrainConfig::default()
        };
        let out = train_loop(&net, &cfg, &tcfg, &train, &val).unwrap();
        let m = out.final_metrics.expect("eval ran");
        assert!(m.top1 >= 0.9, "top1 {} after {} steps", m.top1, out.steps_run);
        assert!(out.log_csv.starts_with("step,lr,loss,top1,meanP,meanR,meanF1\n"));
        assert!(out.log_csv.lines().count() > 2);
    }

    #[test]
    fn train_loop_is_seed_deterministic() {
        let cfg = {
            let mut c = BackboneConfig::micro();
            c.num_classes = 2;
            c.widths = [4, 8, 16, 32];
            c.dt_ranks = [1, 1, 2, 4];
            c.blocks = [1, 1, 1, 1];
            c.image_side = 32;
            c.m = 4;
            c
        };
        let train = tiny_two_class_data(16, 32, 0);
        let val = tiny_two_class_data(8, 32, 1);
        let tcfg = TrainConfig {
            total_steps: 5,
            batch_size: 2,
            eval_every: 5,
            ..TrainConfig::default()
        };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let net = Backbone::new(&cfg, &mut rng);
            train_loop(&net, &cfg, &tcfg, &train, &val).unwrap().log_csv
        };
        assert_eq!(run(), run());
    }
}
