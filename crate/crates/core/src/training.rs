//! Losses, the Adam optimizer and the epoch loop.

use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};
use crate::interp::{LutTable, MAX_DIMS};
use crate::metrics::psnr;
use crate::pipeline::{forward_backward, PanLutModel};
use crate::raster::MultiBandImage;
use crate::stages::SdMode;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_s: f64,
    pub lambda_m: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_s: 1e-4,
            lambda_m: 10.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_s >= 0.0 && self.lambda_m >= 0.0) {
            return Err(Error::Domain(format!(
                "regularizer weights must be >= 0, got {} and {}",
                self.lambda_s, self.lambda_m
            )));
        }
        Ok(())
    }
}

/// Loss terms of one forward. `smooth` and `mono` are unweighted sums over all three tables.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub fidelity: f64,
    pub smooth: f64,
    pub mono: f64,
}

/// Mean squared error over every sample.
pub fn loss_fidelity(pred: &MultiBandImage, gt: &MultiBandImage) -> Result<f64> {
    check_same(pred, gt)?;
    let n = pred.samples().len() as f64;
    let sum: f64 = pred
        .samples()
        .iter()
        .zip(gt.samples())
        .map(|(p, g)| (p - g) * (p - g))
        .sum();
    Ok(sum / n)
}

/// Gradient of [`loss_fidelity`] with respect to `pred`.
pub fn fidelity_grad(pred: &MultiBandImage, gt: &MultiBandImage) -> Result<MultiBandImage> {
    check_same(pred, gt)?;
    let scale = 2.0 / pred.samples().len() as f64;
    let samples = pred
        .samples()
        .iter()
        .zip(gt.samples())
        .map(|(p, g)| scale * (p - g))
        .collect();
    MultiBandImage::from_samples(pred.width(), pred.height(), pred.bands(), samples)
}

fn check_same(a: &MultiBandImage, b: &MultiBandImage) -> Result<()> {
    if !a.same_shape(b) {
        return Err(shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.bands(),
            b.width(),
            b.height(),
            b.bands()
        )));
    }
    if a.samples().is_empty() {
        return Err(shape("empty images"));
    }
    Ok(())
}

/// Calls `f(i, j)` for every entry `i` and its forward neighbor `j` along
/// each axis that has one.
fn for_each_edge(table: &LutTable, mut f: impl FnMut(usize, usize)) {
    let dims = table.dims();
    let n = table.points();
    let e_count = table.channels();
    let mut idx = [0usize; MAX_DIMS];
    for point in 0..table.lattice_points() {
        let base = point * e_count;
        for l in 0..dims {
            if idx[l] + 1 < n {
                let step = table.stride(l);
                for e in 0..e_count {
                    f(base + e, base + e + step);
                }
            }
        }
        for l in (0..dims).rev() {
            idx[l] += 1;
            if idx[l] < n {
                break;
            }
            idx[l] = 0;
        }
    }
}

/// Sum of squared forward differences along every axis.
pub fn loss_smooth(table: &LutTable) -> f64 {
    let t = table.entries();
    let mut acc = 0.0;
    for_each_edge(table, |i, j| {
        let d = t[j] - t[i];
        acc += d * d;
    });
    acc
}

/// Sum of `relu(entry(p) - entry(p + e_l))` along every axis.
pub fn loss_mono(table: &LutTable) -> f64 {
    let t = table.entries();
    let mut acc = 0.0;
    for_each_edge(table, |i, j| {
        let d = t[i] - t[j];
        if d > 0.0 {
            acc += d;
        }
    });
    acc
}

/// Adds `scale_s * d(smooth) + scale_m * d(mono)` to `grad`.
pub fn add_regularizer_grads(table: &LutTable, scale_s: f64, scale_m: f64, grad: &mut [f64]) {
    let t = table.entries();
    for_each_edge(table, |i, j| {
        let d = t[j] - t[i];
        let gs = 2.0 * scale_s * d;
        grad[j] += gs;
        grad[i] -= gs;
        if -d > 0.0 {
            grad[i] += scale_m;
            grad[j] -= scale_m;
        }
    });
}

/// Adds the weighted regularizer gradient for one table.
pub fn regularizer_grad(table: &LutTable, cfg: &LossConfig, grad: &mut [f64]) {
    if cfg.lambda_s == 0.0 && cfg.lambda_m == 0.0 {
        return;
    }
    add_regularizer_grads(table, cfg.lambda_s, cfg.lambda_m, grad);
}

/// Fidelity plus weighted smoothness and monotonicity over all three tables.
pub fn loss_total(
    pred: &MultiBandImage,
    gt: &MultiBandImage,
    model: &PanLutModel,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let fidelity = loss_fidelity(pred, gt)?;
    let smooth: f64 = model.tables().iter().map(|t| loss_smooth(t)).sum();
    let mono: f64 = model.tables().iter().map(|t| loss_mono(t)).sum();
    Ok(LossBreakdown {
        total: fidelity + cfg.lambda_s * smooth + cfg.lambda_m * mono,
        fidelity,
        smooth,
        mono,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub base_lr: f64,
    /// Epochs between learning-rate halvings.
    pub decay_every: usize,
    pub decay_factor: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            base_lr: 5e-4,
            decay_every: 200,
            decay_factor: 0.5,
        }
    }
}

impl AdamConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let halvings = epoch.checked_div(self.decay_every).unwrap_or(0);
        self.base_lr * self.decay_factor.powi(halvings as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimState {
    pub fn new(config: AdamConfig, params: usize) -> Self {
        Self {
            config,
            m: vec![0.0; params],
            v: vec![0.0; params],
            step: 0,
        }
    }

    /// One Adam step over a flat parameter vector.
    pub fn adam_step(&mut self, params: &mut [f64], grads: &[f64], epoch: usize) -> Result<()> {
        self.step_segments(&mut [params], &[grads], epoch)
    }

    /// One Adam step over parameters split into consecutive segments
    /// (concatenated, they form the optimizer's flat vector).
    pub fn step_segments(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], epoch: usize) -> Result<()> {
        let total: usize = params.iter().map(|p| p.len()).sum();
        if params.len() != grads.len()
            || total != self.m.len()
            || params.iter().zip(grads).any(|(p, g)| p.len() != g.len())
        {
            return Err(shape(format!(
                "optimizer holds {} moments, got {total} parameters",
                self.m.len()
            )));
        }
        let mut offset = 0;
        for g in grads {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient {} at parameter {}",
                    g[i],
                    offset + i
                )));
            }
            offset += g.len();
        }
        let c = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let lr = c.lr_at(epoch);
        let mut offset = 0;
        for (p, g) in params.iter_mut().zip(grads) {
            let m = &mut self.m[offset..offset + p.len()];
            let v = &mut self.v[offset..offset + p.len()];
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
            offset += p.len();
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub points: usize,
    pub sd_mode: SdMode,
    pub epochs: usize,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            points: 9,
            sd_mode: SdMode::Chained,
            epochs: 1000,
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub pan: MultiBandImage,
    pub ms: MultiBandImage,
    pub gt: MultiBandImage,
}

/// Per-epoch means over the pairs, measured before each pair's update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub fidelity: f64,
    pub smooth: f64,
    pub mono: f64,
    pub psnr: f64,
}

impl EpochRecord {
    pub const HEADER: &'static str = "epoch\tlr\tloss\tfidelity\tsmooth\tmono\tpsnr";

    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{:e}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.6}",
            self.epoch, self.lr, self.loss, self.fidelity, self.smooth, self.mono, self.psnr
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PanLutModel,
    pub log: Vec<EpochRecord>,
}

pub fn train(pairs: &[TrainingPair], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(pairs, cfg, |_| {})
}

/// [`train`] calling `on_epoch` after every epoch.
pub fn train_with(
    pairs: &[TrainingPair],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if pairs.is_empty() {
        return Err(Error::Usage("training needs at least one pair".into()));
    }
    cfg.loss.validate()?;
    let mut model = PanLutModel::identity(cfg.points, cfg.sd_mode)?;
    let mut state = OptimState::new(cfg.adam, model.param_count());
    let mut log = Vec::with_capacity(cfg.epochs);
    let k = pairs.len() as f64;
    for epoch in 0..cfg.epochs {
        let mut rec = EpochRecord {
            epoch,
            lr: cfg.adam.lr_at(epoch),
            loss: 0.0,
            fidelity: 0.0,
            smooth: 0.0,
            mono: 0.0,
            psnr: 0.0,
        };
        for pair in pairs {
            let fb = forward_backward(&model, &pair.pan, &pair.ms, &pair.gt, &cfg.loss)?;
            rec.loss += fb.loss.total / k;
            rec.fidelity += fb.loss.fidelity / k;
            rec.smooth += fb.loss.smooth / k;
            rec.mono += fb.loss.mono / k;
            rec.psnr += psnr(&fb.output, &pair.gt)? / k;
            let [pg, sd, ao] = model.tables_mut();
            state.step_segments(
                &mut [pg.entries_mut(), sd.entries_mut(), ao.entries_mut()],
                &[&fb.grads.pglut, &fb.grads.sdlut, &fb.grads.aolut],
                epoch,
            )?;
        }
        if !rec.loss.is_finite() {
            return Err(Error::Numeric(format!("loss diverged at epoch {epoch}")));
        }
        on_epoch(&rec);
        log.push(rec);
    }
    Ok(TrainOutcome { model, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stages::{init_identity, StageKind};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_table(dims: usize, n: usize, e: usize, seed: u64) -> LutTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LutTable::from_fn(dims, n, e, |_, _| rng.gen_range(-1.0..1.0)).unwrap()
    }

    /// Enumerates points by decoding every flat index independently.
    fn brute(table: &LutTable, f: impl Fn(f64, f64) -> f64) -> f64 {
        let (d, n, e) = (table.dims(), table.points(), table.channels());
        let mut acc = 0.0;
        for p in 0..n.pow(d as u32) {
            let idx: Vec<usize> = (0..d).map(|l| (p / n.pow((d - 1 - l) as u32)) % n).collect();
            for l in 0..d {
                if idx[l] + 1 >= n {
                    continue;
                }
                let mut nb = idx.clone();
                nb[l] += 1;
                for c in 0..e {
                    acc += f(table.get(&idx, c), table.get(&nb, c));
                }
            }
        }
        acc
    }

    #[test]
    fn regularizers_match_brute_force() {
        for (d, e) in [(4, 1), (5, 5), (5, 4)] {
            let t = random_table(d, 3, e, d as u64 * 7 + e as u64);
            let s = brute(&t, |a, b| (b - a) * (b - a));
            let m = brute(&t, |a, b| (a - b).max(0.0));
            assert!((loss_smooth(&t) - s).abs() < 1e-12);
            assert!((loss_mono(&t) - m).abs() < 1e-12);
        }
    }

    #[test]
    fn regularizer_examples() {
        let c = LutTable::from_fn(4, 5, 1, |_, _| 0.3).unwrap();
        assert_eq!(loss_smooth(&c), 0.0);
        assert_eq!(loss_mono(&c), 0.0);
        for kind in StageKind::ALL {
            let id = init_identity(kind, 5).unwrap();
            assert_eq!(loss_mono(&id), 0.0);
        }
        // N=2 along one axis: entries (0, 1) on every line of axis 0.
        let t = LutTable::from_fn(2, 2, 1, |idx, _| idx[0] as f64).unwrap();
        assert_eq!(loss_smooth(&t), 2.0);
        let mut t = LutTable::new(1, 2, 1).unwrap();
        t.set(&[0], 0, 1.0);
        t.set(&[1], 0, 0.25);
        assert_eq!(loss_mono(&t), 0.75);
    }

    #[test]
    fn regularizer_grads_match_finite_differences() {
        let t = random_table(4, 3, 2, 3);
        let mut g = vec![0.0; t.entries().len()];
        add_regularizer_grads(&t, 0.7, 1.3, &mut g);
        let f = |t: &LutTable| 0.7 * loss_smooth(t) + 1.3 * loss_mono(t);
        let h = 1e-6;
        for i in 0..t.entries().len() {
            let mut up = t.clone();
            up.entries_mut()[i] += h;
            let mut dn = t.clone();
            dn.entries_mut()[i] -= h;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-6 * fd.abs().max(1.0), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn fidelity_examples() {
        let gt = MultiBandImage::filled(3, 2, 4, 0.4);
        assert_eq!(loss_fidelity(&gt, &gt).unwrap(), 0.0);
        let pred = MultiBandImage::filled(3, 2, 4, 0.5);
        assert!((loss_fidelity(&pred, &gt).unwrap() - 0.01).abs() < 1e-15);
        assert!(loss_fidelity(&pred, &MultiBandImage::zeros(3, 3, 4)).is_err());
    }

    #[test]
    fn lr_schedule() {
        let c = AdamConfig::default();
        assert_eq!(c.lr_at(0), 5e-4);
        assert_eq!(c.lr_at(199), 5e-4);
        assert_eq!(c.lr_at(200), 2.5e-4);
        assert_eq!(c.lr_at(400), 1.25e-4);
        assert_eq!(c.lr_at(999), 5e-4 / 16.0);
    }

    #[test]
    fn adam_matches_unrolled_recurrence() {
        let mut st = OptimState::new(AdamConfig::default(), 1);
        let mut p = [1.0];
        let (mut m, mut v, mut q) = (0.0f64, 0.0f64, 1.0f64);
        for t in 1..=5 {
            let g = 2.0 * p[0];
            st.adam_step(&mut p, &[g], 0).unwrap();
            let g = 2.0 * q;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            q -= 5e-4 * mh / (vh.sqrt() + 1e-8);
            assert!((p[0] - q).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_zero_gradient_and_nan() {
        let mut st = OptimState::new(AdamConfig::default(), 2);
        let mut p = [0.3, -0.2];
        st.adam_step(&mut p, &[1.0, 1.0], 0).unwrap();
        let before = p;
        let m0 = st.m.clone();
        st.adam_step(&mut p, &[0.0, 0.0], 0).unwrap();
        assert!(st.m.iter().zip(&m0).all(|(a, b)| a.abs() < b.abs()));
        // Momentum keeps moving the parameters; a fresh state would not.
        let mut fresh = OptimState::new(AdamConfig::default(), 2);
        let mut q = before;
        fresh.adam_step(&mut q, &[0.0, 0.0], 0).unwrap();
        assert_eq!(q, before);
        assert!(matches!(st.adam_step(&mut p, &[f64::NAN, 0.0], 0), Err(Error::Numeric(_))));
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let c = AdamConfig {
            base_lr: 1e-3,
            ..AdamConfig::default()
        };
        for p0 in [1.0, -1.0] {
            let mut st = OptimState::new(c, 1);
            let mut p = [p0];
            st.adam_step(&mut p, &[2.0 * p0], 0).unwrap();
            assert!(p[0] * p[0] < p0 * p0);
        }
    }

    #[test]
    fn segmented_step_equals_flat_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p: Vec<f64> = (0..10).map(|_| rng.gen()).collect();
        let g: Vec<f64> = (0..10).map(|_| rng.gen::<f64>() - 0.5).collect();
        let mut flat = p.clone();
        let mut a = OptimState::new(AdamConfig::default(), 10);
        a.adam_step(&mut flat, &g, 3).unwrap();
        let mut b = OptimState::new(AdamConfig::default(), 10);
        let (mut x, mut y) = (p[..4].to_vec(), p[4..].to_vec());
        b.step_segments(&mut [&mut x, &mut y], &[&g[..4], &g[4..]], 3).unwrap();
        assert_eq!(&flat[..4], &x[..]);
        assert_eq!(&flat[4..], &y[..]);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_epochs_returns_identity() {
        let pair = TrainingPair {
            pan: MultiBandImage::filled(8, 8, 1, 0.5),
            ms: MultiBandImage::filled(2, 2, 4, 0.5),
            gt: MultiBandImage::filled(8, 8, 4, 0.5),
        };
        let cfg = TrainConfig {
            points: 3,
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train(&[pair], &cfg).unwrap();
        assert_eq!(out.model, PanLutModel::identity(3, SdMode::Chained).unwrap());
        assert!(out.log.is_empty());
        assert!(train(&[], &cfg).is_err());
    }

    #[test]
    fn training_at_the_optimum_stays_put() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ms = MultiBandImage::from_samples(2, 2, 4, (0..16).map(|_| rng.gen_range(0.3..0.7)).collect()).unwrap();
        let pan = MultiBandImage::from_samples(8, 8, 1, (0..64).map(|_| rng.gen()).collect()).unwrap();
        let gt = crate::pipeline::sharpen(&PanLutModel::identity(3, SdMode::Chained).unwrap(), &pan, &ms).unwrap();
        let cfg = TrainConfig {
            points: 3,
            epochs: 300,
            ..TrainConfig::default()
        };
        let out = train(&[TrainingPair { pan, ms, gt }], &cfg).unwrap();
        assert!(out.log[0].fidelity < 1e-20);
        assert!(out.log.last().unwrap().loss <= out.log[0].loss);
    }

    #[test]
    fn training_is_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mk = |n: usize, c: usize, rng: &mut ChaCha8Rng| {
            let w = (n as f64).sqrt() as usize;
            MultiBandImage::from_samples(w, w, c, (0..n * c).map(|_| rng.gen()).collect()).unwrap()
        };
        let pair = TrainingPair {
            pan: mk(64, 1, &mut rng),
            ms: mk(4, 4, &mut rng),
            gt: mk(64, 4, &mut rng),
        };
        let cfg = TrainConfig {
            points: 3,
            epochs: 5,
            ..TrainConfig::default()
        };
        let a = train(std::slice::from_ref(&pair), &cfg).unwrap();
        let b = train(std::slice::from_ref(&pair), &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.log, b.log);
        let plain = TrainConfig {
            loss: LossConfig { lambda_s: 0.0, lambda_m: 0.0 },
            ..cfg
        };
        let c = train(std::slice::from_ref(&pair), &plain).unwrap();
        assert!(c.log.last().unwrap().fidelity < c.log[0].fidelity);
    }

    proptest! {
        #[test]
        fn regularizers_ignore_channel_order(seed in 0u64..1000) {
            let t = random_table(4, 3, 3, seed);
            let perm = [2usize, 0, 1];
            let s = LutTable::from_fn(4, 3, 3, |idx, e| t.get(idx, perm[e])).unwrap();
            prop_assert!((loss_smooth(&t) - loss_smooth(&s)).abs() < 1e-12);
            prop_assert!((loss_mono(&t) - loss_mono(&s)).abs() < 1e-12);
        }

        #[test]
        fn mono_is_zero_only_for_monotone_tables(seed in 0u64..1000, bump in 0.01f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
            let mut t = LutTable::from_fn(3, 4, 1, |idx, _| {
                idx.iter().zip(&w).map(|(i, w)| *i as f64 * w).sum()
            }).unwrap();
            prop_assert_eq!(loss_mono(&t), 0.0);
            let i = rng.gen_range(0..t.entries().len());
            t.entries_mut()[i] += bump * 100.0;
            let last = t.entries().len() - 1;
            prop_assert_eq!(loss_mono(&t) > 0.0, i != last);
        }
    }
}
