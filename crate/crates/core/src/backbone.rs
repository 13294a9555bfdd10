//! A small patch-based forecaster standing in for a pretrained foundation
//! model: a shared per-patch linear projection (`patch_len → d`), a two-layer
//! tanh trunk over the flattened `n × d` embedding, and a linear head to the
//! horizon. It is pretrained once and then frozen.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{check_len, Error, Result};
use crate::numkit::{mse, mse_grad, Activation, ActivationCache, Grads, Matrix, MlpParams, OptimizerKind, OptimizerState};
use crate::tsdata::{denormalize, instance_normalize, patch_count, patchify, NormStats, WindowPair};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BackboneDims {
    pub sl: usize,
    pub fl: usize,
    pub patch_len: usize,
    pub d: usize,
}

impl Default for BackboneDims {
    fn default() -> Self {
        Self {
            sl: 512,
            fl: 96,
            patch_len: 64,
            d: 16,
        }
    }
}

impl BackboneDims {
    /// Number of non-overlapping patches per window.
    pub fn n(&self) -> usize {
        self.sl / self.patch_len
    }

    /// Width of the flattened patch embedding.
    pub fn embed_len(&self) -> usize {
        self.n() * self.d
    }

    pub fn validate(&self) -> Result<()> {
        if self.fl == 0 || self.d == 0 {
            return Err(Error::Config("horizon and embedding width must be positive".into()));
        }
        patch_count(self.sl, self.patch_len, self.patch_len).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 1e-3,
            batch_size: 8,
            seed: 0,
            optimizer: OptimizerKind::ADAM,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PretrainReport {
    /// Normalized-space MSE over all pairs before training.
    pub initial_loss: f64,
    /// Normalized-space MSE over all pairs after each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

/// Activations of the trunk and head recorded for backpropagation.
#[derive(Debug, Clone, Default)]
pub struct ForecastTrace {
    trunk: ActivationCache,
    head: ActivationCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    dims: BackboneDims,
    proj: MlpParams,
    trunk: MlpParams,
    head: MlpParams,
}

impl Backbone {
    pub fn new(dims: BackboneDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nd = dims.embed_len();
        let proj = MlpParams::init(&[dims.patch_len, dims.d], Activation::Identity, &mut rng)?;
        let trunk = MlpParams::init(&[nd, 2 * nd, 2 * nd], Activation::Tanh, &mut rng)?;
        let head = MlpParams::init(&[2 * nd, dims.fl], Activation::Identity, &mut rng)?;
        Ok(Self {
            dims,
            proj,
            trunk,
            head,
        })
    }

    pub fn from_parts(dims: BackboneDims, proj: MlpParams, trunk: MlpParams, head: MlpParams) -> Result<Self> {
        dims.validate()?;
        check_len("projection input", dims.patch_len, proj.in_dim())?;
        check_len("projection output", dims.d, proj.out_dim())?;
        check_len("trunk input", dims.embed_len(), trunk.in_dim())?;
        check_len("head input", trunk.out_dim(), head.in_dim())?;
        check_len("head output", dims.fl, head.out_dim())?;
        Ok(Self {
            dims,
            proj,
            trunk,
            head,
        })
    }

    pub fn dims(&self) -> BackboneDims {
        self.dims
    }

    pub fn proj(&self) -> &MlpParams {
        &self.proj
    }

    pub fn trunk(&self) -> &MlpParams {
        &self.trunk
    }

    pub fn head(&self) -> &MlpParams {
        &self.head
    }

    pub fn zero_head(&mut self) {
        self.head.zero_output_layer();
    }

    pub fn freeze(&mut self) {
        self.proj.freeze();
        self.trunk.freeze();
        self.head.freeze();
    }

    pub fn is_frozen(&self) -> bool {
        self.proj.is_frozen() && self.trunk.is_frozen() && self.head.is_frozen()
    }

    pub fn fingerprint(&self) -> u64 {
        let crc = crc::Crc::<u64>::new(&crc::CRC_64_XZ);
        let mut d = crc.digest();
        for p in [&self.proj, &self.trunk, &self.head] {
            d.update(&p.fingerprint().to_le_bytes());
        }
        d.finalize()
    }

    /// Projects every patch row with the shared projection.
    pub fn embed_patches(&self, patches: &Matrix) -> Result<Matrix> {
        check_len("patch length", self.dims.patch_len, patches.cols())?;
        let mut emb = Matrix::zeros(patches.rows(), self.dims.d);
        for i in 0..patches.rows() {
            let row = self.proj.infer(patches.row(i))?;
            emb.row_mut(i).copy_from_slice(&row);
        }
        Ok(emb)
    }

    /// Patch embedding of an already normalized window.
    pub fn embed_window(&self, xn: &[f64]) -> Result<Matrix> {
        check_len("lookback window", self.dims.sl, xn.len())?;
        self.embed_patches(&patchify(xn, self.dims.patch_len, self.dims.patch_len)?)
    }

    fn check_embedding(&self, emb: &Matrix) -> Result<()> {
        check_len("embedding rows", self.dims.n(), emb.rows())?;
        check_len("embedding cols", self.dims.d, emb.cols())
    }

    /// Forecast in normalized units.
    pub fn forecast_normalized(&self, emb: &Matrix) -> Result<Vec<f64>> {
        self.check_embedding(emb)?;
        let h = self.trunk.infer(emb.as_slice())?;
        self.head.infer(&h)
    }

    pub fn forecast_traced(&self, emb: &Matrix) -> Result<(Vec<f64>, ForecastTrace)> {
        self.check_embedding(emb)?;
        let mut trace = ForecastTrace::default();
        let h = self.trunk.forward(emb.as_slice(), &mut trace.trunk)?;
        let out = self.head.forward(&h, &mut trace.head)?;
        Ok((out, trace))
    }

    /// Gradient of a loss with respect to the flattened embedding, given its
    /// gradient with respect to the normalized forecast. Parameter gradients
    /// go into `grads` (trunk, head) unless the backbone is frozen.
    pub fn embedding_grad(
        &self,
        trace: &ForecastTrace,
        forecast_grad: &[f64],
        grads: Option<(&mut Grads, &mut Grads)>,
    ) -> Result<Vec<f64>> {
        let (tg, hg) = match grads {
            Some((t, h)) => (Some(t), Some(h)),
            None => (None, None),
        };
        let dh = self.head.backward(&trace.head, forecast_grad, hg)?;
        self.trunk.backward(&trace.trunk, &dh, tg)
    }

    pub fn forecast_from_embedding(&self, emb: &Matrix, stats: NormStats) -> Result<Vec<f64>> {
        let yn = self.forecast_normalized(emb)?;
        let y = denormalize(&yn, stats);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("forecast"));
        }
        Ok(y)
    }

    /// normalize → patchify → embed → forecast → denormalize.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (xn, stats) = instance_normalize(x);
        let emb = self.embed_window(&xn)?;
        self.forecast_from_embedding(&emb, stats)
    }

    /// Normalized-space MSE averaged over `pairs`.
    pub fn normalized_mse(&self, pairs: &[WindowPair]) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::Empty("window pairs"));
        }
        let mut total = 0.0;
        for p in pairs {
            let (xn, _) = instance_normalize(&p.x);
            let yn = self.forecast_normalized(&self.embed_window(&xn)?)?;
            total += mse(&yn, &p.normalized_target())?;
        }
        Ok(total / pairs.len() as f64)
    }

    /// Minimizes normalized-space MSE over `pairs`, then freezes.
    pub fn pretrain(&mut self, pairs: &[WindowPair], cfg: &PretrainConfig) -> Result<PretrainReport> {
        if self.is_frozen() {
            return Err(Error::Frozen);
        }
        if pairs.is_empty() {
            return Err(Error::Empty("pretraining pairs"));
        }
        if cfg.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let initial_loss = self.normalized_mse(pairs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut grads = [
            Grads::for_params(&self.proj),
            Grads::for_params(&self.trunk),
            Grads::for_params(&self.head),
        ];
        let mut opts = [
            OptimizerState::new(cfg.optimizer, cfg.lr, &self.proj),
            OptimizerState::new(cfg.optimizer, cfg.lr, &self.trunk),
            OptimizerState::new(cfg.optimizer, cfg.lr, &self.head),
        ];
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut epoch_losses = Vec::with_capacity(cfg.epochs);
        let scale = 1.0 / cfg.batch_size as f64;
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(cfg.batch_size) {
                for &i in batch {
                    let loss = self.accumulate_pair(&pairs[i], scale, &mut grads)?;
                    if !loss.is_finite() {
                        return Err(Error::NonFinite("pretraining loss"));
                    }
                }
                let [pg, tg, hg] = &mut grads;
                let [po, to, ho] = &mut opts;
                po.step(&mut self.proj, pg)?;
                to.step(&mut self.trunk, tg)?;
                ho.step(&mut self.head, hg)?;
            }
            let loss = self.normalized_mse(pairs)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("pretraining loss"));
            }
            epoch_losses.push(loss);
        }
        self.freeze();
        Ok(PretrainReport {
            initial_loss,
            epoch_losses,
            steps: opts[0].steps(),
        })
    }

    fn accumulate_pair(&self, pair: &WindowPair, scale: f64, grads: &mut [Grads; 3]) -> Result<f64> {
        let (xn, _) = instance_normalize(&pair.x);
        let patches = patchify(&xn, self.dims.patch_len, self.dims.patch_len)?;
        let mut proj_caches = vec![ActivationCache::new(); patches.rows()];
        let mut emb = Matrix::zeros(patches.rows(), self.dims.d);
        for (i, cache) in proj_caches.iter_mut().enumerate() {
            let row = self.proj.forward(patches.row(i), cache)?;
            emb.row_mut(i).copy_from_slice(&row);
        }
        let (yn, trace) = self.forecast_traced(&emb)?;
        let target = pair.normalized_target();
        let loss = mse(&yn, &target)?;
        let g: Vec<f64> = mse_grad(&yn, &target)?.into_iter().map(|v| v * scale).collect();
        let [pg, tg, hg] = grads;
        let demb = self.embedding_grad(&trace, &g, Some((tg, hg)))?;
        for (i, cache) in proj_caches.iter().enumerate() {
            let d = self.dims.d;
            self.proj.backward(cache, &demb[i * d..(i + 1) * d], Some(pg))?;
        }
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Grads;
    use crate::tsdata::{sliding_windows, Series};
    use alloc::string::ToString;
    use rand::Rng;

    fn small() -> BackboneDims {
        BackboneDims {
            sl: 16,
            fl: 4,
            patch_len: 4,
            d: 3,
        }
    }

    fn sinusoid(len: usize, period: f64, phase: f64) -> Series {
        Series {
            values: (0..len)
                .map(|t| libm::sin(2.0 * core::f64::consts::PI * t as f64 / period + phase))
                .collect(),
            channel_id: "c".to_string(),
            dataset_id: "d".to_string(),
            domain: "sin".to_string(),
            frequency: "h".to_string(),
        }
    }

    #[test]
    fn default_dims() {
        let d = BackboneDims::default();
        assert_eq!((d.n(), d.embed_len(), d.fl), (8, 128, 96));
        let b = Backbone::new(d, 0).unwrap();
        let emb = b.embed_window(&[0.0; 512]).unwrap();
        assert_eq!(emb.shape(), (8, 16));
        assert_eq!(b.predict(&[1.0; 512]).unwrap().len(), 96);
    }

    #[test]
    fn zero_patches_give_zero_embedding() {
        let b = Backbone::new(small(), 1).unwrap();
        let emb = b.embed_patches(&Matrix::zeros(4, 4)).unwrap();
        assert!(emb.as_slice().iter().all(|v| *v == 0.0));
        assert!(b.embed_patches(&Matrix::zeros(4, 5)).is_err());
    }

    #[test]
    fn embedding_is_row_wise() {
        let b = Backbone::new(small(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = Matrix::zeros(4, 4);
        p.as_mut_slice().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let mut swapped = p.clone();
        swapped.row_mut(0).copy_from_slice(p.row(2));
        swapped.row_mut(2).copy_from_slice(p.row(0));
        let (e, es) = (b.embed_patches(&p).unwrap(), b.embed_patches(&swapped).unwrap());
        assert_eq!(e.row(0), es.row(2));
        assert_eq!(e.row(2), es.row(0));
        assert_eq!(e.row(1), es.row(1));
    }

    #[test]
    fn zero_head_forecasts_the_mean() {
        let mut b = Backbone::new(small(), 4).unwrap();
        b.zero_head();
        let stats = NormStats { mean: 2.5, std: 3.0 };
        let y = b.forecast_from_embedding(&Matrix::zeros(4, 3), stats).unwrap();
        assert_eq!(y, vec![2.5; 4]);
        assert_eq!(b.predict(&[7.0; 16]).unwrap(), vec![7.0; 4]);
        assert!(b.forecast_from_embedding(&Matrix::zeros(3, 3), stats).is_err());
    }

    #[test]
    fn embedding_gradient_matches_finite_differences() {
        for seed in 0..3 {
            let b = Backbone::new(small(), seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 10);
            let mut emb = Matrix::zeros(4, 3);
            emb.as_mut_slice().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            let target: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (yn, trace) = b.forecast_traced(&emb).unwrap();
            let g = mse_grad(&yn, &target).unwrap();
            let analytic = b.embedding_grad(&trace, &g, None).unwrap();
            let h = 1e-5;
            for i in 0..emb.as_slice().len() {
                let mut up = emb.clone();
                up.as_mut_slice()[i] += h;
                let mut down = emb.clone();
                down.as_mut_slice()[i] -= h;
                let fd = (mse(&b.forecast_normalized(&up).unwrap(), &target).unwrap()
                    - mse(&b.forecast_normalized(&down).unwrap(), &target).unwrap())
                    / (2.0 * h);
                let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-7);
                assert!(err < 1e-4, "seed {seed} emb {i}: {fd} vs {}", analytic[i]);
            }
        }
    }

    fn part_mut(b: &mut Backbone, part: usize) -> &mut MlpParams {
        match part {
            0 => &mut b.proj,
            1 => &mut b.trunk,
            _ => &mut b.head,
        }
    }

    #[test]
    fn pretrain_gradients_match_finite_differences() {
        let s = sinusoid(40, 7.0, 0.3);
        let pairs = sliding_windows(&s, 16, 4, 5);
        let pair = &pairs[1];
        for seed in 0..3 {
            let b = Backbone::new(small(), seed).unwrap();
            let mut grads = [Grads::for_params(&b.proj), Grads::for_params(&b.trunk), Grads::for_params(&b.head)];
            b.accumulate_pair(pair, 1.0, &mut grads).unwrap();
            let loss = |bb: &Backbone| bb.normalized_mse(core::slice::from_ref(pair)).unwrap();
            let h = 1e-5;
            for part in 0..3 {
                let analytic = grads[part].flat();
                for i in 0..analytic.len() {
                    let mut bb = b.clone();
                    let orig = *part_mut(&mut bb, part).param_mut(i);
                    *part_mut(&mut bb, part).param_mut(i) = orig + h;
                    let up = loss(&bb);
                    *part_mut(&mut bb, part).param_mut(i) = orig - h;
                    let down = loss(&bb);
                    let fd = (up - down) / (2.0 * h);
                    let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-7);
                    assert!(err < 1e-4, "seed {seed} part {part} param {i}: {fd} vs {}", analytic[i]);
                }
            }
        }
    }

    #[test]
    fn pretraining_reduces_loss_and_freezes() {
        let s = sinusoid(200, 9.0, 0.0);
        let pairs: Vec<WindowPair> = sliding_windows(&s, 16, 4, 1).into_iter().take(10).collect();
        let mut b = Backbone::new(small(), 5).unwrap();
        let cfg = PretrainConfig {
            epochs: 1,
            lr: 1e-2,
            batch_size: 1,
            seed: 0,
            optimizer: OptimizerKind::ADAM,
        };
        let report = b.pretrain(&pairs, &cfg).unwrap();
        assert!(report.epoch_losses[0] < report.initial_loss);
        assert!(b.is_frozen());
        assert_eq!(b.pretrain(&pairs, &cfg), Err(Error::Frozen));
        let mut g = Grads::for_params(&b.head);
        let mut cache = ActivationCache::new();
        b.head.forward(&vec![0.1; b.head.in_dim()], &mut cache).unwrap();
        let unfrozen = {
            let mut h = b.head.clone();
            h.set_frozen(false);
            h
        };
        unfrozen.backward(&cache, &[1.0; 4], Some(&mut g)).unwrap();
        let mut opt = OptimizerState::new(OptimizerKind::ADAM, 0.1, &b.head);
        let mut head = b.head.clone();
        assert_eq!(opt.step(&mut head, &mut g), Err(Error::Frozen));
    }

    #[test]
    fn linear_trend_loss_curve_is_monotone() {
        let s = Series {
            values: (0..120).map(|t| 0.5 * t as f64 + 3.0).collect(),
            ..sinusoid(1, 1.0, 0.0)
        };
        let pairs = sliding_windows(&s, 16, 4, 2);
        let mut b = Backbone::new(small(), 6).unwrap();
        let cfg = PretrainConfig {
            epochs: 15,
            lr: 2e-2,
            batch_size: 4,
            seed: 1,
            optimizer: OptimizerKind::Sgd,
        };
        let report = b.pretrain(&pairs, &cfg).unwrap();
        let mut prev = report.initial_loss;
        for l in &report.epoch_losses {
            assert!(*l <= prev + 1e-6, "{:?}", report.epoch_losses);
            prev = *l;
        }
        assert!(prev < report.initial_loss);
    }

    #[test]
    fn predict_is_the_explicit_composition() {
        let b = Backbone::new(small(), 8).unwrap();
        let x: Vec<f64> = (0..16).map(|t| libm::cos(t as f64 * 0.7) * 4.0 + 1.0).collect();
        let (xn, stats) = instance_normalize(&x);
        let emb = b.embed_patches(&patchify(&xn, 4, 4).unwrap()).unwrap();
        assert_eq!(b.predict(&x).unwrap(), b.forecast_from_embedding(&emb, stats).unwrap());
        assert_eq!(b.predict(&x).unwrap(), b.predict(&x).unwrap());
    }

    #[test]
    fn dims_validation() {
        assert!(Backbone::new(BackboneDims { sl: 10, fl: 2, patch_len: 4, d: 2 }, 0).is_err());
        assert!(Backbone::new(BackboneDims { sl: 8, fl: 0, patch_len: 4, d: 2 }, 0).is_err());
    }
}
