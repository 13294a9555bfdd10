//! Knowledge integration: injecting retrieved candidate embeddings into the
//! input patch embedding before it reaches the frozen forecaster.
//!
//! Channel prompting flattens the input embedding `x̃` and each candidate
//! embedding `c̃ᵢ`, runs `zᵢ = [x̃; c̃ᵢ]` through a shared MLP back to `n·d`
//! values, averages over candidates and adds the result to `x̃`:
//!
//! ```text
//! x̃* = x̃ + (1/k) Σᵢ MLP([flat(x̃); flat(c̃ᵢ)])
//! ```
//!
//! The output layer starts at zero, so an untrained fusion reproduces the
//! bare forecaster exactly. Token-concat and plain averaging are provided as
//! ablation baselines.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{check_len, Error, Result};
use crate::numkit::{axpy, Activation, ActivationCache, Grads, Matrix, MlpParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum FusionPolicy {
    ChannelPrompt,
    TokenConcat,
    Average,
    /// No retrieval at all; the bare forecaster.
    None,
}

impl FusionPolicy {
    pub const ALL: [FusionPolicy; 4] = [Self::ChannelPrompt, Self::TokenConcat, Self::Average, Self::None];

    pub fn name(&self) -> &'static str {
        match self {
            Self::ChannelPrompt => "channel_prompt",
            Self::TokenConcat => "token_concat",
            Self::Average => "average",
            Self::None => "none",
        }
    }

    pub fn uses_candidates(&self) -> bool {
        !matches!(self, Self::None)
    }
}

/// Widths of a four-layer tanh MLP mapping `2·w → w`: `[2w, 2w, w, w] → w`.
fn four_layer_dims(w: usize) -> [usize; 5] {
    [2 * w, 2 * w, w, w, w]
}

fn check_shapes(x: &Matrix, cands: &[&Matrix]) -> Result<()> {
    if cands.is_empty() {
        return Err(Error::Empty("candidate embeddings"));
    }
    for c in cands {
        check_len("candidate embedding rows", x.rows(), c.rows())?;
        check_len("candidate embedding cols", x.cols(), c.cols())?;
    }
    Ok(())
}

/// Gradients of a fusion output with respect to its embedding inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionInputGrads {
    pub x: Vec<f64>,
    pub cands: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelPrompt {
    mlp: MlpParams,
    n: usize,
    d: usize,
}

impl ChannelPrompt {
    pub fn new<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Result<Self> {
        let mut mlp = MlpParams::init(&four_layer_dims(n * d), Activation::Identity, rng)?;
        mlp.zero_output_layer();
        Ok(Self { mlp, n, d })
    }

    pub fn from_params(mlp: MlpParams, n: usize, d: usize) -> Result<Self> {
        check_len("channel prompt input", 2 * n * d, mlp.in_dim())?;
        check_len("channel prompt output", n * d, mlp.out_dim())?;
        Ok(Self { mlp, n, d })
    }

    pub fn mlp(&self) -> &MlpParams {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut MlpParams {
        &mut self.mlp
    }

    fn concat(x: &Matrix, c: &Matrix) -> Vec<f64> {
        let mut z = Vec::with_capacity(2 * x.as_slice().len());
        z.extend_from_slice(x.as_slice());
        z.extend_from_slice(c.as_slice());
        z
    }

    fn check(&self, x: &Matrix, cands: &[&Matrix]) -> Result<()> {
        check_len("input embedding rows", self.n, x.rows())?;
        check_len("input embedding cols", self.d, x.cols())?;
        check_shapes(x, cands)
    }

    pub fn fuse(&self, x: &Matrix, cands: &[&Matrix]) -> Result<Matrix> {
        self.check(x, cands)?;
        let scale = 1.0 / cands.len() as f64;
        let mut out = x.clone();
        for c in cands {
            let m = self.mlp.infer(&Self::concat(x, c))?;
            axpy(scale, &m, out.as_mut_slice());
        }
        Ok(out)
    }

    pub fn fuse_traced(&self, x: &Matrix, cands: &[&Matrix]) -> Result<(Matrix, Vec<ActivationCache>)> {
        self.check(x, cands)?;
        let scale = 1.0 / cands.len() as f64;
        let mut out = x.clone();
        let mut caches = Vec::with_capacity(cands.len());
        for c in cands {
            let mut cache = ActivationCache::new();
            let m = self.mlp.forward(&Self::concat(x, c), &mut cache)?;
            axpy(scale, &m, out.as_mut_slice());
            caches.push(cache);
        }
        Ok((out, caches))
    }

    pub fn backward(
        &self,
        caches: &[ActivationCache],
        fused_grad: &[f64],
        grads: Option<&mut Grads>,
    ) -> Result<FusionInputGrads> {
        let nd = self.n * self.d;
        check_len("fused gradient", nd, fused_grad.len())?;
        let k = caches.len();
        let scaled: Vec<f64> = fused_grad.iter().map(|g| g / k as f64).collect();
        let mut dx = fused_grad.to_vec();
        let mut dcands = Vec::with_capacity(k);
        let mut grads = grads;
        for cache in caches {
            let dz = self.mlp.backward(cache, &scaled, grads.as_deref_mut())?;
            axpy(1.0, &dz[..nd], &mut dx);
            dcands.push(dz[nd..].to_vec());
        }
        Ok(FusionInputGrads { x: dx, cands: dcands })
    }
}

/// Token-level baseline: each patch position `j` sees only `[x̃ⱼ; c̄ⱼ]`
/// where `c̄` is the mean candidate embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenConcat {
    mlp: MlpParams,
    d: usize,
}

impl TokenConcat {
    pub fn new<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<Self> {
        let mut mlp = MlpParams::init(&four_layer_dims(d), Activation::Identity, rng)?;
        mlp.zero_output_layer();
        Ok(Self { mlp, d })
    }

    pub fn from_params(mlp: MlpParams, d: usize) -> Result<Self> {
        check_len("token concat input", 2 * d, mlp.in_dim())?;
        check_len("token concat output", d, mlp.out_dim())?;
        Ok(Self { mlp, d })
    }

    pub fn mlp(&self) -> &MlpParams {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut MlpParams {
        &mut self.mlp
    }

    fn token_inputs(&self, x: &Matrix, cands: &[&Matrix]) -> Result<Vec<Vec<f64>>> {
        check_len("input embedding cols", self.d, x.cols())?;
        check_shapes(x, cands)?;
        let scale = 1.0 / cands.len() as f64;
        Ok((0..x.rows())
            .map(|j| {
                let mut u = Vec::with_capacity(2 * self.d);
                u.extend_from_slice(x.row(j));
                let mut mean = vec![0.0; self.d];
                for c in cands {
                    axpy(scale, c.row(j), &mut mean);
                }
                u.extend_from_slice(&mean);
                u
            })
            .collect())
    }

    pub fn fuse(&self, x: &Matrix, cands: &[&Matrix]) -> Result<Matrix> {
        let inputs = self.token_inputs(x, cands)?;
        let mut out = x.clone();
        for (j, u) in inputs.iter().enumerate() {
            let m = self.mlp.infer(u)?;
            axpy(1.0, &m, out.row_mut(j));
        }
        Ok(out)
    }

    pub fn fuse_traced(&self, x: &Matrix, cands: &[&Matrix]) -> Result<(Matrix, Vec<ActivationCache>)> {
        let inputs = self.token_inputs(x, cands)?;
        let mut out = x.clone();
        let mut caches = Vec::with_capacity(inputs.len());
        for (j, u) in inputs.iter().enumerate() {
            let mut cache = ActivationCache::new();
            let m = self.mlp.forward(u, &mut cache)?;
            axpy(1.0, &m, out.row_mut(j));
            caches.push(cache);
        }
        Ok((out, caches))
    }

    pub fn backward(
        &self,
        caches: &[ActivationCache],
        k: usize,
        fused_grad: &[f64],
        grads: Option<&mut Grads>,
    ) -> Result<FusionInputGrads> {
        let d = self.d;
        check_len("fused gradient", caches.len() * d, fused_grad.len())?;
        let mut dx = fused_grad.to_vec();
        let mut dmean = vec![0.0; fused_grad.len()];
        let mut grads = grads;
        for (j, cache) in caches.iter().enumerate() {
            let g = &fused_grad[j * d..(j + 1) * d];
            let du = self.mlp.backward(cache, g, grads.as_deref_mut())?;
            axpy(1.0, &du[..d], &mut dx[j * d..(j + 1) * d]);
            dmean[j * d..(j + 1) * d].copy_from_slice(&du[d..]);
        }
        let per: Vec<f64> = dmean.iter().map(|g| g / k as f64).collect();
        Ok(FusionInputGrads {
            x: dx,
            cands: vec![per; k],
        })
    }
}

/// Parameter-free baseline: the elementwise mean of `x̃` and every `c̃ᵢ`.
pub fn average_baseline(x: &Matrix, cands: &[&Matrix]) -> Result<Matrix> {
    check_shapes(x, cands)?;
    let scale = 1.0 / (cands.len() + 1) as f64;
    let mut out = Matrix::zeros(x.rows(), x.cols());
    axpy(scale, x.as_slice(), out.as_mut_slice());
    for c in cands {
        axpy(scale, c.as_slice(), out.as_mut_slice());
    }
    Ok(out)
}

/// Activations recorded by [`Fusion::fuse_traced`].
#[derive(Debug, Clone)]
pub enum FusionTrace {
    ChannelPrompt(Vec<ActivationCache>),
    TokenConcat { caches: Vec<ActivationCache>, k: usize },
    Average { k: usize },
    None,
}

/// The fusion used by a model, chosen by [`FusionPolicy`].
#[derive(Debug, Clone, PartialEq)]
pub enum Fusion {
    ChannelPrompt(ChannelPrompt),
    TokenConcat(TokenConcat),
    Average,
    None,
}

impl Fusion {
    pub fn new<R: Rng + ?Sized>(policy: FusionPolicy, n: usize, d: usize, rng: &mut R) -> Result<Self> {
        Ok(match policy {
            FusionPolicy::ChannelPrompt => Self::ChannelPrompt(ChannelPrompt::new(n, d, rng)?),
            FusionPolicy::TokenConcat => Self::TokenConcat(TokenConcat::new(d, rng)?),
            FusionPolicy::Average => Self::Average,
            FusionPolicy::None => Self::None,
        })
    }

    pub fn policy(&self) -> FusionPolicy {
        match self {
            Self::ChannelPrompt(_) => FusionPolicy::ChannelPrompt,
            Self::TokenConcat(_) => FusionPolicy::TokenConcat,
            Self::Average => FusionPolicy::Average,
            Self::None => FusionPolicy::None,
        }
    }

    /// Trainable parameters, if the policy has any.
    pub fn params(&self) -> Option<&MlpParams> {
        match self {
            Self::ChannelPrompt(c) => Some(c.mlp()),
            Self::TokenConcat(t) => Some(t.mlp()),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<&mut MlpParams> {
        match self {
            Self::ChannelPrompt(c) => Some(c.mlp_mut()),
            Self::TokenConcat(t) => Some(t.mlp_mut()),
            _ => None,
        }
    }

    pub fn fingerprint(&self) -> u64 {
        self.params().map_or(0, MlpParams::fingerprint)
    }

    pub fn fuse(&self, x: &Matrix, cands: &[&Matrix]) -> Result<Matrix> {
        match self {
            Self::ChannelPrompt(c) => c.fuse(x, cands),
            Self::TokenConcat(t) => t.fuse(x, cands),
            Self::Average => average_baseline(x, cands),
            Self::None => Ok(x.clone()),
        }
    }

    pub fn fuse_traced(&self, x: &Matrix, cands: &[&Matrix]) -> Result<(Matrix, FusionTrace)> {
        match self {
            Self::ChannelPrompt(c) => c.fuse_traced(x, cands).map(|(m, t)| (m, FusionTrace::ChannelPrompt(t))),
            Self::TokenConcat(t) => t
                .fuse_traced(x, cands)
                .map(|(m, caches)| (m, FusionTrace::TokenConcat { caches, k: cands.len() })),
            Self::Average => average_baseline(x, cands).map(|m| (m, FusionTrace::Average { k: cands.len() })),
            Self::None => Ok((x.clone(), FusionTrace::None)),
        }
    }

    /// Gradients with respect to the fusion inputs; parameter gradients are
    /// added into `grads` when the policy has parameters.
    pub fn backward(&self, trace: &FusionTrace, fused_grad: &[f64], grads: Option<&mut Grads>) -> Result<FusionInputGrads> {
        match (self, trace) {
            (Self::ChannelPrompt(c), FusionTrace::ChannelPrompt(caches)) => c.backward(caches, fused_grad, grads),
            (Self::TokenConcat(t), FusionTrace::TokenConcat { caches, k }) => t.backward(caches, *k, fused_grad, grads),
            (Self::Average, FusionTrace::Average { k }) => {
                let g: Vec<f64> = fused_grad.iter().map(|v| v / (*k + 1) as f64).collect();
                Ok(FusionInputGrads {
                    x: g.clone(),
                    cands: vec![g; *k],
                })
            }
            (Self::None, FusionTrace::None) => Ok(FusionInputGrads {
                x: fused_grad.to_vec(),
                cands: Vec::new(),
            }),
            _ => Err(Error::Config("fusion trace does not match the fusion policy".into())),
        }
    }
}
