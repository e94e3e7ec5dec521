//! Full model assembly: RevIN, a stack of multi-resolution blocks, and a
//! linear head over the time axis shared by all variates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    init_resolution_embedding, linear, resolution_embedding, transformer_block, xavier,
    BlockParams, HeadCount,
};
use crate::error::{Error, Result};
use crate::patching::{flatten_truncate, pad_to_multiple, resize_linear, segment};
use crate::spectral::{amplitude_spectrum, detect_salient_periods, PeriodicitySet};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Spectra whose strongest amplitude is at or below this are treated as flat
/// and handled by a single whole-window branch.
pub const FLAT_AMPLITUDE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub width: usize,
    pub blocks: usize,
    pub resolutions: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub dropout: f64,
    pub revin_eps: f64,
    pub use_res_emb: bool,
    pub share_re_globally: bool,
    pub learned_pos_emb: bool,
    pub block_residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            lookback: 96,
            horizon: 24,
            width: 64,
            blocks: 2,
            resolutions: 3,
            heads: 4,
            ffn_width: 128,
            dropout: 0.1,
            revin_eps: 1e-5,
            use_res_emb: true,
            share_re_globally: true,
            learned_pos_emb: false,
            block_residual: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lookback", self.lookback),
            ("horizon", self.horizon),
            ("width", self.width),
            ("blocks", self.blocks),
            ("resolutions", self.resolutions),
            ("heads", self.heads),
            ("ffn_width", self.ffn_width),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::contract(format!("{name} must be positive")));
        }
        if self.lookback < 2 {
            return Err(Error::contract("lookback must be at least 2"));
        }
        HeadCount::new(self.heads, self.width)?;
        if self.resolutions > self.lookback / 2 {
            return Err(Error::contract(format!(
                "resolutions = {} exceeds lookback / 2 = {}",
                self.resolutions,
                self.lookback / 2
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::contract("dropout must lie in [0, 1)"));
        }
        if !(self.revin_eps > 0.0) {
            return Err(Error::contract("revin_eps must be positive"));
        }
        Ok(())
    }
}

/// Handles to every learnable tensor, plus the store holding their values.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub store: ParamStore,
    pub blocks: Vec<BlockParams>,
    pub head_w: ParamId,
    pub head_b: ParamId,
    pub global_re: Option<ParamId>,
    pub pos_emb: Option<ParamId>,
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let own_re = cfg.use_res_emb && !cfg.share_re_globally;
        let blocks = (0..cfg.blocks)
            .map(|i| {
                BlockParams::init(
                    &mut store,
                    &format!("block{i}"),
                    cfg.width,
                    cfg.ffn_width,
                    own_re,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let global_re = if cfg.use_res_emb && cfg.share_re_globally {
            Some(store.insert("re", init_resolution_embedding(cfg.width, &mut rng))?)
        } else {
            None
        };
        let pos_emb = if cfg.learned_pos_emb {
            let mut t = xavier(cfg.lookback, cfg.width, &mut rng);
            t.data_mut().iter_mut().for_each(|v| *v *= 0.1);
            Some(store.insert("pos_emb", t)?)
        } else {
            None
        };
        let head_w = store.insert("head.w", xavier(cfg.lookback, cfg.horizon, &mut rng))?;
        let head_b = store.insert("head.b", Tensor::zeros([cfg.horizon]))?;
        Ok(ModelParams {
            store,
            blocks,
            head_w,
            head_b,
            global_re,
            pos_emb,
        })
    }

    fn re_for(&self, block: usize) -> Option<ParamId> {
        self.global_re.or(self.blocks[block].re)
    }
}

/// Per-window temporal moments removed by [`revin_normalize`].
#[derive(Clone, Copy, Debug)]
pub struct RevinStats {
    /// `[B, 1, V]`
    pub mean: Var,
    /// `[B, 1, V]`, `sqrt(var + eps)`
    pub std: Var,
}

/// Zero-mean, unit-variance per (example, variate) along time. Gradients
/// flow through the statistics.
pub fn revin_normalize(g: &mut Graph, x: Var, eps: f64) -> Result<(Var, RevinStats)> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::contract(format!(
            "expected [B, I, V], got {shape:?}"
        )));
    }
    let mean = g.mean_axis(x, 1)?;
    let mean_full = g.expand(mean, &shape)?;
    let centered = g.sub(x, mean_full)?;
    let sq = g.square(centered);
    let var = g.mean_axis(sq, 1)?;
    let var = g.add_scalar(var, eps);
    let std = g.sqrt(var);
    let std_full = g.expand(std, &shape)?;
    let normalized = g.div(centered, std_full)?;
    Ok((normalized, RevinStats { mean, std }))
}

/// `y · std + mean`, broadcast over the time axis of `y: [B, O, V]`.
pub fn revin_denormalize(g: &mut Graph, y: Var, stats: RevinStats) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let std = g.expand(stats.std, &shape)?;
    let mean = g.expand(stats.mean, &shape)?;
    let scaled = g.mul(y, std)?;
    g.add(scaled, mean)
}

/// Periodicities a block uses for input `x`: detected on its current value,
/// falling back to one whole-window branch for a flat spectrum.
pub fn block_periodicities(x: &Tensor, k: usize) -> Result<PeriodicitySet> {
    let spectrum = amplitude_spectrum(x)?;
    let len = spectrum.window_length();
    if spectrum.max_amplitude() <= FLAT_AMPLITUDE {
        return Ok(PeriodicitySet::whole_window(len));
    }
    let set = detect_salient_periods(&spectrum, k)?;
    Ok(if set.is_empty() {
        PeriodicitySet::whole_window(len)
    } else {
        set
    })
}

/// One multi-resolution block over `x: [B, I, V]`.
///
/// Each branch pads and patches `x` at one period, resamples patches to the
/// model width, adds the scaled resolution embedding, runs the shared encoder
/// block, and undoes the patching. Branch outputs are summed with the
/// detection weights, which are constants for differentiation.
pub fn multires_block(
    g: &mut Graph,
    params: &ModelParams,
    block: usize,
    x: Var,
    cfg: &ModelConfig,
    periodicities: &PeriodicitySet,
) -> Result<Var> {
    let &[batch, len, variates] = g.shape(x) else {
        return Err(Error::contract(format!(
            "expected [B, I, V], got {:?}",
            g.shape(x)
        )));
    };
    if periodicities.is_empty() || periodicities.periods.len() != periodicities.weights.len() {
        return Err(Error::contract(
            "a block needs at least one weighted period",
        ));
    }
    let store = &params.store;
    let heads = HeadCount::new(cfg.heads, cfg.width)?;
    let d = cfg.width;
    let re = match params.re_for(block) {
        Some(id) if cfg.use_res_emb => Some(g.param(store, id)),
        _ => None,
    };
    let pos = params.pos_emb.map(|id| g.param(store, id));

    let mut total: Option<Var> = None;
    for (&period, &weight) in periodicities.periods.iter().zip(&periodicities.weights) {
        if period == 0 || period > len {
            return Err(Error::contract(format!(
                "period {period} outside [1, {len}]"
            )));
        }
        let padded = pad_to_multiple(g, x, period)?;
        let patches = segment(g, padded, period)?;
        let num_patches = g.shape(patches)[2];
        let shape = [batch, variates, num_patches, d];
        let mut tokens = resize_linear(g, patches, d)?;
        if let Some(re) = re {
            let emb = resolution_embedding(g, re, period)?;
            let emb = g.reshape(emb, &[1, 1, 1, d])?;
            let emb = g.expand(emb, &shape)?;
            tokens = g.add(tokens, emb)?;
        }
        if let Some(pos) = pos {
            let rows = g.slice(pos, 0, 0, num_patches)?;
            let rows = g.reshape(rows, &[1, 1, num_patches, d])?;
            let rows = g.expand(rows, &shape)?;
            tokens = g.add(tokens, rows)?;
        }
        let tokens = g.reshape(tokens, &[batch * variates, num_patches, d])?;
        let encoded =
            transformer_block(g, store, tokens, &params.blocks[block], heads, cfg.dropout)?;
        let encoded = g.reshape(encoded, &shape)?;
        let restored = resize_linear(g, encoded, period)?;
        let branch = flatten_truncate(g, restored, len)?;
        let branch = g.scale(branch, weight);
        total = Some(match total {
            Some(acc) => g.add(acc, branch)?,
            None => branch,
        });
    }
    let out = total.expect("at least one branch");
    if cfg.block_residual {
        g.add(out, x)
    } else {
        Ok(out)
    }
}

/// Prediction node plus the periodicities each block used.
#[derive(Debug)]
pub struct ForwardOutput {
    pub prediction: Var,
    pub periodicities: Vec<PeriodicitySet>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiResFormer {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl MultiResFormer {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(MultiResFormer { config, params })
    }

    /// Exact number of learnable scalars.
    pub fn count_parameters(&self) -> usize {
        self.params.store.scalar_count()
    }

    /// Forecasts `[B, O, V]` from `x: [B, I, V]`. The graph's mode decides
    /// whether dropout is active.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<ForwardOutput> {
        self.forward_with(g, x, None)
    }

    /// Like [`forward`](Self::forward), but with `frozen` periodicities (one
    /// set per block) used instead of running detection.
    pub fn forward_with(
        &self,
        g: &mut Graph,
        x: Var,
        frozen: Option<&[PeriodicitySet]>,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != cfg.lookback {
            return Err(Error::contract(format!(
                "model expects input [B, {}, V], got {shape:?}",
                cfg.lookback
            )));
        }
        if !g.value(x).is_finite() {
            return Err(Error::Numeric("model input is not finite".into()));
        }
        if let Some(f) = frozen {
            if f.len() != cfg.blocks {
                return Err(Error::contract(format!(
                    "{} frozen periodicity sets for {} blocks",
                    f.len(),
                    cfg.blocks
                )));
            }
        }
        let (mut h, stats) = revin_normalize(g, x, cfg.revin_eps)?;
        let mut used = Vec::with_capacity(cfg.blocks);
        for block in 0..cfg.blocks {
            let periodicities = match frozen {
                Some(f) => f[block].clone(),
                None => block_periodicities(g.value(h), cfg.resolutions)?,
            };
            h = multires_block(g, &self.params, block, h, cfg, &periodicities)?;
            used.push(periodicities);
        }
        let store = &self.params.store;
        let (w, b) = (
            g.param(store, self.params.head_w),
            g.param(store, self.params.head_b),
        );
        let by_variate = g.permute(h, &[0, 2, 1])?;
        let projected = linear(g, by_variate, w, b)?;
        let y = g.permute(projected, &[0, 2, 1])?;
        let prediction = revin_denormalize(g, y, stats)?;
        Ok(ForwardOutput {
            prediction,
            periodicities: used,
        })
    }

    /// Eval-mode forecast of a `[B, I, V]` tensor.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::eval();
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, xv)?;
        Ok(g.value(out.prediction).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            lookback: 16,
            horizon: 4,
            width: 8,
            blocks: 1,
            resolutions: 2,
            heads: 2,
            ffn_width: 16,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = [
            ModelConfig { heads: 3, ..tiny() },
            ModelConfig {
                resolutions: 9,
                ..tiny()
            },
            ModelConfig {
                dropout: 1.0,
                ..tiny()
            },
            ModelConfig {
                horizon: 0,
                ..tiny()
            },
            ModelConfig {
                revin_eps: 0.0,
                ..tiny()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn revin_analytic_case() {
        let mut g = Graph::eval();
        let x = g.constant(Tensor::new([1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap());
        let (n, stats) = revin_normalize(&mut g, x, 1e-12).unwrap();
        let expect = 1.5f64.sqrt();
        assert!((g.data(n)[0] + expect).abs() < 1e-9);
        assert!(g.data(n)[1].abs() < 1e-12);
        assert!((g.data(n)[2] - expect).abs() < 1e-9);
        assert_eq!(g.data(stats.mean), &[2.0]);
        assert!((g.data(stats.std)[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn revin_constant_series() {
        let mut g = Graph::eval();
        let x = g.constant(Tensor::full([2, 5, 3], 4.0));
        let (n, stats) = revin_normalize(&mut g, x, 1e-5).unwrap();
        assert!(g.data(n).iter().all(|v| *v == 0.0));
        for s in g.data(stats.std) {
            assert!((s - 1e-5f64.sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn revin_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = (0..2 * 20 * 3)
            .map(|_| rng.random_range(-1e3..1e3))
            .collect();
        let mut g = Graph::eval();
        let x = g.constant(Tensor::new([2, 20, 3], data).unwrap());
        let (n, stats) = revin_normalize(&mut g, x, 1e-5).unwrap();
        let back = revin_denormalize(&mut g, n, stats).unwrap();
        for (a, b) in g.data(back).iter().zip(g.data(x)) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn revin_denormalize_identity_and_zero() {
        let mut g = Graph::eval();
        let y = g.constant(random(&[1, 4, 2], 1));
        let stats = RevinStats {
            mean: g.constant(Tensor::zeros([1, 1, 2])),
            std: g.constant(Tensor::full([1, 1, 2], 1.0)),
        };
        let out = revin_denormalize(&mut g, y, stats).unwrap();
        assert_eq!(g.data(out), g.data(y));

        let zero = g.constant(Tensor::zeros([1, 3, 2]));
        let stats = RevinStats {
            mean: g.constant(Tensor::new([1, 1, 2], vec![5.0, -1.0]).unwrap()),
            std: g.constant(Tensor::full([1, 1, 2], 3.0)),
        };
        let out = revin_denormalize(&mut g, zero, stats).unwrap();
        assert_eq!(g.data(out), &[5.0, -1.0, 5.0, -1.0, 5.0, -1.0]);
    }

    #[test]
    fn forward_shape() {
        let cfg = ModelConfig {
            lookback: 96,
            horizon: 24,
            width: 16,
            blocks: 2,
            heads: 4,
            ffn_width: 32,
            ..ModelConfig::default()
        };
        let model = MultiResFormer::new(cfg, 0).unwrap();
        let y = model.predict(&random(&[2, 96, 7], 5)).unwrap();
        assert_eq!(y.shape(), &[2, 24, 7]);
    }

    #[test]
    fn forward_rejects_wrong_lookback() {
        let model = MultiResFormer::new(tiny(), 0).unwrap();
        let err = model.predict(&random(&[1, 12, 1], 0)).unwrap_err();
        assert!(err.to_string().contains("16"), "{err}");
    }

    #[test]
    fn zero_head_predicts_lookback_mean() {
        let mut model = MultiResFormer::new(tiny(), 1).unwrap();
        for id in [model.params.head_w, model.params.head_b] {
            let t = model.params.store.get_mut(id).tensor_mut();
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = random(&[2, 16, 3], 9);
        let y = model.predict(&x).unwrap();
        for b in 0..2 {
            for v in 0..3 {
                let mean = (0..16).map(|t| x.at(&[b, t, v])).sum::<f64>() / 16.0;
                for o in 0..4 {
                    assert!((y.at(&[b, o, v]) - mean).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn parameter_count_ignores_resolutions() {
        let counts: Vec<usize> = [1, 3, 5, 8]
            .iter()
            .map(|&k| {
                MultiResFormer::new(
                    ModelConfig {
                        resolutions: k,
                        ..tiny()
                    },
                    0,
                )
                .unwrap()
                .count_parameters()
            })
            .collect();
        assert!(counts.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn parameter_count_arithmetic() {
        let cfg = tiny();
        let model = MultiResFormer::new(cfg.clone(), 0).unwrap();
        let (d, f) = (cfg.width, cfg.ffn_width);
        let block = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d;
        let head = cfg.lookback * cfg.horizon + cfg.horizon;
        assert_eq!(model.count_parameters(), block + head + d);
        let head_only: usize = [model.params.head_w, model.params.head_b]
            .iter()
            .map(|&id| model.params.store.get(id).tensor().numel())
            .sum();
        assert_eq!(head_only, head);
        let doubled = MultiResFormer::new(
            ModelConfig {
                blocks: 2,
                ..cfg.clone()
            },
            0,
        )
        .unwrap();
        assert_eq!(doubled.count_parameters() - model.count_parameters(), block);
        let per_block = MultiResFormer::new(
            ModelConfig {
                blocks: 2,
                share_re_globally: false,
                ..cfg.clone()
            },
            0,
        )
        .unwrap();
        assert_eq!(per_block.count_parameters(), 2 * (block + d) + head);
        let no_re = MultiResFormer::new(
            ModelConfig {
                use_res_emb: false,
                ..cfg
            },
            0,
        )
        .unwrap();
        assert_eq!(no_re.count_parameters(), block + head);
    }

    #[test]
    fn single_branch_block_equals_that_branch() {
        let cfg = tiny();
        let model = MultiResFormer::new(cfg.clone(), 2).unwrap();
        let x = random(&[2, 16, 2], 4);
        let run = |set: &PeriodicitySet| {
            let mut g = Graph::eval();
            let xv = g.constant(x.clone());
            let out = multires_block(&mut g, &model.params, 0, xv, &cfg, set).unwrap();
            g.data(out).to_vec()
        };
        let a = run(&PeriodicitySet::uniform(16, &[4]));
        let b = run(&PeriodicitySet::uniform(16, &[6]));
        let both = run(&PeriodicitySet::uniform(16, &[4, 6]));
        for i in 0..a.len() {
            assert!((both[i] - 0.5 * (a[i] + b[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_periods_without_embedding_collapse_to_one_branch() {
        let cfg = ModelConfig {
            use_res_emb: false,
            resolutions: 3,
            ..tiny()
        };
        let model = MultiResFormer::new(cfg.clone(), 2).unwrap();
        let x = random(&[1, 16, 2], 4);
        let run = |set: &PeriodicitySet| {
            let mut g = Graph::eval();
            let xv = g.constant(x.clone());
            let out = multires_block(&mut g, &model.params, 0, xv, &cfg, set).unwrap();
            g.data(out).to_vec()
        };
        let one = run(&PeriodicitySet::uniform(16, &[5]));
        let three = run(&PeriodicitySet::uniform(16, &[5, 5, 5]));
        for (a, b) in one.iter().zip(&three) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_input_uses_whole_window_branch() {
        let set = block_periodicities(&Tensor::zeros([1, 16, 2]), 3).unwrap();
        assert_eq!(set.periods, vec![16]);
        assert_eq!(set.weights, vec![1.0]);
        let model = MultiResFormer::new(tiny(), 0).unwrap();
        let y = model.predict(&Tensor::full([1, 16, 2], 3.0)).unwrap();
        assert!(y.is_finite());
    }

    #[test]
    fn block_residual_adds_input() {
        let cfg = tiny();
        let res_cfg = ModelConfig {
            block_residual: true,
            ..cfg.clone()
        };
        let model = MultiResFormer::new(cfg.clone(), 2).unwrap();
        let x = random(&[1, 16, 1], 4);
        let set = PeriodicitySet::uniform(16, &[4]);
        let mut g = Graph::eval();
        let xv = g.constant(x.clone());
        let plain = multires_block(&mut g, &model.params, 0, xv, &cfg, &set).unwrap();
        let res = multires_block(&mut g, &model.params, 0, xv, &res_cfg, &set).unwrap();
        for ((p, r), xi) in g.data(plain).iter().zip(g.data(res)).zip(x.data()) {
            assert!((r - p - xi).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_is_deterministic_and_train_mode_uses_dropout() {
        let cfg = ModelConfig {
            dropout: 0.3,
            ..tiny()
        };
        let model = MultiResFormer::new(cfg, 7).unwrap();
        let x = random(&[2, 16, 2], 8);
        assert_eq!(model.predict(&x).unwrap(), model.predict(&x).unwrap());
        let train = |seed| {
            let mut g = Graph::train(seed);
            let xv = g.constant(x.clone());
            let out = model.forward(&mut g, xv).unwrap();
            g.data(out.prediction).to_vec()
        };
        assert_eq!(train(1), train(1));
        assert_ne!(train(1), train(2));
        assert_ne!(train(1), model.predict(&x).unwrap().into_data());
    }

    #[test]
    fn learned_positional_embedding_runs() {
        let cfg = ModelConfig {
            learned_pos_emb: true,
            ..tiny()
        };
        let model = MultiResFormer::new(cfg, 0).unwrap();
        assert!(model.params.pos_emb.is_some());
        let y = model.predict(&random(&[1, 16, 1], 1)).unwrap();
        assert_eq!(y.shape(), &[1, 4, 1]);
    }
}
