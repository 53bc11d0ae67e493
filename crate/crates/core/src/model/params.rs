use rand_distr::{Distribution, Normal};

use super::tensor::Real;
use crate::error::{Error, Result};
use crate::seed::{self, streams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Maximum text length L.
    pub max_text_len: usize,
    /// Block size L'.
    pub block_size: usize,
    /// Visual token width `k*k + 2`.
    pub visual_dim: usize,
    /// Maximum number of visual cells.
    pub max_visual_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 3,
            n_heads: 4,
            d_ff: 256,
            vocab_size: 51,
            max_text_len: 128,
            block_size: 16,
            visual_dim: 18,
            max_visual_len: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_text_len", self.max_text_len),
            ("block_size", self.block_size),
            ("visual_dim", self.visual_dim),
            ("max_visual_len", self.max_visual_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model {name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_text_len % self.block_size != 0 {
            return Err(Error::Config(format!(
                "block size {} does not divide max text length {}",
                self.block_size, self.max_text_len
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn n_blocks(&self) -> usize {
        self.max_text_len / self.block_size
    }

    /// Tensor names and shapes in canonical order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, v, f) = (self.d_model, self.vocab_size, self.d_ff);
        let mut out = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("vis_proj".into(), vec![self.visual_dim, d]),
            ("vis_bias".into(), vec![d]),
            ("text_pos".into(), vec![self.max_text_len, d]),
            ("vis_pos".into(), vec![self.max_visual_len, d]),
            ("lnf_g".into(), vec![d]),
            ("lnf_b".into(), vec![d]),
            ("out_w".into(), vec![d, v]),
            ("out_b".into(), vec![v]),
        ];
        for l in 0..self.n_layers {
            for (name, dims) in [
                ("ln1_g", vec![d]),
                ("ln1_b", vec![d]),
                ("w_qkv", vec![d, 3 * d]),
                ("b_qkv", vec![3 * d]),
                ("w_o", vec![d, d]),
                ("b_o", vec![d]),
                ("ln2_g", vec![d]),
                ("ln2_b", vec![d]),
                ("w_1", vec![d, f]),
                ("b_1", vec![f]),
                ("w_2", vec![f, d]),
                ("b_2", vec![d]),
            ] {
                out.push((format!("layer{l}.{name}"), dims));
            }
        }
        out
    }
}

/// Indices into [`Parameters::tensors`].
pub(crate) mod idx {
    pub const TOK_EMB: usize = 0;
    pub const VIS_PROJ: usize = 1;
    pub const VIS_BIAS: usize = 2;
    pub const TEXT_POS: usize = 3;
    pub const VIS_POS: usize = 4;
    pub const LNF_G: usize = 5;
    pub const LNF_B: usize = 6;
    pub const OUT_W: usize = 7;
    pub const OUT_B: usize = 8;
    pub const GLOBAL: usize = 9;
    pub const PER_LAYER: usize = 12;

    pub const LN1_G: usize = 0;
    pub const LN1_B: usize = 1;
    pub const W_QKV: usize = 2;
    pub const B_QKV: usize = 3;
    pub const W_O: usize = 4;
    pub const B_O: usize = 5;
    pub const LN2_G: usize = 6;
    pub const LN2_B: usize = 7;
    pub const W_1: usize = 8;
    pub const B_1: usize = 9;
    pub const W_2: usize = 10;
    pub const B_2: usize = 11;

    pub fn layer(l: usize, which: usize) -> usize {
        GLOBAL + l * PER_LAYER + which
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(name: String, dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Self {
            name,
            dims,
            data: vec![F::zero(); n],
        }
    }
}

/// Model weights, or a gradient with the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<F> {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor<F>>,
}

impl<F: Real> Parameters<F> {
    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            config: *config,
            tensors: config
                .layout()
                .into_iter()
                .map(|(n, d)| Tensor::zeros(n, d))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    #[inline]
    pub fn t(&self, i: usize) -> &[F] {
        &self.tensors[i].data
    }

    #[inline]
    pub fn t_mut(&mut self, i: usize) -> &mut [F] {
        &mut self.tensors[i].data
    }

    #[inline]
    pub fn lt(&self, layer: usize, which: usize) -> &[F] {
        &self.tensors[idx::layer(layer, which)].data
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn iter_values(&self) -> impl Iterator<Item = F> + '_ {
        self.tensors.iter().flat_map(|t| t.data.iter().copied())
    }

    /// Flat coordinate access across all tensors in layout order.
    pub fn coord(&self, mut i: usize) -> (usize, usize) {
        for (ti, t) in self.tensors.iter().enumerate() {
            if i < t.data.len() {
                return (ti, i);
            }
            i -= t.data.len();
        }
        panic!("coordinate out of range");
    }

    pub fn l2_norm(&self) -> f64 {
        self.iter_values().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt()
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        for t in &mut self.tensors {
            for x in &mut t.data {
                *x *= s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.iter_values().all(|v| v.is_finite())
    }

    pub fn cast<G: Real>(&self) -> Parameters<G> {
        Parameters {
            config: self.config,
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    dims: t.dims.clone(),
                    data: t.data.iter().map(|v| G::of(v.f64())).collect(),
                })
                .collect(),
        }
    }

    /// FNV-1a over the little-endian f64 image of every value.
    pub fn checksum(&self) -> u64 {
        let bytes: Vec<u8> = self.iter_values().flat_map(|v| v.f64().to_le_bytes()).collect();
        crate::fnv1a64(&bytes)
    }
}

pub const INIT_STD: f64 = 0.02;

/// Seeded Gaussian initialisation (std 0.02) for matrices and embeddings;
/// layer-norm gains start at 1 and all biases at 0.
pub fn init_parameters<F: Real>(config: &ModelConfig) -> Result<Parameters<F>> {
    config.validate()?;
    let mut p = Parameters::<F>::zeros(config);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut rng = seed::child_rng(config.seed, streams::INIT, 0);
    for t in &mut p.tensors {
        let base = t.name.rsplit('.').next().unwrap_or(&t.name);
        if base.ends_with("_g") {
            t.data.iter_mut().for_each(|v| *v = F::one());
        } else if t.dims.len() == 2 {
            t.data.iter_mut().for_each(|v| *v = F::of(normal.sample(&mut rng)));
        }
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_with_expected_shapes() {
        let cfg = ModelConfig { d_model: 8, n_heads: 2, d_ff: 16, ..Default::default() };
        let a = init_parameters::<f32>(&cfg).unwrap();
        let b = init_parameters::<f32>(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.get("tok_emb").unwrap().dims, vec![51, 8]);
        let c = init_parameters::<f32>(&ModelConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, c);
        let out = &a.get("out_w").unwrap().data;
        let mean = out.iter().map(|&x| x as f64).sum::<f64>() / out.len() as f64;
        assert!(mean.abs() < 0.01);
        assert!(a.get("layer0.ln1_g").unwrap().data.iter().all(|&g| g == 1.0));
        assert!(a.get("layer0.b_qkv").unwrap().data.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig { d_model: 10, n_heads: 4, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = ModelConfig { block_size: 24, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn layout_matches_index_table() {
        let cfg = ModelConfig::default();
        let l = cfg.layout();
        assert_eq!(l[idx::OUT_B].0, "out_b");
        assert_eq!(l[idx::layer(2, idx::B_2)].0, "layer2.b_2");
        assert_eq!(l.len(), idx::GLOBAL + 3 * idx::PER_LAYER);
    }
}
