use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ParamVector, Segment};
use crate::error::{Result, RftfError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the post-activation value.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Architecture of a trunk + head feed-forward network.
///
/// Hidden layers form the trunk (`trunk.{i}.weight`, `trunk.{i}.bias`), the
/// final linear layer is the head (`head.weight`, `head.bias`). Weights are
/// stored row-major as `[fan_out, fan_in]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

/// Which layers receive gradient during a backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScope {
    Full,
    HeadOnly,
}

impl MlpSpec {
    pub fn new(
        input_dim: usize,
        hidden_dims: Vec<usize>,
        output_dim: usize,
        activation: Activation,
    ) -> Result<Self> {
        let spec = Self {
            input_dim,
            hidden_dims,
            output_dim,
            activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(RftfError::Config(format!(
                "network dimensions must all be >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.hidden_dims.len() + 1
    }

    /// `(fan_in, fan_out)` of layer `i`.
    pub fn layer_shape(&self, i: usize) -> (usize, usize) {
        let fan_in = if i == 0 {
            self.input_dim
        } else {
            self.hidden_dims[i - 1]
        };
        let fan_out = if i == self.hidden_dims.len() {
            self.output_dim
        } else {
            self.hidden_dims[i]
        };
        (fan_in, fan_out)
    }

    /// Width of the representation fed into the head.
    pub fn head_input_dim(&self) -> usize {
        self.layer_shape(self.num_layers() - 1).0
    }

    pub fn layer_names(&self, i: usize) -> (String, String) {
        if i == self.hidden_dims.len() {
            ("head.weight".into(), "head.bias".into())
        } else {
            (format!("trunk.{i}.weight"), format!("trunk.{i}.bias"))
        }
    }

    pub fn layout(&self) -> Vec<Segment> {
        let mut out = Vec::with_capacity(2 * self.num_layers());
        let mut offset = 0;
        for i in 0..self.num_layers() {
            let (fan_in, fan_out) = self.layer_shape(i);
            let (w, b) = self.layer_names(i);
            out.push(Segment {
                name: w,
                offset,
                shape: vec![fan_out, fan_in],
            });
            offset += fan_in * fan_out;
            out.push(Segment {
                name: b,
                offset,
                shape: vec![fan_out],
            });
            offset += fan_out;
        }
        out
    }

    pub fn param_count(&self) -> usize {
        (0..self.num_layers())
            .map(|i| {
                let (fan_in, fan_out) = self.layer_shape(i);
                fan_out * (fan_in + 1)
            })
            .sum()
    }

    /// Parameter range of the head layer; the trunk is everything before it.
    pub fn head_range(&self) -> Range<usize> {
        let (fan_in, fan_out) = self.layer_shape(self.num_layers() - 1);
        let len = fan_out * (fan_in + 1);
        let total = self.param_count();
        total - len..total
    }

    pub fn zeros(&self) -> ParamVector {
        ParamVector::zeros(self.layout()).expect("generated layout is valid")
    }

    /// Xavier-uniform weights, zero biases.
    pub fn xavier_init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut params = self.zeros();
        for i in 0..self.num_layers() {
            let (fan_in, fan_out) = self.layer_shape(i);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let (w, _) = self.layer_names(i);
            for v in params.segment_mut(&w).expect("segment exists") {
                *v = rng.random_range(-bound..bound);
            }
        }
        params
    }

    pub fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.layout() != self.layout().as_slice() {
            return Err(RftfError::Config(format!(
                "parameter layout ({} values) does not match network {:?} ({} values)",
                params.len(),
                self,
                self.param_count()
            )));
        }
        Ok(())
    }

    /// Offsets of the weight and bias blocks of layer `i`.
    pub fn offsets(&self, i: usize) -> (usize, usize) {
        let mut offset = 0;
        for j in 0..i {
            let (fan_in, fan_out) = self.layer_shape(j);
            offset += fan_out * (fan_in + 1);
        }
        let (fan_in, fan_out) = self.layer_shape(i);
        (offset, offset + fan_in * fan_out)
    }
}

/// Post-activation values of every layer of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    // [input, hidden_0, ..., hidden_{k-1}, output]
    activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn input(&self) -> &[f64] {
        &self.activations[0]
    }

    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("cache is never empty")
    }

    pub fn into_output(mut self) -> Vec<f64> {
        self.activations.pop().expect("cache is never empty")
    }

    /// Representation entering the head (the input itself for a head-only net).
    pub fn head_input(&self) -> &[f64] {
        &self.activations[self.activations.len() - 2]
    }
}

fn check_input(spec: &MlpSpec, params: &ParamVector, input: &[f64]) -> Result<()> {
    if input.len() != spec.input_dim {
        return Err(RftfError::Config(format!(
            "input has length {} but the network expects {}",
            input.len(),
            spec.input_dim
        )));
    }
    if params.len() != spec.param_count() {
        return Err(RftfError::Config(format!(
            "network expects {} parameters, got {}",
            spec.param_count(),
            params.len()
        )));
    }
    Ok(())
}

pub fn forward_cached(spec: &MlpSpec, params: &ParamVector, input: &[f64]) -> Result<ForwardCache> {
    check_input(spec, params, input)?;
    let values = params.values();
    let last = spec.num_layers() - 1;
    let mut activations = Vec::with_capacity(spec.num_layers() + 1);
    activations.push(input.to_vec());
    for layer in 0..=last {
        let (fan_in, fan_out) = spec.layer_shape(layer);
        let (w_off, b_off) = spec.offsets(layer);
        let weights = &values[w_off..w_off + fan_in * fan_out];
        let bias = &values[b_off..b_off + fan_out];
        let x = activations.last().expect("non-empty");
        let mut z: Vec<f64> = weights
            .chunks_exact(fan_in)
            .zip(bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>())
            .collect();
        if layer != last {
            for v in &mut z {
                *v = spec.activation.apply(*v);
            }
        }
        activations.push(z);
    }
    Ok(ForwardCache { activations })
}

pub fn forward(spec: &MlpSpec, params: &ParamVector, input: &[f64]) -> Result<Vec<f64>> {
    forward_cached(spec, params, input).map(ForwardCache::into_output)
}

/// Adds `d loss / d params` for one sample into `grad`, given
/// `upstream = d loss / d output`.
pub fn backward_accumulate(
    spec: &MlpSpec,
    params: &ParamVector,
    cache: &ForwardCache,
    upstream: &[f64],
    grad: &mut [f64],
    scope: GradScope,
) -> Result<()> {
    if upstream.len() != spec.output_dim {
        return Err(RftfError::Config(format!(
            "upstream gradient has length {} but the network outputs {}",
            upstream.len(),
            spec.output_dim
        )));
    }
    if grad.len() != params.len() || cache.activations.len() != spec.num_layers() + 1 {
        return Err(RftfError::Config(
            "gradient buffer or forward cache does not match the network".into(),
        ));
    }
    let values = params.values();
    let mut delta = upstream.to_vec();
    for layer in (0..spec.num_layers()).rev() {
        let (fan_in, fan_out) = spec.layer_shape(layer);
        let (w_off, b_off) = spec.offsets(layer);
        let a_in = &cache.activations[layer];
        {
            let (gw, gb) = grad[w_off..b_off + fan_out].split_at_mut(fan_in * fan_out);
            for ((row, gb), d) in gw.chunks_exact_mut(fan_in).zip(gb.iter_mut()).zip(&delta) {
                *gb += d;
                if *d != 0.0 {
                    for (g, a) in row.iter_mut().zip(a_in) {
                        *g += d * a;
                    }
                }
            }
        }
        if layer == 0 || scope == GradScope::HeadOnly {
            break;
        }
        let weights = &values[w_off..w_off + fan_in * fan_out];
        let mut prev = vec![0.0; fan_in];
        for (row, d) in weights.chunks_exact(fan_in).zip(&delta) {
            if *d != 0.0 {
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += w * d;
                }
            }
        }
        for (p, a) in prev.iter_mut().zip(a_in) {
            *p *= spec.activation.derivative_from_output(*a);
        }
        delta = prev;
    }
    Ok(())
}

/// Parameter gradient for one input and one upstream gradient.
pub fn backward(
    spec: &MlpSpec,
    params: &ParamVector,
    input: &[f64],
    upstream: &[f64],
) -> Result<ParamVector> {
    let cache = forward_cached(spec, params, input)?;
    let mut grad = params.zeros_like();
    backward_accumulate(spec, params, &cache, upstream, grad.values_mut(), GradScope::Full)?;
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::{central_difference, relative_error, FD_STEP};

    fn set(params: &mut ParamVector, name: &str, vals: &[f64]) {
        params.segment_mut(name).unwrap().copy_from_slice(vals);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let spec = MlpSpec::new(3, vec![4, 5], 2, Activation::Tanh).unwrap();
        let out = forward(&spec, &spec.zeros(), &[0.3, -2.0, 7.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_head_only() {
        let spec = MlpSpec::new(2, vec![], 2, Activation::Tanh).unwrap();
        let mut p = spec.zeros();
        set(&mut p, "head.weight", &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(forward(&spec, &p, &[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn hand_evaluated_two_two_one_tanh() {
        let spec = MlpSpec::new(2, vec![2], 1, Activation::Tanh).unwrap();
        let mut p = spec.zeros();
        set(&mut p, "trunk.0.weight", &[0.5, -1.0, 2.0, 0.25]);
        set(&mut p, "trunk.0.bias", &[0.1, -0.2]);
        set(&mut p, "head.weight", &[1.5, -0.5]);
        set(&mut p, "head.bias", &[0.3]);
        // x = [1, 2]: z0 = 0.5 - 2 + 0.1 = -1.4, z1 = 2 + 0.5 - 0.2 = 2.3
        let expected = 1.5 * (-1.4f64).tanh() - 0.5 * 2.3f64.tanh() + 0.3;
        let out = forward(&spec, &p, &[1.0, 2.0]).unwrap();
        assert!((out[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let spec = MlpSpec::new(2, vec![3], 1, Activation::Relu).unwrap();
        assert!(matches!(
            forward(&spec, &spec.zeros(), &[1.0]),
            Err(RftfError::Config(_))
        ));
        assert!(matches!(
            backward(&spec, &spec.zeros(), &[1.0, 2.0], &[1.0, 1.0]),
            Err(RftfError::Config(_))
        ));
        assert!(MlpSpec::new(0, vec![], 1, Activation::Relu).is_err());
    }

    #[test]
    fn linear_scalar_gradient() {
        let spec = MlpSpec::new(1, vec![], 1, Activation::Tanh).unwrap();
        let mut p = spec.zeros();
        set(&mut p, "head.weight", &[0.7]);
        let g = backward(&spec, &p, &[3.0], &[1.0]).unwrap();
        assert_eq!(g.segment("head.weight").unwrap(), &[3.0]);
        assert_eq!(g.segment("head.bias").unwrap(), &[1.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let spec = MlpSpec::new(3, vec![4], 2, Activation::Tanh).unwrap();
        let p = spec.xavier_init(&mut ChaCha8Rng::seed_from_u64(1));
        let g = backward(&spec, &p, &[1.0, -1.0, 0.5], &[0.0, 0.0]).unwrap();
        assert!(g.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn head_range_is_last_layer() {
        let spec = MlpSpec::new(3, vec![4, 5], 2, Activation::Tanh).unwrap();
        let p = spec.zeros();
        let w = p.range_of("head.weight").unwrap();
        let b = p.range_of("head.bias").unwrap();
        assert_eq!(spec.head_range(), w.start..b.end);
        assert_eq!(spec.head_range().end, spec.param_count());
    }

    #[test]
    fn head_only_scope_leaves_trunk_gradient_empty() {
        let spec = MlpSpec::new(3, vec![4], 2, Activation::Tanh).unwrap();
        let p = spec.xavier_init(&mut ChaCha8Rng::seed_from_u64(2));
        let cache = forward_cached(&spec, &p, &[0.1, 0.2, 0.3]).unwrap();
        let mut g = vec![0.0; p.len()];
        backward_accumulate(&spec, &p, &cache, &[1.0, -1.0], &mut g, GradScope::HeadOnly).unwrap();
        let head = spec.head_range();
        assert!(g[..head.start].iter().all(|v| *v == 0.0));
        assert!(g[head].iter().any(|v| *v != 0.0));
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for act in [Activation::Tanh, Activation::Relu] {
            let spec = MlpSpec::new(4, vec![6, 5], 3, act).unwrap();
            let p = spec.xavier_init(&mut rng);
            let input: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let upstream: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g = backward(&spec, &p, &input, &upstream).unwrap();
            let fd = central_difference(
                |x| {
                    let out = forward(&spec, &p.with_values(x), &input).unwrap();
                    out.iter().zip(&upstream).map(|(o, u)| o * u).sum()
                },
                p.values(),
                FD_STEP,
            );
            for (a, b) in g.values().iter().zip(&fd) {
                assert!(relative_error(*a, *b) < 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let spec = MlpSpec::new(3, vec![8], 2, Activation::Tanh).unwrap();
        let p = spec.xavier_init(&mut ChaCha8Rng::seed_from_u64(5));
        let a = forward(&spec, &p, &[0.1, 0.2, 0.3]).unwrap();
        let b = forward(&spec, &p, &[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}
