//! Feed-forward encoder: affine layers with rectifiers between them and a
//! unit-normalized output, with exact reverse-mode gradients.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedding::ZERO_NORM;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Encoder parameters. With no layers the encoder only normalizes its input.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    input_dim: usize,
    pub layers: Vec<Layer>,
}

impl EncoderParams {
    /// He-style uniform fan-in initialization, zero biases. `dims` lists the
    /// input width followed by every layer's output width.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        let (&input_dim, rest) = dims.split_first().ok_or(Error::EmptyList)?;
        if dims.contains(&0) {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fan_in = input_dim;
        let layers = rest
            .iter()
            .map(|&out| {
                let bound = (6.0 / fan_in as f64).sqrt();
                let weight = Array2::from_shape_fn((out, fan_in), |_| rng.random_range(-bound..bound));
                fan_in = out;
                Layer {
                    weight,
                    bias: Array1::zeros(out),
                }
            })
            .collect();
        Ok(Self { input_dim, layers })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            input_dim: dim,
            layers: Vec::new(),
        }
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let input_dim = layers.first().ok_or(Error::EmptyList)?.weight.ncols();
        let mut width = input_dim;
        for l in &layers {
            if l.weight.ncols() != width {
                return Err(Error::dim(width, l.weight.ncols()));
            }
            if l.bias.len() != l.weight.nrows() {
                return Err(Error::dim(l.weight.nrows(), l.bias.len()));
            }
            width = l.weight.nrows();
        }
        Ok(Self { input_dim, layers })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, |l| l.weight.nrows())
    }

    /// Input width followed by each layer's output width.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim)
            .chain(self.layers.iter().map(|l| l.weight.nrows()))
            .collect()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            input_dim: self.input_dim,
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    /// Every parameter tensor as a flat slice: weight then bias per layer.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice().unwrap(), l.bias.as_slice().unwrap()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_slice_mut().unwrap(), l.bias.as_slice_mut().unwrap()])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Unit-norm embeddings, one row per input row.
    pub fn embed(&self, features: &Array2<f64>) -> Result<Array2<f64>> {
        forward(self, features)
    }
}

/// Intermediate values kept for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input of each layer (post-activation of the previous one).
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Array2<f64>>,
    norms: Array1<f64>,
    pub output: Array2<f64>,
}

pub fn forward_cached(params: &EncoderParams, features: &Array2<f64>) -> Result<ForwardCache> {
    if features.ncols() != params.input_dim {
        return Err(Error::dim(params.input_dim, features.ncols()));
    }
    if features.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("encoder input"));
    }
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut h = features.clone();
    for (i, layer) in params.layers.iter().enumerate() {
        let z = h.dot(&layer.weight.t()) + &layer.bias;
        inputs.push(h);
        h = if i + 1 < params.layers.len() {
            z.mapv(|x| x.max(0.0))
        } else {
            z.clone()
        };
        pre.push(z);
    }
    let norms = h.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if norms.iter().any(|&n| !n.is_finite()) {
        return Err(Error::NonFinite("encoder output"));
    }
    if norms.iter().any(|&n| n <= ZERO_NORM) {
        return Err(Error::ZeroVector);
    }
    let mut output = h;
    for (mut row, &n) in output.rows_mut().into_iter().zip(&norms) {
        row /= n;
    }
    Ok(ForwardCache {
        inputs,
        pre,
        norms,
        output,
    })
}

/// Affine, rectifier, ..., affine, then per-row unit normalization.
pub fn forward(params: &EncoderParams, features: &Array2<f64>) -> Result<Array2<f64>> {
    Ok(forward_cached(params, features)?.output)
}

/// Parameter gradients for upstream gradient `grad_out` on the normalized
/// outputs. The normalization Jacobian is `(I - u u^T) / |z|`.
pub fn backward(params: &EncoderParams, cache: &ForwardCache, grad_out: &Array2<f64>) -> Result<EncoderParams> {
    if grad_out.dim() != cache.output.dim() {
        return Err(Error::dim(cache.output.len(), grad_out.len()));
    }
    if grad_out.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("upstream gradient"));
    }
    let mut grads = params.zeros_like();
    let mut delta = normalization_backward(&cache.output, &cache.norms, grad_out);
    for l in (0..params.layers.len()).rev() {
        grads.layers[l].weight = delta.t().dot(&cache.inputs[l]);
        grads.layers[l].bias = delta.sum_axis(Axis(0));
        if l > 0 {
            let mut d = delta.dot(&params.layers[l].weight);
            d.zip_mut_with(&cache.pre[l - 1], |g, &z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            });
            delta = d;
        }
    }
    Ok(grads)
}

/// Gradient through `u = z / |z|` row by row.
pub fn normalization_backward(unit: &Array2<f64>, norms: &Array1<f64>, grad: &Array2<f64>) -> Array2<f64> {
    let mut out = grad.clone();
    for ((mut row, u), &n) in out.rows_mut().into_iter().zip(unit.rows()).zip(norms) {
        let proj = u.dot(&row);
        row.scaled_add(-proj, &u);
        row /= n;
    }
    out
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CHNM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Binary checkpoint, little-endian:
/// `"CHNM"`, version u32, layer count u32, (layers + 1) dims u32, then per
/// layer the row-major `f64` weight block followed by the `f64` bias block.
pub fn encode_checkpoint(params: &EncoderParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.num_params() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.layers.len() as u32).to_le_bytes());
    for d in params.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for t in params.tensors() {
        for x in t {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<EncoderParams> {
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut cursor = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(cursor..cursor + n)
            .ok_or_else(|| bad("truncated checkpoint".into()))?;
        cursor += n;
        Ok(s)
    };
    if take(4)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let read_u32 = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
    let version = read_u32(take(4)?);
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let n_layers = read_u32(take(4)?) as usize;
    let dims = (0..=n_layers)
        .map(|_| take(4).map(|b| read_u32(b) as usize))
        .collect::<Result<Vec<_>>>()?;
    let mut read_block = |len: usize| -> Result<Vec<f64>> {
        Ok(take(len * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    let mut layers = Vec::with_capacity(n_layers);
    for w in dims.windows(2) {
        let (inp, out) = (w[0], w[1]);
        let weight = Array2::from_shape_vec((out, inp), read_block(out * inp)?)
            .map_err(|e| bad(e.to_string()))?;
        let bias = Array1::from_vec(read_block(out)?);
        layers.push(Layer { weight, bias });
    }
    if cursor != bytes.len() {
        return Err(bad("trailing bytes".into()));
    }
    Ok(EncoderParams {
        input_dim: dims[0],
        layers,
    })
}

pub fn save_checkpoint(path: &Path, params: &EncoderParams) -> Result<()> {
    fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::relative_error;
    use ndarray::arr2;
    use rand_distr::StandardNormal;

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
    }

    #[test]
    fn identity_encoder_normalizes() {
        let p = EncoderParams::identity(2);
        let out = forward(&p, &arr2(&[[3.0, 4.0], [0.0, -2.0]])).unwrap();
        assert_eq!(out, arr2(&[[0.6, 0.8], [0.0, -1.0]]));
    }

    #[test]
    fn outputs_are_unit_norm() {
        let p = EncoderParams::init(&[6, 16, 16, 5], 1).unwrap();
        let out = forward(&p, &random(20, 6, 2)).unwrap();
        for r in out.rows() {
            assert!((r.dot(&r).sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn hand_computed_two_by_two() {
        // hidden = relu(W1 x + b1), z = W2 hidden + b2, out = z / |z|
        let p = EncoderParams::from_layers(vec![
            Layer {
                weight: arr2(&[[1.0, -1.0], [0.5, 2.0]]),
                bias: ndarray::arr1(&[0.0, -1.0]),
            },
            Layer {
                weight: arr2(&[[1.0, 0.0], [1.0, 1.0]]),
                bias: ndarray::arr1(&[0.0, 1.0]),
            },
        ])
        .unwrap();
        // x = (2, 1): W1 x + b1 = (1, 2); relu -> (1, 2); W2 h + b2 = (1, 4)
        let out = forward(&p, &arr2(&[[2.0, 1.0]])).unwrap();
        let n = 17f64.sqrt();
        assert!((out[[0, 0]] - 1.0 / n).abs() < 1e-15);
        assert!((out[[0, 1]] - 4.0 / n).abs() < 1e-15);
        // x = (0, 1): W1 x + b1 = (-1, 1) -> relu (0, 1); z = (0, 2)
        let out = forward(&p, &arr2(&[[0.0, 1.0]])).unwrap();
        assert_eq!(out, arr2(&[[0.0, 1.0]]));
    }

    #[test]
    fn input_checks() {
        let p = EncoderParams::init(&[3, 4, 2], 0).unwrap();
        assert!(matches!(forward(&p, &random(2, 4, 0)), Err(Error::DimensionMismatch { .. })));
        let mut x = random(2, 3, 0);
        x[[1, 1]] = f64::INFINITY;
        assert!(matches!(forward(&p, &x), Err(Error::NonFinite(_))));
        assert!(matches!(
            forward(&EncoderParams::identity(2), &Array2::zeros((1, 2))),
            Err(Error::ZeroVector)
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = EncoderParams::init(&[4, 8, 3], 5).unwrap();
        let x = random(6, 4, 6);
        let cache = forward_cached(&p, &x).unwrap();
        let g = backward(&p, &cache, &Array2::zeros((6, 3))).unwrap();
        assert!(g.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn normalization_jacobian_on_unit_input() {
        let u = ndarray::arr1(&[0.6, 0.0, 0.8]);
        let g = ndarray::arr1(&[1.0, 2.0, -3.0]);
        let unit = u.clone().insert_axis(Axis(0));
        let out = normalization_backward(&unit, &ndarray::arr1(&[1.0]), &g.clone().insert_axis(Axis(0)));
        // (I - u u^T) g evaluated by hand: u.g = 0.6 - 2.4 = -1.8
        let expected = [1.0 + 1.8 * 0.6, 2.0, -3.0 + 1.8 * 0.8];
        for (a, b) in out.row(0).iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut p = EncoderParams::init(&[3, 5, 4, 3], 11).unwrap();
        // keep hidden units away from the rectifier kink
        for l in &mut p.layers {
            l.bias.fill(0.05);
        }
        let x = random(4, 3, 12);
        let target = random(4, 3, 13);
        // loss = sum(target * output)
        let f = |p: &EncoderParams| (forward(p, &x).unwrap() * &target).sum();
        let cache = forward_cached(&p, &x).unwrap();
        let grads = backward(&p, &cache, &target).unwrap();
        let h = 1e-6;
        let analytic: Vec<f64> = grads.tensors().concat();
        let mut k = 0;
        for t in 0..p.tensors().len() {
            for i in 0..p.tensors()[t].len() {
                let mut up = p.clone();
                up.tensors_mut()[t][i] += h;
                let mut dn = p.clone();
                dn.tensors_mut()[t][i] -= h;
                let num = (f(&up) - f(&dn)) / (2.0 * h);
                assert!(relative_error(analytic[k], num) < 1e-6, "tensor {t} entry {i}");
                k += 1;
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_and_layout() {
        let p = EncoderParams::init(&[3, 4, 2], 9).unwrap();
        let bytes = encode_checkpoint(&p);
        assert_eq!(&bytes[0..4], b"CHNM");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 12 + 3 * 4 + p.num_params() * 8);
        let back = decode_checkpoint(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, p);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3], Path::new("mem")).is_err());
        let id = EncoderParams::identity(7);
        assert_eq!(decode_checkpoint(&encode_checkpoint(&id), Path::new("mem")).unwrap(), id);
    }
}
