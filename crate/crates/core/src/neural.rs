//! Dense feedforward networks with analytic forward and reverse passes.
//!
//! Parameters live in one flat vector. The canonical order is, per layer,
//! the row-major weight matrix (`out_dim` rows of `in_dim` entries) followed
//! by the bias vector. Every gradient buffer uses the same layout, so
//! optimizers and target-network filters can work on plain slices.

use std::io::{Read, Write};

use rand::Rng;
use thiserror::Error;

/// Default leakage of the hidden-layer LeakyReLU.
pub const DEFAULT_LEAK: f64 = 0.3;

const MAGIC: &[u8; 4] = b"LNRL";
const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("dimension mismatch: expected {expected} values, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("forward cache does not belong to this network")]
    StaleCache,
    #[error("invalid layer layout: {0}")]
    InvalidShape(String),
    #[error("malformed weights file: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NeuralError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Linear,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu(alpha) => {
                if z > 0.0 {
                    z
                } else {
                    alpha * z
                }
            }
            Activation::Linear => z,
        }
    }

    /// Local slope at pre-activation `z`. The kink at zero takes the leaky side.
    #[inline]
    fn slope(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu(alpha) => {
                if z > 0.0 {
                    1.0
                } else {
                    alpha
                }
            }
            Activation::Linear => 1.0,
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Linear => 0,
            Activation::LeakyRelu(_) => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
        }
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

/// Builds `input -> hidden... -> output` with LeakyReLU hidden layers and a
/// linear output layer.
pub fn dense_stack(input: usize, hidden: &[usize], output: usize, leak: f64) -> Vec<LayerSpec> {
    let mut layers = Vec::with_capacity(hidden.len() + 1);
    let mut prev = input;
    for &width in hidden {
        layers.push(LayerSpec::new(prev, width, Activation::LeakyRelu(leak)));
        prev = width;
    }
    layers.push(LayerSpec::new(prev, output, Activation::Linear));
    layers
}

fn validate(shapes: &[LayerSpec]) -> Result<()> {
    if shapes.is_empty() {
        return Err(NeuralError::InvalidShape("no layers".into()));
    }
    for (i, layer) in shapes.iter().enumerate() {
        if layer.in_dim == 0 || layer.out_dim == 0 {
            return Err(NeuralError::InvalidShape(format!("layer {i} has a zero dimension")));
        }
        if i > 0 && shapes[i - 1].out_dim != layer.in_dim {
            return Err(NeuralError::InvalidShape(format!(
                "layer {i} expects {} inputs but layer {} emits {}",
                layer.in_dim,
                i - 1,
                shapes[i - 1].out_dim
            )));
        }
    }
    Ok(())
}

/// Layer shapes plus the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    shapes: Vec<LayerSpec>,
    values: Vec<f64>,
}

/// Activations recorded by [`MlpParams::forward_batch`] for a later reverse pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    shapes: Vec<LayerSpec>,
    batch: usize,
    /// `activations[0]` is the input, `activations[i + 1]` the output of layer `i`.
    activations: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl ForwardCache {
    /// Network output, `batch` rows of `output_dim` entries.
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("cache always holds the input")
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Pre-activation values of layer `i`, `batch` rows of its output width.
    pub fn pre_activations(&self, i: usize) -> &[f64] {
        &self.pre[i]
    }

    pub fn layer_count(&self) -> usize {
        self.pre.len()
    }
}

/// Parameter gradient (canonical layout) and input gradient (`batch` rows of
/// `input_dim`). Parameter gradients are summed over the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub d_input: Vec<f64>,
}

impl MlpParams {
    pub fn zeros(shapes: Vec<LayerSpec>) -> Result<Self> {
        validate(&shapes)?;
        let n = shapes.iter().map(LayerSpec::param_count).sum();
        Ok(Self {
            shapes,
            values: vec![0.0; n],
        })
    }

    pub fn from_values(shapes: Vec<LayerSpec>, values: Vec<f64>) -> Result<Self> {
        validate(&shapes)?;
        let n: usize = shapes.iter().map(LayerSpec::param_count).sum();
        if values.len() != n {
            return Err(NeuralError::DimensionMismatch {
                expected: n,
                got: values.len(),
            });
        }
        Ok(Self { shapes, values })
    }

    /// Glorot-uniform weights in `±sqrt(6 / (in + out))`, zero biases.
    pub fn init<R: Rng + ?Sized>(shapes: Vec<LayerSpec>, rng: &mut R) -> Result<Self> {
        let mut params = Self::zeros(shapes)?;
        let mut offset = 0;
        for layer in params.shapes.clone() {
            let limit = (6.0 / (layer.in_dim + layer.out_dim) as f64).sqrt();
            let n_w = layer.in_dim * layer.out_dim;
            for w in &mut params.values[offset..offset + n_w] {
                *w = rng.gen_range(-limit..limit);
            }
            offset += layer.param_count();
        }
        Ok(params)
    }

    pub fn shapes(&self) -> &[LayerSpec] {
        &self.shapes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn param_count(&self) -> usize {
        self.values.len()
    }

    pub fn input_dim(&self) -> usize {
        self.shapes[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.shapes[self.shapes.len() - 1].out_dim
    }

    /// Copy with every parameter rounded through 32-bit floats, i.e. what a
    /// receiver of the wire format sees.
    pub fn narrowed(&self) -> Self {
        Self {
            shapes: self.shapes.clone(),
            values: self.values.iter().map(|&v| v as f32 as f64).collect(),
        }
    }

    /// Single-sample forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(NeuralError::DimensionMismatch {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        let mut x = input.to_vec();
        let mut offset = 0;
        for layer in &self.shapes {
            let (w, b) = self.layer_slices(offset, layer);
            let mut y = Vec::with_capacity(layer.out_dim);
            for o in 0..layer.out_dim {
                let row = &w[o * layer.in_dim..(o + 1) * layer.in_dim];
                let z = b[o] + row.iter().zip(&x).map(|(p, v)| p * v).sum::<f64>();
                y.push(layer.activation.apply(z));
            }
            x = y;
            offset += layer.param_count();
        }
        Ok(x)
    }

    /// Batched forward pass over `batch` row-major input rows, keeping every
    /// intermediate for [`Self::backward`].
    pub fn forward_batch(&self, input: &[f64], batch: usize) -> Result<ForwardCache> {
        let expected = batch * self.input_dim();
        if batch == 0 || input.len() != expected {
            return Err(NeuralError::DimensionMismatch {
                expected,
                got: input.len(),
            });
        }
        let mut activations = Vec::with_capacity(self.shapes.len() + 1);
        let mut pre = Vec::with_capacity(self.shapes.len());
        activations.push(input.to_vec());
        let mut offset = 0;
        for layer in &self.shapes {
            let (w, b) = self.layer_slices(offset, layer);
            let x = activations.last().expect("non-empty");
            let mut z = Vec::with_capacity(batch * layer.out_dim);
            for _ in 0..batch {
                z.extend_from_slice(b);
            }
            // z[B x out] += x[B x in] * w^T
            gemm(
                batch,
                layer.in_dim,
                layer.out_dim,
                x,
                (layer.in_dim as isize, 1),
                w,
                (1, layer.in_dim as isize),
                1.0,
                &mut z,
                (layer.out_dim as isize, 1),
            );
            let y = match layer.activation {
                Activation::Linear => z.clone(),
                act => z.iter().map(|&v| act.apply(v)).collect(),
            };
            pre.push(z);
            activations.push(y);
            offset += layer.param_count();
        }
        Ok(ForwardCache {
            shapes: self.shapes.clone(),
            batch,
            activations,
            pre,
        })
    }

    /// Reverse pass: gradient of `sum(output ⊙ d_output)` with respect to every
    /// parameter (summed over the batch) and every input entry.
    pub fn backward(&self, cache: &ForwardCache, d_output: &[f64]) -> Result<Gradients> {
        let mut grads = vec![0.0; self.values.len()];
        let d_input = self.reverse(cache, d_output, Some(&mut grads))?;
        Ok(Gradients {
            params: grads,
            d_input,
        })
    }

    /// Input gradient only; skips the parameter gradient products.
    pub fn input_gradient(&self, cache: &ForwardCache, d_output: &[f64]) -> Result<Vec<f64>> {
        self.reverse(cache, d_output, None)
    }

    fn reverse(
        &self,
        cache: &ForwardCache,
        d_output: &[f64],
        mut grads: Option<&mut Vec<f64>>,
    ) -> Result<Vec<f64>> {
        if cache.shapes != self.shapes || cache.activations.len() != self.shapes.len() + 1 {
            return Err(NeuralError::StaleCache);
        }
        let batch = cache.batch;
        if d_output.len() != batch * self.output_dim() {
            return Err(NeuralError::DimensionMismatch {
                expected: batch * self.output_dim(),
                got: d_output.len(),
            });
        }
        let offsets: Vec<usize> = self
            .shapes
            .iter()
            .scan(0, |acc, l| {
                let o = *acc;
                *acc += l.param_count();
                Some(o)
            })
            .collect();

        let mut delta = d_output.to_vec();
        for (i, layer) in self.shapes.iter().enumerate().rev() {
            if let Activation::LeakyRelu(_) = layer.activation {
                for (d, &z) in delta.iter_mut().zip(&cache.pre[i]) {
                    *d *= layer.activation.slope(z);
                }
            }
            let (w, _) = self.layer_slices(offsets[i], layer);
            let x = &cache.activations[i];
            if let Some(g) = grads.as_deref_mut() {
                let n_w = layer.in_dim * layer.out_dim;
                let (gw, gb) = g[offsets[i]..offsets[i] + layer.param_count()].split_at_mut(n_w);
                // gw[out x in] = delta^T[out x B] * x[B x in]
                gemm(
                    layer.out_dim,
                    batch,
                    layer.in_dim,
                    &delta,
                    (1, layer.out_dim as isize),
                    x,
                    (layer.in_dim as isize, 1),
                    0.0,
                    gw,
                    (layer.in_dim as isize, 1),
                );
                for row in delta.chunks_exact(layer.out_dim) {
                    for (b, d) in gb.iter_mut().zip(row) {
                        *b += d;
                    }
                }
            }
            // d_x[B x in] = delta[B x out] * w[out x in]
            let mut dx = vec![0.0; batch * layer.in_dim];
            gemm(
                batch,
                layer.out_dim,
                layer.in_dim,
                &delta,
                (layer.out_dim as isize, 1),
                w,
                (layer.in_dim as isize, 1),
                0.0,
                &mut dx,
                (layer.in_dim as isize, 1),
            );
            delta = dx;
        }
        Ok(delta)
    }

    fn layer_slices(&self, offset: usize, layer: &LayerSpec) -> (&[f64], &[f64]) {
        let n_w = layer.in_dim * layer.out_dim;
        let block = &self.values[offset..offset + layer.param_count()];
        block.split_at(n_w)
    }

    /// Serializes to the `LNRL` weights format: magic, u16 format version,
    /// u16 layer count, per layer (u32 in, u32 out, u8 activation), then the
    /// parameters as little-endian f32 in canonical order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 9 * self.shapes.len() + 4 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.shapes.len() as u16).to_le_bytes());
        for layer in &self.shapes {
            out.extend_from_slice(&(layer.in_dim as u32).to_le_bytes());
            out.extend_from_slice(&(layer.out_dim as u32).to_le_bytes());
            out.push(layer.activation.code());
        }
        for &v in &self.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    /// Parses the `LNRL` weights format. The file records only the activation
    /// kind, so the LeakyReLU leakage is supplied by the caller.
    pub fn from_bytes(bytes: &[u8], leak: f64) -> Result<Self> {
        let mut cur = bytes;
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic)
            .map_err(|_| NeuralError::Format("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(NeuralError::Format("bad magic".into()));
        }
        let version = read_u16(&mut cur)?;
        if version != FORMAT_VERSION {
            return Err(NeuralError::Format(format!("unsupported format version {version}")));
        }
        let n_layers = read_u16(&mut cur)? as usize;
        let mut shapes = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let in_dim = read_u32(&mut cur)? as usize;
            let out_dim = read_u32(&mut cur)? as usize;
            let mut code = [0u8; 1];
            cur.read_exact(&mut code)
                .map_err(|_| NeuralError::Format("truncated layer table".into()))?;
            let activation = match code[0] {
                0 => Activation::Linear,
                1 => Activation::LeakyRelu(leak),
                c => return Err(NeuralError::Format(format!("unknown activation code {c}"))),
            };
            shapes.push(LayerSpec::new(in_dim, out_dim, activation));
        }
        validate(&shapes).map_err(|e| NeuralError::Format(e.to_string()))?;
        let n: usize = shapes.iter().map(LayerSpec::param_count).sum();
        if cur.len() != 4 * n {
            return Err(NeuralError::Format(format!(
                "expected {} parameter bytes, found {}",
                4 * n,
                cur.len()
            )));
        }
        let values = cur
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok(Self { shapes, values })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R, leak: f64) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf, leak)
    }
}

fn read_u16(cur: &mut &[u8]) -> Result<u16> {
    let mut b = [0u8; 2];
    cur.read_exact(&mut b)
        .map_err(|_| NeuralError::Format("truncated header".into()))?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(cur: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    cur.read_exact(&mut b)
        .map_err(|_| NeuralError::Format("truncated layer table".into()))?;
    Ok(u32::from_le_bytes(b))
}

/// `c[m x n] = a[m x k] * b[k x n] + beta * c` with (row, column) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
    c_strides: (isize, isize),
) {
    let span = |rows: usize, cols: usize, (rs, cs): (isize, isize)| {
        (rows as isize - 1) * rs + (cols as isize - 1) * cs + 1
    };
    assert!(span(m, k, a_strides) as usize <= a.len());
    assert!(span(k, n, b_strides) as usize <= b.len());
    assert!(span(m, n, c_strides) as usize <= c.len());
    // SAFETY: the asserts above keep every strided access inside its slice.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            c_strides.0,
            c_strides.1,
        );
    }
}
