use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Activation, SirenConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerShape {
    rows: usize,
    cols: usize,
    w_off: usize,
    b_off: usize,
}

fn layout(config: &SirenConfig) -> Vec<LayerShape> {
    let mut off = 0;
    config
        .layer_shapes()
        .into_iter()
        .map(|(rows, cols)| {
            let shape = LayerShape {
                rows,
                cols,
                w_off: off,
                b_off: off + rows * cols,
            };
            off += rows * cols + rows;
            shape
        })
        .collect()
}

/// Parameters of a coordinate MLP, stored flat in layer order
/// (weights row-major, then biases, for each layer).
#[derive(Debug, Clone, PartialEq)]
pub struct SirenNet<T> {
    config: SirenConfig,
    seed: u64,
    params: Vec<T>,
    layers: Vec<LayerShape>,
}

/// Intermediate activations of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    n: usize,
    coords: Vec<T>,
    encoded: Vec<T>,
    pre: Vec<Vec<T>>,
    // cos(omega * pre) for sine layers, empty otherwise.
    cos: Vec<Vec<T>>,
    post: Vec<Vec<T>>,
    output: Vec<T>,
}

impl<T> Tape<T> {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn output(&self) -> &[T] {
        &self.output
    }

    pub fn into_output(self) -> Vec<T> {
        self.output
    }
}

impl<T: Scalar> SirenNet<T> {
    /// Random initialization. Layer `l` draws its weights from ChaCha8 stream
    /// `l` of `seed`; biases start at zero.
    pub fn init(config: SirenConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layers = layout(&config);
        let mut params = vec![T::zero(); config.param_count()];
        for (l, shape) in layers.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(l as u64);
            let bound = config.init_bound(l);
            let bound_t = T::of(bound);
            for w in &mut params[shape.w_off..shape.b_off] {
                let u: f64 = rng.sample(Open01);
                let mut v = T::of((2.0 * u - 1.0) * bound);
                // Narrow scalars may round onto the bound itself.
                if v.abs() >= bound_t {
                    v = T::zero();
                }
                *w = v;
            }
        }
        Ok(SirenNet {
            config,
            seed,
            params,
            layers,
        })
    }

    pub fn zeros(config: SirenConfig) -> Result<Self> {
        config.validate()?;
        Ok(SirenNet {
            layers: layout(&config),
            params: vec![T::zero(); config.param_count()],
            config,
            seed: 0,
        })
    }

    pub fn from_params(config: SirenConfig, seed: u64, params: Vec<T>) -> Result<Self> {
        config.validate()?;
        if params.len() != config.param_count() {
            return Err(Error::Contract(format!(
                "expected {} parameters, got {}",
                config.param_count(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Contract("non-finite parameter".into()));
        }
        Ok(SirenNet {
            layers: layout(&config),
            config,
            seed,
            params,
        })
    }

    pub fn config(&self) -> &SirenConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Number of weight matrices (hidden layers plus the output projection).
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_shape(&self, layer: usize) -> (usize, usize) {
        let s = self.layers[layer];
        (s.rows, s.cols)
    }

    pub fn weights(&self, layer: usize) -> &[T] {
        let s = self.layers[layer];
        &self.params[s.w_off..s.b_off]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [T] {
        let s = self.layers[layer];
        &mut self.params[s.w_off..s.b_off]
    }

    pub fn bias(&self, layer: usize) -> &[T] {
        let s = self.layers[layer];
        &self.params[s.b_off..s.b_off + s.rows]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [T] {
        let s = self.layers[layer];
        &mut self.params[s.b_off..s.b_off + s.rows]
    }

    /// Same network at a different precision.
    pub fn cast<U: Scalar>(&self) -> SirenNet<U> {
        SirenNet {
            config: self.config,
            seed: self.seed,
            params: self.params.iter().map(|p| U::of(p.f64())).collect(),
            layers: self.layers.clone(),
        }
    }

    fn batch_len(&self, coords: &[T]) -> Result<usize> {
        let d = self.config.in_dim;
        if !coords.len().is_multiple_of(d) {
            return Err(Error::Contract(format!(
                "coordinate buffer of length {} is not a multiple of in_dim {d}",
                coords.len()
            )));
        }
        Ok(coords.len() / d)
    }

    fn encode(&self, coords: &[T], n: usize) -> Vec<T> {
        let d = self.config.in_dim;
        match self.config.activation {
            Activation::ReluPe { n_frequencies } => {
                let width = self.config.encoded_dim();
                let mut out = Vec::with_capacity(n * width);
                for c in coords.chunks_exact(d) {
                    out.extend_from_slice(c);
                    for &ci in c {
                        for k in 0..n_frequencies {
                            let a = pe_scale::<T>(k) * ci;
                            out.push(a.sin());
                            out.push(a.cos());
                        }
                    }
                }
                out
            }
            _ => coords.to_vec(),
        }
    }

    fn affine(&self, layer: usize, x: &[T], n: usize) -> Vec<T> {
        let s = self.layers[layer];
        let bias = &self.params[s.b_off..s.b_off + s.rows];
        let mut z = Vec::with_capacity(n * s.rows);
        for _ in 0..n {
            z.extend_from_slice(bias);
        }
        T::gemm(
            n,
            s.cols,
            s.rows,
            T::one(),
            x,
            s.cols,
            1,
            &self.params[s.w_off..s.b_off],
            1,
            s.cols,
            T::one(),
            &mut z,
            s.rows,
            1,
        );
        z
    }

    // Returns the activation and, for sine layers, the cosine needed later.
    fn activate(&self, z: &[T]) -> (Vec<T>, Vec<T>) {
        match self.config.activation {
            Activation::Sine => {
                // Small stack blocks avoid zero-filling two full-size buffers.
                const BLOCK: usize = 256;
                let omega = T::of(self.config.omega0);
                let (mut s, mut c) = (Vec::with_capacity(z.len()), Vec::with_capacity(z.len()));
                let (mut bs, mut bc) = ([T::zero(); BLOCK], [T::zero(); BLOCK]);
                for blk in z.chunks(BLOCK) {
                    let k = blk.len();
                    T::sin_cos_scaled(omega, blk, &mut bs[..k], Some(&mut bc[..k]));
                    s.extend_from_slice(&bs[..k]);
                    c.extend_from_slice(&bc[..k]);
                }
                (s, c)
            }
            _ => (z.iter().map(|&v| v.max(T::zero())).collect(), Vec::new()),
        }
    }

    // In-place multiply by the activation derivative of hidden layer `l`.
    fn mul_activation_grad(&self, tape: &Tape<T>, l: usize, g: &mut [T]) {
        match self.config.activation {
            Activation::Sine => {
                let w = T::of(self.config.omega0);
                for (gi, &ci) in g.iter_mut().zip(&tape.cos[l]) {
                    *gi *= w * ci;
                }
            }
            _ => {
                for (gi, &zi) in g.iter_mut().zip(&tape.pre[l]) {
                    if zi <= T::zero() {
                        *gi = T::zero();
                    }
                }
            }
        }
    }

    pub fn forward(&self, coords: &[T]) -> Result<Vec<T>> {
        Ok(self.forward_tape(coords)?.output)
    }

    pub fn forward_tape(&self, coords: &[T]) -> Result<Tape<T>> {
        let n = self.batch_len(coords)?;
        let encoded = self.encode(coords, n);
        let hidden = self.layers.len() - 1;
        let mut pre = Vec::with_capacity(hidden);
        let mut cos = Vec::with_capacity(hidden);
        let mut post: Vec<Vec<T>> = Vec::with_capacity(hidden);
        for l in 0..hidden {
            let x = if l == 0 { &encoded } else { &post[l - 1] };
            let z = self.affine(l, x, n);
            let (h, c) = self.activate(&z);
            pre.push(z);
            cos.push(c);
            post.push(h);
        }
        let output = self.affine(hidden, &post[hidden - 1], n);
        Ok(Tape {
            n,
            coords: coords.to_vec(),
            encoded,
            pre,
            cos,
            post,
            output,
        })
    }

    /// Reverse pass for `<output, upstream>`.
    ///
    /// When `param_grad` is given, parameter gradients are *added* into it.
    /// When `want_inputs` is set, returns the gradient with respect to the raw
    /// input coordinates (`n x in_dim`).
    pub fn backward(
        &self,
        tape: &Tape<T>,
        upstream: &[T],
        mut param_grad: Option<&mut [T]>,
        want_inputs: bool,
    ) -> Result<Option<Vec<T>>> {
        let n = tape.n;
        let out_dim = self.config.out_dim;
        if upstream.len() != n * out_dim {
            return Err(Error::Contract(format!(
                "upstream has length {}, expected {}",
                upstream.len(),
                n * out_dim
            )));
        }
        if let Some(g) = param_grad.as_deref() {
            if g.len() != self.params.len() {
                return Err(Error::Contract("gradient buffer has wrong length".into()));
            }
        }

        let last = self.layers.len() - 1;
        let mut delta = upstream.to_vec();
        for l in (0..=last).rev() {
            let s = self.layers[l];
            if l < last {
                self.mul_activation_grad(tape, l, &mut delta);
            }
            let x: &[T] = if l == 0 { &tape.encoded } else { &tape.post[l - 1] };
            if let Some(g) = param_grad.as_deref_mut() {
                // dW += delta^T x
                T::gemm(
                    s.rows,
                    n,
                    s.cols,
                    T::one(),
                    &delta,
                    1,
                    s.rows,
                    x,
                    s.cols,
                    1,
                    T::one(),
                    &mut g[s.w_off..s.b_off],
                    s.cols,
                    1,
                );
                let gb = &mut g[s.b_off..s.b_off + s.rows];
                for row in delta.chunks_exact(s.rows) {
                    for (b, &d) in gb.iter_mut().zip(row) {
                        *b += d;
                    }
                }
            }
            if l == 0 && !want_inputs {
                return Ok(None);
            }
            // dx = delta W
            let mut dx = vec![T::zero(); n * s.cols];
            T::gemm(
                n,
                s.rows,
                s.cols,
                T::one(),
                &delta,
                s.rows,
                1,
                &self.params[s.w_off..s.b_off],
                s.cols,
                1,
                T::zero(),
                &mut dx,
                s.cols,
                1,
            );
            delta = dx;
        }
        Ok(Some(self.pull_back_encoding(&tape.coords, &delta, n)))
    }

    fn pull_back_encoding(&self, coords: &[T], g_enc: &[T], n: usize) -> Vec<T> {
        let d = self.config.in_dim;
        match self.config.activation {
            Activation::ReluPe { n_frequencies } => {
                let width = self.config.encoded_dim();
                let mut out = vec![T::zero(); n * d];
                for p in 0..n {
                    let c = &coords[p * d..(p + 1) * d];
                    let g = &g_enc[p * width..(p + 1) * width];
                    for i in 0..d {
                        let mut acc = g[i];
                        for k in 0..n_frequencies {
                            let scale = pe_scale::<T>(k);
                            let a = scale * c[i];
                            let base = d + 2 * (i * n_frequencies + k);
                            acc += g[base] * scale * a.cos() - g[base + 1] * scale * a.sin();
                        }
                        out[p * d + i] = acc;
                    }
                }
                out
            }
            _ => g_enc.to_vec(),
        }
    }

    /// Gradient of `<forward(coords), upstream>` with respect to every parameter.
    pub fn grad_params(&self, coords: &[T], upstream: &[T]) -> Result<Vec<T>> {
        let tape = self.forward_tape(coords)?;
        let mut g = vec![T::zero(); self.params.len()];
        self.backward(&tape, upstream, Some(&mut g), false)?;
        Ok(g)
    }

    /// Vector-Jacobian product `J^T upstream` per coordinate (`n x in_dim`).
    pub fn input_vjp(&self, coords: &[T], upstream: &[T]) -> Result<Vec<T>> {
        let tape = self.forward_tape(coords)?;
        Ok(self
            .backward(&tape, upstream, None, true)?
            .expect("input gradient requested"))
    }

    /// Full input Jacobians, `n x out_dim x in_dim`, by forward-mode tangents.
    pub fn grad_inputs(&self, coords: &[T]) -> Result<Vec<T>> {
        let tape = self.forward_tape(coords)?;
        let n = tape.n;
        let d = self.config.in_dim;
        let out_dim = self.config.out_dim;
        let width = self.config.encoded_dim();
        let last = self.layers.len() - 1;
        let mut jac = vec![T::zero(); n * out_dim * d];
        for j in 0..d {
            let mut tangent = vec![T::zero(); n * width];
            for p in 0..n {
                let row = &mut tangent[p * width..(p + 1) * width];
                row[j] = T::one();
                if let Activation::ReluPe { n_frequencies } = self.config.activation {
                    let c = tape.coords[p * d + j];
                    for k in 0..n_frequencies {
                        let scale = pe_scale::<T>(k);
                        let a = scale * c;
                        let base = d + 2 * (j * n_frequencies + k);
                        row[base] = scale * a.cos();
                        row[base + 1] = -scale * a.sin();
                    }
                }
            }
            for l in 0..=last {
                let s = self.layers[l];
                let mut t = vec![T::zero(); n * s.rows];
                T::gemm(
                    n,
                    s.cols,
                    s.rows,
                    T::one(),
                    &tangent,
                    s.cols,
                    1,
                    &self.params[s.w_off..s.b_off],
                    1,
                    s.cols,
                    T::zero(),
                    &mut t,
                    s.rows,
                    1,
                );
                if l < last {
                    self.mul_activation_grad(&tape, l, &mut t);
                }
                tangent = t;
            }
            for p in 0..n {
                for o in 0..out_dim {
                    jac[(p * out_dim + o) * d + j] = tangent[p * out_dim + o];
                }
            }
        }
        Ok(jac)
    }
}

fn pe_scale<T: Scalar>(octave: usize) -> T {
    T::of((1u64 << octave) as f64 * std::f64::consts::PI)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(activation: Activation) -> SirenConfig {
        SirenConfig {
            in_dim: 3,
            hidden_dim: 7,
            n_hidden_layers: 2,
            out_dim: 4,
            omega0: 3.0,
            activation,
        }
    }

    fn coords(n: usize, d: usize, phase: f64) -> Vec<f64> {
        (0..n * d)
            .map(|i| ((i as f64 + phase) * 0.731).sin() * 0.9)
            .collect()
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = SirenConfig::sine(3, 32, 2, 8);
        let a = SirenNet::<f64>::init(cfg, 7).unwrap();
        let b = SirenNet::<f64>::init(cfg, 7).unwrap();
        let c = SirenNet::<f64>::init(cfg, 8).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn init_respects_bounds_and_zero_biases() {
        let cfg = SirenConfig::sine(3, 64, 2, 16);
        let net = SirenNet::<f64>::init(cfg, 1).unwrap();
        for l in 0..net.n_layers() {
            let bound = cfg.init_bound(l);
            assert!(net.weights(l).iter().all(|w| w.abs() < bound));
            assert!(net.bias(l).iter().all(|&b| b == 0.0));
        }
        assert_eq!(cfg.init_bound(0), 1.0 / 3.0);
        assert!((cfg.init_bound(1) - (6.0f64 / 64.0).sqrt() / 30.0).abs() < 1e-15);
    }

    #[test]
    fn zero_net_outputs_final_bias() {
        let cfg = small(Activation::Sine);
        let mut net = SirenNet::<f64>::zeros(cfg).unwrap();
        net.bias_mut(2).copy_from_slice(&[0.5, -1.0, 2.0, 0.0]);
        let out = net.forward(&coords(5, 3, 0.0)).unwrap();
        for row in out.chunks(4) {
            assert_eq!(row, &[0.5, -1.0, 2.0, 0.0]);
        }
    }

    #[test]
    fn hand_evaluated_single_unit() {
        let cfg = SirenConfig {
            in_dim: 1,
            hidden_dim: 1,
            n_hidden_layers: 1,
            out_dim: 1,
            omega0: std::f64::consts::FRAC_PI_2,
            activation: Activation::Sine,
        };
        let net = SirenNet::<f64>::from_params(cfg, 0, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let y = net.forward(&[1.0]).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_misshaped_batches() {
        let net = SirenNet::<f64>::init(small(Activation::Sine), 0).unwrap();
        assert!(matches!(net.forward(&[0.0; 4]), Err(Error::Contract(_))));
        let c = coords(2, 3, 0.0);
        assert!(net.grad_params(&c, &[0.0; 3]).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let net = SirenNet::<f64>::init(small(Activation::Sine), 3).unwrap();
        let g = net.grad_params(&coords(6, 3, 0.0), &[0.0; 24]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn final_bias_gradient_is_upstream() {
        let net = SirenNet::<f64>::init(small(Activation::Sine), 3).unwrap();
        let up = [0.25, -1.5, 0.0, 3.0];
        let g = net.grad_params(&coords(1, 3, 0.0), &up).unwrap();
        let s = net.layers[2];
        assert_eq!(&g[s.b_off..s.b_off + 4], &up);
    }

    #[test]
    fn forward_is_batch_order_equivariant() {
        let net = SirenNet::<f64>::init(SirenConfig::sine(3, 64, 2, 16), 5).unwrap();
        let c = coords(9, 3, 0.3);
        let out = net.forward(&c).unwrap();
        let mut rev = Vec::new();
        for p in c.chunks(3).rev() {
            rev.extend_from_slice(p);
        }
        let out_rev = net.forward(&rev).unwrap();
        for (a, b) in out.chunks(16).zip(out_rev.chunks(16).rev()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn vjp_equals_jacobian_transpose() {
        for act in [Activation::Sine, Activation::Relu, Activation::ReluPe { n_frequencies: 2 }] {
            let net = SirenNet::<f64>::init(small(act), 11).unwrap();
            let c = coords(4, 3, 1.0);
            let up: Vec<f64> = (0..16).map(|i| (i as f64 * 0.3).cos()).collect();
            let vjp = net.input_vjp(&c, &up).unwrap();
            let jac = net.grad_inputs(&c).unwrap();
            for p in 0..4 {
                for j in 0..3 {
                    let want: f64 = (0..4).map(|o| jac[(p * 4 + o) * 3 + j] * up[p * 4 + o]).sum();
                    assert!((vjp[p * 3 + j] - want).abs() < 1e-12, "{act:?}");
                }
            }
        }
    }

    #[test]
    fn doubling_first_layer_doubles_preactivation_slope() {
        // 1-layer net, scalar in/out: dy/dx = w2 * omega * cos(omega (w1 x + b1)) * w1.
        let cfg = SirenConfig {
            in_dim: 1,
            hidden_dim: 1,
            n_hidden_layers: 1,
            out_dim: 1,
            omega0: 1.0,
            activation: Activation::Sine,
        };
        let base = SirenNet::<f64>::from_params(cfg, 0, vec![0.3, 0.0, 1.0, 0.0]).unwrap();
        let doubled = SirenNet::<f64>::from_params(cfg, 0, vec![0.6, 0.0, 1.0, 0.0]).unwrap();
        let x = [0.0];
        let j1 = base.grad_inputs(&x).unwrap()[0];
        let j2 = doubled.grad_inputs(&x).unwrap()[0];
        // At x = 0 the cosine factor is 1 for both, leaving the slope term alone.
        assert_eq!(j2, 2.0 * j1);
    }

    #[test]
    fn f32_cast_tracks_f64() {
        let net = SirenNet::<f64>::init(SirenConfig::sine(3, 32, 2, 8), 2).unwrap();
        let net32: SirenNet<f32> = net.cast();
        let c = coords(5, 3, 0.0);
        let c32: Vec<f32> = c.iter().map(|&v| v as f32).collect();
        let a = net.forward(&c).unwrap();
        let b = net32.forward(&c32).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - *y as f64).abs() < 1e-4);
        }
    }
}
