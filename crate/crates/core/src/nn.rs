//! Fully connected networks with a hand-written reverse pass, and the
//! noise-conditioned denoiser built on top of them.
//!
//! Parameters live in one flat vector. Layer `l` stores its weight matrix
//! `W_l` (`in × out`, row-major) followed by its bias `b_l`; a batch `X`
//! (rows are samples) maps to `X·W_l + b_l`. The activation is applied after
//! every layer except the last.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::rng::SeedStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    /// `z·sigmoid(z)`.
    Silu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            // Same expression as in `apply_with_slope` so taped and plain
            // passes agree bit for bit.
            Activation::Silu => z * (1.0 / (1.0 + (-z).exp())),
            Activation::Tanh => z.tanh(),
        }
    }

    /// `(φ(z), φ'(z))`.
    #[inline]
    fn apply_with_slope(self, z: f64) -> (f64, f64) {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                (z * s, s * (1.0 + z * (1.0 - s)))
            }
            Activation::Tanh => {
                let t = z.tanh();
                (t, 1.0 - t * t)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    sizes: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
}

/// Activations cached by a forward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    /// Input to each layer.
    inputs: Vec<Mat>,
    /// Activation derivatives at the hidden pre-activations.
    slopes: Vec<Mat>,
}

fn param_count_for(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl DenseNet {
    /// All-zero network.
    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            activation,
            params: vec![0.0; param_count_for(sizes)],
        })
    }

    /// Weights `~ N(0, 1/fan_in)`, biases zero.
    pub fn init(sizes: &[usize], activation: Activation, rng: &mut SeedStream) -> Result<Self> {
        let mut net = Self::zeros(sizes, activation)?;
        let mut offset = 0;
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let scale = 1.0 / (fan_in as f64).sqrt();
            for p in &mut net.params[offset..offset + fan_in * fan_out] {
                *p = scale * rng.normal();
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(net)
    }

    pub fn from_params(sizes: &[usize], activation: Activation, params: Vec<f64>) -> Result<Self> {
        let net = Self::zeros(sizes, activation)?;
        if params.len() != net.params.len() {
            return Err(Error::DimensionMismatch {
                expected: net.params.len(),
                got: params.len(),
            });
        }
        Ok(Self { params, ..net })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least two layers")
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// SHA-256 of the parameter bit patterns, as lowercase hex.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.sizes {
            h.update((*s as u64).to_le_bytes());
        }
        for p in &self.params {
            h.update(p.to_bits().to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut offset = 0;
        self.sizes.windows(2).map(move |w| {
            let start = offset;
            offset += w[0] * w[1] + w[1];
            (start, w[0], w[1])
        })
    }

    fn affine(&self, input: &Mat, start: usize, fan_in: usize, fan_out: usize) -> Mat {
        let w = &self.params[start..start + fan_in * fan_out];
        let b = &self.params[start + fan_in * fan_out..start + fan_in * fan_out + fan_out];
        let mut out = Mat::zeros(input.rows(), fan_out);
        for i in 0..input.rows() {
            let row = out.row_mut(i);
            row.copy_from_slice(b);
            for (k, x) in input.row(i).iter().enumerate() {
                if *x == 0.0 {
                    continue;
                }
                for (o, wk) in row.iter_mut().zip(&w[k * fan_out..(k + 1) * fan_out]) {
                    *o += x * wk;
                }
            }
        }
        out
    }

    fn check_input(&self, x: &Mat) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.cols(),
            });
        }
        Ok(())
    }

    /// Batched forward pass; rows of `x` are samples.
    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        self.check_input(x)?;
        let n_layers = self.sizes.len() - 1;
        let mut a = x.clone();
        for (l, (start, fi, fo)) in self.layers().enumerate() {
            let mut z = self.affine(&a, start, fi, fo);
            if l + 1 < n_layers {
                for v in z.as_mut_slice() {
                    *v = self.activation.apply(*v);
                }
            }
            a = z;
        }
        Ok(a)
    }

    /// Forward pass that keeps what the reverse pass needs.
    pub fn forward_tape(&self, x: &Mat) -> Result<(Mat, Tape)> {
        self.check_input(x)?;
        let n_layers = self.sizes.len() - 1;
        let mut inputs = Vec::with_capacity(n_layers);
        let mut slopes = Vec::with_capacity(n_layers - 1);
        let mut a = x.clone();
        for (l, (start, fi, fo)) in self.layers().enumerate() {
            let mut z = self.affine(&a, start, fi, fo);
            inputs.push(a);
            if l + 1 < n_layers {
                let mut slope = Mat::zeros(z.rows(), z.cols());
                for (v, d) in z.as_mut_slice().iter_mut().zip(slope.as_mut_slice()) {
                    (*v, *d) = self.activation.apply_with_slope(*v);
                }
                slopes.push(slope);
            }
            a = z;
        }
        Ok((a, Tape { inputs, slopes }))
    }

    /// Reverse pass for the scalar `Σ upstream ⊙ output`: returns the
    /// parameter gradient (summed over the batch) and the input gradient.
    pub fn backward(&self, tape: &Tape, upstream: &Mat) -> (Vec<f64>, Mat) {
        let layers: Vec<_> = self.layers().collect();
        let mut grads = vec![0.0; self.params.len()];
        let mut g = upstream.clone();
        for l in (0..layers.len()).rev() {
            let (start, fi, fo) = layers[l];
            let input = &tape.inputs[l];
            let (gw, gb) = grads[start..start + fi * fo + fo].split_at_mut(fi * fo);
            for i in 0..g.rows() {
                let gr = g.row(i);
                for (b, gv) in gb.iter_mut().zip(gr) {
                    *b += gv;
                }
                for (k, x) in input.row(i).iter().enumerate() {
                    if *x == 0.0 {
                        continue;
                    }
                    for (w, gv) in gw[k * fo..(k + 1) * fo].iter_mut().zip(gr) {
                        *w += x * gv;
                    }
                }
            }
            // Wᵀ laid out row-major so the product below is a sequence of
            // axpys rather than dot products.
            let w_t = Mat::from_vec(fi, fo, self.params[start..start + fi * fo].to_vec()).transpose();
            let mut below = Mat::zeros(g.rows(), fi);
            for i in 0..g.rows() {
                let out = below.row_mut(i);
                for (j, gv) in g.row(i).iter().enumerate() {
                    for (o, wv) in out.iter_mut().zip(w_t.row(j)) {
                        *o += gv * wv;
                    }
                }
            }
            if l > 0 {
                for (v, d) in below.as_mut_slice().iter_mut().zip(tape.slopes[l - 1].as_slice()) {
                    *v *= d;
                }
            }
            g = below;
        }
        (grads, g)
    }
}

/// Output parameterization of a denoiser around its raw network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Preconditioning {
    /// `f(x, σ) = F([x, ln(σ)/4])`.
    Plain,
    /// `f(x, σ) = c_skip·x + c_out·F([c_in·x, ln(σ)/4])` with
    /// `c_skip = σ_d²/(σ²+σ_d²)`, `c_out = σσ_d/√(σ²+σ_d²)`,
    /// `c_in = 1/√(σ²+σ_d²)`.
    Edm { sigma_data: f64 },
}

impl Preconditioning {
    /// `(c_skip, c_out, c_in)`.
    pub fn coefficients(self, sigma: f64) -> (f64, f64, f64) {
        match self {
            Preconditioning::Plain => (0.0, 1.0, 1.0),
            Preconditioning::Edm { sigma_data: sd } => {
                let tot = sigma * sigma + sd * sd;
                (sd * sd / tot, sigma * sd / tot.sqrt(), 1.0 / tot.sqrt())
            }
        }
    }
}

/// The scalar noise-level channel appended to every input.
#[inline]
pub fn sigma_channel(sigma: f64) -> f64 {
    sigma.ln() / 4.0
}

/// Mean-prediction network `f(x, σ) ≈ E[x₀ | x_σ = x]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Denoiser {
    pub net: DenseNet,
    pub precond: Preconditioning,
}

#[derive(Clone, Debug)]
pub struct DenoiseTape {
    net: Tape,
    coeffs: Vec<(f64, f64, f64)>,
}

impl Denoiser {
    pub fn new(net: DenseNet, precond: Preconditioning) -> Result<Self> {
        if net.input_dim() != net.output_dim() + 1 {
            return Err(Error::Config(format!(
                "denoiser net must map d+1 inputs to d outputs, got {} -> {}",
                net.input_dim(),
                net.output_dim()
            )));
        }
        Ok(Self { net, precond })
    }

    /// Randomly initialized denoiser for `dim`-dimensional data.
    pub fn init(
        dim: usize,
        hidden: &[usize],
        activation: Activation,
        precond: Preconditioning,
        rng: &mut SeedStream,
    ) -> Result<Self> {
        let mut sizes = vec![dim + 1];
        sizes.extend_from_slice(hidden);
        sizes.push(dim);
        Self::new(DenseNet::init(&sizes, activation, rng)?, precond)
    }

    pub fn dim(&self) -> usize {
        self.net.output_dim()
    }

    fn net_input(&self, x: &Mat, sigmas: &[f64]) -> Result<(Mat, Vec<(f64, f64, f64)>)> {
        let d = self.dim();
        if x.cols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: x.cols(),
            });
        }
        if sigmas.len() != x.rows() {
            return Err(Error::DimensionMismatch {
                expected: x.rows(),
                got: sigmas.len(),
            });
        }
        let coeffs: Vec<_> = sigmas.iter().map(|s| self.precond.coefficients(*s)).collect();
        let mut input = Mat::zeros(x.rows(), d + 1);
        for i in 0..x.rows() {
            let c_in = coeffs[i].2;
            let row = input.row_mut(i);
            for (r, v) in row.iter_mut().zip(x.row(i)) {
                *r = c_in * v;
            }
            row[d] = sigma_channel(sigmas[i]);
        }
        Ok((input, coeffs))
    }

    fn assemble(x: &Mat, raw: Mat, coeffs: &[(f64, f64, f64)]) -> Mat {
        let mut out = raw;
        for i in 0..x.rows() {
            let (c_skip, c_out, _) = coeffs[i];
            for (o, xv) in out.row_mut(i).iter_mut().zip(x.row(i)) {
                *o = c_skip * xv + c_out * *o;
            }
        }
        out
    }

    /// Denoised means for a batch; `sigmas[i]` is the noise level of row `i`.
    pub fn denoise(&self, x: &Mat, sigmas: &[f64]) -> Result<Mat> {
        let (input, coeffs) = self.net_input(x, sigmas)?;
        let raw = self.net.forward(&input)?;
        Ok(Self::assemble(x, raw, &coeffs))
    }

    pub fn denoise_tape(&self, x: &Mat, sigmas: &[f64]) -> Result<(Mat, DenoiseTape)> {
        let (input, coeffs) = self.net_input(x, sigmas)?;
        let (raw, net) = self.net.forward_tape(&input)?;
        Ok((Self::assemble(x, raw, &coeffs), DenoiseTape { net, coeffs }))
    }

    /// Gradients of `Σ upstream ⊙ f(x, σ)` with respect to the parameters
    /// and to `x`.
    pub fn backward(&self, tape: &DenoiseTape, upstream: &Mat) -> (Vec<f64>, Mat) {
        let d = self.dim();
        let mut raw_up = upstream.clone();
        for (i, (_, c_out, _)) in tape.coeffs.iter().enumerate() {
            for v in raw_up.row_mut(i) {
                *v *= c_out;
            }
        }
        let (grads, g_in) = self.net.backward(&tape.net, &raw_up);
        let mut gx = Mat::zeros(upstream.rows(), d);
        for (i, (c_skip, _, c_in)) in tape.coeffs.iter().enumerate() {
            let up = upstream.row(i);
            let gi = g_in.row(i);
            for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                *o = c_skip * up[j] + c_in * gi[j];
            }
        }
        (grads, gx)
    }

    /// Single-point convenience wrapper.
    pub fn denoise_one(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        Ok(self
            .denoise(&Mat::from_vec(1, x.len(), x.to_vec()), &[sigma])?
            .into_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_net(seed: u64, act: Activation) -> DenseNet {
        DenseNet::init(&[2, 16, 16, 2], act, &mut SeedStream::new(seed)).unwrap()
    }

    #[test]
    fn zero_net_outputs_last_bias() {
        let mut net = DenseNet::zeros(&[3, 4, 2], Activation::Silu).unwrap();
        let n = net.param_count();
        net.params_mut()[n - 2] = 0.7;
        net.params_mut()[n - 1] = -1.5;
        let out = net.forward(&Mat::from_vec(1, 3, vec![1.0, 2.0, 3.0])).unwrap();
        assert_eq!(out.as_slice(), &[0.7, -1.5]);
    }

    #[test]
    fn forward_is_deterministic_and_checks_dims() {
        let a = small_net(1, Activation::Silu);
        let b = small_net(1, Activation::Silu);
        let x = Mat::from_vec(2, 2, vec![0.3, -0.2, 1.0, 0.5]);
        assert_eq!(a.forward(&x).unwrap(), b.forward(&x).unwrap());
        assert!(a.forward(&Mat::zeros(1, 3)).is_err());
        assert_eq!(a.param_hash(), b.param_hash());
        assert_ne!(a.param_hash(), small_net(2, Activation::Silu).param_hash());
    }

    #[test]
    fn taped_forward_matches_plain_forward_bitwise() {
        let x = SeedStream::new(9).normal_mat(64, 2).scale(3.0);
        for act in [Activation::Silu, Activation::Tanh] {
            let net = small_net(4, act);
            assert_eq!(net.forward(&x).unwrap(), net.forward_tape(&x).unwrap().0);
        }
    }

    #[test]
    fn single_linear_layer_gradient_is_analytic() {
        let mut rng = SeedStream::new(3);
        let net = DenseNet::init(&[3, 2], Activation::Silu, &mut rng).unwrap();
        let x = Mat::from_vec(1, 3, vec![0.5, -1.0, 2.0]);
        let y = [0.1, 0.2];
        let (out, tape) = net.forward_tape(&x).unwrap();
        let resid: Vec<f64> = out.as_slice().iter().zip(&y).map(|(o, t)| o - t).collect();
        let up = Mat::from_vec(1, 2, resid.iter().map(|r| 2.0 * r).collect());
        let (g, _) = net.backward(&tape, &up);
        for k in 0..3 {
            for j in 0..2 {
                let want = 2.0 * resid[j] * x[(0, k)];
                assert!((g[k * 2 + j] - want).abs() < 1e-14);
            }
        }
        assert!((g[6] - 2.0 * resid[0]).abs() < 1e-14);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = small_net(4, Activation::Silu);
        let x = Mat::from_vec(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let (_, tape) = net.forward_tape(&x).unwrap();
        let (g, gx) = net.backward(&tape, &Mat::zeros(3, 2));
        assert!(g.iter().all(|v| *v == 0.0));
        assert!(gx.as_slice().iter().all(|v| *v == 0.0));
    }

    fn check_param_grads(net: &DenseNet, x: &Mat, up: &Mat) {
        let (_, tape) = net.forward_tape(x).unwrap();
        let (g, _) = net.backward(&tape, up);
        let h = 1e-6;
        for k in 0..net.param_count() {
            let mut p = net.clone();
            p.params_mut()[k] += h;
            let fp = p.forward(x).unwrap().dot(up);
            p.params_mut()[k] -= 2.0 * h;
            let fm = p.forward(x).unwrap().dot(up);
            let fd = (fp - fm) / (2.0 * h);
            let err = (fd - g[k]).abs() / g[k].abs().max(1e-2);
            assert!(err < 1e-5, "param {k}: fd {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut rng = SeedStream::new(5);
        for act in [Activation::Silu, Activation::Tanh] {
            let net = small_net(6, act);
            let x = rng.normal_mat(4, 2);
            let up = rng.normal_mat(4, 2);
            check_param_grads(&net, &x, &up);
        }
        let deep = DenseNet::init(&[3, 8, 8, 8, 2], Activation::Silu, &mut rng).unwrap();
        check_param_grads(&deep, &rng.normal_mat(3, 3), &rng.normal_mat(3, 2));
    }

    #[test]
    fn input_jacobian_is_first_order_accurate() {
        let mut rng = SeedStream::new(7);
        let den = Denoiser::init(
            2,
            &[16, 16],
            Activation::Silu,
            Preconditioning::Edm { sigma_data: 0.5 },
            &mut rng,
        )
        .unwrap();
        let x = rng.normal_mat(1, 2);
        let (f0, tape) = den.denoise_tape(&x, &[0.7]).unwrap();
        let mut jac = [[0.0; 2]; 2];
        for (j, row) in jac.iter_mut().enumerate() {
            let mut up = Mat::zeros(1, 2);
            up[(0, j)] = 1.0;
            let (_, gx) = den.backward(&tape, &up);
            row.copy_from_slice(gx.row(0));
        }
        let dir = [0.6, -0.8];
        let mut prev = f64::INFINITY;
        for h in [1e-1, 1e-2, 1e-3] {
            let xp = Mat::from_vec(1, 2, vec![x[(0, 0)] + h * dir[0], x[(0, 1)] + h * dir[1]]);
            let fp = den.denoise(&xp, &[0.7]).unwrap();
            let err: f64 = (0..2)
                .map(|j| {
                    let lin = f0[(0, j)] + h * (jac[j][0] * dir[0] + jac[j][1] * dir[1]);
                    (fp[(0, j)] - lin).powi(2)
                })
                .sum::<f64>()
                .sqrt();
            // Quadratic remainder: shrinking h by 10 shrinks the error ~100x.
            assert!(err < prev / 50.0 || err < 1e-12, "h={h}: {err} vs {prev}");
            prev = err;
        }
    }

    #[test]
    fn denoiser_gradients_match_finite_differences() {
        let mut rng = SeedStream::new(8);
        for precond in [Preconditioning::Plain, Preconditioning::Edm { sigma_data: 0.5 }] {
            let den = Denoiser::init(2, &[8, 8], Activation::Silu, precond, &mut rng).unwrap();
            assert!(den.net.param_count() <= 200);
            let x = rng.normal_mat(3, 2);
            let sig = [0.05, 0.5, 3.0];
            let up = rng.normal_mat(3, 2);
            let (_, tape) = den.denoise_tape(&x, &sig).unwrap();
            let (g, gx) = den.backward(&tape, &up);
            let h = 1e-6;
            for k in 0..den.net.param_count() {
                let mut p = den.clone();
                p.net.params_mut()[k] += h;
                let fp = p.denoise(&x, &sig).unwrap().dot(&up);
                p.net.params_mut()[k] -= 2.0 * h;
                let fm = p.denoise(&x, &sig).unwrap().dot(&up);
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - g[k]).abs() / g[k].abs().max(1e-2) < 1e-5);
            }
            for k in 0..6 {
                let mut xp = x.clone();
                xp.as_mut_slice()[k] += h;
                let fp = den.denoise(&xp, &sig).unwrap().dot(&up);
                xp.as_mut_slice()[k] -= 2.0 * h;
                let fm = den.denoise(&xp, &sig).unwrap().dot(&up);
                let fd = (fp - fm) / (2.0 * h);
                let an = gx.as_slice()[k];
                assert!((fd - an).abs() / an.abs().max(1e-2) < 1e-5);
            }
        }
    }

    #[test]
    fn edm_coefficients_limits() {
        let p = Preconditioning::Edm { sigma_data: 0.5 };
        let (skip, out, inp) = p.coefficients(1e-8);
        assert!((skip - 1.0).abs() < 1e-12 && out < 1e-7 && (inp - 2.0).abs() < 1e-10);
        assert_eq!(Preconditioning::Plain.coefficients(0.3), (0.0, 1.0, 1.0));
    }
}
