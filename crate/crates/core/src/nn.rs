//! Small dense and convolutional layers with hand-written backward passes,
//! an Adam optimizer, and the named-parameter-block plumbing shared by the
//! models and the checkpoint format.
//!
//! Activations are `frames x channels` matrices. Layer gradients are stored
//! in a value of the layer's own type, so `grad.weight` mirrors `weight`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use sha2::{Digest, Sha256};

/// A named, shaped view of one parameter tensor.
#[derive(Debug)]
pub struct BlockRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

/// Ordered access to every parameter tensor of a model. `blocks` and
/// `blocks_mut` must enumerate tensors in the same order.
pub trait Parameters {
    fn blocks(&self) -> Vec<BlockRef<'_>>;
    fn blocks_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.data.len()).sum()
    }

    fn fill_zero(&mut self) {
        for b in self.blocks_mut() {
            b.fill(0.0);
        }
    }

    fn sq_norm(&self) -> f64 {
        self.blocks().iter().flat_map(|b| b.data.iter()).map(|v| v * v).sum()
    }

    fn scale(&mut self, factor: f64) {
        for b in self.blocks_mut() {
            b.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// `self += other`, blockwise.
    fn add_assign(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let src: Vec<Vec<f64>> = other.blocks().iter().map(|b| b.data.to_vec()).collect();
        for (dst, src) in self.blocks_mut().into_iter().zip(src) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
    }

    /// SHA-256 over every block's name and little-endian bytes.
    fn digest(&self) -> String {
        let mut h = Sha256::new();
        for b in self.blocks() {
            h.update(b.name.as_bytes());
            for v in b.data {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|byte| format!("{byte:02x}")).collect()
    }
}

/// Prefixes child block names with `prefix.`.
pub fn prefixed<'a>(prefix: &str, blocks: Vec<BlockRef<'a>>) -> Vec<BlockRef<'a>> {
    blocks
        .into_iter()
        .map(|mut b| {
            b.name = format!("{prefix}.{}", b.name);
            b
        })
        .collect()
}

pub(crate) fn block2<'a>(name: &str, a: &'a Array2<f64>) -> BlockRef<'a> {
    BlockRef {
        name: name.to_string(),
        shape: a.shape().to_vec(),
        data: a.as_slice().expect("standard layout"),
    }
}

pub(crate) fn block1<'a>(name: &str, a: &'a Array1<f64>) -> BlockRef<'a> {
    BlockRef {
        name: name.to_string(),
        shape: vec![a.len()],
        data: a.as_slice().expect("standard layout"),
    }
}

/// Fully connected layer, `y = x W + b` with `W: in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn init<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        Self::init_scaled(input, output, 1.0, rng)
    }

    pub fn init_scaled<R: Rng>(input: usize, output: usize, gain: f64, rng: &mut R) -> Self {
        let a = gain * (6.0 / (input + output) as f64).sqrt();
        Linear {
            weight: Array2::from_shape_simple_fn((input, output), || rng.random_range(-a..a)),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.output_dim())
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    pub fn forward_vec(&self, x: ArrayView1<f64>) -> Array1<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) -> Array2<f64> {
        self.backward_params(x, dy, grad);
        dy.dot(&self.weight.t())
    }

    /// Accumulates parameter gradients only.
    pub fn backward_params(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) {
        grad.weight += &x.t().dot(&dy);
        grad.bias += &dy.sum_axis(Axis(0));
    }

    pub fn backward_vec(&self, x: ArrayView1<f64>, dy: ArrayView1<f64>, grad: &mut Linear) -> Array1<f64> {
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                grad.weight.row_mut(i).scaled_add(xi, &dy);
            }
        }
        grad.bias += &dy;
        self.weight.dot(&dy)
    }
}

impl Parameters for Linear {
    fn blocks(&self) -> Vec<BlockRef<'_>> {
        vec![block2("weight", &self.weight), block1("bias", &self.bias)]
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }
}

/// Gathers `kernel` time-shifted copies of `x` side by side with zero
/// padding, giving `frames x (kernel * channels)`.
pub fn im2col(x: ArrayView2<f64>, kernel: usize) -> Array2<f64> {
    let (frames, ch) = x.dim();
    let half = kernel / 2;
    let mut cols = Array2::zeros((frames, kernel * ch));
    for j in 0..kernel {
        // column block j holds x[t + j - half]
        let lo = half.saturating_sub(j);
        let hi = (frames + half).saturating_sub(j).min(frames);
        if lo >= hi {
            continue;
        }
        let src_lo = lo + j - half;
        let src_hi = hi + j - half;
        cols.slice_mut(s![lo..hi, j * ch..(j + 1) * ch])
            .assign(&x.slice(s![src_lo..src_hi, ..]));
    }
    cols
}

/// Adjoint of [`im2col`].
pub fn col2im(cols: ArrayView2<f64>, kernel: usize, ch: usize) -> Array2<f64> {
    let frames = cols.nrows();
    let half = kernel / 2;
    let mut x = Array2::zeros((frames, ch));
    for j in 0..kernel {
        let lo = half.saturating_sub(j);
        let hi = (frames + half).saturating_sub(j).min(frames);
        if lo >= hi {
            continue;
        }
        let src_lo = lo + j - half;
        let src_hi = hi + j - half;
        let mut dst = x.slice_mut(s![src_lo..src_hi, ..]);
        dst += &cols.slice(s![lo..hi, j * ch..(j + 1) * ch]);
    }
    x
}

/// Same-padded 1-D convolution over time, stored as a linear map on
/// [`im2col`] patches.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub kernel: usize,
    pub channels_in: usize,
    pub linear: Linear,
}

impl Conv1d {
    pub fn init<R: Rng>(kernel: usize, input: usize, output: usize, rng: &mut R) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        Conv1d {
            kernel,
            channels_in: input,
            linear: Linear::init_scaled(kernel * input, output, (2.0f64).sqrt(), rng),
        }
    }

    pub fn zeros(kernel: usize, input: usize, output: usize) -> Self {
        Conv1d {
            kernel,
            channels_in: input,
            linear: Linear::zeros(kernel * input, output),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.kernel, self.channels_in, self.linear.output_dim())
    }

    pub fn output_dim(&self) -> usize {
        self.linear.output_dim()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.forward_cached(x).0
    }

    /// Returns the output and the patch matrix needed by [`Conv1d::backward`].
    pub fn forward_cached(&self, x: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let cols = im2col(x, self.kernel);
        (self.linear.forward(cols.view()), cols)
    }

    pub fn backward(&self, cols: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Conv1d) -> Array2<f64> {
        let dcols = self.linear.backward(cols, dy, &mut grad.linear);
        col2im(dcols.view(), self.kernel, self.channels_in)
    }

    pub fn backward_params(&self, cols: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Conv1d) {
        self.linear.backward_params(cols, dy, &mut grad.linear);
    }
}

impl Parameters for Conv1d {
    fn blocks(&self) -> Vec<BlockRef<'_>> {
        self.linear.blocks()
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.linear.blocks_mut()
    }
}

pub fn relu(x: Array2<f64>) -> Array2<f64> {
    x.mapv_into(|v| v.max(0.0))
}

/// Masks `dy` where the post-activation output `y` is zero.
pub fn relu_backward(y: ArrayView2<f64>, mut dy: Array2<f64>) -> Array2<f64> {
    dy.zip_mut_with(&y, |d, &v| {
        if v <= 0.0 {
            *d = 0.0
        }
    });
    dy
}

/// Adam with decoupled per-block moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<P: Parameters>(params: &P, beta1: f64, beta2: f64, eps: f64) -> Self {
        let sizes: Vec<usize> = params.blocks().iter().map(|b| b.data.len()).collect();
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One bias-corrected Adam update. Blocks whose gradient is identically
    /// zero this step are left untouched, moments included.
    pub fn update<P: Parameters>(&mut self, params: &mut P, grads: &P, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let grads = grads.blocks();
        for (i, (p, g)) in params.blocks_mut().into_iter().zip(&grads).enumerate() {
            if g.data.iter().all(|&v| v == 0.0) {
                continue;
            }
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for j in 0..p.len() {
                let gj = g.data[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Scales `grads` so its global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<P: Parameters>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads.sq_norm().sqrt();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn im2col_col2im_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kernel in [1usize, 3, 5] {
            let x = Array2::from_shape_simple_fn((7, 3), || rng.random_range(-1.0..1.0));
            let c = Array2::from_shape_simple_fn((7, 3 * kernel), || rng.random_range(-1.0..1.0));
            let lhs = (&im2col(x.view(), kernel) * &c).sum();
            let rhs = (&x * &col2im(c.view(), kernel, 3)).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv1d::init(3, 2, 4, &mut rng);
        let x = Array2::from_shape_simple_fn((6, 2), || rng.random_range(-1.0..1.0));
        let y = conv.forward(x.view());
        for t in 0..6 {
            for o in 0..4 {
                let mut acc = conv.linear.bias[o];
                for j in 0..3 {
                    let src = t as isize + j as isize - 1;
                    if (0..6).contains(&src) {
                        for c in 0..2 {
                            acc += x[[src as usize, c]] * conv.linear.weight[[j * 2 + c, o]];
                        }
                    }
                }
                assert!((acc - y[[t, o]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lin = Linear::init(4, 3, &mut rng);
        let x = Array2::from_shape_simple_fn((5, 4), || rng.random_range(-1.0..1.0));
        let target = Array2::from_shape_simple_fn((5, 3), || rng.random_range(-1.0..1.0));
        let loss = |l: &Linear, x: &Array2<f64>| {
            let y = l.forward(x.view());
            (&y - &target).mapv(|v| v * v).sum() * 0.5
        };
        let y = lin.forward(x.view());
        let dy = &y - &target;
        let mut grad = lin.zeros_like();
        let dx = lin.backward(x.view(), dy.view(), &mut grad);
        let h = 1e-6;
        for i in 0..4 {
            for o in 0..3 {
                let mut p = lin.clone();
                p.weight[[i, o]] += h;
                let mut m = lin.clone();
                m.weight[[i, o]] -= h;
                let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
                assert!((fd - grad.weight[[i, o]]).abs() < 1e-6);
            }
        }
        let mut xp = x.clone();
        xp[[2, 1]] += h;
        let mut xm = x.clone();
        xm[[2, 1]] -= h;
        let fd = (loss(&lin, &xp) - loss(&lin, &xm)) / (2.0 * h);
        assert!((fd - dx[[2, 1]]).abs() < 1e-6);
    }

    #[test]
    fn adam_skips_zero_gradient_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut lin = Linear::init(3, 2, &mut rng);
        let before = lin.clone();
        let mut grad = lin.zeros_like();
        grad.bias[0] = 1.0;
        let mut adam = Adam::new(&lin, 0.9, 0.98, 1e-9);
        adam.update(&mut lin, &grad, 0.1);
        assert_eq!(lin.weight, before.weight);
        assert!((lin.bias[0] - (before.bias[0] - 0.1)).abs() < 1e-9);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = Linear::zeros(2, 2);
        g.weight.fill(10.0);
        let n = clip_grad_norm(&mut g, 5.0);
        assert!((n - 20.0).abs() < 1e-12);
        assert!((g.sq_norm().sqrt() - 5.0).abs() < 1e-12);
    }
}
