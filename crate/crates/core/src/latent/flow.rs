//! Style-conditioned normalizing flow: a stack of per-frame affine coupling
//! layers with tanh-bounded log-scales, alternating which half of the
//! channels is transformed.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{prefixed, BlockRef, Linear, Parameters};

/// Bound on each element's log-scale.
pub const LOG_SCALE_BOUND: f64 = 2.0;
pub const FLOW_LAYERS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowOutput {
    pub transformed: Array2<f64>,
    /// Per-frame `log |det df/dz|`.
    pub log_det: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer {
    pub input: Linear,
    pub cond: Linear,
    /// Emits `[shift | raw log-scale]`; zero-initialized.
    pub out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Flow {
    pub layers: Vec<CouplingLayer>,
    pub channels: usize,
    pub cond_dim: usize,
}

struct LayerTrace {
    a: Array2<f64>,
    b: Array2<f64>,
    h: Array2<f64>,
    log_scale: Array2<f64>,
    raw: Array2<f64>,
}

pub(crate) struct FlowTrace {
    layers: Vec<LayerTrace>,
    cond: Array1<f64>,
}

fn bounded(raw: f64) -> f64 {
    LOG_SCALE_BOUND * (raw / LOG_SCALE_BOUND).tanh()
}

impl CouplingLayer {
    /// Shift and raw log-scale for the conditioning half `a`.
    fn params(&self, a: ArrayView2<f64>, cond_h: &Array1<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let mut h = self.input.forward(a);
        h += cond_h;
        h.mapv_inplace(|v| v.max(0.0));
        let o = self.out.forward(h.view());
        let half = a.ncols();
        let shift = o.slice(s![.., ..half]).to_owned();
        let raw = o.slice(s![.., half..]).to_owned();
        (h, shift, raw)
    }
}

impl Flow {
    pub fn init<R: Rng>(channels: usize, cond_dim: usize, hidden: usize, layers: usize, rng: &mut R) -> Result<Self> {
        if !channels.is_multiple_of(2) || channels == 0 {
            return Err(Error::Config(format!(
                "flow needs an even channel count, got {channels}"
            )));
        }
        let half = channels / 2;
        let layers = (0..layers)
            .map(|_| CouplingLayer {
                input: Linear::init_scaled(half, hidden, 2f64.sqrt(), rng),
                cond: Linear::init(cond_dim, hidden, rng),
                out: Linear::zeros(hidden, channels),
            })
            .collect();
        Ok(Flow {
            layers,
            channels,
            cond_dim,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Flow {
            layers: self
                .layers
                .iter()
                .map(|l| CouplingLayer {
                    input: l.input.zeros_like(),
                    cond: l.cond.zeros_like(),
                    out: l.out.zeros_like(),
                })
                .collect(),
            channels: self.channels,
            cond_dim: self.cond_dim,
        }
    }

    fn check(&self, z: ArrayView2<f64>, cond: ArrayView1<f64>) -> Result<()> {
        if z.ncols() != self.channels {
            return Err(Error::input(format!(
                "flow expects {} channels, got {}",
                self.channels,
                z.ncols()
            )));
        }
        if cond.len() != self.cond_dim {
            return Err(Error::input(format!(
                "flow expects {}-d conditioning, got {}",
                self.cond_dim,
                cond.len()
            )));
        }
        Ok(())
    }

    /// Column ranges of the passive and transformed halves for layer `i`.
    fn halves(&self, i: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let half = self.channels / 2;
        if i.is_multiple_of(2) {
            (0..half, half..self.channels)
        } else {
            (half..self.channels, 0..half)
        }
    }

    pub(crate) fn forward_cached(&self, z: ArrayView2<f64>, cond: ArrayView1<f64>) -> Result<(FlowOutput, FlowTrace)> {
        self.check(z, cond)?;
        let mut x = z.to_owned();
        let mut log_det = Array1::zeros(z.nrows());
        let mut traces = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let (pa, pb) = self.halves(i);
            let a = x.slice(s![.., pa]).to_owned();
            let b = x.slice(s![.., pb.clone()]).to_owned();
            let cond_h = layer.cond.forward_vec(cond);
            let (h, shift, raw) = layer.params(a.view(), &cond_h);
            let log_scale = raw.mapv(bounded);
            let b_new = &b * &log_scale.mapv(f64::exp) + &shift;
            log_det += &log_scale.sum_axis(Axis(1));
            x.slice_mut(s![.., pb]).assign(&b_new);
            traces.push(LayerTrace {
                a,
                b,
                h,
                log_scale,
                raw,
            });
        }
        Ok((
            FlowOutput {
                transformed: x,
                log_det,
            },
            FlowTrace {
                layers: traces,
                cond: cond.to_owned(),
            },
        ))
    }

    pub fn forward(&self, z: ArrayView2<f64>, cond: ArrayView1<f64>) -> Result<FlowOutput> {
        Ok(self.forward_cached(z, cond)?.0)
    }

    /// Exact inverse; the returned log-det is that of the inverse map, the
    /// negation of the forward log-det at the recovered input.
    pub fn inverse(&self, u: ArrayView2<f64>, cond: ArrayView1<f64>) -> Result<FlowOutput> {
        self.check(u, cond)?;
        let mut x = u.to_owned();
        let mut log_det = Array1::zeros(u.nrows());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (pa, pb) = self.halves(i);
            let a = x.slice(s![.., pa]).to_owned();
            let cond_h = layer.cond.forward_vec(cond);
            let (_, shift, raw) = layer.params(a.view(), &cond_h);
            let log_scale = raw.mapv(bounded);
            let b_new = x.slice(s![.., pb.clone()]).to_owned();
            let b = (&b_new - &shift) * &log_scale.mapv(|v| (-v).exp());
            log_det -= &log_scale.sum_axis(Axis(1));
            x.slice_mut(s![.., pb]).assign(&b);
        }
        Ok(FlowOutput {
            transformed: x,
            log_det,
        })
    }

    /// Backpropagates `d_out` (on the transformed output) and `d_log_det`
    /// (per frame) into parameter gradients; returns the gradient on `z`.
    pub(crate) fn backward(
        &self,
        trace: &FlowTrace,
        d_out: ArrayView2<f64>,
        d_log_det: ArrayView1<f64>,
        grad: &mut Flow,
    ) -> Array2<f64> {
        let mut dx = d_out.to_owned();
        let dld = d_log_det.insert_axis(Axis(1));
        for (i, (layer, t)) in self.layers.iter().zip(&trace.layers).enumerate().rev() {
            let (pa, pb) = self.halves(i);
            let g = &mut grad.layers[i];
            let db_new = dx.slice(s![.., pb.clone()]).to_owned();
            let scale = t.log_scale.mapv(f64::exp);
            let db = &db_new * &scale;
            let dls = &db_new * &t.b * &scale + dld;
            let sech2 = t.raw.mapv(|r| {
                let th = (r / LOG_SCALE_BOUND).tanh();
                1.0 - th * th
            });
            let draw = dls * sech2;
            let half = self.channels / 2;
            let mut d_o = Array2::zeros((dx.nrows(), 2 * half));
            d_o.slice_mut(s![.., ..half]).assign(&db_new);
            d_o.slice_mut(s![.., half..]).assign(&draw);
            let dh = layer.out.backward(t.h.view(), d_o.view(), &mut g.out);
            let dpre = crate::nn::relu_backward(t.h.view(), dh);
            let da = layer.input.backward(t.a.view(), dpre.view(), &mut g.input);
            let dsum = dpre.sum_axis(Axis(0));
            layer.cond.backward_vec(trace.cond.view(), dsum.view(), &mut g.cond);
            let mut da_total = dx.slice(s![.., pa.clone()]).to_owned();
            da_total += &da;
            dx.slice_mut(s![.., pa]).assign(&da_total);
            dx.slice_mut(s![.., pb]).assign(&db);
        }
        dx
    }
}

impl Parameters for Flow {
    fn blocks(&self) -> Vec<BlockRef<'_>> {
        let mut v = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            v.extend(prefixed(&format!("coupling{i}.input"), l.input.blocks()));
            v.extend(prefixed(&format!("coupling{i}.cond"), l.cond.blocks()));
            v.extend(prefixed(&format!("coupling{i}.out"), l.out.blocks()));
        }
        v
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = Vec::new();
        for l in &mut self.layers {
            v.extend(l.input.blocks_mut());
            v.extend(l.cond.blocks_mut());
            v.extend(l.out.blocks_mut());
        }
        v
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// A flow with every output layer randomized so it is far from identity.
    pub(crate) fn random_flow(channels: usize, cond_dim: usize, seed: u64) -> Flow {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = Flow::init(channels, cond_dim, 8, FLOW_LAYERS, &mut rng).unwrap();
        for l in &mut f.layers {
            l.out = Linear::init_scaled(8, channels, 0.8, &mut rng);
        }
        f
    }

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-2.0..2.0))
    }

    #[test]
    fn fresh_flow_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = Flow::init(32, 16, 8, 4, &mut rng).unwrap();
        let z = random(10, 32, &mut rng);
        let c = Array1::from_shape_simple_fn(16, || rng.random_range(-1.0..1.0));
        let out = f.forward(z.view(), c.view()).unwrap();
        assert_eq!(out.transformed, z);
        assert!(out.log_det.iter().all(|&v| v == 0.0));
        assert_eq!(f.inverse(z.view(), c.view()).unwrap().transformed, z);
    }

    #[test]
    fn odd_channels_are_a_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(Flow::init(5, 4, 8, 4, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn inverse_round_trip_and_log_det_sign() {
        let f = random_flow(32, 16, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = random(20, 32, &mut rng);
        let c = Array1::from_shape_simple_fn(16, || rng.random_range(-1.0..1.0));
        let fwd = f.forward(z.view(), c.view()).unwrap();
        let inv = f.inverse(fwd.transformed.view(), c.view()).unwrap();
        let err = (&inv.transformed - &z).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-10);
        let total = &fwd.log_det + &inv.log_det;
        assert!(total.iter().all(|v| v.abs() < 1e-10));
        assert!(fwd.log_det.iter().any(|v| v.abs() > 0.1));
    }

    #[test]
    fn log_det_matches_numerical_jacobian() {
        let f = random_flow(4, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = Array1::from_shape_simple_fn(3, || rng.random_range(-1.0..1.0));
        for _ in 0..20 {
            let z = random(1, 4, &mut rng);
            let out = f.forward(z.view(), c.view()).unwrap();
            let h = 1e-6;
            let jac = DMatrix::from_fn(4, 4, |i, j| {
                let mut zp = z.clone();
                zp[[0, j]] += h;
                let mut zm = z.clone();
                zm[[0, j]] -= h;
                let fp = f.forward(zp.view(), c.view()).unwrap().transformed;
                let fm = f.forward(zm.view(), c.view()).unwrap().transformed;
                (fp[[0, i]] - fm[[0, i]]) / (2.0 * h)
            });
            let numeric = jac.determinant().abs().ln();
            let rel = (numeric - out.log_det[0]).abs() / out.log_det[0].abs().max(1e-3);
            assert!(rel < 1e-3, "numeric {numeric} vs {}", out.log_det[0]);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let f = random_flow(6, 3, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z = random(5, 6, &mut rng);
        let c = Array1::from_shape_simple_fn(3, || rng.random_range(-1.0..1.0));
        let w = random(5, 6, &mut rng);
        let wl = Array1::from_shape_simple_fn(5, || rng.random_range(-1.0..1.0));
        let loss = |f: &Flow, z: &Array2<f64>| {
            let o = f.forward(z.view(), c.view()).unwrap();
            (&o.transformed * &w).sum() + o.log_det.dot(&wl)
        };
        let (_, trace) = f.forward_cached(z.view(), c.view()).unwrap();
        let mut grad = f.zeros_like();
        let dz = f.backward(&trace, w.view(), wl.view(), &mut grad);
        let h = 1e-6;
        for (i, j) in [(0, 0), (2, 3), (4, 5)] {
            let mut zp = z.clone();
            zp[[i, j]] += h;
            let mut zm = z.clone();
            zm[[i, j]] -= h;
            let fd = (loss(&f, &zp) - loss(&f, &zm)) / (2.0 * h);
            assert!((fd - dz[[i, j]]).abs() < 1e-6 * fd.abs().max(1.0));
        }
        let analytic: Vec<Vec<f64>> = grad.blocks().iter().map(|b| b.data.to_vec()).collect();
        let names: Vec<String> = f.blocks().iter().map(|b| b.name.clone()).collect();
        for (bi, name) in names.iter().enumerate() {
            for idx in [0usize, 5] {
                if idx >= analytic[bi].len() {
                    continue;
                }
                let mut p = f.clone();
                p.blocks_mut()[bi][idx] += h;
                let mut m = f.clone();
                m.blocks_mut()[bi][idx] -= h;
                let fd = (loss(&p, &z) - loss(&m, &z)) / (2.0 * h);
                let a = analytic[bi][idx];
                let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
                assert!(rel < 1e-3 || (fd - a).abs() < 1e-9, "{name}[{idx}] fd {fd} vs {a}");
            }
        }
    }

    /// Asymptotic Kolmogorov-Smirnov p-value with Stephens' small-sample correction.
    fn ks_p_value(mut sample: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
        sample.sort_by(f64::total_cmp);
        let n = sample.len() as f64;
        let d = sample.iter().enumerate().fold(0.0f64, |m, (i, &x)| {
            let c = cdf(x);
            m.max(c - i as f64 / n).max((i + 1) as f64 / n - c)
        });
        let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
        let q: f64 = (1..=100)
            .map(|k| {
                let k = k as f64;
                2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp()
            })
            .sum();
        q.clamp(0.0, 1.0)
    }

    /// Rejection-samples z from N(f(z); mu, sigma) * |det J| (with or without
    /// the Jacobian term) using a wide Gaussian proposal, and returns the
    /// squared standardized norms of f(z), which are chi-square(4) under the
    /// correct density.
    fn pushed_norms(with_log_det: bool, count: usize) -> Vec<f64> {
        use rand_distr::{Distribution, StandardNormal};
        // milder than random_flow so a Gaussian proposal envelopes the density
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut f = Flow::init(4, 3, 8, FLOW_LAYERS, &mut rng).unwrap();
        for l in &mut f.layers {
            l.out = Linear::init_scaled(8, 4, 0.3, &mut rng);
        }
        let c = Array1::from(vec![0.4, -0.3, 0.8]);
        let mu = [0.3, -0.2, 0.1, 0.0];
        let sigma = [1.0, 0.8, 1.2, 1.0];
        let spread = 2.5;
        let propose = |rng: &mut ChaCha8Rng| {
            let z = Array2::from_shape_simple_fn((1000, 4), || {
                let x: f64 = StandardNormal.sample(&mut *rng);
                spread * x
            });
            let out = f.forward(z.view(), c.view()).unwrap();
            (0..z.nrows())
                .map(|r| {
                    let mut log_ratio = if with_log_det { out.log_det[r] } else { 0.0 };
                    let mut norm = 0.0;
                    for i in 0..4 {
                        let u = (out.transformed[[r, i]] - mu[i]) / sigma[i];
                        let x = z[[r, i]] / spread;
                        log_ratio += -0.5 * u * u - sigma[i].ln() + 0.5 * x * x + f64::ln(spread);
                        norm += u * u;
                    }
                    (log_ratio, norm)
                })
                .collect::<Vec<_>>()
        };
        let bound = (0..100)
            .flat_map(|_| propose(&mut rng))
            .map(|p| p.0)
            .fold(f64::MIN, f64::max)
            + 2.0;
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            for (log_ratio, norm) in propose(&mut rng) {
                assert!(log_ratio < bound, "envelope violated");
                if out.len() < count && rng.random::<f64>().ln() < log_ratio - bound {
                    out.push(norm);
                }
            }
        }
        out
    }

    #[test]
    fn flow_density_matches_change_of_variables() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let chi = ChiSquared::new(4.0).unwrap();
        let p = ks_p_value(pushed_norms(true, 10_000), |x| chi.cdf(x));
        assert!(p > 0.01, "KS p = {p}");
        // dropping the Jacobian term must be detectable at this sample size
        let p_wrong = ks_p_value(pushed_norms(false, 10_000), |x| chi.cdf(x));
        assert!(p_wrong < 1e-3, "KS p without log-det = {p_wrong}");
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn inverse_recovers_input(seed in 0u64..1000, scale in 0.1f64..4.0) {
            let f = random_flow(8, 3, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let z = random(6, 8, &mut rng) * scale;
            let c = Array1::from_shape_simple_fn(3, || rng.random_range(-2.0..2.0));
            let back = f.inverse(f.forward(z.view(), c.view()).unwrap().transformed.view(), c.view()).unwrap();
            let err = (&back.transformed - &z).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            proptest::prop_assert!(err < 1e-4);
        }
    }
}
