use rand::Rng;

use super::ops::{linear_backward, linear_forward, sigmoid};
use super::param::{Param, Parameterized};
use super::tensor::Tensor2;
use crate::error::Result;

/// Dense layer `y = Wᵀx + b`, `W` of shape in×out.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: Param,
    pub b: Param,
}

impl Dense {
    pub fn new<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            w: Param::new(Tensor2::glorot(input, output, input, output, rng)),
            b: Param::zeros(1, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.value.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.value.cols()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        linear_forward(x, &self.w.value, self.b.value.data())
    }

    pub fn backward(&mut self, x: &[f64], dy: &[f64]) -> Result<Vec<f64>> {
        linear_backward(
            x,
            &self.w.value,
            dy,
            &mut self.w.grad,
            self.b.grad.data_mut(),
        )
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&format!("{prefix}.w"), &self.w);
        f(&format!("{prefix}.b"), &self.b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&format!("{prefix}.w"), &mut self.w);
        f(&format!("{prefix}.b"), &mut self.b);
    }
}

impl Parameterized for Dense {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Param)) {
        self.visit("dense", f)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.visit_mut("dense", f)
    }
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

/// Gradient through ReLU given the pre-activation.
pub fn relu_backward(pre: &[f64], dy: &[f64]) -> Vec<f64> {
    pre.iter()
        .zip(dy)
        .map(|(p, d)| if *p > 0.0 { *d } else { 0.0 })
        .collect()
}

/// LSTM layer parameters. Gate blocks are stacked in the order
/// input, forget, candidate, output along the 4N axis.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayer {
    /// Input weights, 4N × D.
    pub w: Param,
    /// Recurrent weights, 4N × N.
    pub u: Param,
    /// Bias, 1 × 4N.
    pub b: Param,
}

/// Per-step activations kept for backpropagation.
#[derive(Clone, Debug, PartialEq)]
pub struct StepCache {
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub o: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub tanh_c: Vec<f64>,
}

/// Output of a masked sequence pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmTrace {
    /// Hidden states, one row per timestep.
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    /// `None` on masked steps (state copied through).
    pub caches: Vec<Option<StepCache>>,
}

impl LstmLayer {
    /// Glorot-uniform weights, zero biases except forget-gate bias 1.
    pub fn new<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut b = Param::zeros(1, 4 * hidden);
        for j in hidden..2 * hidden {
            b.value.set(0, j, 1.0);
        }
        Self {
            w: Param::new(Tensor2::glorot(4 * hidden, input, input, 4 * hidden, rng)),
            u: Param::new(Tensor2::glorot(4 * hidden, hidden, hidden, 4 * hidden, rng)),
            b,
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w: Param::zeros(4 * hidden, input),
            u: Param::zeros(4 * hidden, hidden),
            b: Param::zeros(1, 4 * hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.u.value.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.w.value.cols()
    }

    /// One LSTM step: i, f, o logistic; g tanh; c = f⊙c_prev + i⊙g; h = o⊙tanh(c).
    pub fn step(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> (Vec<f64>, Vec<f64>, StepCache) {
        let n = self.hidden();
        let mut z = self.b.value.data().to_vec();
        self.w.value.matvec_acc(x, &mut z);
        self.u.value.matvec_acc(h_prev, &mut z);
        let i: Vec<f64> = z[..n].iter().map(|v| sigmoid(*v)).collect();
        let f: Vec<f64> = z[n..2 * n].iter().map(|v| sigmoid(*v)).collect();
        let g: Vec<f64> = z[2 * n..3 * n].iter().map(|v| v.tanh()).collect();
        let o: Vec<f64> = z[3 * n..].iter().map(|v| sigmoid(*v)).collect();
        let c: Vec<f64> = (0..n).map(|k| f[k] * c_prev[k] + i[k] * g[k]).collect();
        let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
        let h: Vec<f64> = (0..n).map(|k| o[k] * tanh_c[k]).collect();
        let cache = StepCache {
            i,
            f,
            g,
            o,
            c_prev: c_prev.to_vec(),
            h_prev: h_prev.to_vec(),
            tanh_c,
        };
        (h, c, cache)
    }

    /// Backward of one step. Accumulates parameter gradients and returns
    /// (dx, dh_prev, dc_prev).
    pub fn step_backward(
        &mut self,
        x: &[f64],
        cache: &StepCache,
        dh: &[f64],
        dc_in: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.hidden();
        let mut dz = vec![0.0; 4 * n];
        let mut dc_prev = vec![0.0; n];
        for k in 0..n {
            let (i, f, g, o, tc) = (cache.i[k], cache.f[k], cache.g[k], cache.o[k], cache.tanh_c[k]);
            let d_o = dh[k] * tc;
            let dc = dc_in[k] + dh[k] * o * (1.0 - tc * tc);
            let di = dc * g;
            let dg = dc * i;
            let df = dc * cache.c_prev[k];
            dc_prev[k] = dc * f;
            dz[k] = di * i * (1.0 - i);
            dz[n + k] = df * f * (1.0 - f);
            dz[2 * n + k] = dg * (1.0 - g * g);
            dz[3 * n + k] = d_o * o * (1.0 - o);
        }
        self.w.grad.outer_acc(&dz, x);
        self.u.grad.outer_acc(&dz, &cache.h_prev);
        for (gb, d) in self.b.grad.data_mut().iter_mut().zip(&dz) {
            *gb += d;
        }
        let mut dx = vec![0.0; self.input_dim()];
        self.w.value.matvec_t_acc(&dz, &mut dx);
        let mut dh_prev = vec![0.0; n];
        self.u.value.matvec_t_acc(&dz, &mut dh_prev);
        (dx, dh_prev, dc_prev)
    }

    /// Runs the sequence from a zero state. Masked steps carry (h, c) through
    /// unchanged.
    pub fn forward_masked(&self, xs: &[Vec<f64>], mask: &[bool]) -> LstmTrace {
        let n = self.hidden();
        let mut h = vec![0.0; n];
        let mut c = vec![0.0; n];
        let mut trace = LstmTrace {
            h: Vec::with_capacity(xs.len()),
            c: Vec::with_capacity(xs.len()),
            caches: Vec::with_capacity(xs.len()),
        };
        for (x, &on) in xs.iter().zip(mask) {
            if on {
                let (nh, nc, cache) = self.step(x, &h, &c);
                h = nh;
                c = nc;
                trace.caches.push(Some(cache));
            } else {
                trace.caches.push(None);
            }
            trace.h.push(h.clone());
            trace.c.push(c.clone());
        }
        trace
    }

    /// Backpropagation through time given `∂L/∂h_t` for every step.
    /// Returns `∂L/∂x_t` (zero rows on masked steps).
    pub fn backward_masked(&mut self, xs: &[Vec<f64>], trace: &LstmTrace, dhs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = self.hidden();
        let d = self.input_dim();
        let t_len = xs.len();
        let mut dxs = vec![vec![0.0; d]; t_len];
        let mut dh_next = vec![0.0; n];
        let mut dc_next = vec![0.0; n];
        for t in (0..t_len).rev() {
            let dh: Vec<f64> = dhs[t].iter().zip(&dh_next).map(|(a, b)| a + b).collect();
            match &trace.caches[t] {
                Some(cache) => {
                    let (dx, dh_prev, dc_prev) = self.step_backward(&xs[t], cache, &dh, &dc_next);
                    dxs[t] = dx;
                    dh_next = dh_prev;
                    dc_next = dc_prev;
                }
                None => dh_next = dh,
            }
        }
        dxs
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&format!("{prefix}.w"), &self.w);
        f(&format!("{prefix}.u"), &self.u);
        f(&format!("{prefix}.b"), &self.b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&format!("{prefix}.w"), &mut self.w);
        f(&format!("{prefix}.u"), &mut self.u);
        f(&format!("{prefix}.b"), &mut self.b);
    }
}

impl Parameterized for LstmLayer {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Param)) {
        self.visit("lstm", f)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.visit_mut("lstm", f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::gradcheck::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    fn random_seq(t: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        (0..t)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn zero_weights_fixed_point() {
        let l = LstmLayer::zeros(3, 2);
        let (h, c, cache) = l.step(&[0.3, -1.0, 2.0], &[0.0; 2], &[0.0; 2]);
        assert_eq!(cache.i, vec![0.5; 2]);
        assert_eq!(cache.f, vec![0.5; 2]);
        assert_eq!(cache.o, vec![0.5; 2]);
        assert_eq!(cache.g, vec![0.0; 2]);
        assert_eq!((h, c), (vec![0.0; 2], vec![0.0; 2]));
    }

    #[test]
    fn zero_weights_halve_cell() {
        let l = LstmLayer::zeros(2, 3);
        let v = [0.8, -2.0, 4.0];
        let (h, c, _) = l.step(&[1.0, 1.0], &[0.1, 0.2, 0.3], &v);
        for k in 0..3 {
            assert!((c[k] - 0.5 * v[k]).abs() < 1e-15);
            assert!((h[k] - 0.5 * (0.5 * v[k]).tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn forget_bias_initialized_to_one() {
        let l = LstmLayer::new(4, 3, &mut rng());
        assert_eq!(l.b.value.data(), &[0., 0., 0., 1., 1., 1., 0., 0., 0., 0., 0., 0.]);
    }

    #[test]
    fn all_masked_gives_zero_states() {
        let mut r = rng();
        let l = LstmLayer::new(3, 4, &mut r);
        let xs = random_seq(5, 3, &mut r);
        let tr = l.forward_masked(&xs, &[false; 5]);
        assert!(tr.h.iter().all(|h| h.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn masked_step_copies_state() {
        let mut r = rng();
        let l = LstmLayer::new(3, 4, &mut r);
        let xs = random_seq(3, 3, &mut r);
        let tr = l.forward_masked(&xs, &[true, false, true]);
        assert_eq!(tr.h[1], tr.h[0]);
        assert_eq!(tr.c[1], tr.c[0]);
        assert_ne!(tr.h[2], tr.h[1]);
    }

    /// Sum of hidden states weighted by a fixed probe; loss for grad checks.
    fn probe_loss(h: &[Vec<f64>], probe: &[Vec<f64>]) -> f64 {
        h.iter()
            .zip(probe)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
            .sum()
    }

    #[test]
    fn bptt_matches_finite_differences() {
        let mut r = rng();
        let mut l = LstmLayer::new(3, 4, &mut r);
        let xs = random_seq(3, 3, &mut r);
        let probe = random_seq(3, 4, &mut r);
        let mask = [true; 3];
        let report = grad_check(
            &mut l,
            |m: &mut LstmLayer| {
                let tr = m.forward_masked(&xs, &mask);
                m.backward_masked(&xs, &tr, &probe);
                probe_loss(&tr.h, &probe)
            },
            |m: &LstmLayer| probe_loss(&m.forward_masked(&xs, &mask).h, &probe),
            1e-5,
        );
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut r = rng();
        let mut l = LstmLayer::new(3, 4, &mut r);
        let xs = random_seq(4, 3, &mut r);
        let probe = random_seq(4, 4, &mut r);
        let mask = [true, false, true, true];
        let tr = l.forward_masked(&xs, &mask);
        let dxs = l.backward_masked(&xs, &tr, &probe);
        let h = 1e-5;
        for t in 0..4 {
            for k in 0..3 {
                let mut xp = xs.clone();
                xp[t][k] += h;
                let mut xm = xs.clone();
                xm[t][k] -= h;
                let num = (probe_loss(&l.forward_masked(&xp, &mask).h, &probe)
                    - probe_loss(&l.forward_masked(&xm, &mask).h, &probe))
                    / (2.0 * h);
                assert!((num - dxs[t][k]).abs() < 1e-8, "t={t} k={k}");
            }
        }
    }

    #[test]
    fn masked_gap_gradient_equals_compressed_run() {
        let mut r = rng();
        let base = LstmLayer::new(2, 3, &mut r);
        let xs = random_seq(3, 2, &mut r);
        // loss reads the final hidden state only
        let probe_last = random_seq(1, 3, &mut r).remove(0);

        let mut gapped = base.clone();
        let mask = [true, false, true];
        let tr = gapped.forward_masked(&xs, &mask);
        let mut dhs = vec![vec![0.0; 3]; 3];
        dhs[2] = probe_last.clone();
        gapped.backward_masked(&xs, &tr, &dhs);

        let mut compressed = base.clone();
        let xs_c = vec![xs[0].clone(), xs[2].clone()];
        let tr_c = compressed.forward_masked(&xs_c, &[true, true]);
        let mut dhs_c = vec![vec![0.0; 3]; 2];
        dhs_c[1] = probe_last;
        compressed.backward_masked(&xs_c, &tr_c, &dhs_c);

        assert_eq!(tr.h[2], tr_c.h[1]);
        for (a, b) in [
            (&gapped.w.grad, &compressed.w.grad),
            (&gapped.u.grad, &compressed.u.grad),
            (&gapped.b.grad, &compressed.b.grad),
        ] {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        let mut r = rng();
        let mut layer = Dense::new(3, 2, &mut r);
        let x = [0.3, -0.7, 1.1];
        let probe = [0.9, -0.4];
        let loss = |m: &Dense| {
            let y = m.forward(&x).unwrap();
            y.iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>() + 0.5 * y[0] * y[0]
        };
        let report = grad_check(
            &mut layer,
            |m: &mut Dense| {
                let y = m.forward(&x).unwrap();
                let dy = [probe[0] + y[0], probe[1]];
                m.backward(&x, &dy).unwrap();
                loss(m)
            },
            loss,
            1e-6,
        );
        assert!(report.passed, "{report:?}");
    }

    proptest! {
        #[test]
        fn cell_growth_is_bounded(seed in 0u64..500, scale in 0.1f64..5.0) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let mut l = LstmLayer::new(3, 4, &mut r);
            l.w.value.scale(scale);
            l.u.value.scale(scale);
            let x: Vec<f64> = (0..3).map(|_| r.random_range(-3.0..3.0)).collect();
            let h: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
            let c_prev: Vec<f64> = (0..4).map(|_| r.random_range(-5.0..5.0)).collect();
            let (_, c, _) = l.step(&x, &h, &c_prev);
            for k in 0..4 {
                prop_assert!(c[k].abs() <= c_prev[k].abs() + 1.0 + 1e-12);
            }
        }
    }
}
