use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sphere_ssm::ssm::{
    lti_kernel, lti_kernel_apply, scan_forward, selective_scan_parallel_raw, zoh_discretize,
    ScanArgs, ScanDims,
};
use sphere_ssm::tensor::Tensor;

struct Owned {
    u: Vec<f64>,
    dt: Vec<f64>,
    bias: Vec<f64>,
    a_log: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    d: Vec<f64>,
    dims: ScanDims,
}

impl Owned {
    fn random(len: usize, e: usize, n: usize, seed: u64) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut v = |k: usize, lo: f64, hi: f64| -> Vec<f64> {
            (0..k).map(|_| r.gen_range(lo..hi)).collect()
        };
        Owned {
            u: v(len * e, -1.0, 1.0),
            dt: v(len * e, -4.0, 1.0),
            bias: v(e, -1.0, 0.5),
            a_log: v(e * n, -1.0, 2.0),
            b: v(len * n, -1.0, 1.0),
            c: v(len * n, -1.0, 1.0),
            d: v(e, -1.0, 1.0),
            dims: ScanDims {
                len,
                channels: e,
                state: n,
            },
        }
    }

    fn args(&self, reverse: bool) -> ScanArgs<'_> {
        ScanArgs {
            u: &self.u,
            dt: &self.dt,
            dt_bias: &self.bias,
            a_log: &self.a_log,
            b: &self.b,
            c: &self.c,
            d: &self.d,
            dims: self.dims,
            reverse,
        }
    }

    /// Freeze Δ, B and C across time.
    fn freeze(&mut self) {
        let (l, n) = (self.dims.len, self.dims.state);
        self.dt.iter_mut().for_each(|v| *v = 0.0);
        for t in 1..l {
            for k in 0..n {
                self.b[t * n + k] = self.b[k];
                self.c[t * n + k] = self.c[k];
            }
        }
    }
}

fn softplus(x: f64) -> f64 {
    x.exp().ln_1p()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn parallel_equals_sequential(
        len in 1usize..600,
        e in 1usize..12,
        n in 1usize..17,
        chunk in 1usize..130,
        reverse in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let o = Owned::random(len, e, n, seed);
        let (ys, _) = scan_forward(&o.args(reverse)).unwrap();
        let yp = selective_scan_parallel_raw(&o.args(reverse), chunk).unwrap();
        prop_assert!(max_diff(&ys, &yp) < 1e-10);
    }

    #[test]
    fn frozen_scan_is_a_convolution(
        len in 1usize..300,
        e in 1usize..5,
        n in 1usize..9,
        seed in any::<u64>(),
    ) {
        let mut o = Owned::random(len, e, n, seed);
        o.freeze();
        let (y, _) = scan_forward(&o.args(false)).unwrap();
        for ch in 0..e {
            let delta = softplus(o.bias[ch]);
            let a: Vec<f64> = (0..n).map(|k| -o.a_log[ch * n + k].exp()).collect();
            let (abar, bbar) = zoh_discretize(&a, &o.b[..n], delta).unwrap();
            let kernel = lti_kernel(&abar, &bbar, &o.c[..n], len).unwrap();
            let u: Vec<f64> = (0..len).map(|t| o.u[t * e + ch]).collect();
            let conv = lti_kernel_apply(&Tensor::from_slice(&u), &kernel).unwrap();
            for t in 0..len {
                let want = conv.data()[t] + o.d[ch] * u[t];
                prop_assert!((y[t * e + ch] - want).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn lti_state_stays_bounded(
        abar in proptest::collection::vec(0.0f64..0.99, 1..6),
        seed in any::<u64>(),
    ) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = abar.len();
        let bbar: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let u: Vec<f64> = (0..400).map(|_| r.gen_range(-1.0..1.0)).collect();
        let amax = abar.iter().cloned().fold(0.0, f64::max);
        let drive = bbar.iter().map(|b| b.abs()).fold(0.0, f64::max);
        let bound = drive / (1.0 - amax);
        let mut h = vec![0.0; n];
        for &ut in &u {
            for k in 0..n {
                h[k] = abar[k] * h[k] + bbar[k] * ut;
                prop_assert!(h[k].abs() <= bound * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn zoh_small_step_limit(a in proptest::collection::vec(-5.0f64..-0.01, 1..8)) {
        let b: Vec<f64> = a.iter().map(|x| 1.0 + x.abs()).collect();
        let mut prev = f64::INFINITY;
        for delta in [1e-2, 1e-3, 1e-4] {
            let (abar, bbar) = zoh_discretize(&a, &b, delta).unwrap();
            let err = bbar
                .iter()
                .zip(&b)
                .map(|(bb, b)| (bb / delta - b).abs())
                .fold(0.0, f64::max);
            let amax = a.iter().map(|x| x.abs()).fold(0.0, f64::max);
            let bmax = b.iter().cloned().fold(0.0, f64::max);
            // first-order term is Δa/2 of B
            prop_assert!(err <= delta * amax * bmax);
            prop_assert!(abar.iter().all(|&x| x < 1.0 && x > 1.0 - delta * amax * 1.0001));
            prop_assert!(err < prev);
            prev = err;
        }
    }
}

#[test]
fn long_sequence_parallel_equals_sequential() {
    for (seed, reverse) in [(11u64, false), (12, true)] {
        let o = Owned::random(4096, 8, 16, seed);
        let (ys, _) = scan_forward(&o.args(reverse)).unwrap();
        let yp = selective_scan_parallel_raw(&o.args(reverse), 64).unwrap();
        assert!(max_diff(&ys, &yp) < 1e-10);
    }
}
