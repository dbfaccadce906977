//! Selective scan over a diagonal state with input-dependent `Δ`, `B`, `C`.
//!
//! For each channel `e` and state index `n`:
//!
//! ```text
//! δ_t      = softplus(dt_t + dt_bias)
//! a        = -exp(a_log)
//! h_t      = exp(δ_t a) h_{t-1} + g(δ_t, a) B_t u_t,   g = (e^{δa} - 1) / a
//! y_t      = Σ_n C_t h_t + D u_t
//! ```
//!
//! The backward pass is the adjoint recurrence
//! `λ_t = dy_t C_t + Ā_{t+1} λ_{t+1}` run from the end, recomputing states
//! from checkpoints stored every [`CHUNK`] steps.

use rayon::prelude::*;

use super::{Direction, Result, SsmError};
use crate::tensor::{fastmath, ops, CustomOp, Tensor, TensorError};

/// Steps between stored states, and the chunk length of the parallel scan.
pub const CHUNK: usize = 64;

const SERIES_CUTOFF: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanDims {
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

/// One sequence's worth of scan inputs, all row-major.
#[derive(Debug, Clone, Copy)]
pub struct ScanArgs<'a> {
    /// `[L, E]`
    pub u: &'a [f64],
    /// `[L, E]`, before the bias and softplus
    pub dt: &'a [f64],
    /// `[E]`
    pub dt_bias: &'a [f64],
    /// `[E, N]`
    pub a_log: &'a [f64],
    /// `[L, N]`
    pub b: &'a [f64],
    /// `[L, N]`
    pub c: &'a [f64],
    /// `[E]`
    pub d: &'a [f64],
    pub dims: ScanDims,
    pub reverse: bool,
}

/// Gradients of a scan with respect to every input of [`ScanArgs`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScanGrads {
    pub u: Vec<f64>,
    pub dt: Vec<f64>,
    pub dt_bias: Vec<f64>,
    pub a_log: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
}

impl ScanArgs<'_> {
    fn validate(&self) -> Result<()> {
        let ScanDims {
            len,
            channels: e,
            state: n,
        } = self.dims;
        let checks = [
            ("u", self.u.len(), len * e),
            ("dt", self.dt.len(), len * e),
            ("dt_bias", self.dt_bias.len(), e),
            ("a_log", self.a_log.len(), e * n),
            ("B", self.b.len(), len * n),
            ("C", self.c.len(), len * n),
            ("D", self.d.len(), e),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(SsmError::Shape(format!(
                    "scan input {name} has {got} values, expected {want}"
                )));
            }
        }
        if n == 0 {
            return Err(SsmError::Shape("state size must be at least 1".into()));
        }
        Ok(())
    }

    fn time(&self, step: usize) -> usize {
        if self.reverse {
            self.dims.len - 1 - step
        } else {
            step
        }
    }

    fn neg_a(&self) -> Vec<f64> {
        self.a_log.iter().map(|&v| -v.exp()).collect()
    }

    /// `softplus(dt + dt_bias)` for every channel of row `t`, in one pass so
    /// the loop vectorizes.
    fn delta_row(&self, t: usize, out: &mut [f64]) {
        let ne = self.dims.channels;
        let dt = &self.dt[t * ne..(t + 1) * ne];
        for ((o, &x), &b) in out.iter_mut().zip(dt).zip(self.dt_bias.iter()) {
            *o = fastmath::softplus(x + b);
        }
    }
}

/// `(Ā, g)` with `g = (Ā - 1)/a`, by series near `δa = 0`.
#[inline(always)]
fn discretize(delta: f64, a: f64) -> (f64, f64) {
    let x = delta * a;
    let abar = fastmath::exp(x);
    let series = delta * (1.0 + x * (0.5 + x * (1.0 / 6.0 + x * (1.0 / 24.0 + x / 120.0))));
    let exact = (abar - 1.0) / a;
    (
        abar,
        if x.abs() < SERIES_CUTOFF {
            series
        } else {
            exact
        },
    )
}

/// `∂g/∂a` given the already computed `Ā` and `g`.
#[inline(always)]
fn dg_da(delta: f64, a: f64, abar: f64, g: f64) -> f64 {
    let x = delta * a;
    let series =
        delta * delta * (0.5 + x * (1.0 / 3.0 + x * (1.0 / 8.0 + x * (1.0 / 30.0 + x / 144.0))));
    let exact = (delta * abar - g) / a;
    if x.abs() < SERIES_CUTOFF {
        series
    } else {
        exact
    }
}

#[inline(always)]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        s += x * y;
    }
    s
}

#[inline(always)]
fn update_fixed<const N: usize>(delta: f64, ue: f64, a: &[f64; N], b: &[f64; N], h: &mut [f64; N]) {
    for n in 0..N {
        let (abar, g) = discretize(delta, a[n]);
        h[n] = abar * h[n] + g * b[n] * ue;
    }
}

/// `h <- Ā h + g·B·u` over the state dimension. Common state sizes get a
/// fixed-length loop the compiler can fully vectorize.
#[inline(always)]
fn update_state(delta: f64, ue: f64, a: &[f64], b: &[f64], h: &mut [f64]) {
    macro_rules! fixed {
        ($n:literal) => {
            if let (Ok(a), Ok(b), Ok(h)) = (
                <&[f64; $n]>::try_from(a),
                <&[f64; $n]>::try_from(b),
                <&mut [f64; $n]>::try_from(&mut *h),
            ) {
                return update_fixed::<$n>(delta, ue, a, b, h);
            }
        };
    }
    fixed!(16);
    fixed!(8);
    for n in 0..h.len() {
        let (abar, g) = discretize(delta, a[n]);
        h[n] = abar * h[n] + g * b[n] * ue;
    }
}

/// One recurrence step for every channel; writes the row `y_t` when given.
#[inline(always)]
fn step(
    args: &ScanArgs<'_>,
    neg_a: &[f64],
    t: usize,
    h: &mut [f64],
    y: Option<&mut [f64]>,
    drow: &mut [f64],
) {
    let ScanDims {
        channels: ne,
        state: ns,
        ..
    } = args.dims;
    let bt = &args.b[t * ns..(t + 1) * ns];
    let ct = &args.c[t * ns..(t + 1) * ns];
    let mut y = y;
    args.delta_row(t, drow);
    for e in 0..ne {
        let delta = drow[e];
        let ue = args.u[t * ne + e];
        let he = &mut h[e * ns..(e + 1) * ns];
        let ae = &neg_a[e * ns..(e + 1) * ns];
        update_state(delta, ue, ae, bt, he);
        if let Some(y) = y.as_deref_mut() {
            y[e] = dot(ct, he) + args.d[e] * ue;
        }
    }
}

fn check_row(row: &[f64], t: usize) -> Result<()> {
    if row.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite {
            op: "selective_scan",
            context: format!("timestep {t}"),
        }
        .into())
    }
}

/// Sequential forward scan. Returns `y` and the states saved before every
/// [`CHUNK`]-th step (in scan order).
pub fn scan_forward(args: &ScanArgs<'_>) -> Result<(Vec<f64>, Vec<f64>)> {
    args.validate()?;
    let ScanDims {
        len,
        channels: ne,
        state: ns,
    } = args.dims;
    let neg_a = args.neg_a();
    let mut h = vec![0.0; ne * ns];
    let mut y = vec![0.0; len * ne];
    let mut saved = Vec::with_capacity(len.div_ceil(CHUNK) * ne * ns);
    let mut drow = vec![0.0; ne];
    for s in 0..len {
        if s % CHUNK == 0 {
            saved.extend_from_slice(&h);
        }
        let t = args.time(s);
        let row = &mut y[t * ne..(t + 1) * ne];
        step(args, &neg_a, t, &mut h, Some(&mut *row), &mut drow);
        check_row(row, t)?;
    }
    Ok((y, saved))
}

/// Adjoint pass for [`scan_forward`].
pub fn scan_backward(args: &ScanArgs<'_>, saved: &[f64], dy: &[f64]) -> Result<ScanGrads> {
    args.validate()?;
    let ScanDims {
        len,
        channels: ne,
        state: ns,
    } = args.dims;
    let nchunks = len.div_ceil(CHUNK);
    if saved.len() != nchunks * ne * ns || dy.len() != len * ne {
        return Err(SsmError::Shape(
            "scan backward: saved states or dy mis-sized".into(),
        ));
    }
    let neg_a = args.neg_a();
    let mut gr = ScanGrads {
        u: vec![0.0; len * ne],
        dt: vec![0.0; len * ne],
        dt_bias: vec![0.0; ne],
        a_log: vec![0.0; ne * ns],
        b: vec![0.0; len * ns],
        c: vec![0.0; len * ns],
        d: vec![0.0; ne],
    };
    let en = ne * ns;
    let mut lambda = vec![0.0; en];
    let mut abar = vec![0.0; CHUNK * en];
    let mut gbuf = vec![0.0; CHUNK * en];
    let mut hbuf = vec![0.0; CHUNK * en];
    let mut deltas = vec![0.0; CHUNK * ne];
    for chunk in (0..nchunks).rev() {
        let s0 = chunk * CHUNK;
        let s1 = (s0 + CHUNK).min(len);
        let h0 = &saved[chunk * en..(chunk + 1) * en];
        // recompute the chunk's states and discretized coefficients
        let mut h = h0.to_vec();
        for s in s0..s1 {
            let t = args.time(s);
            let k = s - s0;
            let bt = &args.b[t * ns..(t + 1) * ns];
            args.delta_row(t, &mut deltas[k * ne..(k + 1) * ne]);
            for e in 0..ne {
                let delta = deltas[k * ne + e];
                let ue = args.u[t * ne + e];
                let o = k * en + e * ns;
                let ae = &neg_a[e * ns..(e + 1) * ns];
                let he = &mut h[e * ns..(e + 1) * ns];
                for n in 0..ns {
                    let (ab, g) = discretize(delta, ae[n]);
                    abar[o + n] = ab;
                    gbuf[o + n] = g;
                    he[n] = ab * he[n] + g * bt[n] * ue;
                }
                hbuf[o..o + ns].copy_from_slice(he);
            }
        }
        for s in (s0..s1).rev() {
            let t = args.time(s);
            let k = s - s0;
            let bt = &args.b[t * ns..(t + 1) * ns];
            let ct = &args.c[t * ns..(t + 1) * ns];
            for e in 0..ne {
                let dye = dy[t * ne + e];
                let ue = args.u[t * ne + e];
                let delta = deltas[k * ne + e];
                let o = k * en + e * ns;
                let hprev = if k > 0 {
                    &hbuf[o - en..o - en + ns]
                } else {
                    &h0[e * ns..(e + 1) * ns]
                };
                let hcur = &hbuf[o..o + ns];
                let ab = &abar[o..o + ns];
                let g = &gbuf[o..o + ns];
                let ae = &neg_a[e * ns..(e + 1) * ns];
                let lam = &mut lambda[e * ns..(e + 1) * ns];
                let dc = &mut gr.c[t * ns..(t + 1) * ns];
                let db = &mut gr.b[t * ns..(t + 1) * ns];
                let da = &mut gr.a_log[e * ns..(e + 1) * ns];
                let mut du = args.d[e] * dye;
                let mut ddelta = 0.0;
                for n in 0..ns {
                    let l = lam[n] + dye * ct[n];
                    dc[n] += dye * hcur[n];
                    let dab = l * hprev[n];
                    let dg = l * bt[n] * ue;
                    du += l * g[n] * bt[n];
                    db[n] += l * g[n] * ue;
                    ddelta += dab * ae[n] * ab[n] + dg * ab[n];
                    // accumulate dL/da here, chain to a_log at the end
                    da[n] += dab * delta * ab[n] + dg * dg_da(delta, ae[n], ab[n], g[n]);
                    // flush subnormals: the adjoint decays geometrically
                    // away from the rows that receive gradient
                    let next = ab[n] * l;
                    lam[n] = if next.abs() < f64::MIN_POSITIVE { 0.0 } else { next };
                }
                gr.d[e] += dye * ue;
                gr.u[t * ne + e] = du;
                let z = args.dt[t * ne + e] + args.dt_bias[e];
                let dz = ddelta * fastmath::sigmoid(z);
                gr.dt[t * ne + e] = dz;
                gr.dt_bias[e] += dz;
            }
        }
    }
    for (g, a) in gr.a_log.iter_mut().zip(&neg_a) {
        *g *= a;
    }
    Ok(gr)
}

/// Affine-map composition `(a2, b2) ∘ (a1, b1) = (a2 a1, a2 b1 + b2)`:
/// apply the first map, then the second.
pub fn compose(second: (f64, f64), first: (f64, f64)) -> (f64, f64) {
    (second.0 * first.0, second.0 * first.1 + second.1)
}

/// Chunked parallel scan: reduce each chunk to one affine map per state,
/// carry sequentially across chunks, then replay each chunk from its carry.
pub fn selective_scan_parallel_raw(args: &ScanArgs<'_>, chunk: usize) -> Result<Vec<f64>> {
    args.validate()?;
    if chunk == 0 {
        return Err(SsmError::Shape("chunk size must be at least 1".into()));
    }
    let ScanDims {
        len,
        channels: ne,
        state: ns,
    } = args.dims;
    let en = ne * ns;
    let neg_a = args.neg_a();
    let nchunks = len.div_ceil(chunk);
    let maps: Vec<(Vec<f64>, Vec<f64>)> = (0..nchunks)
        .into_par_iter()
        .map(|c| {
            let mut p = vec![1.0; en];
            let mut q = vec![0.0; en];
            let mut drow = vec![0.0; ne];
            for s in c * chunk..((c + 1) * chunk).min(len) {
                let t = args.time(s);
                let bt = &args.b[t * ns..(t + 1) * ns];
                args.delta_row(t, &mut drow);
                for e in 0..ne {
                    let delta = drow[e];
                    let ue = args.u[t * ne + e];
                    for n in 0..ns {
                        let (ab, g) = discretize(delta, neg_a[e * ns + n]);
                        let (pa, qb) =
                            compose((ab, g * bt[n] * ue), (p[e * ns + n], q[e * ns + n]));
                        p[e * ns + n] = pa;
                        q[e * ns + n] = qb;
                    }
                }
            }
            (p, q)
        })
        .collect();
    let mut carries = Vec::with_capacity(nchunks);
    let mut h = vec![0.0; en];
    for (p, q) in &maps {
        carries.push(h.clone());
        for i in 0..en {
            h[i] = p[i] * h[i] + q[i];
        }
    }
    let pieces: Vec<Result<Vec<(usize, Vec<f64>)>>> = carries
        .into_par_iter()
        .enumerate()
        .map(|(c, mut h)| {
            let mut rows = Vec::new();
            let mut drow = vec![0.0; ne];
            for s in c * chunk..((c + 1) * chunk).min(len) {
                let t = args.time(s);
                let mut row = vec![0.0; ne];
                step(args, &neg_a, t, &mut h, Some(&mut row), &mut drow);
                check_row(&row, t)?;
                rows.push((t, row));
            }
            Ok(rows)
        })
        .collect();
    let mut y = vec![0.0; len * ne];
    for piece in pieces {
        for (t, row) in piece? {
            y[t * ne..(t + 1) * ne].copy_from_slice(&row);
        }
    }
    Ok(y)
}

/// Tape primitive for a batched scan over inputs
/// `[u, dt, dt_bias, a_log, B, C, D]` with shapes
/// `[.., L, E]`, `[.., L, E]`, `[E]`, `[E, N]`, `[.., L, N]`, `[.., L, N]`, `[E]`.
pub struct SelectiveScanOp {
    dims: ScanDims,
    batch: usize,
    reverse: bool,
    saved: Vec<Vec<f64>>,
}

fn batch_dims(u: &Tensor, a_log: &Tensor) -> Result<(usize, ScanDims)> {
    if u.ndim() < 2 || a_log.ndim() != 2 {
        return Err(SsmError::Shape(format!(
            "scan expects u [.., L, E] and a_log [E, N], got {:?} and {:?}",
            u.shape(),
            a_log.shape()
        )));
    }
    let s = u.shape();
    let (len, ne) = (s[s.len() - 2], s[s.len() - 1]);
    let dims = ScanDims {
        len,
        channels: ne,
        state: a_log.shape()[1],
    };
    Ok((u.numel() / (len * ne).max(1), dims))
}

fn slice_args<'a>(ins: &[&'a Tensor], dims: ScanDims, i: usize, reverse: bool) -> ScanArgs<'a> {
    let le = dims.len * dims.channels;
    let ln = dims.len * dims.state;
    ScanArgs {
        u: &ins[0].data()[i * le..(i + 1) * le],
        dt: &ins[1].data()[i * le..(i + 1) * le],
        dt_bias: ins[2].data(),
        a_log: ins[3].data(),
        b: &ins[4].data()[i * ln..(i + 1) * ln],
        c: &ins[5].data()[i * ln..(i + 1) * ln],
        d: ins[6].data(),
        dims,
        reverse,
    }
}

fn check_batched(ins: &[&Tensor], batch: usize, dims: ScanDims) -> Result<()> {
    let want = [
        batch * dims.len * dims.channels,
        batch * dims.len * dims.channels,
        dims.channels,
        dims.channels * dims.state,
        batch * dims.len * dims.state,
        batch * dims.len * dims.state,
        dims.channels,
    ];
    for (k, (t, w)) in ins.iter().zip(want).enumerate() {
        if t.numel() != w {
            return Err(SsmError::Shape(format!(
                "scan input {k} has shape {:?} ({} values), expected {w}",
                t.shape(),
                t.numel()
            )));
        }
    }
    Ok(())
}

/// Run a batched scan, returning the output and the op that differentiates it.
pub fn selective_scan(
    ins: &[&Tensor; 7],
    direction: Direction,
) -> Result<(Tensor, SelectiveScanOp)> {
    let (batch, dims) = batch_dims(ins[0], ins[3])?;
    check_batched(ins, batch, dims)?;
    let reverse = direction.is_reverse();
    let mut y = Vec::with_capacity(ins[0].numel());
    let mut saved = Vec::with_capacity(batch);
    for i in 0..batch {
        let (yi, si) = scan_forward(&slice_args(ins, dims, i, reverse))?;
        y.extend(yi);
        saved.push(si);
    }
    let out = Tensor::new(ins[0].shape().to_vec(), y)?;
    Ok((
        out,
        SelectiveScanOp {
            dims,
            batch,
            reverse,
            saved,
        },
    ))
}

impl CustomOp for SelectiveScanOp {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
    ) -> crate::tensor::Result<Vec<Option<Tensor>>> {
        let to_tensor_err = |e: SsmError| match e {
            SsmError::Tensor(t) => t,
            other => TensorError::Invalid {
                op: "selective_scan",
                msg: other.to_string(),
            },
        };
        let le = self.dims.len * self.dims.channels;
        let mut acc: Option<ScanGrads> = None;
        let mut u = Vec::with_capacity(self.batch * le);
        let mut dt = Vec::with_capacity(self.batch * le);
        let mut b = Vec::new();
        let mut c = Vec::new();
        for i in 0..self.batch {
            let args = slice_args(inputs, self.dims, i, self.reverse);
            let g = scan_backward(&args, &self.saved[i], &grad.data()[i * le..(i + 1) * le])
                .map_err(to_tensor_err)?;
            u.extend_from_slice(&g.u);
            dt.extend_from_slice(&g.dt);
            b.extend_from_slice(&g.b);
            c.extend_from_slice(&g.c);
            match &mut acc {
                None => acc = Some(g),
                Some(a) => {
                    for (x, y) in [
                        (&mut a.dt_bias, &g.dt_bias),
                        (&mut a.a_log, &g.a_log),
                        (&mut a.d, &g.d),
                    ] {
                        for (p, q) in x.iter_mut().zip(y) {
                            *p += q;
                        }
                    }
                }
            }
        }
        let acc = acc.ok_or_else(|| TensorError::invalid("selective_scan", "empty batch"))?;
        let shaped = |k: usize, data: Vec<f64>| Tensor::new(inputs[k].shape().to_vec(), data);
        Ok(vec![
            Some(shaped(0, u)?),
            Some(shaped(1, dt)?),
            Some(shaped(2, acc.dt_bias)?),
            Some(shaped(3, acc.a_log)?),
            Some(shaped(4, b)?),
            Some(shaped(5, c)?),
            Some(shaped(6, acc.d)?),
        ])
    }
}

/// Parameters of a standalone selective SSM whose `Δ`, `B`, `C` are linear
/// functions of its input.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams {
    pub state_dim: usize,
    pub dt_rank: usize,
    /// `[E, N]`; the state matrix is `-exp(a_log)`
    pub a_log: Tensor,
    /// `[E, R]`
    pub x_proj_dt: Tensor,
    /// `[E, N]`
    pub x_proj_b: Tensor,
    /// `[E, N]`
    pub x_proj_c: Tensor,
    /// `[R, E]`
    pub dt_proj: Tensor,
    /// `[E]`
    pub dt_bias: Tensor,
    /// `[E]`
    pub d_skip: Tensor,
}

impl SsmParams {
    fn project(&self, u: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let low = ops::matmul(u, &self.x_proj_dt)?;
        let dt = ops::matmul(&low, &self.dt_proj)?;
        let b = ops::matmul(u, &self.x_proj_b)?;
        let c = ops::matmul(u, &self.x_proj_c)?;
        Ok((dt, b, c))
    }
}

/// Scan `u: [B, L, E]` one step at a time.
pub fn selective_scan_sequential(
    u: &Tensor,
    p: &SsmParams,
    direction: Direction,
) -> Result<Tensor> {
    let (dt, b, c) = p.project(u)?;
    let ins = [u, &dt, &p.dt_bias, &p.a_log, &b, &c, &p.d_skip];
    Ok(selective_scan(&ins, direction)?.0)
}

/// Same contract as [`selective_scan_sequential`], computed by the chunked
/// parallel scan.
pub fn selective_scan_parallel(
    u: &Tensor,
    p: &SsmParams,
    direction: Direction,
    chunk: usize,
) -> Result<Tensor> {
    let (dt, b, c) = p.project(u)?;
    let ins = [u, &dt, &p.dt_bias, &p.a_log, &b, &c, &p.d_skip];
    let (batch, dims) = batch_dims(u, &p.a_log)?;
    check_batched(&ins, batch, dims)?;
    let mut y = Vec::with_capacity(u.numel());
    for i in 0..batch {
        y.extend(selective_scan_parallel_raw(
            &slice_args(&ins, dims, i, direction.is_reverse()),
            chunk,
        )?);
    }
    Ok(Tensor::new(u.shape().to_vec(), y)?)
}
