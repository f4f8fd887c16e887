//! Grouped 3D convolution.
//!
//! Forward, weight-gradient and input-gradient passes are all expressed as
//! GEMMs over gathered column buffers. Work is split into slabs along the
//! first spatial axis; each slab is gathered independently, so slabs run in
//! parallel and per-slab weight-gradient partials are reduced in slab order,
//! which keeps results independent of the thread count.

use rayon::prelude::*;

use super::graph::{Op, Var};
use super::{gemm, Graph, MatRef, Real, Tensor};
use crate::error::{Error, Result};

/// Column-buffer budget per slab, in elements.
const SLAB_BUDGET: usize = 1 << 19;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self { stride: [stride; 3], padding: [padding; 3], groups }
    }

    /// Stride 1, padding `k / 2`.
    pub fn same(kernel: usize) -> Self {
        Self::new(1, kernel / 2, 1)
    }
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self::new(1, 0, 1)
    }
}

/// `floor((input + 2 * pad - kernel) / stride) + 1`, or `None` when the
/// kernel does not fit in the padded input.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if kernel == 0 || stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    cin: usize,
    inp: [usize; 3],
    cout: usize,
    k: [usize; 3],
    out: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    groups: usize,
}

impl Geometry {
    fn new(xs: &[usize], ws: &[usize], spec: &ConvSpec) -> Result<Self> {
        if xs.len() != 5 || ws.len() != 5 {
            return Err(Error::shape("conv3d", format!("x {xs:?}, weight {ws:?} must be 5D")));
        }
        let g = spec.groups;
        if g == 0 || !xs[1].is_multiple_of(g) || !ws[0].is_multiple_of(g) {
            return Err(Error::config(format!(
                "conv3d groups {g} must divide input channels {} and output channels {}",
                xs[1], ws[0]
            )));
        }
        if ws[1] != xs[1] / g {
            return Err(Error::shape("conv3d", format!("weight {ws:?} for {} input channels / {g} groups", xs[1])));
        }
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = conv_output_extent(xs[2 + a], ws[2 + a], spec.stride[a], spec.padding[a])
                .ok_or_else(|| Error::shape("conv3d", format!("kernel {ws:?} larger than padded input {xs:?}")))?;
        }
        Ok(Self {
            n: xs[0],
            cin: xs[1],
            inp: [xs[2], xs[3], xs[4]],
            cout: ws[0],
            k: [ws[2], ws[3], ws[4]],
            out,
            stride: spec.stride,
            pad: spec.padding,
            groups: g,
        })
    }

    fn cig(&self) -> usize {
        self.cin / self.groups
    }
    fn cog(&self) -> usize {
        self.cout / self.groups
    }
    fn kvol(&self) -> usize {
        self.k.iter().product()
    }
    fn in_vol(&self) -> usize {
        self.inp.iter().product()
    }
    fn out_vol(&self) -> usize {
        self.out.iter().product()
    }

    /// `(n, first, last)` slabs over `rows` rows of `row_len` positions, each
    /// row costing `row_cost` column elements.
    fn slabs(&self, rows: usize, row_cost: usize) -> Vec<(usize, usize, usize)> {
        let per = (SLAB_BUDGET / row_cost.max(1)).clamp(1, rows);
        let mut v = Vec::new();
        for n in 0..self.n {
            let mut r = 0;
            while r < rows {
                v.push((n, r, (r + per).min(rows)));
                r += per;
            }
        }
        v
    }
}

/// Range of output indices `o` for which `o * s + off` lies in `[0, len)`.
fn valid_range(out_len: usize, s: usize, off: isize, len: usize) -> (usize, usize) {
    let lo = if off >= 0 { 0 } else { ((-off) as usize).div_ceil(s) };
    let hi_excl = if (len as isize) - off <= 0 { 0 } else { ((len as isize - off - 1) as usize) / s + 1 };
    let hi = hi_excl.min(out_len);
    (lo.min(hi), hi)
}

/// Gathers input patches for output rows `[r0, r1)` of one group into
/// `col[cig * kvol, (r1 - r0) * ow * od]`.
fn im2col<T: Real>(geo: &Geometry, xn: &[T], group: usize, r0: usize, r1: usize, col: &mut [T]) {
    let [h, w, d] = geo.inp;
    let [_, wo, dd] = geo.out;
    let [s0, s1, s2] = geo.stride;
    let [p0, p1, p2] = geo.pad;
    let [k0, k1, k2] = geo.k;
    let pc = (r1 - r0) * wo * dd;
    let plane = geo.in_vol();
    let mut row = 0;
    for ci in 0..geo.cig() {
        let src = &xn[(group * geo.cig() + ci) * plane..][..plane];
        for a in 0..k0 {
            for b in 0..k1 {
                let (ow_lo, ow_hi) = valid_range(wo, s1, b as isize - p1 as isize, w);
                for c in 0..k2 {
                    let off2 = c as isize - p2 as isize;
                    let (od_lo, od_hi) = valid_range(dd, s2, off2, d);
                    let dst = &mut col[row * pc..(row + 1) * pc];
                    for (ri, oh) in (r0..r1).enumerate() {
                        let ih = (oh * s0 + a) as isize - p0 as isize;
                        let rdst = &mut dst[ri * wo * dd..(ri + 1) * wo * dd];
                        if ih < 0 || ih >= h as isize {
                            rdst.fill(T::zero());
                            continue;
                        }
                        rdst[..ow_lo * dd].fill(T::zero());
                        rdst[ow_hi * dd..].fill(T::zero());
                        for ow in ow_lo..ow_hi {
                            let iw = ow * s1 + b - p1;
                            let line = &src[(ih as usize * w + iw) * d..][..d];
                            let o = &mut rdst[ow * dd..(ow + 1) * dd];
                            o[..od_lo].fill(T::zero());
                            o[od_hi..].fill(T::zero());
                            if s2 == 1 {
                                let start = (od_lo as isize + off2) as usize;
                                o[od_lo..od_hi].copy_from_slice(&line[start..start + (od_hi - od_lo)]);
                            } else {
                                for od in od_lo..od_hi {
                                    o[od] = line[(od as isize * s2 as isize + off2) as usize];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Gathers output gradients feeding input rows `[r0, r1)` of one group into
/// `col[cog * kvol, (r1 - r0) * w * d]`.
fn grad_col<T: Real>(geo: &Geometry, gn: &[T], group: usize, r0: usize, r1: usize, col: &mut [T]) {
    let [_, w, d] = geo.inp;
    let [ho, wo, dd] = geo.out;
    let [s0, s1, s2] = geo.stride;
    let [p0, p1, p2] = geo.pad;
    let [k0, k1, k2] = geo.k;
    let pc = (r1 - r0) * w * d;
    let plane = geo.out_vol();
    // Maps an input coordinate to the output coordinate reading it through
    // kernel tap `k`, if any.
    let tap = |i: usize, k: usize, p: usize, s: usize, lim: usize| -> Option<usize> {
        let num = i as isize + p as isize - k as isize;
        if num < 0 || num % s as isize != 0 {
            return None;
        }
        let o = (num / s as isize) as usize;
        (o < lim).then_some(o)
    };
    let mut row = 0;
    for co in 0..geo.cog() {
        let src = &gn[(group * geo.cog() + co) * plane..][..plane];
        for a in 0..k0 {
            for b in 0..k1 {
                for c in 0..k2 {
                    let dst = &mut col[row * pc..(row + 1) * pc];
                    for (ri, ih) in (r0..r1).enumerate() {
                        let rdst = &mut dst[ri * w * d..(ri + 1) * w * d];
                        let Some(oh) = tap(ih, a, p0, s0, ho) else {
                            rdst.fill(T::zero());
                            continue;
                        };
                        for iw in 0..w {
                            let o = &mut rdst[iw * d..(iw + 1) * d];
                            let Some(ow) = tap(iw, b, p1, s1, wo) else {
                                o.fill(T::zero());
                                continue;
                            };
                            let line = &src[(oh * wo + ow) * dd..][..dd];
                            if s2 == 1 {
                                // od = id + p2 - c must lie in [0, dd).
                                let shift = p2 as isize - c as isize;
                                let lo = (-shift).max(0) as usize;
                                let hi = ((dd as isize - shift).max(0) as usize).min(d).max(lo);
                                o[..lo].fill(T::zero());
                                o[hi..].fill(T::zero());
                                let start = (lo as isize + shift) as usize;
                                o[lo..hi].copy_from_slice(&line[start..start + (hi - lo)]);
                            } else {
                                for (id, v) in o.iter_mut().enumerate() {
                                    *v = match tap(id, c, p2, s2, dd) {
                                        Some(od) => line[od],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

impl<T: Real> Graph<T> {
    /// 3D convolution: `x[N, Cin, H, W, D]`, `weight[Cout, Cin/g, kh, kw, kd]`.
    pub fn conv3d(&mut self, x: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        self.check(x)?;
        self.check(weight)?;
        let geo = Geometry::new(self.shape(x), self.shape(weight), &spec)?;
        if let Some(b) = bias {
            self.check(b)?;
            if self.shape(b) != [geo.cout] {
                return Err(Error::shape("conv3d", format!("bias {:?} for {} outputs", self.shape(b), geo.cout)));
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(weight).data();
        let (cig, cog, kvol) = (geo.cig(), geo.cog(), geo.kvol());
        let kk = cig * kvol;
        let row_len = geo.out[1] * geo.out[2];
        let slabs = geo.slabs(geo.out[0], kk * row_len);
        let xin = geo.cin * geo.in_vol();
        let parts: Vec<Vec<T>> = slabs
            .par_iter()
            .map(|&(n, r0, r1)| {
                let pc = (r1 - r0) * row_len;
                let mut col = vec![T::zero(); kk * pc];
                let mut local = vec![T::zero(); geo.cout * pc];
                let xn = &xv[n * xin..(n + 1) * xin];
                for g in 0..geo.groups {
                    im2col(&geo, xn, g, r0, r1, &mut col);
                    gemm(
                        T::one(),
                        MatRef::rm(&wv[g * cog * kk..(g + 1) * cog * kk], cog, kk),
                        MatRef::rm(&col, kk, pc),
                        T::zero(),
                        &mut local[g * cog * pc..(g + 1) * cog * pc],
                        pc,
                    );
                }
                local
            })
            .collect();
        let pv = geo.out_vol();
        let mut out = vec![T::zero(); geo.n * geo.cout * pv];
        for (&(n, r0, r1), local) in slabs.iter().zip(&parts) {
            let pc = (r1 - r0) * row_len;
            for co in 0..geo.cout {
                let dst = (n * geo.cout + co) * pv + r0 * row_len;
                out[dst..dst + pc].copy_from_slice(&local[co * pc..(co + 1) * pc]);
            }
        }
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for (i, chunk) in out.chunks_mut(pv).enumerate() {
                let bias = bv[i % geo.cout];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        }
        let shape = vec![geo.n, geo.cout, geo.out[0], geo.out[1], geo.out[2]];
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.push("conv3d", Tensor { shape, data: out }, Op::Conv3d { x, w: weight, b: bias, spec }, &inputs)
    }
}

pub(crate) fn backward<T: Real>(
    g: &Graph<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    spec: &ConvSpec,
    _out: &Tensor<T>,
    gout: &[T],
) -> Vec<(Var, Vec<T>)> {
    let geo = Geometry::new(g.shape(x), g.shape(w), spec).expect("validated in forward");
    let xv = g.value(x).data();
    let wv = g.value(w).data();
    let (cig, cog, kvol) = (geo.cig(), geo.cog(), geo.kvol());
    let kk = cig * kvol;
    let pv = geo.out_vol();
    let xin = geo.cin * geo.in_vol();
    let gnl = geo.cout * pv;
    let mut r = Vec::new();

    if g.requires_grad(x) {
        // wt[g][ci][co * kvol + t] = w[g * cog + co][ci][t]
        let kt = cog * kvol;
        let mut wt = vec![T::zero(); geo.groups * cig * kt];
        for gi in 0..geo.groups {
            for co in 0..cog {
                for ci in 0..cig {
                    for t in 0..kvol {
                        wt[(gi * cig + ci) * kt + co * kvol + t] = wv[((gi * cog + co) * cig + ci) * kvol + t];
                    }
                }
            }
        }
        let row_len = geo.inp[1] * geo.inp[2];
        let slabs = geo.slabs(geo.inp[0], kt * row_len);
        let parts: Vec<Vec<T>> = slabs
            .par_iter()
            .map(|&(n, r0, r1)| {
                let pc = (r1 - r0) * row_len;
                let mut col = vec![T::zero(); kt * pc];
                let mut local = vec![T::zero(); geo.cin * pc];
                let gn = &gout[n * gnl..(n + 1) * gnl];
                for gi in 0..geo.groups {
                    grad_col(&geo, gn, gi, r0, r1, &mut col);
                    gemm(
                        T::one(),
                        MatRef::rm(&wt[gi * cig * kt..(gi + 1) * cig * kt], cig, kt),
                        MatRef::rm(&col, kt, pc),
                        T::zero(),
                        &mut local[gi * cig * pc..(gi + 1) * cig * pc],
                        pc,
                    );
                }
                local
            })
            .collect();
        let iv = geo.in_vol();
        let mut gx = vec![T::zero(); geo.n * xin];
        for (&(n, r0, r1), local) in slabs.iter().zip(&parts) {
            let pc = (r1 - r0) * row_len;
            for ci in 0..geo.cin {
                let dst = (n * geo.cin + ci) * iv + r0 * row_len;
                gx[dst..dst + pc].copy_from_slice(&local[ci * pc..(ci + 1) * pc]);
            }
        }
        r.push((x, gx));
    }

    if g.requires_grad(w) {
        let row_len = geo.out[1] * geo.out[2];
        let slabs = geo.slabs(geo.out[0], kk * row_len);
        let parts: Vec<Vec<T>> = slabs
            .par_iter()
            .map(|&(n, r0, r1)| {
                let pc = (r1 - r0) * row_len;
                let mut col = vec![T::zero(); kk * pc];
                let mut partial = vec![T::zero(); geo.cout * kk];
                let xn = &xv[n * xin..(n + 1) * xin];
                for gi in 0..geo.groups {
                    im2col(&geo, xn, gi, r0, r1, &mut col);
                    let go = &gout[n * gnl + gi * cog * pv + r0 * row_len..];
                    gemm(
                        T::one(),
                        MatRef::rm_stride(go, cog, pc, pv),
                        MatRef::rm(&col, kk, pc).t(),
                        T::zero(),
                        &mut partial[gi * cog * kk..(gi + 1) * cog * kk],
                        kk,
                    );
                }
                partial
            })
            .collect();
        let mut gw = vec![T::zero(); geo.cout * kk];
        for p in &parts {
            for (a, &v) in gw.iter_mut().zip(p) {
                *a += v;
            }
        }
        r.push((w, gw));
    }

    if let Some(b) = b.filter(|b| g.requires_grad(*b)) {
        let mut gb = vec![T::zero(); geo.cout];
        for (i, chunk) in gout.chunks(pv).enumerate() {
            gb[i % geo.cout] += chunk.iter().copied().sum::<T>();
        }
        r.push((b, gb));
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(x: Tensor<f64>, w: Tensor<f64>, spec: ConvSpec) -> Tensor<f64> {
        let mut g = Graph::new();
        let x = g.constant(x);
        let w = g.constant(w);
        let y = g.conv3d(x, w, None, spec).unwrap();
        g.value(y).clone()
    }

    /// Direct seven-loop reference.
    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, spec: ConvSpec) -> Tensor<f64> {
        let xs = x.shape();
        let ws = w.shape();
        let gr = spec.groups;
        let (cig, cog) = (xs[1] / gr, ws[0] / gr);
        let o: Vec<usize> = (0..3)
            .map(|a| conv_output_extent(xs[2 + a], ws[2 + a], spec.stride[a], spec.padding[a]).unwrap())
            .collect();
        Tensor::from_fn(&[xs[0], ws[0], o[0], o[1], o[2]], |flat| {
            let od = flat % o[2];
            let ow = (flat / o[2]) % o[1];
            let oh = (flat / (o[1] * o[2])) % o[0];
            let co = (flat / (o[0] * o[1] * o[2])) % ws[0];
            let n = flat / (ws[0] * o[0] * o[1] * o[2]);
            let gi = co / cog;
            let mut s = 0.0;
            for ci in 0..cig {
                for a in 0..ws[2] {
                    for b in 0..ws[3] {
                        for c in 0..ws[4] {
                            let ih = (oh * spec.stride[0] + a) as isize - spec.padding[0] as isize;
                            let iw = (ow * spec.stride[1] + b) as isize - spec.padding[1] as isize;
                            let id = (od * spec.stride[2] + c) as isize - spec.padding[2] as isize;
                            if ih < 0
                                || iw < 0
                                || id < 0
                                || ih >= xs[2] as isize
                                || iw >= xs[3] as isize
                                || id >= xs[4] as isize
                            {
                                continue;
                            }
                            s += x.get(&[n, gi * cig + ci, ih as usize, iw as usize, id as usize])
                                * w.get(&[co, ci, a, b, c]);
                        }
                    }
                }
            }
            s
        })
    }

    #[test]
    fn output_extent_formula() {
        assert_eq!(conv_output_extent(5, 3, 1, 1), Some(5));
        assert_eq!(conv_output_extent(8, 1, 2, 0), Some(4));
        assert_eq!(conv_output_extent(7, 1, 3, 0), Some(3));
        assert_eq!(conv_output_extent(2, 5, 1, 1), None);
    }

    #[test]
    fn same_padding_and_strided_shapes() {
        let y = run(Tensor::ones(&[1, 1, 5, 5, 5]), Tensor::ones(&[3, 1, 3, 3, 3]), ConvSpec::same(3));
        assert_eq!(y.shape(), &[1, 3, 5, 5, 5]);
        let y = run(Tensor::ones(&[1, 4, 8, 8, 8]), Tensor::ones(&[2, 4, 1, 1, 1]), ConvSpec::new(2, 0, 1));
        assert_eq!(y.shape(), &[1, 2, 4, 4, 4]);
        assert_eq!(y.shape()[2], (8 - 1) / 2 + 1);
    }

    #[test]
    fn ones_kernel_sums_to_27() {
        let y = run(Tensor::ones(&[1, 1, 3, 3, 3]), Tensor::ones(&[1, 1, 3, 3, 3]), ConvSpec::default());
        assert_eq!(y.shape(), &[1, 1, 1, 1, 1]);
        assert_eq!(y.data(), &[27.0]);
    }

    #[test]
    fn matches_direct_loops() {
        let cases = [
            ([2, 4, 5, 6, 7], [6, 2, 3, 3, 3], ConvSpec::new(1, 1, 2)),
            ([1, 3, 7, 6, 5], [4, 3, 3, 2, 3], ConvSpec { stride: [2, 1, 3], padding: [1, 0, 2], groups: 1 }),
            ([1, 4, 6, 6, 6], [4, 1, 3, 3, 3], ConvSpec::new(2, 1, 4)),
            ([2, 2, 4, 4, 4], [3, 2, 1, 1, 1], ConvSpec::new(3, 0, 1)),
        ];
        for (xs, ws, spec) in cases {
            let x = Tensor::from_fn(&xs, |i| ((i * 7919) % 23) as f64 / 11.0 - 1.0);
            let w = Tensor::from_fn(&ws, |i| ((i * 104729) % 17) as f64 / 8.0 - 1.0);
            let fast = run(x.clone(), w.clone(), spec);
            let slow = naive(&x, &w, spec);
            assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12, "{xs:?} {ws:?} {spec:?}");
        }
    }

    #[test]
    fn depthwise_equals_per_channel_convs() {
        let x = Tensor::from_fn(&[1, 3, 5, 4, 6], |i| ((i * 31) % 13) as f64 - 6.0);
        let w = Tensor::from_fn(&[3, 1, 3, 3, 3], |i| ((i * 17) % 7) as f64 - 3.0);
        let dw = run(x.clone(), w.clone(), ConvSpec::new(1, 1, 3));
        for c in 0..3 {
            let xc = Tensor::new(vec![1, 1, 5, 4, 6], x.data()[c * 120..(c + 1) * 120].to_vec()).unwrap();
            let wc = Tensor::new(vec![1, 1, 3, 3, 3], w.data()[c * 27..(c + 1) * 27].to_vec()).unwrap();
            let yc = run(xc, wc, ConvSpec::new(1, 1, 1));
            assert_eq!(&dw.data()[c * 120..(c + 1) * 120], yc.data());
        }
    }

    #[test]
    fn pointwise_equals_unit_kernel_conv() {
        let x = Tensor::from_fn(&[2, 3, 3, 4, 2], |i| (i as f64 * 0.31).cos());
        let w = Tensor::from_fn(&[5, 3], |i| (i as f64 * 0.7).sin());
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x);
        let wp = g.constant(w.clone());
        let wc = g.constant(w.reshape(&[5, 3, 1, 1, 1]).unwrap());
        let a = g.pointwise(xv, wp, None).unwrap();
        let b = g.conv3d(xv, wc, None, ConvSpec::default()).unwrap();
        assert!(g.value(a).max_abs_diff(g.value(b)).unwrap() < 1e-12);
    }

    #[test]
    fn rejects_bad_groups_and_oversized_kernels() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 4, 4, 4]));
        let w = g.constant(Tensor::zeros(&[4, 1, 3, 3, 3]));
        assert!(matches!(g.conv3d(x, w, None, ConvSpec::new(1, 1, 2)), Err(Error::Config(_))));
        let big = g.constant(Tensor::zeros(&[1, 3, 7, 7, 7]));
        assert!(matches!(g.conv3d(x, big, None, ConvSpec::default()), Err(Error::Shape { .. })));
    }
}
