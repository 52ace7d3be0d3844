//! Planar multi-channel correlation via im2col + GEMM, and the filter
//! expansions that turn lifting / group correlations into planar ones.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::group::{spatial_source_map, Boundary, P4Element};
use crate::tensor::{Tape, Tensor, Var};

/// Stride, padding, boundary handling and channel grouping of a correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvOptions {
    pub stride: usize,
    pub padding: usize,
    pub boundary: Boundary,
    pub groups: usize,
}

impl Default for ConvOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            boundary: Boundary::ZeroPad,
            groups: 1,
        }
    }
}

impl ConvOptions {
    /// Stride 1 with `k / 2` padding, so odd kernels preserve spatial size.
    pub fn same(k: usize, boundary: Boundary) -> Self {
        Self {
            padding: k / 2,
            boundary,
            ..Self::default()
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    ho: usize,
    wo: usize,
    groups: usize,
}

impl Geometry {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn patch(&self) -> usize {
        self.cin_g() * self.k * self.k
    }
    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }
}

/// Per kernel tap and output coordinate along one axis: the input coordinate
/// read, or `None` for zero padding.
fn axis_taps(n: usize, out: usize, k: usize, opts: &ConvOptions) -> Vec<Option<usize>> {
    let mut taps = Vec::with_capacity(k * out);
    for kk in 0..k {
        for o in 0..out {
            let pos = (o * opts.stride + kk) as i64 - opts.padding as i64;
            taps.push(match opts.boundary {
                Boundary::Circular => Some(pos.rem_euclid(n as i64) as usize),
                Boundary::ZeroPad => (0..n as i64).contains(&pos).then_some(pos as usize),
            });
        }
    }
    taps
}

struct Plan {
    geo: Geometry,
    rows: Vec<Option<usize>>,
    cols: Vec<Option<usize>>,
}

impl Plan {
    fn new(x_shape: &[usize], w_shape: &[usize], opts: &ConvOptions) -> Result<Self> {
        let &[batch, cin, h, w] = x_shape else {
            return Err(Error::shape(
                "correlate",
                format!("input must be (batch, channel, row, col), got {x_shape:?}"),
            ));
        };
        let &[cout, cin_g, kh, kw] = w_shape else {
            return Err(Error::shape(
                "correlate",
                format!("weights must be (out, in, k, k), got {w_shape:?}"),
            ));
        };
        if kh != kw {
            return Err(Error::NonSquareKernel { kh, kw });
        }
        if opts.stride == 0 || opts.groups == 0 {
            return Err(Error::Config("stride and groups must be positive".into()));
        }
        if cin % opts.groups != 0 || cout % opts.groups != 0 || cin / opts.groups != cin_g {
            return Err(Error::shape(
                "correlate",
                format!(
                    "{cin} input / {cout} output channels incompatible with {} groups of {cin_g}",
                    opts.groups
                ),
            ));
        }
        let k = kh;
        let (ph, pw) = (h + 2 * opts.padding, w + 2 * opts.padding);
        if k > ph || k > pw {
            return Err(Error::KernelTooLarge {
                kernel: k,
                padded: ph.min(pw),
            });
        }
        let ho = (ph - k) / opts.stride + 1;
        let wo = (pw - k) / opts.stride + 1;
        Ok(Self {
            geo: Geometry {
                batch,
                cin,
                h,
                w,
                cout,
                k,
                ho,
                wo,
                groups: opts.groups,
            },
            rows: axis_taps(h, ho, k, opts),
            cols: axis_taps(w, wo, k, opts),
        })
    }

    /// Unfolds one channel group of one sample into a `(patch, hw_out)` matrix.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let g = &self.geo;
        let (k, ho, wo, plane) = (g.k, g.ho, g.wo, g.h * g.w);
        let hw = g.hw_out();
        for c in 0..g.cin_g() {
            let src = &x[c * plane..(c + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * hw;
                    let dst = &mut cols[row..row + hw];
                    for oy in 0..ho {
                        let dst = &mut dst[oy * wo..(oy + 1) * wo];
                        match self.rows[ky * ho + oy] {
                            None => dst.iter_mut().for_each(|v| *v = 0.0),
                            Some(iy) => {
                                let line = &src[iy * g.w..(iy + 1) * g.w];
                                let taps = &self.cols[kx * wo..(kx + 1) * wo];
                                for (d, t) in dst.iter_mut().zip(taps) {
                                    *d = t.map_or(0.0, |ix| line[ix]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Plan::im2col`]: scatter-adds a patch matrix into `dx`.
    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let g = &self.geo;
        let (k, ho, wo, plane) = (g.k, g.ho, g.wo, g.h * g.w);
        let hw = g.hw_out();
        for c in 0..g.cin_g() {
            let dst = &mut dx[c * plane..(c + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * hw;
                    let src = &cols[row..row + hw];
                    for oy in 0..ho {
                        let Some(iy) = self.rows[ky * ho + oy] else { continue };
                        let taps = &self.cols[kx * wo..(kx + 1) * wo];
                        for (v, t) in src[oy * wo..(oy + 1) * wo].iter().zip(taps) {
                            if let Some(ix) = t {
                                dst[iy * g.w + ix] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.geo.batch, self.geo.cout, self.geo.ho, self.geo.wo]
    }

    fn forward(&self, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
        let g = self.geo;
        let (patch, hw) = (g.patch(), g.hw_out());
        let mut out = vec![0.0; g.batch * g.cout * hw];
        let mut cols = vec![0.0; patch * hw];
        let in_group = g.cin_g() * g.h * g.w;
        for b in 0..g.batch {
            for grp in 0..g.groups {
                let xo = (b * g.cin * g.h * g.w) + grp * in_group;
                self.im2col(&x[xo..xo + in_group], &mut cols);
                let wg = &w[grp * g.cout_g() * patch..(grp + 1) * g.cout_g() * patch];
                let oo = (b * g.cout + grp * g.cout_g()) * hw;
                let og = &mut out[oo..oo + g.cout_g() * hw];
                // SAFETY: the slices cover exactly the (m×k), (k×n), (m×n)
                // row-major matrices described by the strides.
                unsafe {
                    matrixmultiply::dgemm(
                        g.cout_g(),
                        patch,
                        hw,
                        1.0,
                        wg.as_ptr(),
                        patch as isize,
                        1,
                        cols.as_ptr(),
                        hw as isize,
                        1,
                        0.0,
                        og.as_mut_ptr(),
                        hw as isize,
                        1,
                    );
                }
            }
        }
        if let Some(bias) = bias {
            for b in 0..g.batch {
                for (c, &bv) in bias.iter().enumerate() {
                    let o = (b * g.cout + c) * hw;
                    out[o..o + hw].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        out
    }

    /// Returns (d input, d weight, d bias) for the requested parts.
    fn backward(
        &self,
        x: &[f64],
        w: &[f64],
        gout: &[f64],
        need_x: bool,
        need_w: bool,
        need_b: bool,
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
        let g = self.geo;
        let (patch, hw) = (g.patch(), g.hw_out());
        let in_group = g.cin_g() * g.h * g.w;
        let mut dx = need_x.then(|| vec![0.0; x.len()]);
        let mut dw = need_w.then(|| vec![0.0; w.len()]);
        let db = need_b.then(|| {
            let mut db = vec![0.0; g.cout];
            for b in 0..g.batch {
                for (c, d) in db.iter_mut().enumerate() {
                    let o = (b * g.cout + c) * hw;
                    *d += gout[o..o + hw].iter().sum::<f64>();
                }
            }
            db
        });
        if !need_x && !need_w {
            return (None, None, db);
        }
        let mut cols = vec![0.0; patch * hw];
        let mut dcols = vec![0.0; patch * hw];
        for b in 0..g.batch {
            for grp in 0..g.groups {
                let xo = b * g.cin * g.h * g.w + grp * in_group;
                let wo = grp * g.cout_g() * patch;
                let go = (b * g.cout + grp * g.cout_g()) * hw;
                let gg = &gout[go..go + g.cout_g() * hw];
                if let Some(dw) = dw.as_mut() {
                    self.im2col(&x[xo..xo + in_group], &mut cols);
                    let dwg = &mut dw[wo..wo + g.cout_g() * patch];
                    // SAFETY: dOut (cout_g×hw) · colsᵀ (hw×patch) into dW (cout_g×patch).
                    unsafe {
                        matrixmultiply::dgemm(
                            g.cout_g(),
                            hw,
                            patch,
                            1.0,
                            gg.as_ptr(),
                            hw as isize,
                            1,
                            cols.as_ptr(),
                            1,
                            hw as isize,
                            1.0,
                            dwg.as_mut_ptr(),
                            patch as isize,
                            1,
                        );
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    let wg = &w[wo..wo + g.cout_g() * patch];
                    // SAFETY: Wᵀ (patch×cout_g) · dOut (cout_g×hw) into dCols (patch×hw).
                    unsafe {
                        matrixmultiply::dgemm(
                            patch,
                            g.cout_g(),
                            hw,
                            1.0,
                            wg.as_ptr(),
                            1,
                            patch as isize,
                            gg.as_ptr(),
                            hw as isize,
                            1,
                            0.0,
                            dcols.as_mut_ptr(),
                            hw as isize,
                            1,
                        );
                    }
                    self.col2im(&dcols, &mut dx[xo..xo + in_group]);
                }
            }
        }
        (dx, dw, db)
    }
}

/// Output spatial extent of a correlation along one axis.
pub fn output_extent(n: usize, k: usize, opts: &ConvOptions) -> Option<usize> {
    let padded = n + 2 * opts.padding;
    (k <= padded && opts.stride > 0).then(|| (padded - k) / opts.stride + 1)
}

/// Index maps used to expand filters over the four rotations.
fn rotation_maps(k: usize) -> Vec<Vec<usize>> {
    (0..4u8)
        .map(|r| {
            spatial_source_map(&P4Element::rotation(r), k, k, Boundary::ZeroPad)
                .expect("square kernel")
                .into_iter()
                .map(|s| s.expect("pure rotations keep every tap on the grid"))
                .collect()
        })
        .collect()
}

impl Tape {
    /// Planar correlation `out(x) = Σ_y Σ_c f_c(y) w_c(y - x)` with
    /// `x` of shape `(batch, channel, row, col)` and `w` of shape
    /// `(out, in/groups, k, k)`; the kernel tap `(k/2, k/2)` sits at offset 0.
    pub fn correlate(&mut self, x: Var, w: Var, bias: Option<Var>, opts: ConvOptions) -> Result<Var> {
        let plan = Plan::new(self.shape(x), self.shape(w), &opts)?;
        if let Some(b) = bias {
            if self.shape(b) != [plan.geo.cout] {
                return Err(Error::shape(
                    "correlate",
                    format!("bias shape {:?}, expected [{}]", self.shape(b), plan.geo.cout),
                ));
            }
        }
        let out = plan.forward(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::from_parts(plan.out_shape(), out);
        let mut parents = vec![x, w];
        parents.extend(bias);
        self.push(
            "correlate",
            value,
            &parents,
            Box::new(move |g, inputs, _, needs| {
                let need_b = needs.get(2).copied().unwrap_or(false);
                let (dx, dw, db) =
                    plan.backward(inputs[0].data(), inputs[1].data(), g.data(), needs[0], needs[1], need_b);
                let mut grads = vec![
                    dx.map(|d| Tensor::from_parts(inputs[0].shape().to_vec(), d)),
                    dw.map(|d| Tensor::from_parts(inputs[1].shape().to_vec(), d)),
                ];
                if inputs.len() == 3 {
                    grads.push(db.map(|d| Tensor::from_parts(inputs[2].shape().to_vec(), d)));
                }
                grads
            }),
        )
    }

    /// Expands a lifting filter `(out, in, k, k)` into the planar bank
    /// `(out·4, in, k, k)` whose slice `o·4 + r` is slice `o` turned `r` times.
    pub fn expand_lifting_filter(&mut self, w: Var) -> Result<Var> {
        let shape = self.shape(w).to_vec();
        let &[cout, cin, kh, kw] = shape.as_slice() else {
            return Err(Error::shape("lift_correlate", format!("weights {shape:?}")));
        };
        if kh != kw {
            return Err(Error::NonSquareKernel { kh, kw });
        }
        let maps = rotation_maps(kh);
        let kk = kh * kw;
        let src = self.value(w).data();
        let mut out = vec![0.0; cout * 4 * cin * kk];
        for o in 0..cout {
            for (r, map) in maps.iter().enumerate() {
                for c in 0..cin {
                    let s = &src[(o * cin + c) * kk..(o * cin + c + 1) * kk];
                    let d = &mut out[((o * 4 + r) * cin + c) * kk..((o * 4 + r) * cin + c + 1) * kk];
                    for (dv, &m) in d.iter_mut().zip(map) {
                        *dv = s[m];
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![cout * 4, cin, kh, kw], out);
        self.push(
            "expand_lifting_filter",
            value,
            &[w],
            Box::new(move |g, _, _, _| {
                let mut d = vec![0.0; cout * cin * kk];
                for o in 0..cout {
                    for (r, map) in maps.iter().enumerate() {
                        for c in 0..cin {
                            let gs = &g.data()[((o * 4 + r) * cin + c) * kk..][..kk];
                            let dd = &mut d[(o * cin + c) * kk..(o * cin + c + 1) * kk];
                            for (gv, &m) in gs.iter().zip(map) {
                                dd[m] += gv;
                            }
                        }
                    }
                }
                vec![Some(Tensor::from_parts(vec![cout, cin, kh, kw], d))]
            }),
        )
    }

    /// Expands a group filter `(out, in, 4, k, k)` into the planar bank
    /// `(out·4, in·4, k, k)`; block `(o·4 + r, c·4 + s)` is
    /// `rotate_filter(w, r)[o, c, s]`.
    pub fn expand_group_filter(&mut self, w: Var) -> Result<Var> {
        let shape = self.shape(w).to_vec();
        let &[cout, cin, four, kh, kw] = shape.as_slice() else {
            return Err(Error::shape("group_correlate", format!("weights {shape:?}")));
        };
        if four != 4 {
            return Err(Error::shape(
                "group_correlate",
                format!("filter rotation axis has extent {four}"),
            ));
        }
        if kh != kw {
            return Err(Error::NonSquareKernel { kh, kw });
        }
        let maps = rotation_maps(kh);
        let kk = kh * kw;
        let src = self.value(w).data();
        let mut out = vec![0.0; cout * 4 * cin * 4 * kk];
        let block = move |o: usize, r: usize, c: usize, s: usize| (((o * 4 + r) * cin + c) * 4 + s) * kk;
        let slice = move |o: usize, c: usize, q: usize| ((o * cin + c) * 4 + q) * kk;
        for o in 0..cout {
            for (r, map) in maps.iter().enumerate() {
                for c in 0..cin {
                    for s in 0..4 {
                        let q = (s + 4 - r) % 4;
                        let sv = &src[slice(o, c, q)..slice(o, c, q) + kk];
                        let dv = &mut out[block(o, r, c, s)..block(o, r, c, s) + kk];
                        for (d, &m) in dv.iter_mut().zip(map) {
                            *d = sv[m];
                        }
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![cout * 4, cin * 4, kh, kw], out);
        self.push(
            "expand_group_filter",
            value,
            &[w],
            Box::new(move |g, _, _, _| {
                let mut d = vec![0.0; cout * cin * 4 * kk];
                for o in 0..cout {
                    for (r, map) in maps.iter().enumerate() {
                        for c in 0..cin {
                            for s in 0..4 {
                                let q = (s + 4 - r) % 4;
                                let gv = &g.data()[block(o, r, c, s)..block(o, r, c, s) + kk];
                                let dd = &mut d[slice(o, c, q)..slice(o, c, q) + kk];
                                for (v, &m) in gv.iter().zip(map) {
                                    dd[m] += v;
                                }
                            }
                        }
                    }
                }
                vec![Some(Tensor::from_parts(vec![cout, cin, 4, kh, kw], d))]
            }),
        )
    }

    /// Repeats every entry of a vector `times` times in place:
    /// `[a, b] -> [a, a, a, a, b, b, b, b]` for `times = 4`.
    pub fn repeat_each(&mut self, v: Var, times: usize) -> Result<Var> {
        let src = self.value(v);
        if src.rank() != 1 {
            return Err(Error::shape("repeat_each", format!("{:?}", src.shape())));
        }
        let n = src.numel();
        let data = src.data().iter().flat_map(|&x| std::iter::repeat_n(x, times)).collect();
        self.push(
            "repeat_each",
            Tensor::from_parts(vec![n * times], data),
            &[v],
            Box::new(move |g, _, _, _| {
                let d = g.data().chunks(times).map(|c| c.iter().sum()).collect();
                vec![Some(Tensor::from_parts(vec![n], d))]
            }),
        )
    }

    /// Lifting correlation of planar input `(batch, in, row, col)` with
    /// filters `(out, in, k, k)`; output `(batch, out, 4, row', col')`.
    pub fn lift_correlate(&mut self, x: Var, w: Var, bias: Option<Var>, opts: ConvOptions) -> Result<Var> {
        let cout = self.shape(w)[0];
        let ew = self.expand_lifting_filter(w)?;
        let eb = bias.map(|b| self.repeat_each(b, 4)).transpose()?;
        let y = self.correlate(x, ew, eb, opts)?;
        let s = self.shape(y).to_vec();
        self.reshape(y, &[s[0], cout, 4, s[2], s[3]])
    }

    /// Group correlation of `(batch, in, 4, row, col)` with filters
    /// `(out, in/groups, 4, k, k)`; output `(batch, out, 4, row', col')`.
    pub fn group_correlate(&mut self, x: Var, w: Var, bias: Option<Var>, opts: ConvOptions) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let &[batch, cin, four, h, wd] = xs.as_slice() else {
            return Err(Error::shape(
                "group_correlate",
                format!("input must be (batch, channel, 4, row, col), got {xs:?}"),
            ));
        };
        if four != 4 {
            return Err(Error::shape("group_correlate", "input rotation axis must be 4"));
        }
        let cout = self.shape(w)[0];
        let planar = self.reshape(x, &[batch, cin * 4, h, wd])?;
        let ew = self.expand_group_filter(w)?;
        let eb = bias.map(|b| self.repeat_each(b, 4)).transpose()?;
        let y = self.correlate(planar, ew, eb, opts)?;
        let s = self.shape(y).to_vec();
        self.reshape(y, &[batch, cout, 4, s[2], s[3]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(x: Tensor, w: Tensor, opts: ConvOptions) -> Tensor {
        let mut tape = Tape::new();
        let x = tape.constant(x);
        let w = tape.constant(w);
        let y = tape.correlate(x, w, None, opts).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn scalar_filter_scales_input() {
        let x = Tensor::from_slice(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::from_slice(&[1, 1, 1, 1], &[2.0]).unwrap();
        assert_eq!(run(x, w, ConvOptions::default()).data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn valid_two_by_two() {
        let x = Tensor::from_slice(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::from_slice(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = run(x, w, ConvOptions::default());
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn kernel_larger_than_padded_input() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let w = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(matches!(
            tape.correlate(x, w, None, ConvOptions::default()),
            Err(Error::KernelTooLarge { .. })
        ));
        let w = tape.constant(Tensor::zeros(&[1, 1, 3, 2]));
        assert!(matches!(
            tape.correlate(x, w, None, ConvOptions::default()),
            Err(Error::NonSquareKernel { .. })
        ));
    }

    #[test]
    fn stride_two_halves_extent() {
        let opts = ConvOptions::same(3, Boundary::ZeroPad).with_stride(2);
        assert_eq!(output_extent(16, 3, &opts), Some(8));
        assert_eq!(output_extent(8, 3, &opts), Some(4));
    }

    #[test]
    fn grouped_matches_separate_convolutions() {
        let x = Tensor::new(vec![1, 2, 3, 3], (0..18).map(|v| v as f64 * 0.1).collect()).unwrap();
        let w = Tensor::new(vec![2, 1, 3, 3], (0..18).map(|v| (v as f64 - 9.0) * 0.05).collect()).unwrap();
        let opts = ConvOptions::same(3, Boundary::Circular).with_groups(2);
        let y = run(x.clone(), w.clone(), opts);
        for g in 0..2 {
            let xg = Tensor::from_slice(&[1, 1, 3, 3], &x.data()[g * 9..(g + 1) * 9]).unwrap();
            let wg = Tensor::from_slice(&[1, 1, 3, 3], &w.data()[g * 9..(g + 1) * 9]).unwrap();
            let yg = run(xg, wg, ConvOptions::same(3, Boundary::Circular));
            assert_eq!(&y.data()[g * 9..(g + 1) * 9], yg.data());
        }
    }
}
