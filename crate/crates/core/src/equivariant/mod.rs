//! Differentiable planar, lifting and group correlations, layer
//! normalisation, residual blocks and the class-logit projection.
//!
//! The tape methods (`Tape::correlate`, `Tape::group_correlate`, ...) are the
//! primitives the network is built from. The free functions in this module
//! are single-sample conveniences over the same code paths.

mod conv;
mod norm;

pub use conv::{output_extent, ConvOptions};

use crate::capsule::CapsuleField;
use crate::error::{Error, Result};
use crate::group::{Boundary, GroupFeatureMap};
use crate::tensor::{ReduceOp, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dParams {
    /// `(out, in, k, k)`
    pub weights: Tensor,
    /// `(out,)`
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

/// Filters for a lifting correlation (`(out, in, k, k)`) or a group
/// correlation (`(out, in, 4, k, k)`). Bias is per output channel and shared
/// over rotations and positions.
#[derive(Clone, Debug, PartialEq)]
pub struct GConvParams {
    pub weights: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl GConvParams {
    pub fn is_lifting(&self) -> bool {
        self.weights.rank() == 4
    }

    fn options(&self, boundary: Boundary) -> ConvOptions {
        ConvOptions {
            stride: self.stride,
            padding: self.padding,
            boundary,
            groups: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    /// Shaped like the leading normalised axes; broadcast over the rest.
    pub gain: Tensor,
    pub bias: Tensor,
    pub epsilon: f64,
}

impl LayerNormParams {
    pub fn identity(shape: &[usize]) -> Self {
        Self {
            gain: Tensor::full(shape, 1.0),
            bias: Tensor::zeros(shape),
            epsilon: 1e-5,
        }
    }
}

/// Two 3×3 group correlations with a shortcut.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlockParams {
    pub conv1: GConvParams,
    pub conv2: GConvParams,
    /// 1×1 strided group correlation, used when shapes change.
    pub shortcut: Option<GConvParams>,
}

/// Per class type, a linear map from capsule dimensions to one scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionParams {
    /// `(classes, dim)`
    pub weights: Tensor,
    /// `(classes,)`
    pub bias: Tensor,
}

fn with_batch(t: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    t.reshape(&shape)
}

fn drop_batch(t: &Tensor) -> Result<Tensor> {
    t.reshape(&t.shape()[1..])
}

/// Planar correlation of a `(channel, row, col)` field.
pub fn correlate2d(f: &Tensor, p: &Conv2dParams, boundary: Boundary) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(with_batch(f)?);
    let w = tape.constant(p.weights.clone());
    let b = tape.constant(p.bias.clone());
    let opts = ConvOptions {
        stride: p.stride,
        padding: p.padding,
        boundary,
        groups: 1,
    };
    let y = tape.correlate(x, w, Some(b), opts)?;
    drop_batch(tape.value(y))
}

/// Lifts a planar `(channel, row, col)` field to the group.
pub fn lift_correlate(f: &Tensor, p: &GConvParams, boundary: Boundary) -> Result<GroupFeatureMap> {
    if !p.is_lifting() {
        return Err(Error::shape("lift_correlate", "expected (out, in, k, k) weights"));
    }
    let mut tape = Tape::new();
    let x = tape.constant(with_batch(f)?);
    let w = tape.constant(p.weights.clone());
    let b = tape.constant(p.bias.clone());
    let y = tape.lift_correlate(x, w, Some(b), p.options(boundary))?;
    GroupFeatureMap::new(drop_batch(tape.value(y))?, boundary)
}

/// Group correlation `[f ⋆ Ψ](g) = Σ_h Σ_k f_k(h) Ψ_k(g⁻¹h)`.
pub fn group_correlate(f: &GroupFeatureMap, p: &GConvParams) -> Result<GroupFeatureMap> {
    if p.is_lifting() {
        return Err(Error::shape("group_correlate", "expected (out, in, 4, k, k) weights"));
    }
    let mut tape = Tape::new();
    let x = tape.constant(with_batch(f.values())?);
    let w = tape.constant(p.weights.clone());
    let b = tape.constant(p.bias.clone());
    let y = tape.group_correlate(x, w, Some(b), p.options(f.boundary()))?;
    GroupFeatureMap::new(drop_batch(tape.value(y))?, f.boundary())
}

/// `(x - mean) / sqrt(var + eps)` over `axes` (a trailing run of axes),
/// followed by the affine map in `p`.
pub fn layer_norm(x: &Tensor, p: &LayerNormParams, axes: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let g = tape.constant(p.gain.clone());
    let b = tape.constant(p.bias.clone());
    let y = tape.layer_norm(xv, g, b, axes, p.epsilon)?;
    Ok(tape.value(y).clone())
}

/// Parameter handles of one residual block on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub shortcut: Option<(Var, Var)>,
}

/// `relu(conv2(relu(conv1(x))) + shortcut(x))`; `conv1` and the shortcut
/// carry the block stride.
pub fn residual_block_on(tape: &mut Tape, x: Var, p: &BlockVars, stride: usize, boundary: Boundary) -> Result<Var> {
    let k1 = tape.shape(p.w1)[3];
    let k2 = tape.shape(p.w2)[3];
    let h = tape.group_correlate(x, p.w1, Some(p.b1), ConvOptions::same(k1, boundary).with_stride(stride))?;
    let h = tape.relu(h)?;
    let h = tape.group_correlate(h, p.w2, Some(p.b2), ConvOptions::same(k2, boundary))?;
    let skip = match p.shortcut {
        Some((ws, bs)) => tape.group_correlate(x, ws, Some(bs), ConvOptions::same(1, boundary).with_stride(stride))?,
        None => {
            if tape.shape(x) != tape.shape(h) {
                return Err(Error::shape(
                    "residual_block",
                    format!(
                        "identity shortcut needs matching shapes: {:?} vs {:?}",
                        tape.shape(x),
                        tape.shape(h)
                    ),
                ));
            }
            x
        }
    };
    let sum = tape.add(h, skip)?;
    tape.relu(sum)
}

pub fn residual_block(f: &GroupFeatureMap, p: &ResidualBlockParams) -> Result<GroupFeatureMap> {
    let mut tape = Tape::new();
    let x = tape.constant(with_batch(f.values())?);
    let mut c = |t: &Tensor| tape.constant(t.clone());
    let vars = BlockVars {
        w1: c(&p.conv1.weights),
        b1: c(&p.conv1.bias),
        w2: c(&p.conv2.weights),
        b2: c(&p.conv2.bias),
        shortcut: p.shortcut.as_ref().map(|s| (c(&s.weights), c(&s.bias))),
    };
    let y = residual_block_on(&mut tape, x, &vars, p.conv1.stride, f.boundary())?;
    GroupFeatureMap::new(drop_batch(tape.value(y))?, f.boundary())
}

impl Tape {
    /// Per-type linear map over the capsule dimension:
    /// `(batch, types, dim, 4, row, col) -> (batch, types, 4, row, col)`.
    pub fn type_linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let &[batch, types, dim, four, h, wd] = xs.as_slice() else {
            return Err(Error::shape("project_logits", format!("input {xs:?}")));
        };
        if self.shape(w) != [types, dim] || self.shape(b) != [types] {
            return Err(Error::shape(
                "project_logits",
                format!(
                    "weights {:?} / bias {:?} for {types} types of dim {dim}",
                    self.shape(w),
                    self.shape(b)
                ),
            ));
        }
        let pos = four * h * wd;
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; batch * types * pos];
        for n in 0..batch {
            for t in 0..types {
                let o = &mut out[(n * types + t) * pos..(n * types + t + 1) * pos];
                o.iter_mut().for_each(|v| *v = bv[t]);
                for d in 0..dim {
                    let wt = wv[t * dim + d];
                    let src = &xv[((n * types + t) * dim + d) * pos..][..pos];
                    for (ov, sv) in o.iter_mut().zip(src) {
                        *ov += wt * sv;
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![batch, types, four, h, wd], out);
        self.push(
            "type_linear",
            value,
            &[x, w, b],
            Box::new(move |g, inputs, _, needs| {
                let (xv, wv) = (inputs[0].data(), inputs[1].data());
                let gv = g.data();
                let mut dx = needs[0].then(|| vec![0.0; xv.len()]);
                let mut dw = needs[1].then(|| vec![0.0; wv.len()]);
                let mut db = needs[2].then(|| vec![0.0; types]);
                for n in 0..batch {
                    for t in 0..types {
                        let go = &gv[(n * types + t) * pos..][..pos];
                        if let Some(db) = db.as_mut() {
                            db[t] += go.iter().sum::<f64>();
                        }
                        for d in 0..dim {
                            let off = ((n * types + t) * dim + d) * pos;
                            if let Some(dw) = dw.as_mut() {
                                dw[t * dim + d] += go.iter().zip(&xv[off..off + pos]).map(|(a, b)| a * b).sum::<f64>();
                            }
                            if let Some(dx) = dx.as_mut() {
                                let wt = wv[t * dim + d];
                                for (dv, gv) in dx[off..off + pos].iter_mut().zip(go) {
                                    *dv += wt * gv;
                                }
                            }
                        }
                    }
                }
                vec![
                    dx.map(|d| Tensor::from_parts(inputs[0].shape().to_vec(), d)),
                    dw.map(|d| Tensor::from_parts(inputs[1].shape().to_vec(), d)),
                    db.map(|d| Tensor::from_parts(vec![types], d)),
                ]
            }),
        )
    }

    /// Class logits from class capsules: per-type linear map to a scalar
    /// field, mean over positions, then max over the four rotations.
    pub fn project_logits(&mut self, caps: Var, w: Var, b: Var) -> Result<Var> {
        let field = self.type_linear(caps, w, b)?;
        let pooled = self.reduce(ReduceOp::Mean, field, &[3, 4])?;
        self.reduce(ReduceOp::Max, pooled, &[2])
    }
}

/// One logit per class type of a single-sample class-capsule field.
pub fn project_logits(caps: &CapsuleField, p: &ProjectionParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(with_batch(caps.values())?);
    let w = tape.constant(p.weights.clone());
    let b = tape.constant(p.bias.clone());
    let y = tape.project_logits(x, w, b)?;
    drop_batch(tape.value(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::{act, P4Element};

    fn ramp(shape: &[usize], scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|i| ((i * 7919) % 23) as f64 * scale - 0.3).collect(),
        )
        .unwrap()
    }

    #[test]
    fn symmetric_lifting_filter_gives_identical_slices() {
        let f = ramp(&[1, 5, 5], 0.1);
        let p = GConvParams {
            weights: Tensor::full(&[2, 1, 3, 3], 0.5),
            bias: Tensor::zeros(&[2]),
            stride: 1,
            padding: 1,
        };
        let y = lift_correlate(&f, &p, Boundary::ZeroPad).unwrap();
        let v = y.values();
        for c in 0..2 {
            for r in 1..4 {
                for i in 0..25 {
                    assert_eq!(v.get(&[c, r, i / 5, i % 5]), v.get(&[c, 0, i / 5, i % 5]));
                }
            }
        }
    }

    #[test]
    fn delta_group_filter_copies_input() {
        let f = GroupFeatureMap::new(ramp(&[1, 4, 4, 4], 0.05), Boundary::Circular).unwrap();
        let mut w = Tensor::zeros(&[1, 1, 4, 3, 3]);
        w.set(&[0, 0, 0, 1, 1], 1.0);
        let p = GConvParams {
            weights: w,
            bias: Tensor::zeros(&[1]),
            stride: 1,
            padding: 1,
        };
        let y = group_correlate(&f, &p).unwrap();
        assert!(y.values().max_abs_diff(f.values()) < 1e-12);
    }

    #[test]
    fn layer_norm_examples() {
        let c = Tensor::full(&[5], 3.0);
        let y = layer_norm(&c, &LayerNormParams::identity(&[5]), &[0]).unwrap();
        assert!(y.max_abs() < 1e-12);

        let x = Tensor::from_slice(&[2], &[1.0, 3.0]).unwrap();
        let p = LayerNormParams {
            epsilon: 1e-12,
            ..LayerNormParams::identity(&[2])
        };
        let y = layer_norm(&x, &p, &[0]).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_weight_block_is_relu() {
        let f = GroupFeatureMap::new(ramp(&[2, 4, 4, 4], 0.05), Boundary::ZeroPad).unwrap();
        let zero = |shape: &[usize]| GConvParams {
            weights: Tensor::zeros(shape),
            bias: Tensor::zeros(&[shape[0]]),
            stride: 1,
            padding: 1,
        };
        let p = ResidualBlockParams {
            conv1: zero(&[2, 2, 4, 3, 3]),
            conv2: zero(&[2, 2, 4, 3, 3]),
            shortcut: None,
        };
        let y = residual_block(&f, &p).unwrap();
        assert_eq!(y.values(), &f.values().map(|v| v.max(0.0)));
    }

    #[test]
    fn stride_two_block_halves_extent() {
        let f = GroupFeatureMap::new(ramp(&[2, 4, 8, 8], 0.05), Boundary::ZeroPad).unwrap();
        let p = |shape: &[usize], stride| GConvParams {
            weights: ramp(shape, 0.01),
            bias: Tensor::zeros(&[shape[0]]),
            stride,
            padding: shape[3] / 2,
        };
        let block = ResidualBlockParams {
            conv1: p(&[3, 2, 4, 3, 3], 2),
            conv2: p(&[3, 3, 4, 3, 3], 1),
            shortcut: Some(p(&[3, 2, 4, 1, 1], 2)),
        };
        let y = residual_block(&f, &block).unwrap();
        assert_eq!(y.values().shape(), &[3, 4, 4, 4]);
    }

    #[test]
    fn constant_class_field_gives_affine_logits() {
        let mut v = Tensor::zeros(&[2, 3, 4, 2, 2]);
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x = if i < 48 { 1.0 } else { 2.0 };
        }
        let caps = CapsuleField::new(v).unwrap();
        let p = ProjectionParams {
            weights: Tensor::from_slice(&[2, 3], &[1.0, 1.0, 1.0, 0.5, 0.0, -1.0]).unwrap(),
            bias: Tensor::from_slice(&[2], &[0.25, -0.5]).unwrap(),
        };
        let logits = project_logits(&caps, &p).unwrap();
        assert!((logits.data()[0] - 3.25).abs() < 1e-12);
        assert!((logits.data()[1] - (-1.5)).abs() < 1e-12);
        let rotated = act(
            &P4Element::new(3, (1, 0)),
            &GroupFeatureMap::new(caps.values().reshape(&[6, 4, 2, 2]).unwrap(), Boundary::Circular).unwrap(),
        )
        .unwrap();
        let caps2 = CapsuleField::new(rotated.values().reshape(&[2, 3, 4, 2, 2]).unwrap()).unwrap();
        assert_eq!(project_logits(&caps2, &p).unwrap(), logits);
    }
}
