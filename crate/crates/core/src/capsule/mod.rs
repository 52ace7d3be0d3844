//! Primary capsules, prediction generation and iterative collaborative
//! routing (ICR).
//!
//! Batched tensors used on the tape:
//! - capsules: `(batch, type, dim, 4, row, col)`
//! - predictions: `(batch, in-type i, out-type j, dim, 4, row, col)`
//!
//! Routing runs independently for every `(batch, j, rotation, row, col)`.

mod routing;

use serde::{Deserialize, Serialize};

pub use routing::squash;

use crate::equivariant::{ConvOptions, GConvParams, LayerNormParams};
use crate::error::{Error, Result};
use crate::group::{Boundary, GroupFeatureMap};
use crate::tensor::{Tape, Tensor, Var};

pub const COSINE_EPS: f64 = 1e-8;

/// Capsule poses with axes `(type, dim, 4, row, col)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CapsuleField {
    values: Tensor,
}

impl CapsuleField {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 5 || values.shape()[2] != 4 {
            return Err(Error::shape(
                "CapsuleField",
                format!("expected (type, dim, 4, row, col), got {:?}", values.shape()),
            ));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn types(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }

    /// Largest capsule-vector norm over all types and positions.
    pub fn max_norm(&self) -> f64 {
        max_vector_norm(&self.values, 1)
    }
}

/// Predictions with axes `(in-type, out-type, dim, 4, row, col)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionField {
    values: Tensor,
}

impl PredictionField {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 6 || values.shape()[3] != 4 {
            return Err(Error::shape(
                "PredictionField",
                format!("expected (i, j, dim, 4, row, col), got {:?}", values.shape()),
            ));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ICRConfig {
    /// Neighbours averaged per iteration.
    pub k: usize,
    pub num_iter: usize,
    /// Floor for prediction norms in the cosine denominators.
    pub epsilon: f64,
    /// Layer-normalise predictions before routing. Breaks exact
    /// equivariance under zero padding.
    pub use_pred_layernorm: bool,
}

impl Default for ICRConfig {
    fn default() -> Self {
        Self {
            k: 10,
            num_iter: 2,
            epsilon: COSINE_EPS,
            use_pred_layernorm: true,
        }
    }
}

impl ICRConfig {
    pub fn validate(&self, n_in: usize) -> Result<()> {
        if n_in < 2 || self.k == 0 || self.k > n_in - 1 {
            return Err(Error::KOutOfRange { k: self.k, n: n_in });
        }
        Ok(())
    }
}

/// Routing quantities for every `(j, group position)`.
///
/// Axes follow the prediction layout with the group position kept trailing,
/// so `act_group` applies directly:
/// - `a`: `(lead.., j, i, k, 4, row, col)`
/// - `dcen`, `c`: `(lead.., j, i, 4, row, col)`
/// - `kn`: neighbour ids with shape `kn_shape = (lead.., j, i, kk, 4, row, col)`
///
/// `dcen` holds the centralities after the last iteration, the values the
/// softmax is taken of.
///
/// `lead` is `[batch]` for states produced on the tape and empty for
/// [`icr_weights`].
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingState {
    pub a: Tensor,
    pub dcen: Tensor,
    pub kn: Vec<usize>,
    pub kn_shape: Vec<usize>,
    pub c: Tensor,
}

/// Deviations from the routing invariants.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RoutingReport {
    /// `max |Σ_i c_i - 1|`
    pub softmax_row_error: f64,
    /// `max |A_ik - A_ki|`
    pub symmetry_error: f64,
    /// `max |A_ii - 1|` over predictions with non-degenerate norm.
    pub diagonal_error: f64,
    /// Whether every neighbour id is in range and differs from its row.
    pub neighbours_valid: bool,
}

impl RoutingReport {
    pub fn merge(&mut self, other: &RoutingReport) {
        self.softmax_row_error = self.softmax_row_error.max(other.softmax_row_error);
        self.symmetry_error = self.symmetry_error.max(other.symmetry_error);
        self.diagonal_error = self.diagonal_error.max(other.diagonal_error);
        self.neighbours_valid &= other.neighbours_valid;
    }

    pub fn within(&self, tol: f64) -> bool {
        self.softmax_row_error <= tol
            && self.symmetry_error <= tol
            && self.diagonal_error <= tol
            && self.neighbours_valid
    }
}

impl RoutingState {
    pub fn report(&self) -> RoutingReport {
        let cs = self.c.shape();
        let rank = cs.len();
        let n = cs[rank - 4];
        let pos: usize = cs[rank - 3..].iter().product();
        let outer = self.c.numel() / (n * pos);
        let (a, c) = (self.a.data(), self.c.data());
        let mut rep = RoutingReport {
            neighbours_valid: true,
            ..Default::default()
        };
        let kk = self.kn_shape[self.kn_shape.len() - 4];
        for o in 0..outer {
            for p in 0..pos {
                let sum: f64 = (0..n).map(|i| c[(o * n + i) * pos + p]).sum();
                rep.softmax_row_error = rep.softmax_row_error.max((sum - 1.0).abs());
                for i in 0..n {
                    let aii = a[((o * n + i) * n + i) * pos + p];
                    // Degenerate (zero) predictions have zero self-affinity.
                    if aii != 0.0 {
                        rep.diagonal_error = rep.diagonal_error.max((aii - 1.0).abs());
                    }
                    for m in i + 1..n {
                        let x = a[((o * n + i) * n + m) * pos + p];
                        let y = a[((o * n + m) * n + i) * pos + p];
                        rep.symmetry_error = rep.symmetry_error.max((x - y).abs());
                    }
                    for q in 0..kk {
                        let id = self.kn[((o * n + i) * kk + q) * pos + p];
                        if id >= n || id == i {
                            rep.neighbours_valid = false;
                        }
                    }
                }
            }
        }
        rep
    }
}

fn max_vector_norm(t: &Tensor, axis: usize) -> f64 {
    let shape = t.shape();
    let dim = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut best: f64 = 0.0;
    for o in 0..outer {
        for p in 0..inner {
            let n2: f64 = (0..dim).map(|d| t.data()[(o * dim + d) * inner + p].powi(2)).sum();
            best = best.max(n2.sqrt());
        }
    }
    best
}

impl Tape {
    /// Runs ICR on predictions `(batch, i, j, dim, 4, row, col)` and returns
    /// the routed (pre-squash) sums `Σ_i c_ij P_ij` with shape
    /// `(batch, j, dim, 4, row, col)`, plus the routing state.
    pub fn icr_route(&mut self, pred: Var, cfg: &ICRConfig) -> Result<(Var, RoutingState)> {
        let shape = self.shape(pred).to_vec();
        let &[batch, n, jn, d, four, h, w] = shape.as_slice() else {
            return Err(Error::shape(
                "icr",
                format!("predictions must be (batch, i, j, dim, 4, row, col), got {shape:?}"),
            ));
        };
        if four != 4 {
            return Err(Error::shape("icr", "rotation axis must be 4"));
        }
        cfg.validate(n)?;
        let (k, iters, eps) = (cfg.k, cfg.num_iter, cfg.epsilon);
        let pos = 4 * h * w;
        let pv = self.value(pred).data();
        let mut out = vec![0.0; batch * jn * d * pos];
        let mut a = vec![0.0; batch * jn * n * n * pos];
        let mut dcen = vec![0.0; batch * jn * n * pos];
        let mut cw = vec![0.0; batch * jn * n * pos];
        let mut kn = vec![0usize; batch * jn * n * k * pos];
        let mut local = vec![0.0; n * d];
        let problems = batch * jn * pos;
        // Per-problem solutions, problem index `(b·jn + j)·pos + x`.
        let mut sa = vec![0.0; n * n];
        let mut sd = vec![0.0; n];
        let mut skn = vec![0usize; problems * n * k];
        let mut sc = vec![0.0; problems * n];
        let mut su = vec![0.0; problems * n * d];
        let mut snorm = vec![0.0; problems * n];
        let mut scratch = routing::Scratch::default();
        let at = move |b: usize, i: usize, j: usize, p: usize, x: usize| ((((b * n + i) * jn + j) * d + p) * pos) + x;
        for b in 0..batch {
            for j in 0..jn {
                let bj = b * jn + j;
                for x in 0..pos {
                    for i in 0..n {
                        for p in 0..d {
                            local[i * d + p] = pv[at(b, i, j, p, x)];
                        }
                    }
                    let s = bj * pos + x;
                    let sol = routing::SolutionMut {
                        a: &mut sa,
                        kn: &mut skn[s * n * k..(s + 1) * n * k],
                        dcen: &mut sd,
                        c: &mut sc[s * n..(s + 1) * n],
                        u: &mut su[s * n * d..(s + 1) * n * d],
                        norms: &mut snorm[s * n..(s + 1) * n],
                    };
                    routing::solve_into(&local, n, d, k, iters, eps, sol, &mut scratch);
                    let c = &sc[s * n..(s + 1) * n];
                    for p in 0..d {
                        out[(bj * d + p) * pos + x] = (0..n).map(|i| c[i] * local[i * d + p]).sum();
                    }
                    for i in 0..n {
                        dcen[(bj * n + i) * pos + x] = sd[i];
                        cw[(bj * n + i) * pos + x] = c[i];
                        for m in 0..n {
                            a[((bj * n + i) * n + m) * pos + x] = sa[i * n + m];
                        }
                        for q in 0..k {
                            kn[((bj * n + i) * k + q) * pos + x] = skn[s * n * k + i * k + q];
                        }
                    }
                }
            }
        }
        let state = RoutingState {
            a: Tensor::from_parts(vec![batch, jn, n, n, 4, h, w], a),
            dcen: Tensor::from_parts(vec![batch, jn, n, 4, h, w], dcen),
            kn,
            kn_shape: vec![batch, jn, n, k, 4, h, w],
            c: Tensor::from_parts(vec![batch, jn, n, 4, h, w], cw),
        };
        let value = Tensor::from_parts(vec![batch, jn, d, 4, h, w], out);
        let var = self.push(
            "icr_route",
            value,
            &[pred],
            Box::new(move |g, inputs, _, _| {
                let pv = inputs[0].data();
                let gv = g.data();
                let mut dp = vec![0.0; pv.len()];
                let mut local = vec![0.0; n * d];
                let mut ds = vec![0.0; d];
                let mut gl = vec![0.0; n * d];
                let mut scratch = routing::Scratch::default();
                for b in 0..batch {
                    for j in 0..jn {
                        let bj = b * jn + j;
                        for x in 0..pos {
                            for i in 0..n {
                                for p in 0..d {
                                    local[i * d + p] = pv[at(b, i, j, p, x)];
                                }
                            }
                            for p in 0..d {
                                ds[p] = gv[(bj * d + p) * pos + x];
                            }
                            let s = bj * pos + x;
                            let sol = routing::SolutionRef {
                                kn: &skn[s * n * k..(s + 1) * n * k],
                                c: &sc[s * n..(s + 1) * n],
                                u: &su[s * n * d..(s + 1) * n * d],
                                norms: &snorm[s * n..(s + 1) * n],
                            };
                            routing::weighted_sum_backward(
                                &local,
                                sol,
                                &ds,
                                n,
                                d,
                                k,
                                iters,
                                eps,
                                &mut gl,
                                &mut scratch,
                            );
                            for i in 0..n {
                                for p in 0..d {
                                    dp[at(b, i, j, p, x)] = gl[i * d + p];
                                }
                            }
                        }
                    }
                }
                vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), dp))]
            }),
        )?;
        Ok((var, state))
    }

    /// Squash along `axis`: every vector over that axis is scaled to norm
    /// `|v|² / (1 + |v|²)`.
    pub fn squash(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxes {
                axes: vec![axis],
                rank: shape.len(),
            });
        }
        let dim = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let xv = self.value(x).data();
        let mut n2 = vec![0.0; outer * inner];
        for o in 0..outer {
            for dd in 0..dim {
                let row = &xv[(o * dim + dd) * inner..][..inner];
                for (acc, v) in n2[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v * v;
                }
            }
        }
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for dd in 0..dim {
                let base = (o * dim + dd) * inner;
                for p in 0..inner {
                    out[base + p] = xv[base + p] * routing::squash_factor(n2[o * inner + p]);
                }
            }
        }
        self.push(
            "squash",
            Tensor::from_parts(shape.clone(), out),
            &[x],
            Box::new(move |g, inputs, _, _| {
                let xv = inputs[0].data();
                let gv = g.data();
                let mut dx = vec![0.0; xv.len()];
                for o in 0..outer {
                    for p in 0..inner {
                        let idx = |dd: usize| (o * dim + dd) * inner + p;
                        let s = n2[o * inner + p];
                        let h = routing::squash_factor(s);
                        let slope = routing::squash_factor_slope(s);
                        let vg: f64 = (0..dim).map(|dd| xv[idx(dd)] * gv[idx(dd)]).sum();
                        for dd in 0..dim {
                            dx[idx(dd)] = h * gv[idx(dd)] + 2.0 * slope * vg * xv[idx(dd)];
                        }
                    }
                }
                vec![Some(Tensor::from_parts(shape.clone(), dx))]
            }),
        )
    }
}

/// Tape handles of the primary-capsule parameters.
#[derive(Clone, Copy, Debug)]
pub struct PrimaryVars {
    pub w: Var,
    pub b: Var,
    pub gain: Var,
    pub beta: Var,
}

/// Group correlation to `types · dim` channels, reshaped to capsules and
/// layer-normalised jointly over `(type, dim, 4, row, col)` per sample with
/// an affine map per `(type, dim)`.
pub fn primary_capsules_on(
    tape: &mut Tape,
    x: Var,
    p: &PrimaryVars,
    types: usize,
    dim: usize,
    boundary: Boundary,
) -> Result<Var> {
    let k = tape.shape(p.w)[3];
    let y = tape.group_correlate(x, p.w, Some(p.b), ConvOptions::same(k, boundary))?;
    let s = tape.shape(y).to_vec();
    if s[1] != types * dim {
        return Err(Error::shape(
            "primary_capsules",
            format!("{} channels for {types} types of dim {dim}", s[1]),
        ));
    }
    let caps = tape.reshape(y, &[s[0], types, dim, 4, s[3], s[4]])?;
    tape.layer_norm(caps, p.gain, p.beta, &[1, 2, 3, 4, 5], 1e-5)
}

/// Tape handles of one capsule layer.
#[derive(Clone, Copy, Debug)]
pub struct CapsLayerVars {
    /// `(i·j·dim_out, dim_in, 4, k, k)`: one filter set per (in, out) type pair.
    pub w: Var,
    pub b: Var,
    /// Prediction layer norm affine, `(i, j, dim_out)`.
    pub norm: Option<(Var, Var)>,
}

/// `Pred_ij = f_i ⋆ Ψ_ij`, as one grouped group-correlation over the
/// input types. Output `(batch, i, j, dim_out, 4, row, col)`.
pub fn predict_on(
    tape: &mut Tape,
    caps: Var,
    p: &CapsLayerVars,
    out_types: usize,
    out_dim: usize,
    boundary: Boundary,
) -> Result<Var> {
    let s = tape.shape(caps).to_vec();
    let &[batch, n, din, four, h, w] = s.as_slice() else {
        return Err(Error::shape("predict", format!("capsules {s:?}")));
    };
    let ws = tape.shape(p.w).to_vec();
    if ws[0] != n * out_types * out_dim || ws[1] != din {
        return Err(Error::shape(
            "predict",
            format!("filters {ws:?} for {n} input types of dim {din} -> {out_types}x{out_dim}"),
        ));
    }
    let k = ws[3];
    let x = tape.reshape(caps, &[batch, n * din, four, h, w])?;
    let y = tape.group_correlate(x, p.w, Some(p.b), ConvOptions::same(k, boundary).with_groups(n))?;
    let y = tape.reshape(y, &[batch, n, out_types, out_dim, 4, h, w])?;
    match p.norm {
        Some((g, b)) => tape.layer_norm(y, g, b, &[1, 2, 3, 4, 5, 6], 1e-5),
        None => Ok(y),
    }
}

/// Predict, route and squash. Returns (capsules, predictions, state).
pub fn capsule_layer_on(
    tape: &mut Tape,
    caps: Var,
    p: &CapsLayerVars,
    out_types: usize,
    out_dim: usize,
    cfg: &ICRConfig,
    boundary: Boundary,
) -> Result<(Var, Var, RoutingState)> {
    let pred = predict_on(tape, caps, p, out_types, out_dim, boundary)?;
    let (sum, state) = tape.icr_route(pred, cfg)?;
    let out = tape.squash(sum, 2)?;
    Ok((out, pred, state))
}

/// Parameters of the primary capsule layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimaryCapsuleParams {
    /// Group correlation to `types · dim` output channels.
    pub conv: GConvParams,
    /// Affine per `(type, dim)`.
    pub norm: LayerNormParams,
    pub types: usize,
    pub dim: usize,
}

pub fn primary_capsules(f: &GroupFeatureMap, p: &PrimaryCapsuleParams) -> Result<CapsuleField> {
    let mut tape = Tape::new();
    let x = tape.constant(batched(f.values())?);
    let vars = PrimaryVars {
        w: tape.constant(p.conv.weights.clone()),
        b: tape.constant(p.conv.bias.clone()),
        gain: tape.constant(p.norm.gain.clone()),
        beta: tape.constant(p.norm.bias.clone()),
    };
    let y = primary_capsules_on(&mut tape, x, &vars, p.types, p.dim, f.boundary())?;
    CapsuleField::new(unbatched(tape.value(y))?)
}

/// Filters of one capsule layer's prediction step.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionParams {
    /// `(i·j·dim_out, dim_in, 4, k, k)`
    pub weights: Tensor,
    /// `(i·j·dim_out,)`
    pub bias: Tensor,
    pub out_types: usize,
    pub out_dim: usize,
    /// Affine of the optional prediction layer norm, each `(i, j, dim_out)`.
    pub norm: Option<LayerNormParams>,
}

pub fn predict(f: &CapsuleField, p: &PredictionParams, boundary: Boundary) -> Result<PredictionField> {
    let mut tape = Tape::new();
    let x = tape.constant(batched(f.values())?);
    let vars = CapsLayerVars {
        w: tape.constant(p.weights.clone()),
        b: tape.constant(p.bias.clone()),
        norm: p
            .norm
            .as_ref()
            .map(|n| (tape.constant(n.gain.clone()), tape.constant(n.bias.clone()))),
    };
    let y = predict_on(&mut tape, x, &vars, p.out_types, p.out_dim, boundary)?;
    PredictionField::new(unbatched(tape.value(y))?)
}

/// Routing weights for every `(j, group position)` of a prediction field.
pub fn icr_weights(pred: &PredictionField, cfg: &ICRConfig) -> Result<RoutingState> {
    let mut tape = Tape::new();
    let x = tape.constant(batched(pred.values())?);
    let (_, state) = tape.icr_route(x, cfg)?;
    Ok(RoutingState {
        a: unbatched(&state.a)?,
        dcen: unbatched(&state.dcen)?,
        kn: state.kn,
        kn_shape: state.kn_shape[1..].to_vec(),
        c: unbatched(&state.c)?,
    })
}

/// `f_j(g) = squash(Σ_i c_ij(g) Pred_ij(g))` using precomputed weights.
pub fn route(pred: &PredictionField, state: &RoutingState) -> Result<CapsuleField> {
    let ps = pred.values().shape();
    let (n, jn, d) = (ps[0], ps[1], ps[2]);
    let pos: usize = ps[3..].iter().product();
    if state.c.shape() != [&[jn, n][..], &ps[3..]].concat().as_slice() {
        return Err(Error::shape(
            "route",
            format!("weights {:?} for predictions {ps:?}", state.c.shape()),
        ));
    }
    let pv = pred.values().data();
    let cv = state.c.data();
    let mut out = Tensor::zeros(&[&[jn, d][..], &ps[3..]].concat());
    let ov = out.data_mut();
    for j in 0..jn {
        for x in 0..pos {
            let mut v = vec![0.0; d];
            for i in 0..n {
                let c = cv[(j * n + i) * pos + x];
                for (p, vp) in v.iter_mut().enumerate() {
                    *vp += c * pv[(((i * jn + j) * d) + p) * pos + x];
                }
            }
            for (p, sv) in squash(&v).into_iter().enumerate() {
                ov[(j * d + p) * pos + x] = sv;
            }
        }
    }
    CapsuleField::new(out)
}

fn batched(t: &Tensor) -> Result<Tensor> {
    let mut s = vec![1];
    s.extend_from_slice(t.shape());
    t.reshape(&s)
}

fn unbatched(t: &Tensor) -> Result<Tensor> {
    t.reshape(&t.shape()[1..])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_out_of_range() {
        let cfg = ICRConfig {
            k: 3,
            ..ICRConfig::default()
        };
        assert!(matches!(cfg.validate(3), Err(Error::KOutOfRange { k: 3, n: 3 })));
        assert!(cfg.validate(4).is_ok());
        let zero = ICRConfig { k: 0, ..cfg };
        assert!(zero.validate(4).is_err());
    }

    #[test]
    fn route_with_one_hot_weights_selects_prediction() {
        let mut pred = Tensor::zeros(&[2, 1, 2, 4, 1, 1]);
        for r in 0..4 {
            pred.set(&[0, 0, 0, r, 0, 0], 1.0);
            pred.set(&[1, 0, 0, r, 0, 0], 3.0);
            pred.set(&[1, 0, 1, r, 0, 0], 4.0);
        }
        let pred = PredictionField::new(pred).unwrap();
        let mut state = icr_weights(
            &pred,
            &ICRConfig {
                k: 1,
                num_iter: 0,
                ..ICRConfig::default()
            },
        )
        .unwrap();
        let mut c = Tensor::zeros(state.c.shape());
        for r in 0..4 {
            c.set(&[0, 1, r, 0, 0], 1.0);
        }
        state.c = c;
        let out = route(&pred, &state).unwrap();
        let s = squash(&[3.0, 4.0]);
        assert!((out.values().get(&[0, 0, 2, 0, 0]) - s[0]).abs() < 1e-12);
        assert!((out.values().get(&[0, 1, 2, 0, 0]) - s[1]).abs() < 1e-12);
    }

    #[test]
    fn zero_capsules_predict_zero_before_norm() {
        let caps = CapsuleField::new(Tensor::zeros(&[2, 3, 4, 3, 3])).unwrap();
        let p = PredictionParams {
            weights: Tensor::full(&[2 * 2 * 2, 3, 4, 3, 3], 0.1),
            bias: Tensor::zeros(&[8]),
            out_types: 2,
            out_dim: 2,
            norm: None,
        };
        let pred = predict(&caps, &p, Boundary::ZeroPad).unwrap();
        assert_eq!(pred.values().shape(), &[2, 2, 2, 4, 3, 3]);
        assert_eq!(pred.values().max_abs(), 0.0);
    }
}
