//! Test-side oracles, written independently of the library's fast paths.
#![allow(dead_code)]

use icrcaps::group::{Boundary, P4Element};
use icrcaps::tensor::{Tape, Tensor, Var};
use icrcaps::Result;
use rand::Rng;

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Default, Clone, Copy)]
pub struct GradCheck {
    /// Coordinates compared against the analytic gradient.
    pub compared: usize,
    /// Coordinates where the loss is not smooth across the step: the central
    /// difference at `h` disagrees with one at `h / 10`. Relu and max kinks,
    /// and the hard neighbour selection in routing, make the loss piecewise
    /// smooth; such coordinates are skipped and resampled.
    pub nonsmooth: usize,
    /// Inputs with no smooth coordinate at the requested step that were
    /// checked at a smaller one instead.
    pub reduced: usize,
    /// Inputs for which no smooth coordinate was found at any step.
    pub starved: usize,
    pub max_rel_error: f64,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol && self.compared > 0 && self.starved == 0
    }
}

/// Smallest step tried for an input whose every sampled coordinate has a
/// discontinuity within the requested step.
const MIN_STEP: f64 = 1e-5;

/// Central differences of a scalar function against `analytic`: up to
/// `samples` smooth coordinates of each input are compared at `step`. An
/// input with none is retried at `step / 10`, down to `MIN_STEP`.
pub fn compare_fd(
    mut f: impl FnMut(&[Tensor]) -> f64,
    inputs: &[Tensor],
    analytic: &[Tensor],
    samples: usize,
    step: f64,
    tol: f64,
    rng: &mut impl Rng,
) -> GradCheck {
    let mut out = GradCheck::default();
    let mut xs: Vec<Tensor> = inputs.to_vec();
    for (t, g) in analytic.iter().enumerate() {
        let n = xs[t].numel();
        let exhaustive = n <= samples;
        let attempts = if exhaustive { n } else { 10 * samples };
        let mut h = step;
        let mut compared = 0;
        loop {
            for a in 0..attempts {
                if compared == samples {
                    break;
                }
                let c = if exhaustive { a } else { rng.gen_range(0..n) };
                let orig = xs[t].data()[c];
                let mut central = |h: f64| {
                    xs[t].data_mut()[c] = orig + h;
                    let up = f(&xs);
                    xs[t].data_mut()[c] = orig - h;
                    let down = f(&xs);
                    xs[t].data_mut()[c] = orig;
                    (up - down) / (2.0 * h)
                };
                let num = central(h);
                if rel(num, central(h / 10.0)) > tol {
                    out.nonsmooth += 1;
                    continue;
                }
                compared += 1;
                out.max_rel_error = out.max_rel_error.max(rel(num, g.data()[c]));
            }
            if compared > 0 || h / 10.0 < MIN_STEP * 0.5 {
                break;
            }
            h /= 10.0;
        }
        out.reduced += usize::from(compared > 0 && h < step);
        out.compared += compared;
        out.starved += usize::from(compared == 0);
    }
    out
}

/// Per-op tolerance; the end-to-end model is held to `MODEL_TOL`.
pub const OP_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;

/// Builds `op` on a fresh tape with all `inputs` as parameters, reduces the
/// output with a fixed random weighting and checks every input gradient.
pub fn gradcheck(
    op: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
    samples: usize,
    rng: &mut impl Rng,
) -> GradCheck {
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let y = op(&mut tape, &vars).unwrap();
        tape.shape(y).to_vec()
    };
    let weights = rand_tensor(rng, &out_shape);
    let scalar = |tape: &mut Tape, vars: &[Var]| -> Var {
        let y = op(tape, vars).unwrap();
        let w = tape.constant(weights.clone());
        let p = tape.mul(y, w).unwrap();
        tape.sum_all(p).unwrap()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = scalar(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get_or_zeros(*v, t.shape()))
        .collect();
    let f = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let l = scalar(&mut tape, &vars);
        tape.value(l).item()
    };
    compare_fd(f, inputs, &analytic, samples, 1e-3, OP_TOL, rng)
}

/// Reads a zero-padded or circular grid.
fn read(data: &[f64], offset: usize, h: usize, w: usize, y: i64, x: i64, boundary: Boundary) -> f64 {
    let (hi, wi) = (h as i64, w as i64);
    let (y, x) = match boundary {
        Boundary::Circular => (y.rem_euclid(hi), x.rem_euclid(wi)),
        Boundary::ZeroPad => {
            if y < 0 || x < 0 || y >= hi || x >= wi {
                return 0.0;
            }
            (y, x)
        }
    };
    data[offset + (y * wi + x) as usize]
}

/// Direct group correlation `[f ⋆ Ψ](g) = Σ_h Σ_c f_c(h) Ψ_c(g⁻¹h)` on one
/// sample: `f (cin, 4, H, W)`, `psi (cout, cin, 4, k, k)` with odd `k`.
/// Output position `o` is centred at input pixel `o·stride − padding + k/2`;
/// `h` ranges over the rotations and the window of that centre.
pub fn group_correlate_oracle(
    f: &Tensor,
    psi: &Tensor,
    bias: &[f64],
    stride: usize,
    padding: usize,
    boundary: Boundary,
) -> Tensor {
    let (cin, h, w) = (f.shape()[0], f.shape()[2], f.shape()[3]);
    let (cout, k) = (psi.shape()[0], psi.shape()[3]);
    let half = (k / 2) as i64;
    let ho = (h + 2 * padding - k) / stride + 1;
    let wo = (w + 2 * padding - k) / stride + 1;
    let mut out = Tensor::zeros(&[cout, 4, ho, wo]);
    for o in 0..cout {
        for r in 0..4u8 {
            for oy in 0..ho {
                for ox in 0..wo {
                    let cy = (oy * stride) as i64 - padding as i64 + half;
                    let cx = (ox * stride) as i64 - padding as i64 + half;
                    let g = P4Element::new(r, (cy, cx));
                    let ginv = g.inverse();
                    let mut acc = bias[o];
                    for c in 0..cin {
                        for s in 0..4u8 {
                            // h = (s, y) over the window around the centre.
                            for y in cy - half..=cy + half {
                                for x in cx - half..=cx + half {
                                    let rel = ginv.compose(&P4Element::new(s, (y, x)));
                                    let (u, v) = rel.t;
                                    if u.abs() > half || v.abs() > half {
                                        continue;
                                    }
                                    let fv = read(f.data(), (c * 4 + s as usize) * h * w, h, w, y, x, boundary);
                                    let pv = psi.get(&[o, c, rel.r as usize, (u + half) as usize, (v + half) as usize]);
                                    acc += fv * pv;
                                }
                            }
                        }
                    }
                    out.set(&[o, r as usize, oy, ox], acc);
                }
            }
        }
    }
    out
}

/// Direct lifting correlation `[f ⋆ ψ](g) = Σ_y Σ_c f_c(y) ψ_c(g⁻¹y)`:
/// `f (cin, H, W)`, `psi (cout, cin, k, k)`.
pub fn lift_correlate_oracle(
    f: &Tensor,
    psi: &Tensor,
    bias: &[f64],
    stride: usize,
    padding: usize,
    boundary: Boundary,
) -> Tensor {
    let (cin, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let (cout, k) = (psi.shape()[0], psi.shape()[3]);
    let half = (k / 2) as i64;
    let ho = (h + 2 * padding - k) / stride + 1;
    let wo = (w + 2 * padding - k) / stride + 1;
    let mut out = Tensor::zeros(&[cout, 4, ho, wo]);
    for o in 0..cout {
        for r in 0..4u8 {
            for oy in 0..ho {
                for ox in 0..wo {
                    let cy = (oy * stride) as i64 - padding as i64 + half;
                    let cx = (ox * stride) as i64 - padding as i64 + half;
                    let ginv = P4Element::new(r, (cy, cx)).inverse();
                    let mut acc = bias[o];
                    for c in 0..cin {
                        for y in cy - half..=cy + half {
                            for x in cx - half..=cx + half {
                                let (u, v) = ginv.apply((y, x));
                                if u.abs() > half || v.abs() > half {
                                    continue;
                                }
                                let fv = read(f.data(), c * h * w, h, w, y, x, boundary);
                                acc += fv * psi.get(&[o, c, (u + half) as usize, (v + half) as usize]);
                            }
                        }
                    }
                    out.set(&[o, r as usize, oy, ox], acc);
                }
            }
        }
    }
    out
}

/// Literal routing procedure for one output capsule at one group position:
/// `preds[i]` is the prediction of input type `i`. Returns
/// `(A, DCen before iterating, KN, c)`.
pub fn icr_literal(
    preds: &[Vec<f64>],
    k: usize,
    num_iter: usize,
    eps: f64,
) -> (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<usize>>, Vec<f64>) {
    let n = preds.len();
    let norm = |v: &Vec<f64>| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    // Step 1: cosine affinities.
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        for m in 0..n {
            let dot: f64 = preds[i].iter().zip(&preds[m]).map(|(x, y)| x * y).sum();
            a[i][m] = dot / (norm(&preds[i]).max(eps) * norm(&preds[m]).max(eps));
        }
    }
    // Step 2: degree centrality, self included.
    let dcen0: Vec<f64> = a.iter().map(|row| row.iter().sum()).collect();
    // Step 3: k nearest neighbours by affinity, excluding self; stable sort
    // keeps the lower index first among equal affinities.
    let kn: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut others: Vec<usize> = (0..n).filter(|&m| m != i).collect();
            others.sort_by(|&x, &y| a[i][y].partial_cmp(&a[i][x]).unwrap());
            others.truncate(k);
            others
        })
        .collect();
    // Step 4: synchronous neighbour means.
    let mut dcen = dcen0.clone();
    for _ in 0..num_iter {
        dcen = kn
            .iter()
            .map(|nb| nb.iter().map(|&m| dcen[m]).sum::<f64>() / nb.len() as f64)
            .collect();
    }
    // Step 5: softmax over input types.
    let mx = dcen.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = dcen.iter().map(|d| (d - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    (a, dcen0, kn, e.iter().map(|v| v / z).collect())
}

fn positive(t: &Tensor) -> Tensor {
    t.map(|v| v.abs() + 0.5)
}

/// Finite-difference checks of every differentiable tape operation on small
/// random inputs. Returns one named result per operation.
pub fn op_gradchecks(rng: &mut rand_chacha::ChaCha8Rng) -> Vec<(&'static str, GradCheck)> {
    use icrcaps::capsule::{predict_on, primary_capsules_on, CapsLayerVars, ICRConfig, PrimaryVars};
    use icrcaps::equivariant::{residual_block_on, BlockVars, ConvOptions};
    use icrcaps::tensor::{BinaryOp, ReduceOp, UnaryOp};

    let s = 16;
    let mut out = Vec::new();
    let mut check = |name: &'static str,
                     inputs: Vec<Tensor>,
                     op: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
                     rng: &mut rand_chacha::ChaCha8Rng| {
        out.push((name, gradcheck(op, &inputs, s, rng)));
    };
    let r = |rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize]| rand_tensor(rng, shape);

    for (name, op) in [
        ("add", BinaryOp::Add),
        ("sub", BinaryOp::Sub),
        ("mul", BinaryOp::Mul),
        ("div", BinaryOp::Div),
    ] {
        let a = r(rng, &[2, 3]);
        let b = positive(&r(rng, &[2, 3]));
        check(name, vec![a, b], &move |t, v| t.binary(op, v[0], v[1]), rng);
    }
    for (name, op) in [
        ("relu", UnaryOp::Relu),
        ("neg", UnaryOp::Neg),
        ("exp", UnaryOp::Exp),
        ("log", UnaryOp::Log),
        ("square", UnaryOp::Square),
    ] {
        let a = positive(&r(rng, &[3, 2]));
        let a = if op == UnaryOp::Relu { a.map(|v| v - 1.0) } else { a };
        check(name, vec![a], &move |t, v| t.unary(op, v[0]), rng);
    }
    check("scale", vec![r(rng, &[4])], &|t, v| t.scale(v[0], -2.5), rng);
    check("reshape", vec![r(rng, &[2, 6])], &|t, v| t.reshape(v[0], &[3, 4]), rng);
    for (name, op) in [
        ("reduce_sum", ReduceOp::Sum),
        ("reduce_mean", ReduceOp::Mean),
        ("reduce_max", ReduceOp::Max),
    ] {
        check(
            name,
            vec![r(rng, &[2, 3, 4])],
            &move |t, v| t.reduce(op, v[0], &[0, 2]),
            rng,
        );
    }
    check(
        "cross_entropy",
        vec![r(rng, &[3, 4])],
        &|t, v| t.cross_entropy(v[0], &[0, 3, 1]),
        rng,
    );
    check(
        "correlate",
        vec![r(rng, &[2, 4, 6, 6]), r(rng, &[4, 2, 3, 3]), r(rng, &[4])],
        &|t, v| {
            let o = ConvOptions::same(3, Boundary::ZeroPad).with_stride(2).with_groups(2);
            t.correlate(v[0], v[1], Some(v[2]), o)
        },
        rng,
    );
    check(
        "correlate_circular",
        vec![r(rng, &[1, 2, 5, 5]), r(rng, &[3, 2, 3, 3])],
        &|t, v| t.correlate(v[0], v[1], None, ConvOptions::same(3, Boundary::Circular)),
        rng,
    );
    check(
        "lift_correlate",
        vec![r(rng, &[1, 2, 5, 5]), r(rng, &[3, 2, 3, 3]), r(rng, &[3])],
        &|t, v| t.lift_correlate(v[0], v[1], Some(v[2]), ConvOptions::same(3, Boundary::ZeroPad)),
        rng,
    );
    check(
        "group_correlate",
        vec![r(rng, &[1, 2, 4, 5, 5]), r(rng, &[2, 2, 4, 3, 3]), r(rng, &[2])],
        &|t, v| {
            t.group_correlate(
                v[0],
                v[1],
                Some(v[2]),
                ConvOptions::same(3, Boundary::Circular).with_stride(2),
            )
        },
        rng,
    );
    check(
        "layer_norm",
        vec![r(rng, &[2, 3, 4, 2]), r(rng, &[3]), r(rng, &[3])],
        &|t, v| t.layer_norm(v[0], v[1], v[2], &[1, 2, 3], 1e-5),
        rng,
    );
    check(
        "type_linear",
        vec![r(rng, &[2, 3, 2, 4, 2, 2]), r(rng, &[3, 2]), r(rng, &[3])],
        &|t, v| t.type_linear(v[0], v[1], v[2]),
        rng,
    );
    check(
        "project_logits",
        vec![r(rng, &[2, 3, 2, 4, 2, 2]), r(rng, &[3, 2]), r(rng, &[3])],
        &|t, v| t.project_logits(v[0], v[1], v[2]),
        rng,
    );
    check("squash", vec![r(rng, &[2, 3, 4])], &|t, v| t.squash(v[0], 1), rng);
    for (name, k, it) in [("icr_route", 2, 2), ("icr_route_no_iter", 1, 0)] {
        let cfg = ICRConfig {
            k,
            num_iter: it,
            ..ICRConfig::default()
        };
        check(
            name,
            vec![r(rng, &[2, 4, 2, 3, 4, 2, 2])],
            &move |t, v| t.icr_route(v[0], &cfg).map(|(y, _)| y),
            rng,
        );
    }
    check(
        "residual_block",
        vec![
            r(rng, &[1, 2, 4, 5, 5]),
            r(rng, &[3, 2, 4, 3, 3]),
            r(rng, &[3]),
            r(rng, &[3, 3, 4, 3, 3]),
            r(rng, &[3]),
            r(rng, &[3, 2, 4, 1, 1]),
            r(rng, &[3]),
        ],
        &|t, v| {
            let p = BlockVars {
                w1: v[1],
                b1: v[2],
                w2: v[3],
                b2: v[4],
                shortcut: Some((v[5], v[6])),
            };
            residual_block_on(t, v[0], &p, 2, Boundary::ZeroPad)
        },
        rng,
    );
    check(
        "primary_capsules",
        vec![
            r(rng, &[1, 2, 4, 4, 4]),
            r(rng, &[6, 2, 4, 3, 3]),
            r(rng, &[6]),
            r(rng, &[3, 2]),
            r(rng, &[3, 2]),
        ],
        &|t, v| {
            let p = PrimaryVars {
                w: v[1],
                b: v[2],
                gain: v[3],
                beta: v[4],
            };
            primary_capsules_on(t, v[0], &p, 3, 2, Boundary::ZeroPad)
        },
        rng,
    );
    check(
        "predict",
        vec![
            r(rng, &[1, 2, 2, 4, 3, 3]),
            r(rng, &[2 * 3 * 2, 2, 4, 3, 3]),
            r(rng, &[12]),
            r(rng, &[2, 3, 2]),
            r(rng, &[2, 3, 2]),
        ],
        &|t, v| {
            let p = CapsLayerVars {
                w: v[1],
                b: v[2],
                norm: Some((v[3], v[4])),
            };
            predict_on(t, v[0], &p, 3, 2, Boundary::Circular)
        },
        rng,
    );
    out
}

/// End-to-end check of the mean cross-entropy against every parameter of
/// `model`, sampling `per_param` coordinates of each parameter tensor.
pub fn model_gradcheck(
    model: &icrcaps::network::Model,
    x: &Tensor,
    labels: &[usize],
    per_param: usize,
    rng: &mut impl Rng,
) -> GradCheck {
    let g = model.gradients(x, labels).unwrap();
    let mut probe = model.clone();
    let f = |ps: &[Tensor]| {
        probe.params_mut().clone_from_slice(ps);
        probe.loss(x, labels).unwrap()
    };
    compare_fd(f, model.params(), &g.grads, per_param, 1e-3, MODEL_TOL, rng)
}
