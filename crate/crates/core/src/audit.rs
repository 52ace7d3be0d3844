//! End-to-end equivariance audit: every traced layer of `forward(act(g) x)`
//! is compared against `act(g)` applied to the same layer of `forward(x)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::group::{act_group, act_planar, Boundary, P4Element};
use crate::network::Model;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerError {
    pub layer: String,
    /// Worst `max|out(g·x) − g·out(x)| / max|g·out(x)|` over all elements.
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub elements: usize,
    pub layers: Vec<LayerError>,
    /// Same measure for the routing weights of each capsule layer.
    pub routing: Vec<LayerError>,
}

impl AuditReport {
    pub fn max_error(&self) -> f64 {
        self.layers
            .iter()
            .chain(&self.routing)
            .map(|l| l.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_error() < tol
    }
}

/// All four rotations, each composed with `translations` random shifts in
/// `[-max_shift, max_shift]²`.
pub fn audit_elements(translations: usize, max_shift: i64, seed: u64) -> Vec<P4Element> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(4 * translations);
    for r in 0..4 {
        for _ in 0..translations {
            let t = (
                rng.gen_range(-max_shift..=max_shift),
                rng.gen_range(-max_shift..=max_shift),
            );
            out.push(P4Element::new(r, t));
        }
    }
    out
}

/// Audits `model` on images `x` for every element of `elements`. Images
/// are transformed with the model's boundary. Logits are compared for
/// invariance rather than equivariance.
pub fn audit_model(model: &Model, x: &Tensor, elements: &[P4Element]) -> Result<AuditReport> {
    if elements.is_empty() {
        return Err(Error::Config("no group elements to audit".into()));
    }
    let boundary = model.config().boundary;
    let base = model.forward_traced(x)?;
    let mut layers: Vec<LayerError> = base
        .layers
        .iter()
        .map(|(n, _)| LayerError {
            layer: n.clone(),
            max_rel_error: 0.0,
        })
        .collect();
    let mut routing: Vec<LayerError> = layers
        .iter()
        .filter(|l| l.layer.ends_with(".pred"))
        .map(|l| LayerError {
            layer: l.layer.trim_end_matches(".pred").to_string(),
            max_rel_error: 0.0,
        })
        .collect();
    for g in elements {
        let gx = act_planar(g, x, boundary)?;
        let moved = model.forward_traced(&gx)?;
        for ((name, reference), (entry, (_, got))) in base.layers.iter().zip(layers.iter_mut().zip(&moved.layers)) {
            let expect = if name == "logits" {
                reference.clone()
            } else {
                act_group(g, reference, boundary)?
            };
            entry.max_rel_error = entry.max_rel_error.max(got.rel_error(&expect));
        }
        for ((r0, r1), entry) in base.routing.iter().zip(&moved.routing).zip(routing.iter_mut()) {
            let expect = act_group(g, &r0.c, boundary)?;
            entry.max_rel_error = entry.max_rel_error.max(r1.c.rel_error(&expect));
        }
    }
    Ok(AuditReport {
        elements: elements.len(),
        layers,
        routing,
    })
}

/// Largest `|forward(rot90^k x) − forward(x)|` over `k ∈ {1,2,3}`, and whether
/// every argmax agrees.
pub fn rotation_invariance(model: &Model, x: &Tensor) -> Result<(f64, bool)> {
    let base = model.forward(x)?;
    let argmax = |t: &Tensor| -> Vec<usize> {
        let c = t.shape()[1];
        t.data()
            .chunks_exact(c)
            .map(|row| {
                let mut best = 0;
                for (i, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    };
    let a0 = argmax(&base);
    let mut worst: f64 = 0.0;
    let mut same = true;
    for r in 1..4 {
        let xr = act_planar(&P4Element::rotation(r), x, Boundary::Circular)?;
        let out = model.forward(&xr)?;
        worst = worst.max(out.max_abs_diff(&base));
        same &= argmax(&out) == a0;
    }
    Ok((worst, same))
}
