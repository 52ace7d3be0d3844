use serde::{Deserialize, Serialize};

use crate::capsule::ICRConfig;
use crate::error::{Error, Result};
use crate::group::Boundary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapsSpec {
    pub types: usize,
    pub dim: usize,
}

impl CapsSpec {
    pub const fn new(types: usize, dim: usize) -> Self {
        Self { types, dim }
    }
}

/// Architecture of the full model: lifting stem, seven residual group
/// blocks, primary capsules, hidden capsule layers, class capsules and the
/// logit projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_channels: usize,
    /// Output channels of the seven residual blocks (per rotation).
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    /// Spatial kernel size of every correlation except block shortcuts.
    pub kernel: usize,
    pub primary: CapsSpec,
    pub hidden: Vec<CapsSpec>,
    pub classes: usize,
    pub class_dim: usize,
    /// One entry per capsule layer: `hidden.len() + 1` (the last is the
    /// class layer).
    pub routing: Vec<ICRConfig>,
    pub boundary: Boundary,
    /// Run every block at stride 1 while keeping the parameter layout
    /// implied by `strides`.
    pub unit_strides: bool,
    pub desk_scale: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(4)
    }
}

const BLOCKS: usize = 7;

impl ModelConfig {
    /// Small model for CPU training on 16×16 images.
    pub fn desk(classes: usize) -> Self {
        let routing = ICRConfig {
            k: 3,
            num_iter: 2,
            ..ICRConfig::default()
        };
        Self {
            image_channels: 1,
            widths: vec![8, 8, 16, 16, 16, 32, 32],
            strides: vec![1, 1, 2, 1, 2, 1, 1],
            kernel: 3,
            primary: CapsSpec::new(8, 8),
            hidden: vec![CapsSpec::new(8, 8)],
            classes,
            class_dim: 8,
            routing: vec![routing; 2],
            boundary: Boundary::ZeroPad,
            unit_strides: false,
            desk_scale: true,
        }
    }

    /// Narrower blocks and 4-dimensional capsules; about a fifth of the
    /// desk model's parameters and a third of its step time.
    pub fn light(classes: usize) -> Self {
        Self {
            widths: vec![4, 4, 8, 8, 8, 8, 8],
            primary: CapsSpec::new(8, 4),
            hidden: vec![CapsSpec::new(8, 4)],
            class_dim: 4,
            ..Self::desk(classes)
        }
    }

    /// Full-size model: 32 capsule types of dimension 16 in the primary and
    /// three hidden capsule layers. `k = 10` suits 10-class data, `k = 5`
    /// 100-class data; both with two iterations.
    pub fn full(image_channels: usize, classes: usize) -> Self {
        let k = if classes > 10 { 5 } else { 10 };
        let routing = ICRConfig {
            k,
            num_iter: 2,
            ..ICRConfig::default()
        };
        Self {
            image_channels,
            widths: vec![16, 16, 32, 32, 32, 64, 64],
            strides: vec![1, 1, 2, 1, 2, 1, 1],
            kernel: 3,
            primary: CapsSpec::new(32, 16),
            hidden: vec![CapsSpec::new(32, 16); 3],
            classes,
            class_dim: 16,
            routing: vec![routing; 4],
            boundary: Boundary::ZeroPad,
            unit_strides: false,
            desk_scale: false,
        }
    }

    /// Exactly equivariant variant: stride 1, circular boundary, no
    /// prediction layer norm. Parameter shapes are unchanged.
    pub fn audit_mode(&self) -> Self {
        let mut c = self.clone();
        c.unit_strides = true;
        c.boundary = Boundary::Circular;
        for r in &mut c.routing {
            r.use_pred_layernorm = false;
        }
        c
    }

    /// Capsule layers after the primary layer, including the class layer.
    pub fn capsule_layers(&self) -> Vec<CapsSpec> {
        let mut v = self.hidden.clone();
        v.push(CapsSpec::new(self.classes, self.class_dim));
        v
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.widths.len() != BLOCKS || self.strides.len() != BLOCKS {
            return bad(format!(
                "need {BLOCKS} block widths and strides, got {} and {}",
                self.widths.len(),
                self.strides.len()
            ));
        }
        if self.image_channels == 0 || self.widths.contains(&0) || self.strides.contains(&0) {
            return bad("channels, widths and strides must be positive".into());
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return bad(format!("kernel must be odd, got {}", self.kernel));
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        let layers = self.capsule_layers();
        if layers.iter().chain([&self.primary]).any(|c| c.types == 0 || c.dim == 0) {
            return bad("capsule types and dims must be positive".into());
        }
        if self.routing.len() != layers.len() {
            return bad(format!(
                "{} routing configs for {} capsule layers",
                self.routing.len(),
                layers.len()
            ));
        }
        let mut n_in = self.primary.types;
        for (spec, r) in layers.iter().zip(&self.routing) {
            r.validate(n_in)?;
            if !(r.epsilon > 0.0) {
                return bad(format!("routing epsilon must be positive, got {}", r.epsilon));
            }
            n_in = spec.types;
        }
        Ok(())
    }

    /// Strides the forward pass actually uses.
    pub fn effective_strides(&self) -> Vec<usize> {
        if self.unit_strides {
            vec![1; self.strides.len()]
        } else {
            self.strides.clone()
        }
    }

    /// Spatial extent after the residual blocks for a square input.
    pub fn capsule_extent(&self, input: usize) -> Result<usize> {
        let mut n = input;
        for s in self.effective_strides() {
            if n == 0 {
                break;
            }
            n = (n - 1) / s + 1;
        }
        if input == 0 {
            return Err(Error::Config("empty input image".into()));
        }
        Ok(n)
    }
}

/// Optimiser and schedule settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Fraction of all steps spent warming up linearly.
    pub warmup_frac: f64,
    /// Learning rate at step 0, as a fraction of the peak.
    pub initial_lr_frac: f64,
    /// Learning rate at the last step, as a fraction of the peak.
    pub final_lr_frac: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            peak_lr: 3e-3,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            warmup_frac: 0.3,
            initial_lr_frac: 1.0 / 25.0,
            final_lr_frac: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// 150 epochs with the desk-scale optimiser defaults.
    pub fn full() -> Self {
        Self {
            epochs: 150,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size > 0
            && self.peak_lr >= 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0
            && (0.0..=1.0).contains(&self.warmup_frac)
            && self.initial_lr_frac >= 0.0
            && self.final_lr_frac >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training config {self:?}")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::desk(4).validate().unwrap();
        ModelConfig::full(3, 10).validate().unwrap();
        ModelConfig::full(3, 100).validate().unwrap();
        assert_eq!(ModelConfig::full(3, 100).routing[0].k, 5);
        assert_eq!(TrainConfig::full().epochs, 150);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = ModelConfig::desk(4);
        c.widths.pop();
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk(4);
        c.routing[0].k = 8;
        assert!(matches!(c.validate(), Err(Error::KOutOfRange { .. })));
        let mut c = ModelConfig::desk(4);
        c.routing.pop();
        assert!(c.validate().is_err());
    }

    #[test]
    fn extents() {
        let c = ModelConfig::desk(4);
        assert_eq!(c.capsule_extent(16).unwrap(), 4);
        assert_eq!(c.capsule_extent(15).unwrap(), 4);
        assert_eq!(c.audit_mode().capsule_extent(16).unwrap(), 16);
    }
}
