//! Identifiers for the tensors observed during a forward pass.

use std::fmt;

/// What a site holds within its layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SiteKind {
    /// Layer input activations.
    Input,
    Weights,
    Bias,
    /// Conv output (after ReLU when enabled); pre-squash conv output for
    /// primary capsules.
    Output,
    /// Squashed capsule vectors. For capsule layers, one per routing iteration.
    V,
    /// Prediction vectors.
    UHat,
    /// Weighted sums before squash, one per routing iteration.
    S,
    /// Prediction/output dot products, one per non-final iteration.
    Agreement,
    /// Routing logits after each agreement update.
    Logits,
}

impl SiteKind {
    pub fn name(self) -> &'static str {
        match self {
            SiteKind::Input => "input",
            SiteKind::Weights => "weights",
            SiteKind::Bias => "bias",
            SiteKind::Output => "output",
            SiteKind::V => "v",
            SiteKind::UHat => "u_hat",
            SiteKind::S => "s",
            SiteKind::Agreement => "agreement",
            SiteKind::Logits => "b_logits",
        }
    }

    /// Whether the site is measured from data rather than from parameters.
    pub fn is_activation(self) -> bool {
        !matches!(self, SiteKind::Weights | SiteKind::Bias)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SiteId {
    pub layer: usize,
    pub kind: SiteKind,
    /// Routing iteration for per-iteration capsule sites.
    pub iter: Option<usize>,
}

impl SiteId {
    pub fn new(layer: usize, kind: SiteKind) -> Self {
        SiteId {
            layer,
            kind,
            iter: None,
        }
    }

    pub fn at_iter(layer: usize, kind: SiteKind, iter: usize) -> Self {
        SiteId {
            layer,
            kind,
            iter: Some(iter),
        }
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer{}.{}", self.layer, self.kind.name())?;
        if let Some(r) = self.iter {
            write!(f, "[{r}]")?;
        }
        Ok(())
    }
}

/// Observer of float activations.
pub trait Probe {
    fn observe(&mut self, site: SiteId, values: &[f32]);
}

/// A probe that records nothing.
pub struct NoProbe;

impl Probe for NoProbe {
    fn observe(&mut self, _: SiteId, _: &[f32]) {}
}

/// Records every observed tensor.
#[derive(Debug, Default, Clone)]
pub struct RecordingProbe {
    pub sites: Vec<(SiteId, Vec<f32>)>,
}

impl Probe for RecordingProbe {
    fn observe(&mut self, site: SiteId, values: &[f32]) {
        self.sites.push((site, values.to_vec()));
    }
}

impl RecordingProbe {
    pub fn get(&self, site: SiteId) -> Option<&[f32]> {
        self.sites.iter().find(|(s, _)| *s == site).map(|(_, v)| v.as_slice())
    }
}
