//! Architecture specs for the four CNN families, analytic FLOP and parameter
//! counts, model construction and heads.

mod count;
mod model;

use alloc::string::{String, ToString};
use core::fmt;
use core::str::FromStr;

pub use count::{dense_param_count, flops, param_count, ParamBreakdown};
pub use model::{loss, ForwardPass, ModelInstance, ParamKind, ParamUse};

/// Similarity scale applied to cosine scores before the cross-entropy term of
/// the cosine-plus-xe head.
pub const COSINE_XE_SCALE: f64 = 16.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    ResNet,
    Vgg,
    Wrn,
    DenseNetBc,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::ResNet, Family::Vgg, Family::Wrn, Family::DenseNetBc];

    pub fn name(self) -> &'static str {
        match self {
            Family::ResNet => "resnet",
            Family::Vgg => "vgg",
            Family::Wrn => "wrn",
            Family::DenseNetBc => "densenet-bc",
        }
    }

    pub fn min_depth(self) -> usize {
        match self {
            Family::ResNet => 8,
            Family::Vgg => 5,
            Family::Wrn => 10,
            Family::DenseNetBc => 16,
        }
    }

    /// Whether `depth` is on this family's validity lattice.
    pub fn depth_is_valid(self, depth: usize) -> bool {
        match self {
            Family::Vgg => depth == 5 || depth == 9,
            _ => depth >= self.min_depth() && depth % 6 == self.min_depth() % 6,
        }
    }

    /// Valid depths in increasing order, up to and including `max`.
    pub fn depths(self, max: usize) -> impl Iterator<Item = usize> {
        (self.min_depth()..=max).filter(move |&d| self.depth_is_valid(d))
    }

    /// Dropout used by the reference recipes.
    pub fn default_dropout(self) -> f64 {
        match self {
            Family::Vgg => 0.4,
            Family::Wrn => 0.3,
            _ => 0.0,
        }
    }

    /// Number of 2x downsamplings that must fit in the input.
    fn reductions(self, depth: usize) -> u32 {
        match self {
            Family::ResNet | Family::Wrn => 0,
            Family::DenseNetBc => 2,
            Family::Vgg if depth == 5 => 4,
            Family::Vgg => 5,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| crate::Error::InvalidArgument(alloc::format!("unknown family `{}`", s)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Head {
    SoftmaxXe,
    Cosine,
    CosinePlusXe,
}

impl Head {
    pub const ALL: [Head; 3] = [Head::SoftmaxXe, Head::Cosine, Head::CosinePlusXe];

    pub fn name(self) -> &'static str {
        match self {
            Head::SoftmaxXe => "softmax-xe",
            Head::Cosine => "cosine",
            Head::CosinePlusXe => "cosine-plus-xe",
        }
    }

    pub fn is_cosine(self) -> bool {
        self != Head::SoftmaxXe
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Head {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        Head::ALL
            .into_iter()
            .find(|h| h.name() == s)
            .ok_or_else(|| crate::Error::InvalidArgument(alloc::format!("unknown head `{}`", s)))
    }
}

/// A point in the design space: family, depth and width parameter.
///
/// `width` is the base filter count for ResNet and VGG, the widen factor for
/// WRN and the growth rate for DenseNet-BC.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchitectureSpec {
    pub family: Family,
    pub depth: usize,
    pub width: usize,
    pub num_classes: usize,
    /// `[H, W, C]`.
    pub input: [usize; 3],
    pub head: Head,
    pub dropout: f64,
}

impl ArchitectureSpec {
    /// A spec for 32x32 RGB input with the softmax head and the family's
    /// default dropout.
    pub fn new(family: Family, depth: usize, width: usize, num_classes: usize) -> Self {
        ArchitectureSpec {
            family,
            depth,
            width,
            num_classes,
            input: [32, 32, 3],
            head: Head::SoftmaxXe,
            dropout: family.default_dropout(),
        }
    }

    pub fn resnet(depth: usize, width: usize, num_classes: usize) -> Self {
        Self::new(Family::ResNet, depth, width, num_classes)
    }

    pub fn vgg(depth: usize, width: usize, num_classes: usize) -> Self {
        Self::new(Family::Vgg, depth, width, num_classes)
    }

    pub fn wrn(depth: usize, widen: usize, num_classes: usize) -> Self {
        Self::new(Family::Wrn, depth, widen, num_classes)
    }

    pub fn densenet_bc(depth: usize, growth: usize, num_classes: usize) -> Self {
        Self::new(Family::DenseNetBc, depth, growth, num_classes)
    }

    pub fn with_input(mut self, h: usize, w: usize, c: usize) -> Self {
        self.input = [h, w, c];
        self
    }

    pub fn with_head(mut self, head: Head) -> Self {
        self.head = head;
        self
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout = rate;
        self
    }

    pub fn with_depth(&self, depth: usize) -> Self {
        ArchitectureSpec { depth, ..self.clone() }
    }

    pub fn with_width(&self, width: usize) -> Self {
        ArchitectureSpec { width, ..self.clone() }
    }

    /// Short name such as `resnet-8-16`.
    pub fn name(&self) -> String {
        self.to_string()
    }

    pub fn validate(&self) -> Result<(), SpecViolation> {
        let f = self.family;
        match f {
            Family::Vgg if !f.depth_is_valid(self.depth) => {
                return Err(SpecViolation::VggDepth { depth: self.depth });
            }
            Family::Vgg => {}
            _ => {
                let residue = f.min_depth() % 6;
                if self.depth % 6 != residue {
                    return Err(SpecViolation::DepthResidue {
                        family: f,
                        residue,
                        depth: self.depth,
                    });
                }
                if self.depth < f.min_depth() {
                    return Err(SpecViolation::DepthTooSmall {
                        family: f,
                        minimum: f.min_depth(),
                        depth: self.depth,
                    });
                }
            }
        }
        if self.width < 1 {
            return Err(SpecViolation::Width);
        }
        if self.num_classes < 2 {
            return Err(SpecViolation::Classes {
                classes: self.num_classes,
            });
        }
        let min_side = 1usize << f.reductions(self.depth);
        let [h, w, c] = self.input;
        if h < min_side || w < min_side || c < 1 {
            return Err(SpecViolation::Input {
                minimum: min_side,
                input: self.input,
            });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(SpecViolation::Dropout);
        }
        Ok(())
    }

    /// Residual or bottleneck blocks per stage, for the three-stage families.
    pub(crate) fn blocks_per_stage(&self) -> usize {
        match self.family {
            Family::ResNet => (self.depth - 2) / 6,
            Family::Wrn | Family::DenseNetBc => (self.depth - 4) / 6,
            Family::Vgg => 0,
        }
    }
}

impl fmt::Display for ArchitectureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}-{}", self.family, self.depth, self.width)
    }
}

/// The first violated architecture constraint.
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum SpecViolation {
    #[error("{family}: depth ≢ {residue} mod 6 (got {depth})")]
    DepthResidue {
        family: Family,
        residue: usize,
        depth: usize,
    },
    #[error("{family}: depth below {minimum} (got {depth})")]
    DepthTooSmall {
        family: Family,
        minimum: usize,
        depth: usize,
    },
    #[error("vgg: depth ∉ {{5, 9}} (got {depth})")]
    VggDepth { depth: usize },
    #[error("width must be at least 1")]
    Width,
    #[error("at least 2 classes required (got {classes})")]
    Classes { classes: usize },
    #[error("input {input:?} smaller than the {minimum}x{minimum} minimum")]
    Input { minimum: usize, input: [usize; 3] },
    #[error("dropout rate outside [0, 1)")]
    Dropout,
}

/// Multiply-accumulate count of one forward pass for a single sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct FlopCount {
    pub macs: u64,
}

impl FlopCount {
    pub fn from_macs(macs: u64) -> Self {
        FlopCount { macs }
    }

    /// Two FLOPs per multiply-accumulate.
    pub fn flops(&self) -> u64 {
        2 * self.macs
    }

    pub fn scaled(&self, m: u64) -> Self {
        FlopCount { macs: self.macs * m }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;

    #[test]
    fn named_configurations_validate() {
        let ok = [
            ArchitectureSpec::resnet(8, 16, 10),
            ArchitectureSpec::resnet(26, 16, 10),
            ArchitectureSpec::resnet(50, 16, 10),
            ArchitectureSpec::resnet(110, 16, 10),
            ArchitectureSpec::resnet(8, 36, 10),
            ArchitectureSpec::resnet(8, 72, 10),
            ArchitectureSpec::vgg(5, 32, 10),
            ArchitectureSpec::vgg(9, 32, 10),
            ArchitectureSpec::vgg(5, 76, 10),
            ArchitectureSpec::wrn(10, 5, 10),
            ArchitectureSpec::wrn(28, 10, 10),
            ArchitectureSpec::densenet_bc(16, 12, 10),
            ArchitectureSpec::densenet_bc(16, 30, 10),
            ArchitectureSpec::densenet_bc(52, 12, 10),
        ];
        for spec in ok {
            assert_eq!(spec.validate(), Ok(()), "{}", spec);
        }
    }

    #[test]
    fn violations_name_the_constraint() {
        let e = ArchitectureSpec::resnet(9, 16, 10).validate().unwrap_err();
        assert!(format!("{}", e).contains("depth ≢ 2 mod 6"));
        let e = ArchitectureSpec::resnet(2, 16, 10).validate().unwrap_err();
        assert!(matches!(e, SpecViolation::DepthTooSmall { .. }));
        let e = ArchitectureSpec::wrn(28, 0, 10).validate().unwrap_err();
        assert_eq!(e, SpecViolation::Width);
        let e = ArchitectureSpec::vgg(7, 32, 10).validate().unwrap_err();
        assert!(format!("{}", e).contains("∉"));
        let e = ArchitectureSpec::densenet_bc(18, 12, 10).validate().unwrap_err();
        assert!(format!("{}", e).contains("depth ≢ 4 mod 6"));
        let e = ArchitectureSpec::resnet(8, 16, 1).validate().unwrap_err();
        assert!(matches!(e, SpecViolation::Classes { .. }));
        let e = ArchitectureSpec::vgg(9, 8, 10)
            .with_input(16, 16, 3)
            .validate()
            .unwrap_err();
        assert!(matches!(e, SpecViolation::Input { .. }));
    }

    #[test]
    fn depth_lattices() {
        let r: alloc::vec::Vec<usize> = Family::ResNet.depths(30).collect();
        assert_eq!(r, [8, 14, 20, 26]);
        let d: alloc::vec::Vec<usize> = Family::DenseNetBc.depths(30).collect();
        assert_eq!(d, [16, 22, 28]);
        let v: alloc::vec::Vec<usize> = Family::Vgg.depths(100).collect();
        assert_eq!(v, [5, 9]);
    }

    #[test]
    fn names_parse_back() {
        for f in Family::ALL {
            assert_eq!(f.name().parse::<Family>().unwrap(), f);
        }
        for h in Head::ALL {
            assert_eq!(h.name().parse::<Head>().unwrap(), h);
        }
        assert_eq!(ArchitectureSpec::resnet(110, 16, 10).name(), "resnet-110-16");
    }
}
