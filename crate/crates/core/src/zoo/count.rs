//! Closed-form FLOP and parameter counts, computed from the spec alone.
//!
//! These are deliberately independent of the builder: the built model
//! recounts by walking its own layers and tests compare the two.

use super::{ArchitectureSpec, Family, FlopCount, Head, SpecViolation};

/// Trainable parameters grouped by role.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamBreakdown {
    /// First convolution on the raw input.
    pub stem: u64,
    /// All other convolution kernels.
    pub body_conv: u64,
    /// Batch-norm scales and shifts.
    pub batch_norm: u64,
    /// Classifier weights and bias, or cosine prototypes.
    pub head: u64,
}

impl ParamBreakdown {
    pub fn total(&self) -> u64 {
        self.stem + self.body_conv + self.batch_norm + self.head
    }
}

/// Parameters of a fully connected `f -> o` layer.
pub fn dense_param_count(f: u64, o: u64, bias: bool) -> u64 {
    f * o + if bias { o } else { 0 }
}

#[derive(Default)]
struct Tally {
    macs: u64,
    params: ParamBreakdown,
}

impl Tally {
    fn conv(&mut self, hw: (u64, u64), cin: u64, cout: u64, k: u64, stride: u64, stem: bool) -> (u64, u64) {
        let out = (hw.0.div_ceil(stride), hw.1.div_ceil(stride));
        self.macs += out.0 * out.1 * cout * cin * k * k;
        let p = cin * cout * k * k;
        if stem {
            self.params.stem += p;
        } else {
            self.params.body_conv += p;
        }
        out
    }

    fn bn(&mut self, c: u64) {
        self.params.batch_norm += 2 * c;
    }

    fn head(&mut self, features: u64, classes: u64, head: Head) {
        self.macs += features * classes;
        self.params.head += dense_param_count(features, classes, head == Head::SoftmaxXe);
    }
}

fn tally(spec: &ArchitectureSpec) -> Result<Tally, SpecViolation> {
    spec.validate()?;
    let mut t = Tally::default();
    let [h, w, c] = spec.input;
    let (mut hw, c) = ((h as u64, w as u64), c as u64);
    let k = spec.num_classes as u64;
    let width = spec.width as u64;
    let features = match spec.family {
        Family::ResNet | Family::Wrn => {
            let (stem_out, widths) = if spec.family == Family::ResNet {
                (width, [width, 2 * width, 4 * width])
            } else {
                (16, [16 * width, 32 * width, 64 * width])
            };
            hw = t.conv(hw, c, stem_out, 3, 1, true);
            t.bn(stem_out);
            let mut cin = stem_out;
            for (s, &ws) in widths.iter().enumerate() {
                for b in 0..spec.blocks_per_stage() {
                    let stride = if s > 0 && b == 0 { 2 } else { 1 };
                    let hw_in = hw;
                    hw = t.conv(hw_in, cin, ws, 3, stride, false);
                    t.bn(ws);
                    t.conv(hw, ws, ws, 3, 1, false);
                    t.bn(ws);
                    if cin != ws || stride != 1 {
                        t.conv(hw_in, cin, ws, 1, stride, false);
                        t.bn(ws);
                    }
                    cin = ws;
                }
            }
            cin
        }
        Family::Vgg => {
            let plan: &[usize] = if spec.depth == 5 {
                &[1, 0, 2, 0, 4, 0, 8, 0]
            } else {
                &[1, 0, 2, 0, 4, 4, 0, 8, 8, 0, 8, 8, 0]
            };
            let mut cin = c;
            for &m in plan {
                if m == 0 {
                    hw = (hw.0 / 2, hw.1 / 2);
                } else {
                    let cout = m as u64 * width;
                    t.conv(hw, cin, cout, 3, 1, cin == c && t.params.stem == 0);
                    t.bn(cout);
                    cin = cout;
                }
            }
            hw.0 * hw.1 * cin
        }
        Family::DenseNetBc => {
            let mut ch = 2 * width;
            hw = t.conv(hw, c, ch, 3, 1, true);
            for stack in 0..3 {
                for _ in 0..spec.blocks_per_stage() {
                    t.bn(ch);
                    t.conv(hw, ch, 4 * width, 1, 1, false);
                    t.bn(4 * width);
                    t.conv(hw, 4 * width, width, 3, 1, false);
                    ch += width;
                }
                if stack < 2 {
                    t.bn(ch);
                    t.conv(hw, ch, ch / 2, 1, 1, false);
                    ch /= 2;
                    hw = (hw.0 / 2, hw.1 / 2);
                }
            }
            t.bn(ch);
            ch
        }
    };
    t.head(features, k, spec.head);
    Ok(t)
}

/// Inference cost of one sample, counting convolution and dense layers only.
pub fn flops(spec: &ArchitectureSpec) -> Result<FlopCount, SpecViolation> {
    Ok(FlopCount::from_macs(tally(spec)?.macs))
}

/// Trainable parameters, including batch-norm scale and shift.
pub fn param_count(spec: &ArchitectureSpec) -> Result<u64, SpecViolation> {
    Ok(tally(spec)?.params.total())
}

impl ArchitectureSpec {
    pub fn flops(&self) -> Result<FlopCount, SpecViolation> {
        flops(self)
    }

    pub fn param_count(&self) -> Result<u64, SpecViolation> {
        param_count(self)
    }

    pub fn param_breakdown(&self) -> Result<ParamBreakdown, SpecViolation> {
        Ok(tally(self)?.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn macs(spec: ArchitectureSpec) -> u64 {
        spec.flops().unwrap().macs
    }

    #[test]
    fn single_conv_count() {
        let mut t = Tally::default();
        t.conv((32, 32), 16, 16, 3, 1, false);
        assert_eq!(t.macs, 2_359_296);
    }

    #[test]
    fn resnet_matches_closed_form() {
        for w in [1u64, 2, 16, 36, 72] {
            assert_eq!(
                macs(ArchitectureSpec::resnet(8, w as usize, 10)),
                47104 * w * w + 27688 * w
            );
        }
        assert_eq!(macs(ArchitectureSpec::resnet(8, 16, 10)), 12_501_632);
        assert_eq!(macs(ArchitectureSpec::resnet(110, 16, 10)), 253_149_824);
    }

    #[test]
    fn resnet_depth_ratio() {
        let r = macs(ArchitectureSpec::resnet(110, 16, 10)) as f64 / macs(ArchitectureSpec::resnet(8, 16, 10)) as f64;
        assert!((19.0..=21.0).contains(&r), "{}", r);
    }

    #[test]
    fn vgg_matches_closed_form() {
        for w in [1u64, 32, 76] {
            assert_eq!(
                macs(ArchitectureSpec::vgg(5, w as usize, 10)),
                13824 * w * w + 27968 * w
            );
            assert_eq!(
                macs(ArchitectureSpec::vgg(9, w as usize, 10)),
                36864 * w * w + 27728 * w
            );
        }
    }

    #[test]
    fn densenet_reference_value() {
        assert_eq!(macs(ArchitectureSpec::densenet_bc(16, 12, 10)), 19_943_904);
    }

    #[test]
    fn flop_count_doubles_macs() {
        let f = ArchitectureSpec::wrn(10, 5, 10).flops().unwrap();
        assert_eq!(f.flops(), 2 * f.macs);
    }

    #[test]
    fn dense_toy_params() {
        assert_eq!(dense_param_count(64, 10, true), 650);
    }

    #[test]
    fn resnet_body_params_scale_quadratically() {
        let a = ArchitectureSpec::resnet(26, 16, 10).param_breakdown().unwrap();
        let b = ArchitectureSpec::resnet(26, 32, 10).param_breakdown().unwrap();
        let r = b.body_conv as f64 / a.body_conv as f64;
        assert!((r - 4.0).abs() < 0.4, "{}", r);
    }

    #[test]
    fn cosine_head_has_no_bias() {
        let xe = ArchitectureSpec::resnet(8, 16, 10);
        let cos = xe.clone().with_head(Head::Cosine);
        assert_eq!(xe.param_count().unwrap() - cos.param_count().unwrap(), 10);
    }
}
