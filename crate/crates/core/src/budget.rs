//! Budget-matched design space: an ensemble of `M` base networks against a
//! single deeper or a single wider network with about the same inference
//! cost.

use alloc::format;

use crate::zoo::{ArchitectureSpec, Family, FlopCount};
use crate::{Error, Result};

/// Largest width parameter considered by [`match_width`].
pub const MAX_WIDTH: usize = 1024;

/// Largest depth considered by [`match_depth`].
pub const MAX_DEPTH: usize = 2000;

/// One single-network design with its cost relative to the budget.
#[derive(Clone, Debug, PartialEq)]
pub struct Design {
    pub spec: ArchitectureSpec,
    pub flops: FlopCount,
    /// `(achieved - budget) / budget`.
    pub rel_error: f64,
}

impl Design {
    fn new(spec: ArchitectureSpec, budget: FlopCount) -> Result<Self> {
        let flops = spec.flops()?;
        Ok(Design {
            rel_error: rel_error(flops, budget),
            spec,
            flops,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BudgetPlan {
    pub budget: FlopCount,
    pub base: ArchitectureSpec,
    pub members: usize,
    /// Base width, greater depth. `None` when the family has no deeper
    /// configuration (VGG-9).
    pub deep: Option<Design>,
    /// Base depth, greater width.
    pub wide: Design,
}

impl BudgetPlan {
    pub fn base_flops(&self) -> FlopCount {
        FlopCount::from_macs(self.budget.macs / self.members as u64)
    }
}

pub fn rel_error(achieved: FlopCount, budget: FlopCount) -> f64 {
    (achieved.macs as f64 - budget.macs as f64) / budget.macs as f64
}

/// Total cost of `m` copies of `base`.
pub fn ensemble_budget(base: &ArchitectureSpec, m: usize) -> Result<FlopCount> {
    if m == 0 {
        return Err(Error::InvalidArgument("ensemble size must be at least 1".into()));
    }
    Ok(base.flops()?.scaled(m as u64))
}

/// Candidate closest to `target`; ties go to the earlier (smaller) one.
/// Candidates must come in increasing cost order.
fn closest<I>(candidates: I, target: FlopCount) -> Result<Option<(usize, FlopCount)>>
where
    I: Iterator<Item = (usize, Result<FlopCount>)>,
{
    let mut best: Option<(usize, FlopCount, u64)> = None;
    for (v, f) in candidates {
        let f = f?;
        let gap = f.macs.abs_diff(target.macs);
        if best.is_none_or(|(_, _, g)| gap < g) {
            best = Some((v, f, gap));
        }
        if f.macs > target.macs {
            break;
        }
    }
    Ok(best.map(|(v, f, _)| (v, f)))
}

fn unreachable(template: &ArchitectureSpec, budget: FlopCount, minimum: FlopCount) -> Error {
    Error::UnreachableBudget {
        family: template.family.name(),
        budget: budget.flops(),
        minimum: minimum.flops(),
    }
}

/// Width whose cost at the template's depth is closest to `target`.
pub fn match_width(template: &ArchitectureSpec, target: FlopCount) -> Result<usize> {
    match_width_from(template, target, 1)
}

fn match_width_from(template: &ArchitectureSpec, target: FlopCount, min: usize) -> Result<usize> {
    let floor = template.with_width(min).flops()?;
    if target < floor && min == 1 {
        return Err(unreachable(template, target, floor));
    }
    let cands = (min..=MAX_WIDTH).map(|w| (w, template.with_width(w).flops().map_err(Error::from)));
    Ok(closest(cands, target)?.expect("non-empty width grid").0)
}

/// Depth on the family lattice whose cost at the template's width is
/// closest to `target`.
pub fn match_depth(template: &ArchitectureSpec, target: FlopCount) -> Result<usize> {
    let min = template.family.min_depth();
    let floor = template.with_depth(min).flops()?;
    if target < floor {
        return Err(unreachable(template, target, floor));
    }
    match_depth_from(template, target, min).map(|d| d.expect("non-empty depth lattice"))
}

fn match_depth_from(template: &ArchitectureSpec, target: FlopCount, min: usize) -> Result<Option<usize>> {
    let cands = template
        .family
        .depths(MAX_DEPTH)
        .filter(|&d| d >= min)
        .map(|d| (d, template.with_depth(d).flops().map_err(Error::from)));
    Ok(closest(cands, target)?.map(|(d, _)| d))
}

/// Ensemble of `m` base networks against the budget-matched deeper and wider
/// single networks. Competitors are restricted to strictly larger depth or
/// width than the base.
pub fn plan(base: &ArchitectureSpec, m: usize) -> Result<BudgetPlan> {
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "plan needs at least 2 members, got {}",
            m
        )));
    }
    let budget = ensemble_budget(base, m)?;
    let deep = match_depth_from(base, budget, base.depth + 1)?
        .map(|d| Design::new(base.with_depth(d), budget))
        .transpose()?;
    let w = match_width_from(base, budget, base.width + 1)?;
    let wide = Design::new(base.with_width(w), budget)?;
    Ok(BudgetPlan {
        budget,
        base: base.clone(),
        members: m,
        deep,
        wide,
    })
}

/// Whether a family's depth lattice offers anything deeper than `depth`.
pub fn has_deeper(family: Family, depth: usize) -> bool {
    family.depths(MAX_DEPTH).any(|d| d > depth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::Head;

    fn r8(w: usize) -> ArchitectureSpec {
        ArchitectureSpec::resnet(8, w, 10)
    }

    #[test]
    fn budget_is_linear_in_members() {
        let b = r8(16).flops().unwrap();
        assert_eq!(ensemble_budget(&r8(16), 1).unwrap(), b);
        assert_eq!(ensemble_budget(&r8(16), 20).unwrap().macs, 20 * b.macs);
        assert!(ensemble_budget(&r8(16), 0).is_err());
    }

    #[test]
    fn resnet_pairings() {
        let p = plan(&r8(16), 20).unwrap();
        let deep = p.deep.unwrap().spec.depth;
        assert!(deep.abs_diff(110) <= 6, "{}", deep);
        assert!(p.wide.spec.width.abs_diff(72) <= 4, "{}", p.wide.spec.width);
        let five = plan(&r8(16), 5).unwrap();
        assert!([26, 32].contains(&five.deep.unwrap().spec.depth));
        assert_eq!(five.wide.spec.width, 36);
    }

    #[test]
    fn densenet_and_vgg_pairings() {
        let d = plan(&ArchitectureSpec::densenet_bc(16, 12, 10), 6).unwrap();
        assert!(d.wide.spec.width.abs_diff(30) <= 2, "{}", d.wide.spec.width);
        let big = plan(&ArchitectureSpec::densenet_bc(64, 32, 10), 3).unwrap();
        assert!(big.wide.spec.width.abs_diff(56) <= 3, "{}", big.wide.spec.width);
        let v = plan(&ArchitectureSpec::vgg(5, 32, 10), 5).unwrap();
        assert!((71..=78).contains(&v.wide.spec.width), "{}", v.wide.spec.width);
        assert_eq!(v.deep.unwrap().spec.depth, 9);
        assert!(plan(&ArchitectureSpec::vgg(9, 32, 10), 2).unwrap().deep.is_none());
    }

    #[test]
    fn fixed_points() {
        for spec in [
            r8(16),
            ArchitectureSpec::vgg(5, 32, 10),
            ArchitectureSpec::densenet_bc(16, 12, 10),
        ] {
            let f = spec.flops().unwrap();
            assert_eq!(match_width(&spec, f).unwrap(), spec.width);
            assert_eq!(match_depth(&spec, f).unwrap(), spec.depth);
        }
        assert_eq!(
            match_depth(&ArchitectureSpec::resnet(110, 16, 10), r8(16).flops().unwrap()).unwrap(),
            8
        );
    }

    #[test]
    fn unreachable_budget() {
        let tiny = FlopCount::from_macs(10);
        assert!(matches!(
            match_width(&r8(16), tiny),
            Err(Error::UnreachableBudget { .. })
        ));
        assert!(matches!(
            match_depth(&r8(16), tiny),
            Err(Error::UnreachableBudget { .. })
        ));
    }

    #[test]
    fn plan_needs_two_members_and_grows_both_axes() {
        assert!(plan(&r8(16), 1).is_err());
        let p = plan(&r8(16), 2).unwrap();
        assert!(p.deep.unwrap().spec.depth > 8);
        assert!(p.wide.spec.width > 16);
        let c = plan(&r8(4).with_head(Head::Cosine), 2).unwrap();
        assert!(c.wide.spec.width > 4);
    }
}
