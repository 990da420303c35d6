//! Partition of drafter layers into singletons and layer-parallel groups.
//!
//! The default rule keeps the first and last layer alone and cuts the layers
//! in between at multiples of `N`, so the first middle group has `N - 1`
//! layers and the rest have `N` (the one touching the last layer may be
//! shorter). Plans are written as `0|1-3|4-7|8`.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerPlan {
    groups: Vec<Range<usize>>,
    lp_size: usize,
}

impl LayerPlan {
    pub fn groups(&self) -> &[Range<usize>] {
        &self.groups
    }

    /// Largest group size.
    pub fn lp_size(&self) -> usize {
        self.lp_size
    }

    pub fn n_layers(&self) -> usize {
        self.groups.last().map_or(0, |g| g.end)
    }

    pub fn is_all_singletons(&self) -> bool {
        self.lp_size == 1
    }

    /// Errors unless the plan covers exactly `n_layers` layers.
    pub fn check_layers(&self, n_layers: usize) -> Result<()> {
        if self.n_layers() != n_layers {
            return Err(Error::Config(format!(
                "plan covers {} layers but the drafter has {n_layers}",
                self.n_layers()
            )));
        }
        Ok(())
    }

    /// Validates a list of groups: non-empty, contiguous, ascending, starting
    /// at layer 0. Only the default rule forces singleton first and last
    /// layers.
    pub fn from_groups(groups: Vec<Range<usize>>) -> Result<Self> {
        let fail = |m: String| Err(Error::Config(m));
        if groups.is_empty() {
            return fail("empty plan".into());
        }
        let mut next = 0;
        for g in &groups {
            if g.start != next {
                return fail(format!(
                    "group {}-{} starts at {} but layer {next} comes next",
                    g.start,
                    g.end.saturating_sub(1),
                    g.start
                ));
            }
            if g.is_empty() {
                return fail(format!("empty group at layer {next}"));
            }
            next = g.end;
        }
        let lp_size = groups.iter().map(|g| g.len()).max().unwrap_or(1);
        Ok(Self { groups, lp_size })
    }
}

/// Default plan for `n_layers` layers and layer-parallel size `lp`.
pub fn plan_groups(n_layers: usize, lp: usize) -> Result<LayerPlan> {
    if n_layers < 2 {
        return Err(Error::Config(format!("{n_layers} layers cannot be planned")));
    }
    if lp == 0 || (lp > 1 && lp > n_layers - 2) {
        return Err(Error::Config(format!(
            "layer-parallel size {lp} must be in 1..={} for {n_layers} layers",
            (n_layers - 2).max(1)
        )));
    }
    let last = n_layers - 1;
    let mut groups = vec![0..1];
    let mut start = 1;
    while start < last {
        let end = ((start / lp + 1) * lp).min(last);
        groups.push(start..end);
        start = end;
    }
    groups.push(last..n_layers);
    LayerPlan::from_groups(groups)
}

/// Parses an explicit plan such as `0|1-2|3-4|5`.
pub fn parse_plan_override(spec: &str) -> Result<LayerPlan> {
    spec.parse()
}

impl FromStr for LayerPlan {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse_index = |t: &str| {
            t.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad layer index {t:?}")))
        };
        let mut groups = Vec::new();
        for part in s.split('|') {
            let range = match part.split_once('-') {
                Some((a, b)) => {
                    let (a, b) = (parse_index(a)?, parse_index(b)?);
                    if b < a {
                        return Err(Error::Config(format!("descending group {part:?}")));
                    }
                    a..b + 1
                }
                None => {
                    let a = parse_index(part)?;
                    a..a + 1
                }
            };
            groups.push(range);
        }
        LayerPlan::from_groups(groups)
    }
}

impl fmt::Display for LayerPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, g) in self.groups.iter().enumerate() {
            if i > 0 {
                f.write_str("|")?;
            }
            if g.len() == 1 {
                write!(f, "{}", g.start)?;
            } else {
                write!(f, "{}-{}", g.start, g.end - 1)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lp1_is_all_singletons() {
        for n in 2..20 {
            let p = plan_groups(n, 1).unwrap();
            assert_eq!(p.groups().len(), n);
            assert!(p.is_all_singletons());
        }
    }

    #[test]
    fn small_plans() {
        assert_eq!(plan_groups(8, 2).unwrap().to_string(), "0|1|2-3|4-5|6|7");
        assert_eq!(plan_groups(8, 3).unwrap().to_string(), "0|1-2|3-5|6|7");
        assert_eq!(plan_groups(8, 4).unwrap().to_string(), "0|1-3|4-6|7");
    }

    #[test]
    fn out_of_range_lp_rejected() {
        assert!(plan_groups(8, 0).is_err());
        assert!(plan_groups(8, 7).is_err());
        assert!(plan_groups(1, 1).is_err());
        assert!(plan_groups(2, 1).is_ok());
    }

    #[test]
    fn override_parsing() {
        assert_eq!(parse_plan_override("0|1-2|3").unwrap().groups().len(), 3);
        assert!(parse_plan_override("0|2-3|1").is_err());
        assert!(parse_plan_override("0|1-1|3").is_err());
        assert!(parse_plan_override("0|1-2|2-3|4").is_err());
        // Explicit plans may group the first or last layer.
        assert_eq!(parse_plan_override("0-1|2").unwrap().lp_size(), 2);
        assert!(parse_plan_override("0|3-1|4").is_err());
        assert!(parse_plan_override("0|x|2").is_err());
    }

    #[test]
    fn round_trip() {
        let p = plan_groups(32, 4).unwrap();
        assert_eq!(parse_plan_override(&p.to_string()).unwrap(), p);
    }

    #[test]
    fn exhaustive_coverage() {
        for n in 2..=64 {
            for lp in 1..=8 {
                let Ok(p) = plan_groups(n, lp) else {
                    assert!(lp > 1 && lp > n - 2);
                    continue;
                };
                let mut covered = Vec::new();
                for g in p.groups() {
                    assert!(g.len() <= lp);
                    covered.extend(g.clone());
                }
                assert_eq!(covered, (0..n).collect::<Vec<_>>());
                assert_eq!(p.groups()[0], 0..1);
                assert_eq!(*p.groups().last().unwrap(), n - 1..n);
            }
        }
    }
}
