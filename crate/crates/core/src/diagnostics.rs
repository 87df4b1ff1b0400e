//! Survival split by block missingness: per source, Kaplan–Meier curves for
//! rows with and without the block and a log-rank test between the two.

use std::io::Write;

use crate::cohort::{missingness_profile, sort_by_block_pattern, Cohort, SurvivalOutcome};
use crate::error::Result;
use crate::survival::{kaplan_meier, logrank_test, LogRank, StepCurve};

#[derive(Debug, Clone)]
pub struct BlockSurvival {
    pub source: String,
    pub n_missing: usize,
    pub n_observed: usize,
    pub km_missing: Option<StepCurve>,
    pub km_observed: Option<StepCurve>,
    /// `None` when either group is empty or the test is undefined.
    pub logrank: Option<LogRank>,
}

pub fn survival_by_missingness(cohort: &Cohort) -> Result<Vec<BlockSurvival>> {
    let profile = missingness_profile(cohort);
    let outcomes = cohort.outcomes();
    cohort
        .manifest()
        .sources()
        .iter()
        .enumerate()
        .map(|(s, src)| {
            let (mut missing, mut observed): (Vec<SurvivalOutcome>, Vec<SurvivalOutcome>) = (Vec::new(), Vec::new());
            for (i, &o) in outcomes.iter().enumerate() {
                if profile.indicators[[i, s]] == 1 {
                    missing.push(o);
                } else {
                    observed.push(o);
                }
            }
            let km = |g: &[SurvivalOutcome]| if g.is_empty() { Ok(None) } else { kaplan_meier(g).map(Some) };
            Ok(BlockSurvival {
                source: src.id.clone(),
                n_missing: missing.len(),
                n_observed: observed.len(),
                km_missing: km(&missing)?,
                km_observed: km(&observed)?,
                logrank: logrank_test(&missing, &observed).ok().filter(|t| t.p_value.is_finite()),
            })
        })
        .collect()
}

pub fn write_logrank_csv<W: Write>(rows: &[BlockSurvival], mut out: W) -> std::io::Result<()> {
    writeln!(out, "source,n_missing,n_observed,statistic,p_value")?;
    for r in rows {
        let (stat, p) = match r.logrank {
            Some(t) => (format!("{:.6}", t.statistic), format!("{:.6}", t.p_value)),
            None => ("NA".into(), "NA".into()),
        };
        writeln!(out, "{},{},{},{stat},{p}", r.source, r.n_missing, r.n_observed)?;
    }
    Ok(())
}

/// Long format: one line per curve step, `group` is `missing` or `observed`.
pub fn write_km_csv<W: Write>(rows: &[BlockSurvival], mut out: W) -> std::io::Result<()> {
    writeln!(out, "source,group,time,survival")?;
    for r in rows {
        for (group, curve) in [("missing", &r.km_missing), ("observed", &r.km_observed)] {
            let Some(curve) = curve else { continue };
            writeln!(out, "{},{group},{:.6},{:.6}", r.source, 0.0, curve.before())?;
            for (t, v) in curve.times().iter().zip(curve.values()) {
                writeln!(out, "{},{group},{t:.6},{v:.6}", r.source)?;
            }
        }
    }
    Ok(())
}

/// Block indicators (1 = block missing) with rows in pattern order.
pub fn write_pattern_csv<W: Write>(cohort: &Cohort, mut out: W) -> std::io::Result<()> {
    let profile = missingness_profile(cohort);
    let ids: Vec<&str> = cohort.manifest().sources().iter().map(|s| s.id.as_str()).collect();
    writeln!(out, "row,{}", ids.join(","))?;
    for i in sort_by_block_pattern(cohort) {
        let bits: Vec<String> = profile.indicators.row(i).iter().map(|b| b.to_string()).collect();
        writeln!(out, "{i},{}", bits.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{simulate, Mechanism, SimSpec};

    #[test]
    fn groups_partition_rows() {
        let sim = simulate(&SimSpec::small(3)).unwrap();
        let rows = survival_by_missingness(&sim.cohort).unwrap();
        assert_eq!(rows.len(), sim.cohort.n_sources());
        for r in &rows {
            assert_eq!(r.n_missing + r.n_observed, sim.cohort.n_rows());
        }
        // first source is never missing in the small spec
        assert_eq!(rows[0].n_missing, 0);
        assert!(rows[0].logrank.is_none());
        assert!(rows[1].logrank.is_some());
    }

    #[test]
    fn prognostic_missingness_is_detected() {
        let spec =
            SimSpec { seed: 11, ..SimSpec::default() }.with_mechanism(Mechanism::Prognostic { rate: 0.4, slope: 2.0 });
        let sim = simulate(&spec).unwrap();
        let rows = survival_by_missingness(&sim.cohort).unwrap();
        assert!(rows.iter().all(|r| r.logrank.unwrap().p_value < 0.05));
    }

    #[test]
    fn pattern_csv_is_sorted() {
        let sim = simulate(&SimSpec::small(5)).unwrap();
        let mut buf = Vec::new();
        write_pattern_csv(&sim.cohort, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let patterns: Vec<String> = text.lines().skip(1).map(|l| l.split_once(',').unwrap().1.to_string()).collect();
        assert_eq!(patterns.len(), sim.cohort.n_rows());
        assert!(patterns.windows(2).all(|w| w[0] <= w[1]));
    }
}
