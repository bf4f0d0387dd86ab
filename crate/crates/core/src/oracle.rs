//! Ground truth for small design spaces: train every architecture, rank them
//! by the search objective, and locate a searched architecture in that ranking.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::io::dataset::Dataset;
use crate::io::lut::decision_string;
use crate::io::write_atomic;
use crate::latency::{fixed_macs, mbconv_macs, predict_discrete_runtime, LatencyTable};
use crate::search::{train_discrete, TrainSchedule};
use crate::superkernel::Decision;
use crate::supernet::{build_discrete, enumerate_space, DerivedArchitecture, MacroConfig, WeightSource};
use crate::{seeded_rng, Error, Result};

/// Largest space [`exhaustive_evaluate`] accepts by default.
pub const DEFAULT_SPACE_CAP: u128 = 256;

/// Runtime floor used inside the log term, matching the search loss.
pub const RUNTIME_FLOOR_MS: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchRecord {
    pub index: usize,
    pub decisions: Vec<Decision>,
    pub trained_top1: f64,
    pub eval_ce: f64,
    pub predicted_runtime_ms: f64,
    pub macs: u64,
    /// `eval_ce + λ · ln(max(runtime, floor))`.
    pub objective: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceEvaluation {
    pub macro_cfg: MacroConfig,
    pub lambda: f64,
    pub records: Vec<ArchRecord>,
    /// Indices into `records` of architectures no other one beats on both
    /// accuracy and runtime.
    pub pareto: Vec<usize>,
}

pub fn objective(eval_ce: f64, runtime_ms: f64, lambda: f64) -> f64 {
    eval_ce + lambda * runtime_ms.max(RUNTIME_FLOOR_MS).ln()
}

/// Multiply-accumulates of a whole discrete network.
pub fn architecture_macs(arch: &DerivedArchitecture) -> u64 {
    let per_layer: u64 = arch
        .macro_cfg
        .layers()
        .iter()
        .zip(&arch.decisions)
        .map(|(spec, &d)| mbconv_macs(spec, d))
        .sum();
    fixed_macs(&arch.macro_cfg) + per_layer
}

/// Train one architecture from `schedule.seed` and score it.
pub fn evaluate_architecture(
    arch: &DerivedArchitecture,
    index: usize,
    train: &Dataset,
    eval: &Dataset,
    lut: &LatencyTable,
    schedule: &TrainSchedule,
    lambda: f64,
) -> Result<ArchRecord> {
    let mut rng = seeded_rng(schedule.seed);
    let mut net = build_discrete(arch, WeightSource::Fresh(&mut rng))?;
    let m = train_discrete(&mut net, train, eval, schedule)?;
    let runtime = predict_discrete_runtime(arch, lut)?.total_ms;
    Ok(ArchRecord {
        index,
        decisions: arch.decisions.clone(),
        trained_top1: m.top1,
        eval_ce: m.loss,
        predicted_runtime_ms: runtime,
        macs: architecture_macs(arch),
        objective: objective(m.loss, runtime, lambda),
    })
}

/// Train and score every architecture of `cfg`, in enumeration order.
pub fn exhaustive_evaluate(
    cfg: &MacroConfig,
    train: &Dataset,
    eval: &Dataset,
    lut: &LatencyTable,
    schedule: &TrainSchedule,
    lambda: f64,
    cap: u128,
) -> Result<SpaceEvaluation> {
    let order: Vec<usize> = (0..space_len(cfg, cap)?).collect();
    evaluate_in_order(cfg, &order, train, eval, lut, schedule, lambda, cap)
}

fn space_len(cfg: &MacroConfig, cap: u128) -> Result<usize> {
    let (n, _) = enumerate_space(cfg, cap)?;
    Ok(n as usize)
}

/// Like [`exhaustive_evaluate`] but visiting architectures in `order`; the
/// result is indexed by enumeration position regardless of order.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_in_order(
    cfg: &MacroConfig,
    order: &[usize],
    train: &Dataset,
    eval: &Dataset,
    lut: &LatencyTable,
    schedule: &TrainSchedule,
    lambda: f64,
    cap: u128,
) -> Result<SpaceEvaluation> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let (_, iter) = enumerate_space(cfg, cap)?;
    let archs: Vec<_> = iter.collect();
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    if sorted != (0..archs.len()).collect::<Vec<_>>() {
        return Err(Error::invalid("evaluate_in_order", "order must be a permutation of the space"));
    }
    let mut slots: Vec<Option<ArchRecord>> = vec![None; archs.len()];
    for &i in order {
        let arch = DerivedArchitecture::new(cfg.clone(), archs[i].clone())?;
        slots[i] = Some(evaluate_architecture(&arch, i, train, eval, lut, schedule, lambda)?);
    }
    let records: Vec<ArchRecord> = slots.into_iter().map(|r| r.expect("every slot filled")).collect();
    let pareto = pareto_front(&records);
    Ok(SpaceEvaluation {
        macro_cfg: cfg.clone(),
        lambda,
        records,
        pareto,
    })
}

/// `a` is at least as accurate and as fast as `b`, and strictly better in one.
pub fn dominates(a: &ArchRecord, b: &ArchRecord) -> bool {
    a.trained_top1 >= b.trained_top1
        && a.predicted_runtime_ms <= b.predicted_runtime_ms
        && (a.trained_top1 > b.trained_top1 || a.predicted_runtime_ms < b.predicted_runtime_ms)
}

/// Non-dominated records by a sweep over increasing runtime.
pub fn pareto_front(records: &[ArchRecord]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.sort_by(|&a, &b| {
        let (ra, rb) = (&records[a], &records[b]);
        ra.predicted_runtime_ms
            .total_cmp(&rb.predicted_runtime_ms)
            .then(rb.trained_top1.total_cmp(&ra.trained_top1))
    });
    let mut front = Vec::new();
    let mut best: Option<(f64, f64)> = None;
    for i in idx {
        let r = &records[i];
        let keep = match best {
            None => true,
            Some((top1, rt)) => r.trained_top1 > top1 || (r.trained_top1 == top1 && r.predicted_runtime_ms == rt),
        };
        if keep {
            if best.is_none_or(|(top1, _)| r.trained_top1 > top1) {
                best = Some((r.trained_top1, r.predicted_runtime_ms));
            }
            front.push(i);
        }
    }
    front.sort_unstable();
    front
}

/// Every way `front` disagrees with the pairwise dominance definition.
pub fn pareto_violations(records: &[ArchRecord], front: &[usize]) -> Vec<String> {
    let mut v = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let dominated_by = records.iter().position(|o| dominates(o, r));
        match (front.contains(&i), dominated_by) {
            (true, Some(j)) => v.push(format!("front member {i} is dominated by {j}")),
            (false, None) => v.push(format!("{i} is non-dominated but missing from the front")),
            _ => {}
        }
    }
    v
}

/// Fraction of the space with a strictly better objective than `arch`.
pub fn search_vs_oracle(space: &SpaceEvaluation, arch: &DerivedArchitecture, lambda: f64) -> Result<f64> {
    if lambda.to_bits() != space.lambda.to_bits() {
        return Err(Error::OracleMismatch(format!(
            "search used lambda {lambda}, space was scored with {}",
            space.lambda
        )));
    }
    if arch.macro_cfg != space.macro_cfg {
        return Err(Error::OracleMismatch("architecture and space use different macro configs".into()));
    }
    let me = space
        .records
        .iter()
        .find(|r| r.decisions == arch.decisions)
        .ok_or_else(|| Error::OracleMismatch(format!("{} is not in the space", decision_string(&arch.decisions))))?;
    let better = space.records.iter().filter(|r| r.objective < me.objective).count();
    Ok(better as f64 / space.records.len() as f64)
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len(), "spearman needs paired samples");
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

pub fn space_to_csv(space: &SpaceEvaluation) -> String {
    let mut s = String::from("index,decisions,trained_top1,eval_ce,predicted_runtime_ms,macs,objective,pareto\n");
    for r in &space.records {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.index,
            decision_string(&r.decisions),
            r.trained_top1,
            r.eval_ce,
            r.predicted_runtime_ms,
            r.macs,
            r.objective,
            u8::from(space.pareto.contains(&r.index))
        ));
    }
    s
}

pub fn save_space_csv(space: &SpaceEvaluation, path: &Path) -> Result<()> {
    write_atomic(path, space_to_csv(space).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(index: usize, top1: f64, rt: f64) -> ArchRecord {
        ArchRecord {
            index,
            decisions: vec![],
            trained_top1: top1,
            eval_ce: 1.0 - top1,
            predicted_runtime_ms: rt,
            macs: 0,
            objective: 1.0 - top1 + rt,
        }
    }

    #[test]
    fn pareto_matches_brute_force_with_ties() {
        let rs = vec![
            rec(0, 0.5, 1.0),
            rec(1, 0.6, 2.0),
            rec(2, 0.6, 2.0),
            rec(3, 0.55, 3.0),
            rec(4, 0.9, 5.0),
            rec(5, 0.5, 1.0),
            rec(6, 0.4, 0.5),
            rec(7, 0.9, 6.0),
        ];
        let f = pareto_front(&rs);
        assert_eq!(f, vec![0, 1, 2, 4, 5, 6]);
        assert!(pareto_violations(&rs, &f).is_empty());
        assert_eq!(pareto_violations(&rs, &[0, 1]).len(), 4);
    }

    #[test]
    fn ranks_and_spearman() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
    }

    #[test]
    fn percentile_extremes() {
        let cfg = MacroConfig::tiny();
        let (_, it) = enumerate_space(&cfg, 256).unwrap();
        let records: Vec<_> = it
            .enumerate()
            .map(|(i, d)| ArchRecord {
                decisions: d,
                objective: i as f64,
                ..rec(i, 0.5, 1.0)
            })
            .collect();
        let n = records.len();
        let space = SpaceEvaluation {
            macro_cfg: cfg.clone(),
            lambda: 0.1,
            pareto: vec![],
            records,
        };
        let arch = |i: usize| DerivedArchitecture::new(cfg.clone(), space.records[i].decisions.clone()).unwrap();
        assert_eq!(search_vs_oracle(&space, &arch(0), 0.1).unwrap(), 0.0);
        assert_eq!(search_vs_oracle(&space, &arch(n - 1), 0.1).unwrap(), (n - 1) as f64 / n as f64);
        assert!(matches!(search_vs_oracle(&space, &arch(0), 0.2), Err(Error::OracleMismatch(_))));
    }

    #[test]
    fn objective_uses_floor() {
        assert_eq!(objective(1.0, 0.0, 1.0), 1.0 + RUNTIME_FLOOR_MS.ln());
        assert_eq!(objective(1.0, 5.0, 0.0), 1.0);
    }
}
