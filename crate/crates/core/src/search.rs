//! Adaptive precision-combination search.
//!
//! Uniform seeds `[lo; 4] ..= [hi; 4]` enter a priority queue keyed by BOPs.
//! Each iteration pops the cheapest unvisited combination and evaluates it.
//! A combination that is cheaper than the incumbent and scores at least
//! `(1 - tolerance) * fp_score` becomes the new incumbent, and its
//! single-component decrements are queued.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::bops::{eval_bops, ModelShape, PrecisionCombination};
use crate::error::{Error, Result};
use crate::numfmt::{MAX_MANTISSA_LEN, MIN_MANTISSA_LEN};

/// What an accuracy oracle is asked to score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EvalTarget {
    /// The unconverted FP16 path.
    Fp16,
    Combination(PrecisionCombination),
}

/// Scores a precision combination; higher is better. Implementations must be
/// deterministic per target.
pub trait AccuracyOracle {
    fn evaluate(&mut self, target: EvalTarget) -> Result<f64>;
}

impl<F> AccuracyOracle for F
where
    F: FnMut(EvalTarget) -> Result<f64>,
{
    fn evaluate(&mut self, target: EvalTarget) -> Result<f64> {
        self(target)
    }
}

/// Memoizes scores so no target reaches the inner oracle twice.
pub struct CachedOracle<O> {
    inner: O,
    cache: HashMap<EvalTarget, f64>,
    misses: usize,
}

impl<O: AccuracyOracle> CachedOracle<O> {
    pub fn new(inner: O) -> Self {
        CachedOracle {
            inner,
            cache: HashMap::new(),
            misses: 0,
        }
    }

    /// Number of evaluations forwarded to the inner oracle.
    pub fn misses(&self) -> usize {
        self.misses
    }

    pub fn into_inner(self) -> O {
        self.inner
    }
}

impl<O: AccuracyOracle> AccuracyOracle for CachedOracle<O> {
    fn evaluate(&mut self, target: EvalTarget) -> Result<f64> {
        if let Some(&s) = self.cache.get(&target) {
            return Ok(s);
        }
        let s = self.inner.evaluate(target)?;
        self.misses += 1;
        self.cache.insert(target, s);
        Ok(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Accepted relative accuracy loss, in `[0, 1]`.
    pub tolerance: f64,
    /// Iteration budget; `None` runs until the queue empties.
    pub max_iters: Option<usize>,
    pub init_lo: u8,
    pub init_hi: u8,
    /// Smallest mantissa length a relaxation step may produce.
    pub floor: u8,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            tolerance: 0.01,
            max_iters: Some(32),
            init_lo: 4,
            init_hi: 13,
            floor: 1,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tolerance) {
            return Err(Error::InvalidParams(format!("tolerance {} outside [0, 1]", self.tolerance)));
        }
        if self.max_iters == Some(0) {
            return Err(Error::InvalidParams("max iterations must be at least 1".into()));
        }
        let range = MIN_MANTISSA_LEN..=MAX_MANTISSA_LEN;
        if !range.contains(&self.init_lo) || !range.contains(&self.init_hi) || self.init_lo > self.init_hi {
            return Err(Error::InvalidParams(format!(
                "initial range {}..={} invalid",
                self.init_lo, self.init_hi
            )));
        }
        if !range.contains(&self.floor) {
            return Err(Error::InvalidParams(format!("floor {} outside 1..=16", self.floor)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub comb: PrecisionCombination,
    pub bops: u64,
    pub score: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub fp_score: f64,
    pub records: Vec<IterationRecord>,
    pub best: Option<PrecisionCombination>,
    pub visited: usize,
    /// True when the queue emptied before the iteration budget ran out.
    pub exhausted: bool,
}

impl SearchTrace {
    /// One JSON object per iteration: `{iter, comb, bops, score, accepted}`.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Decrement each component by one, skipping components already at `floor`.
pub fn generate_candidates(c: &PrecisionCombination, floor: u8) -> Vec<PrecisionCombination> {
    let m = c.as_array();
    (0..4)
        .filter(|&i| m[i] > floor.max(MIN_MANTISSA_LEN))
        .map(|i| {
            let mut n = m;
            n[i] -= 1;
            PrecisionCombination::new(n).expect("decrement stays in range")
        })
        .collect()
}

fn evaluate(oracle: &mut dyn AccuracyOracle, target: EvalTarget) -> Result<f64> {
    let comb = match target {
        EvalTarget::Fp16 => None,
        EvalTarget::Combination(c) => Some(c),
    };
    let score = oracle.evaluate(target).map_err(|e| match e {
        e @ Error::OracleFailure { .. } => e,
        other => Error::oracle(comb.as_ref(), other),
    })?;
    if !score.is_finite() {
        return Err(Error::oracle(comb.as_ref(), Error::NonFiniteScore));
    }
    Ok(score)
}

fn feasible(score: f64, fp_score: f64, tolerance: f64) -> bool {
    score >= (1.0 - tolerance) * fp_score
}

pub fn search(shape: &ModelShape, oracle: &mut dyn AccuracyOracle, cfg: &SearchConfig) -> Result<SearchTrace> {
    cfg.validate()?;
    let fp_score = evaluate(oracle, EvalTarget::Fp16)?;

    let key = |c: PrecisionCombination| Reverse((eval_bops(&c, shape), c));
    let mut queue = BinaryHeap::new();
    let mut queued = HashSet::new();
    for m in cfg.init_lo..=cfg.init_hi {
        let c = PrecisionCombination::uniform(m)?;
        queued.insert(c);
        queue.push(key(c));
    }

    let budget = cfg.max_iters.unwrap_or(usize::MAX);
    let mut visited = HashSet::new();
    let mut best: Option<(PrecisionCombination, u64)> = None;
    let mut records = Vec::new();
    let mut exhausted = false;
    let mut iter = 0;
    while iter < budget {
        let Some(Reverse((bops, comb))) = queue.pop() else {
            exhausted = true;
            break;
        };
        visited.insert(comb);
        let score = evaluate(oracle, EvalTarget::Combination(comb))?;
        let accepted = best.is_none_or(|(_, b)| bops < b) && feasible(score, fp_score, cfg.tolerance);
        if accepted {
            best = Some((comb, bops));
            for n in generate_candidates(&comb, cfg.floor) {
                if !visited.contains(&n) && queued.insert(n) {
                    queue.push(key(n));
                }
            }
        }
        records.push(IterationRecord {
            iter,
            comb,
            bops,
            score,
            accepted,
        });
        if queue.is_empty() {
            exhausted = true;
            break;
        }
        iter += 1;
    }

    Ok(SearchTrace {
        fp_score,
        records,
        best: best.map(|(c, _)| c),
        visited: visited.len(),
        exhausted,
    })
}

/// Exhaustive minimum-BOPs feasible combination over `lo..=hi` per component
/// (ties broken by the lexicographically smallest tuple).
pub fn brute_force(
    shape: &ModelShape,
    oracle: &mut dyn AccuracyOracle,
    tolerance: f64,
    lo: u8,
    hi: u8,
) -> Result<Option<PrecisionCombination>> {
    let fp_score = evaluate(oracle, EvalTarget::Fp16)?;
    let mut best: Option<(u64, PrecisionCombination)> = None;
    for a in lo..=hi {
        for b in lo..=hi {
            for c in lo..=hi {
                for d in lo..=hi {
                    let comb = PrecisionCombination::new([a, b, c, d])?;
                    let score = evaluate(oracle, EvalTarget::Combination(comb))?;
                    if feasible(score, fp_score, tolerance) {
                        let cand = (eval_bops(&comb, shape), comb);
                        if best.is_none_or(|b| cand < b) {
                            best = Some(cand);
                        }
                    }
                }
            }
        }
    }
    Ok(best.map(|(_, c)| c))
}
