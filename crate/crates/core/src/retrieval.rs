//! Memory branch: embedding similarity search over training spots, filtered
//! by cell-composition gating and aggregated with softmax weights.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::align::AlignModel;
use crate::error::{DuetError, Result};
use crate::kernel::{cosine, dot, softmax_in_place, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub n_candidates: usize,
    pub top_k: usize,
    pub tau_c: f64,
    pub tau_p: f64,
    pub beta: f64,
    pub softmax_temp: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            n_candidates: 150,
            top_k: 100,
            tau_c: 0.5,
            tau_p: 0.3,
            beta: 0.3,
            softmax_temp: 1.0,
        }
    }
}

impl RetrievalConfig {
    /// Thresholds that let every candidate through and ignore composition in the score.
    pub fn ungated(self) -> Self {
        Self {
            tau_c: 1.0,
            tau_p: -1.0,
            beta: 0.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.top_k > self.n_candidates {
            return Err(DuetError::input(format!(
                "need 0 < top_k <= n_candidates, got top_k={} n_candidates={}",
                self.top_k, self.n_candidates
            )));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(DuetError::input(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if !(self.tau_c.is_finite() && self.tau_p.is_finite()) {
            return Err(DuetError::input("gating thresholds must be finite"));
        }
        if !(self.softmax_temp > 0.0) {
            return Err(DuetError::input(format!(
                "softmax temperature must be positive, got {}",
                self.softmax_temp
            )));
        }
        Ok(())
    }
}

/// Training spots indexed by their expression embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDB {
    pub h: Matrix,
    pub expressions: Matrix,
    pub gating: Matrix,
    pub spot_ids: Vec<String>,
}

impl EmbeddingDB {
    pub fn new(h: Matrix, expressions: Matrix, gating: Matrix, spot_ids: Vec<String>) -> Result<Self> {
        let n = spot_ids.len();
        if h.rows() != n || expressions.rows() != n || gating.rows() != n {
            return Err(DuetError::input(format!(
                "database arrays disagree: {} embeddings, {} expressions, {} gating rows, {n} ids",
                h.rows(),
                expressions.rows(),
                gating.rows()
            )));
        }
        Ok(Self {
            h,
            expressions,
            gating,
            spot_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.spot_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spot_ids.is_empty()
    }
}

/// Re-embed training expressions with the current gene head.
pub fn rebuild_db(
    model: &AlignModel,
    expressions: &Matrix,
    gating: &Matrix,
    spot_ids: &[String],
) -> Result<EmbeddingDB> {
    if spot_ids.is_empty() {
        return Err(DuetError::input("cannot build a retrieval database from zero spots"));
    }
    if expressions.rows() != spot_ids.len() || gating.rows() != spot_ids.len() {
        return Err(DuetError::input(format!(
            "database sources disagree: {} expressions, {} gating rows, {} ids",
            expressions.rows(),
            gating.rows(),
            spot_ids.len()
        )));
    }
    let h = model.embed_expressions(expressions)?;
    EmbeddingDB::new(h, expressions.clone(), gating.clone(), spot_ids.to_vec())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub p_ret: Vec<f64>,
    /// Database rows used in the aggregate, best score first.
    pub kept: Vec<usize>,
    pub kept_ids: Vec<String>,
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
    pub n_candidates: usize,
    pub n_passed_gate: usize,
    /// True when no candidate passed the gate and the ungated top-k was used.
    pub fallback: bool,
}

/// Descending score, ascending index on ties.
fn by_score_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

fn top_by_score(mut scored: Vec<(f64, usize)>, n: usize) -> Vec<(f64, usize)> {
    if n < scored.len() {
        if n > 0 {
            scored.select_nth_unstable_by(n - 1, by_score_then_index);
        }
        scored.truncate(n);
    }
    scored.sort_by(by_score_then_index);
    scored
}

fn candidates_excluding(db: &EmbeddingDB, v: &[f64], n: usize, exclude: Option<usize>) -> Vec<(f64, usize)> {
    let scored = (0..db.len())
        .filter(|&j| Some(j) != exclude)
        .map(|j| (dot(v, db.h.row(j)), j))
        .collect();
    top_by_score(scored, n)
}

/// Indices of the `n` database rows with the largest `vᵀh_j`.
pub fn candidates(db: &EmbeddingDB, v: &[f64], n: usize) -> Result<Vec<usize>> {
    if db.is_empty() {
        return Err(DuetError::input("retrieval database is empty"));
    }
    if n > db.len() {
        return Err(DuetError::input(format!(
            "asked for {n} candidates from a database of {}",
            db.len()
        )));
    }
    if v.len() != db.h.cols() {
        return Err(DuetError::shape(format!(
            "query has {} dims, database embeddings have {}",
            v.len(),
            db.h.cols()
        )));
    }
    Ok(candidates_excluding(db, v, n, None)
        .into_iter()
        .map(|(_, j)| j)
        .collect())
}

/// Relative count deviation; two empty spots deviate by 0.
fn count_deviation(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m > 0.0 {
        (a - b).abs() / m
    } else {
        0.0
    }
}

/// Whether a database spot is compatible with the query's cell composition.
pub fn gate_mask(g_s: &[f64], g_j: &[f64], tau_c: f64, tau_p: f64) -> bool {
    let dev = count_deviation(g_s.iter().sum(), g_j.iter().sum());
    dev <= tau_c && cosine(g_s, g_j) >= tau_p
}

pub fn blended_scores(phi: &[f64], sim: &[f64], beta: f64) -> Result<Vec<f64>> {
    if phi.len() != sim.len() {
        return Err(DuetError::input(format!(
            "score arrays differ in length: {} vs {}",
            phi.len(),
            sim.len()
        )));
    }
    Ok(phi
        .iter()
        .zip(sim)
        .map(|(&p, &s)| (1.0 - beta) * p + beta * s)
        .collect())
}

fn aggregate(db: &EmbeddingDB, ranked: &[(f64, usize)], temp: f64) -> (Vec<f64>, Vec<f64>) {
    let mut w: Vec<f64> = ranked.iter().map(|&(r, _)| r / temp).collect();
    softmax_in_place(&mut w);
    let mut p = vec![0.0; db.expressions.cols()];
    for (&wj, &(_, j)) in w.iter().zip(ranked) {
        for (pk, &y) in p.iter_mut().zip(db.expressions.row(j)) {
            *pk += wj * y;
        }
    }
    (p, w)
}

/// Retrieve for one query. `exclude` removes one database row from
/// consideration, used when the query is itself a database member.
pub fn retrieve_excluding(
    db: &EmbeddingDB,
    v: &[f64],
    g_s: &[f64],
    cfg: &RetrievalConfig,
    exclude: Option<usize>,
) -> Result<RetrievalResult> {
    let available = db.len() - usize::from(exclude.is_some_and(|e| e < db.len()));
    if available == 0 {
        return Err(DuetError::input("retrieval database is empty"));
    }
    if v.len() != db.h.cols() || g_s.len() != db.gating.cols() {
        return Err(DuetError::shape(format!(
            "query has {} embedding dims and {} gating dims, database has {} and {}",
            v.len(),
            g_s.len(),
            db.h.cols(),
            db.gating.cols()
        )));
    }
    let cands = candidates_excluding(db, v, cfg.n_candidates.min(available), exclude);
    let passed: Vec<(f64, usize)> = cands
        .iter()
        .filter(|&&(_, j)| gate_mask(g_s, db.gating.row(j), cfg.tau_c, cfg.tau_p))
        .map(|&(phi, j)| {
            let sim = cosine(g_s, db.gating.row(j));
            ((1.0 - cfg.beta) * phi + cfg.beta * sim, j)
        })
        .collect();
    let n_passed_gate = passed.len();
    let fallback = passed.is_empty();
    let ranked = if fallback {
        cands[..cfg.top_k.min(cands.len())].to_vec()
    } else {
        top_by_score(passed, cfg.top_k)
    };
    let (p_ret, weights) = aggregate(db, &ranked, cfg.softmax_temp);
    Ok(RetrievalResult {
        p_ret,
        kept: ranked.iter().map(|&(_, j)| j).collect(),
        kept_ids: ranked.iter().map(|&(_, j)| db.spot_ids[j].clone()).collect(),
        scores: ranked.iter().map(|&(r, _)| r).collect(),
        weights,
        n_candidates: cands.len(),
        n_passed_gate,
        fallback,
    })
}

pub fn retrieve(db: &EmbeddingDB, v: &[f64], g_s: &[f64], cfg: &RetrievalConfig) -> Result<RetrievalResult> {
    retrieve_excluding(db, v, g_s, cfg, None)
}

/// `p_ret` for every query row. With `leave_self_out`, query `i` is database
/// row `i` and may not retrieve itself.
pub fn retrieve_all(
    db: &EmbeddingDB,
    v: &Matrix,
    g: &Matrix,
    cfg: &RetrievalConfig,
    leave_self_out: bool,
) -> Result<Matrix> {
    if v.rows() != g.rows() {
        return Err(DuetError::input(format!(
            "{} query embeddings but {} gating rows",
            v.rows(),
            g.rows()
        )));
    }
    if leave_self_out && v.rows() != db.len() {
        return Err(DuetError::input(
            "leave-self-out retrieval needs one query per database row",
        ));
    }
    let mut out = Matrix::zeros(v.rows(), db.expressions.cols());
    for i in 0..v.rows() {
        let ex = leave_self_out.then_some(i);
        let r = retrieve_excluding(db, v.row(i), g.row(i), cfg, ex)?;
        out.row_mut(i).copy_from_slice(&r.p_ret);
    }
    Ok(out)
}
