//! The learnable components and the differentiable forward pass.
//!
//! Per episode the visual encoder `f` embeds every sample and the semantic
//! encoder `g` embeds the support attributes; query semantics start at zero.
//! Each query then gets its own graph over all supports plus itself. The
//! graph's adjacency comes either from plain squared distances or, with
//! relation guidance on, from l1 norms of relation vectors passed through the
//! transfer module `h`. One propagation matrix updates the visual and the
//! semantic node sets, `w` mixes the two per node, and the query is scored
//! against class prototypes by a softmax over negative Euclidean distances.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::graph::{normalized_gaussian_on, propagation_matrix_on};
use crate::matrix::Matrix;
use crate::nn::{BoundMlp, Mlp};
use crate::relation::{off_diagonal_pairs, relation_vectors_on, rg_loss_on, BoundTransfer, TransferModule};
use crate::tape::{GradTape, Var};

/// Lower bound applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuxConstraint {
    None,
    /// Squared gap between support visual and semantic embeddings.
    InstanceConstraint,
    /// Squared gap between support-support relation vectors of the two modalities.
    RelationConstraint,
}

impl std::str::FromStr for AuxConstraint {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "none" => Ok(AuxConstraint::None),
            "ic" | "instance" | "instance-constraint" => Ok(AuxConstraint::InstanceConstraint),
            "rc" | "relation" | "relation-constraint" => Ok(AuxConstraint::RelationConstraint),
            other => Err(format!("unknown aux constraint `{other}` (none, ic, rc)")),
        }
    }
}

/// Which parts of the model are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationMode {
    /// visual propagation
    pub vp: bool,
    /// semantic propagation
    pub sp: bool,
    /// relation guidance
    pub rg: bool,
    pub aux: AuxConstraint,
}

impl Default for AblationMode {
    fn default() -> Self {
        Self::FULL
    }
}

impl AblationMode {
    pub const BASELINE: Self = Self::flags(false, false, false);
    pub const FULL: Self = Self::flags(true, true, true);

    pub const fn flags(vp: bool, sp: bool, rg: bool) -> Self {
        Self {
            vp,
            sp,
            rg,
            aux: AuxConstraint::None,
        }
    }

    /// The six component ablations, baseline first, full model last.
    pub const TABLE: [Self; 6] = [
        Self::flags(false, false, false),
        Self::flags(true, false, false),
        Self::flags(false, true, false),
        Self::flags(true, true, false),
        Self::flags(false, true, true),
        Self::flags(true, true, true),
    ];

    pub fn validate(&self) -> Result<()> {
        if self.rg && !(self.vp || self.sp) {
            return Err(Error::InvalidConfig(
                "relation guidance needs visual or semantic propagation".into(),
            ));
        }
        Ok(())
    }

    pub fn propagates(&self) -> bool {
        self.vp || self.sp
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.vp {
            parts.push("VP");
        }
        if self.sp {
            parts.push("SP");
        }
        if self.rg {
            parts.push("RG");
        }
        match self.aux {
            AuxConstraint::None => {}
            AuxConstraint::InstanceConstraint => parts.push("IC"),
            AuxConstraint::RelationConstraint => parts.push("RC"),
        }
        if parts.is_empty() {
            "baseline".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_v: usize,
    pub d_a: usize,
    pub embed: usize,
    pub hidden: usize,
}

/// Parameters of `f`, `g`, `h` and `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub f: Mlp,
    pub g: Mlp,
    pub h: TransferModule,
    pub w: Mlp,
}

impl ModelParams {
    pub fn random<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Self {
        let ModelDims { d_v, d_a, embed, hidden } = dims;
        Self {
            f: Mlp::random(&[d_v, hidden, embed], rng),
            g: Mlp::random(&[d_a, hidden, embed], rng),
            h: TransferModule::random(embed, rng),
            w: Mlp::random(&[2 * embed, hidden, 1], rng),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.f.output_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.f.output_dim();
        if self.g.output_dim() != c || self.h.dim() != c {
            return Err(Error::invalid("f, g and h must share the embedding dimension"));
        }
        if self.w.input_dim() != 2 * c || self.w.output_dim() != 1 {
            return Err(Error::invalid("w must map 2c inputs to one output"));
        }
        if self.named().iter().any(|(_, m)| !m.is_finite()) {
            return Err(Error::invalid("non-finite parameter"));
        }
        Ok(())
    }

    /// Every parameter matrix in a fixed order: f, g, h, w.
    pub fn named(&self) -> Vec<(String, Matrix)> {
        let mut out: Vec<(String, Matrix)> = Vec::new();
        for (n, m) in self
            .f
            .named("f")
            .into_iter()
            .chain(self.g.named("g"))
            .chain(self.h.named("h"))
            .chain(self.w.named("w"))
        {
            out.push((n, m.clone()));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = self.f.named_mut("f");
        out.extend(self.g.named_mut("g"));
        out.extend(self.h.named_mut("h"));
        out.extend(self.w.named_mut("w"));
        out
    }

    /// Binds to variables registered in [`named`](Self::named) order.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundModel> {
        let nf = self.f.param_count();
        let ng = self.g.param_count();
        let nh = self.h.param_count();
        let nw = self.w.param_count();
        if vars.len() != nf + ng + nh + nw {
            return Err(Error::invalid(format!(
                "expected {} parameter variables, got {}",
                nf + ng + nh + nw,
                vars.len()
            )));
        }
        Ok(BoundModel {
            f: self.f.bind_vars(&vars[..nf]),
            g: self.g.bind_vars(&vars[nf..nf + ng]),
            h: self.h.bind_vars(&vars[nf + ng..nf + ng + nh]),
            w: self.w.bind_vars(&vars[nf + ng + nh..]),
        })
    }

    pub fn bind(&self, tape: &mut GradTape) -> Result<BoundModel> {
        let vars: Vec<Var> = self
            .named()
            .into_iter()
            .map(|(n, m)| tape.param(n, m))
            .collect();
        self.bind_vars(&vars)
    }
}

/// [`ModelParams`] registered on a tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub f: BoundMlp,
    pub g: BoundMlp,
    pub h: BoundTransfer,
    pub w: BoundMlp,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Losses {
    pub cls: f64,
    pub rg: f64,
    pub aux: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForwardOutput {
    /// T x N class probabilities.
    pub probs: Matrix,
    /// Fusion weights of support nodes, NK per query graph.
    pub lambda_support: Vec<f64>,
    /// Fusion weight of each query; empty when semantic propagation is off.
    pub lambda_query: Vec<f64>,
    pub losses: Losses,
}

impl ForwardOutput {
    /// Arg-max class per query; ties go to the lowest index.
    pub fn predictions(&self) -> Vec<usize> {
        (0..self.probs.rows())
            .map(|i| {
                let row = self.probs.row(i);
                let mut best = 0;
                for (j, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    pub fn accuracy(&self, labels: &[usize]) -> f64 {
        let preds = self.predictions();
        let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
        correct as f64 / labels.len().max(1) as f64
    }
}

/// Tape nodes produced by [`forward_on`].
#[derive(Debug, Clone)]
pub struct ForwardGraph {
    pub probs: Var,
    pub cls_loss: Var,
    pub rg_loss: Option<Var>,
    pub aux_loss: Option<Var>,
    pub total_loss: Var,
    pub lambda_support: Vec<Var>,
    pub lambda_query: Vec<Var>,
}

impl ForwardGraph {
    pub fn output(&self, tape: &GradTape) -> ForwardOutput {
        let collect = |vars: &[Var]| -> Vec<f64> {
            vars.iter()
                .flat_map(|&v| tape.value(v).data().to_vec())
                .collect()
        };
        ForwardOutput {
            probs: tape.value(self.probs).clone(),
            lambda_support: collect(&self.lambda_support),
            lambda_query: collect(&self.lambda_query),
            losses: Losses {
                cls: tape.scalar(self.cls_loss),
                rg: self.rg_loss.map_or(0.0, |v| tape.scalar(v)),
                aux: self.aux_loss.map_or(0.0, |v| tape.scalar(v)),
                total: tape.scalar(self.total_loss),
            },
        }
    }
}

/// Semantic node embeddings: `g(a)` for supports, zero rows for queries.
pub fn encode_semantic_on(tape: &mut GradTape, g: &BoundMlp, attrs: Var, query_count: usize) -> Result<Var> {
    let support = g.forward(tape, attrs)?;
    if query_count == 0 {
        return Ok(support);
    }
    let c = tape.value(support).cols();
    let zeros = tape.input(Matrix::zeros(query_count, c));
    tape.concat_rows(support, zeros)
}

/// Convex combination `λ·zv + (1-λ)·za` per row, `λ = sigmoid(w(zv ‖ za))`.
/// Returns the fused rows and the n x 1 column of weights.
pub fn fuse_on(tape: &mut GradTape, w: &BoundMlp, zv: Var, za: Var) -> Result<(Var, Var)> {
    let cat = tape.concat_cols(zv, za)?;
    let pre = w.forward(tape, cat)?;
    let lambda = tape.sigmoid(pre)?;
    let gap = tape.sub(zv, za)?;
    let weighted = tape.mul_col(gap, lambda)?;
    Ok((tape.add(za, weighted)?, lambda))
}

fn averaging_matrix(labels: &[usize], n_way: usize) -> Result<Matrix> {
    let mut counts = vec![0usize; n_way];
    for &l in labels {
        if l >= n_way {
            return Err(Error::InvalidEpisode(format!("label {l} outside 0..{n_way}")));
        }
        counts[l] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InvalidEpisode(format!("class {empty} has no support samples")));
    }
    Ok(Matrix::from_fn(n_way, labels.len(), |c, i| {
        if labels[i] == c {
            1.0 / counts[c] as f64
        } else {
            0.0
        }
    }))
}

/// Class means of the fused support rows.
pub fn prototypes_on(tape: &mut GradTape, fused_support: Var, labels: &[usize], n_way: usize) -> Result<Var> {
    if tape.value(fused_support).rows() != labels.len() {
        return Err(Error::invalid("one label per support row required"));
    }
    let avg = tape.input(averaging_matrix(labels, n_way)?);
    tape.matmul(avg, fused_support)
}

/// Softmax over negative Euclidean distances from a 1 x c query row to each
/// prototype. Returns a 1 x N row.
pub fn classify_on(tape: &mut GradTape, query: Var, protos: Var) -> Result<Var> {
    let neg_q = tape.scale(query, -1.0)?;
    let diff = tape.add_row(protos, neg_q)?;
    let sq = tape.square(diff)?;
    let d2 = tape.row_sum(sq)?;
    let d = tape.sqrt(d2)?;
    let d = tape.transpose(d)?;
    // The shift cancels in the softmax; it only keeps exp in range.
    let min_d = tape.value(d).data().iter().copied().fold(f64::INFINITY, f64::min);
    let logits = tape.scale(d, -1.0)?;
    let logits = tape.shift(logits, min_d)?;
    let e = tape.exp(logits)?;
    let z = tape.sum(e)?;
    let inv = tape.powf(z, -1.0)?;
    tape.scale_by(e, inv)
}

/// Mean negative log-likelihood of the true classes.
pub fn cls_loss_on(tape: &mut GradTape, probs: Var, labels: &[usize]) -> Result<Var> {
    let (t, n) = tape.value(probs).shape();
    if labels.len() != t || t == 0 {
        return Err(Error::invalid("one label per probability row required"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
        return Err(Error::invalid(format!("label {bad} outside 0..{n}")));
    }
    let onehot = tape.input(Matrix::from_fn(t, n, |i, j| if labels[i] == j { 1.0 } else { 0.0 }));
    let picked = tape.mul(probs, onehot)?;
    let p = tape.row_sum(picked)?;
    let p = tape.clamp_min(p, PROB_FLOOR)?;
    let lp = tape.log(p)?;
    let m = tape.mean(lp)?;
    tape.scale(m, -1.0)
}

/// Instance or relation constraint between support embeddings of the two
/// modalities. `None` when the constraint is off.
pub fn aux_constraint_on(
    tape: &mut GradTape,
    aux: AuxConstraint,
    zv_support: Var,
    za_support: Var,
) -> Result<Option<Var>> {
    match aux {
        AuxConstraint::None => Ok(None),
        AuxConstraint::InstanceConstraint => {
            let d = tape.sub(zv_support, za_support)?;
            let sq = tape.square(d)?;
            Ok(Some(tape.mean(sq)?))
        }
        AuxConstraint::RelationConstraint => {
            let s = tape.value(zv_support).rows();
            if s < 2 {
                return Err(Error::InsufficientPairs { count: s });
            }
            let pairs = off_diagonal_pairs(s);
            let rv = relation_vectors_on(tape, zv_support, &pairs)?;
            let ra = relation_vectors_on(tape, za_support, &pairs)?;
            Ok(Some(rg_loss_on(tape, rv, ra)?))
        }
    }
}

fn check_hyper(alpha: f64, mu: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidConfig(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if !(mu >= 0.0 && mu.is_finite()) {
        return Err(Error::InvalidConfig(format!("mu must be >= 0, got {mu}")));
    }
    Ok(())
}

/// Records the full forward pass for `episode` onto `tape`.
pub fn forward_on(
    tape: &mut GradTape,
    model: &BoundModel,
    episode: &Episode,
    mode: AblationMode,
    alpha: f64,
    mu: f64,
) -> Result<ForwardGraph> {
    mode.validate()?;
    check_hyper(alpha, mu)?;
    let nk = episode.support_count();
    let t = episode.query_count();
    let n_way = episode.n_way();
    let labels = episode.support_labels();
    if t == 0 {
        return Err(Error::InvalidEpisode("episode has no queries".into()));
    }
    let support_idx: Vec<usize> = (0..nk).collect();

    let xs = tape.input(episode.support_features().clone());
    let xq = tape.input(episode.query_features().clone());
    let x_all = tape.concat_rows(xs, xq)?;
    let zv_all = model.f.forward(tape, x_all)?;
    let attrs = tape.input(episode.support_attributes().clone());
    let za_support = encode_semantic_on(tape, &model.g, attrs, 0)?;
    let c = tape.value(zv_all).cols();
    let zv_support = tape.gather_rows(zv_all, support_idx.clone())?;

    let aux_loss = aux_constraint_on(tape, mode.aux, zv_support, za_support)?;

    // Pairwise dissimilarities for every pair a per-query graph can use:
    // support-support first (so the guidance loss can slice them off), then
    // support-query and query-support. Query-query pairs never share a graph.
    let mut rg_loss = None;
    let mut pair_dist: Option<(Var, Vec<Vec<usize>>)> = None;
    if mode.propagates() {
        if mode.rg && nk < 2 {
            return Err(Error::InsufficientPairs { count: nk });
        }
        let n_all = nk + t;
        let mut pairs = off_diagonal_pairs(nk);
        let ss_count = pairs.len();
        for q in nk..n_all {
            for s in 0..nk {
                pairs.push((s, q));
                pairs.push((q, s));
            }
        }
        let zero_slot = pairs.len();
        let mut lookup = vec![vec![zero_slot; n_all]; n_all];
        for (k, &(i, j)) in pairs.iter().enumerate() {
            lookup[i][j] = k;
        }
        let rel = relation_vectors_on(tape, zv_all, &pairs)?;
        let dist = if mode.rg {
            let rectified = model.h.forward(tape, rel)?;
            let rt_ss = tape.gather_rows(rectified, (0..ss_count).collect())?;
            let ra_ss = relation_vectors_on(tape, za_support, &off_diagonal_pairs(nk))?;
            rg_loss = Some(rg_loss_on(tape, rt_ss, ra_ss)?);
            let a = tape.abs(rectified)?;
            tape.row_sum(a)?
        } else {
            tape.row_sum(rel)?
        };
        let zero = tape.input(Matrix::zeros(1, 1));
        let dist = tape.concat_rows(dist, zero)?;
        pair_dist = Some((dist, lookup));
    }

    let zero_query_sem = tape.input(Matrix::zeros(1, c));
    let za_nodes = tape.concat_rows(za_support, zero_query_sem)?;

    // Without propagation the supports do not depend on the query.
    let fixed_support = if mode.propagates() {
        None
    } else {
        let (fused, lambda) = fuse_on(tape, &model.w, zv_support, za_support)?;
        let protos = prototypes_on(tape, fused, labels, n_way)?;
        Some((protos, lambda))
    };

    let mut prob_rows: Option<Var> = None;
    let mut lambda_support = Vec::new();
    let mut lambda_query = Vec::new();
    if let Some((_, lambda)) = fixed_support {
        lambda_support.push(lambda);
    }
    for q in 0..t {
        let mut nodes = support_idx.clone();
        nodes.push(nk + q);
        let zv_nodes = tape.gather_rows(zv_all, nodes.clone())?;
        let (protos, query_row) = match (&fixed_support, &pair_dist) {
            (Some((protos, _)), _) => (*protos, tape.gather_rows(zv_nodes, vec![nk])?),
            (None, Some((dist, lookup))) => {
                let n = nk + 1;
                let idx: Vec<usize> = (0..n)
                    .flat_map(|a| (0..n).map(move |b| (a, b)))
                    .map(|(a, b)| lookup[nodes[a]][nodes[b]])
                    .collect();
                let d = tape.gather_rows(*dist, idx)?;
                let d = tape.reshape(d, n, n)?;
                let s = normalized_gaussian_on(tape, d)?;
                let p = propagation_matrix_on(tape, s, alpha)?;
                let zv_t = if mode.vp { tape.matmul(p, zv_nodes)? } else { zv_nodes };
                let za_t = if mode.sp { tape.matmul(p, za_nodes)? } else { za_nodes };
                if mode.sp {
                    let (fused, lambda) = fuse_on(tape, &model.w, zv_t, za_t)?;
                    let fs = tape.gather_rows(fused, support_idx.clone())?;
                    let fq = tape.gather_rows(fused, vec![nk])?;
                    lambda_support.push(tape.gather_rows(lambda, support_idx.clone())?);
                    lambda_query.push(tape.gather_rows(lambda, vec![nk])?);
                    (prototypes_on(tape, fs, labels, n_way)?, fq)
                } else {
                    let vs = tape.gather_rows(zv_t, support_idx.clone())?;
                    let (fs, lambda) = fuse_on(tape, &model.w, vs, za_support)?;
                    lambda_support.push(lambda);
                    let fq = tape.gather_rows(zv_t, vec![nk])?;
                    (prototypes_on(tape, fs, labels, n_way)?, fq)
                }
            }
            (None, None) => unreachable!("propagating modes always build distances"),
        };
        let row = classify_on(tape, query_row, protos)?;
        prob_rows = Some(match prob_rows {
            None => row,
            Some(acc) => tape.concat_rows(acc, row)?,
        });
    }
    let probs = prob_rows.expect("at least one query");

    let cls_loss = cls_loss_on(tape, probs, episode.query_labels_for_eval())?;
    let mut total = cls_loss;
    for extra in [rg_loss, aux_loss].into_iter().flatten() {
        let weighted = tape.scale(extra, mu)?;
        total = tape.add(total, weighted)?;
    }
    let tv = tape.scalar(total);
    if !tv.is_finite() {
        return Err(Error::NumericInstability(format!("total loss is {tv}")));
    }
    Ok(ForwardGraph {
        probs,
        cls_loss,
        rg_loss,
        aux_loss,
        total_loss: total,
        lambda_support,
        lambda_query,
    })
}

/// Runs the forward pass on plain values.
pub fn map_forward(
    episode: &Episode,
    params: &ModelParams,
    mode: AblationMode,
    alpha: f64,
    mu: f64,
) -> Result<ForwardOutput> {
    let mut tape = GradTape::new();
    let bound = params.bind(&mut tape)?;
    let graph = forward_on(&mut tape, &bound, episode, mode, alpha, mu)?;
    Ok(graph.output(&tape))
}

pub fn encode_visual(f: &Mlp, x: &Matrix) -> Result<Matrix> {
    f.apply(x)
}

pub fn encode_semantic(g: &Mlp, attrs: &Matrix, query_count: usize) -> Result<Matrix> {
    let mut tape = GradTape::new();
    let bound = g.bind(&mut tape, "g");
    let a = tape.input(attrs.clone());
    let z = encode_semantic_on(&mut tape, &bound, a, query_count)?;
    Ok(tape.value(z).clone())
}

/// Fuses one visual and one semantic row; returns the fused row and λ.
pub fn fuse(zv: &[f64], za: &[f64], w: &Mlp) -> Result<(Vec<f64>, f64)> {
    if zv.len() != za.len() {
        return Err(Error::invalid("fusion rows differ in length"));
    }
    let mut tape = GradTape::new();
    let bound = w.bind(&mut tape, "w");
    let a = tape.input(Matrix::new(1, zv.len(), zv.to_vec())?);
    let b = tape.input(Matrix::new(1, za.len(), za.to_vec())?);
    let (fused, lambda) = fuse_on(&mut tape, &bound, a, b)?;
    Ok((tape.value(fused).data().to_vec(), tape.scalar(lambda)))
}

pub fn prototypes(fused_support: &Matrix, labels: &[usize], n_way: usize) -> Result<Matrix> {
    let mut tape = GradTape::new();
    let s = tape.input(fused_support.clone());
    let p = prototypes_on(&mut tape, s, labels, n_way)?;
    Ok(tape.value(p).clone())
}

pub fn classify(query: &[f64], protos: &Matrix) -> Result<Vec<f64>> {
    let mut tape = GradTape::new();
    let q = tape.input(Matrix::new(1, query.len(), query.to_vec())?);
    let p = tape.input(protos.clone());
    let out = classify_on(&mut tape, q, p)?;
    Ok(tape.value(out).data().to_vec())
}

pub fn cls_loss(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    let mut tape = GradTape::new();
    let p = tape.input(probs.clone());
    let l = cls_loss_on(&mut tape, p, labels)?;
    Ok(tape.scalar(l))
}

/// Value of the instance or relation constraint; zero when `aux` is `None`.
pub fn aux_constraint_loss(aux: AuxConstraint, zv_support: &Matrix, za_support: &Matrix) -> Result<f64> {
    let mut tape = GradTape::new();
    let a = tape.input(zv_support.clone());
    let b = tape.input(za_support.clone());
    Ok(aux_constraint_on(&mut tape, aux, a, b)?.map_or(0.0, |v| tape.scalar(v)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;

    fn m(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn table_rows_and_labels() {
        let labels: Vec<String> = AblationMode::TABLE.iter().map(|m| m.label()).collect();
        assert_eq!(labels, ["baseline", "VP", "SP", "VP+SP", "SP+RG", "VP+SP+RG"]);
        assert!(AblationMode::flags(false, false, true).validate().is_err());
        assert!(AblationMode::TABLE.iter().all(|m| m.validate().is_ok()));
    }

    #[test]
    fn semantic_query_rows_are_zero() {
        let g = Mlp {
            layers: vec![Linear {
                weight: m(&[vec![1.0, 2.0], vec![3.0, -1.0]]),
                bias: m(&[vec![0.5, 0.5]]),
            }],
        };
        let z = encode_semantic(&g, &m(&[vec![1.0, 1.0]]), 2).unwrap();
        assert_eq!(z, m(&[vec![4.5, 1.5], vec![0.0, 0.0], vec![0.0, 0.0]]));
        assert_eq!(encode_semantic(&g, &m(&[vec![1.0, 1.0]]), 0).unwrap().rows(), 1);
    }

    #[test]
    fn zero_visual_encoder_gives_zero_embeddings() {
        let f = Mlp::zeros(&[4, 6, 3]);
        let z = encode_visual(&f, &Matrix::filled(5, 4, 2.5)).unwrap();
        assert_eq!(z, Matrix::zeros(5, 3));
    }

    #[test]
    fn fusion_of_equal_rows_is_identity() {
        let w = Mlp::random(&[4, 3, 1], &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(4));
        let (fused, lambda) = fuse(&[1.0, -2.0], &[1.0, -2.0], &w).unwrap();
        assert_eq!(fused, vec![1.0, -2.0]);
        assert!(lambda > 0.0 && lambda < 1.0);
    }

    #[test]
    fn zero_weight_learner_gives_midpoint() {
        let w = Mlp::zeros(&[4, 3, 1]);
        let (fused, lambda) = fuse(&[2.0, 0.0], &[0.0, 4.0], &w).unwrap();
        assert_eq!(lambda, 0.5);
        assert_eq!(fused, vec![1.0, 2.0]);
    }

    #[test]
    fn prototypes_cases() {
        let s = m(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(prototypes(&s, &[0, 1], 2).unwrap(), s);
        let dup = m(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![5.0, 5.0], vec![5.0, 5.0]]);
        assert_eq!(
            prototypes(&dup, &[0, 0, 1, 1], 2).unwrap(),
            m(&[vec![1.0, 2.0], vec![5.0, 5.0]])
        );
        assert!(matches!(
            prototypes(&s, &[0, 0], 2),
            Err(Error::InvalidEpisode(_))
        ));
    }

    #[test]
    fn classify_cases() {
        let protos = m(&[vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]]);
        let p = classify(&[0.0, 0.0], &protos).unwrap();
        for v in &p {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let far = m(&[vec![0.0, 0.0], vec![100.0, 0.0], vec![0.0, 100.0]]);
        let p = classify(&[0.0, 0.0], &far).unwrap();
        assert!(p[0] > 1.0 - 1e-15 && p[1] < 1e-40);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn classification_loss_cases() {
        let perfect = m(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(cls_loss(&perfect, &[0, 1]).unwrap(), 0.0);
        let uniform = Matrix::filled(3, 5, 0.2);
        assert!((cls_loss(&uniform, &[0, 3, 4]).unwrap() - 5f64.ln()).abs() < 1e-15);
        // zero probability is floored, not infinite
        let zero = m(&[vec![0.0, 1.0]]);
        assert!((cls_loss(&zero, &[0]).unwrap() - (-PROB_FLOOR.ln())).abs() < 1e-9);
        assert!(cls_loss(&perfect, &[0, 2]).is_err());
    }

    #[test]
    fn aux_losses_vanish_on_equal_inputs() {
        let z = m(&[vec![1.0, 2.0], vec![0.5, -1.0], vec![3.0, 0.0]]);
        assert_eq!(aux_constraint_loss(AuxConstraint::InstanceConstraint, &z, &z).unwrap(), 0.0);
        assert_eq!(aux_constraint_loss(AuxConstraint::RelationConstraint, &z, &z).unwrap(), 0.0);
        let shifted = z.map(|v| v + 1.0);
        // translation changes instances but not relations
        assert_eq!(aux_constraint_loss(AuxConstraint::InstanceConstraint, &z, &shifted).unwrap(), 1.0);
        assert_eq!(aux_constraint_loss(AuxConstraint::RelationConstraint, &z, &shifted).unwrap(), 0.0);
        assert_eq!(aux_constraint_loss(AuxConstraint::None, &z, &shifted).unwrap(), 0.0);
    }
}
