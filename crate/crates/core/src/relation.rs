//! Relation maps and the relation-guidance transfer.
//!
//! A relation vector between nodes `i` and `j` is the elementwise squared
//! difference of their embeddings, so its l1 norm is the squared Euclidean
//! distance. Maps are stored as an `n²×c` matrix, row `i·n + j` holding
//! `r_ij`. Nodes `0..support_count` are support samples, the rest queries.

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{BoundMlp, Linear, Mlp};
use crate::tape::{GradTape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    SupportSupport,
    SupportQuery,
    QuerySupport,
    QueryQuery,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationMap {
    support_count: usize,
    query_count: usize,
    c: usize,
    vectors: Matrix,
    // false when only the support-support block is known
    complete: bool,
}

impl RelationMap {
    /// Full map over all `support_count + query_count` nodes.
    pub fn complete(support_count: usize, vectors: Matrix) -> Result<Self> {
        let rows = vectors.rows();
        let n = (rows as f64).sqrt().round() as usize;
        if n * n != rows {
            return Err(Error::invalid(format!("{rows} relation vectors is not a square count")));
        }
        if support_count > n {
            return Err(Error::invalid("support count exceeds node count"));
        }
        Ok(Self {
            support_count,
            query_count: n - support_count,
            c: vectors.cols(),
            vectors,
            complete: true,
        })
    }

    /// Map whose query-touching blocks are unknown (and read as zero).
    pub fn support_only(support_vectors: Matrix, support_count: usize, query_count: usize) -> Result<Self> {
        if support_vectors.rows() != support_count * support_count {
            return Err(Error::invalid("support block must hold support_count² vectors"));
        }
        Ok(Self {
            support_count,
            query_count,
            c: support_vectors.cols(),
            vectors: support_vectors,
            complete: query_count == 0,
        })
    }

    pub fn n(&self) -> usize {
        self.support_count + self.query_count
    }

    pub fn dim(&self) -> usize {
        self.c
    }

    pub fn support_count(&self) -> usize {
        self.support_count
    }

    pub fn query_count(&self) -> usize {
        self.query_count
    }

    pub fn is_complete(&self) -> bool {
        self.complete
    }

    /// Raw stacked vectors: `n²×c` when complete, `support_count²×c` otherwise.
    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    /// `r_ij`, or `None` when that block is absent.
    pub fn get(&self, i: usize, j: usize) -> Option<&[f64]> {
        if self.complete {
            let n = self.n();
            (i < n && j < n).then(|| self.vectors.row(i * n + j))
        } else {
            let s = self.support_count;
            (i < s && j < s).then(|| self.vectors.row(i * s + j))
        }
    }

    /// Stacked vectors of one block in row-major pair order, or `None` when
    /// the block is absent.
    pub fn block(&self, block: Block) -> Option<Matrix> {
        let s = self.support_count;
        let n = self.n();
        let (rows, cols) = match block {
            Block::SupportSupport => (0..s, 0..s),
            Block::SupportQuery => (0..s, s..n),
            Block::QuerySupport => (s..n, 0..s),
            Block::QueryQuery => (s..n, s..n),
        };
        if !self.complete && block != Block::SupportSupport {
            return None;
        }
        let mut data = Vec::with_capacity(rows.len() * cols.len() * self.c);
        for i in rows.clone() {
            for j in cols.clone() {
                data.extend_from_slice(self.get(i, j).expect("pair inside a present block"));
            }
        }
        Some(Matrix::from_vec_unchecked(rows.len() * cols.len(), self.c, data))
    }
}

/// Every ordered pair over `n` nodes, row-major.
pub fn all_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect()
}

/// Off-diagonal ordered pairs among the first `n` nodes.
pub fn off_diagonal_pairs(n: usize) -> Vec<(usize, usize)> {
    all_pairs(n).into_iter().filter(|(i, j)| i != j).collect()
}

/// `(z_i - z_j)²` for each requested pair, stacked as rows.
pub fn relation_vectors_on(tape: &mut GradTape, z: Var, pairs: &[(usize, usize)]) -> Result<Var> {
    let left = tape.gather_rows(z, pairs.iter().map(|p| p.0).collect())?;
    let right = tape.gather_rows(z, pairs.iter().map(|p| p.1).collect())?;
    let diff = tape.sub(left, right)?;
    tape.square(diff)
}

/// Full relation map over the rows of `z`.
pub fn relation_map(z: &Matrix, support_count: usize) -> Result<RelationMap> {
    let n = z.rows();
    if support_count == 0 || support_count > n {
        return Err(Error::invalid(format!(
            "support count {support_count} must lie in 1..={n}"
        )));
    }
    let mut tape = GradTape::new();
    let zv = tape.input(z.clone());
    let r = relation_vectors_on(&mut tape, zv, &all_pairs(n))?;
    RelationMap::complete(support_count, tape.value(r).clone())
}

/// Semantic relation map: only the support-support block is known, since
/// queries carry no semantics.
pub fn semantic_support_relations(za_support: &Matrix, query_count: usize) -> Result<RelationMap> {
    let s = za_support.rows();
    if s == 0 || za_support.cols() == 0 {
        return Err(Error::InvalidEpisode("support semantics are missing".into()));
    }
    let mut tape = GradTape::new();
    let zv = tape.input(za_support.clone());
    let r = relation_vectors_on(&mut tape, zv, &all_pairs(s))?;
    RelationMap::support_only(tape.value(r).clone(), s, query_count)
}

/// Relation transfer `h`: affine → softplus → affine, dimension preserving.
#[derive(Debug, Clone, PartialEq)]
pub enum TransferModule {
    /// Returns its input unchanged. Test hook for checking the transfer path
    /// against plain Gaussian adjacency.
    Identity { dim: usize },
    Mlp(Mlp),
}

impl TransferModule {
    pub fn random<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        TransferModule::Mlp(Mlp::random(&[dim, dim, dim], rng))
    }

    pub fn zeros(dim: usize) -> Self {
        TransferModule::Mlp(Mlp {
            layers: vec![Linear::zeros(dim, dim), Linear::zeros(dim, dim)],
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            TransferModule::Identity { dim } => *dim,
            TransferModule::Mlp(m) => m.input_dim(),
        }
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Matrix)> {
        match self {
            TransferModule::Identity { .. } => Vec::new(),
            TransferModule::Mlp(m) => m.named(prefix),
        }
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Matrix)> {
        match self {
            TransferModule::Identity { .. } => Vec::new(),
            TransferModule::Mlp(m) => m.named_mut(prefix),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            TransferModule::Identity { .. } => 0,
            TransferModule::Mlp(m) => m.param_count(),
        }
    }

    pub fn bind_vars(&self, vars: &[Var]) -> BoundTransfer {
        match self {
            TransferModule::Identity { .. } => BoundTransfer::Identity,
            TransferModule::Mlp(m) => BoundTransfer::Mlp(m.bind_vars(vars)),
        }
    }

    pub fn bind(&self, tape: &mut GradTape, prefix: &str) -> BoundTransfer {
        match self {
            TransferModule::Identity { .. } => BoundTransfer::Identity,
            TransferModule::Mlp(m) => BoundTransfer::Mlp(m.bind(tape, prefix)),
        }
    }
}

#[derive(Debug, Clone)]
pub enum BoundTransfer {
    Identity,
    Mlp(BoundMlp),
}

impl BoundTransfer {
    /// Applies `h` to each row independently.
    pub fn forward(&self, tape: &mut GradTape, relations: Var) -> Result<Var> {
        match self {
            BoundTransfer::Identity => Ok(relations),
            BoundTransfer::Mlp(m) => m.forward(tape, relations),
        }
    }
}

/// Applies `h` to every relation vector and zeroes the diagonal again.
pub fn transfer_relations(h: &TransferModule, rel: &RelationMap) -> Result<RelationMap> {
    if !rel.is_complete() {
        return Err(Error::IncompleteRelationMap(
            "transfer needs every relation vector".into(),
        ));
    }
    if h.dim() != rel.dim() {
        return Err(Error::invalid(format!(
            "transfer module has dimension {}, relation map {}",
            h.dim(),
            rel.dim()
        )));
    }
    let n = rel.n();
    let mut tape = GradTape::new();
    let bound = h.bind(&mut tape, "h");
    let r = tape.input(rel.vectors().clone());
    let out = bound.forward(&mut tape, r)?;
    let mask = Matrix::from_fn(n * n, rel.dim(), |row, _| {
        if row / n == row % n {
            0.0
        } else {
            1.0
        }
    });
    let mask = tape.input(mask);
    let out = tape.mul(out, mask)?;
    RelationMap::complete(rel.support_count(), tape.value(out).clone())
}

/// Mean squared error between two stacks of relation vectors.
pub fn rg_loss_on(tape: &mut GradTape, rectified: Var, target: Var) -> Result<Var> {
    let d = tape.sub(rectified, target)?;
    let sq = tape.square(d)?;
    tape.mean(sq)
}

/// Relation-guidance loss over the off-diagonal support-support pairs of a
/// rectified visual map and a semantic map.
pub fn rg_loss(rectified: &RelationMap, semantic: &RelationMap) -> Result<f64> {
    let s = rectified.support_count();
    if semantic.support_count() != s {
        return Err(Error::invalid(format!(
            "support counts differ: {s} vs {}",
            semantic.support_count()
        )));
    }
    if rectified.dim() != semantic.dim() {
        return Err(Error::invalid("relation dimensions differ"));
    }
    if s < 2 {
        return Err(Error::InsufficientPairs { count: s });
    }
    let pairs = off_diagonal_pairs(s);
    let stack = |m: &RelationMap| {
        let data: Vec<f64> = pairs
            .iter()
            .flat_map(|&(i, j)| m.get(i, j).expect("support pair").iter().copied())
            .collect();
        Matrix::from_vec_unchecked(pairs.len(), m.dim(), data)
    };
    let mut tape = GradTape::new();
    let a = tape.input(stack(rectified));
    let b = tape.input(stack(semantic));
    let l = rg_loss_on(&mut tape, a, b)?;
    Ok(tape.scalar(l))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn identical_rows_give_zero_relations() {
        let z = m(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]);
        let r = relation_map(&z, 2).unwrap();
        assert_eq!(r.vectors(), &Matrix::zeros(9, 2));
    }

    #[test]
    fn squared_gaps() {
        let z = m(&[vec![1.0, 0.0], vec![0.0, 2.0]]);
        let r = relation_map(&z, 1).unwrap();
        assert_eq!(r.get(0, 1).unwrap(), &[1.0, 4.0]);
        assert_eq!(r.get(1, 0).unwrap(), &[1.0, 4.0]);
        assert_eq!(r.get(0, 0).unwrap(), &[0.0, 0.0]);
        assert_eq!(r.block(Block::SupportQuery).unwrap(), m(&[vec![1.0, 4.0]]));
        assert_eq!(r.block(Block::QueryQuery).unwrap(), m(&[vec![0.0, 0.0]]));
    }

    #[test]
    fn support_count_bounds() {
        let z = m(&[vec![1.0], vec![2.0]]);
        assert!(relation_map(&z, 0).is_err());
        assert!(relation_map(&z, 3).is_err());
    }

    #[test]
    fn semantic_map_has_only_support_block() {
        let za = m(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let r = semantic_support_relations(&za, 3).unwrap();
        assert!(!r.is_complete());
        assert_eq!(r.get(0, 1).unwrap(), &[1.0, 1.0]);
        assert!(r.get(0, 2).is_none());
        assert!(r.block(Block::QuerySupport).is_none());
        assert!(matches!(
            semantic_support_relations(&Matrix::zeros(0, 2), 1),
            Err(Error::InvalidEpisode(_))
        ));

        let same = m(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        let r = semantic_support_relations(&same, 0).unwrap();
        assert_eq!(r.vectors(), &Matrix::zeros(4, 2));
    }

    #[test]
    fn identity_transfer_preserves_map() {
        let z = m(&[vec![0.3, 1.0], vec![-2.0, 0.5], vec![1.0, 1.0]]);
        let r = relation_map(&z, 2).unwrap();
        let t = transfer_relations(&TransferModule::Identity { dim: 2 }, &r).unwrap();
        assert_eq!(t, r);
    }

    #[test]
    fn zero_transfer_yields_uniform_adjacency() {
        let z = m(&[vec![0.3, 1.0], vec![-2.0, 0.5], vec![1.0, 1.0]]);
        let r = relation_map(&z, 2).unwrap();
        let t = transfer_relations(&TransferModule::zeros(2), &r).unwrap();
        assert_eq!(t.vectors(), &Matrix::zeros(9, 2));
        let (a, s2) = crate::graph::adjacency_from_relations(&t).unwrap();
        assert_eq!(s2, 1.0);
        let want = Matrix::from_fn(3, 3, |i, j| if i == j { 0.0 } else { 1.0 });
        assert_eq!(a, want);
    }

    #[test]
    fn transfer_checks_dimension_and_completeness() {
        let z = m(&[vec![0.3, 1.0], vec![-2.0, 0.5]]);
        let r = relation_map(&z, 1).unwrap();
        assert!(transfer_relations(&TransferModule::zeros(3), &r).is_err());
        let partial = semantic_support_relations(&z, 2).unwrap();
        assert!(matches!(
            transfer_relations(&TransferModule::zeros(2), &partial),
            Err(Error::IncompleteRelationMap(_))
        ));
        assert!(matches!(
            crate::graph::adjacency_from_relations(&partial),
            Err(Error::IncompleteRelationMap(_))
        ));
    }

    #[test]
    fn rg_loss_cases() {
        let za = m(&[vec![0.0, 0.0], vec![0.0, 0.0]]);
        let zr = m(&[vec![1.0, 1.0], vec![0.0, 0.0]]);
        let sem = semantic_support_relations(&za, 0).unwrap();
        let vis = relation_map(&zr, 2).unwrap();
        // each off-diagonal pair: r̃ = [1, 1], r_a = [0, 0]
        assert_eq!(rg_loss(&vis, &sem).unwrap(), 1.0);
        assert_eq!(rg_loss(&vis, &vis).unwrap(), 0.0);

        let single = semantic_support_relations(&m(&[vec![1.0, 2.0]]), 1).unwrap();
        assert!(matches!(
            rg_loss(&single, &single),
            Err(Error::InsufficientPairs { count: 1 })
        ));
    }
}
