//! Plain-loop reference implementations used to cross-check the tape-based
//! pipeline. Nothing here touches [`GradTape`](crate::tape::GradTape): every
//! quantity is recomputed with nested loops over `Vec<f64>` rows, and the
//! propagation matrix comes from a Gauss-Jordan inverse instead of LU.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::episodes::{sample_episode, synth_generate, Episode, Split, SynthSpec};
use crate::gradcheck::{finite_diff_check_with, GradCheckReport, Stencil, DEFAULT_STEP};
use crate::graph::{gaussian_adjacency, neumann_propagate, propagate, propagation_matrix, symmetric_normalize};
use crate::matrix::{pairwise_sq_distances, Matrix};
use crate::model::{forward_on, AblationMode, AuxConstraint, ModelDims, ModelParams};
use crate::nn::{Linear, Mlp};
use crate::relation::TransferModule;

type Rows = Vec<Vec<f64>>;

fn rows_of(m: &Matrix) -> Rows {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn linear_row(l: &Linear, x: &[f64]) -> Vec<f64> {
    (0..l.weight.cols())
        .map(|j| {
            let mut acc = l.bias.get(0, j);
            for (i, xi) in x.iter().enumerate() {
                acc += xi * l.weight.get(i, j);
            }
            acc
        })
        .collect()
}

pub fn mlp_row(mlp: &Mlp, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for (k, layer) in mlp.layers.iter().enumerate() {
        if k > 0 {
            h = h.into_iter().map(softplus).collect();
        }
        h = linear_row(layer, &h);
    }
    h
}

fn transfer_row(h: &TransferModule, r: &[f64]) -> Vec<f64> {
    match h {
        TransferModule::Identity { .. } => r.to_vec(),
        TransferModule::Mlp(m) => mlp_row(m, r),
    }
}

fn relation(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).collect()
}

/// Population standard deviation of the off-diagonal entries, 1 if tiny.
pub fn kernel_width(d: &Rows) -> f64 {
    let n = d.len();
    let mut vals = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                vals.push(d[i][j]);
            }
        }
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
    let std = var.sqrt();
    if std < 1e-12 {
        1.0
    } else {
        std
    }
}

pub fn kernel(d: &Rows) -> Rows {
    let n = d.len();
    let s2 = kernel_width(d);
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                a[i][j] = (-d[i][j] / s2).exp();
            }
        }
    }
    a
}

pub fn normalize(a: &Rows) -> Rows {
    let deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    let n = a.len();
    let mut s = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            s[i][j] = a[i][j] / (deg[i] * deg[j]).sqrt();
        }
    }
    s
}

/// `normalize(kernel(d))` evaluated in the log domain, with log-sum-exp
/// degrees, so it stays finite when every kernel entry underflows.
pub fn log_normalized_kernel(d: &Rows) -> Rows {
    let n = d.len();
    let s2 = kernel_width(d);
    let log_deg: Vec<f64> = (0..n)
        .map(|i| {
            let logs: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| -d[i][j] / s2).collect();
            let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            top + logs.iter().map(|l| (l - top).exp()).sum::<f64>().ln()
        })
        .collect();
    let mut s = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s[i][j] = (-d[i][j] / s2 - 0.5 * (log_deg[i] + log_deg[j])).exp();
            }
        }
    }
    s
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn invert(m: &Rows) -> Option<Rows> {
    let n = m.len();
    let mut a: Rows = m
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = r.clone();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        let p = a[col][col];
        for v in a[col].iter_mut() {
            *v /= p;
        }
        for r in 0..n {
            if r != col {
                let f = a[r][col];
                if f != 0.0 {
                    for k in 0..2 * n {
                        a[r][k] -= f * a[col][k];
                    }
                }
            }
        }
    }
    Some(a.into_iter().map(|r| r[n..].to_vec()).collect())
}

pub fn propagation(s: &Rows, alpha: f64) -> Rows {
    let n = s.len();
    let sys: Rows = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 } - alpha * s[i][j]).collect())
        .collect();
    let inv = invert(&sys).expect("I - αS is invertible for α < 1");
    inv.into_iter()
        .map(|r| r.into_iter().map(|v| (1.0 - alpha) * v).collect())
        .collect()
}

pub fn matmul(a: &Rows, b: &Rows) -> Rows {
    let inner = b.len();
    let cols = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|r| {
            (0..cols)
                .map(|j| (0..inner).map(|k| r[k] * b[k][j]).sum())
                .collect()
        })
        .collect()
}

fn fuse(w: &Mlp, zv: &[f64], za: &[f64]) -> (Vec<f64>, f64) {
    let mut cat = zv.to_vec();
    cat.extend_from_slice(za);
    let lambda = sigmoid(mlp_row(w, &cat)[0]);
    let fused = zv.iter().zip(za).map(|(v, a)| lambda * v + (1.0 - lambda) * a).collect();
    (fused, lambda)
}

fn prototypes(fused: &[Vec<f64>], labels: &[usize], n_way: usize) -> Rows {
    let c = fused[0].len();
    let mut sums = vec![vec![0.0; c]; n_way];
    let mut counts = vec![0.0; n_way];
    for (row, &l) in fused.iter().zip(labels) {
        for k in 0..c {
            sums[l][k] += row[k];
        }
        counts[l] += 1.0;
    }
    for (s, n) in sums.iter_mut().zip(&counts) {
        for v in s.iter_mut() {
            *v /= n;
        }
    }
    sums
}

pub fn softmax_neg_dist(q: &[f64], protos: &Rows) -> Vec<f64> {
    let d: Vec<f64> = protos
        .iter()
        .map(|p| p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .collect();
    let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = d.iter().map(|x| (lo - x).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

fn mean_sq_rel(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0.0;
    for (x, y) in a.iter().zip(b) {
        for (u, v) in x.iter().zip(y) {
            total += (u - v) * (u - v);
            count += 1.0;
        }
    }
    total / count
}

fn support_relations(z: &[Vec<f64>]) -> Rows {
    let n = z.len();
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                out.push(relation(&z[i], &z[j]));
            }
        }
    }
    out
}

/// Everything the reference pass computes for one episode.
#[derive(Debug, Clone)]
pub struct ReferenceOutput {
    pub probs: Rows,
    pub lambda_support: Vec<f64>,
    pub lambda_query: Vec<f64>,
    pub cls: f64,
    pub rg: f64,
    pub aux: f64,
    pub total: f64,
    /// Propagated semantic row of each query (zero row when nothing propagates).
    pub query_semantics: Rows,
}

/// Scalar re-derivation of the full forward pass.
pub fn reference_forward(
    episode: &Episode,
    params: &ModelParams,
    mode: AblationMode,
    alpha: f64,
    mu: f64,
) -> ReferenceOutput {
    let nk = episode.support_count();
    let n_way = episode.n_way();
    let labels = episode.support_labels();
    let xs = rows_of(episode.support_features());
    let xq = rows_of(episode.query_features());
    let zv_s: Rows = xs.iter().map(|x| mlp_row(&params.f, x)).collect();
    let zv_q: Rows = xq.iter().map(|x| mlp_row(&params.f, x)).collect();
    let za_s: Rows = rows_of(episode.support_attributes())
        .iter()
        .map(|a| mlp_row(&params.g, a))
        .collect();
    let c = zv_s[0].len();

    let aux = match mode.aux {
        AuxConstraint::None => 0.0,
        AuxConstraint::InstanceConstraint => mean_sq_rel(&zv_s, &za_s),
        AuxConstraint::RelationConstraint => mean_sq_rel(&support_relations(&zv_s), &support_relations(&za_s)),
    };
    let rg = if mode.rg {
        let rect: Rows = support_relations(&zv_s)
            .iter()
            .map(|r| transfer_row(&params.h, r))
            .collect();
        mean_sq_rel(&rect, &support_relations(&za_s))
    } else {
        0.0
    };

    let mut probs = Vec::new();
    let mut lambda_support = Vec::new();
    let mut lambda_query = Vec::new();
    let mut query_semantics = Vec::new();

    if !mode.propagates() {
        let mut fused = Vec::new();
        for (v, a) in zv_s.iter().zip(&za_s) {
            let (f, l) = fuse(&params.w, v, a);
            fused.push(f);
            lambda_support.push(l);
        }
        let protos = prototypes(&fused, labels, n_way);
        for q in &zv_q {
            probs.push(softmax_neg_dist(q, &protos));
            query_semantics.push(vec![0.0; c]);
        }
    } else {
        for q in &zv_q {
            let mut zv = zv_s.clone();
            zv.push(q.clone());
            let mut za = za_s.clone();
            za.push(vec![0.0; c]);
            let n = nk + 1;
            let mut d = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        let r = relation(&zv[i], &zv[j]);
                        d[i][j] = if mode.rg {
                            transfer_row(&params.h, &r).iter().map(|v| v.abs()).sum()
                        } else {
                            r.iter().sum()
                        };
                    }
                }
            }
            let p = propagation(&log_normalized_kernel(&d), alpha);
            let zv_t = if mode.vp { matmul(&p, &zv) } else { zv };
            let za_t = if mode.sp { matmul(&p, &za) } else { za };
            query_semantics.push(za_t[nk].clone());
            let (fused_s, fused_q) = if mode.sp {
                let mut fs = Vec::new();
                for i in 0..nk {
                    let (f, l) = fuse(&params.w, &zv_t[i], &za_t[i]);
                    fs.push(f);
                    lambda_support.push(l);
                }
                let (fq, lq) = fuse(&params.w, &zv_t[nk], &za_t[nk]);
                lambda_query.push(lq);
                (fs, fq)
            } else {
                let mut fs = Vec::new();
                for i in 0..nk {
                    let (f, l) = fuse(&params.w, &zv_t[i], &za_s[i]);
                    fs.push(f);
                    lambda_support.push(l);
                }
                (fs, zv_t[nk].clone())
            };
            let protos = prototypes(&fused_s, labels, n_way);
            probs.push(softmax_neg_dist(&fused_q, &protos));
        }
    }

    let truth = episode.query_labels_for_eval();
    let cls = probs
        .iter()
        .zip(truth)
        .map(|(p, &l)| -p[l].max(1e-12).ln())
        .sum::<f64>()
        / probs.len() as f64;
    let total = cls + mu * rg + mu * aux;
    ReferenceOutput {
        probs,
        lambda_support,
        lambda_query,
        cls,
        rg,
        aux,
        total,
        query_semantics,
    }
}

/// Hand-set 2-way 1-shot episode with one query and 2-d embeddings.
pub fn scripted_case() -> (Episode, ModelParams) {
    let m = |rows: &[&[f64]]| Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).expect("rectangular");
    let episode = Episode::new(
        2,
        1,
        m(&[&[1.0, 0.0, 0.5], &[0.0, 1.0, -0.5]]),
        m(&[&[1.0, 0.0], &[0.0, 1.0]]),
        vec![0, 1],
        m(&[&[0.8, 0.1, 0.4]]),
        vec![0],
    )
    .expect("scripted episode is valid");
    let lin = |w: &[&[f64]], b: &[f64]| Linear {
        weight: m(w),
        bias: m(&[b]),
    };
    let params = ModelParams {
        f: Mlp {
            layers: vec![
                lin(&[&[0.6, -0.2], &[0.1, 0.5], &[0.3, 0.3]], &[0.05, -0.1]),
                lin(&[&[1.0, 0.2], &[-0.3, 0.9]], &[0.0, 0.1]),
            ],
        },
        g: Mlp {
            layers: vec![
                lin(&[&[0.7, 0.1], &[-0.2, 0.8]], &[0.0, 0.05]),
                lin(&[&[0.9, -0.1], &[0.2, 1.1]], &[-0.05, 0.0]),
            ],
        },
        h: TransferModule::Mlp(Mlp {
            layers: vec![
                lin(&[&[1.2, -0.3], &[0.4, 0.8]], &[0.1, -0.2]),
                lin(&[&[0.5, 0.2], &[-0.1, 0.7]], &[0.0, 0.05]),
            ],
        }),
        w: Mlp {
            layers: vec![
                lin(&[&[0.3, -0.2], &[0.1, 0.4], &[-0.5, 0.2], &[0.2, 0.1]], &[0.0, 0.1]),
                lin(&[&[0.8], &[-0.6]], &[0.2]),
            ],
        },
    };
    (episode, params)
}

/// Largest gap between closed-form propagation and the 64-term series over
/// `count` random Gaussian graphs with 2..=`max_n` nodes.
pub fn neumann_gap(seed: u64, count: usize, max_n: usize, alpha: f64) -> crate::Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let n = rng.random_range(2..=max_n.max(2));
        let c = rng.random_range(1..=8);
        let z = Matrix::from_fn(n, c, |_, _| rng.random_range(-2.0..2.0));
        let (a, _) = gaussian_adjacency(&pairwise_sq_distances(&z)?)?;
        let s = symmetric_normalize(&a)?;
        let closed = propagate(&propagation_matrix(&s, alpha)?, &z)?;
        let series = neumann_propagate(&s, alpha, &z, 64)?;
        worst = worst.max(closed.max_abs_diff(&series));
    }
    Ok(worst)
}

/// Largest deviation of the tape pipeline from [`reference_forward`] on the
/// scripted case, over every component ablation.
pub fn scripted_gap() -> crate::Result<f64> {
    let (episode, params) = scripted_case();
    let mut worst: f64 = 0.0;
    for mode in AblationMode::TABLE {
        let got = crate::model::map_forward(&episode, &params, mode, 0.2, 1.0)?;
        let want = reference_forward(&episode, &params, mode, 0.2, 1.0);
        for (i, row) in want.probs.iter().enumerate() {
            for (j, p) in row.iter().enumerate() {
                worst = worst.max((got.probs.get(i, j) - p).abs());
            }
        }
        for (a, b) in got.lambda_support.iter().zip(&want.lambda_support) {
            worst = worst.max((a - b).abs());
        }
        for (a, b) in got.lambda_query.iter().zip(&want.lambda_query) {
            worst = worst.max((a - b).abs());
        }
        worst = worst.max((got.losses.total - want.total).abs());
    }
    Ok(worst)
}

/// Synthetic 3-way 2-shot episode and a small random model for gradient
/// checks.
pub fn gradcheck_case(seed: u64) -> crate::Result<(Episode, ModelParams)> {
    let spec = SynthSpec {
        train_classes: 3,
        val_classes: 0,
        test_classes: 0,
        samples_per_class: 4,
        d_v: 6,
        d_a: 5,
        ..SynthSpec::default()
    };
    let ds = synth_generate(&spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let episode = sample_episode(&ds, Split::Train, 3, 2, 6, &mut rng)?;
    let dims = ModelDims { d_v: 6, d_a: 5, embed: 4, hidden: 8 };
    Ok((episode, ModelParams::random(dims, &mut rng)))
}

/// Finite-difference check of the total loss with respect to every model
/// parameter, using the adaptive-step estimator.
pub fn pipeline_gradcheck(
    episode: &Episode,
    params: &ModelParams,
    mode: AblationMode,
    alpha: f64,
    mu: f64,
) -> crate::Result<GradCheckReport> {
    finite_diff_check_with(&params.named(), DEFAULT_STEP, Stencil::Adaptive, |tape, vars| {
        let bound = params.bind_vars(vars)?;
        Ok(forward_on(tape, &bound, episode, mode, alpha, mu)?.total_loss)
    })
}

/// Every component ablation plus the two auxiliary constraints on the full
/// model, in report order.
pub fn gradcheck_modes() -> Vec<AblationMode> {
    let mut modes = AblationMode::TABLE.to_vec();
    for aux in [AuxConstraint::InstanceConstraint, AuxConstraint::RelationConstraint] {
        modes.push(AblationMode { aux, ..AblationMode::FULL });
    }
    modes
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_jordan_inverts() {
        let m = vec![vec![4.0, 1.0, 0.0], vec![1.0, 3.0, 1.0], vec![0.0, 1.0, 2.0]];
        let inv = invert(&m).unwrap();
        let prod = matmul(&m, &inv);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((prod[i][j] - want).abs() < 1e-14);
            }
        }
        assert!(invert(&vec![vec![1.0, 2.0], vec![2.0, 4.0]]).is_none());
    }

    #[test]
    fn log_domain_graph_agrees_and_survives_underflow() {
        let d = vec![vec![0.0, 1.0, 4.0], vec![1.0, 0.0, 2.0], vec![4.0, 2.0, 0.0]];
        let plain = normalize(&kernel(&d));
        let logd = log_normalized_kernel(&d);
        for i in 0..3 {
            for j in 0..3 {
                assert!((plain[i][j] - logd[i][j]).abs() < 1e-14);
            }
        }
        let far: Rows = d.iter().map(|r| r.iter().map(|&v| if v > 0.0 { 1e6 + v } else { 0.0 }).collect()).collect();
        assert!(normalize(&kernel(&far)).iter().flatten().any(|v| v.is_nan()));
        let far_s = log_normalized_kernel(&far);
        for i in 0..3 {
            for j in 0..3 {
                assert!((far_s[i][j] - plain[i][j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn scripted_case_matches_pipeline() {
        assert!(scripted_gap().unwrap() < 1e-10);
    }

    #[test]
    fn full_pipeline_gradients() {
        let (episode, params) = gradcheck_case(0).unwrap();
        for mode in [AblationMode::BASELINE, AblationMode::FULL] {
            let r = pipeline_gradcheck(&episode, &params, mode, 0.2, 1.0).unwrap();
            assert!(r.max_rel_error <= 1e-4, "{}: {r:?}", mode.label());
        }
    }

    #[test]
    fn closed_form_matches_series() {
        assert!(neumann_gap(5, 20, 12, 0.2).unwrap() < 1e-8);
    }
}
