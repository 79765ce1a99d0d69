#![allow(dead_code)]

use mapnet::episodes::Episode;
use mapnet::matrix::Matrix;
use mapnet::model::{AblationMode, AuxConstraint, ModelDims, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

/// Episode with clustered random features: each class gets its own centre.
pub fn random_episode(seed: u64, n_way: usize, k_shot: usize, per_class: usize, d_v: usize, d_a: usize) -> Episode {
    let mut r = rng(seed);
    let centres = random_matrix(n_way, d_v, 2.0, &mut r);
    let attrs = random_matrix(n_way, d_a, 1.0, &mut r);
    let draw = |count: usize, r: &mut ChaCha8Rng| {
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for c in 0..n_way {
            for _ in 0..count {
                feats.extend(centres.row(c).iter().map(|v| v + r.random_range(-0.5..0.5)));
                labels.push(c);
            }
        }
        (Matrix::new(n_way * count, d_v, feats).unwrap(), labels)
    };
    let (sf, sl) = draw(k_shot, &mut r);
    let (qf, ql) = draw(per_class, &mut r);
    let sa = attrs.select_rows(&sl).unwrap();
    Episode::new(n_way, k_shot, sf, sa, sl, qf, ql).unwrap()
}

pub fn random_params(seed: u64, d_v: usize, d_a: usize, embed: usize) -> ModelParams {
    ModelParams::random(ModelDims { d_v, d_a, embed, hidden: 8 }, &mut rng(seed))
}

/// Every ablation row plus both auxiliary constraints on the full model.
pub fn all_modes() -> Vec<AblationMode> {
    let mut modes = AblationMode::TABLE.to_vec();
    for aux in [AuxConstraint::InstanceConstraint, AuxConstraint::RelationConstraint] {
        modes.push(AblationMode { aux, ..AblationMode::FULL });
    }
    modes
}
