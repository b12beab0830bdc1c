#![allow(dead_code)]

use icl_borrow::features::PooledBundle;
use icl_borrow::rng::Rng;
use icl_borrow::synth::Pattern;

pub fn bundle(id: u64, label: u32, t: usize, d: usize, rng: &mut Rng) -> PooledBundle {
    PooledBundle {
        id,
        label,
        pattern: if id % 3 == 0 { Pattern::M1Only } else { Pattern::Full },
        pooled_len: t,
        dim: d,
        p: (0..t * d).map(|_| rng.normal() as f32).collect(),
        cls: (0..d).map(|_| rng.normal() as f32).collect(),
    }
}

/// A current bundle (label 1) and `q` neighbors with alternating labels.
pub fn fixture(q: usize, t: usize, d: usize, k: usize, seed: u64) -> (PooledBundle, Vec<PooledBundle>) {
    let mut rng = Rng::new(seed);
    let cur = bundle(1000, 1 % k as u32, t, d, &mut rng);
    let nb = (0..q as u64).map(|i| bundle(i, (i % k as u64) as u32, t, d, &mut rng)).collect();
    (cur, nb)
}

pub fn refs(v: &[PooledBundle]) -> Vec<&PooledBundle> {
    v.iter().collect()
}
