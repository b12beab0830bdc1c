//! Synthetic two-modality classification world.
//!
//! Each class owns a latent vector; a sample perturbs its class latent with
//! isotropic Gaussian noise and renders each modality through a fixed random
//! linear map applied to the latent coordinates that modality can see. The
//! complementarity knob `c` hides the first half of the leading `c·latent_dim`
//! coordinates from modality 1 and the second half from modality 2, so those
//! coordinates are only jointly observable.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Fingerprint(pub [u8; 32]);

impl Fingerprint {
    pub fn of(parts: &[&[u8]]) -> Self {
        let mut h = Sha256::new();
        for p in parts {
            h.update((p.len() as u64).to_le_bytes());
            h.update(p);
        }
        Fingerprint(h.finalize().into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let bytes = hex::decode(s.trim()).map_err(|e| Error::Data(format!("bad fingerprint hex: {e}")))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Data("fingerprint must be 32 bytes".into()))?;
        Ok(Fingerprint(arr))
    }
}

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({})", &self.to_hex()[..16])
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Pattern {
    Full,
    M1Only,
    M2Only,
}

impl Pattern {
    pub const ALL: [Pattern; 3] = [Pattern::Full, Pattern::M1Only, Pattern::M2Only];

    pub fn code(self) -> u8 {
        match self {
            Pattern::Full => 0,
            Pattern::M1Only => 1,
            Pattern::M2Only => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Pattern::ALL.get(code as usize).copied()
    }

    pub fn is_full(self) -> bool {
        self == Pattern::Full
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub latent_dim: usize,
    pub tokens_m1: usize,
    pub tokens_m2: usize,
    pub input_dim_m1: usize,
    pub input_dim_m2: usize,
    pub noise_std: f64,
    pub complementarity: f64,
    pub positive_rate: f64,
    /// Seeds the modality rendering maps; shared by every dataset drawn from
    /// this world.
    #[serde(with = "crate::rng::seed_serde")]
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 8,
            latent_dim: 16,
            tokens_m1: 6,
            tokens_m2: 6,
            input_dim_m1: 8,
            input_dim_m2: 8,
            noise_std: 0.6,
            complementarity: 1.0,
            positive_rate: 0.5,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if self.latent_dim == 0 || self.tokens_m1 == 0 || self.tokens_m2 == 0 {
            return Err(Error::config("latent_dim and token counts must be positive"));
        }
        if self.input_dim_m1 == 0 || self.input_dim_m2 == 0 {
            return Err(Error::config("input dims must be positive"));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::config("noise_std must be finite and nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.complementarity) {
            return Err(Error::config("complementarity must lie in [0, 1]"));
        }
        if self.num_classes == 2 && !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return Err(Error::config("positive_rate must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn m1_len(&self) -> usize {
        self.tokens_m1 * self.input_dim_m1
    }

    pub fn m2_len(&self) -> usize {
        self.tokens_m2 * self.input_dim_m2
    }

    fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissingState {
    pub frac_full: f64,
    pub frac_m1_only: f64,
    pub frac_m2_only: f64,
}

impl Default for MissingState {
    fn default() -> Self {
        MissingState::new(0.3, 0.7, 0.0)
    }
}

impl MissingState {
    pub const fn new(frac_full: f64, frac_m1_only: f64, frac_m2_only: f64) -> Self {
        MissingState {
            frac_full,
            frac_m1_only,
            frac_m2_only,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fr = [self.frac_full, self.frac_m1_only, self.frac_m2_only];
        if fr.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::config("missing-state fractions must lie in [0, 1]"));
        }
        if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("missing-state fractions must sum to 1"));
        }
        Ok(())
    }

    pub fn fractions(&self) -> [f64; 3] {
        [self.frac_full, self.frac_m1_only, self.frac_m2_only]
    }

    /// Short label such as `30F-70m1-0m2`.
    pub fn label(&self) -> String {
        format!(
            "{}F-{}m1-{}m2",
            (self.frac_full * 100.0).round(),
            (self.frac_m1_only * 100.0).round(),
            (self.frac_m2_only * 100.0).round()
        )
    }
}

/// One record. Modality matrices are row-major `tokens × input_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSample {
    pub id: u64,
    pub x_m1: Option<Vec<f32>>,
    pub x_m2: Option<Vec<f32>>,
    pub label: u32,
}

impl RawSample {
    pub fn pattern(&self) -> Pattern {
        match (&self.x_m1, &self.x_m2) {
            (Some(_), Some(_)) => Pattern::Full,
            (Some(_), None) => Pattern::M1Only,
            (None, Some(_)) => Pattern::M2Only,
            (None, None) => unreachable!("sample {} carries no modality", self.id),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub split: Split,
    pub samples: Vec<RawSample>,
    pub fingerprint: Fingerprint,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn count_pattern(&self, p: Pattern) -> usize {
        self.samples.iter().filter(|s| s.pattern() == p).count()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.samples.iter().map(|s| s.id).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// The fixed parts of a world: class latents and modality maps.
#[derive(Clone, Debug)]
pub struct SynthWorld {
    pub class_latents: Vec<Vec<f64>>,
    /// `latent_dim × (tokens_m1·input_dim_m1)`
    pub map_m1: Mat,
    pub map_m2: Mat,
    pub visible_m1: Vec<bool>,
    pub visible_m2: Vec<bool>,
}

impl SynthWorld {
    pub fn new(config: &SynthConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let ld = config.latent_dim;
        let mut map_rng = Rng::new(derive_seed(config.seed, &["world", "maps"]));
        let std = 1.0 / (ld as f64).sqrt();
        let mut map = |cols: usize| Mat::from_vec(ld, cols, (0..ld * cols).map(|_| map_rng.normal() * std).collect());
        let map_m1 = map(config.m1_len());
        let map_m2 = map(config.m2_len());

        let n_comp = (config.complementarity * ld as f64).round() as usize;
        let half = n_comp / 2;
        let visible_m1 = (0..ld).map(|j| !(j < half)).collect();
        let visible_m2 = (0..ld).map(|j| !(j >= half && j < n_comp)).collect();

        // Class k = a + A·b. Coordinates hidden from m1 carry a's code, those
        // hidden from m2 carry b's code, the shared rest carry k's own code.
        let k = config.num_classes;
        let a_count = (k as f64).sqrt().ceil() as usize;
        let b_count = k.div_ceil(a_count);
        let mut lat_rng = Rng::new(derive_seed(seed, &["world", "latents"]));
        let mut book = |n: usize| -> Vec<Vec<f64>> { (0..n).map(|_| (0..ld).map(|_| lat_rng.normal()).collect()).collect() };
        let (book_a, book_b, book_k) = (book(a_count), book(b_count), book(k));
        let class_latents = (0..k)
            .map(|c| {
                (0..ld)
                    .map(|j| match j {
                        j if j < half => book_a[c % a_count][j],
                        j if j < n_comp => book_b[c / a_count][j],
                        j => book_k[c][j],
                    })
                    .collect()
            })
            .collect();
        Ok(SynthWorld {
            class_latents,
            map_m1,
            map_m2,
            visible_m1,
            visible_m2,
        })
    }

    /// Renders a latent through one modality's visible coordinates.
    pub fn render(&self, z: &[f64], m2: bool) -> Vec<f64> {
        let (map, visible) = if m2 {
            (&self.map_m2, &self.visible_m2)
        } else {
            (&self.map_m1, &self.visible_m1)
        };
        let mut out = vec![0.0; map.cols];
        for (j, (&zj, &vis)) in z.iter().zip(visible).enumerate() {
            if !vis || zj == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(map.row(j)) {
                *o += zj * a;
            }
        }
        out
    }
}

/// Largest-remainder apportionment of `total` across `weights`, earlier
/// entries winning ties. `caps`, when given, bounds each entry.
pub fn apportion(total: usize, weights: &[f64], caps: Option<&[usize]>) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut alloc: Vec<usize> = quotas.iter().map(|q| (q + 1e-9).floor() as usize).collect();
    if let Some(caps) = caps {
        for (a, &c) in alloc.iter_mut().zip(caps) {
            *a = (*a).min(c);
        }
    }
    let mut order: Vec<usize> = (0..weights.len()).collect();
    let frac = |i: usize| quotas[i] - alloc[i] as f64;
    order.sort_by(|&a, &b| frac(b).partial_cmp(&frac(a)).unwrap().then(a.cmp(&b)));
    let mut left = total.saturating_sub(alloc.iter().sum());
    while left > 0 {
        let before = left;
        for &i in &order {
            if left == 0 {
                break;
            }
            if caps.map_or(true, |c| alloc[i] < c[i]) && weights[i] > 0.0 {
                alloc[i] += 1;
                left -= 1;
            }
        }
        if left == before {
            break;
        }
    }
    alloc
}

fn class_counts(config: &SynthConfig, n: usize) -> Vec<usize> {
    if config.num_classes == 2 {
        let pos = (config.positive_rate * n as f64).round() as usize;
        vec![n - pos.min(n), pos.min(n)]
    } else {
        apportion(n, &vec![1.0; config.num_classes], None)
    }
}

/// Draws the train/val/test splits of one world. All samples are FULL.
pub fn generate_dataset(config: &SynthConfig, sizes: SplitSizes, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    config.validate()?;
    if sizes.train == 0 || sizes.val == 0 || sizes.test == 0 {
        return Err(Error::config("every split needs at least one sample"));
    }
    let world = SynthWorld::new(config, seed)?;
    let mut next_id = 0u64;
    let mut make = |split: Split, n: usize| {
        let ds = generate_split(config, &world, split, n, seed, next_id);
        next_id += n as u64;
        ds
    };
    let train = make(Split::Train, sizes.train);
    let val = make(Split::Val, sizes.val);
    let test = make(Split::Test, sizes.test);
    Ok((train, val, test))
}

fn generate_split(config: &SynthConfig, world: &SynthWorld, split: Split, n: usize, seed: u64, id_base: u64) -> Dataset {
    let mut rng = Rng::new(derive_seed(seed, &["split", split.name()]));
    let mut labels: Vec<u32> = class_counts(config, n)
        .iter()
        .enumerate()
        .flat_map(|(k, &c)| std::iter::repeat(k as u32).take(c))
        .collect();
    rng.shuffle(&mut labels);

    let samples = labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let z: Vec<f64> = world.class_latents[label as usize]
                .iter()
                .map(|&m| m + config.noise_std * rng.normal())
                .collect();
            let to_f32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<f32>>();
            RawSample {
                id: id_base + i as u64,
                x_m1: Some(to_f32(world.render(&z, false))),
                x_m2: Some(to_f32(world.render(&z, true))),
                label,
            }
        })
        .collect();

    let fingerprint = Fingerprint::of(&[
        b"generate",
        config.canonical().as_bytes(),
        split.name().as_bytes(),
        &(n as u64).to_le_bytes(),
        &id_base.to_le_bytes(),
        &seed.to_le_bytes(),
    ]);
    Dataset {
        config: config.clone(),
        split,
        samples,
        fingerprint,
    }
}

fn indices_by_class(ds: &Dataset, filter: impl Fn(&RawSample) -> bool) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); ds.config.num_classes];
    for (i, s) in ds.samples.iter().enumerate() {
        if filter(s) {
            by_class[s.label as usize].push(i);
        }
    }
    by_class
}

/// Drops modalities so pattern counts follow `state` exactly (largest
/// remainder, ties to FULL then M1_ONLY), stratified by class.
pub fn inject_missingness(dataset: &Dataset, state: MissingState, seed: u64) -> Result<Dataset> {
    state.validate()?;
    if let Some(s) = dataset.samples.iter().find(|s| s.pattern() != Pattern::Full) {
        return Err(Error::Precondition(format!(
            "inject_missingness expects an all-FULL dataset; sample {} is {:?}",
            s.id,
            s.pattern()
        )));
    }
    let n = dataset.len();
    let global = apportion(n, &state.fractions(), None);

    let by_class = indices_by_class(dataset, |_| true);
    let mut remaining: Vec<usize> = by_class.iter().map(Vec::len).collect();
    // per class: [m1, m2] counts; FULL takes whatever is left
    let mut per_class = vec![[0usize; 2]; by_class.len()];
    for (slot, &count) in global[1..].iter().enumerate() {
        let weights: Vec<f64> = remaining.iter().map(|&r| r as f64).collect();
        let alloc = apportion(count, &weights, Some(&remaining));
        for (k, a) in alloc.into_iter().enumerate() {
            per_class[k][slot] = a;
            remaining[k] -= a;
        }
    }

    let mut rng = Rng::new(derive_seed(seed, &["inject", dataset.split.name()]));
    let mut out = dataset.clone();
    for (k, idx) in by_class.iter().enumerate() {
        let mut idx = idx.clone();
        rng.shuffle(&mut idx);
        let [m1, m2] = per_class[k];
        for &i in &idx[..m1] {
            out.samples[i].x_m2 = None;
        }
        for &i in &idx[m1..m1 + m2] {
            out.samples[i].x_m1 = None;
        }
    }
    out.fingerprint = Fingerprint::of(&[
        b"inject",
        &dataset.fingerprint.0,
        toml::to_string(&state).expect("state serializes").as_bytes(),
        &seed.to_le_bytes(),
    ]);
    Ok(out)
}

/// Stratified subsample of `round(r_sub·N)` samples: first apportioned across
/// patterns, then across classes within each pattern. Output keeps the input
/// order.
pub fn subsample(dataset: &Dataset, r_sub: f64, seed: u64) -> Result<Dataset> {
    if !(r_sub > 0.0 && r_sub <= 1.0) {
        return Err(Error::config(format!("r_sub must lie in (0, 1], got {r_sub}")));
    }
    if dataset.is_empty() {
        return Err(Error::Precondition("cannot subsample an empty dataset".into()));
    }
    if r_sub == 1.0 {
        return Ok(dataset.clone());
    }
    let n = dataset.len();
    let target = ((r_sub * n as f64).round() as usize).clamp(1, n);

    let strata: Vec<Vec<Vec<usize>>> = Pattern::ALL
        .iter()
        .map(|&p| indices_by_class(dataset, |s| s.pattern() == p))
        .collect();
    let pattern_sizes: Vec<usize> = strata.iter().map(|c| c.iter().map(Vec::len).sum()).collect();
    let per_pattern = apportion(
        target,
        &pattern_sizes.iter().map(|&s| s as f64).collect::<Vec<_>>(),
        Some(&pattern_sizes),
    );

    let mut rng = Rng::new(derive_seed(seed, &["subsample", dataset.split.name()]));
    let mut keep = vec![false; n];
    for (classes, &count) in strata.iter().zip(&per_pattern) {
        let sizes: Vec<usize> = classes.iter().map(Vec::len).collect();
        let alloc = apportion(count, &sizes.iter().map(|&s| s as f64).collect::<Vec<_>>(), Some(&sizes));
        for (idx, a) in classes.iter().zip(alloc) {
            let mut idx = idx.clone();
            rng.shuffle(&mut idx);
            for &i in &idx[..a] {
                keep[i] = true;
            }
        }
    }

    let mut out = dataset.clone();
    out.samples = dataset
        .samples
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(s, _)| s.clone())
        .collect();
    out.fingerprint = Fingerprint::of(&[
        b"subsample",
        &dataset.fingerprint.0,
        &r_sub.to_le_bytes(),
        &seed.to_le_bytes(),
    ]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(k: usize) -> SynthConfig {
        SynthConfig {
            num_classes: k,
            ..SynthConfig::default()
        }
    }

    fn sizes(train: usize, val: usize, test: usize) -> SplitSizes {
        SplitSizes { train, val, test }
    }

    #[test]
    fn generation_is_deterministic_and_ids_unique() {
        let (a, b, c) = generate_dataset(&cfg(4), sizes(30, 5, 5), 11).unwrap();
        let (a2, ..) = generate_dataset(&cfg(4), sizes(30, 5, 5), 11).unwrap();
        assert_eq!(a, a2);
        let mut ids: Vec<u64> = [a.ids(), b.ids(), c.ids()].concat();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 40);
        assert!(a.samples.iter().all(|s| s.pattern() == Pattern::Full));
    }

    #[test]
    fn binary_positive_count_is_rounded_rate() {
        let c = SynthConfig {
            num_classes: 2,
            positive_rate: 0.13,
            ..SynthConfig::default()
        };
        let (train, ..) = generate_dataset(&c, sizes(1000, 2, 2), 1).unwrap();
        assert_eq!(train.samples.iter().filter(|s| s.label == 1).count(), 130);
    }

    #[test]
    fn multiclass_is_uniform() {
        let (train, ..) = generate_dataset(&cfg(8), sizes(100, 2, 2), 1).unwrap();
        for k in 0..8 {
            let n = train.samples.iter().filter(|s| s.label == k).count();
            assert!(n == 12 || n == 13);
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let mut c = cfg(1);
        assert!(matches!(generate_dataset(&c, sizes(1, 1, 1), 0), Err(Error::Config(_))));
        c.num_classes = 3;
        c.complementarity = 1.5;
        assert!(generate_dataset(&c, sizes(1, 1, 1), 0).is_err());
        assert!(generate_dataset(&cfg(3), sizes(0, 1, 1), 0).is_err());
    }

    #[test]
    fn complementarity_hides_disjoint_halves() {
        let c = SynthConfig {
            complementarity: 1.0,
            latent_dim: 8,
            ..SynthConfig::default()
        };
        let w = SynthWorld::new(&c, 0).unwrap();
        assert_eq!(w.visible_m1, vec![false, false, false, false, true, true, true, true]);
        assert_eq!(w.visible_m2, vec![true, true, true, true, false, false, false, false]);
        let c0 = SynthConfig { complementarity: 0.0, ..c };
        let w0 = SynthWorld::new(&c0, 0).unwrap();
        assert!(w0.visible_m1.iter().chain(&w0.visible_m2).all(|&v| v));
    }

    #[test]
    fn inject_thirty_seventy_state() {
        let (train, ..) = generate_dataset(&cfg(4), sizes(100, 2, 2), 3).unwrap();
        let out = inject_missingness(&train, MissingState::new(0.3, 0.7, 0.0), 5).unwrap();
        assert_eq!(out.count_pattern(Pattern::Full), 30);
        assert_eq!(out.count_pattern(Pattern::M1Only), 70);
        assert_eq!(out.count_pattern(Pattern::M2Only), 0);
        assert!(out.samples.iter().all(|s| s.x_m1.is_some() || s.x_m2.is_some()));
        assert_ne!(out.fingerprint, train.fingerprint);
    }

    #[test]
    fn inject_identity_and_rounding() {
        let (train, ..) = generate_dataset(&cfg(3), sizes(50, 2, 2), 3).unwrap();
        let same = inject_missingness(&train, MissingState::new(1.0, 0.0, 0.0), 5).unwrap();
        assert_eq!(same.samples, train.samples);

        let (ten, ..) = generate_dataset(&cfg(3), sizes(10, 2, 2), 3).unwrap();
        let out = inject_missingness(&ten, MissingState::new(0.26, 0.74, 0.0), 5).unwrap();
        assert_eq!(out.count_pattern(Pattern::Full), 3);
        assert_eq!(out.count_pattern(Pattern::M1Only), 7);
    }

    #[test]
    fn inject_is_class_stratified() {
        let (train, ..) = generate_dataset(&cfg(4), sizes(200, 2, 2), 3).unwrap();
        let out = inject_missingness(&train, MissingState::new(0.5, 0.25, 0.25), 5).unwrap();
        for k in 0..4 {
            let full = out.samples.iter().filter(|s| s.label == k && s.pattern() == Pattern::Full).count();
            assert_eq!(full, 25);
        }
    }

    #[test]
    fn inject_rejects_non_full_input() {
        let (train, ..) = generate_dataset(&cfg(3), sizes(20, 2, 2), 3).unwrap();
        let once = inject_missingness(&train, MissingState::default(), 1).unwrap();
        assert!(matches!(
            inject_missingness(&once, MissingState::default(), 1),
            Err(Error::Precondition(_))
        ));
        let bad = MissingState::new(0.5, 0.6, 0.0);
        assert!(matches!(inject_missingness(&train, bad, 1), Err(Error::Config(_))));
    }

    #[test]
    fn subsample_counts() {
        let (train, ..) = generate_dataset(&cfg(4), sizes(1000, 2, 2), 3).unwrap();
        assert_eq!(subsample(&train, 0.01, 1).unwrap().len(), 10);
        assert_eq!(subsample(&train, 1.0, 1).unwrap().ids(), train.ids());
        assert!(matches!(subsample(&train, 0.0, 1), Err(Error::Config(_))));
        assert!(subsample(&train, 1.5, 1).is_err());

        let (two, ..) = generate_dataset(&cfg(2), sizes(200, 2, 2), 3).unwrap();
        let two = inject_missingness(&two, MissingState::default(), 2).unwrap();
        let sub = subsample(&two, 0.1, 4).unwrap();
        assert_eq!(sub.len(), 20);
        assert_eq!(sub.count_pattern(Pattern::Full), 6);
    }

    #[test]
    fn apportion_sums_and_respects_caps() {
        assert_eq!(apportion(10, &[0.26, 0.74, 0.0], None), vec![3, 7, 0]);
        assert_eq!(apportion(10, &[0.3, 0.35, 0.35], None), vec![3, 4, 3]);
        assert_eq!(apportion(5, &[1.0, 1.0], Some(&[1, 10])), vec![1, 4]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(40))]

            #[test]
            fn subsample_preserves_missing_rate(n in 20usize..300, r in 0.05f64..1.0, k in 2usize..6, seed in 0u64..1000) {
                let (train, ..) = generate_dataset(&cfg(k), sizes(n, 1, 1), seed).unwrap();
                let train = inject_missingness(&train, MissingState::new(0.3, 0.35, 0.35), seed).unwrap();
                let sub = subsample(&train, r, seed).unwrap();
                let before = train.count_pattern(Pattern::Full) as f64 / n as f64;
                let after = sub.count_pattern(Pattern::Full) as f64 / sub.len() as f64;
                prop_assert!((after - before).abs() <= 1.0 / sub.len() as f64 + 1e-12);
                prop_assert_eq!(sub.len(), ((r * n as f64).round() as usize).clamp(1, n));
            }

            #[test]
            fn apportion_is_exact(total in 0usize..500, w in proptest::collection::vec(0.0f64..10.0, 1..8)) {
                prop_assume!(w.iter().sum::<f64>() > 0.0);
                let a = apportion(total, &w, None);
                prop_assert_eq!(a.iter().sum::<usize>(), total);
            }
        }
    }
}
