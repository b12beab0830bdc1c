use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{BaselineConfig, BaselineKind};
use crate::binio::read_file;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::features::check_pooled_len;
use crate::icl::{IclConfig, Variant};
use crate::retrieval::RetrievalGroup;
use crate::rng::derive_seed;
use crate::synth::{Fingerprint, MissingState, SplitSizes, SynthConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ICL-CA")]
    IclCa,
    #[serde(rename = "ICL-NTP")]
    IclNtp,
    #[serde(rename = "ICL-MF")]
    IclMf,
    #[serde(rename = "FT-C")]
    FtC,
    #[serde(rename = "FT-A")]
    FtA,
    #[serde(rename = "MAP")]
    Map,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::IclCa,
        Method::IclNtp,
        Method::IclMf,
        Method::FtC,
        Method::FtA,
        Method::Map,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::IclCa => "ICL-CA",
            Method::IclNtp => "ICL-NTP",
            Method::IclMf => "ICL-MF",
            Method::FtC => "FT-C",
            Method::FtA => "FT-A",
            Method::Map => "MAP",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown method {s:?}")))
    }

    pub fn variant(self) -> Option<Variant> {
        match self {
            Method::IclCa => Some(Variant::Ca),
            Method::IclNtp => Some(Variant::Ntp),
            Method::IclMf => Some(Variant::Mf),
            _ => None,
        }
    }

    pub fn from_variant(v: Variant) -> Self {
        match v {
            Variant::Ca => Method::IclCa,
            Variant::Ntp => Method::IclNtp,
            Variant::Mf => Method::IclMf,
        }
    }

    pub fn baseline_kind(self) -> Option<BaselineKind> {
        match self {
            Method::FtC => Some(BaselineKind::FtC),
            Method::FtA => Some(BaselineKind::FtA),
            Method::Map => Some(BaselineKind::Map),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretextConfig {
    /// Training samples drawn for encoder pretraining.
    pub size: usize,
    pub missing: MissingState,
}

impl Default for PretextConfig {
    fn default() -> Self {
        PretextConfig {
            size: 2000,
            missing: MissingState::new(0.5, 0.25, 0.25),
        }
    }
}

/// One experiment: a synthetic world, an encoder, the methods to compare and
/// the (r_sub × replicate) grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(with = "crate::rng::seed_serde")]
    pub master_seed: u64,
    pub synth: SynthConfig,
    pub sizes: SplitSizes,
    pub missing: MissingState,
    pub pretext: PretextConfig,
    pub encoder: EncoderConfig,
    pub methods: Vec<Method>,
    /// `variant`, `d`, `num_classes` and `seed` are filled per cell.
    pub icl: IclConfig,
    /// `kind`, `num_classes` and `seed` are filled per cell.
    pub baseline: BaselineConfig,
    pub retrieval_group: RetrievalGroup,
    pub r_sub: Vec<f64>,
    /// Replicate indices; each yields an independent cell seed.
    pub seeds: Vec<u64>,
    /// Where results go. Not written back out, so reports do not depend on it.
    #[serde(skip_serializing)]
    pub out_dir: Option<PathBuf>,
    pub save_checkpoints: bool,
    /// Write the neighbors of every ICL test query under `trace/`.
    pub trace_retrieval: bool,
    /// Single-sample predictions timed per method (0 disables timing).
    pub timing_samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        ExperimentConfig {
            name: "synthetic".into(),
            master_seed: 0,
            encoder: EncoderConfig::for_world(&synth),
            synth,
            sizes: SplitSizes {
                train: 2000,
                val: 500,
                test: 1000,
            },
            missing: MissingState::default(),
            pretext: PretextConfig::default(),
            methods: vec![Method::IclCa, Method::FtC],
            icl: IclConfig::default(),
            baseline: BaselineConfig::default(),
            retrieval_group: RetrievalGroup::FullOnly,
            r_sub: vec![0.05],
            seeds: vec![0],
            out_dir: None,
            save_checkpoints: false,
            trace_retrieval: false,
            timing_samples: 100,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(format!("experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::config(format!("{} is not UTF-8", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.missing.validate()?;
        self.pretext.missing.validate()?;
        self.encoder.validate()?;
        self.encoder.accepts(&self.synth)?;
        if self.pretext.size == 0 {
            return Err(Error::config("pretext.size must be positive"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("methods must not be empty"));
        }
        if self.r_sub.is_empty() || self.seeds.is_empty() {
            return Err(Error::config("r_sub and seeds must not be empty"));
        }
        if let Some(r) = self.r_sub.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(Error::config(format!("r_sub values must lie in (0, 1], got {r}")));
        }
        for m in &self.methods {
            match m.variant() {
                Some(v) => self.icl_for(v, 0).validate()?,
                None => self.baseline_for(m.baseline_kind().expect("baseline method"), 0).validate()?,
            }
        }
        if self.methods.iter().any(|m| m.variant().is_some()) {
            check_pooled_len(self.icl.t, self.encoder.l1, self.encoder.l2)?;
        }
        Ok(())
    }

    /// Encoder config with its seed derived from the master seed.
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            seed: derive_seed(self.master_seed, &["encoder", &self.encoder.seed.to_string()]),
            ..self.encoder.clone()
        }
    }

    pub fn icl_for(&self, variant: Variant, cell_seed: u64) -> IclConfig {
        IclConfig {
            variant,
            d: self.encoder.d,
            num_classes: self.synth.num_classes,
            seed: cell_seed,
            ..self.icl.clone()
        }
    }

    pub fn baseline_for(&self, kind: BaselineKind, cell_seed: u64) -> BaselineConfig {
        BaselineConfig {
            kind,
            num_classes: self.synth.num_classes,
            seed: cell_seed,
            ..self.baseline.clone()
        }
    }

    /// Changes with any field of the configuration.
    pub fn fingerprint(&self) -> Fingerprint {
        Fingerprint::of(&[b"experiment", self.to_toml().as_bytes()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = ExperimentConfig::from_toml(
            "methods = [\"ICL-NTP\", \"MAP\"]\nr_sub = [0.1, 0.2]\n[synth]\nnum_classes = 2\n[icl]\nq = 2\n",
        )
        .unwrap();
        assert_eq!(cfg.methods, vec![Method::IclNtp, Method::Map]);
        assert_eq!(cfg.synth.num_classes, 2);
        assert_eq!(cfg.synth.latent_dim, 16);
        assert_eq!(cfg.icl.q, 2);
        assert_eq!(cfg.icl_for(Variant::Ntp, 3).num_classes, 2);
    }

    #[test]
    fn invalid_configs_are_config_errors() {
        for text in [
            "methods = []",
            "r_sub = [0.0]",
            "r_sub = [1.5]",
            "bogus = 1",
            "[icl]\nt = 14",
            "[icl]\nq = 0",
            "[encoder]\nraw_tokens_m1 = 3",
            "methods = [\"XYZ\"]",
        ] {
            let e = ExperimentConfig::from_toml(text).unwrap_err();
            assert!(matches!(e, Error::Config(_)), "{text}: {e}");
        }
    }

    #[test]
    fn fingerprint_tracks_every_field() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.synth.noise_std += 0.1;
        let mut c = a.clone();
        c.icl.lambda_ntp = 0.2;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
        assert_eq!(a.fingerprint(), a.clone().fingerprint());
    }

    #[test]
    fn method_names_parse() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()).unwrap(), m);
        }
        assert_eq!(Method::parse("icl-ca").unwrap(), Method::IclCa);
    }
}
