//! Run configuration, read from `key = value` files.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fileio::read_text;
use crate::text::TextMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    /// The same fraction of every class.
    Stratified,
    /// A fraction of all labeled pixels, ignoring classes.
    Uniform,
}

/// Which embedding the two linear classifiers read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassifierInput {
    Scale1,
    Scale2,
    Concat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Full,
    Desk,
}

/// The five ablation rungs; each adds one module to the previous one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Ablation {
    Net1,
    Net2,
    Net3,
    Net4,
    Net5,
}

macro_rules! keyword_enum {
    ($t:ty, $what:literal, $($name:literal => $v:expr),+ $(,)?) => {
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($v),)+
                    other => Err(Error::Config(format!(concat!("unknown ", $what, " {:?}"), other))),
                }
            }
        }
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $(if *self == $v { return f.write_str($name); })+
                unreachable!()
            }
        }
    };
}

keyword_enum!(Sampling, "sampling", "stratified" => Sampling::Stratified, "uniform" => Sampling::Uniform);
keyword_enum!(ClassifierInput, "classifier input", "scale1" => ClassifierInput::Scale1,
    "scale2" => ClassifierInput::Scale2, "concat" => ClassifierInput::Concat);
keyword_enum!(Preset, "preset", "full" => Preset::Full, "desk" => Preset::Desk);
keyword_enum!(Ablation, "ablation", "net1" => Ablation::Net1, "net2" => Ablation::Net2,
    "net3" => Ablation::Net3, "net4" => Ablation::Net4, "net5" => Ablation::Net5);

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub lr: f32,
    pub lr_min: f32,
    pub batch: usize,
    pub patch: usize,
    pub epochs: usize,
    pub weight_decay: f32,
    pub alpha: f32,
    pub seed: u64,
    pub runs: usize,
    pub train_fraction: f64,
    pub sampling: Sampling,
    pub text_mode: TextMode,
    pub dtaug: bool,
    pub mwdis: bool,
    pub sfie: bool,
    pub msffa: bool,
    pub pca_components: usize,
    pub c_model: usize,
    pub heads: usize,
    pub d_emb: usize,
    pub text_width: usize,
    pub classifier_input: ClassifierInput,
    /// Keep MWDis (without resampling) in the evaluation path.
    pub mwdis_at_test: bool,
    pub eval_batch: usize,
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub source_aux_hs: Option<PathBuf>,
    pub source_aux_lidar: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            lr: 1e-3,
            lr_min: 0.0,
            batch: 128,
            patch: 11,
            epochs: 20,
            weight_decay: 1e-4,
            alpha: 0.5,
            seed: 0,
            runs: 10,
            train_fraction: 0.1,
            sampling: Sampling::Stratified,
            text_mode: TextMode::SharedSpecific,
            dtaug: true,
            mwdis: true,
            sfie: true,
            msffa: true,
            pca_components: 30,
            c_model: 64,
            heads: 4,
            d_emb: 128,
            text_width: 128,
            classifier_input: ClassifierInput::Scale2,
            mwdis_at_test: true,
            eval_batch: 256,
            source: None,
            target: None,
            source_aux_hs: None,
            source_aux_lidar: None,
        }
    }
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let mut c = RunConfig::default();
        if p == Preset::Desk {
            c.pca_components = 8;
            c.c_model = 16;
            c.d_emb = 32;
            c.text_width = 32;
            c.runs = 5;
        }
        c
    }

    pub fn desk() -> Self {
        Self::preset(Preset::Desk)
    }

    pub fn set_ablation(&mut self, a: Ablation) {
        self.dtaug = a >= Ablation::Net2;
        self.mwdis = a >= Ablation::Net3;
        self.sfie = a >= Ablation::Net4;
        self.msffa = a >= Ablation::Net5;
    }

    pub fn with_ablation(mut self, a: Ablation) -> Self {
        self.set_ablation(a);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr > 0.0),
            ("lr_min", self.lr_min >= 0.0 && self.lr_min <= self.lr),
            ("batch", self.batch > 0),
            ("epochs", self.epochs > 0),
            ("weight_decay", self.weight_decay >= 0.0),
            ("runs", self.runs > 0),
            ("pca_components", self.pca_components > 0),
            ("c_model", self.c_model > 0),
            ("heads", self.heads > 0),
            ("d_emb", self.d_emb > 0),
            ("text_width", self.text_width > 0),
            ("eval_batch", self.eval_batch > 0),
            ("alpha", (0.0..=1.0).contains(&self.alpha)),
            (
                "train_fraction",
                self.train_fraction > 0.0 && self.train_fraction <= 1.0,
            ),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, ok)| !ok) {
            return Err(Error::Config(format!("{k} out of range")));
        }
        if self.patch.is_multiple_of(2) {
            return Err(Error::Config(format!("patch {} must be odd", self.patch)));
        }
        if !self.text_width.is_multiple_of(4) {
            return Err(Error::Config("text_width must be divisible by 4 heads".into()));
        }
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T>
        where
            T::Err: fmt::Display,
        {
            v.parse().map_err(|e| Error::Config(format!("{key} = {v:?}: {e}")))
        }
        let path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        match key {
            "lr" => self.lr = p(key, value)?,
            "lr_min" => self.lr_min = p(key, value)?,
            "batch" => self.batch = p(key, value)?,
            "patch" => self.patch = p(key, value)?,
            "epochs" => self.epochs = p(key, value)?,
            "weight_decay" => self.weight_decay = p(key, value)?,
            "alpha" => self.alpha = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "runs" => self.runs = p(key, value)?,
            "train_fraction" => self.train_fraction = p(key, value)?,
            "sampling" => self.sampling = value.parse()?,
            "text_mode" => self.text_mode = value.parse()?,
            "dtaug" => self.dtaug = p(key, value)?,
            "mwdis" => self.mwdis = p(key, value)?,
            "sfie" => self.sfie = p(key, value)?,
            "msffa" => self.msffa = p(key, value)?,
            "ablation" => self.set_ablation(value.parse()?),
            "pca_components" => self.pca_components = p(key, value)?,
            "c_model" => self.c_model = p(key, value)?,
            "heads" => self.heads = p(key, value)?,
            "d_emb" => self.d_emb = p(key, value)?,
            "text_width" => self.text_width = p(key, value)?,
            "classifier_input" => self.classifier_input = value.parse()?,
            "mwdis_at_test" => self.mwdis_at_test = p(key, value)?,
            "eval_batch" => self.eval_batch = p(key, value)?,
            "source" => self.source = path(value),
            "target" => self.target = path(value),
            "source_aux_hs" => self.source_aux_hs = path(value),
            "source_aux_lidar" => self.source_aux_lidar = path(value),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parse `key = value` lines; `#` starts a comment. A `preset` line is applied
    /// first wherever it appears, and an `ablation` line before the individual
    /// module flags, so explicit keys always win.
    pub fn parse(src: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (ln, raw) in src.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", ln + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = match pairs.iter().rfind(|(k, _)| k == "preset") {
            Some((_, v)) => RunConfig::preset(v.parse()?),
            None => RunConfig::default(),
        };
        let rank = |k: &str| match k {
            "preset" => 0,
            "ablation" => 1,
            _ => 2,
        };
        pairs.sort_by_key(|(k, _)| rank(k));
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }

    /// Every key, in a form [`RunConfig::parse`] reads back to an equal config.
    pub fn to_config_string(&self) -> String {
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        put("lr", self.lr.to_string());
        put("lr_min", self.lr_min.to_string());
        put("batch", self.batch.to_string());
        put("patch", self.patch.to_string());
        put("epochs", self.epochs.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("alpha", self.alpha.to_string());
        put("seed", self.seed.to_string());
        put("runs", self.runs.to_string());
        put("train_fraction", self.train_fraction.to_string());
        put("sampling", self.sampling.to_string());
        put("text_mode", self.text_mode.to_string());
        put("dtaug", self.dtaug.to_string());
        put("mwdis", self.mwdis.to_string());
        put("sfie", self.sfie.to_string());
        put("msffa", self.msffa.to_string());
        put("pca_components", self.pca_components.to_string());
        put("c_model", self.c_model.to_string());
        put("heads", self.heads.to_string());
        put("d_emb", self.d_emb.to_string());
        put("text_width", self.text_width.to_string());
        put("classifier_input", self.classifier_input.to_string());
        put("mwdis_at_test", self.mwdis_at_test.to_string());
        put("eval_batch", self.eval_batch.to_string());
        put("source", opt(&self.source));
        put("target", opt(&self.target));
        put("source_aux_hs", opt(&self.source_aux_hs));
        put("source_aux_lidar", opt(&self.source_aux_lidar));
        s
    }
}
