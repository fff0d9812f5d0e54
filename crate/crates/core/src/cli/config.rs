//! Run configuration: a TOML file overlaid by command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::blocksparse::{ExecOptions, Precision};
use crate::error::{Error, Result};
use crate::estimator::DEFAULT_LAST_Q;
use crate::masks::DEFAULT_BLOCK_SIZE;
use crate::search::Budget;
use crate::synth::{HeadKind, SynthSpec, TextStructure, DEFAULT_NOISE_SCALE, DEFAULT_SIGNAL_GAIN};

/// Token layout of generated fixtures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Vision tokens only.
    Grid,
    /// Vision with two text runs.
    Mixed,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenFile {
    pub layout: Option<Layout>,
    pub frames: Option<usize>,
    pub tokens_per_frame: Option<usize>,
    pub d_h: Option<usize>,
    pub heads: Option<Vec<HeadKind>>,
    pub text_period: Option<usize>,
    pub text_verticals: Option<usize>,
    pub signal_gain: Option<f64>,
    pub noise_scale: Option<f64>,
}

/// Contents of a `--config` file. Every key is optional.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub fixture: Option<PathBuf>,
    pub space: Option<PathBuf>,
    pub heads: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub budget: Option<String>,
    pub block_size: Option<usize>,
    pub last_q: Option<usize>,
    pub seed: Option<u64>,
    pub precision: Option<Precision>,
    #[serde(default)]
    pub gen: GenFile,
}

impl ConfigFile {
    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: ConfigFile = toml::from_str(&text).map_err(|e| Error::parse(path, e.message()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.fixture, &mut cfg.space, &mut cfg.heads, &mut cfg.out]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub layout: Layout,
    pub spec: SynthSpec,
    pub text: TextStructure,
    pub heads: Vec<HeadKind>,
}

/// Fully resolved parameters of one command.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub fixture: Option<PathBuf>,
    pub space: Option<PathBuf>,
    pub heads: Option<PathBuf>,
    pub out: PathBuf,
    pub budget: Budget,
    pub block_size: usize,
    pub last_q: usize,
    pub seed: u64,
    pub precision: Precision,
    pub gen: GenConfig,
}

/// Values given on the command line; these win over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub fixture: Option<PathBuf>,
    pub space: Option<PathBuf>,
    pub heads: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub budget: Option<String>,
    pub block_size: Option<usize>,
    pub last_q: Option<usize>,
    pub seed: Option<u64>,
    pub precision: Option<Precision>,
    pub gen: GenFile,
}

fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

impl RunConfig {
    pub fn resolve(file: ConfigFile, flags: Overrides) -> Result<Self> {
        let budget: Budget = pick(flags.budget, file.budget, "scaled".to_string()).parse()?;
        let block_size = pick(flags.block_size, file.block_size, DEFAULT_BLOCK_SIZE);
        let last_q = pick(flags.last_q, file.last_q, DEFAULT_LAST_Q);
        if block_size == 0 || last_q == 0 {
            return Err(Error::InvalidArgument("block_size and last_q must be positive".into()));
        }
        let seed = pick(flags.seed, file.seed, 0);
        let (g, fg) = (flags.gen, file.gen);
        let layout = pick(g.layout, fg.layout, Layout::Grid);
        let frames = pick(g.frames, fg.frames, 32);
        let tpf = pick(g.tokens_per_frame, fg.tokens_per_frame, 32);
        let d_h = pick(g.d_h, fg.d_h, 32);
        let mut spec = match layout {
            Layout::Grid => SynthSpec::grid(frames, tpf, d_h, seed),
            Layout::Mixed => SynthSpec::mixed(frames, tpf, d_h, seed),
        };
        spec.signal_gain = pick(g.signal_gain, fg.signal_gain, DEFAULT_SIGNAL_GAIN);
        spec.noise_scale = pick(g.noise_scale, fg.noise_scale, DEFAULT_NOISE_SCALE);
        let dt = TextStructure::default();
        let text = TextStructure {
            period: pick(g.text_period, fg.text_period, dt.period),
            n_vertical: pick(g.text_verticals, fg.text_verticals, dt.n_vertical),
        };
        let default_heads = match layout {
            Layout::Grid => vec![HeadKind::Grid],
            Layout::Mixed => vec![HeadKind::Mixed],
        };
        let heads = pick(g.heads, fg.heads, default_heads);
        Ok(RunConfig {
            fixture: flags.fixture.or(file.fixture),
            space: flags.space.or(file.space),
            heads: flags.heads.or(file.heads),
            out: pick(flags.out, file.out, PathBuf::from("out")),
            budget,
            block_size,
            last_q,
            seed,
            precision: pick(flags.precision, file.precision, Precision::F64),
            gen: GenConfig {
                layout,
                spec,
                text,
                heads,
            },
        })
    }

    pub fn exec_options(&self) -> ExecOptions {
        ExecOptions {
            block_size: self.block_size,
            last_q: self.last_q,
            precision: self.precision,
            ..ExecOptions::default()
        }
    }

    /// Path of a required input, which must exist.
    pub fn require(&self, which: Option<&PathBuf>, name: &str) -> Result<PathBuf> {
        let p = which.ok_or_else(|| Error::InvalidArgument(format!("no {name} given")))?;
        if !p.exists() {
            return Err(Error::MissingInput(p.clone()));
        }
        Ok(p.clone())
    }
}
