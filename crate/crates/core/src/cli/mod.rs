//! Command-line entry points.
//!
//! `gen` writes synthetic fixtures, `analyze` reports coverage, index reuse
//! and heatmaps, `search` calibrates head configurations, and `run` executes
//! them next to the dense oracle and fixed baselines.

pub mod config;
pub mod heatmap;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::blocksparse::{ExecOptions, Precision};
use crate::error::{Error, Result};
use crate::masks::{dense_tiles, index_reuse_recall, tile_flops, top_k_coverage, HeadPattern};
use crate::modality::Modality;
use crate::search::{calibrate, CalibrationTable, HeadConfig, SearchSpace, GLOBAL_KEY};
use crate::synth::{generate_fixture, Fixture, HeadKind};
use crate::tensor::{attention_weights, default_scale, dense_causal_attention, Matrix};

use config::{ConfigFile, GenFile, Layout, Overrides, RunConfig};

/// Coverage targets reported by `analyze`.
pub const COVERAGE_TARGETS: [f64; 3] = [0.90, 0.95, 0.99];
pub const HEADS_FILE: &str = "heads.json";
pub const REPORT_FILE: &str = "report.csv";
pub const COVERAGE_FILE: &str = "coverage.csv";
pub const REUSE_FILE: &str = "reuse.csv";

#[derive(Debug, Parser)]
#[command(
    name = "mmsparse",
    version,
    about = "Modality-aware permutation sparse attention at desk scale"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub block_size: Option<usize>,
    /// `scaled`, `unbounded`, `a_shape:SINK,LOCAL` or a FLOPs count.
    #[arg(long, global = true)]
    pub budget: Option<String>,
    #[arg(long, global = true, value_parser = parse_precision)]
    pub precision: Option<Precision>,
    /// Query rows used by the online estimators.
    #[arg(long, global = true)]
    pub last_q: Option<usize>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic fixture into the output directory.
    Gen {
        #[arg(long, value_enum)]
        layout: Option<Layout>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        tokens_per_frame: Option<usize>,
        #[arg(long)]
        d_h: Option<usize>,
        /// Comma-separated head kinds: grid, lines, mixed, noise.
        #[arg(long, value_delimiter = ',', value_parser = parse_head_kind)]
        heads: Option<Vec<HeadKind>>,
    },
    /// Coverage, index reuse and heatmaps of a fixture.
    Analyze {
        #[arg(long)]
        fixture: Option<PathBuf>,
    },
    /// Calibrate per-head configurations on a fixture.
    Search {
        #[arg(long)]
        fixture: Option<PathBuf>,
        /// Search space JSON; defaults to the reference space scaled to the fixture.
        #[arg(long)]
        space: Option<PathBuf>,
    },
    /// Execute calibrated configurations and report errors and FLOPs.
    Run {
        #[arg(long)]
        fixture: Option<PathBuf>,
        #[arg(long)]
        heads: Option<PathBuf>,
    },
}

fn parse_precision(s: &str) -> std::result::Result<Precision, String> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        _ => Err(format!("expected f32 or f64, got `{s}`")),
    }
}

fn parse_head_kind(s: &str) -> std::result::Result<HeadKind, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("expected grid, lines, mixed or noise, got `{s}`"))
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::MissingInput(_) => 2,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
        Error::BudgetInfeasible { .. } => 3,
        Error::ConfigMismatch(_) | Error::MissingPattern(_) => 4,
        _ => 1,
    }
}

/// Parses arguments, runs the command and returns the exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    let file = match &cli.common.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let c = cli.common;
    let mut flags = Overrides {
        out: c.out,
        budget: c.budget,
        block_size: c.block_size,
        last_q: c.last_q,
        seed: c.seed,
        precision: c.precision,
        ..Overrides::default()
    };
    match cli.command {
        Command::Gen {
            layout,
            frames,
            tokens_per_frame,
            d_h,
            heads,
        } => {
            flags.gen = GenFile {
                layout,
                frames,
                tokens_per_frame,
                d_h,
                heads,
                ..GenFile::default()
            };
            cmd_gen(&RunConfig::resolve(file, flags)?)
        }
        Command::Analyze { fixture } => {
            flags.fixture = fixture;
            cmd_analyze(&RunConfig::resolve(file, flags)?)
        }
        Command::Search { fixture, space } => {
            flags.fixture = fixture;
            flags.space = space;
            let table = cmd_search(&RunConfig::resolve(file, flags)?)?;
            print!("{}", search_summary(&table));
            Ok(())
        }
        Command::Run { fixture, heads } => {
            flags.fixture = fixture;
            flags.heads = heads;
            cmd_run(&RunConfig::resolve(file, flags)?)
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_fixture(cfg: &RunConfig) -> Result<Fixture> {
    Fixture::load(&cfg.require(cfg.fixture.as_ref(), "fixture")?)
}

pub fn cmd_gen(cfg: &RunConfig) -> Result<()> {
    let g = &cfg.gen;
    let fixture = generate_fixture(&g.spec, &g.text, &g.heads)?;
    fixture.save(&cfg.out)
}

/// Visiting order that groups tokens by modality, then vision tokens by
/// their position within a frame.
pub fn permuted_order(fixture: &Fixture) -> Vec<usize> {
    let map = &fixture.map;
    let stream = map.stream_index();
    let tag = map.tag_index();
    let vision = Modality::vision();
    let tpf = fixture.spec.tokens_per_frame.max(1);
    let mut order: Vec<usize> = (0..map.len()).collect();
    order.sort_by_key(|&i| {
        let within = if *map.label(i) == vision { stream[i] % tpf } else { 0 };
        (tag[i], within, stream[i])
    });
    order
}

pub fn cmd_analyze(cfg: &RunConfig) -> Result<()> {
    let fixture = load_fixture(cfg)?;
    let heat_dir = cfg.out.join("heatmaps");
    create_dir(&heat_dir)?;
    let natural: Vec<usize> = (0..fixture.seq_len()).collect();
    let permuted = permuted_order(&fixture);

    let mut coverage = String::from("head,kind,target,coverage,uniform_baseline\n");
    let mut weights = Vec::with_capacity(fixture.heads.len());
    for h in &fixture.heads {
        let g = &h.data;
        let w = attention_weights(&g.q, &g.k, default_scale(g.q.cols()))?;
        for t in COVERAGE_TARGETS {
            let kind = serde_json::to_value(h.kind).expect("head kind serialises");
            let kind = kind.as_str().unwrap_or_default();
            writeln!(coverage, "{},{kind},{t},{},{t}", h.name, top_k_coverage(&w, t)?).expect("string write");
        }
        heatmap::write_heatmap(&heat_dir.join(format!("{}_dense.pgm", h.name)), &w, &natural)?;
        heatmap::write_heatmap(&heat_dir.join(format!("{}_permuted.pgm", h.name)), &w, &permuted)?;
        weights.push(w);
    }
    write_file(&cfg.out.join(COVERAGE_FILE), &coverage)?;

    let mut reuse = String::from("source_head,target_head,target_recall,recall\n");
    for (a, wa) in fixture.heads.iter().zip(&weights) {
        for (b, wb) in fixture.heads.iter().zip(&weights) {
            let r = index_reuse_recall(wa, wb, 0.95)?;
            writeln!(reuse, "{},{},0.95,{r}", a.name, b.name).expect("string write");
        }
    }
    write_file(&cfg.out.join(REUSE_FILE), &reuse)
}

pub fn cmd_search(cfg: &RunConfig) -> Result<CalibrationTable> {
    let fixture = load_fixture(cfg)?;
    let space = match &cfg.space {
        Some(p) => {
            if !p.exists() {
                return Err(Error::MissingInput(p.clone()));
            }
            SearchSpace::load(p)?
        }
        None => SearchSpace::for_length(fixture.seq_len()),
    };
    let table = calibrate(&fixture, &space, cfg.budget, &cfg.exec_options())?;
    create_dir(&cfg.out)?;
    table.save(&cfg.out.join(HEADS_FILE))?;
    Ok(table)
}

/// Short text form of a head's patterns.
pub fn describe(head: &HeadConfig) -> String {
    let mut parts: Vec<String> = head
        .intra
        .iter()
        .map(|(k, p)| {
            if k == GLOBAL_KEY {
                p.label()
            } else {
                format!("{k}={}", p.label())
            }
        })
        .collect();
    parts.extend(head.cross.iter().map(|(k, p)| format!("{k}={}", p.label())));
    parts.join(";")
}

pub fn search_summary(table: &CalibrationTable) -> String {
    let mut s = format!(
        "budget {} ({} FLOPs)\nhead\tboundary\tpattern\tflops\tscore\n",
        table.budget, table.budget_flops
    );
    for h in &table.heads {
        writeln!(
            s,
            "{}\t{:?}\t{}\t{}\t{:.6}",
            h.head_id,
            h.boundary,
            describe(h),
            h.flops,
            h.score
        )
        .expect("string write");
    }
    s
}

fn check_table(table: &CalibrationTable, fixture: &Fixture) -> Result<()> {
    if table.seq_len != fixture.seq_len() {
        return Err(Error::ConfigMismatch(format!(
            "configs were calibrated for {} tokens, fixture has {}",
            table.seq_len,
            fixture.seq_len()
        )));
    }
    if table.tags != fixture.map.tags() {
        return Err(Error::ConfigMismatch(
            "modality tags differ between configs and fixture".into(),
        ));
    }
    for h in &fixture.heads {
        if !table.heads.iter().any(|c| c.head_id == h.name) {
            return Err(Error::ConfigMismatch(format!("no config for head {}", h.name)));
        }
    }
    Ok(())
}

/// Largest one-block-sink A-shape whose FLOPs stay within `flops`.
pub fn equal_flops_a_shape(seq_len: usize, block_size: usize, head_dim: usize, flops: u64) -> HeadPattern {
    let cost = |local: usize| {
        crate::masks::build_a_shape(seq_len, block_size, local, block_size)
            .map(|m| crate::masks::flops_count(&m, head_dim))
            .unwrap_or(u64::MAX)
    };
    let mut local = 1;
    let mut next = block_size;
    while next <= seq_len && cost(next) <= flops {
        local = next;
        next += block_size;
    }
    HeadPattern::AShape {
        sink: block_size,
        local,
    }
}

struct ReportRow<'a> {
    head: &'a str,
    method: &'a str,
    flops: u64,
    output: &'a Matrix,
}

pub fn cmd_run(cfg: &RunConfig) -> Result<()> {
    let fixture = load_fixture(cfg)?;
    let heads_path = cfg.require(cfg.heads.as_ref(), "head config file")?;
    let table = CalibrationTable::load(&heads_path)?;
    check_table(&table, &fixture)?;
    let opts = ExecOptions {
        block_size: table.block_size,
        last_q: table.last_q,
        precision: cfg.precision,
        ..ExecOptions::default()
    };
    let out_dir = cfg.out.join("outputs");
    create_dir(&out_dir)?;

    let s = fixture.seq_len();
    let b = opts.block_size;
    let mut report = String::from("head,method,flops,dense_flops,ratio,max_err,mean_err\n");
    for h in &fixture.heads {
        let g = &h.data;
        let d = g.q.cols();
        let scale = default_scale(d);
        let config = table.heads.iter().find(|c| c.head_id == h.name).expect("checked above");
        let oracle = dense_causal_attention(&g.q, &g.k, &g.v, scale)?;
        let dense_flops = tile_flops(dense_tiles(s, b), b, d);
        let searched = config.execute(&g.q, &g.k, &g.v, &fixture.map, scale, &opts)?;
        let a_pattern = equal_flops_a_shape(s, b, d, searched.flops);
        let baseline = |p: &HeadPattern| {
            HeadConfig::global(h.name.clone(), p.clone()).execute(&g.q, &g.k, &g.v, &fixture.map, scale, &opts)
        };
        let a_run = baseline(&a_pattern)?;
        let (sink, local) = match a_pattern {
            HeadPattern::AShape { sink, local } => (sink, local),
            _ => unreachable!(),
        };
        let tri = baseline(&HeadPattern::TriShape {
            sink,
            local,
            bottom: opts.last_q,
        })?;
        searched
            .output
            .save(&out_dir.join(format!("{}_searched.bin", h.name)))?;
        oracle.save(&out_dir.join(format!("{}_dense.bin", h.name)))?;
        let rows = [
            ReportRow {
                head: &h.name,
                method: "dense",
                flops: dense_flops,
                output: &oracle,
            },
            ReportRow {
                head: &h.name,
                method: "searched",
                flops: searched.flops,
                output: &searched.output,
            },
            ReportRow {
                head: &h.name,
                method: "a_shape",
                flops: a_run.flops,
                output: &a_run.output,
            },
            ReportRow {
                head: &h.name,
                method: "tri_shape",
                flops: tri.flops,
                output: &tri.output,
            },
        ];
        for r in rows {
            writeln!(
                report,
                "{},{},{},{dense_flops},{},{},{}",
                r.head,
                r.method,
                r.flops,
                r.flops as f64 / dense_flops as f64,
                r.output.max_abs_diff(&oracle),
                r.output.mean_abs_diff(&oracle)
            )
            .expect("string write");
        }
    }
    write_file(&cfg.out.join(REPORT_FILE), &report)
}
