use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::pipeline::{grid_tensor, load_binary_mask, write_metrics, ItemPaths, Session, METRICS_FILE};
use crate::{selftest, HarnessError};

#[derive(Debug, Parser)]
#[command(name = "dcedit", version, about = "Attention-localized rectified-flow editing on a toy DiT")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write `<id>.map.tnsr` and `<id>.map.png` for each item.
    Localize {
        /// Comma-separated source-prompt word positions, replacing the blend words.
        #[arg(long, value_delimiter = ',')]
        select: Option<Vec<usize>>,
    },
    /// Write `<id>.edit.tnsr`, `<id>.recon.tnsr` and `<id>.trace.tnsa`.
    Edit {
        /// 8-bit grayscale PNG used as the latent-control mask instead of the
        /// binarized map.
        #[arg(long)]
        mask_override: Option<PathBuf>,
    },
    /// Write `metrics.jsonl` for every item with artifacts in the results dir.
    Eval {
        /// Defaults to the output dir.
        #[arg(long)]
        results: Option<PathBuf>,
    },
    /// Run the invariant suites.
    Selftest {
        /// Corrupt one check on purpose.
        #[arg(long)]
        inject_fault: bool,
    },
}

/// Flags layered over the config file.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[arg(long, global = true, value_name = "K")]
    pub steps: Option<usize>,
    #[arg(long, global = true, value_name = "S")]
    pub cfg: Option<f64>,
    #[arg(long, global = true, value_name = "L")]
    pub lambda: Option<f64>,
    #[arg(long, global = true, value_name = "F")]
    pub feature_steps: Option<usize>,
    #[arg(long, global = true, value_name = "B")]
    pub latent_steps: Option<usize>,
    #[arg(long, global = true, value_name = "R")]
    pub r_layers: Option<usize>,
    #[arg(long, global = true, value_name = "E")]
    pub epsilon: Option<f64>,
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_name = "ID")]
    pub item: Option<String>,
}

impl Overrides {
    /// Config file (or defaults), then `DCEDIT_SEED`, then flags.
    pub fn resolve(&self) -> Result<RunConfig, HarnessError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply_env()?;
        let c = &mut cfg.control;
        if let Some(v) = self.steps {
            c.steps = v;
        }
        if let Some(v) = self.cfg {
            c.cfg_scale = v;
        }
        if let Some(v) = self.lambda {
            c.lambda = v;
        }
        if let Some(v) = self.feature_steps {
            c.feature_steps = v;
        }
        if let Some(v) = self.latent_steps {
            c.latent_steps = v;
        }
        if let Some(v) = self.r_layers {
            c.r_layers = Some(v);
        }
        if let Some(v) = self.epsilon {
            cfg.epsilon = v;
        }
        if let Some(v) = self.seed {
            cfg.model.seed = v;
        }
        if let Some(v) = &self.out {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = &self.manifest {
            cfg.manifest = v.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn ensure_dir(dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

pub fn cmd_localize(cfg: RunConfig, item: Option<&str>, select: Option<&[usize]>) -> Result<(), HarnessError> {
    let session = Session::open(cfg)?;
    let items = session.items(item)?;
    let out = &session.config.output_dir;
    ensure_dir(out)?;
    for item in items {
        let src = session.source(item)?;
        let map = session.localize(item, &src, select)?;
        let paths = ItemPaths::new(out, &item.id);
        map.to_tensor().write_atomic(&paths.map)?;
        map.save_png(&paths.map_png)?;
        eprintln!("localized {}", item.id);
    }
    Ok(())
}

pub fn cmd_edit(cfg: RunConfig, item: Option<&str>, mask_override: Option<&Path>) -> Result<(), HarnessError> {
    let session = Session::open(cfg)?;
    let items = session.items(item)?;
    let out = &session.config.output_dir;
    ensure_dir(out)?;
    for item in items {
        let src = session.source(item)?;
        let map = session.localize(item, &src, None)?;
        let mask = match mask_override {
            Some(p) => Some(load_binary_mask(p, map.grid_h, map.grid_w)?),
            None => None,
        };
        let paths = ItemPaths::new(out, &item.id);
        let (edited, recon) = session.edit(item, &src, &map, mask.as_ref(), &paths.trace)?;
        grid_tensor(&edited.grid).write_atomic(&paths.edit)?;
        grid_tensor(&recon.grid).write_atomic(&paths.recon)?;
        eprintln!("edited {}", item.id);
    }
    Ok(())
}

pub fn cmd_eval(cfg: RunConfig, item: Option<&str>, results: Option<&Path>) -> Result<(), HarnessError> {
    let session = Session::open(cfg)?;
    let dir = results.unwrap_or(&session.config.output_dir).to_path_buf();
    if !dir.is_dir() {
        return Err(HarnessError::EmptyResults(dir));
    }
    let mut records = Vec::new();
    for item in session.items(item)? {
        if let Some(r) = session.evaluate(item, &dir)? {
            records.push(r);
        }
    }
    if records.is_empty() {
        return Err(HarnessError::EmptyResults(dir));
    }
    write_metrics(&records, &dir.join(METRICS_FILE))?;
    eprintln!("evaluated {} item(s)", records.len());
    Ok(())
}

pub fn cmd_selftest(cfg: RunConfig, inject_fault: bool) -> Result<(), HarnessError> {
    let fault = inject_fault || cfg!(feature = "inject-fault");
    let reports = selftest::run_all(&cfg, fault);
    let mut failed = 0;
    for r in &reports {
        println!("{:<12} {}/{} passed", r.suite, r.passed, r.total);
        for f in &r.failures {
            println!("    FAIL {f}");
        }
        if r.passed != r.total {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(HarnessError::SelftestFailed(failed));
    }
    Ok(())
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = cli.overrides.resolve().and_then(|cfg| {
        let item = cli.overrides.item.as_deref();
        match &cli.command {
            Command::Localize { select } => cmd_localize(cfg, item, select.as_deref()),
            Command::Edit { mask_override } => cmd_edit(cfg, item, mask_override.as_deref()),
            Command::Eval { results } => cmd_eval(cfg, item, results.as_deref()),
            Command::Selftest { inject_fault } => cmd_selftest(cfg, *inject_fault),
        }
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
