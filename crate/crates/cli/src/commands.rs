use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use dualsep::dataset::{load_corpus, load_image, save_image, write_corpus, DatasetSpec, Split};
use dualsep::evaluation::{evaluate_separation, mixture_baseline, MetricReport};
use dualsep::gradcheck::{check_target, GradTarget, GradcheckOptions};
use dualsep::par;
use dualsep::rng::RngStream;
use dualsep::suppression::{dual_reverse_sample, WsmSchedule};
use dualsep::trainer::{
    alpha_sweep, gamma_sweep, run_ablation, train, Checkpoint, TrainConfig, TrainEvent, STREAM_SEPARATE,
};
use dualsep::Error;

use crate::{Command, Overrides};

/// Failure of a subcommand, carrying its exit code.
#[derive(Debug)]
pub enum CliError {
    Core(Error),
    Gradcheck(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) => match e {
                Error::NumericalContract(_) | Error::ContractViolation(_) | Error::Divergence { .. } => 3,
                _ => 2,
            },
            CliError::Gradcheck(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Gradcheck(s) => write!(f, "gradient check failed: {s}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Which suppression applications the sampler performs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Wsm {
    /// At the insertion step and on the output.
    Full,
    /// At the insertion step only.
    Alpha,
    /// On the output only.
    Output,
    /// Never.
    Off,
}

impl Wsm {
    fn schedule(self, cfg: &TrainConfig) -> Result<WsmSchedule> {
        let (mid, fin) = match self {
            Wsm::Full => (true, true),
            Wsm::Alpha => (true, false),
            Wsm::Output => (false, true),
            Wsm::Off => return Ok(WsmSchedule::disabled(cfg.steps)),
        };
        Ok(WsmSchedule::new(cfg.alpha_index, cfg.steps, mid, fin)?)
    }
}

impl fmt::Display for Wsm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.to_possible_value().expect("no skipped variants").get_name())
    }
}

/// Read `path` (or start empty) and apply `key=value` overrides. Values that
/// are not valid TOML literals are taken as strings, so `kind=rain-toy` works.
fn merged_toml(path: Option<&Path>, overrides: &Overrides) -> Result<String> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(Error::from)?,
        None => String::new(),
    };
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    for kv in &overrides.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        let (k, v) = (k.trim(), v.trim());
        let value = format!("x = {v}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("x"))
            .unwrap_or_else(|| toml::Value::String(v.to_string()));
        table.insert(k.to_string(), value);
    }
    Ok(toml::to_string(&table).expect("table serializes"))
}

fn load_config(path: Option<&Path>, overrides: &Overrides) -> Result<TrainConfig> {
    Ok(TrainConfig::from_toml(&merged_toml(path, overrides)?)?)
}

fn print_config(cfg: &TrainConfig) {
    println!("# config (hash {:016x})", cfg.hash());
    print!("{}", cfg.to_toml());
    println!("# seed {}", cfg.seed);
}

/// Load a checkpoint; if a config is given it must hash to the checkpoint's
/// unless `force` is set.
fn open_checkpoint(ckpt: &Path, config: Option<&Path>, force: bool) -> Result<(Checkpoint, TrainConfig)> {
    let ck = Checkpoint::load(ckpt, force)?;
    let cfg = match config {
        Some(p) => {
            let cfg = TrainConfig::load(p)?;
            ck.check_config(&cfg, force)?;
            cfg
        }
        None => ck.config.clone(),
    };
    Ok((ck, cfg))
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::MakeDataset { spec, out, overrides } => make_dataset(spec.as_deref(), &out, &overrides),
        Command::Train { config, out, seed, log_every, overrides } => {
            let mut cfg = load_config(config.as_deref(), &overrides)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            train_cmd(&cfg, &out, log_every)
        }
        Command::Separate { ckpt, input, out1, out2, config, force, seed, wsm } => {
            let (ck, cfg) = open_checkpoint(&ckpt, config.as_deref(), force)?;
            let seed = seed.unwrap_or(cfg.seed);
            print_config(&cfg);
            println!("# sampling seed {seed}, wsm {wsm}");
            let mixture = load_image(&input)?;
            let rng = RngStream::new(seed, STREAM_SEPARATE);
            let (a, b) = dual_reverse_sample(&mixture, ck.models.dual(), &cfg.schedule()?, &wsm.schedule(&cfg)?, &rng)?;
            save_image(&out1, &a)?;
            save_image(&out2, &b)?;
            println!("wrote {} and {}", out1.display(), out2.display());
            Ok(())
        }
        Command::Evaluate { ckpt, corpus, config, force, seed, limit, wsm, csv } => {
            let (ck, cfg) = open_checkpoint(&ckpt, config.as_deref(), force)?;
            let seed = seed.unwrap_or(cfg.seed);
            print_config(&cfg);
            println!("# sampling seed {seed}, wsm {wsm}");
            evaluate_cmd(&ck, &cfg, &corpus, seed, limit, wsm, csv.as_deref())
        }
        Command::Ablate { config, seeds, out, gammas, alphas, no_table, overrides } => {
            let cfg = load_config(config.as_deref(), &overrides)?;
            print_config(&cfg);
            println!("# seeds {seeds:?}");
            ablate_cmd(&cfg, &seeds, out.as_deref(), &gammas, &alphas, no_table)
        }
        Command::Gradcheck { target, seed, h, tolerance } => gradcheck_cmd(&target, seed, h, tolerance),
    }
}

fn make_dataset(spec: Option<&Path>, out: &Path, overrides: &Overrides) -> Result<()> {
    let spec = DatasetSpec::from_toml(&merged_toml(spec, overrides)?)?;
    println!("# dataset spec");
    print!("{}", spec.to_toml());
    println!("# seed {}", spec.seed);
    let stats = write_corpus(&spec, out)?;
    println!(
        "wrote {} train + {} test samples ({}x{}; {} linear, {} mask) to {}",
        stats.train,
        stats.test,
        stats.size,
        stats.size,
        stats.linear,
        stats.mask,
        out.display()
    );
    Ok(())
}

fn train_cmd(cfg: &TrainConfig, out: &Path, log_every: u64) -> Result<()> {
    print_config(cfg);
    let every = log_every.max(1);
    let mut log = |e: &TrainEvent| {
        let show = match e {
            TrainEvent::Step { iteration, .. } => (iteration + 1) % every == 0,
            _ => true,
        };
        if show {
            println!("{}", e.log_line());
        }
    };
    match train(cfg, &mut log) {
        Ok(outcome) => {
            outcome.checkpoint.save(out)?;
            println!(
                "trained {} iterations{}; checkpoint (iteration {}) written to {}",
                outcome.iterations_run,
                if outcome.stopped_early { " (early stop)" } else { "" },
                outcome.checkpoint.iteration,
                out.display()
            );
            Ok(())
        }
        Err(failure) => {
            if let Some(ck) = failure.last_finite {
                let partial = partial_path(out);
                ck.save(&partial)?;
                eprintln!("last finite state (iteration {}) written to {}", ck.iteration, partial.display());
            }
            Err(failure.error.into())
        }
    }
}

fn partial_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".last-finite");
    PathBuf::from(s)
}

fn evaluate_cmd(
    ck: &Checkpoint,
    cfg: &TrainConfig,
    corpus: &Path,
    seed: u64,
    limit: usize,
    wsm: Wsm,
    csv: Option<&Path>,
) -> Result<()> {
    let mut samples = load_corpus(corpus, Some(Split::Test))?;
    if limit > 0 {
        samples.truncate(limit);
    }
    if samples.is_empty() {
        return Err(Error::InvalidArgument(format!("no test samples in {}", corpus.display())).into());
    }
    let sched = cfg.schedule()?;
    let w = wsm.schedule(cfg)?;
    let root = RngStream::new(seed, STREAM_SEPARATE);
    let results = par::map_range(samples.len(), |j| {
        let s = &samples[j];
        let (a, b) = dual_reverse_sample(&s.mixture, ck.models.dual(), &sched, &w, &root.substream(j as u64))?;
        let m = evaluate_separation((&a, &b), (&s.source1, &s.source2))?;
        let base = mixture_baseline(&s.mixture, (&s.source1, &s.source2))?;
        Ok::<_, Error>((m, base))
    });
    let mut report = MetricReport::default();
    let mut baseline = 0.0;
    for (s, r) in samples.iter().zip(results) {
        let (m, base) = r?;
        report.push(s.entry.id.clone(), m);
        baseline += base;
    }
    print!("{}", report.to_text());
    println!("mixture baseline PSNR {:.4}", baseline / samples.len() as f64);
    if let Some(p) = csv {
        fs::write(p, report.to_csv()).map_err(Error::from)?;
        println!("per-sample metrics written to {}", p.display());
    }
    Ok(())
}

fn ablate_cmd(
    cfg: &TrainConfig,
    seeds: &[u64],
    out: Option<&Path>,
    gammas: &[f64],
    alphas: &[u32],
    no_table: bool,
) -> Result<()> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("at least one seed is required".into()).into());
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(Error::from)?;
    }
    let write = |name: &str, text: String| -> Result<()> {
        if let Some(dir) = out {
            fs::write(dir.join(name), text).map_err(Error::from)?;
        }
        Ok(())
    };
    let mut log = |seed: u64, e: &TrainEvent| {
        if !matches!(e, TrainEvent::Step { .. }) {
            println!("[seed {seed}] {}", e.log_line());
        }
    };
    if !no_table {
        let (table, _) = run_ablation(cfg, seeds, &mut log)?;
        print!("{}", table.to_text());
        write("ablation.csv", table.to_csv())?;
    }
    if !gammas.is_empty() {
        let curve = gamma_sweep(cfg, gammas, seeds, &mut log)?;
        print!("{}", curve.to_text());
        write("gamma_sweep.csv", curve.to_csv())?;
    }
    if !alphas.is_empty() {
        let curve = alpha_sweep(cfg, alphas, seeds, &mut log)?;
        print!("{}", curve.to_text());
        write("alpha_sweep.csv", curve.to_csv())?;
    }
    Ok(())
}

fn gradcheck_cmd(target: &str, seed: u64, h: f64, tolerance: f64) -> Result<()> {
    let targets: Vec<GradTarget> = if target == "all" { GradTarget::ALL.to_vec() } else { vec![target.parse()?] };
    let opts = GradcheckOptions { h, tolerance, ..GradcheckOptions::default() };
    println!("# seed {seed}, h {h:e}, tolerance {tolerance:e}");
    let mut failed = Vec::new();
    for t in targets {
        let r = check_target(t, seed, opts)?;
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        println!(
            "{:<10} max rel err {:.3e} over {} coords (worst {}) {verdict}",
            t.name(),
            r.max_rel_err,
            r.coordinates_checked,
            r.worst_param
        );
        if !r.passed() {
            failed.push(t.name());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Gradcheck(failed.join(", ")))
    }
}
