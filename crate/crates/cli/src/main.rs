//! `kaq`: dataset generation, training, BER evaluation and the ML oracle
//! comparison for quantized deep-unfolded MIMO detectors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use kaq_core::eval::{evaluate_ber, state_complexity, BerRow, ComplexityReport, Detector};
use kaq_core::io::{checkpoint_to_bytes, dataset_to_bytes, load_checkpoint, load_dataset, Checkpoint};
use kaq_core::mimo::{build_dataset, ComplexSystem, Dataset, DatasetConfig};
use kaq_core::training::{init_state, run_epoch, EpochStats, QuantMode, TrainConfig};
use kaq_core::RunConfig;

#[derive(Parser)]
#[command(name = "kaq", version, about = "Kernel-based adaptive quantization for unfolded MIMO detectors")]
struct Cli {
    /// Worker threads for the parallel kernels (all cores when unset).
    #[arg(long, global = true, env = "KAQ_NUM_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a labeled MIMO dataset.
    Generate(GenerateArgs),
    /// Calibrate and train an unfolded detector.
    Train(TrainArgs),
    /// Sweep BER over a dataset and report complexity.
    Evaluate(EvaluateArgs),
    /// Compare a trained detector against the ML oracle and ZF on a small system.
    OracleCheck(OracleArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// TOML run configuration; flags below override its [system] section.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    nt: Option<usize>,
    #[arg(long)]
    nr: Option<usize>,
    /// Per-axis constellation levels, e.g. `-3,-1,1,3`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    constellation: Option<Vec<f64>>,
    /// SNR tags in dB, e.g. `0,5,10`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    snr_list: Option<Vec<f64>>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `fp`, `qat-mse` or `kaq`.
    #[arg(long)]
    mode: Option<QuantMode>,
    /// Per-epoch history CSV.
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue a saved run up to `--epochs` (its own settings are kept).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Trained checkpoint; repeat for several networks.
    #[arg(long = "ckpt")]
    ckpts: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// BER report CSV.
    #[arg(long)]
    out: PathBuf,
    /// Classical baselines: any of `zf`, `mmse`, `ml`, `random`.
    #[arg(long, value_delimiter = ',')]
    detectors: Vec<Baseline>,
    /// Complexity report CSV.
    #[arg(long)]
    complexity_out: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 2)]
    nt: usize,
    #[arg(long, default_value_t = 2)]
    nr: usize,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-1,1")]
    constellation: Vec<f64>,
    #[arg(long, default_value_t = 8.0, allow_hyphen_values = true)]
    snr: f64,
    #[arg(long, default_value_t = 5000)]
    train_count: usize,
    #[arg(long, default_value_t = 10_000)]
    test_count: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use this network instead of training one.
    #[arg(long)]
    ckpt: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Baseline {
    Zf,
    Mmse,
    Ml,
    Random,
}

impl Baseline {
    fn detector(self, seed: u64) -> Detector<'static> {
        match self {
            Baseline::Zf => Detector::ZeroForcing,
            Baseline::Mmse => Detector::Mmse,
            Baseline::Ml => Detector::MaximumLikelihood,
            Baseline::Random => Detector::RandomGuess { seed },
        }
    }
}

/// Outputs written to `<path>.partial` and renamed together on commit;
/// anything left uncommitted is removed on drop.
#[derive(Default)]
struct Staged {
    files: Vec<(PathBuf, PathBuf)>,
}

impl Staged {
    fn add(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".partial");
        let tmp = PathBuf::from(tmp);
        self.files.push((tmp.clone(), path.to_path_buf()));
        fs::write(&tmp, bytes).with_context(|| format!("writing {}", path.display()))
    }

    fn commit(mut self) -> Result<()> {
        let files = std::mem::take(&mut self.files);
        for (i, (tmp, dst)) in files.iter().enumerate() {
            if let Err(e) = fs::rename(tmp, dst) {
                for (t, d) in &files[..i] {
                    let _ = fs::remove_file(d);
                    let _ = fs::remove_file(t);
                }
                for (t, _) in &files[i..] {
                    let _ = fs::remove_file(t);
                }
                return Err(e).with_context(|| format!("writing {}", dst.display()));
            }
        }
        Ok(())
    }
}

impl Drop for Staged {
    fn drop(&mut self) {
        for (tmp, _) in &self.files {
            let _ = fs::remove_file(tmp);
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .with_context(|| format!("no {name} path given (flag or [paths] entry)"))
}

fn fmt_snr(db: f64) -> String {
    format!("{db}")
}

fn describe(system: &ComplexSystem) -> String {
    format!(
        "{}x{} complex, {} levels/axis, M={} N={}",
        system.nr,
        system.nt,
        system.constellation.len(),
        system.m(),
        system.n()
    )
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    let s = &mut cfg.system;
    if let Some(v) = args.nt {
        s.nt = v;
    }
    if let Some(v) = args.nr {
        s.nr = v;
    }
    if let Some(v) = args.constellation {
        s.constellation = v;
    }
    if let Some(v) = args.snr_list {
        s.snr_db = v;
    }
    if let Some(v) = args.count {
        s.samples = v;
    }
    if let Some(v) = args.seed {
        s.seed = v;
    }
    let out = required(args.out, &cfg.paths.data, "output")?;
    let dcfg = cfg.dataset_config()?;
    dcfg.validate()?;
    let ds = build_dataset(&dcfg, cfg.system.seed)?;
    let mut staged = Staged::default();
    staged.add(&out, &dataset_to_bytes(&ds)?)?;
    staged.commit()?;
    println!(
        "wrote {} instances ({}; SNR {:?} dB; seed {}) to {}",
        ds.len(),
        describe(&dcfg.system),
        dcfg.snr_db,
        ds.seed,
        out.display()
    );
    Ok(())
}

fn history_csv(history: &[EpochStats]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "loss", "mse", "mmd", "accuracy"])?;
    for h in history {
        w.write_record([
            h.epoch.to_string(),
            h.loss.to_string(),
            h.mse.to_string(),
            h.mmd.to_string(),
            h.accuracy.to_string(),
        ])?;
    }
    Ok(w.into_inner()?)
}

fn check_system(expected: &ComplexSystem, found: &ComplexSystem, what: &str) -> Result<()> {
    ensure!(
        expected.nt == found.nt && expected.nr == found.nr && expected.constellation == found.constellation,
        "{what} expects {}, dataset is {}",
        describe(expected),
        describe(found)
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let run = load_config(args.config.as_deref())?;
    let data = required(args.data, &run.paths.data, "dataset")?;
    let out = required(args.out, &run.paths.checkpoint, "checkpoint")?;
    let history_path = args.history.or_else(|| run.paths.history.clone());
    let ds = load_dataset(&data).with_context(|| format!("loading dataset {}", data.display()))?;

    let (mut state, cfg, mut history) = match &args.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            if let Some(sys) = &ckpt.system {
                check_system(sys, &ds.config.system, "checkpoint")?;
            }
            if let Some(mode) = args.mode {
                ensure!(mode == ckpt.state.mode(), "cannot resume a {} run as {mode}", ckpt.state.mode());
            }
            ensure!(args.seed.is_none(), "--seed cannot change on resume");
            let mut cfg = ckpt.config;
            if let Some(e) = args.epochs {
                cfg.epochs = e;
            }
            (ckpt.state, cfg, ckpt.history)
        }
        None => {
            if args.config.is_some() {
                check_system(&run.system()?, &ds.config.system, "config")?;
            }
            let mut cfg: TrainConfig = run.train_config();
            if let Some(m) = args.mode {
                cfg.quant.mode = m;
            }
            if let Some(e) = args.epochs {
                cfg.epochs = e;
            }
            if let Some(s) = args.seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            (init_state(&ds, &cfg)?, cfg, Vec::new())
        }
    };

    while state.epoch < cfg.epochs {
        let stats = run_epoch(&mut state, &ds, &cfg)?;
        if !args.quiet {
            eprintln!(
                "epoch {:>3}  lr {:.2e}  loss {:.5e}  mse {:.5e}  mmd {:.5e}  acc {:.4}",
                stats.epoch, stats.lr, stats.loss, stats.mse, stats.mmd, stats.accuracy
            );
        }
        history.push(stats);
    }

    let mode = state.mode();
    let ckpt = Checkpoint {
        state,
        config: cfg,
        history,
        system: Some(ds.config.system.clone()),
    };
    let mut staged = Staged::default();
    staged.add(&out, &checkpoint_to_bytes(&ckpt)?)?;
    if let Some(p) = &history_path {
        staged.add(p, &history_csv(&ckpt.history)?)?;
    }
    staged.commit()?;
    let last = ckpt.history.last();
    println!(
        "trained {mode} {} K={} for {} epochs{} -> {}",
        ckpt.config.net.variant,
        ckpt.config.net.layers,
        ckpt.state.epoch,
        last.map(|h| format!(" (loss {:.5e}, accuracy {:.4})", h.loss, h.accuracy))
            .unwrap_or_default(),
        out.display()
    );
    Ok(())
}

fn ber_csv(rows: &[(String, BerRow)]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["detector", "snr_db", "ber", "ser", "bits"])?;
    for (label, r) in rows {
        w.write_record([
            label.clone(),
            fmt_snr(r.snr_db),
            r.ber.to_string(),
            r.ser.to_string(),
            r.bits_total.to_string(),
        ])?;
    }
    Ok(w.into_inner()?)
}

fn complexity_csv(reports: &[ComplexityReport]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["detector", "mult_adds", "activation_bytes", "param_bytes"])?;
    for r in reports {
        w.write_record([
            r.detector.clone(),
            r.mult_adds.to_string(),
            r.activation_bytes.to_string(),
            r.param_bytes.to_string(),
        ])?;
    }
    Ok(w.into_inner()?)
}

/// Mode names, disambiguated by file stem when a mode repeats.
fn labels(ckpts: &[(PathBuf, Checkpoint)]) -> Vec<String> {
    let modes: Vec<String> = ckpts.iter().map(|(_, c)| c.state.mode().to_string()).collect();
    ckpts
        .iter()
        .zip(&modes)
        .map(|((path, _), mode)| {
            if modes.iter().filter(|m| *m == mode).count() > 1 {
                let stem = path.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default();
                format!("{mode}:{stem}")
            } else {
                mode.clone()
            }
        })
        .collect()
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    ensure!(
        !args.ckpts.is_empty() || !args.detectors.is_empty(),
        "nothing to evaluate: give --ckpt and/or --detectors"
    );
    let ds = load_dataset(&args.data).with_context(|| format!("loading dataset {}", args.data.display()))?;
    let mut ckpts = Vec::new();
    for path in &args.ckpts {
        let c = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
        if let Some(sys) = &c.system {
            check_system(sys, &ds.config.system, &format!("checkpoint {}", path.display()))?;
        }
        ckpts.push((path.clone(), c));
    }
    let names = labels(&ckpts);
    let mut detectors: Vec<Detector<'_>> = ckpts
        .iter()
        .zip(&names)
        .map(|((_, c), label)| Detector::Unfolded {
            label: label.clone(),
            state: &c.state,
        })
        .collect();
    detectors.extend(args.detectors.iter().map(|b| b.detector(ds.seed)));
    // refuse before spending time on the feasible detectors
    for d in &detectors {
        d.check(&ds.config).with_context(|| format!("detector {}", d.label()))?;
    }

    let mut rows = Vec::new();
    for d in &detectors {
        let report = evaluate_ber(d, &ds).with_context(|| format!("evaluating {}", d.label()))?;
        for r in &report.rows {
            println!("{:<16} {:>6} dB  BER {:.4e}  SER {:.4e}", report.detector, fmt_snr(r.snr_db), r.ber, r.ser);
        }
        rows.extend(report.rows.into_iter().map(|r| (report.detector.clone(), r)));
    }

    let mut staged = Staged::default();
    staged.add(&args.out, &ber_csv(&rows)?)?;
    if let Some(p) = &args.complexity_out {
        let (m, n) = (ds.config.system.m(), ds.config.system.n());
        let reports: Vec<_> = ckpts
            .iter()
            .zip(&names)
            .map(|((_, c), label)| state_complexity(label, &c.state, m, n))
            .collect();
        staged.add(p, &complexity_csv(&reports)?)?;
    }
    staged.commit()?;
    println!("wrote {} rows to {}", rows.len(), args.out.display());
    Ok(())
}

fn cmd_oracle_check(args: OracleArgs) -> Result<()> {
    let system = ComplexSystem::new(args.nt, args.nr, args.constellation)?;
    let data = |count, seed| {
        build_dataset(
            &DatasetConfig {
                system: system.clone(),
                snr_db: vec![args.snr],
                count,
            },
            seed,
        )
    };
    // one seed, separate derived streams for the training set, test set and shuffle
    let test: Dataset = data(args.test_count, args.seed.wrapping_mul(2).wrapping_add(1))?;
    Detector::MaximumLikelihood.check(&test.config)?;

    let state = match &args.ckpt {
        Some(path) => {
            let c = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            if let Some(sys) = &c.system {
                check_system(sys, &system, "checkpoint")?;
            }
            c.state
        }
        None => {
            let train_set = data(args.train_count, args.seed.wrapping_mul(2))?;
            let mut cfg = TrainConfig::default();
            cfg.quant.mode = QuantMode::Fp;
            cfg.epochs = args.epochs;
            cfg.seed = args.seed;
            kaq_core::train(&train_set, &cfg)?.0
        }
    };

    let ber = |d: &Detector<'_>| evaluate_ber(d, &test).map(|r| r.rows[0]);
    let ml = ber(&Detector::MaximumLikelihood)?;
    let net = ber(&Detector::Unfolded {
        label: "net".into(),
        state: &state,
    })?;
    let zf = ber(&Detector::ZeroForcing)?;
    let bits = net.bits_total as f64;
    let three_sigma = 3.0 * ((net.ber * (1.0 - net.ber) + zf.ber * (1.0 - zf.ber)) / bits).sqrt();
    println!("system  {} at {} dB, {} test bits", describe(&system), fmt_snr(args.snr), net.bits_total);
    println!("ml      BER {:.4e}", ml.ber);
    println!("{:<7} BER {:.4e}", state.mode().to_string(), net.ber);
    println!("zf      BER {:.4e}  (3σ {:.1e})", zf.ber, three_sigma);
    let ok = ml.ber <= net.ber && net.ber <= zf.ber + three_sigma;
    if !ok {
        bail!("ordering ml ≤ net ≤ zf + 3σ violated");
    }
    println!("ordering ml ≤ net ≤ zf + 3σ holds");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        ensure!(n >= 1, "thread count must be ≥ 1");
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::OracleCheck(a) => cmd_oracle_check(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
