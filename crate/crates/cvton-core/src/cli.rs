//! The `cvton` command line: dataset synthesis, two-stage training,
//! inference and evaluation as reproducible batch commands.
//!
//! Exit codes: 0 success; 1 usage or configuration problems; 2 data
//! problems (missing files, malformed datasets); 3 runtime problems
//! (numeric failures, corrupt checkpoints).  Every command is idempotent
//! under a fixed seed: re-running overwrites its outputs with identical
//! bytes, and all randomness flows from the one seed in play (the
//! `--seed` override, else the config file, else the default).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ndarray::Axis;

use crate::config::NetConfig;
use crate::data::{
    generate_toy_dataset, hconcat, load_dataset, save_image, Dataset, Pairing, ToySpec,
};
use crate::error::{Error, Result};
use crate::metrics::{FeatureExtractor, Protocol};
use crate::train::{
    evaluate_testset, load_pipeline, train_bpgm, train_generator, Checkpoint, RunConfig,
    TrainConfig, TrainRun,
};

#[derive(Parser)]
#[command(
    name = "cvton",
    version,
    about = "Desk-scale virtual try-on: procedural data, geometric matching, adversarial synthesis"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize the procedural paired dataset
    GenData {
        /// Dataset recipe (TOML); omitted fields take their defaults
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Dataset root to write (created if missing)
        #[arg(long)]
        out: PathBuf,
        /// Override the recipe's seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Stage 1: train the geometric matcher on the train split
    TrainBpgm {
        /// Dataset root produced by gen-data
        #[arg(long)]
        data: PathBuf,
        /// Run directory for checkpoint, config snapshot and loss log
        #[arg(long)]
        out: PathBuf,
        /// Network + training configuration (TOML); omitted fields take defaults
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the configured seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Stage 2: train the try-on generator against a frozen matcher
    TrainCag {
        /// Dataset root produced by gen-data
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 checkpoint (omit only with the no_bpgm ablation)
        #[arg(long)]
        bpgm: Option<PathBuf>,
        /// Run directory for checkpoint, config snapshot and loss log
        #[arg(long)]
        out: PathBuf,
        /// Network + training configuration (TOML); omitted fields take defaults
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the configured seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Dress one person sample in a chosen garment
    Infer {
        /// Stage-2 checkpoint
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset root holding the samples
        #[arg(long)]
        data: PathBuf,
        /// Split the samples come from
        #[arg(long, default_value = "test")]
        split: String,
        /// Person sample id, e.g. test_0003
        #[arg(long)]
        person: String,
        /// Garment donor sample id; defaults to the person's own garment
        #[arg(long)]
        garment: Option<String>,
        /// Output PNG path
        #[arg(long)]
        out: PathBuf,
        /// Also write person|garment|warped|result side by side next to --out
        #[arg(long)]
        grid: bool,
        /// Use the averaged generator weights
        #[arg(long)]
        ema: bool,
        /// Network + training configuration (TOML); omitted fields take defaults
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the configured seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on a dataset split
    Evaluate {
        /// Stage-2 checkpoint
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset root to score on
        #[arg(long)]
        data: PathBuf,
        /// Split to score
        #[arg(long, default_value = "test")]
        split: String,
        /// paired (each person wears their own garment) or unpaired
        #[arg(long, default_value = "paired")]
        protocol: String,
        /// Where to write the metric report (default metrics.json)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Score the averaged generator weights
        #[arg(long)]
        ema: bool,
        /// Network + training configuration (TOML); omitted fields take defaults
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the configured seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Retrain stage 2 with each component disabled in turn and summarize
    Ablate {
        /// Dataset root produced by gen-data
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 checkpoint for the variants that keep the matcher
        #[arg(long)]
        bpgm: Option<PathBuf>,
        /// Directory receiving one run per variant plus summary.txt
        #[arg(long)]
        out: PathBuf,
        /// Network + training configuration (TOML); omitted fields take defaults
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the configured seed
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Parse arguments, run the chosen command and map errors to exit codes.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // --help and --version land here too; keep their exit code 0.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { spec, out, seed } => cmd_gen_data(spec.as_deref(), &out, seed),
        Cmd::TrainBpgm {
            data,
            out,
            config,
            seed,
        } => cmd_train_bpgm(&data, &out, config.as_deref(), seed),
        Cmd::TrainCag {
            data,
            bpgm,
            out,
            config,
            seed,
        } => cmd_train_cag(&data, bpgm.as_deref(), &out, config.as_deref(), seed),
        Cmd::Infer {
            ckpt,
            data,
            split,
            person,
            garment,
            out,
            grid,
            ema,
            config,
            seed,
        } => cmd_infer(
            &ckpt,
            &data,
            &split,
            &person,
            garment.as_deref(),
            &out,
            grid,
            ema,
            config.as_deref(),
            seed,
        ),
        Cmd::Evaluate {
            ckpt,
            data,
            split,
            protocol,
            out,
            ema,
            config,
            seed,
        } => cmd_evaluate(
            &ckpt,
            &data,
            &split,
            &protocol,
            out.as_deref(),
            ema,
            config.as_deref(),
            seed,
        ),
        Cmd::Ablate {
            data,
            bpgm,
            out,
            config,
            seed,
        } => cmd_ablate(&data, bpgm.as_deref(), &out, config.as_deref(), seed),
    }
}

/// Load the run configuration, applying the `--seed` override on top.
fn load_run_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut rc = match path {
        Some(p) => RunConfig::from_toml_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        rc.train.seed = s;
    }
    Ok(rc)
}

fn fmt_means(means: &BTreeMap<String, f64>) -> String {
    means
        .iter()
        .map(|(k, v)| format!("{k}={v:.6}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn report_run(stage: &str, run: &TrainRun, out: &Path) {
    println!(
        "{stage} before training: {}",
        fmt_means(&run.epoch_means[0])
    );
    println!(
        "{stage} after epoch {}: {}",
        run.epoch_means.len() - 1,
        fmt_means(run.epoch_means.last().expect("at least one epoch"))
    );
    println!("artifacts in {}", out.display());
}

fn find_sample(ds: &Dataset, id: &str) -> Result<usize> {
    ds.samples
        .iter()
        .position(|s| s.id == id)
        .ok_or_else(|| Error::Data(format!("no sample {id:?} in the dataset")))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

/// Honor `CVTON_LAB_CACHE`: keep one archived copy of the evaluation
/// extractor's weights per fingerprint under that directory, and verify
/// any existing copy bit for bit so a corrupt cache is caught instead of
/// silently skewing metric comparisons.
fn sync_extractor_cache(cfg: &NetConfig) -> Result<()> {
    let Some(dir) = std::env::var_os("CVTON_LAB_CACHE") else {
        return Ok(());
    };
    let fx = FeatureExtractor::new(cfg);
    let mut fresh = Checkpoint {
        kind: "extractor".into(),
        epoch: 0,
        net_digest: cfg.digest(),
        flags: BTreeMap::new(),
        tensors: BTreeMap::new(),
    };
    for (name, value) in &fx.params().params {
        fresh
            .tensors
            .insert(format!("fx/param/{name}"), value.clone());
    }
    let dir = Path::new(&dir);
    let path = dir.join(format!("extractor_{}.ckpt", fx.fingerprint()));
    if path.exists() {
        let cached = Checkpoint::load(&path)?;
        if cached.net_digest != fresh.net_digest || cached.tensors != fresh.tensors {
            return Err(Error::Checkpoint(format!(
                "extractor cache {} does not match the configured extractor",
                path.display()
            )));
        }
    } else {
        std::fs::create_dir_all(dir)?;
        fresh.save(&path)?;
    }
    Ok(())
}

fn cmd_gen_data(spec_path: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut spec = match spec_path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("read {}: {e}", p.display())))?;
            toml::from_str::<ToySpec>(&text)
                .map_err(|e| Error::Config(format!("parse {}: {e}", p.display())))?
        }
        None => ToySpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    generate_toy_dataset(&spec, out)?;
    println!(
        "wrote {} train + {} test samples at {}x{} to {}",
        spec.n_train,
        spec.n_test,
        spec.height,
        spec.width,
        out.display()
    );
    Ok(())
}

fn cmd_train_bpgm(
    data: &Path,
    out: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let rc = load_run_config(config, seed)?;
    let ds = load_dataset(data, "train", Pairing::Paired, rc.train.seed)?;
    let run = train_bpgm(&rc.net, &rc.train, &ds, out)?;
    report_run("matcher", &run, out);
    Ok(())
}

fn cmd_train_cag(
    data: &Path,
    bpgm: Option<&Path>,
    out: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let rc = load_run_config(config, seed)?;
    let ds = load_dataset(data, "train", Pairing::Paired, rc.train.seed)?;
    let bp = bpgm.map(Checkpoint::load).transpose()?;
    let run = train_generator(&rc.net, &rc.train, &ds, bp.as_ref(), out)?;
    report_run("generator", &run, out);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_infer(
    ckpt: &Path,
    data: &Path,
    split: &str,
    person: &str,
    garment: Option<&str>,
    out: &Path,
    grid: bool,
    ema: bool,
    config: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let rc = load_run_config(config, seed)?;
    let ds = load_dataset(data, split, Pairing::Paired, rc.train.seed)?;
    let pi = find_sample(&ds, person)?;
    let gi = match garment {
        Some(id) => find_sample(&ds, id)?,
        None => pi,
    };
    sync_extractor_cache(&rc.net)?;
    let pipeline = load_pipeline(&rc.net, &Checkpoint::load(ckpt)?)?;

    let sp = &ds.samples[pi];
    let sg = &ds.samples[gi];
    let (_, clothing, _) = crate::data::derive_masks(sp, &rc.net.torso_channels)?;
    let (generated, warped) = pipeline.infer(
        &rc.net,
        &sp.person.clone().insert_axis(Axis(0)),
        &sp.seg.clone().insert_axis(Axis(0)),
        &clothing.insert_axis(Axis(0)),
        &sg.garment.clone().insert_axis(Axis(0)),
        &sg.garment_mask.clone().insert_axis(Axis(0)),
        ema,
    )?;
    let generated = generated.index_axis(Axis(0), 0).to_owned();
    let warped = warped.index_axis(Axis(0), 0).to_owned();

    ensure_parent(out)?;
    save_image(out, &generated)?;
    println!("wrote {}", out.display());
    if grid {
        let stem = out
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "out".into());
        let grid_out = out.with_file_name(format!("{stem}_grid.png"));
        let strip = hconcat(&[sp.person.clone(), sg.garment.clone(), warped, generated])?;
        save_image(&grid_out, &strip)?;
        println!("wrote {}", grid_out.display());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    ckpt: &Path,
    data: &Path,
    split: &str,
    protocol: &str,
    out: Option<&Path>,
    ema: bool,
    config: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let rc = load_run_config(config, seed)?;
    let proto: Protocol = protocol.parse()?;
    let pairing = match proto {
        Protocol::Paired => Pairing::Paired,
        Protocol::Unpaired => Pairing::Shuffled,
    };
    let ds = load_dataset(data, split, pairing, rc.train.seed)?;
    sync_extractor_cache(&rc.net)?;
    let report = evaluate_testset(
        &rc.net,
        &Checkpoint::load(ckpt)?,
        &ds,
        proto,
        rc.train.seed,
        ema,
    )?;
    match (report.lpips_mean, report.lpips_std) {
        (Some(m), Some(s)) => println!("FID = {:.6}    LPIPS = {m:.6} +/- {s:.6}", report.fid),
        _ => println!(
            "FID = {:.6}    LPIPS = n/a (unpaired garments have no reference)",
            report.fid
        ),
    }
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("metrics.json"));
    ensure_parent(&path)?;
    report.save(&path)?;
    println!("report written to {}", path.display());
    Ok(())
}

const ABLATIONS: [(&str, fn(&mut TrainConfig)); 4] = [
    ("no_can", |tc| tc.no_can = true),
    ("no_bpgm", |tc| tc.no_bpgm = true),
    ("no_discriminators", |tc| tc.no_discriminators = true),
    ("no_ema", |tc| tc.no_ema = true),
];

fn yn(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

fn cmd_ablate(
    data: &Path,
    bpgm: Option<&Path>,
    out: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let rc = load_run_config(config, seed)?;
    let ds = load_dataset(data, "train", Pairing::Paired, rc.train.seed)?;
    let bp = bpgm.map(Checkpoint::load).transpose()?;
    let mut lines = Vec::new();
    for (name, set_flag) in ABLATIONS {
        let mut tc = rc.train.clone();
        set_flag(&mut tc);
        let needs_matcher = !tc.no_bpgm;
        if needs_matcher && bp.is_none() {
            return Err(Error::Config(format!(
                "variant {name} needs --bpgm (a stage-1 checkpoint)"
            )));
        }
        let run = train_generator(
            &rc.net,
            &tc,
            &ds,
            if needs_matcher { bp.as_ref() } else { None },
            &out.join(name),
        )?;
        let ck = &run.checkpoint;
        let line = format!(
            "{name}: {} | matcher={} critics={} averaged={}",
            fmt_means(run.epoch_means.last().expect("at least one epoch")),
            yn(ck.has_prefix("matcher")),
            yn(ck.has_prefix("dseg")),
            yn(ck.has_prefix("ema")),
        );
        println!("{line}");
        lines.push(line);
    }
    std::fs::create_dir_all(out)?;
    let summary = out.join("summary.txt");
    std::fs::write(&summary, lines.join("\n") + "\n")?;
    println!("summary written to {}", summary.display());
    Ok(())
}
