use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use rsmg_core::fileio::write_bytes;
use rsmg_core::pipeline::{
    evaluate, format_report, predict_pixels, preprocess, synth_dataset, train, write_classification_map, AuxFeatures,
    Model, Preset, RunConfig, ShiftSpec, SynthSize,
};
use rsmg_core::scene::{read_scene, write_scene, Domain};
use rsmg_core::selftest;

#[derive(Parser)]
#[command(name = "rsmg", version, about = "Cross-scene multimodal land-cover classification")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic source/target scene pair.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `default`, `identity`, or overrides like `gain=0.3,offset=0.05,morph=1.5,noise=0.02`.
        #[arg(long, default_value = "default")]
        shift: String,
        #[arg(long, default_value_t = SynthSize::desk().h)]
        height: usize,
        #[arg(long, default_value_t = SynthSize::desk().w)]
        width: usize,
        #[arg(long, default_value_t = SynthSize::desk().bands)]
        bands: usize,
    },
    /// Train one model per run on the source scene.
    Train {
        /// `key = value` config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Base settings applied before the config file.
        #[arg(long)]
        preset: Option<Preset>,
        /// Overrides the config's sampling mode (`stratified` or `uniform`).
        #[arg(long)]
        sampling: Option<rsmg_core::pipeline::Sampling>,
    },
    /// Evaluate every trained run on a scene and write `metric<TAB>mean<TAB>std` lines.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        aux_hs: Option<PathBuf>,
        #[arg(long)]
        aux_lidar: Option<PathBuf>,
    },
    /// Write a P6 classification map of a scene.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        map: PathBuf,
        /// Classify unlabeled pixels too instead of leaving them black.
        #[arg(long)]
        all: bool,
        #[arg(long)]
        aux_hs: Option<PathBuf>,
        #[arg(long)]
        aux_lidar: Option<PathBuf>,
    },
    /// Run the built-in wavelet, gradient and metric checks.
    Selftest,
}

/// Run directories under `dir`, or `dir` itself when it holds a single model.
fn model_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join("weights.bin").exists() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut runs: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("weights.bin").exists())
        .collect();
    runs.sort();
    if runs.is_empty() {
        bail!("no trained model under {}", dir.display());
    }
    Ok(runs)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth {
            out,
            seed,
            shift,
            height,
            width,
            bands,
        } => {
            let shift: ShiftSpec = shift.parse()?;
            let size = SynthSize {
                h: height,
                w: width,
                bands,
            };
            let (src, tgt) = synth_dataset(size, 3, &shift, seed)?;
            fs::create_dir_all(&out)?;
            write_scene(&out.join("source.rsmg"), &src)?;
            write_scene(&out.join("target.rsmg"), &tgt)?;
            println!("wrote {}/{{source,target}}.rsmg (shift {shift})", out.display());
        }
        Cmd::Train {
            config,
            source,
            out,
            preset,
            sampling,
        } => {
            let mut text = String::new();
            if let Some(p) = preset {
                text.push_str(&format!("preset = {p}\n"));
            }
            if let Some(path) = &config {
                text.push_str(&fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?);
            }
            let mut cfg = RunConfig::parse(&text)?;
            if let Some(s) = source {
                cfg.source = Some(s);
            }
            if let Some(s) = sampling {
                cfg.sampling = s;
            }
            let runs = train(&cfg)?;
            for (i, tm) in runs.iter().enumerate() {
                let dir = out.join(format!("run{i:02}"));
                tm.model.save(&tm.store, &dir)?;
                let trace: String = std::iter::once("step\tepoch\tlr\tloss\n".to_string())
                    .chain(
                        tm.trace
                            .iter()
                            .map(|s| format!("{}\t{}\t{:e}\t{}\n", s.step, s.epoch, s.lr, s.loss)),
                    )
                    .collect();
                write_bytes(&dir.join("trace.tsv"), trace.as_bytes())?;
                let means = tm.epoch_means();
                println!(
                    "run {i}: {} steps, epoch loss {:.4} -> {:.4}, saved {}",
                    tm.trace.len(),
                    means[0],
                    means[means.len() - 1],
                    dir.display()
                );
            }
        }
        Cmd::Eval {
            model,
            target,
            report,
            aux_hs,
            aux_lidar,
        } => {
            let scene = read_scene(&target, Domain::Target)?;
            let aux = AuxFeatures::load(aux_hs.as_deref(), aux_lidar.as_deref(), (scene.height(), scene.width()))?;
            let mut all = Vec::new();
            for dir in model_dirs(&model)? {
                let (m, store) = Model::load(&dir)?;
                let metrics = evaluate(&m, &store, &scene, &aux)?;
                println!(
                    "{}: OA {:.4} AA {:.4} kappa {:.4}",
                    dir.display(),
                    metrics.oa,
                    metrics.aa,
                    metrics.kappa
                );
                all.push(metrics);
            }
            let text = format_report(&all);
            write_bytes(&report, text.as_bytes())?;
            print!("{text}");
        }
        Cmd::Predict {
            model,
            scene,
            map,
            all,
            aux_hs,
            aux_lidar,
        } => {
            let dir = model_dirs(&model)?.remove(0);
            let (m, store) = Model::load(&dir)?;
            let scene = read_scene(&scene, Domain::Target)?;
            let (h, w) = (scene.height(), scene.width());
            let aux = AuxFeatures::load(aux_hs.as_deref(), aux_lidar.as_deref(), (h, w))?;
            let prepared = preprocess(&m.spec.run, &scene, &aux)?;
            let pixels: Vec<(usize, usize)> = if all {
                (0..h * w).map(|i| (i / w, i % w)).collect()
            } else {
                scene.labeled_pixels()
            };
            let pred = predict_pixels(&m, &store, &prepared, &pixels)?;
            let mut raster = vec![-1i32; h * w];
            for (&(r, c), &p) in pixels.iter().zip(&pred) {
                raster[r * w + c] = p as i32;
            }
            write_classification_map(&map, &raster, h, w)?;
            println!("wrote {} ({w}x{h}, {} pixels classified)", map.display(), pixels.len());
        }
        Cmd::Selftest => {
            let results = selftest::run_all();
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            if results.iter().any(|r| !r.passed) {
                bail!("self-test failed");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
