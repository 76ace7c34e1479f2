use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use supergauss::config::{defaults_help, RunConfig};
use supergauss::io::image::{depth_preview, save_gray, save_rgb, write_depth};
use supergauss::io::ply::{read_ply, write_ply};
use supergauss::io::{generate_synthetic, load_run_data, save_dataset};
use supergauss::neighborhood::write_descriptor_csv;
use supergauss::partition::group_scene;
use supergauss::report::{losses_csv, markdown_table, metrics_csv, plot_losses, plot_psnr, RunReport};
use supergauss::trainer::Trainer;
use supergauss::{Error, Result};

#[derive(Parser)]
#[command(name = "supergauss", version, about = "Sparse-view Gaussian splatting with supergaussian priors")]
struct Cli {
    /// Log level (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// JSON config file; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. --set train.iterations=500.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on a dataset directory or a generated scene.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on the train and eval views.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Where to write the metrics JSON (default: next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Partition a point set and write it with group ids.
    Group {
        /// Point file to group (default: the configured dataset's points).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Group the generator's ground truth instead of the initial points.
        #[arg(long)]
        ground_truth: bool,
        /// PLY path for the grouped points.
        #[arg(long)]
        out: PathBuf,
        /// Also write per-Gaussian shape descriptors as CSV.
        #[arg(long)]
        descriptors: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Render every dataset view from a checkpoint (color, alpha, depth).
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory for the images and depth maps.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write a synthetic dataset directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Tables and plots from one or more run reports.
    Report {
        /// Report files, optionally as name=path.
        #[arg(required = true)]
        reports: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Skip the SVG plots.
        #[arg(long)]
        no_plots: bool,
    },
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

fn write(p: &Path, s: &str) -> Result<()> {
    std::fs::write(p, s).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

/// Config for commands that start from a checkpoint: the checkpoint's own
/// config, then the file and overrides on top.
fn checkpoint_config(ckpt: &Path, a: &ConfigArgs) -> Result<RunConfig> {
    let base = RunConfig::from_checkpoint(ckpt)?;
    RunConfig::load_onto(base, a.config.as_deref(), &a.sets)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { cfg, resume } => {
            let cfg = RunConfig::load(cfg.config.as_deref(), &cfg.sets)?;
            let out = cfg.output.clone();
            mkdir(&out)?;
            cfg.save(&out.join("config.json"))?;
            let data = load_run_data(&cfg)?;
            let mut t = match resume {
                Some(dir) => Trainer::resume(&dir, cfg, data)?,
                None => Trainer::from_dataset(cfg, data)?,
            };
            t.dump_dir = Some(out.clone());
            let outcome = t.run(Some(&out))?;
            t.save_checkpoint(&out.join("final"))?;
            let report = RunReport::new(&t, &outcome);
            report.save(&out.join("report.json"))?;
            println!("{}", markdown_table(&[("run".into(), report)]));
            println!("wrote {}", out.display());
        }
        Cmd::Eval { checkpoint, cfg, out } => {
            let cfg = checkpoint_config(&checkpoint, &cfg)?;
            let data = load_run_data(&cfg)?;
            let t = Trainer::resume(&checkpoint, cfg, data)?;
            let train = t.evaluate(&t.data.train)?;
            let eval = t.evaluate(&t.data.eval)?;
            for (split, r) in [("train", &train), ("eval", &eval)] {
                for v in &r.views {
                    println!(
                        "{split:<5} {:<10} PSNR {:>7.3}  SSIM {:.4}  depth MAE {}  SROCC {}",
                        v.name,
                        v.psnr,
                        v.ssim,
                        v.depth_mae.map_or("-".into(), |x| format!("{x:.4}")),
                        v.srocc.map_or("-".into(), |x| format!("{x:.4}")),
                    );
                }
                println!("{split:<5} mean       PSNR {:>7.3}  SSIM {:.4}", r.psnr, r.ssim);
            }
            let path = out.unwrap_or_else(|| checkpoint.join("eval.json"));
            let body = serde_json::json!({ "train": train, "eval": eval });
            write(&path, &serde_json::to_string_pretty(&body).expect("metrics serialize"))?;
            println!("wrote {}", path.display());
        }
        Cmd::Group {
            input,
            ground_truth,
            out,
            descriptors,
            cfg,
        } => {
            let cfg = RunConfig::load(cfg.config.as_deref(), &cfg.sets)?;
            let mut set = match (input, ground_truth) {
                (Some(p), _) => read_ply(&p)?,
                (None, true) => generate_synthetic(&cfg.data.synthetic, cfg.seed)?.ground_truth,
                (None, false) => load_run_data(&cfg)?
                    .points
                    .ok_or_else(|| Error::InvalidParameter("dataset has no point file".into()))?,
            };
            let g = group_scene(&set, &cfg.grouping)?;
            for (x, &k) in set.gaussians.iter_mut().zip(&g.partition.assignment) {
                x.group_id = Some(k);
            }
            write_ply(&out, &set)?;
            if let Some(p) = descriptors {
                write_descriptor_csv(&p, &g.descriptors)?;
            }
            let s = g.partition.summary();
            println!(
                "{} Gaussians -> {} groups (target {:?}{}), mu {:.4e}, energy {:.4}",
                set.len(),
                s.groups,
                cfg.grouping.target,
                if g.in_range { "" } else { ", missed" },
                s.mu,
                s.energy
            );
            println!("sizes {:?}", s.sizes);
            println!("wrote {}", out.display());
        }
        Cmd::Render { checkpoint, out, cfg } => {
            let cfg = checkpoint_config(&checkpoint, &cfg)?;
            let data = load_run_data(&cfg)?;
            let t = Trainer::resume(&checkpoint, cfg, data)?;
            mkdir(&out)?;
            let (w, h) = (t.data.width, t.data.height);
            for v in t.data.train.iter().chain(&t.data.eval) {
                let r = t.render_camera(&v.camera)?;
                let rgb: Vec<f64> = r.color.iter().flat_map(|c| *c).collect();
                save_rgb(&out.join(format!("{}.png", v.name)), &rgb, w, h)?;
                save_gray(&out.join(format!("{}_alpha.png", v.name)), &r.alpha, w, h)?;
                write_depth(&out.join(format!("{}.depth", v.name)), &r.depth, w, h)?;
                let valid: Vec<bool> = r.alpha.iter().map(|&a| a > 0.5).collect();
                save_gray(&out.join(format!("{}_depth.png", v.name)), &depth_preview(&r.depth, &valid), w, h)?;
            }
            println!("wrote {}", out.display());
        }
        Cmd::GenData { out, cfg } => {
            let cfg = RunConfig::load(cfg.config.as_deref(), &cfg.sets)?;
            let scene = generate_synthetic(&cfg.data.synthetic, cfg.seed)?;
            save_dataset(&out, &scene.dataset)?;
            write_ply(&out.join("ground_truth.ply"), &scene.ground_truth)?;
            println!(
                "{} train / {} eval views, {} ground-truth and {} initial Gaussians",
                scene.dataset.train.len(),
                scene.dataset.eval.len(),
                scene.ground_truth.len(),
                scene.dataset.points.as_ref().map_or(0, |p| p.len())
            );
            println!("wrote {}", out.display());
        }
        Cmd::Report { reports, out, no_plots } => {
            let mut runs = Vec::new();
            for r in &reports {
                let (name, path) = match r.split_once('=') {
                    Some((n, p)) => (n.to_string(), PathBuf::from(p)),
                    None => {
                        let p = PathBuf::from(r);
                        let name = p
                            .parent()
                            .and_then(|d| d.file_name())
                            .map_or_else(|| r.clone(), |s| s.to_string_lossy().into_owned());
                        (name, p)
                    }
                };
                runs.push((name, RunReport::load(&path)?));
            }
            mkdir(&out)?;
            let md = markdown_table(&runs);
            write(&out.join("metrics.md"), &md)?;
            write(&out.join("metrics.csv"), &metrics_csv(&runs))?;
            for (name, r) in &runs {
                write(&out.join(format!("losses_{name}.csv")), &losses_csv(r))?;
            }
            if !no_plots {
                plot_losses(&runs, &out.join("loss.svg"))?;
                plot_psnr(&runs, &out.join("psnr.svg"))?;
            }
            print!("{md}");
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cmd = Cli::command().mut_subcommand("train", |c| c.after_help(defaults_help()));
    let cli = match Cli::from_arg_matches(&cmd.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config { .. } | Error::Version { .. } => 2,
                _ => 1,
            })
        }
    }
}
