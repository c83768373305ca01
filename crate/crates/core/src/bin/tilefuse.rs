use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use tilefuse::config::{ExperimentConfig, MatrixConfig};
use tilefuse::data::{generate, write_dataset, TaskSpec};
use tilefuse::harness::{
    ablate, evaluate_checkpoint, report_csv, report_json, train, write_report, AblationReport,
    ReportRow,
};
use tilefuse::tiler::{select_grid, ImageBuffer};
use tilefuse::{Error, Result};

#[derive(Parser)]
#[command(name = "tilefuse", version, about = "Tiled dual-encoder vision-language experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Csv,
    Json,
}

#[derive(clap::Args)]
struct Common {
    /// Config file (task spec for gen-data, experiment for train/eval,
    /// matrix for ablate).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    report: ReportFormat,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset (JSON-lines index + PPM images).
    GenData(Common),
    /// Run both training stages; writes metrics and checkpoints.
    Train(Common),
    /// Evaluate the checkpoint a previous `train` left in --out.
    Eval(Common),
    /// Run every cell of a matrix and write report.csv / report.json.
    Ablate(Common),
    /// Print the grid selection and patch counts for an image size.
    InspectTiling {
        /// Image file (binary PPM); alternatively give --width/--height.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long, default_value_t = 448)]
        tile: usize,
        #[arg(long, default_value_t = 6)]
        max_tiles: usize,
        #[arg(long, default_value_t = 1)]
        images: usize,
    },
}

fn load_experiment(c: &Common) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(&c.config)?;
    Ok(match c.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn print_rows(format: ReportFormat, report: &AblationReport) -> Result<()> {
    match format {
        ReportFormat::Csv => print!("{}", report_csv(&report.rows)?),
        ReportFormat::Json => println!("{}", report_json(report)?),
    }
    Ok(())
}

fn single(id: &str, row: ReportRow) -> AblationReport {
    AblationReport {
        matrix_id: id.to_string(),
        partial: !row.is_ok(),
        rows: vec![row],
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::GenData(c) => {
            let text = std::fs::read_to_string(&c.config).map_err(|e| Error::Io {
                path: c.config.clone(),
                source: e,
            })?;
            let mut spec: TaskSpec =
                serde_json::from_str(&text).map_err(|e| Error::Config(vec![e.to_string()]))?;
            if let Some(s) = c.seed {
                spec.seed = s;
            }
            let data = generate(&spec)?;
            write_dataset(&c.out, &data)?;
            println!(
                "wrote {} train / {} eval samples to {}",
                data.train.len(),
                data.eval.len(),
                c.out.display()
            );
            Ok(true)
        }
        Cmd::Train(c) => {
            let cfg = load_experiment(&c)?;
            let run = train(&cfg, Some(&c.out))?;
            for stage in ["stage1", "stage2"] {
                if let Some(last) = run.metrics.iter().rev().find(|m| m.stage == stage) {
                    println!("{stage}: {} steps, final loss {:.6}", last.step + 1, last.loss);
                }
            }
            println!("checkpoint written to {}", c.out.display());
            Ok(true)
        }
        Cmd::Eval(c) => {
            let cfg = load_experiment(&c)?;
            let row = evaluate_checkpoint(&cfg, &c.out)?;
            let report = single(&cfg.id, row);
            write_report(&c.out, &report)?;
            print_rows(c.report, &report)?;
            Ok(true)
        }
        Cmd::Ablate(c) => {
            let (matrix, mut cells) = MatrixConfig::load(&c.config)?;
            if let Some(s) = c.seed {
                cells = cells.into_iter().map(|cfg| cfg.with_seed(s)).collect();
            }
            let report = ablate(&matrix.id, &cells, Some(&c.out));
            write_report(&c.out, &report)?;
            print_rows(c.report, &report)?;
            for r in report.rows.iter().filter(|r| !r.is_ok()) {
                eprintln!("cell {} {}", r.config_id, r.status);
            }
            Ok(!report.partial)
        }
        Cmd::InspectTiling {
            image,
            width,
            height,
            tile,
            max_tiles,
            images,
        } => {
            let (w, h) = match (image, width, height) {
                (Some(p), _, _) => {
                    let img = ImageBuffer::read_ppm(Path::new(&p))?;
                    (img.width(), img.height())
                }
                (None, Some(w), Some(h)) => (w, h),
                _ => {
                    return Err(Error::Config(vec![
                        "inspect-tiling needs --image or both --width and --height".into(),
                    ]))
                }
            };
            let grid = select_grid(w, h, max_tiles);
            let thumb = usize::from(grid.count() > 1);
            let per_image = grid.count() + thumb;
            println!("image {w}x{h}, tile {tile}, max {max_tiles} tiles");
            println!("grid {}x{} (cols x rows), resized to {}x{}", grid.cols, grid.rows, grid.cols * tile, grid.rows * tile);
            println!("tiles {}, thumbnail {}", grid.count(), if thumb == 1 { "yes" } else { "no" });
            println!("patches per image {per_image}, for {images} image(s) {}", per_image * images);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
