//! `rtseg` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

mod assemble;
mod common;
mod ensemble;
mod report;
mod score;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rtseg_core::dataset::LayoutId;
use rtseg_core::report::TableFormat;
use rtseg_core::LabelSet;

use crate::common::UsageError;

#[derive(Debug, Parser)]
#[command(name = "rtseg", version, about = "Score, ensemble and assemble radiotherapy tumor segmentations")]
struct Cli {
    /// Worker threads; defaults to the number of available cores.
    #[arg(long, short = 'j', global = true, env = "RTSEG_JOBS")]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Aggregated and per-case Dice of predicted masks against ground truth.
    Score(ScoreArgs),
    /// Average probability maps across folds and model families, then argmax.
    Ensemble(EnsembleArgs),
    /// Build a training dataset directory and dataset.json from a challenge tree.
    Assemble(AssembleArgs),
    /// Seeded per-patient k-fold split.
    Split(SplitArgs),
    /// Check a challenge tree for missing files, bad labels and grid mismatches.
    Validate(ValidateArgs),
    /// Render result tables from score reports.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Directory of predicted masks.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth masks.
    #[arg(long)]
    pub gt: PathBuf,
    /// Labels to score.
    #[arg(long, env = "RTSEG_LABELS", default_value = "1,2")]
    pub labels: LabelSet,
    /// Prediction file naming; the case id is the `{id}` part.
    #[arg(long, default_value = "{id}.nii.gz")]
    pub pred_pattern: String,
    /// Ground-truth file naming.
    #[arg(long, default_value = "{id}.nii.gz")]
    pub gt_pattern: String,
    /// Model name recorded in the report (defaults to the prediction directory name).
    #[arg(long)]
    pub model: Option<String>,
    /// Dataset layout the model was trained on, for provenance.
    #[arg(long)]
    pub layout: Option<LayoutId>,
    /// Fold or fold set, for provenance.
    #[arg(long)]
    pub fold: Option<String>,
    /// Score report JSON to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Format of the table printed on standard output.
    #[arg(long, default_value = "markdown")]
    pub format: TableFormat,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    /// Probability map as FAMILY[@FOLD]=PATH; repeat for every member.
    #[arg(long = "member", required = true)]
    pub members: Vec<String>,
    /// Reference image whose grid the output uses.
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long, default_value = "average", value_parser = ["average"])]
    pub mode: String,
    /// Labels for foreground classes 1..C-1, e.g. "1,2" (default: class index).
    #[arg(long)]
    pub class_labels: Option<String>,
    /// Segmentation mask to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the averaged probability map here.
    #[arg(long)]
    pub prob_out: Option<PathBuf>,
    #[arg(long, default_value = "markdown")]
    pub format: TableFormat,
}

#[derive(Debug, Args)]
pub struct NamingArgs {
    /// Override a case file pattern: FIELD=PATTERN, FIELD one of pre_rt_image, pre_rt_mask,
    /// mid_rt_image, mid_rt_mask, reg_pre_rt_image, reg_pre_rt_mask.
    #[arg(long = "pattern")]
    pub patterns: Vec<String>,
}

#[derive(Debug, Args)]
pub struct AssembleArgs {
    /// Challenge tree with one folder per case.
    #[arg(long)]
    pub root: Option<PathBuf>,
    /// 504, 505, 506, 507, 516, task1_pretrain, task1_finetune or brats_pretrain.
    #[arg(long)]
    pub layout: LayoutId,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub naming: NamingArgs,
    /// Encode registered pre-RT masks as one binary channel per label.
    #[arg(long)]
    pub one_hot_masks: bool,
    /// Mask checked by the 516 filter.
    #[arg(long, default_value = "reg_pre_rt_mask")]
    pub filter_mask: String,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// External single-label cohort (brats_pretrain).
    #[arg(long)]
    pub external: Option<PathBuf>,
    #[arg(long, default_value = "imagesTr/{id}_0000.nii.gz")]
    pub external_image_pattern: String,
    #[arg(long, default_value = "labelsTr/{id}.nii.gz")]
    pub external_mask_pattern: String,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// dataset.json written by `assemble`.
    #[arg(long, conflicts_with = "ids", required_unless_present = "ids")]
    pub manifest: Option<PathBuf>,
    /// Text file with one case id per line.
    #[arg(long)]
    pub ids: Option<PathBuf>,
    #[arg(long, short = 'k', default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Split JSON to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub root: PathBuf,
    #[command(flatten)]
    pub naming: NamingArgs,
    #[arg(long, default_value = "markdown")]
    pub format: TableFormat,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Score report JSON files, one table row each.
    #[arg(long = "input", required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, default_value = "markdown")]
    pub format: TableFormat,
    /// Render mean ± STD of per-case Dice instead of aggregated Dice.
    #[arg(long)]
    pub stats: bool,
    /// Write the table here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let jobs = match cli.jobs {
        Some(0) => return Err(UsageError::new("--jobs must be at least 1").into()),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    pool.install(|| match cli.command {
        Command::Score(args) => score::run(args),
        Command::Ensemble(args) => ensemble::run(args),
        Command::Assemble(args) => assemble::run_assemble(args),
        Command::Split(args) => assemble::run_split(args),
        Command::Validate(args) => assemble::run_validate(args),
        Command::Report(args) => report::run(args),
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
