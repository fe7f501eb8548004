use std::fs;

use anyhow::Context;
use rtseg_core::report::{render_stats_table_with, render_table_with, ScoreReport};

use crate::common::{metadata, write_text};
use crate::ReportArgs;

pub fn run(args: ReportArgs) -> anyhow::Result<()> {
    let rows = args
        .inputs
        .iter()
        .map(|path| {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let report: ScoreReport =
                serde_json::from_str(&text).with_context(|| format!("{} is not a score report", path.display()))?;
            Ok(report.to_row())
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let meta = metadata(args.inputs.iter().map(|p| p.as_path()))?;
    let table = if args.stats {
        render_stats_table_with(&rows, args.format, &meta)?
    } else {
        render_table_with(&rows, args.format, &meta)?
    };
    match &args.out {
        Some(path) => write_text(path, &table)?,
        None => print!("{table}"),
    }
    Ok(())
}
