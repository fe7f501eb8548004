use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rayon::prelude::*;
use rtseg_core::nifti;
use rtseg_core::report::{render_stats_table, render_table, Provenance, ScoreReport, TableFormat};
use rtseg_core::{score_cohort, CasePair};

use crate::common::{metadata, parse_pattern, write_text};
use crate::ScoreArgs;

pub fn run(args: ScoreArgs) -> anyhow::Result<()> {
    let pred_pattern = parse_pattern("--pred-pattern", &args.pred_pattern)?;
    let gt_pattern = parse_pattern("--gt-pattern", &args.gt_pattern)?;
    let preds: BTreeMap<String, PathBuf> = pred_pattern.scan(&args.pred)?.into_iter().collect();
    let gts: BTreeMap<String, PathBuf> = gt_pattern.scan(&args.gt)?.into_iter().collect();

    let missing: Vec<&str> = gts.keys().filter(|id| !preds.contains_key(*id)).map(String::as_str).collect();
    let orphans: Vec<&str> = preds.keys().filter(|id| !gts.contains_key(*id)).map(String::as_str).collect();
    if !missing.is_empty() {
        bail!("no prediction for case(s): {}", missing.join(", "));
    }
    if !orphans.is_empty() {
        bail!("no ground truth for prediction(s): {}", orphans.join(", "));
    }
    if gts.is_empty() {
        bail!("no ground-truth masks matching {} under {}", gt_pattern, args.gt.display());
    }

    let pairs: Vec<(&String, &PathBuf, &PathBuf)> = gts.iter().map(|(id, gt)| (id, gt, &preds[id])).collect();
    let cohort = pairs
        .par_iter()
        .map(|(id, gt, pred)| {
            let gt_mask = nifti::read_mask(gt, &args.labels)?;
            let pred_mask = nifti::read_mask(pred, &args.labels)?;
            CasePair::new(id.as_str(), gt_mask, pred_mask).with_context(|| format!("case {id}"))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let score = score_cohort(&cohort, &args.labels)?;

    let inputs: Vec<&Path> = pairs.iter().flat_map(|(_, gt, pred)| [gt.as_path(), pred.as_path()]).collect();
    let provenance = Provenance {
        model_name: args.model.clone().unwrap_or_else(|| dir_name(&args.pred)),
        layout: args.layout.map(|l| l.to_string()),
        fold: args.fold.clone(),
    };
    let report = ScoreReport::new(provenance, score, metadata(inputs)?);
    write_text(&args.out, &report.to_json())?;

    let row = report.to_row();
    match args.format {
        TableFormat::Json => print!("{}", report.to_json()),
        TableFormat::Csv => print!("{}", render_table(std::slice::from_ref(&row), TableFormat::Csv)?),
        TableFormat::Markdown => {
            print!("{}", render_table(std::slice::from_ref(&row), TableFormat::Markdown)?);
            println!();
            print!("{}", render_stats_table(std::slice::from_ref(&row), TableFormat::Markdown)?);
        }
    }
    Ok(())
}

fn dir_name(path: &Path) -> String {
    path.canonicalize()
        .ok()
        .as_deref()
        .and_then(Path::file_name)
        .or_else(|| path.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}
