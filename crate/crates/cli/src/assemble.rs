use std::collections::BTreeMap;
use std::fs;

use anyhow::{bail, Context};
use rayon::prelude::*;
use rtseg_core::dataset::{
    assemble_case, assemble_task1_pool, fold_splits, merge_external_pool, scan_cohort, scan_external,
    split_folds, filter_nonzero_gt, validate_cohort, write_dataset, CaseField, ChallengeCase,
    DatasetManifest, LayoutId, MaskEncoding, NiftiFiles, Task1Stage, ValidationReport,
};
use rtseg_core::report::TableFormat;
use serde_json::json;

use crate::common::{case_field, parse_pattern, usage, write_text};
use crate::{AssembleArgs, SplitArgs, ValidateArgs};

fn training_cases(cases: Vec<ChallengeCase>) -> Vec<ChallengeCase> {
    let (keep, skip): (Vec<_>, Vec<_>) = cases.into_iter().partition(|c| c.get(CaseField::MidRtMask).is_some());
    for case in &skip {
        eprintln!("skipping {}: no mid-RT mask", case.case_id);
    }
    keep
}

pub fn run_assemble(args: AssembleArgs) -> anyhow::Result<()> {
    let root = args.root.as_deref().ok_or_else(|| usage("--root is required"))?;
    let naming = args.naming.naming()?;
    let encoding = if args.one_hot_masks { MaskEncoding::OneHot } else { MaskEncoding::Raw };
    if args.external.is_some() && args.layout != LayoutId::BratsPretrain {
        return Err(usage("--external only applies to layout brats_pretrain"));
    }
    let cases = scan_cohort(root, &naming)?;

    let mut manifest = match args.layout {
        LayoutId::Task1Pretrain => assemble_task1_pool(&training_cases(cases), Task1Stage::Pretrain)?,
        LayoutId::Task1Finetune => assemble_task1_pool(&cases, Task1Stage::Finetune)?,
        LayoutId::BratsPretrain => {
            let external = args.external.as_deref().ok_or_else(|| usage("layout brats_pretrain needs --external"))?;
            let image = parse_pattern("--external-image-pattern", &args.external_image_pattern)?;
            let mask = parse_pattern("--external-mask-pattern", &args.external_mask_pattern)?;
            let (ext, unpaired) = scan_external(external, &image, &mask)?;
            if !unpaired.is_empty() {
                bail!("external cases without both image and mask: {}", unpaired.join(", "));
            }
            let pool = assemble_task1_pool(&training_cases(cases), Task1Stage::Pretrain)?;
            merge_external_pool(&pool, &ext, &NiftiFiles)?
        }
        layout => {
            let mut cases = training_cases(cases);
            if layout == LayoutId::D516 {
                let field = case_field(&args.filter_mask)?;
                if !field.is_mask() {
                    return Err(usage(format!("--filter-mask {}: not a mask field", args.filter_mask)));
                }
                let outcome = filter_nonzero_gt(cases, field, &NiftiFiles)?;
                for (case, reason) in &outcome.removed {
                    eprintln!("removed {}: {reason}", case.case_id);
                }
                cases = outcome.kept;
            }
            let samples = cases
                .par_iter()
                .map(|c| assemble_case(c, layout, encoding))
                .collect::<Result<Vec<_>, _>>()?;
            DatasetManifest::stacked(layout, encoding, samples)?
        }
    };
    manifest.assign_folds(args.folds, args.seed)?;
    let written = write_dataset(&manifest, &args.out)?;
    println!(
        "wrote {} ({} samples from {} patients, {} folds) to {}",
        written.name,
        written.num_training,
        written.case_ids().len(),
        args.folds,
        args.out.display()
    );
    Ok(())
}

pub fn run_split(args: SplitArgs) -> anyhow::Result<()> {
    let samples: Vec<(String, String)> = match (&args.manifest, &args.ids) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let manifest = DatasetManifest::from_json(&text).with_context(|| format!("parsing {}", path.display()))?;
            manifest.training.iter().map(|s| (s.sample_id.clone(), s.case_id.clone())).collect()
        }
        (None, Some(path)) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            text.lines().map(str::trim).filter(|l| !l.is_empty()).map(|l| (l.to_string(), l.to_string())).collect()
        }
        (None, None) => return Err(usage("one of --manifest or --ids is required")),
    };
    let ids: Vec<String> = samples.iter().map(|(_, c)| c.clone()).collect();
    let assignment: BTreeMap<String, usize> = split_folds(&ids, args.k, args.seed)?;
    let splits = fold_splits(&samples, &assignment, args.k);
    let value = json!({ "k": args.k, "seed": args.seed, "assignment": assignment, "splits": splits });
    let mut text = serde_json::to_string_pretty(&value)?;
    text.push('\n');
    write_text(&args.out, &text)?;
    for (fold, split) in splits.iter().enumerate() {
        println!("fold {fold}: {} train, {} val", split.train.len(), split.val.len());
    }
    Ok(())
}

fn print_validation(report: &ValidationReport, format: TableFormat) -> anyhow::Result<()> {
    match format {
        TableFormat::Json => println!("{}", serde_json::to_string_pretty(report)?),
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(std::io::stdout());
            w.write_record(["severity", "case_id", "kind", "path", "message"])?;
            let all = report.errors.iter().map(|i| ("error", i)).chain(report.warnings.iter().map(|i| ("warning", i)));
            for (severity, issue) in all {
                let kind = serde_json::to_value(issue.kind)?;
                let path = issue.path.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
                w.write_record([severity, &issue.case_id, kind.as_str().unwrap_or_default(), &path, &issue.message])?;
            }
            w.flush()?;
        }
        TableFormat::Markdown => {
            println!(
                "{} cases checked: {} error(s), {} warning(s)",
                report.cases,
                report.errors.len(),
                report.warnings.len()
            );
            for issue in &report.errors {
                println!("error   {}: {}", issue.case_id, issue.message);
            }
            for issue in &report.warnings {
                println!("warning {}: {}", issue.case_id, issue.message);
            }
        }
    }
    Ok(())
}

pub fn run_validate(args: ValidateArgs) -> anyhow::Result<()> {
    let cases = scan_cohort(&args.root, &args.naming.naming()?)?;
    let report = validate_cohort(&cases);
    print_validation(&report, args.format)?;
    if let Some(first) = report.errors.first() {
        let at = first.path.as_ref().map(|p| format!(" ({})", p.display())).unwrap_or_default();
        bail!("{} validation error(s); first: case {}{at}: {}", report.errors.len(), first.case_id, first.message);
    }
    Ok(())
}
