use std::path::Path;

use anyhow::Context;
use rayon::prelude::*;
use rtseg_core::ensemble::{run_ensemble, ClassMapping, EnsembleMember, EnsembleMode, EnsembleSpec};
use rtseg_core::nifti::{self, write_volume};
use rtseg_core::report::TableFormat;
use rtseg_core::Label;
use serde_json::json;

use crate::common::usage;
use crate::EnsembleArgs;

fn parse_member(spec: &str) -> anyhow::Result<EnsembleMember> {
    let (head, source) =
        spec.split_once('=').ok_or_else(|| usage(format!("--member {spec:?}: expected FAMILY[@FOLD]=PATH")))?;
    let (family, fold) = match head.split_once('@') {
        Some((family, fold)) => {
            let fold = fold.parse().map_err(|_| usage(format!("--member {spec:?}: fold {fold:?} is not a number")))?;
            (family, Some(fold))
        }
        None => (head, None),
    };
    if family.is_empty() || source.is_empty() {
        return Err(usage(format!("--member {spec:?}: empty family or path")));
    }
    Ok(EnsembleMember { family: family.to_string(), fold, source: source.to_string() })
}

fn parse_class_labels(text: &str) -> anyhow::Result<ClassMapping> {
    let labels = text
        .split(',')
        .map(|t| t.trim().parse::<Label>().map_err(|_| usage(format!("--class-labels: {t:?} is not a label"))))
        .collect::<anyhow::Result<Vec<_>>>()?;
    ClassMapping::new(labels).map_err(|e| usage(format!("--class-labels: {e}")))
}

pub fn run(args: EnsembleArgs) -> anyhow::Result<()> {
    let members = args.members.iter().map(|m| parse_member(m)).collect::<anyhow::Result<Vec<_>>>()?;
    let explicit = args.class_labels.as_deref().map(parse_class_labels).transpose()?;
    let (_, target) = nifti::read_header(&args.target)?;

    let inputs = members
        .par_iter()
        .map(|m| nifti::read_probability_map(&m.source).with_context(|| format!("member {m}")))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let mapping = explicit.unwrap_or_else(|| ClassMapping::identity(inputs[0].class_count()));
    let spec = EnsembleSpec { members, mode: EnsembleMode::Average, target, mapping };
    let output = run_ensemble(&spec, &inputs)?;

    write_volume(&output.mask, &args.out)?;
    if let Some(path) = &args.prob_out {
        write_volume(&output.averaged, path)?;
    }
    print_summary(&args.out, &spec, &output.families, args.format);
    Ok(())
}

fn print_summary(out: &Path, spec: &EnsembleSpec, families: &[(String, usize)], format: TableFormat) {
    match format {
        TableFormat::Json => {
            let value = json!({
                "output": out.display().to_string(),
                "members": spec.members,
                "families": families.iter().map(|(f, n)| json!({"family": f, "members": n})).collect::<Vec<_>>(),
            });
            println!("{}", serde_json::to_string_pretty(&value).expect("summary serializes"));
        }
        TableFormat::Csv => {
            println!("family,members");
            for (f, n) in families {
                println!("{f},{n}");
            }
        }
        TableFormat::Markdown => {
            println!("| Family | Members |");
            println!("| --- | ---: |");
            for (f, n) in families {
                println!("| {f} | {n} |");
            }
            println!();
            println!("wrote {}", out.display());
        }
    }
}
