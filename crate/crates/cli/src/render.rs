//! Plain-text tables for `--format table`.

use std::fmt::Write;

use branchsim::scenario::Report;
use branchsim::{Engine, Result};

pub fn table(engine: &Engine, report: &Report) -> Result<String> {
    let mut s = String::new();
    let w = |s: &mut String, args: std::fmt::Arguments| s.write_fmt(args).expect("writing to a String");
    w(
        &mut s,
        format_args!(
            "{:<6} {:<6} {:<7} {:<11} {:<9} {:>6} {:>6} {:>6}\n",
            "node", "parent", "branch", "window", "status", "fresh", "replay", "reused"
        ),
    );
    for n in &report.savings.nodes {
        let node = engine.node(n.id)?;
        let dash = || "-".to_string();
        w(
            &mut s,
            format_args!(
                "{:<6} {:<6} {:<7} {:<11} {:<9} {:>6} {:>6} {:>6}\n",
                n.id.to_string(),
                node.parent.map_or_else(dash, |p| p.to_string()),
                node.branch_step().map_or_else(dash, |b| b.to_string()),
                format!("{}..{}", node.window.start, node.window.end),
                format!("{:?}", node.status).to_lowercase(),
                n.fresh,
                n.replay,
                n.reused
            ),
        );
    }
    w(&mut s, format_args!("\nsteps_linear     {}\n", report.savings.steps_linear));
    w(&mut s, format_args!("steps_branching  {}\n", report.savings.steps_branching));
    w(&mut s, format_args!("ratio            {:.4}\n", report.savings.ratio));
    for split in &report.equivalence {
        w(
            &mut s,
            format_args!(
                "split at {}: {} prefix class(es), {} suffix class(es) -> {}\n",
                split.branch_step,
                split.prefix_classes.len(),
                split.suffix_classes.len(),
                serde_json::to_value(split.advice.verdict)?.as_str().unwrap_or_default()
            ),
        );
    }
    for v in &report.violations {
        w(&mut s, format_args!("violation: {}\n", serde_json::to_string(v)?));
    }
    Ok(s)
}
