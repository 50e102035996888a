use rand::seq::index::sample as sample_indices;
use rand::Rng;

use super::config::ExperimentConfig;
use super::records::{RecordContext, ResultRecord};
use crate::broadcast::{sample_repeated, write_samples_jsonl, write_secret, RepeatedParams, RootPrior};
use crate::error::{Error, Result};
use crate::exact_oracle::{check_table, conditional_subset_law, mutual_information_root, LowDegreeAnalysis, OracleCaps};
use crate::phylo_sq::{
    default_alpha, reconstruct_tree, recover_label, run_sq_pipeline, ExactSource, OracleMode, RandomSign,
    ReconstructionReport, SampleSource, VStatOracle,
};
use crate::rng;
use crate::root_estimators::{accuracy_report, wilson_interval, RowMatchConfig};
use crate::trees::{canonical_form, TreeTopology};

/// Records plus any JSON-lines reports a command produced.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CommandOutput {
    pub records: Vec<ResultRecord>,
    pub reports: Vec<String>,
}

/// MI tolerance below which a subset counts as uninformative.
pub const MI_ZERO_TOL: f64 = 1e-9;

/// Largest `I(X_ρ; X_S)` per subset size, flagging sizes where the
/// independence threshold predicts zero.
pub fn cmd_mi_scan(cfg: &ExperimentConfig) -> Result<CommandOutput> {
    let chain = cfg.load_chain()?;
    let q = chain.q();
    let prior = RootPrior::uniform(q);
    let spec = chain.spectral();
    let caps = OracleCaps::default();
    let mut out = CommandOutput::default();
    for (d, depth, eps) in cfg.grid() {
        let t = TreeTopology::build(d, depth)?;
        let ctx = RecordContext::new("mi-scan", cfg, d, depth, eps);
        let n = t.leaf_count();
        // the scan runs up to the full leaf set, so refuse before doing any work
        check_table(q, n, caps.table_entries)?;
        let thresholds = (spec.independence_threshold(depth), spec.nominal_independence_threshold(depth));
        for size in 1..=n {
            let subsets = subsets_of_size(n, size, cfg.subset_cap, cfg.seed);
            let mut max_mi: f64 = 0.0;
            for s in &subsets {
                let law = conditional_subset_law(&t, &chain, s, eps, &caps)?.with_prior(&prior);
                max_mi = max_mi.max(mutual_information_root(&law));
            }
            let flag = threshold_flag(size, thresholds, max_mi > MI_ZERO_TOL);
            out.records.push(ctx.record("max_mi", size, max_mi).with_flag(flag));
            out.records.push(ctx.record("subsets_examined", size, subsets.len() as f64));
        }
    }
    Ok(out)
}

/// `predicted_zero` when the verified threshold predicts zero and the value
/// is zero, `violation` when it predicts zero but the value is not, and
/// `nominal_violation` when only the nominal threshold is contradicted.
fn threshold_flag(size: usize, (verified, nominal): (Option<u128>, Option<u128>), nonzero: bool) -> &'static str {
    let below = |th: Option<u128>| th.is_none_or(|th| (size as u128) < th);
    match (below(verified), below(nominal), nonzero) {
        (true, _, true) => "violation",
        (true, _, false) => "predicted_zero",
        (false, true, true) => "nominal_violation",
        (false, true, false) => "predicted_zero",
        _ => "",
    }
}

/// All `size`-subsets of `0..n` in lexicographic order, or `cap` distinct
/// ones drawn deterministically when there are more.
fn subsets_of_size(n: usize, size: usize, cap: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut total: u128 = 1;
    for i in 0..size as u128 {
        total = total * (n as u128 - i) / (i + 1);
    }
    if total <= cap as u128 {
        let mut out = Vec::new();
        let mut cur: Vec<usize> = (0..size).collect();
        loop {
            out.push(cur.clone());
            let mut i = size;
            while i > 0 && cur[i - 1] == n - size + i - 1 {
                i -= 1;
            }
            if i == 0 {
                return out;
            }
            cur[i - 1] += 1;
            for j in i..size {
                cur[j] = cur[j - 1] + 1;
            }
        }
    }
    let mut r = rng::stream(seed, size as u64);
    let mut seen = std::collections::BTreeSet::new();
    while seen.len() < cap {
        let mut s = sample_indices(&mut r, n, size).into_vec();
        s.sort_unstable();
        seen.insert(s);
    }
    seen.into_iter().collect()
}

/// Degree-restricted correlation curve, maximized over target labels.
pub fn cmd_lowdeg_scan(cfg: &ExperimentConfig) -> Result<CommandOutput> {
    let chain = cfg.load_chain()?;
    let prior = RootPrior::uniform(chain.q());
    let spec = chain.spectral();
    let mut out = CommandOutput::default();
    for (d, depth, eps) in cfg.grid() {
        let t = TreeTopology::build(d, depth)?;
        let ctx = RecordContext::new("lowdeg-scan", cfg, d, depth, eps);
        let analysis = LowDegreeAnalysis::new(&t, &chain, &prior, eps, &OracleCaps::default())?;
        let n = t.leaf_count();
        let thresholds = (spec.independence_threshold(depth), spec.nominal_independence_threshold(depth));
        for degree in 0..=cfg.degree.unwrap_or(n).min(n) {
            let corr = analysis.max_corr_over_labels(degree)?;
            let flag = threshold_flag(degree, thresholds, corr > MI_ZERO_TOL);
            out.records.push(ctx.record("corr", degree, corr).with_flag(flag));
        }
        let ceiling = (0..chain.q()).map(|c| analysis.ceiling(c)).fold(0.0, f64::max);
        out.records.push(ctx.record("ceiling", "all", ceiling));
    }
    Ok(out)
}

/// Per-class and overall root-recovery error rates.
pub fn cmd_root_accuracy(cfg: &ExperimentConfig) -> Result<CommandOutput> {
    let chain = cfg.load_chain()?;
    let prior = RootPrior::uniform(chain.q());
    let estimator = cfg.estimator()?;
    let mut out = CommandOutput::default();
    for (i, (d, depth, eps)) in cfg.grid().into_iter().enumerate() {
        let t = TreeTopology::build(d, depth)?;
        let ctx = RecordContext::new("root-accuracy", cfg, d, depth, eps);
        let seed = derive_seed(cfg.seed, i as u64);
        let report = accuracy_report(&estimator, &t, &chain, &prior, eps, cfg.trials, seed)?;
        for row in &report.rows {
            let rate = row.errors / row.trials as f64;
            out.records.push(
                ctx.record(&format!("error_rate:{}", row.estimator), &row.class, rate).with_ci(row.ci_low, row.ci_high),
            );
        }
        out.records.push(ctx.record("worst_class_error", "max", report.worst_class_error));
    }
    Ok(out)
}

fn derive_seed(seed: u64, index: u64) -> u64 {
    rng::stream(seed, index).random()
}

#[derive(Debug, Default)]
struct Tally {
    tree: usize,
    label: usize,
    both: usize,
    grouping_failures: usize,
    queries: u64,
    violations: usize,
}

impl Tally {
    fn push_records(&self, ctx: &RecordContext, trials: usize, out: &mut CommandOutput) {
        for (metric, k) in [("success_rate", self.both), ("tree_rate", self.tree), ("label_rate", self.label)] {
            let (lo, hi) = wilson_interval(k, trials);
            out.records.push(ctx.record(metric, "all", k as f64 / trials as f64).with_ci(lo, hi));
        }
        out.records.push(ctx.record("grouping_failures", "all", self.grouping_failures as f64));
    }
}

/// Unknown-tree recovery from samples (`mode = samples`) or exact
/// infinite-sample moments (`mode = exact`).
pub fn cmd_tree_reconstruct(cfg: &ExperimentConfig) -> Result<CommandOutput> {
    let chain = cfg.load_chain()?;
    let mode = cfg.mode.as_deref().unwrap_or("samples");
    if mode != "samples" && mode != "exact" {
        return Err(Error::Invalid(format!("unknown reconstruction mode `{mode}`")));
    }
    let row_cfg = RowMatchConfig::default();
    let mut out = CommandOutput::default();
    for (i, (d, depth, eps)) in cfg.grid().into_iter().enumerate() {
        let ctx = RecordContext::new("tree-reconstruct", cfg, d, depth, eps);
        let alpha = match cfg.alpha {
            Some(a) => a,
            None => default_alpha(&chain, d, depth, eps, &row_cfg)?,
        };
        let m = if mode == "samples" { cfg.require_m()? } else { cfg.m.unwrap_or(1) };
        let params = RepeatedParams { d, depth, m, eps, chain: chain.clone() };
        let t = params.tree()?;
        let mut tally = Tally::default();
        for trial in 0..cfg.trials {
            let seed = derive_seed(derive_seed(cfg.seed, i as u64), trial as u64);
            let ds = sample_repeated(&RepeatedParams { m: if mode == "exact" { 0 } else { m }, ..params.clone() }, seed)?;
            let truth = canonical_form(&t, &ds.hidden.tau);
            let result = if mode == "exact" {
                let mut src = ExactSource::new(d, depth, &chain, &ds.hidden, eps, row_cfg)?;
                reconstruct_tree(&mut src, &chain, alpha, d, depth)
                    .and_then(|rec| recover_label(&mut src, &rec.tree).map(|y| (rec, y)))
            } else {
                let obs = ds.observations();
                let mut src = SampleSource::new(&obs, &chain, row_cfg)?;
                reconstruct_tree(&mut src, &chain, alpha, d, depth)
                    .and_then(|rec| recover_label(&mut src, &rec.tree).map(|y| (rec, y)))
            };
            match result {
                Ok((rec, y_hat)) => {
                    let tree_ok = rec.tree == truth;
                    let label_ok = y_hat == ds.hidden.y_star;
                    tally.tree += usize::from(tree_ok);
                    tally.label += usize::from(label_ok);
                    tally.both += usize::from(tree_ok && label_ok);
                    let report = ReconstructionReport::new(&rec, y_hat, 0, m, alpha);
                    out.reports.push(serde_json::to_string(&report)?);
                }
                Err(e @ Error::GroupingFailure { .. }) if cfg.trials == 1 => return Err(e),
                Err(e @ Error::GroupingFailure { .. }) => {
                    tally.grouping_failures += 1;
                    out.reports.push(serde_json::json!({ "trial": trial, "error": e.to_string() }).to_string());
                }
                Err(e) => return Err(e),
            }
        }
        tally.push_records(&ctx, cfg.trials, &mut out);
        out.records.push(ctx.record("alpha", "all", alpha));
    }
    Ok(out)
}

/// The reconstruction pipeline through a VSTAT oracle (`mode = honest` or
/// `adversarial`).
pub fn cmd_sq_run(cfg: &ExperimentConfig) -> Result<CommandOutput> {
    let chain = cfg.load_chain()?;
    let mode = cfg.mode.as_deref().unwrap_or("honest");
    if mode != "honest" && mode != "adversarial" {
        return Err(Error::Invalid(format!("unknown oracle mode `{mode}`")));
    }
    let m = cfg.require_m()?;
    let row_cfg = RowMatchConfig::default();
    let mut out = CommandOutput::default();
    for (i, (d, depth, eps)) in cfg.grid().into_iter().enumerate() {
        let ctx = RecordContext::new("sq-run", cfg, d, depth, eps);
        let alpha = match cfg.alpha {
            Some(a) => a,
            None => default_alpha(&chain, d, depth, eps, &row_cfg)?,
        };
        let params = RepeatedParams { d, depth, m, eps, chain: chain.clone() };
        let t = params.tree()?;
        let mut tally = Tally::default();
        for trial in 0..cfg.trials {
            let seed = derive_seed(derive_seed(cfg.seed, i as u64), trial as u64);
            let oracle_mode = if mode == "honest" {
                OracleMode::Honest
            } else {
                OracleMode::Adversarial(Box::new(RandomSign::new(derive_seed(seed, 1))))
            };
            let mut oracle = VStatOracle::from_seed(&params, oracle_mode, seed)?;
            // evaluation only: the same draw the oracle made for its hidden state
            let hidden = crate::broadcast::sample_hidden(&t, chain.q(), seed);
            let truth = canonical_form(&t, &hidden.tau);
            let result = run_sq_pipeline(&mut oracle, &chain, d, depth, alpha);
            tally.violations += oracle.band_violations();
            tally.queries += oracle.query_count();
            match result {
                Ok(outcome) => {
                    let tree_ok = outcome.reconstruction.tree == truth;
                    let label_ok = outcome.y_hat == hidden.y_star;
                    tally.tree += usize::from(tree_ok);
                    tally.label += usize::from(label_ok);
                    tally.both += usize::from(tree_ok && label_ok);
                    let report =
                        ReconstructionReport::new(&outcome.reconstruction, outcome.y_hat, outcome.queries, m, alpha);
                    out.reports.push(serde_json::to_string(&report)?);
                }
                Err(e @ Error::GroupingFailure { .. }) if cfg.trials == 1 => return Err(e),
                Err(e @ Error::GroupingFailure { .. }) => {
                    tally.grouping_failures += 1;
                    out.reports.push(serde_json::json!({ "trial": trial, "error": e.to_string() }).to_string());
                }
                Err(e) => return Err(e),
            }
        }
        tally.push_records(&ctx, cfg.trials, &mut out);
        out.records.push(ctx.record("alpha", "all", alpha));
        out.records.push(ctx.record("queries_per_trial", "mean", tally.queries as f64 / cfg.trials as f64));
        out.records.push(ctx.record("band_violations", "all", tally.violations as f64));
    }
    Ok(out)
}

/// Writes a repeated-model dataset as JSON lines to `out` and its hidden
/// state to `<out>.secret.json`.
pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<CommandOutput> {
    let chain = cfg.load_chain()?;
    let grid = cfg.grid();
    if grid.len() != 1 {
        return Err(Error::Invalid("simulate takes a single d, depth and eps".into()));
    }
    let (d, depth, eps) = grid[0];
    let path = cfg.out.as_ref().ok_or_else(|| Error::Invalid("simulate needs an output path".into()))?;
    let m = cfg.m.unwrap_or(0);
    let ds = sample_repeated(&RepeatedParams { d, depth, m, eps, chain }, cfg.seed)?;
    let mut data = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_samples_jsonl(&ds.samples, &mut data)?;
    std::io::Write::flush(&mut data)?;
    let secret = std::fs::File::create(super::sidecar(path, "secret.json"))?;
    write_secret(&ds.hidden, secret)?;
    Ok(CommandOutput::default())
}
