use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;
use sharelens::blp::{
    elasticities, fit_blp, invert_shares, BlpFit, BlpProblem, ChoiceModel, ChoiceModelConfig, ElasticitySummary,
    ElasticityTable, ElasticityTarget, InversionOptions, RandomCoefficients,
};
use sharelens::diagnostics::{
    holdout_eval, iv_diagnostics, placebo_test, render_diagnostics, render_holdout, render_placebo,
};
use sharelens::embed::{
    panel_isolation, train_embeddings, Corpus, InstrumentSet, MaskReason, WordVectors, ISOL_MEAN, ISOL_STD,
};
use sharelens::estimate::{fit_model, render_table, rival_instrument, EstimateReport, ModelKind, ModelSpec};
use sharelens::panel::{
    compute_shares, factorize, lag_and_standardize, load_panel, load_reviews, write_reviews, Cell, Design, MarketPanel, NEST_TERM,
};
use sharelens::synth::generate_panel;

use crate::config::{DataConfig, ElasticityModel, PipelineConfig};
use crate::error::{CliError, Context};
use crate::run::Run;

/// Writes `<stem>.txt`, echoes it to stdout and records it.
fn emit_text(run: &mut Run, stem: &str, text: &str) -> Result<(), CliError> {
    print!("{text}");
    run.write(&format!("{stem}.txt"), text.as_bytes())
}

fn data(config: &PipelineConfig) -> Result<&DataConfig, CliError> {
    config
        .data
        .as_ref()
        .ok_or_else(|| CliError::Validation("missing [data] section (panel, schema, market_size)".into()))
}

/// Loads the panel and, when configured, its reviews.
fn load(config: &PipelineConfig, run: &mut Run) -> Result<(MarketPanel, sharelens::panel::IngestReport), CliError> {
    let d = data(config)?;
    run.input(&d.panel);
    let (mut panel, report) = load_panel(&d.panel, &d.schema, &d.market_size).step("ingest")?;
    if let Some(path) = &d.reviews {
        run.input(path);
        panel.reviews = load_reviews(path).step("ingest reviews")?;
    }
    Ok((panel, report))
}

fn wants_isolation(config: &PipelineConfig) -> bool {
    config.instruments.isolation.unwrap_or_else(|| {
        let m = &config.model;
        let placebo = config.placebo.columns.iter().flatten();
        m.instruments
            .iter()
            .chain(&m.design.regressors)
            .chain(&m.endogenous)
            .chain(placebo)
            .any(|c| c == ISOL_MEAN || c == ISOL_STD)
    })
}

fn empty_set(panel: &MarketPanel) -> InstrumentSet {
    let n = panel.len();
    InstrumentSet {
        keys: panel.keys.clone(),
        columns: BTreeMap::new(),
        isolation_mask: vec![None; n],
        source_period: vec![None; n],
        rival_fallbacks: vec![0; n],
        std_convention: "population".into(),
    }
}

/// Isolation, rival and lagged instruments as configured.
fn build_instruments(config: &PipelineConfig, run: &mut Run, panel: &MarketPanel) -> Result<InstrumentSet, CliError> {
    let mut set = if wants_isolation(config) {
        let pretrained = match config.data.as_ref().and_then(|d| d.word_vectors.as_ref()) {
            Some(p) => {
                run.input(p);
                Some(WordVectors::load(p).step("word vectors")?)
            }
            None => None,
        };
        panel_isolation(panel, &config.embedding, pretrained.as_ref(), config.instruments.scope)
            .step("embed")?
            .1
    } else {
        empty_set(panel)
    };
    for r in &config.instruments.rivals {
        let (name, values) = rival_instrument(panel, &r.column, r.scope, r.stat).step("instruments")?;
        set.add_column(&name, values).step("instruments")?;
    }
    for l in &config.instruments.lagged {
        let col = lag_and_standardize(panel, &l.column, l.transform, l.group.as_deref(), l.lag).step("instruments")?;
        set.add_column(&col.name, col.values).step("instruments")?;
    }
    Ok(set)
}

/// The panel with every configured instrument attached.
fn prepared(config: &PipelineConfig, run: &mut Run) -> Result<MarketPanel, CliError> {
    let (mut panel, _) = load(config, run)?;
    let set = build_instruments(config, run, &panel)?;
    set.attach(&mut panel).step("instruments")?;
    Ok(panel)
}

pub fn ingest(config: &PipelineConfig, run: &mut Run) -> Result<(), CliError> {
    let (panel, report) = load(config, run)?;
    run.write_with("panel.csv", |b| panel.write_csv(b))?;
    if !panel.reviews.is_empty() {
        run.write_with("reviews.jsonl", |b| write_reviews(&panel.reviews, b))?;
    }
    run.write_json("ingest.json", &report)?;
    let mut s = String::new();
    let _ = writeln!(s, "Ingest");
    let _ = writeln!(s, "  rows read      {:>10}", report.rows_read);
    let _ = writeln!(s, "  rows accepted  {:>10}", report.rows_accepted);
    let _ = writeln!(s, "  rows rejected  {:>10}", report.rejected.len());
    let _ = writeln!(s, "  markets        {:>10}", report.markets);
    let _ = writeln!(s, "  periods        {:>10}", report.periods);
    let _ = writeln!(s, "  reviews        {:>10}", panel.reviews.len());
    for r in report.rejected.iter().take(20) {
        let _ = writeln!(s, "  line {}: {}", r.line, r.reason);
    }
    emit_text(run, "ingest", &s)
}

#[derive(Serialize)]
struct SharesSummary {
    rows: usize,
    dropped: usize,
    removed_nests: usize,
    min_outside_share: f64,
    mean_share: f64,
}

pub fn shares(config: &PipelineConfig, run: &mut Run) -> Result<(), CliError> {
    let (panel, _) = load(config, run)?;
    let table = compute_shares(&panel, config.model.zero_policy).step("shares")?;
    run.write_with("shares.csv", |b| table.write_csv(b))?;
    let n = table.rows.len().max(1) as f64;
    let summary = SharesSummary {
        rows: table.rows.len(),
        dropped: table.dropped.len(),
        removed_nests: table.removed_nests.len(),
        min_outside_share: table.rows.iter().map(|r| r.outside_share).fold(f64::INFINITY, f64::min),
        mean_share: table.rows.iter().map(|r| r.share).sum::<f64>() / n,
    };
    run.write_json("shares.json", &summary)?;
    let mut s = String::new();
    let _ = writeln!(s, "Shares");
    let _ = writeln!(s, "  rows               {:>10}", summary.rows);
    let _ = writeln!(s, "  dropped (zeros)    {:>10}", summary.dropped);
    let _ = writeln!(s, "  removed nests      {:>10}", summary.removed_nests);
    let _ = writeln!(s, "  min outside share  {:>10.6}", summary.min_outside_share);
    let _ = writeln!(s, "  mean share         {:>10.6}", summary.mean_share);
    emit_text(run, "shares", &s)
}

#[derive(Serialize)]
struct EmbedSummary {
    documents: usize,
    untrained: usize,
    vocabulary: usize,
    dims: usize,
    config: sharelens::embed::EmbeddingConfig,
}

pub fn embed(config: &PipelineConfig, run: &mut Run) -> Result<(), CliError> {
    let (panel, _) = load(config, run)?;
    let pretrained = match config.data.as_ref().and_then(|d| d.word_vectors.as_ref()) {
        Some(p) => {
            run.input(p);
            Some(WordVectors::load(p).step("word vectors")?)
        }
        None => None,
    };
    let corpus = Corpus::from_panel(&panel, config.embedding.doc_unit);
    let model = train_embeddings(&corpus, &config.embedding, pretrained.as_ref()).step("embed")?;
    run.write_with("embedding.bin", |b| model.write(b))?;
    let summary = EmbedSummary {
        documents: model.entities.len(),
        untrained: model.trained.iter().filter(|t| !**t).count(),
        vocabulary: model.vocab.len(),
        dims: model.dims(),
        config: config.embedding.clone(),
    };
    run.write_json("embedding.json", &summary)?;
    let mut s = String::new();
    let _ = writeln!(s, "Embedding");
    let _ = writeln!(s, "  documents   {:>8}", summary.documents);
    let _ = writeln!(s, "  untrained   {:>8}", summary.untrained);
    let _ = writeln!(s, "  vocabulary  {:>8}", summary.vocabulary);
    let _ = writeln!(s, "  dims        {:>8}", summary.dims);
    emit_text(run, "embedding", &s)
}

#[derive(Serialize)]
struct ColumnSummary {
    name: String,
    present: usize,
    missing: usize,
    mean: Option<f64>,
    std_dev: Option<f64>,
}

#[derive(Serialize)]
struct InstrumentSummary {
    rows: usize,
    columns: Vec<ColumnSummary>,
    masked: BTreeMap<String, usize>,
    rival_fallbacks: usize,
    std_convention: String,
}

pub fn instruments(config: &PipelineConfig, run: &mut Run) -> Result<(), CliError> {
    let (panel, _) = load(config, run)?;
    let set = build_instruments(config, run, &panel)?;
    run.write_with("instruments.csv", |b| set.write_csv(b))?;
    let columns = set
        .columns
        .iter()
        .map(|(name, v)| {
            let ok: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
            let n = ok.len();
            let mean = (n > 0).then(|| ok.iter().sum::<f64>() / n as f64);
            let std_dev = mean.map(|m| (ok.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64).sqrt());
            ColumnSummary {
                name: name.clone(),
                present: n,
                missing: v.len() - n,
                mean,
                std_dev,
            }
        })
        .collect();
    let mut masked = BTreeMap::new();
    for m in set.isolation_mask.iter().flatten() {
        let key = match m {
            MaskReason::NoEntityRow => "no_entity_row",
            MaskReason::TooFewAlternatives => "too_few_alternatives",
            MaskReason::MissingValue => "missing_value",
        };
        *masked.entry(key.to_string()).or_insert(0) += 1;
    }
    let summary = InstrumentSummary {
        rows: set.keys.len(),
        columns,
        masked,
        rival_fallbacks: set.rival_fallbacks.iter().sum(),
        std_convention: set.std_convention.clone(),
    };
    run.write_json("instruments.json", &summary)?;
    let width = summary.columns.iter().map(|c| c.name.len()).max().unwrap_or(6).max(6);
    let mut s = String::new();
    let _ = writeln!(s, "Instruments ({} rows, std: {})", summary.rows, summary.std_convention);
    let _ = writeln!(s, "  {:<width$}  {:>8}  {:>8}  {:>10}  {:>10}", "column", "present", "missing", "mean", "sd");
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    for c in &summary.columns {
        let _ = writeln!(
            s,
            "  {:<width$}  {:>8}  {:>8}  {:>10}  {:>10}",
            c.name,
            c.present,
            c.missing,
            fmt(c.mean),
            fmt(c.std_dev)
        );
    }
    for (k, v) in &summary.masked {
        let _ = writeln!(s, "  masked ({k}): {v}");
    }
    emit_text(run, "instruments", &s)
}

pub fn estimate(config: &PipelineConfig, run: &mut Run) -> Result<(), CliError> {
    let panel = prepared(config, run)?;
    let reports = fit_model(&panel, &config.model).step("estimate")?;
    run.write_json("estimate.json", &reports)?;
    let mut s = String::new();
    for (i, r) in reports.iter().enumerate() {
        if config.model.kind == ModelKind::Quantile {
            let _ = writeln!(s, "tau = {}", config.model.taus[i]);
        }
        s.push_str(&render_table(r));
        s.push('\n');
    }
    emit_text(run, "estimate", &s)
}

fn blp_problem(config: &PipelineConfig, panel: &MarketPanel) -> Result<BlpProblem, CliError> {
    let spec = &config.model;
    if config.blp.rc_columns.is_empty() {
        return Err(CliError::Validation("blp.rc_columns must name at least one column".into()));
    }
    let (shares, design) = spec.build(panel).step("blp")?;
    let instruments = spec.instruments_for(panel, &design).step("blp")?;
    let vcov = spec.vcov_for(panel, &design).step("blp")?;
    let mut problem = BlpProblem::from_panel(
        panel,
        &shares,
        &design,
        &spec.endogenous,
        &instruments,
        &config.blp.rc_columns,
        &vcov,
    )
    .step("blp")?;
    problem.absorb = spec.absorb;
    Ok(problem)
}

fn run_blp(config: &PipelineConfig, run: &mut Run, panel: &MarketPanel) -> Result<(BlpProblem, BlpFit), CliError> {
    let problem = blp_problem(config, panel)?;
    let mut opts = config.blp.options.clone();
    if opts.checkpoint.is_none() {
        opts.checkpoint = Some(run.path("blp_checkpoint.json"));
    }
    let fit = fit_blp(&problem, &opts).step("blp")?;
    if opts.checkpoint.as_deref() == Some(run.path("blp_checkpoint.json").as_path()) {
        run.record("blp_checkpoint.json");
    }
    Ok((problem, fit))
}

pub fn blp(config: &PipelineConfig, run: &mut Run) -> Result<(), CliError> {
    let panel = prepared(config, run)?;
    let (_, fit) = run_blp(config, run, &panel)?;
    run.write_json("blp.json", &fit)?;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "BLP random coefficients: objective {:.6e}, {} evaluations, converged {}",
        fit.objective, fit.evaluations, fit.converged
    );
    let width = fit.rc_labels.iter().map(|l| l.len()).max().unwrap_or(5).max(5);
    for c in fit.sigma_coefficients() {
        let _ = writeln!(s, "  sigma[{:<width$}]  {:>12.6}  ({:.6})", c.label, c.estimate, c.std_error);
    }
    s.push_str(&render_table(&fit.report));
    emit_text(run, "blp", &s)
}

/// Cells over design rows, keyed by (market, period) of the panel row.
fn design_cells(panel: &MarketPanel, design: &Design) -> Vec<Cell> {
    let mut by_cell: BTreeMap<(String, i64), Vec<usize>> = BTreeMap::new();
    for (local, &obs) in design.rows.iter().enumerate() {
        let k = &panel.keys[obs];
        by_cell.entry((k.market.clone(), k.period)).or_default().push(local);
    }
    by_cell
        .into_iter()
        .map(|((market, period), rows)| Cell { market, period, rows })
        .collect()
}

fn target_for(
    report: &EstimateReport,
    name: &str,
    panel: &MarketPanel,
    design: &Design,
) -> Result<ElasticityTarget, CliError> {
    let pick = |v: Vec<f64>| design.rows.iter().map(|&r| v[r]).collect::<Vec<f64>>();
    let x = pick(panel.numeric(name).step("elasticities")?);
    ElasticityTarget::from_report(report, name, x, |other| panel.numeric(other).map(pick)).step("elasticities")
}

#[derive(Serialize)]
struct ElasticityOutput {
    model: String,
    summary: Option<ElasticitySummary>,
}

pub fn elasticities_cmd(config: &PipelineConfig, run: &mut Run) -> Result<(), CliError> {
    let panel = prepared(config, run)?;
    let ec = &config.elasticities;
    let target_name = ec
        .target
        .clone()
        .or_else(|| panel.recommendation_columns().into_iter().next())
        .unwrap_or_else(|| "price".into());
    let (model, cells, delta, target, design, label) = match ec.model {
        ElasticityModel::Blp => {
            let (problem, fit) = run_blp(config, run, &panel)?;
            let opts = &config.blp.options;
            let model = ChoiceModel::new(
                ChoiceModelConfig::RandomCoefficients(RandomCoefficients {
                    sigmas: fit.sigma.clone(),
                    draws: opts.draws,
                    scheme: opts.scheme,
                    seed: opts.seed,
                }),
                Vec::new(),
                problem.rc_x.clone(),
            )
            .step("elasticities")?;
            let mut target = target_for(&fit.report, &target_name, &panel, &problem.design)?;
            target.rc_dim = problem.rc_labels.iter().position(|l| *l == target_name);
            (model, problem.cells.clone(), fit.delta.clone(), target, problem.design.clone(), "blp".to_string())
        }
        ElasticityModel::Linear => {
            let spec: &ModelSpec = &config.model;
            if spec.kind == ModelKind::Quantile {
                return Err(CliError::Validation("elasticities need model.kind = logit or nested".into()));
            }
            let (shares, design) = spec.build(&panel).step("elasticities")?;
            let report = spec.fit_design(&panel, &design).step("elasticities")?;
            let index = shares.index(panel.len());
            let s_obs: Vec<f64> = design
                .rows
                .iter()
                .map(|&r| index[r].map(|i| shares.rows[i].share).unwrap_or(f64::NAN))
                .collect();
            let cells = design_cells(&panel, &design);
            let model = match spec.kind {
                ModelKind::Nested => {
                    let sigma = report
                        .coefficient(NEST_TERM)
                        .map(|c| c.estimate)
                        .ok_or_else(|| CliError::Runtime("elasticities: nested fit has no nest coefficient".into()))?;
                    let nests = factorize(&design.rows.iter().map(|&r| panel.nest[r].clone()).collect::<Vec<_>>()).0;
                    ChoiceModel::nested(sigma, nests).step("elasticities")?
                }
                _ => ChoiceModel::logit(),
            };
            let inv = invert_shares(&model, &cells, &s_obs, None, &InversionOptions::default()).step("elasticities")?;
            let target = target_for(&report, &target_name, &panel, &design)?;
            let label = format!("{:?}", spec.kind).to_lowercase();
            (model, cells, inv.delta, target, design, label)
        }
    };
    let (table, summary) = elasticities(&model, &cells, &delta, &target, ec.scope).step("elasticities")?;
    write_elasticity_csv(run, &panel, &design, &table)?;
    run.write_json("elasticities.json", &ElasticityOutput { model: label.clone(), summary: summary.clone() })?;
    let mut s = String::new();
    let _ = writeln!(s, "Own elasticities of {} ({label}, {} observations)", table.target, table.obs.len());
    if let Some(sm) = &summary {
        let _ = writeln!(s, "  {:<24}  {:>12}  {:>14}  {:>6}", "", "mean", "share-weighted", "n");
        let _ = writeln!(
            s,
            "  {:<24}  {:>12.6}  {:>14.6}  {:>6}",
            format!("{} > 0", table.target), sm.recommended_mean, sm.recommended_share_weighted, sm.n_recommended
        );
        let _ = writeln!(
            s,
            "  {:<24}  {:>12.6}  {:>14.6}  {:>6}",
            "all alternatives", sm.all_mean, sm.all_share_weighted, sm.n_all
        );
    }
    emit_text(run, "elasticities", &s)
}

fn write_elasticity_csv(run: &mut Run, panel: &MarketPanel, design: &Design, t: &ElasticityTable) -> Result<(), CliError> {
    let mut s = String::from("market,alt,period,x,share,elasticity\n");
    for i in 0..t.obs.len() {
        let k = &panel.keys[design.rows[t.obs[i]]];
        let _ = writeln!(s, "{},{},{},{},{},{}", k.market, k.alt, k.period, t.x[i], t.share[i], t.elasticity[i]);
    }
    run.write("elasticities.csv", s.as_bytes())
}

pub fn diagnose(config: &PipelineConfig, run: &mut Run) -> Result<(), CliError> {
    let spec = &config.model;
    if !spec.is_iv() {
        return Err(CliError::Validation("diagnose needs model.endogenous and model.instruments".into()));
    }
    let panel = prepared(config, run)?;
    let (_, design) = spec.build(&panel).step("diagnose")?;
    let instruments = spec.instruments_for(&panel, &design).step("diagnose")?;
    let vcov = spec.vcov_for(&panel, &design).step("diagnose")?;
    let report = iv_diagnostics(&design, &spec.endogenous, &instruments, &vcov, &spec.absorb, &config.diagnostics)
        .step("diagnose")?;
    run.write_json("diagnostics.json", &report)?;
    emit_text(run, "diagnostics", &render_diagnostics(&report))?;
    if !report.passed() {
        let failed: Vec<String> = report
            .verdicts
            .iter()
            .filter(|v| !v.pass)
            .map(|v| v.check.clone())
            .collect();
        return Err(CliError::Threshold(failed.join(", ")));
    }
    Ok(())
}

pub fn placebo(config: &PipelineConfig, run: &mut Run) -> Result<(), CliError> {
    let panel = prepared(config, run)?;
    let seeds: Vec<u64> = (0..config.placebo.seeds).map(|i| config.seed.wrapping_add(i)).collect();
    let mut reports = Vec::new();
    let mut s = String::new();
    for &mode in &config.placebo.modes {
        let r = placebo_test(&panel, &config.model, mode, &seeds, config.placebo.columns.as_deref()).step("placebo")?;
        s.push_str(&render_placebo(&r));
        s.push('\n');
        reports.push(r);
    }
    run.write_json("placebo.json", &reports)?;
    emit_text(run, "placebo", &s)
}

pub fn holdout(config: &PipelineConfig, run: &mut Run) -> Result<(), CliError> {
    let panel = prepared(config, run)?;
    let report = holdout_eval(&panel, &config.model, config.holdout.fraction).step("holdout")?;
    run.write_json("holdout.json", &report)?;
    emit_text(run, "holdout", &render_holdout(&report))
}

pub fn simulate(config: &PipelineConfig, run: &mut Run) -> Result<(), CliError> {
    let sc = &config.simulate;
    let mut truth = sc.truth.clone();
    truth.seed = config.seed;
    let sim = generate_panel(&truth, sc.dims()).step("simulate")?;
    run.write_with("panel.csv", |b| sim.panel.write_csv(b))?;
    run.write_with("reviews.jsonl", |b| write_reviews(&sim.panel.reviews, b))?;
    run.write_with("truth.json", |b| sim.write_truth(b))?;

    // A ready-to-run pipeline config over the simulated files.
    let (schema, market_size) = sim.panel.csv_schema();
    let mut next = config.clone();
    next.out = None;
    next.data = Some(DataConfig {
        panel: "panel.csv".into(),
        reviews: (!sim.panel.reviews.is_empty()).then(|| "reviews.jsonl".into()),
        word_vectors: None,
        schema,
        market_size,
    });
    let text = toml::to_string(&next).map_err(|e| CliError::Runtime(format!("simulate: {e}")))?;
    run.write("pipeline.toml", text.as_bytes())?;

    let mut s = String::new();
    let _ = writeln!(s, "Simulated panel");
    let _ = writeln!(s, "  markets x alternatives x periods  {} x {} x {}", sc.markets, sc.alternatives, sc.periods);
    let _ = writeln!(s, "  observations                      {}", sim.panel.len());
    let _ = writeln!(s, "  reviews                           {}", sim.panel.reviews.len());
    let _ = writeln!(s, "  corr(isolation, recommendation)   {:.4}", sim.corr_isolation_rec);
    let _ = writeln!(s, "  corr(isolation, xi)               {:.4}", sim.corr_isolation_xi);
    emit_text(run, "simulate", &s)
}
