use std::path::Path;

use serde::{Deserialize, Serialize};
use xcross::evalharness::{
    data_efficiency_sweep, evaluate_single, evaluate_xcross, format_table, hit1_indicators, layer_count_sweep,
    paired_t_test, pretrain_stage, select_top_sources, source_stage, target_train, xcross_stage, zero_shot_matrix,
    EvalReport, ExperimentConfig, Foundation, SweepMethod, Variant, Workbench, ZeroShotMatrix, LAYER_COUNTS,
    SWEEP_SIZES, SWEEP_SUBSETS,
};
use xcross::lora::{lora_param_count, LoraSet};
use xcross::recdata::{generate_domains, read_generated, write_generated, Split};
use xcross::training::{tiny_phase_checks, Checkpoint, DomainAdapter, PhaseKind, TrainOutcome};
use xcross::xcross::{integrator_params_per_layer, trainable_param_count};
use xcross::{Error, Result};

use super::run::{read_json, require, Run, CHECKPOINT};

const SELECTION: &str = "selection.json";

fn workbench(cfg: &ExperimentConfig, work: &Path) -> Result<Workbench> {
    require(work, "data", xcross::recdata::CATALOG_FILE, "gen-data")?;
    let (data, generator) = read_generated(&work.join("data"))?;
    if generator != cfg.generator {
        return Err(Error::Config(format!(
            "{} was generated with a different generator configuration; re-run `xcross gen-data`",
            work.join("data").display()
        )));
    }
    Workbench::from_generated(data, cfg.experiment.truncate, cfg.encoder.max_len)
}

fn checkpoint(cfg: &ExperimentConfig, work: &Path, stage: &str, producer: &str) -> Result<Checkpoint> {
    let c = Checkpoint::load(&require(work, stage, CHECKPOINT, producer)?)?;
    if c.encoder_config != cfg.encoder {
        return Err(Error::Config(format!(
            "{stage} was trained with a different encoder configuration"
        )));
    }
    Ok(c)
}

fn base(cfg: &ExperimentConfig, work: &Path) -> Result<Checkpoint> {
    checkpoint(cfg, work, "base", "pretrain")
}

fn source_adapter(cfg: &ExperimentConfig, work: &Path, base: &Checkpoint, m: u16) -> Result<DomainAdapter> {
    let c = checkpoint(cfg, work, &format!("source-{m}"), &format!("train-source {m}"))?;
    if c.base.content_hash() != base.base.content_hash() {
        return Err(Error::Hash(format!("source-{m} was trained on a different base; re-run train-source")));
    }
    c.adapter(m)
        .cloned()
        .ok_or_else(|| Error::Input(format!("source-{m} checkpoint holds no adapters for domain {m}")))
}

fn log_outcome(run: &mut Run, stage: &str, o: &TrainOutcome) {
    for (e, loss) in o.loss_trace.iter().enumerate() {
        run.log(format!("{stage} epoch {:>3}  loss {loss:.6}", e + 1));
    }
    run.log(format!(
        "{stage}: {} epochs, best valid Hit@1 {:.2} at epoch {}{}",
        o.epochs_run,
        o.best_valid_hit1.unwrap_or(f64::NAN),
        o.best_epoch.map_or("-".into(), |e| e.to_string()),
        if o.early_stopped { " (early stop)" } else { "" }
    ));
}

pub fn gen_data(cfg: &ExperimentConfig, work: &Path, overwrite: bool) -> Result<()> {
    let mut run = Run::create(work, "data", cfg, overwrite)?;
    let data = generate_domains(&cfg.generator)?;
    write_generated(&run.dir, &data, &cfg.generator)?;
    for (m, inst) in data.instances.iter().enumerate() {
        let count = |s| inst.iter().filter(|i| i.split == s).count();
        run.log(format!(
            "domain {m}: {} items, {} train / {} valid / {} test",
            data.catalog.domain_items(m as u16).len(),
            count(Split::Train),
            count(Split::Valid),
            count(Split::Test)
        ));
    }
    Ok(())
}

pub fn pretrain(cfg: &ExperimentConfig, work: &Path, overwrite: bool) -> Result<()> {
    let wb = workbench(cfg, work)?;
    let mut run = Run::create(work, "base", cfg, overwrite)?;
    run.log(format!("pretraining on domains {:?}", cfg.source_domains()));
    let (base, outcome) = pretrain_stage(cfg, &wb)?;
    log_outcome(&mut run, "pretrain", &outcome);
    let mut c = Checkpoint::new(PhaseKind::Base, cfg.pretrain.seed, base);
    c.training = Some(cfg.pretrain.clone());
    c.save(&run.path(CHECKPOINT))?;
    run.write_json("outcome.json", &outcome)
}

pub fn train_source(cfg: &ExperimentConfig, work: &Path, domain: u16, overwrite: bool) -> Result<()> {
    if domain as usize >= cfg.generator.domains {
        return Err(Error::Config(format!("domain {domain} does not exist")));
    }
    let wb = workbench(cfg, work)?;
    let base = base(cfg, work)?;
    let mut run = Run::create(work, &format!("source-{domain}"), cfg, overwrite)?;
    let (adapter, outcome) = source_stage(cfg, &wb, &base.base, domain)?;
    log_outcome(&mut run, &format!("source-{domain}"), &outcome);
    let (report, _) = evaluate_single(&base.base, &adapter, &wb.domain(domain)?.test, "in-domain", cfg.seed)?;
    run.show(format_table(std::slice::from_ref(&report)));
    let mut c = Checkpoint::new(PhaseKind::Lora, cfg.source.seed, base.base);
    c.adapters.push(adapter);
    c.training = Some(cfg.source.clone());
    c.save(&run.path(CHECKPOINT))?;
    run.write_json("outcome.json", &outcome)?;
    run.write_json("report.json", &report)
}

/// Output of `select-sources`.
#[derive(Serialize, Deserialize)]
pub struct Selection {
    pub target: u16,
    pub sources: Vec<u16>,
    /// Zero-shot reports on the target validation split, used for ranking.
    pub ranking: ZeroShotMatrix,
    /// Every trained source evaluated on every domain's test split.
    pub test_matrix: ZeroShotMatrix,
}

impl Selection {
    /// Best zero-shot test Hit@1 among the selected sources.
    pub fn best_zero_shot(&self) -> Option<(u16, f64)> {
        self.sources
            .iter()
            .filter_map(|&s| self.test_matrix.get(s, self.target).map(|r| (s, r.hit1)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

pub fn select_sources(cfg: &ExperimentConfig, work: &Path, overwrite: bool) -> Result<()> {
    let wb = workbench(cfg, work)?;
    let base = base(cfg, work)?;
    let target = cfg.experiment.target;
    let mut adapters = Vec::new();
    for m in cfg.source_domains() {
        match source_adapter(cfg, work, &base, m) {
            Ok(a) => adapters.push(a),
            Err(Error::Missing(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if adapters.len() < cfg.experiment.num_sources {
        return Err(Error::Missing(format!(
            "only {} source adapters found in {}, need {}; run `xcross train-source <m>`",
            adapters.len(),
            work.display(),
            cfg.experiment.num_sources
        )));
    }
    let mut run = Run::create(work, "selection", cfg, overwrite)?;
    let refs: Vec<&DomainAdapter> = adapters.iter().collect();
    let ranking = zero_shot_matrix(&base.base, &refs, &wb, &[target], Split::Valid, cfg.xcross.max_valid, cfg.seed)?;
    let sources = select_top_sources(&ranking, target, cfg.experiment.num_sources)?;
    let all: Vec<u16> = (0..cfg.generator.domains as u16).collect();
    let test_matrix = zero_shot_matrix(&base.base, &refs, &wb, &all, Split::Test, cfg.experiment.max_test, cfg.seed)?;
    let flat: Vec<EvalReport> = test_matrix.reports.iter().flatten().cloned().collect();
    run.show(format_table(&flat));
    run.show(format!("selected sources for domain {target}: {sources:?}"));
    let sel = Selection {
        target,
        sources,
        ranking,
        test_matrix,
    };
    run.write_json(SELECTION, &sel)
}

fn selection(cfg: &ExperimentConfig, work: &Path) -> Result<Selection> {
    let sel: Selection = read_json(&require(work, "selection", SELECTION, "select-sources")?)?;
    if sel.target != cfg.experiment.target {
        return Err(Error::Config(format!(
            "sources were selected for domain {}, but the target is {}; re-run select-sources",
            sel.target, cfg.experiment.target
        )));
    }
    Ok(sel)
}

/// Base plus the source adapters, in the given order.
fn foundation(cfg: &ExperimentConfig, work: &Path, sources: &[u16]) -> Result<Foundation> {
    let base = base(cfg, work)?;
    let adapters = sources
        .iter()
        .map(|&m| source_adapter(cfg, work, &base, m))
        .collect::<Result<Vec<_>>>()?;
    Ok(Foundation {
        base: base.base,
        adapters,
        pretrain: TrainOutcome::default(),
        source_outcomes: Vec::new(),
    })
}

fn resolve_sources(cfg: &ExperimentConfig, work: &Path, explicit: Option<Vec<u16>>) -> Result<Vec<u16>> {
    let sources = match explicit {
        Some(s) => s,
        None => selection(cfg, work)?.sources,
    };
    if sources.len() < 2 || sources.contains(&cfg.experiment.target) {
        return Err(Error::Config(format!(
            "need at least two sources distinct from the target, got {sources:?}"
        )));
    }
    Ok(sources)
}

fn train_integrated(
    cfg: &ExperimentConfig,
    work: &Path,
    stage: &str,
    sources: Option<Vec<u16>>,
    variant: Variant,
    overwrite: bool,
) -> Result<()> {
    let wb = workbench(cfg, work)?;
    let sources = resolve_sources(cfg, work, sources)?;
    let f = foundation(cfg, work, &sources)?;
    let sets = f.source_sets(&sources)?;
    let mut run = Run::create(work, stage, cfg, overwrite)?;
    let train = target_train(cfg, &wb)?;
    run.log(format!(
        "{}: sources {sources:?}, {} target training instances",
        variant.tag(),
        train.len()
    ));
    let (model, outcome) = xcross_stage(cfg, &wb, &f.base, &sets, &train, variant)?;
    log_outcome(&mut run, variant.tag(), &outcome);
    let test = &wb.domain(cfg.experiment.target)?.test;
    let (report, ranks) = evaluate_xcross(&f.base, &sets, &model, test, variant.tag(), cfg.seed)?;
    run.show(format_table(std::slice::from_ref(&report)));
    let mut c = Checkpoint::new(PhaseKind::Xcross, cfg.xcross.seed, f.base).with_xcross(model);
    c.adapters = f.adapters;
    c.training = Some(cfg.xcross.clone());
    c.save(&run.path(CHECKPOINT))?;
    run.write_json("outcome.json", &outcome)?;
    run.write_json("report.json", &report)?;
    run.write_json("ranks.json", &ranks)
}

pub fn train_xcross(cfg: &ExperimentConfig, work: &Path, sources: Option<Vec<u16>>, overwrite: bool) -> Result<()> {
    train_integrated(cfg, work, "xcross", sources, Variant::Full, overwrite)
}

pub fn ablate(cfg: &ExperimentConfig, work: &Path, variant: Variant, overwrite: bool) -> Result<()> {
    let stage = format!("ablate-{}", variant.tag().trim_start_matches("xcross-"));
    train_integrated(cfg, work, &stage, None, variant, overwrite)
}

/// Ranks of a stored model on one domain's split.
fn model_ranks(
    cfg: &ExperimentConfig,
    work: &Path,
    wb: &Workbench,
    stage: &str,
    domain: Option<u16>,
    split: Split,
) -> Result<(EvalReport, Vec<usize>, u16)> {
    let c = checkpoint(cfg, work, stage, stage)?;
    if let Some(model) = &c.xcross {
        let d = domain.unwrap_or(cfg.experiment.target);
        let sets: Vec<&LoraSet> = c.adapters.iter().map(|a| &a.lora).collect();
        let (r, ranks) = evaluate_xcross(&c.base, &sets, model, wb.domain(d)?.get(split), stage, cfg.seed)?;
        return Ok((r, ranks, d));
    }
    let adapter = c
        .adapters
        .first()
        .ok_or_else(|| Error::Usage(format!("{stage} holds no scoring model (only pretrained weights)")))?;
    let d = domain.unwrap_or(adapter.lora.domain);
    let (r, ranks) = evaluate_single(&c.base, adapter, wb.domain(d)?.get(split), stage, cfg.seed)?;
    Ok((r, ranks, d))
}

pub fn eval(
    cfg: &ExperimentConfig,
    work: &Path,
    model: &str,
    domain: Option<u16>,
    split: Split,
    against: Option<&str>,
    overwrite: bool,
) -> Result<()> {
    let wb = workbench(cfg, work)?;
    let (report, ranks, d) = model_ranks(cfg, work, &wb, model, domain, split)?;
    let split_tag = format!("{split:?}").to_lowercase();
    let mut run = Run::create(work, &format!("eval-{model}-{d}-{split_tag}"), cfg, overwrite)?;
    let mut reports = vec![report.clone()];
    if let Some(other) = against {
        let (r2, ranks2, _) = model_ranks(cfg, work, &wb, other, Some(d), split)?;
        let t = paired_t_test(&hit1_indicators(&ranks), &hit1_indicators(&ranks2))?;
        run.show(format!("paired t-test {model} vs {other}: t = {:.4}, df = {}, p = {:.4}", t.t, t.df, t.p_value));
        run.write_json("t_test.json", &t)?;
        reports.push(r2);
    }
    run.show(format_table(&reports));
    run.write_json("report.json", &report)?;
    run.write_json("ranks.json", &ranks)?;
    run.write_text("table.txt", &format_table(&reports))
}

pub fn sweep_data_efficiency(
    cfg: &ExperimentConfig,
    work: &Path,
    sizes: Option<Vec<usize>>,
    subsets: Option<usize>,
    methods: Vec<SweepMethod>,
    stop_when_crossed: bool,
    overwrite: bool,
) -> Result<()> {
    let wb = workbench(cfg, work)?;
    let sel = selection(cfg, work)?;
    let (best, reference) = sel
        .best_zero_shot()
        .ok_or_else(|| Error::Input("selection holds no zero-shot test reports".into()))?;
    let f = foundation(cfg, work, &sel.sources)?;
    let sets = f.source_sets(&sel.sources)?;
    let mut run = Run::create(work, "sweep-data-efficiency", cfg, overwrite)?;
    let sizes = sizes.unwrap_or_else(|| SWEEP_SIZES.to_vec());
    let tag = format!("zero-shot-{best}");
    run.log(format!("reference {tag}: Hit@1 {reference:.2}"));
    let mut lines = Vec::new();
    let result = data_efficiency_sweep(
        cfg,
        &wb,
        &f,
        &sets,
        (&tag, reference),
        &sizes,
        subsets.unwrap_or(SWEEP_SUBSETS),
        &methods,
        stop_when_crossed,
        |r| {
            lines.push(format!(
                "{} size {} subset {}: Hit@1 {:.2}",
                r.method.tag(),
                r.size,
                r.subset,
                r.report.hit1
            ))
        },
    )?;
    for l in lines {
        run.log(l);
    }
    for &m in &methods {
        let crossing = result.crossing(m);
        run.show(format!(
            "{}: means {:?}, crossing at {}",
            m.tag(),
            result.means(m),
            crossing.map_or("never".into(), |s| s.to_string())
        ));
    }
    run.write_json("sweep.json", &result)?;
    run.write_text("sweep.csv", &result.to_csv())
}

pub fn sweep_layers(cfg: &ExperimentConfig, work: &Path, counts: Option<Vec<usize>>, overwrite: bool) -> Result<()> {
    let wb = workbench(cfg, work)?;
    let sel = selection(cfg, work)?;
    let f = foundation(cfg, work, &sel.sources)?;
    let sets = f.source_sets(&sel.sources)?;
    let counts = counts.unwrap_or_else(|| {
        LAYER_COUNTS
            .iter()
            .copied()
            .filter(|&c| c <= cfg.encoder.num_layers)
            .collect()
    });
    let mut run = Run::create(work, "sweep-layers", cfg, overwrite)?;
    let train = target_train(cfg, &wb)?;
    let results = layer_count_sweep(cfg, &wb, &f, &sets, &train, &counts)?;
    let reports: Vec<EvalReport> = results.iter().map(|(_, r)| r.clone()).collect();
    run.show(format_table(&reports));
    run.write_json("sweep.json", &results)?;
    run.write_text("table.txt", &format_table(&reports))
}

/// Returns whether every checked phase passed.
pub fn grad_check(phases: &[PhaseKind], candidates: usize, eps: f64, tol: f64, seed: u64) -> Result<bool> {
    let reports = tiny_phase_checks(phases, candidates, eps, seed)?;
    let mut ok = true;
    for (kind, r) in &reports {
        println!("{} phase ({} tensors):", kind.tag(), r.params.len());
        for p in &r.params {
            println!("  {:<32} {:>6}  rel err {:.3e}", p.name, p.numel, p.rel_error);
        }
        let pass = r.passes(tol);
        ok &= pass;
        println!(
            "  max rel err {:.3e} {} {tol:e}: {}",
            r.max_rel_error,
            if pass { "<" } else { ">=" },
            if pass { "PASS" } else { "FAIL" }
        );
    }
    Ok(ok)
}

#[derive(Serialize)]
pub struct ParamReport {
    pub n: usize,
    pub d: usize,
    pub rank: usize,
    pub integrator_per_layer: usize,
    /// One adapted matrix of one domain.
    pub lora_per_matrix: usize,
    pub ratio: f64,
    pub integrated_layers: usize,
    pub xcross_trainable: usize,
}

pub fn param_report(cfg: &ExperimentConfig, n: Option<usize>, d: Option<usize>, rank: Option<usize>) -> Result<ParamReport> {
    let n = n.unwrap_or(cfg.experiment.num_sources);
    let d = d.unwrap_or(cfg.encoder.d_model);
    let rank = rank.unwrap_or(cfg.lora.rank);
    if n < 2 || d == 0 || rank == 0 {
        return Err(Error::Config("param-report needs n ≥ 2, d > 0 and rank > 0".into()));
    }
    let integrator = integrator_params_per_layer(n, d);
    let lora = lora_param_count(d, rank, 1, 1);
    let mut enc = cfg.encoder.clone();
    enc.d_model = d;
    let xc = cfg.integration.config(n, &enc, Variant::Full)?;
    Ok(ParamReport {
        n,
        d,
        rank,
        integrator_per_layer: integrator,
        lora_per_matrix: lora,
        ratio: integrator as f64 / lora as f64,
        integrated_layers: xc.integrated_layers.len(),
        xcross_trainable: trainable_param_count(&xc).total,
    })
}
