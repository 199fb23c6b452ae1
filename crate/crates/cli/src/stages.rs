//! One function per subcommand: read artifacts, run the stage, write artifacts.

use std::fmt::Write as _;
use std::path::PathBuf;

use mmgraph::aligner::{export_embeddings, probe_all, AlignerConfig, ProbeConfig, ProbeReport};
use mmgraph::demo::{LpDemoConfig, Normalization, PprConfig, Task};
use mmgraph::gradsuite::{run_suite, TOLERANCE};
use mmgraph::graph::{load_graph, validate, LabelRule, MultimodalGraph, Split, SynthConfig};
use mmgraph::instruct::{DecoderConfig, ImageMode, PromptMode, SlotFeatures, TuneConfig};
use mmgraph::tensor::Checkpoint;
use serde::Serialize;

use crate::artifacts::{self as art, loss_tsv, tsv, RunDir};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::pipeline::{
    accuracy, build_vocab, demo_records, evaluate, pretrain_aligner, select, synth_family,
    train_decoder, tune_mode, Backbone, DemoRecord, DemoSettings,
};

pub fn synth_config(cfg: &RunConfig) -> SynthConfig {
    SynthConfig {
        name: String::new(),
        category: cfg.get("synth.category").to_string(),
        num_nodes: cfg.count("synth.num_nodes"),
        num_classes: cfg.count("synth.num_classes"),
        p_in: cfg.real("synth.p_in"),
        p_out: cfg.real("synth.p_out"),
        d_t: cfg.count("synth.d_t"),
        d_i: cfg.count("synth.d_i"),
        n_t: cfg.count("synth.n_t"),
        n_v: cfg.count("synth.n_v"),
        txt_signal: cfg.real("synth.txt_signal"),
        img_signal: cfg.real("synth.img_signal"),
        noise_sigma: cfg.real("synth.noise_sigma"),
        seed: cfg.seed("seed"),
        family_seed: cfg.seed("synth.family_seed"),
        label_rule: match cfg.get("synth.label_rule") {
            "planted" => LabelRule::Planted,
            _ => LabelRule::NeighborMajority,
        },
        train_frac: cfg.real("synth.train_frac"),
        val_frac: cfg.real("synth.val_frac"),
        lp_train: cfg.count("synth.lp_train"),
        lp_val: cfg.count("synth.lp_val"),
        lp_test: cfg.count("synth.lp_test"),
    }
}

pub fn aligner_config(cfg: &RunConfig) -> AlignerConfig {
    AlignerConfig {
        d: cfg.count("aligner.d"),
        n_heads: cfg.count("aligner.n_heads"),
        n_layers: cfg.count("aligner.n_layers"),
        n_q: cfg.count("aligner.n_q"),
        tau: cfg.real("aligner.tau"),
        neighbors_per_anchor: cfg.count("aligner.neighbors"),
        batch_size: cfg.count("aligner.batch_size"),
        lr: cfg.real("aligner.lr"),
        epochs: cfg.count("aligner.epochs"),
        seed: cfg.seed("seed"),
    }
}

pub fn probe_config(cfg: &RunConfig) -> ProbeConfig {
    ProbeConfig {
        iterations: cfg.count("probe.iterations"),
        lr: cfg.real("probe.lr"),
        l2: cfg.real("probe.l2"),
    }
}

pub fn demo_settings(cfg: &RunConfig) -> DemoSettings {
    DemoSettings {
        k: cfg.count("demos.k"),
        ppr: PprConfig {
            alpha: cfg.real("demos.alpha"),
            tol: cfg.real("demos.tol"),
            max_iter: cfg.count("demos.max_iter"),
            normalization: match cfg.get("demos.normalization") {
                "symmetric" => Normalization::Symmetric,
                _ => Normalization::RandomWalk,
            },
        },
        lp: LpDemoConfig {
            n_demos: cfg.count("demos.lp_n"),
            negatives: cfg.flag("demos.lp_negatives"),
        },
        seed: cfg.seed("seed"),
    }
}

pub fn decoder_config(cfg: &RunConfig) -> DecoderConfig {
    DecoderConfig {
        d_dec: cfg.count("decoder.d_dec"),
        n_heads: cfg.count("decoder.n_heads"),
        n_layers: cfg.count("decoder.n_layers"),
        d_ff: cfg.count("decoder.d_ff"),
        max_len: cfg.count("decoder.max_len"),
        lr: cfg.real("decoder.lr"),
        epochs: cfg.count("decoder.epochs"),
        batch_size: cfg.count("decoder.batch_size"),
        seed: cfg.seed("seed"),
    }
}

pub fn tune_config(cfg: &RunConfig) -> TuneConfig {
    TuneConfig {
        lr: cfg.real("tune.lr"),
        epochs: cfg.count("tune.epochs"),
        batch_size: cfg.count("tune.batch_size"),
        seed: cfg.seed("seed"),
    }
}

fn image_mode(cfg: &RunConfig) -> ImageMode {
    match cfg.get("tune.image_mode") {
        "full" => ImageMode::Full,
        _ => ImageMode::Mean,
    }
}

fn tasks(cfg: &RunConfig) -> Result<Vec<Task>> {
    nonempty(cfg.parse_list("tune.tasks")?, "tune.tasks")
}

fn modes(cfg: &RunConfig) -> Result<Vec<PromptMode>> {
    nonempty(cfg.parse_list("tune.modes")?, "tune.modes")
}

fn nonempty<T>(v: Vec<T>, key: &str) -> Result<Vec<T>> {
    if v.is_empty() {
        Err(CliError::Config(format!(
            "`{key}` must name at least one entry"
        )))
    } else {
        Ok(v)
    }
}

fn acc(x: f64) -> String {
    format!("{x:.4}")
}

pub fn synth(cfg: &RunConfig, run: &RunDir) -> Result<()> {
    let count = cfg.count("synth.graphs");
    if count == 0 {
        return Err(CliError::Config("`synth.graphs` must be at least 1".into()));
    }
    let graphs = synth_family(&synth_config(cfg), count, cfg.seed("seed"))?;
    run.save_graphs(&graphs)?;
    for (i, g) in graphs.iter().enumerate() {
        println!(
            "graph {i}: {} nodes, {} edges",
            g.num_nodes(),
            g.num_edges()
        );
    }
    Ok(())
}

pub fn ingest(cfg: &RunConfig, run: &RunDir) -> Result<()> {
    let paths = nonempty(cfg.list("ingest.paths"), "ingest.paths")?;
    let graphs = paths
        .iter()
        .map(|p| Ok(load_graph(PathBuf::from(p))?))
        .collect::<Result<Vec<MultimodalGraph>>>()?;
    run.save_graphs(&graphs)?;
    for (i, g) in graphs.iter().enumerate() {
        println!(
            "graph {i} ({}): {} nodes, {} edges",
            g.name(),
            g.num_nodes(),
            g.num_edges()
        );
    }
    Ok(())
}

pub fn validate_graphs(run: &RunDir) -> Result<()> {
    let graphs = run.load_graphs()?;
    let mut rows = Vec::new();
    let mut bad = 0;
    for (i, g) in graphs.iter().enumerate() {
        let report = validate(g);
        bad += report.violations.len();
        rows.push(vec![
            i.to_string(),
            "ok".into(),
            report.violations.len().to_string(),
            String::new(),
        ]);
        for v in &report.violations {
            rows.push(vec![
                i.to_string(),
                "violation".into(),
                "1".into(),
                v.to_string(),
            ]);
        }
    }
    run.write(
        art::VALIDATION,
        tsv(&["graph", "status", "count", "detail"], rows),
    )?;
    if bad > 0 {
        return Err(CliError::Invariant(format!(
            "{bad} graph invariant violations"
        )));
    }
    println!("{} graphs valid", graphs.len());
    Ok(())
}

pub fn pretrain(cfg: &RunConfig, run: &RunDir) -> Result<()> {
    let graphs = run.load_graphs()?;
    let (params, report) = pretrain_aligner(&graphs, &aligner_config(cfg))?;
    run.save_checkpoint(art::ALIGNER, &params.to_checkpoint())?;
    run.write(art::PRETRAIN_LOSS, loss_tsv(&report.losses))?;
    let first = report.losses.first().copied().unwrap_or(f64::NAN);
    let last = report.losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "aligner: {} steps, loss {first:.4} -> {last:.4}",
        report.losses.len()
    );
    Ok(())
}

/// Linear-probe accuracies on every graph, in graph order.
pub fn probe_reports(cfg: &RunConfig, run: &RunDir) -> Result<Vec<ProbeReport>> {
    let graphs = run.load_graphs()?;
    let aligner = run.load_aligner()?;
    let pcfg = probe_config(cfg);
    let mut out = Vec::with_capacity(graphs.len());
    for (i, g) in graphs.iter().enumerate() {
        let (pooled, fused) = export_embeddings(&aligner, g)?;
        run.save_checkpoint(
            &art::embeddings_file(i),
            &Checkpoint {
                meta: vec![
                    ("kind".into(), "embeddings".into()),
                    ("graph".into(), g.name().into()),
                ],
                tensors: vec![("pooled".into(), pooled.clone()), ("fused".into(), fused)],
            },
        )?;
        out.push(probe_all(g, &pooled, &pcfg)?);
    }
    Ok(out)
}

fn probe_rows(reports: &[ProbeReport]) -> Vec<(usize, &'static str, f64)> {
    let mut rows = Vec::new();
    for (i, r) in reports.iter().enumerate() {
        for (source, a) in [
            ("text", r.txt),
            ("image", r.img),
            ("concat", r.concat),
            ("fused", r.fused),
        ] {
            rows.push((i, source, a));
        }
    }
    rows
}

pub fn embed(cfg: &RunConfig, run: &RunDir) -> Result<()> {
    let reports = probe_reports(cfg, run)?;
    let rows = probe_rows(&reports);
    run.write(
        art::PROBE,
        tsv(
            &["graph", "source", "accuracy"],
            rows.iter()
                .map(|(g, s, a)| vec![g.to_string(), s.to_string(), acc(*a)]),
        ),
    )?;
    for (g, s, a) in rows {
        println!("graph {g} {s} probe accuracy {}", acc(a));
    }
    Ok(())
}

pub fn demos(cfg: &RunConfig, run: &RunDir) -> Result<()> {
    let tasks = tasks(cfg)?;
    let graphs = run.load_graphs()?;
    let settings = demo_settings(cfg);
    let mut records = Vec::new();
    for (i, g) in graphs.iter().enumerate() {
        records.extend(demo_records(g, i, &tasks, &settings)?);
    }
    run.write_jsonl(art::DEMOS, &records)?;
    println!("{} demonstration records", records.len());
    Ok(())
}

pub fn tune(cfg: &RunConfig, run: &RunDir) -> Result<()> {
    let tasks = tasks(cfg)?;
    let modes = modes(cfg)?;
    let graphs = run.load_graphs()?;
    let aligner = run.load_aligner()?;
    let records: Vec<DemoRecord> = run.read_jsonl(art::DEMOS)?;
    let tune_graphs = cfg.graph_indices("tune.graphs", graphs.len())?;

    let vocab = build_vocab(&graphs, &records, &PromptMode::ALL)?;
    run.write(art::VOCAB, vocab.to_text())?;
    let train = select(&records, Split::Train, &tune_graphs, &tasks);
    let (decoder, dreport) = train_decoder(&graphs, &train, &modes, &vocab, &decoder_config(cfg))?;
    run.save_checkpoint(art::DECODER, &decoder.to_checkpoint())?;
    run.write(art::DECODER_LOSS, loss_tsv(&dreport.losses))?;

    let feats = graphs
        .iter()
        .map(|g| SlotFeatures::compute(&aligner, g))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let backbone = Backbone {
        graphs: &graphs,
        feats: &feats,
        aligner: &aligner,
        decoder: &decoder,
        vocab: &vocab,
        image_mode: image_mode(cfg),
    };
    let val = if cfg.flag("tune.select_on_val") {
        select(&records, Split::Val, &tune_graphs, &tasks)
    } else {
        Vec::new()
    };
    let before = [decoder.set.checksum(), aligner.set.checksum()];
    let tcfg = tune_config(cfg);
    let mut summary = Vec::new();
    for &mode in &modes {
        let (proj, report) = tune_mode(&backbone, &train, &val, mode, &tcfg)?;
        run.save_checkpoint(&art::projector_file(mode), &proj.to_checkpoint())?;
        run.write(&art::tune_loss_file(mode), loss_tsv(&report.losses))?;
        run.write(
            &format!("tune_val_{mode}.tsv"),
            tsv(
                &["epoch", "loss"],
                report
                    .val_losses
                    .iter()
                    .enumerate()
                    .map(|(i, l)| vec![(i + 1).to_string(), format!("{l:.12e}")]),
            ),
        )?;
        let last = report.losses.last().copied().unwrap_or(f64::NAN);
        println!(
            "{mode}: {} regime, {} steps, kept epoch {}, final loss {last:.4}",
            report.regime,
            report.losses.len(),
            report.kept_epoch
        );
        summary.push(vec![
            mode.to_string(),
            report.regime.to_string(),
            report.losses.len().to_string(),
            report.kept_epoch.to_string(),
            format!("{last:.12e}"),
        ]);
    }
    run.write(
        art::TUNE_SUMMARY,
        tsv(
            &["mode", "regime", "steps", "kept_epoch", "final_loss"],
            summary,
        ),
    )?;

    let after = [decoder.set.checksum(), aligner.set.checksum()];
    let rows = ["decoder", "aligner"]
        .iter()
        .zip(before.iter().zip(&after))
        .map(|(name, (b, a))| vec![name.to_string(), b.clone(), a.clone(), (b == a).to_string()]);
    run.write(
        art::FREEZE,
        tsv(&["component", "before", "after", "unchanged"], rows),
    )?;
    if before != after {
        return Err(CliError::Invariant(
            "frozen parameters changed during tuning".into(),
        ));
    }
    Ok(())
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    id: &'a str,
    mode: PromptMode,
    prediction: &'a str,
    truth: &'a str,
    correct: bool,
}

/// `(task, graph, mode, accuracy)` for every evaluated combination.
pub type Metric = (Task, usize, PromptMode, f64);

pub fn eval(cfg: &RunConfig, run: &RunDir) -> Result<Vec<Metric>> {
    let modes = modes(cfg)?;
    let tasks = tasks(cfg)?;
    for &mode in &modes {
        run.require(&art::projector_file(mode))?;
    }
    let vocab = run.load_vocab()?;
    let decoder = run.load_decoder()?;
    let aligner = run.load_aligner()?;
    let graphs = run.load_graphs()?;
    let records: Vec<DemoRecord> = run.read_jsonl(art::DEMOS)?;
    let eval_graphs = cfg.graph_indices("eval.graphs", graphs.len())?;
    let feats = graphs
        .iter()
        .map(|g| SlotFeatures::compute(&aligner, g))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let backbone = Backbone {
        graphs: &graphs,
        feats: &feats,
        aligner: &aligner,
        decoder: &decoder,
        vocab: &vocab,
        image_mode: image_mode(cfg),
    };
    let max_len = cfg.count("eval.max_len");

    let mut metrics = Vec::new();
    let mut lines = String::new();
    for &mode in &modes {
        let proj = run.load_projector(mode)?;
        for &task in &tasks {
            for &gi in &eval_graphs {
                let recs = select(&records, Split::Test, &[gi], &[task]);
                if recs.is_empty() {
                    continue;
                }
                let preds = evaluate(&backbone, &proj, &recs, mode, max_len)?;
                for (rec, p) in recs.iter().zip(&preds) {
                    let row = PredictionRow {
                        id: &rec.id,
                        mode,
                        prediction: &p.prediction,
                        truth: &p.truth,
                        correct: p.correct,
                    };
                    let _ = writeln!(lines, "{}", serde_json::to_string(&row)?);
                }
                metrics.push((task, gi, mode, accuracy(&preds)));
            }
        }
    }
    run.write(art::PREDICTIONS, lines)?;
    run.write(
        art::METRICS,
        tsv(
            &["task", "graph", "mode", "accuracy"],
            metrics
                .iter()
                .map(|(t, g, m, a)| vec![t.to_string(), g.to_string(), m.to_string(), acc(*a)]),
        ),
    )?;
    for (t, g, m, a) in &metrics {
        println!("{t} graph {g} {m}: accuracy {}", acc(*a));
    }
    Ok(metrics)
}

pub fn gradcheck(cfg: &RunConfig, run: &RunDir) -> Result<()> {
    let reports = run_suite(cfg.count("gradcheck.seeds") as u64);
    let rows = reports.iter().map(|r| {
        vec![
            r.name.to_string(),
            r.seeds.to_string(),
            format!("{:.3e}", r.max_err),
            if r.passed(TOLERANCE) {
                "pass".into()
            } else {
                "fail".into()
            },
            r.failure.clone().unwrap_or_default(),
        ]
    });
    run.write(
        art::GRADCHECK,
        tsv(&["case", "seeds", "max_error", "status", "detail"], rows),
    )?;
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed(TOLERANCE))
        .map(|r| r.name)
        .collect();
    println!(
        "{} of {} gradient checks pass",
        reports.len() - failed.len(),
        reports.len()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Invariant(format!(
            "gradient checks failed: {}",
            failed.join(", ")
        )))
    }
}

/// Runs the whole pipeline with every prompt mode, then writes the prompt
/// and feature comparisons side by side.
pub fn ablate(cfg: &RunConfig) -> Result<RunDir> {
    let mut cfg = cfg.clone();
    cfg.set("tune.modes", "with_demos,no_demos,mllm_baseline")?;
    let run = RunDir::create(&cfg)?;
    if cfg.list("ingest.paths").is_empty() {
        synth(&cfg, &run)?;
    } else {
        ingest(&cfg, &run)?;
    }
    pretrain(&cfg, &run)?;
    let probes = probe_reports(&cfg, &run)?;
    demos(&cfg, &run)?;
    tune(&cfg, &run)?;
    let metrics = eval(&cfg, &run)?;

    let mut rows = Vec::new();
    for (t, g, m, a) in &metrics {
        rows.push(vec![
            format!("prompt_{t}"),
            g.to_string(),
            m.to_string(),
            acc(*a),
        ]);
    }
    for (g, s, a) in probe_rows(&probes) {
        rows.push(vec!["features".into(), g.to_string(), s.into(), acc(a)]);
    }
    run.write(
        art::ABLATION,
        tsv(&["comparison", "graph", "variant", "accuracy"], rows),
    )?;
    println!("ablation written to {}", run.path(art::ABLATION).display());
    Ok(run)
}
