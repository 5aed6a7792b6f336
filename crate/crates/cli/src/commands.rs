//! One function per subcommand. Each writes its artifacts and returns the
//! deterministic report.

use std::collections::BTreeSet;
use std::thread;

use mmdit_core::atlas::{i2i_pca, t2t_diagonality, token_map, AttentionQuadrants};
use mmdit_core::bench::run_bench;
use mmdit_core::edit::{
    collect_quadrant_diffs, edit_real_observed, edit_synthetic, edit_synthetic_observed, generate as sample,
    initial_noise, EditConfig, EditOutput, Observe, QuadrantDiff, StepView,
};
use mmdit_core::flow::{interpolate, invert, FlowState, TimeGrid};
use mmdit_core::io::{encode_latent_ppm, encode_pgm16, read_matrix};
use mmdit_core::model::HookSet;
use mmdit_core::selector::{
    block_noise_profile, evaluate_corpus, model_predictions, scores_csv, select_top_k, synth_fixture,
    synthetic_predictions, BlockScore, Scene,
};
use mmdit_core::{Matrix, Model, SpatialMap};
use serde_json::{json, Value};

use crate::config::{Predictor, Resolved};
use crate::fail::CliError;
use crate::out::{dump_trajectory, file_safe, summary, OutDir};

type Outcome = Result<Value, CliError>;

fn required<'a>(v: &'a Option<String>, name: &str) -> Result<&'a str, CliError> {
    v.as_deref()
        .ok_or_else(|| CliError::usage(format!("this command needs `{name}` in the config")))
}

/// Noise that anchors the inversion at `t = 1`.
fn regulator(model: &Model, seed: u64) -> Matrix {
    initial_noise(model, seed.wrapping_add(1))
}

fn write_latent(out: &OutDir, name: &str, m: &Matrix, grid: (usize, usize)) -> mmdit_core::Result<()> {
    out.matrix(&format!("{name}.bin"), m)?;
    out.bytes(&format!("{name}.ppm"), &encode_latent_ppm(m, grid)?)
}

pub fn generate(r: &Resolved) -> Outcome {
    let prompt = required(&r.run.prompt, "prompt")?;
    let model = Model::new(r.model.clone())?;
    let out = OutDir::create(&r.out)?;
    let traj = sample(&model, prompt, r.run.seed, r.edit.steps)?;
    let last = &traj[traj.len() - 1].latent;
    write_latent(&out, "latent", last, r.model.image_grid)?;
    let manifest = dump_trajectory(
        &out,
        "trajectory",
        &traj,
        json!({ "kind": "sample", "seed": r.run.seed, "prompt": prompt }),
    )?;
    Ok(json!({
        "command": "generate",
        "prompt": prompt,
        "seed": r.run.seed,
        "steps": r.edit.steps,
        "latent": summary(last),
        "files": ["latent.bin", "latent.ppm", manifest],
    }))
}

/// The real latent: a blob from the config, or a sample of `prompt`.
fn real_latent(r: &Resolved, model: &Model) -> Result<(Matrix, &'static str), CliError> {
    if let Some(p) = &r.run.latent {
        return Ok((read_matrix(r.path(p))?, "file"));
    }
    let prompt = r
        .run
        .prompt
        .as_deref()
        .or(r.run.source_prompt.as_deref())
        .ok_or_else(|| CliError::usage("set `latent` or a prompt to sample one"))?;
    let traj = sample(model, prompt, r.run.seed, r.edit.steps)?;
    Ok((traj[traj.len() - 1].latent.clone(), "sampled"))
}

fn run_inversion(r: &Resolved, model: &Model, x0: &Matrix) -> Result<(Vec<FlowState>, TimeGrid), CliError> {
    let grid = TimeGrid::inversion(r.edit.steps)?;
    let null = model.encode_prompt("");
    let traj = invert(x0, &regulator(model, r.run.seed), r.gamma, &grid, &model.field(&null))?;
    Ok((traj, grid))
}

pub fn invert_cmd(r: &Resolved) -> Outcome {
    let model = Model::new(r.model.clone())?;
    let out = OutDir::create(&r.out)?;
    let (x0, origin) = real_latent(r, &model)?;
    let (traj, grid) = run_inversion(r, &model, &x0)?;
    let end = &traj[traj.len() - 1].latent;
    let line = interpolate(&x0, &regulator(&model, r.run.seed), grid.last())?;
    write_latent(&out, "x0", &x0, r.model.image_grid)?;
    write_latent(&out, "inverted", end, r.model.image_grid)?;
    let manifest = dump_trajectory(
        &out,
        "trajectory",
        &traj,
        json!({ "kind": "invert", "seed": r.run.seed, "gamma": r.gamma }),
    )?;
    Ok(json!({
        "command": "invert",
        "seed": r.run.seed,
        "steps": r.edit.steps,
        "gamma": r.gamma,
        "x0_origin": origin,
        "x0": summary(&x0),
        "inverted": summary(end),
        "final_t": grid.last(),
        "distance_to_straight_line": end.max_abs_diff(&line),
        "files": ["x0.bin", "x0.ppm", "inverted.bin", "inverted.ppm", manifest],
    }))
}

/// Collects per-step quadrant differences for the replaced blocks.
struct DiffLog {
    blocks: BTreeSet<usize>,
    diffs: Vec<QuadrantDiff>,
}

impl DiffLog {
    fn new(cfg: &EditConfig, depth: usize) -> Self {
        Self {
            blocks: cfg.replaced_blocks(depth).collect(),
            diffs: Vec::new(),
        }
    }

    fn observe(&self) -> Observe {
        Observe {
            capture: self.blocks.clone(),
            record_inputs: false,
        }
    }

    fn record(&mut self, view: &StepView<'_>) {
        collect_quadrant_diffs(view, &self.blocks, &mut self.diffs);
    }
}

/// Writes the trace directory and returns the report fields shared by
/// `edit` and `edit-real`.
fn write_edit(out: &OutDir, r: &Resolved, res: &EditOutput, log: &DiffLog) -> mmdit_core::Result<Value> {
    let grid = r.model.image_grid;
    write_latent(out, "source", &res.source, grid)?;
    write_latent(out, "target", &res.target, grid)?;
    out.matrix("trace/source.bin", &res.source)?;
    out.matrix("trace/target.bin", &res.target)?;
    for rec in &res.trace.steps {
        let dir = format!("trace/step_{:03}", rec.step);
        let mut slim = rec.clone();
        slim.mask = None;
        out.json(&format!("{dir}/step.json"), &slim)?;
        let diffs: Vec<&QuadrantDiff> = log.diffs.iter().filter(|d| d.step == rec.step).collect();
        out.json(&format!("{dir}/quadrant_diff.json"), &diffs)?;
        if let Some(m) = &rec.mask {
            out.bytes(&format!("{dir}/mask.pgm"), &encode_pgm16(m, 1.0))?;
        }
    }
    let max = |f: fn(&QuadrantDiff) -> f64| log.diffs.iter().map(f).fold(0.0, f64::max);
    let coverage: Vec<Value> = res
        .trace
        .steps
        .iter()
        .filter_map(|s| s.mask_coverage.map(|c| json!({ "step": s.step, "coverage": c })))
        .collect();
    Ok(json!({
        "seed": r.run.seed,
        "edit": r.edit,
        "outputs_identical": res.source.bit_eq(&res.target),
        "source_target_max_abs_diff": res.source.max_abs_diff(&res.target),
        "source": summary(&res.source),
        "target": summary(&res.target),
        "token_set": res.trace.token_set,
        "mask_blocks": res.trace.mask_blocks,
        "replaced_steps": res.trace.replaced_steps(),
        "blended_steps": res.trace.blended_steps(),
        "mask_coverage": coverage,
        "warnings": res.trace.warnings,
        "quadrant_diff_max": {
            "t2t_vs_uninjected": max(|d| d.t2t_vs_uninjected),
            "t2t_vs_source": max(|d| d.t2t_vs_source),
            "i2i_vs_source": max(|d| d.i2i_vs_source),
            "t2i_vs_source": max(|d| d.t2i_vs_source),
            "i2t_vs_source": max(|d| d.i2t_vs_source),
        },
        "trace_steps": res.trace.steps.len(),
    }))
}

/// Runs the edit once per threshold, each job on its own model instance.
fn theta_sweep(r: &Resolved, model: &Model, src: &str, tgt: &str, out: &OutDir) -> Result<Vec<Value>, CliError> {
    let jobs: Vec<mmdit_core::Result<EditOutput>> = thread::scope(|s| {
        let handles: Vec<_> = r
            .run
            .theta_sweep
            .iter()
            .map(|&theta| {
                let model = model.clone();
                let cfg = EditConfig {
                    theta: Some(theta),
                    local_blend: true,
                    ..r.edit.clone()
                };
                s.spawn(move || edit_synthetic(&model, src, tgt, r.run.seed, &cfg))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep job panicked")).collect()
    });
    let mut entries = Vec::with_capacity(jobs.len());
    for (i, (job, &theta)) in jobs.into_iter().zip(&r.run.theta_sweep).enumerate() {
        let res = job?;
        let dir = format!("sweep/theta_{i:02}");
        out.matrix(&format!("{dir}/target.bin"), &res.target)?;
        let first_mask = res.trace.steps.iter().find_map(|s| s.mask.as_ref());
        if let Some(m) = first_mask {
            out.bytes(&format!("{dir}/mask.pgm"), &encode_pgm16(m, 1.0))?;
        }
        entries.push(json!({
            "theta": theta,
            "dir": dir,
            "target": summary(&res.target),
            "mask_coverage": first_mask.map(|m| m.sum() / m.values().len() as f64),
            "warnings": res.trace.warnings,
        }));
    }
    Ok(entries)
}

pub fn edit(r: &Resolved) -> Outcome {
    let src = required(&r.run.source_prompt, "source_prompt")?;
    let tgt = required(&r.run.target_prompt, "target_prompt")?;
    let model = Model::new(r.model.clone())?;
    let out = OutDir::create(&r.out)?;
    let mut log = DiffLog::new(&r.edit, model.depth());
    let res = edit_synthetic_observed(&model, src, tgt, r.run.seed, &r.edit, &log.observe(), |v| {
        log.record(&v);
        Ok(())
    })?;
    let mut report = write_edit(&out, r, &res, &log)?;
    report["command"] = json!("edit");
    report["source_prompt"] = json!(src);
    report["target_prompt"] = json!(tgt);
    if !r.run.theta_sweep.is_empty() {
        report["theta_sweep"] = json!(theta_sweep(r, &model, src, tgt, &out)?);
    }
    Ok(report)
}

pub fn edit_real(r: &Resolved) -> Outcome {
    let tgt = required(&r.run.target_prompt, "target_prompt")?;
    let src = r.run.source_prompt.as_deref().unwrap_or("");
    let model = Model::new(r.model.clone())?;
    let out = OutDir::create(&r.out)?;
    let (x0, origin) = real_latent(r, &model)?;
    let (x_init, init_origin) = match &r.run.inverted {
        Some(p) => (read_matrix(r.path(p))?, "file"),
        None => {
            let (traj, _) = run_inversion(r, &model, &x0)?;
            (traj[traj.len() - 1].latent.clone(), "inverted")
        }
    };
    let mut log = DiffLog::new(&r.edit, model.depth());
    let res = edit_real_observed(&model, &x0, &x_init, src, tgt, &r.edit, &log.observe(), |v| {
        log.record(&v);
        Ok(())
    })?;
    let mut report = write_edit(&out, r, &res, &log)?;
    report["command"] = json!("edit-real");
    report["source_prompt"] = json!(src);
    report["target_prompt"] = json!(tgt);
    report["x0_origin"] = json!(origin);
    report["x_init_origin"] = json!(init_origin);
    if init_origin == "inverted" {
        report["gamma"] = json!(r.gamma);
    }
    report["reconstruction_error"] = json!(res.target.max_abs_diff(&x0));
    report["source_reconstruction_error"] = json!(res.source.max_abs_diff(&x0));
    Ok(report)
}

fn mean_map(maps: &[SpatialMap]) -> Option<SpatialMap> {
    let first = maps.first()?;
    let mut acc = SpatialMap::zeros(first.height(), first.width());
    for m in maps {
        for (a, v) in acc.values_mut().iter_mut().zip(m.values()) {
            *a += v;
        }
    }
    let n = maps.len() as f64;
    acc.values_mut().iter_mut().for_each(|a| *a /= n);
    Some(acc)
}

fn dump_quadrants(out: &OutDir, dir: &str, q: &AttentionQuadrants) -> mmdit_core::Result<()> {
    for (name, m) in [("i2i", &q.i2i), ("t2i", &q.t2i), ("i2t", &q.i2t), ("t2t", &q.t2t)] {
        out.matrix(&format!("{dir}/{name}.bin"), m)?;
    }
    Ok(())
}

pub fn analyze_attn(r: &Resolved) -> Outcome {
    let prompt_text = required(&r.run.prompt, "prompt")?;
    let a = &r.run.analyze;
    let steps = r.edit.steps;
    let dump: BTreeSet<usize> = if a.steps.is_empty() {
        [0, steps / 2, steps - 1].into_iter().collect()
    } else {
        a.steps.iter().copied().collect()
    };
    if let Some(s) = dump.iter().find(|&&s| s >= steps) {
        return Err(CliError::usage(format!("analyze step {s} outside a {steps}-step run")));
    }
    if a.pca_k == 0 {
        return Err(CliError::usage("pca_k must be positive"));
    }
    let model = Model::new(r.model.clone())?;
    let out = OutDir::create(&r.out)?;
    let grid = r.model.image_grid;
    let prompt = model.encode_prompt(prompt_text);
    let mut words: Vec<&str> = Vec::new();
    for w in prompt_text.split_whitespace() {
        if !words.contains(&w) && !prompt.positions_of(w).is_empty() {
            words.push(w);
        }
    }
    let mut capture = HookSet::new();
    capture.capture_all(0..model.depth());
    let plain = HookSet::new();

    let time = TimeGrid::sampling(steps)?;
    let mut x = initial_noise(&model, r.run.seed);
    let mut pca_input = Vec::new();
    let mut series = Vec::new();
    let mut map_files = 0usize;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (k, w) in time.knots().windows(2).enumerate() {
        let t = w[0];
        if !dump.contains(&k) {
            x = x.axpy(w[1] - t, &model.velocity(&x, t, &prompt, &plain)?.0)?;
            continue;
        }
        let (v, acts) = model.velocity(&x, t, &prompt, &capture)?;
        let mut diag = Vec::with_capacity(acts.len());
        for act in &acts {
            let b = act.block_index;
            let quads: Vec<AttentionQuadrants> = act.attention.iter().flatten().map(|h| h.weight_quadrants()).collect();
            let d = quads.iter().map(t2t_diagonality).sum::<f64>() / quads.len() as f64;
            lo = lo.min(d);
            hi = hi.max(d);
            diag.push(d);
            for (wi, word) in words.iter().enumerate() {
                let mut maps = Vec::new();
                for q in &quads {
                    for pos in prompt.positions_of(word) {
                        maps.push(token_map(q, pos, grid)?.min_max_normalized());
                    }
                }
                if let Some(m) = mean_map(&maps) {
                    let rel = format!("step_{k:03}/tokens/{wi:02}_{}/block_{b:02}.pgm", file_safe(word));
                    out.bytes(&rel, &encode_pgm16(&m, 1.0))?;
                    map_files += 1;
                }
            }
            if a.dump_quadrants {
                for (h, q) in quads.iter().enumerate() {
                    dump_quadrants(&out, &format!("step_{k:03}/block_{b:02}/head_{h}"), q)?;
                }
            }
            pca_input.extend(quads);
        }
        series.push(json!({ "step": k, "t": t, "blocks": diag }));
        x = x.axpy(w[1] - t, &v)?;
    }

    let (components, variances) = i2i_pca(&pca_input, a.pca_k, grid)?;
    let mut ortho: f64 = 0.0;
    for (i, ci) in components.iter().enumerate() {
        for (j, cj) in components.iter().enumerate() {
            let d: f64 = ci.values().iter().zip(cj.values()).map(|(p, q)| p * q).sum();
            ortho = ortho.max((d - if i == j { 1.0 } else { 0.0 }).abs());
        }
    }
    let mut pca_files = Vec::new();
    for (i, c) in components.iter().enumerate() {
        let rel = format!("pca/component_{i:02}.pgm");
        out.bytes(&rel, &encode_pgm16(&c.min_max_normalized(), 1.0))?;
        pca_files.push(rel);
    }
    let pca = json!({
        "k": components.len(),
        "captures": pca_input.len(),
        "variances": variances,
        "orthonormality_error": ortho,
        "files": pca_files,
    });
    out.json("pca/report.json", &pca)?;
    out.json("diagonality.json", &series)?;
    let word_list: Vec<Value> = words
        .iter()
        .map(|w| json!({ "word": w, "positions": prompt.positions_of(w) }))
        .collect();
    Ok(json!({
        "command": "analyze-attn",
        "prompt": prompt_text,
        "seed": r.run.seed,
        "steps": steps,
        "dumped_steps": dump,
        "depth": model.depth(),
        "words": word_list,
        "token_map_files": map_files,
        "diagonality": series,
        "diagonality_range": [lo, hi],
        "pca": pca,
    }))
}

fn selection(scores: &[BlockScore], k: usize) -> Result<Value, CliError> {
    Ok(json!({ "top_k": select_top_k(scores, k)?, "scores": scores }))
}

pub fn select_blocks(r: &Resolved) -> Outcome {
    let s = &r.run.select;
    let depth = r.model.depth;
    if s.k == 0 || s.k > depth {
        return Err(CliError::usage(format!("k = {} must lie in 1..={depth}", s.k)));
    }
    if s.scenes == 0 {
        return Err(CliError::usage("scenes must be positive"));
    }
    let grid = r.model.image_grid;
    let seed = r.run.seed;
    let scenes = synth_fixture(seed, grid, s.scenes)?;
    let profile = block_noise_profile(seed, depth);
    let model = match s.predictor {
        Predictor::Model => Some(Model::new(r.model.clone())?),
        Predictor::Synthetic => None,
    };
    let predict = |scene: &Scene| match &model {
        Some(m) => model_predictions(m, scene, s.t, seed),
        None => Ok(synthetic_predictions(scene, &profile, seed)),
    };
    let raw = evaluate_corpus(&scenes, depth, None, predict)?;
    let smoothed = evaluate_corpus(&scenes, depth, Some(s.sigma), predict)?;
    let out = OutDir::create(&r.out)?;
    out.bytes("scores_raw.csv", scores_csv(&raw).as_bytes())?;
    out.bytes("scores_smoothed.csv", scores_csv(&smoothed).as_bytes())?;
    Ok(json!({
        "command": "select-blocks",
        "seed": seed,
        "scenes": s.scenes,
        "depth": depth,
        "k": s.k,
        "sigma": s.sigma,
        "predictor": s.predictor,
        "unsmoothed": selection(&raw, s.k)?,
        "smoothed": selection(&smoothed, s.k)?,
        "files": ["scores_raw.csv", "scores_smoothed.csv"],
    }))
}

pub fn bench_attention(r: &Resolved) -> Outcome {
    let b = &r.run.bench;
    if b.shapes.is_empty() {
        return Err(CliError::usage("bench.shapes is empty"));
    }
    if b.runs < 5 {
        return Err(CliError::usage(format!("bench.runs = {} but at least 5 are needed", b.runs)));
    }
    OutDir::create(&r.out)?;
    let report = run_bench(&b.shapes, b.runs, r.run.seed)?;
    Ok(json!({
        "command": "bench-attention",
        "seed": report.seed,
        "tile": report.tile,
        "agreement": report.agreement,
        "timing": report.timing,
    }))
}
