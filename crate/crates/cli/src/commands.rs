//! The four subcommands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde_json::json;

use mumoe::bench::{self, BenchRow, BenchSpec, BenchStrategy};
use mumoe::metrics::{count_costs, CostMode};
use mumoe::model::{self, encode_bytes, LayerId, Model};
use mumoe::pruner::{
    self, CalibrationRecord, EvalMode, LayerLoss, Method, Mode, PruneConfig, PrunedModel, ShiftRow,
    ShiftSpec, SyntheticShift,
};
use rand::SeedableRng;

use crate::manifest::RunManifest;
use crate::settings::{self, FileConfig};
use crate::{usage, BenchArgs, CliError, EvalArgs, PruneArgs, ShiftArgs};

type CmdResult = Result<(), CliError>;

fn read_input(path: &Path, manifest: &mut RunManifest) -> anyhow::Result<Vec<u8>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    manifest.add_input(path, &bytes);
    Ok(bytes)
}

fn load_model(path: &Path, manifest: &mut RunManifest) -> anyhow::Result<Model> {
    let bytes = read_input(path, manifest)?;
    Model::from_bytes(&bytes).with_context(|| format!("loading model {}", path.display()))
}

/// `.u32` files hold little-endian token ids; anything else is byte text.
fn load_tokens(path: &Path, manifest: &mut RunManifest) -> anyhow::Result<Vec<u32>> {
    let bytes = read_input(path, manifest)?;
    if path.extension().is_some_and(|e| e == "u32") {
        if bytes.len() % 4 != 0 {
            anyhow::bail!("{}: token id file length {} is not a multiple of 4", path.display(), bytes.len());
        }
        Ok(bytes.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    } else {
        Ok(encode_bytes(&bytes))
    }
}

fn resolve_mode(flag: &Option<String>, file: &FileConfig, default: &str, allowed: &[&str]) -> Result<String, CliError> {
    let m = settings::mode(flag, file, default);
    if allowed.contains(&m.as_str()) {
        Ok(m)
    } else {
        Err(usage(format!("--mode must be one of {}, got {m:?}", allowed.join("|"))))
    }
}

fn parse_mode(m: &str) -> Mode {
    if m == "online" {
        Mode::Online
    } else {
        Mode::Offline
    }
}

/// Offline masks; magnitude needs no calibration tokens.
fn offline_masks<'m>(model: &'m Model, calib: Option<&[u32]>, cfg: &PruneConfig) -> mumoe::Result<PrunedModel<'m>> {
    let record = match calib {
        Some(tokens) => pruner::calibrate_offline(model, tokens, cfg, "calib")?,
        None => CalibrationRecord {
            source: "none".into(),
            token_count: 0,
            layers: BTreeMap::new(),
        },
    };
    pruner::prune_offline(model, &record, cfg)
}

/// Per-layer loss summed over `max_seq` chunks of `tokens`.
fn chunked_losses(pruned: &PrunedModel<'_>, tokens: &[u32]) -> mumoe::Result<Vec<LayerLoss>> {
    let mut acc: BTreeMap<LayerId, LayerLoss> = BTreeMap::new();
    for chunk in tokens.chunks(pruned.model().config.max_seq) {
        for l in pruned.forward_tracked(chunk)?.1 {
            let e = acc.entry(l.id).or_insert(LayerLoss { id: l.id, loss: 0.0, tokens: 0 });
            e.loss += l.loss;
            e.tokens += l.tokens;
        }
    }
    Ok(acc.into_values().collect())
}

pub fn prune(a: &PruneArgs, file: &FileConfig) -> CmdResult {
    let mode = resolve_mode(&a.mode, file, "online", &["offline", "online"])?;
    let has_prompt = a.prompt.is_some() || a.prompt_file.is_some();
    let cfg = settings::prune_config(&a.prune, file, parse_mode(&mode)).map_err(usage)?;
    match mode.as_str() {
        "online" if a.calib.is_some() => return Err(usage("--mode online takes --prompt, not --calib")),
        "online" if a.loss_on.is_some() => return Err(usage("--loss-on applies to --mode offline only")),
        "online" if !has_prompt => return Err(usage("--mode online needs --prompt or --prompt-file")),
        "offline" if has_prompt => return Err(usage("--mode offline takes --calib, not --prompt")),
        "offline" if a.calib.is_none() && cfg.method != Method::Magnitude => {
            return Err(usage(format!("--mode offline with --method {} needs --calib", cfg.method)))
        }
        _ => {}
    }

    let mut manifest = RunManifest::new("prune", json!({ "prune": cfg }), 0);
    let model = load_model(&a.model, &mut manifest)?;
    let (pruned, losses) = if cfg.mode == Mode::Online {
        let prompt = match (&a.prompt, &a.prompt_file) {
            (Some(text), _) => {
                manifest.add_literal("--prompt", text.as_bytes());
                encode_bytes(text.as_bytes())
            }
            (None, Some(p)) => load_tokens(p, &mut manifest)?,
            (None, None) => unreachable!("checked above"),
        };
        let pre = pruner::prune_online_tracked(&model, &prompt, &cfg)?;
        (pre.pruned, pre.losses)
    } else {
        let calib = a.calib.as_deref().map(|p| load_tokens(p, &mut manifest)).transpose()?;
        let pruned = offline_masks(&model, calib.as_deref(), &cfg)?;
        let loss_tokens = match &a.loss_on {
            Some(p) => Some(load_tokens(p, &mut manifest)?),
            None => calib,
        };
        let losses = match loss_tokens {
            Some(t) => chunked_losses(&pruned, &t)?,
            None => Vec::new(),
        };
        (pruned, losses)
    };

    let mask_dir = a.out.join("masks");
    fs::create_dir_all(&mask_dir).with_context(|| format!("creating {}", mask_dir.display()))?;
    let loss_by_layer: BTreeMap<LayerId, &LayerLoss> = losses.iter().map(|l| (l.id, l)).collect();
    let mut summary = String::from("layer,rows,cols,k,active,loss,tokens\n");
    for (id, layer) in pruned.layers() {
        let path = mask_dir.join(format!("{id}.rsm"));
        let f = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        layer.weights.write_to(std::io::BufWriter::new(f))?;
        let (loss, tokens) = loss_by_layer
            .get(id)
            .map_or((String::new(), String::new()), |l| (format!("{:e}", l.loss), l.tokens.to_string()));
        let w = &layer.weights;
        let _ = writeln!(
            summary,
            "{id},{},{},{},{},{loss},{tokens}",
            w.rows(),
            w.cols(),
            w.k(),
            layer.mask.total_active()
        );
    }
    fs::write(a.out.join("summary.csv"), &summary)?;
    manifest.write(&a.out.join("manifest.json"))?;

    let mean = if losses.is_empty() {
        f64::NAN
    } else {
        losses.iter().map(|l| l.loss).sum::<f64>() / losses.len() as f64
    };
    println!("layers {}", pruned.layers().len());
    println!("mask_fingerprint {:016x}", pruned.mask_fingerprint());
    println!("mean_loss {mean:e}");
    Ok(())
}

pub fn eval(a: &EvalArgs, file: &FileConfig) -> CmdResult {
    let mode = resolve_mode(&a.mode, file, "dense", &["dense", "offline", "online"])?;
    let prune_mode = if mode == "online" { Mode::Online } else { Mode::Offline };
    let cfg = settings::prune_config(&a.prune, file, prune_mode).map_err(usage)?;
    match mode.as_str() {
        "online" | "dense" if a.calib.is_some() => {
            return Err(usage(format!("--calib only applies to --mode offline, not {mode}")))
        }
        "offline" if a.calib.is_none() && cfg.method != Method::Magnitude => {
            return Err(usage(format!("--mode offline with --method {} needs --calib", cfg.method)))
        }
        _ => {}
    }

    let mut manifest = RunManifest::new("eval", json!({}), 0);
    let model = load_model(&a.model, &mut manifest)?;
    let stride = a.stride.or(file.stride).unwrap_or(model.config.max_seq);
    let text = load_tokens(&a.text, &mut manifest)?;
    let calib = a.calib.as_deref().map(|p| load_tokens(p, &mut manifest)).transpose()?;
    manifest.config = json!({ "mode": mode, "stride": stride, "prune": if mode == "dense" { None } else { Some(&cfg) } });

    let (nll, cost_mode) = match mode.as_str() {
        "dense" => (pruner::evaluate(&model, &text, stride, EvalMode::Dense)?, CostMode::Dense),
        "online" => (pruner::evaluate(&model, &text, stride, EvalMode::Online(&cfg))?, CostMode::MuMoe),
        _ => {
            let pruned = offline_masks(&model, calib.as_deref(), &cfg)?;
            (pruner::evaluate(&model, &text, stride, EvalMode::Static(&pruned))?, CostMode::Static)
        }
    };
    let ppl = model::perplexity_of(&nll);
    let targets: usize = nll.iter().map(|w| w.count).sum();

    let t = model.config.max_seq.min(text.len());
    let rho = if mode == "dense" { 1.0 } else { cfg.rho };
    let report = count_costs(&model.config, rho, t, cost_mode);
    let dense = count_costs(&model.config, 1.0, t, CostMode::Dense);
    let macs_ratio = report.total.macs as f64 / dense.total.macs as f64;
    let linear_ratio = report.pruned_linear_macs() as f64 / dense.pruned_linear_macs() as f64;

    println!("mode {mode}");
    println!("perplexity {ppl:.6}");
    println!("targets {targets}");
    println!("windows {}", nll.len());
    println!("macs {} dense_macs {} tokens_per_window {t}", report.total.macs, dense.total.macs);
    println!("macs_ratio {macs_ratio:.4}");
    println!("linear_macs_ratio {linear_ratio:.4}");

    match &a.out {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            fs::write(dir.join("flops.json"), report.to_json() + "\n")?;
            fs::write(dir.join("flops.csv"), report.to_csv())?;
            let mut windows = String::from("begin,end,targets,nll_sum,perplexity\n");
            for w in &nll {
                let _ = writeln!(
                    windows,
                    "{},{},{},{},{}",
                    w.window.begin,
                    w.window.end,
                    w.count,
                    w.sum,
                    w.perplexity()
                );
            }
            fs::write(dir.join("windows.csv"), windows)?;
            manifest.write(&dir.join("manifest.json"))?;
        }
        None => manifest.emit(None)?,
    }
    Ok(())
}

fn manifest_path(out: &Option<PathBuf>) -> Option<PathBuf> {
    out.as_ref().map(|p| {
        let mut s = p.clone().into_os_string();
        s.push(".manifest.json");
        PathBuf::from(s)
    })
}

fn write_or_print(out: &Option<PathBuf>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn bench(a: &BenchArgs, file: &FileConfig) -> CmdResult {
    let defaults = BenchSpec::default();
    let names: Vec<String> = match (&a.strategies, &file.strategies) {
        (Some(s), _) => s.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect(),
        (None, Some(list)) => list.clone(),
        (None, None) => defaults.strategies.iter().map(ToString::to_string).collect(),
    };
    if names.is_empty() {
        return Err(usage("--strategies must name at least one strategy"));
    }
    let mut strategies = names
        .iter()
        .map(|n| n.parse::<BenchStrategy>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| usage(e.to_string()))?;
    if a.parallel {
        let extra: Vec<_> = strategies
            .iter()
            .filter(|s| !s.parallel)
            .map(|s| BenchStrategy { parallel: true, ..*s })
            .filter(|s| !strategies.contains(s))
            .collect();
        strategies.extend(extra);
    }
    let spec = BenchSpec {
        d_values: a.d.clone().or_else(|| file.d.clone()).unwrap_or(defaults.d_values),
        d_prime_values: a.dprime.clone().or_else(|| file.dprime.clone()).unwrap_or(defaults.d_prime_values),
        rhos: a.rho.clone().or_else(|| file.rhos.clone()).unwrap_or(defaults.rhos),
        strategies,
        repetitions: a.reps.or(file.reps).unwrap_or(defaults.repetitions),
        warmup: a.warmup.or(file.warmup).unwrap_or(defaults.warmup),
        seed: a.seed.or(file.seed).unwrap_or(defaults.seed),
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;

    let rows = bench::run_bench(&spec)?;
    write_or_print(&a.out, &BenchRow::write_csv(&rows))?;
    for s in bench::rho_spread(&rows, "kth") {
        eprintln!(
            "info: kth spread across rho at d={} d'={}: {:.1}%",
            s.d,
            s.d_prime,
            100.0 * s.relative()
        );
    }
    let gate_failures = rows.iter().filter(|r| !r.gate_passed).count();
    let strategy_names: Vec<String> = spec.strategies.iter().map(ToString::to_string).collect();
    let manifest = RunManifest::new(
        "bench",
        json!({
            "d": spec.d_values,
            "dprime": spec.d_prime_values,
            "rho": spec.rhos,
            "strategies": strategy_names,
            "reps": spec.repetitions,
            "warmup": spec.warmup,
        }),
        spec.seed,
    );
    manifest.emit(manifest_path(&a.out).as_deref())?;
    if gate_failures > 0 {
        return Err(CliError::Run(anyhow::anyhow!(
            "{gate_failures} bench rows failed the mask-equivalence gate"
        )));
    }
    Ok(())
}

pub fn shift(a: &ShiftArgs, file: &FileConfig) -> CmdResult {
    let seed = a.seed.or(file.seed).unwrap_or(0);
    let trials = a.trials.or(file.trials).unwrap_or(200);
    let cfg = settings::prune_config(&a.prune, file, Mode::Offline).map_err(usage)?;
    let mut manifest = RunManifest::new("shift", json!({}), seed);

    let rows: Vec<ShiftRow> = if a.synthetic || a.model.is_none() {
        let spec = SyntheticShift {
            cfg: cfg.clone(),
            ..SyntheticShift::default()
        };
        manifest.config = json!({
            "synthetic": true,
            "trials": trials,
            "d_in": spec.d_in,
            "d_out": spec.d_out,
            "calib_tokens": spec.calib_tokens,
            "test_tokens": spec.test_tokens,
            "condition": spec.condition,
            "prune": cfg,
        });
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut wins = 0;
        for t in 0..trials {
            let trial = pruner::synthetic_shift_trial(&spec, &mut rng)?;
            wins += usize::from(trial.online <= trial.offline_mismatched);
            rows.extend(trial.rows(t, cfg.rho));
        }
        eprintln!("info: online <= offline-mismatched in {wins}/{trials} trials");
        rows
    } else {
        let (Some(m), Some(pa), Some(pb)) = (&a.model, &a.domain_a, &a.domain_b) else {
            return Err(usage("--model needs --domain-a and --domain-b"));
        };
        let model = load_model(m, &mut manifest)?;
        let da = load_tokens(pa, &mut manifest)?;
        let db = load_tokens(pb, &mut manifest)?;
        let spec = ShiftSpec {
            trials,
            prompt_len: a.prompt_len.or(file.prompt_len).unwrap_or(model.config.max_seq),
            calib_len: a.calib_len.or(file.calib_len).unwrap_or(model.config.max_seq),
            seed,
        };
        manifest.config = json!({
            "synthetic": false,
            "trials": spec.trials,
            "prompt_len": spec.prompt_len,
            "calib_len": spec.calib_len,
            "prune": cfg,
        });
        let rows = pruner::shift_experiment(&model, &da, &db, &cfg, &spec)?;
        let mut means: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
        for s in pruner::summarize_shift(&rows) {
            let e = means.entry((s.method, s.calib_domain)).or_default();
            e.0 += s.mean_loss;
            e.1 += 1;
        }
        for ((method, calib), (sum, n)) in means {
            eprintln!("info: {method} calib={calib} mean loss {:e}", sum / n as f64);
        }
        rows
    };
    write_or_print(&a.out, &ShiftRow::write_csv(&rows))?;
    manifest.emit(manifest_path(&a.out).as_deref())?;
    Ok(())
}
