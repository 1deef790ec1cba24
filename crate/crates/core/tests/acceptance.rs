//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit if any fails.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use bridge_fusion::autodiff::Graph;
use bridge_fusion::bridge::{cross_attention_calls, reset_cross_attention_calls, AttentionRecord, BridgeConfig, FusionVariant, Placement};
use bridge_fusion::checkpoint::Checkpoint;
use bridge_fusion::cli::{median, train_run};
use bridge_fusion::config::{axis_values, RunConfig};
use bridge_fusion::data::{generate_dataset, Split};
use bridge_fusion::encoders::{EncoderConfig, EncoderInput, TokenBatch};
use bridge_fusion::eval::{recall_from_similarity, retrieval_inference, EvalReport};
use bridge_fusion::gradcheck::{finite_diff_check, Coordinates};
use bridge_fusion::model::{BridgeModel, ModelConfig, PairBatch};
use bridge_fusion::objectives::{bce_with_logits, cycle_loss, itc_loss};
use bridge_fusion::tensor::Tensor;
use bridge_fusion::training::{train, Event, Seeds, StageId};
use bridge_fusion::Error;

type Outcome = Result<String, String>;

/// Training schedule for the ablation criteria; the dataset stays at its defaults.
const ABLATION_SCHEDULE: &[(&str, &str)] = &[
    ("stages.A.epochs", "5"),
    ("stages.A.lr", "0.003"),
    ("stages.B.epochs", "20"),
    ("stages.B.lr", "0.003"),
    ("stages.B.k", "4"),
    ("train.eval_every_epoch", "false"),
];
const MASTER_SEED: u64 = 0;

fn gauss(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

fn micro_model_config(fusion: FusionVariant, gate_init: f64) -> ModelConfig {
    let enc = |input| EncoderConfig { layers: 2, width: 16, heads: 2, ffn_mult: 2, max_positions: 8, input };
    ModelConfig {
        text: enc(EncoderInput::Tokens { vocab_size: 12 }),
        vision: enc(EncoderInput::Patches { patch_dim: 6 }),
        bridge: BridgeConfig { q: 2, placement: Placement::Late, d_s: 8, h_s: 2, fusion, gate_init, dropout: 0.0 },
        embed_dim: 8,
        ..ModelConfig::default()
    }
}

/// B=3, N_v=5, N_t=4 with one padded caption.
fn micro_batch(rng: &mut ChaCha8Rng) -> PairBatch<f64> {
    let seqs: Vec<Vec<usize>> = [4, 3, 4].iter().map(|&n| (0..n).map(|_| rng.random_range(1..12)).collect()).collect();
    PairBatch { patches: gauss(rng, &[3, 5, 6]), tokens: TokenBatch::from_sequences(&seqs).unwrap() }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut m = BridgeModel::<f64>::new(micro_model_config(FusionVariant::CrossOnly, 0.0), &mut rng).map_err(|e| e.to_string())?;
    m.store.set_all_trainable(true);
    let batch = micro_batch(&mut rng);
    let forward = |m: &BridgeModel<f64>, g: &mut Graph<f64>| {
        let p = m.store.bind(g)?;
        let out = m.loss(g, &p, &batch)?;
        Ok::<_, Error>((p, out))
    };
    let mut g = Graph::new();
    let (p, out) = forward(&m, &mut g).map_err(|e| e.to_string())?;
    if out.report.components.len() != 4 {
        return Err(format!("{} loss components enabled, expected 4", out.report.components.len()));
    }
    let grads = g.backward(out.total).map_err(|e| e.to_string())?;
    let analytic: Vec<Tensor<f64>> = m
        .store
        .iter()
        .zip(p.vars())
        .map(|(prm, &v)| grads.get(v).unwrap_or_else(|| Tensor::zeros(prm.value.shape())))
        .collect();
    let mut probe = m.clone();
    let total = |vals: &[Tensor<f64>]| {
        for (prm, v) in probe.store.iter_mut().zip(vals) {
            prm.value = v.clone();
        }
        let mut g = Graph::new();
        let (_, out) = forward(&probe, &mut g)?;
        Ok(g.value(out.total).data()[0])
    };
    let values: Vec<Tensor<f64>> = m.store.iter().map(|p| p.value.clone()).collect();
    let r = finite_diff_check(total, &values, &analytic, 1e-5, 1e-4, Coordinates::All)
        .map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("max rel error {:.2e} over {} coordinates in {secs:.1}s", r.max_rel_error, r.checked);
    if r.passed() && secs < 60.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_2() -> Outcome {
    let mut g = Graph::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut unit = |g: &mut Graph<f64>| {
        let v = gauss(&mut rng, &[1, 8]);
        let n = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        g.constant(Tensor::new(vec![1, 8], v.data().iter().map(|x| x / n).collect()).unwrap()).unwrap()
    };
    let (pt, pv) = (unit(&mut g), unit(&mut g));
    let log_tau = g.constant(Tensor::scalar(0.07f64.ln())).unwrap();
    let l = itc_loss(&mut g, pt, pv, log_tau).map_err(|e| e.to_string())?;
    let itc1 = g.value(l).data()[0];

    let cyc = |tv: Tensor<f64>, vt: Tensor<f64>| -> f64 {
        let mut g = Graph::<f64>::new();
        let rec = AttentionRecord { t_to_v: g.constant(tv).unwrap(), v_to_t: g.constant(vt).unwrap(), text_valid: vec![true; 4] };
        let l = cycle_loss(&mut g, &[rec]).unwrap();
        g.value(l).data()[0]
    };
    let uniform = cyc(Tensor::full(&[1, 4, 4], 0.25), Tensor::full(&[1, 4, 4], 0.25));
    let perm = [2, 0, 3, 1];
    let p = Tensor::from_fn(&[1, 4, 4], |i| if perm[i / 4] == i % 4 { 1.0 } else { 0.0 });
    let p_inv = Tensor::from_fn(&[1, 4, 4], |i| p.data()[(i % 4) * 4 + i / 4]);
    let inverse = cyc(p, p_inv);

    let z = g.constant(Tensor::zeros(&[4])).unwrap();
    let b = bce_with_logits(&mut g, z, &[1.0, 0.0, 1.0, 0.0]).map_err(|e| e.to_string())?;
    let bce0 = g.value(b).data()[0];

    let checks = [
        ("itc(B=1)", itc1, 0.0, 1e-12),
        ("cyc(uniform,4)", uniform, 4f64.ln(), 1e-9),
        ("bce(0)", bce0, 2f64.ln(), 1e-9),
        ("cyc(inverse perms)", inverse, 0.0, 1e-9),
    ];
    let detail = checks.iter().map(|(n, v, want, _)| format!("{n}={v:.3e} (want {want:.6})")).collect::<Vec<_>>().join(", ");
    if checks.iter().all(|(_, v, want, tol)| (v - want).abs() <= *tol) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_3() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(30 + seed);
        let mut cfg = micro_model_config(FusionVariant::CrossOnly, -40.0);
        cfg.text.layers = 4;
        cfg.vision.layers = 4;
        let m = BridgeModel::<f64>::new(cfg.clone(), &mut rng).map_err(|e| e.to_string())?;
        let batch = micro_batch(&mut rng);
        let mut g = Graph::new();
        let p = m.store.bind(&mut g).map_err(|e| e.to_string())?;
        let out = m.bridged_encode(&mut g, &p, &batch).map_err(|e| e.to_string())?;
        let (hv, ht) = m.encode_plain(&mut g, &p, &batch).map_err(|e| e.to_string())?;
        for l in 0..=4 {
            worst = worst.max(g.value(out.vision.layers[l]).max_abs_diff(g.value(hv.layers[l])));
            worst = worst.max(g.value(out.text.layers[l]).max_abs_diff(g.value(ht.layers[l])));
        }

        cfg.bridge.fusion = FusionVariant::None;
        let m = BridgeModel::<f64>::new(cfg, &mut ChaCha8Rng::seed_from_u64(30 + seed)).map_err(|e| e.to_string())?;
        let mut g = Graph::new();
        let p = m.store.bind(&mut g).map_err(|e| e.to_string())?;
        let out = m.bridged_encode(&mut g, &p, &batch).map_err(|e| e.to_string())?;
        let (hv, ht) = m.encode_plain(&mut g, &p, &batch).map_err(|e| e.to_string())?;
        for l in 0..=4 {
            let bitwise = g.value(out.vision.layers[l]).data() == g.value(hv.layers[l]).data()
                && g.value(out.text.layers[l]).data() == g.value(ht.layers[l]).data();
            if !bitwise {
                return Err(format!("`none` differs from plain encode at layer {l}"));
            }
        }
    }
    let detail = format!("closed-gate max deviation {worst:.2e} over 5 layers x 3 seeds; `none` bitwise equal");
    if worst < 1e-6 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn micro_run_config(out: &Path) -> RunConfig {
    let mut c = RunConfig::default();
    for (k, v) in [
        ("text.width", "16"),
        ("vision.width", "16"),
        ("text.heads", "2"),
        ("vision.heads", "2"),
        ("bridge.d_s", "16"),
        ("bridge.h_s", "2"),
        ("model.embed_dim", "16"),
        ("data.num_concepts", "8"),
        ("data.size", "160"),
        ("train.batch_size", "16"),
        ("stages.A.epochs", "2"),
        ("stages.B.epochs", "2"),
        ("stages.A.lr", "0.003"),
        ("stages.B.lr", "0.003"),
        ("stages.B.k", "2"),
    ] {
        c.set(k, v).unwrap();
    }
    c.out = out.to_path_buf();
    c.validate().unwrap();
    c
}

fn criterion_4() -> Outcome {
    let cfg = micro_run_config(Path::new("unused"));
    let seeds = Seeds::from_master(4);
    let data = generate_dataset(&cfg.data, seeds.data, cfg.data_size).map_err(|e| e.to_string())?;
    let mut model = BridgeModel::<f32>::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(seeds.init)).map_err(|e| e.to_string())?;
    let init: Vec<(String, String, Vec<u32>)> =
        model.store.iter().map(|p| (p.name.clone(), p.group.clone(), p.value.data().iter().map(|x| x.to_bits()).collect())).collect();
    let mut after_a: Option<Vec<Vec<u32>>> = None;
    let history = train(&mut model, &data, &cfg.train, seeds, &mut |ev| {
        if let Event::StageEnd { stage: StageId::A, model, .. } = ev {
            after_a = Some(model.store.iter().map(|p| p.value.data().iter().map(|x| x.to_bits()).collect()).collect());
        }
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    let after_a = after_a.ok_or("stage A never ended")?;
    let l = cfg.model.text.layers;
    let k = 2;
    let below_top_k = |group: &str| {
        ["text", "vision"].iter().any(|t| {
            group == format!("{t}.embed") || (1..=l - k).any(|layer| group == format!("{t}.layer{layer}"))
        })
    };
    let encoder = |group: &str| group.starts_with("text.layer") || group.starts_with("vision.layer") || group.ends_with(".embed");
    let mut frozen_checked = 0;
    let mut moved_top = 0;
    for (i, (p, (name, group, bits))) in model.store.iter().zip(&init).enumerate() {
        let now: Vec<u32> = p.value.data().iter().map(|x| x.to_bits()).collect();
        if encoder(group) && after_a[i] != *bits {
            return Err(format!("{name} changed during stage A"));
        }
        if below_top_k(group) {
            if now != *bits {
                return Err(format!("{name} changed although it sits below the top {k} blocks"));
            }
            frozen_checked += 1;
        } else if encoder(group) && now != *bits {
            moved_top += 1;
        }
    }
    let steps = history.steps.len();
    if moved_top == 0 {
        return Err("top-K blocks never moved; the check would be vacuous".into());
    }
    Ok(format!("{frozen_checked} frozen tensors bitwise-unchanged after {steps} steps; {moved_top} top-K tensors updated"))
}

/// Trained runs shared across criteria, keyed by configuration.
struct Runs {
    root: PathBuf,
    done: HashMap<String, (EvalReport, PathBuf)>,
    elapsed: HashMap<String, Duration>,
}

impl Runs {
    fn base() -> RunConfig {
        let mut c = RunConfig::default();
        for (k, v) in ABLATION_SCHEDULE {
            c.set(k, v).unwrap();
        }
        c.seed = MASTER_SEED;
        c
    }

    fn get(&mut self, cfg: &RunConfig) -> Result<(EvalReport, PathBuf), String> {
        let key = cfg.signature();
        if let Some(hit) = self.done.get(&key) {
            return Ok(hit.clone());
        }
        let mut cfg = cfg.clone();
        cfg.out = self.root.join(format!("run{}", self.done.len()));
        let t = Instant::now();
        let report = train_run(&cfg, Split::Test, true).map_err(|e| e.error.to_string())?;
        self.elapsed.insert(key.clone(), t.elapsed());
        self.done.insert(key, (report.clone(), cfg.out.clone()));
        Ok((report, cfg.out))
    }

    /// Per variant of `axis`: (name, reports for seeds s, s+1, s+2, wall time spent training them).
    fn axis(&mut self, axis: &str, values: &[&str]) -> Result<Vec<(String, Vec<EvalReport>, Duration)>, String> {
        let values: Vec<String> = values.iter().map(|s| s.to_string()).collect();
        let mut out = Vec::new();
        for (variant, overrides) in axis_values(axis, Some(&values)).map_err(|e| e.to_string())? {
            let mut reports = Vec::new();
            let mut spent = Duration::ZERO;
            for seed in MASTER_SEED..MASTER_SEED + 3 {
                let mut cfg = Runs::base();
                for (k, v) in &overrides {
                    cfg.set(k, v).unwrap();
                }
                cfg.seed = seed;
                let (r, _) = self.get(&cfg)?;
                spent += self.elapsed.get(&cfg.signature()).copied().unwrap_or_default();
                reports.push(r);
            }
            out.push((variant, reports, spent));
        }
        Ok(out)
    }
}

fn medians(rows: &[(String, Vec<EvalReport>, Duration)], f: fn(&EvalReport) -> f64) -> Vec<(String, f64)> {
    rows.iter().map(|(v, rs, _)| (v.clone(), median(&rs.iter().map(f).collect::<Vec<_>>()))).collect()
}

fn show(ms: &[(String, f64)]) -> String {
    ms.iter().map(|(v, m)| format!("{v}={m:.2}")).collect::<Vec<_>>().join(" ")
}

fn criterion_5(runs: &mut Runs) -> Outcome {
    let mut cfg = Runs::base();
    cfg.seed = MASTER_SEED;
    let (_, dir) = runs.get(&cfg)?;
    let ckpt = dir.join("model.brdg");
    let eval_dir = runs.root.join("criterion5");
    let o = Command::new(env!("CARGO_BIN_EXE_bridge"))
        .args(["eval", ckpt.to_str().unwrap(), "--out", eval_dir.to_str().unwrap()])
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.code() != Some(0) {
        return Err(format!("eval exited with {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr)));
    }
    let report = EvalReport::from_kv(&String::from_utf8_lossy(&o.stdout)).map_err(|e| e.to_string())?;

    // the counter itself is live: the fused path on the same checkpoint increments it
    let (cfg, model) = Checkpoint::read(&ckpt).and_then(|c| c.restore::<f32>()).map_err(|e| e.to_string())?;
    let data = generate_dataset(&cfg.data, Seeds::from_master(cfg.seed).data, cfg.data_size).map_err(|e| e.to_string())?;
    let emb = retrieval_inference(&model, &data.spec, &data.test).map_err(|e| e.to_string())?;
    let refs: Vec<_> = data.test.iter().take(8).collect();
    let batch = bridge_fusion::data::make_batch::<f32>(&data.spec, &refs).map_err(|e| e.to_string())?;
    reset_cross_attention_calls();
    let mut g = Graph::new();
    let p = model.store.bind(&mut g).map_err(|e| e.to_string())?;
    model.bridged_encode(&mut g, &p, &batch).map_err(|e| e.to_string())?;
    let fused_calls = cross_attention_calls();

    let detail = format!(
        "cli eval counter={}, in-process retrieval counter={}, fused forward counter={fused_calls}",
        report.cross_attention_calls_during_retrieval, emb.cross_attention_calls
    );
    if report.cross_attention_calls_during_retrieval == 0 && emb.cross_attention_calls == 0 && fused_calls > 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_6(runs: &mut Runs) -> Outcome {
    let rows = runs.axis("fusion", &["none", "pooled_only", "self_plus_cross", "cross_only"])?;
    let wall: Duration = rows.iter().map(|r| r.2).sum();
    let m = medians(&rows, |r| r.tr1);
    let get = |n: &str| m.iter().find(|x| x.0 == n).unwrap().1;
    let (none, pooled, spc, cross) = (get("none"), get("pooled_only"), get("self_plus_cross"), get("cross_only"));
    let ordered = cross >= spc && spc >= pooled && pooled >= none;
    let margin = cross - none;
    let detail = format!("median TR@1 {} | cross_only-none={margin:.2}pt | sweep {:.1} min", show(&m), wall.as_secs_f64() / 60.0);
    if ordered && margin >= 5.0 && wall < Duration::from_secs(30 * 60) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_7(runs: &mut Runs) -> Outcome {
    let rows = runs.axis("losses", &["infonce", "infonce_itm", "infonce_cyc", "full"])?;
    let m = medians(&rows, |r| r.tr1);
    let get = |n: &str| m.iter().find(|x| x.0 == n).unwrap().1;
    let full = get("full");
    let ok = full >= get("infonce") && full >= get("infonce_itm") - 1.0 && full >= get("infonce_cyc") - 1.0;
    let detail = format!("median TR@1 {}", show(&m));
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_8(runs: &mut Runs) -> Outcome {
    let rows = runs.axis("placement", &["early", "late"])?;
    let m = medians(&rows, |r| r.tr1);
    let detail = format!("median TR@1 {}", show(&m));
    if m[1].1 >= m[0].1 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_9(runs: &mut Runs) -> Outcome {
    let trained = runs.axis("fusion", &["cross_only"])?;
    let mut untrained = Vec::new();
    for seed in MASTER_SEED..MASTER_SEED + 3 {
        let mut cfg = Runs::base();
        cfg.seed = seed;
        cfg.set("stages.A.epochs", "0").unwrap();
        cfg.set("stages.B.epochs", "0").unwrap();
        untrained.push(runs.get(&cfg)?.0.modality_gap);
    }
    let t = median(&trained[0].1.iter().map(|r| r.modality_gap).collect::<Vec<_>>());
    let u = median(&untrained);
    let detail = format!("median modality gap trained={t:.4} untrained={u:.4}");
    if t < u {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_10(root: &Path) -> Outcome {
    let bin = env!("CARGO_BIN_EXE_bridge");
    let cfg_path = root.join("c10.cfg");
    let mut text = micro_run_config(Path::new("unused")).to_text();
    text = text.lines().filter(|l| !l.starts_with("out ")).map(|l| format!("{l}\n")).collect();
    fs::write(&cfg_path, text).map_err(|e| e.to_string())?;
    let mut evals = Vec::new();
    for run in ["a", "b"] {
        let out = root.join(format!("c10{run}"));
        let o = Command::new(bin)
            .args(["train", "--config", cfg_path.to_str().unwrap(), "--seed", "10", "--out", out.to_str().unwrap(), "--quiet"])
            .output()
            .map_err(|e| e.to_string())?;
        if o.status.code() != Some(0) {
            return Err(format!("train exited with {:?}", o.status.code()));
        }
        evals.push(fs::read_to_string(out.join("eval.txt")).map_err(|e| e.to_string())?);
    }
    if evals[0] != evals[1] {
        return Err("repeated training produced different eval.txt".into());
    }

    let path = root.join("c10a").join("model.brdg");
    let ck = Checkpoint::read(&path).map_err(|e| e.to_string())?;
    let (cfg, model) = ck.restore::<f32>().map_err(|e| e.to_string())?;
    let again = Checkpoint::from_model(&cfg, &model, ck.stage, ck.step);
    let bitwise = again.params.iter().zip(&ck.params).all(|(a, b)| {
        a.name == b.name && a.values.iter().map(|x| x.to_bits()).eq(b.values.iter().map(|x| x.to_bits()))
    });
    if !bitwise || again.to_bytes().unwrap() != fs::read(&path).unwrap() {
        return Err("checkpoint round trip is not bitwise".into());
    }

    let mut bytes = fs::read(&path).map_err(|e| e.to_string())?;
    let at = bytes.len() * 2 / 3;
    bytes[at] ^= 0x04;
    let bad = root.join("corrupt.brdg");
    fs::write(&bad, &bytes).map_err(|e| e.to_string())?;
    let lib = matches!(Checkpoint::read(&bad), Err(Error::Checksum { .. }));
    let o = Command::new(bin)
        .args(["eval", bad.to_str().unwrap(), "--out", root.join("c10bad").to_str().unwrap()])
        .output()
        .map_err(|e| e.to_string())?;
    if !lib || o.status.code() != Some(4) {
        return Err(format!("corrupted checkpoint accepted (library {lib}, exit {:?})", o.status.code()));
    }
    Ok(format!("eval.txt identical across runs, {} tensors round-trip bitwise, corrupted byte {at} rejected (exit 4)", ck.params.len()))
}

/// Rank-by-counting: items scoring above the truth, plus equal scorers with a lower index.
fn recall_by_enumeration(s: &[f64], m: usize, k: usize) -> (f64, f64) {
    let hit = |score: &dyn Fn(usize) -> f64, truth: usize| {
        let ahead = (0..m).filter(|&j| score(j) > score(truth) || (score(j) == score(truth) && j < truth)).count();
        ahead < k
    };
    let tr = (0..m).filter(|&i| hit(&|j| s[i * m + j], i)).count();
    let ir = (0..m).filter(|&j| hit(&|i| s[i * m + j], j)).count();
    (100.0 * tr as f64 / m as f64, 100.0 * ir as f64 / m as f64)
}

fn criterion_11() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..1000 {
        let m = rng.random_range(1..=8);
        // coarse integer scores in half the trials force ties
        let coarse = trial % 2 == 0;
        let s: Vec<f64> = (0..m * m).map(|_| if coarse { rng.random_range(0..3) as f64 } else { rng.random::<f64>() }).collect();
        let ks: Vec<usize> = (1..=m).collect();
        let (tr, ir) = recall_from_similarity(&s, m, &ks).map_err(|e| e.to_string())?;
        for (i, &k) in ks.iter().enumerate() {
            let (otr, oir) = recall_by_enumeration(&s, m, k);
            if (tr[i] - otr).abs() > 1e-12 || (ir[i] - oir).abs() > 1e-12 {
                return Err(format!("trial {trial}, M={m}, K={k}: got ({}, {}), enumeration ({otr}, {oir})", tr[i], ir[i]));
            }
        }
    }
    Ok("1000 random matrices (M<=8, half with ties) match enumeration for every K".into())
}

fn main() {
    let root = tempfile::tempdir().expect("temporary directory");
    let mut runs = Runs { root: root.path().join("runs"), done: HashMap::new(), elapsed: HashMap::new() };
    let mut failed = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome| {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {n:>2} {name}: {detail}");
    };
    report(1, "gradient correctness", criterion_1());
    report(2, "analytic loss values", criterion_2());
    report(3, "closed-gate equivalence", criterion_3());
    report(4, "stage discipline", criterion_4());
    report(11, "recall oracle", criterion_11());
    report(10, "determinism and persistence", criterion_10(root.path()));
    report(5, "zero cross-attention retrieval", criterion_5(&mut runs));
    report(6, "architecture ablation ordering", criterion_6(&mut runs));
    report(7, "loss ablation ordering", criterion_7(&mut runs));
    report(8, "placement ordering", criterion_8(&mut runs));
    report(9, "modality gap", criterion_9(&mut runs));
    println!("{} of 11 criteria passed", 11 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
