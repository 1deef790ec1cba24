//! Retrieval recall, ITM accuracy, modality gap and embedding export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::autodiff::Graph;
use crate::bridge::{cross_attention_calls, reset_cross_attention_calls};
use crate::data::{make_batch, ConceptSpec, PairedExample};
use crate::error::{Error, Result};
use crate::model::BridgeModel;
use crate::objectives::{cycle_loss, mine_semi_hard_negatives, similarity};
use crate::tensor::{Real, Tensor};

/// Examples per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 64;

/// 1-based rank of the true match `i` in `scores`, ties broken by ascending index.
fn rank_of(scores: &[f64], i: usize) -> usize {
    let own = scores[i];
    1 + scores.iter().enumerate().filter(|&(j, &s)| s > own || (s == own && j < i)).count()
}

/// Text-to-image and image-to-text Recall@K (percent) from an `[M, M]` text-by-image matrix.
pub fn recall_from_similarity(s: &[f64], m: usize, ks: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    if s.len() != m * m {
        return Err(Error::shape(format!("{} scores for {m}×{m}", s.len())));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > m) {
        return Err(Error::contract(format!("Recall@{k} needs 1 ≤ K ≤ {m}")));
    }
    let t_ranks: Vec<usize> = (0..m).map(|i| rank_of(&s[i * m..(i + 1) * m], i)).collect();
    let i_ranks: Vec<usize> = (0..m)
        .map(|j| {
            let col: Vec<f64> = (0..m).map(|i| s[i * m + j]).collect();
            rank_of(&col, j)
        })
        .collect();
    let pct = |ranks: &[usize], k: usize| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / m as f64;
    Ok((
        ks.iter().map(|&k| pct(&t_ranks, k)).collect(),
        ks.iter().map(|&k| pct(&i_ranks, k)).collect(),
    ))
}

/// Recall@K by inner product of `[M, d]` text and image embeddings.
pub fn recall_at_k<T: Real>(p_t: &Tensor<T>, p_v: &Tensor<T>, ks: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    if p_t.shape() != p_v.shape() || p_t.rank() != 2 {
        return Err(Error::shape(format!("text {:?}, image {:?}", p_t.shape(), p_v.shape())));
    }
    let m = p_t.rows();
    let mut s = Vec::with_capacity(m * m);
    for i in 0..m {
        for j in 0..m {
            s.push(p_t.row(i).iter().zip(p_v.row(j)).map(|(a, b)| a.as_f64() * b.as_f64()).sum());
        }
    }
    recall_from_similarity(&s, m, ks)
}

/// Euclidean distance between the text and image embedding centroids.
pub fn modality_gap<T: Real>(p_t: &Tensor<T>, p_v: &Tensor<T>) -> Result<f64> {
    if p_t.rank() != 2 || p_v.rank() != 2 || p_t.last_dim() != p_v.last_dim() {
        return Err(Error::shape(format!("text {:?}, image {:?}", p_t.shape(), p_v.shape())));
    }
    let centroid = |x: &Tensor<T>| {
        let mut c = vec![0.0; x.last_dim()];
        for r in 0..x.rows() {
            for (a, b) in c.iter_mut().zip(x.row(r)) {
                *a += b.as_f64();
            }
        }
        c.iter_mut().for_each(|a| *a /= x.rows() as f64);
        c
    };
    let (ct, cv) = (centroid(p_t), centroid(p_v));
    Ok(ct.iter().zip(&cv).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

/// Unimodal retrieval embeddings plus the cross-attention calls observed while computing them.
#[derive(Clone, Debug)]
pub struct RetrievalEmbeddings<T> {
    pub text: Tensor<T>,
    pub vision: Tensor<T>,
    pub cross_attention_calls: u64,
}

/// Runs the bi-encoder path over `examples` in fixed chunks.
///
/// Errors with `Contract` if any cross-attention call is observed.
pub fn retrieval_inference<T: Real>(
    model: &BridgeModel<T>,
    spec: &ConceptSpec,
    examples: &[PairedExample],
) -> Result<RetrievalEmbeddings<T>> {
    if examples.is_empty() {
        return Err(Error::DegenerateInput("no examples to embed".into()));
    }
    reset_cross_attention_calls();
    let d = model.config.embed_dim;
    let (mut text, mut vision) = (Vec::new(), Vec::new());
    for chunk in examples.chunks(EVAL_CHUNK) {
        let refs: Vec<&PairedExample> = chunk.iter().collect();
        let batch = make_batch::<T>(spec, &refs)?;
        let mut g = Graph::new();
        let p = model.store.bind(&mut g)?;
        let (uv, ut) = model.unimodal_embeddings(&mut g, &p, &batch)?;
        text.extend_from_slice(g.value(ut).data());
        vision.extend_from_slice(g.value(uv).data());
    }
    let calls = cross_attention_calls();
    if calls != 0 {
        return Err(Error::contract(format!("retrieval path ran {calls} cross-attention calls")));
    }
    Ok(RetrievalEmbeddings {
        text: Tensor::new(vec![examples.len(), d], text)?,
        vision: Tensor::new(vec![examples.len(), d], vision)?,
        cross_attention_calls: calls,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub tr1: f64,
    pub tr5: f64,
    pub ir1: f64,
    pub ir5: f64,
    pub itm_accuracy: f64,
    pub modality_gap: f64,
    /// NaN when the model records no attention.
    pub cycle_loss_eval: f64,
    pub cross_attention_calls_during_retrieval: u64,
}

impl EvalReport {
    /// Flat `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("tr1", self.tr1),
            ("tr5", self.tr5),
            ("ir1", self.ir1),
            ("ir5", self.ir5),
            ("itm_accuracy", self.itm_accuracy),
            ("modality_gap", self.modality_gap),
            ("cycle_loss_eval", self.cycle_loss_eval),
        ] {
            let _ = writeln!(s, "{k}={v:.6}");
        }
        let _ = writeln!(s, "cross_attention_calls_during_retrieval={}", self.cross_attention_calls_during_retrieval);
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let get = |key: &str| -> Result<&str> {
            text.lines()
                .filter_map(|l| l.split_once('='))
                .find(|(k, _)| k.trim() == key)
                .map(|(_, v)| v.trim())
                .ok_or_else(|| Error::Format(format!("report is missing `{key}`")))
        };
        let num = |key: &str| -> Result<f64> {
            get(key)?.parse().map_err(|_| Error::Format(format!("bad value for `{key}`")))
        };
        Ok(EvalReport {
            tr1: num("tr1")?,
            tr5: num("tr5")?,
            ir1: num("ir1")?,
            ir5: num("ir5")?,
            itm_accuracy: num("itm_accuracy")?,
            modality_gap: num("modality_gap")?,
            cycle_loss_eval: num("cycle_loss_eval")?,
            cross_attention_calls_during_retrieval: get("cross_attention_calls_during_retrieval")?
                .parse()
                .map_err(|_| Error::Format("bad call count".into()))?,
        })
    }
}

/// Full evaluation of `model` on `examples`.
pub fn evaluate<T: Real>(model: &BridgeModel<T>, spec: &ConceptSpec, examples: &[PairedExample]) -> Result<EvalReport> {
    let emb = retrieval_inference(model, spec, examples)?;
    let k5 = 5.min(examples.len());
    let (tr, ir) = recall_at_k(&emb.text, &emb.vision, &[1, k5])?;
    let gap = modality_gap(&emb.text, &emb.vision)?;

    let (mut hits, mut total) = (0.0, 0.0);
    let (mut cyc_sum, mut cyc_n) = (0.0, 0usize);
    for chunk in examples.chunks(EVAL_CHUNK).filter(|c| c.len() >= 2) {
        let refs: Vec<&PairedExample> = chunk.iter().collect();
        let batch = make_batch::<T>(spec, &refs)?;
        let mut g = Graph::new();
        let p = model.store.bind(&mut g)?;
        let low = model.lower(&mut g, &p, &batch)?;
        let tap = model.tap();
        let (hv, ht) = (low.vision[tap], low.text[tap]);
        let up = model.upper(&mut g, &p, hv, ht, &low.text_valid)?;
        if !up.records.is_empty() {
            let c = cycle_loss(&mut g, &up.records)?;
            cyc_sum += g.value(c).data()[0].as_f64() * chunk.len() as f64;
            cyc_n += chunk.len();
        }
        let s = similarity(&mut g, up.fused_t, up.fused_v, p.var(model.log_tau))?;
        let neg = mine_semi_hard_negatives(g.value(s))?;
        let b = chunk.len();
        let v_idx: Vec<usize> = neg.image_for_text.iter().copied().chain(0..b).collect();
        let t_idx: Vec<usize> = (0..b).chain(neg.text_for_image.iter().copied()).collect();
        let hv_n = g.index_select(hv, &v_idx)?;
        let ht_n = g.index_select(ht, &t_idx)?;
        let valid_n = batch.tokens.select(&t_idx).valid;
        let up_n = model.upper(&mut g, &p, hv_n, ht_n, &valid_n)?;
        let pos = model.itm.logits(&mut g, &p, up.fused_t, up.fused_v)?;
        let negl = model.itm.logits(&mut g, &p, up_n.fused_t, up_n.fused_v)?;
        let pos_ok = g.value(pos).data().iter().filter(|z| z.as_f64() > 0.0).count() as f64;
        let neg_ok = g.value(negl).data().iter().filter(|z| z.as_f64() <= 0.0).count() as f64;
        // positives and negatives weigh equally, as in training
        hits += pos_ok / b as f64 + neg_ok / (2 * b) as f64;
        total += 2.0;
    }
    Ok(EvalReport {
        tr1: tr[0],
        tr5: tr[1],
        ir1: ir[0],
        ir5: ir[1],
        itm_accuracy: if total > 0.0 { 100.0 * hits / total } else { f64::NAN },
        modality_gap: gap,
        cycle_loss_eval: if cyc_n > 0 { cyc_sum / cyc_n as f64 } else { f64::NAN },
        cross_attention_calls_during_retrieval: emb.cross_attention_calls,
    })
}

/// Formats like C's `%.9g`.
pub fn format_g9(x: f64) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.8e}");
    let (mant, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-4..9).contains(&exp) {
        trim(&format!("{:.*}", (8 - exp) as usize, x))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mant), exp.abs())
    }
}

/// Top-two principal components of the rows of `x` (row-major `n × d`).
pub fn pca_2d(x: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let n = x.len();
    let d = x.first().map_or(0, Vec::len);
    if n == 0 || d == 0 {
        return Vec::new();
    }
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let centered: Vec<Vec<f64>> = x.iter().map(|r| r.iter().zip(&mean).map(|(a, m)| a - m).collect()).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for r in &centered {
        for a in 0..d {
            for b in 0..d {
                cov[a][b] += r[a] * r[b];
            }
        }
    }
    let mut comps: Vec<Vec<f64>> = Vec::new();
    for _ in 0..2.min(d) {
        // power iteration with deflation against earlier components
        let mut v: Vec<f64> = (0..d).map(|j| 1.0 + j as f64 / d as f64).collect();
        for _ in 0..500 {
            let mut w: Vec<f64> = (0..d).map(|a| (0..d).map(|b| cov[a][b] * v[b]).sum()).collect();
            for c in &comps {
                let proj: f64 = w.iter().zip(c).map(|(a, b)| a * b).sum();
                w.iter_mut().zip(c).for_each(|(a, b)| *a -= proj * b);
            }
            let norm = w.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm < 1e-300 {
                break;
            }
            v = w.into_iter().map(|a| a / norm).collect();
        }
        let lead = v.iter().copied().fold(0.0, |acc: f64, a| if a.abs() > acc.abs() { a } else { acc });
        if lead < 0.0 {
            v.iter_mut().for_each(|a| *a = -*a);
        }
        comps.push(v);
    }
    centered
        .iter()
        .map(|r| {
            let mut out = [0.0; 2];
            for (o, c) in out.iter_mut().zip(&comps) {
                *o = r.iter().zip(c).map(|(a, b)| a * b).sum();
            }
            out
        })
        .collect()
}

/// Writes `embeddings.csv` (one row per example and modality) and a sibling `pca.csv`.
pub fn export_embeddings<T: Real>(
    model: &BridgeModel<T>,
    spec: &ConceptSpec,
    examples: &[PairedExample],
    path: &Path,
) -> Result<()> {
    let emb = retrieval_inference(model, spec, examples)?;
    let d = model.config.embed_dim;
    let mut csv = String::from("example_id,modality,concepts");
    for j in 0..d {
        let _ = write!(csv, ",e{j}");
    }
    csv.push('\n');
    let mut rows = Vec::with_capacity(2 * examples.len());
    let mut pca_csv = String::from("example_id,modality,pc1,pc2\n");
    let mut keys = Vec::with_capacity(2 * examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let concepts = ex.concepts.iter().map(usize::to_string).collect::<Vec<_>>().join(";");
        for (modality, t) in [("vision", &emb.vision), ("text", &emb.text)] {
            let row: Vec<f64> = t.row(i).iter().map(|x| x.as_f64()).collect();
            let _ = write!(csv, "{},{modality},{concepts}", ex.id);
            for &x in &row {
                let _ = write!(csv, ",{}", format_g9(x));
            }
            csv.push('\n');
            keys.push((ex.id, modality));
            rows.push(row);
        }
    }
    for ((id, modality), pc) in keys.iter().zip(pca_2d(&rows)) {
        let _ = writeln!(pca_csv, "{id},{modality},{},{}", format_g9(pc[0]), format_g9(pc[1]));
    }
    fs::write(path, csv)?;
    fs::write(path.with_file_name("pca.csv"), pca_csv)?;
    Ok(())
}

/// Parses an embeddings CSV back into `(example_id, modality, values)` rows.
pub fn read_embeddings_csv(text: &str) -> Result<Vec<(usize, String, Vec<f64>)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let mut cols = line.split(',');
        let bad = || Error::Format(format!("malformed embeddings row {}", n + 1));
        let id = cols.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let modality = cols.next().ok_or_else(bad)?.to_string();
        cols.next().ok_or_else(bad)?;
        let vals = cols.map(|c| c.parse::<f64>().map_err(|_| bad())).collect::<Result<_>>()?;
        out.push((id, modality, vals));
    }
    Ok(out)
}

/// Attention maps as CSV rows `layer,example,direction,query,key,probability`.
pub fn attention_records_csv<T: Real>(maps: &[(Tensor<T>, Tensor<T>)]) -> String {
    let mut s = String::from("layer,example,direction,query,key,probability\n");
    for (l, (tv, vt)) in maps.iter().enumerate() {
        for (dir, t) in [("t_to_v", tv), ("v_to_t", vt)] {
            let sh = t.shape();
            let (b, nq, nk) = (sh[0], sh[1], sh[2]);
            for bi in 0..b {
                for q in 0..nq {
                    for k in 0..nk {
                        let p = t.data()[(bi * nq + q) * nk + k].as_f64();
                        let _ = writeln!(s, "{},{bi},{dir},{q},{k},{}", l + 1, format_g9(p));
                    }
                }
            }
        }
    }
    s
}
