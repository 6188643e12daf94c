//! Attention diagnostics: intra- vs cross-item attention mass, token
//! distances, heatmap export and the baseline-vs-scheduled skew comparison.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Example;
use crate::mask::Scheme;
use crate::model::{forward, ForwardTrace, ModelConfig, ModelError, ModelParams};
use crate::numerics::Tensor;
use crate::segmentation::TokenizedPrompt;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("trace {0} was produced without retained attention")]
    NoAttention(usize),
    #[error("{traces} traces for {prompts} prompts")]
    Misaligned { traces: usize, prompts: usize },
    #[error("trace {index} covers {got} positions, prompt has {expected}")]
    LengthMismatch {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("layer {layer} / head {head} out of range")]
    NoSuchHead { layer: usize, head: usize },
    #[error("malformed heatmap {path}: {message}")]
    BadHeatmap { path: PathBuf, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Which layers and heads contribute to an aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionScope {
    /// Layers whose scheme is listed are included.
    pub schemes: Vec<Scheme>,
    /// Further restricts to these layer indices when set.
    pub layers: Option<Vec<usize>>,
    pub heads: Option<Vec<usize>>,
}

impl Default for AttentionScope {
    /// Unmasked (OR) layers, all heads.
    fn default() -> Self {
        Self::schemes(&[Scheme::Or])
    }
}

impl AttentionScope {
    pub fn schemes(schemes: &[Scheme]) -> Self {
        Self {
            schemes: schemes.to_vec(),
            layers: None,
            heads: None,
        }
    }

    pub fn all() -> Self {
        Self::schemes(&Scheme::ALL)
    }

    pub fn single(layer: usize, head: usize) -> Self {
        Self {
            schemes: Scheme::ALL.to_vec(),
            layers: Some(vec![layer]),
            heads: Some(vec![head]),
        }
    }

    fn includes(&self, layer: usize, scheme: Scheme, head: usize) -> bool {
        self.schemes.contains(&scheme)
            && self.layers.as_ref().is_none_or(|l| l.contains(&layer))
            && self.heads.as_ref().is_none_or(|h| h.contains(&head))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionStats {
    pub intra_total_proportion: f64,
    pub cross_total_proportion: f64,
    pub intra_mean_per_pair: Option<f64>,
    pub cross_mean_per_pair: Option<f64>,
    pub n_intra_pairs: u64,
    pub n_cross_pairs: u64,
    pub intra_weight_sum: f64,
    pub cross_weight_sum: f64,
    pub n_examples: usize,
    /// Layer/head slices summed over, across all examples.
    pub n_head_slices: u64,
    pub scope: AttentionScope,
}

impl AttentionStats {
    /// Cross-over-intra ratio of the per-pair means.
    pub fn cross_to_intra_ratio(&self) -> Option<f64> {
        match (self.intra_mean_per_pair, self.cross_mean_per_pair) {
            (Some(i), Some(c)) if i > 0.0 => Some(c / i),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Accumulator {
    intra_sum: f64,
    cross_sum: f64,
    n_intra: u64,
    n_cross: u64,
    slices: u64,
}

impl Accumulator {
    fn merge(mut self, o: &Accumulator) -> Self {
        self.intra_sum += o.intra_sum;
        self.cross_sum += o.cross_sum;
        self.n_intra += o.n_intra;
        self.n_cross += o.n_cross;
        self.slices += o.slices;
        self
    }

    /// Merges per-example partials in a canonical order so the floating-point
    /// result does not depend on input order.
    fn reduce(mut parts: Vec<Accumulator>) -> Accumulator {
        parts.sort_by(|a, b| {
            a.intra_sum
                .total_cmp(&b.intra_sum)
                .then(a.cross_sum.total_cmp(&b.cross_sum))
                .then(a.n_intra.cmp(&b.n_intra))
                .then(a.n_cross.cmp(&b.n_cross))
        });
        parts
            .iter()
            .fold(Accumulator::default(), |acc, p| acc.merge(p))
    }

    fn finish(self, n_examples: usize, scope: AttentionScope) -> AttentionStats {
        let total = self.intra_sum + self.cross_sum;
        let (ip, cp) = if total > 0.0 {
            (self.intra_sum / total, self.cross_sum / total)
        } else {
            (0.0, 0.0)
        };
        let mean = |s: f64, n: u64| (n > 0).then(|| s / n as f64);
        AttentionStats {
            intra_total_proportion: ip,
            cross_total_proportion: cp,
            intra_mean_per_pair: mean(self.intra_sum, self.n_intra),
            cross_mean_per_pair: mean(self.cross_sum, self.n_cross),
            n_intra_pairs: self.n_intra,
            n_cross_pairs: self.n_cross,
            intra_weight_sum: self.intra_sum,
            cross_weight_sum: self.cross_sum,
            n_examples,
            n_head_slices: self.slices,
            scope,
        }
    }
}

/// Item-token pairs j > k of one prompt, tagged with whether they share an
/// item.
fn item_pairs(prompt: &TokenizedPrompt) -> Vec<(usize, usize, bool)> {
    let ann = prompt.annotations();
    let items: Vec<usize> = (0..ann.len()).filter(|&j| ann[j].is_item_token).collect();
    let mut out = Vec::new();
    for (a, &j) in items.iter().enumerate() {
        for &k in &items[..a] {
            out.push((j, k, ann[j].item_index == ann[k].item_index));
        }
    }
    out
}

fn accumulate(
    index: usize,
    trace: &ForwardTrace,
    prompt: &TokenizedPrompt,
    scope: &AttentionScope,
) -> Result<Accumulator, AnalysisError> {
    let layers = trace
        .attention
        .as_ref()
        .ok_or(AnalysisError::NoAttention(index))?;
    let pairs = item_pairs(prompt);
    let mut acc = Accumulator::default();
    for (l, heads) in layers.iter().enumerate() {
        let scheme = trace.schemes.get(l).copied().unwrap_or(Scheme::Or);
        for (h, w) in heads.iter().enumerate() {
            if !scope.includes(l, scheme, h) {
                continue;
            }
            if w.rows() != prompt.len() {
                return Err(AnalysisError::LengthMismatch {
                    index,
                    got: w.rows(),
                    expected: prompt.len(),
                });
            }
            acc.slices += 1;
            // j > k is always causally allowed, so every pair counts.
            for &(j, k, intra) in &pairs {
                let v = w.at(j, k);
                if intra {
                    acc.intra_sum += v;
                    acc.n_intra += 1;
                } else {
                    acc.cross_sum += v;
                    acc.n_cross += 1;
                }
            }
        }
    }
    Ok(acc)
}

/// Aggregates retained attention weights over item-token pairs.
pub fn attention_aggregate(
    traces: &[ForwardTrace],
    prompts: &[TokenizedPrompt],
    scope: &AttentionScope,
) -> Result<AttentionStats, AnalysisError> {
    if traces.len() != prompts.len() {
        return Err(AnalysisError::Misaligned {
            traces: traces.len(),
            prompts: prompts.len(),
        });
    }
    let parts = traces
        .par_iter()
        .zip(prompts.par_iter())
        .enumerate()
        .map(|(i, (t, p))| accumulate(i, t, p, scope))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Accumulator::reduce(parts).finish(prompts.len(), scope.clone()))
}

/// Runs the model over `examples` and aggregates without keeping every trace.
pub fn model_attention_stats(
    params: &ModelParams,
    config: &ModelConfig,
    examples: &[Example],
    scope: &AttentionScope,
) -> Result<AttentionStats, AnalysisError> {
    let parts = examples
        .par_iter()
        .enumerate()
        .map(|(i, (prompt, _))| {
            let trace = forward(prompt, params, config, true)?;
            accumulate(i, &trace, prompt, scope)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Accumulator::reduce(parts).finish(examples.len(), scope.clone()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    pub intra_mean_distance: Option<f64>,
    pub cross_mean_distance: Option<f64>,
    pub n_intra_pairs: u64,
    pub n_cross_pairs: u64,
}

/// Mean token-index distance over item-token pairs, split by same-item.
pub fn distance_stats(prompts: &[TokenizedPrompt]) -> DistanceStats {
    let (mut si, mut sc, mut ni, mut nc) = (0u64, 0u64, 0u64, 0u64);
    for p in prompts {
        for (j, k, intra) in item_pairs(p) {
            let d = (j - k) as u64;
            if intra {
                si += d;
                ni += 1;
            } else {
                sc += d;
                nc += 1;
            }
        }
    }
    let mean = |s: u64, n: u64| (n > 0).then(|| s as f64 / n as f64);
    DistanceStats {
        intra_mean_distance: mean(si, ni),
        cross_mean_distance: mean(sc, nc),
        n_intra_pairs: ni,
        n_cross_pairs: nc,
    }
}

/// Path of the annotation sidecar written next to a heatmap.
pub fn annotations_path(heatmap: &Path) -> PathBuf {
    let stem = heatmap
        .file_stem()
        .map_or_else(|| "heatmap".into(), |s| s.to_string_lossy().into_owned());
    heatmap.with_file_name(format!("{stem}.annotations.csv"))
}

/// Writes one head's n×n weights as CSV plus a per-position annotation
/// sidecar. Returns the sidecar path.
pub fn export_heatmap(
    trace: &ForwardTrace,
    prompt: &TokenizedPrompt,
    layer: usize,
    head: usize,
    path: &Path,
) -> Result<PathBuf, AnalysisError> {
    if trace.attention.is_none() {
        return Err(AnalysisError::NoAttention(0));
    }
    let w = trace
        .weights(layer, head)
        .map_err(|_| AnalysisError::NoSuchHead { layer, head })?;
    if w.rows() != prompt.len() {
        return Err(AnalysisError::LengthMismatch {
            index: 0,
            got: w.rows(),
            expected: prompt.len(),
        });
    }
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for j in 0..w.rows() {
        let row: Vec<String> = w.row(j).iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;

    let side = annotations_path(path);
    let mut out = BufWriter::new(std::fs::File::create(&side)?);
    writeln!(
        out,
        "position,token,is_item_token,is_last_of_item,item_index"
    )?;
    for (j, (a, t)) in prompt.annotations().iter().zip(prompt.tokens()).enumerate() {
        let slot = a.item_index.map_or_else(String::new, |s| s.to_string());
        writeln!(
            out,
            "{j},{t},{},{},{slot}",
            u8::from(a.is_item_token),
            u8::from(a.is_last_of_item)
        )?;
    }
    out.flush()?;
    Ok(side)
}

/// Reads a heatmap CSV written by [`export_heatmap`].
pub fn import_heatmap(path: &Path) -> Result<Tensor, AnalysisError> {
    let bad = |message: String| AnalysisError::BadHeatmap {
        path: path.to_path_buf(),
        message,
    };
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = None;
    for line in BufReader::new(std::fs::File::open(path)?).lines() {
        let line = line?;
        let vals = line
            .split(',')
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| bad(format!("row {rows}: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        match cols {
            None => cols = Some(vals.len()),
            Some(c) if c != vals.len() => {
                return Err(bad(format!("row {rows} has {} columns", vals.len())))
            }
            _ => {}
        }
        data.extend(vals);
        rows += 1;
    }
    Tensor::new(vec![rows, cols.unwrap_or(0)], data).map_err(|e| bad(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeStats {
    pub scheme: Scheme,
    pub stats: AttentionStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewReport {
    pub baseline: AttentionStats,
    /// Per-scheme aggregates of the scheduled model, one entry per scheme it
    /// uses, in layer order of first appearance.
    pub scheduled: Vec<SchemeStats>,
    pub delta_intra_mean: Option<f64>,
    pub delta_cross_mean: Option<f64>,
    pub delta_intra_proportion: Option<f64>,
}

impl SkewReport {
    pub fn scheme(&self, scheme: Scheme) -> Option<&AttentionStats> {
        self.scheduled
            .iter()
            .find(|s| s.scheme == scheme)
            .map(|s| &s.stats)
    }

    pub fn save_json(&self, path: &Path) -> Result<(), AnalysisError> {
        let f = BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }
}

/// Compares an all-OR baseline with a scheduled model on the same examples.
/// Deltas are scheduled OR layers minus baseline.
pub fn skew_report(
    baseline: (&ModelParams, &ModelConfig),
    scheduled: (&ModelParams, &ModelConfig),
    examples: &[Example],
) -> Result<SkewReport, AnalysisError> {
    let base = model_attention_stats(baseline.0, baseline.1, examples, &AttentionScope::default())?;
    let mut seen = Vec::new();
    for &s in scheduled.1.schedule.schemes() {
        if !seen.contains(&s) {
            seen.push(s);
        }
    }
    let per_scheme = seen
        .into_iter()
        .map(|scheme| {
            let stats = model_attention_stats(
                scheduled.0,
                scheduled.1,
                examples,
                &AttentionScope::schemes(&[scheme]),
            )?;
            Ok(SchemeStats { scheme, stats })
        })
        .collect::<Result<Vec<_>, AnalysisError>>()?;
    let or = per_scheme
        .iter()
        .find(|s| s.scheme == Scheme::Or)
        .map(|s| &s.stats);
    let diff = |f: fn(&AttentionStats) -> Option<f64>| match (or.and_then(f), f(&base)) {
        (Some(a), Some(b)) => Some(a - b),
        _ => None,
    };
    Ok(SkewReport {
        delta_intra_mean: diff(|s| s.intra_mean_per_pair),
        delta_cross_mean: diff(|s| s.cross_mean_per_pair),
        delta_intra_proportion: diff(|s| (s.n_head_slices > 0).then_some(s.intra_total_proportion)),
        baseline: base,
        scheduled: per_scheme,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{build_schedule, BlockOrder, LayerSchedule};
    use crate::segmentation::{tokenize_prompt, Annotation, ItemCatalog, PromptTemplate};

    /// Prompt with item tokens at {1,2,3} and {4,5,6}.
    fn two_items() -> TokenizedPrompt {
        let mut ann = vec![Annotation::NON_ITEM];
        for slot in 0..2 {
            for t in 0..3 {
                ann.push(Annotation::item(slot, t == 2));
            }
        }
        ann.push(Annotation::NON_ITEM);
        TokenizedPrompt::from_parts(vec![0, 3, 4, 5, 6, 7, 8, 2], ann).unwrap()
    }

    fn fixture_trace(
        prompt: &TokenizedPrompt,
        layers: usize,
        schemes: Vec<Scheme>,
    ) -> ForwardTrace {
        let n = prompt.len();
        let attention = (0..layers)
            .map(|l| {
                (0..2)
                    .map(|h| {
                        let mut w = vec![0.0; n * n];
                        for j in 0..n {
                            let raw: Vec<f64> = (0..=j)
                                .map(|k| (1 + (j * 7 + k * 3 + l + h) % 5) as f64)
                                .collect();
                            let s: f64 = raw.iter().sum();
                            for k in 0..=j {
                                w[j * n + k] = raw[k] / s;
                            }
                        }
                        Tensor::new(vec![n, n], w).unwrap()
                    })
                    .collect()
            })
            .collect();
        ForwardTrace {
            hidden: vec![],
            attention: Some(attention),
            schemes,
            scores: vec![],
        }
    }

    #[test]
    fn distances_match_enumeration() {
        let d = distance_stats(&[two_items()]);
        assert_eq!(d.intra_mean_distance, Some(8.0 / 6.0));
        assert_eq!(d.cross_mean_distance, Some(3.0));
        assert_eq!((d.n_intra_pairs, d.n_cross_pairs), (6, 9));

        let ann = vec![
            Annotation::NON_ITEM,
            Annotation::item(0, false),
            Annotation::item(0, true),
            Annotation::NON_ITEM,
        ];
        let single = TokenizedPrompt::from_parts(vec![0, 3, 4, 2], ann).unwrap();
        let d = distance_stats(&[single]);
        assert_eq!(d.intra_mean_distance, Some(1.0));
        assert_eq!(d.cross_mean_distance, None);
    }

    #[test]
    fn single_item_prompt_is_all_intra() {
        let cat = ItemCatalog::new(vec![vec![3, 4, 5]], 6).unwrap();
        let p = tokenize_prompt(&[0], &cat, &PromptTemplate::standard()).unwrap();
        let t = fixture_trace(&p, 1, vec![Scheme::Or]);
        let s = attention_aggregate(&[t], &[p], &AttentionScope::default()).unwrap();
        assert_eq!(s.n_cross_pairs, 0);
        assert_eq!(s.intra_total_proportion, 1.0);
        assert_eq!(s.cross_mean_per_pair, None);
    }

    #[test]
    fn single_slice_matches_double_loop() {
        let p = two_items();
        let t = fixture_trace(&p, 2, vec![Scheme::Or, Scheme::Or]);
        let ann = p.annotations();
        for (l, h) in [(0, 0), (1, 1)] {
            let w = t.weights(l, h).unwrap();
            let (mut si, mut sc, mut ni, mut nc) = (0.0, 0.0, 0, 0);
            for j in 0..p.len() {
                for k in 0..j {
                    if !(ann[j].is_item_token && ann[k].is_item_token) {
                        continue;
                    }
                    if ann[j].item_index == ann[k].item_index {
                        si += w.at(j, k);
                        ni += 1;
                    } else {
                        sc += w.at(j, k);
                        nc += 1;
                    }
                }
            }
            let s = attention_aggregate(std::slice::from_ref(&t), std::slice::from_ref(&p), &AttentionScope::single(l, h))
                .unwrap();
            assert_eq!((s.n_intra_pairs, s.n_cross_pairs), (ni, nc));
            assert!((s.intra_mean_per_pair.unwrap() - si / ni as f64).abs() < 1e-15);
            assert!((s.cross_mean_per_pair.unwrap() - sc / nc as f64).abs() < 1e-15);
            assert!((s.intra_total_proportion + s.cross_total_proportion - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn default_scope_skips_masked_layers() {
        let p = two_items();
        let t = fixture_trace(&p, 3, vec![Scheme::In, Scheme::Or, Scheme::Cr]);
        let s =
            attention_aggregate(std::slice::from_ref(&t), std::slice::from_ref(&p), &AttentionScope::default()).unwrap();
        assert_eq!(s.n_head_slices, 2);
        let all = attention_aggregate(&[t], &[p], &AttentionScope::all()).unwrap();
        assert_eq!(all.n_head_slices, 6);
    }

    #[test]
    fn order_invariance_and_errors() {
        let cat = ItemCatalog::new(vec![vec![3, 4], vec![5], vec![6, 7, 8]], 9).unwrap();
        let tpl = PromptTemplate::standard();
        let prompts: Vec<_> = [[0, 1, 2], [2, 0, 1], [1, 1, 0], [2, 2, 2]]
            .iter()
            .map(|h| tokenize_prompt(h, &cat, &tpl).unwrap())
            .collect();
        let traces: Vec<_> = prompts
            .iter()
            .map(|p| fixture_trace(p, 2, vec![Scheme::Or; 2]))
            .collect();
        let a = attention_aggregate(&traces, &prompts, &AttentionScope::default()).unwrap();
        let mut rt = traces.clone();
        let mut rp = prompts.clone();
        rt.reverse();
        rp.reverse();
        rt.swap(0, 2);
        rp.swap(0, 2);
        assert_eq!(
            a,
            attention_aggregate(&rt, &rp, &AttentionScope::default()).unwrap()
        );

        assert!(attention_aggregate(&traces[..1], &prompts, &AttentionScope::default()).is_err());
        let mut bare = traces[0].clone();
        bare.attention = None;
        assert!(matches!(
            attention_aggregate(&[bare], &prompts[..1], &AttentionScope::default()),
            Err(AnalysisError::NoAttention(0))
        ));
    }

    fn tiny_model(schedule: LayerSchedule) -> (ModelParams, ModelConfig, Vec<Example>) {
        let cat = ItemCatalog::new(
            vec![vec![3, 4, 5], vec![6, 7], vec![8, 9, 10, 11], vec![12]],
            13,
        )
        .unwrap();
        let tpl = PromptTemplate::standard();
        let ex: Vec<Example> = [[0, 1, 2], [3, 2, 1], [1, 0, 3]]
            .iter()
            .map(|h| (tokenize_prompt(h, &cat, &tpl).unwrap(), 0))
            .collect();
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: schedule.len(),
            ffn_dim: 16,
            max_seq_len: 24,
            vocab_size: 13,
            n_items: 4,
            schedule,
            seed: 11,
        };
        (ModelParams::init(&cfg).unwrap(), cfg, ex)
    }

    #[test]
    fn heatmap_round_trip_and_cr_rows() {
        let sched = build_schedule(3, 1, 1, BlockOrder::CANONICAL, Scheme::Cr).unwrap();
        let (params, cfg, ex) = tiny_model(sched);
        let p = &ex[0].0;
        let trace = forward(p, &params, &cfg, true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l2h0.csv");
        let side = export_heatmap(&trace, p, 2, 0, &path).unwrap();
        let back = import_heatmap(&path).unwrap();
        let w = trace.weights(2, 0).unwrap();
        assert_eq!(back.shape(), w.shape());
        for (a, b) in back.data().iter().zip(w.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for j in 0..p.len() {
            assert!((back.row(j).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let sidecar = std::fs::read_to_string(side).unwrap();
        assert_eq!(sidecar.lines().count(), p.len() + 1);

        // layer 2 is CR: a non-last item token sees no other item token
        let ann = p.annotations();
        for j in 0..p.len() {
            if ann[j].is_item_token && !ann[j].is_last_of_item {
                for k in 0..p.len() {
                    if k != j && ann[k].is_item_token {
                        assert_eq!(w.at(j, k), 0.0);
                    }
                }
            }
        }
        assert!(export_heatmap(&trace, p, 3, 0, &path).is_err());
        assert!(export_heatmap(&trace, p, 0, 2, &path).is_err());
    }

    #[test]
    fn skew_report_on_random_init() {
        let (bp, bc, ex) = tiny_model(LayerSchedule::uniform(3, Scheme::Or));
        let sched = build_schedule(3, 1, 1, BlockOrder::CANONICAL, Scheme::Cr).unwrap();
        let (hp, hc, _) = tiny_model(sched);
        let r = skew_report((&bp, &bc), (&hp, &hc), &ex).unwrap();
        assert!(r.baseline.intra_mean_per_pair.unwrap().is_finite());
        assert!(r.baseline.cross_mean_per_pair.unwrap().is_finite());
        assert_eq!(r.baseline.n_head_slices, 3 * 2 * 3);
        let schemes: Vec<Scheme> = r.scheduled.iter().map(|s| s.scheme).collect();
        assert_eq!(schemes, vec![Scheme::In, Scheme::Or, Scheme::Cr]);
        assert_eq!(r.scheme(Scheme::Cr).unwrap().n_head_slices, 2 * 3);
        // IN layers put no weight on cross pairs
        assert_eq!(r.scheme(Scheme::In).unwrap().cross_weight_sum, 0.0);
        assert!(r.delta_intra_mean.is_some());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("skew.json");
        r.save_json(&path).unwrap();
        let back: SkewReport =
            serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
        assert_eq!(back.scheduled.len(), 3);
    }
}
