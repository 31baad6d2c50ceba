//! Routing-behavior measurements: per-token compute maps, modality
//! compute shares, polarization histograms, and SVG heatmaps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::Real;
use crate::router::Routing;
use crate::trainer::synth::{Modality, TokenMeta};

/// Compute score of one token.
#[derive(Debug, Clone, PartialEq)]
pub struct ComputeEntry {
    pub seq_id: usize,
    pub pos: usize,
    pub modality: Modality,
    pub redundant: bool,
    pub template: Option<usize>,
    pub task: usize,
    /// Mean over layers of `r / k_max`, in `[0, 1]`.
    pub score: Real,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComputeMap {
    pub k_max: usize,
    pub n_layers: usize,
    /// Real-expert selections summed over tokens and layers.
    pub real_selections: u64,
    pub entries: Vec<ComputeEntry>,
}

/// Per-token score from each layer's routing decisions over the same batch.
pub fn compute_map(layers: &[&Routing], meta: &[TokenMeta]) -> Result<ComputeMap> {
    let first = layers
        .first()
        .ok_or_else(|| Error::Report("compute map needs at least one layer".into()))?;
    let k = first.k_max;
    let t = meta.len();
    if layers.iter().any(|r| r.n_tokens() != t || r.k_max != k) {
        return Err(Error::Report("layer decisions disagree with the batch".into()));
    }
    let mut real_selections = 0u64;
    let mut sums = vec![0usize; t];
    for r in layers {
        for (s, tok) in sums.iter_mut().zip(&r.tokens) {
            *s += tok.r();
            real_selections += tok.r() as u64;
        }
    }
    let denom = (layers.len() * k) as Real;
    let entries = meta
        .iter()
        .zip(&sums)
        .map(|(m, &s)| ComputeEntry {
            seq_id: m.seq_id,
            pos: m.pos,
            modality: m.modality,
            redundant: m.redundant,
            template: m.template,
            task: m.task,
            score: s as Real / denom,
        })
        .collect();
    Ok(ComputeMap {
        k_max: k,
        n_layers: layers.len(),
        real_selections,
        entries,
    })
}

/// Shares and intensity of one token group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupShare {
    pub name: String,
    pub tokens: usize,
    pub token_share: Real,
    pub compute_share: Real,
    pub compute_intensity: Real,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalityReport {
    pub groups: Vec<GroupShare>,
}

impl ModalityReport {
    pub fn get(&self, name: &str) -> Option<&GroupShare> {
        self.groups.iter().find(|g| g.name == name)
    }
}

/// Shares grouped by modality.
pub fn modality_report(map: &ComputeMap) -> Result<ModalityReport> {
    group_report(map, |e| e.modality.as_str().to_string())
}

/// Shares grouped by an arbitrary key (groups sorted by key).
pub fn group_report<F>(map: &ComputeMap, key: F) -> Result<ModalityReport>
where
    F: Fn(&ComputeEntry) -> String,
{
    if map.entries.is_empty() {
        return Err(Error::Report("empty compute map".into()));
    }
    let mut acc: BTreeMap<String, (usize, Real)> = BTreeMap::new();
    for e in &map.entries {
        let slot = acc.entry(key(e)).or_insert((0, 0.0));
        slot.0 += 1;
        slot.1 += e.score;
    }
    let total_tokens = map.entries.len() as Real;
    let total_score: Real = acc.values().map(|v| v.1).sum();
    let groups = acc
        .into_iter()
        .map(|(name, (tokens, score))| GroupShare {
            name,
            tokens,
            token_share: tokens as Real / total_tokens,
            compute_share: if total_score > 0.0 { score / total_score } else { 0.0 },
            compute_intensity: score / tokens as Real,
        })
        .collect();
    Ok(ModalityReport { groups })
}

/// Fractions of (token, layer) pairs with `r = 0..=k_max` real experts.
pub fn polarization_hist(layers: &[&Routing]) -> Result<Vec<Real>> {
    let first = layers
        .first()
        .ok_or_else(|| Error::Report("polarization needs at least one layer".into()))?;
    let k = first.k_max;
    let mut counts = vec![0usize; k + 1];
    for r in layers {
        if r.k_max != k {
            return Err(Error::Report("layers disagree on k_max".into()));
        }
        for tok in &r.tokens {
            counts[tok.r()] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Report("no tokens to histogram".into()));
    }
    Ok(counts.iter().map(|&c| c as Real / total as Real).collect())
}

/// `Σ r · hist[r]`, the realized mean real-expert count.
pub fn hist_mean(hist: &[Real]) -> Real {
    hist.iter().enumerate().map(|(r, p)| r as Real * p).sum()
}

/// Mass at the extremes `r = 0` and `r = k_max`.
pub fn extreme_mass(hist: &[Real]) -> Real {
    match hist.len() {
        0 => 0.0,
        1 => hist[0],
        n => hist[0] + hist[n - 1],
    }
}

// ---------------------------------------------------------------------------
// SVG
// ---------------------------------------------------------------------------

const CELL: usize = 16;
const LEGEND_H: usize = 28;

fn gray(score: Real) -> u8 {
    (score.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn rect(svg: &mut String, x: usize, y: usize, score: Real, label: &str) {
    let g = gray(score);
    let _ = writeln!(
        svg,
        r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="rgb({g},{g},{g})"><title>{label}: {score:.3}</title></rect>"#
    );
}

fn legend(svg: &mut String, y: usize, width: usize) {
    let _ = writeln!(
        svg,
        r#"<defs><linearGradient id="scale"><stop offset="0" stop-color="rgb(0,0,0)"/><stop offset="1" stop-color="rgb(255,255,255)"/></linearGradient></defs>"#
    );
    let bar = width.max(4 * CELL);
    let _ = writeln!(
        svg,
        r#"<g class="legend"><rect x="0" y="{y}" width="{bar}" height="8" fill="url(#scale)" stroke="gray"/><text x="0" y="{}" font-size="9">0 (all null)</text><text x="{bar}" y="{}" font-size="9" text-anchor="end">1 (all real)</text></g>"#,
        y + 20,
        y + 20
    );
}

fn open_svg(width: usize, height: usize) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    s
}

/// Grid heatmap with one grayscale cell per score (black = 0, white = 1).
pub fn render_heatmap(scores: &[Real], rows: usize, cols: usize) -> Result<String> {
    if rows * cols != scores.len() || scores.is_empty() {
        return Err(Error::Report(format!(
            "{} scores do not fill a {rows}x{cols} grid",
            scores.len()
        )));
    }
    let width = (cols * CELL).max(4 * CELL);
    let height = rows * CELL + LEGEND_H;
    let mut svg = open_svg(width, height);
    svg.push_str("<g class=\"cells\">\n");
    for (i, &s) in scores.iter().enumerate() {
        rect(&mut svg, (i % cols) * CELL, (i / cols) * CELL, s, &format!("cell {i}"));
    }
    svg.push_str("</g>\n");
    legend(&mut svg, rows * CELL + 4, width);
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// One sequence: vision tokens as a `rows × cols` grid, other tokens as a
/// strip underneath in position order.
pub fn render_sequence(map: &ComputeMap, seq_id: usize, rows: usize, cols: usize) -> Result<String> {
    let mut tokens: Vec<&ComputeEntry> = map.entries.iter().filter(|e| e.seq_id == seq_id).collect();
    tokens.sort_by_key(|e| e.pos);
    let vision: Vec<&&ComputeEntry> = tokens.iter().filter(|e| e.modality == Modality::Vision).collect();
    let strip: Vec<&&ComputeEntry> = tokens.iter().filter(|e| e.modality != Modality::Vision).collect();
    if vision.len() != rows * cols {
        return Err(Error::Report(format!(
            "sequence {seq_id} has {} vision tokens, grid is {rows}x{cols}",
            vision.len()
        )));
    }
    let strip_cols = cols.max(1);
    let strip_rows = strip.len().div_ceil(strip_cols);
    let gap = if strip.is_empty() { 0 } else { CELL / 2 };
    let width = (cols * CELL).max(4 * CELL);
    let height = rows * CELL + gap + strip_rows * CELL + LEGEND_H;
    let mut svg = open_svg(width, height);
    svg.push_str("<g class=\"vision\">\n");
    for (i, e) in vision.iter().enumerate() {
        rect(&mut svg, (i % cols) * CELL, (i / cols) * CELL, e.score, &format!("pos {}", e.pos));
    }
    svg.push_str("</g>\n<g class=\"text\">\n");
    let top = rows * CELL + gap;
    for (i, e) in strip.iter().enumerate() {
        rect(
            &mut svg,
            (i % strip_cols) * CELL,
            top + (i / strip_cols) * CELL,
            e.score,
            &format!("pos {}", e.pos),
        );
    }
    svg.push_str("</g>\n");
    legend(&mut svg, top + strip_rows * CELL + 4, width);
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Most square `rows × cols` factorization of `n` with `rows <= cols`.
pub fn grid_dims(n: usize) -> (usize, usize) {
    if n == 0 {
        return (0, 0);
    }
    let mut best = (1, n);
    let mut r = 1;
    while r * r <= n {
        if n % r == 0 {
            best = (r, n / r);
        }
        r += 1;
    }
    best
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

#[derive(Serialize)]
struct ModalityRow<'a> {
    step: u64,
    modality: &'a str,
    token_share: Real,
    compute_share: Real,
    compute_intensity: Real,
}

pub fn write_modality_csv(path: &Path, rows: &[(u64, &ModalityReport)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for (step, report) in rows {
        for g in &report.groups {
            w.serialize(ModalityRow {
                step: *step,
                modality: &g.name,
                token_share: g.token_share,
                compute_share: g.compute_share,
                compute_intensity: g.compute_intensity,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_polarization_csv(path: &Path, rows: &[(u64, &[Real])]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["step", "r", "token_fraction"])?;
    for (step, hist) in rows {
        for (r, frac) in hist.iter().enumerate() {
            w.serialize((*step, r, *frac))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_map_csv(path: &Path, map: &ComputeMap) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["seq_id", "pos", "modality", "redundant", "template", "task", "score"])?;
    for e in &map.entries {
        w.serialize((e.seq_id, e.pos, e.modality.as_str(), u8::from(e.redundant), e.template, e.task, e.score))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(all(test, not(feature = "f32")))]
mod tests {
    use super::*;
    use crate::numerics::Matrix;
    use crate::router::{route_logits, NullVariant, RoutingConfig, TokenRoute};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn meta(modalities: &[Modality]) -> Vec<TokenMeta> {
        modalities
            .iter()
            .enumerate()
            .map(|(i, &m)| TokenMeta {
                seq_id: 0,
                pos: i,
                modality: m,
                redundant: false,
                template: None,
                task: 0,
                task_token: false,
            })
            .collect()
    }

    /// Routing stub carrying only the per-token real counts.
    fn with_counts(k: usize, counts: &[usize]) -> Routing {
        let t = counts.len();
        Routing {
            n_experts: k,
            n_null: k,
            k_max: k,
            variant: NullVariant::Zero,
            logits: Matrix::zeros(t, k + 1),
            expanded_logits: Matrix::zeros(t, 2 * k),
            probs: Matrix::filled(t, 2 * k, 0.5 / k as Real),
            tokens: counts
                .iter()
                .map(|&r| TokenRoute {
                    slots: (0..r).chain(k..2 * k - r).collect(),
                    selected_real: (0..r).collect(),
                    gates: vec![1.0 / r.max(1) as Real; r],
                })
                .collect(),
        }
    }

    #[test]
    fn score_is_layer_mean() {
        let m = meta(&[Modality::Text]);
        let a = with_counts(4, &[2]);
        let b = with_counts(4, &[4]);
        let map = compute_map(&[&a, &b], &m).unwrap();
        assert_eq!(map.entries[0].score, 0.75);
        let z = with_counts(4, &[0]);
        assert_eq!(compute_map(&[&z], &m).unwrap().entries[0].score, 0.0);
    }

    #[test]
    fn dense_routing_scores_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = RoutingConfig::new(6, 2, 1.0, NullVariant::Zero).unwrap();
        let r = route_logits(Matrix::random_normal(10, 7, 1.0, &mut rng), &cfg).unwrap();
        let map = compute_map(&[&r], &meta(&[Modality::Vision; 10])).unwrap();
        assert!(map.entries.iter().all(|e| e.score == 1.0));
    }

    #[test]
    fn uniform_scores_give_token_shares() {
        let mods = [Modality::Vision, Modality::Vision, Modality::Text, Modality::Vision];
        let r = with_counts(2, &[1, 1, 1, 1]);
        let rep = modality_report(&compute_map(&[&r], &meta(&mods)).unwrap()).unwrap();
        for g in &rep.groups {
            assert!((g.compute_share - g.token_share).abs() < 1e-15);
        }
    }

    #[test]
    fn constructed_shares_reproduce_text_majority() {
        // 78 vision tokens at intensity 0.04, 22 text at 0.22, via scores
        let mut entries = Vec::new();
        for i in 0..100 {
            let (modality, score) = if i < 78 { (Modality::Vision, 0.04) } else { (Modality::Text, 0.22) };
            entries.push(ComputeEntry {
                seq_id: 0,
                pos: i,
                modality,
                redundant: false,
                template: None,
                task: 0,
                score,
            });
        }
        let map = ComputeMap {
            k_max: 4,
            n_layers: 1,
            real_selections: 0,
            entries,
        };
        let rep = modality_report(&map).unwrap();
        let text = rep.get("text").unwrap();
        let expect = 0.22 * 0.22 / (0.78 * 0.04 + 0.22 * 0.22);
        assert!((text.compute_share - expect).abs() < 1e-12);
        assert!((text.compute_share - 0.608).abs() < 1e-3);
        let total: Real = rep.groups.iter().map(|g| g.compute_share).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_modality_takes_all_compute() {
        let r = with_counts(2, &[1, 2]);
        let rep = modality_report(&compute_map(&[&r], &meta(&[Modality::Text; 2])).unwrap()).unwrap();
        assert_eq!(rep.groups.len(), 1);
        assert_eq!(rep.groups[0].compute_share, 1.0);
        let empty = ComputeMap {
            k_max: 2,
            n_layers: 1,
            real_selections: 0,
            entries: vec![],
        };
        assert!(modality_report(&empty).is_err());
    }

    #[test]
    fn report_accounting_and_histogram_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let k = rng.gen_range(1..6);
            let t = rng.gen_range(1..40);
            let layers: Vec<Routing> = (0..rng.gen_range(1..4))
                .map(|_| with_counts(k, &(0..t).map(|_| rng.gen_range(0..=k)).collect::<Vec<_>>()))
                .collect();
            let refs: Vec<&Routing> = layers.iter().collect();
            let mods: Vec<Modality> = (0..t)
                .map(|_| if rng.gen_bool(0.7) { Modality::Vision } else { Modality::Text })
                .collect();
            let map = compute_map(&refs, &meta(&mods)).unwrap();
            let rep = modality_report(&map).unwrap();
            let tok: Real = rep.groups.iter().map(|g| g.token_share).sum();
            assert!((tok - 1.0).abs() < 1e-12);
            let selections: Real = rep
                .groups
                .iter()
                .map(|g| g.token_share * g.compute_intensity * t as Real * k as Real)
                .sum();
            let per_layer = map.real_selections as Real / layers.len() as Real;
            assert!((selections - per_layer).abs() < 1e-9);
            if map.real_selections > 0 {
                let cs: Real = rep.groups.iter().map(|g| g.compute_share).sum();
                assert!((cs - 1.0).abs() < 1e-12);
            }
            let hist = polarization_hist(&refs).unwrap();
            // counting oracle
            for r in 0..=k {
                let c = layers.iter().flat_map(|l| &l.tokens).filter(|x| x.r() == r).count();
                assert_eq!(hist[r], c as Real / (t * layers.len()) as Real);
            }
            let mean_score: Real = map.entries.iter().map(|e| e.score).sum::<Real>() / t as Real;
            assert!((hist_mean(&hist) - mean_score * k as Real).abs() < 1e-12);
        }
    }

    #[test]
    fn full_real_histogram() {
        let r = with_counts(3, &[3, 3, 3]);
        assert_eq!(polarization_hist(&[&r]).unwrap(), vec![0.0, 0.0, 0.0, 1.0]);
    }

    fn rect_fills(svg: &str) -> Vec<String> {
        let doc = roxmltree::Document::parse(svg).unwrap();
        doc.descendants()
            .filter(|n| n.has_tag_name("rect") && n.ancestors().any(|a| a.attribute("class") == Some("cells")))
            .map(|n| n.attribute("fill").unwrap().to_string())
            .collect()
    }

    #[test]
    fn single_black_cell() {
        let svg = render_heatmap(&[0.0], 1, 1).unwrap();
        assert_eq!(rect_fills(&svg), vec!["rgb(0,0,0)"]);
        assert!(svg.contains("legend"));
    }

    #[test]
    fn checker_pattern() {
        let svg = render_heatmap(&[0.0, 1.0, 1.0, 0.0], 2, 2).unwrap();
        assert_eq!(
            rect_fills(&svg),
            vec!["rgb(0,0,0)", "rgb(255,255,255)", "rgb(255,255,255)", "rgb(0,0,0)"]
        );
        assert!(render_heatmap(&[0.0; 3], 2, 2).is_err());
    }

    #[test]
    fn sequence_render_is_well_formed() {
        let mods: Vec<Modality> = (0..8)
            .map(|i| if i < 6 { Modality::Vision } else { Modality::Text })
            .collect();
        let r = with_counts(2, &[0, 1, 2, 0, 1, 2, 2, 1]);
        let map = compute_map(&[&r], &meta(&mods)).unwrap();
        let svg = render_sequence(&map, 0, 2, 3).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let n_rects = doc
            .descendants()
            .filter(|n| n.has_tag_name("rect") && n.parent().and_then(|p| p.attribute("class")).is_some_and(|c| c == "vision" || c == "text"))
            .count();
        assert_eq!(n_rects, 8);
        assert!(render_sequence(&map, 0, 3, 3).is_err());
    }

    #[test]
    fn grid_dims_factorize() {
        assert_eq!(grid_dims(50), (5, 10));
        assert_eq!(grid_dims(49), (7, 7));
        assert_eq!(grid_dims(13), (1, 13));
    }
}
