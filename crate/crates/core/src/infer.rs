//! Margin-based answer selection, averaged F1 evaluation and attention heat maps.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::attention::ASPECTS;
use crate::error::ModelError;
use crate::kb::{CandidateAnswer, CandidateSet, KbStore, ResourceId};
use crate::model::Model;
use crate::qa::{QaSplit, Question};

#[derive(Clone, Debug, PartialEq)]
pub struct AnswerSet {
    pub question_id: String,
    /// Selected answers, best first.
    pub answers: Vec<(ResourceId, f64)>,
    /// Every distinct candidate entity with its best score, best first.
    pub ranked: Vec<(ResourceId, f64)>,
    pub s_max: Option<f64>,
    /// No candidates were available.
    pub empty: bool,
}

impl AnswerSet {
    pub fn entities(&self) -> BTreeSet<ResourceId> {
        self.answers.iter().map(|(e, _)| *e).collect()
    }
}

/// Keeps each entity's best score, orders by score (ties by id), and selects
/// every entity strictly within `margin` of the best.
pub fn select_answers(question_id: &str, scored: &[(ResourceId, f64)], margin: f64) -> AnswerSet {
    let mut best: BTreeMap<ResourceId, f64> = BTreeMap::new();
    for &(e, s) in scored {
        best.entry(e).and_modify(|b| *b = b.max(s)).or_insert(s);
    }
    let mut ranked: Vec<(ResourceId, f64)> = best.into_iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let s_max = ranked.first().map(|r| r.1);
    let answers = match s_max {
        Some(top) => ranked.iter().copied().filter(|&(_, s)| top - s < margin).collect(),
        None => Vec::new(),
    };
    AnswerSet { question_id: question_id.to_string(), answers, ranked, s_max, empty: scored.is_empty() }
}

/// Scores every candidate of `question` and applies the margin rule.
pub fn answer(model: &Model, question: &Question, cands: &CandidateSet, margin: f64) -> Result<AnswerSet, ModelError> {
    if cands.is_empty() {
        return Ok(select_answers(&question.id, &[], margin));
    }
    let scores = model.score_candidates(&question.tokens, &cands.candidates)?;
    let scored: Vec<(ResourceId, f64)> = cands.entities().zip(scores).collect();
    Ok(select_answers(&question.id, &scored, margin))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct F1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn f1<E: Ord>(predicted: &BTreeSet<E>, gold: &BTreeSet<E>) -> F1 {
    let hit = predicted.intersection(gold).count() as f64;
    if predicted.is_empty() || gold.is_empty() || hit == 0.0 {
        return F1 { precision: 0.0, recall: 0.0, f1: 0.0 };
    }
    let precision = hit / predicted.len() as f64;
    let recall = hit / gold.len() as f64;
    F1 { precision, recall, f1: 2.0 * precision * recall / (precision + recall) }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub question_id: String,
    pub predicted: Vec<String>,
    pub gold: Vec<String>,
    pub score: F1,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mean_f1: f64,
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("question_id\tpredicted\tgold\tprecision\trecall\tf1\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}",
                r.question_id,
                r.predicted.join("|"),
                r.gold.join("|"),
                r.score.precision,
                r.score.recall,
                r.score.f1
            );
        }
        s
    }
}

/// Averaged F1 over the split; skipped questions count as zero.
pub fn evaluate(
    model: &Model,
    store: &KbStore,
    split: &QaSplit,
    sets: &[CandidateSet],
    margin: f64,
) -> Result<EvalReport, ModelError> {
    assert_eq!(split.questions.len(), sets.len(), "one candidate set per question");
    let names = |ids: &mut dyn Iterator<Item = ResourceId>| ids.map(|e| store.surface(e).to_string()).collect::<Vec<_>>();
    let mut rows: Vec<ReportRow> = split
        .questions
        .par_iter()
        .zip(sets.par_iter())
        .map(|(q, cs)| {
            let picked = answer(model, q, cs, margin)?;
            let pred = picked.entities();
            Ok(ReportRow {
                question_id: q.id.clone(),
                predicted: names(&mut pred.iter().copied()),
                gold: names(&mut q.gold.iter().copied()),
                score: f1(&pred, &q.gold),
            })
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    rows.extend(split.skipped.iter().map(|s| ReportRow {
        question_id: s.id.clone(),
        predicted: Vec::new(),
        gold: s.gold.clone(),
        score: F1 { precision: 0.0, recall: 0.0, f1: 0.0 },
    }));
    let mean_f1 = if rows.is_empty() { 0.0 } else { rows.iter().map(|r| r.score.f1).sum::<f64>() / rows.len() as f64 };
    Ok(EvalReport { mean_f1, rows })
}

/// An aspect label with its weight per token.
pub type LabelledRow = (String, Vec<f64>);

/// Attention of the four aspects of one candidate over the question tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatMap {
    pub tokens: Vec<String>,
    /// Rows in aspect order: entity, relation, type, context.
    pub weights: [Vec<f64>; 4],
    pub caption: String,
}

pub fn heatmap(model: &Model, store: &KbStore, question: &Question, cand: &CandidateAnswer) -> Result<HeatMap, ModelError> {
    let weights = model.attention_map(&question.tokens, cand)?;
    let tokens = if question.words.len() == question.tokens.len() {
        question.words.clone()
    } else {
        vec!["<unk>".to_string(); question.tokens.len()]
    };
    let path: Vec<&str> = cand.relation_path.iter().map(|r| store.surface(*r)).collect();
    let types: Vec<&str> = cand.types.iter().map(|r| store.surface(*r)).collect();
    let caption = format!("answer {} via {} ({})", store.surface(cand.answer), path.join(" / "), types.join(", "));
    Ok(HeatMap { tokens, weights, caption })
}

impl HeatMap {
    /// Tab-separated grid: a header of tokens, then one labelled row per aspect.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("aspect");
        for t in &self.tokens {
            s.push('\t');
            s.push_str(t);
        }
        s.push('\n');
        for (aspect, row) in ASPECTS.iter().zip(&self.weights) {
            s.push_str(aspect.label());
            for w in row {
                let _ = write!(s, "\t{w:.6}");
            }
            s.push('\n');
        }
        s
    }

    /// Parses the grid written by [`HeatMap::to_tsv`].
    pub fn parse_tsv(text: &str) -> Option<(Vec<String>, Vec<LabelledRow>)> {
        let mut lines = text.lines();
        let header: Vec<String> = lines.next()?.split('\t').skip(1).map(String::from).collect();
        let mut rows = Vec::new();
        for line in lines {
            let mut cells = line.split('\t');
            let label = cells.next()?.to_string();
            let vals = cells.map(|c| c.parse::<f64>().ok()).collect::<Option<Vec<_>>>()?;
            if vals.len() != header.len() {
                return None;
            }
            rows.push((label, vals));
        }
        Some((header, rows))
    }

    pub fn to_svg(&self) -> String {
        const CELL_W: usize = 72;
        const CELL_H: usize = 36;
        const LEFT: usize = 90;
        const TOP: usize = 40;
        let n = self.tokens.len();
        let width = LEFT + CELL_W * n + 20;
        let height = TOP + CELL_H * 4 + 50;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="13">"#
        );
        let _ = writeln!(s, r#"<text x="{LEFT}" y="20">{}</text>"#, xml_escape(&self.caption));
        for (i, (aspect, row)) in ASPECTS.iter().zip(&self.weights).enumerate() {
            let y = TOP + i * CELL_H;
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
                LEFT - 8,
                y + CELL_H / 2 + 4,
                aspect.label()
            );
            for (j, &w) in row.iter().enumerate() {
                let x = LEFT + j * CELL_W;
                let shade = (255.0 * (1.0 - w.clamp(0.0, 1.0))).round() as u8;
                let _ = writeln!(
                    s,
                    r#"<rect x="{x}" y="{y}" width="{CELL_W}" height="{CELL_H}" fill="rgb(255,{shade},{shade})" stroke="gray"><title>{:.4}</title></rect>"#,
                    w
                );
            }
        }
        for (j, tok) in self.tokens.iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
                LEFT + j * CELL_W + CELL_W / 2,
                TOP + 4 * CELL_H + 20,
                xml_escape(tok)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
